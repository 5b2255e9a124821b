//! Property tests for the invariants that hold on every input.

use cogrelay::master::{self, AllocationVector};
use cogrelay::model::{partition_segments, PairProbabilities, PairTable, PuActivityState, Segment, Topology};
use cogrelay::oracle::{self, ExchangeInstance, TinyInstance};
use cogrelay::seed;
use cogrelay::subpolicy::{
    self, offline_recursion, CalibratedPolicy, PowerLimits, SegmentProblem, SolverSettings,
};
use proptest::prelude::*;

fn positions(max_nodes: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..3.0, 1..max_nodes).prop_map(|gaps| {
        let mut x = vec![0.0];
        for g in gaps {
            x.push(x.last().unwrap() + g);
        }
        x
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn partition_covers_available_nodes(bits in prop::collection::vec(any::<bool>(), 1..12)) {
        let state = PuActivityState::new(bits.clone());
        let segs = partition_segments(&state);
        let mut rebuilt = vec![false; bits.len()];
        let mut prev_end: Option<usize> = None;
        for s in &segs {
            if let Some(e) = prev_end {
                // disjoint, ordered, separated by at least one gap
                prop_assert!(s.head > e + 1);
            }
            for m in s.head..=s.end {
                prop_assert!(!rebuilt[m]);
                rebuilt[m] = true;
            }
            prev_end = Some(s.end);
        }
        prop_assert_eq!(rebuilt, bits);
    }

    #[test]
    fn ordered_lines_are_path_loss_dominated(x in positions(8), alpha in 1.5f64..5.0) {
        let topo = Topology::new(x, alpha).unwrap();
        prop_assert!(topo.is_path_loss_dominated());
        for i in 0..=topo.last() {
            for j in 0..=topo.last() {
                if i != j {
                    prop_assert_eq!(topo.gain(i, j), topo.gain(j, i));
                    prop_assert!(topo.gain(i, j) > 0.0 && topo.gain(i, j).is_finite());
                }
            }
        }
    }

    #[test]
    fn segment_probabilities_count_available_nodes(last in 1usize..10, p in 0.0f64..=1.0) {
        let probs = PairProbabilities::iid(last, p).unwrap();
        let mut weighted = 0.0;
        for i in 0..=last {
            for j in i..=last {
                weighted += probs.get(i, j) * (j - i + 1) as f64;
            }
        }
        prop_assert!((weighted - (last + 1) as f64 * p).abs() <= 1e-12 * (last + 1) as f64);
    }

    #[test]
    fn stationarity_residual_is_tiny(lg in -2.0f64..2.0, lp in -1.0f64..3.0, frac in 0.001f64..0.999) {
        let (g, pbar) = (10f64.powf(lg), 10f64.powf(lp));
        let lambda = frac / pbar;
        let p = subpolicy::solve_optimal_power(g, pbar, lambda, PowerLimits::relative(pbar, 1e-6, 1e12)).unwrap();
        prop_assert!((subpolicy::foc_lhs(g, p, pbar) - lambda).abs() <= 1e-9);
    }

    #[test]
    fn stationarity_lhs_is_non_increasing(lg in -2.0f64..2.0, pbar in 0.1f64..100.0, a in 0.0f64..50.0, b in 0.0f64..50.0) {
        let g = 10f64.powf(lg);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (lo, hi) = (lo * pbar + 1e-9, hi * pbar + 1e-9);
        prop_assert!(subpolicy::foc_lhs(g, hi, pbar) <= subpolicy::foc_lhs(g, lo, pbar) * (1.0 + 1e-12));
    }

    #[test]
    fn hop_time_decreases_with_snr(g in 1e-3f64..1e3, p in 1e-3f64..1e3, k in 1.0f64..10.0) {
        let t1 = subpolicy::per_hop_time(g, p).unwrap();
        let t2 = subpolicy::per_hop_time(g, p * k).unwrap();
        prop_assert!(t1 > 0.0 && t2 <= t1);
    }

    #[test]
    fn flow_balance_identity_holds(last in 2usize..=8, s in any::<u64>()) {
        let mut rng = seed::stream(s, &[0]);
        let (pr, u) = oracle::random_pair_tables(&mut rng, last);
        for m in 1..last {
            prop_assert!(master::flow_balance_identity(m, &pr, &u).unwrap().abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_is_feasible_and_complementary(
        y in prop::collection::vec(0.0f64..50.0, 5),
        w in prop::collection::vec(0.01f64..1.0, 5),
        p0 in 1.0f64..100.0,
    ) {
        let alloc = AllocationVector {
            last: 5,
            pairs: (1..=5).map(|j| Segment::new(0, j)).collect(),
            prob: w.clone(),
            pbar: y.clone(),
        };
        let floor = 1e-6 * p0;
        let x = master::project(&alloc, p0, floor).unwrap();
        let used: f64 = x.pbar.iter().zip(&w).map(|(a, b)| a * b).sum();
        prop_assert!(used <= p0 * (1.0 + 1e-9));
        // x = max(floor, y - nu) with one shift nu >= 0 for every unclamped entry
        let shifts: Vec<f64> = x.pbar.iter().zip(&y).filter(|(xi, _)| **xi > floor).map(|(xi, yi)| yi - xi).collect();
        for s in &shifts {
            prop_assert!(*s >= -1e-9);
            prop_assert!((s - shifts[0]).abs() <= 1e-7 * (1.0 + shifts[0].abs()));
        }
        if shifts.first().is_some_and(|s| *s > 1e-7) {
            prop_assert!((used - p0).abs() <= 1e-8 * p0);
        }
        let again = master::project(&x, p0, floor).unwrap();
        for (a, b) in again.pbar.iter().zip(&x.pbar) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b));
        }
    }

    #[test]
    fn subgradient_is_non_negative(rates in prop::collection::vec(0.1f64..5.0, 10), slopes in prop::collection::vec(0.0f64..1.0, 10)) {
        let probs = PairProbabilities::iid(4, 0.7).unwrap();
        let alloc = AllocationVector::uniform(&probs, 10.0, 1e-9).unwrap();
        let points: Vec<master::RatePoint<f64>> = (0..alloc.len())
            .map(|k| master::RatePoint { rate: rates[k], rate_se: 0.0, slope: slopes[k], lambda: slopes[k], power: 1.0 })
            .collect();
        for g in master::subgradient_from(&alloc, &points, 1e-2) {
            prop_assert!(g >= 0.0);
        }
    }

    #[test]
    fn sequence_inequality(s in any::<u64>()) {
        let mut rng = seed::stream(s, &[1]);
        prop_assert!(oracle::verify_sequence_lemma(&mut rng));
    }

    #[test]
    fn exchange_equality(
        a in prop::collection::vec(prop::collection::vec(0i64..10, 3), 1..4),
        f in prop::collection::vec(prop::collection::vec(-20i64..20, 1..4), 3),
    ) {
        let inst = ExchangeInstance { a, f };
        prop_assert!(oracle::verify_exchange_lemma(&inst));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn episodes_hop_forward_and_end_at_the_segment_end(
        x in positions(6),
        lambda_frac in 0.0f64..0.9,
        s in any::<u64>(),
    ) {
        let topo = Topology::new(x, 3.0).unwrap();
        let seg = Segment::new(0, topo.last());
        let settings = SolverSettings { mc_samples: 200, ..SolverSettings::default() };
        let problem = SegmentProblem::new(&topo, seg, 10.0, &settings).unwrap();
        let lambda = lambda_frac / 10.0;
        let mut rng = seed::stream(s, &[2]);
        let table = offline_recursion(&problem, lambda, &mut rng).unwrap();
        // cost-to-go: zero at the end, positive before it (it need not
        // decrease along irregular placements)
        prop_assert_eq!(table.cost(seg.hops()), 0.0);
        for k in 0..seg.hops() {
            prop_assert!(table.cost(k) > 0.0 && table.cost(k).is_finite());
        }
        let policy = CalibratedPolicy::fixed(problem, lambda, table);
        for _ in 0..20 {
            let ep = policy.run_segment_episode(&mut rng);
            let hops = ep.hop_sequence();
            prop_assert_eq!(hops[0], seg.head);
            prop_assert_eq!(*hops.last().unwrap(), seg.end);
            prop_assert!(hops.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(ep.frames.len() <= seg.hops());
            prop_assert!(ep.candidate_evaluations <= seg.hops() * seg.hops());
        }
    }

    #[test]
    fn recursion_matches_enumeration(
        spacing in 0.5f64..3.0,
        alpha in 2.0f64..4.0,
        lo in 0.1f64..1.0,
        hi in 1.0f64..3.0,
        q in 0.1f64..0.9,
        lambda_frac in 0.0f64..0.9,
    ) {
        let inst = TinyInstance::new(
            Topology::uniform(3, 2.0 * spacing, alpha).unwrap(),
            vec![lo, hi],
            vec![q, 1.0 - q],
            vec![0.5, 2.0, 8.0],
            0.9,
        )
        .unwrap();
        let pbar = 4.0;
        let problem = inst.segment_problem(Segment::new(0, 2), pbar).unwrap();
        let lambda = lambda_frac / pbar;
        let table = offline_recursion(&problem, lambda, &mut seed::stream(0, &[0])).unwrap();
        let brute = oracle::brute_force_lagrangian(&problem, lambda).unwrap();
        prop_assert!((table.cost(0) - brute).abs() <= 1e-12 * brute);
    }

    #[test]
    fn policy_never_beats_the_oracles(pbar in 1.0f64..30.0, q in 0.1f64..0.9) {
        let mut inst = oracle::reference_instance();
        inst.fading_probs = vec![q, 1.0 - q];
        let problem = inst.segment_problem(Segment::new(0, 2), pbar).unwrap();
        let lb = oracle::lagrangian_policy(&problem, 1e-2).unwrap().exact_metrics().unwrap();
        let opt = oracle::brute_force_subproblem(&problem, pbar).unwrap();
        let bound = oracle::causal_upper_bound(&problem, pbar).unwrap();
        prop_assert!(lb.power <= pbar * (1.0 + 1e-12));
        prop_assert!(lb.rate <= opt.rate * (1.0 + 1e-12));
        prop_assert!(opt.rate <= bound * (1.0 + 1e-9));
    }
}

#[test]
fn multiplier_is_non_increasing_in_the_budget() {
    let inst = TinyInstance::new(
        Topology::uniform(4, 3.0, 3.0).unwrap(),
        vec![0.4, 1.6],
        vec![0.5, 0.5],
        vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
        1.0,
    )
    .unwrap();
    let mut prev = f64::INFINITY;
    for k in 1..=12 {
        let pbar = 2.0 * k as f64;
        let problem = inst.segment_problem(Segment::new(0, 3), pbar).unwrap();
        let policy = oracle::lagrangian_policy(&problem, 1e-2).unwrap();
        assert!(policy.lambda <= prev * (1.0 + 1e-12), "lambda rose at pbar {pbar}");
        prev = policy.lambda;
    }
}

#[test]
fn pair_tables_round_trip() {
    let t = PairTable::from_fn(6, |i, j| (i * 10 + j) as f64);
    for ((i, j), v) in t.iter() {
        assert_eq!(*v, (i * 10 + j) as f64);
    }
}
