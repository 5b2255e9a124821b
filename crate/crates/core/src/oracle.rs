//! Brute-force and algebraic cross-checks.
//!
//! Everything here is deliberately naive: policies are enumerated, sums
//! are taken over every channel realisation, and the lemma checks run in
//! exact integer or rational arithmetic. The instances are therefore tiny
//! (at most four nodes, three fading levels and eight power levels) and an
//! enumeration refuses to start when it would visit more than
//! [`ENUMERATION_LIMIT`] policies.

use std::collections::HashMap;
use std::time::Instant;

use num_traits::Num;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::master::{self, solve_master, CalibratedRateModel, MasterOptions, MasterSolution};
use crate::model::{PairProbabilities, PairTable, Segment, Topology};
use crate::scalar::mean_and_se;
use crate::seed;
use crate::subpolicy::{
    self, calibrate_with, CalibratedPolicy, CalibrationBanks, CalibrationOptions, FadingModel, PowerRule,
    ScenarioSet, SegmentProblem,
};

pub const ENUMERATION_LIMIT: u128 = 10_000_000;

/// Desk-scale instance: a line of nodes with discrete fading and a finite
/// power grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyInstance {
    pub topology: Topology<f64>,
    /// `|H|^2` levels and their probabilities.
    pub fading_levels: Vec<f64>,
    pub fading_probs: Vec<f64>,
    /// Absolute transmit power levels.
    pub power_levels: Vec<f64>,
    /// `Pr(A_m = 1)`, i.i.d. over nodes.
    pub p_avail: f64,
}

impl TinyInstance {
    pub fn new(
        topology: Topology<f64>,
        fading_levels: Vec<f64>,
        fading_probs: Vec<f64>,
        power_levels: Vec<f64>,
        p_avail: f64,
    ) -> Result<Self> {
        let inst = Self {
            topology,
            fading_levels,
            fading_probs,
            power_levels,
            p_avail,
        };
        if inst.fading_levels.len() > 3 || inst.power_levels.len() > 8 {
            return Err(domain("tiny instances allow at most 3 fading and 8 power levels"));
        }
        if !(0.0..=1.0).contains(&inst.p_avail) {
            return Err(domain("p_avail must lie in [0,1]"));
        }
        // builds and validates one problem as a smoke check
        inst.segment_problem(Segment::new(0, 1), 1.0)?;
        Ok(inst)
    }

    /// The discretised problem of one segment at budget `pbar`.
    pub fn segment_problem(&self, seg: Segment, pbar: f64) -> Result<SegmentProblem<f64>> {
        if seg.end > self.topology.last() || seg.head >= seg.end {
            return Err(domain("segment outside the instance"));
        }
        let ls = (seg.head..=seg.end)
            .map(|a| (seg.head..=seg.end).map(|b| self.topology.gain(a, b)).collect())
            .collect();
        SegmentProblem::with_gains(
            seg,
            ls,
            pbar,
            PowerRule::Grid {
                levels: self.power_levels.clone(),
            },
            FadingModel::Discrete {
                levels: self.fading_levels.clone(),
                probs: self.fading_probs.clone(),
            },
            1,
        )
    }

    pub fn probabilities(&self) -> Result<PairProbabilities<f64>> {
        PairProbabilities::iid(self.topology.last(), self.p_avail)
    }
}

/// Exact performance of one deterministic policy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyValue {
    /// `E[1 / sum T]`.
    pub rate: f64,
    /// `E[sum P T / sum T]`.
    pub power: f64,
    /// `E[sum T + lambda (sum P T - pbar sum T)]`.
    pub lagrangian: f64,
}

/// Policy space of a discrete segment: one action `(next hop, power
/// level)` per `(node, channel state)`.
struct Space {
    hops: usize,
    pbar: f64,
    powers: Vec<f64>,
    /// Per node: channel-state weights.
    weights: Vec<Vec<f64>>,
    /// Per node, state, action: per-nat time.
    times: Vec<Vec<Vec<f64>>>,
    /// First digit of each node in a policy vector.
    offsets: Vec<usize>,
    /// Radix of every digit.
    radix: Vec<u32>,
}

impl Space {
    fn new(problem: &SegmentProblem<f64>) -> Result<Self> {
        let PowerRule::Grid { levels } = &problem.power else {
            return Err(domain("enumeration needs a power grid"));
        };
        let set = ScenarioSet::exact(problem).ok_or_else(|| domain("enumeration needs discrete fading"))?;
        let hops = problem.hops();
        let np = levels.len();
        let mut weights = Vec::new();
        let mut times = Vec::new();
        let mut offsets = Vec::new();
        let mut radix = Vec::new();
        for s in 0..hops {
            offsets.push(radix.len());
            let n = set.scenario_count(s);
            let actions = (hops - s) * np;
            weights.push((0..n).map(|k| set.weight(s, k)).collect());
            times.push(
                (0..n)
                    .map(|k| {
                        let g = set.gains(s, k);
                        (0..actions)
                            .map(|a| {
                                let (m, p) = (a / np, levels[a % np]);
                                (g[m] * p).ln_1p().recip()
                            })
                            .collect()
                    })
                    .collect(),
            );
            radix.extend(std::iter::repeat(actions as u32).take(n));
        }
        Ok(Self {
            hops,
            pbar: problem.pbar,
            powers: levels.clone(),
            weights,
            times,
            offsets,
            radix,
        })
    }

    fn count(&self) -> u128 {
        self.radix
            .iter()
            .try_fold(1u128, |acc, &r| acc.checked_mul(r as u128))
            .unwrap_or(u128::MAX)
    }

    fn guard(&self) -> Result<()> {
        let size = self.count();
        if size > ENUMERATION_LIMIT {
            return Err(Error::Guard {
                size,
                limit: ENUMERATION_LIMIT,
            });
        }
        Ok(())
    }

    #[inline]
    fn action(&self, s: usize, a: u32) -> (usize, f64) {
        let np = self.powers.len();
        (s + 1 + a as usize / np, self.powers[a as usize % np])
    }

    /// Recursive walk over the channel states actually visited.
    fn eval_walk(&self, digits: &[u32], lambda: f64) -> PolicyValue {
        let mut out = PolicyValue::default();
        self.walk(digits, lambda, 0, 1.0, 0.0, 0.0, &mut out);
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn walk(&self, digits: &[u32], lambda: f64, s: usize, w: f64, tau: f64, eps: f64, out: &mut PolicyValue) {
        if s == self.hops {
            out.rate += w / tau;
            out.power += w * eps / tau;
            out.lagrangian += w * (tau + lambda * (eps - self.pbar * tau));
            return;
        }
        for (k, &wk) in self.weights[s].iter().enumerate() {
            if wk == 0.0 {
                continue;
            }
            let a = digits[self.offsets[s] + k];
            let (m, p) = self.action(s, a);
            let t = self.times[s][k][a as usize];
            self.walk(digits, lambda, m, w * wk, tau + t, eps + p * t, out);
        }
    }

    /// Every joint channel realisation `(k_0, ..., k_{L-1})` with its
    /// probability.
    fn realisations(&self) -> Vec<(f64, Vec<usize>)> {
        let mut out = vec![(1.0, Vec::new())];
        for s in 0..self.hops {
            out = out
                .into_iter()
                .flat_map(|(w, ks)| {
                    self.weights[s].iter().enumerate().map(move |(k, &wk)| {
                        let mut next = ks.clone();
                        next.push(k);
                        (w * wk, next)
                    })
                })
                .collect();
        }
        out
    }

    /// Same value, computed by playing the policy on each full
    /// realisation.
    fn eval_realisations(&self, digits: &[u32], lambda: f64, real: &[(f64, Vec<usize>)]) -> PolicyValue {
        let mut out = PolicyValue::default();
        for (w, ks) in real {
            let (mut s, mut tau, mut eps) = (0usize, 0.0, 0.0);
            while s < self.hops {
                let k = ks[s];
                let a = digits[self.offsets[s] + k];
                let (m, p) = self.action(s, a);
                let t = self.times[s][k][a as usize];
                tau += t;
                eps += p * t;
                s = m;
            }
            out.rate += w / tau;
            out.power += w * eps / tau;
            out.lagrangian += w * (tau + lambda * (eps - self.pbar * tau));
        }
        out
    }

    fn decode(&self, mut index: u128, digits: &mut [u32]) {
        for (d, &r) in digits.iter_mut().zip(&self.radix) {
            *d = (index % r as u128) as u32;
            index /= r as u128;
        }
    }

    /// Odometer increment; false once it wraps around.
    fn increment(&self, digits: &mut [u32]) -> bool {
        for (d, &r) in digits.iter_mut().zip(&self.radix) {
            *d += 1;
            if *d < r {
                return true;
            }
            *d = 0;
        }
        false
    }

    /// Visits every policy (parallel over index ranges) and folds the
    /// values with `fold`, then merges chunk results with `merge`.
    fn scan<T: Send>(
        &self,
        lambda: f64,
        init: impl Fn() -> T + Sync,
        fold: impl Fn(&mut T, PolicyValue) + Sync,
        merge: impl Fn(T, T) -> T + Sync,
    ) -> T {
        let total = self.count();
        let chunk: u128 = 1 << 14;
        let chunks = total.div_ceil(chunk);
        (0..chunks as u64)
            .into_par_iter()
            .map(|c| {
                let start = c as u128 * chunk;
                let end = (start + chunk).min(total);
                let mut digits = vec![0u32; self.radix.len()];
                self.decode(start, &mut digits);
                let mut acc = init();
                for _ in start..end {
                    fold(&mut acc, self.eval_walk(&digits, lambda));
                    self.increment(&mut digits);
                }
                acc
            })
            .reduce(&init, &merge)
    }
}

/// Achievable `(power, rate)` pairs that no other deterministic policy
/// beats in both coordinates, sorted by power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub points: Vec<(f64, f64)>,
    pub policies: u128,
}

impl Frontier {
    fn from_points(mut pts: Vec<(f64, f64)>, policies: u128) -> Self {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        let mut points: Vec<(f64, f64)> = Vec::new();
        for p in pts {
            if points.last().is_none_or(|l| p.1 > l.1) {
                points.push(p);
            }
        }
        Self { points, policies }
    }

    fn prune(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
        Self::from_points(points, 0).points
    }

    /// True when both frontiers give the same best rate, within relative
    /// `tol`, at every budget just above one of their powers.
    pub fn agrees_with(&self, other: &Frontier, tol: f64) -> bool {
        self.points.iter().chain(&other.points).all(|&(p, _)| {
            let budget = p * (1.0 + 1e-9);
            match (self.best_rate(budget), other.best_rate(budget)) {
                (Some(a), Some(b)) => (a.1 - b.1).abs() <= tol * a.1.abs(),
                (None, None) => true,
                _ => false,
            }
        })
    }

    /// Largest rate with power at most `pbar` (relative slack `1e-12`).
    pub fn best_rate(&self, pbar: f64) -> Option<(f64, f64)> {
        self.points.iter().rev().find(|p| p.0 <= pbar * (1.0 + 1e-12)).copied()
    }
}

pub fn policy_space_size(problem: &SegmentProblem<f64>) -> Result<u128> {
    Ok(Space::new(problem)?.count())
}

/// Frontier by odometer enumeration with a recursive evaluator.
pub fn subproblem_frontier(problem: &SegmentProblem<f64>) -> Result<Frontier> {
    let space = Space::new(problem)?;
    space.guard()?;
    let points = space.scan(
        0.0,
        Vec::new,
        |acc: &mut Vec<(f64, f64)>, v| {
            acc.push((v.power, v.rate));
            if acc.len() >= 1 << 16 {
                *acc = Frontier::prune(std::mem::take(acc));
            }
        },
        |mut a, b| {
            a.extend(b);
            Frontier::prune(a)
        },
    );
    Ok(Frontier::from_points(points, space.count()))
}

/// Frontier by depth-first assignment of actions, evaluating each complete
/// policy over every joint channel realisation. Independent of
/// [`subproblem_frontier`] on purpose.
pub fn subproblem_frontier_recursive(problem: &SegmentProblem<f64>) -> Result<Frontier> {
    let space = Space::new(problem)?;
    space.guard()?;
    let real = space.realisations();
    fn assign(space: &Space, real: &[(f64, Vec<usize>)], digits: &mut Vec<u32>, out: &mut Vec<(f64, f64)>) {
        if digits.len() == space.radix.len() {
            let v = space.eval_realisations(digits, 0.0, real);
            out.push((v.power, v.rate));
            return;
        }
        for a in 0..space.radix[digits.len()] {
            digits.push(a);
            assign(space, real, digits, out);
            digits.pop();
        }
    }
    let mut out = Vec::new();
    assign(&space, &real, &mut Vec::new(), &mut out);
    Ok(Frontier::from_points(out, space.count()))
}

/// Optimum of the segment problem: best `E[1/sum T]` over deterministic
/// policies with `E[sum P T / sum T] <= pbar`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubproblemOptimum {
    pub rate: f64,
    pub power: f64,
    pub policies: u128,
}

pub fn brute_force_subproblem(problem: &SegmentProblem<f64>, pbar: f64) -> Result<SubproblemOptimum> {
    let frontier = subproblem_frontier(problem)?;
    let (power, rate) = frontier
        .best_rate(pbar)
        .ok_or_else(|| Error::Infeasible(format!("no policy meets budget {pbar}")))?;
    Ok(SubproblemOptimum {
        rate,
        power,
        policies: frontier.policies,
    })
}

/// Smallest `E[sum T + lambda (sum P T - pbar sum T)]` over all
/// deterministic policies, the quantity the value recursion minimises.
pub fn brute_force_lagrangian(problem: &SegmentProblem<f64>, lambda: f64) -> Result<f64> {
    let space = Space::new(problem)?;
    space.guard()?;
    Ok(space.scan(lambda, || f64::INFINITY, |acc, v| *acc = acc.min(v.lagrangian), f64::min))
}

/// Same minimum through the realisation-based evaluator.
pub fn brute_force_lagrangian_recursive(problem: &SegmentProblem<f64>, lambda: f64) -> Result<f64> {
    let space = Space::new(problem)?;
    space.guard()?;
    let real = space.realisations();
    let mut digits = vec![0u32; space.radix.len()];
    let mut best = f64::INFINITY;
    loop {
        best = best.min(space.eval_realisations(&digits, lambda, &real).lagrangian);
        if !space.increment(&mut digits) {
            break;
        }
    }
    Ok(best)
}

/// Upper bound on the segment rate over every causal policy, including
/// ones that remember the time and energy spent so far and ones that
/// randomise.
///
/// For a price `mu` the best causal policy for
/// `E[(1 - mu sum P T) / sum T]` is found by exact recursion over
/// `(node, time so far, energy so far)`; minimising the dual
/// `d(mu) = that value + mu pbar` over `mu >= 0` gives the bound.
pub fn causal_upper_bound(problem: &SegmentProblem<f64>, pbar: f64) -> Result<f64> {
    let space = Space::new(problem)?;
    let dual = |mu: f64| -> (f64, f64) {
        let mut memo = HashMap::new();
        let (v, power) = causal_value(&space, mu, 0, 0.0, 0.0, &mut memo);
        (v + mu * pbar, power)
    };
    let (d0, p0) = dual(0.0);
    if p0 <= pbar {
        return Ok(d0);
    }
    let mut hi = 1.0 / pbar;
    let mut guard = 0;
    while dual(hi).1 > pbar {
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(Error::Infeasible(format!("no causal policy meets budget {pbar}")));
        }
    }
    // golden-section search on the convex dual
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (dual(c).0, dual(d).0);
    for _ in 0..200 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = dual(c).0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = dual(d).0;
        }
        if b - a <= 1e-14 * hi {
            break;
        }
    }
    Ok(fc.min(fd).min(dual(0.0).0.max(f64::NEG_INFINITY)).min(dual(hi).0))
}

type CausalMemo = HashMap<(usize, u64, u64), (f64, f64)>;

/// Best value and the resulting `E[sum P T / sum T]` from state
/// `(s, tau, eps)`.
fn causal_value(space: &Space, mu: f64, s: usize, tau: f64, eps: f64, memo: &mut CausalMemo) -> (f64, f64) {
    if s == space.hops {
        return ((1.0 - mu * eps) / tau, eps / tau);
    }
    let key = (s, tau.to_bits(), eps.to_bits());
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let (mut value, mut power) = (0.0, 0.0);
    for (k, &wk) in space.weights[s].iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        let mut best = (f64::NEG_INFINITY, 0.0);
        for a in 0..space.times[s][k].len() as u32 {
            let (m, p) = space.action(s, a);
            let t = space.times[s][k][a as usize];
            let v = causal_value(space, mu, m, tau + t, eps + p * t, memo);
            // ties go to the cheaper action so the reported power is the
            // smallest among optimal choices
            if v.0 > best.0 || (v.0 == best.0 && v.1 < best.1) {
                best = v;
            }
        }
        value += wk * best.0;
        power += wk * best.1;
    }
    memo.insert(key, (value, power));
    (value, power)
}

/// Calibrated Lagrangian policy on the same discretisation, evaluated
/// exactly.
pub fn lagrangian_policy(problem: &SegmentProblem<f64>, tolerance: f64) -> Result<CalibratedPolicy<f64>> {
    let banks = CalibrationBanks::draw(problem, &mut seed::stream(0, &[seed::label::ORACLE]));
    calibrate_with(
        problem,
        &banks,
        &CalibrationOptions {
            tolerance,
            ..CalibrationOptions::default()
        },
    )
}

/// Best min-section rate of the whole route over deterministic segment
/// policies and budget splits, with the split that attains it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginalOptimum {
    pub value: f64,
    /// `(pair, power used, rate)` of the optimal choice.
    pub choice: Vec<(Segment, f64, f64)>,
    pub combinations: u128,
}

/// Exact optimum of the joint problem on a tiny instance: every pair's
/// frontier is enumerated, then every combination of frontier points that
/// fits the budget is scored by its smallest section rate.
pub fn brute_force_original(instance: &TinyInstance, p0: f64) -> Result<OriginalOptimum> {
    let probs = instance.probabilities()?;
    let last = instance.topology.last();
    let mut pairs = Vec::new();
    for i in 0..last {
        for j in i + 1..=last {
            let pr = probs.get(i, j);
            if pr > 0.0 {
                let f = subproblem_frontier(&instance.segment_problem(Segment::new(i, j), p0)?)?;
                pairs.push((Segment::new(i, j), pr, f));
            }
        }
    }
    let combinations = pairs
        .iter()
        .try_fold(1u128, |acc, p| acc.checked_mul(p.2.points.len() as u128))
        .unwrap_or(u128::MAX);
    if combinations > ENUMERATION_LIMIT {
        return Err(Error::Guard {
            size: combinations,
            limit: ENUMERATION_LIMIT,
        });
    }
    struct Search<'a> {
        pairs: &'a [(Segment, f64, Frontier)],
        last: usize,
        p0: f64,
        best: f64,
        best_choice: Vec<usize>,
        pick: Vec<usize>,
    }
    fn go(st: &mut Search, k: usize, used: f64) {
        if k == st.pairs.len() {
            let mut u = PairTable::filled(st.last, 0.0);
            let mut pr = PairTable::filled(st.last, 0.0);
            for (idx, (seg, w, f)) in st.pairs.iter().enumerate() {
                pr.set(seg.head, seg.end, *w);
                u.set(seg.head, seg.end, f.points[st.pick[idx]].1);
            }
            let value = master::section_rates(&pr, &u).into_iter().fold(f64::INFINITY, f64::min);
            if value > st.best {
                st.best = value;
                st.best_choice = st.pick.clone();
            }
            return;
        }
        let (_, w, f) = &st.pairs[k];
        for (idx, &(p, _)) in f.points.iter().enumerate() {
            let next = used + w * p;
            if next > st.p0 * (1.0 + 1e-12) {
                break;
            }
            st.pick.push(idx);
            go(st, k + 1, next);
            st.pick.pop();
        }
    }
    let mut st = Search {
        pairs: &pairs,
        last,
        p0,
        best: f64::NEG_INFINITY,
        best_choice: Vec::new(),
        pick: Vec::new(),
    };
    go(&mut st, 0, 0.0);
    if st.best_choice.is_empty() && !pairs.is_empty() {
        return Err(Error::Infeasible(format!("no combination fits budget {p0}")));
    }
    let value = if pairs.is_empty() { 0.0 } else { st.best };
    let choice = pairs
        .iter()
        .zip(&st.best_choice)
        .map(|((seg, _, f), &idx)| (*seg, f.points[idx].0, f.points[idx].1))
        .collect();
    Ok(OriginalOptimum {
        value,
        choice,
        combinations,
    })
}

/// Master allocation with calibrated Lagrangian segment policies on the
/// instance's own discretisation; rates are exact.
pub fn decomposed_solution(instance: &TinyInstance, p0: f64, options: &MasterOptions<f64>) -> Result<MasterSolution<f64>> {
    let probs = instance.probabilities()?;
    let last = instance.topology.last();
    let mut problems = HashMap::new();
    for i in 0..last {
        for j in i + 1..=last {
            let seg = Segment::new(i, j);
            problems.insert(seg, instance.segment_problem(seg, 1.0)?);
        }
    }
    let model = CalibratedRateModel::from_problems(problems, 1e-2, 0);
    solve_master(&model, &probs, p0, options)
}

/// Values of the three quantities compared by the exchange lemma.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeValues<T> {
    /// `max_x min_m sum_i A_mi f_i(x_i)`.
    pub max_min: T,
    /// `min_m max_x sum_i A_mi f_i(x_i)`.
    pub min_max: T,
    /// `min_m sum_i A_mi max f_i`.
    pub separable: T,
}

/// Nonnegative weights `a[m][i]` and independent finite functions
/// `f[i][x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeInstance<T> {
    pub a: Vec<Vec<T>>,
    pub f: Vec<Vec<T>>,
}

fn min_ord<T: PartialOrd + Copy>(it: impl Iterator<Item = T>) -> T {
    it.reduce(|a, b| if b < a { b } else { a }).expect("non-empty")
}

fn max_ord<T: PartialOrd + Copy>(it: impl Iterator<Item = T>) -> T {
    it.reduce(|a, b| if b > a { b } else { a }).expect("non-empty")
}

/// Exhaustive evaluation over every joint choice `x`.
pub fn exchange_values<T: Num + Copy + PartialOrd>(inst: &ExchangeInstance<T>) -> ExchangeValues<T> {
    let l = inst.f.len();
    let sizes: Vec<usize> = inst.f.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().product();
    let row = |m: usize, x: &[usize]| -> T {
        (0..l).fold(T::zero(), |acc, i| acc + inst.a[m][i] * inst.f[i][x[i]])
    };
    let choices = || {
        (0..total).map(|mut code| {
            sizes
                .iter()
                .map(|&s| {
                    let d = code % s;
                    code /= s;
                    d
                })
                .collect::<Vec<_>>()
        })
    };
    let rows = 0..inst.a.len();
    let max_min = max_ord(choices().map(|x| min_ord(rows.clone().map(|m| row(m, &x)))));
    let min_max = min_ord(rows.clone().map(|m| max_ord(choices().map(|x| row(m, &x)))));
    let fstar: Vec<T> = inst.f.iter().map(|fi| max_ord(fi.iter().copied())).collect();
    let separable = min_ord(
        rows.map(|m| (0..l).fold(T::zero(), |acc, i| acc + inst.a[m][i] * fstar[i])),
    );
    ExchangeValues {
        max_min,
        min_max,
        separable,
    }
}

pub fn verify_exchange_lemma<T: Num + Copy + PartialOrd>(inst: &ExchangeInstance<T>) -> bool {
    let v = exchange_values(inst);
    v.max_min == v.min_max && v.min_max == v.separable
}

/// Random instance with `M, L <= 4` and domains of size at most 4.
pub fn random_exchange_instance<R: Rng + ?Sized>(rng: &mut R) -> ExchangeInstance<i64> {
    let m = rng.random_range(1..=4);
    let l = rng.random_range(1..=4);
    ExchangeInstance {
        a: (0..m).map(|_| (0..l).map(|_| rng.random_range(0..=9)).collect()).collect(),
        f: (0..l)
            .map(|_| {
                let d = rng.random_range(1..=4);
                (0..d).map(|_| rng.random_range(-20..=20)).collect()
            })
            .collect(),
    }
}

/// Control case: every `f_i` depends on one shared variable `z`, so the
/// functions are no longer independent. Returns `(max-min, min-max)`.
pub fn coupled_exchange_values<T: Num + Copy + PartialOrd>(a: &[Vec<T>], f: &[Vec<T>]) -> (T, T) {
    let domain = f[0].len();
    let row = |m: usize, z: usize| -> T { (0..f.len()).fold(T::zero(), |acc, i| acc + a[m][i] * f[i][z]) };
    let max_min = max_ord((0..domain).map(|z| min_ord((0..a.len()).map(|m| row(m, z)))));
    let min_max = min_ord((0..a.len()).map(|m| max_ord((0..domain).map(|z| row(m, z)))));
    (max_min, min_max)
}

/// `sum_n p_n a_n b_n`.
pub fn sequence_sum<T: Num + Copy>(p: &[T], a: &[T], b: &[T]) -> T {
    p.iter()
        .zip(a)
        .zip(b)
        .fold(T::zero(), |acc, ((&p, &a), &b)| acc + p * a * b)
}

/// Random weights `w` (`p = w / sum w`) and sequences `a` non-decreasing,
/// `b` non-increasing, both centred under `p`. Centring is done exactly
/// by scaling with `W = sum w`: the returned `a`, `b` are `W` times the
/// centred sequences.
pub fn random_centered_sequences<R: Rng + ?Sized>(rng: &mut R) -> (Vec<i128>, Vec<i128>, Vec<i128>) {
    let n = rng.random_range(1..=21);
    let mut w: Vec<i128> = (0..n).map(|_| rng.random_range(0..=1000)).collect();
    if w.iter().all(|&x| x == 0) {
        w[0] = 1;
    }
    let total: i128 = w.iter().sum();
    let mut a: Vec<i128> = (0..n).map(|_| rng.random_range(-1000..=1000)).collect();
    let mut b: Vec<i128> = (0..n).map(|_| rng.random_range(-1000..=1000)).collect();
    a.sort_unstable();
    b.sort_unstable_by(|x, y| y.cmp(x));
    let center = |v: &mut Vec<i128>| {
        let mean: i128 = w.iter().zip(v.iter()).map(|(x, y)| x * y).sum();
        for x in v.iter_mut() {
            *x = *x * total - mean;
        }
    };
    center(&mut a);
    center(&mut b);
    (w, a, b)
}

/// Checks `sum p a b <= 0` exactly on one random triple.
pub fn verify_sequence_lemma<R: Rng + ?Sized>(rng: &mut R) -> bool {
    let (w, a, b) = random_centered_sequences(rng);
    sequence_sum(&w, &a, &b) <= 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Consistent,
    Inconclusive,
    Violated,
}

impl Verdict {
    /// The claim is `covariance <= 0`: inconclusive whenever the standard
    /// error exceeds the estimate's magnitude, otherwise consistent when
    /// the estimate is at most three standard errors above zero.
    pub fn classify(estimate: f64, se: f64) -> Self {
        if se > estimate.abs() {
            Self::Inconclusive
        } else if estimate <= 3.0 * se {
            Self::Consistent
        } else {
            Self::Violated
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    /// Local index of the node whose transmission time is `T_r`.
    pub cluster: usize,
    pub estimate: f64,
    pub se: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub episodes: usize,
    pub clusters: Vec<CovarianceEstimate>,
    pub verdict: Verdict,
}

/// Estimates `Cov(T_r, sum_{s<r} T_s)` where `T_r` is the time spent
/// transmitting from node `r` of the segment (zero when `r` is skipped),
/// for `r = 1..L-1`.
pub fn verify_covariance_property<R: Rng + ?Sized>(
    policy: &CalibratedPolicy<f64>,
    episodes: usize,
    rng: &mut R,
) -> Result<CovarianceReport> {
    if episodes < 2 {
        return Err(domain("need at least two episodes"));
    }
    let head = policy.segment().head;
    let hops = policy.segment().hops();
    let mut per_node = vec![Vec::with_capacity(episodes); hops];
    for _ in 0..episodes {
        let ep = policy.run_segment_episode(rng);
        let mut t = vec![0.0; hops];
        for f in &ep.frames {
            t[f.from - head] = f.time;
        }
        for (col, v) in per_node.iter_mut().zip(t) {
            col.push(v);
        }
    }
    let n = episodes as f64;
    let clusters: Vec<CovarianceEstimate> = (1..hops)
        .map(|r| {
            // shifting by the first sample keeps constant columns exactly zero
            let x: Vec<f64> = per_node[r].iter().map(|v| v - per_node[r][0]).collect();
            let y: Vec<f64> = (0..episodes).map(|e| (0..r).map(|s| per_node[s][e]).sum()).collect();
            let y: Vec<f64> = y.iter().map(|v| v - y[0]).collect();
            let (x, y) = (&x, &y);
            let (mx, _) = mean_and_se(x);
            let (my, _) = mean_and_se(y);
            let prods: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
            let (m, se) = mean_and_se(&prods);
            let estimate = m * n / (n - 1.0);
            CovarianceEstimate {
                cluster: r,
                estimate,
                se,
                verdict: Verdict::classify(estimate, se),
            }
        })
        .collect();
    let verdict = if clusters.iter().any(|c| c.verdict == Verdict::Violated) {
        Verdict::Violated
    } else if clusters.iter().all(|c| c.verdict == Verdict::Consistent) {
        Verdict::Consistent
    } else {
        Verdict::Inconclusive
    };
    Ok(CovarianceReport {
        episodes,
        clusters,
        verdict,
    })
}

/// Deliberate defects for checking that the suite notices failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negates the outflow term of the flow-balance identity.
    FlowBalanceSignFlip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub fault: Option<Fault>,
    pub checks: Vec<CheckResult>,
    /// No check failed (inconclusive statistical checks do not fail).
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
    pub covariance_episodes: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            fault: None,
            covariance_episodes: 100_000,
        }
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(CheckStatus, String)>) -> CheckResult {
    let start = Instant::now();
    let (status, detail) = f().unwrap_or_else(|e| (CheckStatus::Fail, format!("error: {e}")));
    CheckResult {
        name: name.to_string(),
        status,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn pass_if(ok: bool, detail: String) -> Result<(CheckStatus, String)> {
    Ok((if ok { CheckStatus::Pass } else { CheckStatus::Fail }, detail))
}

/// Random probability and rate tables on `0..=last`.
pub fn random_pair_tables<R: Rng + ?Sized>(rng: &mut R, last: usize) -> (PairTable<f64>, PairTable<f64>) {
    let pr = PairTable::from_fn(last, |_, _| rng.random::<f64>());
    let u = PairTable::from_fn(last, |_, _| 10.0 * rng.random::<f64>());
    (pr, u)
}

/// Three-node instance used by the enumeration checks.
pub fn reference_instance() -> TinyInstance {
    TinyInstance::new(
        Topology::uniform(3, 2.0, 3.0).expect("valid line"),
        vec![0.4, 1.6],
        vec![0.5, 0.5],
        vec![1.0, 3.0, 9.0, 27.0],
        0.8,
    )
    .expect("valid instance")
}

/// Runs every oracle check.
pub fn run_suite(options: &VerifyOptions) -> VerifyReport {
    let seed_value = options.seed;
    let flipped = options.fault == Some(Fault::FlowBalanceSignFlip);
    let mut checks = Vec::new();

    checks.push(timed("flow-balance-identity", || {
        let mut rng = seed::stream(seed_value, &[seed::label::ORACLE, 1]);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let last = rng.random_range(2..=8);
            let (pr, u) = random_pair_tables(&mut rng, last);
            for m in 1..last {
                worst = worst.max(master::flow_balance_residual(m, &pr, &u, flipped)?.abs());
            }
        }
        pass_if(worst <= 1e-12, format!("max |residual| = {worst:.3e} over 100 instances"))
    }));

    checks.push(timed("exchange-lemma", || {
        let mut rng = seed::stream(seed_value, &[seed::label::ORACLE, 2]);
        let ok = (0..200).all(|_| verify_exchange_lemma(&random_exchange_instance(&mut rng)));
        let mut strict = 0;
        for _ in 0..200 {
            let inst = random_exchange_instance(&mut rng);
            let d = 3;
            let f: Vec<Vec<i64>> = inst.f.iter().map(|_| (0..d).map(|_| rng.random_range(-20..=20)).collect()).collect();
            let (v, w) = coupled_exchange_values(&inst.a, &f);
            if v < w {
                strict += 1;
            }
        }
        pass_if(
            ok && strict > 0,
            format!("200 independent instances equal: {ok}; coupled control strict in {strict}/200"),
        )
    }));

    checks.push(timed("sequence-lemma", || {
        let mut rng = seed::stream(seed_value, &[seed::label::ORACLE, 3]);
        let violations = (0..10_000).filter(|_| !verify_sequence_lemma(&mut rng)).count();
        pass_if(violations == 0, format!("{violations} violations in 10000 sequences"))
    }));

    checks.push(timed("power-stationarity", || {
        let mut rng = seed::stream(seed_value, &[seed::label::ORACLE, 4]);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let g = 10f64.powf(rng.random_range(-2.0..2.0));
            let pbar = 10f64.powf(rng.random_range(-1.0..3.0));
            let lambda = rng.random_range(0.01..0.99) / pbar;
            let limits = subpolicy::PowerLimits::relative(pbar, 1e-6, 1e12);
            let p = subpolicy::solve_optimal_power(g, pbar, lambda, limits)?;
            worst = worst.max((subpolicy::foc_lhs(g, p, pbar) - lambda).abs());
        }
        pass_if(worst <= 1e-9, format!("max residual {worst:.3e} over 1000 triples"))
    }));

    checks.push(timed("recursion-vs-enumeration", || {
        let inst = reference_instance();
        let problem = inst.segment_problem(Segment::new(0, 2), 6.0)?;
        let mut worst = 0.0f64;
        for &lambda in &[0.0, 0.02, 0.1] {
            let table = subpolicy::offline_recursion(&problem, lambda, &mut seed::stream(0, &[0]))?;
            let brute = brute_force_lagrangian(&problem, lambda)?;
            worst = worst.max((table.cost(0) - brute).abs() / brute.abs());
        }
        pass_if(worst <= 1e-12, format!("max relative gap {worst:.3e}"))
    }));

    checks.push(timed("enumeration-two-paths", || {
        let inst = reference_instance();
        let problem = inst.segment_problem(Segment::new(0, 2), 6.0)?;
        let a = subproblem_frontier(&problem)?;
        let b = subproblem_frontier_recursive(&problem)?;
        pass_if(a.agrees_with(&b, 1e-12), format!("{} frontier points from {} policies", a.points.len(), a.policies))
    }));

    checks.push(timed("oracle-dominance", || {
        let inst = reference_instance();
        let mut detail = Vec::new();
        let mut ok = true;
        for &pbar in &[2.0, 6.0, 20.0] {
            let problem = inst.segment_problem(Segment::new(0, 2), pbar)?;
            let lb = lagrangian_policy(&problem, 1e-2)?;
            let lb_rate = lb.exact_metrics().expect("discrete").rate;
            let opt = brute_force_subproblem(&problem, pbar)?.rate;
            let ub = causal_upper_bound(&problem, pbar)?;
            ok &= lb_rate <= opt * (1.0 + 1e-12) && opt <= ub * (1.0 + 1e-9);
            detail.push(format!("pbar={pbar}: {lb_rate:.5} <= {opt:.5} <= {ub:.5}"));
        }
        pass_if(ok, detail.join("; "))
    }));

    checks.push(timed("covariance", || {
        let topo = Topology::uniform(4, 3.0, 3.0)?;
        let settings = subpolicy::SolverSettings {
            mc_samples: 2000,
            ..Default::default()
        };
        let problem = SegmentProblem::new(&topo, Segment::new(0, 3), 10.0, &settings)?;
        let policy = subpolicy::calibrate_lambda(&problem, &mut seed::stream(seed_value, &[seed::label::ORACLE, 5]))?;
        let mut rng = seed::stream(seed_value, &[seed::label::ORACLE, 6]);
        let report = verify_covariance_property(&policy, options.covariance_episodes, &mut rng)?;
        let detail = report
            .clusters
            .iter()
            .map(|c| format!("r={}: {:.4e} (se {:.1e}, {:?})", c.cluster, c.estimate, c.se, c.verdict))
            .collect::<Vec<_>>()
            .join("; ");
        let status = match report.verdict {
            Verdict::Consistent => CheckStatus::Pass,
            Verdict::Inconclusive => CheckStatus::Inconclusive,
            Verdict::Violated => CheckStatus::Fail,
        };
        Ok((status, detail))
    }));

    let passed = checks.iter().all(|c| c.status != CheckStatus::Fail);
    VerifyReport {
        schema_version: 1,
        seed: seed_value,
        fault: options.fault,
        checks,
        passed,
    }
}
