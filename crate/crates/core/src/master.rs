//! Long-timescale power allocation across segment pairs.
//!
//! Every pair `(i, j)` that can appear as a continuous segment receives an
//! average power `pbar_ij`. The section rates
//! `U_m = sum_{i < m <= j} Pr(i,j) U_ij(pbar_ij)` are linear in the
//! per-pair rates, so the max-min objective `min_m U_m` is concave whenever
//! the rate curves are, and projected subgradient ascent applies. The
//! per-pair slopes come from the calibrated multipliers.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_traits::Num;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{PairProbabilities, PairTable, Segment, Topology};
use crate::scalar::Scalar;
use crate::seed;
use crate::subpolicy::{
    calibrate_with, CalibratedPolicy, CalibrationBanks, CalibrationOptions, SegmentProblem,
    SolverSettings,
};

/// Rate through section `m` (the link between nodes `m-1` and `m`):
/// `sum over i < m <= j of Pr(i,j) U(i,j)`.
pub fn section_rate<T: Num + Copy>(m: usize, pr: &PairTable<T>, u: &PairTable<T>) -> Result<T> {
    let last = pr.last();
    if m == 0 || m > last || u.last() != last {
        return Err(domain(format!("section {m} out of range 1..={last}")));
    }
    let mut acc = T::zero();
    for i in 0..m {
        for j in m..=last {
            acc = acc + *pr.get(i, j) * *u.get(i, j);
        }
    }
    Ok(acc)
}

/// All section rates `U_1..U_M`.
pub fn section_rates<T: Num + Copy>(pr: &PairTable<T>, u: &PairTable<T>) -> Vec<T> {
    (1..=pr.last())
        .map(|m| section_rate(m, pr, u).expect("section in range"))
        .collect()
}

/// Difference between the section form and the per-node form of flow
/// balance at node `m`:
/// `[U_m - U_{m+1}] - [sum_{i<m} Pr(i,m) U_im - sum_{j>m} Pr(m,j) U_mj]`.
///
/// The two forms are algebraically identical, so this is zero up to
/// rounding (exactly zero over exact types).
pub fn flow_balance_identity<T: Num + Copy>(m: usize, pr: &PairTable<T>, u: &PairTable<T>) -> Result<T> {
    flow_balance_residual(m, pr, u, false)
}

/// `flipped` negates the outflow term; used to check that the verifier
/// notices a broken identity.
pub(crate) fn flow_balance_residual<T: Num + Copy>(
    m: usize,
    pr: &PairTable<T>,
    u: &PairTable<T>,
    flipped: bool,
) -> Result<T> {
    let last = pr.last();
    if m == 0 || m + 1 > last {
        return Err(domain(format!("node {m} is not an interior relay of 0..={last}")));
    }
    let section = section_rate(m, pr, u)? - section_rate(m + 1, pr, u)?;
    let mut inflow = T::zero();
    for i in 0..m {
        inflow = inflow + *pr.get(i, m) * *u.get(i, m);
    }
    let mut outflow = T::zero();
    for j in m + 1..=last {
        outflow = outflow + *pr.get(m, j) * *u.get(m, j);
    }
    let node = if flipped { inflow + outflow } else { inflow - outflow };
    Ok(section - node)
}

/// Average power per potential segment, restricted to pairs with
/// non-negligible probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationVector<S> {
    pub last: usize,
    pub pairs: Vec<Segment>,
    pub prob: Vec<S>,
    pub pbar: Vec<S>,
}

impl<S: Scalar> AllocationVector<S> {
    /// Pairs `i < j` with `Pr(i,j) > cutoff`, each at the same power so the
    /// budget is met with equality.
    pub fn uniform(probs: &PairProbabilities<S>, p0: S, cutoff: S) -> Result<Self> {
        let last = probs.last();
        let mut pairs = Vec::new();
        let mut prob = Vec::new();
        for i in 0..last {
            for j in i + 1..=last {
                let p = probs.get(i, j);
                if p > cutoff {
                    pairs.push(Segment::new(i, j));
                    prob.push(p);
                }
            }
        }
        let mass: S = prob.iter().copied().sum();
        let level = if mass > S::zero() { p0 / mass } else { p0 };
        Ok(Self {
            last,
            pbar: vec![level; pairs.len()],
            pairs,
            prob,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `sum Pr(i,j) pbar_ij`.
    pub fn budget_used(&self) -> S {
        self.prob.iter().zip(&self.pbar).map(|(&w, &x)| w * x).sum()
    }

    pub fn get(&self, seg: Segment) -> Option<S> {
        self.pairs.iter().position(|&p| p == seg).map(|k| self.pbar[k])
    }
}

/// Rate of one pair at one budget, with the marginal rate per unit power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint<S> {
    pub rate: S,
    pub rate_se: S,
    /// Slope of the rate curve, in rate per unit power.
    pub slope: S,
    /// Raw segment multiplier (price of power per unit time).
    pub lambda: S,
    pub power: S,
}

/// Per-pair rate curve `pbar -> U_ij(pbar)` and its slope.
pub trait RateModel<S>: Sync {
    fn evaluate(&self, pair: Segment, pbar: S) -> Result<RatePoint<S>>;
}

impl<S, F> RateModel<S> for F
where
    F: Fn(Segment, S) -> Result<RatePoint<S>> + Sync,
{
    fn evaluate(&self, pair: Segment, pbar: S) -> Result<RatePoint<S>> {
        self(pair, pbar)
    }
}

/// Rate curves obtained by calibrating each pair's segment policy.
///
/// Each pair owns one pair of scenario banks drawn from its own seed
/// stream and reused for every budget (common random numbers), so the
/// curve is a deterministic function of the budget. Budgets are snapped to
/// a relative grid of `1e-9` before evaluation; results are memoised.
pub struct CalibratedRateModel<S: Scalar> {
    problems: HashMap<Segment, SegmentProblem<S>>,
    banks: Mutex<HashMap<Segment, Arc<CalibrationBanks<S>>>>,
    cache: Mutex<HashMap<(Segment, i64), Arc<CalibratedPolicy<S>>>>,
    options: CalibrationOptions<S>,
    seed: u64,
}

impl<S: Scalar> CalibratedRateModel<S> {
    /// Rayleigh-faded segments of `topology`. Problems are built at unit
    /// budget and rescaled on demand.
    pub fn new(topology: &Topology<S>, settings: &SolverSettings<S>, seed: u64) -> Result<Self> {
        let last = topology.last();
        let mut problems = HashMap::new();
        for i in 0..last {
            for j in i + 1..=last {
                let seg = Segment::new(i, j);
                problems.insert(seg, SegmentProblem::new(topology, seg, S::one(), settings)?);
            }
        }
        Ok(Self::from_problems(problems, settings.power_tolerance, seed))
    }

    /// Explicit per-pair problems; their budgets are overridden at
    /// evaluation time.
    pub fn from_problems(problems: HashMap<Segment, SegmentProblem<S>>, tolerance: S, seed: u64) -> Self {
        Self {
            problems,
            banks: Mutex::new(HashMap::new()),
            cache: Mutex::new(HashMap::new()),
            options: CalibrationOptions {
                tolerance,
                ..CalibrationOptions::default()
            },
            seed,
        }
    }

    fn key(pbar: S) -> i64 {
        (pbar.as_f64().ln() * 1e9).round() as i64
    }

    fn snapped(key: i64) -> S {
        S::lit((key as f64 * 1e-9).exp())
    }

    fn banks(&self, pair: Segment) -> Result<Arc<CalibrationBanks<S>>> {
        let problem = self.problems.get(&pair).ok_or(Error::MissingPolicy {
            head: pair.head,
            end: pair.end,
        })?;
        if let Some(b) = self.banks.lock().expect("bank lock").get(&pair) {
            return Ok(b.clone());
        }
        let mut rng = seed::stream(
            self.seed,
            &[seed::label::CALIBRATION_BANK, pair.head as u64, pair.end as u64],
        );
        let drawn = Arc::new(CalibrationBanks::draw(problem, &mut rng));
        Ok(self
            .banks
            .lock()
            .expect("bank lock")
            .entry(pair)
            .or_insert(drawn)
            .clone())
    }

    /// Calibrated policy for `pair` at (the snapped value of) `pbar`.
    pub fn policy(&self, pair: Segment, pbar: S) -> Result<Arc<CalibratedPolicy<S>>> {
        if !(pbar > S::zero()) || !pbar.is_finite() {
            return Err(domain(format!("budget {pbar} for pair ({},{})", pair.head, pair.end)));
        }
        let key = Self::key(pbar);
        if let Some(p) = self.cache.lock().expect("cache lock").get(&(pair, key)) {
            return Ok(p.clone());
        }
        let banks = self.banks(pair)?;
        let problem = self.problems[&pair].with_budget(Self::snapped(key))?;
        let policy = Arc::new(calibrate_with(&problem, &banks, &self.options)?);
        Ok(self
            .cache
            .lock()
            .expect("cache lock")
            .entry((pair, key))
            .or_insert(policy)
            .clone())
    }

    pub fn cached_points(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

impl<S: Scalar> RateModel<S> for CalibratedRateModel<S> {
    fn evaluate(&self, pair: Segment, pbar: S) -> Result<RatePoint<S>> {
        let policy = self.policy(pair, pbar)?;
        let m = policy.report.metrics;
        Ok(RatePoint {
            rate: m.rate,
            rate_se: m.rate_se,
            slope: policy.rate_multiplier(),
            lambda: policy.lambda,
            power: m.power,
        })
    }
}

/// Rates at every allocated pair, evaluated in parallel.
pub fn evaluate_allocation<S: Scalar, M: RateModel<S>>(
    allocation: &AllocationVector<S>,
    model: &M,
) -> Result<Vec<RatePoint<S>>> {
    allocation
        .pairs
        .par_iter()
        .zip(allocation.pbar.par_iter())
        .map(|(&pair, &pbar)| model.evaluate(pair, pbar))
        .collect()
}

fn tables<S: Scalar>(allocation: &AllocationVector<S>, points: &[RatePoint<S>]) -> (PairTable<S>, PairTable<S>) {
    let mut pr = PairTable::filled(allocation.last, S::zero());
    let mut u = PairTable::filled(allocation.last, S::zero());
    for ((seg, &w), pt) in allocation.pairs.iter().zip(&allocation.prob).zip(points) {
        pr.set(seg.head, seg.end, w);
        u.set(seg.head, seg.end, pt.rate);
    }
    (pr, u)
}

/// Section rates `U_1..U_M` of an allocation.
pub fn allocation_section_rates<S: Scalar>(allocation: &AllocationVector<S>, points: &[RatePoint<S>]) -> Vec<S> {
    let (pr, u) = tables(allocation, points);
    section_rates(&pr, &u)
}

fn min_of<S: Scalar>(v: &[S]) -> S {
    v.iter().copied().fold(S::infinity(), S::min)
}

fn check_feasible<S: Scalar>(allocation: &AllocationVector<S>, p0: S) -> Result<()> {
    let used = allocation.budget_used();
    if allocation.pbar.iter().any(|&x| !(x > S::zero())) || used > p0 * S::lit(1.0 + 1e-6) {
        return Err(Error::Contract(format!("allocation uses {used} of budget {p0}")));
    }
    Ok(())
}

/// Min-section rate of a feasible allocation.
pub fn objective<S: Scalar, M: RateModel<S>>(allocation: &AllocationVector<S>, p0: S, model: &M) -> Result<S> {
    check_feasible(allocation, p0)?;
    let points = evaluate_allocation(allocation, model)?;
    Ok(min_of(&allocation_section_rates(allocation, &points)))
}

/// Sections whose rate lies within `tie` (relative) of the minimum.
fn tied_sections<S: Scalar>(sections: &[S], tie: S) -> Vec<usize> {
    let lo = min_of(sections);
    let bar = lo + tie * lo.abs();
    (0..sections.len()).filter(|&k| sections[k] <= bar).map(|k| k + 1).collect()
}

/// Subgradient of the min-section objective: for each pair, the average
/// over tied bottleneck sections `m` of `1(i < m <= j) Pr(i,j) slope_ij`.
pub fn subgradient_from<S: Scalar>(allocation: &AllocationVector<S>, points: &[RatePoint<S>], tie: S) -> Vec<S> {
    let sections = allocation_section_rates(allocation, points);
    let tied = tied_sections(&sections, tie);
    let share = S::lit(tied.len() as f64).recip();
    allocation
        .pairs
        .iter()
        .zip(&allocation.prob)
        .zip(points)
        .map(|((seg, &w), pt)| {
            let hits = tied.iter().filter(|&&m| seg.spans_section(m)).count();
            S::lit(hits as f64) * share * w * pt.slope
        })
        .collect()
}

pub fn subgradient<S: Scalar, M: RateModel<S>>(
    allocation: &AllocationVector<S>,
    p0: S,
    model: &M,
    tie: S,
) -> Result<Vec<S>> {
    check_feasible(allocation, p0)?;
    let points = evaluate_allocation(allocation, model)?;
    Ok(subgradient_from(allocation, &points, tie))
}

/// Projection onto `{x >= floor, sum Pr x <= p0}` in the metric
/// `sum Pr (x - y)^2`: `x = max(floor, y - nu)` with `nu >= 0` found by
/// bisection.
pub fn project<S: Scalar>(allocation: &AllocationVector<S>, p0: S, floor: S) -> Result<AllocationVector<S>> {
    let floor_mass: S = allocation.prob.iter().map(|&w| w * floor).sum();
    if floor_mass > p0 {
        return Err(Error::Infeasible(format!(
            "budget {p0} below the floor requirement {floor_mass}"
        )));
    }
    let shifted = |nu: S| -> Vec<S> { allocation.pbar.iter().map(|&y| (y - nu).max(floor)).collect() };
    let used = |x: &[S]| -> S { allocation.prob.iter().zip(x).map(|(&w, &v)| w * v).sum() };
    let mut out = allocation.clone();
    let at_zero = shifted(S::zero());
    if used(&at_zero) <= p0 {
        out.pbar = at_zero;
        return Ok(out);
    }
    let mut lo = S::zero();
    let mut hi = allocation.pbar.iter().copied().fold(S::zero(), S::max) - floor;
    for _ in 0..200 {
        let mid = (lo + hi) / S::lit(2.0);
        if used(&shifted(mid)) > p0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= S::epsilon() * hi {
            break;
        }
    }
    out.pbar = shifted(hi);
    Ok(out)
}

/// Knobs of the ascent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MasterOptions<S> {
    /// Step numerator; `None` means half the budget.
    pub step_a: Option<S>,
    pub step_b: S,
    pub max_iterations: usize,
    /// Stop once the best objective improved by less than `tolerance`
    /// (relative) over the last `window` iterations; `window = 0` disables.
    pub window: usize,
    pub tolerance: S,
    /// Relative tie tolerance for the bottleneck sections.
    pub tie: S,
    /// Pairs at or below this probability are not allocated.
    pub cutoff: S,
    /// Power floor as a fraction of the budget.
    pub floor_factor: S,
}

impl<S: Scalar> Default for MasterOptions<S> {
    fn default() -> Self {
        Self {
            step_a: None,
            step_b: S::lit(5.0),
            max_iterations: 60,
            window: 10,
            tolerance: S::lit(1e-3),
            tie: S::lit(1e-2),
            cutoff: S::lit(1e-6),
            floor_factor: S::lit(1e-6),
        }
    }
}

/// Result of the master ascent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterSolution<S> {
    pub p0: S,
    /// Best allocation found.
    pub allocation: AllocationVector<S>,
    /// Rate points at the best allocation.
    pub points: Vec<RatePoint<S>>,
    /// Objective of each iterate.
    pub trace: Vec<S>,
    /// Running best of `trace`.
    pub best_trace: Vec<S>,
    /// `U_1..U_M` at the best allocation.
    pub section_rates: Vec<S>,
    /// `min_m U_m`.
    pub objective: S,
    /// `U_M`, the rate delivered to the destination.
    pub end_to_end: S,
    /// `U_M` is within the tie tolerance of the minimum.
    pub balance_active: bool,
    pub iterations: usize,
}

/// Projected subgradient ascent with steps `a / (b + t)`.
///
/// The direction is the subgradient divided by the pair probabilities (the
/// steepest direction in the probability-weighted metric the projection
/// uses), scaled so one step shifts `a / (b + t)` units of budget.
pub fn solve_master<S: Scalar, M: RateModel<S>>(
    model: &M,
    probs: &PairProbabilities<S>,
    p0: S,
    options: &MasterOptions<S>,
) -> Result<MasterSolution<S>> {
    if !(p0 > S::zero()) || !p0.is_finite() {
        return Err(domain(format!("budget P0 must be positive, got {p0}")));
    }
    let floor = p0 * options.floor_factor;
    let mut x = project(&AllocationVector::uniform(probs, p0, options.cutoff)?, p0, floor)?;
    let last = probs.last();
    if x.is_empty() {
        let zeros = vec![S::zero(); last];
        return Ok(MasterSolution {
            p0,
            allocation: x,
            points: Vec::new(),
            trace: vec![S::zero()],
            best_trace: vec![S::zero()],
            section_rates: zeros,
            objective: S::zero(),
            end_to_end: S::zero(),
            balance_active: true,
            iterations: 0,
        });
    }
    let a = options.step_a.unwrap_or(p0 / S::lit(2.0));
    let mut trace = Vec::new();
    let mut best_trace: Vec<S> = Vec::new();
    let mut best: Option<(AllocationVector<S>, Vec<RatePoint<S>>, Vec<S>)> = None;
    let mut best_value = S::neg_infinity();
    for t in 0..options.max_iterations.max(1) {
        let points = evaluate_allocation(&x, model)?;
        let sections = allocation_section_rates(&x, &points);
        let value = min_of(&sections);
        trace.push(value);
        if value > best_value || best.is_none() {
            best_value = value;
            best = Some((x.clone(), points.clone(), sections));
        }
        best_trace.push(best_value);
        let w = options.window;
        if w > 0 && best_trace.len() > w {
            let before = best_trace[best_trace.len() - 1 - w];
            if best_value - before <= options.tolerance * best_value.abs() {
                break;
            }
        }
        let g = subgradient_from(&x, &points, options.tie);
        let mut dir: Vec<S> = g.iter().zip(&x.prob).map(|(&gk, &w)| gk / w).collect();
        let mass: S = dir.iter().zip(&x.prob).map(|(&d, &w)| d * w).sum();
        if !(mass > S::zero()) {
            break;
        }
        let step = a / (options.step_b + S::lit(t as f64)) / mass;
        for d in &mut dir {
            *d = *d * step;
        }
        let mut y = x.clone();
        for (v, d) in y.pbar.iter_mut().zip(&dir) {
            *v = *v + *d;
        }
        x = project(&y, p0, floor)?;
    }
    let (allocation, points, sections) = best.expect("at least one iterate");
    let objective = min_of(&sections);
    let end_to_end = *sections.last().expect("at least one section");
    Ok(MasterSolution {
        p0,
        balance_active: end_to_end <= objective + options.tie * objective.abs(),
        iterations: trace.len(),
        allocation,
        points,
        trace,
        best_trace,
        section_rates: sections,
        objective,
        end_to_end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Rational64;

    fn toy_tables() -> (PairTable<f64>, PairTable<f64>) {
        let mut pr = PairTable::filled(2, 0.0);
        let mut u = PairTable::filled(2, 0.0);
        pr.set(0, 2, 0.25);
        pr.set(0, 1, 0.25);
        pr.set(1, 2, 0.25);
        u.set(0, 2, 1.0);
        u.set(0, 1, 2.0);
        u.set(1, 2, 2.0);
        (pr, u)
    }

    #[test]
    fn section_rate_examples() {
        let (pr, u) = toy_tables();
        assert_eq!(section_rate(1, &pr, &u).unwrap(), 0.75);
        assert_eq!(section_rate(2, &pr, &u).unwrap(), 0.75);
        assert!(section_rate(0, &pr, &u).is_err());
        assert!(section_rate(3, &pr, &u).is_err());
        let zero = PairTable::filled(2, 0.0);
        assert_eq!(section_rate(1, &pr, &zero).unwrap(), 0.0);
        // last section is the destination-facing sum
        let direct: f64 = (0..2).map(|i| pr.get(i, 2) * u.get(i, 2)).sum();
        assert_eq!(section_rate(2, &pr, &u).unwrap(), direct);
    }

    #[test]
    fn flow_balance_identity_is_exact_over_rationals() {
        let last = 5;
        let pr = PairTable::from_fn(last, |i, j| Rational64::new((i * 7 + j * 3) as i64 % 11 + 1, 13));
        let u = PairTable::from_fn(last, |i, j| Rational64::new((i * 5 + j * j) as i64 % 17 + 1, 7));
        for m in 1..last {
            assert_eq!(flow_balance_identity(m, &pr, &u).unwrap(), Rational64::from_integer(0));
            assert_ne!(flow_balance_residual(m, &pr, &u, true).unwrap(), Rational64::from_integer(0));
        }
        assert!(flow_balance_identity(0, &pr, &u).is_err());
        assert!(flow_balance_identity(last, &pr, &u).is_err());
    }

    fn alloc(prob: Vec<f64>, pbar: Vec<f64>) -> AllocationVector<f64> {
        let pairs = (0..prob.len()).map(|k| Segment::new(k, k + 1)).collect();
        AllocationVector {
            last: prob.len(),
            pairs,
            prob,
            pbar,
        }
    }

    #[test]
    fn projection_examples() {
        let a = alloc(vec![0.5, 0.25], vec![1.0, 1.0]);
        assert_eq!(project(&a, 2.0, 1e-6).unwrap(), a);

        let over = alloc(vec![0.2; 4], vec![5.0; 4]);
        let p = project(&over, 2.0, 1e-6).unwrap();
        for &v in &p.pbar {
            assert!((v - 2.5).abs() < 1e-12);
        }

        let rand = alloc(vec![0.1, 0.3, 0.05, 0.4, 0.15], vec![9.0, 0.2, 4.0, 3.0, 0.01]);
        let (p0, floor) = (1.0, 0.05);
        let p = project(&rand, p0, floor).unwrap();
        assert!((p.budget_used() - p0).abs() < 1e-10);
        // KKT: a single shift nu on every non-floored coordinate
        let shifts: Vec<f64> = rand.pbar.iter().zip(&p.pbar).filter(|(_, &x)| x > floor).map(|(y, x)| y - x).collect();
        for s in &shifts {
            assert!((s - shifts[0]).abs() < 1e-8 && *s >= 0.0);
        }
        for (y, x) in rand.pbar.iter().zip(&p.pbar) {
            if *x == floor {
                assert!(y - shifts[0] <= floor + 1e-8);
            }
        }
        assert!(matches!(project(&rand, 1e-3, floor), Err(Error::Infeasible(_))));
    }

    fn affine_model(slopes: PairTable<f64>) -> impl Fn(Segment, f64) -> Result<RatePoint<f64>> + Sync {
        move |seg: Segment, pbar: f64| {
            let s = *slopes.get(seg.head, seg.end);
            Ok(RatePoint {
                rate: s * pbar.min(10.0),
                rate_se: 0.0,
                slope: if pbar < 10.0 { s } else { 0.0 },
                lambda: 0.0,
                power: pbar,
            })
        }
    }

    #[test]
    fn objective_examples() {
        let probs = PairProbabilities::iid(1, 1.0).unwrap();
        let model = |_: Segment, pbar: f64| {
            Ok(RatePoint {
                rate: (1.0 + pbar).ln(),
                rate_se: 0.0,
                slope: 1.0 / (1.0 + pbar),
                lambda: 0.0,
                power: pbar,
            })
        };
        let a = AllocationVector::uniform(&probs, 3.0, 1e-6).unwrap();
        assert_eq!(a.pbar, vec![3.0]);
        assert!((objective(&a, 3.0, &model).unwrap() - 4f64.ln()).abs() < 1e-15);
        let doubled = |s: Segment, p: f64| {
            let mut pt = model(s, p)?;
            pt.rate *= 2.0;
            Ok(pt)
        };
        let o1 = objective(&a, 3.0, &model).unwrap();
        assert_eq!(objective(&a, 3.0, &doubled).unwrap(), 2.0 * o1);
        assert!(objective(&a, 1.0, &model).is_err());

        // M = 2 toy with affine curves, evaluated by hand
        let probs = PairProbabilities::iid(2, 0.5).unwrap();
        let slopes = PairTable::from_fn(2, |i, j| (1 + i + j) as f64);
        let m = affine_model(slopes);
        let a = AllocationVector::uniform(&probs, 1.0, 1e-6).unwrap();
        let x = a.pbar[0];
        let pr = |i, j| probs.get(i, j);
        let u1 = pr(0, 1) * 2.0 * x + pr(0, 2) * 3.0 * x;
        let u2 = pr(0, 2) * 3.0 * x + pr(1, 2) * 4.0 * x;
        assert!((objective(&a, 1.0, &m).unwrap() - u1.min(u2)).abs() < 1e-14);
    }

    #[test]
    fn subgradient_examples() {
        let probs = PairProbabilities::iid(2, 0.5).unwrap();
        let slopes = PairTable::from_fn(2, |i, j| (1 + i + j) as f64);
        let m = affine_model(slopes.clone());
        let a = AllocationVector::uniform(&probs, 1.0, 1e-6).unwrap();
        let g = subgradient(&a, 1.0, &m, 1e-6).unwrap();
        // section 1 is the unique bottleneck here
        let pts = evaluate_allocation(&a, &m).unwrap();
        let secs = allocation_section_rates(&a, &pts);
        assert!(secs[0] < secs[1]);
        for ((seg, &w), &gk) in a.pairs.iter().zip(&a.prob).zip(&g) {
            let expect = if seg.spans_section(1) { w * slopes.get(seg.head, seg.end) } else { 0.0 };
            assert!((gk - expect).abs() < 1e-15);
            assert!(gk >= 0.0);
        }
    }

    #[test]
    fn single_pair_converges_at_once() {
        let probs = PairProbabilities::iid(1, 1.0).unwrap();
        let model = |_: Segment, pbar: f64| {
            Ok(RatePoint {
                rate: (1.0 + pbar).ln(),
                rate_se: 0.0,
                slope: 1.0 / (1.0 + pbar),
                lambda: 0.0,
                power: pbar,
            })
        };
        let sol = solve_master(&model, &probs, 7.0, &MasterOptions::default()).unwrap();
        assert_eq!(sol.allocation.pbar, vec![7.0]);
        assert!(sol.trace[..2.min(sol.trace.len())].iter().all(|&v| (v - 8f64.ln()).abs() < 1e-12));
        assert!(sol.balance_active);
    }

    #[test]
    fn two_segment_toy_beats_grid_search() {
        // M = 2, p = 1/2 with concave curves; compare with a 50 x 50 grid
        let probs = PairProbabilities::iid(2, 0.5).unwrap();
        let gain = PairTable::from_fn(2, |i, j| if j - i == 2 { 0.3 } else { 1.0 + i as f64 });
        let model = {
            let gain = gain.clone();
            move |seg: Segment, pbar: f64| {
                let g = *gain.get(seg.head, seg.end);
                Ok(RatePoint {
                    rate: (1.0 + g * pbar).ln(),
                    rate_se: 0.0,
                    slope: g / (1.0 + g * pbar),
                    lambda: 0.0,
                    power: pbar,
                })
            }
        };
        let p0 = 4.0;
        let opts = MasterOptions {
            max_iterations: 400,
            window: 0,
            ..MasterOptions::default()
        };
        let sol = solve_master(&model, &probs, p0, &opts).unwrap();
        assert!(sol.allocation.budget_used() <= p0 * (1.0 + 1e-6));
        assert!(sol.best_trace.windows(2).all(|w| w[1] >= w[0]));
        // grid over the three pair powers with the budget tight on the third
        let pr = |i, j| probs.get(i, j);
        let rate = |i: usize, j: usize, x: f64| (1.0 + gain.get(i, j) * x).ln();
        let mut best = 0.0f64;
        let n = 50;
        let cap01 = p0 / pr(0, 1);
        for a in 0..=n {
            let x01 = cap01 * a as f64 / n as f64;
            let rest = p0 - pr(0, 1) * x01;
            for b in 0..=n {
                let x12 = rest / pr(1, 2) * b as f64 / n as f64;
                let x02 = ((rest - pr(1, 2) * x12) / pr(0, 2)).max(0.0);
                let u1 = pr(0, 1) * rate(0, 1, x01) + pr(0, 2) * rate(0, 2, x02);
                let u2 = pr(0, 2) * rate(0, 2, x02) + pr(1, 2) * rate(1, 2, x12);
                best = best.max(u1.min(u2));
            }
        }
        assert!(sol.objective >= best * 0.99, "{} vs grid {}", sol.objective, best);
    }
}
