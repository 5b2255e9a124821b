//! Per-segment hop selection and power control.
//!
//! Inside one continuous segment the packet moves forward one frame at a
//! time. At each frame the current holder sees only its own fresh CSI and
//! picks the next hop and transmit power. The policy minimises the
//! Lagrangian cost `E[sum T + lambda (sum P T - pbar sum T)]` by backward
//! recursion over the node index; `lambda` is then tuned until the
//! policy's average power matches the segment budget `pbar`.
//!
//! Rates are in nats per unit time (natural logarithm throughout).

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};
use crate::model::{Segment, Topology};
use crate::scalar::{mean_and_se, Scalar};

fn check_positive<S: Scalar>(name: &str, v: S) -> Result<()> {
    if !v.is_finite() || !(v > S::zero()) {
        return Err(domain(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

/// Time to push one nat over a link: `1 / ln(1 + G P)`.
pub fn per_hop_time<S: Scalar>(gain: S, power: S) -> Result<S> {
    check_positive("gain", gain)?;
    check_positive("power", power)?;
    Ok(hop_time(gain, power))
}

/// [`per_hop_time`] for a holder at `source` in a segment ending at `end`;
/// zero once the packet has arrived.
pub fn per_hop_time_from<S: Scalar>(source: usize, end: usize, gain: S, power: S) -> Result<S> {
    if source >= end {
        return Ok(S::zero());
    }
    per_hop_time(gain, power)
}

/// Energy per nat over a link: `P / ln(1 + G P)`.
pub fn per_hop_cost<S: Scalar>(gain: S, power: S) -> Result<S> {
    Ok(power * per_hop_time(gain, power)?)
}

pub fn per_hop_cost_from<S: Scalar>(source: usize, end: usize, gain: S, power: S) -> Result<S> {
    if source >= end {
        return Ok(S::zero());
    }
    per_hop_cost(gain, power)
}

/// Lagrangian per-hop cost `(1 + lambda (P - pbar)) / ln(1 + G P)`.
pub fn g_value<S: Scalar>(gain: S, power: S, lambda: S, pbar: S) -> Result<S> {
    check_positive("gain", gain)?;
    check_positive("power", power)?;
    if !lambda.is_finite() || lambda < S::zero() {
        return Err(domain(format!("lambda must be >= 0, got {lambda}")));
    }
    if !pbar.is_finite() {
        return Err(domain("pbar must be finite"));
    }
    Ok(lagrangian_cost(gain, power, lambda, pbar))
}

#[inline]
fn hop_time<S: Scalar>(gain: S, power: S) -> S {
    (gain * power).ln_1p().recip()
}

#[inline]
fn lagrangian_cost<S: Scalar>(gain: S, power: S, lambda: S, pbar: S) -> S {
    (S::one() + lambda * (power - pbar)) * hop_time(gain, power)
}

/// `(1 + x) ln(1 + x) - x`, accurate for small `x`.
#[inline]
fn excess<S: Scalar>(x: S) -> S {
    if x < S::lit(1e-4) {
        let x2 = x * x;
        x2 / S::lit(2.0) - x2 * x / S::lit(6.0) + x2 * x2 / S::lit(12.0)
    } else {
        (S::one() + x) * x.ln_1p() - x
    }
}

/// Left side of the power stationarity condition:
/// `G / ((1 + P G) ln(1 + P G) + (pbar - P) G)`.
pub fn foc_lhs<S: Scalar>(gain: S, power: S, pbar: S) -> S {
    gain / (pbar * gain + excess(power * gain))
}

/// Hard limits on the per-frame transmit power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLimits<S> {
    pub floor: S,
    pub cap: S,
}

impl<S: Scalar> PowerLimits<S> {
    /// Floor and cap as multiples of the budget.
    pub fn relative(pbar: S, floor_factor: S, cap_factor: S) -> Self {
        Self {
            floor: pbar * floor_factor,
            cap: pbar * cap_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_positive("power floor", self.floor)?;
        check_positive("power cap", self.cap)?;
        if self.floor >= self.cap {
            return Err(domain("power floor must be below the cap"));
        }
        Ok(())
    }
}

/// Root of the stationarity condition in `P`, clamped to `[floor, cap]`.
///
/// The left side of the condition decreases from `1/pbar` at `P = 0+`, so
/// `lambda >= 1/pbar` yields the floor and `lambda = 0` (or a root past
/// the cap) yields the cap.
pub fn solve_optimal_power<S: Scalar>(
    gain: S,
    pbar: S,
    lambda: S,
    limits: PowerLimits<S>,
) -> Result<S> {
    for (name, v) in [("gain", gain), ("pbar", pbar), ("lambda", lambda)] {
        if !v.is_finite() {
            return Err(domain(format!("{name} must be finite, got {v}")));
        }
    }
    check_positive("gain", gain)?;
    check_positive("pbar", pbar)?;
    if lambda < S::zero() {
        return Err(domain(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(optimal_power(gain, pbar, lambda, limits))
}

pub(crate) fn optimal_power<S: Scalar>(gain: S, pbar: S, lambda: S, limits: PowerLimits<S>) -> S {
    if lambda <= S::zero() {
        return limits.cap;
    }
    if lambda * pbar >= S::one() {
        return limits.floor;
    }
    // excess(P G) = G (1/lambda - pbar)
    let target = gain * (lambda.recip() - pbar);
    let x_cap = limits.cap * gain;
    if excess(x_cap) <= target {
        return limits.cap;
    }
    let eps = S::epsilon();
    let mut lo = (S::lit(2.0) * target).sqrt().min(x_cap);
    let mut hi = x_cap;
    let mut x = hi;
    for _ in 0..200 {
        let r = excess(x) - target;
        if r.abs() <= S::lit(4.0) * eps * target {
            break;
        }
        if r > S::zero() {
            hi = x;
        } else {
            lo = x;
        }
        let slope = x.ln_1p();
        let newton = x - r / slope;
        x = if slope > S::zero() && newton > lo && newton < hi {
            newton
        } else {
            (lo + hi) / S::lit(2.0)
        };
        if hi - lo <= S::lit(2.0) * eps * hi {
            break;
        }
    }
    (x / gain).max(limits.floor).min(limits.cap)
}

/// How the transmitter picks its power for a given link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PowerRule<S> {
    /// Stationary point of the Lagrangian cost within the limits.
    Continuous { limits: PowerLimits<S> },
    /// Best level of a finite grid (ties go to the lower level).
    Grid { levels: Vec<S> },
}

impl<S: Scalar> PowerRule<S> {
    #[inline]
    pub fn best_power(&self, gain: S, lambda: S, pbar: S) -> S {
        match self {
            PowerRule::Continuous { limits } => optimal_power(gain, pbar, lambda, *limits),
            PowerRule::Grid { levels } => {
                let mut best = levels[0];
                let mut best_cost = lagrangian_cost(gain, best, lambda, pbar);
                for &p in &levels[1..] {
                    let c = lagrangian_cost(gain, p, lambda, pbar);
                    if c < best_cost {
                        best = p;
                        best_cost = c;
                    }
                }
                best
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            PowerRule::Continuous { limits } => limits.validate(),
            PowerRule::Grid { levels } => {
                if levels.is_empty() {
                    return Err(domain("power grid is empty"));
                }
                levels.iter().try_for_each(|&p| check_positive("grid power", p))
            }
        }
    }
}

/// Distribution of the small-scale power gain `|H|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FadingModel<S> {
    /// Unit-mean exponential.
    Rayleigh,
    /// Finite set of levels with probabilities.
    Discrete { levels: Vec<S>, probs: Vec<S> },
}

impl<S: Scalar> FadingModel<S> {
    fn validate(&self) -> Result<()> {
        if let FadingModel::Discrete { levels, probs } = self {
            if levels.is_empty() || levels.len() != probs.len() {
                return Err(domain("discrete fading needs matching levels and probabilities"));
            }
            levels.iter().try_for_each(|&l| check_positive("fading level", l))?;
            if probs.iter().any(|&p| p < S::zero()) {
                return Err(domain("negative fading probability"));
            }
            let total: S = probs.iter().copied().sum();
            if (total - S::one()).abs() > S::lit(1e-9) {
                return Err(domain(format!("fading probabilities sum to {total}")));
            }
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> S {
        match self {
            FadingModel::Rayleigh => S::sample_exp1(rng),
            FadingModel::Discrete { levels, probs } => {
                let u = S::sample_unit(rng);
                let mut acc = S::zero();
                for (&l, &p) in levels.iter().zip(probs) {
                    acc = acc + p;
                    if u < acc {
                        return l;
                    }
                }
                levels[levels.len() - 1]
            }
        }
    }
}

/// Knobs shared by every segment solved in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings<S> {
    /// Fading draws per node for each expectation.
    pub mc_samples: usize,
    /// Power cap as a multiple of the segment budget.
    pub cap_factor: S,
    /// Power floor as a multiple of the segment budget.
    pub floor_factor: S,
    /// Relative tolerance on the calibrated average power.
    pub power_tolerance: S,
    /// Packet size; only used to report per-packet times.
    pub packet_bits: S,
}

impl<S: Scalar> Default for SolverSettings<S> {
    fn default() -> Self {
        Self {
            mc_samples: 2000,
            cap_factor: S::lit(100.0),
            floor_factor: S::lit(1e-6),
            power_tolerance: S::lit(1e-2),
            packet_bits: S::one(),
        }
    }
}

/// One continuous segment's dynamic program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentProblem<S> {
    pub segment: Segment,
    pub pbar: S,
    pub power: PowerRule<S>,
    pub fading: FadingModel<S>,
    pub mc_samples: usize,
    pub packet_bits: S,
    /// `large_scale[a][b] = D_{head+a, head+b}`.
    large_scale: Vec<Vec<S>>,
}

impl<S: Scalar> SegmentProblem<S> {
    /// Rayleigh-faded segment of `topology` with continuous power control.
    pub fn new(
        topology: &Topology<S>,
        segment: Segment,
        pbar: S,
        settings: &SolverSettings<S>,
    ) -> Result<Self> {
        if segment.end > topology.last() {
            return Err(domain("segment beyond the route"));
        }
        let large_scale = (segment.head..=segment.end)
            .map(|a| {
                // only forward links are ever used; the rest stays zero so
                // the problem serialises without the infinite self gain
                (segment.head..=segment.end)
                    .map(|b| if b > a { topology.gain(a, b) } else { S::zero() })
                    .collect()
            })
            .collect();
        check_positive("pbar", pbar)?;
        let problem = Self {
            segment,
            pbar,
            power: PowerRule::Continuous {
                limits: PowerLimits::relative(pbar, settings.floor_factor, settings.cap_factor),
            },
            fading: FadingModel::Rayleigh,
            mc_samples: settings.mc_samples,
            packet_bits: settings.packet_bits,
            large_scale,
        };
        problem.validate()?;
        Ok(problem)
    }

    /// Segment with explicit large-scale gains, fading law and power rule.
    pub fn with_gains(
        segment: Segment,
        large_scale: Vec<Vec<S>>,
        pbar: S,
        power: PowerRule<S>,
        fading: FadingModel<S>,
        mc_samples: usize,
    ) -> Result<Self> {
        let problem = Self {
            segment,
            pbar,
            power,
            fading,
            mc_samples,
            packet_bits: S::one(),
            large_scale,
        };
        problem.validate()?;
        Ok(problem)
    }

    /// Same segment with a different budget; continuous limits follow the
    /// budget proportionally.
    pub fn with_budget(&self, pbar: S) -> Result<Self> {
        check_positive("pbar", pbar)?;
        let mut next = self.clone();
        if let PowerRule::Continuous { limits } = &mut next.power {
            let scale = pbar / self.pbar;
            limits.floor = limits.floor * scale;
            limits.cap = limits.cap * scale;
        }
        next.pbar = pbar;
        Ok(next)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment.head >= self.segment.end {
            return Err(domain(format!(
                "segment ({},{}) must have head < end",
                self.segment.head, self.segment.end
            )));
        }
        check_positive("pbar", self.pbar)?;
        if self.mc_samples == 0 {
            return Err(domain("mc_samples must be >= 1"));
        }
        let n = self.segment.hops() + 1;
        if self.large_scale.len() != n || self.large_scale.iter().any(|r| r.len() != n) {
            return Err(domain("large-scale gain matrix has the wrong shape"));
        }
        for a in 0..n {
            for b in a + 1..n {
                check_positive("large-scale gain", self.large_scale[a][b])?;
            }
        }
        self.power.validate()?;
        self.fading.validate()
    }

    pub fn hops(&self) -> usize {
        self.segment.hops()
    }

    /// Large-scale gain between local node indices.
    pub fn large_scale(&self, from: usize, to: usize) -> S {
        self.large_scale[from][to]
    }

    /// Hex SHA-256 over every field that affects the solution.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |v: f64| h.update(v.to_le_bytes());
        put(self.segment.head as f64);
        put(self.segment.end as f64);
        put(self.pbar.as_f64());
        put(self.mc_samples as f64);
        match &self.power {
            PowerRule::Continuous { limits } => {
                put(0.0);
                put(limits.floor.as_f64());
                put(limits.cap.as_f64());
            }
            PowerRule::Grid { levels } => {
                put(1.0);
                levels.iter().for_each(|l| put(l.as_f64()));
            }
        }
        match &self.fading {
            FadingModel::Rayleigh => put(0.0),
            FadingModel::Discrete { levels, probs } => {
                put(1.0);
                levels.iter().chain(probs).for_each(|l| put(l.as_f64()));
            }
        }
        for row in &self.large_scale {
            for v in row {
                put(v.as_f64());
            }
        }
        hex::encode(h.finalize())
    }

    fn draw_local_csi<R: Rng + ?Sized>(&self, local: usize, rng: &mut R, out: &mut Vec<S>) {
        out.clear();
        for m in local + 1..=self.hops() {
            out.push(self.fading.sample(rng) * self.large_scale[local][m]);
        }
    }
}

/// Weighted CSI realisations at every node of a segment.
///
/// For node `s` (local index) each scenario holds the gains towards
/// `s+1..=L`. Monte-Carlo sets hold equally weighted draws; exact sets
/// enumerate a discrete fading law.
#[derive(Debug, Clone)]
pub struct ScenarioSet<S> {
    nodes: Vec<NodeScenarios<S>>,
}

#[derive(Debug, Clone)]
struct NodeScenarios<S> {
    width: usize,
    weights: Vec<S>,
    gains: Vec<S>,
}

impl<S: Scalar> NodeScenarios<S> {
    fn len(&self) -> usize {
        self.weights.len()
    }

    fn gains(&self, k: usize) -> &[S] {
        &self.gains[k * self.width..(k + 1) * self.width]
    }
}

impl<S: Scalar> ScenarioSet<S> {
    /// `count` independent draws per node.
    pub fn monte_carlo<R: Rng + ?Sized>(problem: &SegmentProblem<S>, count: usize, rng: &mut R) -> Self {
        let hops = problem.hops();
        let w = S::lit(count as f64).recip();
        let mut scratch = Vec::new();
        let nodes = (0..hops)
            .map(|s| {
                let mut gains = Vec::with_capacity(count * (hops - s));
                for _ in 0..count {
                    problem.draw_local_csi(s, rng, &mut scratch);
                    gains.extend_from_slice(&scratch);
                }
                NodeScenarios {
                    width: hops - s,
                    weights: vec![w; count],
                    gains,
                }
            })
            .collect();
        Self { nodes }
    }

    /// Full enumeration of a discrete fading law; `None` for Rayleigh.
    pub fn exact(problem: &SegmentProblem<S>) -> Option<Self> {
        let FadingModel::Discrete { levels, probs } = &problem.fading else {
            return None;
        };
        let hops = problem.hops();
        let k = levels.len();
        let nodes = (0..hops)
            .map(|s| {
                let width = hops - s;
                let count = k.pow(width as u32);
                let mut weights = Vec::with_capacity(count);
                let mut gains = Vec::with_capacity(count * width);
                for code in 0..count {
                    let mut c = code;
                    let mut w = S::one();
                    for m in 0..width {
                        let level = c % k;
                        c /= k;
                        w = w * probs[level];
                        gains.push(levels[level] * problem.large_scale[s][s + 1 + m]);
                    }
                    weights.push(w);
                }
                NodeScenarios {
                    width,
                    weights,
                    gains,
                }
            })
            .collect();
        Some(Self { nodes })
    }

    /// Exact set when the fading law is discrete, Monte-Carlo otherwise.
    pub fn for_problem<R: Rng + ?Sized>(problem: &SegmentProblem<S>, rng: &mut R) -> Self {
        Self::exact(problem).unwrap_or_else(|| Self::monte_carlo(problem, problem.mc_samples, rng))
    }

    pub fn scenario_count(&self, local: usize) -> usize {
        self.nodes[local].len()
    }

    pub fn gains(&self, local: usize, k: usize) -> &[S] {
        self.nodes[local].gains(k)
    }

    pub fn weight(&self, local: usize, k: usize) -> S {
        self.nodes[local].weights[k]
    }
}

/// Expected Lagrangian cost-to-go `J(s)` for `s = head..=end` (stored by
/// local index; `J(end) = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable<S> {
    pub costs: Vec<S>,
}

impl<S: Scalar> ValueTable<S> {
    pub fn cost(&self, local: usize) -> S {
        self.costs[local]
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }
}

/// Next hop and power chosen at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecision<S> {
    /// Local index of the next holder.
    pub next: usize,
    pub power: S,
    /// Candidates examined; equals the number of downstream nodes.
    pub evaluations: usize,
}

#[inline]
fn decide<S: Scalar>(
    problem: &SegmentProblem<S>,
    lambda: S,
    table: &[S],
    local: usize,
    gains: &[S],
) -> StepDecision<S> {
    let mut best = StepDecision {
        next: local + 1,
        power: S::zero(),
        evaluations: gains.len(),
    };
    let mut best_cost = S::infinity();
    for (k, &g) in gains.iter().enumerate() {
        let m = local + 1 + k;
        let p = problem.power.best_power(g, lambda, problem.pbar);
        let c = lagrangian_cost(g, p, lambda, problem.pbar) + table[m];
        if c < best_cost {
            best_cost = c;
            best.next = m;
            best.power = p;
        }
    }
    best
}

/// Backward recursion over a fixed scenario set.
pub fn offline_recursion_on<S: Scalar>(
    problem: &SegmentProblem<S>,
    lambda: S,
    scenarios: &ScenarioSet<S>,
) -> ValueTable<S> {
    let hops = problem.hops();
    let mut costs = vec![S::zero(); hops + 1];
    for s in (0..hops).rev() {
        let node = &scenarios.nodes[s];
        let mut acc = S::zero();
        for k in 0..node.len() {
            let gains = node.gains(k);
            let mut best = S::infinity();
            for (off, &g) in gains.iter().enumerate() {
                let p = problem.power.best_power(g, lambda, problem.pbar);
                let c = lagrangian_cost(g, p, lambda, problem.pbar) + costs[s + 1 + off];
                if c < best {
                    best = c;
                }
            }
            acc = acc + node.weights[k] * best;
        }
        costs[s] = acc;
    }
    ValueTable { costs }
}

/// Backward recursion with a fresh scenario set drawn from `rng` (exact
/// enumeration when the fading law is discrete).
pub fn offline_recursion<S: Scalar, R: Rng + ?Sized>(
    problem: &SegmentProblem<S>,
    lambda: S,
    rng: &mut R,
) -> Result<ValueTable<S>> {
    problem.validate()?;
    if !lambda.is_finite() || lambda < S::zero() {
        return Err(domain("lambda must be >= 0"));
    }
    let scenarios = ScenarioSet::for_problem(problem, rng);
    Ok(offline_recursion_on(problem, lambda, &scenarios))
}

/// Average behaviour of a policy over episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics<S> {
    /// `E[1 / sum T]`.
    pub rate: S,
    pub rate_se: S,
    /// `E[sum P T / sum T]`, the per-episode average power.
    pub power: S,
    pub power_se: S,
    /// `E[sum P T] / E[sum T]`.
    pub power_ratio_of_means: S,
    /// `E[sum T]`.
    pub mean_time: S,
    /// Number of simulated episodes; zero for exact evaluation.
    pub episodes: usize,
}

fn metrics_exact<S: Scalar>(
    problem: &SegmentProblem<S>,
    lambda: S,
    table: &[S],
    scenarios: &ScenarioSet<S>,
) -> SegmentMetrics<S> {
    struct Acc<S> {
        rate: S,
        power: S,
        time: S,
        energy: S,
    }
    fn walk<S: Scalar>(
        problem: &SegmentProblem<S>,
        lambda: S,
        table: &[S],
        scenarios: &ScenarioSet<S>,
        s: usize,
        weight: S,
        time: S,
        energy: S,
        acc: &mut Acc<S>,
    ) {
        if s == problem.hops() {
            acc.rate = acc.rate + weight / time;
            acc.power = acc.power + weight * energy / time;
            acc.time = acc.time + weight * time;
            acc.energy = acc.energy + weight * energy;
            return;
        }
        let node = &scenarios.nodes[s];
        for k in 0..node.len() {
            let w = node.weights[k];
            if w == S::zero() {
                continue;
            }
            let gains = node.gains(k);
            let d = decide(problem, lambda, table, s, gains);
            let t = hop_time(gains[d.next - s - 1], d.power);
            walk(
                problem,
                lambda,
                table,
                scenarios,
                d.next,
                weight * w,
                time + t,
                energy + d.power * t,
                acc,
            );
        }
    }
    let mut acc = Acc {
        rate: S::zero(),
        power: S::zero(),
        time: S::zero(),
        energy: S::zero(),
    };
    walk(problem, lambda, table, scenarios, 0, S::one(), S::zero(), S::zero(), &mut acc);
    SegmentMetrics {
        rate: acc.rate,
        rate_se: S::zero(),
        power: acc.power,
        power_se: S::zero(),
        power_ratio_of_means: acc.energy / acc.time,
        mean_time: acc.time,
        episodes: 0,
    }
}

/// Episodes replayed on a fixed bank: episode `e` uses scenario `e` at
/// every node it visits, which is a fresh independent draw per frame.
/// Yields `(sum T, sum P T)` per episode.
fn bank_episodes<'a, S: Scalar>(
    problem: &'a SegmentProblem<S>,
    lambda: S,
    table: &'a [S],
    bank: &'a ScenarioSet<S>,
) -> impl Iterator<Item = (S, S)> + 'a {
    let hops = problem.hops();
    (0..bank.nodes[0].len()).map(move |e| {
        let mut s = 0;
        let mut time = S::zero();
        let mut energy = S::zero();
        while s < hops {
            let gains = bank.nodes[s].gains(e);
            let d = decide(problem, lambda, table, s, gains);
            let t = hop_time(gains[d.next - s - 1], d.power);
            time = time + t;
            energy = energy + d.power * t;
            s = d.next;
        }
        (time, energy)
    })
}

fn metrics_on_bank<S: Scalar>(
    problem: &SegmentProblem<S>,
    lambda: S,
    table: &[S],
    bank: &ScenarioSet<S>,
) -> SegmentMetrics<S> {
    let n = bank.nodes[0].len();
    let mut rates = Vec::with_capacity(n);
    let mut powers = Vec::with_capacity(n);
    let mut time_sum = S::zero();
    let mut energy_sum = S::zero();
    for (time, energy) in bank_episodes(problem, lambda, table, bank) {
        rates.push(time.recip());
        powers.push(energy / time);
        time_sum = time_sum + time;
        energy_sum = energy_sum + energy;
    }
    let (rate, rate_se) = mean_and_se(&rates);
    let (power, power_se) = mean_and_se(&powers);
    SegmentMetrics {
        rate,
        rate_se,
        power,
        power_se,
        power_ratio_of_means: energy_sum / time_sum,
        mean_time: time_sum / S::lit(n as f64),
        episodes: n,
    }
}

/// Scenario sets used by one calibration: one for the recursion, one
/// (independent) for measuring the policy. `episodes = None` evaluates the
/// policy exactly, which requires a discrete fading law.
#[derive(Debug, Clone)]
pub struct CalibrationBanks<S> {
    pub recursion: ScenarioSet<S>,
    pub episodes: Option<ScenarioSet<S>>,
}

impl<S: Scalar> CalibrationBanks<S> {
    /// Exact sets for discrete fading, otherwise two independent
    /// Monte-Carlo banks of `mc_samples` draws.
    pub fn draw<R: Rng + ?Sized>(problem: &SegmentProblem<S>, rng: &mut R) -> Self {
        match ScenarioSet::exact(problem) {
            Some(exact) => Self {
                recursion: exact,
                episodes: None,
            },
            None => {
                let recursion = ScenarioSet::monte_carlo(problem, problem.mc_samples, rng);
                let episodes = ScenarioSet::monte_carlo(problem, problem.mc_samples, rng);
                Self {
                    recursion,
                    episodes: Some(episodes),
                }
            }
        }
    }

    /// Solves the recursion for `lambda` and measures the resulting policy.
    pub fn evaluate(&self, problem: &SegmentProblem<S>, lambda: S) -> (ValueTable<S>, SegmentMetrics<S>) {
        let table = offline_recursion_on(problem, lambda, &self.recursion);
        let metrics = match &self.episodes {
            Some(bank) => metrics_on_bank(problem, lambda, &table.costs, bank),
            None => metrics_exact(problem, lambda, &table.costs, &self.recursion),
        };
        (table, metrics)
    }

    /// Per-episode rates `1 / sum T` of a policy on the measuring bank, in
    /// bank order, so that policies measured on the same banks can be
    /// compared episode by episode. `None` under exact evaluation.
    pub fn episode_rates(&self, policy: &CalibratedPolicy<S>) -> Option<Vec<S>> {
        let bank = self.episodes.as_ref()?;
        Some(
            bank_episodes(&policy.problem, policy.lambda, &policy.table.costs, bank)
                .map(|(t, _)| t.recip())
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport<S> {
    pub metrics: SegmentMetrics<S>,
    /// Multiplier evaluations performed.
    pub iterations: usize,
    /// Whether the measured power met the budget within tolerance (or the
    /// budget is slack at `lambda = 0`).
    pub converged: bool,
    /// `lambda = 0` already satisfies the budget.
    pub budget_slack: bool,
}

/// Solved segment: multiplier, cost-to-go table and calibration summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPolicy<S> {
    pub problem: SegmentProblem<S>,
    pub lambda: S,
    pub table: ValueTable<S>,
    pub report: CalibrationReport<S>,
}

/// Tuning of the multiplier search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions<S> {
    /// Relative tolerance on the measured average power; only measured powers in
    /// `[pbar (1 - tolerance), pbar]` are accepted.
    pub tolerance: S,
    pub max_evaluations: usize,
    /// Starting guess, e.g. the multiplier of a nearby budget.
    pub hint: Option<S>,
}

impl<S: Scalar> Default for CalibrationOptions<S> {
    fn default() -> Self {
        Self {
            tolerance: S::lit(1e-2),
            max_evaluations: 80,
            hint: None,
        }
    }
}

/// Calibrates with fresh banks drawn from `rng` and default options.
pub fn calibrate_lambda<S: Scalar, R: Rng + ?Sized>(
    problem: &SegmentProblem<S>,
    rng: &mut R,
) -> Result<CalibratedPolicy<S>> {
    problem.validate()?;
    let banks = CalibrationBanks::draw(problem, rng);
    calibrate_with(problem, &banks, &CalibrationOptions::default())
}

/// Finds `lambda` in `[0, 1/pbar]` whose policy spends `pbar` on average.
///
/// Measured power is non-increasing in `lambda`, so the search keeps a
/// bracket `[lo, hi]` with `power(lo) > pbar >= power(hi)` and shrinks it
/// with Illinois false-position steps, falling back to bisection when the
/// bracket stalls. If the tolerance cannot be met (a step in the measured
/// power), the feasible end of the bracket is returned.
pub fn calibrate_with<S: Scalar>(
    problem: &SegmentProblem<S>,
    banks: &CalibrationBanks<S>,
    options: &CalibrationOptions<S>,
) -> Result<CalibratedPolicy<S>> {
    let pbar = problem.pbar;
    let tol = options.tolerance * pbar;
    let counter = std::cell::Cell::new(0usize);
    let eval = |lambda: S| {
        counter.set(counter.get() + 1);
        let (table, metrics) = banks.evaluate(problem, lambda);
        (lambda, table, metrics)
    };
    let finish = |(lambda, table, metrics): (S, ValueTable<S>, SegmentMetrics<S>),
                  iterations: usize,
                  converged: bool,
                  budget_slack: bool| CalibratedPolicy {
        problem: problem.clone(),
        lambda,
        table,
        report: CalibrationReport {
            metrics,
            iterations,
            converged,
            budget_slack,
        },
    };

    let evals = || counter.get();
    // accepted band: pbar - tol <= power <= pbar
    let accept = |power: S| power <= pbar && power >= pbar - tol;
    let zero = eval(S::zero());
    if zero.2.power <= pbar {
        return Ok(finish(zero, evals(), true, true));
    }
    let top = pbar.recip();
    let mut hi = eval(top);
    if hi.2.power > pbar {
        return Err(Error::Calibration {
            head: problem.segment.head,
            end: problem.segment.end,
            diagnostics: format!(
                "power {} still above budget {} at lambda = 1/pbar",
                hi.2.power, pbar
            ),
        });
    }
    if accept(hi.2.power) {
        return Ok(finish(hi, evals(), true, false));
    }
    let mut lo = zero;

    if let Some(h) = options.hint {
        if h > lo.0 && h < hi.0 {
            let probe = eval(h);
            if accept(probe.2.power) {
                return Ok(finish(probe, evals(), true, false));
            }
            if probe.2.power > pbar {
                lo = probe;
            } else {
                hi = probe;
            }
        }
    }

    // f(lambda) = power - pbar: f(lo) > 0 >= f(hi)
    let mut f_lo = lo.2.power - pbar;
    let mut f_hi = hi.2.power - pbar;
    let mut side = 0i8;
    let mut last_width = hi.0 - lo.0;
    let mut k = 0usize;
    while evals() < options.max_evaluations {
        k += 1;
        let width = hi.0 - lo.0;
        if width <= S::lit(64.0) * S::epsilon() * top {
            break;
        }
        let use_bisect = k % 3 == 0 && width > last_width * S::lit(0.5);
        if k % 3 == 0 {
            last_width = width;
        }
        let mut lambda = if use_bisect {
            (lo.0 + hi.0) / S::lit(2.0)
        } else {
            (lo.0 * f_hi - hi.0 * f_lo) / (f_hi - f_lo)
        };
        if !(lambda > lo.0 && lambda < hi.0) {
            lambda = (lo.0 + hi.0) / S::lit(2.0);
        }
        let probe = eval(lambda);
        let f = probe.2.power - pbar;
        if accept(probe.2.power) {
            return Ok(finish(probe, evals(), true, false));
        }
        if f > S::zero() {
            lo = probe;
            f_lo = f;
            if side == 1 {
                f_hi = f_hi / S::lit(2.0);
            }
            side = 1;
        } else {
            hi = probe;
            f_hi = f;
            if side == -1 {
                f_lo = f_lo / S::lit(2.0);
            }
            side = -1;
        }
    }
    Ok(finish(hi, evals(), false, false))
}

/// One frame of a segment episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord<S> {
    pub from: usize,
    pub to: usize,
    pub power: S,
    /// Per-nat transmission time.
    pub time: S,
    /// Per-nat energy `P T`.
    pub energy: S,
}

/// Trajectory of one packet through a segment (global node indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord<S> {
    pub frames: Vec<FrameRecord<S>>,
    pub total_time: S,
    pub total_energy: S,
    /// Candidate next hops examined over the whole episode.
    pub candidate_evaluations: usize,
}

impl<S: Scalar> EpisodeRecord<S> {
    /// Visited nodes, starting at the head and ending at the end node.
    pub fn hop_sequence(&self) -> Vec<usize> {
        let mut seq: Vec<usize> = self.frames.iter().map(|f| f.from).collect();
        if let Some(last) = self.frames.last() {
            seq.push(last.to);
        }
        seq
    }

    pub fn rate(&self) -> S {
        self.total_time.recip()
    }

    /// Per-episode average power `sum P T / sum T`.
    pub fn average_power(&self) -> S {
        self.total_energy / self.total_time
    }
}

impl<S: Scalar> CalibratedPolicy<S> {
    /// Policy with a given multiplier, without calibration.
    pub fn fixed(problem: SegmentProblem<S>, lambda: S, table: ValueTable<S>) -> Self {
        Self {
            problem,
            lambda,
            table,
            report: CalibrationReport {
                metrics: SegmentMetrics {
                    rate: S::nan(),
                    rate_se: S::nan(),
                    power: S::nan(),
                    power_se: S::nan(),
                    power_ratio_of_means: S::nan(),
                    mean_time: S::nan(),
                    episodes: 0,
                },
                iterations: 0,
                converged: false,
                budget_slack: false,
            },
        }
    }

    pub fn segment(&self) -> Segment {
        self.problem.segment
    }

    /// Marginal end-to-end rate per unit of budget, `lambda * U`.
    ///
    /// `lambda` prices power against per-nat time; converting that price to
    /// rate units multiplies by the rate itself, since `d ln(1/E[sum T]) /
    /// d pbar = lambda` along calibrated policies.
    pub fn rate_multiplier(&self) -> S {
        self.lambda * self.report.metrics.rate
    }

    /// Online decision at global node `source` given its local CSI
    /// `gains[k] = G_{source, source+1+k}`.
    pub fn online_step(&self, source: usize, gains: &[S]) -> Result<StepDecision<S>> {
        let seg = self.problem.segment;
        if source < seg.head || source >= seg.end {
            return Err(Error::Contract(format!(
                "online step at node {source} outside [{}, {})",
                seg.head, seg.end
            )));
        }
        if gains.len() != seg.end - source {
            return Err(Error::Contract(format!(
                "expected {} gains at node {source}, got {}",
                seg.end - source,
                gains.len()
            )));
        }
        let local = source - seg.head;
        let d = decide(&self.problem, self.lambda, &self.table.costs, local, gains);
        Ok(StepDecision {
            next: d.next + seg.head,
            ..d
        })
    }

    /// Runs one packet from head to end drawing fresh local CSI each frame.
    pub fn run_segment_episode<R: Rng + ?Sized>(&self, rng: &mut R) -> EpisodeRecord<S> {
        let head = self.problem.segment.head;
        let hops = self.problem.hops();
        let mut frames = Vec::new();
        let mut gains = Vec::with_capacity(hops);
        let mut s = 0;
        let mut total_time = S::zero();
        let mut total_energy = S::zero();
        let mut evaluations = 0;
        while s < hops {
            self.problem.draw_local_csi(s, rng, &mut gains);
            let d = decide(&self.problem, self.lambda, &self.table.costs, s, &gains);
            let time = hop_time(gains[d.next - s - 1], d.power);
            let energy = d.power * time;
            frames.push(FrameRecord {
                from: s + head,
                to: d.next + head,
                power: d.power,
                time,
                energy,
            });
            total_time = total_time + time;
            total_energy = total_energy + energy;
            evaluations += d.evaluations;
            s = d.next;
        }
        EpisodeRecord {
            frames,
            total_time,
            total_energy,
            candidate_evaluations: evaluations,
        }
    }

    /// Rate and power averaged over `episodes` fresh episodes.
    pub fn estimate_segment_metrics<R: Rng + ?Sized>(
        &self,
        episodes: usize,
        rng: &mut R,
    ) -> Result<SegmentMetrics<S>> {
        if episodes == 0 {
            return Err(domain("need at least one episode"));
        }
        let mut rates = Vec::with_capacity(episodes);
        let mut powers = Vec::with_capacity(episodes);
        let mut time_sum = S::zero();
        let mut energy_sum = S::zero();
        for _ in 0..episodes {
            let ep = self.run_segment_episode(rng);
            rates.push(ep.rate());
            powers.push(ep.average_power());
            time_sum = time_sum + ep.total_time;
            energy_sum = energy_sum + ep.total_energy;
        }
        let (rate, rate_se) = mean_and_se(&rates);
        let (power, power_se) = mean_and_se(&powers);
        Ok(SegmentMetrics {
            rate,
            rate_se,
            power,
            power_se,
            power_ratio_of_means: energy_sum / time_sum,
            mean_time: time_sum / S::lit(episodes as f64),
            episodes,
        })
    }

    /// Exact metrics for a discrete fading law.
    pub fn exact_metrics(&self) -> Option<SegmentMetrics<S>> {
        let scenarios = ScenarioSet::exact(&self.problem)?;
        Some(metrics_exact(&self.problem, self.lambda, &self.table.costs, &scenarios))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Topology;
    use crate::seed;
    use std::f64::consts::E;

    fn deterministic(segment: Segment, large_scale: Vec<Vec<f64>>, pbar: f64, power: PowerRule<f64>) -> SegmentProblem<f64> {
        SegmentProblem::with_gains(
            segment,
            large_scale,
            pbar,
            power,
            FadingModel::Discrete {
                levels: vec![1.0],
                probs: vec![1.0],
            },
            1,
        )
        .unwrap()
    }

    fn limits(pbar: f64) -> PowerLimits<f64> {
        PowerLimits::relative(pbar, 1e-6, 100.0)
    }

    #[test]
    fn hop_time_and_cost_examples() {
        assert!((per_hop_time(1.0, E - 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(per_hop_time_from(3, 3, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(per_hop_cost_from(3, 3, 1.0, 1.0).unwrap(), 0.0);
        assert!((per_hop_cost((E - 1.0) / 2.0, 2.0).unwrap() - 2.0).abs() < 1e-14);
        assert!(per_hop_time(0.0, 1.0).is_err());
        assert!(per_hop_time(1.0, -1.0).is_err());
        let mut last = 0.0;
        for k in 1..20 {
            let t = per_hop_time(1.0, 10f64.powi(-k)).unwrap();
            assert!(t > last);
            last = t;
        }
        for &(g, p) in &[(0.3f64, 2.0f64), (5.0, 0.1), (1e3, 7.0)] {
            let r = per_hop_cost(g, p).unwrap() / per_hop_time(g, p).unwrap();
            assert!((r - p).abs() < 1e-12 * p);
        }
    }

    #[test]
    fn g_value_examples() {
        let (g, p) = (0.7, 3.0);
        assert_eq!(g_value(g, p, 0.0, 5.0).unwrap(), per_hop_time(g, p).unwrap());
        assert_eq!(g_value(g, p, 0.4, p).unwrap(), per_hop_time(g, p).unwrap());
        assert!((g_value(1.0, E - 1.0, 1.0, E - 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(g_value(1.0, 1.0, -0.1, 1.0).is_err());
    }

    #[test]
    fn optimal_power_trivial_root_and_floor() {
        for &(g, pbar) in &[(1.0f64, 1.0f64), (0.01, 30.0), (40.0, 0.5)] {
            let lambda = g / ((1.0 + pbar * g) * (pbar * g).ln_1p());
            let p = solve_optimal_power(g, pbar, lambda, limits(pbar)).unwrap();
            assert!((p - pbar).abs() <= 1e-9 * pbar, "{p} vs {pbar}");
            let floor = solve_optimal_power(g, pbar, 1.0 / pbar, limits(pbar)).unwrap();
            assert_eq!(floor, limits(pbar).floor);
            assert_eq!(solve_optimal_power(g, pbar, 0.0, limits(pbar)).unwrap(), limits(pbar).cap);
        }
        assert!(solve_optimal_power(f64::NAN, 1.0, 0.5, limits(1.0)).is_err());
        assert!(solve_optimal_power(1.0, 1.0, f64::INFINITY, limits(1.0)).is_err());
    }

    #[test]
    fn optimal_power_agrees_with_dense_scan() {
        // independent check: scan the stationarity condition on a fine grid
        let (g, pbar, lambda) = (1.0, 1.0, 0.5);
        let p = solve_optimal_power(g, pbar, lambda, limits(pbar)).unwrap();
        let lhs = |p: f64| g / ((1.0 + p * g) * (p * g).ln_1p() + (pbar - p) * g);
        assert!((lhs(p) - lambda).abs() <= 1e-9);
        let n = 200_000;
        let (mut best, mut best_err) = (0.0, f64::INFINITY);
        for k in 1..=n {
            let q = 10.0 * k as f64 / n as f64;
            let err = (lhs(q) - lambda).abs();
            if err < best_err {
                best = q;
                best_err = err;
            }
        }
        assert!((best - p).abs() < 1e-3, "scan {best} vs solver {p}");
    }

    #[test]
    fn grid_rule_picks_cheapest_level() {
        let rule = PowerRule::Grid {
            levels: vec![0.5, 1.0, 2.0, 4.0],
        };
        let (g, lambda, pbar) = (0.8, 0.3, 1.5);
        let chosen = rule.best_power(g, lambda, pbar);
        let best = [0.5, 1.0, 2.0, 4.0]
            .into_iter()
            .min_by(|a, b| {
                g_value(g, *a, lambda, pbar)
                    .unwrap()
                    .partial_cmp(&g_value(g, *b, lambda, pbar).unwrap())
                    .unwrap()
            })
            .unwrap();
        assert_eq!(chosen, best);
    }

    #[test]
    fn single_hop_deterministic_value() {
        let seg = Segment { head: 0, end: 1 };
        let pb = 2.0;
        let problem = deterministic(seg, vec![vec![0.0, 0.3], vec![0.3, 0.0]], pb, PowerRule::Continuous { limits: limits(pb) });
        let lambda = 0.2;
        let table = offline_recursion(&problem, lambda, &mut seed::stream(0, &[1])).unwrap();
        let p = solve_optimal_power(0.3, pb, lambda, limits(pb)).unwrap();
        assert_eq!(table.cost(1), 0.0);
        assert!((table.cost(0) - g_value(0.3, p, lambda, pb).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn two_hop_deterministic_matches_hand_enumeration() {
        let seg = Segment { head: 2, end: 4 };
        let d = |x: f64| x.powf(-2.0);
        let ls = vec![vec![0.0, d(1.0), d(2.0)], vec![d(1.0), 0.0, d(1.0)], vec![d(2.0), d(1.0), 0.0]];
        let levels = vec![0.25, 0.5, 1.0, 2.0, 4.0];
        let pb = 1.0;
        let problem = deterministic(seg, ls, pb, PowerRule::Grid { levels: levels.clone() });
        for &lambda in &[0.0, 0.3, 0.9] {
            let table = offline_recursion(&problem, lambda, &mut seed::stream(0, &[2])).unwrap();
            let best = |g: f64| {
                levels
                    .iter()
                    .map(|&p| g_value(g, p, lambda, pb).unwrap())
                    .fold(f64::INFINITY, f64::min)
            };
            let j1 = best(d(1.0));
            let j0 = (best(d(2.0))).min(best(d(1.0)) + j1);
            assert!((table.cost(1) - j1).abs() < 1e-14);
            assert!((table.cost(0) - j0).abs() < 1e-14);
            assert_eq!(table.cost(2), 0.0);
        }
    }

    fn faded_problem(nodes: usize, pbar: f64, samples: usize) -> SegmentProblem<f64> {
        let topo = Topology::uniform(nodes, (nodes - 1) as f64, 3.0).unwrap();
        let settings = SolverSettings {
            mc_samples: samples,
            ..Default::default()
        };
        SegmentProblem::new(&topo, Segment { head: 0, end: nodes - 1 }, pbar, &settings).unwrap()
    }

    #[test]
    fn value_table_is_zero_at_the_end_and_positive_before() {
        let p = faded_problem(5, 10.0, 500);
        let table = offline_recursion(&p, 0.05, &mut seed::stream(1, &[3])).unwrap();
        assert_eq!(table.cost(4), 0.0);
        for s in 0..4 {
            assert!(table.cost(s) > 0.0 && table.cost(s).is_finite());
        }
    }

    #[test]
    fn calibration_meets_budget_on_four_hops() {
        let p = faded_problem(5, 10.0, 1000);
        let policy = calibrate_lambda(&p, &mut seed::stream(2, &[4])).unwrap();
        assert!(policy.report.converged);
        assert!(policy.lambda > 0.0);
        let m = policy.report.metrics;
        assert!((m.power - 10.0).abs() <= 0.1, "achieved {}", m.power);
    }

    #[test]
    fn calibration_slack_budget_gives_zero_multiplier() {
        let seg = Segment { head: 0, end: 2 };
        let ls = vec![vec![0.0, 1.0, 0.25], vec![1.0, 0.0, 1.0], vec![0.25, 1.0, 0.0]];
        let problem = SegmentProblem::with_gains(
            seg,
            ls,
            5.0,
            PowerRule::Grid { levels: vec![1.0, 2.0, 4.0] },
            FadingModel::Discrete {
                levels: vec![0.5, 1.5],
                probs: vec![0.5, 0.5],
            },
            1,
        )
        .unwrap();
        let policy = calibrate_lambda(&problem, &mut seed::stream(0, &[5])).unwrap();
        assert_eq!(policy.lambda, 0.0);
        assert!(policy.report.budget_slack);
        assert!(policy.report.metrics.power <= 5.0);
    }

    #[test]
    fn multiplier_decreases_with_budget() {
        let p = faded_problem(4, 1.0, 400);
        let banks = CalibrationBanks::draw(&p, &mut seed::stream(3, &[6]));
        let opts = CalibrationOptions {
            tolerance: 1e-4,
            ..Default::default()
        };
        let mut last = f64::INFINITY;
        let mut last_rate = 0.0;
        for k in 0..8 {
            let pb = 10f64.powf(k as f64 * 0.4);
            let pol = calibrate_with(&p.with_budget(pb).unwrap(), &banks, &opts).unwrap();
            assert!(pol.lambda <= last, "lambda rose at pbar={pb}");
            assert!(pol.report.metrics.rate >= last_rate);
            last = pol.lambda;
            last_rate = pol.report.metrics.rate;
        }
    }

    fn policy_for(p: &SegmentProblem<f64>, lambda: f64, seed_value: u64) -> CalibratedPolicy<f64> {
        let table = offline_recursion(p, lambda, &mut seed::stream(seed_value, &[7])).unwrap();
        CalibratedPolicy::fixed(p.clone(), lambda, table)
    }

    #[test]
    fn online_step_examples() {
        let p = faded_problem(5, 10.0, 200);
        let pol = policy_for(&p, 0.05, 1);
        let last = pol.online_step(3, &[0.7]).unwrap();
        assert_eq!(last.next, 4);
        assert_eq!(last.evaluations, 1);
        assert!(matches!(pol.online_step(4, &[]), Err(Error::Contract(_))));
        assert!(matches!(pol.online_step(1, &[1.0]), Err(Error::Contract(_))));

        // dominance: equal gains, the candidate with the cheaper cost-to-go wins
        let mut rigged = pol.clone();
        rigged.table.costs = vec![9.0, 1e6, 0.5, 0.0, 0.0];
        let d = rigged.online_step(0, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_ne!(d.next, 1);

        // fixed CSI: the decision equals an explicit enumeration
        let mut rng = seed::stream(9, &[8]);
        for _ in 0..50 {
            let gains: Vec<f64> = (1..=4).map(|m| f64::sample_exp1(&mut rng) * p.large_scale(0, m)).collect();
            let d = pol.online_step(0, &gains).unwrap();
            let mut best = (f64::INFINITY, 0);
            for (k, &g) in gains.iter().enumerate() {
                let pw = solve_optimal_power(g, 10.0, 0.05, limits(10.0)).unwrap();
                let c = g_value(g, pw, 0.05, 10.0).unwrap() + pol.table.cost(k + 1);
                if c < best.0 {
                    best = (c, k + 1);
                }
            }
            assert_eq!(d.next, best.1);
            assert_eq!(d.evaluations, 4);
        }
    }

    #[test]
    fn episodes_progress_and_reproduce() {
        let p = faded_problem(6, 10.0, 200);
        let pol = policy_for(&p, 0.05, 2);
        for k in 0..200 {
            let ep = pol.run_segment_episode(&mut seed::stream(k, &[9]));
            let seq = ep.hop_sequence();
            assert_eq!(seq[0], 0);
            assert_eq!(*seq.last().unwrap(), 5);
            assert!(seq.windows(2).all(|w| w[0] < w[1]));
            assert!(ep.frames.len() <= 5);
            assert!(ep.candidate_evaluations <= 25);
        }
        let a = pol.run_segment_episode(&mut seed::stream(5, &[9]));
        let b = pol.run_segment_episode(&mut seed::stream(5, &[9]));
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_episode_time_matches_unrolled_table() {
        let seg = Segment { head: 0, end: 3 };
        let topo = Topology::<f64>::uniform(4, 3.0, 2.0).unwrap();
        let ls: Vec<Vec<f64>> = (0..4).map(|a| (0..4).map(|b| topo.gain(a, b)).collect()).collect();
        let pb = 3.0;
        let lambda = 0.1;
        let problem = deterministic(seg, ls, pb, PowerRule::Continuous { limits: limits(pb) });
        let pol = policy_for(&problem, lambda, 0);
        let ep = pol.run_segment_episode(&mut seed::stream(0, &[10]));
        // unroll: at each node the table's action, time without the power term
        let mut s = 0;
        let mut total = 0.0;
        while s < 3 {
            let (mut best, mut arg, mut pw) = (f64::INFINITY, 0, 0.0);
            for m in s + 1..=3 {
                let g = problem.large_scale(s, m);
                let p = solve_optimal_power(g, pb, lambda, limits(pb)).unwrap();
                let c = g_value(g, p, lambda, pb).unwrap() + pol.table.cost(m);
                if c < best {
                    best = c;
                    arg = m;
                    pw = p;
                }
            }
            total += per_hop_time(problem.large_scale(s, arg), pw).unwrap();
            s = arg;
        }
        assert!((ep.total_time - total).abs() < 1e-12);
    }

    #[test]
    fn deterministic_single_hop_metrics() {
        let seg = Segment { head: 0, end: 1 };
        let pb = 2.0;
        let problem = deterministic(seg, vec![vec![0.0, 0.4], vec![0.4, 0.0]], pb, PowerRule::Grid { levels: vec![pb] });
        let pol = policy_for(&problem, 0.3, 0);
        let m = pol.estimate_segment_metrics(10, &mut seed::stream(0, &[11])).unwrap();
        assert!((m.rate - (0.4f64 * 2.0).ln_1p()).abs() < 1e-14);
        assert!((m.power - 2.0).abs() < 1e-14);
        assert!((m.power_ratio_of_means - 2.0).abs() < 1e-14);
        let exact = pol.exact_metrics().unwrap();
        assert!((exact.rate - m.rate).abs() < 1e-14);
    }

    #[test]
    fn standard_error_shrinks_like_inverse_root_n() {
        let p = faded_problem(4, 10.0, 300);
        let pol = policy_for(&p, 0.05, 4);
        let se: Vec<f64> = [100usize, 1000, 10_000]
            .iter()
            .map(|&n| pol.estimate_segment_metrics(n, &mut seed::stream(n as u64, &[12])).unwrap().rate_se)
            .collect();
        for w in se.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 2.0 && ratio < 5.0, "se ratio {ratio}");
        }
    }

    #[test]
    fn exact_scenarios_weigh_to_one() {
        let seg = Segment { head: 0, end: 3 };
        let ls = vec![vec![1.0; 4]; 4];
        let problem = SegmentProblem::with_gains(
            seg,
            ls,
            1.0,
            PowerRule::Grid { levels: vec![1.0] },
            FadingModel::Discrete {
                levels: vec![0.5, 1.0, 2.0],
                probs: vec![0.2, 0.3, 0.5],
            },
            1,
        )
        .unwrap();
        let set = ScenarioSet::exact(&problem).unwrap();
        for s in 0..3 {
            assert_eq!(set.scenario_count(s), 3usize.pow((3 - s) as u32));
            let total: f64 = (0..set.scenario_count(s)).map(|k| set.weight(s, k)).sum();
            assert!((total - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn fingerprint_tracks_inputs() {
        let a = faded_problem(4, 10.0, 100);
        let b = a.with_budget(11.0).unwrap();
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn f32_solver_runs() {
        let topo = Topology::<f32>::uniform(3, 2.0, 3.0).unwrap();
        let settings = SolverSettings::<f32> {
            mc_samples: 300,
            ..Default::default()
        };
        let p = SegmentProblem::new(&topo, Segment { head: 0, end: 2 }, 10.0, &settings).unwrap();
        let pol = calibrate_lambda(&p, &mut seed::stream(0, &[13])).unwrap();
        assert!((pol.report.metrics.power - 10.0).abs() < 0.2);
    }
}
