//! Physical and stochastic environment of the relay chain.
//!
//! Nodes sit on a line in route order. Large-scale gains follow the
//! flat-earth law `D = d^-alpha`; small-scale fading is Rayleigh, so the
//! per-frame power gain `|H|^2` is unit-mean exponential. Primary-user
//! activity decides which nodes may use the shared band during an epoch,
//! and the maximal runs of usable nodes are the continuous segments.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::scalar::Scalar;

/// Flat-earth large-scale gain `d^-alpha`.
pub fn path_loss<S: Scalar>(distance: S, alpha: S) -> Result<S> {
    if !(distance > S::zero()) || !distance.is_finite() {
        return Err(domain(format!("distance must be positive, got {distance}")));
    }
    if !(alpha >= S::zero()) || !alpha.is_finite() {
        return Err(domain(format!("path-loss exponent must be >= 0, got {alpha}")));
    }
    Ok(distance.powf(-alpha))
}

/// Protection radius `(P0 / P_int)^(1/alpha)` around an active primary user.
pub fn min_safe_distance<S: Scalar>(p0: S, p_int: S, alpha: S) -> Result<S> {
    for (name, v) in [("P0", p0), ("P_int", p_int), ("alpha", alpha)] {
        if !(v > S::zero()) || !v.is_finite() {
            return Err(domain(format!("{name} must be positive, got {v}")));
        }
    }
    Ok((p0 / p_int).powf(alpha.recip()))
}

/// Ordered node positions and the pairwise path-loss matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology<S> {
    positions: Vec<S>,
    alpha: S,
    pathloss: Vec<Vec<S>>,
}

impl<S: Scalar> Topology<S> {
    pub fn new(positions: Vec<S>, alpha: S) -> Result<Self> {
        if positions.len() < 2 {
            return Err(domain("a route needs at least a source and a destination"));
        }
        if positions.iter().any(|p| !p.is_finite()) {
            return Err(domain("positions must be finite"));
        }
        if positions.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(domain("positions must be strictly increasing"));
        }
        let n = positions.len();
        let mut pathloss = vec![vec![S::zero(); n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    pathloss[i][j] = path_loss((positions[j] - positions[i]).abs(), alpha)?;
                } else {
                    pathloss[i][j] = S::infinity();
                }
            }
        }
        Ok(Self {
            positions,
            alpha,
            pathloss,
        })
    }

    /// `nodes` equally spaced nodes spanning `[0, length]`.
    pub fn uniform(nodes: usize, length: S, alpha: S) -> Result<Self> {
        if nodes < 2 {
            return Err(domain("a route needs at least two nodes"));
        }
        let step = length / S::lit((nodes - 1) as f64);
        Self::new((0..nodes).map(|k| step * S::lit(k as f64)).collect(), alpha)
    }

    /// Source at 0, destination at `length`, interior relays uniformly
    /// scattered in between and sorted.
    pub fn random_interior<R: Rng + ?Sized>(
        nodes: usize,
        length: S,
        alpha: S,
        rng: &mut R,
    ) -> Result<Self> {
        if nodes < 2 {
            return Err(domain("a route needs at least two nodes"));
        }
        let mut interior: Vec<S> = (0..nodes - 2)
            .map(|_| length * S::sample_unit(rng))
            .collect();
        interior.sort_by(|a, b| a.partial_cmp(b).expect("finite positions"));
        let mut positions = Vec::with_capacity(nodes);
        positions.push(S::zero());
        positions.extend(interior);
        positions.push(length);
        Self::new(positions, alpha)
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    /// Index of the destination, `M`.
    pub fn last(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn positions(&self) -> &[S] {
        &self.positions
    }

    pub fn alpha(&self) -> S {
        self.alpha
    }

    /// Large-scale gain `D_ij`; infinite on the diagonal.
    pub fn gain(&self, i: usize, j: usize) -> S {
        self.pathloss[i][j]
    }

    pub fn pathloss(&self) -> &[Vec<S>] {
        &self.pathloss
    }

    /// Whether `D_st >= D_st'` and `D_st >= D_s't` for all `t' >= t > s >= s'`.
    pub fn is_path_loss_dominated(&self) -> bool {
        let n = self.node_count();
        for s in 0..n {
            for t in s + 1..n {
                let d = self.pathloss[s][t];
                if (t + 1..n).any(|t2| self.pathloss[s][t2] > d) {
                    return false;
                }
                if (0..s).any(|s2| self.pathloss[s2][t] > d) {
                    return false;
                }
            }
        }
        true
    }
}

/// Geometry of the primary-user field in spatial mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FieldGeometry {
    /// Primary users on the route line.
    Line,
    /// Primary users in a strip `|y| <= half_width` around the route.
    Strip { half_width: f64 },
}

/// How availability bits are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ActivityMode<S> {
    /// Each `A_m` independent with `Pr(A_m = 1) = p_avail`.
    IidBernoulli { p_avail: S },
    /// Poisson field of primary users with density `rho_p`, each active
    /// with probability `p_active`; a node is usable iff no active user is
    /// closer than `d0`.
    SpatialField {
        rho_p: S,
        p_active: S,
        d0: S,
        geometry: FieldGeometry,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuActivityModel<S> {
    pub mode: ActivityMode<S>,
    /// Frames during which the availability vector stays fixed.
    pub epoch_frames: usize,
}

impl<S: Scalar> PuActivityModel<S> {
    pub fn iid(p_avail: S) -> Result<Self> {
        let m = Self {
            mode: ActivityMode::IidBernoulli { p_avail },
            epoch_frames: 1,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn spatial(rho_p: S, p_active: S, d0: S) -> Result<Self> {
        let m = Self {
            mode: ActivityMode::SpatialField {
                rho_p,
                p_active,
                d0,
                geometry: FieldGeometry::Line,
            },
            epoch_frames: 1,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: S| v >= S::zero() && v <= S::one();
        if self.epoch_frames < 1 {
            return Err(domain("epoch_frames must be >= 1"));
        }
        match &self.mode {
            ActivityMode::IidBernoulli { p_avail } => {
                if !unit(*p_avail) {
                    return Err(domain(format!("p_avail must lie in [0,1], got {p_avail}")));
                }
            }
            ActivityMode::SpatialField {
                rho_p,
                p_active,
                d0,
                geometry,
            } => {
                if !(*rho_p > S::zero()) {
                    return Err(domain("rho_p must be positive"));
                }
                if !unit(*p_active) {
                    return Err(domain("p_active must lie in [0,1]"));
                }
                if !(*d0 > S::zero()) {
                    return Err(domain("d0 must be positive"));
                }
                if let FieldGeometry::Strip { half_width } = geometry {
                    if !(*half_width > 0.0) {
                        return Err(domain("strip half width must be positive"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-node availability probability when it has a closed form.
    pub fn p_avail(&self) -> Option<S> {
        match self.mode {
            ActivityMode::IidBernoulli { p_avail } => Some(p_avail),
            ActivityMode::SpatialField { .. } => None,
        }
    }
}

/// Availability vector `A` for one sensing epoch.
///
/// The virtual bits `S_{-1}` and `S_{M+1}` are always zero and never stored.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PuActivityState {
    avail: Vec<bool>,
}

impl PuActivityState {
    pub fn new(avail: Vec<bool>) -> Self {
        Self { avail }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self::new(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.avail.len()
    }

    pub fn is_empty(&self) -> bool {
        self.avail.is_empty()
    }

    /// Bit at signed index, zero outside `0..len`.
    pub fn bit(&self, m: isize) -> bool {
        if m < 0 {
            return false;
        }
        self.avail.get(m as usize).copied().unwrap_or(false)
    }

    pub fn bits(&self) -> &[bool] {
        &self.avail
    }

    pub fn all_available(&self) -> bool {
        self.avail.iter().all(|&b| b)
    }
}

pub fn sample_pu_activity<S: Scalar, R: Rng + ?Sized>(
    model: &PuActivityModel<S>,
    topology: &Topology<S>,
    rng: &mut R,
) -> PuActivityState {
    match &model.mode {
        ActivityMode::IidBernoulli { p_avail } => PuActivityState::new(
            (0..topology.node_count())
                .map(|_| S::sample_unit(rng) < *p_avail)
                .collect(),
        ),
        ActivityMode::SpatialField {
            rho_p,
            p_active,
            d0,
            geometry,
        } => {
            let pos = topology.positions();
            let lo = pos[0] - *d0;
            let span = pos[pos.len() - 1] + *d0 - lo;
            let area = match geometry {
                FieldGeometry::Line => span,
                FieldGeometry::Strip { half_width } => span * S::lit(2.0 * half_width),
            };
            let mean = (*rho_p * area).as_f64();
            let count = if mean > 0.0 {
                Poisson::new(mean).map(|d| d.sample(rng)).unwrap_or(0.0) as usize
            } else {
                0
            };
            let mut active: Vec<(S, S)> = Vec::new();
            for _ in 0..count {
                let x = lo + span * S::sample_unit(rng);
                let y = match geometry {
                    FieldGeometry::Line => S::zero(),
                    FieldGeometry::Strip { half_width } => {
                        S::lit(*half_width) * (S::lit(2.0) * S::sample_unit(rng) - S::one())
                    }
                };
                if S::sample_unit(rng) < *p_active {
                    active.push((x, y));
                }
            }
            PuActivityState::new(
                pos.iter()
                    .map(|&p| {
                        active
                            .iter()
                            .all(|&(x, y)| ((x - p) * (x - p) + y * y).sqrt() >= *d0)
                    })
                    .collect(),
            )
        }
    }
}

/// Continuous segment `<R_head, ..., R_end>`; `head == end` is an isolated
/// usable node that carries no traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub head: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(head: usize, end: usize) -> Self {
        Self { head, end }
    }

    /// Number of hops `end - head`.
    pub fn hops(&self) -> usize {
        self.end - self.head
    }

    pub fn is_degenerate(&self) -> bool {
        self.head == self.end
    }

    /// Whether the segment carries traffic across section `m` (between
    /// nodes `m-1` and `m`).
    pub fn spans_section(&self, m: usize) -> bool {
        self.head < m && m <= self.end
    }
}

/// Maximal runs of available nodes, in route order.
pub fn partition_segments(state: &PuActivityState) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = None;
    for (m, &b) in state.bits().iter().enumerate() {
        match (b, start) {
            (true, None) => start = Some(m),
            (false, Some(h)) => {
                out.push(Segment::new(h, m - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(h) = start {
        out.push(Segment::new(h, state.len() - 1));
    }
    out
}

/// Dense upper-triangular table over pairs `0 <= i <= j <= M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTable<T> {
    last: usize,
    values: Vec<T>,
}

impl<T: Clone> PairTable<T> {
    pub fn filled(last: usize, value: T) -> Self {
        Self {
            last,
            values: vec![value; (last + 1) * (last + 2) / 2],
        }
    }
}

impl<T> PairTable<T> {
    pub fn from_fn(last: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity((last + 1) * (last + 2) / 2);
        for i in 0..=last {
            for j in i..=last {
                values.push(f(i, j));
            }
        }
        Self { last, values }
    }

    /// Destination index `M`.
    pub fn last(&self) -> usize {
        self.last
    }

    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.values[self.offset(i, j)]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut T {
        let k = self.offset(i, j);
        &mut self.values[k]
    }

    pub fn set(&mut self, i: usize, j: usize, value: T) {
        *self.get_mut(i, j) = value;
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        assert!(i <= j && j <= self.last, "pair ({i},{j}) outside table");
        // row r holds n - r entries
        let n = self.last + 1;
        i * n - i * i.saturating_sub(1) / 2 + (j - i)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &T)> {
        let last = self.last;
        (0..=last)
            .flat_map(move |i| (i..=last).map(move |j| (i, j)))
            .zip(self.values.iter())
    }
}

/// Probability that nodes `head..=end` form a continuous segment under
/// i.i.d. availability with `Pr(A_m = 1) = p`.
pub fn segment_probability_iid<S: Scalar>(head: usize, end: usize, last: usize, p: S) -> Result<S> {
    if head > end || end > last {
        return Err(domain(format!("pair ({head},{end}) out of range for M={last}")));
    }
    let run = S::lit((end - head + 1) as f64);
    let boundaries = i32::from(head > 0) + i32::from(end < last);
    Ok(p.powf(run) * (S::one() - p).powi(boundaries))
}

/// Segment probabilities with their standard errors (zero when exact).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProbabilities<S> {
    pub value: PairTable<S>,
    pub std_error: PairTable<S>,
}

impl<S: Scalar> PairProbabilities<S> {
    /// Exact i.i.d. table.
    pub fn iid(last: usize, p: S) -> Result<Self> {
        if !(p >= S::zero() && p <= S::one()) {
            return Err(domain("p_avail must lie in [0,1]"));
        }
        Ok(Self {
            value: PairTable::from_fn(last, |i, j| {
                segment_probability_iid(i, j, last, p).expect("indices in range")
            }),
            std_error: PairTable::filled(last, S::zero()),
        })
    }

    /// Closed form for i.i.d. activity, Monte-Carlo frequencies otherwise.
    pub fn for_model<R: Rng + ?Sized>(
        model: &PuActivityModel<S>,
        topology: &Topology<S>,
        samples: usize,
        rng: &mut R,
    ) -> Result<Self> {
        model.validate()?;
        match model.p_avail() {
            Some(p) => Self::iid(topology.last(), p),
            None => Self::monte_carlo(model, topology, samples, rng),
        }
    }

    pub fn monte_carlo<R: Rng + ?Sized>(
        model: &PuActivityModel<S>,
        topology: &Topology<S>,
        samples: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if samples == 0 {
            return Err(domain("need at least one sample"));
        }
        let last = topology.last();
        let mut counts = PairTable::filled(last, 0usize);
        for _ in 0..samples {
            let a = sample_pu_activity(model, topology, rng);
            for seg in partition_segments(&a) {
                *counts.get_mut(seg.head, seg.end) += 1;
            }
        }
        let n = S::lit(samples as f64);
        let value = PairTable::from_fn(last, |i, j| S::lit(*counts.get(i, j) as f64) / n);
        let std_error = PairTable::from_fn(last, |i, j| {
            let p = *value.get(i, j);
            (p * (S::one() - p) / n).sqrt()
        });
        Ok(Self { value, std_error })
    }

    pub fn get(&self, head: usize, end: usize) -> S {
        *self.value.get(head, end)
    }

    pub fn last(&self) -> usize {
        self.value.last()
    }
}

/// Local channel state seen by node `source` of a segment ending at `end`:
/// `gains[k] = G_{source, source+1+k} = |H|^2 D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingDraw<S> {
    pub source: usize,
    pub end: usize,
    pub gains: Vec<S>,
}

impl<S: Scalar> FadingDraw<S> {
    pub fn gain_to(&self, m: usize) -> S {
        self.gains[m - self.source - 1]
    }
}

/// Draws the local CSI at `source`: one independent Rayleigh gain per
/// downstream node of the segment.
pub fn sample_fading<S: Scalar, R: Rng + ?Sized>(
    topology: &Topology<S>,
    segment: Segment,
    source: usize,
    rng: &mut R,
) -> Result<FadingDraw<S>> {
    if source < segment.head || source >= segment.end || segment.end > topology.last() {
        return Err(Error::Contract(format!(
            "source {source} must lie in [{}, {})",
            segment.head, segment.end
        )));
    }
    let gains = (source + 1..=segment.end)
        .map(|m| S::sample_exp1(rng) * topology.gain(source, m))
        .collect();
    Ok(FadingDraw {
        source,
        end: segment.end,
        gains,
    })
}
