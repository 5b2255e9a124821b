//! Experiment configuration: a versioned JSON document describing the
//! route, the primary-user activity, the budget, the solver knobs and the
//! seeds of one run, plus parameter grids for sweeps.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::master::MasterOptions;
use crate::model::{FieldGeometry, PuActivityModel, Topology};
use crate::seed;
use crate::subpolicy::SolverSettings;

/// Hex SHA-256 of `bytes`; used for config fingerprints and artifact digests.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub const SCHEMA_VERSION: u32 = 1;

/// `10^(db/10)`.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Evenly spaced.
    Uniform,
    /// End points fixed, relays uniformly scattered (seeded).
    RandomInterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub nodes: usize,
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_placement")]
    pub placement: Placement,
    /// Explicit positions override `nodes`, `length` and `placement`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<f64>>,
    pub alpha: f64,
}

fn default_length() -> f64 {
    5.0
}

fn default_placement() -> Placement {
    Placement::RandomInterior
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", deny_unknown_fields)]
pub enum ActivitySection {
    Iid {
        p_avail: f64,
        #[serde(default = "one")]
        epoch_frames: usize,
    },
    Spatial {
        rho_p: f64,
        p_active: f64,
        d0: f64,
        /// Half width of a strip field; absent means the route line.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        strip_half_width: Option<f64>,
        #[serde(default = "one")]
        epoch_frames: usize,
    },
}

fn one() -> usize {
    1
}

/// Average SNR budget, given either in dB or linear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<f64>,
}

impl Budget {
    pub fn from_db(db: f64) -> Self {
        Self {
            db: Some(db),
            linear: None,
        }
    }

    pub fn from_linear(linear: f64) -> Self {
        Self {
            db: None,
            linear: Some(linear),
        }
    }

    pub fn linear(&self) -> Result<f64> {
        let v = match (self.db, self.linear) {
            (Some(db), None) => db_to_linear(db),
            (None, Some(l)) => l,
            _ => return Err(Error::Config("budget needs exactly one of `db` or `linear`".into())),
        };
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Config(format!("budget must be positive, got {v}")));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub mc_samples: usize,
    pub power_tolerance: f64,
    pub cap_factor: f64,
    pub floor_factor: f64,
    /// Step numerator of the master ascent; absent means half the budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_a: Option<f64>,
    pub step_b: f64,
    pub max_iterations: usize,
    pub window: usize,
    pub objective_tolerance: f64,
    pub tie: f64,
    pub cutoff: f64,
    /// Activity draws used to estimate segment probabilities when there is
    /// no closed form.
    pub probability_samples: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverSettings::<f64>::default();
        let m = MasterOptions::<f64>::default();
        Self {
            mc_samples: s.mc_samples,
            power_tolerance: s.power_tolerance,
            cap_factor: s.cap_factor,
            floor_factor: s.floor_factor,
            step_a: None,
            step_b: m.step_b,
            max_iterations: m.max_iterations,
            window: m.window,
            objective_tolerance: m.tolerance,
            tie: m.tie,
            cutoff: m.cutoff,
            probability_samples: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub epochs: usize,
    pub episodes_per_segment: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            epochs: 2000,
            episodes_per_segment: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Relay placement.
    pub topology: u64,
    /// Everything else (banks, activity, episodes).
    pub run: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { topology: 1, run: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

/// One experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelSection,
    pub activity: ActivitySection,
    pub budget: Budget,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<String>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_schemes() -> Vec<String> {
    ["proposed", "baseline1", "baseline2", "baseline3", "baseline4"]
        .into_iter()
        .map(String::from)
        .collect()
}

impl ExperimentConfig {
    /// The six-node line of length 5 with i.i.d. activity.
    pub fn six_node(alpha: f64, p_avail: f64, budget_db: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelSection {
                nodes: 6,
                length: 5.0,
                placement: Placement::RandomInterior,
                positions: None,
                alpha,
            },
            activity: ActivitySection::Iid {
                p_avail,
                epoch_frames: 1,
            },
            budget: Budget::from_db(budget_db),
            schemes: default_schemes(),
            solver: SolverSection::default(),
            simulation: SimulationSection::default(),
            seeds: Seeds::default(),
            output: OutputSection::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.topology()?;
        self.activity_model()?;
        self.budget.linear()?;
        for s in &self.schemes {
            crate::sim::Scheme::parse(s)?;
        }
        if self.simulation.epochs == 0 || self.simulation.episodes_per_segment == 0 {
            return Err(Error::Config("epochs and episodes_per_segment must be >= 1".into()));
        }
        if self.solver.mc_samples == 0 || self.solver.probability_samples == 0 {
            return Err(Error::Config("sample counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn p0(&self) -> Result<f64> {
        self.budget.linear()
    }

    pub fn topology(&self) -> Result<Topology<f64>> {
        let m = &self.model;
        if let Some(pos) = &m.positions {
            return Topology::new(pos.clone(), m.alpha);
        }
        match m.placement {
            Placement::Uniform => Topology::uniform(m.nodes, m.length, m.alpha),
            Placement::RandomInterior => {
                let mut rng = seed::stream(self.seeds.topology, &[seed::label::TOPOLOGY]);
                Topology::random_interior(m.nodes, m.length, m.alpha, &mut rng)
            }
        }
    }

    pub fn activity_model(&self) -> Result<PuActivityModel<f64>> {
        let model = match &self.activity {
            ActivitySection::Iid { p_avail, epoch_frames } => {
                let mut m = PuActivityModel::iid(*p_avail)?;
                m.epoch_frames = *epoch_frames;
                m
            }
            ActivitySection::Spatial {
                rho_p,
                p_active,
                d0,
                strip_half_width,
                epoch_frames,
            } => {
                let mut m = PuActivityModel::spatial(*rho_p, *p_active, *d0)?;
                if let Some(w) = strip_half_width {
                    if let crate::model::ActivityMode::SpatialField { geometry, .. } = &mut m.mode {
                        *geometry = FieldGeometry::Strip { half_width: *w };
                    }
                }
                m.epoch_frames = *epoch_frames;
                m
            }
        };
        model.validate()?;
        Ok(model)
    }

    pub fn solver_settings(&self) -> SolverSettings<f64> {
        SolverSettings {
            mc_samples: self.solver.mc_samples,
            cap_factor: self.solver.cap_factor,
            floor_factor: self.solver.floor_factor,
            power_tolerance: self.solver.power_tolerance,
            packet_bits: 1.0,
        }
    }

    pub fn master_options(&self) -> MasterOptions<f64> {
        MasterOptions {
            step_a: self.solver.step_a,
            step_b: self.solver.step_b,
            max_iterations: self.solver.max_iterations,
            window: self.solver.window,
            tolerance: self.solver.objective_tolerance,
            tie: self.solver.tie,
            cutoff: self.solver.cutoff,
            floor_factor: self.solver.floor_factor,
        }
    }

    /// Hex SHA-256 of every field that affects results (everything except
    /// the output location and the scheme list).
    pub fn fingerprint(&self) -> String {
        let mut relevant = self.clone();
        relevant.output = OutputSection::default();
        relevant.schemes.clear();
        digest_hex(&serde_json::to_vec(&relevant).expect("config serialises"))
    }

    /// Fingerprint of the fields the offline tables depend on (no
    /// simulation section).
    pub fn calibration_fingerprint(&self) -> String {
        let mut relevant = self.clone();
        relevant.output = OutputSection::default();
        relevant.schemes.clear();
        relevant.simulation = SimulationSection::default();
        digest_hex(&serde_json::to_vec(&relevant).expect("config serialises"))
    }
}

/// Parameters a grid may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKey {
    /// Budget in dB.
    P0Db,
    /// Budget, linear.
    P0,
    /// `Pr(A_m = 1)`.
    PAvail,
    /// `Pr(A_m = 0)`.
    PBusy,
    Nodes,
    Alpha,
    RhoP,
}

impl GridKey {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "p0_db" | "snr_db" => Self::P0Db,
            "p0" => Self::P0,
            "p_avail" => Self::PAvail,
            "p_busy" => Self::PBusy,
            "nodes" => Self::Nodes,
            "alpha" => Self::Alpha,
            "rho_p" => Self::RhoP,
            other => return Err(Error::Config(format!("unknown grid key `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::P0Db => "p0_db",
            Self::P0 => "p0",
            Self::PAvail => "p_avail",
            Self::PBusy => "p_busy",
            Self::Nodes => "nodes",
            Self::Alpha => "alpha",
            Self::RhoP => "rho_p",
        }
    }
}

/// `KEY=START:STOP:STEP`, inclusive of `STOP` up to rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub key: GridKey,
    pub values: Vec<f64>,
}

impl GridSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::Config(format!("grid `{spec}` is not KEY=START:STOP:STEP"));
        let (key, range) = spec.split_once('=').ok_or_else(bad)?;
        let key = GridKey::parse(key.trim())?;
        let parts: Vec<f64> = range
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, stop, step] = parts[..] else {
            return Err(bad());
        };
        if !(start.is_finite() && stop.is_finite() && step.is_finite()) {
            return Err(bad());
        }
        if step == 0.0 || (stop - start) * step < 0.0 {
            // no point lies in the requested direction
            return Ok(Self { key, values: Vec::new() });
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        let values = (0..=n).map(|k| start + step * k as f64).collect();
        Ok(Self { key, values })
    }

    pub fn empty(key: GridKey) -> Self {
        Self { key, values: Vec::new() }
    }
}

impl ExperimentConfig {
    /// Copy with one grid parameter set.
    pub fn with_grid_value(&self, key: GridKey, value: f64) -> Result<Self> {
        let mut cfg = self.clone();
        match key {
            GridKey::P0Db => cfg.budget = Budget::from_db(value),
            GridKey::P0 => cfg.budget = Budget::from_linear(value),
            GridKey::PAvail | GridKey::PBusy => {
                let p = if key == GridKey::PAvail { value } else { 1.0 - value };
                match &mut cfg.activity {
                    ActivitySection::Iid { p_avail, .. } => *p_avail = p,
                    ActivitySection::Spatial { .. } => {
                        return Err(Error::Config(format!("{} needs i.i.d. activity", key.name())))
                    }
                }
            }
            GridKey::Nodes => {
                if value < 2.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("node count {value}")));
                }
                cfg.model.nodes = value as usize;
                cfg.model.positions = None;
            }
            GridKey::Alpha => cfg.model.alpha = value,
            GridKey::RhoP => match &mut cfg.activity {
                ActivitySection::Spatial { rho_p, .. } => *rho_p = value,
                ActivitySection::Iid { .. } => {
                    return Err(Error::Config("rho_p needs spatial activity".into()))
                }
            },
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
