//! The four subcommands.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cogrelay::config::{ExperimentConfig, GridSpec, SCHEMA_VERSION};
use cogrelay::model::Segment;
use cogrelay::oracle::{self, Fault, VerifyOptions};
use cogrelay::sim::{self, OfflineSolution, RunMetrics, Scheme, SweepRow};
use cogrelay::subpolicy::CalibratedPolicy;
use cogrelay::Error;
use serde::{Deserialize, Serialize};

use crate::output::{file_digest, read_rows, rows_csv, write_atomic, write_json};

/// Calibrated policy of one pair, stamped with the configuration it came
/// from.
#[derive(Debug, Serialize, Deserialize)]
pub struct PairArtifact {
    pub schema_version: u32,
    pub config_hash: String,
    pub pair: Segment,
    pub probability: f64,
    pub policy: CalibratedPolicy<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairSummary {
    pub pair: Segment,
    pub probability: f64,
    pub pbar: f64,
    pub lambda: f64,
    pub rate: f64,
    pub slope: f64,
    pub power: f64,
    pub table_entries: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TableFootprint {
    pub max_entries_per_pair: usize,
    pub total_entries: usize,
    /// `M + 1`.
    pub per_pair_bound: usize,
    /// `(M + 1)^3`.
    pub total_bound: usize,
}

/// Master allocation and the list of pair artifacts that go with it.
#[derive(Debug, Serialize, Deserialize)]
pub struct AllocationArtifact {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub p0: f64,
    pub pairs: Vec<PairSummary>,
    pub section_rates: Vec<f64>,
    pub objective: f64,
    pub end_to_end: f64,
    pub balance_active: bool,
    pub trace: Vec<f64>,
    pub best_trace: Vec<f64>,
    pub tables: TableFootprint,
}

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a, T: Serialize> {
    pub schema_version: u32,
    pub command: &'a str,
    pub config_hash: String,
    pub seed: u64,
    pub config: &'a ExperimentConfig,
    pub files: Vec<FileRecord>,
    pub details: T,
}

pub struct RunContext {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

/// Loads the configuration and applies command-line overrides.
pub fn load(config: &Path, seed: Option<u64>, out: Option<PathBuf>, schemes: &[String]) -> Result<RunContext> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seeds.run = s;
    }
    if !schemes.is_empty() {
        cfg.schemes = schemes.to_vec();
    }
    cfg.validate()?;
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    Ok(RunContext { config: cfg, out })
}

fn schemes_of(cfg: &ExperimentConfig) -> Result<Vec<Scheme>> {
    Ok(cfg.schemes.iter().map(|s| Scheme::parse(s)).collect::<cogrelay::Result<_>>()?)
}

fn pair_path(out: &Path, pair: Segment) -> PathBuf {
    out.join("pairs").join(format!("pair-{}-{}.json", pair.head, pair.end))
}

fn record(out: &Path, path: &Path) -> Result<FileRecord> {
    Ok(FileRecord {
        path: path.strip_prefix(out).unwrap_or(path).to_string_lossy().into_owned(),
        sha256: file_digest(path)?,
    })
}

pub fn calibrate(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.config;
    let start = Instant::now();
    let offline = OfflineSolution::solve(cfg)?;
    let hash = cfg.calibration_fingerprint();
    let m = cfg.topology()?.last();
    let alloc = &offline.master.allocation;
    if alloc.pairs.is_empty() {
        eprintln!("warning: no pair has probability above the cutoff; writing an empty allocation");
    }
    let mut files = Vec::new();
    let mut pairs = Vec::new();
    for (k, (&pair, &pbar)) in alloc.pairs.iter().zip(&alloc.pbar).enumerate() {
        let policy = offline.model.policy(pair, pbar)?;
        let point = &offline.master.points[k];
        pairs.push(PairSummary {
            pair,
            probability: alloc.prob[k],
            pbar,
            lambda: policy.lambda,
            rate: point.rate,
            slope: point.slope,
            power: point.power,
            table_entries: policy.table.len(),
        });
        let path = pair_path(&ctx.out, pair);
        write_json(
            &path,
            &PairArtifact {
                schema_version: SCHEMA_VERSION,
                config_hash: hash.clone(),
                pair,
                probability: alloc.prob[k],
                policy: (*policy).clone(),
            },
        )?;
        files.push(record(&ctx.out, &path)?);
    }
    let tables = TableFootprint {
        max_entries_per_pair: pairs.iter().map(|p| p.table_entries).max().unwrap_or(0),
        total_entries: pairs.iter().map(|p| p.table_entries).sum(),
        per_pair_bound: m + 1,
        total_bound: (m + 1).pow(3),
    };
    if tables.max_entries_per_pair > tables.per_pair_bound || tables.total_entries > tables.total_bound {
        bail!(
            "offline tables exceed their size bounds: {} per pair (bound {}), {} total (bound {})",
            tables.max_entries_per_pair,
            tables.per_pair_bound,
            tables.total_entries,
            tables.total_bound
        );
    }
    eprintln!(
        "calibrated {} pairs in {:.1} s; objective {:.5}; table entries {} (max {} per pair)",
        pairs.len(),
        start.elapsed().as_secs_f64(),
        offline.master.objective,
        tables.total_entries,
        tables.max_entries_per_pair
    );
    let master = &offline.master;
    let artifact = AllocationArtifact {
        schema_version: SCHEMA_VERSION,
        config_hash: hash.clone(),
        seed: cfg.seeds.run,
        p0: master.p0,
        pairs,
        section_rates: master.section_rates.clone(),
        objective: master.objective,
        end_to_end: master.end_to_end,
        balance_active: master.balance_active,
        trace: master.trace.clone(),
        best_trace: master.best_trace.clone(),
        tables,
    };
    let alloc_path = ctx.out.join("allocation.json");
    write_json(&alloc_path, &artifact)?;
    files.push(record(&ctx.out, &alloc_path)?);
    write_json(
        &ctx.out.join("calibrate-manifest.json"),
        &Manifest {
            schema_version: SCHEMA_VERSION,
            command: "calibrate",
            config_hash: hash,
            seed: cfg.seeds.run,
            config: cfg,
            files,
            details: serde_json::json!({ "pairs": artifact.pairs.len(), "objective": artifact.objective }),
        },
    )?;
    Ok(())
}

fn check_hash(path: &Path, expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::StaleArtifact {
            path: path.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
        .into());
    }
    Ok(())
}

/// Reads the calibration artifacts, refusing stale or incomplete ones.
pub fn load_policies(
    out: &Path,
    cfg: &ExperimentConfig,
) -> Result<HashMap<Segment, Arc<CalibratedPolicy<f64>>>> {
    let expected = cfg.calibration_fingerprint();
    let alloc_path = out.join("allocation.json");
    let text = std::fs::read_to_string(&alloc_path)
        .with_context(|| format!("reading {} (run `calibrate` first)", alloc_path.display()))?;
    let alloc: AllocationArtifact = serde_json::from_str(&text)?;
    check_hash(&alloc_path, &expected, &alloc.config_hash)?;
    let mut map = HashMap::new();
    for summary in &alloc.pairs {
        let pair = summary.pair;
        let path = pair_path(out, pair);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(anyhow::Error::new(Error::MissingPolicy {
                    head: pair.head,
                    end: pair.end,
                })
                .context(format!("{} not found", path.display())))
            }
            Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
        };
        let artifact: PairArtifact = serde_json::from_str(&text)?;
        check_hash(&path, &expected, &artifact.config_hash)?;
        if artifact.pair != pair {
            bail!("{} holds pair {:?}, expected {:?}", path.display(), artifact.pair, pair);
        }
        map.insert(pair, Arc::new(artifact.policy));
    }
    Ok(map)
}

pub fn simulate(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.config;
    let schemes = schemes_of(cfg)?;
    let sim_cfg = sim::sim_config(cfg)?;
    let mut files = Vec::new();
    let policies = if schemes.contains(&Scheme::Proposed) {
        let p = load_policies(&ctx.out, cfg)?;
        files.push(record(&ctx.out, &ctx.out.join("allocation.json"))?);
        Some(p)
    } else {
        None
    };
    let mut runs: Vec<RunMetrics<f64>> = Vec::new();
    for &scheme in &schemes {
        let start = Instant::now();
        let run = match scheme {
            Scheme::Proposed => sim::run_proposed(&sim_cfg, policies.as_ref().expect("loaded above"))?,
            other => sim::run_baseline(other, &sim_cfg)?,
        };
        eprintln!(
            "{:<10} throughput {:.5} ± {:.5} ({:.1} s)",
            scheme.name(),
            run.throughput,
            run.throughput_se,
            start.elapsed().as_secs_f64()
        );
        runs.push(run);
    }
    let rows: Vec<SweepRow> = runs.iter().map(|r| SweepRow::from_run("point", 0.0, cfg, r)).collect();
    let csv_path = ctx.out.join("simulate.csv");
    write_atomic(&csv_path, &rows_csv(&rows)?)?;
    files.push(record(&ctx.out, &csv_path)?);
    write_json(
        &ctx.out.join("simulate-manifest.json"),
        &Manifest {
            schema_version: SCHEMA_VERSION,
            command: "simulate",
            config_hash: cfg.fingerprint(),
            seed: cfg.seeds.run,
            config: cfg,
            files,
            details: serde_json::json!({
                "calibration_hash": cfg.calibration_fingerprint(),
                "runs": runs.iter().map(run_json).collect::<Vec<_>>(),
            }),
        },
    )?;
    Ok(())
}

fn run_json(r: &RunMetrics<f64>) -> serde_json::Value {
    serde_json::json!({
        "scheme": r.scheme.name(),
        "throughput": r.throughput,
        "throughput_se": r.throughput_se,
        "throughput_last_section": r.throughput_last_section,
        "section_rates": r.section_rates,
        "section_se": r.section_se,
        "average_power": r.average_power,
        "power_se": r.power_se,
        "constant_power": r.constant_power,
        "epochs": r.epochs,
    })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct PointMarker {
    config_hash: String,
    schemes: Vec<String>,
    rows: usize,
}

#[derive(Debug, Serialize)]
struct PointStatus {
    index: usize,
    value: f64,
    config_hash: Option<String>,
    status: &'static str,
    error: Option<String>,
}

/// Runs every grid point, reusing points whose completion marker matches.
/// Returns the number of failed points.
pub fn sweep(ctx: &RunContext, grid: &str) -> Result<usize> {
    let cfg = &ctx.config;
    let grid = GridSpec::parse(grid)?;
    let schemes = schemes_of(cfg)?;
    let mut rows = Vec::new();
    let mut statuses = Vec::new();
    for (index, &value) in grid.values.iter().enumerate() {
        let dir = ctx.out.join("points").join(format!("{index:04}"));
        let marker_path = dir.join("done.json");
        let rows_path = dir.join("rows.csv");
        let point_cfg = match cfg.with_grid_value(grid.key, value) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("point {index} ({}={value}): {e}", grid.key.name());
                statuses.push(PointStatus {
                    index,
                    value,
                    config_hash: None,
                    status: "failed",
                    error: Some(e.to_string()),
                });
                continue;
            }
        };
        let marker = PointMarker {
            config_hash: point_cfg.fingerprint(),
            schemes: point_cfg.schemes.clone(),
            rows: schemes.len(),
        };
        let done = std::fs::read_to_string(&marker_path)
            .ok()
            .and_then(|t| serde_json::from_str::<PointMarker>(&t).ok())
            .is_some_and(|m| m == marker);
        if done {
            if let Ok(previous) = read_rows(&rows_path) {
                if previous.len() == marker.rows {
                    eprintln!("point {index} ({}={value}): already complete", grid.key.name());
                    rows.extend(previous);
                    statuses.push(PointStatus {
                        index,
                        value,
                        config_hash: Some(marker.config_hash),
                        status: "resumed",
                        error: None,
                    });
                    continue;
                }
            }
        }
        let start = Instant::now();
        match sim::run_point(&point_cfg, &schemes) {
            Ok(result) => {
                let point_rows: Vec<SweepRow> = result
                    .runs
                    .iter()
                    .map(|r| SweepRow::from_run(grid.key.name(), value, &point_cfg, r))
                    .collect();
                // rows first, marker last: a marker always means complete rows
                write_atomic(&rows_path, &rows_csv(&point_rows)?)?;
                write_json(&marker_path, &marker)?;
                eprintln!(
                    "point {index} ({}={value}): done in {:.1} s",
                    grid.key.name(),
                    start.elapsed().as_secs_f64()
                );
                rows.extend(point_rows);
                statuses.push(PointStatus {
                    index,
                    value,
                    config_hash: Some(marker.config_hash),
                    status: "completed",
                    error: None,
                });
            }
            Err(e) => {
                eprintln!("point {index} ({}={value}) failed: {e}", grid.key.name());
                statuses.push(PointStatus {
                    index,
                    value,
                    config_hash: Some(marker.config_hash),
                    status: "failed",
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let failures = statuses.iter().filter(|s| s.status == "failed").count();
    let csv_path = ctx.out.join("sweep.csv");
    write_atomic(&csv_path, &rows_csv(&rows)?)?;
    write_json(
        &ctx.out.join("sweep-manifest.json"),
        &Manifest {
            schema_version: SCHEMA_VERSION,
            command: "sweep",
            config_hash: cfg.fingerprint(),
            seed: cfg.seeds.run,
            config: cfg,
            files: vec![record(&ctx.out, &csv_path)?],
            details: serde_json::json!({
                "grid": { "key": grid.key.name(), "values": grid.values },
                "schemes": cfg.schemes,
                "points": statuses,
                "failures": failures,
            }),
        },
    )?;
    Ok(failures)
}

/// Runs the oracle suite; returns whether every check passed.
pub fn verify(out: &Path, seed: u64, fault: Option<Fault>) -> Result<bool> {
    let report = oracle::run_suite(&VerifyOptions {
        seed,
        fault,
        ..VerifyOptions::default()
    });
    for c in &report.checks {
        eprintln!("{:<26} {:<12} {}", c.name, format!("{:?}", c.status).to_lowercase(), c.detail);
    }
    write_json(&out.join("verify-report.json"), &report)?;
    Ok(report.passed)
}
