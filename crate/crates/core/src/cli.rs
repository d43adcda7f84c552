//! Experiment runner behind the `mfg-gcg` binary: runs, sweeps and artifact
//! files.
//!
//! A run directory contains
//!
//! * `iterates.csv`: one row per iteration, shortest round-trip decimal
//!   representation of every double, `nan` where a value is unavailable;
//! * `summary.json`: configuration echo, drift checks, reference provenance,
//!   rate fits, invariant checks, Monte Carlo checks and timings;
//! * optionally `fields.bin` with `fields.json`: the final belief `(m, w)`, its
//!   couplings `(γ, P)` and value function `u` as little-endian `f64` arrays,
//!   concatenated in the order listed in the sidecar.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{read_config, CflReport, ExperimentConfig};
use crate::diagnostics::{
    descent_violations, fill_primal_gap, fit_descent_constant, fit_rate, make_reference, max_over_median,
    monte_carlo_with_control, sqrt_gap_ratios, value_at, McEstimate, Metric, RateFit, ReferenceProvenance,
};
use crate::error::{Error, Result};
use crate::gcg::{best_response, predict_couplings, run, IterateRecord, RunOptions, StepSchedule};
use crate::model::MfgProblem;

pub const CSV_HEADER: &str =
    "k,delta_k,potential_cost,exploitability,primal_gap,dv_l2,dm_linf_l2,dw_l2,dP_l2,dgamma_linf,du_linf";

/// Tolerance of the certificate ordering `eps_k <= sigma_k + tol`.
pub const ORDERING_TOLERANCE: f64 = 1e-6;

/// Command line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub iters: Option<usize>,
    pub seed: Option<u64>,
    pub schedule: Option<StepSchedule>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(out) = &self.out {
            config.run.out = out.clone();
        }
        if let Some(n) = self.iters {
            config.run.n_iters = n;
        }
        if let Some(s) = self.seed {
            config.run.seed = s;
        }
        if let Some(s) = self.schedule {
            config.run.schedule = s;
        }
    }
}

fn number(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:e}")
    }
}

/// CSV text of an iteration log.
pub fn iterates_csv(records: &[IterateRecord]) -> String {
    let mut out = String::with_capacity(64 + records.len() * 200);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let norms = r.norms.map(|n| n.as_array()).unwrap_or([f64::NAN; 6]);
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.k,
            number(r.delta_k),
            number(r.potential_cost),
            number(r.exploitability),
            number(r.primal_gap.unwrap_or(f64::NAN))
        );
        for v in norms {
            out.push(',');
            out.push_str(&number(v));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub metric: &'static str,
    pub window: (usize, usize),
    pub fit: Option<RateFit>,
    pub error: Option<String>,
}

impl FitReport {
    fn new(metric: &'static str, window: (usize, usize), fit: Result<RateFit>) -> Self {
        let (fit, error) = match fit {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Self {
            metric,
            window,
            fit,
            error,
        }
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioReport {
    pub metric: &'static str,
    pub max_over_median: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateSummary {
    pub fits: Vec<FitReport>,
    /// `max / median` of `eps_k (k+1) / ln(k+1)`.
    pub log_corrected_gap: Option<f64>,
    /// `max / median` of `norm_k / sqrt(eps_k)`, one per deviation norm.
    pub norm_ratios: Vec<RatioReport>,
    /// `max / median` of `sigma_k / sqrt(eps_k)`.
    pub sigma_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantSummary {
    /// Every belief and best response stayed positive with unit mass.
    pub flows_valid: bool,
    pub min_exploitability: f64,
    pub scheme_noise_count: usize,
    /// Iterates whose belief does not satisfy the discrete march; excluded
    /// from the ordering check.
    pub infeasible_iterates: Vec<usize>,
    /// Iterations with `eps_k > sigma_k + 1e-6`.
    pub ordering_violations: Vec<usize>,
    pub descent_constant: Option<f64>,
    pub descent_violations: Vec<usize>,
    pub min_final_density: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct McCheck {
    pub x: [f64; 2],
    pub value: f64,
    #[serde(flatten)]
    pub estimate: McEstimate,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub reference_s: f64,
    pub run_s: f64,
    pub diagnostics_s: f64,
    pub monte_carlo_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReferenceSummary {
    #[serde(flatten)]
    pub provenance: ReferenceProvenance,
    pub potential: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalSummary {
    pub k: usize,
    pub potential_cost: f64,
    pub exploitability: f64,
    pub primal_gap: Option<f64>,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub schedule: String,
    pub config: ExperimentConfig,
    pub cfl: CflReport,
    pub reference: Option<ReferenceSummary>,
    pub last: FinalSummary,
    pub rates: RateSummary,
    pub invariants: InvariantSummary,
    pub monte_carlo: Vec<McCheck>,
    pub timings: Timings,
    pub error: Option<String>,
}

/// `[16, n-1]` when the run is long enough.
fn rate_window(records: &[IterateRecord]) -> (usize, usize) {
    (16, records.len().saturating_sub(1).max(17))
}

fn rates(records: &[IterateRecord], schedule: StepSchedule) -> RateSummary {
    let window = rate_window(records);
    let has_gap = records.iter().any(|r| r.primal_gap.is_some());
    let mut fits = vec![FitReport::new(
        "exploitability",
        window,
        fit_rate(records, Metric::Exploitability, window),
    )];
    if has_gap {
        fits.insert(0, FitReport::new("primal_gap", window, fit_rate(records, Metric::PrimalGap, window)));
    }
    let log_corrected_gap = if has_gap && schedule == StepSchedule::FictitiousPlay {
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| (window.0..=window.1).contains(&r.k))
            .filter_map(|r| r.primal_gap.map(|e| e * (r.k + 1) as f64 / ((r.k + 1) as f64).ln()))
            .collect();
        Some(max_over_median(&vals))
    } else {
        None
    };
    let ratio_window = (4, records.len().saturating_sub(1));
    let mut norm_ratios = Vec::new();
    if records.iter().any(|r| r.norms.is_some()) {
        for m in Metric::NORMS {
            let (max_over_median, error) = match sqrt_gap_ratios(records, m, ratio_window) {
                Ok(v) => (Some(max_over_median(&v)), None),
                Err(e) => (None, Some(e.to_string())),
            };
            norm_ratios.push(RatioReport {
                metric: m.name(),
                max_over_median,
                error,
            });
        }
    }
    let sigma_ratio = if has_gap {
        sqrt_gap_ratios(records, Metric::Exploitability, ratio_window)
            .ok()
            .map(|v| max_over_median(&v))
    } else {
        None
    };
    RateSummary {
        fits,
        log_corrected_gap,
        norm_ratios,
        sigma_ratio,
    }
}

fn invariants(records: &[IterateRecord], flows_valid: bool, min_final_density: f64) -> InvariantSummary {
    let ordering_violations = records
        .iter()
        .filter(|r| r.feasible && r.primal_gap.is_some_and(|e| e > r.exploitability + ORDERING_TOLERANCE))
        .map(|r| r.k)
        .collect();
    let descent_constant = (records.len() >= 2).then(|| fit_descent_constant(records, records.len() / 2));
    InvariantSummary {
        flows_valid,
        min_exploitability: records.iter().map(|r| r.exploitability).fold(f64::INFINITY, f64::min),
        scheme_noise_count: records.iter().filter(|r| r.scheme_noise).count(),
        infeasible_iterates: records.iter().filter(|r| !r.feasible).map(|r| r.k).collect(),
        ordering_violations,
        descent_violations: descent_constant.map(|c| descent_violations(records, c)).unwrap_or_default(),
        descent_constant,
        min_final_density,
    }
}

/// Tolerance of the Monte Carlo comparison at value `u`.
pub fn mc_tolerance(standard_error: f64, u: f64) -> f64 {
    3.0 * standard_error + 0.05 * (1.0 + u.abs())
}

fn write_fields(dir: &Path, problem: &MfgProblem, state: &crate::gcg::GcgState) -> Result<()> {
    let grid = *problem.grid();
    let coupling = predict_couplings(problem, &state.belief)?;
    let value = best_response(problem, &coupling)?.value;
    let arrays: [(&str, &[f64], Vec<usize>); 5] = [
        ("m", state.belief.m.values(), vec![grid.levels(), grid.nodes()]),
        ("w", state.belief.w.values(), vec![grid.levels(), grid.nodes(), grid.dim()]),
        ("u", value.u.values(), vec![grid.levels(), grid.nodes()]),
        ("gamma", coupling.gamma.values(), vec![grid.levels(), grid.nodes()]),
        ("P", coupling.price.values(), vec![grid.levels(), problem.k_agg()]),
    ];
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (name, data, shape) in arrays {
        entries.push(serde_json::json!({
            "name": name,
            "shape": shape,
            "offset_bytes": bytes.len(),
        }));
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("fields.bin"), &bytes)?;
    let sidecar = serde_json::json!({
        "file": "fields.bin",
        "dtype": "float64",
        "byte_order": "little",
        "layout": "row-major; node index = i0 + nx * i1",
        "dim": grid.dim(),
        "nx": grid.nx(),
        "nt": grid.nt(),
        "horizon": grid.horizon(),
        "arrays": entries,
    });
    fs::write(dir.join("fields.json"), serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Parse(e.to_string()))?)?;
    Ok(())
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Parse(e.to_string()))?;
    let mut f = fs::File::create(dir.join("summary.json"))?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Runs one experiment and writes its artifacts into `config.run.out`.
///
/// An invariant breach during the run still leaves the partial log and a
/// summary on disk.
pub fn run_experiment(config: &ExperimentConfig, cfl: CflReport) -> Result<RunSummary> {
    let start = Instant::now();
    let mut timings = Timings::default();
    let problem = config.problem()?;
    let dir = config.run.out.clone();
    fs::create_dir_all(&dir)?;
    let schedule = config.run.schedule;

    let budget = config.run.reference_budget();
    let t = Instant::now();
    let reference = if budget > 0 {
        log::info!("reference: {budget} Frank-Wolfe iterations");
        Some(make_reference(&problem, budget)?)
    } else {
        None
    };
    timings.reference_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    log::info!("run: {} iterations, schedule {schedule}", config.run.n_iters);
    let outcome = run(
        &problem,
        schedule,
        config.run.n_iters,
        RunOptions {
            sigma_mode: config.run.sigma_mode,
            reference: reference.as_ref(),
            initial_belief: None,
        },
    );
    timings.run_s = t.elapsed().as_secs_f64();
    let (mut records, state, run_error) = match outcome {
        Ok(out) => (out.records, Some(out.state), None),
        Err(e) => (e.records, None, Some(e.error)),
    };

    let t = Instant::now();
    if let Some(r) = &reference {
        fill_primal_gap(&mut records, r.potential);
    }
    fs::write(dir.join("iterates.csv"), iterates_csv(&records))?;
    let rate_summary = rates(&records, schedule);
    let min_density = state.as_ref().map(|s| s.belief.min_density()).unwrap_or(f64::NAN);
    let inv = invariants(&records, run_error.is_none(), min_density);
    timings.diagnostics_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut mc = Vec::new();
    if let (Some(state), true) = (&state, config.monte_carlo.paths > 0) {
        if let Some((coupling, response)) = &state.last {
            for x in &config.monte_carlo.points {
                let estimate = monte_carlo_with_control(
                    &problem,
                    coupling,
                    &response.control,
                    *x,
                    config.monte_carlo.paths,
                    config.run.seed,
                )?;
                let value = value_at(&problem, &response.value, x);
                mc.push(McCheck {
                    x: *x,
                    value,
                    within_tolerance: (estimate.estimate - value).abs()
                        <= mc_tolerance(estimate.standard_error, value),
                    estimate,
                });
            }
        }
    }
    timings.monte_carlo_s = t.elapsed().as_secs_f64();

    if let (Some(state), true) = (&state, config.run.dump_fields) {
        write_fields(&dir, &problem, state)?;
    }

    let last = records.last().map(|r| FinalSummary {
        k: r.k,
        potential_cost: r.potential_cost,
        exploitability: r.exploitability,
        primal_gap: r.primal_gap,
    });
    let ordering_breach = !inv.ordering_violations.is_empty();
    timings.total_s = start.elapsed().as_secs_f64();
    let summary = RunSummary {
        schedule: schedule.label(),
        config: config.clone(),
        cfl,
        reference: reference.as_ref().map(|r| ReferenceSummary {
            provenance: r.provenance.clone(),
            potential: r.potential,
        }),
        last: last.unwrap_or(FinalSummary {
            k: 0,
            potential_cost: f64::NAN,
            exploitability: f64::NAN,
            primal_gap: None,
        }),
        rates: rate_summary,
        invariants: inv,
        monte_carlo: mc,
        timings,
        error: run_error.as_ref().map(|e| e.to_string()),
    };
    write_summary(&dir, &summary)?;
    if let Some(e) = run_error {
        return Err(e);
    }
    if ordering_breach {
        return Err(Error::InvariantBreach(format!(
            "primal gap exceeds exploitability at k = {:?}",
            summary.invariants.ordering_violations
        )));
    }
    Ok(summary)
}

/// Loads, validates and runs one configuration file.
pub fn run_file(path: &Path, overrides: &Overrides) -> Result<RunSummary> {
    let mut config = read_config(path)?;
    overrides.apply(&mut config);
    let cfl = config.validate()?;
    run_experiment(&config, cfl)
}

/// One line of `comparison.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub config: String,
    pub schedule: String,
    pub n_iters: usize,
    pub final_exploitability: f64,
    pub final_primal_gap: f64,
    pub gap_slope: f64,
    pub exploitability_slope: f64,
    pub status: String,
    pub exit_code: i32,
}

pub const SWEEP_HEADER: &str =
    "config,schedule,n_iters,final_exploitability,final_primal_gap,gap_slope,exploitability_slope,status";

/// Runs every `*.toml` in `dir` in parallel. Each run writes into
/// `<out>/<file stem>`; `<out>/comparison.csv` collects the final values.
pub fn sweep(dir: &Path, overrides: &Overrides) -> Result<Vec<SweepRow>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    sweep_paths(&paths, overrides)
}

pub fn sweep_paths(paths: &[PathBuf], overrides: &Overrides) -> Result<Vec<SweepRow>> {
    if paths.is_empty() {
        return Err(Error::Config("no configs".into()));
    }
    let base = overrides.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&base)?;
    let rows: Vec<SweepRow> = paths
        .par_iter()
        .map(|path| {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut local = overrides.clone();
            local.out = Some(base.join(&stem));
            match run_file(path, &local) {
                Ok(s) => SweepRow {
                    config: stem,
                    schedule: s.schedule.clone(),
                    n_iters: s.config.run.n_iters,
                    final_exploitability: s.last.exploitability,
                    final_primal_gap: s.last.primal_gap.unwrap_or(f64::NAN),
                    gap_slope: slope_of(&s, "primal_gap"),
                    exploitability_slope: slope_of(&s, "exploitability"),
                    status: "ok".into(),
                    exit_code: 0,
                },
                Err(e) => {
                    log::error!("{}: {e}", path.display());
                    SweepRow {
                        config: stem,
                        schedule: String::new(),
                        n_iters: 0,
                        final_exploitability: f64::NAN,
                        final_primal_gap: f64::NAN,
                        gap_slope: f64::NAN,
                        exploitability_slope: f64::NAN,
                        status: e.to_string().replace([',', '\n'], ";"),
                        exit_code: e.exit_code(),
                    }
                }
            }
        })
        .collect();
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.config,
            r.schedule,
            r.n_iters,
            number(r.final_exploitability),
            number(r.final_primal_gap),
            number(r.gap_slope),
            number(r.exploitability_slope),
            r.status
        );
    }
    fs::write(base.join("comparison.csv"), csv)?;
    Ok(rows)
}

fn slope_of(summary: &RunSummary, metric: &str) -> f64 {
    summary
        .rates
        .fits
        .iter()
        .find(|f| f.metric == metric)
        .and_then(FitReport::slope)
        .unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_formatting() {
        let r = IterateRecord {
            k: 3,
            delta_k: 0.4,
            potential_cost: -1.25e-3,
            exploitability: 1.0 / 3.0,
            scheme_noise: false,
            feasible: true,
            primal_gap: None,
            norms: None,
        };
        let text = iterates_csv(&[r]);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let row = lines.next().unwrap();
        assert!(row.starts_with("3,4e-1,-1.25e-3,3.333333333333333e-1,nan,"), "{row}");
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 11);
        assert_eq!(cells[3].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn empty_sweep_is_an_error() {
        let err = sweep_paths(&[], &Overrides::default()).unwrap_err();
        assert_eq!(err.to_string(), "invalid configuration: no configs");
        assert_eq!(err.exit_code(), 3);
    }
}
