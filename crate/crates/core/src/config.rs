//! TOML experiment configuration. Every field has a default; the defaults
//! describe the one-dimensional benchmark problem.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fokker_planck::FlowPair;
use crate::gcg::{best_response, predict_couplings, SigmaMode, StepSchedule};
use crate::grid::TorusGrid;
use crate::model::{
    AggregationSpec, CouplingSpec, KernelMode, MfgProblem, NewtonConfig, PowerCost, PriceSpec,
    ProblemData, Profile, RunningCost, SmoothingKernel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub nx: usize,
    pub nt: usize,
    pub horizon: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            nx: 128,
            nt: 128,
            horizon: 1.0,
        }
    }
}

/// Running cost variants available from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunningCostConfig {
    /// `(weight/2)|v|² + ℓ(x)`.
    Quadratic {
        #[serde(default = "unit")]
        weight: f64,
        #[serde(default = "no_offset")]
        offset: Profile,
    },
    /// `(quartic/4)|v|⁴ + (quadratic/2)|v|² + ℓ(x)`.
    Power {
        quartic: f64,
        #[serde(default = "unit")]
        quadratic: f64,
        #[serde(default = "no_offset")]
        offset: Profile,
    },
}

fn unit() -> f64 {
    1.0
}

fn no_offset() -> Profile {
    Profile::constant(0.0)
}

impl Default for RunningCostConfig {
    fn default() -> Self {
        RunningCostConfig::Quadratic {
            weight: 1.0,
            offset: Profile::cosine(0.0, 0.2, 0.0),
        }
    }
}

impl RunningCostConfig {
    fn build(&self, dim: usize) -> RunningCost {
        match self {
            RunningCostConfig::Quadratic { weight, offset } => RunningCost::quadratic(*weight, offset.clone()),
            RunningCostConfig::Power {
                quartic,
                quadratic,
                offset,
            } => RunningCost::Custom(Arc::new(PowerCost {
                quartic: *quartic,
                quadratic: *quadratic,
                offset: offset.clone(),
                dim,
            })),
        }
    }

    fn offset(&self) -> &Profile {
        match self {
            RunningCostConfig::Quadratic { offset, .. } | RunningCostConfig::Power { offset, .. } => offset,
        }
    }

    fn convexity(&self) -> f64 {
        match self {
            RunningCostConfig::Quadratic { weight, .. } => *weight,
            RunningCostConfig::Power { quadratic, .. } => *quadratic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    /// Paths per point; zero disables the check.
    pub paths: usize,
    pub points: Vec<[f64; 2]>,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            paths: 10_000,
            points: vec![[0.1, 0.0], [0.4, 0.0], [0.7, 0.0]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: StepSchedule,
    pub n_iters: usize,
    /// Frank-Wolfe iterations of the reference run; ten times `n_iters` when
    /// absent, no reference when zero.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_budget: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub sigma_mode: SigmaMode,
    /// Write the final fields as a flat binary file.
    pub dump_fields: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: StepSchedule::FrankWolfe,
            n_iters: 256,
            reference_budget: None,
            seed: 0,
            out: PathBuf::from("out"),
            sigma_mode: SigmaMode::DynamicProgramming,
            dump_fields: false,
        }
    }
}

impl RunConfig {
    pub fn reference_budget(&self) -> usize {
        self.reference_budget.unwrap_or(10 * self.n_iters)
    }
}

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub viscosity: f64,
    pub newton: NewtonConfig,
    pub running_cost: RunningCostConfig,
    pub kernel: SmoothingKernel,
    pub price: PriceSpec,
    pub aggregation: AggregationSpec,
    pub m0: Profile,
    pub g: Profile,
    pub run: RunConfig,
    pub monte_carlo: MonteCarloConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            viscosity: 1.0,
            newton: NewtonConfig::default(),
            running_cost: RunningCostConfig::default(),
            kernel: SmoothingKernel::Fourier {
                modes: vec![
                    KernelMode {
                        wavevector: [1, 0],
                        coefficient: 0.4,
                    },
                    KernelMode {
                        wavevector: [2, 0],
                        coefficient: 0.05,
                    },
                ],
            },
            price: PriceSpec {
                base: vec![0.1],
                slope: vec![],
                gain: 0.5,
            },
            aggregation: AggregationSpec {
                rows: 1,
                entries: vec![Profile::cosine(0.4, 0.2, 0.25)],
            },
            m0: Profile::cosine(1.0, 0.5, 0.25),
            g: Profile::cosine(0.0, 0.1, 0.0),
            run: RunConfig::default(),
            monte_carlo: MonteCarloConfig::default(),
        }
    }
}

/// Outcome of the drift checks run at load time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CflReport {
    /// `dt · sup Σ|v_a| / dx` of the best response to the initial belief.
    pub probe_courant: f64,
    /// Positivity factor of the transport-diffusion step at the probe drift.
    pub probe_positivity: f64,
    /// A priori bound on `sup |v|` from the data.
    pub drift_bound: f64,
    pub bound_courant: f64,
    pub bound_positivity: f64,
}

impl ExperimentConfig {
    pub fn grid(&self) -> Result<TorusGrid> {
        TorusGrid::new(self.grid.dim, self.grid.nx, self.grid.nt, self.grid.horizon)
    }

    /// Builds the discrete problem; checks the model invariants.
    pub fn problem(&self) -> Result<MfgProblem> {
        let grid = self.grid()?;
        self.m0.validate("m0")?;
        self.g.validate("g")?;
        self.running_cost.offset().validate("running cost offset")?;
        MfgProblem::new(ProblemData {
            grid,
            cost: self.running_cost.build(grid.dim()),
            newton: self.newton,
            coupling: CouplingSpec {
                kernel: self.kernel.clone(),
                price: self.price.clone(),
                aggregation: self.aggregation.clone(),
            },
            m0: self.m0.sample(&grid),
            g: self.g.sample(&grid),
            viscosity: self.viscosity,
        })
    }

    /// Conservative bound on `sup |v|`: gradient bound of the value function
    /// plus the price shift, divided by the convexity of the cost.
    fn drift_bound(&self, problem: &MfgProblem) -> f64 {
        let dim = self.grid.dim;
        let horizon = self.grid.horizon;
        let kernel_lip: f64 = match &self.kernel {
            SmoothingKernel::Zero | SmoothingKernel::Delta => 0.0,
            SmoothingKernel::Fourier { modes } => modes
                .iter()
                .map(|m| {
                    let k = ((m.wavevector[0].pow(2) + m.wavevector[1].pow(2)) as f64).sqrt();
                    2.0 * 2.0 * std::f64::consts::PI * k * m.coefficient.abs()
                })
                .sum(),
        };
        let grad_u = self.g.lipschitz_bound(dim)
            + horizon * (self.running_cost.offset().lipschitz_bound(dim) + kernel_lip);
        let a_sup = (0..problem.grid().nodes())
            .map(|node| problem.aggregation_at_node(node).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let shift = a_sup * self.price.sup(horizon);
        (dim as f64).sqrt() * (grad_u + shift) / self.running_cost.convexity()
    }

    /// Full validation: model invariants, schedule, and the drift checks.
    pub fn validate(&self) -> Result<CflReport> {
        self.run.schedule.validate()?;
        if self.run.n_iters == 0 {
            return Err(Error::Config("run.n_iters must be at least 1".into()));
        }
        if self.monte_carlo.paths > 0 && self.monte_carlo.points.is_empty() {
            return Err(Error::Config("monte_carlo.points is empty".into()));
        }
        let problem = self.problem()?;
        let grid = *problem.grid();
        let ratio = grid.dt() / grid.dx();
        let drift_bound = self.drift_bound(&problem);
        let bound_courant = ratio * drift_bound;
        let bound_positivity = problem.positivity_factor(drift_bound);
        let coupling = predict_couplings(&problem, &FlowPair::initial(&problem))?;
        let response = best_response(&problem, &coupling).map_err(|e| match e {
            Error::InvariantBreach(msg) => Error::Config(format!("initial best response: {msg}")),
            other => other,
        })?;
        let vmax = response.control.max_l1();
        let report = CflReport {
            probe_courant: ratio * vmax,
            probe_positivity: problem.positivity_factor(vmax),
            drift_bound,
            bound_courant,
            bound_positivity,
        };
        if report.probe_positivity >= 1.0 {
            return Err(Error::Config(format!(
                "positivity factor {:.3} >= 1 at the initial drift; increase nt or the viscosity",
                report.probe_positivity
            )));
        }
        if bound_courant > 1.0 {
            log::info!(
                "a priori CFL bound dt*|v|/dx <= {bound_courant:.3} exceeds 1; the run relies on the runtime check"
            );
        }
        log::info!(
            "CFL: probe {:.4}, a priori {:.4}; positivity factor {:.4}",
            report.probe_courant,
            report.bound_courant,
            report.probe_positivity
        );
        Ok(report)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Reads and parses a configuration file without validating it.
pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Reads, parses and validates a configuration file.
pub fn load_config(path: &Path) -> Result<(ExperimentConfig, CflReport)> {
    let config = read_config(path)?;
    let report = config.validate()?;
    Ok((config, report))
}
