//! Generalized conditional gradient loop, read as fictitious play: predict the
//! couplings from the belief, best-respond, average.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{deviation_norms, DeviationNorms, ReferenceSolution};
use crate::error::{Error, Result};
use crate::fokker_planck::{
    individual_cost, perspective_integral, solve_fp, terminal_integral, FlowPair,
};
use crate::grid::{compensated_sum, VectorField};
use crate::hjb::{best_response_control, optimal_value, solve_hjb, CouplingState, ValueFunction};
use crate::model::{MfgProblem, PriceCurve};

/// Mass tolerance enforced on every belief.
pub const MASS_TOLERANCE: f64 = 1e-10;
/// Negative exploitability tolerated as scheme noise.
pub const SIGMA_NOISE: f64 = 1e-6;
/// Discrete Fokker-Planck residual below which a belief counts as feasible.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;

/// Learning rate `δ_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StepSchedule {
    /// `2 / (k + 2)`
    FrankWolfe,
    /// `1 / (k + 1)`
    FictitiousPlay,
    Constant(f64),
}

impl StepSchedule {
    pub fn delta(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::FrankWolfe => 2.0 / (k as f64 + 2.0),
            StepSchedule::FictitiousPlay => 1.0 / (k as f64 + 1.0),
            StepSchedule::Constant(d) => d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::Constant(d) if !(d > 0.0 && d <= 1.0) => Err(Error::Config(format!(
                "constant step {d} outside (0, 1]"
            ))),
            _ => Ok(()),
        }
    }

    /// Short label used in file names and reports.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for StepSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepSchedule::FrankWolfe => write!(f, "fw"),
            StepSchedule::FictitiousPlay => write!(f, "fp"),
            StepSchedule::Constant(d) => write!(f, "const:{d}"),
        }
    }
}

impl FromStr for StepSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let schedule = match s {
            "fw" | "frank_wolfe" | "frank-wolfe" => StepSchedule::FrankWolfe,
            "fp" | "fictitious_play" | "fictitious-play" => StepSchedule::FictitiousPlay,
            _ => {
                let Some(value) = s.strip_prefix("const:") else {
                    return Err(Error::Config(format!(
                        "unknown schedule '{s}' (expected fw, fp or const:<delta>)"
                    )));
                };
                let d: f64 = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad constant step '{value}'")))?;
                StepSchedule::Constant(d)
            }
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

impl TryFrom<String> for StepSchedule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StepSchedule> for String {
    fn from(s: StepSchedule) -> String {
        s.to_string()
    }
}

/// How `inf Z̃` is evaluated in the exploitability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `∫ u(0) m0 dx`.
    #[default]
    DynamicProgramming,
    /// `Z̃` evaluated at the computed best response.
    BestResponseCost,
}

/// Exploitability value; `scheme_noise` marks values in `[-1e-6, 0)`.
///
/// `feasible` records whether the belief satisfies the discrete
/// Fokker-Planck march (residual at most [`FEASIBILITY_TOLERANCE`]). The lower
/// bound `σ >= 0` only holds for feasible beliefs, so negative values of an
/// infeasible belief are reported as they are.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exploitability {
    pub value: f64,
    pub scheme_noise: bool,
    pub feasible: bool,
}

/// One line of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterateRecord {
    pub k: usize,
    pub delta_k: f64,
    pub potential_cost: f64,
    pub exploitability: f64,
    pub scheme_noise: bool,
    /// The belief satisfies the discrete Fokker-Planck march.
    pub feasible: bool,
    pub primal_gap: Option<f64>,
    pub norms: Option<DeviationNorms>,
}

/// Best response to a coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    pub pair: FlowPair,
    pub value: ValueFunction,
    pub control: VectorField,
}

/// Belief plus the most recent best response and the coupling it answered.
#[derive(Debug, Clone, PartialEq)]
pub struct GcgState {
    pub belief: FlowPair,
    pub last: Option<(CouplingState, BestResponse)>,
}

impl GcgState {
    /// `(m0` constant in time, `0)`.
    pub fn initial(problem: &MfgProblem) -> Self {
        Self {
            belief: FlowPair::initial(problem),
            last: None,
        }
    }

    pub fn from_belief(problem: &MfgProblem, belief: FlowPair) -> Result<Self> {
        problem.grid().check_same(belief.m.grid())?;
        belief.validate(MASS_TOLERANCE)?;
        Ok(Self { belief, last: None })
    }
}

/// `γ = ρ * m̄`, `P(t) = φ(t, A[w̄](t))`.
pub fn predict_couplings(problem: &MfgProblem, belief: &FlowPair) -> Result<CouplingState> {
    let grid = *problem.grid();
    let gamma = problem.congestion_field(&belief.m)?;
    let aggregate = problem.aggregate(&belief.w)?;
    let mut price = PriceCurve::zeros(problem.k_agg(), grid.levels());
    for level in 0..grid.levels() {
        let p = problem.price(grid.time(level), aggregate.at(level));
        price.at_mut(level).copy_from_slice(&p);
    }
    CouplingState::new(gamma, price)
}

/// HJB, feedback, then the induced flow.
pub fn best_response(problem: &MfgProblem, coupling: &CouplingState) -> Result<BestResponse> {
    let value = solve_hjb(problem, coupling)?;
    let control = best_response_control(problem, coupling, &value)?;
    let pair = solve_fp(problem, &control)?;
    Ok(BestResponse {
        pair,
        value,
        control,
    })
}

fn classify(problem: &MfgProblem, belief: &FlowPair, sigma: f64) -> Result<Exploitability> {
    if !sigma.is_finite() {
        return Err(Error::NonFinite {
            what: "exploitability",
            level: 0,
        });
    }
    let feasible = belief.fp_residual(problem)? <= FEASIBILITY_TOLERANCE;
    if !feasible {
        return Ok(Exploitability {
            value: sigma,
            scheme_noise: false,
            feasible,
        });
    }
    if sigma < -SIGMA_NOISE {
        return Err(Error::InvariantBreach(format!(
            "exploitability {sigma:.3e} below -{SIGMA_NOISE:e}"
        )));
    }
    Ok(Exploitability {
        value: sigma,
        scheme_noise: sigma < 0.0,
        feasible,
    })
}

/// `σ = Z̃_{γ,P}(belief) - ∫ u(0) m0`.
pub fn exploitability(
    problem: &MfgProblem,
    coupling: &CouplingState,
    belief: &FlowPair,
    value: &ValueFunction,
) -> Result<Exploitability> {
    let z = individual_cost(problem, coupling, belief)?;
    classify(problem, belief, z - optimal_value(problem, value))
}

/// Exploitability with an explicit choice of the `inf Z̃` evaluation.
pub fn exploitability_with(
    problem: &MfgProblem,
    coupling: &CouplingState,
    belief: &FlowPair,
    response: &BestResponse,
    mode: SigmaMode,
) -> Result<Exploitability> {
    match mode {
        SigmaMode::DynamicProgramming => exploitability(problem, coupling, belief, &response.value),
        SigmaMode::BestResponseCost => {
            let z = individual_cost(problem, coupling, belief)?;
            let best = individual_cost(problem, coupling, &response.pair)?;
            classify(problem, belief, z - best)
        }
    }
}

/// `J̃(m, w)`: perspective cost, congestion potential, price potential and
/// terminal cost.
pub fn potential_cost(problem: &MfgProblem, pair: &FlowPair) -> Result<f64> {
    let grid = *problem.grid();
    grid.check_same(pair.m.grid())?;
    let running = perspective_integral(problem, pair)?;
    let mut agg = vec![0.0; problem.k_agg()];
    let mut coupling_terms = Vec::with_capacity(grid.nt());
    for n in 0..grid.nt() {
        problem.aggregate_level(pair.w.level(n), &mut agg);
        coupling_terms.push(
            problem.potential_f_level(pair.m.level(n)) + problem.potential_phi(&agg, grid.time(n)),
        );
    }
    Ok(running + grid.dt() * compensated_sum(coupling_terms) + terminal_integral(problem, pair))
}

/// Options of a single step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepOptions<'a> {
    pub sigma_mode: SigmaMode,
    pub reference: Option<&'a ReferenceSolution>,
}

/// One iteration. The record describes the belief before the update.
pub fn gcg_step(
    problem: &MfgProblem,
    state: &GcgState,
    k: usize,
    schedule: StepSchedule,
    options: StepOptions<'_>,
) -> Result<(GcgState, IterateRecord)> {
    let delta = schedule.delta(k);
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Config(format!("step {delta} outside (0, 1] at k = {k}")));
    }
    state.belief.validate(MASS_TOLERANCE)?;
    let coupling = predict_couplings(problem, &state.belief)?;
    let response = best_response(problem, &coupling)?;
    let sigma = exploitability_with(problem, &coupling, &state.belief, &response, options.sigma_mode)?;
    let potential = potential_cost(problem, &state.belief)?;
    let norms = match options.reference {
        Some(r) => Some(deviation_norms(problem, &state.belief, &coupling, &response.value, r)?),
        None => None,
    };
    let belief = state.belief.lerp(&response.pair, delta);
    belief.validate(MASS_TOLERANCE)?;
    let record = IterateRecord {
        k,
        delta_k: delta,
        potential_cost: potential,
        exploitability: sigma.value,
        scheme_noise: sigma.scheme_noise,
        feasible: sigma.feasible,
        primal_gap: None,
        norms,
    };
    log::debug!("k={k} delta={delta:.6} J={potential:.15e} sigma={:.6e}", sigma.value);
    Ok((
        GcgState {
            belief,
            last: Some((coupling, response)),
        },
        record,
    ))
}

/// Options of a full run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub sigma_mode: SigmaMode,
    pub reference: Option<&'a ReferenceSolution>,
    pub initial_belief: Option<FlowPair>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<IterateRecord>,
    pub state: GcgState,
}

/// A failed run with the log up to the failing iteration.
#[derive(Debug)]
pub struct RunError {
    pub error: Error,
    pub records: Vec<IterateRecord>,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} iterations)", self.error, self.records.len())
    }
}

impl std::error::Error for RunError {}

/// `n_iters` steps of the loop.
pub fn run(
    problem: &MfgProblem,
    schedule: StepSchedule,
    n_iters: usize,
    options: RunOptions<'_>,
) -> std::result::Result<RunOutput, RunError> {
    let fail = |error, records| RunError { error, records };
    if n_iters == 0 {
        return Err(fail(Error::Config("n_iters must be at least 1".into()), vec![]));
    }
    if let Err(e) = schedule.validate() {
        return Err(fail(e, vec![]));
    }
    let mut state = match options.initial_belief {
        Some(b) => GcgState::from_belief(problem, b).map_err(|e| fail(e, vec![]))?,
        None => GcgState::initial(problem),
    };
    let step = StepOptions {
        sigma_mode: options.sigma_mode,
        reference: options.reference,
    };
    let mut records = Vec::with_capacity(n_iters);
    for k in 0..n_iters {
        match gcg_step(problem, &state, k, schedule, step) {
            Ok((next, record)) => {
                state = next;
                records.push(record);
            }
            Err(e) => return Err(fail(e, records)),
        }
    }
    Ok(RunOutput { records, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let fw = StepSchedule::FrankWolfe;
        assert_eq!(fw.delta(0), 1.0);
        assert!((fw.delta(1) - 2.0 / 3.0).abs() < 1e-16);
        assert_eq!(fw.delta(2), 0.5);
        let fp = StepSchedule::FictitiousPlay;
        assert_eq!(fp.delta(0), 1.0);
        assert_eq!(fp.delta(1), 0.5);
        assert_eq!(fp.delta(3), 0.25);
        assert_eq!(StepSchedule::Constant(0.3).delta(17), 0.3);
    }

    #[test]
    fn schedule_parsing() {
        assert_eq!("fw".parse::<StepSchedule>().unwrap(), StepSchedule::FrankWolfe);
        assert_eq!("fp".parse::<StepSchedule>().unwrap(), StepSchedule::FictitiousPlay);
        assert_eq!(
            "const:0.25".parse::<StepSchedule>().unwrap(),
            StepSchedule::Constant(0.25)
        );
        assert!("const:0".parse::<StepSchedule>().is_err());
        assert!("const:1.5".parse::<StepSchedule>().is_err());
        assert!("sgd".parse::<StepSchedule>().is_err());
        for s in [StepSchedule::FrankWolfe, StepSchedule::FictitiousPlay, StepSchedule::Constant(0.125)] {
            assert_eq!(s.to_string().parse::<StepSchedule>().unwrap(), s);
        }
    }
}
