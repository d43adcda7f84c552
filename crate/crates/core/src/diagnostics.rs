//! Deviation norms, log-log rate fits, reference solutions and a Monte Carlo
//! oracle for the value function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fokker_planck::{chi_inverse, FlowPair};
use crate::gcg::{gcg_step, GcgState, IterateRecord, StepOptions, StepSchedule};
use crate::grid::{compensated_sum, Point, TorusGrid, VectorField};
use crate::hjb::{best_response_control, solve_hjb, CouplingState, ValueFunction};
use crate::model::MfgProblem;

/// Reference solutions whose exploitability exceeds this are flagged.
pub const REFERENCE_SIGMA_FLAG: f64 = 1e-4;

/// Distances of an iterate from the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationNorms {
    /// `‖v̄ - v̄*‖` in `L²(Q)`.
    pub dv_l2: f64,
    /// `‖m̄ - m̄*‖` in `L∞(0,T; L²)`.
    pub dm_linf_l2: f64,
    /// `‖w̄ - w̄*‖` in `L²(Q)`.
    pub dw_l2: f64,
    /// `‖P - P*‖` in `L²(0,T)`.
    pub dp_l2: f64,
    pub dgamma_linf: f64,
    pub du_linf: f64,
}

impl DeviationNorms {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.dv_l2,
            self.dm_linf_l2,
            self.dw_l2,
            self.dp_l2,
            self.dgamma_linf,
            self.du_linf,
        ]
    }

    pub const NAMES: [&'static str; 6] = ["dv_l2", "dm_linf_l2", "dw_l2", "dP_l2", "dgamma_linf", "du_linf"];
}

/// Where a reference solution came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceProvenance {
    pub iterations: usize,
    pub schedule: String,
    pub best_k: usize,
    pub sigma: f64,
    /// `σ` above [`REFERENCE_SIGMA_FLAG`].
    pub degraded: bool,
}

/// Best iterate of a long run, with its couplings and value function.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub flow: FlowPair,
    pub velocity: VectorField,
    pub coupling: CouplingState,
    pub value: ValueFunction,
    pub potential: f64,
    pub provenance: ReferenceProvenance,
}

fn l2_space_time(grid: &TorusGrid, a: &[f64], b: &[f64], width: usize) -> f64 {
    // left-endpoint rule: levels 0..nt
    let n = grid.nt() * grid.nodes() * width;
    let sq = compensated_sum(a[..n].iter().zip(&b[..n]).map(|(x, y)| (x - y) * (x - y)));
    (grid.dt() * grid.cell_volume() * sq).sqrt()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc: f64, (x, y)| acc.max((x - y).abs()))
}

/// The six deviation norms of `(belief, coupling, value)` from `reference`.
pub fn deviation_norms(
    problem: &MfgProblem,
    belief: &FlowPair,
    coupling: &CouplingState,
    value: &ValueFunction,
    reference: &ReferenceSolution,
) -> Result<DeviationNorms> {
    let grid = *problem.grid();
    for other in [belief.m.grid(), reference.flow.m.grid(), coupling.gamma.grid(), value.u.grid()] {
        grid.check_same(other)?;
    }
    let d = grid.dim();
    let v = chi_inverse(belief)?;
    let dm_linf_l2 = (0..grid.levels())
        .map(|n| {
            let sq = compensated_sum(
                belief
                    .m
                    .level(n)
                    .iter()
                    .zip(reference.flow.m.level(n))
                    .map(|(x, y)| (x - y) * (x - y)),
            );
            (grid.cell_volume() * sq).sqrt()
        })
        .fold(0.0, f64::max);
    let dp_sq = compensated_sum((0..grid.nt()).flat_map(|n| {
        coupling
            .price
            .at(n)
            .iter()
            .zip(reference.coupling.price.at(n))
            .map(|(x, y)| (x - y) * (x - y))
            .collect::<Vec<_>>()
    }));
    Ok(DeviationNorms {
        dv_l2: l2_space_time(&grid, v.values(), reference.velocity.values(), d),
        dm_linf_l2,
        dw_l2: l2_space_time(&grid, belief.w.values(), reference.flow.w.values(), d),
        dp_l2: (grid.dt() * dp_sq).sqrt(),
        dgamma_linf: sup_diff(coupling.gamma.values(), reference.coupling.gamma.values()),
        du_linf: sup_diff(value.u.values(), reference.value.u.values()),
    })
}

/// Deviation norms of the belief held by `state`, which must carry the best
/// response to its own couplings.
pub fn norms(problem: &MfgProblem, state: &GcgState, reference: &ReferenceSolution) -> Result<DeviationNorms> {
    let (coupling, response) = state
        .last
        .as_ref()
        .ok_or_else(|| Error::Config("state carries no best response".into()))?;
    deviation_norms(problem, &state.belief, coupling, &response.value, reference)
}

/// Long Frank-Wolfe run; keeps the iterate with the lowest potential cost.
pub fn make_reference(problem: &MfgProblem, budget: usize) -> Result<ReferenceSolution> {
    if budget == 0 {
        return Err(Error::Config("reference budget must be at least 1".into()));
    }
    let schedule = StepSchedule::FrankWolfe;
    let mut state = GcgState::initial(problem);
    let mut best: Option<(usize, f64, f64, FlowPair, CouplingState, ValueFunction)> = None;
    for k in 0..budget {
        let (next, record) = gcg_step(problem, &state, k, schedule, StepOptions::default())?;
        // an infeasible belief can undercut the constrained minimum
        if record.feasible && best.as_ref().is_none_or(|b| record.potential_cost < b.1) {
            let (coupling, response) = next.last.as_ref().expect("step stores its best response");
            best = Some((
                k,
                record.potential_cost,
                record.exploitability,
                state.belief.clone(),
                coupling.clone(),
                response.value.clone(),
            ));
        }
        state = next;
    }
    let (best_k, potential, sigma, flow, coupling, value) = best.ok_or_else(|| {
        Error::Config(format!("reference budget {budget} produced no feasible iterate"))
    })?;
    let degraded = sigma > REFERENCE_SIGMA_FLAG;
    if degraded {
        log::warn!("reference exploitability {sigma:.3e} exceeds {REFERENCE_SIGMA_FLAG:e}");
    }
    Ok(ReferenceSolution {
        velocity: chi_inverse(&flow)?,
        flow,
        coupling,
        value,
        potential,
        provenance: ReferenceProvenance {
            iterations: budget,
            schedule: schedule.label(),
            best_k,
            sigma,
            degraded,
        },
    })
}

/// `eps_k = J̃_k - J̃*`.
pub fn fill_primal_gap(records: &mut [IterateRecord], j_star: f64) {
    for r in records {
        r.primal_gap = Some(r.potential_cost - j_star);
    }
}

/// Quantity read off an iterate record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PrimalGap,
    Exploitability,
    Dv,
    Dm,
    Dw,
    Dp,
    Dgamma,
    Du,
}

impl Metric {
    pub const NORMS: [Metric; 6] = [Metric::Dv, Metric::Dm, Metric::Dw, Metric::Dp, Metric::Dgamma, Metric::Du];

    pub fn read(&self, r: &IterateRecord) -> Option<f64> {
        let norm = |i: usize| r.norms.map(|n| n.as_array()[i]);
        match self {
            Metric::PrimalGap => r.primal_gap,
            Metric::Exploitability => Some(r.exploitability),
            Metric::Dv => norm(0),
            Metric::Dm => norm(1),
            Metric::Dw => norm(2),
            Metric::Dp => norm(3),
            Metric::Dgamma => norm(4),
            Metric::Du => norm(5),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::PrimalGap => "primal_gap",
            Metric::Exploitability => "exploitability",
            Metric::Dv => "dv_l2",
            Metric::Dm => "dm_linf_l2",
            Metric::Dw => "dw_l2",
            Metric::Dp => "dP_l2",
            Metric::Dgamma => "dgamma_linf",
            Metric::Du => "du_linf",
        }
    }
}

/// Least-squares line through `(ln k, ln metric)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub k_lo: usize,
    pub k_hi: usize,
    pub slope: f64,
    pub intercept: f64,
    /// Root mean square of the log residuals.
    pub residual: f64,
}

/// Fits `ln y = intercept + slope ln k` over the points with `k` in
/// `[k_lo, k_hi]`.
pub fn fit_series(points: &[(usize, f64)], window: (usize, usize)) -> Result<RateFit> {
    let (k_lo, k_hi) = window;
    if k_lo < 1 || k_hi <= k_lo {
        return Err(Error::Domain(format!("bad window [{k_lo}, {k_hi}]")));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(k, y) in points.iter().filter(|(k, _)| (k_lo..=k_hi).contains(k)) {
        if !(y > 0.0) || !y.is_finite() {
            return Err(Error::Domain(format!("metric {y:e} is not positive at k = {k}")));
        }
        xs.push((k as f64).ln());
        ys.push(y.ln());
    }
    if xs.len() < 2 {
        return Err(Error::Domain(format!("fewer than two points in [{k_lo}, {k_hi}]")));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(RateFit {
        k_lo,
        k_hi,
        slope,
        intercept,
        residual: (ss / n).sqrt(),
    })
}

/// Rate fit of `metric` over the records.
pub fn fit_rate(records: &[IterateRecord], metric: Metric, window: (usize, usize)) -> Result<RateFit> {
    let mut points = Vec::new();
    for r in records.iter().filter(|r| (window.0..=window.1).contains(&r.k)) {
        let y = metric
            .read(r)
            .ok_or_else(|| Error::Domain(format!("{} missing at k = {}", metric.name(), r.k)))?;
        points.push((r.k, y));
    }
    fit_series(&points, window)
}

/// `max / median` of a positive sample.
pub fn max_over_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    sorted[n - 1] / median
}

/// `metric_k / sqrt(eps_k)` over `k` in the window.
pub fn sqrt_gap_ratios(records: &[IterateRecord], metric: Metric, window: (usize, usize)) -> Result<Vec<f64>> {
    records
        .iter()
        .filter(|r| (window.0..=window.1).contains(&r.k))
        .map(|r| {
            let eps = r
                .primal_gap
                .ok_or_else(|| Error::Domain(format!("primal gap missing at k = {}", r.k)))?;
            if !(eps > 0.0) {
                return Err(Error::Domain(format!("primal gap {eps:e} is not positive at k = {}", r.k)));
            }
            let y = metric
                .read(r)
                .ok_or_else(|| Error::Domain(format!("{} missing at k = {}", metric.name(), r.k)))?;
            Ok(y / eps.sqrt())
        })
        .collect()
}

/// Slack of the one-step descent bound for a given constant.
fn descent_excess(records: &[IterateRecord], k: usize) -> f64 {
    let (a, b) = (&records[k], &records[k + 1]);
    b.potential_cost - a.potential_cost + a.delta_k * a.exploitability
}

/// Smallest `C` with `J̃_{k+1} <= J̃_k - δ_k σ_k + δ_k² C` over the first
/// `fit_len` transitions.
pub fn fit_descent_constant(records: &[IterateRecord], fit_len: usize) -> f64 {
    let n = fit_len.min(records.len().saturating_sub(1));
    (0..n)
        .map(|k| descent_excess(records, k) / records[k].delta_k.powi(2))
        .fold(0.0, f64::max)
}

/// Indices `k` where the descent bound with constant `c` fails.
pub fn descent_violations(records: &[IterateRecord], c: f64) -> Vec<usize> {
    (0..records.len().saturating_sub(1))
        .filter(|&k| descent_excess(records, k) > records[k].delta_k.powi(2) * c)
        .collect()
}

/// Indices `k` where `eps_{k+1} <= (1 - δ_k) eps_k + δ_k² c` fails.
pub fn recursion_violations(records: &[IterateRecord], c: f64) -> Vec<usize> {
    (0..records.len().saturating_sub(1))
        .filter(|&k| match (records[k].primal_gap, records[k + 1].primal_gap) {
            (Some(e0), Some(e1)) => {
                let d = records[k].delta_k;
                e1 > (1.0 - d) * e0 + d * d * c
            }
            _ => false,
        })
        .collect()
}

/// Sample mean and standard error of the pathwise cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub n_paths: usize,
}

/// Periodic multilinear interpolation of component `comp` of a node field
/// with `width` components per node.
fn interpolate(grid: &TorusGrid, values: &[f64], width: usize, comp: usize, x: &Point) -> f64 {
    let d = grid.dim();
    let nx = grid.nx() as f64;
    let mut base = [0usize; 2];
    let mut frac = [0.0; 2];
    for a in 0..d {
        let s = x[a].rem_euclid(1.0) * nx;
        let i = s.floor();
        base[a] = (i as usize) % grid.nx();
        frac[a] = s - i;
    }
    let at = |idx: [usize; 2]| values[grid.node_at(idx) * width + comp];
    if d == 1 {
        let j = (base[0] + 1) % grid.nx();
        (1.0 - frac[0]) * at([base[0], 0]) + frac[0] * at([j, 0])
    } else {
        let i1 = (base[0] + 1) % grid.nx();
        let j1 = (base[1] + 1) % grid.nx();
        let (fx, fy) = (frac[0], frac[1]);
        (1.0 - fx) * (1.0 - fy) * at([base[0], base[1]])
            + fx * (1.0 - fy) * at([i1, base[1]])
            + (1.0 - fx) * fy * at([base[0], j1])
            + fx * fy * at([i1, j1])
    }
}

/// Monte Carlo estimate of `u(x, 0)` by Euler-Maruyama under the best-response
/// feedback for `coupling`.
pub fn monte_carlo_value(
    problem: &MfgProblem,
    coupling: &CouplingState,
    x: Point,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate> {
    let value = solve_hjb(problem, coupling)?;
    let control = best_response_control(problem, coupling, &value)?;
    monte_carlo_with_control(problem, coupling, &control, x, n_paths, seed)
}

/// Monte Carlo estimate of the cost of a given feedback control.
pub fn monte_carlo_with_control(
    problem: &MfgProblem,
    coupling: &CouplingState,
    control: &VectorField,
    x: Point,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_paths == 0 {
        return Err(Error::Config("Monte Carlo needs at least one path".into()));
    }
    let grid = *problem.grid();
    grid.check_same(control.grid())?;
    grid.check_same(coupling.gamma.grid())?;
    let (d, dt) = (grid.dim(), grid.dt());
    let noise = (2.0 * problem.viscosity() * dt).sqrt();
    let cost = problem.cost();
    let path_cost = |path: usize| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path as u64);
        let mut pos = x;
        let mut total = Vec::with_capacity(grid.nt() + 1);
        let mut shift = [0.0; 2];
        for n in 0..grid.nt() {
            let t = grid.time(n);
            let mut v = [0.0; 2];
            for (a, va) in v.iter_mut().enumerate().take(d) {
                *va = interpolate(&grid, control.level(n), d, a, &pos);
            }
            let gamma = interpolate(&grid, coupling.gamma.level(n), 1, 0, &pos);
            problem.adjoint_price_at(&pos, coupling.price.at(n), &mut shift[..d]);
            let price: f64 = (0..d).map(|a| shift[a] * v[a]).sum();
            total.push(dt * (cost.value(&pos, t, &v[..d], d) + gamma + price));
            for a in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                pos[a] = (pos[a] + v[a] * dt + noise * z).rem_euclid(1.0);
            }
        }
        total.push(interpolate(&grid, problem.terminal_cost(), 1, 0, &pos));
        compensated_sum(total)
    };
    let samples: Vec<f64> = (0..n_paths).into_par_iter().map(path_cost).collect();
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            what: "Monte Carlo path cost",
            level: grid.nt(),
        });
    }
    let n = n_paths as f64;
    let mean = compensated_sum(samples.iter().copied()) / n;
    let var = if n_paths > 1 {
        compensated_sum(samples.iter().map(|s| (s - mean) * (s - mean))) / (n - 1.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        estimate: mean,
        standard_error: (var / n).sqrt(),
        n_paths,
    })
}

/// `u(x, 0)` by interpolation of the grid value function.
pub fn value_at(problem: &MfgProblem, value: &ValueFunction, x: &Point) -> f64 {
    interpolate(problem.grid(), value.u.level(0), 1, 0, x)
}
