//! Backward Hamilton-Jacobi-Bellman march and best-response feedback.
//!
//! One step from level `n + 1` to `n` first diffuses implicitly and then
//! applies the Hamiltonian explicitly on the diffused values:
//!
//! ```text
//! (I + dt ν L_h) ũ^n = u^{n+1}
//! u^n = ũ^n + dt (γ^n - H(x, t_n, ∇_h ũ^n + A*P^n))
//! ```
//!
//! This ordering makes the march the exact dynamic-programming dual of the
//! Fokker-Planck march in [`crate::fokker_planck`], so that the discrete
//! value `∫ u(0) m0` is the exact minimum of the discrete individual cost.

use crate::error::{Error, Result};
use crate::grid::{ScalarField, VectorField};
use crate::model::{MfgProblem, PriceCurve};

/// Congestion field and price curve predicted from a belief.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingState {
    pub gamma: ScalarField,
    pub price: PriceCurve,
}

impl CouplingState {
    pub fn new(gamma: ScalarField, price: PriceCurve) -> Result<Self> {
        if price.levels() != gamma.grid().levels() {
            return Err(Error::GridMismatch(format!(
                "price has {} levels, congestion has {}",
                price.levels(),
                gamma.grid().levels()
            )));
        }
        gamma.check_finite("congestion field")?;
        Ok(Self { gamma, price })
    }

    /// Spatially constant congestion `c` and constant price `p`.
    pub fn constant(problem: &MfgProblem, c: f64, p: &[f64]) -> Self {
        let grid = *problem.grid();
        let mut price = PriceCurve::zeros(p.len(), grid.levels());
        for level in 0..grid.levels() {
            price.at_mut(level).copy_from_slice(p);
        }
        Self {
            gamma: ScalarField::constant(grid, c),
            price,
        }
    }
}

/// Discrete value function and the per-level scheme residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub u: ScalarField,
    /// `residual[n]`: sup-norm of the scheme residual of the step `n+1 → n`.
    pub residual: Vec<f64>,
}

impl ValueFunction {
    pub fn max_residual(&self) -> f64 {
        self.residual.iter().copied().fold(0.0, f64::max)
    }
}

fn check_coupling(problem: &MfgProblem, coupling: &CouplingState) -> Result<()> {
    problem.grid().check_same(coupling.gamma.grid())?;
    if coupling.price.components() != problem.k_agg() || coupling.price.levels() != problem.grid().levels() {
        return Err(Error::GridMismatch(format!(
            "price curve is {}x{}, problem expects {}x{}",
            coupling.price.levels(),
            coupling.price.components(),
            problem.grid().levels(),
            problem.k_agg()
        )));
    }
    Ok(())
}

/// Evaluates `ũ = K^{-1} u_next`, its gradient shifted by `A*P`, and
/// returns (via closure) `H` and `H_p` at every node of `level`.
struct LevelWork {
    diffused: Vec<f64>,
    grad: Vec<f64>,
}

impl LevelWork {
    fn new(problem: &MfgProblem) -> Self {
        let g = problem.grid();
        Self {
            diffused: vec![0.0; g.nodes()],
            grad: vec![0.0; g.nodes() * g.dim()],
        }
    }

    fn prepare(&mut self, problem: &MfgProblem, coupling: &CouplingState, u_next: &[f64], level: usize) -> Result<()> {
        let grid = problem.grid();
        let d = grid.dim();
        problem.diffusion().solve(u_next, &mut self.diffused)?;
        grid.gradient_into(&self.diffused, &mut self.grad);
        let price = coupling.price.at(level);
        let mut shift = [0.0; 2];
        for node in 0..grid.nodes() {
            problem.adjoint_price_at_node(node, price, &mut shift[..d]);
            for a in 0..d {
                self.grad[node * d + a] += shift[a];
            }
        }
        Ok(())
    }

    fn argument(&self, node: usize, d: usize) -> &[f64] {
        &self.grad[node * d..(node + 1) * d]
    }
}

/// Backward semi-implicit march from `u(T) = g`.
pub fn solve_hjb(problem: &MfgProblem, coupling: &CouplingState) -> Result<ValueFunction> {
    check_coupling(problem, coupling)?;
    let grid = *problem.grid();
    let (nt, d, dt) = (grid.nt(), grid.dim(), grid.dt());
    let mut u = ScalarField::zeros(grid);
    u.level_mut(nt).copy_from_slice(problem.terminal_cost());
    let mut residual = vec![0.0; nt];
    let mut work = LevelWork::new(problem);
    let mut ham = vec![0.0; grid.nodes()];
    let mut back = vec![0.0; grid.nodes()];
    let mut sup_drift: f64 = 0.0;
    for n in (0..nt).rev() {
        work.prepare(problem, coupling, u.level(n + 1), n)?;
        for (node, h) in ham.iter_mut().enumerate() {
            let (hv, hp) = problem.hamiltonian_at_node(n, node, work.argument(node, d))?;
            *h = hv;
            sup_drift = sup_drift.max(hp[..d].iter().map(|c| c.abs()).sum());
        }
        let gamma = coupling.gamma.level(n);
        {
            let un = u.level_mut(n);
            for node in 0..grid.nodes() {
                un[node] = work.diffused[node] + dt * (gamma[node] - ham[node]);
            }
        }
        if u.level(n).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "value function",
                level: n,
            });
        }
        // residual of K (u^n - dt (γ - H)) = u^{n+1}
        let explicit: Vec<f64> = (0..grid.nodes())
            .map(|i| u.level(n)[i] - dt * (gamma[i] - ham[i]))
            .collect();
        problem.diffusion().apply(&explicit, &mut back);
        residual[n] = back
            .iter()
            .zip(u.level(n + 1))
            .fold(0.0, |acc: f64, (a, b)| acc.max((a - b).abs()));
    }
    let courant = dt * sup_drift / grid.dx();
    if courant > 1.0 {
        return Err(Error::Config(format!(
            "HJB CFL bound violated: dt*sup|H_p|/dx = {courant:.4} > 1 (sup|H_p| = {sup_drift:.4}); increase nt"
        )));
    }
    Ok(ValueFunction { u, residual })
}

/// Feedback `v = -H_p(∇_h ũ + A*P)` at levels `0..nt`; zero at the final level,
/// where the flux carries no cost.
pub fn best_response_control(
    problem: &MfgProblem,
    coupling: &CouplingState,
    value: &ValueFunction,
) -> Result<VectorField> {
    check_coupling(problem, coupling)?;
    let grid = *problem.grid();
    grid.check_same(value.u.grid())?;
    let d = grid.dim();
    let mut v = VectorField::zeros(grid);
    let mut work = LevelWork::new(problem);
    for n in 0..grid.nt() {
        work.prepare(problem, coupling, value.u.level(n + 1), n)?;
        let slab = v.level_mut(n);
        for node in 0..grid.nodes() {
            let (_, hp) = problem.hamiltonian_at_node(n, node, work.argument(node, d))?;
            for a in 0..d {
                slab[node * d + a] = -hp[a];
            }
        }
    }
    Ok(v)
}

/// `∫ u(x, 0) m0(x) dx`.
pub fn optimal_value(problem: &MfgProblem, value: &ValueFunction) -> f64 {
    let grid = problem.grid();
    let weighted: Vec<f64> = value
        .u
        .level(0)
        .iter()
        .zip(problem.m0())
        .map(|(u, m)| u * m)
        .collect();
    grid.integrate(&weighted)
}
