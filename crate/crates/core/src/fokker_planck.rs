//! Forward Fokker-Planck march and the change of variables `(m, v) ↔ (m, w)`.
//!
//! The march is
//!
//! ```text
//! (I + dt ν L_h) m^{n+1} = m^n - dt Div_h(w^n),   w^n = m^n v^n,
//! ```
//!
//! with the centered divergence `Div_h = -Grad_h^T`. Both operators have zero
//! column sums, so mass is conserved to rounding. The update matrix
//! `K^{-1}(I - dt Div_h V)` is entrywise positive as long as
//! [`MfgProblem::positivity_factor`] of the drift bound stays below one; the
//! output is checked regardless.

use crate::error::{Error, Result};
use crate::grid::{compensated_sum, ScalarField, VectorField};
use crate::hjb::CouplingState;
use crate::model::MfgProblem;

/// Density / flux pair on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPair {
    pub m: ScalarField,
    pub w: VectorField,
}

impl FlowPair {
    /// `(m0` repeated at every level, `0)`.
    pub fn initial(problem: &MfgProblem) -> Self {
        let grid = *problem.grid();
        Self {
            m: ScalarField::constant_in_time(grid, problem.m0()),
            w: VectorField::zeros(grid),
        }
    }

    /// `(1 - delta) self + delta other`.
    pub fn lerp(&self, other: &FlowPair, delta: f64) -> FlowPair {
        FlowPair {
            m: self.m.lerp(&other.m, delta),
            w: self.w.lerp(&other.w, delta),
        }
    }

    /// Checks strict positivity and `|mass - 1| <= mass_tol` at every level.
    pub fn validate(&self, mass_tol: f64) -> Result<()> {
        let grid = *self.m.grid();
        grid.check_same(self.w.grid())?;
        self.m.check_finite("density")?;
        self.w.check_finite("flux")?;
        for level in 0..grid.levels() {
            let slab = self.m.level(level);
            if let Some(min) = slab.iter().copied().reduce(f64::min) {
                if min <= 0.0 {
                    return Err(Error::InvariantBreach(format!(
                        "density not strictly positive at level {level} (min {min:.3e})"
                    )));
                }
            }
            let mass = grid.integrate(slab);
            if (mass - 1.0).abs() > mass_tol {
                return Err(Error::InvariantBreach(format!(
                    "mass {mass:.15} at level {level} differs from 1"
                )));
            }
        }
        Ok(())
    }

    pub fn min_density(&self) -> f64 {
        self.m.min()
    }

    /// Largest violation of the discrete march,
    /// `max |K m^{n+1} - m^n + dt Div_h(w^n)|`, together with `max |m^0 - m0|`.
    /// Best responses and their convex combinations give rounding-level values;
    /// the constant-in-time initial belief generally does not.
    pub fn fp_residual(&self, problem: &MfgProblem) -> Result<f64> {
        let grid = *problem.grid();
        grid.check_same(self.m.grid())?;
        grid.check_same(self.w.grid())?;
        let nodes = grid.nodes();
        let mut worst = self
            .m
            .level(0)
            .iter()
            .zip(problem.m0())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let mut div = vec![0.0; nodes];
        let mut km = vec![0.0; nodes];
        for n in 0..grid.nt() {
            grid.divergence_into(self.w.level(n), &mut div);
            problem.diffusion().apply(self.m.level(n + 1), &mut km);
            for i in 0..nodes {
                let r = km[i] - self.m.level(n)[i] + grid.dt() * div[i];
                worst = worst.max(r.abs());
            }
        }
        Ok(worst)
    }
}

/// Forward march for the drift `v` from `m(0) = m0`.
pub fn solve_fp(problem: &MfgProblem, v: &VectorField) -> Result<FlowPair> {
    let grid = *problem.grid();
    grid.check_same(v.grid())?;
    v.check_finite("drift")?;
    let (d, dt, nodes) = (grid.dim(), grid.dt(), grid.nodes());
    let vmax = (0..grid.nt())
        .flat_map(|n| v.level(n).chunks(d).map(|c| c.iter().map(|x| x.abs()).sum::<f64>()))
        .fold(0.0, f64::max);
    let courant = dt * vmax / grid.dx();
    if courant > 1.0 {
        return Err(Error::Config(format!(
            "FP CFL bound violated: dt*|v|/dx = {courant:.4} > 1; increase nt"
        )));
    }
    let mut m = ScalarField::zeros(grid);
    let mut w = VectorField::zeros(grid);
    m.level_mut(0).copy_from_slice(problem.m0());
    let mut div = vec![0.0; nodes];
    let mut rhs = vec![0.0; nodes];
    for n in 0..=grid.nt() {
        {
            let mn = m.level(n).to_vec();
            let vn = v.level(n);
            let wn = w.level_mut(n);
            for node in 0..nodes {
                for a in 0..d {
                    wn[node * d + a] = mn[node] * vn[node * d + a];
                }
            }
        }
        if n == grid.nt() {
            break;
        }
        grid.divergence_into(w.level(n), &mut div);
        for (r, (mi, di)) in rhs.iter_mut().zip(m.level(n).iter().zip(&div)) {
            *r = mi - dt * di;
        }
        let next = m.level_mut(n + 1);
        problem.diffusion().solve(&rhs, next)?;
        let min = next.iter().copied().fold(f64::INFINITY, f64::min);
        if min.is_nan() || next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "density",
                level: n + 1,
            });
        }
        if min <= 0.0 {
            return Err(Error::InvariantBreach(format!(
                "density reached {min:.3e} at level {}; positivity factor {:.3} at drift {vmax:.3}",
                n + 1,
                problem.positivity_factor(vmax)
            )));
        }
    }
    Ok(FlowPair { m, w })
}

/// `χ(m, v) = (m, m v)`.
pub fn chi_forward(m: &ScalarField, v: &VectorField) -> Result<FlowPair> {
    let grid = *m.grid();
    grid.check_same(v.grid())?;
    let d = grid.dim();
    let values = v
        .values()
        .iter()
        .enumerate()
        .map(|(i, vi)| m.values()[i / d] * vi)
        .collect();
    Ok(FlowPair {
        m: m.clone(),
        w: VectorField::from_values(grid, values)?,
    })
}

/// `χ^{-1}(m, w) = (m, w / m)`; the density must be positive everywhere.
pub fn chi_inverse(pair: &FlowPair) -> Result<VectorField> {
    let grid = *pair.m.grid();
    grid.check_same(pair.w.grid())?;
    let d = grid.dim();
    let mut out = Vec::with_capacity(pair.w.values().len());
    for (i, wi) in pair.w.values().iter().enumerate() {
        let m = pair.m.values()[i / d];
        if !(m > 0.0) {
            let level = i / d / grid.nodes();
            return Err(Error::InvariantBreach(format!(
                "cannot recover the control where m = {m:.3e} (level {level})"
            )));
        }
        out.push(wi / m);
    }
    VectorField::from_values(grid, out)
}

/// `Σ_{n<nt} dt ∫ L̃[m, w](t_n) dx`, the perspective part of every cost.
pub(crate) fn perspective_integral(problem: &MfgProblem, pair: &FlowPair) -> Result<f64> {
    let grid = *problem.grid();
    let d = grid.dim();
    let mut per_level = Vec::with_capacity(grid.nt());
    for n in 0..grid.nt() {
        let m = pair.m.level(n);
        let w = pair.w.level(n);
        let mut terms = Vec::with_capacity(grid.nodes());
        for node in 0..grid.nodes() {
            terms.push(problem.perspective_at_node(n, node, m[node], &w[node * d..(node + 1) * d])?);
        }
        per_level.push(grid.cell_volume() * compensated_sum(terms));
    }
    Ok(grid.dt() * compensated_sum(per_level))
}

pub(crate) fn terminal_integral(problem: &MfgProblem, pair: &FlowPair) -> f64 {
    let grid = problem.grid();
    let weighted: Vec<f64> = pair
        .m
        .level(grid.nt())
        .iter()
        .zip(problem.terminal_cost())
        .map(|(m, g)| m * g)
        .collect();
    grid.integrate(&weighted)
}

/// Individual cost `Z̃_{γ,P}(m, w)`: perspective cost, congestion charge,
/// price charge on the aggregate flux and terminal cost, with the
/// left-endpoint rule in time.
pub fn individual_cost(problem: &MfgProblem, coupling: &CouplingState, pair: &FlowPair) -> Result<f64> {
    let grid = *problem.grid();
    grid.check_same(pair.m.grid())?;
    grid.check_same(coupling.gamma.grid())?;
    let running = perspective_integral(problem, pair)?;
    let mut linear = Vec::with_capacity(grid.nt());
    let mut agg = vec![0.0; problem.k_agg()];
    for n in 0..grid.nt() {
        let congestion: Vec<f64> = pair
            .m
            .level(n)
            .iter()
            .zip(coupling.gamma.level(n))
            .map(|(m, g)| m * g)
            .collect();
        problem.aggregate_level(pair.w.level(n), &mut agg);
        let price: f64 = agg.iter().zip(coupling.price.at(n)).map(|(a, p)| a * p).sum();
        linear.push(grid.integrate(&congestion) + price);
    }
    Ok(running + grid.dt() * compensated_sum(linear) + terminal_integral(problem, pair))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TorusGrid;
    use crate::hjb::{best_response_control, optimal_value, solve_hjb};
    use crate::model::{
        AggregationSpec, CouplingSpec, NewtonConfig, PriceSpec, ProblemData, Profile, RunningCost,
        SmoothingKernel,
    };
    use std::f64::consts::PI;

    fn problem(nx: usize, nt: usize, m0: Profile, offset: f64) -> MfgProblem {
        let grid = TorusGrid::new(1, nx, nt, 1.0).unwrap();
        MfgProblem::new(ProblemData {
            grid,
            cost: RunningCost::quadratic(1.0, Profile::cosine(0.0, offset, 0.0)),
            newton: NewtonConfig::default(),
            coupling: CouplingSpec {
                kernel: SmoothingKernel::Delta,
                price: PriceSpec {
                    base: vec![0.0],
                    slope: vec![],
                    gain: 0.0,
                },
                aggregation: AggregationSpec {
                    rows: 1,
                    entries: vec![Profile::constant(0.5)],
                },
            },
            m0: m0.sample(&grid),
            g: Profile::cosine(0.0, 0.2, 0.3).sample(&grid),
            viscosity: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn uniform_density_is_fixed_point() {
        let p = problem(32, 16, Profile::constant(1.0), 0.0);
        let pair = solve_fp(&p, &VectorField::zeros(*p.grid())).unwrap();
        assert!(pair.m.values().iter().all(|v| (v - 1.0).abs() < 1e-14));
        assert!(pair.w.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cosine_mode_decays_by_circulant_symbol() {
        let p = problem(64, 40, Profile::cosine(1.0, 0.5, 0.0), 0.0);
        let grid = *p.grid();
        let pair = solve_fp(&p, &VectorField::zeros(grid)).unwrap();
        let lambda = (2.0 / grid.dx().powi(2)) * (1.0 - (2.0 * PI * grid.dx()).cos());
        let factor = 1.0 / (1.0 + grid.dt() * lambda);
        let mut amp = 0.5;
        for n in 0..grid.levels() {
            for (i, m) in pair.m.level(n).iter().enumerate() {
                let x = i as f64 * grid.dx();
                assert!((m - (1.0 + amp * (2.0 * PI * x).cos())).abs() < 1e-12);
            }
            amp *= factor;
        }
    }

    #[test]
    fn chi_round_trip_and_trivial_cases() {
        let grid = TorusGrid::new(1, 16, 4, 1.0).unwrap();
        let m = ScalarField::from_fn(grid, |x, t| 1.2 + (7.0 * x[0] + t).sin());
        let v = VectorField::from_fn(grid, |x, t, out| out[0] = (3.0 * x[0] - t).cos());
        let pair = chi_forward(&m, &v).unwrap();
        let back = chi_inverse(&pair).unwrap();
        for (a, b) in back.values().iter().zip(v.values()) {
            assert!((a - b).abs() < 1e-14);
        }
        let zero = chi_forward(&m, &VectorField::zeros(grid)).unwrap();
        assert!(zero.w.values().iter().all(|w| *w == 0.0));
        let unit = chi_forward(&ScalarField::constant(grid, 1.0), &v).unwrap();
        assert_eq!(unit.w.values(), v.values());
        let mut bad = pair.clone();
        bad.m = ScalarField::zeros(grid);
        assert!(matches!(chi_inverse(&bad), Err(Error::InvariantBreach(_))));
    }

    #[test]
    fn individual_cost_of_idle_pairs() {
        let p = problem(16, 8, Profile::constant(1.0), 0.0);
        let grid = *p.grid();
        let mut zero_g = p.clone();
        let _ = &mut zero_g;
        let pair = FlowPair::initial(&p);
        let c = CouplingState::constant(&p, 0.0, &[0.0]);
        let base = terminal_integral(&p, &pair);
        assert!((individual_cost(&p, &c, &pair).unwrap() - base).abs() < 1e-15);
        let c = CouplingState::constant(&p, 2.5, &[0.0]);
        let cost = individual_cost(&p, &c, &pair).unwrap() - base;
        assert!((cost - 2.5 * grid.horizon()).abs() < 1e-14);
    }

    #[test]
    fn best_response_cost_equals_value() {
        let p = problem(48, 48, Profile::cosine(1.0, 0.6, 0.2), 0.3);
        let grid = *p.grid();
        let gamma = ScalarField::from_fn(grid, |x, t| 0.4 * (2.0 * PI * x[0]).sin() * (1.0 - t));
        let c = CouplingState::new(gamma, crate::model::PriceCurve::zeros(1, grid.levels())).unwrap();
        let vf = solve_hjb(&p, &c).unwrap();
        let v = best_response_control(&p, &c, &vf).unwrap();
        let pair = solve_fp(&p, &v).unwrap();
        pair.validate(1e-10).unwrap();
        let z = individual_cost(&p, &c, &pair).unwrap();
        let opt = optimal_value(&p, &vf);
        assert!((z - opt).abs() < 1e-12, "{z} vs {opt}");
    }
}
