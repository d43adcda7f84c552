//! Uniform periodic space-time grids on `T^d x [0, T]`.
//!
//! Nodes are indexed with axis 0 running fastest: `node = i0 + nx * i1`.
//! Time levels run from `0` to `nt` inclusive. All spatial stencils are
//! periodic; the centered gradient and the centered divergence form an exact
//! negative-adjoint pair under the rectangle rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial point; only the first `dim` entries are meaningful.
pub type Point = [f64; 2];

/// Uniform discretization of the unit torus in `dim` dimensions times `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    nx: usize,
    nt: usize,
    horizon: f64,
    dx: f64,
    dt: f64,
}

impl TorusGrid {
    pub fn new(dim: usize, nx: usize, nt: usize, horizon: f64) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Config(format!("dimension must be 1 or 2, got {dim}")));
        }
        if nx < 4 {
            return Err(Error::Config(format!("nx must be at least 4, got {nx}")));
        }
        if nt < 2 {
            return Err(Error::Config(format!("nt must be at least 2, got {nt}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            dim,
            nx,
            nt,
            horizon,
            dx: 1.0 / nx as f64,
            dt: horizon / nt as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of spatial nodes, `nx^dim`.
    pub fn nodes(&self) -> usize {
        self.nx.pow(self.dim as u32)
    }

    /// Number of time levels, `nt + 1`.
    pub fn levels(&self) -> usize {
        self.nt + 1
    }

    /// Quadrature weight of one spatial node, `dx^dim`.
    pub fn cell_volume(&self) -> f64 {
        self.dx.powi(self.dim as i32)
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level > self.nt {
            Err(Error::Index { level, max: self.nt })
        } else {
            Ok(())
        }
    }

    /// Periodic reduction of a (possibly negative) axis index.
    pub fn wrap(&self, i: isize) -> usize {
        i.rem_euclid(self.nx as isize) as usize
    }

    /// Per-axis indices of a node.
    pub fn axis_indices(&self, node: usize) -> [usize; 2] {
        if self.dim == 1 {
            [node, 0]
        } else {
            [node % self.nx, node / self.nx]
        }
    }

    pub fn node_at(&self, idx: [usize; 2]) -> usize {
        if self.dim == 1 {
            idx[0] % self.nx
        } else {
            idx[0] % self.nx + self.nx * (idx[1] % self.nx)
        }
    }

    pub fn coords(&self, node: usize) -> Point {
        let idx = self.axis_indices(node);
        [idx[0] as f64 * self.dx, idx[1] as f64 * self.dx]
    }

    /// Node shifted by `offset` along `axis`, with periodic wrapping.
    pub fn neighbor(&self, node: usize, axis: usize, offset: isize) -> usize {
        let mut idx = self.axis_indices(node);
        idx[axis] = self.wrap(idx[axis] as isize + offset);
        self.node_at(idx)
    }

    /// Rectangle rule over one level of spatial values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.nodes());
        self.cell_volume() * compensated_sum(values.iter().copied())
    }

    /// Centered periodic gradient; `out[node * dim + axis]`.
    pub fn gradient_into(&self, u: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let inv = 0.5 / self.dx;
        for node in 0..self.nodes() {
            for axis in 0..d {
                let fwd = self.neighbor(node, axis, 1);
                let bwd = self.neighbor(node, axis, -1);
                out[node * d + axis] = (u[fwd] - u[bwd]) * inv;
            }
        }
    }

    /// Centered periodic divergence of a node-stored vector field.
    pub fn divergence_into(&self, w: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let inv = 0.5 / self.dx;
        for node in 0..self.nodes() {
            let mut acc = 0.0;
            for axis in 0..d {
                let fwd = self.neighbor(node, axis, 1);
                let bwd = self.neighbor(node, axis, -1);
                acc += (w[fwd * d + axis] - w[bwd * d + axis]) * inv;
            }
            out[node] = acc;
        }
    }

    /// Negative periodic Laplacian `L_h = -Δ_h` (3-point per axis).
    pub fn neg_laplacian_into(&self, u: &[f64], out: &mut [f64]) {
        let inv = 1.0 / (self.dx * self.dx);
        for node in 0..self.nodes() {
            let mut acc = 0.0;
            for axis in 0..self.dim {
                let fwd = self.neighbor(node, axis, 1);
                let bwd = self.neighbor(node, axis, -1);
                acc += (2.0 * u[node] - u[fwd] - u[bwd]) * inv;
            }
            out[node] = acc;
        }
    }

    /// Eigenvalue of `L_h` on the Fourier mode with wave numbers `k`.
    pub fn laplacian_symbol(&self, k: [i64; 2]) -> f64 {
        let two_pi_dx = 2.0 * std::f64::consts::PI * self.dx;
        (0..self.dim)
            .map(|a| 2.0 / (self.dx * self.dx) * (1.0 - (two_pi_dx * k[a] as f64).cos()))
            .sum()
    }

    pub fn integrate_space(&self, field: &ScalarField, t_level: usize) -> Result<f64> {
        self.check_same(field.grid())?;
        self.check_level(t_level)?;
        Ok(self.integrate(field.level(t_level)))
    }

    pub fn gradient(&self, field: &ScalarField, t_level: usize) -> Result<Vec<f64>> {
        self.check_same(field.grid())?;
        self.check_level(t_level)?;
        let mut out = vec![0.0; self.nodes() * self.dim];
        self.gradient_into(field.level(t_level), &mut out);
        Ok(out)
    }

    pub fn divergence(&self, field: &VectorField, t_level: usize) -> Result<Vec<f64>> {
        self.check_same(field.grid())?;
        self.check_level(t_level)?;
        let mut out = vec![0.0; self.nodes()];
        self.divergence_into(field.level(t_level), &mut out);
        Ok(out)
    }

    pub fn check_same(&self, other: &TorusGrid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Neumaier-compensated summation.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Real number per (time level, spatial node).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: TorusGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: TorusGrid) -> Self {
        Self {
            values: vec![0.0; grid.levels() * grid.nodes()],
            grid,
        }
    }

    pub fn constant(grid: TorusGrid, c: f64) -> Self {
        Self {
            values: vec![c; grid.levels() * grid.nodes()],
            grid,
        }
    }

    pub fn from_values(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        let expected = grid.levels() * grid.nodes();
        if values.len() != expected {
            return Err(Error::GridMismatch(format!(
                "scalar field has {} values, grid expects {expected}",
                values.len()
            )));
        }
        let field = Self { grid, values };
        field.check_finite("scalar field")?;
        Ok(field)
    }

    /// Samples `f(x, t)` at every node and level.
    pub fn from_fn(grid: TorusGrid, f: impl Fn(&Point, f64) -> f64) -> Self {
        let mut field = Self::zeros(grid);
        for level in 0..grid.levels() {
            let t = grid.time(level);
            for (node, v) in field.level_mut(level).iter_mut().enumerate() {
                *v = f(&grid.coords(node), t);
            }
        }
        field
    }

    /// Repeats one spatial profile at every level.
    pub fn constant_in_time(grid: TorusGrid, spatial: &[f64]) -> Self {
        let mut field = Self::zeros(grid);
        for level in 0..grid.levels() {
            field.level_mut(level).copy_from_slice(spatial);
        }
        field
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn level(&self, level: usize) -> &[f64] {
        let n = self.grid.nodes();
        &self.values[level * n..(level + 1) * n]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut [f64] {
        let n = self.grid.nodes();
        &mut self.values[level * n..(level + 1) * n]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// First level holding a non-finite value, reported as an error.
    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        let n = self.grid.nodes();
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite { what, level: i / n }),
            None => Ok(()),
        }
    }

    /// `(1 - delta) * self + delta * other`.
    pub fn lerp(&self, other: &ScalarField, delta: f64) -> ScalarField {
        debug_assert_eq!(self.grid, other.grid);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (1.0 - delta) * a + delta * b)
            .collect();
        ScalarField { grid: self.grid, values }
    }

    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        ScalarField { grid: self.grid, values }
    }

    pub fn scale(&self, c: f64) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

/// A `dim`-vector per (time level, spatial node), stored as
/// `values[(level * nodes + node) * dim + axis]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: TorusGrid,
    values: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: TorusGrid) -> Self {
        Self {
            values: vec![0.0; grid.levels() * grid.nodes() * grid.dim()],
            grid,
        }
    }

    pub fn from_values(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        let expected = grid.levels() * grid.nodes() * grid.dim();
        if values.len() != expected {
            return Err(Error::GridMismatch(format!(
                "vector field has {} components, grid expects {expected}",
                values.len()
            )));
        }
        let field = Self { grid, values };
        field.check_finite("vector field")?;
        Ok(field)
    }

    /// Samples `f(x, t, out)` at every node and level.
    pub fn from_fn(grid: TorusGrid, f: impl Fn(&Point, f64, &mut [f64])) -> Self {
        let mut field = Self::zeros(grid);
        let d = grid.dim();
        for level in 0..grid.levels() {
            let t = grid.time(level);
            let slab = field.level_mut(level);
            for node in 0..grid.nodes() {
                f(&grid.coords(node), t, &mut slab[node * d..(node + 1) * d]);
            }
        }
        field
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn level(&self, level: usize) -> &[f64] {
        let n = self.grid.nodes() * self.grid.dim();
        &self.values[level * n..(level + 1) * n]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut [f64] {
        let n = self.grid.nodes() * self.grid.dim();
        &mut self.values[level * n..(level + 1) * n]
    }

    pub fn at(&self, level: usize, node: usize) -> &[f64] {
        let d = self.grid.dim();
        let start = (level * self.grid.nodes() + node) * d;
        &self.values[start..start + d]
    }

    /// Largest per-node l1 norm `sum_axis |v_axis|`.
    pub fn max_l1(&self) -> f64 {
        self.values
            .chunks(self.grid.dim())
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        let per_level = self.grid.nodes() * self.grid.dim();
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite { what, level: i / per_level }),
            None => Ok(()),
        }
    }

    pub fn lerp(&self, other: &VectorField, delta: f64) -> VectorField {
        debug_assert_eq!(self.grid, other.grid);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (1.0 - delta) * a + delta * b)
            .collect();
        VectorField { grid: self.grid, values }
    }

    pub fn sub(&self, other: &VectorField) -> VectorField {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        VectorField { grid: self.grid, values }
    }
}

/// Solver for `(I + theta * L_h) x = b` on the periodic grid.
///
/// In one dimension the cyclic tridiagonal system is factored once and solved
/// directly (Sherman-Morrison on top of the Thomas sweep). In two dimensions
/// conjugate gradients are used; the operator is symmetric positive definite.
#[derive(Debug, Clone)]
pub struct ImplicitDiffusion {
    grid: TorusGrid,
    theta: f64,
    cyclic: Option<CyclicFactor>,
    tolerance: f64,
}

#[derive(Debug, Clone)]
struct CyclicFactor {
    off: f64,
    gamma: f64,
    // Thomas forward-sweep coefficients of the modified matrix
    c_prime: Vec<f64>,
    denom: Vec<f64>,
    z: Vec<f64>,
}

impl CyclicFactor {
    fn new(n: usize, diag: f64, off: f64) -> Self {
        let gamma = -diag;
        let mut b = vec![diag; n];
        b[0] = diag - gamma;
        b[n - 1] = diag - off * off / gamma;
        let mut c_prime = vec![0.0; n];
        let mut denom = vec![0.0; n];
        denom[0] = b[0];
        c_prime[0] = off / denom[0];
        for i in 1..n {
            denom[i] = b[i] - off * c_prime[i - 1];
            c_prime[i] = off / denom[i];
        }
        let mut f = Self {
            off,
            gamma,
            c_prime,
            denom,
            z: Vec::new(),
        };
        let mut u = vec![0.0; n];
        u[0] = gamma;
        u[n - 1] = off;
        let mut z = vec![0.0; n];
        f.thomas(&u, &mut z);
        f.z = z;
        f
    }

    fn thomas(&self, rhs: &[f64], x: &mut [f64]) {
        let n = rhs.len();
        x[0] = rhs[0] / self.denom[0];
        for i in 1..n {
            x[i] = (rhs[i] - self.off * x[i - 1]) / self.denom[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= self.c_prime[i] * x[i + 1];
        }
    }

    fn solve(&self, rhs: &[f64], x: &mut [f64]) {
        let n = rhs.len();
        self.thomas(rhs, x);
        let beta = self.off;
        let fact = (x[0] + beta * x[n - 1] / self.gamma)
            / (1.0 + self.z[0] + beta * self.z[n - 1] / self.gamma);
        for (xi, zi) in x.iter_mut().zip(&self.z) {
            *xi -= fact * zi;
        }
    }
}

impl ImplicitDiffusion {
    pub fn new(grid: TorusGrid, theta: f64) -> Result<Self> {
        if !(theta.is_finite() && theta >= 0.0) {
            return Err(Error::Config(format!("diffusion weight must be >= 0, got {theta}")));
        }
        let cyclic = (grid.dim() == 1).then(|| {
            let r = theta / (grid.dx() * grid.dx());
            CyclicFactor::new(grid.nx(), 1.0 + 2.0 * r, -r)
        });
        Ok(Self {
            grid,
            theta,
            cyclic,
            tolerance: 1e-13,
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// `out = (I + theta L_h) x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.grid.neg_laplacian_into(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi + self.theta * *o;
        }
    }

    pub fn solve(&self, rhs: &[f64], out: &mut [f64]) -> Result<()> {
        if let Some(f) = &self.cyclic {
            f.solve(rhs, out);
            return Ok(());
        }
        self.conjugate_gradient(rhs, out)
    }

    fn conjugate_gradient(&self, rhs: &[f64], x: &mut [f64]) -> Result<()> {
        let n = rhs.len();
        x.copy_from_slice(rhs);
        let mut ax = vec![0.0; n];
        self.apply(x, &mut ax);
        let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut p = r.clone();
        let mut rr: f64 = r.iter().map(|v| v * v).sum();
        let target = self.tolerance * rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let mut ap = vec![0.0; n];
        for _ in 0..(10 * n).max(100) {
            if rr.sqrt() <= target {
                return Ok(());
            }
            self.apply(&p, &mut ap);
            let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new: f64 = r.iter().map(|v| v * v).sum();
            let beta = rr_new / rr;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rr = rr_new;
        }
        if rr.sqrt() <= target {
            Ok(())
        } else {
            Err(Error::Solver(format!(
                "conjugate gradients stalled at residual {:.3e}",
                rr.sqrt()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn rejects_bad_dimensions() {
        assert!(TorusGrid::new(3, 8, 8, 1.0).is_err());
        assert!(TorusGrid::new(1, 3, 8, 1.0).is_err());
        assert!(TorusGrid::new(1, 8, 1, 1.0).is_err());
        assert!(TorusGrid::new(1, 8, 8, 0.0).is_err());
    }

    #[test]
    fn unit_torus_and_horizon() {
        let g = TorusGrid::new(1, 48, 30, 0.7).unwrap();
        assert_eq!(g.nx() as f64 * g.dx(), 1.0);
        assert!((g.nt() as f64 * g.dt() - 0.7).abs() < 1e-15);
        assert_eq!(g.wrap(48), g.wrap(0));
        assert_eq!(g.wrap(-1), 47);
        let g2 = TorusGrid::new(2, 8, 4, 1.0).unwrap();
        assert_eq!(g2.neighbor(g2.node_at([7, 3]), 0, 1), g2.node_at([0, 3]));
        assert_eq!(g2.neighbor(g2.node_at([7, 0]), 1, -1), g2.node_at([7, 7]));
    }

    #[test]
    fn integrates_constants_and_cosines() {
        for &(dim, nx) in &[(1, 4), (1, 32), (2, 16)] {
            let g = TorusGrid::new(dim, nx, 2, 1.0).unwrap();
            let one = ScalarField::constant(g, 1.0);
            assert!((g.integrate_space(&one, 2).unwrap() - 1.0).abs() < 1e-15);
        }
        let g = TorusGrid::new(1, 64, 2, 1.0).unwrap();
        let s = ScalarField::from_fn(g, |x, _| (2.0 * PI * x[0]).sin());
        assert!(g.integrate_space(&s, 0).unwrap().abs() < 1e-14);
        let g = TorusGrid::new(1, 32, 2, 1.0).unwrap();
        let c = ScalarField::from_fn(g, |x, _| 1.0 + 0.5 * (2.0 * PI * x[0]).cos());
        assert!((g.integrate_space(&c, 1).unwrap() - 1.0).abs() < 1e-14);
        assert!(matches!(g.integrate_space(&c, 3), Err(Error::Index { level: 3, .. })));
    }

    #[test]
    fn gradient_of_cosine_matches_discrete_symbol() {
        let g = TorusGrid::new(1, 64, 2, 1.0).unwrap();
        let dx = g.dx();
        let u = ScalarField::from_fn(g, |x, _| (2.0 * PI * x[0]).cos());
        let grad = g.gradient(&u, 0).unwrap();
        for (i, gi) in grad.iter().enumerate() {
            let x = i as f64 * dx;
            let expected = -(2.0 * PI * x).sin() * (2.0 * PI * dx).sin() / dx;
            assert!((gi - expected).abs() < 1e-12);
        }
        let c = ScalarField::constant(g, 3.0);
        assert!(g.gradient(&c, 1).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_of_sawtooth_shows_seam_jump() {
        let g = TorusGrid::new(1, 16, 2, 1.0).unwrap();
        let nx = g.nx() as f64;
        let u = ScalarField::from_fn(g, |x, _| x[0]);
        let grad = g.gradient(&u, 0).unwrap();
        for (i, gi) in grad.iter().enumerate() {
            // both seam stencils straddle the unit jump
            let expected = if i == 0 || i == g.nx() - 1 {
                (2.0 - nx) / 2.0
            } else {
                1.0
            };
            assert!((gi - expected).abs() < 1e-12, "node {i}: {gi} vs {expected}");
        }
    }

    #[test]
    fn divergence_of_sine_flux() {
        let g = TorusGrid::new(1, 64, 2, 1.0).unwrap();
        let dx = g.dx();
        let w = VectorField::from_fn(g, |x, _, out| out[0] = (2.0 * PI * x[0]).sin());
        let div = g.divergence(&w, 0).unwrap();
        for (i, di) in div.iter().enumerate() {
            let x = i as f64 * dx;
            let expected = (2.0 * PI * x).cos() * (2.0 * PI * dx).sin() / dx;
            assert!((di - expected).abs() < 1e-12);
        }
        let c = VectorField::from_fn(g, |_, _, out| out[0] = 2.5);
        assert!(g.divergence(&c, 2).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cyclic_solver_inverts_operator() {
        for &(dim, nx) in &[(1usize, 4usize), (1, 37), (1, 128), (2, 12)] {
            let g = TorusGrid::new(dim, nx, 4, 1.0).unwrap();
            let k = ImplicitDiffusion::new(g, 0.3 * g.dt()).unwrap();
            let rhs: Vec<f64> = (0..g.nodes()).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
            let mut x = vec![0.0; g.nodes()];
            k.solve(&rhs, &mut x).unwrap();
            let mut back = vec![0.0; g.nodes()];
            k.apply(&x, &mut back);
            for (a, b) in back.iter().zip(&rhs) {
                assert!((a - b).abs() < 1e-11, "{dim}d nx={nx}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1.0, 1e-16, 1e-16, -1.0];
        assert_eq!(compensated_sum(v), 2e-16);
    }
}
