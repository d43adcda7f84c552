//! Problem data: running cost and Hamiltonian, congestion and price couplings
//! with their potentials, the aggregation operator, initial density and
//! terminal cost.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{compensated_sum, ImplicitDiffusion, Point, ScalarField, TorusGrid, VectorField};

/// Analytic spatial profile used for `m0`, `g`, the potential `ℓ` and the
/// aggregation kernel entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Uniform {
        #[serde(default = "one")]
        value: f64,
    },
    /// `base + amplitude * cos(2π k·(x - center))`.
    Cosine {
        #[serde(default)]
        base: f64,
        amplitude: f64,
        #[serde(default = "unit_wavevector")]
        wavevector: [i64; 2],
        #[serde(default)]
        center: [f64; 2],
    },
    /// `base + amplitude * exp(κ Σ_axis (cos 2π(x_a - c_a) - 1))`.
    VonMises {
        #[serde(default)]
        base: f64,
        amplitude: f64,
        concentration: f64,
        #[serde(default)]
        center: [f64; 2],
    },
}

fn one() -> f64 {
    1.0
}

fn unit_wavevector() -> [i64; 2] {
    [1, 0]
}

impl Profile {
    pub fn constant(value: f64) -> Self {
        Profile::Uniform { value }
    }

    pub fn cosine(base: f64, amplitude: f64, center: f64) -> Self {
        Profile::Cosine {
            base,
            amplitude,
            wavevector: [1, 0],
            center: [center, 0.0],
        }
    }

    pub fn eval(&self, x: &Point, dim: usize) -> f64 {
        match self {
            Profile::Uniform { value } => *value,
            Profile::Cosine {
                base,
                amplitude,
                wavevector,
                center,
            } => {
                let phase: f64 = (0..dim)
                    .map(|a| wavevector[a] as f64 * (x[a] - center[a]))
                    .sum();
                base + amplitude * (2.0 * PI * phase).cos()
            }
            Profile::VonMises {
                base,
                amplitude,
                concentration,
                center,
            } => {
                let e: f64 = (0..dim)
                    .map(|a| (2.0 * PI * (x[a] - center[a])).cos() - 1.0)
                    .sum();
                base + amplitude * (concentration * e).exp()
            }
        }
    }

    /// Upper bound on the Lipschitz constant.
    pub fn lipschitz_bound(&self, dim: usize) -> f64 {
        match self {
            Profile::Uniform { .. } => 0.0,
            Profile::Cosine {
                amplitude,
                wavevector,
                ..
            } => {
                let k: f64 = (0..dim).map(|a| (wavevector[a] as f64).powi(2)).sum::<f64>().sqrt();
                2.0 * PI * k * amplitude.abs()
            }
            Profile::VonMises {
                amplitude,
                concentration,
                ..
            } => 2.0 * PI * (dim as f64).sqrt() * concentration.abs() * amplitude.abs(),
        }
    }

    pub fn sample(&self, grid: &TorusGrid) -> Vec<f64> {
        (0..grid.nodes())
            .map(|n| self.eval(&grid.coords(n), grid.dim()))
            .collect()
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        let finite = match self {
            Profile::Uniform { value } => value.is_finite(),
            Profile::Cosine {
                base,
                amplitude,
                center,
                ..
            } => base.is_finite() && amplitude.is_finite() && center.iter().all(|c| c.is_finite()),
            Profile::VonMises {
                base,
                amplitude,
                concentration,
                center,
            } => {
                base.is_finite()
                    && amplitude.is_finite()
                    && concentration.is_finite()
                    && center.iter().all(|c| c.is_finite())
            }
        };
        if finite {
            Ok(())
        } else {
            Err(Error::Config(format!("{what}: profile parameters must be finite")))
        }
    }
}

/// User-supplied control cost `L(x, t, v)`, strongly convex in `v`.
pub trait ControlCost: Send + Sync + fmt::Debug {
    fn value(&self, x: &Point, t: f64, v: &[f64]) -> f64;
    fn gradient(&self, x: &Point, t: f64, v: &[f64], out: &mut [f64]);
    /// Row-major `d x d` Hessian in `v`.
    fn hessian(&self, x: &Point, t: f64, v: &[f64], out: &mut [f64]);
    /// Strong convexity modulus `1/C0`.
    fn convexity(&self) -> f64;
    /// For radial costs `L = ψ(|v|) + c(x, t)`, returns `(ψ'(r), ψ''(r))`.
    fn radial_derivatives(&self, _x: &Point, _t: f64, _r: f64) -> Option<(f64, f64)> {
        None
    }
}

/// `L(v) = (quartic/4)|v|^4 + (quadratic/2)|v|^2 + ℓ(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCost {
    pub quartic: f64,
    pub quadratic: f64,
    pub offset: Profile,
    pub dim: usize,
}

impl ControlCost for PowerCost {
    fn value(&self, x: &Point, _t: f64, v: &[f64]) -> f64 {
        let r2: f64 = v.iter().map(|c| c * c).sum();
        0.25 * self.quartic * r2 * r2 + 0.5 * self.quadratic * r2 + self.offset.eval(x, self.dim)
    }

    fn gradient(&self, _x: &Point, _t: f64, v: &[f64], out: &mut [f64]) {
        let r2: f64 = v.iter().map(|c| c * c).sum();
        for (o, c) in out.iter_mut().zip(v) {
            *o = (self.quartic * r2 + self.quadratic) * c;
        }
    }

    fn hessian(&self, _x: &Point, _t: f64, v: &[f64], out: &mut [f64]) {
        let d = v.len();
        let r2: f64 = v.iter().map(|c| c * c).sum();
        for i in 0..d {
            for j in 0..d {
                let diag = if i == j { self.quartic * r2 + self.quadratic } else { 0.0 };
                out[i * d + j] = diag + 2.0 * self.quartic * v[i] * v[j];
            }
        }
    }

    fn convexity(&self) -> f64 {
        self.quadratic
    }

    fn radial_derivatives(&self, _x: &Point, _t: f64, r: f64) -> Option<(f64, f64)> {
        Some((
            self.quartic * r * r * r + self.quadratic * r,
            3.0 * self.quartic * r * r + self.quadratic,
        ))
    }
}

/// Running cost `L(x, t, v)`.
#[derive(Debug, Clone)]
pub enum RunningCost {
    /// `(weight/2)|v|^2 + ℓ(x)`.
    QuadraticPlus { weight: f64, offset: Profile },
    Custom(Arc<dyn ControlCost>),
}

impl RunningCost {
    pub fn quadratic(weight: f64, offset: Profile) -> Self {
        RunningCost::QuadraticPlus { weight, offset }
    }

    pub fn value(&self, x: &Point, t: f64, v: &[f64], dim: usize) -> f64 {
        match self {
            RunningCost::QuadraticPlus { weight, offset } => {
                let r2: f64 = v.iter().map(|c| c * c).sum();
                0.5 * weight * r2 + offset.eval(x, dim)
            }
            RunningCost::Custom(c) => c.value(x, t, v),
        }
    }

    pub fn gradient(&self, x: &Point, t: f64, v: &[f64], out: &mut [f64]) {
        match self {
            RunningCost::QuadraticPlus { weight, .. } => {
                for (o, c) in out.iter_mut().zip(v) {
                    *o = weight * c;
                }
            }
            RunningCost::Custom(c) => c.gradient(x, t, v, out),
        }
    }

    /// Strong convexity modulus `1/C0`.
    pub fn convexity(&self) -> f64 {
        match self {
            RunningCost::QuadraticPlus { weight, .. } => *weight,
            RunningCost::Custom(c) => c.convexity(),
        }
    }

    /// Perspective function `m L(x, t, w/m)`, `0` at `(0, 0)`, `+∞` for
    /// `m = 0, w ≠ 0`.
    pub fn perspective(&self, m: f64, w: &[f64], x: &Point, t: f64, dim: usize) -> Result<f64> {
        if m < 0.0 || m.is_nan() {
            return Err(Error::Domain(format!("perspective cost needs m >= 0, got {m}")));
        }
        if m == 0.0 {
            return Ok(if w.iter().all(|c| *c == 0.0) { 0.0 } else { f64::INFINITY });
        }
        let mut v: Point = [0.0; 2];
        for (vi, wi) in v.iter_mut().zip(w) {
            *vi = wi / m;
        }
        Ok(m * self.value(x, t, &v[..w.len()], dim))
    }

    fn validate(&self) -> Result<()> {
        match self {
            RunningCost::QuadraticPlus { weight, offset } => {
                if !(weight.is_finite() && *weight > 0.0) {
                    return Err(Error::Config(format!(
                        "quadratic cost weight must be positive, got {weight}"
                    )));
                }
                offset.validate("running cost offset")
            }
            RunningCost::Custom(c) => {
                let a = c.convexity();
                if a.is_finite() && a > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "custom cost must be strongly convex, modulus {a}"
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 50,
        }
    }
}

/// `H(x, t, p) = sup_v -<p, v> - L(x, t, v)` together with `H_p = -v*`.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    cost: RunningCost,
    newton: NewtonConfig,
    dim: usize,
}

impl Hamiltonian {
    pub fn new(cost: RunningCost, newton: NewtonConfig, dim: usize) -> Self {
        Self { cost, newton, dim }
    }

    pub fn cost(&self) -> &RunningCost {
        &self.cost
    }

    pub fn newton(&self) -> NewtonConfig {
        self.newton
    }

    pub fn eval(&self, x: &Point, t: f64, p: &[f64]) -> Result<(f64, Point)> {
        match &self.cost {
            RunningCost::QuadraticPlus { weight, offset } => {
                Ok(quadratic_hamiltonian(*weight, offset.eval(x, self.dim), p))
            }
            RunningCost::Custom(c) => self.legendre(c.as_ref(), x, t, p),
        }
    }

    fn legendre(&self, cost: &dyn ControlCost, x: &Point, t: f64, p: &[f64]) -> Result<(f64, Point)> {
        let d = p.len();
        let v = match radial_root(cost, x, t, p, self.newton)? {
            Some(v) => v,
            None => damped_newton(cost, x, t, p, self.newton)?,
        };
        let h = -p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() - cost.value(x, t, &v[..d]);
        Ok((h, [-v[0], -v[1]]))
    }
}

pub(crate) fn quadratic_hamiltonian(weight: f64, offset: f64, p: &[f64]) -> (f64, Point) {
    let r2: f64 = p.iter().map(|c| c * c).sum();
    let mut hp = [0.0; 2];
    for (h, c) in hp.iter_mut().zip(p) {
        *h = c / weight;
    }
    (0.5 * r2 / weight - offset, hp)
}

// Solves ψ'(s) = |p| with a Newton step safeguarded by a bisection bracket.
fn radial_root(
    cost: &dyn ControlCost,
    x: &Point,
    t: f64,
    p: &[f64],
    cfg: NewtonConfig,
) -> Result<Option<Point>> {
    let r: f64 = p.iter().map(|c| c * c).sum::<f64>().sqrt();
    if cost.radial_derivatives(x, t, 0.0).is_none() {
        return Ok(None);
    }
    if r == 0.0 {
        return Ok(Some([0.0; 2]));
    }
    let target = r;
    let mut lo = 0.0;
    let mut hi = 1.0_f64;
    let mut grow = 0;
    while cost.radial_derivatives(x, t, hi).map_or(0.0, |d| d.0) < target {
        hi *= 2.0;
        grow += 1;
        if grow > 200 {
            return Err(Error::Solver(format!("radial Legendre bracket failed for |p| = {r}")));
        }
    }
    let mut s = 0.5 * hi;
    for _ in 0..cfg.max_iterations * 4 {
        let (d1, d2) = cost.radial_derivatives(x, t, s).expect("radial cost");
        let f = d1 - target;
        if f.abs() <= cfg.tolerance * target.max(1.0) {
            let scale = -s / r;
            return Ok(Some([scale * p[0], if p.len() > 1 { scale * p[1] } else { 0.0 }]));
        }
        if f > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let newton = s - f / d2;
        s = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Err(Error::Solver(format!(
        "radial Legendre solve did not converge for |p| = {r}"
    )))
}

fn damped_newton(cost: &dyn ControlCost, x: &Point, t: f64, p: &[f64], cfg: NewtonConfig) -> Result<Point> {
    let d = p.len();
    let objective = |v: &[f64]| cost.value(x, t, v) + p.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let mut v = [0.0; 2];
    let mut grad = [0.0; 2];
    let mut hess = [0.0; 4];
    for _ in 0..cfg.max_iterations {
        cost.gradient(x, t, &v[..d], &mut grad[..d]);
        for i in 0..d {
            grad[i] += p[i];
        }
        let gnorm: f64 = grad[..d].iter().map(|c| c * c).sum::<f64>().sqrt();
        let pnorm: f64 = p.iter().map(|c| c * c).sum::<f64>().sqrt();
        if gnorm <= cfg.tolerance * pnorm.max(1.0) {
            return Ok(v);
        }
        cost.hessian(x, t, &v[..d], &mut hess[..d * d]);
        let step = if d == 1 {
            [grad[0] / hess[0], 0.0]
        } else {
            let det = hess[0] * hess[3] - hess[1] * hess[2];
            [
                (hess[3] * grad[0] - hess[1] * grad[1]) / det,
                (hess[0] * grad[1] - hess[2] * grad[0]) / det,
            ]
        };
        let f0 = objective(&v[..d]);
        let slope: f64 = -(0..d).map(|i| grad[i] * step[i]).sum::<f64>();
        let mut alpha = 1.0;
        loop {
            let trial = [v[0] - alpha * step[0], v[1] - alpha * step[1]];
            if objective(&trial[..d]) <= f0 + 1e-4 * alpha * slope || alpha < 1e-10 {
                v = trial;
                break;
            }
            alpha *= 0.5;
        }
    }
    Err(Error::Solver("damped Newton Legendre solve did not converge".into()))
}

/// One Fourier mode `c_k` of the smoothing kernel; `k` and `-k` are implied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelMode {
    pub wavevector: [i64; 2],
    pub coefficient: f64,
}

/// Symmetric unit-mass smoothing kernel `ρ` with nonnegative Fourier symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SmoothingKernel {
    /// No congestion: `f ≡ 0`.
    Zero,
    /// Discrete delta: `f(m) = m`.
    Delta,
    /// `ρ(x) = 1 + Σ w_k c_k cos(2π k·x)` with `w_k = 2` except on
    /// self-aliased (Nyquist) modes.
    Fourier { modes: Vec<KernelMode> },
}

#[derive(Debug, Clone)]
struct ModeTable {
    coefficient: f64,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

/// Grid-bound evaluator of `m ↦ ρ * m`.
#[derive(Debug, Clone)]
pub struct Convolution {
    grid: TorusGrid,
    modes: Option<Vec<ModeTable>>,
    sup: f64,
    zero: bool,
}

impl Convolution {
    fn new(grid: &TorusGrid, kernel: &SmoothingKernel) -> Result<Self> {
        let modes = match kernel {
            SmoothingKernel::Zero => {
                return Ok(Self {
                    grid: *grid,
                    modes: None,
                    sup: 0.0,
                    zero: true,
                })
            }
            SmoothingKernel::Delta => {
                return Ok(Self {
                    grid: *grid,
                    modes: None,
                    sup: 1.0 / grid.cell_volume(),
                    zero: false,
                })
            }
            SmoothingKernel::Fourier { modes } => modes,
        };
        let nx = grid.nx() as i64;
        let dim = grid.dim();
        let mut seen: Vec<[i64; 2]> = Vec::new();
        let mut tables = Vec::with_capacity(modes.len());
        for mode in modes {
            if !(mode.coefficient.is_finite() && mode.coefficient >= 0.0) {
                return Err(Error::Config(format!(
                    "kernel Fourier coefficients must be nonnegative, got {}",
                    mode.coefficient
                )));
            }
            let mut k = mode.wavevector;
            if dim == 1 {
                k[1] = 0;
            }
            let canon = |k: [i64; 2]| [k[0].rem_euclid(nx), k[1].rem_euclid(nx)];
            let plus = canon(k);
            let minus = canon([-k[0], -k[1]]);
            if plus == [0, 0] {
                return Err(Error::Config("kernel mode 0 is fixed to 1 (unit mass)".into()));
            }
            if seen.contains(&plus) || seen.contains(&minus) {
                return Err(Error::Config(format!("kernel mode {k:?} listed twice (mod aliasing)")));
            }
            seen.push(plus);
            seen.push(minus);
            let weight = if plus == minus { 1.0 } else { 2.0 };
            let (cos, sin): (Vec<f64>, Vec<f64>) = (0..grid.nodes())
                .map(|n| {
                    let x = grid.coords(n);
                    let theta = 2.0 * PI * (k[0] as f64 * x[0] + k[1] as f64 * x[1]);
                    (theta.cos(), theta.sin())
                })
                .unzip();
            tables.push(ModeTable {
                coefficient: weight * mode.coefficient,
                cos,
                sin,
            });
        }
        let mut conv = Self {
            grid: *grid,
            modes: Some(tables),
            sup: 0.0,
            zero: false,
        };
        let values = conv.kernel_values();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -1e-12 {
            return Err(Error::Config(format!(
                "smoothing kernel takes negative value {min:.3e} on the grid"
            )));
        }
        conv.sup = values.iter().copied().fold(0.0, f64::max);
        Ok(conv)
    }

    /// Kernel values `ρ(x_j)` on the grid nodes.
    pub fn kernel_values(&self) -> Vec<f64> {
        match &self.modes {
            None => {
                let mut v = vec![0.0; self.grid.nodes()];
                if !self.zero {
                    v[0] = 1.0 / self.grid.cell_volume();
                }
                v
            }
            Some(tables) => (0..self.grid.nodes())
                .map(|n| 1.0 + tables.iter().map(|t| t.coefficient * t.cos[n]).sum::<f64>())
                .collect(),
        }
    }

    /// `sup ρ`, the bound on `|f|` for probability densities.
    pub fn sup(&self) -> f64 {
        self.sup
    }

    pub fn apply(&self, m: &[f64], out: &mut [f64]) {
        if self.zero {
            out.fill(0.0);
            return;
        }
        let Some(tables) = &self.modes else {
            out.copy_from_slice(m);
            return;
        };
        let vol = self.grid.cell_volume();
        let mass = self.grid.integrate(m);
        out.fill(mass);
        for t in tables {
            let c: f64 = vol * t.cos.iter().zip(m).map(|(a, b)| a * b).sum::<f64>();
            let s: f64 = vol * t.sin.iter().zip(m).map(|(a, b)| a * b).sum::<f64>();
            for (n, o) in out.iter_mut().enumerate() {
                *o += t.coefficient * (t.cos[n] * c + t.sin[n] * s);
            }
        }
    }
}

/// Price map `φ(t, z) = π0(t) + η tanh(z)` with `π0(t) = base + slope t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSpec {
    pub base: Vec<f64>,
    #[serde(default)]
    pub slope: Vec<f64>,
    pub gain: f64,
}

impl PriceSpec {
    pub fn components(&self) -> usize {
        self.base.len()
    }

    pub fn base_at(&self, t: f64, j: usize) -> f64 {
        self.base[j] + self.slope.get(j).copied().unwrap_or(0.0) * t
    }

    /// `φ(t, z)`.
    pub fn price(&self, t: f64, z: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.base_at(t, j) + self.gain * z[j].tanh();
        }
    }

    /// `Φ(t, z) = <π0(t), z> + η Σ log cosh z_j`.
    pub fn potential(&self, t: f64, z: &[f64]) -> f64 {
        z.iter()
            .enumerate()
            .map(|(j, zj)| self.base_at(t, j) * zj + self.gain * log_cosh(*zj))
            .sum()
    }

    /// Bound on `|φ|` over `[0, horizon]`.
    pub fn sup(&self, horizon: f64) -> f64 {
        (0..self.components())
            .map(|j| self.base_at(0.0, j).abs().max(self.base_at(horizon, j).abs()))
            .fold(0.0, f64::max)
            + self.gain
    }

    fn validate(&self) -> Result<()> {
        if self.base.is_empty() {
            return Err(Error::Config("price needs at least one component".into()));
        }
        if !self.slope.is_empty() && self.slope.len() != self.base.len() {
            return Err(Error::Config("price slope length differs from base".into()));
        }
        if !(self.gain.is_finite() && self.gain >= 0.0) {
            return Err(Error::Config(format!("price gain must be >= 0, got {}", self.gain)));
        }
        if self.base.iter().chain(&self.slope).any(|v| !v.is_finite()) {
            return Err(Error::Config("price base curve must be finite".into()));
        }
        Ok(())
    }
}

fn log_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Aggregation kernel `a(x) ∈ R^{k x d}`, row-major profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationSpec {
    pub rows: usize,
    pub entries: Vec<Profile>,
}

/// Congestion, price and aggregation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    pub kernel: SmoothingKernel,
    pub price: PriceSpec,
    pub aggregation: AggregationSpec,
}

/// A curve `t_level ↦ R^k` (aggregate signal or price).
#[derive(Debug, Clone, PartialEq)]
pub struct PriceCurve {
    k: usize,
    values: Vec<f64>,
}

impl PriceCurve {
    pub fn zeros(k: usize, levels: usize) -> Self {
        Self {
            k,
            values: vec![0.0; k * levels],
        }
    }

    pub fn from_values(k: usize, values: Vec<f64>) -> Result<Self> {
        if k == 0 || !values.len().is_multiple_of(k) {
            return Err(Error::GridMismatch(format!(
                "price curve of {} values is not a multiple of k = {k}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "price curve",
                level: values.iter().position(|v| !v.is_finite()).unwrap_or(0) / k,
            });
        }
        Ok(Self { k, values })
    }

    pub fn components(&self) -> usize {
        self.k
    }

    pub fn levels(&self) -> usize {
        self.values.len() / self.k
    }

    pub fn at(&self, level: usize) -> &[f64] {
        &self.values[level * self.k..(level + 1) * self.k]
    }

    pub fn at_mut(&mut self, level: usize) -> &mut [f64] {
        &mut self.values[level * self.k..(level + 1) * self.k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Complete problem data on a grid.
#[derive(Debug, Clone)]
pub struct MfgProblem {
    grid: TorusGrid,
    ham: Hamiltonian,
    coupling: CouplingSpec,
    m0: Vec<f64>,
    g: Vec<f64>,
    viscosity: f64,
    offset_nodes: Option<Vec<f64>>,
    agg_nodes: Vec<f64>,
    conv: Convolution,
    diffusion: ImplicitDiffusion,
}

/// Input to [`MfgProblem::new`].
#[derive(Debug, Clone)]
pub struct ProblemData {
    pub grid: TorusGrid,
    pub cost: RunningCost,
    pub newton: NewtonConfig,
    pub coupling: CouplingSpec,
    /// Initial density samples; rescaled to unit mass.
    pub m0: Vec<f64>,
    pub g: Vec<f64>,
    pub viscosity: f64,
}

impl MfgProblem {
    pub fn new(data: ProblemData) -> Result<Self> {
        let ProblemData {
            grid,
            cost,
            newton,
            coupling,
            mut m0,
            g,
            viscosity,
        } = data;
        cost.validate()?;
        coupling.price.validate()?;
        if !(viscosity.is_finite() && viscosity >= 0.0) {
            return Err(Error::Config(format!("viscosity must be >= 0, got {viscosity}")));
        }
        let nodes = grid.nodes();
        if m0.len() != nodes || g.len() != nodes {
            return Err(Error::GridMismatch(format!(
                "m0/g need {nodes} samples, got {}/{}",
                m0.len(),
                g.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("terminal cost g must be finite".into()));
        }
        if m0.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config("m0 not strictly positive".into()));
        }
        let mass = grid.integrate(&m0);
        for v in &mut m0 {
            *v /= mass;
        }
        let agg = &coupling.aggregation;
        if agg.rows != coupling.price.components() || agg.entries.len() != agg.rows * grid.dim() {
            return Err(Error::Config(format!(
                "aggregation kernel must be {} x {} to match the price dimension",
                coupling.price.components(),
                grid.dim()
            )));
        }
        for e in &agg.entries {
            e.validate("aggregation kernel")?;
        }
        let kd = agg.entries.len();
        let mut agg_nodes = vec![0.0; nodes * kd];
        for n in 0..nodes {
            let x = grid.coords(n);
            for (e, p) in agg.entries.iter().enumerate() {
                agg_nodes[n * kd + e] = p.eval(&x, grid.dim());
            }
        }
        let offset_nodes = match &cost {
            RunningCost::QuadraticPlus { offset, .. } => Some(offset.sample(&grid)),
            RunningCost::Custom(_) => None,
        };
        let conv = Convolution::new(&grid, &coupling.kernel)?;
        let diffusion = ImplicitDiffusion::new(grid, grid.dt() * viscosity)?;
        Ok(Self {
            grid,
            ham: Hamiltonian::new(cost, newton, grid.dim()),
            coupling,
            m0,
            g,
            viscosity,
            offset_nodes,
            agg_nodes,
            conv,
            diffusion,
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn hamiltonian(&self) -> &Hamiltonian {
        &self.ham
    }

    pub fn cost(&self) -> &RunningCost {
        self.ham.cost()
    }

    pub fn coupling(&self) -> &CouplingSpec {
        &self.coupling
    }

    pub fn m0(&self) -> &[f64] {
        &self.m0
    }

    pub fn terminal_cost(&self) -> &[f64] {
        &self.g
    }

    pub fn viscosity(&self) -> f64 {
        self.viscosity
    }

    pub fn k_agg(&self) -> usize {
        self.coupling.price.components()
    }

    pub fn diffusion(&self) -> &ImplicitDiffusion {
        &self.diffusion
    }

    pub fn convolution(&self) -> &Convolution {
        &self.conv
    }

    /// `H` and `H_p` at a grid node.
    pub fn hamiltonian_at_node(&self, level: usize, node: usize, p: &[f64]) -> Result<(f64, Point)> {
        match (&self.offset_nodes, self.ham.cost()) {
            (Some(off), RunningCost::QuadraticPlus { weight, .. }) => {
                Ok(quadratic_hamiltonian(*weight, off[node], p))
            }
            _ => self
                .ham
                .eval(&self.grid.coords(node), self.grid.time(level), p),
        }
    }

    pub fn perspective_at_node(&self, level: usize, node: usize, m: f64, w: &[f64]) -> Result<f64> {
        let dim = self.grid.dim();
        match (&self.offset_nodes, self.ham.cost()) {
            (Some(off), RunningCost::QuadraticPlus { weight, .. }) => {
                if m < 0.0 || m.is_nan() {
                    return Err(Error::Domain(format!("perspective cost needs m >= 0, got {m}")));
                }
                if m == 0.0 {
                    return Ok(if w.iter().all(|c| *c == 0.0) { 0.0 } else { f64::INFINITY });
                }
                let w2: f64 = w.iter().map(|c| c * c).sum();
                Ok(0.5 * weight * w2 / m + off[node] * m)
            }
            _ => self.ham.cost().perspective(
                m,
                w,
                &self.grid.coords(node),
                self.grid.time(level),
                dim,
            ),
        }
    }

    /// Aggregation kernel `a(x_node)` as a row-major `k x d` slice.
    pub fn aggregation_at_node(&self, node: usize) -> &[f64] {
        let kd = self.k_agg() * self.grid.dim();
        &self.agg_nodes[node * kd..(node + 1) * kd]
    }

    /// `a(x)^T P` written into `out` (length `d`).
    pub fn adjoint_price_at_node(&self, node: usize, price: &[f64], out: &mut [f64]) {
        let d = self.grid.dim();
        let a = self.aggregation_at_node(node);
        for (c, o) in out.iter_mut().enumerate() {
            *o = (0..price.len()).map(|r| a[r * d + c] * price[r]).sum();
        }
    }

    /// `a(x)^T P` at an arbitrary point.
    pub fn adjoint_price_at(&self, x: &Point, price: &[f64], out: &mut [f64]) {
        let d = self.grid.dim();
        let entries = &self.coupling.aggregation.entries;
        for (c, o) in out.iter_mut().enumerate() {
            *o = (0..price.len())
                .map(|r| entries[r * d + c].eval(x, d) * price[r])
                .sum();
        }
    }

    /// `γ(x, t) = (ρ * m(t))(x)` at every level.
    pub fn congestion_field(&self, m: &ScalarField) -> Result<ScalarField> {
        self.grid.check_same(m.grid())?;
        let mut out = ScalarField::zeros(self.grid);
        for level in 0..self.grid.levels() {
            self.conv.apply(m.level(level), out.level_mut(level));
        }
        Ok(out)
    }

    /// `F(m(t)) = ½ ∫ (ρ * m) m dx` at one level.
    pub fn potential_f(&self, m: &ScalarField, t_level: usize) -> Result<f64> {
        self.grid.check_same(m.grid())?;
        self.grid.check_level(t_level)?;
        Ok(self.potential_f_level(m.level(t_level)))
    }

    pub(crate) fn potential_f_level(&self, m: &[f64]) -> f64 {
        let mut gamma = vec![0.0; m.len()];
        self.conv.apply(m, &mut gamma);
        0.5 * self.grid.cell_volume() * compensated_sum(gamma.iter().zip(m).map(|(a, b)| a * b))
    }

    pub fn potential_phi(&self, z: &[f64], t: f64) -> f64 {
        self.coupling.price.potential(t, z)
    }

    pub fn price(&self, t: f64, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.coupling.price.price(t, z, &mut out);
        out
    }

    /// `A[w](t) = ∫ a(x, t) w(x, t) dx` at every level.
    pub fn aggregate(&self, w: &VectorField) -> Result<PriceCurve> {
        self.grid.check_same(w.grid())?;
        let k = self.k_agg();
        let mut out = PriceCurve::zeros(k, self.grid.levels());
        for level in 0..self.grid.levels() {
            self.aggregate_level(w.level(level), out.at_mut(level));
        }
        Ok(out)
    }

    pub(crate) fn aggregate_level(&self, w: &[f64], out: &mut [f64]) {
        let d = self.grid.dim();
        let vol = self.grid.cell_volume();
        for (r, o) in out.iter_mut().enumerate() {
            *o = vol
                * compensated_sum((0..self.grid.nodes()).flat_map(|n| {
                    let a = self.aggregation_at_node(n);
                    (0..d).map(move |c| a[r * d + c] * w[n * d + c])
                }));
        }
    }

    /// `A*[P](x, t) = a(x, t)^T P(t)`.
    pub fn adjoint_price(&self, price: &PriceCurve) -> Result<VectorField> {
        if price.levels() != self.grid.levels() || price.components() != self.k_agg() {
            return Err(Error::GridMismatch("price curve does not match the problem".into()));
        }
        let d = self.grid.dim();
        let mut out = VectorField::zeros(self.grid);
        for level in 0..self.grid.levels() {
            let slab = out.level_mut(level);
            for n in 0..self.grid.nodes() {
                self.adjoint_price_at_node(n, price.at(level), &mut slab[n * d..(n + 1) * d]);
            }
        }
        Ok(out)
    }

    /// `inf_{x,t} m0 > 0`.
    pub fn m0_floor(&self) -> f64 {
        self.m0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Per-step positivity factor of the transport-diffusion update at drift
    /// bound `vmax`: values below one make the update entrywise positive.
    pub fn positivity_factor(&self, vmax: f64) -> f64 {
        let courant = self.grid.dt() * vmax / self.grid.dx();
        let mu = self.viscosity * self.grid.dt() / (self.grid.dx() * self.grid.dx());
        if mu == 0.0 {
            return f64::INFINITY;
        }
        0.5 * courant * (4.0 / mu + 1.0 / (mu * mu)).sqrt()
    }
}
