#![allow(dead_code)]

use mfg_gcg::config::{ExperimentConfig, RunningCostConfig};
use mfg_gcg::model::{MfgProblem, PriceSpec, Profile, SmoothingKernel};

/// `f ≡ 0`, `P ≡ 0`, `g ≡ 0`, `ℓ ≡ 0`: only the kinetic cost remains.
pub fn trivial_config(nx: usize, nt: usize) -> ExperimentConfig {
    let mut c = small_config(nx, nt);
    c.kernel = SmoothingKernel::Zero;
    c.price = PriceSpec {
        base: vec![0.0],
        slope: vec![],
        gain: 0.0,
    };
    c.running_cost = RunningCostConfig::Quadratic {
        weight: 1.0,
        offset: Profile::constant(0.0),
    };
    c.g = Profile::constant(0.0);
    c
}

/// The default problem on a coarser grid.
pub fn small_config(nx: usize, nt: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.grid.nx = nx;
    c.grid.nt = nt;
    c.monte_carlo.paths = 0;
    c
}

pub fn problem(c: &ExperimentConfig) -> MfgProblem {
    c.problem().expect("valid problem")
}
