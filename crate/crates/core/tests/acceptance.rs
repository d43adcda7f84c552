//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! nonzero status if any criterion fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use mfg_gcg::cli::{mc_tolerance, run_experiment, Overrides};
use mfg_gcg::config::ExperimentConfig;
use mfg_gcg::diagnostics::{
    descent_violations, fill_primal_gap, fit_descent_constant, fit_rate, make_reference, max_over_median,
    monte_carlo_value, sqrt_gap_ratios, value_at, Metric, ReferenceSolution,
};
use mfg_gcg::fokker_planck::solve_fp;
use mfg_gcg::gcg::{best_response, run, IterateRecord, RunOptions, StepSchedule};
use mfg_gcg::hjb::{solve_hjb, CouplingState};
use mfg_gcg::model::{
    AggregationSpec, CouplingSpec, MfgProblem, NewtonConfig, PowerCost, PriceCurve, PriceSpec, ProblemData,
    Profile, RunningCost, SmoothingKernel,
};
use mfg_gcg::{ScalarField, TorusGrid, VectorField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N_ITERS: usize = 256;
const REFERENCE_BUDGET: usize = 2560;
const RATE_WINDOW: (usize, usize) = (16, 256);
const RATIO_WINDOW: (usize, usize) = (4, 256);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn default_problem() -> MfgProblem {
    ExperimentConfig::default().problem().expect("default problem")
}

fn small_problem(dim: usize, nx: usize, nt: usize, cost: RunningCost, a: Vec<Profile>) -> MfgProblem {
    let grid = TorusGrid::new(dim, nx, nt, 1.0).unwrap();
    MfgProblem::new(ProblemData {
        grid,
        cost,
        newton: NewtonConfig::default(),
        coupling: CouplingSpec {
            kernel: SmoothingKernel::Delta,
            price: PriceSpec {
                base: vec![0.1],
                slope: vec![],
                gain: 0.5,
            },
            aggregation: AggregationSpec { rows: 1, entries: a },
        },
        m0: Profile::cosine(1.0, 0.5, 0.25).sample(&grid),
        g: Profile::cosine(0.0, 0.1, 0.0).sample(&grid),
        viscosity: 1.0,
    })
    .unwrap()
}

fn fenchel() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let quadratic = default_problem();
    let power = small_problem(
        2,
        8,
        4,
        RunningCost::Custom(Arc::new(PowerCost {
            quartic: 0.5,
            quadratic: 1.0,
            offset: Profile::cosine(0.0, 0.2, 0.1),
            dim: 2,
        })),
        vec![Profile::constant(0.3), Profile::constant(0.1)],
    );
    let (mut worst_eq, mut worst_slack) = (0.0_f64, f64::INFINITY);
    for problem in [&quadratic, &power] {
        let d = problem.grid().dim();
        let ham = problem.hamiltonian();
        for _ in 0..1000 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let t = rng.random::<f64>();
            let p: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (h, hp) = ham.eval(&x, t, &p).unwrap();
            let v: Vec<f64> = hp[..d].iter().map(|c| -c).collect();
            let pv: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
            worst_eq = worst_eq.max((h + ham.cost().value(&x, t, &v, d) + pv).abs());
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
            let pw: f64 = p.iter().zip(&w).map(|(a, b)| a * b).sum();
            worst_slack = worst_slack.min(h + ham.cost().value(&x, t, &w, d) + pw);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_eq <= 1e-10 && worst_slack >= -1e-10 && secs < 1.0,
        format!("max |H + L(v*) + <p,v*>| = {worst_eq:.2e}, min slack = {worst_slack:.2e}, {secs:.3} s"),
    )
}

fn random_coupling(problem: &MfgProblem, rng: &mut ChaCha8Rng) -> CouplingState {
    let grid = *problem.grid();
    let (a1, a2, ph, c) = (
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.3..0.3),
        rng.random::<f64>(),
        rng.random_range(0.5..1.5),
    );
    let gamma = ScalarField::from_fn(grid, |x, t| {
        c + a1 * (2.0 * PI * (x[0] - ph)).cos() * (1.0 - t) + a2 * (4.0 * PI * (x[0] + x[1] + t)).sin()
    });
    let (p0, p1) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let mut price = PriceCurve::zeros(problem.k_agg(), grid.levels());
    for n in 0..grid.levels() {
        price.at_mut(n)[0] = p0 + p1 * (PI * grid.time(n)).cos();
    }
    CouplingState::new(gamma, price).unwrap()
}

fn check_flow(problem: &MfgProblem, m: &ScalarField) -> (f64, f64) {
    let grid = problem.grid();
    let mass_err = (0..grid.levels())
        .map(|n| (grid.integrate(m.level(n)) - 1.0).abs())
        .fold(0.0, f64::max);
    (mass_err, m.min())
}

fn conservation_positivity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_mass = 0.0_f64;
    let mut min_m = f64::INFINITY;
    let mut solves = 0;
    let problems = [
        default_problem(),
        small_problem(
            2,
            24,
            24,
            RunningCost::quadratic(1.0, Profile::cosine(0.0, 0.2, 0.0)),
            vec![Profile::constant(0.3), Profile::cosine(0.0, 0.2, 0.5)],
        ),
    ];
    for problem in &problems {
        for _ in 0..10 {
            let response = best_response(problem, &random_coupling(problem, &mut rng)).unwrap();
            let (e, m) = check_flow(problem, &response.pair.m);
            worst_mass = worst_mass.max(e);
            min_m = min_m.min(m);
            solves += 1;
        }
    }
    // drift-bounded flows against the exponential lower bound
    let mut worst_shadow = f64::INFINITY;
    for problem in &problems {
        let grid = *problem.grid();
        let eps0 = problem.m0_floor();
        for _ in 0..10 {
            let (amp, ph, om) = (
                rng.random_range(0.2..0.9),
                rng.random::<f64>(),
                rng.random_range(0.0..2.0),
            );
            let d = grid.dim();
            let v = VectorField::from_fn(grid, |x, t, out| {
                for a in 0..d {
                    out[a] = amp * (2.0 * PI * (x[a] - ph - 0.1 * a as f64)).sin() * (om * t).cos() / d as f64;
                }
            });
            let mut div = vec![0.0; grid.nodes()];
            let mut b = 0.0_f64;
            for n in 0..grid.nt() {
                grid.divergence_into(v.level(n), &mut div);
                b = b.max(div.iter().map(|x| x.abs()).fold(0.0, f64::max));
            }
            let pair = solve_fp(problem, &v).unwrap();
            let (e, m) = check_flow(problem, &pair.m);
            worst_mass = worst_mass.max(e);
            min_m = min_m.min(m);
            solves += 1;
            let bound = eps0 * (-grid.horizon() * b).exp() * 0.9;
            worst_shadow = worst_shadow.min(m / bound);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_mass <= 1e-10 && min_m > 0.0 && worst_shadow >= 1.0 && secs < 5.0,
        format!(
            "{solves} solves: max |mass - 1| = {worst_mass:.2e}, min m = {min_m:.4}, \
             min m / (eps0 e^(-TB) 0.9) = {worst_shadow:.3}, {secs:.2} s"
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    // constant data: u^n = u^{n+1} + dt (c - H(a0 P)), H(p) = p²/2 - l0
    let (l0, a0, cg, c, p) = (0.3, 0.7, 0.25, 1.4, 0.6);
    let problem = small_problem(
        1,
        64,
        50,
        RunningCost::quadratic(1.0, Profile::constant(l0)),
        vec![Profile::constant(a0)],
    );
    let grid = *problem.grid();
    let problem = MfgProblem::new(ProblemData {
        grid,
        cost: RunningCost::quadratic(1.0, Profile::constant(l0)),
        newton: NewtonConfig::default(),
        coupling: problem.coupling().clone(),
        m0: vec![1.0; grid.nodes()],
        g: vec![cg; grid.nodes()],
        viscosity: 1.0,
    })
    .unwrap();
    let vf = solve_hjb(&problem, &CouplingState::constant(&problem, c, &[p])).unwrap();
    let h = 0.5 * (a0 * p) * (a0 * p) - l0;
    let mut scalar = cg;
    let mut hjb_err = 0.0_f64;
    for n in (0..grid.levels()).rev() {
        if n < grid.nt() {
            scalar += grid.dt() * (c - h);
        }
        hjb_err = hjb_err.max(vf.u.level(n).iter().map(|u| (u - scalar).abs()).fold(0.0, f64::max));
    }
    // zero drift: cosine modes decay by 1/(1 + dt ν λ_h) per step
    let mut fp_err = 0.0_f64;
    for j in [1usize, 3] {
        let fp_grid = TorusGrid::new(1, 64, 40, 1.0).unwrap();
        let m0 = Profile::Cosine {
            base: 1.0,
            amplitude: 0.5,
            wavevector: [j as i64, 0],
            center: [0.0, 0.0],
        };
        let prob = MfgProblem::new(ProblemData {
            grid: fp_grid,
            cost: RunningCost::quadratic(1.0, Profile::constant(0.0)),
            newton: NewtonConfig::default(),
            coupling: problem.coupling().clone(),
            m0: m0.sample(&fp_grid),
            g: vec![0.0; fp_grid.nodes()],
            viscosity: 1.0,
        })
        .unwrap();
        let pair = solve_fp(&prob, &VectorField::zeros(fp_grid)).unwrap();
        let dx = fp_grid.dx();
        let lambda = 2.0 / (dx * dx) * (1.0 - (2.0 * PI * j as f64 * dx).cos());
        let mut amp = 0.5;
        for n in 0..fp_grid.levels() {
            for (i, m) in pair.m.level(n).iter().enumerate() {
                let exact = 1.0 + amp * (2.0 * PI * j as f64 * i as f64 * dx).cos();
                fp_err = fp_err.max((m - exact).abs());
            }
            amp /= 1.0 + fp_grid.dt() * lambda;
        }
    }
    outcome(
        hjb_err <= 1e-12 && fp_err <= 1e-12,
        format!("HJB vs scalar recursion {hjb_err:.2e}, FP vs mode decay {fp_err:.2e}"),
    )
}

struct Runs {
    reference: ReferenceSolution,
    reference_secs: f64,
    fw: Vec<IterateRecord>,
    fp: Vec<IterateRecord>,
    run_secs: f64,
    problem: MfgProblem,
}

fn build_runs() -> Runs {
    let problem = default_problem();
    let start = Instant::now();
    let reference = make_reference(&problem, REFERENCE_BUDGET).expect("reference run");
    let reference_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let options = RunOptions {
        reference: Some(&reference),
        ..Default::default()
    };
    let mut fw = run(&problem, StepSchedule::FrankWolfe, N_ITERS, options.clone())
        .expect("Frank-Wolfe run")
        .records;
    let mut fp = run(&problem, StepSchedule::FictitiousPlay, N_ITERS, options)
        .expect("fictitious play run")
        .records;
    let run_secs = start.elapsed().as_secs_f64();
    fill_primal_gap(&mut fw, reference.potential);
    fill_primal_gap(&mut fp, reference.potential);
    Runs {
        reference,
        reference_secs,
        fw,
        fp,
        run_secs,
        problem,
    }
}

fn certificate_ordering(r: &Runs) -> Outcome {
    let worst = r
        .fw
        .iter()
        .filter(|x| x.feasible)
        .map(|x| (x.k, x.primal_gap.unwrap() - x.exploitability))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    outcome(
        worst.1 <= 1e-6,
        format!("max (eps_k - sigma_k) = {:.3e} at k = {} over {} iterations", worst.1, worst.0, r.fw.len()),
    )
}

fn rates(r: &Runs) -> Outcome {
    let eps = fit_rate(&r.fw, Metric::PrimalGap, RATE_WINDOW);
    let sig = fit_rate(&r.fw, Metric::Exploitability, RATE_WINDOW);
    let corrected: Vec<f64> = r
        .fp
        .iter()
        .filter(|x| (RATE_WINDOW.0..=RATE_WINDOW.1).contains(&x.k))
        .map(|x| x.primal_gap.unwrap() * (x.k + 1) as f64 / ((x.k + 1) as f64).ln())
        .collect();
    let fp_ratio = max_over_median(&corrected);
    let total = r.reference_secs + r.run_secs;
    let eps_ok = eps.as_ref().is_ok_and(|f| (-1.3..=-0.8).contains(&f.slope));
    let sig_ok = sig.as_ref().is_ok_and(|f| (-0.75..=-0.35).contains(&f.slope));
    let show = |f: &mfg_gcg::Result<mfg_gcg::diagnostics::RateFit>| match f {
        Ok(f) => format!("{:.3}", f.slope),
        Err(e) => e.to_string(),
    };
    outcome(
        eps_ok && sig_ok && fp_ratio <= 5.0 && total < 60.0,
        format!(
            "FW eps slope {} (window [-1.3,-0.8]), FW sigma slope {} (window [-0.75,-0.35]), \
             FP eps(k+1)/ln(k+1) max/median {fp_ratio:.2} (<= 5), {total:.1} s",
            show(&eps),
            show(&sig)
        ),
    )
}

fn variable_convergence(r: &Runs) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for m in Metric::NORMS {
        match sqrt_gap_ratios(&r.fw, m, RATIO_WINDOW) {
            Ok(v) => {
                let q = max_over_median(&v);
                pass &= q <= 10.0;
                parts.push(format!("{} {q:.2}", m.name()));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{} {e}", m.name()));
            }
        }
    }
    outcome(pass, format!("norm/sqrt(eps) max/median: {}", parts.join(", ")))
}

fn descent_lemma(r: &Runs) -> Outcome {
    let c = fit_descent_constant(&r.fw, r.fw.len() / 2);
    let bad = descent_violations(&r.fw, c);
    outcome(
        bad.is_empty(),
        format!(
            "C_emp = {c:.4e} fitted on k < {}, violations at {:?}",
            r.fw.len() / 2,
            &bad[..bad.len().min(8)]
        ),
    )
}

fn monte_carlo(r: &Runs) -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for x in [0.1, 0.4, 0.7] {
        let point = [x, 0.0];
        let est = monte_carlo_value(&r.problem, &r.reference.coupling, point, 10_000, 2024).unwrap();
        let u = value_at(&r.problem, &r.reference.value, &point);
        let ok = (est.estimate - u).abs() <= mc_tolerance(est.standard_error, u);
        pass &= ok;
        parts.push(format!("x={x}: MC {:.5} +- {:.5} vs u {u:.5}", est.estimate, est.standard_error));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(pass && secs < 30.0, format!("{}; {secs:.2} s", parts.join("; ")))
}

fn reference_exploitability(r: &Runs) -> Outcome {
    let p = &r.reference.provenance;
    outcome(
        p.sigma <= 1e-5,
        format!(
            "sigma = {:.3e} at best k = {} of {} ({:.1} s)",
            p.sigma, p.best_k, p.iterations, r.reference_secs
        ),
    )
}

fn determinism() -> Outcome {
    let mut config = ExperimentConfig::default();
    config.run.n_iters = 48;
    config.run.reference_budget = Some(96);
    config.monte_carlo.paths = 500;
    let cfl = config.validate().unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut csv = Vec::new();
    for d in &dirs {
        let mut c = config.clone();
        Overrides {
            out: Some(d.path().to_path_buf()),
            ..Default::default()
        }
        .apply(&mut c);
        run_experiment(&c, cfl).unwrap();
        csv.push(std::fs::read(d.path().join("iterates.csv")).unwrap());
    }
    outcome(
        csv[0] == csv[1] && !csv[0].is_empty(),
        format!("two runs, {} bytes each, identical: {}", csv[0].len(), csv[0] == csv[1]),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {n:>2} {name:<26} {}  {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };
    record(1, "fenchel", &fenchel);
    record(2, "conservation_positivity", &conservation_positivity);
    record(3, "oracle_equivalence", &oracle_equivalence);
    let runs = catch_unwind(build_runs).ok();
    let with_runs = |f: fn(&Runs) -> Outcome| -> Box<dyn Fn() -> Outcome + '_> {
        match &runs {
            Some(r) => Box::new(move || f(r)),
            None => Box::new(|| outcome(false, "reference or iteration runs failed".into())),
        }
    };
    record(4, "certificate_ordering", &*with_runs(certificate_ordering));
    record(5, "rates", &*with_runs(rates));
    record(6, "variable_convergence", &*with_runs(variable_convergence));
    record(7, "descent_lemma", &*with_runs(descent_lemma));
    record(8, "monte_carlo", &*with_runs(monte_carlo));
    record(9, "reference_exploitability", &*with_runs(reference_exploitability));
    record(10, "determinism", &determinism);
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
