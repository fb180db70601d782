//! Self-contained numerical checks shared by `selftest` and the acceptance
//! suite. Each check draws its own random instances from a fixed seed.

use std::time::{Duration, Instant};

use driftbench_core::ascoot::{bcd_solve, objective, sinkhorn_asym, BcdOptions, TransportProblem};
use driftbench_core::cda::DomainTracker;
use driftbench_core::engine::{stochastic_restore, Mode};
use driftbench_core::linalg::{covariance, Matrix};
use driftbench_core::model::{
    cross_entropy, entropy, entropy_and_grad, forward, grad, DropoutMask, ModelDims, ModelParams,
};
use driftbench_core::rfp::consistency_distribution;
use driftbench_core::rng::{derive_seed, rng_for, standard_normal, tag};
use rand::Rng;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::runner::{execute, RunOutput};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.2}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

/// Runs `f` and fails the outcome if it also overruns `limit`.
fn timed(name: &str, limit: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t0 = Instant::now();
    let (mut passed, mut detail) = f();
    let elapsed = t0.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            passed = false;
            detail = format!("{detail}; over the {:.0}s budget", limit.as_secs_f64());
        }
    }
    Outcome {
        name: name.to_string(),
        passed,
        detail,
        elapsed,
    }
}

fn simplex(n: usize, lo: f64, rng: &mut impl Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------- IPCA

pub fn ipca_exactness(cases: usize, max_n: usize, max_d: usize, seed: u64) -> Outcome {
    timed("ipca exactness", Some(Duration::from_secs(5)), || {
        let mut worst: f64 = 0.0;
        for case in 0..cases as u64 {
            let mut rng = rng_for(seed, &[case]);
            let (n, d) = (rng.gen_range(1..=max_n), rng.gen_range(1..=max_d));
            let offsets: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let scales: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..3.0)).collect();
            let x = Matrix::from_fn(n, d, |_, j| offsets[j] + scales[j] * standard_normal(&mut rng));
            let mut t = DomainTracker::new(d, 1).expect("valid tracker");
            let mut lo = 0;
            while lo < n {
                let hi = (lo + rng.gen_range(1..=n.max(2) / 2)).min(n);
                let chunk = Matrix::from_fn(hi - lo, d, |i, j| x[(lo + i, j)]);
                t.update(&chunk).expect("finite chunk");
                lo = hi;
            }
            let (m, c) = covariance(&x).expect("nonempty");
            let mean_err = t.mean.iter().zip(&m).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
            worst = worst.max(mean_err).max(t.cov.max_abs_diff(&c));
        }
        (worst <= 1e-10, format!("{cases} sets, worst max-abs error {worst:.3e} (limit 1e-10)"))
    })
}

// ----------------------------------------------------------------- RFP

pub fn consistency_bound(cases: usize, seed: u64) -> Outcome {
    timed("consistency bound", Some(Duration::from_secs(10)), || {
        let mut violations = 0;
        let mut tightest = f64::INFINITY;
        for case in 0..cases as u64 {
            let mut rng = rng_for(seed, &[case]);
            let (n, c) = (rng.gen_range(2..=32), rng.gen_range(2..=16));
            let sharp = rng.gen_range(0.0..4.0);
            let mut p = Matrix::zeros(n, c);
            for i in 0..n {
                let row = p.row_mut(i);
                for v in row.iter_mut() {
                    *v = (sharp * rng.gen::<f64>() * 4.0).exp() * rng.gen::<f64>();
                }
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let r = consistency_distribution(&p).expect("row-stochastic input");
            let top = r.p_bar.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let slack = top + r.eps_bound + 1e-9 - r.s_max;
            tightest = tightest.min(slack);
            if slack < 0.0 {
                violations += 1;
            }
        }
        (
            violations == 0,
            format!("{violations} violations in {cases} matrices, smallest slack {tightest:.3e}"),
        )
    })
}

pub fn asymptotic_scores(max_n: usize, max_c: usize) -> Outcome {
    timed("asymptotic scores", None, || {
        let mut worst: f64 = 0.0;
        for n in 2..=max_n {
            for c in 2..=max_c {
                let root = (n as f64).sqrt();
                let hot = Matrix::from_fn(n, c, |_, j| if j == c / 2 { 1.0 } else { 0.0 });
                let flat = Matrix::from_fn(n, c, |_, _| 1.0 / c as f64);
                let h = consistency_distribution(&hot).expect("valid").s_max;
                let u = consistency_distribution(&flat).expect("valid").s_max;
                worst = worst.max((h - root).abs()).max((u - root / c as f64).abs());
            }
        }
        (
            worst <= 1e-9,
            format!("N 2..={max_n}, C 2..={max_c}, worst error {worst:.3e} (limit 1e-9)"),
        )
    })
}

// --------------------------------------------------------------- model

const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn fd_error(params: &ModelParams, analytic: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..params.len() {
        let mut up = params.clone();
        up.as_mut_slice()[k] += FD_STEP;
        let mut down = params.clone();
        down.as_mut_slice()[k] -= FD_STEP;
        let numeric = (f(&up) - f(&down)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.as_slice()[k], numeric));
    }
    worst
}

/// Cross-entropy and entropy gradients against central differences, half
/// of the configurations under a dropout mask.
pub fn gradient_fidelity(configs: usize, seed: u64) -> Outcome {
    timed("gradient fidelity", Some(Duration::from_secs(5)), || {
        let mut worst: f64 = 0.0;
        for case in 0..configs as u64 {
            let mut rng = rng_for(seed, &[case]);
            let (d, c) = (rng.gen_range(1..6), rng.gen_range(2..6));
            let dims = if rng.gen_bool(0.5) {
                ModelDims::with_hidden(d, rng.gen_range(1..6), c)
            } else {
                ModelDims::linear(d, c)
            };
            let data = (0..dims.num_params()).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let params = ModelParams::from_vec(dims, data).expect("sized");
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let target = simplex(c, 1e-3, &mut rng);
            let mask = (case % 2 == 1).then(|| DropoutMask::sample(dims, 0.3, seed, case).expect("valid rate"));
            let mask = mask.as_ref();
            let g = grad(&params, &x, &target, mask).expect("valid shapes");
            worst = worst.max(fd_error(&params, &g, |p| {
                cross_entropy(&target, &forward(p, &x, mask).expect("valid").probs)
            }));
            let (_, _, g) = entropy_and_grad(&params, &x, mask).expect("valid shapes");
            worst = worst.max(fd_error(&params, &g, |p| entropy(&forward(p, &x, mask).expect("valid").probs)));
        }
        (
            worst <= 1e-5,
            format!("{configs} configurations, worst relative error {worst:.3e} (limit 1e-5)"),
        )
    })
}

// -------------------------------------------------------------- As-COOT

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen::<f64>())
}

fn feasible_coupling(rows: usize, nu: &[f64], rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, nu.len());
    for (j, &t) in nu.iter().enumerate() {
        let w = simplex(rows, 0.0, rng);
        for i in 0..rows {
            m[(i, j)] = w[i] * t;
        }
    }
    m
}

fn balanced_sinkhorn(c: &Matrix, mu: &[f64], nu: &[f64], eps: f64) -> Matrix {
    let (n, m) = c.shape();
    let k = Matrix::from_fn(n, m, |i, j| (-c[(i, j)] / eps).exp());
    let (mut u, mut v) = (vec![1.0; n], vec![1.0; m]);
    for _ in 0..20_000 {
        for i in 0..n {
            u[i] = mu[i] / (0..m).map(|j| k[(i, j)] * v[j]).sum::<f64>();
        }
        for j in 0..m {
            v[j] = nu[j] / (0..n).map(|i| k[(i, j)] * u[i]).sum::<f64>();
        }
    }
    Matrix::from_fn(n, m, |i, j| u[i] * k[(i, j)] * v[j])
}

/// Column residuals, monotone `J`, a random-search probe on 2×2×2×2 and the
/// balanced limit on 3×3.
pub fn bcd_checks(instances: usize, probes: usize, seed: u64) -> Outcome {
    timed("sinkhorn and bcd", Some(Duration::from_secs(60)), || {
        let mut notes = Vec::new();
        let mut ok = true;

        let (mut worst_res, mut monotone, mut converged) = (0.0f64, 0, 0);
        for case in 0..instances as u64 {
            let mut rng = rng_for(seed, &[1, case]);
            let (n, d1, m, d2) = (rng.gen_range(2..6), rng.gen_range(2..5), rng.gen_range(2..6), rng.gen_range(2..5));
            let prob = TransportProblem::uniform(random_matrix(n, d1, &mut rng), random_matrix(m, d2, &mut rng));
            let sol = bcd_solve(&prob, &BcdOptions::default()).expect("valid problem");
            worst_res = worst_res.max(sol.pi_s.marginal_residual).max(sol.pi_f.marginal_residual);
            monotone += sol.history.is_monotone(1e-12) as usize;
            converged += sol.history.converged as usize;
        }
        ok &= worst_res <= 1e-9 && converged == instances && monotone == instances;
        notes.push(format!(
            "(a) {converged}/{instances} converged, worst column residual {worst_res:.2e}"
        ));
        notes.push(format!("(b) {monotone}/{instances} monotone"));

        let mut rng = rng_for(seed, &[2]);
        let prob = TransportProblem::uniform(random_matrix(2, 2, &mut rng), random_matrix(2, 2, &mut rng));
        let sol = bcd_solve(&prob, &BcdOptions::default()).expect("valid problem");
        let mut best = f64::INFINITY;
        for _ in 0..probes {
            let ps = feasible_coupling(2, &prob.nu, &mut rng);
            let pf = feasible_coupling(2, &prob.nu_f, &mut rng);
            best = best.min(objective(&ps, &pf, &prob).expect("feasible"));
        }
        let j = sol.history.final_objective();
        ok &= j <= best + 1e-6;
        notes.push(format!("(c) J {j:.6} vs best of {probes} probes {best:.6}"));

        let mut rng = rng_for(seed, &[3]);
        let mut worst_gap: f64 = 0.0;
        for _ in 0..10 {
            let c = random_matrix(3, 3, &mut rng);
            let mu = simplex(3, 0.2, &mut rng);
            let nu = simplex(3, 0.2, &mut rng);
            let p = sinkhorn_asym(&c, &mu, &nu, 1e6, 0.05, 1e-13, 200_000).expect("valid problem");
            worst_gap = worst_gap.max(p.pi.max_abs_diff(&balanced_sinkhorn(&c, &mu, &nu, 0.05)));
        }
        ok &= worst_gap <= 1e-6;
        notes.push(format!("(d) lambda 1e6 vs balanced gap {worst_gap:.2e}"));
        (ok, notes.join("; "))
    })
}

// ------------------------------------------------------------- engine

pub fn restoration_stats(n_params: usize, steps: usize, p: f64, seed: u64) -> Outcome {
    timed("restoration statistics", None, || {
        // (d + 1)·2 parameters
        let dims = ModelDims::linear(n_params.div_ceil(2).max(2) - 1, 2);
        let n_params = dims.num_params();
        let source = ModelParams::zeros(dims).expect("sized");
        let mut theta = ModelParams::from_vec(dims, vec![1.0; n_params]).expect("sized");
        let band = 3.0 * (p * (1.0 - p) / n_params as f64).sqrt();
        let mut inside = 0;
        for s in 0..steps as u64 {
            let (next, frac) =
                stochastic_restore(&theta, &source, p, derive_seed(seed, &[tag::RESTORE, s])).expect("same dims");
            inside += ((frac - p).abs() <= band) as usize;
            theta = next;
        }
        let share = inside as f64 / steps as f64;
        (
            share >= 0.99,
            format!("{inside}/{steps} steps within {p} ± {band:.4}"),
        )
    })
}

/// Mean and standard error of a sample.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::INFINITY);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Whether every domain boundary shows a distance above the mean of the
/// `window` steps before it.
pub fn boundaries_detected(out: &RunOutput, window: usize) -> bool {
    let dist = out.distances();
    out.boundaries.iter().filter(|&&b| b >= window).all(|&b| {
        let prev: Option<Vec<f64>> = dist[b - window..b].iter().copied().collect();
        match (dist[b], prev) {
            (Some(d), Some(prev)) => d > prev.iter().sum::<f64>() / window as f64,
            _ => false,
        }
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub ctta: f64,
    /// Mean paired difference to each baseline and its standard error.
    pub vs_no_adapt: (f64, f64),
    pub vs_fixed: (f64, f64),
    pub boundary_seeds: usize,
    pub seeds: usize,
}

/// ctta_t against no_adapt and fixed_alpha(0.99) on the configured stream.
pub fn ctta_experiment(cfg: &RunConfig) -> Result<ExperimentResult, CliError> {
    let mut cfg = cfg.clone();
    cfg.modes = vec![Mode::CttaT, Mode::NoAdapt, Mode::FixedAlpha(0.99)];
    let outputs = execute(&cfg)?;
    let acc = |mode: Mode| -> Vec<f64> {
        cfg.seeds
            .iter()
            .map(|&s| {
                outputs
                    .iter()
                    .find(|o| o.job.seed == s && o.job.mode == mode)
                    .map(RunOutput::mean_accuracy)
                    .unwrap_or(f64::NAN)
            })
            .collect()
    };
    let (ctta, none, fixed) = (acc(Mode::CttaT), acc(Mode::NoAdapt), acc(Mode::FixedAlpha(0.99)));
    let diff = |b: &[f64]| ctta.iter().zip(b).map(|(a, b)| a - b).collect::<Vec<_>>();
    let boundary_seeds = outputs
        .iter()
        .filter(|o| o.job.mode == Mode::CttaT && boundaries_detected(o, 5))
        .count();
    Ok(ExperimentResult {
        ctta: mean_se(&ctta).0,
        vs_no_adapt: mean_se(&diff(&none)),
        vs_fixed: mean_se(&diff(&fixed)),
        boundary_seeds,
        seeds: cfg.seeds.len(),
    })
}

pub fn ctta_outcome(cfg: &RunConfig, min_boundary_seeds: usize) -> Outcome {
    timed("ctta experiment", Some(Duration::from_secs(180)), || match ctta_experiment(cfg) {
        Err(e) => (false, e.to_string()),
        Ok(r) => {
            let (d1, se1) = r.vs_no_adapt;
            let (d2, se2) = r.vs_fixed;
            let passed = d1 > se1 && d2 > se2 && r.boundary_seeds >= min_boundary_seeds;
            (
                passed,
                format!(
                    "ctta_t {:.4}; vs no_adapt {d1:+.4} (se {se1:.4}); vs fixed_alpha(0.99) {d2:+.4} (se {se2:.4}); boundaries detected in {}/{} seeds",
                    r.ctta, r.boundary_seeds, r.seeds
                ),
            )
        }
    })
}

/// Two in-process runs into separate directories must write identical CSVs.
pub fn determinism(cfg: &RunConfig) -> Outcome {
    timed("determinism", None, || {
        let attempt = || -> Result<Vec<Vec<u8>>, CliError> {
            let mut out = Vec::new();
            for _ in 0..2 {
                let dir = tempfile::tempdir().map_err(|e| CliError::io(std::path::Path::new("<tmp>"), e))?;
                let mut c = cfg.clone();
                c.out_dir = dir.path().to_path_buf();
                crate::runner::run_experiment(&c)?;
                let path = dir.path().join(crate::runner::METRICS_FILE);
                out.push(std::fs::read(&path).map_err(|e| CliError::io(&path, e))?);
            }
            Ok(out)
        };
        match attempt() {
            Ok(v) => (v[0] == v[1], format!("two runs, {} CSV bytes each, identical: {}", v[0].len(), v[0] == v[1])),
            Err(e) => (false, e.to_string()),
        }
    })
}

/// The bundled long-stream configuration.
pub const CTTA_LONG_CONF: &str = include_str!("../data/ctta_long.conf");

pub fn ctta_long_config() -> RunConfig {
    crate::config::parse_str(CTTA_LONG_CONF).expect("bundled config is valid")
}

/// Every check at full size, or reduced when `quick`.
pub fn all(quick: bool) -> Vec<Outcome> {
    let scale = |full: usize, small: usize| if quick { small } else { full };
    let long = ctta_long_config();
    let mut small = long.clone();
    small.seeds = vec![0, 1];
    small.steps_per_domain = 10;
    small.modes = vec![Mode::CttaT, Mode::NoAdapt];
    vec![
        ipca_exactness(scale(100, 20), 500, 32, 1),
        consistency_bound(scale(10_000, 1000), 2),
        asymptotic_scores(32, 16),
        gradient_fidelity(scale(100, 20), 4),
        bcd_checks(scale(50, 10), scale(100_000, 10_000), 5),
        ctta_outcome(&long, 4),
        restoration_stats(10_000, 1000, 0.01, 7),
        determinism(&small),
    ]
}
