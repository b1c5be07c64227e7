//! Acceptance suite. Every check prints one `PASS`/`FAIL` line to stderr
//! (bypassing the test harness capture) and then asserts.
//!
//! The Monte Carlo checks run the shipped presets at full size and take
//! several minutes in total on a single core.

use std::io::Write as _;
use std::path::Path;

use eki::cli::{self, presets, RunOptions};
use eki::diagnostics::{c_constant, subspace_residual};
use eki::dynamics::{correlated_increments, eki_discrete_step_with, sde_linear_step, NoiseDraw};
use eki::forward::FemModel;
use eki::montecarlo::{run_experiment, MomentSeries};
use eki::oracles::{covariation_from_samples, kalman_mean_update, noise_covariation_check};
use eki::{Ensemble, ExperimentConfig, LinearForwardModel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{verdict} criterion {id:>2} ({name}): {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn preset(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_json_str(text).unwrap()
}

fn quiet(threads: Option<usize>) -> RunOptions {
    RunOptions {
        threads,
        svg: false,
        seed: None,
    }
}

/// Largest `mean − bound − 3·SE` over checkpoints; the bound holds at spec
/// tolerance when this is `≤ 0`.
fn worst_bound_excess(series: &MomentSeries, bound: &[f64]) -> (f64, usize) {
    let mut worst = (f64::NEG_INFINITY, 0);
    for (i, (&m, &b)) in series.mean.iter().zip(bound).enumerate() {
        let excess = m - b - 3.0 * series.se[i];
        if excess > worst.0 {
            worst = (excess, i);
        }
    }
    worst
}

#[test]
fn criteria_1_2_collapse_bounds() {
    let config = preset(presets::COLLAPSE);
    assert_eq!((config.ensemble_size, config.paths, config.p), (5, 1000, 3.0));
    let dir = tempfile::tempdir().unwrap();
    let rep = cli::cmd_collapse(&config, dir.path(), &quiet(None)).unwrap();
    let s = &rep.summary;

    let (excess, at) = worst_bound_excess(&s.v_obs, &rep.bound_second);
    report(
        1,
        "second-moment bound",
        excess <= 0.0,
        &format!(
            "J=5, Q={}, max over {} checkpoints of mean - bound - 3SE = {excess:.3e} at t={}; final mean {:.4e} vs bound {:.4e}",
            s.q_effective,
            s.times.len(),
            s.times[at],
            s.v_obs.last_mean(),
            rep.bound_second.last().unwrap()
        ),
    );

    let bound_p = rep.bound_p.as_ref().expect("p = 3 is admissible for J = 5");
    let (excess, at) = worst_bound_excess(&s.v_obs_p, bound_p);
    report(
        2,
        "p-moment bound",
        excess <= 0.0,
        &format!(
            "p=3, max of mean - bound - 3SE = {excess:.3e} at t={}; final mean {:.4e} vs bound {:.4e}",
            s.times[at],
            s.v_obs_p.last_mean(),
            bound_p.last().unwrap()
        ),
    );
}

#[test]
fn criterion_3_path_rates() {
    let mut lines = Vec::new();
    let mut pass = true;
    for text in [presets::PATHS, presets::PATHS_J15] {
        let config = preset(text);
        assert_eq!(config.paths, 10);
        let dir = tempfile::tempdir().unwrap();
        let rep = cli::cmd_paths(&config, dir.path(), &quiet(None)).unwrap();
        let worst = rep.slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        pass &= rep.slopes.iter().all(|&s| s <= -0.5);
        lines.push(format!(
            "J={}: worst slope {worst:.3} on [{}, {}]",
            config.ensemble_size, rep.window.0, rep.window.1
        ));
    }
    report(3, "per-path collapse rate", pass, &lines.join("; "));
}

/// `mean[i+1] − mean[i] ≤ 3·√(se[i]² + se[i+1]²)` at every step; returns the
/// largest violation ratio.
fn monotone_within_3se(series: &MomentSeries) -> (bool, f64) {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for i in 0..series.mean.len() - 1 {
        let rise = series.mean[i + 1] - series.mean[i];
        let tol = 3.0 * series.se[i].hypot(series.se[i + 1]);
        if rise > tol {
            ok = false;
        }
        if rise > 0.0 {
            worst = worst.max(if tol > 0.0 { rise / tol } else { f64::INFINITY });
        }
    }
    (ok, worst)
}

#[test]
fn criterion_4_monotonicity() {
    let config = preset(presets::COLLAPSE_SDE);
    let out = run_experiment(&config, None).unwrap();
    let s = &out.summary;
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, series) in [
        ("V_obs", &s.v_obs),
        ("V_param", &s.v_param),
        ("R_obs", s.r_obs.as_ref().unwrap()),
        ("Lyapunov", &s.v_lyap),
    ] {
        let (ok, worst) = monotone_within_3se(series);
        pass &= ok;
        parts.push(format!("{name} worst rise/3SE {worst:.2}"));
    }
    report(
        4,
        "monotone means",
        pass,
        &format!(
            "sde_linear J=5 Q={} over {} checkpoints: {}",
            s.q_effective,
            s.times.len(),
            parts.join(", ")
        ),
    );
}

#[test]
fn criterion_5_variance_inflation() {
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, text) in [("J=15", presets::INFLATION), ("low-dim J=3 K=3", presets::LOWDIM)] {
        let config = preset(text);
        let inflation = config.inflation.as_ref().unwrap();
        assert_eq!(
            (inflation.alpha, inflation.r, inflation.b_scale, config.paths),
            (0.5, 1.0, 1.0, 1000)
        );
        let dir = tempfile::tempdir().unwrap();
        let rep = cli::cmd_inflation(&config, dir.path(), &quiet(None)).unwrap();
        let (base, infl) = rep.final_r_obs();
        let ok = infl < base && rep.slope_r_obs_inflated <= -1.0;
        pass &= ok;
        parts.push(format!(
            "{label}: final R_obs {infl:.4e} (inflated) vs {base:.4e}, inflated slope {:.3} on [{}, {}]",
            rep.slope_r_obs_inflated, rep.window.0, rep.window.1
        ));
    }
    report(5, "variance inflation", pass, &parts.join("; "));
}

#[test]
fn criterion_6_discrete_mean_matches_kalman_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let draws = 100_000;
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for _ in 0..10 {
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=4);
        let j = rng.random_range(2..=5);
        let dt = rng.random_range(0.05..1.0);
        let a = DMatrix::from_fn(k, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let root = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let gamma = &root * root.transpose() * 0.5 + DMatrix::identity(k, k) * 0.5;
        let model = LinearForwardModel::with_gamma(a, gamma).unwrap();
        let ens = Ensemble::from_columns(DMatrix::from_fn(d, j, |_, _| rng.sample::<f64, _>(StandardNormal))).unwrap();
        let y = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let expected = kalman_mean_update(&ens, &model, &y, dt).unwrap();

        let mut sum = DVector::zeros(d);
        let mut sum_sq = DVector::zeros(d);
        for _ in 0..draws {
            let xi = NoiseDraw::perturbation(model.noise(), j, dt, &mut rng);
            let m = eki_discrete_step_with(&ens, &model, &y, dt, &xi).unwrap().mean();
            sum_sq += m.component_mul(&m);
            sum += m;
        }
        let n = draws as f64;
        let mean = &sum / n;
        for i in 0..d {
            let var = (sum_sq[i] / n - mean[i] * mean[i]) * n / (n - 1.0);
            let se = (var.max(0.0) / n).sqrt();
            let z = (mean[i] - expected[i]).abs() / se;
            worst = worst.max(z);
            pass &= z <= 4.0;
        }
    }
    report(
        6,
        "discrete step mean vs Kalman form",
        pass,
        &format!("10 instances, 1e5 draws each, worst |diff|/SE = {worst:.2}"),
    );
}

#[test]
fn criterion_7_noise_covariation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut pass = true;
    let mut parts = Vec::new();
    let n = 100_000;
    for j in [2usize, 5, 15] {
        let k = 3;
        // Unit direction: the rates are (J−1)/J and −1/J themselves.
        let u = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let v = u.clone();
        let dt = 0.5;
        let direct = noise_covariation_check(j, dt, n, &u, &v, &mut rng).unwrap();
        let samples = (0..n).map(|_| correlated_increments(j, k, dt, &mut rng));
        let stepped = covariation_from_samples(samples, &u, &v, dt).unwrap();
        for (source, est) in [("oracle", direct), ("dynamics", stepped)] {
            pass &= est.within(3.0);
            parts.push(format!(
                "J={j} {source}: diag {:.4}±{:.4} (target {:.4}), cross {:.4}±{:.4} (target {:.4})",
                est.diag, est.diag_se, est.diag_target, est.cross, est.cross_se, est.cross_target
            ));
        }
    }
    report(7, "Brownian covariation", pass, &parts.join("; "));
}

#[test]
fn criterion_8_constant_identities() {
    let mut worst: f64 = 0.0;
    for j in 2..=50usize {
        let jf = j as f64;
        worst = worst.max((c_constant(2.0, j) - (jf + 1.0) / jf.powi(3)).abs());
        let upper = (jf + 3.0) / 2.0;
        for step in 0..=100 {
            let p = 2.0 + (upper - 2.0) * step as f64 / 100.0;
            let closed = p * (jf + 3.0 - p) / (2.0 * jf.powi(3));
            worst = worst.max((c_constant(p, j) - closed).abs());
        }
    }
    report(
        8,
        "collapse constant identities",
        worst <= 1e-14,
        &format!("J in 2..=50, 101 admissible p per J, max abs deviation {worst:.2e}"),
    );
}

#[test]
fn criterion_9_subspace_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (d, k, j) = (100, 10, 5);
    let a = DMatrix::from_fn(k, d, |_, _| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt());
    let model = LinearForwardModel::with_gamma(a, DMatrix::identity(k, k)).unwrap();
    let initial = Ensemble::from_columns(DMatrix::from_fn(d, j, |_, _| rng.sample::<f64, _>(StandardNormal))).unwrap();
    let y = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut ens = initial.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        ens = sde_linear_step(&ens, &model, &y, 0.01, &mut rng).unwrap();
        worst = worst.max(subspace_residual(&initial, &ens).unwrap());
    }
    report(
        9,
        "subspace invariance",
        worst <= 1e-8,
        &format!("d=100, J=5, 1000 sde_linear steps, max relative residual {worst:.2e}"),
    );
}

#[test]
fn criterion_10_fem() {
    let fem = FemModel::assemble(805, vec![1.0]).unwrap();
    let mu = fem.laplacian_eigenvalues(10).unwrap();
    let mut worst_rel: f64 = 0.0;
    for (i, m) in mu.iter().enumerate() {
        let jf = (i + 1) as f64;
        let numerical = 10.0 / m;
        let analytic = 10.0 / (jf * jf);
        worst_rel = worst_rel.max((numerical - analytic).abs() / analytic);
    }
    let error = |cells: usize| {
        let fem = FemModel::assemble(cells, vec![1.0]).unwrap();
        let p = fem.solve(&fem.interpolate(f64::sin)).unwrap();
        let exact = fem.interpolate(|x| x.sin() / 2.0);
        (p - exact).amax()
    };
    let ratios: Vec<f64> = [50usize, 100, 200].iter().map(|&n| error(n) / error(2 * n)).collect();
    let pass = worst_rel <= 0.01 && ratios.iter().all(|r| (3.5..=4.5).contains(r));
    report(
        10,
        "finite elements",
        pass,
        &format!(
            "max relative eigenvalue error (j<=10, 805 cells) {worst_rel:.2e}; error ratios under halving {ratios:.3?}"
        ),
    );
}

fn read_all(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| std::fs::read(dir.join(n)).unwrap()).collect()
}

#[test]
fn criterion_11_determinism() {
    let mut parts = Vec::new();
    let mut pass = true;

    let mut collapse = preset(presets::COLLAPSE);
    collapse.paths = 100;
    let runs: Vec<Vec<Vec<u8>>> = [1, 8, 1]
        .iter()
        .map(|&threads| {
            let dir = tempfile::tempdir().unwrap();
            cli::cmd_collapse(&collapse, dir.path(), &quiet(Some(threads))).unwrap();
            read_all(dir.path(), &["moments.csv"])
        })
        .collect();
    let same = runs.windows(2).all(|w| w[0] == w[1]);
    pass &= same;
    parts.push(format!("collapse J=5 Q=100 with 1, 8, 1 workers identical: {same}"));

    let lowdim = preset(presets::LOWDIM);
    let names = [
        "residuals.csv",
        "spread.csv",
        "estimates_param.csv",
        "estimates_obs.csv",
        "inflation_summary.csv",
    ];
    let runs: Vec<Vec<Vec<u8>>> = [1, 8, 8]
        .iter()
        .map(|&threads| {
            let dir = tempfile::tempdir().unwrap();
            cli::cmd_inflation(&lowdim, dir.path(), &quiet(Some(threads))).unwrap();
            read_all(dir.path(), &names)
        })
        .collect();
    let same = runs.windows(2).all(|w| w[0] == w[1]);
    pass &= same;
    parts.push(format!(
        "low-dim inflation Q=1000 with 1, 8, 8 workers identical: {same}"
    ));

    report(11, "determinism", pass, &parts.join("; "));
}
