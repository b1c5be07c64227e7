//! Brute-force reference computations for the test suite.
//!
//! Nothing here calls into [`crate::dynamics`]: every routine rebuilds its
//! quantities from the raw matrices with explicit loops and dense inverses.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, EkiError, Result};
use crate::model::LinearForwardModel;
use crate::Ensemble;

/// Mean of the perturbed-observation update, `ū + K(y − Ḡ)` with
/// `K = C^{up}(C^{pp} + Γ/dt)^{-1}`.
pub fn kalman_mean_update(
    ens: &Ensemble,
    model: &LinearForwardModel,
    y: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let (d, j) = (ens.dim(), ens.size());
    let k = model.obs_dim();
    if model.param_dim() != d || y.len() != k {
        return Err(EkiError::DimensionMismatch {
            context: "kalman_mean_update",
            expected: d,
            got: model.param_dim(),
        });
    }
    if !(dt > 0.0) {
        return Err(invalid("dt", "must be positive"));
    }
    let u = ens.particles();
    let a = model.matrix();
    let mut g = DMatrix::<f64>::zeros(k, j);
    for l in 0..j {
        for r in 0..k {
            g[(r, l)] = (0..d).map(|c| a[(r, c)] * u[(c, l)]).sum();
        }
    }
    let u_mean: Vec<f64> = (0..d)
        .map(|i| (0..j).map(|l| u[(i, l)]).sum::<f64>() / j as f64)
        .collect();
    let g_mean: Vec<f64> = (0..k)
        .map(|i| (0..j).map(|l| g[(i, l)]).sum::<f64>() / j as f64)
        .collect();
    let mut cpp = DMatrix::<f64>::zeros(k, k);
    let mut cup = DMatrix::<f64>::zeros(d, k);
    for l in 0..j {
        for r in 0..k {
            let gr = g[(r, l)] - g_mean[r];
            for s in 0..k {
                cpp[(r, s)] += gr * (g[(s, l)] - g_mean[s]) / j as f64;
            }
            for i in 0..d {
                cup[(i, r)] += (u[(i, l)] - u_mean[i]) * gr / j as f64;
            }
        }
    }
    let system = cpp + model.noise().matrix() / dt;
    let inverse = system
        .try_inverse()
        .ok_or(EkiError::Cholesky("kalman_mean_update system"))?;
    let innovation = DVector::from_fn(k, |r, _| y[r] - g_mean[r]);
    Ok(DVector::from_vec(u_mean) + cup * inverse * innovation)
}

/// Empirical quadratic-covariation rates of centered Brownian increments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovariationEstimate {
    /// Rate of `⟨u, dW̃^{(0)}⟩⟨v, dW̃^{(0)}⟩`.
    pub diag: f64,
    /// Rate of `⟨u, dW̃^{(0)}⟩⟨v, dW̃^{(1)}⟩`.
    pub cross: f64,
    pub diag_se: f64,
    pub cross_se: f64,
    /// `(J−1)/J · ⟨u, v⟩`
    pub diag_target: f64,
    /// `−⟨u, v⟩ / J`
    pub cross_target: f64,
}

impl CovariationEstimate {
    /// Both estimates within `n_se` standard errors of their targets.
    pub fn within(&self, n_se: f64) -> bool {
        (self.diag - self.diag_target).abs() <= n_se * self.diag_se
            && (self.cross - self.cross_target).abs() <= n_se * self.cross_se
    }
}

/// Estimates covariation rates from a sequence of centered increment samples
/// (`K × J`, column `j` holding `W^{(j)} − W̄` over one step of length `dt`).
pub fn covariation_from_samples<I>(
    samples: I,
    u: &DVector<f64>,
    v: &DVector<f64>,
    dt: f64,
) -> Result<CovariationEstimate>
where
    I: IntoIterator<Item = DMatrix<f64>>,
{
    let mut diag = Vec::new();
    let mut cross = Vec::new();
    let mut j = 0;
    for s in samples {
        if s.nrows() != u.len() || s.nrows() != v.len() {
            return Err(EkiError::DimensionMismatch {
                context: "covariation sample",
                expected: u.len(),
                got: s.nrows(),
            });
        }
        j = s.ncols();
        if j < 2 {
            return Err(EkiError::InvalidEnsemble("need at least 2 Brownian motions".into()));
        }
        let pu0: f64 = (0..s.nrows()).map(|r| u[r] * s[(r, 0)]).sum();
        let pv0: f64 = (0..s.nrows()).map(|r| v[r] * s[(r, 0)]).sum();
        let pv1: f64 = (0..s.nrows()).map(|r| v[r] * s[(r, 1)]).sum();
        diag.push(pu0 * pv0 / dt);
        cross.push(pu0 * pv1 / dt);
    }
    if diag.len() < 2 {
        return Err(EkiError::TooFewPoints(diag.len()));
    }
    let uv: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    let (diag, diag_se) = mean_and_se(&diag);
    let (cross, cross_se) = mean_and_se(&cross);
    let jf = j as f64;
    Ok(CovariationEstimate {
        diag,
        cross,
        diag_se,
        cross_se,
        diag_target: (jf - 1.0) / jf * uv,
        cross_target: -uv / jf,
    })
}

/// Draws `n_samples` independent sets of `J` Brownian increments in `ℝ^K`,
/// centers them by their mean, and estimates the covariation rates along
/// the directions `u`, `v`.
pub fn noise_covariation_check<R: Rng + ?Sized>(
    j: usize,
    dt: f64,
    n_samples: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
    rng: &mut R,
) -> Result<CovariationEstimate> {
    if n_samples < 10_000 {
        return Err(invalid(
            "n_samples",
            format!("need at least 10^4 samples, got {n_samples}"),
        ));
    }
    let k = u.len();
    let sd = dt.sqrt();
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut w = DMatrix::zeros(k, j);
        for l in 0..j {
            for r in 0..k {
                let z: f64 = rng.sample(StandardNormal);
                w[(r, l)] = sd * z;
            }
        }
        for r in 0..k {
            let m: f64 = (0..j).map(|l| w[(r, l)]).sum::<f64>() / j as f64;
            for l in 0..j {
                w[(r, l)] -= m;
            }
        }
        samples.push(w);
    }
    covariation_from_samples(samples, u, v, dt)
}

/// Outcome of checking the four norm-equivalence inequalities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnormReport {
    pub trials: usize,
    pub violations: usize,
    /// Largest observed `lhs / rhs` over all inequalities and trials.
    pub worst_ratio: f64,
}

impl PnormReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// The four sums `(column-wise, entry-wise, row-wise)` used by the
/// norm-equivalence inequalities for a `d × J` array `a`:
/// `Σ_j (Σ_m a²)^{p/2}`, `Σ_{m,j} |a|^p`, `Σ_m (Σ_j a²)^{p/2}`.
fn pnorm_sums(a: &DMatrix<f64>, p: f64) -> (f64, f64, f64) {
    let (d, j) = a.shape();
    let by_col: f64 = (0..j)
        .map(|c| (0..d).map(|m| a[(m, c)] * a[(m, c)]).sum::<f64>().powf(p / 2.0))
        .sum();
    let entry: f64 = a.iter().map(|x| x.abs().powf(p)).sum();
    let by_row: f64 = (0..d)
        .map(|m| (0..j).map(|c| a[(m, c)] * a[(m, c)]).sum::<f64>().powf(p / 2.0))
        .sum();
    (by_col, entry, by_row)
}

/// Inequality pairs `(lhs, rhs)` in the order
/// `col ≤ d^{(p−1)/2}·entry`, `entry ≤ J^{p/2}·row`, `row ≤ J^{p/2}·entry`,
/// `entry ≤ d^{(p−1)/2}·col`.
pub fn pnorm_inequalities(a: &DMatrix<f64>, p: u32) -> [(f64, f64); 4] {
    let pf = f64::from(p);
    let (d, j) = (a.nrows() as f64, a.ncols() as f64);
    let cd = d.powf((pf - 1.0) / 2.0);
    let cj = j.powf(pf / 2.0);
    let (col, entry, row) = pnorm_sums(a, pf);
    [
        (col, cd * entry),
        (entry, cj * row),
        (row, cj * entry),
        (entry, cd * col),
    ]
}

/// Checks the inequalities on `trials` random `d × J` arrays. A relative
/// slack of `1e-12` absorbs rounding in cases where an inequality is tight.
pub fn pnorm_equivalence_check<R: Rng + ?Sized>(
    d: usize,
    j: usize,
    p: u32,
    trials: usize,
    rng: &mut R,
) -> Result<PnormReport> {
    if p < 2 {
        return Err(invalid("p", format!("must be an integer ≥ 2, got {p}")));
    }
    if d == 0 || j == 0 {
        return Err(invalid("shape", "array must be nonempty"));
    }
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let a = DMatrix::from_fn(d, j, |_, _| rng.sample::<f64, _>(StandardNormal));
        for (lhs, rhs) in pnorm_inequalities(&a, p) {
            if lhs > rhs * (1.0 + 1e-12) {
                violations += 1;
            }
            if rhs > 0.0 {
                worst = worst.max(lhs / rhs);
            }
        }
    }
    Ok(PnormReport {
        trials,
        violations,
        worst_ratio: worst,
    })
}

/// `Σ_{k,l} ⟨z_k, z_l⟩⟨z_k, M z_l⟩` for vectors stored column-wise in `z`.
pub fn quadratic_form_sum(z: &DMatrix<f64>, m: &DMatrix<f64>) -> f64 {
    let n = z.ncols();
    let mut total = 0.0;
    for k in 0..n {
        for l in 0..n {
            let zk = z.column(k);
            let zl = z.column(l);
            total += zk.dot(&zl) * zk.dot(&(m * zl));
        }
    }
    total
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
