//! Monitored quantities along a path and closed-form collapse bounds.
//!
//! Observation-space quantities use the whitened images
//! `𝔢^{(j)} = Γ^{-1/2}A e^{(j)}` and `𝔯^{(j)} = Γ^{-1/2}A (u^{(j)} − u†)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ensemble::{centered, check_len, column_mean};
use crate::error::{invalid, EkiError, Result};
use crate::model::LinearForwardModel;
use crate::Ensemble;

/// Snapshot of the monitored quantities at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    /// `(1/J) Σ_j |𝔢^{(j)}|²`
    pub v_obs: f64,
    /// `(1/J) Σ_j |e^{(j)}|²`
    pub v_param: f64,
    /// `(1/J) Σ_j |𝔢^{(j)}|^p`
    pub v_obs_p: f64,
    /// `(1/J) Σ_j |𝔯^{(j)}|²`, when the truth is known.
    pub r_obs: Option<f64>,
    /// `(1/J) Σ_j |r^{(j)}|²`, when the truth is known.
    pub r_param: Option<f64>,
    /// `(1/J) Σ_j |e^{(j)}|² + |ū − ũ|²`
    pub v_lyap: f64,
}

/// Everything [`record`] needs besides the ensemble; built once per problem.
#[derive(Debug, Clone)]
pub struct DiagnosticsContext<'a> {
    model: &'a LinearForwardModel,
    u_truth: Option<DVector<f64>>,
    truth_image: Option<DVector<f64>>,
    u_tilde: DVector<f64>,
    p: f64,
}

impl<'a> DiagnosticsContext<'a> {
    pub fn new(model: &'a LinearForwardModel, y: &DVector<f64>, u_truth: Option<DVector<f64>>, p: f64) -> Result<Self> {
        check_len("diagnostics data", model.obs_dim(), y.len())?;
        if !(p >= 2.0 && p.is_finite()) {
            return Err(invalid("p", format!("moment order must be at least 2, got {p}")));
        }
        if let Some(u) = &u_truth {
            check_len("diagnostics truth", model.param_dim(), u.len())?;
        }
        let truth_image = u_truth.as_ref().map(|u| model.apply(u));
        Ok(Self {
            model,
            truth_image,
            u_truth,
            u_tilde: lyapunov_anchor(model, y),
            p,
        })
    }

    /// Minimum-norm preimage `ũ` used by the Lyapunov function.
    pub fn lyapunov_anchor(&self) -> &DVector<f64> {
        &self.u_tilde
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

/// Minimum-norm least-squares solution of `Γ^{-1/2}A ũ = Γ^{-1/2}y`, with
/// singular values below `1e-12 σ_max` discarded.
pub fn lyapunov_anchor(model: &LinearForwardModel, y: &DVector<f64>) -> DVector<f64> {
    let w = model.whitened_matrix();
    let b = model.noise().whiten(y);
    let svd = w.svd(true, true);
    let cutoff = 1e-12 * svd.singular_values.max();
    svd.solve(&b, cutoff).expect("both factors were computed")
}

/// Whitened forward deviations `𝔢^{(j)}`, column-wise (`K × J`).
pub fn whitened_deviations(ens: &Ensemble, model: &LinearForwardModel) -> DMatrix<f64> {
    let g = model.apply_columns(ens.particles());
    model.noise().whiten_columns(&centered(&g))
}

/// Whitened residuals `𝔯^{(j)} = Γ^{-1/2}A(u^{(j)} − u†)`, column-wise.
pub fn whitened_residuals(ens: &Ensemble, model: &LinearForwardModel, u_truth: &DVector<f64>) -> DMatrix<f64> {
    let mut g = model.apply_columns(ens.particles());
    let truth_image = model.apply(u_truth);
    for mut col in g.column_iter_mut() {
        col -= &truth_image;
    }
    model.noise().whiten_columns(&g)
}

fn mean_sq_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.norm_squared()).sum::<f64>() / m.ncols() as f64
}

/// Computes all monitored quantities for one ensemble.
pub fn record(ens: &Ensemble, ctx: &DiagnosticsContext<'_>, t: f64) -> Result<DiagnosticsRecord> {
    let model = ctx.model;
    check_len("diagnostics ensemble", model.param_dim(), ens.dim())?;
    let j = ens.size() as f64;
    let g = model.apply_columns(ens.particles());
    let white_dev = model.noise().whiten_columns(&centered(&g));
    let v_obs = mean_sq_norm(&white_dev);
    let v_obs_p = white_dev.column_iter().map(|c| c.norm().powf(ctx.p)).sum::<f64>() / j;
    let e = ens.deviations();
    let v_param = mean_sq_norm(&e);
    let mean = column_mean(ens.particles());
    let v_lyap = v_param + (&mean - &ctx.u_tilde).norm_squared();

    let (r_obs, r_param) = match (&ctx.u_truth, &ctx.truth_image) {
        (Some(u), Some(image)) => {
            let mut diff = g;
            for mut col in diff.column_iter_mut() {
                col -= image;
            }
            let r_obs = mean_sq_norm(&model.noise().whiten_columns(&diff));
            let r_param = ens
                .particles()
                .column_iter()
                .map(|c| (c - u).norm_squared())
                .sum::<f64>()
                / j;
            (Some(r_obs), Some(r_param))
        }
        _ => (None, None),
    };
    Ok(DiagnosticsRecord {
        t,
        v_obs,
        v_param,
        v_obs_p,
        r_obs,
        r_param,
        v_lyap,
    })
}

/// `C(p, J) = (p/J²)(1 − (p−2+J)(J−1)/(2J²) − (p−2)/(2J²))`.
pub fn c_constant(p: f64, j: usize) -> f64 {
    let jf = j as f64;
    let j2 = jf * jf;
    p / j2 * (1.0 - (p - 2.0 + jf) * (jf - 1.0) / (2.0 * j2) - (p - 2.0) / (2.0 * j2))
}

/// Second-moment collapse bound `1 / ((J+1)/J² · t + 1/C₀)`.
pub fn bound_thm2(t: f64, j: usize, c0: f64) -> f64 {
    let jf = j as f64;
    1.0 / ((jf + 1.0) / (jf * jf) * t + 1.0 / c0)
}

/// `p`-th moment collapse bound, valid for `p ∈ (2, (J+3)/2)`:
/// `J^{p/2} / ((2/p) C(p,J) K^{-2/p} J^{1-2/p} t + (K^{(p-1)/2} V₀)^{-2/p})^{p/2}`.
pub fn bound_thm3(t: f64, p: f64, j: usize, k: usize, v0: f64) -> Result<f64> {
    check_p_range(p, j)?;
    let (jf, kf) = (j as f64, k as f64);
    let rate = 2.0 / p * c_constant(p, j) * kf.powf(-2.0 / p) * jf.powf(1.0 - 2.0 / p);
    let offset = (kf.powf((p - 1.0) / 2.0) * v0).powf(-2.0 / p);
    Ok(jf.powf(p / 2.0) / (rate * t + offset).powf(p / 2.0))
}

fn check_p_range(p: f64, j: usize) -> Result<()> {
    let upper = (j as f64 + 3.0) / 2.0;
    if p > 2.0 && p < upper {
        Ok(())
    } else {
        Err(invalid("p", format!("must lie in (2, {upper}) for J = {j}, got {p}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    SecondMoment,
    PMoment,
}

/// A collapse bound with its parameters fixed, as a function of time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCurve {
    pub kind: BoundKind,
    pub j: usize,
    pub k: usize,
    pub p: f64,
    pub initial_moment: f64,
}

impl BoundCurve {
    pub fn second_moment(j: usize, c0: f64) -> Result<Self> {
        if !(c0 > 0.0) {
            return Err(invalid("C0", "initial moment must be positive"));
        }
        Ok(Self {
            kind: BoundKind::SecondMoment,
            j,
            k: 0,
            p: 2.0,
            initial_moment: c0,
        })
    }

    pub fn p_moment(p: f64, j: usize, k: usize, v0: f64) -> Result<Self> {
        check_p_range(p, j)?;
        if !(v0 > 0.0) {
            return Err(invalid("V0", "initial moment must be positive"));
        }
        Ok(Self {
            kind: BoundKind::PMoment,
            j,
            k,
            p,
            initial_moment: v0,
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.kind {
            BoundKind::SecondMoment => bound_thm2(t, self.j, self.initial_moment),
            BoundKind::PMoment => {
                bound_thm3(t, self.p, self.j, self.k, self.initial_moment).expect("validated at construction")
            }
        }
    }
}

/// Least-squares slope of `ln value` against `ln t` over `t ∈ [lo, hi]`.
pub fn rate_slope(times: &[f64], values: &[f64], window: (f64, f64)) -> Result<f64> {
    if times.len() != values.len() {
        return Err(EkiError::DimensionMismatch {
            context: "rate_slope values",
            expected: times.len(),
            got: values.len(),
        });
    }
    let mut pts = Vec::new();
    for (&t, &v) in times.iter().zip(values) {
        if t >= window.0 && t <= window.1 {
            if !(t > 0.0) {
                return Err(invalid("window", "log-log fit needs t > 0"));
            }
            if !(v > 0.0) {
                return Err(EkiError::NonPositiveValue(v, t));
            }
            pts.push((t.ln(), v.ln()));
        }
    }
    if pts.len() < 3 {
        return Err(EkiError::TooFewPoints(pts.len()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Smallest eigenvalue of `AᵀΓ^{-1}A` on the whole parameter space.
pub fn sigma_min_transfer(model: &LinearForwardModel) -> Result<f64> {
    restricted_sigma_min(&model.whitened_matrix())
}

/// Smallest eigenvalue of `AᵀΓ^{-1}A` restricted to the span of the given
/// ensemble (an orthonormal basis of the span is used).
pub fn sigma_min_transfer_on_span(model: &LinearForwardModel, span: &Ensemble) -> Result<f64> {
    check_len("span dimension", model.param_dim(), span.dim())?;
    let basis = orthonormal_basis(span.particles())?;
    restricted_sigma_min(&(model.whitened_matrix() * basis))
}

fn restricted_sigma_min(w: &DMatrix<f64>) -> Result<f64> {
    if w.nrows() < w.ncols() {
        return Err(EkiError::SingularRestriction(0.0));
    }
    let sv = w.singular_values();
    let (min, max) = (sv.min(), sv.max());
    if min <= 1e-12 * max {
        return Err(EkiError::SingularRestriction(min));
    }
    Ok(min * min)
}

fn orthonormal_basis(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, false);
    let max = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-12 * max).count();
    if rank == 0 {
        return Err(EkiError::SingularRestriction(0.0));
    }
    let u = svd.u.expect("requested");
    // nalgebra sorts singular values in decreasing order.
    Ok(u.columns(0, rank).into_owned())
}

/// Coordinates of every particle in the basis formed by `initial`
/// (`u^{(j)} = Σ_l v_{jl} u₀^{(l)}`), column `j` holding `v_j`.
pub fn span_coordinates(initial: &Ensemble, ens: &Ensemble) -> Result<DMatrix<f64>> {
    check_len("span coordinates dimension", initial.dim(), ens.dim())?;
    let svd = initial.particles().clone().svd(true, true);
    let cutoff = 1e-12 * svd.singular_values.max();
    svd.solve(ens.particles(), cutoff)
        .map_err(|e| EkiError::InvalidEnsemble(e.to_string()))
}

/// Largest relative distance of a particle from the span of `initial`:
/// `max_j |u^{(j)} − P u^{(j)}| / |u^{(j)}|`.
pub fn subspace_residual(initial: &Ensemble, ens: &Ensemble) -> Result<f64> {
    check_len("subspace residual dimension", initial.dim(), ens.dim())?;
    let q = orthonormal_basis(initial.particles())?;
    let mut worst: f64 = 0.0;
    for col in ens.particles().column_iter() {
        let proj = &q * q.tr_mul(&col);
        let norm = col.norm();
        if norm > 0.0 {
            worst = worst.max((col - proj).norm() / norm);
        }
    }
    Ok(worst)
}
