//! Linear inverse problem definition: forward matrix, observational noise
//! covariance, data and the variance inflation schedule.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::ensemble::check_len;
use crate::error::{invalid, EkiError, Result};

/// A symmetric positive definite noise covariance `Γ` with its lower
/// Cholesky factor `L` (`Γ = L Lᵀ`).
///
/// Every `Γ^{-1/2}` application in this crate is `L^{-1}` (a triangular solve)
/// and every `Γ^{1/2}` application is `L`. Norms and inner products in the
/// whitened space do not depend on which square root is used.
#[derive(Debug, Clone)]
pub struct NoiseCovariance {
    gamma: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl NoiseCovariance {
    pub fn new(gamma: DMatrix<f64>) -> Result<Self> {
        if gamma.nrows() == 0 || gamma.nrows() != gamma.ncols() {
            return Err(EkiError::InvalidModel(format!(
                "noise covariance must be square and non-empty, got {}x{}",
                gamma.nrows(),
                gamma.ncols()
            )));
        }
        let scale = gamma.amax();
        let asym = (&gamma - gamma.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(EkiError::InvalidModel(format!(
                "noise covariance is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let chol = Cholesky::new(gamma.clone()).ok_or(EkiError::Cholesky("noise covariance"))?;
        Ok(Self { gamma, chol })
    }

    /// `Γ = σ² I_K`.
    pub fn isotropic(k: usize, std_dev: f64) -> Result<Self> {
        if !(std_dev > 0.0 && std_dev.is_finite()) {
            return Err(invalid("noise_std", "must be positive and finite"));
        }
        Self::new(DMatrix::identity(k, k) * (std_dev * std_dev))
    }

    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `L^{-1} v`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `L^{-1} M`, column by column.
    pub fn whiten_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(m)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `L^{-T} v`.
    pub fn whiten_adjoint(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .tr_solve_lower_triangular(v)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `L^{-T} M`.
    pub fn whiten_adjoint_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .tr_solve_lower_triangular(m)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `L v`.
    pub fn color(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.l() * v
    }

    /// `Γ^{-1} v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// `|v|_Γ² = vᵀ Γ^{-1} v`.
    pub fn weighted_norm_sq(&self, v: &DVector<f64>) -> f64 {
        self.whiten(v).norm_squared()
    }
}

/// Linear forward map `G(u) = A u` together with the noise covariance.
#[derive(Debug, Clone)]
pub struct LinearForwardModel {
    a: DMatrix<f64>,
    noise: NoiseCovariance,
}

impl LinearForwardModel {
    pub fn new(a: DMatrix<f64>, noise: NoiseCovariance) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(EkiError::InvalidModel("forward matrix must be non-empty".into()));
        }
        check_len("forward matrix rows vs noise covariance", noise.dim(), a.nrows())?;
        if a.iter().any(|x| !x.is_finite()) {
            return Err(EkiError::NonFinite("forward matrix"));
        }
        Ok(Self { a, noise })
    }

    pub fn with_gamma(a: DMatrix<f64>, gamma: DMatrix<f64>) -> Result<Self> {
        Self::new(a, NoiseCovariance::new(gamma)?)
    }

    /// Number of observations `K`.
    pub fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Parameter dimension `d`.
    pub fn param_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn noise(&self) -> &NoiseCovariance {
        &self.noise
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.a * u
    }

    /// Forward values of every particle, as columns (`K × J`). Each column is
    /// computed exactly as [`LinearForwardModel::apply`] would compute it.
    pub fn apply_columns(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.obs_dim(), particles.ncols());
        for (j, col) in particles.column_iter().enumerate() {
            out.set_column(j, &self.apply(&col.clone_owned()));
        }
        out
    }

    /// `L^{-1} A`, the noise-whitened forward matrix.
    pub fn whitened_matrix(&self) -> DMatrix<f64> {
        self.noise.whiten_columns(&self.a)
    }
}

/// Least-squares misfit `½ |Γ^{-1/2}(y − A u)|²`.
pub fn misfit(model: &LinearForwardModel, y: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
    check_len("misfit data", model.obs_dim(), y.len())?;
    check_len("misfit parameter", model.param_dim(), u.len())?;
    Ok(0.5 * model.noise().weighted_norm_sq(&(y - model.apply(u))))
}

/// Data `y`, optionally with the truth `u†` that generated it.
#[derive(Debug, Clone)]
pub struct ObservationSetup {
    pub y: DVector<f64>,
    pub u_truth: Option<DVector<f64>>,
    pub noise_free: bool,
}

impl ObservationSetup {
    /// Noise-free data `y = A u†`.
    pub fn noise_free(model: &LinearForwardModel, u_truth: DVector<f64>) -> Result<Self> {
        check_len("truth", model.param_dim(), u_truth.len())?;
        Ok(Self {
            y: model.apply(&u_truth),
            u_truth: Some(u_truth),
            noise_free: true,
        })
    }

    pub fn new(
        model: &LinearForwardModel,
        y: DVector<f64>,
        u_truth: Option<DVector<f64>>,
        noise_free: bool,
    ) -> Result<Self> {
        check_len("data", model.obs_dim(), y.len())?;
        if let Some(u) = &u_truth {
            check_len("truth", model.param_dim(), u.len())?;
            if noise_free {
                let gap = (&y - model.apply(u)).norm();
                if gap > 1e-10 * y.norm() {
                    return Err(EkiError::InvalidModel(format!(
                        "data flagged noise-free but |y - A u_truth| = {gap:e}"
                    )));
                }
            }
        }
        if y.iter().any(|x| !x.is_finite()) {
            return Err(EkiError::NonFinite("data"));
        }
        Ok(Self { y, u_truth, noise_free })
    }
}

/// Time-decaying covariance inflation `B / (t^α + R)` added to the empirical
/// covariance in the drift.
#[derive(Debug, Clone)]
pub struct InflationSchedule {
    alpha: f64,
    r: f64,
    b: DMatrix<f64>,
    lambda_min_b: f64,
}

impl InflationSchedule {
    pub fn new(alpha: f64, r: f64, b: DMatrix<f64>) -> Result<Self> {
        Self::check_scalars(alpha, r)?;
        if b.nrows() != b.ncols() {
            return Err(invalid("B", "must be square"));
        }
        let scale = b.amax().max(f64::MIN_POSITIVE);
        if (&b - b.transpose()).amax() > 1e-12 * scale {
            return Err(invalid("B", "must be symmetric"));
        }
        let eig = SymmetricEigen::new(b.clone());
        let lambda_min_b = eig.eigenvalues.min();
        if lambda_min_b < -1e-12 * scale {
            return Err(invalid(
                "B",
                format!("must be positive semidefinite (smallest eigenvalue {lambda_min_b:e})"),
            ));
        }
        Ok(Self {
            alpha,
            r,
            b,
            lambda_min_b: lambda_min_b.max(0.0),
        })
    }

    /// `B = scale · I_d`.
    pub fn scaled_identity(d: usize, alpha: f64, r: f64, scale: f64) -> Result<Self> {
        Self::check_scalars(alpha, r)?;
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(invalid("B", "identity scale must be nonnegative"));
        }
        Ok(Self {
            alpha,
            r,
            b: DMatrix::identity(d, d) * scale,
            lambda_min_b: scale,
        })
    }

    fn check_scalars(alpha: f64, r: f64) -> Result<()> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
        }
        if !(r > 0.0 && r.is_finite()) {
            return Err(invalid("R", format!("must be positive, got {r}")));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn lambda_min_b(&self) -> f64 {
        self.lambda_min_b
    }

    /// `1 / (t^α + R)`.
    pub fn factor(&self, t: f64) -> f64 {
        1.0 / (t.powf(self.alpha) + self.r)
    }
}
