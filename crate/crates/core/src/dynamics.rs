//! Particle update rules.
//!
//! * [`eki_discrete_step`]: the discrete iteration with perturbed observations,
//!   `u⁺ = u + C^{up}(C^{pp} + h^{-1}Γ)^{-1}(y + ξ − G(u))`, `ξ ~ N(0, h^{-1}Γ)`.
//! * [`sde_linear_step`]: explicit Euler–Maruyama for
//!   `du = C(u)AᵀΓ^{-1}(y − Au)dt + C(u)AᵀΓ^{-1/2}dW`.
//! * [`sde_inflated_step`]: as above with `C(u)` replaced by
//!   `C(u) + B/(t^α + R)` in the drift only.
//! * [`eki_discrete_inflated_step`]: the discrete iteration with the same
//!   drift-only inflation. Its gain system `C^{pp} + h_t ABAᵀ + h^{-1}Γ`
//!   keeps it stable for step sizes at which the explicit inflated step
//!   diverges on stiff problems.
//! * [`sde_nonlinear_step`]: the same Euler–Maruyama form written with an
//!   arbitrary forward callback. It is exploratory; no convergence theory backs it.
//!
//! All SDE steps share one kernel: with whitened forward deviations
//! `𝔤_k = Γ^{-1/2}(G_k − Ḡ)` and `z_j = Γ^{-1/2}(y − G_j)dt + ΔW_j`, the
//! increment of particle `j` is `(1/J) Σ_k ⟨𝔤_k, z_j⟩ e_k`. The covariance is
//! frozen at the left endpoint of the step.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{centered, check_len};
use crate::error::{invalid, EkiError, Result};
use crate::model::{InflationSchedule, LinearForwardModel, NoiseCovariance};
use crate::Ensemble;

/// Particle update scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    DiscreteEki,
    DiscreteEkiInflated,
    SdeLinear,
    SdeLinearInflated,
    SdeNonlinear,
}

impl Scheme {
    pub fn is_inflated(self) -> bool {
        matches!(self, Scheme::DiscreteEkiInflated | Scheme::SdeLinearInflated)
    }

    /// The same scheme with inflation removed.
    pub fn without_inflation(self) -> Self {
        match self {
            Scheme::DiscreteEkiInflated => Scheme::DiscreteEki,
            Scheme::SdeLinearInflated => Scheme::SdeLinear,
            other => other,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepConfig {
    pub dt: f64,
    pub scheme: Scheme,
    pub inflation: Option<InflationSchedule>,
}

impl StepConfig {
    pub fn new(dt: f64, scheme: Scheme, inflation: Option<InflationSchedule>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {dt}")));
        }
        match (scheme.is_inflated(), inflation.is_some()) {
            (true, false) => Err(invalid("inflation", "required by inflated schemes")),
            (false, true) => Err(invalid("inflation", "only allowed with inflated schemes")),
            _ => Ok(Self { dt, scheme, inflation }),
        }
    }
}

/// Per-particle Gaussian draws for one step, stored column-wise (`K × J`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    values: DMatrix<f64>,
}

impl NoiseDraw {
    /// Standard normal draws, consumed particle by particle.
    pub fn standard<R: Rng + ?Sized>(k: usize, j: usize, rng: &mut R) -> Self {
        let mut values = DMatrix::zeros(k, j);
        for col in 0..j {
            for row in 0..k {
                values[(row, col)] = rng.sample(StandardNormal);
            }
        }
        Self { values }
    }

    /// Brownian increments `ΔW ~ N(0, dt I_K)`.
    pub fn brownian<R: Rng + ?Sized>(k: usize, j: usize, dt: f64, rng: &mut R) -> Self {
        let mut draw = Self::standard(k, j, rng);
        draw.values *= dt.sqrt();
        draw
    }

    /// Data perturbations `ξ ~ N(0, dt^{-1} Γ)`.
    pub fn perturbation<R: Rng + ?Sized>(noise: &NoiseCovariance, j: usize, dt: f64, rng: &mut R) -> Self {
        let z = Self::standard(noise.dim(), j, rng);
        Self {
            values: noise.cholesky_factor() * z.values / dt.sqrt(),
        }
    }

    pub fn from_matrix(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(k: usize, j: usize) -> Self {
        Self {
            values: DMatrix::zeros(k, j),
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

fn check_noise(noise: &NoiseDraw, k: usize, j: usize) -> Result<()> {
    check_len("noise draw rows", k, noise.values.nrows())?;
    check_len("noise draw particles", j, noise.values.ncols())
}

fn finite(particles: DMatrix<f64>) -> Result<Ensemble> {
    if particles.iter().any(|x| !x.is_finite()) {
        return Err(EkiError::NonFinite("ensemble after step (step size too large?)"));
    }
    Ensemble::from_columns(particles)
}

/// Shared Euler–Maruyama increment `(1/J) Σ_k ⟨𝔤_k, z_j⟩ e_k`, one column per
/// particle. `whitened_innov` holds `Γ^{-1/2}(y − G_j)`.
fn ensemble_increment(
    particles: &DMatrix<f64>,
    g_values: &DMatrix<f64>,
    whitened_innov: &DMatrix<f64>,
    noise: &NoiseCovariance,
    dt: f64,
    dw: &NoiseDraw,
) -> DMatrix<f64> {
    let j = particles.ncols() as f64;
    let e = centered(particles);
    let g_dev = noise.whiten_columns(&centered(g_values));
    let z = whitened_innov * dt + &dw.values;
    let coeff = g_dev.tr_mul(&z) / j;
    e * coeff
}

fn whitened_innovations(g_values: &DMatrix<f64>, y: &DVector<f64>, noise: &NoiseCovariance) -> DMatrix<f64> {
    let mut innov = -g_values.clone();
    for mut col in innov.column_iter_mut() {
        col += y;
    }
    noise.whiten_columns(&innov)
}

/// One step of the discrete iteration with perturbed observations, drawing
/// `ξ ~ N(0, dt^{-1}Γ)` from `rng`.
pub fn eki_discrete_step<R: Rng + ?Sized>(
    ens: &Ensemble,
    model: &LinearForwardModel,
    y: &DVector<f64>,
    dt: f64,
    rng: &mut R,
) -> Result<Ensemble> {
    let xi = NoiseDraw::perturbation(model.noise(), ens.size(), dt, rng);
    eki_discrete_step_with(ens, model, y, dt, &xi)
}

/// Discrete iteration with given perturbations `ξ` (columns already scaled).
pub fn eki_discrete_step_with(
    ens: &Ensemble,
    model: &LinearForwardModel,
    y: &DVector<f64>,
    dt: f64,
    xi: &NoiseDraw,
) -> Result<Ensemble> {
    check_len("discrete step parameter", model.param_dim(), ens.dim())?;
    check_len("discrete step data", model.obs_dim(), y.len())?;
    check_noise(xi, model.obs_dim(), ens.size())?;
    let g = model.apply_columns(ens.particles());
    let cup = ens.cross_cov_up(&g)?;
    let system = ens.cross_cov_pp(&g)? + model.noise().matrix() / dt;
    let chol = cholesky_with_jitter(system)?;
    let mut innov = &xi.values - &g;
    for mut col in innov.column_iter_mut() {
        col += y;
    }
    let gain_applied = cup * chol.solve(&innov);
    finite(ens.particles() + gain_applied)
}

/// Cholesky factorization with a single retry after adding `1e-12 · trace` to
/// the diagonal.
pub(crate) fn cholesky_with_jitter(m: DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(EkiError::NonFinite("Kalman gain system"));
    }
    let jitter = 1e-12 * m.trace().abs();
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => {
            let n = m.nrows();
            Cholesky::new(m + DMatrix::identity(n, n) * jitter).ok_or(EkiError::Cholesky("Kalman gain system"))
        }
    }
}

/// Euler–Maruyama step of the linear continuous-time limit.
pub fn sde_linear_step<R: Rng + ?Sized>(
    ens: &Ensemble,
    model: &LinearForwardModel,
    y: &DVector<f64>,
    dt: f64,
    rng: &mut R,
) -> Result<Ensemble> {
    let dw = NoiseDraw::brownian(model.obs_dim(), ens.size(), dt, rng);
    sde_linear_step_with(ens, model, y, dt, &dw)
}

pub fn sde_linear_step_with(
    ens: &Ensemble,
    model: &LinearForwardModel,
    y: &DVector<f64>,
    dt: f64,
    dw: &NoiseDraw,
) -> Result<Ensemble> {
    check_len("sde step parameter", model.param_dim(), ens.dim())?;
    check_len("sde step data", model.obs_dim(), y.len())?;
    check_noise(dw, model.obs_dim(), ens.size())?;
    let g = model.apply_columns(ens.particles());
    let innov = whitened_innovations(&g, y, model.noise());
    let incr = ensemble_increment(ens.particles(), &g, &innov, model.noise(), dt, dw);
    finite(ens.particles() + incr)
}

/// Products of `B` with the forward map, precomputed for inflated steps.
#[derive(Debug, Clone)]
pub struct InflationOperator {
    schedule: InflationSchedule,
    /// `B AᵀΓ^{-1/2}`, `d × K`.
    b_adjoint: DMatrix<f64>,
    /// `B Aᵀ`, `d × K`.
    b_at: DMatrix<f64>,
    /// `A B Aᵀ`, `K × K`.
    a_b_at: DMatrix<f64>,
}

impl InflationOperator {
    pub fn new(schedule: &InflationSchedule, model: &LinearForwardModel) -> Result<Self> {
        check_len("inflation operator dimension", model.param_dim(), schedule.b().nrows())?;
        let adjoint = model.whitened_matrix().transpose();
        let b_at = schedule.b() * model.matrix().transpose();
        let a_b_at = model.matrix() * &b_at;
        Ok(Self {
            schedule: schedule.clone(),
            b_adjoint: schedule.b() * adjoint,
            b_at,
            a_b_at,
        })
    }

    pub fn schedule(&self) -> &InflationSchedule {
        &self.schedule
    }
}

/// Euler–Maruyama step of the inflated dynamics; the inflation factor is
/// evaluated at the left endpoint `t`.
#[allow(clippy::too_many_arguments)]
pub fn sde_inflated_step<R: Rng + ?Sized>(
    ens: &Ensemble,
    model: &LinearForwardModel,
    y: &DVector<f64>,
    t: f64,
    dt: f64,
    schedule: &InflationSchedule,
    rng: &mut R,
) -> Result<Ensemble> {
    let dw = NoiseDraw::brownian(model.obs_dim(), ens.size(), dt, rng);
    let op = InflationOperator::new(schedule, model)?;
    sde_inflated_step_with(ens, model, y, t, dt, &op, &dw)
}

pub fn sde_inflated_step_with(
    ens: &Ensemble,
    model: &LinearForwardModel,
    y: &DVector<f64>,
    t: f64,
    dt: f64,
    op: &InflationOperator,
    dw: &NoiseDraw,
) -> Result<Ensemble> {
    check_len("sde step parameter", model.param_dim(), ens.dim())?;
    check_len("sde step data", model.obs_dim(), y.len())?;
    check_noise(dw, model.obs_dim(), ens.size())?;
    if !(t >= 0.0) {
        return Err(invalid("t", "must be nonnegative"));
    }
    let g = model.apply_columns(ens.particles());
    let innov = whitened_innovations(&g, y, model.noise());
    let mut incr = ensemble_increment(ens.particles(), &g, &innov, model.noise(), dt, dw);
    incr += &op.b_adjoint * &innov * (dt * op.schedule.factor(t));
    finite(ens.particles() + incr)
}

/// Discrete iteration with drift-only inflation, drawing `ξ ~ N(0, dt^{-1}Γ)`.
pub fn eki_discrete_inflated_step<R: Rng + ?Sized>(
    ens: &Ensemble,
    model: &LinearForwardModel,
    y: &DVector<f64>,
    t: f64,
    dt: f64,
    op: &InflationOperator,
    rng: &mut R,
) -> Result<Ensemble> {
    let xi = NoiseDraw::perturbation(model.noise(), ens.size(), dt, rng);
    eki_discrete_inflated_step_with(ens, model, y, t, dt, op, &xi)
}

/// `u⁺ = u + C^{up}S^{-1}(y + ξ − Au) + h_t BAᵀS^{-1}(y − Au)` with
/// `S = C^{pp} + h_t ABAᵀ + dt^{-1}Γ` and `h_t = 1/(t^α + R)`. The
/// perturbations enter through the ensemble gain only, so the noise is not
/// inflated. `B = 0` reproduces [`eki_discrete_step_with`] bit for bit.
pub fn eki_discrete_inflated_step_with(
    ens: &Ensemble,
    model: &LinearForwardModel,
    y: &DVector<f64>,
    t: f64,
    dt: f64,
    op: &InflationOperator,
    xi: &NoiseDraw,
) -> Result<Ensemble> {
    check_len("discrete step parameter", model.param_dim(), ens.dim())?;
    check_len("discrete step data", model.obs_dim(), y.len())?;
    check_noise(xi, model.obs_dim(), ens.size())?;
    if !(t >= 0.0) {
        return Err(invalid("t", "must be nonnegative"));
    }
    let h = op.schedule.factor(t);
    let g = model.apply_columns(ens.particles());
    let cup = ens.cross_cov_up(&g)?;
    let system = (ens.cross_cov_pp(&g)? + &op.a_b_at * h) + model.noise().matrix() / dt;
    let chol = cholesky_with_jitter(system)?;
    // Same operation order as the uninflated step, so B = 0 matches it exactly.
    let mut perturbed = &xi.values - &g;
    let mut residual = -g;
    for (mut p, mut r) in perturbed.column_iter_mut().zip(residual.column_iter_mut()) {
        p += y;
        r += y;
    }
    let gain_applied = cup * chol.solve(&perturbed) + &op.b_at * chol.solve(&residual) * h;
    finite(ens.particles() + gain_applied)
}

/// Euler–Maruyama step with a general forward callback `G`.
pub fn sde_nonlinear_step<F, R>(
    ens: &Ensemble,
    forward: F,
    noise: &NoiseCovariance,
    y: &DVector<f64>,
    dt: f64,
    rng: &mut R,
) -> Result<Ensemble>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    R: Rng + ?Sized,
{
    let dw = NoiseDraw::brownian(noise.dim(), ens.size(), dt, rng);
    sde_nonlinear_step_with(ens, forward, noise, y, dt, &dw)
}

pub fn sde_nonlinear_step_with<F>(
    ens: &Ensemble,
    forward: F,
    noise: &NoiseCovariance,
    y: &DVector<f64>,
    dt: f64,
    dw: &NoiseDraw,
) -> Result<Ensemble>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let k = noise.dim();
    check_len("sde step data", k, y.len())?;
    check_noise(dw, k, ens.size())?;
    let mut g = DMatrix::zeros(k, ens.size());
    for (j, col) in ens.particles().column_iter().enumerate() {
        let value = forward(&col.clone_owned());
        check_len("forward callback output", k, value.len())?;
        if value.iter().any(|x| !x.is_finite()) {
            return Err(EkiError::NonFinite("forward callback output"));
        }
        g.set_column(j, &value);
    }
    let innov = whitened_innovations(&g, y, noise);
    let incr = ensemble_increment(ens.particles(), &g, &innov, noise, dt, dw);
    finite(ens.particles() + incr)
}

/// Increments of `W^{(j)} − W̄` over a step of length `dt`, column-wise
/// (`K × J`), built from `J` independent `K`-dimensional Brownian increments.
pub fn correlated_increments<R: Rng + ?Sized>(j: usize, k: usize, dt: f64, rng: &mut R) -> DMatrix<f64> {
    let dw = NoiseDraw::brownian(k, j, dt, rng).values;
    if j == 0 {
        return dw;
    }
    let mean = dw.column_sum() / j as f64;
    let mut out = dw;
    for mut col in out.column_iter_mut() {
        col -= &mean;
    }
    out
}

/// Advances an ensemble according to a [`StepConfig`], caching whatever the
/// scheme needs across steps.
#[derive(Debug)]
pub struct Stepper<'a> {
    model: &'a LinearForwardModel,
    y: &'a DVector<f64>,
    config: &'a StepConfig,
    inflation: Option<InflationOperator>,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a LinearForwardModel, y: &'a DVector<f64>, config: &'a StepConfig) -> Result<Self> {
        check_len("stepper data", model.obs_dim(), y.len())?;
        let inflation = config
            .inflation
            .as_ref()
            .map(|s| InflationOperator::new(s, model))
            .transpose()?;
        Ok(Self {
            model,
            y,
            config,
            inflation,
        })
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    /// One step from time `t` to `t + dt`.
    pub fn step<R: Rng + ?Sized>(&self, ens: &Ensemble, t: f64, rng: &mut R) -> Result<Ensemble> {
        let dt = self.config.dt;
        let (model, y) = (self.model, self.y);
        match self.config.scheme {
            Scheme::DiscreteEki => eki_discrete_step(ens, model, y, dt, rng),
            Scheme::DiscreteEkiInflated => {
                let op = self.inflation.as_ref().expect("validated by StepConfig");
                eki_discrete_inflated_step(ens, model, y, t, dt, op, rng)
            }
            Scheme::SdeLinear => sde_linear_step(ens, model, y, dt, rng),
            Scheme::SdeLinearInflated => {
                let op = self.inflation.as_ref().expect("validated by StepConfig");
                let dw = NoiseDraw::brownian(model.obs_dim(), ens.size(), dt, rng);
                sde_inflated_step_with(ens, model, y, t, dt, op, &dw)
            }
            Scheme::SdeNonlinear => sde_nonlinear_step(ens, |u| model.apply(u), model.noise(), y, dt, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_problem(d: usize, k: usize, j: usize, seed: u64) -> (Ensemble, LinearForwardModel, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uni = |_, _| rng.random_range(-1.0..1.0);
        let ens = Ensemble::from_columns(DMatrix::from_fn(d, j, &mut uni)).unwrap();
        let a = DMatrix::from_fn(k, d, &mut uni);
        let s = DMatrix::from_fn(k, k, &mut uni);
        let gamma = &s * s.transpose() + DMatrix::identity(k, k);
        let y = DVector::from_fn(k, &mut uni);
        (ens, LinearForwardModel::with_gamma(a, gamma).unwrap(), y)
    }

    fn consensus(d: usize, j: usize) -> Ensemble {
        let v: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 0.7).collect();
        Ensemble::from_particles(&vec![v; j]).unwrap()
    }

    #[test]
    fn step_config_validation() {
        assert!(StepConfig::new(0.0, Scheme::SdeLinear, None).is_err());
        assert!(StepConfig::new(0.1, Scheme::SdeLinearInflated, None).is_err());
        let s = InflationSchedule::scaled_identity(2, 0.5, 1.0, 1.0).unwrap();
        assert!(StepConfig::new(0.1, Scheme::SdeLinear, Some(s.clone())).is_err());
        assert!(StepConfig::new(0.1, Scheme::SdeLinearInflated, Some(s.clone())).is_ok());
        assert!(StepConfig::new(0.1, Scheme::DiscreteEkiInflated, Some(s)).is_ok());
        assert!(StepConfig::new(0.1, Scheme::DiscreteEkiInflated, None).is_err());
        assert_eq!(Scheme::DiscreteEkiInflated.without_inflation(), Scheme::DiscreteEki);
        assert_eq!(Scheme::SdeLinear.without_inflation(), Scheme::SdeLinear);
    }

    #[test]
    fn consensus_is_fixed_point_of_every_scheme() {
        let (_, model, y) = random_problem(3, 2, 4, 1);
        let ens = consensus(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(eki_discrete_step(&ens, &model, &y, 0.1, &mut rng).unwrap(), ens);
        assert_eq!(sde_linear_step(&ens, &model, &y, 0.1, &mut rng).unwrap(), ens);
        assert_eq!(
            sde_nonlinear_step(&ens, |u| model.apply(u), model.noise(), &y, 0.1, &mut rng).unwrap(),
            ens
        );
    }

    #[test]
    fn linear_step_unchanged_at_data_consensus_without_noise() {
        // A is rank one so particles can differ while all satisfy A u = y.
        let model = LinearForwardModel::with_gamma(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let ens = Ensemble::from_particles(&[vec![1.0, 0.0], vec![1.0, 3.0], vec![1.0, -2.0]]).unwrap();
        let y = DVector::from_vec(vec![1.0, 1.0]);
        let out = sde_linear_step_with(&ens, &model, &y, 0.5, &NoiseDraw::zeros(2, 3)).unwrap();
        assert_eq!(out, ens);
    }

    #[test]
    fn scalar_discrete_mean_update() {
        // d = K = 1, A = Γ = 1, particles {0, 2}, y = 1, dt = 1: gain 1/2.
        let model = LinearForwardModel::with_gamma(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
        let ens = Ensemble::from_particles(&[vec![0.0], vec![2.0]]).unwrap();
        let y = DVector::from_vec(vec![1.0]);
        let out = eki_discrete_step_with(&ens, &model, &y, 1.0, &NoiseDraw::zeros(1, 2)).unwrap();
        assert!((out.particles()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((out.particles()[(0, 1)] - 1.5).abs() < 1e-15);
        let xi = NoiseDraw::from_matrix(DMatrix::from_row_slice(1, 2, &[0.4, -0.2]));
        let out = eki_discrete_step_with(&ens, &model, &y, 1.0, &xi).unwrap();
        assert!((out.particles()[(0, 0)] - 0.7).abs() < 1e-15);
        assert!((out.particles()[(0, 1)] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn linear_step_matches_inner_product_form() {
        let (ens, model, y) = random_problem(4, 3, 5, 7);
        let dt = 0.05;
        let dw = NoiseDraw::brownian(3, 5, dt, &mut ChaCha8Rng::seed_from_u64(8));
        let fast = sde_linear_step_with(&ens, &model, &y, dt, &dw).unwrap();
        // (1/J) Σ_k ⟨A e_k, (y − A u_j) dt + √Γ ΔW_j⟩_Γ e_k with the
        // ⟨·,·⟩_Γ inner product evaluated through Γ^{-1}.
        let gamma = model.noise().matrix().clone();
        let gamma_inv = gamma.clone().try_inverse().unwrap();
        let sqrt_gamma = model.noise().cholesky_factor();
        let (d, j) = (4, 5);
        let mean: DVector<f64> = ens.particles().column_sum() / j as f64;
        for jj in 0..j {
            let uj = ens.particle(jj);
            let target = (&y - model.matrix() * &uj) * dt + &sqrt_gamma * dw.values().column(jj);
            let mut out = uj.clone();
            for kk in 0..j {
                let ek = ens.particle(kk) - &mean;
                let w = (model.matrix() * &ek).dot(&(&gamma_inv * &target)) / j as f64;
                out += ek * w;
            }
            for i in 0..d {
                assert!((out[i] - fast.particles()[(i, jj)]).abs() < 1e-12 * (1.0 + out[i].abs()));
            }
        }
    }

    #[test]
    fn nonlinear_with_linear_callback_is_bitwise_linear() {
        let (ens, model, y) = random_problem(5, 3, 4, 21);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let mut a = ens.clone();
        let mut b = ens;
        for _ in 0..20 {
            a = sde_linear_step(&a, &model, &y, 0.01, &mut r1).unwrap();
            b = sde_nonlinear_step(&b, |u| model.apply(u), model.noise(), &y, 0.01, &mut r2).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn nonlinear_scalar_hand_step() {
        // G(u) = u, Γ = 1, particles {0, 2}, y = 1, dt = 0.5, ΔW = (0.1, -0.3).
        // e = (-1, 1), coefficient for particle j: (1/2) Σ_k g_k z_j e_k = z_j e-weighted:
        // increment_j = (1/2)[(-1)(-1) + (1)(1)] z_j = z_j, z_j = (1 - u_j) dt + ΔW_j.
        let noise = NoiseCovariance::new(DMatrix::identity(1, 1)).unwrap();
        let ens = Ensemble::from_particles(&[vec![0.0], vec![2.0]]).unwrap();
        let y = DVector::from_vec(vec![1.0]);
        let dw = NoiseDraw::from_matrix(DMatrix::from_row_slice(1, 2, &[0.1, -0.3]));
        let out = sde_nonlinear_step_with(&ens, |u| u.clone(), &noise, &y, 0.5, &dw).unwrap();
        assert!((out.particles()[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((out.particles()[(0, 1)] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn nonlinear_rejects_bad_callback() {
        let noise = NoiseCovariance::new(DMatrix::identity(2, 2)).unwrap();
        let ens = Ensemble::from_particles(&[vec![0.0], vec![2.0]]).unwrap();
        let y = DVector::zeros(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sde_nonlinear_step(&ens, |u| u.clone(), &noise, &y, 0.1, &mut rng).is_err());
        let nan = |_: &DVector<f64>| DVector::from_vec(vec![f64::NAN, 0.0]);
        assert!(matches!(
            sde_nonlinear_step(&ens, nan, &noise, &y, 0.1, &mut rng),
            Err(EkiError::NonFinite(_))
        ));
    }

    #[test]
    fn zero_inflation_matches_linear_step() {
        let (ens, model, y) = random_problem(4, 3, 5, 3);
        let dw = NoiseDraw::brownian(3, 5, 0.01, &mut ChaCha8Rng::seed_from_u64(1));
        let sched = InflationSchedule::scaled_identity(4, 0.5, 1.0, 0.0).unwrap();
        let op = InflationOperator::new(&sched, &model).unwrap();
        let a = sde_linear_step_with(&ens, &model, &y, 0.01, &dw).unwrap();
        let b = sde_inflated_step_with(&ens, &model, &y, 2.0, 0.01, &op, &dw).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_inflation_matches_discrete_step() {
        let (ens, model, y) = random_problem(4, 3, 5, 13);
        let xi = NoiseDraw::perturbation(model.noise(), 5, 0.01, &mut ChaCha8Rng::seed_from_u64(2));
        let sched = InflationSchedule::scaled_identity(4, 0.5, 1.0, 0.0).unwrap();
        let op = InflationOperator::new(&sched, &model).unwrap();
        let a = eki_discrete_step_with(&ens, &model, &y, 0.01, &xi).unwrap();
        let b = eki_discrete_inflated_step_with(&ens, &model, &y, 2.0, 0.01, &op, &xi).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn discrete_inflated_consensus_relaxes_implicitly() {
        // C = 0, A = Γ = B = I: u⁺ = u + h dt/(1 + h dt) (y − u), h = 1/(√t + 1).
        let model = LinearForwardModel::with_gamma(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let ens = consensus(2, 3);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let sched = InflationSchedule::scaled_identity(2, 0.5, 1.0, 1.0).unwrap();
        let op = InflationOperator::new(&sched, &model).unwrap();
        let (t, dt) = (4.0, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = eki_discrete_inflated_step(&ens, &model, &y, t, dt, &op, &mut rng).unwrap();
        let h = 1.0 / (t.sqrt() + 1.0);
        let factor = h * dt / (1.0 + h * dt);
        for j in 0..3 {
            let u = ens.particle(j);
            let expected = &u + (&y - &u) * factor;
            assert!((out.particle(j) - expected).norm() < 1e-15);
        }
    }

    #[test]
    fn discrete_inflated_step_stays_bounded_on_stiff_problems() {
        // Inflation eigenvalue 1e6 with dt = 0.1: the explicit step would overshoot.
        let model = LinearForwardModel::with_gamma(DMatrix::identity(1, 1), DMatrix::identity(1, 1) * 1e-6).unwrap();
        let sched = InflationSchedule::scaled_identity(1, 0.5, 1.0, 1.0).unwrap();
        let op = InflationOperator::new(&sched, &model).unwrap();
        let y = DVector::from_vec(vec![1.0]);
        let mut ens = Ensemble::from_particles(&[vec![-3.0], vec![-3.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut err = 4.0;
        for n in 0..10 {
            let t = n as f64 * 0.1;
            ens = eki_discrete_inflated_step(&ens, &model, &y, t, 0.1, &op, &mut rng).unwrap();
            // Implicit contraction factor 1/(1 + h_t·1e6·dt) per step.
            let contraction = 1.0 / (1.0 + 1e5 / (t.sqrt() + 1.0));
            let next = (ens.particles()[(0, 0)] - 1.0).abs();
            assert!(next <= err * contraction * (1.0 + 1e-9) + 1e-15, "step {n}: {next}");
            err = next;
        }
    }

    #[test]
    fn inflated_consensus_relaxes_toward_data() {
        let model = LinearForwardModel::with_gamma(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let ens = consensus(2, 3);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let sched = InflationSchedule::scaled_identity(2, 0.5, 1.0, 1.0).unwrap();
        let (t, dt) = (4.0, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = sde_inflated_step(&ens, &model, &y, t, dt, &sched, &mut rng).unwrap();
        let factor = dt / (t.sqrt() + 1.0);
        for j in 0..3 {
            let u = ens.particle(j);
            let expected = &u + (&y - &u) * factor;
            assert!((out.particle(j) - expected).norm() < 1e-15);
        }
    }

    #[test]
    fn inflation_contribution_decays() {
        let sched = InflationSchedule::scaled_identity(2, 0.5, 1.0, 1.0).unwrap();
        let mut last = f64::INFINITY;
        for t in [0.0, 1.0, 10.0, 100.0, 1e4, 1e6] {
            let f = sched.factor(t);
            assert!(f <= last && f <= 1.0 / t.powf(0.5));
            last = f;
        }
    }

    #[test]
    fn discrete_step_surfaces_nonfinite_state() {
        let (ens, model, _) = random_problem(3, 2, 4, 9);
        let y = DVector::from_vec(vec![f64::NAN, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(eki_discrete_step(&ens, &model, &y, 0.1, &mut rng).is_err());
    }

    #[test]
    fn cholesky_retry_with_jitter() {
        // Singular PSD matrix: the plain factorization may fail, the jittered one succeeds.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky_with_jitter(m).is_ok());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_with_jitter(indefinite), Err(EkiError::Cholesky(_))));
    }

    #[test]
    fn correlated_increments_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let single = correlated_increments(1, 3, 1.0, &mut rng);
        assert!(single.iter().all(|&x| x == 0.0));
        let many = correlated_increments(5, 3, 1.0, &mut rng);
        for row in 0..3 {
            assert!(many.row(row).sum().abs() < 1e-14);
        }
    }

    #[test]
    fn stepper_dispatches_schemes_reproducibly() {
        let (ens, model, y) = random_problem(4, 3, 5, 30);
        let cfg = StepConfig::new(0.01, Scheme::SdeLinear, None).unwrap();
        let stepper = Stepper::new(&model, &y, &cfg).unwrap();
        let a = stepper.step(&ens, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sde_linear_step(&ens, &model, &y, 0.01, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }
}
