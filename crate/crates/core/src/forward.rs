//! One-dimensional elliptic forward model and Karhunen–Loève prior sampling.
//!
//! The forward problem is `−p″ + p = u` on `(0, π)` with `p(0) = p(π) = 0`,
//! discretized with continuous piecewise-linear elements on a uniform mesh.
//! Parameters are the interior nodal values of `u`; observations are point
//! values of `p` obtained by linear interpolation between nodes.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::check_len;
use crate::error::{invalid, EkiError, Result};
use crate::Ensemble;

/// Number of uniform cells on `(0, π)` whose width does not exceed `h`.
pub fn cells_for_mesh_width(h: f64) -> usize {
    (PI / h).ceil() as usize
}

/// Observation points `x_k = k · spacing`, `k = 1..=count`.
pub fn equispaced_points(count: usize, spacing: f64) -> Vec<f64> {
    (1..=count).map(|k| k as f64 * spacing).collect()
}

/// Symmetric tridiagonal matrix stored as its diagonal and off-diagonal.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl Tridiagonal {
    fn constant(n: usize, diag: f64, off: f64) -> Self {
        Self {
            diag: vec![diag; n],
            off: vec![off; n.saturating_sub(1)],
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * x[i];
                if i > 0 {
                    s += self.off[i - 1] * x[i - 1];
                }
                if i + 1 < n {
                    s += self.off[i] * x[i + 1];
                }
                s
            })
            .collect()
    }

    /// Thomas algorithm; the matrix must be nonsingular without pivoting
    /// (true for the SPD systems assembled here).
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        let mut c = vec![0.0; n];
        let mut x = rhs.to_vec();
        let mut denom = self.diag[0];
        if n > 1 {
            c[0] = self.off[0] / denom;
        }
        x[0] /= denom;
        for i in 1..n {
            denom = self.diag[i] - self.off[i - 1] * c[i - 1];
            if i + 1 < n {
                c[i] = self.off[i] / denom;
            }
            x[i] = (x[i] - self.off[i - 1] * x[i - 1]) / denom;
        }
        for i in (0..n.saturating_sub(1)).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        x
    }

    /// Number of eigenvalues of the pencil `(self, mass)` below `mu`, by
    /// Sylvester inertia of `self − mu · mass`.
    fn count_below(&self, mass: &Tridiagonal, mu: f64) -> usize {
        let n = self.diag.len();
        let mut count = 0;
        let mut pivot = 0.0;
        for i in 0..n {
            let a = self.diag[i] - mu * mass.diag[i];
            pivot = if i == 0 {
                a
            } else {
                let b = self.off[i - 1] - mu * mass.off[i - 1];
                a - b * b / pivot
            };
            if pivot == 0.0 {
                pivot = -f64::EPSILON * a.abs().max(1.0);
            }
            if pivot < 0.0 {
                count += 1;
            }
        }
        count
    }
}

/// Assembled P1 finite element discretization of `−p″ + p` on `(0, π)`.
#[derive(Debug, Clone)]
pub struct FemModel {
    n_cells: usize,
    h: f64,
    system: Tridiagonal,
    stiffness: Tridiagonal,
    mass: Tridiagonal,
    obs_points: Vec<f64>,
}

impl FemModel {
    pub fn assemble(n_cells: usize, obs_points: Vec<f64>) -> Result<Self> {
        if n_cells < 2 {
            return Err(invalid("n_cells", format!("need at least 2 cells, got {n_cells}")));
        }
        if obs_points.is_empty() {
            return Err(invalid("obs_points", "need at least one observation point"));
        }
        if let Some(x) = obs_points.iter().find(|&&x| !(x > 0.0 && x < PI)) {
            return Err(invalid("obs_points", format!("point {x} lies outside (0, pi)")));
        }
        if obs_points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("obs_points", "points must be strictly increasing"));
        }
        let h = PI / n_cells as f64;
        let d = n_cells - 1;
        let stiffness = Tridiagonal::constant(d, 2.0 / h, -1.0 / h);
        let mass = Tridiagonal::constant(d, 2.0 * h / 3.0, h / 6.0);
        let system = Tridiagonal {
            diag: stiffness.diag.iter().zip(&mass.diag).map(|(k, m)| k + m).collect(),
            off: stiffness.off.iter().zip(&mass.off).map(|(k, m)| k + m).collect(),
        };
        Ok(Self {
            n_cells,
            h,
            system,
            stiffness,
            mass,
            obs_points,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn mesh_width(&self) -> f64 {
        self.h
    }

    /// Number of interior nodes, i.e. the parameter dimension.
    pub fn dim(&self) -> usize {
        self.n_cells - 1
    }

    pub fn obs_points(&self) -> &[f64] {
        &self.obs_points
    }

    pub fn system_matrix(&self) -> &Tridiagonal {
        &self.system
    }

    /// Interior node coordinates `x_i = i h`, `i = 1..n_cells−1`.
    pub fn nodes(&self) -> Vec<f64> {
        (1..self.n_cells).map(|i| i as f64 * self.h).collect()
    }

    /// Interior nodal values of `f`.
    pub fn interpolate(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.nodes().into_iter().map(f))
    }

    /// Mesh inner product `h Σ_i f_i g_i` over interior nodes.
    pub fn inner(&self, f: &DVector<f64>, g: &DVector<f64>) -> f64 {
        self.h * f.dot(g)
    }

    /// Solves for the interior nodal values of `p` given nodal values of `u`.
    pub fn solve(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("FEM source", self.dim(), u.len())?;
        let rhs = self.mass.mul_vec(u.as_slice());
        Ok(DVector::from_vec(self.system.solve(&rhs)))
    }

    /// Point values of `p` at the observation points.
    pub fn observe(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("FEM nodal solution", self.dim(), p.len())?;
        let nodal = |i: usize| if i == 0 || i == self.n_cells { 0.0 } else { p[i - 1] };
        let values = self.obs_points.iter().map(|&x| {
            let s = x / self.h;
            let cell = (s.floor() as usize).min(self.n_cells - 1);
            let w = s - cell as f64;
            (1.0 - w) * nodal(cell) + w * nodal(cell + 1)
        });
        Ok(DVector::from_iterator(self.obs_points.len(), values))
    }

    /// Forward matrix `A = O ∘ 𝒜^{-1}`; column `j` is the observed response to
    /// the `j`-th nodal basis input.
    pub fn build_a(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut a = DMatrix::zeros(self.obs_points.len(), d);
        let mut e = DVector::zeros(d);
        for j in 0..d {
            e[j] = 1.0;
            let col = self.observe(&self.solve(&e).expect("dimension")).expect("dimension");
            a.set_column(j, &col);
            e[j] = 0.0;
        }
        a
    }

    /// Smallest `n` eigenvalues `μ` of the discrete Dirichlet Laplacian
    /// pencil `K v = μ M v`, by Sturm-sequence bisection.
    pub fn laplacian_eigenvalues(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 || n > self.dim() {
            return Err(invalid(
                "modes",
                format!("need 1..={} eigenvalues, asked for {n}", self.dim()),
            ));
        }
        let mut hi = 12.0 / (self.h * self.h) + 1.0;
        while self.stiffness.count_below(&self.mass, hi) < n {
            hi *= 2.0;
        }
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let (mut lo, mut up) = (0.0, hi);
            for _ in 0..200 {
                let mid = 0.5 * (lo + up);
                if self.stiffness.count_below(&self.mass, mid) > k {
                    up = mid;
                } else {
                    lo = mid;
                }
                if up - lo <= 1e-15 * up {
                    break;
                }
            }
            out.push(0.5 * (lo + up));
        }
        Ok(out)
    }
}

/// Karhunen–Loève representation of the prior covariance
/// `C₀ = β (𝒜 − id)^{-1} = β (−d²/dx²)^{-1}` with Dirichlet conditions:
/// eigenpairs `λ_j = β / j²`, `z_j(x) = √(2/π) sin(j x)`.
#[derive(Debug, Clone)]
pub struct KlPrior {
    beta: f64,
    eigvals: Vec<f64>,
    eigfuncs: DMatrix<f64>,
}

impl KlPrior {
    /// Analytic eigenpairs sampled on the mesh nodes. `beta = 0` is accepted
    /// and yields a degenerate prior concentrated at zero.
    pub fn new(fem: &FemModel, beta: f64, modes: usize) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(invalid("beta", "must be nonnegative and finite"));
        }
        if modes == 0 || modes > fem.dim() {
            return Err(invalid("modes", format!("must lie in 1..={}, got {modes}", fem.dim())));
        }
        let nodes = fem.nodes();
        let norm = (2.0 / PI).sqrt();
        let eigfuncs = DMatrix::from_fn(fem.dim(), modes, |i, j| norm * ((j + 1) as f64 * nodes[i]).sin());
        let eigvals = (1..=modes).map(|j| beta / (j * j) as f64).collect();
        Ok(Self {
            beta,
            eigvals,
            eigfuncs,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn modes(&self) -> usize {
        self.eigvals.len()
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    /// Eigenfunctions sampled at interior nodes, one per column.
    pub fn eigfuncs(&self) -> &DMatrix<f64> {
        &self.eigfuncs
    }

    /// A full prior draw `Σ_j √λ_j ζ_j z_j` over all modes.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut u = DVector::zeros(self.eigfuncs.nrows());
        for (j, &lambda) in self.eigvals.iter().enumerate() {
            let zeta: f64 = rng.sample(StandardNormal);
            u.axpy(lambda.sqrt() * zeta, &self.eigfuncs.column(j), 1.0);
        }
        u
    }
}

/// Initial ensemble with particle `j` equal to `√λ_j ζ_j z_j`.
pub fn kl_initial_ensemble<R: Rng + ?Sized>(prior: &KlPrior, j: usize, rng: &mut R) -> Result<Ensemble> {
    if j > prior.modes() {
        return Err(invalid(
            "ensemble_size",
            format!("{j} particles exceed the {} available modes", prior.modes()),
        ));
    }
    let zetas: Vec<f64> = (0..j).map(|_| rng.sample(StandardNormal)).collect();
    kl_ensemble_from_coefficients(prior, &zetas)
}

/// Deterministic variant of [`kl_initial_ensemble`] with given `ζ_j`.
pub fn kl_ensemble_from_coefficients(prior: &KlPrior, zetas: &[f64]) -> Result<Ensemble> {
    if zetas.len() > prior.modes() {
        return Err(EkiError::InvalidEnsemble(format!(
            "{} coefficients exceed the {} available modes",
            zetas.len(),
            prior.modes()
        )));
    }
    let d = prior.eigfuncs.nrows();
    let mut particles = DMatrix::zeros(d, zetas.len());
    for (j, &zeta) in zetas.iter().enumerate() {
        let scale = prior.eigvals[j].sqrt() * zeta;
        particles.set_column(j, &(prior.eigfuncs.column(j) * scale));
    }
    Ensemble::from_columns(particles)
}
