//! Particle ensembles and their empirical covariance algebra.
//!
//! Particles are stored column-wise in a `d × J` matrix so that each particle
//! is a contiguous column. Covariances always use the `1/J` normalization and
//! are applied through the deviation matrix rather than assembled.

use nalgebra::{DMatrix, DVector};

use crate::error::{EkiError, Result};

/// An ensemble of `J ≥ 2` particles in a `d`-dimensional parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: DMatrix<f64>,
}

impl Ensemble {
    /// Builds an ensemble from a `d × J` matrix whose columns are the particles.
    pub fn from_columns(particles: DMatrix<f64>) -> Result<Self> {
        if particles.ncols() < 2 {
            return Err(EkiError::InvalidEnsemble(format!(
                "need at least 2 particles, got {}",
                particles.ncols()
            )));
        }
        if particles.nrows() < 1 {
            return Err(EkiError::InvalidEnsemble("parameter dimension is zero".into()));
        }
        if particles.iter().any(|x| !x.is_finite()) {
            return Err(EkiError::NonFinite("ensemble"));
        }
        Ok(Self { particles })
    }

    /// Builds an ensemble from a list of particles (the `J × d` layout).
    pub fn from_particles(rows: &[Vec<f64>]) -> Result<Self> {
        let j = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(EkiError::DimensionMismatch {
                context: "ensemble particle",
                expected: d,
                got: bad.len(),
            });
        }
        Self::from_columns(DMatrix::from_fn(d, j, |i, k| rows[k][i]))
    }

    pub fn size(&self) -> usize {
        self.particles.ncols()
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    /// The `d × J` particle matrix.
    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn particle(&self, j: usize) -> DVector<f64> {
        self.particles.column(j).clone_owned()
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.particles
    }

    /// Empirical mean `(1/J) Σ_j u^{(j)}`.
    pub fn mean(&self) -> DVector<f64> {
        column_mean(&self.particles)
    }

    /// Deviations `e^{(j)} = u^{(j)} − ū`, one per column.
    pub fn deviations(&self) -> DMatrix<f64> {
        centered(&self.particles)
    }

    /// Applies `C(u) v = (1/J) Σ_k e^{(k)} ⟨e^{(k)}, v⟩` without forming `C(u)`.
    pub fn cov_apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("cov_apply input", self.dim(), v.len())?;
        let e = self.deviations();
        let weights = e.tr_mul(v) / self.size() as f64;
        Ok(&e * weights)
    }

    /// `C^{pp} = (1/J) Σ_j (G_j − Ḡ) ⊗ (G_j − Ḡ)` for forward values stored
    /// column-wise (`K × J`).
    pub fn cross_cov_pp(&self, g_values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("cross_cov_pp particle count", self.size(), g_values.ncols())?;
        let g = centered(g_values);
        let mut cpp = &g * g.transpose() / self.size() as f64;
        symmetrize(&mut cpp);
        Ok(cpp)
    }

    /// `C^{up} = (1/J) Σ_j (u^{(j)} − ū) ⊗ (G_j − Ḡ)`, a `d × K` matrix.
    /// `C^{pu}` is its transpose.
    pub fn cross_cov_up(&self, g_values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("cross_cov_up particle count", self.size(), g_values.ncols())?;
        let e = self.deviations();
        let g = centered(g_values);
        Ok(&e * g.transpose() / self.size() as f64)
    }
}

/// Column mean computed relative to the first column, which makes the mean of
/// identical columns exact.
pub(crate) fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.ncols();
    let base = m.column(0);
    let mut acc = DVector::zeros(m.nrows());
    for col in m.column_iter().skip(1) {
        acc += col - base;
    }
    acc /= n as f64;
    acc += base;
    acc
}

pub(crate) fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = column_mean(m);
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        col -= &mean;
    }
    out
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(EkiError::DimensionMismatch { context, expected, got })
    }
}
