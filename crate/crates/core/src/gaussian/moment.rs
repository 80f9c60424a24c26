use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::natural::NaturalGaussian;
use super::sym::{SqrtFactor, SymMatrix};
use crate::error::{check_dim, invalid, Error, Result};
use crate::mc::McRng;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian in moment form, `N(mean, cov)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct MomentGaussian {
    mean: DVector<f64>,
    cov: SymMatrix,
}

impl MomentGaussian {
    pub fn new(mean: DVector<f64>, cov: SymMatrix) -> Result<Self> {
        check_dim(mean.len(), cov.dim(), "covariance")?;
        if let Some(&v) = mean.iter().find(|v| !v.is_finite()) {
            return Err(invalid("mean", format!("non-finite entry {v}")));
        }
        cov.check_psd()?;
        Ok(Self { mean, cov })
    }

    pub fn diagonal(mean: DVector<f64>, var: DVector<f64>) -> Result<Self> {
        Self::new(mean, SymMatrix::Diagonal(var))
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: SymMatrix::identity(dim),
        }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &SymMatrix {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_natural(&self) -> Result<NaturalGaussian> {
        let precision = self.cov.inverse()?;
        let eta = precision.mul_vec(&self.mean);
        NaturalGaussian::new(eta, precision)
    }

    /// Precomputes the inverse and normaliser for repeated evaluation.
    pub fn log_density_fn(&self) -> Result<LogDensity> {
        let inv = self.cov.inverse()?;
        let log_det = self.cov.log_det()?;
        Ok(LogDensity {
            mean: self.mean.clone(),
            inv,
            log_norm: -0.5 * (self.dim() as f64 * LN_2PI + log_det),
        })
    }

    pub fn log_density(&self, w: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), w.len(), "log_density point")?;
        Ok(self.log_density_fn()?.eval(w))
    }

    pub fn sampler(&self) -> Result<GaussianSampler> {
        Ok(GaussianSampler {
            mean: self.mean.clone(),
            factor: SqrtFactor::new(&self.cov)?,
        })
    }

    /// `count` draws from a `ChaCha8Rng` seeded with `seed`.
    pub fn sample(&self, seed: u64, count: usize) -> Result<Vec<DVector<f64>>> {
        let sampler = self.sampler()?;
        let mut rng = McRng::seed_from_u64(seed);
        Ok((0..count).map(|_| sampler.sample(&mut rng)).collect())
    }

    /// Same distribution with coordinates relabelled, `w'_i = w_{perm[i]}`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_dim(self.dim(), perm.len(), "permutation")?;
        let mean = DVector::from_fn(perm.len(), |i, _| self.mean[perm[i]]);
        let pv = |v: &DVector<f64>| DVector::from_fn(perm.len(), |i, _| v[perm[i]]);
        let cov = match &self.cov {
            SymMatrix::Diagonal(d) => SymMatrix::Diagonal(pv(d)),
            SymMatrix::Rank1 { scale, direction } => SymMatrix::Rank1 {
                scale: *scale,
                direction: pv(direction),
            },
            SymMatrix::DiagonalPlusRank1 {
                diag,
                coef,
                direction,
            } => SymMatrix::DiagonalPlusRank1 {
                diag: pv(diag),
                coef: *coef,
                direction: pv(direction),
            },
            SymMatrix::Dense(m) => SymMatrix::Dense(DMatrix::from_fn(perm.len(), perm.len(), |i, j| {
                m[(perm[i], perm[j])]
            })),
        };
        Ok(Self { mean, cov })
    }
}

/// Log-density of a full-rank Gaussian with cached inverse covariance.
#[derive(Clone, Debug)]
pub struct LogDensity {
    mean: DVector<f64>,
    inv: SymMatrix,
    log_norm: f64,
}

impl LogDensity {
    pub fn eval(&self, w: &DVector<f64>) -> f64 {
        let d = w - &self.mean;
        self.log_norm - 0.5 * self.inv.quad_form(&d)
    }
}

/// Draws `mean + S z` with `S Sᵀ = cov` and `z` standard normal.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: SqrtFactor,
}

impl GaussianSampler {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.mean + self.factor.apply(z)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = standard_normal(rng, self.dim());
        self.transform(&z)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec<f64>,
    cov: CovRepr,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CovRepr {
    Diag(Vec<f64>),
    /// row-major
    Dense(Vec<f64>),
}

impl From<MomentGaussian> for GaussianRepr {
    fn from(g: MomentGaussian) -> Self {
        let cov = match &g.cov {
            SymMatrix::Diagonal(d) => CovRepr::Diag(d.iter().copied().collect()),
            other => CovRepr::Dense(other.to_dense().transpose().iter().copied().collect()),
        };
        GaussianRepr {
            mean: g.mean.iter().copied().collect(),
            cov,
        }
    }
}

impl TryFrom<GaussianRepr> for MomentGaussian {
    type Error = Error;

    fn try_from(r: GaussianRepr) -> Result<Self> {
        let k = r.mean.len();
        let cov = match r.cov {
            CovRepr::Diag(d) => SymMatrix::Diagonal(DVector::from_vec(d)),
            CovRepr::Dense(v) => {
                check_dim(k * k, v.len(), "dense covariance entries")?;
                SymMatrix::Dense(DMatrix::from_row_slice(k, k, &v))
            }
        };
        MomentGaussian::new(DVector::from_vec(r.mean), cov)
    }
}
