use nalgebra::DVector;

use super::moment::{MomentGaussian, LN_2PI};
use super::sym::{SymMatrix, MAX_CONDITION};
use crate::error::{check_dim, Error, Result};

/// Gaussian in canonical form `(η, Λ)`; the precision may be rank-deficient.
#[derive(Clone, Debug, PartialEq)]
pub struct NaturalGaussian {
    eta: DVector<f64>,
    precision: SymMatrix,
}

impl NaturalGaussian {
    pub fn new(eta: DVector<f64>, precision: SymMatrix) -> Result<Self> {
        check_dim(eta.len(), precision.dim(), "precision")?;
        Ok(Self { eta, precision })
    }

    /// `Λ = scale · d dᵀ` with `η = Λ · location`.
    pub fn rank1(scale: f64, direction: DVector<f64>, location: &DVector<f64>) -> Result<Self> {
        check_dim(direction.len(), location.len(), "rank-1 location")?;
        let eta = &direction * (scale * direction.dot(location));
        Self::new(eta, SymMatrix::Rank1 { scale, direction })
    }

    pub fn eta(&self) -> &DVector<f64> {
        &self.eta
    }

    pub fn precision(&self) -> &SymMatrix {
        &self.precision
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    pub fn to_moment(&self) -> Result<MomentGaussian> {
        let cond = self.precision.condition_number();
        if !(cond < MAX_CONDITION) {
            return Err(Error::Singular("precision is rank-deficient or ill-conditioned"));
        }
        let cov = self.precision.inverse()?;
        let mean = cov.mul_vec(&self.eta);
        MomentGaussian::new(mean, cov)
    }

    /// Product of densities and the log of its normalising constant.
    ///
    /// Each factor is read as a normalised density on the range of its
    /// precision, so a rank-deficient factor contributes its
    /// pseudo-determinant. For two full-rank factors the result is
    /// `ln ∫ N_a(w) N_b(w) dw`.
    pub fn product(&self, other: &NaturalGaussian) -> Result<(NaturalGaussian, f64)> {
        check_dim(self.dim(), other.dim(), "product")?;
        let eta = &self.eta + &other.eta;
        let precision = self.precision.add(&other.precision)?;
        let k = self.dim() as f64;
        let (q, ld, _) = precision.pseudo_normalizer_parts(&eta)?;
        let mut log_z = 0.5 * q + 0.5 * k * LN_2PI - 0.5 * ld;
        for f in [self, other] {
            let (q, ld, r) = f.precision.pseudo_normalizer_parts(&f.eta)?;
            log_z += -0.5 * q + 0.5 * ld - 0.5 * r as f64 * LN_2PI;
        }
        Ok((NaturalGaussian { eta, precision }, log_z))
    }
}
