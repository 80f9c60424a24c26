//! Exact Gaussian algebra in moment and canonical form.

mod mixture;
mod moment;
mod natural;
mod sym;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

pub use mixture::{log_sum_exp, GaussianMixture, MixtureLogDensity, MixtureSampler};
pub use moment::{standard_normal, GaussianSampler, LogDensity, MomentGaussian};
pub use natural::NaturalGaussian;
pub use sym::{
    symmetrize, SqrtFactor, SymMatrix, MAX_CONDITION, PSD_RELATIVE_TOL, SYMMETRY_RELATIVE_TOL,
};

pub(crate) use moment::LN_2PI;

/// `x ↦ A x + b`
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineMap {
    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        check_dim(matrix.nrows(), offset.len(), "affine offset")?;
        Ok(Self { matrix, offset })
    }

    pub fn linear(matrix: DMatrix<f64>) -> Self {
        let offset = DVector::zeros(matrix.nrows());
        Self { matrix, offset }
    }

    pub fn apply(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.matrix * theta + &self.offset
    }
}

/// `p(x | θ) = N(x; Aθ + b, V)`
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussian {
    pub map: AffineMap,
    pub noise: SymMatrix,
}

impl LinearGaussian {
    pub fn new(map: AffineMap, noise: SymMatrix) -> Result<Self> {
        check_dim(map.matrix.nrows(), noise.dim(), "noise covariance")?;
        Ok(Self { map, noise })
    }

    pub fn at(&self, theta: &DVector<f64>) -> Result<MomentGaussian> {
        check_dim(self.map.matrix.ncols(), theta.len(), "conditioning value")?;
        MomentGaussian::new(self.map.apply(theta), self.noise.clone())
    }
}

/// Marginal `p(x) = N(Aμ + b, V + AΣAᵀ)`.
pub fn convolve_affine(conditional: &LinearGaussian, prior: &MomentGaussian) -> Result<MomentGaussian> {
    let a = &conditional.map.matrix;
    check_dim(a.ncols(), prior.dim(), "prior for convolution")?;
    let mean = conditional.map.apply(prior.mean());
    let spread = a * prior.cov().to_dense() * a.transpose();
    let cov = conditional.noise.to_dense() + symmetrize(&spread);
    MomentGaussian::new(mean, SymMatrix::Dense(cov))
}

/// Posterior `p(θ | x) = N(C⁻¹(AᵀV⁻¹(x − b) + Σ⁻¹μ), C⁻¹)` with
/// `C = AᵀV⁻¹A + Σ⁻¹`.
pub fn condition_affine(
    conditional: &LinearGaussian,
    prior: &MomentGaussian,
    x: &DVector<f64>,
) -> Result<MomentGaussian> {
    let a = &conditional.map.matrix;
    check_dim(a.ncols(), prior.dim(), "prior for conditioning")?;
    check_dim(a.nrows(), x.len(), "observation")?;
    let v_inv = conditional
        .noise
        .inverse()
        .map_err(|_| Error::Singular("observation noise covariance"))?
        .to_dense();
    let s_inv = prior.cov().inverse()?;
    let c = a.transpose() * &v_inv * a + s_inv.to_dense();
    let chol = symmetrize(&c)
        .cholesky()
        .ok_or(Error::Singular("posterior precision"))?;
    let rhs = a.transpose() * (&v_inv * (x - &conditional.map.offset)) + s_inv.mul_vec(prior.mean());
    let mean = chol.solve(&rhs);
    MomentGaussian::new(mean, SymMatrix::Dense(symmetrize(&chol.inverse())))
}

/// `(C + u vᵀ)⁻¹` for diagonal `C`, given `C⁻¹` as a vector.
pub fn woodbury_rank1(c_inv_diag: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_dim(c_inv_diag.len(), u.len(), "woodbury u")?;
    check_dim(c_inv_diag.len(), v.len(), "woodbury v")?;
    if let Some(&bad) = c_inv_diag.iter().find(|&&c| !(c > 0.0)) {
        return Err(crate::error::invalid("c_inv_diag", format!("entry {bad} is not positive")));
    }
    let cu = c_inv_diag.component_mul(u);
    let cv = c_inv_diag.component_mul(v);
    let denom = 1.0 + v.dot(&cu);
    if denom.abs() < 1e-14 {
        return Err(Error::SingularUpdate(denom));
    }
    let mut out = DMatrix::from_diagonal(c_inv_diag);
    out -= cu * cv.transpose() / denom;
    Ok(out)
}

/// `KL(q ‖ p)` in closed form.
pub fn kl_divergence(q: &MomentGaussian, p: &MomentGaussian) -> Result<f64> {
    check_dim(p.dim(), q.dim(), "kl_divergence")?;
    if let (SymMatrix::Diagonal(vq), SymMatrix::Diagonal(vp)) = (q.cov(), p.cov()) {
        if vq.iter().chain(vp.iter()).any(|&v| !(v > 0.0)) {
            return Err(Error::Singular("diagonal covariance"));
        }
        let mut acc = 0.0;
        for i in 0..q.dim() {
            let r = vq[i] / vp[i];
            let d = p.mean()[i] - q.mean()[i];
            acc += r - 1.0 - r.ln() + d * d / vp[i];
        }
        return Ok(0.5 * acc);
    }
    let p_inv = p.cov().inverse()?;
    let trace = p_inv.trace_product(q.cov())?;
    let delta = p.mean() - q.mean();
    let quad = p_inv.quad_form(&delta);
    let ld_p = p.cov().log_det()?;
    let ld_q = q.cov().log_det()?;
    Ok(0.5 * (trace + quad - q.dim() as f64 + ld_p - ld_q))
}
