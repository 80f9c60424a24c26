use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Relative tolerance on the smallest eigenvalue when testing positive
/// semi-definiteness.
pub const PSD_RELATIVE_TOL: f64 = 1e-10;
/// Relative tolerance on `|M - Mᵀ|` for dense symmetric input.
pub const SYMMETRY_RELATIVE_TOL: f64 = 1e-12;
/// Largest condition number accepted when a matrix has to be inverted.
pub const MAX_CONDITION: f64 = 1e12;

/// Dense eigen-decompositions are skipped above this size for the
/// structured variants.
const DENSE_CHECK_LIMIT: usize = 512;

/// A symmetric matrix, stored in the cheapest form that represents it exactly.
///
/// The structured variants keep every operation used on the sweep path
/// (products, inverses, log-determinants, traces, KL divergences) at O(K).
/// `Rank1` is the only variant that is allowed to be rank-deficient in
/// normal use; it stores `scale · direction directionᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub enum SymMatrix {
    Diagonal(DVector<f64>),
    Rank1 {
        scale: f64,
        direction: DVector<f64>,
    },
    /// `Diag(diag) + coef · direction directionᵀ`
    DiagonalPlusRank1 {
        diag: DVector<f64>,
        coef: f64,
        direction: DVector<f64>,
    },
    Dense(DMatrix<f64>),
}

/// `(M + Mᵀ) / 2`
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

impl SymMatrix {
    pub fn identity(dim: usize) -> Self {
        SymMatrix::Diagonal(DVector::from_element(dim, 1.0))
    }

    pub fn dim(&self) -> usize {
        match self {
            SymMatrix::Diagonal(d) => d.len(),
            SymMatrix::Rank1 { direction, .. } => direction.len(),
            SymMatrix::DiagonalPlusRank1 { diag, .. } => diag.len(),
            SymMatrix::Dense(m) => m.nrows(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, SymMatrix::Diagonal(_))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SymMatrix::Diagonal(d) => DMatrix::from_diagonal(d),
            SymMatrix::Rank1 { scale, direction } => direction * direction.transpose() * *scale,
            SymMatrix::DiagonalPlusRank1 {
                diag,
                coef,
                direction,
            } => DMatrix::from_diagonal(diag) + direction * direction.transpose() * *coef,
            SymMatrix::Dense(m) => m.clone(),
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            SymMatrix::Diagonal(d) => d.clone(),
            SymMatrix::Rank1 { scale, direction } => direction.map(|u| scale * u * u),
            SymMatrix::DiagonalPlusRank1 {
                diag,
                coef,
                direction,
            } => diag.zip_map(direction, |d, u| d + coef * u * u),
            SymMatrix::Dense(m) => m.diagonal(),
        }
    }

    /// `(diag, coef, direction)` view shared by all structured variants.
    fn low_rank_parts(&self) -> Option<(DVector<f64>, f64, Option<&DVector<f64>>)> {
        match self {
            SymMatrix::Diagonal(d) => Some((d.clone(), 0.0, None)),
            SymMatrix::Rank1 { scale, direction } => {
                Some((DVector::zeros(direction.len()), *scale, Some(direction)))
            }
            SymMatrix::DiagonalPlusRank1 {
                diag,
                coef,
                direction,
            } => Some((diag.clone(), *coef, Some(direction))),
            SymMatrix::Dense(_) => None,
        }
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SymMatrix::Diagonal(d) => d.component_mul(v),
            SymMatrix::Rank1 { scale, direction } => direction * (scale * direction.dot(v)),
            SymMatrix::DiagonalPlusRank1 {
                diag,
                coef,
                direction,
            } => diag.component_mul(v) + direction * (coef * direction.dot(v)),
            SymMatrix::Dense(m) => m * v,
        }
    }

    /// `vᵀ M v`
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        match self {
            SymMatrix::Diagonal(d) => d.iter().zip(v.iter()).map(|(d, x)| d * x * x).sum(),
            SymMatrix::Rank1 { scale, direction } => {
                let p = direction.dot(v);
                scale * p * p
            }
            SymMatrix::DiagonalPlusRank1 {
                diag,
                coef,
                direction,
            } => {
                let p = direction.dot(v);
                diag.iter().zip(v.iter()).map(|(d, x)| d * x * x).sum::<f64>() + coef * p * p
            }
            SymMatrix::Dense(m) => v.dot(&(m * v)),
        }
    }

    /// Sum of two symmetric matrices, keeping structure where it survives.
    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        check_dim(self.dim(), other.dim(), "matrix sum")?;
        use SymMatrix::*;
        Ok(match (self, other) {
            (Diagonal(a), Diagonal(b)) => Diagonal(a + b),
            (Diagonal(d), Rank1 { scale, direction }) | (Rank1 { scale, direction }, Diagonal(d)) => {
                DiagonalPlusRank1 {
                    diag: d.clone(),
                    coef: *scale,
                    direction: direction.clone(),
                }
            }
            (
                Diagonal(d),
                DiagonalPlusRank1 {
                    diag,
                    coef,
                    direction,
                },
            )
            | (
                DiagonalPlusRank1 {
                    diag,
                    coef,
                    direction,
                },
                Diagonal(d),
            ) => DiagonalPlusRank1 {
                diag: diag + d,
                coef: *coef,
                direction: direction.clone(),
            },
            (a, b) => Dense(a.to_dense() + b.to_dense()),
        })
    }

    pub fn scaled(&self, factor: f64) -> SymMatrix {
        match self {
            SymMatrix::Diagonal(d) => SymMatrix::Diagonal(d * factor),
            SymMatrix::Rank1 { scale, direction } => SymMatrix::Rank1 {
                scale: scale * factor,
                direction: direction.clone(),
            },
            SymMatrix::DiagonalPlusRank1 {
                diag,
                coef,
                direction,
            } => SymMatrix::DiagonalPlusRank1 {
                diag: diag * factor,
                coef: coef * factor,
                direction: direction.clone(),
            },
            SymMatrix::Dense(m) => SymMatrix::Dense(m * factor),
        }
    }

    /// `1 + coef · uᵀ D⁻¹ u`, the determinant factor of the rank-1 update.
    fn rank1_factor(diag: &DVector<f64>, coef: f64, direction: &DVector<f64>) -> f64 {
        let t: f64 = diag
            .iter()
            .zip(direction.iter())
            .map(|(d, u)| u * u / d)
            .sum();
        1.0 + coef * t
    }

    /// Validates symmetry and positive semi-definiteness.
    pub fn check_psd(&self) -> Result<()> {
        match self {
            SymMatrix::Diagonal(d) => {
                if let Some(&bad) = d.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::NotPsd {
                        min_eigenvalue: bad,
                    });
                }
            }
            SymMatrix::Rank1 { scale, direction } => {
                if !(*scale >= 0.0) || direction.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NotPsd {
                        min_eigenvalue: *scale,
                    });
                }
            }
            SymMatrix::DiagonalPlusRank1 {
                diag,
                coef,
                direction,
            } => {
                if let Some(&bad) = diag.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::NotPsd {
                        min_eigenvalue: bad,
                    });
                }
                let f = Self::rank1_factor(diag, *coef, direction);
                if f < -PSD_RELATIVE_TOL || !f.is_finite() {
                    return Err(Error::NotPsd { min_eigenvalue: f });
                }
            }
            SymMatrix::Dense(m) => {
                let scale = m.amax();
                let asym = (m - m.transpose()).amax();
                if scale > 0.0 && asym > SYMMETRY_RELATIVE_TOL * scale {
                    return Err(Error::NotSymmetric {
                        asymmetry: asym / scale,
                    });
                }
                let eig = symmetrize(m).symmetric_eigenvalues();
                let max = eig.max();
                let min = eig.min();
                if min < -PSD_RELATIVE_TOL * max.abs().max(f64::MIN_POSITIVE) {
                    return Err(Error::NotPsd {
                        min_eigenvalue: min,
                    });
                }
            }
        }
        Ok(())
    }

    /// Condition number (ratio of extreme eigenvalues); infinite when singular.
    pub fn condition_number(&self) -> f64 {
        match self {
            SymMatrix::Diagonal(d) => {
                let min = d.min();
                if min <= 0.0 {
                    f64::INFINITY
                } else {
                    d.max() / min
                }
            }
            SymMatrix::Rank1 { scale, direction } => {
                if direction.len() == 1 && scale * direction[0] * direction[0] > 0.0 {
                    1.0
                } else {
                    f64::INFINITY
                }
            }
            SymMatrix::DiagonalPlusRank1 {
                diag,
                coef,
                direction,
            } if diag.len() > DENSE_CHECK_LIMIT => {
                // Eigenvalues interlace with the diagonal; bound with the
                // determinant factor for the direction that moves.
                let min = diag.min();
                let f = Self::rank1_factor(diag, *coef, direction);
                if min <= 0.0 || f <= 0.0 {
                    return f64::INFINITY;
                }
                let upper = diag.max() + coef.max(0.0) * direction.norm_squared();
                upper / (min * f.min(1.0))
            }
            other => {
                let eig = symmetrize(&other.to_dense()).symmetric_eigenvalues();
                let min = eig.min();
                if min <= 0.0 {
                    f64::INFINITY
                } else {
                    eig.max() / min
                }
            }
        }
    }

    pub fn log_det(&self) -> Result<f64> {
        match self {
            SymMatrix::Diagonal(d) => {
                if d.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Singular("diagonal has a non-positive entry"));
                }
                Ok(d.iter().map(|v| v.ln()).sum())
            }
            SymMatrix::Rank1 { scale, direction } => {
                let v = scale * direction.norm_squared();
                if direction.len() == 1 && v > 0.0 {
                    Ok(v.ln())
                } else {
                    Err(Error::Singular("rank-1 matrix"))
                }
            }
            SymMatrix::DiagonalPlusRank1 {
                diag,
                coef,
                direction,
            } => {
                if diag.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Singular("diagonal has a non-positive entry"));
                }
                let t: f64 = diag
                    .iter()
                    .zip(direction.iter())
                    .map(|(d, u)| u * u / d)
                    .sum();
                let f = coef * t;
                if !(1.0 + f > 0.0) {
                    return Err(Error::Singular("rank-1 update annihilates a direction"));
                }
                Ok(diag.iter().map(|v| v.ln()).sum::<f64>() + f.ln_1p())
            }
            SymMatrix::Dense(m) => {
                let chol = symmetrize(m)
                    .cholesky()
                    .ok_or(Error::Singular("dense matrix is not positive definite"))?;
                Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
            }
        }
    }

    /// Inverse, in the same structural class where possible.
    pub fn inverse(&self) -> Result<SymMatrix> {
        match self {
            SymMatrix::Diagonal(d) => {
                if d.iter().any(|&v| v == 0.0 || !v.is_finite()) {
                    return Err(Error::Singular("diagonal has a zero entry"));
                }
                Ok(SymMatrix::Diagonal(d.map(|v| 1.0 / v)))
            }
            SymMatrix::Rank1 { scale, direction } => {
                let v = scale * direction.norm_squared();
                if direction.len() == 1 && v != 0.0 {
                    Ok(SymMatrix::Diagonal(DVector::from_element(1, 1.0 / v)))
                } else {
                    Err(Error::Singular("rank-1 matrix"))
                }
            }
            SymMatrix::DiagonalPlusRank1 {
                diag,
                coef,
                direction,
            } => {
                if diag.iter().any(|&v| v == 0.0 || !v.is_finite()) {
                    return Err(Error::Singular("diagonal has a zero entry"));
                }
                let dinv = diag.map(|v| 1.0 / v);
                let w = dinv.component_mul(direction);
                let t = w.dot(direction);
                let denom = 1.0 + coef * t;
                if denom.abs() <= 1e-14 * (1.0 + (coef * t).abs()) {
                    return Err(Error::SingularUpdate(denom));
                }
                Ok(SymMatrix::DiagonalPlusRank1 {
                    diag: dinv,
                    coef: -coef / denom,
                    direction: w,
                })
            }
            SymMatrix::Dense(m) => {
                let chol = symmetrize(m)
                    .cholesky()
                    .ok_or(Error::Singular("dense matrix is not positive definite"))?;
                Ok(SymMatrix::Dense(symmetrize(&chol.inverse())))
            }
        }
    }

    /// `tr(A B)` for two symmetric matrices.
    pub fn trace_product(&self, other: &SymMatrix) -> Result<f64> {
        check_dim(self.dim(), other.dim(), "trace product")?;
        match (self.low_rank_parts(), other.low_rank_parts()) {
            (Some((da, a, u)), Some((db, b, v))) => {
                let mut tr: f64 = da.iter().zip(db.iter()).map(|(x, y)| x * y).sum();
                if let Some(v) = v {
                    tr += b * da.iter().zip(v.iter()).map(|(d, x)| d * x * x).sum::<f64>();
                }
                if let Some(u) = u {
                    tr += a * db.iter().zip(u.iter()).map(|(d, x)| d * x * x).sum::<f64>();
                }
                if let (Some(u), Some(v)) = (u, v) {
                    let uv = u.dot(v);
                    tr += a * b * uv * uv;
                }
                Ok(tr)
            }
            _ => Ok(self.to_dense().component_mul(&other.to_dense()).sum()),
        }
    }

    /// Pieces of the pseudo-normaliser of a (possibly rank-deficient)
    /// precision `Λ` with natural location `η`: `(ηᵀΛ⁺η, ln|Λ|₊, rank)`.
    pub(crate) fn pseudo_normalizer_parts(&self, eta: &DVector<f64>) -> Result<(f64, f64, usize)> {
        match self {
            SymMatrix::Rank1 { scale, direction } => {
                let n2 = direction.norm_squared();
                let v = scale * n2;
                if !(v > 0.0) {
                    return Ok((0.0, 0.0, 0));
                }
                let p = direction.dot(eta);
                Ok((p * p / (scale * n2 * n2), v.ln(), 1))
            }
            SymMatrix::Dense(m) => {
                let eig = symmetrize(m).symmetric_eigen();
                let max = eig.eigenvalues.amax();
                let cut = max * 1e-12;
                let mut quad = 0.0;
                let mut logdet = 0.0;
                let mut rank = 0;
                for (i, &ev) in eig.eigenvalues.iter().enumerate() {
                    if ev > cut {
                        let p = eig.eigenvectors.column(i).dot(eta);
                        quad += p * p / ev;
                        logdet += ev.ln();
                        rank += 1;
                    }
                }
                Ok((quad, logdet, rank))
            }
            full => {
                let inv = full.inverse()?;
                Ok((inv.quad_form(eta), full.log_det()?, full.dim()))
            }
        }
    }
}

/// Applies a square-root factor `S` (with `S Sᵀ = Σ`) to standard normals.
#[derive(Clone, Debug)]
pub enum SqrtFactor {
    Diagonal(DVector<f64>),
    /// `Diag(sqrt_diag) (I + alpha û ûᵀ)`
    DiagonalPlusRank1 {
        sqrt_diag: DVector<f64>,
        unit: DVector<f64>,
        alpha: f64,
    },
    Rank1(DVector<f64>),
    Lower(DMatrix<f64>),
}

impl SqrtFactor {
    pub fn new(m: &SymMatrix) -> Result<Self> {
        m.check_psd()?;
        Ok(match m {
            SymMatrix::Diagonal(d) => SqrtFactor::Diagonal(d.map(f64::sqrt)),
            SymMatrix::Rank1 { scale, direction } => SqrtFactor::Rank1(direction * scale.sqrt()),
            SymMatrix::DiagonalPlusRank1 {
                diag,
                coef,
                direction,
            } => {
                let sqrt_diag = diag.map(f64::sqrt);
                let u = direction.component_div(&sqrt_diag);
                let n2 = u.norm_squared();
                if n2 == 0.0 {
                    SqrtFactor::Diagonal(sqrt_diag)
                } else {
                    let t = (coef * n2).max(-1.0);
                    // sqrt(1 + t) - 1 without cancellation
                    let alpha = t / ((1.0 + t).sqrt() + 1.0);
                    SqrtFactor::DiagonalPlusRank1 {
                        sqrt_diag,
                        unit: u / n2.sqrt(),
                        alpha,
                    }
                }
            }
            SymMatrix::Dense(mat) => {
                let sym = symmetrize(mat);
                match sym.clone().cholesky() {
                    Some(ch) => SqrtFactor::Lower(ch.unpack()),
                    None => {
                        let eig = sym.symmetric_eigen();
                        let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                        SqrtFactor::Lower(&eig.eigenvectors * DMatrix::from_diagonal(&root))
                    }
                }
            }
        })
    }

    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            SqrtFactor::Diagonal(s) => s.component_mul(z),
            SqrtFactor::DiagonalPlusRank1 {
                sqrt_diag,
                unit,
                alpha,
            } => {
                let inner = z + unit * (alpha * unit.dot(z));
                sqrt_diag.component_mul(&inner)
            }
            SqrtFactor::Rank1(v) => v * z[0],
            SqrtFactor::Lower(l) => l * z,
        }
    }
}
