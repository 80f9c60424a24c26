use nalgebra::{DMatrix, DVector};

use super::mlp::{forward, MlpSpec, WeightVector};
use crate::error::{check_dim, invalid, Result};
use crate::gaussian::MomentGaussian;
use crate::invariance::translation_basis;
use crate::mc::{mc_variance, McEstimate, McRng};

/// Basis of the node-weight directions that leave `wᵀz` unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationBasisZ {
    pub z: DVector<f64>,
    /// `K × (K−1)`, or `K × K` when `z = 0`.
    pub basis: DMatrix<f64>,
}

/// `B_z = [I; −z₁/z_K … −z_{K−1}/z_K]`.
///
/// When `z_K = 0` the last nonzero component takes the role of `z_K`; when
/// `z = 0` every direction is free and the basis is the identity.
pub fn build_bz(z: &DVector<f64>) -> Result<TranslationBasisZ> {
    let k = z.len();
    if k == 0 {
        return Err(invalid("z", "empty activation vector"));
    }
    let Some(pivot) = z.iter().rposition(|&v| v != 0.0) else {
        return Ok(TranslationBasisZ {
            z: z.clone(),
            basis: DMatrix::identity(k, k),
        });
    };
    // move the pivot to the end, build the basis there, move it back
    let mut order: Vec<usize> = (0..k).collect();
    order.swap(pivot, k - 1);
    let zp = DVector::from_fn(k, |i, _| z[order[i]]);
    let bp = translation_basis(&zp)?;
    let mut basis = DMatrix::zeros(k, k - 1);
    for (i, &src) in order.iter().enumerate() {
        basis.set_row(src, &bp.row(i));
    }
    Ok(TranslationBasisZ { z: z.clone(), basis })
}

/// `w + B_z Δ`
pub fn translate_node(w: &DVector<f64>, bz: &TranslationBasisZ, delta: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(bz.basis.nrows(), w.len(), "node weights")?;
    check_dim(bz.basis.ncols(), delta.len(), "translation")?;
    Ok(w + &bz.basis * delta)
}

/// `Var_{w∼p}[f(x; w)]` by Monte Carlo.
pub fn prior_output_variance(
    spec: &MlpSpec,
    prior: &MomentGaussian,
    x: &DVector<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_dim(spec.num_weights(), prior.dim(), "prior")?;
    check_dim(spec.input_dim(), x.len(), "input")?;
    if n_samples < 1000 {
        return Err(invalid("n_samples", "need at least 1000 samples"));
    }
    let sampler = prior.sampler()?;
    mc_variance(
        |r: &mut McRng| sampler.sample(r),
        |w| {
            let wv = WeightVector::new(spec, w.clone()).expect("prior matches the spec");
            forward(spec, &wv, x).expect("input matches the spec").output
        },
        n_samples,
        seed,
    )
}
