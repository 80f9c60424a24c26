use itertools::Itertools;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::mlp::{MlpSpec, WeightVector};
use crate::error::{check_dim, invalid, Error, Result};

/// Default ceiling on the number of enumerated stacked permutations.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// One relabelling `π_l` per hidden layer, acting as `(P̃ z)_i = z_{π(i)}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StackedPermutation {
    pub layers: Vec<Vec<usize>>,
}

impl StackedPermutation {
    pub fn identity(spec: &MlpSpec) -> Self {
        Self {
            layers: spec.hidden_widths().iter().map(|&n| (0..n).collect()).collect(),
        }
    }

    pub fn new(spec: &MlpSpec, layers: Vec<Vec<usize>>) -> Result<Self> {
        check_dim(spec.hidden_widths().len(), layers.len(), "hidden layers")?;
        for (p, &n) in layers.iter().zip(spec.hidden_widths()) {
            check_dim(n, p.len(), "hidden permutation")?;
            let mut seen = vec![false; n];
            for &i in p {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(invalid("layers", "not a permutation"));
                }
            }
        }
        Ok(Self { layers })
    }

    /// `π_l` for `l = 0..=L`, identity at the input and the output.
    fn full(&self, spec: &MlpSpec) -> Vec<Vec<usize>> {
        let mut out = vec![(0..spec.input_dim()).collect()];
        out.extend(self.layers.iter().cloned());
        out.push(vec![0]);
        out
    }

    /// `w'[a] = w[map[a]]` over the flat weight vector.
    pub fn index_map(&self, spec: &MlpSpec) -> Vec<usize> {
        let pis = self.full(spec);
        let mut map = Vec::with_capacity(spec.num_weights());
        for l in 0..spec.depth() {
            let (rows, cols) = spec.layer_shape(l);
            let off = spec.layer_offset(l);
            for i in 0..rows {
                for k in 0..cols {
                    map.push(off + pis[l + 1][i] * cols + pis[l][k]);
                }
            }
        }
        map
    }

    /// Block-diagonal 0/1 matrix with blocks `P̃_l ⊗ P̃_{l−1}`.
    ///
    /// The Kronecker order follows from the row-major storage of each
    /// layer; for column-major `vec` it would be `P̃_{l−1} ⊗ P̃_l`.
    pub fn matrix(&self, spec: &MlpSpec) -> DMatrix<f64> {
        let pis = self.full(spec);
        let n = spec.num_weights();
        let mut p = DMatrix::zeros(n, n);
        for l in 0..spec.depth() {
            let block = layer_matrix(&pis[l + 1]).kronecker(&layer_matrix(&pis[l]));
            let off = spec.layer_offset(l);
            p.view_mut((off, off), block.shape()).copy_from(&block);
        }
        p
    }
}

/// `P̃` with `P̃_{i, π(i)} = 1`.
pub fn layer_matrix(pi: &[usize]) -> DMatrix<f64> {
    let n = pi.len();
    let mut m = DMatrix::zeros(n, n);
    for (i, &j) in pi.iter().enumerate() {
        m[(i, j)] = 1.0;
    }
    m
}

/// `Π_l n_l!` over hidden layers; saturates at `u128::MAX`.
pub fn permutation_count(spec: &MlpSpec) -> u128 {
    spec.hidden_widths()
        .iter()
        .try_fold(1u128, |acc, &n| (1..=n as u128).try_fold(acc, |a, k| a.checked_mul(k)))
        .unwrap_or(u128::MAX)
}

/// Every stacked permutation exactly once, identity first.
pub fn enumerate_permutations(spec: &MlpSpec, cap: u128) -> Result<impl Iterator<Item = StackedPermutation>> {
    let count = permutation_count(spec);
    if count > cap {
        return Err(Error::CapExceeded { count, cap });
    }
    let hidden = spec.hidden_widths().to_vec();
    let iter: Box<dyn Iterator<Item = StackedPermutation>> = if hidden.is_empty() {
        Box::new(std::iter::once(StackedPermutation { layers: vec![] }))
    } else {
        Box::new(
            hidden
                .into_iter()
                .map(|n| (0..n).permutations(n))
                .multi_cartesian_product()
                .map(|layers| StackedPermutation { layers }),
        )
    };
    Ok(iter)
}

/// `W'_l = P̃_l W_l P̃ᵀ_{l−1}` layer by layer.
pub fn apply_permutation(p: &StackedPermutation, spec: &MlpSpec, w: &WeightVector) -> Result<WeightVector> {
    check_dim(spec.hidden_widths().len(), p.layers.len(), "hidden layers")?;
    let pis = p.full(spec);
    let mats: Vec<DMatrix<f64>> = (0..spec.depth())
        .map(|l| layer_matrix(&pis[l + 1]) * w.layer_matrix(spec, l) * layer_matrix(&pis[l]).transpose())
        .collect();
    WeightVector::from_layer_matrices(spec, &mats)
}

/// `P w` with the materialised block-diagonal matrix.
pub fn apply_permutation_flat(p: &StackedPermutation, spec: &MlpSpec, w: &WeightVector) -> Result<WeightVector> {
    WeightVector::new(spec, p.matrix(spec) * w.as_vector())
}
