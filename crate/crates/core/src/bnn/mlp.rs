use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::gaussian::LN_2PI;

/// Weight budget for the toy-scale checks and the layer-wise fit.
pub const MAX_TOY_WEIGHTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Identity => a,
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(invalid("activation", format!("unknown activation `{other}`"))),
        }
    }
}

/// Fully connected network without biases and with a scalar output.
///
/// `layer_widths = [n₀, n₁, …, n_L]` with `n_L = 1`; `activations[l]` is
/// applied after layer `l + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_widths: Vec<usize>,
    activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(invalid("layer_widths", "need an input width and at least one layer"));
        }
        if layer_widths.iter().any(|&n| n == 0) {
            return Err(invalid("layer_widths", "all widths must be at least 1"));
        }
        if *layer_widths.last().unwrap() != 1 {
            return Err(invalid("layer_widths", "the output width must be 1"));
        }
        check_dim(layer_widths.len() - 1, activations.len(), "activations per layer")?;
        Ok(Self {
            layer_widths,
            activations,
        })
    }

    /// `hidden` on every hidden layer and the identity on the output.
    pub fn with_hidden(layer_widths: Vec<usize>, hidden: Activation) -> Result<Self> {
        let l = layer_widths.len().saturating_sub(1);
        let mut acts = vec![hidden; l];
        if let Some(last) = acts.last_mut() {
            *last = Activation::Identity;
        }
        Self::new(layer_widths, acts)
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    /// Widths of the hidden layers `n₁ … n_{L−1}`.
    pub fn hidden_widths(&self) -> &[usize] {
        &self.layer_widths[1..self.depth()]
    }

    pub fn num_weights(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    /// `(rows, cols)` of the weight matrix of layer `layer` (0-based).
    pub fn layer_shape(&self, layer: usize) -> (usize, usize) {
        (self.layer_widths[layer + 1], self.layer_widths[layer])
    }

    /// Offset of layer `layer` in the flat weight vector.
    pub fn layer_offset(&self, layer: usize) -> usize {
        self.layer_widths[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1])
            .sum()
    }

    /// Range of the weights feeding node `node` of layer `layer`.
    pub fn node_range(&self, layer: usize, node: usize) -> std::ops::Range<usize> {
        let fan_in = self.layer_widths[layer];
        let start = self.layer_offset(layer) + node * fan_in;
        start..start + fan_in
    }

    /// All `(layer, node)` pairs in layer-major order.
    pub fn nodes(&self) -> Vec<(usize, usize)> {
        (0..self.depth())
            .flat_map(|l| (0..self.layer_widths[l + 1]).map(move |j| (l, j)))
            .collect()
    }

    pub fn check_toy_size(&self) -> Result<()> {
        let n = self.num_weights();
        if n > MAX_TOY_WEIGHTS {
            return Err(invalid(
                "layer_widths",
                format!("{n} weights exceed the toy-scale limit of {MAX_TOY_WEIGHTS}"),
            ));
        }
        Ok(())
    }
}

/// Flat weights; layer `l` is stored row-major, so each node's incoming
/// weights are contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    data: DVector<f64>,
}

impl WeightVector {
    pub fn new(spec: &MlpSpec, data: DVector<f64>) -> Result<Self> {
        check_dim(spec.num_weights(), data.len(), "weight vector")?;
        Ok(Self { data })
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            data: DVector::zeros(spec.num_weights()),
        }
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.data
    }

    pub fn node(&self, spec: &MlpSpec, layer: usize, node: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.data.as_slice()[spec.node_range(layer, node)])
    }

    pub fn set_node(&mut self, spec: &MlpSpec, layer: usize, node: usize, w: &DVector<f64>) -> Result<()> {
        let r = spec.node_range(layer, node);
        check_dim(r.len(), w.len(), "node weights")?;
        self.data.as_mut_slice()[r].copy_from_slice(w.as_slice());
        Ok(())
    }

    /// `W_l` with row `j` equal to `w_{l,j}`.
    pub fn layer_matrix(&self, spec: &MlpSpec, layer: usize) -> DMatrix<f64> {
        let (rows, cols) = spec.layer_shape(layer);
        let off = spec.layer_offset(layer);
        DMatrix::from_row_slice(rows, cols, &self.data.as_slice()[off..off + rows * cols])
    }

    pub fn from_layer_matrices(spec: &MlpSpec, mats: &[DMatrix<f64>]) -> Result<Self> {
        check_dim(spec.depth(), mats.len(), "layer matrices")?;
        let mut data = Vec::with_capacity(spec.num_weights());
        for (l, m) in mats.iter().enumerate() {
            let (rows, cols) = spec.layer_shape(l);
            check_dim(rows, m.nrows(), "layer rows")?;
            check_dim(cols, m.ncols(), "layer columns")?;
            data.extend(m.transpose().iter());
        }
        Self::new(spec, DVector::from_vec(data))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPass {
    pub output: f64,
    /// `z₀ = x, z₁, …, z_L`
    pub activations: Vec<DVector<f64>>,
}

/// Layer-by-layer evaluation, node by node.
pub fn forward(spec: &MlpSpec, w: &WeightVector, x: &DVector<f64>) -> Result<ForwardPass> {
    check_dim(spec.input_dim(), x.len(), "network input")?;
    let mut activations = Vec::with_capacity(spec.depth() + 1);
    activations.push(x.clone());
    for l in 0..spec.depth() {
        let prev = &activations[l];
        let h = spec.activations[l];
        let z = DVector::from_fn(spec.layer_widths[l + 1], |j, _| {
            let r = spec.node_range(l, j);
            let pre: f64 = w.data.as_slice()[r].iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
            h.apply(pre)
        });
        activations.push(z);
    }
    Ok(ForwardPass {
        output: activations[spec.depth()][0],
        activations,
    })
}

/// Output of the network starting from `z` at the input of layer `from`.
pub(crate) fn forward_from(spec: &MlpSpec, w: &[f64], from: usize, z: &[f64], scratch: &mut Vec<f64>) -> f64 {
    let mut cur: Vec<f64> = z.to_vec();
    for l in from..spec.depth() {
        let fan_in = spec.layer_widths[l];
        let off = spec.layer_offset(l);
        let h = spec.activations[l];
        scratch.clear();
        for j in 0..spec.layer_widths[l + 1] {
            let row = &w[off + j * fan_in..off + (j + 1) * fan_in];
            let pre: f64 = row.iter().zip(&cur).map(|(a, b)| a * b).sum();
            scratch.push(h.apply(pre));
        }
        std::mem::swap(&mut cur, scratch);
    }
    cur[0]
}

/// Inputs and scalar targets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        check_dim(inputs.len(), targets.len(), "targets")?;
        if let Some(first) = inputs.first() {
            for x in &inputs {
                check_dim(first.len(), x.len(), "input width")?;
            }
        }
        Ok(Self { inputs, targets })
    }

    /// `n` copies of input `(1/K) 1` with target `y`: the linear regression
    /// `y = 1ᵀw / K + ε` seen as a one-layer identity network.
    pub fn averaging(k: usize, n: usize, y: f64) -> Self {
        Self {
            inputs: vec![vec![1.0 / k as f64; k]; n],
            targets: vec![y; n],
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, n: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.inputs[n])
    }

    pub fn check(&self, spec: &MlpSpec) -> Result<()> {
        for x in &self.inputs {
            check_dim(spec.input_dim(), x.len(), "dataset input")?;
        }
        Ok(())
    }
}

/// Gaussian log-likelihood of the targets.
pub fn log_likelihood(spec: &MlpSpec, w: &WeightVector, data: &Dataset, sigma2_y: f64) -> Result<f64> {
    data.check(spec)?;
    let mut acc = 0.0;
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        let f = forward(spec, w, &DVector::from_column_slice(x))?.output;
        acc += -0.5 * (LN_2PI + sigma2_y.ln()) - 0.5 * (y - f).powi(2) / sigma2_y;
    }
    Ok(acc)
}
