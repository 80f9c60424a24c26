//! Sweeps over the dimension `K` and the network invariance report.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{
    apply_permutation, apply_permutation_flat, build_bz, enumerate_permutations, forward, layerwise_fit,
    permutation_count, translate_node, Activation, Dataset, FitConfig, FitResult, MlpSpec, WeightVector,
    DEFAULT_ENUMERATION_CAP,
};
use crate::error::{invalid, Result};
use crate::gaussian::{standard_normal, MomentGaussian};
use crate::invariance::{
    data_related_bound, invariance_gap, ConstructedPosteriorPair, GapMethod, PermutationTransform,
    DEFAULT_COMPONENT_CAP,
};
use crate::linear::{
    elbo_terms, invariance_gap_closed_form, theta_0_star, theta_mix_star, ElboReport, TranslationLinearModel, Which,
    SIGMA2_Y_FIGURE,
};
use crate::mc::{chunk_rng, DEFAULT_IDENTITY_SAMPLES};

/// `1, 2, …, 100`, then geometric from 200 to 10⁴.
pub fn default_k_values() -> Vec<usize> {
    let mut ks: Vec<usize> = (1..=100).collect();
    let steps = 16;
    for i in 0..=steps {
        let k = (200.0 * 50f64.powf(i as f64 / steps as f64)).round() as usize;
        if ks.last() != Some(&k) {
            ks.push(k);
        }
    }
    ks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub k_values: Vec<usize>,
    pub n_obs: usize,
    pub y_value: f64,
    pub sigma2_y: f64,
    pub sigma2_0: f64,
    pub seed: u64,
    pub output: Option<std::path::PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k_values: default_k_values(),
            n_obs: 10,
            y_value: 1.0,
            sigma2_y: SIGMA2_Y_FIGURE,
            sigma2_0: 1.0,
            seed: 0,
            output: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() {
            return Err(invalid("k_values", "need at least one K"));
        }
        if self.k_values.contains(&0) {
            return Err(invalid("k_values", "every K must be at least 1"));
        }
        if self.n_obs == 0 {
            return Err(invalid("n_obs", "need at least one observation"));
        }
        if !(self.sigma2_y > 0.0) || !(self.sigma2_0 > 0.0) {
            return Err(invalid("sigma2", "variances must be positive"));
        }
        if !self.y_value.is_finite() {
            return Err(invalid("y_value", "must be finite"));
        }
        Ok(())
    }

    pub fn model(&self, k: usize) -> Result<TranslationLinearModel> {
        TranslationLinearModel::figure(k, self.n_obs, self.y_value, self.sigma2_y, self.sigma2_0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub k: usize,
    pub gap_at_theta_mix_star: f64,
    pub gap_at_theta_0_star: f64,
    pub data_related_bound: f64,
}

pub const GAP_HEADER: [&str; 4] = ["K", "gap_at_theta_mix_star", "gap_at_theta_0_star", "data_related_bound"];

pub fn gap_sweep(config: &SweepConfig) -> Result<Vec<GapRow>> {
    config.validate()?;
    config
        .k_values
        .par_iter()
        .map(|&k| {
            let model = config.model(k)?;
            // prior output variance xᵀΣx / K² = σ²₀ at every input
            let bound = data_related_bound(&vec![config.sigma2_0; model.n()], model.y(), model.sigma2_y())?;
            Ok(GapRow {
                k,
                gap_at_theta_mix_star: invariance_gap_closed_form(&model, &theta_mix_star(&model)?)?,
                gap_at_theta_0_star: invariance_gap_closed_form(&model, &theta_0_star(&model)?)?,
                data_related_bound: bound,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboRow {
    pub k: usize,
    pub q0_theta_0_star: ElboReport,
    pub q0_theta_mix_star: ElboReport,
    pub qmix_theta_0_star: ElboReport,
    pub qmix_theta_mix_star: ElboReport,
}

impl ElboRow {
    fn reports(&self) -> [&ElboReport; 4] {
        [
            &self.q0_theta_0_star,
            &self.q0_theta_mix_star,
            &self.qmix_theta_0_star,
            &self.qmix_theta_mix_star,
        ]
    }
}

pub fn elbo_header() -> Vec<String> {
    let mut h = vec!["K".to_string()];
    for q in ["q0", "qmix"] {
        for th in ["theta_0_star", "theta_mix_star"] {
            for term in ["ell", "kl", "elbo", "predictive_variance"] {
                h.push(format!("{q}_{th}_{term}"));
            }
        }
    }
    h
}

pub fn elbo_sweep(config: &SweepConfig) -> Result<Vec<ElboRow>> {
    config.validate()?;
    config
        .k_values
        .par_iter()
        .map(|&k| {
            let model = config.model(k)?;
            let t0 = theta_0_star(&model)?;
            let tm = theta_mix_star(&model)?;
            Ok(ElboRow {
                k,
                q0_theta_0_star: elbo_terms(&model, &t0, Which::MeanField)?,
                q0_theta_mix_star: elbo_terms(&model, &tm, Which::MeanField)?,
                qmix_theta_0_star: elbo_terms(&model, &t0, Which::InvarianceAbiding)?,
                qmix_theta_mix_star: elbo_terms(&model, &tm, Which::InvarianceAbiding)?,
            })
        })
        .collect()
}

/// 17 significant digits, enough to round-trip every `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

pub fn write_gap_csv<W: Write>(rows: &[GapRow], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    let io = |e: csv::Error| crate::error::Error::Io(e.to_string());
    w.write_record(GAP_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            format_real(r.gap_at_theta_mix_star),
            format_real(r.gap_at_theta_0_star),
            format_real(r.data_related_bound),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| crate::error::Error::Io(e.to_string()))
}

pub fn write_elbo_csv<W: Write>(rows: &[ElboRow], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    let io = |e: csv::Error| crate::error::Error::Io(e.to_string());
    w.write_record(elbo_header()).map_err(io)?;
    for r in rows {
        let mut rec = vec![r.k.to_string()];
        for rep in r.reports() {
            for v in [rep.ell, rep.kl, rep.elbo, rep.predictive_variance] {
                rec.push(format_real(v));
            }
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| crate::error::Error::Io(e.to_string()))
}

/// Evaluates a real-valued literal such as `0.5`, `1e-3` or `1/(2*pi*e)`.
///
/// Supports `+ - * /`, unary minus, parentheses, `pi`, `e` and
/// juxtaposition-free numbers.
pub fn parse_real(s: &str) -> Result<f64> {
    if let Ok(v) = s.trim().parse::<f64>() {
        return Ok(v);
    }
    let tokens: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
    let mut p = ExprParser { s: &tokens, pos: 0 };
    let v = p.expr()?;
    if p.pos != tokens.len() {
        return Err(invalid("expression", format!("unexpected input at position {} in {s:?}", p.pos)));
    }
    Ok(v)
}

struct ExprParser<'a> {
    s: &'a [char],
    pos: usize,
}

impl ExprParser<'_> {
    fn peek(&self) -> Option<char> {
        self.s.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<f64> {
        let mut v = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek() {
            self.pos += 1;
            let r = self.term()?;
            v = if c == '+' { v + r } else { v - r };
        }
        Ok(v)
    }

    fn term(&mut self) -> Result<f64> {
        let mut v = self.factor()?;
        while let Some(c @ ('*' | '/')) = self.peek() {
            self.pos += 1;
            let r = self.factor()?;
            v = if c == '*' { v * r } else { v / r };
        }
        Ok(v)
    }

    fn factor(&mut self) -> Result<f64> {
        match self.peek() {
            Some('-') => {
                self.pos += 1;
                Ok(-self.factor()?)
            }
            Some('(') => {
                self.pos += 1;
                let v = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(invalid("expression", "unbalanced parenthesis"));
                }
                self.pos += 1;
                Ok(v)
            }
            Some(c) if c.is_ascii_alphabetic() || c == 'π' => {
                let start = self.pos;
                while self.peek().is_some_and(|c| c.is_ascii_alphabetic() || c == 'π') {
                    self.pos += 1;
                }
                let word: String = self.s[start..self.pos].iter().collect();
                match word.as_str() {
                    "pi" | "π" => Ok(std::f64::consts::PI),
                    "e" => Ok(std::f64::consts::E),
                    other => Err(invalid("expression", format!("unknown name {other:?}"))),
                }
            }
            Some(_) => {
                let start = self.pos;
                while let Some(c) = self.peek() {
                    let exp_sign = (c == '-' || c == '+') && matches!(self.s.get(self.pos.wrapping_sub(1)), Some('e' | 'E'));
                    if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || exp_sign {
                        // `e` is only an exponent when a digit follows
                        if (c == 'e' || c == 'E')
                            && !self.s.get(self.pos + 1).is_some_and(|d| d.is_ascii_digit() || *d == '-' || *d == '+')
                        {
                            break;
                        }
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let lit: String = self.s[start..self.pos].iter().collect();
                lit.parse::<f64>()
                    .map_err(|_| invalid("expression", format!("bad number {lit:?}")))
            }
            None => Err(invalid("expression", "unexpected end of input")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BnnCheckConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    /// Synthetic dataset size when no dataset is given.
    pub n_data: usize,
    pub sigma2_y: f64,
    /// Distance between `g0` and the prior mean, in prior standard deviations.
    pub separation: f64,
    pub gap_samples: usize,
    pub fit: bool,
    pub fit_config: FitConfig,
}

impl Default for BnnCheckConfig {
    fn default() -> Self {
        Self {
            input_dim: 1,
            hidden_widths: vec![2],
            activation: Activation::Tanh,
            seed: 0,
            n_data: 20,
            sigma2_y: 0.1,
            separation: 10.0,
            gap_samples: DEFAULT_IDENTITY_SAMPLES,
            fit: false,
            fit_config: FitConfig::default(),
        }
    }
}

impl BnnCheckConfig {
    pub fn spec(&self) -> Result<MlpSpec> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_widths);
        widths.push(1);
        let spec = MlpSpec::with_hidden(widths, self.activation)?;
        spec.check_toy_size()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PermutationGapReport {
    pub gap: f64,
    pub stderr: f64,
    pub upper: f64,
    pub in_range: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BnnCheckReport {
    pub layer_widths: Vec<usize>,
    pub num_weights: usize,
    pub translation_max_residual: f64,
    pub permutation_max_residual: f64,
    pub permutations_enumerated: usize,
    pub kronecker_max_disagreement: f64,
    pub permutation_gap: PermutationGapReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitResult>,
    pub pass: bool,
}

/// Inputs `N(0, I)` and targets from a random network plus noise.
pub fn synthetic_dataset(spec: &MlpSpec, n: usize, sigma2_y: f64, seed: u64) -> Result<Dataset> {
    let mut rng = chunk_rng(seed, 0);
    let w = WeightVector::new(spec, standard_normal(&mut rng, spec.num_weights()))?;
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x = standard_normal(&mut rng, spec.input_dim());
        let f = forward(spec, &w, &x)?.output;
        targets.push(f + sigma2_y.sqrt() * crate::invariance::normal_draw(&mut rng));
        inputs.push(x.iter().copied().collect());
    }
    Dataset::new(inputs, targets)
}

/// Translation and permutation invariance residuals at random weights,
/// the permutation-mixture gap, and optionally a layer-wise fit.
pub fn bnn_check(config: &BnnCheckConfig, dataset: Option<&Dataset>) -> Result<BnnCheckReport> {
    let spec = config.spec()?;
    let mut rng = chunk_rng(config.seed, 1);
    let nodes = spec.nodes();

    let mut translation: f64 = 0.0;
    for _ in 0..100 {
        let w = WeightVector::new(&spec, standard_normal(&mut rng, spec.num_weights()))?;
        let (l, j) = nodes[rng.random_range(0..nodes.len())];
        let x = standard_normal(&mut rng, spec.input_dim());
        let pass = forward(&spec, &w, &x)?;
        let bz = build_bz(&pass.activations[l])?;
        let delta = standard_normal(&mut rng, bz.basis.ncols());
        let mut moved = w.clone();
        moved.set_node(&spec, l, j, &translate_node(&w.node(&spec, l, j), &bz, &delta)?)?;
        translation = translation.max((forward(&spec, &moved, &x)?.output - pass.output).abs());
    }

    let perms: Vec<_> = enumerate_permutations(&spec, DEFAULT_ENUMERATION_CAP)?.collect();
    let w = WeightVector::new(&spec, standard_normal(&mut rng, spec.num_weights()))?;
    let inputs: Vec<DVector<f64>> = (0..50).map(|_| standard_normal(&mut rng, spec.input_dim())).collect();
    let mut permutation: f64 = 0.0;
    let mut kron: f64 = 0.0;
    for p in &perms {
        let a = apply_permutation(p, &spec, &w)?;
        let b = apply_permutation_flat(p, &spec, &w)?;
        kron = kron.max((a.as_vector() - b.as_vector()).amax());
        for x in &inputs {
            permutation = permutation.max((forward(&spec, &a, x)?.output - forward(&spec, &w, x)?.output).abs());
        }
    }

    let n = spec.num_weights();
    let prior = MomentGaussian::diagonal(DVector::zeros(n), DVector::from_element(n, 1.0))?;
    let direction = standard_normal(&mut rng, n);
    let g0 = MomentGaussian::diagonal(
        direction.normalize() * config.separation,
        DVector::from_element(n, 0.01),
    )?;
    let transform = PermutationTransform::new(perms.iter().map(|p| p.index_map(&spec)).collect())?;
    let pair = ConstructedPosteriorPair::permutation(prior.clone(), g0, &transform)?;
    let est = invariance_gap(&pair, GapMethod::MonteCarlo, config.gap_samples, config.seed, DEFAULT_COMPONENT_CAP)?;
    let upper = (permutation_count(&spec) as f64).ln();
    let slack = 3.0 * est.stderr + 1e-10;
    let gap = PermutationGapReport {
        gap: est.gap,
        stderr: est.stderr,
        upper,
        in_range: est.gap >= -slack && est.gap <= upper + slack,
    };

    let fit = if config.fit {
        let synthetic;
        let data = match dataset {
            Some(d) => d,
            None => {
                synthetic = synthetic_dataset(&spec, config.n_data, config.sigma2_y, config.seed)?;
                &synthetic
            }
        };
        Some(layerwise_fit(&spec, &prior, data, config.sigma2_y, &config.fit_config)?)
    } else {
        None
    };

    let pass = translation < 1e-9 && permutation < 1e-9 && kron == 0.0 && gap.in_range;
    Ok(BnnCheckReport {
        layer_widths: spec.layer_widths().to_vec(),
        num_weights: n,
        translation_max_residual: translation,
        permutation_max_residual: permutation,
        permutations_enumerated: perms.len(),
        kronecker_max_disagreement: kron,
        permutation_gap: gap,
        fit,
        pass,
    })
}
