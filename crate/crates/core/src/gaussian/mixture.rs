use nalgebra::DVector;
use rand::Rng;

use super::moment::{GaussianSampler, LogDensity, MomentGaussian};
use crate::error::{check_dim, invalid, Result};

/// `ln Σ exp(x_i)`, stable for large magnitudes; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug)]
pub struct GaussianMixture {
    log_weights: Vec<f64>,
    components: Vec<MomentGaussian>,
}

impl GaussianMixture {
    /// Weights are given in log space and normalised here.
    pub fn new(log_weights: Vec<f64>, components: Vec<MomentGaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(invalid("components", "mixture needs at least one component"));
        }
        check_dim(components.len(), log_weights.len(), "mixture weights")?;
        let dim = components[0].dim();
        for c in &components {
            check_dim(dim, c.dim(), "mixture component")?;
        }
        let norm = log_sum_exp(&log_weights);
        if !norm.is_finite() {
            return Err(invalid("log_weights", "weights do not normalise"));
        }
        let log_weights = log_weights.iter().map(|w| w - norm).collect();
        Ok(Self {
            log_weights,
            components,
        })
    }

    pub fn uniform(components: Vec<MomentGaussian>) -> Result<Self> {
        let n = components.len();
        Self::new(vec![0.0; n], components)
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[MomentGaussian] {
        &self.components
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (lw, c) in self.log_weights.iter().zip(&self.components) {
            m += c.mean() * lw.exp();
        }
        m
    }

    pub fn log_density_fn(&self) -> Result<MixtureLogDensity> {
        Ok(MixtureLogDensity {
            log_weights: self.log_weights.clone(),
            parts: self
                .components
                .iter()
                .map(|c| c.log_density_fn())
                .collect::<Result<_>>()?,
        })
    }

    pub fn sampler(&self) -> Result<MixtureSampler> {
        let mut acc = 0.0;
        let cumulative = self
            .log_weights
            .iter()
            .map(|w| {
                acc += w.exp();
                acc
            })
            .collect();
        Ok(MixtureSampler {
            cumulative,
            parts: self
                .components
                .iter()
                .map(|c| c.sampler())
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MixtureLogDensity {
    log_weights: Vec<f64>,
    parts: Vec<LogDensity>,
}

impl MixtureLogDensity {
    pub fn eval(&self, w: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self
            .log_weights
            .iter()
            .zip(&self.parts)
            .map(|(lw, p)| lw + p.eval(w))
            .collect();
        log_sum_exp(&terms)
    }
}

#[derive(Clone, Debug)]
pub struct MixtureSampler {
    cumulative: Vec<f64>,
    parts: Vec<GaussianSampler>,
}

impl MixtureSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let total = *self.cumulative.last().unwrap_or(&1.0);
        let u: f64 = rng.random::<f64>() * total;
        let idx = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.parts.len() - 1);
        self.parts[idx].sample(rng)
    }
}
