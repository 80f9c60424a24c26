//! Dense reference implementations used as oracles by the integration
//! tests. Nothing here calls into the structured code paths.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let c = m.clone().cholesky().expect("positive definite");
    let i = c.inverse();
    (&i + i.transpose()) * 0.5
}

pub fn logdet(m: &DMatrix<f64>) -> f64 {
    let c = m.clone().cholesky().expect("positive definite");
    2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn log_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x - mean;
    let q = d.dot(&(inv(cov) * &d));
    -0.5 * (x.len() as f64 * LN_2PI + logdet(cov) + q)
}

/// `KL(N(m0, S0) ‖ N(m1, S1))`
pub fn kl(m0: &DVector<f64>, s0: &DMatrix<f64>, m1: &DVector<f64>, s1: &DMatrix<f64>) -> f64 {
    let k = m0.len() as f64;
    let p1 = inv(s1);
    let d = m1 - m0;
    0.5 * ((&p1 * s0).trace() + d.dot(&(&p1 * &d)) - k + logdet(s1) - logdet(s0))
}

/// Dense Gaussian with its own Cholesky sampler.
#[derive(Clone, Debug)]
pub struct Dense {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Dense {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    pub fn from_core(g: &invgap_core::MomentGaussian) -> Self {
        Self::new(g.mean().clone(), g.cov().to_dense())
    }

    pub fn sampler(&self) -> impl Fn(&mut ChaCha8Rng) -> DVector<f64> + '_ {
        let l = self.cov.clone().cholesky().expect("positive definite").unpack();
        move |rng: &mut ChaCha8Rng| {
            let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            &self.mean + &l * z
        }
    }

    pub fn max_diff(&self, other: &Dense) -> f64 {
        (&self.mean - &other.mean).amax().max((&self.cov - &other.cov).amax())
    }
}

/// Prior `N(μ, Diag σ²)` times `Π_n N(yₙ; aᵀw, σ²_y)`, by dense algebra.
pub fn regression_posterior(
    mu: &DVector<f64>,
    sigma2: &DVector<f64>,
    a: &DVector<f64>,
    y: &[f64],
    sigma2_y: f64,
) -> Dense {
    let n = y.len() as f64;
    let prec = DMatrix::from_diagonal(&sigma2.map(|v| 1.0 / v)) + a * a.transpose() * (n / sigma2_y);
    let cov = inv(&prec);
    let eta = mu.component_div(sigma2) + a * (y.iter().sum::<f64>() / sigma2_y);
    Dense::new(&cov * eta, cov)
}

/// `ln p(y)` for the same model from the joint Gaussian over all targets.
pub fn regression_evidence(mu: &DVector<f64>, sigma2: &DVector<f64>, a: &DVector<f64>, y: &[f64], sigma2_y: f64) -> f64 {
    let n = y.len();
    let s = a.dot(&sigma2.component_mul(a));
    let cov = DMatrix::from_fn(n, n, |i, j| s + if i == j { sigma2_y } else { 0.0 });
    let mean = DVector::from_element(n, a.dot(mu));
    log_pdf(&DVector::from_column_slice(y), &mean, &cov)
}

/// `E_q[Σₙ ln N(yₙ; aᵀw, σ²_y)]`
pub fn regression_ell(q: &Dense, a: &DVector<f64>, y: &[f64], sigma2_y: f64) -> f64 {
    let fm = a.dot(&q.mean);
    let fv = a.dot(&(&q.cov * a));
    y.iter()
        .map(|yn| -0.5 * (LN_2PI + sigma2_y.ln()) - ((yn - fm).powi(2) + fv) / (2.0 * sigma2_y))
        .sum()
}

/// `q0 ∝ N(μ, Diag σ²) N(m, Diag λ)`
pub fn mean_field(mu: &DVector<f64>, sigma2: &DVector<f64>, m: &DVector<f64>, lambda: &DVector<f64>) -> Dense {
    let var = DVector::from_fn(mu.len(), |i, _| sigma2[i] * lambda[i] / (sigma2[i] + lambda[i]));
    let mean = DVector::from_fn(mu.len(), |i, _| var[i] * (mu[i] / sigma2[i] + m[i] / lambda[i]));
    Dense::new(mean, DMatrix::from_diagonal(&var))
}

/// `qmix ∝ N(μ, Diag σ²) · N(xᵀw; xᵀm, xᵀ Diag(λ) x)` by dense precision
/// algebra.
pub fn translation_mix(mu: &DVector<f64>, sigma2: &DVector<f64>, m: &DVector<f64>, lambda: &DVector<f64>, x: &DVector<f64>) -> Dense {
    let xvx = x.dot(&lambda.component_mul(x));
    let prec = DMatrix::from_diagonal(&sigma2.map(|v| 1.0 / v)) + x * x.transpose() / xvx;
    let cov = inv(&prec);
    let eta = mu.component_div(sigma2) + x * (x.dot(m) / xvx);
    Dense::new(&cov * eta, cov)
}

/// Row-major layer matrices of a flat weight vector.
pub fn layer_mats(widths: &[usize], w: &[f64]) -> Vec<DMatrix<f64>> {
    let mut off = 0;
    widths
        .windows(2)
        .map(|p| {
            let (cols, rows) = (p[0], p[1]);
            let m = DMatrix::from_row_slice(rows, cols, &w[off..off + rows * cols]);
            off += rows * cols;
            m
        })
        .collect()
}

/// `tanh` hidden layers, identity output.
pub fn tanh_net(widths: &[usize], w: &[f64], x: &DVector<f64>) -> f64 {
    let mats = layer_mats(widths, w);
    let mut z = x.clone();
    for (l, m) in mats.iter().enumerate() {
        z = m * z;
        if l + 1 < mats.len() {
            z = z.map(f64::tanh);
        }
    }
    z[0]
}
