//! Bayesian linear regression `y = xᵀw / K + ε` with a likelihood that is
//! invariant to every translation of `w` orthogonal to `x`.
//!
//! Everything here is closed form and O(K).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::gaussian::{kl_divergence, MomentGaussian, NaturalGaussian, SymMatrix, LN_2PI};
use crate::invariance::{
    mean_field_product, translation_basis, translation_mixture_likelihood, translation_qmix,
    ConstructedPosteriorPair,
};

/// `1/(2πe)`, the noise variance used in the figures.
pub const SIGMA2_Y_FIGURE: f64 = 1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::E);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct TranslationLinearModel {
    x: DVector<f64>,
    y: Vec<f64>,
    sigma2_y: f64,
    prior_mean: DVector<f64>,
    prior_var: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    x: Vec<f64>,
    y: Vec<f64>,
    sigma2_y: f64,
    prior_mean: Vec<f64>,
    prior_var: Vec<f64>,
}

impl From<TranslationLinearModel> for ModelRepr {
    fn from(m: TranslationLinearModel) -> Self {
        ModelRepr {
            x: m.x.iter().copied().collect(),
            y: m.y,
            sigma2_y: m.sigma2_y,
            prior_mean: m.prior_mean.iter().copied().collect(),
            prior_var: m.prior_var.iter().copied().collect(),
        }
    }
}

impl TryFrom<ModelRepr> for TranslationLinearModel {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        TranslationLinearModel::new(
            DVector::from_vec(r.x),
            r.y,
            r.sigma2_y,
            DVector::from_vec(r.prior_mean),
            DVector::from_vec(r.prior_var),
        )
    }
}

impl TranslationLinearModel {
    pub fn new(
        x: DVector<f64>,
        y: Vec<f64>,
        sigma2_y: f64,
        prior_mean: DVector<f64>,
        prior_var: DVector<f64>,
    ) -> Result<Self> {
        let k = x.len();
        if k == 0 {
            return Err(invalid("x", "dimension must be at least 1"));
        }
        if x[k - 1] == 0.0 {
            return Err(invalid("x", "last component must be nonzero"));
        }
        check_dim(k, prior_mean.len(), "prior mean")?;
        check_dim(k, prior_var.len(), "prior variance")?;
        if prior_var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(invalid("prior_var", "entries must be positive and finite"));
        }
        if !(sigma2_y > 0.0) || !sigma2_y.is_finite() {
            return Err(invalid("sigma2_y", format!("noise variance {sigma2_y} must be positive")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("y", "observations must be finite"));
        }
        Ok(Self {
            x,
            y,
            sigma2_y,
            prior_mean,
            prior_var,
        })
    }

    /// `x = 1`, `μ = 0`, `σ² = K σ²₀ 1`, and `n_obs` copies of `y_value`.
    pub fn figure(k: usize, n_obs: usize, y_value: f64, sigma2_y: f64, sigma2_0: f64) -> Result<Self> {
        if !(sigma2_0 > 0.0) {
            return Err(invalid("sigma2_0", "prior variance must be positive"));
        }
        Self::new(
            DVector::from_element(k, 1.0),
            vec![y_value; n_obs],
            sigma2_y,
            DVector::zeros(k),
            DVector::from_element(k, k as f64 * sigma2_0),
        )
    }

    pub fn k(&self) -> usize {
        self.x.len()
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn sigma2_y(&self) -> f64 {
        self.sigma2_y
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn prior_var(&self) -> &DVector<f64> {
        &self.prior_var
    }

    pub fn sum_y(&self) -> f64 {
        self.y.iter().sum()
    }

    pub fn prior(&self) -> MomentGaussian {
        MomentGaussian::diagonal(self.prior_mean.clone(), self.prior_var.clone())
            .expect("validated at construction")
    }

    pub fn x_is_ones(&self) -> bool {
        self.x.iter().all(|&v| v == 1.0)
    }

    /// Same model with the observations replaced.
    pub fn with_y(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(self.x.clone(), y, self.sigma2_y, self.prior_mean.clone(), self.prior_var.clone())
    }

    /// Coefficient `N / (K² σ²_y)` of `x xᵀ` in the likelihood precision.
    fn lik_coef(&self) -> f64 {
        let k = self.k() as f64;
        self.n() as f64 / (k * k * self.sigma2_y)
    }

    /// Log-likelihood of the data at weights `w`.
    pub fn log_likelihood(&self, w: &DVector<f64>) -> f64 {
        let f = self.x.dot(w) / self.k() as f64;
        let sq: f64 = self.y.iter().map(|y| (y - f).powi(2)).sum();
        -sq / (2.0 * self.sigma2_y) - 0.5 * self.n() as f64 * (LN_2PI + self.sigma2_y.ln())
    }
}

/// Mean and variance of the likelihood approximation `g0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct LikelihoodParams {
    pub m: DVector<f64>,
    pub lambda: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    m: Vec<f64>,
    lambda: Vec<f64>,
}

impl From<LikelihoodParams> for ParamsRepr {
    fn from(p: LikelihoodParams) -> Self {
        ParamsRepr {
            m: p.m.iter().copied().collect(),
            lambda: p.lambda.iter().copied().collect(),
        }
    }
}

impl TryFrom<ParamsRepr> for LikelihoodParams {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        LikelihoodParams::new(DVector::from_vec(r.m), DVector::from_vec(r.lambda))
    }
}

impl LikelihoodParams {
    pub fn new(m: DVector<f64>, lambda: DVector<f64>) -> Result<Self> {
        check_dim(m.len(), lambda.len(), "likelihood variance")?;
        if lambda.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(invalid("lambda", "entries must be positive and finite"));
        }
        Ok(Self { m, lambda })
    }

    pub fn g0(&self) -> MomentGaussian {
        MomentGaussian::diagonal(self.m.clone(), self.lambda.clone()).expect("validated at construction")
    }

    fn check(&self, model: &TranslationLinearModel) -> Result<()> {
        check_dim(model.k(), self.m.len(), "likelihood parameters")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    /// `q0`
    MeanField,
    /// `qmix`
    InvarianceAbiding,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub ell: f64,
    pub kl: f64,
    pub elbo: f64,
    pub predictive_variance: f64,
    pub which: Which,
}

pub fn b_matrix(x: &DVector<f64>) -> Result<nalgebra::DMatrix<f64>> {
    translation_basis(x)
}

/// Exact posterior; the precision is `Σ⁻¹ + c x xᵀ` with `c = N/(K²σ²_y)`.
pub fn true_posterior(model: &TranslationLinearModel) -> MomentGaussian {
    let c = model.lik_coef();
    let k = model.k() as f64;
    let sx = model.prior_var.component_mul(&model.x);
    let shrink = c / (1.0 + c * sx.dot(&model.x));
    let b = model.prior_mean.component_div(&model.prior_var) + &model.x * (model.sum_y() / (k * model.sigma2_y));
    let mean = model.prior_var.component_mul(&b) - &sx * (shrink * sx.dot(&b));
    let cov = SymMatrix::DiagonalPlusRank1 {
        diag: model.prior_var.clone(),
        coef: -shrink,
        direction: sx,
    };
    MomentGaussian::new(mean, cov).expect("posterior covariance is positive definite")
}

/// `g0` averaged over all translations: rank-1 precision along `x`.
pub fn mixture_likelihood(model: &TranslationLinearModel, theta: &LikelihoodParams) -> Result<NaturalGaussian> {
    theta.check(model)?;
    translation_mixture_likelihood(&theta.g0(), &model.x)
}

/// `q0 ∝ p · g0` and `ln Z0`.
pub fn q0_posterior(model: &TranslationLinearModel, theta: &LikelihoodParams) -> Result<(MomentGaussian, f64)> {
    theta.check(model)?;
    mean_field_product(&model.prior(), &theta.g0())
}

/// `qmix ∝ p · g_mix`; diagonal minus rank-1 covariance.
pub fn qmix_posterior(model: &TranslationLinearModel, theta: &LikelihoodParams) -> Result<MomentGaussian> {
    theta.check(model)?;
    translation_qmix(&model.prior(), &theta.g0(), &model.x)
}

pub fn posterior_pair(model: &TranslationLinearModel, theta: &LikelihoodParams) -> Result<ConstructedPosteriorPair> {
    theta.check(model)?;
    ConstructedPosteriorPair::translation(model.prior(), theta.g0(), &model.x)
}

fn require_observations(model: &TranslationLinearModel) -> Result<()> {
    if model.n() == 0 {
        return Err(invalid("y", "optimal parameters need at least one observation"));
    }
    Ok(())
}

/// `m = ȳ 1`, `λ = (K σ²_y / N) 1`; only for `x = 1`.
pub fn theta_mix_star(model: &TranslationLinearModel) -> Result<LikelihoodParams> {
    if !model.x_is_ones() {
        return Err(Error::Unsupported("x = 1; use theta_mix_star_general"));
    }
    require_observations(model)?;
    let k = model.k();
    let n = model.n() as f64;
    LikelihoodParams::new(
        DVector::from_element(k, model.sum_y() / n),
        DVector::from_element(k, k as f64 * model.sigma2_y / n),
    )
}

/// A `θ` with `qmix(θ) = p(w | D)` for any `x`.
///
/// Any `λ` with `xᵀ Diag(λ) x = K²σ²_y/N` and any `m` with `xᵀm = K ȳ`
/// works; this picks constant `λ` and `m` parallel to `x`, which reduces to
/// [`theta_mix_star`] when `x = 1`.
pub fn theta_mix_star_general(model: &TranslationLinearModel) -> Result<LikelihoodParams> {
    if model.x_is_ones() {
        return theta_mix_star(model);
    }
    require_observations(model)?;
    let k = model.k() as f64;
    let n = model.n() as f64;
    let xx = model.x.norm_squared();
    let lam = k * k * model.sigma2_y / (n * xx);
    let m = &model.x * (k * model.sum_y() / n / xx);
    LikelihoodParams::new(m, DVector::from_element(model.k(), lam))
}

/// Maximiser of the mean-field ELBO.
///
/// `q0` must match the diagonal of the posterior precision, giving
/// `λᵢ = K²σ²_y/(N xᵢ²)`, and its mean must equal the posterior mean. For
/// `x = 1` the variance is exactly `K` times that of [`theta_mix_star`].
pub fn theta_0_star(model: &TranslationLinearModel) -> Result<LikelihoodParams> {
    require_observations(model)?;
    if model.x.iter().any(|&v| v == 0.0) {
        return Err(Error::Unsupported("nonzero input components; the optimum sets λ = ∞ there"));
    }
    let lambda = if model.x_is_ones() {
        theta_mix_star(model)?.lambda * model.k() as f64
    } else {
        let c = model.lik_coef();
        model.x.map(|xi| 1.0 / (c * xi * xi))
    };
    let post = true_posterior(model);
    let pm = post.mean();
    let m = DVector::from_fn(model.k(), |i, _| {
        pm[i] + lambda[i] * (pm[i] - model.prior_mean[i]) / model.prior_var[i]
    });
    LikelihoodParams::new(m, lambda)
}

/// `(K−1)/2 · [ln((σ̂² + λ̂)/λ̂) + λ̂/(σ̂² + λ̂) − 1]`
pub fn invariance_gap_scalar(k: usize, sigma2_hat: f64, lambda_hat: f64) -> f64 {
    if k <= 1 {
        return 0.0;
    }
    let r = sigma2_hat / lambda_hat;
    0.5 * (k - 1) as f64 * (r.ln_1p() - r / (1.0 + r))
}

/// The gap when every component of `σ²`, `λ`, `μ`, `m` and `x` is equal.
pub fn invariance_gap_closed_form(model: &TranslationLinearModel, theta: &LikelihoodParams) -> Result<f64> {
    theta.check(model)?;
    let same = |v: &DVector<f64>| v.iter().all(|&a| a == v[0]);
    if !(same(&model.prior_var) && same(&theta.lambda) && same(&model.prior_mean) && same(&theta.m) && same(&model.x))
    {
        return Err(Error::Unsupported("equal components; use the generic KL"));
    }
    Ok(invariance_gap_scalar(model.k(), model.prior_var[0], theta.lambda[0]))
}

/// `KL(q0(θ) ‖ qmix(θ))` through the generic Gaussian KL.
pub fn invariance_gap(model: &TranslationLinearModel, theta: &LikelihoodParams) -> Result<f64> {
    let (q0, _) = q0_posterior(model, theta)?;
    kl_divergence(&q0, &qmix_posterior(model, theta)?)
}

/// ELL, KL to the prior, ELBO and predictive variance of `q`.
pub fn elbo_of(model: &TranslationLinearModel, q: &MomentGaussian, which: Which) -> Result<ElboReport> {
    check_dim(model.k(), q.dim(), "posterior")?;
    let k = model.k() as f64;
    let f_mean = model.x.dot(q.mean()) / k;
    let f_var = q.cov().quad_form(&model.x) / (k * k);
    let sq: f64 = model.y.iter().map(|y| (y - f_mean).powi(2) + f_var).sum();
    let ell = -sq / (2.0 * model.sigma2_y) - 0.5 * model.n() as f64 * (LN_2PI + model.sigma2_y.ln());
    let kl = kl_divergence(q, &model.prior())?;
    Ok(ElboReport {
        ell,
        kl,
        elbo: ell - kl,
        predictive_variance: f_var + model.sigma2_y,
        which,
    })
}

pub fn elbo_terms(model: &TranslationLinearModel, theta: &LikelihoodParams, which: Which) -> Result<ElboReport> {
    let q = match which {
        Which::MeanField => q0_posterior(model, theta)?.0,
        Which::InvarianceAbiding => qmix_posterior(model, theta)?,
    };
    elbo_of(model, &q, which)
}

/// `ln p(D)` as a sum of one-step-ahead predictive log densities.
pub fn log_evidence(model: &TranslationLinearModel) -> f64 {
    let mut acc = 0.0;
    for n in 0..model.n() {
        let past = TranslationLinearModel {
            y: model.y[..n].to_vec(),
            ..model.clone()
        };
        let post = true_posterior(&past);
        let k = model.k() as f64;
        let mean = model.x.dot(post.mean()) / k;
        let var = post.cov().quad_form(&model.x) / (k * k) + model.sigma2_y;
        let d = model.y[n] - mean;
        acc += -0.5 * (LN_2PI + var.ln()) - 0.5 * d * d / var;
    }
    acc
}

/// `σ²_y + (N/σ²_y + 1/σ²₀)⁻¹`: predictive variance of the exact posterior
/// when `x = 1` and `σ² = K σ²₀ 1`.
pub fn exact_predictive_variance(n_obs: usize, sigma2_y: f64, sigma2_0: f64) -> f64 {
    sigma2_y + 1.0 / (n_obs as f64 / sigma2_y + 1.0 / sigma2_0)
}
