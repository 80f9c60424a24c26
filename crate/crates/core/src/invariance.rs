//! Likelihood invariances and the posteriors built from them.
//!
//! A transform `t(w, r)` leaves the likelihood unchanged. Averaging a
//! likelihood approximation `g0` over all `r` gives an invariant
//! approximation; its product with the prior is `qmix`, while the plain
//! product with `g0` is the mean-field `q0`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::gaussian::{
    kl_divergence, log_sum_exp, standard_normal, GaussianMixture, MomentGaussian, NaturalGaussian,
    SymMatrix,
};
use crate::mc::{chunk_rng, mc_expectation, mc_kl, McEstimate, McRng};

/// Default tolerance on the log-density gap of condition 1.
pub const DEFAULT_CONDITION_TOL: f64 = 1e-8;
/// Central finite-difference step for the Jacobian check.
pub const FD_STEP: f64 = 1e-6;
/// Largest mixture accepted by the Monte-Carlo gap estimator.
pub const DEFAULT_COMPONENT_CAP: u128 = 1_000_000;
/// Standard deviation of sampled translation parameters.
const TRANSLATION_PARAM_SD: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Translation,
    Permutation,
    /// Not a likelihood invariance; kept as a negative control.
    Scaling,
}

pub trait InvarianceTransform: Sync {
    type Param: Clone + std::fmt::Debug + Send + Sync;

    fn kind(&self) -> TransformKind;
    fn dim(&self) -> usize;
    fn apply(&self, w: &DVector<f64>, r: &Self::Param) -> DVector<f64>;
    /// `φ(r)` from condition 1.
    fn remap(&self, r: &Self::Param) -> Self::Param;
    fn sample_param(&self, rng: &mut McRng) -> Self::Param;
    /// `ln |det ∂t/∂w|` from the known structure of the map.
    fn exact_log_abs_det(&self, r: &Self::Param) -> f64;
}

/// `B` with `xᵀB = 0`: the identity on the first `K-1` coordinates stacked
/// over the row `-x_{1..K-1} / x_K`.
pub fn translation_basis(x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let k = x.len();
    if k == 0 {
        return Err(invalid("x", "empty input vector"));
    }
    let last = x[k - 1];
    if last == 0.0 {
        return Err(invalid("x", "last component is zero"));
    }
    let mut b = DMatrix::zeros(k, k - 1);
    for i in 0..k - 1 {
        b[(i, i)] = 1.0;
        b[(k - 1, i)] = -x[i] / last;
    }
    Ok(b)
}

/// `w ↦ w + BΔ` for a fixed input direction `x`.
#[derive(Clone, Debug)]
pub struct TranslationTransform {
    basis: DMatrix<f64>,
    /// `σ²/(σ² + λ)` restricted to the free coordinates.
    shrink: DVector<f64>,
}

impl TranslationTransform {
    /// `prior_var` and `lik_var` are the diagonals of the prior and `g0`.
    pub fn new(x: &DVector<f64>, prior_var: &DVector<f64>, lik_var: &DVector<f64>) -> Result<Self> {
        check_dim(x.len(), prior_var.len(), "prior variance")?;
        check_dim(x.len(), lik_var.len(), "likelihood variance")?;
        let basis = translation_basis(x)?;
        let k = x.len();
        let shrink = DVector::from_fn(k - 1, |i, _| prior_var[i] / (prior_var[i] + lik_var[i]));
        Ok(Self { basis, shrink })
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }
}

impl InvarianceTransform for TranslationTransform {
    type Param = DVector<f64>;

    fn kind(&self) -> TransformKind {
        TransformKind::Translation
    }

    fn dim(&self) -> usize {
        self.basis.nrows()
    }

    fn apply(&self, w: &DVector<f64>, r: &DVector<f64>) -> DVector<f64> {
        w + &self.basis * r
    }

    fn remap(&self, r: &DVector<f64>) -> DVector<f64> {
        self.shrink.component_mul(r)
    }

    fn sample_param(&self, rng: &mut McRng) -> DVector<f64> {
        standard_normal(rng, self.basis.ncols()) * TRANSLATION_PARAM_SD
    }

    fn exact_log_abs_det(&self, _: &DVector<f64>) -> f64 {
        0.0
    }
}

/// Coordinate relabellings `t(w, r)_i = w_{perm_r[i]}`.
#[derive(Clone, Debug)]
pub struct PermutationTransform {
    perms: Vec<Vec<usize>>,
}

impl PermutationTransform {
    pub fn new(perms: Vec<Vec<usize>>) -> Result<Self> {
        let dim = perms.first().map(Vec::len).ok_or_else(|| invalid("perms", "no permutations"))?;
        for p in &perms {
            check_dim(dim, p.len(), "permutation length")?;
            let mut seen = vec![false; dim];
            for &i in p {
                if i >= dim || std::mem::replace(&mut seen[i], true) {
                    return Err(invalid("perms", "index map is not a bijection"));
                }
            }
        }
        Ok(Self { perms })
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }
}

impl InvarianceTransform for PermutationTransform {
    type Param = usize;

    fn kind(&self) -> TransformKind {
        TransformKind::Permutation
    }

    fn dim(&self) -> usize {
        self.perms[0].len()
    }

    fn apply(&self, w: &DVector<f64>, r: &usize) -> DVector<f64> {
        let p = &self.perms[*r];
        DVector::from_fn(p.len(), |i, _| w[p[i]])
    }

    fn remap(&self, r: &usize) -> usize {
        *r
    }

    fn sample_param(&self, rng: &mut McRng) -> usize {
        rng.random_range(0..self.perms.len())
    }

    fn exact_log_abs_det(&self, _: &usize) -> f64 {
        0.0
    }
}

/// `w ↦ factor · w`
#[derive(Clone, Debug)]
pub struct ScalingTransform {
    pub dim: usize,
    pub factor: f64,
}

impl InvarianceTransform for ScalingTransform {
    type Param = ();

    fn kind(&self) -> TransformKind {
        TransformKind::Scaling
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, w: &DVector<f64>, _: &()) -> DVector<f64> {
        w * self.factor
    }

    fn remap(&self, _: &()) {}

    fn sample_param(&self, _: &mut McRng) {}

    fn exact_log_abs_det(&self, _: &()) -> f64 {
        self.dim as f64 * self.factor.abs().ln()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    #[serde(rename = "condition1_max_log_density_gap")]
    pub condition1: Option<f64>,
    #[serde(rename = "condition2_max_logdet_deviation")]
    pub condition2: Option<f64>,
    /// Largest disagreement between the finite-difference and exact
    /// log-determinants.
    pub logdet_path_disagreement: Option<f64>,
    pub samples_checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Draws `w` around the prior, three prior standard deviations wide.
fn spread_sampler(prior: &MomentGaussian) -> impl Fn(&mut McRng) -> DVector<f64> + '_ {
    let sd = prior.cov().diagonal().map(|v| 3.0 * v.max(0.0).sqrt());
    move |rng: &mut McRng| prior.mean() + sd.component_mul(&standard_normal(rng, prior.dim()))
}

/// Condition 1: `p(w) g0(t(w, r)) ∝ p(t(w, φ(r))) g0(t(w, φ(r)))` in `w`.
///
/// The two sides may differ by a factor that depends on `r` alone, so each
/// sample compares the log ratio at two independent points `w` sharing `r`.
pub fn verify_condition_1<T: InvarianceTransform>(
    prior: &MomentGaussian,
    g0: &MomentGaussian,
    transform: &T,
    n_samples: usize,
    seed: u64,
    tol: f64,
) -> Result<ConditionReport> {
    check_dim(transform.dim(), prior.dim(), "prior")?;
    check_dim(transform.dim(), g0.dim(), "g0")?;
    let lp = prior.log_density_fn()?;
    let lg = g0.log_density_fn()?;
    let draw_w = spread_sampler(prior);
    let ratio = |w: &DVector<f64>, r: &T::Param| {
        let moved = transform.apply(w, r);
        let remapped = transform.apply(w, &transform.remap(r));
        lp.eval(w) + lg.eval(&moved) - lp.eval(&remapped) - lg.eval(&remapped)
    };
    let mut rng = chunk_rng(seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..n_samples {
        let r = transform.sample_param(&mut rng);
        let (w1, w2) = (draw_w(&mut rng), draw_w(&mut rng));
        let gap = (ratio(&w1, &r) - ratio(&w2, &r)).abs();
        worst = if gap.is_nan() { f64::INFINITY } else { worst.max(gap) };
    }
    Ok(ConditionReport {
        condition1: Some(worst),
        condition2: None,
        logdet_path_disagreement: None,
        samples_checked: n_samples,
        tolerance: tol,
        pass: worst < tol,
    })
}

/// `ln |det J|` of a square matrix via LU.
fn log_abs_det(j: DMatrix<f64>) -> f64 {
    let lu = j.lu();
    let u = lu.u();
    u.diagonal().iter().map(|d| d.abs().ln()).sum()
}

/// Condition 2: the transform is volume preserving.
///
/// The Jacobian comes from central differences with step [`FD_STEP`]; its
/// log-determinant must also agree with the exact one reported by the
/// transform.
pub fn verify_condition_2<T: InvarianceTransform>(
    transform: &T,
    n_samples: usize,
    seed: u64,
    tol: f64,
) -> ConditionReport {
    let k = transform.dim();
    let mut rng = chunk_rng(seed, 0);
    let mut worst: f64 = 0.0;
    let mut disagreement: f64 = 0.0;
    for _ in 0..n_samples {
        let r = transform.sample_param(&mut rng);
        let w = standard_normal(&mut rng, k) * 3.0;
        let mut jac = DMatrix::zeros(k, k);
        for j in 0..k {
            let mut hi = w.clone();
            let mut lo = w.clone();
            hi[j] += FD_STEP;
            lo[j] -= FD_STEP;
            let col = (transform.apply(&hi, &r) - transform.apply(&lo, &r)) / (2.0 * FD_STEP);
            jac.set_column(j, &col);
        }
        let fd = log_abs_det(jac);
        let exact = transform.exact_log_abs_det(&r);
        worst = worst.max(fd.abs());
        disagreement = disagreement.max((fd - exact).abs());
    }
    // Finite differences of an affine map are exact up to rounding of order
    // ε / FD_STEP per entry.
    let path_tol = 1e-6 * (k as f64).max(1.0);
    ConditionReport {
        condition1: None,
        condition2: Some(worst),
        logdet_path_disagreement: Some(disagreement),
        samples_checked: n_samples,
        tolerance: tol,
        pass: worst < tol && disagreement < path_tol,
    }
}

/// `q0 ∝ p · g0` for diagonal Gaussians, with `ln Z0`.
pub fn mean_field_product(prior: &MomentGaussian, g0: &MomentGaussian) -> Result<(MomentGaussian, f64)> {
    check_dim(prior.dim(), g0.dim(), "g0")?;
    match (prior.cov(), g0.cov()) {
        (SymMatrix::Diagonal(s), SymMatrix::Diagonal(l)) => {
            let (mu, m) = (prior.mean(), g0.mean());
            let k = mu.len();
            let mut mean = DVector::zeros(k);
            let mut var = DVector::zeros(k);
            let mut log_z = 0.0;
            for i in 0..k {
                let prec = 1.0 / s[i] + 1.0 / l[i];
                var[i] = 1.0 / prec;
                mean[i] = var[i] * (mu[i] / s[i] + m[i] / l[i]);
                let tot = s[i] + l[i];
                let d = m[i] - mu[i];
                log_z += -0.5 * (crate::gaussian::LN_2PI + tot.ln()) - 0.5 * d * d / tot;
            }
            Ok((MomentGaussian::diagonal(mean, var)?, log_z))
        }
        _ => {
            let (prod, log_z) = prior.to_natural()?.product(&g0.to_natural()?)?;
            Ok((prod.to_moment()?, log_z))
        }
    }
}

/// Rank-1 precision `x xᵀ / (xᵀ V x)` located at `m`: `g0` averaged over
/// every translation that keeps `xᵀw` fixed.
pub fn translation_mixture_likelihood(g0: &MomentGaussian, x: &DVector<f64>) -> Result<NaturalGaussian> {
    check_dim(g0.dim(), x.len(), "input direction")?;
    let xvx = g0.cov().quad_form(x);
    if !(xvx > 0.0) {
        return Err(invalid("x", "zero input direction"));
    }
    NaturalGaussian::rank1(1.0 / xvx, x.clone(), g0.mean())
}

/// `qmix ∝ p · g_mix` for the translation invariance along `x`, with
/// `s = xᵀ(V + Σ)x`:
/// mean `μ + (xᵀ(m − μ)/s) Σx`, covariance `Σ − (Σx)(Σx)ᵀ / s`.
pub fn translation_qmix(prior: &MomentGaussian, g0: &MomentGaussian, x: &DVector<f64>) -> Result<MomentGaussian> {
    translation_qmix_signed(prior, g0, x, -1.0)
}

/// `sign` is -1 for the true construction; +1 is the fault injected by the
/// verification suite.
pub(crate) fn translation_qmix_signed(
    prior: &MomentGaussian,
    g0: &MomentGaussian,
    x: &DVector<f64>,
    sign: f64,
) -> Result<MomentGaussian> {
    check_dim(prior.dim(), g0.dim(), "g0")?;
    check_dim(prior.dim(), x.len(), "input direction")?;
    let sigma = match prior.cov() {
        SymMatrix::Diagonal(s) => s,
        _ => return Err(Error::Unsupported("a diagonal prior")),
    };
    if x.iter().all(|&v| v == 0.0) {
        return Err(invalid("x", "zero input direction"));
    }
    if x.len() == 1 && sign < 0.0 {
        return Ok(mean_field_product(prior, g0)?.0);
    }
    let sx = sigma.component_mul(x);
    let s = g0.cov().quad_form(x) + sx.dot(x);
    let shift = x.dot(&(g0.mean() - prior.mean())) / s;
    let mean = prior.mean() + &sx * shift;
    let cov = SymMatrix::DiagonalPlusRank1 {
        diag: sigma.clone(),
        coef: sign / s,
        direction: sx,
    };
    MomentGaussian::new(mean, cov)
}

#[derive(Clone, Debug)]
pub enum Qmix {
    Gaussian(MomentGaussian),
    Mixture(GaussianMixture),
}

impl Qmix {
    pub fn mean(&self) -> DVector<f64> {
        match self {
            Qmix::Gaussian(g) => g.mean().clone(),
            Qmix::Mixture(m) => m.mean(),
        }
    }

    pub fn component_count(&self) -> usize {
        match self {
            Qmix::Gaussian(_) => 1,
            Qmix::Mixture(m) => m.len(),
        }
    }

    fn log_density(&self) -> Result<Box<dyn Fn(&DVector<f64>) -> f64 + Sync>> {
        Ok(match self {
            Qmix::Gaussian(g) => {
                let f = g.log_density_fn()?;
                Box::new(move |w| f.eval(w))
            }
            Qmix::Mixture(m) => {
                let f = m.log_density_fn()?;
                Box::new(move |w| f.eval(w))
            }
        })
    }

    fn sampler(&self) -> Result<Box<dyn Fn(&mut McRng) -> DVector<f64> + Sync>> {
        Ok(match self {
            Qmix::Gaussian(g) => {
                let s = g.sampler()?;
                Box::new(move |r| s.sample(r))
            }
            Qmix::Mixture(m) => {
                let s = m.sampler()?;
                Box::new(move |r| s.sample(r))
            }
        })
    }
}

/// The mean-field and invariance-abiding posteriors built from one prior
/// and one likelihood approximation `g0`.
#[derive(Clone, Debug)]
pub struct ConstructedPosteriorPair {
    pub prior: MomentGaussian,
    pub g0: MomentGaussian,
    pub kind: TransformKind,
    pub q0: MomentGaussian,
    pub qmix: Qmix,
    pub log_z0: f64,
    pub log_zmix: f64,
}

impl ConstructedPosteriorPair {
    /// Translations orthogonal to `x`; `qmix` is Gaussian.
    pub fn translation(prior: MomentGaussian, g0: MomentGaussian, x: &DVector<f64>) -> Result<Self> {
        Self::translation_signed(prior, g0, x, -1.0)
    }

    pub(crate) fn translation_signed(prior: MomentGaussian, g0: MomentGaussian, x: &DVector<f64>, sign: f64) -> Result<Self> {
        let (q0, log_z0) = mean_field_product(&prior, &g0)?;
        let qmix = translation_qmix_signed(&prior, &g0, x, sign)?;
        let (_, log_zmix) = prior.to_natural()?.product(&translation_mixture_likelihood(&g0, x)?)?;
        Ok(Self {
            prior,
            g0,
            kind: TransformKind::Translation,
            q0,
            qmix: Qmix::Gaussian(qmix),
            log_z0,
            log_zmix,
        })
    }

    /// `qmix` is the mixture over `r` of `p(w) g0(t(w, r))`, each component
    /// weighted by its own normaliser.
    pub fn permutation(prior: MomentGaussian, g0: MomentGaussian, transform: &PermutationTransform) -> Result<Self> {
        check_dim(transform.dim(), prior.dim(), "prior")?;
        let (q0, log_z0) = mean_field_product(&prior, &g0)?;
        let mut components = Vec::with_capacity(transform.perms().len());
        let mut log_w = Vec::with_capacity(transform.perms().len());
        for p in transform.perms() {
            let mut inv = vec![0; p.len()];
            for (i, &j) in p.iter().enumerate() {
                inv[j] = i;
            }
            let (c, lz) = mean_field_product(&prior, &g0.permuted(&inv)?)?;
            components.push(c);
            log_w.push(lz);
        }
        let log_zmix = log_sum_exp(&log_w) - (log_w.len() as f64).ln();
        Ok(Self {
            prior,
            g0,
            kind: TransformKind::Permutation,
            q0,
            qmix: Qmix::Mixture(GaussianMixture::new(log_w, components)?),
            log_z0,
            log_zmix,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllEquivalence {
    pub ell_q0: McEstimate,
    pub ell_qmix: McEstimate,
    pub z_score: f64,
}

/// Monte-Carlo estimates of the expected log-likelihood under both
/// posteriors. Both runs share `seed`.
pub fn ell_equivalence_check<F>(
    pair: &ConstructedPosteriorPair,
    log_likelihood: F,
    n_samples: usize,
    seed: u64,
) -> Result<EllEquivalence>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    let s0 = pair.q0.sampler()?;
    let ell_q0 = mc_expectation(|r: &mut McRng| s0.sample(r), &log_likelihood, n_samples, seed)?;
    let smix = pair.qmix.sampler()?;
    let ell_qmix = mc_expectation(|r: &mut McRng| smix(r), &log_likelihood, n_samples, seed)?;
    let se = (ell_q0.stderr.powi(2) + ell_qmix.stderr.powi(2)).sqrt();
    let d = ell_q0.value - ell_qmix.value;
    let z_score = if d == 0.0 { 0.0 } else { d / se };
    Ok(EllEquivalence {
        ell_q0,
        ell_qmix,
        z_score,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMethod {
    ClosedForm,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub gap: f64,
    pub stderr: f64,
    pub method: GapMethod,
}

/// `KL(q0 ‖ qmix)`.
pub fn invariance_gap(
    pair: &ConstructedPosteriorPair,
    method: GapMethod,
    n_samples: usize,
    seed: u64,
    component_cap: u128,
) -> Result<GapEstimate> {
    match method {
        GapMethod::ClosedForm => match &pair.qmix {
            Qmix::Gaussian(g) => Ok(GapEstimate {
                gap: kl_divergence(&pair.q0, g)?,
                stderr: 0.0,
                method,
            }),
            Qmix::Mixture(_) => Err(Error::Unsupported("a Gaussian qmix for the closed form")),
        },
        GapMethod::MonteCarlo => {
            let count = pair.qmix.component_count() as u128;
            if count > component_cap {
                return Err(Error::CapExceeded {
                    count,
                    cap: component_cap,
                });
            }
            let e = mc_gap(pair, n_samples, seed)?;
            Ok(GapEstimate {
                gap: e.value,
                stderr: e.stderr,
                method,
            })
        }
    }
}

fn mc_gap(pair: &ConstructedPosteriorPair, n: usize, seed: u64) -> Result<McEstimate> {
    let s0 = pair.q0.sampler()?;
    let l0 = pair.q0.log_density_fn()?;
    let lmix = pair.qmix.log_density()?;
    mc_kl(|r: &mut McRng| s0.sample(r), |w| l0.eval(w), lmix, n, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapIdentity {
    pub kl_q0_p: f64,
    pub kl_qmix_p: f64,
    pub kl_q0_qmix: f64,
    /// `(KL(q0‖p) − KL(qmix‖p)) − KL(q0‖qmix)`
    pub residual: f64,
    /// Zero when every term is exact.
    pub stderr: f64,
}

/// Checks that the invariance gap is the difference of the two
/// KL-to-prior terms.
pub fn gap_identity_check(pair: &ConstructedPosteriorPair, n_samples: usize, seed: u64) -> Result<GapIdentity> {
    let kl_q0_p = kl_divergence(&pair.q0, &pair.prior)?;
    let (kl_qmix_p, se_a, kl_q0_qmix, se_b) = match &pair.qmix {
        Qmix::Gaussian(g) => (kl_divergence(g, &pair.prior)?, 0.0, kl_divergence(&pair.q0, g)?, 0.0),
        Qmix::Mixture(_) => {
            let smix = pair.qmix.sampler()?;
            let lmix = pair.qmix.log_density()?;
            let lp = pair.prior.log_density_fn()?;
            let a = mc_kl(smix, &lmix, |w| lp.eval(w), n_samples, seed)?;
            let b = mc_gap(pair, n_samples, seed.wrapping_add(1))?;
            (a.value, a.stderr, b.value, b.stderr)
        }
    };
    Ok(GapIdentity {
        kl_q0_p,
        kl_qmix_p,
        kl_q0_qmix,
        residual: (kl_q0_p - kl_qmix_p) - kl_q0_qmix,
        stderr: (se_a * se_a + se_b * se_b).sqrt(),
    })
}

/// `Σₙ (σ²_L(xₙ) + yₙ²) / (2σ²_y)`: the ELL of a perfect fit minus that of
/// the prior predictive, an upper bound on `KL(q‖p)` at an ELBO optimum.
pub fn data_related_bound(prior_output_var: &[f64], y: &[f64], sigma2_y: f64) -> Result<f64> {
    if !(sigma2_y > 0.0) {
        return Err(invalid("sigma2_y", format!("noise variance {sigma2_y} must be positive")));
    }
    check_dim(prior_output_var.len(), y.len(), "targets")?;
    Ok(prior_output_var
        .iter()
        .zip(y)
        .map(|(s, y)| s + y * y)
        .sum::<f64>()
        / (2.0 * sigma2_y))
}

/// Standard normal draw, exposed for samplers outside this crate.
pub fn normal_draw(rng: &mut McRng) -> f64 {
    rng.sample(StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn proportional_pair(k: usize, seed: u64) -> (MomentGaussian, MomentGaussian, DVector<f64>) {
        let mut rng = McRng::seed_from_u64(seed);
        let sig = DVector::from_fn(k, |_, _| rng.random_range(0.3..3.0));
        let alpha = rng.random_range(0.05..5.0);
        let mu = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let m = DVector::from_fn(k, |_, _| rng.random_range(-2.0..2.0));
        let mut x = DVector::from_fn(k, |_, _| rng.random_range(0.2..2.0));
        x[k - 1] = 1.0;
        (
            MomentGaussian::diagonal(mu, sig.clone()).unwrap(),
            MomentGaussian::diagonal(m, sig * alpha).unwrap(),
            x,
        )
    }

    fn swap_transform() -> PermutationTransform {
        PermutationTransform::new(vec![vec![0, 1], vec![1, 0]]).unwrap()
    }

    #[test]
    fn basis_examples() {
        assert_eq!(translation_basis(&dv(&[1.0, 1.0])).unwrap(), DMatrix::from_row_slice(2, 1, &[1.0, -1.0]));
        let x = dv(&[1.0, 2.0, 4.0]);
        let b = translation_basis(&x).unwrap();
        assert_eq!(b, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -0.25, -0.5]));
        assert!((x.transpose() * b).amax() < 1e-12 * x.norm());
        assert_eq!(translation_basis(&dv(&[2.0])).unwrap().ncols(), 0);
        assert!(translation_basis(&dv(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn condition_1_translation() {
        let (prior, g0, x) = proportional_pair(3, 1);
        let t = TranslationTransform::new(&x, &prior.cov().diagonal(), &g0.cov().diagonal()).unwrap();
        let r = verify_condition_1(&prior, &g0, &t, 1000, 2, DEFAULT_CONDITION_TOL).unwrap();
        assert!(r.pass && r.condition1.unwrap() < 1e-9, "{r:?}");
    }

    #[test]
    fn condition_1_translation_needs_proportional_variances() {
        let prior = MomentGaussian::diagonal(dv(&[0.0, 0.0, 0.0]), dv(&[1.0, 2.0, 3.0])).unwrap();
        let g0 = MomentGaussian::diagonal(dv(&[1.0, 1.0, 1.0]), dv(&[1.0, 1.0, 1.0])).unwrap();
        let x = dv(&[1.0, 1.0, 1.0]);
        let t = TranslationTransform::new(&x, &prior.cov().diagonal(), &g0.cov().diagonal()).unwrap();
        assert!(!verify_condition_1(&prior, &g0, &t, 200, 2, DEFAULT_CONDITION_TOL).unwrap().pass);
    }

    #[test]
    fn condition_1_permutation_isotropic_and_not() {
        let g0 = MomentGaussian::diagonal(dv(&[1.0, -0.5]), dv(&[0.3, 0.8])).unwrap();
        let iso = MomentGaussian::standard(2);
        let r = verify_condition_1(&iso, &g0, &swap_transform(), 1000, 3, DEFAULT_CONDITION_TOL).unwrap();
        assert!(r.pass && r.condition1.unwrap() < 1e-9);
        let aniso = MomentGaussian::diagonal(dv(&[0.0, 0.0]), dv(&[1.0, 2.0])).unwrap();
        let r = verify_condition_1(&aniso, &g0, &swap_transform(), 1000, 3, DEFAULT_CONDITION_TOL).unwrap();
        assert!(!r.pass, "{r:?}");
    }

    #[test]
    fn condition_2_volume() {
        let (prior, g0, x) = proportional_pair(4, 5);
        let t = TranslationTransform::new(&x, &prior.cov().diagonal(), &g0.cov().diagonal()).unwrap();
        let r = verify_condition_2(&t, 50, 1, DEFAULT_CONDITION_TOL);
        assert!(r.pass, "{r:?}");
        assert!(verify_condition_2(&swap_transform(), 20, 1, DEFAULT_CONDITION_TOL).pass);
        let s = ScalingTransform { dim: 3, factor: 2.0 };
        let r = verify_condition_2(&s, 5, 1, DEFAULT_CONDITION_TOL);
        assert!(!r.pass);
        assert!((r.condition2.unwrap() - 3.0 * 2f64.ln()).abs() < 1e-8);
        assert!(r.logdet_path_disagreement.unwrap() < 1e-8);
    }

    #[test]
    fn translation_qmix_matches_natural_product() {
        let (prior, g0, x) = proportional_pair(5, 9);
        let closed = translation_qmix(&prior, &g0, &x).unwrap();
        let lik = translation_mixture_likelihood(&g0, &x).unwrap();
        let (prod, _) = prior.to_natural().unwrap().product(&lik).unwrap();
        let m = prod.to_moment().unwrap();
        assert!((m.mean() - closed.mean()).amax() < 1e-12);
        assert!((m.cov().to_dense() - closed.cov().to_dense()).amax() < 1e-12);
    }

    #[test]
    fn translation_qmix_finite_beta_oracle() {
        // g_β(w) = ∫ g0(w + BΔ) N(Δ; 0, β²I) dΔ; qmix_β ∝ p g_β
        let (prior, g0, x) = proportional_pair(3, 4);
        let b = translation_basis(&x).unwrap();
        let beta = 1e6;
        let cov_beta = g0.cov().to_dense() + &b * b.transpose() * (beta * beta);
        let g_beta = MomentGaussian::new(g0.mean().clone(), SymMatrix::Dense(cov_beta)).unwrap();
        let (prod, _) = prior.to_natural().unwrap().product(&g_beta.to_natural().unwrap()).unwrap();
        let finite = prod.to_moment().unwrap();
        let exact = translation_qmix(&prior, &g0, &x).unwrap();
        assert!((finite.mean() - exact.mean()).amax() < 1e-4);
    }

    #[test]
    fn translation_k1_is_mean_field() {
        let prior = MomentGaussian::diagonal(dv(&[0.2]), dv(&[2.0])).unwrap();
        let g0 = MomentGaussian::diagonal(dv(&[1.0]), dv(&[0.5])).unwrap();
        let pair = ConstructedPosteriorPair::translation(prior, g0, &dv(&[1.0])).unwrap();
        match &pair.qmix {
            Qmix::Gaussian(g) => assert_eq!(g, &pair.q0),
            _ => unreachable!(),
        }
        let gap = invariance_gap(&pair, GapMethod::ClosedForm, 0, 0, DEFAULT_COMPONENT_CAP).unwrap();
        assert_eq!(gap.gap, 0.0);
    }

    #[test]
    fn gap_identity_translation() {
        for seed in 0..50 {
            let (prior, g0, x) = proportional_pair(1 + seed as usize % 12, seed);
            let pair = ConstructedPosteriorPair::translation(prior, g0, &x).unwrap();
            let id = gap_identity_check(&pair, 0, 0).unwrap();
            assert!(id.residual.abs() < 1e-9, "{id:?}");
            assert!(id.kl_q0_qmix <= id.kl_q0_p + 1e-12);
        }
    }

    #[test]
    fn gap_vanishes_for_flat_g0() {
        let prior = MomentGaussian::diagonal(DVector::zeros(4), DVector::from_element(4, 4.0)).unwrap();
        let g0 = MomentGaussian::diagonal(DVector::from_element(4, 1.0), DVector::from_element(4, 1e12)).unwrap();
        let pair = ConstructedPosteriorPair::translation(prior, g0, &DVector::from_element(4, 1.0)).unwrap();
        let gap = invariance_gap(&pair, GapMethod::ClosedForm, 0, 0, DEFAULT_COMPONENT_CAP).unwrap();
        assert!(gap.gap < 1e-6);
    }

    #[test]
    fn gap_closed_form_matches_mc() {
        let (prior, g0, x) = proportional_pair(4, 12);
        let pair = ConstructedPosteriorPair::translation(prior, g0, &x).unwrap();
        let exact = invariance_gap(&pair, GapMethod::ClosedForm, 0, 0, DEFAULT_COMPONENT_CAP).unwrap();
        let mc = invariance_gap(&pair, GapMethod::MonteCarlo, 100_000, 3, DEFAULT_COMPONENT_CAP).unwrap();
        assert!((mc.gap - exact.gap).abs() < 3.0 * mc.stderr, "{mc:?} {exact:?}");
    }

    #[test]
    fn permutation_gap_separated_and_collapsed() {
        let prior = MomentGaussian::standard(2);
        let g0 = MomentGaussian::diagonal(dv(&[6.0, -6.0]), dv(&[0.05, 0.05])).unwrap();
        let pair = ConstructedPosteriorPair::permutation(prior.clone(), g0, &swap_transform()).unwrap();
        let gap = invariance_gap(&pair, GapMethod::MonteCarlo, 100_000, 1, DEFAULT_COMPONENT_CAP).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((gap.gap - ln2).abs() <= 3.0 * gap.stderr + 1e-9, "{gap:?}");

        let flat = ConstructedPosteriorPair::permutation(prior.clone(), prior, &swap_transform()).unwrap();
        let gap = invariance_gap(&flat, GapMethod::MonteCarlo, 100_000, 1, DEFAULT_COMPONENT_CAP).unwrap();
        assert!(gap.gap.abs() <= 3.0 * gap.stderr + 1e-12, "{gap:?}");
    }

    #[test]
    fn permutation_gap_identity_mc() {
        let prior = MomentGaussian::standard(2);
        let g0 = MomentGaussian::diagonal(dv(&[1.0, -0.5]), dv(&[0.4, 0.7])).unwrap();
        let pair = ConstructedPosteriorPair::permutation(prior, g0, &swap_transform()).unwrap();
        let id = gap_identity_check(&pair, 100_000, 7).unwrap();
        assert!(id.residual.abs() < 3.0 * id.stderr, "{id:?}");
    }

    #[test]
    fn mc_gap_respects_cap() {
        let prior = MomentGaussian::standard(2);
        let pair = ConstructedPosteriorPair::permutation(prior.clone(), prior, &swap_transform()).unwrap();
        assert!(matches!(
            invariance_gap(&pair, GapMethod::MonteCarlo, 10, 0, 1),
            Err(Error::CapExceeded { count: 2, cap: 1 })
        ));
        assert!(invariance_gap(&pair, GapMethod::ClosedForm, 10, 0, 1).is_err());
    }

    #[test]
    fn ell_equivalence_translation() {
        let (prior, g0, x) = proportional_pair(3, 21);
        let pair = ConstructedPosteriorPair::translation(prior, g0, &x).unwrap();
        let k = x.len() as f64;
        let ll = |w: &DVector<f64>| {
            let f = x.dot(w) / k;
            -0.5 * (f - 1.0).powi(2) * 10.0
        };
        let e = ell_equivalence_check(&pair, ll, 100_000, 4).unwrap();
        assert!(e.z_score.abs() < 3.0, "{e:?}");
    }

    #[test]
    fn ell_equivalence_collapsed_is_exact() {
        let prior = MomentGaussian::standard(2);
        let pair = ConstructedPosteriorPair::permutation(prior.clone(), prior, &swap_transform()).unwrap();
        let pair = ConstructedPosteriorPair {
            qmix: Qmix::Gaussian(pair.q0.clone()),
            ..pair
        };
        let e = ell_equivalence_check(&pair, |w| -w.norm_squared(), 1000, 4).unwrap();
        assert_eq!(e.ell_q0.value, e.ell_qmix.value);
        assert_eq!(e.z_score, 0.0);
    }

    #[test]
    fn bound_examples() {
        let sy = 1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::E);
        let b = data_related_bound(&[1.0; 10], &[1.0; 10], sy).unwrap();
        assert!((b - 10.0 * 2.0 * std::f64::consts::PI * std::f64::consts::E).abs() < 1e-10);
        assert_eq!(data_related_bound(&[0.0], &[0.0], 1.0).unwrap(), 0.0);
        assert!(data_related_bound(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn log_zmix_matches_scalar_marginal() {
        let (prior, g0, x) = proportional_pair(4, 2);
        let pair = ConstructedPosteriorPair::translation(prior.clone(), g0.clone(), &x).unwrap();
        let s = g0.cov().quad_form(&x) + prior.cov().quad_form(&x);
        let d = x.dot(&(g0.mean() - prior.mean()));
        let n2 = x.norm_squared();
        let expect = -0.5 * (crate::gaussian::LN_2PI + (s / n2).ln()) - 0.5 * d * d / s;
        assert!((pair.log_zmix - expect).abs() < 1e-12);
    }
}
