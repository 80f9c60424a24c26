//! Release acceptance: ten criteria, one PASS/FAIL line each.
//!
//! A few sub-checks are mathematically out of reach with the stated
//! parameters; they are still evaluated at their stated tolerance and
//! reported as FAIL, but marked `known` so the run exits cleanly. The run
//! fails on any other failing sub-check, and also if a `known` one starts
//! passing.

mod common;

use std::f64::consts::{E, LN_2, PI};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use invgap_core::bnn::{
    apply_permutation, apply_permutation_flat, build_bz, enumerate_permutations, layer_matrix, layerwise_fit,
    permutation_count, translate_node, Activation, Dataset, FitConfig, MlpSpec, StackedPermutation, WeightVector,
    DEFAULT_ENUMERATION_CAP,
};
use invgap_core::experiments::{elbo_sweep, gap_sweep, SweepConfig};
use invgap_core::invariance::{
    gap_identity_check, invariance_gap, verify_condition_1, verify_condition_2, PermutationTransform,
    TranslationTransform, DEFAULT_COMPONENT_CAP,
};
use invgap_core::linear::{
    elbo_terms, q0_posterior, qmix_posterior, theta_0_star, theta_mix_star, LikelihoodParams, SIGMA2_Y_FIGURE,
};
use invgap_core::{ConstructedPosteriorPair, GapMethod, MomentGaussian, Qmix, TranslationLinearModel, Which};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct Sub {
    what: String,
    pass: bool,
    /// Out of reach with the stated parameters; see the analysis printed
    /// with the criterion.
    known: bool,
}

fn sub(what: impl Into<String>, pass: bool) -> Sub {
    Sub {
        what: what.into(),
        pass,
        known: false,
    }
}

fn known(what: impl Into<String>, pass: bool) -> Sub {
    Sub {
        what: what.into(),
        pass,
        known: true,
    }
}

struct Case {
    mu: DVector<f64>,
    sigma2: DVector<f64>,
    m: DVector<f64>,
    lambda: DVector<f64>,
    x: DVector<f64>,
}

impl Case {
    fn prior(&self) -> MomentGaussian {
        MomentGaussian::diagonal(self.mu.clone(), self.sigma2.clone()).unwrap()
    }

    fn g0(&self) -> MomentGaussian {
        MomentGaussian::diagonal(self.m.clone(), self.lambda.clone()).unwrap()
    }

    fn p(&self) -> Dense {
        Dense::new(self.mu.clone(), DMatrix::from_diagonal(&self.sigma2))
    }
}

/// Random problem with `K ≤ 20` and likelihood variance proportional to
/// the prior variance.
fn draw_case(r: &mut ChaCha8Rng) -> Case {
    let k = r.random_range(1..=20);
    let sigma2 = DVector::from_fn(k, |_, _| r.random_range(0.3..3.0));
    let alpha = r.random_range(0.05..5.0);
    Case {
        mu: DVector::from_fn(k, |_, _| r.random_range(-1.0..1.0)),
        lambda: &sigma2 * alpha,
        sigma2,
        m: DVector::from_fn(k, |_, _| r.random_range(-2.0..2.0)),
        x: DVector::from_fn(k, |_, _| {
            let v: f64 = r.random_range(0.2..2.0);
            if r.random_bool(0.5) { v } else { -v }
        }),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn criterion_1() -> Vec<Sub> {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut lib, mut oracle, mut matched) = (0f64, 0f64, 0f64);
    for _ in 0..1000 {
        let c = draw_case(&mut r);
        let pair = ConstructedPosteriorPair::translation(c.prior(), c.g0(), &c.x).unwrap();
        lib = lib.max(gap_identity_check(&pair, 0, 0).unwrap().residual.abs());
        let q0 = mean_field(&c.mu, &c.sigma2, &c.m, &c.lambda);
        let qm = translation_mix(&c.mu, &c.sigma2, &c.m, &c.lambda, &c.x);
        let p = c.p();
        let res = (kl(&q0.mean, &q0.cov, &p.mean, &p.cov) - kl(&qm.mean, &qm.cov, &p.mean, &p.cov))
            - kl(&q0.mean, &q0.cov, &qm.mean, &qm.cov);
        oracle = oracle.max(res.abs());
        let Qmix::Gaussian(g) = &pair.qmix else { unreachable!() };
        matched = matched.max(Dense::from_core(&pair.q0).max_diff(&q0)).max(Dense::from_core(g).max_diff(&qm));
    }
    let secs = start.elapsed().as_secs_f64();
    vec![
        sub(format!("library residual {lib:.2e} ≤ 1e-9"), lib <= 1e-9),
        sub(format!("dense-oracle residual {oracle:.2e} ≤ 1e-9"), oracle <= 1e-9),
        sub(format!("posteriors match dense oracle to {matched:.2e} ≤ 1e-9"), matched <= 1e-9),
        sub(format!("runtime {secs:.2} s < 10 s"), secs < 10.0),
    ]
}

fn linear_case(c: &Case, r: &mut ChaCha8Rng) -> (TranslationLinearModel, LikelihoodParams) {
    let n = r.random_range(1..=5);
    let y: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
    let s2y = r.random_range(0.1..2.0);
    let model = TranslationLinearModel::new(c.x.clone(), y, s2y, c.mu.clone(), c.sigma2.clone()).unwrap();
    (model, LikelihoodParams::new(c.m.clone(), c.lambda.clone()).unwrap())
}

fn criterion_2() -> Vec<Sub> {
    let mut r = rng(1);
    let mut ry = rng(2);
    let (mut eq, mut vs_oracle, mut worst_z) = (0f64, 0f64, 0f64);
    for i in 0..1000 {
        let c = draw_case(&mut r);
        let (model, theta) = linear_case(&c, &mut ry);
        let a = &c.x / c.x.len() as f64;
        let e0 = elbo_terms(&model, &theta, Which::MeanField).unwrap().ell;
        let em = elbo_terms(&model, &theta, Which::InvarianceAbiding).unwrap().ell;
        eq = eq.max(rel(e0, em));
        let q0 = mean_field(&c.mu, &c.sigma2, &c.m, &c.lambda);
        let qm = translation_mix(&c.mu, &c.sigma2, &c.m, &c.lambda, &c.x);
        let o0 = regression_ell(&q0, &a, model.y(), model.sigma2_y());
        vs_oracle = vs_oracle.max(rel(e0, o0)).max(rel(em, regression_ell(&qm, &a, model.y(), model.sigma2_y())));
        if i < 10 {
            for q in [&q0, &qm] {
                let draw = q.sampler();
                let mut mc = rng(100 + i as u64);
                let n = 100_000;
                let vals: Vec<f64> = (0..n).map(|_| model.log_likelihood(&draw(&mut mc))).collect();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
                worst_z = worst_z.max((mean - o0).abs() / (sd / (n as f64).sqrt()));
            }
        }
    }
    vec![
        sub(format!("ELL(q0) = ELL(qmix) to {eq:.2e} ≤ 1e-10"), eq <= 1e-10),
        sub(format!("closed forms match dense oracle to {vs_oracle:.2e} ≤ 1e-10"), vs_oracle <= 1e-10),
        sub(format!("MC at 1e5 samples, 10 draws: max |z| {worst_z:.2} ≤ 3"), worst_z <= 3.0),
    ]
}

fn figure(k: usize) -> TranslationLinearModel {
    TranslationLinearModel::figure(k, 10, 1.0, SIGMA2_Y_FIGURE, 1.0).unwrap()
}

fn figure_oracle(k: usize) -> (DVector<f64>, DVector<f64>, DVector<f64>, Vec<f64>) {
    (
        DVector::zeros(k),
        DVector::from_element(k, k as f64),
        DVector::from_element(k, 1.0 / k as f64),
        vec![1.0; 10],
    )
}

fn criterion_3() -> Vec<Sub> {
    let (mut post, mut ev) = (0f64, 0f64);
    for k in 1..=200 {
        let model = figure(k);
        let th = theta_mix_star(&model).unwrap();
        let q = Dense::from_core(&qmix_posterior(&model, &th).unwrap());
        let (mu, s2, a, y) = figure_oracle(k);
        post = post.max(q.max_diff(&regression_posterior(&mu, &s2, &a, &y, SIGMA2_Y_FIGURE)));
        let elbo = elbo_terms(&model, &th, Which::InvarianceAbiding).unwrap().elbo;
        ev = ev.max((elbo - regression_evidence(&mu, &s2, &a, &y, SIGMA2_Y_FIGURE)).abs());
    }
    vec![
        sub(format!("qmix(θ_mix*) vs exact posterior, K = 1..200: {post:.2e} ≤ 1e-10"), post <= 1e-10),
        sub(format!("ELBO(qmix, θ_mix*) vs log evidence: {ev:.2e} ≤ 1e-9"), ev <= 1e-9),
    ]
}

fn oracle_mf_elbo(k: usize, th: &LikelihoodParams) -> f64 {
    let (mu, s2, a, y) = figure_oracle(k);
    let q = mean_field(&mu, &s2, &th.m, &th.lambda);
    regression_ell(&q, &a, &y, SIGMA2_Y_FIGURE) - kl(&q.mean, &q.cov, &mu, &DMatrix::from_diagonal(&s2))
}

fn criterion_4() -> Vec<Sub> {
    let mut out = Vec::new();
    let mut r = rng(4);
    for k in [2usize, 10, 50] {
        let model = figure(k);
        let t0 = theta_0_star(&model).unwrap();
        let tm = theta_mix_star(&model).unwrap();
        let exact = (0..k).all(|i| t0.lambda[i] == tm.lambda[i] * k as f64 && t0.lambda[i] / tm.lambda[i] == k as f64);
        let best = oracle_mf_elbo(k, &t0);
        let lib = elbo_terms(&model, &t0, Which::MeanField).unwrap().elbo;
        let mut beaten = 0;
        let mut margin = f64::INFINITY;
        for _ in 0..100 {
            let s = r.random_range(0.01..0.5);
            let m = DVector::from_fn(k, |i, _| t0.m[i] + s * r.random_range(-1.0..1.0));
            let l = DVector::from_fn(k, |i, _| t0.lambda[i] * (s * r.random_range(-1.0..1.0)).exp());
            let e = oracle_mf_elbo(k, &LikelihoodParams::new(m, l).unwrap());
            margin = margin.min(best - e);
            beaten += usize::from(e > best);
        }
        out.push(sub(format!("K={k}: λ₀*/λ_mix* = K exactly"), exact));
        out.push(sub(
            format!("K={k}: beats 100 perturbations (min margin {margin:.2e}), library ELBO off by {:.1e}", (lib - best).abs()),
            beaten == 0 && rel(lib, best) < 1e-12,
        ));
    }
    out
}

/// Gap between the two posteriors from their spectra: both share the mean,
/// and differ only in the `K − 1` directions orthogonal to `1`.
fn spectral_gap(k: usize, s2: f64, lam: f64) -> f64 {
    let v0 = s2 * lam / (s2 + lam);
    (k as f64 - 1.0) / 2.0 * (v0 / s2 - 1.0 - (v0 / s2).ln())
}

fn criterion_5() -> Vec<Sub> {
    let start = Instant::now();
    let cfg = SweepConfig::default();
    let rows = gap_sweep(&cfg).unwrap();
    let elbo = elbo_sweep(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();

    let t = 10.0 * 2.0 * PI * E;
    let slope = 0.5 * ((1.0 + t).ln() + 1.0 / (1.0 + t) - 1.0);
    let unit: Vec<f64> = rows.iter().take_while(|r| r.k <= 100).map(|r| r.gap_at_theta_mix_star).collect();
    let second = unit.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).abs()).fold(0.0, f64::max);
    let line = rows
        .iter()
        .map(|r| rel(r.gap_at_theta_mix_star, slope * (r.k as f64 - 1.0)))
        .fold(0.0, f64::max);
    let mut spectral = 0f64;
    for r in &rows {
        let model = figure(r.k);
        let s2 = r.k as f64;
        spectral = spectral
            .max(rel(r.gap_at_theta_mix_star, spectral_gap(r.k, s2, theta_mix_star(&model).unwrap().lambda[0])))
            .max(rel(r.gap_at_theta_0_star, spectral_gap(r.k, s2, theta_0_star(&model).unwrap().lambda[0])));
    }
    let mut dense = 0f64;
    for k in [1usize, 2, 7, 30] {
        let model = figure(k);
        let (mu, s2, _, _) = figure_oracle(k);
        let x = DVector::from_element(k, 1.0);
        let row = rows.iter().find(|r| r.k == k).unwrap();
        for (th, lib) in [
            (theta_mix_star(&model).unwrap(), row.gap_at_theta_mix_star),
            (theta_0_star(&model).unwrap(), row.gap_at_theta_0_star),
        ] {
            let q0 = mean_field(&mu, &s2, &th.m, &th.lambda);
            let qm = translation_mix(&mu, &s2, &th.m, &th.lambda, &x);
            dense = dense.max(rel(lib, kl(&q0.mean, &q0.cov, &qm.mean, &qm.cov)));
        }
    }
    let at_1e4 = rows.iter().find(|r| r.k == 10_000).unwrap().gap_at_theta_0_star;
    let bound = rows[0].data_related_bound;
    let constant = rows.iter().all(|r| r.data_related_bound == bound);
    let kl_max = elbo.iter().map(|e| e.q0_theta_0_star.kl).fold(0.0, f64::max);
    let crossing = t * t / 4.0;
    vec![
        sub(format!("slope {slope:.6} vs reported 2.076"), (slope - 2.076).abs() < 5e-4),
        sub(format!("second differences {second:.2e} < 1e-9; whole grid on the line to {line:.2e}"), second < 1e-9 && line < 1e-9),
        sub(format!("sweep matches spectral oracle to {spectral:.2e} and dense oracle to {dense:.2e}"), spectral < 1e-9 && dense < 1e-9),
        known(
            format!(
                "gap at θ₀*, K=1e4: {at_1e4:.4} < 0.05 [≈ (N/σ²_y)²/(4K) ≈ {:.0}/K here, below 0.05 only for K ≳ 1.5e5]",
                crossing
            ),
            at_1e4 < 0.05,
        ),
        sub(format!("bound constant at {bound:.4} ≈ 170.79"), constant && (bound - 170.79).abs() < 5e-3),
        sub(format!("max KL(q0(θ₀*)‖p) {kl_max:.3} ≤ bound"), kl_max <= bound),
        sub(format!("runtime {secs:.2} s < 60 s"), secs < 60.0),
    ]
}

fn criterion_6() -> Vec<Sub> {
    let cfg = SweepConfig::default();
    let rows = elbo_sweep(&cfg).unwrap();
    let model = figure(10_000);
    let (q0, _) = q0_posterior(&model, &theta_0_star(&model).unwrap()).unwrap();
    let ratio = q0.cov().diagonal().iter().zip(model.prior_var().iter()).map(|(a, b)| a / b).fold(f64::INFINITY, f64::min);
    let r = 10.0 / SIGMA2_Y_FIGURE / 10_000.0;
    let pv = rows.iter().find(|r| r.k == 10_000).unwrap().q0_theta_0_star.predictive_variance;
    let prior_pv = 1.0 + SIGMA2_Y_FIGURE;
    let want = SIGMA2_Y_FIGURE + 1.0 / (10.0 / SIGMA2_Y_FIGURE + 1.0);
    let qmix_dev = rows.iter().map(|r| (r.qmix_theta_mix_star.predictive_variance - want).abs()).fold(0.0, f64::max);
    vec![
        known(
            format!("K=1e4 q0(θ₀*) variance ratio {ratio:.4} > 0.99 [= 1/(1 + N/(Kσ²_y)) = {:.4}]", 1.0 / (1.0 + r)),
            ratio > 0.99,
        ),
        known(
            format!("K=1e4 predictive variance {pv:.4} within 1% of {prior_pv:.4} (off by {:.2}%)", 100.0 * rel(pv, prior_pv)),
            rel(pv, prior_pv) <= 0.01,
        ),
        sub(format!("qmix(θ_mix*) predictive variance = {want:.6} on every K to {qmix_dev:.2e} ≤ 1e-9"), qmix_dev <= 1e-9),
    ]
}

fn all_perms(n: usize) -> Vec<Vec<usize>> {
    use itertools::Itertools;
    (0..n).permutations(n).collect()
}

fn criterion_7() -> Vec<Sub> {
    let mut r = rng(7);
    let c = loop {
        let c = draw_case(&mut r);
        if c.x.len() >= 3 {
            break c;
        }
    };
    let t = TranslationTransform::new(&c.x, &c.sigma2, &c.lambda).unwrap();
    let tr = verify_condition_1(&c.prior(), &c.g0(), &t, 10_000, 7, 1e-8).unwrap();
    let iso = MomentGaussian::diagonal(DVector::zeros(3), DVector::from_element(3, 1.5)).unwrap();
    let g0 = MomentGaussian::diagonal(DVector::from_row_slice(&[1.0, -0.5, 2.0]), DVector::from_row_slice(&[0.3, 1.2, 0.7])).unwrap();
    let pt = PermutationTransform::new(all_perms(3)).unwrap();
    let pe = verify_condition_1(&iso, &g0, &pt, 10_000, 7, 1e-8).unwrap();
    let aniso = MomentGaussian::diagonal(DVector::zeros(2), DVector::from_row_slice(&[1.0, 2.0])).unwrap();
    let g2 = MomentGaussian::diagonal(DVector::from_row_slice(&[1.0, -1.0]), DVector::from_element(2, 0.5)).unwrap();
    let neg = verify_condition_1(&aniso, &g2, &PermutationTransform::new(all_perms(2)).unwrap(), 10_000, 7, 1e-8).unwrap();
    let c2t = verify_condition_2(&t, 200, 7, 1e-6);
    let c2p = verify_condition_2(&pt, 200, 7, 1e-6);
    let g = |x: Option<f64>| x.unwrap_or(f64::NAN);
    vec![
        sub(format!("translation, diagonal prior (K={}): gap {:.2e} < 1e-8", c.x.len(), g(tr.condition1)), tr.pass),
        sub(format!("permutation, isotropic prior: gap {:.2e} < 1e-8", g(pe.condition1)), pe.pass),
        sub(format!("permutation, prior Diag(1, 2): gap {:.2e} fails as it must", g(neg.condition1)), !neg.pass),
        sub(
            format!("volume preservation: |ln det| {:.1e}, {:.1e}", g(c2t.condition2), g(c2p.condition2)),
            c2t.pass && c2p.pass,
        ),
    ]
}

/// `KL(q0 ‖ qmix)` by Monte Carlo with dense components.
fn oracle_perm_gap(prior: &Case, maps: &[Vec<usize>], n: usize, seed: u64) -> (f64, f64) {
    let q0 = mean_field(&prior.mu, &prior.sigma2, &prior.m, &prior.lambda);
    let mut comps = Vec::new();
    let mut log_w = Vec::new();
    for map in maps {
        let mut inv = vec![0; map.len()];
        for (a, &b) in map.iter().enumerate() {
            inv[b] = a;
        }
        let m = DVector::from_fn(map.len(), |b, _| prior.m[inv[b]]);
        let l = DVector::from_fn(map.len(), |b, _| prior.lambda[inv[b]]);
        let lz: f64 = (0..map.len())
            .map(|i| -0.5 * (LN_2PI + (prior.sigma2[i] + l[i]).ln()) - (m[i] - prior.mu[i]).powi(2) / (2.0 * (prior.sigma2[i] + l[i])))
            .sum();
        comps.push(mean_field(&prior.mu, &prior.sigma2, &m, &l));
        log_w.push(lz);
    }
    let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm = top + log_w.iter().map(|w| (w - top).exp()).sum::<f64>().ln();
    let draw = q0.sampler();
    let mut r = rng(seed);
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let w = draw(&mut r);
            let terms: Vec<f64> = comps.iter().zip(&log_w).map(|(c, lw)| lw - norm + log_pdf(&w, &c.mean, &c.cov)).collect();
            let t = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            log_pdf(&w, &q0.mean, &q0.cov) - (t + terms.iter().map(|v| (v - t).exp()).sum::<f64>().ln())
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    (mean, sd / (n as f64).sqrt())
}

fn criterion_8() -> Vec<Sub> {
    let spec = MlpSpec::with_hidden(vec![1, 2, 1], Activation::Tanh).unwrap();
    let perms: Vec<StackedPermutation> = enumerate_permutations(&spec, DEFAULT_ENUMERATION_CAP).unwrap().collect();
    let maps: Vec<Vec<usize>> = perms.iter().map(|p| p.index_map(&spec)).collect();
    let n = spec.num_weights();
    let transform = PermutationTransform::new(maps.clone()).unwrap();
    // 10+ prior standard deviations between the modes
    let far = Case {
        mu: DVector::zeros(n),
        sigma2: DVector::from_element(n, 1.0),
        m: DVector::from_row_slice(&[8.0, -8.0, 3.0, -5.0]),
        lambda: DVector::from_element(n, 0.05),
        x: DVector::zeros(0),
    };
    let at_prior = Case {
        m: DVector::zeros(n),
        lambda: DVector::from_element(n, 1.0),
        ..far.clone_parts()
    };
    let mut out = vec![sub(format!("|P| = {}", perms.len()), perms.len() == 2 && permutation_count(&spec) == 2)];
    for (label, c, target) in [("separated modes", &far, LN_2), ("g0 = prior", &at_prior, 0.0)] {
        let pair = ConstructedPosteriorPair::permutation(c.prior(), c.g0(), &transform).unwrap();
        let lib = invariance_gap(&pair, GapMethod::MonteCarlo, 100_000, 8, DEFAULT_COMPONENT_CAP).unwrap();
        let (o, ose) = oracle_perm_gap(c, &maps, 100_000, 9);
        // a floor of 1e-10 absorbs rounding when every draw gives nearly the same value
        let ok = |v: f64, se: f64| (v - target).abs() <= 3.0 * se + 1e-10;
        out.push(sub(
            format!("{label}: library {:.6} ± {:.1e} (off {:.1e}), oracle {o:.6} ± {ose:.1e} (off {:.1e}), target {target:.6}", lib.gap, lib.stderr, lib.gap - target, o - target),
            ok(lib.gap, lib.stderr) && ok(o, ose),
        ));
    }
    out
}

impl Case {
    fn clone_parts(&self) -> Case {
        Case {
            mu: self.mu.clone(),
            sigma2: self.sigma2.clone(),
            m: self.m.clone(),
            lambda: self.lambda.clone(),
            x: self.x.clone(),
        }
    }
}

fn criterion_9() -> Vec<Sub> {
    let widths = [1usize, 2, 2, 1];
    let spec = MlpSpec::with_hidden(widths.to_vec(), Activation::Tanh).unwrap();
    let nodes = spec.nodes();
    let mut r = rng(9);
    let normal = |r: &mut ChaCha8Rng, n: usize| DVector::from_fn(n, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal));
    let mut trans = 0f64;
    let mut ortho = 0f64;
    for _ in 0..100 {
        let w = normal(&mut r, spec.num_weights());
        let (l, j) = nodes[r.random_range(0..nodes.len())];
        let dseed: u64 = r.random();
        for _ in 0..50 {
            let x = normal(&mut r, 1);
            // activation entering layer l, from the oracle network
            let mats = layer_mats(&widths, w.as_slice());
            let mut z = x.clone();
            for m in &mats[..l] {
                z = (m * z).map(f64::tanh);
            }
            let bz = build_bz(&z).unwrap();
            ortho = ortho.max((z.transpose() * &bz.basis).amax());
            let delta = normal(&mut rng(dseed), bz.basis.ncols());
            let mut wv = WeightVector::new(&spec, w.clone()).unwrap();
            let node = translate_node(&wv.node(&spec, l, j), &bz, &delta).unwrap();
            wv.set_node(&spec, l, j, &node).unwrap();
            trans = trans.max((tanh_net(&widths, wv.as_vector().as_slice(), &x) - tanh_net(&widths, w.as_slice(), &x)).abs());
        }
    }
    let perms: Vec<StackedPermutation> = enumerate_permutations(&spec, DEFAULT_ENUMERATION_CAP).unwrap().collect();
    let w = WeightVector::new(&spec, normal(&mut r, spec.num_weights())).unwrap();
    let inputs: Vec<DVector<f64>> = (0..50).map(|_| normal(&mut r, 1)).collect();
    let mut perm = 0f64;
    let mut paths_equal = true;
    let mut matches_oracle = true;
    for p in &perms {
        let a = apply_permutation(p, &spec, &w).unwrap();
        let b = apply_permutation_flat(p, &spec, &w).unwrap();
        paths_equal &= a.as_vector() == b.as_vector();
        // W'_l = P_l W_l P_{l−1}ᵀ with identity at input and output
        let mut pis = vec![vec![0usize]];
        pis.extend(p.layers.iter().cloned());
        pis.push(vec![0]);
        let mats = layer_mats(&widths, w.as_vector().as_slice());
        let flat: Vec<f64> = mats
            .iter()
            .enumerate()
            .flat_map(|(l, m)| {
                let moved = layer_matrix(&pis[l + 1]) * m * layer_matrix(&pis[l]).transpose();
                moved.transpose().iter().copied().collect::<Vec<_>>()
            })
            .collect();
        matches_oracle &= a.as_vector().as_slice() == flat.as_slice();
        for x in &inputs {
            perm = perm.max((tanh_net(&widths, a.as_vector().as_slice(), x) - tanh_net(&widths, w.as_vector().as_slice(), x)).abs());
        }
    }
    vec![
        sub(format!("100 node translations × 50 inputs: |Δf| {trans:.2e} < 1e-9 (zᵀB_z {ortho:.1e})"), trans < 1e-9 && ortho < 1e-12),
        sub(format!("all {} stacked permutations: |Δf| {perm:.2e} < 1e-9", perms.len()), perms.len() == 4 && perm < 1e-9),
        sub("Kronecker path equals layer-matrix path exactly", paths_equal),
        sub("layer path equals dense oracle exactly", matches_oracle),
    ]
}

fn criterion_10() -> Vec<Sub> {
    let k = 10;
    let spec = MlpSpec::new(vec![k, 1], vec![Activation::Identity]).unwrap();
    let data = Dataset::averaging(k, 10, 1.0);
    let prior = MomentGaussian::diagonal(DVector::zeros(k), DVector::from_element(k, k as f64)).unwrap();
    let fit = layerwise_fit(&spec, &prior, &data, SIGMA2_Y_FIGURE, &FitConfig::default()).unwrap();
    let (mu, s2, a, y) = figure_oracle(k);
    let truth = regression_posterior(&mu, &s2, &a, &y, SIGMA2_Y_FIGURE);
    let got = Dense::from_core(&fit.qmix()[0].components()[0]);
    let mean_err = (0..k).map(|i| ((got.mean[i] - truth.mean[i]) / truth.mean[i]).abs()).fold(0.0, f64::max);
    let pv = |q: &Dense| a.dot(&(&q.cov * &a)) + SIGMA2_Y_FIGURE;
    let pv_err = rel(pv(&got), pv(&truth));
    vec![
        sub(format!("mean within {:.3}% ≤ 2%", 100.0 * mean_err), mean_err <= 0.02),
        sub(format!("predictive variance within {:.3}% ≤ 5%", 100.0 * pv_err), pv_err <= 0.05),
        sub(format!("converged after {} sweeps", fit.sweeps), fit.converged),
    ]
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Vec<Sub>); 10] = [
        ("gap identity", criterion_1),
        ("predictive equivalence", criterion_2),
        ("true-posterior recovery", criterion_3),
        ("mean-field optimum", criterion_4),
        ("gap asymptotics", criterion_5),
        ("posterior collapse", criterion_6),
        ("invariance conditions", criterion_7),
        ("permutation gap range", criterion_8),
        ("network invariances", criterion_9),
        ("layer-wise fit oracle", criterion_10),
    ];
    let mut unexpected = 0;
    let mut passed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let subs = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| vec![sub("panicked", false)]);
        let pass = subs.iter().all(|s| s.pass);
        passed += usize::from(pass);
        let note = if !pass && subs.iter().filter(|s| !s.pass).all(|s| s.known) { " (known, see notes)" } else { "" };
        println!(
            "criterion {:>2} {} {name}{note} [{:.2} s]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        for s in &subs {
            let mark = match (s.pass, s.known) {
                (true, false) => "ok",
                (false, true) => "unattainable",
                (true, true) => "unexpectedly met",
                (false, false) => "NOT MET",
            };
            println!("    [{mark}] {}", s.what);
            unexpected += usize::from(s.pass == s.known);
        }
    }
    println!("acceptance: {passed}/10 criteria pass; {unexpected} unexpected outcome(s)");
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
