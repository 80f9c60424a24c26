//! Layer-by-layer construction and fitting of the invariance-abiding
//! posterior of a small network.
//!
//! For node `(l, j)` the translation invariance holds at each activation
//! vector `z` entering layer `l`, so its `qmix` is a mixture with one
//! translation-qmix component per distinct activation sample.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{forward_from, Activation, Dataset, MlpSpec};
use crate::error::{check_dim, invalid, Error, Result};
use crate::gaussian::{kl_divergence, standard_normal, GaussianMixture, MomentGaussian, SymMatrix, LN_2PI};
use crate::invariance::{mean_field_product, translation_qmix};
use crate::mc::{chunk_rng, McRng};

fn key(z: &DVector<f64>) -> Vec<u64> {
    z.iter().map(|v| v.to_bits()).collect()
}

/// Distinct vectors with their multiplicities, in first-seen order.
fn dedupe<'a>(zs: impl IntoIterator<Item = &'a DVector<f64>>) -> Vec<(DVector<f64>, usize)> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut out: Vec<(DVector<f64>, usize)> = Vec::new();
    for z in zs {
        match index.entry(key(z)) {
            std::collections::hash_map::Entry::Occupied(e) => out[*e.get()].1 += 1,
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(out.len());
                out.push((z.clone(), 1));
            }
        }
    }
    out
}

fn mixture_from(prior: &MomentGaussian, lik: &MomentGaussian, unique: &[(DVector<f64>, usize)]) -> Result<GaussianMixture> {
    if unique.is_empty() {
        return GaussianMixture::uniform(vec![mean_field_product(prior, lik)?.0]);
    }
    let mut comps = Vec::with_capacity(unique.len());
    let mut log_w = Vec::with_capacity(unique.len());
    for (z, count) in unique {
        // z = 0 constrains nothing: the averaged likelihood is flat
        let c = if z.iter().all(|&v| v == 0.0) {
            prior.clone()
        } else {
            translation_qmix(prior, lik, z)?
        };
        comps.push(c);
        log_w.push((*count as f64).ln());
    }
    GaussianMixture::new(log_w, comps)
}

/// Equally weighted mixture over activation samples of the node posterior
/// `p · g_mix(·; z)`; repeated samples share one component.
pub fn layerwise_qmix(prior: &MomentGaussian, lik: &MomentGaussian, z_samples: &[DVector<f64>]) -> Result<GaussianMixture> {
    check_dim(prior.dim(), lik.dim(), "node likelihood")?;
    if z_samples.is_empty() {
        return Err(invalid("z_samples", "need at least one activation sample"));
    }
    for z in z_samples {
        check_dim(prior.dim(), z.len(), "activation sample")?;
        if z.iter().all(|&v| v == 0.0) {
            return Err(invalid("z_samples", "activation sample has zero norm"));
        }
    }
    mixture_from(prior, lik, &dedupe(z_samples))
}

/// Ancestral samples of a node value: draw `z` from `incoming`, a component
/// and then `w` from `qmix`, and emit `h(wᵀz)`.
pub fn latent_activation_sampler(
    qmix: &GaussianMixture,
    incoming: &[DVector<f64>],
    activation: Activation,
    seed: u64,
    count: usize,
) -> Result<Vec<f64>> {
    if incoming.is_empty() {
        return Err(invalid("incoming", "need at least one activation sample"));
    }
    for z in incoming {
        check_dim(qmix.dim(), z.len(), "activation sample")?;
    }
    let sampler = qmix.sampler()?;
    let mut rng = chunk_rng(seed, 0);
    Ok((0..count)
        .map(|_| {
            let z = &incoming[rng.random_range(0..incoming.len())];
            activation.apply(sampler.sample(&mut rng).dot(z))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Activation samples kept per layer.
    pub samples_per_layer: usize,
    /// Largest relative parameter change that counts as converged.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Weight draws per node objective, shared across its components.
    pub draws: usize,
    /// Golden-section iterations per coordinate.
    pub line_search_iters: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            samples_per_layer: 64,
            tol: 1e-3,
            max_sweeps: 50,
            draws: 32,
            line_search_iters: 40,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeFit {
    pub layer: usize,
    pub node: usize,
    pub m: Vec<f64>,
    pub lambda: Vec<f64>,
    pub qmix_mean: Vec<f64>,
    pub components: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub sweep: usize,
    /// Mean node expected log-likelihood minus the summed node KL terms.
    pub surrogate: f64,
    pub stderr: f64,
    pub max_change: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub nodes: Vec<NodeFit>,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
    pub sweeps: usize,
    #[serde(skip)]
    qmix: Vec<GaussianMixture>,
}

impl FitResult {
    /// Node posteriors in the order of [`MlpSpec::nodes`].
    pub fn qmix(&self) -> &[GaussianMixture] {
        &self.qmix
    }

    /// Concatenated node `qmix` means, laid out like a weight vector.
    pub fn mean_weights(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.nodes.iter().map(|n| n.qmix_mean.len()).sum(),
            self.nodes.iter().flat_map(|n| n.qmix_mean.iter().copied()),
        )
    }
}

/// Activation vectors entering one layer, each tagged with its data point.
#[derive(Clone, Debug, Default)]
struct LayerSamples {
    data_index: Vec<usize>,
    z: Vec<DVector<f64>>,
}

struct NodeEval {
    surrogate: f64,
    ell: f64,
    kl: f64,
    ell_var: f64,
    qmix: GaussianMixture,
}

struct NodeProblem<'a> {
    spec: &'a MlpSpec,
    layer: usize,
    node: usize,
    prior: MomentGaussian,
    means: &'a [f64],
    samples: &'a LayerSamples,
    /// Layer outputs per sample with every node at its current mean.
    layer_out: Vec<Vec<f64>>,
    sample_weight: Vec<f64>,
    targets: &'a [f64],
    sigma2_y: f64,
    unique: Vec<(DVector<f64>, usize)>,
    /// Base standard-normal draws per component.
    base: Vec<Vec<DVector<f64>>>,
}

/// `n` draws of dimension `dim`, centred and whitened to unit sample
/// covariance when `n > dim`, so quadratic integrands are exact.
fn whitened_draws(rng: &mut McRng, n: usize, dim: usize) -> Vec<DVector<f64>> {
    let raw: Vec<DVector<f64>> = (0..n).map(|_| standard_normal(rng, dim)).collect();
    if n <= dim {
        return raw;
    }
    let mean = raw.iter().fold(DVector::zeros(dim), |a, x| a + x) / n as f64;
    let centred: Vec<DVector<f64>> = raw.iter().map(|x| x - &mean).collect();
    let mut cov = DMatrix::zeros(dim, dim);
    for x in &centred {
        cov += x * x.transpose();
    }
    cov /= n as f64;
    match cov.cholesky() {
        Some(ch) => {
            let l = ch.unpack();
            centred
                .iter()
                .map(|x| l.solve_lower_triangular(x).expect("cholesky factor is invertible"))
                .collect()
        }
        None => raw,
    }
}

impl<'a> NodeProblem<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        spec: &'a MlpSpec,
        layer: usize,
        node: usize,
        prior: MomentGaussian,
        means: &'a [f64],
        samples: &'a LayerSamples,
        targets: &'a [f64],
        sigma2_y: f64,
        draws: usize,
        rng: &mut McRng,
    ) -> Self {
        let fan_in = spec.layer_widths()[layer];
        let width = spec.layer_widths()[layer + 1];
        let off = spec.layer_offset(layer);
        let h = spec.activations()[layer];
        let layer_out = samples
            .z
            .iter()
            .map(|z| {
                (0..width)
                    .map(|i| {
                        let row = &means[off + i * fan_in..off + (i + 1) * fan_in];
                        h.apply(row.iter().zip(z.iter()).map(|(a, b)| a * b).sum())
                    })
                    .collect()
            })
            .collect();
        let mut per_data = vec![0usize; targets.len()];
        for &n in &samples.data_index {
            per_data[n] += 1;
        }
        let sample_weight = samples.data_index.iter().map(|&n| 1.0 / per_data[n] as f64).collect();
        let unique = dedupe(&samples.z);
        let comps = unique.len().max(1);
        let per_comp = if comps == 1 {
            draws.max(fan_in + 2)
        } else {
            (draws / comps).max(1)
        };
        let base = (0..comps).map(|_| whitened_draws(rng, per_comp, fan_in)).collect();
        Self {
            spec,
            layer,
            node,
            prior,
            means,
            samples,
            layer_out,
            sample_weight,
            targets,
            sigma2_y,
            unique,
            base,
        }
    }

    fn ell_at(&self, w: &DVector<f64>, scratch: &mut Vec<f64>, out: &mut Vec<f64>) -> f64 {
        let h = self.spec.activations()[self.layer];
        let norm = -0.5 * (LN_2PI + self.sigma2_y.ln());
        let mut acc = 0.0;
        for (s, z) in self.samples.z.iter().enumerate() {
            out.clear();
            out.extend_from_slice(&self.layer_out[s]);
            out[self.node] = h.apply(w.dot(z));
            let f = if self.layer + 1 == self.spec.depth() {
                out[0]
            } else {
                forward_from(self.spec, self.means, self.layer + 1, out, scratch)
            };
            let y = self.targets[self.samples.data_index[s]];
            acc += self.sample_weight[s] * (norm - 0.5 * (y - f).powi(2) / self.sigma2_y);
        }
        acc
    }

    fn evaluate(&self, m: &DVector<f64>, lambda: &DVector<f64>) -> Result<NodeEval> {
        let lik = MomentGaussian::diagonal(m.clone(), lambda.clone())?;
        let qmix = mixture_from(&self.prior, &lik, &self.unique)?;
        let mut ell = 0.0;
        let mut kl = 0.0;
        let mut ell_var = 0.0;
        let mut scratch = Vec::new();
        let mut out = Vec::new();
        for ((lw, comp), base) in qmix.log_weights().iter().zip(qmix.components()).zip(&self.base) {
            let pi = lw.exp();
            kl += pi * kl_divergence(comp, &self.prior)?;
            if self.samples.z.is_empty() {
                continue;
            }
            let sampler = comp.sampler()?;
            let vals: Vec<f64> = base
                .iter()
                .map(|e| self.ell_at(&sampler.transform(e), &mut scratch, &mut out))
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            ell += pi * mean;
            ell_var += pi * pi * var / n;
        }
        Ok(NodeEval {
            surrogate: ell - kl,
            ell,
            kl,
            ell_var,
            qmix,
        })
    }
}

/// Maximises `g` along one coordinate: bracket around `x0` by doubling
/// steps, then golden-section search. Returns the best point seen.
fn line_search<G: FnMut(f64) -> f64>(mut g: G, x0: f64, g0: f64, step: f64, lo: f64, hi: f64, iters: usize) -> (f64, f64) {
    let clamp = |x: f64| x.clamp(lo, hi);
    let mut best = (x0, g0);
    let mut eval = |x: f64, best: &mut (f64, f64)| {
        let v = g(x);
        let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
        if v > best.1 {
            *best = (x, v);
        }
        v
    };
    let (a0, b0) = (clamp(x0 - step), clamp(x0 + step));
    let ga = eval(a0, &mut best);
    let gb = eval(b0, &mut best);
    let (mut a, mut b) = (a0, b0);
    if ga > g0 || gb > g0 {
        let dir = if gb >= ga { 1.0 } else { -1.0 };
        let mut prev = x0;
        let mut cur = if dir > 0.0 { b0 } else { a0 };
        let mut gcur = ga.max(gb);
        let mut h = step;
        for _ in 0..60 {
            h *= 2.0;
            let next = clamp(cur + dir * h);
            if next == cur {
                break;
            }
            let gn = eval(next, &mut best);
            if gn < gcur {
                (a, b) = if dir > 0.0 { (prev, next) } else { (next, prev) };
                break;
            }
            prev = cur;
            cur = next;
            gcur = gn;
            (a, b) = if dir > 0.0 { (prev, cur) } else { (cur, prev) };
        }
    }
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut gc = eval(c, &mut best);
    let mut gd = eval(d, &mut best);
    for _ in 0..iters {
        if gc >= gd {
            b = d;
            d = c;
            gd = gc;
            c = b - phi * (b - a);
            gc = eval(c, &mut best);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + phi * (b - a);
            gd = eval(d, &mut best);
        }
    }
    best
}

const LOG_LAMBDA_MIN: f64 = -18.420_680_743_952_367; // ln 1e-8
const LOG_LAMBDA_MAX: f64 = 27.631_021_115_928_547; // ln 1e12

/// Iterative layer-by-layer fit of the node likelihood parameters.
///
/// Each node maximises the mixture-averaged ELBO of its `qmix`: expected
/// log-likelihood with the rest of the network at its current `qmix` means
/// and upstream activations sampled ancestrally, minus the weighted KL of
/// each component to the node prior. Coordinates are updated only when
/// they improve the objective.
pub fn layerwise_fit(
    spec: &MlpSpec,
    prior: &MomentGaussian,
    data: &Dataset,
    sigma2_y: f64,
    config: &FitConfig,
) -> Result<FitResult> {
    spec.check_toy_size()?;
    data.check(spec)?;
    check_dim(spec.num_weights(), prior.dim(), "prior")?;
    if !(sigma2_y > 0.0) {
        return Err(invalid("sigma2_y", "noise variance must be positive"));
    }
    let prior_var = match prior.cov() {
        SymMatrix::Diagonal(d) => d.clone(),
        _ => return Err(Error::Unsupported("a diagonal prior")),
    };
    let nodes = spec.nodes();
    let mut m: DVector<f64> = prior.mean().clone();
    let mut log_lam: DVector<f64> = prior_var.map(f64::ln);
    let mut means: Vec<f64> = prior.mean().iter().copied().collect();
    let mut qmix: Vec<Option<GaussianMixture>> = vec![None; nodes.len()];
    let mut trace = Vec::new();
    let mut converged = false;
    let spd = if data.is_empty() {
        0
    } else {
        config.samples_per_layer.div_ceil(data.len()).max(1)
    };
    let input_samples = LayerSamples {
        data_index: (0..data.len()).collect(),
        z: (0..data.len()).map(|n| data.input(n)).collect(),
    };

    let mut sweeps = 0;
    for sweep in 0..config.max_sweeps {
        sweeps = sweep + 1;
        let old_m = m.clone();
        let old_l = log_lam.clone();
        let mut samples = input_samples.clone();
        let mut ells = Vec::with_capacity(nodes.len());
        let mut kl_total = 0.0;
        let mut var_max: f64 = 0.0;
        for layer in 0..spec.depth() {
            let width = spec.layer_widths()[layer + 1];
            for j in 0..width {
                let idx = nodes.iter().position(|&n| n == (layer, j)).expect("node exists");
                let r = spec.node_range(layer, j);
                let node_prior = MomentGaussian::diagonal(
                    prior.mean().rows(r.start, r.len()).into_owned(),
                    prior_var.rows(r.start, r.len()).into_owned(),
                )?;
                let mut rng = chunk_rng(config.seed, 1_000 + idx as u64);
                let snapshot = means.clone();
                let prob = NodeProblem::new(
                    spec, layer, j, node_prior, &snapshot, &samples, &data.targets, sigma2_y, config.draws, &mut rng,
                );
                let mut nm = m.rows(r.start, r.len()).into_owned();
                let mut nl = log_lam.rows(r.start, r.len()).into_owned();
                let score = |nm: &DVector<f64>, nl: &DVector<f64>| -> f64 {
                    prob.evaluate(nm, &nl.map(f64::exp)).map(|e| e.surrogate).unwrap_or(f64::NEG_INFINITY)
                };
                let mut current = score(&nm, &nl);
                for i in 0..r.len() {
                    let sd = prior_var[r.start + i].sqrt();
                    let step = (0.5 * nm[i].abs()).max(0.5 * sd);
                    let (x, v) = line_search(
                        |x| {
                            let mut t = nm.clone();
                            t[i] = x;
                            score(&t, &nl)
                        },
                        nm[i],
                        current,
                        step,
                        f64::MIN,
                        f64::MAX,
                        config.line_search_iters,
                    );
                    if v > current {
                        nm[i] = x;
                        current = v;
                    }
                    let (x, v) = line_search(
                        |x| {
                            let mut t = nl.clone();
                            t[i] = x;
                            score(&nm, &t)
                        },
                        nl[i],
                        current,
                        1.0,
                        LOG_LAMBDA_MIN,
                        LOG_LAMBDA_MAX,
                        config.line_search_iters,
                    );
                    if v > current {
                        nl[i] = x;
                        current = v;
                    }
                }
                let fin = prob.evaluate(&nm, &nl.map(f64::exp))?;
                ells.push(fin.ell);
                kl_total += fin.kl;
                var_max = var_max.max(fin.ell_var);
                m.rows_mut(r.start, r.len()).copy_from(&nm);
                log_lam.rows_mut(r.start, r.len()).copy_from(&nl);
                let mean = fin.qmix.mean();
                means[r.clone()].copy_from_slice(mean.as_slice());
                qmix[idx] = Some(fin.qmix);
            }
            if layer + 1 < spec.depth() && !samples.z.is_empty() {
                samples = next_layer_samples(spec, layer, &samples, &qmix, &nodes, spd, config.seed)?;
            }
        }
        let mut max_change: f64 = 0.0;
        for i in 0..m.len() {
            let scale = old_m[i].abs().max(prior_var[i].sqrt());
            max_change = max_change
                .max((m[i] - old_m[i]).abs() / scale)
                .max((log_lam[i] - old_l[i]).abs());
        }
        let ell_mean = if ells.is_empty() { 0.0 } else { ells.iter().sum::<f64>() / ells.len() as f64 };
        trace.push(TraceEntry {
            sweep,
            surrogate: ell_mean - kl_total,
            stderr: var_max.sqrt(),
            max_change,
        });
        if max_change < config.tol {
            converged = true;
            break;
        }
    }

    let qmix: Vec<GaussianMixture> = qmix.into_iter().map(|q| q.expect("every node fitted")).collect();
    let node_fits = nodes
        .iter()
        .zip(&qmix)
        .map(|(&(layer, node), q)| {
            let r = spec.node_range(layer, node);
            NodeFit {
                layer,
                node,
                m: m.as_slice()[r.clone()].to_vec(),
                lambda: log_lam.as_slice()[r].iter().map(|v| v.exp()).collect(),
                qmix_mean: q.mean().iter().copied().collect(),
                components: q.len(),
            }
        })
        .collect();
    Ok(FitResult {
        nodes: node_fits,
        trace,
        converged,
        sweeps,
        qmix,
    })
}

/// `spd` samples per data point of the activations leaving `layer`.
fn next_layer_samples(
    spec: &MlpSpec,
    layer: usize,
    incoming: &LayerSamples,
    qmix: &[Option<GaussianMixture>],
    nodes: &[(usize, usize)],
    spd: usize,
    seed: u64,
) -> Result<LayerSamples> {
    let width = spec.layer_widths()[layer + 1];
    let h = spec.activations()[layer];
    let samplers = (0..width)
        .map(|j| {
            let idx = nodes.iter().position(|&n| n == (layer, j)).expect("node exists");
            qmix[idx].as_ref().expect("layer fitted").sampler()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = chunk_rng(seed, layer as u64);
    let n_data = incoming.data_index.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_data: Vec<Vec<usize>> = vec![Vec::new(); n_data];
    for (s, &n) in incoming.data_index.iter().enumerate() {
        by_data[n].push(s);
    }
    let mut out = LayerSamples::default();
    for (n, idxs) in by_data.iter().enumerate() {
        if idxs.is_empty() {
            continue;
        }
        for _ in 0..spd {
            let z = &incoming.z[idxs[rng.random_range(0..idxs.len())]];
            let next = DVector::from_fn(width, |j, _| h.apply(samplers[j].sample(&mut rng).dot(z)));
            out.data_index.push(n);
            out.z.push(next);
        }
    }
    Ok(out)
}
