//! Seeded Monte-Carlo estimation.
//!
//! Draws come from `ChaCha8Rng`. Work is split into chunks of
//! [`CHUNK_SIZE`] draws; chunk `c` uses the generator seeded with
//! `seed_from_u64(seed)` on stream `c`. Per-chunk running moments are merged
//! in chunk order, so results do not depend on the number of threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type McRng = ChaCha8Rng;

pub const CHUNK_SIZE: usize = 1024;

/// Default sample count for identity checks.
pub const DEFAULT_IDENTITY_SAMPLES: usize = 100_000;
/// Default sample count for moment checks.
pub const DEFAULT_MOMENT_SAMPLES: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed: u64,
}

impl McEstimate {
    /// `|value - target| / stderr`; zero when both agree exactly.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = self.value - target;
        if d == 0.0 {
            0.0
        } else {
            d.abs() / self.stderr
        }
    }

    pub fn within(&self, target: f64, sigmas: f64) -> bool {
        (self.value - target).abs() <= sigmas * self.stderr
    }
}

/// Generator for chunk `chunk` of a run seeded with `seed`.
pub fn chunk_rng(seed: u64, chunk: u64) -> McRng {
    let mut rng = McRng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if o.n == 0.0 {
            return self;
        }
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * o.n / n,
            m2: self.m2 + o.m2 + d * d * self.n * o.n / n,
        }
    }
}

fn chunk_ranges(n: usize) -> Vec<(u64, usize)> {
    (0..n.div_ceil(CHUNK_SIZE))
        .map(|c| (c as u64, CHUNK_SIZE.min(n - c * CHUNK_SIZE)))
        .collect()
}

/// Evaluates `f` on `n` seeded draws, in draw order.
pub fn mc_collect<T, S, F>(sampler: S, f: F, n: usize, seed: u64) -> Vec<f64>
where
    S: Fn(&mut McRng) -> T + Sync,
    F: Fn(&T) -> f64 + Sync,
{
    chunk_ranges(n)
        .into_par_iter()
        .map(|(c, len)| {
            let mut rng = chunk_rng(seed, c);
            (0..len).map(|_| f(&sampler(&mut rng))).collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .concat()
}

fn reduce<T, S, F>(sampler: S, f: F, n: usize, seed: u64) -> Result<McEstimate>
where
    S: Fn(&mut McRng) -> T + Sync,
    F: Fn(&T) -> Result<f64> + Sync,
{
    if n < 2 {
        return Err(invalid("n", "at least two samples are needed"));
    }
    let parts = chunk_ranges(n)
        .into_par_iter()
        .map(|(c, len)| {
            let mut rng = chunk_rng(seed, c);
            let mut m = Moments::default();
            for _ in 0..len {
                m.push(f(&sampler(&mut rng))?);
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = parts.into_iter().fold(Moments::default(), Moments::merge);
    let var = (total.m2 / (total.n - 1.0)).max(0.0);
    Ok(McEstimate {
        value: total.mean,
        stderr: (var / total.n).sqrt(),
        n,
        seed,
    })
}

/// Sample mean of `f(w)` over `n` draws with its standard error.
pub fn mc_expectation<T, S, F>(sampler: S, f: F, n: usize, seed: u64) -> Result<McEstimate>
where
    S: Fn(&mut McRng) -> T + Sync,
    F: Fn(&T) -> f64 + Sync,
{
    reduce(sampler, |w| Ok(f(w)), n, seed)
}

/// `E_q[ln q(w) - ln p(w)]`, failing on the first non-finite log ratio.
pub fn mc_kl<S, Q, P>(sampler: S, log_q: Q, log_p: P, n: usize, seed: u64) -> Result<McEstimate>
where
    S: Fn(&mut McRng) -> nalgebra::DVector<f64> + Sync,
    Q: Fn(&nalgebra::DVector<f64>) -> f64 + Sync,
    P: Fn(&nalgebra::DVector<f64>) -> f64 + Sync,
{
    reduce(
        sampler,
        |w| {
            let v = log_q(w) - log_p(w);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite {
                    value: v,
                    sample: w.iter().copied().collect(),
                })
            }
        },
        n,
        seed,
    )
}

/// Sample variance of `f` with a large-sample standard error.
pub fn mc_variance<T, S, F>(sampler: S, f: F, n: usize, seed: u64) -> Result<McEstimate>
where
    S: Fn(&mut McRng) -> T + Sync,
    F: Fn(&T) -> f64 + Sync,
{
    if n < 4 {
        return Err(invalid("n", "at least four samples are needed"));
    }
    let xs = mc_collect(sampler, f, n, seed);
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
    let var = m2 * nf / (nf - 1.0);
    Ok(McEstimate {
        value: var,
        stderr: ((m4 - m2 * m2).max(0.0) / nf).sqrt(),
        n,
        seed,
    })
}
