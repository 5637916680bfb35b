//! Admissible batch sampling, SVRG correction terms and variance diagnostics.
//!
//! Batches are ordered tuples; with replacement repeats are allowed and
//! weighted. The whole batch stream is a pure function of (seed, counter), so
//! independent trials can draw concurrently without shared state.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{IterateState, ProblemSpec};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("batch size {b} exceeds component count {n} for without-replacement sampling")]
    BatchTooLarge { b: usize, n: usize },
    #[error("stale reference cache: sampler saw token {seen}, state has {actual}")]
    StaleCache { seen: u64, actual: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    WithReplacement,
    WithoutReplacement,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SampleMode,
    pub batch_size: usize,
    pub seed: u64,
}

/// Ordered index tuple drawn from [0, N).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSample {
    pub indices: Vec<usize>,
}

impl BatchSample {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Counter-keyed generator: a fixed (seed, counter) pair always yields the
/// same stream regardless of evaluation order.
fn keyed_rng(seed: u64, counter: u64) -> ChaCha8Rng {
    // splitmix64 finalizer mixes the key material.
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ counter))
}

/// Draws one batch. `counter` is the draw index (e.g. s * m_inner + k).
pub fn draw_batch(
    cfg: &SamplerConfig,
    n: usize,
    counter: u64,
) -> Result<BatchSample, SamplingError> {
    let b = cfg.batch_size;
    assert!(b >= 1, "batch size must be >= 1");
    let mut rng = keyed_rng(cfg.seed, counter);
    let indices = match cfg.mode {
        SampleMode::WithReplacement => (0..b).map(|_| rng.random_range(0..n)).collect(),
        SampleMode::WithoutReplacement => {
            if b > n {
                return Err(SamplingError::BatchTooLarge { b, n });
            }
            // Partial Fisher-Yates: first b entries of a random permutation.
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..b {
                let j = rng.random_range(i..n);
                pool.swap(i, j);
            }
            pool.truncate(b);
            pool
        }
    };
    Ok(BatchSample { indices })
}

/// Batch-averaged x-block gradient (1/b) sum grad g_i + grad_x f_i over the tuple.
pub fn batch_grad_x(
    p: &ProblemSpec,
    batch: &BatchSample,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> DVector<f64> {
    let mut acc = DVector::zeros(p.n);
    for &i in &batch.indices {
        acc += p.components[i].grad_phi_x(x, y);
    }
    acc / batch.len() as f64
}

/// Batch-averaged y-block gradient (1/b) sum grad h_i - grad_y f_i over the tuple.
pub fn batch_grad_y(
    p: &ProblemSpec,
    batch: &BatchSample,
    y: &DVector<f64>,
    x: &DVector<f64>,
) -> DVector<f64> {
    let mut acc = DVector::zeros(p.m_dim);
    for &i in &batch.indices {
        acc += p.components[i].grad_phi_y(y, x);
    }
    acc / batch.len() as f64
}

/// SVRG correction pair evaluated at the reference point:
///
/// ```text
/// v_x = grad g(x~) + grad_x f(x~,y~) - grad g_S(x~) - grad_x f_S(x~,y~)
/// v_y = -grad h(y~) + grad_y f(x~,y~) + grad h_S(y~) - grad_y f_S(x~,y~)
/// ```
///
/// The cached full gradients must belong to the state's current reference;
/// a mismatched token is a hard error.
pub fn svrg_correction(
    p: &ProblemSpec,
    batch: &BatchSample,
    state: &IterateState,
    cache_token: u64,
) -> Result<(DVector<f64>, DVector<f64>), SamplingError> {
    if cache_token != state.reference_token() {
        return Err(SamplingError::StaleCache {
            seen: cache_token,
            actual: state.reference_token(),
        });
    }
    let v_x = &state.grad_x_ref - batch_grad_x(p, batch, &state.x_ref, &state.y_ref);
    let v_y = &state.grad_y_ref + batch_grad_y(p, batch, &state.y_ref, &state.x_ref);
    Ok((v_x, v_y))
}

/// Drift vectors entering the subproblem prox arguments:
///
/// ```text
/// v_hat_x =  alpha (v_x + A'lambda)
/// v_hat_y = -alpha (v_y - B'lambda)
/// ```
pub fn drift_vectors(
    v_x: &DVector<f64>,
    v_y: &DVector<f64>,
    lambda: &DVector<f64>,
    alpha: f64,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>) {
    assert!(alpha > 0.0, "drift_vectors requires alpha > 0");
    let hat_x = (v_x + a.transpose() * lambda) * alpha;
    let hat_y = (v_y - b.transpose() * lambda) * (-alpha);
    (hat_x, hat_y)
}

/// Finite-population variance factor of the batch-mean estimator.
///
/// 1 with replacement; (N-b)/(N-1) without; 0 for a single component.
pub fn tau_factor(mode: SampleMode, n: usize, b: usize) -> f64 {
    assert!((1..=n).contains(&b), "require 1 <= b <= N");
    if n == 1 {
        return 0.0;
    }
    match mode {
        SampleMode::WithReplacement => 1.0,
        SampleMode::WithoutReplacement => (n - b) as f64 / (n - 1) as f64,
    }
}

/// Empirical-vs-theoretical variance report for the SVRG estimators.
#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub trials: usize,
    /// Mean squared deviation of the x estimator from the full gradient.
    pub empirical_x: f64,
    pub empirical_y: f64,
    /// (L_phi^2 tau / b) (||x - x~||^2 + ||y - y~||^2).
    pub bound_x: f64,
    pub bound_y: f64,
    /// Mean within-batch unbiased sample variance (diagnostic only).
    pub sample_variance_x: f64,
    pub sample_variance_y: f64,
}

/// Monte-Carlo probe of the Thm-style variance bound; diagnostics only.
pub fn variance_probe(
    p: &ProblemSpec,
    cfg: &SamplerConfig,
    x: &DVector<f64>,
    y: &DVector<f64>,
    x_ref: &DVector<f64>,
    y_ref: &DVector<f64>,
    trials: usize,
) -> VarianceReport {
    assert!(trials >= 100, "variance probe needs >= 100 trials");
    let n = p.n_components();
    let (gx_full, gy_full) = p.full_gradients(x, y);
    let (gx_ref, gy_ref) = p.full_gradients(x_ref, y_ref);
    let mut acc_x = 0.0;
    let mut acc_y = 0.0;
    let mut s2_x = 0.0;
    let mut s2_y = 0.0;
    let b = cfg.batch_size as f64;
    for t in 0..trials {
        let batch = draw_batch(cfg, n, t as u64).expect("probe batch");
        // u = grad_S(current) - grad_S(ref) + grad(ref)
        let est_x = batch_grad_x(p, &batch, x, y) - batch_grad_x(p, &batch, x_ref, y_ref) + &gx_ref;
        let est_y = batch_grad_y(p, &batch, y, x) - batch_grad_y(p, &batch, y_ref, x_ref) + &gy_ref;
        acc_x += (&est_x - &gx_full).norm_squared();
        acc_y += (&est_y - &gy_full).norm_squared();
        if batch.len() > 1 {
            // Unbiased within-batch sample variance of the per-index terms.
            let mut zx = Vec::with_capacity(batch.len());
            let mut zy = Vec::with_capacity(batch.len());
            for &i in &batch.indices {
                let comp = &p.components[i];
                zx.push(comp.grad_phi_x(x, y) - comp.grad_phi_x(x_ref, y_ref));
                zy.push(comp.grad_phi_y(y, x) - comp.grad_phi_y(y_ref, x_ref));
            }
            let mean_x = zx.iter().fold(DVector::zeros(p.n), |a, v| a + v) / b;
            let mean_y = zy.iter().fold(DVector::zeros(p.m_dim), |a, v| a + v) / b;
            s2_x += zx.iter().map(|v| (v - &mean_x).norm_squared()).sum::<f64>() / (b - 1.0);
            s2_y += zy.iter().map(|v| (v - &mean_y).norm_squared()).sum::<f64>() / (b - 1.0);
        }
    }
    let tau = tau_factor(cfg.mode, n, cfg.batch_size);
    let dist = (x - x_ref).norm_squared() + (y - y_ref).norm_squared();
    let lx = p.l_phi_x();
    let ly = p.l_phi_y();
    VarianceReport {
        trials,
        empirical_x: acc_x / trials as f64,
        empirical_y: acc_y / trials as f64,
        bound_x: lx * lx * tau / b * dist,
        bound_y: ly * ly * tau / b * dist,
        sample_variance_x: s2_x / trials as f64,
        sample_variance_y: s2_y / trials as f64,
    }
}

/// Enumerates every batch of size `b` (tuples with replacement, subsets
/// without) for exhaustive expectation tests. Only sensible for tiny N.
pub fn enumerate_batches(mode: SampleMode, n: usize, b: usize) -> Vec<BatchSample> {
    match mode {
        SampleMode::WithReplacement => {
            let mut out = Vec::new();
            let mut idx = vec![0usize; b];
            loop {
                out.push(BatchSample {
                    indices: idx.clone(),
                });
                let mut pos = b;
                loop {
                    if pos == 0 {
                        return out;
                    }
                    pos -= 1;
                    idx[pos] += 1;
                    if idx[pos] < n {
                        break;
                    }
                    idx[pos] = 0;
                }
            }
        }
        SampleMode::WithoutReplacement => {
            // Unordered subsets; order does not affect the batch average.
            let mut out = Vec::new();
            let mut comb: Vec<usize> = (0..b).collect();
            loop {
                out.push(BatchSample {
                    indices: comb.clone(),
                });
                let mut i = b;
                loop {
                    if i == 0 {
                        return out;
                    }
                    i -= 1;
                    if comb[i] < n - b + i {
                        comb[i] += 1;
                        for j in i + 1..b {
                            comb[j] = comb[j - 1] + 1;
                        }
                        break;
                    }
                }
            }
        }
    }
}
