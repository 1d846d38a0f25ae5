//! Gaussian smoothing layer: noise configuration, Monte-Carlo smoothed loss
//! and its gradient, and smoothed prediction by majority vote over noisy
//! forward passes.
//!
//! Every estimate draws its noise from a sub-stream keyed by
//! (seed, purpose, instance, iteration), so results are reproducible and
//! independent of evaluation order or thread count.

use crate::nn::{argmax, loss_ce_per_row, GradPair, Network, NnError};
use crate::rng::{Purpose, RngStream};
use crate::tensor::{gaussian, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SmoothError {
    #[error("invalid noise spec: {0}")]
    Parameter(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Isotropic Gaussian noise configuration: standard deviation on the input
/// scale, number of draws per estimate, and the base seed all sub-streams
/// derive from.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub r: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, r: usize, seed: u64) -> Result<Self, SmoothError> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(SmoothError::Parameter(format!("sigma {sigma} must be >= 0")));
        }
        if r < 1 {
            return Err(SmoothError::Parameter("r must be >= 1".into()));
        }
        Ok(NoiseSpec { sigma, r, seed })
    }

    /// Noise sub-stream for one (instance, iteration) slot.
    pub fn stream(&self, purpose: Purpose, instance: u64, iter: u64) -> RngStream {
        RngStream::substream(self.seed, purpose, &[instance, iter])
    }

    /// `r x d` noise matrix drawn from an explicit stream.
    pub fn noise_matrix(&self, d: usize, rng: &mut RngStream) -> Result<Tensor, SmoothError> {
        Ok(gaussian(rng, &[self.r, d], self.sigma)?)
    }
}

/// Mean and standard error (sample std / sqrt(n)); a single value has
/// standard error 0 by convention.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n >= 1, "mean of empty sample");
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Monte-Carlo average of an arbitrary scalar function under Gaussian input
/// noise: returns (mean over r draws of f(x+z), standard error).
pub fn smoothed_scalar_mc<F: Fn(&[f64]) -> f64>(
    f: F,
    x: &[f64],
    sigma: f64,
    r: usize,
    rng: &mut RngStream,
) -> (f64, f64) {
    let mut vals = Vec::with_capacity(r);
    let mut xt = x.to_vec();
    for _ in 0..r {
        for (slot, &base) in xt.iter_mut().zip(x) {
            *slot = base + sigma * rng.normal();
        }
        vals.push(f(&xt));
    }
    mean_and_se(&vals)
}

fn noisy_batch(x: &[f64], ns: &NoiseSpec, rng: &mut RngStream) -> Result<Tensor, SmoothError> {
    let d = x.len();
    let mut noise = ns.noise_matrix(d, rng)?;
    for i in 0..ns.r {
        let row = noise.row_mut(i);
        for (slot, &base) in row.iter_mut().zip(x) {
            *slot += base;
        }
    }
    Ok(noise)
}

/// Cross-entropy of the smoothed model at one instance: mean over r noisy
/// forward passes, with its Monte-Carlo standard error. sigma = 0 reproduces
/// the plain loss exactly with standard error 0.
pub fn smoothed_loss(
    net: &Network,
    x: &[f64],
    label: usize,
    ns: &NoiseSpec,
    purpose: Purpose,
    instance: u64,
    iter: u64,
) -> Result<(f64, f64), SmoothError> {
    let mut rng = ns.stream(purpose, instance, iter);
    let batch = noisy_batch(x, ns, &mut rng)?;
    let labels = vec![label; ns.r];
    let (logits, _) = crate::nn::forward(net, &batch)?;
    let per_row = loss_ce_per_row(&logits, &labels)?;
    Ok(mean_and_se(&per_row))
}

/// Gradient of the r-draw average loss: parameter gradients averaged over
/// draws, and `grad_x` collapsed to a single `1 x d` row holding the mean
/// per-draw input gradient. This is exactly the gradient of the quantity
/// `smoothed_loss` estimates with the same keys (same frozen draws).
pub fn smoothed_loss_grad(
    net: &Network,
    x: &[f64],
    label: usize,
    ns: &NoiseSpec,
    purpose: Purpose,
    instance: u64,
    iter: u64,
) -> Result<GradPair, SmoothError> {
    let mut rng = ns.stream(purpose, instance, iter);
    let batch = noisy_batch(x, ns, &mut rng)?;
    let labels = vec![label; ns.r];
    let (_, trace) = crate::nn::forward(net, &batch)?;
    let scales = vec![1.0 / ns.r as f64; ns.r];
    let gp = crate::nn::backward_ce_scaled(net, &trace, &labels, &scales)?;
    let d = x.len();
    let mut mean_gx = vec![0.0; d];
    for i in 0..ns.r {
        for (acc, &g) in mean_gx.iter_mut().zip(gp.grad_x.row(i)) {
            *acc += g; // rows already carry the 1/r scale
        }
    }
    Ok(GradPair {
        grad_w: gp.grad_w,
        grad_b: gp.grad_b,
        grad_x: Tensor::from_vec(&[1, d], mean_gx)?,
    })
}

/// Fixed chunk size for prediction batches. Noise is drawn sequentially from
/// the caller's stream, so the chunk size never affects the draws.
const PREDICT_CHUNK: usize = 256;

/// Class counts over n noisy forward passes: counts[c] is the number of
/// draws whose argmax (ties to the lowest index) lands on class c.
pub fn smoothed_predict(
    net: &Network,
    x: &[f64],
    sigma: f64,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>, SmoothError> {
    if n < 1 {
        return Err(SmoothError::Parameter("n must be >= 1".into()));
    }
    let d = x.len();
    let mut counts = vec![0usize; net.num_classes];
    let mut done = 0;
    while done < n {
        let take = PREDICT_CHUNK.min(n - done);
        let mut batch = gaussian(rng, &[take, d], sigma)?;
        for i in 0..take {
            let row = batch.row_mut(i);
            for (slot, &base) in row.iter_mut().zip(x) {
                *slot += base;
            }
        }
        let (logits, _) = crate::nn::forward(net, &batch)?;
        for i in 0..take {
            counts[argmax(logits.row(i))] += 1;
        }
        done += take;
    }
    Ok(counts)
}

/// Majority class of a count vector, ties broken to the lowest index.
pub fn majority_class(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &v) in counts.iter().enumerate() {
        if v > counts[best] {
            best = c;
        }
    }
    best
}
