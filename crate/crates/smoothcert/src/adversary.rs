//! Inner maximization and attack generation: noisy penalized gradient
//! ascent (the training-time adversary), its noiseless variant, and the
//! evaluation-time L2 projected-gradient attack.
//!
//! The ascent maximizes, around an anchor x0,
//!     (1/r) sum_j [ loss(x_k + z_kj) - gamma * cost ]
//! with squared-L2 transport cost and fresh Gaussian noise each iteration.
//! `CostMode::Noisy` penalizes the sampled points c(x_k + z_kj, x0) (the
//! literal training recipe); `CostMode::Clean` penalizes c(x_k, x0). The two
//! gradients agree in expectation because the noise is additive with mean
//! zero. There is no projection: the search space is all of R^d, with an
//! optional unit-box clamp flag (default off).
//!
//! All randomness flows through sub-streams keyed by (seed, purpose,
//! instance, iteration), so batched and one-at-a-time execution produce
//! bit-identical iterates regardless of thread count.

use crate::nn::{argmax, backward_ce_scaled, forward, loss_ce_per_row, Network, NnError};
use crate::oracles::ToyLoss;
use crate::rng::{Purpose, RngStream};
use crate::smoothing::{NoiseSpec, SmoothError};
use crate::tensor::{gaussian, l2_norm_slice, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdvError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite iterate at ascent iteration {iteration}")]
    Divergence { iteration: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Smooth(#[from] SmoothError),
}

/// How the transport penalty enters the ascent objective and gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Penalize the sampled points: c(x_k + z_kj, x0), averaged over draws.
    Noisy,
    /// Penalize the iterate itself: c(x_k, x0).
    Clean,
}

/// Where the ascent starts.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum StartMode {
    /// At the anchor x0 itself (default).
    Clean,
    /// At a uniform point of the L2 ball of this radius around x0.
    RandomBall(f64),
}

/// Penalized-ascent configuration: penalty weight gamma, iteration count,
/// step size, cost mode, start mode, and the optional unit-box clamp.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct SurrogateSpec {
    pub gamma: f64,
    pub k_iters: usize,
    pub eta1: f64,
    pub cost_mode: CostMode,
    pub start: StartMode,
    pub clamp_box: bool,
}

impl SurrogateSpec {
    pub fn new(gamma: f64, k_iters: usize, eta1: f64) -> Result<Self, AdvError> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(AdvError::Parameter(format!("gamma {gamma} must be >= 0")));
        }
        if !(eta1 > 0.0) || !eta1.is_finite() {
            return Err(AdvError::Parameter(format!("eta1 {eta1} must be > 0")));
        }
        Ok(SurrogateSpec {
            gamma,
            k_iters,
            eta1,
            cost_mode: CostMode::Noisy,
            start: StartMode::Clean,
            clamp_box: false,
        })
    }

    /// Default ascent step 0.5/gamma (positive gamma only).
    pub fn default_eta1(gamma: f64) -> Result<f64, AdvError> {
        if !(gamma > 0.0) {
            return Err(AdvError::Parameter(
                "default step 0.5/gamma needs gamma > 0".into(),
            ));
        }
        Ok(0.5 / gamma)
    }
}

/// L2 projected-gradient attack configuration. The step size is the derived
/// quantity 2 * epsilon / k_pgd; `new` computes it and `validate` re-asserts
/// the relation on deserialized values.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub k_pgd: usize,
    pub eta: f64,
}

impl AttackSpec {
    pub fn new(epsilon: f64, k_pgd: usize) -> Result<Self, AdvError> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(AdvError::Parameter(format!("epsilon {epsilon} must be > 0")));
        }
        if k_pgd < 1 {
            return Err(AdvError::Parameter("k_pgd must be >= 1".into()));
        }
        let spec = AttackSpec { epsilon, k_pgd, eta: 2.0 * epsilon / k_pgd as f64 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), AdvError> {
        if !(self.epsilon > 0.0) || self.k_pgd < 1 {
            return Err(AdvError::Parameter("epsilon > 0 and k_pgd >= 1 required".into()));
        }
        let want = 2.0 * self.epsilon / self.k_pgd as f64;
        if self.eta != want {
            return Err(AdvError::Parameter(format!(
                "eta {} violates eta = 2*epsilon/k_pgd = {want}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Outcome of one inner maximization.
#[derive(Clone, Debug)]
pub struct SurrogateResult {
    pub x_adv: Vec<f64>,
    /// r-sample objective at the final iterate (fresh draws).
    pub phi_estimate: f64,
    /// Objective value at each iterate x_0 .. x_K (K+1 entries). Entries
    /// before the last are logged on the same draws the step used.
    pub ascent_trace: Vec<f64>,
    /// Noise-averaged squared-L2 distance to x0 at the final iterate:
    /// (1/r) sum_j |x_K + z_j - x0|^2 (>= 0).
    pub transport_cost: f64,
}

/// Anything the ascent can climb: per-row losses and input gradients over a
/// batch of points. The rows are independent instances.
pub trait BatchObjective {
    fn input_dim(&self) -> usize;
    fn check_labels(&self, labels: &[usize]) -> Result<(), AdvError>;
    /// Per-row loss values.
    fn loss_batch(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>, AdvError>;
    /// Per-row loss values and the `n x d` matrix of per-row input gradients.
    fn loss_grad_batch(&self, x: &Tensor, labels: &[usize])
        -> Result<(Vec<f64>, Tensor), AdvError>;
}

/// Cross-entropy of a network as an ascent objective.
pub struct CeObjective<'a>(pub &'a Network);

impl BatchObjective for CeObjective<'_> {
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    fn check_labels(&self, labels: &[usize]) -> Result<(), AdvError> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.0.num_classes) {
            return Err(AdvError::Parameter(format!(
                "label {bad} with {} classes",
                self.0.num_classes
            )));
        }
        Ok(())
    }

    fn loss_batch(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>, AdvError> {
        let (logits, _) = forward(self.0, x)?;
        Ok(loss_ce_per_row(&logits, labels)?)
    }

    fn loss_grad_batch(
        &self,
        x: &Tensor,
        labels: &[usize],
    ) -> Result<(Vec<f64>, Tensor), AdvError> {
        let (logits, trace) = forward(self.0, x)?;
        let losses = loss_ce_per_row(&logits, labels)?;
        let ones = vec![1.0; x.rows()];
        let gp = backward_ce_scaled(self.0, &trace, labels, &ones)?;
        Ok((losses, gp.grad_x))
    }
}

/// A low-dimensional analytic loss as an ascent objective (labels ignored).
pub struct ToyObjective<'a>(pub &'a ToyLoss);

impl BatchObjective for ToyObjective<'_> {
    fn input_dim(&self) -> usize {
        self.0.dim()
    }

    fn check_labels(&self, _labels: &[usize]) -> Result<(), AdvError> {
        Ok(())
    }

    fn loss_batch(&self, x: &Tensor, _labels: &[usize]) -> Result<Vec<f64>, AdvError> {
        Ok((0..x.rows()).map(|i| self.0.eval(x.row(i))).collect())
    }

    fn loss_grad_batch(
        &self,
        x: &Tensor,
        _labels: &[usize],
    ) -> Result<(Vec<f64>, Tensor), AdvError> {
        let n = x.rows();
        let d = x.cols();
        let mut losses = Vec::with_capacity(n);
        let mut grads = Tensor::zeros(&[n, d]);
        for i in 0..n {
            losses.push(self.0.eval(x.row(i)));
            grads.row_mut(i).copy_from_slice(&self.0.grad(x.row(i)));
        }
        Ok((losses, grads))
    }
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Uniform point in the unit L2 ball (dimension d).
fn unit_ball_point(d: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = l2_norm_slice(&dir);
        if norm > 0.0 {
            let radius = rng.uniform().powf(1.0 / d as f64);
            return dir.iter().map(|v| v * radius / norm).collect();
        }
    }
}

/// Batched inner maximization, one independent ascent per row of `x0s`.
/// Per-(instance, iteration) noise sub-streams make this bit-identical to
/// calling `inner_maximize` row by row.
pub fn inner_maximize_batch<O: BatchObjective>(
    obj: &O,
    x0s: &Tensor,
    labels: &[usize],
    ss: &SurrogateSpec,
    ns: &NoiseSpec,
    instances: &[u64],
) -> Result<Vec<SurrogateResult>, AdvError> {
    let n = x0s.rows();
    let d = x0s.cols();
    if d != obj.input_dim() {
        return Err(AdvError::Dimension(format!(
            "anchor dim {d} vs objective dim {}",
            obj.input_dim()
        )));
    }
    if labels.len() != n || instances.len() != n {
        return Err(AdvError::Dimension(format!(
            "{n} anchors vs {} labels / {} instance ids",
            labels.len(),
            instances.len()
        )));
    }
    obj.check_labels(labels)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let r = ns.r;
    let inv_r = 1.0 / r as f64;
    let big_k = ss.k_iters;

    let mut xk = x0s.clone();
    if let StartMode::RandomBall(radius) = ss.start {
        if !(radius >= 0.0) {
            return Err(AdvError::Parameter(format!("start radius {radius}")));
        }
        for (i, &inst) in instances.iter().enumerate() {
            let mut rng = RngStream::substream(ns.seed, Purpose::AscentInit, &[inst]);
            let offset = unit_ball_point(d, &mut rng);
            for (slot, off) in xk.row_mut(i).iter_mut().zip(&offset) {
                *slot += radius * off;
            }
        }
        if ss.clamp_box {
            for v in xk.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }

    let mut traces: Vec<Vec<f64>> = vec![Vec::with_capacity(big_k + 1); n];
    let mut transport = vec![0.0; n];
    let mut batch = Tensor::zeros(&[n, d]);

    for k in 0..=big_k {
        let last = k == big_k;
        // Fresh noise for this iteration, one r x d matrix per instance.
        let noise: Vec<Tensor> = instances
            .iter()
            .map(|&inst| {
                let mut rng = RngStream::substream(ns.seed, Purpose::AscentNoise, &[inst, k as u64]);
                Ok(gaussian(&mut rng, &[r, d], ns.sigma)?)
            })
            .collect::<Result<_, AdvError>>()?;

        let mut obj_acc = vec![0.0; n];
        let mut delta = if last { None } else { Some(Tensor::zeros(&[n, d])) };
        let mut cost_acc = vec![0.0; n];
        for j in 0..r {
            for i in 0..n {
                let row = batch.row_mut(i);
                for ((slot, &base), &z) in row.iter_mut().zip(xk.row(i)).zip(noise[i].row(j)) {
                    *slot = base + z;
                }
            }
            if let Some(delta) = delta.as_mut() {
                let (losses, grads) = obj.loss_grad_batch(&batch, labels)?;
                for i in 0..n {
                    obj_acc[i] += inv_r * losses[i];
                    let drow = delta.row_mut(i);
                    for (acc, &g) in drow.iter_mut().zip(grads.row(i)) {
                        *acc += inv_r * g;
                    }
                    if ss.cost_mode == CostMode::Noisy {
                        let c = squared_dist(batch.row(i), x0s.row(i));
                        obj_acc[i] -= ss.gamma * inv_r * c;
                        cost_acc[i] += inv_r * c;
                        let drow = delta.row_mut(i);
                        for ((acc, &b), &x0) in drow.iter_mut().zip(batch.row(i)).zip(x0s.row(i)) {
                            *acc -= ss.gamma * inv_r * 2.0 * (b - x0);
                        }
                    }
                }
            } else {
                let losses = obj.loss_batch(&batch, labels)?;
                for i in 0..n {
                    obj_acc[i] += inv_r * losses[i];
                    let c = squared_dist(batch.row(i), x0s.row(i));
                    cost_acc[i] += inv_r * c;
                    if ss.cost_mode == CostMode::Noisy {
                        obj_acc[i] -= ss.gamma * inv_r * c;
                    }
                }
            }
        }
        if ss.cost_mode == CostMode::Clean {
            for i in 0..n {
                let c = squared_dist(xk.row(i), x0s.row(i));
                obj_acc[i] -= ss.gamma * c;
                if let Some(delta) = delta.as_mut() {
                    let drow = delta.row_mut(i);
                    for (acc, (&x, &x0)) in drow.iter_mut().zip(xk.row(i).iter().zip(x0s.row(i))) {
                        *acc -= ss.gamma * 2.0 * (x - x0);
                    }
                }
            }
        }
        for i in 0..n {
            traces[i].push(obj_acc[i]);
        }
        if let Some(delta) = delta {
            for i in 0..n {
                let xrow = xk.row_mut(i);
                for (x, &dv) in xrow.iter_mut().zip(delta.row(i)) {
                    *x += ss.eta1 * dv;
                }
            }
            if ss.clamp_box {
                for v in xk.data_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
            if xk.data().iter().any(|v| !v.is_finite()) {
                return Err(AdvError::Divergence { iteration: k });
            }
        } else {
            transport.copy_from_slice(&cost_acc);
        }
    }

    Ok((0..n)
        .map(|i| SurrogateResult {
            x_adv: xk.row(i).to_vec(),
            phi_estimate: traces[i][big_k],
            ascent_trace: std::mem::take(&mut traces[i]),
            transport_cost: transport[i],
        })
        .collect())
}

/// Single-instance inner maximization (see `inner_maximize_batch`).
pub fn inner_maximize<O: BatchObjective>(
    obj: &O,
    x0: &[f64],
    label: usize,
    ss: &SurrogateSpec,
    ns: &NoiseSpec,
    instance: u64,
) -> Result<SurrogateResult, AdvError> {
    let x0s = Tensor::from_vec(&[1, x0.len()], x0.to_vec())?;
    let mut out = inner_maximize_batch(obj, &x0s, &[label], ss, ns, &[instance])?;
    Ok(out.pop().expect("one row in, one result out"))
}

/// Noiseless penalized ascent: the same iteration with z = 0 and r = 1.
pub fn wrm_inner<O: BatchObjective>(
    obj: &O,
    x0: &[f64],
    label: usize,
    gamma: f64,
    k_iters: usize,
    eta1: f64,
) -> Result<SurrogateResult, AdvError> {
    let ss = SurrogateSpec::new(gamma, k_iters, eta1)?;
    let ns = NoiseSpec::new(0.0, 1, 0)?;
    inner_maximize(obj, x0, label, &ss, &ns, 0)
}

/// Feasibility slack for the attack ball constraint.
pub const BALL_TOLERANCE: f64 = 1e-9;

/// Batched L2 projected-gradient attack: k_pgd steps of normalized-gradient
/// ascent on the loss, each followed by projection onto the epsilon-ball
/// around the anchor. A zero-gradient row skips its step (the iterate is
/// already stationary); that is expected behavior, not an error.
pub fn pgd_attack_batch<O: BatchObjective>(
    obj: &O,
    x0s: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<Tensor, AdvError> {
    spec.validate()?;
    let n = x0s.rows();
    let d = x0s.cols();
    if d != obj.input_dim() {
        return Err(AdvError::Dimension(format!(
            "anchor dim {d} vs objective dim {}",
            obj.input_dim()
        )));
    }
    if labels.len() != n {
        return Err(AdvError::Dimension(format!("{n} anchors vs {} labels", labels.len())));
    }
    obj.check_labels(labels)?;
    let mut x = x0s.clone();
    for _ in 0..spec.k_pgd {
        let (_, grads) = obj.loss_grad_batch(&x, labels)?;
        for i in 0..n {
            let gnorm = l2_norm_slice(grads.row(i));
            if gnorm == 0.0 {
                continue;
            }
            let step = spec.eta / gnorm;
            let xrow = x.row_mut(i);
            for (slot, &g) in xrow.iter_mut().zip(grads.row(i)) {
                *slot += step * g;
            }
            let dist = squared_dist(x.row(i), x0s.row(i)).sqrt();
            if dist > spec.epsilon {
                let shrink = spec.epsilon / dist;
                let xrow = x.row_mut(i);
                for (slot, &anchor) in xrow.iter_mut().zip(x0s.row(i)) {
                    *slot = anchor + (*slot - anchor) * shrink;
                }
            }
        }
    }
    x.check_finite("attack iterate")?;
    Ok(x)
}

/// Single-instance projected-gradient attack.
pub fn pgd_attack<O: BatchObjective>(
    obj: &O,
    x0: &[f64],
    label: usize,
    spec: &AttackSpec,
) -> Result<Vec<f64>, AdvError> {
    let x0s = Tensor::from_vec(&[1, x0.len()], x0.to_vec())?;
    let adv = pgd_attack_batch(obj, &x0s, &[label], spec)?;
    Ok(adv.row(0).to_vec())
}

/// Per-instance robust-correctness mask: true where the network classifies
/// BOTH the clean point and its adversarial counterpart correctly. Robust
/// accuracy is the mean of this mask, which makes it at most clean accuracy
/// by construction.
pub fn robust_correct(
    net: &Network,
    clean: &Tensor,
    adv: &Tensor,
    labels: &[usize],
) -> Result<Vec<bool>, AdvError> {
    if clean.shape() != adv.shape() {
        return Err(AdvError::Dimension(format!(
            "clean shape {:?} vs adversarial shape {:?}",
            clean.shape(),
            adv.shape()
        )));
    }
    let (clean_logits, _) = forward(net, clean)?;
    let (adv_logits, _) = forward(net, adv)?;
    Ok((0..clean.rows())
        .map(|i| {
            argmax(clean_logits.row(i)) == labels[i] && argmax(adv_logits.row(i)) == labels[i]
        })
        .collect())
}

/// Robust accuracy of `target` against adversarial examples crafted on
/// `source` (white-box when source == target, transfer otherwise).
pub fn transfer_eval(
    source: &Network,
    target: &Network,
    ds: &crate::data::Dataset,
    spec: &AttackSpec,
) -> Result<f64, AdvError> {
    if source.input_dim() != target.input_dim() || source.num_classes != target.num_classes {
        return Err(AdvError::Dimension(format!(
            "source {}x{} vs target {}x{}",
            source.input_dim(),
            source.num_classes,
            target.input_dim(),
            target.num_classes
        )));
    }
    if ds.dim() != target.input_dim() {
        return Err(AdvError::Dimension(format!(
            "dataset dim {} vs network dim {}",
            ds.dim(),
            target.input_dim()
        )));
    }
    let adv = pgd_attack_batch(&CeObjective(source), &ds.inputs, &ds.labels, spec)?;
    let mask = robust_correct(target, &ds.inputs, &adv, &ds.labels)?;
    Ok(mask.iter().filter(|&&b| b).count() as f64 / mask.len().max(1) as f64)
}
