//! Outer minimization loops. Five methods share one SGD update path:
//!
//! * `nal`     — per batch, run the noisy penalized inner ascent on every
//!               instance, then step the parameters on the mean loss over
//!               all (instance, fresh-noise-draw) pairs at the final
//!               iterates: theta <- theta - eta2 * (1/(n_b r)) sum_ij
//!               grad loss(theta; x_K^i + z_ij).
//! * `wrm`     — same with the noiseless ascent and no update-time noise.
//! * `noise`   — no ascent: minimize the mean loss at x0 + z (Gaussian
//!               augmentation), r draws per instance.
//! * `pgd_at`  — minimize the loss at L2 projected-gradient attack points
//!               crafted against the current parameters.
//! * `natural` — plain SGD on clean inputs.
//!
//! The optimizer is deliberately plain SGD (the update rule is a bare
//! gradient step); no momentum or adaptivity. Given a spec, training is
//! bit-deterministic: shuffling, noise, and initialization all come from
//! keyed substreams, and gradient reductions use fixed summation order, so
//! results do not depend on thread count.

use crate::adversary::{
    inner_maximize_batch, pgd_attack_batch, robust_correct, AdvError, AttackSpec, CeObjective,
    CostMode, SurrogateSpec,
};
use crate::data::Dataset;
use crate::nn::{argmax, backward_ce, forward, loss_ce_per_row, Network, NnError};
use crate::rng::{derive_seed, Purpose, RngStream, CHECKSUM_ALGORITHM, RNG_ALGORITHM};
use crate::smoothing::{majority_class, smoothed_predict, NoiseSpec, SmoothError};
use crate::tensor::{axpy_mut, gaussian, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training spec: {0}")]
    Parameter(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("training diverged (non-finite values) at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Adv(#[from] AdvError),
    #[error(transparent)]
    Smooth(#[from] SmoothError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nal,
    Wrm,
    Noise,
    PgdAt,
    Natural,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self, TrainError> {
        match s {
            "nal" => Ok(Method::Nal),
            "wrm" => Ok(Method::Wrm),
            "noise" => Ok(Method::Noise),
            "pgd_at" => Ok(Method::PgdAt),
            "natural" => Ok(Method::Natural),
            other => Err(TrainError::Parameter(format!(
                "unknown method {other:?} (expected nal|wrm|noise|pgd_at|natural)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Nal => "nal",
            Method::Wrm => "wrm",
            Method::Noise => "noise",
            Method::PgdAt => "pgd_at",
            Method::Natural => "natural",
        }
    }
}

/// Full training configuration. `seed` drives initialization-independent
/// training randomness (batch order); `noise.seed` drives every noise
/// substream; both are echoed into the run manifest.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainSpec {
    pub method: Method,
    pub epochs: usize,
    pub eta2: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub noise: NoiseSpec,
    pub k_iters: usize,
    pub eta1: f64,
    pub cost_mode: CostMode,
    pub attack_eps: f64,
    pub attack_iters: usize,
    pub seed: u64,
}

impl TrainSpec {
    /// Library defaults (batch 128, eta2 1e-4, gamma 1.5, (K, r) = (4, 4),
    /// sigma 0.1, 10 epochs); desk-scale configs typically override eta2.
    pub fn defaults(method: Method, seed: u64) -> TrainSpec {
        TrainSpec {
            method,
            epochs: 10,
            eta2: 1e-4,
            batch_size: 128,
            gamma: 1.5,
            noise: NoiseSpec { sigma: 0.1, r: 4, seed },
            k_iters: 4,
            eta1: 0.5 / 1.5,
            cost_mode: CostMode::Noisy,
            attack_eps: 0.34,
            attack_iters: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.eta2 > 0.0) || !self.eta2.is_finite() {
            return Err(TrainError::Parameter(format!("eta2 {} must be > 0", self.eta2)));
        }
        if self.epochs < 1 {
            return Err(TrainError::Parameter("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Parameter("batch_size must be >= 1".into()));
        }
        NoiseSpec::new(self.noise.sigma, self.noise.r, self.noise.seed)?;
        match self.method {
            Method::Nal | Method::Wrm => {
                if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
                    return Err(TrainError::Parameter(format!(
                        "gamma {} required (>= 0) for method {}",
                        self.gamma,
                        self.method.name()
                    )));
                }
                if !(self.eta1 > 0.0) {
                    return Err(TrainError::Parameter(format!(
                        "eta1 {} required (> 0) for method {}",
                        self.eta1,
                        self.method.name()
                    )));
                }
            }
            Method::PgdAt => {
                AttackSpec::new(self.attack_eps, self.attack_iters)?;
            }
            Method::Noise | Method::Natural => {}
        }
        Ok(())
    }
}

/// Per-epoch training statistics.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    /// Mean of the method's own training objective over the epoch
    /// (penalized ascent value for nal/wrm, loss at the training points
    /// otherwise).
    pub surrogate_loss: f64,
    /// Mean clean cross-entropy over the epoch's instances.
    pub clean_loss: f64,
    /// Wall time of the epoch in seconds (informational; never used in any
    /// comparison or output that must be deterministic).
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

fn batch_rows(ds: &Dataset, idx: &[usize]) -> (Tensor, Vec<usize>) {
    let d = ds.dim();
    let mut data = Vec::with_capacity(idx.len() * d);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(ds.inputs.row(i));
        labels.push(ds.labels[i]);
    }
    (Tensor::from_vec(&[idx.len(), d], data).expect("dataset rows are finite"), labels)
}

/// One SGD step on the mean loss over `rows`; returns per-row losses.
fn sgd_step(
    net: &mut Network,
    rows: &Tensor,
    labels: &[usize],
    eta2: f64,
) -> Result<Vec<f64>, NnError> {
    let (logits, trace) = forward(net, rows)?;
    let losses = loss_ce_per_row(&logits, labels)?;
    let gp = backward_ce(net, &trace, labels)?;
    for (w, gw) in net.weights.iter_mut().zip(&gp.grad_w) {
        axpy_mut(-eta2, gw.data(), w.data_mut());
    }
    for (b, gb) in net.biases.iter_mut().zip(&gp.grad_b) {
        axpy_mut(-eta2, gb.data(), b.data_mut());
    }
    Ok(losses)
}

/// Repeat each anchor row r times and add per-instance fresh noise drawn
/// from (noise_seed, UpdateNoise, [dataset index]).
fn noisy_update_rows(
    anchors: &Tensor,
    labels: &[usize],
    instances: &[u64],
    ns: &NoiseSpec,
    noise_seed: u64,
) -> Result<(Tensor, Vec<usize>), TrainError> {
    let n = anchors.rows();
    let d = anchors.cols();
    let r = ns.r;
    let mut data = Vec::with_capacity(n * r * d);
    let mut rep_labels = Vec::with_capacity(n * r);
    for i in 0..n {
        let mut rng = RngStream::substream(noise_seed, Purpose::UpdateNoise, &[instances[i]]);
        let z = gaussian(&mut rng, &[r, d], ns.sigma)?;
        for j in 0..r {
            for (a, b) in anchors.row(i).iter().zip(z.row(j)) {
                data.push(a + b);
            }
            rep_labels.push(labels[i]);
        }
    }
    Ok((Tensor::from_vec(&[n * r, d], data)?, rep_labels))
}

/// Train a copy of `net0` on `ds` according to `ts`. Deterministic given
/// the spec; returns the trained network and per-epoch history.
pub fn train(net0: &Network, ds: &Dataset, ts: &TrainSpec) -> Result<(Network, TrainHistory), TrainError> {
    ts.validate()?;
    if ds.dim() != net0.input_dim() {
        return Err(TrainError::Dimension(format!(
            "dataset dim {} vs network input {}",
            ds.dim(),
            net0.input_dim()
        )));
    }
    if ds.num_classes > net0.num_classes {
        return Err(TrainError::Dimension(format!(
            "dataset has {} classes, network only {}",
            ds.num_classes, net0.num_classes
        )));
    }
    let mut net = net0.clone();
    let n = ds.len();
    if n == 0 {
        return Err(TrainError::Parameter("empty dataset".into()));
    }
    let mut history = TrainHistory::default();

    for epoch in 0..ts.epochs {
        let started = std::time::Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::substream(ts.seed, Purpose::BatchShuffle, &[epoch as u64]).shuffle(&mut order);
        // Fresh noise family each epoch: every substream below is keyed by
        // the stable dataset row index under this derived seed.
        let noise_seed = derive_seed(ts.noise.seed, &[epoch as u64]);
        let epoch_ns = NoiseSpec { seed: noise_seed, ..ts.noise };

        let mut surrogate_sum = 0.0;
        let mut clean_sum = 0.0;

        for (batch_idx, chunk) in order.chunks(ts.batch_size).enumerate() {
            let (x0s, labels) = batch_rows(ds, chunk);
            let instances: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();

            let step = (|| -> Result<(), TrainError> {
                match ts.method {
                    Method::Natural => {
                        let losses = sgd_step(&mut net, &x0s, &labels, ts.eta2)?;
                        let s: f64 = losses.iter().sum();
                        surrogate_sum += s;
                        clean_sum += s;
                    }
                    Method::Noise => {
                        let (rows, rep_labels) =
                            noisy_update_rows(&x0s, &labels, &instances, &epoch_ns, noise_seed)?;
                        let losses = sgd_step(&mut net, &rows, &rep_labels, ts.eta2)?;
                        surrogate_sum +=
                            losses.iter().sum::<f64>() / epoch_ns.r as f64;
                        clean_sum += clean_batch_loss(&net, &x0s, &labels)?;
                    }
                    Method::PgdAt => {
                        let attack = AttackSpec::new(ts.attack_eps, ts.attack_iters)?;
                        let adv = pgd_attack_batch(&CeObjective(&net), &x0s, &labels, &attack)?;
                        let losses = sgd_step(&mut net, &adv, &labels, ts.eta2)?;
                        surrogate_sum += losses.iter().sum::<f64>();
                        clean_sum += clean_batch_loss(&net, &x0s, &labels)?;
                    }
                    Method::Nal | Method::Wrm => {
                        let mut ss = SurrogateSpec::new(ts.gamma, ts.k_iters, ts.eta1)?;
                        ss.cost_mode = ts.cost_mode;
                        let inner_ns = if ts.method == Method::Wrm {
                            NoiseSpec { sigma: 0.0, r: 1, seed: noise_seed }
                        } else {
                            epoch_ns
                        };
                        let results = inner_maximize_batch(
                            &CeObjective(&net),
                            &x0s,
                            &labels,
                            &ss,
                            &inner_ns,
                            &instances,
                        )?;
                        surrogate_sum += results.iter().map(|r| r.phi_estimate).sum::<f64>();
                        let d = x0s.cols();
                        let mut anchors = Vec::with_capacity(chunk.len() * d);
                        for r in &results {
                            anchors.extend_from_slice(&r.x_adv);
                        }
                        let anchors = Tensor::from_vec(&[chunk.len(), d], anchors)
                            .map_err(TrainError::from)?;
                        if ts.method == Method::Wrm {
                            sgd_step(&mut net, &anchors, &labels, ts.eta2)?;
                        } else {
                            let (rows, rep_labels) = noisy_update_rows(
                                &anchors,
                                &labels,
                                &instances,
                                &epoch_ns,
                                noise_seed,
                            )?;
                            sgd_step(&mut net, &rows, &rep_labels, ts.eta2)?;
                        }
                        clean_sum += clean_batch_loss(&net, &x0s, &labels)?;
                    }
                }
                Ok(())
            })();
            if let Err(e) = step {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: batch_idx,
                    detail: e.to_string(),
                });
            }
            if !surrogate_sum.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: batch_idx,
                    detail: "non-finite training objective".into(),
                });
            }
        }

        history.epochs.push(EpochStats {
            surrogate_loss: surrogate_sum / n as f64,
            clean_loss: clean_sum / n as f64,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }

    net.check_finite()?;
    Ok((net, history))
}

fn clean_batch_loss(net: &Network, x0s: &Tensor, labels: &[usize]) -> Result<f64, NnError> {
    let (logits, _) = forward(net, x0s)?;
    Ok(loss_ce_per_row(&logits, labels)?.iter().sum())
}

/// Accuracy report. `robust_acc` counts instances classified correctly both
/// clean and under attack, so it can never exceed `clean_acc`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
    #[serde(skip)]
    pub clean_correct: Vec<bool>,
    #[serde(skip)]
    pub robust_mask: Vec<bool>,
}

fn predictions(
    net: &Network,
    inputs: &Tensor,
    noise_at_test: Option<&NoiseSpec>,
) -> Result<Vec<usize>, TrainError> {
    match noise_at_test {
        None => {
            let (logits, _) = forward(net, inputs)?;
            Ok((0..inputs.rows()).map(|i| argmax(logits.row(i))).collect())
        }
        Some(ns) => {
            let mut preds = Vec::with_capacity(inputs.rows());
            for i in 0..inputs.rows() {
                let mut rng = RngStream::substream(ns.seed, Purpose::PredictNoise, &[i as u64]);
                let counts = smoothed_predict(net, inputs.row(i), ns.sigma, ns.r, &mut rng)?;
                preds.push(majority_class(&counts));
            }
            Ok(preds)
        }
    }
}

/// Clean accuracy, and robust accuracy under a white-box L2 attack when an
/// attack spec is given. With `noise_at_test`, predictions (clean and
/// adversarial alike) are majority votes over that spec's r noisy draws.
pub fn evaluate(
    net: &Network,
    ds: &Dataset,
    attack: Option<&AttackSpec>,
    noise_at_test: Option<&NoiseSpec>,
) -> Result<EvalReport, TrainError> {
    if ds.dim() != net.input_dim() {
        return Err(TrainError::Dimension(format!(
            "dataset dim {} vs network input {}",
            ds.dim(),
            net.input_dim()
        )));
    }
    let n = ds.len();
    let clean_preds = predictions(net, &ds.inputs, noise_at_test)?;
    let clean_correct: Vec<bool> =
        clean_preds.iter().zip(&ds.labels).map(|(p, l)| p == l).collect();
    let clean_acc = clean_correct.iter().filter(|&&b| b).count() as f64 / n.max(1) as f64;

    let (robust_acc, robust_mask) = match attack {
        None => (None, Vec::new()),
        Some(spec) => {
            let adv = pgd_attack_batch(&CeObjective(net), &ds.inputs, &ds.labels, spec)?;
            let mask = match noise_at_test {
                None => robust_correct(net, &ds.inputs, &adv, &ds.labels)?,
                Some(_) => {
                    let adv_preds = predictions(net, &adv, noise_at_test)?;
                    (0..n)
                        .map(|i| clean_correct[i] && adv_preds[i] == ds.labels[i])
                        .collect()
                }
            };
            let acc = mask.iter().filter(|&&b| b).count() as f64 / n.max(1) as f64;
            assert!(
                acc <= clean_acc + 1e-12,
                "robust accuracy {acc} above clean accuracy {clean_acc}"
            );
            (Some(acc), mask)
        }
    };

    Ok(EvalReport { n, clean_acc, robust_acc, clean_correct, robust_mask })
}

/// Run manifest written next to every trained model: spec echo, data
/// fingerprint, PRNG identifiers, and per-epoch history.
#[derive(Clone, Debug, serde::Serialize)]
pub struct TrainManifest {
    pub schema: &'static str,
    pub spec: TrainSpec,
    pub dataset_name: String,
    pub dataset_n: usize,
    pub dataset_dim: usize,
    pub dataset_classes: usize,
    pub dataset_checksum: String,
    pub arch: String,
    pub parameter_count: usize,
    pub rng_algorithm: &'static str,
    pub checksum_algorithm: &'static str,
    /// Prediction rule at evaluation time when noise is in play.
    pub noise_at_test: &'static str,
    pub history: TrainHistory,
}

pub fn build_manifest(
    ts: &TrainSpec,
    ds: &Dataset,
    net: &Network,
    history: &TrainHistory,
) -> TrainManifest {
    TrainManifest {
        schema: "train-run/v1",
        spec: *ts,
        dataset_name: ds.name.clone(),
        dataset_n: ds.len(),
        dataset_dim: ds.dim(),
        dataset_classes: ds.num_classes,
        dataset_checksum: format!("{:016x}", ds.checksum()),
        arch: net.arch_string(),
        parameter_count: net.parameter_count(),
        rng_algorithm: RNG_ALGORITHM,
        checksum_algorithm: CHECKSUM_ALGORITHM,
        noise_at_test: "majority vote over r draws",
        history: history.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::nn::{init_network, Activation, LayerSpec};

    fn blob_net(seed: u64) -> Network {
        init_network(
            &[
                LayerSpec { in_dim: 2, out_dim: 32, activation: Activation::Elu },
                LayerSpec { in_dim: 32, out_dim: 3, activation: Activation::None },
            ],
            &mut RngStream::substream(seed, Purpose::WeightInit, &[0]),
        )
        .unwrap()
    }

    fn params_bits(net: &Network) -> Vec<u64> {
        net.weights
            .iter()
            .chain(&net.biases)
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn spec_validation_catches_method_requirements() {
        let mut ts = TrainSpec::defaults(Method::Nal, 1);
        ts.eta2 = 0.0;
        assert!(ts.validate().is_err());
        let mut ts = TrainSpec::defaults(Method::Nal, 1);
        ts.eta1 = 0.0;
        assert!(ts.validate().is_err());
        let mut ts = TrainSpec::defaults(Method::PgdAt, 1);
        ts.attack_eps = 0.0;
        assert!(ts.validate().is_err());
        assert!(TrainSpec::defaults(Method::Natural, 1).validate().is_ok());
        assert!(Method::parse("nal").is_ok());
        assert!(Method::parse("sgd").is_err());
    }

    #[test]
    fn nal_with_no_ascent_and_no_noise_is_natural_training() {
        let ds = make_blobs(60, 2, 3, 4.0, 5).unwrap();
        let net0 = blob_net(1);
        let mut nal = TrainSpec::defaults(Method::Nal, 7);
        nal.epochs = 2;
        nal.eta2 = 0.1;
        nal.batch_size = 16;
        nal.k_iters = 0;
        nal.noise = NoiseSpec { sigma: 0.0, r: 1, seed: 7 };
        let mut nat = nal;
        nat.method = Method::Natural;
        let (a, _) = train(&net0, &ds, &nal).unwrap();
        let (b, _) = train(&net0, &ds, &nat).unwrap();
        assert_eq!(params_bits(&a), params_bits(&b));
    }

    #[test]
    fn nal_without_noise_is_wrm() {
        let ds = make_blobs(60, 2, 3, 4.0, 6).unwrap();
        let net0 = blob_net(2);
        let mut nal = TrainSpec::defaults(Method::Nal, 9);
        nal.epochs = 2;
        nal.eta2 = 0.1;
        nal.batch_size = 16;
        nal.k_iters = 3;
        nal.gamma = 1.5;
        nal.eta1 = 0.1;
        nal.noise = NoiseSpec { sigma: 0.0, r: 1, seed: 9 };
        let mut wrm = nal;
        wrm.method = Method::Wrm;
        let (a, ha) = train(&net0, &ds, &nal).unwrap();
        let (b, hb) = train(&net0, &ds, &wrm).unwrap();
        assert_eq!(params_bits(&a), params_bits(&b));
        assert_eq!(
            ha.epochs.iter().map(|e| e.surrogate_loss.to_bits()).collect::<Vec<_>>(),
            hb.epochs.iter().map(|e| e.surrogate_loss.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn noise_method_equals_nal_with_zero_ascent_iterations() {
        let ds = make_blobs(60, 2, 3, 4.0, 7).unwrap();
        let net0 = blob_net(3);
        let mut noise = TrainSpec::defaults(Method::Noise, 11);
        noise.epochs = 2;
        noise.eta2 = 0.1;
        noise.batch_size = 16;
        noise.noise = NoiseSpec { sigma: 0.2, r: 3, seed: 11 };
        let mut nal = noise;
        nal.method = Method::Nal;
        nal.k_iters = 0;
        let (a, _) = train(&net0, &ds, &noise).unwrap();
        let (b, _) = train(&net0, &ds, &nal).unwrap();
        assert_eq!(params_bits(&a), params_bits(&b));
    }

    #[test]
    fn training_is_reproducible() {
        let ds = make_blobs(60, 2, 3, 4.0, 8).unwrap();
        let net0 = blob_net(4);
        let mut ts = TrainSpec::defaults(Method::Nal, 13);
        ts.epochs = 2;
        ts.eta2 = 0.1;
        ts.batch_size = 16;
        ts.k_iters = 2;
        ts.noise = NoiseSpec { sigma: 0.2, r: 2, seed: 13 };
        let (a, _) = train(&net0, &ds, &ts).unwrap();
        let (b, _) = train(&net0, &ds, &ts).unwrap();
        assert_eq!(params_bits(&a), params_bits(&b));
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let ds = make_blobs(60, 2, 3, 4.0, 9).unwrap();
        let net0 = blob_net(5);
        let mut ts = TrainSpec::defaults(Method::Natural, 15);
        ts.epochs = 3;
        ts.eta2 = 1e300;
        ts.batch_size = 16;
        match train(&net0, &ds, &ts) {
            Err(TrainError::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn every_method_reduces_training_objective_on_blobs() {
        let ds = make_blobs(120, 2, 3, 4.0, 10).unwrap();
        for (i, method) in [Method::Natural, Method::Noise, Method::PgdAt, Method::Wrm, Method::Nal]
            .into_iter()
            .enumerate()
        {
            let net0 = blob_net(20 + i as u64);
            let mut ts = TrainSpec::defaults(method, 100 + i as u64);
            ts.epochs = 8;
            ts.eta2 = 0.2;
            ts.batch_size = 20;
            ts.k_iters = 2;
            ts.eta1 = 0.1;
            ts.gamma = 1.5;
            ts.noise = NoiseSpec { sigma: 0.2, r: 2, seed: 200 + i as u64 };
            ts.attack_eps = 0.1;
            ts.attack_iters = 5;
            let (_, hist) = train(&net0, &ds, &ts).unwrap();
            assert_eq!(hist.epochs.len(), 8);
            let first = hist.epochs[0].surrogate_loss;
            let last = hist.epochs[7].surrogate_loss;
            assert!(
                last < first,
                "{}: objective rose {first} -> {last}",
                method.name()
            );
        }
    }

    #[test]
    fn evaluate_perfect_net_on_separable_blobs() {
        let ds = make_blobs(90, 2, 3, 50.0, 11).unwrap();
        let cents = crate::data::blob_centroids(2, 3).unwrap();
        let d = 2;
        let mut w = Vec::new();
        let mut b = Vec::new();
        for cent in &cents {
            w.extend_from_slice(cent);
            b.push(-0.5 * cent.iter().map(|v| v * v).sum::<f64>());
        }
        let net = Network {
            layers: vec![LayerSpec { in_dim: d, out_dim: 3, activation: Activation::None }],
            weights: vec![Tensor::from_vec(&[3, d], w).unwrap()],
            biases: vec![Tensor::from_vec(&[3], b).unwrap()],
            num_classes: 3,
        };
        let report = evaluate(&net, &ds, None, None).unwrap();
        assert_eq!(report.clean_acc, 1.0);
        assert!(report.robust_acc.is_none());
    }

    #[test]
    fn robust_accuracy_never_exceeds_clean_accuracy() {
        let ds = make_blobs(60, 2, 3, 4.0, 12).unwrap();
        for seed in 0..3 {
            let net = blob_net(seed);
            let attack = AttackSpec::new(0.2, 8).unwrap();
            let report = evaluate(&net, &ds, Some(&attack), None).unwrap();
            let robust = report.robust_acc.unwrap();
            assert!(robust <= report.clean_acc);
        }
    }

    #[test]
    fn natural_training_separates_blobs() {
        let ds = make_blobs(240, 2, 3, 4.0, 13).unwrap();
        let net0 = blob_net(6);
        let mut ts = TrainSpec::defaults(Method::Natural, 17);
        ts.epochs = 50;
        ts.eta2 = 0.5;
        ts.batch_size = 32;
        let (net, _) = train(&net0, &ds, &ts).unwrap();
        let report = evaluate(&net, &ds, None, None).unwrap();
        assert!(report.clean_acc >= 0.95, "clean accuracy {}", report.clean_acc);
    }

    #[test]
    fn noisy_ascent_training_beats_natural_robustness_on_blobs() {
        // Inner-step size 0.02 keeps ascent displacement well inside the
        // inter-centroid gap (0.43 for three blobs on the radius-0.25 circle);
        // larger steps let the ascent scatter training points across class
        // boundaries and clean accuracy collapses.
        let ds = make_blobs(240, 2, 3, 6.0, 14).unwrap();
        let attack = AttackSpec::new(0.25, 20).unwrap();

        let net0 = blob_net(7);
        let mut nat = TrainSpec::defaults(Method::Natural, 19);
        nat.epochs = 50;
        nat.eta2 = 0.5;
        nat.batch_size = 32;
        let (nat_net, _) = train(&net0, &ds, &nat).unwrap();
        let nat_report = evaluate(&nat_net, &ds, Some(&attack), None).unwrap();

        let mut nal = TrainSpec::defaults(Method::Nal, 19);
        nal.epochs = 50;
        nal.eta2 = 0.5;
        nal.batch_size = 32;
        nal.gamma = 1.5;
        nal.eta1 = 0.02;
        nal.k_iters = 4;
        nal.noise = NoiseSpec { sigma: 0.25, r: 4, seed: 19 };
        let (nal_net, _) = train(&net0, &ds, &nal).unwrap();
        let nal_report = evaluate(&nal_net, &ds, Some(&attack), None).unwrap();

        assert!(nal_report.clean_acc >= 0.90, "nal clean {}", nal_report.clean_acc);
        assert!(
            nal_report.robust_acc.unwrap() > nat_report.robust_acc.unwrap(),
            "nal robust {} vs natural robust {}",
            nal_report.robust_acc.unwrap(),
            nat_report.robust_acc.unwrap()
        );
    }

    #[test]
    fn manifest_echoes_spec_and_data_fingerprint() {
        let ds = make_blobs(30, 2, 3, 4.0, 15).unwrap();
        let net0 = blob_net(8);
        let mut ts = TrainSpec::defaults(Method::Natural, 21);
        ts.epochs = 1;
        ts.eta2 = 0.1;
        let (net, hist) = train(&net0, &ds, &ts).unwrap();
        let manifest = build_manifest(&ts, &ds, &net, &hist);
        let json = serde_json::to_string_pretty(&manifest).unwrap();
        assert!(json.contains("train-run/v1"));
        assert!(json.contains("natural"));
        assert!(json.contains(&format!("{:016x}", ds.checksum())));
        assert!(json.contains("xoshiro256++"));
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["history"]["epochs"].as_array().unwrap().len(), 1);
    }
}
