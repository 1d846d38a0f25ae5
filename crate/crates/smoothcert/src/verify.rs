//! Self-verification harness: every mathematical property the library
//! relies on, checked against independent brute-force oracles and exact
//! degeneracies. Each check is a pure function of its parameters, returns a
//! structured outcome instead of panicking, and is shared by the `verify`
//! command and the acceptance suite (which calls the same functions at
//! their full advertised sizes).

use std::time::Instant;

use crate::adversary::{
    inner_maximize_batch, pgd_attack_batch, AttackSpec, CeObjective, CostMode, SurrogateSpec,
    ToyObjective,
};
use crate::bound::matched_cost_check;
use crate::certifier::{certified_radius, clopper_pearson_lower, inv_phi};
use crate::data::make_blobs;
use crate::nn::{
    backward_ce, forward, init_network, loss_ce, Activation, LayerSpec, Network,
};
use crate::oracles::{
    binomial_lower_brute, finite_diff_hessian, grid_maximize, max_eigenvalue_sym2,
    normal_quantile_brute, quadrature_smoothed, quadrature_smoothed_map, ToyLoss,
};
use crate::rng::{Purpose, RngStream};
use crate::smoothing::NoiseSpec;
use crate::tensor::{squared_distance, Tensor};
use crate::trainers::{train, Method, TrainSpec};

/// Result of one verification check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Measured quantities (worst ratios, max errors, counts) or the error
    /// that stopped the check.
    pub detail: String,
    pub seconds: f64,
}

/// Verification depth: `Quick` runs reduced instance counts for a
/// sub-minute smoke pass; `Full` runs every check at its advertised size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl Level {
    pub fn parse(s: &str) -> Option<Level> {
        match s {
            "quick" => Some(Level::Quick),
            "full" => Some(Level::Full),
            _ => None,
        }
    }
}

fn run_check(
    name: &'static str,
    body: impl FnOnce() -> Result<String, String>,
) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckOutcome { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Run every check at the given level. Deterministic: all randomness is
/// internally seeded.
pub fn run_level(level: Level) -> Vec<CheckOutcome> {
    match level {
        Level::Quick => vec![
            check_gradient_fidelity(5, 1e-4),
            check_smoothed_gradient_lipschitz(100, &[0.5, 1.0]),
            check_penalized_strong_concavity(10),
            check_averaged_vs_pointwise_ordering(10, 3),
            check_matched_cost_seeds(5),
            check_ascent_vs_grid_oracle(5, 0.05),
            check_certification_numerics(200),
            check_bitwise_degeneracies(),
        ],
        Level::Full => vec![
            check_gradient_fidelity(20, 1e-4),
            check_smoothed_gradient_lipschitz(500, &[0.5, 1.0]),
            check_penalized_strong_concavity(50),
            check_averaged_vs_pointwise_ordering(35, 15),
            check_matched_cost_seeds(20),
            check_ascent_vs_grid_oracle(50, 0.05),
            check_certification_numerics(1000),
            check_bitwise_degeneracies(),
        ],
    }
}

// ---------------------------------------------------------------------------
// Gradient fidelity: analytic backprop vs central finite differences.
// ---------------------------------------------------------------------------

/// Analytic parameter and input gradients against central finite
/// differences on `n_nets` random small networks; the max relative error
/// over all probes must stay at or below `tol`.
pub fn check_gradient_fidelity(n_nets: usize, tol: f64) -> CheckOutcome {
    run_check("gradient-fidelity", move || {
        let mut worst: f64 = 0.0;
        for net_id in 0..n_nets as u64 {
            let mut rng = RngStream::substream(90, Purpose::WeightInit, &[net_id]);
            let d_in = 2 + (rng.next_u64() % 3) as usize; // 2..4
            let hidden = 3 + (rng.next_u64() % 4) as usize; // 3..6
            let classes = 2 + (rng.next_u64() % 2) as usize; // 2..3
            let net = init_network(
                &[
                    LayerSpec { in_dim: d_in, out_dim: hidden, activation: Activation::Elu },
                    LayerSpec { in_dim: hidden, out_dim: classes, activation: Activation::None },
                ],
                &mut rng,
            )
            .map_err(|e| e.to_string())?;
            let n_rows = 3;
            let mut xs = vec![0.0; n_rows * d_in];
            for v in xs.iter_mut() {
                *v = rng.normal() * 0.8;
            }
            let x = Tensor::from_vec(&[n_rows, d_in], xs).map_err(|e| e.to_string())?;
            let labels: Vec<usize> =
                (0..n_rows).map(|_| (rng.next_u64() % classes as u64) as usize).collect();

            let (_, trace) = forward(&net, &x).map_err(|e| e.to_string())?;
            let grads = backward_ce(&net, &trace, &labels).map_err(|e| e.to_string())?;

            let loss_of = |candidate: &Network, input: &Tensor| -> Result<f64, String> {
                let (logits, _) = forward(candidate, input).map_err(|e| e.to_string())?;
                loss_ce(&logits, &labels).map_err(|e| e.to_string())
            };
            let h = 1e-5;

            // Parameter gradients, probing every weight and bias.
            for layer in 0..net.weights.len() {
                for idx in 0..net.weights[layer].len() {
                    let mut plus = net.clone();
                    plus.weights[layer].data_mut()[idx] += h;
                    let mut minus = net.clone();
                    minus.weights[layer].data_mut()[idx] -= h;
                    let fd = (loss_of(&plus, &x)? - loss_of(&minus, &x)?) / (2.0 * h);
                    let an = grads.grad_w[layer].data()[idx];
                    worst = worst.max(rel_err(an, fd));
                }
                for idx in 0..net.biases[layer].len() {
                    let mut plus = net.clone();
                    plus.biases[layer].data_mut()[idx] += h;
                    let mut minus = net.clone();
                    minus.biases[layer].data_mut()[idx] -= h;
                    let fd = (loss_of(&plus, &x)? - loss_of(&minus, &x)?) / (2.0 * h);
                    let an = grads.grad_b[layer].data()[idx];
                    worst = worst.max(rel_err(an, fd));
                }
            }

            // Input gradients via the attack objective's gradient path.
            let obj = CeObjective(&net);
            use crate::adversary::BatchObjective;
            let (_, gx) = obj.loss_grad_batch(&x, &labels).map_err(|e| e.to_string())?;
            for row in 0..n_rows {
                for col in 0..d_in {
                    let mut plus = x.clone();
                    plus.row_mut(row)[col] += h;
                    let mut minus = x.clone();
                    minus.row_mut(row)[col] -= h;
                    let fd = (loss_of(&net, &plus)? - loss_of(&net, &minus)?) / (2.0 * h);
                    // loss_grad_batch carries per-row loss gradients; the
                    // finite difference of the mean loss picks up 1/n.
                    let an = gx.row(row)[col] / n_rows as f64;
                    worst = worst.max(rel_err(an, fd));
                }
            }
        }
        if worst <= tol {
            Ok(format!("max relative gradient error {worst:.3e} <= {tol:.0e} on {n_nets} nets"))
        } else {
            Err(format!("max relative gradient error {worst:.3e} exceeds {tol:.0e}"))
        }
    })
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

// ---------------------------------------------------------------------------
// Smoothed-gradient Lipschitz bound.
// ---------------------------------------------------------------------------

/// The gradient of the noise-averaged bounded loss (values in [0, M]) is
/// Lipschitz with constant at most 2M/sigma^2. Measured over `pairs` random
/// point pairs per sigma with quadrature gradients (d = 1, M = 1); zero
/// violations allowed.
pub fn check_smoothed_gradient_lipschitz(pairs: usize, sigmas: &[f64]) -> CheckOutcome {
    let sigmas = sigmas.to_vec();
    run_check("smoothed-gradient-lipschitz", move || {
        let m = 1.0;
        let toy = ToyLoss::BoundedBump { m, center: vec![0.2], scale: 0.35 };
        let mut worst_frac: f64 = 0.0;
        for (si, &sigma) in sigmas.iter().enumerate() {
            let bound = 2.0 * m / (sigma * sigma);
            let grad_at = |x: f64| -> Result<f64, String> {
                let g = quadrature_smoothed_map(
                    |p, out| out[0] = toy.grad(p)[0],
                    1,
                    &[x],
                    sigma,
                    60,
                )
                .map_err(|e| e.to_string())?;
                Ok(g[0])
            };
            let mut rng = RngStream::substream(91, Purpose::Check, &[si as u64]);
            for _ in 0..pairs {
                let x1 = rng.normal() * 1.0;
                let mut x2 = rng.normal() * 1.0;
                if (x1 - x2).abs() < 1e-4 {
                    x2 += 0.5;
                }
                let ratio = (grad_at(x1)? - grad_at(x2)?).abs() / (x1 - x2).abs();
                worst_frac = worst_frac.max(ratio / bound);
                if ratio > bound * (1.0 + 1e-9) {
                    return Err(format!(
                        "Lipschitz ratio {ratio} exceeds 2M/sigma^2 = {bound} at sigma {sigma}"
                    ));
                }
            }
        }
        Ok(format!(
            "0 violations over {} pairs; worst ratio/bound = {worst_frac:.3}",
            pairs * sigmas.len()
        ))
    })
}

// ---------------------------------------------------------------------------
// Strong concavity of the penalized averaged objective.
// ---------------------------------------------------------------------------

/// With gamma = 2M/sigma^2 + 1 the finite-difference Hessian of
/// E_Z[loss(x+z)] - gamma*|x-x0|^2 must have max eigenvalue <= -1 + 0.05 at
/// `points` random probe points (half d=1, half d=2).
pub fn check_penalized_strong_concavity(points: usize) -> CheckOutcome {
    run_check("penalized-strong-concavity", move || {
        let (m, sigma) = (1.0, 0.5);
        let gamma = 2.0 * m / (sigma * sigma) + 1.0;
        let h = 1e-3;
        let mut worst: f64 = f64::NEG_INFINITY;
        let mut rng = RngStream::substream(92, Purpose::Check, &[0]);
        for i in 0..points {
            let d = if i % 2 == 0 { 1 } else { 2 };
            let center: Vec<f64> = (0..d).map(|_| rng.normal() * 0.5).collect();
            let scale = 0.3 + 0.4 * rng.uniform();
            let toy = ToyLoss::BoundedBump { m, center, scale };
            let x0: Vec<f64> = (0..d).map(|_| rng.normal() * 0.5).collect();
            let probe: Vec<f64> = x0.iter().map(|c| c + rng.normal() * 0.4).collect();
            let order = if d == 1 { 64 } else { 48 };
            let g = |x: &[f64]| {
                quadrature_smoothed(|p| toy.eval(p), x, sigma, order).unwrap()
                    - gamma * squared_distance(x, &x0)
            };
            let hess = finite_diff_hessian(&g, &probe, h).map_err(|e| e.to_string())?;
            let eig = max_eigenvalue_sym2(&hess, d).map_err(|e| e.to_string())?;
            worst = worst.max(eig);
            if eig > -1.0 + 0.05 {
                return Err(format!(
                    "max Hessian eigenvalue {eig} above -0.95 at probe {probe:?} (d={d})"
                ));
            }
        }
        Ok(format!("max eigenvalue over {points} probes = {worst:.3} <= -0.95"))
    })
}

// ---------------------------------------------------------------------------
// Averaged-vs-pointwise surrogate ordering.
// ---------------------------------------------------------------------------

/// The noise-averaged surrogate with noise-inclusive transport cost never
/// exceeds the pointwise (noiseless) surrogate: for each instance,
/// sup_x E_Z[l(x+z)] - gamma*(|x-x0|^2 + d*sigma^2) <= sup_u l(u) -
/// gamma*|u-x0|^2, both sides evaluated by grid search with quadrature
/// smoothing. Zero violations allowed.
pub fn check_averaged_vs_pointwise_ordering(n_1d: usize, n_2d: usize) -> CheckOutcome {
    run_check("averaged-vs-pointwise-ordering", move || {
        let (m, sigma) = (1.0, 0.5);
        let gamma = 2.0 * m / (sigma * sigma);
        let mut rng = RngStream::substream(93, Purpose::Check, &[0]);
        let mut min_gap = f64::INFINITY;
        let total = n_1d + n_2d;
        for i in 0..total {
            let d = if i < n_1d { 1 } else { 2 };
            let center: Vec<f64> = (0..d).map(|_| rng.normal() * 0.4).collect();
            let scale = 0.3 + 0.6 * rng.uniform();
            let toy = ToyLoss::BoundedBump { m, center: center.clone(), scale };
            let x0: Vec<f64> = center.iter().map(|c| c + rng.normal() * 0.5).collect();
            let order = if d == 1 { 40 } else { 20 };
            let smoothed_obj = |x: &[f64]| {
                quadrature_smoothed(|p| toy.eval(p), x, sigma, order).unwrap()
                    - gamma * (squared_distance(x, &x0) + d as f64 * sigma * sigma)
            };
            let plain_obj = |x: &[f64]| toy.eval(x) - gamma * squared_distance(x, &x0);
            let (_, val_s) =
                grid_maximize(&smoothed_obj, &x0, 1.2, 100).map_err(|e| e.to_string())?;
            let (_, val_p) =
                grid_maximize(&plain_obj, &x0, 1.2, 100).map_err(|e| e.to_string())?;
            let gap = val_p - val_s;
            min_gap = min_gap.min(gap);
            if val_s > val_p + 1e-6 {
                return Err(format!(
                    "averaged surrogate {val_s} exceeds pointwise {val_p} (d={d}, \
                     scale {scale:.3})"
                ));
            }
        }
        Ok(format!("0 violations over {total} instances; min gap {min_gap:.3}"))
    })
}

// ---------------------------------------------------------------------------
// Matched-cost noisy-vs-noiseless attack comparison.
// ---------------------------------------------------------------------------

/// The strongest noisy attack never beats the strongest noiseless attack at
/// equal measured transport cost, on the bounded toy over blob anchors;
/// must hold for every seed in 0..seeds.
pub fn check_matched_cost_seeds(seeds: u64) -> CheckOutcome {
    run_check("matched-cost-comparison", move || {
        let toy = ToyLoss::BoundedBump { m: 1.0, center: vec![0.5, 0.5], scale: 0.7 };
        let obj = ToyObjective(&toy);
        let ds = make_blobs(12, 2, 3, 6.0, 19).map_err(|e| e.to_string())?;
        let labels = vec![0usize; 12];
        for seed in 0..seeds {
            let ns = NoiseSpec::new(0.1, 60, 1000 + seed).map_err(|e| e.to_string())?;
            let rep = matched_cost_check(&obj, &ds.inputs, &labels, 0.8, 20, &ns)
                .map_err(|e| format!("seed {seed}: {e}"))?;
            if !rep.holds {
                return Err(format!(
                    "seed {seed}: noisy loss {} above noiseless loss {} + 3se ({})",
                    rep.loss_noisy, rep.loss_clean, rep.loss_noisy_se
                ));
            }
        }
        Ok(format!("holds on {seeds}/{seeds} seeds"))
    })
}

// ---------------------------------------------------------------------------
// Inner ascent vs grid oracle.
// ---------------------------------------------------------------------------

/// The Monte-Carlo inner maximizer's surrogate value lands within
/// `rel_tol` relative of an exhaustive grid search over the
/// quadrature-smoothed objective, on random d=2 instances with the penalty
/// above the concavity threshold (single basin, so both must find it).
pub fn check_ascent_vs_grid_oracle(instances: usize, rel_tol: f64) -> CheckOutcome {
    run_check("ascent-vs-grid-oracle", move || {
        let (m, sigma) = (1.0, 0.5);
        let gamma = 1.2 * 2.0 * m / (sigma * sigma);
        let mut ss =
            SurrogateSpec::new(gamma, 40, 0.5 / gamma).map_err(|e| e.to_string())?;
        ss.cost_mode = CostMode::Clean;
        let mut rng = RngStream::substream(94, Purpose::Check, &[0]);
        let mut worst_rel: f64 = 0.0;
        for i in 0..instances {
            let center: Vec<f64> = (0..2).map(|_| rng.normal() * 0.4).collect();
            let scale = 0.5 + 0.4 * rng.uniform();
            let toy = ToyLoss::BoundedBump { m, center: center.clone(), scale };
            let obj = ToyObjective(&toy);
            let x0: Vec<f64> =
                center.iter().map(|c| c + rng.normal() * 0.25 * scale).collect();
            let x0s = Tensor::from_vec(&[1, 2], x0.clone()).map_err(|e| e.to_string())?;
            // Draw count chosen so Monte-Carlo error (~sd/sqrt(r) ~ 0.004)
            // sits well inside the relative tolerance of ~0.016.
            let ns = NoiseSpec::new(sigma, 4000, 7000 + i as u64).map_err(|e| e.to_string())?;
            let res = inner_maximize_batch(&obj, &x0s, &[0], &ss, &ns, &[0])
                .map_err(|e| e.to_string())?;
            let phi = res[0].phi_estimate;

            let oracle_obj = |x: &[f64]| {
                quadrature_smoothed(|p| toy.eval(p), x, sigma, 20).unwrap()
                    - gamma * squared_distance(x, &x0)
            };
            let (arg, oracle) =
                grid_maximize(&oracle_obj, &x0, 0.8, 100).map_err(|e| e.to_string())?;
            for (a, o) in arg.iter().zip(&x0) {
                if (a - o).abs() > 0.75 {
                    return Err(format!("oracle argmax on the search-box edge at {arg:?}"));
                }
            }
            let rel = (phi - oracle).abs() / oracle.abs().max(1e-9);
            worst_rel = worst_rel.max(rel);
            if rel > rel_tol {
                return Err(format!(
                    "instance {i}: ascent {phi} vs oracle {oracle} (rel {rel:.4} > {rel_tol})"
                ));
            }
        }
        Ok(format!("worst relative gap {worst_rel:.4} <= {rel_tol} over {instances} instances"))
    })
}

// ---------------------------------------------------------------------------
// Certification numerics.
// ---------------------------------------------------------------------------

/// Exact binomial lower bounds vs the brute-force oracle for all k <= n <=
/// 50 at alpha in {0.05, 0.001} (tolerance 1e-9); the normal quantile vs
/// the bisection oracle at `quantile_probes` probabilities (1e-9); and the
/// canonical radius example to 1e-6.
pub fn check_certification_numerics(quantile_probes: usize) -> CheckOutcome {
    run_check("binomial-bound-and-quantile-numerics", move || {
        let mut worst_cp: f64 = 0.0;
        for n in 1..=50usize {
            for k in 0..=n {
                for &alpha in &[0.05, 0.001] {
                    let fast = clopper_pearson_lower(k, n, alpha).map_err(|e| e.to_string())?;
                    let brute = binomial_lower_brute(k, n, alpha).map_err(|e| e.to_string())?;
                    let diff = (fast - brute).abs();
                    worst_cp = worst_cp.max(diff);
                    if diff > 1e-9 {
                        return Err(format!(
                            "binomial bound mismatch at k={k} n={n} alpha={alpha}: \
                             {fast} vs {brute} (diff {diff:.2e})"
                        ));
                    }
                }
            }
        }
        let mut worst_q: f64 = 0.0;
        for i in 1..=quantile_probes {
            let p = i as f64 / (quantile_probes + 1) as f64;
            let fast = inv_phi(p).map_err(|e| e.to_string())?;
            let brute = normal_quantile_brute(p).map_err(|e| e.to_string())?;
            let diff = (fast - brute).abs();
            worst_q = worst_q.max(diff);
            if diff > 1e-9 {
                return Err(format!(
                    "quantile mismatch at p={p}: {fast} vs {brute} (diff {diff:.2e})"
                ));
            }
        }
        let r = certified_radius(0.999, 0.001, 0.1).map_err(|e| e.to_string())?;
        if (r - 0.3090232).abs() > 1e-6 {
            return Err(format!("radius example {r} differs from 0.3090232 by > 1e-6"));
        }
        Ok(format!(
            "binomial bounds exact to {worst_cp:.2e} (all k<=n<=50, two alphas); \
             quantile to {worst_q:.2e} at {quantile_probes} probes; radius example ok"
        ))
    })
}

// ---------------------------------------------------------------------------
// Bitwise degeneracies.
// ---------------------------------------------------------------------------

fn params_bits(net: &Network) -> Vec<u64> {
    net.weights
        .iter()
        .chain(&net.biases)
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

/// Exact reductions: noisy-ascent training with sigma=0, r=1 is bitwise the
/// noiseless ascent trainer; with K=0 and sigma=0 it is bitwise natural
/// training; a vanishing-radius attack returns the anchors (displacement at
/// most epsilon).
pub fn check_bitwise_degeneracies() -> CheckOutcome {
    run_check("bitwise-degeneracies", move || {
        let ds = make_blobs(60, 2, 3, 6.0, 31).map_err(|e| e.to_string())?;
        let net0 = init_network(
            &[
                LayerSpec { in_dim: 2, out_dim: 16, activation: Activation::Elu },
                LayerSpec { in_dim: 16, out_dim: 3, activation: Activation::None },
            ],
            &mut RngStream::substream(17, Purpose::WeightInit, &[0]),
        )
        .map_err(|e| e.to_string())?;

        let mut base = TrainSpec::defaults(Method::Nal, 77);
        base.epochs = 4;
        base.eta2 = 0.3;
        base.batch_size = 20;
        base.gamma = 1.5;
        base.k_iters = 3;
        base.eta1 = 0.2;

        // sigma = 0, r = 1: the noise path must vanish identically.
        let mut nal0 = base;
        nal0.noise = NoiseSpec::new(0.0, 1, 77).map_err(|e| e.to_string())?;
        let mut wrm = nal0;
        wrm.method = Method::Wrm;
        let (net_a, _) = train(&net0, &ds, &nal0).map_err(|e| e.to_string())?;
        let (net_b, _) = train(&net0, &ds, &wrm).map_err(|e| e.to_string())?;
        if params_bits(&net_a) != params_bits(&net_b) {
            return Err("sigma=0, r=1 noisy-ascent training differs from the noiseless \
                        ascent trainer"
                .into());
        }

        // K = 0, sigma = 0: no inner ascent, no noise — natural training.
        let mut nal_k0 = nal0;
        nal_k0.k_iters = 0;
        let mut natural = nal_k0;
        natural.method = Method::Natural;
        let (net_c, _) = train(&net0, &ds, &nal_k0).map_err(|e| e.to_string())?;
        let (net_d, _) = train(&net0, &ds, &natural).map_err(|e| e.to_string())?;
        if params_bits(&net_c) != params_bits(&net_d) {
            return Err("K=0, sigma=0 noisy-ascent training differs from natural training"
                .into());
        }

        // Vanishing attack radius: the crafted points collapse onto the
        // anchors (projection caps every step at epsilon).
        let eps = 1e-12;
        let spec = AttackSpec::new(eps, 20).map_err(|e| e.to_string())?;
        let (net_e, _) = {
            let mut ts = TrainSpec::defaults(Method::Natural, 5);
            ts.epochs = 3;
            ts.eta2 = 0.3;
            ts.batch_size = 20;
            let r = train(&net0, &ds, &ts).map_err(|e| e.to_string())?;
            r
        };
        let adv = pgd_attack_batch(&CeObjective(&net_e), &ds.inputs, &ds.labels, &spec)
            .map_err(|e| e.to_string())?;
        for i in 0..ds.len() {
            let dist = squared_distance(adv.row(i), ds.inputs.row(i)).sqrt();
            // The ball projection reconstructs anchor + delta at the
            // anchor's magnitude, so the displacement carries absolute
            // rounding of order ulp(|anchor|) on top of epsilon.
            if dist > eps + 1e-14 {
                return Err(format!(
                    "attack with radius {eps} displaced row {i} by {dist}"
                ));
            }
        }
        Ok("noise-free reductions bitwise; vanishing-radius attack stays at anchors".into())
    })
}
