//! Distributional-robustness certificates for trained models.
//!
//! For a penalty weight `gamma`, the surrogate value of one anchor point is
//! the (approximately) maximal penalized objective `phi = sup_x averaged
//! loss - gamma * cost`. Averaged over a dataset, it yields the certificate
//! line `bound(rho) = gamma * rho + mean_phi`, which upper-bounds the
//! worst achievable expected loss at every transport budget `rho`. This
//! module evaluates that line, the empirical worst-case point
//! `(rho_test, worst_case_loss)` reached by the inner maximizer, the
//! equivalent attack radius `epsilon = sqrt(rho_test)`, and the
//! noisy-vs-noiseless comparison check at matched transport cost.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{
    inner_maximize_batch, pgd_attack_batch, AdvError, AttackSpec, BatchObjective, CeObjective,
    CostMode, SurrogateSpec,
};
use crate::data::Dataset;
use crate::nn::Network;
use crate::rng::Purpose;
use crate::smoothing::{mean_and_se, NoiseSpec, SmoothError};
use crate::tensor::{l2_norm_slice, squared_distance, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("adversary error: {0}")]
    Adv(#[from] AdvError),
    #[error("smoothing error: {0}")]
    Smooth(#[from] SmoothError),
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("cost matching failed: {0}")]
    Matching(String),
    #[error(
        "certificate violated at gamma={gamma}: bound(rho_test) - worst_case_loss = {gap} \
         with allowed slack -{slack}"
    )]
    CertificateViolated { gamma: f64, gap: f64, slack: f64 },
}

/// Certificate line and worst-case point for one penalty weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub gamma: f64,
    /// Population mean of the per-anchor surrogate values.
    pub mean_phi: f64,
    /// Standard error of `mean_phi` over anchors.
    pub phi_se: f64,
    pub rho_grid: Vec<f64>,
    /// gamma * rho + mean_phi, entrywise over `rho_grid`.
    pub bound_values: Vec<f64>,
    /// Mean measured transport cost of the maximizers (fresh draws).
    pub rho_test: f64,
    /// Mean noise-averaged loss at the maximizers (same fresh draws).
    pub worst_case_loss: f64,
    /// sqrt(rho_test): the attack radius with the same expected cost.
    pub epsilon_equiv: f64,
    /// bound(rho_test) - worst_case_loss, as a per-anchor mean; the
    /// certificate inequality demands this be >= -3 * gap_se.
    pub gap_mean: f64,
    pub gap_se: f64,
}

/// Per-anchor evaluation of the maximizers found by the inner ascent:
/// surrogate values from the ascent itself, plus transport cost and
/// noise-averaged loss re-measured at the maximizer with fresh draws.
#[derive(Debug, Clone)]
pub struct PopulationEval {
    pub phis: Vec<f64>,
    pub costs: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Run the inner maximizer on every anchor and re-evaluate each maximizer
/// with `ns.r` fresh draws (purpose-separated from the ascent's draws).
pub fn eval_population<O: BatchObjective>(
    obj: &O,
    x0s: &Tensor,
    labels: &[usize],
    ss: &SurrogateSpec,
    ns: &NoiseSpec,
) -> Result<PopulationEval, BoundError> {
    let n = x0s.rows();
    if n == 0 {
        return Err(BoundError::Parameter("population is empty".into()));
    }
    let d = x0s.cols();
    let instances: Vec<u64> = (0..n as u64).collect();
    let results = inner_maximize_batch(obj, x0s, labels, ss, ns, &instances)?;

    let mut phis = Vec::with_capacity(n);
    let mut costs = Vec::with_capacity(n);
    let mut losses = Vec::with_capacity(n);
    for (i, res) in results.iter().enumerate() {
        let mut rng = ns.stream(Purpose::EvalNoise, instances[i], 0);
        let mut batch = ns.noise_matrix(d, &mut rng)?;
        let mut cost_sum = 0.0;
        for j in 0..ns.r {
            let row = batch.row_mut(j);
            for (slot, &v) in row.iter_mut().zip(&res.x_adv) {
                *slot += v;
            }
            cost_sum += squared_distance(batch.row(j), x0s.row(i));
        }
        let row_losses = obj.loss_batch(&batch, &vec![labels[i]; ns.r])?;
        phis.push(res.phi_estimate);
        costs.push(cost_sum / ns.r as f64);
        losses.push(row_losses.iter().sum::<f64>() / ns.r as f64);
    }
    Ok(PopulationEval { phis, costs, losses })
}

/// Population mean and standard error of the surrogate value.
pub fn surrogate_population(
    net: &Network,
    ds: &Dataset,
    ss: &SurrogateSpec,
    ns: &NoiseSpec,
) -> Result<(f64, f64), BoundError> {
    let obj = CeObjective(net);
    let pop = eval_population(&obj, &ds.inputs, &ds.labels, ss, ns)?;
    Ok(mean_and_se(&pop.phis))
}

/// Mean measured transport cost of the maximizers and the mean
/// noise-averaged loss there. The cost can never drop below the additive
/// noise floor d*sigma^2 beyond Monte-Carlo error, which is asserted.
pub fn rho_and_worst_case(
    net: &Network,
    ds: &Dataset,
    ss: &SurrogateSpec,
    ns: &NoiseSpec,
) -> Result<(f64, f64), BoundError> {
    let obj = CeObjective(net);
    let pop = eval_population(&obj, &ds.inputs, &ds.labels, ss, ns)?;
    let (rho_test, rho_se) = mean_and_se(&pop.costs);
    let (worst, _) = mean_and_se(&pop.losses);
    let floor = ds.dim() as f64 * ns.sigma * ns.sigma;
    assert!(
        rho_test >= floor - 3.0 * rho_se - 1e-12,
        "measured transport cost {rho_test} fell below the noise floor {floor} \
         (3 SE = {})",
        3.0 * rho_se
    );
    Ok((rho_test, worst))
}

/// Parameters for a family of certificate lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveSpec {
    pub gammas: Vec<f64>,
    pub k_iters: usize,
    /// Ascent step; None picks 0.5/gamma per curve.
    pub eta1: Option<f64>,
    pub cost_mode: CostMode,
    /// Evaluation grid; None spans [0, 2*rho_test] with 20 points per curve.
    pub rho_grid: Option<Vec<f64>>,
}

impl Default for CurveSpec {
    fn default() -> Self {
        CurveSpec {
            gammas: vec![0.25, 1.5, 3.0],
            k_iters: 4,
            eta1: None,
            cost_mode: CostMode::Noisy,
            rho_grid: None,
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Evaluate one certificate line per gamma. Each report carries the line,
/// the worst-case point, and the measured certificate gap; a gap below
/// -3 standard errors is returned as a `CertificateViolated` error.
pub fn certificate_curve(
    net: &Network,
    ds: &Dataset,
    cspec: &CurveSpec,
    ns: &NoiseSpec,
) -> Result<Vec<BoundReport>, BoundError> {
    if cspec.gammas.is_empty() {
        return Err(BoundError::Parameter("no gamma values".into()));
    }
    if let Some(grid) = &cspec.rho_grid {
        if grid.is_empty() || grid.windows(2).any(|w| w[0] > w[1]) {
            return Err(BoundError::Parameter("rho grid must be non-empty and ascending".into()));
        }
    }
    let obj = CeObjective(net);
    let mut reports = Vec::with_capacity(cspec.gammas.len());
    for &gamma in &cspec.gammas {
        let eta1 = match cspec.eta1 {
            Some(e) => e,
            None if gamma > 0.0 => 0.5 / gamma,
            None => {
                return Err(BoundError::Parameter(
                    "gamma = 0 needs an explicit ascent step".into(),
                ))
            }
        };
        let mut ss = SurrogateSpec::new(gamma, cspec.k_iters, eta1)?;
        ss.cost_mode = cspec.cost_mode;
        let pop = eval_population(&obj, &ds.inputs, &ds.labels, &ss, ns)?;
        let (mean_phi, phi_se) = mean_and_se(&pop.phis);
        let (rho_test, _) = mean_and_se(&pop.costs);
        let (worst, _) = mean_and_se(&pop.losses);
        // Certificate gap per anchor: gamma*cost + phi - loss.
        let gaps: Vec<f64> = (0..pop.phis.len())
            .map(|i| gamma * pop.costs[i] + pop.phis[i] - pop.losses[i])
            .collect();
        let (gap_mean, gap_se) = mean_and_se(&gaps);
        if gap_mean < -3.0 * gap_se - 1e-12 {
            return Err(BoundError::CertificateViolated {
                gamma,
                gap: gap_mean,
                slack: 3.0 * gap_se,
            });
        }
        let rho_grid = match &cspec.rho_grid {
            Some(g) => g.clone(),
            None => linspace(0.0, 2.0 * rho_test, 20),
        };
        let bound_values: Vec<f64> = rho_grid.iter().map(|&r| gamma * r + mean_phi).collect();
        reports.push(BoundReport {
            gamma,
            mean_phi,
            phi_se,
            rho_grid,
            bound_values,
            rho_test,
            worst_case_loss: worst,
            epsilon_equiv: rho_test.sqrt(),
            gap_mean,
            gap_se,
        });
    }
    Ok(reports)
}

/// Attack radius whose expected transport cost matches the maximizers found
/// with penalty `gamma` after `k_iters` ascent steps: sqrt of the mean
/// measured cost.
pub fn epsilon_equivalence_k(
    net: &Network,
    ds: &Dataset,
    gamma: f64,
    k_iters: usize,
    ns: &NoiseSpec,
) -> Result<f64, BoundError> {
    if !(gamma > 0.0) {
        return Err(BoundError::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    let ss = SurrogateSpec::new(gamma, k_iters, 0.5 / gamma)?;
    let obj = CeObjective(net);
    let pop = eval_population(&obj, &ds.inputs, &ds.labels, &ss, ns)?;
    let (rho, _) = mean_and_se(&pop.costs);
    Ok(rho.sqrt())
}

/// The standard protocol fixes 15 ascent iterations.
pub fn epsilon_equivalence(
    net: &Network,
    ds: &Dataset,
    gamma: f64,
    ns: &NoiseSpec,
) -> Result<f64, BoundError> {
    epsilon_equivalence_k(net, ds, gamma, 15, ns)
}

// ---------------------------------------------------------------------------
// Noisy-vs-noiseless comparison at matched transport cost.
// ---------------------------------------------------------------------------

/// Measured quantities of one matched-cost comparison.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MatchedCostReport {
    /// Ball radius found for the noisy attacker by cost matching.
    pub eps_noisy: f64,
    pub cost_clean: f64,
    pub cost_noisy: f64,
    pub loss_clean: f64,
    pub loss_noisy: f64,
    /// Standard error of `loss_noisy` over anchors.
    pub loss_noisy_se: f64,
    pub holds: bool,
}

/// Ball-projected ascent on the r-draw mean gradient — the noisy twin of
/// the plain projected attack, with identical step and projection order so
/// that sigma = 0, r = 1 reproduces it bitwise.
fn noisy_pgd_batch<O: BatchObjective>(
    obj: &O,
    x0s: &Tensor,
    labels: &[usize],
    epsilon: f64,
    k_pgd: usize,
    eta: f64,
    ns: &NoiseSpec,
) -> Result<Tensor, BoundError> {
    let n = x0s.rows();
    let d = x0s.cols();
    obj.check_labels(labels)?;
    let mut x = x0s.clone();
    if epsilon == 0.0 || k_pgd == 0 {
        return Ok(x);
    }
    let mut mean_grad = vec![0.0; d];
    for iter in 0..k_pgd {
        for i in 0..n {
            let mut rng = ns.stream(Purpose::AscentNoise, i as u64, iter as u64);
            let mut batch = ns.noise_matrix(d, &mut rng)?;
            for j in 0..ns.r {
                let row = batch.row_mut(j);
                for (slot, &v) in row.iter_mut().zip(x.row(i)) {
                    *slot += v;
                }
            }
            let (_, grads) = obj.loss_grad_batch(&batch, &vec![labels[i]; ns.r])?;
            mean_grad.iter_mut().for_each(|g| *g = 0.0);
            for j in 0..ns.r {
                for (acc, &g) in mean_grad.iter_mut().zip(grads.row(j)) {
                    *acc += g;
                }
            }
            let scale = 1.0 / ns.r as f64;
            mean_grad.iter_mut().for_each(|g| *g *= scale);

            let gnorm = l2_norm_slice(&mean_grad);
            if gnorm == 0.0 {
                continue;
            }
            let step = eta / gnorm;
            let xrow = x.row_mut(i);
            for (slot, &g) in xrow.iter_mut().zip(&mean_grad) {
                *slot += step * g;
            }
            let dist = squared_distance(x.row(i), x0s.row(i)).sqrt();
            if dist > epsilon {
                let shrink = epsilon / dist;
                let xrow = x.row_mut(i);
                for (slot, &anchor) in xrow.iter_mut().zip(x0s.row(i)) {
                    *slot = anchor + (*slot - anchor) * shrink;
                }
            }
        }
    }
    x.check_finite("noisy attack iterate")
        .map_err(|e| BoundError::Parameter(e.to_string()))?;
    Ok(x)
}

/// Noise-inclusive transport cost and noise-averaged loss of a set of attack
/// points, with fresh fixed draws per anchor (common random numbers, so the
/// measurement is stable across candidate radii during matching).
fn noisy_measurement<O: BatchObjective>(
    obj: &O,
    x0s: &Tensor,
    adv: &Tensor,
    labels: &[usize],
    ns: &NoiseSpec,
) -> Result<(f64, f64, f64), BoundError> {
    let n = x0s.rows();
    let d = x0s.cols();
    let mut costs = Vec::with_capacity(n);
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ns.stream(Purpose::EvalNoise, i as u64, 0);
        let mut batch = ns.noise_matrix(d, &mut rng)?;
        let mut cost_sum = 0.0;
        for j in 0..ns.r {
            let row = batch.row_mut(j);
            for (slot, &v) in row.iter_mut().zip(adv.row(i)) {
                *slot += v;
            }
            cost_sum += squared_distance(batch.row(j), x0s.row(i));
        }
        let row_losses = obj.loss_batch(&batch, &vec![labels[i]; ns.r])?;
        costs.push(cost_sum / ns.r as f64);
        losses.push(row_losses.iter().sum::<f64>() / ns.r as f64);
    }
    let (cost, _) = mean_and_se(&costs);
    let (loss, loss_se) = mean_and_se(&losses);
    Ok((cost, loss, loss_se))
}

/// Compare the strongest noisy attack against the strongest noiseless attack
/// at equal measured transport cost (noise included on the noisy side).
///
/// A zero budget skips matching: both sides sit at the anchors and the check
/// compares the noise-averaged loss against the clean loss directly. For a
/// positive budget, the noiseless side attacks a ball of that radius and the
/// noisy side's radius is found by bisection until its measured cost equals
/// the noiseless side's; the noise floor d*sigma^2 must stay below the target
/// cost or matching fails with a typed error.
pub fn matched_cost_check<O: BatchObjective>(
    obj: &O,
    x0s: &Tensor,
    labels: &[usize],
    attack_budget: f64,
    k_pgd: usize,
    ns: &NoiseSpec,
) -> Result<MatchedCostReport, BoundError> {
    if attack_budget < 0.0 || !attack_budget.is_finite() {
        return Err(BoundError::Parameter(format!("bad attack budget {attack_budget}")));
    }
    if attack_budget == 0.0 {
        let clean_losses = obj.loss_batch(x0s, labels)?;
        let (loss_clean, _) = mean_and_se(&clean_losses);
        let (cost_noisy, loss_noisy, se) = noisy_measurement(obj, x0s, x0s, labels, ns)?;
        return Ok(MatchedCostReport {
            eps_noisy: 0.0,
            cost_clean: 0.0,
            cost_noisy,
            loss_clean,
            loss_noisy,
            loss_noisy_se: se,
            holds: loss_noisy <= loss_clean + 3.0 * se,
        });
    }

    let spec = AttackSpec::new(attack_budget, k_pgd)?;
    let adv_clean = pgd_attack_batch(obj, x0s, labels, &spec)?;
    let n = x0s.rows();
    let clean_costs: Vec<f64> =
        (0..n).map(|i| squared_distance(adv_clean.row(i), x0s.row(i))).collect();
    let (cost_clean, _) = mean_and_se(&clean_costs);
    let clean_losses = obj.loss_batch(&adv_clean, labels)?;
    let (loss_clean, _) = mean_and_se(&clean_losses);

    // Bisection on the noisy attacker's ball radius until its measured
    // (noise-inclusive) cost matches the noiseless side.
    let measure = |radius: f64| -> Result<(f64, f64, f64, Tensor), BoundError> {
        let adv =
            noisy_pgd_batch(obj, x0s, labels, radius, k_pgd, 2.0 * radius / k_pgd as f64, ns)?;
        let (c, l, se) = noisy_measurement(obj, x0s, &adv, labels, ns)?;
        Ok((c, l, se, adv))
    };
    let (floor_cost, _, _, _) = measure(0.0)?;
    if floor_cost >= cost_clean {
        return Err(BoundError::Matching(format!(
            "noise floor cost {floor_cost} already exceeds the target {cost_clean}; \
             no ball radius can match (need attack_budget^2 > d*sigma^2)"
        )));
    }
    let mut hi = attack_budget.max(ns.sigma) * 2.0;
    let mut hi_cost = measure(hi)?.0;
    let mut grow = 0;
    while hi_cost < cost_clean {
        hi *= 2.0;
        hi_cost = measure(hi)?.0;
        grow += 1;
        if grow > 8 {
            return Err(BoundError::Matching(format!(
                "could not bracket the target cost {cost_clean} from above \
                 (reached radius {hi} with cost {hi_cost})"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if measure(mid)?.0 < cost_clean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let eps_noisy = 0.5 * (lo + hi);
    let (cost_noisy, loss_noisy, se, _) = measure(eps_noisy)?;
    Ok(MatchedCostReport {
        eps_noisy,
        cost_clean,
        cost_noisy,
        loss_clean,
        loss_noisy,
        loss_noisy_se: se,
        holds: loss_noisy <= loss_clean + 3.0 * se,
    })
}

/// Necessary-condition check on a network: does the strongest noisy attack
/// stay below the strongest noiseless attack at equal measured transport
/// cost (up to 3 Monte-Carlo standard errors)?
pub fn theorem1_check(
    net: &Network,
    ds: &Dataset,
    attack_budget: f64,
    ns: &NoiseSpec,
) -> Result<bool, BoundError> {
    let obj = CeObjective(net);
    let report = matched_cost_check(&obj, &ds.inputs, &ds.labels, attack_budget, 20, ns)?;
    Ok(report.holds)
}

/// Certificate-plot CSV: one row per (gamma, grid point), with the
/// worst-case anchor repeated per row. Shortest round-trip float
/// formatting keeps the bytes deterministic.
pub fn bound_reports_csv(reports: &[BoundReport]) -> String {
    let mut out = String::from("gamma,rho,bound,rho_test,worst_case_loss\n");
    for rep in reports {
        for (rho, b) in rep.rho_grid.iter().zip(&rep.bound_values) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                rep.gamma, rho, b, rep.rho_test, rep.worst_case_loss
            ));
        }
    }
    out
}
