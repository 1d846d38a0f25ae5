//! Monte-Carlo certification of noise-smoothed classifiers.
//!
//! Given a base network and a noise level `sigma`, the smoothed classifier
//! predicts the majority class under Gaussian input noise. This module
//! estimates that majority with a two-phase sampling procedure (selection,
//! then estimation), turns the estimation counts into exact binomial
//! confidence bounds, and converts the bounds into a certified l2 radius
//!
//! ```text
//!     R = sigma/2 * (inv_phi(pA_lower) - inv_phi(pB_upper))
//! ```
//!
//! within which the smoothed prediction provably cannot change (up to the
//! confidence level `alpha`). It also provides the certified-accuracy curve
//! over a radius grid, a per-point CSV report, and a loss-threshold check
//! that validates a certified point by bounding its smoothed loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::nn::Network;
use crate::rng::{Purpose, RngStream};
use crate::smoothing::{majority_class, smoothed_loss, smoothed_predict, NoiseSpec, SmoothError};

#[derive(Debug, Error)]
pub enum CertError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("smoothing error: {0}")]
    Smooth(#[from] SmoothError),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// How the two class-probability bounds are obtained from the counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertMode {
    /// Bound only the top class; the runner-up bound is its complement
    /// (pB_upper = 1 - pA_lower). Abstains whenever pA_lower <= 1/2.
    OneSided,
    /// Separate exact bounds on the top-two classes, with the failure
    /// probability split evenly between them.
    TwoClass,
}

impl CertMode {
    pub fn parse(s: &str) -> Result<Self, CertError> {
        match s {
            "one_sided" | "one-sided" => Ok(CertMode::OneSided),
            "two_class" | "two-class" => Ok(CertMode::TwoClass),
            other => Err(CertError::Parameter(format!(
                "unknown certification mode '{other}' (expected one_sided or two_class)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CertMode::OneSided => "one_sided",
            CertMode::TwoClass => "two_class",
        }
    }
}

/// Parameters of the certification procedure.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CertifySpec {
    /// Smoothing noise level (must be positive: without noise every
    /// non-abstaining radius would collapse to zero).
    pub sigma: f64,
    /// Selection samples used only to pick the candidate class.
    pub n0: usize,
    /// Estimation samples used for the confidence bounds.
    pub n: usize,
    /// One-sided failure probability of the whole procedure.
    pub alpha: f64,
    pub mode: CertMode,
}

impl CertifySpec {
    /// Defaults: n0 = 100, n = 1000, alpha = 0.001, one-sided.
    pub fn new(sigma: f64) -> Result<Self, CertError> {
        let cs = CertifySpec { sigma, n0: 100, n: 1000, alpha: 0.001, mode: CertMode::OneSided };
        cs.validate()?;
        Ok(cs)
    }

    pub fn validate(&self) -> Result<(), CertError> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(CertError::Parameter(format!(
                "sigma must be positive and finite, got {}",
                self.sigma
            )));
        }
        if self.n0 < 1 || self.n < 1 {
            return Err(CertError::Parameter(format!(
                "sample counts must be >= 1, got n0={} n={}",
                self.n0, self.n
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CertError::Parameter(format!(
                "alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Outcome of certifying a single input point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertResult {
    /// Candidate class from the selection phase.
    pub c_hat: usize,
    /// Lower confidence bound on the candidate's noise-vote probability.
    pub pa_lower: f64,
    /// Upper confidence bound on the strongest competitor's probability.
    pub pb_upper: f64,
    /// Certified l2 radius; zero when abstaining.
    pub radius: f64,
    /// True when the bounds cannot separate the candidate from the rest.
    pub abstain: bool,
}

// ---------------------------------------------------------------------------
// Standard-normal quantile and CDF.
// ---------------------------------------------------------------------------

/// Standard normal CDF, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile. Rational minimax approximation over three
/// regions (central, tail, far tail), then a single Newton correction on the
/// CDF; absolute error is far below the 1e-9 contract.
///
/// Upper-half inputs are mapped to the lower tail by exact symmetry
/// (1 - p is exactly representable for p >= 1/2), where the complementary
/// error function keeps full relative accuracy for the Newton step.
pub fn inv_phi(p: f64) -> Result<f64, CertError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CertError::Parameter(format!("quantile needs p in (0,1), got {p}")));
    }
    if p > 0.5 {
        return Ok(-inv_phi_lower(1.0 - p)?);
    }
    inv_phi_lower(p)
}

/// Quantile for p in (0, 1/2]: always a non-positive result.
fn inv_phi_lower(p: f64) -> Result<f64, CertError> {
    let q = p - 0.5;
    let x = if q.abs() <= 0.425 {
        // Central region: rational in r = 0.180625 - q^2.
        let r = 0.180625 - q * q;
        let num = q
            * (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
                + 6.726_577_092_700_870_1e4)
                * r
                + 4.592_195_393_154_987_15e4)
                * r
                + 1.373_169_376_550_946_11e4)
                * r
                + 1.971_590_950_306_551_3e3)
                * r
                + 1.331_416_678_917_843_8e2)
                * r
                + 3.387_132_872_796_366_608);
        let den = ((((((5.226_495_278_852_854_5e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        num / den
    } else {
        let r = (-p.ln()).sqrt();
        let v = if r <= 5.0 {
            // Tail region.
            let r = r - 1.6;
            let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
                + 2.417_807_251_774_506e-1)
                * r
                + 1.270_458_252_452_368_4)
                * r
                + 3.647_848_324_763_204_5)
                * r
                + 5.769_497_221_460_691)
                * r
                + 4.630_337_846_156_545)
                * r
                + 1.423_437_110_749_683_5;
            let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
                + 1.519_866_656_361_645_7e-2)
                * r
                + 1.481_039_764_274_800_8e-1)
                * r
                + 6.897_673_349_851e-1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_758_9)
                * r
                + 1.0;
            num / den
        } else {
            // Far tail.
            let r = r - 5.0;
            let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
                + 1.242_660_947_388_078_4e-3)
                * r
                + 2.653_218_952_657_612_4e-2)
                * r
                + 2.965_605_718_285_048_9e-1)
                * r
                + 1.784_826_539_917_291_3)
                * r
                + 5.463_784_911_164_114)
                * r
                + 6.657_904_643_501_103;
            let den = ((((((2.044_263_103_389_939_8e-15 * r + 1.421_511_758_316_446e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_133e-4)
                * r
                + 1.487_536_129_085_061_5e-2)
                * r
                + 1.369_298_809_227_358e-1)
                * r
                + 5.998_322_065_558_879e-1)
                * r
                + 1.0;
            num / den
        };
        -v
    };
    // One Newton step on the CDF sharpens the rational approximation.
    let pdf = normal_pdf(x);
    let refined = if pdf > 0.0 { x - (normal_cdf(x) - p) / pdf } else { x };
    if !refined.is_finite() {
        return Err(CertError::Numerical(format!("quantile at p={p} did not stay finite")));
    }
    Ok(refined)
}

// ---------------------------------------------------------------------------
// Exact binomial confidence bounds.
// ---------------------------------------------------------------------------

/// ln of the complete beta function.
fn ln_beta(a: f64, b: f64) -> f64 {
    libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b)
}

/// Continued-fraction core of the regularized incomplete beta (modified
/// Lentz), valid for x < (a+1)/(a+b+2).
fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64, CertError> {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(CertError::Numerical(format!(
        "incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})"
    )))
}

/// Regularized incomplete beta I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> Result<f64, CertError> {
    if !(a > 0.0 && b > 0.0) {
        return Err(CertError::Parameter(format!("beta shape parameters must be positive: {a}, {b}")));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x >= 1.0 {
        return Ok(1.0);
    }
    let bt = (a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b)).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(bt * beta_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - bt * beta_cf(b, a, 1.0 - x)? / b)
    }
}

/// Upper tail of the binomial: P(Bin(n, p) >= k).
fn binom_upper_tail(k: usize, n: usize, p: f64) -> Result<f64, CertError> {
    if k == 0 {
        return Ok(1.0);
    }
    // Identity: P(Bin(n,p) >= k) = I_p(k, n-k+1).
    reg_inc_beta(k as f64, (n - k) as f64 + 1.0, p)
}

/// Exact (Clopper-Pearson) one-sided lower confidence bound for a binomial
/// proportion: the largest p whose upper tail at k is still <= alpha,
/// located by bisection on the regularized incomplete beta.
pub fn clopper_pearson_lower(k: usize, n: usize, alpha: f64) -> Result<f64, CertError> {
    if n < 1 || k > n {
        return Err(CertError::Parameter(format!("need 0 <= k <= n with n >= 1, got k={k} n={n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CertError::Parameter(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if k == 0 {
        return Ok(0.0);
    }
    // binom_upper_tail(k, n, p) is continuous and increasing in p, from 0 at
    // p=0 to 1 at p=1; the bound solves tail(p) = alpha.
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if binom_upper_tail(k, n, mid)? < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Exact one-sided upper confidence bound, by tail symmetry:
/// an upper bound for k successes is one minus a lower bound for n-k failures.
pub fn clopper_pearson_upper(k: usize, n: usize, alpha: f64) -> Result<f64, CertError> {
    if n < 1 || k > n {
        return Err(CertError::Parameter(format!("need 0 <= k <= n with n >= 1, got k={k} n={n}")));
    }
    Ok(1.0 - clopper_pearson_lower(n - k, n, alpha)?)
}

// ---------------------------------------------------------------------------
// Certified radius.
// ---------------------------------------------------------------------------

/// Certified l2 radius sigma/2 * (inv_phi(pA) - inv_phi(pB)), floored at 0.
/// Computed as sigma * base so that radius(sigma) == sigma * radius(1)
/// holds exactly, not just approximately.
pub fn certified_radius(pa_lower: f64, pb_upper: f64, sigma: f64) -> Result<f64, CertError> {
    if !(pa_lower > 0.0 && pa_lower < 1.0 && pb_upper > 0.0 && pb_upper < 1.0) {
        return Err(CertError::Parameter(format!(
            "probabilities must lie in (0,1), got pA={pa_lower} pB={pb_upper}"
        )));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(CertError::Parameter(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let base = 0.5 * (inv_phi(pa_lower)? - inv_phi(pb_upper)?);
    Ok((sigma * base).max(0.0))
}

// ---------------------------------------------------------------------------
// Per-point certification.
// ---------------------------------------------------------------------------

/// One-sided decision rule: bound the top class, complement the runner-up,
/// abstain whenever the lower bound cannot clear 1/2.
fn one_sided_decision(
    k: usize,
    n: usize,
    alpha: f64,
    sigma: f64,
    c_hat: usize,
) -> Result<CertResult, CertError> {
    let pa = clopper_pearson_lower(k, n, alpha)?;
    let pb = 1.0 - pa;
    if pa <= 0.5 {
        return Ok(CertResult { c_hat, pa_lower: pa, pb_upper: pb, radius: 0.0, abstain: true });
    }
    let radius = certified_radius(pa, pb, sigma)?;
    Ok(CertResult { c_hat, pa_lower: pa, pb_upper: pb, radius, abstain: false })
}

/// Two-class decision rule: separate bounds on the top-two counts with the
/// failure probability split evenly; abstain when the bounds overlap.
fn two_class_decision(
    k_a: usize,
    k_b: usize,
    n: usize,
    alpha: f64,
    sigma: f64,
    c_hat: usize,
) -> Result<CertResult, CertError> {
    let half = 0.5 * alpha;
    let pa = clopper_pearson_lower(k_a, n, half)?;
    let pb = clopper_pearson_upper(k_b, n, half)?;
    if pa <= pb {
        return Ok(CertResult { c_hat, pa_lower: pa, pb_upper: pb, radius: 0.0, abstain: true });
    }
    let radius = certified_radius(pa, pb, sigma)?;
    Ok(CertResult { c_hat, pa_lower: pa, pb_upper: pb, radius, abstain: false })
}

/// Certify the smoothed prediction at one input point.
///
/// Phase one draws `n0` noisy predictions to select the candidate class
/// (ties to the lowest index); phase two draws `n` fresh predictions and
/// converts the candidate's count into confidence bounds per the mode. The
/// two phases use disjoint purpose-derived substreams seeded from a single
/// value drawn off the caller's stream, so results depend only on that
/// stream's state, never on evaluation order.
pub fn certify(
    net: &Network,
    x: &[f64],
    cs: &CertifySpec,
    rng: &mut RngStream,
) -> Result<CertResult, CertError> {
    cs.validate()?;
    if cs.mode == CertMode::TwoClass && net.num_classes < 2 {
        return Err(CertError::Parameter(
            "two-class certification needs at least two classes".into(),
        ));
    }
    let s0 = rng.next_u64();
    let mut sel_rng = RngStream::substream(s0, Purpose::CertifySelect, &[]);
    let mut est_rng = RngStream::substream(s0, Purpose::CertifyEstimate, &[]);

    let sel_counts = smoothed_predict(net, x, cs.sigma, cs.n0, &mut sel_rng)?;
    let c_hat = majority_class(&sel_counts);

    let counts = smoothed_predict(net, x, cs.sigma, cs.n, &mut est_rng)?;
    let k_a = counts[c_hat];
    match cs.mode {
        CertMode::OneSided => one_sided_decision(k_a, cs.n, cs.alpha, cs.sigma, c_hat),
        CertMode::TwoClass => {
            let mut c_b = if c_hat == 0 { 1 } else { 0 };
            for (c, &v) in counts.iter().enumerate() {
                if c != c_hat && v > counts[c_b] {
                    c_b = c;
                }
            }
            two_class_decision(k_a, counts[c_b], cs.n, cs.alpha, cs.sigma, c_hat)
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset-level certification, curve, and CSV report.
// ---------------------------------------------------------------------------

/// Per-point certification record, in dataset order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertRow {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub pa_lower: f64,
    pub pb_upper: f64,
    pub radius: f64,
    pub abstain: bool,
    /// Non-abstaining and predicting the true label.
    pub correct: bool,
}

/// Certify every point of a dataset. Each row gets its own substream keyed
/// by its dataset index, so the output is identical for any thread count.
pub fn certify_dataset(
    net: &Network,
    ds: &Dataset,
    cs: &CertifySpec,
    seed: u64,
    threads: usize,
) -> Result<Vec<CertRow>, CertError> {
    cs.validate()?;
    if threads < 1 {
        return Err(CertError::Parameter("threads must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CertError::Parameter(format!("thread pool: {e}")))?;
    let row_of = |i: usize| -> Result<CertRow, CertError> {
        let mut rng = RngStream::substream(seed, Purpose::CertifySelect, &[i as u64]);
        let res = certify(net, ds.inputs.row(i), cs, &mut rng)?;
        Ok(CertRow {
            index: i,
            label: ds.labels[i],
            predicted: res.c_hat,
            pa_lower: res.pa_lower,
            pb_upper: res.pb_upper,
            radius: res.radius,
            abstain: res.abstain,
            correct: !res.abstain && res.c_hat == ds.labels[i],
        })
    };
    pool.install(|| {
        use rayon::prelude::*;
        (0..ds.len()).into_par_iter().map(row_of).collect::<Result<Vec<_>, _>>()
    })
}

/// One point of the certified-accuracy curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub radius: f64,
    pub certified_acc: f64,
}

/// Certified accuracy at each grid radius: the fraction of points that are
/// correct (non-abstaining, right class) with certified radius at least rho.
/// The grid must be sorted ascending; the curve is then non-increasing by
/// set inclusion, which is asserted.
pub fn certified_accuracy_curve(rows: &[CertRow], radii: &[f64]) -> Result<Vec<CurvePoint>, CertError> {
    if rows.is_empty() {
        return Err(CertError::Parameter("no certification rows".into()));
    }
    if radii.is_empty() {
        return Err(CertError::Parameter("empty radius grid".into()));
    }
    if radii.windows(2).any(|w| w[0] > w[1]) {
        return Err(CertError::Parameter("radius grid must be sorted ascending".into()));
    }
    if radii.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(CertError::Parameter("radii must be finite and >= 0".into()));
    }
    let n = rows.len() as f64;
    let curve: Vec<CurvePoint> = radii
        .iter()
        .map(|&rho| {
            let hits = rows.iter().filter(|r| r.correct && r.radius >= rho).count();
            CurvePoint { radius: rho, certified_acc: hits as f64 / n }
        })
        .collect();
    assert!(
        curve.windows(2).all(|w| w[0].certified_acc >= w[1].certified_acc),
        "certified-accuracy curve must be non-increasing"
    );
    Ok(curve)
}

/// Render certification rows as CSV with a fixed column order. Floats use
/// shortest round-trip formatting, so the bytes are deterministic.
pub fn cert_rows_csv(rows: &[CertRow]) -> String {
    let mut out = String::from("index,label,predicted,pA_lower,pB_upper,radius,abstain,correct\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.index, r.label, r.predicted, r.pa_lower, r.pb_upper, r.radius, r.abstain, r.correct
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Smoothed-loss robustness check.
// ---------------------------------------------------------------------------

/// Loss threshold below which a point x at the given distance from the
/// certified anchor is guaranteed to keep the anchor's smoothed majority:
/// -ln(Phi(inv_phi(pB_upper) + dist/sigma)). Decreasing in the distance.
pub fn proposition1_threshold(pb_upper: f64, dist: f64, sigma: f64) -> Result<f64, CertError> {
    if !(pb_upper > 0.0 && pb_upper < 1.0) {
        return Err(CertError::Parameter(format!("pB_upper must lie in (0,1), got {pb_upper}")));
    }
    if !(sigma > 0.0) || !dist.is_finite() || dist < 0.0 {
        return Err(CertError::Parameter(format!(
            "need sigma > 0 and finite dist >= 0, got sigma={sigma} dist={dist}"
        )));
    }
    let u = inv_phi(pb_upper)? + dist / sigma;
    Ok(-normal_cdf(u).ln())
}

/// Checks whether the smoothed loss at `x` is provably below the robustness
/// threshold for an anchor `x0` certified with runner-up bound `pb_upper`.
/// The smoothed loss is Monte-Carlo estimated with `ns.r` draws; the check
/// is conservative, requiring estimate minus three standard errors to meet
/// the threshold... with the subtraction making a *pass* harder to fake by
/// sampling luck (the estimate itself must sit close to or below threshold).
pub fn proposition1_check(
    net: &Network,
    x: &[f64],
    x0: &[f64],
    label: usize,
    pb_upper: f64,
    ns: &NoiseSpec,
    instance: u64,
) -> Result<bool, CertError> {
    if x.len() != x0.len() {
        return Err(CertError::Parameter(format!(
            "point dimension {} does not match anchor dimension {}",
            x.len(),
            x0.len()
        )));
    }
    let dist = crate::tensor::squared_distance(x, x0).sqrt();
    let threshold = proposition1_threshold(pb_upper, dist, ns.sigma)?;
    let (est, se) = smoothed_loss(net, x, label, ns, Purpose::Check, instance, 0)?;
    Ok(est - 3.0 * se <= threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::nn::{init_network, Activation, LayerSpec};
    use crate::tensor::Tensor;
    use crate::trainers::{train, Method, TrainSpec};

    // ---- independent oracles -------------------------------------------

    /// Normal CDF by an independent route (erf instead of erfc).
    fn cdf_oracle(x: f64) -> f64 {
        0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    /// Quantile by bisection on the erf-based CDF.
    fn quantile_oracle(p: f64) -> f64 {
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if cdf_oracle(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Binomial upper tail by direct summation in log space.
    fn tail_oracle(k: usize, n: usize, p: f64) -> f64 {
        if k == 0 {
            return 1.0;
        }
        if p <= 0.0 {
            return 0.0;
        }
        if p >= 1.0 {
            return 1.0;
        }
        let ln_p = p.ln();
        let ln_q = (1.0 - p).ln();
        let ln_fact = |m: usize| libm::lgamma(m as f64 + 1.0);
        (k..=n)
            .map(|j| {
                (ln_fact(n) - ln_fact(j) - ln_fact(n - j)
                    + j as f64 * ln_p
                    + (n - j) as f64 * ln_q)
                    .exp()
            })
            .sum()
    }

    /// Clopper-Pearson lower bound by bisection on the summed tail.
    fn cp_lower_oracle(k: usize, n: usize, alpha: f64) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if tail_oracle(k, n, mid) < alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    // ---- quantile -------------------------------------------------------

    #[test]
    fn quantile_at_half_is_exactly_zero() {
        assert_eq!(inv_phi(0.5).unwrap(), 0.0);
    }

    #[test]
    fn quantile_matches_frozen_bisection_values() {
        // Frozen from the erf-CDF bisection oracle at 1e-12.
        assert!((inv_phi(0.75).unwrap() - 0.674489750196081743).abs() < 1e-9);
        assert!((inv_phi(0.999).unwrap() - 3.09023230616781354).abs() < 1e-9);
    }

    #[test]
    fn quantile_matches_live_bisection_on_grid() {
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let got = inv_phi(p).unwrap();
            assert!(
                (got - quantile_oracle(p)).abs() < 1e-9,
                "p={p}: {got} vs oracle {}",
                quantile_oracle(p)
            );
        }
        // Deep-tail points exercise the far-tail branch. The erf-based
        // bisection oracle loses absolute precision this far out, so the
        // check is a relative round-trip through the tail-accurate CDF,
        // with upper-tail points folded to the lower tail by symmetry.
        for &p in &[1e-7, 1e-9, 1e-12, 1e-30] {
            let x = inv_phi(p).unwrap();
            assert!(x < 0.0);
            assert!(
                (normal_cdf(x) - p).abs() < 1e-9 * p,
                "tail roundtrip at p={p}: cdf(inv)={}",
                normal_cdf(x)
            );
            // Upper-tail symmetry spot-check, only where 1 - p still holds
            // enough bits for the comparison to be about the quantile code
            // rather than about fl(1 - p) itself.
            if p >= 1e-7 {
                let hi = inv_phi(1.0 - p).unwrap();
                assert!((hi + x).abs() < 1e-9, "symmetry at p={p}: {hi} vs {}", -x);
            }
        }
    }

    #[test]
    fn quantile_symmetry_and_roundtrip() {
        for i in 1..200 {
            let p = i as f64 / 200.0;
            let a = inv_phi(p).unwrap();
            let b = inv_phi(1.0 - p).unwrap();
            assert!((a + b).abs() < 1e-12, "symmetry broken at p={p}: {a} vs {b}");
            assert!((normal_cdf(a) - p).abs() < 1e-12, "roundtrip at p={p}");
        }
        assert!(inv_phi(0.0).is_err());
        assert!(inv_phi(1.0).is_err());
        assert!(inv_phi(-0.3).is_err());
    }

    // ---- Clopper-Pearson -------------------------------------------------

    #[test]
    fn cp_lower_zero_successes_is_zero() {
        assert_eq!(clopper_pearson_lower(0, 100, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn cp_lower_full_successes_matches_closed_form() {
        // For k = n the tail is p^n, so the bound solves p^n = alpha.
        let got = clopper_pearson_lower(100, 100, 0.05).unwrap();
        let closed = 0.05f64.powf(1.0 / 100.0);
        assert!((got - closed).abs() < 1e-9, "{got} vs {closed}");
        assert!((got - 0.970486950392960065).abs() < 1e-9);
    }

    #[test]
    fn cp_lower_matches_exhaustive_tail_oracle() {
        for &n in &[1usize, 2, 3, 5, 8, 13, 21, 34, 50] {
            for k in 0..=n {
                for &alpha in &[0.05, 0.001] {
                    let got = clopper_pearson_lower(k, n, alpha).unwrap();
                    let want = cp_lower_oracle(k, n, alpha);
                    assert!(
                        (got - want).abs() < 1e-9,
                        "k={k} n={n} alpha={alpha}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn cp_upper_is_tail_symmetric_to_lower() {
        for &(k, n) in &[(0usize, 10usize), (3, 10), (10, 10), (70, 100)] {
            let up = clopper_pearson_upper(k, n, 0.05).unwrap();
            let lo = clopper_pearson_lower(n - k, n, 0.05).unwrap();
            assert_eq!(up, 1.0 - lo);
            assert!(up >= k as f64 / n as f64 - 1e-12);
        }
    }

    #[test]
    fn cp_lower_soundness_simulation() {
        // At p = 0.7, n = 100, alpha = 0.05, the bound may exceed the true p
        // in at most a 0.05 fraction of trials (plus simulation error).
        let p = 0.7;
        let n = 100usize;
        let trials = 10_000usize;
        let mut rng = RngStream::substream(4242, Purpose::Check, &[1]);
        let mut cache: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
        let mut violations = 0usize;
        for _ in 0..trials {
            let mut k = 0usize;
            for _ in 0..n {
                if rng.uniform() < p {
                    k += 1;
                }
            }
            let bound = *cache
                .entry(k)
                .or_insert_with(|| clopper_pearson_lower(k, n, 0.05).unwrap());
            if bound > p {
                violations += 1;
            }
        }
        let rate = violations as f64 / trials as f64;
        // 3 standard errors of a 0.05 proportion over 10k trials.
        let slack = 3.0 * (0.05f64 * 0.95 / trials as f64).sqrt();
        assert!(rate <= 0.05 + slack, "violation rate {rate} exceeds 0.05 + {slack}");
    }

    // ---- certified radius -------------------------------------------------

    #[test]
    fn radius_zero_when_bounds_coincide() {
        assert_eq!(certified_radius(0.6, 0.6, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn radius_matches_frozen_quantile_oracle_values() {
        let r1 = certified_radius(0.999, 0.001, 0.1).unwrap();
        assert!((r1 - 0.309023230616781354).abs() < 1e-9, "{r1}");
        let r2 = certified_radius(0.75, 0.25, 0.5).unwrap();
        assert!((r2 - 0.337244875098040872).abs() < 1e-9, "{r2}");
    }

    #[test]
    fn radius_monotone_in_bounds_and_linear_in_sigma() {
        let mut prev = f64::NEG_INFINITY;
        for i in 1..20 {
            let pa = 0.5 + i as f64 * 0.024;
            let r = certified_radius(pa, 0.2, 1.0).unwrap();
            assert!(r > prev, "not increasing in pA at {pa}");
            prev = r;
        }
        let mut prev = f64::INFINITY;
        for i in 1..20 {
            let pb = i as f64 * 0.024;
            let r = certified_radius(0.9, pb, 1.0).unwrap();
            assert!(r < prev, "not decreasing in pB at {pb}");
            prev = r;
        }
        for &sigma in &[0.1, 0.25, 1.0, 3.7] {
            let scaled = certified_radius(0.93, 0.04, sigma).unwrap();
            let unit = certified_radius(0.93, 0.04, 1.0).unwrap();
            assert_eq!(scaled, sigma * unit, "exact sigma scaling violated");
        }
        assert!(certified_radius(0.0, 0.5, 1.0).is_err());
        assert!(certified_radius(0.5, 1.0, 1.0).is_err());
        // Crossed bounds floor at zero.
        assert_eq!(certified_radius(0.3, 0.7, 1.0).unwrap(), 0.0);
    }

    // ---- certify ----------------------------------------------------------

    /// Network that ignores its input: zero weights, fixed logit biases.
    fn constant_net(biases: &[f64], in_dim: usize) -> Network {
        let classes = biases.len();
        let mut net = init_network(
            &[LayerSpec { in_dim, out_dim: classes, activation: Activation::None }],
            &mut RngStream::substream(1, Purpose::WeightInit, &[0]),
        )
        .unwrap();
        for w in net.weights[0].data_mut() {
            *w = 0.0;
        }
        net.biases[0] = Tensor::from_vec(&[classes], biases.to_vec()).unwrap();
        net
    }

    #[test]
    fn certify_constant_net_composes_the_two_bounds() {
        // Deterministic prediction: every draw votes class 0, so k = n and
        // the radius is sigma * inv_phi(cp_lower(n, n, alpha)).
        let net = constant_net(&[2.0, 1.0, 0.0], 4);
        let cs = CertifySpec { sigma: 0.5, n0: 20, n: 100, alpha: 0.001, mode: CertMode::OneSided };
        let mut rng = RngStream::substream(7, Purpose::CertifySelect, &[0]);
        let res = certify(&net, &[0.1, 0.2, 0.3, 0.4], &cs, &mut rng).unwrap();
        assert_eq!(res.c_hat, 0);
        assert!(!res.abstain);
        let pa = clopper_pearson_lower(100, 100, 0.001).unwrap();
        assert_eq!(res.pa_lower, pa);
        assert_eq!(res.pb_upper, 1.0 - pa);
        let want = 0.5 * inv_phi(pa).unwrap();
        assert!((res.radius - want).abs() < 1e-12, "{} vs {}", res.radius, want);
    }

    #[test]
    fn certify_abstains_on_even_split() {
        // Logits = [50 z, -50 z] for 1-D input at the origin: each draw votes
        // by the sign of its noise, a fair coin. n = 100 cannot clear 1/2.
        let mut net = constant_net(&[0.0, 0.0], 1);
        net.weights[0] = Tensor::from_vec(&[2, 1], vec![50.0, -50.0]).unwrap();
        let cs = CertifySpec { sigma: 1.0, n0: 50, n: 100, alpha: 0.001, mode: CertMode::OneSided };
        let mut rng = RngStream::substream(11, Purpose::CertifySelect, &[3]);
        let res = certify(&net, &[0.0], &cs, &mut rng).unwrap();
        assert!(res.abstain);
        assert_eq!(res.radius, 0.0);
        assert!(res.pa_lower <= 0.5);
    }

    #[test]
    fn one_sided_rule_abstains_exactly_when_below_half() {
        for k in 0..=100usize {
            let res = one_sided_decision(k, 100, 0.001, 0.5, 0).unwrap();
            assert_eq!(res.abstain, res.pa_lower <= 0.5, "k={k}");
            assert_eq!(res.pb_upper, 1.0 - res.pa_lower);
            if res.abstain {
                assert_eq!(res.radius, 0.0);
            } else {
                assert!(res.pa_lower > res.pb_upper && res.radius > 0.0, "k={k}");
            }
        }
    }

    #[test]
    fn two_class_rule_is_more_conservative_on_complementary_counts() {
        // With every vote on the top-two classes, the one-sided rule at level
        // alpha dominates the two-class rule, which spends alpha/2 per side.
        let one = one_sided_decision(900, 1000, 0.001, 1.0, 0).unwrap();
        let two = two_class_decision(900, 100, 1000, 0.001, 1.0, 0).unwrap();
        assert!(!one.abstain && !two.abstain);
        assert!(two.pa_lower < one.pa_lower);
        assert!(two.pb_upper > one.pb_upper);
        assert!(two.radius < one.radius);
        // Degenerate split: no evidence for the candidate.
        let tied = two_class_decision(0, 0, 10, 0.05, 1.0, 0).unwrap();
        assert!(tied.abstain);
    }

    #[test]
    fn certify_two_class_mode_uses_half_alpha_per_side() {
        let net = constant_net(&[3.0, 0.0, -1.0], 2);
        let cs = CertifySpec { sigma: 1.0, n0: 20, n: 200, alpha: 0.01, mode: CertMode::TwoClass };
        let mut rng = RngStream::substream(5, Purpose::CertifySelect, &[0]);
        let res = certify(&net, &[0.0, 0.0], &cs, &mut rng).unwrap();
        assert_eq!(res.c_hat, 0);
        assert!(!res.abstain);
        let pa = clopper_pearson_lower(200, 200, 0.005).unwrap();
        let pb = clopper_pearson_upper(0, 200, 0.005).unwrap();
        assert_eq!(res.pa_lower, pa);
        assert_eq!(res.pb_upper, pb);
        assert!((res.radius - certified_radius(pa, pb, 1.0).unwrap()).abs() == 0.0);
    }

    #[test]
    fn certify_is_deterministic_given_stream_state() {
        let net = constant_net(&[0.3, 0.1], 2);
        let cs = CertifySpec::new(0.25).unwrap();
        let mut a = RngStream::substream(9, Purpose::CertifySelect, &[4]);
        let mut b = RngStream::substream(9, Purpose::CertifySelect, &[4]);
        let ra = certify(&net, &[0.5, -0.5], &cs, &mut a).unwrap();
        let rb = certify(&net, &[0.5, -0.5], &cs, &mut b).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn spec_validation_rejects_bad_parameters() {
        assert!(CertifySpec::new(0.0).is_err());
        assert!(CertifySpec::new(-0.1).is_err());
        let mut cs = CertifySpec::new(0.25).unwrap();
        cs.alpha = 1.0;
        assert!(cs.validate().is_err());
        cs.alpha = 0.001;
        cs.n = 0;
        assert!(cs.validate().is_err());
        assert!(CertMode::parse("one-sided").unwrap() == CertMode::OneSided);
        assert!(CertMode::parse("two_class").unwrap() == CertMode::TwoClass);
        assert!(CertMode::parse("bogus").is_err());
    }

    // ---- dataset-level ------------------------------------------------------

    fn trained_blob_net() -> (Network, crate::data::Dataset) {
        let ds = make_blobs(120, 2, 3, 6.0, 31).unwrap();
        let net0 = init_network(
            &[
                LayerSpec { in_dim: 2, out_dim: 24, activation: Activation::Elu },
                LayerSpec { in_dim: 24, out_dim: 3, activation: Activation::None },
            ],
            &mut RngStream::substream(12, Purpose::WeightInit, &[0]),
        )
        .unwrap();
        let mut ts = TrainSpec::defaults(Method::Natural, 77);
        ts.epochs = 15;
        ts.eta2 = 0.5;
        ts.batch_size = 30;
        let (net, _) = train(&net0, &ds, &ts).unwrap();
        (net, ds)
    }

    #[test]
    fn dataset_certification_is_thread_count_invariant() {
        let (net, ds) = trained_blob_net();
        let small = ds.select(&(0..24).collect::<Vec<_>>(), "head");
        let cs = CertifySpec { sigma: 0.25, n0: 20, n: 60, alpha: 0.01, mode: CertMode::OneSided };
        let rows1 = certify_dataset(&net, &small, &cs, 99, 1).unwrap();
        let rows4 = certify_dataset(&net, &small, &cs, 99, 4).unwrap();
        assert_eq!(rows1, rows4);
        assert_eq!(cert_rows_csv(&rows1), cert_rows_csv(&rows4));
    }

    #[test]
    fn curve_starts_at_certified_clean_accuracy_and_never_increases() {
        let (net, ds) = trained_blob_net();
        let cs = CertifySpec { sigma: 0.25, n0: 20, n: 100, alpha: 0.01, mode: CertMode::OneSided };
        let rows = certify_dataset(&net, &ds, &cs, 17, 1).unwrap();
        let grid: Vec<f64> = (0..12).map(|i| i as f64 * 0.05).collect();
        let curve = certified_accuracy_curve(&rows, &grid).unwrap();
        let clean_certified =
            rows.iter().filter(|r| r.correct).count() as f64 / rows.len() as f64;
        assert_eq!(curve[0].radius, 0.0);
        assert_eq!(curve[0].certified_acc, clean_certified);
        for w in curve.windows(2) {
            assert!(w[0].certified_acc >= w[1].certified_acc);
        }
        // A well-separated blob model certifies most points at radius 0.
        assert!(clean_certified > 0.5, "certified clean accuracy {clean_certified}");
        assert!(certified_accuracy_curve(&rows, &[0.2, 0.1]).is_err());
        assert!(certified_accuracy_curve(&rows, &[]).is_err());
    }

    #[test]
    fn csv_layout_is_fixed_and_deterministic() {
        let rows = vec![
            CertRow {
                index: 0,
                label: 1,
                predicted: 1,
                pa_lower: 0.875,
                pb_upper: 0.125,
                radius: 0.25,
                abstain: false,
                correct: true,
            },
            CertRow {
                index: 1,
                label: 0,
                predicted: 2,
                pa_lower: 0.5,
                pb_upper: 0.5,
                radius: 0.0,
                abstain: true,
                correct: false,
            },
        ];
        let csv = cert_rows_csv(&rows);
        let again = cert_rows_csv(&rows);
        assert_eq!(csv, again);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "index,label,predicted,pA_lower,pB_upper,radius,abstain,correct"
        );
        assert_eq!(lines.next().unwrap(), "0,1,1,0.875,0.125,0.25,false,true");
        assert_eq!(lines.next().unwrap(), "1,0,2,0.5,0.5,0,true,false");
    }

    // ---- loss-threshold check ----------------------------------------------

    #[test]
    fn threshold_at_anchor_with_half_bound_is_ln_two() {
        let t = proposition1_threshold(0.5, 0.0, 0.25).unwrap();
        assert!((t - std::f64::consts::LN_2).abs() < 1e-15, "{t}");
    }

    #[test]
    fn threshold_decreases_with_distance() {
        let mut prev = f64::INFINITY;
        for i in 0..30 {
            let d = i as f64 * 0.1;
            let t = proposition1_threshold(0.2, d, 0.5).unwrap();
            assert!(t < prev, "threshold not decreasing at distance {d}");
            prev = t;
        }
        assert!(proposition1_threshold(0.0, 0.1, 0.5).is_err());
        assert!(proposition1_threshold(1.0, 0.1, 0.5).is_err());
        assert!(proposition1_threshold(0.2, -0.1, 0.5).is_err());
    }

    #[test]
    fn passing_check_implies_matching_smoothed_majority() {
        // Monte-Carlo consistency: whenever the loss check passes at a
        // perturbed point, the smoothed majority there should agree with the
        // certified anchor's majority in >= 99% of cases.
        let (net, ds) = trained_blob_net();
        let cs = CertifySpec { sigma: 0.25, n0: 50, n: 400, alpha: 0.001, mode: CertMode::OneSided };
        let ns = NoiseSpec::new(0.25, 200, 555).unwrap();
        let mut passes = 0usize;
        let mut agree = 0usize;
        for i in 0..40usize {
            let x0 = ds.inputs.row(i);
            let mut rng = RngStream::substream(3000, Purpose::CertifySelect, &[i as u64]);
            let res = certify(&net, x0, &cs, &mut rng).unwrap();
            if res.abstain {
                continue;
            }
            let mut dir_rng = RngStream::substream(3001, Purpose::Check, &[i as u64]);
            let raw: Vec<f64> = (0..2).map(|_| dir_rng.normal()).collect();
            let norm = (raw[0] * raw[0] + raw[1] * raw[1]).sqrt().max(1e-12);
            for &step in &[0.05, 0.10, 0.15] {
                let x: Vec<f64> =
                    x0.iter().zip(&raw).map(|(&b, &u)| b + step * u / norm).collect();
                let ok = proposition1_check(&net, &x, x0, res.c_hat, res.pb_upper, &ns, i as u64)
                    .unwrap();
                if !ok {
                    continue;
                }
                passes += 1;
                let mut prng = RngStream::substream(3002, Purpose::PredictNoise, &[i as u64]);
                let counts = smoothed_predict(&net, &x, cs.sigma, 400, &mut prng).unwrap();
                if majority_class(&counts) == res.c_hat {
                    agree += 1;
                }
            }
        }
        assert!(passes >= 20, "too few passing cases ({passes}) for a meaningful check");
        let rate = agree as f64 / passes as f64;
        assert!(rate >= 0.99, "majority agreement only {rate} over {passes} passes");
    }
}
