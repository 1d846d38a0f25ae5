//! End-to-end integration: synthetic data -> training -> attack ->
//! certification -> certificate curve, driven through the public API exactly
//! as a caller would. Frozen expected values guard against behavioral drift;
//! every frozen number was produced by this test and hand-checked for
//! plausibility before being pinned.

use std::sync::OnceLock;

use smoothcert::adversary::{transfer_eval, AttackSpec, CostMode};
use smoothcert::bound::{certificate_curve, CurveSpec};
use smoothcert::certifier::{certified_accuracy_curve, certify_dataset, CertMode, CertifySpec};
use smoothcert::data::{load_csv, make_blobs, save_csv, split, Dataset};
use smoothcert::nn::{init_network, load_model, save_model, Activation, LayerSpec, Network};
use smoothcert::rng::{Purpose, RngStream};
use smoothcert::smoothing::NoiseSpec;
use smoothcert::trainers::{evaluate, train, Method, TrainSpec};

const SEED: u64 = 7;

/// Shared across tests: one dataset, one smoothed-trained model, one plainly
/// trained model. Training runs once; every test reads from here.
struct Fixture {
    train_set: Dataset,
    test_set: Dataset,
    nal: Network,
    natural: Network,
    nal_surrogate_last: f64,
    nal_clean_last: f64,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        // One spare row per class: two stratified draws from an exactly
        // sized pool can collide on the per-class rounding.
        let pool = make_blobs(403, 2, 3, 6.0, SEED).expect("blobs");
        let mut splitter = RngStream::substream(SEED, Purpose::SubsetSample, &[0]);
        let (train_set, test_set) = split(&pool, 200, 200, &mut splitter).expect("split");

        let specs = [
            LayerSpec { in_dim: 2, out_dim: 32, activation: Activation::Elu },
            LayerSpec { in_dim: 32, out_dim: 3, activation: Activation::None },
        ];
        let mut init_rng = RngStream::substream(SEED, Purpose::WeightInit, &[0]);
        let net0 = init_network(&specs, &mut init_rng).expect("init");

        // The transport penalty must match the data scale (clusters on a
        // radius-0.25 circle), hence the large gamma.
        let mut ts = TrainSpec::defaults(Method::Nal, SEED);
        ts.epochs = 30;
        ts.eta2 = 0.3;
        ts.batch_size = 32;
        ts.gamma = 16.0;
        ts.eta1 = 0.5 / 16.0;
        let (nal, hist) = train(&net0, &train_set, &ts).expect("train nal");
        assert_eq!(hist.epochs.len(), 30);
        for e in &hist.epochs {
            assert!(e.surrogate_loss.is_finite() && e.clean_loss.is_finite());
        }

        let mut tn = TrainSpec::defaults(Method::Natural, SEED);
        tn.epochs = 30;
        tn.eta2 = 0.3;
        tn.batch_size = 32;
        let (natural, _) = train(&net0, &train_set, &tn).expect("train natural");

        Fixture {
            train_set,
            test_set,
            nal,
            natural,
            nal_surrogate_last: hist.epochs.last().unwrap().surrogate_loss,
            nal_clean_last: hist.epochs.last().unwrap().clean_loss,
        }
    })
}

fn close(actual: f64, expected: f64, tol: f64, what: &str) {
    assert!(
        (actual - expected).abs() <= tol,
        "{what}: got {actual:.12}, pinned {expected:.12} (tol {tol:e})"
    );
}

#[test]
fn pipeline_dataset_is_deterministic_and_stratified() {
    let fx = fixture();
    assert_eq!(fx.train_set.len(), 200);
    assert_eq!(fx.test_set.len(), 200);
    assert_eq!(fx.train_set.dim(), 2);
    // Stratification: three classes, near-equal counts in both splits.
    for ds in [&fx.train_set, &fx.test_set] {
        let mut counts = [0usize; 3];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        for &c in &counts {
            assert!((66..=67).contains(&c), "class counts {counts:?}");
        }
    }
    // Regenerating from the same seed gives the same bytes.
    let pool2 = make_blobs(403, 2, 3, 6.0, SEED).expect("blobs");
    let mut splitter = RngStream::substream(SEED, Purpose::SubsetSample, &[0]);
    let (tr2, te2) = split(&pool2, 200, 200, &mut splitter).expect("split");
    assert_eq!(tr2.checksum(), fx.train_set.checksum());
    assert_eq!(te2.checksum(), fx.test_set.checksum());
    assert_eq!(fx.train_set.checksum(), 0xfc3500d46c79f222, "train split drifted");
    assert_eq!(fx.test_set.checksum(), 0xf6c7d70a2975c88a, "test split drifted");
}

#[test]
fn pipeline_training_reaches_frozen_accuracy() {
    let fx = fixture();
    let attack = AttackSpec::new(0.15, 20).expect("attack spec");
    let noise = NoiseSpec::new(0.1, 4, SEED).expect("noise spec");
    let rep_nal = evaluate(&fx.nal, &fx.test_set, Some(&attack), Some(&noise)).expect("eval nal");
    let rep_nat = evaluate(&fx.natural, &fx.test_set, Some(&attack), None).expect("eval natural");

    assert_eq!(rep_nal.n, 200);
    close(rep_nal.clean_acc, 0.970, 1e-12, "nal clean accuracy");
    close(rep_nal.robust_acc.unwrap(), 0.625, 1e-12, "nal robust accuracy");
    close(rep_nat.clean_acc, 1.000, 1e-12, "natural clean accuracy");
    close(rep_nat.robust_acc.unwrap(), 0.745, 1e-12, "natural robust accuracy");
    close(fx.nal_surrogate_last, 0.223178621534, 1e-9, "final surrogate loss");
    close(fx.nal_clean_last, 0.268203277145, 1e-9, "final clean loss");
    // The attacked accuracy can never exceed the clean one: the attack
    // starts at the clean point.
    assert!(rep_nal.robust_acc.unwrap() <= rep_nal.clean_acc + 1e-12);
    assert!(rep_nat.robust_acc.unwrap() <= rep_nat.clean_acc + 1e-12);
}

#[test]
fn pipeline_certification_matches_prediction_semantics() {
    let fx = fixture();
    let cs = CertifySpec {
        sigma: 0.1,
        n0: 100,
        n: 1000,
        alpha: 0.001,
        mode: CertMode::OneSided,
    };
    let rows = certify_dataset(&fx.nal, &fx.test_set, &cs, SEED, 1).expect("certify");
    assert_eq!(rows.len(), 200);
    for r in &rows {
        if r.abstain {
            assert_eq!(r.radius, 0.0, "abstaining row {} must have zero radius", r.index);
            assert!(!r.correct);
        } else {
            assert!(r.radius > 0.0, "non-abstaining row {} must certify a radius", r.index);
            assert!(r.pa_lower > r.pb_upper);
            assert_eq!(r.correct, r.predicted == r.label);
        }
        assert!((0.0..=1.0).contains(&r.pa_lower));
        assert!((0.0..=1.0).contains(&r.pb_upper));
    }
    let radii: Vec<f64> = (0..26).map(|i| i as f64 * 0.01).collect();
    let curve = certified_accuracy_curve(&rows, &radii).expect("curve");
    assert_eq!(curve.len(), 26);
    for w in curve.windows(2) {
        assert!(
            w[1].certified_acc <= w[0].certified_acc + 1e-12,
            "certified accuracy must be non-increasing in the radius"
        );
    }
    let at_zero = rows.iter().filter(|r| r.correct).count() as f64 / rows.len() as f64;
    close(curve[0].certified_acc, at_zero, 1e-12, "curve at radius 0");
    close(at_zero, 0.955, 1e-12, "certified accuracy at radius 0");
    let mean_radius = rows.iter().map(|r| r.radius).sum::<f64>() / 200.0;
    close(mean_radius, 0.141385, 1e-6, "mean certified radius");

    // Determinism across thread counts, not just repeat runs.
    let rows4 = certify_dataset(&fx.nal, &fx.test_set, &cs, SEED, 4).expect("certify 4");
    for (a, b) in rows.iter().zip(&rows4) {
        assert_eq!(a.pa_lower.to_bits(), b.pa_lower.to_bits());
        assert_eq!(a.pb_upper.to_bits(), b.pb_upper.to_bits());
        assert_eq!(a.radius.to_bits(), b.radius.to_bits());
        assert_eq!(a.predicted, b.predicted);
    }
}

#[test]
fn pipeline_certificate_curve_dominates_measured_attack() {
    let fx = fixture();
    let cspec = CurveSpec {
        gammas: vec![0.25, 1.5, 3.0],
        k_iters: 4,
        eta1: None,
        cost_mode: CostMode::Noisy,
        rho_grid: None,
    };
    let ns = NoiseSpec::new(0.1, 20, SEED).expect("noise");
    let reports = certificate_curve(&fx.nal, &fx.test_set, &cspec, &ns).expect("curve");
    assert_eq!(reports.len(), 3);
    for r in &reports {
        assert!(r.rho_test > 0.0);
        assert!(r.gap_se > 0.0);
        // The certificate evaluated at the measured budget dominates the
        // measured worst-case loss up to Monte-Carlo noise; the library
        // rejects anything below -3 standard errors, re-check it here.
        assert!(
            r.gap_mean >= -3.0 * r.gap_se - 1e-12,
            "gamma {}: gap {} vs se {}",
            r.gamma,
            r.gap_mean,
            r.gap_se
        );
        let bound_at = r.gamma * r.rho_test + r.mean_phi;
        close(
            bound_at - r.worst_case_loss,
            r.gap_mean,
            1e-9,
            "gap decomposition",
        );
        // Bound values are the straight line gamma * rho + mean_phi.
        for (rho, b) in r.rho_grid.iter().zip(&r.bound_values) {
            close(*b, r.gamma * rho + r.mean_phi, 1e-12, "bound line");
        }
    }
    // A larger penalty confines the maximizers: measured cost must shrink.
    assert!(reports[0].rho_test > reports[1].rho_test);
    assert!(reports[1].rho_test > reports[2].rho_test);
    // Frozen (gamma, rho_test, worst_case, mean_phi) triples.
    let pinned = [
        (0.25, 125.442924, 64.946429, 33.584268),
        (1.5, 4.153921, 12.467537, 6.235653),
        (3.0, 1.175840, 6.742153, 3.216443),
    ];
    for (r, (g, rho, worst, phi)) in reports.iter().zip(pinned) {
        close(r.gamma, g, 1e-12, "gamma");
        close(r.rho_test, rho, 1e-5, "measured transport cost");
        close(r.worst_case_loss, worst, 1e-5, "worst-case loss");
        close(r.mean_phi, phi, 1e-5, "mean surrogate");
    }
}

#[test]
fn pipeline_transfer_attack_is_weaker_than_direct() {
    let fx = fixture();
    let attack = AttackSpec::new(0.15, 20).expect("attack");
    let self_nal = transfer_eval(&fx.nal, &fx.nal, &fx.test_set, &attack).expect("self");
    let cross = transfer_eval(&fx.natural, &fx.nal, &fx.test_set, &attack).expect("cross");
    close(self_nal, 0.630, 1e-12, "direct attack accuracy");
    close(cross, 0.635, 1e-12, "transferred attack accuracy");
    // Attacking with someone else's gradients can only do worse or equal.
    assert!(
        cross >= self_nal - 1e-12,
        "transfer attack stronger than direct: {cross} < {self_nal}"
    );
}

#[test]
fn pipeline_artifacts_roundtrip() {
    let fx = fixture();
    let dir = tempfile::tempdir().expect("tempdir");

    let model_path = dir.path().join("model.bin");
    save_model(&fx.nal, &model_path).expect("save model");
    let back = load_model(&model_path).expect("load model");
    assert_eq!(back.arch_string(), fx.nal.arch_string());
    let x = &fx.test_set.inputs;
    let (y1, _) = smoothcert::nn::forward(&fx.nal, x).expect("fwd");
    let (y2, _) = smoothcert::nn::forward(&back, x).expect("fwd");
    assert_eq!(y1.data().len(), y2.data().len());
    for (a, b) in y1.data().iter().zip(y2.data()) {
        assert_eq!(a.to_bits(), b.to_bits(), "reloaded model must be bit-identical");
    }

    let csv_path = dir.path().join("test.csv");
    save_csv(&fx.test_set, &csv_path).expect("save csv");
    let back_ds = load_csv(&csv_path).expect("load csv");
    assert_eq!(back_ds.len(), fx.test_set.len());
    assert_eq!(back_ds.labels, fx.test_set.labels);
    for (a, b) in back_ds.inputs.data().iter().zip(fx.test_set.inputs.data()) {
        assert_eq!(a.to_bits(), b.to_bits(), "csv roundtrip must be lossless");
    }
}
