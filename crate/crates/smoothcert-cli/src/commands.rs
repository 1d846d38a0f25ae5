//! Subcommand implementations.
//!
//! Every command follows the same shape: resolve inputs from the config,
//! compute, write deterministic CSV artifacts plus a JSON manifest into the
//! run directory, and print a short human summary. All randomness flows from
//! the run seed through named substreams, so a rerun with the same config and
//! seed reproduces every artifact byte for byte.

use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

use smoothcert::adversary::{AdvError, AttackSpec, CostMode, transfer_eval};
use smoothcert::bound::{bound_reports_csv, certificate_curve, BoundError, CurveSpec};
use smoothcert::certifier::{
    cert_rows_csv, certified_accuracy_curve, certify_dataset, CertError, CertMode, CertifySpec,
};
use smoothcert::data::{load_csv, load_idx, make_blobs, save_csv, split, DataError, Dataset};
use smoothcert::nn::{init_network, load_model, save_model, Activation, LayerSpec, Network, NnError};
use smoothcert::rng::{Purpose, RngStream};
use smoothcert::smoothing::{NoiseSpec, SmoothError};
use smoothcert::trainers::{
    build_manifest, evaluate, train, Method, TrainError, TrainSpec,
};
use smoothcert::verify::{run_level, Level};

use crate::config::{ConfigError, RunConfig};
use crate::manifest::RunManifest;
use crate::schema::validate_dir;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Adversary(#[from] AdvError),
    #[error(transparent)]
    Smoothing(#[from] SmoothError),
    #[error(transparent)]
    Certify(#[from] CertError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

/// Everything a subcommand needs: effective config, run directory, seed,
/// thread count.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub threads: usize,
}

impl Ctx {
    fn write_artifact(&self, m: &mut RunManifest, name: &str, bytes: &str) -> Result<(), CliError> {
        std::fs::write(self.out.join(name), bytes)?;
        m.artifact(name);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Shared input resolution.
// ---------------------------------------------------------------------------

const MNIST_IMAGES_DEFAULT: &str = "data/mnist/mnist10k-images-idx3-ubyte";
const MNIST_LABELS_DEFAULT: &str = "data/mnist/mnist10k-labels-idx1-ubyte";

/// Build the (train, test) pair described by the `data.*` keys.
fn resolve_datasets(cfg: &RunConfig, run_seed: u64) -> Result<(Dataset, Dataset), CliError> {
    let kind = cfg.require_str("data.kind", "blobs | mnist | csv")?;
    let data_seed = cfg.u64_or("data.seed", run_seed)?;
    match kind {
        "blobs" => {
            let n = cfg.usize_or("data.n", 200)?;
            let n_test = cfg.usize_or("data.n_test", 200)?;
            let dim = cfg.usize_or("data.dim", 2)?;
            let classes = cfg.usize_or("data.classes", 3)?;
            let separation = cfg.f64_or("data.separation", 6.0)?;
            // One spare row per class: two stratified draws from an exactly
            // sized pool can collide on the per-class rounding.
            let pool = make_blobs(n + n_test + classes, dim, classes, separation, data_seed)?;
            let mut rng = RngStream::substream(data_seed, Purpose::SubsetSample, &[0]);
            Ok(split(&pool, n, n_test, &mut rng)?)
        }
        "mnist" => {
            let images = cfg.str_or("data.mnist_images", MNIST_IMAGES_DEFAULT);
            let labels = cfg.str_or("data.mnist_labels", MNIST_LABELS_DEFAULT);
            for (key, path) in [("data.mnist_images", images), ("data.mnist_labels", labels)] {
                if !Path::new(path).is_file() {
                    return Err(CliError::Usage(format!(
                        "{key} {path:?} does not exist (run from the repository root or set the key)"
                    )));
                }
            }
            let pool = load_idx(Path::new(images), Path::new(labels))?;
            let n = cfg.usize_or("data.n", 5000)?;
            let n_test = cfg.usize_or("data.n_test", 1000)?;
            let mut rng = RngStream::substream(data_seed, Purpose::SubsetSample, &[0]);
            Ok(split(&pool, n, n_test, &mut rng)?)
        }
        "csv" => {
            let train_path = cfg.require_str("data.train_csv", "path to the training CSV")?;
            let test_path = cfg.require_str("data.test_csv", "path to the test CSV")?;
            let train_ds = load_csv(Path::new(train_path))?;
            let test_ds = load_csv(Path::new(test_path))?;
            Ok((train_ds, test_ds))
        }
        other => Err(CliError::Usage(format!(
            "data.kind {other:?} is not one of blobs | mnist | csv"
        ))),
    }
}

/// Fresh network per `model.*` keys, deterministically initialized from the
/// run seed.
fn build_network(cfg: &RunConfig, seed: u64, in_dim: usize, classes: usize) -> Result<Network, CliError> {
    let hidden = cfg.usize_list_or("model.hidden", &[32])?;
    let act_name = cfg.str_or("model.activation", "elu");
    let act = Activation::parse(act_name).ok_or_else(|| {
        CliError::Usage(format!("model.activation {act_name:?} is not relu | elu"))
    })?;
    if act == Activation::None {
        return Err(CliError::Usage("model.activation must be a nonlinearity".into()));
    }
    let mut specs = Vec::new();
    let mut prev = in_dim;
    for &h in &hidden {
        specs.push(LayerSpec { in_dim: prev, out_dim: h, activation: act });
        prev = h;
    }
    specs.push(LayerSpec { in_dim: prev, out_dim: classes, activation: Activation::None });
    let mut rng = RngStream::substream(seed, Purpose::WeightInit, &[0]);
    Ok(init_network(&specs, &mut rng)?)
}

fn parse_cost_mode(cfg: &RunConfig, key: &'static str) -> Result<CostMode, CliError> {
    match cfg.str_or(key, "noisy") {
        "noisy" => Ok(CostMode::Noisy),
        "clean" => Ok(CostMode::Clean),
        other => Err(CliError::Usage(format!("{key} {other:?} is not noisy | clean"))),
    }
}

/// Training spec: library defaults for the method, overridden by any
/// `train.*` / `noise.*` keys present.
fn resolve_train_spec(cfg: &RunConfig, seed: u64) -> Result<TrainSpec, CliError> {
    let method = Method::parse(cfg.str_or("train.method", "nal"))?;
    let mut ts = TrainSpec::defaults(method, seed);
    ts.epochs = cfg.usize_or("train.epochs", ts.epochs)?;
    ts.eta2 = cfg.f64_or("train.eta2", ts.eta2)?;
    ts.batch_size = cfg.usize_or("train.batch_size", ts.batch_size)?;
    ts.gamma = cfg.f64_or("train.gamma", ts.gamma)?;
    ts.k_iters = cfg.usize_or("train.k_iters", ts.k_iters)?;
    // Track gamma unless the step size is pinned explicitly.
    ts.eta1 = cfg.f64_or("train.eta1", 0.5 / ts.gamma)?;
    ts.cost_mode = parse_cost_mode(cfg, "train.cost_mode")?;
    ts.attack_eps = cfg.f64_or("train.attack_eps", ts.attack_eps)?;
    ts.attack_iters = cfg.usize_or("train.attack_iters", ts.attack_iters)?;
    ts.noise.sigma = cfg.f64_or("noise.sigma", ts.noise.sigma)?;
    ts.noise.r = cfg.usize_or("noise.r", ts.noise.r)?;
    Ok(ts)
}

/// Majority-vote noise at evaluation time: explicit on/off, or `auto` =
/// only for methods whose predictor is the smoothed classifier.
fn resolve_eval_noise(
    cfg: &RunConfig,
    method: Option<Method>,
    seed: u64,
) -> Result<Option<NoiseSpec>, CliError> {
    let mode = cfg.str_or("eval.noise_at_test", "auto");
    let on = match mode {
        "on" => true,
        "off" => false,
        "auto" => matches!(method, Some(Method::Noise) | Some(Method::Nal)),
        other => {
            return Err(CliError::Usage(format!(
                "eval.noise_at_test {other:?} is not auto | on | off"
            )))
        }
    };
    if !on {
        return Ok(None);
    }
    let sigma = cfg.f64_or("noise.sigma", 0.1)?;
    let r = cfg.usize_or("noise.r", 4)?;
    Ok(Some(NoiseSpec::new(sigma, r, seed)?))
}

fn load_model_from(cfg: &RunConfig) -> Result<Network, CliError> {
    let path = cfg.require_str("model.path", "path to a model saved by `smoothcert train`")?;
    Ok(load_model(Path::new(path))?)
}

fn history_csv(history: &smoothcert::trainers::TrainHistory) -> String {
    let mut out = String::from("epoch,surrogate_loss,clean_loss\n");
    for (i, e) in history.epochs.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", i + 1, e.surrogate_loss, e.clean_loss));
    }
    out
}

// ---------------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(ctx: &Ctx) -> Result<(), CliError> {
    let mut m = RunManifest::begin("gen-data", &ctx.cfg, ctx.seed, ctx.threads);
    let (train_ds, test_ds) = resolve_datasets(&ctx.cfg, ctx.seed)?;
    m.dataset("train", &train_ds);
    m.dataset("test", &test_ds);
    save_csv(&train_ds, &ctx.out.join("train.csv"))?;
    m.artifact("train.csv");
    save_csv(&test_ds, &ctx.out.join("test.csv"))?;
    m.artifact("test.csv");
    println!(
        "wrote {} train rows and {} test rows ({} classes, dim {}) to {}",
        train_ds.len(),
        test_ds.len(),
        train_ds.num_classes,
        train_ds.dim(),
        ctx.out.display()
    );
    m.finish(&ctx.out)?;
    Ok(())
}

pub fn cmd_train(ctx: &Ctx) -> Result<(), CliError> {
    let mut m = RunManifest::begin("train", &ctx.cfg, ctx.seed, ctx.threads);
    let (train_ds, test_ds) = resolve_datasets(&ctx.cfg, ctx.seed)?;
    m.dataset("train", &train_ds);
    m.dataset("test", &test_ds);

    let net0 = build_network(&ctx.cfg, ctx.seed, train_ds.dim(), train_ds.num_classes)?;
    let ts = resolve_train_spec(&ctx.cfg, ctx.seed)?;
    println!(
        "training {} on {} ({} rows, arch {}) for {} epochs",
        ts.method.name(),
        train_ds.name,
        train_ds.len(),
        net0.arch_string(),
        ts.epochs
    );
    let (net, history) = train(&net0, &train_ds, &ts)?;

    save_model(&net, &ctx.out.join("model.bin"))?;
    m.artifact("model.bin");
    ctx.write_artifact(&mut m, "history.csv", &history_csv(&history))?;

    let eps = ctx.cfg.f64_or("eval.attack_eps", ts.attack_eps)?;
    let iters = ctx.cfg.usize_or("eval.attack_iters", 20)?;
    let attack = AttackSpec::new(eps, iters)?;
    let noise = resolve_eval_noise(&ctx.cfg, Some(ts.method), ctx.seed)?;
    let report = evaluate(&net, &test_ds, Some(&attack), noise.as_ref())?;
    let robust = report.robust_acc.unwrap_or(f64::NAN);
    let eval_csv = format!(
        "method,n_test,clean_accuracy,robust_accuracy\n{},{},{},{}\n",
        ts.method.name(),
        report.n,
        report.clean_acc,
        robust
    );
    ctx.write_artifact(&mut m, "eval.csv", &eval_csv)?;

    println!(
        "clean accuracy {:.4}, robust accuracy {:.4} under a {iters}-step attack at radius {eps}{}",
        report.clean_acc,
        robust,
        if noise.is_some() { " (majority-vote prediction under noise)" } else { "" }
    );
    m.extra = json!({
        "train_manifest": build_manifest(&ts, &train_ds, &net, &history),
        "eval": report,
    });
    m.finish(&ctx.out)?;
    Ok(())
}

pub fn cmd_attack(ctx: &Ctx) -> Result<(), CliError> {
    let mut m = RunManifest::begin("attack", &ctx.cfg, ctx.seed, ctx.threads);
    let net = load_model_from(&ctx.cfg)?;
    let (_, test_ds) = resolve_datasets(&ctx.cfg, ctx.seed)?;
    m.dataset("test", &test_ds);

    let mut eps_grid = ctx
        .cfg
        .f64_list("eval.attack_eps")?
        .unwrap_or_else(|| vec![0.1, 0.2, 0.3, 0.4, 0.5]);
    eps_grid.sort_by(|a, b| a.total_cmp(b));
    eps_grid.dedup();
    let iters = ctx.cfg.usize_or("eval.attack_iters", 20)?;
    let noise = resolve_eval_noise(&ctx.cfg, None, ctx.seed)?;

    let mut csv = String::from("epsilon,clean_accuracy,robust_accuracy\n");
    for &eps in &eps_grid {
        let attack = AttackSpec::new(eps, iters)?;
        let report = evaluate(&net, &test_ds, Some(&attack), noise.as_ref())?;
        let robust = report.robust_acc.unwrap_or(f64::NAN);
        println!("epsilon {eps}: clean {:.4}, robust {robust:.4}", report.clean_acc);
        csv.push_str(&format!("{eps},{},{robust}\n", report.clean_acc));
    }
    ctx.write_artifact(&mut m, "attack.csv", &csv)?;
    m.finish(&ctx.out)?;
    Ok(())
}

fn truncate(ds: &Dataset, limit: usize) -> Dataset {
    if limit == 0 || limit >= ds.len() {
        return ds.clone();
    }
    let idx: Vec<usize> = (0..limit).collect();
    ds.select(&idx, &format!("{}-first{}", ds.name, limit))
}

pub fn cmd_certify(ctx: &Ctx) -> Result<(), CliError> {
    let mut m = RunManifest::begin("certify", &ctx.cfg, ctx.seed, ctx.threads);
    let net = load_model_from(&ctx.cfg)?;
    let (_, test_full) = resolve_datasets(&ctx.cfg, ctx.seed)?;
    let test_ds = truncate(&test_full, ctx.cfg.usize_or("certify.limit", 0)?);
    m.dataset("test", &test_ds);

    let sigma_default = ctx.cfg.f64_or("noise.sigma", 0.1)?;
    let mode_name = ctx.cfg.str_or("certify.mode", "one_sided");
    let cs = CertifySpec {
        sigma: ctx.cfg.f64_or("certify.sigma", sigma_default)?,
        n0: ctx.cfg.usize_or("certify.n0", 100)?,
        n: ctx.cfg.usize_or("certify.n", 1000)?,
        alpha: ctx.cfg.f64_or("certify.alpha", 0.001)?,
        mode: CertMode::parse(mode_name)?,
    };
    println!(
        "certifying {} points (sigma {}, {} + {} draws, alpha {}, {} mode, {} threads)",
        test_ds.len(),
        cs.sigma,
        cs.n0,
        cs.n,
        cs.alpha,
        cs.mode.name(),
        ctx.threads
    );
    let rows = certify_dataset(&net, &test_ds, &cs, ctx.seed, ctx.threads)?;
    ctx.write_artifact(&mut m, "cert.csv", &cert_rows_csv(&rows))?;

    let radii = match ctx.cfg.f64_list("certify.radii")? {
        Some(r) => r,
        None => (0..26).map(|i| 2.5 * cs.sigma * i as f64 / 25.0).collect(),
    };
    let curve = certified_accuracy_curve(&rows, &radii)?;
    let mut curve_csv = String::from("radius,certified_accuracy\n");
    for p in &curve {
        curve_csv.push_str(&format!("{},{}\n", p.radius, p.certified_acc));
    }
    ctx.write_artifact(&mut m, "curve.csv", &curve_csv)?;

    let n = rows.len() as f64;
    let abstain_rate = rows.iter().filter(|r| r.abstain).count() as f64 / n;
    let cert_acc0 = rows.iter().filter(|r| r.correct).count() as f64 / n;
    let mean_radius = {
        let certified: Vec<f64> = rows.iter().filter(|r| r.correct).map(|r| r.radius).collect();
        if certified.is_empty() { 0.0 } else { certified.iter().sum::<f64>() / certified.len() as f64 }
    };
    println!(
        "certified accuracy at radius 0: {cert_acc0:.4}; abstain rate {abstain_rate:.4}; mean certified radius {mean_radius:.4}"
    );
    m.extra = json!({
        "certified_accuracy_at_zero": cert_acc0,
        "abstain_rate": abstain_rate,
        "mean_certified_radius": mean_radius,
    });
    m.finish(&ctx.out)?;
    Ok(())
}

pub fn cmd_bound(ctx: &Ctx) -> Result<(), CliError> {
    let mut m = RunManifest::begin("bound", &ctx.cfg, ctx.seed, ctx.threads);
    let net = load_model_from(&ctx.cfg)?;
    let (_, test_full) = resolve_datasets(&ctx.cfg, ctx.seed)?;
    let test_ds = truncate(&test_full, ctx.cfg.usize_or("bound.limit", 0)?);
    m.dataset("test", &test_ds);

    let cspec = CurveSpec {
        gammas: ctx.cfg.f64_list("bound.gammas")?.unwrap_or_else(|| vec![0.25, 1.5, 3.0]),
        k_iters: ctx.cfg.usize_or("bound.k_iters", 4)?,
        eta1: match ctx.cfg.str("bound.eta1") {
            None => None,
            Some(_) => Some(ctx.cfg.require_f64("bound.eta1", "ascent step size")?),
        },
        cost_mode: parse_cost_mode(&ctx.cfg, "bound.cost_mode")?,
        rho_grid: ctx.cfg.f64_list("bound.rho_grid")?,
    };
    let ns = NoiseSpec::new(
        ctx.cfg.f64_or("noise.sigma", 0.1)?,
        ctx.cfg.usize_or("noise.r", 20)?,
        ctx.seed,
    )?;
    println!(
        "computing certificate curves for gamma in {:?} over {} anchors",
        cspec.gammas,
        test_ds.len()
    );
    let reports = certificate_curve(&net, &test_ds, &cspec, &ns)?;
    ctx.write_artifact(&mut m, "bound.csv", &bound_reports_csv(&reports))?;

    for rep in &reports {
        let bound_at_test = rep.gamma * rep.rho_test + rep.mean_phi;
        println!(
            "gamma {}: certificate at measured budget {:.4} = {:.4}, worst-case loss {:.4}, radius-equivalent {:.4}",
            rep.gamma, rep.rho_test, bound_at_test, rep.worst_case_loss, rep.epsilon_equiv
        );
    }
    m.extra = json!({ "reports": reports });
    m.finish(&ctx.out)?;
    Ok(())
}

pub fn cmd_transfer(ctx: &Ctx) -> Result<(), CliError> {
    let mut m = RunManifest::begin("transfer", &ctx.cfg, ctx.seed, ctx.threads);
    let (train_ds, test_ds) = resolve_datasets(&ctx.cfg, ctx.seed)?;
    m.dataset("train", &train_ds);
    m.dataset("test", &test_ds);

    let method_names = ctx
        .cfg
        .str_list("transfer.methods")
        .unwrap_or_else(|| vec!["natural".into(), "pgd_at".into(), "nal".into()]);
    if method_names.len() < 2 {
        return Err(CliError::Usage("transfer.methods needs at least two methods".into()));
    }
    let mut methods = Vec::with_capacity(method_names.len());
    for name in &method_names {
        methods.push(Method::parse(name)?);
    }

    // Same initialization and seed for every method: the matrix then isolates
    // the training objective as the only difference between models.
    let net0 = build_network(&ctx.cfg, ctx.seed, train_ds.dim(), train_ds.num_classes)?;
    let mut nets = Vec::with_capacity(methods.len());
    for &method in &methods {
        let mut ts = resolve_train_spec(&ctx.cfg, ctx.seed)?;
        ts.method = method;
        println!("training {} ({} epochs)", method.name(), ts.epochs);
        let (net, _) = train(&net0, &train_ds, &ts)?;
        save_model(&net, &ctx.out.join(format!("model-{}.bin", method.name())))?;
        m.artifact(&format!("model-{}.bin", method.name()));
        nets.push(net);
    }

    let eps = ctx.cfg.f64_or("eval.attack_eps", 0.34)?;
    let iters = ctx.cfg.usize_or("eval.attack_iters", 20)?;
    let attack = AttackSpec::new(eps, iters)?;
    let mut csv = String::from("source,target,accuracy\n");
    for (si, source) in nets.iter().enumerate() {
        for (ti, target) in nets.iter().enumerate() {
            let acc = transfer_eval(source, target, &test_ds, &attack)?;
            println!(
                "attack crafted on {} -> evaluated on {}: accuracy {acc:.4}",
                methods[si].name(),
                methods[ti].name()
            );
            csv.push_str(&format!("{},{},{acc}\n", methods[si].name(), methods[ti].name()));
        }
    }
    ctx.write_artifact(&mut m, "transfer.csv", &csv)?;
    m.finish(&ctx.out)?;
    Ok(())
}

/// Returns false when any check failed (the caller turns that into a nonzero
/// exit code).
pub fn cmd_verify(ctx: &Ctx) -> Result<bool, CliError> {
    let mut m = RunManifest::begin("verify", &ctx.cfg, ctx.seed, ctx.threads);
    let level_name = ctx.cfg.str_or("verify.level", "quick");
    let level = Level::parse(level_name)
        .ok_or_else(|| CliError::Usage(format!("verify.level {level_name:?} is not quick | full")))?;
    println!("running {level_name} verification suite");
    let outcomes = run_level(level);
    for o in &outcomes {
        let tag = if o.passed { "  ok  " } else { " FAIL " };
        println!("[{tag}] {:<32} {:>7.2}s  {}", o.name, o.seconds, o.detail);
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed}/{} checks passed", outcomes.len());
    let all_green = passed == outcomes.len();

    let json_text = serde_json::to_string_pretty(&outcomes).expect("outcomes serialize");
    ctx.write_artifact(&mut m, "verify.json", &json_text)?;
    m.extra = json!({ "passed": passed, "total": outcomes.len() });
    m.finish(&ctx.out)?;
    Ok(all_green)
}

/// Validate every recognized artifact under the run directory. Read-only:
/// writing a manifest here would clobber the artifacts being checked.
pub fn cmd_schema_check(ctx: &Ctx) -> Result<bool, CliError> {
    if !ctx.out.is_dir() {
        return Err(CliError::Usage(format!(
            "{} is not a directory (point --out at a run directory)",
            ctx.out.display()
        )));
    }
    let reports = validate_dir(&ctx.out)?;
    if reports.is_empty() {
        return Err(CliError::Usage(format!(
            "no recognized artifacts under {}",
            ctx.out.display()
        )));
    }
    for r in &reports {
        let tag = if r.ok { "  ok  " } else { " FAIL " };
        println!("[{tag}] {} ({})", r.file, r.detail);
    }
    let passed = reports.iter().filter(|r| r.ok).count();
    println!("{passed}/{} files conform", reports.len());
    Ok(passed == reports.len())
}
