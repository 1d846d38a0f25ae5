//! CSV schema validation for run directories.
//!
//! Every CSV the toolkit writes has a fixed name and a fixed header; the
//! validator for each file checks the header, every cell's type and range, and
//! the row-level invariants a correct producer cannot break (sorted epsilon
//! grids, non-increasing certified-accuracy curves, robust <= clean, ...).

use std::path::Path;

/// Outcome of validating one file.
#[derive(Debug)]
pub struct FileReport {
    pub file: String,
    pub ok: bool,
    /// Row count on success, error description on failure.
    pub detail: String,
}

fn fail(file: &Path, detail: String) -> FileReport {
    FileReport { file: file.display().to_string(), ok: false, detail }
}

fn pass(file: &Path, rows: usize) -> FileReport {
    FileReport { file: file.display().to_string(), ok: true, detail: format!("{rows} rows") }
}

struct Row<'a> {
    line: usize,
    cells: Vec<&'a str>,
}

/// Split CSV text into header + rows, enforcing the exact header.
fn rows_with_header<'a>(text: &'a str, header: &str) -> Result<Vec<Row<'a>>, String> {
    let mut lines = text.lines().enumerate();
    let Some((_, first)) = lines.next() else {
        return Err("empty file".into());
    };
    if first != header {
        return Err(format!("header {first:?}, expected {header:?}"));
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        out.push(Row { line: idx + 1, cells: line.split(',').collect() });
    }
    if out.is_empty() {
        return Err("no data rows".into());
    }
    let want = header.split(',').count();
    for r in &out {
        if r.cells.len() != want {
            return Err(format!("line {}: {} fields, expected {want}", r.line, r.cells.len()));
        }
    }
    Ok(out)
}

fn cell_f64(r: &Row, col: usize, name: &str) -> Result<f64, String> {
    let raw = r.cells[col];
    let v: f64 = raw.parse().map_err(|_| format!("line {}: {name}={raw:?} is not a number", r.line))?;
    if !v.is_finite() {
        return Err(format!("line {}: {name}={raw} is not finite", r.line));
    }
    Ok(v)
}

fn cell_unit(r: &Row, col: usize, name: &str) -> Result<f64, String> {
    let v = cell_f64(r, col, name)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("line {}: {name}={v} outside [0,1]", r.line));
    }
    Ok(v)
}

fn cell_usize(r: &Row, col: usize, name: &str) -> Result<usize, String> {
    let raw = r.cells[col];
    raw.parse().map_err(|_| format!("line {}: {name}={raw:?} is not an unsigned integer", r.line))
}

fn cell_bool(r: &Row, col: usize, name: &str) -> Result<bool, String> {
    match r.cells[col] {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("line {}: {name}={other:?} is not true/false", r.line)),
    }
}

fn check_cert(text: &str) -> Result<usize, String> {
    let rows = rows_with_header(text, "index,label,predicted,pA_lower,pB_upper,radius,abstain,correct")?;
    for r in &rows {
        let label = cell_usize(r, 1, "label")?;
        let predicted = cell_usize(r, 2, "predicted")?;
        let pa = cell_unit(r, 3, "pA_lower")?;
        let pb = cell_unit(r, 4, "pB_upper")?;
        let radius = cell_f64(r, 5, "radius")?;
        let abstain = cell_bool(r, 6, "abstain")?;
        let correct = cell_bool(r, 7, "correct")?;
        if radius < 0.0 {
            return Err(format!("line {}: radius {radius} < 0", r.line));
        }
        if abstain && radius != 0.0 {
            return Err(format!("line {}: abstaining row has radius {radius}", r.line));
        }
        if abstain && correct {
            return Err(format!("line {}: abstaining row marked correct", r.line));
        }
        if !abstain && correct != (predicted == label) {
            return Err(format!("line {}: correct flag disagrees with labels", r.line));
        }
        if !abstain && (radius <= 0.0 || pa <= pb) {
            // A positive radius requires the top-class lower bound to clear
            // the runner-up upper bound; anything else must abstain.
            return Err(format!(
                "line {}: non-abstaining row with radius {radius}, pA_lower {pa}, pB_upper {pb}",
                r.line
            ));
        }
    }
    Ok(rows.len())
}

fn check_curve(text: &str) -> Result<usize, String> {
    let rows = rows_with_header(text, "radius,certified_accuracy")?;
    let mut prev: Option<(f64, f64)> = None;
    for r in &rows {
        let radius = cell_f64(r, 0, "radius")?;
        let acc = cell_unit(r, 1, "certified_accuracy")?;
        if radius < 0.0 {
            return Err(format!("line {}: radius {radius} < 0", r.line));
        }
        if let Some((pr, pa)) = prev {
            if radius < pr {
                return Err(format!("line {}: radius grid not ascending", r.line));
            }
            if acc > pa + 1e-12 {
                return Err(format!("line {}: certified accuracy increased with radius", r.line));
            }
        }
        prev = Some((radius, acc));
    }
    Ok(rows.len())
}

fn check_bound(text: &str) -> Result<usize, String> {
    let rows = rows_with_header(text, "gamma,rho,bound,rho_test,worst_case_loss")?;
    let mut prev: Option<(f64, f64, f64)> = None; // (gamma, rho, bound)
    for r in &rows {
        let gamma = cell_f64(r, 0, "gamma")?;
        let rho = cell_f64(r, 1, "rho")?;
        let bound = cell_f64(r, 2, "bound")?;
        let rho_test = cell_f64(r, 3, "rho_test")?;
        cell_f64(r, 4, "worst_case_loss")?;
        if gamma <= 0.0 {
            return Err(format!("line {}: gamma {gamma} <= 0", r.line));
        }
        if rho < 0.0 || rho_test < 0.0 {
            return Err(format!("line {}: negative budget", r.line));
        }
        if let Some((pg, pr, pb)) = prev {
            if gamma == pg {
                if rho < pr {
                    return Err(format!("line {}: rho grid not ascending within gamma", r.line));
                }
                if bound + 1e-12 < pb {
                    return Err(format!("line {}: bound decreased along rho", r.line));
                }
            }
        }
        prev = Some((gamma, rho, bound));
    }
    Ok(rows.len())
}

fn check_attack(text: &str) -> Result<usize, String> {
    let rows = rows_with_header(text, "epsilon,clean_accuracy,robust_accuracy")?;
    let mut prev_eps = f64::NEG_INFINITY;
    for r in &rows {
        let eps = cell_f64(r, 0, "epsilon")?;
        let clean = cell_unit(r, 1, "clean_accuracy")?;
        let robust = cell_unit(r, 2, "robust_accuracy")?;
        if eps <= 0.0 {
            return Err(format!("line {}: epsilon {eps} <= 0", r.line));
        }
        if eps < prev_eps {
            return Err(format!("line {}: epsilon grid not ascending", r.line));
        }
        if robust > clean + 1e-12 {
            return Err(format!("line {}: robust accuracy {robust} above clean {clean}", r.line));
        }
        prev_eps = eps;
    }
    Ok(rows.len())
}

fn check_transfer(text: &str) -> Result<usize, String> {
    let rows = rows_with_header(text, "source,target,accuracy")?;
    let methods = ["natural", "noise", "pgd_at", "wrm", "nal"];
    for r in &rows {
        for (col, name) in [(0usize, "source"), (1, "target")] {
            if !methods.contains(&r.cells[col]) {
                return Err(format!("line {}: {name}={:?} is not a known method", r.line, r.cells[col]));
            }
        }
        cell_unit(r, 2, "accuracy")?;
    }
    let n = rows.len();
    let k = (n as f64).sqrt().round() as usize;
    if k * k != n {
        return Err(format!("{n} rows do not form a square source x target matrix"));
    }
    Ok(n)
}

fn check_history(text: &str) -> Result<usize, String> {
    let rows = rows_with_header(text, "epoch,surrogate_loss,clean_loss")?;
    for (i, r) in rows.iter().enumerate() {
        let epoch = cell_usize(r, 0, "epoch")?;
        if epoch != i + 1 {
            return Err(format!("line {}: epoch {epoch}, expected {}", r.line, i + 1));
        }
        cell_f64(r, 1, "surrogate_loss")?;
        cell_f64(r, 2, "clean_loss")?;
    }
    Ok(rows.len())
}

fn check_eval(text: &str) -> Result<usize, String> {
    let rows = rows_with_header(text, "method,n_test,clean_accuracy,robust_accuracy")?;
    let methods = ["natural", "noise", "pgd_at", "wrm", "nal"];
    for r in &rows {
        if !methods.contains(&r.cells[0]) {
            return Err(format!("line {}: method {:?} is not known", r.line, r.cells[0]));
        }
        let n = cell_usize(r, 1, "n_test")?;
        if n == 0 {
            return Err(format!("line {}: n_test is zero", r.line));
        }
        let clean = cell_unit(r, 2, "clean_accuracy")?;
        let robust = cell_unit(r, 3, "robust_accuracy")?;
        if robust > clean + 1e-12 {
            return Err(format!("line {}: robust accuracy above clean", r.line));
        }
    }
    Ok(rows.len())
}

/// Dataset CSVs round-trip through the library loader, which enforces the
/// header pattern, numeric cells, and label range.
fn check_dataset(path: &Path) -> Result<usize, String> {
    let ds = smoothcert::data::load_csv(path).map_err(|e| e.to_string())?;
    ds.validate().map_err(|e| e.to_string())?;
    Ok(ds.len())
}

fn check_manifest_json(text: &str) -> Result<usize, String> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    for field in ["schema", "command", "seed", "threads", "rng_algorithm", "checksum_algorithm", "config", "artifacts", "wall_seconds", "timestamp_unix_ms"] {
        if v.get(field).is_none() {
            return Err(format!("missing field {field:?}"));
        }
    }
    if v["schema"] != "run-manifest/v1" {
        return Err(format!("schema {:?}, expected run-manifest/v1", v["schema"]));
    }
    Ok(v["artifacts"].as_array().map(|a| a.len()).unwrap_or(0))
}

fn check_verify_json(text: &str) -> Result<usize, String> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let arr = v.as_array().ok_or("expected a JSON array of check outcomes")?;
    for (i, item) in arr.iter().enumerate() {
        for field in ["name", "passed", "detail", "seconds"] {
            if item.get(field).is_none() {
                return Err(format!("outcome {i}: missing field {field:?}"));
            }
        }
    }
    Ok(arr.len())
}

/// Validate one file by its basename; `None` when no schema applies.
pub fn validate_file(path: &Path) -> Option<FileReport> {
    let name = path.file_name()?.to_str()?;
    let by_text = |f: fn(&str) -> Result<usize, String>| -> FileReport {
        match std::fs::read_to_string(path) {
            Err(e) => fail(path, format!("cannot read: {e}")),
            Ok(text) => match f(&text) {
                Ok(rows) => pass(path, rows),
                Err(msg) => fail(path, msg),
            },
        }
    };
    match name {
        "cert.csv" => Some(by_text(check_cert)),
        "curve.csv" => Some(by_text(check_curve)),
        "bound.csv" => Some(by_text(check_bound)),
        "attack.csv" => Some(by_text(check_attack)),
        "transfer.csv" => Some(by_text(check_transfer)),
        "history.csv" => Some(by_text(check_history)),
        "eval.csv" => Some(by_text(check_eval)),
        "train.csv" | "test.csv" => Some(match check_dataset(path) {
            Ok(rows) => pass(path, rows),
            Err(msg) => fail(path, msg),
        }),
        "manifest.json" => Some(by_text(check_manifest_json)),
        "verify.json" => Some(by_text(check_verify_json)),
        other if other.ends_with(".csv") => {
            Some(fail(path, "no schema registered for this file name".into()))
        }
        _ => None,
    }
}

/// Recursively validate every recognized file under `dir`.
pub fn validate_dir(dir: &Path) -> std::io::Result<Vec<FileReport>> {
    let mut reports = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&d)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Some(report) = validate_file(&path) {
                reports.push(report);
            }
        }
    }
    Ok(reports)
}
