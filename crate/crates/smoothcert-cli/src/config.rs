//! Flat key/value run configuration.
//!
//! A config file is plain text: one `key = value` pair per line, `#` comments,
//! blank lines ignored. Keys are dotted paths (`train.epochs`); every key must
//! appear in [`KNOWN_KEYS`], so typos fail loudly with the offending key and
//! line number instead of silently falling back to a default. `--set key=value`
//! entries overlay the file and take the highest precedence.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `key = value`, got {text:?}")]
    Syntax { path: String, line: usize, text: String },
    #[error("{path}:{line}: unknown config key `{key}` (the README lists every key)")]
    UnknownKey { path: String, line: usize, key: String },
    #[error("{path}:{line}: duplicate key `{key}` (first set on line {first})")]
    Duplicate { path: String, line: usize, first: usize, key: String },
    #[error("--set {entry:?}: expected `key=value`")]
    SetSyntax { entry: String },
    #[error("--set: unknown config key `{key}`")]
    SetUnknownKey { key: String },
    #[error("config key `{key}`: {detail}")]
    Value { key: String, detail: String },
    #[error("missing required config key `{key}` ({hint})")]
    Missing { key: String, hint: &'static str },
}

/// Every key the configuration system accepts, with a one-line meaning.
/// `schema-check` and the README both render this table.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("seed", "base RNG seed for the run (the --seed flag overrides it)"),
    ("threads", "worker threads (the --threads flag overrides it)"),
    ("data.kind", "dataset source: blobs | mnist | csv"),
    ("data.seed", "dataset generation/split seed (defaults to the run seed)"),
    ("data.n", "training rows"),
    ("data.n_test", "test rows"),
    ("data.dim", "blobs: input dimension"),
    ("data.classes", "blobs: class count"),
    ("data.separation", "blobs: centroid separation in cluster widths"),
    ("data.train_csv", "csv: path to the training CSV"),
    ("data.test_csv", "csv: path to the test CSV"),
    ("data.mnist_images", "mnist: IDX image file path"),
    ("data.mnist_labels", "mnist: IDX label file path"),
    ("model.hidden", "comma list of hidden widths, e.g. 256,256"),
    ("model.activation", "hidden activation: relu | elu"),
    ("model.path", "path to a saved model (attack/certify/bound/transfer input)"),
    ("train.method", "training method: natural | noise | pgd_at | wrm | nal"),
    ("train.epochs", "training epochs"),
    ("train.eta2", "outer SGD learning rate"),
    ("train.batch_size", "minibatch size"),
    ("train.gamma", "transport penalty weight for the inner ascent"),
    ("train.k_iters", "inner ascent iterations"),
    ("train.eta1", "inner ascent step size (defaults to 0.5/gamma)"),
    ("train.cost_mode", "where the transport penalty is measured: noisy | clean"),
    ("train.attack_eps", "pgd_at: training attack radius"),
    ("train.attack_iters", "pgd_at: training attack iterations"),
    ("noise.sigma", "smoothing noise level"),
    ("noise.r", "noise draws per point"),
    ("eval.attack_eps", "evaluation attack radius (attack command: comma list)"),
    ("eval.attack_iters", "evaluation attack iterations"),
    ("eval.noise_at_test", "majority-vote prediction under noise: auto | on | off"),
    ("certify.sigma", "certification noise level"),
    ("certify.n0", "class-selection draws"),
    ("certify.n", "probability-estimation draws"),
    ("certify.alpha", "certification failure probability"),
    ("certify.mode", "bound mode: one_sided | two_class"),
    ("certify.radii", "comma list of radii for the certified-accuracy curve (empty = auto)"),
    ("certify.limit", "certify only the first k test rows (0 = all)"),
    ("bound.gammas", "comma list of penalty weights for the certificate curve"),
    ("bound.k_iters", "ascent iterations per anchor"),
    ("bound.eta1", "ascent step size (empty = 0.5/gamma per curve)"),
    ("bound.cost_mode", "transport-cost measurement: noisy | clean"),
    ("bound.rho_grid", "comma list of budget values (empty = auto around the measured cost)"),
    ("bound.limit", "bound only the first k test rows (0 = all)"),
    ("transfer.methods", "comma list of methods to train and cross-attack"),
    ("verify.level", "verification depth: quick | full"),
];

fn known(key: &str) -> bool {
    KNOWN_KEYS.iter().any(|(k, _)| *k == key)
}

/// Effective configuration: file values overlaid with `--set` pairs.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parse `path` (when given) and overlay `sets` on top.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, ConfigError> {
        let mut values = BTreeMap::new();
        if let Some(p) = path {
            let display = p.display().to_string();
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: display.clone(),
                source,
            })?;
            let mut seen: BTreeMap<String, usize> = BTreeMap::new();
            for (idx, raw) in text.lines().enumerate() {
                let line_no = idx + 1;
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(ConfigError::Syntax {
                        path: display.clone(),
                        line: line_no,
                        text: raw.to_string(),
                    });
                };
                let key = key.trim();
                let value = value.trim();
                if !known(key) {
                    return Err(ConfigError::UnknownKey {
                        path: display.clone(),
                        line: line_no,
                        key: key.to_string(),
                    });
                }
                if let Some(first) = seen.insert(key.to_string(), line_no) {
                    return Err(ConfigError::Duplicate {
                        path: display.clone(),
                        line: line_no,
                        first,
                        key: key.to_string(),
                    });
                }
                values.insert(key.to_string(), value.to_string());
            }
        }
        for entry in sets {
            let Some((key, value)) = entry.split_once('=') else {
                return Err(ConfigError::SetSyntax { entry: entry.clone() });
            };
            let key = key.trim();
            if !known(key) {
                return Err(ConfigError::SetUnknownKey { key: key.to_string() });
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(RunConfig { values })
    }

    /// Sorted view of the effective key/value pairs, for the run manifest.
    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        debug_assert!(known(key), "getter used an unregistered key {key}");
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.str(key).unwrap_or(default)
    }

    pub fn require_str(&self, key: &str, hint: &'static str) -> Result<&str, ConfigError> {
        self.str(key).ok_or(ConfigError::Missing { key: key.to_string(), hint })
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, raw: &str, what: &str) -> Result<T, ConfigError> {
        raw.parse().map_err(|_| ConfigError::Value {
            key: key.to_string(),
            detail: format!("{raw:?} is not {what}"),
        })
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.str(key) {
            None => Ok(default),
            Some(raw) => self.parse(key, raw, "an unsigned integer"),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.str(key) {
            None => Ok(default),
            Some(raw) => self.parse(key, raw, "an unsigned integer"),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.str(key) {
            None => Ok(default),
            Some(raw) => self.parse(key, raw, "a number"),
        }
    }

    pub fn require_f64(&self, key: &str, hint: &'static str) -> Result<f64, ConfigError> {
        let raw = self.require_str(key, hint)?;
        self.parse(key, raw, "a number")
    }

    /// Comma-separated list of numbers; `None` when the key is absent or empty.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(raw) = self.str(key) else { return Ok(None) };
        if raw.is_empty() {
            return Ok(None);
        }
        raw.split(',')
            .map(|part| self.parse(key, part.trim(), "a number"))
            .collect::<Result<Vec<f64>, _>>()
            .map(Some)
    }

    /// Comma-separated list of identifiers; `None` when absent or empty.
    pub fn str_list(&self, key: &str) -> Option<Vec<String>> {
        let raw = self.str(key)?;
        if raw.is_empty() {
            return None;
        }
        Some(raw.split(',').map(|p| p.trim().to_string()).collect())
    }

    pub fn usize_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>, ConfigError> {
        match self.str(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|part| self.parse(key, part.trim(), "an unsigned integer"))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_file_and_set_overlay() {
        let f = write_temp("# comment\n\ndata.kind = blobs\ntrain.epochs = 5\n");
        let cfg = RunConfig::load(Some(f.path()), &["train.epochs=9".into()]).unwrap();
        assert_eq!(cfg.str("data.kind"), Some("blobs"));
        assert_eq!(cfg.usize_or("train.epochs", 1).unwrap(), 9);
        assert_eq!(cfg.usize_or("train.batch_size", 128).unwrap(), 128);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let f = write_temp("data.kind = blobs\ntrain.epocs = 5\n");
        let err = RunConfig::load(Some(f.path()), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.epocs"), "{msg}");
        assert!(msg.contains(":2:"), "{msg}");
    }

    #[test]
    fn duplicate_key_reports_both_lines() {
        let f = write_temp("seed = 1\nseed = 2\n");
        let msg = RunConfig::load(Some(f.path()), &[]).unwrap_err().to_string();
        assert!(msg.contains("duplicate key `seed`"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_temp("data.kind blobs\n");
        let msg = RunConfig::load(Some(f.path()), &[]).unwrap_err().to_string();
        assert!(msg.contains(":1:"), "{msg}");
        assert!(msg.contains("key = value"), "{msg}");
    }

    #[test]
    fn set_rejects_unknown_key_and_bad_syntax() {
        let err = RunConfig::load(None, &["nope=1".into()]).unwrap_err();
        assert!(err.to_string().contains("nope"));
        let err = RunConfig::load(None, &["data.kind".into()]).unwrap_err();
        assert!(err.to_string().contains("key=value"));
    }

    #[test]
    fn typed_getters_name_the_key_on_bad_values() {
        let cfg = RunConfig::load(None, &["train.epochs=five".into()]).unwrap();
        let msg = cfg.usize_or("train.epochs", 1).unwrap_err().to_string();
        assert!(msg.contains("train.epochs"), "{msg}");
        assert!(msg.contains("five"), "{msg}");
    }

    #[test]
    fn lists_parse_and_empty_means_absent() {
        let cfg = RunConfig::load(
            None,
            &["bound.gammas=0.25, 1.5,3".into(), "certify.radii=".into()],
        )
        .unwrap();
        assert_eq!(cfg.f64_list("bound.gammas").unwrap(), Some(vec![0.25, 1.5, 3.0]));
        assert_eq!(cfg.f64_list("certify.radii").unwrap(), None);
    }
}
