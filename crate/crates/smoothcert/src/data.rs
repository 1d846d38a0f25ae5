//! Dataset ingestion (IDX ubyte files), stratified subsampling, synthetic
//! Gaussian-cluster datasets for the low-dimensional oracle arena, and CSV
//! persistence.
//!
//! Inputs are always normalized to [0,1]; the noise scales used elsewhere
//! assume that range. Loaders return typed errors for malformed files and
//! never panic on corrupt input.

use crate::rng::{fnv1a64, Purpose, RngStream};
use crate::tensor::Tensor;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic number {got} (expected {want})")]
    Magic { got: u32, want: u32 },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("value out of range: {0}")]
    Range(String),
    #[error("stratified sample unsatisfiable: {0}")]
    Stratification(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("csv parse error at line {line}: {detail}")]
    Csv { line: usize, detail: String },
}

/// Labeled inputs in [0,1]^d.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    /// `n x d`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.inputs.rows() != self.labels.len() {
            return Err(DataError::CountMismatch {
                images: self.inputs.rows(),
                labels: self.labels.len(),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(DataError::Range(format!(
                "label {bad} with {} classes",
                self.num_classes
            )));
        }
        if let Some(bad) = self
            .inputs
            .data()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::Range(format!("input value {bad} outside [0,1]")));
        }
        Ok(())
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, indices: &[usize], name: &str) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            name: name.to_string(),
            inputs: Tensor::from_vec(&[indices.len(), d], data).expect("rows are finite"),
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Content fingerprint for manifests (fnv1a64 over dims, labels, and
    /// input bit patterns).
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(16 + self.labels.len() + self.inputs.len() * 8);
        bytes.extend_from_slice(&(self.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.num_classes as u64).to_le_bytes());
        for &l in &self.labels {
            bytes.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for v in self.inputs.data() {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}

fn read_u32_be(bytes: &[u8], pos: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Truncated(what.to_string()))
}

const IDX_IMAGE_MAGIC: u32 = 2051;
const IDX_LABEL_MAGIC: u32 = 2049;

/// Load an IDX image/label file pair (big-endian headers, magics 2051 and
/// 2049). Pixels are scaled by 1/255 into [0,1]; the class count is the
/// largest label + 1.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let mut img_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let magic = read_u32_be(&img_bytes, 0, "image header")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::Magic {
            got: magic,
            want: IDX_IMAGE_MAGIC,
        });
    }
    let n = read_u32_be(&img_bytes, 4, "image count")? as usize;
    let rows = read_u32_be(&img_bytes, 8, "image rows")? as usize;
    let cols = read_u32_be(&img_bytes, 12, "image cols")? as usize;
    let d = rows * cols;
    let want = 16 + n * d;
    if img_bytes.len() < want {
        return Err(DataError::Truncated(format!(
            "image payload: have {} bytes, need {want}",
            img_bytes.len()
        )));
    }

    let mut lab_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut lab_bytes)?;
    let magic = read_u32_be(&lab_bytes, 0, "label header")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DataError::Magic {
            got: magic,
            want: IDX_LABEL_MAGIC,
        });
    }
    let n_labels = read_u32_be(&lab_bytes, 4, "label count")? as usize;
    if n_labels != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    if lab_bytes.len() < 8 + n {
        return Err(DataError::Truncated(format!(
            "label payload: have {} bytes, need {}",
            lab_bytes.len(),
            8 + n
        )));
    }

    let mut data = Vec::with_capacity(n * d);
    for &b in &img_bytes[16..16 + n * d] {
        data.push(b as f64 / 255.0);
    }
    let labels: Vec<usize> = lab_bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    let ds = Dataset {
        name,
        inputs: Tensor::from_vec(&[n, d], data)
            .map_err(|e| DataError::Range(e.to_string()))?,
        labels,
        num_classes,
    };
    ds.validate()?;
    Ok(ds)
}

/// Class-stratified index sample without replacement: per-class counts
/// differ by at most 1 from n/C (remainder goes to the lowest class
/// indices). `exclude` rows are never drawn; deterministic given the stream.
pub fn stratified_indices(
    ds: &Dataset,
    n: usize,
    exclude: &[usize],
    rng: &mut RngStream,
) -> Result<Vec<usize>, DataError> {
    if n > ds.len() {
        return Err(DataError::Parameter(format!(
            "requested {n} of {} rows",
            ds.len()
        )));
    }
    let c = ds.num_classes;
    let mut excluded = vec![false; ds.len()];
    for &e in exclude {
        excluded[e] = true;
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in ds.labels.iter().enumerate() {
        if !excluded[i] {
            pools[l].push(i);
        }
    }
    let base = n / c;
    let rem = n % c;
    let mut out = Vec::with_capacity(n);
    for (class, pool) in pools.iter_mut().enumerate() {
        let want = base + usize::from(class < rem);
        if pool.len() < want {
            return Err(DataError::Stratification(format!(
                "class {class} has {} available rows, need {want}",
                pool.len()
            )));
        }
        rng.shuffle(pool);
        out.extend_from_slice(&pool[..want]);
    }
    // Interleave classes so any prefix is roughly balanced.
    rng.shuffle(&mut out);
    Ok(out)
}

/// Class-stratified sample of `n` rows without replacement.
pub fn subset(ds: &Dataset, n: usize, rng: &mut RngStream) -> Result<Dataset, DataError> {
    let idx = stratified_indices(ds, n, &[], rng)?;
    Ok(ds.select(&idx, &format!("{}-subset{}", ds.name, n)))
}

/// Two disjoint stratified samples (train, test) from one pool.
pub fn split(
    ds: &Dataset,
    n_train: usize,
    n_test: usize,
    rng: &mut RngStream,
) -> Result<(Dataset, Dataset), DataError> {
    let train_idx = stratified_indices(ds, n_train, &[], rng)?;
    let test_idx = stratified_indices(ds, n_test, &train_idx, rng)?;
    Ok((
        ds.select(&train_idx, &format!("{}-train{}", ds.name, n_train)),
        ds.select(&test_idx, &format!("{}-test{}", ds.name, n_test)),
    ))
}

/// Centroids for the synthetic clusters: evenly spaced on [0.25, 0.75] in
/// 1-D, on the radius-0.25 circle around (0.5, 0.5) in 2-D.
pub fn blob_centroids(d: usize, classes: usize) -> Result<Vec<Vec<f64>>, DataError> {
    if !(d == 1 || d == 2) {
        return Err(DataError::Parameter(format!("blobs need d in {{1,2}}, got {d}")));
    }
    if classes == 0 {
        return Err(DataError::Parameter("classes must be positive".into()));
    }
    let mut cents = Vec::with_capacity(classes);
    for k in 0..classes {
        if d == 1 {
            let t = if classes == 1 {
                0.5
            } else {
                0.25 + 0.5 * k as f64 / (classes - 1) as f64
            };
            cents.push(vec![t]);
        } else {
            let ang = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
            cents.push(vec![0.5 + 0.25 * ang.cos(), 0.5 + 0.25 * ang.sin()]);
        }
    }
    Ok(cents)
}

/// Cluster standard deviation implied by a separation factor: the minimum
/// centroid distance divided by `separation`. Larger separation means
/// tighter, more separable clusters.
pub fn blob_std(d: usize, classes: usize, separation: f64) -> Result<f64, DataError> {
    let cents = blob_centroids(d, classes)?;
    if classes == 1 {
        return Ok(0.1 / separation);
    }
    let mut min_dist = f64::INFINITY;
    for i in 0..cents.len() {
        for j in (i + 1)..cents.len() {
            let dist = cents[i]
                .iter()
                .zip(&cents[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(dist);
        }
    }
    Ok(min_dist / separation)
}

/// Gaussian clusters in [0,1]^d, d in {1,2}: balanced labels (remainder to
/// the lowest classes), class-conditional N(centroid, std^2 I) clipped to
/// the unit box, then one global shuffle. Deterministic for a given seed.
pub fn make_blobs(
    n: usize,
    d: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if !(separation > 0.0) {
        return Err(DataError::Parameter(format!("separation {separation}")));
    }
    if n < classes {
        return Err(DataError::Parameter(format!(
            "n {n} smaller than class count {classes}"
        )));
    }
    let cents = blob_centroids(d, classes)?;
    let std = blob_std(d, classes, separation)?;
    let base = n / classes;
    let rem = n % classes;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for (class, cent) in cents.iter().enumerate() {
        let count = base + usize::from(class < rem);
        let mut rng = RngStream::substream(seed, Purpose::DataSynth, &[class as u64]);
        for _ in 0..count {
            let x: Vec<f64> = cent
                .iter()
                .map(|c| (c + std * rng.normal()).clamp(0.0, 1.0))
                .collect();
            rows.push((x, class));
        }
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    RngStream::substream(seed, Purpose::DataSynth, &[u64::MAX]).shuffle(&mut order);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for &i in &order {
        data.extend_from_slice(&rows[i].0);
        labels.push(rows[i].1);
    }
    let ds = Dataset {
        name: format!("blobs-n{n}-d{d}-c{classes}"),
        inputs: Tensor::from_vec(&[n, d], data).expect("clamped values are finite"),
        labels,
        num_classes: classes,
    };
    ds.validate()?;
    Ok(ds)
}

/// Persist a dataset as CSV with header `x0,...,x{d-1},label`. Values use
/// shortest round-trip formatting, so writes are byte-deterministic.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    use std::io::Write;
    let mut out = String::new();
    let d = ds.dim();
    for j in 0..d {
        out.push_str(&format!("x{j},"));
    }
    out.push_str("label\n");
    for i in 0..ds.len() {
        for v in ds.inputs.row(i) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", ds.labels[i]));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DataError::Csv {
        line: 1,
        detail: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols.last() != Some(&"label") {
        return Err(DataError::Csv {
            line: 1,
            detail: format!("header must be x0,...,label; got {header:?}"),
        });
    }
    let d = cols.len() - 1;
    for (j, c) in cols[..d].iter().enumerate() {
        if *c != format!("x{j}") {
            return Err(DataError::Csv {
                line: 1,
                detail: format!("column {j} named {c:?}, expected x{j}"),
            });
        }
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != d + 1 {
            return Err(DataError::Csv {
                line: ln + 1,
                detail: format!("{} fields, expected {}", parts.len(), d + 1),
            });
        }
        for p in &parts[..d] {
            let v: f64 = p.parse().map_err(|e| DataError::Csv {
                line: ln + 1,
                detail: format!("bad float {p:?}: {e}"),
            })?;
            data.push(v);
        }
        let l: usize = parts[d].parse().map_err(|e| DataError::Csv {
            line: ln + 1,
            detail: format!("bad label {:?}: {e}", parts[d]),
        })?;
        labels.push(l);
    }
    let n = labels.len();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    let ds = Dataset {
        name,
        inputs: Tensor::from_vec(&[n, d], data).map_err(|e| DataError::Range(e.to_string()))?,
        labels,
        num_classes,
    };
    ds.validate()?;
    Ok(ds)
}
