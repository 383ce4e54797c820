//! Labeled datasets: IDX and CSV loaders plus a synthetic Gaussian-blob
//! generator. All features are normalized to `[−1, 1]`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[N × d_x]`, values in `[−1, 1]`.
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::Invalid(format!("dataset features must be 2-d, got {:?}", x.shape())));
        }
        if x.rows() != y.len() {
            return Err(Error::Invalid(format!(
                "{} feature rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::Invalid(format!("label {bad} out of range for {classes} classes")));
        }
        if x.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Invalid("features outside [-1, 1]".into()));
        }
        Ok(Self { x, y, classes, split })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.row_len()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let actual = read_u32(bytes, 0, what)?;
    if actual != expected {
        return Err(Error::Format(format!(
            "{what}: bad magic, expected {expected:#010x}, found {actual:#010x}"
        )));
    }
    Ok(())
}

/// Decodes an IDX image file into `(count, pixels per item, raw bytes)`.
fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    check_magic(bytes, IDX_IMAGE_MAGIC, "images")?;
    let n = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format("images: zero-sized file".into()));
    }
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() != want {
        return Err(Error::Format(format!(
            "images: expected {want} pixel bytes, found {}",
            body.len()
        )));
    }
    Ok((n, rows * cols, body))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, IDX_LABEL_MAGIC, "labels")?;
    let n = read_u32(bytes, 4, "labels")? as usize;
    if n == 0 {
        return Err(Error::Format("labels: zero items".into()));
    }
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "labels: expected {n} label bytes, found {}",
            body.len()
        )));
    }
    Ok(body)
}

/// Pixel byte to `[−1, 1]`.
pub fn pixel_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`pixel_to_unit`], rounding to the nearest byte.
pub fn unit_to_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Parses big-endian IDX image/label buffers.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n, d, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let x = Tensor::new(vec![n, d], pixels.iter().map(|&p| pixel_to_unit(p)).collect())?;
    let y: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = y.iter().max().map_or(0, |m| m + 1);
    Dataset::new(x, y, classes, Split::Train)
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    parse_idx(&fs::read(images)?, &fs::read(labels)?)
}

/// Writes `data` as an IDX image file (`rows × cols` per item) and label file.
pub fn write_idx(
    data: &Dataset,
    rows: usize,
    cols: usize,
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<()> {
    if rows * cols != data.dim() {
        return Err(Error::Invalid(format!(
            "{rows}x{cols} does not match feature width {}",
            data.dim()
        )));
    }
    if data.classes > 256 {
        return Err(Error::Invalid("IDX labels hold at most 256 classes".into()));
    }
    let n = data.len() as u32;
    let mut img = Vec::with_capacity(16 + data.x.numel());
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend(data.x.data().iter().map(|&v| unit_to_pixel(v)));
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(data.y.iter().map(|&l| l as u8));
    fs::File::create(images)?.write_all(&img)?;
    fs::File::create(labels)?.write_all(&lab)?;
    Ok(())
}

/// Loads a headed numeric CSV. Features are min-max scaled per column to
/// `[−1, 1]` (constant columns map to 0); labels are factorized in order of
/// first appearance.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Format(format!("label column `{label_column}` not found")))?;

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len() - 1];
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    let mut y = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let mut k = 0;
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if j == label_idx {
                let next = label_ids.len();
                y.push(*label_ids.entry(cell.to_string()).or_insert(next));
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Format(format!("row {}: non-numeric cell `{cell}` in column `{}`", line + 2, &headers[j]))
            })?;
            if !v.is_finite() {
                return Err(Error::Format(format!("row {}: non-finite cell", line + 2)));
            }
            columns[k].push(v);
            k += 1;
        }
    }
    if y.is_empty() {
        return Err(Error::Format("csv has no data rows".into()));
    }
    if columns.is_empty() {
        return Err(Error::Format("csv has no feature columns".into()));
    }
    for col in &mut columns {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in col.iter_mut() {
            *v = if hi > lo { 2.0 * (*v - lo) / (hi - lo) - 1.0 } else { 0.0 };
        }
    }
    let n = y.len();
    let d = columns.len();
    let mut x = Vec::with_capacity(n * d);
    for i in 0..n {
        x.extend(columns.iter().map(|c| c[i]));
    }
    Dataset::new(Tensor::new(vec![n, d], x)?, y, label_ids.len(), Split::Train)
}

/// Writes features and labels as a headed CSV (`x0,…,x{d−1},label`).
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.y[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Isotropic Gaussian clusters around fixed class means.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    /// One mean vector per class.
    pub means: Vec<Vec<f64>>,
    /// Shared per-coordinate standard deviation.
    pub std: f64,
    pub per_class: usize,
    pub seed: u64,
}

impl BlobSpec {
    /// Class means drawn uniformly from `[−spread, spread]^dim` using
    /// `means_seed`; samples drawn with `seed`.
    pub fn random_means(
        classes: usize,
        dim: usize,
        spread: f64,
        std: f64,
        per_class: usize,
        means_seed: u64,
        seed: u64,
    ) -> Self {
        let mut rng = Rng::new(means_seed);
        let means = (0..classes)
            .map(|_| (0..dim).map(|_| rng.uniform(-spread, spread)).collect())
            .collect();
        Self {
            classes,
            dim,
            means,
            std,
            per_class,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.per_class == 0 {
            return Err(Error::Invalid("blobs need ≥2 classes, dim > 0 and samples per class > 0".into()));
        }
        if self.means.len() != self.classes || self.means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::Invalid("one mean of length dim per class is required".into()));
        }
        if !(self.std >= 0.0 && self.std.is_finite()) {
            return Err(Error::Invalid("std must be non-negative".into()));
        }
        for i in 0..self.classes {
            for j in i + 1..self.classes {
                if self.means[i] == self.means[j] {
                    return Err(Error::Invalid(format!("class means {i} and {j} coincide")));
                }
            }
        }
        Ok(())
    }
}

/// Samples `per_class` points per class (class-major order), clipped to
/// `[−1, 1]`.
pub fn generate_blobs(spec: &BlobSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let n = spec.classes * spec.per_class;
    let mut x = Vec::with_capacity(n * spec.dim);
    let mut y = Vec::with_capacity(n);
    for (c, mean) in spec.means.iter().enumerate() {
        for _ in 0..spec.per_class {
            x.extend(mean.iter().map(|m| (m + spec.std * rng.normal()).clamp(-1.0, 1.0)));
            y.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, spec.dim], x)?, y, spec.classes, Split::Train)
}
