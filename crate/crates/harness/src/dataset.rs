//! Dataset sources: seeded synthetic 2-D tasks, IDX image files and CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hic_core::nn::Dataset;
use hic_core::rng::stream_key;
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SyntheticGaussians,
    SyntheticSpirals,
    ImageIdx,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    /// Per-feature zero mean, unit variance using training-set statistics.
    Standardize,
    /// Per-feature scaling by the training-set maximum magnitude.
    UnitRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    pub classes: usize,
    /// Synthetic sample counts.
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Gaussian standard deviation added to synthetic points.
    pub noise: f64,
    /// Radius of the circle holding the gaussian class centers.
    pub separation: f64,
    /// Spiral revolutions from center to rim.
    pub turns: f64,
    pub normalization: Normalization,
    pub split_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    /// CSV rows: features then an integer label in the last column.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<PathBuf>,
    /// Held-out fraction when only `train_csv` is given.
    pub test_fraction: f64,
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticSpirals,
            classes: 2,
            train_per_class: 2500,
            test_per_class: 250,
            noise: 0.05,
            separation: 1.0,
            turns: 1.0,
            normalization: Normalization::None,
            split_seed: 7,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_csv: None,
            test_csv: None,
            test_fraction: 0.2,
        }
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(format!("[dataset] {}", msg.into()))
}

impl DatasetSource {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.classes < 2 {
            return Err(config_err("classes must be >= 2"));
        }
        match self.kind {
            DatasetKind::SyntheticGaussians | DatasetKind::SyntheticSpirals => {
                if self.train_per_class == 0 || self.test_per_class == 0 {
                    return Err(config_err("train_per_class and test_per_class must be >= 1"));
                }
                if !(self.noise >= 0.0 && self.noise.is_finite()) {
                    return Err(config_err("noise must be >= 0"));
                }
            }
            DatasetKind::ImageIdx => {
                if self.train_images.is_none() || self.train_labels.is_none() || self.test_images.is_none() || self.test_labels.is_none() {
                    return Err(config_err("image-idx needs train_images, train_labels, test_images and test_labels"));
                }
            }
            DatasetKind::Csv => {
                if self.train_csv.is_none() {
                    return Err(config_err("csv needs train_csv"));
                }
                if self.test_csv.is_none() && !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
                    return Err(config_err("test_fraction must be in (0, 1)"));
                }
            }
        }
        Ok(())
    }
}

/// Train and test splits of one source.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

const DATA_TAG: u64 = 0xda7a;

fn synthetic(src: &DatasetSource, split: u64, per_class: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_key(src.split_seed, &[DATA_TAG, split]));
    let c = src.classes;
    let n = per_class * c;
    let mut x = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for (k, mut row) in x.rows_mut().into_iter().enumerate() {
        let class = k % c;
        let phase = std::f64::consts::TAU * class as f64 / c as f64;
        let (px, py) = match src.kind {
            DatasetKind::SyntheticGaussians => (src.separation * phase.cos(), src.separation * phase.sin()),
            _ => {
                let t: f64 = rng.random_range(0.05..1.0);
                let theta = std::f64::consts::TAU * src.turns * t + phase;
                (t * theta.cos(), t * theta.sin())
            }
        };
        let zx: f64 = StandardNormal.sample(&mut rng);
        let zy: f64 = StandardNormal.sample(&mut rng);
        row[0] = px + src.noise * zx;
        row[1] = py + src.noise * zy;
        labels.push(class);
    }
    Dataset::new(x.into_dyn(), labels, c).expect("consistent synthetic data")
}

/// Loads (or generates) the train/test splits and applies normalization.
pub fn load_dataset(src: &DatasetSource) -> Result<Splits, HarnessError> {
    src.validate()?;
    let mut splits = match src.kind {
        DatasetKind::SyntheticGaussians | DatasetKind::SyntheticSpirals => Splits {
            train: synthetic(src, 0, src.train_per_class),
            test: synthetic(src, 1, src.test_per_class),
        },
        DatasetKind::ImageIdx => {
            let p = |o: &Option<PathBuf>| o.clone().expect("validated");
            let train = idx_dataset(&p(&src.train_images), &p(&src.train_labels), src.classes)?;
            let test = idx_dataset(&p(&src.test_images), &p(&src.test_labels), src.classes)?;
            if train.feature_shape() != test.feature_shape() {
                return Err(config_err(format!(
                    "train images {:?} and test images {:?} differ in shape",
                    train.feature_shape(),
                    test.feature_shape()
                )));
            }
            Splits { train, test }
        }
        DatasetKind::Csv => {
            let train = read_csv(src.train_csv.as_ref().expect("validated"), src.classes)?;
            match &src.test_csv {
                Some(p) => {
                    let test = read_csv(p, src.classes)?;
                    if test.feature_shape() != train.feature_shape() {
                        return Err(config_err("train and test CSV files have different widths"));
                    }
                    Splits { train, test }
                }
                None => {
                    let mut idx: Vec<usize> = (0..train.len()).collect();
                    use rand::seq::SliceRandom;
                    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_key(src.split_seed, &[DATA_TAG, 2])));
                    let n_test = ((train.len() as f64 * src.test_fraction).round() as usize).clamp(1, train.len() - 1);
                    let (test_idx, train_idx) = idx.split_at(n_test);
                    let (mut a, mut b) = (train_idx.to_vec(), test_idx.to_vec());
                    a.sort_unstable();
                    b.sort_unstable();
                    Splits { train: train.subset(&a), test: train.subset(&b) }
                }
            }
        }
    };
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(config_err("train and test splits must be non-empty"));
    }
    normalize(&mut splits, src.normalization);
    Ok(splits)
}

fn normalize(s: &mut Splits, how: Normalization) {
    if how == Normalization::None {
        return;
    }
    let n = s.train.len();
    let width: usize = s.train.feature_shape().iter().product();
    let flat = |d: &Dataset| d.features.view().into_shape_with_order((d.len(), width)).expect("contiguous").to_owned();
    let train = flat(&s.train);
    let (shift, scale): (Vec<f64>, Vec<f64>) = train
        .axis_iter(Axis(1))
        .map(|col| match how {
            Normalization::Standardize => {
                let m = col.sum() / n as f64;
                let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
                (m, if v > 1e-24 { v.sqrt() } else { 1.0 })
            }
            _ => {
                let peak = col.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                (0.0, if peak > 0.0 { peak } else { 1.0 })
            }
        })
        .unzip();
    for d in [&mut s.train, &mut s.test] {
        let mut f = flat(d);
        for mut row in f.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - shift[j]) / scale[j];
            }
        }
        d.features = f.into_shape_with_order(d.features.raw_dim()).expect("same size");
    }
}

// ---------------------------------------------------------------------------
// IDX

/// Parsed IDX file with unsigned-byte payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>, HarnessError> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

/// Parses the big-endian IDX format (`0x00 0x00 type ndims`, then `ndims`
/// u32 sizes, then the payload). Only the unsigned-byte type is supported.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray, HarnessError> {
    let err = |offset: usize, message: String| HarnessError::Format { path: path.to_path_buf(), offset: offset as u64, message };
    if bytes.len() < 4 {
        return Err(err(bytes.len(), format!("truncated header: {} of 4 magic bytes", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, format!("bad magic {:02x}{:02x}{:02x}{:02x}: first two bytes must be zero", bytes[0], bytes[1], bytes[2], bytes[3])));
    }
    if bytes[2] != 0x08 {
        return Err(err(2, format!("unsupported element type 0x{:02x} (only unsigned byte 0x08)", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(err(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(err(bytes.len(), format!("truncated header: expected {header} bytes of dimensions")));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize)
        .collect();
    let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| err(4, "dimension product overflows".into()))?;
    let have = bytes.len() - header;
    if have < len {
        return Err(err(bytes.len(), format!("truncated payload: dims {dims:?} need {len} bytes after offset {header}, found {have}")));
    }
    if have > len {
        return Err(err(header + len, format!("{} trailing bytes after payload", have - len)));
    }
    Ok(IdxArray { dims, data: bytes[header..].to_vec() })
}

/// Image/label IDX pair. Images become `[N, 1, H, W]` scaled to `[0, 1]`.
pub fn idx_dataset(images: &Path, labels: &Path, classes: usize) -> Result<Dataset, HarnessError> {
    let img = parse_idx(&read_file(images)?, images)?;
    let lab = parse_idx(&read_file(labels)?, labels)?;
    let fmt = |path: &Path, offset: u64, message: String| HarnessError::Format { path: path.to_path_buf(), offset, message };
    if img.dims.len() != 3 {
        return Err(fmt(images, 3, format!("image file must have 3 dimensions, found {}", img.dims.len())));
    }
    if lab.dims.len() != 1 {
        return Err(fmt(labels, 3, format!("label file must have 1 dimension, found {}", lab.dims.len())));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(fmt(labels, 4, format!("{} labels for {} images", lab.dims[0], img.dims[0])));
    }
    let header = 4 + 4 * lab.dims.len() as u64;
    if let Some((k, &l)) = lab.data.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
        return Err(fmt(labels, header + k as u64, format!("label {l} out of range for {classes} classes")));
    }
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    let x = ArrayD::from_shape_vec(IxDyn(&[n, 1, h, w]), img.data.iter().map(|&b| f64::from(b) / 255.0).collect())
        .expect("shape checked");
    Dataset::new(x, lab.data.iter().map(|&l| l as usize).collect(), classes).map_err(HarnessError::from)
}

/// Serializes a byte array in IDX format.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

// ---------------------------------------------------------------------------
// CSV

/// Reads numeric CSV rows: features, then the integer label. Blank lines and
/// lines starting with `#` are skipped, as is a non-numeric first row.
pub fn read_csv(path: &Path, classes: usize) -> Result<Dataset, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let err = |line: usize, message: String| HarnessError::Csv { path: path.to_path_buf(), line, message };
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if width.is_none() && labels.is_empty() => continue,
            Err(e) => return Err(err(line_no, format!("non-numeric field: {e}"))),
        };
        if row.len() < 2 {
            return Err(err(line_no, "need at least one feature and a label".into()));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => return Err(err(line_no, format!("{} fields, expected {w}", row.len()))),
            _ => {}
        }
        let label = *row.last().expect("non-empty");
        if label < 0.0 || label.fract() != 0.0 || label as usize >= classes {
            return Err(err(line_no, format!("label {label} is not a class index below {classes}")));
        }
        labels.push(label as usize);
        values.extend_from_slice(&row[..row.len() - 1]);
    }
    let Some(w) = width else {
        return Err(err(0, "no data rows".into()));
    };
    let x = Array2::from_shape_vec((labels.len(), w - 1), values).expect("rectangular").into_dyn();
    Dataset::new(x, labels, classes).map_err(HarnessError::from)
}

/// Renders a dataset with flat features as CSV with a header row.
pub fn to_csv(d: &Dataset) -> String {
    let width: usize = d.feature_shape().iter().product();
    let mut out = String::new();
    let names: Vec<String> = (0..width).map(|j| format!("x{j}")).collect();
    writeln!(out, "{},label", names.join(",")).expect("string write");
    let flat = d.features.view().into_shape_with_order((d.len(), width)).expect("contiguous");
    for (row, label) in flat.rows().into_iter().zip(&d.labels) {
        let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{},{label}", vals.join(",")).expect("string write");
    }
    out
}
