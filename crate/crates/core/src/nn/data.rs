use ndarray::{ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::NnError;
use crate::rng::stream_key;

/// Labelled samples; `features` has the sample index as its leading axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: ArrayD<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: ArrayD<f64>, labels: Vec<usize>, classes: usize) -> Result<Self, NnError> {
        if features.ndim() < 2 || features.shape()[0] != labels.len() {
            return Err(NnError::Shape(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::Shape(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample feature shape.
    pub fn feature_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn select(&self, indices: &[usize]) -> (ArrayD<f64>, Vec<usize>) {
        let x = self.features.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (features, labels) = self.select(indices);
        Dataset { features, labels, classes: self.classes }
    }
}

const CALIBRATION_TAG: u64 = 0xCA11;

/// Random subset of `round(fraction * len)` samples (at least one when the
/// source is non-empty), deterministic in `seed`.
pub fn calibration_subset(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, NnError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(NnError::Config(format!("calibration fraction must be in (0, 1], got {fraction}")));
    }
    let count = ((data.len() as f64 * fraction).round() as usize).clamp(1, data.len().max(1));
    if data.is_empty() {
        return Err(NnError::EmptyCalibration);
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, &[CALIBRATION_TAG]));
    idx.shuffle(&mut rng);
    idx.truncate(count);
    idx.sort_unstable();
    Ok(data.subset(&idx))
}
