//! Experiment configuration (TOML). Every key is optional and falls back to
//! `ExperimentConfig::default()`; unknown keys are rejected.

use std::path::{Path, PathBuf};

use hic_core::crossbar::{ConverterConfig, TileLimits};
use hic_core::device::{DeviceModel, DeviceModelParams, NonIdealities};
use hic_core::hybridweight::{ProgramPolicy, ReadMode};
use hic_core::nn::{AnalogConfig, Backend, LayerSpec, QuantConfig, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSource;
use crate::error::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub device: DeviceModelParams,
    /// Active non-idealities of the device model.
    pub ablation: NonIdealities,
    pub quant: QuantConfig,
    pub program: ProgramPolicy,
    pub converter: ConverterConfig,
    pub crossbar: CrossbarConfig,
    pub training: TrainingConfig,
    pub dataset: DatasetSource,
    pub drift: DriftConfig,
    pub ablation_study: AblationConfig,
    pub size_sweep: SizeSweepConfig,
    pub endurance: EnduranceConfig,
    pub output: OutputConfig,
    pub network: NetworkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            device: DeviceModelParams::default(),
            ablation: NonIdealities::full(),
            quant: QuantConfig::default(),
            program: ProgramPolicy::default(),
            converter: ConverterConfig::default(),
            crossbar: CrossbarConfig::default(),
            training: TrainingConfig { learning_rate: 0.5, epochs: 20, seconds_per_batch: 1000.0, ..Default::default() },
            dataset: DatasetSource::default(),
            drift: DriftConfig::default(),
            ablation_study: AblationConfig::default(),
            size_sweep: SizeSweepConfig::default(),
            endurance: EnduranceConfig::default(),
            output: OutputConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossbarConfig {
    pub max_rows: usize,
    pub max_cols: usize,
    pub read_mode: ReadMode,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        let l = TileLimits::default();
        Self { max_rows: l.max_rows, max_cols: l.max_cols, read_mode: ReadMode::Noisy }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// Weights on hybrid PCM crossbars.
    Hic,
    /// Full-precision digital weights (reference baseline).
    Digital,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub backend: BackendKind,
    /// Widths used by the model-size sweep.
    pub width_multipliers: Vec<f64>,
    pub layers: Vec<LayerSpec>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Hic,
            width_multipliers: vec![0.5, 1.0, 2.0],
            layers: vec![
                LayerSpec::Dense { units: 64, bias: true },
                LayerSpec::Batchnorm,
                LayerSpec::Relu,
                LayerSpec::Dense { units: 64, bias: true },
                LayerSpec::Batchnorm,
                LayerSpec::Relu,
                LayerSpec::Dense { units: 2, bias: true },
                LayerSpec::SoftmaxXent,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    /// Inference times after the end of training (s).
    pub times: Vec<f64>,
    pub training_runs: usize,
    pub inference_runs: usize,
    /// Fraction of the training set used for batch-norm recalibration.
    pub calibration_fraction: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self { times: vec![1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 4e7], training_runs: 3, inference_runs: 3, calibration_fraction: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: usize,
    /// Add a digital full-precision row.
    pub fp32_reference: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: 5, fp32_reference: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizeSweepConfig {
    pub seeds: usize,
    pub fp32_reference: bool,
}

impl Default for SizeSweepConfig {
    fn default() -> Self {
        Self { seeds: 3, fp32_reference: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnduranceConfig {
    /// Write-erase cycles a device survives.
    pub limit: f64,
    pub bins: usize,
}

impl Default for EnduranceConfig {
    fn default() -> Self {
        Self { limit: 1e8, bins: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Record every device programming event of `train` runs.
    pub event_log: bool,
    pub checkpoint: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), event_log: false, checkpoint: true }
    }
}

/// Overlays `over` onto `base`; tables merge key by key, anything else
/// replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    /// Parses `text` on top of the defaults and validates the result.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut merged, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section that can be checked without loading data; the
    /// architecture is checked against the dataset shape when a run starts.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.device.validate().map_err(|e| invalid(format!("[device] {e}")))?;
        let probe = self.quant.scheme(1);
        if self.quant.w_max.is_some_and(|w| !(w > 0.0)) || !(self.quant.w_max_scale > 0.0) {
            return Err(invalid("[quant] w_max and w_max_scale must be > 0"));
        }
        probe.validate(self.device.g_max).map_err(|e| invalid(format!("[quant] {e}")))?;
        let p = &self.program;
        if !(p.verify_tol > 0.0) || p.max_verify_pulses == 0 || !(p.refresh_threshold > 0.0 && p.refresh_threshold <= 1.0) {
            return Err(invalid("[program] verify_tol > 0, max_verify_pulses >= 1 and refresh_threshold in (0, 1] required"));
        }
        self.converter.validate().map_err(|e| invalid(format!("[converter] {e}")))?;
        if self.crossbar.max_rows == 0 || self.crossbar.max_cols == 0 {
            return Err(invalid("[crossbar] tile limits must be >= 1"));
        }
        self.training.validate().map_err(|e| invalid(format!("[training] {e}")))?;
        self.dataset.validate()?;
        if self.network.layers.is_empty() {
            return Err(invalid("[network] at least one layer is required"));
        }
        if self.network.width_multipliers.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(invalid("[network] width multipliers must be > 0"));
        }
        let d = &self.drift;
        if d.times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(invalid("[drift] times must be finite and >= 0"));
        }
        if d.training_runs == 0 || d.inference_runs == 0 {
            return Err(invalid("[drift] training_runs and inference_runs must be >= 1"));
        }
        if !(d.calibration_fraction > 0.0 && d.calibration_fraction <= 1.0) {
            return Err(invalid("[drift] calibration_fraction must be in (0, 1]"));
        }
        if self.ablation_study.seeds == 0 || self.size_sweep.seeds == 0 {
            return Err(invalid("seed counts must be >= 1"));
        }
        if !(self.endurance.limit > 0.0) || self.endurance.bins == 0 {
            return Err(invalid("[endurance] limit > 0 and bins >= 1 required"));
        }
        Ok(())
    }

    pub fn device_model(&self, flags: NonIdealities) -> DeviceModel {
        DeviceModel { params: self.device.clone(), flags }
    }

    /// Weight backend for a run with the given non-idealities.
    pub fn backend(&self, kind: BackendKind, flags: NonIdealities, event_log: bool) -> Backend {
        match kind {
            BackendKind::Digital => Backend::Digital,
            BackendKind::Hic => Backend::Analog(AnalogConfig {
                model: self.device_model(flags),
                quant: self.quant.clone(),
                policy: self.program.clone(),
                converters: self.converter.clone(),
                limits: TileLimits { max_rows: self.crossbar.max_rows, max_cols: self.crossbar.max_cols },
                read_mode: self.crossbar.read_mode,
                event_log,
            }),
        }
    }
}
