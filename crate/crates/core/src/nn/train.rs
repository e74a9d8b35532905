use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::network::{softmax_xent, Network, Phase};
use super::update::{apply_gradients, GradQuantizer, Rounding, UpdateStats};
use super::NnError;
use crate::device::SimClock;
use crate::rng::stream_key;

const SHUFFLE_TAG: u64 = 0x5bff;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by
    /// `lr_decay_factor`. Defaults to 50% and 75% of `epochs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_decay_epochs: Option<Vec<usize>>,
    pub batch_size: usize,
    pub epochs: usize,
    pub refresh_interval_batches: u64,
    pub seconds_per_batch: f64,
    pub rounding: Rounding,
    pub clip_ticks: i32,
    pub width_multiplier: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            lr_decay_factor: 0.45,
            lr_decay_epochs: None,
            batch_size: 100,
            epochs: 20,
            refresh_interval_batches: 10,
            seconds_per_batch: 1.0,
            rounding: Rounding::NearestEven,
            clip_ticks: 127,
            width_multiplier: 1.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad("lr_decay_factor must be in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.seconds_per_batch >= 0.0 && self.seconds_per_batch.is_finite()) {
            return bad("seconds_per_batch must be >= 0");
        }
        if self.clip_ticks < 1 {
            return bad("clip_ticks must be >= 1");
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return bad("width_multiplier must be > 0");
        }
        Ok(())
    }

    pub fn quantizer(&self) -> GradQuantizer {
        GradQuantizer { rounding: self.rounding, clip_ticks: self.clip_ticks }
    }

    pub fn decay_epochs(&self) -> Vec<usize> {
        self.lr_decay_epochs.clone().unwrap_or_else(|| vec![self.epochs / 2, self.epochs * 3 / 4])
    }
}

/// Learning rate used during `epoch` (0-based).
pub fn lr_at_epoch(cfg: &TrainingConfig, epoch: usize) -> f64 {
    let decays = cfg.decay_epochs().iter().filter(|&&d| d > 0 && d <= epoch).count();
    cfg.learning_rate * cfg.lr_decay_factor.powi(decays as i32)
}

/// Sample order of one epoch, deterministic in (seed, epoch).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, &[SHUFFLE_TAG, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

/// One row of the training metrics stream. Epoch 0 is the evaluation of
/// the freshly initialized network.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub sim_time: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Device counters accumulated during this epoch.
    pub stats: UpdateStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochMetrics>,
    pub steps: u64,
    /// Step at which a non-finite loss stopped training.
    pub diverged_at: Option<u64>,
}

/// Mean loss and accuracy with running batch-norm statistics at time `t`.
pub fn evaluate(net: &mut Network, data: &Dataset, t: f64, batch_size: usize) -> Result<(f64, f64), NnError> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.select(chunk);
        let (logits, _) = net.forward(&x, Phase::Eval, t)?;
        let (l, _, c) = softmax_xent(&logits, &y);
        loss += l * chunk.len() as f64;
        correct += c;
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Replaces every batch-norm running mean/variance with the statistics of
/// one forward pass over `calibration` at time `t`.
pub fn adabs_calibrate(net: &mut Network, calibration: &Dataset, t: f64) -> Result<(), NnError> {
    if calibration.is_empty() {
        return Err(NnError::EmptyCalibration);
    }
    net.forward(&calibration.features, Phase::Calibrate, t)?;
    Ok(())
}

/// Mini-batch SGD through the hybrid weights. Per batch: forward, backward,
/// quantized update, clock tick and, every `refresh_interval_batches`, a
/// refresh sweep. `on_epoch` sees each record as soon as it is complete.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainingConfig,
    clock: &mut SimClock,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport, NnError> {
    cfg.validate()?;
    let quantizer = cfg.quantizer();
    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let mut step = 0u64;

    let (train_loss, train_accuracy) = evaluate(net, train_set, clock.now, cfg.batch_size)?;
    let (test_loss, test_accuracy) = evaluate(net, test_set, clock.now, cfg.batch_size)?;
    let first = EpochMetrics {
        epoch: 0,
        step,
        sim_time: clock.now,
        lr: lr_at_epoch(cfg, 0),
        train_loss,
        train_accuracy,
        test_loss,
        test_accuracy,
        stats: UpdateStats::default(),
    };
    on_epoch(&first);
    records.push(first);

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let order = epoch_order(net.seed, epoch, train_set.len());
        let mut stats = UpdateStats::default();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.select(batch);
            let (loss, c, grads) = net.loss_and_gradients(&x, &y, clock.now)?;
            if !loss.is_finite() {
                log::warn!("non-finite loss at step {step}; stopping");
                return Ok(TrainReport { records, steps: step, diverged_at: Some(step) });
            }
            loss_sum += loss * batch.len() as f64;
            correct += c;
            stats += apply_gradients(net, &grads, lr, &quantizer, clock.now, step)?;
            clock.tick();
            step += 1;
            if cfg.refresh_interval_batches > 0 && step % cfg.refresh_interval_batches == 0 {
                let (r, f) = net.refresh_all(clock.now)?;
                stats.refreshes += r;
                stats.refresh_failures += f;
            }
        }
        let (test_loss, test_accuracy) = evaluate(net, test_set, clock.now, cfg.batch_size)?;
        let n = train_set.len().max(1) as f64;
        let rec = EpochMetrics {
            epoch: epoch + 1,
            step,
            sim_time: clock.now,
            lr,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            test_loss,
            test_accuracy,
            stats,
        };
        log::debug!("epoch {} loss {:.4} test acc {:.4}", rec.epoch, rec.train_loss, rec.test_accuracy);
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(TrainReport { records, steps: step, diverged_at: None })
}
