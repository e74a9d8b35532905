//! Per-epoch metrics CSV and run summaries.
//!
//! Column order of `metrics.csv`:
//!
//! | column | meaning |
//! |---|---|
//! | run_id | run label |
//! | epoch | 0 is the evaluation before training |
//! | step | batches applied so far |
//! | sim_time_s | simulated device time (s) |
//! | lr | learning rate used during the epoch |
//! | train_loss, train_accuracy | running means over the epoch's batches |
//! | test_loss, test_accuracy | evaluation at the end of the epoch |
//! | flips | LSB bit flips |
//! | carries | MSB carry events |
//! | clamps | tick clips plus carry clamps |
//! | tick_clips | update ticks clipped to the quantizer range |
//! | carry_clamps | carries dropped at the MSB level rail |
//! | msb_pulses | SET pulses issued by carries |
//! | forced_refreshes | refreshes forced by saturated pairs |
//! | saturations | pairs still saturated after a forced refresh |
//! | refreshes | pairs refreshed by the periodic sweep |
//! | refresh_failures | refreshes that could not reach the level |
//!
//! Event counts are per epoch. Wall-clock time goes to the log only.

use std::fmt::Write as _;

use hic_core::nn::{EpochMetrics, TrainReport};
use serde::{Deserialize, Serialize};

pub const COLUMNS: [&str; 19] = [
    "run_id",
    "epoch",
    "step",
    "sim_time_s",
    "lr",
    "train_loss",
    "train_accuracy",
    "test_loss",
    "test_accuracy",
    "flips",
    "carries",
    "clamps",
    "tick_clips",
    "carry_clamps",
    "msb_pulses",
    "forced_refreshes",
    "saturations",
    "refreshes",
    "refresh_failures",
];

pub fn csv_header() -> String {
    format!("{}\n", COLUMNS.join(","))
}

pub fn csv_row(run_id: &str, m: &EpochMetrics) -> String {
    let s = &m.stats;
    let mut out = String::new();
    writeln!(
        out,
        "{run_id},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{},{},{},{},{}",
        m.epoch,
        m.step,
        m.sim_time,
        m.lr,
        m.train_loss,
        m.train_accuracy,
        m.test_loss,
        m.test_accuracy,
        s.flips,
        s.carries,
        s.clamps(),
        s.tick_clips,
        s.carry_clamps,
        s.msb_pulses,
        s.forced_refreshes,
        s.saturations,
        s.refreshes,
        s.refresh_failures
    )
    .expect("string write");
    out
}

pub fn metrics_csv(run_id: &str, records: &[EpochMetrics]) -> String {
    let mut out = csv_header();
    for r in records {
        out.push_str(&csv_row(run_id, r));
    }
    out
}

/// Totals over a run, written as `summary.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub backend: String,
    pub flags: String,
    pub width_multiplier: f64,
    pub parameters: usize,
    pub epochs: usize,
    pub steps: u64,
    pub sim_time_s: f64,
    pub diverged: bool,
    pub final_train_loss: f64,
    pub final_train_accuracy: f64,
    pub final_test_loss: f64,
    pub final_test_accuracy: f64,
    pub flips: u64,
    pub carries: u64,
    pub clamps: u64,
    pub msb_pulses: u64,
    pub forced_refreshes: u64,
    pub saturations: u64,
    pub refreshes: u64,
    pub refresh_failures: u64,
}

impl RunSummary {
    pub fn new(run_id: &str, seed: u64, backend: &str, flags: &str, width: f64, parameters: usize, report: &TrainReport) -> Self {
        let last = report.records.last().expect("initial record is always present");
        let mut s = Self {
            run_id: run_id.to_string(),
            seed,
            backend: backend.to_string(),
            flags: flags.to_string(),
            width_multiplier: width,
            parameters,
            epochs: last.epoch,
            steps: report.steps,
            sim_time_s: last.sim_time,
            diverged: report.diverged_at.is_some(),
            final_train_loss: last.train_loss,
            final_train_accuracy: last.train_accuracy,
            final_test_loss: last.test_loss,
            final_test_accuracy: last.test_accuracy,
            flips: 0,
            carries: 0,
            clamps: 0,
            msb_pulses: 0,
            forced_refreshes: 0,
            saturations: 0,
            refreshes: 0,
            refresh_failures: 0,
        };
        for r in &report.records {
            let t = &r.stats;
            s.flips += t.flips;
            s.carries += t.carries;
            s.clamps += t.clamps();
            s.msb_pulses += t.msb_pulses;
            s.forced_refreshes += t.forced_refreshes;
            s.saturations += t.saturations;
            s.refreshes += t.refreshes;
            s.refresh_failures += t.refresh_failures;
        }
        s
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v.sqrt())
}
