//! Training runs and the studies built from them.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use hic_core::checkpoint::{load_network, save_network, TrainState};
use hic_core::device::{NonIdealities, SimClock};
use hic_core::nn::{
    adabs_calibrate, build_network, calibration_subset, evaluate, train, Network, NetworkSpec, TrainReport,
};
use hic_core::rng::stream_key;
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BackendKind, ExperimentConfig};
use crate::dataset::{load_dataset, Splits};
use crate::endurance::{endurance_report, histogram_csv, EnduranceReport};
use crate::error::HarnessError;
use crate::events;
use crate::metrics::{mean_std, metrics_csv, RunSummary};

/// One training run of a study.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub id: String,
    pub seed: u64,
    pub backend: BackendKind,
    pub flags: NonIdealities,
    pub width: f64,
    pub event_log: bool,
}

impl RunSpec {
    /// The configured single run.
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            id: format!("train-s{}", cfg.seed),
            seed: cfg.seed,
            backend: cfg.network.backend,
            flags: cfg.ablation,
            width: cfg.training.width_multiplier,
            event_log: cfg.output.event_log && cfg.network.backend == BackendKind::Hic,
        }
    }

    fn flags_label(&self) -> String {
        match self.backend {
            BackendKind::Digital => "fp".to_string(),
            BackendKind::Hic => self.flags.label(),
        }
    }
}

pub struct RunOutcome {
    pub summary: RunSummary,
    pub report: TrainReport,
    pub net: Network,
    pub state: TrainState,
}

pub fn network_spec(cfg: &ExperimentConfig, data: &Splits) -> NetworkSpec {
    NetworkSpec {
        input_shape: data.train.feature_shape().to_vec(),
        classes: cfg.dataset.classes,
        layers: cfg.network.layers.clone(),
    }
}

pub fn build(cfg: &ExperimentConfig, data: &Splits, run: &RunSpec) -> Result<Network, HarnessError> {
    let backend = cfg.backend(run.backend, run.flags, run.event_log);
    Ok(build_network(&network_spec(cfg, data), run.width, &backend, run.seed)?)
}

/// Builds and trains one network. Divergence is reported in the summary,
/// not as an error.
pub fn execute_run(cfg: &ExperimentConfig, data: &Splits, run: &RunSpec) -> Result<RunOutcome, HarnessError> {
    let started = std::time::Instant::now();
    let mut net = build(cfg, data, run)?;
    let mut clock = SimClock::new(cfg.training.seconds_per_batch);
    let report = train(&mut net, &data.train, &data.test, &cfg.training, &mut clock, |m| {
        log::debug!("{} epoch {} test accuracy {:.4}", run.id, m.epoch, m.test_accuracy);
    })?;
    let summary =
        RunSummary::new(&run.id, run.seed, backend_name(run.backend), &run.flags_label(), run.width, net.parameter_count(), &report);
    info!(
        "{}: test accuracy {:.4} after {} steps ({:.1} s wall clock)",
        run.id,
        summary.final_test_accuracy,
        report.steps,
        started.elapsed().as_secs_f64()
    );
    let state = TrainState { now: clock.now, seconds_per_batch: clock.seconds_per_batch, step: report.steps };
    Ok(RunOutcome { summary, report, net, state })
}

fn backend_name(b: BackendKind) -> &'static str {
    match b {
        BackendKind::Hic => "hic",
        BackendKind::Digital => "digital",
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

pub fn save_checkpoint(path: &Path, net: &Network, state: &TrainState) -> Result<(), HarnessError> {
    let f = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(f);
    save_network(&mut w, net, state).map_err(|source| HarnessError::Checkpoint { path: path.to_path_buf(), source })?;
    std::io::Write::flush(&mut w).map_err(|e| HarnessError::io(path, e))
}

/// Rebuilds the configured network and loads `path` into it.
pub fn load_checkpoint(cfg: &ExperimentConfig, data: &Splits, path: &Path) -> Result<(Network, TrainState), HarnessError> {
    let mut net = build(cfg, data, &RunSpec { event_log: false, ..RunSpec::from_config(cfg) })?;
    let f = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let state = load_network(&mut BufReader::new(f), &mut net)
        .map_err(|source| HarnessError::Checkpoint { path: path.to_path_buf(), source })?;
    Ok((net, state))
}

/// Files written by `train`.
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVENTS_FILE: &str = "events.bin";

/// `train`: one run with metrics, summary, effective config, checkpoint and,
/// with event logging on, the event log and its endurance report.
pub fn run_training(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    ensure_dir(out)?;
    let run = RunSpec::from_config(cfg);
    let outcome = execute_run(cfg, &data, &run)?;
    // The stored copy points at its own directory.
    let mut stored = cfg.clone();
    stored.output.dir = PathBuf::from(".");
    write_text(&out.join(CONFIG_FILE), &stored.to_toml())?;
    write_text(&out.join(METRICS_FILE), &metrics_csv(&run.id, &outcome.report.records))?;
    write_text(&out.join(SUMMARY_FILE), &outcome.summary.to_toml())?;
    if cfg.output.checkpoint {
        save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.net, &outcome.state)?;
    }
    if run.event_log {
        let log = events::collect_events(&outcome.net);
        events::write_file(&out.join(EVENTS_FILE), &log)?;
        let report = endurance_report(&outcome.net, &log, cfg.endurance.limit, cfg.endurance.bins)?;
        write_endurance(out, &report)?;
    }
    if let Some(step) = outcome.report.diverged_at {
        return Err(HarnessError::Diverged { run: run.id, step });
    }
    Ok(outcome.summary)
}

pub fn write_endurance(out: &Path, report: &EnduranceReport) -> Result<(), HarnessError> {
    write_text(&out.join("endurance.csv"), &histogram_csv(report))?;
    write_text(&out.join("endurance.toml"), &toml::to_string(report).expect("report serializes"))
}

/// `endurance`: rebuilds the report of a finished `train` run directory.
pub fn run_endurance(run_dir: &Path, out: &Path) -> Result<EnduranceReport, HarnessError> {
    let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let data = load_dataset(&cfg.dataset)?;
    let (net, _) = load_checkpoint(&cfg, &data, &run_dir.join(CHECKPOINT_FILE))?;
    let log = events::read_file(&run_dir.join(EVENTS_FILE))?;
    let report = endurance_report(&net, &log, cfg.endurance.limit, cfg.endurance.bins)?;
    ensure_dir(out)?;
    write_endurance(out, &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Ablation

/// Flag combinations: the linear model with at most one non-ideality, the
/// nonlinear model with at most two more, and the full model.
pub fn ablation_combinations() -> Vec<NonIdealities> {
    let none = NonIdealities::none();
    let singles = |base: NonIdealities| {
        [
            NonIdealities { write_noise: true, ..base },
            NonIdealities { read_noise: true, ..base },
            NonIdealities { drift: true, ..base },
        ]
    };
    let mut combos = vec![none];
    combos.extend(singles(none));
    let nl = NonIdealities { nonlinearity: true, ..none };
    combos.push(nl);
    combos.extend(singles(nl));
    combos.extend([
        NonIdealities { write_noise: true, read_noise: true, ..nl },
        NonIdealities { write_noise: true, drift: true, ..nl },
        NonIdealities { read_noise: true, drift: true, ..nl },
    ]);
    combos.push(NonIdealities::full());
    combos
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub label: String,
    pub runs: usize,
    pub failures: usize,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
}

fn seed_for(cfg: &ExperimentConfig, k: usize) -> u64 {
    cfg.seed.wrapping_add(k as u64)
}

/// Trains `runs` in parallel; results keep the input order.
fn run_many(cfg: &ExperimentConfig, data: &Splits, runs: &[RunSpec]) -> Result<Vec<RunSummary>, HarnessError> {
    runs.par_iter().map(|r| execute_run(cfg, data, r).map(|o| o.summary)).collect()
}

fn study_row(label: &str, summaries: &[&RunSummary]) -> StudyRow {
    let ok: Vec<f64> = summaries.iter().filter(|s| !s.diverged).map(|s| s.final_test_accuracy).collect();
    let (m, s) = mean_std(&ok);
    StudyRow { label: label.to_string(), runs: summaries.len(), failures: summaries.len() - ok.len(), mean_test_accuracy: m, std_test_accuracy: s }
}

fn runs_csv(summaries: &[RunSummary]) -> String {
    let mut out = String::from("run_id,flags,backend,width_multiplier,parameters,seed,diverged,test_loss,test_accuracy\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{:.4},{},{},{},{:.6},{:.6}\n",
            s.run_id, s.flags, s.backend, s.width_multiplier, s.parameters, s.seed, s.diverged, s.final_test_loss, s.final_test_accuracy
        ));
    }
    out
}

/// `ablation`: every flag combination over `ablation_study.seeds` seeds, plus
/// an optional full-precision row.
pub fn run_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<StudyRow>, HarnessError> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    ensure_dir(out)?;
    let seeds = cfg.ablation_study.seeds;
    let mut groups: Vec<(String, BackendKind, NonIdealities)> =
        ablation_combinations().into_iter().map(|f| (f.label(), BackendKind::Hic, f)).collect();
    if cfg.ablation_study.fp32_reference {
        groups.push(("fp".to_string(), BackendKind::Digital, NonIdealities::none()));
    }
    let runs: Vec<RunSpec> = groups
        .iter()
        .flat_map(|(label, backend, flags)| {
            (0..seeds).map(move |k| RunSpec {
                id: format!("{label}-s{}", seed_for(cfg, k)),
                seed: seed_for(cfg, k),
                backend: *backend,
                flags: *flags,
                width: cfg.training.width_multiplier,
                event_log: false,
            })
        })
        .collect();
    let summaries = run_many(cfg, &data, &runs)?;
    let mut rows = Vec::new();
    let mut table = String::from("flags,write_noise,read_noise,drift,nonlinearity,runs,failures,mean_test_accuracy,std_test_accuracy\n");
    for (g, (label, backend, flags)) in groups.iter().enumerate() {
        let members: Vec<&RunSummary> = summaries[g * seeds..(g + 1) * seeds].iter().collect();
        let row = study_row(label, &members);
        let on = |b: bool| if *backend == BackendKind::Hic && b { 1 } else { 0 };
        table.push_str(&format!(
            "{label},{},{},{},{},{},{},{:.6},{:.6}\n",
            on(flags.write_noise),
            on(flags.read_noise),
            on(flags.drift),
            on(flags.nonlinearity),
            row.runs,
            row.failures,
            row.mean_test_accuracy,
            row.std_test_accuracy
        ));
        rows.push(row);
    }
    write_text(&out.join("ablation.csv"), &table)?;
    write_text(&out.join("ablation_runs.csv"), &runs_csv(&summaries))?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Model size

/// `size-sweep`: every width multiplier over `size_sweep.seeds` seeds, on the
/// configured non-idealities and optionally full precision.
pub fn run_size_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<StudyRow>, HarnessError> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    ensure_dir(out)?;
    let seeds = cfg.size_sweep.seeds;
    let mut backends = vec![BackendKind::Hic];
    if cfg.size_sweep.fp32_reference {
        backends.push(BackendKind::Digital);
    }
    let mut groups = Vec::new();
    for &w in &cfg.network.width_multipliers {
        for &b in &backends {
            groups.push((w, b));
        }
    }
    let runs: Vec<RunSpec> = groups
        .iter()
        .flat_map(|&(w, b)| {
            (0..seeds).map(move |k| RunSpec {
                id: format!("{}-w{w}-s{}", backend_name(b), seed_for(cfg, k)),
                seed: seed_for(cfg, k),
                backend: b,
                flags: cfg.ablation,
                width: w,
                event_log: false,
            })
        })
        .collect();
    let summaries = run_many(cfg, &data, &runs)?;
    let mut rows = Vec::new();
    let mut table = String::from("backend,width_multiplier,parameters,runs,failures,mean_test_accuracy,std_test_accuracy\n");
    for (g, &(w, b)) in groups.iter().enumerate() {
        let members: Vec<&RunSummary> = summaries[g * seeds..(g + 1) * seeds].iter().collect();
        let label = format!("{}-w{w}", backend_name(b));
        let row = study_row(&label, &members);
        table.push_str(&format!(
            "{},{w:.4},{},{},{},{:.6},{:.6}\n",
            backend_name(b),
            members[0].parameters,
            row.runs,
            row.failures,
            row.mean_test_accuracy,
            row.std_test_accuracy
        ));
        rows.push(row);
    }
    write_text(&out.join("size_sweep.csv"), &table)?;
    write_text(&out.join("size_sweep_runs.csv"), &runs_csv(&summaries))?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Drift

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftPoint {
    /// Seconds after the end of training.
    pub time_s: f64,
    pub uncompensated: f64,
    pub uncompensated_std: f64,
    pub compensated: f64,
    pub compensated_std: f64,
    pub runs: usize,
}

/// Accuracy of one trained network at every sweep time, with and without
/// batch-norm recalibration. Returns `(uncompensated, compensated)` pairs.
pub fn drift_curve(
    net: &Network,
    t_end: f64,
    data: &Splits,
    cfg: &ExperimentConfig,
    inference_seed: u64,
) -> Result<Vec<(f64, f64)>, HarnessError> {
    let mut base = net.clone();
    for c in base.crossbars_mut() {
        c.weights.seed = inference_seed;
        c.op_counter = 0;
    }
    let calib = calibration_subset(&data.train, cfg.drift.calibration_fraction, inference_seed)?;
    let batch = cfg.training.batch_size;
    let mut curve = Vec::with_capacity(cfg.drift.times.len());
    for &dt in &cfg.drift.times {
        let t = t_end + dt;
        let mut plain = base.clone();
        let (_, acc) = evaluate(&mut plain, &data.test, t, batch)?;
        let mut comp = base.clone();
        adabs_calibrate(&mut comp, &calib, t)?;
        let (_, acc_c) = evaluate(&mut comp, &data.test, t, batch)?;
        curve.push((acc, acc_c));
    }
    Ok(curve)
}

const INFERENCE_TAG: u64 = 0x1f3e;

fn drift_table(times: &[f64], curves: &[Vec<(f64, f64)>]) -> Vec<DriftPoint> {
    times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let (u, c): (Vec<f64>, Vec<f64>) = curves.iter().map(|cv| cv[k]).unzip();
            let (um, us) = mean_std(&u);
            let (cm, cs) = mean_std(&c);
            DriftPoint { time_s: t, uncompensated: um, uncompensated_std: us, compensated: cm, compensated_std: cs, runs: curves.len() }
        })
        .collect()
}

/// `drift-sweep`: accuracy versus time after training. With a checkpoint the
/// stored network is the only training run; otherwise `drift.training_runs`
/// networks are trained first. Each is read back under
/// `drift.inference_runs` independent read-noise streams.
pub fn run_drift_sweep(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Vec<DriftPoint>, HarnessError> {
    cfg.validate()?;
    if cfg.network.backend != BackendKind::Hic {
        return Err(HarnessError::Config("drift-sweep needs the hic backend".into()));
    }
    let data = load_dataset(&cfg.dataset)?;
    ensure_dir(out)?;
    let trained: Vec<(String, Network, f64)> = match checkpoint {
        Some(path) => {
            let (net, state) = load_checkpoint(cfg, &data, path)?;
            vec![(format!("checkpoint-s{}", net.seed), net, state.now)]
        }
        None => (0..cfg.drift.training_runs)
            .into_par_iter()
            .map(|k| {
                let seed = seed_for(cfg, k);
                let run = RunSpec { id: format!("drift-s{seed}"), seed, ..RunSpec::from_config(cfg) };
                let run = RunSpec { event_log: false, ..run };
                let o = execute_run(cfg, &data, &run)?;
                if let Some(step) = o.report.diverged_at {
                    return Err(HarnessError::Diverged { run: run.id, step });
                }
                Ok((run.id, o.net, o.state.now))
            })
            .collect::<Result<_, HarnessError>>()?,
    };
    let jobs: Vec<(usize, usize)> =
        (0..trained.len()).flat_map(|a| (0..cfg.drift.inference_runs).map(move |b| (a, b))).collect();
    let curves: Vec<Vec<(f64, f64)>> = jobs
        .par_iter()
        .map(|&(a, b)| {
            let (_, net, t_end) = &trained[a];
            drift_curve(net, *t_end, &data, cfg, stream_key(net.seed, &[INFERENCE_TAG, b as u64]))
        })
        .collect::<Result<_, _>>()?;
    let points = drift_table(&cfg.drift.times, &curves);
    let mut table = String::from("time_s,uncompensated_accuracy,uncompensated_std,compensated_accuracy,compensated_std,runs\n");
    for p in &points {
        table.push_str(&format!(
            "{:e},{:.6},{:.6},{:.6},{:.6},{}\n",
            p.time_s, p.uncompensated, p.uncompensated_std, p.compensated, p.compensated_std, p.runs
        ));
    }
    write_text(&out.join("drift.csv"), &table)?;
    let mut per_run = String::from("training_run,inference_run,time_s,uncompensated_accuracy,compensated_accuracy\n");
    for (&(a, b), curve) in jobs.iter().zip(&curves) {
        for (&t, &(u, c)) in cfg.drift.times.iter().zip(curve) {
            per_run.push_str(&format!("{},{b},{t:e},{u:.6},{c:.6}\n", trained[a].0));
        }
    }
    write_text(&out.join("drift_runs.csv"), &per_run)?;
    Ok(points)
}

/// `dataset gen`: writes the configured splits as CSV files.
pub fn generate_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
    cfg.dataset.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    ensure_dir(out)?;
    let (train, test) = (out.join("train.csv"), out.join("test.csv"));
    write_text(&train, &crate::dataset::to_csv(&data.train))?;
    write_text(&test, &crate::dataset::to_csv(&data.test))?;
    Ok((train, test))
}
