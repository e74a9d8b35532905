//! Acceptance suite. Every criterion runs in sequence inside one test so the
//! runtime limits are measured without competing test threads; each prints
//! one PASS/FAIL line.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hic_core::device::{BinaryDevice, DeviceModel, DeviceModelParams, MultiLevelDevice, NonIdealities, SimClock};
use hic_core::hybridweight::{EventKind, HybridWeightMatrix, ProgramPolicy, QuantScheme, ReadMode, SLOT_PLANE0};
use hic_core::nn::{apply_gradients, build_network, lr_at_epoch, GradQuantizer, TrainingConfig};
use hic_core::rng::StreamRng;
use hic_harness::config::BackendKind;
use hic_harness::endurance::Histogram;
use hic_harness::{endurance_report, events, execute_run, load_dataset, run_drift_sweep, ExperimentConfig, RunSpec};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    if let Some(limit) = limit {
        if took > limit {
            o.pass = false;
            o.detail.push_str(&format!("; runtime {:.1} s exceeds {:.0} s", took.as_secs_f64(), limit.as_secs_f64()));
        }
    }
    println!("criterion {id:>2} {}: {name} ({}; {:.2} s)", if o.pass { "PASS" } else { "FAIL" }, o.detail, took.as_secs_f64());
    o.pass
}

fn shadow_equivalence() -> Outcome {
    let data = oracles::gaussian_blobs(200, 1);
    let cfg = TrainingConfig { epochs: 5, batch_size: 10, learning_rate: 0.05, ..Default::default() };
    let mut net = build_network(&oracles::mlp_spec(&[2, 16, 16, 2]), 1.0, &oracles::ideal_backend(), 17).unwrap();
    let mut shadow = oracles::ShadowTrainer::from_network(&net);
    let mut clock = SimClock::new(cfg.seconds_per_batch);
    let per_epoch = data.len() / cfg.batch_size;
    let mut carries = 0;
    for (step, batch) in oracles::batch_schedule(17, data.len(), cfg.batch_size, 100).iter().enumerate() {
        let lr = lr_at_epoch(&cfg, step / per_epoch);
        let (x, y) = data.select(batch);
        let (_, _, grads) = net.loss_and_gradients(&x, &y, clock.now).unwrap();
        carries += apply_gradients(&mut net, &grads, lr, &GradQuantizer::default(), clock.now, step as u64).unwrap().carries;
        clock.tick();
        if (step + 1) % 10 == 0 {
            net.refresh_all(clock.now).unwrap();
        }
        let (sx, sy) = oracles::rows(&data, batch);
        shadow.step(&sx, &sy, lr);
        if oracles::network_ticks(&net) != shadow.ticks() {
            return Outcome { pass: false, detail: format!("tick trajectories differ at step {step}") };
        }
    }
    Outcome { pass: true, detail: format!("100 steps identical, {carries} carries") }
}

fn ideal_model() -> DeviceModel {
    let params = DeviceModelParams { sigma_write: 0.0, sigma_read: 0.0, ..Default::default() };
    DeviceModel::new(params, NonIdealities::none()).unwrap()
}

fn carry_oracle() -> Outcome {
    let scheme = QuantScheme::new(0.7, 7, 7, 1.5);
    let template = HybridWeightMatrix::new(0, 3, 1, 1, scheme.clone(), ProgramPolicy::default(), ideal_model(), 0.0).unwrap();
    let mut rng = StreamRng::new(0, &[]);
    let (d_msb, d_lsb) = (scheme.delta_msb(), scheme.delta_lsb());
    let mut mismatches = 0u64;
    let mut cases = 0u64;
    for a in -64i32..=63 {
        let mut base = template.clone();
        base.lsb_write(0, 0, a, 0.0).unwrap();
        let before = base.decode_full(0, 0, 0.0, ReadMode::Ideal, &mut rng).unwrap();
        for q in -127i32..=127 {
            cases += 1;
            let mut m = base.clone();
            let out = m.accumulate(0, 0, q, 0.0, ReadMode::Ideal, &mut rng).unwrap();
            // Integer reference: carry whole multiples of 64 toward zero.
            let sum = a + q;
            let carry = sum / 64;
            let residual = sum - 64 * carry;
            let got = m.lsb_read(0, 0, 0.0, ReadMode::Ideal, &mut rng).unwrap();
            let after = m.decode_full(0, 0, 0.0, ReadMode::Ideal, &mut rng).unwrap();
            let conserved = (after - (before + f64::from(q) * d_lsb)).abs() <= 1e-9 * d_msb;
            if out.carry != carry || got != residual || !(-64..=63).contains(&got) || m.level(0, 0) != carry || !conserved {
                mismatches += 1;
            }
        }
    }
    Outcome { pass: mismatches == 0 && cases == 128 * 255, detail: format!("{cases} cases, {mismatches} mismatches") }
}

fn gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for seed in 0..20 {
        let (mut net, x, y) = oracles::random_gradcheck_case(seed);
        let r = oracles::gradient_check(&mut net, &x, &y, 1e-3, 1e-6);
        worst = worst.max(r.max_rel_err);
        checked += r.checked;
        skipped += r.skipped;
    }
    Outcome {
        pass: worst <= 1e-4 && checked > 0,
        detail: format!("20 networks, {checked} parameters checked, {skipped} at ReLU kinks, max relative error {worst:.2e}"),
    }
}

fn programming_curve() -> Outcome {
    let mut worst = 0.0f64;
    for (g_max, g_high) in [(25.0, 20.0), (10.0, 9.0)] {
        let params = DeviceModelParams { sigma_write: 0.0, sigma_read: 0.0, g_max, g_high, ..Default::default() };
        let model = DeviceModel::new(params.clone(), NonIdealities { nonlinearity: true, ..NonIdealities::none() }).unwrap();
        let mut rng = StreamRng::new(1, &[]);
        let mut dev = MultiLevelDevice::new(&model, 0.0);
        let mut harmonic = 0.0;
        for k in 1..=100u32 {
            dev.set_pulse(&model, 0.0, &mut rng);
            harmonic += 1.0 / f64::from(k);
            let expect = (params.g_min + params.delta0 * harmonic).min(params.g_max);
            worst = worst.max((dev.g_prog - expect).abs());
        }
    }
    Outcome { pass: worst <= 1e-12, detail: format!("k = 1..100, max deviation {worst:.1e}") }
}

fn drift_law() -> Outcome {
    let params = DeviceModelParams { sigma_write: 0.0, sigma_read: 0.0, ..Default::default() };
    let model = DeviceModel::new(params.clone(), NonIdealities { drift: true, ..NonIdealities::none() }).unwrap();
    let mut rng = StreamRng::new(2, &[]);
    let dev = MultiLevelDevice { g_prog: 17.0, t_prog: 0.0, nu: 0.05, ..MultiLevelDevice::new(&model, 0.0) };
    let mut worst = 0.0f64;
    for k in 0..=900 {
        let ratio = 10f64.powf(k as f64 / 100.0);
        let t = (ratio - 1.0) * params.t0;
        let g = dev.read_analog(&model, t, &mut rng).unwrap();
        let expect = 17.0 * (-0.05 * ((t + params.t0) / params.t0).ln()).exp();
        worst = worst.max((g - expect).abs());
    }
    // Bit decay: g_high * r^-nu crosses g_threshold at r = (g_high / g_threshold)^(1/nu).
    let nu = 0.1;
    let mut bit = BinaryDevice::new(&model, 0.0);
    bit.write_bit(&model, true, 0.0, &mut rng);
    bit.nu = nu;
    let t_cross = ((params.g_high / params.g_threshold).powf(1.0 / nu) - 1.0) * params.t0;
    let step = 10f64.powf(1.0 / 50.0);
    let mut prev = 1.0;
    let mut t = 1.0;
    while bit.read_bit(&model, t, &mut rng).unwrap() {
        prev = t;
        t *= step;
    }
    let within = prev < t_cross && t_cross <= t;
    Outcome {
        pass: worst <= 1e-12 && within,
        detail: format!("power law max error {worst:.1e}; bit flips in ({prev:.4e}, {t:.4e}] s, analytic {t_cross:.4e} s"),
    }
}

fn spirals_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn toy_training() -> Outcome {
    let cfg = spirals_config();
    let data = load_dataset(&cfg.dataset).unwrap();
    let mean_acc = |backend: BackendKind| -> f64 {
        (0..5)
            .map(|k| {
                let run = RunSpec { seed: 1 + k, backend, ..RunSpec::from_config(&cfg) };
                let o = execute_run(&cfg, &data, &run).unwrap();
                assert!(!o.summary.diverged, "{} diverged", run.id);
                o.summary.final_test_accuracy
            })
            .sum::<f64>()
            / 5.0
    };
    let fp = mean_acc(BackendKind::Digital);
    let hic = mean_acc(BackendKind::Hic);
    Outcome {
        pass: hic >= 0.90 && fp - hic <= 0.05,
        detail: format!("full model {:.2}% vs full-precision {:.2}% over 5 seeds", 100.0 * hic, 100.0 * fp),
    }
}

fn drift_sweep() -> Outcome {
    let mut cfg = spirals_config();
    cfg.drift.times = vec![1e2, 1e6, 4e7];
    cfg.drift.training_runs = 3;
    cfg.drift.inference_runs = 3;
    let dir = tempfile::tempdir().unwrap();
    let p = run_drift_sweep(&cfg, None, dir.path()).unwrap();
    let (early, mid, late) = (&p[0], &p[1], &p[2]);
    let flat = (mid.uncompensated - early.uncompensated).abs() <= 0.01;
    let helps = late.compensated > late.uncompensated;
    let recovers = (late.compensated - early.uncompensated).abs() <= 0.02;
    Outcome {
        pass: flat && helps && recovers,
        detail: format!(
            "uncompensated {:.2}% @1e2 s, {:.2}% @1e6 s, {:.2}% @4e7 s; recalibrated {:.2}% @4e7 s",
            100.0 * early.uncompensated,
            100.0 * mid.uncompensated,
            100.0 * late.uncompensated,
            100.0 * late.compensated
        ),
    }
}

/// 1000 saturated pairs with a known level, refreshed once.
fn refresh_trial(model: DeviceModel) -> (usize, usize, usize) {
    let scheme = QuantScheme::new(0.7, 7, 7, 1.5);
    let policy = ProgramPolicy::default();
    let mut m = HybridWeightMatrix::new(4, 9, 40, 25, scheme.clone(), policy.clone(), model, 0.0).unwrap();
    let (g_max, g_unit) = (m.model.params.g_max, scheme.g_unit);
    let mut rng = StreamRng::new(11, &[]);
    let mut levels = Vec::new();
    for i in 0..40 {
        for j in 0..25 {
            let level: i32 = rng.random_range(-7..=7);
            let offset: f64 = rng.random_range(-0.4..0.4);
            let high = rng.random_range(policy.refresh_threshold * g_max..=g_max);
            let low = high - (f64::from(level.abs()) + offset.abs()) * g_unit;
            let pair = m.pair_mut(i, j);
            if level >= 0 {
                (pair.plus.g_prog, pair.minus.g_prog) = (high, low);
            } else {
                (pair.plus.g_prog, pair.minus.g_prog) = (low, high);
            }
            levels.push(level);
        }
    }
    let (refreshed, _) = m.refresh_all(1.0).unwrap();
    let (mut identical, mut within) = (0, 0);
    for (idx, &level) in levels.iter().enumerate() {
        let p = m.pair(idx / 25, idx % 25);
        let units = (p.plus.g_prog - p.minus.g_prog) / g_unit;
        identical += usize::from(units.round() as i32 == level && m.level(idx / 25, idx % 25) == level);
        within += usize::from((units - f64::from(level)).abs() <= policy.verify_tol);
    }
    (refreshed as usize, identical, within)
}

fn refresh_preservation() -> Outcome {
    let quiet = DeviceModel::new(
        DeviceModelParams { sigma_write: 0.0, sigma_read: 0.0, ..Default::default() },
        NonIdealities { nonlinearity: true, ..NonIdealities::none() },
    )
    .unwrap();
    let (r0, same, _) = refresh_trial(quiet);
    let (r1, _, within) = refresh_trial(DeviceModel::default());
    Outcome {
        pass: r0 == 1000 && same == 1000 && r1 == 1000 && within >= 990,
        detail: format!("noise off: {same}/1000 levels identical; default noise: {within}/1000 within verify tolerance"),
    }
}

fn endurance_accounting() -> Outcome {
    let mut cfg = spirals_config();
    cfg.dataset.train_per_class = 500;
    cfg.training.epochs = 10;
    cfg.training.seconds_per_batch = 1e4;
    let data = load_dataset(&cfg.dataset).unwrap();
    let run = RunSpec { event_log: true, ..RunSpec::from_config(&cfg) };
    let o = execute_run(&cfg, &data, &run).unwrap();
    let log = events::collect_events(&o.net);
    let report = match endurance_report(&o.net, &log, cfg.endurance.limit, cfg.endurance.bins) {
        Ok(r) => r,
        Err(e) => return Outcome { pass: false, detail: e.to_string() },
    };

    // Independent replay: walk each device's events through the cycle
    // state machine (a SET past the per-cycle budget opens a new cycle, a
    // RESET closes the open one, a binary 1 -> 0 completes one).
    #[derive(Default)]
    struct State {
        sets_since_reset: u64,
        in_cycle: u64,
        cycles: u64,
    }
    let ppc = u64::from(cfg.device.pulses_per_cycle);
    let mut state: BTreeMap<(u32, u32, u32, u8), State> = BTreeMap::new();
    for e in &log {
        let s = state.entry((e.array, e.row, e.col, e.slot)).or_default();
        match e.kind {
            EventKind::Set => {
                s.sets_since_reset += 1;
                s.in_cycle += 1;
                if s.in_cycle > ppc {
                    s.cycles += 1;
                    s.in_cycle = 1;
                }
            }
            EventKind::Reset => {
                if s.sets_since_reset > 0 {
                    s.cycles += 1;
                }
                s.sets_since_reset = 0;
                s.in_cycle = 0;
            }
            EventKind::BitSet => {}
            EventKind::BitReset => s.cycles += 1,
        }
    }
    let (mut msb, mut lsb) = (Vec::new(), Vec::new());
    let mut arrays = BTreeSet::new();
    for c in o.net.crossbars() {
        let w = &c.weights;
        arrays.insert(w.id);
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                for slot in 0..SLOT_PLANE0 + w.scheme.lsb_bits as u8 {
                    let n = state.get(&(w.id, i as u32, j as u32, slot)).map_or(0, |s| s.cycles);
                    if slot < SLOT_PLANE0 { msb.push(n) } else { lsb.push(n) }
                }
            }
        }
    }
    let hist_match = Histogram::new(&msb, cfg.endurance.bins) == report.msb.histogram
        && Histogram::new(&lsb, cfg.endurance.bins) == report.lsb.histogram;
    let max_msb = msb.iter().copied().max().unwrap_or(0);
    let max_lsb = lsb.iter().copied().max().unwrap_or(0);
    let fraction = max_msb.max(max_lsb) as f64 / 1e8;
    Outcome {
        pass: hist_match && max_msb == report.msb.max_cycles && max_lsb == report.lsb.max_cycles && max_msb < max_lsb && fraction < 1e-2,
        detail: format!(
            "{} events over {} arrays, histograms match replay: {hist_match}; max MSB {max_msb}, max LSB {max_lsb}, {fraction:.1e} of 1e8",
            log.len(),
            arrays.len()
        ),
    }
}

const TINY: &str = r#"
seed = 5

[dataset]
train_per_class = 60
test_per_class = 30

[training]
epochs = 2
batch_size = 20

[network]
width_multipliers = [0.5, 1.0]
layers = [
  { kind = "dense", units = 8 },
  { kind = "batchnorm" },
  { kind = "relu" },
  { kind = "dense", units = 2 },
  { kind = "softmax-xent" },
]

[drift]
times = [100.0, 1e6]
training_runs = 1
inference_runs = 2

[ablation_study]
seeds = 1

[size_sweep]
seeds = 1

[output]
event_log = true
"#;

fn hic(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hic")).args(args).arg("--log-level").arg("warn").output().unwrap();
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("hic {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn reproducibility() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let config = config.to_str().unwrap();
    let commands: [(&str, &[&str]); 6] = [
        ("train", &["train"]),
        ("ablation", &["ablation"]),
        ("size-sweep", &["size-sweep"]),
        ("drift-sweep", &["drift-sweep"]),
        ("dataset-gen", &["dataset", "gen"]),
        ("endurance", &["endurance"]),
    ];
    let mut differing = Vec::new();
    let mut files = 0;
    for (name, args) in commands {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = root.path().join(format!("{name}-{rep}"));
            let out_s = out.to_str().unwrap().to_string();
            let result = if name == "endurance" {
                let run_dir = root.path().join(format!("train-{rep}"));
                hic(&["endurance", "--run-dir", run_dir.to_str().unwrap(), "--out", &out_s])
            } else {
                let mut a: Vec<&str> = args.to_vec();
                a.extend(["--config", config, "--seed", "5", "--out", &out_s]);
                hic(&a)
            };
            if let Err(e) = result {
                return Outcome { pass: false, detail: e };
            }
            outputs.push(dir_contents(&out));
        }
        if name == "train" {
            let text: Vec<String> = (0..2)
                .map(|rep| {
                    let events = root.path().join(format!("train-{rep}")).join("events.bin");
                    let out = root.path().join(format!("events-{rep}.tsv"));
                    hic(&["export-events", events.to_str().unwrap(), "--output", out.to_str().unwrap()]).unwrap();
                    std::fs::read_to_string(out).unwrap()
                })
                .collect();
            if text[0].lines().count() < 2 || text[0] != text[1] {
                differing.push("export-events".to_string());
            }
        }
        files += outputs[0].len();
        if outputs[0].is_empty() || outputs[0] != outputs[1] {
            differing.push(name.to_string());
        }
    }
    Outcome {
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("7 subcommands, {files} output files byte-identical across two invocations")
        } else {
            format!("outputs differ for {differing:?}")
        },
    }
}

#[test]
fn acceptance_criteria() {
    let secs = Duration::from_secs;
    let results = [
        check(1, "shadow equivalence", Some(secs(10)), shadow_equivalence),
        check(2, "carry oracle", Some(secs(1)), carry_oracle),
        check(3, "gradient check", Some(secs(60)), gradient_check),
        check(4, "programming curve", None, programming_curve),
        check(5, "drift law", None, drift_law),
        check(6, "toy-task training", Some(secs(300)), toy_training),
        check(7, "drift sweep direction", Some(secs(600)), drift_sweep),
        check(8, "refresh preservation", None, refresh_preservation),
        check(9, "endurance accounting", None, endurance_accounting),
        check(10, "reproducibility", None, reproducibility),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(k, _)| k + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
