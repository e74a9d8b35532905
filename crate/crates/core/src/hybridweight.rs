//! Hybrid weight storage: a differential multi-level pair holds the
//! high-significance part of each weight and seven binary cells hold a signed
//! fixed-point update accumulator.
//!
//! Accumulator full scale equals one MSB level, so an overflow of the
//! accumulator moves the MSB level by one step. Only the MSB part is used by
//! the crossbar for compute.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{BinaryDevice, DeviceError, DeviceModel, MultiLevelDevice};
use crate::rng::StreamRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HybridError {
    #[error("index ({row}, {col}) out of range for {rows}x{cols} matrix")]
    Index { row: usize, col: usize, rows: usize, cols: usize },
    #[error("MSB level {level} outside +/-{max}")]
    Level { level: i32, max: i32 },
    #[error("accumulator value {value} outside [{min}, {max}]")]
    Accumulator { value: i32, min: i32, max: i32 },
    #[error("programming budget exhausted after {pulses} pulses")]
    Saturated { pulses: u32 },
    #[error("invalid quantization scheme: {0}")]
    Scheme(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

/// Fixed-point layout of a hybrid weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub w_max: f64,
    /// Signed MSB level range `+/-msb_levels`.
    pub msb_levels: i32,
    /// Width of the signed accumulator.
    pub lsb_bits: u32,
    /// Conductance per MSB level (µS).
    pub g_unit: f64,
}

impl QuantScheme {
    pub fn new(w_max: f64, msb_levels: i32, lsb_bits: u32, g_unit: f64) -> Self {
        Self { w_max, msb_levels, lsb_bits, g_unit }
    }

    pub fn delta_msb(&self) -> f64 {
        self.w_max / f64::from(self.msb_levels)
    }

    pub fn delta_lsb(&self) -> f64 {
        self.delta_msb() / f64::from(self.acc_half())
    }

    /// 2^(lsb_bits - 1): accumulator ticks per MSB level.
    pub fn acc_half(&self) -> i32 {
        1 << (self.lsb_bits - 1)
    }

    pub fn acc_min(&self) -> i32 {
        -self.acc_half()
    }

    pub fn acc_max(&self) -> i32 {
        self.acc_half() - 1
    }

    pub fn validate(&self, g_max: f64) -> Result<(), HybridError> {
        let bad = |m: &str| Err(HybridError::Scheme(m.to_string()));
        if !(self.w_max.is_finite() && self.w_max > 0.0) {
            return bad("w_max must be positive");
        }
        if self.msb_levels < 1 {
            return bad("msb_levels must be at least 1");
        }
        if !(2..=16).contains(&self.lsb_bits) {
            return bad("lsb_bits must be in 2..=16");
        }
        if !(self.g_unit > 0.0) || f64::from(self.msb_levels) * self.g_unit > g_max {
            return bad("require 0 < msb_levels * g_unit <= g_max");
        }
        Ok(())
    }
}

/// Program-and-verify and refresh settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProgramPolicy {
    /// Verify window as a fraction of `g_unit`.
    pub verify_tol: f64,
    pub max_verify_pulses: u32,
    /// Fraction of `g_max` above which a pair is refreshed.
    pub refresh_threshold: f64,
}

impl Default for ProgramPolicy {
    fn default() -> Self {
        Self { verify_tol: 0.25, max_verify_pulses: 20, refresh_threshold: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadMode {
    /// Stored `g_prog` / logical state: no drift, no read noise.
    Ideal,
    /// Full device read path.
    Noisy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum EventKind {
    Set = 0,
    Reset = 1,
    /// Binary 0 -> 1.
    BitSet = 2,
    /// Binary 1 -> 0.
    BitReset = 3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum EventCause {
    Init = 0,
    Carry = 1,
    Refresh = 2,
    Accumulate = 3,
}

/// Device slot inside one weight entry: 0 = G+, 1 = G-, 2.. = LSB planes.
pub const SLOT_PLUS: u8 = 0;
pub const SLOT_MINUS: u8 = 1;
pub const SLOT_PLANE0: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeviceEvent {
    pub array: u32,
    pub row: u32,
    pub col: u32,
    pub slot: u8,
    pub kind: EventKind,
    pub cause: EventCause,
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevicePair {
    pub plus: MultiLevelDevice,
    pub minus: MultiLevelDevice,
}

/// Result of one `accumulate` call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AccumulateOutcome {
    pub carry: i32,
    pub flips: u32,
    pub clamped: bool,
    pub pulses: u32,
    /// Program-and-verify failed even after a forced refresh.
    pub saturated: bool,
    pub forced_refresh: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridWeightMatrix {
    pub id: u32,
    pub seed: u64,
    rows: usize,
    cols: usize,
    pub scheme: QuantScheme,
    pub policy: ProgramPolicy,
    pub model: DeviceModel,
    pub(crate) pairs: Vec<DevicePair>,
    /// Entry-major: `planes[idx * lsb_bits + k]` holds bit `k`.
    pub(crate) planes: Vec<BinaryDevice>,
    /// Controller-side record of the programmed MSB level.
    pub(crate) levels: Vec<i32>,
    pub(crate) events: Option<Vec<DeviceEvent>>,
}

impl HybridWeightMatrix {
    /// All devices in the RESET state at time `t`, all levels zero.
    pub fn new(
        id: u32,
        seed: u64,
        rows: usize,
        cols: usize,
        scheme: QuantScheme,
        policy: ProgramPolicy,
        model: DeviceModel,
        t: f64,
    ) -> Result<Self, HybridError> {
        model.params.validate()?;
        scheme.validate(model.params.g_max)?;
        let n = rows * cols;
        let pair = DevicePair { plus: MultiLevelDevice::new(&model, t), minus: MultiLevelDevice::new(&model, t) };
        let bit = BinaryDevice::new(&model, t);
        Ok(Self {
            id,
            seed,
            rows,
            cols,
            pairs: vec![pair; n],
            planes: vec![bit; n * scheme.lsb_bits as usize],
            levels: vec![0; n],
            scheme,
            policy,
            model,
            events: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn enable_event_log(&mut self) {
        if self.events.is_none() {
            self.events = Some(Vec::new());
        }
    }

    pub fn events(&self) -> Option<&[DeviceEvent]> {
        self.events.as_deref()
    }

    pub fn take_events(&mut self) -> Vec<DeviceEvent> {
        self.events.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn pair(&self, i: usize, j: usize) -> &DevicePair {
        &self.pairs[i * self.cols + j]
    }

    pub fn pair_mut(&mut self, i: usize, j: usize) -> &mut DevicePair {
        &mut self.pairs[i * self.cols + j]
    }

    pub fn pairs(&self) -> &[DevicePair] {
        &self.pairs
    }

    pub fn planes(&self) -> &[BinaryDevice] {
        &self.planes
    }

    pub fn plane(&self, i: usize, j: usize, k: usize) -> &BinaryDevice {
        &self.planes[(i * self.cols + j) * self.scheme.lsb_bits as usize + k]
    }

    /// Controller-side MSB level of entry (i, j).
    pub fn level(&self, i: usize, j: usize) -> i32 {
        self.levels[i * self.cols + j]
    }

    pub fn levels(&self) -> &[i32] {
        &self.levels
    }

    fn index(&self, i: usize, j: usize) -> Result<usize, HybridError> {
        if i >= self.rows || j >= self.cols {
            return Err(HybridError::Index { row: i, col: j, rows: self.rows, cols: self.cols });
        }
        Ok(i * self.cols + j)
    }

    fn device_rng(&self, i: usize, j: usize, slot: u8, events: u64) -> StreamRng {
        StreamRng::new(self.seed, &[u64::from(self.id), i as u64, j as u64, u64::from(slot), events])
    }

    fn log(&mut self, i: usize, j: usize, slot: u8, kind: EventKind, cause: EventCause, time: f64) {
        if let Some(ev) = self.events.as_mut() {
            ev.push(DeviceEvent { array: self.id, row: i as u32, col: j as u32, slot, kind, cause, time });
        }
    }

    /// Ideal differential of entry `idx` in units of `g_unit`.
    fn ideal_level_units(&self, idx: usize) -> f64 {
        let p = &self.pairs[idx];
        (p.plus.g_prog - p.minus.g_prog) / self.scheme.g_unit
    }

    /// Differential weight value of the MSB pair.
    pub fn decode_msb<R: Rng + ?Sized>(
        &self,
        i: usize,
        j: usize,
        t: f64,
        mode: ReadMode,
        rng: &mut R,
    ) -> Result<f64, HybridError> {
        let idx = self.index(i, j)?;
        let p = &self.pairs[idx];
        let (gp, gm) = match mode {
            ReadMode::Ideal => (p.plus.g_prog, p.minus.g_prog),
            ReadMode::Noisy => (p.plus.read_analog(&self.model, t, rng)?, p.minus.read_analog(&self.model, t, rng)?),
        };
        Ok((gp - gm) / self.scheme.g_unit * self.scheme.delta_msb())
    }

    /// Noise-free conductances of every G+ and G- at time `t`, row-major.
    pub fn conductance_snapshot(&self, t: f64, mode: ReadMode) -> Result<(Vec<f64>, Vec<f64>), HybridError> {
        let mut plus = Vec::with_capacity(self.len());
        let mut minus = Vec::with_capacity(self.len());
        for p in &self.pairs {
            match mode {
                ReadMode::Ideal => {
                    plus.push(p.plus.g_prog);
                    minus.push(p.minus.g_prog);
                }
                ReadMode::Noisy => {
                    plus.push(self.model.drifted(&p.plus, t)?);
                    minus.push(self.model.drifted(&p.minus, t)?);
                }
            }
        }
        Ok((plus, minus))
    }

    fn pulse(&mut self, idx: usize, positive: bool, now: f64, cause: EventCause) {
        let (i, j) = (idx / self.cols, idx % self.cols);
        let slot = if positive { SLOT_PLUS } else { SLOT_MINUS };
        let dev = if positive { &self.pairs[idx].plus } else { &self.pairs[idx].minus };
        let mut rng = self.device_rng(i, j, slot, dev.events);
        let model = &self.model;
        let pair = &mut self.pairs[idx];
        let dev = if positive { &mut pair.plus } else { &mut pair.minus };
        dev.set_pulse(model, now, &mut rng);
        self.log(i, j, slot, EventKind::Set, cause, now);
    }

    fn program_idx(&mut self, idx: usize, target: i32, now: f64, cause: EventCause) -> Result<u32, HybridError> {
        let max = self.scheme.msb_levels;
        if target.abs() > max {
            return Err(HybridError::Level { level: target, max });
        }
        let tol = self.policy.verify_tol;
        let mut pulses = 0;
        loop {
            let err = self.ideal_level_units(idx) - f64::from(target);
            if err.abs() <= tol {
                return Ok(pulses);
            }
            if pulses >= self.policy.max_verify_pulses {
                return Err(HybridError::Saturated { pulses });
            }
            self.pulse(idx, err < 0.0, now, cause);
            pulses += 1;
        }
    }

    /// Program-and-verify towards `target_level` using SET pulses only.
    /// Returns the number of pulses, or `Saturated` once the budget is spent.
    pub fn program_msb(&mut self, i: usize, j: usize, target_level: i32, now: f64) -> Result<u32, HybridError> {
        let idx = self.index(i, j)?;
        let pulses = self.program_idx(idx, target_level, now, EventCause::Carry)?;
        self.levels[idx] = target_level;
        Ok(pulses)
    }

    /// Programs every entry from the RESET state; used for initialization.
    /// Entries that fail to converge keep their nearest reachable level.
    pub fn program_all(&mut self, levels: &[i32], now: f64) -> Result<u64, HybridError> {
        assert_eq!(levels.len(), self.len(), "level grid shape mismatch");
        let mut total = 0u64;
        for (idx, &level) in levels.iter().enumerate() {
            match self.program_idx(idx, level, now, EventCause::Init) {
                Ok(p) => {
                    total += u64::from(p);
                    self.levels[idx] = level;
                }
                Err(HybridError::Saturated { pulses }) => {
                    total += u64::from(pulses);
                    self.levels[idx] = self.nearest_level(idx);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(total)
    }

    fn nearest_level(&self, idx: usize) -> i32 {
        let max = self.scheme.msb_levels;
        (self.ideal_level_units(idx).round() as i32).clamp(-max, max)
    }

    fn plane_range(&self, idx: usize) -> std::ops::Range<usize> {
        let b = self.scheme.lsb_bits as usize;
        idx * b..(idx + 1) * b
    }

    fn decode_bits(&self, bits: u32) -> i32 {
        let n = self.scheme.lsb_bits;
        let shift = 32 - n;
        ((bits << shift) as i32) >> shift
    }

    fn lsb_read_idx<R: Rng + ?Sized>(&self, idx: usize, t: f64, mode: ReadMode, rng: &mut R) -> Result<i32, HybridError> {
        let mut bits = 0u32;
        for (k, dev) in self.planes[self.plane_range(idx)].iter().enumerate() {
            let b = match mode {
                ReadMode::Ideal => dev.state,
                ReadMode::Noisy => dev.read_bit(&self.model, t, rng)?,
            };
            bits |= u32::from(b) << k;
        }
        Ok(self.decode_bits(bits))
    }

    /// Two's-complement accumulator value in ticks.
    pub fn lsb_read<R: Rng + ?Sized>(&self, i: usize, j: usize, t: f64, mode: ReadMode, rng: &mut R) -> Result<i32, HybridError> {
        let idx = self.index(i, j)?;
        self.lsb_read_idx(idx, t, mode, rng)
    }

    fn lsb_write_idx(&mut self, idx: usize, value: i32, now: f64) -> Result<u32, HybridError> {
        let (min, max) = (self.scheme.acc_min(), self.scheme.acc_max());
        if value < min || value > max {
            return Err(HybridError::Accumulator { value, min, max });
        }
        let (i, j) = (idx / self.cols, idx % self.cols);
        let bits = value as u32;
        let mut flips = 0;
        for k in 0..self.scheme.lsb_bits as usize {
            let pos = idx * self.scheme.lsb_bits as usize + k;
            let want = (bits >> k) & 1 == 1;
            if self.planes[pos].state == want {
                continue;
            }
            let slot = SLOT_PLANE0 + k as u8;
            let mut rng = self.device_rng(i, j, slot, self.planes[pos].events);
            self.planes[pos].write_bit(&self.model, want, now, &mut rng);
            let kind = if want { EventKind::BitSet } else { EventKind::BitReset };
            self.log(i, j, slot, kind, EventCause::Accumulate, now);
            flips += 1;
        }
        Ok(flips)
    }

    /// Writes `value` into the bit-planes, flipping only cells whose logical
    /// state differs. Returns the flip count.
    pub fn lsb_write(&mut self, i: usize, j: usize, value: i32, now: f64) -> Result<u32, HybridError> {
        let idx = self.index(i, j)?;
        self.lsb_write_idx(idx, value, now)
    }

    /// Adds `q` ticks to the accumulator, carrying whole MSB levels into the
    /// multi-level pair. Carries that would leave `+/-msb_levels` are clamped
    /// and the residual saturates at the accumulator rails.
    pub fn accumulate<R: Rng + ?Sized>(
        &mut self,
        i: usize,
        j: usize,
        q: i32,
        now: f64,
        read_mode: ReadMode,
        rng: &mut R,
    ) -> Result<AccumulateOutcome, HybridError> {
        let idx = self.index(i, j)?;
        let a = self.lsb_read_idx(idx, now, read_mode, rng)?;
        let half = self.scheme.acc_half();
        let max_level = self.scheme.msb_levels;
        let sum = a + q;
        let wanted = sum / half;
        let level = self.levels[idx];
        let new_level = (level + wanted).clamp(-max_level, max_level);
        let carry = new_level - level;
        let raw_residual = sum - carry * half;
        let residual = raw_residual.clamp(self.scheme.acc_min(), self.scheme.acc_max());
        let mut out = AccumulateOutcome {
            carry,
            clamped: carry != wanted || residual != raw_residual,
            ..Default::default()
        };
        out.flips = self.lsb_write_idx(idx, residual, now)?;
        if carry != 0 {
            match self.program_idx(idx, new_level, now, EventCause::Carry) {
                Ok(p) => {
                    out.pulses = p;
                    self.levels[idx] = new_level;
                }
                Err(HybridError::Saturated { pulses }) => {
                    out.pulses = pulses;
                    out.forced_refresh = true;
                    let (p, ok) = self.reprogram(idx, new_level, now)?;
                    out.pulses += p;
                    out.saturated = !ok;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn reset_pair(&mut self, idx: usize, now: f64) {
        let (i, j) = (idx / self.cols, idx % self.cols);
        let model = &self.model;
        let pair = &mut self.pairs[idx];
        pair.plus.reset(model, now);
        pair.minus.reset(model, now);
        self.log(i, j, SLOT_PLUS, EventKind::Reset, EventCause::Refresh, now);
        self.log(i, j, SLOT_MINUS, EventKind::Reset, EventCause::Refresh, now);
    }

    /// Resets both devices and programs `level` from scratch. Returns pulses
    /// used and whether verify converged.
    fn reprogram(&mut self, idx: usize, level: i32, now: f64) -> Result<(u32, bool), HybridError> {
        self.reset_pair(idx, now);
        match self.program_idx(idx, level, now, EventCause::Refresh) {
            Ok(p) => {
                self.levels[idx] = level;
                Ok((p, true))
            }
            Err(HybridError::Saturated { pulses }) => {
                self.levels[idx] = self.nearest_level(idx);
                Ok((pulses, false))
            }
            Err(e) => Err(e),
        }
    }

    /// Refreshes a near-saturated pair: the nearest level of the current
    /// differential is re-programmed from the RESET state. Returns whether the
    /// pair was refreshed.
    pub fn refresh(&mut self, i: usize, j: usize, now: f64) -> Result<bool, HybridError> {
        let idx = self.index(i, j)?;
        Ok(self.refresh_idx(idx, now)?.is_some())
    }

    /// `Some(converged)` when a refresh happened.
    fn refresh_idx(&mut self, idx: usize, now: f64) -> Result<Option<bool>, HybridError> {
        let p = &self.pairs[idx];
        let threshold = self.policy.refresh_threshold * self.model.params.g_max;
        if p.plus.g_prog.max(p.minus.g_prog) < threshold {
            return Ok(None);
        }
        let level = self.nearest_level(idx);
        let (_, ok) = self.reprogram(idx, level, now)?;
        Ok(Some(ok))
    }

    /// Refresh sweep over every pair. Returns (refreshed, failed-to-converge).
    pub fn refresh_all(&mut self, now: f64) -> Result<(u64, u64), HybridError> {
        let mut refreshed = 0;
        let mut failed = 0;
        for idx in 0..self.len() {
            if let Some(ok) = self.refresh_idx(idx, now)? {
                refreshed += 1;
                failed += u64::from(!ok);
            }
        }
        Ok((refreshed, failed))
    }

    /// MSB value plus accumulator contribution.
    pub fn decode_full<R: Rng + ?Sized>(&self, i: usize, j: usize, t: f64, mode: ReadMode, rng: &mut R) -> Result<f64, HybridError> {
        let msb = self.decode_msb(i, j, t, mode, rng)?;
        let acc = self.lsb_read(i, j, t, mode, rng)?;
        Ok(msb + f64::from(acc) * self.scheme.delta_lsb())
    }

    /// Latest programming time over every device.
    pub fn last_programmed(&self) -> f64 {
        let msb = self.pairs.iter().map(|p| p.plus.t_prog.max(p.minus.t_prog));
        let lsb = self.planes.iter().map(|b| b.t_prog);
        msb.chain(lsb).fold(0.0, f64::max)
    }
}
