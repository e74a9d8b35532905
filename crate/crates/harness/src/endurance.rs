//! Write-erase cycle report, checked against a replay of the event log.

use std::collections::BTreeMap;

use hic_core::hybridweight::{DeviceEvent, EventKind, SLOT_PLANE0};
use hic_core::nn::Network;
use serde::Serialize;

use crate::error::HarnessError;

/// Equal-width integer bins; bin `k` holds counts in `[edges[k], edges[k+1])`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Histogram {
    pub edges: Vec<u64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[u64], bins: usize) -> Self {
        let bins = bins.max(1);
        let max = values.iter().copied().max().unwrap_or(0);
        let width = (max + 1).div_ceil(bins as u64).max(1);
        let edges = (0..=bins as u64).map(|k| k * width).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            counts[((v / width) as usize).min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArrayEndurance {
    pub devices: u64,
    pub max_cycles: u64,
    pub mean_cycles: f64,
    pub histogram: Histogram,
}

impl ArrayEndurance {
    fn new(cycles: &[u64], bins: usize) -> Self {
        let n = cycles.len() as u64;
        let sum: u64 = cycles.iter().sum();
        Self {
            devices: n,
            max_cycles: cycles.iter().copied().max().unwrap_or(0),
            mean_cycles: if n == 0 { 0.0 } else { sum as f64 / n as f64 },
            histogram: Histogram::new(cycles, bins),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnduranceReport {
    /// Multi-level pair devices of all layers.
    pub msb: ArrayEndurance,
    /// Binary bit-plane devices of all layers.
    pub lsb: ArrayEndurance,
    pub limit: f64,
    /// Largest cycle count as a fraction of `limit`.
    pub limit_fraction: f64,
    pub events: u64,
}

/// Per-device replay state.
#[derive(Default)]
struct Replay {
    burst: u64,
    closed_cycles: u64,
    bit_resets: u64,
    events: u64,
}

impl Replay {
    /// A SET burst of `n` pulses closed by a RESET spans `ceil(n / ppc)`
    /// cycles; a trailing open burst has not completed its last cycle.
    fn mlc_cycles(&self, ppc: u64) -> u64 {
        self.closed_cycles + self.burst.div_ceil(ppc).saturating_sub(1)
    }
}

type Key = (u32, u32, u32, u8);

fn replay(events: &[DeviceEvent], ppc_of: &BTreeMap<u32, u64>) -> Result<BTreeMap<Key, Replay>, HarnessError> {
    let mut devices: BTreeMap<Key, Replay> = BTreeMap::new();
    for (n, e) in events.iter().enumerate() {
        let Some(&ppc) = ppc_of.get(&e.array) else {
            return Err(HarnessError::Replay(format!("event {n} names unknown array {}", e.array)));
        };
        let mlc = e.slot < SLOT_PLANE0;
        if mlc != matches!(e.kind, EventKind::Set | EventKind::Reset) {
            return Err(HarnessError::Replay(format!("event {n}: {:?} on slot {}", e.kind, e.slot)));
        }
        let d = devices.entry((e.array, e.row, e.col, e.slot)).or_default();
        d.events += 1;
        match e.kind {
            EventKind::Set => d.burst += 1,
            EventKind::Reset => {
                d.closed_cycles += d.burst.div_ceil(ppc);
                d.burst = 0;
            }
            EventKind::BitSet => {}
            EventKind::BitReset => d.bit_resets += 1,
        }
    }
    Ok(devices)
}

/// Builds the report from the network's device counters and verifies every
/// counter against an independent replay of `events`.
pub fn endurance_report(net: &Network, events: &[DeviceEvent], limit: f64, bins: usize) -> Result<EnduranceReport, HarnessError> {
    let ppc_of: BTreeMap<u32, u64> =
        net.crossbars().map(|c| (c.weights.id, u64::from(c.weights.model.params.pulses_per_cycle))).collect();
    let mut replayed = replay(events, &ppc_of)?;
    let (mut msb, mut lsb) = (Vec::new(), Vec::new());
    let mut device_events = 0u64;
    for c in net.crossbars() {
        let w = &c.weights;
        let ppc = ppc_of[&w.id];
        let bits = w.scheme.lsb_bits as usize;
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                let pair = w.pair(i, j);
                for (slot, dev) in [(0u8, &pair.plus), (1u8, &pair.minus)] {
                    let r = replayed.remove(&(w.id, i as u32, j as u32, slot)).unwrap_or_default();
                    let expect = r.mlc_cycles(ppc);
                    if dev.cycles != expect || dev.events != r.events {
                        return Err(HarnessError::Replay(format!(
                            "array {} ({i}, {j}) slot {slot}: counters {} cycles / {} events, replay {expect} / {}",
                            w.id, dev.cycles, dev.events, r.events
                        )));
                    }
                    device_events += dev.events;
                    msb.push(dev.cycles);
                }
                for k in 0..bits {
                    let dev = w.plane(i, j, k);
                    let slot = SLOT_PLANE0 + k as u8;
                    let r = replayed.remove(&(w.id, i as u32, j as u32, slot)).unwrap_or_default();
                    if dev.cycles != r.bit_resets || dev.events != r.events {
                        return Err(HarnessError::Replay(format!(
                            "array {} ({i}, {j}) bit {k}: counters {} cycles / {} events, replay {} / {}",
                            w.id, dev.cycles, dev.events, r.bit_resets, r.events
                        )));
                    }
                    device_events += dev.events;
                    lsb.push(dev.cycles);
                }
            }
        }
    }
    if let Some((key, _)) = replayed.iter().next() {
        return Err(HarnessError::Replay(format!("events for device {key:?} outside every array")));
    }
    if device_events != events.len() as u64 {
        return Err(HarnessError::Replay(format!("{} logged events, device counters sum to {device_events}", events.len())));
    }
    let msb = ArrayEndurance::new(&msb, bins);
    let lsb = ArrayEndurance::new(&lsb, bins);
    let limit_fraction = msb.max_cycles.max(lsb.max_cycles) as f64 / limit;
    Ok(EnduranceReport { msb, lsb, limit, limit_fraction, events: events.len() as u64 })
}

/// Histogram rows `array,bin_lo,bin_hi,devices`.
pub fn histogram_csv(report: &EnduranceReport) -> String {
    let mut out = String::from("array,bin_lo,bin_hi,devices\n");
    for (name, a) in [("msb", &report.msb), ("lsb", &report.lsb)] {
        for (k, c) in a.histogram.counts.iter().enumerate() {
            out.push_str(&format!("{name},{},{},{c}\n", a.histogram.edges[k], a.histogram.edges[k + 1]));
        }
    }
    out
}
