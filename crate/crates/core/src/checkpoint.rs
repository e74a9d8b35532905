//! Versioned little-endian binary dumps.
//!
//! A weight block stores the quantization scheme, device model, level grid,
//! accumulator grid and every device's state and counters. A network
//! checkpoint wraps the weight blocks with converter calibration, batch-norm
//! state and the training clock; it reloads into a network built from the
//! same architecture and continues bit-identically.

use std::io::{Read, Write};

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use thiserror::Error;

use crate::crossbar::{ClipPolicy, Converter};
use crate::device::{BinaryDevice, DeviceModel, DeviceModelParams, MultiLevelDevice, NonIdealities};
use crate::hybridweight::{DevicePair, HybridWeightMatrix, ProgramPolicy, QuantScheme, ReadMode};
use crate::nn::{Network, Node, WeightStore};
use crate::rng::StreamRng;

const WEIGHTS_MAGIC: &[u8; 4] = b"HICW";
const NETWORK_MAGIC: &[u8; 4] = b"HICN";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    Magic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint does not match the network: {0}")]
    Mismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Clock and step counter saved next to the network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainState {
    pub now: f64,
    pub seconds_per_batch: f64,
    pub step: u64,
}

fn header<W: Write>(w: &mut W, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    w.write_u16::<LE>(VERSION)?;
    Ok(())
}

fn check_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if &found != magic {
        return Err(CheckpointError::Magic { found, expected: *magic });
    }
    let v = r.read_u16::<LE>()?;
    if v != VERSION {
        return Err(CheckpointError::Version(v));
    }
    Ok(())
}

fn write_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    Ok(w.write_u64::<LE>(n as u64)?)
}

fn read_len<R: Read>(r: &mut R, limit: usize) -> Result<usize> {
    let n = r.read_u64::<LE>()?;
    if n > limit as u64 {
        return Err(CheckpointError::Corrupt(format!("length {n} exceeds {limit}")));
    }
    Ok(n as usize)
}

const MAX_LEN: usize = 1 << 32;

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    write_len(w, v.len())?;
    for &x in v {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = read_len(r, MAX_LEN)?;
    (0..n).map(|_| Ok(r.read_f64::<LE>()?)).collect()
}

fn write_params<W: Write>(w: &mut W, p: &DeviceModelParams) -> Result<()> {
    for x in [p.g_max, p.g_min, p.delta0, p.delta_linear, p.sigma_write, p.sigma_read, p.nu_mean, p.nu_sigma, p.t0, p.g_high, p.g_threshold] {
        w.write_f64::<LE>(x)?;
    }
    w.write_u32::<LE>(p.pulses_per_cycle)?;
    Ok(())
}

fn read_params<R: Read>(r: &mut R) -> Result<DeviceModelParams> {
    let mut f = [0.0; 11];
    for x in &mut f {
        *x = r.read_f64::<LE>()?;
    }
    Ok(DeviceModelParams {
        g_max: f[0],
        g_min: f[1],
        delta0: f[2],
        delta_linear: f[3],
        sigma_write: f[4],
        sigma_read: f[5],
        nu_mean: f[6],
        nu_sigma: f[7],
        t0: f[8],
        g_high: f[9],
        g_threshold: f[10],
        pulses_per_cycle: r.read_u32::<LE>()?,
    })
}

fn write_multi<W: Write>(w: &mut W, d: &MultiLevelDevice) -> Result<()> {
    w.write_f64::<LE>(d.g_prog)?;
    w.write_f64::<LE>(d.t_prog)?;
    w.write_f64::<LE>(d.nu)?;
    w.write_u32::<LE>(d.n_set)?;
    w.write_u32::<LE>(d.set_in_cycle)?;
    for x in [d.cycles, d.total_sets, d.total_resets, d.events] {
        w.write_u64::<LE>(x)?;
    }
    Ok(())
}

fn read_multi<R: Read>(r: &mut R, d: &mut MultiLevelDevice) -> Result<()> {
    d.g_prog = r.read_f64::<LE>()?;
    d.t_prog = r.read_f64::<LE>()?;
    d.nu = r.read_f64::<LE>()?;
    d.n_set = r.read_u32::<LE>()?;
    d.set_in_cycle = r.read_u32::<LE>()?;
    d.cycles = r.read_u64::<LE>()?;
    d.total_sets = r.read_u64::<LE>()?;
    d.total_resets = r.read_u64::<LE>()?;
    d.events = r.read_u64::<LE>()?;
    Ok(())
}

fn write_binary<W: Write>(w: &mut W, d: &BinaryDevice) -> Result<()> {
    w.write_u8(u8::from(d.state))?;
    w.write_f64::<LE>(d.g_prog)?;
    w.write_f64::<LE>(d.t_prog)?;
    w.write_f64::<LE>(d.nu)?;
    for x in [d.flips, d.cycles, d.events] {
        w.write_u64::<LE>(x)?;
    }
    Ok(())
}

fn read_binary<R: Read>(r: &mut R, d: &mut BinaryDevice) -> Result<()> {
    d.state = match r.read_u8()? {
        0 => false,
        1 => true,
        b => return Err(CheckpointError::Corrupt(format!("bit state {b}"))),
    };
    d.g_prog = r.read_f64::<LE>()?;
    d.t_prog = r.read_f64::<LE>()?;
    d.nu = r.read_f64::<LE>()?;
    d.flips = r.read_u64::<LE>()?;
    d.cycles = r.read_u64::<LE>()?;
    d.events = r.read_u64::<LE>()?;
    Ok(())
}

/// Writes one weight block with its own header.
pub fn write_weights<W: Write>(w: &mut W, m: &HybridWeightMatrix) -> Result<()> {
    header(w, WEIGHTS_MAGIC)?;
    w.write_u32::<LE>(m.id)?;
    w.write_u64::<LE>(m.seed)?;
    write_len(w, m.rows())?;
    write_len(w, m.cols())?;
    let s = &m.scheme;
    w.write_f64::<LE>(s.w_max)?;
    w.write_i32::<LE>(s.msb_levels)?;
    w.write_u32::<LE>(s.lsb_bits)?;
    w.write_f64::<LE>(s.g_unit)?;
    w.write_f64::<LE>(m.policy.verify_tol)?;
    w.write_u32::<LE>(m.policy.max_verify_pulses)?;
    w.write_f64::<LE>(m.policy.refresh_threshold)?;
    write_params(w, &m.model.params)?;
    let f = m.model.flags;
    for b in [f.write_noise, f.read_noise, f.drift, f.nonlinearity] {
        w.write_u8(u8::from(b))?;
    }
    for &l in m.levels() {
        w.write_i32::<LE>(l)?;
    }
    // accumulator grid, redundant with the bit-planes; checked on load
    let mut rng = StreamRng::new(0, &[]);
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let a = m.lsb_read(i, j, 0.0, ReadMode::Ideal, &mut rng).expect("in range");
            w.write_i32::<LE>(a)?;
        }
    }
    for p in m.pairs() {
        write_multi(w, &p.plus)?;
        write_multi(w, &p.minus)?;
    }
    for b in m.planes() {
        write_binary(w, b)?;
    }
    Ok(())
}

/// Reads a weight block written by [`write_weights`]. The event log is not
/// part of the block and starts disabled.
pub fn read_weights<R: Read>(r: &mut R) -> Result<HybridWeightMatrix> {
    check_header(r, WEIGHTS_MAGIC)?;
    let id = r.read_u32::<LE>()?;
    let seed = r.read_u64::<LE>()?;
    let rows = read_len(r, MAX_LEN)?;
    let cols = read_len(r, MAX_LEN)?;
    let scheme = QuantScheme::new(r.read_f64::<LE>()?, r.read_i32::<LE>()?, r.read_u32::<LE>()?, r.read_f64::<LE>()?);
    let policy = ProgramPolicy {
        verify_tol: r.read_f64::<LE>()?,
        max_verify_pulses: r.read_u32::<LE>()?,
        refresh_threshold: r.read_f64::<LE>()?,
    };
    let params = read_params(r)?;
    let mut flag = || -> Result<bool> { Ok(r.read_u8()? != 0) };
    let flags = NonIdealities { write_noise: flag()?, read_noise: flag()?, drift: flag()?, nonlinearity: flag()? };
    let model = DeviceModel::new(params, flags).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if rows.checked_mul(cols).is_none_or(|n| n > MAX_LEN) {
        return Err(CheckpointError::Corrupt(format!("{rows}x{cols} weight grid")));
    }
    let mut m = HybridWeightMatrix::new(id, seed, rows, cols, scheme, policy, model, 0.0)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    for l in m.levels.iter_mut() {
        *l = r.read_i32::<LE>()?;
    }
    let acc: Vec<i32> = (0..rows * cols).map(|_| r.read_i32::<LE>()).collect::<std::io::Result<_>>()?;
    for DevicePair { plus, minus } in m.pairs.iter_mut() {
        read_multi(r, plus)?;
        read_multi(r, minus)?;
    }
    for b in m.planes.iter_mut() {
        read_binary(r, b)?;
    }
    let mut rng = StreamRng::new(0, &[]);
    for (idx, &a) in acc.iter().enumerate() {
        let stored = m.lsb_read(idx / cols, idx % cols, 0.0, ReadMode::Ideal, &mut rng).expect("in range");
        if stored != a {
            return Err(CheckpointError::Corrupt(format!("accumulator {idx}: grid {a} but bit-planes {stored}")));
        }
    }
    Ok(m)
}

fn write_converter<W: Write>(w: &mut W, c: &Converter) -> Result<()> {
    w.write_u8(match c.policy {
        ClipPolicy::Fixed => 0,
        ClipPolicy::Percentile => 1,
        ClipPolicy::Dynamic => 2,
    })?;
    w.write_u32::<LE>(c.bits)?;
    match c.clip {
        Some(v) => {
            w.write_u8(1)?;
            w.write_f64::<LE>(v)?;
        }
        None => w.write_u8(0)?,
    }
    w.write_u32::<LE>(c.batches_seen())?;
    write_f64s(w, c.observed())
}

fn read_converter<R: Read>(r: &mut R, c: &mut Converter) -> Result<()> {
    let policy = match r.read_u8()? {
        0 => ClipPolicy::Fixed,
        1 => ClipPolicy::Percentile,
        2 => ClipPolicy::Dynamic,
        p => return Err(CheckpointError::Corrupt(format!("converter policy {p}"))),
    };
    let bits = r.read_u32::<LE>()?;
    if policy != c.policy || bits != c.bits {
        return Err(CheckpointError::Mismatch(format!("converter {policy:?}/{bits} bits vs {:?}/{} bits", c.policy, c.bits)));
    }
    let clip = match r.read_u8()? {
        0 => None,
        _ => Some(r.read_f64::<LE>()?),
    };
    let seen = r.read_u32::<LE>()?;
    let observed = read_f64s(r)?;
    c.restore(clip, seen, observed);
    Ok(())
}

const NODE_DENSE: u8 = 1;
const NODE_CONV: u8 = 2;
const NODE_NORM: u8 = 3;
const NODE_OTHER: u8 = 4;
const STORE_DIGITAL: u8 = 0;
const STORE_ANALOG: u8 = 1;

fn write_store<W: Write>(w: &mut W, s: &WeightStore) -> Result<()> {
    match s {
        WeightStore::Digital(m) => {
            w.write_u8(STORE_DIGITAL)?;
            write_len(w, m.nrows())?;
            write_len(w, m.ncols())?;
            write_f64s(w, m.as_slice().expect("standard layout"))
        }
        WeightStore::Analog(xb) => {
            w.write_u8(STORE_ANALOG)?;
            write_weights(w, &xb.weights)?;
            w.write_u8(u8::from(xb.bias_row))?;
            w.write_u64::<LE>(xb.op_counter)?;
            for c in xb.converters.converters() {
                write_converter(w, c)?;
            }
            Ok(())
        }
    }
}

fn read_store<R: Read>(r: &mut R, s: &mut WeightStore, node: usize) -> Result<()> {
    let tag = r.read_u8()?;
    match (tag, s) {
        (STORE_DIGITAL, WeightStore::Digital(m)) => {
            let (rows, cols) = (read_len(r, MAX_LEN)?, read_len(r, MAX_LEN)?);
            if (rows, cols) != m.dim() {
                return Err(CheckpointError::Mismatch(format!("node {node}: {rows}x{cols} weights vs {:?}", m.dim())));
            }
            let v = read_f64s(r)?;
            if v.len() != m.len() {
                return Err(CheckpointError::Corrupt(format!("node {node}: {} weight values", v.len())));
            }
            m.as_slice_mut().expect("standard layout").copy_from_slice(&v);
        }
        (STORE_ANALOG, WeightStore::Analog(xb)) => {
            let mut weights = read_weights(r)?;
            if (weights.rows(), weights.cols()) != (xb.rows(), xb.cols()) {
                return Err(CheckpointError::Mismatch(format!(
                    "node {node}: {}x{} crossbar vs {}x{}",
                    weights.rows(),
                    weights.cols(),
                    xb.rows(),
                    xb.cols()
                )));
            }
            if xb.weights.events().is_some() {
                weights.enable_event_log();
            }
            xb.weights = weights;
            xb.bias_row = r.read_u8()? != 0;
            xb.op_counter = r.read_u64::<LE>()?;
            for c in xb.converters.converters_mut() {
                read_converter(r, c)?;
            }
        }
        (t, s) => {
            let have = if matches!(s, WeightStore::Digital(_)) { "digital" } else { "analog" };
            return Err(CheckpointError::Mismatch(format!("node {node}: stored backend tag {t}, network is {have}")));
        }
    }
    Ok(())
}

/// Writes the full network state plus the training clock.
pub fn save_network<W: Write>(w: &mut W, net: &Network, state: &TrainState) -> Result<()> {
    header(w, NETWORK_MAGIC)?;
    w.write_u64::<LE>(net.seed)?;
    w.write_f64::<LE>(state.now)?;
    w.write_f64::<LE>(state.seconds_per_batch)?;
    w.write_u64::<LE>(state.step)?;
    write_len(w, net.nodes.len())?;
    for node in &net.nodes {
        match node {
            Node::Dense(l) => {
                w.write_u8(NODE_DENSE)?;
                write_store(w, &l.store)?;
            }
            Node::Conv(l) => {
                w.write_u8(NODE_CONV)?;
                write_store(w, &l.store)?;
            }
            Node::BatchNorm(bn) => {
                w.write_u8(NODE_NORM)?;
                for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    write_f64s(w, v)?;
                }
                w.write_f64::<LE>(bn.eps)?;
                w.write_f64::<LE>(bn.momentum)?;
            }
            _ => w.write_u8(NODE_OTHER)?,
        }
    }
    Ok(())
}

/// Loads a checkpoint into `net`, which must have been built from the same
/// architecture and backend.
pub fn load_network<R: Read>(r: &mut R, net: &mut Network) -> Result<TrainState> {
    check_header(r, NETWORK_MAGIC)?;
    net.seed = r.read_u64::<LE>()?;
    let state = TrainState { now: r.read_f64::<LE>()?, seconds_per_batch: r.read_f64::<LE>()?, step: r.read_u64::<LE>()? };
    let n = read_len(r, MAX_LEN)?;
    if n != net.nodes.len() {
        return Err(CheckpointError::Mismatch(format!("{n} nodes vs {}", net.nodes.len())));
    }
    for (k, node) in net.nodes.iter_mut().enumerate() {
        let tag = r.read_u8()?;
        match (tag, node) {
            (NODE_DENSE, Node::Dense(l)) => read_store(r, &mut l.store, k)?,
            (NODE_CONV, Node::Conv(l)) => read_store(r, &mut l.store, k)?,
            (NODE_NORM, Node::BatchNorm(bn)) => {
                let c = bn.channels();
                let mut vecs = Vec::with_capacity(4);
                for _ in 0..4 {
                    let v = read_f64s(r)?;
                    if v.len() != c {
                        return Err(CheckpointError::Mismatch(format!("node {k}: {} channels vs {c}", v.len())));
                    }
                    vecs.push(v);
                }
                bn.running_var = vecs.pop().expect("4");
                bn.running_mean = vecs.pop().expect("3");
                bn.beta = vecs.pop().expect("2");
                bn.gamma = vecs.pop().expect("1");
                bn.eps = r.read_f64::<LE>()?;
                bn.momentum = r.read_f64::<LE>()?;
            }
            (NODE_OTHER, Node::Relu | Node::Add { .. } | Node::AvgPool { .. } | Node::Loss) => {}
            (t, _) => return Err(CheckpointError::Mismatch(format!("node {k}: stored kind tag {t}"))),
        }
    }
    Ok(state)
}
