//! Compact binary device event log and its text exporter.
//!
//! Layout (little endian): magic `HICE`, u32 version, u64 record count, then
//! 23-byte records `array u32, row u32, col u32, slot u8, kind u8, cause u8,
//! time f64`.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use hic_core::hybridweight::{DeviceEvent, EventCause, EventKind};
use hic_core::nn::Network;

use crate::error::HarnessError;

pub const MAGIC: [u8; 4] = *b"HICE";
pub const VERSION: u32 = 1;
pub const RECORD_BYTES: usize = 23;
const HEADER_BYTES: usize = 16;

/// All logged events of a network, array by array in layer order.
pub fn collect_events(net: &Network) -> Vec<DeviceEvent> {
    net.crossbars().flat_map(|c| c.weights.events().unwrap_or_default().iter().copied()).collect()
}

pub fn encode(events: &[DeviceEvent]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + RECORD_BYTES * events.len());
    out.extend_from_slice(&MAGIC);
    out.write_u32::<LittleEndian>(VERSION).expect("vec write");
    out.write_u64::<LittleEndian>(events.len() as u64).expect("vec write");
    for e in events {
        out.write_u32::<LittleEndian>(e.array).expect("vec write");
        out.write_u32::<LittleEndian>(e.row).expect("vec write");
        out.write_u32::<LittleEndian>(e.col).expect("vec write");
        out.write_u8(e.slot).expect("vec write");
        out.write_u8(e.kind as u8).expect("vec write");
        out.write_u8(e.cause as u8).expect("vec write");
        out.write_f64::<LittleEndian>(e.time).expect("vec write");
    }
    out
}

fn kind_from(b: u8) -> Option<EventKind> {
    Some(match b {
        0 => EventKind::Set,
        1 => EventKind::Reset,
        2 => EventKind::BitSet,
        3 => EventKind::BitReset,
        _ => return None,
    })
}

fn cause_from(b: u8) -> Option<EventCause> {
    Some(match b {
        0 => EventCause::Init,
        1 => EventCause::Carry,
        2 => EventCause::Refresh,
        3 => EventCause::Accumulate,
        _ => return None,
    })
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<DeviceEvent>, HarnessError> {
    let err = |offset: usize, message: String| HarnessError::Format { path: path.to_path_buf(), offset: offset as u64, message };
    if bytes.len() < HEADER_BYTES {
        return Err(err(bytes.len(), format!("truncated header: {} of {HEADER_BYTES} bytes", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(err(0, format!("bad magic {:02x?}, expected {:02x?}", &bytes[..4], MAGIC)));
    }
    let mut r = &bytes[4..];
    let version = r.read_u32::<LittleEndian>().expect("length checked");
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let count = r.read_u64::<LittleEndian>().expect("length checked");
    let body = bytes.len() - HEADER_BYTES;
    let expected = count.checked_mul(RECORD_BYTES as u64).ok_or_else(|| err(8, "record count overflows".into()))?;
    if body as u64 != expected {
        return Err(err(bytes.len().min(HEADER_BYTES + expected as usize), format!("{count} records need {expected} bytes, found {body}")));
    }
    let mut events = Vec::with_capacity(count as usize);
    for k in 0..count as usize {
        let at = HEADER_BYTES + k * RECORD_BYTES;
        let mut rec = &bytes[at..at + RECORD_BYTES];
        let array = rec.read_u32::<LittleEndian>().expect("sized");
        let row = rec.read_u32::<LittleEndian>().expect("sized");
        let col = rec.read_u32::<LittleEndian>().expect("sized");
        let slot = rec.read_u8().expect("sized");
        let kind = kind_from(rec.read_u8().expect("sized")).ok_or_else(|| err(at + 13, format!("bad event kind {}", bytes[at + 13])))?;
        let cause = cause_from(rec.read_u8().expect("sized")).ok_or_else(|| err(at + 14, format!("bad event cause {}", bytes[at + 14])))?;
        let time = rec.read_f64::<LittleEndian>().expect("sized");
        events.push(DeviceEvent { array, row, col, slot, kind, cause, time });
    }
    Ok(events)
}

pub fn write_file(path: &Path, events: &[DeviceEvent]) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.write_all(&encode(events)).map_err(|e| HarnessError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<DeviceEvent>, HarnessError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| HarnessError::io(path, e))?;
    decode(&bytes, path)
}

fn kind_name(k: EventKind) -> &'static str {
    match k {
        EventKind::Set => "set",
        EventKind::Reset => "reset",
        EventKind::BitSet => "bit-set",
        EventKind::BitReset => "bit-reset",
    }
}

fn cause_name(c: EventCause) -> &'static str {
    match c {
        EventCause::Init => "init",
        EventCause::Carry => "carry",
        EventCause::Refresh => "refresh",
        EventCause::Accumulate => "accumulate",
    }
}

/// One tab-separated line per event, with a header.
pub fn export_text<W: Write>(events: &[DeviceEvent], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "array\trow\tcol\tslot\tkind\tcause\ttime_s")?;
    for e in events {
        writeln!(w, "{}\t{}\t{}\t{}\t{}\t{}\t{}", e.array, e.row, e.col, e.slot, kind_name(e.kind), cause_name(e.cause), e.time)?;
    }
    Ok(())
}
