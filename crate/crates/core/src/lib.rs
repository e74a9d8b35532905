//! Simulator for hybrid in-memory computing training of neural networks on
//! modelled phase-change memory.
//!
//! * [`device`]: multi-level and binary PCM cells (stochastic write/read,
//!   drift, nonlinear programming curve, endurance counters).
//! * [`hybridweight`]: differential MSB pairs plus a binary LSB accumulator.
//! * [`crossbar`]: converters, transposable VMM and layer tiling.
//! * [`nn`]: a small network engine trained through the crossbars.
//! * [`checkpoint`]: bit-exact binary dumps of weight and network state.

pub mod checkpoint;
pub mod crossbar;
pub mod device;
pub mod hybridweight;
pub mod nn;
pub mod rng;

pub use device::{BinaryDevice, DeviceModel, DeviceModelParams, MultiLevelDevice, NonIdealities, SimClock};
pub use hybridweight::{HybridWeightMatrix, ProgramPolicy, QuantScheme, ReadMode};
pub use rng::StreamRng;
