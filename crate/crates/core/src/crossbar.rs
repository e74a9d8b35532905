//! Transposable analog VMM over the MSB array, with DAC/ADC quantization and
//! tiling onto fixed-size physical crossbars.
//!
//! Partial sums from tiles stacked along the input dimension are converted by
//! their own ADC and added digitally afterwards.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hybridweight::{HybridError, HybridWeightMatrix, ReadMode};
use crate::rng::StreamRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrossbarError {
    #[error("shape mismatch: expected {expected} columns, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("layer kind `{0}` cannot be mapped onto a crossbar")]
    Unsupported(String),
    #[error("invalid converter configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Weights(#[from] HybridError),
}

/// How a converter picks its full-scale range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipPolicy {
    /// Use the configured clip.
    Fixed,
    /// Pass through during the first `warmup_batches` training batches while
    /// recording magnitudes, then freeze the clip at `percentile`.
    Percentile,
    /// Clip each converted vector at its own max magnitude.
    Dynamic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConverterConfig {
    pub dac_bits: u32,
    pub adc_bits: u32,
    pub input_clip: f64,
    pub output_clip: f64,
    /// Policy of the forward-pass converters.
    pub calibration: ClipPolicy,
    /// Policy of the converters used when back-propagating error gradients.
    pub backward_calibration: ClipPolicy,
    pub percentile: f64,
    pub warmup_batches: u32,
    /// Skip all conversion (exact real-valued VMM).
    pub bypass: bool,
    /// Quantize error gradients in the transposed VMM.
    pub quantize_backward: bool,
}

impl Default for ConverterConfig {
    fn default() -> Self {
        Self {
            dac_bits: 8,
            adc_bits: 8,
            input_clip: 1.0,
            output_clip: 1.0,
            calibration: ClipPolicy::Percentile,
            backward_calibration: ClipPolicy::Dynamic,
            percentile: 99.7,
            warmup_batches: 5,
            bypass: false,
            quantize_backward: true,
        }
    }
}

impl ConverterConfig {
    pub fn validate(&self) -> Result<(), CrossbarError> {
        let bad = |m: &str| Err(CrossbarError::Config(m.to_string()));
        if !(1..=24).contains(&self.dac_bits) || !(1..=24).contains(&self.adc_bits) {
            return bad("converter bits must be in 1..=24");
        }
        if !(self.input_clip > 0.0 && self.output_clip > 0.0) {
            return bad("clip ranges must be positive");
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return bad("percentile must be in (0, 100]");
        }
        Ok(())
    }
}

/// Largest code of a symmetric `bits`-bit quantizer (2^bits - 1 levels).
pub fn max_code(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Uniform symmetric quantization onto `2^bits - 1` levels over
/// `[-clip, clip]` with saturation and round-half-to-even.
pub fn quantize(x: f64, bits: u32, clip: f64) -> f64 {
    let m = max_code(bits);
    if m == 0 {
        return 0.0;
    }
    let mf = m as f64;
    let code = (x / clip * mf).round_ties_even().clamp(-mf, mf);
    clip * (code / mf)
}

/// One converter with its calibration state.
#[derive(Clone, Debug, PartialEq)]
pub struct Converter {
    pub bits: u32,
    pub policy: ClipPolicy,
    /// Frozen clip; `None` while a percentile converter is still warming up.
    pub clip: Option<f64>,
    percentile: f64,
    warmup_batches: u32,
    batches_seen: u32,
    observed: Vec<f64>,
}

impl Converter {
    pub fn new(bits: u32, policy: ClipPolicy, clip: f64, percentile: f64, warmup_batches: u32) -> Self {
        let clip = match policy {
            ClipPolicy::Fixed => Some(clip),
            ClipPolicy::Percentile if warmup_batches == 0 => Some(clip),
            _ => None,
        };
        Self { bits, policy, clip, percentile, warmup_batches, batches_seen: 0, observed: Vec::new() }
    }

    pub fn is_calibrating(&self) -> bool {
        self.policy == ClipPolicy::Percentile && self.clip.is_none()
    }

    /// Restores calibration state (checkpoint reload).
    pub fn restore(&mut self, clip: Option<f64>, batches_seen: u32, observed: Vec<f64>) {
        self.clip = clip;
        self.batches_seen = batches_seen;
        self.observed = observed;
    }

    /// Samples collected so far by a warming-up percentile converter.
    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    pub fn batches_seen(&self) -> u32 {
        self.batches_seen
    }

    /// Converts a batch of vectors in place. `training` marks batches that
    /// count towards percentile warm-up.
    pub fn apply<'a>(&mut self, vectors: impl Iterator<Item = &'a mut [f64]>, training: bool) {
        match self.policy {
            ClipPolicy::Dynamic => {
                for v in vectors {
                    let peak = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
                    if peak > 0.0 {
                        v.iter_mut().for_each(|x| *x = quantize(*x, self.bits, peak));
                    }
                }
            }
            ClipPolicy::Fixed | ClipPolicy::Percentile => match self.clip {
                Some(clip) => {
                    for v in vectors {
                        v.iter_mut().for_each(|x| *x = quantize(*x, self.bits, clip));
                    }
                }
                None => {
                    if !training {
                        return;
                    }
                    for v in vectors {
                        self.observed.extend(v.iter().map(|x| x.abs()));
                    }
                    self.batches_seen += 1;
                    if self.batches_seen >= self.warmup_batches {
                        self.freeze();
                    }
                }
            },
        }
    }

    fn freeze(&mut self) {
        let mut obs = std::mem::take(&mut self.observed);
        obs.sort_by(f64::total_cmp);
        let clip = if obs.is_empty() {
            0.0
        } else {
            // nearest-rank percentile
            let rank = ((self.percentile / 100.0) * obs.len() as f64).ceil() as usize;
            obs[rank.clamp(1, obs.len()) - 1]
        };
        self.clip = Some(if clip > 0.0 { clip } else { f64::MIN_POSITIVE });
    }
}

/// The four converters around one crossbar: DAC/ADC for the forward pass and
/// for the transposed (backward) pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ConverterSet {
    pub bypass: bool,
    pub quantize_backward: bool,
    pub fwd_dac: Converter,
    pub fwd_adc: Converter,
    pub bwd_dac: Converter,
    pub bwd_adc: Converter,
}

impl ConverterSet {
    pub fn new(cfg: &ConverterConfig) -> Self {
        let mk = |bits, policy, clip| Converter::new(bits, policy, clip, cfg.percentile, cfg.warmup_batches);
        Self {
            bypass: cfg.bypass,
            quantize_backward: cfg.quantize_backward,
            fwd_dac: mk(cfg.dac_bits, cfg.calibration, cfg.input_clip),
            fwd_adc: mk(cfg.adc_bits, cfg.calibration, cfg.output_clip),
            bwd_dac: mk(cfg.dac_bits, cfg.backward_calibration, cfg.input_clip),
            bwd_adc: mk(cfg.adc_bits, cfg.backward_calibration, cfg.output_clip),
        }
    }

    pub fn converters(&self) -> [&Converter; 4] {
        [&self.fwd_dac, &self.fwd_adc, &self.bwd_dac, &self.bwd_adc]
    }

    pub fn converters_mut(&mut self) -> [&mut Converter; 4] {
        [&mut self.fwd_dac, &mut self.fwd_adc, &mut self.bwd_dac, &mut self.bwd_adc]
    }
}

/// Physical crossbar limits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileLimits {
    pub max_rows: usize,
    pub max_cols: usize,
}

impl Default for TileLimits {
    fn default() -> Self {
        Self { max_rows: 256, max_cols: 256 }
    }
}

/// One physical crossbar holding a rectangular slice of a layer matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossbarTile {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilingPlan {
    pub rows: usize,
    pub cols: usize,
    pub limits: TileLimits,
    pub tiles: Vec<CrossbarTile>,
}

impl TilingPlan {
    pub fn new(rows: usize, cols: usize, limits: TileLimits) -> Self {
        let mut tiles = Vec::new();
        for r in (0..rows).step_by(limits.max_rows.max(1)) {
            for c in (0..cols).step_by(limits.max_cols.max(1)) {
                tiles.push(CrossbarTile {
                    rows: r..(r + limits.max_rows).min(rows),
                    cols: c..(c + limits.max_cols).min(cols),
                });
            }
        }
        Self { rows, cols, limits, tiles }
    }

    pub fn row_blocks(&self) -> usize {
        self.rows.div_ceil(self.limits.max_rows)
    }

    pub fn col_blocks(&self) -> usize {
        self.cols.div_ceil(self.limits.max_cols)
    }
}

/// Geometry of a 2-D convolution on CHW inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the lowered weight matrix (bias excluded).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Layer shapes understood by `map_layer`.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerShape {
    Dense { inputs: usize, outputs: usize, bias: bool },
    Conv2d { geometry: ConvGeometry, out_channels: usize, bias: bool },
    Other(String),
}

/// Lowers a dense or convolution layer onto crossbar tiles. Convolutions use
/// the im2col layout: rows are `(channel, ky, kx)` patch positions.
pub fn map_layer(shape: &LayerShape, limits: TileLimits) -> Result<TilingPlan, CrossbarError> {
    let (rows, cols) = match shape {
        LayerShape::Dense { inputs, outputs, bias } => (inputs + usize::from(*bias), *outputs),
        LayerShape::Conv2d { geometry, out_channels, bias } => (geometry.patch_len() + usize::from(*bias), *out_channels),
        LayerShape::Other(kind) => return Err(CrossbarError::Unsupported(kind.clone())),
    };
    Ok(TilingPlan::new(rows, cols, limits))
}

/// Unfolds one CHW sample into `(out_h * out_w) x patch_len` rows.
pub fn im2col(input: &[f64], g: &ConvGeometry) -> Array2<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut cols = Array2::zeros((oh * ow, g.patch_len()));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut row = cols.row_mut(oy * ow + ox);
            let mut p = 0;
            for c in 0..g.in_channels {
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let y = (oy * g.stride + ky) as isize - g.padding as isize;
                        let x = (ox * g.stride + kx) as isize - g.padding as isize;
                        if y >= 0 && x >= 0 && (y as usize) < g.height && (x as usize) < g.width {
                            row[p] = input[(c * g.height + y as usize) * g.width + x as usize];
                        }
                        p += 1;
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatters patch gradients back onto a CHW sample.
pub fn col2im(cols: ArrayView2<f64>, g: &ConvGeometry, out: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = cols.row(oy * ow + ox);
            let mut p = 0;
            for c in 0..g.in_channels {
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let y = (oy * g.stride + ky) as isize - g.padding as isize;
                        let x = (ox * g.stride + kx) as isize - g.padding as isize;
                        if y >= 0 && x >= 0 && (y as usize) < g.height && (x as usize) < g.width {
                            out[(c * g.height + y as usize) * g.width + x as usize] += row[p];
                        }
                        p += 1;
                    }
                }
            }
        }
    }
}

/// Digital accumulation of per-tile partial sums: `partials` holds `blocks`
/// vectors of `len` per sample.
fn sum_blocks(partials: &[f64], n: usize, blocks: usize, len: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((n, len));
    for (s, chunk) in partials.chunks(blocks * len).enumerate() {
        let mut row = out.row_mut(s);
        for part in chunk.chunks(len) {
            row.iter_mut().zip(part).for_each(|(o, p)| *o += p);
        }
    }
    out
}

/// A layer weight matrix living on PCM crossbars.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossbarArray {
    pub weights: HybridWeightMatrix,
    pub plan: TilingPlan,
    pub converters: ConverterSet,
    /// The last weight row is a bias row driven by a constant full-scale
    /// input that bypasses the DAC.
    pub bias_row: bool,
    /// VMM operations issued so far; keys read-noise streams.
    pub op_counter: u64,
}

/// Effective weight sampler for one VMM operation.
struct WeightReader<'a> {
    plus: &'a [f64],
    minus: &'a [f64],
    sigma: f64,
    scale: f64,
}

impl WeightReader<'_> {
    #[inline]
    fn read(&self, idx: usize, rng: &mut StreamRng) -> f64 {
        let (gp, gm) = if self.sigma > 0.0 {
            let zp: f64 = StandardNormal.sample(rng);
            let zm: f64 = StandardNormal.sample(rng);
            ((self.plus[idx] + self.sigma * zp).max(0.0), (self.minus[idx] + self.sigma * zm).max(0.0))
        } else {
            (self.plus[idx].max(0.0), self.minus[idx].max(0.0))
        };
        (gp - gm) * self.scale
    }
}

impl CrossbarArray {
    pub fn new(weights: HybridWeightMatrix, limits: TileLimits, converters: &ConverterConfig, bias_row: bool) -> Self {
        let plan = TilingPlan::new(weights.rows(), weights.cols(), limits);
        Self { weights, plan, converters: ConverterSet::new(converters), bias_row, op_counter: 0 }
    }

    pub fn rows(&self) -> usize {
        self.weights.rows()
    }

    pub fn cols(&self) -> usize {
        self.weights.cols()
    }

    fn dac_rows(&self) -> usize {
        self.rows() - usize::from(self.bias_row)
    }

    fn op_rng(&self, op: u64) -> StreamRng {
        StreamRng::new(self.weights.seed, &[u64::from(self.weights.id), u64::MAX, op])
    }

    /// Decoded MSB weight matrix at time `t` without read noise.
    pub fn effective_weights(&self, t: f64, mode: ReadMode) -> Result<Array2<f64>, CrossbarError> {
        let (plus, minus) = self.weights.conductance_snapshot(t, mode)?;
        let scale = self.weights.scheme.delta_msb() / self.weights.scheme.g_unit;
        let w: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p.max(0.0) - m.max(0.0)) * scale).collect();
        Ok(Array2::from_shape_vec((self.rows(), self.cols()), w).expect("snapshot shape"))
    }

    fn sigma_read(&self, mode: ReadMode) -> f64 {
        match mode {
            ReadMode::Ideal => 0.0,
            ReadMode::Noisy => self.weights.model.sigma_read(),
        }
    }

    /// Forward VMM for a batch: `x` is `N x rows` (bias column included when
    /// `bias_row` is set). Each sample is one crossbar operation with its own
    /// read-noise draws.
    pub fn vmm_forward(&mut self, x: &Array2<f64>, t: f64, mode: ReadMode, training: bool) -> Result<Array2<f64>, CrossbarError> {
        let (rows, cols) = (self.rows(), self.cols());
        if x.ncols() != rows {
            return Err(CrossbarError::Shape { expected: rows, got: x.ncols() });
        }
        let n = x.nrows();
        let mut xq = x.to_owned();
        let bypass = self.converters.bypass;
        if !bypass {
            let dac_rows = self.dac_rows();
            let vecs = xq.rows_mut().into_iter().map(|r| &mut r.into_slice().expect("contiguous")[..dac_rows]);
            self.converters.fwd_dac.apply(vecs, training);
        }
        let (plus, minus) = self.weights.conductance_snapshot(t, mode)?;
        let reader = WeightReader {
            plus: &plus,
            minus: &minus,
            sigma: self.sigma_read(mode),
            scale: self.weights.scheme.delta_msb() / self.weights.scheme.g_unit,
        };
        let rb = self.plan.row_blocks();
        let max_rows = self.plan.limits.max_rows;
        let base = self.op_counter;
        let keys: Vec<StreamRng> = (0..n as u64).map(|s| self.op_rng(base + s)).collect();
        let fixed = (reader.sigma == 0.0).then(|| self.effective_from(&reader));

        // partials: per sample, one row of `cols` per row-block
        let mut partials = vec![0.0; n * rb * cols];
        partials
            .par_chunks_mut(rb * cols)
            .zip(keys.into_par_iter())
            .enumerate()
            .for_each(|(s, (out, mut rng))| {
                let xs = xq.row(s);
                match &fixed {
                    Some(w) => {
                        for b in 0..rb {
                            let r = b * max_rows..((b + 1) * max_rows).min(rows);
                            let part = xs.slice(s![r.clone()]).dot(&w.slice(s![r, ..]));
                            out[b * cols..(b + 1) * cols].copy_from_slice(part.as_slice().expect("contiguous"));
                        }
                    }
                    None => {
                        for i in 0..rows {
                            let xi = xs[i];
                            if xi == 0.0 {
                                continue;
                            }
                            let b = i / max_rows;
                            let acc = &mut out[b * cols..(b + 1) * cols];
                            for (j, a) in acc.iter_mut().enumerate() {
                                *a += xi * reader.read(i * cols + j, &mut rng);
                            }
                        }
                    }
                }
            });
        self.op_counter += n as u64;
        if !bypass {
            let max_cols = self.plan.limits.max_cols;
            let vecs = partials.chunks_mut(cols).flat_map(|row| row.chunks_mut(max_cols));
            self.converters.fwd_adc.apply(vecs, training);
        }
        Ok(sum_blocks(&partials, n, rb, cols))
    }

    fn effective_from(&self, reader: &WeightReader<'_>) -> Array2<f64> {
        let w: Vec<f64> = (0..self.weights.len())
            .map(|idx| (reader.plus[idx].max(0.0) - reader.minus[idx].max(0.0)) * reader.scale)
            .collect();
        Array2::from_shape_vec((self.rows(), self.cols()), w).expect("shape")
    }

    /// Transposed VMM: error gradients `dy` (`N x cols`) applied on the
    /// columns give `N x rows` input gradients. Uses the same device states
    /// as the forward pass with independent read noise.
    pub fn vmm_transpose(&mut self, dy: &Array2<f64>, t: f64, mode: ReadMode, training: bool) -> Result<Array2<f64>, CrossbarError> {
        let (rows, cols) = (self.rows(), self.cols());
        if dy.ncols() != cols {
            return Err(CrossbarError::Shape { expected: cols, got: dy.ncols() });
        }
        let n = dy.nrows();
        let quantize = !self.converters.bypass && self.converters.quantize_backward;
        let mut dq = dy.to_owned();
        if quantize {
            let vecs = dq.rows_mut().into_iter().map(|r| r.into_slice().expect("contiguous"));
            self.converters.bwd_dac.apply(vecs, training);
        }
        let (plus, minus) = self.weights.conductance_snapshot(t, mode)?;
        let reader = WeightReader {
            plus: &plus,
            minus: &minus,
            sigma: self.sigma_read(mode),
            scale: self.weights.scheme.delta_msb() / self.weights.scheme.g_unit,
        };
        let cb = self.plan.col_blocks();
        let max_cols = self.plan.limits.max_cols;
        let base = self.op_counter;
        let keys: Vec<StreamRng> = (0..n as u64).map(|s| self.op_rng(base + s)).collect();
        let fixed = (reader.sigma == 0.0).then(|| self.effective_from(&reader));

        // partials: per sample, one row of `rows` per column-block
        let mut partials = vec![0.0; n * cb * rows];
        partials
            .par_chunks_mut(cb * rows)
            .zip(keys.into_par_iter())
            .enumerate()
            .for_each(|(s, (out, mut rng))| {
                let ds = dq.row(s);
                match &fixed {
                    Some(w) => {
                        for b in 0..cb {
                            let c = b * max_cols..((b + 1) * max_cols).min(cols);
                            let part = w.slice(s![.., c.clone()]).dot(&ds.slice(s![c]));
                            out[b * rows..(b + 1) * rows].copy_from_slice(part.as_slice().expect("contiguous"));
                        }
                    }
                    None => {
                        for i in 0..rows {
                            for (j, &dj) in ds.iter().enumerate() {
                                if dj == 0.0 {
                                    continue;
                                }
                                out[(j / max_cols) * rows + i] += dj * reader.read(i * cols + j, &mut rng);
                            }
                        }
                    }
                }
            });
        self.op_counter += n as u64;
        if quantize {
            let max_rows = self.plan.limits.max_rows;
            let vecs = partials.chunks_mut(rows).flat_map(|row| row.chunks_mut(max_rows));
            self.converters.bwd_adc.apply(vecs, training);
        }
        Ok(sum_blocks(&partials, n, cb, rows))
    }
}
