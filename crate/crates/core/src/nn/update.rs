use std::ops::AddAssign;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layers::{Node, WeightStore};
use super::network::{Gradients, LayerGrad, Network};
use super::NnError;
use crate::hybridweight::{HybridWeightMatrix, ReadMode};
use crate::rng::StreamRng;

const UPDATE_TAG: u64 = 0x0bda7e;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    #[default]
    NearestEven,
    Stochastic,
}

/// Maps scaled weight updates to signed LSB ticks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradQuantizer {
    pub rounding: Rounding,
    pub clip_ticks: i32,
}

impl Default for GradQuantizer {
    fn default() -> Self {
        Self { rounding: Rounding::NearestEven, clip_ticks: 127 }
    }
}

impl GradQuantizer {
    /// Ticks for an update of `x` ticks; `u` in `[0, 1)` drives stochastic
    /// rounding. Returns the clipped tick count and whether clipping occurred.
    pub fn ticks(&self, x: f64, u: f64) -> (i32, bool) {
        if x.is_nan() {
            return (0, true);
        }
        let r = match self.rounding {
            Rounding::NearestEven => x.round_ties_even(),
            Rounding::Stochastic => {
                let f = x.floor();
                f + f64::from(u8::from(u < x - f))
            }
        };
        let clip = f64::from(self.clip_ticks);
        if r.abs() > clip {
            ((clip.copysign(r)) as i32, true)
        } else {
            (r as i32, false)
        }
    }
}

/// Device-level counters of one or more updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateStats {
    /// Nonzero tick updates issued.
    pub updates: u64,
    pub flips: u64,
    /// Entries whose accumulate produced a nonzero carry.
    pub carries: u64,
    /// Updates clipped at `clip_ticks`.
    pub tick_clips: u64,
    /// Carries or residuals clamped at the level or accumulator rails.
    pub carry_clamps: u64,
    pub msb_pulses: u64,
    pub forced_refreshes: u64,
    pub saturations: u64,
    /// Scheduled refresh sweeps: pairs refreshed and failures to converge.
    pub refreshes: u64,
    pub refresh_failures: u64,
}

impl UpdateStats {
    pub fn clamps(&self) -> u64 {
        self.tick_clips + self.carry_clamps
    }
}

impl AddAssign for UpdateStats {
    fn add_assign(&mut self, o: Self) {
        self.updates += o.updates;
        self.flips += o.flips;
        self.carries += o.carries;
        self.tick_clips += o.tick_clips;
        self.carry_clamps += o.carry_clamps;
        self.msb_pulses += o.msb_pulses;
        self.forced_refreshes += o.forced_refreshes;
        self.saturations += o.saturations;
        self.refreshes += o.refreshes;
        self.refresh_failures += o.refresh_failures;
    }
}

/// Quantizes `-lr * grad` into ticks of `delta_lsb` and accumulates them
/// entry by entry. `step` keys the stochastic-rounding and read-noise draws.
pub fn quantize_and_apply(
    grad: &Array2<f64>,
    lr: f64,
    quantizer: &GradQuantizer,
    weights: &mut HybridWeightMatrix,
    now: f64,
    step: u64,
    read_mode: ReadMode,
) -> Result<UpdateStats, NnError> {
    if grad.dim() != (weights.rows(), weights.cols()) {
        return Err(NnError::Shape(format!(
            "gradient {:?} for a {}x{} weight matrix",
            grad.dim(),
            weights.rows(),
            weights.cols()
        )));
    }
    let delta = weights.scheme.delta_lsb();
    let mut stats = UpdateStats::default();
    for ((i, j), &g) in grad.indexed_iter() {
        let idx = (i * weights.cols() + j) as u64;
        let mut rng = StreamRng::new(weights.seed, &[UPDATE_TAG, u64::from(weights.id), step, idx]);
        let u = match quantizer.rounding {
            Rounding::Stochastic => rng.next_f64(),
            Rounding::NearestEven => 0.0,
        };
        let (q, clipped) = quantizer.ticks(-lr * g / delta, u);
        stats.tick_clips += u64::from(clipped);
        if q == 0 {
            continue;
        }
        stats.updates += 1;
        let out = weights.accumulate(i, j, q, now, read_mode, &mut rng)?;
        stats.flips += u64::from(out.flips);
        stats.carries += u64::from(out.carry != 0);
        stats.carry_clamps += u64::from(out.clamped);
        stats.msb_pulses += u64::from(out.pulses);
        stats.forced_refreshes += u64::from(out.forced_refresh);
        stats.saturations += u64::from(out.saturated);
    }
    Ok(stats)
}

/// Applies one batch of gradients: crossbar layers through
/// [`quantize_and_apply`], digital weights and batch-norm parameters by SGD.
pub fn apply_gradients(
    net: &mut Network,
    grads: &Gradients,
    lr: f64,
    quantizer: &GradQuantizer,
    now: f64,
    step: u64,
) -> Result<UpdateStats, NnError> {
    let mode = net.read_mode;
    let mut stats = UpdateStats::default();
    for (node, g) in net.nodes.iter_mut().zip(&grads.layers) {
        match (node, g) {
            (Node::Dense(l), LayerGrad::Weights(dw)) => stats += apply_store(&mut l.store, dw, lr, quantizer, now, step, mode)?,
            (Node::Conv(l), LayerGrad::Weights(dw)) => stats += apply_store(&mut l.store, dw, lr, quantizer, now, step, mode)?,
            (Node::BatchNorm(bn), LayerGrad::Norm { gamma, beta }) => {
                bn.gamma.iter_mut().zip(gamma).for_each(|(p, g)| *p -= lr * g);
                bn.beta.iter_mut().zip(beta).for_each(|(p, g)| *p -= lr * g);
            }
            _ => {}
        }
    }
    Ok(stats)
}

fn apply_store(
    store: &mut WeightStore,
    dw: &Array2<f64>,
    lr: f64,
    quantizer: &GradQuantizer,
    now: f64,
    step: u64,
    mode: ReadMode,
) -> Result<UpdateStats, NnError> {
    match store {
        WeightStore::Digital(w) => {
            w.scaled_add(-lr, dw);
            Ok(UpdateStats::default())
        }
        WeightStore::Analog(xb) => quantize_and_apply(dw, lr, quantizer, &mut xb.weights, now, step, mode),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{DeviceModel, DeviceModelParams, NonIdealities};
    use crate::hybridweight::{ProgramPolicy, QuantScheme};
    use proptest::prelude::*;

    fn matrix() -> HybridWeightMatrix {
        let params = DeviceModelParams { sigma_write: 0.0, sigma_read: 0.0, ..Default::default() };
        let model = DeviceModel::new(params, NonIdealities::none()).unwrap();
        HybridWeightMatrix::new(0, 1, 2, 2, QuantScheme::new(0.7, 7, 7, 1.5), ProgramPolicy::default(), model, 0.0).unwrap()
    }

    #[test]
    fn rounding_and_clip_examples() {
        let q = GradQuantizer::default();
        assert_eq!(q.ticks(2.4, 0.0), (2, false));
        assert_eq!(q.ticks(2.5, 0.0), (2, false));
        assert_eq!(q.ticks(3.5, 0.0), (4, false));
        assert_eq!(q.ticks(-2.6, 0.0), (-3, false));
        assert_eq!(q.ticks(400.0, 0.0), (127, true));
        assert_eq!(q.ticks(-400.0, 0.0), (-127, true));
        let s = GradQuantizer { rounding: Rounding::Stochastic, clip_ticks: 127 };
        assert_eq!(s.ticks(2.4, 0.39), (3, false));
        assert_eq!(s.ticks(2.4, 0.41), (2, false));
        assert_eq!(s.ticks(-2.4, 0.59), (-2, false));
    }

    #[test]
    fn scaled_update_matches_tick_oracle() {
        let mut w = matrix();
        let d = w.scheme.delta_lsb();
        let lr = 0.5;
        // -lr * g / d = 2.4 and 400
        let grad = ndarray::array![[-2.4 * d / lr, 0.0], [-400.0 * d / lr, 0.0]];
        let stats = quantize_and_apply(&grad, lr, &GradQuantizer::default(), &mut w, 1.0, 0, ReadMode::Ideal).unwrap();
        let mut rng = StreamRng::new(0, &[]);
        assert_eq!(w.lsb_read(0, 0, 1.0, ReadMode::Ideal, &mut rng).unwrap(), 2);
        // 127 ticks = one carry + 63 residual
        assert_eq!(w.level(1, 0), 1);
        assert_eq!(w.lsb_read(1, 0, 1.0, ReadMode::Ideal, &mut rng).unwrap(), 63);
        assert_eq!(stats.tick_clips, 1);
        assert_eq!(stats.clamps(), 1);
        assert_eq!(stats.carries, 1);
        assert_eq!(stats.updates, 2);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut w = matrix();
        let before = w.clone();
        let stats = quantize_and_apply(&Array2::zeros((2, 2)), 0.1, &GradQuantizer::default(), &mut w, 1.0, 3, ReadMode::Noisy).unwrap();
        assert_eq!(stats, UpdateStats::default());
        assert_eq!(w, before);
    }

    proptest! {
        #[test]
        fn ticks_stay_within_clip(x in -1e4f64..1e4, u in 0.0f64..1.0, clip in 1i32..200) {
            for rounding in [Rounding::NearestEven, Rounding::Stochastic] {
                let (q, _) = GradQuantizer { rounding, clip_ticks: clip }.ticks(x, u);
                prop_assert!(q.abs() <= clip);
                if x.abs() < f64::from(clip) - 1.0 {
                    prop_assert!((f64::from(q) - x).abs() <= 1.0);
                }
            }
        }
    }
}
