//! Independent reference implementations used by the integration and
//! acceptance tests: a central-difference gradient checker and a digital
//! fixed-point MLP trainer. Shared with the harness acceptance suite.
#![allow(dead_code)]

use hic_core::crossbar::ConverterConfig;
use hic_core::device::{DeviceModel, DeviceModelParams, NonIdealities};
use hic_core::hybridweight::ReadMode;
use hic_core::nn::{
    build_network, epoch_order, AnalogConfig, Backend, Dataset, LayerSpec, Network, NetworkSpec, Node, Phase,
};
use hic_core::rng::StreamRng;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

// ---------------------------------------------------------------------------
// gradient check

pub struct GradCheck {
    pub checked: usize,
    /// Parameters whose perturbation moved a ReLU input across zero.
    pub skipped: usize,
    pub max_rel_err: f64,
}

/// Random small network mixing conv, batchnorm, residual and dense layers,
/// with a random batch.
pub fn random_gradcheck_case(seed: u64) -> (Network, ArrayD<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_in = rng.random_range(1..=2);
    let hw = rng.random_range(4..=6);
    let ch = rng.random_range(2..=3);
    let classes = rng.random_range(2..=4);
    let mut layers = vec![
        LayerSpec::Conv2d { channels: ch, kernel: 3, stride: 1, padding: 1, bias: rng.random_bool(0.5) },
        LayerSpec::Batchnorm,
        LayerSpec::Relu,
        LayerSpec::Conv2d { channels: ch, kernel: 3, stride: 1, padding: 1, bias: false },
        LayerSpec::Batchnorm,
        LayerSpec::ResidualAdd { from: 3 },
        LayerSpec::Relu,
    ];
    if hw % 2 == 0 && rng.random_bool(0.5) {
        layers.push(LayerSpec::Avgpool { size: 2 });
    } else {
        layers.push(LayerSpec::Avgpool { size: 0 });
    }
    let hidden = rng.random_range(3..=6);
    layers.extend([
        LayerSpec::Dense { units: hidden, bias: true },
        LayerSpec::Batchnorm,
        LayerSpec::Relu,
        LayerSpec::Dense { units: classes, bias: true },
        LayerSpec::SoftmaxXent,
    ]);
    let spec = NetworkSpec { input_shape: vec![c_in, hw, hw], classes, layers };
    let net = build_network(&spec, 1.0, &Backend::Digital, seed).expect("valid spec");
    let n = rng.random_range(3..=5);
    let x = ArrayD::from_shape_fn(IxDyn(&[n, c_in, hw, hw]), |_| StandardNormal.sample(&mut rng));
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (net, x, labels)
}

fn loss_and_masks(net: &mut Network, x: &ArrayD<f64>, labels: &[usize]) -> (f64, Vec<bool>) {
    let (logits, cache) = net.forward(x, Phase::Train, 0.0).expect("forward");
    let (loss, _, _) = hic_core::nn::softmax_xent(&logits, labels);
    let mut masks = Vec::new();
    for (k, node) in net.nodes.iter().enumerate() {
        if matches!(node, Node::Relu) {
            masks.extend(cache.values[k].iter().map(|&v| v > 0.0));
        }
    }
    (loss, masks)
}

/// Compares analytic gradients with five-point central differences of step
/// `h`, reporting `|a - n| / max(|a|, |n|, floor)`. Parameters whose
/// perturbations flip any ReLU are skipped.
pub fn gradient_check(net: &mut Network, x: &ArrayD<f64>, labels: &[usize], h: f64, floor: f64) -> GradCheck {
    let (_, cache) = net.forward(x, Phase::Train, 0.0).expect("forward");
    let logits = cache.values.last().unwrap().clone().into_dimensionality::<ndarray::Ix2>().unwrap();
    let (_, dlogits, _) = hic_core::nn::softmax_xent(&logits, labels);
    let analytic = net.backward(&cache, &dlogits).expect("backward").flatten();
    let (_, base_masks) = loss_and_masks(net, x, labels);

    let sizes: Vec<usize> = net.digital_params_mut().iter().map(|p| p.len()).collect();
    let mut out = GradCheck { checked: 0, skipped: 0, max_rel_err: 0.0 };
    let mut flat = 0;
    for (s, &len) in sizes.iter().enumerate() {
        for e in 0..len {
            let orig = net.digital_params_mut()[s][e];
            let mut losses = [0.0; 4];
            let mut kink = false;
            for (slot, offset) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                net.digital_params_mut()[s][e] = orig + offset * h;
                let (l, m) = loss_and_masks(net, x, labels);
                losses[slot] = l;
                kink |= m != base_masks;
            }
            net.digital_params_mut()[s][e] = orig;
            let a = analytic[flat];
            flat += 1;
            if kink {
                out.skipped += 1;
                continue;
            }
            // five-point central stencil, truncation error O(h^4)
            let num = (-losses[0] + 8.0 * losses[1] - 8.0 * losses[2] + losses[3]) / (12.0 * h);
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(floor);
            out.max_rel_err = out.max_rel_err.max(rel);
            out.checked += 1;
        }
    }
    assert_eq!(flat, analytic.len(), "parameter/gradient layout mismatch");
    out
}

// ---------------------------------------------------------------------------
// datasets

/// Two isotropic gaussian blobs in 2-D.
pub fn gaussian_blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let x = Array2::from_shape_fn((n, 2), |(i, j)| {
        let z: f64 = StandardNormal.sample(&mut rng);
        let c = if labels[i] == 0 { [-1.0, 0.5] } else { [1.0, -0.5] };
        c[j] + 0.7 * z
    });
    Dataset::new(x.into_dyn(), labels, 2).unwrap()
}

// ---------------------------------------------------------------------------
// fixed-point shadow trainer

pub fn mlp_spec(widths: &[usize]) -> NetworkSpec {
    let mut layers = Vec::new();
    for (k, &w) in widths[1..].iter().enumerate() {
        layers.push(LayerSpec::Dense { units: w, bias: true });
        if k + 2 < widths.len() {
            layers.push(LayerSpec::Relu);
        }
    }
    layers.push(LayerSpec::SoftmaxXent);
    NetworkSpec { input_shape: vec![widths[0]], classes: *widths.last().unwrap(), layers }
}

/// Ideal devices, no non-idealities, bypassed converters, ideal reads.
pub fn ideal_backend() -> Backend {
    let params = DeviceModelParams { sigma_write: 0.0, sigma_read: 0.0, ..Default::default() };
    Backend::Analog(AnalogConfig {
        model: DeviceModel::new(params, NonIdealities::none()).unwrap(),
        converters: ConverterConfig { bypass: true, ..Default::default() },
        read_mode: ReadMode::Ideal,
        ..Default::default()
    })
}

/// One dense layer of the shadow network: integer MSB level and LSB
/// accumulator per weight (bias row last).
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowLayer {
    pub rows: usize,
    pub cols: usize,
    pub level: Vec<i64>,
    pub acc: Vec<i64>,
    pub d_msb: f64,
    pub d_lsb: f64,
}

#[derive(Clone, Debug)]
pub struct ShadowTrainer {
    pub layers: Vec<ShadowLayer>,
    pub max_level: i64,
    pub half: i64,
    pub clip: i64,
}

impl ShadowTrainer {
    /// Copies the initial integer state out of a freshly built network.
    pub fn from_network(net: &Network) -> Self {
        let mut rng = StreamRng::new(0, &[]);
        let layers: Vec<ShadowLayer> = net
            .crossbars()
            .map(|xb| {
                let w = &xb.weights;
                let acc = (0..w.len())
                    .map(|idx| i64::from(w.lsb_read(idx / w.cols(), idx % w.cols(), 0.0, ReadMode::Ideal, &mut rng).unwrap()))
                    .collect();
                ShadowLayer {
                    rows: w.rows(),
                    cols: w.cols(),
                    level: w.levels().iter().map(|&l| i64::from(l)).collect(),
                    acc,
                    d_msb: w.scheme.delta_msb(),
                    d_lsb: w.scheme.delta_lsb(),
                }
            })
            .collect();
        let s = &net.crossbars().next().unwrap().weights.scheme;
        Self { layers, max_level: i64::from(s.msb_levels), half: 1 << (s.lsb_bits - 1), clip: 127 }
    }

    /// Integer weight ticks (`level * half + acc`) of every layer.
    pub fn ticks(&self) -> Vec<Vec<i64>> {
        self.layers.iter().map(|l| l.level.iter().zip(&l.acc).map(|(lv, a)| lv * self.half + a).collect()).collect()
    }

    fn forward(&self, x: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
        let mut acts = vec![x.to_vec()];
        for (k, l) in self.layers.iter().enumerate() {
            let last = k + 1 == self.layers.len();
            let out: Vec<Vec<f64>> = acts[k]
                .iter()
                .map(|xs| {
                    (0..l.cols)
                        .map(|j| {
                            let mut s = 0.0;
                            for i in 0..l.rows {
                                let xi = if i < xs.len() { xs[i] } else { 1.0 };
                                s += xi * l.level[i * l.cols + j] as f64 * l.d_msb;
                            }
                            if last {
                                s
                            } else {
                                s.max(0.0)
                            }
                        })
                        .collect()
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    /// One SGD step with nearest-even rounding.
    pub fn step(&mut self, x: &[Vec<f64>], labels: &[usize], lr: f64) {
        let acts = self.forward(x);
        let n = x.len() as f64;
        let logits = acts.last().unwrap();
        let mut dy: Vec<Vec<f64>> = logits
            .iter()
            .zip(labels)
            .map(|(z, &y)| {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().enumerate().map(|(j, v)| (v / s - if j == y { 1.0 } else { 0.0 }) / n).collect()
            })
            .collect();
        let mut grads = vec![Vec::new(); self.layers.len()];
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let mut g = vec![0.0; l.rows * l.cols];
            for (xs, d) in acts[k].iter().zip(&dy) {
                for i in 0..l.rows {
                    let xi = if i < xs.len() { xs[i] } else { 1.0 };
                    for j in 0..l.cols {
                        g[i * l.cols + j] += xi * d[j];
                    }
                }
            }
            grads[k] = g;
            if k > 0 {
                dy = dy
                    .iter()
                    .zip(&acts[k])
                    .map(|(d, h)| {
                        (0..l.rows - 1)
                            .map(|i| {
                                if h[i] <= 0.0 {
                                    return 0.0;
                                }
                                (0..l.cols).map(|j| d[j] * l.level[i * l.cols + j] as f64 * l.d_msb).sum()
                            })
                            .collect()
                    })
                    .collect();
            }
        }
        let (max, half, clip) = (self.max_level, self.half, self.clip);
        for (l, g) in self.layers.iter_mut().zip(&grads) {
            for (e, &gv) in g.iter().enumerate() {
                let q = ((-lr * gv / l.d_lsb).round_ties_even() as i64).clamp(-clip, clip);
                if q == 0 {
                    continue;
                }
                let total = l.acc[e] + q;
                let new_level = (l.level[e] + total / half).clamp(-max, max);
                let carry = new_level - l.level[e];
                l.level[e] = new_level;
                l.acc[e] = (total - carry * half).clamp(-half, half - 1);
            }
        }
    }
}

/// Integer tick state of a network's crossbars, read ideally.
pub fn network_ticks(net: &Network) -> Vec<Vec<i64>> {
    let mut rng = StreamRng::new(0, &[]);
    net.crossbars()
        .map(|xb| {
            let w = &xb.weights;
            let half = i64::from(w.scheme.acc_half());
            (0..w.len())
                .map(|idx| {
                    let (i, j) = (idx / w.cols(), idx % w.cols());
                    i64::from(w.level(i, j)) * half + i64::from(w.lsb_read(i, j, 0.0, ReadMode::Ideal, &mut rng).unwrap())
                })
                .collect()
        })
        .collect()
}

/// Rows of a 2-D dataset as vectors, in `order`.
pub fn rows(data: &Dataset, order: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let x = order.iter().map(|&i| data.features.index_axis(ndarray::Axis(0), i).iter().copied().collect()).collect();
    (x, order.iter().map(|&i| data.labels[i]).collect())
}

/// Batch order of the first `steps` steps across epochs.
pub fn batch_schedule(seed: u64, n: usize, batch: usize, steps: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut epoch = 0;
    while out.len() < steps {
        for chunk in epoch_order(seed, epoch, n).chunks(batch) {
            if out.len() == steps {
                break;
            }
            out.push(chunk.to_vec());
        }
        epoch += 1;
    }
    out
}
