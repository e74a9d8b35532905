use ndarray::{Array2, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{avgpool, avgpool_backward, relu, relu_backward, BatchNormState, ConvLayer, Ctx, DenseLayer, Node, NormCache, NormUse, WeightStore};
use super::spec::{apply_width_multiplier, infer_shapes, parameter_count, LayerSpec};
use super::NnError;
use crate::crossbar::{ConvGeometry, ConverterConfig, CrossbarArray, TileLimits};
use crate::device::DeviceModel;
use crate::hybridweight::{HybridWeightMatrix, ProgramPolicy, QuantScheme, ReadMode};
use crate::rng::stream_key;

const INIT_TAG: u64 = 0x1417;

/// Weight quantization settings shared by every crossbar layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub msb_levels: i32,
    pub lsb_bits: u32,
    /// Conductance difference of one MSB level (uS).
    pub g_unit: f64,
    /// Per-layer `w_max` as a multiple of the He standard deviation
    /// `sqrt(2 / fan_in)`.
    pub w_max_scale: f64,
    /// Absolute `w_max` for every layer; overrides `w_max_scale`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_max: Option<f64>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { msb_levels: 7, lsb_bits: 7, g_unit: 1.5, w_max_scale: 4.0, w_max: None }
    }
}

impl QuantConfig {
    pub fn scheme(&self, fan_in: usize) -> QuantScheme {
        let w_max = self.w_max.unwrap_or(self.w_max_scale * (2.0 / fan_in as f64).sqrt());
        QuantScheme::new(w_max, self.msb_levels, self.lsb_bits, self.g_unit)
    }
}

/// Everything needed to place layer weights on PCM crossbars.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalogConfig {
    pub model: DeviceModel,
    pub quant: QuantConfig,
    pub policy: ProgramPolicy,
    pub converters: ConverterConfig,
    pub limits: TileLimits,
    /// Read path used by VMMs and accumulator reads.
    pub read_mode: ReadMode,
    pub event_log: bool,
}

impl Default for AnalogConfig {
    fn default() -> Self {
        Self {
            model: DeviceModel::default(),
            quant: QuantConfig::default(),
            policy: ProgramPolicy::default(),
            converters: ConverterConfig::default(),
            limits: TileLimits::default(),
            read_mode: ReadMode::Noisy,
            event_log: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Backend {
    /// Full-precision digital weights trained by plain SGD.
    Digital,
    Analog(AnalogConfig),
}

/// Base architecture of a classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// How a forward pass treats batch statistics and converters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics, running-stat updates, converter warm-up; keeps the
    /// cache needed by `backward`.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics written into the running statistics (AdaBS).
    Calibrate,
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Matrix(Array2<f64>),
    Norm(NormCache),
}

/// Activations of every node of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub phase: Phase,
    pub t: f64,
    /// `values[0]` is the input, `values[k + 1]` the output of node `k`.
    pub values: Vec<ArrayD<f64>>,
    aux: Vec<Aux>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrad {
    None,
    Weights(Array2<f64>),
    Norm { gamma: Vec<f64>, beta: Vec<f64> },
}

/// Per-node parameter gradients, batch-summed through the loss mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    /// Flat gradient in the order of [`Network::digital_params_mut`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::None => {}
                LayerGrad::Weights(w) => out.extend(w.iter()),
                LayerGrad::Norm { gamma, beta } => {
                    out.extend_from_slice(gamma);
                    out.extend_from_slice(beta);
                }
            }
        }
        out
    }
}

/// Mean softmax cross-entropy. Returns (loss, d loss / d logits, correct).
pub fn softmax_xent(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>, usize) {
    let n = logits.nrows();
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    let mut correct = 0;
    for (s, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += sum.ln() + max - row[label];
        let argmax = row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
        correct += usize::from(argmax == label);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / sum;
            grad[[s, j]] = (p - f64::from(u8::from(j == label))) / n as f64;
        }
    }
    (loss / n as f64, grad, correct)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Width-scaled layer list this network was built from.
    pub layers: Vec<LayerSpec>,
    pub nodes: Vec<Node>,
    /// Output feature shape of every node; `shapes[0]` is the input.
    pub shapes: Vec<Vec<usize>>,
    pub read_mode: ReadMode,
    pub seed: u64,
}

/// Builds and initializes a network: He-normal weights, rounded to the MSB
/// grid and programmed at `t = 0` for analog layers; zero bias.
pub fn build_network(spec: &NetworkSpec, width_multiplier: f64, backend: &Backend, seed: u64) -> Result<Network, NnError> {
    let layers = apply_width_multiplier(&spec.layers, width_multiplier)?;
    let shapes = infer_shapes(&spec.input_shape, &layers)?;
    if shapes.last().expect("non-empty") != &vec![spec.classes] {
        return Err(NnError::Spec(format!(
            "network output {:?} does not match {} classes",
            shapes.last().expect("non-empty"),
            spec.classes
        )));
    }
    let mut nodes = Vec::with_capacity(layers.len());
    for (k, layer) in layers.iter().enumerate() {
        let inp = &shapes[k];
        let mut init = ChaCha8Rng::seed_from_u64(stream_key(seed, &[INIT_TAG, k as u64]));
        let node = match *layer {
            LayerSpec::Dense { units, bias } => {
                let fan_in = inp.iter().product();
                let store = init_store(k, fan_in, units, bias, backend, seed, &mut init)?;
                Node::Dense(DenseLayer { in_features: fan_in, units, bias, store })
            }
            LayerSpec::Conv2d { channels, kernel, stride, padding, bias } => {
                let geometry = ConvGeometry { in_channels: inp[0], height: inp[1], width: inp[2], kernel, stride, padding };
                let store = init_store(k, geometry.patch_len(), channels, bias, backend, seed, &mut init)?;
                Node::Conv(ConvLayer { geometry, out_channels: channels, bias, store })
            }
            LayerSpec::Batchnorm => Node::BatchNorm(BatchNormState::new(inp[0])),
            LayerSpec::Relu => Node::Relu,
            LayerSpec::ResidualAdd { from } => Node::Add { from },
            LayerSpec::Avgpool { size } => Node::AvgPool { size },
            LayerSpec::SoftmaxXent => Node::Loss,
        };
        nodes.push(node);
    }
    let read_mode = match backend {
        Backend::Digital => ReadMode::Ideal,
        Backend::Analog(cfg) => cfg.read_mode,
    };
    Ok(Network { input_shape: spec.input_shape.clone(), classes: spec.classes, layers, nodes, shapes, read_mode, seed })
}

fn init_store(
    k: usize,
    fan_in: usize,
    outputs: usize,
    bias: bool,
    backend: &Backend,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<WeightStore, NnError> {
    let rows = fan_in + usize::from(bias);
    let std = (2.0 / fan_in as f64).sqrt();
    let w = Array2::from_shape_fn((rows, outputs), |(i, _)| {
        let z: f64 = StandardNormal.sample(rng);
        if i < fan_in {
            z * std
        } else {
            0.0
        }
    });
    match backend {
        Backend::Digital => Ok(WeightStore::Digital(w)),
        Backend::Analog(cfg) => {
            let scheme = cfg.quant.scheme(fan_in);
            let (delta, max) = (scheme.delta_msb(), scheme.msb_levels);
            let levels: Vec<i32> = w.iter().map(|v| ((v / delta).round() as i32).clamp(-max, max)).collect();
            let mut hw = HybridWeightMatrix::new(k as u32, seed, rows, outputs, scheme, cfg.policy.clone(), cfg.model.clone(), 0.0)?;
            if cfg.event_log {
                hw.enable_event_log();
            }
            hw.program_all(&levels, 0.0)?;
            Ok(WeightStore::Analog(Box::new(CrossbarArray::new(hw, cfg.limits, &cfg.converters, bias))))
        }
    }
}

impl Network {
    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.input_shape, &self.layers).expect("validated at build")
    }

    pub fn is_analog(&self) -> bool {
        self.stores().any(|(_, s)| matches!(s, WeightStore::Analog(_)))
    }

    /// (node index, store) for every dense/conv node.
    pub fn stores(&self) -> impl Iterator<Item = (usize, &WeightStore)> {
        self.nodes.iter().enumerate().filter_map(|(k, n)| match n {
            Node::Dense(l) => Some((k, &l.store)),
            Node::Conv(l) => Some((k, &l.store)),
            _ => None,
        })
    }

    pub fn stores_mut(&mut self) -> impl Iterator<Item = (usize, &mut WeightStore)> {
        self.nodes.iter_mut().enumerate().filter_map(|(k, n)| match n {
            Node::Dense(l) => Some((k, &mut l.store)),
            Node::Conv(l) => Some((k, &mut l.store)),
            _ => None,
        })
    }

    pub fn crossbars(&self) -> impl Iterator<Item = &CrossbarArray> {
        self.stores().filter_map(|(_, s)| s.crossbar())
    }

    pub fn crossbars_mut(&mut self) -> impl Iterator<Item = &mut CrossbarArray> {
        self.stores_mut().filter_map(|(_, s)| s.crossbar_mut())
    }

    pub fn batchnorms(&self) -> impl Iterator<Item = &BatchNormState> {
        self.nodes.iter().filter_map(|n| match n {
            Node::BatchNorm(b) => Some(b),
            _ => None,
        })
    }

    /// Mutable digital parameters: digital weight matrices (row-major) and
    /// batch-norm gamma/beta, in node order.
    pub fn digital_params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for node in &mut self.nodes {
            match node {
                Node::Dense(DenseLayer { store: WeightStore::Digital(w), .. })
                | Node::Conv(ConvLayer { store: WeightStore::Digital(w), .. }) => {
                    out.push(w.as_slice_mut().expect("standard layout"));
                }
                Node::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                _ => {}
            }
        }
        out
    }

    /// Refresh sweep over every crossbar. Returns (refreshed, failed).
    pub fn refresh_all(&mut self, now: f64) -> Result<(u64, u64), NnError> {
        let mut total = (0, 0);
        for xb in self.crossbars_mut() {
            let (r, f) = xb.weights.refresh_all(now)?;
            total.0 += r;
            total.1 += f;
        }
        Ok(total)
    }

    /// Runs the graph on `x` (`N x input_shape`) at simulation time `t` and
    /// returns `N x classes` logits.
    pub fn forward(&mut self, x: &ArrayD<f64>, phase: Phase, t: f64) -> Result<(Array2<f64>, ForwardCache), NnError> {
        if x.ndim() < 2 || x.shape()[1..] != self.input_shape[..] {
            return Err(NnError::Shape(format!("network expects [N, {:?}], got {:?}", self.input_shape, x.shape())));
        }
        let ctx = Ctx { t, mode: self.read_mode, training: phase == Phase::Train };
        let usage = match phase {
            Phase::Train => NormUse::Train,
            Phase::Eval => NormUse::Eval,
            Phase::Calibrate => NormUse::Calibrate,
        };
        let mut values = Vec::with_capacity(self.nodes.len() + 1);
        let mut aux = Vec::with_capacity(self.nodes.len());
        values.push(x.as_standard_layout().into_owned());
        for k in 0..self.nodes.len() {
            let x = &values[k];
            let (y, a) = match &mut self.nodes[k] {
                Node::Dense(l) => {
                    let (y, xa) = l.forward(x, ctx)?;
                    (y, Aux::Matrix(xa))
                }
                Node::Conv(l) => {
                    let (y, cols) = l.forward(x, ctx)?;
                    (y, Aux::Matrix(cols))
                }
                Node::BatchNorm(bn) => {
                    let (y, c) = bn.forward(x, usage)?;
                    (y, c.map_or(Aux::None, Aux::Norm))
                }
                Node::Relu => (relu(x), Aux::None),
                Node::Add { from } => (x + &values[*from], Aux::None),
                Node::AvgPool { size } => (avgpool(x, *size), Aux::None),
                Node::Loss => (x.clone(), Aux::None),
            };
            values.push(y);
            aux.push(a);
        }
        let n = x.shape()[0];
        let logits = values
            .last()
            .expect("non-empty")
            .clone()
            .into_shape_with_order((n, self.classes))
            .map_err(|e| NnError::Shape(e.to_string()))?;
        Ok((logits, ForwardCache { phase, t, values, aux }))
    }

    /// Backpropagates `dlogits` through a training-mode forward. Crossbar
    /// input gradients use the transposed VMM; weight gradients are the
    /// digital outer product of stored inputs and output gradients.
    pub fn backward(&mut self, cache: &ForwardCache, dlogits: &Array2<f64>) -> Result<Gradients, NnError> {
        if cache.phase != Phase::Train || cache.values.len() != self.nodes.len() + 1 {
            return Err(NnError::MissingCache);
        }
        let n = cache.values[0].shape()[0];
        if dlogits.dim() != (n, self.classes) {
            return Err(NnError::Shape(format!("dlogits {:?} for batch {n} x {}", dlogits.dim(), self.classes)));
        }
        let ctx = Ctx { t: cache.t, mode: self.read_mode, training: true };
        let count = self.nodes.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; count + 1];
        let out_shape = cache.values[count].raw_dim();
        grads[count] = Some(dlogits.clone().into_shape_with_order(out_shape).map_err(|e| NnError::Shape(e.to_string()))?);
        let mut layer_grads = vec![LayerGrad::None; count];

        fn add_to(grads: &mut [Option<ArrayD<f64>>], k: usize, g: ArrayD<f64>) {
            match &mut grads[k] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        }

        for k in (0..count).rev() {
            let Some(dy) = grads[k + 1].take() else { continue };
            let need_dx = k > 0;
            match (&mut self.nodes[k], &cache.aux[k]) {
                (Node::Dense(l), Aux::Matrix(xa)) => {
                    let (dx, dw) = if need_dx {
                        l.backward(xa, &dy, &self.shapes[k], ctx)?
                    } else {
                        let dy2 = dy.view().into_shape_with_order((n, l.units)).map_err(|e| NnError::Shape(e.to_string()))?;
                        (ArrayD::zeros(cache.values[0].raw_dim()), xa.t().dot(&dy2))
                    };
                    layer_grads[k] = LayerGrad::Weights(dw);
                    add_to(&mut grads, k, dx);
                }
                (Node::Conv(l), Aux::Matrix(cols)) => {
                    let (dx, dw) = if need_dx {
                        l.backward(cols, &dy, ctx)?
                    } else {
                        let p = l.geometry.out_height() * l.geometry.out_width();
                        let dy_mat = dy
                            .view()
                            .into_shape_with_order((n, l.out_channels, p))
                            .map_err(|e| NnError::Shape(e.to_string()))?
                            .permuted_axes([0, 2, 1])
                            .as_standard_layout()
                            .into_owned()
                            .into_shape_with_order((n * p, l.out_channels))
                            .map_err(|e| NnError::Shape(e.to_string()))?;
                        (ArrayD::zeros(cache.values[0].raw_dim()), cols.t().dot(&dy_mat))
                    };
                    layer_grads[k] = LayerGrad::Weights(dw);
                    add_to(&mut grads, k, dx);
                }
                (Node::BatchNorm(bn), Aux::Norm(c)) => {
                    let (dx, gamma, beta) = bn.backward(&dy, c)?;
                    layer_grads[k] = LayerGrad::Norm { gamma, beta };
                    add_to(&mut grads, k, dx);
                }
                (Node::Relu, _) => add_to(&mut grads, k, relu_backward(&cache.values[k + 1], &dy)),
                (Node::Add { from }, _) => {
                    let from = *from;
                    add_to(&mut grads, from, dy.clone());
                    add_to(&mut grads, k, dy);
                }
                (Node::AvgPool { size }, _) => add_to(&mut grads, k, avgpool_backward(&dy, &self.shapes[k], *size)),
                (Node::Loss, _) => add_to(&mut grads, k, dy),
                _ => return Err(NnError::MissingCache),
            }
        }
        Ok(Gradients { layers: layer_grads })
    }

    /// Forward + loss + backward on one batch in training mode.
    pub fn loss_and_gradients(&mut self, x: &ArrayD<f64>, labels: &[usize], t: f64) -> Result<(f64, usize, Gradients), NnError> {
        let (logits, cache) = self.forward(x, Phase::Train, t)?;
        let (loss, dlogits, correct) = softmax_xent(&logits, labels);
        let grads = self.backward(&cache, &dlogits)?;
        Ok((loss, correct, grads))
    }
}
