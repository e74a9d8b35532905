use ndarray::{s, Array2, ArrayD, IxDyn};

use super::NnError;
use crate::crossbar::{col2im, im2col, ConvGeometry, CrossbarArray};
use crate::hybridweight::ReadMode;

/// Execution context of one pass.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Ctx {
    pub t: f64,
    pub mode: ReadMode,
    /// Converters may collect calibration samples.
    pub training: bool,
}

/// Where a layer's weight matrix (`fan_in [+ bias] x outputs`) lives.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightStore {
    Digital(Array2<f64>),
    Analog(Box<CrossbarArray>),
}

impl WeightStore {
    pub fn rows(&self) -> usize {
        match self {
            WeightStore::Digital(w) => w.nrows(),
            WeightStore::Analog(a) => a.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            WeightStore::Digital(w) => w.ncols(),
            WeightStore::Analog(a) => a.cols(),
        }
    }

    /// Weight values seen by the forward pass at `t`, without read noise.
    pub fn matrix(&self, t: f64, mode: ReadMode) -> Result<Array2<f64>, NnError> {
        match self {
            WeightStore::Digital(w) => Ok(w.clone()),
            WeightStore::Analog(a) => Ok(a.effective_weights(t, mode)?),
        }
    }

    pub fn crossbar(&self) -> Option<&CrossbarArray> {
        match self {
            WeightStore::Analog(a) => Some(a),
            WeightStore::Digital(_) => None,
        }
    }

    pub fn crossbar_mut(&mut self) -> Option<&mut CrossbarArray> {
        match self {
            WeightStore::Analog(a) => Some(a),
            WeightStore::Digital(_) => None,
        }
    }

    pub(crate) fn forward(&mut self, x: &Array2<f64>, ctx: Ctx) -> Result<Array2<f64>, NnError> {
        match self {
            WeightStore::Digital(w) => {
                if x.ncols() != w.nrows() {
                    return Err(NnError::Shape(format!("input width {} for {} weight rows", x.ncols(), w.nrows())));
                }
                Ok(x.dot(w))
            }
            WeightStore::Analog(a) => Ok(a.vmm_forward(x, ctx.t, ctx.mode, ctx.training)?),
        }
    }

    pub(crate) fn backward(&mut self, dy: &Array2<f64>, ctx: Ctx) -> Result<Array2<f64>, NnError> {
        match self {
            WeightStore::Digital(w) => Ok(dy.dot(&w.t())),
            WeightStore::Analog(a) => Ok(a.vmm_transpose(dy, ctx.t, ctx.mode, ctx.training)?),
        }
    }
}

fn augment(x: ndarray::ArrayView2<f64>, bias: bool) -> Array2<f64> {
    let (n, f) = x.dim();
    let mut xa = Array2::ones((n, f + usize::from(bias)));
    xa.slice_mut(s![.., ..f]).assign(&x);
    xa
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub in_features: usize,
    pub units: usize,
    pub bias: bool,
    pub store: WeightStore,
}

impl DenseLayer {
    /// Returns the output and the augmented input kept for the weight gradient.
    pub(crate) fn forward(&mut self, x: &ArrayD<f64>, ctx: Ctx) -> Result<(ArrayD<f64>, Array2<f64>), NnError> {
        let n = x.shape()[0];
        if x.len() != n * self.in_features {
            return Err(NnError::Shape(format!("dense layer expects {} features, got {:?}", self.in_features, x.shape())));
        }
        let flat = x.view().into_shape_with_order((n, self.in_features)).map_err(|e| NnError::Shape(e.to_string()))?;
        let xa = augment(flat, self.bias);
        let y = self.store.forward(&xa, ctx)?;
        Ok((y.into_dyn(), xa))
    }

    pub(crate) fn backward(
        &mut self,
        xa: &Array2<f64>,
        dy: &ArrayD<f64>,
        in_shape: &[usize],
        ctx: Ctx,
    ) -> Result<(ArrayD<f64>, Array2<f64>), NnError> {
        let n = xa.nrows();
        let dy = dy.view().into_shape_with_order((n, self.units)).map_err(|e| NnError::Shape(e.to_string()))?.to_owned();
        let dw = xa.t().dot(&dy);
        let dxa = self.store.backward(&dy, ctx)?;
        let dx = dxa.slice(s![.., ..self.in_features]).to_owned();
        let mut shape = vec![n];
        shape.extend_from_slice(in_shape);
        let dx = dx.into_shape_with_order(IxDyn(&shape)).map_err(|e| NnError::Shape(e.to_string()))?;
        Ok((dx, dw))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub geometry: ConvGeometry,
    pub out_channels: usize,
    pub bias: bool,
    pub store: WeightStore,
}

impl ConvLayer {
    fn positions(&self) -> usize {
        self.geometry.out_height() * self.geometry.out_width()
    }

    /// Returns the output and the lowered patch matrix `(N*P) x (patch [+1])`.
    pub(crate) fn forward(&mut self, x: &ArrayD<f64>, ctx: Ctx) -> Result<(ArrayD<f64>, Array2<f64>), NnError> {
        let g = self.geometry;
        let n = x.shape()[0];
        let sample_len = g.in_channels * g.height * g.width;
        if x.shape()[1..] != [g.in_channels, g.height, g.width] {
            return Err(NnError::Shape(format!(
                "conv layer expects {:?}, got {:?}",
                [g.in_channels, g.height, g.width],
                &x.shape()[1..]
            )));
        }
        let x = x.as_standard_layout();
        let data = x.as_slice().expect("standard layout");
        let (p, patch) = (self.positions(), g.patch_len());
        let mut cols = Array2::ones((n * p, patch + usize::from(self.bias)));
        for b in 0..n {
            let c = im2col(&data[b * sample_len..(b + 1) * sample_len], &g);
            cols.slice_mut(s![b * p..(b + 1) * p, ..patch]).assign(&c);
        }
        let y = self.store.forward(&cols, ctx)?;
        // (N*P) x C_out -> N x C_out x OH x OW
        let y = y
            .into_shape_with_order((n, p, self.out_channels))
            .map_err(|e| NnError::Shape(e.to_string()))?
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[n, self.out_channels, g.out_height(), g.out_width()]))
            .map_err(|e| NnError::Shape(e.to_string()))?;
        Ok((y, cols))
    }

    pub(crate) fn backward(&mut self, cols: &Array2<f64>, dy: &ArrayD<f64>, ctx: Ctx) -> Result<(ArrayD<f64>, Array2<f64>), NnError> {
        let g = self.geometry;
        let n = dy.shape()[0];
        let p = self.positions();
        let dy_mat = dy
            .view()
            .into_shape_with_order((n, self.out_channels, p))
            .map_err(|e| NnError::Shape(e.to_string()))?
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * p, self.out_channels))
            .map_err(|e| NnError::Shape(e.to_string()))?;
        let dw = cols.t().dot(&dy_mat);
        let dcols = self.store.backward(&dy_mat, ctx)?;
        let sample_len = g.in_channels * g.height * g.width;
        let patch = g.patch_len();
        let mut dx = vec![0.0; n * sample_len];
        for (b, out) in dx.chunks_mut(sample_len).enumerate() {
            col2im(dcols.slice(s![b * p..(b + 1) * p, ..patch]), &g, out);
        }
        let dx = ArrayD::from_shape_vec(IxDyn(&[n, g.in_channels, g.height, g.width]), dx)
            .map_err(|e| NnError::Shape(e.to_string()))?;
        Ok((dx, dw))
    }
}

/// Per-channel batch normalization with digital, full-precision parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Saved normalized input and inverse standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// How batch statistics are used by a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum NormUse {
    /// Normalize with batch stats and update running stats by momentum.
    Train,
    /// Normalize with running stats.
    Eval,
    /// Normalize with batch stats and overwrite running stats with them.
    Calibrate,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `(N, C, S)` view sizes of an activation.
    fn dims(&self, shape: &[usize]) -> Result<(usize, usize, usize), NnError> {
        let c = self.channels();
        if shape.len() < 2 || shape[1] != c {
            return Err(NnError::Shape(format!("batchnorm over {c} channels got {shape:?}")));
        }
        Ok((shape[0], c, shape[2..].iter().product()))
    }

    pub(crate) fn forward(&mut self, x: &ArrayD<f64>, usage: NormUse) -> Result<(ArrayD<f64>, Option<NormCache>), NnError> {
        let (n, c, s) = self.dims(x.shape())?;
        let x = x.as_standard_layout();
        let data = x.as_slice().expect("standard layout");
        let m = (n * s) as f64;
        let (mean, var) = if usage == NormUse::Eval {
            (self.running_mean.clone(), self.running_var.clone())
        } else {
            if n * s == 0 {
                return Err(NnError::Shape("batchnorm on an empty batch".into()));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let vals = (0..n).flat_map(|b| data[(b * c + ch) * s..(b * c + ch + 1) * s].iter());
                mean[ch] = vals.clone().sum::<f64>() / m;
                var[ch] = vals.map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / m;
            }
            (mean, var)
        };
        match usage {
            NormUse::Train => {
                for ch in 0..c {
                    self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                    self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch];
                }
            }
            NormUse::Calibrate => {
                self.running_mean.clone_from(&mean);
                self.running_var.clone_from(&var);
            }
            NormUse::Eval => {}
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; data.len()];
        let mut y = vec![0.0; data.len()];
        for (k, (&v, (h, o))) in data.iter().zip(xhat.iter_mut().zip(y.iter_mut())).enumerate() {
            let ch = (k / s) % c;
            *h = (v - mean[ch]) * inv_std[ch];
            *o = self.gamma[ch] * *h + self.beta[ch];
        }
        let y = ArrayD::from_shape_vec(x.raw_dim(), y).expect("shape");
        let cache = (usage == NormUse::Train).then_some(NormCache { xhat, inv_std });
        Ok((y, cache))
    }

    /// Returns (dx, dgamma, dbeta) for a batch-statistics forward.
    pub(crate) fn backward(&self, dy: &ArrayD<f64>, cache: &NormCache) -> Result<(ArrayD<f64>, Vec<f64>, Vec<f64>), NnError> {
        let (n, c, s) = self.dims(dy.shape())?;
        let dy = dy.as_standard_layout();
        let g = dy.as_slice().expect("standard layout");
        let m = (n * s) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (k, (&d, &h)) in g.iter().zip(&cache.xhat).enumerate() {
            let ch = (k / s) % c;
            dgamma[ch] += d * h;
            dbeta[ch] += d;
        }
        // dxhat = dy * gamma; sums over the channel reduce to dbeta and dgamma
        let dx: Vec<f64> = g
            .iter()
            .zip(&cache.xhat)
            .enumerate()
            .map(|(k, (&d, &h))| {
                let ch = (k / s) % c;
                let gm = self.gamma[ch];
                gm * cache.inv_std[ch] / m * (m * d - dbeta[ch] - h * dgamma[ch])
            })
            .collect();
        Ok((ArrayD::from_shape_vec(dy.raw_dim(), dx).expect("shape"), dgamma, dbeta))
    }
}

/// A node of the evaluated graph.
#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Dense(DenseLayer),
    Conv(ConvLayer),
    BatchNorm(BatchNormState),
    Relu,
    Add { from: usize },
    AvgPool { size: usize },
    /// Softmax cross-entropy head; identity on the logits.
    Loss,
}

pub(crate) fn relu(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| v.max(0.0))
}

pub(crate) fn relu_backward(y: &ArrayD<f64>, dy: &ArrayD<f64>) -> ArrayD<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub(crate) fn avgpool(x: &ArrayD<f64>, size: usize) -> ArrayD<f64> {
    let sh = x.shape();
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let x = x.as_standard_layout();
    let d = x.as_slice().expect("standard layout");
    if size == 0 {
        let hw = (h * w) as f64;
        let out: Vec<f64> = d.chunks(h * w).map(|m| m.iter().sum::<f64>() / hw).collect();
        return ArrayD::from_shape_vec(IxDyn(&[n, c]), out).expect("shape");
    }
    let (oh, ow) = (h / size, w / size);
    let area = (size * size) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for (m, o) in d.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..h {
            for x in 0..w {
                o[(y / size) * ow + x / size] += m[y * w + x] / area;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).expect("shape")
}

pub(crate) fn avgpool_backward(dy: &ArrayD<f64>, in_shape: &[usize], size: usize) -> ArrayD<f64> {
    let n = dy.shape()[0];
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let dy = dy.as_standard_layout();
    let g = dy.as_slice().expect("standard layout");
    let mut dx = vec![0.0; n * c * h * w];
    if size == 0 {
        let hw = (h * w) as f64;
        for (m, &d) in dx.chunks_mut(h * w).zip(g) {
            m.iter_mut().for_each(|v| *v = d / hw);
        }
    } else {
        let (oh, ow) = (h / size, w / size);
        let area = (size * size) as f64;
        for (m, o) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
            for y in 0..h {
                for x in 0..w {
                    m[y * w + x] = o[(y / size) * ow + x / size] / area;
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).expect("shape")
}
