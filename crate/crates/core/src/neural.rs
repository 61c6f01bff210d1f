//! Dense feedforward layers with hand-written reverse-mode gradients, the
//! GFN encoder/decoder boundary layers, and SGD/Adam optimizers.
//!
//! Batches are stored column-wise: an input batch is `features × samples`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfn::WeightBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    /// Lipschitz constant.
    pub fn lipschitz(self) -> f64 {
        1.0
    }
}

/// Glorot-uniform `rows × cols` matrix.
pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..=limit))
}

/// Affine layer `w x + b` with `w` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn new(w: Array2<f64>, b: Array1<f64>) -> Result<Self> {
        if w.nrows() != b.len() {
            return Err(Error::Shape(format!(
                "weight {:?} with bias of length {}",
                w.dim(),
                b.len()
            )));
        }
        Ok(Dense { w, b })
    }

    pub fn glorot<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        Dense {
            w: glorot_uniform(n_out, n_in, rng),
            b: Array1::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w.nrows()
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = self.w.dot(&x);
        a += &self.b.view().insert_axis(Axis(1));
        a
    }
}

/// Stack of dense layers. `activation` follows every layer except the last,
/// which uses `last_activation`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
    pub activation: Activation,
    pub last_activation: Activation,
}

/// Layer outputs of a forward pass; `outputs[0]` is the input batch.
#[derive(Debug, Clone)]
pub struct Trace {
    pub outputs: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().unwrap()
    }
}

/// Gradients for the layers of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetGrad {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
}

impl DenseNetGrad {
    pub fn zeros_like(net: &DenseNet) -> Self {
        DenseNetGrad {
            w: net.layers.iter().map(|l| Array2::zeros(l.w.dim())).collect(),
            b: net.layers.iter().map(|l| Array1::zeros(l.b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &DenseNetGrad) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += b;
        }
    }
}

impl DenseNet {
    /// Builds a net from layer sizes `[n_0, n_1, …, n_K]`, Glorot-initialized.
    pub fn glorot<R: Rng>(
        sizes: &[usize],
        activation: Activation,
        last_activation: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        DenseNet {
            layers,
            activation,
            last_activation,
        }
    }

    pub fn new(layers: Vec<Dense>, activation: Activation, last_activation: Activation) -> Result<Self> {
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::Shape(format!(
                    "layer {k} outputs {} but layer {} takes {}",
                    pair[0].n_out(),
                    k + 1,
                    pair[1].n_in()
                )));
            }
        }
        Ok(DenseNet {
            layers,
            activation,
            last_activation,
        })
    }

    /// `[n_0, …, n_K]`; empty for a net without layers.
    pub fn sizes(&self) -> Vec<usize> {
        match self.layers.first() {
            None => Vec::new(),
            Some(first) => std::iter::once(first.n_in())
                .chain(self.layers.iter().map(Dense::n_out))
                .collect(),
        }
    }

    fn activation_of(&self, k: usize) -> Activation {
        if k + 1 == self.layers.len() {
            self.last_activation
        } else {
            self.activation
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, rows: usize) -> Result<()> {
        match self.layers.first() {
            Some(l) if l.n_in() != rows => Err(Error::Shape(format!(
                "net expects {} inputs, got {rows}",
                l.n_in()
            ))),
            _ => Ok(()),
        }
    }

    pub fn forward_trace(&self, x: Array2<f64>) -> Result<Trace> {
        self.check_input(x.nrows())?;
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x);
        for (k, layer) in self.layers.iter().enumerate() {
            let act = self.activation_of(k);
            let mut a = layer.forward(outputs[k].view());
            if act != Activation::Identity {
                a.mapv_inplace(|v| act.apply(v));
            }
            outputs.push(a);
        }
        Ok(Trace { outputs })
    }

    pub fn forward(&self, x: Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(x)?.outputs.pop().unwrap())
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let col = Array2::from_shape_vec((x.len(), 1), x.to_vec()).unwrap();
        Ok(self.forward(col)?.into_raw_vec_and_offset().0)
    }

    /// Back-propagates `grad_out` (same shape as the output batch),
    /// accumulating into `grad` and returning the gradient w.r.t. the input.
    pub fn backward(&self, trace: &Trace, grad_out: Array2<f64>, grad: &mut DenseNetGrad) -> Array2<f64> {
        let mut delta = grad_out;
        for k in (0..self.layers.len()).rev() {
            let act = self.activation_of(k);
            if act != Activation::Identity {
                delta.zip_mut_with(&trace.outputs[k + 1], |d, &y| {
                    *d *= act.derivative_from_output(y)
                });
            }
            grad.w[k] += &delta.dot(&trace.outputs[k].t());
            grad.b[k] += &delta.sum_axis(Axis(1));
            delta = self.layers[k].w.t().dot(&delta);
        }
        delta
    }
}

/// Output batch of the GFN encoder layer, `tanh(w_enc u + b_enc)`, for
/// fields `u` stored as columns (`N × samples`).
pub fn gfn_encode_layer(wb: &WeightBundle, u: ArrayView2<f64>) -> Result<Array2<f64>> {
    if u.nrows() != wb.n_nodes() {
        return Err(Error::Shape(format!(
            "field has {} values, mesh has {} nodes",
            u.nrows(),
            wb.n_nodes()
        )));
    }
    let mut a = wb.w_enc.dot(&u);
    a += &wb.b_enc.view().insert_axis(Axis(1));
    a.mapv_inplace(f64::tanh);
    Ok(a)
}

/// Affine GFN decoder layer `w_dec h + b_dec`.
pub fn gfn_decode_layer(wb: &WeightBundle, h: ArrayView2<f64>) -> Result<Array2<f64>> {
    if h.nrows() != wb.width() {
        return Err(Error::Shape(format!(
            "decoder layer takes {} inputs, got {}",
            wb.width(),
            h.nrows()
        )));
    }
    let mut out = wb.w_dec.dot(&h);
    out += &wb.b_dec.view().insert_axis(Axis(1));
    Ok(out)
}

fn column(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((x.len(), 1), x.to_vec()).unwrap()
}

/// Encodes one field: `hidden(tanh(w_enc u + b_enc))`.
pub fn encode(wb: &WeightBundle, hidden: &DenseNet, u: &[f64]) -> Result<Vec<f64>> {
    let h = gfn_encode_layer(wb, column(u).view())?;
    Ok(hidden.forward(h)?.into_raw_vec_and_offset().0)
}

/// Decodes one latent vector: `w_dec hidden(z) + b_dec`.
pub fn decode(wb: &WeightBundle, hidden: &DenseNet, z: &[f64]) -> Result<Vec<f64>> {
    let h = hidden.forward(column(z))?;
    Ok(gfn_decode_layer(wb, h.view())?.into_raw_vec_and_offset().0)
}

pub fn map_params(mapper: &DenseNet, mu: &[f64]) -> Result<Vec<f64>> {
    mapper.forward_vec(mu)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// One trainable tensor: values, gradient of the same length, and whether
/// the L2 penalty applies.
pub struct ParamSlot<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub l2: f64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, l2: f64) -> Self {
        Adam {
            lr,
            l2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Drops the moment estimates, e.g. after the parameter shapes change.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, l2: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { lr, l2 }),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr, l2)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd(_) => OptimizerKind::Sgd,
            Optimizer::Adam(_) => OptimizerKind::Adam,
        }
    }

    /// Applies one update. Adam state is created on the first call and must
    /// match the slot layout afterwards.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_>]) -> Result<()> {
        for (k, s) in slots.iter().enumerate() {
            if s.value.len() != s.grad.len() {
                return Err(Error::Shape(format!(
                    "parameter {k} has {} values but {} gradients",
                    s.value.len(),
                    s.grad.len()
                )));
            }
        }
        match self {
            Optimizer::Sgd(opt) => {
                for s in slots.iter_mut() {
                    let l2 = if s.decay { opt.l2 } else { 0.0 };
                    for (w, &g) in s.value.iter_mut().zip(s.grad) {
                        *w -= opt.lr * (g + l2 * *w);
                    }
                }
            }
            Optimizer::Adam(opt) => {
                if opt.m.is_empty() {
                    opt.m = slots.iter().map(|s| vec![0.0; s.value.len()]).collect();
                    opt.v = opt.m.clone();
                }
                let layout_ok = opt.m.len() == slots.len()
                    && opt.m.iter().zip(slots.iter()).all(|(m, s)| m.len() == s.value.len());
                if !layout_ok {
                    return Err(Error::Shape(
                        "Adam moment buffers do not match the parameter shapes".into(),
                    ));
                }
                opt.step += 1;
                let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
                let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
                for ((s, m), v) in slots.iter_mut().zip(&mut opt.m).zip(&mut opt.v) {
                    let l2 = if s.decay { opt.l2 } else { 0.0 };
                    for i in 0..s.value.len() {
                        let g = s.grad[i] + l2 * s.value[i];
                        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
                        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        s.value[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
