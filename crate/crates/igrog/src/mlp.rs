//! Minimal fully-connected network with reverse-mode gradients and Adam.
//! Self-contained on purpose: kernel training needs nothing beyond dense
//! affine layers, ReLU, L1/L2 losses and a standard optimizer, and keeping it
//! in-crate keeps training bit-reproducible.

use crate::{Error, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
}

/// Dense network parameters: affine layers with ReLU on the hidden ones and
/// a linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    /// Per layer: weight matrix (out x in).
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub activation: Activation,
}

/// Per-layer gradients, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Activations cached by a forward pass for the backward pass.
pub struct ForwardCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

/// Kaiming-uniform fan-in init: weights U(-sqrt(6/f), sqrt(6/f)) (std
/// sqrt(2/f)), zero biases. `arch` lists [in, hidden.., out].
pub fn mlp_init(arch: &[usize], seed: u64) -> Result<Mlp> {
    if arch.len() < 2 {
        return Err(Error::InvalidArgument("arch needs at least input and output widths".into()));
    }
    if arch.iter().any(|&w| w == 0) {
        return Err(Error::InvalidArgument("zero-width layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..arch.len() - 1 {
        let fan_in = arch[l];
        let bound = (6.0 / fan_in as f64).sqrt();
        weights.push(Array2::from_shape_fn((arch[l + 1], arch[l]), |_| {
            (rng.gen::<f64>() * 2.0 - 1.0) * bound
        }));
        biases.push(Array1::zeros(arch[l + 1]));
    }
    Ok(Mlp { weights, biases, activation: Activation::Relu })
}

impl Mlp {
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_width(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weights[self.weights.len() - 1].nrows()
    }

    /// Batch forward pass: rows are samples.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, ForwardCache) {
        assert_eq!(x.ncols(), self.input_width(), "input width mismatch");
        let n_layers = self.num_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut a = x.clone();
        for l in 0..n_layers {
            inputs.push(a.clone());
            let mut z = a.dot(&self.weights[l].t());
            for mut row in z.rows_mut() {
                row += &self.biases[l];
            }
            if l + 1 < n_layers {
                pre.push(z.clone());
                z.mapv_inplace(|v| v.max(0.0)); // ReLU
            }
            a = z;
        }
        (a, ForwardCache { inputs, pre })
    }

    /// Reverse-mode gradients of all parameters given dLoss/dOutput.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Gradients {
        let n_layers = self.num_layers();
        let mut gw = vec![Array2::zeros((0, 0)); n_layers];
        let mut gb = vec![Array1::zeros(0); n_layers];
        let mut delta = grad_out.clone();
        for l in (0..n_layers).rev() {
            gw[l] = delta.t().dot(&cache.inputs[l]);
            gb[l] = delta.sum_axis(ndarray::Axis(0));
            if l > 0 {
                let mut prev = delta.dot(&self.weights[l]);
                prev.zip_mut_with(&cache.pre[l - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
        }
        Gradients { weights: gw, biases: gb }
    }

    pub fn zeros_like_grad(&self) -> Gradients {
        Gradients {
            weights: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

/// Adam optimizer state (bias-corrected first/second moments).
#[derive(Debug, Clone)]
pub struct AdamState {
    m_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_w: Vec<Array2<f64>>,
    v_b: Vec<Array1<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(mlp: &Mlp, lr: f64) -> Self {
        AdamState {
            m_w: mlp.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            m_b: mlp.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            v_w: mlp.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            v_b: mlp.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for l in 0..params.weights.len() {
            update(
                &mut params.weights[l],
                &grads.weights[l],
                &mut self.m_w[l],
                &mut self.v_w[l],
                self.beta1,
                self.beta2,
                self.lr,
                self.eps,
                c1,
                c2,
            );
            update1(
                &mut params.biases[l],
                &grads.biases[l],
                &mut self.m_b[l],
                &mut self.v_b[l],
                self.beta1,
                self.beta2,
                self.lr,
                self.eps,
                c1,
                c2,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    b1: f64,
    b2: f64,
    lr: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    for ((pi, &gi), (mi, vi)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
        *mi = b1 * *mi + (1.0 - b1) * gi;
        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        let mh = *mi / c1;
        let vh = *vi / c2;
        *pi -= lr * mh / (vh.sqrt() + eps);
    }
}

#[allow(clippy::too_many_arguments)]
fn update1(
    p: &mut Array1<f64>,
    g: &Array1<f64>,
    m: &mut Array1<f64>,
    v: &mut Array1<f64>,
    b1: f64,
    b2: f64,
    lr: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    for ((pi, &gi), (mi, vi)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
        *mi = b1 * *mi + (1.0 - b1) * gi;
        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        let mh = *mi / c1;
        let vh = *vi / c2;
        *pi -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Training losses. Complex residuals enter as two reals per entry, so L1 is
/// `sum |re| + |im|` with subgradient 0 at exact zeros; L2 is the plain sum
/// of squares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Loss {
    L1,
    L2,
}

/// Loss value and subgradient with respect to `pred`.
pub fn loss_and_grad(loss: Loss, pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    assert_eq!(pred.raw_dim(), target.raw_dim());
    match loss {
        Loss::L1 => {
            let mut value = 0.0;
            let grad = Array2::from_shape_fn(pred.raw_dim(), |idx| {
                let r = pred[idx] - target[idx];
                value += r.abs();
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            (value, grad)
        }
        Loss::L2 => {
            let mut value = 0.0;
            let grad = Array2::from_shape_fn(pred.raw_dim(), |idx| {
                let r = pred[idx] - target[idx];
                value += r * r;
                2.0 * r
            });
            (value, grad)
        }
    }
}

/// L1 loss (the training default).
pub fn l1_loss(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    loss_and_grad(Loss::L1, pred, target)
}
