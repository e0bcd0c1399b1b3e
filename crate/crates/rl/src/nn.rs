//! Dense networks with explicit forward and backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => z.clone(),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Tanh => z.mapv(f64::tanh),
        }
    }

    /// Multiplies `grad` in place by the derivative, given the layer output `y`.
    fn backprop(self, y: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.zip_mut_with(y, |g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_mut_with(y, |g, &y| *g *= 1.0 - y * y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `inputs × outputs`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub activation: Activation,
}

/// Multilayer perceptron, row-major batches (`batch × features`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Layer outputs kept for the backward pass; `outputs[0]` is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    pub outputs: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("trace holds at least the input")
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            w: net.layers.iter().map(|l| Array2::zeros(l.w.raw_dim())).collect(),
            b: net.layers.iter().map(|l| Array1::zeros(l.b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|w| w.iter().all(|v| v.is_finite())) && self.b.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Flattened in the same order as [`Mlp::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

impl Mlp {
    /// Hidden layers use ReLU; weights are Glorot-uniform, biases zero. The
    /// last layer starts small so initial outputs are near zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
                let limit = if k + 1 == n {
                    3e-3
                } else {
                    (6.0 / (fan_in + fan_out) as f64).sqrt()
                };
                Dense {
                    w: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit)),
                    b: Array1::zeros(fan_out),
                    activation: if k + 1 == n { output } else { Activation::Relu },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.ncols()).unwrap_or(0)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Trace {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.to_owned());
        for layer in &self.layers {
            let z = outputs.last().unwrap().dot(&layer.w) + &layer.b;
            outputs.push(layer.activation.apply(&z));
        }
        Trace { outputs }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = layer.activation.apply(&(h.dot(&layer.w) + &layer.b));
        }
        h
    }

    /// Gradients of a loss given `d_out = dL/d(output)`; also returns `dL/d(input)`.
    pub fn backward(&self, trace: &Trace, d_out: &Array2<f64>) -> (Grads, Array2<f64>) {
        let n = self.layers.len();
        let mut w = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        let mut grad = d_out.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&trace.outputs[k + 1], &mut grad);
            w.push(trace.outputs[k].t().dot(&grad));
            b.push(grad.sum_axis(Axis(0)));
            grad = grad.dot(&layer.w.t());
        }
        w.reverse();
        b.reverse();
        (Grads { w, b }, grad)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v = it.next().expect("parameter count"));
            l.b.iter_mut().for_each(|v| *v = it.next().expect("parameter count"));
        }
    }

    /// `self ← (1 − tau)·self + tau·online`; `tau = 1` copies `online`.
    pub fn soft_update(&mut self, online: &Mlp, tau: f64) {
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            t.w.zip_mut_with(&o.w, |t, &o| *t = (1.0 - tau) * *t + tau * o);
            t.b.zip_mut_with(&o.b, |t, &o| *t = (1.0 - tau) * *t + tau * o);
        }
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let n = net.params().len();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut k = 0;
        let mut update = |p: &mut f64, g: f64| {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
            k += 1;
        };
        for (layer, (gw, gb)) in net.layers.iter_mut().zip(grads.w.iter().zip(&grads.b)) {
            layer.w.zip_mut_with(gw, |p, &g| update(p, g));
            layer.b.zip_mut_with(gb, |p, &g| update(p, g));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_update_with_unit_rate_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let online = Mlp::new(&[3, 4, 2], Activation::Tanh, &mut rng);
        let mut target = Mlp::new(&[3, 4, 2], Activation::Tanh, &mut rng);
        target.soft_update(&online, 1.0);
        assert_eq!(target, online);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[1, 1], Activation::Identity, &mut rng);
        let mut opt = Adam::new(&net, 0.05);
        let x = Array2::from_shape_vec((4, 1), vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
        let y = x.mapv(|v| 2.0 * v - 1.0);
        for _ in 0..2000 {
            let tr = net.forward(x.view());
            let d = (tr.output() - &y) * (2.0 / 4.0);
            let (g, _) = net.backward(&tr, &d);
            opt.step(&mut net, &g);
        }
        assert!((net.layers[0].w[[0, 0]] - 2.0).abs() < 1e-3);
        assert!((net.layers[0].b[0] + 1.0).abs() < 1e-3);
    }
}
