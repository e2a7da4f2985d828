//! Layer kernels. Activations travel as `[batch x features]` matrices; spatial
//! features are laid out height, width, channel (HWC).

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    #[default]
    None,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::None => {}
        }
    }

    /// Multiply `grad` by the derivative, expressed through the activation
    /// output `a`.
    fn backprop(self, grad: &mut Array2<f64>, a: &Array2<f64>) {
        match self {
            Activation::Relu => grad.zip_mut_with(a, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Sigmoid => grad.zip_mut_with(a, |g, &a| *g *= a * (1.0 - a)),
            Activation::None => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    Dropout {
        rate: f64,
    },
    Dropconnect {
        rate: f64,
    },
}

impl Regularizer {
    pub fn rate(self) -> f64 {
        match self {
            Regularizer::None => 0.0,
            Regularizer::Dropout { rate } | Regularizer::Dropconnect { rate } => rate,
        }
    }
}

/// Keep-mask for `len` weights: each entry is dropped (false) independently
/// with probability `rate`.
pub(crate) fn bernoulli_keep(len: usize, rate: f64, rng: &mut Rng) -> Vec<bool> {
    if rate == 0.0 {
        return vec![true; len];
    }
    (0..len).map(|_| rng.random::<f64>() >= rate).collect()
}

fn mask_matrix(shape: (usize, usize), rate: f64, rng: &mut Rng) -> Array2<f64> {
    let keep = bernoulli_keep(shape.0 * shape.1, rate, rng);
    Array2::from_shape_vec(shape, keep.into_iter().map(|k| if k { 1.0 } else { 0.0 }).collect()).expect("mask shape")
}

pub(crate) fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    /// `[out x in]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub activation: Activation,
    pub regularizer: Regularizer,
    /// Softmax output layer; backward then receives the gradient with
    /// respect to the logits.
    pub softmax: bool,
}

#[derive(Debug, Clone)]
pub struct Conv {
    /// `[filters x (kh * kw * in_channels)]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub activation: Activation,
    pub in_shape: (usize, usize, usize),
    pub kernel: (usize, usize),
    pub stride: usize,
}

impl Conv {
    pub fn out_hw(&self) -> (usize, usize) {
        let (h, w, _) = self.in_shape;
        ((h - self.kernel.0) / self.stride + 1, (w - self.kernel.1) / self.stride + 1)
    }

    fn im2col(&self, x: &Array2<f64>) -> Array2<f64> {
        let (h, w, c) = self.in_shape;
        let (kh, kw) = self.kernel;
        let (oh, ow) = self.out_hw();
        let k = kh * kw * c;
        let batch = x.nrows();
        let mut cols = Array2::zeros((batch * oh * ow, k));
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("standard layout");
        let feat = h * w * c;
        for b in 0..batch {
            let img = &xs[b * feat..(b + 1) * feat];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * k;
                    for ky in 0..kh {
                        let src = ((oy * self.stride + ky) * w + ox * self.stride) * c;
                        let dst = row + ky * kw * c;
                        cs[dst..dst + kw * c].copy_from_slice(&img[src..src + kw * c]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, batch: usize) -> Array2<f64> {
        let (h, w, c) = self.in_shape;
        let (kh, kw) = self.kernel;
        let (oh, ow) = self.out_hw();
        let k = kh * kw * c;
        let feat = h * w * c;
        let mut dx = Array2::zeros((batch, feat));
        let ds = dcols.as_slice().expect("standard layout");
        let xs = dx.as_slice_mut().expect("standard layout");
        for b in 0..batch {
            let img = &mut xs[b * feat..(b + 1) * feat];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * k;
                    for ky in 0..kh {
                        let dst = ((oy * self.stride + ky) * w + ox * self.stride) * c;
                        let src = row + ky * kw * c;
                        for (d, s) in img[dst..dst + kw * c].iter_mut().zip(&ds[src..src + kw * c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub in_shape: (usize, usize, usize),
    pub size: usize,
    pub stride: usize,
}

impl MaxPool {
    pub fn out_hw(&self) -> (usize, usize) {
        let (h, w, _) = self.in_shape;
        ((h - self.size) / self.stride + 1, (w - self.size) / self.stride + 1)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv),
    MaxPool(MaxPool),
}

/// What backward needs from a forward pass.
pub enum Cache {
    Dense {
        x: Array2<f64>,
        /// Post-activation, pre-dropout output.
        a: Array2<f64>,
        w_eff: Option<Array2<f64>>,
        weight_mask: Option<Array2<f64>>,
        unit_mask: Option<Array2<f64>>,
    },
    Conv {
        cols: Array2<f64>,
        a: Array2<f64>,
    },
    MaxPool {
        argmax: Vec<usize>,
        batch: usize,
    },
}

pub struct Grads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.w.len() + d.b.len(),
            Layer::Conv(c) => c.w.len() + c.b.len(),
            Layer::MaxPool(_) => 0,
        }
    }

    /// Weights then biases, row-major.
    pub fn params_mut(&mut self) -> Option<(&mut [f64], &mut [f64])> {
        match self {
            Layer::Dense(d) => Some((d.w.as_slice_mut()?, d.b.as_slice_mut()?)),
            Layer::Conv(c) => Some((c.w.as_slice_mut()?, c.b.as_slice_mut()?)),
            Layer::MaxPool(_) => None,
        }
    }

    pub fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Dense(d) => Some((d.w.as_slice()?, d.b.as_slice()?)),
            Layer::Conv(c) => Some((c.w.as_slice()?, c.b.as_slice()?)),
            Layer::MaxPool(_) => None,
        }
    }

    /// `rng` is `Some` in training mode (stochastic regularizers active).
    pub fn forward(&self, x: Array2<f64>, rng: Option<&mut Rng>) -> (Array2<f64>, Cache) {
        match self {
            Layer::Dense(d) => {
                let train = rng.is_some();
                let mut rng = rng;
                let (w_eff, weight_mask) = match (d.regularizer, rng.as_deref_mut()) {
                    (Regularizer::Dropconnect { rate }, Some(r)) => {
                        let m = mask_matrix(d.w.dim(), rate, r);
                        (Some(&d.w * &m), Some(m))
                    }
                    (Regularizer::Dropconnect { rate }, None) => (Some(&d.w * (1.0 - rate)), None),
                    _ => (None, None),
                };
                let w = w_eff.as_ref().unwrap_or(&d.w);
                let mut z = x.dot(&w.t());
                z += &d.b;
                if d.softmax {
                    softmax_rows(&mut z);
                } else {
                    d.activation.apply(&mut z);
                }
                let a = z;
                let (out, unit_mask) = match (d.regularizer, rng) {
                    (Regularizer::Dropout { rate }, Some(r)) => {
                        let m = mask_matrix(a.dim(), rate, r);
                        (&a * &m, Some(m))
                    }
                    (Regularizer::Dropout { rate }, None) => (&a * (1.0 - rate), None),
                    _ => (a.clone(), None),
                };
                let cache = if train {
                    Cache::Dense { x, a, w_eff, weight_mask, unit_mask }
                } else {
                    Cache::Dense {
                        x: Array2::zeros((0, 0)),
                        a: Array2::zeros((0, 0)),
                        w_eff: None,
                        weight_mask: None,
                        unit_mask: None,
                    }
                };
                (out, cache)
            }
            Layer::Conv(c) => {
                let batch = x.nrows();
                let cols = c.im2col(&x);
                let mut z = cols.dot(&c.w.t());
                z += &c.b;
                c.activation.apply(&mut z);
                let (oh, ow) = c.out_hw();
                let f = c.w.nrows();
                let out = z.clone().into_shape_with_order((batch, oh * ow * f)).expect("conv reshape");
                (out, Cache::Conv { cols, a: z })
            }
            Layer::MaxPool(p) => {
                let (h, w, ch) = p.in_shape;
                let (oh, ow) = p.out_hw();
                let batch = x.nrows();
                let feat = h * w * ch;
                let ofeat = oh * ow * ch;
                let xs = x.as_slice().expect("standard layout");
                let mut out = Array2::zeros((batch, ofeat));
                let os = out.as_slice_mut().expect("standard layout");
                let mut argmax = vec![0usize; batch * ofeat];
                for b in 0..batch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for c in 0..ch {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_i = 0;
                                for ky in 0..p.size {
                                    for kx in 0..p.size {
                                        let i = b * feat + ((oy * p.stride + ky) * w + ox * p.stride + kx) * ch + c;
                                        if xs[i] > best {
                                            best = xs[i];
                                            best_i = i;
                                        }
                                    }
                                }
                                let o = b * ofeat + (oy * ow + ox) * ch + c;
                                os[o] = best;
                                argmax[o] = best_i;
                            }
                        }
                    }
                }
                (out, Cache::MaxPool { argmax, batch })
            }
        }
    }

    /// Returns the gradient with respect to the layer input and, for
    /// parametrized layers, the parameter gradients.
    pub fn backward(&self, grad_out: Array2<f64>, cache: Cache) -> (Array2<f64>, Option<Grads>) {
        match (self, cache) {
            (Layer::Dense(d), Cache::Dense { x, a, w_eff, weight_mask, unit_mask }) => {
                let mut dz = grad_out;
                if let Some(m) = unit_mask {
                    dz *= &m;
                }
                if !d.softmax {
                    d.activation.backprop(&mut dz, &a);
                }
                let mut gw = dz.t().dot(&x);
                if let Some(m) = weight_mask {
                    gw *= &m;
                }
                let gb = dz.sum_axis(Axis(0));
                let dx = dz.dot(w_eff.as_ref().unwrap_or(&d.w));
                (dx, Some(Grads { w: gw, b: gb }))
            }
            (Layer::Conv(c), Cache::Conv { cols, a }) => {
                let batch = cols.nrows() / {
                    let (oh, ow) = c.out_hw();
                    oh * ow
                };
                let mut dz = grad_out.into_shape_with_order(a.dim()).expect("conv grad reshape");
                c.activation.backprop(&mut dz, &a);
                let gw = dz.t().dot(&cols);
                let gb = dz.sum_axis(Axis(0));
                let dcols = dz.dot(&c.w);
                (c.col2im(&dcols, batch), Some(Grads { w: gw, b: gb }))
            }
            (Layer::MaxPool(p), Cache::MaxPool { argmax, batch }) => {
                let (h, w, ch) = p.in_shape;
                let mut dx = Array2::zeros((batch, h * w * ch));
                let ds = dx.as_slice_mut().expect("standard layout");
                let gs = grad_out.as_slice().expect("standard layout");
                for (o, &i) in argmax.iter().enumerate() {
                    ds[i] += gs[o];
                }
                (dx, None)
            }
            _ => unreachable!("cache does not match layer"),
        }
    }
}
