//! Forward and backward passes of the network building blocks. All
//! activations are NCHW tensors; dense layers take (batch, features).

use rand::Rng;

use super::params::{Grads, Init, ParamId, ParamKind, ParamSink, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Initial weight standard deviation.
pub const INIT_STD: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad).saturating_sub(k) / stride + 1
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sink: &mut dyn ParamSink,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = sink.declare(
            format!("{name}.weight"),
            ParamKind::Weight,
            &[out_channels, in_channels, kernel, kernel],
            Init::Normal(INIT_STD),
        );
        let bias = bias.then(|| sink.declare(format!("{name}.bias"), ParamKind::Bias, &[out_channels], Init::Zeros));
        Self { weight, bias, in_channels, out_channels, kernel, stride, pad }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out(h, self.kernel, self.stride, self.pad), conv_out(w, self.kernel, self.stride, self.pad))
    }

    /// Output columns `lo..hi` whose input column `oj * stride + kj - pad`
    /// lies inside `0..w`.
    fn valid_cols(&self, kj: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, self.pad);
        let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(s) };
        let hi = if w + pad > kj { ((w + pad - kj - 1) / s + 1).min(wo) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [T]) {
        let k = self.kernel;
        let n = ho * wo;
        let s = self.stride;
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kj, w, wo);
                    for oi in 0..ho {
                        let ii = (oi * s + ki) as isize - self.pad as isize;
                        let line = &mut dst[oi * wo..(oi + 1) * wo];
                        if ii < 0 || ii >= h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * h + ii as usize) * w..(c * h + ii as usize + 1) * w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let first = lo * s + kj - self.pad;
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &x) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *v = x;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
        let k = self.kernel;
        let n = ho * wo;
        let s = self.stride;
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kj, w, wo);
                    if lo >= hi {
                        continue;
                    }
                    for oi in 0..ho {
                        let ii = (oi * s + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let base = (c * h + ii as usize) * w + lo * s + kj - self.pad;
                        let line = &src[oi * wo + lo..oi * wo + hi];
                        for (t, &g) in line.iter().enumerate() {
                            dx[base + t * s] += g;
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut cols = vec![T::zero(); kk * ho * wo];
        let mut out = Tensor::zeros(&[n, self.out_channels, ho, wo]);
        let weight = store.get(self.weight).data();
        for b in 0..n {
            self.im2col(x.batch_item(b), h, w, ho, wo, &mut cols);
            let y = out.batch_item_mut(b);
            T::gemm(self.out_channels, kk, ho * wo, weight, false, &cols, false, y, false);
            if let Some(bias) = self.bias {
                for (o, &bv) in store.get(bias).data().iter().enumerate() {
                    for v in &mut y[o * ho * wo..(o + 1) * ho * wo] {
                        *v += bv;
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (n, _, h, w) = x.dims4();
        let (_, _, ho, wo) = dy.dims4();
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut cols = vec![T::zero(); kk * ho * wo];
        let mut dcols = vec![T::zero(); kk * ho * wo];
        let mut dx = Tensor::zeros(x.shape());
        let weight = store.get(self.weight).data();
        for b in 0..n {
            let g = dy.batch_item(b);
            self.im2col(x.batch_item(b), h, w, ho, wo, &mut cols);
            T::gemm(self.out_channels, ho * wo, kk, g, false, &cols, true, grads.get_mut(self.weight).data_mut(), true);
            T::gemm(kk, self.out_channels, ho * wo, weight, true, g, false, &mut dcols, false);
            self.col2im(&dcols, h, w, ho, wo, dx.batch_item_mut(b));
            if let Some(bias) = self.bias {
                let db = grads.get_mut(bias).data_mut();
                for (o, slot) in db.iter_mut().enumerate() {
                    *slot += g[o * ho * wo..(o + 1) * ho * wo].iter().copied().sum::<T>();
                }
            }
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

/// Values saved by a training-mode batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
}

impl BatchNorm {
    pub fn new(sink: &mut dyn ParamSink, name: &str, channels: usize) -> Self {
        let c = &[channels];
        Self {
            scale: sink.declare(format!("{name}.bn.scale"), ParamKind::NormScale, c, Init::Ones),
            shift: sink.declare(format!("{name}.bn.shift"), ParamKind::NormShift, c, Init::Zeros),
            running_mean: sink.declare(format!("{name}.bn.running_mean"), ParamKind::Buffer, c, Init::Zeros),
            running_var: sink.declare(format!("{name}.bn.running_var"), ParamKind::Buffer, c, Init::Ones),
            channels,
        }
    }

    pub fn forward_train<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let count = T::of((n * hw) as f64);
        let eps = T::of(BN_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += x.batch_item(b)[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
            }
            let m = s / count;
            let mut v = T::zero();
            for b in 0..n {
                for &xv in &x.batch_item(b)[ch * hw..(ch + 1) * hw] {
                    v += (xv - m) * (xv - m);
                }
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let scale = store.get(self.scale).data();
        let shift = store.get(self.shift).data();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for b in 0..n {
            let xs = x.batch_item(b);
            let xh = xhat.batch_item_mut(b);
            for ch in 0..c {
                for i in ch * hw..(ch + 1) * hw {
                    xh[i] = (xs[i] - mean[ch]) * inv_std[ch];
                }
            }
            let ys = y.batch_item_mut(b);
            let xh = xhat.batch_item(b);
            for ch in 0..c {
                for i in ch * hw..(ch + 1) * hw {
                    ys[i] = xh[i] * scale[ch] + shift[ch];
                }
            }
        }
        (y, BnCache { xhat, inv_std, mean, var })
    }

    pub fn forward_eval<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let eps = T::of(BN_EPS);
        let scale = store.get(self.scale).data();
        let shift = store.get(self.shift).data();
        let mean = store.get(self.running_mean).data();
        let var = store.get(self.running_var).data();
        let mut y = x.clone();
        for b in 0..n {
            let ys = y.batch_item_mut(b);
            for ch in 0..c {
                let inv = T::one() / (var[ch] + eps).sqrt();
                for v in &mut ys[ch * hw..(ch + 1) * hw] {
                    *v = (*v - mean[ch]) * inv * scale[ch] + shift[ch];
                }
            }
        }
        y
    }

    /// Folds the batch statistics of `cache` into the running estimates.
    pub fn update_running<T: Real>(&self, store: &mut ParamStore<T>, cache: &BnCache<T>, count: usize) {
        let m = T::of(BN_MOMENTUM);
        let unbias = if count > 1 { T::of(count as f64 / (count as f64 - 1.0)) } else { T::one() };
        for (r, &bm) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&cache.mean) {
            *r = (T::one() - m) * *r + m * bm;
        }
        for (r, &bv) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&cache.var) {
            *r = (T::one() - m) * *r + m * bv * unbias;
        }
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (n, c, h, w) = dy.dims4();
        let hw = h * w;
        let count = T::of((n * hw) as f64);
        let scale = store.get(self.scale).data().to_vec();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for b in 0..n {
            let g = dy.batch_item(b);
            let xh = cache.xhat.batch_item(b);
            for ch in 0..c {
                for i in ch * hw..(ch + 1) * hw {
                    sum_dy[ch] += g[i];
                    sum_dy_xhat[ch] += g[i] * xh[i];
                }
            }
        }
        for (slot, &v) in grads.get_mut(self.scale).data_mut().iter_mut().zip(&sum_dy_xhat) {
            *slot += v;
        }
        for (slot, &v) in grads.get_mut(self.shift).data_mut().iter_mut().zip(&sum_dy) {
            *slot += v;
        }
        let mut dx = Tensor::zeros(dy.shape());
        for b in 0..n {
            let g = dy.batch_item(b);
            let xh = cache.xhat.batch_item(b);
            let out = dx.batch_item_mut(b);
            for ch in 0..c {
                let k = scale[ch] * cache.inv_std[ch] / count;
                for i in ch * hw..(ch + 1) * hw {
                    out[i] = k * (count * g[i] - sum_dy[ch] - xh[i] * sum_dy_xhat[ch]);
                }
            }
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(sink: &mut dyn ParamSink, name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: sink.declare(format!("{name}.weight"), ParamKind::Weight, &[outputs, inputs], Init::Normal(INIT_STD)),
            bias: sink.declare(format!("{name}.bias"), ParamKind::Bias, &[outputs], Init::Zeros),
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let n = x.shape()[0];
        assert_eq!(x.len(), n * self.inputs, "dense input width");
        let mut y = Tensor::zeros(&[n, self.outputs]);
        T::gemm(n, self.inputs, self.outputs, x.data(), false, store.get(self.weight).data(), true, y.data_mut(), false);
        let bias = store.get(self.bias).data();
        for b in 0..n {
            for (v, &bv) in y.batch_item_mut(b).iter_mut().zip(bias) {
                *v += bv;
            }
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let n = x.shape()[0];
        T::gemm(self.outputs, n, self.inputs, dy.data(), true, x.data(), false, grads.get_mut(self.weight).data_mut(), true);
        let db = grads.get_mut(self.bias).data_mut();
        for b in 0..n {
            for (slot, &g) in db.iter_mut().zip(dy.batch_item(b)) {
                *slot += g;
            }
        }
        need_input_grad.then(|| {
            let mut dx = Tensor::zeros(&[n, self.inputs]);
            T::gemm(n, self.outputs, self.inputs, dy.data(), false, store.get(self.weight).data(), false, dx.data_mut(), false);
            dx
        })
    }
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

/// Gradient of the leaky activation given its output `y`.
pub fn leaky_relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    let data = y.data().iter().zip(dy.data()).map(|(&yv, &g)| if yv > T::zero() { g } else { g * s }).collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn tanh_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y.data().iter().zip(dy.data()).map(|(&yv, &g)| g * (T::one() - yv * yv)).collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

/// Inverted-dropout keep mask (already scaled by 1/(1-rate)).
pub fn dropout_mask<T: Real>(shape: &[usize], rate: f64, seed: u64, stream: u64) -> Tensor<T> {
    let mut r = rng::stream(seed, "dropout", stream);
    let keep = T::of(1.0 / (1.0 - rate));
    let n = shape.iter().product();
    let data = (0..n).map(|_| if r.random::<f64>() < rate { T::zero() } else { keep }).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = y.data_mut();
    for plane in 0..n * c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[(plane * 2 * h + i) * 2 * w + j] = src[(plane * h + i / 2) * w + j / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = dy.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        for i in 0..h2 {
            for j in 0..w2 {
                dst[(plane * h + i / 2) * w + j / 2] += src[(plane * h2 + i) * w2 + j];
            }
        }
    }
    dx
}

/// Concatenates along channels (NCHW) or features (N, F).
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let n = a.shape()[0];
    assert_eq!(n, b.shape()[0]);
    assert_eq!(a.shape()[2..], b.shape()[2..], "concat spatial shapes");
    let mut shape = a.shape().to_vec();
    shape[1] += b.shape()[1];
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.batch_item(i));
        data.extend_from_slice(b.batch_item(i));
    }
    Tensor::from_vec(&shape, data).expect("shape matches")
}

/// Splits a concatenation gradient back into its two parts.
pub fn split<T: Real>(d: &Tensor<T>, first_channels: usize) -> (Tensor<T>, Tensor<T>) {
    let n = d.shape()[0];
    let inner: usize = d.shape()[2..].iter().product();
    let cut = first_channels * inner;
    let mut sa = d.shape().to_vec();
    sa[1] = first_channels;
    let mut sb = d.shape().to_vec();
    sb[1] -= first_channels;
    let mut da = Vec::with_capacity(n * cut);
    let mut db = Vec::with_capacity(d.len() - n * cut);
    for i in 0..n {
        let item = d.batch_item(i);
        da.extend_from_slice(&item[..cut]);
        db.extend_from_slice(&item[cut..]);
    }
    (Tensor::from_vec(&sa, da).unwrap(), Tensor::from_vec(&sb, db).unwrap())
}
