//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Forward passes borrow the layer immutably; parameter gradients are
//! accumulated into [`Param::grad`] by the backward passes. Batch-norm
//! running statistics are committed separately so that evaluation stays a
//! read-only operation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{gemm, Matrix, Tensor4};
use super::trace::ExecTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn constant(name: impl Into<String>, len: usize, v: f64) -> Self {
        Self::new(name, vec![v; len])
    }

    pub fn normal(name: impl Into<String>, len: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Self::new(name, (0..len).map(|_| dist.sample(rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns trainable parameters and (optionally) non-trainable buffers.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    fn buffers(&self) -> Vec<&Param> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<Vec<f64>>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let name = name.into();
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = Param::normal(
            format!("{name}.weight"),
            out_ch * in_ch * kernel * kernel,
            (2.0 / fan_in).sqrt(),
            rng,
        );
        let bias = bias.then(|| Param::constant(format!("{name}.bias"), out_ch, 0.0));
        Self {
            name,
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, img: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let plane = oh * ow;
        let mut cols = vec![0.0; self.in_ch * k * k * plane];
        for ci in 0..self.in_ch {
            let src = &img[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let plane = oh * ow;
        let mut img = vec![0.0; self.in_ch * h * w];
        for ci in 0..self.in_ch {
            let dst = &mut img[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        img
    }

    pub fn forward(
        &self,
        x: &Tensor4,
        keep_cache: bool,
        trace: Option<&mut ExecTrace>,
    ) -> (Tensor4, Option<ConvCache>) {
        assert_eq!(x.c, self.in_ch, "{}: channel mismatch", self.name);
        let (oh, ow) = self.out_dims(x.h, x.w);
        let plane = oh * ow;
        let kk = self.in_ch * self.kernel * self.kernel;
        let mut out = Tensor4::zeros(x.n, self.out_ch, oh, ow);
        let mut cache_cols = Vec::with_capacity(if keep_cache { x.n } else { 0 });
        for i in 0..x.n {
            let cols = self.im2col(x.image(i), x.h, x.w, oh, ow);
            let y = out.image_mut(i);
            if let Some(b) = &self.bias {
                for (co, bv) in b.value.iter().enumerate() {
                    y[co * plane..(co + 1) * plane].fill(*bv);
                }
            }
            let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
            gemm(self.out_ch, kk, plane, &self.weight.value, false, &cols, false, y, beta);
            if keep_cache {
                cache_cols.push(cols);
            }
        }
        if let Some(t) = trace {
            t.record(&self.name, (2 * self.out_ch * kk * plane * x.n) as u64);
        }
        let cache = keep_cache.then_some(ConvCache {
            cols: cache_cols,
            in_h: x.h,
            in_w: x.w,
            out_h: oh,
            out_w: ow,
        });
        (out, cache)
    }

    /// Accumulates weight/bias gradients (when `param_grads`) and optionally
    /// returns the gradient with respect to the input.
    pub fn backward(
        &mut self,
        cache: &ConvCache,
        dy: &Tensor4,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor4> {
        let plane = cache.out_h * cache.out_w;
        let kk = self.in_ch * self.kernel * self.kernel;
        let mut dx = input_grad.then(|| Tensor4::zeros(dy.n, self.in_ch, cache.in_h, cache.in_w));
        let mut dcols = vec![0.0; kk * plane];
        for i in 0..dy.n {
            let g = dy.image(i);
            let cols = &cache.cols[i];
            if param_grads {
                gemm(self.out_ch, plane, kk, g, false, cols, true, &mut self.weight.grad, 1.0);
                if let Some(b) = &mut self.bias {
                    for co in 0..self.out_ch {
                        b.grad[co] += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                gemm(kk, self.out_ch, plane, &self.weight.value, true, g, false, &mut dcols, 0.0);
                let img = self.col2im(&dcols, cache.in_h, cache.in_w, cache.out_h, cache.out_w);
                dx.image_mut(i).copy_from_slice(&img);
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

/// Per-channel batch normalisation over (N, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
    train: bool,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        Self {
            gamma: Param::constant(format!("{name}.gamma"), channels, 1.0),
            beta: Param::constant(format!("{name}.beta"), channels, 0.0),
            running_mean: Param::constant(format!("{name}.running_mean"), channels, 0.0),
            running_var: Param::constant(format!("{name}.running_var"), channels, 1.0),
            momentum: 0.1,
            eps: 1e-5,
            name,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(
        &self,
        x: &Tensor4,
        train: bool,
        trace: Option<&mut ExecTrace>,
    ) -> (Tensor4, BnCache) {
        let c = self.channels();
        assert_eq!(x.c, c, "{}: channel mismatch", self.name);
        let plane = x.h * x.w;
        let count = (x.n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut var_unbiased = vec![0.0; c];
        if train {
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..x.n {
                    let off = (i * c + ch) * plane;
                    s += x.data[off..off + plane].iter().sum::<f64>();
                }
                let m = s / count;
                let mut ss = 0.0;
                for i in 0..x.n {
                    let off = (i * c + ch) * plane;
                    ss += x.data[off..off + plane]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / count;
                var_unbiased[ch] = if count > 1.0 { ss / (count - 1.0) } else { 0.0 };
            }
        } else {
            mean.copy_from_slice(&self.running_mean.value);
            var.copy_from_slice(&self.running_var.value);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = Tensor4::zeros(x.n, c, x.h, x.w);
        let mut x_hat = vec![0.0; x.data.len()];
        for i in 0..x.n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for p in off..off + plane {
                    let xh = (x.data[p] - mean[ch]) * inv_std[ch];
                    x_hat[p] = xh;
                    out.data[p] = g * xh + b;
                }
            }
        }
        if let Some(t) = trace {
            t.record(&self.name, (4 * x.data.len()) as u64);
        }
        (
            out,
            BnCache {
                x_hat,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
                train,
            },
        )
    }

    /// Folds the batch statistics of a training-mode forward pass into the
    /// running averages.
    pub fn commit(&mut self, cache: &BnCache) {
        if !cache.train {
            return;
        }
        let m = self.momentum;
        for ch in 0..self.channels() {
            self.running_mean.value[ch] =
                (1.0 - m) * self.running_mean.value[ch] + m * cache.batch_mean[ch];
            self.running_var.value[ch] =
                (1.0 - m) * self.running_var.value[ch] + m * cache.batch_var_unbiased[ch];
        }
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor4, param_grads: bool) -> Tensor4 {
        let c = self.channels();
        let plane = dy.h * dy.w;
        let count = (dy.n * plane) as f64;
        let mut dx = Tensor4::zeros(dy.n, c, dy.h, dy.w);
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xh = 0.0;
            for i in 0..dy.n {
                let off = (i * c + ch) * plane;
                for p in off..off + plane {
                    sum_dy += dy.data[p];
                    sum_dy_xh += dy.data[p] * cache.x_hat[p];
                }
            }
            if param_grads {
                self.gamma.grad[ch] += sum_dy_xh;
                self.beta.grad[ch] += sum_dy;
            }
            let g = self.gamma.value[ch] * cache.inv_std[ch];
            for i in 0..dy.n {
                let off = (i * c + ch) * plane;
                for p in off..off + plane {
                    dx.data[p] = if cache.train {
                        g * (dy.data[p] - sum_dy / count - cache.x_hat[p] * sum_dy_xh / count)
                    } else {
                        g * dy.data[p]
                    };
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Param> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

/// `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: Param,
    pub bias: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let name = name.into();
        Self {
            weight: Param::normal(
                format!("{name}.weight"),
                in_dim * out_dim,
                (1.0 / in_dim as f64).sqrt(),
                rng,
            ),
            bias: Param::constant(format!("{name}.bias"), out_dim, 0.0),
            name,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &Matrix, trace: Option<&mut ExecTrace>) -> Matrix {
        assert_eq!(x.cols, self.in_dim, "{}: input width mismatch", self.name);
        let mut y = Matrix::zeros(x.rows, self.out_dim);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.bias.value);
        }
        gemm(x.rows, self.in_dim, self.out_dim, &x.data, false, &self.weight.value, true, &mut y.data, 1.0);
        if let Some(t) = trace {
            t.record(&self.name, (2 * x.rows * self.in_dim * self.out_dim) as u64);
        }
        y
    }

    pub fn backward(&mut self, x: &Matrix, dy: &Matrix, param_grads: bool) -> Matrix {
        if param_grads {
            gemm(self.out_dim, x.rows, self.in_dim, &dy.data, true, &x.data, false, &mut self.weight.grad, 1.0);
            for r in 0..dy.rows {
                for (g, d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
        let mut dx = Matrix::zeros(dy.rows, self.in_dim);
        gemm(dy.rows, self.out_dim, self.in_dim, &dy.data, false, &self.weight.value, false, &mut dx.data, 0.0);
        dx
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `dy` wherever the rectified output was not positive.
pub fn relu_backward(out: &[f64], dy: &mut [f64]) {
    for (g, o) in dy.iter_mut().zip(out) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn global_avg_pool(x: &Tensor4) -> Matrix {
    let plane = (x.h * x.w) as f64;
    let mut out = Matrix::zeros(x.n, x.c);
    for i in 0..x.n {
        let img = x.image(i);
        for ch in 0..x.c {
            let s: f64 = img[ch * x.h * x.w..(ch + 1) * x.h * x.w].iter().sum();
            out.data[i * x.c + ch] = s / plane;
        }
    }
    out
}

pub fn global_avg_pool_backward(dy: &Matrix, h: usize, w: usize) -> Tensor4 {
    let plane = h * w;
    let mut dx = Tensor4::zeros(dy.rows, dy.cols, h, w);
    for i in 0..dy.rows {
        for ch in 0..dy.cols {
            let g = dy.data[i * dy.cols + ch] / plane as f64;
            let off = (i * dy.cols + ch) * plane;
            dx.data[off..off + plane].fill(g);
        }
    }
    dx
}
