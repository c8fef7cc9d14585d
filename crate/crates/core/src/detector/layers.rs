//! Minimal CPU layers with hand-written backward passes.
//!
//! Feature maps are single-image `C × H × W` buffers; a batch is a slice of
//! them. Convolutions lower to one SGEMM per image through im2col.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Fmap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Fmap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Which optimizer treatment a parameter gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Convolution weights: weight decay applies.
    Weight,
    /// Convolution biases: own warm-up learning rate, no decay.
    Bias,
    /// Batch-norm scale/shift: no decay.
    Norm,
}

#[derive(Clone, Debug)]
pub(crate) struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub kind: ParamKind,
}

impl Param {
    fn new(value: Vec<f32>, kind: ParamKind) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad, kind }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out_ch × in_ch·k·k]`
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        bias: Option<f32>,
        weight_gain: f32,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * k * k) as f32;
        let bound = weight_gain * (6.0 / fan_in).sqrt();
        let weight = (0..out_ch * in_ch * k * k)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_ch,
            out_ch,
            k,
            stride,
            pad: k / 2,
            weight: Param::new(weight, ParamKind::Weight),
            bias: bias.map(|b| Param::new(vec![b; out_ch], ParamKind::Bias)),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Fmap) -> (Vec<f32>, usize, usize) {
        let (oh, ow) = self.out_size(x.h, x.w);
        let kk = self.k * self.k;
        let n = oh * ow;
        let mut cols = vec![0.0f32; self.in_ch * kk * n];
        for ci in 0..self.in_ch {
            let src = &x.data[ci * x.plane()..(ci + 1) * x.plane()];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * kk + ky * self.k + kx) * n;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Fmap {
        let kk = self.k * self.k;
        let n = oh * ow;
        let mut dx = Fmap::zeros(self.in_ch, h, w);
        for ci in 0..self.in_ch {
            let dst = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * kk + ky * self.k + kx) * n;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the im2col buffer needed for backward.
    pub fn forward(&self, x: &Fmap) -> (Fmap, Vec<f32>) {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        let (cols, oh, ow) = if self.k == 1 && self.stride == 1 {
            (x.data.clone(), x.h, x.w)
        } else {
            self.im2col(x)
        };
        let n = oh * ow;
        let kdim = self.in_ch * self.k * self.k;
        let mut y = Fmap::zeros(self.out_ch, oh, ow);
        if let Some(b) = &self.bias {
            for (o, &bv) in b.value.iter().enumerate() {
                y.data[o * n..(o + 1) * n].fill(bv);
            }
        }
        let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
        // y[o, p] = Σ_q W[o, q] · cols[q, p]
        unsafe {
            matrixmultiply::sgemm(
                self.out_ch,
                kdim,
                n,
                1.0,
                self.weight.value.as_ptr(),
                kdim as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                beta,
                y.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        (y, cols)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, in_h: usize, in_w: usize, cols: &[f32], dy: &Fmap) -> Fmap {
        let n = dy.plane();
        let kdim = self.in_ch * self.k * self.k;
        // dW[o, q] += Σ_p dy[o, p] · cols[q, p]
        unsafe {
            matrixmultiply::sgemm(
                self.out_ch,
                n,
                kdim,
                1.0,
                dy.data.as_ptr(),
                n as isize,
                1,
                cols.as_ptr(),
                1,
                n as isize,
                1.0,
                self.weight.grad.as_mut_ptr(),
                kdim as isize,
                1,
            );
        }
        if let Some(b) = &mut self.bias {
            for (o, g) in b.grad.iter_mut().enumerate() {
                *g += dy.data[o * n..(o + 1) * n].iter().sum::<f32>();
            }
        }
        // dcols[q, p] = Σ_o W[o, q] · dy[o, p]
        let mut dcols = vec![0.0f32; kdim * n];
        unsafe {
            matrixmultiply::sgemm(
                kdim,
                self.out_ch,
                n,
                1.0,
                self.weight.value.as_ptr(),
                1,
                kdim as isize,
                dy.data.as_ptr(),
                n as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        if self.k == 1 && self.stride == 1 {
            Fmap {
                c: self.in_ch,
                h: in_h,
                w: in_w,
                data: dcols,
            }
        } else {
            self.col2im(&dcols, in_h, in_w, dy.h, dy.w)
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

pub(crate) struct BnCache {
    xhat: Vec<Fmap>,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(ch: usize) -> Self {
        Self {
            gamma: Param::new(vec![1.0; ch], ParamKind::Norm),
            beta: Param::new(vec![0.0; ch], ParamKind::Norm),
            running_mean: vec![0.0; ch],
            running_var: vec![1.0; ch],
            momentum: 0.03,
            eps: 1e-3,
        }
    }

    pub fn forward_eval(&self, x: &mut Fmap) {
        let n = x.plane();
        for c in 0..x.c {
            let scale = self.gamma.value[c] / (self.running_var[c] + self.eps).sqrt();
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            for v in &mut x.data[c * n..(c + 1) * n] {
                *v = *v * scale + shift;
            }
        }
    }

    /// Normalizes with batch statistics in place and updates running stats.
    pub fn forward_train(&mut self, xs: &mut [Fmap]) -> BnCache {
        let ch = xs[0].c;
        let n = xs[0].plane();
        let count = (xs.len() * n) as f64;
        let mut inv_std = vec![0.0f32; ch];
        let mut xhat: Vec<Fmap> = xs.to_vec();
        for c in 0..ch {
            let mut sum = 0.0f64;
            for x in xs.iter() {
                sum += x.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for x in xs.iter() {
                sq += x.data[c * n..(c + 1) * n]
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            let var = sq / count;
            let istd = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[c] = istd as f32;
            let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean as f32;
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * unbiased as f32;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for (x, xh) in xs.iter_mut().zip(xhat.iter_mut()) {
                for (v, h) in x.data[c * n..(c + 1) * n]
                    .iter_mut()
                    .zip(&mut xh.data[c * n..(c + 1) * n])
                {
                    let norm = ((*v as f64 - mean) * istd) as f32;
                    *h = norm;
                    *v = norm * g + b;
                }
            }
        }
        BnCache { xhat, inv_std }
    }

    pub fn backward(&mut self, cache: &BnCache, dys: &mut [Fmap]) {
        let ch = dys[0].c;
        let n = dys[0].plane();
        let count = (dys.len() * n) as f32;
        for c in 0..ch {
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xhat = 0.0f32;
            for (dy, xh) in dys.iter().zip(&cache.xhat) {
                for (&g, &h) in dy.data[c * n..(c + 1) * n]
                    .iter()
                    .zip(&xh.data[c * n..(c + 1) * n])
                {
                    sum_dy += g;
                    sum_dy_xhat += g * h;
                }
            }
            self.beta.grad[c] += sum_dy;
            self.gamma.grad[c] += sum_dy_xhat;
            let k = self.gamma.value[c] * cache.inv_std[c] / count;
            for (dy, xh) in dys.iter_mut().zip(&cache.xhat) {
                for (g, &h) in dy.data[c * n..(c + 1) * n]
                    .iter_mut()
                    .zip(&xh.data[c * n..(c + 1) * n])
                {
                    *g = k * (count * *g - sum_dy - h * sum_dy_xhat);
                }
            }
        }
    }
}

#[inline]
fn sigmoid32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu_inplace(x: &mut Fmap) {
    for v in &mut x.data {
        *v *= sigmoid32(*v);
    }
}

/// `dy ← dy · silu'(pre)`.
pub(crate) fn silu_backward(pre: &Fmap, dy: &mut Fmap) {
    for (g, &x) in dy.data.iter_mut().zip(&pre.data) {
        let s = sigmoid32(x);
        *g *= s * (1.0 + x * (1.0 - s));
    }
}

/// Conv (no bias) → BatchNorm → SiLU.
#[derive(Clone, Debug)]
pub(crate) struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

pub(crate) struct BlockCache {
    in_h: usize,
    in_w: usize,
    cols: Vec<Vec<f32>>,
    bn: BnCache,
    pre_act: Vec<Fmap>,
}

impl ConvBlock {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(in_ch, out_ch, k, stride, None, 1.0, rng),
            bn: BatchNorm2d::new(out_ch),
        }
    }

    pub fn forward_eval(&self, x: &Fmap) -> Fmap {
        let (mut y, _) = self.conv.forward(x);
        self.bn.forward_eval(&mut y);
        silu_inplace(&mut y);
        y
    }

    pub fn forward_train(&mut self, xs: &[Fmap]) -> (Vec<Fmap>, BlockCache) {
        let mut ys = Vec::with_capacity(xs.len());
        let mut cols = Vec::with_capacity(xs.len());
        for x in xs {
            let (y, c) = self.conv.forward(x);
            ys.push(y);
            cols.push(c);
        }
        let bn = self.bn.forward_train(&mut ys);
        let pre_act = ys.clone();
        for y in &mut ys {
            silu_inplace(y);
        }
        let cache = BlockCache {
            in_h: xs[0].h,
            in_w: xs[0].w,
            cols,
            bn,
            pre_act,
        };
        (ys, cache)
    }

    pub fn backward(&mut self, cache: &BlockCache, mut dys: Vec<Fmap>) -> Vec<Fmap> {
        for (dy, pre) in dys.iter_mut().zip(&cache.pre_act) {
            silu_backward(pre, dy);
        }
        self.bn.backward(&cache.bn, &mut dys);
        dys.iter()
            .zip(&cache.cols)
            .map(|(dy, cols)| self.conv.backward(cache.in_h, cache.in_w, cols, dy))
            .collect()
    }

    pub fn params_mut(&mut self) -> [&mut Param; 3] {
        [&mut self.conv.weight, &mut self.bn.gamma, &mut self.bn.beta]
    }

    pub fn params(&self) -> [&Param; 3] {
        [&self.conv.weight, &self.bn.gamma, &self.bn.beta]
    }
}
