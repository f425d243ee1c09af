//! Convolutional building blocks with hand-written forward and backward
//! passes, plus the two backbone assemblies.
//!
//! Everything is `f64` on flat slices. Per-(sample, channel) work is
//! dispatched through [`crate::par`], with all cross-sample reductions kept
//! in a fixed order so results are bit-identical whether or not rayon is
//! active. Each parameterized layer owns its weights, gradient buffers, and
//! SGD momentum buffers; `forward` methods are `&self` so inference can run
//! concurrently over batches.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Error;
use crate::par;
use crate::tensor::Tensor4;

/// Output spatial extent of a convolution/pooling window.
#[inline]
fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// One trainable tensor: value with paired gradient and momentum buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    velocity: Vec<f64>,
}

impl Param {
    fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
        }
    }

    fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Classical SGD step: momentum buffer over (grad + weight_decay * w).
    fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        for i in 0..self.value.len() {
            let g = self.grad[i] + weight_decay * self.value[i];
            self.velocity[i] = momentum * self.velocity[i] + g;
            self.value[i] -= lr * self.velocity[i];
        }
    }
}

/// Named state tensors of a layer tree, for checkpoints. `trainable` is
/// false for batch-norm running statistics.
pub struct StateTensor<'a> {
    pub name: String,
    pub data: &'a [f64],
    pub trainable: bool,
}

pub struct StateTensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution without bias (a batch-norm always follows).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
}

pub struct Conv2dCache {
    input: Tensor4,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // He-normal initialization over fan-in.
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight: Vec<f64> = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| normal.sample(rng))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::new(weight),
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out(h, self.kernel, self.stride, self.pad),
            conv_out(w, self.kernel, self.stride, self.pad),
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.len()
    }

    /// Multiply-accumulate pairs for one forward pass at the given input
    /// extent.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_shape(h, w);
        (self.out_channels * self.in_channels * self.kernel * self.kernel) as u64
            * (oh * ow) as u64
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        let (b, c, h, w) = x.shape();
        debug_assert_eq!(c, self.in_channels);
        let (oh, ow) = self.out_shape(h, w);
        let k = self.kernel;
        let stride = self.stride;
        let pad = self.pad as isize;
        let mut out = Tensor4::zeros(b, self.out_channels, oh, ow);
        let in_c = self.in_channels;
        let weight = &self.weight.value;

        // one task per (sample, out-channel) plane
        par::for_each_chunk_mut(out.data_mut(), oh * ow, |plane_idx, dst| {
            let bi = plane_idx / self.out_channels;
            let oc = plane_idx % self.out_channels;
            for ic in 0..in_c {
                let src = x.plane(bi, ic);
                let w_base = ((oc * in_c) + ic) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[w_base + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let kx = kx as isize;
                        let ky = ky as isize;
                        // valid output rows: 0 <= oy*stride + ky - pad < h
                        let (oy_lo, oy_hi) = valid_range(oh, stride, ky - pad, h);
                        let (ox_lo, ox_hi) = valid_range(ow, stride, kx - pad, w);
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride) as isize + ky - pad;
                            let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * stride) as isize + kx - pad) as usize;
                                dst_row[ox] += wv * src_row[ix];
                            }
                        }
                    }
                }
            }
        });
        out
    }

    pub fn forward_train(&self, x: &Tensor4) -> (Tensor4, Conv2dCache) {
        let out = self.forward(x);
        (out, Conv2dCache { input: x.clone() })
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward(&mut self, cache: &Conv2dCache, grad_out: &Tensor4) -> Tensor4 {
        let x = &cache.input;
        let (b, _, h, w) = x.shape();
        let (_, oc_total, oh, ow) = grad_out.shape();
        debug_assert_eq!(oc_total, self.out_channels);
        let k = self.kernel;
        let stride = self.stride;
        let pad = self.pad as isize;
        let in_c = self.in_channels;

        // input gradient: one task per (sample, in-channel) plane
        let mut grad_in = Tensor4::zeros(b, in_c, h, w);
        let weight = &self.weight.value;
        par::for_each_chunk_mut(grad_in.data_mut(), h * w, |plane_idx, dst| {
            let bi = plane_idx / in_c;
            let ic = plane_idx % in_c;
            for oc in 0..self.out_channels {
                let gsrc = grad_out.plane(bi, oc);
                let w_base = ((oc * in_c) + ic) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[w_base + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let kx = kx as isize;
                        let ky = ky as isize;
                        let (oy_lo, oy_hi) = valid_range(oh, stride, ky - pad, h);
                        let (ox_lo, ox_hi) = valid_range(ow, stride, kx - pad, w);
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * stride) as isize + ky - pad) as usize;
                            let g_row = &gsrc[oy * ow..(oy + 1) * ow];
                            let dst_row = &mut dst[iy * w..(iy + 1) * w];
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * stride) as isize + kx - pad) as usize;
                                dst_row[ix] += wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        });

        // weight gradient: one task per out-channel slice, batch loop inside
        // keeps the reduction order fixed
        let kk = k * k;
        par::for_each_chunk_mut(&mut self.weight.grad, in_c * kk, |oc, wslice| {
            for bi in 0..b {
                let gsrc = grad_out.plane(bi, oc);
                for ic in 0..in_c {
                    let src = x.plane(bi, ic);
                    for ky in 0..k {
                        for kx in 0..k {
                            let kxi = kx as isize;
                            let kyi = ky as isize;
                            let (oy_lo, oy_hi) = valid_range(oh, stride, kyi - pad, h);
                            let (ox_lo, ox_hi) = valid_range(ow, stride, kxi - pad, w);
                            let mut acc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = ((oy * stride) as isize + kyi - pad) as usize;
                                let src_row = &src[iy * w..(iy + 1) * w];
                                let g_row = &gsrc[oy * ow..(oy + 1) * ow];
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * stride) as isize + kxi - pad) as usize;
                                    acc += g_row[ox] * src_row[ix];
                                }
                            }
                            wslice[ic * kk + ky * k + kx] += acc;
                        }
                    }
                }
            }
        });
        grad_in
    }
}

/// Range of output positions `o` with `0 <= o*stride + offset < extent`.
#[inline]
fn valid_range(out_extent: usize, stride: usize, offset: isize, in_extent: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let max_in = in_extent as isize - 1 - offset;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = (max_in as usize / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over (batch, spatial) per channel. Training uses
/// batch statistics (population variance) and updates the running buffers;
/// evaluation uses the running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

pub struct BatchNorm2dCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    shape: (usize, usize, usize, usize),
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward_train(
        &mut self,
        x: &Tensor4,
        update_running: bool,
    ) -> (Tensor4, BatchNorm2dCache) {
        let (b, c, h, w) = x.shape();
        debug_assert_eq!(c, self.channels);
        let n = (b * h * w) as f64;

        // per-channel batch statistics, sequential over (b, spatial)
        let stats: Vec<(f64, f64)> = par::map_indexed(c, |ci| {
            let mut sum = 0.0;
            for bi in 0..b {
                sum += x.plane(bi, ci).iter().sum::<f64>();
            }
            let mean = sum / n;
            let mut var = 0.0;
            for bi in 0..b {
                var += x
                    .plane(bi, ci)
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            (mean, var / n)
        });
        if update_running {
            for ci in 0..c {
                self.running_mean[ci] =
                    (1.0 - BN_MOMENTUM) * self.running_mean[ci] + BN_MOMENTUM * stats[ci].0;
                self.running_var[ci] =
                    (1.0 - BN_MOMENTUM) * self.running_var[ci] + BN_MOMENTUM * stats[ci].1;
            }
        }

        let mut out = Tensor4::zeros(b, c, h, w);
        let mut normalized = vec![0.0; x.len()];
        let inv_std: Vec<f64> = stats.iter().map(|s| 1.0 / (s.1 + BN_EPS).sqrt()).collect();
        let plane = h * w;
        // write normalized and scaled outputs plane by plane
        {
            let norm_chunks: Vec<&mut [f64]> = normalized.chunks_mut(plane).collect();
            let mut out_chunks: Vec<&mut [f64]> = out.data_mut().chunks_mut(plane).collect();
            let gamma = &self.gamma.value;
            let beta = &self.beta.value;
            for (idx, (norm, dst)) in norm_chunks.into_iter().zip(out_chunks.iter_mut()).enumerate()
            {
                let bi = idx / c;
                let ci = idx % c;
                let src = x.plane(bi, ci);
                let (mean, _) = stats[ci];
                let is = inv_std[ci];
                for i in 0..plane {
                    let nv = (src[i] - mean) * is;
                    norm[i] = nv;
                    dst[i] = gamma[ci] * nv + beta[ci];
                }
            }
        }
        (
            out,
            BatchNorm2dCache {
                normalized,
                inv_std,
                shape: (b, c, h, w),
            },
        )
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Tensor4 {
        let (b, c, h, w) = x.shape();
        let mut out = Tensor4::zeros(b, c, h, w);
        let plane = h * w;
        let gamma = &self.gamma.value;
        let beta = &self.beta.value;
        let rm = &self.running_mean;
        let rv = &self.running_var;
        par::for_each_chunk_mut(out.data_mut(), plane, |idx, dst| {
            let bi = idx / c;
            let ci = idx % c;
            let src = x.plane(bi, ci);
            let is = 1.0 / (rv[ci] + BN_EPS).sqrt();
            for i in 0..plane {
                dst[i] = gamma[ci] * (src[i] - rm[ci]) * is + beta[ci];
            }
        });
        out
    }

    pub fn backward(&mut self, cache: &BatchNorm2dCache, grad_out: &Tensor4) -> Tensor4 {
        let (b, c, h, w) = cache.shape;
        let n = (b * h * w) as f64;
        let plane = h * w;

        // per-channel sums of g and g*n, fixed order over batch
        let mut s1 = vec![0.0; c];
        let mut s2 = vec![0.0; c];
        for ci in 0..c {
            let mut a = 0.0;
            let mut bb = 0.0;
            for bi in 0..b {
                let g = grad_out.plane(bi, ci);
                let norm = &cache.normalized[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                for i in 0..plane {
                    a += g[i];
                    bb += g[i] * norm[i];
                }
            }
            s1[ci] = a;
            s2[ci] = bb;
        }
        for ci in 0..c {
            self.gamma.grad[ci] += s2[ci];
            self.beta.grad[ci] += s1[ci];
        }

        let gamma = &self.gamma.value;
        let inv_std = &cache.inv_std;
        let normalized = &cache.normalized;
        let mut grad_in = Tensor4::zeros(b, c, h, w);
        par::for_each_chunk_mut(grad_in.data_mut(), plane, |idx, dst| {
            let bi = idx / c;
            let ci = idx % c;
            let g = grad_out.plane(bi, ci);
            let norm = &normalized[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            let scale = gamma[ci] * inv_std[ci];
            for i in 0..plane {
                dst[i] = scale * (g[i] - s1[ci] / n - norm[i] * s2[ci] / n);
            }
        });
        grad_in
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &mut Tensor4) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward through ReLU given the forward *output* (out > 0 iff in > 0).
pub fn relu_backward(grad: &mut Tensor4, output: &Tensor4) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// MaxPool2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct MaxPool2dCache {
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out(h, self.kernel, self.stride, self.pad),
            conv_out(w, self.kernel, self.stride, self.pad),
        )
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Tensor4) -> (Tensor4, MaxPool2dCache) {
        let (b, c, h, w) = x.shape();
        let (oh, ow) = self.out_shape(h, w);
        let mut out = Tensor4::zeros(b, c, oh, ow);
        let mut argmax = vec![0usize; b * c * oh * ow];
        let pad = self.pad as isize;
        for bi in 0..b {
            for ci in 0..c {
                let src = x.plane(bi, ci);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = src[iy as usize * w + ix as usize];
                                if v > best {
                                    best = v;
                                    best_idx = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        out.set(bi, ci, oy, ox, best);
                        argmax[((bi * c + ci) * oh + oy) * ow + ox] = best_idx;
                    }
                }
            }
        }
        (
            out,
            MaxPool2dCache {
                argmax,
                in_shape: (b, c, h, w),
            },
        )
    }

    pub fn backward(&self, cache: &MaxPool2dCache, grad_out: &Tensor4) -> Tensor4 {
        let (b, c, h, w) = cache.in_shape;
        let (_, _, oh, ow) = grad_out.shape();
        let mut grad_in = Tensor4::zeros(b, c, h, w);
        for bi in 0..b {
            for ci in 0..c {
                let dst = grad_in.plane_mut(bi, ci);
                let g = grad_out.plane(bi, ci);
                for i in 0..oh * ow {
                    dst[cache.argmax[(bi * c + ci) * oh * ow + i]] += g[i];
                }
            }
        }
        grad_in
    }
}

// ---------------------------------------------------------------------------
// Global average pooling
// ---------------------------------------------------------------------------

/// `[B, C, H, W] -> [B, C]` spatial mean.
pub fn global_avg_pool(x: &Tensor4) -> Vec<f64> {
    let (b, c, h, w) = x.shape();
    let n = (h * w) as f64;
    let mut out = vec![0.0; b * c];
    for bi in 0..b {
        for ci in 0..c {
            out[bi * c + ci] = x.plane(bi, ci).iter().sum::<f64>() / n;
        }
    }
    out
}

pub fn global_avg_pool_backward(
    grad_out: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Tensor4 {
    let mut grad_in = Tensor4::zeros(b, c, h, w);
    let scale = 1.0 / (h * w) as f64;
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out[bi * c + ci] * scale;
            for v in grad_in.plane_mut(bi, ci) {
                *v = g;
            }
        }
    }
    grad_in
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map `[B, in] -> [B, out]` with bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
}

pub struct LinearCache {
    input: Vec<f64>,
    batch: usize,
}

impl Linear {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let weight: Vec<f64> = (0..in_features * out_features)
            .map(|_| uniform.sample(rng))
            .collect();
        let bias: Vec<f64> = (0..out_features).map(|_| uniform.sample(rng)).collect();
        Self {
            in_features,
            out_features,
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }

    pub fn macs(&self) -> u64 {
        (self.in_features * self.out_features) as u64
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), batch * self.in_features);
        let mut out = vec![0.0; batch * self.out_features];
        for bi in 0..batch {
            let row = &x[bi * self.in_features..(bi + 1) * self.in_features];
            let dst = &mut out[bi * self.out_features..(bi + 1) * self.out_features];
            for (o, d) in dst.iter_mut().enumerate() {
                let wrow = &self.weight.value[o * self.in_features..(o + 1) * self.in_features];
                let mut acc = self.bias.value[o];
                for i in 0..self.in_features {
                    acc += wrow[i] * row[i];
                }
                *d = acc;
            }
        }
        out
    }

    pub fn forward_train(&self, x: &[f64], batch: usize) -> (Vec<f64>, LinearCache) {
        (
            self.forward(x, batch),
            LinearCache {
                input: x.to_vec(),
                batch,
            },
        )
    }

    pub fn backward(&mut self, cache: &LinearCache, grad_out: &[f64]) -> Vec<f64> {
        let batch = cache.batch;
        let mut grad_in = vec![0.0; batch * self.in_features];
        for bi in 0..batch {
            let g = &grad_out[bi * self.out_features..(bi + 1) * self.out_features];
            let row = &cache.input[bi * self.in_features..(bi + 1) * self.in_features];
            for o in 0..self.out_features {
                let go = g[o];
                self.bias.grad[o] += go;
                let wrow = &self.weight.value[o * self.in_features..(o + 1) * self.in_features];
                let wgrad =
                    &mut self.weight.grad[o * self.in_features..(o + 1) * self.in_features];
                let dst = &mut grad_in[bi * self.in_features..(bi + 1) * self.in_features];
                for i in 0..self.in_features {
                    wgrad[i] += go * row[i];
                    dst[i] += go * wrow[i];
                }
            }
        }
        grad_in
    }
}

// ---------------------------------------------------------------------------
// Residual basic block
// ---------------------------------------------------------------------------

/// conv-bn-relu-conv-bn + identity (or 1x1 conv-bn projection) + relu.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub downsample: Option<(Conv2d, BatchNorm2d)>,
}

pub struct BasicBlockCache {
    conv1: Conv2dCache,
    bn1: BatchNorm2dCache,
    relu1_out: Tensor4,
    conv2: Conv2dCache,
    bn2: BatchNorm2dCache,
    downsample: Option<(Conv2dCache, BatchNorm2dCache)>,
    output: Tensor4,
}

impl BasicBlock {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let downsample = if stride != 1 || in_channels != out_channels {
            Some((
                Conv2d::new(in_channels, out_channels, 1, stride, 0, rng),
                BatchNorm2d::new(out_channels),
            ))
        } else {
            None
        };
        Self {
            conv1: Conv2d::new(in_channels, out_channels, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(out_channels),
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(out_channels),
            downsample,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.conv1.param_count()
            + self.bn1.param_count()
            + self.conv2.param_count()
            + self.bn2.param_count();
        if let Some((c, b)) = &self.downsample {
            n += c.param_count() + b.param_count();
        }
        n
    }

    pub fn macs(&self, h: usize, w: usize) -> (u64, usize, usize) {
        let (oh, ow) = self.conv1.out_shape(h, w);
        let mut macs = self.conv1.macs(h, w) + self.conv2.macs(oh, ow);
        if let Some((c, _)) = &self.downsample {
            macs += c.macs(h, w);
        }
        (macs, oh, ow)
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Tensor4 {
        let mut main = self.bn1.forward_eval(&self.conv1.forward(x));
        relu_forward(&mut main);
        let mut main = self.bn2.forward_eval(&self.conv2.forward(&main));
        let skip = match &self.downsample {
            Some((c, b)) => b.forward_eval(&c.forward(x)),
            None => x.clone(),
        };
        for (m, s) in main.data_mut().iter_mut().zip(skip.data()) {
            *m += s;
        }
        relu_forward(&mut main);
        main
    }

    pub fn forward_train(&mut self, x: &Tensor4, update_running: bool) -> (Tensor4, BasicBlockCache) {
        let (c1_out, conv1) = self.conv1.forward_train(x);
        let (mut r1, bn1) = self.bn1.forward_train(&c1_out, update_running);
        relu_forward(&mut r1);
        let relu1_out = r1.clone();
        let (c2_out, conv2) = self.conv2.forward_train(&r1);
        let (mut main, bn2) = self.bn2.forward_train(&c2_out, update_running);
        let downsample = match &mut self.downsample {
            Some((c, b)) => {
                let (d_out, d_conv) = c.forward_train(x);
                let (skip, d_bn) = b.forward_train(&d_out, update_running);
                for (m, s) in main.data_mut().iter_mut().zip(skip.data()) {
                    *m += s;
                }
                Some((d_conv, d_bn))
            }
            None => {
                for (m, s) in main.data_mut().iter_mut().zip(x.data()) {
                    *m += s;
                }
                None
            }
        };
        relu_forward(&mut main);
        let output = main.clone();
        (
            main,
            BasicBlockCache {
                conv1,
                bn1,
                relu1_out,
                conv2,
                bn2,
                downsample,
                output,
            },
        )
    }

    pub fn backward(&mut self, cache: &BasicBlockCache, grad_out: &Tensor4) -> Tensor4 {
        let mut g = grad_out.clone();
        relu_backward(&mut g, &cache.output);
        // main branch
        let g_bn2 = self.bn2.backward(&cache.bn2, &g);
        let mut g_relu1 = self.conv2.backward(&cache.conv2, &g_bn2);
        relu_backward(&mut g_relu1, &cache.relu1_out);
        let g_bn1 = self.bn1.backward(&cache.bn1, &g_relu1);
        let mut grad_in = self.conv1.backward(&cache.conv1, &g_bn1);
        // skip branch
        match (&mut self.downsample, &cache.downsample) {
            (Some((c, b)), Some((c_cache, b_cache))) => {
                let g_db = b.backward(b_cache, &g);
                let g_dc = c.backward(c_cache, &g_db);
                for (d, s) in grad_in.data_mut().iter_mut().zip(g_dc.data()) {
                    *d += s;
                }
            }
            (None, None) => {
                for (d, s) in grad_in.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
            _ => unreachable!("cache/downsample mismatch"),
        }
        grad_in
    }
}

// ---------------------------------------------------------------------------
// State tensor collection (checkpoints) and optimizer plumbing
// ---------------------------------------------------------------------------

impl Conv2d {
    pub fn state<'a>(&'a self, prefix: &str, out: &mut Vec<StateTensor<'a>>) {
        out.push(StateTensor {
            name: format!("{prefix}.weight"),
            data: &self.weight.value,
            trainable: true,
        });
    }

    pub fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<StateTensorMut<'a>>) {
        out.push(StateTensorMut {
            name: format!("{prefix}.weight"),
            data: &mut self.weight.value,
        });
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        self.weight.sgd_step(lr, momentum, weight_decay);
    }
}

impl BatchNorm2d {
    pub fn state<'a>(&'a self, prefix: &str, out: &mut Vec<StateTensor<'a>>) {
        out.push(StateTensor {
            name: format!("{prefix}.gamma"),
            data: &self.gamma.value,
            trainable: true,
        });
        out.push(StateTensor {
            name: format!("{prefix}.beta"),
            data: &self.beta.value,
            trainable: true,
        });
        out.push(StateTensor {
            name: format!("{prefix}.running_mean"),
            data: &self.running_mean,
            trainable: false,
        });
        out.push(StateTensor {
            name: format!("{prefix}.running_var"),
            data: &self.running_var,
            trainable: false,
        });
    }

    pub fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<StateTensorMut<'a>>) {
        out.push(StateTensorMut {
            name: format!("{prefix}.gamma"),
            data: &mut self.gamma.value,
        });
        out.push(StateTensorMut {
            name: format!("{prefix}.beta"),
            data: &mut self.beta.value,
        });
        out.push(StateTensorMut {
            name: format!("{prefix}.running_mean"),
            data: &mut self.running_mean,
        });
        out.push(StateTensorMut {
            name: format!("{prefix}.running_var"),
            data: &mut self.running_var,
        });
    }

    pub fn zero_grad(&mut self) {
        self.gamma.zero_grad();
        self.beta.zero_grad();
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        self.gamma.sgd_step(lr, momentum, weight_decay);
        self.beta.sgd_step(lr, momentum, weight_decay);
    }
}

impl Linear {
    pub fn state<'a>(&'a self, prefix: &str, out: &mut Vec<StateTensor<'a>>) {
        out.push(StateTensor {
            name: format!("{prefix}.weight"),
            data: &self.weight.value,
            trainable: true,
        });
        out.push(StateTensor {
            name: format!("{prefix}.bias"),
            data: &self.bias.value,
            trainable: true,
        });
    }

    pub fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<StateTensorMut<'a>>) {
        out.push(StateTensorMut {
            name: format!("{prefix}.weight"),
            data: &mut self.weight.value,
        });
        out.push(StateTensorMut {
            name: format!("{prefix}.bias"),
            data: &mut self.bias.value,
        });
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        self.weight.sgd_step(lr, momentum, weight_decay);
        self.bias.sgd_step(lr, momentum, weight_decay);
    }
}

impl BasicBlock {
    pub fn state<'a>(&'a self, prefix: &str, out: &mut Vec<StateTensor<'a>>) {
        self.conv1.state(&format!("{prefix}.conv1"), out);
        self.bn1.state(&format!("{prefix}.bn1"), out);
        self.conv2.state(&format!("{prefix}.conv2"), out);
        self.bn2.state(&format!("{prefix}.bn2"), out);
        if let Some((c, b)) = &self.downsample {
            c.state(&format!("{prefix}.downsample.conv"), out);
            b.state(&format!("{prefix}.downsample.bn"), out);
        }
    }

    pub fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<StateTensorMut<'a>>) {
        self.conv1.state_mut(&format!("{prefix}.conv1"), out);
        self.bn1.state_mut(&format!("{prefix}.bn1"), out);
        self.conv2.state_mut(&format!("{prefix}.conv2"), out);
        self.bn2.state_mut(&format!("{prefix}.bn2"), out);
        if let Some((c, b)) = &mut self.downsample {
            c.state_mut(&format!("{prefix}.downsample.conv"), out);
            b.state_mut(&format!("{prefix}.downsample.bn"), out);
        }
    }

    pub fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.bn1.zero_grad();
        self.conv2.zero_grad();
        self.bn2.zero_grad();
        if let Some((c, b)) = &mut self.downsample {
            c.zero_grad();
            b.zero_grad();
        }
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        self.conv1.sgd_step(lr, momentum, weight_decay);
        self.bn1.sgd_step(lr, momentum, weight_decay);
        self.conv2.sgd_step(lr, momentum, weight_decay);
        self.bn2.sgd_step(lr, momentum, weight_decay);
        if let Some((c, b)) = &mut self.downsample {
            c.sgd_step(lr, momentum, weight_decay);
            b.sgd_step(lr, momentum, weight_decay);
        }
    }
}

// ---------------------------------------------------------------------------
// Backbones
// ---------------------------------------------------------------------------

pub mod backbone;

pub use backbone::{BackboneNet, ResNet18, ToyNet};

// ---------------------------------------------------------------------------

/// Shape-preserving finite check used by training diagnostics.
pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Unsupported layer kind error for the complexity accounting.
pub fn unsupported_layer(name: &str) -> Error {
    Error::InvalidArgument(format!("unsupported layer type for accounting: {name}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor<R: Rng>(b: usize, c: usize, h: usize, w: usize, rng: &mut R) -> Tensor4 {
        let data: Vec<f64> = (0..b * c * h * w).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor4::from_vec(data, b, c, h, w).unwrap()
    }

    /// Brute-force convolution oracle: direct five-loop definition.
    fn conv_oracle(conv: &Conv2d, x: &Tensor4) -> Tensor4 {
        let (b, _, h, w) = x.shape();
        let (oh, ow) = conv.out_shape(h, w);
        let mut out = Tensor4::zeros(b, conv.out_channels, oh, ow);
        for bi in 0..b {
            for oc in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..conv.in_channels {
                            for ky in 0..conv.kernel {
                                for kx in 0..conv.kernel {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((oc * conv.in_channels + ic)
                                        * conv.kernel
                                        + ky)
                                        * conv.kernel
                                        + kx];
                                    acc += wv * x.get(bi, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.set(bi, oc, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 3, 7), (2, 0, 1)] {
            let conv = Conv2d::new(2, 3, k, stride, pad, &mut rng);
            let x = rand_tensor(2, 2, 9, 8, &mut rng);
            let fast = conv.forward(&x);
            let slow = conv_oracle(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} (k={k} s={stride} p={pad})");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(2, 2, 3, 2, 1, &mut rng);
        let x = rand_tensor(2, 2, 5, 5, &mut rng);
        let loss_w: Vec<f64> = {
            let (oh, ow) = conv.out_shape(5, 5);
            (0..2 * 2 * oh * ow).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let loss = |conv: &Conv2d, x: &Tensor4| -> f64 {
            conv.forward(x)
                .data()
                .iter()
                .zip(&loss_w)
                .map(|(o, w)| o * w)
                .sum()
        };
        let (out, cache) = conv.forward_train(&x);
        let g_out = Tensor4::from_vec(loss_w.clone(), out.shape().0, out.shape().1, out.shape().2, out.shape().3)
            .unwrap();
        conv.zero_grad();
        let g_in = conv.backward(&cache, &g_out);

        let h = 1e-6;
        // input gradient
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((g_in.data()[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        // weight gradient
        for i in (0..conv.weight.value.len()).step_by(5) {
            let orig = conv.weight.value[i];
            conv.weight.value[i] = orig + h;
            let lp = loss(&conv, &x);
            conv.weight.value[i] = orig - h;
            let lm = loss(&conv, &x);
            conv.weight.value[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((conv.weight.grad[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn batchnorm_training_standardizes_channels() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut bn = BatchNorm2d::new(3);
        let x = rand_tensor(4, 3, 5, 5, &mut rng);
        let (out, _) = bn.forward_train(&x, true);
        for ci in 0..3 {
            let mut sum = 0.0;
            let mut count = 0.0;
            for bi in 0..4 {
                sum += out.plane(bi, ci).iter().sum::<f64>();
                count += 25.0;
            }
            assert!((sum / count).abs() < 1e-10);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new(2);
        let x = rand_tensor(3, 2, 4, 4, &mut rng);
        let (train_out, _) = bn.forward_train(&x, true);
        let eval_out = bn.forward_eval(&x);
        let differ = train_out
            .data()
            .iter()
            .zip(eval_out.data())
            .any(|(a, b)| (a - b).abs() > 1e-6);
        assert!(differ, "one running update must not equal batch stats");
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        let x = rand_tensor(3, 2, 2, 3, &mut rng);
        let loss_w: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |bn: &mut BatchNorm2d, x: &Tensor4| -> f64 {
            bn.forward_train(x, false)
                .0
                .data()
                .iter()
                .zip(&loss_w)
                .map(|(o, w)| o * w)
                .sum()
        };
        let (_, cache) = bn.forward_train(&x, false);
        let g_out = Tensor4::from_vec(loss_w.clone(), 3, 2, 2, 3).unwrap();
        bn.zero_grad();
        let g_in = bn.backward(&cache, &g_out);

        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * h);
            assert!(
                (g_in.data()[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                "elem {i}: {} vs {fd}",
                g_in.data()[i]
            );
        }
        for ci in 0..2 {
            let orig = bn.gamma.value[ci];
            bn.gamma.value[ci] = orig + h;
            let lp = loss(&mut bn, &x);
            bn.gamma.value[ci] = orig - h;
            let lm = loss(&mut bn, &x);
            bn.gamma.value[ci] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((bn.gamma.grad[ci] - fd).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn maxpool_forward_and_backward() {
        let pool = MaxPool2d {
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = rand_tensor(2, 2, 6, 6, &mut rng);
        let (out, cache) = pool.forward_train(&x);
        assert_eq!(out.shape(), (2, 2, 3, 3));
        // every output equals the max over its window
        for bi in 0..2 {
            for ci in 0..2 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && iy < 6 && ix < 6 {
                                    best = best.max(x.get(bi, ci, iy as usize, ix as usize));
                                }
                            }
                        }
                        assert_eq!(out.get(bi, ci, oy, ox), best);
                    }
                }
            }
        }
        // backward routes each gradient to the argmax position
        let g = Tensor4::from_vec(vec![1.0; 2 * 2 * 9], 2, 2, 3, 3).unwrap();
        let gi = pool.backward(&cache, &g);
        assert_eq!(gi.data().iter().sum::<f64>(), 36.0);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut lin = Linear::new(4, 3, &mut rng);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss_w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |lin: &Linear, x: &[f64]| -> f64 {
            lin.forward(x, 2).iter().zip(&loss_w).map(|(o, w)| o * w).sum()
        };
        let (_, cache) = lin.forward_train(&x, 2);
        lin.zero_grad();
        let g_in = lin.backward(&cache, &loss_w);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h);
            assert!((g_in[i] - fd).abs() < 1e-7 * (1.0 + fd.abs()));
        }
        for i in 0..lin.weight.value.len() {
            let orig = lin.weight.value[i];
            lin.weight.value[i] = orig + h;
            let lp = loss(&lin, &x);
            lin.weight.value[i] = orig - h;
            let lm = loss(&lin, &x);
            lin.weight.value[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((lin.weight.grad[i] - fd).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn global_pool_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = rand_tensor(2, 3, 4, 4, &mut rng);
        let pooled = global_avg_pool(&x);
        assert_eq!(pooled.len(), 6);
        let expected = x.plane(1, 2).iter().sum::<f64>() / 16.0;
        assert!((pooled[5] - expected).abs() < 1e-12);
        let back = global_avg_pool_backward(&pooled, 2, 3, 4, 4);
        assert!((back.get(1, 2, 0, 0) - expected / 16.0).abs() < 1e-12);
    }

    #[test]
    fn basic_block_gradcheck() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut block = BasicBlock::new(2, 3, 2, &mut rng);
        let x = rand_tensor(2, 2, 4, 4, &mut rng);
        let (out, cache) = block.forward_train(&x, false);
        let loss_w: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |block: &mut BasicBlock, x: &Tensor4| -> f64 {
            block
                .forward_train(x, false)
                .0
                .data()
                .iter()
                .zip(&loss_w)
                .map(|(o, w)| o * w)
                .sum()
        };
        let g_out = {
            let s = out.shape();
            Tensor4::from_vec(loss_w.clone(), s.0, s.1, s.2, s.3).unwrap()
        };
        block.zero_grad();
        let g_in = block.backward(&cache, &g_out);
        let h = 1e-6;
        for i in (0..x.len()).step_by(5) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&mut block, &xp) - loss(&mut block, &xm)) / (2.0 * h);
            assert!(
                (g_in.data()[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                "elem {i}: {} vs {fd}",
                g_in.data()[i]
            );
        }
        // conv1 weight grads
        for i in (0..block.conv1.weight.value.len()).step_by(11) {
            let orig = block.conv1.weight.value[i];
            block.conv1.weight.value[i] = orig + h;
            let lp = loss(&mut block, &x);
            block.conv1.weight.value[i] = orig - h;
            let lm = loss(&mut block, &x);
            block.conv1.weight.value[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((block.conv1.weight.grad[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn valid_range_bounds() {
        // stride 2, offset -1 (pad 1, k index 0), input extent 5
        let (lo, hi) = valid_range(3, 2, -1, 5);
        assert_eq!((lo, hi), (1, 3));
        // offset 1 beyond the input edge
        let (lo, hi) = valid_range(4, 2, 1, 5);
        assert_eq!((lo, hi), (0, 2));
        let (lo, hi) = valid_range(4, 1, 10, 5);
        assert_eq!((lo, hi), (0, 0));
    }
}
