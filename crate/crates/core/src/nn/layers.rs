//! Layer implementations. Every layer caches what its backward pass needs
//! during a training-mode forward, accumulates parameter gradients, and
//! returns the gradient with respect to its input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::NnError;

/// Declarative description of one layer. Input channel counts are taken
/// from the preceding layer's output shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    ConvTranspose2d { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Dense { units: usize },
    Relu,
    LeakyRelu { alpha: f64 },
    Sigmoid,
    Tanh,
    #[serde(rename = "maxpool2")]
    MaxPool2,
    GlobalAvgPool,
    #[serde(rename = "batchnorm")]
    BatchNorm { momentum: f64, eps: f64 },
    Dropout { p: f64 },
    Softmax,
    Reshape { dims: Vec<usize> },
}

impl LayerSpec {
    pub fn conv3x3(out_channels: usize) -> Self {
        LayerSpec::Conv2d { out_channels, kernel: 3, stride: 1, padding: 1 }
    }

    pub fn batchnorm() -> Self {
        LayerSpec::BatchNorm { momentum: 0.1, eps: 1e-5 }
    }

    /// Stable tag written into weight files.
    pub fn tag(&self) -> u8 {
        match self {
            LayerSpec::Conv2d { .. } => 1,
            LayerSpec::ConvTranspose2d { .. } => 2,
            LayerSpec::Dense { .. } => 3,
            LayerSpec::Relu => 4,
            LayerSpec::LeakyRelu { .. } => 5,
            LayerSpec::Sigmoid => 6,
            LayerSpec::Tanh => 7,
            LayerSpec::MaxPool2 => 8,
            LayerSpec::GlobalAvgPool => 9,
            LayerSpec::BatchNorm { .. } => 10,
            LayerSpec::Dropout { .. } => 11,
            LayerSpec::Softmax => 12,
            LayerSpec::Reshape { .. } => 13,
        }
    }

    /// Instantiates the layer for per-sample input dims `input`, returning it
    /// with its per-sample output dims.
    pub(crate) fn build<T: Real>(
        &self,
        input: &[usize],
        seed: u64,
    ) -> Result<(Box<dyn Module<T>>, Vec<usize>), NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bad = |what: &str| NnError::Shape(format!("{what}: incompatible input {input:?} for {self:?}"));
        Ok(match *self {
            LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
                let &[c, h, w] = input else { return Err(bad("conv2d needs [C,H,W]")) };
                if kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(bad("conv2d geometry"));
                }
                let ho = (h + 2 * padding - kernel) / stride + 1;
                let wo = (w + 2 * padding - kernel) / stride + 1;
                let geom = ConvGeom { channels: c, kernel, stride, padding };
                let fan_in = c * kernel * kernel;
                let weight = kaiming(&[out_channels, fan_in], fan_in, &mut rng);
                let layer = Conv2d {
                    geom,
                    out_channels,
                    in_hw: (h, w),
                    out_hw: (ho, wo),
                    grad_weight: Tensor::zeros(weight.dims()),
                    weight,
                    bias: Tensor::zeros(&[out_channels]),
                    grad_bias: Tensor::zeros(&[out_channels]),
                    input: None,
                };
                (Box::new(layer), vec![out_channels, ho, wo])
            }
            LayerSpec::ConvTranspose2d { out_channels, kernel, stride, padding } => {
                let &[c, h, w] = input else { return Err(bad("conv_transpose2d needs [C,H,W]")) };
                if kernel == 0 || stride == 0 || (h - 1) * stride + kernel < 2 * padding + 1 {
                    return Err(bad("conv_transpose2d geometry"));
                }
                let ho = (h - 1) * stride + kernel - 2 * padding;
                let wo = (w - 1) * stride + kernel - 2 * padding;
                let geom = ConvGeom { channels: out_channels, kernel, stride, padding };
                let fan_in = c * kernel * kernel;
                let weight = kaiming(&[c, out_channels * kernel * kernel], fan_in, &mut rng);
                let layer = ConvTranspose2d {
                    geom,
                    in_channels: c,
                    in_hw: (h, w),
                    out_hw: (ho, wo),
                    grad_weight: Tensor::zeros(weight.dims()),
                    weight,
                    bias: Tensor::zeros(&[out_channels]),
                    grad_bias: Tensor::zeros(&[out_channels]),
                    input: None,
                };
                (Box::new(layer), vec![out_channels, ho, wo])
            }
            LayerSpec::Dense { units } => {
                let fan_in: usize = input.iter().product();
                if units == 0 || fan_in == 0 {
                    return Err(bad("dense"));
                }
                let weight = kaiming(&[units, fan_in], fan_in, &mut rng);
                let layer = Dense {
                    units,
                    fan_in,
                    grad_weight: Tensor::zeros(weight.dims()),
                    weight,
                    bias: Tensor::zeros(&[units]),
                    grad_bias: Tensor::zeros(&[units]),
                    input: None,
                };
                (Box::new(layer), vec![units])
            }
            LayerSpec::Relu => (Box::new(Activation::new(ActKind::Relu)), input.to_vec()),
            LayerSpec::LeakyRelu { alpha } => (Box::new(Activation::new(ActKind::Leaky(alpha))), input.to_vec()),
            LayerSpec::Sigmoid => (Box::new(Activation::new(ActKind::Sigmoid)), input.to_vec()),
            LayerSpec::Tanh => (Box::new(Activation::new(ActKind::Tanh)), input.to_vec()),
            LayerSpec::MaxPool2 => {
                let &[c, h, w] = input else { return Err(bad("maxpool2 needs [C,H,W]")) };
                if h < 2 || w < 2 {
                    return Err(bad("maxpool2 too small"));
                }
                (Box::new(MaxPool2 { argmax: None, in_len: 0 }), vec![c, h / 2, w / 2])
            }
            LayerSpec::GlobalAvgPool => {
                let &[c, _, _] = input else { return Err(bad("global_avg_pool needs [C,H,W]")) };
                (Box::new(GlobalAvgPool { in_dims: None }), vec![c])
            }
            LayerSpec::BatchNorm { momentum, eps } => {
                let c = *input.first().ok_or_else(|| bad("batchnorm"))?;
                let mut running_var = Tensor::zeros(&[c]);
                running_var.fill(T::one());
                let mut gamma = Tensor::zeros(&[c]);
                gamma.fill(T::one());
                let layer = BatchNorm {
                    channels: c,
                    momentum,
                    eps,
                    gamma,
                    beta: Tensor::zeros(&[c]),
                    grad_gamma: Tensor::zeros(&[c]),
                    grad_beta: Tensor::zeros(&[c]),
                    running_mean: Tensor::zeros(&[c]),
                    running_var,
                    cache: None,
                };
                (Box::new(layer), input.to_vec())
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(bad("dropout p must be in [0,1)"));
                }
                (Box::new(Dropout { p, rng, mask: None, frozen: false, active: false }), input.to_vec())
            }
            LayerSpec::Softmax => (Box::new(Softmax { output: None, in_dims: Vec::new() }), vec![input.iter().product()]),
            LayerSpec::Reshape { ref dims } => {
                if dims.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(bad("reshape element count"));
                }
                (Box::new(Reshape { dims: dims.clone(), in_dims: input.to_vec() }), dims.clone())
            }
        })
    }
}

/// Kaiming-uniform initialization over `fan_in`.
fn kaiming<T: Real>(dims: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(dims, data).expect("dims match")
}

/// A trainable tensor with its gradient accumulator.
pub struct Param<'a, T> {
    pub value: &'a mut Tensor<T>,
    pub grad: &'a mut Tensor<T>,
}

pub(crate) trait Module<T: Real>: Send {
    fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>, NnError>;

    /// With `input_grad == false` the layer only accumulates parameter
    /// gradients and may return an empty tensor.
    fn backward(&mut self, grad: Tensor<T>, input_grad: bool) -> Result<Tensor<T>, NnError>;

    fn params(&mut self) -> Vec<Param<'_, T>> {
        Vec::new()
    }

    /// Parameters plus persistent buffers, in a fixed order.
    fn state(&self) -> Vec<&Tensor<T>> {
        Vec::new()
    }

    fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Vec::new()
    }

    fn set_frozen_noise(&mut self, _frozen: bool) {}

    /// Appends which side of each kink (relu sign, max winner) the last
    /// training forward landed on.
    fn activation_pattern(&self, _out: &mut Vec<u8>) {}
}

fn missing_cache() -> NnError {
    NnError::BackwardWithoutForward
}

fn expect_batch<T: Real>(x: &Tensor<T>, per_sample: usize, what: &str) -> Result<usize, NnError> {
    let n = x.batch();
    if n == 0 || x.sample_len() != per_sample {
        return Err(NnError::Shape(format!("{what}: got {:?}, want [N, {per_sample} elements]", x.dims())));
    }
    Ok(n)
}

// ---------------------------------------------------------------------------
// Convolutions

#[derive(Clone, Copy)]
struct ConvGeom {
    /// Channels of the spatial "image" side of im2col.
    channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Unfolds `img` ([channels, h, w]) into `cols` ([rows, ho*wo]).
    fn im2col<T: Real>(&self, img: &[T], (h, w): (usize, usize), (ho, wo): (usize, usize), cols: &mut [T]) {
        let k = self.kernel;
        let plane = ho * wo;
        for c in 0..self.channels {
            let src = &img[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy as usize >= h {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        if self.stride == 1 {
                            let (lo, hi) = valid_span(kj, self.padding, w, wo);
                            out_row[..lo].fill(T::zero());
                            out_row[hi..].fill(T::zero());
                            if lo < hi {
                                let s0 = lo + kj - self.padding;
                                out_row[lo..hi].copy_from_slice(&src_row[s0..s0 + hi - lo]);
                            }
                        } else {
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                *v = if ix >= 0 && (ix as usize) < w { src_row[ix as usize] } else { T::zero() };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatters `cols` back, accumulating into `img`.
    fn col2im<T: Real>(&self, cols: &[T], (h, w): (usize, usize), (ho, wo): (usize, usize), img: &mut [T]) {
        let k = self.kernel;
        let plane = ho * wo;
        for c in 0..self.channels {
            let dst = &mut img[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        if self.stride == 1 {
                            let (lo, hi) = valid_span(kj, self.padding, w, wo);
                            if lo < hi {
                                let d0 = lo + kj - self.padding;
                                let seg = &src[oy * wo + lo..oy * wo + hi];
                                dst_row[d0..d0 + hi - lo].iter_mut().zip(seg).for_each(|(d, &v)| *d += v);
                            }
                            continue;
                        }
                        for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Sum of `f` over `xs` in f64, accumulated in eight interleaved lanes.
#[inline(always)]
fn lane_sum<T: Real>(xs: &[T], f: impl Fn(T) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for j in 0..8 {
            acc[j] += f(c[j]);
        }
    }
    acc.iter().sum::<f64>() + rest.iter().map(|&v| f(v)).sum::<f64>()
}

/// Dot product in f64, accumulated in eight interleaved lanes.
#[inline(always)]
fn lane_dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let rest: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x.f64() * y.f64()).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j].f64() * y[j].f64();
        }
    }
    acc.iter().sum::<f64>() + rest
}

/// Output columns `[lo, hi)` whose stride-1 source column `ox + kj - pad`
/// falls inside `0..w`.
fn valid_span(kj: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).min(wo);
    let hi = (w + pad).saturating_sub(kj).min(wo).max(lo);
    (lo, hi)
}

struct Conv2d<T> {
    geom: ConvGeom,
    out_channels: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    weight: Tensor<T>,
    bias: Tensor<T>,
    grad_weight: Tensor<T>,
    grad_bias: Tensor<T>,
    /// Input dims and the unfolded columns of every sample.
    input: Option<(Vec<usize>, Vec<T>)>,
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let in_len = self.geom.channels * self.in_hw.0 * self.in_hw.1;
        let n = expect_batch(&x, in_len, "conv2d")?;
        let plane = self.out_hw.0 * self.out_hw.1;
        let rows = self.geom.rows();
        let oc = self.out_channels;
        let mut out = Tensor::zeros(&[n, oc, self.out_hw.0, self.out_hw.1]);
        let col_len = rows * plane;
        let mut cols = match self.input.take() {
            Some((_, mut buf)) if train => {
                buf.resize(col_len * n, T::zero());
                buf
            }
            _ => vec![T::zero(); col_len * if train { n } else { 1 }],
        };
        for (i, (xs, ys)) in x.data().chunks_exact(in_len).zip(out.data_mut().chunks_exact_mut(oc * plane)).enumerate() {
            let c = if train { &mut cols[i * col_len..(i + 1) * col_len] } else { &mut cols[..] };
            self.geom.im2col(xs, self.in_hw, self.out_hw, c);
            T::gemm(oc, rows, plane, T::one(), self.weight.data(), (rows as isize, 1), c, (plane as isize, 1), T::zero(), ys, (plane as isize, 1));
            for (o, chan) in ys.chunks_exact_mut(plane).enumerate() {
                let b = self.bias.data()[o];
                chan.iter_mut().for_each(|v| *v += b);
            }
        }
        self.input = train.then(|| (x.dims().to_vec(), cols));
        Ok(out)
    }

    fn backward(&mut self, grad: Tensor<T>, input_grad: bool) -> Result<Tensor<T>, NnError> {
        let (dims, all_cols) = self.input.as_ref().ok_or_else(missing_cache)?;
        let in_len: usize = dims[1..].iter().product();
        let plane = self.out_hw.0 * self.out_hw.1;
        let rows = self.geom.rows();
        let oc = self.out_channels;
        if grad.dims() != [dims[0], oc, self.out_hw.0, self.out_hw.1] {
            return Err(NnError::Shape(format!("conv2d backward got {:?}", grad.dims())));
        }
        let mut dx = if input_grad { Tensor::zeros(dims) } else { Tensor::zeros(&[0]) };
        let mut dcols = if input_grad { vec![T::zero(); rows * plane] } else { Vec::new() };
        for (i, (cols, gs)) in all_cols.chunks_exact(rows * plane).zip(grad.data().chunks_exact(oc * plane)).enumerate() {
            T::gemm(oc, plane, rows, T::one(), gs, (plane as isize, 1), cols, (1, plane as isize), T::one(), self.grad_weight.data_mut(), (rows as isize, 1));
            for (o, chan) in gs.chunks_exact(plane).enumerate() {
                self.grad_bias.data_mut()[o] += chan.iter().copied().sum();
            }
            if input_grad {
                T::gemm(rows, oc, plane, T::one(), self.weight.data(), (1, rows as isize), gs, (plane as isize, 1), T::zero(), &mut dcols, (plane as isize, 1));
                self.geom.col2im(&dcols, self.in_hw, self.out_hw, &mut dx.data_mut()[i * in_len..(i + 1) * in_len]);
            }
        }
        Ok(dx)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        vec![
            Param { value: &mut self.weight, grad: &mut self.grad_weight },
            Param { value: &mut self.bias, grad: &mut self.grad_bias },
        ]
    }

    fn state(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

struct ConvTranspose2d<T> {
    /// Geometry of the equivalent forward convolution (output side is the "image").
    geom: ConvGeom,
    in_channels: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    /// [in_channels, out_channels * k * k]
    weight: Tensor<T>,
    bias: Tensor<T>,
    grad_weight: Tensor<T>,
    grad_bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Module<T> for ConvTranspose2d<T> {
    fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let plane_in = self.in_hw.0 * self.in_hw.1;
        let in_len = self.in_channels * plane_in;
        let n = expect_batch(&x, in_len, "conv_transpose2d")?;
        let rows = self.geom.rows();
        let oc = self.geom.channels;
        let out_len = oc * self.out_hw.0 * self.out_hw.1;
        let mut out = Tensor::zeros(&[n, oc, self.out_hw.0, self.out_hw.1]);
        let mut cols = vec![T::zero(); rows * plane_in];
        for (xs, ys) in x.data().chunks_exact(in_len).zip(out.data_mut().chunks_exact_mut(out_len)) {
            T::gemm(rows, self.in_channels, plane_in, T::one(), self.weight.data(), (1, rows as isize), xs, (plane_in as isize, 1), T::zero(), &mut cols, (plane_in as isize, 1));
            self.geom.col2im(&cols, self.out_hw, self.in_hw, ys);
            let plane_out = self.out_hw.0 * self.out_hw.1;
            for (o, chan) in ys.chunks_exact_mut(plane_out).enumerate() {
                let b = self.bias.data()[o];
                chan.iter_mut().for_each(|v| *v += b);
            }
        }
        self.input = train.then_some(x);
        Ok(out)
    }

    fn backward(&mut self, grad: Tensor<T>, _input_grad: bool) -> Result<Tensor<T>, NnError> {
        let x = self.input.as_ref().ok_or_else(missing_cache)?;
        let plane_in = self.in_hw.0 * self.in_hw.1;
        let in_len = self.in_channels * plane_in;
        let rows = self.geom.rows();
        let oc = self.geom.channels;
        let plane_out = self.out_hw.0 * self.out_hw.1;
        if grad.dims() != [x.batch(), oc, self.out_hw.0, self.out_hw.1] {
            return Err(NnError::Shape(format!("conv_transpose2d backward got {:?}", grad.dims())));
        }
        let mut dx = Tensor::zeros(x.dims());
        let mut dcols = vec![T::zero(); rows * plane_in];
        for ((xs, gs), dxs) in x
            .data()
            .chunks_exact(in_len)
            .zip(grad.data().chunks_exact(oc * plane_out))
            .zip(dx.data_mut().chunks_exact_mut(in_len))
        {
            self.geom.im2col(gs, self.out_hw, self.in_hw, &mut dcols);
            T::gemm(self.in_channels, rows, plane_in, T::one(), self.weight.data(), (rows as isize, 1), &dcols, (plane_in as isize, 1), T::zero(), dxs, (plane_in as isize, 1));
            T::gemm(self.in_channels, plane_in, rows, T::one(), xs, (plane_in as isize, 1), &dcols, (1, plane_in as isize), T::one(), self.grad_weight.data_mut(), (rows as isize, 1));
            for (o, chan) in gs.chunks_exact(plane_out).enumerate() {
                self.grad_bias.data_mut()[o] += chan.iter().copied().sum();
            }
        }
        Ok(dx)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        vec![
            Param { value: &mut self.weight, grad: &mut self.grad_weight },
            Param { value: &mut self.bias, grad: &mut self.grad_bias },
        ]
    }

    fn state(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Dense

struct Dense<T> {
    units: usize,
    fan_in: usize,
    /// [units, fan_in]
    weight: Tensor<T>,
    bias: Tensor<T>,
    grad_weight: Tensor<T>,
    grad_bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Module<T> for Dense<T> {
    fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let n = expect_batch(&x, self.fan_in, "dense")?;
        let (u, f) = (self.units, self.fan_in);
        let mut out = Tensor::zeros(&[n, u]);
        T::gemm(n, f, u, T::one(), x.data(), (f as isize, 1), self.weight.data(), (1, f as isize), T::zero(), out.data_mut(), (u as isize, 1));
        for row in out.data_mut().chunks_exact_mut(u) {
            row.iter_mut().zip(self.bias.data()).for_each(|(v, &b)| *v += b);
        }
        self.input = train.then_some(x);
        Ok(out)
    }

    fn backward(&mut self, grad: Tensor<T>, input_grad: bool) -> Result<Tensor<T>, NnError> {
        let x = self.input.as_ref().ok_or_else(missing_cache)?;
        let n = x.batch();
        let (u, f) = (self.units, self.fan_in);
        if grad.dims() != [n, u] {
            return Err(NnError::Shape(format!("dense backward got {:?}", grad.dims())));
        }
        T::gemm(u, n, f, T::one(), grad.data(), (1, u as isize), x.data(), (f as isize, 1), T::one(), self.grad_weight.data_mut(), (f as isize, 1));
        for row in grad.data().chunks_exact(u) {
            self.grad_bias.data_mut().iter_mut().zip(row).for_each(|(g, &v)| *g += v);
        }
        if !input_grad {
            return Ok(Tensor::zeros(&[0]));
        }
        let mut dx = Tensor::zeros(x.dims());
        T::gemm(n, u, f, T::one(), grad.data(), (u as isize, 1), self.weight.data(), (f as isize, 1), T::zero(), dx.data_mut(), (f as isize, 1));
        Ok(dx)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        vec![
            Param { value: &mut self.weight, grad: &mut self.grad_weight },
            Param { value: &mut self.bias, grad: &mut self.grad_bias },
        ]
    }

    fn state(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Element-wise activations

#[derive(Clone, Copy)]
enum ActKind {
    Relu,
    Leaky(f64),
    Sigmoid,
    Tanh,
}

struct Activation<T> {
    kind: ActKind,
    /// Output for sigmoid/tanh.
    cache: Option<Tensor<T>>,
    /// Positive-input flags for the relu variants.
    positive: Option<(Vec<bool>, Vec<usize>)>,
}

impl<T: Real> Activation<T> {
    fn new(kind: ActKind) -> Self {
        Self { kind, cache: None, positive: None }
    }
}

impl<T: Real> Module<T> for Activation<T> {
    fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let mut out = x;
        self.cache = None;
        self.positive = None;
        match self.kind {
            ActKind::Relu | ActKind::Leaky(_) => {
                let a = match self.kind {
                    ActKind::Leaky(a) => T::of(a),
                    _ => T::zero(),
                };
                let rectify = |v: &mut T| {
                    let p = *v > T::zero();
                    *v = if p { *v } else { *v * a };
                    p
                };
                if train {
                    let dims = out.dims().to_vec();
                    self.positive = Some((out.data_mut().iter_mut().map(rectify).collect(), dims));
                } else {
                    out.data_mut().iter_mut().for_each(|v| {
                        rectify(v);
                    });
                }
            }
            ActKind::Sigmoid => out.data_mut().iter_mut().for_each(|v| *v = T::one() / (T::one() + (-*v).exp())),
            ActKind::Tanh => out.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
        }
        if train && matches!(self.kind, ActKind::Sigmoid | ActKind::Tanh) {
            self.cache = Some(out.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, grad: Tensor<T>, _input_grad: bool) -> Result<Tensor<T>, NnError> {
        let mut dx = grad;
        let bad_shape = |dims: &[usize]| NnError::Shape(format!("activation backward got {dims:?}"));
        match self.kind {
            ActKind::Relu | ActKind::Leaky(_) => {
                let (pos, dims) = self.positive.as_ref().ok_or_else(missing_cache)?;
                if dims[..] != *dx.dims() {
                    return Err(bad_shape(dx.dims()));
                }
                let a = match self.kind {
                    ActKind::Leaky(a) => T::of(a),
                    _ => T::zero(),
                };
                dx.data_mut().iter_mut().zip(pos).for_each(|(g, &p)| *g = if p { *g } else { *g * a });
            }
            ActKind::Sigmoid | ActKind::Tanh => {
                let c = self.cache.as_ref().ok_or_else(missing_cache)?;
                if c.dims() != dx.dims() {
                    return Err(bad_shape(dx.dims()));
                }
                let pairs = dx.data_mut().iter_mut().zip(c.data());
                if matches!(self.kind, ActKind::Sigmoid) {
                    pairs.for_each(|(g, &y)| *g = *g * y * (T::one() - y));
                } else {
                    pairs.for_each(|(g, &y)| *g = *g * (T::one() - y * y));
                }
            }
        }
        Ok(dx)
    }

    fn activation_pattern(&self, out: &mut Vec<u8>) {
        if let Some((pos, _)) = &self.positive {
            out.extend(pos.iter().map(|&p| p as u8));
        }
    }
}

// ---------------------------------------------------------------------------
// Pooling

struct MaxPool2 {
    /// Winning offset (0..4) inside each 2x2 window, plus input dims.
    argmax: Option<(Vec<u8>, Vec<usize>)>,
    in_len: usize,
}

impl<T: Real> Module<T> for MaxPool2 {
    fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let &[n, c, h, w] = x.dims() else {
            return Err(NnError::Shape(format!("maxpool2 needs [N,C,H,W], got {:?}", x.dims())));
        };
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut idx = Vec::with_capacity(if train { n * c * ho * wo } else { 0 });
        let src = x.data();
        for (plane, dst) in out.data_mut().chunks_exact_mut(ho * wo).enumerate() {
            let base = plane * h * w;
            for (oy, drow) in dst.chunks_exact_mut(wo).enumerate() {
                let r0 = &src[base + 2 * oy * w..base + 2 * oy * w + w];
                let r1 = &src[base + (2 * oy + 1) * w..base + (2 * oy + 2) * w];
                for (ox, d) in drow.iter_mut().enumerate() {
                    let cands = [r0[2 * ox], r0[2 * ox + 1], r1[2 * ox], r1[2 * ox + 1]];
                    let mut best = 0u8;
                    let mut best_v = cands[0];
                    for (k, &v) in cands.iter().enumerate().skip(1) {
                        if v > best_v {
                            best = k as u8;
                            best_v = v;
                        }
                    }
                    *d = best_v;
                    if train {
                        idx.push(best);
                    }
                }
            }
        }
        self.in_len = x.len();
        self.argmax = train.then(|| (idx, x.dims().to_vec()));
        Ok(out)
    }

    fn backward(&mut self, grad: Tensor<T>, _input_grad: bool) -> Result<Tensor<T>, NnError> {
        let (idx, dims) = self.argmax.as_ref().ok_or_else(missing_cache)?;
        if grad.len() != idx.len() {
            return Err(NnError::Shape(format!("maxpool2 backward got {:?}", grad.dims())));
        }
        let (h, w) = (dims[2], dims[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut dx = Tensor::zeros(dims);
        let dxd = dx.data_mut();
        if ho * wo > 0 {
            for (plane, (ks, gs)) in idx.chunks_exact(ho * wo).zip(grad.data().chunks_exact(ho * wo)).enumerate() {
                for oy in 0..ho {
                    let row0 = plane * h * w + 2 * oy * w;
                    for ox in 0..wo {
                        let k = ks[oy * wo + ox] as usize;
                        dxd[row0 + 2 * ox + (k & 1) + (k >> 1) * w] = gs[oy * wo + ox];
                    }
                }
            }
        }
        debug_assert_eq!(dx.len(), self.in_len);
        Ok(dx)
    }

    fn activation_pattern(&self, out: &mut Vec<u8>) {
        if let Some((idx, _)) = &self.argmax {
            out.extend_from_slice(idx);
        }
    }
}

struct GlobalAvgPool {
    in_dims: Option<Vec<usize>>,
}

impl<T: Real> Module<T> for GlobalAvgPool {
    fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let &[n, c, h, w] = x.dims() else {
            return Err(NnError::Shape(format!("global_avg_pool needs [N,C,H,W], got {:?}", x.dims())));
        };
        let plane = h * w;
        let data = x
            .data()
            .chunks_exact(plane)
            .map(|p| T::of(p.iter().map(|v| v.f64()).sum::<f64>() / plane as f64))
            .collect();
        self.in_dims = train.then(|| x.dims().to_vec());
        Tensor::from_vec(&[n, c], data)
    }

    fn backward(&mut self, grad: Tensor<T>, _input_grad: bool) -> Result<Tensor<T>, NnError> {
        let dims = self.in_dims.as_ref().ok_or_else(missing_cache)?;
        let plane = dims[2] * dims[3];
        if grad.len() != dims[0] * dims[1] {
            return Err(NnError::Shape(format!("global_avg_pool backward got {:?}", grad.dims())));
        }
        let scale = T::one() / T::of(plane as f64);
        let mut dx = Tensor::zeros(dims);
        for (chunk, &g) in dx.data_mut().chunks_exact_mut(plane).zip(grad.data()) {
            chunk.iter_mut().for_each(|v| *v = g * scale);
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

struct BatchNorm<T> {
    channels: usize,
    momentum: f64,
    eps: f64,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    grad_gamma: Tensor<T>,
    grad_beta: Tensor<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNorm<T> {
    /// Length of each contiguous single-channel run.
    fn spatial(&self, dims: &[usize]) -> usize {
        dims.iter().skip(2).product::<usize>().max(1)
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let c = self.channels;
        if x.dims().len() < 2 || x.dims()[1] != c {
            return Err(NnError::Shape(format!("batchnorm({c}) got {:?}", x.dims())));
        }
        let s = self.spatial(x.dims());
        let n = x.batch();
        let mut out = x;
        if train {
            let m = (n * s) as f64;
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for (i, run) in out.data().chunks_exact(s).enumerate() {
                mean[i % c] += lane_sum(run, |v| v.f64());
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for (i, run) in out.data().chunks_exact(s).enumerate() {
                let mu = mean[i % c];
                var[i % c] += lane_sum(run, |v| {
                    let d = v.f64() - mu;
                    d * d
                });
            }
            var.iter_mut().for_each(|v| *v /= m);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
            let mut xhat = Tensor::zeros(out.dims());
            for (i, (run, hrun)) in out.data_mut().chunks_exact_mut(s).zip(xhat.data_mut().chunks_exact_mut(s)).enumerate() {
                let ch = i % c;
                let (g, b) = (self.gamma.data()[ch], self.beta.data()[ch]);
                let (mu, inv) = (T::of(mean[ch]), T::of(inv_std[ch]));
                for (v, h) in run.iter_mut().zip(hrun.iter_mut()) {
                    let xh = (*v - mu) * inv;
                    *h = xh;
                    *v = g * xh + b;
                }
            }
            let mom = self.momentum;
            for ch in 0..c {
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = T::of((1.0 - mom) * rm.f64() + mom * mean[ch]);
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = T::of((1.0 - mom) * rv.f64() + mom * var[ch]);
            }
            self.cache = Some(BnCache { xhat, inv_std });
        } else {
            for (i, run) in out.data_mut().chunks_exact_mut(s).enumerate() {
                let ch = i % c;
                let inv = 1.0 / (self.running_var.data()[ch].f64() + self.eps).sqrt();
                let mu = self.running_mean.data()[ch].f64();
                let scale = T::of(self.gamma.data()[ch].f64() * inv);
                let shift = T::of(self.beta.data()[ch].f64() - self.gamma.data()[ch].f64() * mu * inv);
                run.iter_mut().for_each(|v| *v = scale * *v + shift);
            }
            self.cache = None;
        }
        Ok(out)
    }

    fn backward(&mut self, grad: Tensor<T>, _input_grad: bool) -> Result<Tensor<T>, NnError> {
        let cache = self.cache.as_ref().ok_or_else(missing_cache)?;
        if grad.dims() != cache.xhat.dims() {
            return Err(NnError::Shape(format!("batchnorm backward got {:?}", grad.dims())));
        }
        let c = self.channels;
        let s = self.spatial(grad.dims());
        let m = (grad.batch() * s) as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (i, (g, h)) in grad.data().chunks_exact(s).zip(cache.xhat.data().chunks_exact(s)).enumerate() {
            let ch = i % c;
            sum_dy[ch] += lane_sum(g, |v| v.f64());
            sum_dy_xhat[ch] += lane_dot(g, h);
        }
        for ch in 0..c {
            self.grad_gamma.data_mut()[ch] += T::of(sum_dy_xhat[ch]);
            self.grad_beta.data_mut()[ch] += T::of(sum_dy[ch]);
        }
        let mut dx = grad;
        for (i, (d, h)) in dx.data_mut().chunks_exact_mut(s).zip(cache.xhat.data().chunks_exact(s)).enumerate() {
            let ch = i % c;
            let k = self.gamma.data()[ch].f64() * cache.inv_std[ch];
            let (a, b0, b1) = (T::of(k), T::of(k * sum_dy[ch] / m), T::of(k * sum_dy_xhat[ch] / m));
            for (dv, &hv) in d.iter_mut().zip(h) {
                *dv = a * *dv - b0 - hv * b1;
            }
        }
        Ok(dx)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        vec![
            Param { value: &mut self.gamma, grad: &mut self.grad_gamma },
            Param { value: &mut self.beta, grad: &mut self.grad_beta },
        ]
    }

    fn state(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }
}

// ---------------------------------------------------------------------------
// Dropout, softmax, reshape

struct Dropout<T> {
    p: f64,
    rng: ChaCha8Rng,
    mask: Option<Tensor<T>>,
    frozen: bool,
    active: bool,
}

impl<T: Real> Module<T> for Dropout<T> {
    fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        self.active = train;
        if !train || self.p == 0.0 {
            if !train {
                self.mask = None;
            } else {
                self.mask = Some({
                    let mut m = Tensor::zeros(x.dims());
                    m.fill(T::one());
                    m
                });
            }
            return Ok(x);
        }
        let reuse = self.frozen && self.mask.as_ref().is_some_and(|m| m.dims() == x.dims());
        if !reuse {
            let keep = 1.0 - self.p;
            let scale = T::of(1.0 / keep);
            let data = (0..x.len()).map(|_| if self.rng.random::<f64>() < keep { scale } else { T::zero() }).collect();
            self.mask = Some(Tensor::from_vec(x.dims(), data)?);
        }
        let mask = self.mask.as_ref().expect("mask set above");
        let mut out = x;
        out.data_mut().iter_mut().zip(mask.data()).for_each(|(v, &m)| *v = *v * m);
        Ok(out)
    }

    fn backward(&mut self, grad: Tensor<T>, _input_grad: bool) -> Result<Tensor<T>, NnError> {
        if !self.active {
            return Err(missing_cache());
        }
        let mask = self.mask.as_ref().ok_or_else(missing_cache)?;
        let mut dx = grad;
        dx.data_mut().iter_mut().zip(mask.data()).for_each(|(v, &m)| *v = *v * m);
        Ok(dx)
    }

    fn set_frozen_noise(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}

struct Softmax<T> {
    output: Option<Tensor<T>>,
    in_dims: Vec<usize>,
}

/// Row-wise softmax over `[N, K]` data, computed in f64.
pub(crate) fn softmax_rows<T: Real>(data: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(k) {
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::of(e / z)));
    }
    out
}

impl<T: Real> Module<T> for Softmax<T> {
    fn forward(&mut self, x: Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let n = x.batch();
        let k = x.sample_len();
        if n == 0 || k == 0 {
            return Err(NnError::Shape(format!("softmax got {:?}", x.dims())));
        }
        let out = Tensor::from_vec(&[n, k], softmax_rows(x.data(), k))?;
        self.output = train.then(|| out.clone());
        self.in_dims = x.dims().to_vec();
        Ok(out)
    }

    fn backward(&mut self, grad: Tensor<T>, _input_grad: bool) -> Result<Tensor<T>, NnError> {
        let y = self.output.as_ref().ok_or_else(missing_cache)?;
        if grad.len() != y.len() {
            return Err(NnError::Shape(format!("softmax backward got {:?}", grad.dims())));
        }
        let k = y.sample_len();
        let mut dx = Tensor::zeros(&self.in_dims);
        for ((d, g), yr) in dx.data_mut().chunks_exact_mut(k).zip(grad.data().chunks_exact(k)).zip(y.data().chunks_exact(k)) {
            let dot: f64 = g.iter().zip(yr).map(|(a, b)| a.f64() * b.f64()).sum();
            for ((dv, &gv), &yv) in d.iter_mut().zip(g).zip(yr) {
                *dv = T::of(yv.f64() * (gv.f64() - dot));
            }
        }
        Ok(dx)
    }
}

struct Reshape {
    dims: Vec<usize>,
    in_dims: Vec<usize>,
}

impl<T: Real> Module<T> for Reshape {
    fn forward(&mut self, x: Tensor<T>, _train: bool) -> Result<Tensor<T>, NnError> {
        let n = expect_batch(&x, self.in_dims.iter().product(), "reshape")?;
        let mut dims = vec![n];
        dims.extend_from_slice(&self.dims);
        x.reshaped(&dims)
    }

    fn backward(&mut self, grad: Tensor<T>, _input_grad: bool) -> Result<Tensor<T>, NnError> {
        let mut dims = vec![grad.batch()];
        dims.extend_from_slice(&self.in_dims);
        grad.reshaped(&dims)
    }
}
