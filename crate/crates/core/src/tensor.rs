//! Dense NCHW tensors and the raw forward/backward kernels used by the
//! network. Storage is generic over [`Real`] so the same code runs on the
//! 32-bit training path and the 64-bit gradient-check path; convolution
//! sums are always accumulated in `f64`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{CabmError, Result};

/// Scalar element type of a [`Tensor`].
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense 4-D array in (batch, channel, height, width) row-major order with
/// an optional gradient buffer of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(CabmError::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// A `(1, 1, 1, 1)` tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        data.push(f([ni, ci, hi, wi]));
                    }
                }
            }
        }
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(CabmError::shape(
                "set_grad",
                format!("grad length {} vs data length {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let o = self.offset(n, c, h, w);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
            grad: None,
        }
    }

    pub fn reshape(&self, shape: [usize; 4]) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Elements of sample `n` as a contiguous slice.
    pub fn sample(&self, n: usize) -> &[T] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * per..(n + 1) * per]
    }

    /// Copies sample `n` into its own `(1, C, H, W)` tensor.
    pub fn sample_tensor(&self, n: usize) -> Self {
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [1, c, h, w],
            data: self.sample(n).to_vec(),
            grad: None,
        }
    }

    /// Concatenates tensors of identical (C, H, W) along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| CabmError::invalid("stack of zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.shape;
            if (tc, th, tw) != (c, h, w) {
                return Err(CabmError::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec([n, c, h, w], data)
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        self.require_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn require_same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(CabmError::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(CabmError::invalid("conv channels must be positive"));
        }
        if kernel == 0 || kernel % 2 == 0 {
            return Err(CabmError::invalid(format!(
                "conv kernel must be positive and odd, got {kernel}"
            )));
        }
        if stride == 0 {
            return Err(CabmError::invalid("conv stride must be positive"));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// Stride-1 convolution that preserves spatial size.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel {
            return Err(CabmError::shape(
                "conv2d",
                format!(
                    "input {h}x{w} with padding {} is smaller than kernel {}",
                    self.padding, self.kernel
                ),
            ));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }
}

fn check_conv(
    input: [usize; 4],
    weight: [usize; 4],
    bias_len: usize,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    if weight != spec.weight_shape() {
        return Err(CabmError::shape(
            "conv2d",
            format!("weight {:?} vs spec {:?}", weight, spec.weight_shape()),
        ));
    }
    if input[1] != spec.in_channels {
        return Err(CabmError::shape(
            "conv2d",
            format!("input has {} channels, spec expects {}", input[1], spec.in_channels),
        ));
    }
    if bias_len != spec.out_channels {
        return Err(CabmError::shape(
            "conv2d",
            format!("bias length {bias_len} vs {} output channels", spec.out_channels),
        ));
    }
    spec.output_dims(input[2], input[3])
}

/// Range of output positions `o` for which `o * stride + k - pad` lies in `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o * stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o * stride + k - pad <= len - 1
    let hi_num = len + pad - 1;
    let hi = if hi_num < k {
        0
    } else {
        ((hi_num - k) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// Cross-correlation with zero padding and per-output-channel bias.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_conv(input.shape, weight.shape, bias.len(), spec)?;
    let [n, ic, h, w] = input.shape;
    let oc = spec.out_channels;
    let k = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    let mut out = Vec::with_capacity(n * oc * oh * ow);
    let mut acc = vec![0f64; oh * ow];
    let wdata: Vec<f64> = weight.data.iter().map(|v| v.as_f64()).collect();
    let xdata: Vec<f64> = input.data.iter().map(|v| v.as_f64()).collect();
    for ni in 0..n {
        for o in 0..oc {
            acc.fill(bias[o].as_f64());
            for c in 0..ic {
                let plane = &xdata[(ni * ic + c) * h * w..(ni * ic + c + 1) * h * w];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(h, oh, ky, s, p);
                    for kx in 0..k {
                        let wv = wdata[((o * ic + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(w, ow, kx, s, p);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let row = &plane[iy * w..(iy + 1) * w];
                            let arow = &mut acc[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let ix0 = ox0 + kx - p;
                                let src = &row[ix0..ix0 + (ox1 - ox0)];
                                for (a, &x) in arow[ox0..ox1].iter_mut().zip(src) {
                                    *a += wv * x;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    arow[ox] += wv * row[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&v| T::from_f64_lossy(v)));
        }
    }
    Tensor::from_vec([n, oc, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (oh, ow) = check_conv(input.shape, weight.shape, spec.out_channels, spec)?;
    let [n, ic, h, w] = input.shape;
    let oc = spec.out_channels;
    let k = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    if grad_out.len() != n * oc * oh * ow {
        return Err(CabmError::shape("conv2d_backward", "upstream gradient size"));
    }
    let xdata: Vec<f64> = input.data.iter().map(|v| v.as_f64()).collect();
    let wdata: Vec<f64> = weight.data.iter().map(|v| v.as_f64()).collect();
    let gdata: Vec<f64> = grad_out.iter().map(|v| v.as_f64()).collect();
    let mut gx = vec![0f64; xdata.len()];
    let mut gw = vec![0f64; wdata.len()];
    let mut gb = vec![0f64; oc];
    for ni in 0..n {
        for o in 0..oc {
            let gplane = &gdata[(ni * oc + o) * oh * ow..(ni * oc + o + 1) * oh * ow];
            gb[o] += gplane.iter().sum::<f64>();
            for c in 0..ic {
                let base = (ni * ic + c) * h * w;
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(h, oh, ky, s, p);
                    for kx in 0..k {
                        let widx = ((o * ic + c) * k + ky) * k + kx;
                        let wv = wdata[widx];
                        let (ox0, ox1) = valid_range(w, ow, kx, s, p);
                        let mut wacc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let xrow = &xdata[base + iy * w..base + (iy + 1) * w];
                            let gxrow = &mut gx[base + iy * w..base + (iy + 1) * w];
                            for ox in ox0..ox1 {
                                let ix = ox * s + kx - p;
                                let g = grow[ox];
                                wacc += g * xrow[ix];
                                gxrow[ix] += g * wv;
                            }
                        }
                        gw[widx] += wacc;
                    }
                }
            }
        }
    }
    let conv = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<T>>();
    Ok((conv(gx), conv(gw), conv(gb)))
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Rearranges `(N, C·s², H, W)` into `(N, C, H·s, W·s)`.
pub fn pixel_shuffle<T: Real>(input: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape;
    let s2 = scale * scale;
    if scale == 0 || c % s2 != 0 {
        return Err(CabmError::shape(
            "pixel_shuffle",
            format!("{c} channels not divisible by scale² = {s2}"),
        ));
    }
    let oc = c / s2;
    let mut out = Tensor::zeros([n, oc, h * scale, w * scale]);
    for ni in 0..n {
        for co in 0..oc {
            for i in 0..scale {
                for j in 0..scale {
                    let ci = co * s2 + i * scale + j;
                    for y in 0..h {
                        for x in 0..w {
                            let v = input.at(ni, ci, y, x);
                            out.set(ni, co, y * scale + i, x * scale + j, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`]; routes gradients back through the shuffle.
pub(crate) fn pixel_unshuffle<T: Real>(input: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape;
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(CabmError::shape("pixel_unshuffle", "spatial dims not divisible"));
    }
    let s2 = scale * scale;
    let (oh, ow) = (h / scale, w / scale);
    let mut out = Tensor::zeros([n, c * s2, oh, ow]);
    for ni in 0..n {
        for co in 0..c {
            for i in 0..scale {
                for j in 0..scale {
                    let ci = co * s2 + i * scale + j;
                    for y in 0..oh {
                        for x in 0..ow {
                            let v = input.at(ni, co, y * scale + i, x * scale + j);
                            out.set(ni, ci, y, x, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
