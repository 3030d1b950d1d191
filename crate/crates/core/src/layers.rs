//! Layer descriptions and their forward/backward kernels.
//!
//! Every kernel is a pure function over single-image tensors laid out as
//! `[channels, height, width]` (or `[features]` after flattening).
//! Convolution is cross-correlation: kernels are not flipped.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::tensor::Tensor;

/// One layer of a feed-forward network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    SoftmaxCeHead,
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. })
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. })
    }

    /// Weight and bias dims, for layers that carry parameters.
    pub fn param_dims(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel_h, kernel_w],
                out_channels,
            )),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], out_features)),
            _ => None,
        }
    }

    /// Output dims for the given input dims, validating compatibility.
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
                    return Err(Error::invalid("conv2d extents must be at least 1"));
                }
                if stride == 0 {
                    return Err(Error::invalid("conv2d stride must be at least 1"));
                }
                let [c, h, w] = rank3(input, "conv2d input")?;
                ensure_dim("conv2d in_channels", in_channels, c)?;
                let h_out = conv_extent(h, kernel_h, stride, padding, "conv2d height")?;
                let w_out = conv_extent(w, kernel_w, stride, padding, "conv2d width")?;
                Ok(vec![out_channels, h_out, w_out])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Maxpool2d { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(Error::invalid("maxpool window and stride must be at least 1"));
                }
                let [c, h, w] = rank3(input, "maxpool input")?;
                let h_out = conv_extent(h, window, stride, 0, "maxpool height")?;
                let w_out = conv_extent(w, window, stride, 0, "maxpool width")?;
                Ok(vec![c, h_out, w_out])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if input.len() != 1 {
                    return Err(Error::shape("linear input rank", 1, input.len()));
                }
                ensure_dim("linear in_features", in_features, input[0])?;
                Ok(vec![out_features])
            }
            LayerSpec::SoftmaxCeHead => {
                if input.len() != 1 {
                    return Err(Error::shape("softmax head input rank", 1, input.len()));
                }
                Ok(input.to_vec())
            }
        }
    }
}

fn rank3(dims: &[usize], what: &str) -> Result<[usize; 3]> {
    match *dims {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::shape(format!("{what} rank"), 3, dims.len())),
    }
}

fn conv_extent(size: usize, kernel: usize, stride: usize, padding: usize, what: &str) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::invalid(format!(
            "{what}: padded extent {padded} smaller than kernel {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Stride and zero-padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            padding: 0,
        }
    }
}

/// Resolved sizes of one convolution call.
#[derive(Debug, Clone, Copy)]
struct ConvShape {
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    padding: usize,
}

impl ConvShape {
    fn resolve(input: &Tensor, weights: &Tensor, geom: ConvGeometry) -> Result<Self> {
        let [c_in, h_in, w_in] = rank3(input.dims(), "conv2d input")?;
        let (c_out, wc_in, kh, kw) = match *weights.dims() {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape("conv2d weight rank", 4, weights.rank())),
        };
        ensure_dim("conv2d in_channels", wc_in, c_in)?;
        if geom.stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let h_out = conv_extent(h_in, kh, geom.stride, geom.padding, "conv2d height")?;
        let w_out = conv_extent(w_in, kw, geom.stride, geom.padding, "conv2d width")?;
        Ok(ConvShape {
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            h_out,
            w_out,
            stride: geom.stride,
            padding: geom.padding,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn check_mask(mask: Option<&[bool]>, c_in: usize) -> Result<()> {
    if let Some(m) = mask {
        ensure_dim("conv2d mask length", c_in, m.len())?;
    }
    Ok(())
}

/// Unfolds the padded input into a `[c_in*kh*kw, h_out*w_out]` matrix.
/// Rows belonging to masked-out channels are left at zero.
fn im2col(input: &[f64], s: &ConvShape, mask: Option<&[bool]>) -> Vec<f64> {
    let positions = s.positions();
    let mut cols = vec![0.0; s.patch_len() * positions];
    for c in 0..s.c_in {
        if mask.is_some_and(|m| !m[c]) {
            continue;
        }
        let plane = &input[c * s.h_in * s.w_in..(c + 1) * s.h_in * s.w_in];
        for a in 0..s.kh {
            for b in 0..s.kw {
                let row = ((c * s.kh + a) * s.kw + b) * positions;
                for oy in 0..s.h_out {
                    let iy = (oy * s.stride + a) as isize - s.padding as isize;
                    if iy < 0 || iy >= s.h_in as isize {
                        continue;
                    }
                    let src = iy as usize * s.w_in;
                    for ox in 0..s.w_out {
                        let ix = (ox * s.stride + b) as isize - s.padding as isize;
                        if ix >= 0 && ix < s.w_in as isize {
                            cols[row + oy * s.w_out + ox] = plane[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(dcols: &[f64], s: &ConvShape, mask: Option<&[bool]>) -> Vec<f64> {
    let positions = s.positions();
    let mut dx = vec![0.0; s.c_in * s.h_in * s.w_in];
    for c in 0..s.c_in {
        if mask.is_some_and(|m| !m[c]) {
            continue;
        }
        let plane = &mut dx[c * s.h_in * s.w_in..(c + 1) * s.h_in * s.w_in];
        for a in 0..s.kh {
            for b in 0..s.kw {
                let row = ((c * s.kh + a) * s.kw + b) * positions;
                for oy in 0..s.h_out {
                    let iy = (oy * s.stride + a) as isize - s.padding as isize;
                    if iy < 0 || iy >= s.h_in as isize {
                        continue;
                    }
                    let dst = iy as usize * s.w_in;
                    for ox in 0..s.w_out {
                        let ix = (ox * s.stride + b) as isize - s.padding as isize;
                        if ix >= 0 && ix < s.w_in as isize {
                            plane[dst + ix as usize] += dcols[row + oy * s.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Masked 2-D cross-correlation.
///
/// `Y_i = sum_j mask_j * (X_j * W_ij) + bias_i`; a `None` mask keeps every
/// input channel.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    mask: Option<&[bool]>,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let s = ConvShape::resolve(input, weights, geom)?;
    ensure_dim("conv2d bias length", s.c_out, bias.len())?;
    check_mask(mask, s.c_in)?;
    let cols = im2col(input.data(), &s, mask);
    let positions = s.positions();
    let k_len = s.patch_len();
    let w = weights.data();
    let mut out = vec![0.0; s.c_out * positions];
    for i in 0..s.c_out {
        let row = &mut out[i * positions..(i + 1) * positions];
        row.fill(bias[i]);
        for k in 0..k_len {
            let wk = w[i * k_len + k];
            let col = &cols[k * positions..(k + 1) * positions];
            for (o, x) in row.iter_mut().zip(col) {
                *o += wk * x;
            }
        }
    }
    Tensor::new(vec![s.c_out, s.h_out, s.w_out], out)
}

/// Receptive field of output location `(oy, ox)`, laid out `[c_in, kh, kw]`
/// like one filter, with zeros where it overlaps the padding.
pub fn conv_patch(
    input: &Tensor,
    kernel: (usize, usize),
    geom: ConvGeometry,
    oy: usize,
    ox: usize,
) -> Result<Vec<f64>> {
    let [c_in, h_in, w_in] = rank3(input.dims(), "conv patch input")?;
    let (kh, kw) = kernel;
    let h_out = conv_extent(h_in, kh, geom.stride, geom.padding, "conv patch height")?;
    let w_out = conv_extent(w_in, kw, geom.stride, geom.padding, "conv patch width")?;
    if oy >= h_out || ox >= w_out {
        return Err(Error::invalid(format!(
            "location ({oy}, {ox}) outside {h_out}x{w_out} output"
        )));
    }
    let x = input.data();
    let mut patch = vec![0.0; c_in * kh * kw];
    for c in 0..c_in {
        for a in 0..kh {
            let iy = (oy * geom.stride + a) as isize - geom.padding as isize;
            if iy < 0 || iy >= h_in as isize {
                continue;
            }
            for b in 0..kw {
                let ix = (ox * geom.stride + b) as isize - geom.padding as isize;
                if ix >= 0 && ix < w_in as isize {
                    patch[(c * kh + a) * kw + b] = x[(c * h_in + iy as usize) * w_in + ix as usize];
                }
            }
        }
    }
    Ok(patch)
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_output: &Tensor,
    mask: Option<&[bool]>,
    geom: ConvGeometry,
) -> Result<ConvGrads> {
    let s = ConvShape::resolve(input, weights, geom)?;
    check_mask(mask, s.c_in)?;
    if grad_output.dims() != [s.c_out, s.h_out, s.w_out] {
        return Err(Error::shape(
            "conv2d output gradient",
            s.c_out * s.positions(),
            grad_output.len(),
        ));
    }
    let cols = im2col(input.data(), &s, mask);
    let positions = s.positions();
    let k_len = s.patch_len();
    let w = weights.data();
    let dy = grad_output.data();

    let mut dw = vec![0.0; s.c_out * k_len];
    let mut db = vec![0.0; s.c_out];
    let mut dcols = vec![0.0; k_len * positions];
    for i in 0..s.c_out {
        let dyi = &dy[i * positions..(i + 1) * positions];
        db[i] = dyi.iter().sum();
        for k in 0..k_len {
            let col = &cols[k * positions..(k + 1) * positions];
            dw[i * k_len + k] = dot(dyi, col);
            let wk = w[i * k_len + k];
            let dcol = &mut dcols[k * positions..(k + 1) * positions];
            for (d, g) in dcol.iter_mut().zip(dyi) {
                *d += wk * g;
            }
        }
    }
    let dx = col2im(&dcols, &s, mask);
    Ok(ConvGrads {
        input: Tensor::new(input.dims().to_vec(), dx)?,
        weights: Tensor::new(weights.dims().to_vec(), dw)?,
        bias: db,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.dims().to_vec(), data).expect("same length")
}

/// Gradient is passed through where the input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    if !input.same_shape(grad_output) {
        return Err(Error::shape("relu gradient", input.len(), grad_output.len()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.dims().to_vec(), data)
}

/// Flat input index of the maximum of every pooling window. Ties go to the
/// lowest flat index.
fn maxpool_argmax(input: &Tensor, window: usize, stride: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let out_dims = LayerSpec::Maxpool2d { window, stride }.output_dims(input.dims())?;
    let [c, h, w] = rank3(input.dims(), "maxpool input")?;
    let (h_out, w_out) = (out_dims[1], out_dims[2]);
    let x = input.data();
    let mut argmax = Vec::with_capacity(c * h_out * w_out);
    for ch in 0..c {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = ch * h * w + oy * stride * w + ox * stride;
                for a in 0..window {
                    for b in 0..window {
                        let idx = ch * h * w + (oy * stride + a) * w + ox * stride + b;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                argmax.push(best);
            }
        }
    }
    Ok((out_dims, argmax))
}

pub fn maxpool_forward(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (dims, argmax) = maxpool_argmax(input, window, stride)?;
    let x = input.data();
    Tensor::new(dims, argmax.iter().map(|&i| x[i]).collect())
}

pub fn maxpool_backward(
    input: &Tensor,
    grad_output: &Tensor,
    window: usize,
    stride: usize,
) -> Result<Tensor> {
    let (dims, argmax) = maxpool_argmax(input, window, stride)?;
    if grad_output.dims() != dims.as_slice() {
        return Err(Error::shape("maxpool output gradient", argmax.len(), grad_output.len()));
    }
    let mut dx = Tensor::zeros(input.dims());
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_output.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// `y = W x + b` with `W` shaped `[out, in]`.
pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (out_f, in_f) = linear_dims(weights)?;
    ensure_dim("linear input", in_f, input.len())?;
    ensure_dim("linear bias length", out_f, bias.len())?;
    let x = input.data();
    let w = weights.data();
    let y = (0..out_f)
        .map(|o| bias[o] + dot(&w[o * in_f..(o + 1) * in_f], x))
        .collect();
    Tensor::new(vec![out_f], y)
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

pub fn linear_backward(input: &Tensor, weights: &Tensor, grad_output: &Tensor) -> Result<LinearGrads> {
    let (out_f, in_f) = linear_dims(weights)?;
    ensure_dim("linear input", in_f, input.len())?;
    ensure_dim("linear output gradient", out_f, grad_output.len())?;
    let x = input.data();
    let w = weights.data();
    let dy = grad_output.data();
    let mut dw = vec![0.0; out_f * in_f];
    let mut dx = vec![0.0; in_f];
    for o in 0..out_f {
        let g = dy[o];
        let wrow = &w[o * in_f..(o + 1) * in_f];
        for (d, xv) in dw[o * in_f..(o + 1) * in_f].iter_mut().zip(x) {
            *d = g * xv;
        }
        for (d, wv) in dx.iter_mut().zip(wrow) {
            *d += wv * g;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(input.dims().to_vec(), dx)?,
        weights: Tensor::new(weights.dims().to_vec(), dw)?,
        bias: dy.to_vec(),
    })
}

fn linear_dims(weights: &Tensor) -> Result<(usize, usize)> {
    match *weights.dims() {
        [o, i] => Ok((o, i)),
        _ => Err(Error::shape("linear weight rank", 2, weights.rank())),
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_label(logits: &[f64], label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(())
}

/// `-log softmax(logits)[label]`, computed through log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_label(logits, label)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// `softmax(logits) - onehot(label)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    check_label(logits, label)?;
    let mut p = softmax(logits);
    p[label] -= 1.0;
    Ok(p)
}
