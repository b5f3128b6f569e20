//! One-dimensional convolution kernels and the parameterised layer type.
//!
//! Both convolution flavours are lowered to `im2col`/`col2im` plus a dense
//! matrix product, so forward and backward passes share the same gather and
//! scatter routines.

use crate::error::{MeaeError, Result};
use crate::nn::tensor::Tensor;

/// Numerical floor used to clamp probabilities inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv1d,
    TransposedConv1d,
    /// Kernel-size-1 convolution: a per-sample affine map across channels.
    PointwiseAffine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid_scalar(x),
            Activation::Identity => x,
        }
    }
}

/// A convolutional layer with weights stored as `[C_out, C_in, K]` for every kind.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayer {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

impl ParamLayer {
    pub fn new(
        kind: LayerKind,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
        activation: Activation,
    ) -> Result<Self> {
        let layer = Self {
            kind,
            weight,
            bias,
            stride,
            padding,
            activation,
        };
        layer.validate()?;
        Ok(layer)
    }

    fn validate(&self) -> Result<()> {
        let shape = self.weight.shape();
        if shape.len() != 3 {
            return Err(MeaeError::Shape {
                op: "ParamLayer",
                lhs: shape.to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        if self.bias.shape() != [shape[0]] {
            return Err(MeaeError::Shape {
                op: "ParamLayer bias",
                lhs: self.bias.shape().to_vec(),
                rhs: vec![shape[0]],
            });
        }
        if self.stride == 0 {
            return Err(MeaeError::Config("stride must be positive".into()));
        }
        if self.kind == LayerKind::PointwiseAffine
            && (shape[2] != 1 || self.stride != 1 || self.padding != 0)
        {
            return Err(MeaeError::Config(
                "pointwise-affine layers need K=1, stride 1, padding 0".into(),
            ));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_len(&self, input_len: usize) -> Result<usize> {
        let k = self.kernel_size();
        match self.kind {
            LayerKind::Conv1d | LayerKind::PointwiseAffine => {
                conv_output_len(input_len, k, self.stride, self.padding)
            }
            LayerKind::TransposedConv1d => {
                transposed_output_len(input_len, k, self.stride, self.padding)
            }
        }
    }

    /// Convolution plus bias, without the activation.
    pub fn pre_activation(&self, input: &Tensor) -> Result<Tensor> {
        match self.kind {
            LayerKind::Conv1d | LayerKind::PointwiseAffine => {
                conv1d_forward(input, &self.weight, &self.bias, self.stride, self.padding)
            }
            LayerKind::TransposedConv1d => {
                transposed_conv1d_forward(input, &self.weight, &self.bias, self.stride, self.padding)
            }
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let act = self.activation;
        let mut out = self.pre_activation(input)?;
        if act != Activation::Identity {
            out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        }
        Ok(out)
    }
}

pub fn conv_output_len(input_len: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input_len + 2 * padding;
    if padded < k {
        return Err(MeaeError::Config(format!(
            "conv1d input length {input_len} with padding {padding} is shorter than kernel {k}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

pub fn transposed_output_len(
    input_len: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let full = (input_len.saturating_sub(1)) * stride + k;
    if input_len == 0 || full <= 2 * padding {
        return Err(MeaeError::Config(format!(
            "transposed conv1d with input length {input_len}, kernel {k}, padding {padding} has empty output"
        )));
    }
    Ok(full - 2 * padding)
}

/// Functional conv1d: cross-correlation plus bias followed by `layer.activation`.
pub fn conv1d(input: &Tensor, layer: &ParamLayer) -> Result<Tensor> {
    if layer.kind == LayerKind::TransposedConv1d {
        return Err(MeaeError::Config("conv1d called with a transposed layer".into()));
    }
    layer.forward(input)
}

pub fn transposed_conv1d(input: &Tensor, layer: &ParamLayer) -> Result<Tensor> {
    if layer.kind != LayerKind::TransposedConv1d {
        return Err(MeaeError::Config(
            "transposed_conv1d called with a non-transposed layer".into(),
        ));
    }
    layer.forward(input)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Mean binary cross-entropy with predictions clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce(prediction: &Tensor, target: &Tensor) -> Result<f64> {
    prediction.ensure_same_shape(target, "bce")?;
    let n = prediction.len() as f64;
    let sum: f64 = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| bce_term(p, t))
        .sum();
    Ok(sum / n)
}

#[inline]
pub(crate) fn bce_term(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// d(bce_term)/dp; zero where the clamp is active.
#[inline]
pub(crate) fn bce_term_grad(p: f64, t: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        0.0
    } else {
        -t / p + (1.0 - t) / (1.0 - p)
    }
}

/// `c = a·b + beta·c` for row-major dense blocks described by (rows, cols, row stride, col stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        (rows - 1) * rs + (cols.max(1) - 1) * cs
    };
    if k > 0 {
        assert!(last(m, k, a_strides) < a.len());
        assert!(last(k, n, b_strides) < b.len());
    }
    assert!(last(m, n, c_strides) < c.len());
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Range of output positions `t` for which `t*stride + tap - pad` lands inside `[0, sig_len)`.
#[inline]
fn valid_range(tap: usize, stride: usize, pad: usize, sig_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let reach = sig_len + pad;
    let hi = if reach > tap {
        ((reach - tap).div_ceil(stride)).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Gathers `cols[(c*k + tap), t] = sig[c, t*stride + tap - pad]` (zero outside the signal).
#[allow(clippy::too_many_arguments)]
fn im2col(
    sig: &[f64],
    channels: usize,
    sig_len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
    cols: &mut [f64],
) {
    for c in 0..channels {
        let src = &sig[c * sig_len..(c + 1) * sig_len];
        for tap in 0..k {
            let row = &mut cols[(c * k + tap) * out_len..(c * k + tap + 1) * out_len];
            let (lo, hi) = valid_range(tap, stride, pad, sig_len, out_len);
            row[..lo].fill(0.0);
            row[hi..].fill(0.0);
            if stride == 1 {
                let start = lo + tap - pad;
                row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
            } else {
                for (t, slot) in row.iter_mut().enumerate().take(hi).skip(lo) {
                    *slot = src[t * stride + tap - pad];
                }
            }
        }
    }
}

/// Scatter-adds columns back into a signal; the adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    channels: usize,
    sig_len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
    sig: &mut [f64],
) {
    for c in 0..channels {
        let dst = &mut sig[c * sig_len..(c + 1) * sig_len];
        for tap in 0..k {
            let row = &cols[(c * k + tap) * out_len..(c * k + tap + 1) * out_len];
            let (lo, hi) = valid_range(tap, stride, pad, sig_len, out_len);
            for (t, v) in row.iter().enumerate().take(hi).skip(lo) {
                dst[t * stride + tap - pad] += v;
            }
        }
    }
}

fn check_weight(input: &Tensor, weight: &Tensor, bias: &Tensor, in_axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    let (b, c, l) = input.dims3(op)?;
    let ws = weight.shape();
    if ws.len() != 3 || ws[in_axis] != c || bias.shape() != [ws[0]] {
        return Err(MeaeError::Shape {
            op,
            lhs: input.shape().to_vec(),
            rhs: ws.to_vec(),
        });
    }
    Ok((b, c, l))
}

pub(crate) fn conv1d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (batch, c_in, l_in) = check_weight(input, weight, bias, 1, "conv1d")?;
    let (c_out, k) = (weight.shape()[0], weight.shape()[2]);
    let l_out = conv_output_len(l_in, k, stride, padding)?;
    let mut out = Tensor::zeros(&[batch, c_out, l_out]);
    let ck = c_in * k;
    let mut cols = vec![0.0; ck * l_out];
    for b in 0..batch {
        let x = &input.data()[b * c_in * l_in..(b + 1) * c_in * l_in];
        im2col(x, c_in, l_in, k, stride, padding, l_out, &mut cols);
        let y = &mut out.data_mut()[b * c_out * l_out..(b + 1) * c_out * l_out];
        for (co, row) in y.chunks_mut(l_out).enumerate() {
            row.fill(bias.data()[co]);
        }
        gemm(c_out, ck, l_out, weight.data(), (ck, 1), &cols, (l_out, 1), 1.0, y, (l_out, 1));
    }
    Ok(out)
}

/// Gradients of a conv1d pre-activation with respect to input, weight and bias.
pub(crate) fn conv1d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (batch, c_in, l_in) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, k) = (weight.shape()[0], weight.shape()[2]);
    let l_out = grad_out.shape()[2];
    let ck = c_in * k;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[c_out]);
    let mut dx = need_input_grad.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![0.0; ck * l_out];
    for b in 0..batch {
        let x = &input.data()[b * c_in * l_in..(b + 1) * c_in * l_in];
        let g = &grad_out.data()[b * c_out * l_out..(b + 1) * c_out * l_out];
        for (co, row) in g.chunks(l_out).enumerate() {
            db.data_mut()[co] += row.iter().sum::<f64>();
        }
        im2col(x, c_in, l_in, k, stride, padding, l_out, &mut cols);
        // dW += g · colsᵀ
        gemm(c_out, l_out, ck, g, (l_out, 1), &cols, (1, l_out), 1.0, dw.data_mut(), (ck, 1));
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · g
            gemm(ck, c_out, l_out, weight.data(), (1, ck), g, (l_out, 1), 0.0, &mut cols, (l_out, 1));
            let dxb = &mut dx.data_mut()[b * c_in * l_in..(b + 1) * c_in * l_in];
            col2im(&cols, c_in, l_in, k, stride, padding, l_out, dxb);
        }
    }
    (dx, dw, db)
}

/// `[C_out, C_in, K]` → `[(C_out·K), C_in]`.
fn permute_out_tap(weight: &Tensor) -> Vec<f64> {
    let (c_out, c_in, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    let w = weight.data();
    let mut p = vec![0.0; w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for tap in 0..k {
                p[(co * k + tap) * c_in + ci] = w[(co * c_in + ci) * k + tap];
            }
        }
    }
    p
}

pub(crate) fn transposed_conv1d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (batch, c_in, l_in) = check_weight(input, weight, bias, 1, "transposed_conv1d")?;
    let (c_out, k) = (weight.shape()[0], weight.shape()[2]);
    let l_out = transposed_output_len(l_in, k, stride, padding)?;
    let wp = permute_out_tap(weight);
    let ok = c_out * k;
    let mut cols = vec![0.0; ok * l_in];
    let mut out = Tensor::zeros(&[batch, c_out, l_out]);
    for b in 0..batch {
        let x = &input.data()[b * c_in * l_in..(b + 1) * c_in * l_in];
        gemm(ok, c_in, l_in, &wp, (c_in, 1), x, (l_in, 1), 0.0, &mut cols, (l_in, 1));
        let y = &mut out.data_mut()[b * c_out * l_out..(b + 1) * c_out * l_out];
        for (co, row) in y.chunks_mut(l_out).enumerate() {
            row.fill(bias.data()[co]);
        }
        col2im(&cols, c_out, l_out, k, stride, padding, l_in, y);
    }
    Ok(out)
}

pub(crate) fn transposed_conv1d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (batch, c_in, l_in) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, k) = (weight.shape()[0], weight.shape()[2]);
    let l_out = grad_out.shape()[2];
    let ok = c_out * k;
    let wp = permute_out_tap(weight);
    let mut dwp = vec![0.0; wp.len()];
    let mut db = Tensor::zeros(&[c_out]);
    let mut dx = need_input_grad.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![0.0; ok * l_in];
    for b in 0..batch {
        let x = &input.data()[b * c_in * l_in..(b + 1) * c_in * l_in];
        let g = &grad_out.data()[b * c_out * l_out..(b + 1) * c_out * l_out];
        for (co, row) in g.chunks(l_out).enumerate() {
            db.data_mut()[co] += row.iter().sum::<f64>();
        }
        im2col(g, c_out, l_out, k, stride, padding, l_in, &mut cols);
        // dWp += dcols · xᵀ
        gemm(ok, l_in, c_in, &cols, (l_in, 1), x, (1, l_in), 1.0, &mut dwp, (c_in, 1));
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[b * c_in * l_in..(b + 1) * c_in * l_in];
            gemm(c_in, ok, l_in, &wp, (1, c_in), &cols, (l_in, 1), 0.0, dxb, (l_in, 1));
        }
    }
    let mut dw = Tensor::zeros(weight.shape());
    let dwd = dw.data_mut();
    for co in 0..c_out {
        for ci in 0..c_in {
            for tap in 0..k {
                dwd[(co * c_in + ci) * k + tap] = dwp[(co * k + tap) * c_in + ci];
            }
        }
    }
    (dx, dw, db)
}
