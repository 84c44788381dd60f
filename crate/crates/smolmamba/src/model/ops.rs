//! Structural tape operations used by the network: pointwise channel
//! projections, 2D convolutions for the pre-token stages, depthwise
//! causal convolution along tokens, token gather/reverse, and batch
//! normalization with mask-aware statistics.

use std::rc::Rc;

use crate::pruner::TokenMask;
use crate::tensor::tape::{CustomOp, Tape, Var};
use crate::tensor::{DenseTensor, TensorError};

// ---- pointwise channel projection ----

#[derive(Debug)]
struct ChannelLinearOp {
    has_bias: bool,
}

impl CustomOp for ChannelLinearOp {
    fn name(&self) -> &'static str {
        "channel_linear"
    }

    fn backward(
        &self,
        inputs: &[&DenseTensor],
        _output: &DenseTensor,
        grad: &DenseTensor,
    ) -> Result<Vec<Option<DenseTensor>>, TensorError> {
        let (x, w) = (inputs[0], inputs[1]);
        let (o_n, c_n) = (w.shape()[0], w.shape()[1]);
        let n_tok = *x.shape().last().unwrap();
        let rows = x.len() / (c_n * n_tok);
        let mut gx = DenseTensor::zeros(x.shape());
        let mut gw = DenseTensor::zeros(w.shape());
        let mut gb = vec![0.0; o_n];
        let (x_data, w_data, g_data) = (x.data(), w.data(), grad.data());
        let gx_data = gx.data_mut();
        let gw_data = gw.data_mut();
        for r in 0..rows {
            let x_base = r * c_n * n_tok;
            let y_base = r * o_n * n_tok;
            for o in 0..o_n {
                let g_row = &g_data[y_base + o * n_tok..y_base + (o + 1) * n_tok];
                if self.has_bias {
                    gb[o] += g_row.iter().sum::<f64>();
                }
                let w_row = &w_data[o * c_n..(o + 1) * c_n];
                let gw_row = &mut gw_data[o * c_n..(o + 1) * c_n];
                for c in 0..c_n {
                    // input gradient: a plain axpy, lanes independent
                    let wv = w_row[c];
                    let gx_row = &mut gx_data[x_base + c * n_tok..x_base + (c + 1) * n_tok];
                    for (gxv, &g) in gx_row.iter_mut().zip(g_row) {
                        *gxv += wv * g;
                    }
                    // weight gradient: unrolled dot so the reduction
                    // does not serialize on one accumulator
                    let x_row = &x_data[x_base + c * n_tok..x_base + (c + 1) * n_tok];
                    gw_row[c] += dot_unrolled(g_row, x_row);
                }
            }
        }
        let mut grads = vec![Some(gx), Some(gw)];
        if self.has_bias {
            grads.push(Some(DenseTensor::new(vec![o_n], gb).unwrap()));
        }
        Ok(grads)
    }
}

/// Four-accumulator dot product; fixed association order, so results are
/// deterministic run to run.
#[inline(always)]
pub(crate) fn dot_unrolled(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let a_chunks = a.chunks_exact(4);
    let b_chunks = b.chunks_exact(4);
    let a_rem = a_chunks.remainder();
    let b_rem = b_chunks.remainder();
    for (ca, cb) in a_chunks.zip(b_chunks) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut tail = 0.0;
    for (x, y) in a_rem.iter().zip(b_rem) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y[..., o, n] = sum_c w[o, c] * x[..., c, n] (+ bias[o])` over layout
/// `(..., channels, tokens)`.
pub fn channel_linear(
    tape: &mut Tape,
    x: Var,
    w: Var,
    bias: Option<Var>,
) -> Result<Var, TensorError> {
    let xv = tape.value(x);
    let wv = tape.value(w);
    let (o_n, c_n) = (wv.shape()[0], wv.shape()[1]);
    let r = xv.rank();
    if r < 2 || xv.shape()[r - 2] != c_n {
        return Err(TensorError::ShapeMismatch(format!(
            "channel_linear: input {:?} vs weight {:?}",
            xv.shape(),
            wv.shape()
        )));
    }
    let n_tok = xv.shape()[r - 1];
    let rows = xv.len() / (c_n * n_tok);
    let mut out_shape = xv.shape().to_vec();
    out_shape[r - 2] = o_n;
    let mut y = DenseTensor::zeros(&out_shape);
    {
        let x_data = tape.value(x).data();
        let w_data = tape.value(w).data();
        let bias_data: Option<&[f64]> = bias.map(|b| tape.value(b).data());
        let y_data = y.data_mut();
        for row in 0..rows {
            let x_base = row * c_n * n_tok;
            let y_base = row * o_n * n_tok;
            for o in 0..o_n {
                let y_row = &mut y_data[y_base + o * n_tok..y_base + (o + 1) * n_tok];
                if let Some(b) = bias_data {
                    y_row.iter_mut().for_each(|v| *v = b[o]);
                }
                let w_row = &w_data[o * c_n..(o + 1) * c_n];
                for (c, &w_oc) in w_row.iter().enumerate() {
                    if w_oc == 0.0 {
                        continue;
                    }
                    let x_row = &x_data[x_base + c * n_tok..x_base + (c + 1) * n_tok];
                    for (yv, &xv) in y_row.iter_mut().zip(x_row) {
                        *yv += w_oc * xv;
                    }
                }
            }
        }
    }
    let mut inputs = vec![x, w];
    if let Some(b) = bias {
        inputs.push(b);
    }
    let op: Option<Box<dyn CustomOp>> = if tape.wants_grad(&inputs) {
        Some(Box::new(ChannelLinearOp {
            has_bias: bias.is_some(),
        }))
    } else {
        None
    };
    Ok(tape.custom(&inputs, y, op))
}

// ---- 2D convolution (pre-token stages only) ----

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Debug)]
struct Conv2dOp {
    spec: Conv2dSpec,
    has_bias: bool,
}

fn conv2d_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Output rows/cols of `i` for which the tap at kernel offset `k` lands
/// inside `0..extent`: `lo <= i < hi` with `i*stride + k - padding` valid.
fn tap_range(extent: usize, out_extent: usize, stride: usize, padding: usize, k: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    let hi = if extent + padding > k {
        ((extent + padding - k - 1) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

impl CustomOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&DenseTensor],
        output: &DenseTensor,
        grad: &DenseTensor,
    ) -> Result<Vec<Option<DenseTensor>>, TensorError> {
        let (x, w) = (inputs[0], inputs[1]);
        let (b_n, ci, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, cig, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (ho, wo) = (output.shape()[2], output.shape()[3]);
        let Conv2dSpec {
            stride,
            padding,
            groups,
        } = self.spec;
        let co_per_g = co / groups;
        let mut gx = DenseTensor::zeros(x.shape());
        let mut gw = DenseTensor::zeros(w.shape());
        let mut gb = vec![0.0; co];
        let x_data = x.data();
        let w_data = w.data();
        let g_data = grad.data();
        for b in 0..b_n {
            for o in 0..co {
                let ci0 = (o / co_per_g) * cig;
                let g_plane = &g_data[((b * co + o) * ho) * wo..((b * co + o) * ho + ho) * wo];
                if self.has_bias {
                    gb[o] += g_plane.iter().sum::<f64>();
                }
                for cg in 0..cig {
                    let c = ci0 + cg;
                    let x_off = (b * ci + c) * h * wid;
                    let gx_off = x_off;
                    for u in 0..kh {
                        let (i_lo, i_hi) = tap_range(h, ho, stride, padding, u);
                        for v in 0..kw {
                            let (j_lo, j_hi) = tap_range(wid, wo, stride, padding, v);
                            let w_idx = ((o * cig + cg) * kh + u) * kw + v;
                            let wk = w_data[w_idx];
                            let mut acc = 0.0;
                            for i in i_lo..i_hi {
                                let hi = i * stride + u - padding;
                                let g_row = &g_plane[i * wo..(i + 1) * wo];
                                let x_row_off = x_off + hi * wid + v;
                                let gx_row =
                                    &mut gx.data_mut()[gx_off + hi * wid..gx_off + (hi + 1) * wid];
                                if stride == 1 {
                                    let x_row = &x_data
                                        [x_row_off + j_lo - padding..x_row_off + j_hi - padding];
                                    acc += dot_unrolled(&g_row[j_lo..j_hi], x_row);
                                    let gx_seg =
                                        &mut gx_row[j_lo + v - padding..j_hi + v - padding];
                                    for (gxv, &g) in gx_seg.iter_mut().zip(&g_row[j_lo..j_hi]) {
                                        *gxv += g * wk;
                                    }
                                } else {
                                    for j in j_lo..j_hi {
                                        let wi = j * stride + v - padding;
                                        let g = g_row[j];
                                        acc += g * x_data[x_row_off + j * stride - padding];
                                        gx_row[wi] += g * wk;
                                    }
                                }
                            }
                            gw.data_mut()[w_idx] += acc;
                        }
                    }
                }
            }
        }
        let mut grads = vec![Some(gx), Some(gw)];
        if self.has_bias {
            grads.push(Some(DenseTensor::new(vec![co], gb).unwrap()));
        }
        Ok(grads)
    }
}

/// 2D convolution over `(batch, channels, height, width)`. `groups`
/// splits channels; depthwise is `groups == channels` with weight
/// `(C, 1, kh, kw)`.
pub fn conv2d(
    tape: &mut Tape,
    x: Var,
    w: Var,
    bias: Option<Var>,
    spec: Conv2dSpec,
) -> Result<Var, TensorError> {
    let xv = tape.value(x);
    let wv = tape.value(w);
    if xv.rank() != 4 || wv.rank() != 4 {
        return Err(TensorError::ShapeMismatch(
            "conv2d expects rank-4 input and weight".into(),
        ));
    }
    let (b_n, ci, h, wid) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (co, cig, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    if ci != cig * spec.groups || co % spec.groups != 0 {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d channel grouping: input {ci}, weight {:?}, groups {}",
            wv.shape(),
            spec.groups
        )));
    }
    let ho = conv2d_out_dim(h, kh, spec.stride, spec.padding);
    let wo = conv2d_out_dim(wid, kw, spec.stride, spec.padding);
    let co_per_g = co / spec.groups;
    let (stride, padding) = (spec.stride, spec.padding);
    let mut y = DenseTensor::zeros(&[b_n, co, ho, wo]);
    {
        let x_data = xv.data();
        let w_data = wv.data();
        let bias_data: Option<&[f64]> = bias.map(|b| tape.value(b).data());
        let y_data = y.data_mut();
        for b in 0..b_n {
            for o in 0..co {
                let ci0 = (o / co_per_g) * cig;
                let y_plane =
                    &mut y_data[((b * co + o) * ho) * wo..((b * co + o) * ho + ho) * wo];
                if let Some(bd) = bias_data {
                    y_plane.iter_mut().for_each(|v| *v = bd[o]);
                }
                for cg in 0..cig {
                    let c = ci0 + cg;
                    let x_off = (b * ci + c) * h * wid;
                    for u in 0..kh {
                        let (i_lo, i_hi) = tap_range(h, ho, stride, padding, u);
                        for v in 0..kw {
                            let (j_lo, j_hi) = tap_range(wid, wo, stride, padding, v);
                            let wk = w_data[((o * cig + cg) * kh + u) * kw + v];
                            if wk == 0.0 {
                                continue;
                            }
                            for i in i_lo..i_hi {
                                let hi = i * stride + u - padding;
                                let x_row_off = x_off + hi * wid + v;
                                let y_row = &mut y_plane[i * wo..(i + 1) * wo];
                                for (j, yv) in
                                    y_row.iter_mut().enumerate().take(j_hi).skip(j_lo)
                                {
                                    *yv += wk * x_data[x_row_off + j * stride - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut inputs = vec![x, w];
    if let Some(b) = bias {
        inputs.push(b);
    }
    let op: Option<Box<dyn CustomOp>> = if tape.wants_grad(&inputs) {
        Some(Box::new(Conv2dOp {
            spec,
            has_bias: bias.is_some(),
        }))
    } else {
        None
    };
    Ok(tape.custom(&inputs, y, op))
}

// ---- depthwise causal convolution along the token axis ----

#[derive(Debug)]
struct DwConvTokensOp;

impl CustomOp for DwConvTokensOp {
    fn name(&self) -> &'static str {
        "dwconv_tokens"
    }

    fn backward(
        &self,
        inputs: &[&DenseTensor],
        _output: &DenseTensor,
        grad: &DenseTensor,
    ) -> Result<Vec<Option<DenseTensor>>, TensorError> {
        let (x, w) = (inputs[0], inputs[1]);
        let (c_n, k_n) = (w.shape()[0], w.shape()[1]);
        let n_tok = *x.shape().last().unwrap();
        let rows = x.len() / (c_n * n_tok);
        let mut gx = DenseTensor::zeros(x.shape());
        let mut gw = DenseTensor::zeros(w.shape());
        for r in 0..rows {
            for c in 0..c_n {
                let base = (r * c_n + c) * n_tok;
                for n in 0..n_tok {
                    let g = grad.data()[base + n];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..k_n {
                        let src = n as isize - (k_n as isize - 1) + j as isize;
                        if src < 0 {
                            continue;
                        }
                        gx.data_mut()[base + src as usize] += g * w.data()[c * k_n + j];
                        gw.data_mut()[c * k_n + j] += g * x.data()[base + src as usize];
                    }
                }
            }
        }
        Ok(vec![Some(gx), Some(gw)])
    }
}

/// Depthwise 1D convolution along the last (token) axis with causal left
/// zero padding: `y[..., c, n] = sum_j w[c, j] * x[..., c, n - K + 1 + j]`.
pub fn dwconv_tokens(tape: &mut Tape, x: Var, w: Var) -> Result<Var, TensorError> {
    let xv = tape.value(x).clone();
    let wv = tape.value(w).clone();
    let (c_n, k_n) = (wv.shape()[0], wv.shape()[1]);
    let r = xv.rank();
    if r < 2 || xv.shape()[r - 2] != c_n {
        return Err(TensorError::ShapeMismatch(format!(
            "dwconv_tokens: input {:?} vs weight {:?}",
            xv.shape(),
            wv.shape()
        )));
    }
    let n_tok = xv.shape()[r - 1];
    let rows = xv.len() / (c_n * n_tok);
    let mut y = DenseTensor::zeros(xv.shape());
    for row in 0..rows {
        for c in 0..c_n {
            let base = (row * c_n + c) * n_tok;
            let w_row = &wv.data()[c * k_n..(c + 1) * k_n];
            for n in 0..n_tok {
                let mut acc = 0.0;
                for (j, &wj) in w_row.iter().enumerate() {
                    let src = n as isize - (k_n as isize - 1) + j as isize;
                    if src >= 0 {
                        acc += wj * xv.data()[base + src as usize];
                    }
                }
                y.data_mut()[base + n] = acc;
            }
        }
    }
    let op: Option<Box<dyn CustomOp>> = if tape.wants_grad(&[x, w]) {
        Some(Box::new(DwConvTokensOp))
    } else {
        None
    };
    Ok(tape.custom(&[x, w], y, op))
}

// ---- token gather (pruning reindex) and valid-prefix reverse ----

#[derive(Debug)]
struct GatherTokensOp {
    indices: Rc<Vec<Vec<usize>>>,
    in_n: usize,
}

impl CustomOp for GatherTokensOp {
    fn name(&self) -> &'static str {
        "gather_tokens"
    }

    fn backward(
        &self,
        inputs: &[&DenseTensor],
        output: &DenseTensor,
        grad: &DenseTensor,
    ) -> Result<Vec<Option<DenseTensor>>, TensorError> {
        let x = inputs[0];
        let out_n = *output.shape().last().unwrap();
        let b_n = self.indices.len();
        let per_sample = x.len() / (b_n * self.in_n);
        let mut gx = DenseTensor::zeros(x.shape());
        for b in 0..b_n {
            let kept = &self.indices[b];
            for rc in 0..per_sample {
                let src = (b * per_sample + rc) * out_n;
                let dst = (b * per_sample + rc) * self.in_n;
                for (i, &n) in kept.iter().enumerate() {
                    gx.data_mut()[dst + n] += grad.data()[src + i];
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Compact per-sample token subsets into a zero-padded tensor; gradients
/// scatter back to the surviving positions only.
pub fn gather_tokens(
    tape: &mut Tape,
    x: Var,
    mask: &TokenMask,
) -> Result<Var, TensorError> {
    let xv = tape.value(x);
    let shape = xv.shape().to_vec();
    let in_n = *shape.last().unwrap();
    let b_n = mask.batch();
    if shape[0] != b_n {
        return Err(TensorError::ShapeMismatch(format!(
            "gather_tokens: batch {} vs mask batch {}",
            shape[0], b_n
        )));
    }
    let out_n = mask.padded_len();
    let per_sample = xv.len() / (b_n * in_n);
    let mut out_shape = shape.clone();
    *out_shape.last_mut().unwrap() = out_n;
    let mut y = DenseTensor::zeros(&out_shape);
    for b in 0..b_n {
        let kept = &mask.kept_indices()[b];
        for rc in 0..per_sample {
            let src = (b * per_sample + rc) * in_n;
            let dst = (b * per_sample + rc) * out_n;
            for (i, &n) in kept.iter().enumerate() {
                y.data_mut()[dst + i] = xv.data()[src + n];
            }
        }
    }
    let op: Option<Box<dyn CustomOp>> = if tape.wants_grad(&[x]) {
        Some(Box::new(GatherTokensOp {
            indices: Rc::new(mask.kept_indices().to_vec()),
            in_n,
        }))
    } else {
        None
    };
    Ok(tape.custom(&[x], y, op))
}

#[derive(Debug)]
struct ReverseTokensOp {
    counts: Rc<Vec<usize>>,
}

fn reverse_valid_prefix(x: &DenseTensor, counts: &[usize]) -> DenseTensor {
    let n_tok = *x.shape().last().unwrap();
    let b_n = counts.len();
    let per_sample = x.len() / (b_n * n_tok);
    let mut y = x.clone();
    for b in 0..b_n {
        let count = counts[b];
        for rc in 0..per_sample {
            let base = (b * per_sample + rc) * n_tok;
            for i in 0..count {
                y.data_mut()[base + i] = x.data()[base + count - 1 - i];
            }
        }
    }
    y
}

impl CustomOp for ReverseTokensOp {
    fn name(&self) -> &'static str {
        "reverse_tokens"
    }

    fn backward(
        &self,
        _inputs: &[&DenseTensor],
        _output: &DenseTensor,
        grad: &DenseTensor,
    ) -> Result<Vec<Option<DenseTensor>>, TensorError> {
        // The reversal is a self-inverse permutation.
        Ok(vec![Some(reverse_valid_prefix(grad, &self.counts))])
    }
}

/// Reverse only the valid prefix of each sample along the token axis;
/// padded tail slots stay in place.
pub fn reverse_tokens(tape: &mut Tape, x: Var, mask: &TokenMask) -> Result<Var, TensorError> {
    let xv = tape.value(x);
    let b_n = mask.batch();
    if xv.shape()[0] != b_n {
        return Err(TensorError::ShapeMismatch(format!(
            "reverse_tokens: batch {} vs mask batch {}",
            xv.shape()[0],
            b_n
        )));
    }
    let y = reverse_valid_prefix(xv, mask.kept_counts());
    let op: Option<Box<dyn CustomOp>> = if tape.wants_grad(&[x]) {
        Some(Box::new(ReverseTokensOp {
            counts: Rc::new(mask.kept_counts().to_vec()),
        }))
    } else {
        None
    };
    Ok(tape.custom(&[x], y, op))
}

// ---- batch normalization ----

/// Which positions enter the normalization statistics.
#[derive(Debug, Clone)]
pub enum BnScope {
    /// `(batch, C, H, W)`: every spatial position of every sample.
    Grid,
    /// `(B, T, C, N)`: only token slots marked valid by the mask.
    Tokens(TokenMask),
}

fn bn_weights(scope: &BnScope, shape: &[usize]) -> DenseTensor {
    match scope {
        BnScope::Grid => DenseTensor::ones(shape),
        BnScope::Tokens(mask) => {
            let (b_n, t_n, c_n, n_tok) = (shape[0], shape[1], shape[2], shape[3]);
            let mut w = DenseTensor::zeros(shape);
            for b in 0..b_n {
                let count = mask.kept_counts()[b];
                for tc in 0..t_n * c_n {
                    let base = (b * t_n * c_n + tc) * n_tok;
                    for n in 0..count {
                        w.data_mut()[base + n] = 1.0;
                    }
                }
            }
            w
        }
    }
}

fn bn_channel_axis(scope: &BnScope) -> usize {
    match scope {
        BnScope::Grid => 1,
        BnScope::Tokens(_) => 2,
    }
}

#[derive(Debug)]
struct BatchNormTrainOp {
    ch_axis: usize,
    weights: DenseTensor,
    x_hat: DenseTensor,
    inv_std: Vec<f64>,
    count: f64,
}

impl CustomOp for BatchNormTrainOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(
        &self,
        inputs: &[&DenseTensor],
        _output: &DenseTensor,
        grad: &DenseTensor,
    ) -> Result<Vec<Option<DenseTensor>>, TensorError> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c_n = x.shape()[self.ch_axis];
        let outer: usize = x.shape()[..self.ch_axis].iter().product();
        let inner: usize = x.shape()[self.ch_axis + 1..].iter().product();
        let mut d_gamma = vec![0.0; c_n];
        let mut d_beta = vec![0.0; c_n];
        for o in 0..outer {
            for c in 0..c_n {
                let base = (o * c_n + c) * inner;
                for i in 0..inner {
                    let idx = base + i;
                    let gw = grad.data()[idx] * self.weights.data()[idx];
                    d_beta[c] += gw;
                    d_gamma[c] += gw * self.x_hat.data()[idx];
                }
            }
        }
        let mut gx = DenseTensor::zeros(x.shape());
        for o in 0..outer {
            for c in 0..c_n {
                let scale = gamma.data()[c] * self.inv_std[c];
                let mean_g = d_beta[c] / self.count;
                let mean_gx = d_gamma[c] / self.count;
                let base = (o * c_n + c) * inner;
                for i in 0..inner {
                    let idx = base + i;
                    let w = self.weights.data()[idx];
                    if w == 0.0 {
                        continue;
                    }
                    let gw = grad.data()[idx] * w;
                    gx.data_mut()[idx] =
                        scale * (gw - mean_g - self.x_hat.data()[idx] * mean_gx);
                }
            }
        }
        Ok(vec![
            Some(gx),
            Some(DenseTensor::new(gamma.shape().to_vec(), d_gamma).unwrap()),
            Some(DenseTensor::new(gamma.shape().to_vec(), d_beta).unwrap()),
        ])
    }
}

/// Batch statistics computed by a training-mode batch norm, for running
/// stat updates by the caller.
pub struct BnBatchStats {
    pub mean: DenseTensor,
    pub var: DenseTensor,
}

/// Training-mode batch norm: per-channel statistics over the positions
/// selected by `scope` (population variance), output forced to zero at
/// masked positions.
pub fn batch_norm_train(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    scope: &BnScope,
    eps: f64,
) -> Result<(Var, BnBatchStats), TensorError> {
    let xv = tape.value(x).clone();
    let ch_axis = bn_channel_axis(scope);
    let c_n = xv.shape()[ch_axis];
    let weights = bn_weights(scope, xv.shape());
    let outer: usize = xv.shape()[..ch_axis].iter().product();
    let inner: usize = xv.shape()[ch_axis + 1..].iter().product();
    // Per-channel position count is channel-independent for both scopes.
    let count: f64 = weights.data().iter().sum::<f64>() / c_n as f64;
    if count < 1.0 {
        return Err(TensorError::ShapeMismatch(
            "batch norm needs at least one valid position".into(),
        ));
    }
    let mut mean = vec![0.0; c_n];
    let mut var = vec![0.0; c_n];
    for o in 0..outer {
        for c in 0..c_n {
            let base = (o * c_n + c) * inner;
            for i in 0..inner {
                mean[c] += xv.data()[base + i] * weights.data()[base + i];
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for o in 0..outer {
        for c in 0..c_n {
            let base = (o * c_n + c) * inner;
            for i in 0..inner {
                let d = (xv.data()[base + i] - mean[c]) * weights.data()[base + i];
                var[c] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let gamma_v = tape.value(gamma).clone();
    let beta_v = tape.value(beta).clone();
    let mut x_hat = DenseTensor::zeros(xv.shape());
    let mut y = DenseTensor::zeros(xv.shape());
    for o in 0..outer {
        for c in 0..c_n {
            let base = (o * c_n + c) * inner;
            for i in 0..inner {
                let idx = base + i;
                let w = weights.data()[idx];
                let xh = (xv.data()[idx] - mean[c]) * inv_std[c] * w;
                x_hat.data_mut()[idx] = xh;
                y.data_mut()[idx] = (gamma_v.data()[c] * xh + beta_v.data()[c]) * w;
            }
        }
    }
    let stats = BnBatchStats {
        mean: DenseTensor::new(vec![c_n], mean).unwrap(),
        var: DenseTensor::new(vec![c_n], var).unwrap(),
    };
    let inputs = [x, gamma, beta];
    let op: Option<Box<dyn CustomOp>> = if tape.wants_grad(&inputs) {
        Some(Box::new(BatchNormTrainOp {
            ch_axis,
            weights,
            x_hat,
            inv_std,
            count,
        }))
    } else {
        None
    };
    Ok((tape.custom(&inputs, y, op), stats))
}

/// Eval-mode batch norm from running statistics; a per-position affine
/// map, masked positions output zero.
pub fn batch_norm_eval(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &DenseTensor,
    running_var: &DenseTensor,
    scope: &BnScope,
    eps: f64,
) -> Result<Var, TensorError> {
    let ch_axis = bn_channel_axis(scope);
    let rank = tape.value(x).rank();
    let c_n = running_mean.len();
    // reshape (C) stats to broadcast against (..., C, trailing...)
    let mut bshape = vec![1usize; rank - ch_axis];
    bshape[0] = c_n;
    let mean = tape.leaf(running_mean.reshape(&bshape)?);
    let inv = tape.leaf(
        running_var
            .map(|v| 1.0 / (v + eps).sqrt())
            .reshape(&bshape)?,
    );
    let gamma_b = tape.reshape(gamma, &bshape)?;
    let beta_b = tape.reshape(beta, &bshape)?;
    let centered = tape.sub(x, mean)?;
    let scaled = tape.mul(centered, inv)?;
    let with_gamma = tape.mul(scaled, gamma_b)?;
    let y = tape.add(with_gamma, beta_b)?;
    match scope {
        BnScope::Grid => Ok(y),
        BnScope::Tokens(mask) => {
            let bits = mask.bits();
            let b_n = bits.shape()[0];
            let n_tok = bits.shape()[1];
            let m = tape.leaf(bits.reshape(&[b_n, 1, 1, n_tok])?);
            tape.mul(y, m)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::SeededRng;
    use crate::tensor::gradcheck::check_gradients;

    #[test]
    fn channel_linear_gradients() {
        let mut rng = SeededRng::new(21);
        let x = rng.uniform_tensor(&[2, 2, 3, 4], -1.0, 1.0);
        let w = rng.uniform_tensor(&[5, 3], -1.0, 1.0);
        let b = rng.uniform_tensor(&[5], -0.5, 0.5);
        let err = check_gradients(
            |tape, vars| {
                let y = channel_linear(tape, vars[0], vars[1], Some(vars[2]))?;
                let sq = tape.mul(y, y)?;
                let s = tape.sum_axis(sq, 3)?;
                let s = tape.sum_axis(s, 2)?;
                let s = tape.sum_axis(s, 1)?;
                tape.mean_axis(s, 0)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn conv2d_matches_hand_example_and_gradients() {
        let mut rng = SeededRng::new(22);
        let x = rng.uniform_tensor(&[1, 2, 5, 5], -1.0, 1.0);
        let w = rng.uniform_tensor(&[3, 2, 3, 3], -1.0, 1.0);
        let b = rng.uniform_tensor(&[3], -0.5, 0.5);
        let spec = Conv2dSpec {
            stride: 2,
            padding: 1,
            groups: 1,
        };
        // shape check: (5 + 2 - 3)/2 + 1 = 3
        let mut tape = crate::tensor::tape::Tape::no_grad();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let y = conv2d(&mut tape, xv, wv, Some(bv), spec).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 3, 3]);

        let err = check_gradients(
            |tape, vars| {
                let y = conv2d(tape, vars[0], vars[1], Some(vars[2]), spec)?;
                let sq = tape.mul(y, y)?;
                let s = tape.sum_axis(sq, 3)?;
                let s = tape.sum_axis(s, 2)?;
                let s = tape.sum_axis(s, 1)?;
                tape.mean_axis(s, 0)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn depthwise_conv2d_gradients() {
        let mut rng = SeededRng::new(23);
        let x = rng.uniform_tensor(&[2, 3, 4, 4], -1.0, 1.0);
        let w = rng.uniform_tensor(&[3, 1, 3, 3], -1.0, 1.0);
        let spec = Conv2dSpec {
            stride: 1,
            padding: 1,
            groups: 3,
        };
        let err = check_gradients(
            |tape, vars| {
                let y = conv2d(tape, vars[0], vars[1], None, spec)?;
                let sq = tape.mul(y, y)?;
                let s = tape.sum_axis(sq, 3)?;
                let s = tape.sum_axis(s, 2)?;
                let s = tape.sum_axis(s, 1)?;
                tape.mean_axis(s, 0)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn dwconv_tokens_causal_and_gradients() {
        // Kernel [0, 0, 0, 1] must reproduce the input exactly (identity tap).
        let mut tape = crate::tensor::tape::Tape::no_grad();
        let x = tape.leaf(
            DenseTensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let w = tape.leaf(DenseTensor::new(vec![1, 4], vec![0.0, 0.0, 0.0, 1.0]).unwrap());
        let y = dwconv_tokens(&mut tape, x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        // Shift tap [0, 0, 1, 0]: causal left pad, first output is zero.
        let w2 = tape.leaf(DenseTensor::new(vec![1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let y2 = dwconv_tokens(&mut tape, x, w2).unwrap();
        assert_eq!(tape.value(y2).data(), &[0.0, 1.0, 2.0, 3.0]);

        let mut rng = SeededRng::new(24);
        let xr = rng.uniform_tensor(&[2, 2, 3, 6], -1.0, 1.0);
        let wr = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        let err = check_gradients(
            |tape, vars| {
                let y = dwconv_tokens(tape, vars[0], vars[1])?;
                let sq = tape.mul(y, y)?;
                let s = tape.sum_axis(sq, 3)?;
                let s = tape.sum_axis(s, 2)?;
                let s = tape.sum_axis(s, 1)?;
                tape.mean_axis(s, 0)
            },
            &[xr, wr],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn gather_scatters_gradient_to_kept_positions_only() {
        let mask = TokenMask::new(vec![vec![0, 2], vec![1]]);
        let x = DenseTensor::new(
            vec![2, 1, 1, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        let mut tape = crate::tensor::tape::Tape::new();
        let xv = tape.param(x.clone());
        let y = gather_tokens(&mut tape, xv, &mask).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 5.0, 0.0]);
        let sq = tape.mul(y, y).unwrap();
        let s = tape.sum_axis(sq, 3).unwrap();
        let s = tape.sum_axis(s, 2).unwrap();
        let s = tape.sum_axis(s, 1).unwrap();
        let loss = tape.sum_axis(s, 0).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d/dx of sum(y^2): 2*y at kept positions, 0 elsewhere
        assert_eq!(
            grads.get(xv).unwrap().data(),
            &[2.0, 0.0, 6.0, 0.0, 10.0, 0.0]
        );
    }

    #[test]
    fn reverse_tokens_only_touches_valid_prefix() {
        let mask = TokenMask::new(vec![vec![0, 1, 2], vec![0, 1]]);
        // second sample padded to 3 with one dead slot
        let x = DenseTensor::new(
            vec![2, 1, 1, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0],
        )
        .unwrap();
        let mut tape = crate::tensor::tape::Tape::no_grad();
        let xv = tape.leaf(x);
        let y = reverse_tokens(&mut tape, xv, &mask).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 2.0, 1.0, 5.0, 4.0, 9.0]);
    }

    #[test]
    fn reverse_is_self_inverse() {
        let mut rng = SeededRng::new(25);
        let mask = TokenMask::new(vec![vec![0, 1, 2, 3], vec![0, 1]]);
        let x = rng.uniform_tensor(&[2, 2, 2, 4], -1.0, 1.0);
        let mut tape = crate::tensor::tape::Tape::no_grad();
        let xv = tape.leaf(x.clone());
        let y = reverse_tokens(&mut tape, xv, &mask).unwrap();
        let z = reverse_tokens(&mut tape, y, &mask).unwrap();
        assert_eq!(tape.value(z).data(), x.data());
    }

    #[test]
    fn batch_norm_full_mask_matches_plain_stats() {
        let mut rng = SeededRng::new(26);
        let x = rng.uniform_tensor(&[2, 2, 3, 4], -1.0, 1.0);
        let gamma = DenseTensor::ones(&[3]);
        let beta = DenseTensor::zeros(&[3]);
        let mask = TokenMask::full(2, 4);
        let mut tape = crate::tensor::tape::Tape::no_grad();
        let xv = tape.leaf(x.clone());
        let gv = tape.leaf(gamma);
        let bv = tape.leaf(beta);
        let (y, stats) =
            batch_norm_train(&mut tape, xv, gv, bv, &BnScope::Tokens(mask), 1e-5).unwrap();
        // channel mean over (B,T,N)
        for c in 0..3 {
            let mut acc = 0.0;
            for b in 0..2 {
                for t in 0..2 {
                    for n in 0..4 {
                        acc += x.at(&[b, t, c, n]);
                    }
                }
            }
            assert!((stats.mean.data()[c] - acc / 16.0).abs() < 1e-12);
        }
        // normalized output has ~zero mean per channel
        let yv = tape.value(y);
        for c in 0..3 {
            let mut acc = 0.0;
            for b in 0..2 {
                for t in 0..2 {
                    for n in 0..4 {
                        acc += yv.at(&[b, t, c, n]);
                    }
                }
            }
            assert!(acc.abs() < 1e-10);
        }
    }

    #[test]
    fn batch_norm_pad_invariance() {
        let mut rng = SeededRng::new(27);
        // two valid tokens, then same data with two masked zero slots appended
        let x_short = rng.uniform_tensor(&[1, 2, 2, 2], -1.0, 1.0);
        let mut x_long = DenseTensor::zeros(&[1, 2, 2, 4]);
        for t in 0..2 {
            for c in 0..2 {
                for n in 0..2 {
                    let v = x_short.at(&[0, t, c, n]);
                    x_long.data_mut()[((t * 2) + c) * 4 + n] = v;
                }
            }
        }
        let gamma = rng.uniform_tensor(&[2], 0.5, 1.5);
        let beta = rng.uniform_tensor(&[2], -0.5, 0.5);
        let run = |x: DenseTensor, mask: TokenMask| {
            let mut tape = crate::tensor::tape::Tape::no_grad();
            let xv = tape.leaf(x);
            let gv = tape.leaf(gamma.clone());
            let bv = tape.leaf(beta.clone());
            let (y, _) =
                batch_norm_train(&mut tape, xv, gv, bv, &BnScope::Tokens(mask), 1e-5).unwrap();
            tape.value(y).clone()
        };
        let y_short = run(x_short, TokenMask::full(1, 2));
        let y_long = run(x_long, TokenMask::new(vec![vec![0, 1]]));
        for t in 0..2 {
            for c in 0..2 {
                for n in 0..2 {
                    let a = y_short.at(&[0, t, c, n]);
                    let b = y_long.at(&[0, t, c, n]);
                    assert!((a - b).abs() < 1e-10);
                }
                // masked slots exactly zero
                for n in 2..4 {
                    assert_eq!(y_long.at(&[0, t, c, n]), 0.0);
                }
            }
        }
    }

    #[test]
    fn batch_norm_single_token_zero_variance() {
        // One valid token per sample, constant per channel: output is beta
        // at that token (zero with default beta), and finite.
        let x = DenseTensor::full(&[2, 1, 2, 3], 0.0);
        let mut x = x;
        for b in 0..2 {
            for c in 0..2 {
                x.data_mut()[(b * 2 + c) * 3] = 0.7;
            }
        }
        let mask = TokenMask::new(vec![vec![0], vec![0]]);
        let mut tape = crate::tensor::tape::Tape::no_grad();
        let xv = tape.leaf(x);
        let gv = tape.leaf(DenseTensor::ones(&[2]));
        let bv = tape.leaf(DenseTensor::zeros(&[2]));
        let (y, stats) =
            batch_norm_train(&mut tape, xv, gv, bv, &BnScope::Tokens(mask), 1e-5).unwrap();
        assert!(stats.var.data().iter().all(|&v| v.abs() < 1e-15));
        assert!(tape.value(y).all_finite());
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_gradients_tokens_scope() {
        let mut rng = SeededRng::new(28);
        let x = rng.uniform_tensor(&[2, 2, 3, 4], -1.0, 1.0);
        let gamma = rng.uniform_tensor(&[3], 0.5, 1.5);
        let beta = rng.uniform_tensor(&[3], -0.5, 0.5);
        let mask = TokenMask::new(vec![vec![0, 1, 3], vec![0, 2]]);
        let err = check_gradients(
            |tape, vars| {
                let (y, _) = batch_norm_train(
                    tape,
                    vars[0],
                    vars[1],
                    vars[2],
                    &BnScope::Tokens(mask.clone()),
                    1e-5,
                )?;
                let sq = tape.mul(y, y)?;
                let s = tape.sum_axis(sq, 3)?;
                let s = tape.sum_axis(s, 2)?;
                let s = tape.sum_axis(s, 1)?;
                tape.mean_axis(s, 0)
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn batch_norm_eval_matches_affine_formula() {
        let mut rng = SeededRng::new(29);
        let x = rng.uniform_tensor(&[1, 1, 2, 3], -1.0, 1.0);
        let gamma = rng.uniform_tensor(&[2], 0.5, 1.5);
        let beta = rng.uniform_tensor(&[2], -0.5, 0.5);
        let mean = rng.uniform_tensor(&[2], -0.2, 0.2);
        let var = rng.uniform_tensor(&[2], 0.5, 1.0);
        let mask = TokenMask::full(1, 3);
        let mut tape = crate::tensor::tape::Tape::no_grad();
        let xv = tape.leaf(x.clone());
        let gv = tape.leaf(gamma.clone());
        let bv = tape.leaf(beta.clone());
        let y = batch_norm_eval(
            &mut tape,
            xv,
            gv,
            bv,
            &mean,
            &var,
            &BnScope::Tokens(mask),
            1e-5,
        )
        .unwrap();
        for c in 0..2 {
            for n in 0..3 {
                let expect = (x.at(&[0, 0, c, n]) - mean.data()[c])
                    / (var.data()[c] + 1e-5).sqrt()
                    * gamma.data()[c]
                    + beta.data()[c];
                assert!((tape.value(y).at(&[0, 0, c, n]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_batch_norm_gradients() {
        let mut rng = SeededRng::new(30);
        let x = rng.uniform_tensor(&[2, 2, 3, 3], -1.0, 1.0);
        let gamma = rng.uniform_tensor(&[2], 0.5, 1.5);
        let beta = rng.uniform_tensor(&[2], -0.5, 0.5);
        let err = check_gradients(
            |tape, vars| {
                let (y, _) =
                    batch_norm_train(tape, vars[0], vars[1], vars[2], &BnScope::Grid, 1e-5)?;
                let sq = tape.mul(y, y)?;
                let s = tape.sum_axis(sq, 3)?;
                let s = tape.sum_axis(s, 2)?;
                let s = tape.sum_axis(s, 1)?;
                tape.mean_axis(s, 0)
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
