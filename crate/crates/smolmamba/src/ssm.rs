//! Input-dependent (selective) diagonal state-space scans over the token
//! dimension.
//!
//! Per scan position `k` with feature vector `u_k`:
//!
//! ```text
//! delta_k = softplus(w_delta . u_k + delta_bias)          (scalar)
//! B_k = W_B u_k,  C_k = W_C u_k                           (state vectors)
//! A_bar[c,s] = exp(delta_k * lambda[c,s])                 (0 < A_bar < 1)
//! B_bar[c,s] = (A_bar[c,s] - 1) / lambda[c,s] * B_k[s]
//! h_k[c,s]   = A_bar[c,s] * h_{k-1}[c,s] + B_bar[c,s] * u_k[c]
//! y_k[c]     = sum_s C_k[s] * h_k[c,s] + D[c] * u_k[c]
//! ```
//!
//! The state coefficients are zero-order-hold discretizations of a
//! diagonal continuous system; `lambda` stays strictly negative through
//! the `-softplus(raw)` parameterization, clamped away from zero by
//! [`EPSILON_LAMBDA`], so every `A_bar` lies in (0, 1) and the scan is
//! stable. Wall time and memory are linear in the token count.

use thiserror::Error;

use crate::init::SeededRng;
use crate::pruner::TokenMask;
use crate::tensor::tape::{CustomOp, Tape, Var};
use crate::tensor::{sigmoid, softplus, DenseTensor, TensorError};

/// Lower bound on `|lambda|`; division by lambda in the ZOH formula is
/// safe because the parameterization clamps to this.
pub const EPSILON_LAMBDA: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsmError {
    #[error("delta must be strictly positive everywhere")]
    NonPositiveDelta,
    #[error("lambda must stay below -{EPSILON_LAMBDA}")]
    LambdaTooCloseToZero,
    #[error("bad SSM input: {0}")]
    ShapeMismatch(String),
}

/// Learnable parameters of one scan direction.
///
/// `lambda_raw` parameterizes the diagonal state matrix as
/// `lambda = -softplus(lambda_raw)`; `w_delta`/`delta_bias` generate the
/// per-step discretization step, `w_b`/`w_c` the input and output
/// projections, and `d_skip` the per-channel skip path.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub lambda_raw: DenseTensor, // (C, S)
    pub w_delta: DenseTensor,    // (C)
    pub delta_bias: DenseTensor, // (1)
    pub w_b: DenseTensor,        // (S, C)
    pub w_c: DenseTensor,        // (S, C)
    pub d_skip: DenseTensor,     // (C)
}

fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1), stable for the init ranges used here
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

impl SsmParams {
    /// Ramp init: `lambda[c, s] = -(s + 1)`; `delta_bias` set so the
    /// initial step size is log-uniform in [0.001, 0.1].
    pub fn init(channels: usize, state_dim: usize, rng: &mut SeededRng) -> Self {
        let mut lambda_raw = DenseTensor::zeros(&[channels, state_dim]);
        for c in 0..channels {
            for s in 0..state_dim {
                lambda_raw.data_mut()[c * state_dim + s] = softplus_inverse((s + 1) as f64);
            }
        }
        let dt = (rng.uniform((0.001f64).ln(), (0.1f64).ln())).exp();
        Self {
            lambda_raw,
            w_delta: rng.linear_init(&[channels], channels),
            delta_bias: DenseTensor::new(vec![1], vec![softplus_inverse(dt)]).unwrap(),
            w_b: rng.linear_init(&[state_dim, channels], channels),
            w_c: rng.linear_init(&[state_dim, channels], channels),
            d_skip: DenseTensor::ones(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_delta.len()
    }

    pub fn state_dim(&self) -> usize {
        self.w_b.shape()[0]
    }

    /// Effective diagonal: `min(-softplus(raw), -EPSILON_LAMBDA)`.
    pub fn lambda_effective(&self) -> DenseTensor {
        self.lambda_raw.map(|r| -softplus(r).max(EPSILON_LAMBDA))
    }
}

/// Zero-order-hold discretization of a diagonal system.
///
/// `A_bar = exp(delta * lambda)` and
/// `B_bar = ((exp(delta * lambda) - 1) / lambda) * b`, elementwise with
/// trailing-dimension broadcasting. Every `A_bar` entry lies in (0, 1).
pub fn discretize_zoh(
    lambda: &DenseTensor,
    delta: &DenseTensor,
    b: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor), SsmError> {
    if delta.data().iter().any(|&d| d <= 0.0) {
        return Err(SsmError::NonPositiveDelta);
    }
    if lambda.data().iter().any(|&l| l >= -EPSILON_LAMBDA) {
        return Err(SsmError::LambdaTooCloseToZero);
    }
    let to_shape = |e: TensorError| SsmError::ShapeMismatch(e.to_string());
    let dl = delta.mul(lambda).map_err(to_shape)?;
    let a_bar = dl.exp();
    let b_bar = a_bar
        .map(|a| a - 1.0)
        .div(lambda)
        .map_err(to_shape)?
        .mul(b)
        .map_err(to_shape)?;
    Ok((a_bar, b_bar))
}

/// Flat parameter views used by the scan kernels.
struct KernelParams<'a> {
    lambda: Vec<f64>, // effective, (C*S)
    w_delta: &'a [f64],
    delta_bias: f64,
    w_b: &'a [f64],
    w_c: &'a [f64],
    d_skip: &'a [f64],
    s_n: usize,
}

impl<'a> KernelParams<'a> {
    fn from(params: &'a SsmParams) -> Self {
        Self {
            lambda: params.lambda_effective().into_data(),
            w_delta: params.w_delta.data(),
            delta_bias: params.delta_bias.item(),
            w_b: params.w_b.data(),
            w_c: params.w_c.data(),
            d_skip: params.d_skip.data(),
            s_n: params.state_dim(),
        }
    }
}

/// Sequential scan forward. `x` is `(rows, C, N)` flattened; returns `y`
/// of the same shape and, when `save_h` is set, the full state history
/// `(rows, N, C, S)` for the backward pass.
fn scan_forward(
    x: &DenseTensor,
    kp: &KernelParams,
    save_h: bool,
) -> (DenseTensor, Option<(DenseTensor, DenseTensor)>) {
    let shape = x.shape();
    let (rows, c_n, n_tok) = (shape[0], shape[1], shape[2]);
    let s_n = kp.s_n;
    let mut y = DenseTensor::zeros(shape);
    let mut hist = if save_h {
        Some((
            DenseTensor::zeros(&[rows, n_tok, c_n, s_n]),
            DenseTensor::zeros(&[rows, n_tok, c_n, s_n]),
        ))
    } else {
        None
    };
    let mut abar_row = vec![0.0; c_n * s_n];
    // Precomputed coefficients for all-zero input columns: delta reduces
    // to softplus(delta_bias) and only the state decay runs.
    let d0 = softplus(kp.delta_bias);
    let a_bar0: Vec<f64> = kp.lambda.iter().map(|&l| (d0 * l).exp()).collect();

    let mut h = vec![0.0; c_n * s_n];
    let mut u = vec![0.0; c_n];
    let mut beta = vec![0.0; s_n];
    let mut gamma = vec![0.0; s_n];
    for row in 0..rows {
        h.iter_mut().for_each(|v| *v = 0.0);
        let x_base = row * c_n * n_tok;
        for k in 0..n_tok {
            let mut any = false;
            for c in 0..c_n {
                let v = x.data()[x_base + c * n_tok + k];
                u[c] = v;
                any |= v != 0.0;
            }
            if any {
                let mut p = kp.delta_bias;
                for c in 0..c_n {
                    p += kp.w_delta[c] * u[c];
                }
                let d = softplus(p);
                for s in 0..s_n {
                    let (mut bs, mut cs) = (0.0, 0.0);
                    let wb_row = &kp.w_b[s * c_n..(s + 1) * c_n];
                    let wc_row = &kp.w_c[s * c_n..(s + 1) * c_n];
                    for c in 0..c_n {
                        bs += wb_row[c] * u[c];
                        cs += wc_row[c] * u[c];
                    }
                    beta[s] = bs;
                    gamma[s] = cs;
                }
                for c in 0..c_n {
                    let uc = u[c];
                    let h_row = &mut h[c * s_n..(c + 1) * s_n];
                    let lam_row = &kp.lambda[c * s_n..(c + 1) * s_n];
                    let ab_row = &mut abar_row[c * s_n..(c + 1) * s_n];
                    let mut acc = 0.0;
                    for s in 0..s_n {
                        let lam = lam_row[s];
                        let a_bar = (d * lam).exp();
                        ab_row[s] = a_bar;
                        let b_bar = (a_bar - 1.0) / lam * beta[s];
                        let hv = a_bar * h_row[s] + b_bar * uc;
                        h_row[s] = hv;
                        acc += gamma[s] * hv;
                    }
                    y.data_mut()[x_base + c * n_tok + k] = acc + kp.d_skip[c] * uc;
                }
            } else {
                // zero column: y stays 0, state decays by the constant factor
                for (hv, &a0) in h.iter_mut().zip(&a_bar0) {
                    *hv *= a0;
                }
                abar_row.copy_from_slice(&a_bar0);
            }
            if let Some((hh, ab)) = hist.as_mut() {
                let dst = (row * n_tok + k) * c_n * s_n;
                hh.data_mut()[dst..dst + c_n * s_n].copy_from_slice(&h);
                ab.data_mut()[dst..dst + c_n * s_n].copy_from_slice(&abar_row);
            }
        }
    }
    (y, hist)
}

/// Gradients of the scan, in the input order of [`selective_scan_tape`]:
/// `[x, lambda_raw, w_delta, delta_bias, w_b, w_c, d_skip]`.
struct ScanBackward {
    h_hist: DenseTensor,    // (rows, N, C, S)
    abar_hist: DenseTensor, // decay coefficients saved by the forward pass
}

impl std::fmt::Debug for ScanBackward {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ScanBackward")
    }
}

impl CustomOp for ScanBackward {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&DenseTensor],
        _output: &DenseTensor,
        grad: &DenseTensor,
    ) -> Result<Vec<Option<DenseTensor>>, TensorError> {
        let [x, lambda_raw, w_delta, delta_bias, w_b, w_c, d_skip] = inputs else {
            panic!("selective_scan expects 7 inputs");
        };
        let shape = x.shape();
        let (rows, c_n, n_tok) = (shape[0], shape[1], shape[2]);
        let s_n = lambda_raw.shape()[1];
        let cs = c_n * s_n;
        let lambda: Vec<f64> = lambda_raw
            .data()
            .iter()
            .map(|&r| -softplus(r).max(EPSILON_LAMBDA))
            .collect();
        let bias = delta_bias.item();
        let d0 = softplus(bias);
        let sig_p0 = sigmoid(bias);

        let mut gx = DenseTensor::zeros(shape);
        let mut g_lambda = vec![0.0; cs];
        let mut g_w_delta = vec![0.0; c_n];
        let mut g_bias = 0.0;
        let mut g_w_b = vec![0.0; s_n * c_n];
        let mut g_w_c = vec![0.0; s_n * c_n];
        let mut g_d = vec![0.0; c_n];

        let mut gh = vec![0.0; cs];
        let mut u = vec![0.0; c_n];
        let mut gu = vec![0.0; c_n];
        let mut beta = vec![0.0; s_n];
        let mut gamma = vec![0.0; s_n];
        let mut g_beta = vec![0.0; s_n];
        let mut g_gamma = vec![0.0; s_n];
        let zeros_cs = vec![0.0; cs];

        for row in 0..rows {
            gh.iter_mut().for_each(|v| *v = 0.0);
            let x_base = row * c_n * n_tok;
            for k in (0..n_tok).rev() {
                let off = (row * n_tok + k) * cs;
                let h_k = &self.h_hist.data()[off..off + cs];
                let abar_k = &self.abar_hist.data()[off..off + cs];
                let h_prev: &[f64] = if k > 0 {
                    &self.h_hist.data()[off - cs..off]
                } else {
                    &zeros_cs
                };
                let mut any = false;
                for c in 0..c_n {
                    let v = x.data()[x_base + c * n_tok + k];
                    u[c] = v;
                    any |= v != 0.0;
                }
                if !any {
                    // y_k = 0 but gradients still flow: through the skip
                    // (zero because u = 0? no — d y/d u includes D and the
                    // projections), and through the constant state decay.
                    let mut gd_scalar = 0.0;
                    for s in 0..s_n {
                        g_gamma[s] = 0.0;
                    }
                    for c in 0..c_n {
                        let gy = grad.data()[x_base + c * n_tok + k];
                        gu[c] = gy * d_skip.data()[c];
                        g_d[c] += gy * u[c]; // u = 0, kept for clarity
                        if gy != 0.0 {
                            let h_row = &h_k[c * s_n..(c + 1) * s_n];
                            for s in 0..s_n {
                                g_gamma[s] += gy * h_row[s];
                            }
                        }
                    }
                    for s in 0..s_n {
                        if g_gamma[s] != 0.0 {
                            let wc_row = &w_c.data()[s * c_n..(s + 1) * c_n];
                            for c in 0..c_n {
                                gu[c] += wc_row[c] * g_gamma[s];
                            }
                        }
                    }
                    // h_k = a_bar0 .* h_{k-1}
                    for i in 0..cs {
                        let a0 = abar_k[i];
                        let g_abar = gh[i] * h_prev[i];
                        gd_scalar += g_abar * a0 * lambda[i];
                        g_lambda[i] += g_abar * a0 * d0;
                        gh[i] *= a0;
                    }
                    let gp = gd_scalar * sig_p0;
                    g_bias += gp;
                    for c in 0..c_n {
                        gu[c] += gp * w_delta.data()[c];
                        gx.data_mut()[x_base + c * n_tok + k] = gu[c];
                    }
                    continue;
                }
                let mut p = bias;
                for c in 0..c_n {
                    p += w_delta.data()[c] * u[c];
                }
                let d = softplus(p);
                for s in 0..s_n {
                    let (mut bs, mut csum) = (0.0, 0.0);
                    let wb_row = &w_b.data()[s * c_n..(s + 1) * c_n];
                    let wc_row = &w_c.data()[s * c_n..(s + 1) * c_n];
                    for c in 0..c_n {
                        bs += wb_row[c] * u[c];
                        csum += wc_row[c] * u[c];
                    }
                    beta[s] = bs;
                    gamma[s] = csum;
                    g_beta[s] = 0.0;
                    g_gamma[s] = 0.0;
                }
                let mut gd_scalar = 0.0;
                for c in 0..c_n {
                    let gy = grad.data()[x_base + c * n_tok + k];
                    let uc = u[c];
                    g_d[c] += gy * uc;
                    let mut guc = gy * d_skip.data()[c];
                    let h_row = &h_k[c * s_n..(c + 1) * s_n];
                    let hp_row = &h_prev[c * s_n..(c + 1) * s_n];
                    let ab_row = &abar_k[c * s_n..(c + 1) * s_n];
                    let gh_row = &mut gh[c * s_n..(c + 1) * s_n];
                    let lam_row = &lambda[c * s_n..(c + 1) * s_n];
                    for s in 0..s_n {
                        // output path into the state gradient
                        let ghs = gh_row[s] + gy * gamma[s];
                        g_gamma[s] += gy * h_row[s];
                        let lam = lam_row[s];
                        let a_bar = ab_row[s];
                        let b_bar = (a_bar - 1.0) / lam * beta[s];
                        // recurrence: h = a_bar*h_prev + b_bar*u
                        let mut g_abar = ghs * hp_row[s];
                        let g_bbar = ghs * uc;
                        guc += ghs * b_bar;
                        gh_row[s] = ghs * a_bar;
                        // b_bar = (a_bar-1)/lam * beta
                        g_abar += g_bbar * beta[s] / lam;
                        g_beta[s] += g_bbar * (a_bar - 1.0) / lam;
                        g_lambda[c * s_n + s] +=
                            -g_bbar * beta[s] * (a_bar - 1.0) / (lam * lam);
                        // a_bar = exp(d * lam)
                        gd_scalar += g_abar * a_bar * lam;
                        g_lambda[c * s_n + s] += g_abar * a_bar * d;
                    }
                    gu[c] = guc;
                }
                let gp = gd_scalar * sigmoid(p);
                g_bias += gp;
                for c in 0..c_n {
                    g_w_delta[c] += gp * u[c];
                    gu[c] += gp * w_delta.data()[c];
                }
                for s in 0..s_n {
                    let (gb, gc) = (g_beta[s], g_gamma[s]);
                    let wb_row = &w_b.data()[s * c_n..(s + 1) * c_n];
                    let wc_row = &w_c.data()[s * c_n..(s + 1) * c_n];
                    let gwb_row = &mut g_w_b[s * c_n..(s + 1) * c_n];
                    for c in 0..c_n {
                        gwb_row[c] += gb * u[c];
                        gu[c] += wb_row[c] * gb + wc_row[c] * gc;
                    }
                    let gwc_row = &mut g_w_c[s * c_n..(s + 1) * c_n];
                    for c in 0..c_n {
                        gwc_row[c] += gc * u[c];
                    }
                }
                for c in 0..c_n {
                    gx.data_mut()[x_base + c * n_tok + k] = gu[c];
                }
            }
        }

        // Chain lambda_eff = -softplus(raw) with the clamp gate.
        let mut g_raw = DenseTensor::zeros(lambda_raw.shape());
        for i in 0..cs {
            let raw = lambda_raw.data()[i];
            if softplus(raw) >= EPSILON_LAMBDA {
                g_raw.data_mut()[i] = -g_lambda[i] * sigmoid(raw);
            }
        }
        Ok(vec![
            Some(gx),
            Some(g_raw),
            Some(DenseTensor::new(w_delta.shape().to_vec(), g_w_delta).unwrap()),
            Some(DenseTensor::new(vec![1], vec![g_bias]).unwrap()),
            Some(DenseTensor::new(w_b.shape().to_vec(), g_w_b).unwrap()),
            Some(DenseTensor::new(w_c.shape().to_vec(), g_w_c).unwrap()),
            Some(DenseTensor::new(d_skip.shape().to_vec(), g_d).unwrap()),
        ])
    }
}

fn check_scan_input(x: &DenseTensor, c_n: usize) -> Result<(), SsmError> {
    if x.rank() != 3 || x.shape()[1] != c_n {
        return Err(SsmError::ShapeMismatch(format!(
            "expected (rows, {}, tokens), got {:?}",
            c_n,
            x.shape()
        )));
    }
    Ok(())
}

/// Selective scan over `(rows, channels, tokens)`, value domain. Each row
/// is an independent sequence; the token axis is the scan axis.
pub fn selective_scan(x: &DenseTensor, params: &SsmParams) -> Result<DenseTensor, SsmError> {
    check_scan_input(x, params.channels())?;
    debug_assert!(x.all_finite(), "scan input must be finite");
    let kp = KernelParams::from(params);
    Ok(scan_forward(x, &kp, false).0)
}

/// Parameter handles for one scan direction on the tape.
#[derive(Debug, Clone, Copy)]
pub struct SsmParamVars {
    pub lambda_raw: Var,
    pub w_delta: Var,
    pub delta_bias: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub d_skip: Var,
}

/// Fused selective scan on the tape.
pub fn selective_scan_tape(
    tape: &mut Tape,
    x: Var,
    params: &SsmParamVars,
) -> Result<Var, TensorError> {
    let inputs = [
        x,
        params.lambda_raw,
        params.w_delta,
        params.delta_bias,
        params.w_b,
        params.w_c,
        params.d_skip,
    ];
    let sp = SsmParams {
        lambda_raw: tape.value(params.lambda_raw).clone(),
        w_delta: tape.value(params.w_delta).clone(),
        delta_bias: tape.value(params.delta_bias).clone(),
        w_b: tape.value(params.w_b).clone(),
        w_c: tape.value(params.w_c).clone(),
        d_skip: tape.value(params.d_skip).clone(),
    };
    check_scan_input(tape.value(x), sp.channels())
        .map_err(|e| TensorError::ShapeMismatch(e.to_string()))?;
    let kp = KernelParams::from(&sp);
    let wants = tape.wants_grad(&inputs);
    let (y, hist) = scan_forward(tape.value(x), &kp, wants);
    let op: Option<Box<dyn CustomOp>> = if wants {
        let (h_hist, abar_hist) = hist.expect("saved when gradients are wanted");
        Some(Box::new(ScanBackward { h_hist, abar_hist }))
    } else {
        None
    };
    Ok(tape.custom(&inputs, y, op))
}

/// Two independent scans over the forward sequence and the valid-prefix
/// reversed sequence. Padded tail slots must carry zero input so they
/// cannot perturb valid positions (the scan is causal and starts from a
/// zero state).
pub fn bidirectional_scan(
    x_fwd: &DenseTensor,
    x_bwd: &DenseTensor,
    params_fwd: &SsmParams,
    params_bwd: &SsmParams,
    mask: &TokenMask,
) -> Result<(DenseTensor, DenseTensor), SsmError> {
    if x_fwd.shape() != x_bwd.shape() {
        return Err(SsmError::ShapeMismatch(format!(
            "forward {:?} vs backward {:?}",
            x_fwd.shape(),
            x_bwd.shape()
        )));
    }
    debug_assert!(padded_tail_is_zero(x_fwd, mask), "forward branch pad not zero");
    debug_assert!(padded_tail_is_zero(x_bwd, mask), "backward branch pad not zero");
    let z_fwd = selective_scan(x_fwd, params_fwd)?;
    let z_bwd = selective_scan(x_bwd, params_bwd)?;
    Ok((z_fwd, z_bwd))
}

fn padded_tail_is_zero(x: &DenseTensor, mask: &TokenMask) -> bool {
    let rows = x.shape()[0];
    let (c_n, n_tok) = (x.shape()[1], x.shape()[2]);
    let batch = mask.batch();
    if batch == 0 || rows % batch != 0 {
        return false;
    }
    let per_sample = rows / batch;
    for row in 0..rows {
        let b = row / per_sample;
        let count = mask.kept_counts()[b];
        for c in 0..c_n {
            for k in count..n_tok {
                if x.data()[(row * c_n + c) * n_tok + k] != 0.0 {
                    return false;
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;

    #[test]
    fn zoh_closed_form_half_life() {
        let lambda = DenseTensor::scalar(-1.0);
        let delta = DenseTensor::scalar(2.0f64.ln());
        let b = DenseTensor::scalar(1.0);
        let (a_bar, b_bar) = discretize_zoh(&lambda, &delta, &b).unwrap();
        assert!((a_bar.item() - 0.5).abs() < 1e-15);
        assert!((b_bar.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zoh_small_delta_limit() {
        // delta -> 0: A_bar -> 1, B_bar -> delta * B.
        let lambda = DenseTensor::scalar(-1.0);
        let delta = DenseTensor::scalar(1e-8);
        let b = DenseTensor::scalar(3.0);
        let (a_bar, b_bar) = discretize_zoh(&lambda, &delta, &b).unwrap();
        assert!((a_bar.item() - 1.0).abs() < 1e-7);
        assert!((b_bar.item() / (1e-8 * 3.0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zoh_closed_form_lambda_minus_two() {
        let lambda = DenseTensor::scalar(-2.0);
        let delta = DenseTensor::scalar(1.0);
        let b = DenseTensor::scalar(1.0);
        let (a_bar, b_bar) = discretize_zoh(&lambda, &delta, &b).unwrap();
        assert!((a_bar.item() - (-2.0f64).exp()).abs() < 1e-15);
        assert!((b_bar.item() - 0.43233235838169365).abs() < 1e-12);
    }

    #[test]
    fn zoh_rejects_bad_inputs() {
        let lambda = DenseTensor::scalar(-1.0);
        let b = DenseTensor::scalar(1.0);
        assert_eq!(
            discretize_zoh(&lambda, &DenseTensor::scalar(0.0), &b),
            Err(SsmError::NonPositiveDelta)
        );
        assert_eq!(
            discretize_zoh(&DenseTensor::scalar(-1e-5), &DenseTensor::scalar(1.0), &b),
            Err(SsmError::LambdaTooCloseToZero)
        );
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = crate::init::SeededRng::new(1);
        let params = SsmParams::init(4, 3, &mut rng);
        let x = DenseTensor::zeros(&[2, 4, 5]);
        let y = selective_scan(&x, &params).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_matches_unrolled_step() {
        let mut rng = crate::init::SeededRng::new(2);
        let params = SsmParams::init(3, 2, &mut rng);
        let x = rng.uniform_tensor(&[1, 3, 1], -1.0, 1.0);
        let y = selective_scan(&x, &params).unwrap();
        // Unroll one step by hand.
        let lam = params.lambda_effective();
        let u: Vec<f64> = (0..3).map(|c| x.at(&[0, c, 0])).collect();
        let mut p = params.delta_bias.item();
        for c in 0..3 {
            p += params.w_delta.data()[c] * u[c];
        }
        let d = softplus(p);
        for c in 0..3 {
            let mut acc = 0.0;
            for s in 0..2 {
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for cc in 0..3 {
                    beta += params.w_b.at(&[s, cc]) * u[cc];
                    gamma += params.w_c.at(&[s, cc]) * u[cc];
                }
                let l = lam.at(&[c, s]);
                let a_bar = (d * l).exp();
                let b_bar = (a_bar - 1.0) / l * beta;
                acc += gamma * b_bar * u[c];
            }
            acc += params.d_skip.data()[c] * u[c];
            assert!((y.at(&[0, c, 0]) - acc).abs() < 1e-14);
        }
    }

    /// Independent scalar-loop transcription of the recurrence, no fast
    /// paths, used to pin the kernel.
    fn naive_scan(x: &DenseTensor, params: &SsmParams) -> DenseTensor {
        let (rows, c_n, n_tok) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let s_n = params.state_dim();
        let lam = params.lambda_effective();
        let mut y = DenseTensor::zeros(x.shape());
        for row in 0..rows {
            let mut h = vec![vec![0.0; s_n]; c_n];
            for k in 0..n_tok {
                let u: Vec<f64> = (0..c_n).map(|c| x.at(&[row, c, k])).collect();
                let mut p = params.delta_bias.item();
                for c in 0..c_n {
                    p += params.w_delta.data()[c] * u[c];
                }
                let d = softplus(p);
                let beta: Vec<f64> = (0..s_n)
                    .map(|s| (0..c_n).map(|c| params.w_b.at(&[s, c]) * u[c]).sum())
                    .collect();
                let gamma: Vec<f64> = (0..s_n)
                    .map(|s| (0..c_n).map(|c| params.w_c.at(&[s, c]) * u[c]).sum())
                    .collect();
                for c in 0..c_n {
                    let mut acc = 0.0;
                    for s in 0..s_n {
                        let l = lam.at(&[c, s]);
                        let a_bar = (d * l).exp();
                        let b_bar = (a_bar - 1.0) / l * beta[s];
                        h[c][s] = a_bar * h[c][s] + b_bar * u[c];
                        acc += gamma[s] * h[c][s];
                    }
                    y.data_mut()[(row * c_n + c) * n_tok + k] =
                        acc + params.d_skip.data()[c] * u[c];
                }
            }
        }
        y
    }

    #[test]
    fn matches_naive_recurrence_with_sparse_input() {
        let mut rng = crate::init::SeededRng::new(3);
        let params = SsmParams::init(8, 4, &mut rng);
        let mut x = rng.uniform_tensor(&[2, 8, 64], -1.0, 1.0);
        // Force whole zero columns so the fast path is exercised.
        for row in 0..2 {
            for k in (0..64).step_by(3) {
                for c in 0..8 {
                    x.data_mut()[(row * 8 + c) * 64 + k] = 0.0;
                }
            }
        }
        let y = selective_scan(&x, &params).unwrap();
        let y_ref = naive_scan(&x, &params);
        let max = y
            .data()
            .iter()
            .zip(y_ref.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-10, "max abs diff {max}");
    }

    #[test]
    fn reversed_scan_equals_right_to_left_oracle() {
        let mut rng = crate::init::SeededRng::new(4);
        let params = SsmParams::init(3, 2, &mut rng);
        let n = 9;
        let x = rng.uniform_tensor(&[1, 3, n], -1.0, 1.0);
        // reverse tokens
        let mut x_rev = DenseTensor::zeros(x.shape());
        for c in 0..3 {
            for k in 0..n {
                x_rev.data_mut()[c * n + k] = x.data()[c * n + (n - 1 - k)];
            }
        }
        let mask = TokenMask::full(1, n);
        let (_, z_bwd) =
            bidirectional_scan(&x, &x_rev, &params, &params, &mask).unwrap();
        // reverse(z_bwd) should equal scanning x right-to-left
        let z_oracle = naive_scan(&x_rev, &params);
        for c in 0..3 {
            for k in 0..n {
                let reversed = z_bwd.at(&[0, c, n - 1 - k]);
                assert!((reversed - z_oracle.at(&[0, c, n - 1 - k])).abs() < 1e-12);
                // and the reversed output aligns to original token order
                let _ = reversed;
            }
        }
        // value check: reverse(z_bwd)[k] corresponds to token k scanned from the right
        let z_back = {
            let mut t = DenseTensor::zeros(z_bwd.shape());
            for c in 0..3 {
                for k in 0..n {
                    t.data_mut()[c * n + k] = z_bwd.data()[c * n + (n - 1 - k)];
                }
            }
            t
        };
        let mut right_to_left = DenseTensor::zeros(x.shape());
        {
            // scan x from the right directly with the naive recurrence
            let rev_out = naive_scan(&x_rev, &params);
            for c in 0..3 {
                for k in 0..n {
                    right_to_left.data_mut()[c * n + k] = rev_out.data()[c * n + (n - 1 - k)];
                }
            }
        }
        for (a, b) in z_back.data().iter().zip(right_to_left.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_invariance_exact() {
        let mut rng = crate::init::SeededRng::new(5);
        let params = SsmParams::init(4, 3, &mut rng);
        let n = 7;
        let x = rng.uniform_tensor(&[1, 4, n], -1.0, 1.0);
        let y = selective_scan(&x, &params).unwrap();
        // Append 3 all-zero tokens.
        let mut padded = DenseTensor::zeros(&[1, 4, n + 3]);
        for c in 0..4 {
            for k in 0..n {
                padded.data_mut()[c * (n + 3) + k] = x.data()[c * n + k];
            }
        }
        let y_pad = selective_scan(&padded, &params).unwrap();
        for c in 0..4 {
            for k in 0..n {
                assert_eq!(y.data()[c * n + k], y_pad.data()[c * (n + 3) + k]);
            }
        }
    }

    #[test]
    fn single_token_bidirectional_degenerate() {
        let mut rng = crate::init::SeededRng::new(6);
        let pf = SsmParams::init(2, 2, &mut rng);
        let pb = SsmParams::init(2, 2, &mut rng);
        let x = rng.uniform_tensor(&[1, 2, 1], -1.0, 1.0);
        let mask = TokenMask::full(1, 1);
        let (zf, zb) = bidirectional_scan(&x, &x, &pf, &pb, &mask).unwrap();
        assert_eq!(zf.data(), selective_scan(&x, &pf).unwrap().data());
        assert_eq!(zb.data(), selective_scan(&x, &pb).unwrap().data());
    }

    #[test]
    fn bounded_state_no_overflow_random_trials() {
        let mut rng = crate::init::SeededRng::new(7);
        for trial in 0..200 {
            let c_n = 1 + rng.below(4);
            let s_n = 1 + rng.below(4);
            let n = 1 + rng.below(32);
            let params = SsmParams::init(c_n, s_n, &mut rng);
            let x = rng.uniform_tensor(&[1, c_n, n], -1.0, 1.0);
            let y = selective_scan(&x, &params).unwrap();
            assert!(y.all_finite(), "trial {trial} produced non-finite output");
        }
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let mut rng = crate::init::SeededRng::new(8);
        let params = SsmParams::init(3, 2, &mut rng);
        let mut x = rng.uniform_tensor(&[2, 3, 5], -1.0, 1.0);
        // include a zero column to cover the fast-path adjoint
        for c in 0..3 {
            x.data_mut()[(0 * 3 + c) * 5 + 2] = 0.0;
        }
        let inputs = vec![
            x,
            params.lambda_raw.clone(),
            params.w_delta.clone(),
            params.delta_bias.clone(),
            params.w_b.clone(),
            params.w_c.clone(),
            params.d_skip.clone(),
        ];
        let err = check_gradients(
            |tape, vars| {
                let pv = SsmParamVars {
                    lambda_raw: vars[1],
                    w_delta: vars[2],
                    delta_bias: vars[3],
                    w_b: vars[4],
                    w_c: vars[5],
                    d_skip: vars[6],
                };
                let y = selective_scan_tape(tape, vars[0], &pv)?;
                let sq = tape.mul(y, y)?;
                let s2 = tape.sum_axis(sq, 2)?;
                let s1 = tape.sum_axis(s2, 1)?;
                tape.mean_axis(s1, 0)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
