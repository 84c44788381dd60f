//! Oracle-equivalence and invariant suites, runnable without a trained
//! model. The reference implementations here are deliberately plain
//! nested loops, written independently of the production kernels they
//! check.

use std::collections::BTreeMap;

use crate::data::{generate_synthetic, DatasetDescriptor};
use crate::init::SeededRng;
use crate::model::ops::{batch_norm_eval, BnScope};
use crate::model::{forward, forward_with_vars, init_params, mgap, ForwardOptions, ModelConfig};
use crate::neuron::SpikeMode;
use crate::pruner::{sst_tp, PruneThresholds, TokenMask};
use crate::ssm::{bidirectional_scan, selective_scan, SsmParams};
use crate::tensor::gradcheck::check_gradients;
use crate::tensor::softplus;
use crate::tensor::tape::Tape;
use crate::tensor::DenseTensor;
use crate::train::{smooth_targets, smoothed_cross_entropy_tape};

pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn from(name: &'static str, r: Result<String, String>) -> Self {
        match r {
            Ok(detail) => Self {
                name,
                passed: true,
                detail,
            },
            Err(detail) => Self {
                name,
                passed: false,
                detail,
            },
        }
    }
}

// ---- scan oracle ----

/// Reference recurrence: per row, per token, recompute every coefficient
/// with scalar loops and update the state exactly as written.
pub fn reference_selective_scan(x: &DenseTensor, params: &SsmParams) -> DenseTensor {
    let (rows, c_n, n_tok) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let s_n = params.state_dim();
    let lam = params.lambda_effective();
    let mut y = DenseTensor::zeros(x.shape());
    for row in 0..rows {
        let mut h = vec![0.0f64; c_n * s_n];
        for k in 0..n_tok {
            let mut u = vec![0.0f64; c_n];
            for (c, slot) in u.iter_mut().enumerate() {
                *slot = x.data()[(row * c_n + c) * n_tok + k];
            }
            let mut p = params.delta_bias.item();
            for c in 0..c_n {
                p += params.w_delta.data()[c] * u[c];
            }
            let delta = softplus(p);
            let mut beta = vec![0.0f64; s_n];
            let mut gamma = vec![0.0f64; s_n];
            for s in 0..s_n {
                for c in 0..c_n {
                    beta[s] += params.w_b.data()[s * c_n + c] * u[c];
                    gamma[s] += params.w_c.data()[s * c_n + c] * u[c];
                }
            }
            for c in 0..c_n {
                let mut acc = 0.0;
                for s in 0..s_n {
                    let l = lam.data()[c * s_n + s];
                    let a_bar = (delta * l).exp();
                    let b_bar = (a_bar - 1.0) / l * beta[s];
                    h[c * s_n + s] = a_bar * h[c * s_n + s] + b_bar * u[c];
                    acc += gamma[s] * h[c * s_n + s];
                }
                y.data_mut()[(row * c_n + c) * n_tok + k] =
                    acc + params.d_skip.data()[c] * u[c];
            }
        }
    }
    y
}

/// Random-case equivalence of the scan kernel against the reference
/// recurrence; returns the maximum absolute deviation observed.
pub fn scan_oracle_max_error(
    cases: usize,
    max_n: usize,
    max_c: usize,
    max_s: usize,
    seed: u64,
) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut max_err = 0.0f64;
    for case in 0..cases {
        let c_n = 1 + rng.below(max_c);
        let s_n = 1 + rng.below(max_s);
        let n_tok = 1 + rng.below(max_n);
        let rows = 1 + rng.below(3);
        let params = SsmParams::init(c_n, s_n, &mut rng);
        let mut x = rng.uniform_tensor(&[rows, c_n, n_tok], -1.0, 1.0);
        // sprinkle binary and all-zero columns so both kernel paths run
        if case % 2 == 0 {
            for v in x.data_mut() {
                *v = if *v > 0.3 { 1.0 } else { 0.0 };
            }
        }
        let fast = selective_scan(&x, &params).expect("valid scan input");
        let slow = reference_selective_scan(&x, &params);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            max_err = max_err.max((a - b).abs());
        }
    }
    max_err
}

fn scan_suite(cases: usize, max_n: usize) -> Result<String, String> {
    let err = scan_oracle_max_error(cases, max_n, 32, 16, 0xA11CE);
    if err < 1e-10 {
        Ok(format!("{cases} cases, max abs error {err:.2e}"))
    } else {
        Err(format!("max abs error {err:.2e} exceeds 1e-10"))
    }
}

// ---- pruner oracle ----

pub struct PrunerReference {
    pub kept_indices: Vec<Vec<usize>>,
    pub padded: DenseTensor,
    pub mask_bits: DenseTensor,
}

/// Literal step-by-step transcription of the pruning procedure, nested
/// loops only.
pub fn reference_sst_tp(
    o: &DenseTensor,
    z_threshold: f64,
    phi: usize,
    epsilon: f64,
) -> PrunerReference {
    let (b_n, t_n, c_n, n_tok) = (o.shape()[0], o.shape()[1], o.shape()[2], o.shape()[3]);
    // (1) channel-wise activity and z-score normalization
    let mut activity = vec![0.0f64; b_n * t_n * n_tok];
    for b in 0..b_n {
        for t in 0..t_n {
            for n in 0..n_tok {
                let mut lane = Vec::with_capacity(c_n);
                for c in 0..c_n {
                    lane.push(o.data()[(((b * t_n + t) * c_n) + c) * n_tok + n]);
                }
                activity[(b * t_n + t) * n_tok + n] =
                    lane.iter().sum::<f64>() / c_n as f64;
            }
        }
    }
    let mut z = vec![0.0f64; b_n * t_n * n_tok];
    for bt in 0..b_n * t_n {
        let row = &activity[bt * n_tok..(bt + 1) * n_tok];
        let mean = row.iter().sum::<f64>() / n_tok as f64;
        let mut var = 0.0;
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var /= n_tok as f64;
        let sd = var.sqrt();
        for n in 0..n_tok {
            z[bt * n_tok + n] = (row[n] - mean) / (sd + epsilon);
        }
    }
    // (2) spatial indicator, (3) first-spike latency and temporal mask
    let mut keep = vec![false; b_n * n_tok];
    for b in 0..b_n {
        for n in 0..n_tok {
            let mut t_star = t_n + 1; // sentinel, 1-based
            for t in 0..t_n {
                if z[(b * t_n + t) * n_tok + n] > z_threshold {
                    t_star = t + 1;
                    break;
                }
            }
            keep[b * n_tok + n] = t_star <= phi;
        }
    }
    // (4) fallback: keep the most active token of empty samples
    for b in 0..b_n {
        if (0..n_tok).all(|n| !keep[b * n_tok + n]) {
            let mut best = 0usize;
            let mut best_sum = f64::NEG_INFINITY;
            for n in 0..n_tok {
                let mut sum = 0.0;
                for t in 0..t_n {
                    sum += activity[(b * t_n + t) * n_tok + n];
                }
                if sum > best_sum {
                    best_sum = sum;
                    best = n;
                }
            }
            keep[b * n_tok + best] = true;
        }
    }
    // (5) dense reindexing and padding
    let kept_indices: Vec<Vec<usize>> = (0..b_n)
        .map(|b| (0..n_tok).filter(|&n| keep[b * n_tok + n]).collect())
        .collect();
    let n_out = kept_indices.iter().map(Vec::len).max().unwrap_or(0);
    let mut padded = DenseTensor::zeros(&[b_n, t_n, c_n, n_out]);
    let mut bits = DenseTensor::zeros(&[b_n, n_out]);
    for b in 0..b_n {
        for (i, &n) in kept_indices[b].iter().enumerate() {
            bits.data_mut()[b * n_out + i] = 1.0;
            for t in 0..t_n {
                for c in 0..c_n {
                    padded.data_mut()[(((b * t_n + t) * c_n) + c) * n_out + i] =
                        o.data()[(((b * t_n + t) * c_n) + c) * n_tok + n];
                }
            }
        }
    }
    PrunerReference {
        kept_indices,
        padded,
        mask_bits: bits,
    }
}

/// Exact equivalence of the composed pruner against the reference
/// transcription over random binary tensors plus the degenerate inputs.
pub fn pruner_oracle_equivalence(cases: usize, seed: u64) -> Result<String, String> {
    let mut rng = SeededRng::new(seed);
    let check = |o: &DenseTensor, phi: usize, z: f64, what: &str| -> Result<(), String> {
        let thresholds = PruneThresholds {
            z_threshold: z,
            phi,
            epsilon: 1e-5,
        };
        let got = sst_tp(o, &thresholds).map_err(|e| format!("{what}: {e}"))?;
        let want = reference_sst_tp(o, z, phi, 1e-5);
        if got.mask.kept_indices() != want.kept_indices.as_slice() {
            return Err(format!("{what}: kept index sets differ"));
        }
        if got.mask.bits().data() != want.mask_bits.data() {
            return Err(format!("{what}: mask bits differ"));
        }
        if got.tokens.data() != want.padded.data() {
            return Err(format!("{what}: padded tensors differ"));
        }
        Ok(())
    };
    // degenerate inputs first
    check(&DenseTensor::zeros(&[2, 3, 2, 5]), 2, 0.0, "all-zero")?;
    check(&DenseTensor::ones(&[2, 3, 2, 5]), 2, 0.0, "uniform")?;
    check(&DenseTensor::ones(&[1, 2, 1, 1]), 1, 0.0, "single-token")?;
    for case in 0..cases {
        let b = 1 + rng.below(3);
        let t = 1 + rng.below(6);
        let c = 1 + rng.below(4);
        let n = 1 + rng.below(24);
        let density = rng.uniform(0.05, 0.9);
        let mut o = DenseTensor::zeros(&[b, t, c, n]);
        for v in o.data_mut() {
            *v = if rng.chance(density) { 1.0 } else { 0.0 };
        }
        let phi = 1 + rng.below(t);
        let z = [-1.0, -0.5, 0.0, 0.5, 1.0][rng.below(5)];
        check(&o, phi, z, &format!("case {case}"))?;
    }
    Ok(format!("{cases} random cases plus degenerate inputs, exact"))
}

// ---- gradient checks ----

/// Finite-difference check of every differentiable tape operation on
/// small random inputs; returns the worst relative error.
pub fn op_gradient_suite(seed: u64) -> Result<String, String> {
    let mut rng = SeededRng::new(seed);
    let mut worst: (String, f64) = (String::new(), 0.0);
    let mut run = |name: &str, err: Result<f64, String>| -> Result<(), String> {
        let err = err.map_err(|e| format!("{name}: {e}"))?;
        if err > worst.1 {
            worst = (name.to_string(), err);
        }
        if err < 1e-6 {
            Ok(())
        } else {
            Err(format!("{name}: relative error {err:.2e} exceeds 1e-6"))
        }
    };
    let reduce_to_scalar = |tape: &mut Tape,
                            v: crate::tensor::tape::Var|
     -> Result<crate::tensor::tape::Var, crate::tensor::TensorError> {
        let mut cur = v;
        while !tape.value(cur).shape().is_empty() {
            cur = tape.sum_axis(cur, 0)?;
        }
        Ok(cur)
    };
    macro_rules! unary_case {
        ($name:literal, $lo:expr, $hi:expr, $body:expr) => {{
            let x = rng.uniform_tensor(&[3, 4], $lo, $hi);
            run(
                $name,
                check_gradients(
                    |tape, vars| {
                        #[allow(clippy::redundant_closure_call)]
                        let y = ($body)(tape, vars[0])?;
                        reduce_to_scalar(tape, y)
                    },
                    &[x],
                    1e-5,
                )
                .map_err(|e| e.to_string()),
            )
        }};
    }
    type T<'a> = &'a mut Tape;
    type V = crate::tensor::tape::Var;
    unary_case!("exp", -1.0, 1.0, |t: T, v: V| Ok::<_, crate::tensor::TensorError>(t.exp(v)))?;
    unary_case!("ln", 0.2, 3.0, |t: T, v: V| Ok(t.ln(v)))?;
    unary_case!("sigmoid", -2.0, 2.0, |t: T, v: V| Ok(t.sigmoid(v)))?;
    unary_case!("softplus", -2.0, 2.0, |t: T, v: V| Ok(t.softplus(v)))?;
    unary_case!("neg", -1.0, 1.0, |t: T, v: V| Ok(t.neg(v)))?;
    unary_case!("scale", -1.0, 1.0, |t: T, v: V| Ok(t.scale(v, 1.7)))?;
    unary_case!("sum_axis", -1.0, 1.0, |t: T, v: V| t.sum_axis(v, 1))?;
    unary_case!("mean_axis", -1.0, 1.0, |t: T, v: V| t.mean_axis(v, 0))?;
    unary_case!("reshape", -1.0, 1.0, |t: T, v: V| t.reshape(v, &[4, 3]))?;
    unary_case!("permute", -1.0, 1.0, |t: T, v: V| t.permute(v, &[1, 0]))?;
    // binary ops with broadcasting
    {
        let a = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        let b = rng.uniform_tensor(&[4], 0.5, 2.0);
        for (name, f) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
            ("div", 3),
        ] {
            run(
                name,
                check_gradients(
                    |tape, vars| {
                        let y = match f {
                            0 => tape.add(vars[0], vars[1])?,
                            1 => tape.sub(vars[0], vars[1])?,
                            2 => tape.mul(vars[0], vars[1])?,
                            _ => tape.div(vars[0], vars[1])?,
                        };
                        reduce_to_scalar(tape, y)
                    },
                    &[a.clone(), b.clone()],
                    1e-5,
                )
                .map_err(|e| e.to_string()),
            )?;
        }
    }
    {
        let a = rng.uniform_tensor(&[2, 3, 4], -1.0, 1.0);
        let b = rng.uniform_tensor(&[4, 2], -1.0, 1.0);
        run(
            "matmul",
            check_gradients(
                |tape, vars| {
                    let y = tape.matmul(vars[0], vars[1])?;
                    reduce_to_scalar(tape, y)
                },
                &[a, b],
                1e-5,
            )
            .map_err(|e| e.to_string()),
        )?;
    }
    // fused kernels: soft spikes, scan, conv, dwconv, channel linear, bn
    {
        let x = rng.uniform_tensor(&[2, 3, 4], -1.0, 1.5);
        run(
            "lif_sequence(soft)",
            check_gradients(
                |tape, vars| {
                    let s = crate::neuron::lif_sequence(
                        tape,
                        vars[0],
                        &crate::neuron::LifParams::default(),
                        SpikeMode::Soft,
                    )?;
                    reduce_to_scalar(tape, s)
                },
                &[x],
                1e-5,
            )
            .map_err(|e| e.to_string()),
        )?;
    }
    {
        let params = SsmParams::init(3, 2, &mut rng);
        let x = rng.uniform_tensor(&[2, 3, 5], -1.0, 1.0);
        let inputs = vec![
            x,
            params.lambda_raw,
            params.w_delta,
            params.delta_bias,
            params.w_b,
            params.w_c,
            params.d_skip,
        ];
        run(
            "selective_scan",
            check_gradients(
                |tape, vars| {
                    let pv = crate::ssm::SsmParamVars {
                        lambda_raw: vars[1],
                        w_delta: vars[2],
                        delta_bias: vars[3],
                        w_b: vars[4],
                        w_c: vars[5],
                        d_skip: vars[6],
                    };
                    let y = crate::ssm::selective_scan_tape(tape, vars[0], &pv)?;
                    reduce_to_scalar(tape, y)
                },
                &inputs,
                1e-5,
            )
            .map_err(|e| e.to_string()),
        )?;
    }
    {
        let x = rng.uniform_tensor(&[1, 2, 3, 4], -1.0, 1.0);
        let w = rng.uniform_tensor(&[2, 3], -1.0, 1.0);
        run(
            "channel_linear",
            check_gradients(
                |tape, vars| {
                    let y = crate::model::ops::channel_linear(tape, vars[0], vars[1], None)?;
                    reduce_to_scalar(tape, y)
                },
                &[x, w],
                1e-5,
            )
            .map_err(|e| e.to_string()),
        )?;
    }
    {
        let x = rng.uniform_tensor(&[1, 2, 4, 4], -1.0, 1.0);
        let w = rng.uniform_tensor(&[3, 2, 3, 3], -1.0, 1.0);
        run(
            "conv2d",
            check_gradients(
                |tape, vars| {
                    let y = crate::model::ops::conv2d(
                        tape,
                        vars[0],
                        vars[1],
                        None,
                        crate::model::ops::Conv2dSpec {
                            stride: 2,
                            padding: 1,
                            groups: 1,
                        },
                    )?;
                    reduce_to_scalar(tape, y)
                },
                &[x, w],
                1e-5,
            )
            .map_err(|e| e.to_string()),
        )?;
    }
    {
        let x = rng.uniform_tensor(&[1, 2, 3, 6], -1.0, 1.0);
        let w = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        run(
            "dwconv_tokens",
            check_gradients(
                |tape, vars| {
                    let y = crate::model::ops::dwconv_tokens(tape, vars[0], vars[1])?;
                    reduce_to_scalar(tape, y)
                },
                &[x, w],
                1e-5,
            )
            .map_err(|e| e.to_string()),
        )?;
    }
    {
        let x = rng.uniform_tensor(&[2, 2, 3, 4], -1.0, 1.0);
        let gamma = rng.uniform_tensor(&[3], 0.5, 1.5);
        let beta = rng.uniform_tensor(&[3], -0.5, 0.5);
        let mask = TokenMask::new(vec![vec![0, 1, 3], vec![0, 2]]);
        run(
            "batch_norm",
            check_gradients(
                |tape, vars| {
                    let (y, _) = crate::model::ops::batch_norm_train(
                        tape,
                        vars[0],
                        vars[1],
                        vars[2],
                        &BnScope::Tokens(mask.clone()),
                        1e-5,
                    )?;
                    reduce_to_scalar(tape, y)
                },
                &[x, gamma, beta],
                1e-5,
            )
            .map_err(|e| e.to_string()),
        )?;
    }
    {
        let x = rng.uniform_tensor(&[1, 2, 2, 4], -1.0, 1.0);
        let mask = TokenMask::new(vec![vec![0, 2]]);
        run(
            "gather_tokens",
            check_gradients(
                |tape, vars| {
                    let y = crate::model::ops::gather_tokens(tape, vars[0], &mask)?;
                    reduce_to_scalar(tape, y)
                },
                &[x],
                1e-5,
            )
            .map_err(|e| e.to_string()),
        )?;
    }
    Ok(format!(
        "all ops below 1e-6; worst {} at {:.2e}",
        worst.0, worst.1
    ))
}

/// The standard tiny end-to-end gradient-check setup.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        depth: 1,
        dim: 8,
        timesteps: 2,
        state_dim: 4,
        num_classes: 3,
        input_hw: 16,
        in_channels: 1,
        patch_stages: vec![4, 8],
        mlp_ratio: 2,
        pruning_enabled: true,
        phi: 2,
        ..ModelConfig::default()
    }
}

/// End-to-end finite-difference check of the whole network in smoothed
/// spike mode (every surrogate chain differentiated exactly, training
/// batch norm, pruning active). Returns the max relative error.
pub fn model_gradient_max_error(seed: u64) -> Result<f64, String> {
    let cfg = gradcheck_model_config();
    let store = init_params(&cfg, seed).map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(seed ^ 0x6AD);
    let images = rng.uniform_tensor(&[2, cfg.timesteps, 1, 16, 16], -0.3, 1.0);
    let targets = smooth_targets(&[0, 2], cfg.num_classes, 0.1);
    let names: Vec<String> = store.params.keys().cloned().collect();
    let values: Vec<DenseTensor> = store.params.values().cloned().collect();
    let buffers = store.buffers.clone();
    check_gradients(
        |tape, vars| {
            let mut map = BTreeMap::new();
            for (name, var) in names.iter().zip(vars) {
                map.insert(name.clone(), *var);
            }
            let opts = ForwardOptions {
                training: true,
                spike_mode: SpikeMode::Soft,
                ..ForwardOptions::default()
            };
            let out = forward_with_vars(tape, &images, &cfg, map, &buffers, opts)
                .map_err(|e| crate::tensor::TensorError::ShapeMismatch(e.to_string()))?;
            smoothed_cross_entropy_tape(tape, out.logits, &targets)
                .map_err(|e| crate::tensor::TensorError::ShapeMismatch(e.to_string()))
        },
        &values,
        1e-5,
    )
    .map_err(|e| e.to_string())
}

fn model_gradient_suite(seed: u64) -> Result<String, String> {
    let err = model_gradient_max_error(seed)?;
    if err < 1e-3 {
        Ok(format!("end-to-end max relative error {err:.2e}"))
    } else {
        Err(format!("relative error {err:.2e} exceeds 1e-3"))
    }
}

// ---- pad invariance ----

pub fn pad_invariance_suite(seed: u64) -> Result<String, String> {
    let mut rng = SeededRng::new(seed);
    let tol = 1e-10;
    // bidirectional scan
    {
        let (c_n, n, extra, rows) = (4, 7, 3, 2);
        let pf = SsmParams::init(c_n, 3, &mut rng);
        let pb = SsmParams::init(c_n, 3, &mut rng);
        let x = rng.uniform_tensor(&[rows, c_n, n], -1.0, 1.0);
        let rev = |t: &DenseTensor, count: usize, width: usize| {
            let mut out = t.clone();
            for r in 0..rows {
                for c in 0..c_n {
                    for k in 0..count {
                        out.data_mut()[(r * c_n + c) * width + k] =
                            t.data()[(r * c_n + c) * width + (count - 1 - k)];
                    }
                }
            }
            out
        };
        let mask_full = TokenMask::full(rows, n);
        let (zf, zb) =
            bidirectional_scan(&x, &rev(&x, n, n), &pf, &pb, &mask_full).map_err(|e| e.to_string())?;
        let mut padded = DenseTensor::zeros(&[rows, c_n, n + extra]);
        for r in 0..rows {
            for c in 0..c_n {
                for k in 0..n {
                    padded.data_mut()[(r * c_n + c) * (n + extra) + k] =
                        x.data()[(r * c_n + c) * n + k];
                }
            }
        }
        let mask_for_padded =
            TokenMask::with_padded_len(vec![(0..n).collect(); rows], n + extra);
        let (zf_p, zb_p) = bidirectional_scan(
            &padded,
            &rev(&padded, n, n + extra),
            &pf,
            &pb,
            &mask_for_padded,
        )
        .map_err(|e| e.to_string())?;
        for r in 0..rows {
            for c in 0..c_n {
                for k in 0..n {
                    let a = zf.data()[(r * c_n + c) * n + k];
                    let b = zf_p.data()[(r * c_n + c) * (n + extra) + k];
                    if (a - b).abs() > tol {
                        return Err(format!("scan fwd pad drift {:.2e}", (a - b).abs()));
                    }
                    let a = zb.data()[(r * c_n + c) * n + k];
                    let b = zb_p.data()[(r * c_n + c) * (n + extra) + k];
                    if (a - b).abs() > tol {
                        return Err(format!("scan bwd pad drift {:.2e}", (a - b).abs()));
                    }
                }
            }
        }
    }
    // masked batch norm, eval mode
    {
        let x = rng.uniform_tensor(&[2, 2, 3, 4], -1.0, 1.0);
        let gamma = rng.uniform_tensor(&[3], 0.5, 1.5);
        let beta = rng.uniform_tensor(&[3], -0.5, 0.5);
        let mean = rng.uniform_tensor(&[3], -0.2, 0.2);
        let var = rng.uniform_tensor(&[3], 0.5, 1.5);
        let extra = 2;
        let mut x_pad = DenseTensor::zeros(&[2, 2, 3, 4 + extra]);
        for b in 0..2 {
            for t in 0..2 {
                for c in 0..3 {
                    for n in 0..4 {
                        let v = x.at(&[b, t, c, n]);
                        x_pad.data_mut()[((b * 2 + t) * 3 + c) * (4 + extra) + n] = v;
                    }
                }
            }
        }
        let run = |input: DenseTensor, mask: TokenMask| -> DenseTensor {
            let mut tape = Tape::no_grad();
            let xv = tape.leaf(input);
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
            tape.value(y).clone()
        };
        let y = run(x, TokenMask::full(2, 4));
        let y_pad = run(
            x_pad,
            TokenMask::with_padded_len(vec![(0..4).collect(); 2], 4 + extra),
        );
        for b in 0..2 {
            for t in 0..2 {
                for c in 0..3 {
                    for n in 0..4 {
                        let a = y.at(&[b, t, c, n]);
                        let bb = y_pad.at(&[b, t, c, n]);
                        if (a - bb).abs() > tol {
                            return Err(format!("bn pad drift {:.2e}", (a - bb).abs()));
                        }
                    }
                }
            }
        }
    }
    // mask-aware pooling
    {
        let x = rng.uniform_tensor(&[2, 3, 4, 5], -1.0, 1.0);
        let extra = 3;
        let mut x_pad = DenseTensor::zeros(&[2, 3, 4, 5 + extra]);
        for b in 0..2 {
            for t in 0..3 {
                for c in 0..4 {
                    for n in 0..5 {
                        let v = x.at(&[b, t, c, n]);
                        x_pad.data_mut()[((b * 3 + t) * 4 + c) * (5 + extra) + n] = v;
                    }
                }
            }
        }
        let a = mgap(&x, &TokenMask::full(2, 5)).map_err(|e| e.to_string())?;
        let b = mgap(
            &x_pad,
            &TokenMask::with_padded_len(vec![(0..5).collect(); 2], 5 + extra),
        )
        .map_err(|e| e.to_string())?;
        for (p, q) in a.data().iter().zip(b.data()) {
            if (p - q).abs() > tol {
                return Err(format!("mgap pad drift {:.2e}", (p - q).abs()));
            }
        }
    }
    Ok("scan, batch norm (eval), pooling unchanged by appended masked zeros".into())
}

// ---- mask invariants on a real forward pass ----

pub fn mask_invariant_suite(seed: u64) -> Result<String, String> {
    let descriptor = DatasetDescriptor {
        train_size: 8,
        test_size: 0,
        classes: 4,
        grid: 16,
        timesteps: 4,
        noise: 0.1,
        seed,
        ..DatasetDescriptor::default()
    };
    let data = generate_synthetic(&descriptor);
    let cfg = ModelConfig {
        depth: 2,
        dim: 16,
        timesteps: 4,
        state_dim: 4,
        num_classes: 4,
        input_hw: 16,
        in_channels: 1,
        patch_stages: vec![8, 16],
        mlp_ratio: 2,
        ..ModelConfig::default()
    };
    let store = init_params(&cfg, seed).map_err(|e| e.to_string())?;
    let indices: Vec<usize> = (0..data.train_len()).collect();
    let (images, _) = data.train.batch(&indices, cfg.timesteps);
    let opts = ForwardOptions {
        capture_block_outputs: true,
        ..ForwardOptions::default()
    };
    let (logits, diag) = forward(&images, &cfg, &store, opts).map_err(|e| e.to_string())?;
    if logits.shape() != [8, 4] {
        return Err(format!("logits shape {:?}", logits.shape()));
    }
    let mut prev_counts: Option<Vec<usize>> = None;
    for (l, (x, mask)) in diag.block_outputs.iter().enumerate() {
        if !crate::model::masked_positions_zero(x, mask) {
            return Err(format!("block {l}: nonzero value at a masked position"));
        }
        for (b, kept) in mask.kept_indices().iter().enumerate() {
            if kept.is_empty() {
                return Err(format!("block {l}: sample {b} kept nothing"));
            }
            if !kept.windows(2).all(|w| w[0] < w[1]) {
                return Err(format!("block {l}: kept indices not increasing"));
            }
        }
        if let Some(prev) = &prev_counts {
            for (b, (&now, &before)) in
                mask.kept_counts().iter().zip(prev.iter()).enumerate()
            {
                if now > before {
                    return Err(format!(
                        "block {l}: sample {b} grew from {before} to {now} tokens"
                    ));
                }
            }
        }
        prev_counts = Some(mask.kept_counts().to_vec());
    }
    Ok(format!(
        "{} blocks: masked zeros, fallback, ordering, monotone shrinkage",
        diag.block_outputs.len()
    ))
}

/// Run every suite; `fast` trims case counts for interactive use.
pub fn run_all(fast: bool) -> Vec<SuiteResult> {
    let (scan_cases, scan_n, pruner_cases) = if fast {
        (100, 256, 200)
    } else {
        (500, 1024, 1000)
    };
    vec![
        SuiteResult::from("scan_oracle", scan_suite(scan_cases, scan_n)),
        SuiteResult::from(
            "pruner_oracle",
            pruner_oracle_equivalence(pruner_cases, 0xBEE),
        ),
        SuiteResult::from("op_gradients", op_gradient_suite(0x96AD)),
        SuiteResult::from("model_gradient", model_gradient_suite(0x60D)),
        SuiteResult::from("pad_invariance", pad_invariance_suite(0x9A7)),
        SuiteResult::from("mask_invariants", mask_invariant_suite(0x3A5)),
    ]
}
