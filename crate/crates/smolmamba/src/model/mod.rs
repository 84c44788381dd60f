//! The end-to-end network: spiking patch embedding, spike-form relative
//! position embedding, a stack of pruning state-space blocks, mask-aware
//! global average pooling, and a linear classification head.
//!
//! Data layout between blocks is `(batch, timestep, channel, token)`.
//! Each block runs, in order: pointwise projection + masked batch norm +
//! spiking activation; token pruning; depthwise causal convolution and
//! spiking activation per scan direction; the bidirectional selective
//! scan with spiking re-binarization; fusion modulated by the pruning
//! mask; an output projection with a masked residual; and a spiking MLP
//! residual. Pruned token slots stay exactly zero everywhere downstream.

pub mod checkpoint;
pub mod ops;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{count_macs, LayerKind, LayerOpCount, LayerShape};
use crate::init::SeededRng;
use crate::neuron::{lif_sequence, LifParams, SpikeMode};
use crate::pruner::{sst_tp, PruneError, PruneThresholds, TokenMask};
use crate::ssm::{selective_scan_tape, SsmParamVars, SsmParams};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{DenseTensor, SpikeTensor, TensorError};

use ops::{
    batch_norm_eval, batch_norm_train, channel_linear, conv2d, dwconv_tokens, gather_tokens,
    reverse_tokens, BnScope, Conv2dSpec,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input resolution mismatch: {0}")]
    ResolutionMismatch(String),
    #[error("sample {sample} has an empty token mask")]
    EmptyMask { sample: usize },
    #[error("invalid model configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prune(#[from] PruneError),
}

/// Architecture hyper-parameters. `depth`/`dim` follow the usual
/// `<blocks>-<channels>` naming of model variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub timesteps: usize,
    pub state_dim: usize,
    pub num_classes: usize,
    pub input_hw: usize,
    pub in_channels: usize,
    /// Output channels of each stride-2 patch stage; the last entry must
    /// equal `dim`.
    pub patch_stages: Vec<usize>,
    pub mlp_ratio: usize,
    pub pruning_enabled: bool,
    pub z_threshold: f64,
    pub phi: usize,
    pub zscore_epsilon: f64,
    /// Optional per-block overrides for ablations.
    pub phi_per_layer: Option<Vec<usize>>,
    pub z_threshold_per_layer: Option<Vec<f64>>,
    pub dw_kernel: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub lif_tau: f64,
    pub lif_v_th: f64,
    pub lif_v_reset: f64,
    pub surrogate_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            dim: 64,
            timesteps: 4,
            state_dim: 16,
            num_classes: 10,
            input_hw: 16,
            in_channels: 1,
            patch_stages: vec![16, 64],
            mlp_ratio: 2,
            pruning_enabled: true,
            z_threshold: 0.0,
            phi: 3,
            zscore_epsilon: 1e-5,
            phi_per_layer: None,
            z_threshold_per_layer: None,
            dw_kernel: 4,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            lif_tau: 2.0,
            lif_v_th: 0.5,
            lif_v_reset: 0.0,
            surrogate_alpha: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn lif(&self) -> LifParams {
        LifParams {
            tau: self.lif_tau,
            v_th: self.lif_v_th,
            v_reset: self.lif_v_reset,
            dt: 1.0,
            surrogate_alpha: self.surrogate_alpha,
        }
    }

    /// Grid side length after all stride-2 patch stages.
    pub fn token_grid(&self) -> usize {
        self.input_hw >> self.patch_stages.len()
    }

    /// Initial token count `N_0`.
    pub fn token_count(&self) -> usize {
        let g = self.token_grid();
        g * g
    }

    pub fn thresholds_for(&self, block: usize) -> PruneThresholds {
        PruneThresholds {
            z_threshold: self
                .z_threshold_per_layer
                .as_ref()
                .and_then(|v| v.get(block).copied())
                .unwrap_or(self.z_threshold),
            phi: self
                .phi_per_layer
                .as_ref()
                .and_then(|v| v.get(block).copied())
                .unwrap_or(self.phi),
            epsilon: self.zscore_epsilon,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth < 1 {
            return Err(ModelError::ConfigInvalid("depth must be at least 1".into()));
        }
        if self.patch_stages.is_empty() {
            return Err(ModelError::ConfigInvalid(
                "patch_stages must name at least one stage".into(),
            ));
        }
        if *self.patch_stages.last().unwrap() != self.dim {
            return Err(ModelError::ConfigInvalid(format!(
                "last patch stage ({}) must equal dim ({})",
                self.patch_stages.last().unwrap(),
                self.dim
            )));
        }
        let down = 1usize << self.patch_stages.len();
        if self.input_hw % down != 0 || self.token_grid() == 0 {
            return Err(ModelError::ResolutionMismatch(format!(
                "input {}x{} not divisible by total downsampling factor {}",
                self.input_hw, self.input_hw, down
            )));
        }
        if self.timesteps < 1 {
            return Err(ModelError::ConfigInvalid("timesteps must be >= 1".into()));
        }
        if self.phi < 1 || self.phi > self.timesteps {
            return Err(ModelError::ConfigInvalid(format!(
                "phi {} outside [1, {}]",
                self.phi, self.timesteps
            )));
        }
        self.lif()
            .validate()
            .map_err(|e| ModelError::ConfigInvalid(e.to_string()))?;
        Ok(())
    }
}

/// Named parameters and batch-norm running statistics, both in
/// lexicographic order for reproducible iteration and serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub params: BTreeMap<String, DenseTensor>,
    pub buffers: BTreeMap<String, DenseTensor>,
}

impl ParamStore {
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}

fn bn_entries(
    params: &mut BTreeMap<String, DenseTensor>,
    buffers: &mut BTreeMap<String, DenseTensor>,
    prefix: &str,
    channels: usize,
) {
    params.insert(format!("{prefix}.gamma"), DenseTensor::ones(&[channels]));
    params.insert(format!("{prefix}.beta"), DenseTensor::zeros(&[channels]));
    buffers.insert(
        format!("{prefix}.running_mean"),
        DenseTensor::zeros(&[channels]),
    );
    buffers.insert(
        format!("{prefix}.running_var"),
        DenseTensor::ones(&[channels]),
    );
}

fn ssm_entries(
    params: &mut BTreeMap<String, DenseTensor>,
    prefix: &str,
    channels: usize,
    state_dim: usize,
    rng: &mut SeededRng,
) {
    let p = SsmParams::init(channels, state_dim, rng);
    params.insert(format!("{prefix}.lambda_raw"), p.lambda_raw);
    params.insert(format!("{prefix}.w_delta"), p.w_delta);
    params.insert(format!("{prefix}.delta_bias"), p.delta_bias);
    params.insert(format!("{prefix}.w_b"), p.w_b);
    params.insert(format!("{prefix}.w_c"), p.w_c);
    params.insert(format!("{prefix}.d_skip"), p.d_skip);
}

/// Seeded parameter initialization for a validated configuration.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();

    let mut c_in = self_or(cfg.in_channels, 1);
    for (k, &c_out) in cfg.patch_stages.iter().enumerate() {
        params.insert(
            format!("sps.{k}.conv.weight"),
            rng.linear_init(&[c_out, c_in, 3, 3], c_in * 9),
        );
        bn_entries(&mut params, &mut buffers, &format!("sps.{k}.bn"), c_out);
        c_in = c_out;
    }
    let c = cfg.dim;
    params.insert(
        "rpe.conv.weight".into(),
        rng.linear_init(&[c, 1, 3, 3], 9),
    );
    bn_entries(&mut params, &mut buffers, "rpe.bn", c);

    for l in 0..cfg.depth {
        let p = format!("block.{l}");
        params.insert(
            format!("{p}.in_proj.weight"),
            rng.linear_init(&[c, c], c),
        );
        bn_entries(&mut params, &mut buffers, &format!("{p}.in_bn"), c);
        params.insert(
            format!("{p}.dw_fwd.weight"),
            rng.linear_init(&[c, cfg.dw_kernel], cfg.dw_kernel),
        );
        params.insert(
            format!("{p}.dw_bwd.weight"),
            rng.linear_init(&[c, cfg.dw_kernel], cfg.dw_kernel),
        );
        ssm_entries(&mut params, &format!("{p}.ssm_fwd"), c, cfg.state_dim, &mut rng);
        ssm_entries(&mut params, &format!("{p}.ssm_bwd"), c, cfg.state_dim, &mut rng);
        params.insert(
            format!("{p}.out_proj.weight"),
            rng.linear_init(&[c, c], c),
        );
        bn_entries(&mut params, &mut buffers, &format!("{p}.out_bn"), c);
        let hidden = cfg.mlp_ratio * c;
        params.insert(
            format!("{p}.smlp.fc1.weight"),
            rng.linear_init(&[hidden, c], c),
        );
        bn_entries(&mut params, &mut buffers, &format!("{p}.smlp.bn1"), hidden);
        params.insert(
            format!("{p}.smlp.fc2.weight"),
            rng.linear_init(&[c, hidden], hidden),
        );
        bn_entries(&mut params, &mut buffers, &format!("{p}.smlp.bn2"), c);
    }
    params.insert(
        "head.weight".into(),
        rng.linear_init(&[c, cfg.num_classes], c),
    );
    params.insert("head.bias".into(), DenseTensor::zeros(&[cfg.num_classes]));
    Ok(ParamStore { params, buffers })
}

fn self_or(v: usize, min: usize) -> usize {
    v.max(min)
}

/// Inter-block activation and its validity mask.
#[derive(Debug, Clone)]
pub struct BlockState {
    pub x: DenseTensor,
    pub mask: TokenMask,
}

#[derive(Debug, Clone)]
pub struct BlockDiagnostics {
    pub kept_counts: Vec<usize>,
    pub kept_indices: Vec<Vec<usize>>,
    /// Mean over samples of kept / previously-valid token counts.
    pub keep_ratio_mean: f64,
    /// Fraction of nonzero entries of the block input at valid slots.
    pub input_firing_rate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub blocks: Vec<BlockDiagnostics>,
    pub energy_layers: Vec<LayerOpCount>,
    /// Batch-norm statistics from a training pass, for running-stat
    /// updates keyed by buffer prefix.
    pub bn_batch_stats: Vec<(String, DenseTensor, DenseTensor)>,
    /// Block outputs with their masks, captured on request.
    pub block_outputs: Vec<(DenseTensor, TokenMask)>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub training: bool,
    pub spike_mode: SpikeMode,
    pub collect_energy: bool,
    pub capture_block_outputs: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            training: false,
            spike_mode: SpikeMode::Hard,
            collect_energy: false,
            capture_block_outputs: false,
        }
    }
}

pub struct TapeForward {
    pub logits: Var,
    pub vars: BTreeMap<String, Var>,
    pub diagnostics: Diagnostics,
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    cfg: &'a ModelConfig,
    opts: ForwardOptions,
    vars: BTreeMap<String, Var>,
    buffers: &'a BTreeMap<String, DenseTensor>,
    diagnostics: Diagnostics,
}

impl<'a> Ctx<'a> {
    fn new(
        tape: &'a mut Tape,
        cfg: &'a ModelConfig,
        store: &'a ParamStore,
        opts: ForwardOptions,
    ) -> Self {
        let mut vars = BTreeMap::new();
        for (name, value) in &store.params {
            vars.insert(name.clone(), tape.param(value.clone()));
        }
        Self::with_vars(tape, cfg, vars, &store.buffers, opts)
    }

    fn with_vars(
        tape: &'a mut Tape,
        cfg: &'a ModelConfig,
        vars: BTreeMap<String, Var>,
        buffers: &'a BTreeMap<String, DenseTensor>,
        opts: ForwardOptions,
    ) -> Self {
        Self {
            tape,
            cfg,
            opts,
            vars,
            buffers,
            diagnostics: Diagnostics::default(),
        }
    }

    fn p(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn buffer(&self, name: &str) -> &DenseTensor {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    fn lif(&mut self, x: Var) -> Result<Var, ModelError> {
        Ok(lif_sequence(
            self.tape,
            x,
            &self.cfg.lif(),
            self.opts.spike_mode,
        )?)
    }

    /// Batch norm with train/eval dispatch; records batch statistics for
    /// running updates during training.
    fn bn(&mut self, prefix: &str, x: Var, scope: &BnScope) -> Result<Var, ModelError> {
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        if self.opts.training {
            let (y, stats) =
                batch_norm_train(self.tape, x, gamma, beta, scope, self.cfg.bn_eps)?;
            self.diagnostics
                .bn_batch_stats
                .push((prefix.to_string(), stats.mean, stats.var));
            Ok(y)
        } else {
            let mean = self.buffer(&format!("{prefix}.running_mean")).clone();
            let var = self.buffer(&format!("{prefix}.running_var")).clone();
            Ok(batch_norm_eval(
                self.tape,
                x,
                gamma,
                beta,
                &mean,
                &var,
                scope,
                self.cfg.bn_eps,
            )?)
        }
    }

    fn ssm_vars(&self, prefix: &str) -> SsmParamVars {
        SsmParamVars {
            lambda_raw: self.p(&format!("{prefix}.lambda_raw")),
            w_delta: self.p(&format!("{prefix}.w_delta")),
            delta_bias: self.p(&format!("{prefix}.delta_bias")),
            w_b: self.p(&format!("{prefix}.w_b")),
            w_c: self.p(&format!("{prefix}.w_c")),
            d_skip: self.p(&format!("{prefix}.d_skip")),
        }
    }

    fn record_energy(
        &mut self,
        layer: String,
        block: Option<usize>,
        kind: LayerKind,
        shape: LayerShape,
        n_tokens: f64,
        fr: f64,
    ) {
        if !self.opts.collect_energy {
            return;
        }
        self.diagnostics.energy_layers.push(LayerOpCount {
            layer,
            block,
            kind,
            macs: count_macs(&shape, n_tokens),
            fr,
            timesteps: self.cfg.timesteps,
        });
    }
}

fn mean_kept(mask: &TokenMask) -> f64 {
    mask.kept_counts().iter().sum::<usize>() as f64 / mask.batch().max(1) as f64
}

/// Fraction of nonzero entries at valid token slots of a `(B,T,C,N)` tensor.
fn firing_rate_masked(x: &DenseTensor, mask: &TokenMask) -> f64 {
    let (b_n, t_n, c_n, n_tok) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    let mut nonzero = 0usize;
    let mut total = 0usize;
    for b in 0..b_n {
        let count = mask.kept_counts()[b];
        for tc in 0..t_n * c_n {
            let base = (b * t_n * c_n + tc) * n_tok;
            for n in 0..count {
                total += 1;
                if x.data()[base + n] != 0.0 {
                    nonzero += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        nonzero as f64 / total as f64
    }
}

fn firing_rate_dense(x: &DenseTensor) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.data().iter().filter(|&&v| v != 0.0).count() as f64 / x.len() as f64
}

/// Patch stages: stride-2 3x3 convolution, batch norm, spiking neuron.
/// Input `(B, T, Cin, H, W)`; output spike grid `(B, T, C, g, g)`.
fn sps_stack(ctx: &mut Ctx, x: Var) -> Result<Var, ModelError> {
    let (b_n, t_n) = {
        let s = ctx.tape.value(x).shape();
        (s[0], s[1])
    };
    let mut cur = x;
    for (k, &c_out) in ctx.cfg.patch_stages.iter().enumerate() {
        let shape = ctx.tape.value(cur).shape().to_vec();
        let (c_in, h, w) = (shape[2], shape[3], shape[4]);
        if ctx.opts.collect_energy {
            let (kind, fr) = if k == 0 {
                (LayerKind::SpsConvFirst, 1.0)
            } else {
                (LayerKind::SnnConv, firing_rate_dense(ctx.tape.value(cur)))
            };
            let positions = ((h / 2) * (w / 2)) as f64;
            ctx.record_energy(
                format!("sps.{k}.conv"),
                None,
                kind,
                LayerShape::Conv2dGrid {
                    c_in_per_group: c_in,
                    c_out,
                    kernel: 3,
                },
                positions,
                fr,
            );
        }
        let flat = ctx.tape.reshape(cur, &[b_n * t_n, c_in, h, w])?;
        let conv = conv2d(
            ctx.tape,
            flat,
            ctx.p(&format!("sps.{k}.conv.weight")),
            None,
            Conv2dSpec {
                stride: 2,
                padding: 1,
                groups: 1,
            },
        )?;
        let normed = ctx.bn(&format!("sps.{k}.bn"), conv, &BnScope::Grid)?;
        let back = ctx
            .tape
            .reshape(normed, &[b_n, t_n, c_out, h / 2, w / 2])?;
        cur = ctx.lif(back)?;
    }
    Ok(cur)
}

/// Spike-form relative position embedding on the full patch grid:
/// depthwise 3x3 convolution, batch norm, spiking neuron; added to the
/// input and re-binarized by clamping at 1.
fn rpe_add(ctx: &mut Ctx, spikes: Var) -> Result<Var, ModelError> {
    let shape = ctx.tape.value(spikes).shape().to_vec();
    let (b_n, t_n, c, g_h, g_w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    if ctx.opts.collect_energy {
        let fr = firing_rate_dense(ctx.tape.value(spikes));
        ctx.record_energy(
            "rpe.conv".into(),
            None,
            LayerKind::SnnConv,
            LayerShape::Conv2dGrid {
                c_in_per_group: 1,
                c_out: c,
                kernel: 3,
            },
            (g_h * g_w) as f64,
            fr,
        );
    }
    let flat = ctx.tape.reshape(spikes, &[b_n * t_n, c, g_h, g_w])?;
    let conv = conv2d(
        ctx.tape,
        flat,
        ctx.p("rpe.conv.weight"),
        None,
        Conv2dSpec {
            stride: 1,
            padding: 1,
            groups: c,
        },
    )?;
    let normed = ctx.bn("rpe.bn", conv, &BnScope::Grid)?;
    let back = ctx.tape.reshape(normed, &[b_n, t_n, c, g_h, g_w])?;
    let rpe = ctx.lif(back)?;
    let summed = ctx.tape.add(spikes, rpe)?;
    Ok(ctx.tape.clamp_max(summed, 1.0))
}

fn mask_bits_var(ctx: &mut Ctx, mask: &TokenMask) -> Result<Var, ModelError> {
    let bits = mask.bits();
    let (b_n, n_tok) = (bits.shape()[0], bits.shape()[1]);
    Ok(ctx.tape.leaf(bits.reshape(&[b_n, 1, 1, n_tok])?))
}

/// One block. Input and output are `(B, T, C, N)` with their masks.
fn run_block(
    ctx: &mut Ctx,
    l: usize,
    x: Var,
    mask: &TokenMask,
) -> Result<(Var, TokenMask), ModelError> {
    let p = format!("block.{l}");
    let c = ctx.cfg.dim;
    let s_dim = ctx.cfg.state_dim;
    let (b_n, t_n) = {
        let s = ctx.tape.value(x).shape();
        (s[0], s[1])
    };
    let input_fr = firing_rate_masked(ctx.tape.value(x), mask);
    let n_prev = mean_kept(mask);
    ctx.record_energy(
        format!("{p}.in_proj"),
        Some(l),
        LayerKind::SnnConv,
        LayerShape::Pointwise { c_in: c, c_out: c },
        n_prev,
        input_fr,
    );

    // projection -> masked batch norm -> spikes
    let proj = channel_linear(ctx.tape, x, ctx.p(&format!("{p}.in_proj.weight")), None)?;
    let normed = ctx.bn(
        &format!("{p}.in_bn"),
        proj,
        &BnScope::Tokens(mask.clone()),
    )?;
    let o_spikes = ctx.lif(normed)?;

    // token pruning from detached spike values
    let (pruned, new_mask, residual) = if ctx.cfg.pruning_enabled {
        let outcome = sst_tp(ctx.tape.value(o_spikes), &ctx.cfg.thresholds_for(l))?;
        let gathered = gather_tokens(ctx.tape, o_spikes, &outcome.mask)?;
        debug_assert_eq!(
            ctx.tape.value(gathered).data(),
            outcome.tokens.data(),
            "gather must reproduce the pruner's padded tensor"
        );
        let residual = gather_tokens(ctx.tape, x, &outcome.mask)?;
        (gathered, outcome.mask, residual)
    } else {
        (o_spikes, mask.clone(), x)
    };
    let keep_ratio_mean = {
        let prev = mask.kept_counts();
        let now = new_mask.kept_counts();
        now.iter()
            .zip(prev)
            .map(|(&n, &d)| n as f64 / d.max(1) as f64)
            .sum::<f64>()
            / b_n as f64
    };
    ctx.diagnostics.blocks.push(BlockDiagnostics {
        kept_counts: new_mask.kept_counts().to_vec(),
        kept_indices: new_mask.kept_indices().to_vec(),
        keep_ratio_mean,
        input_firing_rate: input_fr,
    });
    let n_live = mean_kept(&new_mask);
    let n_pad = new_mask.padded_len();

    // depthwise causal conv + spikes per direction; mask afterwards so the
    // scans see exact zeros at padded slots
    let bits = mask_bits_var(ctx, &new_mask)?;
    let p_fr = firing_rate_masked(ctx.tape.value(pruned), &new_mask);
    ctx.record_energy(
        format!("{p}.dwconv.fwd"),
        Some(l),
        LayerKind::SnnConv,
        LayerShape::DepthwiseTokens {
            channels: c,
            kernel: ctx.cfg.dw_kernel,
        },
        n_live,
        p_fr,
    );
    ctx.record_energy(
        format!("{p}.dwconv.bwd"),
        Some(l),
        LayerKind::SnnConv,
        LayerShape::DepthwiseTokens {
            channels: c,
            kernel: ctx.cfg.dw_kernel,
        },
        n_live,
        p_fr,
    );
    let reversed = reverse_tokens(ctx.tape, pruned, &new_mask)?;
    let conv_f = dwconv_tokens(ctx.tape, pruned, ctx.p(&format!("{p}.dw_fwd.weight")))?;
    let conv_b = dwconv_tokens(ctx.tape, reversed, ctx.p(&format!("{p}.dw_bwd.weight")))?;
    let h_f_raw = ctx.lif(conv_f)?;
    let h_b_raw = ctx.lif(conv_b)?;
    let h_f = ctx.tape.mul(h_f_raw, bits)?;
    let h_b = ctx.tape.mul(h_b_raw, bits)?;

    // bidirectional selective scan with spiking re-binarization
    for (dir, h_var) in [("fwd", h_f), ("bwd", h_b)] {
        let fr = firing_rate_masked(ctx.tape.value(h_var), &new_mask);
        ctx.record_energy(
            format!("{p}.ssm_{dir}.proj"),
            Some(l),
            LayerKind::SnnFc,
            LayerShape::Pointwise {
                c_in: c,
                c_out: 1 + 2 * s_dim,
            },
            n_live,
            fr,
        );
        ctx.record_energy(
            format!("{p}.ssm_{dir}.mul"),
            Some(l),
            LayerKind::SsmMul,
            LayerShape::SsmDirection {
                channels: c,
                state_dim: s_dim,
            },
            n_live,
            1.0,
        );
        ctx.record_energy(
            format!("{p}.ssm_{dir}.ac"),
            Some(l),
            LayerKind::SsmAc,
            LayerShape::SsmDirection {
                channels: c,
                state_dim: s_dim,
            },
            n_live,
            fr,
        );
    }
    let scan_dir = |ctx: &mut Ctx, h: Var, prefix: &str| -> Result<Var, ModelError> {
        let flat = ctx.tape.reshape(h, &[b_n * t_n, c, n_pad])?;
        let z = selective_scan_tape(ctx.tape, flat, &ctx.ssm_vars(prefix))?;
        let back = ctx.tape.reshape(z, &[b_n, t_n, c, n_pad])?;
        ctx.lif(back)
    };
    let z_f = scan_dir(ctx, h_f, &format!("{p}.ssm_fwd"))?;
    let z_b = scan_dir(ctx, h_b, &format!("{p}.ssm_bwd"))?;

    // fuse directions, modulate by the mask
    let z_b_aligned = reverse_tokens(ctx.tape, z_b, &new_mask)?;
    let fused = ctx.tape.add(z_f, z_b_aligned)?;
    let fused = ctx.tape.mul(fused, bits)?;

    // output projection + masked residual
    let f_fr = firing_rate_masked(ctx.tape.value(fused), &new_mask);
    ctx.record_energy(
        format!("{p}.out_proj"),
        Some(l),
        LayerKind::SnnConv,
        LayerShape::Pointwise { c_in: c, c_out: c },
        n_live,
        f_fr,
    );
    let out = channel_linear(ctx.tape, fused, ctx.p(&format!("{p}.out_proj.weight")), None)?;
    let out = ctx.bn(
        &format!("{p}.out_bn"),
        out,
        &BnScope::Tokens(new_mask.clone()),
    )?;
    let out = ctx.lif(out)?;
    let u = ctx.tape.add(out, residual)?;

    // spiking MLP residual
    let hidden = ctx.cfg.mlp_ratio * c;
    let u_fr = firing_rate_masked(ctx.tape.value(u), &new_mask);
    ctx.record_energy(
        format!("{p}.smlp.fc1"),
        Some(l),
        LayerKind::SnnFc,
        LayerShape::Pointwise {
            c_in: c,
            c_out: hidden,
        },
        n_live,
        u_fr,
    );
    let s1 = channel_linear(ctx.tape, u, ctx.p(&format!("{p}.smlp.fc1.weight")), None)?;
    let s1 = ctx.bn(
        &format!("{p}.smlp.bn1"),
        s1,
        &BnScope::Tokens(new_mask.clone()),
    )?;
    let s1 = ctx.lif(s1)?;
    let s1_fr = firing_rate_masked(ctx.tape.value(s1), &new_mask);
    ctx.record_energy(
        format!("{p}.smlp.fc2"),
        Some(l),
        LayerKind::SnnFc,
        LayerShape::Pointwise {
            c_in: hidden,
            c_out: c,
        },
        n_live,
        s1_fr,
    );
    let s2 = channel_linear(ctx.tape, s1, ctx.p(&format!("{p}.smlp.fc2.weight")), None)?;
    let s2 = ctx.bn(
        &format!("{p}.smlp.bn2"),
        s2,
        &BnScope::Tokens(new_mask.clone()),
    )?;
    let s2 = ctx.lif(s2)?;
    let x_out = ctx.tape.add(s2, u)?;

    debug_assert!(
        masked_positions_zero(ctx.tape.value(x_out), &new_mask),
        "block output must be exactly zero at masked positions"
    );
    Ok((x_out, new_mask))
}

pub(crate) fn masked_positions_zero(x: &DenseTensor, mask: &TokenMask) -> bool {
    let n_tok = *x.shape().last().unwrap();
    let b_n = mask.batch();
    let per_sample = x.len() / (b_n * n_tok);
    for b in 0..b_n {
        let count = mask.kept_counts()[b];
        for rc in 0..per_sample {
            let base = (b * per_sample + rc) * n_tok;
            for n in count..n_tok {
                if x.data()[base + n] != 0.0 {
                    return false;
                }
            }
        }
    }
    true
}

/// Mask-aware global average pooling on the tape: features are summed
/// over timesteps and valid tokens, divided by the valid token count.
fn mgap_tape(ctx: &mut Ctx, x: Var, mask: &TokenMask) -> Result<Var, ModelError> {
    let bits = mask_bits_var(ctx, mask)?;
    let masked = ctx.tape.mul(x, bits)?;
    let over_tokens = ctx.tape.sum_axis(masked, 3)?;
    let over_time = ctx.tape.sum_axis(over_tokens, 1)?;
    let counts: Vec<f64> = mask.kept_counts().iter().map(|&c| c as f64).collect();
    let b_n = mask.batch();
    if counts.iter().any(|&c| c < 1.0) {
        let sample = counts.iter().position(|&c| c < 1.0).unwrap();
        return Err(ModelError::EmptyMask { sample });
    }
    let denom = ctx
        .tape
        .leaf(DenseTensor::new(vec![b_n, 1], counts).unwrap());
    Ok(ctx.tape.div(over_time, denom)?)
}

/// Mask-aware global average pooling, value domain:
/// `P[b, c] = sum_{t, n} mask[b, n] * x[b, t, c, n] / sum_n mask[b, n]`.
pub fn mgap(x: &DenseTensor, mask: &TokenMask) -> Result<DenseTensor, ModelError> {
    let (b_n, t_n, c_n, n_tok) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    let mut out = DenseTensor::zeros(&[b_n, c_n]);
    for b in 0..b_n {
        let count = mask.kept_counts()[b];
        if count == 0 {
            return Err(ModelError::EmptyMask { sample: b });
        }
        for c in 0..c_n {
            let mut acc = 0.0;
            for t in 0..t_n {
                let base = ((b * t_n + t) * c_n + c) * n_tok;
                for n in 0..count {
                    acc += x.data()[base + n];
                }
            }
            out.data_mut()[b * c_n + c] = acc / count as f64;
        }
    }
    Ok(out)
}

/// Full forward pass on a caller-provided tape. `images` is
/// `(B, T, in_channels, H, W)`; static datasets tile the frame across T
/// before calling (see [`tile_static`]).
pub fn forward_on_tape(
    tape: &mut Tape,
    images: &DenseTensor,
    cfg: &ModelConfig,
    store: &ParamStore,
    opts: ForwardOptions,
) -> Result<TapeForward, ModelError> {
    let mut vars = BTreeMap::new();
    for (name, value) in &store.params {
        vars.insert(name.clone(), tape.param(value.clone()));
    }
    forward_with_vars(tape, images, cfg, vars, &store.buffers, opts)
}

/// Forward pass over parameters already present on the tape, keyed by
/// name. This is the entry point for whole-model gradient checking.
pub fn forward_with_vars(
    tape: &mut Tape,
    images: &DenseTensor,
    cfg: &ModelConfig,
    vars: BTreeMap<String, Var>,
    buffers: &BTreeMap<String, DenseTensor>,
    opts: ForwardOptions,
) -> Result<TapeForward, ModelError> {
    cfg.validate()?;
    let s = images.shape();
    if s.len() != 5
        || s[1] != cfg.timesteps
        || s[2] != cfg.in_channels
        || s[3] != cfg.input_hw
        || s[4] != cfg.input_hw
    {
        return Err(ModelError::ResolutionMismatch(format!(
            "expected (B, {}, {}, {}, {}), got {:?}",
            cfg.timesteps, cfg.in_channels, cfg.input_hw, cfg.input_hw, s
        )));
    }
    let b_n = s[0];
    let mut ctx = Ctx::with_vars(tape, cfg, vars, buffers, opts);
    let x = ctx.tape.leaf(images.clone());
    let grid_spikes = sps_stack(&mut ctx, x)?;
    let embedded = rpe_add(&mut ctx, grid_spikes)?;
    let g = cfg.token_grid();
    let mut tokens = ctx
        .tape
        .reshape(embedded, &[b_n, cfg.timesteps, cfg.dim, g * g])?;
    let mut mask = TokenMask::full(b_n, g * g);
    for l in 0..cfg.depth {
        let (next, next_mask) = run_block(&mut ctx, l, tokens, &mask)?;
        if ctx.opts.capture_block_outputs {
            ctx.diagnostics
                .block_outputs
                .push((ctx.tape.value(next).clone(), next_mask.clone()));
        }
        tokens = next;
        mask = next_mask;
    }
    let pooled = mgap_tape(&mut ctx, tokens, &mask)?;
    let logits = {
        let w = ctx.p("head.weight");
        let b = ctx.p("head.bias");
        let prod = ctx.tape.matmul(pooled, w)?;
        ctx.tape.add(prod, b)?
    };
    let Ctx {
        vars, diagnostics, ..
    } = ctx;
    Ok(TapeForward {
        logits,
        vars,
        diagnostics,
    })
}

/// Forward pass without gradient recording; returns logits values and
/// diagnostics.
pub fn forward(
    images: &DenseTensor,
    cfg: &ModelConfig,
    store: &ParamStore,
    opts: ForwardOptions,
) -> Result<(DenseTensor, Diagnostics), ModelError> {
    let mut tape = Tape::no_grad();
    let out = forward_on_tape(&mut tape, images, cfg, store, opts)?;
    Ok((tape.value(out.logits).clone(), out.diagnostics))
}

/// Tile a static frame batch `(B, C, H, W)` across the simulation window.
pub fn tile_static(images: &DenseTensor, timesteps: usize) -> DenseTensor {
    let s = images.shape();
    let (b_n, rest): (usize, usize) = (s[0], s[1..].iter().product());
    let mut shape = vec![b_n, timesteps];
    shape.extend_from_slice(&s[1..]);
    let mut out = DenseTensor::zeros(&shape);
    for b in 0..b_n {
        for t in 0..timesteps {
            let dst = (b * timesteps + t) * rest;
            out.data_mut()[dst..dst + rest]
                .copy_from_slice(&images.data()[b * rest..(b + 1) * rest]);
        }
    }
    out
}

/// Spiking patch embedding of a static image batch `(B, C, H, W)`:
/// frames are tiled across the simulation window and pushed through the
/// stride-2 conv / batch norm / spiking stages. Returns binary tokens
/// `(B, T, dim, N_0)`. Uses running batch-norm statistics.
pub fn patch_embed_sps_lite(
    images: &DenseTensor,
    cfg: &ModelConfig,
    store: &ParamStore,
) -> Result<SpikeTensor, ModelError> {
    cfg.validate()?;
    let tiled = tile_static(images, cfg.timesteps);
    let mut tape = Tape::no_grad();
    let mut ctx = Ctx::new(&mut tape, cfg, store, ForwardOptions::default());
    let x = ctx.tape.leaf(tiled);
    let grid = sps_stack(&mut ctx, x)?;
    let s = ctx.tape.value(grid).shape().to_vec();
    let flat = ctx
        .tape
        .reshape(grid, &[s[0], s[1], s[2], s[3] * s[4]])?;
    Ok(tape.value(flat).clone())
}

/// Spike-form relative position embedding over tokens still arranged on
/// the full 2D grid: `X_0 = clamp(x + RPE, 1)`. Uses running statistics.
pub fn relative_position_embedding(
    x: &SpikeTensor,
    cfg: &ModelConfig,
    store: &ParamStore,
) -> Result<SpikeTensor, ModelError> {
    let g = cfg.token_grid();
    let s = x.shape().to_vec();
    if s.len() != 4 || s[3] != g * g {
        return Err(ModelError::ResolutionMismatch(format!(
            "expected (B, T, C, {}), got {:?}",
            g * g,
            s
        )));
    }
    let mut tape = Tape::no_grad();
    let mut ctx = Ctx::new(&mut tape, cfg, store, ForwardOptions::default());
    let grid = x.reshape(&[s[0], s[1], s[2], g, g])?;
    let xv = ctx.tape.leaf(grid);
    let embedded = rpe_add(&mut ctx, xv)?;
    let flat = ctx.tape.reshape(embedded, &s)?;
    Ok(tape.value(flat).clone())
}

/// One block applied to a value-domain state, eval mode with running
/// statistics. The returned mask is the block's (possibly shrunken) mask.
pub fn smolmamba_block(
    state: &BlockState,
    cfg: &ModelConfig,
    store: &ParamStore,
    block_index: usize,
) -> Result<BlockState, ModelError> {
    let mut tape = Tape::no_grad();
    let mut ctx = Ctx::new(&mut tape, cfg, store, ForwardOptions::default());
    let x = ctx.tape.leaf(state.x.clone());
    let (out, mask) = run_block(&mut ctx, block_index, x, &state.mask)?;
    Ok(BlockState {
        x: tape.value(out).clone(),
        mask,
    })
}

/// The spiking MLP of one block, eval mode: linear, batch norm, spikes,
/// twice; masked positions stay zero. The residual is the caller's.
pub fn smlp(
    u: &DenseTensor,
    mask: &TokenMask,
    cfg: &ModelConfig,
    store: &ParamStore,
    block_index: usize,
) -> Result<DenseTensor, ModelError> {
    let mut tape = Tape::no_grad();
    let mut ctx = Ctx::new(&mut tape, cfg, store, ForwardOptions::default());
    let p = format!("block.{block_index}");
    let uv = ctx.tape.leaf(u.clone());
    let s1 = channel_linear(ctx.tape, uv, ctx.p(&format!("{p}.smlp.fc1.weight")), None)?;
    let s1 = ctx.bn(&format!("{p}.smlp.bn1"), s1, &BnScope::Tokens(mask.clone()))?;
    let s1 = ctx.lif(s1)?;
    let s2 = channel_linear(ctx.tape, s1, ctx.p(&format!("{p}.smlp.fc2.weight")), None)?;
    let s2 = ctx.bn(&format!("{p}.smlp.bn2"), s2, &BnScope::Tokens(mask.clone()))?;
    let s2 = ctx.lif(s2)?;
    Ok(tape.value(s2).clone())
}

/// Apply recorded batch statistics to the running buffers with the
/// configured momentum. Called by the training loop after each batch.
pub fn update_running_stats(
    store: &mut ParamStore,
    diagnostics: &Diagnostics,
    momentum: f64,
) {
    for (prefix, mean, var) in &diagnostics.bn_batch_stats {
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let key = format!("{prefix}.{suffix}");
            let running = store.buffers.get_mut(&key).expect("buffer exists");
            for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}
