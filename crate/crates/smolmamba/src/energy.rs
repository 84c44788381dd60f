//! Operation counting and the estimated-energy model.
//!
//! Dense multiply-accumulates are priced at 4.6 pJ and spike-gated
//! accumulates at 0.9 pJ (45 nm CMOS figures). Spiking layers convert
//! dense MAC counts into synaptic operations via
//! `SOPs = fr * T * MACs`, where `fr` is the measured firing rate of the
//! layer's input. Within a block, the state-update multiplications of the
//! scan (those touching `A_bar`, `C`, and the hidden state) stay
//! MAC-priced because the hidden state is real-valued; everything driven
//! by binary spikes is an accumulate. The first patch-embedding
//! convolution encodes real pixels and is the only dense MAC stage
//! outside the scan cores. Padded token slots are excluded from every
//! count, and energy is estimated compute only (no memory traffic).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Diagnostics;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("block {block} is missing a required {kind} count")]
    MissingLayerCount { block: usize, kind: &'static str },
}

/// Energy per elementary operation, picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self {
            e_mac_pj: 4.6,
            e_ac_pj: 0.9,
        }
    }
}

/// How a layer's operations are priced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Dense first convolution on real pixels: MAC-priced, once per sample.
    SpsConvFirst,
    /// Spike-driven convolution: AC-priced synaptic operations.
    SnnConv,
    /// Spike-driven fully connected layer: AC-priced synaptic operations.
    SnnFc,
    /// Scan state-update multiplications: MAC-priced, every timestep.
    SsmMul,
    /// Spike-gated scan input injections: AC-priced synaptic operations.
    SsmAc,
}

/// One counted layer from a measurement forward pass.
///
/// `macs` is the analytic per-sample per-timestep dense count at the
/// measured live token width; `fr` is the measured mean firing rate of
/// the layer's input (fraction of nonzero entries at valid positions).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerOpCount {
    pub layer: String,
    pub block: Option<usize>,
    pub kind: LayerKind,
    pub macs: f64,
    pub fr: f64,
    pub timesteps: usize,
}

/// Analytic dense-operation formulas per layer shape at a live token
/// count `n_tokens`.
#[derive(Debug, Clone, Copy)]
pub enum LayerShape {
    /// Per-token channel projection.
    Pointwise { c_in: usize, c_out: usize },
    /// Depthwise convolution along tokens with kernel size `kernel`.
    DepthwiseTokens { channels: usize, kernel: usize },
    /// One scan direction: the `N * C * S` state-update pool.
    SsmDirection { channels: usize, state_dim: usize },
    /// Both linear layers of the spiking MLP.
    Smlp { channels: usize, mlp_ratio: usize },
    /// 2D convolution on a grid; `n_tokens` is the output position count.
    Conv2dGrid {
        c_in_per_group: usize,
        c_out: usize,
        kernel: usize,
    },
}

pub fn count_macs(shape: &LayerShape, n_tokens: f64) -> f64 {
    assert!(n_tokens >= 1.0, "live token count must be at least 1");
    match *shape {
        LayerShape::Pointwise { c_in, c_out } => n_tokens * c_in as f64 * c_out as f64,
        LayerShape::DepthwiseTokens { channels, kernel } => {
            n_tokens * channels as f64 * kernel as f64
        }
        LayerShape::SsmDirection {
            channels,
            state_dim,
        } => n_tokens * channels as f64 * state_dim as f64,
        LayerShape::Smlp {
            channels,
            mlp_ratio,
        } => n_tokens * channels as f64 * (mlp_ratio * channels) as f64 * 2.0,
        LayerShape::Conv2dGrid {
            c_in_per_group,
            c_out,
            kernel,
        } => n_tokens * c_out as f64 * c_in_per_group as f64 * (kernel * kernel) as f64,
    }
}

/// `SOPs = fr * T * MACs`.
pub fn sops(fr: f64, timesteps: usize, macs: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&fr));
    debug_assert!(timesteps >= 1);
    fr * timesteps as f64 * macs
}

/// (mac_pj, ac_pj) decomposition for one layer record.
fn layer_energy(layer: &LayerOpCount, constants: &EnergyConstants) -> (f64, f64) {
    match layer.kind {
        LayerKind::SpsConvFirst => (constants.e_mac_pj * layer.macs, 0.0),
        LayerKind::SsmMul => (
            constants.e_mac_pj * layer.macs * layer.timesteps as f64,
            0.0,
        ),
        LayerKind::SnnConv | LayerKind::SnnFc | LayerKind::SsmAc => (
            0.0,
            constants.e_ac_pj * sops(layer.fr, layer.timesteps, layer.macs),
        ),
    }
}

/// Energy of one block: `e_mac * MACs_ssm + e_ac * (SOPs_conv + SOPs_fc
/// + SOPs_ssm)`. Errors if the block carries no scan-core count.
pub fn block_energy(
    block: usize,
    layers: &[LayerOpCount],
    constants: &EnergyConstants,
) -> Result<f64, EnergyError> {
    let mine: Vec<&LayerOpCount> = layers.iter().filter(|l| l.block == Some(block)).collect();
    if !mine.iter().any(|l| l.kind == LayerKind::SsmMul) {
        return Err(EnergyError::MissingLayerCount {
            block,
            kind: "ssm_mul",
        });
    }
    if !mine
        .iter()
        .any(|l| matches!(l.kind, LayerKind::SnnConv | LayerKind::SnnFc | LayerKind::SsmAc))
    {
        return Err(EnergyError::MissingLayerCount {
            block,
            kind: "synaptic",
        });
    }
    Ok(mine
        .iter()
        .map(|l| {
            let (mac, ac) = layer_energy(l, constants);
            mac + ac
        })
        .sum())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub layer: String,
    pub block: Option<usize>,
    pub kind: LayerKind,
    pub macs: f64,
    pub fr: f64,
    pub timesteps: usize,
    pub sops: f64,
    pub mac_energy_pj: f64,
    pub ac_energy_pj: f64,
    pub energy_pj: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyTotals {
    pub e_total_pj: f64,
    pub e_mac_total_pj: f64,
    pub e_ac_total_pj: f64,
    /// Everything outside the patch-embedding stages.
    pub e_non_sps_pj: f64,
}

/// Full per-layer decomposition plus the keep-ratio scaling index
/// `sum_l rho_l * fr_l`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyReport {
    pub schema_version: u32,
    pub constants: EnergyConstants,
    pub layers: Vec<LayerEnergy>,
    pub totals: EnergyTotals,
    pub keep_ratios: Vec<f64>,
    pub firing_rates: Vec<f64>,
    pub scaling_index: f64,
}

pub const ENERGY_SCHEMA_VERSION: u32 = 1;

/// Build the report from a measurement forward pass. All numbers are
/// per-sample picojoules.
pub fn total_energy(
    diagnostics: &Diagnostics,
    constants: &EnergyConstants,
) -> Result<EnergyReport, EnergyError> {
    let mut layers = Vec::with_capacity(diagnostics.energy_layers.len());
    let (mut mac_total, mut ac_total, mut non_sps) = (0.0, 0.0, 0.0);
    for l in &diagnostics.energy_layers {
        let (mac, ac) = layer_energy(l, constants);
        let e = mac + ac;
        mac_total += mac;
        ac_total += ac;
        if !l.layer.starts_with("sps.") {
            non_sps += e;
        }
        layers.push(LayerEnergy {
            layer: l.layer.clone(),
            block: l.block,
            kind: l.kind,
            macs: l.macs,
            fr: l.fr,
            timesteps: l.timesteps,
            sops: sops(l.fr, l.timesteps, l.macs),
            mac_energy_pj: mac,
            ac_energy_pj: ac,
            energy_pj: e,
        });
    }
    let n_blocks = diagnostics.blocks.len();
    for b in 0..n_blocks {
        // validates completeness of every block's counts
        block_energy(b, &diagnostics.energy_layers, constants)?;
    }
    let keep_ratios: Vec<f64> = diagnostics
        .blocks
        .iter()
        .map(|b| b.keep_ratio_mean)
        .collect();
    let firing_rates: Vec<f64> = diagnostics
        .blocks
        .iter()
        .map(|b| b.input_firing_rate)
        .collect();
    let scaling_index = keep_ratios
        .iter()
        .zip(&firing_rates)
        .map(|(r, f)| r * f)
        .sum();
    Ok(EnergyReport {
        schema_version: ENERGY_SCHEMA_VERSION,
        constants: *constants,
        layers,
        totals: EnergyTotals {
            e_total_pj: mac_total + ac_total,
            e_mac_total_pj: mac_total,
            e_ac_total_pj: ac_total,
            e_non_sps_pj: non_sps,
        },
        keep_ratios,
        firing_rates,
        scaling_index,
    })
}
