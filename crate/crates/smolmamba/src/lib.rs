//! Spiking state-space vision models with spike-guided spatio-temporal
//! token pruning and a synaptic-operation energy model.
//!
//! The crate builds everything from first principles on a small dense
//! tensor core with a reverse-mode tape: leaky integrate-and-fire
//! dynamics trained with sigmoid surrogate gradients, input-dependent
//! diagonal state-space scans over token sequences, activity-driven
//! token pruning with mask-aware aggregation, and an estimated-energy
//! report that prices dense multiply-accumulates against spike-gated
//! accumulates.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the
//! `smolmamba` binary, whose subcommands cover training, evaluation,
//! energy reporting, pruning-trace export, and self-checks.

pub mod cli;
pub mod config;
pub mod data;
pub mod energy;
pub mod init;
pub mod model;
pub mod neuron;
pub mod pruner;
pub mod selfcheck;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use tensor::{DenseTensor, SpikeTensor, TensorError};
