//! Adaptive Noise Filtering: a learnable gated depthwise-convolution
//! residual filter inserted between transformer blocks.
//!
//! For a token sequence `T`, the filter computes
//! `layernorm(T + conv1d(T) ⊙ gate(T))` where the gate is a sigmoid of
//! a per-channel affine map, `g = sigmoid(w ⊙ T + b)` with `w, b ∈ R^D`.
//! The per-channel (diagonal) map keeps the filter at O(N·D) work per
//! layer; the gate output is still a full vector per channel, and the
//! operation is isolated here so a different gate shape is a
//! one-function change.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VitError};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Where ANF layers are inserted relative to the transformer blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    None,
    /// After each of the first ⌈L/2⌉ blocks.
    Shallow,
    /// After every block, including the final one.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnfConfig {
    /// Odd convolution kernel length along the token axis.
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_placement")]
    pub placement: Placement,
    /// When false (the default), class and register tokens bypass the
    /// filter and are re-concatenated unchanged; sequence convolution
    /// across the class-token boundary would mix unrelated positions.
    #[serde(default)]
    pub apply_to_special_tokens: bool,
}

fn default_kernel_size() -> usize {
    3
}
fn default_placement() -> Placement {
    Placement::All
}

impl Default for AnfConfig {
    fn default() -> Self {
        AnfConfig {
            kernel_size: 3,
            placement: Placement::All,
            apply_to_special_tokens: false,
        }
    }
}

impl AnfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(VitError::Parse {
                key: "anf.kernel_size".into(),
                reason: format!("must be odd and positive, got {}", self.kernel_size),
            });
        }
        Ok(())
    }
}

/// Parameters of one ANF layer, generic over the storage so the same
/// structure describes both owned tensors and tape bindings.
#[derive(Debug, Clone)]
pub struct AnfParams<T> {
    /// [D×K] depthwise kernels.
    pub kernels: T,
    /// [D] convolution bias.
    pub conv_bias: T,
    /// [D] per-channel gate weight (diagonal W).
    pub gate_weight: T,
    /// [D] gate bias.
    pub gate_bias: T,
    /// [D] layernorm scale.
    pub ln_gamma: T,
    /// [D] layernorm shift.
    pub ln_beta: T,
}

/// Owned-parameter form of one filter layer.
pub type AnfLayer = AnfParams<Tensor>;

impl<T> AnfParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AnfParams<U> {
        AnfParams {
            kernels: f(&self.kernels),
            conv_bias: f(&self.conv_bias),
            gate_weight: f(&self.gate_weight),
            gate_bias: f(&self.gate_bias),
            ln_gamma: f(&self.ln_gamma),
            ln_beta: f(&self.ln_beta),
        }
    }

    /// Visits fields in canonical order with their short names.
    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        f("kernels", &self.kernels);
        f("conv_bias", &self.conv_bias);
        f("gate_weight", &self.gate_weight);
        f("gate_bias", &self.gate_bias);
        f("ln_gamma", &self.ln_gamma);
        f("ln_beta", &self.ln_beta);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        f("kernels", &mut self.kernels);
        f("conv_bias", &mut self.conv_bias);
        f("gate_weight", &mut self.gate_weight);
        f("gate_bias", &mut self.gate_bias);
        f("ln_gamma", &mut self.ln_gamma);
        f("ln_beta", &mut self.ln_beta);
    }
}

impl AnfLayer {
    /// Near-neutral initialization: identity-center kernels, zero gate
    /// (sigmoid(0)=0.5), unit layernorm affine. A fresh layer computes
    /// layernorm(1.5·T) and trains away from that state. No random
    /// draws, so adding ANF never shifts the init stream of the rest
    /// of the model.
    pub fn init(embed_dim: usize, kernel_size: usize) -> AnfLayer {
        let mut kernels = Tensor::zeros(&[embed_dim, kernel_size]);
        let center = (kernel_size - 1) / 2;
        for c in 0..embed_dim {
            kernels.data_mut()[c * kernel_size + center] = 1.0;
        }
        AnfParams {
            kernels,
            conv_bias: Tensor::zeros(&[embed_dim]),
            gate_weight: Tensor::zeros(&[embed_dim]),
            gate_bias: Tensor::zeros(&[embed_dim]),
            ln_gamma: Tensor::filled(&[embed_dim], 1.0),
            ln_beta: Tensor::zeros(&[embed_dim]),
        }
    }
}

/// Gating weights `g = sigmoid(w ⊙ tokens + b)`, strictly in (0,1)
/// for finite inputs.
pub fn gate(tape: &mut Tape, layer: &AnfParams<VarId>, tokens: VarId) -> Result<VarId> {
    let scaled = tape.mul_row_vector(tokens, layer.gate_weight)?;
    let shifted = tape.add_row_vector(scaled, layer.gate_bias)?;
    tape.sigmoid(shifted)
}

/// The full filter: `layernorm(tokens + conv1d(tokens) ⊙ gate(tokens))`.
/// Fully differentiable; with zero kernels and zero conv bias the
/// residual path is exact and the output equals `layernorm(tokens)`.
pub fn anf_filter(tape: &mut Tape, layer: &AnfParams<VarId>, tokens: VarId) -> Result<VarId> {
    let filtered = tape.conv1d_seq(tokens, layer.kernels, layer.conv_bias)?;
    let gates = gate(tape, layer, tokens)?;
    let gated = tape.mul(filtered, gates)?;
    let residual = tape.add(tokens, gated)?;
    tape.layernorm(residual, layer.ln_gamma, layer.ln_beta, LN_EPS)
}

/// Layernorm epsilon shared by the whole model.
pub const LN_EPS: f64 = 1e-5;

/// 1-based indices of the blocks after which a filter is inserted.
pub fn placement_plan(placement: Placement, num_blocks: usize) -> Vec<usize> {
    match placement {
        Placement::None => Vec::new(),
        Placement::All => (1..=num_blocks).collect(),
        Placement::Shallow => (1..=num_blocks.div_ceil(2)).collect(),
    }
}
