use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Full causal softmax attention in every block.
    Transformer,
    /// Sliding-window softmax attention in every block.
    Swa,
    /// Gated linear attention in every block.
    Xlstm,
    /// Gated linear attention and sliding-window attention, alternating.
    Swax,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Transformer => "transformer",
            Architecture::Swa => "swa",
            Architecture::Xlstm => "xlstm",
            Architecture::Swax => "swax",
        }
    }
}

/// Token mixer of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Sa,
    Swa,
    Gla,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    #[default]
    GlaFirst,
    SwaFirst,
}

/// Granularity of the GLA write/read/decay gates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// One write and one decay scalar per head and step; no read gate.
    #[default]
    Head,
    /// One value per key coordinate.
    Key,
}

fn default_theta() -> f64 {
    crate::kernels::RopeConfig::DEFAULT_THETA
}

fn default_eps() -> f64 {
    1e-6
}

fn default_ffn_mult() -> f64 {
    2.0
}

fn default_embed_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: f64,
    pub vocab_size: usize,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    pub default_window: usize,
    #[serde(default)]
    pub block_order: BlockOrder,
    #[serde(default)]
    pub gate_mode: GateMode,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    /// Std of the token embedding init. Tiny models with the projection
    /// default of 0.02 stall for thousands of steps before learning to copy.
    #[serde(default = "default_embed_std")]
    pub embed_std: f64,
}

impl ModelConfig {
    /// A SWAX configuration with the remaining fields at their defaults.
    pub fn swax(n_blocks: usize, model_dim: usize, n_heads: usize, vocab_size: usize, window: usize) -> Self {
        ModelConfig {
            architecture: Architecture::Swax,
            n_blocks,
            model_dim,
            n_heads,
            ffn_mult: default_ffn_mult(),
            vocab_size,
            rope_theta: default_theta(),
            default_window: window,
            block_order: BlockOrder::GlaFirst,
            gate_mode: GateMode::Head,
            norm_eps: default_eps(),
            embed_std: default_embed_std(),
        }
    }

    pub fn with_architecture(mut self, architecture: Architecture) -> Self {
        self.architecture = architecture;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("n_blocks", self.n_blocks),
            ("model_dim", self.model_dim),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("default_window", self.default_window),
        ] {
            if v == 0 {
                return fail(format!("model.{name} must be positive"));
            }
        }
        if self.model_dim % self.n_heads != 0 {
            return fail(format!(
                "model.model_dim {} is not divisible by model.n_heads {}",
                self.model_dim, self.n_heads
            ));
        }
        let uses_rope = self.architecture != Architecture::Xlstm;
        if uses_rope && self.head_dim() % 2 != 0 {
            return fail(format!(
                "model head dimension {} must be even for rotary embeddings",
                self.head_dim()
            ));
        }
        if self.architecture == Architecture::Swax && self.n_blocks % 2 != 0 {
            return fail(format!(
                "model.n_blocks must be even for swax (alternating mixers), got {}",
                self.n_blocks
            ));
        }
        if !(self.ffn_mult > 0.0 && self.ffn_mult.is_finite()) || self.hidden_dim() == 0 {
            return fail(format!(
                "model.ffn_mult must give a positive hidden width, got {}",
                self.ffn_mult
            ));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return fail(format!("model.rope_theta must be positive, got {}", self.rope_theta));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return fail(format!("model.norm_eps must be non-negative, got {}", self.norm_eps));
        }
        if !(self.embed_std > 0.0 && self.embed_std.is_finite()) {
            return fail(format!("model.embed_std must be positive, got {}", self.embed_std));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.ffn_mult * self.model_dim as f64).round() as usize
    }

    /// Gate columns per head.
    pub fn gate_width(&self) -> usize {
        match self.gate_mode {
            GateMode::Head => 1,
            GateMode::Key => self.head_dim(),
        }
    }

    /// Per-head scalar read gates would be undone by the per-head output norm,
    /// so only per-coordinate gating has a learned read gate.
    pub fn has_read_gate(&self) -> bool {
        self.gate_mode == GateMode::Key
    }

    /// Mixer of every block, bottom to top.
    pub fn mixers(&self) -> Vec<MixerKind> {
        (0..self.n_blocks)
            .map(|i| match self.architecture {
                Architecture::Transformer => MixerKind::Sa,
                Architecture::Swa => MixerKind::Swa,
                Architecture::Xlstm => MixerKind::Gla,
                Architecture::Swax => match (self.block_order, i % 2) {
                    (BlockOrder::GlaFirst, 0) | (BlockOrder::SwaFirst, 1) => MixerKind::Gla,
                    _ => MixerKind::Swa,
                },
            })
            .collect()
    }

    fn mixer_params(&self, kind: MixerKind) -> usize {
        let d = self.model_dim;
        let proj = 4 * d * d;
        match kind {
            MixerKind::Sa | MixerKind::Swa => proj,
            MixerKind::Gla => {
                let g = self.n_heads * self.gate_width();
                let gates = if self.has_read_gate() { 3 } else { 2 };
                proj + gates * (d * g + g) + d
            }
        }
    }

    /// Number of scalar parameters, computed from the configuration alone.
    pub fn param_count(&self) -> usize {
        let (d, v, f) = (self.model_dim, self.vocab_size, self.hidden_dim());
        let blocks: usize = self
            .mixers()
            .into_iter()
            .map(|m| 2 * d + 3 * d * f + self.mixer_params(m))
            .sum();
        2 * v * d + d + blocks
    }

    /// Forward FLOPs per token for a sequence of `seq_len` tokens with SWA window `window`.
    ///
    /// Every weight matrix entry costs one multiply-add (2 FLOPs) per token:
    /// attention/GLA projections, gate projections, the gated MLP and the output
    /// head. The embedding lookup, norms and biases are free. On top of that a
    /// softmax mixer that sees `n` keys costs `4 n d` (scores plus weighted sum
    /// of values; `n = S` for full attention, `min(w, S)` for a window) and a GLA
    /// mixer costs `2 d_qk d_v` per head for its state update.
    pub fn flops_per_token(&self, seq_len: usize, window: usize) -> f64 {
        let (d, v, f) = (self.model_dim as f64, self.vocab_size as f64, self.hidden_dim() as f64);
        let dh = self.head_dim() as f64;
        let heads = self.n_heads as f64;
        let g = (self.n_heads * self.gate_width()) as f64;
        let mlp = 3.0 * d * f;
        let blocks: f64 = self
            .mixers()
            .into_iter()
            .map(|m| {
                let mixer = match m {
                    MixerKind::Sa => 2.0 * 4.0 * d * d + 4.0 * seq_len as f64 * d,
                    MixerKind::Swa => 2.0 * 4.0 * d * d + 4.0 * window.min(seq_len) as f64 * d,
                    MixerKind::Gla => {
                        let gates = if self.has_read_gate() { 3.0 } else { 2.0 };
                        2.0 * (4.0 * d * d + gates * d * g) + 2.0 * dh * dh * heads
                    }
                };
                mixer + 2.0 * mlp
            })
            .sum();
        blocks + 2.0 * d * v
    }
}

/// Forward FLOPs per token; see [`ModelConfig::flops_per_token`].
pub fn count_flops_per_token(cfg: &ModelConfig, seq_len: usize, window: usize) -> f64 {
    cfg.flops_per_token(seq_len, window)
}
