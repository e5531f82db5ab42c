//! Token-level language models built from pre-norm residual blocks:
//! `x += mixer(norm(x)); x += gated_mlp(norm(x))`, followed by a final norm
//! and an untied output projection.

mod config;

pub use config::{count_flops_per_token, Architecture, BlockOrder, GateMode, MixerKind, ModelConfig};

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{
    gated_linear_attention, layout_positions, rope_heads, sliding_window_heads, GateSequence, HeadLayout, RopeConfig,
};
use crate::rng::{stream, Stream};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;
/// Pre-sigmoid bias of the decay gate at initialisation.
const DECAY_BIAS: f64 = 4.0;

/// Per-call overrides for a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Window used by every SWA mixer instead of the configured default.
    pub window_override: Option<usize>,
}

impl ForwardOptions {
    pub fn window(w: usize) -> Self {
        ForwardOptions {
            window_override: Some(w),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Const(f64),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, v, f) = (cfg.model_dim, cfg.vocab_size, cfg.hidden_dim());
    let residual = INIT_STD / (2.0 * cfg.n_blocks as f64).sqrt();
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
    add("embed".into(), vec![v, d], Init::Normal(cfg.embed_std));
    for (i, kind) in cfg.mixers().into_iter().enumerate() {
        let p = |s: &str| format!("blocks.{i}.{s}");
        add(p("mixer_norm"), vec![d], Init::Const(1.0));
        for w in ["wq", "wk", "wv"] {
            add(p(&format!("mixer.{w}")), vec![d, d], Init::Normal(INIT_STD));
        }
        if kind == MixerKind::Gla {
            let g = cfg.n_heads * cfg.gate_width();
            for (gate, bias) in [("alpha", 0.0), ("beta", 0.0), ("lambda", DECAY_BIAS)] {
                if gate == "beta" && !cfg.has_read_gate() {
                    continue;
                }
                add(p(&format!("mixer.w_{gate}")), vec![d, g], Init::Normal(INIT_STD));
                add(p(&format!("mixer.b_{gate}")), vec![g], Init::Const(bias));
            }
            add(p("mixer.out_norm"), vec![d], Init::Const(1.0));
        }
        add(p("mixer.wo"), vec![d, d], Init::Normal(residual));
        add(p("mlp_norm"), vec![d], Init::Const(1.0));
        add(p("mlp.w_gate"), vec![d, f], Init::Normal(INIT_STD));
        add(p("mlp.w_up"), vec![d, f], Init::Normal(INIT_STD));
        add(p("mlp.w_down"), vec![f, d], Init::Normal(residual));
    }
    add("final_norm".into(), vec![d], Init::Const(1.0));
    add("head".into(), vec![d, v], Init::Normal(INIT_STD));
    specs
}

/// Parameters of one model, in a fixed order derived from its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

/// Deterministic initialisation from `seed` (init stream).
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = stream(seed, Stream::Init);
    let mut names = Vec::new();
    let mut params = Vec::new();
    for spec in param_specs(cfg) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            }
            Init::Const(c) => vec![T::from_f64(c); n],
        };
        names.push(spec.name);
        params.push(Tensor::new(spec.shape, data)?);
    }
    Ok(Model {
        cfg: cfg.clone(),
        names,
        params,
    })
}

impl<T: Scalar> Model<T> {
    /// Reassembles a model from named tensors, checking them against `cfg`.
    pub fn from_params(cfg: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        if named.len() != specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for this configuration, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.into_iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {} with shape {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Model {
            cfg: cfg.clone(),
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn mixers(&self) -> Vec<MixerKind> {
        self.cfg.mixers()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    /// Logits `[batch * seq, vocab]` for `tokens` holding `batch` sequences back to back.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        tokens: &[usize],
        batch: usize,
        opts: ForwardOptions,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        if params.len() != self.params.len() {
            return Err(Error::invalid(
                "forward",
                format!("expected {} parameter handles, got {}", self.params.len(), params.len()),
            ));
        }
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::invalid(
                "forward",
                format!("{} tokens do not split into {batch} non-empty sequences", tokens.len()),
            ));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::invalid(
                "forward",
                format!("token id {bad} out of range for vocabulary of {}", cfg.vocab_size),
            ));
        }
        let window = opts.window_override.unwrap_or(cfg.default_window);
        if window == 0 {
            return Err(Error::invalid("forward", "window override must be positive"));
        }
        let layout = HeadLayout {
            batch,
            seq: tokens.len() / batch,
            heads: cfg.n_heads,
        };
        let positions = layout_positions(&layout, 0);
        let rope = RopeConfig {
            theta: cfg.rope_theta,
            head_dim: cfg.head_dim(),
        };
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter list matches config");

        let mut x = tape.embedding(take(), tokens)?;
        for kind in cfg.mixers() {
            let norm = take();
            let h = tape.rmsnorm(x, norm, cfg.model_dim, cfg.norm_eps)?;
            let q = tape.matmul(h, take())?;
            let k = tape.matmul(h, take())?;
            let v = tape.matmul(h, take())?;
            let mixed = match kind {
                MixerKind::Sa | MixerKind::Swa => {
                    let q = rope_heads(tape, q, &positions, &rope)?;
                    let k = rope_heads(tape, k, &positions, &rope)?;
                    let w = if kind == MixerKind::Sa { layout.seq } else { window };
                    sliding_window_heads(tape, q, k, v, layout, w)?
                }
                MixerKind::Gla => {
                    let mut gate = |tape: &mut Tape<T>| -> Result<Var> {
                        let (w, b) = (take(), take());
                        let pre = tape.matmul(h, w)?;
                        let pre = tape.add_bias(pre, b)?;
                        tape.sigmoid(pre)
                    };
                    let alpha = gate(tape)?;
                    let beta = if cfg.has_read_gate() {
                        gate(tape)?
                    } else {
                        tape.constant(Tensor::full(&[layout.rows(), cfg.n_heads], T::one()))
                    };
                    let lambda = gate(tape)?;
                    let gates = GateSequence { alpha, beta, lambda };
                    let (y, _) = gated_linear_attention(tape, q, k, v, &gates, layout, None)?;
                    tape.rmsnorm(y, take(), cfg.head_dim(), cfg.norm_eps)?
                }
            };
            let out = tape.matmul(mixed, take())?;
            x = tape.add(x, out)?;

            let norm = take();
            let h = tape.rmsnorm(x, norm, cfg.model_dim, cfg.norm_eps)?;
            let (wg, wu, wd) = (take(), take(), take());
            let m = gated_mlp(tape, h, wg, wu, wd)?;
            x = tape.add(x, m)?;
        }
        let norm = take();
        let h = tape.rmsnorm(x, norm, cfg.model_dim, cfg.norm_eps)?;
        tape.matmul(h, take())
    }

    /// Logits `[S, vocab]` for one sequence, without gradient tracking.
    pub fn forward(&self, tokens: &[usize], opts: ForwardOptions) -> Result<Tensor<T>> {
        self.forward_batch(tokens, 1, opts)
    }

    /// Logits for `batch` equal-length sequences stored back to back.
    pub fn forward_batch(&self, tokens: &[usize], batch: usize, opts: ForwardOptions) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let y = self.forward_with(&mut tape, &vars, tokens, batch, opts)?;
        Ok(tape.value(y).clone())
    }
}

/// `W_down (silu(x W_gate) * (x W_up))`.
pub fn gated_mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let g = tape.matmul(x, w_gate)?;
    let g = tape.silu(g)?;
    let u = tape.matmul(x, w_up)?;
    let h = tape.mul(g, u)?;
    tape.matmul(h, w_down)
}
