//! Network building blocks: linear maps, layer normalization, multi-head
//! causal self-attention and the transformer block assembled from them.

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::tape::{NodeId, ParamId, ParamSet, Tape};
use crate::tensor::Tensor;

fn init_normal(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::randn(shape, rng);
    for v in t.data_mut() {
        *v *= std;
    }
    t
}

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let std = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = params.add(
            &format!("{name}.weight"),
            init_normal(&[in_dim, out_dim], std, rng),
        )?;
        let bias = params.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        forward_linear(tape, x, w, b)
    }
}

/// `x[.., in] * W[in, out] + b[out]`, recorded for gradient propagation.
pub fn forward_linear(tape: &mut Tape, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let y = tape.matmul(x, weight)?;
    tape.add_bias(y, bias)
}

/// Layer normalization over the last dim.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Result<Self> {
        let gamma = params.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?;
        let beta = params.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Multi-head self-attention with a causal mask: output at position `i`
/// depends only on positions `<= i`.
#[derive(Debug, Clone)]
pub struct CausalSelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
    pub attn_dropout: f64,
    pub resid_dropout: f64,
}

impl CausalSelfAttention {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        attn_dropout: f64,
        resid_dropout: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CoreError::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        let qkv = Linear::new(params, &format!("{name}.qkv"), dim, 3 * dim, rng)?;
        let proj = Linear::new(params, &format!("{name}.proj"), dim, dim, rng)?;
        Ok(Self {
            qkv,
            proj,
            heads,
            dim,
            attn_dropout,
            resid_dropout,
        })
    }

    /// `x` is `[B, T, dim]`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let shape = tape.value(x).shape().to_vec();
        let (bsz, t, d) = match shape.as_slice() {
            [b, t, d] if *d == self.dim => (*b, *t, *d),
            s => {
                return Err(CoreError::ShapeMismatch(format!(
                    "attention expects [B, T, {}], got {s:?}",
                    self.dim
                )))
            }
        };
        let head_dim = d / self.heads;

        let qkv = self.qkv.forward(tape, params, x)?;
        let mut split = Vec::with_capacity(3);
        for part in 0..3 {
            let s = tape.slice_last(qkv, part * d, (part + 1) * d)?;
            // [B, T, D] -> [B*H, T, head_dim]
            let s = tape.reshape(s, &[bsz, t, self.heads, head_dim])?;
            let s = tape.swap_axes12(s)?;
            let s = tape.reshape(s, &[bsz * self.heads, t, head_dim])?;
            split.push(s);
        }
        let (q, k, v) = (split[0], split[1], split[2]);

        let scores = tape.bmm_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let attn = tape.softmax_causal(scores)?;
        let attn = tape.dropout(attn, self.attn_dropout);
        let ctx = tape.bmm(attn, v)?;

        let ctx = tape.reshape(ctx, &[bsz, self.heads, t, head_dim])?;
        let ctx = tape.swap_axes12(ctx)?;
        let ctx = tape.reshape(ctx, &[bsz, t, d])?;
        let out = self.proj.forward(tape, params, ctx)?;
        Ok(tape.dropout(out, self.resid_dropout))
    }
}

/// Two-layer feed-forward with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(params, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(params, &format!("{name}.fc2"), hidden, dim, rng)?,
            dropout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(tape, params, x)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, params, h)?;
        Ok(tape.dropout(h, self.dropout))
    }
}

/// Pre-norm transformer block: attention and feed-forward residual branches.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: CausalSelfAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        attn_dropout: f64,
        resid_dropout: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), dim)?,
            attn: CausalSelfAttention::new(
                params,
                &format!("{name}.attn"),
                dim,
                heads,
                attn_dropout,
                resid_dropout,
                rng,
            )?,
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), dim)?,
            ff: FeedForward::new(
                params,
                &format!("{name}.ff"),
                dim,
                ff_hidden,
                resid_dropout,
                rng,
            )?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let h = self.ln1.forward(tape, params, x)?;
        let h = self.attn.forward(tape, params, h)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, params, x)?;
        let h = self.ff.forward(tape, params, h)?;
        tape.add(x, h)
    }
}

/// Learned position embedding, one row per sequence slot.
#[derive(Debug, Clone)]
pub struct PositionEmbedding {
    pub table: ParamId,
    pub max_len: usize,
    pub dim: usize,
}

impl PositionEmbedding {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        max_len: usize,
        dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let table = params.add(name, init_normal(&[max_len, dim], 0.01, rng))?;
        Ok(Self {
            table,
            max_len,
            dim,
        })
    }

    /// Add positions `0..T` to `x[B, T, dim]`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let t = match tape.value(x).shape() {
            [_, t, _] => *t,
            s => {
                return Err(CoreError::ShapeMismatch(format!(
                    "position embedding expects rank 3, got {s:?}"
                )))
            }
        };
        if t > self.max_len {
            return Err(CoreError::Config(format!(
                "sequence length {t} exceeds position table {}",
                self.max_len
            )));
        }
        let full = tape.param(params, self.table);
        let pos = if t == self.max_len {
            full
        } else {
            // slice the first t rows via reshape + slice on a transposed view
            // is awkward; cheaper to gather through a rank-3 detour
            let as3 = tape.reshape(full, &[1, self.max_len, self.dim])?;
            let g = tape.gather_time(as3, (0..t).collect())?;
            tape.reshape(g, &[t, self.dim])?
        };
        tape.add_pos(x, pos)
    }
}
