//! Sequence-conditioned inner network. The token stream is
//!
//! ```text
//! [goal_1 .. goal_cg] [state_1 action_1] [state_2 action_2] ...
//! ```
//!
//! with causal masking, so an action token sees the goals, all earlier
//! timesteps and its own state. The noise embedding is projected to model
//! width and added onto every state token; goal masking swaps the goal
//! tokens for one learned null token. Denoised actions are read off at
//! every action position — during sampling only the last one is executed.

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::layers::{LayerNorm, Linear, PositionEmbedding, TransformerBlock};
use crate::tensor::tape::{NodeId, ParamId, ParamSet, Tape};
use crate::tensor::Tensor;

use super::ConditionalNet;

#[derive(Debug, Clone, Copy)]
pub struct TransformerConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub attn_dropout: f64,
    pub resid_dropout: f64,
    pub obs_window: usize,
    pub goal_window: usize,
    pub state_dim: usize,
    pub act_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 2,
            heads: 4,
            ff_mult: 4,
            attn_dropout: 0.05,
            resid_dropout: 0.05,
            obs_window: 5,
            goal_window: 1,
            state_dim: 2,
            act_dim: 2,
        }
    }
}

pub struct TransformerNet {
    params: ParamSet,
    embed_state: Linear,
    embed_action: Linear,
    embed_noise: Linear,
    pos: PositionEmbedding,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
    null_goal: ParamId,
    cfg: TransformerConfig,
}

impl TransformerNet {
    pub fn new(cfg: TransformerConfig, rng: &mut RngStream) -> Result<Self> {
        if cfg.obs_window < 1 || cfg.goal_window < 1 {
            return Err(CoreError::Config("window sizes must be >= 1".into()));
        }
        if cfg.width < 1 || cfg.depth < 1 || cfg.state_dim < 1 || cfg.act_dim < 1 {
            return Err(CoreError::Config("transformer dimensions must be >= 1".into()));
        }
        let mut params = ParamSet::new();
        let d = cfg.width;
        let embed_state = Linear::new(&mut params, "tf.embed_state", cfg.state_dim, d, rng)?;
        let embed_action = Linear::new(&mut params, "tf.embed_action", cfg.act_dim, d, rng)?;
        let embed_noise = Linear::new(&mut params, "tf.embed_noise", 1, d, rng)?;
        let seq_len = cfg.goal_window + 2 * cfg.obs_window;
        let pos = PositionEmbedding::new(&mut params, "tf.pos", seq_len, d, rng)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            blocks.push(TransformerBlock::new(
                &mut params,
                &format!("tf.block{i}"),
                d,
                cfg.heads,
                cfg.ff_mult * d,
                cfg.attn_dropout,
                cfg.resid_dropout,
                rng,
            )?);
        }
        let ln_f = LayerNorm::new(&mut params, "tf.ln_f", d)?;
        let head = Linear::new(&mut params, "tf.head", d, cfg.act_dim, rng)?;
        let null_goal = params.add("tf.null_goal", Tensor::zeros(&[d]))?;
        Ok(Self {
            params,
            embed_state,
            embed_action,
            embed_noise,
            pos,
            blocks,
            ln_f,
            head,
            null_goal,
            cfg,
        })
    }

    pub fn config(&self) -> TransformerConfig {
        self.cfg
    }

    /// Sequence slot of the action token for window position `j`.
    pub fn action_token_position(&self, j: usize) -> usize {
        self.cfg.goal_window + 2 * j + 1
    }
}

impl ConditionalNet for TransformerNet {
    fn forward(
        &self,
        tape: &mut Tape,
        scaled_actions: NodeId,
        states: NodeId,
        goals: NodeId,
        goal_mask: &[bool],
        c_noise: NodeId,
    ) -> Result<NodeId> {
        let c = &self.cfg;
        let b = goal_mask.len();

        let goal_tokens = self.embed_state.forward(tape, &self.params, goals)?;
        let null = tape.param(&self.params, self.null_goal);
        let goal_tokens = tape.mask_rows(goal_tokens, null, goal_mask.to_vec())?;

        let state_tokens = self.embed_state.forward(tape, &self.params, states)?;
        let noise_emb = self.embed_noise.forward(tape, &self.params, c_noise)?;
        let state_tokens = tape.add_row_bcast(state_tokens, noise_emb)?;

        let action_tokens = self.embed_action.forward(tape, &self.params, scaled_actions)?;

        let pairs = tape.interleave_time(state_tokens, action_tokens)?;
        let mut x = tape.concat_time(&[goal_tokens, pairs])?;
        x = self.pos.forward(tape, &self.params, x)?;
        for block in &self.blocks {
            x = block.forward(tape, &self.params, x)?;
        }
        x = self.ln_f.forward(tape, &self.params, x)?;
        let y = self.head.forward(tape, &self.params, x)?;
        let positions: Vec<usize> = (0..c.obs_window)
            .map(|j| self.action_token_position(j))
            .collect();
        let out = tape.gather_time(y, positions)?;
        tape.reshape(out, &[b, c.obs_window, c.act_dim])
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn obs_window(&self) -> usize {
        self.cfg.obs_window
    }

    fn goal_window(&self) -> usize {
        self.cfg.goal_window
    }

    fn state_dim(&self) -> usize {
        self.cfg.state_dim
    }

    fn act_dim(&self) -> usize {
        self.cfg.act_dim
    }
}
