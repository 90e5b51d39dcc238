//! MLP inner network: flattens the action/state/goal windows, appends the
//! noise embedding input and maps through GELU hidden layers.

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::layers::Linear;
use crate::tensor::tape::{NodeId, ParamId, ParamSet, Tape};
use crate::tensor::Tensor;

use super::ConditionalNet;

#[derive(Debug, Clone, Copy)]
pub struct MlpConfig {
    pub hidden: usize,
    pub depth: usize,
    pub obs_window: usize,
    pub goal_window: usize,
    pub state_dim: usize,
    pub act_dim: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            depth: 2,
            obs_window: 1,
            goal_window: 1,
            state_dim: 1,
            act_dim: 1,
        }
    }
}

pub struct MlpNet {
    params: ParamSet,
    hidden: Vec<Linear>,
    out: Linear,
    null_goal: ParamId,
    cfg: MlpConfig,
}

impl MlpNet {
    pub fn new(cfg: MlpConfig, rng: &mut RngStream) -> Result<Self> {
        if cfg.obs_window < 1 || cfg.goal_window < 1 {
            return Err(CoreError::Config("window sizes must be >= 1".into()));
        }
        if cfg.depth < 1 || cfg.hidden < 1 || cfg.state_dim < 1 || cfg.act_dim < 1 {
            return Err(CoreError::Config("mlp dimensions must be >= 1".into()));
        }
        let mut params = ParamSet::new();
        let in_dim =
            cfg.obs_window * (cfg.act_dim + cfg.state_dim) + cfg.goal_window * cfg.state_dim + 1;
        let mut hidden = Vec::with_capacity(cfg.depth);
        let mut prev = in_dim;
        for i in 0..cfg.depth {
            hidden.push(Linear::new(
                &mut params,
                &format!("mlp.h{i}"),
                prev,
                cfg.hidden,
                rng,
            )?);
            prev = cfg.hidden;
        }
        let out = Linear::new(
            &mut params,
            "mlp.out",
            prev,
            cfg.obs_window * cfg.act_dim,
            rng,
        )?;
        let null_goal = params.add("mlp.null_goal", Tensor::zeros(&[cfg.state_dim]))?;
        Ok(Self {
            params,
            hidden,
            out,
            null_goal,
            cfg,
        })
    }

    pub fn config(&self) -> MlpConfig {
        self.cfg
    }
}

impl ConditionalNet for MlpNet {
    fn forward(
        &self,
        tape: &mut Tape,
        scaled_actions: NodeId,
        states: NodeId,
        goals: NodeId,
        goal_mask: &[bool],
        c_noise: NodeId,
    ) -> Result<NodeId> {
        let b = goal_mask.len();
        let c = &self.cfg;
        let null = tape.param(&self.params, self.null_goal);
        let goals = tape.mask_rows(goals, null, goal_mask.to_vec())?;

        let a_flat = tape.reshape(scaled_actions, &[b, c.obs_window * c.act_dim])?;
        let s_flat = tape.reshape(states, &[b, c.obs_window * c.state_dim])?;
        let g_flat = tape.reshape(goals, &[b, c.goal_window * c.state_dim])?;
        let mut x = tape.concat_last(&[a_flat, s_flat, g_flat, c_noise])?;
        for layer in &self.hidden {
            x = layer.forward(tape, &self.params, x)?;
            x = tape.gelu(x);
        }
        let y = self.out.forward(tape, &self.params, x)?;
        tape.reshape(y, &[b, c.obs_window, c.act_dim])
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
