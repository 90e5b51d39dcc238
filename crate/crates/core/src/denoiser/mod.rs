//! The denoiser contract `D(a, s, g, sigma)` and its concrete forms:
//! analytic oracles, preconditioned networks, and the guidance composite.
//!
//! Every denoiser maps a noisy action window to an estimate of the clean
//! one; the score of the smoothed distribution follows as
//! `(D(a, sigma) - a) / sigma^2`.

pub mod cfg;
pub mod mlp;
pub mod oracle;
pub mod transformer;

pub use cfg::{cfg_denoise, CfgDenoiser};
pub use mlp::{MlpConfig, MlpNet};
pub use oracle::{CondUncondPair, GaussianOracle, GmmOracle};
pub use transformer::{TransformerConfig, TransformerNet};

use crate::error::{CoreError, Result};
use crate::tensor::tape::{NodeId, ParamSet, Tape};
use crate::tensor::Tensor;

/// A denoiser evaluates `D(a, s, g, sigma)`; output shape equals the noisy
/// action input shape. `goal = None` requests the unconditional estimate,
/// which only goal-dropout-trained models (and oracles built for it) serve.
pub trait Denoiser: Sync {
    fn denoise(
        &self,
        actions: &Tensor,
        states: &Tensor,
        goal: Option<&Tensor>,
        sigma: f64,
    ) -> Result<Tensor>;

    /// Batched evaluation over the leading dim at a shared noise level.
    /// The default loops; networks override it with a real batched pass.
    fn denoise_batch(
        &self,
        actions: &Tensor,
        states: &Tensor,
        goals: Option<&Tensor>,
        sigma: f64,
    ) -> Result<Tensor> {
        let b = *actions
            .shape()
            .first()
            .ok_or_else(|| CoreError::ShapeMismatch("denoise_batch on scalar".into()))?;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let a = actions.index_leading(i)?;
            let s = states.index_leading(i)?;
            let g = match goals {
                Some(g) => Some(g.index_leading(i)?),
                None => None,
            };
            out.push(self.denoise(&a, &s, g.as_ref(), sigma)?);
        }
        Tensor::stack(&out)
    }

    fn supports_unconditional(&self) -> bool {
        false
    }
}

/// Score of the sigma-smoothed distribution implied by a denoiser value.
pub fn score_from_denoiser(d_value: &Tensor, actions: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(CoreError::Contract(format!(
            "score is undefined at sigma = {sigma}"
        )));
    }
    d_value.sub(actions).map(|t| t.scale(1.0 / (sigma * sigma)))
}

/// The scaling functions that keep network inputs and targets unit-scale
/// across noise levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioning {
    pub sigma_data: f64,
}

impl Preconditioning {
    pub fn new(sigma_data: f64) -> Result<Self> {
        if sigma_data <= 0.0 || !sigma_data.is_finite() {
            return Err(CoreError::Config(format!(
                "sigma_data must be positive: {sigma_data}"
            )));
        }
        Ok(Self { sigma_data })
    }

    pub fn c_skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sd2 + sigma * sigma)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sigma * self.sigma_data / (sd2 + sigma * sigma).sqrt()
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        1.0 / (sd2 + sigma * sigma).sqrt()
    }

    pub fn c_noise(&self, sigma: f64) -> f64 {
        0.25 * sigma.ln()
    }
}

/// The inner network contract wrapped by [`NetDenoiser`]: consumes
/// already-scaled noisy actions `[B, c_o, da]`, state and goal windows, a
/// per-sample goal mask, and the noise embedding input `[B, 1]`.
pub trait ConditionalNet: Send + Sync {
    fn forward(
        &self,
        tape: &mut Tape,
        scaled_actions: NodeId,
        states: NodeId,
        goals: NodeId,
        goal_mask: &[bool],
        c_noise: NodeId,
    ) -> Result<NodeId>;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn obs_window(&self) -> usize;
    fn goal_window(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
}

/// A network wrapped in the preconditioning layers:
/// `D(a, s, g, sigma) = c_skip(sigma) a + c_out(sigma) F(c_in(sigma) a, s, g, c_noise(sigma))`.
pub struct NetDenoiser<N: ConditionalNet> {
    pub net: N,
    pub precond: Preconditioning,
    unconditional_ok: bool,
}

impl<N: ConditionalNet> NetDenoiser<N> {
    pub fn new(net: N, sigma_data: f64) -> Result<Self> {
        Ok(Self {
            net,
            precond: Preconditioning::new(sigma_data)?,
            unconditional_ok: false,
        })
    }

    /// Mark the model as serving unconditional queries (set after training
    /// with goal dropout, or when restoring such a checkpoint).
    pub fn set_unconditional_support(&mut self, ok: bool) {
        self.unconditional_ok = ok;
    }

    /// Training-path forward over a batch with per-sample noise levels;
    /// returns the node holding the denoised windows `[B, c_o, da]`.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        noisy_actions: &Tensor,
        states: &Tensor,
        goals: &Tensor,
        goal_mask: &[bool],
        sigmas: &[f64],
    ) -> Result<NodeId> {
        let b = *noisy_actions
            .shape()
            .first()
            .ok_or_else(|| CoreError::ShapeMismatch("expected batched actions".into()))?;
        if sigmas.len() != b || goal_mask.len() != b {
            return Err(CoreError::ShapeMismatch(format!(
                "batch {b} with {} sigmas and {} mask entries",
                sigmas.len(),
                goal_mask.len()
            )));
        }
        if let Some(&bad) = sigmas.iter().find(|s| **s <= 0.0) {
            return Err(CoreError::Contract(format!(
                "preconditioning requires sigma > 0, got {bad}"
            )));
        }
        let c_in: Vec<f64> = sigmas.iter().map(|&s| self.precond.c_in(s)).collect();
        let c_skip: Vec<f64> = sigmas.iter().map(|&s| self.precond.c_skip(s)).collect();
        let c_out: Vec<f64> = sigmas.iter().map(|&s| self.precond.c_out(s)).collect();
        let c_noise: Vec<f64> = sigmas.iter().map(|&s| self.precond.c_noise(s)).collect();

        let a = tape.leaf(noisy_actions.clone());
        let s = tape.leaf(states.clone());
        let g = tape.leaf(goals.clone());
        let cn = tape.leaf(Tensor::new(vec![b, 1], c_noise)?);
        let scaled = tape.scale_rows(a, c_in)?;
        let f = self.net.forward(tape, scaled, s, g, goal_mask, cn)?;
        let skip = tape.scale_rows(a, c_skip)?;
        let out = tape.scale_rows(f, c_out)?;
        tape.add(skip, out)
    }

    fn eval_batch(
        &self,
        actions: &Tensor,
        states: &Tensor,
        goals: Option<&Tensor>,
        sigma: f64,
    ) -> Result<Tensor> {
        if sigma <= 0.0 {
            return Err(CoreError::Contract(format!(
                "preconditioned denoiser requires sigma > 0, got {sigma}"
            )));
        }
        let b = actions.shape()[0];
        let (mask, goals_tensor): (Vec<bool>, Tensor) = match goals {
            Some(g) => (vec![false; b], g.clone()),
            None => {
                if !self.unconditional_ok {
                    return Err(CoreError::Contract(
                        "unconditional evaluation requested from a model without goal dropout"
                            .into(),
                    ));
                }
                (
                    vec![true; b],
                    Tensor::zeros(&[b, self.net.goal_window(), self.net.state_dim()]),
                )
            }
        };
        let mut tape = Tape::inference();
        let node = self.forward_train(
            &mut tape,
            actions,
            states,
            &goals_tensor,
            &mask,
            &vec![sigma; b],
        )?;
        Ok(tape.value(node).clone())
    }
}

impl<N: ConditionalNet> Denoiser for NetDenoiser<N> {
    fn denoise(
        &self,
        actions: &Tensor,
        states: &Tensor,
        goal: Option<&Tensor>,
        sigma: f64,
    ) -> Result<Tensor> {
        let mut a_shape = vec![1];
        a_shape.extend_from_slice(actions.shape());
        let mut s_shape = vec![1];
        s_shape.extend_from_slice(states.shape());
        let a = actions.reshape(&a_shape)?;
        let s = states.reshape(&s_shape)?;
        let g = match goal {
            Some(g) => {
                let mut g_shape = vec![1];
                g_shape.extend_from_slice(g.shape());
                Some(g.reshape(&g_shape)?)
            }
            None => None,
        };
        let out = self.eval_batch(&a, &s, g.as_ref(), sigma)?;
        out.index_leading(0)
    }

    fn denoise_batch(
        &self,
        actions: &Tensor,
        states: &Tensor,
        goals: Option<&Tensor>,
        sigma: f64,
    ) -> Result<Tensor> {
        self.eval_batch(actions, states, goals, sigma)
    }

    fn supports_unconditional(&self) -> bool {
        self.unconditional_ok
    }
}
