//! Classifier-free guidance: an affine combination of the conditional and
//! unconditional denoiser outputs. By the score identity the output-space
//! combination and the score-space combination agree exactly at fixed
//! `(a, sigma)`.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

use super::Denoiser;

/// `lambda * D(a,s,g,sigma) + (1 - lambda) * D(a,s,_,sigma)`.
///
/// `lambda = 1` short-circuits to the conditional evaluation and `lambda = 0`
/// to the unconditional one, so those cases are bitwise identical to calling
/// the underlying model directly.
pub fn cfg_denoise(
    model: &dyn Denoiser,
    actions: &Tensor,
    states: &Tensor,
    goal: &Tensor,
    sigma: f64,
    lambda: f64,
) -> Result<Tensor> {
    if lambda == 1.0 {
        return model.denoise(actions, states, Some(goal), sigma);
    }
    if !model.supports_unconditional() {
        return Err(CoreError::Contract(
            "guidance requires a model trained with goal dropout".into(),
        ));
    }
    if lambda == 0.0 {
        return model.denoise(actions, states, None, sigma);
    }
    let cond = model.denoise(actions, states, Some(goal), sigma)?;
    let uncond = model.denoise(actions, states, None, sigma)?;
    combine(&cond, &uncond, lambda)
}

fn combine(cond: &Tensor, uncond: &Tensor, lambda: f64) -> Result<Tensor> {
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&c, &u)| lambda * c + (1.0 - lambda) * u)
        .collect();
    Tensor::new(cond.shape().to_vec(), data)
}

/// A denoiser view that routes every goal-conditioned call through
/// [`cfg_denoise`] with a fixed guidance factor.
pub struct CfgDenoiser<'a> {
    model: &'a dyn Denoiser,
    pub lambda: f64,
}

impl<'a> CfgDenoiser<'a> {
    pub fn new(model: &'a dyn Denoiser, lambda: f64) -> Result<Self> {
        if lambda != 1.0 && !model.supports_unconditional() {
            return Err(CoreError::Contract(
                "guidance requires a model trained with goal dropout".into(),
            ));
        }
        Ok(Self { model, lambda })
    }
}

impl Denoiser for CfgDenoiser<'_> {
    fn denoise(
        &self,
        actions: &Tensor,
        states: &Tensor,
        goal: Option<&Tensor>,
        sigma: f64,
    ) -> Result<Tensor> {
        match goal {
            Some(g) => cfg_denoise(self.model, actions, states, g, sigma, self.lambda),
            None => self.model.denoise(actions, states, None, sigma),
        }
    }

    fn denoise_batch(
        &self,
        actions: &Tensor,
        states: &Tensor,
        goals: Option<&Tensor>,
        sigma: f64,
    ) -> Result<Tensor> {
        match goals {
            Some(g) => {
                if self.lambda == 1.0 {
                    return self.model.denoise_batch(actions, states, Some(g), sigma);
                }
                if self.lambda == 0.0 {
                    return self.model.denoise_batch(actions, states, None, sigma);
                }
                let cond = self.model.denoise_batch(actions, states, Some(g), sigma)?;
                let uncond = self.model.denoise_batch(actions, states, None, sigma)?;
                combine(&cond, &uncond, self.lambda)
            }
            None => self.model.denoise_batch(actions, states, None, sigma),
        }
    }

    fn supports_unconditional(&self) -> bool {
        self.model.supports_unconditional()
    }
}
