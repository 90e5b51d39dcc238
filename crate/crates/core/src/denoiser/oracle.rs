//! Analytic denoisers for isotropic Gaussians and Gaussian mixtures. They
//! realize the exact posterior mean `E[a_0 | a_sigma]`, so their implied
//! score is the exact score of the smoothed distribution — the reference
//! the samplers and trained models are checked against.

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::Denoiser;

/// Isotropic Gaussian `N(mean, std^2 I)`; ignores state and goal.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, std: f64) -> Result<Self> {
        if std <= 0.0 || mean.is_empty() {
            return Err(CoreError::Config("gaussian oracle needs std > 0".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Exact score of the sigma-smoothed density: `(mean - a) / (std^2 + sigma^2)`.
    pub fn score(&self, actions: &Tensor, sigma: f64) -> Result<Tensor> {
        let d = self.dim();
        check_last_dim(actions, d)?;
        let v = self.std * self.std + sigma * sigma;
        let data = actions
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| (self.mean[i % d] - a) / v)
            .collect();
        Tensor::new(actions.shape().to_vec(), data)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.mean
            .iter()
            .map(|&m| m + self.std * rng.normal())
            .collect()
    }
}

impl Denoiser for GaussianOracle {
    fn denoise(
        &self,
        actions: &Tensor,
        _states: &Tensor,
        _goal: Option<&Tensor>,
        sigma: f64,
    ) -> Result<Tensor> {
        let d = self.dim();
        check_last_dim(actions, d)?;
        let s2 = self.std * self.std;
        let v = s2 + sigma * sigma;
        let data = actions
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| (sigma * sigma * self.mean[i % d] + s2 * a) / v)
            .collect();
        Tensor::new(actions.shape().to_vec(), data)
    }

    fn denoise_batch(
        &self,
        actions: &Tensor,
        states: &Tensor,
        goals: Option<&Tensor>,
        sigma: f64,
    ) -> Result<Tensor> {
        self.denoise(actions, states, goals, sigma)
    }

    fn supports_unconditional(&self) -> bool {
        true
    }
}

/// Mixture of isotropic Gaussians. Rows along the last dim are treated as
/// independent draws from the mixture.
#[derive(Debug, Clone)]
pub struct GmmOracle {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

impl GmmOracle {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
            return Err(CoreError::Config("gmm oracle: component count mismatch".into()));
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(CoreError::Config("gmm weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!(
                "gmm weights must sum to 1, got {total}"
            )));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(CoreError::Config("gmm means must share a dimension".into()));
        }
        if stds.iter().any(|&s| s <= 0.0) {
            return Err(CoreError::Config("gmm stds must be positive".into()));
        }
        Ok(Self {
            weights,
            means,
            stds,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn log_responsibilities(&self, row: &[f64], sigma: f64) -> Vec<f64> {
        let d = self.dim() as f64;
        let mut logs: Vec<f64> = (0..self.weights.len())
            .map(|k| {
                let v = self.stds[k] * self.stds[k] + sigma * sigma;
                let sq: f64 = row
                    .iter()
                    .zip(&self.means[k])
                    .map(|(&x, &m)| (x - m) * (x - m))
                    .sum();
                self.weights[k].ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln()
                    - sq / (2.0 * v)
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let log_norm = max + sum.ln();
        for l in &mut logs {
            *l -= log_norm;
        }
        logs
    }

    /// Log-density of the sigma-smoothed mixture at one point.
    pub fn log_density(&self, row: &[f64], sigma: f64) -> f64 {
        let d = self.dim() as f64;
        let logs: Vec<f64> = (0..self.weights.len())
            .map(|k| {
                let v = self.stds[k] * self.stds[k] + sigma * sigma;
                let sq: f64 = row
                    .iter()
                    .zip(&self.means[k])
                    .map(|(&x, &m)| (x - m) * (x - m))
                    .sum();
                self.weights[k].ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln()
                    - sq / (2.0 * v)
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    /// Exact smoothed score, responsibility-weighted over components.
    pub fn score(&self, actions: &Tensor, sigma: f64) -> Result<Tensor> {
        let d = self.dim();
        check_last_dim(actions, d)?;
        let mut data = vec![0.0; actions.numel()];
        for (r, row) in actions.data().chunks(d).enumerate() {
            let logs = self.log_responsibilities(row, sigma);
            for k in 0..self.weights.len() {
                let resp = logs[k].exp();
                let v = self.stds[k] * self.stds[k] + sigma * sigma;
                for j in 0..d {
                    data[r * d + j] += resp * (self.means[k][j] - row[j]) / v;
                }
            }
        }
        Tensor::new(actions.shape().to_vec(), data)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut pick = self.weights.len() - 1;
        for (k, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        self.means[pick]
            .iter()
            .map(|&m| m + self.stds[pick] * rng.normal())
            .collect()
    }
}

impl Denoiser for GmmOracle {
    fn denoise(
        &self,
        actions: &Tensor,
        _states: &Tensor,
        _goal: Option<&Tensor>,
        sigma: f64,
    ) -> Result<Tensor> {
        let d = self.dim();
        check_last_dim(actions, d)?;
        let mut data = vec![0.0; actions.numel()];
        for (r, row) in actions.data().chunks(d).enumerate() {
            let logs = self.log_responsibilities(row, sigma);
            for k in 0..self.weights.len() {
                let resp = logs[k].exp();
                let s2 = self.stds[k] * self.stds[k];
                let v = s2 + sigma * sigma;
                for j in 0..d {
                    data[r * d + j] += resp * (sigma * sigma * self.means[k][j] + s2 * row[j]) / v;
                }
            }
        }
        Tensor::new(actions.shape().to_vec(), data)
    }

    fn denoise_batch(
        &self,
        actions: &Tensor,
        states: &Tensor,
        goals: Option<&Tensor>,
        sigma: f64,
    ) -> Result<Tensor> {
        self.denoise(actions, states, goals, sigma)
    }

    fn supports_unconditional(&self) -> bool {
        true
    }
}

/// Dispatches on goal presence: a conditional denoiser paired with an
/// unconditional one. Useful for exact guidance checks.
#[derive(Debug, Clone)]
pub struct CondUncondPair<C, U> {
    pub cond: C,
    pub uncond: U,
}

impl<C: Denoiser, U: Denoiser> Denoiser for CondUncondPair<C, U> {
    fn denoise(
        &self,
        actions: &Tensor,
        states: &Tensor,
        goal: Option<&Tensor>,
        sigma: f64,
    ) -> Result<Tensor> {
        match goal {
            Some(_) => self.cond.denoise(actions, states, goal, sigma),
            None => self.uncond.denoise(actions, states, None, sigma),
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
            Some(_) => self.cond.denoise_batch(actions, states, goals, sigma),
            None => self.uncond.denoise_batch(actions, states, None, sigma),
        }
    }

    fn supports_unconditional(&self) -> bool {
        true
    }
}

fn check_last_dim(t: &Tensor, d: usize) -> Result<()> {
    if t.shape().last() != Some(&d) && !(t.rank() == 1 && t.numel() == d) {
        return Err(CoreError::ShapeMismatch(format!(
            "oracle of dim {d} applied to shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}
