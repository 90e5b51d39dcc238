//! Solver zoo over the probability-flow ODE and its stochastic variants.
//!
//! All families walk the schedule's levels `sigma_0 > .. > sigma_{N-1}` and
//! finish with the implicit terminal step to `sigma = 0`, which every family
//! takes as a full denoise `D(a, sigma_{N-1})`. Under the identity noise map
//! `sigma(t) = t` the Euler and DDIM updates coincide algebraically; the
//! exponential-integrator families step in `lambda = -ln sigma`.

use crate::denoiser::{CfgDenoiser, Denoiser};
use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::schedules::{ancestral_split, NoiseSchedule};
use crate::tensor::Tensor;

/// Solver family. Ancestral variants re-inject noise via the ancestral
/// split; the rest are deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerFamily {
    Euler,
    EulerAncestral,
    Heun,
    Ddim,
    Dpm2,
    Dpm2Ancestral,
    DpmPp2s,
    DpmPp2m,
}

impl SamplerFamily {
    pub const ALL: [SamplerFamily; 8] = [
        SamplerFamily::Euler,
        SamplerFamily::EulerAncestral,
        SamplerFamily::Heun,
        SamplerFamily::Ddim,
        SamplerFamily::Dpm2,
        SamplerFamily::Dpm2Ancestral,
        SamplerFamily::DpmPp2s,
        SamplerFamily::DpmPp2m,
    ];

    /// The deterministic families, in ablation-grid order.
    pub const DETERMINISTIC: [SamplerFamily; 6] = [
        SamplerFamily::Euler,
        SamplerFamily::Heun,
        SamplerFamily::Ddim,
        SamplerFamily::Dpm2,
        SamplerFamily::DpmPp2s,
        SamplerFamily::DpmPp2m,
    ];

    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            SamplerFamily::EulerAncestral | SamplerFamily::Dpm2Ancestral
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerFamily::Euler => "euler",
            SamplerFamily::EulerAncestral => "euler-ancestral",
            SamplerFamily::Heun => "heun",
            SamplerFamily::Ddim => "ddim",
            SamplerFamily::Dpm2 => "dpm-2",
            SamplerFamily::Dpm2Ancestral => "dpm-2-ancestral",
            SamplerFamily::DpmPp2s => "dpm++2s",
            SamplerFamily::DpmPp2m => "dpm++2m",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SamplerFamily::Euler),
            "euler-ancestral" => Ok(SamplerFamily::EulerAncestral),
            "heun" => Ok(SamplerFamily::Heun),
            "ddim" | "dpm-1" => Ok(SamplerFamily::Ddim),
            "dpm-2" => Ok(SamplerFamily::Dpm2),
            "dpm-2-ancestral" => Ok(SamplerFamily::Dpm2Ancestral),
            "dpm++2s" => Ok(SamplerFamily::DpmPp2s),
            "dpm++2m" => Ok(SamplerFamily::DpmPp2m),
            other => Err(CoreError::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Everything needed to run inference: family, schedule, stochasticity,
/// extra refinement steps and the guidance factor.
#[derive(Debug, Clone)]
pub struct SamplerSpec {
    pub family: SamplerFamily,
    pub schedule: NoiseSchedule,
    /// Stochastic share of each ancestral step, in `[0, 1]`; ignored by
    /// deterministic families.
    pub eta: f64,
    /// Extra refinement steps at the lowest noise level after the main loop.
    pub extra_steps: usize,
    /// Guidance factor; any value other than 1 routes denoiser calls through
    /// the conditional/unconditional combination.
    pub guidance: f64,
}

impl SamplerSpec {
    pub fn new(family: SamplerFamily, schedule: NoiseSchedule) -> Self {
        Self {
            family,
            schedule,
            eta: 1.0,
            extra_steps: 0,
            guidance: 1.0,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_extra_steps(mut self, x: usize) -> Self {
        self.extra_steps = x;
        self
    }

    pub fn with_guidance(mut self, lambda: f64) -> Self {
        self.guidance = lambda;
        self
    }
}

/// One deterministic Euler step: `a + (sigma_next - sigma) * (a - D) / sigma`.
pub fn euler_step(a: &Tensor, sigma: f64, sigma_next: f64, denoised: &Tensor) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(CoreError::Contract(format!(
            "euler step requires sigma > 0, got {sigma}"
        )));
    }
    if sigma_next == 0.0 {
        return Ok(denoised.clone());
    }
    let d = a.sub(denoised)?.scale(1.0 / sigma);
    a.add_scaled(&d, sigma_next - sigma)
}

/// One exponential-integrator (DPM-1) step in denoiser-output form:
/// `(sigma_next / sigma) a + (1 - sigma_next / sigma) D`. Coincides with the
/// Euler step under the identity noise map.
pub fn ddim_step(a: &Tensor, sigma: f64, sigma_next: f64, denoised: &Tensor) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(CoreError::Contract(format!(
            "ddim step requires sigma > 0, got {sigma}"
        )));
    }
    let ratio = sigma_next / sigma;
    a.scale(ratio).add_scaled(denoised, 1.0 - ratio)
}

struct Evaluator<'a> {
    model: &'a dyn Denoiser,
    states: &'a Tensor,
    goals: Option<&'a Tensor>,
}

impl Evaluator<'_> {
    fn eval(&self, a: &Tensor, sigma: f64) -> Result<Tensor> {
        self.model.denoise_batch(a, self.states, self.goals, sigma)
    }
}

fn heun_step(
    ev: &Evaluator,
    a: &Tensor,
    sigma: f64,
    sigma_next: f64,
    denoised: &Tensor,
) -> Result<Tensor> {
    let d1 = a.sub(denoised)?.scale(1.0 / sigma);
    let predicted = a.add_scaled(&d1, sigma_next - sigma)?;
    let denoised2 = ev.eval(&predicted, sigma_next)?;
    let d2 = predicted.sub(&denoised2)?.scale(1.0 / sigma_next);
    let slope = d1.add(&d2)?.scale(0.5);
    a.add_scaled(&slope, sigma_next - sigma)
}

/// Midpoint step in log-sigma space toward `sigma_target`.
fn dpm2_core(
    ev: &Evaluator,
    a: &Tensor,
    sigma: f64,
    sigma_target: f64,
    denoised: &Tensor,
) -> Result<Tensor> {
    let d1 = a.sub(denoised)?.scale(1.0 / sigma);
    let sigma_mid = (0.5 * (sigma.ln() + sigma_target.ln())).exp();
    let a_mid = a.add_scaled(&d1, sigma_mid - sigma)?;
    let denoised2 = ev.eval(&a_mid, sigma_mid)?;
    let d2 = a_mid.sub(&denoised2)?.scale(1.0 / sigma_mid);
    a.add_scaled(&d2, sigma_target - sigma)
}

/// Single-step second-order update with one evaluation at the
/// lambda-midpoint, in denoiser-output parameterization.
fn dpmpp_2s_step(
    ev: &Evaluator,
    a: &Tensor,
    sigma: f64,
    sigma_next: f64,
    denoised: &Tensor,
) -> Result<Tensor> {
    let sigma_mid = (sigma * sigma_next).sqrt();
    let half = ddim_step(a, sigma, sigma_mid, denoised)?;
    let denoised2 = ev.eval(&half, sigma_mid)?;
    ddim_step(a, sigma, sigma_next, &denoised2)
}

/// Two-step linear multistep re-using the previous denoiser output; the
/// first step (no history yet) falls back to the DDIM update.
fn dpmpp_2m_step(
    a: &Tensor,
    sigma: f64,
    sigma_next: f64,
    denoised: &Tensor,
    previous: Option<&(f64, Tensor)>,
) -> Result<Tensor> {
    match previous {
        None => ddim_step(a, sigma, sigma_next, denoised),
        Some((sigma_prev, denoised_prev)) => {
            let h = sigma.ln() - sigma_next.ln();
            let h_last = sigma_prev.ln() - sigma.ln();
            let r = h_last / h;
            let c = 1.0 / (2.0 * r);
            let combined = denoised.scale(1.0 + c).add_scaled(denoised_prev, -c)?;
            ddim_step(a, sigma, sigma_next, &combined)
        }
    }
}

fn noise_like(a: &Tensor, rngs: &mut [RngStream]) -> Result<Tensor> {
    let b = a.shape()[0];
    if rngs.len() != b {
        return Err(CoreError::Contract(format!(
            "{} rng streams for batch {b}",
            rngs.len()
        )));
    }
    let block = a.numel() / b;
    let mut data = Vec::with_capacity(a.numel());
    for rng in rngs.iter_mut() {
        data.extend(rng.normal_vec(block));
    }
    Tensor::new(a.shape().to_vec(), data)
}

/// Prior draws `a_0 ~ N(0, sigma_max^2 I)`, one window per stream.
pub fn draw_prior(
    window_shape: &[usize],
    sigma_max: f64,
    rngs: &mut [RngStream],
) -> Result<Tensor> {
    let block: usize = window_shape.iter().product();
    let mut data = Vec::with_capacity(block * rngs.len());
    for rng in rngs.iter_mut() {
        data.extend(rng.normal_vec(block).into_iter().map(|z| sigma_max * z));
    }
    let mut shape = vec![rngs.len()];
    shape.extend_from_slice(window_shape);
    Tensor::new(shape, data)
}

/// Walk the schedule from `a0` at `sigma_max`. With `include_terminal` the
/// implicit final step to `sigma = 0` (a full denoise) is taken; without it
/// integration stops at `sigma_min`, which is what convergence measurements
/// need. Tensors carry a leading batch dim matching `rngs`.
pub fn integrate_batch(
    model: &dyn Denoiser,
    states: Option<&Tensor>,
    goals: Option<&Tensor>,
    a0: Tensor,
    spec: &SamplerSpec,
    rngs: &mut [RngStream],
    include_terminal: bool,
) -> Result<Tensor> {
    let cfg_model;
    let model_eff: &dyn Denoiser = if spec.guidance != 1.0 {
        cfg_model = CfgDenoiser::new(model, spec.guidance)?;
        &cfg_model
    } else {
        model
    };
    let b = *a0
        .shape()
        .first()
        .ok_or_else(|| CoreError::ShapeMismatch("integrate_batch needs a batch dim".into()))?;
    let default_states = Tensor::zeros(&[b, 1]);
    let ev = Evaluator {
        model: model_eff,
        states: states.unwrap_or(&default_states),
        goals,
    };

    let levels = spec.schedule.levels();
    let steps = if include_terminal {
        levels.len()
    } else {
        levels.len() - 1
    };
    let mut a = a0;
    let mut previous: Option<(f64, Tensor)> = None;
    for i in 0..steps {
        let sigma = levels[i];
        let sigma_next = if i + 1 < levels.len() {
            levels[i + 1]
        } else {
            0.0
        };
        let denoised = ev.eval(&a, sigma)?;
        if sigma_next == 0.0 {
            // Terminal step: every family returns the denoiser output.
            a = denoised;
            break;
        }
        a = match spec.family {
            SamplerFamily::Euler => euler_step(&a, sigma, sigma_next, &denoised)?,
            SamplerFamily::Ddim => ddim_step(&a, sigma, sigma_next, &denoised)?,
            SamplerFamily::Heun => heun_step(&ev, &a, sigma, sigma_next, &denoised)?,
            SamplerFamily::Dpm2 => dpm2_core(&ev, &a, sigma, sigma_next, &denoised)?,
            SamplerFamily::DpmPp2s => dpmpp_2s_step(&ev, &a, sigma, sigma_next, &denoised)?,
            SamplerFamily::DpmPp2m => {
                dpmpp_2m_step(&a, sigma, sigma_next, &denoised, previous.as_ref())?
            }
            SamplerFamily::EulerAncestral => {
                let (down, up) = ancestral_split(sigma, sigma_next, spec.eta)?;
                let mut next = euler_step(&a, sigma, down, &denoised)?;
                if up > 0.0 {
                    let z = noise_like(&next, rngs)?;
                    next = next.add_scaled(&z, up)?;
                }
                next
            }
            SamplerFamily::Dpm2Ancestral => {
                let (down, up) = ancestral_split(sigma, sigma_next, spec.eta)?;
                let mut next = dpm2_core(&ev, &a, sigma, down, &denoised)?;
                if up > 0.0 {
                    let z = noise_like(&next, rngs)?;
                    next = next.add_scaled(&z, up)?;
                }
                next
            }
        };
        previous = Some((sigma, denoised));
    }
    Ok(a)
}

/// Extra refinement at the lowest noise level: stochastic mode re-noises to
/// `sigma_low` and denoises; deterministic mode iterates the denoiser.
pub fn extra_steps_refine_batch(
    model: &dyn Denoiser,
    states: Option<&Tensor>,
    goals: Option<&Tensor>,
    mut a: Tensor,
    sigma_low: f64,
    extra_steps: usize,
    stochastic: bool,
    rngs: &mut [RngStream],
) -> Result<Tensor> {
    let b = a.shape()[0];
    let default_states = Tensor::zeros(&[b, 1]);
    let ev = Evaluator {
        model,
        states: states.unwrap_or(&default_states),
        goals,
    };
    for _ in 0..extra_steps {
        if stochastic {
            let z = noise_like(&a, rngs)?;
            a = a.add_scaled(&z, sigma_low)?;
        }
        a = ev.eval(&a, sigma_low)?;
    }
    Ok(a)
}

/// Full inference for a batch of windows: prior draw, solver loop, optional
/// extra refinement. One RNG stream per batch entry; the result is
/// independent of how entries are grouped into batches.
pub fn sample_action_batch(
    model: &dyn Denoiser,
    states: Option<&Tensor>,
    goals: Option<&Tensor>,
    window_shape: &[usize],
    spec: &SamplerSpec,
    rngs: &mut [RngStream],
) -> Result<Tensor> {
    let a0 = draw_prior(window_shape, spec.schedule.sigma_max(), rngs)?;
    let a = integrate_batch(model, states, goals, a0, spec, rngs, true)?;
    if spec.extra_steps == 0 {
        return Ok(a);
    }
    let cfg_model;
    let model_eff: &dyn Denoiser = if spec.guidance != 1.0 {
        cfg_model = CfgDenoiser::new(model, spec.guidance)?;
        &cfg_model
    } else {
        model
    };
    extra_steps_refine_batch(
        model_eff,
        states,
        goals,
        a,
        spec.schedule.sigma_min(),
        spec.extra_steps,
        spec.family.is_stochastic(),
        rngs,
    )
}

/// Single-window convenience wrapper around [`sample_action_batch`].
pub fn sample_action(
    model: &dyn Denoiser,
    states: Option<&Tensor>,
    goal: Option<&Tensor>,
    window_shape: &[usize],
    spec: &SamplerSpec,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let states_b = match states {
        Some(s) => {
            let mut shape = vec![1];
            shape.extend_from_slice(s.shape());
            Some(s.reshape(&shape)?)
        }
        None => None,
    };
    let goal_b = match goal {
        Some(g) => {
            let mut shape = vec![1];
            shape.extend_from_slice(g.shape());
            Some(g.reshape(&shape)?)
        }
        None => None,
    };
    let mut rngs = [rng.clone()];
    let out = sample_action_batch(
        model,
        states_b.as_ref(),
        goal_b.as_ref(),
        window_shape,
        spec,
        &mut rngs,
    )?;
    *rng = rngs[0].clone();
    out.index_leading(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::GaussianOracle;
    use crate::schedules::{NoiseSchedule, ScheduleFamily};

    struct ConstantDenoiser(f64);

    impl Denoiser for ConstantDenoiser {
        fn denoise(
            &self,
            a: &Tensor,
            _s: &Tensor,
            _g: Option<&Tensor>,
            _sigma: f64,
        ) -> Result<Tensor> {
            Ok(Tensor::full(a.shape(), self.0))
        }
        fn supports_unconditional(&self) -> bool {
            true
        }
    }

    #[test]
    fn euler_step_cases() {
        let a = Tensor::scalar(1.0);
        let d = Tensor::scalar(0.0);
        // zero-width step
        let out = euler_step(&a, 1.0, 1.0, &d).unwrap();
        assert_eq!(out.item(), 1.0);
        // plug-in
        let out = euler_step(&a, 1.0, 0.5, &d).unwrap();
        assert!((out.item() - 0.5).abs() < 1e-15);
        // full denoise
        let out = euler_step(&a, 1.0, 0.0, &d).unwrap();
        assert_eq!(out.item(), 0.0);
        assert!(euler_step(&a, 0.0, 0.0, &d).is_err());
    }

    #[test]
    fn ddim_step_cases() {
        let a = Tensor::scalar(1.0);
        let d = Tensor::scalar(0.0);
        let out = ddim_step(&a, 1.0, 0.5, &d).unwrap();
        assert!((out.item() - 0.5).abs() < 1e-15);
        // fixed point when D = a
        let out = ddim_step(&a, 1.0, 0.5, &a).unwrap();
        assert!((out.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn euler_and_ddim_agree_under_identity_noise_map() {
        let mut rng = RngStream::from_seed(7);
        for _ in 0..1000 {
            let a = Tensor::scalar(3.0 * rng.normal());
            let d = Tensor::scalar(3.0 * rng.normal());
            let sigma = rng.uniform_range(1e-3, 10.0);
            let sigma_next = sigma * rng.uniform_range(0.0, 0.999);
            let e = euler_step(&a, sigma, sigma_next, &d).unwrap();
            let dd = ddim_step(&a, sigma, sigma_next, &d).unwrap();
            assert!(
                (e.item() - dd.item()).abs() < 1e-12,
                "euler {} vs ddim {}",
                e.item(),
                dd.item()
            );
        }
    }

    #[test]
    fn single_level_schedule_returns_denoiser_output() {
        let model = ConstantDenoiser(0.37);
        let schedule = NoiseSchedule::build(ScheduleFamily::Exponential, 1, 0.005, 1.0, 7.0)
            .unwrap();
        for family in SamplerFamily::ALL {
            let spec = SamplerSpec::new(family, schedule.clone());
            let mut rngs = [RngStream::from_seed(1)];
            let out =
                sample_action_batch(&model, None, None, &[1], &spec, &mut rngs).unwrap();
            assert_eq!(out.data()[0], 0.37, "{family:?}");
        }
    }

    #[test]
    fn constant_denoiser_collapses_all_families_to_ddim_form() {
        let model = ConstantDenoiser(-0.8);
        let schedule = NoiseSchedule::build(ScheduleFamily::Exponential, 6, 0.01, 2.0, 7.0)
            .unwrap();
        let a0 = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        let mut expect = a0.clone();
        {
            // closed form: each step is the convex combination with D.
            let levels = schedule.levels();
            for i in 0..levels.len() - 1 {
                let ratio = levels[i + 1] / levels[i];
                expect = expect
                    .scale(ratio)
                    .add_scaled(&Tensor::full(&[1, 1], -0.8), 1.0 - ratio)
                    .unwrap();
            }
        }
        for family in SamplerFamily::DETERMINISTIC {
            let spec = SamplerSpec::new(family, schedule.clone());
            let mut rngs = [RngStream::from_seed(0)];
            let out = integrate_batch(
                &model,
                None,
                None,
                a0.clone(),
                &spec,
                &mut rngs,
                false,
            )
            .unwrap();
            assert!(
                (out.data()[0] - expect.data()[0]).abs() < 1e-12,
                "{family:?}: {} vs {}",
                out.data()[0],
                expect.data()[0]
            );
        }
    }

    #[test]
    fn eta_zero_collapses_stochastic_to_deterministic_bitwise() {
        let model = GaussianOracle::new(vec![0.4], 1.0).unwrap();
        let schedule = NoiseSchedule::build(ScheduleFamily::Exponential, 8, 0.01, 5.0, 7.0)
            .unwrap();
        let pairs = [
            (SamplerFamily::EulerAncestral, SamplerFamily::Euler),
            (SamplerFamily::Dpm2Ancestral, SamplerFamily::Dpm2),
        ];
        for (stoch, det) in pairs {
            let spec_s = SamplerSpec::new(stoch, schedule.clone()).with_eta(0.0);
            let spec_d = SamplerSpec::new(det, schedule.clone());
            let mut r1 = [RngStream::from_seed(11)];
            let mut r2 = [RngStream::from_seed(11)];
            let a = sample_action_batch(&model, None, None, &[1], &spec_s, &mut r1).unwrap();
            let b = sample_action_batch(&model, None, None, &[1], &spec_d, &mut r2).unwrap();
            assert_eq!(
                a.data()[0].to_bits(),
                b.data()[0].to_bits(),
                "{stoch:?} at eta=0 differs from {det:?}"
            );
        }
    }

    #[test]
    fn dpmpp_2m_first_step_equals_ddim() {
        // On a 2-level schedule with terminal suppressed there is exactly one
        // step, and 2m has no history for it.
        let model = GaussianOracle::new(vec![0.0], 1.0).unwrap();
        let schedule = NoiseSchedule::build(ScheduleFamily::Exponential, 2, 0.1, 1.0, 7.0)
            .unwrap();
        let a0 = Tensor::new(vec![1, 1], vec![0.9]).unwrap();
        let out_2m = integrate_batch(
            &model,
            None,
            None,
            a0.clone(),
            &SamplerSpec::new(SamplerFamily::DpmPp2m, schedule.clone()),
            &mut [RngStream::from_seed(0)],
            false,
        )
        .unwrap();
        let out_ddim = integrate_batch(
            &model,
            None,
            None,
            a0,
            &SamplerSpec::new(SamplerFamily::Ddim, schedule),
            &mut [RngStream::from_seed(0)],
            false,
        )
        .unwrap();
        assert_eq!(out_2m.data()[0].to_bits(), out_ddim.data()[0].to_bits());
    }

    #[test]
    fn terminal_step_adds_no_noise() {
        // sigma_to = 0 forces (0, 0) from the split; the last update of a
        // stochastic sampler is the plain denoise.
        let model = ConstantDenoiser(0.2);
        let schedule = NoiseSchedule::build(ScheduleFamily::Exponential, 2, 0.5, 1.0, 7.0)
            .unwrap();
        let spec = SamplerSpec::new(SamplerFamily::EulerAncestral, schedule).with_eta(1.0);
        let mut r1 = [RngStream::from_seed(3)];
        let mut r2 = [RngStream::from_seed(3)];
        let a = sample_action_batch(&model, None, None, &[1], &spec, &mut r1).unwrap();
        let b = sample_action_batch(&model, None, None, &[1], &spec, &mut r2).unwrap();
        assert_eq!(a.data()[0], 0.2);
        assert_eq!(b.data()[0], 0.2);
    }

    #[test]
    fn prior_moments_match_target() {
        let n = 100_000;
        let sigma0 = 2.5;
        let mut rngs: Vec<RngStream> = (0..n)
            .map(|i| RngStream::from_seed(99).split_index(i as u64))
            .collect();
        let prior = draw_prior(&[1], sigma0, &mut rngs).unwrap();
        let mean = prior.mean();
        let var = prior.data().iter().map(|v| v * v).sum::<f64>() / n as f64 - mean * mean;
        assert!(mean.abs() < 3.0 * sigma0 / (n as f64).sqrt());
        assert!((var.sqrt() - sigma0).abs() < 0.03 * sigma0);
    }

    #[test]
    fn extra_steps_zero_is_identity() {
        let model = GaussianOracle::new(vec![0.0], 1.0).unwrap();
        let a = Tensor::new(vec![1, 1], vec![0.77]).unwrap();
        let out = extra_steps_refine_batch(&model, None, None, a.clone(), 0.005, 0, false, &mut [])
            .unwrap();
        assert_eq!(out.data()[0].to_bits(), a.data()[0].to_bits());
    }

    #[test]
    fn deterministic_refinement_contracts_toward_posterior_fixed_point() {
        let model = GaussianOracle::new(vec![0.5], 1.0).unwrap();
        let sigma_low = 0.3;
        let mut a = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let mut last_delta = f64::INFINITY;
        for _ in 0..10 {
            let next =
                extra_steps_refine_batch(&model, None, None, a.clone(), sigma_low, 1, false, &mut [])
                    .unwrap();
            let delta = (next.data()[0] - a.data()[0]).abs();
            assert!(delta <= last_delta + 1e-15);
            last_delta = delta;
            a = next;
        }
        // moving toward the mean, never past it
        assert!(a.data()[0] > 0.5 && a.data()[0] < 2.0);
    }

    #[test]
    fn low_noise_refinement_barely_moves_samples() {
        let model = GaussianOracle::new(vec![0.0], 1.0).unwrap();
        let schedule = NoiseSchedule::build(ScheduleFamily::Exponential, 10, 0.005, 10.0, 7.0)
            .unwrap();
        let spec = SamplerSpec::new(SamplerFamily::Ddim, schedule.clone());
        let mut rngs = [RngStream::from_seed(4)];
        let base = sample_action_batch(&model, None, None, &[1], &spec, &mut rngs).unwrap();
        let refined = extra_steps_refine_batch(
            &model,
            None,
            None,
            base.clone(),
            schedule.sigma_min(),
            8,
            false,
            &mut [],
        )
        .unwrap();
        assert!((refined.data()[0] - base.data()[0]).abs() < 1e-2);
    }

    #[test]
    fn guidance_on_plain_model_is_rejected() {
        struct CondOnly;
        impl Denoiser for CondOnly {
            fn denoise(
                &self,
                a: &Tensor,
                _s: &Tensor,
                _g: Option<&Tensor>,
                _sigma: f64,
            ) -> Result<Tensor> {
                Ok(a.clone())
            }
        }
        let schedule = NoiseSchedule::build(ScheduleFamily::Exponential, 3, 0.005, 1.0, 7.0)
            .unwrap();
        let spec = SamplerSpec::new(SamplerFamily::Ddim, schedule).with_guidance(1.25);
        let mut rngs = [RngStream::from_seed(0)];
        assert!(sample_action_batch(&CondOnly, None, None, &[1], &spec, &mut rngs).is_err());
    }
}
