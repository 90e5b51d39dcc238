//! Desk-scale goal-conditioned environment: a point agent pushed around a
//! `[-1, 1]^2` arena toward one of two targets, a scripted controller that
//! generates multimodal play data, and the rollout harness that scores
//! policies by `result` (reached the conditioned goal) and `reward`
//! (reached any goal).

use rayon::prelude::*;

use crate::denoiser::Denoiser;
use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::samplers::{sample_action_batch, SamplerSpec};
use crate::tensor::Tensor;
use crate::training::{Normalizer, Trajectory};

pub const ARENA_MIN: f64 = -1.0;
pub const ARENA_MAX: f64 = 1.0;

/// Deterministic point-pushing dynamics `x' = clamp(x + a * step_scale)`
/// with per-dimension action clamp `|a| <= 1`.
#[derive(Debug, Clone)]
pub struct PlanarPushEnv {
    pub targets: [[f64; 2]; 2],
    pub step_scale: f64,
    pub horizon: usize,
    pub success_radius: f64,
}

impl Default for PlanarPushEnv {
    fn default() -> Self {
        Self {
            targets: [[-0.6, 0.6], [0.6, 0.6]],
            step_scale: 0.1,
            horizon: 64,
            success_radius: 0.1,
        }
    }
}

impl PlanarPushEnv {
    pub fn step(&self, pos: [f64; 2], action: [f64; 2]) -> [f64; 2] {
        let mut next = [0.0; 2];
        for k in 0..2 {
            let a = action[k].clamp(-1.0, 1.0);
            next[k] = (pos[k] + a * self.step_scale).clamp(ARENA_MIN, ARENA_MAX);
        }
        next
    }

    pub fn near(&self, pos: [f64; 2], target: [f64; 2]) -> bool {
        let dx = pos[0] - target[0];
        let dy = pos[1] - target[1];
        (dx * dx + dy * dy).sqrt() <= self.success_radius
    }
}

/// Proportional controller that picks a target by coin flip and, once
/// there, may continue to the other target.
#[derive(Debug, Clone)]
pub struct ScriptedController {
    pub gain: f64,
    pub noise_std: f64,
    /// Probability of visiting the second target after reaching the first.
    pub second_target_prob: f64,
}

impl Default for ScriptedController {
    fn default() -> Self {
        Self {
            gain: 1.0,
            noise_std: 0.05,
            second_target_prob: 0.5,
        }
    }
}

impl ScriptedController {
    pub fn action(&self, pos: [f64; 2], target: [f64; 2], rng: &mut RngStream) -> [f64; 2] {
        let mut a = [0.0; 2];
        for k in 0..2 {
            let raw = self.gain * (target[k] - pos[k]) + self.noise_std * rng.normal();
            a[k] = raw.clamp(-1.0, 1.0);
        }
        a
    }
}

/// Roll the scripted controller for `n_traj` episodes of full horizon.
/// Each trajectory heads for a coin-flipped target and may continue to the
/// other one, so the dataset is multimodal from the start state on.
pub fn generate_play_data(
    env: &PlanarPushEnv,
    controller: &ScriptedController,
    n_traj: usize,
    rng: &RngStream,
) -> Result<Vec<Trajectory>> {
    if n_traj == 0 {
        return Err(CoreError::Contract("need at least one trajectory".into()));
    }
    let mut out = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let mut r = rng.split_index(i as u64);
        let mut pos = [r.uniform_range(-0.1, 0.1), r.uniform_range(-0.1, 0.1)];
        let mut target_idx = usize::from(r.bernoulli(0.5));
        let mut switched = false;
        let mut states = Vec::with_capacity(env.horizon);
        let mut actions = Vec::with_capacity(env.horizon);
        for _ in 0..env.horizon {
            if !switched && env.near(pos, env.targets[target_idx]) {
                if r.bernoulli(controller.second_target_prob) {
                    target_idx = 1 - target_idx;
                }
                switched = true;
            }
            let a = controller.action(pos, env.targets[target_idx], &mut r);
            states.push(pos.to_vec());
            actions.push(a.to_vec());
            pos = env.step(pos, a);
        }
        out.push(Trajectory { states, actions });
    }
    Ok(out)
}

/// Everything a rollout needs to turn observations into actions.
pub struct PolicyContext<'a> {
    pub model: &'a dyn Denoiser,
    pub normalizer: &'a Normalizer,
    pub obs_window: usize,
    pub goal_window: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RolloutOutcome {
    /// Reached the conditioned target at some step.
    pub result: bool,
    /// Reached any target at some step.
    pub reward: bool,
    pub reached: [bool; 2],
}

/// One evaluation row; `result <= reward` always holds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub seed: u64,
    pub rollout: usize,
    pub goal_target: usize,
    pub result: bool,
    pub reward: bool,
    pub reached: [bool; 2],
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn result_rate_by_seed(&self, seeds: &[u64]) -> Vec<f64> {
        self.rate_by_seed(seeds, |r| r.result)
    }

    pub fn reward_rate_by_seed(&self, seeds: &[u64]) -> Vec<f64> {
        self.rate_by_seed(seeds, |r| r.reward)
    }

    fn rate_by_seed(&self, seeds: &[u64], flag: impl Fn(&EvalRow) -> bool) -> Vec<f64> {
        seeds
            .iter()
            .map(|&s| {
                let rows: Vec<_> = self.rows.iter().filter(|r| r.seed == s).collect();
                if rows.is_empty() {
                    0.0
                } else {
                    rows.iter().filter(|r| flag(r)).count() as f64 / rows.len() as f64
                }
            })
            .collect()
    }

    /// Fraction of all rollouts that touched each target.
    pub fn reached_fractions(&self) -> [f64; 2] {
        let n = self.rows.len().max(1) as f64;
        let a = self.rows.iter().filter(|r| r.reached[0]).count() as f64 / n;
        let b = self.rows.iter().filter(|r| r.reached[1]).count() as f64 / n;
        [a, b]
    }
}

/// Run a batch of independent rollouts in lockstep. Rollout `i` draws all
/// of its randomness from streams derived from `root.split_index(i)`, so
/// results do not depend on how rollouts are grouped into batches.
pub fn rollout_policy_batch(
    env: &PlanarPushEnv,
    policy: &PolicyContext,
    spec: &SamplerSpec,
    goal_targets: &[usize],
    root: &RngStream,
) -> Result<Vec<RolloutOutcome>> {
    let n = goal_targets.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if goal_targets.iter().any(|&g| g > 1) {
        return Err(CoreError::Contract("goal target index must be 0 or 1".into()));
    }
    let c_o = policy.obs_window;
    let c_g = policy.goal_window;

    let mut positions: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let mut r = root.split_index(i as u64).split("start");
            [r.uniform_range(-0.1, 0.1), r.uniform_range(-0.1, 0.1)]
        })
        .collect();
    let mut histories: Vec<Vec<[f64; 2]>> = positions.iter().map(|p| vec![*p]).collect();
    let mut outcomes = vec![RolloutOutcome::default(); n];

    // goals are fixed target positions, normalized like states
    let mut goal_data = Vec::with_capacity(n * c_g * 2);
    for &g in goal_targets {
        let norm = policy.normalizer.norm_state(&env.targets[g]);
        for _ in 0..c_g {
            goal_data.extend_from_slice(&norm);
        }
    }
    let goals = Tensor::new(vec![n, c_g, 2], goal_data)?;

    for t in 0..env.horizon {
        let mut state_data = Vec::with_capacity(n * c_o * 2);
        for history in &histories {
            for j in 0..c_o {
                // repeat-pad the window at episode start
                let idx = (history.len() as i64 - c_o as i64 + j as i64).max(0) as usize;
                state_data.extend(policy.normalizer.norm_state(&history[idx]));
            }
        }
        let states = Tensor::new(vec![n, c_o, 2], state_data)?;
        let mut rngs: Vec<RngStream> = (0..n)
            .map(|i| root.split_index(i as u64).split("act").split_index(t as u64))
            .collect();
        let actions = sample_action_batch(
            policy.model,
            Some(&states),
            Some(&goals),
            &[c_o, 2],
            spec,
            &mut rngs,
        )?;
        let data = actions.data();
        for i in 0..n {
            // execute only the window's final action
            let base = (i * c_o + (c_o - 1)) * 2;
            let denormed = policy.normalizer.denorm_action(&data[base..base + 2]);
            let next = env.step(positions[i], [denormed[0], denormed[1]]);
            positions[i] = next;
            histories[i].push(next);
            for k in 0..2 {
                if env.near(next, env.targets[k]) {
                    outcomes[i].reached[k] = true;
                }
            }
        }
    }
    for (outcome, &g) in outcomes.iter_mut().zip(goal_targets) {
        outcome.result = outcome.reached[g];
        outcome.reward = outcome.reached[0] || outcome.reached[1];
    }
    Ok(outcomes)
}

/// Full seeds-by-rollouts evaluation grid. Seeds run in parallel; every
/// rollout's randomness is keyed by (seed, rollout index), so the report is
/// deterministic regardless of thread count.
pub fn evaluate_policy(
    env: &PlanarPushEnv,
    policy: &PolicyContext,
    spec: &SamplerSpec,
    seeds: &[u64],
    rollouts: usize,
) -> Result<EvalReport> {
    let per_seed: Result<Vec<(u64, Vec<usize>, Vec<RolloutOutcome>)>> = seeds
        .par_iter()
        .map(|&seed| {
            let root = RngStream::from_seed(seed);
            let mut goal_rng = root.split("goal-assign");
            let goals: Vec<usize> = (0..rollouts)
                .map(|_| usize::from(goal_rng.bernoulli(0.5)))
                .collect();
            let outcomes =
                rollout_policy_batch(env, policy, spec, &goals, &root.split("rollouts"))?;
            Ok((seed, goals, outcomes))
        })
        .collect();
    let mut report = EvalReport::default();
    for (seed, goals, outcomes) in per_seed? {
        for (rollout, (outcome, goal)) in outcomes.iter().zip(&goals).enumerate() {
            report.rows.push(EvalRow {
                seed,
                rollout,
                goal_target: *goal,
                result: outcome.result,
                reward: outcome.reward,
                reached: outcome.reached,
            });
        }
    }
    Ok(report)
}
