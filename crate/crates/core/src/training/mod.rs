//! Denoising score-matching training: draw windows with relabeled goals,
//! corrupt the actions at sampled noise levels, regress the denoiser output
//! onto the clean actions, and keep an EMA shadow of the weights.

pub mod dataset;

pub use dataset::{DatasetMeta, Normalizer, PlayDataset, PlaySample, Trajectory};

use serde_json::json;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::denoiser::{ConditionalNet, Denoiser, NetDenoiser};
use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::schedules::TrainNoiseDist;
use crate::tensor::optim::{Adam, AdamConfig, Ema};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing a sample's goal with the null token.
    pub goal_dropout: f64,
    pub noise: TrainNoiseDist,
    pub sigma_data: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.goal_dropout) {
            return Err(CoreError::Config(format!(
                "goal dropout must be in [0,1]: {}",
                self.goal_dropout
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(CoreError::Config("learning rate must be positive".into()));
        }
        if self.sigma_data <= 0.0 {
            return Err(CoreError::Config("sigma_data must be positive".into()));
        }
        Ok(())
    }
}

/// Loss weighting `alpha(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`;
/// together with the output preconditioning this makes the effective
/// regression target unit-variance at every noise level.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    (s2 + d2) / (s2 * d2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub sigma_mean: f64,
}

/// Normalized batch tensors ready for the forward pass.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    pub actions: Tensor,
    pub states: Tensor,
    pub goals: Tensor,
}

pub fn assemble_batch(samples: &[PlaySample], norm: &Normalizer) -> Result<BatchTensors> {
    let b = samples.len();
    let first = samples
        .first()
        .ok_or_else(|| CoreError::Contract("empty batch".into()))?;
    let c_o = first.states.len();
    let c_g = first.goal.len();
    let ds = first.states[0].len();
    let da = first.actions[0].len();
    let mut actions = Vec::with_capacity(b * c_o * da);
    let mut states = Vec::with_capacity(b * c_o * ds);
    let mut goals = Vec::with_capacity(b * c_g * ds);
    for s in samples {
        for a in &s.actions {
            actions.extend(norm.norm_action(a));
        }
        for st in &s.states {
            states.extend(norm.norm_state(st));
        }
        for g in &s.goal {
            goals.extend(norm.norm_state(g));
        }
    }
    Ok(BatchTensors {
        actions: Tensor::new(vec![b, c_o, da], actions)?,
        states: Tensor::new(vec![b, c_o, ds], states)?,
        goals: Tensor::new(vec![b, c_g, ds], goals)?,
    })
}

/// Per-sample goal mask drawn independently at the dropout rate.
pub fn goal_dropout_mask(batch: usize, rate: f64, rng: &mut RngStream) -> Vec<bool> {
    (0..batch).map(|_| rng.bernoulli(rate)).collect()
}

/// Build the weighted score-matching loss node for a trainable model.
#[allow(clippy::too_many_arguments)]
pub fn score_matching_loss_node<N: ConditionalNet>(
    model: &NetDenoiser<N>,
    tape: &mut Tape,
    clean_actions: &Tensor,
    noisy_actions: &Tensor,
    states: &Tensor,
    goals: &Tensor,
    goal_mask: &[bool],
    sigmas: &[f64],
) -> Result<NodeId> {
    let predicted = model.forward_train(tape, noisy_actions, states, goals, goal_mask, sigmas)?;
    let target = tape.leaf(clean_actions.clone());
    let diff = tape.sub(predicted, target)?;
    let sq = tape.mul(diff, diff)?;
    let per_sample = tape.row_mean(sq)?;
    let weights: Vec<f64> = sigmas
        .iter()
        .map(|&s| loss_weight(s, model.precond.sigma_data))
        .collect();
    tape.weighted_mean(per_sample, weights)
}

/// Numeric loss for a fixed (non-trainable) denoiser, e.g. an analytic
/// oracle; `noise` holds the pre-drawn per-sample corruption.
pub fn score_matching_loss_value(
    model: &dyn Denoiser,
    clean_actions: &Tensor,
    states: &Tensor,
    goals: Option<&Tensor>,
    sigmas: &[f64],
    noise: &Tensor,
    sigma_data: f64,
) -> Result<f64> {
    let b = clean_actions.shape()[0];
    if sigmas.len() != b {
        return Err(CoreError::ShapeMismatch(format!(
            "{} sigmas for batch {b}",
            sigmas.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..b {
        let a = clean_actions.index_leading(i)?;
        let z = noise.index_leading(i)?;
        let noisy = a.add_scaled(&z, 1.0)?;
        let s = states.index_leading(i)?;
        let g = match goals {
            Some(g) => Some(g.index_leading(i)?),
            None => None,
        };
        let d = model.denoise(&noisy, &s, g.as_ref(), sigmas[i])?;
        let err = d.sub(&a)?;
        let mse = err.data().iter().map(|v| v * v).sum::<f64>() / err.numel() as f64;
        total += loss_weight(sigmas[i], sigma_data) * mse;
    }
    Ok(total / b as f64)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
}

/// Run the training loop and package raw weights, EMA shadow weights and
/// normalization statistics into a checkpoint.
pub fn train<N: ConditionalNet>(
    dataset: &PlayDataset,
    model: &mut NetDenoiser<N>,
    cfg: &TrainConfig,
    norm: &Normalizer,
    config_digest: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let c_o = model.net.obs_window();
    let c_g = model.net.goal_window();

    let root = RngStream::from_seed(cfg.seed);
    let mut batch_rng = root.split("batch");
    let mut sigma_rng = root.split("sigma");
    let mut noise_rng = root.split("noise");
    let mut mask_rng = root.split("goal-mask");
    let dropout_root = root.split("net-dropout");

    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(model.net.params(), adam_cfg);
    let mut ema = Ema::new(model.net.params(), cfg.ema_decay)?;
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let samples = dataset.sample_batch(cfg.batch_size, c_o, c_g, &mut batch_rng)?;
        let batch = assemble_batch(&samples, norm)?;
        let sigmas: Vec<f64> = (0..cfg.batch_size)
            .map(|_| cfg.noise.sample(&mut sigma_rng))
            .collect();
        let mut noisy = batch.actions.clone();
        {
            let block = noisy.numel() / cfg.batch_size;
            let data = noisy.data_mut();
            for (i, &sigma) in sigmas.iter().enumerate() {
                for v in &mut data[i * block..(i + 1) * block] {
                    *v += sigma * noise_rng.normal();
                }
            }
        }
        let mask = goal_dropout_mask(cfg.batch_size, cfg.goal_dropout, &mut mask_rng);

        let mut tape = Tape::training(dropout_root.split_index(step as u64));
        let loss_node = score_matching_loss_node(
            model,
            &mut tape,
            &batch.actions,
            &noisy,
            &batch.states,
            &batch.goals,
            &mask,
            &sigmas,
        )?;
        let loss = tape.value(loss_node).item();
        if !loss.is_finite() {
            let sigma_mean = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
            let sigma_min = sigmas.iter().cloned().fold(f64::INFINITY, f64::min);
            let sigma_max = sigmas.iter().cloned().fold(0.0f64, f64::max);
            return Err(CoreError::Diverged(format!(
                "step {step}: loss = {loss}; batch sigma min/mean/max = \
                 {sigma_min:.6}/{sigma_mean:.6}/{sigma_max:.6}; action batch norm = {:.6}",
                batch.actions.norm()
            )));
        }
        let sigma_mean = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
        history.push(LossRecord {
            step,
            loss,
            sigma_mean,
        });

        model.net.params_mut().zero_grads();
        let store = tape.backward(loss_node)?;
        tape.write_param_grads(&store, model.net.params_mut());
        adam.step(model.net.params_mut())?;
        ema.update(model.net.params());
    }

    if cfg.goal_dropout > 0.0 {
        model.set_unconditional_support(true);
    }
    let checkpoint = build_checkpoint(model, &ema, norm, cfg, config_digest)?;
    Ok(TrainOutcome {
        checkpoint,
        history,
    })
}

fn build_checkpoint<N: ConditionalNet>(
    model: &NetDenoiser<N>,
    ema: &Ema,
    norm: &Normalizer,
    cfg: &TrainConfig,
    config_digest: &str,
) -> Result<Checkpoint> {
    let mut meta = CheckpointMeta::new(config_digest, true, cfg.seed);
    meta.extra
        .insert("goal_dropout".into(), json!(cfg.goal_dropout));
    meta.extra.insert("sigma_data".into(), json!(cfg.sigma_data));
    let mut ckpt = Checkpoint::new(meta);
    for (i, (_, p)) in model.net.params().iter().enumerate() {
        ckpt.insert(&p.name, p.value.clone())?;
        ckpt.insert(&format!("ema.{}", p.name), ema.shadow_of(i).clone())?;
    }
    for (name, t) in norm.to_entries() {
        ckpt.insert(name, t)?;
    }
    Ok(ckpt)
}

/// Load weights from a checkpoint into a freshly constructed model; picks
/// the EMA shadow weights when `use_ema` is set. Also restores the
/// unconditional-support flag from the recorded dropout rate.
pub fn restore_model<N: ConditionalNet>(
    model: &mut NetDenoiser<N>,
    ckpt: &Checkpoint,
    use_ema: bool,
) -> Result<()> {
    let prefix = if use_ema { "ema." } else { "" };
    let names: Vec<String> = model
        .net
        .params()
        .iter()
        .map(|(_, p)| p.name.clone())
        .collect();
    for name in names {
        let key = format!("{prefix}{name}");
        let tensor = ckpt
            .get(&key)
            .ok_or_else(|| CoreError::Checkpoint(format!("missing entry `{key}`")))?;
        let pid = model
            .net
            .params()
            .id_by_name(&name)
            .expect("parameter exists");
        let current = &model.net.params().get(pid).value;
        if current.shape() != tensor.shape() {
            return Err(CoreError::Checkpoint(format!(
                "entry `{key}` has shape {:?}, model expects {:?}",
                tensor.shape(),
                current.shape()
            )));
        }
        tensor.assert_finite(&key)?;
        model.net.params_mut().get_mut(pid).value = tensor.clone();
    }
    let dropout = ckpt
        .meta
        .extra
        .get("goal_dropout")
        .and_then(|v| v.as_f64())
        .unwrap_or(0.0);
    model.set_unconditional_support(dropout > 0.0);
    Ok(())
}

/// Normalizer stored alongside the weights.
pub fn restore_normalizer(ckpt: &Checkpoint) -> Result<Normalizer> {
    Normalizer::from_entries(|name| ckpt.get(name).cloned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GmmOracle, MlpConfig, MlpNet};

    fn gaussian_dataset(n: usize, std: f64, seed: u64) -> PlayDataset {
        let mut rng = RngStream::from_seed(seed);
        let trajectories = (0..n)
            .map(|_| Trajectory {
                states: vec![vec![0.0], vec![0.0]],
                actions: vec![vec![std * rng.normal()], vec![std * rng.normal()]],
            })
            .collect();
        PlayDataset::new(trajectories).unwrap()
    }

    fn tiny_config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 16,
            learning_rate: 1e-3,
            goal_dropout: 0.0,
            noise: TrainNoiseDist::log_logistic(0.5, 0.5, 0.005, 1.0).unwrap(),
            sigma_data: 0.5,
            ema_decay: 0.999,
            seed: 7,
        }
    }

    fn tiny_model(seed: u64) -> NetDenoiser<MlpNet> {
        let mut rng = RngStream::from_seed(seed);
        let net = MlpNet::new(
            MlpConfig {
                hidden: 16,
                depth: 1,
                ..MlpConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        NetDenoiser::new(net, 0.5).unwrap()
    }

    #[test]
    fn loss_weight_hand_value() {
        assert!((loss_weight(0.5, 0.5) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn identity_model_with_zero_noise_has_zero_loss() {
        struct Identity;
        impl Denoiser for Identity {
            fn denoise(
                &self,
                a: &Tensor,
                _s: &Tensor,
                _g: Option<&Tensor>,
                _sigma: f64,
            ) -> Result<Tensor> {
                Ok(a.clone())
            }
            fn supports_unconditional(&self) -> bool {
                true
            }
        }
        let actions = Tensor::new(vec![4, 1, 1], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let states = Tensor::zeros(&[4, 1, 1]);
        let zero_noise = Tensor::zeros(&[4, 1, 1]);
        let loss = score_matching_loss_value(
            &Identity,
            &actions,
            &states,
            None,
            &[0.3, 0.5, 0.7, 0.9],
            &zero_noise,
            0.5,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn exact_posterior_beats_constant_prediction_on_mixture_data() {
        let gmm = GmmOracle::new(vec![0.7, 0.3], vec![vec![-0.6], vec![0.6]], vec![0.1, 0.1])
            .unwrap();
        struct ConstantMean(f64);
        impl Denoiser for ConstantMean {
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
        // mixture mean = 0.7*(-0.6) + 0.3*0.6 = -0.24
        let constant = ConstantMean(-0.24);

        let mut rng = RngStream::from_seed(5);
        let b = 4096;
        let actions: Vec<f64> = (0..b).flat_map(|_| gmm.sample(&mut rng)).collect();
        let actions = Tensor::new(vec![b, 1, 1], actions).unwrap();
        let states = Tensor::zeros(&[b, 1, 1]);
        let dist = TrainNoiseDist::log_logistic(0.5, 0.5, 0.005, 1.0).unwrap();
        let sigmas: Vec<f64> = (0..b).map(|_| dist.sample(&mut rng)).collect();
        let mut noise = Tensor::randn(&[b, 1, 1], &mut rng);
        for (i, v) in noise.data_mut().iter_mut().enumerate() {
            *v *= sigmas[i];
        }
        let oracle_loss =
            score_matching_loss_value(&gmm, &actions, &states, None, &sigmas, &noise, 0.5)
                .unwrap();
        let constant_loss =
            score_matching_loss_value(&constant, &actions, &states, None, &sigmas, &noise, 0.5)
                .unwrap();
        assert!(oracle_loss >= 0.0);
        assert!(
            oracle_loss < constant_loss,
            "posterior {oracle_loss} vs constant {constant_loss}"
        );
    }

    #[test]
    fn dropout_mask_is_per_sample() {
        let mut rng = RngStream::from_seed(11);
        let mut masked = 0usize;
        let mut mixed_batches = 0usize;
        let batches = 100;
        let per_batch = 100;
        for _ in 0..batches {
            let mask = goal_dropout_mask(per_batch, 0.1, &mut rng);
            let count = mask.iter().filter(|&&m| m).count();
            masked += count;
            if count > 0 && count < per_batch {
                mixed_batches += 1;
            }
        }
        let rate = masked as f64 / (batches * per_batch) as f64;
        assert!((rate - 0.1).abs() < 0.02, "observed rate {rate}");
        assert!(mixed_batches > batches / 2);
    }

    #[test]
    fn zero_steps_checkpoint_equals_initialization() {
        let ds = gaussian_dataset(32, 0.5, 0);
        let mut model = tiny_model(1);
        let init: Vec<(String, Tensor)> = model
            .net
            .params()
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        let out = train(
            &ds,
            &mut model,
            &tiny_config(0),
            &Normalizer::identity(1, 1),
            "digest",
        )
        .unwrap();
        for (name, value) in init {
            let stored = out.checkpoint.get(&name).unwrap();
            assert_eq!(stored.data(), value.data());
            let ema = out.checkpoint.get(&format!("ema.{name}")).unwrap();
            assert_eq!(ema.data(), value.data());
        }
        assert!(out.history.is_empty());
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let ds = gaussian_dataset(32, 0.5, 0);
        let cfg = tiny_config(12);
        let norm = Normalizer::identity(1, 1);
        let mut m1 = tiny_model(1);
        let mut m2 = tiny_model(1);
        let h1 = train(&ds, &mut m1, &cfg, &norm, "d").unwrap().history;
        let h2 = train(&ds, &mut m2, &cfg, &norm, "d").unwrap().history;
        assert_eq!(h1.len(), h2.len());
        for (a, b) in h1.iter().zip(&h2) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.sigma_mean.to_bits(), b.sigma_mean.to_bits());
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let ds = gaussian_dataset(32, 0.5, 0);
        let mut model = tiny_model(1);
        // poison one weight
        let pid = model.net.params().id_by_name("mlp.h0.weight").unwrap();
        model.net.params_mut().get_mut(pid).value.data_mut()[0] = f64::NAN;
        let err = train(
            &ds,
            &mut model,
            &tiny_config(3),
            &Normalizer::identity(1, 1),
            "d",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sigma"), "diagnostic missing sigma stats: {msg}");
    }

    #[test]
    fn full_goal_dropout_zeroes_goal_pathway_gradients() {
        let ds = gaussian_dataset(64, 0.5, 0);
        let mut model = tiny_model(2);
        let mut cfg = tiny_config(0);
        cfg.goal_dropout = 1.0;
        // run one manual step to inspect gradients
        let samples = ds.sample_batch(16, 1, 1, &mut RngStream::from_seed(3)).unwrap();
        let batch = assemble_batch(&samples, &Normalizer::identity(1, 1)).unwrap();
        let sigmas = vec![0.5; 16];
        let mask = vec![true; 16];
        let mut tape = Tape::with_grad();
        let loss = score_matching_loss_node(
            &model,
            &mut tape,
            &batch.actions,
            &batch.actions,
            &batch.states,
            &batch.goals,
            &mask,
            &sigmas,
        )
        .unwrap();
        let store = tape.backward(loss).unwrap();
        model.net.params_mut().zero_grads();
        tape.write_param_grads(&store, model.net.params_mut());
        // the goal values never reach the network, so gradients flow into the
        // null token instead; weight columns fed by the goal inputs untouched
        let null_grad = &model.net.params().by_name("mlp.null_goal").unwrap().grad;
        assert!(null_grad.data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn restore_round_trips_weights() {
        let ds = gaussian_dataset(32, 0.5, 0);
        let mut model = tiny_model(1);
        let out = train(
            &ds,
            &mut model,
            &tiny_config(5),
            &Normalizer::identity(1, 1),
            "d",
        )
        .unwrap();
        let mut fresh = tiny_model(99);
        restore_model(&mut fresh, &out.checkpoint, false).unwrap();
        for ((_, a), (_, b)) in model.net.params().iter().zip(fresh.net.params().iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        let norm = restore_normalizer(&out.checkpoint).unwrap();
        assert_eq!(norm, Normalizer::identity(1, 1));
    }
}
