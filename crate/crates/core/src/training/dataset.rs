//! Play datasets: unsegmented (state, action) trajectories with on-the-fly
//! window sampling and future-goal relabeling, plus the JSON-lines file
//! format and the normalization statistics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// One trajectory of aligned states and actions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Metadata line written in front of the trajectories.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub config_digest: String,
    pub seed: u64,
}

/// A window paired with a goal drawn from the same trajectory's future.
#[derive(Debug, Clone)]
pub struct PlaySample {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub goal: Vec<Vec<f64>>,
    pub window_start: usize,
    pub goal_index: usize,
}

#[derive(Debug, Clone)]
pub struct PlayDataset {
    trajectories: Vec<Trajectory>,
    state_dim: usize,
    act_dim: usize,
}

impl PlayDataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| CoreError::Dataset("empty dataset".into()))?;
        if first.states.is_empty() {
            return Err(CoreError::Dataset("empty trajectory".into()));
        }
        let state_dim = first.states[0].len();
        let act_dim = first
            .actions
            .first()
            .map(Vec::len)
            .ok_or_else(|| CoreError::Dataset("trajectory without actions".into()))?;
        for (i, t) in trajectories.iter().enumerate() {
            if t.states.len() != t.actions.len() {
                return Err(CoreError::Dataset(format!(
                    "trajectory {i}: {} states vs {} actions",
                    t.states.len(),
                    t.actions.len()
                )));
            }
            if t.len() < 2 {
                return Err(CoreError::Dataset(format!(
                    "trajectory {i} shorter than 2 steps"
                )));
            }
            for s in &t.states {
                if s.len() != state_dim {
                    return Err(CoreError::Dataset(format!(
                        "trajectory {i}: inconsistent state dim"
                    )));
                }
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::Dataset(format!(
                        "trajectory {i}: non-finite state"
                    )));
                }
            }
            for a in &t.actions {
                if a.len() != act_dim {
                    return Err(CoreError::Dataset(format!(
                        "trajectory {i}: inconsistent action dim"
                    )));
                }
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::Dataset(format!(
                        "trajectory {i}: non-finite action"
                    )));
                }
            }
        }
        Ok(Self {
            trajectories,
            state_dim,
            act_dim,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// One window + relabeled goal. The window start is uniform over valid
    /// positions, the goal start uniform over the steps after the window
    /// ends; the goal window is clipped at the trajectory end by repeating
    /// the final state.
    pub fn sample(&self, obs_window: usize, goal_window: usize, rng: &mut RngStream) -> Result<PlaySample> {
        let traj = &self.trajectories[rng.index(self.trajectories.len())];
        let t = traj.len();
        if t < obs_window + 1 {
            return Err(CoreError::Contract(format!(
                "trajectory of length {t} too short for window {obs_window} plus a future goal"
            )));
        }
        let start = rng.index(t - obs_window);
        let goal_index = start + obs_window + rng.index(t - start - obs_window);
        let states = traj.states[start..start + obs_window].to_vec();
        let actions = traj.actions[start..start + obs_window].to_vec();
        let mut goal = Vec::with_capacity(goal_window);
        for k in 0..goal_window {
            let idx = (goal_index + k).min(t - 1);
            goal.push(traj.states[idx].clone());
        }
        Ok(PlaySample {
            states,
            actions,
            goal,
            window_start: start,
            goal_index,
        })
    }

    pub fn sample_batch(
        &self,
        batch: usize,
        obs_window: usize,
        goal_window: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<PlaySample>> {
        (0..batch)
            .map(|_| self.sample(obs_window, goal_window, rng))
            .collect()
    }

    /// Write as JSON lines, one trajectory per line, with an optional
    /// metadata object on the first line.
    pub fn save_jsonl(&self, path: &Path, meta: Option<&DatasetMeta>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        if let Some(meta) = meta {
            serde_json::to_writer(&mut w, meta)?;
            w.write_all(b"\n")?;
        }
        for t in &self.trajectories {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<(Self, Option<DatasetMeta>)> {
        let reader = BufReader::new(File::open(path)?);
        let mut meta = None;
        let mut trajectories = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| {
                CoreError::Dataset(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            if lineno == 0 && value.get("states").is_none() {
                meta = Some(serde_json::from_value(value)?);
                continue;
            }
            trajectories.push(serde_json::from_value(value).map_err(|e| {
                CoreError::Dataset(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?);
        }
        Ok((Self::new(trajectories)?, meta))
    }
}

/// Normalization: states standardized to zero mean / unit std, actions
/// affinely scaled to `[-1, 1]` from their data range.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub act_center: Vec<f64>,
    pub act_half_span: Vec<f64>,
}

impl Normalizer {
    pub fn fit(dataset: &PlayDataset) -> Self {
        let ds = dataset.state_dim();
        let da = dataset.act_dim();
        let mut mean = vec![0.0; ds];
        let mut count = 0usize;
        for t in dataset.trajectories() {
            for s in &t.states {
                for (m, v) in mean.iter_mut().zip(s) {
                    *m += v;
                }
            }
            count += t.len();
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0; ds];
        for t in dataset.trajectories() {
            for s in &t.states {
                for j in 0..ds {
                    let d = s[j] - mean[j];
                    var[j] += d * d;
                }
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|v| (v / count as f64).sqrt().max(1e-6))
            .collect();

        let mut lo = vec![f64::INFINITY; da];
        let mut hi = vec![f64::NEG_INFINITY; da];
        for t in dataset.trajectories() {
            for a in &t.actions {
                for j in 0..da {
                    lo[j] = lo[j].min(a[j]);
                    hi[j] = hi[j].max(a[j]);
                }
            }
        }
        let act_center: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let act_half_span: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| (0.5 * (h - l)).max(1e-9))
            .collect();
        Self {
            state_mean: mean,
            state_std: std,
            act_center,
            act_half_span,
        }
    }

    /// Pass-through normalizer (used when data is already unit-scale).
    pub fn identity(state_dim: usize, act_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            act_center: vec![0.0; act_dim],
            act_half_span: vec![1.0; act_dim],
        }
    }

    pub fn norm_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .enumerate()
            .map(|(j, &v)| (v - self.state_mean[j]) / self.state_std[j])
            .collect()
    }

    pub fn norm_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(j, &v)| (v - self.act_center[j]) / self.act_half_span[j])
            .collect()
    }

    pub fn denorm_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(j, &v)| self.act_center[j] + v * self.act_half_span[j])
            .collect()
    }

    /// Flatten into named tensors for checkpoint storage.
    pub fn to_entries(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            (
                "norm.state_mean",
                Tensor::new(vec![self.state_mean.len()], self.state_mean.clone()).unwrap(),
            ),
            (
                "norm.state_std",
                Tensor::new(vec![self.state_std.len()], self.state_std.clone()).unwrap(),
            ),
            (
                "norm.act_center",
                Tensor::new(vec![self.act_center.len()], self.act_center.clone()).unwrap(),
            ),
            (
                "norm.act_half_span",
                Tensor::new(vec![self.act_half_span.len()], self.act_half_span.clone()).unwrap(),
            ),
        ]
    }

    pub fn from_entries(get: impl Fn(&str) -> Option<Tensor>) -> Result<Self> {
        let fetch = |name: &str| -> Result<Vec<f64>> {
            get(name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| CoreError::Checkpoint(format!("missing entry `{name}`")))
        };
        Ok(Self {
            state_mean: fetch("norm.state_mean")?,
            state_std: fetch("norm.state_std")?,
            act_center: fetch("norm.act_center")?,
            act_half_span: fetch("norm.act_half_span")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_trajectory(t: usize) -> Trajectory {
        Trajectory {
            states: (0..t).map(|i| vec![i as f64]).collect(),
            actions: (0..t).map(|i| vec![i as f64 * 0.1]).collect(),
        }
    }

    #[test]
    fn window_and_goal_index_ranges() {
        let ds = PlayDataset::new(vec![ramp_trajectory(10)]).unwrap();
        let mut rng = RngStream::from_seed(0);
        for _ in 0..500 {
            let s = ds.sample(5, 1, &mut rng).unwrap();
            assert!(s.window_start <= 4);
            assert!(s.goal_index >= s.window_start + 5);
            assert!(s.goal_index <= 9);
            assert_eq!(s.goal[0], vec![s.goal_index as f64]);
        }
    }

    #[test]
    fn minimal_trajectory_forces_final_goal() {
        let ds = PlayDataset::new(vec![ramp_trajectory(6)]).unwrap();
        let mut rng = RngStream::from_seed(1);
        for _ in 0..50 {
            let s = ds.sample(5, 1, &mut rng).unwrap();
            assert_eq!(s.window_start, 0);
            assert_eq!(s.goal_index, 5);
        }
    }

    #[test]
    fn too_short_trajectory_rejected_at_sampling() {
        let ds = PlayDataset::new(vec![ramp_trajectory(4)]).unwrap();
        let mut rng = RngStream::from_seed(1);
        assert!(ds.sample(5, 1, &mut rng).is_err());
    }

    #[test]
    fn window_start_distribution_is_uniform() {
        let ds = PlayDataset::new(vec![ramp_trajectory(10)]).unwrap();
        let mut rng = RngStream::from_seed(2);
        let n = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            let s = ds.sample(5, 1, &mut rng).unwrap();
            counts[s.window_start] += 1;
        }
        // chi-square against uniform over 5 cells; crit(4 dof, p=0.01) = 13.277
        let expected = n as f64 / 5.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 13.277, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn goal_window_clips_by_repeating_last_state() {
        let ds = PlayDataset::new(vec![ramp_trajectory(8)]).unwrap();
        let mut rng = RngStream::from_seed(3);
        for _ in 0..100 {
            let s = ds.sample(3, 4, &mut rng).unwrap();
            assert_eq!(s.goal.len(), 4);
            for (k, g) in s.goal.iter().enumerate() {
                let idx = (s.goal_index + k).min(7);
                assert_eq!(g, &vec![idx as f64]);
            }
        }
    }

    #[test]
    fn jsonl_round_trip_with_meta() {
        let ds = PlayDataset::new(vec![ramp_trajectory(5), ramp_trajectory(7)]).unwrap();
        let meta = DatasetMeta {
            config_digest: "abc".into(),
            seed: 42,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        ds.save_jsonl(&path, Some(&meta)).unwrap();
        let (loaded, loaded_meta) = PlayDataset::load_jsonl(&path).unwrap();
        assert_eq!(loaded_meta, Some(meta));
        assert_eq!(loaded.trajectories(), ds.trajectories());
    }

    #[test]
    fn single_trajectory_round_trips() {
        let ds = PlayDataset::new(vec![ramp_trajectory(3)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        ds.save_jsonl(&path, None).unwrap();
        let (loaded, meta) = PlayDataset::load_jsonl(&path).unwrap();
        assert!(meta.is_none());
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded.trajectories(), ds.trajectories());
    }

    #[test]
    fn malformed_shapes_rejected() {
        let bad = Trajectory {
            states: vec![vec![0.0], vec![0.0, 1.0]],
            actions: vec![vec![0.0], vec![0.0]],
        };
        assert!(PlayDataset::new(vec![bad]).is_err());
        let nan = Trajectory {
            states: vec![vec![0.0], vec![f64::NAN]],
            actions: vec![vec![0.0], vec![0.0]],
        };
        assert!(PlayDataset::new(vec![nan]).is_err());
    }

    #[test]
    fn normalizer_round_trips_actions() {
        let ds = PlayDataset::new(vec![ramp_trajectory(9)]).unwrap();
        let norm = Normalizer::fit(&ds);
        let a = vec![0.4];
        let n = norm.norm_action(&a);
        assert!((norm.denorm_action(&n)[0] - 0.4).abs() < 1e-12);
        // extremes map to the unit interval edges
        assert!((norm.norm_action(&[0.0])[0] + 1.0).abs() < 1e-9);
        assert!((norm.norm_action(&[0.8])[0] - 1.0).abs() < 1e-9);
    }
}
