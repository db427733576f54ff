//! Trajectories, segment-plan dataset generation, normalization and the
//! JSON-lines dataset format.

mod generate;
mod io;

pub use generate::{
    check_stitching_precondition, generate_behavior_dataset, generate_expert_demos, is_complete, Route, SegmentPlan,
};
pub use io::{load_dataset, save_dataset, FORMAT_VERSION};

use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{ensure, Result};
use crate::models::Fragment;
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    pub action_masked: bool,
    /// Kept for scoring; never shown to a learner.
    pub reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub env: String,
    pub seed: u64,
    /// `scripted-expert`, `route-<i>`, `random`, `policy`, ...
    pub behavior: String,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub reached_goal: bool,
}

/// One episode: the `(s_t, a_t)` steps plus the observation reached after the
/// last action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub final_observation: Vec<f64>,
    pub meta: EpisodeMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn strip_rewards(&mut self) {
        self.steps.iter_mut().for_each(|s| s.reward = None);
    }

    pub fn mask_actions(&mut self) {
        self.steps.iter_mut().for_each(|s| s.action_masked = true);
    }

    pub fn is_observation_only(&self) -> bool {
        self.steps.iter().all(|s| s.action_masked)
    }

    pub fn has_labelled_actions(&self) -> bool {
        self.steps.iter().any(|s| !s.action_masked)
    }

    /// Steps `start..end` as a network fragment with normalized observations.
    pub fn fragment(&self, start: usize, end: usize, stats: &NormalizationStats) -> Result<Fragment> {
        ensure!(start < end && end <= self.len(), "window {start}..{end} outside an episode of {} steps", self.len());
        let steps = &self.steps[start..end];
        Fragment::new(
            steps.iter().map(|s| stats.apply(&s.observation)).collect(),
            steps.iter().map(|s| s.action.clone()).collect(),
            steps.iter().map(|s| s.action_masked).collect(),
        )
    }

    /// The window of at most `k` steps ending with step `end` (inclusive).
    pub fn window(&self, end: usize, k: usize, stats: &NormalizationStats) -> Result<Fragment> {
        ensure!(k > 0, "window length must be positive");
        self.fragment((end + 1).saturating_sub(k), end + 1, stats)
    }

    fn check_dims(&self, obs_dim: usize, act_dim: usize, horizon: usize) -> Result<()> {
        ensure!(self.len() <= horizon, "episode of {} steps exceeds the horizon {horizon}", self.len());
        ensure!(self.final_observation.len() == obs_dim, "final observation has the wrong width");
        for s in &self.steps {
            ensure!(
                s.observation.len() == obs_dim && s.action.len() == act_dim,
                "episode step has widths {}/{}, expected {obs_dim}/{act_dim}",
                s.observation.len(),
                s.action.len()
            );
        }
        Ok(())
    }
}

/// Per-dimension observation mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Population statistics over every step observation. Constant dimensions
    /// get a unit scale.
    pub fn from_trajectories(trajectories: &[Trajectory]) -> Result<Self> {
        let observations: Vec<&[f64]> =
            trajectories.iter().flat_map(|t| t.steps.iter().map(|s| s.observation.as_slice())).collect();
        ensure!(!observations.is_empty(), "normalization needs at least one observation");
        let dim = observations[0].len();
        let n = observations.len() as f64;
        let mut mean = vec![0.0; dim];
        for o in &observations {
            mean.iter_mut().zip(o.iter()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for o in &observations {
            var.iter_mut().zip(o.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, observation: &[f64]) -> Vec<f64> {
        observation.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub env: EnvSpec,
    /// Computed over the sub-optimal split only.
    pub normalization: NormalizationStats,
    pub suboptimal_episodes: usize,
    pub expert_demos: usize,
    pub observation_only: bool,
    pub precision: Precision,
    pub seed: u64,
    /// SHA-256 of the episode lines, hex encoded.
    pub content_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversion_note: Option<String>,
}

/// A behavior dataset with its expert demonstrations.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub suboptimal: Vec<Trajectory>,
    pub expert: Vec<Trajectory>,
}

impl Dataset {
    /// Validates the episodes, rounds them to `precision` and computes the
    /// normalization statistics and content hash.
    pub fn new(
        env: EnvSpec,
        mut suboptimal: Vec<Trajectory>,
        mut expert: Vec<Trajectory>,
        precision: Precision,
        seed: u64,
    ) -> Result<Self> {
        for t in suboptimal.iter_mut().chain(expert.iter_mut()) {
            t.check_dims(env.obs_dim, env.act_dim(), env.horizon)?;
            io::round_trajectory(t, precision);
        }
        let normalization = if suboptimal.is_empty() {
            NormalizationStats::identity(env.obs_dim)
        } else {
            NormalizationStats::from_trajectories(&suboptimal)?
        };
        let observation_only = !expert.is_empty() && expert.iter().all(Trajectory::is_observation_only);
        let mut manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            env,
            normalization,
            suboptimal_episodes: suboptimal.len(),
            expert_demos: expert.len(),
            observation_only,
            precision,
            seed,
            content_hash: String::new(),
            conversion_note: None,
        };
        let mut data = Self { manifest: manifest.clone(), suboptimal, expert };
        manifest.content_hash = io::payload_hash(&data.payload_lines()?);
        data.manifest = manifest;
        Ok(data)
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.manifest.normalization
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.manifest.env
    }

    /// Learner view of the data: rewards removed.
    pub fn without_rewards(&self) -> Self {
        let mut d = self.clone();
        d.suboptimal.iter_mut().chain(d.expert.iter_mut()).for_each(Trajectory::strip_rewards);
        d
    }

    pub(crate) fn payload_lines(&self) -> Result<Vec<String>> {
        let precision = self.manifest.precision;
        let expert = self.expert.iter().map(|t| io::episode_line(io::Split::Expert, t, precision));
        let sub = self.suboptimal.iter().map(|t| io::episode_line(io::Split::Suboptimal, t, precision));
        expert.chain(sub).collect()
    }
}
