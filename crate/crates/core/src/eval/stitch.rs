use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rollout_eval, EvalReport, PolicyAgent, ScoreReference};
use crate::data::{
    check_stitching_precondition, generate_behavior_dataset, generate_expert_demos, Dataset, SegmentPlan,
};
use crate::envs::{EnvKind, EnvSpec};
use crate::error::{ensure, Result};
use crate::models::{ContextFormer, EncoderConfig, PolicyConfig, PolicyModel};
use crate::objectives::{control_step, train_epoch, EpochMetrics, TrainConfig, TrainState, WindowSampler};
use crate::tensor::{Adam, DropoutStream, Precision, Real};

/// Everything that determines a stitching run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub demos: usize,
    pub observation_only: bool,
    pub suboptimal_episodes: usize,
    pub z_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub policy_heads: usize,
    pub encoder_heads: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub eval_episodes: usize,
    pub reference_episodes: usize,
    pub precision: Precision,
    pub seed: u64,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn new(env: EnvKind) -> Self {
        Self {
            env,
            demos: 5,
            observation_only: false,
            suboptimal_episodes: 500,
            z_dim: 16,
            hidden: 64,
            layers: 3,
            policy_heads: 2,
            encoder_heads: 8,
            dropout: 0.1,
            epochs: 60,
            eval_episodes: 50,
            reference_episodes: 2000,
            precision: Precision::F32,
            seed: 0,
            train: TrainConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.demos >= 1, "at least one expert demonstration is required");
        ensure!(self.suboptimal_episodes >= 1, "at least one sub-optimal episode is required");
        ensure!(self.epochs >= 1 && self.eval_episodes >= 1, "epochs and evaluation episodes must be positive");
        self.train.validate()?;
        ensure!(
            self.train.observation_only == self.observation_only,
            "training and dataset disagree on observation-only mode"
        );
        Ok(())
    }

    pub fn model_configs(&self, spec: &EnvSpec) -> (PolicyConfig, EncoderConfig) {
        let (obs_dim, act_dim) = (spec.obs_dim, spec.act_dim());
        let policy = PolicyConfig {
            obs_dim,
            act_dim,
            z_dim: self.z_dim,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.policy_heads,
            dropout: self.dropout,
            context: self.train.context,
        };
        let encoder = EncoderConfig {
            obs_dim,
            act_dim,
            z_dim: self.z_dim,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.encoder_heads,
            dropout: self.dropout,
            max_len: self.train.context,
        };
        (policy, encoder)
    }

    /// Sub-optimal split from the environment's segment plan plus scripted
    /// demonstrations, with the stitching precondition checked.
    pub fn build_dataset(&self) -> Result<Dataset> {
        let mut env = self.env.make();
        let plan = SegmentPlan::for_env(self.env);
        let suboptimal = generate_behavior_dataset(env.as_mut(), &plan, self.suboptimal_episodes, self.seed)?;
        check_stitching_precondition(env.as_ref(), &suboptimal)?;
        let expert = generate_expert_demos(env.as_mut(), self.demos, self.seed.wrapping_add(1), self.observation_only)?;
        Dataset::new(env.spec().clone(), suboptimal, expert, self.precision, self.seed)
    }
}

/// Runs the three-phase schedule for `cfg.epochs` epochs, handing each
/// epoch's metrics to `on_epoch`.
pub fn train_contextformer<S: Real>(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<ContextFormer<S>> {
    let sampler = WindowSampler::new(dataset, cfg.train.context)?;
    let (pc, ec) = cfg.model_configs(dataset.spec());
    let mut model = ContextFormer::new(pc, ec, cfg.seed)?;
    let mut state = TrainState::new(cfg.train.clone(), &model)?;
    for _ in 0..cfg.epochs {
        let metrics = train_epoch(&mut state, &mut model, &sampler)?;
        on_epoch(&metrics)?;
    }
    Ok(model)
}

/// The same policy architecture trained on the sub-optimal split alone with
/// a constant zero latent, for as many steps as phase A gets. Returns the
/// policy and its step count.
pub fn bc_control<S: Real>(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<(PolicyModel<S>, usize)> {
    let sampler = WindowSampler::suboptimal_only(dataset, cfg.train.context)?;
    let (pc, _) = cfg.model_configs(dataset.spec());
    let mut policy = PolicyModel::new(pc, cfg.seed)?;
    let mut opt = Adam::new(cfg.train.policy_opt, policy.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut dropout = DropoutStream::new(cfg.train.seed ^ 0x5eed_d50f);
    let steps = cfg.epochs * cfg.train.groups_per_epoch;
    for _ in 0..steps {
        let batch = sampler.suboptimal_batch(&mut rng, cfg.train.batch_size);
        control_step(&mut policy, &mut opt, &mut dropout, &batch, &cfg.train)?;
    }
    Ok((policy, steps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchReport {
    pub env: EnvKind,
    pub demos: usize,
    pub observation_only: bool,
    pub dataset_hash: String,
    pub suboptimal_episodes: usize,
    pub complete_suboptimal_episodes: usize,
    pub reference: ScoreReference,
    pub contextformer: EvalReport,
    pub control: EvalReport,
    /// ContextFormer success rate minus the control's.
    pub success_gap: f64,
    pub training_steps_contextformer: usize,
    pub training_steps_control: usize,
    pub final_metrics: Option<EpochMetrics>,
}

/// Trains ContextFormer and the control on `dataset` and evaluates both on
/// the same seeded episodes. Refuses datasets whose sub-optimal split already
/// contains a start-to-goal episode.
pub fn run_stitching<S: Real>(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<StitchReport> {
    cfg.validate()?;
    ensure!(dataset.spec().kind == cfg.env, "dataset was generated for {}, not {}", dataset.spec().name, cfg.env);
    let mut env = cfg.env.make();
    check_stitching_precondition(env.as_ref(), &dataset.suboptimal)?;
    let reference = ScoreReference::measure(cfg.env, cfg.reference_episodes, cfg.seed)?;

    let mut last = None;
    let model: ContextFormer<S> = train_contextformer(dataset, cfg, |m| {
        last = Some(m.clone());
        on_epoch(m)
    })?;
    let (control, control_steps) = bc_control::<S>(dataset, cfg)?;

    let eval_seed = cfg.seed.wrapping_add(1000);
    let stats = dataset.stats();
    let mut agent = PolicyAgent { policy: &model.policy, z: model.latent.values(), stats };
    let mut ours = rollout_eval(&mut agent, env.as_mut(), cfg.eval_episodes, eval_seed, &reference)?;
    ours.context = Some(cfg.train.context);
    let mut zero = PolicyAgent { policy: &control, z: vec![0.0; cfg.z_dim], stats };
    let mut theirs = rollout_eval(&mut zero, env.as_mut(), cfg.eval_episodes, eval_seed, &reference)?;
    theirs.context = Some(cfg.train.context);

    Ok(StitchReport {
        env: cfg.env,
        demos: dataset.expert.len(),
        observation_only: cfg.observation_only,
        dataset_hash: dataset.manifest.content_hash.clone(),
        suboptimal_episodes: dataset.suboptimal.len(),
        complete_suboptimal_episodes: 0,
        reference,
        success_gap: ours.success_rate - theirs.success_rate,
        contextformer: ours,
        control: theirs,
        training_steps_contextformer: cfg.epochs * cfg.train.groups_per_epoch,
        training_steps_control: control_steps,
        final_metrics: last,
    })
}

/// Generates the dataset described by `cfg` and runs the experiment on it.
pub fn stitching_experiment<S: Real>(
    cfg: &ExperimentConfig,
    on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<StitchReport> {
    cfg.validate()?;
    let dataset = cfg.build_dataset()?;
    run_stitching::<S>(&dataset, cfg, on_epoch)
}

/// One experiment per demonstration count.
pub fn demo_sweep<S: Real>(cfg: &ExperimentConfig, counts: &[usize]) -> Result<Vec<StitchReport>> {
    counts
        .iter()
        .map(|&demos| stitching_experiment::<S>(&ExperimentConfig { demos, ..cfg.clone() }, |_| Ok(())))
        .collect()
}
