use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{conditioned_policy_loss, contextual_loss, policy_loss, LossConfig};
use crate::data::{Dataset, NormalizationStats, Trajectory};
use crate::error::{ensure, Result};
use crate::models::{ContextFormer, Fragment, PolicyModel};
use crate::tensor::{clip_grad_norm, grad_norm, Adam, AdamConfig, DropoutStream, Graph, Mode, ParamSet, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Window length `k`.
    pub context: usize,
    /// Batch groups (one step of each phase) per epoch.
    pub groups_per_epoch: usize,
    pub loss: LossConfig,
    pub policy_opt: AdamConfig,
    pub encoder_opt: AdamConfig,
    pub latent_opt: AdamConfig,
    /// Per-network gradient norm cap.
    pub grad_clip: Option<f64>,
    /// Share of phase-A windows taken from expert demonstrations. `None`
    /// draws episodes uniformly from both splits.
    #[serde(default)]
    pub expert_fraction: Option<f64>,
    /// Keep the repulsion term when the encoder is updated. When off, the
    /// encoder step only attracts expert embeddings toward the latent.
    #[serde(default = "yes")]
    pub encoder_repulsion: bool,
    /// Hide every action from the encoder and train the policy only on
    /// windows with recorded actions.
    pub observation_only: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            context: 20,
            groups_per_epoch: 100,
            loss: LossConfig::default(),
            policy_opt: AdamConfig::default(),
            encoder_opt: AdamConfig::default(),
            latent_opt: AdamConfig { lr: 1e-2, weight_decay: 0.0, warmup_steps: 0, ..AdamConfig::default() },
            grad_clip: Some(1.0),
            expert_fraction: None,
            encoder_repulsion: true,
            observation_only: false,
            seed: 0,
        }
    }
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    /// Smaller batches, shorter windows and a short warmup, sized for the
    /// toy environments on one core.
    pub fn desk() -> Self {
        let opt = AdamConfig { warmup_steps: 100, ..AdamConfig::default() };
        Self {
            batch_size: 32,
            context: 10,
            groups_per_epoch: 50,
            policy_opt: opt,
            encoder_opt: opt,
            expert_fraction: Some(0.5),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0, "batch size must be positive");
        ensure!(self.context > 0, "context length must be positive");
        ensure!(self.groups_per_epoch > 0, "an epoch needs at least one batch group");
        self.loss.validate()?;
        if let Some(f) = self.expert_fraction {
            ensure!((0.0..=1.0).contains(&f), "expert fraction {f} outside [0, 1]");
        }
        for (name, opt) in [("policy", &self.policy_opt), ("encoder", &self.encoder_opt), ("latent", &self.latent_opt)]
        {
            ensure!(opt.lr > 0.0 && opt.lr.is_finite(), "{name} learning rate must be positive");
            ensure!(opt.weight_decay >= 0.0, "{name} weight decay must be non-negative");
            ensure!((0.0..1.0).contains(&opt.beta1) && (0.0..1.0).contains(&opt.beta2), "{name} betas outside [0, 1)");
        }
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, "gradient clip must be positive");
        }
        Ok(())
    }
}

/// Draws training windows of at most `k` steps from a dataset.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    expert: Vec<Trajectory>,
    suboptimal: Vec<Trajectory>,
    stats: NormalizationStats,
    k: usize,
}

impl WindowSampler {
    /// Fails unless both splits are present.
    pub fn new(dataset: &Dataset, k: usize) -> Result<Self> {
        let d = dataset.without_rewards();
        ensure!(!d.expert.is_empty(), "dataset has no expert demonstrations");
        ensure!(!d.suboptimal.is_empty(), "dataset has no sub-optimal episodes");
        ensure!(k > 0, "window length must be positive");
        let nonempty = |v: Vec<Trajectory>| v.into_iter().filter(|t| !t.is_empty()).collect::<Vec<_>>();
        let (expert, suboptimal) = (nonempty(d.expert), nonempty(d.suboptimal));
        ensure!(!expert.is_empty() && !suboptimal.is_empty(), "dataset splits contain only empty episodes");
        Ok(Self { expert, suboptimal, stats: dataset.stats().clone(), k })
    }

    /// Sampler over the sub-optimal split alone, for the zero-token control.
    pub fn suboptimal_only(dataset: &Dataset, k: usize) -> Result<Self> {
        let d = dataset.without_rewards();
        ensure!(k > 0, "window length must be positive");
        let suboptimal: Vec<Trajectory> = d.suboptimal.into_iter().filter(|t| !t.is_empty()).collect();
        ensure!(!suboptimal.is_empty(), "dataset has no sub-optimal episodes");
        Ok(Self { expert: Vec::new(), suboptimal, stats: dataset.stats().clone(), k })
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    fn window(&self, t: &Trajectory, rng: &mut ChaCha8Rng) -> Fragment {
        let end = rng.random_range(0..t.len());
        t.window(end, self.k, &self.stats).expect("end index inside the episode")
    }

    /// Windows from episodes with recorded actions. With `expert_fraction`
    /// unset, episodes are drawn uniformly from both splits; otherwise each
    /// window comes from an expert episode with that probability.
    pub fn mixture_batch(&self, rng: &mut ChaCha8Rng, n: usize, expert_fraction: Option<f64>) -> Vec<Fragment> {
        let expert: Vec<&Trajectory> = self.expert.iter().filter(|t| t.has_labelled_actions()).collect();
        match expert_fraction {
            Some(f) if !expert.is_empty() => (0..n)
                .map(|_| {
                    if rng.random_bool(f) {
                        self.window(expert[rng.random_range(0..expert.len())], rng)
                    } else {
                        self.window(&self.suboptimal[rng.random_range(0..self.suboptimal.len())], rng)
                    }
                })
                .collect(),
            _ => {
                let labelled: Vec<&Trajectory> = expert.into_iter().chain(&self.suboptimal).collect();
                (0..n).map(|_| self.window(labelled[rng.random_range(0..labelled.len())], rng)).collect()
            }
        }
    }

    pub fn expert_batch(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<Fragment> {
        (0..n).map(|_| self.window(&self.expert[rng.random_range(0..self.expert.len())], rng)).collect()
    }

    pub fn suboptimal_batch(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<Fragment> {
        (0..n).map(|_| self.window(&self.suboptimal[rng.random_range(0..self.suboptimal.len())], rng)).collect()
    }
}

/// Optimizers, sampling RNG and dropout stream of a training run.
#[derive(Clone, Debug)]
pub struct TrainState<S> {
    pub config: TrainConfig,
    pub policy_opt: Adam<S>,
    pub encoder_opt: Adam<S>,
    pub latent_opt: Adam<S>,
    pub epoch: u64,
    rng: ChaCha8Rng,
    dropout: DropoutStream,
}

impl<S: Real> TrainState<S> {
    pub fn new(config: TrainConfig, model: &ContextFormer<S>) -> Result<Self> {
        config.validate()?;
        ensure!(
            config.context <= model.policy.config().context && config.context <= model.encoder.config().max_len,
            "window length {} exceeds the model context",
            config.context
        );
        Ok(Self {
            policy_opt: Adam::new(config.policy_opt, model.policy.params()),
            encoder_opt: Adam::new(config.encoder_opt, model.encoder.params()),
            latent_opt: Adam::new(config.latent_opt, model.latent.params()),
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            dropout: DropoutStream::new(config.seed ^ 0x5eed_d50f),
            config,
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn graph(&mut self, mode: Mode) -> Graph<S> {
        Graph::new(mode, std::mem::replace(&mut self.dropout, DropoutStream::new(0)))
    }

    fn finish(&mut self, g: Graph<S>) {
        self.dropout = g.into_dropout();
    }

    fn clip(&self, set: &mut ParamSet<S>) -> f64 {
        match self.config.grad_clip {
            Some(c) => clip_grad_norm(set, c),
            None => grad_norm(set),
        }
    }
}

/// Loss and pre-clipping gradient norms of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub loss: f64,
    pub grad_norm_policy: f64,
    pub grad_norm_encoder: f64,
    pub grad_norm_z: f64,
}

fn freeze<S: Real>(model: &mut ContextFormer<S>, policy: bool, encoder: bool, latent: bool) {
    model.policy.params_mut().set_trainable(policy);
    model.encoder.params_mut().set_trainable(encoder);
    model.latent.params_mut().set_trainable(latent);
    model.policy.params_mut().zero_grad();
    model.encoder.params_mut().zero_grad();
    model.latent.params_mut().zero_grad();
}

/// Phase A: one step on policy and encoder against the policy loss, with the
/// contextual embedding frozen.
pub fn phase_a_step<S: Real>(
    state: &mut TrainState<S>,
    model: &mut ContextFormer<S>,
    batch: &[Fragment],
) -> Result<PhaseOutcome> {
    freeze(model, true, true, false);
    let mut g = state.graph(Mode::Train);
    let outcome = (|| {
        let obs_only = state.config.observation_only;
        let loss = policy_loss(&mut g, &model.policy, &model.encoder, batch, obs_only, state.config.loss.norm)?;
        g.backward(loss, &mut [model.policy.params_mut(), model.encoder.params_mut()])?;
        Ok::<_, crate::Error>(g.scalar(loss).as_f64())
    })();
    state.finish(g);
    let loss = outcome?;
    let grad_norm_policy = state.clip(model.policy.params_mut());
    let grad_norm_encoder = state.clip(model.encoder.params_mut());
    state.policy_opt.step(model.policy.params_mut())?;
    state.encoder_opt.step(model.encoder.params_mut())?;
    Ok(PhaseOutcome { loss, grad_norm_policy, grad_norm_encoder, grad_norm_z: 0.0 })
}

/// Phase B: one step on the encoder against the contextual loss, with policy
/// and contextual embedding frozen.
pub fn phase_b_step<S: Real>(
    state: &mut TrainState<S>,
    model: &mut ContextFormer<S>,
    expert: &[Fragment],
    suboptimal: &[Fragment],
) -> Result<PhaseOutcome> {
    freeze(model, false, true, false);
    let mut g = state.graph(Mode::Train);
    let outcome = (|| {
        let z = model.latent.var(&mut g)?;
        let c = &state.config;
        let cfg = if c.encoder_repulsion { c.loss } else { LossConfig { lambda2: 0.0, ..c.loss } };
        let loss = contextual_loss(&mut g, z, &model.encoder, expert, suboptimal, c.observation_only, &cfg)?;
        g.backward(loss, &mut [model.encoder.params_mut()])?;
        Ok::<_, crate::Error>(g.scalar(loss).as_f64())
    })();
    state.finish(g);
    let loss = outcome?;
    let grad_norm_encoder = state.clip(model.encoder.params_mut());
    state.encoder_opt.step(model.encoder.params_mut())?;
    Ok(PhaseOutcome { loss, grad_norm_encoder, ..Default::default() })
}

/// Phase C: one step on the contextual embedding against the contextual
/// loss, with both networks frozen and the encoder in evaluation mode. The
/// embedding is clamped back into the unit box afterwards.
pub fn phase_c_step<S: Real>(
    state: &mut TrainState<S>,
    model: &mut ContextFormer<S>,
    expert: &[Fragment],
    suboptimal: &[Fragment],
) -> Result<PhaseOutcome> {
    freeze(model, false, false, true);
    let mut g = Graph::eval();
    let z = model.latent.var(&mut g)?;
    let c = &state.config;
    let loss = contextual_loss(&mut g, z, &model.encoder, expert, suboptimal, c.observation_only, &c.loss)?;
    g.backward(loss, &mut [model.latent.params_mut()])?;
    let grad_norm_z = grad_norm(model.latent.params());
    state.latent_opt.step(model.latent.params_mut())?;
    model.latent.clamp();
    Ok(PhaseOutcome { loss: g.scalar(loss).as_f64(), grad_norm_z, ..Default::default() })
}

/// One step of the zero-token control: the policy loss with a constant zero
/// latent in place of the encoder.
pub fn control_step<S: Real>(
    policy: &mut PolicyModel<S>,
    opt: &mut Adam<S>,
    dropout: &mut DropoutStream,
    batch: &[Fragment],
    config: &TrainConfig,
) -> Result<f64> {
    policy.params_mut().set_trainable(true);
    policy.params_mut().zero_grad();
    let mut g = Graph::new(Mode::Train, std::mem::replace(dropout, DropoutStream::new(0)));
    let outcome = (|| {
        let z_dim = policy.config().z_dim;
        let z = g.input_matrix(batch.len(), z_dim, vec![S::zero(); batch.len() * z_dim])?;
        let pred = policy.forward(&mut g, z, batch)?;
        let loss = conditioned_policy_loss(&mut g, pred, batch, config.loss.norm)?;
        g.backward(loss, &mut [policy.params_mut()])?;
        Ok::<_, crate::Error>(g.scalar(loss).as_f64())
    })();
    *dropout = g.into_dropout();
    let loss = outcome?;
    if let Some(c) = config.grad_clip {
        clip_grad_norm(policy.params_mut(), c);
    }
    opt.step(policy.params_mut())?;
    Ok(loss)
}

/// Epoch summary appended to the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub loss_c: f64,
    pub grad_norm_policy: f64,
    pub grad_norm_encoder: f64,
    pub grad_norm_z: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Runs `groups_per_epoch` batch groups of phase A, then B, then C, and
/// averages their losses and gradient norms.
pub fn train_epoch<S: Real>(
    state: &mut TrainState<S>,
    model: &mut ContextFormer<S>,
    sampler: &WindowSampler,
) -> Result<EpochMetrics> {
    let start = Instant::now();
    let n = state.config.batch_size;
    let groups = state.config.groups_per_epoch;
    let mut sums = [0.0; 6];
    for _ in 0..groups {
        let mixed = sampler.mixture_batch(&mut state.rng, n, state.config.expert_fraction);
        let expert = sampler.expert_batch(&mut state.rng, n);
        let suboptimal = sampler.suboptimal_batch(&mut state.rng, n);
        let a = phase_a_step(state, model, &mixed)?;
        let b = phase_b_step(state, model, &expert, &suboptimal)?;
        let c = phase_c_step(state, model, &expert, &suboptimal)?;
        for (s, v) in sums.iter_mut().zip([
            a.loss,
            b.loss,
            c.loss,
            a.grad_norm_policy,
            (a.grad_norm_encoder + b.grad_norm_encoder) / 2.0,
            c.grad_norm_z,
        ]) {
            *s += v;
        }
    }
    state.epoch += 1;
    let m = |i: usize| sums[i] / groups as f64;
    Ok(EpochMetrics {
        epoch: state.epoch,
        loss_a: m(0),
        loss_b: m(1),
        loss_c: m(2),
        grad_norm_policy: m(3),
        grad_norm_encoder: m(4),
        grad_norm_z: m(5),
        lr: state.policy_opt.current_lr(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn write_metrics_line(path: impl AsRef<Path>, metrics: &EpochMetrics) -> Result<()> {
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(file, "{}", serde_json::to_string(metrics)?)?;
    Ok(())
}
