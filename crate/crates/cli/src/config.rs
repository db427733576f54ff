use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use stitchformer::envs::EnvKind;
use stitchformer::eval::ExperimentConfig;
use stitchformer::tensor::{NormKind, Precision};

pub const SEED_VAR: &str = "STITCHFORMER_SEED";

/// Whether expert demonstrations keep their actions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    #[default]
    Lfd,
    Lfo,
}

/// A configuration problem the user has to fix. Reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

macro_rules! usage {
    ($($arg:tt)*) => {
        anyhow::Error::new($crate::config::UsageError(format!($($arg)*)))
    };
}
pub(crate) use usage;

/// Settings shared by every subcommand. Each one can come from a flag or
/// from a key of the same name (with underscores) in the `--config` file;
/// flags win.
#[derive(Args, Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// TOML file of `key = value` settings.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// chain-stitch, four-rooms or point-mass.
    #[arg(long)]
    pub env: Option<EnvKind>,
    /// Dataset file to read, or to write for gen-data.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Model checkpoint to evaluate; defaults to model.ckpt in the output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Metrics or report file for export-metrics.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Directory receiving every artifact of the run.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub demos: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<Conditioning>,
    #[arg(long)]
    pub suboptimal_episodes: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda2: Option<f64>,
    /// l1 or l2.
    #[arg(long)]
    pub norm: Option<NormKind>,
    /// Cap on repulsion distances.
    #[arg(long, allow_negative_numbers = true)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub z_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub policy_heads: Option<usize>,
    #[arg(long)]
    pub encoder_heads: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub dropout: Option<f64>,
    /// Window length k.
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub groups_per_epoch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Policy and encoder learning rate.
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    /// Linear warmup length in optimizer steps.
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub weight_decay: Option<f64>,
    /// Learning rate of the contextual embedding.
    #[arg(long, allow_negative_numbers = true)]
    pub latent_lr: Option<f64>,
    /// Gradient norm cap per network; 0 turns clipping off.
    #[arg(long, allow_negative_numbers = true)]
    pub grad_clip: Option<f64>,
    /// Share of phase-A windows drawn from demonstrations; negative means
    /// proportional to split sizes.
    #[arg(long, allow_negative_numbers = true)]
    pub expert_fraction: Option<f64>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub reference_episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Worker cap.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Random problems checked by verify-theorem.
    #[arg(long)]
    pub instances: Option<usize>,
    /// Demonstration counts for a stitch-exp sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<usize>>,
}

impl Settings {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| usage!("config {}: {}", path.display(), e.message()))
    }

    /// Fills every unset field of `self` from `lower`.
    pub fn or(self, lower: Settings) -> Settings {
        macro_rules! pick {
            ($($f:ident),*) => { Settings { config: self.config, $($f: self.$f.or(lower.$f)),* } };
        }
        pick!(
            env,
            dataset,
            checkpoint,
            input,
            output,
            demos,
            mode,
            suboptimal_episodes,
            lambda1,
            lambda2,
            norm,
            clip,
            z_dim,
            hidden,
            layers,
            policy_heads,
            encoder_heads,
            dropout,
            context,
            batch_size,
            groups_per_epoch,
            epochs,
            lr,
            warmup,
            weight_decay,
            latent_lr,
            grad_clip,
            expert_fraction,
            eval_episodes,
            reference_episodes,
            seed,
            precision,
            threads,
            instances,
            sweep
        )
    }
}

/// Fully resolved settings of one run. Written to `config.toml` in the
/// output directory, where `--config` can read it back.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(skip)]
    pub command: String,
    pub env: EnvKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    pub demos: usize,
    pub mode: Conditioning,
    pub suboptimal_episodes: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub norm: NormKind,
    pub clip: f64,
    pub z_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub policy_heads: usize,
    pub encoder_heads: usize,
    pub dropout: f64,
    pub context: usize,
    pub batch_size: usize,
    pub groups_per_epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub latent_lr: f64,
    pub grad_clip: f64,
    pub expert_fraction: f64,
    pub eval_episodes: usize,
    pub reference_episodes: usize,
    pub seed: u64,
    pub precision: Precision,
    pub threads: usize,
    pub instances: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<usize>>,
}

fn seed_from_env() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| usage!("{SEED_VAR}={v:?} is not an unsigned integer")),
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    /// Resolves flags over the config file over built-in defaults.
    /// `dataset_env` is the environment recorded in an input dataset, used
    /// when neither flags nor file name one.
    pub fn resolve(command: &str, flags: Settings, dataset_env: Option<EnvKind>) -> anyhow::Result<Self> {
        let file = match &flags.config {
            Some(path) => Settings::from_file(path)?,
            None => Settings::default(),
        };
        let s = flags.or(file);
        let env = s.env.or(dataset_env).unwrap_or(EnvKind::FourRooms);
        let base = ExperimentConfig::new(env);
        let t = &base.train;
        let cfg = Self {
            command: command.to_string(),
            env,
            dataset: s.dataset,
            checkpoint: s.checkpoint,
            input: s.input,
            output: s.output.unwrap_or_else(|| PathBuf::from("runs")),
            demos: s.demos.unwrap_or(base.demos),
            mode: s.mode.unwrap_or_default(),
            suboptimal_episodes: s.suboptimal_episodes.unwrap_or(base.suboptimal_episodes),
            lambda1: s.lambda1.unwrap_or(t.loss.lambda1),
            lambda2: s.lambda2.unwrap_or(t.loss.lambda2),
            norm: s.norm.unwrap_or(t.loss.norm),
            clip: s.clip.unwrap_or(t.loss.clip),
            z_dim: s.z_dim.unwrap_or(base.z_dim),
            hidden: s.hidden.unwrap_or(base.hidden),
            layers: s.layers.unwrap_or(base.layers),
            policy_heads: s.policy_heads.unwrap_or(base.policy_heads),
            encoder_heads: s.encoder_heads.unwrap_or(base.encoder_heads),
            dropout: s.dropout.unwrap_or(base.dropout),
            context: s.context.unwrap_or(t.context),
            batch_size: s.batch_size.unwrap_or(t.batch_size),
            groups_per_epoch: s.groups_per_epoch.unwrap_or(t.groups_per_epoch),
            epochs: s.epochs.unwrap_or(base.epochs),
            lr: s.lr.unwrap_or(t.policy_opt.lr),
            warmup: s.warmup.unwrap_or(t.policy_opt.warmup_steps),
            weight_decay: s.weight_decay.unwrap_or(t.policy_opt.weight_decay),
            latent_lr: s.latent_lr.unwrap_or(t.latent_opt.lr),
            grad_clip: s.grad_clip.unwrap_or(t.grad_clip.unwrap_or(0.0)),
            expert_fraction: s.expert_fraction.unwrap_or(t.expert_fraction.unwrap_or(-1.0)),
            eval_episodes: s.eval_episodes.unwrap_or(base.eval_episodes),
            reference_episodes: s.reference_episodes.unwrap_or(base.reference_episodes),
            seed: match s.seed {
                Some(seed) => seed,
                None => seed_from_env()?.unwrap_or(base.seed),
            },
            precision: s.precision.unwrap_or(base.precision),
            threads: s.threads.unwrap_or(1),
            instances: s.instances.unwrap_or(100),
            sweep: s.sweep,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.threads == 0 {
            bail!(usage!("threads must be at least 1"));
        }
        if self.instances == 0 {
            bail!(usage!("instances must be at least 1"));
        }
        if self.grad_clip < 0.0 || !self.grad_clip.is_finite() {
            bail!(usage!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        if self.expert_fraction > 1.0 || !self.expert_fraction.is_finite() {
            bail!(usage!("expert_fraction must be at most 1, got {}", self.expert_fraction));
        }
        if let Some(counts) = &self.sweep {
            if counts.is_empty() || counts.contains(&0) {
                bail!(usage!("sweep needs positive demonstration counts"));
            }
        }
        let exp = self.experiment();
        exp.validate().map_err(|e| usage!("{}", strip_kind(&e.to_string())))?;
        let (policy, encoder) = exp.model_configs(&self.env.make().spec().clone());
        policy.validate().map_err(|e| usage!("{}", strip_kind(&e.to_string())))?;
        encoder.validate().map_err(|e| usage!("{}", strip_kind(&e.to_string())))?;
        Ok(())
    }

    pub fn observation_only(&self) -> bool {
        self.mode == Conditioning::Lfo
    }

    pub fn experiment(&self) -> ExperimentConfig {
        let mut exp = ExperimentConfig::new(self.env);
        exp.demos = self.demos;
        exp.observation_only = self.observation_only();
        exp.suboptimal_episodes = self.suboptimal_episodes;
        exp.z_dim = self.z_dim;
        exp.hidden = self.hidden;
        exp.layers = self.layers;
        exp.policy_heads = self.policy_heads;
        exp.encoder_heads = self.encoder_heads;
        exp.dropout = self.dropout;
        exp.epochs = self.epochs;
        exp.eval_episodes = self.eval_episodes;
        exp.reference_episodes = self.reference_episodes;
        exp.precision = self.precision;
        exp.seed = self.seed;
        let t = &mut exp.train;
        t.batch_size = self.batch_size;
        t.context = self.context;
        t.groups_per_epoch = self.groups_per_epoch;
        t.loss.lambda1 = self.lambda1;
        t.loss.lambda2 = self.lambda2;
        t.loss.norm = self.norm;
        t.loss.clip = self.clip;
        for opt in [&mut t.policy_opt, &mut t.encoder_opt] {
            opt.lr = self.lr;
            opt.warmup_steps = self.warmup;
            opt.weight_decay = self.weight_decay;
        }
        t.latent_opt.lr = self.latent_lr;
        t.grad_clip = (self.grad_clip > 0.0).then_some(self.grad_clip);
        t.expert_fraction = (self.expert_fraction >= 0.0).then_some(self.expert_fraction);
        t.observation_only = self.observation_only();
        t.seed = self.seed;
        exp
    }

    pub fn echo(&self) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(&self.output).with_context(|| format!("creating {}", self.output.display()))?;
        let path = self.output.join("config.toml");
        std::fs::write(&path, toml::to_string(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }
}

fn strip_kind(message: &str) -> &str {
    message.strip_prefix("contract violation: ").unwrap_or(message)
}
