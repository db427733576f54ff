use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{normal_tensor, Block, LayerNorm, Linear};
use super::{segments, Fragment};
use crate::envs::{ActionSpace, EnvAction};
use crate::error::{ensure, Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Graph, ParamId, ParamSet, Real, Var};

/// Architecture of the causal policy. Defaults: 3 layers, 2 heads, width 64,
/// 16-dimensional latent, dropout 0.1, 20-step context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub z_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub context: usize,
}

impl PolicyConfig {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self { obs_dim, act_dim, z_dim: 16, hidden: 64, layers: 3, heads: 2, dropout: 0.1, context: 20 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.obs_dim > 0 && self.act_dim > 0 && self.z_dim > 0, "policy dimensions must be positive");
        ensure!(self.layers > 0 && self.context > 0, "policy needs at least one layer and a positive context");
        ensure!(
            self.heads > 0 && self.hidden.is_multiple_of(self.heads),
            "hidden width {} is not divisible by {} heads",
            self.hidden,
            self.heads
        );
        ensure!((0.0..1.0).contains(&self.dropout), "dropout {} outside [0, 1)", self.dropout);
        Ok(())
    }
}

/// Tokens per step in the policy's input stream: `z, s, z, a`.
const TOKENS_PER_STEP: usize = 4;

/// Latent-conditioned causal transformer.
///
/// A fragment of `L <= context` steps becomes the token stream
/// `z, s_0, z, a_0, ..., z, s_{L-1}, z, a_{L-1}`. The action for step `i` is
/// read from the output at `s_i`, so under the causal mask it can depend on
/// `z`, every earlier step, and `s_i`, but never on `a_i` or anything later.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel<S> {
    config: PolicyConfig,
    params: ParamSet<S>,
    embed_z: Linear,
    embed_obs: Linear,
    embed_act: Linear,
    position: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    head: Linear,
}

impl<S: Real> PolicyModel<S> {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = config.hidden;
        let embed_z = Linear::new(&mut params, "embed_z", config.z_dim, h, &mut rng);
        let embed_obs = Linear::new(&mut params, "embed_obs", config.obs_dim, h, &mut rng);
        let embed_act = Linear::new(&mut params, "embed_act", config.act_dim, h, &mut rng);
        let position = params.push("position", normal_tensor(&[config.context, h], &mut rng));
        let blocks = (0..config.layers).map(|i| Block::new(&mut params, &format!("block{i}"), h, &mut rng)).collect();
        let ln_final = LayerNorm::new(&mut params, "ln_final", h);
        let head = Linear::new(&mut params, "head", h, config.act_dim, &mut rng);
        Ok(Self { config, params, embed_z, embed_obs, embed_act, position, blocks, ln_final, head })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Records the forward pass on `g`.
    ///
    /// `z` is `fragments.len() x z_dim`, one conditioning row per fragment. The
    /// result stacks one predicted action per step of every fragment.
    pub fn forward(&self, g: &mut Graph<S>, z: Var, fragments: &[Fragment]) -> Result<Var> {
        let c = &self.config;
        ensure!(!fragments.is_empty(), "policy forward on an empty batch");
        ensure!(
            g.shape(z) == (fragments.len(), c.z_dim),
            "conditioning is {:?}, expected {}x{}",
            g.shape(z),
            fragments.len(),
            c.z_dim
        );
        for f in fragments {
            f.check_dims(c.obs_dim, c.act_dim)?;
            ensure!(f.len() <= c.context, "fragment of {} steps exceeds the context of {}", f.len(), c.context);
        }
        let steps: usize = fragments.iter().map(Fragment::len).sum();
        let batch = fragments.len();

        let mut obs = Vec::with_capacity(steps * c.obs_dim);
        let mut act = Vec::with_capacity(steps * c.act_dim);
        for f in fragments {
            for i in 0..f.len() {
                obs.extend(f.observations[i].iter().map(|&v| S::of(v)));
                act.extend(f.visible_action(i).map(S::of));
            }
        }
        let obs = g.input_matrix(steps, c.obs_dim, obs)?;
        let act = g.input_matrix(steps, c.act_dim, act)?;
        let z_emb = self.embed_z.forward(g, &self.params, z)?;
        let s_emb = self.embed_obs.forward(g, &self.params, obs)?;
        let a_emb = self.embed_act.forward(g, &self.params, act)?;
        let all = g.concat_rows(&[z_emb, s_emb, a_emb])?;

        // Interleave into z, s, z, a per step.
        let mut token_rows = Vec::with_capacity(steps * TOKENS_PER_STEP);
        let mut positions = Vec::with_capacity(steps * TOKENS_PER_STEP);
        let mut readout = Vec::with_capacity(steps);
        let mut offset = 0;
        for (b, f) in fragments.iter().enumerate() {
            for i in 0..f.len() {
                let step = offset + i;
                readout.push(token_rows.len() + 1);
                token_rows.extend([b, batch + step, b, batch + steps + step]);
                positions.extend([i; TOKENS_PER_STEP]);
            }
            offset += f.len();
        }
        let tokens = g.gather_rows(all, &token_rows)?;
        let table = g.param(&self.params, self.position)?;
        let pos = g.embedding(table, &positions)?;
        let x = g.add(tokens, pos)?;
        let mut x = g.dropout(x, c.dropout)?;
        let segs = segments(fragments, TOKENS_PER_STEP);
        for block in &self.blocks {
            x = block.forward(g, &self.params, x, &segs, c.heads, true, c.dropout)?;
        }
        let x = self.ln_final.forward(g, &self.params, x)?;
        let at_obs = g.gather_rows(x, &readout)?;
        self.head.forward(g, &self.params, at_obs)
    }

    /// Eval-mode prediction for one fragment conditioned on `z`.
    pub fn predict(&self, z: &[f64], fragment: &Fragment) -> Result<Vec<Vec<f64>>> {
        ensure!(
            z.len() == self.config.z_dim,
            "latent of dimension {} given to a {}-dim policy",
            z.len(),
            self.config.z_dim
        );
        let mut g = Graph::eval();
        let zv = g.input_matrix(1, z.len(), z.iter().map(|&v| S::of(v)).collect())?;
        let out = self.forward(&mut g, zv, std::slice::from_ref(fragment))?;
        Ok(g.value(out).chunks(self.config.act_dim).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        let mut ckpt = Checkpoint::new(serde_json::json!({ "policy": self.config }));
        ckpt.add_params("policy.", &self.params);
        ckpt
    }

    /// Rebuilds a policy from a checkpoint, refusing a config mismatch.
    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self> {
        let config: PolicyConfig = serde_json::from_value(
            ckpt.config
                .get("policy")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint has no policy config".into()))?,
        )
        .map_err(|e| Error::Format(format!("policy config in checkpoint is invalid: {e}")))?;
        let mut model = Self::new(config, 0)?;
        ckpt.restore_params("policy.", &mut model.params)?;
        Ok(model)
    }
}

/// Turns the last predicted action of `window` into an environment action:
/// the argmax for discrete spaces, the clipped vector for boxes.
pub fn greedy_action<S: Real>(
    model: &PolicyModel<S>,
    z: &[f64],
    window: &Fragment,
    space: &ActionSpace,
) -> Result<EnvAction> {
    ensure!(
        space.dim() == model.config().act_dim,
        "action space of width {} for a policy of width {}",
        space.dim(),
        model.config().act_dim
    );
    let window = window.last(model.config().context);
    let predicted = model.predict(z, &window)?;
    let last = predicted.last().expect("non-empty fragment");
    Ok(space.decode(last))
}
