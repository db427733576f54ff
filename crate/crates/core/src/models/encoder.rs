use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{normal_tensor, Block, LayerNorm, Linear};
use super::{segments, Fragment};
use crate::error::{ensure, Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Graph, ParamId, ParamSet, Real, Var};

/// Outputs are squashed by `tanh` and then scaled by this factor so they stay
/// strictly inside the open unit box even where `tanh` rounds to one.
const SQUASH: f64 = 1.0 - 1e-6;

/// Architecture of the hindsight encoder. Defaults: 3 layers, 8 heads, width
/// 64, 16-dimensional output, dropout 0.1, fragments up to 20 steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub z_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self { obs_dim, act_dim, z_dim: 16, hidden: 64, layers: 3, heads: 8, dropout: 0.1, max_len: 20 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.obs_dim > 0 && self.act_dim > 0 && self.z_dim > 0, "encoder dimensions must be positive");
        ensure!(self.layers > 0 && self.max_len > 0, "encoder needs at least one layer and a positive length");
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

/// Bidirectional transformer summarizing a fragment into a point of
/// `(-1, 1)^z_dim`.
///
/// Each step is one token built from the observation, the action (zeroed when
/// masked) and the mask flag. Token states of the last layer are averaged per
/// fragment and projected through `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel<S> {
    config: EncoderConfig,
    params: ParamSet<S>,
    embed: Linear,
    position: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    out: Linear,
}

impl<S: Real> EncoderModel<S> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = config.hidden;
        let embed = Linear::new(&mut params, "embed", config.obs_dim + config.act_dim + 1, h, &mut rng);
        let position = params.push("position", normal_tensor(&[config.max_len, h], &mut rng));
        let blocks = (0..config.layers).map(|i| Block::new(&mut params, &format!("block{i}"), h, &mut rng)).collect();
        let ln_final = LayerNorm::new(&mut params, "ln_final", h);
        let out = Linear::new(&mut params, "out", h, config.z_dim, &mut rng);
        Ok(Self { config, params, embed, position, blocks, ln_final, out })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Records the forward pass; the result is `fragments.len() x z_dim`.
    pub fn forward(&self, g: &mut Graph<S>, fragments: &[Fragment]) -> Result<Var> {
        let c = &self.config;
        ensure!(!fragments.is_empty(), "encoder forward on an empty batch");
        for f in fragments {
            f.check_dims(c.obs_dim, c.act_dim)?;
            ensure!(f.len() <= c.max_len, "fragment of {} steps exceeds the encoder length {}", f.len(), c.max_len);
        }
        let steps: usize = fragments.iter().map(Fragment::len).sum();
        let width = c.obs_dim + c.act_dim + 1;
        let mut input = Vec::with_capacity(steps * width);
        let mut positions = Vec::with_capacity(steps);
        for f in fragments {
            for i in 0..f.len() {
                input.extend(f.observations[i].iter().map(|&v| S::of(v)));
                input.extend(f.visible_action(i).map(S::of));
                input.push(if f.action_masked[i] { S::one() } else { S::zero() });
                positions.push(i);
            }
        }
        let input = g.input_matrix(steps, width, input)?;
        let x = self.embed.forward(g, &self.params, input)?;
        let table = g.param(&self.params, self.position)?;
        let pos = g.embedding(table, &positions)?;
        let x = g.add(x, pos)?;
        let mut x = g.dropout(x, c.dropout)?;
        let segs = segments(fragments, 1);
        for block in &self.blocks {
            x = block.forward(g, &self.params, x, &segs, c.heads, false, c.dropout)?;
        }
        let x = self.ln_final.forward(g, &self.params, x)?;

        let mut pool = vec![S::zero(); fragments.len() * steps];
        for (b, &(start, len)) in segs.iter().enumerate() {
            let w = S::one() / S::from_usize(len);
            pool[b * steps + start..b * steps + start + len].iter_mut().for_each(|p| *p = w);
        }
        let pool = g.input_matrix(fragments.len(), steps, pool)?;
        let pooled = g.matmul(pool, x)?;
        let z = self.out.forward(g, &self.params, pooled)?;
        let z = g.tanh(z)?;
        g.scale(z, S::of(SQUASH))
    }

    /// Eval-mode embedding of one fragment.
    pub fn encode(&self, fragment: &Fragment) -> Result<Vec<f64>> {
        Ok(self.encode_batch(std::slice::from_ref(fragment))?.remove(0))
    }

    pub fn encode_batch(&self, fragments: &[Fragment]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::eval();
        let z = self.forward(&mut g, fragments)?;
        Ok(g.value(z).chunks(self.config.z_dim).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        let mut ckpt = Checkpoint::new(serde_json::json!({ "encoder": self.config }));
        ckpt.add_params("encoder.", &self.params);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self> {
        let config: EncoderConfig = serde_json::from_value(
            ckpt.config
                .get("encoder")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint has no encoder config".into()))?,
        )
        .map_err(|e| Error::Format(format!("encoder config in checkpoint is invalid: {e}")))?;
        let mut model = Self::new(config, 0)?;
        ckpt.restore_params("encoder.", &mut model.params)?;
        Ok(model)
    }
}
