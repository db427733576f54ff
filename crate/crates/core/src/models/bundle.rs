use std::path::Path;

use super::{EncoderConfig, EncoderModel, LatentEmbedding, PolicyConfig, PolicyModel};
use crate::error::{ensure, Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::Real;

/// Policy, encoder and contextual embedding trained together.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFormer<S> {
    pub policy: PolicyModel<S>,
    pub encoder: EncoderModel<S>,
    pub latent: LatentEmbedding<S>,
}

impl<S: Real> ContextFormer<S> {
    pub fn new(policy: PolicyConfig, encoder: EncoderConfig, seed: u64) -> Result<Self> {
        ensure!(
            policy.z_dim == encoder.z_dim,
            "policy latent width {} differs from the encoder output width {}",
            policy.z_dim,
            encoder.z_dim
        );
        ensure!(
            policy.obs_dim == encoder.obs_dim && policy.act_dim == encoder.act_dim,
            "policy and encoder disagree on observation or action width"
        );
        let z_dim = policy.z_dim;
        Ok(Self {
            policy: PolicyModel::new(policy, seed)?,
            encoder: EncoderModel::new(encoder, seed.wrapping_add(0x9e37_79b9))?,
            latent: LatentEmbedding::random(z_dim, seed.wrapping_add(0x7f4a_7c15))?,
        })
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint<S> {
        let mut ckpt = Checkpoint::new(serde_json::json!({
            "policy": self.policy.config(),
            "encoder": self.encoder.config(),
            "extra": extra,
        }));
        ckpt.add_params("policy.", self.policy.params());
        ckpt.add_params("encoder.", self.encoder.params());
        self.latent.add_to_checkpoint(&mut ckpt);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self> {
        let model = Self {
            policy: PolicyModel::from_checkpoint(ckpt)?,
            encoder: EncoderModel::from_checkpoint(ckpt)?,
            latent: LatentEmbedding::from_checkpoint(ckpt)?,
        };
        if model.latent.dim() != model.policy.config().z_dim {
            return Err(Error::Format("stored latent width differs from the policy's".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let ckpt = Checkpoint::load(path)?;
        let extra = ckpt.config.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((Self::from_checkpoint(&ckpt)?, extra))
    }
}
