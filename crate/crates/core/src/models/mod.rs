//! The latent-conditioned causal policy, the bidirectional hindsight
//! encoder, and the learnable contextual embedding.

mod bundle;
mod encoder;
mod latent;
pub(crate) mod layers;
mod policy;

pub use bundle::ContextFormer;
pub use encoder::{EncoderConfig, EncoderModel};
pub use latent::LatentEmbedding;
pub use policy::{greedy_action, PolicyConfig, PolicyModel};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// A contiguous run of trajectory steps as the networks consume it:
/// observations are already normalized, masked actions carry no information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub action_masked: Vec<bool>,
}

impl Fragment {
    pub fn new(observations: Vec<Vec<f64>>, actions: Vec<Vec<f64>>, action_masked: Vec<bool>) -> Result<Self> {
        ensure!(
            observations.len() == actions.len() && actions.len() == action_masked.len(),
            "fragment columns disagree in length: {} observations, {} actions, {} mask flags",
            observations.len(),
            actions.len(),
            action_masked.len()
        );
        Ok(Self { observations, actions, action_masked })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// The last `k` steps.
    pub fn last(&self, k: usize) -> Fragment {
        let start = self.len().saturating_sub(k);
        Fragment {
            observations: self.observations[start..].to_vec(),
            actions: self.actions[start..].to_vec(),
            action_masked: self.action_masked[start..].to_vec(),
        }
    }

    /// Same fragment with every action hidden.
    pub fn observation_only(&self) -> Fragment {
        Fragment {
            observations: self.observations.clone(),
            actions: self.actions.iter().map(|a| vec![0.0; a.len()]).collect(),
            action_masked: vec![true; self.len()],
        }
    }

    pub(crate) fn check_dims(&self, obs_dim: usize, act_dim: usize) -> Result<()> {
        ensure!(!self.is_empty(), "empty fragment");
        ensure!(
            self.observations.iter().all(|o| o.len() == obs_dim),
            "fragment observation width differs from the model's {obs_dim}"
        );
        ensure!(
            self.actions.iter().all(|a| a.len() == act_dim),
            "fragment action width differs from the model's {act_dim}"
        );
        Ok(())
    }

    /// Action input for the networks: zeros where the action is masked.
    pub(crate) fn visible_action(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let masked = self.action_masked[i];
        self.actions[i].iter().map(move |&a| if masked { 0.0 } else { a })
    }
}

/// Row ranges of each fragment once their steps are stacked, scaled by the
/// number of tokens per step.
pub(crate) fn segments(fragments: &[Fragment], tokens_per_step: usize) -> Vec<(usize, usize)> {
    let mut offset = 0;
    fragments
        .iter()
        .map(|f| {
            let seg = (offset, f.len() * tokens_per_step);
            offset += seg.1;
            seg
        })
        .collect()
}
