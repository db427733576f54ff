//! The supervised policy loss, the contrastive contextual loss and the
//! three-phase training schedule.

mod train;

pub use train::{
    control_step, phase_a_step, phase_b_step, phase_c_step, train_epoch, write_metrics_line, EpochMetrics,
    PhaseOutcome, TrainConfig, TrainState, WindowSampler,
};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::models::{EncoderModel, Fragment, PolicyModel};
use crate::tensor::{Graph, NormKind, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Attraction weight.
    pub lambda1: f64,
    /// Repulsion weight.
    pub lambda2: f64,
    pub norm: NormKind,
    /// Repulsion distances are clipped at this value before weighting.
    pub clip: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.5, norm: NormKind::L2, clip: 10.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda1 > 0.0 && self.lambda1.is_finite(), "lambda1 must be positive, got {}", self.lambda1);
        ensure!(self.lambda2 >= 0.0 && self.lambda2.is_finite(), "lambda2 must be non-negative, got {}", self.lambda2);
        ensure!(self.clip > 0.0 && self.clip.is_finite(), "repulsion clip must be positive, got {}", self.clip);
        Ok(())
    }
}

/// Which part of a fragment the encoder may look at.
pub fn encoder_view(fragments: &[Fragment], observation_only: bool) -> Vec<Fragment> {
    if observation_only {
        fragments.iter().map(Fragment::observation_only).collect()
    } else {
        fragments.to_vec()
    }
}

/// Mean norm between the policy's predictions and the recorded actions over
/// every labelled step of `windows`. Each window is conditioned on the
/// encoder's summary of itself.
pub fn policy_loss<S: Real>(
    g: &mut Graph<S>,
    policy: &PolicyModel<S>,
    encoder: &EncoderModel<S>,
    windows: &[Fragment],
    observation_only: bool,
    norm: NormKind,
) -> Result<Var> {
    ensure!(!windows.is_empty(), "policy loss on an empty batch");
    let z = encoder.forward(g, &encoder_view(windows, observation_only))?;
    let pred = policy.forward(g, z, windows)?;
    conditioned_policy_loss(g, pred, windows, norm)
}

/// The same loss for predictions already on the tape.
pub(crate) fn conditioned_policy_loss<S: Real>(
    g: &mut Graph<S>,
    pred: Var,
    windows: &[Fragment],
    norm: NormKind,
) -> Result<Var> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut row = 0;
    for w in windows {
        for i in 0..w.len() {
            if !w.action_masked[i] {
                rows.push(row);
                targets.extend(w.actions[i].iter().map(|&a| S::of(a)));
            }
            row += 1;
        }
    }
    ensure!(!rows.is_empty(), "policy loss batch has no labelled actions");
    let act_dim = g.shape(pred).1;
    let labelled = g.gather_rows(pred, &rows)?;
    let targets = g.input_matrix(rows.len(), act_dim, targets)?;
    let diff = g.sub(labelled, targets)?;
    let norms = g.row_norm(diff, norm)?;
    g.mean(norms)
}

/// `lambda1 * mean ||z* - I(expert)|| - lambda2 * mean min(||z* - I(subopt)||, clip)`
/// with the encoder outputs given as `B x d` rows and `z_star` as `1 x d`.
pub fn contextual_loss_from_embeddings<S: Real>(
    g: &mut Graph<S>,
    z_star: Var,
    expert: Var,
    suboptimal: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (be, d) = g.shape(expert);
    let (bs, d2) = g.shape(suboptimal);
    ensure!(g.shape(z_star) == (1, d) && d == d2, "contextual loss widths disagree");
    let ze = g.gather_rows(z_star, &vec![0; be])?;
    let zs = g.gather_rows(z_star, &vec![0; bs])?;
    let de = g.sub(ze, expert)?;
    let de = g.row_norm(de, cfg.norm)?;
    let attract = g.mean(de)?;
    let ds = g.sub(zs, suboptimal)?;
    let ds = g.row_norm(ds, cfg.norm)?;
    let ds = g.clamp_max(ds, S::of(cfg.clip))?;
    let repel = g.mean(ds)?;
    let attract = g.scale(attract, S::of(cfg.lambda1))?;
    let repel = g.scale(repel, S::of(cfg.lambda2))?;
    g.sub(attract, repel)
}

/// Contextual loss of `z_star` against encoder summaries of expert and
/// sub-optimal fragments.
pub fn contextual_loss<S: Real>(
    g: &mut Graph<S>,
    z_star: Var,
    encoder: &EncoderModel<S>,
    expert: &[Fragment],
    suboptimal: &[Fragment],
    observation_only: bool,
    cfg: &LossConfig,
) -> Result<Var> {
    ensure!(!expert.is_empty() && !suboptimal.is_empty(), "contextual loss needs both batches non-empty");
    let e = encoder.forward(g, &encoder_view(expert, observation_only))?;
    let s = encoder.forward(g, &encoder_view(suboptimal, observation_only))?;
    contextual_loss_from_embeddings(g, z_star, e, s, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
        let mut g = Graph::eval();
        let v = f(&mut g);
        g.scalar(v)
    }

    #[test]
    fn three_four_five() {
        let w = Fragment::new(vec![vec![0.0]], vec![vec![3.0, 4.0]], vec![false]).unwrap();
        let loss = value(|g| {
            let pred = g.input_matrix(1, 2, vec![0.0, 0.0]).unwrap();
            conditioned_policy_loss(g, pred, &[w], NormKind::L2).unwrap()
        });
        assert_eq!(loss, 5.0);
    }

    #[test]
    fn attraction_minus_repulsion() {
        let cfg = LossConfig { lambda1: 1.0, lambda2: 1.0, ..Default::default() };
        let loss = value(|g| {
            let z = g.input_matrix(1, 2, vec![0.0, 0.0]).unwrap();
            let e = g.input_matrix(1, 2, vec![2.0, 0.0]).unwrap();
            let s = g.input_matrix(1, 2, vec![3.0, 4.0]).unwrap();
            contextual_loss_from_embeddings(g, z, e, s, &cfg).unwrap()
        });
        assert_eq!(loss, -3.0);
    }

    #[test]
    fn coincident_embeddings_give_zero() {
        let loss = value(|g| {
            let z = g.input_matrix(1, 2, vec![0.3, -0.2]).unwrap();
            let e = g.input_matrix(2, 2, vec![0.3, -0.2, 0.3, -0.2]).unwrap();
            let s = g.input_matrix(1, 2, vec![0.3, -0.2]).unwrap();
            contextual_loss_from_embeddings(g, z, e, s, &LossConfig::default()).unwrap()
        });
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn invalid_weights_are_rejected() {
        assert!(LossConfig { lambda1: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda2: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { clip: 0.0, ..Default::default() }.validate().is_err());
    }
}
