//! Rollout evaluation, normalized scoring, the zero-token control and the
//! stitching experiment.

mod stitch;

pub use stitch::{
    bc_control, demo_sweep, run_stitching, stitching_experiment, train_contextformer, ExperimentConfig, StitchReport,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::NormalizationStats;
use crate::envs::{EnvAction, EnvKind, Environment, GridWorld};
use crate::error::{ensure, Result};
use crate::models::{greedy_action, Fragment, PolicyModel};
use crate::tensor::Real;

/// Chooses actions from the episode so far. `history` holds raw observations
/// with the current one last; its final action slot is a placeholder.
pub trait Agent {
    fn act(&mut self, env: &dyn Environment, history: &Fragment) -> Result<EnvAction>;
}

/// The scripted shortest-route controller.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScriptedExpert;

impl Agent for ScriptedExpert {
    fn act(&mut self, env: &dyn Environment, _history: &Fragment) -> Result<EnvAction> {
        Ok(env.expert_action())
    }
}

/// Uniformly random actions.
#[derive(Clone, Debug)]
pub struct RandomAgent {
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Agent for RandomAgent {
    fn act(&mut self, env: &dyn Environment, _history: &Fragment) -> Result<EnvAction> {
        Ok(env.spec().action_space.sample(&mut self.rng))
    }
}

/// A policy conditioned on a fixed latent, acting greedily on the last `k`
/// normalized steps.
#[derive(Clone, Debug)]
pub struct PolicyAgent<'a, S> {
    pub policy: &'a PolicyModel<S>,
    pub z: Vec<f64>,
    pub stats: &'a NormalizationStats,
}

impl<S: Real> Agent for PolicyAgent<'_, S> {
    fn act(&mut self, env: &dyn Environment, history: &Fragment) -> Result<EnvAction> {
        let window = history.last(self.policy.config().context);
        let normalized = Fragment::new(
            window.observations.iter().map(|o| self.stats.apply(o)).collect(),
            window.actions,
            window.action_masked,
        )?;
        greedy_action(self.policy, &self.z, &normalized, &env.spec().action_space)
    }
}

/// Returns of a random and of the scripted expert policy, the anchors of the
/// normalized score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReference {
    pub random_return: f64,
    pub expert_return: f64,
}

impl ScoreReference {
    /// Exact expectations for the grid worlds; Monte Carlo estimates over
    /// `episodes` rollouts for the point mass.
    pub fn measure(kind: EnvKind, episodes: usize, seed: u64) -> Result<Self> {
        match kind {
            EnvKind::ChainStitch => Ok(grid_reference(&GridWorld::chain_stitch())),
            EnvKind::FourRooms => Ok(grid_reference(&GridWorld::four_rooms())),
            EnvKind::PointMass => {
                let mut env = kind.make();
                let placeholder = Self { random_return: 0.0, expert_return: 1.0 };
                let random = rollout_eval(&mut RandomAgent::new(seed), env.as_mut(), episodes, seed, &placeholder)?;
                let expert = rollout_eval(&mut ScriptedExpert, env.as_mut(), episodes, seed, &placeholder)?;
                Ok(Self { random_return: random.mean_return, expert_return: expert.mean_return })
            }
        }
    }
}

/// Success probabilities by forward propagation of the state distribution;
/// rewards are one on reaching the goal and zero otherwise.
fn grid_reference(env: &GridWorld) -> ScoreReference {
    let (rows, cols) = env.dims();
    let goal = env.goal();
    let idx = |c: (usize, usize)| c.0 * cols + c.1;
    let starts = env.start_region();
    let start_cells: Vec<(usize, usize)> =
        env.open_cells().into_iter().filter(|&c| starts.contains(&env.cell_to_state(c))).collect();
    let n = env.num_actions();
    let horizon = env.spec().horizon;

    let mut mass = vec![0.0; rows * cols];
    let mut random_return = 0.0;
    for &c in &start_cells {
        mass[idx(c)] += 1.0 / start_cells.len() as f64;
    }
    for _ in 0..horizon {
        let mut next = vec![0.0; rows * cols];
        for cell in env.open_cells() {
            let p = mass[idx(cell)];
            if p == 0.0 {
                continue;
            }
            if cell == goal {
                random_return += p;
                continue;
            }
            for a in 0..n {
                let to = env.transition(cell, a);
                if to == goal {
                    random_return += p / n as f64;
                } else {
                    next[idx(to)] += p / n as f64;
                }
            }
        }
        mass = next;
    }

    let expert_hits = start_cells
        .iter()
        .filter(|&&c| {
            let d = env.distances_to(goal)[idx(c)];
            d <= horizon
        })
        .count();
    ScoreReference { random_return, expert_return: expert_hits as f64 / start_cells.len() as f64 }
}

/// `100 * (raw - random) / (expert - random)`.
pub fn normalized_score(raw: f64, reference: &ScoreReference) -> Result<f64> {
    let span = reference.expert_return - reference.random_return;
    ensure!(span > 1e-12 && span.is_finite(), "degenerate score references {reference:?}");
    Ok(100.0 * (raw - reference.random_return) / span)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: String,
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub normalized_score: f64,
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
    pub seed: u64,
    pub context: Option<usize>,
}

/// Runs `episodes` episodes, each until the environment reports done (at the
/// goal or at the horizon), and aggregates returns.
pub fn rollout_eval(
    agent: &mut dyn Agent,
    env: &mut dyn Environment,
    episodes: usize,
    seed: u64,
    reference: &ScoreReference,
) -> Result<EvalReport> {
    ensure!(episodes >= 1, "evaluation needs at least one episode");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = env.spec().action_space.clone();
    let horizon = env.spec().horizon;
    let mut returns = Vec::with_capacity(episodes);
    let mut lengths = Vec::with_capacity(episodes);
    let mut successes = 0;
    for _ in 0..episodes {
        let obs = env.reset(&mut rng);
        let mut history = Fragment::new(vec![obs], vec![vec![0.0; space.dim()]], vec![false])?;
        let (mut total, mut t, mut done, mut reached) = (0.0, 0, false, false);
        while t < horizon && !done {
            let action = agent.act(&*env, &history)?;
            let out = env.step(&action)?;
            *history.actions.last_mut().expect("non-empty") = space.encode(&action)?;
            total += out.reward;
            reached |= out.reached_goal;
            done = out.done;
            t += 1;
            if !done {
                history.observations.push(out.observation);
                history.actions.push(vec![0.0; space.dim()]);
                history.action_masked.push(false);
            }
        }
        returns.push(total);
        lengths.push(t);
        successes += reached as usize;
    }
    let mean_return = returns.iter().sum::<f64>() / episodes as f64;
    Ok(EvalReport {
        env: env.spec().name.clone(),
        episodes,
        mean_return,
        success_rate: successes as f64 / episodes as f64,
        normalized_score: normalized_score(mean_return, reference)?,
        returns,
        lengths,
        seed,
        context: None,
    })
}
