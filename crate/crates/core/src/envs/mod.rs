//! Deterministic toy environments whose optimal behavior needs stitching.
//!
//! Rewards are returned by [`Environment::step`] for scoring only; training
//! code strips them from trajectories before the learner sees anything.

mod grid;
mod point_mass;

pub use grid::GridWorld;
pub use point_mass::PointMass;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    ChainStitch,
    FourRooms,
    PointMass,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::ChainStitch, EnvKind::FourRooms, EnvKind::PointMass];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::ChainStitch => "chain-stitch",
            EnvKind::FourRooms => "four-rooms",
            EnvKind::PointMass => "point-mass",
        }
    }

    pub fn make(self) -> Box<dyn Environment> {
        match self {
            EnvKind::ChainStitch => Box::new(GridWorld::chain_stitch()),
            EnvKind::FourRooms => Box::new(GridWorld::four_rooms()),
            EnvKind::PointMass => Box::new(PointMass::corridor()),
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown environment {s:?} (expected chain-stitch, four-rooms or point-mass)"))
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How actions are represented to the networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActionSpace {
    /// `n` choices, encoded one-hot.
    Discrete { n: usize },
    /// A box `[low, high]^dim`.
    Box { dim: usize, low: f64, high: f64 },
}

impl ActionSpace {
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Discrete { n } => *n,
            ActionSpace::Box { dim, .. } => *dim,
        }
    }

    /// Network output to environment action: argmax, or clip to the box.
    pub fn decode(&self, predicted: &[f64]) -> EnvAction {
        match self {
            ActionSpace::Discrete { .. } => {
                let best =
                    predicted
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
                EnvAction::Discrete(best.0)
            }
            ActionSpace::Box { low, high, .. } => {
                EnvAction::Continuous(predicted.iter().map(|v| v.clamp(*low, *high)).collect())
            }
        }
    }

    /// Environment action to the vector the networks regress onto.
    pub fn encode(&self, action: &EnvAction) -> Result<Vec<f64>> {
        match (self, action) {
            (ActionSpace::Discrete { n }, EnvAction::Discrete(i)) if i < n => {
                let mut v = vec![0.0; *n];
                v[*i] = 1.0;
                Ok(v)
            }
            (ActionSpace::Box { dim, .. }, EnvAction::Continuous(v)) if v.len() == *dim => Ok(v.clone()),
            _ => Err(contract!("action {action:?} does not belong to {self:?}")),
        }
    }

    /// Uniformly random action.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> EnvAction {
        match self {
            ActionSpace::Discrete { n } => EnvAction::Discrete(rng.random_range(0..*n)),
            ActionSpace::Box { dim, low, high } => {
                EnvAction::Continuous((0..*dim).map(|_| rng.random_range(*low..=*high)).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnvAction {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// Static description of an environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub kind: EnvKind,
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    /// Episodes end after this many steps at the latest.
    pub horizon: usize,
    pub goal: String,
    pub reward: String,
}

impl EnvSpec {
    pub fn act_dim(&self) -> usize {
        self.action_space.dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub done: bool,
    pub reward: f64,
    pub reached_goal: bool,
}

/// A set of states: explicit points (grid cells) or an axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Points(Vec<Vec<f64>>),
    Rect { lo: Vec<f64>, hi: Vec<f64> },
}

impl Region {
    pub fn contains(&self, state: &[f64]) -> bool {
        match self {
            Region::Points(points) => points.iter().any(|p| p.as_slice() == state),
            Region::Rect { lo, hi } => state.iter().zip(lo.iter().zip(hi)).all(|(&s, (&l, &h))| l <= s && s <= h),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Region::Points(points) => points[rng.random_range(0..points.len())].clone(),
            Region::Rect { lo, hi } => lo.iter().zip(hi).map(|(&l, &h)| rng.random_range(l..=h)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Region::Points(points) => points.is_empty(),
            Region::Rect { lo, hi } => lo.is_empty() || lo.iter().zip(hi).any(|(l, h)| l > h),
        }
    }
}

/// A resettable, deterministic environment.
pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts an episode from a state drawn from the start region.
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;

    /// Starts an episode from a given state.
    fn reset_to(&mut self, state: &[f64]) -> Result<Vec<f64>>;

    /// Advances one step. Stepping after `done` is a contract violation.
    fn step(&mut self, action: &EnvAction) -> Result<StepOutcome>;

    fn state(&self) -> Vec<f64>;

    fn start_region(&self) -> Region;

    fn is_goal(&self, state: &[f64]) -> bool;

    /// Action of the scripted shortest-route controller toward `target`.
    fn navigate(&self, target: &[f64]) -> EnvAction;

    /// Whether `state` counts as having arrived at `target`.
    fn arrived(&self, state: &[f64], target: &[f64]) -> bool;

    /// A representative goal state for the scripted expert.
    fn goal_state(&self) -> Vec<f64>;

    /// Action of the scripted expert from the current state.
    fn expert_action(&self) -> EnvAction {
        self.navigate(&self.goal_state())
    }
}
