use rand_chacha::ChaCha8Rng;

use super::{ActionSpace, EnvAction, EnvKind, EnvSpec, Environment, Region, StepOutcome};
use crate::error::{contract, ensure, Result};

const WIDTH: f64 = 2.0;
const HEIGHT: f64 = 1.0;
const WALL_X: f64 = 1.0;
const WALL_TOP: f64 = 0.7;
const MAX_STEP: f64 = 0.1;
const GOAL: [f64; 2] = [1.8, 0.2];
const GOAL_RADIUS: f64 = 0.1;
const ARRIVAL_RADIUS: f64 = 0.05;
const LEFT_GAP: [f64; 2] = [0.9, 0.85];
const RIGHT_GAP: [f64; 2] = [1.1, 0.85];

/// A point in the box `[0, 2] x [0, 1]` split by a wall at `x = 1` that
/// rises from the floor to `y = 0.7`, leaving a gap along the top.
///
/// Actions are displacements clipped to `[-0.1, 0.1]` per coordinate. A move
/// that would cross the wall or leave the box is cancelled. Episodes start in
/// `[0.1, 0.4]^2` and end inside the disk of radius 0.1 around `(1.8, 0.2)`.
#[derive(Clone, Debug)]
pub struct PointMass {
    spec: EnvSpec,
    pos: [f64; 2],
    t: usize,
    done: bool,
}

impl PointMass {
    pub fn corridor() -> Self {
        let spec = EnvSpec {
            name: "point-mass".into(),
            kind: EnvKind::PointMass,
            obs_dim: 2,
            action_space: ActionSpace::Box { dim: 2, low: -MAX_STEP, high: MAX_STEP },
            horizon: 60,
            goal: "enter the disk of radius 0.1 around (1.8, 0.2) behind the wall".into(),
            reward: "1 on entering the goal disk, 0 otherwise".into(),
        };
        Self { spec, pos: [0.25, 0.25], t: 0, done: false }
    }

    /// Whether the straight move `from -> to` is allowed.
    pub fn move_allowed(from: [f64; 2], to: [f64; 2]) -> bool {
        let inside = (0.0..=WIDTH).contains(&to[0]) && (0.0..=HEIGHT).contains(&to[1]);
        inside && !crosses_wall(from, to)
    }

    fn aim(&self, target: [f64; 2]) -> [f64; 2] {
        let p = self.pos;
        if !crosses_wall(p, target) {
            return target;
        }
        let (own, other) = if p[0] < WALL_X { (LEFT_GAP, RIGHT_GAP) } else { (RIGHT_GAP, LEFT_GAP) };
        if !crosses_wall(p, other) {
            other
        } else {
            own
        }
    }
}

fn crosses_wall(from: [f64; 2], to: [f64; 2]) -> bool {
    let (a, b) = (from[0] - WALL_X, to[0] - WALL_X);
    if a * b > 0.0 || (a == 0.0 && b == 0.0 && from[1].min(to[1]) > WALL_TOP) {
        return false;
    }
    if a == b {
        return from[1].min(to[1]) <= WALL_TOP;
    }
    let s = a / (a - b);
    let y = from[1] + s * (to[1] - from[1]);
    y <= WALL_TOP
}

fn clipped_step(from: [f64; 2], aim: [f64; 2]) -> [f64; 2] {
    [(aim[0] - from[0]).clamp(-MAX_STEP, MAX_STEP), (aim[1] - from[1]).clamp(-MAX_STEP, MAX_STEP)]
}

fn as_point(state: &[f64]) -> Result<[f64; 2]> {
    ensure!(state.len() == 2, "point-mass state has width {}, expected 2", state.len());
    Ok([state[0], state[1]])
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let state = self.start_region().sample(rng);
        self.reset_to(&state).expect("start region is inside the box")
    }

    fn reset_to(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        let p = as_point(state)?;
        ensure!(
            (0.0..=WIDTH).contains(&p[0]) && (0.0..=HEIGHT).contains(&p[1]),
            "point-mass state {p:?} is outside the box"
        );
        self.pos = p;
        self.t = 0;
        self.done = false;
        Ok(self.state())
    }

    fn step(&mut self, action: &EnvAction) -> Result<StepOutcome> {
        ensure!(!self.done, "step called after the episode ended");
        let delta = match action {
            EnvAction::Continuous(v) if v.len() == 2 && v.iter().all(|x| x.is_finite()) => {
                [v[0].clamp(-MAX_STEP, MAX_STEP), v[1].clamp(-MAX_STEP, MAX_STEP)]
            }
            other => return Err(contract!("{other:?} is not a point-mass action")),
        };
        let reached_goal = if self.is_goal(&self.pos) {
            true
        } else {
            let next = [self.pos[0] + delta[0], self.pos[1] + delta[1]];
            if Self::move_allowed(self.pos, next) {
                self.pos = next;
            }
            self.is_goal(&self.pos)
        };
        self.t += 1;
        self.done = reached_goal || self.t >= self.spec.horizon;
        Ok(StepOutcome {
            observation: self.state(),
            done: self.done,
            reward: if reached_goal { 1.0 } else { 0.0 },
            reached_goal,
        })
    }

    fn state(&self) -> Vec<f64> {
        self.pos.to_vec()
    }

    fn start_region(&self) -> Region {
        Region::Rect { lo: vec![0.1, 0.1], hi: vec![0.4, 0.4] }
    }

    fn is_goal(&self, state: &[f64]) -> bool {
        state.len() == 2 && (state[0] - GOAL[0]).hypot(state[1] - GOAL[1]) <= GOAL_RADIUS
    }

    fn navigate(&self, target: &[f64]) -> EnvAction {
        let target = as_point(target).unwrap_or(GOAL);
        let mut step = clipped_step(self.pos, self.aim(target));
        let next = [self.pos[0] + step[0], self.pos[1] + step[1]];
        if !Self::move_allowed(self.pos, next) {
            let own = if self.pos[0] < WALL_X { LEFT_GAP } else { RIGHT_GAP };
            step = clipped_step(self.pos, own);
        }
        EnvAction::Continuous(step.to_vec())
    }

    fn arrived(&self, state: &[f64], target: &[f64]) -> bool {
        state.len() == 2 && target.len() == 2 && (state[0] - target[0]).hypot(state[1] - target[1]) <= ARRIVAL_RADIUS
    }

    fn goal_state(&self) -> Vec<f64> {
        GOAL.to_vec()
    }
}
