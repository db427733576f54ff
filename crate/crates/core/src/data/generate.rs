use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpisodeMeta, Step, Trajectory};
use crate::envs::{EnvKind, Environment, GridWorld, Region};
use crate::error::{ensure, Error, Result};

const MAX_ATTEMPTS: usize = 500;

/// Scripted behavior: walk from a state in `from` toward a target drawn from
/// `to`, staying inside `confine` when it is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub from: Region,
    pub to: Region,
    pub confine: Option<Region>,
    pub weight: f64,
}

/// Mixture of routes that together cover a start-to-goal path in overlapping
/// pieces without any single episode covering all of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub routes: Vec<Route>,
    /// Probability of replacing the scripted action with a uniformly random one.
    pub noise: f64,
}

fn cells(env: &GridWorld, list: impl IntoIterator<Item = (usize, usize)>) -> Region {
    Region::Points(list.into_iter().map(|c| env.cell_to_state(c)).collect())
}

fn route(from: Region, to: Region, confine: Option<Region>) -> Route {
    Route { from, to, confine, weight: 1.0 }
}

impl SegmentPlan {
    /// The plan used for each environment's sub-optimal split.
    pub fn for_env(kind: EnvKind) -> Self {
        match kind {
            EnvKind::ChainStitch => {
                let env = GridWorld::chain_stitch();
                let span = |lo: usize, hi: usize| cells(&env, (lo..=hi).map(|c| (0, c)));
                SegmentPlan {
                    routes: vec![
                        route(span(0, 5), span(0, 5), Some(span(0, 5))),
                        route(span(4, 8), span(4, 9), Some(span(4, 9))),
                    ],
                    noise: 0.1,
                }
            }
            EnvKind::FourRooms => {
                let env = GridWorld::four_rooms();
                let mut routes = Vec::new();
                for room in env.rooms() {
                    let area = cells(&env, room.cells.iter().chain(&room.doorways).copied());
                    routes.push(route(cells(&env, room.cells.clone()), area.clone(), Some(area)));
                }
                for room in env.rooms() {
                    for &door in &room.doorways {
                        let area = cells(&env, room.cells.iter().copied().chain([door]));
                        routes.push(route(cells(&env, [door]), cells(&env, room.cells.clone()), Some(area.clone())));
                        routes.push(route(cells(&env, room.cells.clone()), cells(&env, [door]), Some(area.clone())));
                        if room.cells.contains(&env.goal()) {
                            routes.push(route(cells(&env, [door]), cells(&env, [env.goal()]), Some(area)));
                        }
                    }
                }
                SegmentPlan { routes, noise: 0.1 }
            }
            EnvKind::PointMass => {
                let rect = |lo: [f64; 2], hi: [f64; 2]| Region::Rect { lo: lo.to_vec(), hi: hi.to_vec() };
                let left = rect([0.05, 0.05], [0.9, 0.95]);
                let band = rect([0.7, 0.78], [1.3, 0.95]);
                let right = rect([1.1, 0.05], [1.95, 0.95]);
                SegmentPlan {
                    routes: vec![
                        route(left.clone(), left, Some(rect([0.0, 0.0], [0.95, 1.0]))),
                        route(band.clone(), band, Some(rect([0.6, 0.72], [1.4, 1.0]))),
                        route(right.clone(), right, Some(rect([1.05, 0.0], [2.0, 1.0]))),
                    ],
                    noise: 0.1,
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.routes.is_empty() || self.routes.iter().any(|r| r.from.is_empty() || r.to.is_empty()) {
            return Err(Error::Generation("segment plan has no routes or an empty region".into()));
        }
        if self.routes.iter().any(|r| !(r.weight.is_finite() && r.weight >= 0.0))
            || self.routes.iter().all(|r| r.weight == 0.0)
        {
            return Err(Error::Generation("segment plan weights must be non-negative and not all zero".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Generation(format!("behavior noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> usize {
        let total: f64 = self.routes.iter().map(|r| r.weight).sum();
        let mut u = rng.random_range(0.0..total);
        for (i, r) in self.routes.iter().enumerate() {
            if u < r.weight {
                return i;
            }
            u -= r.weight;
        }
        self.routes.len() - 1
    }
}

struct Recorder {
    steps: Vec<Step>,
    episode_return: f64,
    reached_goal: bool,
}

fn record_step(env: &mut dyn Environment, rec: &mut Recorder, action: &crate::envs::EnvAction) -> Result<bool> {
    let observation = env.state();
    let encoded = env.spec().action_space.encode(action)?;
    let out = env.step(action)?;
    rec.steps.push(Step { observation, action: encoded, action_masked: false, reward: Some(out.reward) });
    rec.episode_return += out.reward;
    rec.reached_goal |= out.reached_goal;
    Ok(out.done)
}

fn finish(env: &dyn Environment, rec: Recorder, seed: u64, behavior: String) -> Trajectory {
    Trajectory {
        steps: rec.steps,
        final_observation: env.state(),
        meta: EpisodeMeta {
            env: env.spec().name.clone(),
            seed,
            behavior,
            episode_return: rec.episode_return,
            reached_goal: rec.reached_goal,
        },
    }
}

/// Whether `t` starts in the start region and reaches the goal.
pub fn is_complete(env: &dyn Environment, t: &Trajectory) -> bool {
    let Some(first) = t.steps.first() else { return false };
    let reaches =
        t.meta.reached_goal || env.is_goal(&t.final_observation) || t.steps.iter().any(|s| env.is_goal(&s.observation));
    env.start_region().contains(&first.observation) && reaches
}

/// Fails if any episode is start-to-goal complete.
pub fn check_stitching_precondition(env: &dyn Environment, trajectories: &[Trajectory]) -> Result<()> {
    match trajectories.iter().position(|t| is_complete(env, t)) {
        Some(i) => Err(Error::Generation(format!("sub-optimal episode {i} goes from the start region to the goal"))),
        None => Ok(()),
    }
}

fn run_route(env: &mut dyn Environment, route: &Route, noise: f64, rng: &mut ChaCha8Rng) -> Result<Option<Recorder>> {
    let start = route.from.sample(rng);
    let mut target = route.to.sample(rng);
    for _ in 0..MAX_ATTEMPTS {
        if !env.arrived(&start, &target) {
            break;
        }
        target = route.to.sample(rng);
    }
    if env.arrived(&start, &target) {
        return Ok(None);
    }
    env.reset_to(&start)?;
    let mut rec = Recorder { steps: Vec::new(), episode_return: 0.0, reached_goal: false };
    loop {
        let action = if rng.random_bool(noise) { env.spec().action_space.sample(rng) } else { env.navigate(&target) };
        let done = record_step(env, &mut rec, &action)?;
        if route.confine.as_ref().is_some_and(|c| !c.contains(&env.state())) {
            return Ok(None);
        }
        if done || env.arrived(&env.state(), &target) {
            return Ok(Some(rec));
        }
    }
}

/// Sub-optimal episodes following `plan`. Episodes that leave their route's
/// confinement or happen to go from the start region to the goal are redrawn;
/// a plan that keeps producing them is rejected.
pub fn generate_behavior_dataset(
    env: &mut dyn Environment,
    plan: &SegmentPlan,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            let index = plan.pick(&mut rng);
            if let Some(rec) = run_route(env, &plan.routes[index], plan.noise, &mut rng)? {
                let t = finish(env, rec, seed, format!("route-{index}"));
                if !is_complete(env, &t) {
                    accepted = Some(t);
                    break;
                }
            }
        }
        match accepted {
            Some(t) => out.push(t),
            None => {
                return Err(Error::Generation(format!(
                    "segment plan produced no admissible episode in {MAX_ATTEMPTS} attempts"
                )))
            }
        }
    }
    Ok(out)
}

/// Scripted shortest-route episodes from random start states, with actions
/// masked when `observation_only` is set.
pub fn generate_expert_demos(
    env: &mut dyn Environment,
    count: usize,
    seed: u64,
    observation_only: bool,
) -> Result<Vec<Trajectory>> {
    ensure!(count >= 1, "at least one expert demonstration is required");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            env.reset(&mut rng);
            let mut rec = Recorder { steps: Vec::new(), episode_return: 0.0, reached_goal: false };
            loop {
                let action = env.expert_action();
                if record_step(env, &mut rec, &action)? {
                    break;
                }
            }
            let mut t = finish(env, rec, seed, "scripted-expert".into());
            if observation_only {
                t.mask_actions();
            }
            Ok(t)
        })
        .collect()
}
