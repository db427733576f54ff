use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;

use super::{ActionSpace, EnvAction, EnvKind, EnvSpec, Environment, Region, StepOutcome};
use crate::error::{contract, ensure, Result};

pub type Cell = (usize, usize);

/// A named room of a grid layout together with the doorways leaving it.
#[derive(Clone, Debug, PartialEq)]
pub struct Room {
    pub name: &'static str,
    pub cells: Vec<Cell>,
    pub doorways: Vec<Cell>,
}

/// Deterministic grid navigation. Moving into a wall or off the grid leaves
/// the agent in place. Entering the goal ends the episode with reward 1, and
/// acting while already on the goal does the same.
#[derive(Clone, Debug)]
pub struct GridWorld {
    spec: EnvSpec,
    rows: usize,
    cols: usize,
    walls: Vec<bool>,
    moves: Vec<(isize, isize)>,
    start_cells: Vec<Cell>,
    goal: Cell,
    rooms: Vec<Room>,
    pos: Cell,
    t: usize,
    done: bool,
}

impl GridWorld {
    /// Ten cells in a row; start at cell 0, goal at cell 9, actions left/right.
    pub fn chain_stitch() -> Self {
        let spec = EnvSpec {
            name: "chain-stitch".into(),
            kind: EnvKind::ChainStitch,
            obs_dim: 1,
            action_space: ActionSpace::Discrete { n: 2 },
            horizon: 30,
            goal: "reach cell 9 starting from cell 0".into(),
            reward: "1 on reaching the goal cell, 0 otherwise".into(),
        };
        Self::build(spec, 1, 10, vec![false; 10], vec![(0, -1), (0, 1)], vec![(0, 0)], (0, 9), Vec::new())
    }

    /// 11x11 grid split into four 5x5 rooms by a wall cross with one doorway
    /// per wall segment. Episodes start anywhere in the top-left room; the goal
    /// is cell (9, 9) in the bottom-right room. Actions: up, down, left, right.
    pub fn four_rooms() -> Self {
        let n = 11;
        let mut walls = vec![false; n * n];
        for i in 0..n {
            walls[5 * n + i] = true;
            walls[i * n + 5] = true;
        }
        let doors = [(2, 5), (8, 5), (5, 2), (5, 8)];
        for &(r, c) in &doors {
            walls[r * n + c] = false;
        }
        let room = |name, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, doorways: Vec<Cell>| Room {
            name,
            cells: rows.flat_map(|r| cols.clone().map(move |c| (r, c))).collect(),
            doorways,
        };
        let rooms = vec![
            room("top-left", 0..5, 0..5, vec![(2, 5), (5, 2)]),
            room("top-right", 0..5, 6..11, vec![(2, 5), (5, 8)]),
            room("bottom-left", 6..11, 0..5, vec![(5, 2), (8, 5)]),
            room("bottom-right", 6..11, 6..11, vec![(8, 5), (5, 8)]),
        ];
        let start_cells = rooms[0].cells.clone();
        let spec = EnvSpec {
            name: "four-rooms".into(),
            kind: EnvKind::FourRooms,
            obs_dim: 2,
            action_space: ActionSpace::Discrete { n: 4 },
            horizon: 50,
            goal: "reach cell (9, 9) in the bottom-right room from anywhere in the top-left room".into(),
            reward: "1 on reaching the goal cell, 0 otherwise".into(),
        };
        Self::build(spec, n, n, walls, vec![(-1, 0), (1, 0), (0, -1), (0, 1)], start_cells, (9, 9), rooms)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        spec: EnvSpec,
        rows: usize,
        cols: usize,
        walls: Vec<bool>,
        moves: Vec<(isize, isize)>,
        start_cells: Vec<Cell>,
        goal: Cell,
        rooms: Vec<Room>,
    ) -> Self {
        let pos = start_cells[0];
        Self { spec, rows, cols, walls, moves, start_cells, goal, rooms, pos, t: 0, done: false }
    }

    pub fn rooms(&self) -> &[Room] {
        &self.rooms
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_wall(&self, cell: Cell) -> bool {
        self.walls[cell.0 * self.cols + cell.1]
    }

    /// Every non-wall cell.
    pub fn open_cells(&self) -> Vec<Cell> {
        (0..self.rows).flat_map(|r| (0..self.cols).map(move |c| (r, c))).filter(|&c| !self.is_wall(c)).collect()
    }

    pub fn num_actions(&self) -> usize {
        self.moves.len()
    }

    /// Cell reached by taking `action` from `cell`.
    pub fn transition(&self, cell: Cell, action: usize) -> Cell {
        let (dr, dc) = self.moves[action];
        let r = cell.0 as isize + dr;
        let c = cell.1 as isize + dc;
        if r < 0 || c < 0 || r >= self.rows as isize || c >= self.cols as isize {
            return cell;
        }
        let next = (r as usize, c as usize);
        if self.is_wall(next) {
            cell
        } else {
            next
        }
    }

    pub fn cell_to_state(&self, cell: Cell) -> Vec<f64> {
        if self.rows == 1 {
            vec![cell.1 as f64]
        } else {
            vec![cell.0 as f64, cell.1 as f64]
        }
    }

    pub fn state_to_cell(&self, state: &[f64]) -> Result<Cell> {
        let coords: Vec<f64> = if self.rows == 1 { vec![0.0, state[0]] } else { state.to_vec() };
        ensure!(state.len() == self.spec.obs_dim, "grid state of width {} for {}", state.len(), self.spec.name);
        ensure!(coords.iter().all(|v| v.fract() == 0.0 && *v >= 0.0), "grid state {state:?} is not a cell");
        let cell = (coords[0] as usize, coords[1] as usize);
        ensure!(cell.0 < self.rows && cell.1 < self.cols && !self.is_wall(cell), "{cell:?} is not an open cell");
        Ok(cell)
    }

    /// Breadth-first step distances to `target` (`usize::MAX` where unreachable).
    pub fn distances_to(&self, target: Cell) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.rows * self.cols];
        let mut queue = VecDeque::from([target]);
        dist[target.0 * self.cols + target.1] = 0;
        while let Some(cell) = queue.pop_front() {
            let d = dist[cell.0 * self.cols + cell.1];
            for a in 0..self.moves.len() {
                // Moves are reversible, so predecessors are the neighbours.
                let next = self.transition(cell, a);
                let slot = &mut dist[next.0 * self.cols + next.1];
                if *slot == usize::MAX {
                    *slot = d + 1;
                    queue.push_back(next);
                }
            }
        }
        dist
    }

    fn shortest_action(&self, from: Cell, target: Cell) -> usize {
        let dist = self.distances_to(target);
        (0..self.moves.len())
            .min_by_key(|&a| {
                let n = self.transition(from, a);
                dist[n.0 * self.cols + n.1]
            })
            .expect("at least one move")
    }
}

impl Environment for GridWorld {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let state = self.start_region().sample(rng);
        self.reset_to(&state).expect("start cells are open")
    }

    fn reset_to(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        self.pos = self.state_to_cell(state)?;
        self.t = 0;
        self.done = false;
        Ok(self.state())
    }

    fn step(&mut self, action: &EnvAction) -> Result<StepOutcome> {
        ensure!(!self.done, "step called after the episode ended");
        let a = match action {
            EnvAction::Discrete(a) if *a < self.moves.len() => *a,
            other => return Err(contract!("{other:?} is not an action of {}", self.spec.name)),
        };
        let reached_goal = if self.pos == self.goal {
            true
        } else {
            self.pos = self.transition(self.pos, a);
            self.pos == self.goal
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
        self.cell_to_state(self.pos)
    }

    fn start_region(&self) -> Region {
        Region::Points(self.start_cells.iter().map(|&c| self.cell_to_state(c)).collect())
    }

    fn is_goal(&self, state: &[f64]) -> bool {
        self.state_to_cell(state).is_ok_and(|c| c == self.goal)
    }

    fn navigate(&self, target: &[f64]) -> EnvAction {
        let from = self.pos;
        let target = self.state_to_cell(target).unwrap_or(self.goal);
        EnvAction::Discrete(self.shortest_action(from, target))
    }

    fn arrived(&self, state: &[f64], target: &[f64]) -> bool {
        state == target
    }

    fn goal_state(&self) -> Vec<f64> {
        self.cell_to_state(self.goal)
    }
}
