//! Brute-force check of the attraction/repulsion decomposition of the
//! contextual objective on small discrete trajectory spaces.
//!
//! For densities `P*` (expert) and `P̂` (sub-optimal) over every trajectory,
//!
//! ```text
//! λ1 Σ P*(τ)‖z − I(τ)‖ − λ2 Σ P̂(τ)‖z − I(τ)‖
//!   = Σ_{λ1P* ≥ λ2P̂} (λ1P* − λ2P̂)‖z − I(τ)‖ + Σ_{λ1P* < λ2P̂} (λ1P* − λ2P̂)‖z − I(τ)‖
//! ```
//!
//! The first sum pulls `z` toward trajectories the expert prefers and the
//! second pushes it away from the rest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{contract, ensure, Result};

/// Largest number of enumerated trajectories.
pub const MAX_TRAJECTORIES: usize = 1_000_000;

const DENSITY_TOLERANCE: f64 = 1e-12;

/// Every sequence of `horizon` (state, action) pairs, numbered in
/// lexicographic order with the first step most significant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteTrajectorySpace {
    states: usize,
    actions: usize,
    horizon: usize,
    len: usize,
}

impl DiscreteTrajectorySpace {
    pub fn new(states: usize, actions: usize, horizon: usize) -> Result<Self> {
        ensure!(states > 0 && actions > 0 && horizon > 0, "trajectory space needs positive sizes");
        let len =
            (states * actions).checked_pow(horizon as u32).filter(|&n| n <= MAX_TRAJECTORIES).ok_or_else(|| {
                contract!("({states}*{actions})^{horizon} trajectories exceed the limit of {MAX_TRAJECTORIES}")
            })?;
        Ok(Self { states, actions, horizon, len })
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The trajectory numbered `index`.
    pub fn trajectory(&self, index: usize) -> Result<Vec<(usize, usize)>> {
        ensure!(index < self.len, "trajectory {index} outside a space of {}", self.len);
        let base = self.states * self.actions;
        let mut steps = vec![(0, 0); self.horizon];
        let mut rest = index;
        for step in steps.iter_mut().rev() {
            let pair = rest % base;
            rest /= base;
            *step = (pair / self.actions, pair % self.actions);
        }
        Ok(steps)
    }

    pub fn iter(&self) -> impl Iterator<Item = Vec<(usize, usize)>> + '_ {
        (0..self.len).map(|i| self.trajectory(i).expect("index in range"))
    }
}

/// Expert and sub-optimal trajectory probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityPair {
    p_star: Vec<f64>,
    p_hat: Vec<f64>,
}

impl DensityPair {
    pub fn new(p_star: Vec<f64>, p_hat: Vec<f64>) -> Result<Self> {
        ensure!(p_star.len() == p_hat.len(), "density tables of lengths {} and {}", p_star.len(), p_hat.len());
        for (name, table) in [("P*", &p_star), ("P^", &p_hat)] {
            ensure!(!table.is_empty(), "{name} is empty");
            ensure!(table.iter().all(|&p| p >= 0.0 && p.is_finite()), "{name} has a negative or non-finite entry");
            let total: f64 = table.iter().sum();
            ensure!((total - 1.0).abs() <= DENSITY_TOLERANCE, "{name} sums to {total}");
        }
        Ok(Self { p_star, p_hat })
    }

    /// Independent draws from the flat Dirichlet over `len` outcomes. Every
    /// sub-optimal probability is strictly positive.
    pub fn sample(len: usize, rng: &mut impl Rng) -> Result<Self> {
        ensure!(len > 0, "cannot sample densities over zero trajectories");
        let p_star = flat_dirichlet(len, rng);
        let p_hat = loop {
            let p = flat_dirichlet(len, rng);
            if p.iter().all(|&v| v > 0.0) {
                break p;
            }
        };
        Self::new(p_star, p_hat)
    }

    pub fn p_star(&self) -> &[f64] {
        &self.p_star
    }

    pub fn p_hat(&self) -> &[f64] {
        &self.p_hat
    }

    pub fn len(&self) -> usize {
        self.p_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_star.is_empty()
    }
}

fn flat_dirichlet(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    let mut p: Vec<f64> = draws.iter().map(|d| d / total).collect();
    // Push the rounding residue onto the largest entry so the sum is 1 to
    // within an ulp or two.
    let residue = 1.0 - p.iter().sum::<f64>();
    let (largest, _) = p.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    p[largest] += residue;
    p
}

/// One embedding per trajectory of a space, all of the same width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        ensure!(!rows.is_empty(), "embedding table is empty");
        let dim = rows[0].len();
        ensure!(dim > 0, "embeddings must have positive width");
        ensure!(rows.iter().all(|r| r.len() == dim), "embedding rows differ in width");
        ensure!(rows.iter().flatten().all(|v| v.is_finite()), "embedding table has a non-finite entry");
        Ok(Self { rows })
    }

    /// Entries uniform in (-1, 1).
    pub fn sample(len: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new((0..len).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Attraction and repulsion weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub lambda1: f64,
    pub lambda2: f64,
}

fn distance(z: &[f64], e: &[f64]) -> f64 {
    z.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn check_inputs(
    space: &DiscreteTrajectorySpace,
    densities: &DensityPair,
    table: &EmbeddingTable,
    z: &[f64],
) -> Result<()> {
    ensure!(
        densities.len() == space.len(),
        "density tables cover {} trajectories, the space has {}",
        densities.len(),
        space.len()
    );
    ensure!(
        table.len() == space.len(),
        "embedding table covers {} trajectories, the space has {}",
        table.len(),
        space.len()
    );
    ensure!(z.len() == table.dim(), "z has width {}, embeddings have width {}", z.len(), table.dim());
    Ok(())
}

/// `λ1 Σ P*(τ)‖z − I(τ)‖ − λ2 Σ P̂(τ)‖z − I(τ)‖` as a direct finite sum.
pub fn lhs_expectation(
    space: &DiscreteTrajectorySpace,
    densities: &DensityPair,
    table: &EmbeddingTable,
    z: &[f64],
    weights: Weights,
) -> Result<f64> {
    check_inputs(space, densities, table, z)?;
    let mut attract = 0.0;
    let mut repel = 0.0;
    for (i, e) in table.rows().iter().enumerate() {
        let d = distance(z, e);
        attract += densities.p_star[i] * d;
        repel += densities.p_hat[i] * d;
    }
    Ok(weights.lambda1 * attract - weights.lambda2 * repel)
}

/// The two sums of the decomposition. Trajectories with `λ1P* = λ2P̂` go to
/// the first, where they contribute zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub term1: f64,
    pub term2: f64,
}

impl Decomposition {
    pub fn total(&self) -> f64 {
        self.term1 + self.term2
    }
}

pub fn rhs_decomposition(
    space: &DiscreteTrajectorySpace,
    densities: &DensityPair,
    table: &EmbeddingTable,
    z: &[f64],
    weights: Weights,
) -> Result<Decomposition> {
    check_inputs(space, densities, table, z)?;
    let mut out = Decomposition { term1: 0.0, term2: 0.0 };
    for (i, e) in table.rows().iter().enumerate() {
        let a = weights.lambda1 * densities.p_star[i];
        let b = weights.lambda2 * densities.p_hat[i];
        let contribution = (a - b) * distance(z, e);
        if a >= b {
            out.term1 += contribution;
        } else {
            out.term2 += contribution;
        }
    }
    Ok(out)
}

/// The point of a regular grid over `[-1, 1]^2` with the smallest
/// [`lhs_expectation`]; `steps` points per axis. Ties keep the first point in
/// row-major order.
pub fn grid_minimizer(
    space: &DiscreteTrajectorySpace,
    densities: &DensityPair,
    table: &EmbeddingTable,
    weights: Weights,
    steps: usize,
) -> Result<Vec<f64>> {
    ensure!(table.dim() == 2, "grid search needs two-dimensional embeddings");
    ensure!(steps >= 2, "grid needs at least two points per axis");
    let coord = |i: usize| -1.0 + 2.0 * i as f64 / (steps - 1) as f64;
    let mut best = (f64::INFINITY, vec![0.0, 0.0]);
    for i in 0..steps {
        for j in 0..steps {
            let z = vec![coord(i), coord(j)];
            let v = lhs_expectation(space, densities, table, &z, weights)?;
            if v < best.0 {
                best = (v, z);
            }
        }
    }
    Ok(best.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub instances: usize,
    pub max_abs_error: f64,
    pub pass: bool,
}

/// Largest allowed `|lhs − (term1 + term2)|`.
pub const THEOREM_TOLERANCE: f64 = 1e-9;

/// Compares both sides on `instances` random problems over two states, two
/// actions and two steps, with two-dimensional embeddings and weights in
/// `(0, 2)`.
pub fn check_theorem(instances: usize, seed: u64) -> Result<TheoremReport> {
    ensure!(instances >= 1, "need at least one instance");
    let space = DiscreteTrajectorySpace::new(2, 2, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_error: f64 = 0.0;
    for _ in 0..instances {
        let densities = DensityPair::sample(space.len(), &mut rng)?;
        let table = EmbeddingTable::sample(space.len(), 2, &mut rng)?;
        let z: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights =
            Weights { lambda1: rng.random_range(f64::EPSILON..2.0), lambda2: rng.random_range(f64::EPSILON..2.0) };
        let lhs = lhs_expectation(&space, &densities, &table, &z, weights)?;
        let rhs = rhs_decomposition(&space, &densities, &table, &z, weights)?;
        max_abs_error = max_abs_error.max((lhs - rhs.total()).abs());
    }
    Ok(TheoremReport { instances, max_abs_error, pass: max_abs_error <= THEOREM_TOLERANCE })
}
