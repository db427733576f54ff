#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use stitchformer::models::{EncoderConfig, EncoderModel, Fragment, LatentEmbedding, PolicyConfig, PolicyModel};
use stitchformer::objectives::{contextual_loss, policy_loss, LossConfig};
use stitchformer::tensor::{DropoutStream, Graph, Mode, NormKind, ParamId, ParamSet, Tensor, Var};

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const SCALE_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            std * x
        })
        .collect()
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// Largest relative error between backprop and central differences over
/// `coords` randomly chosen parameter values (all of them when `None`).
pub fn grad_check<M>(
    model: &mut M,
    sets: fn(&mut M) -> Vec<&mut ParamSet<f64>>,
    loss: impl Fn(&mut Graph<f64>, &M) -> Var,
    coords: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    for s in sets(model) {
        s.set_trainable(true);
        s.zero_grad();
    }
    {
        let mut g = Graph::new(Mode::Train, DropoutStream::new(99));
        let v = loss(&mut g, model);
        let mut owned = sets(model);
        let mut refs: Vec<&mut ParamSet<f64>> = owned.iter_mut().map(|s| &mut **s).collect();
        g.backward(v, &mut refs).expect("backward");
    }
    let analytic: Vec<Vec<Vec<f64>>> = sets(model)
        .iter()
        .map(|s| s.tensors().iter().map(|t| t.grad().map_or(vec![0.0; t.len()], |g| g.to_vec())).collect())
        .collect();
    let mut all = Vec::new();
    for (si, set) in analytic.iter().enumerate() {
        for (ti, t) in set.iter().enumerate() {
            for j in 0..t.len() {
                all.push((si, ti, j));
            }
        }
    }
    let chosen: Vec<(usize, usize, usize)> = match coords {
        Some(n) if n < all.len() => (0..n).map(|_| all[rng.random_range(0..all.len())]).collect(),
        _ => all,
    };
    let value_at = |model: &mut M, (si, ti, j): (usize, usize, usize), delta: f64| {
        let original = sets(model)[si].tensors()[ti].data()[j];
        sets(model)[si].tensors_mut()[ti].data_mut()[j] = original + delta;
        let mut g = Graph::new(Mode::Train, DropoutStream::new(99));
        let v = loss(&mut g, model);
        let out = g.scalar(v);
        sets(model)[si].tensors_mut()[ti].data_mut()[j] = original;
        out
    };
    let mut worst: f64 = 0.0;
    for c in chosen {
        let numeric = (value_at(model, c, STEP) - value_at(model, c, -STEP)) / (2.0 * STEP);
        worst = worst.max(rel_error(analytic[c.0][c.1][c.2], numeric));
    }
    worst
}

/// Parameters for a primitive check: one trainable tensor per shape, plus a
/// fixed random projection that turns the primitive's output into a scalar.
pub struct Primitive {
    pub set: ParamSet<f64>,
    pub ids: Vec<ParamId>,
}

impl Primitive {
    pub fn new(values: Inputs) -> Self {
        let mut set = ParamSet::new();
        let ids = values
            .into_iter()
            .enumerate()
            .map(|(i, (r, c, v))| set.push(format!("x{i}"), Tensor::new(&[r, c], v).unwrap()))
            .collect();
        Self { set, ids }
    }

    pub fn sets(p: &mut Primitive) -> Vec<&mut ParamSet<f64>> {
        vec![&mut p.set]
    }

    pub fn vars(&self, g: &mut Graph<f64>) -> Vec<Var> {
        self.ids.iter().map(|&id| g.param(&self.set, id).unwrap()).collect()
    }
}

/// `sum(out * w)` for a fixed weight matrix `w`.
pub fn project(g: &mut Graph<f64>, out: Var, w: &[f64]) -> Var {
    let (r, c) = g.shape(out);
    assert_eq!(w.len(), r * c, "projection weights sized for the output");
    let w = g.input_matrix(r, c, w.to_vec()).unwrap();
    let prod = g.mul(out, w).unwrap();
    g.sum(prod).unwrap()
}

/// Max error over `instances` random draws of one primitive. `make` returns
/// the input tensors; `op` applies the primitive.
pub fn check_primitive(
    instances: usize,
    seed: u64,
    make: impl Fn(&mut ChaCha8Rng) -> Inputs,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let mut p = Primitive::new(make(&mut r));
        let out_len = {
            let mut g = Graph::new(Mode::Train, DropoutStream::new(99));
            let vars = p.vars(&mut g);
            let out = op(&mut g, &vars);
            let (rows, cols) = g.shape(out);
            rows * cols
        };
        let w = normal(&mut r, out_len, 1.0);
        let e = grad_check(
            &mut p,
            Primitive::sets,
            |g, p| {
                let vars = p.vars(g);
                let out = op(g, &vars);
                project(g, out, &w)
            },
            None,
            &mut r,
        );
        worst = worst.max(e);
    }
    worst
}

/// A tiny policy, encoder and latent with perturbed weights so every
/// nonlinearity sits in a non-trivial regime.
pub struct TinyModels {
    pub policy: PolicyModel<f64>,
    pub encoder: EncoderModel<f64>,
    pub latent: LatentEmbedding<f64>,
}

pub const OBS: usize = 2;
pub const ACT: usize = 3;
pub const Z: usize = 4;
pub const K: usize = 4;

impl TinyModels {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let seed = rng.random();
        let policy = PolicyConfig {
            obs_dim: OBS,
            act_dim: ACT,
            z_dim: Z,
            hidden: 8,
            layers: 2,
            heads: 2,
            dropout: 0.1,
            context: K,
        };
        let encoder = EncoderConfig {
            obs_dim: OBS,
            act_dim: ACT,
            z_dim: Z,
            hidden: 8,
            layers: 2,
            heads: 2,
            dropout: 0.1,
            max_len: K,
        };
        let mut m = Self {
            policy: PolicyModel::new(policy, seed).unwrap(),
            encoder: EncoderModel::new(encoder, seed ^ 1).unwrap(),
            latent: LatentEmbedding::random(Z, seed ^ 2).unwrap(),
        };
        for set in [m.policy.params_mut(), m.encoder.params_mut()] {
            for t in set.tensors_mut() {
                let noise = normal(rng, t.len(), 0.3);
                t.data_mut().iter_mut().zip(noise).for_each(|(v, n)| *v += n);
            }
        }
        m
    }

    pub fn policy_and_encoder(m: &mut TinyModels) -> Vec<&mut ParamSet<f64>> {
        vec![m.policy.params_mut(), m.encoder.params_mut()]
    }

    pub fn encoder_and_latent(m: &mut TinyModels) -> Vec<&mut ParamSet<f64>> {
        vec![m.encoder.params_mut(), m.latent.params_mut()]
    }
}

/// A random fragment of `1..=K` steps with one-hot actions, some masked.
pub fn random_fragment(rng: &mut ChaCha8Rng, mask_rate: f64) -> Fragment {
    let len = rng.random_range(1..=K);
    let observations = (0..len).map(|_| normal(rng, OBS, 1.0)).collect();
    let actions = (0..len)
        .map(|_| {
            let mut a = vec![0.0; ACT];
            a[rng.random_range(0..ACT)] = 1.0;
            a
        })
        .collect();
    let mut masked: Vec<bool> = (0..len).map(|_| rng.random_bool(mask_rate)).collect();
    masked[len - 1] = false;
    Fragment::new(observations, actions, masked).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, mask_rate: f64) -> Vec<Fragment> {
    (0..n).map(|_| random_fragment(rng, mask_rate)).collect()
}

pub fn policy_loss_error(instances: usize, seed: u64, coords: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let mut m = TinyModels::new(&mut r);
        let batch = random_batch(&mut r, 3, 0.3);
        let e = grad_check(
            &mut m,
            TinyModels::policy_and_encoder,
            |g, m| policy_loss(g, &m.policy, &m.encoder, &batch, false, NormKind::L2).unwrap(),
            Some(coords),
            &mut r,
        );
        worst = worst.max(e);
    }
    worst
}

pub fn contextual_loss_error(instances: usize, seed: u64, coords: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let mut m = TinyModels::new(&mut r);
        let expert = random_batch(&mut r, 2, 0.0);
        let sub = random_batch(&mut r, 3, 0.0);
        let cfg = LossConfig {
            lambda1: r.random_range(0.1..2.0),
            lambda2: r.random_range(0.0..2.0),
            ..LossConfig::default()
        };
        let e = grad_check(
            &mut m,
            TinyModels::encoder_and_latent,
            |g, m| {
                let z = m.latent.var(g).unwrap();
                contextual_loss(g, z, &m.encoder, &expert, &sub, false, &cfg).unwrap()
            },
            Some(coords),
            &mut r,
        );
        worst = worst.max(e);
    }
    worst
}

/// Values at least `gap` away from every point in `kinks`.
pub fn away_from(rng: &mut ChaCha8Rng, n: usize, std: f64, kinks: &[f64], gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let x: f64 = StandardNormal.sample(rng);
            let v = std * x;
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect()
}

pub type Inputs = Vec<(usize, usize, Vec<f64>)>;

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.random_range(1..5), r.random_range(1..5))
}

fn one(r: &mut ChaCha8Rng) -> Inputs {
    let (m, n) = dims(r);
    vec![(m, n, normal(r, m * n, 1.0))]
}

fn two(r: &mut ChaCha8Rng) -> Inputs {
    let (m, n) = dims(r);
    vec![(m, n, normal(r, m * n, 1.0)), (m, n, normal(r, m * n, 1.0))]
}

fn kinked(r: &mut ChaCha8Rng) -> Inputs {
    let (m, n) = dims(r);
    vec![(m, n, away_from(r, m * n, 1.0, &[0.0, 0.5], 1e-3))]
}

fn tall(r: &mut ChaCha8Rng) -> Inputs {
    let n = r.random_range(1..5);
    vec![(4, n, normal(r, 4 * n, 1.0))]
}

fn wide(r: &mut ChaCha8Rng) -> Inputs {
    let m = r.random_range(1..5);
    vec![(m, 5, normal(r, m * 5, 1.0))]
}

/// Worst finite-difference error of every tape primitive over `instances`
/// random inputs each.
pub fn primitive_errors(instances: usize) -> Vec<(&'static str, f64)> {
    type Make = fn(&mut ChaCha8Rng) -> Inputs;
    type Op = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;
    let cases: Vec<(&'static str, Make, Op)> = vec![
        (
            "matmul",
            |r| {
                let (m, k) = dims(r);
                let n = r.random_range(1..5);
                vec![(m, k, normal(r, m * k, 1.0)), (k, n, normal(r, k * n, 1.0))]
            },
            Box::new(|g, x| g.matmul(x[0], x[1]).unwrap()),
        ),
        ("add", two, Box::new(|g, x| g.add(x[0], x[1]).unwrap())),
        ("sub", two, Box::new(|g, x| g.sub(x[0], x[1]).unwrap())),
        ("mul", two, Box::new(|g, x| g.mul(x[0], x[1]).unwrap())),
        (
            "add_row",
            |r| {
                let (m, n) = dims(r);
                vec![(m, n, normal(r, m * n, 1.0)), (1, n, normal(r, n, 1.0))]
            },
            Box::new(|g, x| g.add_row(x[0], x[1]).unwrap()),
        ),
        ("scale", one, Box::new(|g, x| g.scale(x[0], -1.7).unwrap())),
        ("tanh", one, Box::new(|g, x| g.tanh(x[0]).unwrap())),
        ("relu", kinked, Box::new(|g, x| g.relu(x[0]).unwrap())),
        ("clamp_max", kinked, Box::new(|g, x| g.clamp_max(x[0], 0.5).unwrap())),
        (
            "layer_norm",
            |r| {
                let m = r.random_range(1..5);
                let n = r.random_range(2..6);
                vec![(m, n, normal(r, m * n, 1.0)), (1, n, normal(r, n, 1.0)), (1, n, normal(r, n, 1.0))]
            },
            Box::new(|g, x| g.layer_norm(x[0], x[1], x[2]).unwrap()),
        ),
        ("softmax", one, Box::new(|g, x| g.softmax(x[0]).unwrap())),
        ("dropout", one, Box::new(|g, x| g.dropout(x[0], 0.3).unwrap())),
        ("gather_rows", tall, Box::new(|g, x| g.gather_rows(x[0], &[3, 0, 3, 1]).unwrap())),
        ("embedding", tall, Box::new(|g, x| g.embedding(x[0], &[2, 2, 0]).unwrap())),
        ("slice_rows", tall, Box::new(|g, x| g.slice_rows(x[0], 1, 2).unwrap())),
        ("slice_cols", wide, Box::new(|g, x| g.slice_cols(x[0], 1, 3).unwrap())),
        (
            "reshape",
            wide,
            Box::new(|g, x| {
                let (m, _) = g.shape(x[0]);
                g.reshape(x[0], 5, m).unwrap()
            }),
        ),
        (
            "concat_rows",
            |r| {
                let n = r.random_range(1..5);
                vec![(2, n, normal(r, 2 * n, 1.0)), (3, n, normal(r, 3 * n, 1.0))]
            },
            Box::new(|g, x| g.concat_rows(x).unwrap()),
        ),
        (
            "concat_cols",
            |r| {
                let m = r.random_range(1..5);
                vec![(m, 2, normal(r, m * 2, 1.0)), (m, 1, normal(r, m, 1.0))]
            },
            Box::new(|g, x| g.concat_cols(x).unwrap()),
        ),
        ("sum", one, Box::new(|g, x| g.sum(x[0]).unwrap())),
        ("mean", one, Box::new(|g, x| g.mean(x[0]).unwrap())),
        ("l2norm", one, Box::new(|g, x| g.l2norm(x[0]).unwrap())),
        ("row_norm l2", one, Box::new(|g, x| g.row_norm(x[0], NormKind::L2).unwrap())),
        (
            "row_norm l1",
            |r| {
                let (m, n) = dims(r);
                vec![(m, n, away_from(r, m * n, 1.0, &[0.0], 1e-3))]
            },
            Box::new(|g, x| g.row_norm(x[0], NormKind::L1).unwrap()),
        ),
        (
            "attention",
            |r| (0..3).map(|_| (5, 4, normal(r, 20, 1.0))).collect(),
            Box::new(|g, x| g.attention(x[0], x[1], x[2], &[(0, 2), (2, 3)], 2, false).unwrap()),
        ),
        (
            "causal attention",
            |r| (0..3).map(|_| (5, 4, normal(r, 20, 1.0))).collect(),
            Box::new(|g, x| g.attention(x[0], x[1], x[2], &[(0, 2), (2, 3)], 2, true).unwrap()),
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, make, op))| (name, check_primitive(instances, 100 + i as u64, make, op)))
        .collect()
}
