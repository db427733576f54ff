mod common;

use common::*;
use proptest::prelude::*;
use stitchformer::data::{generate_behavior_dataset, generate_expert_demos, Dataset, SegmentPlan};
use stitchformer::envs::EnvKind;
use stitchformer::models::{ContextFormer, EncoderConfig, Fragment, LatentEmbedding, PolicyConfig};
use stitchformer::objectives::{
    contextual_loss_from_embeddings, phase_a_step, phase_b_step, phase_c_step, policy_loss, train_epoch, LossConfig,
    TrainConfig, TrainState, WindowSampler,
};
use stitchformer::tensor::{AdamConfig, Graph, NormKind, Precision};

fn norm(v: &[f64], kind: NormKind) -> f64 {
    match kind {
        NormKind::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        NormKind::L1 => v.iter().map(|x| x.abs()).sum(),
    }
}

fn contextual_by_hand(z: &[f64], expert: &[Vec<f64>], sub: &[Vec<f64>], cfg: &LossConfig) -> f64 {
    let dist = |e: &Vec<f64>| norm(&z.iter().zip(e).map(|(a, b)| a - b).collect::<Vec<_>>(), cfg.norm);
    let attract = expert.iter().map(dist).sum::<f64>() / expert.len() as f64;
    let repel = sub.iter().map(|e| dist(e).min(cfg.clip)).sum::<f64>() / sub.len() as f64;
    cfg.lambda1 * attract - cfg.lambda2 * repel
}

fn contextual_on_tape(z: &[f64], expert: &[Vec<f64>], sub: &[Vec<f64>], cfg: &LossConfig) -> (f64, Vec<f64>) {
    let mut latent = LatentEmbedding::<f64>::from_values(z).unwrap();
    latent.params_mut().set_trainable(true);
    let mut g = Graph::new(stitchformer::tensor::Mode::Train, stitchformer::tensor::DropoutStream::new(0));
    let zv = latent.var(&mut g).unwrap();
    let d = z.len();
    let e = g.input_matrix(expert.len(), d, expert.concat()).unwrap();
    let s = g.input_matrix(sub.len(), d, sub.concat()).unwrap();
    let loss = contextual_loss_from_embeddings(&mut g, zv, e, s, cfg).unwrap();
    g.backward(loss, &mut [latent.params_mut()]).unwrap();
    (g.scalar(loss), latent.params().tensors()[0].grad().unwrap().to_vec())
}

fn points(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 1..n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contextual_loss_matches_the_formula(
        z in prop::collection::vec(-1.0f64..1.0, 3),
        expert in points(6, 3),
        sub in points(6, 3),
        lambda1 in 0.01f64..3.0,
        lambda2 in 0.0f64..3.0,
        l1 in any::<bool>(),
        clip in 0.1f64..4.0,
    ) {
        let cfg = LossConfig { lambda1, lambda2, norm: if l1 { NormKind::L1 } else { NormKind::L2 }, clip };
        let (tape, _) = contextual_on_tape(&z, &expert, &sub, &cfg);
        prop_assert!((tape - contextual_by_hand(&z, &expert, &sub, &cfg)).abs() <= 1e-10);
    }

    #[test]
    fn saturated_repulsion_is_flat(
        z in prop::collection::vec(-1.0f64..1.0, 3),
        expert in points(5, 3),
        far in prop::collection::vec(prop::collection::vec(5.0f64..9.0, 3), 1..5),
        lambda2 in 0.0f64..3.0,
    ) {
        let clip = 3.0;
        let sub: Vec<Vec<f64>> = far;
        let with = LossConfig { lambda1: 1.0, lambda2, clip, ..LossConfig::default() };
        let without = LossConfig { lambda2: 0.0, ..with };
        let (a, ga) = contextual_on_tape(&z, &expert, &sub, &with);
        let (b, gb) = contextual_on_tape(&z, &expert, &sub, &without);
        prop_assert!((a - (b - lambda2 * clip)).abs() <= 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn more_repulsion_lowers_the_loss(
        z in prop::collection::vec(-1.0f64..1.0, 3),
        expert in points(5, 3),
        sub in points(5, 3),
        lambda2 in 0.0f64..2.0,
        bump in 0.01f64..2.0,
    ) {
        let low = LossConfig { lambda2, ..LossConfig::default() };
        let high = LossConfig { lambda2: lambda2 + bump, ..low };
        let mean_repel = sub.iter().map(|e| norm(&z.iter().zip(e).map(|(a, b)| a - b).collect::<Vec<_>>(), NormKind::L2)).sum::<f64>();
        prop_assume!(mean_repel > 1e-9);
        prop_assert!(contextual_by_hand(&z, &expert, &sub, &high) < contextual_by_hand(&z, &expert, &sub, &low));
        prop_assert!(contextual_on_tape(&z, &expert, &sub, &high).0 < contextual_on_tape(&z, &expert, &sub, &low).0);
    }
}

/// Policy predictions at every labelled step, taken one window at a time
/// through the inference path.
#[test]
fn policy_loss_matches_a_tape_free_recomputation() {
    let mut r = rng(5);
    for _ in 0..16 {
        let m = TinyModels::new(&mut r);
        let batch = random_batch(&mut r, 4, 0.3);
        for kind in [NormKind::L2, NormKind::L1] {
            let mut g = Graph::eval();
            let tape = {
                let v = policy_loss(&mut g, &m.policy, &m.encoder, &batch, false, kind).unwrap();
                g.scalar(v)
            };
            let mut total = 0.0;
            let mut count = 0;
            for w in &batch {
                let z = m.encoder.encode(w).unwrap();
                let pred = m.policy.predict(&z, w).unwrap();
                for (i, p) in pred.iter().enumerate() {
                    if !w.action_masked[i] {
                        total += norm(&p.iter().zip(&w.actions[i]).map(|(a, b)| a - b).collect::<Vec<_>>(), kind);
                        count += 1;
                    }
                }
            }
            let by_hand = total / count as f64;
            assert!((tape - by_hand).abs() <= 1e-10, "{tape} vs {by_hand}");
        }
    }
}

fn chain_dataset(demos: usize, episodes: usize, seed: u64) -> Dataset {
    let mut env = EnvKind::ChainStitch.make();
    let sub =
        generate_behavior_dataset(env.as_mut(), &SegmentPlan::for_env(EnvKind::ChainStitch), episodes, seed).unwrap();
    let expert = generate_expert_demos(env.as_mut(), demos, seed + 1, false).unwrap();
    Dataset::new(env.spec().clone(), sub, expert, Precision::F64, seed).unwrap()
}

fn small_model(dataset: &Dataset, k: usize, seed: u64) -> ContextFormer<f64> {
    let spec = dataset.spec();
    let policy =
        PolicyConfig { hidden: 16, layers: 1, heads: 2, context: k, ..PolicyConfig::new(spec.obs_dim, spec.act_dim()) };
    let encoder = EncoderConfig {
        hidden: 16,
        layers: 1,
        heads: 2,
        max_len: k,
        ..EncoderConfig::new(spec.obs_dim, spec.act_dim())
    };
    ContextFormer::new(PolicyConfig { z_dim: 4, ..policy }, EncoderConfig { z_dim: 4, ..encoder }, seed).unwrap()
}

fn quick_config(k: usize) -> TrainConfig {
    let opt = AdamConfig { lr: 1e-3, warmup_steps: 5, ..AdamConfig::default() };
    TrainConfig {
        batch_size: 8,
        context: k,
        groups_per_epoch: 4,
        policy_opt: opt,
        encoder_opt: opt,
        ..TrainConfig::default()
    }
}

#[test]
fn each_phase_touches_only_its_parameters() {
    let data = chain_dataset(2, 40, 3);
    let sampler = WindowSampler::new(&data, 5).unwrap();
    let mut model = small_model(&data, 5, 3);
    let mut state = TrainState::new(quick_config(5), &model).unwrap();
    let snap = |m: &ContextFormer<f64>| {
        (m.policy.params().snapshot(), m.encoder.params().snapshot(), m.latent.params().snapshot())
    };
    for _ in 0..3 {
        let batch = sampler.mixture_batch(state.rng(), 8, None);
        let expert = sampler.expert_batch(state.rng(), 8);
        let sub = sampler.suboptimal_batch(state.rng(), 8);

        let before = snap(&model);
        phase_a_step(&mut state, &mut model, &batch).unwrap();
        let after = snap(&model);
        assert_ne!(before.0, after.0);
        assert_ne!(before.1, after.1);
        assert_eq!(before.2, after.2);

        let before = after;
        phase_b_step(&mut state, &mut model, &expert, &sub).unwrap();
        let after = snap(&model);
        assert_eq!(before.0, after.0);
        assert_ne!(before.1, after.1);
        assert_eq!(before.2, after.2);

        let before = after;
        phase_c_step(&mut state, &mut model, &expert, &sub).unwrap();
        let after = snap(&model);
        assert_eq!(before.0, after.0);
        assert_eq!(before.1, after.1);
        assert_ne!(before.2, after.2);
    }
}

#[test]
fn attract_only_encoder_updates_ignore_suboptimal_windows() {
    let data = chain_dataset(2, 40, 4);
    let sampler = WindowSampler::new(&data, 5).unwrap();
    let config = TrainConfig { encoder_repulsion: false, ..quick_config(5) };
    let mut r = rng(4);
    let expert = sampler.expert_batch(&mut r, 8);
    let sub_a = sampler.suboptimal_batch(&mut r, 8);
    let sub_b = sampler.suboptimal_batch(&mut r, 8);
    let run = |sub: &[Fragment]| {
        let mut model = small_model(&data, 5, 4);
        let mut state = TrainState::new(config.clone(), &model).unwrap();
        phase_b_step(&mut state, &mut model, &expert, sub).unwrap();
        model.encoder.params().snapshot()
    };
    assert_eq!(run(&sub_a), run(&sub_b));
}

#[test]
fn training_metrics_are_reproducible() {
    let data = chain_dataset(2, 40, 6);
    let sampler = WindowSampler::new(&data, 5).unwrap();
    let run = || {
        let mut model = small_model(&data, 5, 6);
        let mut state = TrainState::new(quick_config(5), &model).unwrap();
        let metrics: Vec<_> = (0..2)
            .map(|_| {
                let mut m = train_epoch(&mut state, &mut model, &sampler).unwrap();
                m.seconds = 0.0;
                m
            })
            .collect();
        (metrics, model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    for (x, y) in [(&ma.policy.params(), &mb.policy.params()), (&ma.encoder.params(), &mb.encoder.params())] {
        assert_eq!(x.snapshot(), y.snapshot());
    }
    assert_eq!(ma.latent.values(), mb.latent.values());
}

#[test]
fn missing_split_is_refused_before_training() {
    let data = chain_dataset(1, 10, 7);
    let no_expert = Dataset::new(data.spec().clone(), data.suboptimal.clone(), Vec::new(), Precision::F64, 7).unwrap();
    assert!(WindowSampler::new(&no_expert, 5).is_err());
    let no_sub = Dataset::new(data.spec().clone(), Vec::new(), data.expert.clone(), Precision::F64, 7).unwrap();
    assert!(WindowSampler::new(&no_sub, 5).is_err());
}

#[test]
fn phase_c_alone_reaches_a_single_demo_embedding() {
    let data = chain_dataset(1, 10, 8);
    let mut model = small_model(&data, 5, 8);
    let window = data.expert[0].window(4, 5, data.stats()).unwrap();
    let target = model.encoder.encode(&window).unwrap();
    let latent = AdamConfig { lr: 1e-2, weight_decay: 0.0, warmup_steps: 0, ..AdamConfig::default() };
    let config = TrainConfig {
        loss: LossConfig { lambda2: 0.0, ..LossConfig::default() },
        latent_opt: latent,
        ..quick_config(5)
    };
    let mut state = TrainState::new(config, &model).unwrap();
    let expert = vec![window.clone(); 4];
    let mut gap = f64::INFINITY;
    for step in 0..2000 {
        phase_c_step(&mut state, &mut model, &expert, &expert).unwrap();
        let z = model.latent.values();
        gap = z.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if gap < 1e-3 {
            eprintln!("converged after {step} steps");
            break;
        }
    }
    assert!(gap < 1e-3, "distance {gap}");
}
