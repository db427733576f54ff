use stitchformer::data::{generate_expert_demos, Dataset};
use stitchformer::envs::EnvKind;
use stitchformer::eval::*;
use stitchformer::tensor::AdamConfig;

fn tiny(env: EnvKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(env);
    cfg.suboptimal_episodes = 60;
    cfg.demos = 2;
    cfg.hidden = 16;
    cfg.layers = 1;
    cfg.encoder_heads = 2;
    cfg.z_dim = 4;
    cfg.epochs = 2;
    cfg.eval_episodes = 6;
    cfg.reference_episodes = 50;
    cfg.train.context = 4;
    cfg.train.batch_size = 8;
    cfg.train.groups_per_epoch = 5;
    cfg
}

#[test]
fn expert_scores_one_hundred_and_random_scores_zero() {
    for kind in EnvKind::ALL {
        let reference = ScoreReference::measure(kind, 500, 0).unwrap();
        let mut env = kind.make();
        let expert = rollout_eval(&mut ScriptedExpert, env.as_mut(), 200, 41, &reference).unwrap();
        assert_eq!(expert.normalized_score, 100.0, "{kind:?}");
        assert_eq!(expert.success_rate, 1.0);
        let random = rollout_eval(&mut RandomAgent::new(42), env.as_mut(), 4000, 42, &reference).unwrap();
        assert!(random.normalized_score.abs() <= 2.0, "{kind:?}: {}", random.normalized_score);
    }
}

#[test]
fn episodes_end_within_the_horizon() {
    for kind in EnvKind::ALL {
        let reference = ScoreReference::measure(kind, 50, 0).unwrap();
        let mut env = kind.make();
        let report = rollout_eval(&mut RandomAgent::new(1), env.as_mut(), 100, 1, &reference).unwrap();
        let horizon = env.spec().horizon;
        assert!(report.lengths.iter().all(|&l| (1..=horizon).contains(&l)));
        assert_eq!(report.returns.len(), report.episodes);
        assert!((0.0..=1.0).contains(&report.success_rate));
    }
}

#[test]
fn stitching_reports_are_fair_and_reproducible() {
    let cfg = tiny(EnvKind::ChainStitch);
    let a = stitching_experiment::<f64>(&cfg, |_| Ok(())).unwrap();
    let b = stitching_experiment::<f64>(&cfg, |_| Ok(())).unwrap();
    assert_eq!(a.training_steps_contextformer, a.training_steps_control);
    assert_eq!(a.complete_suboptimal_episodes, 0);
    let strip = |mut r: StitchReport| {
        r.final_metrics.as_mut().unwrap().seconds = 0.0;
        r
    };
    assert_eq!(strip(a), strip(b));
}

#[test]
fn sweep_gives_one_report_per_count() {
    let reports = demo_sweep::<f32>(&ExperimentConfig { epochs: 1, ..tiny(EnvKind::ChainStitch) }, &[1, 3]).unwrap();
    assert_eq!(reports.iter().map(|r| r.demos).collect::<Vec<_>>(), vec![1, 3]);
}

#[test]
fn experiments_refuse_data_with_complete_episodes() {
    let cfg = tiny(EnvKind::ChainStitch);
    let mut env = cfg.env.make();
    let demos = generate_expert_demos(env.as_mut(), 3, 0, false).unwrap();
    let data = Dataset::new(env.spec().clone(), demos.clone(), demos, cfg.precision, 0).unwrap();
    assert!(run_stitching::<f32>(&data, &cfg, |_| Ok(())).is_err());
}

#[test]
fn control_learns_from_complete_demonstrations() {
    let mut cfg = tiny(EnvKind::ChainStitch);
    cfg.hidden = 32;
    cfg.epochs = 40;
    cfg.train.groups_per_epoch = 10;
    cfg.train.batch_size = 16;
    cfg.train.policy_opt = AdamConfig { lr: 1e-3, warmup_steps: 20, ..AdamConfig::default() };
    let mut env = cfg.env.make();
    let demos = generate_expert_demos(env.as_mut(), 20, 3, false).unwrap();
    let data = Dataset::new(env.spec().clone(), demos.clone(), demos, cfg.precision, 0).unwrap();
    let (control, _) = bc_control::<f32>(&data, &cfg).unwrap();
    let reference = ScoreReference::measure(cfg.env, 0, 0).unwrap();
    let mut agent = PolicyAgent { policy: &control, z: vec![0.0; cfg.z_dim], stats: data.stats() };
    let report = rollout_eval(&mut agent, env.as_mut(), 50, 1000, &reference).unwrap();
    assert!(report.success_rate >= 0.8, "{}", report.success_rate);
}

#[test]
fn phase_a_loss_falls_over_fifty_epochs() {
    let cfg = ExperimentConfig { epochs: 50, ..ExperimentConfig::new(EnvKind::ChainStitch) };
    let data = cfg.build_dataset().unwrap();
    let mut losses = Vec::new();
    train_contextformer::<f32>(&data, &cfg, |m| {
        losses.push(m.loss_a);
        Ok(())
    })
    .unwrap();
    let (first, last) = (losses[0], losses[49]);
    assert!(last < 0.25 * first, "{first} -> {last}");
}
