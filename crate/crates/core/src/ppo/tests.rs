use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::RunConfig;
use crate::encoder::{Arch, EncoderConfig};
use crate::kingraph::GraphSpec;
use crate::nncore::{load_checkpoint, Adam, AdamConfig};
use crate::toyenv::{Scene, Task};

pub(crate) fn smoke_config(arch: Arch) -> RunConfig {
    let mut c = RunConfig {
        arch,
        graph: Some(GraphSpec::bimanual(2, 2)),
        encoder: EncoderConfig {
            d_model: 16,
            heads: 4,
            // the readout token carries no bias, so biases need a second layer to matter
            layers: 2,
            d_ff: 32,
            head_hidden: vec![16],
            ..EncoderConfig::default()
        },
        ..RunConfig::default()
    };
    c.baseline.hidden = Some(vec![32, 32]);
    c.env.horizon = 75;
    c.ppo.num_envs = 4;
    c.ppo.rollout_steps = 32;
    c.ppo.minibatch = 64;
    c.ppo.epochs = 2;
    c.ppo.max_updates = 3;
    c.ppo.eval_every = 2;
    c.ppo.eval_episodes = 2;
    c
}

/// `A_t = sum_k (gamma lambda)^k delta_{t+k}` truncated at the first done.
fn brute_gae(r: &[f64], v: &[f64], d: &[bool], last: f64, g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut w = 1.0;
            for k in t..n {
                let next = if k + 1 < n { v[k + 1] } else { last };
                let delta = r[k] + if d[k] { 0.0 } else { g * next } - v[k];
                acc += w * delta;
                if d[k] {
                    break;
                }
                w *= g * l;
            }
            acc
        })
        .collect()
}

#[test]
fn gae_matches_direct_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.25)).collect();
        let last = rng.random_range(-1.0..1.0);
        let (g, l) = (rng.random_range(0.5..1.0), rng.random_range(0.0..1.0));
        let (a, ret) = compute_gae(&r, &v, &d, last, g, l);
        let b = brute_gae(&r, &v, &d, last, g, l);
        for i in 0..n {
            assert!((a[i] - b[i]).abs() < 1e-12);
            assert_eq!(ret[i], a[i] + v[i]);
        }
    }
}

#[test]
fn rollout_shapes_and_done_masking() {
    let cfg = smoke_config(Arch::PhysGraph);
    let scene = Arc::new(Scene::new(&cfg.graph_spec(), None).unwrap());
    let model = build_policy(&cfg, &scene.graph, scene.action_dim(), 0).unwrap();
    let mut venv = VecEnv::new(scene, &cfg.env, 2, 0, 1).unwrap();
    let mut ppo = cfg.ppo.clone();
    ppo.rollout_steps = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = collect_rollouts(model.as_ref(), &mut venv, &ppo, &mut rng).unwrap();
    assert_eq!(b.len(), 10);
    assert_eq!(b.advantages.len(), 10);
    for (i, s) in b.samples.iter().enumerate() {
        assert_eq!(s.positions.len(), 12, "transition {i}");
    }
    let mean = b.advantages.iter().sum::<f64>() / 10.0;
    let var = b.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 10.0;
    assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-6);
}

#[test]
fn zero_epochs_and_zero_lr_leave_parameters_unchanged() {
    for (epochs, lr) in [(0, 3e-4), (2, 0.0)] {
        let mut cfg = smoke_config(Arch::PhysGraph);
        cfg.ppo.epochs = epochs;
        cfg.ppo.lr = lr;
        let mut t = Trainer::new(cfg, 1).unwrap();
        let before = t.model().store().clone();
        t.step().unwrap();
        t.step().unwrap();
        assert_eq!(&before, t.model().store(), "epochs {epochs}, lr {lr}");
    }
}

#[test]
fn first_minibatch_is_unclipped() {
    let mut cfg = smoke_config(Arch::PhysGraph);
    cfg.ppo.epochs = 1;
    cfg.ppo.minibatch = 4096;
    let scene = Arc::new(Scene::new(&cfg.graph_spec(), None).unwrap());
    let mut model = build_policy(&cfg, &scene.graph, scene.action_dim(), 0).unwrap();
    let mut venv = VecEnv::new(scene, &cfg.env, 4, 0, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = collect_rollouts(model.as_ref(), &mut venv, &cfg.ppo, &mut rng).unwrap();
    let mut opt = Adam::new(AdamConfig::default(), model.store());
    let rep = ppo_update(model.as_mut(), &mut opt, &b, &cfg.ppo, &mut rng, 0).unwrap();
    assert_eq!(rep.minibatches, 1);
    assert_eq!(rep.clip_frac, 0.0);
    assert!(rep.approx_kl.abs() < 1e-12);
    assert!(rep.bias_grad_norm > 0.0);
}

#[test]
fn clipped_samples_carry_no_ratio_gradient() {
    // a single sample with A > 0 whose ratio is pushed above 1 + clip
    let mut cfg = smoke_config(Arch::MlpBaseline);
    cfg.ppo.epochs = 1;
    cfg.ppo.entropy_coef = 0.0;
    cfg.ppo.value_coef = 0.0;
    cfg.ppo.normalize_advantages = false;
    let scene = Arc::new(Scene::new(&cfg.graph_spec(), None).unwrap());
    let mut model = build_policy(&cfg, &scene.graph, scene.action_dim(), 0).unwrap();
    let mut venv = VecEnv::new(scene, &cfg.env, 1, 0, 1).unwrap();
    let mut ppo = cfg.ppo.clone();
    ppo.rollout_steps = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut b = collect_rollouts(model.as_ref(), &mut venv, &ppo, &mut rng).unwrap();
    b.advantages = vec![1.0];
    b.log_probs[0] -= 1.0;
    let before = model.store().clone();
    let mut opt = Adam::new(AdamConfig::default(), model.store());
    let rep = ppo_update(model.as_mut(), &mut opt, &b, &ppo, &mut rng, 0).unwrap();
    assert_eq!(rep.clip_frac, 1.0);
    assert_eq!(rep.grad_norm, 0.0);
    assert_eq!(&before, model.store());
}

#[test]
fn nobias_keeps_lambdas_at_zero() {
    let mut t = Trainer::new(smoke_config(Arch::PhysGraphNoBias), 0).unwrap();
    for _ in 0..2 {
        let (rec, _) = t.step().unwrap();
        let b = rec.bias.unwrap();
        assert_eq!([b.lambda_sp, b.lambda_edge, b.lambda_geo], [0.0; 3]);
        assert!(b.lambda_anat.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn smoke_run_writes_logs_and_honours_eval_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(Arch::PhysGraph);
    cfg.ppo.max_updates = 5;
    let s = train_seed(&cfg, 0, dir.path(), false, &mut |_| {}).unwrap();
    assert_eq!(s.updates, 5);
    let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let recs: Vec<UpdateRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 5);
    let evals: Vec<usize> = recs.iter().filter(|r| r.eval.is_some()).map(|r| r.update).collect();
    assert_eq!(evals, vec![2, 4]);
    assert!(dir.path().join(BEST_CHECKPOINT).exists());
    assert!(dir.path().join(LATEST_CHECKPOINT).exists());
    let saved = RunConfig::from_toml_str(&std::fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap(), &[], None).unwrap();
    assert_eq!(saved.ppo, cfg.ppo);
    assert!(recs.iter().any(|r| r.losses.bias_grad_norm > 0.0));
}

#[test]
fn resume_reproduces_the_next_update_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(Arch::PhysGraph);
    cfg.ppo.max_updates = 2;
    train_seed(&cfg, 7, dir.path(), false, &mut |_| {}).unwrap();
    let ckpt = load_checkpoint(&dir.path().join(LATEST_CHECKPOINT)).unwrap();

    let mut straight = Trainer::new(cfg.clone(), 7).unwrap();
    straight.step().unwrap();
    straight.step().unwrap();
    let (a, _) = straight.step().unwrap();

    let mut resumed = Trainer::from_checkpoint(ckpt).unwrap();
    let (b, _) = resumed.step().unwrap();
    assert_eq!(straight.model().store(), resumed.model().store());
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.mean_reward, b.mean_reward);
}

#[test]
fn resume_extends_the_budget_and_rejects_other_changes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(Arch::PhysGraph);
    cfg.ppo.max_updates = 1;
    train_seed(&cfg, 3, dir.path(), false, &mut |_| {}).unwrap();
    cfg.ppo.max_updates = 2;
    let s = train_seed(&cfg, 3, dir.path(), true, &mut |_| {}).unwrap();
    assert_eq!(s.updates, 2);
    let lines = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 2);

    cfg.ppo.max_updates = 3;
    cfg.ppo.lr *= 2.0;
    let e = train_seed(&cfg, 3, dir.path(), true, &mut |_| {}).unwrap_err().to_string();
    assert!(e.contains("ppo.lr"), "{e}");
}

#[test]
fn mismatched_checkpoint_reports_shapes() {
    let cfg = smoke_config(Arch::PhysGraph);
    let t = Trainer::new(cfg.clone(), 0).unwrap();
    let mut other = cfg;
    other.encoder.d_model = 8;
    other.encoder.d_ff = 16;
    let scene = Scene::new(&other.graph_spec(), None).unwrap();
    let mut m = build_policy(&other, &scene.graph, scene.action_dim(), 0).unwrap();
    let err = install_params(m.as_mut(), t.model().store().clone()).unwrap_err().to_string();
    assert!(err.contains("policy_token: model [1, 8], checkpoint [1, 16]"), "{err}");
}

#[test]
fn env_task_is_respected() {
    let mut cfg = smoke_config(Arch::MlpBaseline);
    cfg.env.task = Task::CarryTool;
    let t = Trainer::new(cfg, 0).unwrap();
    let (s, eps) = t.evaluate(&[1, 2]).unwrap();
    assert_eq!(s.episodes, 2);
    assert!(eps.iter().all(|e| e.task == Task::CarryTool));
}
