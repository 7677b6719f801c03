use std::collections::BTreeMap;
use std::sync::Arc;

use dymacl::curriculum::evaluate;
use dymacl::dyan::{self, DyanParams, DyanSpec};
use dymacl::env::{Observation, Team, WorldConfig, WorldState};
use dymacl::learners::{td_loss, Algorithm, LearnerConfig, LearnerState, OpponentMode, Reduction};
use dymacl::replay::{AgentStep, TaskBatch, Transition};
use dymacl::tensor::Tensor;
use dymacl::transfer::{
    buffer_reuse_loss, distillation_loss, model_reload, TeacherSet,
};
use dymacl::verify::{random_observation, random_transition};
use dymacl::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn zero_params(spec: &DyanSpec) -> DyanParams {
    let tensors = spec
        .layout()
        .into_iter()
        .map(|(_, shape, _)| Tensor::zeros(shape))
        .collect();
    DyanParams::from_tensors(spec, tensors).unwrap()
}

fn with_head_bias(mut p: DyanParams, bias: &[f64]) -> DyanParams {
    let last = p.tensors().len() - 1;
    p.tensors_mut()[last].data_mut().copy_from_slice(bias);
    p
}

#[test]
fn one_task_reuse_equals_plain_td_loss() {
    let spec = DyanSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let online = DyanParams::build(&spec, 1).unwrap();
    let target = DyanParams::build(&spec, 2).unwrap();
    let batch: Vec<Transition> = (0..8).map(|_| random_transition(&mut rng, &spec, 0, 3, 2)).collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    let reuse = buffer_reuse_loss(
        &[TaskBatch {
            task_id: 0,
            transitions: refs.clone(),
        }],
        &online,
        &target,
        Algorithm::Iql,
        0.98,
    )
    .unwrap();
    let plain = td_loss(&refs, &online, &target, Algorithm::Iql, 0.98, Reduction::Sum).unwrap();
    assert_eq!(reuse.to_bits(), plain.to_bits());
}

#[test]
fn zero_networks_give_k_b_r_squared() {
    let spec = DyanSpec::default();
    let net = zero_params(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (k, b, r) = (3usize, 4usize, 0.75);
    let batches: Vec<Vec<Transition>> = (0..k)
        .map(|task| {
            (0..b)
                .map(|_| {
                    let mut t = random_transition(&mut rng, &spec, task, 2, 1);
                    for a in &mut t.agents {
                        a.reward = r;
                    }
                    t
                })
                .collect()
        })
        .collect();
    let tb: Vec<TaskBatch> = batches
        .iter()
        .enumerate()
        .map(|(task_id, b)| TaskBatch {
            task_id,
            transitions: b.iter().collect(),
        })
        .collect();
    let loss = buffer_reuse_loss(&tb, &net, &net, Algorithm::Iql, 0.98).unwrap();
    assert!((loss - (k * b) as f64 * r * r).abs() < 1e-12);
}

#[test]
fn two_task_reuse_matches_double_sum() {
    let spec = DyanSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let online = DyanParams::build(&spec, 3).unwrap();
    let target = DyanParams::build(&spec, 4).unwrap();
    let gamma = 0.98;
    let batches: Vec<Vec<Transition>> = (0..2)
        .map(|task| (0..4).map(|_| random_transition(&mut rng, &spec, task, 2, 3)).collect())
        .collect();
    let mut want = 0.0;
    for batch in &batches {
        for t in batch {
            let mut per = 0.0;
            for a in &t.agents {
                let q = online.forward(&a.obs, &a.hidden).unwrap().q_values[a.action];
                let boot = match &a.next_obs {
                    Some(o) => target
                        .forward(o, &a.next_hidden)
                        .unwrap()
                        .q_values
                        .into_iter()
                        .fold(f64::NEG_INFINITY, f64::max),
                    None => 0.0,
                };
                per += (a.reward + gamma * boot - q).powi(2);
            }
            want += per / t.agents.len() as f64;
        }
    }
    let tb: Vec<TaskBatch> = batches
        .iter()
        .enumerate()
        .map(|(task_id, b)| TaskBatch {
            task_id,
            transitions: b.iter().collect(),
        })
        .collect();
    let got = buffer_reuse_loss(&tb, &online, &target, Algorithm::Iql, gamma).unwrap();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn two_action_kl_example() {
    let spec = DyanSpec {
        num_actions: 2,
        ..DyanSpec::default()
    };
    let teacher = with_head_bias(zero_params(&spec), &[1.0, 0.0]);
    let student = zero_params(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let obs = random_observation(&mut rng, 1, 1);
    let teachers = TeacherSet::new(vec![teacher]);
    let kl = distillation_loss(&teachers, &student, &[(&obs, &[][..])], 1.0, false).unwrap();
    let p = [1f64.exp() / (1f64.exp() + 1.0), 1.0 / (1f64.exp() + 1.0)];
    let want: f64 = p.iter().map(|pi| pi * (pi / 0.5).ln()).sum();
    assert!((kl - want).abs() < 1e-12);
    assert!((kl - 0.1111).abs() < 5e-4, "{kl}");
}

#[test]
fn kl_is_zero_only_for_matching_policies() {
    let spec = DyanSpec::default();
    let student = DyanParams::build(&spec, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let states: Vec<(Observation, Vec<f64>)> = (0..5)
        .map(|i| (random_observation(&mut rng, i % 3, 2), vec![0.1; spec.hidden_units]))
        .collect();
    let refs: Vec<(&Observation, &[f64])> = states.iter().map(|(o, h)| (o, h.as_slice())).collect();
    let same = TeacherSet::new(vec![student.clone(), student.clone()]);
    assert_eq!(distillation_loss(&same, &student, &refs, 1.0, false).unwrap(), 0.0);
    let other = TeacherSet::new(vec![student.clone(), DyanParams::build(&spec, 10).unwrap()]);
    assert!(distillation_loss(&other, &student, &refs, 1.0, false).unwrap() > 0.0);
}

#[test]
fn distillation_preconditions() {
    let spec = DyanSpec::default();
    let net = DyanParams::build(&spec, 0).unwrap();
    let obs = random_observation(&mut ChaCha8Rng::seed_from_u64(0), 1, 1);
    let states = [(&obs, &[][..])];
    assert!(matches!(
        distillation_loss(&TeacherSet::default(), &net, &states, 1.0, false),
        Err(Error::Contract(_))
    ));
    let teachers = TeacherSet::new(vec![net.clone()]);
    assert!(matches!(
        distillation_loss(&teachers, &net, &states, 0.0, false),
        Err(Error::Domain(_))
    ));
}

fn trained_3v3(dir: &std::path::Path) -> (DyanParams, std::path::PathBuf) {
    let spec = DyanSpec::default();
    let config = LearnerConfig::default();
    let mut learner = LearnerState::new(&config, &spec, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batch: Vec<Transition> = (0..4).map(|_| random_transition(&mut rng, &spec, 0, 3, 2)).collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    for _ in 0..5 {
        learner.train_step(&refs, |_, _, _| Ok(None)).unwrap();
    }
    let path = dir.join("task0.ckpt");
    dyan::save(&learner.online, &path, &BTreeMap::new()).unwrap();
    (learner.online, path)
}

#[test]
fn reload_into_a_larger_battle_keeps_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (source, path) = trained_3v3(dir.path());
    let (learner, hash) = model_reload(&path, &LearnerConfig::default(), source.spec()).unwrap();
    assert_eq!(hash, dyan::checkpoint_hash(&source));
    assert_eq!(learner.online, source);
    assert_eq!(learner.target, source);
    for (a, b) in learner.online.tensors().iter().zip(source.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let world = WorldState::reset(&WorldConfig::battle(5, 5).with_seed(3)).unwrap();
    for (_, obs) in world.observe_team(Team::A).unwrap() {
        let h = source.spec().initial_hidden();
        let a = learner.online.forward(&obs, &h).unwrap();
        let b = source.forward(&obs, &h).unwrap();
        assert_eq!(a.q_values.len(), 21);
        assert_eq!(a, b);
    }
}

#[test]
fn reload_with_a_different_action_count_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (source, path) = trained_3v3(dir.path());
    let expected = DyanSpec {
        num_actions: 13,
        ..source.spec().clone()
    };
    let err = model_reload(&path, &LearnerConfig::default(), &expected).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("num_actions")), "{err}");
}

#[test]
fn reload_without_training_evaluates_like_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let (source, path) = trained_3v3(dir.path());
    let (learner, _) = model_reload(&path, &LearnerConfig::default(), source.spec()).unwrap();
    let world = WorldConfig::battle(5, 5);
    let a = evaluate(&learner.online, &world, 12, 5, OpponentMode::Scripted).unwrap();
    let b = evaluate(&source, &world, 12, 5, OpponentMode::Scripted).unwrap();
    assert_eq!(a, b);
}

#[test]
fn distillation_uses_stored_hidden_states() {
    let spec = DyanSpec::default();
    let teacher = DyanParams::build(&spec, 1).unwrap();
    let student = DyanParams::build(&spec, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let obs = random_observation(&mut rng, 2, 2);
    let h1: Vec<f64> = (0..spec.hidden_units).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let teachers = TeacherSet::new(vec![teacher]);
    let with_h = distillation_loss(&teachers, &student, &[(&obs, &h1[..])], 1.0, false).unwrap();
    let zero_h = distillation_loss(&teachers, &student, &[(&obs, &[][..])], 1.0, false).unwrap();
    assert_ne!(with_h, zero_h);
    let step = AgentStep {
        agent: 0,
        obs: Arc::new(obs.clone()),
        hidden: h1.clone(),
        action: 0,
        reward: 0.0,
        next_obs: None,
        next_hidden: Vec::new(),
    };
    let t = Transition {
        task_id: 0,
        agents: vec![step],
        team_reward: 0.0,
        done: true,
    };
    let states = dymacl::transfer::batch_states(&[&t]);
    let via_batch = distillation_loss(&teachers, &student, &states, 1.0, false).unwrap();
    assert_eq!(via_batch, with_h);
}
