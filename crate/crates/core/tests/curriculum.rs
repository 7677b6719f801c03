use std::fs;

use dymacl::curriculum::{self, evaluate, task_seed, CurriculumSpec, TaskSpec};
use dymacl::dyan::{self, DyanParams, DyanSpec};
use dymacl::env::{scripted_opponent, Action, JointAction, Outcome, Team, WorldConfig, WorldState};
use dymacl::learners::{train_task, LearnerConfig, LearnerState, OpponentMode, TaskRun};
use dymacl::replay::{ReplayConfig, TaskBuffer};
use dymacl::tensor::Tensor;
use dymacl::transfer::{TransferKind, TransferMode};
use dymacl::Error;

const STAY: usize = 6;

fn small_spec(tasks: Vec<TaskSpec>, kind: TransferKind) -> CurriculumSpec {
    let mut spec = CurriculumSpec::new(tasks);
    spec.seed = 3;
    spec.eval_episodes = 8;
    spec.jumpstart_episodes = 5;
    spec.transfer = TransferMode::new(kind);
    spec.learner = LearnerConfig {
        batch_size: 4,
        epsilon_anneal_episodes: 5,
        learning_rate: 1e-3,
        replay: ReplayConfig {
            capacity: 500,
            min_fill: 20,
        },
        train_every: 4,
        ..LearnerConfig::default()
    };
    spec.dyan = DyanSpec {
        hidden_units: 8,
        ..DyanSpec::default()
    };
    spec
}

fn short_task(a: usize, budget: u64) -> TaskSpec {
    TaskSpec {
        max_steps: 40,
        ..TaskSpec::new(a, a, budget)
    }
}

#[test]
fn magent_preset_budgets() {
    let spec = CurriculumSpec::from_toml(curriculum::MAGENT_PRESET).unwrap();
    let budgets: Vec<u64> = spec.tasks.iter().map(|t| t.budget_steps).collect();
    assert_eq!(budgets, vec![7500, 4500, 1500, 750, 10000]);
}

#[test]
fn zero_budget_and_missing_file_are_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[[tasks]]\nteam_a = 3\nteam_b = 3\nbudget_steps = 0\n").unwrap();
    assert!(matches!(curriculum::parse_spec(&path), Err(Error::Parse { .. })));
    let missing = curriculum::parse_spec(&dir.path().join("nope.toml")).unwrap_err();
    assert!(missing.to_string().contains("config not found"));
}

#[test]
fn single_task_run_matches_a_bare_learner() {
    let spec = small_spec(vec![short_task(2, 300)], TransferKind::None);
    let dir = tempfile::tempdir().unwrap();
    let report = curriculum::run(&spec, dir.path()).unwrap();

    let mut learner = LearnerState::new(&spec.learner, &spec.dyan, spec.seed).unwrap();
    let mut buffer = TaskBuffer::new(0, 500, 20).unwrap();
    let run = TaskRun {
        task_id: 0,
        world: spec.tasks[0].world(),
        budget_steps: 300,
        opponent: OpponentMode::Scripted,
        seed: spec.seed,
    };
    let bare = train_task(&mut learner, &run, &mut buffer, &mut (), &mut |_| Ok(())).unwrap();

    let task = &report.tasks[0];
    assert_eq!(task.episode_logs, bare.episodes);
    assert_eq!(task.updates, bare.updates);
    assert!(bare.updates > 0);
    assert_eq!(task.checkpoint_hash, dyan::checkpoint_hash(&learner.online));
    let (saved, _) = dyan::load(&dir.path().join(&task.checkpoint)).unwrap();
    assert_eq!(saved, learner.online);
}

#[test]
fn budgets_are_met_within_one_episode() {
    let spec = small_spec(vec![short_task(1, 120), short_task(2, 150)], TransferKind::None);
    let dir = tempfile::tempdir().unwrap();
    let report = curriculum::run(&spec, dir.path()).unwrap();
    for (t, task) in report.tasks.iter().zip(&spec.tasks) {
        assert!(t.steps >= task.budget_steps);
        assert!(t.steps < task.budget_steps + task.max_steps as u64);
        let last = t.episode_logs.last().unwrap();
        assert_eq!(last.total_steps, t.steps);
    }
}

#[test]
fn reload_chains_checkpoints_and_scratch_does_not() {
    let tasks = vec![short_task(2, 150), short_task(3, 150)];
    let dir = tempfile::tempdir().unwrap();
    let reload = curriculum::run(&small_spec(tasks.clone(), TransferKind::ModelReload), &dir.path().join("r")).unwrap();
    assert_eq!(reload.tasks[1].initial_hash, reload.tasks[0].checkpoint_hash);
    assert_eq!(
        reload.tasks[1].parent_checkpoint_hash.as_deref(),
        Some(reload.tasks[0].checkpoint_hash.as_str())
    );

    let spec = small_spec(tasks, TransferKind::None);
    let scratch = curriculum::run(&spec, &dir.path().join("s")).unwrap();
    assert_eq!(scratch.tasks[1].parent_checkpoint_hash, None);
    let fresh = DyanParams::build(&spec.dyan, task_seed(spec.seed, 1)).unwrap();
    assert_eq!(scratch.tasks[1].initial_hash, dyan::checkpoint_hash(&fresh));
    assert_ne!(scratch.tasks[1].initial_hash, scratch.tasks[0].checkpoint_hash);
}

#[test]
fn runs_are_reproducible_and_write_every_artifact() {
    let spec = small_spec(vec![short_task(1, 100), short_task(2, 100)], TransferKind::BufferReuse);
    let dir = tempfile::tempdir().unwrap();
    let a = curriculum::run(&spec, &dir.path().join("a")).unwrap();
    let b = curriculum::run(&spec, &dir.path().join("b")).unwrap();
    assert_eq!(a.tasks, b.tasks);
    for file in [
        "summary.json",
        "config.toml",
        "curves/task0.csv",
        "curves/task1.csv",
        "checkpoints/task0.ckpt",
        "checkpoints/task1.ckpt",
    ] {
        let x = fs::read(dir.path().join("a").join(file)).unwrap();
        let y = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(x, y, "{file} differs");
    }
    assert!(dir.path().join("a/timing.json").exists());
    let echoed = curriculum::parse_spec(&dir.path().join("a/config.toml")).unwrap();
    assert_eq!(echoed, spec);
}

#[test]
fn distillation_curriculum_runs() {
    let spec = small_spec(vec![short_task(1, 100), short_task(2, 100)], TransferKind::Distillation);
    let dir = tempfile::tempdir().unwrap();
    let r = curriculum::run(&spec, dir.path()).unwrap();
    assert_eq!(r.tasks.len(), 2);
    assert!(r.tasks.iter().all(|t| t.metrics.win_rate >= 0.0 && t.metrics.win_rate <= 1.0));
}

fn stay_network() -> DyanParams {
    let spec = DyanSpec::default();
    let mut tensors: Vec<Tensor> = spec
        .layout()
        .into_iter()
        .map(|(_, shape, _)| Tensor::zeros(shape))
        .collect();
    tensors.last_mut().unwrap().data_mut()[STAY] = 1.0;
    DyanParams::from_tensors(&spec, tensors).unwrap()
}

#[test]
fn always_stay_never_wins() {
    // Simulate the matchup directly: the scripted side walks over and
    // attacks, the stay policy never fights back.
    for seed in 0..10 {
        let mut world = WorldState::reset(&WorldConfig::battle(1, 1).with_seed(seed)).unwrap();
        while !world.is_done() {
            let mut joint = JointAction::new(2);
            joint.set(0, Action::from_id(STAY).unwrap());
            if world.agents[1].alive {
                joint.set(1, scripted_opponent(&world, 1).unwrap());
            }
            world.step(&joint).unwrap();
        }
        assert_eq!(world.outcome(), Outcome::BWins, "seed {seed}");
        assert_eq!(world.alive_count(Team::B), 1);
    }
    let m = evaluate(&stay_network(), &WorldConfig::battle(1, 1), 50, 0, OpponentMode::Scripted).unwrap();
    assert_eq!(m.win_rate, 0.0);
    assert_eq!(m.draw_rate, 0.0);
    assert_eq!(m.mean_kill_count, 0.0);
    assert_eq!(m.mean_survivors, 0.0);
}

#[test]
fn evaluation_is_bounded_and_repeatable() {
    let net = DyanParams::build(&DyanSpec::default(), 4).unwrap();
    let world = WorldConfig::battle(1, 1);
    let a = evaluate(&net, &world, 100, 9, OpponentMode::Scripted).unwrap();
    let b = evaluate(&net, &world, 100, 9, OpponentMode::Scripted).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.win_rate));
    assert!(a.mean_survivors <= 1.0);
    assert!(matches!(
        evaluate(&net, &world, 0, 9, OpponentMode::Scripted),
        Err(Error::Config(_))
    ));
}
