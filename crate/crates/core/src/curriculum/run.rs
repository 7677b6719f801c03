use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{evaluate, CurriculumSpec, Metrics};
use crate::container::write_atomic;
use crate::dyan::{self, checkpoint_hash};
use crate::learners::{train_task, EpisodeLog, LearnerState, LogWriter, TaskRun};
use crate::replay::TaskBuffer;
use crate::stats::mean;
use crate::transfer::{model_reload, TeacherSet, TransferHook, TransferKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub index: usize,
    pub label: String,
    pub map_side: usize,
    pub budget_steps: u64,
    pub steps: u64,
    pub episodes: usize,
    pub updates: u64,
    /// Relative to the run directory.
    pub checkpoint: String,
    pub checkpoint_hash: String,
    /// Hash of the parameters the task started from.
    pub initial_hash: String,
    /// Set when the task was initialised from the previous checkpoint.
    pub parent_checkpoint_hash: Option<String>,
    pub curve: String,
    /// Mean training reward over the first `jumpstart_episodes` episodes.
    pub jumpstart_reward: f64,
    pub metrics: Metrics,
    #[serde(skip)]
    pub episode_logs: Vec<EpisodeLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Hash of the crate version and the canonical config.
    pub version_hash: String,
    pub seed: u64,
    pub transfer: String,
    pub tasks: Vec<TaskReport>,
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Seed of task `k`. Task 0 uses the run seed unchanged, so a one-task run
/// matches a learner seeded directly with it.
pub fn task_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        return seed;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng.gen()
}

fn eval_seed(seed: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    rng.set_stream(k as u64);
    rng.gen()
}

fn version_hash(spec: &CurriculumSpec) -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(serde_json::to_vec(spec).expect("spec serialises"));
    hex::encode(h.finalize())
}

pub fn run(spec: &CurriculumSpec, out: &Path) -> Result<RunReport> {
    run_with_progress(spec, out, &mut |_| {})
}

/// Runs every task in order and writes `config.toml`, `summary.json`,
/// `timing.json`, `curves/task{k}.csv` and `checkpoints/task{k}.ckpt` under
/// `out`. On failure the summary holds the completed tasks and the error.
pub fn run_with_progress(
    spec: &CurriculumSpec,
    out: &Path,
    on_task: &mut dyn FnMut(&TaskReport),
) -> Result<RunReport> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("config.toml"), spec.to_toml().as_bytes())?;
    let started = Instant::now();
    let mut report = RunReport {
        version_hash: version_hash(spec),
        seed: spec.seed,
        transfer: spec.transfer.kind.to_string(),
        tasks: Vec::new(),
        error: None,
        wall_clock_secs: 0.0,
    };
    let result = run_tasks(spec, out, &mut report, on_task);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Err(e) = &result {
        report.error = Some(e.to_string());
    }
    write_summary(&report, out)?;
    result.map(|_| report)
}

fn write_summary(report: &RunReport, out: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    write_atomic(&out.join("summary.json"), json.as_bytes())?;
    let timing = serde_json::json!({ "wall_clock_secs": report.wall_clock_secs });
    write_atomic(&out.join("timing.json"), timing.to_string().as_bytes())
}

fn run_tasks(
    spec: &CurriculumSpec,
    out: &Path,
    report: &mut RunReport,
    on_task: &mut dyn FnMut(&TaskReport),
) -> Result<()> {
    let kind = spec.transfer.kind;
    let mut prior_buffers: Vec<TaskBuffer> = Vec::new();
    let mut teachers = TeacherSet::default();
    let mut previous: Option<PathBuf> = None;
    for (k, task) in spec.tasks.iter().enumerate() {
        let seed = task_seed(spec.seed, k);
        let (mut learner, parent) = match (&previous, kind) {
            (Some(path), TransferKind::ModelReload) => {
                let (l, hash) = model_reload(path, &spec.learner, &spec.dyan)?;
                (l, Some(hash))
            }
            _ => (LearnerState::new(&spec.learner, &spec.dyan, seed)?, None),
        };
        let initial_hash = checkpoint_hash(&learner.online);
        let world = task.world();
        let run = TaskRun {
            task_id: k,
            world: world.clone(),
            budget_steps: task.budget_steps,
            opponent: spec.opponent,
            seed,
        };
        let mut buffer = TaskBuffer::new(k, spec.learner.replay.capacity, spec.learner.replay.min_fill)?;
        let curve_rel = format!("curves/task{k}.csv");
        let mut log = LogWriter::create(&out.join(&curve_rel))?;
        let mut hook = TransferHook {
            mode: &spec.transfer,
            prior_buffers: &prior_buffers,
            teachers: &teachers,
            algorithm: spec.learner.algorithm,
            gamma: spec.learner.gamma,
            batch_size: spec.learner.batch_size,
        };
        let trained = train_task(&mut learner, &run, &mut buffer, &mut hook, &mut |e| log.write(e))?;
        log.finish()?;

        let ckpt_rel = format!("checkpoints/task{k}.ckpt");
        let ckpt = out.join(&ckpt_rel);
        let mut meta = BTreeMap::new();
        meta.insert("task".into(), k.to_string());
        meta.insert("label".into(), task.label());
        meta.insert("seed".into(), spec.seed.to_string());
        if let Some(p) = &parent {
            meta.insert("parent".into(), p.clone());
        }
        dyan::save(&learner.online, &ckpt, &meta)?;
        let metrics = evaluate(
            &learner.online,
            &world,
            spec.eval_episodes,
            eval_seed(spec.seed, k),
            spec.opponent,
        )?;
        let first: Vec<f64> = trained
            .episodes
            .iter()
            .take(spec.jumpstart_episodes)
            .map(|e| e.reward)
            .collect();
        let task_report = TaskReport {
            index: k,
            label: task.label(),
            map_side: world.map_side,
            budget_steps: task.budget_steps,
            steps: trained.steps,
            episodes: trained.episodes.len(),
            updates: trained.updates,
            checkpoint: ckpt_rel,
            checkpoint_hash: checkpoint_hash(&learner.online),
            initial_hash,
            parent_checkpoint_hash: parent,
            curve: curve_rel,
            jumpstart_reward: mean(&first),
            metrics,
            episode_logs: trained.episodes,
        };
        on_task(&task_report);
        report.tasks.push(task_report);
        write_summary(report, out)?;

        match kind {
            TransferKind::BufferReuse => prior_buffers.push(buffer),
            TransferKind::Distillation => teachers.push(learner.online.clone()),
            _ => {}
        }
        if kind == TransferKind::BufferReuse && spec.transfer.frozen_reuse_targets {
            teachers.push(learner.online.clone());
        }
        previous = Some(ckpt);
    }
    Ok(())
}
