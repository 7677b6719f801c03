use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{select_action, LearnerState};
use crate::dyan::{BoundParams, DyanParams};
use crate::env::{
    scripted_opponent, Action, JointAction, Observation, Outcome, StepResult, Team, WorldConfig,
    WorldState,
};
use crate::replay::{AgentStep, TaskBuffer, Transition};
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

/// Controller of team B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpponentMode {
    Scripted,
    /// Team B acts with the learner's current network and ε.
    SelfPlay,
    /// Team B always stays in place.
    Stationary,
}

impl std::str::FromStr for OpponentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scripted" => Ok(OpponentMode::Scripted),
            "self-play" => Ok(OpponentMode::SelfPlay),
            "stationary" => Ok(OpponentMode::Stationary),
            other => Err(Error::Config(format!("unknown opponent {other:?}"))),
        }
    }
}

/// Summary of one finished (or running) episode from team A's side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub steps: u64,
    pub reward: f64,
    pub outcome: Outcome,
    pub kills: usize,
    pub survivors: usize,
}

/// Steps one episode with team A driven by a DyAN and team B by the opponent.
#[derive(Debug, Clone)]
pub struct EpisodeRunner {
    world: WorldState,
    task_id: usize,
    opponent: OpponentMode,
    hidden: Vec<Vec<f64>>,
    obs: Vec<Option<Arc<Observation>>>,
    stats: EpisodeStats,
}

impl EpisodeRunner {
    pub fn new(config: &WorldConfig, task_id: usize, opponent: OpponentMode) -> Result<Self> {
        let world = WorldState::reset(config)?;
        let n = world.agents.len();
        Ok(EpisodeRunner {
            world,
            task_id,
            opponent,
            hidden: vec![Vec::new(); n],
            obs: vec![None; n],
            stats: EpisodeStats {
                steps: 0,
                reward: 0.0,
                outcome: Outcome::Ongoing,
                kills: 0,
                survivors: config.team_a_size,
            },
        })
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn is_done(&self) -> bool {
        self.world.is_done()
    }

    pub fn stats(&self) -> &EpisodeStats {
        &self.stats
    }

    fn cached_obs(&mut self, id: usize) -> Result<Arc<Observation>> {
        if let Some(o) = &self.obs[id] {
            return Ok(o.clone());
        }
        let o = Arc::new(self.world.observe(id)?);
        self.obs[id] = Some(o.clone());
        Ok(o)
    }

    /// Advances one step. Every alive team-A agent acts from the same
    /// `params` snapshot; the returned transition holds their experience.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        params: &DyanParams,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<(Transition, StepResult)> {
        if self.is_done() {
            return Err(Error::Protocol("episode already finished".into()));
        }
        let mut joint = JointAction::new(self.world.agents.len());
        let mut acting = Vec::new();
        let learners: Vec<usize> = self.world.alive_ids(Team::A).collect();
        for id in learners {
            let obs = self.cached_obs(id)?;
            let out = params.forward(&obs, &self.hidden[id])?;
            let a = select_action(&out.q_values, epsilon, rng)?;
            joint.set(id, Action::from_id(a)?);
            acting.push((id, obs, std::mem::take(&mut self.hidden[id]), a, out.hidden_next));
        }
        let opponents: Vec<usize> = self.world.alive_ids(Team::B).collect();
        for id in opponents {
            let a = match self.opponent {
                OpponentMode::Scripted => scripted_opponent(&self.world, id)?,
                OpponentMode::Stationary => Action::STAY,
                OpponentMode::SelfPlay => {
                    let obs = self.cached_obs(id)?;
                    let out = params.forward(&obs, &self.hidden[id])?;
                    self.hidden[id] = out.hidden_next;
                    Action::from_id(select_action(&out.q_values, epsilon, rng)?)?
                }
            };
            joint.set(id, a);
        }
        let result = self.world.step(&joint)?;
        self.obs.iter_mut().for_each(|o| *o = None);

        let mut agents = Vec::with_capacity(acting.len());
        for (id, obs, hidden, action, hidden_next) in acting {
            let next_obs = if !result.done && self.world.agents[id].alive {
                Some(self.cached_obs(id)?)
            } else {
                None
            };
            self.hidden[id] = hidden_next.clone();
            agents.push(AgentStep {
                agent: id,
                obs,
                hidden,
                action,
                reward: result.rewards[id],
                next_obs,
                next_hidden: hidden_next,
            });
        }
        let team_reward = result.team_reward[Team::A.index()];
        self.stats.steps += 1;
        self.stats.reward += team_reward;
        self.stats.kills += result.kills_this_step[Team::A.index()];
        self.stats.survivors = self.world.alive_count(Team::A);
        self.stats.outcome = result.outcome;
        let transition = Transition {
            task_id: self.task_id,
            agents,
            team_reward,
            done: result.done,
        };
        Ok((transition, result))
    }

    /// Runs to the end without storing experience.
    pub fn play<R: Rng + ?Sized>(
        mut self,
        params: &DyanParams,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<EpisodeStats> {
        while !self.is_done() {
            self.step(params, epsilon, rng)?;
        }
        Ok(self.stats)
    }
}

/// Source of extra loss terms added to every gradient update.
pub trait TrainHook {
    fn extra_loss(
        &mut self,
        g: &mut Graph,
        online: &BoundParams,
        target: &DyanParams,
        batch: &[&Transition],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Var>>;
}

impl TrainHook for () {
    fn extra_loss(
        &mut self,
        _: &mut Graph,
        _: &BoundParams,
        _: &DyanParams,
        _: &[&Transition],
        _: &mut ChaCha8Rng,
    ) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// One training task: world, step budget, opponent and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRun {
    pub task_id: usize,
    pub world: WorldConfig,
    pub budget_steps: u64,
    pub opponent: OpponentMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: u64,
    pub steps: u64,
    pub total_steps: u64,
    pub epsilon: f64,
    /// Mean training loss over the episode's updates, if any.
    pub loss: Option<f64>,
    pub reward: f64,
    pub outcome: Outcome,
    pub kills: usize,
    pub survivors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrainReport {
    pub episodes: Vec<EpisodeLog>,
    pub steps: u64,
    pub updates: u64,
}

/// Trains whole episodes until the task's step budget is reached, so the
/// overshoot is below one episode.
pub fn train_task(
    learner: &mut LearnerState,
    run: &TaskRun,
    buffer: &mut TaskBuffer,
    hook: &mut dyn TrainHook,
    on_episode: &mut dyn FnMut(&EpisodeLog) -> Result<()>,
) -> Result<TaskTrainReport> {
    if run.budget_steps == 0 {
        return Err(Error::Config("task budget must be positive".into()));
    }
    if buffer.task_id() != run.task_id {
        return Err(Error::Protocol(format!(
            "buffer for task {} used for task {}",
            buffer.task_id(),
            run.task_id
        )));
    }
    run.world.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut total_steps = 0u64;
    let mut episodes = Vec::new();
    let updates_before = learner.updates;
    let batch_size = learner.config.batch_size;
    let train_every = learner.config.train_every;
    while total_steps < run.budget_steps {
        let episode_seed = rng.gen::<u64>();
        let world = run.world.clone().with_seed(episode_seed);
        let mut runner = EpisodeRunner::new(&world, run.task_id, run.opponent)?;
        let epsilon = learner.epsilon();
        let (mut loss_sum, mut loss_n) = (0.0, 0u64);
        while !runner.is_done() {
            let (transition, _) = runner.step(&learner.online, epsilon, &mut rng)?;
            buffer.push(transition)?;
            total_steps += 1;
            if total_steps.is_multiple_of(train_every) && buffer.is_ready() {
                let batch = buffer.sample(batch_size, &mut rng)?;
                let report = {
                    let rng = &mut rng;
                    let hook = &mut *hook;
                    let batch_ref = &batch;
                    learner.train_step(&batch, move |g, online, target| {
                        hook.extra_loss(g, online, target, batch_ref, rng)
                    })?
                };
                loss_sum += report.loss;
                loss_n += 1;
            }
        }
        let stats = runner.stats().clone();
        let log = EpisodeLog {
            episode: learner.episodes,
            steps: stats.steps,
            total_steps,
            epsilon,
            loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
            reward: stats.reward,
            outcome: stats.outcome,
            kills: stats.kills,
            survivors: stats.survivors,
        };
        on_episode(&log)?;
        episodes.push(log);
        learner.episodes += 1;
    }
    Ok(TaskTrainReport {
        episodes,
        steps: total_steps,
        updates: learner.updates - updates_before,
    })
}

pub fn outcome_label(o: Outcome) -> &'static str {
    match o {
        Outcome::AWins => "a_wins",
        Outcome::BWins => "b_wins",
        Outcome::Draw => "draw",
        Outcome::Ongoing => "ongoing",
    }
}

/// Appends per-episode records to a CSV file.
pub struct LogWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl LogWriter {
    pub const HEADER: &'static str =
        "episode,steps,total_steps,epsilon,loss,reward,outcome,kills,survivors";

    pub fn create(path: &Path) -> Result<LogWriter> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = LogWriter {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        };
        writeln!(w.out, "{}", Self::HEADER).map_err(|e| Error::io(path, e))?;
        Ok(w)
    }

    pub fn write(&mut self, log: &EpisodeLog) -> Result<()> {
        writeln!(self.out, "{}", Self::row(log)).map_err(|e| Error::io(&self.path, e))
    }

    pub fn row(log: &EpisodeLog) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            log.episode,
            log.steps,
            log.total_steps,
            log.epsilon,
            log.loss.map(|l| l.to_string()).unwrap_or_default(),
            log.reward,
            outcome_label(log.outcome),
            log.kills,
            log.survivors
        )
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
