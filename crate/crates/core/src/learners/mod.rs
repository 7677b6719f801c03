//! IQL and VDN learners over a shared DyAN, with ε-greedy exploration and a
//! periodically refreshed target network.

mod episode;
mod loss;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dyan::{BoundParams, DyanParams, DyanSpec};
use crate::replay::{ReplayConfig, Transition};
use crate::tensor::{clip_grad_norm, Graph, OptimizerKind, OptimizerState, Var};
use crate::{Error, Result};

pub use episode::{
    outcome_label, train_task, EpisodeLog, EpisodeRunner, EpisodeStats, LogWriter, OpponentMode,
    TaskRun,
    TaskTrainReport, TrainHook,
};
pub use loss::{
    bootstrap_value, iql_loss, loss_and_grads, td_loss, td_loss_on_graph, transition_loss,
    vdn_loss, Algorithm, Reduction,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub batch_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes over which ε decays linearly.
    pub epsilon_anneal_episodes: u64,
    pub target_update_interval: u64,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub optimizer: OptimizerKind,
    pub replay: ReplayConfig,
    /// Env steps between gradient updates.
    pub train_every: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            algorithm: Algorithm::Iql,
            gamma: 0.98,
            batch_size: 32,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_anneal_episodes: 99,
            target_update_interval: 20,
            learning_rate: 1e-4,
            grad_clip: 10.0,
            optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
            },
            replay: ReplayConfig::default(),
            train_every: 1,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !unit(self.epsilon_start) || !unit(self.epsilon_end) {
            return Err(Error::Config("epsilon bounds must lie in [0, 1]".into()));
        }
        if self.batch_size == 0
            || self.epsilon_anneal_episodes == 0
            || self.target_update_interval == 0
            || self.train_every == 0
        {
            return Err(Error::Config(
                "batch size, anneal length and intervals must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config(
                "learning rate and gradient clip must be positive".into(),
            ));
        }
        if self.replay.capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(())
    }

    /// `max(end, start − e·(start − end)/anneal)`.
    pub fn epsilon(&self, episode: u64) -> f64 {
        let slope = (self.epsilon_start - self.epsilon_end) / self.epsilon_anneal_episodes as f64;
        (self.epsilon_start - episode as f64 * slope).max(self.epsilon_end)
    }

    fn optimizer(&self) -> OptimizerState {
        match self.optimizer {
            OptimizerKind::Adam { .. } => {
                OptimizerState::new(self.optimizer, self.learning_rate, 1e-8)
            }
            OptimizerKind::RmsProp { .. } => {
                OptimizerState::new(self.optimizer, self.learning_rate, 1e-5)
            }
        }
    }
}

/// ε-greedy choice; the greedy branch takes the lowest index among ties.
/// Always draws one uniform number so the stream advances identically for any ε.
pub fn select_action<R: Rng + ?Sized>(q_values: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
    if q_values.is_empty() {
        return Err(Error::Contract("no Q-values to choose from".into()));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Contract(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if rng.gen::<f64>() < epsilon {
        return Ok(rng.gen_range(0..q_values.len()));
    }
    Ok(greedy(q_values))
}

pub fn greedy(q_values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &q) in q_values.iter().enumerate() {
        if q > q_values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub td_loss: f64,
    pub extra_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub target_refreshed: bool,
}

#[derive(Debug, Clone)]
pub struct LearnerState {
    pub config: LearnerConfig,
    pub online: DyanParams,
    pub target: DyanParams,
    pub optimizer: OptimizerState,
    pub updates: u64,
    pub episodes: u64,
}

impl LearnerState {
    pub fn new(config: &LearnerConfig, spec: &DyanSpec, seed: u64) -> Result<LearnerState> {
        LearnerState::from_params(config, DyanParams::build(spec, seed)?)
    }

    /// Online and target both start at `params`; the optimizer is fresh.
    pub fn from_params(config: &LearnerConfig, params: DyanParams) -> Result<LearnerState> {
        config.validate()?;
        Ok(LearnerState {
            config: config.clone(),
            target: params.clone(),
            online: params,
            optimizer: config.optimizer(),
            updates: 0,
            episodes: 0,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon(self.episodes)
    }

    /// One gradient update on the summed TD loss of `batch` plus any terms
    /// added by `extra`. Parameters are left untouched on error.
    pub fn train_step<F>(&mut self, batch: &[&Transition], extra: F) -> Result<StepReport>
    where
        F: FnOnce(&mut Graph, &BoundParams, &DyanParams) -> Result<Option<Var>>,
    {
        let mut g = Graph::new();
        let bound = self.online.bind(&mut g, true);
        let td = td_loss_on_graph(
            &mut g,
            &bound,
            &self.target,
            batch,
            self.config.algorithm,
            self.config.gamma,
            Reduction::Sum,
        )?;
        let td_value = g.scalar(td)?;
        let (total, extra_value) = match extra(&mut g, &bound, &self.target)? {
            Some(e) => {
                let ev = g.scalar(e)?;
                (g.add(td, e)?, ev)
            }
            None => (td, 0.0),
        };
        let loss = g.scalar(total)?;
        if !loss.is_finite() {
            return Err(Error::Numeric("training loss is not finite".into()));
        }
        g.backward(total)?;
        let mut grads: Vec<Vec<f64>> = bound.vars().iter().map(|&v| g.grad_or_zero(v)).collect();
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip)?;

        let mut params = self.online.tensors().to_vec();
        let mut optimizer = self.optimizer.clone();
        optimizer.step(&mut params, &grads)?;
        if !params.iter().all(|t| t.is_finite()) {
            return Err(Error::Numeric("update produced non-finite parameters".into()));
        }
        self.online.tensors_mut().clone_from_slice(&params);
        self.optimizer = optimizer;
        self.updates += 1;
        let target_refreshed = self.updates.is_multiple_of(self.config.target_update_interval);
        if target_refreshed {
            self.target = self.online.clone();
        }
        Ok(StepReport {
            loss,
            td_loss: td_value,
            extra_loss: extra_value,
            grad_norm,
            target_refreshed,
        })
    }
}
