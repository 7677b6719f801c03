//! Cross-task transfer: buffer reuse, distillation from frozen teachers and
//! model reload.

use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dyan::{self, BoundParams, DyanParams, DyanSpec};
use crate::env::Observation;
use crate::learners::{
    td_loss_on_graph, Algorithm, LearnerConfig, LearnerState, Reduction, TrainHook,
};
use crate::replay::{multi_sample, TaskBatch, TaskBuffer, Transition};
use crate::tensor::{log_softmax_t, softmax_t, Graph, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferKind {
    None,
    #[serde(alias = "reuse")]
    BufferReuse,
    #[serde(alias = "distill")]
    Distillation,
    #[serde(alias = "reload")]
    ModelReload,
}

impl std::str::FromStr for TransferKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TransferKind::None),
            "reuse" | "buffer-reuse" => Ok(TransferKind::BufferReuse),
            "distill" | "distillation" => Ok(TransferKind::Distillation),
            "reload" | "model-reload" => Ok(TransferKind::ModelReload),
            other => Err(Error::Config(format!("unknown transfer mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for TransferKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransferKind::None => "none",
            TransferKind::BufferReuse => "buffer-reuse",
            TransferKind::Distillation => "distillation",
            TransferKind::ModelReload => "model-reload",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferMode {
    pub kind: TransferKind,
    /// Distillation temperature ω.
    pub omega: f64,
    pub distill_weight: f64,
    /// Apply ω to the student softmax as well.
    pub symmetric_temperature: bool,
    /// Bootstrap earlier tasks' samples from their frozen final networks
    /// instead of the current target network.
    pub frozen_reuse_targets: bool,
}

impl Default for TransferMode {
    fn default() -> Self {
        TransferMode {
            kind: TransferKind::None,
            omega: 1.0,
            distill_weight: 1.0,
            symmetric_temperature: false,
            frozen_reuse_targets: false,
        }
    }
}

impl TransferMode {
    pub fn new(kind: TransferKind) -> Self {
        TransferMode {
            kind,
            ..TransferMode::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return Err(Error::Config(format!("omega must be positive, got {}", self.omega)));
        }
        if !(self.distill_weight >= 0.0) || !self.distill_weight.is_finite() {
            return Err(Error::Config(format!(
                "distill_weight must be non-negative, got {}",
                self.distill_weight
            )));
        }
        Ok(())
    }
}

/// Frozen networks of earlier tasks, shared read-only.
#[derive(Debug, Clone, Default)]
pub struct TeacherSet {
    teachers: Vec<Arc<DyanParams>>,
}

impl TeacherSet {
    pub fn new(teachers: Vec<DyanParams>) -> Self {
        TeacherSet {
            teachers: teachers.into_iter().map(Arc::new).collect(),
        }
    }

    pub fn from_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let teachers = paths
            .iter()
            .map(|p| dyan::load(p.as_ref()).map(|(params, _)| params))
            .collect::<Result<Vec<_>>>()?;
        Ok(TeacherSet::new(teachers))
    }

    pub fn push(&mut self, teacher: DyanParams) {
        self.teachers.push(Arc::new(teacher));
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&DyanParams> {
        self.teachers.get(i).map(|t| t.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = &DyanParams> {
        self.teachers.iter().map(|t| t.as_ref())
    }

    /// Checkpoint hash of every teacher, for the frozen-teacher check.
    pub fn fingerprints(&self) -> Vec<String> {
        self.iter().map(dyan::checkpoint_hash).collect()
    }
}

/// Bootstrap network for each task's samples.
#[derive(Debug, Clone, Copy)]
pub enum ReuseTargets<'a> {
    /// The current target network evaluates every task.
    Current,
    /// Task `i < teachers.len()` uses teacher `i`; later tasks the current target.
    Frozen(&'a TeacherSet),
}

/// Summed TD loss over every task's batch, each evaluated by the current
/// online network on its native observations.
#[allow(clippy::too_many_arguments)]
pub fn buffer_reuse_on_graph(
    g: &mut Graph,
    online: &BoundParams,
    target: &DyanParams,
    batches: &[TaskBatch<'_>],
    algorithm: Algorithm,
    gamma: f64,
    targets: ReuseTargets<'_>,
) -> Result<Var> {
    let first = batches
        .first()
        .ok_or_else(|| Error::Contract("buffer reuse needs at least one task".into()))?;
    let b = first.transitions.len();
    if let Some(bad) = batches.iter().find(|t| t.transitions.len() != b) {
        return Err(Error::Contract(format!(
            "task {} batch has {} transitions, expected {b}",
            bad.task_id,
            bad.transitions.len()
        )));
    }
    let mut terms = Vec::with_capacity(batches.len());
    for (i, batch) in batches.iter().enumerate() {
        let bootstrap = match targets {
            ReuseTargets::Frozen(set) => set.get(i).unwrap_or(target),
            ReuseTargets::Current => target,
        };
        terms.push(td_loss_on_graph(
            g,
            online,
            bootstrap,
            &batch.transitions,
            algorithm,
            gamma,
            Reduction::Sum,
        )?);
    }
    g.add_n(&terms)
}

pub fn buffer_reuse_loss(
    batches: &[TaskBatch<'_>],
    online: &DyanParams,
    target: &DyanParams,
    algorithm: Algorithm,
    gamma: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = online.bind(&mut g, false);
    let loss = buffer_reuse_on_graph(
        &mut g,
        &bound,
        target,
        batches,
        algorithm,
        gamma,
        ReuseTargets::Current,
    )?;
    g.scalar(loss)
}

/// `Σ_teachers Σ_states KL(softmax(q_teacher/ω) ‖ softmax(q_student))`.
/// Teacher outputs enter as constants, so only the student receives gradient.
pub fn distillation_on_graph(
    g: &mut Graph,
    teachers: &TeacherSet,
    student: &BoundParams,
    states: &[(&Observation, &[f64])],
    omega: f64,
    symmetric: bool,
) -> Result<Var> {
    if teachers.is_empty() {
        return Err(Error::Contract("distillation needs at least one teacher".into()));
    }
    if !(omega > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {omega}")));
    }
    let student_t = if symmetric { omega } else { 1.0 };
    let mut terms = Vec::with_capacity(states.len() * teachers.len());
    for &(obs, hidden) in states {
        let q = student.forward(g, obs, hidden)?.q;
        let log_q = g.log_softmax(q, student_t)?;
        for teacher in teachers.iter() {
            let logits = teacher.forward(obs, hidden)?.q_values;
            let p = softmax_t(&logits, omega)?;
            let log_p = log_softmax_t(&logits, omega)?;
            let entropy_term: f64 = p.iter().zip(&log_p).map(|(a, b)| a * b).sum();
            let cross = g.dot_const(log_q, &p)?;
            let neg = g.scale(cross, -1.0)?;
            terms.push(g.offset(neg, &[entropy_term])?);
        }
    }
    if terms.is_empty() {
        let zero = g.vector(vec![0.0]);
        return g.sum(zero);
    }
    let total = g.add_n(&terms)?;
    g.sum(total)
}

pub fn distillation_loss(
    teachers: &TeacherSet,
    student: &DyanParams,
    states: &[(&Observation, &[f64])],
    omega: f64,
    symmetric: bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = student.bind(&mut g, false);
    let loss = distillation_on_graph(&mut g, teachers, &bound, states, omega, symmetric)?;
    g.scalar(loss)
}

/// Every agent observation of the sampled transitions with its stored hidden state.
pub fn batch_states<'a>(batch: &[&'a Transition]) -> Vec<(&'a Observation, &'a [f64])> {
    batch
        .iter()
        .flat_map(|t| t.agents.iter().map(|a| (a.obs.as_ref(), a.hidden.as_slice())))
        .collect()
}

/// Fails with a checkpoint error naming the first field the loaded network
/// disagrees on.
pub fn check_compatible(found: &DyanSpec, expected: &DyanSpec) -> Result<()> {
    let fields: [(&str, String, String); 8] = [
        ("env_self_width", found.env_self_width.to_string(), expected.env_self_width.to_string()),
        (
            "neighbor_feature_width",
            found.neighbor_feature_width.to_string(),
            expected.neighbor_feature_width.to_string(),
        ),
        ("num_actions", found.num_actions.to_string(), expected.num_actions.to_string()),
        ("hidden_units", found.hidden_units.to_string(), expected.hidden_units.to_string()),
        ("aggregation", found.aggregation.to_string(), expected.aggregation.to_string()),
        ("use_gru", found.use_gru.to_string(), expected.use_gru.to_string()),
        ("split_teams", found.split_teams.to_string(), expected.split_teams.to_string()),
        ("network", format!("{:?}", found.network), format!("{:?}", expected.network)),
    ];
    for (name, f, e) in fields {
        if f != e {
            return Err(Error::Checkpoint(format!(
                "checkpoint {name} is {f}, the task needs {e}"
            )));
        }
    }
    Ok(())
}

/// Starts a learner from a checkpoint: online and target both equal the
/// stored parameters, the optimizer and ε schedule start fresh.
/// Returns the learner and the checkpoint hash.
pub fn model_reload(
    path: &Path,
    config: &LearnerConfig,
    expected: &DyanSpec,
) -> Result<(LearnerState, String)> {
    let (params, _) = dyan::load(path)?;
    check_compatible(params.spec(), expected)?;
    let hash = dyan::checkpoint_hash(&params);
    Ok((LearnerState::from_params(config, params)?, hash))
}

/// Adds the selected transfer loss to each update.
pub struct TransferHook<'a> {
    pub mode: &'a TransferMode,
    pub prior_buffers: &'a [TaskBuffer],
    pub teachers: &'a TeacherSet,
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub batch_size: usize,
}

impl TrainHook for TransferHook<'_> {
    fn extra_loss(
        &mut self,
        g: &mut Graph,
        online: &BoundParams,
        target: &DyanParams,
        batch: &[&Transition],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Var>> {
        match self.mode.kind {
            TransferKind::BufferReuse if !self.prior_buffers.is_empty() => {
                let refs: Vec<&TaskBuffer> = self.prior_buffers.iter().collect();
                let batches = multi_sample(&refs, self.batch_size, rng)?;
                let targets = if self.mode.frozen_reuse_targets {
                    ReuseTargets::Frozen(self.teachers)
                } else {
                    ReuseTargets::Current
                };
                buffer_reuse_on_graph(g, online, target, &batches, self.algorithm, self.gamma, targets)
                    .map(Some)
            }
            TransferKind::Distillation if !self.teachers.is_empty() => {
                let states = batch_states(batch);
                let kl = distillation_on_graph(
                    g,
                    self.teachers,
                    online,
                    &states,
                    self.mode.omega,
                    self.mode.symmetric_temperature,
                )?;
                g.scale(kl, self.mode.distill_weight).map(Some)
            }
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parsing() {
        assert_eq!("reload".parse::<TransferKind>().unwrap(), TransferKind::ModelReload);
        assert_eq!("distill".parse::<TransferKind>().unwrap(), TransferKind::Distillation);
        assert!("magic".parse::<TransferKind>().is_err());
    }

    #[test]
    fn mode_validation() {
        let mut m = TransferMode::new(TransferKind::Distillation);
        assert!(m.validate().is_ok());
        m.omega = 0.0;
        assert!(m.validate().is_err());
        m.omega = 1.0;
        m.distill_weight = -1.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn incompatible_spec_names_the_field() {
        let a = DyanSpec::default();
        let b = DyanSpec {
            num_actions: 5,
            ..DyanSpec::default()
        };
        let err = check_compatible(&b, &a).unwrap_err().to_string();
        assert!(err.contains("num_actions"), "{err}");
    }
}
