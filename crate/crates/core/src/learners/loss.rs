use serde::{Deserialize, Serialize};

use crate::dyan::{BoundParams, DyanParams};
use crate::replay::{AgentStep, Transition};
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Iql,
    Vdn,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iql" => Ok(Algorithm::Iql),
            "vdn" => Ok(Algorithm::Vdn),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// How per-transition losses combine over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// `max_a q_target(o', a)`, or 0 when the agent has no next observation.
pub fn bootstrap_value(target: &DyanParams, step: &AgentStep) -> Result<f64> {
    match &step.next_obs {
        None => Ok(0.0),
        Some(o) => {
            let q = target.forward(o, &step.next_hidden)?.q_values;
            Ok(q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        }
    }
}

fn chosen_q(g: &mut Graph, online: &BoundParams, step: &AgentStep) -> Result<Var> {
    let out = online.forward(g, &step.obs, &step.hidden)?;
    if step.action >= g.value(out.q).len() {
        return Err(Error::Protocol(format!(
            "stored action {} outside the action space",
            step.action
        )));
    }
    g.pick(out.q, step.action)
}

/// Squared TD error of one transition. IQL averages the per-agent errors;
/// VDN squares the error of the summed Q against the team reward.
pub fn transition_loss(
    g: &mut Graph,
    online: &BoundParams,
    target: &DyanParams,
    t: &Transition,
    algorithm: Algorithm,
    gamma: f64,
) -> Result<Option<Var>> {
    if t.agents.is_empty() {
        return Ok(None);
    }
    match algorithm {
        Algorithm::Iql => {
            let mut terms = Vec::with_capacity(t.agents.len());
            for step in &t.agents {
                let y = step.reward + gamma * bootstrap_value(target, step)?;
                let q = chosen_q(g, online, step)?;
                let d = g.offset(q, &[-y])?;
                terms.push(g.square(d)?);
            }
            let total = g.add_n(&terms)?;
            g.scale(total, 1.0 / t.agents.len() as f64).map(Some)
        }
        Algorithm::Vdn => {
            let mut qs = Vec::with_capacity(t.agents.len());
            let mut next = 0.0;
            for step in &t.agents {
                next += bootstrap_value(target, step)?;
                qs.push(chosen_q(g, online, step)?);
            }
            let y = t.team_reward + gamma * next;
            let q_tot = g.add_n(&qs)?;
            let d = g.offset(q_tot, &[-y])?;
            g.square(d).map(Some)
        }
    }
}

/// TD loss of a batch on the graph.
pub fn td_loss_on_graph(
    g: &mut Graph,
    online: &BoundParams,
    target: &DyanParams,
    batch: &[&Transition],
    algorithm: Algorithm,
    gamma: f64,
    reduction: Reduction,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("TD loss needs a non-empty batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for t in batch {
        if let Some(v) = transition_loss(g, online, target, t, algorithm, gamma)? {
            terms.push(v);
        }
    }
    let total = if terms.is_empty() {
        g.vector(vec![0.0])
    } else {
        g.add_n(&terms)?
    };
    let total = g.sum(total)?;
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => g.scale(total, 1.0 / batch.len() as f64),
    }
}

/// Evaluates a scalar loss built on `online` and returns it with the
/// gradient of every parameter tensor.
pub fn loss_and_grads<F>(online: &DyanParams, build: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnOnce(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = online.bind(&mut g, true);
    let loss = build(&mut g, &bound)?;
    let value = g.scalar(loss)?;
    if !value.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    g.backward(loss)?;
    let grads = bound.vars().iter().map(|&v| g.grad_or_zero(v)).collect();
    Ok((value, grads))
}

fn loss_value<F>(online: &DyanParams, build: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = online.bind(&mut g, false);
    let loss = build(&mut g, &bound)?;
    let value = g.scalar(loss)?;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric("loss is not finite".into()))
    }
}

/// TD loss value of a batch under `reduction`.
pub fn td_loss(
    batch: &[&Transition],
    online: &DyanParams,
    target: &DyanParams,
    algorithm: Algorithm,
    gamma: f64,
    reduction: Reduction,
) -> Result<f64> {
    loss_value(online, |g, b| {
        td_loss_on_graph(g, b, target, batch, algorithm, gamma, reduction)
    })
}

/// Mean over the batch and over agents of the squared independent TD error.
pub fn iql_loss(
    batch: &[&Transition],
    online: &DyanParams,
    target: &DyanParams,
    gamma: f64,
) -> Result<f64> {
    td_loss(batch, online, target, Algorithm::Iql, gamma, Reduction::Mean)
}

/// Mean over the batch of the squared TD error of `Σ_i q_i`.
pub fn vdn_loss(
    batch: &[&Transition],
    online: &DyanParams,
    target: &DyanParams,
    gamma: f64,
) -> Result<f64> {
    td_loss(batch, online, target, Algorithm::Vdn, gamma, Reduction::Mean)
}
