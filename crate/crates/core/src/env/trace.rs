//! Line-delimited JSON step traces for regression tests.

use std::io::Write;

use serde::Serialize;

use super::{JointAction, StepResult, WorldState};
use crate::{Error, Result};

#[derive(Debug, Serialize)]
struct AgentRecord {
    id: usize,
    x: i32,
    y: i32,
    hp: i32,
    action: Option<usize>,
    reward: f64,
}

#[derive(Debug, Serialize)]
struct StepRecord {
    step: usize,
    agents: Vec<AgentRecord>,
}

/// Writes one line per step: the post-step position and hp of every agent,
/// the action it took (null if it was already dead) and its reward.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        TraceWriter { out }
    }

    pub fn record(
        &mut self,
        state: &WorldState,
        actions: &JointAction,
        result: &StepResult,
    ) -> Result<()> {
        let record = StepRecord {
            step: state.step,
            agents: state
                .agents
                .iter()
                .map(|a| AgentRecord {
                    id: a.id,
                    x: a.position.0,
                    y: a.position.1,
                    hp: a.hp,
                    action: actions.get(a.id).map(|act| act.id()),
                    reward: result.rewards[a.id],
                })
                .collect(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Contract(format!("trace encoding failed: {e}")))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io("<trace>", e))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
