//! Curriculum runs: an ordered list of battle tasks with growing agent
//! counts, trained in sequence with one transfer mechanism between tasks.

mod eval;
mod run;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dyan::DyanSpec;
use crate::env::{
    WorldConfig, DEFAULT_MAX_STEPS, ENV_FEATURES, NEIGHBOR_FEATURES, NUM_ACTIONS, SELF_FEATURES,
};
use crate::learners::{LearnerConfig, OpponentMode};
use crate::transfer::TransferMode;
use crate::{Error, Result};

pub use eval::{evaluate, evaluate_checkpoint, Metrics};
pub use run::{run, run_with_progress, task_seed, RunReport, TaskReport};

/// Desk-scale 3v3 → 5v5 → 8v8 schedule.
pub const DESK_PRESET: &str = include_str!("../../../../presets/desk.toml");
/// The 10v10 → 50v50 MAgent schedule with its reference step budgets.
pub const MAGENT_PRESET: &str = include_str!("../../../../presets/magent.toml");

pub fn preset(name: &str) -> Result<&'static str> {
    match name {
        "desk" => Ok(DESK_PRESET),
        "magent" => Ok(MAGENT_PRESET),
        other => Err(Error::Config(format!(
            "unknown preset {other:?} (available: desk, magent)"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub team_a: usize,
    pub team_b: usize,
    /// Defaults to `ceil(4·sqrt(agents))`, at least 10.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_side: Option<usize>,
    /// Training budget in env steps.
    pub budget_steps: u64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

impl TaskSpec {
    pub fn new(team_a: usize, team_b: usize, budget_steps: u64) -> Self {
        TaskSpec {
            team_a,
            team_b,
            map_side: None,
            budget_steps,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn world(&self) -> WorldConfig {
        let mut w = WorldConfig::battle(self.team_a, self.team_b);
        if let Some(side) = self.map_side {
            w.map_side = side;
        }
        w.max_steps = self.max_steps;
        w
    }

    pub fn label(&self) -> String {
        format!("{}v{}", self.team_a, self.team_b)
    }
}

fn default_eval_episodes() -> usize {
    100
}

fn default_jumpstart_episodes() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Episodes at the start of each task averaged into the jumpstart reward.
    #[serde(default = "default_jumpstart_episodes")]
    pub jumpstart_episodes: usize,
    #[serde(default = "default_opponent")]
    pub opponent: OpponentMode,
    #[serde(default)]
    pub transfer: TransferMode,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub dyan: DyanSpec,
    pub tasks: Vec<TaskSpec>,
}

fn default_opponent() -> OpponentMode {
    OpponentMode::Scripted
}

impl CurriculumSpec {
    /// A spec with default settings around the given tasks.
    pub fn new(tasks: Vec<TaskSpec>) -> Self {
        CurriculumSpec {
            seed: 0,
            eval_episodes: default_eval_episodes(),
            jumpstart_episodes: default_jumpstart_episodes(),
            opponent: OpponentMode::Scripted,
            transfer: TransferMode::default(),
            learner: LearnerConfig::default(),
            dyan: DyanSpec::default(),
            tasks,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: CurriculumSpec =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("curriculum specs always serialise")
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("a curriculum needs at least one task".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        for (k, t) in self.tasks.iter().enumerate() {
            if t.budget_steps == 0 {
                return Err(Error::Config(format!("task {k} has a zero step budget")));
            }
            t.world()
                .validate()
                .map_err(|e| Error::Config(format!("task {k}: {e}")))?;
        }
        self.learner.validate()?;
        self.transfer.validate()?;
        self.dyan.validate()?;
        let env = [
            ("env_self_width", self.dyan.env_self_width, ENV_FEATURES + SELF_FEATURES),
            ("neighbor_feature_width", self.dyan.neighbor_feature_width, NEIGHBOR_FEATURES),
            ("num_actions", self.dyan.num_actions, NUM_ACTIONS),
        ];
        for (name, got, want) in env {
            if got != want {
                return Err(Error::Config(format!(
                    "dyan.{name} is {got} but the environment produces {want}"
                )));
            }
        }
        Ok(())
    }

    /// Non-fatal remarks, such as a shrinking agent count.
    pub fn warnings(&self) -> Vec<String> {
        self.tasks
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1].team_a + w[1].team_b < w[0].team_a + w[0].team_b)
            .map(|(k, w)| {
                format!(
                    "task {} ({}) has fewer agents than task {k} ({})",
                    k + 1,
                    w[1].label(),
                    w[0].label()
                )
            })
            .collect()
    }

    pub fn total_budget(&self) -> u64 {
        self.tasks.iter().map(|t| t.budget_steps).sum()
    }
}

/// Reads and validates a TOML run config. Every failure is reported as a
/// parse error naming the file.
pub fn parse_spec(path: &Path) -> Result<CurriculumSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: if e.kind() == std::io::ErrorKind::NotFound {
            "config not found".into()
        } else {
            e.to_string()
        },
    })?;
    CurriculumSpec::from_toml(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
