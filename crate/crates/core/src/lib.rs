//! Multiagent curriculum learning on a two-team gridworld battle.
//!
//! Agents first learn a battle with few agents and carry what they learned
//! into battles with more agents. Three transfer mechanisms are provided:
//! replaying experience from earlier tasks, distilling earlier networks into
//! the current one, and reloading the previous network directly. The last one
//! relies on [`dyan`], a Q-network whose parameters do not depend on how many
//! agents an observation contains.
//!
//! Module map:
//! - [`env`]: seedable battle simulator, observations, scripted opponent.
//! - [`tensor`]: tape-based reverse-mode autodiff, layers and optimizers.
//! - [`dyan`]: the agent-count-independent network and its checkpoints.
//! - [`replay`]: per-task replay buffers and zero padding.
//! - [`learners`]: IQL / VDN losses, training steps and the episode driver.
//! - [`transfer`]: buffer reuse, distillation and model reload.
//! - [`curriculum`]: run configs, the task loop, evaluation and reports.
//! - [`analysis`]: embedding collection and distance statistics.
//! - [`verify`]: the self-check suites behind `dymacl verify`.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod container;
pub mod curriculum;
pub mod dyan;
pub mod env;
mod error;
pub mod learners;
pub mod replay;
pub mod stats;
pub mod tensor;
pub mod transfer;
pub mod verify;

pub use error::{Error, Result};
