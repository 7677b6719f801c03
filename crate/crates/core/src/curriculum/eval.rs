use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyan::{self, DyanParams, DyanSpec};
use crate::env::{Outcome, WorldConfig};
use crate::learners::{EpisodeRunner, EpisodeStats, OpponentMode};
use crate::stats::{mean, std_error};
use crate::transfer::check_compatible;
use crate::{Error, Result};

/// Greedy evaluation statistics from team A's side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub win_rate: f64,
    pub win_rate_se: f64,
    pub draw_rate: f64,
    pub mean_survivors: f64,
    pub survivors_se: f64,
    pub mean_kill_count: f64,
    pub kill_count_se: f64,
    pub mean_episode_reward: f64,
    pub episode_reward_se: f64,
    pub mean_episode_length: f64,
}

impl Metrics {
    pub fn from_episodes(stats: &[EpisodeStats]) -> Metrics {
        let col = |f: &dyn Fn(&EpisodeStats) -> f64| stats.iter().map(f).collect::<Vec<f64>>();
        let wins = col(&|s| (s.outcome == Outcome::AWins) as u8 as f64);
        let draws = col(&|s| (s.outcome == Outcome::Draw) as u8 as f64);
        let survivors = col(&|s| s.survivors as f64);
        let kills = col(&|s| s.kills as f64);
        let rewards = col(&|s| s.reward);
        let lengths = col(&|s| s.steps as f64);
        Metrics {
            episodes: stats.len(),
            win_rate: mean(&wins),
            win_rate_se: std_error(&wins),
            draw_rate: mean(&draws),
            mean_survivors: mean(&survivors),
            survivors_se: std_error(&survivors),
            mean_kill_count: mean(&kills),
            kill_count_se: std_error(&kills),
            mean_episode_reward: mean(&rewards),
            episode_reward_se: std_error(&rewards),
            mean_episode_length: mean(&lengths),
        }
    }
}

fn episode_seed(seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng.gen()
}

/// Runs `episodes` ε = 0 episodes. Each episode has its own seeded stream, so
/// the result does not depend on how episodes are spread over threads.
pub fn evaluate(
    params: &DyanParams,
    world: &WorldConfig,
    episodes: usize,
    seed: u64,
    opponent: OpponentMode,
) -> Result<Metrics> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    world.validate()?;
    let stats = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, i));
            let w = world.clone().with_seed(rng.gen());
            EpisodeRunner::new(&w, 0, opponent)?.play(params, 0.0, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::from_episodes(&stats))
}

/// Loads a checkpoint, checks it against the environment's feature widths
/// and evaluates it.
pub fn evaluate_checkpoint(
    path: &Path,
    world: &WorldConfig,
    episodes: usize,
    seed: u64,
    opponent: OpponentMode,
) -> Result<Metrics> {
    let (params, _) = dyan::load(path)?;
    let expected = DyanSpec {
        env_self_width: DyanSpec::default().env_self_width,
        neighbor_feature_width: DyanSpec::default().neighbor_feature_width,
        num_actions: DyanSpec::default().num_actions,
        ..params.spec().clone()
    };
    check_compatible(params.spec(), &expected)?;
    evaluate(&params, world, episodes, seed, opponent)
}
