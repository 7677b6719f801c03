use serde::{Deserialize, Serialize};

use super::{AgentId, Team, WorldState, NUM_ACTIONS};
use crate::{Error, Result};

/// Width of the downsampled boundary map (4x4 bins over the window).
pub const ENV_FEATURES: usize = 16;
/// Normalised position (2), hp fraction, one-hot last action, last reward.
pub const SELF_FEATURES: usize = 2 + 1 + NUM_ACTIONS + 1;
/// `[dx / radius, dy / radius, hp / hp_max]`.
pub const NEIGHBOR_FEATURES: usize = 3;

const BINS: usize = 4;

/// Decomposed local view of one agent: a fixed-width environment slice, the
/// agent's own features and one fixed-width vector per visible neighbour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub env_features: Vec<f64>,
    pub self_features: Vec<f64>,
    pub teammate_features: Vec<Vec<f64>>,
    pub enemy_features: Vec<Vec<f64>>,
}

impl Observation {
    /// `env_features ++ self_features`.
    pub fn env_self(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.env_features.len() + self.self_features.len());
        v.extend_from_slice(&self.env_features);
        v.extend_from_slice(&self.self_features);
        v
    }

    pub fn env_self_width(&self) -> usize {
        self.env_features.len() + self.self_features.len()
    }

    pub fn neighbor_count(&self) -> usize {
        self.teammate_features.len() + self.enemy_features.len()
    }
}

fn bin(offset: usize, window: usize) -> usize {
    offset * BINS / window
}

/// Local observation of an alive agent. Neighbours are the alive agents
/// within Chebyshev distance `obs_radius`, in ascending id order.
pub fn observe(state: &WorldState, id: AgentId) -> Result<Observation> {
    let me = state.agent(id)?;
    if !me.alive {
        return Err(Error::Protocol(format!("agent {id} is dead")));
    }
    let cfg = &state.config;
    let r = cfg.obs_radius;
    let window = (2 * r + 1) as usize;
    let (x, y) = me.position;

    let mut outside = [0.0f64; ENV_FEATURES];
    let mut counts = [0.0f64; ENV_FEATURES];
    for oy in 0..window {
        for ox in 0..window {
            let b = bin(oy, window) * BINS + bin(ox, window);
            counts[b] += 1.0;
            let cell = (x - r + ox as i32, y - r + oy as i32);
            if !state.in_bounds(cell) {
                outside[b] += 1.0;
            }
        }
    }
    let env_features = outside
        .iter()
        .zip(&counts)
        .map(|(o, c)| o / c)
        .collect();

    let span = (cfg.map_side.max(2) - 1) as f64;
    let mut self_features = vec![0.0; SELF_FEATURES];
    self_features[0] = x as f64 / span;
    self_features[1] = y as f64 / span;
    self_features[2] = me.hp as f64 / cfg.hp_max as f64;
    if let Some(a) = me.last_action {
        self_features[3 + a.id()] = 1.0;
    }
    self_features[SELF_FEATURES - 1] = me.last_reward;

    let mut teammate_features = Vec::new();
    let mut enemy_features = Vec::new();
    let rf = r as f64;
    for other in state.agents.iter() {
        if other.id == id || !other.alive {
            continue;
        }
        let dx = other.position.0 - x;
        let dy = other.position.1 - y;
        if dx.abs().max(dy.abs()) > r {
            continue;
        }
        let features = vec![
            dx as f64 / rf,
            dy as f64 / rf,
            other.hp as f64 / cfg.hp_max as f64,
        ];
        if other.team == me.team {
            teammate_features.push(features);
        } else {
            enemy_features.push(features);
        }
    }
    Ok(Observation {
        env_features,
        self_features,
        teammate_features,
        enemy_features,
    })
}

impl WorldState {
    pub fn observe(&self, id: AgentId) -> Result<Observation> {
        observe(self, id)
    }

    /// Observations of every alive member of `team`, in id order.
    pub fn observe_team(&self, team: Team) -> Result<Vec<(AgentId, Observation)>> {
        self.alive_ids(team)
            .map(|id| observe(self, id).map(|o| (id, o)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Action, JointAction, WorldConfig};

    fn world(a: usize, b: usize) -> WorldState {
        WorldState::reset(&WorldConfig::battle(a, b).with_side(20)).unwrap()
    }

    fn put(s: &mut WorldState, id: AgentId, pos: (i32, i32)) {
        let hp = s.agents[id].hp;
        s.set_agent(id, pos, hp).unwrap();
    }

    #[test]
    fn lone_survivor_sees_nobody() {
        let mut s = world(1, 1);
        let pos = s.agents[1].position;
        s.set_agent(1, pos, 0).unwrap();
        let o = observe(&s, 0).unwrap();
        assert!(o.teammate_features.is_empty());
        assert!(o.enemy_features.is_empty());
        assert_eq!(o.env_features.len(), ENV_FEATURES);
        assert_eq!(o.self_features.len(), SELF_FEATURES);
    }

    #[test]
    fn teammate_encoding() {
        let mut s = world(2, 1);
        put(&mut s, 0, (10, 10));
        put(&mut s, 1, (12, 10));
        put(&mut s, 2, (0, 0));
        let o = observe(&s, 0).unwrap();
        assert_eq!(o.teammate_features, vec![vec![2.0 / 6.0, 0.0, 1.0]]);
        assert!(o.enemy_features.is_empty());
    }

    #[test]
    fn radius_boundary() {
        let mut s = world(1, 2);
        put(&mut s, 0, (10, 10));
        put(&mut s, 1, (16, 4));
        put(&mut s, 2, (17, 10));
        let o = observe(&s, 0).unwrap();
        assert_eq!(o.enemy_features, vec![vec![1.0, -1.0, 1.0]]);
    }

    #[test]
    fn dead_observer_is_rejected() {
        let mut s = world(1, 1);
        s.agents[0].alive = false;
        assert!(matches!(observe(&s, 0), Err(Error::Protocol(_))));
    }

    #[test]
    fn boundary_map_marks_outside_cells() {
        let mut s = world(1, 1);
        put(&mut s, 0, (0, 0));
        let o = observe(&s, 0).unwrap();
        // top-left bin lies fully outside the map, bottom-right fully inside
        assert_eq!(o.env_features[0], 1.0);
        assert_eq!(o.env_features[ENV_FEATURES - 1], 0.0);
        put(&mut s, 0, (10, 10));
        let o = observe(&s, 0).unwrap();
        assert!(o.env_features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_features_track_last_step() {
        let mut s = world(1, 1);
        let mut ja = JointAction::new(2);
        ja.set(0, Action::attack_at((1, 1)).unwrap());
        ja.set(1, Action::STAY);
        s.step(&ja).unwrap();
        let o = observe(&s, 0).unwrap();
        assert_eq!(o.self_features[3 + Action::attack_at((1, 1)).unwrap().id()], 1.0);
        assert_eq!(o.self_features[SELF_FEATURES - 1], -0.1);
    }
}
