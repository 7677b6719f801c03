//! Two-team gridworld battle simulator.
//!
//! Team A holds agent ids `0..team_a_size`, team B the ids after it. A step
//! resolves every move first (ascending agent id, first come first served),
//! then every attack simultaneously. Rewards are accumulated in integer units
//! of 0.005 so that audits over many steps are exact.

mod action;
mod observe;
mod scripted;
pub mod trace;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use action::{
    Action, ActionKind, ATTACK_OFFSETS, MOVE_OFFSETS, NUM_ACTIONS, NUM_ATTACKS, NUM_MOVES,
};
pub use observe::{
    observe, Observation, ENV_FEATURES, NEIGHBOR_FEATURES, SELF_FEATURES,
};
pub use scripted::scripted_opponent;

/// Rewards are multiples of this unit.
pub const REWARD_UNIT_DIVISOR: f64 = 200.0;
pub const MOVE_UNITS: i64 = -1;
pub const HIT_ENEMY_UNITS: i64 = 40;
pub const KILL_UNITS: i64 = 1000;
pub const ATTACK_EMPTY_UNITS: i64 = -20;
pub const ATTACKED_UNITS: i64 = -20;

pub const DEFAULT_HP_MAX: i32 = 10;
pub const DEFAULT_ATTACK_DAMAGE: i32 = 2;
pub const DEFAULT_MAX_STEPS: usize = 300;
pub const DEFAULT_OBS_RADIUS: i32 = 6;

pub fn units_to_reward(units: i64) -> f64 {
    units as f64 / REWARD_UNIT_DIVISOR
}

/// `ceil(4 * sqrt(total agents))`, at least 10.
pub fn default_map_side(team_a: usize, team_b: usize) -> usize {
    let total = (team_a + team_b) as f64;
    ((4.0 * total.sqrt()).ceil() as usize).max(10)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub team_a_size: usize,
    pub team_b_size: usize,
    pub map_side: usize,
    pub max_steps: usize,
    pub obs_radius: i32,
    pub hp_max: i32,
    pub attack_damage: i32,
    pub seed: u64,
}

impl WorldConfig {
    /// Battle with default map size and unit stats.
    pub fn battle(team_a: usize, team_b: usize) -> Self {
        WorldConfig {
            team_a_size: team_a,
            team_b_size: team_b,
            map_side: default_map_side(team_a, team_b),
            max_steps: DEFAULT_MAX_STEPS,
            obs_radius: DEFAULT_OBS_RADIUS,
            hp_max: DEFAULT_HP_MAX,
            attack_damage: DEFAULT_ATTACK_DAMAGE,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_side(mut self, side: usize) -> Self {
        self.map_side = side;
        self
    }

    pub fn num_agents(&self) -> usize {
        self.team_a_size + self.team_b_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.team_a_size == 0 || self.team_b_size == 0 {
            return Err(Error::Config("team sizes must be at least 1".into()));
        }
        if self.obs_radius < 1 {
            return Err(Error::Config("obs_radius must be at least 1".into()));
        }
        if self.hp_max <= 0 || self.attack_damage <= 0 {
            return Err(Error::Config(
                "hp_max and attack_damage must be positive".into(),
            ));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        let cells = self.map_side * self.map_side;
        if self.num_agents() > cells {
            return Err(Error::Config(format!(
                "{} agents do not fit on a {}x{} map ({} cells)",
                self.num_agents(),
                self.map_side,
                self.map_side,
                cells
            )));
        }
        let half_area = (self.map_side / 2) * self.map_side;
        if self.team_a_size.max(self.team_b_size) > half_area {
            return Err(Error::Config(format!(
                "a team of {} does not fit in half of a {}x{} map",
                self.team_a_size.max(self.team_b_size),
                self.map_side,
                self.map_side
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Team {
    A,
    B,
}

impl Team {
    pub fn index(self) -> usize {
        match self {
            Team::A => 0,
            Team::B => 1,
        }
    }

    pub fn other(self) -> Team {
        match self {
            Team::A => Team::B,
            Team::B => Team::A,
        }
    }
}

pub type AgentId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: AgentId,
    pub team: Team,
    pub position: (i32, i32),
    pub hp: i32,
    pub alive: bool,
    pub last_action: Option<Action>,
    pub last_reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    AWins,
    BWins,
    Draw,
    Ongoing,
}

/// Event tallies for one step, used by the reward audit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub moves: usize,
    pub attacks_on_enemies: usize,
    pub kills: usize,
    pub attacks_on_empty: usize,
    pub agents_attacked: usize,
}

impl EventCounts {
    pub fn expected_units(&self) -> i64 {
        MOVE_UNITS * self.moves as i64
            + HIT_ENEMY_UNITS * self.attacks_on_enemies as i64
            + KILL_UNITS * self.kills as i64
            + ATTACK_EMPTY_UNITS * self.attacks_on_empty as i64
            + ATTACKED_UNITS * self.agents_attacked as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    /// Per-agent reward indexed by agent id; zero for agents dead before the step.
    pub rewards: Vec<f64>,
    /// The same rewards in integer units of 0.005.
    pub reward_units: Vec<i64>,
    /// Sum of member rewards, indexed by [`Team::index`].
    pub team_reward: [f64; 2],
    /// Kills made by each team this step.
    pub kills_this_step: [usize; 2],
    pub events: EventCounts,
    pub done: bool,
    pub outcome: Outcome,
}

/// One action slot per agent id; `None` for dead agents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointAction(Vec<Option<Action>>);

impl JointAction {
    pub fn new(num_agents: usize) -> Self {
        JointAction(vec![None; num_agents])
    }

    pub fn set(&mut self, id: AgentId, action: Action) {
        if id >= self.0.len() {
            self.0.resize(id + 1, None);
        }
        self.0[id] = Some(action);
    }

    pub fn get(&self, id: AgentId) -> Option<Action> {
        self.0.get(id).copied().flatten()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub config: WorldConfig,
    pub agents: Vec<AgentState>,
    pub step: usize,
    grid: Vec<Option<AgentId>>,
}

/// Formation slots for team A: columns from the middle outwards (skipping
/// the column next to the midline until last), rows from the centre outwards.
fn formation_slots(side: usize) -> Vec<(i32, i32)> {
    let half = (side / 2) as i32;
    let mut cols: Vec<i32> = (0..half - 1).rev().collect();
    cols.push(half - 1);
    let centre = (side / 2) as i32;
    let mut rows = vec![centre];
    for d in 1..side as i32 {
        if centre - d >= 0 {
            rows.push(centre - d);
        }
        if centre + d < side as i32 {
            rows.push(centre + d);
        }
    }
    cols.iter()
        .flat_map(|&c| rows.iter().map(move |&r| (c, r)))
        .collect()
}

impl WorldState {
    /// Places both teams in mirrored formations; the seed only permutes
    /// which agent takes which slot.
    pub fn reset(config: &WorldConfig) -> Result<WorldState> {
        config.validate()?;
        let side = config.map_side;
        let slots = formation_slots(side);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut a_slots: Vec<(i32, i32)> = slots[..config.team_a_size].to_vec();
        let mut b_slots: Vec<(i32, i32)> = slots[..config.team_b_size]
            .iter()
            .map(|&(x, y)| (side as i32 - 1 - x, y))
            .collect();
        a_slots.shuffle(&mut rng);
        b_slots.shuffle(&mut rng);

        let mut agents = Vec::with_capacity(config.num_agents());
        let mut grid = vec![None; side * side];
        for (team, positions) in [(Team::A, a_slots), (Team::B, b_slots)] {
            for position in positions {
                let id = agents.len();
                grid[position.1 as usize * side + position.0 as usize] = Some(id);
                agents.push(AgentState {
                    id,
                    team,
                    position,
                    hp: config.hp_max,
                    alive: true,
                    last_action: None,
                    last_reward: 0.0,
                });
            }
        }
        Ok(WorldState {
            config: config.clone(),
            agents,
            step: 0,
            grid,
        })
    }

    pub fn side(&self) -> i32 {
        self.config.map_side as i32
    }

    pub fn in_bounds(&self, (x, y): (i32, i32)) -> bool {
        x >= 0 && y >= 0 && x < self.side() && y < self.side()
    }

    /// Occupant of a cell, `None` for empty or out-of-bounds cells.
    pub fn occupant(&self, pos: (i32, i32)) -> Option<AgentId> {
        if self.in_bounds(pos) {
            self.grid[self.cell(pos)]
        } else {
            None
        }
    }

    fn cell(&self, (x, y): (i32, i32)) -> usize {
        y as usize * self.config.map_side + x as usize
    }

    pub fn agent(&self, id: AgentId) -> Result<&AgentState> {
        self.agents
            .get(id)
            .ok_or_else(|| Error::Protocol(format!("unknown agent {id}")))
    }

    pub fn team_ids(&self, team: Team) -> std::ops::Range<AgentId> {
        match team {
            Team::A => 0..self.config.team_a_size,
            Team::B => self.config.team_a_size..self.agents.len(),
        }
    }

    pub fn alive_ids(&self, team: Team) -> impl Iterator<Item = AgentId> + '_ {
        self.team_ids(team).filter(move |&id| self.agents[id].alive)
    }

    pub fn alive_count(&self, team: Team) -> usize {
        self.alive_ids(team).count()
    }

    pub fn is_done(&self) -> bool {
        self.alive_count(Team::A) == 0
            || self.alive_count(Team::B) == 0
            || self.step >= self.config.max_steps
    }

    pub fn outcome(&self) -> Outcome {
        let a = self.alive_count(Team::A);
        let b = self.alive_count(Team::B);
        match (a, b) {
            (0, 0) => Outcome::Draw,
            (_, 0) => Outcome::AWins,
            (0, _) => Outcome::BWins,
            _ if self.step >= self.config.max_steps => Outcome::Draw,
            _ => Outcome::Ongoing,
        }
    }

    /// Advances the world by one step. Every alive agent must have exactly one
    /// action; dead or unknown agents must have none.
    pub fn step(&mut self, actions: &JointAction) -> Result<StepResult> {
        let n = self.agents.len();
        if self.is_done() {
            return Err(Error::Protocol("episode already finished".into()));
        }
        if actions.len() > n {
            if let Some(id) = (n..actions.len()).find(|&id| actions.get(id).is_some()) {
                return Err(Error::Protocol(format!("action for unknown agent {id}")));
            }
        }
        for agent in &self.agents {
            match (agent.alive, actions.get(agent.id)) {
                (true, None) => {
                    return Err(Error::Protocol(format!(
                        "missing action for alive agent {}",
                        agent.id
                    )))
                }
                (false, Some(_)) => {
                    return Err(Error::Protocol(format!(
                        "action for dead agent {}",
                        agent.id
                    )))
                }
                _ => {}
            }
        }

        let mut units = vec![0i64; n];
        let mut events = EventCounts::default();
        let acting: Vec<AgentId> = (0..n).filter(|&id| self.agents[id].alive).collect();

        for &id in &acting {
            let action = actions.get(id).expect("validated above");
            if action.kind() != ActionKind::Move {
                continue;
            }
            units[id] += MOVE_UNITS;
            events.moves += 1;
            let (dx, dy) = action.offset();
            if (dx, dy) == (0, 0) {
                continue;
            }
            let from = self.agents[id].position;
            let to = (from.0 + dx, from.1 + dy);
            if self.in_bounds(to) && self.grid[self.cell(to)].is_none() {
                let (from_cell, to_cell) = (self.cell(from), self.cell(to));
                self.grid[from_cell] = None;
                self.grid[to_cell] = Some(id);
                self.agents[id].position = to;
            }
        }

        // attackers per victim, in ascending attacker id
        let mut attackers: Vec<Vec<AgentId>> = vec![Vec::new(); n];
        for &id in &acting {
            let action = actions.get(id).expect("validated above");
            if action.kind() != ActionKind::Attack {
                continue;
            }
            let (dx, dy) = action.offset();
            let pos = self.agents[id].position;
            let target = (pos.0 + dx, pos.1 + dy);
            match self.occupant(target) {
                Some(victim) if self.agents[victim].team != self.agents[id].team => {
                    units[id] += HIT_ENEMY_UNITS;
                    events.attacks_on_enemies += 1;
                    attackers[victim].push(id);
                }
                _ => {
                    units[id] += ATTACK_EMPTY_UNITS;
                    events.attacks_on_empty += 1;
                }
            }
        }

        let mut kills = [0usize; 2];
        let damage = self.config.attack_damage;
        for victim in 0..n {
            if attackers[victim].is_empty() {
                continue;
            }
            units[victim] += ATTACKED_UNITS;
            events.agents_attacked += 1;
            let mut hp = self.agents[victim].hp;
            for &attacker in &attackers[victim] {
                let before = hp;
                hp -= damage;
                if before > 0 && hp <= 0 {
                    units[attacker] += KILL_UNITS;
                    events.kills += 1;
                    kills[self.agents[attacker].team.index()] += 1;
                }
            }
            let cell = self.cell(self.agents[victim].position);
            let agent = &mut self.agents[victim];
            agent.hp = hp.max(0);
            if agent.hp == 0 {
                agent.alive = false;
                self.grid[cell] = None;
            }
        }

        let rewards: Vec<f64> = units.iter().map(|&u| units_to_reward(u)).collect();
        for &id in &acting {
            let agent = &mut self.agents[id];
            agent.last_action = actions.get(id);
            agent.last_reward = rewards[id];
        }
        let mut team_reward = [0.0f64; 2];
        for agent in &self.agents {
            team_reward[agent.team.index()] += rewards[agent.id];
        }
        self.step += 1;
        let done = self.is_done();
        Ok(StepResult {
            rewards,
            reward_units: units,
            team_reward,
            kills_this_step: kills,
            events,
            done,
            outcome: self.outcome(),
        })
    }
}

impl WorldState {
    /// Recomputes the occupancy grid from agent positions.
    pub(crate) fn rebuild_grid(&mut self) {
        let side = self.config.map_side;
        self.grid = vec![None; side * side];
        for a in self.agents.iter().filter(|a| a.alive) {
            self.grid[a.position.1 as usize * side + a.position.0 as usize] = Some(a.id);
        }
    }

    /// Overwrites an agent's position and hp, keeping the grid consistent.
    /// Intended for building test scenarios.
    pub fn set_agent(&mut self, id: AgentId, position: (i32, i32), hp: i32) -> Result<()> {
        if !self.in_bounds(position) {
            return Err(Error::Protocol(format!("{position:?} is outside the map")));
        }
        if let Some(other) = self.occupant(position) {
            if other != id && hp > 0 {
                return Err(Error::Protocol(format!("{position:?} is occupied by {other}")));
            }
        }
        let agent = self
            .agents
            .get_mut(id)
            .ok_or_else(|| Error::Protocol(format!("unknown agent {id}")))?;
        agent.position = position;
        agent.hp = hp.clamp(0, self.config.hp_max);
        agent.alive = agent.hp > 0;
        self.rebuild_grid();
        Ok(())
    }
}
