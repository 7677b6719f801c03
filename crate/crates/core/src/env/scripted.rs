use super::{Action, AgentId, WorldState, MOVE_OFFSETS};
use crate::{Error, Result};

fn chebyshev(a: (i32, i32), b: (i32, i32)) -> i32 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

fn dist2(a: (i32, i32), b: (i32, i32)) -> i32 {
    (a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)
}

/// Deterministic rule-based controller: attack the lowest-id adjacent enemy,
/// otherwise take the single step that most reduces the Chebyshev distance to
/// the nearest enemy, otherwise stay.
pub fn scripted_opponent(state: &WorldState, id: AgentId) -> Result<Action> {
    let me = state.agent(id)?;
    if !me.alive {
        return Err(Error::Protocol(format!("agent {id} is dead")));
    }
    let pos = me.position;
    let enemies = state.alive_ids(me.team.other());

    let mut nearest: Option<(i32, AgentId)> = None;
    for e in enemies {
        let d = chebyshev(pos, state.agents[e].position);
        if d == 1 {
            let ep = state.agents[e].position;
            return Ok(Action::attack_at((ep.0 - pos.0, ep.1 - pos.1)).expect("adjacent offset"));
        }
        if nearest.is_none_or(|(best, _)| d < best) {
            nearest = Some((d, e));
        }
    }
    let Some((d, target)) = nearest else {
        return Ok(Action::STAY);
    };
    let goal = state.agents[target].position;

    let mut best: Option<((i32, i32, usize), Action)> = None;
    for (idx, &off) in MOVE_OFFSETS.iter().enumerate() {
        if off == (0, 0) || off.0.abs() > 1 || off.1.abs() > 1 {
            continue;
        }
        let to = (pos.0 + off.0, pos.1 + off.1);
        if !state.in_bounds(to) || state.occupant(to).is_some() {
            continue;
        }
        let nd = chebyshev(to, goal);
        if nd >= d {
            continue;
        }
        let key = (nd, dist2(to, goal), idx);
        if best.is_none_or(|(k, _)| key < k) {
            best = Some((key, Action::from_id(idx)?));
        }
    }
    Ok(best.map_or(Action::STAY, |(_, a)| a))
}
