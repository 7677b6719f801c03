//! Discrete action space: 13 moves within Euclidean radius 2 (stay included)
//! followed by 8 attacks on the surrounding cells.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NUM_MOVES: usize = 13;
pub const NUM_ATTACKS: usize = 8;
pub const NUM_ACTIONS: usize = NUM_MOVES + NUM_ATTACKS;

/// Move offsets `(dx, dy)` in id order, row-major over `dy` then `dx`.
pub const MOVE_OFFSETS: [(i32, i32); NUM_MOVES] = [
    (0, -2),
    (-1, -1),
    (0, -1),
    (1, -1),
    (-2, 0),
    (-1, 0),
    (0, 0),
    (1, 0),
    (2, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (0, 2),
];

/// Attack offsets `(dx, dy)` in id order (ids `13..21`).
pub const ATTACK_OFFSETS: [(i32, i32); NUM_ATTACKS] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Move,
    Attack,
}

/// A single discrete action id in `[0, 21)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(u8);

impl Action {
    pub const STAY: Action = Action(6);

    pub fn from_id(id: usize) -> Result<Self> {
        if id < NUM_ACTIONS {
            Ok(Action(id as u8))
        } else {
            Err(Error::Protocol(format!(
                "action id {id} outside [0, {NUM_ACTIONS})"
            )))
        }
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn kind(self) -> ActionKind {
        if self.id() < NUM_MOVES {
            ActionKind::Move
        } else {
            ActionKind::Attack
        }
    }

    pub fn offset(self) -> (i32, i32) {
        match self.kind() {
            ActionKind::Move => MOVE_OFFSETS[self.id()],
            ActionKind::Attack => ATTACK_OFFSETS[self.id() - NUM_MOVES],
        }
    }

    pub fn decode(self) -> (ActionKind, (i32, i32)) {
        (self.kind(), self.offset())
    }

    pub fn move_to(offset: (i32, i32)) -> Option<Self> {
        MOVE_OFFSETS
            .iter()
            .position(|&o| o == offset)
            .map(|i| Action(i as u8))
    }

    pub fn attack_at(offset: (i32, i32)) -> Option<Self> {
        ATTACK_OFFSETS
            .iter()
            .position(|&o| o == offset)
            .map(|i| Action((NUM_MOVES + i) as u8))
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..NUM_ACTIONS as u8).map(Action)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, (dx, dy)) = self.decode();
        write!(f, "{kind:?}({dx},{dy})")
    }
}
