use dymacl::env::trace::TraceWriter;
use dymacl::env::{scripted_opponent, Action, JointAction, Team, WorldConfig, WorldState, NUM_ACTIONS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GOLDEN_TRACE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/golden_trace.jsonl");

/// 3v3 on an 8×8 map: team A acts uniformly at random, team B is scripted.
pub fn record_trace() -> Vec<u8> {
    let mut world = WorldState::reset(&WorldConfig::battle(3, 3).with_side(8).with_seed(2024)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut trace = TraceWriter::new(Vec::new());
    while !world.is_done() && world.step < 120 {
        let mut joint = JointAction::new(world.agents.len());
        for id in world.alive_ids(Team::A).collect::<Vec<_>>() {
            joint.set(id, Action::from_id(rng.gen_range(0..NUM_ACTIONS)).unwrap());
        }
        for id in world.alive_ids(Team::B).collect::<Vec<_>>() {
            joint.set(id, scripted_opponent(&world, id).unwrap());
        }
        let r = world.step(&joint).unwrap();
        trace.record(&world, &joint, &r).unwrap();
    }
    trace.into_inner()
}
