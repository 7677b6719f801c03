//! Per-task replay buffers, uniform sampling and zero padding.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::env::{AgentId, Observation};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Replay capacity from the MAgent IQL table.
pub const DEFAULT_CAPACITY: usize = 100_000;
/// Fill level required before sampling is allowed.
pub const DEFAULT_MIN_FILL: usize = 5_000;

/// One learning agent's part of a joint transition.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStep {
    pub agent: AgentId,
    pub obs: Arc<Observation>,
    /// Recurrent state fed alongside `obs` when the action was chosen.
    pub hidden: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    /// `None` when the agent died during the step or the episode ended.
    pub next_obs: Option<Arc<Observation>>,
    pub next_hidden: Vec<f64>,
}

/// A joint transition of the learning team, tagged with its task.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub task_id: usize,
    pub agents: Vec<AgentStep>,
    pub team_reward: f64,
    pub done: bool,
}

/// Fixed-capacity ring of transitions for one task.
#[derive(Debug, Clone)]
pub struct TaskBuffer {
    task_id: usize,
    capacity: usize,
    min_fill: usize,
    storage: Vec<Transition>,
    next: usize,
}

impl TaskBuffer {
    pub fn new(task_id: usize, capacity: usize, min_fill: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(TaskBuffer {
            task_id,
            capacity,
            min_fill,
            storage: Vec::new(),
            next: 0,
        })
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn min_fill(&self) -> usize {
        self.min_fill
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn is_ready(&self) -> bool {
        !self.storage.is_empty() && self.storage.len() >= self.min_fill
    }

    pub fn push(&mut self, transition: Transition) -> Result<()> {
        if transition.task_id != self.task_id {
            return Err(Error::Protocol(format!(
                "transition for task {} pushed to buffer of task {}",
                transition.task_id, self.task_id
            )));
        }
        if self.storage.len() < self.capacity {
            self.storage.push(transition);
        } else {
            self.storage[self.next] = transition;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    /// Stored transitions, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.storage.len() < self.capacity {
            0
        } else {
            self.next
        };
        self.storage[split..].iter().chain(&self.storage[..split])
    }

    /// `b` transitions drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if !self.is_ready() {
            return Err(Error::NotReady {
                task: self.task_id,
                fill: self.storage.len(),
                required: self.min_fill.max(1),
            });
        }
        Ok((0..b)
            .map(|_| &self.storage[rng.gen_range(0..self.storage.len())])
            .collect())
    }

    /// Saves the buffer contents with the checkpoint container format.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut c = Container::default();
        c.metadata.insert("format".into(), "replay-buffer".into());
        c.metadata.insert("task_id".into(), self.task_id.to_string());
        c.metadata.insert("capacity".into(), self.capacity.to_string());
        c.metadata.insert("min_fill".into(), self.min_fill.to_string());
        c.metadata.insert("count".into(), self.len().to_string());
        if let Some(first) = self.iter().next().and_then(|t| t.agents.first()) {
            c.metadata
                .insert("env_width".into(), first.obs.env_features.len().to_string());
            c.metadata
                .insert("self_width".into(), first.obs.self_features.len().to_string());
        }
        for (i, t) in self.iter().enumerate() {
            c.tensors.push((
                format!("t{i}"),
                Tensor::vector(vec![
                    t.team_reward,
                    if t.done { 1.0 } else { 0.0 },
                    t.agents.len() as f64,
                ]),
            ));
            for (j, a) in t.agents.iter().enumerate() {
                c.tensors
                    .push((format!("t{i}.a{j}"), Tensor::vector(encode_step(a))));
            }
        }
        c.save(path)
    }

    pub fn restore(path: &Path) -> Result<TaskBuffer> {
        let c = Container::load(path)?;
        if c.meta("format")? != "replay-buffer" {
            return Err(Error::Checkpoint(format!("{} is not a replay dump", path.display())));
        }
        let mut buf = TaskBuffer::new(
            c.meta_parse("task_id")?,
            c.meta_parse("capacity")?,
            c.meta_parse("min_fill")?,
        )?;
        let count: usize = c.meta_parse("count")?;
        if count == 0 {
            return Ok(buf);
        }
        let widths = (c.meta_parse("env_width")?, c.meta_parse("self_width")?);
        let mut tensors = c.tensors.iter();
        for _ in 0..count {
            let (_, head) = tensors
                .next()
                .ok_or_else(|| Error::Checkpoint("replay dump ends early".into()))?;
            let head = head.data();
            if head.len() != 3 {
                return Err(Error::Checkpoint("bad transition header".into()));
            }
            let mut agents = Vec::new();
            for _ in 0..head[2] as usize {
                let (_, rec) = tensors
                    .next()
                    .ok_or_else(|| Error::Checkpoint("replay dump ends early".into()))?;
                agents.push(decode_step(rec.data(), widths)?);
            }
            buf.push(Transition {
                task_id: buf.task_id,
                agents,
                team_reward: head[0],
                done: head[1] != 0.0,
            })?;
        }
        Ok(buf)
    }
}

fn encode_obs(out: &mut Vec<f64>, o: &Observation) {
    out.push(o.teammate_features.len() as f64);
    out.push(o.enemy_features.len() as f64);
    out.push(o.teammate_features.first().or(o.enemy_features.first()).map_or(0, |v| v.len()) as f64);
    out.extend_from_slice(&o.env_features);
    out.extend_from_slice(&o.self_features);
    for v in o.teammate_features.iter().chain(&o.enemy_features) {
        out.extend_from_slice(v);
    }
}

fn encode_step(a: &AgentStep) -> Vec<f64> {
    let mut out = vec![
        a.agent as f64,
        a.action as f64,
        a.reward,
        a.hidden.len() as f64,
        a.next_hidden.len() as f64,
        if a.next_obs.is_some() { 1.0 } else { 0.0 },
    ];
    out.extend_from_slice(&a.hidden);
    out.extend_from_slice(&a.next_hidden);
    encode_obs(&mut out, &a.obs);
    if let Some(next) = &a.next_obs {
        encode_obs(&mut out, next);
    }
    out
}

struct Cursor<'a> {
    data: &'a [f64],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        if self.at + n > self.data.len() {
            return Err(Error::Checkpoint("truncated replay record".into()));
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn count(&mut self) -> Result<usize> {
        Ok(self.take(1)?[0] as usize)
    }
}

fn decode_obs(c: &mut Cursor, (env_w, self_w): (usize, usize)) -> Result<Observation> {
    let n_team = c.count()?;
    let n_enemy = c.count()?;
    let width = c.count()?;
    let env_features = c.take(env_w)?.to_vec();
    let self_features = c.take(self_w)?.to_vec();
    let mut teammate_features = Vec::with_capacity(n_team);
    for _ in 0..n_team {
        teammate_features.push(c.take(width)?.to_vec());
    }
    let mut enemy_features = Vec::with_capacity(n_enemy);
    for _ in 0..n_enemy {
        enemy_features.push(c.take(width)?.to_vec());
    }
    Ok(Observation {
        env_features,
        self_features,
        teammate_features,
        enemy_features,
    })
}

fn decode_step(data: &[f64], widths: (usize, usize)) -> Result<AgentStep> {
    let mut c = Cursor { data, at: 0 };
    let agent = c.count()?;
    let action = c.count()?;
    let reward = c.take(1)?[0];
    let n_hidden = c.count()?;
    let n_next_hidden = c.count()?;
    let has_next = c.take(1)?[0] != 0.0;
    let hidden = c.take(n_hidden)?.to_vec();
    let next_hidden = c.take(n_next_hidden)?.to_vec();
    let obs = Arc::new(decode_obs(&mut c, widths)?);
    let next_obs = if has_next {
        Some(Arc::new(decode_obs(&mut c, widths)?))
    } else {
        None
    };
    if c.at != data.len() {
        return Err(Error::Checkpoint("trailing values in replay record".into()));
    }
    Ok(AgentStep {
        agent,
        obs,
        hidden,
        action,
        reward,
        next_obs,
        next_hidden,
    })
}

/// Samples drawn from one task's buffer.
#[derive(Debug, Clone)]
pub struct TaskBatch<'a> {
    pub task_id: usize,
    pub transitions: Vec<&'a Transition>,
}

/// Draws exactly `b` transitions from every buffer, in buffer order.
pub fn multi_sample<'a, R: Rng + ?Sized>(
    buffers: &[&'a TaskBuffer],
    b: usize,
    rng: &mut R,
) -> Result<Vec<TaskBatch<'a>>> {
    if let Some(buf) = buffers.iter().find(|buf| !buf.is_ready()) {
        return Err(Error::NotReady {
            task: buf.task_id,
            fill: buf.len(),
            required: buf.min_fill.max(1),
        });
    }
    buffers
        .iter()
        .map(|buf| {
            Ok(TaskBatch {
                task_id: buf.task_id,
                transitions: buf.sample(b, rng)?,
            })
        })
        .collect()
}

/// Fixed-width flat state: env features, self features, teammates in stored
/// order followed by zero slots, then enemies likewise.
pub fn pad_to(obs: &Observation, teammate_slots: usize, enemy_slots: usize) -> Result<Vec<f64>> {
    let width = obs
        .teammate_features
        .first()
        .or(obs.enemy_features.first())
        .map_or(crate::env::NEIGHBOR_FEATURES, |v| v.len());
    pad_to_width(obs, teammate_slots, enemy_slots, width)
}

pub(crate) fn pad_to_width(
    obs: &Observation,
    teammate_slots: usize,
    enemy_slots: usize,
    neighbor_width: usize,
) -> Result<Vec<f64>> {
    if obs.teammate_features.len() > teammate_slots {
        return Err(Error::Shape(format!(
            "{} teammates do not fit {} slots",
            obs.teammate_features.len(),
            teammate_slots
        )));
    }
    if obs.enemy_features.len() > enemy_slots {
        return Err(Error::Shape(format!(
            "{} enemies do not fit {} slots",
            obs.enemy_features.len(),
            enemy_slots
        )));
    }
    let mut out = Vec::with_capacity(
        obs.env_self_width() + (teammate_slots + enemy_slots) * neighbor_width,
    );
    out.extend_from_slice(&obs.env_features);
    out.extend_from_slice(&obs.self_features);
    for (list, slots) in [
        (&obs.teammate_features, teammate_slots),
        (&obs.enemy_features, enemy_slots),
    ] {
        for v in list.iter() {
            if v.len() != neighbor_width {
                return Err(Error::Shape(format!(
                    "neighbour vector of width {} where {} is expected",
                    v.len(),
                    neighbor_width
                )));
            }
            out.extend_from_slice(v);
        }
        out.resize(out.len() + (slots - list.len()) * neighbor_width, 0.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub min_fill: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            capacity: DEFAULT_CAPACITY,
            min_fill: DEFAULT_MIN_FILL,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(teammates: usize, enemies: usize) -> Observation {
        Observation {
            env_features: vec![0.5; 2],
            self_features: vec![0.25; 3],
            teammate_features: (0..teammates).map(|i| vec![i as f64 + 1.0; 3]).collect(),
            enemy_features: (0..enemies).map(|i| vec![-(i as f64) - 1.0; 3]).collect(),
        }
    }

    fn transition(task: usize, tag: f64) -> Transition {
        let o = Arc::new(obs(1, 2));
        Transition {
            task_id: task,
            agents: vec![AgentStep {
                agent: 0,
                obs: o.clone(),
                hidden: vec![0.1, 0.2],
                action: 3,
                reward: tag,
                next_obs: Some(o),
                next_hidden: vec![0.3, 0.4],
            }],
            team_reward: tag,
            done: false,
        }
    }

    #[test]
    fn push_and_ring_semantics() {
        let mut b = TaskBuffer::new(0, 2, 1).unwrap();
        b.push(transition(0, 1.0)).unwrap();
        assert_eq!(b.len(), 1);
        b.push(transition(0, 2.0)).unwrap();
        b.push(transition(0, 3.0)).unwrap();
        let kept: Vec<f64> = b.iter().map(|t| t.team_reward).collect();
        assert_eq!(kept, vec![2.0, 3.0]);
        assert!(matches!(b.push(transition(1, 0.0)), Err(Error::Protocol(_))));
    }

    #[test]
    fn sampling() {
        let mut b = TaskBuffer::new(0, 10, 1).unwrap();
        b.push(transition(0, 7.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = b.sample(3, &mut rng).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|t| t.team_reward == 7.0));

        let mut b = TaskBuffer::new(4, 10_000, 5000).unwrap();
        for i in 0..4999 {
            b.push(transition(4, i as f64)).unwrap();
        }
        assert!(matches!(
            b.sample(1, &mut rng),
            Err(Error::NotReady { task: 4, fill: 4999, required: 5000 })
        ));
        b.push(transition(4, 0.0)).unwrap();
        let a: Vec<f64> = b
            .sample(16, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap()
            .iter()
            .map(|t| t.team_reward)
            .collect();
        let c: Vec<f64> = b
            .sample(16, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap()
            .iter()
            .map(|t| t.team_reward)
            .collect();
        assert_eq!(a, c);
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = TaskBuffer::new(0, 10, 1).unwrap();
        for i in 0..10 {
            b.push(transition(0, i as f64)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for t in b.sample(draws, &mut rng).unwrap() {
            counts[t.team_reward as usize] += 1;
        }
        let p = 0.1;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 5.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn multi_sample_draws_from_each_task() {
        let mut bufs: Vec<TaskBuffer> = (0..3).map(|t| TaskBuffer::new(t, 10, 1).unwrap()).collect();
        for (t, b) in bufs.iter_mut().enumerate() {
            b.push(transition(t, t as f64)).unwrap();
        }
        let refs: Vec<&TaskBuffer> = bufs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = multi_sample(&refs, 32, &mut rng).unwrap();
        assert_eq!(batches.iter().map(|b| b.transitions.len()).sum::<usize>(), 96);
        for (t, b) in batches.iter().enumerate() {
            assert_eq!(b.task_id, t);
            assert!(b.transitions.iter().all(|tr| tr.task_id == t));
        }

        let single = multi_sample(&refs[..1], 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let plain = bufs[0].sample(5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(single[0].transitions, plain);

        let empty = TaskBuffer::new(7, 10, 1).unwrap();
        let refs = vec![&bufs[0], &empty];
        assert!(matches!(
            multi_sample(&refs, 4, &mut rng),
            Err(Error::NotReady { task: 7, .. })
        ));
    }

    #[test]
    fn padding() {
        let o = obs(2, 1);
        let p = pad_to(&o, 4, 1).unwrap();
        assert_eq!(p.len(), 5 + 5 * 3);
        assert_eq!(&p[5..11], &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(&p[11..17], &[0.0; 6]);
        assert_eq!(&p[17..20], &[-1.0; 3]);

        let exact = pad_to(&o, 2, 1).unwrap();
        let mut manual = o.env_self();
        for v in o.teammate_features.iter().chain(&o.enemy_features) {
            manual.extend_from_slice(v);
        }
        assert_eq!(exact, manual);

        assert!(matches!(pad_to(&obs(5, 0), 4, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn dump_and_restore() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buf.bin");
        let mut b = TaskBuffer::new(2, 3, 1).unwrap();
        for i in 0..5 {
            let mut t = transition(2, i as f64);
            if i == 4 {
                t.agents[0].next_obs = None;
                t.done = true;
            }
            b.push(t).unwrap();
        }
        b.dump(&path).unwrap();
        let r = TaskBuffer::restore(&path).unwrap();
        assert_eq!(r.task_id(), 2);
        assert_eq!(r.capacity(), 3);
        let a: Vec<&Transition> = b.iter().collect();
        let c: Vec<&Transition> = r.iter().collect();
        assert_eq!(a, c);
    }

    proptest::proptest! {
        #[test]
        fn padding_keeps_prefix_and_width(t in 0usize..4, e in 0usize..4, extra_t in 0usize..3, extra_e in 0usize..3) {
            let o = obs(t, e);
            let p = pad_to(&o, t + extra_t, e + extra_e).unwrap();
            proptest::prop_assert_eq!(p.len(), 5 + (t + extra_t + e + extra_e) * 3);
            let unpadded = pad_to(&o, t, e).unwrap();
            proptest::prop_assert_eq!(&p[..5 + t * 3], &unpadded[..5 + t * 3]);
        }
    }
}
