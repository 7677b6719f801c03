//! Self-check suites run by `dymacl verify`: finite-difference gradients,
//! permutation invariance, loss oracles and the environment reward audit.
//!
//! A suite can be run with a deliberately injected fault to confirm the
//! harness notices it.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dyan::{DyanParams, DyanSpec};
use crate::env::{
    Action, ActionKind, JointAction, Observation, Team, WorldConfig, WorldState, ENV_FEATURES,
    NUM_ACTIONS, SELF_FEATURES,
};
use crate::learners::{loss_and_grads, td_loss, td_loss_on_graph, Algorithm, Reduction};
use crate::replay::{AgentStep, TaskBatch, Transition};
use crate::tensor::{softmax_t, Activation, Aggregation, Graph, GruVars, Tensor};
use crate::transfer::{buffer_reuse_loss, distillation_loss, TeacherSet};
use crate::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Per-op relative tolerance.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Whole-network relative tolerance.
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error, so that near-zero gradients are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Gradients,
    Permutation,
    LossOracles,
    EnvAudit,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::Gradients,
        Suite::Permutation,
        Suite::LossOracles,
        Suite::EnvAudit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Permutation => "permutation",
            Suite::LossOracles => "loss-oracles",
            Suite::EnvAudit => "env-audit",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seeds: u64,
    pub permutation_samples: usize,
    pub oracle_draws: usize,
    pub audit_steps: usize,
    /// Suite whose check is deliberately broken.
    pub inject_fault: Option<Suite>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seeds: 20,
            permutation_samples: 1000,
            oracle_draws: 10_000,
            audit_steps: 10_000,
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: u64,
    pub failures: u64,
    /// Largest observed error (suite-specific scale).
    pub worst: f64,
    pub detail: String,
    pub seconds: f64,
}

pub fn run(options: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    Suite::ALL
        .into_iter()
        .map(|s| run_suite(s, options))
        .collect()
}

pub fn run_suite(suite: Suite, options: &VerifyOptions) -> Result<SuiteReport> {
    let started = Instant::now();
    let fault = options.inject_fault == Some(suite);
    let mut tally = Tally::default();
    match suite {
        Suite::Gradients => gradient_suite(options.seeds, fault, &mut tally)?,
        Suite::Permutation => permutation_suite(options.permutation_samples, fault, &mut tally)?,
        Suite::LossOracles => oracle_suite(options.seeds, options.oracle_draws, fault, &mut tally)?,
        Suite::EnvAudit => audit_suite(options.audit_steps, fault, &mut tally)?,
    }
    Ok(SuiteReport {
        suite,
        passed: tally.failures == 0 && tally.checks > 0,
        checks: tally.checks,
        failures: tally.failures,
        worst: tally.worst,
        detail: tally.first_failure.unwrap_or_default(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Default)]
struct Tally {
    checks: u64,
    failures: u64,
    worst: f64,
    first_failure: Option<String>,
}

impl Tally {
    fn check(&mut self, ok: bool, error: f64, what: impl FnOnce() -> String) {
        self.checks += 1;
        if error.is_finite() {
            self.worst = self.worst.max(error);
        } else {
            self.worst = f64::INFINITY;
        }
        if !ok {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(what());
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Random inputs

/// Observation with uniform features and the given neighbour counts.
pub fn random_observation<R: Rng + ?Sized>(
    rng: &mut R,
    teammates: usize,
    enemies: usize,
) -> Observation {
    let neighbor = |rng: &mut R| {
        vec![
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(0.1..=1.0),
        ]
    };
    Observation {
        env_features: (0..ENV_FEATURES).map(|_| rng.gen_range(0.0..1.0)).collect(),
        self_features: (0..SELF_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        teammate_features: (0..teammates).map(|_| neighbor(rng)).collect(),
        enemy_features: (0..enemies).map(|_| neighbor(rng)).collect(),
    }
}

fn random_hidden<R: Rng + ?Sized>(rng: &mut R, spec: &DyanSpec) -> Vec<f64> {
    if spec.use_gru {
        (0..spec.hidden_units).map(|_| rng.gen_range(-0.5..0.5)).collect()
    } else {
        Vec::new()
    }
}

/// Transition with `agents` agents, each seeing `neighbors` teammates and
/// enemies; terminal with probability one half.
pub fn random_transition<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &DyanSpec,
    task_id: usize,
    agents: usize,
    neighbors: usize,
) -> Transition {
    let done = rng.gen_bool(0.5);
    let agents: Vec<AgentStep> = (0..agents)
        .map(|agent| AgentStep {
            agent,
            obs: random_observation(rng, neighbors, neighbors).into(),
            hidden: random_hidden(rng, spec),
            action: rng.gen_range(0..spec.num_actions),
            reward: rng.gen_range(-1.0..1.0),
            next_obs: (!done).then(|| random_observation(rng, neighbors, neighbors).into()),
            next_hidden: random_hidden(rng, spec),
        })
        .collect();
    Transition {
        task_id,
        team_reward: agents.iter().map(|a| a.reward).sum(),
        agents,
        done,
    }
}

// ---------------------------------------------------------------------------
// Gradients

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates skipped because the loss has a kink within the step
    /// (ReLU or MAX switching), detected by disagreeing step sizes.
    pub skipped: usize,
}

/// Compares `analytic` with central differences of `f` at the given
/// `(tensor, element)` coordinates.
pub fn check_gradient<F>(
    f: F,
    params: &[Tensor],
    analytic: &[Vec<f64>],
    coords: &[(usize, usize)],
    tolerance: f64,
) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut out = GradCheck::default();
    let diff = |t: usize, i: usize, h: f64, work: &mut Vec<Tensor>| -> Result<f64> {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + h;
        let up = f(work)?;
        work[t].data_mut()[i] = orig - h;
        let down = f(work)?;
        work[t].data_mut()[i] = orig;
        Ok((up - down) / (2.0 * h))
    };
    for &(t, i) in coords {
        let a = analytic[t][i];
        let n = diff(t, i, FD_STEP, &mut work)?;
        let err = relative_error(a, n);
        if err > tolerance {
            let n_half = diff(t, i, FD_STEP / 2.0, &mut work)?;
            if relative_error(n, n_half) > tolerance {
                out.skipped += 1;
                continue;
            }
        }
        out.max_rel = out.max_rel.max(err);
        out.checked += 1;
    }
    Ok(out)
}

fn all_coords(params: &[Tensor]) -> Vec<(usize, usize)> {
    params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect()
}

/// Up to `per_tensor` random coordinates of every tensor.
fn sampled_coords<R: Rng + ?Sized>(
    rng: &mut R,
    params: &[Tensor],
    per_tensor: usize,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (t, p) in params.iter().enumerate() {
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.shuffle(rng);
        out.extend(idx.into_iter().take(per_tensor).map(|i| (t, i)));
    }
    out
}

/// Gradient of a graph loss built from leaf parameters; `fault` biases it.
fn graph_grads<F>(params: &[Tensor], build: &F, fault: bool) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[crate::tensor::Var]) -> Result<crate::tensor::Var>,
{
    let mut g = Graph::new();
    let vars: Vec<_> = params.iter().map(|p| g.param(p)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let mut grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zero(v)).collect();
    if fault {
        grads[0][0] += 1e-2 * (1.0 + grads[0][0].abs());
    }
    Ok(grads)
}

fn graph_value<F>(params: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[crate::tensor::Var]) -> Result<crate::tensor::Var>,
{
    let mut g = Graph::new();
    let vars: Vec<_> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.scalar(loss)
}

fn op_check<F>(
    name: &str,
    params: Vec<Tensor>,
    build: F,
    fault: bool,
    tally: &mut Tally,
) -> Result<()>
where
    F: Fn(&mut Graph, &[crate::tensor::Var]) -> Result<crate::tensor::Var>,
{
    let grads = graph_grads(&params, &build, fault)?;
    let r = check_gradient(
        |p| graph_value(p, &build),
        &params,
        &grads,
        &all_coords(&params),
        OP_TOLERANCE,
    )?;
    tally.check(r.max_rel < OP_TOLERANCE && r.checked > 0, r.max_rel, || {
        format!("{name}: relative error {:.3e}", r.max_rel)
    });
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn gradient_suite(seeds: u64, fault: bool, tally: &mut Tally) -> Result<()> {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        for act in [Activation::Identity, Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
            let params = vec![uniform(&mut rng, vec![4]), uniform(&mut rng, vec![4, 3]), uniform(&mut rng, vec![3])];
            let p = proj.clone();
            op_check(
                &format!("dense {act:?} seed {seed}"),
                params,
                move |g, v| {
                    let y = g.dense(v[0], v[1], v[2], act)?;
                    g.dot_const(y, &p[..3])
                },
                fault,
                tally,
            )?;
        }

        let (ni, nh) = (3, 4);
        let mut params = vec![uniform(&mut rng, vec![ni]), uniform(&mut rng, vec![nh])];
        for _ in 0..3 {
            params.push(uniform(&mut rng, vec![ni, nh]));
        }
        for _ in 0..3 {
            params.push(uniform(&mut rng, vec![nh, nh]));
        }
        for _ in 0..3 {
            params.push(uniform(&mut rng, vec![nh]));
        }
        let p = proj.clone();
        op_check(
            &format!("gru seed {seed}"),
            params,
            move |g, v| {
                let gru = GruVars {
                    w_z: v[2], w_r: v[3], w_h: v[4],
                    u_z: v[5], u_r: v[6], u_h: v[7],
                    b_z: v[8], b_r: v[9], b_h: v[10],
                };
                let h = g.gru_step(v[0], v[1], gru)?;
                g.dot_const(h, &p[..nh])
            },
            fault,
            tally,
        )?;

        for kind in [Aggregation::Sum, Aggregation::Mean, Aggregation::Max] {
            let items: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, vec![5])).collect();
            let p = proj.clone();
            op_check(
                &format!("aggregate {kind} seed {seed}"),
                items,
                move |g, v| {
                    let a = g.aggregate(kind, v, 5)?;
                    g.dot_const(a, &p[..5])
                },
                fault,
                tally,
            )?;
        }

        let omega = rng.gen_range(0.5..2.0);
        let p = proj.clone();
        op_check(
            &format!("log_softmax seed {seed}"),
            vec![uniform(&mut rng, vec![6])],
            move |g, v| {
                let l = g.log_softmax(v[0], omega)?;
                g.dot_const(l, &p[..6])
            },
            fault,
            tally,
        )?;

        network_checks(seed, &mut rng, fault, tally)?;
    }
    Ok(())
}

fn network_checks(seed: u64, rng: &mut ChaCha8Rng, fault: bool, tally: &mut Tally) -> Result<()> {
    let algorithm = if seed.is_multiple_of(2) { Algorithm::Iql } else { Algorithm::Vdn };
    for kind in [Aggregation::Sum, Aggregation::Mean, Aggregation::Max] {
        for neighbors in [0usize, 1, 4] {
            let spec = DyanSpec {
                aggregation: kind,
                use_gru: seed % 3 != 2,
                ..DyanSpec::default()
            };
            let online = DyanParams::build(&spec, rng.gen())?;
            let target = DyanParams::build(&spec, rng.gen())?;
            let batch: Vec<Transition> = (0..2)
                .map(|_| random_transition(rng, &spec, 0, 2, neighbors))
                .collect();
            let refs: Vec<&Transition> = batch.iter().collect();
            let (_, mut grads) = loss_and_grads(&online, |g, b| {
                td_loss_on_graph(g, b, &target, &refs, algorithm, 0.98, Reduction::Sum)
            })?;
            if fault {
                grads[0][0] += 1e-2 * (1.0 + grads[0][0].abs());
            }
            let mut coords = sampled_coords(rng, online.tensors(), 6);
            if !coords.contains(&(0, 0)) {
                coords.push((0, 0));
            }
            let r = check_gradient(
                |p| {
                    let net = DyanParams::from_tensors(&spec, p.to_vec())?;
                    td_loss(&refs, &net, &target, algorithm, 0.98, Reduction::Sum)
                },
                online.tensors(),
                &grads,
                &coords,
                NETWORK_TOLERANCE,
            )?;
            let few_skips = r.skipped * 10 <= coords.len();
            tally.check(r.max_rel < NETWORK_TOLERANCE && few_skips, r.max_rel, || {
                format!(
                    "network {kind} with {neighbors} neighbours, seed {seed}: relative error {:.3e}, {} skipped",
                    r.max_rel, r.skipped
                )
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Permutation invariance

fn permutation_suite(samples: usize, fault: bool, tally: &mut Tally) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let nets: Vec<DyanParams> = [Aggregation::Sum, Aggregation::Mean, Aggregation::Max]
        .into_iter()
        .map(|a| {
            DyanParams::build(
                &DyanSpec {
                    aggregation: a,
                    ..DyanSpec::default()
                },
                7,
            )
        })
        .collect::<Result<_>>()?;
    for i in 0..samples {
        let net = &nets[i % nets.len()];
        let (nt, ne) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let obs = random_observation(&mut rng, nt, ne);
        let hidden = random_hidden(&mut rng, net.spec());
        let mut permuted = obs.clone();
        permuted.teammate_features.shuffle(&mut rng);
        permuted.enemy_features.shuffle(&mut rng);
        if fault {
            permuted.teammate_features[0][0] += 1e-6;
        }
        let a = net.forward(&obs, &hidden)?;
        let b = net.forward(&permuted, &hidden)?;
        let diff = a
            .q_values
            .iter()
            .chain(&a.hidden_next)
            .zip(b.q_values.iter().chain(&b.hidden_next))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        tally.check(diff <= 1e-9, diff, || {
            format!("sample {i}: outputs differ by {diff:.3e}")
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Loss oracles

/// Scalar double sum over tasks and samples, written without the graph.
fn reuse_oracle(
    batches: &[Vec<Transition>],
    online: &DyanParams,
    target: &DyanParams,
    gamma: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in batches {
        for t in batch {
            let mut sum = 0.0;
            for a in &t.agents {
                let q = online.forward(&a.obs, &a.hidden)?.q_values[a.action];
                let next = match &a.next_obs {
                    Some(o) => target
                        .forward(o, &a.next_hidden)?
                        .q_values
                        .into_iter()
                        .fold(f64::NEG_INFINITY, f64::max),
                    None => 0.0,
                };
                let err = a.reward + gamma * next - q;
                sum += err * err;
            }
            total += sum / t.agents.len() as f64;
        }
    }
    Ok(total)
}

fn kl_oracle(teacher: &[f64], student: &[f64], omega: f64) -> f64 {
    let soft = |x: &[f64], t: f64| -> Vec<f64> {
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| ((v - m) / t).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    let p = soft(teacher, omega);
    let q = soft(student, 1.0);
    p.iter()
        .zip(&q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

fn oracle_suite(seeds: u64, draws: usize, fault: bool, tally: &mut Tally) -> Result<()> {
    let shift = if fault { 1e-8 } else { 0.0 };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let spec = DyanSpec::default();
        let online = DyanParams::build(&spec, rng.gen())?;
        let target = DyanParams::build(&spec, rng.gen())?;
        let k = 1 + (seed as usize % 3);
        let batches: Vec<Vec<Transition>> = (0..k)
            .map(|task| {
                (0..4)
                    .map(|_| {
                        let n = rng.gen_range(1..4);
                        let nb = rng.gen_range(0..4);
                        random_transition(&mut rng, &spec, task, n, nb)
                    })
                    .collect()
            })
            .collect();
        let task_batches: Vec<TaskBatch> = batches
            .iter()
            .enumerate()
            .map(|(task_id, b)| TaskBatch {
                task_id,
                transitions: b.iter().collect(),
            })
            .collect();
        let got = buffer_reuse_loss(&task_batches, &online, &target, Algorithm::Iql, 0.98)?;
        let want = reuse_oracle(&batches, &online, &target, 0.98)? + shift;
        let err = (got - want).abs();
        tally.check(err <= 1e-10, err, || {
            format!("buffer reuse, seed {seed}: {got} vs oracle {want}")
        });

        let teacher = DyanParams::build(&spec, rng.gen())?;
        let omega = rng.gen_range(0.25..4.0);
        let states: Vec<(Observation, Vec<f64>)> = (0..4)
            .map(|_| {
                let n = rng.gen_range(0..4);
                (random_observation(&mut rng, n, n), random_hidden(&mut rng, &spec))
            })
            .collect();
        let refs: Vec<(&Observation, &[f64])> =
            states.iter().map(|(o, h)| (o, h.as_slice())).collect();
        let teachers = TeacherSet::new(vec![teacher.clone()]);
        let got = distillation_loss(&teachers, &online, &refs, omega, false)?;
        let mut want = shift;
        for (o, h) in &states {
            let tq = teacher.forward(o, h)?.q_values;
            let sq = online.forward(o, h)?.q_values;
            want += kl_oracle(&tq, &sq, omega);
        }
        let err = (got - want).abs();
        tally.check(err <= 1e-10, err, || {
            format!("distillation, seed {seed}: {got} vs oracle {want}")
        });

        let same = TeacherSet::new(vec![online.clone()]);
        let zero = distillation_loss(&same, &online, &refs, 1.0, false)? + shift;
        tally.check(zero.abs() <= 1e-12, zero.abs(), || {
            format!("self-distillation, seed {seed}: {zero}")
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..draws {
        let n = rng.gen_range(2..NUM_ACTIONS + 1);
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let omega = rng.gen_range(0.1..10.0);
        let p = softmax_t(&t, omega)?;
        let ls = crate::tensor::log_softmax_t(&s, 1.0)?;
        let lp = crate::tensor::log_softmax_t(&t, omega)?;
        let kl: f64 = p.iter().zip(&lp).zip(&ls).map(|((a, b), c)| a * (b - c)).sum::<f64>() - shift * 1e6;
        tally.check(kl >= -1e-12, (-kl).max(0.0), || format!("draw {i}: negative KL {kl}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Environment audit

fn audit_suite(steps: usize, fault: bool, tally: &mut Tally) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa0d1);
    let sizes = [(1, 1), (3, 3), (5, 4), (8, 8)];
    let mut done_steps = 0;
    let mut episode = 0;
    while done_steps < steps {
        let (a, b) = sizes[episode % sizes.len()];
        episode += 1;
        let cfg = WorldConfig::battle(a, b).with_side(if a + b <= 4 { 4 } else { 8 }).with_seed(rng.gen());
        let mut world = WorldState::reset(&cfg)?;
        while !world.is_done() && done_steps < steps {
            let before = world.clone();
            let mut joint = JointAction::new(world.agents.len());
            let (mut moves, mut attacks) = (0usize, 0usize);
            for id in (0..world.agents.len()).filter(|&i| world.agents[i].alive) {
                let action = Action::from_id(rng.gen_range(0..NUM_ACTIONS))?;
                match action.kind() {
                    ActionKind::Move => moves += 1,
                    ActionKind::Attack => attacks += 1,
                }
                joint.set(id, action);
            }
            let r = world.step(&joint)?;
            done_steps += 1;
            let total: i64 = r.reward_units.iter().sum();
            let expected = r.events.expected_units() + fault as i64;
            let alive_before = before.agents.iter().filter(|a| a.alive).count();
            let alive_after = world.agents.iter().filter(|a| a.alive).count();
            let hurt = before
                .agents
                .iter()
                .zip(&world.agents)
                .filter(|(x, y)| y.hp < x.hp)
                .count();
            let occupied: std::collections::HashSet<_> = world
                .agents
                .iter()
                .filter(|a| a.alive)
                .map(|a| a.position)
                .collect();
            let team_ok = [Team::A, Team::B].iter().all(|&t| {
                let s: f64 = world
                    .agents
                    .iter()
                    .filter(|a| a.team == t)
                    .map(|a| r.rewards[a.id])
                    .sum();
                s == r.team_reward[t.index()]
            });
            let ok = total == expected
                && r.events.moves == moves
                && r.events.attacks_on_enemies + r.events.attacks_on_empty == attacks
                && r.events.kills == alive_before - alive_after
                && r.events.agents_attacked == hurt
                && alive_after <= alive_before
                && occupied.len() == alive_after
                && world.agents.iter().all(|a| a.alive == (a.hp > 0) && world.in_bounds(a.position))
                && team_ok;
            tally.check(ok, (total - expected).abs() as f64, || {
                format!("step {done_steps}: reward units {total}, events imply {expected}")
            });
        }
    }
    Ok(())
}
