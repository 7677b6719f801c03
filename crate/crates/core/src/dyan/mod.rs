//! Agent-count-independent Q-network.
//!
//! Structure:
//!
//! ```text
//! env ++ self features ──dense─────────────┐
//! each teammate ──shared dense──► AGG ──────┼─ concat ─► GRU (or dense) ─► Q head
//! each enemy    ──shared dense──► AGG ──────┘
//! ```
//!
//! The per-neighbour branches are applied to every visible neighbour with the
//! same weights and reduced by a set aggregation, so the parameter set depends
//! on [`DyanSpec`] alone. The `Vanilla` network kind replaces the two set
//! branches with a flat zero-padded input of fixed slot counts; it exists as
//! the fixed-input baseline.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Observation, ENV_FEATURES, NEIGHBOR_FEATURES, NUM_ACTIONS, SELF_FEATURES};
use crate::replay::pad_to_width;
use crate::tensor::{
    aggregate, check_finite, matvec_into, sigmoid, Activation, Aggregation, Graph, GruVars, Tensor,
    Var,
};
use crate::{Error, Result};

pub use checkpoint::{checkpoint_hash, load, save};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetworkKind {
    Dyan,
    Vanilla {
        teammate_slots: usize,
        enemy_slots: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DyanSpec {
    pub env_self_width: usize,
    pub neighbor_feature_width: usize,
    pub hidden_units: usize,
    pub aggregation: Aggregation,
    pub use_gru: bool,
    pub num_actions: usize,
    /// Separate teammate and enemy branch weights.
    pub split_teams: bool,
    pub network: NetworkKind,
}

impl Default for DyanSpec {
    fn default() -> Self {
        DyanSpec {
            env_self_width: ENV_FEATURES + SELF_FEATURES,
            neighbor_feature_width: NEIGHBOR_FEATURES,
            hidden_units: 16,
            aggregation: Aggregation::Sum,
            use_gru: true,
            num_actions: NUM_ACTIONS,
            split_teams: true,
            network: NetworkKind::Dyan,
        }
    }
}

impl DyanSpec {
    /// Wider preset matching the 64-unit description.
    pub fn starcraft_like() -> Self {
        DyanSpec {
            hidden_units: 64,
            ..DyanSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.env_self_width == 0
            || self.neighbor_feature_width == 0
            || self.hidden_units == 0
            || self.num_actions == 0
        {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }

    pub fn is_vanilla(&self) -> bool {
        matches!(self.network, NetworkKind::Vanilla { .. })
    }

    fn core_input_width(&self) -> usize {
        match self.network {
            NetworkKind::Dyan => 3 * self.hidden_units,
            NetworkKind::Vanilla { .. } => self.hidden_units,
        }
    }

    /// `(name, shape, fan_in)` of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let h = self.hidden_units;
        let f = self.neighbor_feature_width;
        let mut out = Vec::new();
        let mut dense = |name: &str, n_in: usize, n_out: usize| {
            out.push((format!("{name}.w"), vec![n_in, n_out], n_in));
            out.push((format!("{name}.b"), vec![n_out], n_in));
        };
        match self.network {
            NetworkKind::Dyan => {
                dense("self", self.env_self_width, h);
                if self.split_teams {
                    dense("team", f, h);
                    dense("enemy", f, h);
                } else {
                    dense("neighbor", f, h);
                }
            }
            NetworkKind::Vanilla {
                teammate_slots,
                enemy_slots,
            } => dense(
                "input",
                self.env_self_width + (teammate_slots + enemy_slots) * f,
                h,
            ),
        }
        let c = self.core_input_width();
        if self.use_gru {
            for g in ["z", "r", "h"] {
                out.push((format!("gru.w_{g}"), vec![c, h], c));
            }
            for g in ["z", "r", "h"] {
                out.push((format!("gru.u_{g}"), vec![h, h], h));
            }
            for g in ["z", "r", "h"] {
                out.push((format!("gru.b_{g}"), vec![h], h));
            }
        } else {
            out.push(("core.w".into(), vec![c, h], c));
            out.push(("core.b".into(), vec![h], c));
        }
        out.push(("head.w".into(), vec![h, self.num_actions], h));
        out.push(("head.b".into(), vec![self.num_actions], h));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    pub fn initial_hidden(&self) -> Vec<f64> {
        vec![0.0; self.hidden_units]
    }
}

/// All learnable tensors of one network, in [`DyanSpec::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct DyanParams {
    spec: DyanSpec,
    tensors: Vec<Tensor>,
}

impl DyanParams {
    /// Uniform `±1/sqrt(fan_in)` initialisation from a seeded stream.
    pub fn build(spec: &DyanSpec, seed: u64) -> Result<DyanParams> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = spec
            .layout()
            .into_iter()
            .map(|(_, shape, fan_in)| Tensor::uniform(shape, fan_in, &mut rng))
            .collect();
        Ok(DyanParams {
            spec: spec.clone(),
            tensors,
        })
    }

    pub fn from_tensors(spec: &DyanSpec, tensors: Vec<Tensor>) -> Result<DyanParams> {
        spec.validate()?;
        let layout = spec.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(DyanParams {
            spec: spec.clone(),
            tensors,
        })
    }

    pub fn spec(&self) -> &DyanSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        self.spec.layout().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            spec: self.spec.clone(),
            vars,
        }
    }

    /// Graph-free forward. Accumulates in the same order as the graph path,
    /// so both agree bit for bit.
    pub fn forward(&self, obs: &Observation, hidden: &[f64]) -> Result<ForwardOutput> {
        let spec = &self.spec;
        let h = spec.hidden_units;
        let t = &self.tensors;
        let dense = |x: &[f64], i: usize, act: Activation| -> Vec<f64> {
            let mut out = t[i + 1].data().to_vec();
            matvec_into(x, t[i].data(), &mut out);
            out.iter_mut().for_each(|o| *o = act.apply(*o));
            out
        };
        let (core_in, first_core, team, enemy) = match spec.network {
            NetworkKind::Dyan => {
                self.check_widths(obs)?;
                let own = dense(&obs.env_self(), 0, Activation::Relu);
                let branch = |items: &[Vec<f64>], i: usize| -> Result<Vec<f64>> {
                    let hs: Vec<Vec<f64>> =
                        items.iter().map(|x| dense(x, i, Activation::Relu)).collect();
                    aggregate(spec.aggregation, &hs, h)
                };
                let team = branch(&obs.teammate_features, 2)?;
                let enemy = branch(
                    &obs.enemy_features,
                    if spec.split_teams { 4 } else { 2 },
                )?;
                let cat = [own.as_slice(), &team, &enemy].concat();
                (cat, if spec.split_teams { 6 } else { 4 }, team, enemy)
            }
            NetworkKind::Vanilla {
                teammate_slots,
                enemy_slots,
            } => {
                self.check_widths(obs)?;
                let flat = pad_to_width(obs, teammate_slots, enemy_slots, spec.neighbor_feature_width)?;
                (dense(&flat, 0, Activation::Relu), 2, Vec::new(), Vec::new())
            }
        };
        let (core_out, hidden_next, head) = if spec.use_gru {
            let hv = check_hidden(hidden, h)?;
            let v = &t[first_core..];
            let gate = |w: usize, u: usize, b: usize, hin: &[f64]| {
                let mut a = v[b].data().to_vec();
                matvec_into(&core_in, v[w].data(), &mut a);
                matvec_into(hin, v[u].data(), &mut a);
                a
            };
            let z: Vec<f64> = gate(0, 3, 6, &hv).into_iter().map(sigmoid).collect();
            let r: Vec<f64> = gate(1, 4, 7, &hv).into_iter().map(sigmoid).collect();
            let rh: Vec<f64> = r.iter().zip(&hv).map(|(a, b)| a * b).collect();
            let n: Vec<f64> = gate(2, 5, 8, &rh).into_iter().map(f64::tanh).collect();
            let out: Vec<f64> = (0..h).map(|k| (1.0 - z[k]) * hv[k] + z[k] * n[k]).collect();
            (out.clone(), out, first_core + 9)
        } else {
            (dense(&core_in, first_core, Activation::Relu), Vec::new(), first_core + 2)
        };
        let q_values = dense(&core_out, head, Activation::Identity);
        check_finite("forward", &q_values)?;
        check_finite("forward", &hidden_next)?;
        Ok(ForwardOutput {
            q_values,
            hidden_next,
            teammate_embedding: team,
            enemy_embedding: enemy,
        })
    }

    fn check_widths(&self, obs: &Observation) -> Result<()> {
        check_widths(&self.spec, obs)
    }

    /// Post-aggregation teammate and enemy embeddings.
    pub fn embed(&self, obs: &Observation) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.spec.is_vanilla() {
            return Err(Error::Config(
                "the vanilla network has no set embeddings".into(),
            ));
        }
        let out = self.forward(obs, &[])?;
        Ok((out.teammate_embedding, out.enemy_embedding))
    }

    /// Graph-based forward, used to cross-check [`DyanParams::forward`].
    pub fn forward_on_graph(&self, obs: &Observation, hidden: &[f64]) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = bound.forward(&mut g, obs, hidden)?;
        Ok(out.read(&g))
    }
}

fn check_hidden(hidden: &[f64], h: usize) -> Result<Vec<f64>> {
    match hidden.len() {
        0 => Ok(vec![0.0; h]),
        n if n == h => Ok(hidden.to_vec()),
        n => Err(Error::Shape(format!(
            "hidden state of width {n}, expected {h}"
        ))),
    }
}

fn check_widths(spec: &DyanSpec, obs: &Observation) -> Result<()> {
    if obs.env_self_width() != spec.env_self_width {
        return Err(Error::Shape(format!(
            "env+self width {} but the network expects {}",
            obs.env_self_width(),
            spec.env_self_width
        )));
    }
    let f = spec.neighbor_feature_width;
    if let Some(bad) = obs
        .teammate_features
        .iter()
        .chain(&obs.enemy_features)
        .find(|v| v.len() != f)
    {
        return Err(Error::Shape(format!(
            "neighbour vector of width {} but the network expects {f}",
            bad.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub q_values: Vec<f64>,
    pub hidden_next: Vec<f64>,
    /// Empty for the vanilla network.
    pub teammate_embedding: Vec<f64>,
    pub enemy_embedding: Vec<f64>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub q: Var,
    pub hidden_next: Option<Var>,
    pub teammate_embedding: Option<Var>,
    pub enemy_embedding: Option<Var>,
}

impl ForwardVars {
    pub fn read(&self, g: &Graph) -> ForwardOutput {
        let get = |v: Option<Var>| v.map(|v| g.value(v).to_vec()).unwrap_or_default();
        ForwardOutput {
            q_values: g.value(self.q).to_vec(),
            hidden_next: get(self.hidden_next),
            teammate_embedding: get(self.teammate_embedding),
            enemy_embedding: get(self.enemy_embedding),
        }
    }
}

/// Parameters registered on a graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    spec: DyanSpec,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn spec(&self) -> &DyanSpec {
        &self.spec
    }

    fn check_widths(&self, obs: &Observation) -> Result<()> {
        check_widths(&self.spec, obs)
    }

    fn set_branch(
        &self,
        g: &mut Graph,
        items: &[Vec<f64>],
        (w, b): (Var, Var),
    ) -> Result<Var> {
        let mut hs = Vec::with_capacity(items.len());
        for item in items {
            let x = g.vector(item.clone());
            hs.push(g.dense(x, w, b, Activation::Relu)?);
        }
        g.aggregate(self.spec.aggregation, &hs, self.spec.hidden_units)
    }

    /// `(self, teammate, enemy)` branch outputs.
    fn branches(&self, g: &mut Graph, obs: &Observation) -> Result<(Var, Var, Var)> {
        self.check_widths(obs)?;
        let v = &self.vars;
        let x = g.vector(obs.env_self());
        let own = g.dense(x, v[0], v[1], Activation::Relu)?;
        let (team_w, enemy_w) = if self.spec.split_teams {
            ((v[2], v[3]), (v[4], v[5]))
        } else {
            ((v[2], v[3]), (v[2], v[3]))
        };
        let team = self.set_branch(g, &obs.teammate_features, team_w)?;
        let enemy = self.set_branch(g, &obs.enemy_features, enemy_w)?;
        Ok((own, team, enemy))
    }

    pub fn embeddings(&self, g: &mut Graph, obs: &Observation) -> Result<(Var, Var)> {
        if self.spec.is_vanilla() {
            return Err(Error::Config(
                "the vanilla network has no set embeddings".into(),
            ));
        }
        let (_, team, enemy) = self.branches(g, obs)?;
        Ok((team, enemy))
    }

    pub fn forward(&self, g: &mut Graph, obs: &Observation, hidden: &[f64]) -> Result<ForwardVars> {
        let h = self.spec.hidden_units;
        let (core_in, first_core, team_emb, enemy_emb) = match self.spec.network {
            NetworkKind::Dyan => {
                let (own, team, enemy) = self.branches(g, obs)?;
                let cat = g.concat(&[own, team, enemy])?;
                let first = if self.spec.split_teams { 6 } else { 4 };
                (cat, first, Some(team), Some(enemy))
            }
            NetworkKind::Vanilla {
                teammate_slots,
                enemy_slots,
            } => {
                self.check_widths(obs)?;
                let flat = pad_to_width(
                    obs,
                    teammate_slots,
                    enemy_slots,
                    self.spec.neighbor_feature_width,
                )?;
                let x = g.vector(flat);
                let layer = g.dense(x, self.vars[0], self.vars[1], Activation::Relu)?;
                (layer, 2, None, None)
            }
        };
        let v = &self.vars[first_core..];
        let (core_out, hidden_next, head) = if self.spec.use_gru {
            let hv = check_hidden(hidden, h)?;
            let hv = g.vector(hv);
            let gru = GruVars {
                w_z: v[0],
                w_r: v[1],
                w_h: v[2],
                u_z: v[3],
                u_r: v[4],
                u_h: v[5],
                b_z: v[6],
                b_r: v[7],
                b_h: v[8],
            };
            let out = g.gru_step(core_in, hv, gru)?;
            (out, Some(out), &v[9..])
        } else {
            let out = g.dense(core_in, v[0], v[1], Activation::Relu)?;
            (out, None, &v[2..])
        };
        let q = g.dense(core_out, head[0], head[1], Activation::Identity)?;
        Ok(ForwardVars {
            q,
            hidden_next,
            teammate_embedding: team_emb,
            enemy_embedding: enemy_emb,
        })
    }
}
