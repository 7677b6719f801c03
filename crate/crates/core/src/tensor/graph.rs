use serde::{Deserialize, Serialize};

use super::{aggregate_with_argmax, check_finite, check_temperature, Aggregation, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parameters of one GRU cell. Input weights are `[in, hidden]`, recurrent
/// weights `[hidden, hidden]`, biases `[hidden]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

#[derive(Debug)]
struct GruCache {
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
        act: Activation,
    },
    Gru {
        input: Var,
        hidden: Var,
        params: GruVars,
        cache: Box<GruCache>,
    },
    Aggregate {
        kind: Aggregation,
        items: Vec<Var>,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    AddN(Vec<Var>),
    Sub(Var, Var),
    Offset(Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Pick(Var, usize),
    Max(Var, usize),
    LogSoftmax {
        input: Var,
        temperature: f64,
    },
    Dot {
        input: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape. Nodes are created in topological order, so a reverse
/// sweep over the node list is a valid backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

pub(crate) fn matvec_into(x: &[f64], w: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// `dx[i] += Σ_j w[i, j] dy[j]` and `dw[i, j] += x[i] dy[j]`.
fn matvec_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let cols = dy.len();
    if let Some(dx) = dx {
        for (i, d) in dx.iter_mut().enumerate() {
            let row = &w[i * cols..(i + 1) * cols];
            *d += row.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    if let Some(dw) = dw {
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut dw[i * cols..(i + 1) * cols];
            for (g, &d) in row.iter_mut().zip(dy) {
                *g += xi * d;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn vector(&mut self, v: Vec<f64>) -> Var {
        self.constant(Tensor::vector(v))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    fn width(&self, v: Var) -> usize {
        self.node(v).value.len()
    }

    fn expect_vector(&self, v: Var, what: &str) -> Result<usize> {
        let shape = &self.node(v).shape;
        if shape.len() != 1 {
            return Err(Error::Shape(format!("{what} must be a vector, got {shape:?}")));
        }
        Ok(shape[0])
    }

    fn expect_matrix(&self, v: Var, rows: usize, what: &str) -> Result<usize> {
        let shape = &self.node(v).shape;
        if shape.len() != 2 || shape[0] != rows {
            return Err(Error::Shape(format!(
                "{what} must be [{rows}, _], got {shape:?}"
            )));
        }
        Ok(shape[1])
    }

    /// `activation(input · weight + bias)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var, act: Activation) -> Result<Var> {
        let n_in = self.expect_vector(input, "dense input")?;
        let n_out = self.expect_matrix(weight, n_in, "dense weight")?;
        if self.node(bias).shape != [n_out] {
            return Err(Error::Shape(format!(
                "dense bias must be [{n_out}], got {:?}",
                self.node(bias).shape
            )));
        }
        let mut out = self.value(bias).to_vec();
        matvec_into(self.value(input), self.value(weight), &mut out);
        for o in out.iter_mut() {
            *o = act.apply(*o);
        }
        check_finite("dense", &out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            vec![n_out],
            out,
            Op::Dense {
                input,
                weight,
                bias,
                act,
            },
            rg,
        ))
    }

    /// One GRU step: `z = σ(x W_z + h U_z + b_z)`, `r` likewise,
    /// `n = tanh(x W_h + (r ⊙ h) U_h + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ n`.
    pub fn gru_step(&mut self, input: Var, hidden: Var, p: GruVars) -> Result<Var> {
        let n_in = self.expect_vector(input, "gru input")?;
        let n_h = self.expect_vector(hidden, "gru hidden")?;
        for (w, name) in [(p.w_z, "w_z"), (p.w_r, "w_r"), (p.w_h, "w_h")] {
            if self.expect_matrix(w, n_in, name)? != n_h {
                return Err(Error::Shape(format!("gru {name} must be [{n_in}, {n_h}]")));
            }
        }
        for (u, name) in [(p.u_z, "u_z"), (p.u_r, "u_r"), (p.u_h, "u_h")] {
            if self.expect_matrix(u, n_h, name)? != n_h {
                return Err(Error::Shape(format!("gru {name} must be [{n_h}, {n_h}]")));
            }
        }
        for (b, name) in [(p.b_z, "b_z"), (p.b_r, "b_r"), (p.b_h, "b_h")] {
            if self.node(b).shape != [n_h] {
                return Err(Error::Shape(format!("gru {name} must be [{n_h}]")));
            }
        }
        let x = self.value(input);
        let h = self.value(hidden);

        let gate = |w: Var, u: Var, b: Var, hin: &[f64]| {
            let mut a = self.value(b).to_vec();
            matvec_into(x, self.value(w), &mut a);
            matvec_into(hin, self.value(u), &mut a);
            a
        };
        let z: Vec<f64> = gate(p.w_z, p.u_z, p.b_z, h).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = gate(p.w_r, p.u_r, p.b_r, h).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let n: Vec<f64> = gate(p.w_h, p.u_h, p.b_h, &rh)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let out: Vec<f64> = (0..n_h).map(|k| (1.0 - z[k]) * h[k] + z[k] * n[k]).collect();
        check_finite("gru_step", &out)?;
        let vars = [
            input, hidden, p.w_z, p.w_r, p.w_h, p.u_z, p.u_r, p.u_h, p.b_z, p.b_r, p.b_h,
        ];
        let rg = vars.iter().any(|&v| self.rg(v));
        Ok(self.push(
            vec![n_h],
            out,
            Op::Gru {
                input,
                hidden,
                params: p,
                cache: Box::new(GruCache { z, r, n, rh }),
            },
            rg,
        ))
    }

    /// Set reduction over `items`; an empty set yields zeros of `width`.
    pub fn aggregate(&mut self, kind: Aggregation, items: &[Var], width: usize) -> Result<Var> {
        for &item in items {
            self.expect_vector(item, "aggregate item")?;
        }
        let (out, argmax) =
            aggregate_with_argmax(kind, items.iter().map(|&v| self.value(v)), width)?;
        let rg = items.iter().any(|&v| self.rg(v));
        Ok(self.push(
            vec![width],
            out,
            Op::Aggregate {
                kind,
                items: items.to_vec(),
                argmax,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            self.expect_vector(p, "concat part")?;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(vec![out.len()], out, Op::Concat(parts.to_vec()), rg))
    }

    /// Element-wise sum of equal-shape nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("add_n of nothing".into()))?;
        let shape = self.node(first).shape.clone();
        let mut out = vec![0.0; self.width(first)];
        for &p in parts {
            if self.node(p).shape != shape {
                return Err(Error::Shape(format!(
                    "add_n shape {:?} vs {:?}",
                    self.node(p).shape,
                    shape
                )));
            }
            for (o, v) in out.iter_mut().zip(self.value(p)) {
                *o += v;
            }
        }
        check_finite("add_n", &out)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(shape, out, Op::AddN(parts.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Shape(format!(
                "sub shape {:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        check_finite("sub", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.node(a).shape.clone(), out, Op::Sub(a, b), rg))
    }

    /// `a + c` for a constant `c` of the same width.
    pub fn offset(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.width(a) {
            return Err(Error::Shape(format!(
                "offset width {} vs {}",
                c.len(),
                self.width(a)
            )));
        }
        let out: Vec<f64> = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        check_finite("offset", &out)?;
        let rg = self.rg(a);
        Ok(self.push(self.node(a).shape.clone(), out, Op::Offset(a), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * k).collect();
        check_finite("scale", &out)?;
        let rg = self.rg(a);
        Ok(self.push(self.node(a).shape.clone(), out, Op::Scale(a, k), rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * x).collect();
        check_finite("square", &out)?;
        let rg = self.rg(a);
        Ok(self.push(self.node(a).shape.clone(), out, Op::Square(a), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = vec![self.value(a).iter().sum::<f64>()];
        check_finite("sum", &out)?;
        let rg = self.rg(a);
        Ok(self.push(vec![], out, Op::Sum(a), rg))
    }

    /// Element `index` of a vector, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = *self.value(a).get(index).ok_or_else(|| {
            Error::Shape(format!("index {index} outside width {}", self.width(a)))
        })?;
        let rg = self.rg(a);
        Ok(self.push(vec![], vec![v], Op::Pick(a, index), rg))
    }

    /// Largest element (first index on ties), as a scalar.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let vals = self.value(a);
        if vals.is_empty() {
            return Err(Error::Contract("max of an empty vector".into()));
        }
        let mut best = 0;
        for (i, v) in vals.iter().enumerate() {
            if *v > vals[best] {
                best = i;
            }
        }
        let v = vals[best];
        let rg = self.rg(a);
        Ok(self.push(vec![], vec![v], Op::Max(a, best), rg))
    }

    /// `log softmax(a / temperature)`.
    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let out = super::log_softmax_t(self.value(a), temperature)?;
        let rg = self.rg(a);
        Ok(self.push(
            self.node(a).shape.clone(),
            out,
            Op::LogSoftmax {
                input: a,
                temperature,
            },
            rg,
        ))
    }

    /// `Σ_i weights[i] · a[i]` for constant weights, as a scalar.
    pub fn dot_const(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.width(a) {
            return Err(Error::Shape(format!(
                "dot width {} vs {}",
                weights.len(),
                self.width(a)
            )));
        }
        let out = vec![self
            .value(a)
            .iter()
            .zip(weights)
            .map(|(x, w)| x * w)
            .sum::<f64>()];
        check_finite("dot", &out)?;
        let rg = self.rg(a);
        Ok(self.push(
            vec![],
            out,
            Op::Dot {
                input: a,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. A graph supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; rebuild the forward pass".into(),
            ));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        for g in self.grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if let Some(buf) = self.grad_buf(v) {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Take the op out to release the borrow on self.nodes while
        // gradients are written; it is put back afterwards.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Dense {
                input,
                weight,
                bias,
                act,
            } => {
                let y = &self.nodes[idx].value;
                let dz: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| gi * act.derivative_from_output(*yi))
                    .collect();
                self.accumulate(*bias, &dz);
                let x = std::mem::take(&mut self.nodes[input.0].value);
                let w = std::mem::take(&mut self.nodes[weight.0].value);
                let mut dx = self.rg(*input).then(|| vec![0.0; x.len()]);
                let mut dw = self.rg(*weight).then(|| vec![0.0; w.len()]);
                matvec_backward(&x, &w, &dz, dx.as_deref_mut(), dw.as_deref_mut());
                self.nodes[input.0].value = x;
                self.nodes[weight.0].value = w;
                if let Some(dx) = dx {
                    self.accumulate(*input, &dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(*weight, &dw);
                }
            }
            Op::Gru {
                input,
                hidden,
                params: p,
                cache,
            } => self.gru_backward(*input, *hidden, p, cache, g),
            Op::Aggregate {
                kind,
                items,
                argmax,
            } => match kind {
                Aggregation::Sum => {
                    for &item in items {
                        self.accumulate(item, g);
                    }
                }
                Aggregation::Mean => {
                    let k = 1.0 / items.len().max(1) as f64;
                    let scaled: Vec<f64> = g.iter().map(|v| v * k).collect();
                    for &item in items {
                        self.accumulate(item, &scaled);
                    }
                }
                Aggregation::Max => {
                    if !items.is_empty() {
                        for (k, &winner) in argmax.iter().enumerate() {
                            if let Some(buf) = self.grad_buf(items[winner]) {
                                buf[k] += g[k];
                            }
                        }
                    }
                }
            },
            Op::Concat(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = self.width(p);
                    self.accumulate(p, &g[at..at + w]);
                    at += w;
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    self.accumulate(p, g);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Offset(a) => self.accumulate(*a, g),
            Op::Scale(a, k) => {
                let d: Vec<f64> = g.iter().map(|v| v * k).collect();
                self.accumulate(*a, &d);
            }
            Op::Square(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].value)
                    .map(|(gi, x)| 2.0 * x * gi)
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.width(*a)];
                self.accumulate(*a, &d);
            }
            Op::Pick(a, i) | Op::Max(a, i) => {
                if let Some(buf) = self.grad_buf(*a) {
                    buf[*i] += g[0];
                }
            }
            Op::LogSoftmax { input, temperature } => {
                let y = &self.nodes[idx].value;
                let total: f64 = g.iter().sum();
                let d: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| (gi - yi.exp() * total) / temperature)
                    .collect();
                self.accumulate(*input, &d);
            }
            Op::Dot { input, weights } => {
                let d: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                self.accumulate(*input, &d);
            }
        }
        self.nodes[idx].op = op;
    }

    fn gru_backward(&mut self, input: Var, hidden: Var, p: &GruVars, c: &GruCache, g: &[f64]) {
        let n_h = g.len();
        let x = self.nodes[input.0].value.clone();
        let h = self.nodes[hidden.0].value.clone();
        let n_in = x.len();

        let mut dh = vec![0.0; n_h];
        let mut dx = vec![0.0; n_in];
        let mut da_z = vec![0.0; n_h];
        let mut da_n = vec![0.0; n_h];
        for k in 0..n_h {
            let dz = g[k] * (c.n[k] - h[k]);
            let dn = g[k] * c.z[k];
            dh[k] += g[k] * (1.0 - c.z[k]);
            da_n[k] = dn * (1.0 - c.n[k] * c.n[k]);
            da_z[k] = dz * c.z[k] * (1.0 - c.z[k]);
        }

        // candidate branch: a_n = x W_h + (r ⊙ h) U_h + b_h
        let mut d_rh = vec![0.0; n_h];
        let mut dw_h = vec![0.0; n_in * n_h];
        let mut du_h = vec![0.0; n_h * n_h];
        matvec_backward(
            &x,
            &self.nodes[p.w_h.0].value,
            &da_n,
            Some(&mut dx),
            Some(&mut dw_h),
        );
        matvec_backward(
            &c.rh,
            &self.nodes[p.u_h.0].value,
            &da_n,
            Some(&mut d_rh),
            Some(&mut du_h),
        );
        let mut da_r = vec![0.0; n_h];
        for k in 0..n_h {
            let dr = d_rh[k] * h[k];
            dh[k] += d_rh[k] * c.r[k];
            da_r[k] = dr * c.r[k] * (1.0 - c.r[k]);
        }

        let mut dw_z = vec![0.0; n_in * n_h];
        let mut du_z = vec![0.0; n_h * n_h];
        let mut dw_r = vec![0.0; n_in * n_h];
        let mut du_r = vec![0.0; n_h * n_h];
        matvec_backward(&x, &self.nodes[p.w_z.0].value, &da_z, Some(&mut dx), Some(&mut dw_z));
        matvec_backward(&h, &self.nodes[p.u_z.0].value, &da_z, Some(&mut dh), Some(&mut du_z));
        matvec_backward(&x, &self.nodes[p.w_r.0].value, &da_r, Some(&mut dx), Some(&mut dw_r));
        matvec_backward(&h, &self.nodes[p.u_r.0].value, &da_r, Some(&mut dh), Some(&mut du_r));

        self.accumulate(input, &dx);
        self.accumulate(hidden, &dh);
        self.accumulate(p.w_z, &dw_z);
        self.accumulate(p.w_r, &dw_r);
        self.accumulate(p.w_h, &dw_h);
        self.accumulate(p.u_z, &du_z);
        self.accumulate(p.u_r, &du_r);
        self.accumulate(p.u_h, &du_h);
        self.accumulate(p.b_z, &da_z);
        self.accumulate(p.b_r, &da_r);
        self.accumulate(p.b_h, &da_n);
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `v`, zeros when nothing reached it.
    pub fn grad_or_zero(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; self.width(v)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of `f` w.r.t. every element of `x`.
    fn numeric_grad(x: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dense_identity_and_zero() {
        let mut g = Graph::new();
        let x = g.vector(vec![0.3, -2.0, 5.0]);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.param(&Tensor::matrix(3, 3, eye).unwrap());
        let b = g.param(&Tensor::zeros(vec![3]));
        let y = g.dense(x, w, b, Activation::Identity).unwrap();
        assert_eq!(g.value(y), &[0.3, -2.0, 5.0]);
        let w0 = g.param(&Tensor::zeros(vec![3, 2]));
        let b0 = g.param(&Tensor::zeros(vec![2]));
        let y0 = g.dense(x, w0, b0, Activation::Relu).unwrap();
        assert_eq!(g.value(y0), &[0.0, 0.0]);
    }

    #[test]
    fn dense_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.vector(vec![1.0, 2.0]);
        let w = g.param(&Tensor::zeros(vec![3, 2]));
        let b = g.param(&Tensor::zeros(vec![2]));
        assert!(matches!(g.dense(x, w, b, Activation::Relu), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = rand_vec(&mut rng, 4);
            let w0 = rand_vec(&mut rng, 12);
            let b0 = rand_vec(&mut rng, 3);
            let c = rand_vec(&mut rng, 3);
            for act in [Activation::Tanh, Activation::Sigmoid, Activation::Identity] {
                let f = |x: &[f64], w: &[f64], b: &[f64]| {
                    let mut g = Graph::new();
                    let xv = g.vector(x.to_vec());
                    let wv = g.param(&Tensor::matrix(4, 3, w.to_vec()).unwrap());
                    let bv = g.param(&Tensor::vector(b.to_vec()));
                    let y = g.dense(xv, wv, bv, act).unwrap();
                    let l = g.dot_const(y, &c).unwrap();
                    g.scalar(l).unwrap()
                };
                let mut g = Graph::new();
                let xv = g.param(&Tensor::vector(x0.clone()));
                let wv = g.param(&Tensor::matrix(4, 3, w0.clone()).unwrap());
                let bv = g.param(&Tensor::vector(b0.clone()));
                let y = g.dense(xv, wv, bv, act).unwrap();
                let l = g.dot_const(y, &c).unwrap();
                g.backward(l).unwrap();
                let checks = [
                    (g.grad_or_zero(xv), numeric_grad(&x0, &|x| f(x, &w0, &b0))),
                    (g.grad_or_zero(wv), numeric_grad(&w0, &|w| f(&x0, w, &b0))),
                    (g.grad_or_zero(bv), numeric_grad(&b0, &|b| f(&x0, &w0, b))),
                ];
                for (analytic, numeric) in checks {
                    for (a, n) in analytic.iter().zip(&numeric) {
                        assert!(rel_err(*a, *n) < 1e-4, "seed {seed} {act:?}: {a} vs {n}");
                    }
                }
            }
        }
    }

    #[test]
    fn gru_zero_fixed_point_and_determinism() {
        let n_in = 3;
        let n_h = 4;
        let build = |g: &mut Graph, x: &[f64], h: &[f64], fill: f64| {
            let xv = g.vector(x.to_vec());
            let hv = g.vector(h.to_vec());
            let w = |g: &mut Graph, r, c| g.param(&Tensor::new(vec![r, c], vec![fill; r * c]).unwrap());
            let p = GruVars {
                w_z: w(g, n_in, n_h),
                w_r: w(g, n_in, n_h),
                w_h: w(g, n_in, n_h),
                u_z: w(g, n_h, n_h),
                u_r: w(g, n_h, n_h),
                u_h: w(g, n_h, n_h),
                b_z: g.param(&Tensor::vector(vec![fill; n_h])),
                b_r: g.param(&Tensor::vector(vec![fill; n_h])),
                b_h: g.param(&Tensor::vector(vec![fill; n_h])),
            };
            g.gru_step(xv, hv, p).unwrap()
        };
        let mut g = Graph::new();
        let out = build(&mut g, &[0.5, -1.0, 2.0], &[0.0; 4], 0.0);
        assert_eq!(g.value(out), &[0.0; 4]);

        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let a = build(&mut g1, &[0.5, -1.0, 2.0], &[0.1, 0.2, -0.3, 0.4], 0.07);
        let b = build(&mut g2, &[0.5, -1.0, 2.0], &[0.1, 0.2, -0.3, 0.4], 0.07);
        assert_eq!(g1.value(a), g2.value(b));
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let n_in = 3;
        let n_h = 4;
        let shapes = |i: usize| -> Vec<usize> {
            match i {
                0 => vec![n_in],
                1 => vec![n_h],
                2..=4 => vec![n_in, n_h],
                5..=7 => vec![n_h, n_h],
                _ => vec![n_h],
            }
        };
        let eval = |vals: &[Vec<f64>], c: &[f64]| -> (Graph, Vec<Var>, Var) {
            let mut g = Graph::new();
            let vars: Vec<Var> = (0..11)
                .map(|i| g.param(&Tensor::new(shapes(i), vals[i].clone()).unwrap()))
                .collect();
            let p = GruVars {
                w_z: vars[2],
                w_r: vars[3],
                w_h: vars[4],
                u_z: vars[5],
                u_r: vars[6],
                u_h: vars[7],
                b_z: vars[8],
                b_r: vars[9],
                b_h: vars[10],
            };
            let out = g.gru_step(vars[0], vars[1], p).unwrap();
            let l = g.dot_const(out, c).unwrap();
            (g, vars, l)
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let vals: Vec<Vec<f64>> = (0..11)
                .map(|i| rand_vec(&mut rng, shapes(i).iter().product()))
                .collect();
            let c = rand_vec(&mut rng, n_h);
            let (mut g, vars, l) = eval(&vals, &c);
            g.backward(l).unwrap();
            for i in 0..11 {
                let analytic = g.grad_or_zero(vars[i]);
                let numeric = numeric_grad(&vals[i], &|v| {
                    let mut vv = vals.clone();
                    vv[i] = v.to_vec();
                    let (g, _, l) = eval(&vv, &c);
                    g.scalar(l).unwrap()
                });
                for (a, n) in analytic.iter().zip(&numeric) {
                    assert!(rel_err(*a, *n) < 1e-4, "seed {seed} param {i}: {a} vs {n}");
                }
            }
        }
    }

    #[test]
    fn aggregate_gradients_route_correctly() {
        let items = [vec![1.0, 5.0, -2.0], vec![3.0, 4.0, -1.0], vec![0.5, 6.0, -3.0]];
        for kind in [Aggregation::Sum, Aggregation::Mean, Aggregation::Max] {
            let mut g = Graph::new();
            let vars: Vec<Var> = items.iter().map(|v| g.param(&Tensor::vector(v.clone()))).collect();
            let agg = g.aggregate(kind, &vars, 3).unwrap();
            let l = g.dot_const(agg, &[1.0, 2.0, 3.0]).unwrap();
            g.backward(l).unwrap();
            for (i, v) in vars.iter().enumerate() {
                let numeric = numeric_grad(&items[i], &|x| {
                    let mut its = items.to_vec();
                    its[i] = x.to_vec();
                    let a = crate::tensor::aggregate(kind, &its, 3).unwrap();
                    a[0] + 2.0 * a[1] + 3.0 * a[2]
                });
                let analytic = g.grad_or_zero(*v);
                for (a, n) in analytic.iter().zip(&numeric) {
                    assert!((a - n).abs() < 1e-6, "{kind:?} item {i}: {a} vs {n}");
                }
            }
            if kind == Aggregation::Sum {
                assert!(vars.iter().all(|v| g.grad_or_zero(*v) == vec![1.0, 2.0, 3.0]));
            }
            if kind == Aggregation::Max {
                assert_eq!(g.grad_or_zero(vars[0]), vec![0.0, 0.0, 0.0]);
                assert_eq!(g.grad_or_zero(vars[1]), vec![1.0, 0.0, 3.0]);
                assert_eq!(g.grad_or_zero(vars[2]), vec![0.0, 2.0, 0.0]);
            }
        }
    }

    #[test]
    fn log_softmax_gradient() {
        let x0 = vec![0.3, -1.2, 2.0, 0.0];
        let wts = vec![0.1, 0.5, -0.7, 0.2];
        for t in [0.5, 1.0, 3.0] {
            let mut g = Graph::new();
            let x = g.param(&Tensor::vector(x0.clone()));
            let y = g.log_softmax(x, t).unwrap();
            let l = g.dot_const(y, &wts).unwrap();
            g.backward(l).unwrap();
            let numeric = numeric_grad(&x0, &|x| {
                let y = crate::tensor::log_softmax_t(x, t).unwrap();
                y.iter().zip(&wts).map(|(a, b)| a * b).sum()
            });
            for (a, n) in g.grad_or_zero(x).iter().zip(&numeric) {
                assert!(rel_err(*a, *n) < 1e-4);
            }
        }
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));

        let mut g = Graph::new();
        let p = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let sq = g.square(p).unwrap();
        assert!(matches!(g.backward(sq), Err(Error::Contract(_))));

        let mut g = Graph::new();
        let p = g.param(&Tensor::vector(vec![4.0, -2.0]));
        let sq = g.square(p).unwrap();
        let s = g.sum(sq).unwrap();
        let z = g.scale(s, 0.0).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad_or_zero(p), vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_values_trip_an_error() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::vector(vec![1e200]));
        assert!(matches!(g.square(p), Err(Error::Numeric(_))));
    }
}
