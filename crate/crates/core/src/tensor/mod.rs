//! Dense 64-bit math with a tape for reverse-mode differentiation.
//!
//! Values are plain row-major `f64` buffers. Vectors are 1-D, weights are
//! 2-D `[in, out]` and applied as `input · weight`. Every op checks its output
//! for NaN/Inf and fails with [`Error::Numeric`] instead of propagating it.

mod graph;
mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use graph::{Activation, Graph, GruVars, Var};
pub(crate) use graph::{matvec_into, sigmoid};
pub use optim::{OptimizerKind, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_finite(op: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op} produced a non-finite value")))
    }
}

/// Set reduction over equal-width vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
    Max,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
        })
    }
}

/// Element-wise reduction; returns the result and, for `Max`, the index of the
/// winning item per element (first index on ties). An empty set reduces to
/// zeros of `width`.
pub(crate) fn aggregate_with_argmax<'a, I>(
    kind: Aggregation,
    items: I,
    width: usize,
) -> Result<(Vec<f64>, Vec<usize>)>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut out = vec![0.0; width];
    let mut argmax = if kind == Aggregation::Max {
        vec![0; width]
    } else {
        Vec::new()
    };
    let mut count = 0usize;
    for (i, item) in items.into_iter().enumerate() {
        if item.len() != width {
            return Err(Error::Shape(format!(
                "aggregate item {i} has width {}, expected {width}",
                item.len()
            )));
        }
        match kind {
            Aggregation::Sum | Aggregation::Mean => {
                for (o, v) in out.iter_mut().zip(item) {
                    *o += v;
                }
            }
            Aggregation::Max => {
                if i == 0 {
                    out.copy_from_slice(item);
                } else {
                    for (k, v) in item.iter().enumerate() {
                        if *v > out[k] {
                            out[k] = *v;
                            argmax[k] = i;
                        }
                    }
                }
            }
        }
        count += 1;
    }
    if kind == Aggregation::Mean && count > 0 {
        let inv = count as f64;
        for o in out.iter_mut() {
            *o /= inv;
        }
    }
    check_finite("aggregate", &out)?;
    Ok((out, argmax))
}

/// Element-wise SUM / MEAN / MAX of a set of equal-width vectors.
pub fn aggregate(kind: Aggregation, items: &[Vec<f64>], width: usize) -> Result<Vec<f64>> {
    aggregate_with_argmax(kind, items.iter().map(|v| v.as_slice()), width).map(|(v, _)| v)
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )))
    }
}

/// `softmax(logits / temperature)` with a max shift.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::Contract("softmax of an empty vector".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    let out: Vec<f64> = exps.into_iter().map(|e| e / total).collect();
    check_finite("softmax", &out)?;
    Ok(out)
}

/// `log(softmax(logits / temperature))`.
pub fn log_softmax_t(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::Contract("softmax of an empty vector".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|&x| (x - max) / temperature).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    let out: Vec<f64> = shifted.into_iter().map(|s| s - lse).collect();
    check_finite("log_softmax", &out)?;
    Ok(out)
}

/// Scales all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in g {
            if !v.is_finite() {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn aggregate_definitions() {
        let items = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(aggregate(Aggregation::Sum, &items, 2).unwrap(), vec![4.0, 6.0]);
        assert_eq!(aggregate(Aggregation::Mean, &items, 2).unwrap(), vec![2.0, 3.0]);
        assert_eq!(aggregate(Aggregation::Max, &items, 2).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn aggregate_singleton_and_empty() {
        let one = vec![vec![-1.5, 0.25, 7.0]];
        for kind in [Aggregation::Sum, Aggregation::Mean, Aggregation::Max] {
            assert_eq!(aggregate(kind, &one, 3).unwrap(), one[0]);
            assert_eq!(aggregate(kind, &[], 3).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn aggregate_rejects_ragged_items() {
        let items = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(matches!(
            aggregate(Aggregation::Sum, &items, 2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn max_ties_go_to_first_item() {
        let items = [vec![1.0, 5.0], vec![1.0, 2.0]];
        let (_, arg) =
            aggregate_with_argmax(Aggregation::Max, items.iter().map(|v| v.as_slice()), 2).unwrap();
        assert_eq!(arg, vec![0, 0]);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_t(&[3.0, 3.0, 3.0, 3.0], 0.3).unwrap();
        assert!(u.iter().all(|p| (p - 0.25).abs() < 1e-15));
        let p = softmax_t(&[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let hot = softmax_t(&[1.0, 0.0], 1e6).unwrap();
        assert!((hot[0] - 0.5).abs() < 1e-5);
        assert!(matches!(softmax_t(&[1.0], 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_t(&[1.0], -2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![vec![3.0, 4.0]];
        assert_eq!(clip_grad_norm(&mut g, 10.0).unwrap(), 5.0);
        assert_eq!(g, vec![vec![3.0, 4.0]]);
        let mut g = vec![vec![30.0, 40.0]];
        clip_grad_norm(&mut g, 10.0).unwrap();
        assert!((g[0][0] - 6.0).abs() < 1e-12 && (g[0][1] - 8.0).abs() < 1e-12);
        let mut g = vec![vec![f64::NAN]];
        assert!(matches!(clip_grad_norm(&mut g, 10.0), Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(
            items in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 0..8),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = items.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            for kind in [Aggregation::Sum, Aggregation::Mean] {
                let a = aggregate(kind, &items, 4).unwrap();
                let b = aggregate(kind, &shuffled, 4).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() <= 1e-9);
                }
            }
            prop_assert_eq!(
                aggregate(Aggregation::Max, &items, 4).unwrap(),
                aggregate(Aggregation::Max, &shuffled, 4).unwrap()
            );
        }

        #[test]
        fn softmax_normalises_and_ignores_shifts(
            logits in prop::collection::vec(-50.0f64..50.0, 1..25),
            shift in -100.0f64..100.0,
            temperature in 0.05f64..20.0,
        ) {
            let p = softmax_t(&logits, temperature).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let q = softmax_t(&shifted, temperature).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn clipped_norm_is_bounded(g in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 1..6), 1..5)) {
            let mut g = g;
            clip_grad_norm(&mut g, 10.0).unwrap();
            let n: f64 = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n <= 10.0 + 1e-9);
        }
    }
}
