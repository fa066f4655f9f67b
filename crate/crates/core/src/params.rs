//! Named trainable tensors with paired gradient accumulators, the SGD
//! update, parameter initialization and dropout masks.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Uniform range for fresh parameters, symmetric around zero so the
/// tanh/sigmoid gates start in their linear regime.
pub const INIT_RANGE: f64 = 0.08;

pub type ParamId = usize;

struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Trainable tensors keyed by unique name. Gradients always have the
/// value's shape and iteration follows insertion order, so gradient
/// accumulation and updates are deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let id = self.entries.len();
        let grad = vec![0.0; value.numel()];
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id].grad
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.entries.len()
    }

    pub fn add_grad(&mut self, id: ParamId, g: &[f64]) -> Result<()> {
        let e = &mut self.entries[id];
        if g.len() != e.grad.len() {
            return Err(Error::Shape {
                op: "add_grad",
                msg: format!(
                    "gradient for {:?} has {} values, expected {}",
                    e.name,
                    g.len(),
                    e.grad.len()
                ),
            });
        }
        for (dst, src) in e.grad.iter_mut().zip(g) {
            *dst += src;
        }
        Ok(())
    }

    /// Accumulate into one row of a matrix parameter.
    pub fn add_row_grad(&mut self, id: ParamId, row: usize, g: &[f64]) -> Result<()> {
        let e = &mut self.entries[id];
        if !e.value.is_matrix() || row >= e.value.rows() || g.len() != e.value.cols() {
            return Err(Error::Shape {
                op: "add_row_grad",
                msg: format!("row {} of {:?} does not accept {} values", row, e.name, g.len()),
            });
        }
        let c = e.value.cols();
        for (dst, src) in e.grad[row * c..(row + 1) * c].iter_mut().zip(g) {
            *dst += src;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// One SGD update: `value -= learning_rate * grad` for every entry,
    /// then all gradients are zeroed. A non-finite gradient or updated
    /// value aborts with the parameter name.
    pub fn sgd_step(&mut self, learning_rate: f64) -> Result<()> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        for e in &mut self.entries {
            for (v, g) in e.value.data_mut().iter_mut().zip(&e.grad) {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {:?}", e.name)));
                }
                *v -= learning_rate * g;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("updated value of parameter {:?}", e.name)));
                }
            }
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }
}

/// Fresh parameter tensor, uniform on [-INIT_RANGE, INIT_RANGE].
pub fn init_vector(n: usize, rng: &mut Rng) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.uniform(-INIT_RANGE, INIT_RANGE)).collect())
}

pub fn init_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.uniform(-INIT_RANGE, INIT_RANGE))
        .collect();
    Tensor::matrix(rows, cols, data).expect("consistent by construction")
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, else
/// `1/(1-rate)`, so the mask has unit expectation.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok(Tensor::vector(
        (0..len)
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect(),
    ))
}

/// Evaluation-time mask: all ones regardless of the configured rate.
pub fn dropout_mask_eval(len: usize) -> Tensor {
    Tensor::vector(vec![1.0; len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_arithmetic() {
        // value 1.0, gradient 0.5, lr 0.2 -> 0.9
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(1.0)).unwrap();
        store.add_grad(id, &[0.5]).unwrap();
        store.sgd_step(0.2).unwrap();
        assert_eq!(store.value(id).data()[0], 1.0 - 0.2 * 0.5);
        // gradients are zeroed afterwards
        assert_eq!(store.grad(id), &[0.0]);
    }

    #[test]
    fn sgd_zero_gradient_keeps_value() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![1.5, -2.0])).unwrap();
        store.sgd_step(0.7).unwrap();
        assert_eq!(store.value(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut store = ParamStore::new();
        let id = store.insert("bad", Tensor::scalar(0.0)).unwrap();
        store.add_grad(id, &[f64::NAN]).unwrap();
        let err = store.sgd_step(0.1).unwrap_err();
        assert!(err.to_string().contains("bad"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        assert!(store.insert("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn dropout_rate_zero_is_all_ones() {
        let mut rng = Rng::new(1);
        let m = dropout_mask(10, 0.0, &mut rng).unwrap();
        assert!(m.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn dropout_zero_fraction_matches_rate() {
        let mut rng = Rng::new(42);
        let m = dropout_mask(100_000, 0.5, &mut rng).unwrap();
        let zeros = m.data().iter().filter(|&&x| x == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.5).abs() < 0.01, "zero fraction {zeros}");
        // surviving entries carry the inverse keep probability
        assert!(m.data().iter().all(|&x| x == 0.0 || x == 2.0));
    }

    #[test]
    fn dropout_eval_mask_is_ones() {
        let m = dropout_mask_eval(7);
        assert!(m.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn dropout_rate_one_rejected() {
        let mut rng = Rng::new(1);
        assert!(dropout_mask(4, 1.0, &mut rng).is_err());
        assert!(dropout_mask(4, -0.1, &mut rng).is_err());
    }

    #[test]
    fn init_within_range() {
        let mut rng = Rng::new(9);
        let t = init_matrix(13, 7, &mut rng);
        assert!(t.data().iter().all(|x| x.abs() <= INIT_RANGE));
    }
}
