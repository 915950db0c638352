//! Named parameter storage, initialisation and the Adam optimizer.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Flat collection of trainable matrices with gradient buffers.
///
/// Models register their matrices once at construction; registration order
/// is deterministic so a checkpoint can be restored by rebuilding the model
/// and overwriting values by name.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    grads: Vec<Array2<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.grads.push(Array2::zeros(value.raw_dim()));
        self.values.push(value);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array2<T> {
        &self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Array2<T>) {
        self.grads[id.0] += grad;
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn to_snapshot(&self) -> Vec<TensorRecord> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| TensorRecord {
                name: name.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
                data: v.iter().map(|x| x.as_f64()).collect(),
            })
            .collect()
    }

    /// Overwrites every registered parameter from `records`. Every name must
    /// be present with a matching shape.
    pub fn load_snapshot(&mut self, records: &[TensorRecord]) -> Result<()> {
        if records.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                records.len()
            )));
        }
        for rec in records {
            let id = self
                .find(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", rec.name)))?;
            let slot = &mut self.values[id.0];
            if slot.dim() != (rec.rows, rec.cols) || rec.data.len() != rec.rows * rec.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {}x{}, expected {:?}",
                    rec.name,
                    rec.rows,
                    rec.cols,
                    slot.dim()
                )));
            }
            for (dst, &src) in slot.iter_mut().zip(&rec.data) {
                *dst = T::of(src);
            }
        }
        Ok(())
    }
}

/// Serialized form of one parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Glorot-uniform initialisation.
pub fn xavier<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rows, cols, bound, rng)
}

pub fn uniform<T: Scalar, R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        T::of(rng.random_range(-bound..=bound))
    })
}

/// Adam with a fixed learning rate and no warmup or weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    step: i32,
    first: Vec<Array2<T>>,
    second: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate: T::of(learning_rate),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.first.len() != store.len() {
            self.first = store.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let one = T::one();
        let bias1 = one - self.beta1.powi(self.step);
        let bias2 = one - self.beta2.powi(self.step);
        for i in 0..store.values.len() {
            let grad = &store.grads[i];
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let value = &mut store.values[i];
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (one - self.beta1) * g;
                    *v = self.beta2 * *v + (one - self.beta2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                });
        }
        store.zero_grad();
    }
}
