//! Named parameter storage and the AdamW update.

use super::{TapeError, Tape, Var};
use crate::matrix::Matrix;

/// Handle to one named parameter in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in registration order; also the index into [`ParamSet::bind`]
    /// output.
    pub fn index(&self) -> usize {
        self.0
    }
}

struct Entry {
    name: String,
    value: Matrix,
    grad: Option<Matrix>,
    m: Matrix,
    v: Matrix,
}

/// All trainable parameters of a model, in registration order.
///
/// A training step binds every entry onto a fresh tape, runs
/// forward/backward, pulls the gradients back, and applies [`adamw_step`].
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let (r, c) = value.shape();
        self.entries.push(Entry {
            name: name.into(),
            value,
            grad: None,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Matrix) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = value;
    }

    pub fn grad(&self, id: ParamId) -> Option<&Matrix> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Registers every parameter as a differentiable leaf on `tape`,
    /// returning vars aligned with registration order.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.value.clone()))
            .collect()
    }

    /// Pulls leaf gradients off a tape after `backward`, accumulating into
    /// any gradient already held (so several tapes can contribute to one
    /// step).
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &[Var]) -> Result<(), TapeError> {
        assert_eq!(bound.len(), self.entries.len());
        for (entry, &var) in self.entries.iter_mut().zip(bound) {
            match tape.grad(var) {
                Some(g) => match &mut entry.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => entry.grad = Some(g),
                },
                None => return Err(TapeError::MissingGrad(entry.name.clone())),
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Snapshot of (name, value) pairs, e.g. for checkpointing.
    pub fn snapshot(&self) -> Vec<(String, Matrix)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Restores values from a snapshot; names and shapes must match the
    /// registered entries exactly.
    pub fn restore(&mut self, snapshot: &[(String, Matrix)]) -> Result<(), TapeError> {
        for e in &mut self.entries {
            let found = snapshot
                .iter()
                .find(|(n, _)| *n == e.name)
                .ok_or_else(|| TapeError::MissingGrad(e.name.clone()))?;
            assert_eq!(e.value.shape(), found.1.shape(), "shape mismatch in restore");
            e.value = found.1.clone();
        }
        Ok(())
    }
}

/// AdamW hyperparameters. The moment constants are the community defaults;
/// weight decay is decoupled from the gradient moments.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl ParamSet {
    /// One decoupled-weight-decay Adam step over every parameter.
    /// Requires a gradient on each entry; clears all gradients afterwards.
    pub fn adamw_step(&mut self, cfg: &AdamWConfig) -> Result<(), TapeError> {
        if let Some(e) = self.entries.iter().find(|e| e.grad.is_none()) {
            return Err(TapeError::MissingGrad(e.name.clone()));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for e in &mut self.entries {
            let g = e.grad.take().unwrap();
            for i in 0..g.len() {
                let gi = g.as_slice()[i];
                let m = &mut e.m.as_mut_slice()[i];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                let v = &mut e.v.as_mut_slice()[i];
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let p = &mut e.value.as_mut_slice()[i];
                *p -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.epsilon))
                    + cfg.learning_rate * cfg.weight_decay * *p;
            }
        }
        Ok(())
    }

    /// Resets step counter and moments; used when a fresh optimization run
    /// reuses the same parameter storage.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for e in &mut self.entries {
            let (r, c) = e.value.shape();
            e.m = Matrix::zeros(r, c);
            e.v = Matrix::zeros(r, c);
            e.grad = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_grad(set: &mut ParamSet, id: ParamId, g: Matrix) {
        // go through a tape so the public surface stays honest
        let tape = Tape::new();
        let bound = set.bind(&tape);
        let leaf = bound[id.0];
        let gv = tape.input(g);
        let prod = tape.hadamard(leaf, gv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        set.absorb_grads(&tape, &bound).unwrap();
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut set = ParamSet::new();
        let id = set.add("w", Matrix::from_vec(1, 3, vec![1.0, -2.0, 3.0]));
        set_grad(&mut set, id, Matrix::zeros(1, 3));
        let before = set.value(id).clone();
        set.adamw_step(&AdamWConfig::default()).unwrap();
        assert_eq!(set.value(id), &before);
    }

    #[test]
    fn decoupled_decay_shrinks_by_closed_form() {
        let mut set = ParamSet::new();
        let id = set.add("w", Matrix::from_vec(1, 2, vec![2.0, -4.0]));
        set_grad(&mut set, id, Matrix::zeros(1, 2));
        let cfg = AdamWConfig {
            learning_rate: 0.05,
            weight_decay: 0.1,
            ..Default::default()
        };
        set.adamw_step(&cfg).unwrap();
        let factor = 1.0 - 0.05 * 0.1;
        assert!((set.value(id).get(0, 0) - 2.0 * factor).abs() < 1e-12);
        assert!((set.value(id).get(0, 1) + 4.0 * factor).abs() < 1e-12);
    }

    #[test]
    fn descends_on_quadratic() {
        let mut set = ParamSet::new();
        let id = set.add("x", Matrix::scalar(1.0));
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        for _ in 0..5 {
            let tape = Tape::new();
            let bound = set.bind(&tape);
            let loss = tape.square(bound[0]);
            tape.backward(loss).unwrap();
            set.absorb_grads(&tape, &bound).unwrap();
            set.adamw_step(&cfg).unwrap();
        }
        assert!(set.value(id).scalar_value().abs() < 1.0);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut set = ParamSet::new();
        set.add("w", Matrix::scalar(1.0));
        assert!(matches!(
            set.adamw_step(&AdamWConfig::default()),
            Err(TapeError::MissingGrad(_))
        ));
    }
}
