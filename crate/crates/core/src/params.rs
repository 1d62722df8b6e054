//! Parameter binding and optimization.
//!
//! Model parameters live in plain host structs; every forward pass registers
//! them on the tape as leaves through a [`Binder`], which remembers the
//! name-to-node mapping so gradients can be pulled back out after backward
//! and fed to the optimizer keyed by name.

use std::collections::HashMap;

use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Records the tape leaf of every named parameter bound in one pass.
#[derive(Default)]
pub struct Binder {
    pub entries: Vec<(String, TensorId)>,
    overrides: Vec<(String, TensorId)>,
}

impl Binder {
    pub fn new() -> Self {
        Binder::default()
    }

    /// Substitute an existing tape node for the named parameter instead of
    /// binding a fresh leaf; gradient probes route their test point this way.
    pub fn with_override(name: &str, id: TensorId) -> Self {
        Binder {
            entries: Vec::new(),
            overrides: vec![(name.to_string(), id)],
        }
    }

    pub fn leaf(&mut self, tape: &mut Tape, name: &str, t: &Tensor) -> TensorId {
        if let Some((_, id)) = self.overrides.iter().find(|(n, _)| n == name) {
            let id = *id;
            self.entries.push((name.to_string(), id));
            return id;
        }
        let mut v = t.clone();
        v.requires_grad = true;
        let id = tape.leaf(&v);
        self.entries.push((name.to_string(), id));
        id
    }

    /// Collect accumulated gradients per parameter name after a backward
    /// pass. Parameters the loss never reached get zeros.
    pub fn grads(&self, tape: &Tape) -> HashMap<String, Vec<f64>> {
        self.entries
            .iter()
            .map(|(name, id)| {
                let g = tape
                    .grad(*id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(*id).numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

/// Adaptive-moment gradient descent with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Advance the shared step counter; call once per optimization step
    /// before updating parameters.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, value: &mut Tensor, grad: &[f64]) {
        assert_eq!(value.numel(), grad.len(), "{name}: grad length mismatch");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, &g), (mi, vi)) in value
            .data
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
