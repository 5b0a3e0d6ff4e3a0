//! Decoupled-weight-decay Adam with per-tensor moment state.
//!
//! Weight decay is applied directly to the pre-update parameter value
//! rather than folded into the gradient, so the moment estimates see only
//! the loss gradient. Tensors whose gradient contains a non-finite entry
//! are skipped for that call (their step counters do not advance) and
//! reported by name.

use crate::network::{ParamId, Params};

/// What one optimizer call did: how many tensors were updated and which
/// were skipped because their gradients were not finite.
#[derive(Debug, Clone, Default)]
pub struct StepOutcome {
    pub applied: usize,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with decoupled weight decay. Moment state is keyed by parameter
/// handle, so one instance must stay paired with one parameter store.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Optional global-norm gradient clip applied before the update.
    pub clip_norm: Option<f64>,
    state: Vec<Option<Slot>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            clip_norm: None,
            state: Vec::new(),
        }
    }

    /// Applies one update from per-tensor gradients. Gradients are first
    /// optionally clipped by global norm; tensors with non-finite
    /// gradients are then skipped with their names recorded.
    pub fn step(&mut self, params: &mut Params, mut grads: Vec<(ParamId, Vec<f64>)>) -> StepOutcome {
        if let Some(limit) = self.clip_norm {
            clip_gradients(&mut grads, limit);
        }
        let mut outcome = StepOutcome::default();
        for (id, g) in &grads {
            if !g.iter().all(|x| x.is_finite()) {
                outcome.skipped.push(params.name(*id).to_string());
                continue;
            }
            let idx = id.index();
            if self.state.len() <= idx {
                self.state.resize_with(idx + 1, || None);
            }
            let slot = self.state[idx].get_or_insert_with(|| Slot {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            assert_eq!(slot.m.len(), g.len(), "gradient size changed between steps");
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            let theta = params.value_mut(*id);
            for (i, p) in theta.iter_mut().enumerate() {
                let gi = g[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * gi;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                let prev = *p;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                *p -= self.learning_rate * self.weight_decay * prev;
            }
            outcome.applied += 1;
        }
        outcome
    }
}

/// Scales all gradients so their joint global norm is at most `max_norm`.
/// Non-finite entries are excluded from the norm (they are skipped by the
/// update anyway). Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, g) in grads.iter() {
        for &x in g {
            if x.is_finite() {
                sq += x * x;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for x in g {
                *x *= scale;
            }
        }
    }
    norm
}
