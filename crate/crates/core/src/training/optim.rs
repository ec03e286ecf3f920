use crate::error::{shape_err, Result};
use crate::model::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::OptimizerKind;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Adam or plain SGD with one state slot per parameter. A tied weight is a
/// single parameter, so it gets one slot and one update per step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        Self {
            kind,
            lr,
            slots: vec![Slot::default(); params.len()],
        }
    }

    /// Number of updates parameter `id` has received.
    pub fn steps(&self, id: ParamId) -> u64 {
        self.slots[id.index()].steps
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if g.shape() != params.get(*id).shape() {
                return Err(shape_err(format!(
                    "gradient for `{}` is {:?}, parameter is {:?}",
                    params.name(*id),
                    g.shape(),
                    params.get(*id).shape()
                )));
            }
        }
        for (id, g) in grads {
            let p = params.get_mut(*id).data_mut();
            let slot = &mut self.slots[id.index()];
            slot.steps += 1;
            match self.kind {
                OptimizerKind::Sgd => p.iter_mut().zip(g.data()).for_each(|(w, g)| *w -= self.lr * g),
                OptimizerKind::Adam => {
                    if slot.m.is_empty() {
                        slot.m = vec![0.0; p.len()];
                        slot.v = vec![0.0; p.len()];
                    }
                    let t = slot.steps as i32;
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for (((w, &g), m), v) in p.iter_mut().zip(g.data()).zip(&mut slot.m).zip(&mut slot.v) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
