use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

use super::{NormSlot, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages recorded.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub slot: NormSlot,
    pub stats: BatchStats,
}

/// One forward pass over a [`ParamStore`].
///
/// Parameters are placed on the tape the first time a layer asks for them,
/// so a weight shared between encoder and decoder is a single node and its
/// gradient sums both uses. Frozen parameters become constants.
pub struct Forward<'a> {
    tape: &'a mut Tape,
    params: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: Vec<bool>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            vars: vec![None; params.len()],
            trainable: vec![true; params.len()],
            params,
            mode,
            bn_updates: Vec::new(),
        }
    }

    /// Every parameter treated as a constant.
    pub fn frozen(mut self) -> Self {
        self.trainable.iter_mut().for_each(|t| *t = false);
        self
    }

    /// Only `ids` receive gradients.
    pub fn only(mut self, ids: &[ParamId]) -> Self {
        self.trainable.iter_mut().for_each(|t| *t = false);
        for id in ids {
            self.trainable[id.index()] = true;
        }
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tape(&mut self) -> &mut Tape {
        self.tape
    }

    pub fn tape_ref(&self) -> &Tape {
        self.tape
    }

    /// Data enters as a constant.
    pub fn input(&mut self, x: Tensor) -> Result<Var> {
        self.tape.constant(x)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.index()] {
            return Ok(v);
        }
        let value = self.params.get(id).clone();
        let v = if self.trainable[id.index()] {
            self.tape.leaf(value)?
        } else {
            self.tape.constant(value)?
        };
        self.vars[id.index()] = Some(v);
        Ok(v)
    }

    /// Use `var` wherever `id` is read; for differentiating with respect to a
    /// single parameter from outside.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.vars[id.index()] = Some(var);
    }

    pub(super) fn record_bn(&mut self, slot: NormSlot, stats: BatchStats) {
        self.bn_updates.push(BnUpdate { slot, stats });
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradients of `loss` for every trainable parameter that took part in
    /// the pass. Parameters that were never read are omitted.
    pub fn backward(&self, loss: Var) -> Result<Vec<(ParamId, Tensor)>> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (i, v) in self.vars.iter().enumerate() {
            let Some(v) = v else { continue };
            if !self.trainable[i] || !self.tape.requires_grad(*v) {
                continue;
            }
            let id = ParamId(i);
            let g = grads
                .take(*v)
                .unwrap_or_else(|| Tensor::zeros(self.params.get(id).rows(), self.params.get(id).cols()));
            out.push((id, g));
        }
        Ok(out)
    }
}
