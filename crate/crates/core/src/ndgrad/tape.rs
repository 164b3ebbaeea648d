use std::collections::HashMap;

use super::ops::{adjoint, Op};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) struct Record<T> {
    pub op: Op<T>,
    pub inputs: Vec<Tensor<T>>,
    pub output: Tensor<T>,
}

/// Ordered record of executed differentiable operations.
///
/// One tape per forward pass; [`Tape::backward`] consumes it. An inference
/// tape skips recording entirely and cannot be differentiated.
pub struct Tape<T> {
    pub(crate) records: Vec<Record<T>>,
    recording: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Recording tape for a training step.
    pub fn new() -> Self {
        Tape {
            records: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// Non-recording tape for forward-only evaluation.
    pub fn inference() -> Self {
        Tape {
            records: Vec::new(),
            recording: false,
            consumed: false,
        }
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    pub(crate) fn push(&mut self, op: Op<T>, inputs: Vec<Tensor<T>>, output: &Tensor<T>) {
        if self.recording && output.requires_grad() {
            self.records.push(Record {
                op,
                inputs,
                output: output.clone(),
            });
        }
    }

    /// Reverse pass from a scalar loss. Returns one gradient accumulator per
    /// `requires_grad` tensor reachable from the loss; tensors not reachable
    /// have no entry. Consumes the tape: a second call is an error.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.records.is_empty() {
            return Err(Error::EmptyTape);
        }
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(loss.id(), vec![T::one()]);

        for record in self.records.iter().rev() {
            let Some(grad_out) = grads.get(&record.output.id()) else {
                continue; // not reachable from the loss
            };
            let grad_out = grad_out.clone();
            let input_grads = adjoint(&record.op, &record.inputs, &record.output, &grad_out);
            for (input, grad) in record.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                debug_assert_eq!(grad.len(), input.numel());
                match grads.entry(input.id()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        for (acc, g) in e.get_mut().iter_mut().zip(&grad) {
                            *acc = *acc + *g;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(grad);
                    }
                }
            }
        }

        self.records.clear();
        Ok(Gradients { by_id: grads })
    }
}

/// Gradient store produced by one backward pass, keyed by tensor identity.
pub struct Gradients<T> {
    by_id: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `t`, if `t` was reachable.
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.by_id.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient for a tensor, zeros if no gradient flowed to it.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Vec<T> {
        match self.by_id.get(&t.id()) {
            Some(g) => g.clone(),
            None => vec![T::zero(); t.numel()],
        }
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.by_id.values().flatten().all(|v| v.is_finite())
    }
}
