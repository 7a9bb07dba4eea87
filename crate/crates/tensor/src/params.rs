use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::graph::{BnUpdate, Gradients, Graph};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether the L2 penalty applies (weight matrices yes, biases no).
    pub decay: bool,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Named parameters and buffers of one model instance.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    names: BTreeMap<String, Slot>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        let id = self.params.len();
        self.names.insert(name.clone(), Slot::Param(id));
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            decay,
        });
        Ok(ParamId(id))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<BufferId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        let id = self.buffers.len();
        self.names.insert(name.clone(), Slot::Buffer(id));
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    /// Replace a parameter or buffer value by name, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = *self
            .names
            .get(name)
            .ok_or_else(|| TensorError::UnknownName(name.to_string()))?;
        let target = match slot {
            Slot::Param(i) => &mut self.params[i].value,
            Slot::Buffer(i) => &mut self.buffers[i].value,
        };
        if target.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "assign",
                lhs: target.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *target = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Add the gradients of every parameter that took part in `graph`.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for (id, var) in graph.param_vars() {
            if let Some(g) = grads.get(var) {
                let dst = self.params[id.0].grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }

    /// `0.5 * sum ||W||^2` over decayed parameters.
    pub fn l2_half_norm(&self) -> f64 {
        0.5 * self
            .params
            .iter()
            .filter(|p| p.decay)
            .map(|p| p.value.sum_squares())
            .sum::<f64>()
    }

    /// Gradient of `(lambda/2) * sum ||W||^2`.
    pub fn add_l2_grad(&mut self, lambda: f64) {
        if lambda == 0.0 {
            return;
        }
        for p in self.params.iter_mut().filter(|p| p.decay) {
            let (v, g) = (p.value.data(), p.grad.data_mut());
            for (gi, vi) in g.iter_mut().zip(v) {
                *gi += lambda * vi;
            }
        }
    }

    /// Fold batch statistics into running statistics:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            for (buf, batch) in [(u.mean_buffer, &u.mean), (u.var_buffer, &u.var)] {
                let run = self.buffers[buf.0].value.data_mut();
                for (r, b) in run.iter_mut().zip(batch) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
            }
        }
    }
}
