//! Layer helpers over the autodiff engine: affine maps, batch norm and
//! attention head reshaping.

use icst_tensor::{Activation, BufferId, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Glorot-uniform weight tensor of shape `shape`, with fans taken from the
/// last two axes.
pub fn glorot<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let r = shape.len();
    let (fan_in, fan_out) = (shape[r - 2], shape[r - 1]);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

/// `x @ w + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add(format!("{name}/w"), glorot(&[input, output], rng), true)?;
        let b = if bias {
            Some(store.add(format!("{name}/b"), Tensor::zeros(&[output]), false)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        Ok(match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)?
            }
            None => y,
        })
    }

    /// `act(x @ w + b)`.
    pub fn forward_act(&self, g: &mut Graph, store: &ParamStore, x: Var, act: Activation) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        Ok(g.activation(y, act))
    }
}

/// Two affine layers, each followed by ReLU.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, rng, &format!("{name}/fc1"), input, hidden, true)?,
            second: Linear::new(store, rng, &format!("{name}/fc2"), hidden, output, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward_act(g, store, x, Activation::Relu)?;
        self.second.forward_act(g, store, h, Activation::Relu)
    }
}

/// Batch normalization over every axis but the feature axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: BufferId,
    pub var: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}/gamma"), Tensor::full(&[features], 1.0), false)?,
            beta: store.add(format!("{name}/beta"), Tensor::zeros(&[features]), false)?,
            mean: store.add_buffer(format!("{name}/running_mean"), Tensor::zeros(&[features]))?,
            var: store.add_buffer(format!("{name}/running_var"), Tensor::full(&[features], 1.0))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        Ok(g.batch_norm(store, x, gamma, beta, self.mean, self.var)?)
    }
}

/// Which axis attention mixes over for a `[B, S, N, D]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttendOver {
    /// Over the `N` roads at each step.
    Roads,
    /// Over the `S` steps of each road.
    Steps,
}

/// `[B, S, N, M*dh] -> [groups, len, dh]` where each group is one
/// (sample, step, head) for [`AttendOver::Roads`] or one (sample, road, head)
/// for [`AttendOver::Steps`].
pub fn split_heads(g: &mut Graph, x: Var, heads: usize, over: AttendOver) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
    let dh = d / heads;
    let x = g.reshape(x, &[b, t, n, heads, dh])?;
    Ok(match over {
        AttendOver::Roads => {
            let x = g.permute(x, &[0, 1, 3, 2, 4])?;
            g.reshape(x, &[b * t * heads, n, dh])?
        }
        AttendOver::Steps => {
            let x = g.permute(x, &[0, 2, 3, 1, 4])?;
            g.reshape(x, &[b * n * heads, t, dh])?
        }
    })
}

/// Inverse of [`split_heads`] back to `[B, S, N, M*dh]`.
pub fn merge_heads(
    g: &mut Graph,
    x: Var,
    dims: (usize, usize, usize),
    heads: usize,
    over: AttendOver,
) -> Result<Var> {
    let (b, t, n) = dims;
    let dh = g.shape(x)[2];
    Ok(match over {
        AttendOver::Roads => {
            let x = g.reshape(x, &[b, t, heads, n, dh])?;
            let x = g.permute(x, &[0, 1, 3, 2, 4])?;
            g.reshape(x, &[b, t, n, heads * dh])?
        }
        AttendOver::Steps => {
            let x = g.reshape(x, &[b, n, heads, t, dh])?;
            let x = g.permute(x, &[0, 3, 1, 2, 4])?;
            g.reshape(x, &[b, t, n, heads * dh])?
        }
    })
}

/// Scaled dot-product attention over grouped heads:
/// `softmax(q k^T / sqrt(dh)) v`. Returns the mixed values and the weights.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dh = g.shape(q)[2];
    let scores = g.bmm(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(scores)?;
    let out = g.bmm(weights, v, false, false)?;
    Ok((out, weights))
}
