//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Values
//! are computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar root with respect to every node that
//! depends on a parameter or a differentiable input.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, for_each_broadcast, split_axis};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::{check_perm, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm, to be folded into
/// the running statistics once the step is done.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean_buffer: BufferId,
    pub var_buffer: BufferId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Permute { input: Var, perm: Vec<usize> },
    Reshape(Var),
    Stack(Vec<Var>),
    GatherRows { table: Var, index: Vec<usize> },
    IndexAdd { input: Var, axis: usize, index: Vec<usize> },
    SumAxis { input: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        training: bool,
    },
    PairMix { r: Var, a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients returned by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_cache: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
    training: bool,
}

impl Graph {
    /// A graph in training mode (batch norm uses batch statistics).
    pub fn new() -> Self {
        Self {
            training: true,
            ..Self::default()
        }
    }

    /// A graph in inference mode (batch norm uses running statistics).
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().copied()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-differentiable input (data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input whose gradient is reported by `backward`.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Place a parameter on the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.push((id, v));
        self.param_cache.insert(id, v);
        v
    }

    /// `x[..., k] @ w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: xs,
                rhs: ws,
            });
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            0.0,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(x, w), rg))
    }

    /// `x @ w + b` with `b` broadcast over leading axes.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Batched matrix product over identical leading axes:
    /// `op(a)[.., m, k] @ op(b)[.., k, n]`, where `op` optionally transposes
    /// the last two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: as_.clone(),
            rhs: bs.clone(),
        };
        if as_.len() < 2 || as_.len() != bs.len() || as_[..as_.len() - 2] != bs[..bs.len() - 2] {
            return Err(mismatch());
        }
        let r = as_.len();
        let (m, ka) = if ta {
            (as_[r - 1], as_[r - 2])
        } else {
            (as_[r - 2], as_[r - 1])
        };
        let (kb, n) = if tb {
            (bs[r - 1], bs[r - 2])
        } else {
            (bs[r - 2], bs[r - 1])
        };
        if ka != kb {
            return Err(mismatch());
        }
        let groups: usize = as_[..r - 2].iter().product();
        let mut out = vec![0.0; groups * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for g in 0..groups {
            kernels::gemm(
                m,
                ka,
                n,
                &ad[g * m * ka..(g + 1) * m * ka],
                ta,
                &bd[g * ka * n..(g + 1) * ka * n],
                tb,
                &mut out[g * m * n..(g + 1) * m * n],
                0.0,
            );
        }
        let mut shape = as_[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Bmm { a, b, ta, tb }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = kernels::broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            }
        })?;
        let data = kernels::broadcast_map(&out_shape, ta, tb, f);
        Ok((Tensor::new(&out_shape, data)?, self.rg(&[a, b])))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Broadcasting subtraction.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, kernels::sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some(&width) = t.shape().last() else {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape: vec![],
                reason: "scalar has no axis".into(),
            });
        };
        let mut data = t.data().to_vec();
        if width > 0 {
            for row in data.chunks_mut(width) {
                kernels::softmax_in_place(row);
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (pre, _, post) = split_axis(&first, axis);
        let mut out = vec![0.0; pre * total * post];
        let mut offset = 0;
        for &v in inputs {
            let t = self.value(v);
            let len = t.shape()[axis];
            for p in 0..pre {
                let src = &t.data()[p * len * post..(p + 1) * len * post];
                let dst = p * total * post + offset * post;
                out[dst..dst + len * post].copy_from_slice(src);
            }
            offset += len;
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                shape,
                reason: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let (pre, full, post) = split_axis(&shape, axis);
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(pre * len * post);
        for p in 0..pre {
            let base = p * full * post + start * post;
            out.extend_from_slice(&src[base..base + len * post]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Narrow { input, axis, start },
            rg,
        ))
    }

    pub fn permute(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(input).permute(perm)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            t,
            Op::Permute {
                input,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(t, Op::Reshape(input), rg))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        let mut data = Vec::with_capacity(inputs.len() * self.value(inputs[0]).numel());
        for &v in inputs {
            if self.shape(v) != first.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first,
                    rhs: self.shape(v).to_vec(),
                });
            }
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend(&first);
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Stack(inputs.to_vec()), rg))
    }

    /// Row lookup `table[index[i], :]`; the product of a one-hot matrix with
    /// `table`, without materialising the one-hot rows.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: ts,
                reason: "table must be 2-D".into(),
            });
        }
        let (rows, width) = (ts[0], ts[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Contract {
                op: "gather_rows",
                reason: format!("row {bad} out of range for table with {rows} rows"),
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(&[index.len(), width], out)?,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Sum slices along `axis` into `size` output slots: `out[.., index[l], ..] += x[.., l, ..]`.
    pub fn index_add(&mut self, input: Var, axis: usize, index: &[usize], size: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || shape[axis] != index.len() || index.iter().any(|&i| i >= size) {
            return Err(TensorError::Contract {
                op: "index_add",
                reason: format!(
                    "index of length {} into {size} slots does not fit shape {shape:?} axis {axis}",
                    index.len()
                ),
            });
        }
        let (pre, len, post) = split_axis(&shape, axis);
        let src = self.value(input).data();
        let mut out = vec![0.0; pre * size * post];
        for p in 0..pre {
            for (l, &slot) in index.iter().enumerate() {
                let s = (p * len + l) * post;
                let d = (p * size + slot) * post;
                for j in 0..post {
                    out[d + j] += src[s + j];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = size;
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::IndexAdd {
                input,
                axis,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Sum over one axis, removing it. Summation runs in index order.
    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "sum_axis",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (pre, len, post) = split_axis(&shape, axis);
        let src = self.value(input).data();
        let mut out = vec![0.0; pre * post];
        for p in 0..pre {
            for l in 0..len {
                let s = (p * len + l) * post;
                for j in 0..post {
                    out[p * post + j] += src[s + j];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxis { input, axis }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::SumAll(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let s = t.sum() / t.numel().max(1) as f64;
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::MeanAll(input), rg)
    }

    /// Batch normalization over every axis except the last (feature) axis,
    /// followed by the per-feature affine rescale `gamma * xhat + beta`.
    ///
    /// In training mode the leading (batch) axis must hold at least two
    /// samples; the batch statistics are recorded for
    /// [`ParamStore::apply_bn_updates`]. In inference mode the running
    /// statistics from `store` are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: Var,
        beta: Var,
        mean_buffer: BufferId,
        var_buffer: BufferId,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let features = *shape.last().ok_or_else(|| TensorError::Contract {
            op: "batch_norm",
            reason: "scalar input".into(),
        })?;
        if self.shape(gamma) != [features] || self.shape(beta) != [features] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.value(x).numel() / features.max(1);
        let training = self.training;
        let (mean, var) = if training {
            if shape.len() < 2 || shape[0] < 2 {
                return Err(TensorError::Contract {
                    op: "batch_norm",
                    reason: format!("training mode needs a batch of at least 2, got shape {shape:?}"),
                });
            }
            let (m, v) = kernels::column_moments(self.value(x).data(), rows, features);
            self.bn_updates.push(BnUpdate {
                mean_buffer,
                var_buffer,
                mean: m.clone(),
                var: v.clone(),
            });
            (m, v)
        } else {
            (
                store.buffer(mean_buffer).data().to_vec(),
                store.buffer(var_buffer).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(features) {
            for f in 0..features {
                let h = (row[f] - mean[f]) * inv_std[f];
                xhat.push(h);
                out.push(gv[f] * h + bv[f]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(&shape, xhat)?,
                inv_std,
                training,
            },
            rg,
        ))
    }

    /// Two-row mixing `out_j = sum_i a[i, j] * r_i` for each group:
    /// `r: [G, .., 2, d]`, `a: [G, 2, 2]`. This is `out^T = r^T a` per group.
    pub fn pair_mix(&mut self, r: Var, a: Var) -> Result<Var> {
        let (rs, as_) = (self.shape(r).to_vec(), self.shape(a).to_vec());
        let ok = rs.len() >= 3
            && as_.len() == 3
            && as_[0] == rs[0]
            && as_[1] == 2
            && as_[2] == 2
            && rs[rs.len() - 2] == 2;
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "pair_mix",
                lhs: rs,
                rhs: as_,
            });
        }
        let groups = rs[0];
        let d = rs[rs.len() - 1];
        let per_group = self.value(r).numel() / groups.max(1);
        let blocks = per_group / (2 * d).max(1);
        let (rv, av) = (self.value(r).data(), self.value(a).data());
        let mut out = vec![0.0; rv.len()];
        for g in 0..groups {
            let m = &av[g * 4..g * 4 + 4];
            for b in 0..blocks {
                let base = g * per_group + b * 2 * d;
                for k in 0..d {
                    let (r0, r1) = (rv[base + k], rv[base + d + k]);
                    out[base + k] = m[0] * r0 + m[2] * r1;
                    out[base + d + k] = m[1] * r0 + m[3] * r1;
                }
            }
        }
        let rg = self.rg(&[r, a]);
        Ok(self.push(Tensor::new(&rs, out)?, Op::PairMix { r, a }, rg))
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                reason: format!("root must be scalar, got shape {:?}", self.shape(root)),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(x, w) => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (k, n) = (wt.shape()[0], wt.shape()[1]);
                let m = xt.numel() / k.max(1);
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, wt.data(), true, &mut dx, 0.0);
                    accumulate(grads, *x, Tensor::new(xt.shape(), dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; k * n];
                    kernels::gemm(k, m, n, xt.data(), true, g.data(), false, &mut dw, 0.0);
                    accumulate(grads, *w, Tensor::new(wt.shape(), dw)?);
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let r = at.ndim();
                let (m, k) = if *ta {
                    (at.shape()[r - 1], at.shape()[r - 2])
                } else {
                    (at.shape()[r - 2], at.shape()[r - 1])
                };
                let n = out.shape()[r - 1];
                let groups: usize = at.shape()[..r - 2].iter().product();
                if self.wants(*a) {
                    let mut da = vec![0.0; at.numel()];
                    for gi in 0..groups {
                        let gs = &g.data()[gi * m * n..(gi + 1) * m * n];
                        let bs = &bt.data()[gi * k * n..(gi + 1) * k * n];
                        let dst = &mut da[gi * m * k..(gi + 1) * m * k];
                        if *ta {
                            // stored [k, m] = op(b) @ g^T
                            kernels::gemm(k, n, m, bs, *tb, gs, true, dst, 0.0);
                        } else {
                            kernels::gemm(m, n, k, gs, false, bs, !*tb, dst, 0.0);
                        }
                    }
                    accumulate(grads, *a, Tensor::new(at.shape(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bt.numel()];
                    for gi in 0..groups {
                        let gs = &g.data()[gi * m * n..(gi + 1) * m * n];
                        let as_ = &at.data()[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *tb {
                            // stored [n, k] = g^T @ op(a)
                            kernels::gemm(n, m, k, gs, true, as_, *ta, dst, 0.0);
                        } else {
                            kernels::gemm(k, m, n, as_, !*ta, gs, false, dst, 0.0);
                        }
                    }
                    accumulate(grads, *b, Tensor::new(bt.shape(), db)?);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                if sa == sb && sa == out.shape() {
                    if self.wants(*a) {
                        accumulate(grads, *a, g.clone());
                    }
                    if self.wants(*b) {
                        let d = g.data().iter().map(|v| sign * v).collect();
                        accumulate(grads, *b, Tensor::new(&sb, d)?);
                    }
                    return Ok(());
                }
                let (mut da, mut db) = (vec![0.0; prod(&sa)], vec![0.0; prod(&sb)]);
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    da[ia] += g.data()[o];
                    db[ib] += sign * g.data()[o];
                });
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::new(&sa, da)?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::new(&sb, db)?);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (mut da, mut db) = (vec![0.0; ta.numel()], vec![0.0; tb.numel()]);
                let (av, bv) = (ta.data(), tb.data());
                for_each_broadcast(out.shape(), ta.shape(), tb.shape(), |o, ia, ib| {
                    da[ia] += g.data()[o] * bv[ib];
                    db[ib] += g.data()[o] * av[ia];
                });
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::new(ta.shape(), da)?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::new(tb.shape(), db)?);
                }
            }
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|v| v * c).collect();
                accumulate(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| if *y > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                accumulate(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                accumulate(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::Softmax(a) => {
                let width = *out.shape().last().unwrap();
                let mut d = vec![0.0; out.numel()];
                if width > 0 {
                    for ((dy, y), dx) in g
                        .data()
                        .chunks(width)
                        .zip(out.data().chunks(width))
                        .zip(d.chunks_mut(width))
                    {
                        let dot: f64 = dy.iter().zip(y).map(|(p, q)| p * q).sum();
                        for j in 0..width {
                            dx[j] = y[j] * (dy[j] - dot);
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(out.shape(), d)?);
            }
            Op::Concat { inputs, axis } => {
                let (pre, total, post) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    let len = s[*axis];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(pre * len * post);
                        for p in 0..pre {
                            let base = p * total * post + offset * post;
                            d.extend_from_slice(&g.data()[base..base + len * post]);
                        }
                        accumulate(grads, v, Tensor::new(s, d)?);
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let s = self.shape(*input);
                let (pre, full, post) = split_axis(s, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![0.0; prod(s)];
                for p in 0..pre {
                    let base = p * full * post + start * post;
                    d[base..base + len * post]
                        .copy_from_slice(&g.data()[p * len * post..(p + 1) * len * post]);
                }
                accumulate(grads, *input, Tensor::new(s, d)?);
            }
            Op::Permute { input, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                check_perm(g.shape(), &inv)?;
                accumulate(grads, *input, g.permute(&inv)?);
            }
            Op::Reshape(input) => {
                accumulate(grads, *input, g.reshape(self.shape(*input))?);
            }
            Op::Stack(inputs) => {
                let each = g.numel() / inputs.len().max(1);
                for (k, &v) in inputs.iter().enumerate() {
                    if self.wants(v) {
                        let d = g.data()[k * each..(k + 1) * each].to_vec();
                        accumulate(grads, v, Tensor::new(self.shape(v), d)?);
                    }
                }
            }
            Op::GatherRows { table, index } => {
                let ts = self.shape(*table);
                let width = ts[1];
                let mut d = vec![0.0; prod(ts)];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..width {
                        d[i * width + j] += g.data()[r * width + j];
                    }
                }
                accumulate(grads, *table, Tensor::new(ts, d)?);
            }
            Op::IndexAdd { input, axis, index } => {
                let s = self.shape(*input);
                let (pre, len, post) = split_axis(s, *axis);
                let size = out.shape()[*axis];
                let mut d = vec![0.0; prod(s)];
                for p in 0..pre {
                    for (l, &slot) in index.iter().enumerate() {
                        let dst = (p * len + l) * post;
                        let src = (p * size + slot) * post;
                        d[dst..dst + post].copy_from_slice(&g.data()[src..src + post]);
                    }
                }
                accumulate(grads, *input, Tensor::new(s, d)?);
            }
            Op::SumAxis { input, axis } => {
                let s = self.shape(*input);
                let (pre, len, post) = split_axis(s, *axis);
                let mut d = vec![0.0; prod(s)];
                for p in 0..pre {
                    for l in 0..len {
                        let dst = (p * len + l) * post;
                        d[dst..dst + post].copy_from_slice(&g.data()[p * post..(p + 1) * post]);
                    }
                }
                accumulate(grads, *input, Tensor::new(s, d)?);
            }
            Op::SumAll(a) => {
                accumulate(grads, *a, Tensor::full(self.shape(*a), g.item()));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel().max(1) as f64;
                accumulate(grads, *a, Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let f = inv_std.len();
                let rows = xhat.numel() / f.max(1);
                let gv = self.value(*gamma).data();
                let (mut dgamma, mut dbeta) = (vec![0.0; f], vec![0.0; f]);
                let (mut sum_dxhat, mut sum_dxhat_xhat) = (vec![0.0; f], vec![0.0; f]);
                for (gr, hr) in g.data().chunks(f).zip(xhat.data().chunks(f)) {
                    for j in 0..f {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        sum_dxhat[j] += dh;
                        sum_dxhat_xhat[j] += dh * hr[j];
                    }
                }
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(xhat.numel());
                    let n = rows as f64;
                    for (gr, hr) in g.data().chunks(f).zip(xhat.data().chunks(f)) {
                        for j in 0..f {
                            let dh = gr[j] * gv[j];
                            if *training {
                                dx.push(
                                    inv_std[j] / n
                                        * (n * dh - sum_dxhat[j] - hr[j] * sum_dxhat_xhat[j]),
                                );
                            } else {
                                dx.push(dh * inv_std[j]);
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(xhat.shape(), dx)?);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[f], dgamma)?);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[f], dbeta)?);
                }
            }
            Op::PairMix { r, a } => {
                let (rt, at) = (self.value(*r), self.value(*a));
                let groups = at.shape()[0];
                let d = *rt.shape().last().unwrap();
                let per_group = rt.numel() / groups.max(1);
                let blocks = per_group / (2 * d).max(1);
                let (rv, av, gv) = (rt.data(), at.data(), g.data());
                let mut dr = vec![0.0; rt.numel()];
                let mut da = vec![0.0; at.numel()];
                for gi in 0..groups {
                    let m = &av[gi * 4..gi * 4 + 4];
                    let mut acc = [0.0; 4];
                    for b in 0..blocks {
                        let base = gi * per_group + b * 2 * d;
                        for k in 0..d {
                            let (r0, r1) = (rv[base + k], rv[base + d + k]);
                            let (g0, g1) = (gv[base + k], gv[base + d + k]);
                            dr[base + k] = m[0] * g0 + m[1] * g1;
                            dr[base + d + k] = m[2] * g0 + m[3] * g1;
                            acc[0] += r0 * g0;
                            acc[1] += r0 * g1;
                            acc[2] += r1 * g0;
                            acc[3] += r1 * g1;
                        }
                    }
                    da[gi * 4..gi * 4 + 4].copy_from_slice(&acc);
                }
                if self.wants(*r) {
                    accumulate(grads, *r, Tensor::new(rt.shape(), dr)?);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::new(at.shape(), da)?);
                }
            }
        }
        Ok(())
    }
}

fn prod(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
