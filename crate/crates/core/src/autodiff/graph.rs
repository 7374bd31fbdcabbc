//! Eager reverse-mode graph.
//!
//! Every op computes its forward value immediately and records a node that
//! knows how to push an upstream gradient into its parents. Nodes are stored
//! in creation order, so the reverse of that order is a valid topological
//! order for the backward sweep.

use super::real::{Real, Strides};
use crate::error::{invalid, shape_err, Result};

/// Denominator guard for `l2_normalize`.
pub const NORM_EPS: f64 = 1e-12;
/// Variance guard inside batch norm.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a parameter tensor by group and position within the group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: usize,
    pub tensor: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Softmax,
    BatchNorm,
    MaxPool,
    Mean,
    Sum,
    Concat,
    Narrow,
    L2Normalize,
    Permute,
    Reshape,
    StopGradient,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 17] = [
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::BatchNorm,
        OpKind::MaxPool,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::L2Normalize,
        OpKind::Permute,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::BatchNorm => "batch_norm",
            OpKind::MaxPool => "max_pool_over_points",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::StopGradient => "stop_gradient",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .chain(std::iter::once(OpKind::StopGradient))
            .find(|k| k.name() == name)
    }
}

/// Batch-norm normalization source.
pub enum NormMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with externally kept running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel moments of a train-mode batch-norm input.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    BatchMatMul {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
        broadcast: bool,
    },
    Sub {
        a: TensorId,
        b: TensorId,
        broadcast: bool,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        c: T,
    },
    Relu {
        a: TensorId,
    },
    Softmax {
        a: TensorId,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool {
        a: TensorId,
        argmax: Vec<usize>,
        points: usize,
    },
    ReduceAxis {
        a: TensorId,
        axis: usize,
        scale: T,
    },
    ReduceAll {
        a: TensorId,
        scale: T,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Narrow {
        a: TensorId,
        axis: usize,
        start: usize,
    },
    L2Normalize {
        a: TensorId,
        norms: Vec<T>,
    },
    Permute {
        a: TensorId,
        source: Vec<usize>,
    },
    Reshape {
        a: TensorId,
    },
    StopGradient,
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    kind: OpKind,
    requires_grad: bool,
    param: Option<ParamKey>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(outer, dim, inner)` extents around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

/// Reverse-mode computation graph.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    fault: Option<OpKind>,
    track_kinks: bool,
    kink_signature: u64,
    replay: Option<std::vec::IntoIter<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
            fault: None,
            track_kinks: false,
            kink_signature: 0xcbf2_9ce4_8422_2325,
            replay: None,
        }
    }

    /// Values of every stop-gradient node, in creation order.
    pub fn stop_gradient_values(&self) -> Vec<Vec<T>> {
        self.nodes
            .iter()
            .filter(|n| n.kind == OpKind::StopGradient)
            .map(|n| n.value.clone())
            .collect()
    }

    /// Make the next stop-gradient nodes output `values` in order instead of
    /// their inputs, so a finite-difference probe sees them as constants.
    pub fn replay_stop_gradients(&mut self, values: Vec<Vec<T>>) {
        self.replay = Some(values.into_iter());
    }

    /// Test rig: scales the backward contribution of every `kind` node by 1.5.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Record relu masks and max-pool winners into [`Graph::kink_signature`].
    pub fn track_kinks(&mut self, on: bool) {
        self.track_kinks = on;
    }

    /// Hash of every non-smooth branch decision taken so far.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    fn mix_kink(&mut self, bit: u64) {
        self.kink_signature = (self.kink_signature ^ bit).wrapping_mul(0x0100_0000_01b3);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].value
    }

    /// Whether any recorded forward value is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.nodes.iter().any(|n| n.value.iter().any(|v| !v.is_finite()))
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn kind(&self, id: TensorId) -> OpKind {
        self.nodes[id.0].kind
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self, id: TensorId) -> T {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, kind: OpKind, requires_grad: bool) -> TensorId {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            kind,
            requires_grad,
            param: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: &[usize], values: Vec<T>, requires_grad: bool) -> Result<TensorId> {
        if numel(shape) != values.len() {
            return shape_err(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                values.len()
            ));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, OpKind::Leaf, requires_grad))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> Result<TensorId> {
        self.leaf(shape, values, false)
    }

    /// A leaf that accumulates a gradient.
    pub fn variable(&mut self, shape: &[usize], values: Vec<T>) -> Result<TensorId> {
        self.leaf(shape, values, true)
    }

    /// A gradient-tracked leaf tied to an externally owned parameter.
    pub fn param(&mut self, key: ParamKey, shape: &[usize], values: Vec<T>) -> Result<TensorId> {
        let id = self.leaf(shape, values, true)?;
        self.nodes[id.0].param = Some(key);
        Ok(id)
    }

    /// Gradients of every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamKey, &[T])> {
        self.nodes.iter().filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    fn rg(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Matrix product. `a` is `[.., k]` (flattened to rows), `b` is `[k, n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            Strides::row_major(k),
            self.value(b),
            Strides::row_major(n),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul { a, b }, OpKind::MatMul, rg))
    }

    /// Batched product `[bt, m, k] x [bt, k, n] -> [bt, m, n]`.
    pub fn batch_matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err(format!("batch_matmul {sa:?} x {sb:?}"));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            T::gemm(
                m,
                k,
                n,
                &self.value(a)[i * m * k..(i + 1) * m * k],
                Strides::row_major(k),
                &self.value(b)[i * k * n..(i + 1) * k * n],
                Strides::row_major(n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                Strides::row_major(n),
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![bt, m, n], out, Op::BatchMatMul { a, b }, OpKind::BatchMatMul, rg))
    }

    fn binary_broadcast(&self, a: TensorId, b: TensorId, what: &str) -> Result<bool> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(false)
        } else if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
            Ok(true)
        } else {
            shape_err(format!("{what} {sa:?} with {sb:?}"))
        }
    }

    /// `a + b`; `b` may be a row vector broadcast over the last axis of `a`.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let broadcast = self.binary_broadcast(a, b, "add")?;
        let vb = self.value(b);
        let out: Vec<T> = if broadcast {
            let n = vb.len();
            self.value(a).iter().enumerate().map(|(i, &x)| x + vb[i % n]).collect()
        } else {
            self.value(a).iter().zip(vb).map(|(&x, &y)| x + y).collect()
        };
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b, broadcast }, OpKind::Add, rg))
    }

    /// `a - b` with the same broadcasting rule as [`Graph::add`].
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let broadcast = self.binary_broadcast(a, b, "sub")?;
        let vb = self.value(b);
        let out: Vec<T> = if broadcast {
            let n = vb.len();
            self.value(a).iter().enumerate().map(|(i, &x)| x - vb[i % n]).collect()
        } else {
            self.value(a).iter().zip(vb).map(|(&x, &y)| x - y).collect()
        };
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub { a, b, broadcast }, OpKind::Sub, rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mul {:?} with {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, OpKind::Mul, rg))
    }

    pub fn scale(&mut self, a: TensorId, c: T) -> TensorId {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a, c }, OpKind::Scale, rg)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<T> = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        if self.track_kinks {
            let bits: Vec<u64> = self.value(a).iter().map(|&x| (x > T::zero()) as u64).collect();
            for b in bits {
                self.mix_kink(b);
            }
        }
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Relu { a }, OpKind::Relu, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let Some(&n) = shape.last() else {
            return shape_err("softmax of a scalar");
        };
        let va = self.value(a);
        if va.iter().any(|x| !x.is_finite()) {
            return invalid("softmax input is not finite");
        }
        let mut out = vec![T::zero(); va.len()];
        for (row, dst) in va.chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut total = T::zero();
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                total = total + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Softmax { a }, OpKind::Softmax, rg))
    }

    /// Per-channel batch norm over every leading row of `x: [.., C]`.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mode: NormMode<'_, T>,
    ) -> Result<(TensorId, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        let Some(&c) = shape.last() else {
            return shape_err("batch_norm of a scalar");
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!(
                "batch_norm affine {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let rows = numel(&shape) / c.max(1);
        if rows == 0 {
            return invalid("batch_norm over zero rows");
        }
        let eps = T::of(BN_EPS);
        let vx = self.value(x);
        let (mean, var, stats, train) = match mode {
            NormMode::Train => {
                let inv_n = T::one() / T::of(rows as f64);
                let mut mean = vec![T::zero(); c];
                for row in vx.chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m * inv_n);
                let mut var = vec![T::zero(); c];
                for row in vx.chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s = *s + (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s * inv_n);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: rows,
                };
                (mean, var, Some(stats), true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("batch_norm running statistics length");
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut out = vec![T::zero(); vx.len()];
        for ((row, hrow), orow) in vx.chunks(c).zip(xhat.chunks_mut(c)).zip(out.chunks_mut(c)) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                hrow[j] = h;
                orow[j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let id = self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            OpKind::BatchNorm,
            rg,
        );
        Ok((id, stats))
    }

    /// Channelwise max over the point axis: `[B, N, C] -> [B, C]`, or `[N, C] -> [C]`.
    ///
    /// Ties go to the lowest point index.
    pub fn max_pool_over_points(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let (batch, points, c, out_shape) = match shape.as_slice() {
            [n, c] => (1, *n, *c, vec![*c]),
            [b, n, c] => (*b, *n, *c, vec![*b, *c]),
            _ => return shape_err(format!("max_pool_over_points on {shape:?}")),
        };
        if points == 0 {
            return invalid("max_pool_over_points over zero points");
        }
        let va = self.value(a);
        let mut out = vec![T::zero(); batch * c];
        let mut argmax = vec![0usize; batch * c];
        for bi in 0..batch {
            let base = bi * points * c;
            for j in 0..c {
                let mut best = va[base + j];
                let mut arg = 0;
                for p in 1..points {
                    let v = va[base + p * c + j];
                    if v > best {
                        best = v;
                        arg = p;
                    }
                }
                out[bi * c + j] = best;
                argmax[bi * c + j] = arg;
            }
        }
        if self.track_kinks {
            for &i in &argmax {
                self.mix_kink(i as u64);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::MaxPool { a, argmax, points }, OpKind::MaxPool, rg))
    }

    fn reduce_axis(&mut self, a: TensorId, axis: usize, mean: bool) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("reduce axis {axis} of {shape:?}"));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let va = self.value(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &va[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst = *dst + v;
                }
            }
        }
        let scale = if mean {
            T::one() / T::of(dim.max(1) as f64)
        } else {
            T::one()
        };
        out.iter_mut().for_each(|v| *v = *v * scale);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[a]);
        let kind = if mean { OpKind::Mean } else { OpKind::Sum };
        Ok(self.push(out_shape, out, Op::ReduceAxis { a, axis, scale }, kind, rg))
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(a, axis, false)
    }

    fn reduce_all(&mut self, a: TensorId, mean: bool) -> TensorId {
        let va = self.value(a);
        let total = va.iter().fold(T::zero(), |s, &v| s + v);
        let scale = if mean {
            T::one() / T::of(va.len().max(1) as f64)
        } else {
            T::one()
        };
        let rg = self.rg(&[a]);
        let kind = if mean { OpKind::Mean } else { OpKind::Sum };
        self.push(vec![], vec![total * scale], Op::ReduceAll { a, scale }, kind, rg)
    }

    /// Mean of every element, as a scalar.
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        self.reduce_all(a, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        self.reduce_all(a, false)
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} of {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return shape_err(format!("concat {base:?} with {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            OpKind::Concat,
            rg,
        ))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(format!("narrow {start}..{} of axis {axis} in {shape:?}", start + len));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let va = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&va[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::Narrow { a, axis, start }, OpKind::Narrow, rg))
    }

    /// `x / (‖x‖ + ε)` over the last axis.
    pub fn l2_normalize(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let Some(&n) = shape.last() else {
            return shape_err("l2_normalize of a scalar");
        };
        let va = self.value(a);
        if va.iter().any(|x| !x.is_finite()) {
            return invalid("l2_normalize input is not finite");
        }
        let eps = T::of(NORM_EPS);
        let mut norms = Vec::with_capacity(va.len() / n.max(1));
        let mut out = vec![T::zero(); va.len()];
        for (row, dst) in va.chunks(n).zip(out.chunks_mut(n)) {
            let norm = row.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
            norms.push(norm);
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = x / (norm + eps);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::L2Normalize { a, norms }, OpKind::L2Normalize, rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("permutation {perm:?} of {shape:?}"));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let total = numel(&shape);
        let mut source = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            source.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let va = self.value(a);
        let out = source.iter().map(|&s| va[s]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, Op::Permute { a, source }, OpKind::Permute, rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != numel(self.shape(a)) {
            return shape_err(format!("reshape {:?} to {shape:?}", self.shape(a)));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, OpKind::Reshape, rg))
    }

    /// Forward identity; no gradient crosses this edge.
    pub fn stop_gradient(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape(a).to_vec();
        let out = match self.replay.as_mut().and_then(Iterator::next) {
            Some(v) if v.len() == numel(&shape) => v,
            _ => self.value(a).to_vec(),
        };
        self.push(shape, out, Op::StopGradient, OpKind::StopGradient, false)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// A graph can be differentiated once; a second call is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return invalid("backward already ran on this graph");
        }
        if self.nodes[loss.0].value.len() != 1 {
            return invalid(format!("loss must be scalar, got shape {:?}", self.shape(loss)));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = self.nodes[i].grad.take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                self.nodes[i].grad = Some(g);
                continue;
            }
            if self.fault == Some(self.nodes[i].kind) {
                let k = T::of(1.5);
                g.iter_mut().for_each(|v| *v = *v * k);
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g);
            self.nodes[i].op = op;
            if self.nodes[i].param.is_some() || matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn grad_slot(&mut self, id: TensorId) -> &mut Vec<T> {
        let len = numel(&self.nodes[id.0].shape);
        accumulate(&mut self.nodes[id.0].grad, len)
    }

    fn propagate(&mut self, i: usize, op: &Op<T>, g: &[T]) {
        match *op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul { a, b } => {
                let k = self.shape(b)[0];
                let n = self.shape(b)[1];
                let m = self.value(a).len() / k.max(1);
                if self.wants(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let ga = self.grad_slot(a);
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        Strides::row_major(n),
                        &bv,
                        Strides::transposed(n),
                        T::one(),
                        ga,
                        Strides::row_major(k),
                    );
                    self.nodes[b.0].value = bv;
                }
                if self.wants(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let gb = self.grad_slot(b);
                    T::gemm(
                        k,
                        m,
                        n,
                        &av,
                        Strides::transposed(k),
                        g,
                        Strides::row_major(n),
                        T::one(),
                        gb,
                        Strides::row_major(n),
                    );
                    self.nodes[a.0].value = av;
                }
            }
            Op::BatchMatMul { a, b } => {
                let (bt, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[2];
                if self.wants(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let ga = self.grad_slot(a);
                    for t in 0..bt {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            Strides::row_major(n),
                            &bv[t * k * n..(t + 1) * k * n],
                            Strides::transposed(n),
                            T::one(),
                            &mut ga[t * m * k..(t + 1) * m * k],
                            Strides::row_major(k),
                        );
                    }
                    self.nodes[b.0].value = bv;
                }
                if self.wants(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let gb = self.grad_slot(b);
                    for t in 0..bt {
                        T::gemm(
                            k,
                            m,
                            n,
                            &av[t * m * k..(t + 1) * m * k],
                            Strides::transposed(k),
                            &g[t * m * n..(t + 1) * m * n],
                            Strides::row_major(n),
                            T::one(),
                            &mut gb[t * k * n..(t + 1) * k * n],
                            Strides::row_major(n),
                        );
                    }
                    self.nodes[a.0].value = av;
                }
            }
            Op::Add { a, b, broadcast } | Op::Sub { a, b, broadcast } => {
                let sign = if matches!(op, Op::Sub { .. }) {
                    -T::one()
                } else {
                    T::one()
                };
                if self.wants(a) {
                    let ga = self.grad_slot(a);
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
                if self.wants(b) {
                    let gb = self.grad_slot(b);
                    if broadcast {
                        let n = gb.len();
                        for (j, &v) in g.iter().enumerate() {
                            gb[j % n] = gb[j % n] + sign * v;
                        }
                    } else {
                        gb.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + sign * v);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let ga = self.grad_slot(a);
                    for ((d, &v), &y) in ga.iter_mut().zip(g).zip(&bv) {
                        *d = *d + v * y;
                    }
                    self.nodes[b.0].value = bv;
                }
                if self.wants(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let gb = self.grad_slot(b);
                    for ((d, &v), &x) in gb.iter_mut().zip(g).zip(&av) {
                        *d = *d + v * x;
                    }
                    self.nodes[a.0].value = av;
                }
            }
            Op::Scale { a, c } => {
                if self.wants(a) {
                    let ga = self.grad_slot(a);
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * c);
                }
            }
            Op::Relu { a } => {
                if self.wants(a) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let ga = self.grad_slot(a);
                    for ((d, &v), &x) in ga.iter_mut().zip(g).zip(&av) {
                        if x > T::zero() {
                            *d = *d + v;
                        }
                    }
                    self.nodes[a.0].value = av;
                }
            }
            Op::Softmax { a } => {
                if self.wants(a) {
                    let n = *self.shape(a).last().unwrap_or(&1);
                    let y = std::mem::take(&mut self.nodes[i].value);
                    let ga = self.grad_slot(a);
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&y, &g)| s + y * g);
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = *d + yv * (gv - dot);
                        }
                    }
                    self.nodes[i].value = y;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
                train,
            } => {
                let c = inv_std.len();
                let rows = xhat.len() / c.max(1);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] = sum_g[j] + gr[j];
                        sum_gx[j] = sum_gx[j] + gr[j] * hr[j];
                    }
                }
                if self.wants(gamma) {
                    let gg = self.grad_slot(gamma);
                    gg.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d = *d + v);
                }
                if self.wants(beta) {
                    let gb = self.grad_slot(beta);
                    gb.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d = *d + v);
                }
                if self.wants(x) {
                    let gam = self.value(gamma).to_vec();
                    let inv_n = T::one() / T::of(rows as f64);
                    let gx = self.grad_slot(x);
                    for ((gr, hr), dr) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)) {
                        for j in 0..c {
                            let scale = gam[j] * inv_std[j];
                            let v = if train {
                                scale * (gr[j] - inv_n * sum_g[j] - hr[j] * inv_n * sum_gx[j])
                            } else {
                                scale * gr[j]
                            };
                            dr[j] = dr[j] + v;
                        }
                    }
                }
            }
            Op::MaxPool { a, ref argmax, points } => {
                if self.wants(a) {
                    let c = *self.shape(a).last().unwrap_or(&1);
                    let ga = self.grad_slot(a);
                    for (o, (&arg, &v)) in argmax.iter().zip(g).enumerate() {
                        let (bi, j) = (o / c, o % c);
                        let idx = (bi * points + arg) * c + j;
                        ga[idx] = ga[idx] + v;
                    }
                }
            }
            Op::ReduceAxis { a, axis, scale } => {
                if self.wants(a) {
                    let shape = self.shape(a).to_vec();
                    let (outer, dim, inner) = split_axis(&shape, axis);
                    let ga = self.grad_slot(a);
                    for o in 0..outer {
                        for d in 0..dim {
                            let dst = &mut ga[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            for (t, &v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *t = *t + v * scale;
                            }
                        }
                    }
                }
            }
            Op::ReduceAll { a, scale } => {
                if self.wants(a) {
                    let v = g[0] * scale;
                    let ga = self.grad_slot(a);
                    ga.iter_mut().for_each(|d| *d = *d + v);
                }
            }
            Op::Concat { ref parts, axis } => {
                let out_shape = self.nodes[i].shape.clone();
                let (outer, total, inner) = split_axis(&out_shape, axis);
                let mut offset = 0;
                for &p in parts {
                    let d = self.shape(p)[axis];
                    if self.wants(p) {
                        let gp = self.grad_slot(p);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            let dst = &mut gp[o * d * inner..(o + 1) * d * inner];
                            dst.iter_mut().zip(src).for_each(|(t, &v)| *t = *t + v);
                        }
                    }
                    offset += d;
                }
            }
            Op::Narrow { a, axis, start } => {
                if self.wants(a) {
                    let shape = self.shape(a).to_vec();
                    let (outer, dim, inner) = split_axis(&shape, axis);
                    let len = self.nodes[i].shape[axis];
                    let ga = self.grad_slot(a);
                    for o in 0..outer {
                        let dst = &mut ga[(o * dim + start) * inner..(o * dim + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(t, &v)| *t = *t + v);
                    }
                }
            }
            Op::L2Normalize { a, ref norms } => {
                if self.wants(a) {
                    let n = *self.shape(a).last().unwrap_or(&1);
                    let eps = T::of(NORM_EPS);
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let ga = self.grad_slot(a);
                    for (((xr, gr), dr), &norm) in av.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)).zip(norms) {
                        let denom = norm + eps;
                        let dot = xr.iter().zip(gr).fold(T::zero(), |s, (&x, &g)| s + x * g);
                        let k = if norm > T::zero() {
                            dot / (norm * denom * denom)
                        } else {
                            T::zero()
                        };
                        for ((d, &x), &gv) in dr.iter_mut().zip(xr).zip(gr) {
                            *d = *d + gv / denom - x * k;
                        }
                    }
                    self.nodes[a.0].value = av;
                }
            }
            Op::Permute { a, ref source } => {
                if self.wants(a) {
                    let ga = self.grad_slot(a);
                    for (&s, &v) in source.iter().zip(g) {
                        ga[s] = ga[s] + v;
                    }
                }
            }
            Op::Reshape { a } => {
                if self.wants(a) {
                    let ga = self.grad_slot(a);
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
            }
        }
    }
}
