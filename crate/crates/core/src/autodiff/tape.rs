//! Append-only tape of primitive operations and the reverse sweep over it.
//!
//! Every primitive records its output value together with the indices of its
//! parents, so node order is always a topological order. `backward` never
//! mutates the tape; it may be called any number of times on the same graph
//! with different roots or target sets.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    LogSoftmax(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Broadcast {
        src: usize,
        axis: Option<usize>,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        geometry: kernels::ConvGeometry,
    },
    Narrow {
        src: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    SuffixSum(usize),
}

impl Op {
    fn parents(&self) -> Parents {
        use Op::*;
        match *self {
            Leaf | Constant => Parents::None,
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => Parents::Two(a, b),
            Conv2d { input, kernel, .. } => Parents::Two(input, kernel),
            Scale(a, _) | Relu(a) | Exp(a) | Log(a) | Sum(a) | Mean(a) | Softmax(a)
            | LogSoftmax(a) | Transpose(a) | Reshape(a) | SuffixSum(a) => Parents::One(a),
            Broadcast { src, .. } | Narrow { src, .. } => Parents::One(src),
        }
    }
}

#[derive(Clone, Copy)]
enum Parents {
    None,
    One(usize),
    Two(usize, usize),
}

impl Parents {
    fn any(self, mut f: impl FnMut(usize) -> bool) -> bool {
        match self {
            Parents::None => false,
            Parents::One(a) => f(a),
            Parents::Two(a, b) => f(a) || f(b),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, keyed by leaf.
///
/// A leaf that is absent has an exactly-zero gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn contains(&self, leaf: Var) -> bool {
        self.grads.contains_key(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = Var> + '_ {
        self.grads.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    /// Removes and returns the gradient of `leaf`.
    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.grads.remove(&leaf)
    }
}

/// Reverse-mode tape. One tape is built per training step.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a constant; it never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    /// Copies the value of `v` into a fresh constant cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.node(v).op, Op::Leaf)
    }

    fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.index() < self.nodes.len()
    }

    fn node(&self, v: Var) -> &Node {
        assert!(self.owns(v), "variable {v:?} does not belong to tape {}", self.id);
        &self.nodes[v.index()]
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.parents().any(|p| self.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(name, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = kernels::zip(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", v, Op::Add(a.index(), b.index()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = kernels::zip(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", v, Op::Sub(a.index(), b.index()))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = kernels::zip(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", v, Op::Mul(a.index(), b.index()))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = kernels::map(self.value(a), |x| x * factor);
        self.push("scale", v, Op::Scale(a.index(), factor))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = kernels::map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", v, Op::Relu(a.index()))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = kernels::map(self.value(a), f64::exp);
        self.push("exp", v, Op::Exp(a.index()))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = kernels::map(self.value(a), f64::ln);
        self.push("log", v, Op::Log(a.index()))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = kernels::sum(self.value(a).values());
        self.push("sum", Tensor::scalar(s), Op::Sum(a.index()))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let m = kernels::sum(x.values()) / x.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a.index()))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = kernels::softmax_rows(self.value(a));
        self.push("softmax", v, Op::Softmax(a.index()))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = kernels::log_softmax_rows(self.value(a));
        self.push("log_softmax", v, Op::LogSoftmax(a.index()))
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::MatMul(a.index(), b.index()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = kernels::transpose(self.value(a))?;
        self.push("transpose", v, Op::Transpose(a.index()))
    }

    /// Broadcasts a vector `[C]` along `axis` of `shape` (where
    /// `shape[axis] == C`), or a scalar to every position when `axis` is `None`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize], axis: Option<usize>) -> Result<Var> {
        let v = kernels::broadcast(self.value(a), shape, axis)?;
        self.push("broadcast", v, Op::Broadcast {
            src: a.index(),
            axis,
        })
    }

    /// Cross-correlation of `[B, C_in, H, W]` with `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geometry =
            kernels::ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let v = kernels::conv2d(self.value(input), self.value(kernel), &geometry);
        self.push("conv2d", v, Op::Conv2d {
            input: input.index(),
            kernel: kernel.index(),
            geometry,
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).narrow(axis, start, len)?;
        self.push("narrow", v, Op::Narrow {
            src: a.index(),
            axis,
            start,
        })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self
            .value(a)
            .reshape(shape)
            .map_err(|e| Error::shape("reshape", e.to_string()))?;
        self.push("reshape", v, Op::Reshape(a.index()))
    }

    /// `out[i] = sum_{k >= i} a[k]` over a 1-D tensor.
    pub fn suffix_sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 1 {
            return Err(Error::shape("suffix_sum", format!("expected 1-D, got {:?}", x.shape())));
        }
        let v = Tensor::vector(kernels::suffix_sum(x.values()));
        self.push("suffix_sum", v, Op::SuffixSum(a.index()))
    }

    /// Gradients of `root` with respect to every trainable leaf.
    pub fn backward_all(&self, root: Var) -> Result<GradientMap> {
        let targets: Vec<Var> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf))
            .map(|i| Var {
                tape: self.id,
                index: i as u32,
            })
            .collect();
        self.backward(root, &targets)
    }

    /// Gradients of the scalar `root` with respect to `targets` only.
    ///
    /// Gradient is propagated only through nodes that depend on some target,
    /// so leaves outside `targets` receive nothing. A target that belongs to
    /// another tape, is a constant, or does not influence `root` is absent
    /// from the result (zero gradient).
    pub fn backward(&self, root: Var, targets: &[Var]) -> Result<GradientMap> {
        if !self.owns(root) {
            return Err(Error::Contract(format!("backward root {root:?} is not on this tape")));
        }
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }

        let mut target_set = BTreeSet::new();
        for &t in targets {
            if !self.owns(t) {
                continue;
            }
            match self.nodes[t.index()].op {
                Op::Leaf => {
                    target_set.insert(t.index());
                }
                Op::Constant => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "backward target {t:?} is not a leaf"
                    )))
                }
            }
        }

        let root_ix = root.index();
        let mut relevant = vec![false; root_ix + 1];
        for i in 0..=root_ix {
            relevant[i] = target_set.contains(&i)
                || self.nodes[i].op.parents().any(|p| relevant[p]);
        }

        let mut out = GradientMap::default();
        if !relevant[root_ix] {
            return Ok(out);
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root_ix + 1];
        adj[root_ix] = Some(vec![1.0]);

        for i in (0..=root_ix).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !relevant[i] {
                continue;
            }
            let node = &self.nodes[i];
            if target_set.contains(&i) {
                out.grads.insert(
                    Var {
                        tape: self.id,
                        index: i as u32,
                    },
                    Tensor::from_parts(node.value.shape().to_vec(), g),
                );
                continue;
            }
            self.propagate(i, &g, &relevant, &mut adj);
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], relevant: &[bool], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |p: usize| &self.nodes[p].value;
        let mut send = |p: usize, contribution: Vec<f64>| {
            if !relevant[p] {
                return;
            }
            match &mut adj[p] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                slot => *slot = Some(contribution),
            }
        };
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if relevant[a] {
                    send(a, g.to_vec());
                }
                if relevant[b] {
                    send(b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if relevant[a] {
                    send(a, g.to_vec());
                }
                if relevant[b] {
                    send(b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if relevant[a] {
                    send(a, kernels::mul_slices(g, val(b).values()));
                }
                if relevant[b] {
                    send(b, kernels::mul_slices(g, val(a).values()));
                }
            }
            Op::Scale(a, c) => send(a, g.iter().map(|x| x * c).collect()),
            Op::Relu(a) => send(
                a,
                g.iter()
                    .zip(val(a).values())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Exp(a) => send(a, kernels::mul_slices(g, node.value.values())),
            Op::Log(a) => send(a, g.iter().zip(val(a).values()).map(|(g, x)| g / x).collect()),
            Op::Sum(a) => send(a, vec![g[0]; val(a).len()]),
            Op::Mean(a) => {
                let n = val(a).len();
                send(a, vec![g[0] / n as f64; n])
            }
            Op::Softmax(a) => send(a, kernels::softmax_backward(&node.value, g)),
            Op::LogSoftmax(a) => send(a, kernels::log_softmax_backward(&node.value, g)),
            Op::MatMul(a, b) => {
                let (ga, gb) = kernels::matmul_backward(val(a), val(b), g, relevant[a], relevant[b]);
                if let Some(ga) = ga {
                    send(a, ga);
                }
                if let Some(gb) = gb {
                    send(b, gb);
                }
            }
            Op::Transpose(a) => send(a, kernels::transpose_slice(g, node.value.shape())),
            Op::Broadcast { src, axis } => {
                send(src, kernels::broadcast_backward(val(src), node.value.shape(), axis, g))
            }
            Op::Conv2d {
                input,
                kernel,
                ref geometry,
            } => {
                let (gx, gk) = kernels::conv2d_backward(
                    val(input),
                    val(kernel),
                    geometry,
                    g,
                    relevant[input],
                    relevant[kernel],
                );
                if let Some(gx) = gx {
                    send(input, gx);
                }
                if let Some(gk) = gk {
                    send(kernel, gk);
                }
            }
            Op::Narrow { src, axis, start } => {
                send(src, kernels::narrow_backward(val(src).shape(), axis, start, node.value.shape(), g))
            }
            Op::Reshape(a) => send(a, g.to_vec()),
            Op::SuffixSum(a) => send(a, kernels::prefix_sum(g)),
        }
    }
}
