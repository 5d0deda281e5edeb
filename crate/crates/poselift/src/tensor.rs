//! Reverse-mode automatic differentiation on dense `f64` tensors.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto a node in a computation DAG.
//! Leaf nodes are parameters (`requires_grad = true`) or constants; interior
//! nodes remember the op that produced them and their parent handles. Calling
//! [`Tensor::backward`] on a scalar walks the DAG once in reverse topological
//! order and accumulates gradients into every reachable parameter leaf.
//!
//! Two properties the rest of the crate leans on:
//!
//! * **Gradient accumulation**: a value consumed by several downstream ops
//!   (residual branches, shared features) receives the *sum* of the incoming
//!   gradients, and each node is processed exactly once.
//! * **Untracked subtrees are free**: an op whose inputs are all constants
//!   (or frozen parameters) produces a plain constant — no parents, no
//!   backward op. Freezing a component therefore removes its whole subtree
//!   from the graph rather than just zeroing its gradients.
//!
//! All arithmetic is `f64`. Shapes are explicit `Vec<usize>` in row-major
//! layout; the layer ops in [`crate::nn`] document their layouts.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{config_err, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient rule for one op. Implementations live next to their forward
/// functions; the engine only calls [`BackwardOp::backward`].
pub(crate) trait BackwardOp {
    /// Human-readable op name, used in error messages.
    fn name(&self) -> &'static str;

    /// Given the gradient flowing into this node, produce the gradient for
    /// each parent (aligned with `node.parents`). `None` for parents that
    /// should receive nothing; untracked parents may be skipped outright.
    fn backward(&self, grad: &[f64], node: &Node) -> Vec<Option<Vec<f64>>>;
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<f64>>,
    /// Leaves only: participate in gradient computation. Toggled to freeze.
    pub(crate) requires_grad: Cell<bool>,
    /// Interior nodes only: true iff any parent is tracked. Fixed at build.
    pub(crate) tracked: bool,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) back: Option<Box<dyn BackwardOp>>,
}

/// Handle to a node in the autodiff graph. Cloning is cheap and aliases the
/// same storage.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("tracked", &self.is_tracked())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                tracked: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                back: None,
            }),
        }
    }

    /// Constant leaf: never receives gradients.
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new_leaf(shape, data, false)
    }

    /// Parameter leaf: accumulates gradients on backward.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new_leaf(shape, data, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![1], vec![v])
    }

    /// Interior node constructor. If no parent is tracked the result
    /// collapses to a constant leaf and the subgraph is dropped.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        back: Box<dyn BackwardOp>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        if !parents.iter().any(Tensor::is_tracked) {
            return Tensor::constant(shape, data);
        }
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                tracked: true,
                grad: RefCell::new(None),
                parents,
                back: Some(back),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_leaf(&self) -> bool {
        self.node.back.is_none()
    }

    /// Whether gradients flow through / into this node.
    pub fn is_tracked(&self) -> bool {
        if self.is_leaf() {
            self.node.requires_grad.get()
        } else {
            self.node.tracked
        }
    }

    /// Borrow the value buffer.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Scalar extraction; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        let d = self.node.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of {} elements", d.len());
        d[0]
    }

    /// Overwrite the value buffer in place (optimizer steps, running stats).
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    /// Toggle gradient tracking on a leaf. Freezing a parameter this way
    /// makes downstream ops treat it as a constant.
    pub fn set_requires_grad(&self, on: bool) {
        debug_assert!(self.is_leaf(), "set_requires_grad on interior node");
        self.node.requires_grad.set(on);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// reachable leaf with `requires_grad`; call [`Tensor::zero_grad`] on the
    /// parameters between steps.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(config_err!(
                "backward requires a scalar, got shape {:?}",
                self.shape()
            ));
        }
        if !self.is_tracked() {
            return Err(config_err!(
                "backward on a value that depends on no tracked parameter"
            ));
        }
        if self.is_leaf() {
            // A bare parameter: d(self)/d(self) = 1.
            accumulate_grad(self, vec![1.0]);
            return Ok(());
        }

        let order = topo_order(self);
        *self.node.grad.borrow_mut() = Some(vec![1.0]);

        // `order` is post-order (inputs before consumers); reversed, every
        // node is processed after all of its consumers have contributed.
        for t in order.iter().rev() {
            if t.is_leaf() {
                continue; // keeps its accumulated grad
            }
            let Some(g) = t.node.grad.borrow_mut().take() else {
                continue; // not reachable from the loss
            };
            let op = t.node.back.as_ref().expect("interior node without op");
            let parent_grads = op.backward(&g, &t.node);
            debug_assert_eq!(parent_grads.len(), t.node.parents.len());
            for (parent, pg) in t.node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if parent.is_tracked() {
                        debug_assert_eq!(
                            pg.len(),
                            parent.len(),
                            "{}: bad grad shape for parent",
                            op.name()
                        );
                        accumulate_grad(parent, pg);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate_grad(t: &Tensor, g: Vec<f64>) {
    let mut slot = t.node.grad.borrow_mut();
    match slot.as_mut() {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Iterative post-order over tracked nodes (recursion would overflow on deep
/// temporal stacks).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = Vec::new();
    visited.insert(root.id());
    stack.push((root.clone(), 0));
    while let Some((t, i)) = stack.pop() {
        if i < t.node.parents.len() {
            let parent = t.node.parents[i].clone();
            stack.push((t, i + 1));
            if parent.is_tracked() && !parent.is_leaf() && visited.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

// ---------------------------------------------------------------------------
// Generic graph ops
// ---------------------------------------------------------------------------

struct AddBack;

impl BackwardOp for AddBack {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, grad: &[f64], node: &Node) -> Vec<Option<Vec<f64>>> {
        node.parents
            .iter()
            .map(|p| p.is_tracked().then(|| grad.to_vec()))
            .collect()
    }
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(config_err!(
            "add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let out: Vec<f64> = {
        let da = a.data();
        let db = b.data();
        da.iter().zip(db.iter()).map(|(x, y)| x + y).collect()
    };
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(AddBack),
    ))
}

struct ScaleBack {
    c: f64,
}

impl BackwardOp for ScaleBack {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, grad: &[f64], _node: &Node) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * self.c).collect())]
    }
}

/// Multiply every element by a constant.
pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let out: Vec<f64> = a.data().iter().map(|x| x * c).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(ScaleBack { c }),
    )
}

struct SumBack;

impl BackwardOp for SumBack {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, grad: &[f64], node: &Node) -> Vec<Option<Vec<f64>>> {
        let n = node.parents[0].len();
        vec![Some(vec![grad[0]; n])]
    }
}

/// Sum of all elements, as a scalar node.
pub fn sum(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().sum();
    Tensor::from_op(vec![1], vec![s], vec![a.clone()], Box::new(SumBack))
}

struct WeightedSumBack {
    w: Vec<f64>,
}

impl BackwardOp for WeightedSumBack {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn backward(&self, grad: &[f64], _node: &Node) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.w.iter().map(|w| w * grad[0]).collect())]
    }
}

/// `sum_i w[i] * a[i]` as a scalar node. Handy for probing gradients of a
/// non-scalar output through an arbitrary linear functional.
pub fn weighted_sum(a: &Tensor, w: &[f64]) -> Result<Tensor> {
    if w.len() != a.len() {
        return Err(config_err!(
            "weighted_sum: {} weights for {} elements",
            w.len(),
            a.len()
        ));
    }
    let s: f64 = a.data().iter().zip(w.iter()).map(|(x, y)| x * y).sum();
    Ok(Tensor::from_op(
        vec![1],
        vec![s],
        vec![a.clone()],
        Box::new(WeightedSumBack { w: w.to_vec() }),
    ))
}

struct ConcatColsBack {
    widths: Vec<usize>,
}

impl BackwardOp for ConcatColsBack {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn backward(&self, grad: &[f64], node: &Node) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.widths.iter().sum();
        let b = grad.len() / total;
        let mut outs = Vec::with_capacity(node.parents.len());
        let mut offset = 0;
        for (parent, &w) in node.parents.iter().zip(&self.widths) {
            if parent.is_tracked() {
                let mut pg = vec![0.0; b * w];
                for row in 0..b {
                    let src = row * total + offset;
                    pg[row * w..(row + 1) * w].copy_from_slice(&grad[src..src + w]);
                }
                outs.push(Some(pg));
            } else {
                outs.push(None);
            }
            offset += w;
        }
        outs
    }
}

/// Concatenate `[B, C_i]` tensors along the feature axis into `[B, sum C_i]`.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(config_err!("concat_cols of zero tensors"));
    }
    let b = match parts[0].shape() {
        [b, _] => *b,
        s => return Err(config_err!("concat_cols expects rank-2 tensors, got {s:?}")),
    };
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        match p.shape() {
            [pb, w] if *pb == b => widths.push(*w),
            s => {
                return Err(config_err!(
                    "concat_cols: incompatible shape {s:?} (batch {b})"
                ))
            }
        }
    }
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0; b * total];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let d = p.data();
        for row in 0..b {
            out[row * total + offset..row * total + offset + w]
                .copy_from_slice(&d[row * w..(row + 1) * w]);
        }
        offset += w;
    }
    Ok(Tensor::from_op(
        vec![b, total],
        out,
        parts.to_vec(),
        Box::new(ConcatColsBack { widths }),
    ))
}

struct SliceTimeBack {
    start: usize,
    full_t: usize,
}

impl BackwardOp for SliceTimeBack {
    fn name(&self) -> &'static str {
        "slice_time"
    }
    fn backward(&self, grad: &[f64], node: &Node) -> Vec<Option<Vec<f64>>> {
        let [b, c, t] = *node.shape.as_slice() else {
            unreachable!()
        };
        let mut pg = vec![0.0; b * c * self.full_t];
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * t;
                let dst = (bi * c + ci) * self.full_t + self.start;
                pg[dst..dst + t].copy_from_slice(&grad[src..src + t]);
            }
        }
        vec![Some(pg)]
    }
}

/// Crop a `[B, C, T]` tensor to frames `start .. start + len`.
pub fn slice_time(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [b, c, t] = *a.shape() else {
        return Err(config_err!(
            "slice_time expects [B, C, T], got {:?}",
            a.shape()
        ));
    };
    if start + len > t {
        return Err(config_err!(
            "slice_time {start}..{} out of range for T = {t}",
            start + len
        ));
    }
    let d = a.data();
    let mut out = vec![0.0; b * c * len];
    for bi in 0..b {
        for ci in 0..c {
            let src = (bi * c + ci) * t + start;
            let dst = (bi * c + ci) * len;
            out[dst..dst + len].copy_from_slice(&d[src..src + len]);
        }
    }
    drop(d);
    Ok(Tensor::from_op(
        vec![b, c, len],
        out,
        vec![a.clone()],
        Box::new(SliceTimeBack { start, full_t: t }),
    ))
}

struct SqueezeTimeBack;

impl BackwardOp for SqueezeTimeBack {
    fn name(&self) -> &'static str {
        "squeeze_time"
    }
    fn backward(&self, grad: &[f64], _node: &Node) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

/// Collapse `[B, C, 1]` to `[B, C]`.
pub fn squeeze_time(a: &Tensor) -> Result<Tensor> {
    let [b, c, t] = *a.shape() else {
        return Err(config_err!(
            "squeeze_time expects [B, C, 1], got {:?}",
            a.shape()
        ));
    };
    if t != 1 {
        return Err(config_err!("squeeze_time on T = {t} (must be 1)"));
    }
    Ok(Tensor::from_op(
        vec![b, c],
        a.to_vec(),
        vec![a.clone()],
        Box::new(SqueezeTimeBack),
    ))
}
