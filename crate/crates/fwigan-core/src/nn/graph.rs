//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] is an eagerly-evaluated tape: every constructor computes its
//! value immediately and records the op. [`Graph::backward`] accumulates
//! numeric gradients into every reachable node; [`Graph::grad_nodes`] instead
//! builds the gradient as new graph nodes, so differentiating through a
//! gradient (as the critic's penalty term requires) is just another backward
//! pass over the extended tape.
//!
//! The op set is closed under differentiation: the symbolic gradient of every
//! op is expressed with ops from the same set.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

use super::kernels;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("backward needs a scalar root, got {len} elements")]
    NonScalarRoot { len: usize },
}

/// Dense array extents. `Knl(o, c)` is an o x c bank of 3x3 kernels.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Shape {
    Vec(usize),
    Mat(usize, usize),
    Chw(usize, usize, usize),
    Knl(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vec(n) => n,
            Shape::Mat(m, n) => m * n,
            Shape::Chw(c, h, w) => c * h * w,
            Shape::Knl(o, c) => o * c * 9,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to a graph node: an id plus the node's shape.
#[derive(Clone, Copy, Debug)]
pub struct Tensor {
    pub id: usize,
    pub shape: Shape,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    AddScalar(usize, T),
    MulScalar(usize, T),
    Recip(usize),
    Sqrt(usize),
    Sum(usize),
    BroadcastTo(usize),
    SumHw(usize),
    BroadcastHw(usize),
    AddBiasC(usize, usize),
    MatVec(usize, usize),
    MatVecT(usize, usize),
    Outer(usize, usize),
    Conv(usize, usize),
    ConvKg(usize, usize),
    FlipSwap(usize),
    Gather(usize, Rc<Vec<usize>>),
    Scatter(usize, Rc<Vec<usize>>),
    MulMask(usize, Rc<Vec<T>>),
    PadHw(usize),
    CropHw(usize),
    Reshape(usize),
}

impl<T> Op<T> {
    fn parents(&self) -> (Option<usize>, Option<usize>) {
        use Op::*;
        match *self {
            Leaf => (None, None),
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBiasC(a, b) | MatVec(a, b) | MatVecT(a, b)
            | Outer(a, b) | Conv(a, b) | ConvKg(a, b) => (Some(a), Some(b)),
            Neg(a) | AddScalar(a, _) | MulScalar(a, _) | Recip(a) | Sqrt(a) | Sum(a)
            | BroadcastTo(a) | SumHw(a) | BroadcastHw(a) | FlipSwap(a) | Gather(a, _)
            | Scatter(a, _) | MulMask(a, _) | PadHw(a) | CropHw(a) | Reshape(a) => {
                (Some(a), None)
            }
        }
    }
}

struct Node<T> {
    op: Op<T>,
    shape: Shape,
    value: Rc<Vec<T>>,
}

struct GraphInner<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

/// Single-threaded differentiation tape (kernels may parallelize
/// internally); independent graphs can live on separate threads.
pub struct Graph<T: Scalar> {
    inner: RefCell<GraphInner<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: RefCell::new(GraphInner { nodes: Vec::new(), grads: Vec::new() }),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, op: Op<T>, shape: Shape, value: Vec<T>) -> Tensor {
        debug_assert_eq!(value.len(), shape.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, shape, value: Rc::new(value) });
        inner.grads.push(None);
        Tensor { id, shape }
    }

    fn push_shared(&self, shape: Shape, value: Rc<Vec<T>>) -> Tensor {
        debug_assert_eq!(value.len(), shape.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op: Op::Leaf, shape, value });
        inner.grads.push(None);
        Tensor { id, shape }
    }

    fn val(&self, id: usize) -> Rc<Vec<T>> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    /// The node's value (shared, copy-free).
    pub fn value(&self, t: Tensor) -> Rc<Vec<T>> {
        self.val(t.id)
    }

    /// Value of a single-element node.
    pub fn scalar(&self, t: Tensor) -> T {
        assert_eq!(t.shape.len(), 1, "scalar() on non-scalar node");
        self.val(t.id)[0]
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, t: Tensor) -> Option<Vec<T>> {
        self.inner.borrow().grads[t.id].clone()
    }

    /// Moves the gradient out (avoids copying large parameter grads).
    pub fn take_grad(&self, t: Tensor) -> Option<Vec<T>> {
        self.inner.borrow_mut().grads[t.id].take()
    }

    /// Clears all accumulated gradients.
    pub fn zero_grads(&self) {
        for g in self.inner.borrow_mut().grads.iter_mut() {
            *g = None;
        }
    }

    // ---- leaves ----

    /// Constant leaf (participates in values, never in gradients).
    pub fn constant(&self, value: Vec<T>, shape: Shape) -> Tensor {
        self.push(Op::Leaf, shape, value)
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Vec<T>, shape: Shape) -> Tensor {
        self.push(Op::Leaf, shape, value)
    }

    /// Differentiable leaf sharing its storage with the caller (used to
    /// attach parameter stores without copying).
    pub fn leaf_shared(&self, value: Rc<Vec<T>>, shape: Shape) -> Tensor {
        self.push_shared(shape, value)
    }

    // ---- elementwise ----

    pub fn add(&self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "add shape mismatch");
        let (va, vb) = (self.val(a.id), self.val(b.id));
        let v = va.iter().zip(vb.iter()).map(|(&x, &y)| x + y).collect();
        self.push(Op::Add(a.id, b.id), a.shape, v)
    }

    pub fn sub(&self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "sub shape mismatch");
        let (va, vb) = (self.val(a.id), self.val(b.id));
        let v = va.iter().zip(vb.iter()).map(|(&x, &y)| x - y).collect();
        self.push(Op::Sub(a.id, b.id), a.shape, v)
    }

    pub fn mul(&self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "mul shape mismatch");
        let (va, vb) = (self.val(a.id), self.val(b.id));
        let v = va.iter().zip(vb.iter()).map(|(&x, &y)| x * y).collect();
        self.push(Op::Mul(a.id, b.id), a.shape, v)
    }

    pub fn neg(&self, a: Tensor) -> Tensor {
        let v = self.val(a.id).iter().map(|&x| -x).collect();
        self.push(Op::Neg(a.id), a.shape, v)
    }

    pub fn add_scalar(&self, a: Tensor, s: T) -> Tensor {
        let v = self.val(a.id).iter().map(|&x| x + s).collect();
        self.push(Op::AddScalar(a.id, s), a.shape, v)
    }

    pub fn mul_scalar(&self, a: Tensor, s: T) -> Tensor {
        let v = self.val(a.id).iter().map(|&x| x * s).collect();
        self.push(Op::MulScalar(a.id, s), a.shape, v)
    }

    pub fn recip(&self, a: Tensor) -> Tensor {
        let v = self.val(a.id).iter().map(|&x| T::one() / x).collect();
        self.push(Op::Recip(a.id), a.shape, v)
    }

    pub fn sqrt(&self, a: Tensor) -> Tensor {
        let v = self.val(a.id).iter().map(|&x| x.sqrt()).collect();
        self.push(Op::Sqrt(a.id), a.shape, v)
    }

    // ---- reductions and broadcasts ----

    pub fn sum(&self, a: Tensor) -> Tensor {
        let mut s = T::zero();
        for &x in self.val(a.id).iter() {
            s += x;
        }
        self.push(Op::Sum(a.id), Shape::Vec(1), vec![s])
    }

    pub fn broadcast_to(&self, a: Tensor, shape: Shape) -> Tensor {
        assert_eq!(a.shape.len(), 1, "broadcast source must be scalar");
        let s = self.val(a.id)[0];
        self.push(Op::BroadcastTo(a.id), shape, vec![s; shape.len()])
    }

    /// Per-channel spatial sum: [c,h,w] -> [c].
    pub fn sum_hw(&self, a: Tensor) -> Tensor {
        let Shape::Chw(c, h, w) = a.shape else { panic!("sum_hw needs an image") };
        let va = self.val(a.id);
        let mut v = vec![T::zero(); c];
        for ch in 0..c {
            for &x in &va[ch * h * w..(ch + 1) * h * w] {
                v[ch] += x;
            }
        }
        self.push(Op::SumHw(a.id), Shape::Vec(c), v)
    }

    /// Per-channel broadcast: [c] -> [c,h,w].
    pub fn broadcast_hw(&self, a: Tensor, shape: Shape) -> Tensor {
        let Shape::Chw(c, h, w) = shape else { panic!("broadcast_hw target must be an image") };
        assert_eq!(a.shape, Shape::Vec(c), "broadcast_hw channel mismatch");
        let va = self.val(a.id);
        let mut v = vec![T::zero(); c * h * w];
        for ch in 0..c {
            v[ch * h * w..(ch + 1) * h * w].fill(va[ch]);
        }
        self.push(Op::BroadcastHw(a.id), shape, v)
    }

    /// x[c,h,w] + b[c] broadcast over spatial dims.
    pub fn add_bias_c(&self, x: Tensor, b: Tensor) -> Tensor {
        let Shape::Chw(c, h, w) = x.shape else { panic!("add_bias_c needs an image") };
        assert_eq!(b.shape, Shape::Vec(c), "bias length mismatch");
        let (vx, vb) = (self.val(x.id), self.val(b.id));
        let mut v = vx.as_ref().clone();
        for ch in 0..c {
            for t in &mut v[ch * h * w..(ch + 1) * h * w] {
                *t += vb[ch];
            }
        }
        self.push(Op::AddBiasC(x.id, b.id), x.shape, v)
    }

    // ---- dense family ----

    pub fn matvec(&self, w: Tensor, x: Tensor) -> Tensor {
        let Shape::Mat(m, n) = w.shape else { panic!("matvec needs a matrix") };
        assert_eq!(x.shape.len(), n, "matvec dim mismatch");
        let mut v = vec![T::zero(); m];
        kernels::matvec_acc(&self.val(w.id), m, n, &self.val(x.id), &mut v);
        self.push(Op::MatVec(w.id, x.id), Shape::Vec(m), v)
    }

    pub fn matvec_t(&self, w: Tensor, a: Tensor) -> Tensor {
        let Shape::Mat(m, n) = w.shape else { panic!("matvec_t needs a matrix") };
        assert_eq!(a.shape.len(), m, "matvec_t dim mismatch");
        let mut v = vec![T::zero(); n];
        kernels::matvec_t_acc(&self.val(w.id), m, n, &self.val(a.id), &mut v);
        self.push(Op::MatVecT(w.id, a.id), Shape::Vec(n), v)
    }

    pub fn outer(&self, a: Tensor, b: Tensor) -> Tensor {
        let (m, n) = (a.shape.len(), b.shape.len());
        let mut v = vec![T::zero(); m * n];
        kernels::outer_acc(&self.val(a.id), &self.val(b.id), &mut v);
        self.push(Op::Outer(a.id, b.id), Shape::Mat(m, n), v)
    }

    // ---- convolution family ----

    /// 3x3 same-padding cross-correlation of x[c,h,w] with k[o,c,3,3].
    pub fn conv3x3(&self, x: Tensor, k: Tensor) -> Tensor {
        let Shape::Chw(c, h, w) = x.shape else { panic!("conv3x3 needs an image") };
        let Shape::Knl(o, kc) = k.shape else { panic!("conv3x3 needs a kernel bank") };
        assert_eq!(kc, c, "conv3x3 channel mismatch");
        let mut v = vec![T::zero(); o * h * w];
        kernels::conv3x3_acc(&self.val(x.id), c, h, w, &self.val(k.id), o, &mut v);
        self.push(Op::Conv(x.id, k.id), Shape::Chw(o, h, w), v)
    }

    /// Kernel-gradient of the correlation: patches of x contracted with g.
    pub fn conv_kg(&self, x: Tensor, g: Tensor) -> Tensor {
        let Shape::Chw(c, h, w) = x.shape else { panic!("conv_kg needs an image") };
        let Shape::Chw(o, gh, gw) = g.shape else { panic!("conv_kg needs an upstream image") };
        assert_eq!((gh, gw), (h, w), "conv_kg spatial mismatch");
        let mut v = vec![T::zero(); o * c * 9];
        kernels::conv_kg_acc(&self.val(x.id), c, h, w, &self.val(g.id), o, &mut v);
        self.push(Op::ConvKg(x.id, g.id), Shape::Knl(o, c), v)
    }

    /// Kernel transform k[o,c,i,j] -> k[c,o,2-i,2-j].
    pub fn flip_swap(&self, k: Tensor) -> Tensor {
        let Shape::Knl(o, c) = k.shape else { panic!("flip_swap needs a kernel bank") };
        let v = kernels::flip_swap(&self.val(k.id), o, c);
        self.push(Op::FlipSwap(k.id), Shape::Knl(c, o), v)
    }

    // ---- structural ----

    /// y[p] = x[idx[p]] with constant indices.
    pub fn gather(&self, x: Tensor, idx: Rc<Vec<usize>>, shape: Shape) -> Tensor {
        let vx = self.val(x.id);
        assert_eq!(idx.len(), shape.len());
        let v = idx.iter().map(|&i| vx[i]).collect();
        self.push(Op::Gather(x.id, idx), shape, v)
    }

    /// y[idx[p]] += x[p] into a zeroed buffer of `shape`.
    pub fn scatter(&self, x: Tensor, idx: Rc<Vec<usize>>, shape: Shape) -> Tensor {
        let vx = self.val(x.id);
        assert_eq!(idx.len(), vx.len());
        let mut v = vec![T::zero(); shape.len()];
        for (p, &i) in idx.iter().enumerate() {
            v[i] += vx[p];
        }
        self.push(Op::Scatter(x.id, idx), shape, v)
    }

    /// Elementwise product with a constant mask.
    pub fn mul_mask(&self, x: Tensor, mask: Rc<Vec<T>>) -> Tensor {
        assert_eq!(mask.len(), x.shape.len());
        let v = self.val(x.id).iter().zip(mask.iter()).map(|(&a, &m)| a * m).collect();
        self.push(Op::MulMask(x.id, mask), x.shape, v)
    }

    /// Zero-pads the trailing (bottom/right) edges to [c,h2,w2].
    pub fn pad_hw(&self, x: Tensor, h2: usize, w2: usize) -> Tensor {
        let Shape::Chw(c, h, w) = x.shape else { panic!("pad_hw needs an image") };
        assert!(h2 >= h && w2 >= w, "pad_hw target smaller than source");
        let v = kernels::pad_hw(&self.val(x.id), c, h, w, h2, w2);
        self.push(Op::PadHw(x.id), Shape::Chw(c, h2, w2), v)
    }

    /// Keeps the leading [c,h,w] corner.
    pub fn crop_hw(&self, x: Tensor, h: usize, w: usize) -> Tensor {
        let Shape::Chw(c, h2, w2) = x.shape else { panic!("crop_hw needs an image") };
        assert!(h2 >= h && w2 >= w, "crop_hw target larger than source");
        let v = kernels::crop_hw(&self.val(x.id), c, h2, w2, h, w);
        self.push(Op::CropHw(x.id), Shape::Chw(c, h, w), v)
    }

    pub fn reshape(&self, x: Tensor, shape: Shape) -> Tensor {
        assert_eq!(x.shape.len(), shape.len(), "reshape length mismatch");
        let v = self.val(x.id).as_ref().clone();
        self.push(Op::Reshape(x.id), shape, v)
    }

    // ---- composite layers ----

    /// 2x2 stride-2 max pooling; the argmax routing is recorded as constant
    /// indices, which is also what its gradient-of-gradient sees.
    pub fn maxpool2(&self, x: Tensor) -> Tensor {
        let Shape::Chw(c, h, w) = x.shape else { panic!("maxpool2 needs an image") };
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even dims");
        let (idx, _) = kernels::maxpool2_argmax(&self.val(x.id), c, h, w);
        self.gather(x, Rc::new(idx), Shape::Chw(c, h / 2, w / 2))
    }

    /// x>0 ? x : slope*x, with the derivative at exactly 0 defined as slope.
    pub fn leaky_relu(&self, x: Tensor, slope: T) -> Tensor {
        let vx = self.val(x.id);
        let mask: Vec<T> = vx.iter().map(|&v| if v > T::zero() { T::one() } else { slope }).collect();
        self.mul_mask(x, Rc::new(mask))
    }

    /// Correlation plus per-output-channel bias.
    pub fn conv2d(&self, x: Tensor, k: Tensor, b: Tensor) -> Tensor {
        let y = self.conv3x3(x, k);
        self.add_bias_c(y, b)
    }

    /// W x + b.
    pub fn dense(&self, x: Tensor, w: Tensor, b: Tensor) -> Tensor {
        let y = self.matvec(w, x);
        self.add(y, b)
    }

    // ---- backward ----

    /// Ids of all nodes the root depends on (root included).
    fn ancestors(inner: &GraphInner<T>, root: usize) -> Vec<bool> {
        let mut mark = vec![false; inner.nodes.len()];
        mark[root] = true;
        for id in (0..=root).rev() {
            if !mark[id] {
                continue;
            }
            let (p, q) = inner.nodes[id].op.parents();
            if let Some(p) = p {
                mark[p] = true;
            }
            if let Some(q) = q {
                mark[q] = true;
            }
        }
        mark
    }

    /// Ids of all nodes that depend on at least one target (targets included).
    fn dependents(inner: &GraphInner<T>, targets: &[Tensor]) -> Vec<bool> {
        let mut mark = vec![false; inner.nodes.len()];
        for t in targets {
            mark[t.id] = true;
        }
        for id in 0..inner.nodes.len() {
            if mark[id] {
                continue;
            }
            let (p, q) = inner.nodes[id].op.parents();
            let hit = p.map(|p| mark[p]).unwrap_or(false) || q.map(|q| mark[q]).unwrap_or(false);
            if hit {
                mark[id] = true;
            }
        }
        mark
    }

    /// Numeric reverse sweep from a scalar root, accumulating gradients into
    /// every node the root depends on. Repeated calls accumulate.
    pub fn backward(&self, root: Tensor) -> Result<(), NnError> {
        if root.shape.len() != 1 {
            return Err(NnError::NonScalarRoot { len: root.shape.len() });
        }
        let active = Self::ancestors(&self.inner.borrow(), root.id);
        self.backward_sweep(root, &active);
        Ok(())
    }

    /// Numeric reverse sweep restricted to paths from the root to the given
    /// targets. Gradients on those paths match a full `backward` exactly;
    /// off-path nodes are skipped to save work.
    pub fn backward_wrt(&self, root: Tensor, targets: &[Tensor]) -> Result<(), NnError> {
        if root.shape.len() != 1 {
            return Err(NnError::NonScalarRoot { len: root.shape.len() });
        }
        let active = {
            let inner = self.inner.borrow();
            let anc = Self::ancestors(&inner, root.id);
            let dep = Self::dependents(&inner, targets);
            anc.iter().zip(&dep).map(|(&a, &d)| a && d).collect::<Vec<bool>>()
        };
        self.backward_sweep(root, &active);
        Ok(())
    }

    fn backward_sweep(&self, root: Tensor, active: &[bool]) {
        // The sweep runs on fresh buffers so gradients accumulated by
        // earlier backward calls are never re-propagated; each node's sweep
        // gradient folds into persistent storage once it is finished.
        let n = self.inner.borrow().nodes.len();
        let mut sweep: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        sweep[root.id] = Some(vec![T::one()]);
        for id in (0..=root.id).rev() {
            if !active[id] {
                continue;
            }
            let Some(g) = sweep[id].take() else { continue };
            self.push_to_parents(id, &g, active, &mut sweep);
            let mut inner = self.inner.borrow_mut();
            match &mut inner.grads[id] {
                slot @ None => *slot = Some(g),
                Some(acc) => {
                    for (o, x) in acc.iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
        }
    }

    /// Adds `g` into a parent's sweep gradient buffer.
    fn acc_into(
        &self,
        sweep: &mut [Option<Vec<T>>],
        parent: usize,
        f: impl FnOnce(&mut [T]),
    ) {
        let len = self.inner.borrow().nodes[parent].shape.len();
        let buf = sweep[parent].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }

    fn push_to_parents(
        &self,
        id: usize,
        g: &[T],
        active: &[bool],
        sweep: &mut [Option<Vec<T>>],
    ) {
        let (op_a, op_b, shape, value) = {
            let inner = self.inner.borrow();
            let n = &inner.nodes[id];
            let (a, b) = n.op.parents();
            (a, b, n.shape, Rc::clone(&n.value))
        };
        let want_a = op_a.map(|p| active[p]).unwrap_or(false);
        let want_b = op_b.map(|p| active[p]).unwrap_or(false);
        if !want_a && !want_b {
            return;
        }
        // Clone op metadata we need without holding the borrow.
        enum K<T> {
            Simple,
            Scalars(T),
            Mask(Rc<Vec<T>>),
            Idx(Rc<Vec<usize>>),
        }
        let (tag, aux): (u8, K<T>) = {
            let inner = self.inner.borrow();
            match &inner.nodes[id].op {
                Op::Leaf => (0, K::Simple),
                Op::Add(..) => (1, K::Simple),
                Op::Sub(..) => (2, K::Simple),
                Op::Mul(..) => (3, K::Simple),
                Op::Neg(..) => (4, K::Simple),
                Op::AddScalar(_, s) => (5, K::Scalars(*s)),
                Op::MulScalar(_, s) => (6, K::Scalars(*s)),
                Op::Recip(..) => (7, K::Simple),
                Op::Sqrt(..) => (8, K::Simple),
                Op::Sum(..) => (9, K::Simple),
                Op::BroadcastTo(..) => (10, K::Simple),
                Op::SumHw(..) => (11, K::Simple),
                Op::BroadcastHw(..) => (12, K::Simple),
                Op::AddBiasC(..) => (13, K::Simple),
                Op::MatVec(..) => (14, K::Simple),
                Op::MatVecT(..) => (15, K::Simple),
                Op::Outer(..) => (16, K::Simple),
                Op::Conv(..) => (17, K::Simple),
                Op::ConvKg(..) => (18, K::Simple),
                Op::FlipSwap(..) => (19, K::Simple),
                Op::Gather(_, idx) => (20, K::Idx(Rc::clone(idx))),
                Op::Scatter(_, idx) => (21, K::Idx(Rc::clone(idx))),
                Op::MulMask(_, m) => (22, K::Mask(Rc::clone(m))),
                Op::PadHw(..) => (23, K::Simple),
                Op::CropHw(..) => (24, K::Simple),
                Op::Reshape(..) => (25, K::Simple),
            }
        };
        let pa = op_a.unwrap_or(usize::MAX);
        let pb = op_b.unwrap_or(usize::MAX);
        let shape_of = |p: usize| self.inner.borrow().nodes[p].shape;
        match tag {
            0 => {}
            1 => {
                // Add
                if want_a {
                    self.acc_into(sweep, pa, |buf| {
                        for (o, &x) in buf.iter_mut().zip(g) {
                            *o += x;
                        }
                    });
                }
                if want_b {
                    self.acc_into(sweep, pb, |buf| {
                        for (o, &x) in buf.iter_mut().zip(g) {
                            *o += x;
                        }
                    });
                }
            }
            2 => {
                // Sub
                if want_a {
                    self.acc_into(sweep, pa, |buf| {
                        for (o, &x) in buf.iter_mut().zip(g) {
                            *o += x;
                        }
                    });
                }
                if want_b {
                    self.acc_into(sweep, pb, |buf| {
                        for (o, &x) in buf.iter_mut().zip(g) {
                            *o -= x;
                        }
                    });
                }
            }
            3 => {
                // Mul
                if want_a {
                    let vb = self.val(pb);
                    self.acc_into(sweep, pa, |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * vb[i];
                        }
                    });
                }
                if want_b {
                    let va = self.val(pa);
                    self.acc_into(sweep, pb, |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * va[i];
                        }
                    });
                }
            }
            4 => {
                if want_a {
                    self.acc_into(sweep, pa, |buf| {
                        for (o, &x) in buf.iter_mut().zip(g) {
                            *o -= x;
                        }
                    });
                }
            }
            5 => {
                if want_a {
                    self.acc_into(sweep, pa, |buf| {
                        for (o, &x) in buf.iter_mut().zip(g) {
                            *o += x;
                        }
                    });
                }
            }
            6 => {
                let K::Scalars(s) = aux else { unreachable!() };
                if want_a {
                    self.acc_into(sweep, pa, |buf| {
                        for (o, &x) in buf.iter_mut().zip(g) {
                            *o += x * s;
                        }
                    });
                }
            }
            7 => {
                // Recip: d/da (1/a) = -1/a^2 = -out^2
                if want_a {
                    let out = value;
                    self.acc_into(sweep, pa, |buf| {
                        for i in 0..buf.len() {
                            buf[i] -= g[i] * out[i] * out[i];
                        }
                    });
                }
            }
            8 => {
                // Sqrt: d/da sqrt(a) = 1/(2 out)
                if want_a {
                    let out = value;
                    let half = T::fl(0.5);
                    self.acc_into(sweep, pa, |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * half / out[i];
                        }
                    });
                }
            }
            9 => {
                if want_a {
                    let s = g[0];
                    self.acc_into(sweep, pa, |buf| {
                        for o in buf.iter_mut() {
                            *o += s;
                        }
                    });
                }
            }
            10 => {
                if want_a {
                    let mut s = T::zero();
                    for &x in g {
                        s += x;
                    }
                    self.acc_into(sweep, pa, |buf| buf[0] += s);
                }
            }
            11 => {
                // SumHw: parent image [c,h,w], g is [c]
                if want_a {
                    let Shape::Chw(c, h, w) = shape_of(pa) else { unreachable!() };
                    self.acc_into(sweep, pa, |buf| {
                        for ch in 0..c {
                            for o in &mut buf[ch * h * w..(ch + 1) * h * w] {
                                *o += g[ch];
                            }
                        }
                    });
                }
            }
            12 => {
                // BroadcastHw: parent [c], g is [c,h,w]
                if want_a {
                    let Shape::Chw(c, h, w) = shape else { unreachable!() };
                    self.acc_into(sweep, pa, |buf| {
                        for ch in 0..c {
                            let mut s = T::zero();
                            for &x in &g[ch * h * w..(ch + 1) * h * w] {
                                s += x;
                            }
                            buf[ch] += s;
                        }
                    });
                }
            }
            13 => {
                // AddBiasC{x, b}
                if want_a {
                    self.acc_into(sweep, pa, |buf| {
                        for (o, &x) in buf.iter_mut().zip(g) {
                            *o += x;
                        }
                    });
                }
                if want_b {
                    let Shape::Chw(c, h, w) = shape else { unreachable!() };
                    self.acc_into(sweep, pb, |buf| {
                        for ch in 0..c {
                            let mut s = T::zero();
                            for &x in &g[ch * h * w..(ch + 1) * h * w] {
                                s += x;
                            }
                            buf[ch] += s;
                        }
                    });
                }
            }
            14 => {
                // MatVec{w, x}
                let Shape::Mat(m, n) = shape_of(pa) else { unreachable!() };
                if want_a {
                    let vx = self.val(pb);
                    self.acc_into(sweep, pa, |buf| kernels::outer_acc(g, &vx, buf));
                }
                if want_b {
                    let vw = self.val(pa);
                    self.acc_into(sweep, pb, |buf| kernels::matvec_t_acc(&vw, m, n, g, buf));
                }
            }
            15 => {
                // MatVecT{w, a}
                let Shape::Mat(m, n) = shape_of(pa) else { unreachable!() };
                if want_a {
                    let va = self.val(pb);
                    self.acc_into(sweep, pa, |buf| kernels::outer_acc(&va, g, buf));
                }
                if want_b {
                    let vw = self.val(pa);
                    self.acc_into(sweep, pb, |buf| kernels::matvec_acc(&vw, m, n, g, buf));
                }
            }
            16 => {
                // Outer{a, b}: upstream G is [m,n]
                let m = shape_of(pa).len();
                let n = shape_of(pb).len();
                if want_a {
                    let vb = self.val(pb);
                    self.acc_into(sweep, pa, |buf| kernels::matvec_acc(g, m, n, &vb, buf));
                }
                if want_b {
                    let va = self.val(pa);
                    self.acc_into(sweep, pb, |buf| kernels::matvec_t_acc(g, m, n, &va, buf));
                }
            }
            17 => {
                // Conv{x, k}
                let Shape::Chw(c, h, w) = shape_of(pa) else { unreachable!() };
                let Shape::Knl(o, _) = shape_of(pb) else { unreachable!() };
                if want_a {
                    let vk = self.val(pb);
                    self.acc_into(sweep, pa, |buf| kernels::conv_t_acc(g, o, h, w, &vk, c, buf));
                }
                if want_b {
                    let vx = self.val(pa);
                    self.acc_into(sweep, pb, |buf| kernels::conv_kg_acc(&vx, c, h, w, g, o, buf));
                }
            }
            18 => {
                // ConvKg{x, g2}: upstream U is [o,c,3,3]
                let Shape::Chw(c, h, w) = shape_of(pa) else { unreachable!() };
                let Shape::Chw(o, _, _) = shape_of(pb) else { unreachable!() };
                if want_a {
                    let vg2 = self.val(pb);
                    self.acc_into(sweep, pa, |buf| kernels::conv_t_acc(&vg2, o, h, w, g, c, buf));
                }
                if want_b {
                    let vx = self.val(pa);
                    self.acc_into(sweep, pb, |buf| kernels::conv3x3_acc(&vx, c, h, w, g, o, buf));
                }
            }
            19 => {
                // FlipSwap: self-inverse up to the (o,c) swap
                if want_a {
                    let Shape::Knl(o, c) = shape else { unreachable!() };
                    // node shape is [c_out=c_parent_in]; parent is [o_p, c_p]
                    // with o_p = c, c_p = o here.
                    let back = kernels::flip_swap(g, o, c);
                    self.acc_into(sweep, pa, |buf| {
                        for (t, &x) in buf.iter_mut().zip(&back) {
                            *t += x;
                        }
                    });
                }
            }
            20 => {
                let K::Idx(idx) = aux else { unreachable!() };
                if want_a {
                    self.acc_into(sweep, pa, |buf| {
                        for (p, &i) in idx.iter().enumerate() {
                            buf[i] += g[p];
                        }
                    });
                }
            }
            21 => {
                let K::Idx(idx) = aux else { unreachable!() };
                if want_a {
                    self.acc_into(sweep, pa, |buf| {
                        for (p, &i) in idx.iter().enumerate() {
                            buf[p] += g[i];
                        }
                    });
                }
            }
            22 => {
                let K::Mask(mask) = aux else { unreachable!() };
                if want_a {
                    self.acc_into(sweep, pa, |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * mask[i];
                        }
                    });
                }
            }
            23 => {
                // PadHw: parent [c,h,w], node [c,h2,w2]
                if want_a {
                    let Shape::Chw(c, h2, w2) = shape else { unreachable!() };
                    let Shape::Chw(_, h, w) = shape_of(pa) else { unreachable!() };
                    self.acc_into(sweep, pa, |buf| kernels::crop_hw_acc(g, c, h2, w2, h, w, buf));
                }
            }
            24 => {
                // CropHw: parent [c,h2,w2], node [c,h,w]
                if want_a {
                    let Shape::Chw(c, h, w) = shape else { unreachable!() };
                    let Shape::Chw(_, h2, w2) = shape_of(pa) else { unreachable!() };
                    self.acc_into(sweep, pa, |buf| kernels::pad_hw_acc(g, c, h, w, h2, w2, buf));
                }
            }
            25 => {
                if want_a {
                    self.acc_into(sweep, pa, |buf| {
                        for (o, &x) in buf.iter_mut().zip(g) {
                            *o += x;
                        }
                    });
                }
            }
            _ => unreachable!(),
        }
    }

    // ---- symbolic backward ----

    /// Builds gradient nodes d(root)/d(target) into the graph itself, so the
    /// result can be differentiated again. Returns one tensor per target
    /// (None where the root does not depend on the target).
    pub fn grad_nodes(&self, root: Tensor, targets: &[Tensor]) -> Vec<Option<Tensor>> {
        assert_eq!(root.shape.len(), 1, "grad_nodes needs a scalar root");
        let active: Vec<bool> = {
            let inner = self.inner.borrow();
            let anc = Self::ancestors(&inner, root.id);
            let dep = Self::dependents(&inner, targets);
            anc.iter().zip(&dep).map(|(&a, &d)| a && d).collect()
        };
        let mut sym: Vec<Option<Tensor>> = vec![None; root.id + 1];
        let seed = self.constant(vec![T::one()], Shape::Vec(1));
        sym[root.id] = Some(seed);
        let add_sym = |sym: &mut Vec<Option<Tensor>>, p: usize, t: Tensor| {
            sym[p] = Some(match sym[p] {
                None => t,
                Some(prev) => self.add(prev, t),
            });
        };
        for id in (0..=root.id).rev() {
            if !active[id] {
                continue;
            }
            let Some(g) = sym[id] else { continue };
            let (op_snapshot, shape) = {
                let inner = self.inner.borrow();
                let n = &inner.nodes[id];
                // Clone the op's ids/aux so the borrow drops before we build.
                let op = match &n.op {
                    Op::Leaf => Op::Leaf,
                    Op::Add(a, b) => Op::Add(*a, *b),
                    Op::Sub(a, b) => Op::Sub(*a, *b),
                    Op::Mul(a, b) => Op::Mul(*a, *b),
                    Op::Neg(a) => Op::Neg(*a),
                    Op::AddScalar(a, s) => Op::AddScalar(*a, *s),
                    Op::MulScalar(a, s) => Op::MulScalar(*a, *s),
                    Op::Recip(a) => Op::Recip(*a),
                    Op::Sqrt(a) => Op::Sqrt(*a),
                    Op::Sum(a) => Op::Sum(*a),
                    Op::BroadcastTo(a) => Op::BroadcastTo(*a),
                    Op::SumHw(a) => Op::SumHw(*a),
                    Op::BroadcastHw(a) => Op::BroadcastHw(*a),
                    Op::AddBiasC(a, b) => Op::AddBiasC(*a, *b),
                    Op::MatVec(a, b) => Op::MatVec(*a, *b),
                    Op::MatVecT(a, b) => Op::MatVecT(*a, *b),
                    Op::Outer(a, b) => Op::Outer(*a, *b),
                    Op::Conv(a, b) => Op::Conv(*a, *b),
                    Op::ConvKg(a, b) => Op::ConvKg(*a, *b),
                    Op::FlipSwap(a) => Op::FlipSwap(*a),
                    Op::Gather(a, idx) => Op::Gather(*a, Rc::clone(idx)),
                    Op::Scatter(a, idx) => Op::Scatter(*a, Rc::clone(idx)),
                    Op::MulMask(a, m) => Op::MulMask(*a, Rc::clone(m)),
                    Op::PadHw(a) => Op::PadHw(*a),
                    Op::CropHw(a) => Op::CropHw(*a),
                    Op::Reshape(a) => Op::Reshape(*a),
                };
                (op, n.shape)
            };
            let t_of = |p: usize| Tensor { id: p, shape: self.inner.borrow().nodes[p].shape };
            let this = Tensor { id, shape };
            match op_snapshot {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if active[a] {
                        add_sym(&mut sym, a, g);
                    }
                    if active[b] {
                        add_sym(&mut sym, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if active[a] {
                        add_sym(&mut sym, a, g);
                    }
                    if active[b] {
                        let n = self.neg(g);
                        add_sym(&mut sym, b, n);
                    }
                }
                Op::Mul(a, b) => {
                    if active[a] {
                        let t = self.mul(g, t_of(b));
                        add_sym(&mut sym, a, t);
                    }
                    if active[b] {
                        let t = self.mul(g, t_of(a));
                        add_sym(&mut sym, b, t);
                    }
                }
                Op::Neg(a) => {
                    if active[a] {
                        let t = self.neg(g);
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::AddScalar(a, _) => {
                    if active[a] {
                        add_sym(&mut sym, a, g);
                    }
                }
                Op::MulScalar(a, s) => {
                    if active[a] {
                        let t = self.mul_scalar(g, s);
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::Recip(a) => {
                    if active[a] {
                        let r2 = self.mul(this, this);
                        let t = self.neg(self.mul(g, r2));
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::Sqrt(a) => {
                    if active[a] {
                        let inv = self.recip(this);
                        let t = self.mul_scalar(self.mul(g, inv), T::fl(0.5));
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::Sum(a) => {
                    if active[a] {
                        let t = self.broadcast_to(g, t_of(a).shape);
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::BroadcastTo(a) => {
                    if active[a] {
                        let t = self.sum(g);
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::SumHw(a) => {
                    if active[a] {
                        let t = self.broadcast_hw(g, t_of(a).shape);
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::BroadcastHw(a) => {
                    if active[a] {
                        let t = self.sum_hw(g);
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::AddBiasC(a, b) => {
                    if active[a] {
                        add_sym(&mut sym, a, g);
                    }
                    if active[b] {
                        let t = self.sum_hw(g);
                        add_sym(&mut sym, b, t);
                    }
                }
                Op::MatVec(w, x) => {
                    if active[w] {
                        let t = self.outer(g, t_of(x));
                        add_sym(&mut sym, w, t);
                    }
                    if active[x] {
                        let t = self.matvec_t(t_of(w), g);
                        add_sym(&mut sym, x, t);
                    }
                }
                Op::MatVecT(w, a) => {
                    if active[w] {
                        let t = self.outer(t_of(a), g);
                        add_sym(&mut sym, w, t);
                    }
                    if active[a] {
                        let t = self.matvec(t_of(w), g);
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::Outer(a, b) => {
                    if active[a] {
                        let t = self.matvec(g, t_of(b));
                        add_sym(&mut sym, a, t);
                    }
                    if active[b] {
                        let t = self.matvec_t(g, t_of(a));
                        add_sym(&mut sym, b, t);
                    }
                }
                Op::Conv(x, k) => {
                    if active[x] {
                        let kf = self.flip_swap(t_of(k));
                        let t = self.conv3x3(g, kf);
                        add_sym(&mut sym, x, t);
                    }
                    if active[k] {
                        let t = self.conv_kg(t_of(x), g);
                        add_sym(&mut sym, k, t);
                    }
                }
                Op::ConvKg(x, g2) => {
                    if active[x] {
                        let uf = self.flip_swap(g);
                        let t = self.conv3x3(t_of(g2), uf);
                        add_sym(&mut sym, x, t);
                    }
                    if active[g2] {
                        let t = self.conv3x3(t_of(x), g);
                        add_sym(&mut sym, g2, t);
                    }
                }
                Op::FlipSwap(a) => {
                    if active[a] {
                        let t = self.flip_swap(g);
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::Gather(a, idx) => {
                    if active[a] {
                        let t = self.scatter(g, idx, t_of(a).shape);
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::Scatter(a, idx) => {
                    if active[a] {
                        let t = self.gather(g, idx, t_of(a).shape);
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::MulMask(a, m) => {
                    if active[a] {
                        let t = self.mul_mask(g, m);
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::PadHw(a) => {
                    if active[a] {
                        let Shape::Chw(_, h, w) = t_of(a).shape else { unreachable!() };
                        let t = self.crop_hw(g, h, w);
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::CropHw(a) => {
                    if active[a] {
                        let Shape::Chw(_, h2, w2) = t_of(a).shape else { unreachable!() };
                        let t = self.pad_hw(g, h2, w2);
                        add_sym(&mut sym, a, t);
                    }
                }
                Op::Reshape(a) => {
                    if active[a] {
                        let t = self.reshape(g, t_of(a).shape);
                        add_sym(&mut sym, a, t);
                    }
                }
            }
        }
        targets.iter().map(|t| sym[t.id]).collect()
    }
}
