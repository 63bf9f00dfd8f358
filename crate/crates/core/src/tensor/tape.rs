//! Recording tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its kind, parent ids, and cached
//! value; node ids are a topological order by construction, so the graph is
//! acyclic. The backward pass emits its vector-Jacobian products as ordinary
//! tape operations, which is what makes gradients differentiable in turn
//! (create-graph semantics): a second `grad` call simply walks the extended
//! tape.
//!
//! A tape is confined to one logical task (interior mutability, not `Sync`);
//! parallel work uses independent tapes.

use super::kernels as kn;
use super::kernels::WarpGrid;
use super::{Tensor, TensorError};
use std::cell::RefCell;
use std::sync::Arc;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    AddScalar { p: usize, c: f64 },
    Scale { p: usize, c: f64 },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MatMul { a: usize, b: usize },
    Transpose { p: usize },
    Conv2d { x: usize, k: usize, stride: usize, pad: usize },
    Conv2dInputGrad { g: usize, k: usize, stride: usize, pad: usize, in_h: usize, in_w: usize },
    Conv2dKernelGrad { x: usize, g: usize, stride: usize, pad: usize, kh: usize, kw: usize },
    AvgPool2 { p: usize },
    AvgPool2Grad { g: usize, in_h: usize, in_w: usize },
    ClampMin { p: usize, c: f64 },
    Exp { p: usize },
    Ln { p: usize },
    Sqrt { p: usize },
    Recip { p: usize },
    Broadcast { p: usize, to: Vec<usize> },
    SumTo { p: usize, to: Vec<usize> },
    Reshape { p: usize, to: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { p: usize, axis: usize, start: usize, len: usize },
    PadZero { p: usize, axis: usize, before: usize, after: usize },
    RowMax { p: usize },
    Warp { p: usize, grid: Arc<WarpGrid> },
    WarpT { p: usize, grid: Arc<WarpGrid>, in_h: usize, in_w: usize },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only recording of a computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node. Copyable; the value lives on the tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// A request to differentiate a scalar output with respect to leaf nodes.
///
/// With `create_graph` the returned gradients are live graph nodes that can
/// be differentiated again; without it they are detached constants.
pub struct GradientRequest<'t> {
    pub output: Var<'t>,
    pub wrt: Vec<Var<'t>>,
    pub create_graph: bool,
}

impl<'t> GradientRequest<'t> {
    pub fn run(&self) -> Result<Vec<Var<'t>>, TensorError> {
        self.output.grad(&self.wrt, self.create_graph)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    fn push(&self, op: Op, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn op_of(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    fn is_leaf(&self, id: usize) -> bool {
        matches!(self.nodes.borrow()[id].op, Op::Leaf)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no parts".into(),
            });
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first.clone(),
                reason: format!("axis {axis} out of range"),
            });
        }
        for p in &parts[1..] {
            let s = p.shape();
            let same = s.len() == first.len()
                && s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first, rhs: s });
            }
        }
        let op = Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis };
        let value = self.eval(&op);
        Ok(self.push(op, value))
    }

    /// Recompute every non-leaf node from its parents and compare bitwise.
    pub fn replay_bit_identical(&self) -> bool {
        let n = self.len();
        for id in 0..n {
            let op = self.op_of(id);
            if matches!(op, Op::Leaf) {
                continue;
            }
            let recomputed = self.eval(&op);
            if !recomputed.bit_eq(&self.nodes.borrow()[id].value) {
                return false;
            }
        }
        true
    }

    /// Forward semantics of an op in terms of parent values — the single
    /// source of truth shared by op constructors and `replay_bit_identical`.
    fn eval(&self, op: &Op) -> Tensor {
        let v = |id: usize| self.value_of(id);
        match op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::AddScalar { p, c } => v(*p).map(|x| x + c),
            Op::Scale { p, c } => v(*p).map(|x| x * c),
            Op::Add { a, b } => {
                let (ta, tb) = (v(*a), v(*b));
                let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
                Tensor::from_vec(ta.shape().to_vec(), data).unwrap()
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (v(*a), v(*b));
                let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                Tensor::from_vec(ta.shape().to_vec(), data).unwrap()
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (v(*a), v(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                Tensor::from_vec(vec![m, n], kn::matmul(ta.data(), tb.data(), m, k, n)).unwrap()
            }
            Op::Transpose { p } => {
                let t = v(*p);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                Tensor::from_vec(vec![c, r], kn::transpose(t.data(), r, c)).unwrap()
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (tx, tk) = (v(*x), v(*k));
                let (n, cin, h, w) = dims4(tx.shape());
                let (cout, _, kh, kw) = dims4(tk.shape());
                let (oh, ow) = kn::conv2d_out_hw(h, w, kh, kw, *stride, *pad).unwrap();
                let data = kn::conv2d(tx.data(), tk.data(), n, cin, h, w, cout, kh, kw, *stride, *pad);
                Tensor::from_vec(vec![n, cout, oh, ow], data).unwrap()
            }
            Op::Conv2dInputGrad { g, k, stride, pad, in_h, in_w } => {
                let (tg, tk) = (v(*g), v(*k));
                let (n, cout, _, _) = dims4(tg.shape());
                let (_, cin, kh, kw) = dims4(tk.shape());
                let data = kn::conv2d_input_grad(
                    tg.data(), tk.data(), n, cin, *in_h, *in_w, cout, kh, kw, *stride, *pad,
                );
                Tensor::from_vec(vec![n, cin, *in_h, *in_w], data).unwrap()
            }
            Op::Conv2dKernelGrad { x, g, stride, pad, kh, kw } => {
                let (tx, tg) = (v(*x), v(*g));
                let (n, cin, h, w) = dims4(tx.shape());
                let (_, cout, _, _) = dims4(tg.shape());
                let data = kn::conv2d_kernel_grad(
                    tx.data(), tg.data(), n, cin, h, w, cout, *kh, *kw, *stride, *pad,
                );
                Tensor::from_vec(vec![cout, cin, *kh, *kw], data).unwrap()
            }
            Op::AvgPool2 { p } => {
                let t = v(*p);
                let (n, c, h, w) = dims4(t.shape());
                Tensor::from_vec(vec![n, c, h / 2, w / 2], kn::avg_pool2(t.data(), n, c, h, w))
                    .unwrap()
            }
            Op::AvgPool2Grad { g, in_h, in_w } => {
                let t = v(*g);
                let (n, c, _, _) = dims4(t.shape());
                Tensor::from_vec(
                    vec![n, c, *in_h, *in_w],
                    kn::avg_pool2_grad(t.data(), n, c, *in_h, *in_w),
                )
                .unwrap()
            }
            Op::ClampMin { p, c } => v(*p).map(|x| x.max(*c)),
            Op::Exp { p } => v(*p).map(f64::exp),
            Op::Ln { p } => v(*p).map(f64::ln),
            Op::Sqrt { p } => v(*p).map(f64::sqrt),
            Op::Recip { p } => v(*p).map(|x| 1.0 / x),
            Op::Broadcast { p, to } => {
                let t = v(*p);
                Tensor::from_vec(to.clone(), kn::broadcast(t.data(), t.shape(), to)).unwrap()
            }
            Op::SumTo { p, to } => {
                let t = v(*p);
                Tensor::from_vec(to.clone(), kn::sum_to(t.data(), t.shape(), to)).unwrap()
            }
            Op::Reshape { p, to } => v(*p).reshaped(to).unwrap(),
            Op::Concat { parts, axis } => {
                let tensors: Vec<Tensor> = parts.iter().map(|&p| v(p)).collect();
                let datas: Vec<&[f64]> = tensors.iter().map(|t| t.data()).collect();
                let shapes: Vec<&[usize]> = tensors.iter().map(|t| t.shape()).collect();
                let (data, shape) = kn::concat(&datas, &shapes, *axis);
                Tensor::from_vec(shape, data).unwrap()
            }
            Op::Slice { p, axis, start, len } => {
                let t = v(*p);
                let mut shape = t.shape().to_vec();
                shape[*axis] = *len;
                Tensor::from_vec(shape, kn::slice(t.data(), t.shape(), *axis, *start, *len))
                    .unwrap()
            }
            Op::PadZero { p, axis, before, after } => {
                let t = v(*p);
                let (data, shape) = kn::pad_zero(t.data(), t.shape(), *axis, *before, *after);
                Tensor::from_vec(shape, data).unwrap()
            }
            Op::RowMax { p } => {
                let t = v(*p);
                let rank = t.shape().len();
                let cols = t.shape()[rank - 1];
                let rows = t.numel() / cols;
                let mut shape = t.shape().to_vec();
                shape[rank - 1] = 1;
                Tensor::from_vec(shape, kn::row_max(t.data(), rows, cols)).unwrap()
            }
            Op::Warp { p, grid } => {
                let t = v(*p);
                let (n, c, h, w) = dims4(t.shape());
                Tensor::from_vec(
                    vec![n, c, grid.h, grid.w],
                    kn::bilinear_warp(t.data(), n, c, h, w, grid),
                )
                .unwrap()
            }
            Op::WarpT { p, grid, in_h, in_w } => {
                let t = v(*p);
                let (n, c, _, _) = dims4(t.shape());
                Tensor::from_vec(
                    vec![n, c, *in_h, *in_w],
                    kn::bilinear_warp_t(t.data(), n, c, *in_h, *in_w, grid),
                )
                .unwrap()
            }
        }
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

// Fallible tensor methods cannot satisfy the std operator traits, so the
// conventional names stay as inherent methods.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn emit(self, op: Op) -> Var<'t> {
        let value = self.tape.eval(&op);
        self.tape.push(op, value)
    }

    fn same_shape(self, rhs: Var<'t>, name: &'static str) -> Result<(), TensorError> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        Ok(())
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_shape(rhs, "add")?;
        Ok(self.emit(Op::Add { a: self.id, b: rhs.id }))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_shape(rhs, "sub")?;
        self.add(rhs.scale(-1.0))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_shape(rhs, "mul")?;
        Ok(self.emit(Op::Mul { a: self.id, b: rhs.id }))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.emit(Op::Scale { p: self.id, c })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.emit(Op::AddScalar { p: self.id, c })
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: ls, rhs: rs });
        }
        Ok(self.emit(Op::MatMul { a: self.id, b: rhs.id }))
    }

    pub fn transpose(self) -> Result<Var<'t>, TensorError> {
        if self.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape(),
                reason: "rank-2 only".into(),
            });
        }
        Ok(self.emit(Op::Transpose { p: self.id }))
    }

    pub fn conv2d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>, TensorError> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ks });
        }
        if kn::conv2d_out_hw(xs[2], xs[3], ks[2], ks[3], stride, pad).is_none() {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: xs,
                reason: format!("kernel {ks:?} stride {stride} pad {pad} does not fit"),
            });
        }
        Ok(self.emit(Op::Conv2d { x: self.id, k: kernel.id, stride, pad }))
    }

    pub fn avg_pool2(self) -> Result<Var<'t>, TensorError> {
        let s = self.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(TensorError::InvalidShape {
                op: "avg_pool2",
                shape: s,
                reason: "needs rank 4 with spatial extents >= 2".into(),
            });
        }
        Ok(self.emit(Op::AvgPool2 { p: self.id }))
    }

    pub fn clamp_min(self, c: f64) -> Var<'t> {
        self.emit(Op::ClampMin { p: self.id, c })
    }

    pub fn relu(self) -> Var<'t> {
        self.clamp_min(0.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.emit(Op::Exp { p: self.id })
    }

    pub fn ln(self) -> Var<'t> {
        self.emit(Op::Ln { p: self.id })
    }

    pub fn sqrt(self) -> Var<'t> {
        self.emit(Op::Sqrt { p: self.id })
    }

    pub fn recip(self) -> Var<'t> {
        self.emit(Op::Recip { p: self.id })
    }

    pub fn broadcast_to(self, to: &[usize]) -> Result<Var<'t>, TensorError> {
        let s = self.shape();
        if !kn::broadcast_compatible(&s, to) {
            return Err(TensorError::ShapeMismatch { op: "broadcast", lhs: s, rhs: to.to_vec() });
        }
        Ok(self.emit(Op::Broadcast { p: self.id, to: to.to_vec() }))
    }

    pub fn sum_to_shape(self, to: &[usize]) -> Result<Var<'t>, TensorError> {
        let s = self.shape();
        if !kn::broadcast_compatible(to, &s) {
            return Err(TensorError::ShapeMismatch { op: "sum_to", lhs: s, rhs: to.to_vec() });
        }
        Ok(self.emit(Op::SumTo { p: self.id, to: to.to_vec() }))
    }

    pub fn reshape(self, to: &[usize]) -> Result<Var<'t>, TensorError> {
        let expected: usize = to.iter().product();
        if expected != self.numel() || to.contains(&0) {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: self.shape(),
                reason: format!("cannot view as {to:?}"),
            });
        }
        Ok(self.emit(Op::Reshape { p: self.id, to: to.to_vec() }))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let s = self.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: s,
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        Ok(self.emit(Op::Slice { p: self.id, axis, start, len }))
    }

    pub fn warp(self, grid: Arc<WarpGrid>) -> Result<Var<'t>, TensorError> {
        let s = self.shape();
        if s.len() != 4 || s[0] != grid.n {
            return Err(TensorError::InvalidShape {
                op: "warp",
                shape: s,
                reason: format!("grid batch {} does not match", grid.n),
            });
        }
        Ok(self.emit(Op::Warp { p: self.id, grid }))
    }

    pub fn sum_all(self) -> Var<'t> {
        self.sum_to_shape(&[]).expect("scalar target always compatible")
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn dot(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        Ok(self.mul(rhs)?.sum_all())
    }

    pub fn norm_sq(self) -> Var<'t> {
        self.mul(self).expect("same shape").sum_all()
    }

    /// Row-wise log-sum-exp over the class axis: (n, C) -> (n, 1).
    ///
    /// Uses the max-shift form; the shift is a constant of the graph, which
    /// leaves derivatives of every order exact.
    pub fn log_sum_exp(self) -> Result<Var<'t>, TensorError> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "log_sum_exp",
                shape: s,
                reason: "expects (rows, classes)".into(),
            });
        }
        let m = self.emit(Op::RowMax { p: self.id });
        let shifted = self.sub(m.broadcast_to(&s)?)?;
        let sums = shifted.exp().sum_to_shape(&[s[0], 1])?;
        sums.ln().add(m)
    }

    /// Per-sample, per-channel normalization of an (n, c, h, w) batch.
    pub fn instance_norm(self, eps: f64) -> Result<Var<'t>, TensorError> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "instance_norm",
                shape: s,
                reason: "expects (n, c, h, w)".into(),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let inv_hw = 1.0 / (h * w) as f64;
        let mean = self.sum_to_shape(&[n, c, 1, 1])?.scale(inv_hw);
        let centered = self.sub(mean.broadcast_to(&s)?)?;
        let var = centered.mul(centered)?.sum_to_shape(&[n, c, 1, 1])?.scale(inv_hw);
        let inv_std = var.add_scalar(eps).sqrt().recip();
        centered.mul(inv_std.broadcast_to(&s)?)
    }

    /// Reverse-mode gradients of a scalar output with respect to leaves.
    ///
    /// Unreached leaves get zero gradients. With `create_graph` the results
    /// stay attached to the tape and can be differentiated again.
    pub fn grad(self, wrt: &[Var<'t>], create_graph: bool) -> Result<Vec<Var<'t>>, TensorError> {
        let tape = self.tape;
        if self.numel() != 1 {
            return Err(TensorError::NonScalarOutput { shape: self.shape() });
        }
        for v in wrt {
            if !tape.is_leaf(v.id) {
                return Err(TensorError::NonLeafWrt { id: v.id });
            }
        }
        let upto = self.id;
        let mut adj: Vec<Option<usize>> = vec![None; upto + 1];
        adj[upto] = Some(tape.leaf(Tensor::ones(&self.shape())).id);

        for id in (0..=upto).rev() {
            let Some(gid) = adj[id] else { continue };
            let g = Var { tape, id: gid };
            match tape.op_of(id) {
                Op::Leaf => {}
                Op::AddScalar { p, .. } => acc(&mut adj, p, g)?,
                Op::Scale { p, c } => acc(&mut adj, p, g.scale(c))?,
                Op::Add { a, b } => {
                    acc(&mut adj, a, g)?;
                    acc(&mut adj, b, g)?;
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (Var { tape, id: a }, Var { tape, id: b });
                    acc(&mut adj, a, g.mul(vb)?)?;
                    acc(&mut adj, b, g.mul(va)?)?;
                }
                Op::MatMul { a, b } => {
                    let (va, vb) = (Var { tape, id: a }, Var { tape, id: b });
                    acc(&mut adj, a, g.matmul(vb.transpose()?)?)?;
                    acc(&mut adj, b, va.transpose()?.matmul(g)?)?;
                }
                Op::Transpose { p } => acc(&mut adj, p, g.transpose()?)?,
                Op::Conv2d { x, k, stride, pad } => {
                    let (vx, vk) = (Var { tape, id: x }, Var { tape, id: k });
                    let xs = vx.shape();
                    let ks = vk.shape();
                    let gx = g.emit(Op::Conv2dInputGrad {
                        g: g.id,
                        k,
                        stride,
                        pad,
                        in_h: xs[2],
                        in_w: xs[3],
                    });
                    let gk = g.emit(Op::Conv2dKernelGrad {
                        x,
                        g: g.id,
                        stride,
                        pad,
                        kh: ks[2],
                        kw: ks[3],
                    });
                    acc(&mut adj, x, gx)?;
                    acc(&mut adj, k, gk)?;
                }
                Op::Conv2dInputGrad { g: gp, k, stride, pad, .. } => {
                    // value = C_k^T gp, so d/dgp = conv2d(u, k) and
                    // d/dk picks up a kernel-grad with u in the input role.
                    let vk = Var { tape, id: k };
                    let ks = vk.shape();
                    acc(&mut adj, gp, g.conv2d(vk, stride, pad)?)?;
                    let gk = g.emit(Op::Conv2dKernelGrad {
                        x: g.id,
                        g: gp,
                        stride,
                        pad,
                        kh: ks[2],
                        kw: ks[3],
                    });
                    acc(&mut adj, k, gk)?;
                }
                Op::Conv2dKernelGrad { x, g: gp, stride, pad, .. } => {
                    let vx = Var { tape, id: x };
                    let xs = vx.shape();
                    let gx = g.emit(Op::Conv2dInputGrad {
                        g: gp,
                        k: g.id,
                        stride,
                        pad,
                        in_h: xs[2],
                        in_w: xs[3],
                    });
                    acc(&mut adj, x, gx)?;
                    acc(&mut adj, gp, vx.conv2d(g, stride, pad)?)?;
                }
                Op::AvgPool2 { p } => {
                    let s = Var { tape, id: p }.shape();
                    let gp = g.emit(Op::AvgPool2Grad { g: g.id, in_h: s[2], in_w: s[3] });
                    acc(&mut adj, p, gp)?;
                }
                Op::AvgPool2Grad { g: gp, .. } => {
                    acc(&mut adj, gp, g.avg_pool2()?)?;
                }
                Op::ClampMin { p, c } => {
                    // subgradient at the clamp point is 0; mask is a constant
                    let mask = Var { tape, id: p }
                        .value()
                        .map(|x| if x > c { 1.0 } else { 0.0 });
                    acc(&mut adj, p, g.mul(tape.leaf(mask))?)?;
                }
                Op::Exp { p } => acc(&mut adj, p, g.mul(Var { tape, id })?)?,
                Op::Ln { p } => acc(&mut adj, p, g.mul(Var { tape, id: p }.recip())?)?,
                Op::Sqrt { p } => {
                    let half_inv = Var { tape, id }.recip().scale(0.5);
                    acc(&mut adj, p, g.mul(half_inv)?)?;
                }
                Op::Recip { p } => {
                    let y = Var { tape, id };
                    acc(&mut adj, p, g.mul(y.mul(y)?)?.neg())?;
                }
                Op::Broadcast { p, .. } => {
                    let from = Var { tape, id: p }.shape();
                    acc(&mut adj, p, g.sum_to_shape(&from)?)?;
                }
                Op::SumTo { p, .. } => {
                    let from = Var { tape, id: p }.shape();
                    acc(&mut adj, p, g.broadcast_to(&from)?)?;
                }
                Op::Reshape { p, .. } => {
                    let from = Var { tape, id: p }.shape();
                    acc(&mut adj, p, g.reshape(&from)?)?;
                }
                Op::Concat { parts, axis } => {
                    let mut at = 0usize;
                    for p in parts {
                        let len = Var { tape, id: p }.shape()[axis];
                        acc(&mut adj, p, g.slice(axis, at, len)?)?;
                        at += len;
                    }
                }
                Op::Slice { p, axis, start, len } => {
                    let total = Var { tape, id: p }.shape()[axis];
                    let gp = g.emit(Op::PadZero {
                        p: g.id,
                        axis,
                        before: start,
                        after: total - start - len,
                    });
                    acc(&mut adj, p, gp)?;
                }
                Op::PadZero { p, axis, before, .. } => {
                    let len = Var { tape, id: p }.shape()[axis];
                    acc(&mut adj, p, g.slice(axis, before, len)?)?;
                }
                Op::RowMax { .. } => {
                    // constant shift inside log-sum-exp; contributes nothing
                }
                Op::Warp { p, grid } => {
                    let s = Var { tape, id: p }.shape();
                    let gp = g.emit(Op::WarpT { p: g.id, grid, in_h: s[2], in_w: s[3] });
                    acc(&mut adj, p, gp)?;
                }
                Op::WarpT { p, grid, .. } => {
                    acc(&mut adj, p, g.warp(grid)?)?;
                }
            }
        }

        wrt.iter()
            .map(|v| {
                let attached = if v.id <= upto { adj[v.id] } else { None };
                Ok(match attached {
                    Some(gid) => {
                        let gv = Var { tape, id: gid };
                        if create_graph {
                            gv
                        } else {
                            tape.leaf(gv.value())
                        }
                    }
                    None => tape.leaf(Tensor::zeros(&v.shape())),
                })
            })
            .collect()
    }
}

fn acc(adj: &mut [Option<usize>], parent: usize, contrib: Var<'_>) -> Result<(), TensorError> {
    adj[parent] = Some(match adj[parent] {
        None => contrib.id,
        Some(existing) => {
            let e = Var { tape: contrib.tape, id: existing };
            e.add(contrib)?.id
        }
    });
    Ok(())
}
