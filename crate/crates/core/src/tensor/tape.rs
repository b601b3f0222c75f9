use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::{Error, Result};

/// Lower clamp applied to the argument of [`Var::log`].
pub const LOG_CLAMP: f32 = 1e-12;

/// Position of a node on its tape.
pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Relu(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    Matmul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Conv2d { x: NodeId, k: NodeId, geom: ConvGeom },
    GlobalAvgPool(NodeId),
    Softmax { x: NodeId, temperature: f32 },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass. Nodes are appended in execution order, so
/// the inputs of every node precede it and a reverse sweep is a valid
/// topological traversal.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f32>>>>,
    done: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a copy of `t`. The leaf tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        let rg = t.requires_grad();
        let mut v = t.detached();
        v.requires_grad = rg;
        self.push(v, Op::Leaf, rg)
    }

    /// Records a value that never receives gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t.detached(), Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracks(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`. Gradients are kept on the tape
    /// until [`Tape::zero_grad`]; running backward twice without resetting
    /// is an error.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.done.get() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        self.done.set(true);
        Ok(())
    }

    /// Clears stored gradients so that backward may run again.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
        self.done.set(false);
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.id)?.as_ref()?;
        Tensor::new(self.nodes.borrow()[v.id].value.shape().to_vec(), g.clone()).ok()
    }

    /// Adds the gradient of `v` into `dst`'s gradient buffer. No-op when
    /// `dst` does not require grad or `v` was not reached.
    pub fn accumulate_into(&self, v: Var<'_>, dst: &mut Tensor) -> Result<()> {
        let grads = self.grads.borrow();
        match grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => dst.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn add_into(slot: &mut Option<Vec<f32>>, contrib: Vec<f32>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

fn sum_f64(xs: &[f32]) -> f32 {
    xs.iter().map(|&v| v as f64).sum::<f64>() as f32
}

/// Gradient flowing into one side of a binary op whose other side may have
/// been broadcast from a scalar.
fn reduce_if_scalar(contrib: Vec<f32>, target_len: usize) -> Vec<f32> {
    if target_len == 1 && contrib.len() != 1 {
        vec![sum_f64(&contrib)]
    } else {
        contrib
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let tracks = |id: NodeId| nodes[id].requires_grad;
    let val = |id: NodeId| &nodes[id].value;
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let neg = matches!(node.op, Op::Sub(..));
            if tracks(a) {
                add_into(&mut grads[a], reduce_if_scalar(g.to_vec(), val(a).numel()));
            }
            if tracks(b) {
                let gb: Vec<f32> = if neg { g.iter().map(|v| -v).collect() } else { g.to_vec() };
                add_into(&mut grads[b], reduce_if_scalar(gb, val(b).numel()));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let pick = |xs: &[f32], i: usize| if xs.len() == 1 { xs[0] } else { xs[i] };
            if tracks(a) {
                let c = g.iter().enumerate().map(|(i, gi)| gi * pick(bv, i)).collect();
                add_into(&mut grads[a], reduce_if_scalar(c, av.len()));
            }
            if tracks(b) {
                let c = g.iter().enumerate().map(|(i, gi)| gi * pick(av, i)).collect();
                add_into(&mut grads[b], reduce_if_scalar(c, bv.len()));
            }
        }
        Op::Scale(a, c) => {
            if tracks(a) {
                add_into(&mut grads[a], g.iter().map(|gi| gi * c).collect());
            }
        }
        Op::Relu(a) => {
            if tracks(a) {
                let x = val(a).data();
                let c = g.iter().zip(x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect();
                add_into(&mut grads[a], c);
            }
        }
        Op::Log(a) => {
            if tracks(a) {
                let x = val(a).data();
                let c = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > LOG_CLAMP { gi / xi } else { 0.0 })
                    .collect();
                add_into(&mut grads[a], c);
            }
        }
        Op::Square(a) => {
            if tracks(a) {
                let x = val(a).data();
                add_into(&mut grads[a], g.iter().zip(x).map(|(gi, xi)| 2.0 * xi * gi).collect());
            }
        }
        Op::Sum(a) => {
            if tracks(a) {
                add_into(&mut grads[a], vec![g[0]; val(a).numel()]);
            }
        }
        Op::Mean(a) => {
            if tracks(a) {
                let n = val(a).numel();
                add_into(&mut grads[a], vec![g[0] / n as f32; n]);
            }
        }
        Op::SumRows(a) => {
            if tracks(a) {
                let k = val(a).shape()[1];
                let c = g.iter().flat_map(|&gi| std::iter::repeat_n(gi, k)).collect();
                add_into(&mut grads[a], c);
            }
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if tracks(a) {
                let mut da = vec![0.0; m * k];
                kernels::gemm_nt(g, bv.data(), &mut da, m, n, k);
                add_into(&mut grads[a], da);
            }
            if tracks(b) {
                let mut db = vec![0.0; k * n];
                kernels::gemm_tn(av.data(), g, &mut db, m, k, n);
                add_into(&mut grads[b], db);
            }
        }
        Op::AddBias(x, b) => {
            if tracks(x) {
                add_into(&mut grads[x], g.to_vec());
            }
            if tracks(b) {
                let k = val(b).numel();
                let rows = g.len() / k;
                let db = (0..k)
                    .map(|j| (0..rows).map(|i| g[i * k + j] as f64).sum::<f64>() as f32)
                    .collect();
                add_into(&mut grads[b], db);
            }
        }
        Op::Conv2d { x, k, geom } => {
            let (dx, dk) = kernels::conv2d_backward(&geom, val(x).data(), val(k).data(), g, tracks(x), tracks(k));
            if let Some(dx) = dx {
                add_into(&mut grads[x], dx);
            }
            if let Some(dk) = dk {
                add_into(&mut grads[k], dk);
            }
        }
        Op::GlobalAvgPool(a) => {
            if tracks(a) {
                let s = val(a).shape();
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f32;
                let c = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, hw)).collect();
                add_into(&mut grads[a], c);
            }
        }
        Op::Softmax { x, temperature } => {
            if tracks(x) {
                let y = node.value.data();
                let k = node.value.shape()[1];
                let mut c = vec![0.0f32; y.len()];
                for (r, (yr, gr)) in y.chunks(k).zip(g.chunks(k)).enumerate() {
                    let dotp = yr.iter().zip(gr).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>() as f32;
                    for j in 0..k {
                        c[r * k + j] = yr[j] * (gr[j] - dotp) / temperature;
                    }
                }
                add_into(&mut grads[x], c);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f32 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.tracks(self.id)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value().detached())
    }

    fn unary(&self, op: Op, value: Tensor) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary_ew(&self, other: Var<'t>, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<(Tensor, bool)> {
        let (a, b) = (self.value(), other.value());
        let rg = self.requires_grad() || other.requires_grad();
        let out = if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        } else if b.numel() == 1 {
            let y = b.data()[0];
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| f(*x, y)).collect())?
        } else if a.numel() == 1 {
            let x = a.data()[0];
            Tensor::new(b.shape().to_vec(), b.data().iter().map(|y| f(x, *y)).collect())?
        } else {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?} (only scalar broadcasting is supported)", a.shape(), b.shape()),
            ));
        };
        Ok((out, rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary_ew(other, "add", |x, y| x + y)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id), rg))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary_ew(other, "sub", |x, y| x - y)?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id), rg))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary_ew(other, "mul", |x, y| x * y)?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id), rg))
    }

    pub fn scale(&self, c: f32) -> Var<'t> {
        let a = self.value();
        let v = Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect()).expect("same shape");
        self.unary(Op::Scale(self.id, c), v)
    }

    /// `max(x, 0)`; the derivative at exactly zero is taken as zero. NaN
    /// inputs pass through so that they reach the loss.
    pub fn relu(&self) -> Var<'t> {
        let a = self.value();
        let v = Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| if x < 0.0 { 0.0 } else { x }).collect())
            .expect("same shape");
        self.unary(Op::Relu(self.id), v)
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&self) -> Var<'t> {
        let a = self.value();
        let v = Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x.max(LOG_CLAMP).ln()).collect())
            .expect("same shape");
        self.unary(Op::Log(self.id), v)
    }

    pub fn square(&self) -> Var<'t> {
        let a = self.value();
        let v = Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * x).collect()).expect("same shape");
        self.unary(Op::Square(self.id), v)
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(sum_f64(self.value().data()));
        self.unary(Op::Sum(self.id), v)
    }

    pub fn mean(&self) -> Var<'t> {
        let a = self.value();
        let n = a.numel() as f64;
        let v = Tensor::scalar((a.data().iter().map(|&x| x as f64).sum::<f64>() / n) as f32);
        self.unary(Op::Mean(self.id), v)
    }

    /// Row sums of a rank-2 tensor: `[n,k] -> [n]`.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::shape("sum_rows", format!("expected rank 2, got {:?}", a.shape())));
        }
        let k = a.shape()[1];
        let v = Tensor::new([a.shape()[0]], a.data().chunks(k).map(sum_f64).collect())?;
        Ok(self.unary(Op::SumRows(self.id), v))
    }

    /// Dense `[m,k] · [k,n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::shape("matmul", format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        if b.shape()[0] != k {
            return Err(Error::shape("matmul", format!("inner dimension: {k} vs {}", b.shape()[0])));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(a.data(), b.data(), &mut out, m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::new([m, n], out)?, Op::Matmul(self.id, other.id), rg))
    }

    /// Adds a `[k]` bias to every row of an `[n,k]` tensor.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        if x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", x.shape(), b.shape())));
        }
        let k = b.numel();
        let data = x.data().chunks(k).flat_map(|row| row.iter().zip(b.data()).map(|(a, c)| a + c)).collect();
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(Tensor::new(x.shape().to_vec(), data)?, Op::AddBias(self.id, bias.id), rg))
    }

    /// Cross-correlation of `[n,c_in,h,w]` with `[c_out,c_in,kh,kw]`.
    /// Output extents are `floor((h + 2·padding − kh) / stride) + 1`.
    pub fn conv2d(&self, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        let geom = ConvGeom::new(x.shape(), k.shape(), stride, padding)?;
        let out = kernels::conv2d_forward(&geom, x.data(), k.data());
        let rg = self.requires_grad() || kernel.requires_grad();
        let v = Tensor::new(geom.out_shape(), out)?;
        Ok(self.tape.push(v, Op::Conv2d { x: self.id, k: kernel.id, geom }, rg))
    }

    /// Spatial mean per channel: `[n,c,h,w] -> [n,c]`.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected [n,c,h,w], got {:?}", x.shape())));
        }
        let s = x.shape();
        let hw = s[2] * s[3];
        let data = x
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let v = Tensor::new([s[0], s[1]], data)?;
        Ok(self.unary(Op::GlobalAvgPool(self.id), v))
    }

    /// Row-wise `softmax(logits / temperature)` with max subtraction.
    pub fn softened_softmax(&self, temperature: f32) -> Result<Var<'t>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
        }
        let x = self.value();
        if x.rank() != 2 || x.shape()[1] < 2 {
            return Err(Error::shape("softened_softmax", format!("expected [n,k] with k >= 2, got {:?}", x.shape())));
        }
        let k = x.shape()[1];
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(k) {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let e: Vec<f64> = row.iter().map(|&v| (((v - m) / temperature) as f64).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| (v / z) as f32));
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.unary(Op::Softmax { x: self.id, temperature }, v))
    }
}
