//! Reverse-mode tape.
//!
//! Every backward rule is itself written with tape ops, so the gradients a
//! pass returns are ordinary nodes that can be differentiated again. This is
//! what the Jacobian penalties need (gradient of a gradient). The only rules
//! that are not twice differentiable are the convolutional ones, whose
//! backward passes are recorded as `Opaque` nodes.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("gradient requested of a non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("cotangent shape {got:?} does not match output shape {expected:?}")]
    CotangentShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("`{0}` has no derivative (backward-only kernel reached during differentiation)")]
    NotDifferentiable(&'static str),
}

pub type Result<T> = std::result::Result<T, AutogradError>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    SumRows(usize),
    BroadcastRows(usize),
    SumCols(usize),
    BroadcastCols(usize),
    SumAll(usize),
    Expand(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    Powf(usize, f64),
    Reshape(usize),
    SliceCols { a: usize, start: usize },
    PadCols { a: usize, start: usize },
    ConcatCols(Vec<usize>),
    GatherRows { a: usize, index: Rc<Vec<usize>> },
    ScatterRows { a: usize, index: Rc<Vec<usize>> },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    AddChannel(usize, usize),
    MaxPool2 { x: usize, index: Rc<Vec<usize>> },
    GlobalAvgPool(usize),
    Opaque(&'static str, Vec<usize>),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) | AddChannel(a, b) => {
                vec![*a, *b]
            }
            MatMul { a, b, .. } => vec![*a, *b],
            Conv2d { x, w, .. } => vec![*x, *w],
            Neg(a) | Scale(a, _) | AddScalar(a) | SumRows(a) | BroadcastRows(a) | SumCols(a)
            | BroadcastCols(a) | SumAll(a) | Expand(a) | Sigmoid(a) | Tanh(a) | Exp(a) | Ln(a)
            | Softplus(a) | Powf(a, _) | Reshape(a) | GlobalAvgPool(a) => vec![*a],
            SliceCols { a, .. } | PadCols { a, .. } => vec![*a],
            GatherRows { a, .. } | ScatterRows { a, .. } => vec![*a],
            MaxPool2 { x, .. } => vec![*x],
            ConcatCols(ids) => ids.clone(),
            Opaque(_, ids) => ids.clone(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Append-only record of a computation. Create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
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

    /// Records a leaf (parameter, input, or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let n = vals[0].rows();
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for v in &vals {
                assert_eq!(v.rows(), n, "concat_cols row mismatch");
                data.extend_from_slice(v.row(i));
            }
        }
        self.push(
            Rc::new(Tensor::new(vec![n, total], data)),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        )
    }

    fn push(&self, value: Rc<Tensor>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradient of a single-element `output` with respect to each of `wrt`.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let shape = output.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(AutogradError::NonScalarOutput(shape));
        }
        let seed = self.leaf(Tensor::ones(&shape));
        self.vjp(output, seed, wrt)
    }

    /// Vector-Jacobian product `cotangentᵀ · ∂output/∂wrt`. The cotangent is a
    /// tape node and the result stays differentiable in it.
    pub fn vjp<'t>(
        &'t self,
        output: Var<'t>,
        cotangent: Var<'t>,
        wrt: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>> {
        let (expected, got) = (output.shape(), cotangent.shape());
        if expected != got {
            return Err(AutogradError::CotangentShape { expected, got });
        }
        let n = output.id + 1;
        let mut reach = vec![false; n];
        for w in wrt {
            if w.id < n {
                reach[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !reach[i] {
                    reach[i] = nodes[i].op.parents().iter().any(|&p| reach[p]);
                }
            }
        }

        let mut results: Vec<Option<Var<'t>>> = vec![None; wrt.len()];
        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        grads[output.id] = Some(cotangent);

        for i in (0..n).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (k, w) in wrt.iter().enumerate() {
                if w.id == i {
                    results[k] = Some(g);
                }
            }
            for (p, gp) in self.backward(i, g, &reach)? {
                if p < n && reach[p] {
                    grads[p] = Some(match grads[p] {
                        Some(acc) => acc.add(gp),
                        None => gp,
                    });
                }
            }
        }

        Ok(wrt
            .iter()
            .zip(results)
            .map(|(w, r)| r.unwrap_or_else(|| self.leaf(Tensor::zeros(&w.shape()))))
            .collect())
    }

    fn backward<'t>(
        &'t self,
        id: usize,
        g: Var<'t>,
        reach: &[bool],
    ) -> Result<Vec<(usize, Var<'t>)>> {
        use Op::*;
        let op = self.nodes.borrow()[id].op.clone();
        let out = self.var(id);
        let v = |i: usize| self.var(i);
        Ok(match op {
            Leaf => vec![],
            Add(a, b) => vec![(a, g), (b, g)],
            Sub(a, b) => vec![(a, g), (b, g.neg())],
            Mul(a, b) => vec![(a, g.mul(v(b))), (b, g.mul(v(a)))],
            Neg(a) => vec![(a, g.neg())],
            Scale(a, s) => vec![(a, g.scale(s))],
            AddScalar(a) => vec![(a, g)],
            AddRow(a, b) => vec![(a, g), (b, g.sum_rows())],
            MulRow(a, b) => vec![(a, g.mul_row(v(b))), (b, g.mul(v(a)).sum_rows())],
            SumRows(a) => {
                let n = self.value_of(a).rows();
                vec![(a, g.broadcast_rows(n))]
            }
            BroadcastRows(a) => vec![(a, g.sum_rows())],
            SumCols(a) => {
                let m = self.value_of(a).cols();
                vec![(a, g.broadcast_cols(m))]
            }
            BroadcastCols(a) => vec![(a, g.sum_cols())],
            SumAll(a) => {
                let shape = self.value_of(a).shape().to_vec();
                vec![(a, g.expand(&shape))]
            }
            Expand(a) => vec![(a, g.sum())],
            MatMul { a, b, ta, tb } => {
                let mut grads = Vec::with_capacity(2);
                if reach[a] {
                    let ga = if ta {
                        v(b).matmul_t(g, tb, true)
                    } else {
                        g.matmul_t(v(b), false, !tb)
                    };
                    grads.push((a, ga));
                }
                if reach[b] {
                    let gb = if tb {
                        g.matmul_t(v(a), true, ta)
                    } else {
                        v(a).matmul_t(g, !ta, false)
                    };
                    grads.push((b, gb));
                }
                grads
            }
            Sigmoid(a) => vec![(a, g.mul(out.mul(out.neg().add_scalar(1.0))))],
            Tanh(a) => vec![(a, g.mul(out.mul(out).neg().add_scalar(1.0)))],
            Exp(a) => vec![(a, g.mul(out))],
            Ln(a) => vec![(a, g.mul(v(a).powf(-1.0)))],
            Softplus(a) => vec![(a, g.mul(v(a).sigmoid()))],
            Powf(a, p) => vec![(a, g.mul(v(a).powf(p - 1.0).scale(p)))],
            Reshape(a) => {
                let shape = self.value_of(a).shape().to_vec();
                vec![(a, g.reshape(&shape))]
            }
            SliceCols { a, start } => {
                let total = self.value_of(a).cols();
                vec![(a, g.pad_cols(start, total))]
            }
            PadCols { a, start } => {
                let len = self.value_of(a).cols();
                vec![(a, g.slice_cols(start, len))]
            }
            ConcatCols(ids) => {
                let mut offset = 0;
                ids.iter()
                    .map(|&p| {
                        let len = self.value_of(p).cols();
                        let part = g.slice_cols(offset, len);
                        offset += len;
                        (p, part)
                    })
                    .collect()
            }
            GatherRows { a, index } => {
                let rows = self.value_of(a).rows();
                vec![(a, g.scatter_rows_rc(index, rows))]
            }
            ScatterRows { a, index } => vec![(a, g.gather_rows_rc(index))],
            Conv2d { x, w, geom } => {
                let gv = g.value();
                let mut grads = Vec::with_capacity(2);
                if reach[x] {
                    let dx = kernels::conv2d_grad_input(&geom, gv.data(), self.value_of(w).data());
                    let xs = self.value_of(x).shape().to_vec();
                    grads.push((x, self.opaque("conv2d_grad_input", Tensor::new(xs, dx), &[g.id, w])));
                }
                if reach[w] {
                    let dw = kernels::conv2d_grad_weight(&geom, self.value_of(x).data(), gv.data());
                    let ws = self.value_of(w).shape().to_vec();
                    grads.push((w, self.opaque("conv2d_grad_weight", Tensor::new(ws, dw), &[g.id, x])));
                }
                grads
            }
            AddChannel(x, b) => {
                let gv = g.value();
                let s = gv.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut db = vec![0.0; c];
                for i in 0..n {
                    for (ch, d) in db.iter_mut().enumerate() {
                        let off = (i * c + ch) * hw;
                        *d += gv.data()[off..off + hw].iter().sum::<f64>();
                    }
                }
                vec![(x, g), (b, self.opaque("channel_sum", Tensor::new(vec![c], db), &[g.id]))]
            }
            MaxPool2 { x, index } => {
                let gv = g.value();
                let xs = self.value_of(x).shape().to_vec();
                let mut dx = Tensor::zeros(&xs);
                for (k, &src) in index.iter().enumerate() {
                    dx.data_mut()[src] += gv.data()[k];
                }
                vec![(x, self.opaque("max_pool2_grad", dx, &[g.id]))]
            }
            GlobalAvgPool(x) => {
                let gv = g.value();
                let xs = self.value_of(x).shape().to_vec();
                let hw = xs[2] * xs[3];
                let mut dx = Tensor::zeros(&xs);
                for (plane, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                    let val = gv.data()[plane] / hw as f64;
                    chunk.iter_mut().for_each(|d| *d = val);
                }
                vec![(x, self.opaque("global_avg_pool_grad", dx, &[g.id]))]
            }
            Opaque(name, _) => return Err(AutogradError::NotDifferentiable(name)),
        })
    }

    fn opaque(&self, name: &'static str, value: Tensor, parents: &[usize]) -> Var<'_> {
        self.push(Rc::new(value), Op::Opaque(name, parents.to_vec()))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Single-element value.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let val = self.value().map(f);
        self.tape.push(Rc::new(val), op)
    }

    fn binary(&self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let val = self.value().zip(&other.value(), f);
        self.tape.push(Rc::new(val), op)
    }

    /// Copy of the value with no history.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push(self.value(), Op::Leaf)
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |a| -a)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |a| a * s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| a + s)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(Op::Powf(self.id, p), |a| a.powf(p))
    }

    /// Mish: `x · tanh(softplus(x))`, built from primitives so every
    /// derivative order is available.
    pub fn mish(&self) -> Var<'t> {
        self.mul(self.softplus().tanh())
    }

    /// Rectifier as multiplication by a constant step mask.
    pub fn relu(&self) -> Var<'t> {
        let mask = self.value().map(|a| if a > 0.0 { 1.0 } else { 0.0 });
        self.mul(self.tape.leaf(mask))
    }

    /// `[n, m] + [m]` broadcast over rows.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), row.value());
        let m = a.cols();
        assert_eq!(b.numel(), m, "add_row width mismatch");
        let mut out = (*a).clone();
        for chunk in out.data_mut().chunks_mut(m.max(1)) {
            chunk.iter_mut().zip(b.data()).for_each(|(o, r)| *o += r);
        }
        self.tape.push(Rc::new(out), Op::AddRow(self.id, row.id))
    }

    /// `[n, m] * [m]` broadcast over rows.
    pub fn mul_row(&self, row: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), row.value());
        let m = a.cols();
        assert_eq!(b.numel(), m, "mul_row width mismatch");
        let mut out = (*a).clone();
        for chunk in out.data_mut().chunks_mut(m.max(1)) {
            chunk.iter_mut().zip(b.data()).for_each(|(o, r)| *o *= r);
        }
        self.tape.push(Rc::new(out), Op::MulRow(self.id, row.id))
    }

    /// `[n, m] -> [m]`
    pub fn sum_rows(&self) -> Var<'t> {
        let a = self.value();
        let m = a.cols();
        let mut out = vec![0.0; m];
        for i in 0..a.rows() {
            out.iter_mut().zip(a.row(i)).for_each(|(o, v)| *o += v);
        }
        self.tape.push(Rc::new(Tensor::new(vec![m], out)), Op::SumRows(self.id))
    }

    /// `[m] -> [n, m]`
    pub fn broadcast_rows(&self, n: usize) -> Var<'t> {
        let a = self.value();
        let mut out = Vec::with_capacity(n * a.numel());
        for _ in 0..n {
            out.extend_from_slice(a.data());
        }
        self.tape
            .push(Rc::new(Tensor::new(vec![n, a.numel()], out)), Op::BroadcastRows(self.id))
    }

    /// `[n, m] -> [n, 1]`
    pub fn sum_cols(&self) -> Var<'t> {
        let a = self.value();
        let n = a.rows();
        let out = (0..n).map(|i| a.row(i).iter().sum()).collect();
        self.tape.push(Rc::new(Tensor::new(vec![n, 1], out)), Op::SumCols(self.id))
    }

    /// `[n, 1] -> [n, m]`
    pub fn broadcast_cols(&self, m: usize) -> Var<'t> {
        let a = self.value();
        let n = a.numel();
        let mut out = Vec::with_capacity(n * m);
        for &v in a.data() {
            out.extend(std::iter::repeat(v).take(m));
        }
        self.tape.push(Rc::new(Tensor::new(vec![n, m], out)), Op::BroadcastCols(self.id))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Rc::new(Tensor::scalar(s)), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Broadcast a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Var<'t> {
        let s = self.item();
        self.tape.push(Rc::new(Tensor::full(shape, s)), Op::Expand(self.id))
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` with optional transposes.
    pub fn matmul_t(&self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (c, m, n) = kernels::matmul(
            a.data(),
            a.rows(),
            a.cols(),
            ta,
            b.data(),
            b.rows(),
            b.cols(),
            tb,
        );
        self.tape.push(
            Rc::new(Tensor::new(vec![m, n], c)),
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        self.tape.push(Rc::new(a.reshape(shape)), Op::Reshape(self.id))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        let a = self.value();
        let (n, m) = (a.rows(), a.cols());
        assert!(start + len <= m, "slice_cols {start}+{len} out of {m}");
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&a.row(i)[start..start + len]);
        }
        self.tape.push(
            Rc::new(Tensor::new(vec![n, len], out)),
            Op::SliceCols { a: self.id, start },
        )
    }

    /// Embeds a matrix at column `start` of a zero matrix `total` wide.
    pub fn pad_cols(&self, start: usize, total: usize) -> Var<'t> {
        let a = self.value();
        let (n, m) = (a.rows(), a.cols());
        assert!(start + m <= total);
        let mut out = vec![0.0; n * total];
        for i in 0..n {
            out[i * total + start..i * total + start + m].copy_from_slice(a.row(i));
        }
        self.tape.push(
            Rc::new(Tensor::new(vec![n, total], out)),
            Op::PadCols { a: self.id, start },
        )
    }

    /// Row `i` of the result is row `index[i]` of `self`.
    pub fn gather_rows(&self, index: &[usize]) -> Var<'t> {
        self.gather_rows_rc(Rc::new(index.to_vec()))
    }

    fn gather_rows_rc(&self, index: Rc<Vec<usize>>) -> Var<'t> {
        let a = self.value();
        let m = a.cols();
        let mut out = Vec::with_capacity(index.len() * m);
        for &r in index.iter() {
            out.extend_from_slice(a.row(r));
        }
        self.tape.push(
            Rc::new(Tensor::new(vec![index.len(), m], out)),
            Op::GatherRows { a: self.id, index },
        )
    }

    fn scatter_rows_rc(&self, index: Rc<Vec<usize>>, rows: usize) -> Var<'t> {
        let a = self.value();
        let m = a.cols();
        let mut out = vec![0.0; rows * m];
        for (i, &r) in index.iter().enumerate() {
            out[r * m..(r + 1) * m]
                .iter_mut()
                .zip(a.row(i))
                .for_each(|(o, v)| *o += v);
        }
        self.tape.push(
            Rc::new(Tensor::new(vec![rows, m], out)),
            Op::ScatterRows { a: self.id, index },
        )
    }

    /// Stride-1 convolution of `[n, c, h, w]` by `[o, c, kh, kw]`.
    pub fn conv2d(&self, weight: Var<'t>, pad: usize) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        assert_eq!(xs.len(), 4, "conv2d input must be 4-D");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-D");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            kh: ws[2],
            kw: ws[3],
            pad,
        };
        let out = kernels::conv2d_forward(&geom, x.data(), w.data());
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        self.tape.push(
            Rc::new(Tensor::new(shape, out)),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
            },
        )
    }

    /// Adds a per-channel bias `[c]` to `[n, c, h, w]`.
    pub fn add_channel_bias(&self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let s = x.shape();
        let hw = s[2] * s[3];
        let mut out = (*x).clone();
        for (plane, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let bv = b.data()[plane % s[1]];
            chunk.iter_mut().for_each(|o| *o += bv);
        }
        self.tape.push(Rc::new(out), Op::AddChannel(self.id, bias.id))
    }

    pub fn max_pool2(&self) -> Var<'t> {
        let x = self.value();
        let s = x.shape();
        let (out, index) = kernels::max_pool2(x.data(), s[0], s[1], s[2], s[3]);
        self.tape.push(
            Rc::new(Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)),
            Op::MaxPool2 {
                x: self.id,
                index: Rc::new(index),
            },
        )
    }

    /// `[n, c, h, w] -> [n, c]`
    pub fn global_avg_pool(&self) -> Var<'t> {
        let x = self.value();
        let s = x.shape();
        let hw = s[2] * s[3];
        let out = x.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        self.tape
            .push(Rc::new(Tensor::new(vec![s[0], s[1]], out)), Op::GlobalAvgPool(self.id))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
