//! Operation tape for reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its value and the
//! information its backward rule needs. [`Tape::backward`] consumes the tape,
//! so recorded intermediates are freed after one pass.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Deliberate corruption of one backward rule, used as a negative control
/// for the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    GeluDerivative,
    SoftmaxJacobian,
    MatmulLhs,
}

impl Fault {
    pub const ALL: [Fault; 3] = [Fault::GeluDerivative, Fault::SoftmaxJacobian, Fault::MatmulLhs];

    pub fn name(self) -> &'static str {
        match self {
            Fault::GeluDerivative => "gelu",
            Fault::SoftmaxJacobian => "softmax",
            Fault::MatmulLhs => "matmul",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fault {s:?}; expected gelu, softmax or matmul")))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    /// Pass-through; only useful in tests and degenerate configurations.
    Identity,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Softplus(Var),
    CenterRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Gather {
        x: Var,
        index: Rc<Vec<Option<usize>>>,
    },
    Reshape(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Minimum(a, b) | Maximum(a, b)
            | AddRow(a, b) | ScaleRows(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Transpose(a) | Sum(a) | Softmax(a) | Gelu(a)
            | Relu(a) | Softplus(a) | CenterRows(a) | Reshape(a) => vec![*a],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            SliceCols { x, .. } | SliceRows { x, .. } | Gather { x, .. } => vec![*x],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
    fault: Cell<Option<Fault>>,
}

/// `C = A · B` for row-major `A: m×k`, `B: k×n`, with optional transposes
/// expressed through strides. Accumulates into `c` when `beta == 1`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    // Row-major A (m×k) has strides (k, 1); stored transposed (k×m) it is (1, m).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index reachable through the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn require_rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Invalid(format!("{op} expects a rank-2 tensor, got {shape:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts one backward rule on this tape.
    pub fn set_fault(&self, fault: Option<Fault>) {
        self.fault.set(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.parents().iter().any(|p| nodes[p.0].needs_grad);
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records a tensor as a leaf. Gradients flow to it iff `requires_grad` is set.
    pub fn leaf(&self, t: &Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(nodes.len() - 1)
    }

    /// Records a tensor that never receives gradient.
    pub fn constant(&self, t: &Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let v = self.leaf(store.get(id));
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node is well-formed")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    /// Number of recorded ops that read `v` directly.
    pub fn consumers(&self, v: Var) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| n.op.parents().contains(&v))
            .count()
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape != nb.shape {
                return shape_err(name, &na.shape, &nb.shape);
            }
            let v = na.value.iter().zip(&nb.value).map(|(x, y)| f(*x, *y)).collect();
            (na.shape.clone(), v)
        };
        Ok(self.push(shape, value, op))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.shape.clone(), n.value.iter().map(|v| f(*v)).collect())
        };
        self.push(shape, value, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    /// `x[.., C] + v[C]`, the one broadcast the tape supports.
    pub fn add_row(&self, x: Var, v: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (nx, nv) = (&nodes[x.0], &nodes[v.0]);
            let c = last_dim(&nx.shape);
            if nv.value.len() != c || last_dim(&nv.shape) != c {
                return shape_err("add_row", &nx.shape, &nv.shape);
            }
            let mut out = nx.value.clone();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(&nv.value).for_each(|(o, b)| *o += b);
            }
            (nx.shape.clone(), out)
        };
        Ok(self.push(shape, value, Op::AddRow(x, v)))
    }

    /// Multiplies each row of `x[T×C]` by the matching entry of `s[T×1]`.
    pub fn scale_rows(&self, x: Var, s: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (nx, ns) = (&nodes[x.0], &nodes[s.0]);
            let (t, c) = require_rank2("scale_rows", &nx.shape)?;
            if ns.value.len() != t {
                return shape_err("scale_rows", &nx.shape, &ns.shape);
            }
            let mut out = nx.value.clone();
            for (row, g) in out.chunks_mut(c).zip(&ns.value) {
                row.iter_mut().for_each(|o| *o *= g);
            }
            (nx.shape.clone(), out)
        };
        Ok(self.push(shape, value, Op::ScaleRows(x, s)))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (m, k) = require_rank2("matmul", &na.shape)?;
            let (k2, n) = require_rank2("matmul", &nb.shape)?;
            if k != k2 {
                return shape_err("matmul", &na.shape, &nb.shape);
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, &na.value, false, &nb.value, false, &mut out, 0.0);
            (vec![m, n], out)
        };
        Ok(self.push(shape, value, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let (r, c) = require_rank2("transpose", &n.shape)?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = n.value[i * c + j];
                }
            }
            (vec![c, r], out)
        };
        Ok(self.push(shape, value, Op::Transpose(x)))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.nodes.borrow()[x.0].value.iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.nodes.borrow()[x.0].value.len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax over the last axis, stabilized by the row maximum.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if n.shape.is_empty() {
                return Err(Error::Invalid("softmax_rows on a scalar".into()));
            }
            let c = last_dim(&n.shape);
            let mut out = n.value.clone();
            for row in out.chunks_mut(c) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            (n.shape.clone(), out)
        };
        Ok(self.push(shape, value, Op::Softmax(x)))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (shape, value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (nx, ng, nb) = (&nodes[x.0], &nodes[gamma.0], &nodes[beta.0]);
            let c = last_dim(&nx.shape);
            if ng.value.len() != c {
                return shape_err("layer_norm", &nx.shape, &ng.shape);
            }
            if nb.value.len() != c {
                return shape_err("layer_norm", &nx.shape, &nb.shape);
            }
            let rows = nx.value.len() / c;
            let mut xhat = vec![0.0; nx.value.len()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; nx.value.len()];
            for r in 0..rows {
                let row = &nx.value[r * c..(r + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..c {
                    let h = (row[j] - mu) * inv;
                    xhat[r * c + j] = h;
                    out[r * c + j] = ng.value[j] * h + nb.value[j];
                }
            }
            (nx.shape.clone(), out, xhat, inv_std)
        };
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, gelu_scalar, Op::Gelu(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, softplus_scalar, Op::Softplus(x))
    }

    pub fn activation(&self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Gelu => self.gelu(x),
            Activation::Relu => self.relu(x),
            Activation::Identity => x,
        }
    }

    /// Subtracts the column mean (mean over rows) from every row of `x[T×C]`.
    pub fn center_rows(&self, x: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let (t, c) = require_rank2("center_rows", &n.shape)?;
            let mut mean = vec![0.0; c];
            for row in n.value.chunks(c) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= t as f64);
            let mut out = n.value.clone();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(&mean).for_each(|(o, m)| *o -= m);
            }
            (n.shape.clone(), out)
        };
        Ok(self.push(shape, value, Op::CenterRows(x)))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let (r, c) = require_rank2("slice_cols", &n.shape)?;
            if len == 0 || start + len > c {
                return shape_err("slice_cols", &n.shape, &[start, len]);
            }
            let mut out = Vec::with_capacity(r * len);
            for row in n.value.chunks(c) {
                out.extend_from_slice(&row[start..start + len]);
            }
            (vec![r, len], out)
        };
        Ok(self.push(shape, value, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0];
            let (r, _) = require_rank2("concat_cols", &first.shape)?;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (pr, pc) = require_rank2("concat_cols", &nodes[p.0].shape)?;
                if pr != r {
                    return shape_err("concat_cols", &first.shape, &nodes[p.0].shape);
                }
                widths.push(pc);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(r * total);
            for i in 0..r {
                for (p, w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.0].value[i * w..(i + 1) * w]);
                }
            }
            (vec![r, total], out)
        };
        Ok(self.push(shape, value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let (r, c) = require_rank2("slice_rows", &n.shape)?;
            if len == 0 || start + len > r {
                return shape_err("slice_rows", &n.shape, &[start, len]);
            }
            (vec![len, c], n.value[start * c..(start + len) * c].to_vec())
        };
        Ok(self.push(shape, value, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0];
            let (_, c) = require_rank2("concat_rows", &first.shape)?;
            let mut rows = 0;
            let mut out = Vec::new();
            for p in parts {
                let (pr, pc) = require_rank2("concat_rows", &nodes[p.0].shape)?;
                if pc != c {
                    return shape_err("concat_rows", &first.shape, &nodes[p.0].shape);
                }
                rows += pr;
                out.extend_from_slice(&nodes[p.0].value);
            }
            (vec![rows, c], out)
        };
        Ok(self.push(shape, value, Op::ConcatRows(parts.to_vec())))
    }

    /// `out[i] = x[index[i]]`, or zero where the index is `None`.
    pub fn gather(
        &self,
        x: Var,
        index: Rc<Vec<Option<usize>>>,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if shape.iter().product::<usize>() != index.len() {
                return shape_err("gather", &shape, &[index.len()]);
            }
            let mut out = Vec::with_capacity(index.len());
            for i in index.iter() {
                out.push(match i {
                    Some(j) if *j < n.value.len() => n.value[*j],
                    Some(j) => {
                        return Err(Error::Invalid(format!(
                            "gather index {j} out of range {}",
                            n.value.len()
                        )))
                    }
                    None => 0.0,
                });
            }
            out
        };
        Ok(self.push(shape, value, Op::Gather { x, index }))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if shape.iter().product::<usize>() != n.value.len() {
                return shape_err("reshape", &n.shape, &shape);
            }
            n.value.clone()
        };
        Ok(self.push(shape, value, Op::Reshape(x)))
    }

    /// Runs the reverse pass from a scalar loss, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Grads> {
        let fault = self.fault.get();
        let params = self.params.into_inner();
        let nodes = self.nodes.into_inner();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.needs_grad {
                backprop(&nodes, node, &dy, &mut grads, fault);
            }
            grads[i] = Some(dy);
        }

        let mut values = Vec::with_capacity(nodes.len());
        let mut shapes = Vec::with_capacity(nodes.len());
        for (node, g) in nodes.into_iter().zip(grads) {
            values.push(if node.needs_grad { g } else { None });
            shapes.push(node.shape);
        }
        Ok(Grads {
            values,
            shapes,
            params,
        })
    }

    /// Backward pass whose parameter gradients are added to `store`.
    pub fn backward_into(self, loss: Var, store: &mut ParamStore) -> Result<f64> {
        let value = self.scalar(loss);
        self.backward(loss)?.accumulate_into(store);
        Ok(value)
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(
    nodes: &[Node],
    node: &Node,
    dy: &[f64],
    grads: &mut [Option<Vec<f64>>],
    fault: Option<Fault>,
) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(g) = acc(grads, nodes, *a) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = acc(grads, nodes, *b) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
        }
        Op::Sub(a, b) => {
            if let Some(g) = acc(grads, nodes, *a) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = acc(grads, nodes, *b) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..dy.len() {
                    g[i] += dy[i] * vb[i];
                }
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for i in 0..dy.len() {
                    g[i] += dy[i] * va[i];
                }
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..dy.len() {
                    g[i] += dy[i] / vb[i];
                }
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for i in 0..dy.len() {
                    g[i] -= dy[i] * va[i] / (vb[i] * vb[i]);
                }
            }
        }
        Op::Minimum(a, b) | Op::Maximum(a, b) => {
            let take_min = matches!(node.op, Op::Minimum(..));
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let pick_a: Vec<bool> = va
                .iter()
                .zip(vb)
                .map(|(x, y)| if take_min { x <= y } else { x >= y })
                .collect();
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..dy.len() {
                    if pick_a[i] {
                        g[i] += dy[i];
                    }
                }
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for i in 0..dy.len() {
                    if !pick_a[i] {
                        g[i] += dy[i];
                    }
                }
            }
        }
        Op::AddRow(x, v) => {
            if let Some(g) = acc(grads, nodes, *x) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            let c = nodes[v.0].value.len();
            if let Some(g) = acc(grads, nodes, *v) {
                for row in dy.chunks(c) {
                    g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::ScaleRows(x, s) => {
            let c = last_dim(&node.shape);
            let (vx, vs) = (&nodes[x.0].value, &nodes[s.0].value);
            if let Some(g) = acc(grads, nodes, *x) {
                for (r, gs) in vs.iter().enumerate() {
                    for j in 0..c {
                        g[r * c + j] += dy[r * c + j] * gs;
                    }
                }
            }
            if let Some(g) = acc(grads, nodes, *s) {
                for r in 0..vs.len() {
                    let row = r * c..(r + 1) * c;
                    g[r] += dy[row.clone()]
                        .iter()
                        .zip(&vx[row])
                        .map(|(d, v)| d * v)
                        .sum::<f64>();
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(g) = acc(grads, nodes, *x) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * c);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(g) = acc(grads, nodes, *x) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(g) = acc(grads, nodes, *a) {
                // dA = dY · Bᵀ
                gemm(m, n, k, dy, false, vb, true, g, 1.0);
                if fault == Some(Fault::MatmulLhs) {
                    g.iter_mut().for_each(|v| *v *= 1.01);
                }
            }
            if let Some(g) = acc(grads, nodes, *b) {
                // dB = Aᵀ · dY
                gemm(k, m, n, va, true, dy, false, g, 1.0);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (node.shape[1], node.shape[0]);
            if let Some(g) = acc(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += dy[j * r + i];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(g) = acc(grads, nodes, *x) {
                g.iter_mut().for_each(|g| *g += dy[0]);
            }
        }
        Op::Softmax(x) => {
            let c = last_dim(&node.shape);
            let y = &node.value;
            if let Some(g) = acc(grads, nodes, *x) {
                for (r, (yr, dr)) in y.chunks(c).zip(dy.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    let dot = if fault == Some(Fault::SoftmaxJacobian) { 0.0 } else { dot };
                    for j in 0..c {
                        g[r * c + j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = last_dim(&node.shape);
            let vg = &nodes[gamma.0].value;
            if let Some(g) = acc(grads, nodes, *beta) {
                for row in dy.chunks(c) {
                    g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
            if let Some(g) = acc(grads, nodes, *gamma) {
                for (row, hrow) in dy.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        g[j] += row[j] * hrow[j];
                    }
                }
            }
            if let Some(g) = acc(grads, nodes, *x) {
                let cf = c as f64;
                for (r, inv) in inv_std.iter().enumerate() {
                    let drow = &dy[r * c..(r + 1) * c];
                    let hrow = &xhat[r * c..(r + 1) * c];
                    let dh: Vec<f64> = (0..c).map(|j| drow[j] * vg[j]).collect();
                    let s1: f64 = dh.iter().sum();
                    let s2: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[r * c + j] += inv / cf * (cf * dh[j] - s1 - hrow[j] * s2);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let vx = &nodes[x.0].value;
            let k = if fault == Some(Fault::GeluDerivative) { 1.1 } else { 1.0 };
            if let Some(g) = acc(grads, nodes, *x) {
                for i in 0..dy.len() {
                    g[i] += dy[i] * gelu_grad_scalar(vx[i]) * k;
                }
            }
        }
        Op::Relu(x) => {
            let vx = &nodes[x.0].value;
            if let Some(g) = acc(grads, nodes, *x) {
                for i in 0..dy.len() {
                    if vx[i] > 0.0 {
                        g[i] += dy[i];
                    }
                }
            }
        }
        Op::Softplus(x) => {
            let vx = &nodes[x.0].value;
            if let Some(g) = acc(grads, nodes, *x) {
                for i in 0..dy.len() {
                    g[i] += dy[i] / (1.0 + (-vx[i]).exp());
                }
            }
        }
        Op::CenterRows(x) => {
            let (t, c) = (node.shape[0], node.shape[1]);
            if let Some(g) = acc(grads, nodes, *x) {
                let mut mean = vec![0.0; c];
                for row in dy.chunks(c) {
                    mean.iter_mut().zip(row).for_each(|(m, d)| *m += d);
                }
                mean.iter_mut().for_each(|m| *m /= t as f64);
                for (grow, drow) in g.chunks_mut(c).zip(dy.chunks(c)) {
                    for j in 0..c {
                        grow[j] += drow[j] - mean[j];
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            let len = node.shape[1];
            let c = nodes[x.0].shape[1];
            if let Some(g) = acc(grads, nodes, *x) {
                for (grow, drow) in g.chunks_mut(c).zip(dy.chunks(len)) {
                    grow[*start..start + len]
                        .iter_mut()
                        .zip(drow)
                        .for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.shape[1];
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].shape[1];
                if let Some(g) = acc(grads, nodes, *p) {
                    for (grow, drow) in g.chunks_mut(w).zip(dy.chunks(total)) {
                        grow.iter_mut()
                            .zip(&drow[offset..offset + w])
                            .for_each(|(g, d)| *g += d);
                    }
                }
                offset += w;
            }
        }
        Op::SliceRows { x, start } => {
            let c = node.shape[1];
            if let Some(g) = acc(grads, nodes, *x) {
                g[start * c..start * c + dy.len()]
                    .iter_mut()
                    .zip(dy)
                    .for_each(|(g, d)| *g += d);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                if let Some(g) = acc(grads, nodes, *p) {
                    g.iter_mut()
                        .zip(&dy[offset..offset + n])
                        .for_each(|(g, d)| *g += d);
                }
                offset += n;
            }
        }
        Op::Gather { x, index } => {
            if let Some(g) = acc(grads, nodes, *x) {
                for (i, j) in index.iter().enumerate() {
                    if let Some(j) = j {
                        g[*j] += dy[i];
                    }
                }
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Grads {
    values: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    /// Gradient with respect to a recorded value; `None` when no gradient
    /// flows to it.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.values[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Adds parameter gradients into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort();
        for (id, v) in ids {
            if let Some(g) = &self.values[v.0] {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
    }
}
