use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Square(usize),
    LeakyRelu(usize, f64),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    Sum(usize, Vec<usize>),
    Mean(usize, Vec<usize>),
    Reshape(usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    SelectColumns(usize, Vec<usize>),
    LogSoftmax(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Square(..) => "square",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Clamp(..) => "clamp",
            Op::MatMul(..) => "matmul",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::SelectColumns(..) => "select_columns",
            Op::LogSoftmax(..) => "log_softmax",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Append-only record of a computation. Nodes are stored in creation
/// order, so every node's parents precede it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    first_nonfinite: Cell<Option<usize>>,
}

/// A tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` was not reached from the root.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }

    pub fn try_get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads[v.id].as_ref()
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

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.first_nonfinite.get().is_none() && !value.is_finite() {
            self.first_nonfinite.set(Some(id));
        }
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var { tape: self, id }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// The first recorded node holding a NaN or infinity, with its op name.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.first_nonfinite
            .get()
            .map(|id| (id, self.nodes.borrow()[id].op.name()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite() {
            None => Ok(()),
            Some((id, op)) => Err(Error::NonFinite {
                op: format!("{op} (node {id})"),
            }),
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::ForeignVar);
        }
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::ones(root_val.shape().to_vec()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, pg) in vjp(&nodes, node, &g)? {
                if !nodes[parent].tracked {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Vector-Jacobian products of `node` for upstream gradient `g`.
fn vjp(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| &*nodes[i].value;
    let out = &*node.value;
    let unary = |i: usize, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
        let x = val(i);
        let data = g
            .data()
            .iter()
            .zip(x.data())
            .zip(out.data())
            .map(|((&gv, &xv), &yv)| f(gv, xv, yv))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("unary gradient shape")
    };
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![
            (*a, g.reduce_to(val(*a).shape())),
            (*b, g.reduce_to(val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, g.reduce_to(val(*a).shape())),
            (*b, g.reduce_to(val(*b).shape()).scale(-1.0)),
        ],
        Op::Mul(a, b) => vec![
            (*a, g.mul(val(*b))?.reduce_to(val(*a).shape())),
            (*b, g.mul(val(*a))?.reduce_to(val(*b).shape())),
        ],
        Op::Div(a, b) => {
            let ga = g.div(val(*b))?;
            let gb = ga.mul(out)?.scale(-1.0);
            vec![
                (*a, ga.reduce_to(val(*a).shape())),
                (*b, gb.reduce_to(val(*b).shape())),
            ]
        }
        Op::Neg(a) => vec![(*a, g.scale(-1.0))],
        Op::Scale(a, c) => vec![(*a, g.scale(*c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Exp(a) => vec![(*a, unary(*a, &|g, _, y| g * y))],
        Op::Log(a) => vec![(*a, unary(*a, &|g, x, _| g / x))],
        Op::Tanh(a) => vec![(*a, unary(*a, &|g, _, y| g * (1.0 - y * y)))],
        Op::Sigmoid(a) => vec![(*a, unary(*a, &|g, _, y| g * y * (1.0 - y)))],
        Op::Softplus(a) => vec![(*a, unary(*a, &|g, x, _| g * sigmoid(x)))],
        Op::Square(a) => vec![(*a, unary(*a, &|g, x, _| 2.0 * g * x))],
        Op::LeakyRelu(a, slope) => {
            let s = *slope;
            vec![(*a, unary(*a, &|g, x, _| if x > 0.0 { g } else { g * s }))]
        }
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            vec![(
                *a,
                unary(*a, &|g, x, _| if x >= lo && x <= hi { g } else { 0.0 }),
            )]
        }
        Op::MatMul(a, b) => vec![
            (*a, g.matmul_t(val(*b), false, true)?),
            (*b, val(*a).matmul_t(g, true, false)?),
        ],
        Op::Sum(a, axes) => vec![(*a, g.expand_reduced(val(*a).shape(), axes))],
        Op::Mean(a, axes) => {
            let n = (val(*a).len() / g.len().max(1)) as f64;
            vec![(*a, g.expand_reduced(val(*a).shape(), axes).scale(1.0 / n))]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape().to_vec())?)],
        Op::Slice { input, axis, start } => {
            let shape = val(*input).shape();
            let (outer, extent, inner) = Tensor::blocks(shape, *axis);
            let len = g.shape()[*axis];
            let mut full = Tensor::zeros(shape.to_vec());
            for o in 0..outer {
                let dst = o * extent * inner + start * inner;
                let src = o * len * inner;
                full.data_mut()[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![(*input, full)]
        }
        Op::Concat { inputs, axis } => {
            let mut start = 0;
            let mut res = Vec::with_capacity(inputs.len());
            for &i in inputs {
                let ext = val(i).shape()[*axis];
                res.push((i, g.slice(*axis, start, ext)?));
                start += ext;
            }
            res
        }
        Op::SelectColumns(a, idx) => {
            let shape = val(*a).shape();
            let (rows, cols) = (shape[0], shape[1]);
            let mut full = Tensor::zeros(shape.to_vec());
            for r in 0..rows {
                for (j, &c) in idx.iter().enumerate() {
                    full.data_mut()[r * cols + c] += g.data()[r * idx.len() + j];
                }
            }
            vec![(*a, full)]
        }
        Op::LogSoftmax(a) => {
            let k = out.shape()[1];
            let mut data = Vec::with_capacity(out.len());
            for (grow, yrow) in g.data().chunks(k).zip(out.data().chunks(k)) {
                let gs: f64 = grow.iter().sum();
                data.extend(grow.iter().zip(yrow).map(|(gv, yv)| gv - yv.exp() * gs));
            }
            vec![(*a, Tensor::new(out.shape().to_vec(), data)?)]
        }
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'t> {
        let tracked = parents.iter().any(|&p| self.tape.tracked(p));
        self.tape.push(value, op, tracked)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.record(v, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().zip_with(&other.value(), name, f)?;
        Ok(self.record(v, op(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |v| -v)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(self.id, slope), |v| if v > 0.0 { v } else { v * slope })
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().matmul(&other.value())?;
        Ok(self.record(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Sums over `axes`; an empty slice sums everything to a scalar.
    pub fn sum(self, axes: &[usize]) -> Result<Var<'t>> {
        let v = self.value().sum_axes(axes)?;
        Ok(self.record(v, Op::Sum(self.id, axes.to_vec()), &[self.id]))
    }

    pub fn mean(self, axes: &[usize]) -> Result<Var<'t>> {
        let v = self.value().mean_axes(axes)?;
        Ok(self.record(v, Op::Mean(self.id, axes.to_vec()), &[self.id]))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.record(v, Op::Reshape(self.id), &[self.id]))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value().slice(axis, start, len)?;
        Ok(self.record(
            v,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| &**v).collect();
        let v = Tensor::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.record(v, Op::Concat { inputs: ids.clone(), axis }, &ids))
    }

    pub fn select_columns(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value().select_columns(idx)?;
        Ok(self.record(v, Op::SelectColumns(self.id, idx.to_vec()), &[self.id]))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let v = self.value().log_softmax_rows()?;
        Ok(self.record(v, Op::LogSoftmax(self.id), &[self.id]))
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        Ok(self.log_softmax()?.exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 6.0);
        assert_eq!(g.get(y).item(), 1.0);
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(3.0));
        let b = tape.leaf(Tensor::scalar(5.0));
        let g = tape.backward(a.mul(b).unwrap()).unwrap();
        assert_eq!(g.get(a).item(), 5.0);
        assert_eq!(g.get(b).item(), 3.0);
    }

    #[test]
    fn leaky_relu_slope() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let y = x.leaky_relu(0.1);
        assert_eq!(y.value().data(), &[-0.1, 2.0]);
    }

    #[test]
    fn mean_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, 4.0]));
        let m = x.mean(&[]).unwrap();
        assert_eq!(m.value().item(), 3.0);
        assert_eq!(tape.backward(m).unwrap().get(x).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::from_rows(&[vec![0.3, -1.2, 2.5]]).unwrap());
        let s = v.softmax().unwrap().sum(&[]).unwrap();
        let g = tape.backward(s).unwrap().get(v);
        assert!(g.data().iter().all(|x| x.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn unvisited_nodes_have_zero_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let root = a.sum(&[]).unwrap();
        let g = tape.backward(root).unwrap();
        assert!(g.try_get(b).is_none());
        assert_eq!(g.get(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(7.0));
        let root = a.mul(c).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(a).item(), 7.0);
        assert!(g.try_get(c).is_none());
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(Error::NonScalarRoot(_))));
        let other = Tape::new();
        let s = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(s), Err(Error::ForeignVar)));
        assert!(matches!(v.add(s), Err(Error::ForeignVar)));
    }

    #[test]
    fn nonfinite_state_is_flagged() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        assert!(tape.check_finite().is_ok());
        let _ = x.ln();
        assert_eq!(tape.first_nonfinite().map(|(_, op)| op), Some("log"));
        assert!(matches!(tape.check_finite(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.add(x).unwrap().mul(x).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).item(), 8.0);
    }
}
