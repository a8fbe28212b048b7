use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{GradientSet, ParamId, ParamSet};
use crate::array::Array;
use crate::error::{Error, Result};
use crate::math;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(usize, usize),
    /// Same shape, or rhs is a single row broadcast over lhs rows.
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    MaskMul(usize, Array),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MaskMul(..) => "mask_mul",
        }
    }
}

struct Node {
    op: Op,
    value: Array,
    requires_grad: bool,
}

/// Eagerly evaluated computation record over a borrowed parameter set.
///
/// Single-writer: build and differentiate one tape from one thread. Distinct
/// tapes over the same `ParamSet` are independent.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<usize>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// The single value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.0 < self.nodes.len() {
            Ok(v.0)
        } else {
            Err(Error::UnknownNode(v.0))
        }
    }

    fn push(&mut self, op: Op, value: Array) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name(), node });
        }
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.nodes[*a].requires_grad || self.nodes[*b].requires_grad
            }
            Op::Concat(parts) => parts.iter().any(|p| self.nodes[*p].requires_grad),
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Slice { src: a, .. }
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MaskMul(a, _) => self.nodes[*a].requires_grad,
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(node))
    }

    fn shape_err(&self, op: &'static str, detail: alloc::string::String) -> Error {
        Error::Shape {
            op,
            node: self.nodes.len(),
            detail,
        }
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Array) -> Var {
        let node = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Input,
            value,
            requires_grad: false,
        });
        Var(node)
    }

    /// Fallible variant of [`Tape::input`] that rejects non-finite values.
    pub fn checked_input(&mut self, value: Array) -> Result<Var> {
        self.push(Op::Input, value)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(n) = self.param_nodes[id.0] {
            return Var(n);
        }
        let node = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Param(id),
            value: self.params.get(id).clone(),
            requires_grad: true,
        });
        self.param_nodes[id.0] = Some(node);
        Var(node)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, w) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.cols() != w.rows() {
            return Err(self.shape_err(
                "matmul",
                format!("{:?} x {:?}", x.shape(), w.shape()),
            ));
        }
        let (r, n, m) = (x.rows(), x.cols(), w.cols());
        let mut out = Array::zeros(r, m);
        {
            let (xd, wd, od) = (x.data(), w.data(), out.data_mut());
            for i in 0..r {
                let orow = &mut od[i * m..(i + 1) * m];
                for k in 0..n {
                    let a = xd[i * n + k];
                    let wrow = &wd[k * m..(k + 1) * m];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += a * wv;
                    }
                }
            }
        }
        self.push(Op::MatMul(ia, ib), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mut out = x.clone();
        if x.shape() == y.shape() {
            out.add_assign(y);
        } else if y.rows() == 1 && y.cols() == x.cols() {
            let c = x.cols();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o += y.data()[i % c];
            }
        } else {
            return Err(self.shape_err("add", format!("{:?} + {:?}", x.shape(), y.shape())));
        }
        self.push(Op::Add(ia, ib), out)
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(usize, usize, Array)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.shape() != y.shape() {
            return Err(self.shape_err(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Array::from_vec(x.rows(), x.cols(), data)?;
        Ok((ia, ib, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_same(a, b, "sub", |p, q| p - q)?;
        self.push(Op::Sub(ia, ib), out)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_same(a, b, "mul", |p, q| p * q)?;
        self.push(Op::Mul(ia, ib), out)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<(usize, Array)> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        let data = x.data().iter().map(|&v| f(v)).collect();
        Ok((ia, Array::from_vec(x.rows(), x.cols(), data)?))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let (ia, out) = self.map(a, |v| v * k)?;
        self.push(Op::Scale(ia, k), out)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, k: f64) -> Result<Var> {
        let (ia, out) = self.map(a, |v| v + k)?;
        self.push(Op::Offset(ia), out)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Column-wise concatenation; all parts share a row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.shape_err("concat", "no parts".into()));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let rows = self.nodes[idx[0]].value.rows();
        if idx.iter().any(|&i| self.nodes[i].value.rows() != rows) {
            return Err(self.shape_err("concat", "row counts differ".into()));
        }
        let cols: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                let v = &self.nodes[i].value;
                data.extend_from_slice(&v.data()[r * v.cols()..(r + 1) * v.cols()]);
            }
        }
        let out = Array::from_vec(rows, cols, data)?;
        self.push(Op::Concat(idx), out)
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if start + len > x.cols() || len == 0 {
            return Err(self.shape_err(
                "slice",
                format!("columns {start}..{} of {:?}", start + len, x.shape()),
            ));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.data()[r * x.cols() + start..r * x.cols() + start + len]);
        }
        let out = Array::from_vec(x.rows(), len, data)?;
        self.push(Op::Slice { src: ia, start }, out)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let (ia, out) = self.map(a, math::tanh)?;
        self.push(Op::Tanh(ia), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (ia, out) = self.map(a, math::sigmoid)?;
        self.push(Op::Sigmoid(ia), out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let (ia, out) = self.map(a, math::exp)?;
        self.push(Op::Exp(ia), out)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let (ia, out) = self.map(a, math::ln)?;
        self.push(Op::Log(ia), out)
    }

    fn row_softmax(x: &Array, log: bool) -> Array {
        let c = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            let lse = math::log_sum_exp(row);
            for v in row.iter_mut() {
                *v = if log { *v - lse } else { math::exp(*v - lse) };
            }
        }
        out
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Self::row_softmax(&self.nodes[ia].value, false);
        self.push(Op::Softmax(ia), out)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Self::row_softmax(&self.nodes[ia].value, true);
        self.push(Op::LogSoftmax(ia), out)
    }

    /// Sum of all elements, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        self.push(Op::Sum(ia), Array::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if x.is_empty() {
            return Err(self.shape_err("mean", "empty input".into()));
        }
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Op::Mean(ia), Array::scalar(s))
    }

    /// Multiplies by a fixed mask (dropout). The mask carries no gradient.
    pub fn mask_mul(&mut self, a: Var, mask: Array) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if x.shape() != mask.shape() {
            return Err(self.shape_err(
                "mask_mul",
                format!("{:?} vs mask {:?}", x.shape(), mask.shape()),
            ));
        }
        let data = x.data().iter().zip(mask.data()).map(|(p, q)| p * q).collect();
        let out = Array::from_vec(x.rows(), x.cols(), data)?;
        self.push(Op::MaskMul(ia, mask), out)
    }

    /// Sum of several scalars (or same-shaped arrays).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| self.shape_err("add", "no terms".into()))?;
        rest.iter().try_fold(*first, |acc, &t| self.add(acc, t))
    }

    /// Gradient of a scalar node with respect to every parameter.
    pub fn backward(&self, output: Var) -> Result<GradientSet> {
        let out = self.check(output)?;
        let v = &self.nodes[out].value;
        if v.shape() != [1, 1] {
            return Err(Error::NotScalar {
                node: out,
                rows: v.rows(),
                cols: v.cols(),
            });
        }
        let mut grads: Vec<Option<Array>> = vec![None; out + 1];
        grads[out] = Some(Array::scalar(1.0));
        let mut result = self.params.zero_gradients();

        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => result.get_mut(*id).add_assign(&g),
                Op::MatMul(a, b) => {
                    let (x, w) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (r, n, m) = (x.rows(), x.cols(), w.cols());
                    if self.nodes[*a].requires_grad {
                        let da = acc(&mut grads, *a, x);
                        let (gd, wd, dd) = (g.data(), w.data(), da.data_mut());
                        for i in 0..r {
                            let grow = &gd[i * m..(i + 1) * m];
                            for k in 0..n {
                                let wrow = &wd[k * m..(k + 1) * m];
                                dd[i * n + k] +=
                                    grow.iter().zip(wrow).map(|(p, q)| p * q).sum::<f64>();
                            }
                        }
                    }
                    if self.nodes[*b].requires_grad {
                        let db = acc(&mut grads, *b, w);
                        let (gd, xd, dd) = (g.data(), x.data(), db.data_mut());
                        for i in 0..r {
                            let grow = &gd[i * m..(i + 1) * m];
                            for k in 0..n {
                                let a = xd[i * n + k];
                                for (d, &gv) in dd[k * m..(k + 1) * m].iter_mut().zip(grow) {
                                    *d += a * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].requires_grad {
                        acc(&mut grads, *a, &g).add_assign(&g);
                    }
                    if self.nodes[*b].requires_grad {
                        let y = &self.nodes[*b].value;
                        let db = acc(&mut grads, *b, y);
                        if y.shape() == g.shape() {
                            db.add_assign(&g);
                        } else {
                            let c = y.cols();
                            for (j, gv) in g.data().iter().enumerate() {
                                db.data_mut()[j % c] += gv;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[*a].requires_grad {
                        acc(&mut grads, *a, &g).add_assign(&g);
                    }
                    if self.nodes[*b].requires_grad {
                        for (d, gv) in acc(&mut grads, *b, &g).data_mut().iter_mut().zip(g.data()) {
                            *d -= gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].requires_grad {
                        let da = acc(&mut grads, *a, x);
                        for ((d, gv), yv) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                            *d += gv * yv;
                        }
                    }
                    if self.nodes[*b].requires_grad {
                        let db = acc(&mut grads, *b, y);
                        for ((d, gv), xv) in db.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                            *d += gv * xv;
                        }
                    }
                }
                Op::Scale(a, k) => {
                    for (d, gv) in acc(&mut grads, *a, &g).data_mut().iter_mut().zip(g.data()) {
                        *d += gv * k;
                    }
                }
                Op::Offset(a) => acc(&mut grads, *a, &g).add_assign(&g),
                Op::MaskMul(a, mask) => {
                    let da = acc(&mut grads, *a, &g);
                    for ((d, gv), mv) in da.data_mut().iter_mut().zip(g.data()).zip(mask.data()) {
                        *d += gv * mv;
                    }
                }
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let mut col = 0;
                    for &p in parts {
                        let pv = &self.nodes[p].value;
                        let pc = pv.cols();
                        if self.nodes[p].requires_grad {
                            let dp = acc(&mut grads, p, pv);
                            for r in 0..rows {
                                let src = &g.data()[r * g.cols() + col..r * g.cols() + col + pc];
                                for (d, s) in dp.data_mut()[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        col += pc;
                    }
                }
                Op::Slice { src, start } => {
                    let sv = &self.nodes[*src].value;
                    let sc = sv.cols();
                    let len = g.cols();
                    let ds = acc(&mut grads, *src, sv);
                    for r in 0..g.rows() {
                        let gr = &g.data()[r * len..(r + 1) * len];
                        for (d, gv) in ds.data_mut()[r * sc + start..r * sc + start + len]
                            .iter_mut()
                            .zip(gr)
                        {
                            *d += gv;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = acc(&mut grads, *a, y);
                    for ((d, gv), yv) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = acc(&mut grads, *a, y);
                    for ((d, gv), yv) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    let da = acc(&mut grads, *a, y);
                    for ((d, gv), yv) in da.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * yv;
                    }
                }
                Op::Log(a) => {
                    let x = &self.nodes[*a].value;
                    let da = acc(&mut grads, *a, x);
                    for ((d, gv), xv) in da.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *d += gv / xv;
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let da = acc(&mut grads, *a, y);
                    for r in 0..y.rows() {
                        let yr = &y.data()[r * c..(r + 1) * c];
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            da.data_mut()[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let da = acc(&mut grads, *a, y);
                    for r in 0..y.rows() {
                        let yr = &y.data()[r * c..(r + 1) * c];
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..c {
                            da.data_mut()[r * c + j] += gr[j] - math::exp(yr[j]) * gsum;
                        }
                    }
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    for d in acc(&mut grads, *a, &self.nodes[*a].value).data_mut() {
                        *d += gv;
                    }
                }
                Op::Mean(a) => {
                    let x = &self.nodes[*a].value;
                    let gv = g.item() / x.len() as f64;
                    for d in acc(&mut grads, *a, x).data_mut() {
                        *d += gv;
                    }
                }
            }
        }
        Ok(result)
    }
}

fn acc<'g>(grads: &'g mut [Option<Array>], idx: usize, like: &Array) -> &'g mut Array {
    grads[idx].get_or_insert_with(|| Array::zeros(like.rows(), like.cols()))
}
