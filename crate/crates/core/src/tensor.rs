//! Dense row-major `f64` tensors and a define-by-run reverse-mode graph.
//!
//! A [`Graph`] is an append-only tape. Every op pushes one node whose inputs
//! are earlier nodes, so append order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs are rebuilt for
//! every forward pass; parameters enter as leaves copied from their owners.
//!
//! Broadcasting is limited to binary ops whose operands have the same rank
//! and, per axis, either equal extents or an extent of 1 on one side.

use crate::error::{dim_err, Error, Result};

/// Dense n-dimensional array with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a `[rows × cols]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(dim_err("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Exp,
    Log,
    Relu,
    LeakyRelu(f64),
    Softplus,
    Square,
}

impl Elementwise {
    pub fn arity(self) -> usize {
        match self {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Elementwise, Var, Var),
    Unary(Elementwise, Var),
    Scale(Var, f64),
    Offset(Var),
    Reduce(Reduce, Var, Option<usize>),
    Columns(Var, Vec<usize>),
    Rows(Var, usize),
    Reshape(Var),
    Clamp(Var, f64, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only tape of operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    visits: usize,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary_forward(kind: Elementwise, x: f64) -> f64 {
    match kind {
        Elementwise::Sigmoid => sigmoid(x),
        Elementwise::Exp => x.exp(),
        Elementwise::Log => x.ln(),
        Elementwise::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Elementwise::LeakyRelu(slope) => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
        Elementwise::Softplus => softplus(x),
        Elementwise::Square => x * x,
        Elementwise::Add | Elementwise::Sub | Elementwise::Mul => unreachable!(),
    }
}

/// Local derivative given input `x` and output `y`. Kinks use the
/// negative-side slope at exactly zero.
fn unary_derivative(kind: Elementwise, x: f64, y: f64) -> f64 {
    match kind {
        Elementwise::Sigmoid => y * (1.0 - y),
        Elementwise::Exp => y,
        Elementwise::Log => 1.0 / x,
        Elementwise::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Elementwise::LeakyRelu(slope) => {
            if x > 0.0 {
                1.0
            } else {
                slope
            }
        }
        Elementwise::Softplus => sigmoid(x),
        Elementwise::Square => 2.0 * x,
        Elementwise::Add | Elementwise::Sub | Elementwise::Mul => unreachable!(),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each flat index of `out`, the flat index of the (possibly broadcast)
/// operand with shape `input`.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if input[ax] == 1 { 0 } else { acc };
        acc *= input[ax];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// `c (+)= a · b` for row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Logical a is m×k; stored as m×k (row stride k) or, transposed, as k×m.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover m·k, k·n and m·n elements for the strides
    // above, which the callers check through tensor shapes.
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

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes touched by the most recent backward sweep.
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    /// Node input ids, in append order. Used by structural tests.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Reduce(_, a, _)
            | Op::Columns(a, _)
            | Op::Rows(a, _)
            | Op::Reshape(a)
            | Op::Clamp(a, _, _) => vec![*a],
        }
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        value.requires_grad = inputs
            .iter()
            .any(|v| self.nodes[v.0].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.requires_grad = true;
        self.leaf(t)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value.data,
            false,
            &self.nodes[b.0].value.data,
            false,
            &mut out,
            false,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Dispatches an elementwise op by kind; `args` holds one or two inputs.
    pub fn elementwise(&mut self, kind: Elementwise, args: &[Var]) -> Result<Var> {
        if args.len() != kind.arity() {
            return Err(Error::Contract(format!(
                "{kind:?} takes {} argument(s), got {}",
                kind.arity(),
                args.len()
            )));
        }
        match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => {
                self.binary(kind, args[0], args[1])
            }
            _ => self.unary(kind, args[0]),
        }
    }

    fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| dim_err("broadcast", sa, sb))?;
        let f = |x: f64, y: f64| match kind {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            _ => x * y,
        };
        let (da, db) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, sa);
            let mb = broadcast_map(&out_shape, sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Binary(kind, a, b), &[a, b]))
    }

    fn unary(&mut self, kind: Elementwise, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if kind == Elementwise::Log {
            if let Some(bad) = x.data.iter().find(|v| !(**v > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let data = x.data.iter().map(|&v| unary_forward(kind, v)).collect();
        let t = Tensor::new(x.shape.clone(), data)?;
        Ok(self.push(t, Op::Unary(kind, a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(Elementwise::LeakyRelu(slope), a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Softplus, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Square, a)
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let t = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v * c).collect())?;
        Ok(self.push(t, Op::Scale(a, c), &[a]))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let t = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v + c).collect())?;
        Ok(self.push(t, Op::Offset(a), &[a]))
    }

    /// Sum or mean over one axis (removed from the shape) or over everything
    /// (scalar result).
    pub fn reduce(&mut self, kind: Reduce, a: Var, axis: Option<usize>) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let t = match axis {
            None => {
                let s: f64 = x.data.iter().sum();
                let n = x.data.len().max(1) as f64;
                Tensor::scalar(if kind == Reduce::Mean { s / n } else { s })
            }
            Some(ax) => {
                if ax >= x.shape.len() {
                    return Err(dim_err("reduce", &x.shape, &[ax]));
                }
                let outer: usize = x.shape[..ax].iter().product();
                let len = x.shape[ax];
                let inner: usize = x.shape[ax + 1..].iter().product();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        let row = &x.data[base..base + inner];
                        out[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(acc, v)| *acc += v);
                    }
                }
                if kind == Reduce::Mean && len > 0 {
                    let inv = 1.0 / len as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
                let mut shape = x.shape.clone();
                shape.remove(ax);
                Tensor::new(shape, out)?
            }
        };
        Ok(self.push(t, Op::Reduce(kind, a, axis), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::Mean, a, None)
    }

    /// Selects columns of a matrix, in the given order.
    pub fn columns(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if x.shape.len() != 2 {
            return Err(dim_err("columns", &x.shape, &[2]));
        }
        let (r, c) = (x.shape[0], x.shape[1]);
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Index(format!("column {bad} of {c}")));
        }
        let mut data = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            data.extend(cols.iter().map(|&j| x.data[i * c + j]));
        }
        let t = Tensor::new(vec![r, cols.len()], data)?;
        Ok(self.push(t, Op::Columns(a, cols.to_vec()), &[a]))
    }

    /// Rows `start..end` of a matrix.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if x.shape.len() != 2 || start > end || end > x.shape[0] {
            return Err(dim_err("rows", &x.shape, &[start, end]));
        }
        let c = x.shape[1];
        let t = Tensor::new(vec![end - start, c], x.data[start * c..end * c].to_vec())?;
        Ok(self.push(t, Op::Rows(a, start), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != x.data.len() {
            return Err(dim_err("reshape", &x.shape, shape));
        }
        let t = Tensor::new(shape.to_vec(), x.data.clone())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let t = Tensor::new(
            x.shape.clone(),
            x.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        )?;
        Ok(self.push(t, Op::Clamp(a, lo, hi), &[a]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into the
    /// `grad` of every `requires_grad` node reachable from the loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        self.visits = 0;
        for i in (0..=loss.0).rev() {
            self.visits += 1;
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.propagate(i, &gout, &mut grads);
            self.nodes[i].value.accumulate_grad(&gout);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.needs(*a) {
                    let ga = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(m, n, k, gout, false, &tb.data, true, ga, true);
                }
                if self.needs(*b) {
                    let gb = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm(k, m, n, &ta.data, true, gout, false, gb, true);
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let out_shape = &node.value.shape;
                let same = ta.shape == tb.shape;
                let ma = (!same).then(|| broadcast_map(out_shape, &ta.shape));
                let mb = (!same).then(|| broadcast_map(out_shape, &tb.shape));
                let ia = |o: usize| ma.as_ref().map_or(o, |m| m[o]);
                let ib = |o: usize| mb.as_ref().map_or(o, |m| m[o]);
                if self.needs(*a) {
                    let ga = grads[a.0].get_or_insert_with(|| vec![0.0; ta.data.len()]);
                    for (o, g) in gout.iter().enumerate() {
                        ga[ia(o)] += match kind {
                            Elementwise::Mul => g * tb.data[ib(o)],
                            _ => *g,
                        };
                    }
                }
                if self.needs(*b) {
                    let gb = grads[b.0].get_or_insert_with(|| vec![0.0; tb.data.len()]);
                    for (o, g) in gout.iter().enumerate() {
                        gb[ib(o)] += match kind {
                            Elementwise::Mul => g * ta.data[ia(o)],
                            Elementwise::Sub => -g,
                            _ => *g,
                        };
                    }
                }
            }
            Op::Unary(kind, a) => {
                let x = &self.nodes[a.0].value.data;
                let y = &node.value.data;
                let ga = grads[a.0].get_or_insert_with(|| vec![0.0; x.len()]);
                for o in 0..gout.len() {
                    ga[o] += gout[o] * unary_derivative(*kind, x[o], y[o]);
                }
            }
            Op::Scale(a, c) => {
                let ga = grads[a.0].get_or_insert_with(|| vec![0.0; gout.len()]);
                ga.iter_mut().zip(gout).for_each(|(acc, g)| *acc += c * g);
            }
            Op::Offset(a) | Op::Reshape(a) => {
                let ga = grads[a.0].get_or_insert_with(|| vec![0.0; gout.len()]);
                ga.iter_mut().zip(gout).for_each(|(acc, g)| *acc += g);
            }
            Op::Reduce(kind, a, axis) => {
                let x = &self.nodes[a.0].value;
                let ga = grads[a.0].get_or_insert_with(|| vec![0.0; x.data.len()]);
                match axis {
                    None => {
                        let n = x.data.len().max(1) as f64;
                        let g = if *kind == Reduce::Mean { gout[0] / n } else { gout[0] };
                        ga.iter_mut().for_each(|acc| *acc += g);
                    }
                    Some(ax) => {
                        let outer: usize = x.shape[..*ax].iter().product();
                        let len = x.shape[*ax];
                        let inner: usize = x.shape[ax + 1..].iter().product();
                        let scale = if *kind == Reduce::Mean {
                            1.0 / len as f64
                        } else {
                            1.0
                        };
                        for o in 0..outer {
                            let src = &gout[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let base = (o * len + l) * inner;
                                ga[base..base + inner]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(acc, g)| *acc += scale * g);
                            }
                        }
                    }
                }
            }
            Op::Columns(a, cols) => {
                let x = &self.nodes[a.0].value;
                let (r, c) = (x.shape[0], x.shape[1]);
                let ga = grads[a.0].get_or_insert_with(|| vec![0.0; r * c]);
                let w = cols.len();
                for i in 0..r {
                    for (p, &j) in cols.iter().enumerate() {
                        ga[i * c + j] += gout[i * w + p];
                    }
                }
            }
            Op::Rows(a, start) => {
                let x = &self.nodes[a.0].value;
                let c = x.shape[1];
                let ga = grads[a.0].get_or_insert_with(|| vec![0.0; x.data.len()]);
                ga[start * c..start * c + gout.len()]
                    .iter_mut()
                    .zip(gout)
                    .for_each(|(acc, g)| *acc += g);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[a.0].value.data;
                let ga = grads[a.0].get_or_insert_with(|| vec![0.0; x.len()]);
                for o in 0..gout.len() {
                    if x[o] >= *lo && x[o] <= *hi {
                        ga[o] += gout[o];
                    }
                }
            }
        }
    }
}

/// Maximum over all parameter elements of
/// `|analytic − central difference| / max(1, |central difference|)`.
///
/// `f` builds a scalar loss on a fresh graph from leaf vars for `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.item(loss))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| g.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let orig = p.data[e];
            work[pi].data[e] = orig + eps;
            let up = eval(&work)?;
            work[pi].data[e] = orig - eps;
            let down = eval(&work)?;
            work[pi].data[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[pi][e] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
