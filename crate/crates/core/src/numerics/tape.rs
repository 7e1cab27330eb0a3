//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node whose inputs already live on the tape, so
//! node order is a topological order and the backward pass is a single
//! reverse sweep. Parameters enter the tape by reference (`Tape::input`); a
//! trainable tensor appears at most once per tape and its gradient is
//! collected into [`Gradients`] keyed by [`TensorId`].

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{numel, Tensor, TensorId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias { x: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Gelu(usize),
    Relu(usize),
    Square(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    Gather { table: usize, ids: Vec<usize> },
    MeanRows(usize),
    Sum(usize),
    Dot(usize, usize),
    Cosine { a: usize, b: usize, na: f64, nb: f64 },
    CrossEntropy { logits: usize, target: usize, probs: Vec<f64> },
    Reshape(usize),
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
    param: Option<TensorId>,
}

/// Gradients of trainable tensors reached by a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<TensorId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(|g| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Accumulates this pass's gradient into `t`. A trainable tensor the loss
    /// never reached still gets a (zero) gradient buffer.
    pub fn apply(&self, t: &mut Tensor) -> Result<()> {
        if !t.requires_grad() {
            return Ok(());
        }
        t.ensure_grad();
        if let Some(g) = self.map.get(&t.id()) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn apply_all<'a, I>(&self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        params.into_iter().try_for_each(|t| self.apply(t))
    }
}

#[derive(Clone, Copy)]
struct View {
    ptr: *const f64,
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl View {
    fn of(data: &[f64], rows: usize, cols: usize, transposed: bool) -> View {
        if transposed {
            View { ptr: data.as_ptr(), rows: cols, cols: rows, rs: 1, cs: cols as isize }
        } else {
            View { ptr: data.as_ptr(), rows, cols, rs: cols as isize, cs: 1 }
        }
    }

    fn t(self) -> View {
        View { ptr: self.ptr, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `c = a·b + beta·c`, with `c` addressed through the strides `(rsc, csc)`.
///
/// # Safety
/// `c` must be valid for `a.rows × b.cols` elements at the given strides and
/// must not alias `a` or `b`.
unsafe fn gemm(a: View, b: View, beta: f64, c: *mut f64, rsc: isize, csc: isize) {
    debug_assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let p = c.offset(i as isize * rsc + j as isize * csc);
                *p *= beta;
            }
        }
        return;
    }
    matrixmultiply::dgemm(m, k, n, 1.0, a.ptr, a.rs, a.cs, b.ptr, b.rs, b.cs, beta, c, rsc, csc);
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        0 => Ok((1, 1)),
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        _ => Err(Error::shape(format!("expected rank ≤ 2, got shape {:?}", shape))),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Scalar GELU (tanh form), shared with straight-line reference code.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<TensorId, usize>,
}

impl<'p> Default for Tape<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { value: Cow::Owned(value), shape, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.to_vec())
            .expect("tape nodes keep consistent shapes")
    }

    /// Non-differentiable constant owned by the tape.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "constant of shape {:?} with {} elements",
                shape,
                data.len()
            )));
        }
        Ok(self.push(data, shape, Op::Leaf, false))
    }

    /// Borrows a tensor onto the tape. Trainable tensors become gradient
    /// sinks; a tensor already on this tape returns its existing handle.
    pub fn input(&mut self, t: &'p Tensor) -> Var {
        if let Some(&idx) = self.params.get(&t.id()) {
            return Var(idx);
        }
        let trainable = t.requires_grad();
        self.nodes.push(Node {
            value: Cow::Borrowed(t.data()),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            needs_grad: trainable,
            param: trainable.then(|| t.id()),
        });
        let idx = self.nodes.len() - 1;
        self.params.insert(t.id(), idx);
        Var(idx)
    }

    /// `op(a)·op(b)` where `op` optionally transposes a rank-≤2 operand.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ra, ca) = dims2(self.shape(a))?;
        let (rb, cb) = dims2(self.shape(b))?;
        let va = View::of(self.value(a), ra, ca, ta);
        let vb = View::of(self.value(b), rb, cb, tb);
        if va.cols != vb.rows {
            return Err(Error::shape(format!(
                "matmul of {:?}{} and {:?}{}: inner dimensions {} and {} differ",
                self.shape(a),
                if ta { "ᵀ" } else { "" },
                self.shape(b),
                if tb { "ᵀ" } else { "" },
                va.cols,
                vb.rows
            )));
        }
        let (m, n) = (va.rows, vb.cols);
        let mut out = vec![0.0; m * n];
        // SAFETY: `out` is a fresh m×n buffer; views point into live tape values.
        unsafe { gemm(va, vb, 0.0, out.as_mut_ptr(), n as isize, 1) };
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, vec![m, n], Op::MatMul { a: a.0, b: b.0, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `x·wᵀ + b` with `w` stored `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_ex(x, w, false, true)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Mul(a.0, b.0), ng))
    }

    /// Adds a length-`n` bias to every row of an `[m × n]` operand.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x))?;
        if self.value(b).len() != n {
            return Err(Error::shape(format!(
                "bias of shape {:?} for operand {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let xb = self.value(x);
        let bb = self.value(b);
        let mut out = Vec::with_capacity(m * n);
        for row in xb.chunks_exact(n.max(1)).take(m) {
            out.extend(row.iter().zip(bb).map(|(v, c)| v + c));
        }
        let ng = self.ng(x.0) || self.ng(b.0);
        Ok(self.push(out, self.shape(x).to_vec(), Op::AddBias { x: x.0, b: b.0 }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.ng(x.0);
        self.push(out, self.shape(x).to_vec(), Op::Scale { x: x.0, c }, ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let ng = self.ng(x.0);
        self.push(out, self.shape(x).to_vec(), Op::AddScalar { x: x.0 }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let ng = self.ng(x.0);
        self.push(out, self.shape(x).to_vec(), Op::Gelu(x.0), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let ng = self.ng(x.0);
        self.push(out, self.shape(x).to_vec(), Op::Relu(x.0), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * v).collect();
        let ng = self.ng(x.0);
        self.push(out, self.shape(x).to_vec(), Op::Square(x.0), ng)
    }

    /// Row-wise layer normalization with population variance and
    /// `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x))?;
        if n < 2 {
            return Err(Error::shape(format!(
                "layer_norm needs at least 2 features, got shape {:?}",
                self.shape(x)
            )));
        }
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape(format!(
                "layer_norm gain {:?} / bias {:?} for operand {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(x.0) || self.ng(gain.0) || self.ng(bias.0);
        let op = Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std };
        Ok(self.push(out, self.shape(x).to_vec(), op, ng))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x))?;
        if n == 0 {
            return Err(Error::shape("softmax of an empty vector"));
        }
        let xv = self.value(x);
        if let Some(bad) = xv.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(format!("softmax input contains {bad}")));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for (d, v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        let ng = self.ng(x.0);
        Ok(self.push(out, self.shape(x).to_vec(), Op::Softmax(x.0), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(x))?;
        if start + len > n {
            return Err(Error::shape(format!(
                "column slice {start}..{} of shape {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        let ng = self.ng(x.0);
        Ok(self.push(out, vec![m, len], Op::SliceCols { x: x.0, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let (m, _) = dims2(self.shape(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (rm, rn) = dims2(self.shape(*p))?;
            if rm != m {
                return Err(Error::shape(format!(
                    "concat rows {} vs {}",
                    rm, m
                )));
            }
            widths.push(rn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        let idx = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, vec![m, total], Op::ConcatCols(idx), ng))
    }

    /// Row lookup into a `[vocab × dim]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.shape(table))?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::input(format!("row id {bad} out of range for table of {v} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table.0);
        Ok(self.push(out, vec![ids.len(), d], Op::Gather { table: table.0, ids: ids.to_vec() }, ng))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x))?;
        if m == 0 {
            return Err(Error::shape("mean over zero rows"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; n];
        for r in 0..m {
            add_into(&mut out, &xv[r * n..(r + 1) * n]);
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let ng = self.ng(x.0);
        Ok(self.push(out, vec![n], Op::MeanRows(x.0), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x.0);
        self.push(vec![s], vec![], Op::Sum(x.0), ng)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape(format!(
                "dot of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(vec![s], vec![], Op::Dot(a.0, b.0), ng))
    }

    /// Cosine similarity; defined as 0 (with zero gradient) when either
    /// operand has zero norm.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape(format!(
                "cosine of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let c = if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            av.iter().zip(bv).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        };
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(vec![c], vec![], Op::Cosine { a: a.0, b: b.0, na, nb }, ng))
    }

    /// `-ln softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if target >= lv.len() {
            return Err(Error::input(format!(
                "target class {target} out of range for {} logits",
                lv.len()
            )));
        }
        if let Some(bad) = lv.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(format!("logits contain {bad}")));
        }
        let max = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = lv.iter().map(|v| (v - max).exp()).sum();
        let probs: Vec<f64> = lv.iter().map(|v| (v - max).exp() / z).collect();
        let loss = -(lv[target] - max - z.ln());
        let ng = self.ng(logits.0);
        Ok(self.push(vec![loss], vec![], Op::CrossEntropy { logits: logits.0, target, probs }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape(format!(
                "reshape {:?} to {:?}",
                self.shape(x),
                shape
            )));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x.0);
        Ok(self.push(out, shape, Op::Reshape(x.0), ng))
    }

    /// Sums a list of scalars (or same-shaped values).
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (first, rest) = xs.split_first().ok_or_else(|| Error::shape("sum of nothing"))?;
        rest.iter().try_fold(*first, |acc, &x| self.add(acc, x))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |idx: usize, f: &mut dyn FnMut(&mut [f64])| {
                if !self.nodes[idx].needs_grad {
                    return;
                }
                let len = self.nodes[idx].value.len();
                let buf = grads[idx].get_or_insert_with(|| vec![0.0; len]);
                f(buf);
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(id) = node.param {
                        out.map.insert(id, g);
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (ra, ca) = dims2(&self.nodes[*a].shape)?;
                    let (rb, cb) = dims2(&self.nodes[*b].shape)?;
                    let va = View::of(&self.nodes[*a].value, ra, ca, *ta);
                    let vb = View::of(&self.nodes[*b].value, rb, cb, *tb);
                    let vg = View::of(&g, va.rows, vb.cols, false);
                    // SAFETY: gradient buffers are distinct allocations sized
                    // like their operands; writes follow the operand views.
                    acc(*a, &mut |buf| unsafe {
                        gemm(vg, vb.t(), 1.0, buf.as_mut_ptr(), va.rs, va.cs)
                    });
                    acc(*b, &mut |buf| unsafe {
                        gemm(va.t(), vg, 1.0, buf.as_mut_ptr(), vb.rs, vb.cs)
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| add_into(buf, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| buf.iter_mut().zip(&g).for_each(|(d, s)| *d -= s));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc(*a, &mut |buf| {
                        for k in 0..buf.len() {
                            buf[k] += g[k] * bv[k];
                        }
                    });
                    acc(*b, &mut |buf| {
                        for k in 0..buf.len() {
                            buf[k] += g[k] * av[k];
                        }
                    });
                }
                Op::AddBias { x, b } => {
                    acc(*x, &mut |buf| add_into(buf, &g));
                    let n = self.nodes[*b].value.len();
                    acc(*b, &mut |buf| {
                        for row in g.chunks_exact(n.max(1)) {
                            add_into(buf, row);
                        }
                    });
                }
                Op::Scale { x, c } => {
                    acc(*x, &mut |buf| buf.iter_mut().zip(&g).for_each(|(d, s)| *d += c * s));
                }
                Op::AddScalar { x } => acc(*x, &mut |buf| add_into(buf, &g)),
                Op::Gelu(x) => {
                    let xv = &self.nodes[*x].value;
                    acc(*x, &mut |buf| {
                        for k in 0..buf.len() {
                            buf[k] += g[k] * gelu_grad(xv[k]);
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value;
                    acc(*x, &mut |buf| {
                        for k in 0..buf.len() {
                            if xv[k] > 0.0 {
                                buf[k] += g[k];
                            }
                        }
                    });
                }
                Op::Square(x) => {
                    let xv = &self.nodes[*x].value;
                    acc(*x, &mut |buf| {
                        for k in 0..buf.len() {
                            buf[k] += 2.0 * xv[k] * g[k];
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let n = self.nodes[*gain].value.len();
                    let gv = &self.nodes[*gain].value;
                    acc(*gain, &mut |buf| {
                        for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                            for c in 0..n {
                                buf[c] += grow[c] * hrow[c];
                            }
                        }
                    });
                    acc(*bias, &mut |buf| {
                        for grow in g.chunks_exact(n) {
                            add_into(buf, grow);
                        }
                    });
                    acc(*x, &mut |buf| {
                        for (r, (grow, hrow)) in
                            g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate()
                        {
                            let mut mean_d = 0.0;
                            let mut mean_dh = 0.0;
                            for c in 0..n {
                                let d = grow[c] * gv[c];
                                mean_d += d;
                                mean_dh += d * hrow[c];
                            }
                            mean_d /= n as f64;
                            mean_dh /= n as f64;
                            let dst = &mut buf[r * n..(r + 1) * n];
                            for c in 0..n {
                                let d = grow[c] * gv[c];
                                dst[c] += inv_std[r] * (d - mean_d - hrow[c] * mean_dh);
                            }
                        }
                    });
                }
                Op::Softmax(x) => {
                    let (_, n) = dims2(&node.shape)?;
                    let y = &node.value;
                    acc(*x, &mut |buf| {
                        for (r, (grow, yrow)) in g.chunks_exact(n).zip(y.chunks_exact(n)).enumerate()
                        {
                            let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            let dst = &mut buf[r * n..(r + 1) * n];
                            for c in 0..n {
                                dst[c] += yrow[c] * (grow[c] - s);
                            }
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let (m, len) = dims2(&node.shape)?;
                    let (_, n) = dims2(&self.nodes[*x].shape)?;
                    acc(*x, &mut |buf| {
                        for r in 0..m {
                            add_into(&mut buf[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = dims2(&node.shape)?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, w) = dims2(&self.nodes[p].shape)?;
                        acc(p, &mut |buf| {
                            for r in 0..m {
                                add_into(
                                    &mut buf[r * w..(r + 1) * w],
                                    &g[r * total + offset..r * total + offset + w],
                                );
                            }
                        });
                        offset += w;
                    }
                }
                Op::Gather { table, ids } => {
                    let (_, d) = dims2(&self.nodes[*table].shape)?;
                    acc(*table, &mut |buf| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::MeanRows(x) => {
                    let (m, n) = dims2(&self.nodes[*x].shape)?;
                    let inv = 1.0 / m as f64;
                    acc(*x, &mut |buf| {
                        for r in 0..m {
                            for c in 0..n {
                                buf[r * n + c] += g[c] * inv;
                            }
                        }
                    });
                }
                Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0])),
                Op::Dot(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc(*a, &mut |buf| buf.iter_mut().zip(bv.iter()).for_each(|(d, y)| *d += g[0] * y));
                    acc(*b, &mut |buf| buf.iter_mut().zip(av.iter()).for_each(|(d, x)| *d += g[0] * x));
                }
                Op::Cosine { a, b, na, nb } => {
                    if *na == 0.0 || *nb == 0.0 {
                        continue;
                    }
                    let c = node.value[0];
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let nab = na * nb;
                    acc(*a, &mut |buf| {
                        for k in 0..buf.len() {
                            buf[k] += g[0] * (bv[k] / nab - c * av[k] / (na * na));
                        }
                    });
                    acc(*b, &mut |buf| {
                        for k in 0..buf.len() {
                            buf[k] += g[0] * (av[k] / nab - c * bv[k] / (nb * nb));
                        }
                    });
                }
                Op::CrossEntropy { logits, target, probs } => {
                    acc(*logits, &mut |buf| {
                        for k in 0..buf.len() {
                            let onehot = if k == *target { 1.0 } else { 0.0 };
                            buf[k] += g[0] * (probs[k] - onehot);
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, &g)),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let w = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).trainable();
        let mut tape = Tape::new();
        let wv = tape.input(&w);
        let loss = tape.sum(wv);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(&w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn dot_self_gives_twice_x() {
        let x = Tensor::vector(vec![1.5, -2.0, 0.25]).trainable();
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let loss = tape.dot(xv, xv).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn frozen_inputs_receive_nothing() {
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let x = t(&[1, 2], &[1.0, 1.0]).trainable();
        let mut tape = Tape::new();
        let (wv, xv) = (tape.input(&w), tape.input(&x));
        let y = tape.matmul(xv, wv).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(&w).is_none());
        assert_eq!(g.get(&x).unwrap(), &[3.0, 7.0]);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::vector(vec![1.0, 2.0]).trainable();
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        assert!(matches!(tape.backward(xv), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_is_one_leaf() {
        let x = Tensor::vector(vec![2.0]).trainable();
        let mut tape = Tape::new();
        let a = tape.input(&x);
        let b = tape.input(&x);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[4.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        let mut tape = Tape::new();
        let (av, bv) = (tape.input(&a), tape.input(&b));
        let err = tape.matmul(av, bv).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        let a = Tensor::vector(vec![0.0, 0.0]).trainable();
        let b = Tensor::vector(vec![1.0, 0.0]).trainable();
        let mut tape = Tape::new();
        let (av, bv) = (tape.input(&a), tape.input(&b));
        let c = tape.cosine(av, bv).unwrap();
        assert_eq!(tape.scalar(c), 0.0);
        let g = tape.backward(c).unwrap();
        assert!(g.get(&a).is_none());
    }
}
