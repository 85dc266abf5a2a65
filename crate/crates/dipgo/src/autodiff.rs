//! Tape-based reverse-mode differentiation over flat `f64` buffers.
//!
//! The engine is deliberately small: it covers exactly the operations used by
//! the toy denoiser, the pruner network and the loss heads. Every node stores
//! its forward value; `backward_from` seeds adjoints at arbitrary nodes and
//! walks the tape in reverse. Parameters that never require gradients (the
//! frozen denoiser during pruner training) skip both adjoint allocation and
//! the weight-gradient half of matmul backward.
//!
//! A shared [`MemoryMeter`] counts the f64 values currently retained by live
//! tapes plus any checkpoint boundary state, and tracks the peak. The trainer
//! uses it to demonstrate the memory effect of gradient checkpointing.

use std::cell::Cell;
use std::rc::Rc;

pub type Var = usize;

/// Live/peak counter for retained forward values.
#[derive(Debug, Default)]
pub struct MemoryMeter {
    live: Cell<usize>,
    peak: Cell<usize>,
}

impl MemoryMeter {
    pub fn new() -> Rc<Self> {
        Rc::new(Self::default())
    }

    pub fn acquire(&self, elems: usize) {
        let live = self.live.get() + elems;
        self.live.set(live);
        if live > self.peak.get() {
            self.peak.set(live);
        }
    }

    pub fn release(&self, elems: usize) {
        self.live.set(self.live.get().saturating_sub(elems));
    }

    pub fn live(&self) -> usize {
        self.live.get()
    }

    pub fn peak(&self) -> usize {
        self.peak.get()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    /// c_a * a + c_b * b, elementwise.
    Axpby {
        a: Var,
        b: Var,
        ca: f64,
        cb: f64,
    },
    Abs(Var),
    Tanh(Var),
    Sigmoid(Var),
    /// vec scaled by a length-1 coefficient node.
    ScaleBy {
        vec: Var,
        coeff: Var,
    },
    /// y = M x with M row-major (rows x cols).
    MatVec {
        mat: Var,
        vec: Var,
        rows: usize,
        cols: usize,
    },
    /// C = op(A) op(B): A is (m x k) after optional transpose, B is (k x n).
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_a: bool,
        trans_b: bool,
    },
    /// mat (rows x cols) + row broadcast over every row.
    AddRow {
        mat: Var,
        row: Var,
        rows: usize,
        cols: usize,
    },
    RowSoftmax {
        mat: Var,
        rows: usize,
        cols: usize,
    },
    /// Row-wise layer norm with learnable gain/bias (length = cols).
    LayerNorm {
        mat: Var,
        gain: Var,
        bias: Var,
        rows: usize,
        cols: usize,
    },
    /// Valid-mode 2D correlation with a fixed kernel (kh x kw).
    Filter2d {
        input: Var,
        h: usize,
        w: usize,
        kernel: Rc<Vec<f64>>,
        kh: usize,
        kw: usize,
    },
    Mean(Var),
    /// Scalar linear combination of length-1 nodes.
    LinComb {
        vars: Vec<Var>,
        coeffs: Vec<f64>,
    },
    Slice {
        input: Var,
        offset: usize,
        len: usize,
    },
}

/// Forward-value storage; shared buffers let frozen parameters be bound to
/// many tapes without copying.
enum Buf {
    Owned(Vec<f64>),
    Shared(Rc<Vec<f64>>),
}

impl std::ops::Deref for Buf {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        match self {
            Buf::Owned(v) => v,
            Buf::Shared(r) => r,
        }
    }
}

struct Node {
    op: Op,
    val: Buf,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    meter: Option<Rc<MemoryMeter>>,
    metered_elems: usize,
}

impl Drop for Tape {
    fn drop(&mut self) {
        if let Some(m) = &self.meter {
            m.release(self.metered_elems);
        }
    }
}

/// Adjoints produced by a backward pass, indexed by `Var`.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v).and_then(|g| g.as_deref())
    }

    /// Gradient of a length-1 node, zero if it never received an adjoint.
    pub fn scalar(&self, v: Var) -> f64 {
        self.get(v).map(|g| g[0]).unwrap_or(0.0)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            meter: None,
            metered_elems: 0,
        }
    }

    pub fn with_meter(meter: Rc<MemoryMeter>) -> Self {
        Self {
            nodes: Vec::new(),
            meter: Some(meter),
            metered_elems: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v].val
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v].val[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v].requires_grad
    }

    fn push(&mut self, op: Op, val: Vec<f64>, requires_grad: bool) -> Var {
        // Constant leaves (frozen weights, boundary snapshots already counted
        // by their owner) are not retained activations; everything else is.
        let metered = requires_grad || !matches!(op, Op::Leaf);
        if metered {
            if let Some(m) = &self.meter {
                m.acquire(val.len());
                self.metered_elems += val.len();
            }
        }
        self.nodes.push(Node {
            op,
            val: Buf::Owned(val),
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Binds a shared read-only buffer without copying or metering it.
    pub fn leaf_shared(&mut self, val: Rc<Vec<f64>>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            val: Buf::Shared(val),
            requires_grad: false,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v].requires_grad)
    }

    pub fn leaf(&mut self, val: Vec<f64>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, val, requires_grad)
    }

    pub fn constant(&mut self, val: Vec<f64>) -> Var {
        self.leaf(val, false)
    }

    pub fn scalar_leaf(&mut self, val: f64, requires_grad: bool) -> Var {
        self.leaf(vec![val], requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let val = zip_map(&self.nodes[a].val, &self.nodes[b].val, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        self.push(Op::Add(a, b), val, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let val = zip_map(&self.nodes[a].val, &self.nodes[b].val, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        self.push(Op::Sub(a, b), val, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let val = zip_map(&self.nodes[a].val, &self.nodes[b].val, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        self.push(Op::Mul(a, b), val, rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let val = zip_map(&self.nodes[a].val, &self.nodes[b].val, |x, y| x / y);
        let rg = self.any_grad(&[a, b]);
        self.push(Op::Div(a, b), val, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let val = self.nodes[a].val.iter().map(|x| x + c).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(Op::AddScalar(a), val, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let val = self.nodes[a].val.iter().map(|x| x * c).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(Op::MulScalar(a, c), val, rg)
    }

    pub fn axpby(&mut self, ca: f64, a: Var, cb: f64, b: Var) -> Var {
        let val = zip_map(&self.nodes[a].val, &self.nodes[b].val, |x, y| {
            ca * x + cb * y
        });
        let rg = self.any_grad(&[a, b]);
        self.push(Op::Axpby { a, b, ca, cb }, val, rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let val = self.nodes[a].val.iter().map(|x| x.abs()).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(Op::Abs(a), val, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let val = self.nodes[a].val.iter().map(|x| x.tanh()).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(Op::Tanh(a), val, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let val = self
            .nodes[a]
            .val
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let rg = self.nodes[a].requires_grad;
        self.push(Op::Sigmoid(a), val, rg)
    }

    pub fn scale_by(&mut self, vec: Var, coeff: Var) -> Var {
        debug_assert_eq!(self.nodes[coeff].val.len(), 1);
        let c = self.nodes[coeff].val[0];
        let val = self.nodes[vec].val.iter().map(|x| c * x).collect();
        let rg = self.any_grad(&[vec, coeff]);
        self.push(Op::ScaleBy { vec, coeff }, val, rg)
    }

    pub fn matvec(&mut self, mat: Var, vec: Var, rows: usize, cols: usize) -> Var {
        debug_assert_eq!(self.nodes[mat].val.len(), rows * cols);
        debug_assert_eq!(self.nodes[vec].val.len(), cols);
        let m = &self.nodes[mat].val;
        let x = &self.nodes[vec].val;
        let mut y = vec![0.0; rows];
        for r in 0..rows {
            let row = &m[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for c in 0..cols {
                acc += row[c] * x[c];
            }
            y[r] = acc;
        }
        let rg = self.any_grad(&[mat, vec]);
        self.push(
            Op::MatVec {
                mat,
                vec,
                rows,
                cols,
            },
            y,
            rg,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn matmul(
        &mut self,
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_a: bool,
        trans_b: bool,
    ) -> Var {
        let val = matmul_raw(
            &self.nodes[a].val,
            &self.nodes[b].val,
            m,
            k,
            n,
            trans_a,
            trans_b,
        );
        let rg = self.any_grad(&[a, b]);
        self.push(
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_a,
                trans_b,
            },
            val,
            rg,
        )
    }

    pub fn add_row(&mut self, mat: Var, row: Var, rows: usize, cols: usize) -> Var {
        let m = &self.nodes[mat].val;
        let r = &self.nodes[row].val;
        debug_assert_eq!(r.len(), cols);
        let mut out = m.to_vec();
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] += r[j];
            }
        }
        let rg = self.any_grad(&[mat, row]);
        self.push(Op::AddRow { mat, row, rows, cols }, out, rg)
    }

    pub fn row_softmax(&mut self, mat: Var, rows: usize, cols: usize) -> Var {
        let m = &self.nodes[mat].val;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &m[i * cols..(i + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - mx).exp();
                out[i * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[i * cols + j] /= sum;
            }
        }
        let rg = self.nodes[mat].requires_grad;
        self.push(Op::RowSoftmax { mat, rows, cols }, out, rg)
    }

    pub fn layer_norm(&mut self, mat: Var, gain: Var, bias: Var, rows: usize, cols: usize) -> Var {
        let m = &self.nodes[mat].val;
        let g = &self.nodes[gain].val;
        let b = &self.nodes[bias].val;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &m[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..cols {
                out[i * cols + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[mat, gain, bias]);
        self.push(
            Op::LayerNorm {
                mat,
                gain,
                bias,
                rows,
                cols,
            },
            out,
            rg,
        )
    }

    /// Valid-mode correlation of an (h x w) map with a (kh x kw) kernel.
    pub fn filter2d(
        &mut self,
        input: Var,
        h: usize,
        w: usize,
        kernel: Rc<Vec<f64>>,
        kh: usize,
        kw: usize,
    ) -> Var {
        let val = filter2d_raw(&self.nodes[input].val, h, w, &kernel, kh, kw);
        let rg = self.nodes[input].requires_grad;
        self.push(
            Op::Filter2d {
                input,
                h,
                w,
                kernel,
                kh,
                kw,
            },
            val,
            rg,
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a].val;
        let val = vec![v.iter().sum::<f64>() / v.len() as f64];
        let rg = self.nodes[a].requires_grad;
        self.push(Op::Mean(a), val, rg)
    }

    pub fn lin_comb(&mut self, vars: Vec<Var>, coeffs: Vec<f64>) -> Var {
        debug_assert_eq!(vars.len(), coeffs.len());
        let mut acc = 0.0;
        for (&v, &c) in vars.iter().zip(&coeffs) {
            debug_assert_eq!(self.nodes[v].val.len(), 1);
            acc += c * self.nodes[v].val[0];
        }
        let rg = self.any_grad(&vars);
        self.push(Op::LinComb { vars, coeffs }, vec![acc], rg)
    }

    pub fn slice(&mut self, input: Var, offset: usize, len: usize) -> Var {
        let val = self.nodes[input].val[offset..offset + len].to_vec();
        let rg = self.nodes[input].requires_grad;
        self.push(Op::Slice { input, offset, len }, val, rg)
    }

    /// Reverse pass from arbitrary seed adjoints.
    pub fn backward_from(&self, seeds: &[(Var, Vec<f64>)]) -> Grads {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (v, seed) in seeds {
            debug_assert_eq!(seed.len(), self.nodes[*v].val.len());
            match &mut grads[*v] {
                Some(g) => {
                    for (gi, si) in g.iter_mut().zip(seed) {
                        *gi += si;
                    }
                }
                slot => *slot = Some(seed.clone()),
            }
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let dy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Grads { grads }
    }

    /// Backward from a scalar output with adjoint 1.
    pub fn backward_scalar(&self, out: Var) -> Grads {
        self.backward_from(&[(out, vec![1.0])])
    }

    fn backward_node(&self, idx: Var, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v].requires_grad {
                return;
            }
            let len = self.nodes[v].val.len();
            let slot = grads[v].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |g| add_assign(g, dy));
                acc(grads, *b, &mut |g| add_assign(g, dy));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |g| add_assign(g, dy));
                acc(grads, *b, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].val;
                let bv = &self.nodes[*b].val;
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                acc(grads, *b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let av = &self.nodes[*a].val;
                let bv = &self.nodes[*b].val;
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / bv[i];
                    }
                });
                acc(grads, *b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] -= dy[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::AddScalar(a) => acc(grads, *a, &mut |g| add_assign(g, dy)),
            Op::MulScalar(a, c) => {
                let c = *c;
                acc(grads, *a, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += c * d;
                    }
                });
            }
            Op::Axpby { a, b, ca, cb } => {
                let (ca, cb) = (*ca, *cb);
                acc(grads, *a, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += ca * d;
                    }
                });
                acc(grads, *b, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += cb * d;
                    }
                });
            }
            Op::Abs(a) => {
                let av = &self.nodes[*a].val;
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * sign(av[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = &node.val;
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * (1.0 - yv[i] * yv[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = &node.val;
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::ScaleBy { vec, coeff } => {
                let c = self.nodes[*coeff].val[0];
                let xv = &self.nodes[*vec].val;
                acc(grads, *vec, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += c * d;
                    }
                });
                acc(grads, *coeff, &mut |g| {
                    let mut dot = 0.0;
                    for i in 0..xv.len() {
                        dot += xv[i] * dy[i];
                    }
                    g[0] += dot;
                });
            }
            Op::MatVec {
                mat,
                vec,
                rows,
                cols,
            } => {
                let (rows, cols) = (*rows, *cols);
                let mv = &self.nodes[*mat].val;
                let xv = &self.nodes[*vec].val;
                acc(grads, *mat, &mut |g| {
                    for r in 0..rows {
                        let d = dy[r];
                        if d == 0.0 {
                            continue;
                        }
                        let grow = &mut g[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            grow[c] += d * xv[c];
                        }
                    }
                });
                acc(grads, *vec, &mut |g| {
                    for r in 0..rows {
                        let d = dy[r];
                        if d == 0.0 {
                            continue;
                        }
                        let row = &mv[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            g[c] += d * row[c];
                        }
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_a,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ta, tb) = (*trans_a, *trans_b);
                let av = &self.nodes[*a].val;
                let bv = &self.nodes[*b].val;
                // dA = dC op(B)^T, dB = op(A)^T dC, re-shaped for the stored layouts.
                acc(grads, *a, &mut |g| {
                    if ta {
                        // A stored (k x m): dA_stored = op(B) dC^T -> (k x m)
                        let da = matmul_raw(bv, dy, k, n, m, tb, true);
                        add_assign(g, &da);
                    } else {
                        let da = matmul_raw(dy, bv, m, n, k, false, !tb);
                        add_assign(g, &da);
                    }
                });
                acc(grads, *b, &mut |g| {
                    if tb {
                        // B stored (n x k): dB_stored = dC^T op(A) -> (n x k)
                        let db = matmul_raw(dy, av, n, m, k, true, ta);
                        add_assign(g, &db);
                    } else {
                        let db = matmul_raw(av, dy, k, m, n, !ta, false);
                        add_assign(g, &db);
                    }
                });
            }
            Op::AddRow { mat, row, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(grads, *mat, &mut |g| add_assign(g, dy));
                acc(grads, *row, &mut |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[j] += dy[i * cols + j];
                        }
                    }
                });
            }
            Op::RowSoftmax { mat, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let y = &node.val;
                acc(grads, *mat, &mut |g| {
                    for i in 0..rows {
                        let yr = &y[i * cols..(i + 1) * cols];
                        let dr = &dy[i * cols..(i + 1) * cols];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        let gr = &mut g[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                mat,
                gain,
                bias,
                rows,
                cols,
            } => {
                let (rows, cols) = (*rows, *cols);
                let mv = &self.nodes[*mat].val;
                let gv = &self.nodes[*gain].val;
                acc(grads, *bias, &mut |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[j] += dy[i * cols + j];
                        }
                    }
                });
                // Recompute per-row statistics (cheaper than saving them).
                let mut stats = Vec::with_capacity(rows);
                for i in 0..rows {
                    let row = &mv[i * cols..(i + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                    stats.push((mean, 1.0 / (var + LN_EPS).sqrt()));
                }
                acc(grads, *gain, &mut |g| {
                    for i in 0..rows {
                        let (mean, inv) = stats[i];
                        for j in 0..cols {
                            let xhat = (mv[i * cols + j] - mean) * inv;
                            g[j] += dy[i * cols + j] * xhat;
                        }
                    }
                });
                acc(grads, *mat, &mut |g| {
                    let nc = cols as f64;
                    for i in 0..rows {
                        let (mean, inv) = stats[i];
                        let row = &mv[i * cols..(i + 1) * cols];
                        let dr = &dy[i * cols..(i + 1) * cols];
                        let mut sum_dg = 0.0;
                        let mut sum_dgx = 0.0;
                        for j in 0..cols {
                            let dgl = dr[j] * gv[j];
                            let xhat = (row[j] - mean) * inv;
                            sum_dg += dgl;
                            sum_dgx += dgl * xhat;
                        }
                        let gr = &mut g[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            let dgl = dr[j] * gv[j];
                            let xhat = (row[j] - mean) * inv;
                            gr[j] += inv * (dgl - sum_dg / nc - xhat * sum_dgx / nc);
                        }
                    }
                });
            }
            Op::Filter2d {
                input,
                h,
                w,
                kernel,
                kh,
                kw,
            } => {
                let (h, w, kh, kw) = (*h, *w, *kh, *kw);
                let oh = h - kh + 1;
                let ow = w - kw + 1;
                acc(grads, *input, &mut |g| {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let d = dy[oy * ow + ox];
                            if d == 0.0 {
                                continue;
                            }
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    g[(oy + ky) * w + (ox + kx)] += d * kernel[ky * kw + kx];
                                }
                            }
                        }
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].val.len() as f64;
                let d = dy[0] / n;
                acc(grads, *a, &mut |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::LinComb { vars, coeffs } => {
                for (&v, &c) in vars.iter().zip(coeffs) {
                    acc(grads, v, &mut |g| g[0] += c * dy[0]);
                }
            }
            Op::Slice { input, offset, len } => {
                let (offset, len) = (*offset, *len);
                acc(grads, *input, &mut |g| {
                    for i in 0..len {
                        g[offset + i] += dy[i];
                    }
                });
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-8;

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_assign(g: &mut [f64], d: &[f64]) {
    for (gi, di) in g.iter_mut().zip(d) {
        *gi += di;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

/// Row-major matmul with optional logical transposes; A buffer is (m x k)
/// or (k x m) when `trans_a`, B buffer is (k x n) or (n x k) when `trans_b`.
pub fn matmul_raw(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let a_at = |i: usize, j: usize| if trans_a { a[j * m + i] } else { a[i * k + j] };
    match (trans_a, trans_b) {
        (false, false) => {
            // i-k-j order keeps the inner loop contiguous on B and C.
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (_, true) => {
            for i in 0..m {
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a_at(i, p) * brow[p];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        (true, false) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[p * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
    }
    out
}

/// Valid-mode correlation used by the SSIM window statistics.
pub fn filter2d_raw(input: &[f64], h: usize, w: usize, kernel: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    assert!(h >= kh && w >= kw, "filter larger than input");
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for ky in 0..kh {
                let irow = &input[(oy + ky) * w + ox..(oy + ky) * w + ox + kw];
                let krow = &kernel[ky * kw..(ky + 1) * kw];
                for kx in 0..kw {
                    acc += irow[kx] * krow[kx];
                }
            }
            out[oy * ow + ox] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar-valued tape program with
    /// respect to one leaf, rebuilt from scratch per probe.
    fn fd_check(
        build: impl Fn(&mut Tape, &[f64]) -> (Var, Var),
        x0: &[f64],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let (leaf, out) = build(&mut tape, x0);
        assert_eq!(tape.value(out).len(), 1);
        let grads = tape.backward_scalar(out);
        let analytic = grads.get(leaf).expect("leaf must receive gradient");

        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.to_vec();
            xp[i] += h;
            let mut tp = Tape::new();
            let (_, op) = build(&mut tp, &xp);
            let fp = tp.scalar_value(op);
            let mut xm = x0.to_vec();
            xm[i] -= h;
            let mut tm = Tape::new();
            let (_, om) = build(&mut tm, &xm);
            let fm = tm.scalar_value(om);
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(1e-6);
            assert!(
                (analytic[i] - fd).abs() / denom < tol,
                "component {i}: analytic {} vs fd {}",
                analytic[i],
                fd
            );
        }
    }

    fn randvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn elementwise_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = randvec(&mut rng, 6);
        let other = randvec(&mut rng, 6);
        fd_check(
            |t, x| {
                let a = t.leaf(x.to_vec(), true);
                let b = t.constant(other.clone());
                let s = t.mul(a, b);
                let s = t.add(s, a);
                let s = t.sub(s, b);
                let s = t.tanh(s);
                let s = t.mul_scalar(s, 0.7);
                let s = t.add_scalar(s, 0.1);
                let m = t.mean(s);
                (a, m)
            },
            &x0,
            1e-4,
        );
    }

    #[test]
    fn div_sigmoid_abs_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0: Vec<f64> = (0..5).map(|_| rng.gen_range(0.3..1.5)).collect();
        let other: Vec<f64> = (0..5).map(|_| rng.gen_range(0.5..2.0)).collect();
        fd_check(
            |t, x| {
                let a = t.leaf(x.to_vec(), true);
                let b = t.constant(other.clone());
                let d = t.div(b, a);
                let s = t.sigmoid(d);
                let s = t.abs(s);
                let m = t.mean(s);
                (a, m)
            },
            &x0,
            1e-4,
        );
    }

    #[test]
    fn matvec_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = randvec(&mut rng, 12); // 3x4
        let x = randvec(&mut rng, 4);
        // wrt vector input
        fd_check(
            |t, v| {
                let wv = t.constant(w.clone());
                let xv = t.leaf(v.to_vec(), true);
                let y = t.matvec(wv, xv, 3, 4);
                let y = t.tanh(y);
                let m = t.mean(y);
                (xv, m)
            },
            &x,
            1e-4,
        );
        // wrt matrix
        fd_check(
            |t, v| {
                let wv = t.leaf(v.to_vec(), true);
                let xv = t.constant(x.clone());
                let y = t.matvec(wv, xv, 3, 4);
                let y = t.tanh(y);
                let m = t.mean(y);
                (wv, m)
            },
            &w,
            1e-4,
        );
    }

    #[test]
    fn matmul_all_transpose_combos_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (m, k, n) = (3, 4, 2);
        for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
            let a_len = m * k;
            let b_len = k * n;
            let a0 = randvec(&mut rng, a_len);
            let b0 = randvec(&mut rng, b_len);
            fd_check(
                |t, v| {
                    let a = t.leaf(v.to_vec(), true);
                    let b = t.constant(b0.clone());
                    let c = t.matmul(a, b, m, k, n, ta, tb);
                    let c = t.tanh(c);
                    let out = t.mean(c);
                    (a, out)
                },
                &a0,
                1e-4,
            );
            fd_check(
                |t, v| {
                    let a = t.constant(a0.clone());
                    let b = t.leaf(v.to_vec(), true);
                    let c = t.matmul(a, b, m, k, n, ta, tb);
                    let c = t.tanh(c);
                    let out = t.mean(c);
                    (b, out)
                },
                &b0,
                1e-4,
            );
        }
    }

    #[test]
    fn softmax_layernorm_addrow_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (rows, cols) = (3, 5);
        let x0 = randvec(&mut rng, rows * cols);
        let gain = randvec(&mut rng, cols);
        let bias = randvec(&mut rng, cols);
        let row = randvec(&mut rng, cols);
        fd_check(
            |t, v| {
                let x = t.leaf(v.to_vec(), true);
                let g = t.constant(gain.clone());
                let b = t.constant(bias.clone());
                let r = t.constant(row.clone());
                let y = t.layer_norm(x, g, b, rows, cols);
                let y = t.add_row(y, r, rows, cols);
                let y = t.row_softmax(y, rows, cols);
                let y = t.tanh(y);
                let out = t.mean(y);
                (x, out)
            },
            &x0,
            1e-4,
        );
        // gain/bias side
        fd_check(
            |t, v| {
                let x = t.constant(x0.clone());
                let g = t.leaf(v.to_vec(), true);
                let b = t.constant(bias.clone());
                let y = t.layer_norm(x, g, b, rows, cols);
                let out = t.mean(y);
                (g, out)
            },
            &gain,
            1e-4,
        );
    }

    #[test]
    fn filter_scaleby_lincomb_slice_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = randvec(&mut rng, 25); // 5x5 map
        let kernel = Rc::new(vec![0.05, 0.1, 0.05, 0.1, 0.4, 0.1, 0.05, 0.1, 0.05]);
        fd_check(
            |t, v| {
                let x = t.leaf(v.to_vec(), true);
                let f = t.filter2d(x, 5, 5, kernel.clone(), 3, 3);
                let s = t.slice(f, 2, 4);
                let m = t.mean(s);
                (x, m)
            },
            &x0,
            1e-4,
        );
        // scale_by coefficient gradient
        fd_check(
            |t, v| {
                let c = t.leaf(v.to_vec(), true);
                let base = t.constant(x0[..4].to_vec());
                let y = t.scale_by(base, c);
                let m = t.mean(y);
                let m2 = t.lin_comb(vec![m, c], vec![1.0, 0.25]);
                (c, m2)
            },
            &[0.37],
            1e-4,
        );
    }

    #[test]
    fn axpby_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = randvec(&mut rng, 7);
        let other = randvec(&mut rng, 7);
        fd_check(
            |t, v| {
                let a = t.leaf(v.to_vec(), true);
                let b = t.constant(other.clone());
                let y = t.axpby(0.8, a, -1.3, b);
                let m = t.mean(y);
                (a, m)
            },
            &x0,
            1e-4,
        );
    }

    #[test]
    fn no_grad_inputs_receive_no_adjoint() {
        let mut tape = Tape::new();
        let frozen = tape.constant(vec![1.0, 2.0]);
        let x = tape.leaf(vec![0.5, -0.5], true);
        let y = tape.mul(frozen, x);
        let m = tape.mean(y);
        let grads = tape.backward_scalar(m);
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn meter_tracks_live_and_peak() {
        let meter = MemoryMeter::new();
        {
            let mut tape = Tape::with_meter(meter.clone());
            // Constant leaves are not retained activations.
            let c = tape.constant(vec![0.0; 1000]);
            assert_eq!(meter.live(), 0);
            let x = tape.leaf(vec![0.0; 100], true);
            assert_eq!(meter.live(), 100);
            tape.add(c, c);
            assert_eq!(meter.live(), 1100);
            tape.mul_scalar(x, 2.0);
            assert_eq!(meter.live(), 1200);
        }
        assert_eq!(meter.live(), 0);
        assert_eq!(meter.peak(), 1200);
        meter.acquire(40);
        assert_eq!(meter.peak(), 1200);
        meter.release(40);
        assert_eq!(meter.live(), 0);
    }

    #[test]
    fn shared_leaves_are_not_copied_or_metered() {
        let meter = MemoryMeter::new();
        let shared = Rc::new(vec![1.0, 2.0, 3.0]);
        let mut tape = Tape::with_meter(meter.clone());
        let s = tape.leaf_shared(shared.clone());
        assert_eq!(meter.live(), 0);
        assert_eq!(tape.value(s), shared.as_slice());
        let x = tape.leaf(vec![1.0, 1.0, 1.0], true);
        let y = tape.mul(s, x);
        let m = tape.mean(y);
        let grads = tape.backward_scalar(m);
        let g = grads.get(x).unwrap();
        for (gi, si) in g.iter().zip(shared.iter()) {
            assert!((gi - si / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_from_accumulates_multiple_seeds() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2.0], true);
        let a = tape.mul_scalar(x, 3.0);
        let b = tape.mul_scalar(x, 5.0);
        let grads = tape.backward_from(&[(a, vec![1.0]), (b, vec![1.0])]);
        assert_eq!(grads.scalar(x), 8.0);
    }
}
