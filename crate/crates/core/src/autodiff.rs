//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records a computation graph for a single forward pass.
//! Parameters are borrowed, not copied; each one can be tagged with a
//! gradient slot so [`Tape::backward`] can accumulate into caller-owned
//! gradient buffers. Tapes are cheap and meant to be built per record.

use crate::tensor::{matmul_nt_acc, matmul_tn_acc, sigmoid, softplus, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'a> {
    Borrowed(&'a Tensor),
    Owned(Tensor),
}

impl Value<'_> {
    #[inline]
    fn get(&self) -> &Tensor {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op {
    Input { slot: Option<usize> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Gather { table: Var, ids: Vec<Option<usize>> },
    SliceCols { x: Var, start: usize },
    Rows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    TileRows(Var),
    CausalConv { x: Var, w: Var, kernel: usize, dilation: usize },
    LogSoftmaxDot { logits: Var, targets: Tensor },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    /// A borrowed tensor whose gradient is accumulated into `slot`.
    pub fn param(&mut self, t: &'a Tensor, slot: usize) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Input { slot: Some(slot) },
        });
        Var(self.nodes.len() - 1)
    }

    /// A borrowed tensor that receives no gradient.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Input { slot: None },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input { slot: None })
    }

    /// An owned input whose gradient is accumulated into `slot`.
    pub fn input(&mut self, t: Tensor, slot: usize) -> Var {
        self.push(t, Op::Input { slot: Some(slot) })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    /// Adds a `1 x n` row to every row of an `m x n` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, n), "add_row expects a 1 x {n} row");
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// Row lookup; `None` produces a zero row.
    pub fn gather(&mut self, table: Var, ids: Vec<Option<usize>>) -> Var {
        let t = self.value(table);
        let n = t.cols();
        let mut v = Tensor::zeros(ids.len(), n);
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = id {
                v.row_mut(r).copy_from_slice(t.row(*id));
            }
        }
        self.push(v, Op::Gather { table, ids })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let t = self.value(x);
        assert!(start + width <= t.cols(), "column slice out of range");
        let v = Tensor::from_fn(t.rows(), width, |r, c| t.get(r, start + c));
        self.push(v, Op::SliceCols { x, start })
    }

    /// Contiguous rows `start..start + count`.
    pub fn rows(&mut self, x: Var, start: usize, count: usize) -> Var {
        let t = self.value(x);
        assert!(start + count <= t.rows(), "row slice out of range");
        let n = t.cols();
        let v = Tensor::from_vec(count, n, t.data()[start * n..(start + count) * n].to_vec());
        self.push(v, Op::Rows { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Tensor::zeros(rows, width);
        let mut offset = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-major reinterpretation of the same data.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x).clone().reshaped(rows, cols);
        self.push(v, Op::Reshape(x))
    }

    /// Repeats a `1 x n` row `count` times.
    pub fn tile_rows(&mut self, x: Var, count: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows(), 1, "tile_rows expects a single row");
        let v = Tensor::from_fn(count, t.cols(), |_, c| t.get(0, c));
        self.push(v, Op::TileRows(x))
    }

    /// Causal dilated 1-D convolution along rows.
    ///
    /// `x` is `L x C_in`, `w` is `(kernel * C_in) x C_out`; tap `j` reads
    /// row `t - (kernel - 1 - j) * dilation`, with rows before 0 treated as
    /// zero. Output row `t` never reads rows after `t`.
    pub fn causal_conv(&mut self, x: Var, w: Var, kernel: usize, dilation: usize) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let (len, cin) = xt.shape();
        assert_eq!(wt.rows(), kernel * cin, "conv weight rows must be kernel * C_in");
        let cout = wt.cols();
        let mut v = Tensor::zeros(len, cout);
        for t in 0..len {
            for j in 0..kernel {
                let back = (kernel - 1 - j) * dilation;
                if back > t {
                    continue;
                }
                let src = xt.row(t - back);
                let out = &mut v.data_mut()[t * cout..(t + 1) * cout];
                for (p, &xv) in src.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wr = wt.row(j * cin + p);
                    for (o, &wv) in out.iter_mut().zip(wr) {
                        *o += xv * wv;
                    }
                }
            }
        }
        self.push(
            v,
            Op::CausalConv {
                x,
                w,
                kernel,
                dilation,
            },
        )
    }

    /// `sum_{r,j} targets[r, j] * log_softmax(logits[r, :])[j]` as a `1 x 1` node.
    pub fn log_softmax_dot(&mut self, logits: Var, targets: Tensor) -> Var {
        let l = self.value(logits);
        assert_eq!(l.shape(), targets.shape(), "targets must match logits shape");
        let mut total = 0.0;
        for r in 0..l.rows() {
            let lp = crate::tensor::log_softmax(l.row(r));
            for (lpv, &tv) in lp.iter().zip(targets.row(r)) {
                if tv != 0.0 {
                    total += tv * lpv;
                }
            }
        }
        self.push(
            Tensor::from_vec(1, 1, vec![total]),
            Op::LogSoftmaxDot { logits, targets },
        )
    }

    /// Backpropagates from the scalar node `root`, adding gradients of every
    /// slotted input into `grads[slot]`.
    pub fn backward(&self, root: Var, grads: &mut [Tensor]) {
        self.backward_scaled(root, 1.0, grads)
    }

    /// As [`Tape::backward`], with the root gradient set to `seed`.
    pub fn backward_scaled(&self, root: Var, seed: f64, grads: &mut [Tensor]) {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut adj: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::filled(1, 1, seed));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input { slot } => {
                    if let Some(s) = slot {
                        grads[*s].add_assign(&g);
                    }
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    matmul_nt_acc(&g, bv, &mut ga);
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    matmul_tn_acc(av, &g, &mut gb);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.map(|x| -x));
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = g.zip_map(bv, |x, y| x / y);
                    let out = node.value.get();
                    let gb = Tensor::from_fn(g.rows(), g.cols(), |r, c| {
                        -g.get(r, c) * out.get(r, c) / bv.get(r, c)
                    });
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut adj, *row, gr);
                    acc(&mut adj, *a, g);
                }
                Op::Scale(a, s) => acc(&mut adj, *a, g.map(|x| x * s)),
                Op::AddScalar(a) => acc(&mut adj, *a, g),
                Op::Sigmoid(a) => {
                    let out = node.value.get();
                    acc(&mut adj, *a, g.zip_map(out, |x, y| x * y * (1.0 - y)));
                }
                Op::Tanh(a) => {
                    let out = node.value.get();
                    acc(&mut adj, *a, g.zip_map(out, |x, y| x * (1.0 - y * y)));
                }
                Op::Softplus(a) => {
                    let inp = self.value(*a);
                    acc(&mut adj, *a, g.zip_map(inp, |x, y| x * sigmoid(y)));
                }
                Op::Exp(a) => {
                    let out = node.value.get();
                    acc(&mut adj, *a, g.zip_map(out, |x, y| x * y));
                }
                Op::Ln(a) => {
                    let inp = self.value(*a);
                    acc(&mut adj, *a, g.zip_map(inp, |x, y| x / y));
                }
                Op::Sqrt(a) => {
                    let out = node.value.get();
                    acc(&mut adj, *a, g.zip_map(out, |x, y| 0.5 * x / y));
                }
                Op::Square(a) => {
                    let inp = self.value(*a);
                    acc(&mut adj, *a, g.zip_map(inp, |x, y| 2.0 * x * y));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut adj, *a, Tensor::filled(r, c, g.data()[0]));
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(id) = id {
                            for (o, x) in gt.row_mut(*id).iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                    }
                    acc(&mut adj, *table, gt);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::Rows { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    let n = xv.cols();
                    gx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    acc(&mut adj, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let gp = Tensor::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        acc(&mut adj, *p, gp);
                        offset += w;
                    }
                }
                Op::Reshape(x) => {
                    let (r, c) = self.value(*x).shape();
                    acc(&mut adj, *x, g.reshaped(r, c));
                }
                Op::TileRows(x) => {
                    let mut gx = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gx.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::CausalConv {
                    x,
                    w,
                    kernel,
                    dilation,
                } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (len, cin) = xv.shape();
                    let cout = wv.cols();
                    let mut gx = Tensor::zeros(len, cin);
                    let mut gw = Tensor::zeros(wv.rows(), cout);
                    for t in 0..len {
                        let gy = g.row(t);
                        for j in 0..*kernel {
                            let back = (kernel - 1 - j) * dilation;
                            if back > t {
                                continue;
                            }
                            let src = t - back;
                            for p in 0..cin {
                                let wr = wv.row(j * cin + p);
                                let dot: f64 = wr.iter().zip(gy).map(|(a, b)| a * b).sum();
                                gx.data_mut()[src * cin + p] += dot;
                                let xval = xv.get(src, p);
                                if xval != 0.0 {
                                    let gwr = gw.row_mut(j * cin + p);
                                    for (o, &gv) in gwr.iter_mut().zip(gy) {
                                        *o += xval * gv;
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut adj, *x, gx);
                    acc(&mut adj, *w, gw);
                }
                Op::LogSoftmaxDot { logits, targets } => {
                    let lv = self.value(*logits);
                    let up = g.data()[0];
                    let mut gl = Tensor::zeros(lv.rows(), lv.cols());
                    for r in 0..lv.rows() {
                        let mass: f64 = targets.row(r).iter().sum();
                        if mass == 0.0 {
                            continue;
                        }
                        let p = crate::tensor::softmax(lv.row(r));
                        for ((o, &tv), pv) in gl.row_mut(r).iter_mut().zip(targets.row(r)).zip(p) {
                            *o = up * (tv - mass * pv);
                        }
                    }
                    acc(&mut adj, *logits, gl);
                }
            }
        }
    }
}

#[inline]
fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
