//! Reverse-mode autodiff tape with forward-mode tangent lifting.
//!
//! The tape is a Wengert list over dense `f64` matrices: building an
//! expression records one op per node, `gradients` replays the ops backwards
//! and accumulates adjoints. Leaves are either constants or parameters; a
//! parameter that never reaches the requested root simply gets a zero
//! gradient.
//!
//! Tangents ride the same tape. `seed_tangent` marks a leaf as the
//! differentiation variable (tangent = 1), and every builder that sees a
//! tangent-carrying input emits the tangent of its output *as more tape ops
//! built from the same primitives*. A downstream loss of a tangent node is
//! therefore an ordinary tape scalar, and reverse mode through it yields
//! correct parameter gradients of the derivative — forward-over-reverse
//! without any dedicated second-order machinery. The price is that each
//! primitive's tangent rule must be expressed in already-differentiable ops
//! (e.g. the SiLU tangent is spelled out through `tanh`), which is exactly
//! what keeps the composition closed.
//!
//! Shape discipline: every node is `rows x cols`; elementwise ops require
//! equal shapes, broadcasts are explicit ops. Mismatches panic — they are
//! construction bugs, not runtime conditions.

use crate::linalg::{gemm_nn, gemm_nt, gemm_tn, Mat};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

struct Node {
    value: Mat,
    /// Tangent of this node with respect to the seeded leaf, if any path from
    /// the seed reaches it. Structurally-zero tangents stay `None`.
    tangent: Option<NodeId>,
    /// Index into `ops`; `None` for leaves.
    produced_by: Option<usize>,
}

enum Op {
    /// out = x · wᵀ  (x: r x k, w: m x k)
    MatMulNt { x: NodeId, w: NodeId, out: NodeId },
    /// out = x + row  (row: 1 x c broadcast over rows)
    AddRow { x: NodeId, row: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Sub { a: NodeId, b: NodeId, out: NodeId },
    /// Elementwise product.
    Mul { a: NodeId, b: NodeId, out: NodeId },
    /// out = k·x for a compile-time constant k.
    Scale { x: NodeId, k: f64, out: NodeId },
    /// out = x + k.
    AddConst { x: NodeId, out: NodeId },
    /// out[r, c] = x[r, 0] for all c (x: r x 1).
    BroadcastCol { x: NodeId, out: NodeId },
    Tanh { x: NodeId, out: NodeId },
    Silu { x: NodeId, out: NodeId },
    Sin { x: NodeId, out: NodeId },
    Cos { x: NodeId, out: NodeId },
    /// Feature-axis concatenation of equal-row inputs.
    Concat { xs: Vec<NodeId>, out: NodeId },
    /// Sum of all entries, 1 x 1.
    SumAll { x: NodeId, out: NodeId },
    /// Mean of all entries, 1 x 1.
    MeanAll { x: NodeId, out: NodeId },
    /// Sum of squared differences, 1 x 1.
    SqDiffSum { a: NodeId, b: NodeId, out: NodeId },
}

/// Numerically stable logistic function, written through `tanh` so the tape's
/// SiLU tangent rule and its backward rule share one definition.
fn sigmoid(x: f64) -> f64 {
    0.5 * (0.5 * x).tanh() + 0.5
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
}

/// Per-node adjoints produced by [`Tape::gradients`].
pub struct Gradients {
    adjoints: Vec<Option<Mat>>,
}

impl Gradients {
    /// Adjoint of `id`, if any gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.adjoints[id.0].as_ref()
    }

    /// Adjoint of `id`, or zeros of the given shape for untouched nodes.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Mat {
        match &self.adjoints[id.0] {
            Some(m) => {
                assert_eq!(m.shape(), (rows, cols), "adjoint shape mismatch");
                m.clone()
            }
            None => Mat::zeros(rows, cols),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id.0].produced_by.is_none()
    }

    /// Tangent node of `id`, if the seeded leaf reaches it.
    pub fn tangent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0].tangent
    }

    // ---- leaves ------------------------------------------------------------

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push_node(value, None)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.leaf(Mat::scalar(v))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.leaf(Mat::zeros(rows, cols))
    }

    /// Mark a leaf as the forward-mode differentiation variable: its tangent
    /// becomes 1 in every entry (each row of a column of times is an
    /// independent variable, differentiated with respect to itself).
    pub fn seed_tangent(&mut self, id: NodeId) {
        assert!(self.is_leaf(id), "tangent seed must be a leaf");
        assert!(self.nodes[id.0].tangent.is_none(), "leaf already seeded");
        let (rows, cols) = self.shape(id);
        let ones = self.leaf(Mat::from_vec(rows, cols, vec![1.0; rows * cols]));
        self.nodes[id.0].tangent = Some(ones);
    }

    fn push_node(&mut self, value: Mat, produced_by: Option<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, tangent: None, produced_by });
        id
    }

    fn set_tangent(&mut self, id: NodeId, tangent: NodeId) {
        assert_eq!(self.shape(id), self.shape(tangent), "tangent shape mismatch");
        self.nodes[id.0].tangent = Some(tangent);
    }

    // ---- raw builders (primal value + op record, no tangent wiring) --------

    fn raw_matmul_nt(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (xr, _) = self.shape(x);
        let (wr, _) = self.shape(w);
        let mut out = Mat::zeros(xr, wr);
        gemm_nt(self.value(x), self.value(w), &mut out, 0.0);
        let op_idx = self.ops.len();
        let out = self.push_node(out, Some(op_idx));
        self.ops.push(Op::MatMulNt { x, w, out });
        out
    }

    fn raw_add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (rows, cols) = self.shape(x);
        assert_eq!(self.shape(row), (1, cols), "add_row needs a 1 x cols row");
        let mut out = self.value(x).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let op_idx = self.ops.len();
        let out = self.push_node(out, Some(op_idx));
        self.ops.push(Op::AddRow { x, row, out });
        out
    }

    fn raw_binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, mk: impl Fn(NodeId, NodeId, NodeId) -> Op) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let (rows, cols) = self.shape(a);
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b).iter()).map(|(&x, &y)| f(x, y)).collect();
        let op_idx = self.ops.len();
        let out = self.push_node(Mat::from_vec(rows, cols, data), Some(op_idx));
        self.ops.push(mk(a, b, out));
        out
    }

    fn raw_add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.raw_binary(a, b, |x, y| x + y, |a, b, out| Op::Add { a, b, out })
    }

    fn raw_sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.raw_binary(a, b, |x, y| x - y, |a, b, out| Op::Sub { a, b, out })
    }

    fn raw_mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.raw_binary(a, b, |x, y| x * y, |a, b, out| Op::Mul { a, b, out })
    }

    fn raw_unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, mk: impl Fn(NodeId, NodeId) -> Op) -> NodeId {
        let value = self.value(x).map(&f);
        let op_idx = self.ops.len();
        let out = self.push_node(value, Some(op_idx));
        self.ops.push(mk(x, out));
        out
    }

    fn raw_scale(&mut self, x: NodeId, k: f64) -> NodeId {
        self.raw_unary(x, |v| k * v, |x, out| Op::Scale { x, k, out })
    }

    fn raw_add_const(&mut self, x: NodeId, k: f64) -> NodeId {
        self.raw_unary(x, |v| v + k, |x, out| Op::AddConst { x, out })
    }

    fn raw_tanh(&mut self, x: NodeId) -> NodeId {
        self.raw_unary(x, f64::tanh, |x, out| Op::Tanh { x, out })
    }

    fn raw_silu(&mut self, x: NodeId) -> NodeId {
        self.raw_unary(x, |v| v * sigmoid(v), |x, out| Op::Silu { x, out })
    }

    fn raw_sin(&mut self, x: NodeId) -> NodeId {
        self.raw_unary(x, f64::sin, |x, out| Op::Sin { x, out })
    }

    fn raw_cos(&mut self, x: NodeId) -> NodeId {
        self.raw_unary(x, f64::cos, |x, out| Op::Cos { x, out })
    }

    fn raw_broadcast_col(&mut self, x: NodeId, cols: usize) -> NodeId {
        let (rows, xc) = self.shape(x);
        assert_eq!(xc, 1, "broadcast_col input must be rows x 1");
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let v = self.value(x).get(r, 0);
            out.row_mut(r).fill(v);
        }
        let op_idx = self.ops.len();
        let out = self.push_node(out, Some(op_idx));
        self.ops.push(Op::BroadcastCol { x, out });
        out
    }

    fn raw_concat(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat needs at least one input");
        let rows = self.shape(xs[0]).0;
        let cols: usize = xs.iter().map(|&x| self.shape(x).1).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &x in xs {
                let xc = self.shape(x).1;
                assert_eq!(self.shape(x).0, rows, "concat row mismatch");
                out.row_mut(r)[at..at + xc].copy_from_slice(&self.value(x).row(r)[..xc]);
                at += xc;
            }
        }
        let op_idx = self.ops.len();
        let out = self.push_node(out, Some(op_idx));
        self.ops.push(Op::Concat { xs: xs.to_vec(), out });
        out
    }

    fn raw_sum_all(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).iter().sum();
        let op_idx = self.ops.len();
        let out = self.push_node(Mat::scalar(total), Some(op_idx));
        self.ops.push(Op::SumAll { x, out });
        out
    }

    fn raw_mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let total: f64 = self.value(x).iter().sum();
        let op_idx = self.ops.len();
        let out = self.push_node(Mat::scalar(total / n), Some(op_idx));
        self.ops.push(Op::MeanAll { x, out });
        out
    }

    fn raw_sq_diff_sum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sq_diff_sum shape mismatch");
        let total: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let op_idx = self.ops.len();
        let out = self.push_node(Mat::scalar(total), Some(op_idx));
        self.ops.push(Op::SqDiffSum { a, b, out });
        out
    }

    // ---- public builders (primal + tangent propagation) --------------------

    /// out = x · wᵀ.
    pub fn matmul_nt(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let out = self.raw_matmul_nt(x, w);
        let (tx, tw) = (self.tangent(x), self.tangent(w));
        let mut tan = tx.map(|tx| self.raw_matmul_nt(tx, w));
        if let Some(tw) = tw {
            let term = self.raw_matmul_nt(x, tw);
            tan = Some(match tan {
                Some(t) => self.raw_add(t, term),
                None => term,
            });
        }
        if let Some(t) = tan {
            self.set_tangent(out, t);
        }
        out
    }

    /// out = x + row (row broadcast over the batch).
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let out = self.raw_add_row(x, row);
        let (tx, tr) = (self.tangent(x), self.tangent(row));
        let tan = match (tx, tr) {
            (Some(tx), Some(tr)) => Some(self.raw_add_row(tx, tr)),
            (Some(tx), None) => Some(tx),
            (None, Some(tr)) => {
                let (rows, _) = self.shape(x);
                let zeros = self.zeros(rows, self.shape(row).1);
                Some(self.raw_add_row(zeros, tr))
            }
            (None, None) => None,
        };
        if let Some(t) = tan {
            self.set_tangent(out, t);
        }
        out
    }

    /// Affine layer `x · wᵀ + b`, the only composite builder.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let prod = self.matmul_nt(x, w);
        self.add_row(prod, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.raw_add(a, b);
        let tan = match (self.tangent(a), self.tangent(b)) {
            (Some(ta), Some(tb)) => Some(self.raw_add(ta, tb)),
            (Some(ta), None) => Some(ta),
            (None, Some(tb)) => Some(tb),
            (None, None) => None,
        };
        if let Some(t) = tan {
            self.set_tangent(out, t);
        }
        out
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.raw_sub(a, b);
        let tan = match (self.tangent(a), self.tangent(b)) {
            (Some(ta), Some(tb)) => Some(self.raw_sub(ta, tb)),
            (Some(ta), None) => Some(ta),
            (None, Some(tb)) => Some(self.raw_scale(tb, -1.0)),
            (None, None) => None,
        };
        if let Some(t) = tan {
            self.set_tangent(out, t);
        }
        out
    }

    /// Elementwise product with the product-rule tangent.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.raw_mul(a, b);
        let (ta, tb) = (self.tangent(a), self.tangent(b));
        let mut tan = ta.map(|ta| self.raw_mul(ta, b));
        if let Some(tb) = tb {
            let term = self.raw_mul(a, tb);
            tan = Some(match tan {
                Some(t) => self.raw_add(t, term),
                None => term,
            });
        }
        if let Some(t) = tan {
            self.set_tangent(out, t);
        }
        out
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let out = self.raw_scale(x, k);
        if let Some(tx) = self.tangent(x) {
            let t = self.raw_scale(tx, k);
            self.set_tangent(out, t);
        }
        out
    }

    pub fn add_const(&mut self, x: NodeId, k: f64) -> NodeId {
        let out = self.raw_add_const(x, k);
        if let Some(tx) = self.tangent(x) {
            self.set_tangent(out, tx);
        }
        out
    }

    pub fn broadcast_col(&mut self, x: NodeId, cols: usize) -> NodeId {
        let out = self.raw_broadcast_col(x, cols);
        if let Some(tx) = self.tangent(x) {
            let t = self.raw_broadcast_col(tx, cols);
            self.set_tangent(out, t);
        }
        out
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.raw_tanh(x);
        if let Some(tx) = self.tangent(x) {
            // d tanh = (1 - tanh^2) dx, with tanh reused from the primal node.
            let sq = self.raw_mul(out, out);
            let neg = self.raw_scale(sq, -1.0);
            let one_minus = self.raw_add_const(neg, 1.0);
            let t = self.raw_mul(one_minus, tx);
            self.set_tangent(out, t);
        }
        out
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.raw_silu(x);
        if let Some(tx) = self.tangent(x) {
            // silu'(x) = sig(x) (1 + x (1 - sig(x))), spelled in primitives so
            // reverse mode through the tangent sees only known ops.
            let half = self.raw_scale(x, 0.5);
            let th = self.raw_tanh(half);
            let sig_half = self.raw_scale(th, 0.5);
            let sig = self.raw_add_const(sig_half, 0.5);
            let neg_sig = self.raw_scale(sig, -1.0);
            let one_minus_sig = self.raw_add_const(neg_sig, 1.0);
            let x_term = self.raw_mul(x, one_minus_sig);
            let inner = self.raw_add_const(x_term, 1.0);
            let dsilu = self.raw_mul(sig, inner);
            let t = self.raw_mul(dsilu, tx);
            self.set_tangent(out, t);
        }
        out
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        let out = self.raw_sin(x);
        if let Some(tx) = self.tangent(x) {
            let c = self.raw_cos(x);
            let t = self.raw_mul(c, tx);
            self.set_tangent(out, t);
        }
        out
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        let out = self.raw_cos(x);
        if let Some(tx) = self.tangent(x) {
            let s = self.raw_sin(x);
            let prod = self.raw_mul(s, tx);
            let t = self.raw_scale(prod, -1.0);
            self.set_tangent(out, t);
        }
        out
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let out = self.raw_concat(xs);
        if xs.iter().any(|&x| self.tangent(x).is_some()) {
            let parts: Vec<NodeId> = xs
                .iter()
                .map(|&x| match self.tangent(x) {
                    Some(t) => t,
                    None => {
                        let (r, c) = self.shape(x);
                        self.zeros(r, c)
                    }
                })
                .collect();
            let t = self.raw_concat(&parts);
            self.set_tangent(out, t);
        }
        out
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let out = self.raw_sum_all(x);
        if let Some(tx) = self.tangent(x) {
            let t = self.raw_sum_all(tx);
            self.set_tangent(out, t);
        }
        out
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let out = self.raw_mean_all(x);
        if let Some(tx) = self.tangent(x) {
            let t = self.raw_mean_all(tx);
            self.set_tangent(out, t);
        }
        out
    }

    /// Sum of squared differences; tangent is `2 Σ (a-b)(ȧ-ḃ)`.
    pub fn sq_diff_sum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.raw_sq_diff_sum(a, b);
        let (ta, tb) = (self.tangent(a), self.tangent(b));
        if ta.is_some() || tb.is_some() {
            let diff = self.raw_sub(a, b);
            let tdiff = match (ta, tb) {
                (Some(ta), Some(tb)) => self.raw_sub(ta, tb),
                (Some(ta), None) => ta,
                (None, Some(tb)) => self.raw_scale(tb, -1.0),
                (None, None) => unreachable!(),
            };
            let prod = self.raw_mul(diff, tdiff);
            let sum = self.raw_sum_all(prod);
            let t = self.raw_scale(sum, 2.0);
            self.set_tangent(out, t);
        }
        out
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Multiple sweeps over one tape
    /// (e.g. per loss component) are fine; each call starts fresh adjoints.
    pub fn gradients(&self, root: NodeId) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "gradient root must be a scalar node");
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Mat::scalar(1.0));

        // Helper: accumulate `delta` into the adjoint of `id`.
        fn bump(adj: &mut [Option<Mat>], id: NodeId, delta: &Mat) {
            match &mut adj[id.0] {
                Some(m) => m.add_scaled(delta, 1.0),
                slot => *slot = Some(delta.clone()),
            }
        }

        for op in self.ops.iter().rev() {
            match op {
                Op::MatMulNt { x, w, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    let (xr, xc) = self.shape(*x);
                    let (wr, wc) = self.shape(*w);
                    {
                        let dx = adj[x.0].get_or_insert_with(|| Mat::zeros(xr, xc));
                        gemm_nn(&g, self.value(*w), dx, 1.0);
                    }
                    {
                        let dw = adj[w.0].get_or_insert_with(|| Mat::zeros(wr, wc));
                        gemm_tn(&g, self.value(*x), dw, 1.0);
                    }
                }
                Op::AddRow { x, row, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    bump(&mut adj, *x, &g);
                    let cols = g.cols();
                    let dr = adj[row.0].get_or_insert_with(|| Mat::zeros(1, cols));
                    for r in 0..g.rows() {
                        for (d, v) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
                Op::Add { a, b, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    bump(&mut adj, *a, &g);
                    bump(&mut adj, *b, &g);
                }
                Op::Sub { a, b, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    bump(&mut adj, *a, &g);
                    match &mut adj[b.0] {
                        Some(m) => m.add_scaled(&g, -1.0),
                        slot => {
                            let mut neg = g.clone();
                            neg.scale_in_place(-1.0);
                            *slot = Some(neg);
                        }
                    }
                }
                Op::Mul { a, b, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    let da = hadamard(&g, self.value(*b));
                    bump(&mut adj, *a, &da);
                    let db = hadamard(&g, self.value(*a));
                    bump(&mut adj, *b, &db);
                }
                Op::Scale { x, k, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    match &mut adj[x.0] {
                        Some(m) => m.add_scaled(&g, *k),
                        slot => {
                            let mut dx = g.clone();
                            dx.scale_in_place(*k);
                            *slot = Some(dx);
                        }
                    }
                }
                Op::AddConst { x, out, .. } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    bump(&mut adj, *x, &g);
                }
                Op::BroadcastCol { x, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    let rows = g.rows();
                    let dx = adj[x.0].get_or_insert_with(|| Mat::zeros(rows, 1));
                    for r in 0..rows {
                        let s: f64 = g.row(r).iter().sum();
                        dx.set(r, 0, dx.get(r, 0) + s);
                    }
                }
                Op::Tanh { x, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    let z = self.value(*out);
                    let dx = Mat::from_vec(
                        g.rows(),
                        g.cols(),
                        g.iter().zip(z.iter()).map(|(&gi, &zi)| gi * (1.0 - zi * zi)).collect(),
                    );
                    bump(&mut adj, *x, &dx);
                }
                Op::Silu { x, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    let xv = self.value(*x);
                    let dx = Mat::from_vec(
                        g.rows(),
                        g.cols(),
                        g.iter().zip(xv.iter()).map(|(&gi, &xi)| gi * silu_grad(xi)).collect(),
                    );
                    bump(&mut adj, *x, &dx);
                }
                Op::Sin { x, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    let xv = self.value(*x);
                    let dx = Mat::from_vec(
                        g.rows(),
                        g.cols(),
                        g.iter().zip(xv.iter()).map(|(&gi, &xi)| gi * xi.cos()).collect(),
                    );
                    bump(&mut adj, *x, &dx);
                }
                Op::Cos { x, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    let xv = self.value(*x);
                    let dx = Mat::from_vec(
                        g.rows(),
                        g.cols(),
                        g.iter().zip(xv.iter()).map(|(&gi, &xi)| -gi * xi.sin()).collect(),
                    );
                    bump(&mut adj, *x, &dx);
                }
                Op::Concat { xs, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    let mut at = 0;
                    for &x in xs {
                        let (rows, xc) = self.shape(x);
                        let mut dx = Mat::zeros(rows, xc);
                        for r in 0..rows {
                            dx.row_mut(r).copy_from_slice(&g.row(r)[at..at + xc]);
                        }
                        bump(&mut adj, x, &dx);
                        at += xc;
                    }
                }
                Op::SumAll { x, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    let g0 = g.get(0, 0);
                    let (rows, cols) = self.shape(*x);
                    let dx = Mat::from_vec(rows, cols, vec![g0; rows * cols]);
                    bump(&mut adj, *x, &dx);
                }
                Op::MeanAll { x, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    let (rows, cols) = self.shape(*x);
                    let g0 = g.get(0, 0) / (rows * cols) as f64;
                    let dx = Mat::from_vec(rows, cols, vec![g0; rows * cols]);
                    bump(&mut adj, *x, &dx);
                }
                Op::SqDiffSum { a, b, out } => {
                    let Some(g) = adj[out.0].clone() else { continue };
                    let g0 = g.get(0, 0);
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = Mat::from_vec(
                        av.rows(),
                        av.cols(),
                        av.iter().zip(bv.iter()).map(|(&x, &y)| 2.0 * g0 * (x - y)).collect(),
                    );
                    bump(&mut adj, *a, &da);
                    let mut db = da.clone();
                    db.scale_in_place(-1.0);
                    bump(&mut adj, *b, &db);
                }
            }
        }
        Gradients { adjoints: adj }
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.shape(), b.shape());
    Mat::from_vec(a.rows(), a.cols(), a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{fd_grad, rel_err};
    use crate::rng::StreamRng;

    fn rand_mat(rng: &StreamRng, base: u64, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| rng.normal_at(base + i as u64)).collect(),
        )
    }

    /// Reverse-mode vs. central FD on one leaf of a scalar-valued graph.
    fn gradcheck(build: impl Fn(&mut Tape, NodeId) -> NodeId, leaf0: &Mat, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.leaf(leaf0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.gradients(loss);
        let got = grads.get_or_zeros(x, leaf0.rows(), leaf0.cols());

        let want = fd_grad(
            |flat| {
                let mut t = Tape::new();
                let x = t.leaf(Mat::from_vec(leaf0.rows(), leaf0.cols(), flat.to_vec()));
                let loss = build(&mut t, x);
                t.value(loss).get(0, 0)
            },
            leaf0.as_slice(),
            1e-5,
        );
        let err = rel_err(got.as_slice(), &want);
        assert!(err < tol, "gradcheck failed: rel err {err}");
    }

    #[test]
    fn forward_values_of_every_primitive() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.leaf(Mat::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.0]));
        let add = t.add(a, b);
        assert_eq!(t.value(add).as_slice(), &[1.5, 1.0, 5.0, 4.0]);
        let sub = t.sub(a, b);
        assert_eq!(t.value(sub).as_slice(), &[0.5, 3.0, 1.0, 4.0]);
        let mul = t.mul(a, b);
        assert_eq!(t.value(mul).as_slice(), &[0.5, -2.0, 6.0, 0.0]);
        let sc = t.scale(a, 2.0);
        assert_eq!(t.value(sc).as_slice(), &[2.0, 4.0, 6.0, 8.0]);
        let ac = t.add_const(a, -1.0);
        assert_eq!(t.value(ac).as_slice(), &[0.0, 1.0, 2.0, 3.0]);

        let w = t.leaf(Mat::from_vec(1, 2, vec![1.0, 1.0]));
        let mm = t.matmul_nt(a, w);
        assert_eq!(t.value(mm).as_slice(), &[3.0, 7.0]);

        let row = t.leaf(Mat::from_vec(1, 2, vec![10.0, 20.0]));
        let ar = t.add_row(a, row);
        assert_eq!(t.value(ar).as_slice(), &[11.0, 22.0, 13.0, 24.0]);

        let colv = t.leaf(Mat::from_vec(2, 1, vec![5.0, 6.0]));
        let bc = t.broadcast_col(colv, 3);
        assert_eq!(t.value(bc).as_slice(), &[5.0, 5.0, 5.0, 6.0, 6.0, 6.0]);

        let cat = t.concat(&[a, b]);
        assert_eq!(t.value(cat).as_slice(), &[1.0, 2.0, 0.5, -1.0, 3.0, 4.0, 2.0, 0.0]);

        let sum = t.sum_all(a);
        assert_eq!(t.value(sum).get(0, 0), 10.0);
        let mean = t.mean_all(a);
        assert_eq!(t.value(mean).get(0, 0), 2.5);
        let sq = t.sq_diff_sum(a, b);
        assert_eq!(t.value(sq).get(0, 0), 0.25 + 9.0 + 1.0 + 16.0);

        let z = t.leaf(Mat::scalar(0.0));
        let th = t.tanh(z);
        assert_eq!(t.value(th).get(0, 0), 0.0);
        let si = t.silu(z);
        assert_eq!(t.value(si).get(0, 0), 0.0);
        let sn = t.sin(z);
        assert_eq!(t.value(sn).get(0, 0), 0.0);
        let co = t.cos(z);
        assert_eq!(t.value(co).get(0, 0), 1.0);
    }

    #[test]
    fn every_primitive_passes_gradcheck_on_100_random_inputs() {
        let rng = StreamRng::new(0xAD, "tape.gradcheck");
        for trial in 0..100u64 {
            let base = trial * 1000;
            let x0 = rand_mat(&rng, base, 3, 4);
            // Each builder routes x through one primitive under test, then a
            // fixed reduction so the root is scalar.
            let w = rand_mat(&rng, base + 100, 2, 4);
            let other = rand_mat(&rng, base + 200, 3, 4);
            let col = rand_mat(&rng, base + 300, 3, 1);

            let cases: Vec<Box<dyn Fn(&mut Tape, NodeId) -> NodeId>> = vec![
                {
                    let w = w.clone();
                    Box::new(move |t: &mut Tape, x: NodeId| {
                        let wid = t.leaf(w.clone());
                        let y = t.matmul_nt(x, wid);
                        t.sum_all(y)
                    })
                },
                {
                    let other = other.clone();
                    Box::new(move |t, x| {
                        let o = t.leaf(other.clone());
                        let y = t.add(x, o);
                        t.sum_all(y)
                    })
                },
                {
                    let other = other.clone();
                    Box::new(move |t, x| {
                        let o = t.leaf(other.clone());
                        let y = t.sub(o, x);
                        t.sum_all(y)
                    })
                },
                {
                    let other = other.clone();
                    Box::new(move |t, x| {
                        let o = t.leaf(other.clone());
                        let y = t.mul(x, o);
                        t.sum_all(y)
                    })
                },
                Box::new(|t, x| {
                    let y = t.scale(x, -1.7);
                    t.sum_all(y)
                }),
                Box::new(|t, x| {
                    let y = t.add_const(x, 0.3);
                    let z = t.mul(y, y);
                    t.sum_all(z)
                }),
                Box::new(|t, x| {
                    let y = t.tanh(x);
                    t.sum_all(y)
                }),
                Box::new(|t, x| {
                    let y = t.silu(x);
                    t.sum_all(y)
                }),
                Box::new(|t, x| {
                    let y = t.sin(x);
                    t.sum_all(y)
                }),
                Box::new(|t, x| {
                    let y = t.cos(x);
                    t.sum_all(y)
                }),
                {
                    let other = other.clone();
                    Box::new(move |t, x| {
                        let o = t.leaf(other.clone());
                        let y = t.concat(&[x, o]);
                        let z = t.mul(y, y);
                        t.sum_all(z)
                    })
                },
                Box::new(|t, x| t.mean_all(x)),
                {
                    let other = other.clone();
                    Box::new(move |t, x| {
                        let o = t.leaf(other.clone());
                        t.sq_diff_sum(x, o)
                    })
                },
            ];
            for (i, case) in cases.iter().enumerate() {
                let mut t = Tape::new();
                let xid = t.leaf(x0.clone());
                let loss = case(&mut t, xid);
                let grads = t.gradients(loss);
                let got = grads.get_or_zeros(xid, 3, 4);
                let want = fd_grad(
                    |flat| {
                        let mut t = Tape::new();
                        let x = t.leaf(Mat::from_vec(3, 4, flat.to_vec()));
                        let loss = case(&mut t, x);
                        t.value(loss).get(0, 0)
                    },
                    x0.as_slice(),
                    1e-5,
                );
                let err = rel_err(got.as_slice(), &want);
                assert!(err < 1e-6, "primitive case {i}, trial {trial}: rel err {err}");
            }

            // add_row / broadcast_col differentiate the narrow operand.
            gradcheck(
                |t, x| {
                    let wide = t.leaf(Mat::zeros(3, 4));
                    // x is 3x4 here; reduce to a 1x4 row by summing a slice off
                    // a fresh leaf instead — keep it simple: use x as the wide
                    // side and a constant row.
                    let row = t.leaf(Mat::from_vec(1, 4, vec![0.1, -0.2, 0.3, 0.4]));
                    let y = t.add_row(x, row);
                    let z = t.mul(y, y);
                    let keep = t.add(z, wide);
                    t.sum_all(keep)
                },
                &x0,
                1e-6,
            );
            gradcheck(
                |t, c| {
                    let y = t.broadcast_col(c, 5);
                    let z = t.mul(y, y);
                    t.sum_all(z)
                },
                &col,
                1e-6,
            );
            // Row-operand gradient of add_row.
            let row0 = rand_mat(&rng, base + 400, 1, 4);
            gradcheck(
                |t, row| {
                    let base_m = t.leaf(Mat::from_vec(3, 4, vec![0.25; 12]));
                    let y = t.add_row(base_m, row);
                    let z = t.mul(y, y);
                    t.sum_all(z)
                },
                &row0,
                1e-6,
            );
            // Weight-operand gradient of matmul.
            let x_fixed = x0.clone();
            gradcheck(
                move |t, w| {
                    let x = t.leaf(x_fixed.clone());
                    let y = t.matmul_nt(x, w);
                    let z = t.mul(y, y);
                    t.sum_all(z)
                },
                &w,
                1e-6,
            );
        }
    }

    #[test]
    fn tangent_matches_fd_on_a_composed_graph() {
        // f(s) = sum(silu(x·wᵀ + b·sin(2s))) with s scalar; tangent vs FD.
        let rng = StreamRng::new(0xF0, "tape.tangent");
        for trial in 0..20u64 {
            let base = trial * 100;
            let x0 = rand_mat(&rng, base, 2, 3);
            let w0 = rand_mat(&rng, base + 40, 4, 3);
            let b0 = rand_mat(&rng, base + 80, 1, 4);
            let s0 = 0.2 + 0.6 * rng.uniform_at(base + 90);

            let eval = |s: f64, with_tangent: bool| -> (f64, Option<f64>) {
                let mut t = Tape::new();
                let x = t.leaf(x0.clone());
                let w = t.leaf(w0.clone());
                let b = t.leaf(b0.clone());
                let s_node = t.leaf(Mat::scalar(s));
                if with_tangent {
                    t.seed_tangent(s_node);
                }
                let two_s = t.scale(s_node, 2.0);
                let sin_s = t.sin(two_s);
                // sin(2s) broadcast across the 1x4 bias row, then the bias is
                // modulated by it so s reaches the loss through two routes.
                let sin_b = t.broadcast_col(sin_s, 4);
                let scaled_b = t.mul(b, sin_b);
                let prod = t.matmul_nt(x, w);
                let biased = t.add_row(prod, scaled_b);
                let act = t.silu(biased);
                let out = t.sum_all(act);
                let tan = t.tangent(out).map(|id| t.value(id).get(0, 0));
                (t.value(out).get(0, 0), tan)
            };

            let (_, tan) = eval(s0, true);
            let want = crate::fd::fd_derivative(|s| vec![eval(s, false).0], s0, 1e-5);
            let got = tan.expect("tangent should reach the root");
            assert!(
                (got - want[0]).abs() / want[0].abs().max(1.0) < 1e-5,
                "trial {trial}: tangent {got} vs fd {}",
                want[0]
            );
        }
    }

    #[test]
    fn gradient_through_a_tangent_matches_fd() {
        // Second-order check: loss = sum((d/ds f)^2) where f depends on w and
        // s; reverse mode through the tangent vs. FD over w.
        let rng = StreamRng::new(0xF1, "tape.fwd_over_rev");
        let x0 = rand_mat(&rng, 0, 2, 3);
        let w0 = rand_mat(&rng, 10, 2, 3);
        let s0 = 0.4;

        // s enters as a 2x1 column (one copy per row); seeding gives d/ds of
        // the shared value. loss = (d/ds sum silu(w ∘ s·x))^2.
        let loss_of = |w_flat: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let w = t.leaf(Mat::from_vec(2, 3, w_flat.to_vec()));
            let s = t.leaf(Mat::from_vec(2, 1, vec![s0; 2]));
            t.seed_tangent(s);
            let s_b = t.broadcast_col(s, 3);
            let sx = t.mul(s_b, x);
            let prod = t.mul(w, sx);
            let act = t.silu(prod);
            let y = t.sum_all(act);
            let dy = t.tangent(y).expect("tangent must flow");
            let z = t.mul(dy, dy);
            t.value(z).get(0, 0)
        };

        let grad_rev = {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let w = t.leaf(w0.clone());
            let s = t.leaf(Mat::from_vec(2, 1, vec![s0; 2]));
            t.seed_tangent(s);
            let s_b = t.broadcast_col(s, 3);
            let sx = t.mul(s_b, x);
            let prod = t.mul(w, sx);
            let act = t.silu(prod);
            let y = t.sum_all(act);
            let dy = t.tangent(y).expect("tangent must flow");
            let z = t.mul(dy, dy);
            let g = t.gradients(z);
            g.get_or_zeros(w, 2, 3)
        };
        let grad_fd = fd_grad(loss_of, w0.as_slice(), 1e-5);
        let err = rel_err(grad_rev.as_slice(), &grad_fd);
        assert!(err < 1e-6, "forward-over-reverse rel err {err}");
    }

    #[test]
    fn gradients_are_linear_and_deterministic() {
        let rng = StreamRng::new(0xF2, "tape.linear");
        let x0 = rand_mat(&rng, 0, 3, 3);
        let build = |t: &mut Tape, x: NodeId, alpha: f64| {
            let y = t.tanh(x);
            let z = t.mul(y, y);
            let s = t.sum_all(z);
            t.scale(s, alpha)
        };
        let run = |alpha: f64| -> Mat {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let loss = build(&mut t, x, alpha);
            t.gradients(loss).get_or_zeros(x, 3, 3)
        };
        let g1 = run(1.0);
        let g3a = run(3.0);
        let mut g3b = g1.clone();
        g3b.scale_in_place(3.0);
        for (a, b) in g3a.iter().zip(g3b.iter()) {
            assert!((a - b).abs() < 1e-12, "linearity violated: {a} vs {b}");
        }
        // Bitwise determinism across identical builds.
        assert_eq!(run(1.0), run(1.0));
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut t = Tape::new();
        let used = t.leaf(Mat::scalar(2.0));
        let unused = t.leaf(Mat::from_vec(2, 2, vec![1.0; 4]));
        let loss = t.mul(used, used);
        let g = t.gradients(loss);
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused, 2, 2).as_slice(), &[0.0; 4]);
        assert_eq!(g.get_or_zeros(used, 1, 1).get(0, 0), 4.0);
    }

    #[test]
    #[should_panic(expected = "must be a scalar")]
    fn non_scalar_gradient_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::zeros(2, 2));
        t.gradients(x);
    }

    #[test]
    #[should_panic(expected = "must be a leaf")]
    fn tangent_seed_on_interior_node_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::scalar(1.0));
        let y = t.scale(x, 2.0);
        t.seed_tangent(y);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn elementwise_shape_mismatch_is_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::zeros(2, 2));
        let b = t.leaf(Mat::zeros(2, 3));
        t.add(a, b);
    }
}
