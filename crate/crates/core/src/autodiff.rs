//! Reverse-mode automatic differentiation over expression tapes.
//!
//! A [`Tape`] records primitive operations eagerly (define-by-run) into a flat
//! arena; [`Tape::backward`] then accumulates adjoints in reverse order. Nodes
//! are vector-valued with scalars as length-1 vectors, so a dense layer is a
//! single `matvec` node while the 6DOF dynamics can be written scalar by
//! scalar through the [`Real`] trait, which the plain `f64` also implements.
//! That lets the rigid-body equations and the RK4 step exist once, generically,
//! and run either as ordinary arithmetic or as a differentiable tape program.
//!
//! Tapes are rebuilt per training step and are single-threaded; distinct tapes
//! may run on distinct threads.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, thiserror::Error)]
pub enum AdError {
    #[error("non-finite intermediate value at tape node {node}")]
    NonFinite { node: usize },
}

#[derive(Clone, Copy)]
struct Span {
    off: u32,
    len: u32,
}

#[derive(Clone, Copy)]
enum Node {
    Input,
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    /// Multiply by a plain constant.
    Scale(u32, f64),
    /// Add a plain constant to every component.
    Shift(u32, f64),
    Sin(u32),
    Cos(u32),
    Tan(u32),
    Tanh(u32),
    Sigmoid(u32),
    Exp(u32),
    Sqrt(u32),
    /// Clamp into `[lo, hi]`; differentiated as identity strictly inside the
    /// interval and zero outside (zero at the boundaries).
    Clamp(u32, f64, f64),
    /// Shift by a multiple of 2*pi chosen from the forward value; identity
    /// derivative.
    WrapAngle(u32),
    Dot(u32, u32),
    /// Row-major `w` of shape rows x cols applied to `x` of length cols.
    MatVec {
        w: u32,
        x: u32,
        rows: u32,
        cols: u32,
    },
    /// Concatenation of `argc` operands stored in the tape's side table at
    /// `args_off`.
    Concat {
        args_off: u32,
        argc: u32,
    },
    Slice {
        a: u32,
        start: u32,
    },
    Sum(u32),
}

struct TapeInner {
    nodes: Vec<Node>,
    spans: Vec<Span>,
    vals: Vec<f64>,
    cat_args: Vec<u32>,
}

/// Recording tape. Create one per differentiated evaluation.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to a (vector-valued) tape node. Copyable; only valid with the tape
/// that created it.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable logistic function, shared by the plain and tape paths
/// so both produce identical bits.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                spans: Vec::new(),
                vals: Vec::new(),
                cat_args: Vec::new(),
            }),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, node: Node, len: usize) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let off = inner.vals.len();
        inner.vals.resize(off + len, 0.0);
        // Split so the fresh value slice and the finished prefix can be used
        // together while evaluating the new node.
        let inner = &mut *inner;
        let (done, fresh) = inner.vals.split_at_mut(off);
        eval_node(&inner.spans, done, fresh, node, &inner.cat_args);
        inner.nodes.push(node);
        inner.spans.push(Span {
            off: off as u32,
            len: len as u32,
        });
        Var {
            tape: self,
            idx: (inner.nodes.len() - 1) as u32,
        }
    }

    fn span(&self, v: Var) -> Span {
        self.inner.borrow().spans[v.idx as usize]
    }

    /// Length of the vector held at `v`.
    pub fn len_of(&self, v: Var) -> usize {
        self.span(v).len as usize
    }

    /// Copies the current value of `v` out of the arena.
    pub fn value(&self, v: Var) -> Vec<f64> {
        let inner = self.inner.borrow();
        let s = inner.spans[v.idx as usize];
        inner.vals[s.off as usize..(s.off + s.len) as usize].to_vec()
    }

    /// Value of a length-1 node.
    pub fn value_scalar(&self, v: Var) -> f64 {
        let inner = self.inner.borrow();
        let s = inner.spans[v.idx as usize];
        assert_eq!(s.len, 1, "value_scalar on a non-scalar node");
        inner.vals[s.off as usize]
    }

    /// New leaf variable holding a copy of `v`. Gradients can be queried for
    /// leaves after [`Tape::backward`].
    pub fn input(&self, v: &[f64]) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let off = inner.vals.len();
        inner.vals.extend_from_slice(v);
        inner.nodes.push(Node::Input);
        inner.spans.push(Span {
            off: off as u32,
            len: v.len() as u32,
        });
        Var {
            tape: self,
            idx: (inner.nodes.len() - 1) as u32,
        }
    }

    pub fn input_scalar(&self, v: f64) -> Var<'_> {
        self.input(&[v])
    }

    /// Constant leaf; no gradient is accumulated for it.
    pub fn constant(&self, v: &[f64]) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let off = inner.vals.len();
        inner.vals.extend_from_slice(v);
        inner.nodes.push(Node::Const);
        inner.spans.push(Span {
            off: off as u32,
            len: v.len() as u32,
        });
        Var {
            tape: self,
            idx: (inner.nodes.len() - 1) as u32,
        }
    }

    pub fn constant_scalar(&self, v: f64) -> Var<'_> {
        self.constant(&[v])
    }

    fn binary_elementwise(&self, node: Node, a: Var, b: Var) -> Var<'_> {
        let (sa, sb) = (self.span(a), self.span(b));
        assert_eq!(sa.len, sb.len, "elementwise op on mismatched lengths");
        self.push(node, sa.len as usize)
    }

    pub fn add(&self, a: Var, b: Var) -> Var<'_> {
        self.binary_elementwise(Node::Add(a.idx, b.idx), a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var<'_> {
        self.binary_elementwise(Node::Sub(a.idx, b.idx), a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var<'_> {
        self.binary_elementwise(Node::Mul(a.idx, b.idx), a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Var<'_> {
        self.binary_elementwise(Node::Div(a.idx, b.idx), a, b)
    }

    pub fn neg(&self, a: Var) -> Var<'_> {
        let len = self.len_of(a);
        self.push(Node::Neg(a.idx), len)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var<'_> {
        let len = self.len_of(a);
        self.push(Node::Scale(a.idx, c), len)
    }

    pub fn shift(&self, a: Var, c: f64) -> Var<'_> {
        let len = self.len_of(a);
        self.push(Node::Shift(a.idx, c), len)
    }

    pub fn sin(&self, a: Var) -> Var<'_> {
        let len = self.len_of(a);
        self.push(Node::Sin(a.idx), len)
    }

    pub fn cos(&self, a: Var) -> Var<'_> {
        let len = self.len_of(a);
        self.push(Node::Cos(a.idx), len)
    }

    pub fn tan(&self, a: Var) -> Var<'_> {
        let len = self.len_of(a);
        self.push(Node::Tan(a.idx), len)
    }

    pub fn tanh(&self, a: Var) -> Var<'_> {
        let len = self.len_of(a);
        self.push(Node::Tanh(a.idx), len)
    }

    pub fn sigmoid(&self, a: Var) -> Var<'_> {
        let len = self.len_of(a);
        self.push(Node::Sigmoid(a.idx), len)
    }

    pub fn exp(&self, a: Var) -> Var<'_> {
        let len = self.len_of(a);
        self.push(Node::Exp(a.idx), len)
    }

    pub fn sqrt(&self, a: Var) -> Var<'_> {
        let len = self.len_of(a);
        self.push(Node::Sqrt(a.idx), len)
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var<'_> {
        let len = self.len_of(a);
        self.push(Node::Clamp(a.idx, lo, hi), len)
    }

    pub fn wrap_angle(&self, a: Var) -> Var<'_> {
        let len = self.len_of(a);
        self.push(Node::WrapAngle(a.idx), len)
    }

    pub fn dot(&self, a: Var, b: Var) -> Var<'_> {
        let (sa, sb) = (self.span(a), self.span(b));
        assert_eq!(sa.len, sb.len, "dot on mismatched lengths");
        self.push(Node::Dot(a.idx, b.idx), 1)
    }

    pub fn sum(&self, a: Var) -> Var<'_> {
        self.push(Node::Sum(a.idx), 1)
    }

    /// `w` holds a row-major `rows x cols` matrix; returns `w * x`.
    pub fn matvec(&self, w: Var, x: Var, rows: usize, cols: usize) -> Var<'_> {
        let (sw, sx) = (self.span(w), self.span(x));
        assert_eq!(sw.len as usize, rows * cols, "matvec weight length");
        assert_eq!(sx.len as usize, cols, "matvec input length");
        self.push(Node::MatVec {
                w: w.idx,
                x: x.idx,
                rows: rows as u32,
                cols: cols as u32,
            }, rows)
    }

    pub fn concat(&self, parts: &[Var]) -> Var<'_> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let total: usize = parts.iter().map(|p| self.len_of(*p)).sum();
        let args_off = {
            let mut inner = self.inner.borrow_mut();
            let off = inner.cat_args.len() as u32;
            for p in parts {
                let idx = p.idx;
                inner.cat_args.push(idx);
            }
            off
        };
        self.push(Node::Concat {
                args_off,
                argc: parts.len() as u32,
            }, total)
    }

    pub fn slice(&self, a: Var, start: usize, len: usize) -> Var<'_> {
        let sa = self.span(a);
        assert!(start + len <= sa.len as usize, "slice out of range");
        self.push(Node::Slice {
                a: a.idx,
                start: start as u32,
            }, len)
    }

    pub fn index(&self, a: Var, i: usize) -> Var<'_> {
        self.slice(a, i, 1)
    }

    /// Reverse pass from a scalar output node. Fails if any value recorded on
    /// the tape is non-finite, reporting the first offending node.
    pub fn backward(&self, out: Var) -> Result<Gradients, AdError> {
        let inner = self.inner.borrow();
        let out_span = inner.spans[out.idx as usize];
        assert_eq!(out_span.len, 1, "backward requires a scalar output");
        if let Some(node) = inner.vals.iter().position(|v| !v.is_finite()) {
            // Map the offending value offset back to its node index.
            let bad = inner
                .spans
                .iter()
                .position(|s| (s.off as usize) <= node && node < (s.off + s.len) as usize)
                .unwrap_or(0);
            return Err(AdError::NonFinite { node: bad });
        }
        let mut adj = vec![0.0; inner.vals.len()];
        adj[out_span.off as usize] = 1.0;
        for i in (0..inner.nodes.len()).rev() {
            let span = inner.spans[i];
            let off = span.off as usize;
            let len = span.len as usize;
            let (lo, hi) = adj.split_at_mut(off);
            let g = &hi[..len];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let vals = &inner.vals;
            let spans = &inner.spans;
            let v_of = |idx: u32| {
                let s = spans[idx as usize];
                &vals[s.off as usize..(s.off + s.len) as usize]
            };
            let node_val = &vals[off..off + len];
            match inner.nodes[i] {
                Node::Input | Node::Const => {}
                Node::Add(a, b) => {
                    let (sa, sb) = (spans[a as usize], spans[b as usize]);
                    for k in 0..len {
                        lo[sa.off as usize + k] += g[k];
                        lo[sb.off as usize + k] += g[k];
                    }
                }
                Node::Sub(a, b) => {
                    let (sa, sb) = (spans[a as usize], spans[b as usize]);
                    for k in 0..len {
                        lo[sa.off as usize + k] += g[k];
                        lo[sb.off as usize + k] -= g[k];
                    }
                }
                Node::Mul(a, b) => {
                    let (sa, sb) = (spans[a as usize], spans[b as usize]);
                    let (va, vb) = (v_of(a), v_of(b));
                    for k in 0..len {
                        lo[sa.off as usize + k] += g[k] * vb[k];
                        lo[sb.off as usize + k] += g[k] * va[k];
                    }
                }
                Node::Div(a, b) => {
                    let (sa, sb) = (spans[a as usize], spans[b as usize]);
                    let (va, vb) = (v_of(a), v_of(b));
                    for k in 0..len {
                        lo[sa.off as usize + k] += g[k] / vb[k];
                        lo[sb.off as usize + k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                }
                Node::Neg(a) => {
                    let sa = spans[a as usize];
                    for k in 0..len {
                        lo[sa.off as usize + k] -= g[k];
                    }
                }
                Node::Scale(a, c) => {
                    let sa = spans[a as usize];
                    for k in 0..len {
                        lo[sa.off as usize + k] += g[k] * c;
                    }
                }
                Node::Shift(a, _) | Node::WrapAngle(a) => {
                    let sa = spans[a as usize];
                    for k in 0..len {
                        lo[sa.off as usize + k] += g[k];
                    }
                }
                Node::Sin(a) => {
                    let sa = spans[a as usize];
                    let va = v_of(a);
                    for k in 0..len {
                        lo[sa.off as usize + k] += g[k] * va[k].cos();
                    }
                }
                Node::Cos(a) => {
                    let sa = spans[a as usize];
                    let va = v_of(a);
                    for k in 0..len {
                        lo[sa.off as usize + k] -= g[k] * va[k].sin();
                    }
                }
                Node::Tan(a) => {
                    let sa = spans[a as usize];
                    let va = v_of(a);
                    for k in 0..len {
                        let c = va[k].cos();
                        lo[sa.off as usize + k] += g[k] / (c * c);
                    }
                }
                Node::Tanh(a) => {
                    let sa = spans[a as usize];
                    for k in 0..len {
                        let t = node_val[k];
                        lo[sa.off as usize + k] += g[k] * (1.0 - t * t);
                    }
                }
                Node::Sigmoid(a) => {
                    let sa = spans[a as usize];
                    for k in 0..len {
                        let s = node_val[k];
                        lo[sa.off as usize + k] += g[k] * s * (1.0 - s);
                    }
                }
                Node::Exp(a) => {
                    let sa = spans[a as usize];
                    for k in 0..len {
                        lo[sa.off as usize + k] += g[k] * node_val[k];
                    }
                }
                Node::Sqrt(a) => {
                    let sa = spans[a as usize];
                    for k in 0..len {
                        lo[sa.off as usize + k] += g[k] / (2.0 * node_val[k]);
                    }
                }
                Node::Clamp(a, lo_c, hi_c) => {
                    let sa = spans[a as usize];
                    let va = v_of(a);
                    for k in 0..len {
                        if va[k] > lo_c && va[k] < hi_c {
                            lo[sa.off as usize + k] += g[k];
                        }
                    }
                }
                Node::Dot(a, b) => {
                    let (sa, sb) = (spans[a as usize], spans[b as usize]);
                    let (va, vb) = (v_of(a), v_of(b));
                    let gs = g[0];
                    for k in 0..va.len() {
                        lo[sa.off as usize + k] += gs * vb[k];
                        lo[sb.off as usize + k] += gs * va[k];
                    }
                }
                Node::Sum(a) => {
                    let sa = spans[a as usize];
                    let gs = g[0];
                    for k in 0..sa.len as usize {
                        lo[sa.off as usize + k] += gs;
                    }
                }
                Node::MatVec { w, x, rows, cols } => {
                    let (sw, sx) = (spans[w as usize], spans[x as usize]);
                    let (vw, vx) = (v_of(w), v_of(x));
                    let (rows, cols) = (rows as usize, cols as usize);
                    for r in 0..rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &vw[r * cols..(r + 1) * cols];
                        let w_adj = sw.off as usize + r * cols;
                        for c in 0..cols {
                            lo[w_adj + c] += gr * vx[c];
                            lo[sx.off as usize + c] += gr * row[c];
                        }
                    }
                }
                Node::Concat { args_off, argc } => {
                    let mut cursor = 0;
                    for j in 0..argc {
                        let arg = inner.cat_args[(args_off + j) as usize];
                        let sa = spans[arg as usize];
                        for k in 0..sa.len as usize {
                            lo[sa.off as usize + k] += g[cursor + k];
                        }
                        cursor += sa.len as usize;
                    }
                }
                Node::Slice { a, start } => {
                    let sa = spans[a as usize];
                    for k in 0..len {
                        lo[sa.off as usize + start as usize + k] += g[k];
                    }
                }
            }
        }
        Ok(Gradients {
            adj,
            spans: inner.spans.clone(),
        })
    }
}

// Forward evaluation of a freshly pushed node. Lives outside the Tape impl so
// the arena split borrows stay simple.
fn eval_node(spans: &[Span], done: &[f64], out: &mut [f64], node: Node, cat_args: &[u32]) {
    let v_of = |idx: u32| {
        let s = spans[idx as usize];
        &done[s.off as usize..(s.off + s.len) as usize]
    };
    match node {
        Node::Input | Node::Const => {}
        Node::Add(a, b) => {
            let (va, vb) = (v_of(a), v_of(b));
            for k in 0..out.len() {
                out[k] = va[k] + vb[k];
            }
        }
        Node::Sub(a, b) => {
            let (va, vb) = (v_of(a), v_of(b));
            for k in 0..out.len() {
                out[k] = va[k] - vb[k];
            }
        }
        Node::Mul(a, b) => {
            let (va, vb) = (v_of(a), v_of(b));
            for k in 0..out.len() {
                out[k] = va[k] * vb[k];
            }
        }
        Node::Div(a, b) => {
            let (va, vb) = (v_of(a), v_of(b));
            for k in 0..out.len() {
                out[k] = va[k] / vb[k];
            }
        }
        Node::Neg(a) => {
            let va = v_of(a);
            for k in 0..out.len() {
                out[k] = -va[k];
            }
        }
        Node::Scale(a, c) => {
            let va = v_of(a);
            for k in 0..out.len() {
                out[k] = va[k] * c;
            }
        }
        Node::Shift(a, c) => {
            let va = v_of(a);
            for k in 0..out.len() {
                out[k] = va[k] + c;
            }
        }
        Node::Sin(a) => {
            let va = v_of(a);
            for k in 0..out.len() {
                out[k] = va[k].sin();
            }
        }
        Node::Cos(a) => {
            let va = v_of(a);
            for k in 0..out.len() {
                out[k] = va[k].cos();
            }
        }
        Node::Tan(a) => {
            let va = v_of(a);
            for k in 0..out.len() {
                out[k] = va[k].tan();
            }
        }
        Node::Tanh(a) => {
            let va = v_of(a);
            for k in 0..out.len() {
                out[k] = va[k].tanh();
            }
        }
        Node::Sigmoid(a) => {
            let va = v_of(a);
            for k in 0..out.len() {
                out[k] = stable_sigmoid(va[k]);
            }
        }
        Node::Exp(a) => {
            let va = v_of(a);
            for k in 0..out.len() {
                out[k] = va[k].exp();
            }
        }
        Node::Sqrt(a) => {
            let va = v_of(a);
            for k in 0..out.len() {
                out[k] = va[k].sqrt();
            }
        }
        Node::Clamp(a, lo, hi) => {
            let va = v_of(a);
            for k in 0..out.len() {
                out[k] = va[k].clamp(lo, hi);
            }
        }
        Node::WrapAngle(a) => {
            let va = v_of(a);
            for k in 0..out.len() {
                out[k] = crate::types::wrap_finite(va[k]);
            }
        }
        Node::Dot(a, b) => {
            let (va, vb) = (v_of(a), v_of(b));
            out[0] = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        }
        Node::Sum(a) => {
            out[0] = v_of(a).iter().sum();
        }
        Node::MatVec { w, x, rows, cols } => {
            let (vw, vx) = (v_of(w), v_of(x));
            let cols = cols as usize;
            for r in 0..rows as usize {
                let row = &vw[r * cols..(r + 1) * cols];
                out[r] = row.iter().zip(vx).map(|(a, b)| a * b).sum();
            }
        }
        Node::Concat { args_off, argc } => {
            let mut cursor = 0;
            for j in 0..argc {
                let arg = cat_args[(args_off + j) as usize];
                let va = v_of(arg);
                out[cursor..cursor + va.len()].copy_from_slice(va);
                cursor += va.len();
            }
        }
        Node::Slice { a, start } => {
            let va = v_of(a);
            out.copy_from_slice(&va[start as usize..start as usize + out.len()]);
        }
    }
}

/// Adjoints produced by one backward pass.
pub struct Gradients {
    adj: Vec<f64>,
    spans: Vec<Span>,
}

impl Gradients {
    /// Gradient of the backward output with respect to node `v`.
    pub fn wrt(&self, v: Var) -> &[f64] {
        let s = self.spans[v.idx as usize];
        &self.adj[s.off as usize..(s.off + s.len) as usize]
    }

    pub fn wrt_scalar(&self, v: Var) -> f64 {
        let s = self.spans[v.idx as usize];
        assert_eq!(s.len, 1);
        self.adj[s.off as usize]
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn len(&self) -> usize {
        self.tape.len_of(*self)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self::Output {
        self.tape.add(self, rhs)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.tape.sub(self, rhs)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.tape.mul(self, rhs)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self::Output {
        self.tape.div(self, rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self::Output {
        self.tape.neg(self)
    }
}

/// Scalar algebra shared by plain `f64` and length-1 tape variables, so code
/// like the 6DOF derivative and the RK4 step is written once and used both for
/// simulation and for differentiation.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// A constant in the same evaluation context as `self`.
    fn konst(self, v: f64) -> Self;
    /// Current numeric value, used for runtime guards, never differentiated.
    fn value(self) -> f64;
    fn scale(self, c: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn clamp_to(self, lo: f64, hi: f64) -> Self;
    fn wrap_angle(self) -> Self;
}

impl Real for f64 {
    fn konst(self, v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tan(self) -> Self {
        f64::tan(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        stable_sigmoid(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        self.clamp(lo, hi)
    }
    fn wrap_angle(self) -> Self {
        crate::types::wrap_finite(self)
    }
}

impl<'t> Real for Var<'t> {
    fn konst(self, v: f64) -> Self {
        self.tape.constant_scalar(v)
    }
    fn value(self) -> f64 {
        self.tape.value_scalar(self)
    }
    fn scale(self, c: f64) -> Self {
        self.tape.scale(self, c)
    }
    fn sin(self) -> Self {
        self.tape.sin(self)
    }
    fn cos(self) -> Self {
        self.tape.cos(self)
    }
    fn tan(self) -> Self {
        self.tape.tan(self)
    }
    fn tanh(self) -> Self {
        self.tape.tanh(self)
    }
    fn sigmoid(self) -> Self {
        self.tape.sigmoid(self)
    }
    fn exp(self) -> Self {
        self.tape.exp(self)
    }
    fn sqrt(self) -> Self {
        self.tape.sqrt(self)
    }
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        self.tape.clamp(self, lo, hi)
    }
    fn wrap_angle(self) -> Self {
        self.tape.wrap_angle(self)
    }
}

/// Scalar inputs of a differentiated function, bundled with the tape that
/// recorded them. Passing one struct keeps the callback signature to a single
/// lifetime position, which closure inference handles.
#[derive(Clone, Copy)]
pub struct Inputs<'t> {
    tape: &'t Tape,
    vars: &'t [Var<'t>],
}

impl<'t> Inputs<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// The `i`-th scalar input variable.
    pub fn v(&self, i: usize) -> Var<'t> {
        self.vars[i]
    }

    pub fn all(&self) -> &'t [Var<'t>] {
        self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Identity helper that pins a closure to the higher-ranked signature used by
/// [`grad`] and [`check_gradient`], so closures stored in a variable first
/// still unify with the `for<'t>` bound.
pub fn func<F>(f: F) -> F
where
    F: for<'t> Fn(Inputs<'t>) -> Var<'t>,
{
    f
}

/// Evaluates `f` at `x` (scalar inputs) and returns the value together with
/// the gradient with respect to every input.
pub fn grad<F>(f: F, x: &[f64]) -> Result<(f64, Vec<f64>), AdError>
where
    F: for<'t> Fn(Inputs<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = x.iter().map(|&v| tape.input_scalar(v)).collect();
    let out = f(Inputs {
        tape: &tape,
        vars: &vars,
    });
    let value = tape.value_scalar(out);
    let grads = tape.backward(out)?;
    let g = vars.iter().map(|v| grads.wrt_scalar(*v)).collect();
    Ok((value, g))
}

/// Evaluates `f` at `x` without differentiating.
pub fn eval<F>(f: &F, x: &[f64]) -> f64
where
    F: for<'t> Fn(Inputs<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = x.iter().map(|&v| tape.input_scalar(v)).collect();
    let out = f(Inputs {
        tape: &tape,
        vars: &vars,
    });
    tape.value_scalar(out)
}

/// Compares the analytic gradient against central finite differences with
/// step `h` and returns the worst relative error
/// `|analytic - numeric| / max(1, |numeric|)` over all inputs.
pub fn check_gradient<F>(f: F, x: &[f64], h: f64) -> Result<f64, AdError>
where
    F: for<'t> Fn(Inputs<'t>) -> Var<'t>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let (_, analytic) = grad(&f, x)?;
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = eval(&f, &xp);
        xp[i] = x[i] - h;
        let fm = eval(&f, &xp);
        xp[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Central-difference gradient of an arbitrary plain function; the
/// finite-difference side of gradient checks that do not go through a tape.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn grad_of_square() {
        let (v, g) = grad(|c| c.v(0) * c.v(0), &[3.0]).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn grad_of_sin_times_y() {
        let (v, g) = grad(|c| c.v(0).sin() * c.v(1), &[0.0, 2.0]).unwrap();
        assert_eq!(v, 0.0);
        assert!((g[0] - 2.0).abs() < 1e-15);
        assert!((g[1] - 0.0).abs() < 1e-15);
    }

    /// One RK4 step of free fall (states: down-velocity and down-position)
    /// followed by squared down-velocity; the gradient with respect to the
    /// force input must match central finite differences.
    #[test]
    fn rk4_free_fall_gradient_matches_finite_differences() {
        let mass = 1.3;
        let dt = 0.05;
        let f = func(move |c| {
            let force = c.v(0);
            let v0 = c.v(1);
            let accel = force.scale(1.0 / mass);
            // derivative of (v, p) is (accel, v); accel is state-independent
            let k1v = accel;
            let k1p = v0;
            let k2v = accel;
            let k2p = v0 + k1v.scale(dt / 2.0);
            let k3v = accel;
            let k3p = v0 + k2v.scale(dt / 2.0);
            let k4v = accel;
            let k4p = v0 + k3v.scale(dt);
            let v1 = v0 + (k1v + k2v.scale(2.0) + k3v.scale(2.0) + k4v).scale(dt / 6.0);
            let _p1 = k1p + k2p + k3p + k4p;
            v1 * v1
        });
        let x = [9.81 * mass, 0.3];
        let err = check_gradient(f, &x, 1e-5).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn check_gradient_cube() {
        let err = check_gradient(|c| c.v(0) * c.v(0) * c.v(0), &[2.0], 1e-5).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn check_gradient_constant_function() {
        let err = check_gradient(|c| c.tape().constant_scalar(4.25), &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn check_gradient_tanh_mlp_eight_inputs() {
        // Fixed random single-hidden-layer tanh network; inputs are the
        // differentiated quantities, weights are tape constants.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let w1: Vec<f64> = (0..8 * 6).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let w2: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let f = func(move |c| {
            let t = c.tape();
            let xin = t.concat(c.all());
            let w1v = t.constant(&w1);
            let hidden = t.tanh(t.matvec(w1v, xin, 6, 8));
            let w2v = t.constant(&w2);
            t.dot(w2v, hidden)
        });
        let x: Vec<f64> = (0..8).map(|i| 0.1 * (i as f64) - 0.35).collect();
        let err = check_gradient(f, &x, 1e-5).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn gradient_is_linear_in_the_function() {
        fn fa<'t>(c: Inputs<'t>) -> Var<'t> {
            c.v(0) * c.v(1) + c.v(0).sin()
        }
        fn fb<'t>(c: Inputs<'t>) -> Var<'t> {
            c.v(1).exp() + c.v(0) * c.v(0)
        }
        let (a, b) = (2.5, -1.25);
        let x = [0.7, 0.3];
        let (_, ga) = grad(fa, &x).unwrap();
        let (_, gb) = grad(fb, &x).unwrap();
        let (_, gc) = grad(move |c| fa(c).scale(a) + fb(c).scale(b), &x).unwrap();
        for i in 0..2 {
            let want = a * ga[i] + b * gb[i];
            let rel = (gc[i] - want).abs() / want.abs().max(1e-30);
            assert!(rel < 1e-12, "component {i}: {} vs {}", gc[i], want);
        }
    }

    #[test]
    fn gradients_are_deterministic() {
        let f = func(|c| (c.v(0) * c.v(1)).tanh() + c.v(2).sqrt() * c.v(0));
        let x = [0.8, -0.4, 2.0];
        let (v1, g1) = grad(&f, &x).unwrap();
        let (v2, g2) = grad(&f, &x).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn non_finite_intermediate_reports_node() {
        let res = grad(|c| c.v(0).sqrt() * c.v(0), &[-1.0]);
        match res {
            Err(AdError::NonFinite { node }) => assert!(node > 0),
            other => panic!("expected NonFinite error, got {other:?}"),
        }
    }

    #[test]
    fn tape_forward_matches_plain_arithmetic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(0.1..2.0);
            let plain = ((a * b).sin() + stable_sigmoid(a / b)).tanh() * b.sqrt();
            let tape = Tape::new();
            let av = tape.input_scalar(a);
            let bv = tape.input_scalar(b);
            let out = ((av * bv).sin() + (av / bv).sigmoid()).tanh() * bv.sqrt();
            assert_eq!(tape.value_scalar(out).to_bits(), plain.to_bits());
        }
    }

    #[test]
    fn matvec_and_concat_gradients() {
        // f(x) = sum(W [x; x^2]) with W constant: checked against FD.
        let w: Vec<f64> = vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
        let wc = w.clone();
        let f = func(move |c| {
            let t = c.tape();
            let x2 = c.v(0) * c.v(0);
            let stacked = t.concat(&[c.v(0), c.v(1), x2]);
            let wv = t.constant(&wc);
            t.sum(t.matvec(wv, stacked, 2, 3))
        });
        let err = check_gradient(f, &[0.3, -0.8], 1e-6).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn clamp_gradient_is_zero_outside_interval() {
        let f = func(|c| c.v(0).clamp_to(-1.0, 1.0) * c.v(0).konst(3.0));
        let (_, g) = grad(&f, &[0.5]).unwrap();
        assert_eq!(g[0], 3.0);
        let (_, g) = grad(&f, &[2.0]).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn wrap_angle_node_has_identity_gradient() {
        let f = func(|c| c.v(0).wrap_angle() * c.v(0).wrap_angle());
        let (v, g) = grad(&f, &[3.0 * std::f64::consts::PI / 2.0]).unwrap();
        let w = -std::f64::consts::PI / 2.0;
        assert!((v - w * w).abs() < 1e-12);
        assert!((g[0] - 2.0 * w).abs() < 1e-12);
    }

    #[test]
    fn slice_and_dot_roundtrip() {
        let tape = Tape::new();
        let v = tape.input(&[1.0, 2.0, 3.0, 4.0]);
        let head = tape.slice(v, 0, 2);
        let tail = tape.slice(v, 2, 2);
        let out = tape.dot(head, tail);
        assert_eq!(tape.value_scalar(out), 1.0 * 3.0 + 2.0 * 4.0);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(v), &[3.0, 4.0, 1.0, 2.0]);
    }
}
