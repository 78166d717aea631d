//! Scalar reverse-mode computation graph.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its consumer's index and the graph is topologically sorted by
//! construction: one reverse sweep propagates adjoints. Forward values and
//! local partial derivatives are cached when a node is pushed, so the sweep
//! never re-dispatches on the operation (except for `Dot`, which walks its
//! operand ranges).
//!
//! Storage is two arrays: packed per-node records (parents, op, cached
//! partials) and a separate value array that `Dot` can read as contiguous
//! slices. `Dot` computes an inner product of two contiguous node ranges in
//! a single node; the network's affine layers are built from it, which keeps
//! tape length (and backward cost) proportional to the number of neurons
//! rather than the number of weights. Node 0 is a reserved zero constant
//! that absorbs adjoint traffic from unused parent slots, keeping the scalar
//! backward path branch-free.

use crate::real::Real;
use crate::{Error, Result};

/// Operation kinds. `Leaf` marks differentiation roots (parameters),
/// `Constant` is data the sweep ignores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Square,
    Scale,
    Tanh,
    Sin,
    Cos,
    Exp,
    Fma,
    Copy,
    Dot,
    /// tanh(a*b) in one node.
    TanhMul,
    /// sin(a*b) in one node.
    SinMul,
    /// cos(a*b) in one node.
    CosMul,
    /// a*(b*c) in one node.
    Mul3,
    /// a*(b*b) in one node.
    MulSq,
}

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) u32);

impl Var {
    #[inline(always)]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Per-node record: parent indices, op tag, and the two cached local
/// partials, packed together so the backward sweep touches one record plus
/// the adjoint buffer per node. Values live in their own array because `Dot`
/// reads them as contiguous slices.
#[derive(Clone, Copy)]
struct Node<F> {
    a: u32,
    b: u32,
    c: u32,
    op: OpKind,
    p: [F; 2],
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    values: Vec<F>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        let mut g = Graph { nodes: Vec::new(), values: Vec::new() };
        // Reserved adjoint sink; see module docs.
        g.push(OpKind::Constant, 0, 0, 0, [F::zero(); 2], F::zero());
        g
    }

    pub fn with_capacity(nodes: usize) -> Self {
        let mut g =
            Graph { nodes: Vec::with_capacity(nodes), values: Vec::with_capacity(nodes) };
        g.push(OpKind::Constant, 0, 0, 0, [F::zero(); 2], F::zero());
        g
    }

    #[inline(always)]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        // Node 0 is always present.
        self.values.len() <= 1
    }

    #[inline(always)]
    pub fn value(&self, v: Var) -> F {
        self.values[v.index()]
    }

    pub fn op(&self, v: Var) -> OpKind {
        self.nodes[v.index()].op
    }

    /// Drops every node at or above `watermark`, reclaiming tape space
    /// without releasing capacity. Handles to dropped nodes become invalid.
    pub fn truncate(&mut self, watermark: usize) {
        self.nodes.truncate(watermark);
        self.values.truncate(watermark);
    }

    #[inline(always)]
    fn push(&mut self, op: OpKind, a: u32, b: u32, c: u32, p: [F; 2], value: F) -> Var {
        let id = self.values.len() as u32;
        self.nodes.push(Node { a, b, c, op, p });
        self.values.push(value);
        Var(id)
    }

    /// Differentiation root. `backward` seeds gradients into leaves.
    #[inline(always)]
    pub fn leaf(&mut self, value: F) -> Var {
        self.push(OpKind::Leaf, 0, 0, 0, [F::zero(); 2], value)
    }

    /// Data the sweep treats as independent of all leaves.
    #[inline(always)]
    pub fn constant(&mut self, value: F) -> Var {
        self.push(OpKind::Constant, 0, 0, 0, [F::zero(); 2], value)
    }

    #[inline(always)]
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.index()] + self.values[b.index()];
        self.push(OpKind::Add, a.0, b.0, 0, [F::one(), F::one()], v)
    }

    #[inline(always)]
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.index()] - self.values[b.index()];
        self.push(OpKind::Sub, a.0, b.0, 0, [F::one(), -F::one()], v)
    }

    #[inline(always)]
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.values[a.index()];
        let vb = self.values[b.index()];
        self.push(OpKind::Mul, a.0, b.0, 0, [vb, va], va * vb)
    }

    #[inline(always)]
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let va = self.values[a.index()];
        let vb = self.values[b.index()];
        let inv = F::one() / vb;
        self.push(OpKind::Div, a.0, b.0, 0, [inv, -va * inv * inv], va * inv)
    }

    #[inline(always)]
    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.values[a.index()];
        self.push(OpKind::Neg, a.0, 0, 0, [-F::one(), F::zero()], -v)
    }

    #[inline(always)]
    pub fn square(&mut self, a: Var) -> Var {
        let v = self.values[a.index()];
        self.push(OpKind::Square, a.0, 0, 0, [v + v, F::zero()], v * v)
    }

    /// Multiplication by a compile-time-known constant (no constant node).
    #[inline(always)]
    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let v = self.values[a.index()];
        self.push(OpKind::Scale, a.0, 0, 0, [k, F::zero()], v * k)
    }

    #[inline(always)]
    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.values[a.index()].tanh();
        self.push(OpKind::Tanh, a.0, 0, 0, [F::one() - t * t, F::zero()], t)
    }

    #[inline(always)]
    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.values[a.index()];
        self.push(OpKind::Sin, a.0, 0, 0, [v.cos(), F::zero()], v.sin())
    }

    #[inline(always)]
    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.values[a.index()];
        self.push(OpKind::Cos, a.0, 0, 0, [-v.sin(), F::zero()], v.cos())
    }

    #[inline(always)]
    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.values[a.index()].exp();
        self.push(OpKind::Exp, a.0, 0, 0, [e, F::zero()], e)
    }

    /// `a * b + c` in one node. The adjoint of `c` is the node's own adjoint.
    #[inline(always)]
    pub fn fma(&mut self, a: Var, b: Var, c: Var) -> Var {
        let va = self.values[a.index()];
        let vb = self.values[b.index()];
        let vc = self.values[c.index()];
        self.push(OpKind::Fma, a.0, b.0, c.0, [vb, va], va * vb + vc)
    }

    /// Identity; exists so values can be regathered into contiguous ranges
    /// for later `dot` fusion.
    #[inline(always)]
    pub fn copy(&mut self, a: Var) -> Var {
        let v = self.values[a.index()];
        self.push(OpKind::Copy, a.0, 0, 0, [F::one(), F::zero()], v)
    }

    /// `tanh(a * b)` fused; the activation layers lean on this to keep the
    /// tape short.
    #[inline(always)]
    pub fn tanh_mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.values[a.index()];
        let vb = self.values[b.index()];
        let t = (va * vb).tanh();
        let g = F::one() - t * t;
        self.push(OpKind::TanhMul, a.0, b.0, 0, [vb * g, va * g], t)
    }

    /// `sin(a * b)` fused.
    #[inline(always)]
    pub fn sin_mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.values[a.index()];
        let vb = self.values[b.index()];
        let (s, c) = (va * vb).sin_cos();
        self.push(OpKind::SinMul, a.0, b.0, 0, [vb * c, va * c], s)
    }

    /// `cos(a * b)` fused.
    #[inline(always)]
    pub fn cos_mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.values[a.index()];
        let vb = self.values[b.index()];
        let (s, c) = (va * vb).sin_cos();
        self.push(OpKind::CosMul, a.0, b.0, 0, [-vb * s, -va * s], c)
    }

    /// `a * (b * c)` fused. The third partial is reconstructed from cached
    /// values during the sweep.
    #[inline(always)]
    pub fn mul3(&mut self, a: Var, b: Var, c: Var) -> Var {
        let va = self.values[a.index()];
        let vb = self.values[b.index()];
        let vc = self.values[c.index()];
        self.push(OpKind::Mul3, a.0, b.0, c.0, [vb * vc, va * vc], va * (vb * vc))
    }

    /// `a * b^2` fused.
    #[inline(always)]
    pub fn mul_sq(&mut self, a: Var, b: Var) -> Var {
        let va = self.values[a.index()];
        let vb = self.values[b.index()];
        let ab = va * vb;
        self.push(OpKind::MulSq, a.0, b.0, 0, [vb * vb, ab + ab], va * (vb * vb))
    }

    /// Inner product of the `len` nodes starting at `a0` with the `len`
    /// nodes starting at `b0`. Both ranges must already be on the tape.
    ///
    /// The reduction runs four independent accumulators (a fixed,
    /// deterministic order, just not left-to-right) so it pipelines.
    pub fn dot(&mut self, a0: Var, b0: Var, len: usize) -> Var {
        let (a, b) = (a0.index(), b0.index());
        let n = self.values.len();
        assert!(a + len <= n && b + len <= n, "dot operand range exceeds tape");
        let (xs, ys) = (&self.values[a..a + len], &self.values[b..b + len]);
        let mut acc = [F::zero(); 4];
        let quads = len / 4 * 4;
        let mut k = 0;
        while k < quads {
            acc[0] = acc[0] + xs[k] * ys[k];
            acc[1] = acc[1] + xs[k + 1] * ys[k + 1];
            acc[2] = acc[2] + xs[k + 2] * ys[k + 2];
            acc[3] = acc[3] + xs[k + 3] * ys[k + 3];
            k += 4;
        }
        let mut tail = F::zero();
        while k < len {
            tail = tail + xs[k] * ys[k];
            k += 1;
        }
        let total = (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
        self.push(OpKind::Dot, a0.0, b0.0, len as u32, [F::zero(); 2], total)
    }

    /// Reverse sweep from `root` over the whole tape; returns one adjoint per
    /// node with the seed d root / d root = 1.
    pub fn backward(&self, root: Var) -> Result<Vec<F>> {
        if root.index() >= self.len() {
            return Err(Error::rejected(format!(
                "backward root {} out of range (tape length {})",
                root.index(),
                self.len()
            )));
        }
        let mut adj = vec![F::zero(); self.len()];
        adj[root.index()] += F::one();
        self.sweep(root.index(), 1, &mut adj);
        Ok(adj)
    }

    /// Reverse sweep restricted to nodes at index >= `floor`, accumulating
    /// into a caller-owned adjoint buffer (`adj.len() == self.len()`).
    ///
    /// Contract: every parent of a swept node either lies at index >= `floor`
    /// or is a node with no parents of its own (leaf/constant). Gradients
    /// then land in the leaf slots exactly as a full sweep would deposit
    /// them. Used to stream per-point loss terms without walking unrelated
    /// tape segments.
    pub fn sweep_range(&self, root: Var, seed: F, floor: usize, adj: &mut [F]) {
        assert_eq!(adj.len(), self.len());
        adj[root.index()] += seed;
        self.sweep(root.index(), floor, adj);
    }

    /// Reverse sweep over every node at index >= `floor`, driven entirely by
    /// adjoints the caller has already seeded into `adj`. Lets several loss
    /// terms that share tape structure (interface jets feeding multiple
    /// continuity terms) propagate in a single pass.
    pub fn sweep_all(&self, floor: usize, adj: &mut [F]) {
        assert_eq!(adj.len(), self.len());
        self.sweep(self.len() - 1, floor, adj);
    }

    /// Overwrites a node's cached value. Only sensible for leaves and
    /// constants (an optimizer updating parameters in place); interior nodes
    /// cache partials of their parents' old values and would go stale.
    #[inline(always)]
    pub fn set_value(&mut self, v: Var, value: F) {
        debug_assert!(matches!(self.nodes[v.index()].op, OpKind::Leaf | OpKind::Constant));
        self.values[v.index()] = value;
    }

    #[inline]
    fn sweep(&self, hi: usize, floor: usize, adj: &mut [F]) {
        let lo = floor.max(1);
        for i in (lo..=hi).rev() {
            let x = adj[i];
            if x == F::zero() {
                continue;
            }
            let m = self.nodes[i];
            match m.op {
                OpKind::Dot => {
                    let (a, b, len) = (m.a as usize, m.b as usize, m.c as usize);
                    for k in 0..len {
                        adj[a + k] += self.values[b + k] * x;
                    }
                    for k in 0..len {
                        adj[b + k] += self.values[a + k] * x;
                    }
                }
                OpKind::Fma => {
                    adj[m.a as usize] += m.p[0] * x;
                    adj[m.b as usize] += m.p[1] * x;
                    adj[m.c as usize] += x;
                }
                OpKind::Mul3 => {
                    adj[m.a as usize] += m.p[0] * x;
                    adj[m.b as usize] += m.p[1] * x;
                    adj[m.c as usize] +=
                        self.values[m.a as usize] * self.values[m.b as usize] * x;
                }
                _ => {
                    adj[m.a as usize] += m.p[0] * x;
                    adj[m.b as usize] += m.p[1] * x;
                }
            }
        }
    }
}
