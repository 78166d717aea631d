//! Scalar algebra abstraction. Network forward passes, PDE residuals, and
//! loss terms are written once against [`Algebra`] and run either on plain
//! floats (evaluation, payloads, oracles) or on the reverse-mode tape
//! (training), guaranteeing both paths perform identical arithmetic.

use super::graph::{Graph, Var};
use crate::real::Real;
use std::marker::PhantomData;

pub trait Algebra {
    type F: Real;
    type Value: Copy;

    fn constant(&mut self, c: Self::F) -> Self::Value;
    fn add(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn sub(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn mul(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn div(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn neg(&mut self, a: Self::Value) -> Self::Value;
    fn square(&mut self, a: Self::Value) -> Self::Value;
    fn scale(&mut self, a: Self::Value, k: Self::F) -> Self::Value;
    fn fma(&mut self, a: Self::Value, b: Self::Value, c: Self::Value) -> Self::Value;
    fn tanh(&mut self, a: Self::Value) -> Self::Value;
    fn sin(&mut self, a: Self::Value) -> Self::Value;
    fn cos(&mut self, a: Self::Value) -> Self::Value;
    fn exp(&mut self, a: Self::Value) -> Self::Value;

    /// `tanh(a*b)`; fused on the tape.
    fn tanh_mul(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    /// `sin(a*b)`; fused on the tape.
    fn sin_mul(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    /// `cos(a*b)`; fused on the tape.
    fn cos_mul(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    /// `a*(b*c)`; fused on the tape.
    fn mul3(&mut self, a: Self::Value, b: Self::Value, c: Self::Value) -> Self::Value;
    /// `a*(b*b)`; fused on the tape.
    fn mul_sq(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;

    /// Inner product. Implementations may fuse when operands are contiguous.
    fn dot(&mut self, a: &[Self::Value], b: &[Self::Value]) -> Self::Value;

    /// Rematerializes values so a later `dot` over them can fuse. Identity
    /// for plain floats.
    fn contiguous(&mut self, vals: &[Self::Value]) -> Vec<Self::Value>;

    /// The plain numeric value behind `v`.
    fn value_of(&self, v: Self::Value) -> Self::F;
}

/// Algebra over bare floats.
pub struct Plain<F: Real>(PhantomData<F>);

impl<F: Real> Plain<F> {
    pub fn new() -> Self {
        Plain(PhantomData)
    }
}

impl<F: Real> Default for Plain<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Algebra for Plain<F> {
    type F = F;
    type Value = F;

    #[inline(always)]
    fn constant(&mut self, c: F) -> F {
        c
    }
    #[inline(always)]
    fn add(&mut self, a: F, b: F) -> F {
        a + b
    }
    #[inline(always)]
    fn sub(&mut self, a: F, b: F) -> F {
        a - b
    }
    #[inline(always)]
    fn mul(&mut self, a: F, b: F) -> F {
        a * b
    }
    #[inline(always)]
    fn div(&mut self, a: F, b: F) -> F {
        a / b
    }
    #[inline(always)]
    fn neg(&mut self, a: F) -> F {
        -a
    }
    #[inline(always)]
    fn square(&mut self, a: F) -> F {
        a * a
    }
    #[inline(always)]
    fn scale(&mut self, a: F, k: F) -> F {
        a * k
    }
    #[inline(always)]
    fn fma(&mut self, a: F, b: F, c: F) -> F {
        a * b + c
    }
    #[inline(always)]
    fn tanh(&mut self, a: F) -> F {
        a.tanh()
    }
    #[inline(always)]
    fn sin(&mut self, a: F) -> F {
        a.sin()
    }
    #[inline(always)]
    fn cos(&mut self, a: F) -> F {
        a.cos()
    }
    #[inline(always)]
    fn exp(&mut self, a: F) -> F {
        a.exp()
    }

    #[inline(always)]
    fn tanh_mul(&mut self, a: F, b: F) -> F {
        (a * b).tanh()
    }
    #[inline(always)]
    fn sin_mul(&mut self, a: F, b: F) -> F {
        (a * b).sin()
    }
    #[inline(always)]
    fn cos_mul(&mut self, a: F, b: F) -> F {
        (a * b).cos()
    }
    #[inline(always)]
    fn mul3(&mut self, a: F, b: F, c: F) -> F {
        a * (b * c)
    }
    #[inline(always)]
    fn mul_sq(&mut self, a: F, b: F) -> F {
        a * (b * b)
    }

    // Same four-accumulator order as the tape's fused dot, so plain and
    // taped evaluation stay bit-identical.
    #[inline]
    fn dot(&mut self, a: &[F], b: &[F]) -> F {
        debug_assert_eq!(a.len(), b.len());
        let len = a.len();
        let mut acc = [F::zero(); 4];
        let quads = len / 4 * 4;
        let mut k = 0;
        while k < quads {
            acc[0] = acc[0] + a[k] * b[k];
            acc[1] = acc[1] + a[k + 1] * b[k + 1];
            acc[2] = acc[2] + a[k + 2] * b[k + 2];
            acc[3] = acc[3] + a[k + 3] * b[k + 3];
            k += 4;
        }
        let mut tail = F::zero();
        while k < len {
            tail = tail + a[k] * b[k];
            k += 1;
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }

    #[inline]
    fn contiguous(&mut self, vals: &[F]) -> Vec<F> {
        vals.to_vec()
    }

    #[inline(always)]
    fn value_of(&self, v: F) -> F {
        v
    }
}

impl<F: Real> Algebra for Graph<F> {
    type F = F;
    type Value = Var;

    #[inline(always)]
    fn constant(&mut self, c: F) -> Var {
        Graph::constant(self, c)
    }
    #[inline(always)]
    fn add(&mut self, a: Var, b: Var) -> Var {
        Graph::add(self, a, b)
    }
    #[inline(always)]
    fn sub(&mut self, a: Var, b: Var) -> Var {
        Graph::sub(self, a, b)
    }
    #[inline(always)]
    fn mul(&mut self, a: Var, b: Var) -> Var {
        Graph::mul(self, a, b)
    }
    #[inline(always)]
    fn div(&mut self, a: Var, b: Var) -> Var {
        Graph::div(self, a, b)
    }
    #[inline(always)]
    fn neg(&mut self, a: Var) -> Var {
        Graph::neg(self, a)
    }
    #[inline(always)]
    fn square(&mut self, a: Var) -> Var {
        Graph::square(self, a)
    }
    #[inline(always)]
    fn scale(&mut self, a: Var, k: F) -> Var {
        Graph::scale(self, a, k)
    }
    #[inline(always)]
    fn fma(&mut self, a: Var, b: Var, c: Var) -> Var {
        Graph::fma(self, a, b, c)
    }
    #[inline(always)]
    fn tanh(&mut self, a: Var) -> Var {
        Graph::tanh(self, a)
    }
    #[inline(always)]
    fn sin(&mut self, a: Var) -> Var {
        Graph::sin(self, a)
    }
    #[inline(always)]
    fn cos(&mut self, a: Var) -> Var {
        Graph::cos(self, a)
    }
    #[inline(always)]
    fn exp(&mut self, a: Var) -> Var {
        Graph::exp(self, a)
    }

    #[inline(always)]
    fn tanh_mul(&mut self, a: Var, b: Var) -> Var {
        Graph::tanh_mul(self, a, b)
    }
    #[inline(always)]
    fn sin_mul(&mut self, a: Var, b: Var) -> Var {
        Graph::sin_mul(self, a, b)
    }
    #[inline(always)]
    fn cos_mul(&mut self, a: Var, b: Var) -> Var {
        Graph::cos_mul(self, a, b)
    }
    #[inline(always)]
    fn mul3(&mut self, a: Var, b: Var, c: Var) -> Var {
        Graph::mul3(self, a, b, c)
    }
    #[inline(always)]
    fn mul_sq(&mut self, a: Var, b: Var) -> Var {
        Graph::mul_sq(self, a, b)
    }

    fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        debug_assert_eq!(a.len(), b.len());
        if a.is_empty() {
            return Graph::constant(self, F::zero());
        }
        let contiguous = |s: &[Var]| s.windows(2).all(|w| w[1].0 == w[0].0 + 1);
        if contiguous(a) && contiguous(b) {
            return Graph::dot(self, a[0], b[0], a.len());
        }
        // Fallback: scalar fused multiply-add chain.
        let mut acc = Graph::mul(self, a[0], b[0]);
        for k in 1..a.len() {
            acc = Graph::fma(self, a[k], b[k], acc);
        }
        acc
    }

    fn contiguous(&mut self, vals: &[Var]) -> Vec<Var> {
        let already = vals.windows(2).all(|w| w[1].0 == w[0].0 + 1);
        if already {
            return vals.to_vec();
        }
        vals.iter().map(|&v| self.copy(v)).collect()
    }

    #[inline(always)]
    fn value_of(&self, v: Var) -> F {
        self.value(v)
    }
}
