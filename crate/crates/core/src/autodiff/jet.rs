//! Forward-mode jets: a value together with first and pure second
//! derivatives with respect to a set of tracked input dimensions. Jets ride
//! on top of any [`Algebra`](super::Algebra), so under the tape algebra the
//! derivative components are themselves differentiable nodes and parameter
//! gradients of PDE residuals come out of the same reverse sweep.
//!
//! Derivative slots are `Option`: `None` marks a component that is
//! structurally zero or was not requested. Consumers that need a missing
//! derivative get a rejected-input error instead of a silent zero.
//!
//! Mixed second derivatives (cross terms) are an extended mode; see
//! [`JetFull`]. None of the bundled problems need them.

use super::algebra::Algebra;
use crate::real::Real;
use crate::{Error, Result};
use num_traits::One;
use smallvec::SmallVec;

type Slots<V> = SmallVec<[Option<V>; 2]>;

/// Value, first derivatives, and pure second derivatives per tracked input
/// dimension. `d1`/`d2` lengths always equal the tracked-dimension count.
#[derive(Clone, Debug)]
pub struct Jet2<V> {
    pub val: V,
    d1: Slots<V>,
    d2: Slots<V>,
}

impl<V: Copy> Jet2<V> {
    pub fn new(val: V, d1: Vec<Option<V>>, d2: Vec<Option<V>>) -> Self {
        assert_eq!(d1.len(), d2.len(), "jet slot counts must match");
        Jet2 { val, d1: d1.into_iter().collect(), d2: d2.into_iter().collect() }
    }

    /// Jet of a quantity with no tracked derivatives.
    pub fn scalar(val: V) -> Self {
        Jet2 { val, d1: SmallVec::new(), d2: SmallVec::new() }
    }

    pub fn tracked(&self) -> usize {
        self.d1.len()
    }

    pub fn d1(&self, slot: usize) -> Option<V> {
        self.d1.get(slot).copied().flatten()
    }

    pub fn d2(&self, slot: usize) -> Option<V> {
        self.d2.get(slot).copied().flatten()
    }

    pub fn require_d1(&self, slot: usize) -> Result<V> {
        self.d1(slot).ok_or_else(|| {
            Error::rejected(format!("first derivative for tracked slot {slot} not available"))
        })
    }

    pub fn require_d2(&self, slot: usize) -> Result<V> {
        self.d2(slot).ok_or_else(|| {
            Error::rejected(format!("second derivative for tracked slot {slot} not available"))
        })
    }
}

/// Extended jet carrying the full symmetric second-derivative matrix,
/// including cross terms, stored upper-triangular row-major.
#[derive(Clone, Debug)]
pub struct JetFull<V> {
    pub val: V,
    pub d1: Vec<Option<V>>,
    pub d2: Vec<Option<V>>, // length dims*(dims+1)/2
}

pub fn tri_index(dims: usize, i: usize, j: usize) -> usize {
    let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
    // Row-major upper triangle: row lo starts after lo rows of shrinking length.
    lo * dims - lo * (lo + 1) / 2 + lo + (hi - lo)
}

impl<V: Copy> JetFull<V> {
    pub fn constant_like(dims: usize, val: V) -> Self {
        JetFull { val, d1: vec![None; dims], d2: vec![None; dims * (dims + 1) / 2] }
    }

    pub fn d2_at(&self, dims: usize, i: usize, j: usize) -> Option<V> {
        self.d2[tri_index(dims, i, j)]
    }
}

#[inline]
fn zip_add<A: Algebra>(alg: &mut A, a: Option<A::Value>, b: Option<A::Value>) -> Option<A::Value> {
    match (a, b) {
        (None, None) => None,
        (Some(x), None) => Some(x),
        (None, Some(y)) => Some(y),
        (Some(x), Some(y)) => Some(alg.add(x, y)),
    }
}

#[inline]
fn opt_mul<A: Algebra>(alg: &mut A, a: Option<A::Value>, w: A::Value) -> Option<A::Value> {
    a.map(|x| alg.mul(x, w))
}

/// `acc + w * x` over every component; `w` carries no input derivatives
/// (weights, biases, received constants).
pub fn full_axpy_value<A: Algebra>(
    alg: &mut A,
    w: A::Value,
    x: &JetFull<A::Value>,
    acc: &JetFull<A::Value>,
) -> JetFull<A::Value> {
    let val = alg.fma(w, x.val, acc.val);
    let d1 = x
        .d1
        .iter()
        .zip(&acc.d1)
        .map(|(&xi, &ai)| {
            let wx = opt_mul(alg, xi, w);
            zip_add(alg, wx, ai)
        })
        .collect();
    let d2 = x
        .d2
        .iter()
        .zip(&acc.d2)
        .map(|(&xi, &ai)| {
            let wx = opt_mul(alg, xi, w);
            zip_add(alg, wx, ai)
        })
        .collect();
    JetFull { val, d1, d2 }
}

/// Activation (optionally pre-scaled by a slope value `s` with no input
/// derivatives) applied to a full jet:
/// out = phi(s*u), out_i = s phi' u_i, out_ij = s^2 phi'' u_i u_j + s phi' u_ij.
pub fn full_activate<A: Algebra>(
    alg: &mut A,
    dims: usize,
    u: &JetFull<A::Value>,
    slope: Option<A::Value>,
    act: crate::network::Activation,
) -> JetFull<A::Value> {
    use crate::network::Activation;
    let arg = match slope {
        Some(s) => alg.mul(s, u.val),
        None => u.val,
    };
    let (phi, dphi, ddphi) = match act {
        Activation::Tanh => {
            let t = alg.tanh(arg);
            let sq = alg.square(t);
            let one = alg.constant(A::F::one());
            let d = alg.sub(one, sq);
            let td = alg.mul(t, d);
            let dd = alg.scale(td, A::F::of(-2.0));
            (t, d, dd)
        }
        Activation::Sin => {
            let s = alg.sin(arg);
            let c = alg.cos(arg);
            let dd = alg.neg(s);
            (s, c, dd)
        }
        Activation::Cos => {
            let c = alg.cos(arg);
            let s = alg.sin(arg);
            let d = alg.neg(s);
            let dd = alg.neg(c);
            (c, d, dd)
        }
    };
    // Scaled first derivatives s*u_i.
    let su: Vec<Option<A::Value>> = u
        .d1
        .iter()
        .map(|&ui| match (ui, slope) {
            (Some(x), Some(s)) => Some(alg.mul(s, x)),
            (Some(x), None) => Some(x),
            (None, _) => None,
        })
        .collect();
    let d1 = su.iter().map(|&si| opt_mul(alg, si, dphi)).collect();
    let mut d2 = Vec::with_capacity(dims * (dims + 1) / 2);
    for i in 0..dims {
        for j in i..dims {
            let cross = match (su[i], su[j]) {
                (Some(a), Some(b)) => {
                    let ab = alg.mul(a, b);
                    Some(alg.mul(ddphi, ab))
                }
                _ => None,
            };
            let lin = u.d2[tri_index(dims, i, j)].map(|uij| {
                let sij = match slope {
                    Some(s) => alg.mul(s, uij),
                    None => uij,
                };
                alg.mul(dphi, sij)
            });
            d2.push(zip_add(alg, cross, lin));
        }
    }
    JetFull { val: phi, d1, d2 }
}
