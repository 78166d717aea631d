//! Independent reference solution for the viscous Burgers benchmark.
//!
//! The initial condition u(x, 0) = -sin(pi x) linearizes under the
//! Cole–Hopf substitution u = -2 nu (ln theta)_x, where theta solves the
//! heat equation with theta(x, 0) = exp((1 - cos(pi x)) / (2 nu pi)).
//! Convolving with the heat kernel gives
//!
//! ```text
//! u(x, t) = integral (x - eta)/t * q(eta) d eta / integral q(eta) d eta
//! q(eta)  = exp( (1 - cos(pi eta)) / (2 nu pi) - (x - eta)^2 / (4 nu t) )
//! ```
//!
//! which this module evaluates with composite Gauss–Legendre quadrature and
//! a running log-sum-exp rescale (the exponent reaches ~100 at the default
//! viscosity). The integration window is chosen so the discarded tails are
//! below e^-36 of the peak. None of the training code path touches this:
//! it exists so accuracy tests have a reference that shares nothing with
//! the networks or the autodiff stack.

use std::f64::consts::PI;

use crate::{Error, Result};

/// Legendre polynomial P_n and its derivative at `x` via the three-term
/// recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    debug_assert!(n >= 1);
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let pk = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = pk;
    }
    let dp = if n == 1 { 1.0 } else { n as f64 * (x * p1 - p0) / (x * x - 1.0) };
    (p1, dp)
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1]
/// (Newton iteration from the Chebyshev initial guess).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature order must be at least 1");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..60 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Reference evaluator for u_t + u u_x = nu u_xx on x in [-1, 1] with
/// u(x, 0) = -sin(pi x) and u(+-1, t) = 0 (the odd periodic extension makes
/// the whole-line formula satisfy the walls exactly).
pub struct BurgersReference {
    nu: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    panels: usize,
}

impl BurgersReference {
    pub fn new(nu: f64) -> Result<Self> {
        if !nu.is_finite() || nu <= 0.0 {
            return Err(Error::rejected(format!("viscosity must be positive, got {nu}")));
        }
        let (nodes, weights) = gauss_legendre(20);
        Ok(BurgersReference { nu, nodes, weights, panels: 100 })
    }

    #[cfg(test)]
    fn with_panels(nu: f64, panels: usize) -> Self {
        let (nodes, weights) = gauss_legendre(20);
        BurgersReference { nu, nodes, weights, panels }
    }

    /// u(x, t). Times below 1e-8 return the initial condition directly.
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        if t < 1e-8 {
            return -(PI * x).sin();
        }
        let amp = 1.0 / (2.0 * self.nu * PI); // theta_0 exponent scale
        let inv4 = 1.0 / (4.0 * self.nu * t);
        // Past this distance the Gaussian factor is below e^-36 of anything
        // the theta_0 term can recover.
        let w = ((2.0 * amp + 36.0) / inv4).sqrt();
        let (lo, half) = (x - w, w / self.panels as f64);

        let mut m = f64::NEG_INFINITY;
        let mut num = 0.0;
        let mut den = 0.0;
        for p in 0..2 * self.panels {
            let center = lo + (2.0 * p as f64 + 1.0) * half;
            for (gx, gw) in self.nodes.iter().zip(&self.weights) {
                let eta = center + half * gx;
                let d = x - eta;
                let e = amp * (1.0 - (PI * eta).cos()) - d * d * inv4;
                if e > m {
                    let r = (m - e).exp(); // first iteration: exp(-inf) = 0
                    num *= r;
                    den *= r;
                    m = e;
                }
                let q = (e - m).exp() * gw;
                den += q;
                num += q * d / t;
            }
        }
        num / den
    }
}
