//! Automatic differentiation: a scalar reverse-mode tape for parameter
//! gradients and forward-mode jets for input derivatives, layered so that
//! jet components built on the tape are themselves differentiable.

mod algebra;
mod graph;
mod jet;

pub use algebra::{Algebra, Plain};
pub use graph::{Graph, OpKind, Var};
pub use jet::{full_activate, full_axpy_value, tri_index, Jet2, JetFull};

use crate::network::{self, NetworkParams};
use crate::real::Real;
use crate::{Error, Result};

/// First and pure second derivatives of every network output with respect to
/// the tracked input dimensions, evaluated in plain floats.
pub fn eval_jet<F: Real>(
    net: &NetworkParams<F>,
    point: &[f64],
    tracked: &[usize],
) -> Result<Vec<Jet2<F>>> {
    let mut alg = Plain::<F>::new();
    network::forward_jet_on(&mut alg, &net.spec, &net.data, point, tracked, tracked)
}

/// Like [`eval_jet`] but only the dimensions in `second` (a subset of
/// `tracked`) carry second derivatives; the rest have empty slots.
pub fn eval_jet_with<F: Real>(
    net: &NetworkParams<F>,
    point: &[f64],
    tracked: &[usize],
    second: &[usize],
) -> Result<Vec<Jet2<F>>> {
    let mut alg = Plain::<F>::new();
    network::forward_jet_on(&mut alg, &net.spec, &net.data, point, tracked, second)
}

/// Extended mode: full second-derivative matrices including cross terms.
pub fn eval_jet_mixed<F: Real>(
    net: &NetworkParams<F>,
    point: &[f64],
    tracked: &[usize],
) -> Result<Vec<JetFull<F>>> {
    let mut alg = Plain::<F>::new();
    network::forward_jet_mixed_on(&mut alg, &net.spec, &net.data, point, tracked)
}

/// Gradient of a scalar root with respect to registered parameter leaves,
/// flattened in registration order.
pub fn backward_params<F: Real>(g: &Graph<F>, root: Var, leaves: &[Var]) -> Result<Vec<F>> {
    let adj = g.backward(root)?;
    Ok(leaves.iter().map(|v| adj[v.index()]).collect())
}

/// Compares the tape gradient of `build` (a scalar function of its parameter
/// leaves) against central finite differences at every coordinate. Returns
/// the maximum relative discrepancy max_i |g_ad_i - g_fd_i| / max(1, |g_fd_i|).
pub fn fd_check<F, B>(build: &B, params: &[F], step: F) -> Result<F>
where
    F: Real,
    B: Fn(&mut Graph<F>, &[Var]) -> Result<Var>,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    fd_check_coords(build, params, step, &coords)
}

/// [`fd_check`] restricted to a subset of parameter coordinates; used when a
/// full sweep over every parameter is too expensive.
pub fn fd_check_coords<F, B>(build: &B, params: &[F], step: F, coords: &[usize]) -> Result<F>
where
    F: Real,
    B: Fn(&mut Graph<F>, &[Var]) -> Result<Var>,
{
    if params.is_empty() {
        return Err(Error::rejected("fd_check needs at least one parameter"));
    }
    if step <= F::zero() {
        return Err(Error::rejected("fd_check step must be positive"));
    }

    let eval = |p: &[F]| -> Result<F> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = p.iter().map(|&v| g.leaf(v)).collect();
        let root = build(&mut g, &leaves)?;
        Ok(g.value(root))
    };

    // Analytic gradient from one tape.
    let mut g = Graph::new();
    let leaves: Vec<Var> = params.iter().map(|&v| g.leaf(v)).collect();
    let root = build(&mut g, &leaves)?;
    if !g.value(root).is_finite() {
        return Err(Error::NonFinite { what: "objective", index: root.index() });
    }
    let grad = backward_params(&g, root, &leaves)?;

    let mut worst = F::zero();
    let mut shifted = params.to_vec();
    for &i in coords {
        if i >= params.len() {
            return Err(Error::rejected(format!("fd_check coordinate {i} out of range")));
        }
        let base = params[i];
        shifted[i] = base + step;
        let up = eval(&shifted)?;
        shifted[i] = base - step;
        let down = eval(&shifted)?;
        shifted[i] = base;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { what: "finite-difference probe", index: i });
        }
        let fd = (up - down) / (step + step);
        let ad = grad[i];
        if !ad.is_finite() {
            return Err(Error::NonFinite { what: "gradient", index: i });
        }
        let rel = (ad - fd).abs() / F::one().max(fd.abs());
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
