//! Loss assembly and the training-method registry.
//!
//! The building blocks are free functions over [`Algebra`]: the same code
//! produces plain numbers for logging and tape nodes for training. Neighbor
//! traces always enter as constants, so interface penalties only push
//! gradient into the local networks.
//!
//! A [`Method`] decides what crosses each interface and how mismatches are
//! penalized: `pinn` exchanges nothing, `cpinn` exchanges solution traces and
//! normal fluxes, `xpinn` exchanges solution traces and equation residuals.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Algebra, Graph, Var};
use crate::geometry::{Decomposition, Point};
use crate::pde::{FieldJets, JetDims, Problem};
use crate::real::Real;
use crate::transport::PayloadKind;
use crate::{Error, Result};

/// Multipliers on the loss components. `interface_flux` applies under
/// `cpinn`, `interface_residual` under `xpinn`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub data: f64,
    pub residual: f64,
    pub interface_avg: f64,
    pub interface_flux: f64,
    pub interface_residual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            data: 20.0,
            residual: 1.0,
            interface_avg: 20.0,
            interface_flux: 20.0,
            interface_residual: 20.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("data", self.data),
            ("residual", self.residual),
            ("interface_avg", self.interface_avg),
            ("interface_flux", self.interface_flux),
            ("interface_residual", self.interface_residual),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::validation(
                    format!("weights.{name}"),
                    format!("must be finite and non-negative, got {w}"),
                ));
            }
        }
        Ok(())
    }
}

/// One epoch's loss components for one subdomain. The `mse_*` fields are
/// raw means; `total` is the weighted sum actually minimized.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub data: f64,
    pub residual: f64,
    pub interface_avg: f64,
    pub interface_jump: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Assembles the weighted total; `jump_weight` comes from the method.
    pub fn assemble(
        weights: &LossWeights,
        jump_weight: f64,
        data: f64,
        residual: f64,
        interface_avg: f64,
        interface_jump: f64,
    ) -> LossBreakdown {
        LossBreakdown {
            data,
            residual,
            interface_avg,
            interface_jump,
            total: weights.data * data
                + weights.residual * residual
                + weights.interface_avg * interface_avg
                + jump_weight * interface_jump,
        }
    }
}

/// Mean of squares; an empty slice contributes exact zero.
pub fn mean_square<A: Algebra>(alg: &mut A, vals: &[A::Value]) -> A::Value {
    if vals.is_empty() {
        return alg.constant(A::F::of(0.0));
    }
    let mut acc = alg.square(vals[0]);
    for &v in &vals[1..] {
        acc = alg.fma(v, v, acc);
    }
    alg.scale(acc, A::F::of(1.0 / vals.len() as f64))
}

/// Mean squared misfit against plain-number targets. Targets carry no
/// gradient; an empty batch contributes exact zero.
pub fn mse_data<A: Algebra>(alg: &mut A, pred: &[A::Value], target: &[f64]) -> Result<A::Value> {
    if pred.len() != target.len() {
        return Err(Error::rejected(format!(
            "{} predictions against {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok(alg.constant(A::F::of(0.0)));
    }
    let mut acc = alg.constant(A::F::of(0.0));
    for (&p, &t) in pred.iter().zip(target) {
        let c = alg.constant(A::F::of(t));
        let d = alg.sub(p, c);
        acc = alg.fma(d, d, acc);
    }
    Ok(alg.scale(acc, A::F::of(1.0 / pred.len() as f64)))
}

/// Mean squared deviation from the two-sided interface average:
/// |(mine - theirs)/2|^2 per point, the neighbor trace held constant.
pub fn mse_interface_avg<A: Algebra>(
    alg: &mut A,
    mine: &[A::Value],
    theirs: &[f64],
) -> Result<A::Value> {
    if mine.len() != theirs.len() {
        return Err(Error::rejected(format!(
            "{} local trace values against {} received",
            mine.len(),
            theirs.len()
        )));
    }
    if mine.is_empty() {
        return Ok(alg.constant(A::F::of(0.0)));
    }
    let mut acc = alg.constant(A::F::of(0.0));
    for (&m, &t) in mine.iter().zip(theirs) {
        let c = alg.constant(A::F::of(t));
        let d = alg.sub(m, c);
        let d = alg.scale(d, A::F::of(0.5));
        acc = alg.fma(d, d, acc);
    }
    Ok(alg.scale(acc, A::F::of(1.0 / mine.len() as f64)))
}

/// Mean squared jump |mine - theirs|^2 with the neighbor side held
/// constant. The same arithmetic as [`mse_data`], named for its role in
/// flux and residual continuity.
pub fn mse_interface_jump<A: Algebra>(
    alg: &mut A,
    mine: &[A::Value],
    theirs: &[f64],
) -> Result<A::Value> {
    mse_data(alg, mine, theirs)
}

/// Stitched global prediction at `p`: the mean over every subdomain whose
/// closure contains the point, so overlaps on cuts and corners average all
/// member networks with a single division.
pub fn stitch(
    decomposition: &Decomposition,
    p: Point,
    eps: f64,
    eval: &mut dyn FnMut(u32, Point) -> Result<f64>,
) -> Result<f64> {
    let members = decomposition.members(p, eps);
    if members.is_empty() {
        return Err(Error::rejected(format!(
            "point ({}, {}) lies in no subdomain",
            p[0], p[1]
        )));
    }
    let mut sum = 0.0;
    for &rank in &members {
        sum += eval(rank, p)?;
    }
    Ok(sum / members.len() as f64)
}

/// A training method: what crosses each interface and how mismatches are
/// penalized. Object-safe so runs can pick one by name at startup.
pub trait Method<F: Real>: Send + Sync {
    /// Registry name.
    fn name(&self) -> &'static str;
    /// Payload kinds exchanged across every interface each epoch, in send
    /// order. Empty means interfaces are ignored entirely.
    fn exchanges(&self) -> &'static [PayloadKind];
    /// Derivatives each net needs at interface points.
    fn interface_dims(&self, problem: &dyn Problem<F>) -> &'static [JetDims];
    /// The second exchanged quantity at one interface point, one tape value
    /// per equation. Empty when nothing beyond solution traces crosses.
    fn coupling_terms(
        &self,
        problem: &dyn Problem<F>,
        g: &mut Graph<F>,
        jets: &FieldJets<Var>,
        p: Point,
        normal: Point,
    ) -> Result<Vec<Var>>;
    /// Weight on the jump penalty of the second exchanged quantity.
    fn jump_weight(&self, weights: &LossWeights) -> f64;
    /// Rejects problem/decomposition pairings this method cannot train.
    fn check(&self, problem: &dyn Problem<F>, decomposition: &Decomposition) -> Result<()>;
}

/// Single-network training: no interface terms at all. On a decomposition
/// with several subdomains each one trains independently.
pub struct Pinn;

impl<F: Real> Method<F> for Pinn {
    fn name(&self) -> &'static str {
        "pinn"
    }

    fn exchanges(&self) -> &'static [PayloadKind] {
        &[]
    }

    fn interface_dims(&self, _problem: &dyn Problem<F>) -> &'static [JetDims] {
        &[]
    }

    fn coupling_terms(
        &self,
        _problem: &dyn Problem<F>,
        _g: &mut Graph<F>,
        _jets: &FieldJets<Var>,
        _p: Point,
        _normal: Point,
    ) -> Result<Vec<Var>> {
        Ok(Vec::new())
    }

    fn jump_weight(&self, _weights: &LossWeights) -> f64 {
        0.0
    }

    fn check(&self, _problem: &dyn Problem<F>, _decomposition: &Decomposition) -> Result<()> {
        Ok(())
    }
}

/// Conservative coupling: solution average plus normal-flux continuity.
/// Only valid across space-only cuts, where the shared flux has meaning.
pub struct Cpinn;

impl<F: Real> Method<F> for Cpinn {
    fn name(&self) -> &'static str {
        "cpinn"
    }

    fn exchanges(&self) -> &'static [PayloadKind] {
        &[PayloadKind::Solution, PayloadKind::Flux]
    }

    fn interface_dims(&self, problem: &dyn Problem<F>) -> &'static [JetDims] {
        problem.flux_dims()
    }

    fn coupling_terms(
        &self,
        problem: &dyn Problem<F>,
        g: &mut Graph<F>,
        jets: &FieldJets<Var>,
        _p: Point,
        normal: Point,
    ) -> Result<Vec<Var>> {
        problem.fluxes(g, jets, normal)
    }

    fn jump_weight(&self, weights: &LossWeights) -> f64 {
        weights.interface_flux
    }

    fn check(&self, problem: &dyn Problem<F>, decomposition: &Decomposition) -> Result<()> {
        if let Some(axis) = problem.time_axis() {
            for edge in decomposition.interior_edges() {
                if edge.normal[axis] != 0.0 {
                    return Err(Error::validation(
                        "method",
                        format!(
                            "cpinn couples {} subdomains through fluxes, which needs space-only \
                             cuts; edge {} has a normal component along the time axis",
                            problem.name(),
                            edge.id
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Residual coupling: solution average plus residual continuity. Works
/// across any cut, including ones that slice the time axis.
pub struct Xpinn;

impl<F: Real> Method<F> for Xpinn {
    fn name(&self) -> &'static str {
        "xpinn"
    }

    fn exchanges(&self) -> &'static [PayloadKind] {
        &[PayloadKind::Solution, PayloadKind::Residual]
    }

    fn interface_dims(&self, problem: &dyn Problem<F>) -> &'static [JetDims] {
        problem.residual_dims()
    }

    fn coupling_terms(
        &self,
        problem: &dyn Problem<F>,
        g: &mut Graph<F>,
        jets: &FieldJets<Var>,
        p: Point,
        _normal: Point,
    ) -> Result<Vec<Var>> {
        problem.residuals(g, jets, p)
    }

    fn jump_weight(&self, weights: &LossWeights) -> f64 {
        weights.interface_residual
    }

    fn check(&self, _problem: &dyn Problem<F>, _decomposition: &Decomposition) -> Result<()> {
        Ok(())
    }
}

/// Builds the training method registered under `name`.
pub fn make_method<F: Real>(name: &str) -> Result<Box<dyn Method<F>>> {
    match name {
        "pinn" => Ok(Box::new(Pinn)),
        "cpinn" => Ok(Box::new(Cpinn)),
        "xpinn" => Ok(Box::new(Xpinn)),
        other => Err(Error::rejected(format!(
            "unknown training method {other:?}; expected pinn, cpinn, or xpinn"
        ))),
    }
}
