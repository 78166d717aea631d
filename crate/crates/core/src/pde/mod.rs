//! Equation families: residual/flux operators, analytic references, and the
//! registry that picks a problem by name.
//!
//! Operators are free functions over [`Algebra`], so one definition serves
//! both plain-float oracle checks and tape evaluation during training.
//! Coordinate convention throughout: dim 0 is x, dim 1 is y (or t for
//! space-time problems).

use std::cell::Cell;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Algebra, Graph, Jet2, Var};
use crate::geometry::{DataSource, Domain, Point};
use crate::real::Real;
use crate::{Error, Result};

mod reference;

pub use reference::{gauss_legendre, BurgersReference};

/// Running tally of what the operators pulled out of a [`FieldJets`] bundle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub value: usize,
    pub first: usize,
    pub second: usize,
}

impl EvalCounts {
    /// Derivative evaluations of any order.
    pub fn total_derivatives(&self) -> usize {
        self.first + self.second
    }
}

struct FieldEntry<V> {
    name: &'static str,
    dims: Vec<usize>,
    jet: Jet2<V>,
}

/// Named field evaluations at one point, each carrying whichever derivatives
/// were requested. Operators read from the bundle by field name and
/// coordinate; the counter records how many values and derivatives they
/// actually consumed.
pub struct FieldJets<V: Copy> {
    entries: Vec<FieldEntry<V>>,
    counts: Cell<EvalCounts>,
}

impl<V: Copy> FieldJets<V> {
    pub fn new() -> Self {
        FieldJets { entries: Vec::new(), counts: Cell::new(EvalCounts::default()) }
    }

    /// Adds `jet` under `name`; `dims` labels the coordinate each tracked
    /// slot differentiates along.
    pub fn insert(&mut self, name: &'static str, dims: Vec<usize>, jet: Jet2<V>) {
        assert_eq!(dims.len(), jet.tracked(), "dims must label every tracked slot of {name}");
        assert!(self.entries.iter().all(|e| e.name != name), "field {name} inserted twice");
        self.entries.push(FieldEntry { name, dims, jet });
    }

    fn entry(&self, name: &str) -> Result<&FieldEntry<V>> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::rejected(format!("no field named {name} was evaluated here")))
    }

    fn bump(&self, f: impl FnOnce(&mut EvalCounts)) {
        let mut c = self.counts.get();
        f(&mut c);
        self.counts.set(c);
    }

    pub fn value(&self, name: &str) -> Result<V> {
        let v = self.entry(name)?.jet.val;
        self.bump(|c| c.value += 1);
        Ok(v)
    }

    /// First derivative of `name` along coordinate `dim`.
    pub fn d1(&self, name: &str, dim: usize) -> Result<V> {
        let e = self.entry(name)?;
        let v = e
            .dims
            .iter()
            .position(|&d| d == dim)
            .and_then(|slot| e.jet.d1(slot))
            .ok_or_else(|| {
                Error::rejected(format!(
                    "first derivative of {name} along dim {dim} was not evaluated"
                ))
            })?;
        self.bump(|c| c.first += 1);
        Ok(v)
    }

    /// Pure second derivative of `name` along coordinate `dim`.
    pub fn d2(&self, name: &str, dim: usize) -> Result<V> {
        let e = self.entry(name)?;
        let v = e
            .dims
            .iter()
            .position(|&d| d == dim)
            .and_then(|slot| e.jet.d2(slot))
            .ok_or_else(|| {
                Error::rejected(format!(
                    "second derivative of {name} along dim {dim} was not evaluated"
                ))
            })?;
        self.bump(|c| c.second += 1);
        Ok(v)
    }

    pub fn counts(&self) -> EvalCounts {
        self.counts.get()
    }

    pub fn reset_counts(&self) {
        self.counts.set(EvalCounts::default());
    }
}

impl<V: Copy> Default for FieldJets<V> {
    fn default() -> Self {
        FieldJets::new()
    }
}

fn require_unit_normal(normal: Point) -> Result<()> {
    let n2 = normal[0] * normal[0] + normal[1] * normal[1];
    if !((n2 - 1.0).abs() <= 1e-12) {
        return Err(Error::rejected(format!(
            "interface normal must have unit length, got |n|^2 = {n2}"
        )));
    }
    Ok(())
}

/// `(fx, fy) . n` for a plain-number normal.
fn project<A: Algebra>(alg: &mut A, fx: A::Value, fy: A::Value, n_x: A::F, n_y: A::F) -> A::Value {
    let a = alg.scale(fx, n_x);
    let b = alg.scale(fy, n_y);
    alg.add(a, b)
}

/// Viscous Burgers residual u_t + u u_x - nu u_xx at one point.
pub fn burgers_residual<A: Algebra>(
    alg: &mut A,
    jets: &FieldJets<A::Value>,
    nu: f64,
) -> Result<A::Value> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::rejected(format!("viscosity must be positive, got {nu}")));
    }
    let u = jets.value("u")?;
    let u_x = jets.d1("u", 0)?;
    let u_t = jets.d1("u", 1)?;
    let u_xx = jets.d2("u", 0)?;
    let adv = alg.fma(u, u_x, u_t);
    let visc = alg.scale(u_xx, A::F::of(nu));
    Ok(alg.sub(adv, visc))
}

/// The Burgers flux u^2/2 - nu u_x. The conserved quantity only moves along
/// x, so this is a scalar, not a vector.
pub fn burgers_flux<A: Algebra>(
    alg: &mut A,
    jets: &FieldJets<A::Value>,
    nu: f64,
) -> Result<A::Value> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::rejected(format!("viscosity must be positive, got {nu}")));
    }
    let u = jets.value("u")?;
    let u_x = jets.d1("u", 0)?;
    let sq = alg.square(u);
    let half = alg.scale(sq, A::F::of(0.5));
    let visc = alg.scale(u_x, A::F::of(nu));
    Ok(alg.sub(half, visc))
}

/// One value per steady incompressible-flow equation.
#[derive(Clone, Copy, Debug)]
pub struct NsTriple<V> {
    pub x_momentum: V,
    pub y_momentum: V,
    pub mass: V,
}

/// Steady momentum and mass residuals for incompressible flow.
pub fn ns_residuals<A: Algebra>(
    alg: &mut A,
    jets: &FieldJets<A::Value>,
    re: f64,
) -> Result<NsTriple<A::Value>> {
    if !(re > 0.0) || !re.is_finite() {
        return Err(Error::rejected(format!("Reynolds number must be positive, got {re}")));
    }
    let inv_re = A::F::of(1.0 / re);
    let u = jets.value("u")?;
    let v = jets.value("v")?;
    let (u_x, u_y) = (jets.d1("u", 0)?, jets.d1("u", 1)?);
    let (v_x, v_y) = (jets.d1("v", 0)?, jets.d1("v", 1)?);
    let (p_x, p_y) = (jets.d1("p", 0)?, jets.d1("p", 1)?);
    let (u_xx, u_yy) = (jets.d2("u", 0)?, jets.d2("u", 1)?);
    let (v_xx, v_yy) = (jets.d2("v", 0)?, jets.d2("v", 1)?);

    let adv = alg.mul(u, u_x);
    let adv = alg.fma(v, u_y, adv);
    let with_p = alg.add(adv, p_x);
    let lap = alg.add(u_xx, u_yy);
    let visc = alg.scale(lap, inv_re);
    let x_momentum = alg.sub(with_p, visc);

    let adv = alg.mul(u, v_x);
    let adv = alg.fma(v, v_y, adv);
    let with_p = alg.add(adv, p_y);
    let lap = alg.add(v_xx, v_yy);
    let visc = alg.scale(lap, inv_re);
    let y_momentum = alg.sub(with_p, visc);

    let mass = alg.add(u_x, v_y);
    Ok(NsTriple { x_momentum, y_momentum, mass })
}

/// Momentum and mass fluxes projected on a unit `normal`:
/// `(u^2 + p - u_x/Re, u v - u_y/Re) . n`, its y-momentum mirror, and
/// `(u, v) . n`.
pub fn ns_fluxes<A: Algebra>(
    alg: &mut A,
    jets: &FieldJets<A::Value>,
    re: f64,
    normal: Point,
) -> Result<NsTriple<A::Value>> {
    if !(re > 0.0) || !re.is_finite() {
        return Err(Error::rejected(format!("Reynolds number must be positive, got {re}")));
    }
    require_unit_normal(normal)?;
    let inv_re = A::F::of(1.0 / re);
    let (n_x, n_y) = (A::F::of(normal[0]), A::F::of(normal[1]));
    let u = jets.value("u")?;
    let v = jets.value("v")?;
    let p = jets.value("p")?;
    let (u_x, u_y) = (jets.d1("u", 0)?, jets.d1("u", 1)?);
    let (v_x, v_y) = (jets.d1("v", 0)?, jets.d1("v", 1)?);

    let sq = alg.square(u);
    let tot = alg.add(sq, p);
    let visc = alg.scale(u_x, inv_re);
    let fx = alg.sub(tot, visc);
    let uv = alg.mul(u, v);
    let visc = alg.scale(u_y, inv_re);
    let fy = alg.sub(uv, visc);
    let x_momentum = project(alg, fx, fy, n_x, n_y);

    let uv = alg.mul(u, v);
    let visc = alg.scale(v_x, inv_re);
    let fx = alg.sub(uv, visc);
    let sq = alg.square(v);
    let tot = alg.add(sq, p);
    let visc = alg.scale(v_y, inv_re);
    let fy = alg.sub(tot, visc);
    let y_momentum = project(alg, fx, fy, n_x, n_y);

    let mass = project(alg, u, v, n_x, n_y);
    Ok(NsTriple { x_momentum, y_momentum, mass })
}

/// The mass equation alone: u_x + v_y.
pub fn ns_mass_residual<A: Algebra>(alg: &mut A, jets: &FieldJets<A::Value>) -> Result<A::Value> {
    let u_x = jets.d1("u", 0)?;
    let v_y = jets.d1("v", 1)?;
    Ok(alg.add(u_x, v_y))
}

/// The mass flux (u, v) . n: field values only, no derivatives.
pub fn ns_mass_flux<A: Algebra>(
    alg: &mut A,
    jets: &FieldJets<A::Value>,
    normal: Point,
) -> Result<A::Value> {
    require_unit_normal(normal)?;
    let u = jets.value("u")?;
    let v = jets.value("v")?;
    Ok(project(alg, u, v, A::F::of(normal[0]), A::F::of(normal[1])))
}

/// Steady conduction residual div(K grad T) - f with both T and K trained.
/// `f` is the manufactured source that makes [`heat_exact_t`] and
/// [`heat_exact_k`] an exact solution.
pub fn heat_residual<A: Algebra>(
    alg: &mut A,
    jets: &FieldJets<A::Value>,
    p: Point,
) -> Result<A::Value> {
    let k = jets.value("K")?;
    let (k_x, k_y) = (jets.d1("K", 0)?, jets.d1("K", 1)?);
    let (t_x, t_y) = (jets.d1("T", 0)?, jets.d1("T", 1)?);
    let (t_xx, t_yy) = (jets.d2("T", 0)?, jets.d2("T", 1)?);
    // div(K grad T) = K_x T_x + K T_xx + K_y T_y + K T_yy
    let acc = alg.mul(k_x, t_x);
    let acc = alg.fma(k, t_xx, acc);
    let acc = alg.fma(k_y, t_y, acc);
    let acc = alg.fma(k, t_yy, acc);
    let f = alg.constant(A::F::of(heat_forcing(p)));
    Ok(alg.sub(acc, f))
}

/// Conductive flux K grad T . n (unit normal).
pub fn heat_flux<A: Algebra>(
    alg: &mut A,
    jets: &FieldJets<A::Value>,
    normal: Point,
) -> Result<A::Value> {
    require_unit_normal(normal)?;
    let k = jets.value("K")?;
    let t_x = jets.d1("T", 0)?;
    let t_y = jets.d1("T", 1)?;
    let g = project(alg, t_x, t_y, A::F::of(normal[0]), A::F::of(normal[1]));
    Ok(alg.mul(k, g))
}

/// Source term matched to the closed-form fields: expanding div(K grad T)
/// with T = 20 e^{-y/10} and K = 20 + e^{y/10} sin(x/2), the sin terms
/// cancel and 4 e^{-y/10} is left.
pub fn heat_forcing(p: Point) -> f64 {
    4.0 * (-0.1 * p[1]).exp()
}

/// Closed-form temperature field for the conduction benchmark.
pub fn heat_exact_t(p: Point) -> f64 {
    20.0 * (-0.1 * p[1]).exp()
}

/// Closed-form conductivity field for the conduction benchmark.
pub fn heat_exact_k(p: Point) -> f64 {
    20.0 + (0.1 * p[1]).exp() * (0.5 * p[0]).sin()
}

/// Closed-form steady wake flow behind a grid of bars: an exact solution of
/// the incompressible equations, used to certify the residual operators.
pub struct Kovasznay {
    lambda: f64,
}

impl Kovasznay {
    pub fn new(re: f64) -> Result<Self> {
        if !(re > 0.0) || !re.is_finite() {
            return Err(Error::rejected(format!("Reynolds number must be positive, got {re}")));
        }
        let lambda = 0.5 * re - (0.25 * re * re + 4.0 * PI * PI).sqrt();
        Ok(Kovasznay { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// (u, v, p) at `point`.
    pub fn velocity_pressure(&self, point: Point) -> (f64, f64, f64) {
        let jets = self.jets(point);
        (
            jets.value("u").unwrap(),
            jets.value("v").unwrap(),
            jets.value("p").unwrap(),
        )
    }

    /// Field jets carrying every derivative the residual operators ask for.
    pub fn jets(&self, p: Point) -> FieldJets<f64> {
        let l = self.lambda;
        let two_pi = 2.0 * PI;
        let ex = (l * p[0]).exp();
        let (s, c) = (two_pi * p[1]).sin_cos();

        let u = 1.0 - ex * c;
        let u_x = -l * ex * c;
        let u_y = two_pi * ex * s;
        let u_xx = -l * l * ex * c;
        let u_yy = two_pi * two_pi * ex * c;

        let v = l / two_pi * ex * s;
        let v_x = l * l / two_pi * ex * s;
        let v_y = l * ex * c;
        let v_xx = l * l * l / two_pi * ex * s;
        let v_yy = -two_pi * l * ex * s;

        let pr = 0.5 * (1.0 - (2.0 * l * p[0]).exp());
        let pr_x = -l * (2.0 * l * p[0]).exp();

        let mut jets = FieldJets::new();
        jets.insert(
            "u",
            vec![0, 1],
            Jet2::new(u, vec![Some(u_x), Some(u_y)], vec![Some(u_xx), Some(u_yy)]),
        );
        jets.insert(
            "v",
            vec![0, 1],
            Jet2::new(v, vec![Some(v_x), Some(v_y)], vec![Some(v_xx), Some(v_yy)]),
        );
        jets.insert("p", vec![0, 1], Jet2::new(pr, vec![Some(pr_x), Some(0.0)], vec![None, None]));
        jets
    }
}

/// Analytic field bundles for exercising the operators with no networks in
/// the loop.
#[derive(Clone, Copy, Debug)]
pub enum FieldOracle {
    /// u = e^{-t} sin(pi x) on (x, t). Not a Burgers solution, but every
    /// derivative is known in closed form.
    BurgersManufactured,
    /// The exact steady wake flow at the given Reynolds number.
    Kovasznay { re: f64 },
    /// u = sin x sin y, v = cos x cos y, p = 0: divergence-free by
    /// construction.
    NsSolenoidal,
    /// The conduction benchmark's closed-form T and K.
    HeatExact,
}

impl FieldOracle {
    pub fn jets(&self, p: Point) -> FieldJets<f64> {
        match *self {
            FieldOracle::BurgersManufactured => {
                let (x, t) = (p[0], p[1]);
                let u = (-t).exp() * (PI * x).sin();
                let u_x = PI * (-t).exp() * (PI * x).cos();
                let mut jets = FieldJets::new();
                jets.insert(
                    "u",
                    vec![0, 1],
                    Jet2::new(u, vec![Some(u_x), Some(-u)], vec![Some(-PI * PI * u), Some(u)]),
                );
                jets
            }
            FieldOracle::Kovasznay { re } => {
                Kovasznay::new(re).expect("oracle Reynolds number must be positive").jets(p)
            }
            FieldOracle::NsSolenoidal => {
                let (sx, cx) = p[0].sin_cos();
                let (sy, cy) = p[1].sin_cos();
                let u = sx * sy;
                let v = cx * cy;
                let mut jets = FieldJets::new();
                jets.insert(
                    "u",
                    vec![0, 1],
                    Jet2::new(u, vec![Some(cx * sy), Some(sx * cy)], vec![Some(-u), Some(-u)]),
                );
                jets.insert(
                    "v",
                    vec![0, 1],
                    Jet2::new(v, vec![Some(-(sx * cy)), Some(-(cx * sy))], vec![Some(-v), Some(-v)]),
                );
                jets.insert("p", vec![0, 1], Jet2::new(0.0, vec![Some(0.0), Some(0.0)], vec![None, None]));
                jets
            }
            FieldOracle::HeatExact => {
                let em = (-0.1 * p[1]).exp();
                let ep = (0.1 * p[1]).exp();
                let (s, c) = (0.5 * p[0]).sin_cos();
                let mut jets = FieldJets::new();
                jets.insert(
                    "T",
                    vec![0, 1],
                    Jet2::new(20.0 * em, vec![Some(0.0), Some(-2.0 * em)], vec![Some(0.0), Some(0.2 * em)]),
                );
                jets.insert(
                    "K",
                    vec![0, 1],
                    Jet2::new(20.0 + ep * s, vec![Some(0.5 * ep * c), Some(0.1 * ep * s)], vec![None, None]),
                );
                jets
            }
        }
    }
}

/// Which equations a run trains against, tagged by name in configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ProblemKind {
    Burgers { nu: f64 },
    NavierStokes { re: f64 },
    HeatInverse,
}

impl ProblemKind {
    /// The registry name this kind is selected by.
    pub fn label(&self) -> &'static str {
        match self {
            ProblemKind::Burgers { .. } => "burgers",
            ProblemKind::NavierStokes { .. } => "navier-stokes",
            ProblemKind::HeatInverse => "heat-inverse",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ProblemKind::Burgers { nu } => {
                if !(nu > 0.0) || !nu.is_finite() {
                    return Err(Error::rejected(format!("viscosity must be positive, got {nu}")));
                }
            }
            ProblemKind::NavierStokes { re } => {
                if !(re > 0.0) || !re.is_finite() {
                    return Err(Error::rejected(format!(
                        "Reynolds number must be positive, got {re}"
                    )));
                }
            }
            ProblemKind::HeatInverse => {}
        }
        Ok(())
    }
}

/// One network a problem trains per subdomain, with the solution fields it
/// outputs (in output order).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetRole {
    pub name: &'static str,
    pub fields: &'static [&'static str],
}

/// Which coordinates an evaluation differentiates along: `tracked` lists
/// dims needing first derivatives, `second` the subset that also needs pure
/// second derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JetDims {
    pub tracked: &'static [usize],
    pub second: &'static [usize],
}

/// An equation family behind a uniform, object-safe interface: which
/// networks it needs, which derivatives each term wants, residual and
/// interface-flux forms on the tape, measurement data, and a reference
/// solution when one exists. Runs pick an implementation by name at
/// startup.
pub trait Problem<F: Real>: DataSource + Send + Sync {
    fn kind(&self) -> ProblemKind;
    /// Registry name.
    fn name(&self) -> &'static str;
    /// Networks per subdomain and the fields each one outputs.
    fn nets(&self) -> &'static [NetRole];
    /// Derivatives each net needs for residual terms (same order as `nets`).
    fn residual_dims(&self) -> &'static [JetDims];
    /// Derivatives each net needs for interface-flux terms.
    fn flux_dims(&self) -> &'static [JetDims];
    /// Fields whose interface average is penalized.
    fn continuity_fields(&self) -> &'static [&'static str];
    /// The coordinate that plays the role of time, if any. Flux continuity
    /// only makes sense across cuts with no normal component along it.
    fn time_axis(&self) -> Option<usize>;
    /// All residual equations at one point, on the tape.
    fn residuals(&self, g: &mut Graph<F>, jets: &FieldJets<Var>, p: Point) -> Result<Vec<Var>>;
    /// All interface fluxes projected on the unit `normal`, on the tape.
    fn fluxes(&self, g: &mut Graph<F>, jets: &FieldJets<Var>, normal: Point) -> Result<Vec<Var>>;
    /// Reference solution as (field, value) pairs; errors when the problem
    /// has no closed-form reference.
    fn exact(&self, p: Point) -> Result<Vec<(&'static str, f64)>>;
}

/// Viscous Burgers on a space-time box starting at t = 0: u(x, 0) =
/// -sin(pi x), walls pinned to zero, reference solution by quadrature.
pub struct BurgersProblem {
    nu: f64,
    domain: Domain,
    reference: BurgersReference,
}

const BURGERS_NETS: &[NetRole] = &[NetRole { name: "u", fields: &["u"] }];
const BURGERS_RESIDUAL_DIMS: &[JetDims] = &[JetDims { tracked: &[0, 1], second: &[0] }];
const BURGERS_FLUX_DIMS: &[JetDims] = &[JetDims { tracked: &[0], second: &[] }];

impl DataSource for BurgersProblem {
    fn boundary_values(&self, p: Point) -> Vec<(&'static str, f64)> {
        // Boundary samples sit exactly on the domain lines, so direct
        // comparison picks the right face.
        if p[1] == self.domain.lo[1] {
            vec![("u", -(PI * p[0]).sin())]
        } else if p[0] == self.domain.lo[0] || p[0] == self.domain.hi[0] {
            vec![("u", 0.0)]
        } else {
            Vec::new() // the final-time face is unconstrained
        }
    }
}

impl<F: Real> Problem<F> for BurgersProblem {
    fn kind(&self) -> ProblemKind {
        ProblemKind::Burgers { nu: self.nu }
    }

    fn name(&self) -> &'static str {
        "burgers"
    }

    fn nets(&self) -> &'static [NetRole] {
        BURGERS_NETS
    }

    fn residual_dims(&self) -> &'static [JetDims] {
        BURGERS_RESIDUAL_DIMS
    }

    fn flux_dims(&self) -> &'static [JetDims] {
        BURGERS_FLUX_DIMS
    }

    fn continuity_fields(&self) -> &'static [&'static str] {
        &["u"]
    }

    fn time_axis(&self) -> Option<usize> {
        Some(1)
    }

    fn residuals(&self, g: &mut Graph<F>, jets: &FieldJets<Var>, _p: Point) -> Result<Vec<Var>> {
        Ok(vec![burgers_residual(g, jets, self.nu)?])
    }

    fn fluxes(&self, g: &mut Graph<F>, jets: &FieldJets<Var>, normal: Point) -> Result<Vec<Var>> {
        require_unit_normal(normal)?;
        if normal[1] != 0.0 {
            return Err(Error::rejected(format!(
                "burgers flux continuity needs space-only cuts; got a normal with time component {}",
                normal[1]
            )));
        }
        let f = burgers_flux(g, jets, self.nu)?;
        Ok(vec![g.scale(f, F::of(normal[0]))])
    }

    fn exact(&self, p: Point) -> Result<Vec<(&'static str, f64)>> {
        Ok(vec![("u", self.reference.eval(p[0], p[1]))])
    }
}

/// Steady lid-driven cavity: unit velocity along the top face, no-slip
/// walls. No closed-form reference exists.
pub struct NavierStokesProblem {
    re: f64,
    domain: Domain,
}

const NS_NETS: &[NetRole] = &[NetRole { name: "flow", fields: &["u", "v", "p"] }];
const NS_RESIDUAL_DIMS: &[JetDims] = &[JetDims { tracked: &[0, 1], second: &[0, 1] }];
const NS_FLUX_DIMS: &[JetDims] = &[JetDims { tracked: &[0, 1], second: &[] }];

impl DataSource for NavierStokesProblem {
    fn boundary_values(&self, p: Point) -> Vec<(&'static str, f64)> {
        // Lid on the top face, no-slip elsewhere. The pressure level is
        // left free: only its gradient enters the equations.
        if p[1] == self.domain.hi[1] {
            vec![("u", 1.0), ("v", 0.0)]
        } else {
            vec![("u", 0.0), ("v", 0.0)]
        }
    }
}

impl<F: Real> Problem<F> for NavierStokesProblem {
    fn kind(&self) -> ProblemKind {
        ProblemKind::NavierStokes { re: self.re }
    }

    fn name(&self) -> &'static str {
        "navier-stokes"
    }

    fn nets(&self) -> &'static [NetRole] {
        NS_NETS
    }

    fn residual_dims(&self) -> &'static [JetDims] {
        NS_RESIDUAL_DIMS
    }

    fn flux_dims(&self) -> &'static [JetDims] {
        NS_FLUX_DIMS
    }

    fn continuity_fields(&self) -> &'static [&'static str] {
        &["u", "v", "p"]
    }

    fn time_axis(&self) -> Option<usize> {
        None
    }

    fn residuals(&self, g: &mut Graph<F>, jets: &FieldJets<Var>, _p: Point) -> Result<Vec<Var>> {
        let r = ns_residuals(g, jets, self.re)?;
        Ok(vec![r.x_momentum, r.y_momentum, r.mass])
    }

    fn fluxes(&self, g: &mut Graph<F>, jets: &FieldJets<Var>, normal: Point) -> Result<Vec<Var>> {
        let f = ns_fluxes(g, jets, self.re, normal)?;
        Ok(vec![f.x_momentum, f.y_momentum, f.mass])
    }

    fn exact(&self, _p: Point) -> Result<Vec<(&'static str, f64)>> {
        Err(Error::rejected("the lid-driven cavity has no closed-form reference solution"))
    }
}

/// Conductivity recovery: temperature is measured inside the domain,
/// conductivity only along the outer boundary, and the steady conduction
/// equation ties the two together everywhere else.
pub struct HeatInverseProblem;

const HEAT_NETS: &[NetRole] = &[
    NetRole { name: "T", fields: &["T"] },
    NetRole { name: "K", fields: &["K"] },
];
const HEAT_RESIDUAL_DIMS: &[JetDims] = &[
    JetDims { tracked: &[0, 1], second: &[0, 1] },
    JetDims { tracked: &[0, 1], second: &[] },
];
const HEAT_FLUX_DIMS: &[JetDims] = &[
    JetDims { tracked: &[0, 1], second: &[] },
    JetDims { tracked: &[], second: &[] },
];

impl DataSource for HeatInverseProblem {
    fn boundary_values(&self, p: Point) -> Vec<(&'static str, f64)> {
        vec![("K", heat_exact_k(p))] // conductivity is only measured at the rim
    }

    fn interior_values(&self, p: Point) -> Vec<(&'static str, f64)> {
        vec![("T", heat_exact_t(p))]
    }
}

impl<F: Real> Problem<F> for HeatInverseProblem {
    fn kind(&self) -> ProblemKind {
        ProblemKind::HeatInverse
    }

    fn name(&self) -> &'static str {
        "heat-inverse"
    }

    fn nets(&self) -> &'static [NetRole] {
        HEAT_NETS
    }

    fn residual_dims(&self) -> &'static [JetDims] {
        HEAT_RESIDUAL_DIMS
    }

    fn flux_dims(&self) -> &'static [JetDims] {
        HEAT_FLUX_DIMS
    }

    fn continuity_fields(&self) -> &'static [&'static str] {
        &["T", "K"]
    }

    fn time_axis(&self) -> Option<usize> {
        None
    }

    fn residuals(&self, g: &mut Graph<F>, jets: &FieldJets<Var>, p: Point) -> Result<Vec<Var>> {
        Ok(vec![heat_residual(g, jets, p)?])
    }

    fn fluxes(&self, g: &mut Graph<F>, jets: &FieldJets<Var>, normal: Point) -> Result<Vec<Var>> {
        Ok(vec![heat_flux(g, jets, normal)?])
    }

    fn exact(&self, p: Point) -> Result<Vec<(&'static str, f64)>> {
        Ok(vec![("T", heat_exact_t(p)), ("K", heat_exact_k(p))])
    }
}

/// Builds the problem registered under `kind` for runs on `domain`.
pub fn make_problem<F: Real>(kind: &ProblemKind, domain: &Domain) -> Result<Box<dyn Problem<F>>> {
    kind.validate()?;
    domain.validate()?;
    match *kind {
        ProblemKind::Burgers { nu } => {
            if domain.lo[1] != 0.0 {
                return Err(Error::rejected(format!(
                    "burgers runs start at time zero; this domain begins at t = {}",
                    domain.lo[1]
                )));
            }
            Ok(Box::new(BurgersProblem {
                nu,
                domain: domain.clone(),
                reference: BurgersReference::new(nu)?,
            }))
        }
        ProblemKind::NavierStokes { re } => {
            Ok(Box::new(NavierStokesProblem { re, domain: domain.clone() }))
        }
        ProblemKind::HeatInverse => Ok(Box::new(HeatInverseProblem)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Plain;

    const NU: f64 = 0.01 / PI;

    fn plain() -> Plain<f64> {
        Plain::new()
    }

    #[test]
    fn manufactured_burgers_residual_matches_hand_formula() {
        let mut alg = plain();
        for i in 0..10 {
            for j in 0..5 {
                let x = -0.95 + 0.21 * i as f64;
                let t = 0.2 * j as f64;
                let jets = FieldOracle::BurgersManufactured.jets([x, t]);
                let r = burgers_residual(&mut alg, &jets, NU).unwrap();
                let u = (-t).exp() * (PI * x).sin();
                let u_x = PI * (-t).exp() * (PI * x).cos();
                let hand = -u + u * u_x + NU * PI * PI * u;
                assert!((r - hand).abs() < 1e-12, "({x}, {t}): {r} vs {hand}");
            }
        }
    }

    #[test]
    fn steady_and_linear_profiles_have_simple_residuals() {
        let mut alg = plain();
        let mut jets = FieldJets::new();
        jets.insert("u", vec![0, 1], Jet2::new(3.25, vec![Some(0.0), Some(0.0)], vec![Some(0.0), None]));
        assert_eq!(burgers_residual(&mut alg, &jets, NU).unwrap(), 0.0);

        for &x in &[-0.5, 0.25, 2.0] {
            let mut jets = FieldJets::new();
            jets.insert("u", vec![0, 1], Jet2::new(x, vec![Some(1.0), Some(0.0)], vec![Some(0.0), None]));
            assert_eq!(burgers_residual(&mut alg, &jets, NU).unwrap(), x);
        }
    }

    #[test]
    fn flux_values_at_simple_profiles() {
        let mut alg = plain();
        let mut jets = FieldJets::new();
        jets.insert("u", vec![0], Jet2::new(0.0, vec![Some(0.0)], vec![None]));
        assert_eq!(burgers_flux(&mut alg, &jets, NU).unwrap(), 0.0);

        let mut jets = FieldJets::new();
        jets.insert("u", vec![0], Jet2::new(2.0, vec![Some(0.0)], vec![None]));
        assert_eq!(burgers_flux(&mut alg, &jets, NU).unwrap(), 2.0);

        let p = [0.3, 0.4];
        let jets = FieldOracle::BurgersManufactured.jets(p);
        let f = burgers_flux(&mut alg, &jets, NU).unwrap();
        let u = (-p[1]).exp() * (PI * p[0]).sin();
        let u_x = PI * (-p[1]).exp() * (PI * p[0]).cos();
        assert!((f - (0.5 * u * u - NU * u_x)).abs() < 1e-15);
    }

    #[test]
    fn burgers_flux_is_consistent_with_the_residual() {
        let mut alg = plain();
        let h = 1e-4;
        for &(x, t) in &[(0.3, 0.5), (-0.4, 0.2), (0.1, 0.9)] {
            let fp =
                burgers_flux(&mut alg, &FieldOracle::BurgersManufactured.jets([x + h, t]), NU).unwrap();
            let fm =
                burgers_flux(&mut alg, &FieldOracle::BurgersManufactured.jets([x - h, t]), NU).unwrap();
            let jets = FieldOracle::BurgersManufactured.jets([x, t]);
            let r = burgers_residual(&mut alg, &jets, NU).unwrap();
            let u_t = jets.d1("u", 1).unwrap();
            let gap = (fp - fm) / (2.0 * h) - (r - u_t);
            assert!(gap.abs() < 1e-6, "({x}, {t}): {gap}");
        }
    }

    #[test]
    fn kovasznay_satisfies_the_steady_equations() {
        let mut alg = plain();
        let flow = Kovasznay::new(40.0).unwrap();
        assert!((flow.lambda() - (20.0 - (400.0 + 4.0 * PI * PI).sqrt())).abs() < 1e-12);
        for i in 0..10 {
            for j in 0..10 {
                let p = [-0.5 + 1.5 * i as f64 / 9.0, -0.5 + 2.0 * j as f64 / 9.0];
                let jets = flow.jets(p);
                let r = ns_residuals(&mut alg, &jets, 40.0).unwrap();
                assert!(r.x_momentum.abs() < 1e-9, "x-momentum {} at {p:?}", r.x_momentum);
                assert!(r.y_momentum.abs() < 1e-9, "y-momentum {} at {p:?}", r.y_momentum);
                assert!(r.mass.abs() < 1e-12, "mass {} at {p:?}", r.mass);
            }
        }
        let (u, _, _) = flow.velocity_pressure([0.0, 0.5]);
        assert!((u - 2.0).abs() < 1e-15); // 1 - e^0 cos(pi) = 2
    }

    #[test]
    fn frame_aligned_fluxes_reduce_to_single_columns() {
        let mut alg = plain();
        let re = 40.0;
        let inv_re = 1.0 / re;
        for &p in &[[0.2, 0.3], [-0.4, 1.1], [0.9, -0.2]] {
            let jets = FieldOracle::NsSolenoidal.jets(p);
            let fx = ns_fluxes(&mut alg, &jets, re, [1.0, 0.0]).unwrap();
            let fy = ns_fluxes(&mut alg, &jets, re, [0.0, 1.0]).unwrap();
            let (u, v) = (jets.value("u").unwrap(), jets.value("v").unwrap());
            let pr = jets.value("p").unwrap();
            let (u_x, u_y) = (jets.d1("u", 0).unwrap(), jets.d1("u", 1).unwrap());
            let (v_x, v_y) = (jets.d1("v", 0).unwrap(), jets.d1("v", 1).unwrap());
            assert_eq!(fx.x_momentum, (u * u + pr) - u_x * inv_re);
            assert_eq!(fx.y_momentum, (u * v) - v_x * inv_re);
            assert_eq!(fx.mass, u);
            assert_eq!(fy.x_momentum, (u * v) - u_y * inv_re);
            assert_eq!(fy.y_momentum, (v * v + pr) - v_y * inv_re);
            assert_eq!(fy.mass, v);
        }
    }

    #[test]
    fn solenoidal_flux_divergence_matches_momentum_residuals() {
        let mut alg = plain();
        let re = 10.0;
        let h = 1e-4;
        let at = |alg: &mut Plain<f64>, q: Point, n: Point| {
            ns_fluxes(alg, &FieldOracle::NsSolenoidal.jets(q), re, n).unwrap()
        };
        for &p in &[[0.4, 0.8], [-0.3, 0.2]] {
            let r = ns_residuals(&mut alg, &FieldOracle::NsSolenoidal.jets(p), re).unwrap();
            assert_eq!(r.mass, 0.0);
            let xp = at(&mut alg, [p[0] + h, p[1]], [1.0, 0.0]);
            let xm = at(&mut alg, [p[0] - h, p[1]], [1.0, 0.0]);
            let yp = at(&mut alg, [p[0], p[1] + h], [0.0, 1.0]);
            let ym = at(&mut alg, [p[0], p[1] - h], [0.0, 1.0]);
            let div_x = (xp.x_momentum - xm.x_momentum) / (2.0 * h)
                + (yp.x_momentum - ym.x_momentum) / (2.0 * h);
            let div_y = (xp.y_momentum - xm.y_momentum) / (2.0 * h)
                + (yp.y_momentum - ym.y_momentum) / (2.0 * h);
            assert!((div_x - r.x_momentum).abs() < 1e-6, "{p:?}");
            assert!((div_y - r.y_momentum).abs() < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn conduction_oracle_satisfies_the_equation() {
        let mut alg = plain();
        for i in 0..12 {
            for j in 0..8 {
                let p = [2.0 * PI * i as f64 / 11.0, 10.0 * j as f64 / 7.0];
                let jets = FieldOracle::HeatExact.jets(p);
                let r = heat_residual(&mut alg, &jets, p).unwrap();
                assert!(r.abs() < 1e-10, "residual {r} at {p:?}");
            }
        }
    }

    #[test]
    fn simple_conduction_profiles() {
        let mut alg = plain();
        // K = 1, T = x^2: div(K grad T) = 2 exactly.
        for &p in &[[0.5, 1.0], [3.0, 7.5]] {
            let mut jets = FieldJets::new();
            jets.insert(
                "T",
                vec![0, 1],
                Jet2::new(p[0] * p[0], vec![Some(2.0 * p[0]), Some(0.0)], vec![Some(2.0), Some(0.0)]),
            );
            jets.insert("K", vec![0, 1], Jet2::new(1.0, vec![Some(0.0), Some(0.0)], vec![None, None]));
            let r = heat_residual(&mut alg, &jets, p).unwrap();
            assert_eq!(r, 2.0 - heat_forcing(p));
        }
        assert_eq!(heat_exact_t([0.0, 0.0]), 20.0);
        assert_eq!(heat_exact_k([0.0, 0.0]), 20.0);
        assert!((heat_exact_k([PI, 0.0]) - 21.0).abs() < 1e-15);
        assert_eq!(heat_forcing([3.0, 0.0]), 4.0);
    }

    #[test]
    fn conductive_flux_divergence_recovers_the_source() {
        let mut alg = plain();
        let h = 1e-4;
        let at = |alg: &mut Plain<f64>, q: Point, n: Point| {
            heat_flux(alg, &FieldOracle::HeatExact.jets(q), n).unwrap()
        };
        for &p in &[[1.0, 2.0], [4.0, 6.0]] {
            let div = (at(&mut alg, [p[0] + h, p[1]], [1.0, 0.0])
                - at(&mut alg, [p[0] - h, p[1]], [1.0, 0.0]))
                / (2.0 * h)
                + (at(&mut alg, [p[0], p[1] + h], [0.0, 1.0])
                    - at(&mut alg, [p[0], p[1] - h], [0.0, 1.0]))
                    / (2.0 * h);
            assert!((div - heat_forcing(p)).abs() < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn flux_payloads_need_fewer_derivatives_than_residual_payloads() {
        let mut alg = plain();
        let jets = FieldOracle::NsSolenoidal.jets([0.3, 0.7]);

        ns_mass_residual(&mut alg, &jets).unwrap();
        assert_eq!(jets.counts(), EvalCounts { value: 0, first: 2, second: 0 });
        assert_eq!(jets.counts().total_derivatives(), 2);

        jets.reset_counts();
        ns_mass_flux(&mut alg, &jets, [1.0, 0.0]).unwrap();
        assert_eq!(jets.counts(), EvalCounts { value: 2, first: 0, second: 0 });
        assert_eq!(jets.counts().total_derivatives(), 0);

        jets.reset_counts();
        ns_residuals(&mut alg, &jets, 40.0).unwrap();
        let residual_work = jets.counts();
        jets.reset_counts();
        ns_fluxes(&mut alg, &jets, 40.0, [0.0, 1.0]).unwrap();
        let flux_work = jets.counts();
        assert_eq!(residual_work, EvalCounts { value: 2, first: 6, second: 4 });
        assert_eq!(flux_work, EvalCounts { value: 3, first: 4, second: 0 });
        assert!(residual_work.total_derivatives() > flux_work.total_derivatives());
    }

    #[test]
    fn missing_fields_and_derivatives_are_named() {
        let mut alg = plain();
        let jets = FieldOracle::NsSolenoidal.jets([0.1, 0.2]);
        let err = jets.d2("p", 0).unwrap_err().to_string();
        assert!(err.contains("of p along dim 0"), "{err}");
        let err = jets.d1("u", 5).unwrap_err().to_string();
        assert!(err.contains("dim 5"), "{err}");
        let err = jets.value("q").unwrap_err().to_string();
        assert!(err.contains("no field named q"), "{err}");
        // An operator surfaces the same failure: the residual needs dim 1.
        let mut partial = FieldJets::new();
        partial.insert("u", vec![0], Jet2::new(1.0, vec![Some(1.0)], vec![Some(0.0)]));
        assert!(burgers_residual(&mut alg, &partial, NU).is_err());
    }

    #[test]
    fn oblique_or_scaled_normals_are_rejected() {
        let mut alg = plain();
        let jets = FieldOracle::NsSolenoidal.jets([0.0, 0.0]);
        assert!(ns_fluxes(&mut alg, &jets, 40.0, [1.0, 1.0]).is_err());
        assert!(ns_mass_flux(&mut alg, &jets, [0.5, 0.0]).is_err());
        let hj = FieldOracle::HeatExact.jets([1.0, 1.0]);
        assert!(heat_flux(&mut alg, &hj, [2.0, 0.0]).is_err());
        let s = 0.5f64.sqrt();
        assert!(ns_fluxes(&mut alg, &jets, 40.0, [s, s]).is_ok()); // oblique unit normals are fine
    }

    #[test]
    fn registry_builds_each_problem_by_name() {
        let domain = Domain::new([-1.0, 0.0], [1.0, 1.0]).unwrap();
        let b = make_problem::<f64>(&ProblemKind::Burgers { nu: NU }, &domain).unwrap();
        assert_eq!(b.name(), "burgers");
        assert_eq!(b.nets().len(), 1);
        assert_eq!(b.nets()[0].fields, ["u"]);
        assert_eq!(b.residual_dims()[0].tracked, [0, 1]);
        assert_eq!(b.residual_dims()[0].second, [0]);
        assert_eq!(b.flux_dims()[0].tracked, [0]);
        assert_eq!(b.continuity_fields(), ["u"]);
        let e = b.exact([0.25, 0.0]).unwrap();
        assert_eq!(e[0].0, "u");
        assert!((e[0].1 + (PI * 0.25).sin()).abs() < 1e-12);

        let square = Domain::new([0.0, 0.0], [1.0, 1.0]).unwrap();
        let ns = make_problem::<f64>(&ProblemKind::NavierStokes { re: 100.0 }, &square).unwrap();
        assert_eq!(ns.name(), "navier-stokes");
        assert_eq!(ns.nets()[0].fields, ["u", "v", "p"]);
        assert_eq!(ns.residual_dims()[0].second, [0, 1]);
        assert!(ns.exact([0.5, 0.5]).is_err());

        let strip = Domain::new([0.0, 0.0], [2.0 * PI, 10.0]).unwrap();
        let heat = make_problem::<f64>(&ProblemKind::HeatInverse, &strip).unwrap();
        assert_eq!(heat.name(), "heat-inverse");
        assert_eq!(heat.nets().len(), 2);
        assert_eq!(heat.continuity_fields(), ["T", "K"]);
        assert_eq!(heat.flux_dims()[1].tracked.len(), 0);
        let e = heat.exact([PI, 5.0]).unwrap();
        assert_eq!(e[0], ("T", heat_exact_t([PI, 5.0])));
        assert_eq!(e[1], ("K", heat_exact_k([PI, 5.0])));
    }

    #[test]
    fn measurement_sources_follow_each_problem_story() {
        let domain = Domain::new([-1.0, 0.0], [1.0, 1.0]).unwrap();
        let b = make_problem::<f64>(&ProblemKind::Burgers { nu: NU }, &domain).unwrap();
        assert_eq!(b.boundary_values([0.5, 0.0]), vec![("u", -(PI * 0.5).sin())]);
        assert_eq!(b.boundary_values([-1.0, 0.5]), vec![("u", 0.0)]);
        assert_eq!(b.boundary_values([1.0, 0.5]), vec![("u", 0.0)]);
        assert!(b.boundary_values([0.5, 1.0]).is_empty());
        assert!(b.interior_values([0.0, 0.5]).is_empty());

        let square = Domain::new([0.0, 0.0], [1.0, 1.0]).unwrap();
        let ns = make_problem::<f64>(&ProblemKind::NavierStokes { re: 100.0 }, &square).unwrap();
        assert_eq!(ns.boundary_values([0.3, 1.0]), vec![("u", 1.0), ("v", 0.0)]);
        assert_eq!(ns.boundary_values([0.3, 0.0]), vec![("u", 0.0), ("v", 0.0)]);
        assert_eq!(ns.boundary_values([0.0, 0.4]), vec![("u", 0.0), ("v", 0.0)]);

        let strip = Domain::new([0.0, 0.0], [2.0 * PI, 10.0]).unwrap();
        let heat = make_problem::<f64>(&ProblemKind::HeatInverse, &strip).unwrap();
        assert_eq!(heat.boundary_values([1.0, 0.0]), vec![("K", heat_exact_k([1.0, 0.0]))]);
        assert_eq!(heat.interior_values([2.0, 3.0]), vec![("T", heat_exact_t([2.0, 3.0]))]);
    }

    #[test]
    fn operators_run_identically_on_the_tape() {
        let p = [0.35, 0.6];
        let oracle = FieldOracle::BurgersManufactured.jets(p);
        let mut plain_alg = plain();
        let want = burgers_residual(&mut plain_alg, &oracle, NU).unwrap();
        let want_flux = burgers_flux(&mut plain_alg, &oracle, NU).unwrap();

        let mut g: Graph<f64> = Graph::new();
        let u = g.leaf(oracle.value("u").unwrap());
        let u_x = g.leaf(oracle.d1("u", 0).unwrap());
        let u_t = g.leaf(oracle.d1("u", 1).unwrap());
        let u_xx = g.leaf(oracle.d2("u", 0).unwrap());
        let mut jets = FieldJets::new();
        jets.insert("u", vec![0, 1], Jet2::new(u, vec![Some(u_x), Some(u_t)], vec![Some(u_xx), None]));

        let domain = Domain::new([-1.0, 0.0], [1.0, 1.0]).unwrap();
        let problem = make_problem::<f64>(&ProblemKind::Burgers { nu: NU }, &domain).unwrap();
        let r = problem.residuals(&mut g, &jets, p).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(g.value(r[0]), want);

        let mut fj = FieldJets::new();
        fj.insert("u", vec![0], Jet2::new(u, vec![Some(u_x)], vec![None]));
        assert!(problem.fluxes(&mut g, &fj, [0.0, 1.0]).is_err()); // cut along the time axis
        let f = problem.fluxes(&mut g, &fj, [1.0, 0.0]).unwrap();
        assert_eq!(g.value(f[0]), want_flux);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let domain = Domain::new([-1.0, 0.0], [1.0, 1.0]).unwrap();
        assert!(ProblemKind::Burgers { nu: 0.0 }.validate().is_err());
        assert!(ProblemKind::NavierStokes { re: -1.0 }.validate().is_err());
        assert!(ProblemKind::HeatInverse.validate().is_ok());
        assert!(make_problem::<f64>(&ProblemKind::Burgers { nu: -0.1 }, &domain).is_err());
        assert!(Kovasznay::new(0.0).is_err());
        // Burgers wall/initial data assume the clock starts at zero.
        let shifted = Domain::new([-1.0, 0.5], [1.0, 1.5]).unwrap();
        assert!(make_problem::<f64>(&ProblemKind::Burgers { nu: NU }, &shifted).is_err());
        let mut alg = plain();
        let jets = FieldOracle::NsSolenoidal.jets([0.0, 0.0]);
        assert!(ns_residuals(&mut alg, &jets, 0.0).is_err());
    }

    #[test]
    fn kinds_round_trip_through_their_registry_names() {
        let kinds = [
            ProblemKind::Burgers { nu: NU },
            ProblemKind::NavierStokes { re: 40.0 },
            ProblemKind::HeatInverse,
        ];
        for kind in &kinds {
            let text = serde_json::to_string(kind).unwrap();
            assert!(text.contains(&format!("\"name\":\"{}\"", kind.label())), "{text}");
            let back: ProblemKind = serde_json::from_str(&text).unwrap();
            assert_eq!(&back, kind);
        }
    }
}
