//! Distributed training: one worker per subdomain, per-network Adam over a
//! persistent tape, one interface exchange per epoch, and stitched
//! evaluation of the trained result.
//!
//! Every epoch plays the same seven beats on every worker: rebuild interface
//! jets, read payloads off the tape, send, post receives, wait, assemble the
//! loss gradient, step the optimizer. The tape keeps its parameter leaves
//! for the whole run; everything above them is truncated and rebuilt each
//! step, so per-point loss terms stream through one reusable adjoint buffer
//! instead of accumulating into a giant graph.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::autodiff::{Graph, Var};
use crate::geometry::{
    derive_seed, sample_points, DataSource, Decomposition, EdgeOwners, InterfaceSpec, Point,
    SampleCounts, Strategy, SubdomainSpec,
};
use crate::losses::{make_method, mse_data, stitch, LossBreakdown, LossWeights, Method};
use crate::network::{
    forward, forward_jet_on, forward_on, register_params, ArchitectureSpec, NetworkParams,
};
use crate::pde::{make_problem, FieldJets, JetDims, Problem, ProblemKind};
use crate::real::Real;
use crate::transport::{
    Counters, Envelope, Expect, Hub, PayloadKind, SocketTransport, Transport,
};
use crate::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter Adam moments with bias correction (0.9 / 0.999 / 1e-8).
pub struct AdamState<F: Real> {
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![F::zero(); n], v: vec![F::zero(); n], t: 0 }
    }

    /// One in-place update. A non-finite gradient or updated parameter is
    /// reported with its index instead of silently propagating.
    pub fn step(&mut self, params: &mut [F], grad: &[F], lr: f64) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1 = F::of(BETA1);
        let b2 = F::of(BETA2);
        let c1 = F::of(1.0 - BETA1.powi(self.t.min(i32::MAX as u64) as i32));
        let c2 = F::of(1.0 - BETA2.powi(self.t.min(i32::MAX as u64) as i32));
        let rate = F::of(lr);
        let eps = F::of(ADAM_EPS);
        for i in 0..params.len() {
            let g = grad[i];
            if !g.is_finite() {
                return Err(Error::NonFinite { what: "gradient", index: i });
            }
            self.m[i] = b1 * self.m[i] + (F::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (F::one() - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] = params[i] - rate * mh / (vh.sqrt() + eps);
            if !params[i].is_finite() {
                return Err(Error::NonFinite { what: "parameter", index: i });
            }
        }
        Ok(())
    }
}

/// Optimizer and schedule knobs shared by every worker of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper {
    pub lr: f64,
    pub epochs: u64,
    /// Optimizer steps per exchange; traces received at the start of an
    /// epoch stay fixed across them.
    pub inner_steps: u64,
    /// Residual points per step, cycled in order; `None` uses the full set
    /// every step.
    pub minibatch: Option<usize>,
    /// Master seed; sampling and initialization draw from disjoint streams.
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper { lr: 1e-3, epochs: 1000, inner_steps: 1, minibatch: None, seed: 0 }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::validation(
                "lr",
                format!("must be positive and finite, got {}", self.lr),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs", "must be at least 1"));
        }
        if self.inner_steps == 0 {
            return Err(Error::validation("inner_steps", "must be at least 1"));
        }
        if self.minibatch == Some(0) {
            return Err(Error::validation("minibatch", "must be at least 1 point when set"));
        }
        Ok(())
    }
}

/// Seed stream for sampling one rank's point clouds.
pub fn sample_seed(master: u64, rank: u32) -> u64 {
    derive_seed(derive_seed(master, 1), rank as u64)
}

/// Seed stream for initializing net `net` on one rank.
pub fn net_seed(master: u64, rank: u32, net: usize) -> u64 {
    derive_seed(derive_seed(derive_seed(master, 2), rank as u64), net as u64)
}

/// The subdomain architecture with its output layer resized for one role.
fn role_arch(base: &ArchitectureSpec, n_fields: usize) -> ArchitectureSpec {
    let mut widths = base.widths.clone();
    if let Some(last) = widths.last_mut() {
        *last = n_fields;
    }
    ArchitectureSpec::new(widths, base.activation, base.scaling)
}

/// Freshly seeded networks for one subdomain, one per problem role.
pub fn init_nets<F: Real>(
    spec: &SubdomainSpec,
    problem: &dyn Problem<F>,
    master: u64,
) -> Result<Vec<NetworkParams<F>>> {
    problem
        .nets()
        .iter()
        .enumerate()
        .map(|(k, role)| {
            NetworkParams::init(
                role_arch(&spec.arch, role.fields.len()),
                net_seed(master, spec.rank, k),
            )
        })
        .collect()
}

/// Lets a problem stand in as the data source while points are sampled.
struct SourceOf<'a, F: Real>(&'a dyn Problem<F>);

impl<F: Real> DataSource for SourceOf<'_, F> {
    fn boundary_values(&self, p: Point) -> Vec<(&'static str, f64)> {
        self.0.boundary_values(p)
    }
    fn interior_values(&self, p: Point) -> Vec<(&'static str, f64)> {
        self.0.interior_values(p)
    }
}

/// Populates every subdomain's point clouds and data targets in place, each
/// rank on its own seed stream.
pub fn sample_decomposition<F: Real>(
    d: &mut Decomposition,
    kind: &ProblemKind,
    counts: &SampleCounts,
    strategy: Strategy,
    master: u64,
) -> Result<()> {
    let problem = make_problem::<F>(kind, &d.domain)?;
    for spec in &mut d.subdomains {
        let seed = sample_seed(master, spec.rank);
        sample_points(spec, counts, seed, strategy, &SourceOf(problem.as_ref()))?;
    }
    Ok(())
}

/// Received payloads for the current epoch, keyed by (edge, kind).
pub type ReceivedMap = BTreeMap<(u32, PayloadKind), Vec<f64>>;

fn field_table<F: Real>(problem: &dyn Problem<F>) -> BTreeMap<&'static str, (usize, usize)> {
    let mut map = BTreeMap::new();
    for (k, role) in problem.nets().iter().enumerate() {
        for (j, f) in role.fields.iter().enumerate() {
            map.insert(*f, (k, j));
        }
    }
    map
}

struct DataPlan {
    net: usize,
    out: usize,
    points: Vec<Point>,
    targets: Vec<f64>,
}

/// Tape handles for one interface after a rebuild: solution traces and
/// coupling terms per point, in the shared point order.
struct EdgeVals {
    edge: u32,
    neighbor: u32,
    n_pts: usize,
    sol_pts: Vec<Vec<Var>>,
    jump_pts: Vec<Vec<Var>>,
}

/// One step's interface segment: everything on the tape between the
/// parameter leaves and the streamed per-point terms.
pub struct IfaceSegment {
    i_end: usize,
    n_comp: usize,
    per_edge: Vec<EdgeVals>,
}

/// The training tape for one subdomain. Parameter leaves stay live for the
/// whole run; interface jets and per-point loss segments are rebuilt above
/// them every step and swept through one reusable adjoint buffer.
pub struct Engine<F: Real> {
    g: Graph<F>,
    params: Vec<Vec<Var>>,
    arches: Vec<ArchitectureSpec>,
    p_end: usize,
    adj: Vec<F>,
    weights: LossWeights,
    interfaces: Vec<InterfaceSpec>,
    data: Vec<DataPlan>,
    continuity: Vec<&'static str>,
    n_iface_points: usize,
}

impl<F: Real> Engine<F> {
    pub fn new(
        spec: &SubdomainSpec,
        problem: &dyn Problem<F>,
        nets: &[NetworkParams<F>],
    ) -> Result<Self> {
        let roles = problem.nets();
        if nets.len() != roles.len() {
            return Err(Error::rejected(format!(
                "problem {} trains {} nets per subdomain, got {}",
                problem.name(),
                roles.len(),
                nets.len()
            )));
        }
        for (net, role) in nets.iter().zip(roles) {
            net.spec.validate()?;
            if net.spec.output_width() != role.fields.len() {
                return Err(Error::rejected(format!(
                    "net {} outputs {} values but role {:?} has {} fields",
                    role.name,
                    net.spec.output_width(),
                    role.name,
                    role.fields.len()
                )));
            }
        }
        let table = field_table(problem);
        let mut continuity = Vec::new();
        for f in problem.continuity_fields() {
            if !table.contains_key(f) {
                return Err(Error::rejected(format!(
                    "continuity field {f:?} is not produced by any net"
                )));
            }
            continuity.push(*f);
        }
        let mut data = Vec::new();
        for set in &spec.data {
            let &(net, out) = table.get(set.field.as_str()).ok_or_else(|| {
                Error::validation(
                    "data",
                    format!("problem {} has no field named {:?}", problem.name(), set.field),
                )
            })?;
            if set.points.len() != set.values.len() {
                return Err(Error::rejected(format!(
                    "dataset {:?} has {} points but {} values",
                    set.field,
                    set.points.len(),
                    set.values.len()
                )));
            }
            if set.points.is_empty() {
                continue;
            }
            data.push(DataPlan {
                net,
                out,
                points: set.points.clone(),
                targets: set.values.clone(),
            });
        }
        for iface in &spec.interfaces {
            if iface.points.is_empty() {
                return Err(Error::rejected(format!(
                    "interface on edge {} has no points; sample before training",
                    iface.edge
                )));
            }
        }

        let mut g = Graph::new();
        let params: Vec<Vec<Var>> = nets.iter().map(|n| register_params(&mut g, n)).collect();
        let p_end = g.len();
        Ok(Engine {
            g,
            params,
            arches: nets.iter().map(|n| n.spec.clone()).collect(),
            p_end,
            adj: Vec::new(),
            weights: spec.weights,
            interfaces: spec.interfaces.clone(),
            data,
            continuity,
            n_iface_points: spec.interfaces.iter().map(|i| i.points.len()).sum(),
        })
    }

    fn ensure_adj(&mut self) {
        let n = self.g.len();
        if self.adj.len() < n {
            self.adj.resize(n, F::zero());
        } else {
            self.adj.truncate(n);
        }
    }

    /// Truncates the tape back to the parameter leaves and rebuilds the
    /// interface jets and coupling terms. Empty when the method exchanges
    /// nothing or the subdomain has no interfaces.
    pub fn build_interfaces(
        &mut self,
        problem: &dyn Problem<F>,
        method: &dyn Method<F>,
    ) -> Result<IfaceSegment> {
        self.g.truncate(self.p_end);
        let mut per_edge = Vec::new();
        let mut n_comp = 0usize;
        if !method.exchanges().is_empty() && !self.interfaces.is_empty() {
            let dims = method.interface_dims(problem);
            for iface in &self.interfaces {
                let n_pts = iface.points.len();
                let mut sol_pts = Vec::with_capacity(n_pts);
                let mut jump_pts = Vec::with_capacity(n_pts);
                for &p in &iface.points {
                    let jets =
                        build_jets(&mut self.g, problem, &self.params, &self.arches, dims, p)?;
                    let mut sol = Vec::with_capacity(self.continuity.len());
                    for f in &self.continuity {
                        sol.push(jets.value(f)?);
                    }
                    let terms =
                        method.coupling_terms(problem, &mut self.g, &jets, p, iface.normal)?;
                    if per_edge.is_empty() && jump_pts.is_empty() {
                        n_comp = terms.len();
                    } else if terms.len() != n_comp {
                        return Err(Error::rejected(format!(
                            "coupling term count changed from {n_comp} to {} between points",
                            terms.len()
                        )));
                    }
                    sol_pts.push(sol);
                    jump_pts.push(terms);
                }
                per_edge.push(EdgeVals {
                    edge: iface.edge,
                    neighbor: iface.neighbor,
                    n_pts,
                    sol_pts,
                    jump_pts,
                });
            }
        }
        Ok(IfaceSegment { i_end: self.g.len(), n_comp, per_edge })
    }

    /// Reads the outgoing payloads off the tape: field-major solution
    /// traces, component-major coupling terms, one envelope body per
    /// interface per kind.
    pub fn payloads(
        &self,
        seg: &IfaceSegment,
        kinds: &'static [PayloadKind],
    ) -> Vec<(u32, u32, PayloadKind, Vec<f64>)> {
        let mut out = Vec::new();
        for ev in &seg.per_edge {
            for &kind in kinds {
                let vals = match kind {
                    PayloadKind::Solution => {
                        let mut v = Vec::with_capacity(self.continuity.len() * ev.n_pts);
                        for f in 0..self.continuity.len() {
                            for i in 0..ev.n_pts {
                                v.push(self.g.value(ev.sol_pts[i][f]).f64());
                            }
                        }
                        v
                    }
                    _ => {
                        let mut v = Vec::with_capacity(seg.n_comp * ev.n_pts);
                        for c in 0..seg.n_comp {
                            for i in 0..ev.n_pts {
                                v.push(self.g.value(ev.jump_pts[i][c]).f64());
                            }
                        }
                        v
                    }
                };
                out.push((ev.edge, ev.neighbor, kind, vals));
            }
        }
        out
    }

    /// Streams residual and data terms through per-point tape segments,
    /// accumulating weighted parameter adjoints. Returns the unweighted
    /// component means.
    fn stream_points(&mut self, problem: &dyn Problem<F>, batch: &[Point]) -> Result<(f64, f64)> {
        let i_end = self.g.len();
        let mut res_sq = 0.0;
        if !batch.is_empty() {
            let dims = problem.residual_dims();
            let w_res = self.weights.residual;
            let inv_n = 1.0 / batch.len() as f64;
            for &p in batch {
                let jets =
                    build_jets(&mut self.g, problem, &self.params, &self.arches, dims, p)?;
                let terms = problem.residuals(&mut self.g, &jets, p)?;
                self.ensure_adj();
                let mut hi: Option<Var> = None;
                for &t in &terms {
                    let val = self.g.value(t).f64();
                    res_sq += val * val * inv_n;
                    self.adj[t.index()] += F::of(2.0 * w_res * val * inv_n);
                    if hi.map_or(true, |h| t.index() > h.index()) {
                        hi = Some(t);
                    }
                }
                if let Some(h) = hi {
                    self.g.sweep_range(h, F::zero(), i_end, &mut self.adj);
                }
                self.g.truncate(i_end);
                self.adj.truncate(i_end);
            }
        }
        let mut data_sq = 0.0;
        let w_data = self.weights.data;
        for plan in &self.data {
            let inv_n = 1.0 / plan.points.len() as f64;
            for (&p, &target) in plan.points.iter().zip(&plan.targets) {
                let outs =
                    forward_on(&mut self.g, &self.arches[plan.net], &self.params[plan.net], &p)?;
                let v = outs[plan.out];
                let d = self.g.value(v).f64() - target;
                data_sq += d * d * inv_n;
                let n = self.g.len();
                if self.adj.len() < n {
                    self.adj.resize(n, F::zero());
                }
                self.adj[v.index()] += F::of(2.0 * w_data * d * inv_n);
                self.g.sweep_range(v, F::zero(), i_end, &mut self.adj);
                self.g.truncate(i_end);
                self.adj.truncate(i_end);
            }
        }
        Ok((res_sq, data_sq))
    }

    /// Seeds the interface penalties on the shared jet segment and sweeps
    /// everything down to the parameters in one pass. Returns the
    /// unweighted component means.
    fn interface_terms(
        &mut self,
        seg: &IfaceSegment,
        kinds: &'static [PayloadKind],
        received: &ReceivedMap,
        jump_w: f64,
        epoch: u64,
    ) -> Result<(f64, f64)> {
        if seg.per_edge.is_empty() {
            return Ok((0.0, 0.0));
        }
        debug_assert_eq!(self.g.len(), seg.i_end);
        self.ensure_adj();
        let n = self.n_iface_points as f64;
        let w_avg = self.weights.interface_avg;
        let n_fields = self.continuity.len();
        let jump_kind = kinds.get(1).copied();
        let mut avg_sq = 0.0;
        let mut jump_sq = 0.0;
        for ev in &seg.per_edge {
            let sol = fetch(received, ev.edge, PayloadKind::Solution, n_fields * ev.n_pts, epoch)?;
            for i in 0..ev.n_pts {
                for f in 0..n_fields {
                    let var = ev.sol_pts[i][f];
                    let d = (self.g.value(var).f64() - sol[f * ev.n_pts + i]) * 0.5;
                    avg_sq += d * d / n;
                    self.adj[var.index()] += F::of(w_avg * d / n);
                }
            }
            if let Some(kind) = jump_kind {
                if seg.n_comp > 0 {
                    let recv = fetch(received, ev.edge, kind, seg.n_comp * ev.n_pts, epoch)?;
                    for i in 0..ev.n_pts {
                        for c in 0..seg.n_comp {
                            let var = ev.jump_pts[i][c];
                            let d = self.g.value(var).f64() - recv[c * ev.n_pts + i];
                            jump_sq += d * d / n;
                            self.adj[var.index()] += F::of(2.0 * jump_w * d / n);
                        }
                    }
                }
            }
        }
        self.g.sweep_all(self.p_end, &mut self.adj);
        Ok((avg_sq, jump_sq))
    }

    /// One Adam step per network from the accumulated adjoints; writes the
    /// new values back onto the tape and clears the buffer.
    fn apply(
        &mut self,
        nets: &mut [NetworkParams<F>],
        opt: &mut [AdamState<F>],
        lr: f64,
    ) -> Result<()> {
        if self.adj.len() < self.p_end {
            self.adj.resize(self.p_end, F::zero());
        }
        for (k, net) in nets.iter_mut().enumerate() {
            let start = self.params[k][0].index();
            let grad = &self.adj[start..start + net.data.len()];
            opt[k].step(&mut net.data, grad, lr)?;
            for (var, &v) in self.params[k].iter().zip(&net.data) {
                self.g.set_value(*var, v);
            }
        }
        for a in &mut self.adj {
            *a = F::zero();
        }
        Ok(())
    }

    /// The streamed gradient for fixed received traces: the exact code path
    /// training runs, minus the exchange. Adjoints are copied out, not
    /// applied.
    pub fn gradient(
        &mut self,
        problem: &dyn Problem<F>,
        method: &dyn Method<F>,
        received: &ReceivedMap,
        batch: &[Point],
    ) -> Result<GradReport<F>> {
        let seg = self.build_interfaces(problem, method)?;
        let (res, data) = self.stream_points(problem, batch)?;
        let jump_w = method.jump_weight(&self.weights);
        let (avg, jump) = self.interface_terms(&seg, method.exchanges(), received, jump_w, 0)?;
        if self.adj.len() < self.p_end {
            self.adj.resize(self.p_end, F::zero());
        }
        let grad = self.adj[1..self.p_end].to_vec();
        for a in &mut self.adj {
            *a = F::zero();
        }
        Ok(GradReport {
            grad,
            breakdown: LossBreakdown::assemble(&self.weights, jump_w, data, res, avg, jump),
        })
    }
}

fn build_jets<F: Real>(
    g: &mut Graph<F>,
    problem: &dyn Problem<F>,
    params: &[Vec<Var>],
    arches: &[ArchitectureSpec],
    dims: &[JetDims],
    p: Point,
) -> Result<FieldJets<Var>> {
    let mut jets = FieldJets::new();
    for (k, role) in problem.nets().iter().enumerate() {
        let jd = dims[k];
        let outs = forward_jet_on(g, &arches[k], &params[k], &p, jd.tracked, jd.second)?;
        for (j, out) in outs.into_iter().enumerate() {
            jets.insert(role.fields[j], jd.tracked.to_vec(), out);
        }
    }
    Ok(jets)
}

fn fetch<'m>(
    received: &'m ReceivedMap,
    edge: u32,
    kind: PayloadKind,
    want_len: usize,
    epoch: u64,
) -> Result<&'m [f64]> {
    let payload = received.get(&(edge, kind)).ok_or_else(|| Error::Protocol {
        epoch,
        edge,
        msg: format!("no {} payload received", kind.label()),
    })?;
    if payload.len() != want_len {
        return Err(Error::Protocol {
            epoch,
            edge,
            msg: format!(
                "{} payload has {} values, expected {want_len}",
                kind.label(),
                payload.len()
            ),
        });
    }
    if let Some(bad) = payload.iter().position(|v| !v.is_finite()) {
        return Err(Error::Protocol {
            epoch,
            edge,
            msg: format!("entry {bad} of the {} payload is not finite", kind.label()),
        });
    }
    Ok(payload)
}

/// A worker's streamed gradient (concatenated across nets in pack order)
/// and the unweighted loss components behind it.
#[derive(Debug)]
pub struct GradReport<F: Real> {
    pub grad: Vec<F>,
    pub breakdown: LossBreakdown,
}

/// Convenience wrapper: fresh engine, one gradient.
pub fn epoch_gradient<F: Real>(
    spec: &SubdomainSpec,
    problem: &dyn Problem<F>,
    method: &dyn Method<F>,
    nets: &[NetworkParams<F>],
    received: &ReceivedMap,
    batch: &[Point],
) -> Result<GradReport<F>> {
    Engine::new(spec, problem, nets)?.gradient(problem, method, received, batch)
}

/// The same loss built as one tape root, so a single `backward` yields the
/// reference gradient. Cross-checks the streaming path and anchors
/// finite-difference probes.
pub struct WholeLoss<F: Real> {
    pub value: f64,
    pub grad: Vec<F>,
    pub breakdown: LossBreakdown,
}

pub fn whole_loss<F: Real>(
    spec: &SubdomainSpec,
    problem: &dyn Problem<F>,
    method: &dyn Method<F>,
    nets: &[NetworkParams<F>],
    received: &ReceivedMap,
    batch: &[Point],
) -> Result<WholeLoss<F>> {
    let mut g: Graph<F> = Graph::new();
    let params: Vec<Vec<Var>> = nets.iter().map(|n| register_params(&mut g, n)).collect();
    let p_end = g.len();
    let arches: Vec<ArchitectureSpec> = nets.iter().map(|n| n.spec.clone()).collect();
    let table = field_table(problem);
    let zero = g.constant(F::zero());

    let mut data = zero;
    for set in &spec.data {
        if set.points.is_empty() {
            continue;
        }
        let &(k, j) = table.get(set.field.as_str()).ok_or_else(|| {
            Error::validation("data", format!("no field named {:?}", set.field))
        })?;
        let mut preds = Vec::with_capacity(set.points.len());
        for &p in &set.points {
            preds.push(forward_on(&mut g, &arches[k], &params[k], &p)?[j]);
        }
        let term = mse_data(&mut g, &preds, &set.values)?;
        data = g.add(data, term);
    }

    let mut residual = zero;
    if !batch.is_empty() {
        let dims = problem.residual_dims();
        let mut acc = zero;
        for &p in batch {
            let jets = build_jets(&mut g, problem, &params, &arches, dims, p)?;
            for r in problem.residuals(&mut g, &jets, p)? {
                acc = g.fma(r, r, acc);
            }
        }
        residual = g.scale(acc, F::of(1.0 / batch.len() as f64));
    }

    let mut avg = zero;
    let mut jump = zero;
    if !method.exchanges().is_empty() && !spec.interfaces.is_empty() {
        let dims = method.interface_dims(problem);
        let fields = problem.continuity_fields();
        let n_total: usize = spec.interfaces.iter().map(|i| i.points.len()).sum();
        let jump_kind = method.exchanges().get(1).copied();
        let mut acc_avg = zero;
        let mut acc_jump = zero;
        for iface in &spec.interfaces {
            let n_pts = iface.points.len();
            let sol_recv = fetch(received, iface.edge, PayloadKind::Solution, fields.len() * n_pts, 0)?;
            for (i, &p) in iface.points.iter().enumerate() {
                let jets = build_jets(&mut g, problem, &params, &arches, dims, p)?;
                for (f, name) in fields.iter().enumerate() {
                    let m = jets.value(name)?;
                    let c = g.constant(F::of(sol_recv[f * n_pts + i]));
                    let d0 = g.sub(m, c);
                    let d = g.scale(d0, F::of(0.5));
                    acc_avg = g.fma(d, d, acc_avg);
                }
                let terms = method.coupling_terms(problem, &mut g, &jets, p, iface.normal)?;
                if let Some(kind) = jump_kind {
                    let recv = fetch(received, iface.edge, kind, terms.len() * n_pts, 0)?;
                    for (c_idx, t) in terms.iter().enumerate() {
                        let c = g.constant(F::of(recv[c_idx * n_pts + i]));
                        let d = g.sub(*t, c);
                        acc_jump = g.fma(d, d, acc_jump);
                    }
                }
            }
        }
        let inv = F::of(1.0 / n_total as f64);
        avg = g.scale(acc_avg, inv);
        jump = g.scale(acc_jump, inv);
    }

    let w = &spec.weights;
    let jw = method.jump_weight(w);
    let mut total = g.scale(data, F::of(w.data));
    let t2 = g.scale(residual, F::of(w.residual));
    total = g.add(total, t2);
    let t3 = g.scale(avg, F::of(w.interface_avg));
    total = g.add(total, t3);
    let t4 = g.scale(jump, F::of(jw));
    total = g.add(total, t4);

    let breakdown = LossBreakdown::assemble(
        w,
        jw,
        g.value(data).f64(),
        g.value(residual).f64(),
        g.value(avg).f64(),
        g.value(jump).f64(),
    );
    let adjoints = g.backward(total)?;
    Ok(WholeLoss { value: g.value(total).f64(), grad: adjoints[1..p_end].to_vec(), breakdown })
}

/// Per-epoch instrumentation: the loss at exchange time plus wall time in
/// each phase.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpochRecord {
    pub epoch: u64,
    pub loss: LossBreakdown,
    pub compute_s: f64,
    pub comm_s: f64,
    pub barrier_s: f64,
}

/// Column header for the per-epoch loss logs.
pub const CSV_HEADER: &str = "epoch,mse_u,mse_F,mse_u_avg,mse_iface2,total,compute_s,comm_s,barrier_s";

pub fn csv_line(rec: &EpochRecord) -> String {
    format!(
        "{},{:e},{:e},{:e},{:e},{:e},{:.6},{:.6},{:.6}",
        rec.epoch,
        rec.loss.data,
        rec.loss.residual,
        rec.loss.interface_avg,
        rec.loss.interface_jump,
        rec.loss.total,
        rec.compute_s,
        rec.comm_s,
        rec.barrier_s
    )
}

/// Accumulated phase timings over a whole run.
#[derive(Clone, Copy, Debug, Default)]
pub struct TimingTotals {
    pub compute_s: f64,
    pub comm_s: f64,
    pub barrier_s: f64,
    pub wall_s: f64,
}

/// Result of one worker's full schedule.
pub struct TrainOutcome<F: Real> {
    pub rank: u32,
    pub nets: Vec<NetworkParams<F>>,
    pub final_loss: LossBreakdown,
    pub totals: TimingTotals,
    pub counters: Counters,
}

/// Everything one worker owns: its subdomain, problem and method
/// instances, networks, and schedule.
pub struct WorkerSetup<F: Real> {
    pub spec: SubdomainSpec,
    pub problem: Box<dyn Problem<F>>,
    pub method: Box<dyn Method<F>>,
    pub nets: Vec<NetworkParams<F>>,
    pub hyper: Hyper,
}

/// Builds the worker for one rank: problem and method instances plus
/// freshly seeded networks.
pub fn build_worker<F: Real>(
    d: &Decomposition,
    kind: &ProblemKind,
    method_name: &str,
    hyper: &Hyper,
    rank: u32,
) -> Result<WorkerSetup<F>> {
    hyper.validate()?;
    let spec = d.subdomains.get(rank as usize).ok_or_else(|| {
        Error::Startup(format!("rank {rank} out of range for {} subdomains", d.n_subdomains()))
    })?;
    let problem = make_problem::<F>(kind, &d.domain)?;
    let method = make_method::<F>(method_name)?;
    method.check(problem.as_ref(), d)?;
    let nets = init_nets(spec, problem.as_ref(), hyper.seed)?;
    Ok(WorkerSetup { spec: spec.clone(), problem, method, nets, hyper: *hyper })
}

pub fn build_workers<F: Real>(
    d: &Decomposition,
    kind: &ProblemKind,
    method_name: &str,
    hyper: &Hyper,
) -> Result<Vec<WorkerSetup<F>>> {
    (0..d.n_subdomains() as u32).map(|r| build_worker(d, kind, method_name, hyper, r)).collect()
}

fn batch_slice<'a>(
    points: &'a [Point],
    minibatch: Option<usize>,
    step: u64,
    scratch: &'a mut Vec<Point>,
) -> &'a [Point] {
    match minibatch {
        Some(m) if m < points.len() => {
            scratch.clear();
            let n = points.len();
            let start = (step as usize).wrapping_mul(m) % n;
            for i in 0..m {
                scratch.push(points[(start + i) % n]);
            }
            scratch
        }
        _ => points,
    }
}

/// Runs one worker's full schedule against a transport. `sink` sees every
/// epoch record, in order.
pub fn train_worker<F: Real>(
    setup: &mut WorkerSetup<F>,
    transport: &mut dyn Transport,
    mut sink: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome<F>> {
    let wall = Instant::now();
    setup.hyper.validate()?;
    let rank = setup.spec.rank;
    if rank != transport.rank() {
        return Err(Error::Startup(format!(
            "subdomain {rank} handed to transport rank {}",
            transport.rank()
        )));
    }
    let mut engine = Engine::new(&setup.spec, setup.problem.as_ref(), &setup.nets)?;
    let mut opt: Vec<AdamState<F>> =
        setup.nets.iter().map(|n| AdamState::new(n.data.len())).collect();
    let kinds = setup.method.exchanges();
    let active = !kinds.is_empty() && !setup.spec.interfaces.is_empty();
    let jump_w = setup.method.jump_weight(&setup.spec.weights);
    let hyper = setup.hyper;

    let mut totals = TimingTotals::default();
    let tic = Instant::now();
    transport.barrier()?;
    totals.barrier_s += tic.elapsed().as_secs_f64();

    let mut received = ReceivedMap::new();
    let mut scratch = Vec::new();
    let mut last = EpochRecord::default();
    for epoch in 0..hyper.epochs {
        let mut rec = EpochRecord { epoch, ..EpochRecord::default() };
        for inner in 0..hyper.inner_steps {
            let tic = Instant::now();
            let seg = engine.build_interfaces(setup.problem.as_ref(), setup.method.as_ref())?;
            let payloads =
                if active && inner == 0 { engine.payloads(&seg, kinds) } else { Vec::new() };
            rec.compute_s += tic.elapsed().as_secs_f64();

            if active && inner == 0 {
                let tic = Instant::now();
                for (edge, neighbor, kind, payload) in payloads {
                    transport.isend(neighbor, Envelope { epoch, edge, kind, sender: rank, payload })?;
                }
                for iface in &setup.spec.interfaces {
                    for &kind in kinds {
                        transport.irecv(Expect {
                            from: iface.neighbor,
                            epoch,
                            edge: iface.edge,
                            kind,
                        })?;
                    }
                }
                received.clear();
                for env in transport.wait_all()? {
                    received.insert((env.edge, env.kind), env.payload);
                }
                rec.comm_s += tic.elapsed().as_secs_f64();
            }

            let tic = Instant::now();
            let step = epoch * hyper.inner_steps + inner;
            let batch =
                batch_slice(&setup.spec.residual_points, hyper.minibatch, step, &mut scratch);
            let (res, data) = engine.stream_points(setup.problem.as_ref(), batch)?;
            let (avg, jump) = engine.interface_terms(&seg, kinds, &received, jump_w, epoch)?;
            if inner == 0 {
                rec.loss =
                    LossBreakdown::assemble(&setup.spec.weights, jump_w, data, res, avg, jump);
            }
            engine.apply(&mut setup.nets, &mut opt, hyper.lr)?;
            rec.compute_s += tic.elapsed().as_secs_f64();
        }
        totals.compute_s += rec.compute_s;
        totals.comm_s += rec.comm_s;
        totals.barrier_s += rec.barrier_s;
        sink(&rec)?;
        last = rec;
    }

    let tic = Instant::now();
    transport.barrier()?;
    totals.barrier_s += tic.elapsed().as_secs_f64();
    totals.wall_s = wall.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        rank,
        nets: setup.nets.clone(),
        final_loss: last.loss,
        totals,
        counters: transport.counters(),
    })
}

fn run_one<F: Real>(
    w: &mut WorkerSetup<F>,
    transport: &mut dyn Transport,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>> {
    let mut csv = match out_dir {
        Some(dir) => {
            let mut f =
                BufWriter::new(File::create(dir.join(format!("loss_rank{}.csv", w.spec.rank)))?);
            writeln!(f, "{CSV_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let out = train_worker(w, transport, |rec| {
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", csv_line(rec))?;
        }
        Ok(())
    })?;
    if let Some(mut f) = csv {
        f.flush()?;
    }
    Ok(out)
}

/// An in-process run's results: per-rank outcomes plus the hub's counters
/// for conservation checks.
pub struct RunReport<F: Real> {
    pub outcomes: Vec<TrainOutcome<F>>,
    pub stats: Vec<Counters>,
}

/// Trains every subdomain on its own thread over an in-process hub.
/// `fuzz_delay_us` adds adversarial delivery delays (testing only); CSV
/// logs land in `out_dir` when given.
pub fn train_in_process<F: Real + Send + Sync>(
    d: &Decomposition,
    kind: &ProblemKind,
    method: &str,
    hyper: &Hyper,
    fuzz_delay_us: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<RunReport<F>> {
    d.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let workers = build_workers::<F>(d, kind, method, hyper)?;
    let world = d.n_subdomains() as u32;
    let hub = match fuzz_delay_us {
        Some(us) => Hub::with_fuzz(world, us),
        None => Hub::new(world),
    };
    let mut outcomes: Vec<Option<TrainOutcome<F>>> = (0..world).map(|_| None).collect();
    let mut first_err: Option<Error> = None;
    std::thread::scope(|s| {
        let mut handles = Vec::new();
        for mut w in workers {
            let mut ep = hub.endpoint(w.spec.rank);
            handles.push(s.spawn(move || {
                let rank = w.spec.rank;
                run_one(&mut w, &mut ep, out_dir).map_err(|e| e.at_rank(rank as usize))
            }));
        }
        for h in handles {
            match h.join() {
                Ok(Ok(out)) => {
                    let r = out.rank as usize;
                    outcomes[r] = Some(out);
                }
                Ok(Err(e)) => {
                    if first_err.is_none() {
                        first_err = Some(e);
                    }
                }
                Err(_) => {
                    if first_err.is_none() {
                        first_err = Some(Error::Startup("a worker thread panicked".into()));
                    }
                }
            }
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok(RunReport {
        outcomes: outcomes.into_iter().map(|o| o.expect("all ranks reported")).collect(),
        stats: hub.stats(),
    })
}

/// Trains one rank of a multi-process run over TCP, meeting its peers at
/// the rank-0 rendezvous address.
pub fn train_socket<F: Real>(
    d: &Decomposition,
    kind: &ProblemKind,
    method: &str,
    hyper: &Hyper,
    rank: u32,
    rendezvous: &str,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>> {
    d.validate()?;
    let world = d.n_subdomains() as u32;
    if rank >= world {
        return Err(Error::Startup(format!("rank {rank} out of range for {world} subdomains")));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = build_worker::<F>(d, kind, method, hyper, rank)?;
    let mut tp = SocketTransport::connect(rank, world, rendezvous)?;
    run_one(&mut w, &mut tp, out_dir).map_err(|e| e.at_rank(rank as usize))
}

/// Stitched evaluation of a trained run: a field's value at a point is the
/// mean over every subdomain whose closure contains it.
pub struct Predictor<'a, F: Real> {
    decomposition: &'a Decomposition,
    nets: &'a [Vec<NetworkParams<F>>],
    table: BTreeMap<&'static str, (usize, usize)>,
    eps: f64,
}

impl<'a, F: Real> Predictor<'a, F> {
    pub fn new(
        decomposition: &'a Decomposition,
        problem: &dyn Problem<F>,
        nets: &'a [Vec<NetworkParams<F>>],
    ) -> Result<Self> {
        if nets.len() != decomposition.n_subdomains() {
            return Err(Error::rejected(format!(
                "{} net sets for {} subdomains",
                nets.len(),
                decomposition.n_subdomains()
            )));
        }
        let roles = problem.nets();
        for (r, set) in nets.iter().enumerate() {
            if set.len() != roles.len() {
                return Err(Error::rejected(format!(
                    "rank {r} carries {} nets, problem {} needs {}",
                    set.len(),
                    problem.name(),
                    roles.len()
                )));
            }
        }
        Ok(Predictor {
            decomposition,
            nets,
            table: field_table(problem),
            eps: decomposition.domain.diameter() * 1e-9,
        })
    }

    /// One rank's prediction of `field` at `p`.
    pub fn eval_rank(&self, rank: u32, field: &str, p: Point) -> Result<f64> {
        let &(k, j) = self
            .table
            .get(field)
            .ok_or_else(|| Error::rejected(format!("no field named {field:?}")))?;
        Ok(forward(&self.nets[rank as usize][k], &p)?[j].f64())
    }

    /// Stitched prediction at `p`; errors outside the domain.
    pub fn eval(&self, field: &str, p: Point) -> Result<f64> {
        stitch(self.decomposition, p, self.eps, &mut |r, q| self.eval_rank(r, field, q))
    }

    /// Relative L2 error of `field` against the problem's reference on an
    /// `n_x` by `n_y` grid of cell centers.
    pub fn relative_l2(
        &self,
        problem: &dyn Problem<F>,
        field: &str,
        n_x: usize,
        n_y: usize,
    ) -> Result<f64> {
        if n_x == 0 || n_y == 0 {
            return Err(Error::rejected("evaluation grid must be non-empty"));
        }
        let lo = self.decomposition.domain.lo;
        let hi = self.decomposition.domain.hi;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n_x {
            for j in 0..n_y {
                let p = [
                    lo[0] + (i as f64 + 0.5) * (hi[0] - lo[0]) / n_x as f64,
                    lo[1] + (j as f64 + 0.5) * (hi[1] - lo[1]) / n_y as f64,
                ];
                let pred = self.eval(field, p)?;
                let exact = problem
                    .exact(p)?
                    .iter()
                    .find(|(f, _)| *f == field)
                    .map(|&(_, v)| v)
                    .ok_or_else(|| {
                        Error::rejected(format!("reference has no field named {field:?}"))
                    })?;
                num += (pred - exact) * (pred - exact);
                den += exact * exact;
            }
        }
        if den == 0.0 {
            return Err(Error::rejected(format!(
                "reference field {field:?} is identically zero on the grid"
            )));
        }
        Ok((num / den).sqrt())
    }

    /// Mean absolute jump of `field` across all interior interfaces,
    /// evaluated at the shared interface points.
    pub fn interface_gap(&self, field: &str) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for edge in self.decomposition.interior_edges() {
            let EdgeOwners::Interior([a, b]) = edge.owners else { continue };
            let iface = self.decomposition.subdomains[a as usize]
                .interface(edge.id)
                .ok_or_else(|| {
                    Error::rejected(format!("edge {} missing from rank {a}'s interfaces", edge.id))
                })?;
            for &p in &iface.points {
                sum += (self.eval_rank(a, field, p)? - self.eval_rank(b, field, p)?).abs();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::rejected("decomposition has no interior interface points"));
        }
        Ok(sum / count as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cartesian_decompose, Domain};
    use crate::network::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch(widths: Vec<usize>) -> ArchitectureSpec {
        ArchitectureSpec::new(widths, Activation::Tanh, 10.0)
    }

    fn burgers_2x1() -> (Decomposition, ProblemKind) {
        let domain = Domain::new([-1.0, 0.0], [1.0, 1.0]).unwrap();
        let mut d =
            cartesian_decompose(&domain, 2, 1, &arch(vec![2, 8, 8, 1]), &LossWeights::default())
                .unwrap();
        let kind = ProblemKind::Burgers { nu: 0.05 };
        let counts = SampleCounts {
            residual: 12,
            interface_per_edge: 6,
            data_per_edge: 4,
            interior_data: 0,
        };
        sample_decomposition::<f64>(&mut d, &kind, &counts, Strategy::LatinHypercube, 11).unwrap();
        (d, kind)
    }

    fn fabricated_received(spec: &SubdomainSpec, kinds: &[PayloadKind], n_comp: usize) -> ReceivedMap {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut map = ReceivedMap::new();
        for iface in &spec.interfaces {
            for &kind in kinds {
                let len = match kind {
                    PayloadKind::Solution => iface.points.len(),
                    _ => n_comp * iface.points.len(),
                };
                let payload: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
                map.insert((iface.edge, kind), payload);
            }
        }
        map
    }

    #[test]
    fn adam_first_step_is_hand_checkable() {
        let mut opt = AdamState::<f64>::new(2);
        let mut p = [1.0, -2.0];
        opt.step(&mut p, &[0.5, 0.0], 0.1).unwrap();
        // With zero moments, the bias corrections cancel and the step is
        // lr * g / (|g| + eps).
        let want = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - want).abs() < 1e-12, "{} vs {}", p[0], want);
        assert_eq!(p[1], -2.0);

        let err = opt.step(&mut p, &[f64::NAN, 0.0], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0, .. }), "{err}");
    }

    #[test]
    fn seed_streams_do_not_collide() {
        let mut seen = std::collections::BTreeSet::new();
        for rank in 0..4 {
            seen.insert(sample_seed(7, rank));
            for k in 0..3 {
                seen.insert(net_seed(7, rank, k));
            }
        }
        assert_eq!(seen.len(), 16);
    }

    #[test]
    fn minibatches_cycle_through_every_point() {
        let pts: Vec<Point> = (0..5).map(|i| [i as f64, 0.0]).collect();
        let mut scratch = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for step in 0..5 {
            let batch = batch_slice(&pts, Some(2), step, &mut scratch);
            assert_eq!(batch.len(), 2);
            for p in batch {
                seen.insert(p[0] as i64);
            }
        }
        assert_eq!(seen.len(), 5);
        // No minibatch, or one at least as large as the set, is the full set.
        assert_eq!(batch_slice(&pts, None, 3, &mut scratch).len(), 5);
        assert_eq!(batch_slice(&pts, Some(9), 3, &mut scratch).len(), 5);
    }

    #[test]
    fn streamed_gradients_match_a_single_rooted_tape() {
        let (d, kind) = burgers_2x1();
        let spec = &d.subdomains[0];
        let problem = make_problem::<f64>(&kind, &d.domain).unwrap();
        for name in ["pinn", "cpinn", "xpinn"] {
            let method = make_method::<f64>(name).unwrap();
            let nets = init_nets(spec, problem.as_ref(), 5).unwrap();
            let received = fabricated_received(spec, method.exchanges(), 1);
            let batch = spec.residual_points.clone();

            let streamed =
                epoch_gradient(spec, problem.as_ref(), method.as_ref(), &nets, &received, &batch)
                    .unwrap();
            let whole =
                whole_loss(spec, problem.as_ref(), method.as_ref(), &nets, &received, &batch)
                    .unwrap();

            assert_eq!(streamed.grad.len(), whole.grad.len());
            let mut diff = 0.0;
            let mut norm = 0.0;
            for (a, b) in streamed.grad.iter().zip(&whole.grad) {
                diff += (a - b) * (a - b);
                norm += b * b;
            }
            assert!(norm > 0.0, "{name}: gradient vanished");
            let rel = (diff / norm).sqrt();
            assert!(rel < 1e-12, "{name}: streamed vs whole rel error {rel}");
            let b = streamed.breakdown;
            let w = whole.breakdown;
            for (x, y) in [
                (b.data, w.data),
                (b.residual, w.residual),
                (b.interface_avg, w.interface_avg),
                (b.interface_jump, w.interface_jump),
                (b.total, w.total),
            ] {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{name}: {x} vs {y}");
            }
            if name == "pinn" {
                assert_eq!(b.interface_avg, 0.0);
                assert_eq!(b.interface_jump, 0.0);
            } else {
                assert!(b.interface_avg > 0.0);
                assert!(b.interface_jump > 0.0);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (d, kind) = burgers_2x1();
        let spec = &d.subdomains[1];
        let problem = make_problem::<f64>(&kind, &d.domain).unwrap();
        let method = make_method::<f64>("cpinn").unwrap();
        let mut nets = vec![NetworkParams::<f64>::init(arch(vec![2, 6, 1]), 21).unwrap()];
        let received = fabricated_received(spec, method.exchanges(), 1);
        let batch: Vec<Point> = spec.residual_points[..6].to_vec();

        let an = epoch_gradient(spec, problem.as_ref(), method.as_ref(), &nets, &received, &batch)
            .unwrap();
        let mut diff = 0.0;
        let mut norm = 0.0;
        for i in 0..nets[0].data.len() {
            let orig = nets[0].data[i];
            let h = 1e-5 * orig.abs().max(1.0);
            nets[0].data[i] = orig + h;
            let up = whole_loss(spec, problem.as_ref(), method.as_ref(), &nets, &received, &batch)
                .unwrap()
                .value;
            nets[0].data[i] = orig - h;
            let dn = whole_loss(spec, problem.as_ref(), method.as_ref(), &nets, &received, &batch)
                .unwrap()
                .value;
            nets[0].data[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            diff += (fd - an.grad[i]) * (fd - an.grad[i]);
            norm += an.grad[i] * an.grad[i];
        }
        let rel = (diff / norm).sqrt();
        assert!(rel < 1e-5, "finite differences disagree: rel error {rel}");
    }

    #[test]
    fn bad_payloads_are_rejected() {
        let (d, kind) = burgers_2x1();
        let spec = &d.subdomains[0];
        let problem = make_problem::<f64>(&kind, &d.domain).unwrap();
        let method = make_method::<f64>("xpinn").unwrap();
        let nets = init_nets(spec, problem.as_ref(), 5).unwrap();
        let batch = spec.residual_points.clone();

        let missing = ReceivedMap::new();
        let err =
            epoch_gradient(spec, problem.as_ref(), method.as_ref(), &nets, &missing, &batch)
                .unwrap_err();
        assert!(matches!(err, Error::Protocol { .. }), "{err}");

        let mut short = fabricated_received(spec, method.exchanges(), 1);
        for v in short.values_mut() {
            v.pop();
        }
        let err = epoch_gradient(spec, problem.as_ref(), method.as_ref(), &nets, &short, &batch)
            .unwrap_err();
        assert!(err.to_string().contains("expected"), "{err}");

        let mut poisoned = fabricated_received(spec, method.exchanges(), 1);
        poisoned.values_mut().next().unwrap()[0] = f64::INFINITY;
        let err =
            epoch_gradient(spec, problem.as_ref(), method.as_ref(), &nets, &poisoned, &batch)
                .unwrap_err();
        assert!(err.to_string().contains("not finite"), "{err}");
    }

    #[test]
    fn single_subdomain_training_is_method_blind() {
        let domain = Domain::new([-1.0, 0.0], [1.0, 1.0]).unwrap();
        let mut d =
            cartesian_decompose(&domain, 1, 1, &arch(vec![2, 6, 1]), &LossWeights::default())
                .unwrap();
        let kind = ProblemKind::Burgers { nu: 0.05 };
        let counts = SampleCounts {
            residual: 10,
            interface_per_edge: 4,
            data_per_edge: 3,
            interior_data: 0,
        };
        sample_decomposition::<f64>(&mut d, &kind, &counts, Strategy::Uniform, 17).unwrap();
        let hyper = Hyper { lr: 1e-3, epochs: 5, seed: 17, ..Hyper::default() };

        let runs: Vec<Vec<f64>> = ["pinn", "cpinn", "xpinn"]
            .iter()
            .map(|m| {
                let report = train_in_process::<f64>(&d, &kind, m, &hyper, None, None).unwrap();
                assert_eq!(report.outcomes.len(), 1);
                assert_eq!(report.outcomes[0].counters.sent, 0);
                report.outcomes[0].nets[0].data.clone()
            })
            .collect();
        assert_eq!(runs[0], runs[1]);
        assert_eq!(runs[0], runs[2]);
    }

    #[test]
    fn fuzzed_and_clean_runs_agree() {
        let domain = Domain::new([-1.0, 0.0], [1.0, 1.0]).unwrap();
        let mut d =
            cartesian_decompose(&domain, 2, 2, &arch(vec![2, 6, 1]), &LossWeights::default())
                .unwrap();
        let kind = ProblemKind::Burgers { nu: 0.05 };
        let counts = SampleCounts {
            residual: 8,
            interface_per_edge: 4,
            data_per_edge: 3,
            interior_data: 0,
        };
        sample_decomposition::<f64>(&mut d, &kind, &counts, Strategy::Uniform, 23).unwrap();
        let hyper = Hyper { lr: 1e-3, epochs: 4, seed: 23, ..Hyper::default() };

        let clean = train_in_process::<f64>(&d, &kind, "xpinn", &hyper, None, None).unwrap();
        let fuzzed = train_in_process::<f64>(&d, &kind, "xpinn", &hyper, Some(300), None).unwrap();
        for (a, b) in clean.outcomes.iter().zip(&fuzzed.outcomes) {
            for (na, nb) in a.nets.iter().zip(&b.nets) {
                assert_eq!(na.data, nb.data);
            }
            assert_eq!(a.final_loss.total, b.final_loss.total);
        }
        // Each rank has two interfaces on a 2x2 grid: 2 kinds x 2 edges x 4
        // epochs envelopes in each direction, and the hub loses none.
        for out in &fuzzed.outcomes {
            assert_eq!(out.counters.sent, 16);
            assert_eq!(out.counters.received, 16);
        }
        let sent: u64 = fuzzed.stats.iter().map(|c| c.sent).sum();
        let received: u64 = fuzzed.stats.iter().map(|c| c.received).sum();
        assert_eq!(sent, received);
        assert_eq!(sent, 64);
    }

    #[test]
    fn training_moves_every_worker_and_logs_timings() {
        let (d, kind) = burgers_2x1();
        let hyper = Hyper { lr: 1e-3, epochs: 3, seed: 11, ..Hyper::default() };
        let before = build_workers::<f64>(&d, &kind, "cpinn", &hyper).unwrap();
        let report = train_in_process::<f64>(&d, &kind, "cpinn", &hyper, None, None).unwrap();
        for (w, out) in before.iter().zip(&report.outcomes) {
            assert_ne!(w.nets[0].data, out.nets[0].data);
            assert!(out.final_loss.total.is_finite());
            let t = out.totals;
            assert!(t.compute_s > 0.0);
            assert!(t.compute_s + t.comm_s + t.barrier_s <= t.wall_s * 1.01);
        }
        let rec = EpochRecord { epoch: 7, ..EpochRecord::default() };
        assert_eq!(csv_line(&rec).split(',').count(), CSV_HEADER.split(',').count());
    }

    #[test]
    fn predictions_stitch_and_score() {
        let domain = Domain::new([0.0, 0.0], [2.0 * std::f64::consts::PI, 10.0]).unwrap();
        let mut d =
            cartesian_decompose(&domain, 2, 2, &arch(vec![2, 5, 1]), &LossWeights::default())
                .unwrap();
        let kind = ProblemKind::HeatInverse;
        let counts = SampleCounts {
            residual: 6,
            interface_per_edge: 3,
            data_per_edge: 2,
            interior_data: 2,
        };
        sample_decomposition::<f64>(&mut d, &kind, &counts, Strategy::Uniform, 31).unwrap();
        let problem = make_problem::<f64>(&kind, &d.domain).unwrap();
        let nets: Vec<Vec<NetworkParams<f64>>> = d
            .subdomains
            .iter()
            .map(|s| init_nets(s, problem.as_ref(), 31).unwrap())
            .collect();
        let predictor = Predictor::new(&d, problem.as_ref(), &nets).unwrap();

        // At the four-way corner the stitched value is the plain mean.
        let center = [std::f64::consts::PI, 5.0];
        let mut mean = 0.0;
        for r in 0..4 {
            mean += predictor.eval_rank(r, "T", center).unwrap();
        }
        mean /= 4.0;
        let stitched = predictor.eval("T", center).unwrap();
        assert!((stitched - mean).abs() < 1e-15);

        assert!(predictor.eval("T", [100.0, 0.5]).is_err());
        assert!(predictor.eval("q", center).is_err());
        let err = predictor.relative_l2(problem.as_ref(), "K", 5, 5).unwrap();
        assert!(err.is_finite() && err > 0.0);
        let gap = predictor.interface_gap("T").unwrap();
        assert!(gap.is_finite() && gap >= 0.0);
    }
}
