//! Domain decomposition and point sampling: rank/coordinate maps, neighbor
//! tables, Cartesian and polygonal partitions, boundary-edge bookkeeping,
//! and the collocation/data point clouds each worker trains on.
//!
//! Decomposition runs once on a single coordinator and the resulting
//! [`SubdomainSpec`] values are immutable afterwards. Everything here is
//! deterministic given the same inputs: sampling is seeded, and interface
//! points are computed from the shared edge geometry with one formula, so
//! the two owners of an edge always hold bitwise-identical point arrays.
//!
//! # Partition file format
//!
//! Polygonal partitions are described by a line-based text file. Blank lines
//! and `#` comments are ignored; fields are whitespace-separated.
//!
//! ```text
//! subdomain 0                 # opens a subdomain block; ids must be 0..n-1
//! vertex 0.0 0.0              # polygon vertices in boundary order (>= 3)
//! vertex 2.0 0.0
//! vertex 2.0 1.0
//! vertex 0.0 1.0
//! boundary 0.0 0.0 2.0 0.0    # segment of this polygon on the domain boundary
//!
//! interface 0                 # opens an interface block
//! owners 0 1                  # exactly two distinct subdomain ids
//! normal 1.0 0.0              # unit normal, stored identically by both sides
//! point 2.0 0.25              # shared points, in order (>= 1), verbatim
//! point 2.0 0.50
//! ```
//!
//! Interface point lists are taken verbatim from the file and cloned into
//! both owners. `hole` lines are recognized and rejected: polygons with
//! holes are unsupported.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::LossWeights;
use crate::network::ArchitectureSpec;
use crate::{Error, Result};

/// A point in the two computational dimensions (x first; the second axis is
/// either y or time depending on the problem).
pub type Point = [f64; 2];

/// Linear interpolation between two points.
#[inline]
pub fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

/// `n` equispaced points strictly between `a` and `b` (endpoints excluded,
/// so corner points never acquire extra owners). Both owners of an edge call
/// this with identical `a`, `b`, `n` and therefore get identical bits.
pub fn equispaced_open(a: Point, b: Point, n: usize) -> Vec<Point> {
    let denom = (n + 1) as f64;
    (1..=n).map(|k| lerp(a, b, k as f64 / denom)).collect()
}

/// Derives a decorrelated child seed from a master seed and a stream index
/// via the splitmix64 finalizer, so per-subdomain/per-purpose RNGs never
/// share state.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Rank <-> grid coordinate maps
// ---------------------------------------------------------------------------

/// Splits a linear rank into `(row, column)` grid coordinates: row index
/// `r / n_x` (second axis, range `0..n_y`) and column index `r % n_x` (first
/// axis, range `0..n_x`). Inverse of [`coords_to_rank`] for every valid rank.
pub fn rank_to_coords(r: u32, n_x: u32, n_y: u32) -> Result<(u32, u32)> {
    if n_x == 0 || n_y == 0 {
        return Err(Error::rejected(format!(
            "grid counts must be at least 1 (got {n_x} x {n_y})"
        )));
    }
    if r >= n_x * n_y {
        return Err(Error::rejected(format!(
            "rank {r} out of range for a {n_x} x {n_y} grid"
        )));
    }
    Ok((r / n_x, r % n_x))
}

/// Linear rank of grid coordinates `(row, column)`: `row * n_x + column`.
pub fn coords_to_rank(r_x: u32, r_y: u32, n_x: u32) -> u32 {
    r_x * n_x + r_y
}

/// South/east/north/west neighbor ranks of a grid cell; `None` marks a
/// domain boundary (the no-op communication partner).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CartNeighbors {
    pub south: Option<u32>,
    pub east: Option<u32>,
    pub north: Option<u32>,
    pub west: Option<u32>,
}

impl CartNeighbors {
    pub fn live_count(&self) -> usize {
        [self.south, self.east, self.north, self.west].iter().filter(|n| n.is_some()).count()
    }
}

/// Neighbor table for grid coordinates `(r_x, r_y)` on an `n_x` x `n_y`
/// grid: south/north step the row index, east/west step the column index;
/// any step leaving the grid yields `None`.
pub fn neighbor_table(r_x: u32, r_y: u32, n_x: u32, n_y: u32) -> CartNeighbors {
    let at = |row: i64, col: i64| -> Option<u32> {
        if row < 0 || col < 0 || row >= n_y as i64 || col >= n_x as i64 {
            None
        } else {
            Some(coords_to_rank(row as u32, col as u32, n_x))
        }
    };
    CartNeighbors {
        south: at(r_x as i64 - 1, r_y as i64),
        east: at(r_x as i64, r_y as i64 + 1),
        north: at(r_x as i64 + 1, r_y as i64),
        west: at(r_x as i64, r_y as i64 - 1),
    }
}

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

/// The whole computational domain: a bounding box, plus an optional polygon
/// outline when the true domain is irregular.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: Point,
    pub hi: Point,
    #[serde(default)]
    pub boundary: Option<Vec<Point>>,
}

impl Domain {
    pub fn new(lo: Point, hi: Point) -> Result<Self> {
        let d = Domain { lo, hi, boundary: None };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for d in 0..2 {
            if !(self.hi[d] > self.lo[d]) || !self.lo[d].is_finite() || !self.hi[d].is_finite() {
                return Err(Error::rejected(format!(
                    "domain extent along axis {d} must be positive and finite \
                     (lo {}, hi {})",
                    self.lo[d], self.hi[d]
                )));
            }
        }
        if let Some(vs) = &self.boundary {
            validate_simple_polygon(vs)?;
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    pub fn diameter(&self) -> f64 {
        let (dx, dy) = (self.hi[0] - self.lo[0], self.hi[1] - self.lo[1]);
        (dx * dx + dy * dy).sqrt()
    }
}

/// Geometry of one subdomain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Axis-aligned rectangle.
    Cell { lo: Point, hi: Point },
    /// Simple polygon, vertices in boundary order.
    Polygon { vertices: Vec<Point> },
}

impl Shape {
    pub fn validate(&self) -> Result<()> {
        match self {
            Shape::Cell { lo, hi } => {
                for d in 0..2 {
                    if !(hi[d] > lo[d]) {
                        return Err(Error::rejected(format!(
                            "cell has zero or negative extent along axis {d}"
                        )));
                    }
                }
                Ok(())
            }
            Shape::Polygon { vertices } => validate_simple_polygon(vertices),
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Shape::Cell { lo, hi } => (hi[0] - lo[0]) * (hi[1] - lo[1]),
            Shape::Polygon { vertices } => 0.5 * shoelace(vertices).abs(),
        }
    }

    pub fn bbox(&self) -> (Point, Point) {
        match self {
            Shape::Cell { lo, hi } => (*lo, *hi),
            Shape::Polygon { vertices } => {
                let mut lo = [f64::INFINITY; 2];
                let mut hi = [f64::NEG_INFINITY; 2];
                for v in vertices {
                    for d in 0..2 {
                        lo[d] = lo[d].min(v[d]);
                        hi[d] = hi[d].max(v[d]);
                    }
                }
                (lo, hi)
            }
        }
    }

    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.bbox();
        let (dx, dy) = (hi[0] - lo[0], hi[1] - lo[1]);
        (dx * dx + dy * dy).sqrt()
    }

    /// True when `p` lies inside the shape or within `eps` of its boundary.
    pub fn contains(&self, p: Point, eps: f64) -> bool {
        match self {
            Shape::Cell { lo, hi } => {
                (0..2).all(|d| p[d] >= lo[d] - eps && p[d] <= hi[d] + eps)
            }
            Shape::Polygon { vertices } => {
                point_in_polygon(vertices, p) || boundary_distance(vertices, p) <= eps
            }
        }
    }

    /// True when `p` lies inside with clearance `eps` from the boundary.
    pub fn strictly_inside(&self, p: Point, eps: f64) -> bool {
        match self {
            Shape::Cell { lo, hi } => {
                (0..2).all(|d| p[d] > lo[d] + eps && p[d] < hi[d] - eps)
            }
            Shape::Polygon { vertices } => {
                point_in_polygon(vertices, p) && boundary_distance(vertices, p) > eps
            }
        }
    }
}

fn shoelace(vs: &[Point]) -> f64 {
    let n = vs.len();
    let mut s = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        s += vs[i][0] * vs[j][1] - vs[j][0] * vs[i][1];
    }
    s
}

fn validate_simple_polygon(vs: &[Point]) -> Result<()> {
    if vs.len() < 3 {
        return Err(Error::rejected(format!("polygon needs >= 3 vertices, got {}", vs.len())));
    }
    for v in vs {
        if !v[0].is_finite() || !v[1].is_finite() {
            return Err(Error::rejected("polygon vertex is not finite"));
        }
    }
    let n = vs.len();
    for i in 0..n {
        let j = (i + 1) % n;
        if vs[i] == vs[j] {
            return Err(Error::rejected(format!("polygon repeats vertex {i}")));
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_touch(vs[i], vs[(i + 1) % n], vs[j], vs[(j + 1) % n]) {
                return Err(Error::rejected(format!(
                    "polygon is self-intersecting (edges {i} and {j} touch)"
                )));
            }
        }
    }
    if shoelace(vs).abs() == 0.0 {
        return Err(Error::rejected("polygon has zero area"));
    }
    Ok(())
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn in_bbox_of(a: Point, b: Point, p: Point) -> bool {
    p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

/// Whether closed segments p1p2 and p3p4 share any point.
fn segments_touch(p1: Point, p2: Point, p3: Point, p4: Point) -> bool {
    let d1 = orient(p3, p4, p1);
    let d2 = orient(p3, p4, p2);
    let d3 = orient(p1, p2, p3);
    let d4 = orient(p1, p2, p4);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && in_bbox_of(p3, p4, p1))
        || (d2 == 0.0 && in_bbox_of(p3, p4, p2))
        || (d3 == 0.0 && in_bbox_of(p1, p2, p3))
        || (d4 == 0.0 && in_bbox_of(p1, p2, p4))
}

/// Even-odd ray cast.
fn point_in_polygon(vs: &[Point], p: Point) -> bool {
    let n = vs.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (vi, vj) = (vs[i], vs[j]);
        if (vi[1] > p[1]) != (vj[1] > p[1]) {
            let x_int = vi[0] + (p[1] - vi[1]) * (vj[0] - vi[0]) / (vj[1] - vi[1]);
            if p[0] < x_int {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn dist_point_segment(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (ex * ex + ey * ey).sqrt()
}

fn boundary_distance(vs: &[Point], p: Point) -> f64 {
    let n = vs.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        best = best.min(dist_point_segment(p, vs[i], vs[(i + 1) % n]));
    }
    best
}

// ---------------------------------------------------------------------------
// Decomposition data model
// ---------------------------------------------------------------------------

/// Who sits on each side of an edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeOwners {
    /// Interface between two subdomains.
    Interior([u32; 2]),
    /// Edge on the domain boundary, owned by one subdomain.
    Boundary(u32),
}

/// One entry of the global edge table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeInfo {
    pub id: u32,
    pub a: Point,
    pub b: Point,
    pub owners: EdgeOwners,
    /// Unit normal. Interior edges store one canonical normal that both
    /// sides use; boundary edges point out of the domain.
    pub normal: Point,
}

/// A subdomain's view of one of its interfaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterfaceSpec {
    /// Global edge id; message envelopes are keyed by it.
    pub edge: u32,
    pub neighbor: u32,
    pub a: Point,
    pub b: Point,
    /// Canonical unit normal, identical on both sides of the edge.
    pub normal: Point,
    /// Shared points, identical (bitwise) on both sides. Pre-filled by
    /// partition files; otherwise populated by [`sample_points`].
    pub points: Vec<Point>,
}

/// A subdomain's view of one of its domain-boundary edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEdge {
    pub edge: u32,
    pub a: Point,
    pub b: Point,
    /// Outward unit normal.
    pub normal: Point,
}

/// Training data attached to one field: measurement points and target values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataSet {
    pub field: String,
    pub points: Vec<Point>,
    pub values: Vec<f64>,
}

/// Everything one worker needs to train its local network: geometry,
/// neighbors, point clouds, architecture, and loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubdomainSpec {
    pub rank: u32,
    pub shape: Shape,
    /// South/east/north/west table for grid partitions; `None` for polygons.
    pub cart: Option<CartNeighbors>,
    pub interfaces: Vec<InterfaceSpec>,
    pub boundary: Vec<BoundaryEdge>,
    pub residual_points: Vec<Point>,
    pub data: Vec<DataSet>,
    pub arch: ArchitectureSpec,
    pub weights: LossWeights,
}

impl SubdomainSpec {
    pub fn interface(&self, edge: u32) -> Option<&InterfaceSpec> {
        self.interfaces.iter().find(|i| i.edge == edge)
    }
}

/// A complete partition of the domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub domain: Domain,
    /// `(n_x, n_y)` for grid partitions; `None` for polygonal ones.
    pub grid: Option<(u32, u32)>,
    pub subdomains: Vec<SubdomainSpec>,
    pub edges: Vec<EdgeInfo>,
    /// Subdomain id -> ids of the domain-boundary edges it owns. Every
    /// boundary-conforming edge appears exactly once, under its owner.
    pub boundary_map: BTreeMap<u32, Vec<u32>>,
}

impl Decomposition {
    pub fn n_subdomains(&self) -> usize {
        self.subdomains.len()
    }

    pub fn interior_edges(&self) -> impl Iterator<Item = &EdgeInfo> {
        self.edges.iter().filter(|e| matches!(e.owners, EdgeOwners::Interior(_)))
    }

    /// Ranks whose closed subdomain contains `p` (within `eps`). Stitched
    /// evaluation averages the members' predictions; an empty result means
    /// the point is outside the domain.
    pub fn members(&self, p: Point, eps: f64) -> Vec<u32> {
        self.subdomains
            .iter()
            .filter(|s| s.shape.contains(p, eps))
            .map(|s| s.rank)
            .collect()
    }

    /// Structural invariants: dense ranks, consistent edge cross-references,
    /// bitwise-shared interface points, boundary-map completeness, and (for
    /// grid partitions) exact tiling of the domain area.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.subdomains.iter().enumerate() {
            if s.rank as usize != i {
                return Err(Error::rejected(format!(
                    "subdomain ranks must be dense and ordered (position {i} holds rank {})",
                    s.rank
                )));
            }
            s.shape.validate()?;
        }
        let mut boundary_seen = 0usize;
        for e in &self.edges {
            match e.owners {
                EdgeOwners::Interior([q, r]) => {
                    if q == r {
                        return Err(Error::rejected(format!(
                            "edge {} lists the same owner twice",
                            e.id
                        )));
                    }
                    let (iq, ir) = (self.side_of(q, e.id)?, self.side_of(r, e.id)?);
                    if iq.neighbor != r || ir.neighbor != q {
                        return Err(Error::rejected(format!(
                            "edge {}: neighbor links do not mirror its owners",
                            e.id
                        )));
                    }
                    if iq.points != ir.points {
                        return Err(Error::rejected(format!(
                            "edge {}: owners hold different interface point arrays",
                            e.id
                        )));
                    }
                    if iq.normal != ir.normal || iq.normal != e.normal {
                        return Err(Error::rejected(format!(
                            "edge {}: owners disagree on the canonical normal",
                            e.id
                        )));
                    }
                }
                EdgeOwners::Boundary(q) => {
                    boundary_seen += 1;
                    let spec = self.subdomain(q)?;
                    if spec.boundary.iter().filter(|b| b.edge == e.id).count() != 1 {
                        return Err(Error::rejected(format!(
                            "boundary edge {} missing from its owner {q}",
                            e.id
                        )));
                    }
                    if !self.boundary_map.get(&q).is_some_and(|v| v.contains(&e.id)) {
                        return Err(Error::rejected(format!(
                            "boundary edge {} absent from the boundary map of {q}",
                            e.id
                        )));
                    }
                }
            }
        }
        let mapped: usize = self.boundary_map.values().map(Vec::len).sum();
        if mapped != boundary_seen {
            return Err(Error::rejected(format!(
                "boundary map lists {mapped} edges but the edge table has {boundary_seen}"
            )));
        }
        if self.grid.is_some() {
            let sum: f64 = self.subdomains.iter().map(|s| s.shape.area()).sum();
            let rel = ((sum - self.domain.area()) / self.domain.area()).abs();
            if rel > 1e-12 {
                return Err(Error::rejected(format!(
                    "subdomain areas sum to {sum}, domain area is {}",
                    self.domain.area()
                )));
            }
        }
        Ok(())
    }

    fn subdomain(&self, rank: u32) -> Result<&SubdomainSpec> {
        self.subdomains
            .get(rank as usize)
            .ok_or_else(|| Error::rejected(format!("no subdomain with rank {rank}")))
    }

    fn side_of(&self, rank: u32, edge: u32) -> Result<&InterfaceSpec> {
        self.subdomain(rank)?.interface(edge).ok_or_else(|| {
            Error::rejected(format!("subdomain {rank} has no interface record for edge {edge}"))
        })
    }
}

// ---------------------------------------------------------------------------
// Cartesian decomposition
// ---------------------------------------------------------------------------

/// Tiles the domain box with `n_x` x `n_y` axis-aligned cells. Interior
/// edges are created once (east then north of each rank, ranks ascending)
/// and attached to both owners; boundary edges are recorded per owner in the
/// boundary map. Grid lines are computed with one formula so cells that
/// share a line share its bits, and the outermost lines are the domain
/// bounds exactly.
pub fn cartesian_decompose(
    domain: &Domain,
    n_x: u32,
    n_y: u32,
    arch: &ArchitectureSpec,
    weights: &LossWeights,
) -> Result<Decomposition> {
    domain.validate()?;
    if n_x == 0 || n_y == 0 {
        return Err(Error::rejected(format!(
            "subdomain counts must be at least 1 (got {n_x} x {n_y})"
        )));
    }
    let line = |lo: f64, hi: f64, i: u32, n: u32| -> f64 {
        if i == 0 {
            lo
        } else if i == n {
            hi
        } else {
            lo + (hi - lo) * (i as f64) / (n as f64)
        }
    };
    let xs: Vec<f64> = (0..=n_x).map(|i| line(domain.lo[0], domain.hi[0], i, n_x)).collect();
    let ys: Vec<f64> = (0..=n_y).map(|j| line(domain.lo[1], domain.hi[1], j, n_y)).collect();

    let n_sd = n_x * n_y;
    let mut subs: Vec<SubdomainSpec> = Vec::with_capacity(n_sd as usize);
    for r in 0..n_sd {
        let (row, col) = rank_to_coords(r, n_x, n_y)?;
        let (row, col) = (row as usize, col as usize);
        subs.push(SubdomainSpec {
            rank: r,
            shape: Shape::Cell { lo: [xs[col], ys[row]], hi: [xs[col + 1], ys[row + 1]] },
            cart: Some(neighbor_table(row as u32, col as u32, n_x, n_y)),
            interfaces: Vec::new(),
            boundary: Vec::new(),
            residual_points: Vec::new(),
            data: Vec::new(),
            arch: arch.clone(),
            weights: *weights,
        });
    }

    let mut edges: Vec<EdgeInfo> = Vec::new();
    for r in 0..n_sd {
        let (row, col) = rank_to_coords(r, n_x, n_y)?;
        let (row, col) = (row as usize, col as usize);
        let cart = subs[r as usize].cart.unwrap();
        if let Some(e) = cart.east {
            let id = edges.len() as u32;
            let a = [xs[col + 1], ys[row]];
            let b = [xs[col + 1], ys[row + 1]];
            let normal = [1.0, 0.0];
            edges.push(EdgeInfo { id, a, b, owners: EdgeOwners::Interior([r, e]), normal });
            for (side, nbr) in [(r, e), (e, r)] {
                subs[side as usize].interfaces.push(InterfaceSpec {
                    edge: id,
                    neighbor: nbr,
                    a,
                    b,
                    normal,
                    points: Vec::new(),
                });
            }
        }
        if let Some(nn) = cart.north {
            let id = edges.len() as u32;
            let a = [xs[col], ys[row + 1]];
            let b = [xs[col + 1], ys[row + 1]];
            let normal = [0.0, 1.0];
            edges.push(EdgeInfo { id, a, b, owners: EdgeOwners::Interior([r, nn]), normal });
            for (side, nbr) in [(r, nn), (nn, r)] {
                subs[side as usize].interfaces.push(InterfaceSpec {
                    edge: id,
                    neighbor: nbr,
                    a,
                    b,
                    normal,
                    points: Vec::new(),
                });
            }
        }
    }

    let mut boundary_map = BTreeMap::new();
    for r in 0..n_sd {
        let (row, col) = rank_to_coords(r, n_x, n_y)?;
        let (row, col) = (row as usize, col as usize);
        let cart = subs[r as usize].cart.unwrap();
        let sides: [(Option<u32>, Point, Point, Point); 4] = [
            (cart.south, [xs[col], ys[row]], [xs[col + 1], ys[row]], [0.0, -1.0]),
            (cart.east, [xs[col + 1], ys[row]], [xs[col + 1], ys[row + 1]], [1.0, 0.0]),
            (cart.north, [xs[col], ys[row + 1]], [xs[col + 1], ys[row + 1]], [0.0, 1.0]),
            (cart.west, [xs[col], ys[row]], [xs[col], ys[row + 1]], [-1.0, 0.0]),
        ];
        let mut owned = Vec::new();
        for (nbr, a, b, normal) in sides {
            if nbr.is_none() {
                let id = edges.len() as u32;
                edges.push(EdgeInfo { id, a, b, owners: EdgeOwners::Boundary(r), normal });
                subs[r as usize].boundary.push(BoundaryEdge { edge: id, a, b, normal });
                owned.push(id);
            }
        }
        boundary_map.insert(r, owned);
    }

    let d = Decomposition {
        domain: domain.clone(),
        grid: Some((n_x, n_y)),
        subdomains: subs,
        edges,
        boundary_map,
    };
    d.validate()?;
    Ok(d)
}

// ---------------------------------------------------------------------------
// Polygonal decomposition (partition file)
// ---------------------------------------------------------------------------

struct PendingSub {
    id: u32,
    line: usize,
    vertices: Vec<Point>,
    boundary: Vec<(Point, Point)>,
}

struct PendingIface {
    id: u32,
    line: usize,
    owners: Vec<u32>,
    normal: Option<Point>,
    points: Vec<Point>,
}

/// Parses and validates a partition file (format in the module docs) into a
/// polygonal decomposition. Interface points are taken verbatim and cloned
/// into both owners; neighbor lists follow from interface ownership.
pub fn polygon_decompose(
    domain: &Domain,
    text: &str,
    arch: &ArchitectureSpec,
    weights: &LossWeights,
) -> Result<Decomposition> {
    domain.validate()?;
    let mut subs: Vec<PendingSub> = Vec::new();
    let mut ifaces: Vec<PendingIface> = Vec::new();

    enum Block {
        None,
        Sub(usize),
        Iface(usize),
    }
    let mut block = Block::None;

    for (idx, raw) in text.lines().enumerate() {
        let n = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let kw = it.next().unwrap();
        let rest: Vec<&str> = it.collect();
        let fail = |msg: String| Error::rejected(format!("partition file line {n}: {msg}"));
        let floats = |want: usize| -> Result<Vec<f64>> {
            if rest.len() != want {
                return Err(fail(format!("`{kw}` takes {want} numbers, got {}", rest.len())));
            }
            rest.iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| fail(format!("`{s}` is not a number")))
                        .and_then(|v| {
                            if v.is_finite() {
                                Ok(v)
                            } else {
                                Err(fail(format!("`{s}` is not finite")))
                            }
                        })
                })
                .collect()
        };
        match kw {
            "subdomain" => {
                let ids = rest
                    .first()
                    .and_then(|s| s.parse::<u32>().ok())
                    .ok_or_else(|| fail("`subdomain` takes one id".into()))?;
                subs.push(PendingSub { id: ids, line: n, vertices: Vec::new(), boundary: Vec::new() });
                block = Block::Sub(subs.len() - 1);
            }
            "vertex" => {
                let v = floats(2)?;
                match block {
                    Block::Sub(i) => subs[i].vertices.push([v[0], v[1]]),
                    _ => return Err(fail("`vertex` outside a subdomain block".into())),
                }
            }
            "boundary" => {
                let v = floats(4)?;
                match block {
                    Block::Sub(i) => subs[i].boundary.push(([v[0], v[1]], [v[2], v[3]])),
                    _ => return Err(fail("`boundary` outside a subdomain block".into())),
                }
            }
            "hole" => {
                return Err(fail("polygons with holes are not supported".into()));
            }
            "interface" => {
                let id = rest
                    .first()
                    .and_then(|s| s.parse::<u32>().ok())
                    .ok_or_else(|| fail("`interface` takes one id".into()))?;
                ifaces.push(PendingIface {
                    id,
                    line: n,
                    owners: Vec::new(),
                    normal: None,
                    points: Vec::new(),
                });
                block = Block::Iface(ifaces.len() - 1);
            }
            "owners" => {
                let ids: Option<Vec<u32>> = rest.iter().map(|s| s.parse::<u32>().ok()).collect();
                let ids = ids.ok_or_else(|| fail("`owners` takes subdomain ids".into()))?;
                match block {
                    Block::Iface(i) => subs_owners(&mut ifaces[i], ids, n)?,
                    _ => return Err(fail("`owners` outside an interface block".into())),
                }
            }
            "normal" => {
                let v = floats(2)?;
                match block {
                    Block::Iface(i) => ifaces[i].normal = Some([v[0], v[1]]),
                    _ => return Err(fail("`normal` outside an interface block".into())),
                }
            }
            "point" => {
                let v = floats(2)?;
                match block {
                    Block::Iface(i) => ifaces[i].points.push([v[0], v[1]]),
                    _ => return Err(fail("`point` outside an interface block".into())),
                }
            }
            other => return Err(fail(format!("unknown keyword `{other}`"))),
        }
    }

    assemble_polygons(domain, subs, ifaces, arch, weights)
}

fn subs_owners(iface: &mut PendingIface, ids: Vec<u32>, line: usize) -> Result<()> {
    if ids.len() != 2 || ids[0] == ids[1] {
        return Err(Error::rejected(format!(
            "partition file line {line}: an interface needs exactly two distinct owners"
        )));
    }
    iface.owners = ids;
    Ok(())
}

fn assemble_polygons(
    domain: &Domain,
    pending: Vec<PendingSub>,
    ifaces: Vec<PendingIface>,
    arch: &ArchitectureSpec,
    weights: &LossWeights,
) -> Result<Decomposition> {
    if pending.is_empty() {
        return Err(Error::rejected("partition file declares no subdomains"));
    }
    let n = pending.len();
    let mut ordered: Vec<Option<PendingSub>> = (0..n).map(|_| None).collect();
    for p in pending {
        let slot = p.id as usize;
        if slot >= n || ordered[slot].is_some() {
            return Err(Error::rejected(format!(
                "partition file line {}: subdomain ids must be 0..{} without repeats",
                p.line,
                n - 1
            )));
        }
        ordered[slot] = Some(p);
    }
    let eps = domain.diameter().max(1.0) * 1e-9;

    let mut subs: Vec<SubdomainSpec> = Vec::with_capacity(n);
    for p in ordered.into_iter().map(Option::unwrap) {
        let mut vertices = p.vertices;
        validate_simple_polygon(&vertices).map_err(|e| {
            Error::rejected(format!("subdomain {} (line {}): {e}", p.id, p.line))
        })?;
        if shoelace(&vertices) < 0.0 {
            vertices.reverse();
        }
        for v in &vertices {
            if v[0] < domain.lo[0] - eps
                || v[0] > domain.hi[0] + eps
                || v[1] < domain.lo[1] - eps
                || v[1] > domain.hi[1] + eps
            {
                return Err(Error::rejected(format!(
                    "subdomain {}: vertex ({}, {}) lies outside the domain box",
                    p.id, v[0], v[1]
                )));
            }
        }
        let shape = Shape::Polygon { vertices };
        let mut boundary = Vec::new();
        for (a, b) in &p.boundary {
            for q in [a, b] {
                if !on_domain_boundary(domain, *q, eps) {
                    return Err(Error::rejected(format!(
                        "subdomain {}: boundary segment endpoint ({}, {}) is not on \
                         the domain boundary",
                        p.id, q[0], q[1]
                    )));
                }
            }
            boundary.push((*a, *b));
        }
        subs.push(SubdomainSpec {
            rank: p.id,
            shape,
            cart: None,
            interfaces: Vec::new(),
            boundary: Vec::new(),
            residual_points: Vec::new(),
            data: Vec::new(),
            arch: arch.clone(),
            weights: *weights,
        });
        // Stash raw segments for the id pass below.
        subs.last_mut().unwrap().boundary = boundary
            .into_iter()
            .map(|(a, b)| BoundaryEdge { edge: u32::MAX, a, b, normal: [0.0, 0.0] })
            .collect();
    }

    let mut edges: Vec<EdgeInfo> = Vec::new();
    let mut seen_ids = std::collections::BTreeSet::new();
    for f in &ifaces {
        if !seen_ids.insert(f.id) {
            return Err(Error::rejected(format!(
                "partition file line {}: duplicate interface id {}",
                f.line, f.id
            )));
        }
        if f.owners.len() != 2 {
            return Err(Error::rejected(format!(
                "partition file line {}: interface {} needs exactly two distinct owners",
                f.line, f.id
            )));
        }
        let (q, r) = (f.owners[0], f.owners[1]);
        for o in [q, r] {
            if o as usize >= n {
                return Err(Error::rejected(format!(
                    "interface {}: owner {o} is not a declared subdomain",
                    f.id
                )));
            }
        }
        let normal = f.normal.ok_or_else(|| {
            Error::rejected(format!("interface {} is missing its normal", f.id))
        })?;
        let len = (normal[0] * normal[0] + normal[1] * normal[1]).sqrt();
        if (len - 1.0).abs() > 1e-6 {
            return Err(Error::rejected(format!(
                "interface {}: normal ({}, {}) is not unit length",
                f.id, normal[0], normal[1]
            )));
        }
        let normal = [normal[0] / len, normal[1] / len];
        if f.points.is_empty() {
            return Err(Error::rejected(format!(
                "interface {} lists no shared points",
                f.id
            )));
        }
        for p in &f.points {
            for o in [q, r] {
                if !subs[o as usize].shape.contains(*p, eps) {
                    return Err(Error::rejected(format!(
                        "interface {}: point ({}, {}) lies outside subdomain {o}",
                        f.id, p[0], p[1]
                    )));
                }
            }
        }
        let (a, b) = (*f.points.first().unwrap(), *f.points.last().unwrap());
        edges.push(EdgeInfo { id: f.id, a, b, owners: EdgeOwners::Interior([q, r]), normal });
        for (side, nbr) in [(q, r), (r, q)] {
            subs[side as usize].interfaces.push(InterfaceSpec {
                edge: f.id,
                neighbor: nbr,
                a,
                b,
                normal,
                points: f.points.clone(),
            });
        }
    }

    let mut next_id = edges.iter().map(|e| e.id).max().map_or(0, |m| m + 1);
    let mut boundary_map = BTreeMap::new();
    for s in subs.iter_mut() {
        let mut owned = Vec::new();
        let verts = match &s.shape {
            Shape::Polygon { vertices } => vertices.clone(),
            Shape::Cell { .. } => unreachable!("polygon partitions only hold polygons"),
        };
        for be in s.boundary.iter_mut() {
            be.edge = next_id;
            be.normal = outward_normal(&verts, be.a, be.b, eps);
            edges.push(EdgeInfo {
                id: next_id,
                a: be.a,
                b: be.b,
                owners: EdgeOwners::Boundary(s.rank),
                normal: be.normal,
            });
            owned.push(next_id);
            next_id += 1;
        }
        boundary_map.insert(s.rank, owned);
    }

    for s in &subs {
        if s.interfaces.is_empty() && n > 1 {
            return Err(Error::rejected(format!(
                "subdomain {} has no interface with any other subdomain",
                s.rank
            )));
        }
    }

    let d = Decomposition {
        domain: domain.clone(),
        grid: None,
        subdomains: subs,
        edges,
        boundary_map,
    };
    d.validate()?;
    Ok(d)
}

fn on_domain_boundary(domain: &Domain, p: Point, eps: f64) -> bool {
    if let Some(vs) = &domain.boundary {
        return boundary_distance(vs, p) <= eps;
    }
    let on_x = (p[0] - domain.lo[0]).abs() <= eps || (p[0] - domain.hi[0]).abs() <= eps;
    let on_y = (p[1] - domain.lo[1]).abs() <= eps || (p[1] - domain.hi[1]).abs() <= eps;
    let in_box = p[0] >= domain.lo[0] - eps
        && p[0] <= domain.hi[0] + eps
        && p[1] >= domain.lo[1] - eps
        && p[1] <= domain.hi[1] + eps;
    in_box && (on_x || on_y)
}

/// Unit normal of segment a->b oriented away from the polygon interior.
fn outward_normal(vertices: &[Point], a: Point, b: Point, eps: f64) -> Point {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = (dx * dx + dy * dy).sqrt();
    let mut n = [dy / len, -dx / len];
    let mid = [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5];
    let h = eps.max(1e-12) * 1e3;
    let probe = [mid[0] + n[0] * h, mid[1] + n[1] * h];
    if point_in_polygon(vertices, probe) {
        n = [-n[0], -n[1]];
    }
    n
}

// ---------------------------------------------------------------------------
// Point sampling
// ---------------------------------------------------------------------------

/// How residual points are placed inside a subdomain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Uniform,
    LatinHypercube,
}

/// Point-cloud sizes for one subdomain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleCounts {
    /// Collocation points for the governing-equation residual.
    pub residual: usize,
    /// Shared points per interface edge.
    pub interface_per_edge: usize,
    /// Candidate data points per domain-boundary edge.
    pub data_per_edge: usize,
    /// Interior measurement points (inverse problems).
    pub interior_data: usize,
}

/// Supplies training targets while points are sampled. Implemented by each
/// problem; a point that carries no data returns an empty list.
pub trait DataSource {
    /// `(field, target)` pairs pinned at a domain-boundary point.
    fn boundary_values(&self, p: Point) -> Vec<(&'static str, f64)>;
    /// `(field, target)` pairs at an interior measurement point.
    fn interior_values(&self, _p: Point) -> Vec<(&'static str, f64)> {
        Vec::new()
    }
}

/// Populates a spec's point sets in place: residual points strictly inside
/// the shape, interface points equispaced on each edge that does not already
/// carry file-specified points, and data points on boundary edges (plus
/// interior measurement points when requested) with targets drawn from
/// `source`. Deterministic in `seed`; independent of transport or timing.
pub fn sample_points(
    spec: &mut SubdomainSpec,
    counts: &SampleCounts,
    seed: u64,
    strategy: Strategy,
    source: &dyn DataSource,
) -> Result<()> {
    spec.shape.validate()?;
    if counts.residual == 0 {
        return Err(Error::rejected(format!(
            "subdomain {} needs at least one residual point",
            spec.rank
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    spec.residual_points = match strategy {
        Strategy::Uniform => uniform_interior(&spec.shape, counts.residual, &mut rng)?,
        Strategy::LatinHypercube => lhs_interior(&spec.shape, counts.residual, &mut rng)?,
    };

    for iface in &mut spec.interfaces {
        if iface.points.is_empty() {
            if counts.interface_per_edge == 0 {
                return Err(Error::rejected(format!(
                    "subdomain {}: edge {} needs at least one interface point",
                    spec.rank, iface.edge
                )));
            }
            iface.points = equispaced_open(iface.a, iface.b, counts.interface_per_edge);
        }
    }

    let mut sets: BTreeMap<&'static str, DataSet> = BTreeMap::new();
    let record =
        |field: &'static str, p: Point, v: f64, sets: &mut BTreeMap<&'static str, DataSet>| {
            if !v.is_finite() {
                return Err(Error::rejected(format!(
                    "data target for `{field}` at ({}, {}) is not finite",
                    p[0], p[1]
                )));
            }
            let set = sets
                .entry(field)
                .or_insert_with(|| DataSet { field: field.to_string(), ..DataSet::default() });
            set.points.push(p);
            set.values.push(v);
            Ok(())
        };

    for be in &spec.boundary {
        for _ in 0..counts.data_per_edge {
            let p = lerp(be.a, be.b, rng.gen::<f64>());
            for (field, v) in source.boundary_values(p) {
                record(field, p, v, &mut sets)?;
            }
        }
    }
    if counts.interior_data > 0 {
        for p in uniform_interior(&spec.shape, counts.interior_data, &mut rng)? {
            for (field, v) in source.interior_values(p) {
                record(field, p, v, &mut sets)?;
            }
        }
    }
    spec.data = sets.into_values().collect();
    Ok(())
}

fn interior_eps(shape: &Shape) -> f64 {
    match shape {
        Shape::Cell { .. } => 0.0,
        Shape::Polygon { .. } => shape.diameter() * 1e-12,
    }
}

fn uniform_interior(shape: &Shape, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    let (lo, hi) = shape.bbox();
    let eps = interior_eps(shape);
    let mut out = Vec::with_capacity(n);
    let cap = 1000 * n.max(1) + 1000;
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > cap {
            return Err(Error::rejected(
                "interior sampling failed: shape area is a vanishing fraction of its \
                 bounding box",
            ));
        }
        let p = [
            lo[0] + rng.gen::<f64>() * (hi[0] - lo[0]),
            lo[1] + rng.gen::<f64>() * (hi[1] - lo[1]),
        ];
        if shape.strictly_inside(p, eps) {
            out.push(p);
        }
    }
    Ok(out)
}

/// One point per stratum and per dimension on the bounding box; shapes that
/// do not fill their box keep the inside points and top up by rejection.
fn lhs_interior(shape: &Shape, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    let (lo, hi) = shape.bbox();
    let eps = interior_eps(shape);
    let mut perm_x: Vec<usize> = (0..n).collect();
    let mut perm_y: Vec<usize> = (0..n).collect();
    perm_x.shuffle(rng);
    perm_y.shuffle(rng);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut p = [0.0; 2];
        for (d, perm) in [(0, &perm_x), (1, &perm_y)] {
            let mut u = rng.gen::<f64>();
            while u == 0.0 {
                u = rng.gen();
            }
            p[d] = lo[d] + (hi[d] - lo[d]) * ((perm[i] as f64 + u) / n as f64);
        }
        if shape.strictly_inside(p, eps) {
            out.push(p);
        }
    }
    while out.len() < n {
        out.extend(uniform_interior(shape, n - out.len(), rng)?);
    }
    Ok(out)
}
