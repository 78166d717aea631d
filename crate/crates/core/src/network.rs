//! Per-subdomain feed-forward networks with layer-wise adaptive activation
//! slopes.
//!
//! Layer rule: the first layer is affine, N1(z) = W1 z + b1; each following
//! layer applies the activation to a slope-scaled copy of the previous
//! output, Nk(z) = Wk Phi(n * a_{k-1} * N_{k-1}(z)) + bk, and the final
//! layer's activation is the identity. The slope a_k is a trainable scalar
//! per hidden layer, the scaling n is fixed per network, and initialization
//! sets n * a_k = 1 so slopes start out neutral.
//!
//! Parameters are packed flat, layer-major: W1 (row-major), b1, a1, W2, b2,
//! a2, ..., WL, bL. Forward passes are written against
//! [`Algebra`](crate::autodiff::Algebra) and evaluated lane-wise (one lane
//! per jet component) so the affine steps become fused dot products on the
//! tape.
//!
//! Checkpoint layout (little-endian): magic `DDPN`, version u8 = 1,
//! precision u8 (32 or 64), activation u8 (0 tanh, 1 sin, 2 cos), pad u8,
//! scaling f64, width count u32, widths u32 each, parameter count u64, then
//! the raw parameter values in pack order (f32 or f64 per the precision
//! byte). Round trips are bit-exact.

use crate::autodiff::{Algebra, Graph, Jet2, JetFull, Var};
use crate::real::{Precision, Real};
use crate::{Error, Result};
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "tanh")]
    Tanh,
    #[serde(rename = "sin")]
    Sin,
    #[serde(rename = "cos")]
    Cos,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sin => "sin",
            Activation::Cos => "cos",
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "sin" => Ok(Activation::Sin),
            "cos" => Ok(Activation::Cos),
            other => Err(Error::rejected(format!("unknown activation `{other}`"))),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Sin => 1,
            Activation::Cos => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Sin),
            2 => Ok(Activation::Cos),
            other => Err(Error::rejected(format!("unknown activation tag {other}"))),
        }
    }
}

/// Network shape: `widths` lists input, hidden, and output widths in order;
/// `scaling` is the fixed slope multiplier n.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub scaling: f64,
}

/// Flat-pack offsets for one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerLayout {
    pub w: usize,
    pub b: usize,
    pub slope: Option<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl ArchitectureSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, scaling: f64) -> Self {
        ArchitectureSpec { widths, activation, scaling }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::rejected("architecture needs at least input and output widths"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::rejected("architecture widths must be positive"));
        }
        if !(self.scaling.is_finite() && self.scaling > 0.0) {
            return Err(Error::rejected("activation scaling must be positive and finite"));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Weights + biases per layer plus one slope per hidden layer.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for k in 1..self.widths.len() {
            n += self.widths[k] * self.widths[k - 1] + self.widths[k];
        }
        n + (self.n_layers() - 1)
    }

    pub fn layouts(&self) -> Vec<LayerLayout> {
        let mut out = Vec::with_capacity(self.n_layers());
        let mut at = 0;
        let last = self.n_layers() - 1;
        for i in 0..self.n_layers() {
            let rows = self.widths[i + 1];
            let cols = self.widths[i];
            let w = at;
            let b = at + rows * cols;
            let slope = if i < last { Some(b + rows) } else { None };
            at = b + rows + usize::from(i < last);
            out.push(LayerLayout { w, b, slope, rows, cols });
        }
        out
    }
}

/// A network's flat parameter vector together with its shape.
#[derive(Clone, Debug)]
pub struct NetworkParams<F: Real> {
    pub spec: ArchitectureSpec,
    pub data: Vec<F>,
}

impl<F: Real> NetworkParams<F> {
    /// Xavier-uniform weights drawn in pack order from a seeded stream,
    /// zero biases, slopes 1/n. Identical seeds give identical parameters.
    pub fn init(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(spec.param_count());
        let last = spec.n_layers() - 1;
        for i in 0..spec.n_layers() {
            let (rows, cols) = (spec.widths[i + 1], spec.widths[i]);
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            for _ in 0..rows * cols {
                data.push(F::of(rng.gen::<f64>() * 2.0 * limit - limit));
            }
            data.extend(std::iter::repeat(F::zero()).take(rows));
            if i < last {
                data.push(F::of(1.0 / spec.scaling));
            }
        }
        Ok(NetworkParams { spec, data })
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    /// Flat view in pack order.
    pub fn pack(&self) -> &[F] {
        &self.data
    }

    /// Rebuilds a network from a flat vector; the length must match the
    /// architecture exactly.
    pub fn unpack(spec: ArchitectureSpec, data: Vec<F>) -> Result<Self> {
        spec.validate()?;
        if data.len() != spec.param_count() {
            return Err(Error::rejected(format!(
                "flat parameter vector has {} entries, architecture needs {}",
                data.len(),
                spec.param_count()
            )));
        }
        Ok(NetworkParams { spec, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.data.len() * 8);
        buf.extend_from_slice(b"DDPN");
        buf.push(1u8);
        buf.push(match F::PRECISION {
            Precision::F32 => 32,
            Precision::F64 => 64,
        });
        buf.push(self.spec.activation.tag());
        buf.push(0u8);
        buf.extend_from_slice(&self.spec.scaling.to_le_bytes());
        buf.extend_from_slice(&(self.spec.widths.len() as u32).to_le_bytes());
        for &w in &self.spec.widths {
            buf.extend_from_slice(&(w as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for &v in &self.data {
            match F::PRECISION {
                Precision::F32 => buf.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
                Precision::F64 => buf.extend_from_slice(&v.f64().to_le_bytes()),
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if at + n > bytes.len() {
                return Err(Error::rejected("checkpoint truncated"));
            }
            let s = &bytes[at..at + n];
            at += n;
            Ok(s)
        };
        if take(4)? != b"DDPN" {
            return Err(Error::rejected("not a checkpoint file (bad magic)"));
        }
        if take(1)?[0] != 1 {
            return Err(Error::rejected("unsupported checkpoint version"));
        }
        let prec = take(1)?[0];
        let want = match F::PRECISION {
            Precision::F32 => 32,
            Precision::F64 => 64,
        };
        if prec != want {
            return Err(Error::rejected(format!(
                "checkpoint precision is {prec}-bit, run expects {want}-bit"
            )));
        }
        let activation = Activation::from_tag(take(1)?[0])?;
        take(1)?;
        let scaling = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let nw = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut widths = Vec::with_capacity(nw);
        for _ in 0..nw {
            widths.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let v = match F::PRECISION {
                Precision::F32 => {
                    f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64
                }
                Precision::F64 => f64::from_le_bytes(take(8)?.try_into().unwrap()),
            };
            data.push(F::of(v));
        }
        let spec = ArchitectureSpec { widths, activation, scaling };
        NetworkParams::unpack(spec, data)
    }
}

/// Registers every parameter as a tape leaf, in pack order. The returned
/// handles are contiguous, so affine rows fuse into single dot nodes.
pub fn register_params<F: Real>(g: &mut Graph<F>, net: &NetworkParams<F>) -> Vec<Var> {
    net.data.iter().map(|&v| g.leaf(v)).collect()
}

/// One vector per jet component; `d1[slot]`/`d2[slot]` follow the tracked
/// dimension order. `None` marks a structurally zero lane.
struct Lanes<V> {
    val: Vec<V>,
    d1: Vec<Option<Vec<V>>>,
    d2: Vec<Option<Vec<V>>>,
}

fn validate_dims(spec: &ArchitectureSpec, point: &[f64], tracked: &[usize], second: &[usize]) -> Result<()> {
    spec.validate()?;
    if point.len() != spec.input_width() {
        return Err(Error::rejected(format!(
            "point has {} coordinates, network input width is {}",
            point.len(),
            spec.input_width()
        )));
    }
    for &d in tracked {
        if d >= spec.input_width() {
            return Err(Error::rejected(format!("tracked dimension {d} out of range")));
        }
    }
    for w in tracked.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::rejected("tracked dimensions must be strictly increasing"));
        }
    }
    for &d in second {
        if !tracked.contains(&d) {
            return Err(Error::rejected(format!(
                "second-derivative dimension {d} is not tracked"
            )));
        }
    }
    Ok(())
}

/// Core jet-mode forward pass. `tracked` selects the input dimensions that
/// carry first derivatives; `second` (a subset) selects which of those also
/// carry pure second derivatives. Returns one jet per network output.
pub fn forward_jet_on<A: Algebra>(
    alg: &mut A,
    spec: &ArchitectureSpec,
    params: &[A::Value],
    point: &[f64],
    tracked: &[usize],
    second: &[usize],
) -> Result<Vec<Jet2<A::Value>>> {
    validate_dims(spec, point, tracked, second)?;
    if params.len() != spec.param_count() {
        return Err(Error::rejected(format!(
            "parameter slice has {} entries, architecture needs {}",
            params.len(),
            spec.param_count()
        )));
    }
    let layouts = spec.layouts();
    let want_d2: Vec<bool> = tracked.iter().map(|d| second.contains(d)).collect();

    // Input layer: affine over the raw coordinates. First-derivative lanes
    // are exactly the weight columns, second-derivative lanes are zero.
    let lay0 = layouts[0];
    let x: Vec<A::Value> =
        point.iter().map(|&c| alg.constant(A::F::of(c))).collect();
    let mut lanes = {
        let mut val = Vec::with_capacity(lay0.rows);
        for r in 0..lay0.rows {
            let row = &params[lay0.w + r * lay0.cols..lay0.w + (r + 1) * lay0.cols];
            let d = alg.dot(row, &x);
            val.push(alg.add(d, params[lay0.b + r]));
        }
        let d1 = tracked
            .iter()
            .map(|&dim| {
                Some((0..lay0.rows).map(|r| params[lay0.w + r * lay0.cols + dim]).collect())
            })
            .collect();
        Lanes { val, d1, d2: vec![None; tracked.len()] }
    };

    for i in 1..spec.n_layers() {
        let slope_at = layouts[i - 1].slope.expect("hidden layer carries a slope");
        let sn = alg.scale(params[slope_at], A::F::of(spec.scaling));
        lanes = activate_lanes(alg, lanes, sn, spec.activation, &want_d2);
        lanes = affine_lanes(alg, &layouts[i], params, lanes);
    }

    let zero_fill = |alg: &mut A, want: bool, lane: &Option<Vec<A::Value>>, r: usize| {
        match lane {
            Some(l) => Some(l[r]),
            None if want => Some(alg.constant(A::F::zero())),
            None => None,
        }
    };
    let out = (0..spec.output_width())
        .map(|r| {
            let d1 = (0..tracked.len())
                .map(|s| zero_fill(alg, true, &lanes.d1[s], r))
                .collect();
            let d2 = (0..tracked.len())
                .map(|s| zero_fill(alg, want_d2[s], &lanes.d2[s], r))
                .collect();
            Jet2::new(lanes.val[r], d1, d2)
        })
        .collect();
    Ok(out)
}

fn affine_lanes<A: Algebra>(
    alg: &mut A,
    lay: &LayerLayout,
    params: &[A::Value],
    lanes: Lanes<A::Value>,
) -> Lanes<A::Value> {
    let apply = |alg: &mut A, lane: &[A::Value]| -> Vec<A::Value> {
        let src = alg.contiguous(lane);
        (0..lay.rows)
            .map(|r| {
                let row = &params[lay.w + r * lay.cols..lay.w + (r + 1) * lay.cols];
                alg.dot(row, &src)
            })
            .collect()
    };
    let mut val = apply(alg, &lanes.val);
    for r in 0..lay.rows {
        val[r] = alg.add(val[r], params[lay.b + r]);
    }
    let map_lane = |alg: &mut A, lane: Option<Vec<A::Value>>| lane.map(|l| apply(alg, &l));
    Lanes {
        val,
        d1: lanes.d1.into_iter().map(|l| map_lane(alg, l)).collect(),
        d2: lanes.d2.into_iter().map(|l| map_lane(alg, l)).collect(),
    }
}

/// Slope-scaled activation applied component-wise with the jet chain rule:
/// out = phi(s h), out_t = phi'(s h) s h_t,
/// out_tt = phi''(s h) (s h_t)^2 + phi'(s h) s h_tt.
///
/// Each output lane is emitted as one uninterrupted pass so lanes stay
/// contiguous on the tape and the following affine step fuses its dot
/// products without gather copies.
fn activate_lanes<A: Algebra>(
    alg: &mut A,
    lanes: Lanes<A::Value>,
    sn: A::Value,
    act: Activation,
    want_d2: &[bool],
) -> Lanes<A::Value> {
    let n = lanes.val.len();
    let slots = lanes.d1.len();
    let need_dd = want_d2.iter().enumerate().any(|(s, &w)| w && lanes.d1[s].is_some());

    let mut dphi = Vec::with_capacity(n);
    let mut ddphi = if need_dd { Vec::with_capacity(n) } else { Vec::new() };
    // Value lane first and uninterrupted, so it stays contiguous.
    let val: Vec<A::Value> = match act {
        Activation::Tanh => {
            let t: Vec<A::Value> = lanes.val.iter().map(|&h| alg.tanh_mul(sn, h)).collect();
            let one = alg.constant(A::F::one());
            for &ti in &t {
                let sq = alg.square(ti);
                dphi.push(alg.sub(one, sq));
            }
            if need_dd {
                for i in 0..n {
                    let td = alg.mul(t[i], dphi[i]);
                    ddphi.push(alg.scale(td, A::F::of(-2.0)));
                }
            }
            t
        }
        Activation::Sin => {
            let s: Vec<A::Value> = lanes.val.iter().map(|&h| alg.sin_mul(sn, h)).collect();
            dphi = lanes.val.iter().map(|&h| alg.cos_mul(sn, h)).collect();
            if need_dd {
                ddphi = s.iter().map(|&si| alg.neg(si)).collect();
            }
            s
        }
        Activation::Cos => {
            let c: Vec<A::Value> = lanes.val.iter().map(|&h| alg.cos_mul(sn, h)).collect();
            for &h in &lanes.val {
                let s = alg.sin_mul(sn, h);
                dphi.push(alg.neg(s));
            }
            if need_dd {
                ddphi = c.iter().map(|&ci| alg.neg(ci)).collect();
            }
            c
        }
    };

    let mut d1: Vec<Option<Vec<A::Value>>> = Vec::with_capacity(slots);
    let mut sh_lanes: Vec<Option<Vec<A::Value>>> = Vec::with_capacity(slots);
    for s in 0..slots {
        match lanes.d1[s].as_ref() {
            // Slots that also carry a second derivative materialize the
            // scaled slope s*h_t for reuse; first-derivative-only slots fuse
            // the whole triple product.
            Some(src) if want_d2[s] => {
                let sh: Vec<A::Value> = src.iter().map(|&x| alg.mul(sn, x)).collect();
                let out: Vec<A::Value> =
                    (0..n).map(|i| alg.mul(dphi[i], sh[i])).collect();
                sh_lanes.push(Some(sh));
                d1.push(Some(out));
            }
            Some(src) => {
                let out: Vec<A::Value> =
                    (0..n).map(|i| alg.mul3(dphi[i], sn, src[i])).collect();
                sh_lanes.push(None);
                d1.push(Some(out));
            }
            None => {
                sh_lanes.push(None);
                d1.push(None);
            }
        }
    }

    let mut d2: Vec<Option<Vec<A::Value>>> = Vec::with_capacity(slots);
    for s in 0..slots {
        let Some(sh) = sh_lanes[s].as_ref() else {
            d2.push(None);
            continue;
        };
        let out = match lanes.d2[s].as_ref() {
            Some(src2) => {
                let t1: Vec<A::Value> =
                    (0..n).map(|i| alg.mul_sq(ddphi[i], sh[i])).collect();
                let sh2: Vec<A::Value> =
                    src2.iter().map(|&x| alg.mul(sn, x)).collect();
                (0..n).map(|i| alg.fma(dphi[i], sh2[i], t1[i])).collect()
            }
            None => (0..n).map(|i| alg.mul_sq(ddphi[i], sh[i])).collect(),
        };
        d2.push(Some(out));
    }
    Lanes { val, d1, d2 }
}

/// Plain value forward pass (no derivative lanes).
pub fn forward_on<A: Algebra>(
    alg: &mut A,
    spec: &ArchitectureSpec,
    params: &[A::Value],
    point: &[f64],
) -> Result<Vec<A::Value>> {
    let jets = forward_jet_on(alg, spec, params, point, &[], &[])?;
    Ok(jets.into_iter().map(|j| j.val).collect())
}

/// Convenience f-precision forward pass on bare floats.
pub fn forward<F: Real>(net: &NetworkParams<F>, point: &[f64]) -> Result<Vec<F>> {
    let mut alg = crate::autodiff::Plain::<F>::new();
    forward_on(&mut alg, &net.spec, &net.data, point)
}

/// Extended jet mode with mixed second derivatives. A straightforward
/// per-neuron propagation; not used on the training path.
pub fn forward_jet_mixed_on<A: Algebra>(
    alg: &mut A,
    spec: &ArchitectureSpec,
    params: &[A::Value],
    point: &[f64],
    tracked: &[usize],
) -> Result<Vec<JetFull<A::Value>>> {
    validate_dims(spec, point, tracked, tracked)?;
    if params.len() != spec.param_count() {
        return Err(Error::rejected("parameter slice length mismatch"));
    }
    let dims = tracked.len();
    let layouts = spec.layouts();

    let mut cur: Vec<JetFull<A::Value>> = (0..spec.input_width())
        .map(|d| {
            let c = alg.constant(A::F::of(point[d]));
            let mut j = JetFull::constant_like(dims, c);
            for (slot, &td) in tracked.iter().enumerate() {
                if td == d {
                    j.d1[slot] = Some(alg.constant(A::F::one()));
                }
            }
            j
        })
        .collect();

    for i in 0..spec.n_layers() {
        if i > 0 {
            let slope_at = layouts[i - 1].slope.expect("hidden layer carries a slope");
            let sn = alg.scale(params[slope_at], A::F::of(spec.scaling));
            cur = cur
                .iter()
                .map(|j| crate::autodiff::full_activate(alg, dims, j, Some(sn), spec.activation))
                .collect();
        }
        let lay = &layouts[i];
        let mut next = Vec::with_capacity(lay.rows);
        for r in 0..lay.rows {
            let bias = params[lay.b + r];
            let mut acc = JetFull::constant_like(dims, bias);
            for c in 0..lay.cols {
                let w = params[lay.w + r * lay.cols + c];
                acc = crate::autodiff::full_axpy_value(alg, w, &cur[c], &acc);
            }
            next.push(acc);
        }
        cur = next;
    }
    Ok(cur)
}
