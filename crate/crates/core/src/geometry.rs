//! Elliptic inter-agent barriers, road barriers and body-rectangle checks.
//!
//! An agent `i` is protected by an ellipse aligned with its heading; the
//! barrier `h_ij` is positive while the centre of agent `j` lies outside it.
//! Focal points are taken to translate with the vehicle centre, so the
//! steering input first shows up in the second derivative through the
//! heading rate, the same place as the acceleration input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehicle::{AgentState, VehicleParams};

/// Floor on focal-vector norms.
pub const FOCAL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EllipseAxes", into = "EllipseAxes")]
pub struct EllipseSpec {
    r: f64,
    alpha: f64,
    rho: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EllipseAxes {
    r: f64,
    alpha: f64,
}

impl TryFrom<EllipseAxes> for EllipseSpec {
    type Error = Error;
    fn try_from(a: EllipseAxes) -> Result<Self> {
        EllipseSpec::new(a.r, a.alpha)
    }
}

impl From<EllipseSpec> for EllipseAxes {
    fn from(s: EllipseSpec) -> Self {
        EllipseAxes { r: s.r, alpha: s.alpha }
    }
}

impl EllipseSpec {
    /// `r` is the semi-minor axis, `alpha` the major/minor ratio.
    pub fn new(r: f64, alpha: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) || !(alpha > 1.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("invalid ellipse r={r}, alpha={alpha}")));
        }
        Ok(Self { r, alpha, rho: r * (alpha * alpha - 1.0).sqrt() })
    }

    /// The 3.8 m x 8.36 m ellipse. Its 4.18 m semi-major axis is shorter
    /// than a body, so following vehicles can touch with `h > 0`.
    pub fn compact() -> Self {
        Self::new(1.9, 2.2).expect("valid ellipse")
    }

    /// Controller ellipse used by the scenarios, 6.2 m x 11.78 m. Covers the
    /// aligned two-body footprint of the default vehicle while leaving
    /// side-by-side neighbours one lane apart some lateral room.
    pub fn barrier_default() -> Self {
        Self::new(3.1, 1.9).expect("valid default ellipse")
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Focal distance from the centre.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn semi_major(&self) -> f64 {
        self.alpha * self.r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbfGains {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for CbfGains {
    fn default() -> Self {
        Self { lambda1: 0.4, lambda2: 4.0 }
    }
}

impl CbfGains {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 > 0.0 && lambda1 <= lambda2) {
            return Err(Error::Config(format!("CBF gains need 0 < lambda1 <= lambda2, got {lambda1}, {lambda2}")));
        }
        Ok(Self { lambda1, lambda2 })
    }

    pub fn l0(&self) -> f64 {
        self.lambda1 * self.lambda2
    }

    pub fn l1(&self) -> f64 {
        self.lambda1 + self.lambda2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RowKind {
    /// Barrier of agent `j`'s ellipse against agent `k`'s centre.
    InterAgent { j: usize, k: usize },
    RoadRight { k: usize },
    RoadLeft { k: usize },
}

/// One constraint `a + sum_k b_k (u_k + w_k) >= 0`.
///
/// The disturbance estimates enter through the same rows as the controls.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfRow {
    pub a: f64,
    pub b_terms: Vec<(usize, [f64; 2])>,
    pub kind: RowKind,
}

impl CbfRow {
    pub fn is_road(&self) -> bool {
        !matches!(self.kind, RowKind::InterAgent { .. })
    }

    /// Evaluates `a + b·u` for per-agent inputs looked up by id.
    pub fn evaluate(&self, mut u_of: impl FnMut(usize) -> [f64; 2]) -> f64 {
        self.a
            + self
                .b_terms
                .iter()
                .map(|(id, b)| {
                    let u = u_of(*id);
                    b[0] * u[0] + b[1] * u[1]
                })
                .sum::<f64>()
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

fn focal_points(xi: [f64; 2], theta_i: f64, spec: &EllipseSpec) -> [[f64; 2]; 2] {
    let (s, c) = theta_i.sin_cos();
    [
        [xi[0] + spec.rho * c, xi[1] + spec.rho * s],
        [xi[0] - spec.rho * c, xi[1] - spec.rho * s],
    ]
}

/// Sum of focal distances to `xj` minus the major axis length.
pub fn ellipse_h(xi: [f64; 2], theta_i: f64, xj: [f64; 2], spec: &EllipseSpec) -> f64 {
    let [f1, f2] = focal_points(xi, theta_i, spec);
    norm(sub(f1, xj)) + norm(sub(f2, xj)) - 2.0 * spec.semi_major()
}

pub fn h0_metric(si: &AgentState, sj: &AgentState, spec0: &EllipseSpec) -> f64 {
    ellipse_h(si.position(), si.theta, sj.position(), spec0)
}

fn relative_velocity(si: &AgentState, sj: &AgentState) -> [f64; 2] {
    let (hi, hj) = (si.heading(), sj.heading());
    [si.v * hi[0] - sj.v * hj[0], si.v * hi[1] - sj.v * hj[1]]
}

/// Unit focal vectors `xi_k / |xi_k|` and their norms, floored at [`FOCAL_EPS`].
fn focal_units(si: &AgentState, sj: &AgentState, spec: &EllipseSpec) -> ([[f64; 2]; 2], [f64; 2], bool) {
    let fp = focal_points(si.position(), si.theta, spec);
    let mut units = [[0.0; 2]; 2];
    let mut norms = [0.0; 2];
    let mut degenerate = false;
    for k in 0..2 {
        let xi = sub(fp[k], sj.position());
        let n = norm(xi);
        degenerate |= n < FOCAL_EPS;
        let n = n.max(FOCAL_EPS);
        units[k] = [xi[0] / n, xi[1] / n];
        norms[k] = n;
    }
    (units, norms, degenerate)
}

pub fn ellipse_h_dot(si: &AgentState, sj: &AgentState, spec: &EllipseSpec) -> Result<f64> {
    let (units, _, degenerate) = focal_units(si, sj, spec);
    if degenerate {
        return Err(Error::DegenerateGeometry("agent centre on a focal point"));
    }
    let vrel = relative_velocity(si, sj);
    Ok(dot(units[0], vrel) + dot(units[1], vrel))
}

/// Second-order barrier row for the ellipse of `i` against the centre of `j`.
pub fn ellipse_h_row(
    (i, si): (usize, &AgentState),
    (j, sj): (usize, &AgentState),
    spec: &EllipseSpec,
    gains: &CbfGains,
    params: &VehicleParams,
) -> Result<CbfRow> {
    let (_, _, degenerate) = focal_units(si, sj, spec);
    if degenerate {
        return Err(Error::DegenerateGeometry("agent centre on a focal point"));
    }
    Ok(ellipse_h_row_guarded((i, si), (j, sj), spec, gains, params))
}

/// As [`ellipse_h_row`] with the focal-norm floor applied instead of failing.
pub(crate) fn ellipse_h_row_guarded(
    (i, si): (usize, &AgentState),
    (j, sj): (usize, &AgentState),
    spec: &EllipseSpec,
    gains: &CbfGains,
    params: &VehicleParams,
) -> CbfRow {
    let (units, norms, _) = focal_units(si, sj, spec);
    let vrel = relative_velocity(si, sj);
    let vrel_sq = dot(vrel, vrel);
    let h = ellipse_h(si.position(), si.theta, sj.position(), spec);
    let mut h_dot = 0.0;
    let mut curvature = 0.0;
    let mut sum_unit = [0.0; 2];
    for k in 0..2 {
        let p = dot(units[k], vrel);
        h_dot += p;
        // |V|^2 (1 - cos^2 beta) = |V|^2 - (unit . V)^2
        curvature += (vrel_sq - p * p).max(0.0) / norms[k];
        sum_unit[0] += units[k][0];
        sum_unit[1] += units[k][1];
    }
    let lw = params.wheelbase;
    let gamma_row = |s: &AgentState| {
        let (sn, cs) = s.theta.sin_cos();
        let lateral = -sn * sum_unit[0] + cs * sum_unit[1];
        let longitudinal = cs * sum_unit[0] + sn * sum_unit[1];
        [s.v * s.v / lw * lateral, longitudinal]
    };
    let bi = gamma_row(si);
    let bj = gamma_row(sj);
    CbfRow {
        a: curvature + gains.l1() * h_dot + gains.l0() * h,
        b_terms: vec![(i, bi), (j, [-bj[0], -bj[1]])],
        kind: RowKind::InterAgent { j: i, k: j },
    }
}

/// Lateral road boundary as a function of longitudinal position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RailFn {
    Constant { y: f64 },
    /// `d0 + d1 * atan(d3 * (x - d4))`
    Arctan { d0: f64, d1: f64, d3: f64, d4: f64 },
}

impl RailFn {
    pub fn constant(y: f64) -> Self {
        RailFn::Constant { y }
    }

    /// Arctan rail with the given upstream and downstream asymptotes.
    pub fn arctan_between(upstream: f64, downstream: f64, steepness: f64, midpoint: f64) -> Self {
        RailFn::Arctan {
            d0: 0.5 * (upstream + downstream),
            d1: (downstream - upstream) / std::f64::consts::PI,
            d3: steepness,
            d4: midpoint,
        }
    }

    /// Rail value and its first two derivatives in `x`.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        match *self {
            RailFn::Constant { y } => (y, 0.0, 0.0),
            RailFn::Arctan { d0, d1, d3, d4 } => {
                let s = d3 * (x - d4);
                let q = 1.0 + s * s;
                (d0 + d1 * s.atan(), d1 * d3 / q, -2.0 * d1 * d3 * d3 * s / (q * q))
            }
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.eval(x).0
    }
}

/// Right (`y >= rb_r`) and left (`y <= rb_l`) boundary rows for agent `k`.
pub fn road_rows(
    k: usize,
    s: &AgentState,
    right: &RailFn,
    left: &RailFn,
    gains: &CbfGains,
    params: &VehicleParams,
) -> (CbfRow, CbfRow) {
    let (sn, cs) = s.theta.sin_cos();
    let lw = params.wheelbase;
    let side = |rail: &RailFn, sign: f64| {
        let (rb, d1, d2) = rail.eval(s.x);
        let h = sign * (s.y - rb);
        let h_dot = sign * (s.v * sn - d1 * s.v * cs);
        let drift = -sign * d2 * s.v * s.v * cs * cs;
        let b = [
            sign * s.v * s.v / lw * (cs + d1 * sn),
            sign * (sn - d1 * cs),
        ];
        (drift + gains.l1() * h_dot + gains.l0() * h, b)
    };
    let (ar, br) = side(right, 1.0);
    let (al, bl) = side(left, -1.0);
    (
        CbfRow { a: ar, b_terms: vec![(k, br)], kind: RowKind::RoadRight { k } },
        CbfRow { a: al, b_terms: vec![(k, bl)], kind: RowKind::RoadLeft { k } },
    )
}

/// Body rectangle corners, counter-clockwise.
pub fn body_corners(s: &AgentState, params: &VehicleParams) -> [[f64; 2]; 4] {
    let (sn, cs) = s.theta.sin_cos();
    let (hl, hw) = (params.body_length / 2.0, params.body_width / 2.0);
    let c = |l: f64, w: f64| [s.x + l * cs - w * sn, s.y + l * sn + w * cs];
    [c(hl, -hw), c(hl, hw), c(-hl, hw), c(-hl, -hw)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub overlap: bool,
    /// Euclidean gap between bodies when apart, minus the penetration depth otherwise.
    pub clearance: f64,
}

fn project(poly: &[[f64; 2]; 4], axis: [f64; 2]) -> (f64, f64) {
    poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = dot(*p, axis);
        (lo.min(d), hi.max(d))
    })
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = sub(b, a);
    let t = (dot(sub(p, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
    norm(sub(p, [a[0] + t * ab[0], a[1] + t * ab[1]]))
}

/// Exact oriented-rectangle intersection test.
pub fn collision_check(si: &AgentState, sj: &AgentState, params: &VehicleParams) -> Contact {
    let pa = body_corners(si, params);
    let pb = body_corners(sj, params);
    let axes = [si.heading(), [-si.theta.sin(), si.theta.cos()], sj.heading(), [-sj.theta.sin(), sj.theta.cos()]];
    let mut max_gap = f64::NEG_INFINITY;
    for axis in axes {
        let (a0, a1) = project(&pa, axis);
        let (b0, b1) = project(&pb, axis);
        max_gap = max_gap.max((b0 - a1).max(a0 - b1));
    }
    if max_gap < 0.0 {
        return Contact { overlap: true, clearance: max_gap };
    }
    let mut d = f64::INFINITY;
    for (p, q) in [(&pa, &pb), (&pb, &pa)] {
        for v in p.iter() {
            for e in 0..4 {
                d = d.min(point_segment_distance(*v, q[e], q[(e + 1) % 4]));
            }
        }
    }
    Contact { overlap: false, clearance: d }
}

/// Semi-minor axis of the smallest aspect-`alpha` ellipse that contains the
/// footprint of two aligned bodies, `[-L_v, L_v] x [-W_v, W_v]`.
///
/// With the other centre outside such an ellipse, parallel vehicles cannot
/// touch, whether following, side by side or staggered.
pub fn footprint_radius(params: &VehicleParams, alpha: f64) -> f64 {
    (params.body_length / alpha).hypot(params.body_width)
}

/// Aspect ratio of the `h0` reporting ellipse. Fixed, so reported clearances
/// stay comparable when the controller ellipse is retuned.
pub const REPORTING_ALPHA: f64 = 2.2;

/// Smallest ellipse of aspect `alpha` whose major-axis vertices keep an
/// orthogonally crossing vehicle clear of the protected body.
///
/// The radius is bisected against the exact rectangle test.
pub fn reporting_ellipse(params: &VehicleParams, alpha: f64) -> Result<EllipseSpec> {
    let ego = AgentState::new(0.0, 0.0, 0.0, 0.0);
    let psi = std::f64::consts::FRAC_PI_2;
    let clear = |r: f64| {
        [1.0, -1.0].iter().all(|side| {
            let other = AgentState::new(side * alpha * r, 0.0, psi, 0.0);
            !collision_check(&ego, &other, params).overlap
        })
    };
    let (mut lo, mut hi) = (0.0, params.body_length + params.body_width);
    if !clear(hi) {
        return Err(Error::Config("reporting ellipse search bracket too small".into()));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if clear(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    EllipseSpec::new(hi, alpha)
}
