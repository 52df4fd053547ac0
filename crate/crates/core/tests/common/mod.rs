//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use pcca::baseline::{LaneGeometry, PurePursuit};
use pcca::geometry::{ellipse_h, ellipse_h_dot, road_rows, CbfGains, EllipseSpec, RailFn};
use pcca::pcca::{build_qp, feasible_fallback, FilterContext, PccaConfig, PccaState, Rails, SensitivityCoeffs};
use pcca::qp::{QpProblem, QpSolution, SparseRow};
use pcca::vehicle::{step, AgentState, ControlInput, VehicleParams};

// ---------------------------------------------------------------- QP oracle

/// Random strictly convex QP with a known strictly feasible point.
pub fn random_qp(rng: &mut impl Rng, n: usize) -> QpProblem {
    let m = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let h = m.transpose() * &m / n as f64 + DMatrix::identity(n, n) * rng.gen_range(0.1..2.0);
    let hess: Vec<f64> = (0..n * n).map(|k| h[(k / n, k % n)]).collect();
    let linear: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let z0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let n_rows = rng.gen_range(0..=n + 10);
    let rows = (0..n_rows)
        .map(|_| {
            let nnz = rng.gen_range(1..=n.min(6));
            let mut coeffs: Vec<(usize, f64)> = Vec::with_capacity(nnz);
            while coeffs.len() < nnz {
                let i = rng.gen_range(0..n);
                if coeffs.iter().all(|c| c.0 != i) {
                    coeffs.push((i, rng.gen_range(-2.0..2.0)));
                }
            }
            let at_z0: f64 = coeffs.iter().map(|&(i, a)| a * z0[i]).sum();
            SparseRow::new(coeffs, -at_z0 + rng.gen_range(0.01..1.0))
        })
        .collect();
    let lower = z0.iter().map(|z| if rng.gen_bool(0.5) { z - rng.gen_range(0.05..2.0) } else { f64::NEG_INFINITY }).collect();
    let upper = z0.iter().map(|z| if rng.gen_bool(0.5) { z + rng.gen_range(0.05..2.0) } else { f64::INFINITY }).collect();
    QpProblem::new(hess, linear).with_rows(rows).with_bounds(lower, upper)
}

/// All constraints of `p` as dense `G z + g >= 0`.
fn dense_constraints(p: &QpProblem) -> (DMatrix<f64>, DVector<f64>) {
    let n = p.dim();
    let mut g_rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for r in &p.rows {
        let mut a = vec![0.0; n];
        for &(i, c) in &r.coeffs {
            a[i] += c;
        }
        g_rows.push((a, r.offset));
    }
    for i in 0..n {
        if p.lower[i].is_finite() {
            let mut a = vec![0.0; n];
            a[i] = 1.0;
            g_rows.push((a, -p.lower[i]));
        }
        if p.upper[i].is_finite() {
            let mut a = vec![0.0; n];
            a[i] = -1.0;
            g_rows.push((a, p.upper[i]));
        }
    }
    let m = g_rows.len();
    let g = DMatrix::from_fn(m, n, |r, c| g_rows[r].0[c]);
    let off = DVector::from_fn(m, |r, _| g_rows[r].1);
    (g, off)
}

/// Worst violation of any constraint at `z` (0 when feasible).
pub fn max_violation(p: &QpProblem, z: &[f64]) -> f64 {
    let (g, off) = dense_constraints(p);
    let v = &g * DVector::from_column_slice(z) + off;
    v.iter().fold(0.0f64, |acc, x| acc.max(-x))
}

/// Lower bound on the optimal value from accelerated projected gradient on
/// the dual, run until the gap to `upper` closes below `tol` or the budget
/// runs out. Returns the best dual value found.
pub fn dual_lower_bound(p: &QpProblem, upper: f64, tol: f64, max_iter: usize) -> f64 {
    let n = p.dim();
    let h = DMatrix::from_fn(n, n, |i, j| p.hessian(i, j));
    let h_inv = h.cholesky().expect("positive definite").inverse();
    let c = DVector::from_column_slice(&p.linear);
    let (g, off) = dense_constraints(p);
    let m = g.nrows();

    let dual = |mu: &DVector<f64>| -> (f64, DVector<f64>) {
        let q = g.transpose() * mu - &c;
        let z = &h_inv * &q;
        let value = -0.5 * q.dot(&z) - off.dot(mu);
        let grad = -(&g * &z + &off);
        (value, grad)
    };
    if m == 0 {
        return dual(&DVector::zeros(0)).0;
    }
    let lip = (&g * &h_inv * g.transpose()).symmetric_eigenvalues().max().max(1e-12);
    let mut mu = DVector::<f64>::zeros(m);
    let mut y = mu.clone();
    let mut t = 1.0f64;
    let mut best = f64::NEG_INFINITY;
    for _ in 0..max_iter {
        let (_, grad) = dual(&y);
        let next = (&y + grad / lip).map(|x| x.max(0.0));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &mu) * ((t - 1.0) / t_next);
        mu = next;
        t = t_next;
        best = best.max(dual(&mu).0);
        if upper - best <= tol {
            break;
        }
    }
    best
}

/// Relative duality gap certified by the oracle for a solver answer.
pub fn certified_gap(p: &QpProblem, sol: &QpSolution) -> f64 {
    let f = p.objective(&sol.z);
    let scale = f.abs().max(1.0);
    let lb = dual_lower_bound(p, f, 1e-8 * scale, 200_000);
    (f - lb) / scale
}

// ------------------------------------------------------ derivative oracle

/// Exact-enough plant flow for finite differences.
pub fn flow(s: &AgentState, u: ControlInput, params: &VehicleParams, t: f64) -> AgentState {
    let n = ((t / 1e-3).ceil() as usize).max(1);
    let h = t / n as f64;
    let mut out = *s;
    for _ in 0..n {
        out = step(&out, u, params, h).expect("finite");
    }
    out
}

/// Random pair of moving vehicles with the second centre away from the
/// first one's focal points.
pub fn random_pair(rng: &mut impl Rng, spec: &EllipseSpec) -> (AgentState, AgentState) {
    loop {
        let si = AgentState::new(0.0, rng.gen_range(-2.0..2.0), rng.gen_range(-0.4..0.4), rng.gen_range(5.0..30.0));
        let sj = AgentState::new(
            rng.gen_range(-25.0..25.0),
            rng.gen_range(-6.0..6.0),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(5.0..30.0),
        );
        let rho = spec.rho();
        let (sn, cs) = si.theta.sin_cos();
        let far = [1.0, -1.0].iter().all(|k| {
            let f = [si.x + k * rho * cs, si.y + k * rho * sn];
            (f[0] - sj.x).hypot(f[1] - sj.y) > 1.0
        });
        if far {
            return (si, sj);
        }
    }
}

pub fn random_input(rng: &mut impl Rng) -> ControlInput {
    ControlInput::new(rng.gen_range(-0.3..0.3), rng.gen_range(-6.0..4.0))
}

/// `h` with the ellipse axis frozen at `axis`: under the focal-point
/// approximation the foci translate with the centre but do not rotate.
fn h_frozen(a: &AgentState, b: &AgentState, axis: f64, spec: &EllipseSpec) -> f64 {
    ellipse_h(a.position(), axis, b.position(), spec)
}

/// Independent `h_dot` with a frozen axis: unit focal vectors dotted with the
/// relative velocity of the centres.
fn h_dot_frozen(a: &AgentState, b: &AgentState, axis: f64, spec: &EllipseSpec) -> f64 {
    let (sn, cs) = axis.sin_cos();
    let vrel = [a.v * a.theta.cos() - b.v * b.theta.cos(), a.v * a.theta.sin() - b.v * b.theta.sin()];
    [1.0, -1.0]
        .iter()
        .map(|k| {
            let xi = [a.x + k * spec.rho() * cs - b.x, a.y + k * spec.rho() * sn - b.y];
            let n = xi[0].hypot(xi[1]);
            (xi[0] * vrel[0] + xi[1] * vrel[1]) / n
        })
        .sum()
}

/// Central differences at the midpoint of a short arc flown under constant
/// inputs. Returns `(h_dot from the library, h_dot fd, h_ddot fd, midpoint
/// states)`; both differences use the axis frozen at the midpoint.
pub fn fd_derivatives(
    si: &AgentState,
    sj: &AgentState,
    ui: ControlInput,
    uj: ControlInput,
    spec: &EllipseSpec,
    params: &VehicleParams,
    eps: f64,
) -> (f64, f64, f64, (AgentState, AgentState)) {
    let at = |t: f64| (flow(si, ui, params, t), flow(sj, uj, params, t));
    let (am, bm) = at(eps);
    let (ac, bc) = at(2.0 * eps);
    let (ap, bp) = at(3.0 * eps);
    let axis = ac.theta;
    let h_dot_fd = (h_frozen(&ap, &bp, axis, spec) - h_frozen(&am, &bm, axis, spec)) / (2.0 * eps);
    let h_ddot_fd = (h_dot_frozen(&ap, &bp, axis, spec) - h_dot_frozen(&am, &bm, axis, spec)) / (2.0 * eps);
    let analytic = ellipse_h_dot(&ac, &bc, spec).expect("away from foci");
    (analytic, h_dot_fd, h_ddot_fd, (ac, bc))
}

// ------------------------------------------------- fallback feasibility

pub struct FallbackCase {
    pub states: Vec<AgentState>,
    pub w: Vec<[f64; 2]>,
    pub ego: usize,
    pub ego_rails: Rails,
}

/// Multi-agent state inside the admissible set of every inter-agent and
/// road barrier (`h > 0`, `lambda1 h + h_dot >= 0`), found by rejection.
/// With `curved` the ego's right boundary is an arctan guard rail.
pub fn random_admissible(
    rng: &mut impl Rng,
    cfg: &PccaConfig,
    params: &VehicleParams,
    lanes: &LaneGeometry,
    curved: bool,
) -> FallbackCase {
    let outer = Rails { right: RailFn::constant(lanes.right_edge()), left: RailFn::constant(lanes.left_edge()) };
    loop {
        let n = rng.gen_range(2..=6);
        let states: Vec<AgentState> = (0..n)
            .map(|_| {
                AgentState::new(
                    rng.gen_range(-60.0..60.0),
                    rng.gen_range(lanes.right_edge() + 0.3..lanes.left_edge() - 0.3),
                    rng.gen_range(-0.08..0.08),
                    rng.gen_range(0.0..32.0),
                )
            })
            .collect();
        let ego = rng.gen_range(0..n);
        let ego_rails = if curved {
            let (lo, hi) = (lanes.right_edge(), lanes.divider());
            let right = RailFn::arctan_between(lo, hi - 0.2, rng.gen_range(0.02..0.1), rng.gen_range(-40.0..40.0));
            Rails { right, left: outer.left }
        } else {
            outer
        };
        if admissible(&states, ego, &ego_rails, &outer, &cfg.spec, &cfg.gains, params) {
            let w = (0..n).map(|k| if k == ego { [0.0; 2] } else { [rng.gen_range(-0.2..0.2), rng.gen_range(-6.0..6.0)] }).collect();
            return FallbackCase { states, w, ego, ego_rails };
        }
    }
}

fn admissible(
    states: &[AgentState],
    ego: usize,
    ego_rails: &Rails,
    outer: &Rails,
    spec: &EllipseSpec,
    gains: &CbfGains,
    params: &VehicleParams,
) -> bool {
    for (i, si) in states.iter().enumerate() {
        for (j, sj) in states.iter().enumerate() {
            if i == j {
                continue;
            }
            let h = ellipse_h(si.position(), si.theta, sj.position(), spec);
            let Ok(hd) = ellipse_h_dot(si, sj, spec) else { return false };
            if !(h > 0.0 && gains.lambda1 * h + hd >= 0.0) {
                return false;
            }
        }
        let rails = if i == ego { ego_rails } else { outer };
        // Road barrier and its rate, from the rows at zero input and zero gains.
        let zero = CbfGains { lambda1: 0.0, lambda2: 0.0 };
        let unit = CbfGains { lambda1: 1.0, lambda2: 0.0 };
        let (r0, l0) = road_rows(i, si, &rails.right, &rails.left, &zero, params);
        let (r1, l1) = road_rows(i, si, &rails.right, &rails.left, &unit, params);
        for (a0, a1, rail, sign) in [(r0.a, r1.a, &rails.right, 1.0), (l0.a, l1.a, &rails.left, -1.0)] {
            let h = sign * (si.y - rail.value(si.x));
            let hd = a1 - a0;
            if !(h > 0.0 && gains.lambda1 * h + hd >= 0.0) {
                return false;
            }
        }
    }
    true
}

/// Smallest row value of the assembled QP at the fallback point
/// `u_j = [0, -lambda1 v_j] - w_j` with zero slack and no box limits.
pub fn fallback_margin(case: &FallbackCase, cfg: &PccaConfig, params: &VehicleParams, lanes: &LaneGeometry) -> f64 {
    let mut cfg = *cfg;
    cfg.prune_redundant_rows = false;
    let tracker = PurePursuit::default();
    let outer = Rails { right: RailFn::constant(lanes.right_edge()), left: RailFn::constant(lanes.left_edge()) };
    let ctx = FilterContext { config: &cfg, params, lanes, tracker: &tracker, other_rails: outer };
    let mut pcca = PccaState::new();
    for (k, w) in case.w.iter().enumerate() {
        if k != case.ego {
            pcca.set_w(k, *w);
        }
    }
    let others: Vec<(usize, AgentState)> =
        case.states.iter().enumerate().filter(|(k, _)| *k != case.ego).map(|(k, s)| (k, *s)).collect();
    let qp = build_qp((case.ego, &case.states[case.ego]), ControlInput::ZERO, &others, &case.ego_rails, &pcca, &ctx);
    let mut z = vec![0.0; qp.problem.dim()];
    for (slot, &id) in qp.agents.iter().enumerate() {
        let u = feasible_fallback(case.states[id].v, cfg.gains.lambda1, case.w[id]);
        z[2 * slot] = u.delta;
        z[2 * slot + 1] = u.a_c;
    }
    qp.problem.rows.iter().map(|r| r.eval(&z)).fold(f64::INFINITY, f64::min)
}

/// Curvature (input-free, gain-free) part of the ego's road rows. It is the
/// only term that can push a road row negative at the fallback point.
pub fn rail_curvature_floor(case: &FallbackCase, params: &VehicleParams) -> f64 {
    let zero = CbfGains { lambda1: 0.0, lambda2: 0.0 };
    let s = &case.states[case.ego];
    let (r, l) = road_rows(case.ego, s, &case.ego_rails.right, &case.ego_rails.left, &zero, params);
    let drift = |row: &pcca::geometry::CbfRow| row.evaluate(|_| [0.0, 0.0]);
    drift(&r).min(drift(&l)).min(0.0)
}

pub fn test_coeffs() -> SensitivityCoeffs {
    SensitivityCoeffs { c0: 100.0, c2: 50.0, c3: 10.0 }
}
