//! Two-agent instability analysis and sensitivity calibration.
//!
//! Two agents run side by side at `v0`, each steering towards the other's
//! lane with a constant `±δ0` and holding speed with gain `κ`. Linearised
//! about that moving equilibrium, the coupled (lateral sum, longitudinal
//! difference) subsystem has eigenvalues
//!
//! ```text
//!     { 0, 0, -κ/2 ± sqrt(κ²/4 + 4 · 2δ0 / (s_a r v0²) · (δ0 v0 / L_w + L_w / α²)) }
//! ```
//!
//! so one eigenvalue is always positive. `s_a(v)` sets how fast the
//! symmetric stand-off breaks up, and [`calibrate_sensitivity`] inverts the
//! formula to place that eigenvalue at chosen speeds.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EllipseSpec, RailFn};
use crate::pcca::{build_qp, FilterContext, PccaConfig, PccaState, Rails, SensitivityCoeffs};
use crate::baseline::{LaneGeometry, PurePursuit};
use crate::qp::{QpSolver, QpStatus};
use crate::vehicle::{advance, clamp_control, AgentState, ControlInput, VehicleParams};

pub const MPH: f64 = 0.44704;

/// Speed range over which a calibrated `1/s_a` must be positive and increasing.
pub const CALIBRATION_DOMAIN: (f64, f64) = (4.0, 30.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstabilityTargets {
    /// (speed [m/s], unstable eigenvalue [1/s]), speeds increasing.
    pub points: Vec<(f64, f64)>,
    pub delta0: f64,
}

impl InstabilityTargets {
    pub fn ida_fast() -> Self {
        Self { points: vec![(10.0 * MPH, 2.6), (20.0 * MPH, 3.1), (30.0 * MPH, 3.5)], delta0: 0.015 }
    }

    pub fn ida_slow() -> Self {
        let mut t = Self::ida_fast();
        t.points.iter_mut().for_each(|p| p.1 *= 0.5);
        t
    }

    pub fn vgr() -> Self {
        Self { points: vec![(20.0 * MPH, 0.13)], delta0: 0.015 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Calibration("no targets".into()));
        }
        if !(self.delta0 > 0.0) {
            return Err(Error::Calibration("delta0 must be positive".into()));
        }
        for w in self.points.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Calibration("target speeds must be strictly increasing".into()));
            }
        }
        if self.points.iter().any(|p| !(p.0 > 0.0 && p.1 > 0.0)) {
            return Err(Error::Calibration("speeds and eigenvalues must be positive".into()));
        }
        Ok(())
    }
}

/// The instability-defining coupling `2δ0/(r v0²) · (δ0 v0/L_w + L_w/α²)` without `1/s_a`.
fn coupling(v0: f64, delta0: f64, params: &VehicleParams, spec: &EllipseSpec) -> f64 {
    let lw = params.wheelbase;
    2.0 * delta0 / (spec.r() * v0 * v0) * (delta0 * v0 / lw + lw / spec.alpha().powi(2))
}

/// Roots `-κ/2 ± sqrt(...)` as (unstable, stable).
pub fn eigenvalue_pair(v0: f64, s_a: f64, delta0: f64, kappa: f64, params: &VehicleParams, spec: &EllipseSpec) -> (f64, f64) {
    let disc = kappa * kappa / 4.0 + 4.0 * coupling(v0, delta0, params, spec) / s_a;
    let root = disc.sqrt();
    (-kappa / 2.0 + root, -kappa / 2.0 - root)
}

pub fn unstable_eigenvalue(v0: f64, s_a: f64, delta0: f64, kappa: f64, params: &VehicleParams, spec: &EllipseSpec) -> f64 {
    eigenvalue_pair(v0, s_a, delta0, kappa, params, spec).0
}

/// Full spectrum of the coupled subsystem: `{0, 0, unstable, stable}`.
pub fn coupled_spectrum(v0: f64, s_a: f64, delta0: f64, kappa: f64, params: &VehicleParams, spec: &EllipseSpec) -> [f64; 4] {
    let (u, s) = eigenvalue_pair(v0, s_a, delta0, kappa, params, spec);
    [0.0, 0.0, u, s]
}

/// Leading-order unstable eigenvalue of the filter as implemented here.
///
/// Working the KKT conditions of each agent's QP at the equilibrium, the
/// pair row's multiplier balances the steering pushed against `±δ0`, and an
/// offset `Δx` tilts the ellipse normal by `Δx/(α² r)`, which the
/// acceleration picks up with weight `1/s_a`. The longitudinal difference
/// then obeys `Δẍ + κ Δẋ = 2 δ0 L_w/(s_a α² r v0²) Δx`. This differs from
/// [`unstable_eigenvalue`] by a factor of four in the coupling and by the
/// `δ0 v0/L_w` term, which the focal-point approximation drops.
pub fn implemented_loop_eigenvalue(v0: f64, s_a: f64, delta0: f64, kappa: f64, params: &VehicleParams, spec: &EllipseSpec) -> f64 {
    let k = 2.0 * delta0 * params.wheelbase / (s_a * spec.alpha().powi(2) * spec.r() * v0 * v0);
    -kappa / 2.0 + (kappa * kappa / 4.0 + k).sqrt()
}

/// Which eigenvalue expression a calibration inverts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EigenModel {
    /// The closed-form display, [`unstable_eigenvalue`].
    #[default]
    Formula,
    /// The loop as implemented, [`implemented_loop_eigenvalue`].
    Loop,
}

impl EigenModel {
    pub fn eigenvalue(self, v0: f64, s_a: f64, delta0: f64, kappa: f64, params: &VehicleParams, spec: &EllipseSpec) -> f64 {
        match self {
            EigenModel::Formula => unstable_eigenvalue(v0, s_a, delta0, kappa, params, spec),
            EigenModel::Loop => implemented_loop_eigenvalue(v0, s_a, delta0, kappa, params, spec),
        }
    }
}

impl std::str::FromStr for EigenModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "formula" => Ok(EigenModel::Formula),
            "loop" => Ok(EigenModel::Loop),
            _ => Err(Error::Config(format!("unknown eigenvalue model `{s}` (expected formula or loop)"))),
        }
    }
}

/// `1/s_a` that places the unstable eigenvalue at `lambda` for speed `v0`.
pub fn required_inverse_sensitivity(v0: f64, lambda: f64, delta0: f64, kappa: f64, params: &VehicleParams, spec: &EllipseSpec) -> f64 {
    required_inverse_sensitivity_for(EigenModel::Formula, v0, lambda, delta0, kappa, params, spec)
}

pub fn required_inverse_sensitivity_for(
    model: EigenModel,
    v0: f64,
    lambda: f64,
    delta0: f64,
    kappa: f64,
    params: &VehicleParams,
    spec: &EllipseSpec,
) -> f64 {
    // both models read λ² + κλ = coupling / s_a
    let k = lambda * lambda + kappa * lambda;
    match model {
        EigenModel::Formula => k / (4.0 * coupling(v0, delta0, params, spec)),
        EigenModel::Loop => k * spec.alpha().powi(2) * spec.r() * v0 * v0 / (2.0 * delta0 * params.wheelbase),
    }
}

/// Fits `1/s_a = c0 + c2 v² + c3 v³` through three targets, or `c2 v²` through one.
pub fn calibrate_sensitivity(
    targets: &InstabilityTargets,
    kappa: f64,
    params: &VehicleParams,
    spec: &EllipseSpec,
) -> Result<SensitivityCoeffs> {
    calibrate_sensitivity_for(EigenModel::Formula, targets, kappa, params, spec)
}

pub fn calibrate_sensitivity_for(
    model: EigenModel,
    targets: &InstabilityTargets,
    kappa: f64,
    params: &VehicleParams,
    spec: &EllipseSpec,
) -> Result<SensitivityCoeffs> {
    targets.validate()?;
    let inv: Vec<(f64, f64)> = targets
        .points
        .iter()
        .map(|&(v, l)| (v, required_inverse_sensitivity_for(model, v, l, targets.delta0, kappa, params, spec)))
        .collect();
    let coeffs = match inv.len() {
        1 => {
            let (v, y) = inv[0];
            SensitivityCoeffs { c0: 0.0, c2: y / (v * v), c3: 0.0 }
        }
        3 => {
            let m = Matrix3::from_fn(|r, c| {
                let v = inv[r].0;
                [1.0, v * v, v * v * v][c]
            });
            let y = Vector3::new(inv[0].1, inv[1].1, inv[2].1);
            let lu = m.lu();
            let det = lu.determinant();
            if !det.is_finite() || det.abs() < 1e-12 * m.norm().powi(3) {
                return Err(Error::Calibration("singular calibration system".into()));
            }
            let c = lu.solve(&y).ok_or_else(|| Error::Calibration("singular calibration system".into()))?;
            SensitivityCoeffs { c0: c[0], c2: c[1], c3: c[2] }
        }
        n => return Err(Error::Calibration(format!("expected 1 or 3 targets, got {n}"))),
    };
    check_domain(&coeffs)?;
    Ok(coeffs)
}

/// `1/s_a` must be positive and increasing across [`CALIBRATION_DOMAIN`].
pub fn check_domain(c: &SensitivityCoeffs) -> Result<()> {
    let (lo, hi) = CALIBRATION_DOMAIN;
    let mut prev = f64::NEG_INFINITY;
    for k in 0..=260 {
        let v = lo + (hi - lo) * k as f64 / 260.0;
        let d = c.denominator(v);
        if !(d > 0.0) {
            return Err(Error::Calibration(format!("1/s_a = {d:.3} is not positive at v = {v:.2} m/s")));
        }
        if d <= prev {
            return Err(Error::Calibration(format!("1/s_a is not increasing at v = {v:.2} m/s")));
        }
        prev = d;
    }
    Ok(())
}

/// Symmetric two-agent lane swap used for linearisation.
///
/// Agent 0 starts in the right lane steering `+δ0`, agent 1 in the left lane
/// steering `-δ0`. State layout: `[x0, y0, θ0, v0, x1, y1, θ1, v1, w01, w10]`
/// with each `w` a (steering, acceleration) pair.
#[derive(Debug, Clone)]
pub struct TwoAgentLoop {
    pub config: PccaConfig,
    pub params: VehicleParams,
    pub lanes: LaneGeometry,
    pub v0: f64,
    pub delta0: f64,
    pub kappa: f64,
    pub ctrl_period: f64,
}

pub const LOOP_DIM: usize = 12;

impl TwoAgentLoop {
    pub fn new(config: PccaConfig, v0: f64, delta0: f64, kappa: f64, ctrl_period: f64) -> Self {
        Self { config, params: VehicleParams::default(), lanes: LaneGeometry::default(), v0, delta0, kappa, ctrl_period }
    }

    fn agent(s: &[f64; LOOP_DIM], k: usize) -> AgentState {
        AgentState::new(s[4 * k], s[4 * k + 1], s[4 * k + 2], s[4 * k + 3])
    }

    /// Both agents in their lane centres at `v0`, no disturbance estimate.
    pub fn initial(&self) -> [f64; LOOP_DIM] {
        let mut s = [0.0; LOOP_DIM];
        s[1] = self.lanes.center(crate::baseline::Lane::Right);
        s[3] = self.v0;
        s[5] = self.lanes.center(crate::baseline::Lane::Left);
        s[7] = self.v0;
        s
    }

    /// Mirror image about the lane divider with agents swapped.
    pub fn mirror(&self, s: &[f64; LOOP_DIM]) -> [f64; LOOP_DIM] {
        let d = 2.0 * self.lanes.divider();
        let mut m = [0.0; LOOP_DIM];
        for k in 0..2 {
            let o = 4 * (1 - k);
            m[4 * k] = s[o];
            m[4 * k + 1] = d - s[o + 1];
            m[4 * k + 2] = -s[o + 2];
            m[4 * k + 3] = s[o + 3];
        }
        m[8] = -s[10];
        m[9] = s[11];
        m[10] = -s[8];
        m[11] = s[9];
        m
    }

    /// Controls (applied, local copy of the other) for both agents.
    pub fn controls(&self, s: &[f64; LOOP_DIM], solver: &mut QpSolver) -> Result<[(ControlInput, ControlInput); 2]> {
        let far = Rails { right: RailFn::constant(-1e6), left: RailFn::constant(1e6) };
        let tracker = PurePursuit { kappa: self.kappa, ..PurePursuit::default() };
        let ctx = FilterContext { config: &self.config, params: &self.params, lanes: &self.lanes, tracker: &tracker, other_rails: far };
        let mut out = [(ControlInput::ZERO, ControlInput::ZERO); 2];
        for k in 0..2 {
            let me = Self::agent(s, k);
            let other = Self::agent(s, 1 - k);
            let mut pcca = PccaState::new();
            pcca.set_w(1 - k, [s[8 + 2 * k], s[9 + 2 * k]]);
            let steer = if k == 0 { self.delta0 } else { -self.delta0 };
            let baseline = ControlInput::new(steer, -self.kappa * (me.v - self.v0));
            let qp = build_qp((k, &me), baseline, &[(1 - k, other)], &far, &pcca, &ctx);
            let sol = solver.solve(&qp.problem, None);
            if sol.status != QpStatus::Optimal {
                return Err(Error::Linearization(format!("QP status {:?}", sol.status)));
            }
            let own = clamp_control(qp.control_of(&sol.z, k).expect("ego"), &self.config.ego_box);
            let copy = qp.control_of(&sol.z, 1 - k).expect("other");
            out[k] = (own, copy);
        }
        Ok(out)
    }

    /// One controller period: solve, apply, integrate, then update `w`.
    pub fn step(&self, s: &[f64; LOOP_DIM], solver: &mut QpSolver) -> Result<[f64; LOOP_DIM]> {
        let u = self.controls(s, solver)?;
        let mut next = [0.0; LOOP_DIM];
        for k in 0..2 {
            let a = advance(&Self::agent(s, k), u[k].0, &self.params, self.ctrl_period)?;
            next[4 * k..4 * k + 4].copy_from_slice(&[a.x, a.y, a.theta, a.v]);
        }
        let gain = (self.ctrl_period / self.config.tau).min(1.0);
        for k in 0..2 {
            let observed = u[1 - k].0;
            let copy = u[k].1;
            let target = [observed.delta - copy.delta, observed.a_c - copy.a_c];
            for c in 0..2 {
                let w = s[8 + 2 * k + c];
                next[8 + 2 * k + c] = w + gain * (target[c] - w);
            }
        }
        Ok(next)
    }

    /// Settles the mirror-symmetric loop onto its moving equilibrium.
    pub fn equilibrium(&self, solver: &mut QpSolver) -> Result<[f64; LOOP_DIM]> {
        let mut s = self.initial();
        let max_steps = (120.0 / self.ctrl_period).round() as usize;
        let mut drift = f64::INFINITY;
        for k in 0..max_steps {
            let prev = s;
            let next = self.step(&s, solver)?;
            let m = self.mirror(&next);
            for i in 0..LOOP_DIM {
                s[i] = 0.5 * (next[i] + m[i]);
            }
            drift = (1..4).map(|i| (s[i] - prev[i]).abs()).sum::<f64>();
            if k * 2 > max_steps / 10 && drift < 1e-10 {
                break;
            }
        }
        if drift > 1e-6 {
            return Err(Error::Linearization(format!("symmetric loop did not settle (drift {drift:.2e})")));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Continuous-time eigenvalues (re, im) of the linearised loop.
    pub eigenvalues: Vec<(f64, f64)>,
    /// Modes that keep the mirror symmetry: lateral difference and speed sum.
    pub symmetric: Vec<(f64, f64)>,
    /// Modes that break it: lateral sum and longitudinal difference.
    pub antisymmetric: Vec<(f64, f64)>,
    pub equilibrium: [f64; LOOP_DIM],
}

impl Spectrum {
    /// Largest real eigenvalue.
    pub fn dominant_real(&self) -> f64 {
        self.eigenvalues.iter().filter(|e| e.1.abs() < 1e-9).map(|e| e.0).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Whether some eigenvalue lies within `rel` of `target` (absolute `abs` near zero).
    pub fn contains_near(&self, target: f64, rel: f64, abs: f64) -> bool {
        self.eigenvalues.iter().any(|e| (e.0 - target).abs() <= (rel * target.abs()).max(abs) && e.1.abs() <= abs.max(rel * target.abs()))
    }
}

/// Central-difference Jacobian of one controller period about the
/// symmetric equilibrium, mapped to continuous-time rates.
pub fn numerical_linearization(lp: &TwoAgentLoop) -> Result<Spectrum> {
    let mut solver = QpSolver::new();
    let eq = lp.equilibrium(&mut solver)?;
    let scales = [10.0, 1.0, 0.1, lp.v0, 10.0, 1.0, 0.1, lp.v0, 0.01, 1.0, 0.01, 1.0];
    let mut jac = DMatrix::<f64>::zeros(LOOP_DIM, LOOP_DIM);
    let h_eq = crate::geometry::ellipse_h([eq[0], eq[1]], eq[2], [eq[4], eq[5]], &lp.config.spec);
    if h_eq < -1e-3 {
        return Err(Error::Linearization(format!("equilibrium outside the safe set (h = {h_eq:.3})")));
    }
    for c in 0..LOOP_DIM {
        // Large enough to straddle the kink where the two mirrored pair rows
        // swap places in the active set.
        let eps = 1e-4 * scales[c];
        let mut plus = eq;
        let mut minus = eq;
        plus[c] += eps;
        minus[c] -= eps;
        let fp = lp.step(&plus, &mut solver)?;
        let fm = lp.step(&minus, &mut solver)?;
        for r in 0..LOOP_DIM {
            jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * eps);
        }
    }
    let t = lp.ctrl_period;
    let rates = |m: &DMatrix<f64>| -> Vec<(f64, f64)> {
        m.complex_eigenvalues()
            .iter()
            .map(|mu| {
                let ln = mu.ln();
                (ln.re / t, ln.im / t)
            })
            .collect()
    };
    // The loop commutes with the mirror map, so the Jacobian block-diagonalises
    // on the +1 and -1 eigenspaces of its linear part.
    let mirror_sign = [(0, 4, 1.0), (1, 5, -1.0), (2, 6, -1.0), (3, 7, 1.0), (8, 10, -1.0), (9, 11, 1.0)];
    let mut basis = DMatrix::<f64>::zeros(LOOP_DIM, LOOP_DIM);
    for (col, &(a, b, sgn)) in mirror_sign.iter().enumerate() {
        basis[(a, col)] = 1.0;
        basis[(b, col)] = sgn;
        basis[(a, col + 6)] = 1.0;
        basis[(b, col + 6)] = -sgn;
    }
    let inv = basis.clone().try_inverse().expect("mirror basis is invertible");
    let blocks = &inv * &jac * &basis;
    let symmetric = rates(&blocks.view((0, 0), (6, 6)).into_owned());
    let antisymmetric = rates(&blocks.view((6, 6), (6, 6)).into_owned());
    Ok(Spectrum { eigenvalues: rates(&jac), symmetric, antisymmetric, equilibrium: eq })
}

/// Closed-form and numerical unstable eigenvalues at one speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenComparison {
    pub v0: f64,
    pub s_a: f64,
    /// [`unstable_eigenvalue`].
    pub formula: f64,
    /// [`implemented_loop_eigenvalue`].
    pub loop_model: f64,
    /// Dominant real eigenvalue of the linearised loop.
    pub numerical: f64,
}

impl EigenComparison {
    /// `|numerical - formula| / formula`.
    pub fn formula_error(&self) -> f64 {
        (self.numerical - self.formula).abs() / self.formula
    }
}

/// Linearises the two-agent loop at each speed and compares with both
/// closed forms. `config.sensitivity` must already hold the calibration.
pub fn compare_eigenvalues(
    config: &PccaConfig,
    params: &VehicleParams,
    speeds: &[f64],
    delta0: f64,
    kappa: f64,
    ctrl_period: f64,
) -> Result<Vec<EigenComparison>> {
    speeds
        .iter()
        .map(|&v0| {
            let s_a = crate::pcca::sensitivity(v0, &config.sensitivity);
            let mut lp = TwoAgentLoop::new(*config, v0, delta0, kappa, ctrl_period);
            lp.params = *params;
            let numerical = numerical_linearization(&lp)?.dominant_real();
            Ok(EigenComparison {
                v0,
                s_a,
                formula: unstable_eigenvalue(v0, s_a, delta0, kappa, params, &config.spec),
                loop_model: implemented_loop_eigenvalue(v0, s_a, delta0, kappa, params, &config.spec),
                numerical,
            })
        })
        .collect()
}
