//! Kinematic bicycle model and actuator limits.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Plant integration step used between controller updates.
pub const PLANT_DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Heading relative to the road axis.
    pub theta: f64,
    pub v: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self { x, y, theta, v }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Unit heading vector.
    pub fn heading(&self) -> [f64; 2] {
        [self.theta.cos(), self.theta.sin()]
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite() && self.v.is_finite()
    }
}

/// Steering angle and longitudinal acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub delta: f64,
    pub a_c: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput { delta: 0.0, a_c: 0.0 };

    pub fn new(delta: f64, a_c: f64) -> Self {
        Self { delta, a_c }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.delta, self.a_c]
    }

    pub fn from_array(u: [f64; 2]) -> Self {
        Self { delta: u[0], a_c: u[1] }
    }
}

impl std::ops::Add for ControlInput {
    type Output = ControlInput;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.delta + rhs.delta, self.a_c + rhs.a_c)
    }
}

impl std::ops::Sub for ControlInput {
    type Output = ControlInput;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.delta - rhs.delta, self.a_c - rhs.a_c)
    }
}

/// Componentwise actuator box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub delta: [f64; 2],
    pub a_c: [f64; 2],
}

impl ControlBox {
    /// Ego actuator limits: steering ±π/7 rad, acceleration [-8, 4] m/s².
    pub fn ego() -> Self {
        Self { delta: [-PI / 7.0, PI / 7.0], a_c: [-8.0, 4.0] }
    }

    pub fn unbounded() -> Self {
        Self {
            delta: [f64::NEG_INFINITY, f64::INFINITY],
            a_c: [f64::NEG_INFINITY, f64::INFINITY],
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            delta: [self.delta[0] * factor, self.delta[1] * factor],
            a_c: [self.a_c[0] * factor, self.a_c[1] * factor],
        }
    }

    pub fn lower(&self) -> [f64; 2] {
        [self.delta[0], self.a_c[0]]
    }

    pub fn upper(&self) -> [f64; 2] {
        [self.delta[1], self.a_c[1]]
    }

    pub fn contains(&self, u: ControlInput) -> bool {
        u.delta >= self.delta[0]
            && u.delta <= self.delta[1]
            && u.a_c >= self.a_c[0]
            && u.a_c <= self.a_c[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub body_length: f64,
    pub body_width: f64,
    pub mass: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self { wheelbase: 2.9, body_length: 4.7, body_width: 1.85, mass: 2000.0 }
    }
}

pub fn clamp_control(u: ControlInput, bx: &ControlBox) -> ControlInput {
    ControlInput {
        delta: u.delta.max(bx.delta[0]).min(bx.delta[1]),
        a_c: u.a_c.max(bx.a_c[0]).min(bx.a_c[1]),
    }
}

fn derivative(s: &[f64; 4], u: ControlInput, wheelbase: f64) -> [f64; 4] {
    let (x_dot, y_dot) = (s[3] * s[2].cos(), s[3] * s[2].sin());
    [x_dot, y_dot, s[3] / wheelbase * u.delta, u.a_c]
}

/// Advances `state` by `dt` with one RK4 step under a held control.
pub fn step(state: &AgentState, u: ControlInput, params: &VehicleParams, dt: f64) -> Result<AgentState> {
    if !state.is_finite() {
        return Err(Error::NonFinite("vehicle state"));
    }
    if !(u.delta.is_finite() && u.a_c.is_finite()) {
        return Err(Error::NonFinite("control input"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::NonFinite("time step"));
    }
    let s0 = [state.x, state.y, state.theta, state.v];
    let add = |s: &[f64; 4], k: &[f64; 4], h: f64| {
        [s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2], s[3] + h * k[3]]
    };
    let lw = params.wheelbase;
    let k1 = derivative(&s0, u, lw);
    let k2 = derivative(&add(&s0, &k1, dt / 2.0), u, lw);
    let k3 = derivative(&add(&s0, &k2, dt / 2.0), u, lw);
    let k4 = derivative(&add(&s0, &k3, dt), u, lw);
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = s0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(AgentState { x: out[0], y: out[1], theta: out[2], v: out[3].max(0.0) })
}

/// Integrates over `duration` with fixed inner steps of at most [`PLANT_DT`].
pub fn advance(state: &AgentState, u: ControlInput, params: &VehicleParams, duration: f64) -> Result<AgentState> {
    let n = (duration / PLANT_DT).round().max(1.0) as usize;
    let h = duration / n as f64;
    let mut s = *state;
    for _ in 0..n {
        s = step(&s, u, params, h)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn euler_oracle(s: &AgentState, u: ControlInput, lw: f64, dt: f64, h: f64) -> AgentState {
        let n = (dt / h).round() as usize;
        let mut st = [s.x, s.y, s.theta, s.v];
        for _ in 0..n {
            let d = derivative(&st, u, lw);
            for i in 0..4 {
                st[i] += h * d[i];
            }
        }
        AgentState::new(st[0], st[1], st[2], st[3])
    }

    #[test]
    fn straight_constant_speed() {
        let s = step(&AgentState::new(0.0, 0.0, 0.0, 20.0), ControlInput::ZERO, &VehicleParams::default(), 0.1).unwrap();
        assert!((s.x - 2.0).abs() < 1e-12);
        assert_eq!(s.y, 0.0);
        assert_eq!(s.theta, 0.0);
        assert_eq!(s.v, 20.0);
    }

    #[test]
    fn linear_speed_ramp() {
        let s = step(&AgentState::new(0.0, 0.0, 0.0, 20.0), ControlInput::new(0.0, 2.0), &VehicleParams::default(), 0.1).unwrap();
        assert!((s.v - 20.2).abs() < 1e-12);
        assert!((s.x - 2.01).abs() < 1e-12);
    }

    #[test]
    fn steering_matches_dense_euler() {
        let p = VehicleParams::default();
        let s0 = AgentState::new(0.0, 0.0, 0.0, 20.0);
        let u = ControlInput::new(0.02, 0.0);
        let s = step(&s0, u, &p, 0.1).unwrap();
        let o = euler_oracle(&s0, u, p.wheelbase, 0.1, 1e-6);
        assert!((s.theta - 0.0137931).abs() < 1e-6);
        assert!(s.y > 0.0);
        for (a, b) in [(s.x, o.x), (s.y, o.y), (s.theta, o.theta), (s.v, o.v)] {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn rk4_local_error_is_fifth_order() {
        // Reference: very fine RK4 substeps; the single-step error must shrink ~32x per halving.
        let p = VehicleParams::default();
        let s0 = AgentState::new(0.0, 0.5, 0.1, 18.0);
        let u = ControlInput::new(0.3, 1.5);
        let err = |dt: f64| {
            let coarse = step(&s0, u, &p, dt).unwrap();
            let mut fine = s0;
            for _ in 0..2000 {
                fine = step(&fine, u, &p, dt / 2000.0).unwrap();
            }
            ((coarse.x - fine.x).powi(2) + (coarse.y - fine.y).powi(2)).sqrt()
        };
        let (e1, e2, e3) = (err(0.1), err(0.05), err(0.025));
        let (r1, r2) = (e1 / e2, e2 / e3);
        assert!(r1 > 20.0 && r1 < 45.0, "ratio {r1}");
        assert!(r2 > 20.0 && r2 < 45.0, "ratio {r2}");
    }

    #[test]
    fn zero_input_preserves_speed_and_heading() {
        let s0 = AgentState::new(3.0, 1.0, 0.2, 22.0);
        let s = step(&s0, ControlInput::ZERO, &VehicleParams::default(), 0.1).unwrap();
        assert_eq!(s.v, s0.v);
        assert_eq!(s.theta, s0.theta);
    }

    #[test]
    fn deterministic_bits() {
        let s0 = AgentState::new(1.0, 2.0, 0.05, 21.3);
        let u = ControlInput::new(-0.01, 0.7);
        let p = VehicleParams::default();
        let a = step(&s0, u, &p, 0.01).unwrap();
        let b = step(&s0, u, &p, 0.01).unwrap();
        assert_eq!(a.x.to_bits(), b.x.to_bits());
        assert_eq!(a.y.to_bits(), b.y.to_bits());
    }

    #[test]
    fn speed_is_floored() {
        let s = step(&AgentState::new(0.0, 0.0, 0.0, 0.1), ControlInput::new(0.0, -8.0), &VehicleParams::default(), 0.1).unwrap();
        assert_eq!(s.v, 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        let p = VehicleParams::default();
        assert!(step(&AgentState::new(f64::NAN, 0.0, 0.0, 1.0), ControlInput::ZERO, &p, 0.1).is_err());
        assert!(step(&AgentState::new(0.0, 0.0, 0.0, 1.0), ControlInput::new(f64::INFINITY, 0.0), &p, 0.1).is_err());
    }

    #[test]
    fn clamp_examples() {
        let bx = ControlBox::ego();
        assert_eq!(clamp_control(ControlInput::new(0.5, -10.0), &bx), ControlInput::new(PI / 7.0, -8.0));
        assert_eq!(clamp_control(ControlInput::ZERO, &bx), ControlInput::ZERO);
        let u = clamp_control(ControlInput::new(-0.449, 3.9), &bx);
        assert_eq!(u.delta, -PI / 7.0);
        assert_eq!(u.a_c, 3.9);
    }
}
