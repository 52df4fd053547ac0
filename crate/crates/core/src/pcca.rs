//! Per-agent predictor-corrector CBF safety filter.
//!
//! Every agent solves one QP over the controls of everybody it can hear on
//! V2V: its own input plus a local copy of each neighbour's input. Only the
//! ego part of the solution is applied. The difference between what a
//! neighbour was observed doing (steering and acceleration fields of its
//! BSM) and the local copy is fed back through a first-order lag `w_ij`,
//! which enters the barrier rows as a known disturbance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baseline::{pure_pursuit, DrivingIntent, LaneGeometry, PurePursuit};
use crate::geometry::{ellipse_h_row_guarded, road_rows, CbfGains, CbfRow, EllipseSpec, RailFn, RowKind};
use crate::qp::{ConstraintId, QpProblem, QpSolver, QpStatus, SparseRow};
use crate::vehicle::{clamp_control, AgentState, ControlBox, ControlInput, VehicleParams};

/// Lower bound on `1 / s_a` keeping the cost strictly convex at any speed.
pub const SENSITIVITY_DENOM_FLOOR: f64 = 1.0;

/// `s_a(v) = 1 / (c0 + c2 v^2 + c3 v^3)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityCoeffs {
    pub c0: f64,
    pub c2: f64,
    pub c3: f64,
}

impl SensitivityCoeffs {
    pub fn denominator(&self, v: f64) -> f64 {
        self.c0 + self.c2 * v * v + self.c3 * v * v * v
    }
}

/// Acceleration weight relative to steering; `S_j = diag(1, s_a(v_j))`.
pub fn sensitivity(v: f64, coeffs: &SensitivityCoeffs) -> f64 {
    1.0 / coeffs.denominator(v.max(0.0)).max(SENSITIVITY_DENOM_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PccaConfig {
    pub gains: CbfGains,
    pub spec: EllipseSpec,
    pub sensitivity: SensitivityCoeffs,
    /// w-filter time constant [s].
    pub tau: f64,
    pub ego_box: ControlBox,
    /// Local copies of other agents use the ego box scaled by this factor.
    pub other_box_scale: f64,
    pub slack_weight_agent: f64,
    pub slack_weight_road: f64,
    pub soft: bool,
    /// Observed actions older than this are treated as zero [s].
    pub stale_after: f64,
    /// Omit rows that cannot bind anywhere inside the control boxes.
    pub prune_redundant_rows: bool,
}

impl PccaConfig {
    pub fn new(sensitivity: SensitivityCoeffs) -> Self {
        Self {
            gains: CbfGains::default(),
            spec: EllipseSpec::barrier_default(),
            sensitivity,
            tau: 0.1,
            ego_box: ControlBox::ego(),
            other_box_scale: 1.8,
            slack_weight_agent: 20_000.0,
            slack_weight_road: 1_000.0,
            soft: true,
            stale_after: 1.0,
            prune_redundant_rows: true,
        }
    }

    pub fn other_box(&self) -> ControlBox {
        self.ego_box.scaled(self.other_box_scale)
    }
}

/// V2V basic safety message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsmMessage {
    pub sender: usize,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub heading: f64,
    pub steering: f64,
    pub acceleration: f64,
    pub length: f64,
    pub width: f64,
    pub timestamp: f64,
}

impl BsmMessage {
    pub fn from_state(sender: usize, s: &AgentState, applied: ControlInput, params: &VehicleParams, timestamp: f64) -> Self {
        Self {
            sender,
            x: s.x,
            y: s.y,
            speed: s.v,
            heading: s.theta,
            steering: applied.delta,
            acceleration: applied.a_c,
            length: params.body_length,
            width: params.body_width,
            timestamp,
        }
    }

    pub fn state(&self) -> AgentState {
        AgentState::new(self.x, self.y, self.heading, self.speed)
    }

    pub fn observed_action(&self, now: f64, stale_after: f64) -> ControlInput {
        if now - self.timestamp > stale_after + 1e-9 {
            ControlInput::ZERO
        } else {
            ControlInput::new(self.steering, self.acceleration)
        }
    }
}

/// Stable identity of a constraint across successive QPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum ActiveKey {
    Row(RowKind),
    Lower(usize, usize),
    Upper(usize, usize),
}

#[derive(Debug, Clone, Default)]
pub struct PccaState {
    w: BTreeMap<usize, [f64; 2]>,
    last_solution: BTreeMap<usize, ControlInput>,
    last_active: Vec<ActiveKey>,
}

impl PccaState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Disturbance estimate for agent `j`; zero for unknown agents and the ego.
    pub fn w(&self, j: usize) -> [f64; 2] {
        self.w.get(&j).copied().unwrap_or([0.0; 2])
    }

    pub fn tracked(&self) -> impl Iterator<Item = usize> + '_ {
        self.w.keys().copied()
    }

    pub fn local_copy(&self, j: usize) -> Option<ControlInput> {
        self.last_solution.get(&j).copied()
    }

    pub fn set_w(&mut self, j: usize, w: [f64; 2]) {
        self.w.insert(j, w);
    }
}

/// Boundaries used for one agent's road rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rails {
    pub right: RailFn,
    pub left: RailFn,
}

/// Everything the ego knows about itself.
#[derive(Debug, Clone, Copy)]
pub struct EgoView<'a> {
    pub id: usize,
    pub state: AgentState,
    pub intent: &'a DrivingIntent,
    pub rails: Rails,
}

/// Static, shared knowledge: road layout, vehicle class and controller tuning.
#[derive(Debug, Clone, Copy)]
pub struct FilterContext<'a> {
    pub config: &'a PccaConfig,
    pub params: &'a VehicleParams,
    pub lanes: &'a LaneGeometry,
    pub tracker: &'a PurePursuit,
    /// Boundaries assumed for every other agent.
    pub other_rails: Rails,
}

/// Assembled QP with the bookkeeping needed to read the solution back.
#[derive(Debug, Clone)]
pub struct PccaQp {
    pub problem: QpProblem,
    /// Agent ids in decision-vector order; agent `agents[k]` owns `z[2k..2k+2]`.
    pub agents: Vec<usize>,
    pub rows: Vec<CbfRow>,
    pub ego_index: usize,
}

impl PccaQp {
    pub fn control_of(&self, z: &[f64], id: usize) -> Option<ControlInput> {
        self.agents.iter().position(|&a| a == id).map(|k| ControlInput::new(z[2 * k], z[2 * k + 1]))
    }

    fn key(&self, id: ConstraintId) -> ActiveKey {
        match id {
            ConstraintId::Row(r) => ActiveKey::Row(self.rows[r].kind),
            ConstraintId::Lower(i) => ActiveKey::Lower(self.var_owner(i), i % 2),
            ConstraintId::Upper(i) => ActiveKey::Upper(self.var_owner(i), i % 2),
        }
    }

    fn var_owner(&self, i: usize) -> usize {
        self.agents.get(i / 2).copied().unwrap_or(usize::MAX)
    }

    fn ids_for(&self, keys: &[ActiveKey]) -> Vec<ConstraintId> {
        let mut out = Vec::new();
        for (r, row) in self.rows.iter().enumerate() {
            if keys.contains(&ActiveKey::Row(row.kind)) {
                out.push(ConstraintId::Row(r));
            }
        }
        for (k, &a) in self.agents.iter().enumerate() {
            for c in 0..2 {
                if keys.contains(&ActiveKey::Lower(a, c)) {
                    out.push(ConstraintId::Lower(2 * k + c));
                }
                if keys.contains(&ActiveKey::Upper(a, c)) {
                    out.push(ConstraintId::Upper(2 * k + c));
                }
            }
        }
        out
    }
}

fn min_over_box(b: [f64; 2], bx: &ControlBox) -> f64 {
    let (lo, hi) = (bx.lower(), bx.upper());
    (0..2).map(|c| (b[c] * lo[c]).min(b[c] * hi[c])).sum()
}

/// Builds the ego's quasi-centralised QP.
///
/// `others` are the perceived neighbours (id, state); `baseline` is the ego's
/// performance control. Neighbours are assigned a zero baseline.
pub fn build_qp(
    ego: (usize, &AgentState),
    baseline: ControlInput,
    others: &[(usize, AgentState)],
    ego_rails: &Rails,
    pcca: &PccaState,
    ctx: &FilterContext<'_>,
) -> PccaQp {
    let cfg = ctx.config;
    let mut agents: Vec<(usize, AgentState)> = Vec::with_capacity(others.len() + 1);
    agents.push((ego.0, *ego.1));
    agents.extend(others.iter().copied().filter(|(id, _)| *id != ego.0));
    agents.sort_by_key(|a| a.0);
    agents.dedup_by_key(|a| a.0);
    let ego_index = agents.iter().position(|a| a.0 == ego.0).expect("ego present");
    let ego_box = cfg.ego_box;
    let other_box = cfg.other_box();
    let box_of = |k: usize| if k == ego_index { ego_box } else { other_box };
    let index_of = |id: usize| agents.iter().position(|a| a.0 == id).expect("known agent");
    let w_of = |id: usize| if id == ego.0 { [0.0; 2] } else { pcca.w(id) };

    let mut rows: Vec<CbfRow> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut push = |row: CbfRow, weight: f64, rows: &mut Vec<CbfRow>| {
        if cfg.prune_redundant_rows {
            let mut worst = row.a;
            for (id, b) in &row.b_terms {
                let w = w_of(*id);
                worst += b[0] * w[0] + b[1] * w[1] + min_over_box(*b, &box_of(index_of(*id)));
            }
            if worst > 0.0 {
                return;
            }
        }
        rows.push(row);
        weights.push(weight);
    };
    for (j, sj) in &agents {
        for (k, sk) in &agents {
            if j != k {
                let row = ellipse_h_row_guarded((*j, sj), (*k, sk), &cfg.spec, &cfg.gains, ctx.params);
                push(row, cfg.slack_weight_agent, &mut rows);
            }
        }
    }
    for (k, sk) in &agents {
        let rails = if *k == ego.0 { ego_rails } else { &ctx.other_rails };
        let (r, l) = road_rows(*k, sk, &rails.right, &rails.left, &cfg.gains, ctx.params);
        push(r, cfg.slack_weight_road, &mut rows);
        push(l, cfg.slack_weight_road, &mut rows);
    }

    let n_ctrl = 2 * agents.len();
    let n = if cfg.soft { n_ctrl + rows.len() } else { n_ctrl };
    let mut diag = vec![0.0; n];
    let mut linear = vec![0.0; n];
    let mut lower = vec![f64::NEG_INFINITY; n];
    let mut upper = vec![f64::INFINITY; n];
    for (k, (_, s)) in agents.iter().enumerate() {
        let sa = sensitivity(s.v, &cfg.sensitivity);
        diag[2 * k] = 2.0;
        diag[2 * k + 1] = 2.0 * sa;
        if k == ego_index {
            linear[2 * k] = -2.0 * baseline.delta;
            linear[2 * k + 1] = -2.0 * sa * baseline.a_c;
        }
        let bx = box_of(k);
        lower[2 * k] = bx.delta[0];
        upper[2 * k] = bx.delta[1];
        lower[2 * k + 1] = bx.a_c[0];
        upper[2 * k + 1] = bx.a_c[1];
    }
    let mut sparse = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let mut coeffs = Vec::with_capacity(5);
        let mut offset = row.a;
        for (id, b) in &row.b_terms {
            let k = index_of(*id);
            let w = w_of(*id);
            offset += b[0] * w[0] + b[1] * w[1];
            coeffs.push((2 * k, b[0]));
            coeffs.push((2 * k + 1, b[1]));
        }
        if cfg.soft {
            let s = n_ctrl + r;
            coeffs.push((s, 1.0));
            diag[s] = 2.0 * weights[r];
            lower[s] = 0.0;
        }
        sparse.push(SparseRow::new(coeffs, offset));
    }
    let problem = QpProblem::diagonal(&diag, linear).with_rows(sparse).with_bounds(lower, upper);
    PccaQp { problem, agents: agents.iter().map(|a| a.0).collect(), rows, ego_index }
}

/// Control satisfying every unboxed row inside the admissible set:
/// zero steering, braking proportional to speed, minus the disturbance.
pub fn feasible_fallback(v: f64, lambda1: f64, w: [f64; 2]) -> ControlInput {
    ControlInput::new(-w[0], -lambda1 * v - w[1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub applied: ControlInput,
    pub baseline: ControlInput,
    pub status: QpStatus,
    pub fallback: bool,
    /// Fallback braking request was outside the ego box and got clipped.
    pub fallback_clipped: bool,
    pub iterations: usize,
    pub n_vars: usize,
    pub n_rows: usize,
}

/// Runs one controller period for the ego agent.
///
/// Only the ego's own state and intent, the received messages and the ego's
/// own filter memory are consulted.
pub fn filter_step(
    ego: &EgoView<'_>,
    snapshot: &[BsmMessage],
    pcca: &mut PccaState,
    ctx: &FilterContext<'_>,
    solver: &mut QpSolver,
    dt_ctrl: f64,
    now: f64,
) -> FilterOutput {
    let cfg = ctx.config;
    let heard: Vec<&BsmMessage> = snapshot.iter().filter(|m| m.sender != ego.id).collect();

    // Corrector: reconcile observed actions with last period's local copies.
    pcca.w.retain(|j, _| heard.iter().any(|m| m.sender == *j));
    pcca.last_solution.retain(|j, _| heard.iter().any(|m| m.sender == *j));
    let gain = dt_ctrl / cfg.tau;
    for m in &heard {
        let w = pcca.w.entry(m.sender).or_insert([0.0; 2]);
        if let Some(copy) = pcca.last_solution.get(&m.sender) {
            let observed = m.observed_action(now, cfg.stale_after);
            let target = [observed.delta - copy.delta, observed.a_c - copy.a_c];
            w[0] += gain * (target[0] - w[0]);
            w[1] += gain * (target[1] - w[1]);
        }
    }

    let baseline = pure_pursuit(&ego.state, ego.intent, ctx.params, ctx.lanes, ctx.tracker, &cfg.ego_box);
    let others: Vec<(usize, AgentState)> = heard.iter().map(|m| (m.sender, m.state())).collect();
    let qp = build_qp((ego.id, &ego.state), baseline, &others, &ego.rails, pcca, ctx);
    let warm = qp.ids_for(&pcca.last_active);
    let sol = solver.solve(&qp.problem, Some(&warm));

    let mut out = FilterOutput {
        applied: baseline,
        baseline,
        status: sol.status,
        fallback: false,
        fallback_clipped: false,
        iterations: sol.iterations,
        n_vars: qp.problem.dim(),
        n_rows: qp.rows.len(),
    };
    if sol.status == QpStatus::Optimal {
        out.applied = clamp_control(qp.control_of(&sol.z, ego.id).expect("ego in qp"), &cfg.ego_box);
        for (j, _) in &others {
            if let Some(u) = qp.control_of(&sol.z, *j) {
                pcca.last_solution.insert(*j, u);
            }
        }
        pcca.last_active = sol.active_set.iter().map(|&id| qp.key(id)).collect();
    } else {
        let raw = feasible_fallback(ego.state.v, cfg.gains.lambda1, [0.0; 2]);
        out.applied = clamp_control(raw, &cfg.ego_box);
        out.fallback = true;
        out.fallback_clipped = out.applied != raw;
        for (j, s) in &others {
            let u = clamp_control(feasible_fallback(s.v, cfg.gains.lambda1, pcca.w(*j)), &cfg.other_box());
            pcca.last_solution.insert(*j, u);
        }
        pcca.last_active.clear();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::Lane;
    use crate::geometry::ellipse_h_row;

    fn coeffs() -> SensitivityCoeffs {
        SensitivityCoeffs { c0: 100.0, c2: 50.0, c3: 10.0 }
    }

    fn outer_rails(lanes: &LaneGeometry) -> Rails {
        Rails { right: RailFn::constant(lanes.right_edge()), left: RailFn::constant(lanes.left_edge()) }
    }

    struct Fixture {
        cfg: PccaConfig,
        params: VehicleParams,
        lanes: LaneGeometry,
        tracker: PurePursuit,
    }

    impl Fixture {
        fn new() -> Self {
            Self {
                cfg: PccaConfig::new(coeffs()),
                params: VehicleParams::default(),
                lanes: LaneGeometry::default(),
                tracker: PurePursuit::default(),
            }
        }

        fn ctx(&self) -> FilterContext<'_> {
            FilterContext {
                config: &self.cfg,
                params: &self.params,
                lanes: &self.lanes,
                tracker: &self.tracker,
                other_rails: outer_rails(&self.lanes),
            }
        }
    }

    #[test]
    fn sensitivity_examples() {
        let c = coeffs();
        assert_eq!(sensitivity(0.0, &c), 1.0 / 100.0);
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let s = sensitivity(k as f64, &c);
            assert!(s < prev);
            prev = s;
        }
        let neg = SensitivityCoeffs { c0: -300.0, c2: 180.0, c3: 12.0 };
        assert_eq!(sensitivity(0.0, &neg), 1.0 / SENSITIVITY_DENOM_FLOOR);
    }

    #[test]
    fn fallback_examples() {
        let u = feasible_fallback(22.0, 0.4, [0.0; 2]);
        assert_eq!(u.delta, 0.0);
        assert!((u.a_c + 8.8).abs() < 1e-12);
        assert!(!ControlBox::ego().contains(u));
        assert_eq!(feasible_fallback(0.0, 0.4, [0.0; 2]), ControlInput::new(-0.0, -0.0));
        let u = feasible_fallback(20.0, 0.4, [0.01, 1.0]);
        assert!((u.delta + 0.01).abs() < 1e-15 && (u.a_c + 9.0).abs() < 1e-12);
    }

    #[test]
    fn isolated_agent_keeps_baseline_and_w() {
        let f = Fixture::new();
        let ctx = f.ctx();
        let intent = DrivingIntent::change_to(Lane::Left, 22.0, 0.0);
        let state = AgentState::new(10.0, 0.0, 0.0, 21.0);
        let ego = EgoView { id: 3, state, intent: &intent, rails: outer_rails(&f.lanes) };
        let mut st = PccaState::new();
        let mut solver = QpSolver::new();
        let out = filter_step(&ego, &[], &mut st, &ctx, &mut solver, 0.1, 0.0);
        assert_eq!(out.status, QpStatus::Optimal);
        assert!((out.applied.delta - out.baseline.delta).abs() < 1e-12);
        assert!((out.applied.a_c - out.baseline.a_c).abs() < 1e-9);
        assert_eq!(st.tracked().count(), 0);
    }

    #[test]
    fn parallel_far_agents_leave_baseline_untouched() {
        let f = Fixture::new();
        let ctx = f.ctx();
        let intent = DrivingIntent::straight(Lane::Right, 22.0);
        let state = AgentState::new(0.0, 0.0, 0.0, 22.0);
        let ego = EgoView { id: 0, state, intent: &intent, rails: outer_rails(&f.lanes) };
        let other = AgentState::new(40.0, 3.5, 0.0, 22.0);
        let msg = BsmMessage::from_state(1, &other, ControlInput::ZERO, &f.params, 0.0);
        let mut st = PccaState::new();
        let out = filter_step(&ego, &[msg], &mut st, &ctx, &mut QpSolver::new(), 0.1, 0.0);
        assert_eq!(out.applied, out.baseline);
        assert_eq!(st.w(1), [0.0; 2]);
    }

    #[test]
    fn converging_rows_match_hand_assembly() {
        let mut f = Fixture::new();
        f.cfg.prune_redundant_rows = false;
        let ctx = f.ctx();
        let a = AgentState::new(0.0, 0.4, 0.02, 23.0);
        let b = AgentState::new(6.0, 3.1, -0.02, 21.0);
        let mut st = PccaState::new();
        st.set_w(7, [0.001, -0.3]);
        let base = ControlInput::new(0.01, 0.5);
        let qp = build_qp((2, &a), base, &[(7, b)], &outer_rails(&f.lanes), &st, &ctx);
        assert_eq!(qp.agents, vec![2, 7]);
        let hand = ellipse_h_row((2, &a), (7, &b), &f.cfg.spec, &f.cfg.gains, &f.params).unwrap();
        let row = &qp.problem.rows[0];
        let bi = hand.b_terms[0].1;
        let bj = hand.b_terms[1].1;
        let offset = hand.a + bj[0] * 0.001 + bj[1] * -0.3;
        assert!((row.offset - offset).abs() < 1e-12);
        let expect = [(0, bi[0]), (1, bi[1]), (2, bj[0]), (3, bj[1])];
        for (got, want) in row.coeffs.iter().zip(expect) {
            assert_eq!(got.0, want.0);
            assert!((got.1 - want.1).abs() < 1e-12);
        }
        assert_eq!(row.coeffs[4], (4, 1.0));
        // 2 agent rows + 4 road rows, each with a slack.
        assert_eq!(qp.rows.len(), 6);
        assert_eq!(qp.problem.dim(), 4 + 6);
    }

    #[test]
    fn agreeing_neighbour_keeps_w_zero() {
        let f = Fixture::new();
        let ctx = f.ctx();
        let intent = DrivingIntent::straight(Lane::Right, 22.0);
        let mut ego_state = AgentState::new(0.0, 0.0, 0.0, 22.0);
        let mut other = AgentState::new(9.0, 0.0, 0.0, 18.0);
        let mut st = PccaState::new();
        let mut solver = QpSolver::new();
        let mut other_applied = ControlInput::ZERO;
        for k in 0..10 {
            let t = 0.1 * k as f64;
            let msg = BsmMessage::from_state(1, &other, other_applied, &f.params, t);
            let ego = EgoView { id: 0, state: ego_state, intent: &intent, rails: outer_rails(&f.lanes) };
            let out = filter_step(&ego, &[msg], &mut st, &ctx, &mut solver, 0.1, t);
            assert_eq!(st.w(1), [0.0; 2], "tick {k}");
            // The neighbour does exactly what the ego's copy predicted.
            other_applied = st.local_copy(1).unwrap();
            ego_state = crate::vehicle::advance(&ego_state, out.applied, &f.params, 0.1).unwrap();
            other = crate::vehicle::advance(&other, other_applied, &f.params, 0.1).unwrap();
        }
    }

    #[test]
    fn agents_out_of_range_are_forgotten() {
        let f = Fixture::new();
        let ctx = f.ctx();
        let intent = DrivingIntent::straight(Lane::Right, 22.0);
        let ego = EgoView { id: 0, state: AgentState::new(0.0, 0.0, 0.0, 22.0), intent: &intent, rails: outer_rails(&f.lanes) };
        let msg = BsmMessage::from_state(1, &AgentState::new(8.0, 3.0, 0.0, 20.0), ControlInput::new(0.0, 2.0), &f.params, 0.0);
        let mut st = PccaState::new();
        let mut solver = QpSolver::new();
        filter_step(&ego, &[msg], &mut st, &ctx, &mut solver, 0.1, 0.0);
        filter_step(&ego, &[msg], &mut st, &ctx, &mut solver, 0.1, 0.1);
        assert_ne!(st.w(1), [0.0; 2]);
        filter_step(&ego, &[], &mut st, &ctx, &mut solver, 0.1, 0.2);
        assert_eq!(st.tracked().count(), 0);
        assert!(st.local_copy(1).is_none());
    }

    #[test]
    fn stale_messages_report_zero_action() {
        let p = VehicleParams::default();
        let m = BsmMessage::from_state(1, &AgentState::new(0.0, 0.0, 0.0, 20.0), ControlInput::new(0.01, -2.0), &p, 1.0);
        assert_eq!(m.observed_action(1.5, 1.0), ControlInput::new(0.01, -2.0));
        assert_eq!(m.observed_action(2.2, 1.0), ControlInput::ZERO);
    }

    #[test]
    fn hard_mode_infeasible_falls_back() {
        let mut f = Fixture::new();
        f.cfg.soft = false;
        let ctx = f.ctx();
        let intent = DrivingIntent::straight(Lane::Right, 22.0);
        // Deep inside the neighbour's ellipse and closing fast: no boxed control can recover.
        let ego = EgoView { id: 0, state: AgentState::new(0.0, 0.0, 0.0, 30.0), intent: &intent, rails: outer_rails(&f.lanes) };
        let msg = BsmMessage::from_state(1, &AgentState::new(5.0, 0.0, 0.0, 5.0), ControlInput::ZERO, &f.params, 0.0);
        let mut st = PccaState::new();
        let out = filter_step(&ego, &[msg], &mut st, &ctx, &mut QpSolver::new(), 0.1, 0.0);
        assert!(out.fallback);
        assert_eq!(out.applied, ControlInput::new(-0.0, -8.0));
        assert!(out.fallback_clipped);
    }
}
