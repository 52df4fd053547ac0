//! Interchange lane-swap world: spawning, V2V perception, the episode loop
//! and the Monte Carlo driver.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{DrivingIntent, Lane, LaneGeometry, PurePursuit};
use crate::error::{Error, Result};
use crate::geometry::{ellipse_h, CbfGains, EllipseSpec, RailFn};
use crate::metrics::{compute_metrics, RunMetrics};
use crate::pcca::{filter_step, BsmMessage, EgoView, FilterContext, PccaConfig, PccaState, Rails, SensitivityCoeffs};
use crate::qp::{QpSolver, QpStatus};
use crate::stability::{calibrate_sensitivity_for, EigenModel, InstabilityTargets};
use crate::vehicle::{advance, AgentState, ControlBox, ControlInput, VehicleParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    IdaFast,
    IdaSlow,
    Vgr,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::IdaFast, Variant::IdaSlow, Variant::Vgr];

    pub fn label(self) -> &'static str {
        match self {
            Variant::IdaFast => "IDA-fast",
            Variant::IdaSlow => "IDA-slow",
            Variant::Vgr => "VGR",
        }
    }

    pub fn targets(self) -> InstabilityTargets {
        match self {
            Variant::IdaFast => InstabilityTargets::ida_fast(),
            Variant::IdaSlow => InstabilityTargets::ida_slow(),
            Variant::Vgr => InstabilityTargets::vgr(),
        }
    }

    pub fn uses_guard_rails(self) -> bool {
        self == Variant::Vgr
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ida-fast" | "fast" => Ok(Variant::IdaFast),
            "ida-slow" | "slow" => Ok(Variant::IdaSlow),
            "vgr" => Ok(Variant::Vgr),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected ida-fast, ida-slow or vgr)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    pub n_vehicles: usize,
    /// Initial and desired speeds are drawn uniformly from this range [m/s].
    pub speed_range: [f64; 2],
    pub straight_fraction: f64,
    /// Mean time headway within a lane [s].
    pub headway: f64,
    /// Relative half-width of the uniform gap jitter.
    pub gap_jitter: f64,
    /// Distance from the zone entry to the nearest possible spawn [m].
    pub lead_gap: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            n_vehicles: 16,
            speed_range: [20.0, 25.0],
            straight_fraction: 0.15,
            headway: 3600.0 / 3500.0,
            gap_jitter: 0.25,
            lead_gap: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoadConfig {
    pub lane_width: f64,
    pub right_center: f64,
    pub zone_start: f64,
    pub zone_length: f64,
    /// Episode ends once every vehicle is this far past the finish line [m].
    pub finish_margin: f64,
    /// How far inside the road edge the vehicle centre must stay [m].
    /// Defaults to half the body width.
    pub rail_inset: Option<f64>,
}

impl Default for RoadConfig {
    fn default() -> Self {
        Self { lane_width: 3.5, right_center: 0.0, zone_start: 0.0, zone_length: 120.0, finish_margin: 50.0, rail_inset: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct V2vConfig {
    /// Maximum distance at broadcast time [m]; unlimited when absent.
    pub range: Option<f64>,
    /// Broadcast period [s]; the controller period when absent.
    pub period: Option<f64>,
    pub stale_after: f64,
}

impl Default for V2vConfig {
    fn default() -> Self {
        Self { range: None, period: None, stale_after: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Semi-minor axis of the barrier ellipse [m]. The default covers the
    /// aligned two-body footprint, see [`crate::geometry::footprint_radius`].
    pub ellipse_r: f64,
    pub ellipse_alpha: f64,
    pub tau: f64,
    pub slack_weight_agent: f64,
    pub slack_weight_road: f64,
    pub soft: bool,
    pub other_box_scale: f64,
    pub steer_limit: f64,
    pub accel_range: [f64; 2],
    pub kappa: f64,
    pub lookahead_time: f64,
    pub lookahead_offset: f64,
    /// Eigenvalue expression the variant targets are calibrated against.
    pub eigen_model: EigenModel,
    /// Overrides the variant's calibrated `s_a` coefficients.
    pub sensitivity: Option<SensitivityCoeffs>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let pp = PurePursuit::default();
        let bx = ControlBox::ego();
        Self {
            lambda1: 0.4,
            lambda2: 4.0,
            ellipse_r: 3.1,
            ellipse_alpha: 1.9,
            tau: 0.1,
            slack_weight_agent: 20_000.0,
            slack_weight_road: 1_000.0,
            soft: true,
            other_box_scale: 1.8,
            steer_limit: bx.delta[1],
            accel_range: bx.a_c,
            kappa: pp.kappa,
            lookahead_time: pp.lookahead_time,
            lookahead_offset: pp.lookahead_offset,
            eigen_model: EigenModel::Formula,
            sensitivity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VgrConfig {
    /// `d3` of the arctan rail [1/m].
    pub steepness: f64,
    /// Rail midpoint `d4` measured from the zone entry [m].
    pub midpoint_offset: f64,
}

impl Default for VgrConfig {
    fn default() -> Self {
        Self { steepness: 0.05, midpoint_offset: 60.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub variant: Variant,
    pub seed: u64,
    /// Controller period [s].
    pub ctrl_period: f64,
    pub nra_enabled: bool,
    /// Hard stop for stuck episodes [s].
    pub max_time: f64,
    pub spawn_attempts: usize,
    pub traffic: TrafficConfig,
    pub road: RoadConfig,
    pub v2v: V2vConfig,
    pub controller: ControllerConfig,
    pub vgr: VgrConfig,
    pub vehicle: VehicleParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            variant: Variant::IdaFast,
            seed: 0,
            ctrl_period: 0.1,
            nra_enabled: false,
            max_time: 60.0,
            spawn_attempts: 1000,
            traffic: TrafficConfig::default(),
            road: RoadConfig::default(),
            v2v: V2vConfig::default(),
            controller: ControllerConfig::default(),
            vgr: VgrConfig::default(),
            vehicle: VehicleParams::default(),
        }
    }
}

impl ScenarioConfig {
    /// Same world and controller, different variant.
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn lanes(&self) -> LaneGeometry {
        LaneGeometry { lane_width: self.road.lane_width, right_center: self.road.right_center }
    }

    pub fn zone_end(&self) -> f64 {
        self.road.zone_start + self.road.zone_length
    }

    pub fn finish_x(&self) -> f64 {
        self.zone_end() + self.road.finish_margin
    }

    pub fn bsm_period(&self) -> f64 {
        self.v2v.period.unwrap_or(self.ctrl_period)
    }

    pub fn rail_inset(&self) -> f64 {
        self.road.rail_inset.unwrap_or(0.5 * self.vehicle.body_width)
    }

    pub fn spec(&self) -> Result<EllipseSpec> {
        EllipseSpec::new(self.controller.ellipse_r, self.controller.ellipse_alpha)
    }

    pub fn tracker(&self) -> PurePursuit {
        PurePursuit {
            kappa: self.controller.kappa,
            lookahead_time: self.controller.lookahead_time,
            lookahead_offset: self.controller.lookahead_offset,
        }
    }

    /// `s_a` coefficients: the explicit override or the variant's calibration.
    pub fn sensitivity(&self) -> Result<SensitivityCoeffs> {
        if let Some(c) = self.controller.sensitivity {
            return Ok(c);
        }
        calibrate_sensitivity_for(self.controller.eigen_model, &self.variant.targets(), self.controller.kappa, &self.vehicle, &self.spec()?)
    }

    pub fn pcca(&self) -> Result<PccaConfig> {
        let c = &self.controller;
        let mut p = PccaConfig::new(self.sensitivity()?);
        p.gains = CbfGains::new(c.lambda1, c.lambda2)?;
        p.spec = self.spec()?;
        p.tau = c.tau;
        p.ego_box = ControlBox { delta: [-c.steer_limit, c.steer_limit], a_c: c.accel_range };
        p.other_box_scale = c.other_box_scale;
        p.slack_weight_agent = c.slack_weight_agent;
        p.slack_weight_road = c.slack_weight_road;
        p.soft = c.soft;
        p.stale_after = self.v2v.stale_after;
        Ok(p)
    }

    /// Physical road edges pulled in by the rail inset.
    pub fn outer_rails(&self) -> Rails {
        let lanes = self.lanes();
        let inset = self.rail_inset();
        Rails { right: RailFn::constant(lanes.right_edge() + inset), left: RailFn::constant(lanes.left_edge() - inset) }
    }

    /// Guard rails funnelling a lane-changer from its source lane into the target lane.
    pub fn guard_rails(&self, intent: &DrivingIntent) -> Rails {
        let lanes = self.lanes();
        let inset = self.rail_inset();
        let outer = self.outer_rails();
        let mid = self.road.zone_start + self.vgr.midpoint_offset;
        let k = self.vgr.steepness;
        match intent.target_lane {
            Lane::Left => Rails {
                right: RailFn::arctan_between(lanes.right_edge() + inset, lanes.divider() + inset, k, mid),
                left: outer.left,
            },
            Lane::Right => Rails {
                right: outer.right,
                left: RailFn::arctan_between(lanes.left_edge() - inset, lanes.divider() - inset, k, mid),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.ctrl_period > 0.0) {
            return bad("ctrl_period must be positive");
        }
        if self.v2v.period.is_some_and(|p| !(p > 0.0)) {
            return bad("v2v.period must be positive");
        }
        if self.v2v.range.is_some_and(|r| !(r >= 0.0)) {
            return bad("v2v.range must be non-negative");
        }
        let t = &self.traffic;
        if t.n_vehicles == 0 {
            return bad("traffic.n_vehicles must be at least 1");
        }
        if !(t.speed_range[0] > 0.0 && t.speed_range[1] >= t.speed_range[0]) {
            return bad("traffic.speed_range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&t.straight_fraction) {
            return bad("traffic.straight_fraction must lie in [0, 1]");
        }
        if !(t.headway > 0.0) || !(0.0..1.0).contains(&t.gap_jitter) {
            return bad("traffic.headway must be positive and gap_jitter in [0, 1)");
        }
        if !(self.road.lane_width > self.vehicle.body_width) || !(self.road.zone_length > 0.0) {
            return bad("road.lane_width must exceed the body width and zone_length be positive");
        }
        if !(self.max_time > 0.0) {
            return bad("max_time must be positive");
        }
        self.pcca().map(|_| ())
    }
}

/// Bit flags attached to every logged agent sample.
pub mod flags {
    pub const LANE_CHANGER: u32 = 1;
    pub const TARGET_LEFT: u32 = 1 << 1;
    pub const NRA: u32 = 1 << 2;
    pub const FALLBACK: u32 = 1 << 3;
    pub const GUARD_RAILS: u32 = 1 << 4;
    pub const IN_ZONE: u32 = 1 << 5;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub id: usize,
    pub intent: DrivingIntent,
    pub nra: bool,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub info: AgentInfo,
    pub state: AgentState,
    /// Control being applied since the last controller tick.
    pub applied: ControlInput,
    pub pcca: PccaState,
    pub solver: QpSolver,
}

#[derive(Debug, Clone)]
pub struct World {
    pub agents: Vec<Agent>,
    /// Messages each agent received at the last broadcast round.
    pub inbox: Vec<Vec<BsmMessage>>,
    pub last_broadcast: Option<f64>,
    /// Placement attempts rejected before the accepted one.
    pub spawn_rejections: usize,
}

impl World {
    pub fn new(agents: Vec<(AgentInfo, AgentState)>) -> Self {
        let n = agents.len();
        Self {
            agents: agents
                .into_iter()
                .map(|(info, state)| Agent { info, state, applied: ControlInput::ZERO, pcca: PccaState::new(), solver: QpSolver::new() })
                .collect(),
            inbox: vec![Vec::new(); n],
            last_broadcast: None,
            spawn_rejections: 0,
        }
    }

    pub fn states(&self) -> Vec<AgentState> {
        self.agents.iter().map(|a| a.state).collect()
    }
}

/// Every inter-agent barrier value and road margin is positive.
fn placement_ok(states: &[AgentState], cfg: &ScenarioConfig, spec: &EllipseSpec) -> bool {
    let rails = cfg.outer_rails();
    for (i, si) in states.iter().enumerate() {
        if si.y <= rails.right.value(si.x) || si.y >= rails.left.value(si.x) {
            return false;
        }
        for (j, sj) in states.iter().enumerate() {
            if i != j && ellipse_h(si.position(), si.theta, sj.position(), spec) <= 0.0 {
                return false;
            }
        }
    }
    true
}

/// Places the platoons upstream of the zone.
///
/// Vehicles alternate lanes (even ids right, odd ids left). In each lane the
/// gap to the vehicle ahead is `headway * mean speed` jittered uniformly by
/// `±gap_jitter`.
pub fn spawn_scenario(cfg: &ScenarioConfig, rng: &mut impl Rng) -> Result<World> {
    cfg.validate()?;
    let t = &cfg.traffic;
    let lanes = cfg.lanes();
    let spec = cfg.spec()?;
    let n = t.n_vehicles;
    let [vlo, vhi] = t.speed_range;
    let mean_gap = t.headway * 0.5 * (vlo + vhi);

    // Per-vehicle draws that do not depend on placement.
    let speeds: Vec<f64> = (0..n).map(|_| if vhi > vlo { rng.gen_range(vlo..vhi) } else { vlo }).collect();
    let straight: Vec<bool> = (0..n).map(|_| rng.gen_bool(t.straight_fraction)).collect();

    for attempt in 0..cfg.spawn_attempts.max(1) {
        let lead = cfg.road.zone_start - t.lead_gap;
        let mut front = [lead - rng.gen_range(0.0..mean_gap), lead - rng.gen_range(0.0..mean_gap)];
        let mut states = Vec::with_capacity(n);
        for id in 0..n {
            let lane = if id % 2 == 0 { Lane::Right } else { Lane::Left };
            let slot = &mut front[id % 2];
            let x = *slot;
            *slot -= mean_gap * (1.0 + t.gap_jitter * rng.gen_range(-1.0..=1.0));
            states.push(AgentState::new(x, lanes.center(lane), 0.0, speeds[id]));
        }
        if placement_ok(&states, cfg, &spec) {
            let agents = states
                .into_iter()
                .enumerate()
                .map(|(id, s)| {
                    let lane = if id % 2 == 0 { Lane::Right } else { Lane::Left };
                    let intent = if straight[id] {
                        DrivingIntent::straight(lane, s.v)
                    } else {
                        DrivingIntent::change_to(lane.other(), s.v, cfg.road.zone_start)
                    };
                    (AgentInfo { id, intent, nra: false }, s)
                })
                .collect();
            let mut world = World::new(agents);
            world.spawn_rejections = attempt;
            return Ok(world);
        }
    }
    Err(Error::Spawn(cfg.spawn_attempts))
}

/// Flags one uniformly chosen agent as non-responding.
pub fn make_nra(world: &mut World, rng: &mut impl Rng) -> usize {
    let k = rng.gen_range(0..world.agents.len());
    world.agents[k].info.nra = true;
    world.agents[k].info.id
}

fn in_range(a: &AgentState, b: &AgentState, range: Option<f64>) -> bool {
    match range {
        None => true,
        Some(r) => (a.x - b.x).hypot(a.y - b.y) <= r,
    }
}

/// Broadcast round: every agent's current state and applied control is
/// delivered to every other agent within range.
pub fn broadcast(world: &mut World, cfg: &ScenarioConfig, now: f64) {
    let msgs: Vec<BsmMessage> =
        world.agents.iter().map(|a| BsmMessage::from_state(a.info.id, &a.state, a.applied, &cfg.vehicle, now)).collect();
    for (i, inbox) in world.inbox.iter_mut().enumerate() {
        inbox.clear();
        let me = &world.agents[i].state;
        for (j, m) in msgs.iter().enumerate() {
            if i != j && in_range(me, &world.agents[j].state, cfg.v2v.range) {
                inbox.push(*m);
            }
        }
    }
    world.last_broadcast = Some(now);
}

/// Messages agent `ego` currently holds, refreshing them first when a
/// broadcast is due at `clock`.
pub fn perceive(world: &mut World, ego: usize, cfg: &ScenarioConfig, clock: f64) -> Vec<BsmMessage> {
    if broadcast_due(world.last_broadcast, cfg.bsm_period(), clock) {
        broadcast(world, cfg, clock);
    }
    world.inbox[ego].clone()
}

fn broadcast_due(last: Option<f64>, period: f64, now: f64) -> bool {
    match last {
        None => true,
        Some(t) => now - t >= period - 1e-9,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSample {
    pub state: AgentState,
    pub applied: ControlInput,
    pub flags: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub t: f64,
    pub agents: Vec<AgentSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    SolverFallback { status: QpStatus, clipped: bool },
    NonResponding,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub agent: Option<usize>,
    pub kind: EventKind,
}

/// Wall-clock cost of the safety filter; not part of the replayable log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopTiming {
    pub calls: usize,
    pub total_ms: f64,
    pub max_ms: f64,
}

impl LoopTiming {
    pub fn record(&mut self, ms: f64) {
        self.calls += 1;
        self.total_ms += ms;
        self.max_ms = self.max_ms.max(ms);
    }

    pub fn mean_ms(&self) -> f64 {
        if self.calls == 0 {
            0.0
        } else {
            self.total_ms / self.calls as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub ctrl_period: f64,
    pub agents: Vec<AgentInfo>,
    pub ticks: Vec<Tick>,
    pub events: Vec<Event>,
    /// Messages delivered per controller tick.
    pub bsm_deliveries: Vec<usize>,
    pub timing: LoopTiming,
}

impl EpisodeLog {
    pub fn timed_out(&self) -> bool {
        self.events.iter().any(|e| e.kind == EventKind::Timeout)
    }

    pub fn fallback_count(&self) -> usize {
        self.events.iter().filter(|e| matches!(e.kind, EventKind::SolverFallback { .. })).count()
    }
}

/// Per-agent rails actually used by its own filter.
fn own_rails(cfg: &ScenarioConfig, info: &AgentInfo) -> (Rails, bool) {
    if cfg.variant.uses_guard_rails() && info.intent.change_lane && !info.nra {
        (cfg.guard_rails(&info.intent), true)
    } else {
        (cfg.outer_rails(), false)
    }
}

/// Runs the episode loop on an already spawned world.
pub fn simulate(cfg: &ScenarioConfig, mut world: World) -> Result<EpisodeLog> {
    cfg.validate()?;
    let pcca = cfg.pcca()?;
    let lanes = cfg.lanes();
    let tracker = cfg.tracker();
    let ctx = FilterContext { config: &pcca, params: &cfg.vehicle, lanes: &lanes, tracker: &tracker, other_rails: cfg.outer_rails() };
    let period = cfg.ctrl_period;
    let rails: Vec<(Rails, bool)> = world.agents.iter().map(|a| own_rails(cfg, &a.info)).collect();
    let mut log = EpisodeLog {
        seed: cfg.seed,
        ctrl_period: period,
        agents: world.agents.iter().map(|a| a.info.clone()).collect(),
        ticks: Vec::new(),
        events: world
            .agents
            .iter()
            .filter(|a| a.info.nra)
            .map(|a| Event { t: 0.0, agent: Some(a.info.id), kind: EventKind::NonResponding })
            .collect(),
        bsm_deliveries: Vec::new(),
        timing: LoopTiming::default(),
    };
    let max_ticks = (cfg.max_time / period).ceil() as usize;
    let finish = cfg.finish_x();
    let (z0, z1) = (cfg.road.zone_start, cfg.zone_end());

    for k in 0..max_ticks {
        let now = k as f64 * period;
        if broadcast_due(world.last_broadcast, cfg.bsm_period(), now) {
            broadcast(&mut world, cfg, now);
        }
        log.bsm_deliveries.push(world.inbox.iter().map(Vec::len).sum());

        let mut samples = Vec::with_capacity(world.agents.len());
        for (i, agent) in world.agents.iter_mut().enumerate() {
            let info = &agent.info;
            let snapshot: &[BsmMessage] = if info.nra { &[] } else { &world.inbox[i] };
            let ego = EgoView { id: info.id, state: agent.state, intent: &info.intent, rails: rails[i].0 };
            let started = Instant::now();
            let out = filter_step(&ego, snapshot, &mut agent.pcca, &ctx, &mut agent.solver, period, now);
            log.timing.record(started.elapsed().as_secs_f64() * 1e3);
            agent.applied = out.applied;

            let mut f = 0;
            if info.intent.change_lane {
                f |= flags::LANE_CHANGER;
            }
            if info.intent.target_lane == Lane::Left {
                f |= flags::TARGET_LEFT;
            }
            if info.nra {
                f |= flags::NRA;
            }
            if rails[i].1 {
                f |= flags::GUARD_RAILS;
            }
            if (z0..=z1).contains(&agent.state.x) {
                f |= flags::IN_ZONE;
            }
            if out.fallback {
                f |= flags::FALLBACK;
                log.events.push(Event {
                    t: now,
                    agent: Some(info.id),
                    kind: EventKind::SolverFallback { status: out.status, clipped: out.fallback_clipped },
                });
            }
            samples.push(AgentSample { state: agent.state, applied: out.applied, flags: f });
        }
        log.ticks.push(Tick { t: now, agents: samples });

        for agent in &mut world.agents {
            agent.state = advance(&agent.state, agent.applied, &cfg.vehicle, period)?;
        }
        if world.agents.iter().all(|a| a.state.x > finish) {
            return Ok(log);
        }
    }
    log.events.push(Event { t: max_ticks as f64 * period, agent: None, kind: EventKind::Timeout });
    Ok(log)
}

/// Spawns (and optionally flags a non-responder) from the configured seed.
pub fn spawn_from_seed(cfg: &ScenarioConfig) -> Result<World> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut world = spawn_scenario(cfg, &mut rng)?;
    if cfg.nra_enabled {
        make_nra(&mut world, &mut rng);
    }
    Ok(world)
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub log: EpisodeLog,
    pub metrics: RunMetrics,
}

/// One full episode from `cfg.seed`.
pub fn run_episode(cfg: &ScenarioConfig) -> Result<Episode> {
    let world = spawn_from_seed(cfg)?;
    let log = simulate(cfg, world)?;
    let metrics = compute_metrics(&log, cfg)?;
    Ok(Episode { log, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeededMetrics {
    pub seed: u64,
    pub metrics: RunMetrics,
}

/// Runs `n_runs` episodes with seeds `base_seed..base_seed + n_runs`, in
/// parallel, returned in seed order.
pub fn run_monte_carlo(cfg: &ScenarioConfig, n_runs: usize, base_seed: u64) -> Result<Vec<SeededMetrics>> {
    cfg.validate()?;
    (0..n_runs as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed + i;
            let ep = run_episode(&ScenarioConfig { seed, ..cfg.clone() })?;
            Ok(SeededMetrics { seed, metrics: ep.metrics })
        })
        .collect()
}

const CSV_HEADER: &str = "t,id,x,y,theta,v,delta,a_c,flags";

/// One row per tick per agent. Float formatting round-trips exactly.
pub fn log_to_csv(log: &EpisodeLog) -> String {
    let mut out = String::with_capacity(log.ticks.len() * log.agents.len() * 96);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for tick in &log.ticks {
        for (id, s) in tick.agents.iter().enumerate() {
            let st = &s.state;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                tick.t, id, st.x, st.y, st.theta, st.v, s.applied.delta, s.applied.a_c, s.flags
            ));
        }
    }
    out
}

/// Rebuilds a log from its CSV export. Intents are recovered from the flags
/// and the first sample of each agent.
pub fn log_from_csv(text: &str, ctrl_period: f64, zone_start: f64) -> Result<EpisodeLog> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::LogFormat("empty log".into()))?;
    if header.trim() != CSV_HEADER {
        return Err(Error::LogFormat(format!("unexpected header `{header}`")));
    }
    let mut ticks: Vec<Tick> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::LogFormat(format!("line {}: {what}", n + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(bad("expected 9 columns"));
        }
        let num = |i: usize| cols[i].trim().parse::<f64>().map_err(|_| bad("malformed number"));
        let t = num(0)?;
        let id: usize = cols[1].trim().parse().map_err(|_| bad("malformed id"))?;
        let f: u32 = cols[8].trim().parse().map_err(|_| bad("malformed flags"))?;
        let sample = AgentSample {
            state: AgentState::new(num(2)?, num(3)?, num(4)?, num(5)?),
            applied: ControlInput::new(num(6)?, num(7)?),
            flags: f,
        };
        match ticks.last_mut() {
            Some(tick) if tick.t == t => {
                if id != tick.agents.len() {
                    return Err(bad("agent ids must be consecutive within a tick"));
                }
                tick.agents.push(sample);
            }
            _ => {
                if id != 0 {
                    return Err(bad("tick must start with agent 0"));
                }
                ticks.push(Tick { t, agents: vec![sample] });
            }
        }
    }
    let first = ticks.first().ok_or_else(|| Error::LogFormat("log has no samples".into()))?;
    if ticks.iter().any(|t| t.agents.len() != first.agents.len()) {
        return Err(Error::LogFormat("agent count changes between ticks".into()));
    }
    let agents = first
        .agents
        .iter()
        .enumerate()
        .map(|(id, s)| {
            let target = if s.flags & flags::TARGET_LEFT != 0 { Lane::Left } else { Lane::Right };
            let intent = if s.flags & flags::LANE_CHANGER != 0 {
                DrivingIntent::change_to(target, s.state.v, zone_start)
            } else {
                DrivingIntent::straight(target, s.state.v)
            };
            AgentInfo { id, intent, nra: s.flags & flags::NRA != 0 }
        })
        .collect();
    let mut events = Vec::new();
    for tick in &ticks {
        for (id, s) in tick.agents.iter().enumerate() {
            if s.flags & flags::FALLBACK != 0 {
                events.push(Event {
                    t: tick.t,
                    agent: Some(id),
                    kind: EventKind::SolverFallback { status: QpStatus::Infeasible, clipped: false },
                });
            }
        }
    }
    Ok(EpisodeLog {
        seed: 0,
        ctrl_period,
        agents,
        bsm_deliveries: Vec::new(),
        ticks,
        events,
        timing: LoopTiming::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ScenarioConfig {
        ScenarioConfig::default()
    }

    #[test]
    fn spawn_is_deterministic_and_valid() {
        let c = cfg();
        let a = spawn_scenario(&c, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = spawn_scenario(&c, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.states(), b.states());
        let spec = c.spec().unwrap();
        assert!(placement_ok(&a.states(), &c, &spec));
        assert_eq!(a.agents.len(), 16);
        let right = a.agents.iter().filter(|g| g.state.y == 0.0).count();
        assert_eq!(right, 8);
        for g in &a.agents {
            assert!(g.state.x < c.road.zone_start);
            assert_eq!(g.info.intent.desired_speed, g.state.v);
            if g.info.intent.change_lane {
                assert_ne!(g.info.intent.target_lane, c.lanes().lane_of(g.state.y));
            }
        }
    }

    #[test]
    fn unreachable_spawn_signals() {
        let mut c = cfg();
        c.traffic.headway = 0.05;
        c.traffic.gap_jitter = 0.0;
        c.spawn_attempts = 20;
        assert!(matches!(spawn_scenario(&c, &mut ChaCha8Rng::seed_from_u64(1)), Err(Error::Spawn(20))));
    }

    fn two_agents(gap: f64) -> World {
        let a = AgentInfo { id: 0, intent: DrivingIntent::straight(Lane::Right, 20.0), nra: false };
        let b = AgentInfo { id: 1, intent: DrivingIntent::straight(Lane::Right, 20.0), nra: false };
        World::new(vec![(a, AgentState::new(0.0, 0.0, 0.0, 20.0)), (b, AgentState::new(gap, 0.0, 0.0, 20.0))])
    }

    #[test]
    fn range_threshold() {
        let mut c = cfg();
        c.v2v.range = Some(50.0);
        let mut w = two_agents(51.0);
        assert!(perceive(&mut w, 0, &c, 0.0).is_empty());
        let mut w = two_agents(49.0);
        assert_eq!(perceive(&mut w, 0, &c, 0.0).len(), 1);
    }

    #[test]
    fn slow_broadcast_holds_messages() {
        let mut c = cfg();
        c.v2v.period = Some(0.2);
        let mut w = two_agents(30.0);
        let first = perceive(&mut w, 0, &c, 0.0);
        w.agents[1].state.x += 2.0;
        assert_eq!(perceive(&mut w, 0, &c, 0.1), first);
        let later = perceive(&mut w, 0, &c, 0.2);
        assert_eq!(later[0].x, 32.0);
    }

    #[test]
    fn lone_straight_vehicle_is_untouched() {
        let mut c = cfg();
        c.traffic.n_vehicles = 1;
        c.traffic.straight_fraction = 1.0;
        c.seed = 3;
        let ep = run_episode(&c).unwrap();
        let v0 = ep.log.ticks[0].agents[0].state.v;
        for t in &ep.log.ticks {
            let s = &t.agents[0];
            assert!((s.state.v - v0).abs() < 1e-9);
            assert!(s.applied.a_c.abs() < 1e-9 && s.applied.delta.abs() < 1e-9);
        }
        assert!(!ep.log.timed_out());
    }

    #[test]
    fn csv_round_trip() {
        let mut c = cfg();
        c.traffic.n_vehicles = 4;
        c.seed = 11;
        let ep = run_episode(&c).unwrap();
        let text = log_to_csv(&ep.log);
        let back = log_from_csv(&text, c.ctrl_period, c.road.zone_start).unwrap();
        assert_eq!(back.ticks, ep.log.ticks);
        assert_eq!(back.agents.iter().map(|a| a.intent.change_lane).collect::<Vec<_>>(),
                   ep.log.agents.iter().map(|a| a.intent.change_lane).collect::<Vec<_>>());
        assert!(log_from_csv("nope\n", 0.1, 0.0).is_err());
    }

    #[test]
    fn guard_rails_funnel_into_target_lane() {
        let c = cfg().with_variant(Variant::Vgr);
        let lanes = c.lanes();
        let r = c.guard_rails(&DrivingIntent::change_to(Lane::Left, 22.0, 0.0));
        let inset = c.rail_inset();
        assert!((r.right.value(-1e6) - (lanes.right_edge() + inset)).abs() < 1e-3);
        assert!((r.right.value(1e6) - (lanes.divider() + inset)).abs() < 1e-3);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..200 {
            let y = r.right.value(-100.0 + k as f64 * 2.0);
            assert!(y > prev);
            prev = y;
        }
        let l = c.guard_rails(&DrivingIntent::change_to(Lane::Right, 22.0, 0.0));
        assert!((l.left.value(1e6) - (lanes.divider() - inset)).abs() < 1e-3);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("IDA-fast".parse::<Variant>().unwrap(), Variant::IdaFast);
        assert_eq!("ida_slow".parse::<Variant>().unwrap(), Variant::IdaSlow);
        assert!("centralized".parse::<Variant>().is_err());
    }
}
