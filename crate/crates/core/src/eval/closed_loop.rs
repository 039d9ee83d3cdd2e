//! Kinematic closed-loop harness: the ego replans at a fixed rate, tracks the
//! first planned waypoint with a bounded heading change and acceleration, and
//! shares the road with one constant-velocity adversary.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::EGO_HALF_EXTENTS;
use crate::data::{EgoState, Maneuver, ManeuverKind, SourceTag, UnifiedClip, COORD_DIMS, STEP_DT};
use crate::error::{contract_err, Result};
use crate::model::Model;
use crate::numerics::Tensor;

/// Largest heading change the ego can make while tracking one waypoint.
pub const MAX_HEADING_CHANGE: f64 = 40.0 * PI / 180.0;
/// About 0.6 g, m/s².
pub const MAX_ACCEL: f64 = 0.6 * 9.81;
const SUBSTEPS: usize = 20;

/// Anything that maps an observation clip to an `H×2` plan.
pub trait Policy {
    fn name(&self) -> &str;
    fn plan(&self, obs: &UnifiedClip) -> Result<Tensor>;
}

/// Plans to stay where it is, which the tracker turns into hard braking.
#[derive(Clone, Copy, Debug)]
pub struct ZeroMotionPolicy {
    pub horizon: usize,
}

impl Policy for ZeroMotionPolicy {
    fn name(&self) -> &str {
        "zero-motion"
    }

    fn plan(&self, _obs: &UnifiedClip) -> Result<Tensor> {
        Ok(Tensor::zeros(&[self.horizon, COORD_DIMS]))
    }
}

pub struct ModelPolicy<'a> {
    pub model: &'a Model,
    pub label: String,
}

impl Policy for ModelPolicy<'_> {
    fn name(&self) -> &str {
        &self.label
    }

    fn plan(&self, obs: &UnifiedClip) -> Result<Tensor> {
        Ok(self.model.predict(obs)?.waypoints)
    }
}

/// Extrapolates the current speed, tangential acceleration and yaw rate.
#[derive(Clone, Copy, Debug)]
pub struct ContinuationPolicy {
    pub horizon: usize,
}

impl Policy for ContinuationPolicy {
    fn name(&self) -> &str {
        "continuation"
    }

    fn plan(&self, obs: &UnifiedClip) -> Result<Tensor> {
        let s = obs.current_state();
        let v = s.speed();
        let (accel, yaw_rate) = if v > 1e-6 {
            let [vx, vy] = s.velocity;
            let [ax, ay] = s.acceleration;
            ((vx * ax + vy * ay) / v, (vx * ay - vy * ax) / (v * v))
        } else {
            (0.0, 0.0)
        };
        let m = Maneuver {
            kind: ManeuverKind::Straight,
            v0: v,
            accel,
            yaw_rate,
        };
        let data = (1..=self.horizon).flat_map(|j| m.position(j as f64 * STEP_DT)).collect();
        Tensor::new(vec![self.horizon, COORD_DIMS], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Stationary,
    Frontal,
    Side,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [ScenarioKind::Stationary, ScenarioKind::Frontal, ScenarioKind::Side];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Stationary => "stationary",
            ScenarioKind::Frontal => "frontal",
            ScenarioKind::Side => "side",
        }
    }
}

/// The world frame is the ego frame at `t = 0`. Before `t = 0` the ego
/// follows the analytic motion given by speed, acceleration and yaw rate,
/// which fills the first observation's history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub kind: ScenarioKind,
    pub ego_speed: f64,
    #[serde(default)]
    pub ego_accel: f64,
    #[serde(default)]
    pub ego_yaw_rate: f64,
    pub adversary_start: [f64; 2],
    pub adversary_velocity: [f64; 2],
    /// Half length along the adversary's direction of travel, half width.
    pub adversary_half_extents: [f64; 2],
    pub duration: f64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.ego_speed, self.ego_accel, self.ego_yaw_rate, self.duration]
            .into_iter()
            .chain(self.adversary_start)
            .chain(self.adversary_velocity)
            .chain(self.adversary_half_extents)
            .all(f64::is_finite);
        if !finite {
            return Err(contract_err!("scenario {}: non-finite field", self.name));
        }
        if self.ego_speed < 0.0 || !(self.duration > 0.0) {
            return Err(contract_err!("scenario {}: needs ego_speed >= 0 and duration > 0", self.name));
        }
        if !(self.adversary_half_extents[0] > 0.0 && self.adversary_half_extents[1] > 0.0) {
            return Err(contract_err!("scenario {}: adversary half extents must be positive", self.name));
        }
        let [vx, vy] = self.adversary_velocity;
        let consistent = match self.kind {
            ScenarioKind::Stationary => vx == 0.0 && vy == 0.0,
            ScenarioKind::Frontal => vx < 0.0 && vy.abs() <= 0.1 * vx.abs(),
            ScenarioKind::Side => vy.abs() > 0.0 && vy.abs() >= vx.abs(),
        };
        if !consistent {
            return Err(contract_err!(
                "scenario {}: adversary velocity {:?} does not fit kind {}",
                self.name,
                self.adversary_velocity,
                self.kind.as_str()
            ));
        }
        let ego = Obb::new([0.0, 0.0], 0.0, EGO_HALF_EXTENTS);
        if ego.overlaps(&self.adversary_box(0.0)) {
            return Err(contract_err!("scenario {}: adversary overlaps the ego at t = 0", self.name));
        }
        Ok(())
    }

    fn adversary_box(&self, t: f64) -> Obb {
        let [vx, vy] = self.adversary_velocity;
        let heading = if vx == 0.0 && vy == 0.0 { 0.0 } else { vy.atan2(vx) };
        let c = [self.adversary_start[0] + vx * t, self.adversary_start[1] + vy * t];
        Obb::new(c, heading, self.adversary_half_extents)
    }

    fn ego_prehistory(&self) -> Maneuver {
        Maneuver {
            kind: ManeuverKind::Straight,
            v0: self.ego_speed,
            accel: self.ego_accel,
            yaw_rate: self.ego_yaw_rate,
        }
    }

    /// Closing speed between ego and adversary at `t = 0`.
    pub fn reference_speed(&self) -> f64 {
        (self.ego_speed - self.adversary_velocity[0]).hypot(-self.adversary_velocity[1])
    }
}

/// Oriented rectangle.
#[derive(Clone, Copy, Debug)]
struct Obb {
    c: [f64; 2],
    axes: [[f64; 2]; 2],
    half: [f64; 2],
}

impl Obb {
    fn new(c: [f64; 2], heading: f64, half: [f64; 2]) -> Self {
        let (s, co) = heading.sin_cos();
        Obb {
            c,
            axes: [[co, s], [-s, co]],
            half,
        }
    }

    fn radius_on(&self, axis: [f64; 2]) -> f64 {
        (0..2)
            .map(|k| self.half[k] * (self.axes[k][0] * axis[0] + self.axes[k][1] * axis[1]).abs())
            .sum()
    }

    /// Separating-axis test; touching counts as overlap.
    fn overlaps(&self, other: &Obb) -> bool {
        let d = [other.c[0] - self.c[0], other.c[1] - self.c[1]];
        self.axes.iter().chain(other.axes.iter()).all(|&a| {
            let dist = (d[0] * a[0] + d[1] * a[1]).abs();
            dist <= self.radius_on(a) + other.radius_on(a) + 1e-9
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub scenario: String,
    pub kind: ScenarioKind,
    pub policy: String,
    /// One entry per replanning step, starting at `t = 0`.
    pub times: Vec<f64>,
    pub ego: Vec<[f64; 2]>,
    pub heading: Vec<f64>,
    pub speed: Vec<f64>,
    pub adversary: Vec<[f64; 2]>,
    pub policy_calls: usize,
    pub collision_time: Option<f64>,
    pub impact_speed: Option<f64>,
    pub reference_speed: f64,
    /// The policy returned a malformed or non-finite plan; the rollout stopped.
    pub invalid: bool,
}

impl RolloutTrace {
    pub fn collided(&self) -> bool {
        self.collision_time.is_some() || self.invalid
    }

    /// 5 without a collision, otherwise `5·max(0, 1 − impact/reference)`;
    /// invalid rollouts score 0.
    pub fn score(&self) -> f64 {
        if self.invalid {
            return 0.0;
        }
        match self.impact_speed {
            None => 5.0,
            Some(_) if self.reference_speed <= 0.0 => 0.0,
            Some(v) => 5.0 * (1.0 - v / self.reference_speed).max(0.0),
        }
    }
}

/// Shape of the observation clips handed to the policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationConfig {
    pub history_len: usize,
    pub horizon: usize,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        ObservationConfig {
            history_len: 7,
            horizon: 10,
        }
    }
}

/// World-frame kinematic sample.
#[derive(Clone, Copy, Debug)]
struct LogEntry {
    t: f64,
    p: [f64; 2],
    v: [f64; 2],
    a: [f64; 2],
}

fn lerp2(a: [f64; 2], b: [f64; 2], w: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * w, a[1] + (b[1] - a[1]) * w]
}

fn sample_log(log: &[LogEntry], t: f64) -> LogEntry {
    let i = log.partition_point(|e| e.t <= t);
    if i == 0 {
        return log[0];
    }
    if i == log.len() {
        return log[i - 1];
    }
    let (a, b) = (log[i - 1], log[i]);
    let w = (t - a.t) / (b.t - a.t);
    LogEntry {
        t,
        p: lerp2(a.p, b.p, w),
        v: lerp2(a.v, b.v, w),
        a: lerp2(a.a, b.a, w),
    }
}

fn observe(log: &[LogEntry], t: f64, p: [f64; 2], psi: f64, obs: &ObservationConfig, name: &str) -> UnifiedClip {
    let (s, c) = psi.sin_cos();
    let rot = |v: [f64; 2]| [c * v[0] + s * v[1], -s * v[0] + c * v[1]];
    let history = (0..obs.history_len)
        .map(|k| {
            let back = (obs.history_len - 1 - k) as f64 * STEP_DT;
            let e = sample_log(log, t - back);
            let rel = if back == 0.0 {
                [0.0, 0.0]
            } else {
                rot([e.p[0] - p[0], e.p[1] - p[1]])
            };
            EgoState {
                t_offset: if back == 0.0 { 0.0 } else { -back },
                position: rel,
                velocity: rot(e.v),
                acceleration: rot(e.a),
            }
        })
        .collect();
    UnifiedClip {
        clip_id: format!("{name}@{t:.2}"),
        source: SourceTag::Synthetic,
        history,
        actions: vec![[0.0, 0.0]; obs.horizon],
        reasoning_text: None,
        camera_refs: None,
    }
}

/// Runs `spec` for its full duration, calling `policy` exactly
/// `ceil(duration·replan_hz)` times unless a plan is invalid.
pub fn closed_loop_rollout(
    policy: &dyn Policy,
    spec: &ScenarioSpec,
    replan_hz: f64,
    obs_cfg: &ObservationConfig,
) -> Result<RolloutTrace> {
    spec.validate()?;
    if !(replan_hz > 0.0 && replan_hz.is_finite()) {
        return Err(contract_err!("replan_hz must be > 0, got {replan_hz}"));
    }
    if obs_cfg.history_len == 0 || obs_cfg.horizon == 0 {
        return Err(contract_err!("observation history_len and horizon must be > 0"));
    }
    let calls = (spec.duration * replan_hz - 1e-9).ceil().max(1.0) as usize;
    let step = 1.0 / replan_hz;
    let h = step / SUBSTEPS as f64;

    let pre = spec.ego_prehistory();
    let mut log: Vec<LogEntry> = (1..obs_cfg.history_len)
        .rev()
        .map(|k| {
            let st = pre.state(-(k as f64) * STEP_DT);
            LogEntry {
                t: st.t_offset,
                p: st.position,
                v: st.velocity,
                a: st.acceleration,
            }
        })
        .collect();
    let s0 = pre.state(0.0);
    log.push(LogEntry {
        t: 0.0,
        p: [0.0, 0.0],
        v: s0.velocity,
        a: s0.acceleration,
    });

    let (mut t, mut p, mut psi, mut v) = (0.0, [0.0, 0.0], 0.0f64, spec.ego_speed);
    let mut trace = RolloutTrace {
        scenario: spec.name.clone(),
        kind: spec.kind,
        policy: policy.name().to_string(),
        times: vec![0.0],
        ego: vec![p],
        heading: vec![psi],
        speed: vec![v],
        adversary: vec![spec.adversary_box(0.0).c],
        policy_calls: 0,
        collision_time: None,
        impact_speed: None,
        reference_speed: spec.reference_speed(),
        invalid: false,
    };

    for call in 0..calls {
        let obs = observe(&log, t, p, psi, obs_cfg, &spec.name);
        let plan = policy.plan(&obs);
        trace.policy_calls += 1;
        let w = match plan {
            Ok(plan) if plan.ndim() == 2 && plan.shape()[1] == COORD_DIMS && plan.shape()[0] > 0 => {
                [plan.get2(0, 0), plan.get2(0, 1)]
            }
            Ok(_) => {
                trace.invalid = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if !(w[0].is_finite() && w[1].is_finite()) {
            log::warn!("{}: non-finite plan at t = {t}", spec.name);
            trace.invalid = true;
            break;
        }

        // arc through the waypoint, tangent to the current heading
        let chord = w[0].hypot(w[1]);
        let dpsi = if chord < 1e-9 {
            0.0
        } else {
            (2.0 * w[1].atan2(w[0])).clamp(-MAX_HEADING_CHANGE, MAX_HEADING_CHANGE)
        };
        let progress = if w[0] >= 0.0 { chord } else { 0.0 };
        let v_target = 2.0 * progress / STEP_DT - v;
        let accel = ((v_target - v) / STEP_DT).clamp(-MAX_ACCEL, MAX_ACCEL);
        let omega = dpsi / STEP_DT;

        let start = call as f64 * step;
        let mut a_eff = accel;
        for k in 1..=SUBSTEPS {
            let v_new = (v + accel * h).max(0.0);
            a_eff = (v_new - v) / h;
            let mid = psi + 0.5 * omega * h;
            let ds = 0.5 * (v + v_new) * h;
            p = [p[0] + ds * mid.cos(), p[1] + ds * mid.sin()];
            psi += omega * h;
            v = v_new;
            t = start + k as f64 * h;
            if trace.collision_time.is_none() {
                let ego = Obb::new(p, psi, EGO_HALF_EXTENTS);
                if ego.overlaps(&spec.adversary_box(t)) {
                    let [ax, ay] = spec.adversary_velocity;
                    trace.collision_time = Some(t);
                    trace.impact_speed = Some((v * psi.cos() - ax).hypot(v * psi.sin() - ay));
                }
            }
        }
        let (s, c) = psi.sin_cos();
        let lat = v * omega;
        log.push(LogEntry {
            t,
            p,
            v: [v * c, v * s],
            a: [a_eff * c - lat * s, a_eff * s + lat * c],
        });
        trace.times.push(t);
        trace.ego.push(p);
        trace.heading.push(psi);
        trace.speed.push(v);
        trace.adversary.push(spec.adversary_box(t).c);
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindScore {
    pub kind: ScenarioKind,
    pub count: usize,
    pub mean_score: f64,
    /// Percent of rollouts that collided.
    pub collision_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScores {
    pub per_kind: Vec<KindScore>,
    /// Mean over all rollouts.
    pub mean_score: f64,
    pub collision_rate: f64,
}

pub fn score_scenarios(traces: &[RolloutTrace]) -> Result<ScenarioScores> {
    if traces.is_empty() {
        return Err(contract_err!("no rollouts to score"));
    }
    let summarize = |ts: &[&RolloutTrace]| {
        let n = ts.len() as f64;
        let score = ts.iter().map(|t| t.score()).sum::<f64>() / n;
        let cr = 100.0 * ts.iter().filter(|t| t.collided()).count() as f64 / n;
        (score, cr)
    };
    let per_kind = ScenarioKind::ALL
        .into_iter()
        .filter_map(|kind| {
            let ts: Vec<&RolloutTrace> = traces.iter().filter(|t| t.kind == kind).collect();
            (!ts.is_empty()).then(|| {
                let (mean_score, collision_rate) = summarize(&ts);
                KindScore {
                    kind,
                    count: ts.len(),
                    mean_score,
                    collision_rate,
                }
            })
        })
        .collect();
    let all: Vec<&RolloutTrace> = traces.iter().collect();
    let (mean_score, collision_rate) = summarize(&all);
    Ok(ScenarioScores {
        per_kind,
        mean_score,
        collision_rate,
    })
}

/// Three scenarios per kind. Frontal: an oncoming car drives down the
/// tangent of a turning ego. Side: a crossing car reaches the ego's braking
/// stop point after a continuing ego has already passed it. Stationary: a
/// parked car on the tangent beyond the braking distance.
pub fn default_scenario_suite() -> Vec<ScenarioSpec> {
    let car = [2.0, 0.9];
    let mut out = Vec::new();
    for (i, &(v, w, u, x0)) in [(10.0, 0.11, 5.0, 45.0), (8.0, 0.1, 4.0, 38.0), (12.0, 0.1, 6.0, 55.0)]
        .iter()
        .enumerate()
    {
        out.push(ScenarioSpec {
            name: format!("frontal_{i}"),
            kind: ScenarioKind::Frontal,
            ego_speed: v,
            ego_accel: 0.0,
            ego_yaw_rate: w,
            adversary_start: [x0, 0.0],
            adversary_velocity: [-u, 0.0],
            adversary_half_extents: car,
            duration: 8.0,
        });
    }
    for (i, &(v, u)) in [(10.0, 6.0), (8.0, 5.0), (12.0, 7.0)].iter().enumerate() {
        let stop = v * v / (2.0 * MAX_ACCEL);
        out.push(ScenarioSpec {
            name: format!("side_{i}"),
            kind: ScenarioKind::Side,
            ego_speed: v,
            ego_accel: 0.0,
            ego_yaw_rate: 0.0,
            adversary_start: [stop, -20.0],
            adversary_velocity: [0.0, u],
            adversary_half_extents: car,
            duration: 6.0,
        });
    }
    for (i, &(v, w, x0)) in [(10.0, 0.11, 40.0), (8.0, 0.1, 35.0), (12.0, 0.1, 50.0)].iter().enumerate() {
        out.push(ScenarioSpec {
            name: format!("stationary_{i}"),
            kind: ScenarioKind::Stationary,
            ego_speed: v,
            ego_accel: 0.0,
            ego_yaw_rate: w,
            adversary_start: [x0, 0.0],
            adversary_velocity: [0.0, 0.0],
            adversary_half_extents: car,
            duration: 6.0,
        });
    }
    out
}
