//! Open-loop metrics, the kinematic closed-loop harness, and report writers.

mod closed_loop;
mod report;

pub use closed_loop::{
    closed_loop_rollout, default_scenario_suite, score_scenarios, ContinuationPolicy, KindScore, ModelPolicy, ObservationConfig, Policy,
    RolloutTrace, ScenarioKind, ScenarioScores, ScenarioSpec, ZeroMotionPolicy, MAX_ACCEL, MAX_HEADING_CHANGE,
};
pub use report::{csv_table, svg_trajectory_plot, write_text, PlotLayer};

use serde::{Deserialize, Serialize};

use crate::data::{UnifiedClip, COORD_DIMS};
use crate::error::{contract_err, Result};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::rewards::{r_total, RewardConfig};

/// Horizons (seconds) reported by the open-loop metrics.
pub const EVAL_HORIZONS: [f64; 3] = [1.0, 2.0, 3.0];
/// Ego footprint half-extents (length, width), meters.
pub const EGO_HALF_EXTENTS: [f64; 2] = [2.0, 0.9];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub at_1s: f64,
    pub at_2s: f64,
    pub at_3s: f64,
    pub avg: f64,
}

impl HorizonMetrics {
    fn from_values(v: [f64; 3]) -> Self {
        HorizonMetrics {
            at_1s: v[0],
            at_2s: v[1],
            at_3s: v[2],
            avg: (v[0] + v[1] + v[2]) / 3.0,
        }
    }

    pub fn values(&self) -> [f64; 3] {
        [self.at_1s, self.at_2s, self.at_3s]
    }
}

/// Waypoint row whose timestamp is `t` seconds, waypoint `j` sitting at
/// `(j + 1)·dt`.
fn waypoint_index(t: f64, dt: f64, horizon: usize) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(contract_err!("dt must be > 0, got {dt}"));
    }
    let steps = t / dt;
    if (steps - steps.round()).abs() > 1e-9 || steps.round() < 1.0 {
        return Err(contract_err!("horizon {t}s is not a multiple of dt {dt}"));
    }
    let j = steps.round() as usize - 1;
    if j >= horizon {
        return Err(contract_err!(
            "trajectory of {horizon} waypoints at dt {dt} does not reach {t}s"
        ));
    }
    Ok(j)
}

fn check_traj(t: &Tensor, what: &str) -> Result<usize> {
    let (h, n) = t.require_2d(what)?;
    if n != COORD_DIMS {
        return Err(contract_err!("{what} must have {COORD_DIMS} columns"));
    }
    Ok(h)
}

/// Euclidean error at 1, 2 and 3 seconds and their mean.
pub fn l2_at_horizons(pred: &Tensor, gt: &Tensor, dt: f64) -> Result<HorizonMetrics> {
    let h = check_traj(pred, "pred")?;
    if gt.shape() != pred.shape() {
        return Err(contract_err!("pred {:?} and gt {:?} differ", pred.shape(), gt.shape()));
    }
    let mut v = [0.0; 3];
    for (k, &t) in EVAL_HORIZONS.iter().enumerate() {
        let j = waypoint_index(t, dt, h)?;
        let dx = pred.get2(j, 0) - gt.get2(j, 0);
        let dy = pred.get2(j, 1) - gt.get2(j, 1);
        v[k] = dx.hypot(dy);
    }
    Ok(HorizonMetrics::from_values(v))
}

/// Axis-aligned box; `centers[j]` is its center at time `j·dt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleBox {
    pub centers: Vec<[f64; 2]>,
    pub half_extents: [f64; 2],
}

impl ObstacleBox {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if !(self.half_extents[0] > 0.0 && self.half_extents[1] > 0.0) {
            return Err(contract_err!("obstacle half extents must be positive"));
        }
        if self.centers.len() < horizon + 1 {
            return Err(contract_err!(
                "obstacle track has {} centers, needs {} (t = 0 through the horizon)",
                self.centers.len(),
                horizon + 1
            ));
        }
        Ok(())
    }

    /// Ego center `p` overlaps the box at step `j` once the ego footprint
    /// `ego_half` is added to the box.
    pub fn contains(&self, j: usize, p: [f64; 2], ego_half: [f64; 2]) -> bool {
        let c = self.centers[j];
        (p[0] - c[0]).abs() <= self.half_extents[0] + ego_half[0]
            && (p[1] - c[1]).abs() <= self.half_extents[1] + ego_half[1]
    }
}

/// Percentage of clips whose trajectory enters an obstacle by each horizon.
pub fn collision_rate(
    preds: &[Tensor],
    scenes: &[Vec<ObstacleBox>],
    dt: f64,
    ego_half: [f64; 2],
) -> Result<HorizonMetrics> {
    if preds.len() != scenes.len() {
        return Err(contract_err!(
            "{} predictions but {} obstacle sets",
            preds.len(),
            scenes.len()
        ));
    }
    if preds.is_empty() {
        return Err(contract_err!("collision_rate needs at least one clip"));
    }
    let mut hits = [0usize; 3];
    for (pred, boxes) in preds.iter().zip(scenes) {
        let h = check_traj(pred, "pred")?;
        let last = waypoint_index(EVAL_HORIZONS[2], dt, h)?;
        for b in boxes {
            b.validate(last + 1)?;
        }
        // first colliding waypoint, if any
        let first = (0..=last).find(|&j| {
            let p = [pred.get2(j, 0), pred.get2(j, 1)];
            boxes.iter().any(|b| b.contains(j + 1, p, ego_half))
        });
        if let Some(j) = first {
            for (k, &t) in EVAL_HORIZONS.iter().enumerate() {
                if j <= waypoint_index(t, dt, h)? {
                    hits[k] += 1;
                }
            }
        }
    }
    let n = preds.len() as f64;
    Ok(HorizonMetrics::from_values(hits.map(|c| 100.0 * c as f64 / n)))
}

/// Mean open-loop metrics of a model's mean predictions over `clips`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopSummary {
    pub count: usize,
    pub l2: HorizonMetrics,
    pub mean_r_total: f64,
}

/// One parallel decode per clip.
pub fn evaluate_open_loop(model: &Model, clips: &[UnifiedClip], rewards: &RewardConfig) -> Result<OpenLoopSummary> {
    if clips.is_empty() {
        return Err(contract_err!("no clips to evaluate"));
    }
    let mut l2 = [0.0; 3];
    let mut r = 0.0;
    for clip in clips {
        let pred = model.predict(clip)?.waypoints;
        let gt = clip.actions_tensor();
        let m = l2_at_horizons(&pred, &gt, rewards.dt)?;
        for (acc, v) in l2.iter_mut().zip(m.values()) {
            *acc += v;
        }
        r += r_total(&pred, &gt, rewards)?;
    }
    let n = clips.len() as f64;
    Ok(OpenLoopSummary {
        count: clips.len(),
        l2: HorizonMetrics::from_values(l2.map(|v| v / n)),
        mean_r_total: r / n,
    })
}
