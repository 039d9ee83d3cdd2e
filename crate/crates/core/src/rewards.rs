//! Rule-based trajectory rewards: weighted distance to ground truth, a
//! steering-ratio constraint, an acceleration constraint, and their weighted
//! total.

use serde::{Deserialize, Serialize};

use crate::data::COORD_DIMS;
use crate::error::{contract_err, Result};
use crate::numerics::Tensor;

/// Segments shorter than this along x count as degenerate.
pub const DEGENERATE_DX: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: [f64; 3],
    /// Steering limit as |Δy/Δx|; 0.84 is close to tan(40°) ≈ 0.8391.
    pub steer_ratio_limit: f64,
    /// m/s², about 0.6 g.
    pub acc_limit: f64,
    pub dt: f64,
    /// Use `offset − min(offset, ·)` so the trajectory reward is floored at 0.
    pub clip_traj: bool,
    /// Leading constant of the trajectory reward.
    pub traj_reward_offset: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.95,
            theta: [0.8, 0.1, 0.1],
            steer_ratio_limit: 0.84,
            acc_limit: 6.0,
            dt: 0.5,
            clip_traj: false,
            traj_reward_offset: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(contract_err!("rewards.gamma must be in (0, 1], got {}", self.gamma));
        }
        if self.theta.iter().any(|t| !(*t >= 0.0)) || !(self.theta.iter().sum::<f64>() > 0.0) {
            return Err(contract_err!(
                "rewards.theta must be non-negative with a positive sum, got {:?}",
                self.theta
            ));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(contract_err!("rewards.alpha and rewards.beta must be >= 0"));
        }
        if !(self.steer_ratio_limit > 0.0) {
            return Err(contract_err!("rewards.steer_ratio_limit must be > 0"));
        }
        if !(self.acc_limit > 0.0) {
            return Err(contract_err!("rewards.acc_limit must be > 0"));
        }
        if !(self.dt > 0.0) {
            return Err(contract_err!("rewards.dt must be > 0"));
        }
        if !self.traj_reward_offset.is_finite() {
            return Err(contract_err!("rewards.traj_reward_offset must be finite"));
        }
        Ok(())
    }
}

fn points(t: &Tensor, what: &str) -> Result<usize> {
    let (h, n) = t.require_2d(what)?;
    if n != COORD_DIMS {
        return Err(contract_err!("{what} must have {COORD_DIMS} columns, got {n}"));
    }
    Ok(h)
}

/// `offset − (1/H)·Σᵢ γⁱ(α·dxᵢ² + β·dyᵢ²)` with `i` counted from 1.
pub fn r_traj(pred: &Tensor, gt: &Tensor, cfg: &RewardConfig) -> Result<f64> {
    let h = points(pred, "pred")?;
    if gt.shape() != pred.shape() {
        return Err(contract_err!("pred {:?} and gt {:?} differ in shape", pred.shape(), gt.shape()));
    }
    if h == 0 {
        return Err(contract_err!("r_traj needs at least one waypoint"));
    }
    let (p, g) = (pred.data(), gt.data());
    let mut acc = 0.0;
    let mut w = 1.0;
    for i in 0..h {
        w *= cfg.gamma;
        let dx = p[2 * i] - g[2 * i];
        let dy = p[2 * i + 1] - g[2 * i + 1];
        acc += w * (cfg.alpha * dx * dx + cfg.beta * dy * dy);
    }
    let penalty = acc / h as f64;
    let off = cfg.traj_reward_offset;
    Ok(if cfg.clip_traj { off - penalty.min(off) } else { off - penalty })
}

/// Fraction of segments with `|Δy/Δx|` below the steering limit.
pub fn r_steer(pred: &Tensor, cfg: &RewardConfig) -> Result<f64> {
    let h = points(pred, "pred")?;
    if h < 2 {
        return Err(contract_err!("r_steer needs at least 2 waypoints, got {h}"));
    }
    let p = pred.data();
    let mut ok = 0usize;
    for i in 0..h - 1 {
        let dx = p[2 * i + 2] - p[2 * i];
        let dy = p[2 * i + 3] - p[2 * i + 1];
        let pass = if dx.abs() < DEGENERATE_DX {
            // stationary passes, a pure lateral jump does not
            dy.abs() < DEGENERATE_DX
        } else {
            (dy / dx).abs() < cfg.steer_ratio_limit
        };
        ok += pass as usize;
    }
    Ok(ok as f64 / (h - 1) as f64)
}

/// `(‖pⱼ₊₁ − pⱼ‖ − ‖pⱼ − pⱼ₋₁‖) / dt²` for every interior waypoint.
pub fn acc_seq(pred: &Tensor, cfg: &RewardConfig) -> Result<Vec<f64>> {
    let h = points(pred, "pred")?;
    if h < 3 {
        return Err(contract_err!("acc_seq needs at least 3 waypoints, got {h}"));
    }
    let p = pred.data();
    let seg = |i: usize| (p[2 * i + 2] - p[2 * i]).hypot(p[2 * i + 3] - p[2 * i + 1]);
    let dt2 = cfg.dt * cfg.dt;
    Ok((1..h - 1).map(|j| (seg(j) - seg(j - 1)) / dt2).collect())
}

pub fn r_acc(pred: &Tensor, cfg: &RewardConfig) -> Result<f64> {
    let acc = acc_seq(pred, cfg)?;
    let ok = acc.iter().filter(|a| a.abs() < cfg.acc_limit).count();
    Ok(ok as f64 / acc.len() as f64)
}

pub fn r_total(pred: &Tensor, gt: &Tensor, cfg: &RewardConfig) -> Result<f64> {
    let [t1, t2, t3] = cfg.theta;
    Ok(t1 * r_traj(pred, gt, cfg)? + t2 * r_steer(pred, cfg)? + t3 * r_acc(pred, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn traj_examples() {
        let cfg = RewardConfig {
            gamma: 1.0,
            ..Default::default()
        };
        let gt = traj(&[[1.0, 0.0], [2.0, 0.0]]);
        assert_eq!(r_traj(&gt, &gt, &cfg).unwrap(), 1.0);
        let pred = traj(&[[1.1, 0.0], [2.0, 0.2]]);
        assert!((r_traj(&pred, &gt, &cfg).unwrap() - 0.975).abs() < 1e-15);
        let far = traj(&[[100.0, 0.0], [200.0, 0.0]]);
        let clipped = RewardConfig {
            clip_traj: true,
            ..cfg.clone()
        };
        assert_eq!(r_traj(&far, &gt, &clipped).unwrap(), 0.0);
        assert!(r_traj(&far, &gt, &cfg).unwrap() < 0.0);
        assert!(r_traj(&far, &traj(&[[0.0, 0.0]]), &cfg).is_err());
    }

    #[test]
    fn steer_and_acc_examples() {
        let cfg = RewardConfig::default();
        let line = traj(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
        assert_eq!(r_steer(&line, &cfg).unwrap(), 1.0);
        assert_eq!(acc_seq(&line, &cfg).unwrap(), vec![0.0, 0.0]);
        assert_eq!(r_acc(&line, &cfg).unwrap(), 1.0);
        let bends = traj(&[[0.0, 0.0], [2.0, 1.0], [3.0, 2.0]]);
        assert_eq!(r_steer(&bends, &cfg).unwrap(), 0.5);
        let edge = traj(&[[0.0, 0.0], [1.0, 0.84]]);
        assert_eq!(r_steer(&edge, &cfg).unwrap(), 0.0);
        let jump = traj(&[[0.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
        assert_eq!(r_steer(&jump, &cfg).unwrap(), 0.5);
        assert!(r_steer(&traj(&[[0.0, 0.0]]), &cfg).is_err());

        let spaced = traj(&[[0.0, 0.0], [0.5, 0.0], [4.0, 0.0], [7.5, 0.0]]);
        assert_eq!(acc_seq(&spaced, &cfg).unwrap(), vec![12.0, 0.0]);
        assert_eq!(r_acc(&spaced, &cfg).unwrap(), 0.5);
        let six = traj(&[[0.0, 0.0], [1.0, 0.0], [3.5, 0.0]]);
        assert_eq!(acc_seq(&six, &cfg).unwrap(), vec![6.0]);
        assert_eq!(r_acc(&six, &cfg).unwrap(), 0.0);
        assert!(acc_seq(&traj(&[[0.0, 0.0], [1.0, 0.0]]), &cfg).is_err());
    }

    #[test]
    fn total_examples() {
        let gt = traj(&[[3.5, 0.0], [7.0, 0.0], [10.5, 0.0]]);
        let cfg = RewardConfig {
            theta: [0.6, 0.2, 0.2],
            ..Default::default()
        };
        assert!((r_total(&gt, &gt, &cfg).unwrap() - 1.0).abs() < 1e-15);
        let pred = traj(&[[3.0, 0.5], [7.0, 3.0], [10.5, 0.0]]);
        let only = RewardConfig {
            theta: [1.0, 0.0, 0.0],
            ..Default::default()
        };
        assert_eq!(r_total(&pred, &gt, &only).unwrap(), r_traj(&pred, &gt, &only).unwrap());
        let zero = RewardConfig {
            theta: [0.0; 3],
            ..Default::default()
        };
        assert!(zero.validate().is_err());
        assert!(RewardConfig::default().validate().is_ok());
    }
}
