//! Analytic maneuver generator for desk-scale corpora.
//!
//! Every clip follows a closed-form speed and heading profile, so positions,
//! velocities and accelerations are exact samples of one continuous motion.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::clip::{EgoState, SourceTag, UnifiedClip, STEP_DT};
use crate::error::{contract_err, Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManeuverKind {
    Straight,
    LeftTurn,
    RightTurn,
    Stop,
    Accelerate,
}

impl ManeuverKind {
    pub const ALL: [ManeuverKind; 5] = [
        ManeuverKind::Straight,
        ManeuverKind::LeftTurn,
        ManeuverKind::RightTurn,
        ManeuverKind::Stop,
        ManeuverKind::Accelerate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ManeuverKind::Straight => "straight",
            ManeuverKind::LeftTurn => "left-turn",
            ManeuverKind::RightTurn => "right-turn",
            ManeuverKind::Stop => "stop",
            ManeuverKind::Accelerate => "accelerate",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ManeuverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ManeuverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ManeuverKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.replace('_', "-"))
            .ok_or_else(|| contract_err!("unknown maneuver kind {s:?}"))
    }
}

/// One analytic motion: speed `v0 + accel·t` (held at zero once a
/// decelerating profile stops) and heading `yaw_rate·t`, both relative to
/// the ego pose at `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Maneuver {
    pub kind: ManeuverKind,
    pub v0: f64,
    pub accel: f64,
    pub yaw_rate: f64,
}

impl Maneuver {
    pub fn straight(v0: f64) -> Self {
        Maneuver {
            kind: ManeuverKind::Straight,
            v0,
            accel: 0.0,
            yaw_rate: 0.0,
        }
    }

    /// Draws parameters for `kind` inside ranges that keep every clip within
    /// the steering and acceleration limits.
    pub fn sample(kind: ManeuverKind, rng: &mut rng::Rng) -> Self {
        let (v0, accel, yaw_rate) = match kind {
            ManeuverKind::Straight => (rng.random_range(3.0..15.0), 0.0, 0.0),
            ManeuverKind::LeftTurn => (rng.random_range(4.0..14.0), 0.0, rng.random_range(0.04..0.12)),
            ManeuverKind::RightTurn => (rng.random_range(4.0..14.0), 0.0, -rng.random_range(0.04..0.12)),
            ManeuverKind::Stop => {
                let v0 = rng.random_range(4.0..12.0);
                (v0, -v0 / rng.random_range(2.5..4.5), 0.0)
            }
            ManeuverKind::Accelerate => {
                let a: f64 = rng.random_range(0.5..2.0);
                (rng.random_range((3.0 * a + 1.0).max(5.0)..12.0), a, 0.0)
            }
        };
        Maneuver {
            kind,
            v0,
            accel,
            yaw_rate,
        }
    }

    fn stop_time(&self) -> Option<f64> {
        (self.accel < 0.0).then(|| self.v0 / -self.accel)
    }

    pub fn speed(&self, t: f64) -> f64 {
        match self.stop_time() {
            Some(ts) if t >= ts => 0.0,
            _ => self.v0 + self.accel * t,
        }
    }

    pub fn heading(&self, t: f64) -> f64 {
        self.yaw_rate * t
    }

    /// Tangential acceleration along the path.
    fn along_track_accel(&self, t: f64) -> f64 {
        match self.stop_time() {
            Some(ts) if t >= ts => 0.0,
            _ => self.accel,
        }
    }

    pub fn position(&self, t: f64) -> [f64; 2] {
        if self.yaw_rate == 0.0 {
            let tc = self.stop_time().map_or(t, |ts| t.min(ts));
            return [self.v0 * tc + 0.5 * self.accel * tc * tc, 0.0];
        }
        // constant-speed arc; turning profiles carry no tangential accel
        let w = self.yaw_rate;
        let r = self.v0 / w;
        [r * (w * t).sin(), r * (1.0 - (w * t).cos())]
    }

    pub fn state(&self, t: f64) -> EgoState {
        let s = self.speed(t);
        let (sin, cos) = self.heading(t).sin_cos();
        let a = self.along_track_accel(t);
        let lat = s * self.yaw_rate;
        let p = self.position(t);
        EgoState {
            t_offset: t,
            position: if t == 0.0 { [0.0, 0.0] } else { p },
            velocity: [s * cos, s * sin],
            acceleration: [a * cos - lat * sin, a * sin + lat * cos],
        }
    }

    pub fn clip(&self, clip_id: String, history_len: usize, horizon: usize) -> UnifiedClip {
        let history = (0..history_len)
            .map(|k| {
                let back = (history_len - 1 - k) as f64;
                self.state(if back == 0.0 { 0.0 } else { -back * STEP_DT })
            })
            .collect();
        let actions = (1..=horizon).map(|j| self.position(j as f64 * STEP_DT)).collect();
        UnifiedClip {
            clip_id,
            source: SourceTag::Synthetic,
            history,
            actions,
            reasoning_text: Some(format!(
                "The ego vehicle travels at {:.1} m/s and the maneuver is {}. \
The planned trajectory keeps steering and acceleration within physical limits.",
                self.v0, self.kind
            )),
            camera_refs: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub history_len: usize,
    pub horizon: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            history_len: 7,
            horizon: 10,
        }
    }
}

/// `count` clips with the default 7-state history and 10-step horizon.
pub fn synth_scenarios(count: usize, kinds: &[ManeuverKind], seed: u64) -> Result<Vec<UnifiedClip>> {
    synth_scenarios_with(count, kinds, seed, &SynthOptions::default())
}

pub fn synth_scenarios_with(
    count: usize,
    kinds: &[ManeuverKind],
    seed: u64,
    opts: &SynthOptions,
) -> Result<Vec<UnifiedClip>> {
    if kinds.is_empty() {
        return Err(contract_err!("synth_scenarios needs at least one maneuver kind"));
    }
    if count == 0 {
        return Err(contract_err!("synth_scenarios count must be >= 1"));
    }
    if opts.history_len == 0 || opts.horizon == 0 {
        return Err(contract_err!("history_len and horizon must be >= 1"));
    }
    let mut kinds = kinds.to_vec();
    kinds.sort();
    kinds.dedup();
    let clips = (0..count)
        .map(|i| {
            // each clip has its own stream so prefixes are stable across counts
            let mut r = rng::indexed_substream(seed, "synth", i as u64);
            let kind = kinds[r.random_range(0..kinds.len())];
            Maneuver::sample(kind, &mut r).clip(format!("synthetic_{seed}_{i:05}"), opts.history_len, opts.horizon)
        })
        .collect();
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_seven_mps() {
        let clip = Maneuver::straight(7.0).clip("s".into(), 7, 10);
        for (j, w) in clip.actions.iter().enumerate() {
            assert_eq!(*w, [3.5 * (j + 1) as f64, 0.0]);
        }
        assert_eq!(clip.history[0].position, [-21.0, 0.0]);
        clip.validate(10).unwrap();
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ManeuverKind::ALL {
            assert_eq!(k.as_str().parse::<ManeuverKind>().unwrap(), k);
        }
        assert!("reverse".parse::<ManeuverKind>().is_err());
    }

    #[test]
    fn empty_kinds_rejected() {
        assert!(matches!(synth_scenarios(3, &[], 1), Err(Error::Contract(_))));
    }
}
