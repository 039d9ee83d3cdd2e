use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::numerics::Tensor;

/// Sampling interval of histories and futures, seconds.
pub const STEP_DT: f64 = 0.5;
/// Coordinates beyond this magnitude (meters) are treated as corrupt.
pub const COORD_BOUND: f64 = 1000.0;
/// Coordinate dimensions of a waypoint (x forward, y left).
pub const COORD_DIMS: usize = 2;

/// One ego state in the ego frame at `t = 0`: +x forward, +y left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub t_offset: f64,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub acceleration: [f64; 2],
}

impl EgoState {
    pub fn values(&self) -> [f64; 7] {
        [
            self.t_offset,
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
            self.acceleration[0],
            self.acceleration[1],
        ]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        EgoState {
            t_offset: v[0],
            position: [v[1], v[2]],
            velocity: [v[3], v[4]],
            acceleration: [v[5], v[6]],
        }
    }

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Navsim,
    Nuscenes,
    Waymo,
    Argoverse2,
    Kitti,
    Mapillary,
    Once,
    Idd,
    /// Generated by [`synth_scenarios`](super::synth_scenarios).
    Synthetic,
}

impl SourceTag {
    /// The eight real-dataset tags that have ingestion adapters.
    pub const DATASETS: [SourceTag; 8] = [
        SourceTag::Navsim,
        SourceTag::Nuscenes,
        SourceTag::Waymo,
        SourceTag::Argoverse2,
        SourceTag::Kitti,
        SourceTag::Mapillary,
        SourceTag::Once,
        SourceTag::Idd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Navsim => "navsim",
            SourceTag::Nuscenes => "nuscenes",
            SourceTag::Waymo => "waymo",
            SourceTag::Argoverse2 => "argoverse2",
            SourceTag::Kitti => "kitti",
            SourceTag::Mapillary => "mapillary",
            SourceTag::Once => "once",
            SourceTag::Idd => "idd",
            SourceTag::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tag = match s.to_ascii_lowercase().as_str() {
            "navsim" => SourceTag::Navsim,
            "nuscenes" => SourceTag::Nuscenes,
            "waymo" => SourceTag::Waymo,
            "argoverse2" | "argoverse" | "av2" => SourceTag::Argoverse2,
            "kitti" => SourceTag::Kitti,
            "mapillary" => SourceTag::Mapillary,
            "once" => SourceTag::Once,
            "idd" => SourceTag::Idd,
            "synthetic" => SourceTag::Synthetic,
            other => return Err(contract_err!("unknown source tag {other:?}")),
        };
        Ok(tag)
    }
}

/// One driving sample in the unified format.
///
/// `actions` holds `H` future waypoints in meters, ego frame, one row per
/// 0.5 s step. With the origin-row convention the first row is `(0, 0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnifiedClip {
    pub clip_id: String,
    pub source: SourceTag,
    pub history: Vec<EgoState>,
    pub actions: Vec<[f64; 2]>,
    #[serde(default)]
    pub reasoning_text: Option<String>,
    #[serde(default)]
    pub camera_refs: Option<Vec<String>>,
}

impl UnifiedClip {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// `H×2` tensor of the future waypoints.
    pub fn actions_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.actions.len(), COORD_DIMS],
            self.actions.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn current_state(&self) -> &EgoState {
        self.history.last().expect("validated clip has history")
    }

    /// Rule-based checks shared by every adapter and the synthetic generator.
    pub fn validate(&self, horizon: usize) -> std::result::Result<(), String> {
        if self.history.is_empty() {
            return Err("empty history".into());
        }
        if self.actions.len() != horizon {
            return Err(format!(
                "horizon {} does not match configured {horizon}",
                self.actions.len()
            ));
        }
        for (i, s) in self.history.iter().enumerate() {
            if s.values().iter().any(|v| !v.is_finite()) {
                return Err(format!("non-finite value in history state {i}"));
            }
            if s.t_offset > 1e-9 {
                return Err(format!("history state {i} has positive t_offset {}", s.t_offset));
            }
            let steps = s.t_offset / STEP_DT;
            if (steps - steps.round()).abs() > 1e-6 {
                return Err(format!("t_offset {} is off the 0.5 s grid", s.t_offset));
            }
            if s.position.iter().any(|c| c.abs() >= COORD_BOUND) {
                return Err(format!("history state {i} position out of bounds"));
            }
        }
        if self.history.windows(2).any(|w| w[1].t_offset <= w[0].t_offset) {
            return Err("history is not strictly time-ordered".into());
        }
        let last = self.current_state();
        if last.t_offset.abs() > 1e-9 {
            return Err(format!("latest history state is at t={} not t=0", last.t_offset));
        }
        if last.position[0].abs() > 1e-6 || last.position[1].abs() > 1e-6 {
            return Err("state at t=0 is not at the ego origin".into());
        }
        for (i, w) in self.actions.iter().enumerate() {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(format!("non-finite waypoint {i}"));
            }
            if w.iter().any(|c| c.abs() >= COORD_BOUND) {
                return Err(format!("waypoint {i} out of bounds"));
            }
        }
        Ok(())
    }
}

pub fn write_clip_json(path: &Path, clip: &UnifiedClip) -> Result<()> {
    let text = serde_json::to_string_pretty(clip).map_err(|e| Error::parse("clip json", e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_clip_json(path: &Path) -> Result<UnifiedClip> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

/// Writes one clip per line.
pub fn write_corpus(path: &Path, clips: &[UnifiedClip]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for clip in clips {
        let line = serde_json::to_string(clip).map_err(|e| Error::parse("clip json", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<UnifiedClip>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut clips = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let clip = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), n + 1), e))?;
        clips.push(clip);
    }
    Ok(clips)
}
