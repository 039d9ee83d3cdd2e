use serde::{Deserialize, Serialize};

use super::clip::{UnifiedClip, COORD_DIMS};
use crate::error::{contract_err, shape_err, Result};
use crate::numerics::Tensor;

/// Per-(step, coordinate) mean and population variance of future waypoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub count: usize,
}

impl TrajectoryStats {
    pub fn horizon(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn coord_dims(&self) -> usize {
        self.mean.shape()[1]
    }
}

pub fn compute_trajectory_stats(clips: &[UnifiedClip]) -> Result<TrajectoryStats> {
    let first = clips
        .first()
        .ok_or_else(|| contract_err!("trajectory stats need at least one clip"))?;
    let h = first.horizon();
    let n = h * COORD_DIMS;
    for clip in clips {
        if clip.horizon() != h {
            return Err(shape_err!(
                "clip {} has horizon {}, expected {h}",
                clip.clip_id,
                clip.horizon()
            ));
        }
    }
    let count = clips.len();
    let inv = 1.0 / count as f64;
    // shifted by the first clip so identical corpora reproduce it exactly
    let origin: Vec<f64> = first.actions.iter().flatten().copied().collect();
    let mut shift = vec![0.0; n];
    for clip in clips {
        for ((s, &o), &x) in shift.iter_mut().zip(&origin).zip(clip.actions.iter().flatten()) {
            *s += x - o;
        }
    }
    let mean: Vec<f64> = origin.iter().zip(&shift).map(|(&o, &s)| o + s * inv).collect();
    // second pass over deviations; exact zero for constant slots
    let mut var = vec![0.0; n];
    for clip in clips {
        for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(clip.actions.iter().flatten()) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v *= inv);
    Ok(TrajectoryStats {
        mean: Tensor::from_parts(vec![h, COORD_DIMS], mean),
        var: Tensor::from_parts(vec![h, COORD_DIMS], var),
        count,
    })
}
