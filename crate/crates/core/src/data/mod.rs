//! Unified clip schema, source adapters, corpus statistics, prompt rendering,
//! and the synthetic maneuver generator.

mod adapters;
mod clip;
mod prompt;
mod stats;
mod synth;

pub use adapters::{ingest_adapter, IngestOptions};
pub use clip::{
    read_clip_json, read_corpus, write_clip_json, write_corpus, EgoState, SourceTag, UnifiedClip, COORD_BOUND,
    COORD_DIMS, STEP_DT,
};
pub use prompt::{fmt2, render_prompt, render_state, SYSTEM_LINE};
pub use stats::{compute_trajectory_stats, TrajectoryStats};
pub use synth::{synth_scenarios, synth_scenarios_with, Maneuver, ManeuverKind, SynthOptions};

use rand::seq::SliceRandom;

use crate::error::{contract_err, Result};
use crate::rng;

/// Deterministic shuffle split; the validation share is rounded and kept
/// within `[1, n-1]` so neither side is empty.
pub fn split(clips: &[UnifiedClip], val_fraction: f64, seed: u64) -> Result<(Vec<UnifiedClip>, Vec<UnifiedClip>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(contract_err!("val_fraction must be in (0, 1), got {val_fraction}"));
    }
    if clips.len() < 2 {
        return Err(contract_err!("split needs at least 2 clips, got {}", clips.len()));
    }
    let n = clips.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, "split"));
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| clips[i].clone()).collect::<Vec<_>>()
    };
    Ok((pick(train_idx), pick(val_idx)))
}
