use super::clip::{UnifiedClip, STEP_DT};

pub const SYSTEM_LINE: &str = "You are a helpful assistant";

const TASK_HEAD: &str = "You are an autonomous driving agent. You have access to multi-view camera images of a vehicle: \
(1) front view (which you should focus on with the most attention) <image>, (2) front right view <image>, \
and (3) front left view <image>. Your task is to do your best to predict future waypoints for the vehicle";

const REASONING_INSTRUCTION: &str = "Please think deeply. Engage in an internal dialogue other natural language \
thought expressions It's a reasoning process. Provide your reasoning between the <think> </think> tags, \
and then give your answer between the <answer> </answer> tags.";

/// Two-decimal rounding printed in shortest round-trip form, so `7.0`
/// stays `7.0` and `-0.114` becomes `-0.11`.
pub fn fmt2(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    // normalize -0.0
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r:?}")
}

/// The ego-history segment for one state.
pub fn render_state(clip: &UnifiedClip, i: usize) -> String {
    let s = &clip.history[i];
    format!(
        "(t-{:.1}s) [{}, {}], Acceleration: X {}, Y {} m/s^2, Velocity: X {}, Y {} m/s",
        s.t_offset.abs(),
        fmt2(s.position[0]),
        fmt2(s.position[1]),
        fmt2(s.acceleration[0]),
        fmt2(s.acceleration[1]),
        fmt2(s.velocity[0]),
        fmt2(s.velocity[1]),
    )
}

/// System line followed by the user turn text.
pub fn render_prompt(clip: &UnifiedClip) -> String {
    let horizon = clip.horizon();
    let span = clip.history.first().map_or(0.0, |s| s.t_offset.abs());
    let states: Vec<String> = (0..clip.history.len()).map(|i| render_state(clip, i)).collect();
    format!(
        "{SYSTEM_LINE}\n{TASK_HEAD} over the next {horizon} timesteps, given the vehicle's intent inferred from the images. \
Provided are the previous ego vehicle status recorded over the last {span:.1} seconds (at {STEP_DT}-second intervals). \
This includes the x and y coordinates of the ego vehicle. Positive x means forward direction while positive y means leftwards. \
The data is presented in the format [x, y]:{}\n\n{REASONING_INSTRUCTION} \
Predicted future movement details for the next {} seconds (sampled at {STEP_DT}-second intervals), \
including BEV location in x and y directions (in meters). Positive x means forward direction while positive y means leftwards. \
The output is formatted as [x, y].",
        states.join(", "),
        fmt_seconds(horizon as f64 * STEP_DT),
    )
}

fn fmt_seconds(s: f64) -> String {
    if s.fract() == 0.0 {
        format!("{}", s as i64)
    } else {
        format!("{s}")
    }
}
