use std::path::PathBuf;

use proptest::prelude::*;
use rvla_core::data::{
    compute_trajectory_stats, ingest_adapter, read_clip_json, read_corpus, render_prompt, split, synth_scenarios,
    write_clip_json, write_corpus, EgoState, IngestOptions, Maneuver, ManeuverKind, SourceTag, UnifiedClip,
};
use rvla_core::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

const FIXTURES: [(SourceTag, &str); 8] = [
    (SourceTag::Navsim, "navsim.jsonl"),
    (SourceTag::Nuscenes, "nuscenes.jsonl"),
    (SourceTag::Waymo, "waymo.jsonl"),
    (SourceTag::Argoverse2, "argoverse2.csv"),
    (SourceTag::Kitti, "kitti.txt"),
    (SourceTag::Mapillary, "mapillary.jsonl"),
    (SourceTag::Once, "once.jsonl"),
    (SourceTag::Idd, "idd.csv"),
];

#[test]
fn every_adapter_keeps_three_and_drops_the_nan_record() {
    for (source, file) in FIXTURES {
        let clips = ingest_adapter(source, &fixture(file), &IngestOptions::default()).unwrap();
        let ids: Vec<&str> = clips.iter().map(|c| c.clip_id.as_str()).collect();
        assert_eq!(clips.len(), 3, "{source}: {ids:?}");
        assert!(ids.iter().all(|id| !id.ends_with("bad")), "{source}");
        for c in &clips {
            assert_eq!(c.source, source);
            c.validate(10).unwrap();
            assert_eq!(c.history.len(), 7);
        }
        // all schemas carry the same motions
        assert_eq!(clips[0].actions[0], [3.5, 0.0], "{source}");
    }
}

#[test]
fn adapters_agree_across_sources() {
    let base = ingest_adapter(SourceTag::Kitti, &fixture("kitti.txt"), &IngestOptions::default()).unwrap();
    for (source, file) in FIXTURES {
        let clips = ingest_adapter(source, &fixture(file), &IngestOptions::default()).unwrap();
        for (a, b) in clips.iter().zip(&base) {
            assert_eq!(a.actions, b.actions, "{source}");
            assert_eq!(a.history, b.history, "{source}");
        }
    }
}

#[test]
fn stats_examples() {
    let clip = |x: f64| {
        let mut c = Maneuver::straight(7.0).clip(format!("c{x}"), 3, 2);
        c.actions[0][0] = x;
        c
    };
    let s = compute_trajectory_stats(&[clip(0.0), clip(2.0)]).unwrap();
    assert_eq!(s.mean.get2(0, 0), 1.0);
    assert_eq!(s.var.get2(0, 0), 1.0);
    assert_eq!(s.var.get2(1, 0), 0.0);
    assert_eq!(s.count, 2);

    let same: Vec<UnifiedClip> = (0..3).map(|_| clip(0.1)).collect();
    let s = compute_trajectory_stats(&same).unwrap();
    assert_eq!(s.mean.data(), same[0].actions_tensor().data());
    assert!(s.var.data().iter().all(|&v| v == 0.0));

    assert!(matches!(compute_trajectory_stats(&[]), Err(Error::Contract(_))));
    let short = Maneuver::straight(7.0).clip("short".into(), 3, 3);
    assert!(matches!(compute_trajectory_stats(&[clip(0.0), short]), Err(Error::Shape(_))));
}

/// Textbook two-pass estimate written independently of the library.
fn oracle_stats(clips: &[UnifiedClip]) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<Vec<f64>> = clips
        .iter()
        .map(|c| c.actions.iter().flat_map(|w| [w[0], w[1]]).collect())
        .collect();
    let n = rows.len() as f64;
    let width = rows[0].len();
    let mut mean = Vec::new();
    let mut var = Vec::new();
    for j in 0..width {
        let m: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let v: f64 = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
        mean.push(m);
        var.push(v);
    }
    (mean, var)
}

#[test]
fn stats_match_two_pass_oracle() {
    for (count, seed) in [(1usize, 3u64), (17, 4), (250, 5), (1000, 6)] {
        let clips = synth_scenarios(count, &ManeuverKind::ALL, seed).unwrap();
        let s = compute_trajectory_stats(&clips).unwrap();
        let (m, v) = oracle_stats(&clips);
        for j in 0..m.len() {
            assert!((s.mean.data()[j] - m[j]).abs() < 1e-12, "mean slot {j}");
            assert!((s.var.data()[j] - v[j]).abs() < 1e-12, "var slot {j}: {} vs {}", s.var.data()[j], v[j]);
        }
    }
}

#[test]
fn prompt_template() {
    let clip = Maneuver::straight(7.0).clip("p".into(), 7, 10);
    let p = render_prompt(&clip);
    assert!(p.starts_with("You are a helpful assistant\n"));
    assert_eq!(p.matches("(t-").count(), 7);
    assert!(p.contains("(t-0.0s) [0.0, 0.0]"));
    assert!(p.contains("(t-3.0s) [-21.0, 0.0], Acceleration: X 0.0, Y 0.0 m/s^2, Velocity: X 7.0, Y 0.0 m/s"));
    assert!(p.contains("between the <think> </think> tags"));
    assert!(p.contains("<answer> </answer>"));
    assert!(p.contains("over the next 10 timesteps"));
    assert!(p.contains("for the next 5 seconds"));
}

#[test]
fn synthetic_examples() {
    let a = synth_scenarios(40, &ManeuverKind::ALL, 9).unwrap();
    let b = synth_scenarios(40, &ManeuverKind::ALL, 9).unwrap();
    assert_eq!(a, b);
    let c = synth_scenarios(40, &ManeuverKind::ALL, 10).unwrap();
    assert_ne!(a, c);

    let stops = synth_scenarios(50, &[ManeuverKind::Stop], 2).unwrap();
    for clip in &stops {
        let mut prev = [0.0, 0.0];
        let steps: Vec<f64> = clip
            .actions
            .iter()
            .map(|w| {
                let d = (w[0] - prev[0]).hypot(w[1] - prev[1]);
                prev = *w;
                d
            })
            .collect();
        assert!(steps.windows(2).all(|s| s[1] <= s[0]), "{steps:?}");
        assert!(steps.windows(2).take(4).all(|s| s[1] < s[0]), "{steps:?}");
        assert!(*steps.last().unwrap() < 1e-9);
    }
}

/// Central differences of positions at the 0.5 s grid against the stored
/// velocities, and of speed against the along-track acceleration.
#[test]
fn synthetic_clips_are_kinematically_consistent() {
    let clips = synth_scenarios(300, &ManeuverKind::ALL, 21).unwrap();
    for clip in &clips {
        let h = &clip.history;
        for k in 1..h.len() - 1 {
            for d in 0..2 {
                let v_fd = (h[k + 1].position[d] - h[k - 1].position[d]) / 1.0;
                assert!((v_fd - h[k].velocity[d]).abs() < 0.02, "{} state {k}", clip.clip_id);
                let a_fd = (h[k + 1].velocity[d] - h[k - 1].velocity[d]) / 1.0;
                assert!((a_fd - h[k].acceleration[d]).abs() < 0.02, "{} state {k}", clip.clip_id);
            }
        }
        // future continues the same motion: first waypoint from t=0 velocity
        let s0 = clip.current_state();
        let pred = [
            s0.velocity[0] * 0.5 + 0.125 * s0.acceleration[0],
            s0.velocity[1] * 0.5 + 0.125 * s0.acceleration[1],
        ];
        for d in 0..2 {
            assert!((pred[d] - clip.actions[0][d]).abs() < 0.01, "{}", clip.clip_id);
        }
    }
}

#[test]
fn synthetic_clips_pass_ingest_validation() {
    for clip in synth_scenarios(500, &ManeuverKind::ALL, 77).unwrap() {
        clip.validate(10).unwrap();
    }
}

#[test]
fn split_examples() {
    let clips = synth_scenarios(10, &ManeuverKind::ALL, 1).unwrap();
    let (train, val) = split(&clips, 0.2, 5).unwrap();
    assert_eq!((train.len(), val.len()), (8, 2));
    assert_eq!(split(&clips, 0.2, 5).unwrap(), (train.clone(), val.clone()));
    let mut ids: Vec<String> = train.iter().chain(&val).map(|c| c.clip_id.clone()).collect();
    ids.sort();
    let mut all: Vec<String> = clips.iter().map(|c| c.clip_id.clone()).collect();
    all.sort();
    assert_eq!(ids, all);
    assert!(matches!(split(&clips, 1.0, 5), Err(Error::Contract(_))));
    assert!(matches!(split(&clips, 0.0, 5), Err(Error::Contract(_))));
    assert!(matches!(split(&clips[..1], 0.5, 5), Err(Error::Contract(_))));
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-999.0..999.0f64, Just(0.0), Just(-0.0), Just(1e-300), Just(123.456789012345678)]
}

fn arb_clip() -> impl Strategy<Value = UnifiedClip> {
    let state = (prop::array::uniform7(finite())).prop_map(EgoState::from_values);
    (
        "[a-z0-9_]{1,12}",
        prop::sample::select(SourceTag::DATASETS.to_vec()),
        prop::collection::vec(state, 1..8),
        prop::collection::vec(prop::array::uniform2(finite()), 1..12),
        prop::option::of(".{0,40}"),
        prop::option::of(prop::collection::vec("[a-z/._]{1,20}", 0..3)),
    )
        .prop_map(|(clip_id, source, history, actions, reasoning_text, camera_refs)| UnifiedClip {
            clip_id,
            source,
            history,
            actions,
            reasoning_text,
            camera_refs,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn clip_json_round_trips_exactly(clip in arb_clip()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.json");
        write_clip_json(&path, &clip).unwrap();
        let back = read_clip_json(&path).unwrap();
        prop_assert_eq!(&back, &clip);
        for (a, b) in back.history.iter().zip(&clip.history) {
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let corpus = dir.path().join("corpus.jsonl");
        write_corpus(&corpus, std::slice::from_ref(&clip)).unwrap();
        prop_assert_eq!(read_corpus(&corpus).unwrap(), vec![clip]);
    }
}
