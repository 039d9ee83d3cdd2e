use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rvla_core::data::{compute_trajectory_stats, read_corpus, synth_scenarios_with, SynthOptions, TrajectoryStats};
use rvla_core::data::{write_corpus, ManeuverKind};

fn rvla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rvla"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_flag() {
    let top = String::from_utf8(rvla(&["--help"]).stdout).unwrap();
    for sub in ["ingest", "stats", "gen-synth", "train", "eval", "plot"] {
        assert!(top.contains(sub), "{sub} missing from top-level help");
    }
    let expect: [(&str, &[&str]); 6] = [
        ("ingest", &["--source", "--input", "--output", "--horizon", "--include-origin-row"]),
        ("stats", &["--corpus", "--output"]),
        ("gen-synth", &["--count", "--kinds", "--horizon", "--history-len", "--output"]),
        (
            "train",
            &[
                "--stage", "--corpus", "--d-model", "--sft-lr", "--sft-epochs", "--rl-lr", "--rl-epochs", "--group-size",
                "--kl-beta",
            ],
        ),
        ("eval", &["--corpus", "--checkpoint", "--mode", "--scenarios", "--replan-hz"]),
        ("plot", &["--corpus", "--checkpoint", "--clips"]),
    ];
    for (sub, flags) in expect {
        let help = String::from_utf8(rvla(&[sub, "--help"]).stdout).unwrap();
        for f in flags.iter().chain(&["--config", "--seed", "--threads", "--out-dir"]) {
            assert!(help.contains(f), "{sub} --help lacks {f}");
        }
    }
    let train = String::from_utf8(rvla(&["train", "--help"]).stdout).unwrap();
    assert!(train.contains("[default: 1]"), "threads default not shown");
}

#[test]
fn ingest_fixture_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("kitti.jsonl");
    let input = fixture("kitti.txt");
    let args = ["ingest", "--source", "kitti", "--input", s(&input), "--output", s(&out)];
    let o = rvla(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_corpus(&out).unwrap().len(), 3);
    let first = std::fs::read(&out).unwrap();
    assert_eq!(code(&rvla(&args)), 0);
    assert_eq!(std::fs::read(&out).unwrap(), first);
}

#[test]
fn input_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl");
    let missing = rvla(&["ingest", "--source", "kitti", "--input", "/no/such/file", "--output", s(&out)]);
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("/no/such/file"));

    let wrong_schema = rvla(&["ingest", "--source", "kitti", "--input", s(&fixture("navsim.jsonl")), "--output", s(&out)]);
    assert_eq!(code(&wrong_schema), 2, "zero valid clips");

    let unknown = rvla(&["ingest", "--source", "lidarnet", "--input", s(&fixture("kitti.txt")), "--output", s(&out)]);
    assert_eq!(code(&unknown), 2);
}

#[test]
fn config_violations_are_listed_with_paths_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"val_fraction": 1.5, "model": {"d_model": 30, "heads": 4},
            "train": {"sft": {"lr": -1}, "rl": {"group_size": 1}}, "corpus": "/no/corpus.jsonl"}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = rvla(&["train", "-c", s(&cfg), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for path in ["val_fraction:", "model.d_model", "train.sft.lr:", "train.rl.group_size:", "corpus:"] {
        assert!(err.contains(path), "missing {path} in {err}");
    }
    assert!(!out.exists(), "no work may start on an invalid config");

    std::fs::write(&cfg, r#"{"train": {"rl": {"kl_bta": 0.1}}}"#).unwrap();
    let o = rvla(&["train", "-c", s(&cfg), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.rl.kl_bta"), "{}", stderr(&o));

    let o = rvla(&["train", "-c", s(&smoke_config()), "--out-dir", s(&out), "--threads", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("threads:"));
}

#[test]
fn rl_stage_without_sft_checkpoint_is_an_ordering_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rvla(&["train", "-c", s(&smoke_config()), "--out-dir", s(dir.path()), "--stage", "rl"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("post_sft.ckpt"));
}

#[test]
fn exploding_learning_rate_is_a_numeric_abort() {
    let dir = tempfile::tempdir().unwrap();
    let o = rvla(&[
        "train",
        "-c",
        s(&smoke_config()),
        "--out-dir",
        s(dir.path()),
        "--stage",
        "sft",
        "--sft-lr",
        "1e300",
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("batch"));
}

#[test]
fn staged_training_matches_metric_counts_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = smoke_config();
    let base = ["-c", s(&cfg), "--out-dir", s(out)];
    let o = rvla(&[&["train", "--stage", "sft"], &base[..]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // 48 training clips, 8 per step, one epoch
    let lines = |f: &str| std::fs::read_to_string(out.join(f)).unwrap().lines().count();
    assert_eq!(lines("sft_metrics.jsonl"), 6);
    assert_eq!(lines("sft_validation.jsonl"), 2);
    assert!(!out.join("post_rl.ckpt").exists());

    let o = rvla(&[&["train", "--stage", "rl", "--rl-epochs", "0"], &base[..]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let same = std::fs::read(out.join("post_rl.ckpt")).unwrap() == std::fs::read(out.join("post_sft.ckpt")).unwrap();
    assert!(same, "zero RL epochs keep the SFT weights");

    let o = rvla(&[&["eval", "--checkpoint", s(&out.join("post_sft.ckpt"))], &base[..]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("eval/open_loop.csv")).unwrap();
    assert!(table.starts_with("model,dataset,clips,l2_1s,l2_2s,l2_3s,l2_avg,cr_1s"));
    let decodes = std::fs::read_to_string(out.join("eval/decode_counts.csv")).unwrap();
    assert!(decodes.lines().skip(1).all(|l| l.ends_with(",1")));
    let closed = std::fs::read_to_string(out.join("eval/closed_loop.csv")).unwrap();
    for kind in ["stationary", "frontal", "side"] {
        assert!(closed.contains(kind));
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval/closed_loop.json")).unwrap()).unwrap();
    let model = &report["policies"][0];
    assert_eq!(model["decode_calls"].as_u64().unwrap(), model["policy_calls"].as_u64().unwrap());
    assert!(out.join("eval/plots/closed_frontal_0.svg").is_file());

    let o = rvla(&[&["plot", "--clips", "2"], &base[..]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svgs = std::fs::read_dir(out.join("plots")).unwrap().count();
    assert_eq!(svgs, 2);
}

#[test]
fn stats_output_is_the_library_computation() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let o = rvla(&["gen-synth", "--count", "40", "--kinds", "straight,stop", "--seed", "5", "--output", s(&corpus)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let clips = read_corpus(&corpus).unwrap();
    let expected = synth_scenarios_with(40, &[ManeuverKind::Straight, ManeuverKind::Stop], 5, &SynthOptions::default()).unwrap();
    assert_eq!(clips, expected);

    let out = dir.path().join("stats.json");
    let o = rvla(&["stats", "--corpus", s(&corpus), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let written = std::fs::read_to_string(&out).unwrap();
    let lib = serde_json::to_string_pretty(&compute_trajectory_stats(&clips).unwrap()).unwrap();
    assert_eq!(written, lib);
    assert!(String::from_utf8_lossy(&o.stdout).contains("synthetic"));
}

#[test]
fn degenerate_corpus_prints_zero_variance() {
    let dir = tempfile::tempdir().unwrap();
    let one = synth_scenarios_with(1, &[ManeuverKind::Straight], 1, &SynthOptions::default()).unwrap();
    let mut twins = vec![one[0].clone(), one[0].clone()];
    twins[1].clip_id.push_str("_copy");
    let corpus = dir.path().join("twins.jsonl");
    write_corpus(&corpus, &twins).unwrap();
    let out = dir.path().join("stats.json");
    let o = rvla(&["stats", "--corpus", s(&corpus), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stats: TrajectoryStats = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(stats.var.data().iter().all(|v| *v == 0.0));
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    let rows: Vec<&str> = stdout.lines().skip_while(|l| !l.contains("var_x")).skip(1).take_while(|l| !l.starts_with("wrote")).collect();
    assert_eq!(rows.len(), 10);
    for r in rows {
        let cols: Vec<&str> = r.split_whitespace().collect();
        assert_eq!(&cols[3..], &["0.0000", "0.0000"], "{r}");
    }
}
