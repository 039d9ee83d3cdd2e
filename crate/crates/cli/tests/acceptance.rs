//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng as _, SeedableRng};
use rvla_core::data::{compute_trajectory_stats, read_corpus, split, synth_scenarios, ManeuverKind};
use rvla_core::eval::{
    closed_loop_rollout, collision_rate, l2_at_horizons, score_scenarios, ObservationConfig, ObstacleBox,
    RolloutTrace, ScenarioKind, ScenarioSpec, ZeroMotionPolicy, EGO_HALF_EXTENTS,
};
use rvla_core::model::{init_action_queries, load_checkpoint, Model, ModelConfig};
use rvla_core::numerics::Tensor;
use rvla_core::rewards::{acc_seq, r_acc, r_steer, r_total, r_traj, RewardConfig};
use rvla_core::training::{full_model_grad_check, train_rl, Exec, TrainConfig};
use serde_json::Value;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn traj(rows: &[[f64; 2]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn gradient_check() -> Verdict {
    let clips = synth_scenarios(64, &ManeuverKind::ALL, 1).map_err(|e| e.to_string())?;
    let stats = compute_trajectory_stats(&clips).map_err(|e| e.to_string())?;
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), &stats, 1).map_err(|e| e.to_string())?;
    // Central differences of the whole-model loss are round-off bound below
    // this step; the error grows as 1/eps from here down.
    let eps = 1e-4;
    let t = Instant::now();
    let report = full_model_grad_check(&model, &clips[..2], 4, eps, 3).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    check(
        report.max_rel_error < 1e-4 && secs < 60.0,
        format!(
            "D={} eps {eps:.0e}: max rel err {:.2e} over {} coordinates in {secs:.1} s",
            cfg.d_model, report.max_rel_error, report.checked
        ),
    )
}

/// Brute-force reward evaluation written directly from the case splits.
fn oracle(p: &[[f64; 2]], g: &[[f64; 2]], c: &RewardConfig) -> [f64; 4] {
    let h = p.len();
    let mut pen = 0.0;
    let mut w = 1.0;
    for i in 0..h {
        w *= c.gamma;
        let dx = p[i][0] - g[i][0];
        let dy = p[i][1] - g[i][1];
        pen += w * (c.alpha * dx * dx + c.beta * dy * dy);
    }
    pen /= h as f64;
    let traj = if c.clip_traj {
        c.traj_reward_offset - pen.min(c.traj_reward_offset)
    } else {
        c.traj_reward_offset - pen
    };
    let mut steer_ok = 0;
    for i in 1..h {
        let dx = p[i][0] - p[i - 1][0];
        let dy = p[i][1] - p[i - 1][1];
        let ok = if dx.abs() < 1e-9 { dy.abs() < 1e-9 } else { (dy / dx).abs() < c.steer_ratio_limit };
        steer_ok += ok as usize;
    }
    let steer = steer_ok as f64 / (h - 1) as f64;
    let mut acc_ok = 0;
    for i in 2..h {
        let s1 = ((p[i - 1][0] - p[i - 2][0]).powi(2) + (p[i - 1][1] - p[i - 2][1]).powi(2)).sqrt();
        let s2 = ((p[i][0] - p[i - 1][0]).powi(2) + (p[i][1] - p[i - 1][1]).powi(2)).sqrt();
        acc_ok += (((s2 - s1) / (c.dt * c.dt)).abs() < c.acc_limit) as usize;
    }
    let acc = acc_ok as f64 / (h - 2) as f64;
    [traj, steer, acc, c.theta[0] * traj + c.theta[1] * steer + c.theta[2] * acc]
}

fn reward_oracle() -> Verdict {
    let mut rng = seeded(2024);
    let mut worst: f64 = 0.0;
    for n in 0..1000 {
        let c = RewardConfig {
            gamma: rng.random_range(0.5..=1.0),
            alpha: rng.random_range(0.0..2.0),
            beta: rng.random_range(0.0..2.0),
            clip_traj: n % 3 == 0,
            ..Default::default()
        };
        let h = rng.random_range(3..=12);
        let walk = |rng: &mut rand::rngs::StdRng| {
            let mut q = [0.0, 0.0];
            (0..h)
                .map(|_| {
                    q = [q[0] + rng.random_range(-1.0..9.0), q[1] + rng.random_range(-4.0..4.0)];
                    q
                })
                .collect::<Vec<_>>()
        };
        let p = walk(&mut rng);
        let g = walk(&mut rng);
        let want = oracle(&p, &g, &c);
        let (tp, tg) = (traj(&p), traj(&g));
        let got = [
            r_traj(&tp, &tg, &c).map_err(|e| e.to_string())?,
            r_steer(&tp, &c).map_err(|e| e.to_string())?,
            r_acc(&tp, &c).map_err(|e| e.to_string())?,
            r_total(&tp, &tg, &c).map_err(|e| e.to_string())?,
        ];
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    let c = RewardConfig::default();
    let steer_edge = r_steer(&traj(&[[0.0, 0.0], [100.0, 84.0]]), &c).map_err(|e| e.to_string())?;
    let edge = traj(&[[0.0, 0.0], [2.0, 0.0], [5.5, 0.0]]);
    let acc_edge = acc_seq(&edge, &c).map_err(|e| e.to_string())?;
    let acc_edge_score = r_acc(&edge, &c).map_err(|e| e.to_string())?;
    check(
        worst <= 1e-12 && steer_edge == 0.0 && acc_edge == vec![6.0] && acc_edge_score == 0.0,
        format!(
            "max |diff| {worst:.1e} on 1000 trajectories; ratio 0.84 scores {steer_edge}, |acc| {} scores {acc_edge_score}",
            acc_edge[0]
        ),
    )
}

fn seeded(seed: u64) -> rand::rngs::StdRng {
    rand::rngs::StdRng::seed_from_u64(seed)
}

fn trace(impact: Option<f64>) -> RolloutTrace {
    RolloutTrace {
        scenario: "t".into(),
        kind: ScenarioKind::Frontal,
        policy: "p".into(),
        times: vec![0.0],
        ego: vec![[0.0, 0.0]],
        heading: vec![0.0],
        speed: vec![0.0],
        adversary: vec![[20.0, 0.0]],
        policy_calls: 1,
        collision_time: impact.map(|_| 1.0),
        impact_speed: impact,
        reference_speed: 10.0,
        invalid: false,
    }
}

fn worked_rewards() -> Verdict {
    let flat = RewardConfig {
        gamma: 1.0,
        ..Default::default()
    };
    let e = |e: rvla_core::Error| e.to_string();
    let rt = r_traj(&traj(&[[1.1, 0.0], [2.0, 0.2]]), &traj(&[[1.0, 0.0], [2.0, 0.0]]), &flat).map_err(e)?;
    let rs = r_steer(&traj(&[[0.0, 0.0], [2.0, 1.0], [3.0, 2.0]]), &flat).map_err(e)?;
    let acc = acc_seq(&traj(&[[0.0, 0.0], [0.5, 0.0], [4.0, 0.0]]), &flat).map_err(e)?;
    let score = score_scenarios(&[trace(None), trace(Some(5.0))]).map_err(e)?.mean_score;
    check(
        (rt - 0.975).abs() < 1e-15 && rs == 0.5 && acc == vec![12.0] && score == 3.75,
        format!("r_traj {rt}, r_steer {rs}, acc {:?} m/s^2, score {score}", acc),
    )
}

fn init_statistics() -> Verdict {
    let e = |e: rvla_core::Error| e.to_string();
    let clips = synth_scenarios(500, &ManeuverKind::ALL, 4).map_err(e)?;
    let stats = compute_trajectory_stats(&clips).map_err(e)?;
    let d = 4096;
    let floor = 1e-4;
    let bank = init_action_queries(&stats, d, 11, floor).map_err(e)?;
    let rows = bank.queries.shape()[0];
    let inside = (0..rows)
        .filter(|&r| {
            let row = bank.queries.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = stats.var.data()[r].max(floor);
            (mean - stats.mean.data()[r]).abs() <= 3.0 * (var / d as f64).sqrt()
        })
        .count();

    let one = synth_scenarios(1, &[ManeuverKind::Straight], 4).map_err(e)?;
    let flat_stats = compute_trajectory_stats(&vec![one[0].clone(); 20]).map_err(e)?;
    let flat = init_action_queries(&flat_stats, d, 11, 1e-12).map_err(e)?;
    let spread = (0..rows)
        .map(|r| {
            let row = flat.queries.row(r);
            row.iter().map(|v| (v - flat_stats.mean.data()[r]).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    check(
        inside as f64 >= 0.99 * rows as f64 && spread < 1e-5,
        format!("{inside}/{rows} row means inside 3 standard errors; degenerate rows deviate at most {spread:.1e}"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn single_pass_decoding() -> Verdict {
    let e = |e: rvla_core::Error| e.to_string();
    let clips = synth_scenarios(100, &ManeuverKind::ALL, 8).map_err(e)?;
    let stats = compute_trajectory_stats(&clips).map_err(e)?;
    let model = Model::new(ModelConfig::default(), &stats, 2).map_err(e)?;
    let mut ratios = Vec::new();
    let mut parallel_calls = 0;
    let mut ar_calls = 0;
    for _ in 0..3 {
        let before = model.decode_count();
        let t = Instant::now();
        for c in &clips {
            model.predict(c).map_err(e)?;
        }
        let fast = t.elapsed();
        parallel_calls = model.decode_count() - before;
        let before = model.autoregressive_decode_count();
        let t = Instant::now();
        for c in &clips {
            model.predict_autoregressive(c).map_err(e)?;
        }
        let slow = t.elapsed();
        ar_calls = model.autoregressive_decode_count() - before;
        ratios.push(slow.as_secs_f64() / fast.as_secs_f64().max(1e-9));
    }
    let ratio = median(ratios);
    let per_clip = ar_calls as f64 / 100.0;
    check(
        parallel_calls == 100 && per_clip >= 20.0 && ratio >= 5.0,
        format!("100 clips: {parallel_calls} parallel decodes; baseline {per_clip} decodes/clip, median slowdown {ratio:.1}x"),
    )
}

fn metric_examples() -> Verdict {
    let e = |e: rvla_core::Error| e.to_string();
    let gt: Vec<[f64; 2]> = (1..=10).map(|j| [4.0 * j as f64, 0.0]).collect();
    let off: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
    let l2 = l2_at_horizons(&traj(&off), &traj(&gt), 0.5).map_err(e)?;
    let l2_ok = l2.values() == [5.0, 5.0, 5.0] && l2.avg == 5.0;

    let fast = traj(&(1..=10).map(|j| [5.0 * j as f64, 0.0]).collect::<Vec<_>>());
    let far = ObstacleBox {
        centers: vec![[200.0, 200.0]; 11],
        half_extents: [1.0, 1.0],
    };
    let mut scenes = vec![vec![far.clone()]; 4];
    scenes[1] = vec![ObstacleBox {
        centers: vec![[15.0, 0.0]; 11],
        half_extents: [0.5, 0.5],
    }];
    let cr = collision_rate(&vec![fast; 4], &scenes, 0.5, [0.01, 0.01]).map_err(e)?;
    let cr_ok = cr.at_1s == 0.0 && cr.at_2s == 25.0;

    let mut rng = seeded(99);
    let mut monotone = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..8);
        let mut preds = Vec::new();
        let mut boxes = Vec::new();
        for _ in 0..n {
            let mut q = [0.0, 0.0];
            let rows: Vec<[f64; 2]> = (0..6)
                .map(|_| {
                    q = [q[0] + rng.random_range(-2.0..12.0), q[1] + rng.random_range(-3.0..3.0)];
                    q
                })
                .collect();
            preds.push(traj(&rows));
            boxes.push(
                (0..rng.random_range(0..3))
                    .map(|_| ObstacleBox {
                        centers: vec![[rng.random_range(0.0..40.0), rng.random_range(-6.0..6.0)]; 7],
                        half_extents: [2.0, 0.9],
                    })
                    .collect(),
            );
        }
        let cr = collision_rate(&preds, &boxes, 0.5, EGO_HALF_EXTENTS).map_err(e)?;
        monotone += (cr.at_1s <= cr.at_2s && cr.at_2s <= cr.at_3s) as usize;
    }
    check(
        l2_ok && cr_ok && monotone == 100,
        format!(
            "L2 {:?} avg {}; CR@1s {} CR@2s {}; monotone on {monotone}/100 scenes",
            l2.values(),
            l2.avg,
            cr.at_1s,
            cr.at_2s
        ),
    )
}

/// Outputs shared by the training criteria.
struct Runs {
    corpus: PathBuf,
    a: PathBuf,
    b: PathBuf,
    secs: f64,
    config: Value,
}

fn rvla(args: &[&str]) -> Result<Duration, String> {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_rvla"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("rvla {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(t.elapsed())
}

fn train_twice(root: &Path) -> Result<Runs, String> {
    let config = workspace().join("configs/desk.json");
    let cfg = config.to_str().unwrap();
    let corpus = root.join("synthetic.jsonl");
    rvla(&["gen-synth", "-c", cfg, "--output", corpus.to_str().unwrap()])?;
    let run = |name: &str| -> Result<(PathBuf, f64), String> {
        let dir = root.join(name);
        let d = rvla(&[
            "train",
            "--stage",
            "both",
            "-c",
            cfg,
            "--corpus",
            corpus.to_str().unwrap(),
            "--out-dir",
            dir.to_str().unwrap(),
        ])?;
        Ok((dir, d.as_secs_f64()))
    };
    let (a, secs) = run("run_a")?;
    let (b, _) = run("run_b")?;
    let config: Value = serde_json::from_str(&std::fs::read_to_string(a.join("config.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    Ok(Runs {
        corpus,
        a,
        b,
        secs,
        config,
    })
}

fn jsonl(path: &Path) -> Result<Vec<Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines().map(|l| serde_json::from_str(l).map_err(|e| e.to_string())).collect()
}

fn epoch_field(records: &[Value], epoch: u64, field: &str) -> Result<f64, String> {
    let r = records
        .iter()
        .find(|r| r["epoch"].as_u64() == Some(epoch))
        .ok_or(format!("no validation record for epoch {epoch}"))?;
    let v = field.split('.').fold(r, |v, k| &v[k]);
    v.as_f64().ok_or(format!("missing {field}"))
}

fn sft_efficacy(runs: &Runs) -> Verdict {
    let val = jsonl(&runs.a.join("sft_validation.jsonl"))?;
    let epochs = runs.config["train"]["sft"]["epochs"].as_u64().unwrap_or(0);
    let before = epoch_field(&val, 0, "l2.avg")?;
    let after = epoch_field(&val, epochs, "l2.avg")?;
    let ratio = after / before;
    check(
        epochs == 4 && ratio < 0.2 && runs.secs < 600.0,
        format!(
            "{epochs} epochs: val avg L2 {before:.4} -> {after:.4} m ({:.1}% of untrained); train both took {:.0} s on {} core(s)",
            100.0 * ratio,
            runs.secs,
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    )
}

fn grpo_efficacy(runs: &Runs) -> Verdict {
    let rl = jsonl(&runs.a.join("rl_validation.jsonl"))?;
    let post_sft = epoch_field(&rl, 0, "mean_r_total")?;
    let run_seed = runs.config["seed"].as_u64().unwrap_or(0);
    let mut finals = vec![(run_seed, epoch_field(&rl, 1, "mean_r_total")?)];

    let e = |e: rvla_core::Error| e.to_string();
    let (model, _) = load_checkpoint(&runs.a.join("post_sft.ckpt")).map_err(e)?;
    let clips = read_corpus(&runs.corpus).map_err(e)?;
    let frac = runs.config["val_fraction"].as_f64().unwrap_or(0.2);
    let (train, val) = split(&clips, frac, run_seed).map_err(e)?;
    let mut tcfg: TrainConfig = serde_json::from_value(runs.config["train"].clone()).map_err(|e| e.to_string())?;
    let rewards: RewardConfig = serde_json::from_value(runs.config["rewards"].clone()).map_err(|e| e.to_string())?;
    let group = tcfg.rl.group_size;
    let beta = tcfg.rl.kl_beta;
    for seed in (1..).filter(|s| *s != run_seed).take(4) {
        tcfg.seed = seed;
        let mut last = None;
        let mut sink = |ev: &rvla_core::training::TrainEvent| {
            if let rvla_core::training::TrainEvent::Validation(v) = ev {
                last = Some(v.summary.mean_r_total);
            }
            Ok(())
        };
        train_rl(model.clone(), &train, &val, &tcfg, &rewards, &Exec::sequential(), &mut sink).map_err(e)?;
        finals.push((seed, last.ok_or("no validation record")?));
    }
    let never_worse = finals.iter().all(|(_, r)| *r >= post_sft);
    let wins = finals.iter().filter(|(_, r)| *r > post_sft).count();
    let listed: Vec<String> = finals.iter().map(|(s, r)| format!("seed {s}: {r:.6}")).collect();
    check(
        group == 8 && beta == 0.04 && never_worse && wins >= 4,
        format!(
            "G={group}, beta={beta}: post-SFT r_total {post_sft:.6}; after 1 RL epoch {}; improved in {wins}/5",
            listed.join(", ")
        ),
    )
}

fn closed_loop(runs: &Runs) -> Verdict {
    let spec = ScenarioSpec {
        name: "frontal_zero_motion".into(),
        kind: ScenarioKind::Frontal,
        ego_speed: 0.0,
        ego_accel: 0.0,
        ego_yaw_rate: 0.0,
        adversary_start: [14.0, 0.0],
        adversary_velocity: [-5.0, 0.0],
        adversary_half_extents: [2.0, 0.9],
        duration: 4.0,
    };
    let hz = 2.0;
    let tr = closed_loop_rollout(&ZeroMotionPolicy { horizon: 10 }, &spec, hz, &ObservationConfig::default())
        .map_err(|e| e.to_string())?;
    let (t, v) = (tr.collision_time.unwrap_or(f64::NAN), tr.impact_speed.unwrap_or(f64::NAN));
    let example_ok = (t - 2.0).abs() <= 1.0 / hz && (v - 5.0).abs() <= 0.01;

    let ckpt = runs.a.join("post_sft.ckpt");
    let out = runs.a.join("closed_eval");
    let cfg = workspace().join("configs/desk.json");
    rvla(&[
        "eval",
        "--mode",
        "closed",
        "-c",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ])?;
    let report: Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("eval/closed_loop.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let policies = report["policies"].as_array().ok_or("no policies in report")?;
    let score = |i: usize| policies[i]["scores"]["mean_score"].as_f64().unwrap_or(f64::NAN);
    let kinds = |i: usize| -> Vec<String> {
        policies[i]["scores"]["per_kind"]
            .as_array()
            .into_iter()
            .flatten()
            .map(|k| format!("{} {:.2}", k["kind"].as_str().unwrap_or("?"), k["mean_score"].as_f64().unwrap_or(f64::NAN)))
            .collect()
    };
    let kinds_present = policies[0]["scores"]["per_kind"].as_array().map_or(0, |a| a.len());
    check(
        example_ok && kinds_present == 3 && score(0) > score(1),
        format!(
            "zero-motion frontal: impact at t={t:.2} s, {v:.3} m/s; suite mean score post-SFT {:.3} [{}] vs zero-motion {:.3} [{}]",
            score(0),
            kinds(0).join(", "),
            score(1),
            kinds(1).join(", ")
        ),
    )
}

fn reproducibility(runs: &Runs) -> Verdict {
    let files = [
        "sft_metrics.jsonl",
        "sft_validation.jsonl",
        "rl_metrics.jsonl",
        "rl_validation.jsonl",
        "post_sft.ckpt",
        "post_rl.ckpt",
    ];
    let mut differing = Vec::new();
    for f in files {
        let a = std::fs::read(runs.a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(runs.b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            differing.push(f);
        }
    }
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files bitwise identical across two runs", files.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Verdict)> = vec![
        (1, "gradient correctness", gradient_check()),
        (2, "reward oracle equivalence", reward_oracle()),
        (3, "worked reward values", worked_rewards()),
        (4, "initialization statistics", init_statistics()),
        (5, "single-pass vs autoregressive decoding", single_pass_decoding()),
    ];
    let root = tempfile::tempdir().expect("temp dir");
    match train_twice(root.path()) {
        Ok(runs) => {
            results.push((6, "SFT efficacy", sft_efficacy(&runs)));
            results.push((7, "GRPO efficacy", grpo_efficacy(&runs)));
            results.push((8, "metric correctness", metric_examples()));
            results.push((9, "closed-loop harness", closed_loop(&runs)));
            results.push((10, "reproducibility", reproducibility(&runs)));
        }
        Err(e) => {
            for (n, name) in [(6, "SFT efficacy"), (7, "GRPO efficacy"), (9, "closed-loop harness"), (10, "reproducibility")] {
                results.push((n, name, Err(format!("training runs failed: {e}"))));
            }
            results.push((8, "metric correctness", metric_examples()));
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, v) in &results {
        match v {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d}");
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.0} s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
