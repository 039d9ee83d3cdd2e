use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rvla_core::data::{
    compute_trajectory_stats, ingest_adapter, read_corpus, split, synth_scenarios_with, write_corpus, IngestOptions,
    ManeuverKind, SourceTag, SynthOptions, UnifiedClip,
};
use rvla_core::eval::{
    closed_loop_rollout, collision_rate, csv_table, default_scenario_suite, l2_at_horizons, score_scenarios,
    svg_trajectory_plot, write_text, HorizonMetrics, ModelPolicy, ObservationConfig, ObstacleBox, PlotLayer, Policy,
    RolloutTrace, ScenarioScores, ScenarioSpec, ZeroMotionPolicy,
};
use rvla_core::model::{load_checkpoint, save_checkpoint, Model};
use rvla_core::numerics::Tensor;
use rvla_core::rewards::r_total;
use rvla_core::training::{train_rl, train_sft, Exec, TrainEvent};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::{CliError, Common, EvalMode, StageArg, TrainOverrides};

pub const POST_SFT: &str = "post_sft.ckpt";
pub const POST_RL: &str = "post_rl.ckpt";

type Result<T> = std::result::Result<T, CliError>;

/// Loads the config, applies the shared flags and validates everything
/// before any work starts.
fn resolve(common: &Common, tweak: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    tweak(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize")
}

/// The configured corpus, or a synthetic one drawn from the run seed.
fn load_corpus(cfg: &RunConfig) -> Result<Vec<UnifiedClip>> {
    let horizon = cfg.model.horizon;
    let clips = match &cfg.corpus {
        Some(path) => {
            let clips = read_corpus(path)?;
            for c in &clips {
                c.validate(horizon)
                    .map_err(|m| CliError::Input(format!("{}: clip {}: {m}", path.display(), c.clip_id)))?;
            }
            clips
        }
        None => synth_scenarios_with(
            cfg.synth.count,
            &cfg.synth.kinds,
            cfg.seed,
            &SynthOptions {
                history_len: cfg.synth.history_len,
                horizon,
            },
        )?,
    };
    if clips.len() < 2 {
        return Err(CliError::Input(format!("corpus has {} clips, need at least 2", clips.len())));
    }
    Ok(clips)
}

fn corpus_label(cfg: &RunConfig) -> String {
    cfg.corpus
        .as_ref()
        .and_then(|p| p.file_stem())
        .map_or_else(|| "synthetic".to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn ingest(
    common: &Common,
    source: &str,
    input: &Path,
    output: &Path,
    horizon: Option<usize>,
    include_origin_row: bool,
) -> Result<()> {
    let tag: SourceTag = source.parse().map_err(|e: rvla_core::Error| CliError::Input(e.to_string()))?;
    if tag == SourceTag::Synthetic {
        return Err(CliError::Input("use gen-synth for synthetic clips".into()));
    }
    let cfg = resolve(common, |c| {
        if let Some(h) = horizon {
            c.model.horizon = h;
        }
        c.include_origin_row |= include_origin_row;
        Ok(())
    })?;
    if !input.is_file() {
        return Err(CliError::Input(format!("input not found: {}", input.display())));
    }
    let opts = IngestOptions {
        horizon: cfg.model.horizon,
        include_origin_row: cfg.include_origin_row,
    };
    let clips = ingest_adapter(tag, input, &opts)?;
    if clips.is_empty() {
        return Err(CliError::Input(format!("{}: no valid {tag} clips", input.display())));
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_corpus(output, &clips)?;
    println!("ingested {} {tag} clips into {}", clips.len(), output.display());
    Ok(())
}

pub fn stats(common: &Common, corpus: Option<PathBuf>, output: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(common, |c| {
        if corpus.is_some() {
            c.corpus = corpus.clone();
        }
        Ok(())
    })?;
    let clips = load_corpus(&cfg)?;
    let stats = compute_trajectory_stats(&clips)?;
    let out = output.unwrap_or_else(|| cfg.out_dir.join("stats.json"));
    write_text(&out, &to_json(&stats))?;

    let mut per_source: BTreeMap<SourceTag, usize> = BTreeMap::new();
    for c in &clips {
        *per_source.entry(c.source).or_default() += 1;
    }
    println!("clips: {}", clips.len());
    for (tag, n) in &per_source {
        println!("  {tag:<12} {n}");
    }
    println!("{:>4} {:>10} {:>10} {:>10} {:>10}", "step", "mean_x", "mean_y", "var_x", "var_y");
    for j in 0..stats.horizon() {
        println!(
            "{:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            j + 1,
            stats.mean.get2(j, 0),
            stats.mean.get2(j, 1),
            stats.var.get2(j, 0),
            stats.var.get2(j, 1)
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn gen_synth(
    common: &Common,
    count: Option<usize>,
    kinds: Option<Vec<String>>,
    horizon: Option<usize>,
    history_len: Option<usize>,
    output: &Path,
) -> Result<()> {
    let cfg = resolve(common, |c| {
        if let Some(n) = count {
            c.synth.count = n;
        }
        if let Some(h) = horizon {
            c.model.horizon = h;
        }
        if let Some(h) = history_len {
            c.synth.history_len = h;
        }
        if let Some(ks) = &kinds {
            c.synth.kinds = ks
                .iter()
                .map(|k| k.trim().parse::<ManeuverKind>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CliError::Input(format!("--kinds: {e}")))?;
        }
        c.corpus = None;
        Ok(())
    })?;
    let clips = load_corpus(&cfg)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_corpus(output, &clips)?;
    println!("wrote {} synthetic clips to {}", clips.len(), output.display());
    Ok(())
}

/// Appends each training event to its stage's JSON-lines files.
struct EventLog {
    dir: PathBuf,
    files: BTreeMap<String, BufWriter<File>>,
}

impl EventLog {
    fn new(dir: &Path) -> Self {
        EventLog {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        }
    }

    fn write(&mut self, e: &TrainEvent) -> rvla_core::Result<()> {
        let (name, line) = match e {
            TrainEvent::Metric(m) => (format!("{}_metrics.jsonl", stage_name(m.stage)), serde_json::to_string(m)),
            TrainEvent::Validation(v) => (
                format!("{}_validation.jsonl", stage_name(v.stage)),
                serde_json::to_string(v),
            ),
        };
        let line = line.expect("records serialize");
        let path = self.dir.join(&name);
        let io = |source| rvla_core::Error::Io {
            path: path.clone(),
            source,
        };
        if !self.files.contains_key(&name) {
            self.files.insert(name.clone(), BufWriter::new(File::create(&path).map_err(io)?));
        }
        let w = self.files.get_mut(&name).expect("inserted above");
        writeln!(w, "{line}").map_err(io)
    }

    fn finish(self) -> Result<()> {
        for (name, mut w) in self.files {
            w.flush().map_err(|e| io_err(&self.dir.join(name), e))?;
        }
        Ok(())
    }
}

fn stage_name(s: rvla_core::training::Stage) -> &'static str {
    match s {
        rvla_core::training::Stage::Sft => "sft",
        rvla_core::training::Stage::Rl => "rl",
    }
}

pub fn train(common: &Common, o: &TrainOverrides, stage: StageArg) -> Result<()> {
    let cfg = resolve(common, |c| {
        if o.corpus.is_some() {
            c.corpus = o.corpus.clone();
        }
        if let Some(d) = o.d_model {
            c.model.d_model = d;
        }
        if let Some(v) = o.sft_lr {
            c.train.sft.lr = v;
        }
        if let Some(v) = o.sft_epochs {
            c.train.sft.epochs = v;
        }
        if let Some(v) = o.rl_lr {
            c.train.rl.lr = v;
        }
        if let Some(v) = o.rl_epochs {
            c.train.rl.epochs = v;
        }
        if let Some(v) = o.group_size {
            c.train.rl.group_size = v;
        }
        if let Some(v) = o.kl_beta {
            c.train.rl.kl_beta = v;
        }
        Ok(())
    })?;
    let out = &cfg.out_dir;
    let sft_path = out.join(POST_SFT);
    if stage == StageArg::Rl && !sft_path.is_file() {
        return Err(CliError::Contract(format!(
            "stage rl needs {}; run `train --stage sft` first",
            sft_path.display()
        )));
    }

    let started = Instant::now();
    let clips = load_corpus(&cfg)?;
    let (train_set, val_set) = split(&clips, cfg.val_fraction, cfg.seed)?;
    let exec = Exec::new(cfg.threads)?;
    let tcfg = cfg.train_config();
    create_dir(out)?;
    write_text(&out.join("config.json"), &to_json(&cfg))?;
    let meta = json!({ "seed": cfg.seed });
    log::info!(
        "{} train / {} validation clips, d_model {}",
        train_set.len(),
        val_set.len(),
        cfg.model.d_model
    );

    let mut events = EventLog::new(out);
    let mut sink = |e: &TrainEvent| events.write(e);
    let post_sft = if stage == StageArg::Rl {
        let (model, _) = load_checkpoint(&sft_path)?;
        if model.config() != &cfg.model {
            log::warn!("model config differs from {}; using the checkpoint's", sft_path.display());
        }
        model
    } else {
        let stats = compute_trajectory_stats(&train_set)?;
        let model = Model::new(cfg.model.clone(), &stats, cfg.seed)?;
        let model = train_sft(model, &train_set, &val_set, &tcfg, &cfg.rewards, &exec, &mut sink)?;
        save_checkpoint(&sft_path, &model, &meta)?;
        println!("wrote {}", sft_path.display());
        model
    };
    if stage != StageArg::Sft {
        let model = train_rl(post_sft, &train_set, &val_set, &tcfg, &cfg.rewards, &exec, &mut sink)?;
        let p = out.join(POST_RL);
        save_checkpoint(&p, &model, &meta)?;
        println!("wrote {}", p.display());
    }
    events.finish()?;
    println!("train finished in {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

/// Two neighbour-lane vehicles that follow the ground-truth path at a fixed
/// lateral offset; index 0 is the current time.
pub fn lane_boxes(gt: &Tensor, offset: f64, half_extents: [f64; 2]) -> Vec<ObstacleBox> {
    [offset, -offset]
        .into_iter()
        .map(|dy| {
            let mut centers = vec![[0.0, dy]];
            centers.extend((0..gt.shape()[0]).map(|j| [gt.get2(j, 0), gt.get2(j, 1) + dy]));
            ObstacleBox { centers, half_extents }
        })
        .collect()
}

#[derive(Serialize)]
struct OpenLoopRow {
    dataset: String,
    clips: usize,
    l2: HorizonMetrics,
    collision_rate: HorizonMetrics,
    mean_r_total: f64,
    decodes_per_clip: f64,
}

#[derive(Serialize)]
struct ClosedLoopReport {
    replan_hz: f64,
    policies: Vec<PolicyReport>,
}

#[derive(Serialize)]
struct PolicyReport {
    policy: String,
    scores: ScenarioScores,
    policy_calls: usize,
    decode_calls: Option<u64>,
    traces: Vec<RolloutTrace>,
}

fn load_model(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(Model, String)> {
    let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join(POST_RL));
    let (model, _) = load_checkpoint(&path)?;
    let label = path
        .file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
    Ok((model, label))
}

fn open_loop(cfg: &RunConfig, model: &Model, label: &str, dir: &Path) -> Result<()> {
    let clips = load_corpus(cfg)?;
    let (_, val) = split(&clips, cfg.val_fraction, cfg.seed)?;
    let dt = cfg.rewards.dt;
    let mut preds = Vec::with_capacity(val.len());
    let mut decode_rows = Vec::with_capacity(val.len());
    for clip in &val {
        let before = model.decode_count();
        preds.push(model.predict(clip)?.waypoints);
        decode_rows.push(vec![clip.clip_id.clone(), (model.decode_count() - before).to_string()]);
    }

    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, c) in val.iter().enumerate() {
        groups.entry(c.source.to_string()).or_default().push(i);
    }
    groups.insert(format!("all:{}", corpus_label(cfg)), (0..val.len()).collect());
    let mut rows = Vec::new();
    for (dataset, idx) in groups {
        let n = idx.len() as f64;
        let mut l2 = [0.0; 3];
        let mut r = 0.0;
        let mut ps = Vec::new();
        let mut scenes = Vec::new();
        for &i in &idx {
            let gt = val[i].actions_tensor();
            for (acc, v) in l2.iter_mut().zip(l2_at_horizons(&preds[i], &gt, dt)?.values()) {
                *acc += v / n;
            }
            r += r_total(&preds[i], &gt, &cfg.rewards)? / n;
            scenes.push(lane_boxes(&gt, cfg.eval.lane_offset, cfg.eval.ego_half_extents));
            ps.push(preds[i].clone());
        }
        let cr = collision_rate(&ps, &scenes, dt, cfg.eval.ego_half_extents)?;
        let decodes: u64 = idx.iter().map(|&i| decode_rows[i][1].parse::<u64>().unwrap_or(0)).sum();
        rows.push(OpenLoopRow {
            dataset,
            clips: idx.len(),
            l2: HorizonMetrics {
                at_1s: l2[0],
                at_2s: l2[1],
                at_3s: l2[2],
                avg: (l2[0] + l2[1] + l2[2]) / 3.0,
            },
            collision_rate: cr,
            mean_r_total: r,
            decodes_per_clip: decodes as f64 / n,
        });
    }

    let headers = [
        "model", "dataset", "clips", "l2_1s", "l2_2s", "l2_3s", "l2_avg", "cr_1s", "cr_2s", "cr_3s", "cr_avg",
        "mean_r_total", "decodes_per_clip",
    ];
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![label.to_string(), r.dataset.clone(), r.clips.to_string()];
            cells.extend(r.l2.values().iter().chain([&r.l2.avg]).map(|v| format!("{v:.4}")));
            let cr = &r.collision_rate;
            cells.extend(cr.values().iter().chain([&cr.avg]).map(|v| format!("{v:.2}")));
            cells.push(format!("{:.6}", r.mean_r_total));
            cells.push(format!("{:.2}", r.decodes_per_clip));
            cells
        })
        .collect();
    let csv = csv_table(&headers, &table);
    write_text(&dir.join("open_loop.csv"), &csv)?;
    write_text(&dir.join("open_loop.json"), &to_json(&json!({ "model": label, "rows": rows })))?;
    write_text(&dir.join("decode_counts.csv"), &csv_table(&["clip_id", "decode_calls"], &decode_rows))?;
    print!("{csv}");
    Ok(())
}

fn scenario_suite(cfg: &RunConfig) -> Result<Vec<ScenarioSpec>> {
    let Some(path) = &cfg.eval.scenarios else {
        return Ok(default_scenario_suite());
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let specs: Vec<ScenarioSpec> = serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Input(format!("{}: {}: {}", path.display(), e.path(), e.inner())))?;
    if specs.is_empty() {
        return Err(CliError::Input(format!("{}: no scenarios", path.display())));
    }
    for s in &specs {
        s.validate()
            .map_err(|e| CliError::Input(format!("{}: scenario {}: {e}", path.display(), s.name)))?;
    }
    Ok(specs)
}

fn closed_loop(cfg: &RunConfig, model: &Model, label: &str, dir: &Path) -> Result<()> {
    let suite = scenario_suite(cfg)?;
    let exec = Exec::new(cfg.threads)?;
    let obs = ObservationConfig {
        history_len: cfg.synth.history_len,
        horizon: model.config().horizon,
    };
    let hz = cfg.eval.replan_hz;
    let learned = ModelPolicy {
        model,
        label: label.to_string(),
    };
    let frozen = ZeroMotionPolicy {
        horizon: model.config().horizon,
    };
    let policies: [&(dyn Policy + Sync); 2] = [&learned, &frozen];
    let mut reports = Vec::new();
    for (k, policy) in policies.into_iter().enumerate() {
        let before = model.decode_count();
        let traces = exec.map(suite.len(), |i| closed_loop_rollout(policy, &suite[i], hz, &obs))?;
        let calls: usize = traces.iter().map(|t| t.policy_calls).sum();
        let decode_calls = (k == 0).then(|| model.decode_count() - before);
        if let Some(d) = decode_calls {
            if d != calls as u64 {
                return Err(CliError::Contract(format!("{calls} policy calls but {d} decoder passes")));
            }
        }
        reports.push(PolicyReport {
            policy: policy.name().to_string(),
            scores: score_scenarios(&traces)?,
            policy_calls: calls,
            decode_calls,
            traces,
        });
    }

    let mut table = Vec::new();
    for r in &reports {
        for k in &r.scores.per_kind {
            table.push(vec![
                r.policy.clone(),
                k.kind.as_str().to_string(),
                k.count.to_string(),
                format!("{:.4}", k.mean_score),
                format!("{:.2}", k.collision_rate),
            ]);
        }
        table.push(vec![
            r.policy.clone(),
            "all".into(),
            r.traces.len().to_string(),
            format!("{:.4}", r.scores.mean_score),
            format!("{:.2}", r.scores.collision_rate),
        ]);
    }
    let csv = csv_table(&["policy", "kind", "scenarios", "score", "collision_rate"], &table);
    write_text(&dir.join("closed_loop.csv"), &csv)?;
    let report = ClosedLoopReport {
        replan_hz: hz,
        policies: reports,
    };
    write_text(&dir.join("closed_loop.json"), &to_json(&report))?;
    let reports = report.policies;
    print!("{csv}");
    plot_rollouts(&reports, dir)
}

pub fn eval(
    common: &Common,
    corpus: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    mode: EvalMode,
    scenarios: Option<PathBuf>,
    replan_hz: Option<f64>,
) -> Result<()> {
    let cfg = resolve(common, |c| {
        if corpus.is_some() {
            c.corpus = corpus.clone();
        }
        if scenarios.is_some() {
            c.eval.scenarios = scenarios.clone();
        }
        if let Some(h) = replan_hz {
            c.eval.replan_hz = h;
        }
        Ok(())
    })?;
    let (model, label) = load_model(&cfg, checkpoint)?;
    let dir = cfg.out_dir.join("eval");
    create_dir(&dir)?;
    if mode != EvalMode::Closed {
        open_loop(&cfg, &model, &label, &dir)?;
    }
    if mode != EvalMode::Open {
        closed_loop(&cfg, &model, &label, &dir)?;
    }
    Ok(())
}

/// One SVG per scenario with every policy's ego path and the adversary.
fn plot_rollouts(reports: &[PolicyReport], dir: &Path) -> Result<()> {
    let mut by_scenario: BTreeMap<&str, Vec<&RolloutTrace>> = BTreeMap::new();
    for t in reports.iter().flat_map(|r| &r.traces) {
        by_scenario.entry(&t.scenario).or_default().push(t);
    }
    let colors = ["#1f77b4", "#2ca02c", "#9467bd"];
    for (name, traces) in by_scenario {
        let mut layers: Vec<PlotLayer> = traces
            .iter()
            .zip(colors.iter().cycle())
            .map(|(t, c)| PlotLayer::Path {
                label: t.policy.clone(),
                color: c.to_string(),
                points: t.ego.clone(),
            })
            .collect();
        if let Some(t) = traces.iter().max_by_key(|t| t.adversary.len()) {
            layers.push(PlotLayer::Boxes {
                label: "adversary".into(),
                color: "#d62728".into(),
                centers: t.adversary.clone(),
                half_extents: rvla_core::eval::EGO_HALF_EXTENTS,
            });
        }
        let svg = svg_trajectory_plot(&format!("scenario {name}"), &layers);
        write_text(&dir.join("plots").join(format!("closed_{name}.svg")), &svg)?;
    }
    Ok(())
}

pub fn plot(common: &Common, corpus: Option<PathBuf>, checkpoint: Option<PathBuf>, clips: Option<usize>) -> Result<()> {
    let cfg = resolve(common, |c| {
        if corpus.is_some() {
            c.corpus = corpus.clone();
        }
        if let Some(n) = clips {
            c.eval.plot_clips = n;
        }
        Ok(())
    })?;
    let (model, label) = load_model(&cfg, checkpoint)?;
    let all = load_corpus(&cfg)?;
    let (_, val) = split(&all, cfg.val_fraction, cfg.seed)?;
    let dir = cfg.out_dir.join("plots");
    let rows = |t: &Tensor| -> Vec<[f64; 2]> {
        std::iter::once([0.0, 0.0])
            .chain((0..t.shape()[0]).map(|j| [t.get2(j, 0), t.get2(j, 1)]))
            .collect()
    };
    for clip in val.iter().take(cfg.eval.plot_clips) {
        let gt = clip.actions_tensor();
        let pred = model.predict(clip)?.waypoints;
        let mut layers = vec![
            PlotLayer::Path {
                label: "history".into(),
                color: "#7f7f7f".into(),
                points: clip.history.iter().map(|s| s.position).collect(),
            },
            PlotLayer::Path {
                label: "ground truth".into(),
                color: "#2ca02c".into(),
                points: rows(&gt),
            },
            PlotLayer::Path {
                label: label.clone(),
                color: "#1f77b4".into(),
                points: rows(&pred),
            },
        ];
        for (k, b) in lane_boxes(&gt, cfg.eval.lane_offset, cfg.eval.ego_half_extents).into_iter().enumerate() {
            layers.push(PlotLayer::Boxes {
                label: format!("lane box {}", k + 1),
                color: "#d62728".into(),
                centers: b.centers,
                half_extents: b.half_extents,
            });
        }
        let file = dir.join(format!("{}.svg", clip.clip_id));
        write_text(&file, &svg_trajectory_plot(&clip.clip_id, &layers))?;
        println!("wrote {}", file.display());
    }
    Ok(())
}
