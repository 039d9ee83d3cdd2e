//! Supervised fine-tuning and group-relative policy optimization.
//!
//! Every clip gets its own tape; per-clip gradients are summed in clip order,
//! so results do not depend on the thread count.

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::UnifiedClip;
use crate::error::{contract_err, Error, Result};
use crate::eval::{evaluate_open_loop, OpenLoopSummary};
use crate::model::{kl_on_tape, log_density_on_tape, policy_sample_with, Model, PolicySample};
use crate::numerics::{
    adamw_step, finite_difference_check, AdamWConfig, Binder, GradCheckReport, Grads, OptimizerState, Tape, Tensor, Var,
};
use crate::rewards::{r_total, RewardConfig};
use crate::rng;

/// Added to the group standard deviation before normalizing advantages.
pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftLoss {
    Mse,
    SmoothL1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Clips per micro-batch.
    pub batch: usize,
    /// Micro-batches whose averaged gradients make one optimizer step.
    pub grad_accum: usize,
    pub loss: SftLoss,
    pub max_grad_norm: Option<f64>,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lr: 5e-5,
            epochs: 4,
            batch: 8,
            grad_accum: 2,
            loss: SftLoss::SmoothL1,
            max_grad_norm: Some(5.0),
            weight_decay: 0.0,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Clips per optimizer step.
    pub batch: usize,
    pub group_size: usize,
    pub kl_beta: f64,
    pub max_grad_norm: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            lr: 1e-6,
            epochs: 1,
            batch: 8,
            group_size: 8,
            kl_beta: 0.04,
            max_grad_norm: 5.0,
            lr_schedule: LrSchedule::Cosine,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Collects every violation as `field.path: problem`.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut need = |ok: bool, path: &str, what: &str| {
            if !ok {
                v.push(format!("{path}: {what}"));
            }
        };
        let s = &self.sft;
        need(s.lr > 0.0 && s.lr.is_finite(), "train.sft.lr", "must be a finite value > 0");
        need(s.batch >= 1, "train.sft.batch", "must be >= 1");
        need(s.grad_accum >= 1, "train.sft.grad_accum", "must be >= 1");
        need(
            s.max_grad_norm.is_none_or(|m| m > 0.0),
            "train.sft.max_grad_norm",
            "must be > 0 when set",
        );
        need(s.weight_decay >= 0.0, "train.sft.weight_decay", "must be >= 0");
        let r = &self.rl;
        need(r.lr > 0.0 && r.lr.is_finite(), "train.rl.lr", "must be a finite value > 0");
        need(r.batch >= 1, "train.rl.batch", "must be >= 1");
        need(r.group_size >= 2, "train.rl.group_size", "must be >= 2");
        need(r.kl_beta >= 0.0 && r.kl_beta.is_finite(), "train.rl.kl_beta", "must be >= 0");
        need(r.max_grad_norm > 0.0, "train.rl.max_grad_norm", "must be > 0");
        need(r.weight_decay >= 0.0, "train.rl.weight_decay", "must be >= 0");
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(v.join("; ")))
        }
    }
}

/// Runs per-clip work sequentially or on a fixed-size pool, always
/// returning results in input order.
pub struct Exec {
    pool: Option<rayon::ThreadPool>,
}

impl Exec {
    pub fn sequential() -> Self {
        Exec { pool: None }
    }

    pub fn new(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Self::sequential());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| contract_err!("cannot start {threads} worker threads: {e}"))?;
        Ok(Exec { pool: Some(pool) })
    }

    pub fn map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => {
                use rayon::prelude::*;
                pool.install(|| (0..n).into_par_iter().map(f).collect())
            }
        }
    }
}

fn tag_numeric(e: Error, at: &str) -> Error {
    match e {
        Error::NonFinite(m) | Error::NumericAbort(m) => Error::NumericAbort(format!("{at}: {m}")),
        other => other,
    }
}

/// Loss value and parameter gradients of one tape-built objective.
fn clip_grad<F>(model: &Model, build: F) -> Result<(f64, Grads)>
where
    F: FnOnce(&mut Tape, &mut Binder) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut binder = Binder::new(model.params(), true);
    let loss = build(&mut tape, &mut binder)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let mut g = model.params().zero_grads();
    binder.collect(&tape, &mut g)?;
    Ok((value, g))
}

fn sft_objective(model: &Model, tape: &mut Tape, binder: &mut Binder, clip: &UnifiedClip, loss: SftLoss) -> Result<Var> {
    let f = model.forward(tape, binder, clip)?;
    let gt = tape.leaf(clip.actions_tensor(), false);
    let d = tape.sub(f.waypoints, gt)?;
    let e = match loss {
        SftLoss::Mse => tape.square(d)?,
        SftLoss::SmoothL1 => tape.smooth_l1(d)?,
    };
    tape.mean(e)
}

/// Per-clip supervised loss of the current parameters.
pub fn sft_loss(model: &Model, clip: &UnifiedClip, loss: SftLoss) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(model.params(), false);
    let l = sft_objective(model, &mut tape, &mut binder, clip, loss)?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftStepStats {
    /// Mean loss before the update.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One optimizer step over `clips`, split into micro-batches of
/// `cfg.batch`; micro-batch gradients are averaged.
pub fn sft_step(
    clips: &[UnifiedClip],
    batch_id: usize,
    model: &mut Model,
    opt: &mut OptimizerState,
    cfg: &SftConfig,
    exec: &Exec,
) -> Result<SftStepStats> {
    if clips.is_empty() {
        return Err(contract_err!("SFT batch {batch_id} is empty"));
    }
    let per_clip = {
        let m: &Model = model;
        exec.map(clips.len(), |i| {
            clip_grad(m, |tape, binder| sft_objective(m, tape, binder, &clips[i], cfg.loss))
        })
        .map_err(|e| tag_numeric(e, &format!("SFT batch {batch_id}")))?
    };
    let mut total = model.params().zero_grads();
    let mut losses = Vec::new();
    for chunk in per_clip.chunks(cfg.batch) {
        let mut g = model.params().zero_grads();
        let mut l = 0.0;
        for (li, gi) in chunk {
            g.add(gi)?;
            l += li;
        }
        g.scale(1.0 / chunk.len() as f64);
        total.add(&g)?;
        losses.push(l / chunk.len() as f64);
    }
    total.scale(1.0 / losses.len() as f64);
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NumericAbort(format!("SFT loss is {loss} in batch {batch_id}")));
    }
    total.check_finite(model.params())?;
    let grad_norm = match cfg.max_grad_norm {
        Some(m) => total.clip_global_norm(m),
        None => total.global_norm(),
    };
    adamw_step(model.params_mut(), &total, opt)?;
    Ok(SftStepStats { loss, grad_norm })
}

/// `(r − mean) / (std + ε)` with the population standard deviation.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(contract_err!("a reward group needs at least 2 samples, got {}", rewards.len()));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::NumericAbort(format!("non-finite reward {r}")));
    }
    let n = rewards.len() as f64;
    // shifted by the first reward so identical rewards give exactly zero
    let r0 = rewards[0];
    let mean = r0 + rewards.iter().map(|r| r - r0).sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + ADVANTAGE_EPS;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// One clip's sampled group with everything the policy update needs.
#[derive(Clone, Debug)]
pub struct ClipGroup {
    pub clip: UnifiedClip,
    pub samples: Vec<PolicySample>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub ref_mean: Tensor,
    pub ref_log_std: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct GroupBatch {
    pub groups: Vec<ClipGroup>,
}

/// Samples `group_size` trajectories per clip from the current policy and
/// scores them against ground truth. Clip `i` of step `step` draws from its
/// own substream.
#[allow(clippy::too_many_arguments)]
pub fn build_group_batch(
    clips: &[UnifiedClip],
    step: usize,
    model: &Model,
    reference: &Model,
    cfg: &RlConfig,
    rewards: &RewardConfig,
    seed: u64,
    exec: &Exec,
) -> Result<GroupBatch> {
    let stream = format!("grpo_step_{step}");
    let groups = exec.map(clips.len(), |i| {
        let clip = &clips[i];
        let mean = model.predict(clip)?.waypoints;
        let mut r = rng::indexed_substream(seed, &stream, i as u64);
        let samples = policy_sample_with(&mean, model.log_std(), cfg.group_size, &mut r)?;
        let gt = clip.actions_tensor();
        let rs = samples
            .iter()
            .map(|s| r_total(&s.trajectory, &gt, rewards))
            .collect::<Result<Vec<_>>>()?;
        let advantages = grpo_advantages(&rs)?;
        Ok(ClipGroup {
            clip: clip.clone(),
            samples,
            rewards: rs,
            advantages,
            ref_mean: reference.predict(clip)?.waypoints,
            ref_log_std: reference.log_std().clone(),
        })
    })?;
    Ok(GroupBatch { groups })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoStats {
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_advantage: f64,
    /// Mean KL to the reference policy before the update.
    pub kl: f64,
    pub grad_norm: f64,
}

fn grpo_objective(model: &Model, tape: &mut Tape, binder: &mut Binder, g: &ClipGroup, beta: f64) -> Result<(Var, Var)> {
    let f = model.forward(tape, binder, &g.clip)?;
    let mut pg: Option<Var> = None;
    for (s, &a) in g.samples.iter().zip(&g.advantages) {
        let lp = log_density_on_tape(tape, &s.trajectory, f.waypoints, f.log_std)?;
        let term = tape.scale(lp, -a / g.samples.len() as f64)?;
        pg = Some(match pg {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let pg = pg.ok_or_else(|| contract_err!("empty sample group"))?;
    let kl = kl_on_tape(tape, f.waypoints, f.log_std, &g.ref_mean, &g.ref_log_std)?;
    let kl_term = tape.scale(kl, beta)?;
    Ok((tape.add(pg, kl_term)?, kl))
}

/// Policy-gradient update `−mean(A·log π) + β·KL(π ‖ π_ref)`, averaged over
/// the clips of `batch`, followed by global-norm clipping and log-std
/// clamping.
pub fn grpo_step(
    batch: &GroupBatch,
    step_id: usize,
    model: &mut Model,
    opt: &mut OptimizerState,
    cfg: &RlConfig,
    exec: &Exec,
) -> Result<GrpoStats> {
    let n = batch.groups.len();
    if n == 0 {
        return Err(contract_err!("RL step {step_id} has no clips"));
    }
    let per_clip = {
        let m: &Model = model;
        exec.map(n, |i| {
            let mut kl_value = 0.0;
            let (loss, g) = clip_grad(m, |tape, binder| {
                let (loss, kl) = grpo_objective(m, tape, binder, &batch.groups[i], cfg.kl_beta)?;
                kl_value = tape.value(kl).item();
                Ok(loss)
            })?;
            Ok((loss, kl_value, g))
        })
        .map_err(|e| tag_numeric(e, &format!("RL step {step_id}")))?
    };
    let mut total = model.params().zero_grads();
    let (mut loss, mut kl) = (0.0, 0.0);
    for (l, k, g) in &per_clip {
        total.add(g)?;
        loss += l;
        kl += k;
    }
    total.scale(1.0 / n as f64);
    loss /= n as f64;
    kl /= n as f64;
    if !kl.is_finite() || !loss.is_finite() {
        return Err(Error::NumericAbort(format!(
            "RL step {step_id}: loss {loss}, KL {kl}"
        )));
    }
    total.check_finite(model.params())?;
    let grad_norm = total.clip_global_norm(cfg.max_grad_norm);
    adamw_step(model.params_mut(), &total, opt)?;
    model.clamp_log_std();

    let count = (n * cfg.group_size) as f64;
    let all = || batch.groups.iter().flat_map(|g| g.rewards.iter().zip(&g.advantages));
    Ok(GrpoStats {
        loss,
        mean_reward: all().map(|(r, _)| r).sum::<f64>() / count,
        mean_advantage: all().map(|(_, a)| a).sum::<f64>() / count,
        kl,
        grad_norm,
    })
}

/// Learning rate for optimizer step `step` of `total`.
pub fn scheduled_lr(base: f64, schedule: LrSchedule, step: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let frac = step as f64 / total.max(1) as f64;
            0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sft,
    Rl,
}

/// One optimizer step; fields that do not apply to the stage are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_advantage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl: Option<f64>,
}

/// Held-out summary; epoch 0 is the model entering the stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub stage: Stage,
    pub epoch: usize,
    #[serde(flatten)]
    pub summary: OpenLoopSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    Metric(MetricRecord),
    Validation(ValidationRecord),
}

pub type EventSink<'a> = dyn FnMut(&TrainEvent) -> Result<()> + 'a;

fn shuffled(n: usize, seed: u64, stream: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::indexed_substream(seed, stream, epoch as u64));
    order
}

fn validate_stage(
    model: &Model,
    stage: Stage,
    epoch: usize,
    val: &[UnifiedClip],
    rewards: &RewardConfig,
    sink: &mut EventSink<'_>,
) -> Result<()> {
    if val.is_empty() {
        return Ok(());
    }
    let summary = evaluate_open_loop(model, val, rewards)?;
    log::info!(
        "{stage:?} epoch {epoch}: val avg L2 {:.4} m, r_total {:.4}",
        summary.l2.avg,
        summary.mean_r_total
    );
    sink(&TrainEvent::Validation(ValidationRecord { stage, epoch, summary }))
}

/// Supervised stage: shuffles per epoch, steps every
/// `batch·grad_accum` clips, validates before training and after each epoch.
pub fn train_sft(
    mut model: Model,
    train: &[UnifiedClip],
    val: &[UnifiedClip],
    cfg: &TrainConfig,
    rewards: &RewardConfig,
    exec: &Exec,
    sink: &mut EventSink<'_>,
) -> Result<Model> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(contract_err!("SFT needs at least one training clip"));
    }
    let s = &cfg.sft;
    let mut opt = OptimizerState::new(
        model.params(),
        AdamWConfig {
            lr: s.lr,
            weight_decay: s.weight_decay,
            ..Default::default()
        },
    );
    validate_stage(&model, Stage::Sft, 0, val, rewards, sink)?;
    let per_step = s.batch * s.grad_accum;
    let total = s.epochs * train.len().div_ceil(per_step);
    let mut step = 0;
    for epoch in 1..=s.epochs {
        let order = shuffled(train.len(), cfg.seed, "sft_shuffle", epoch);
        for idx in order.chunks(per_step) {
            let clips: Vec<UnifiedClip> = idx.iter().map(|&i| train[i].clone()).collect();
            let lr = scheduled_lr(s.lr, s.lr_schedule, step, total);
            opt.set_lr(lr);
            let st = sft_step(&clips, step, &mut model, &mut opt, s, exec)?;
            sink(&TrainEvent::Metric(MetricRecord {
                stage: Stage::Sft,
                epoch,
                step,
                lr,
                loss: st.loss,
                grad_norm: st.grad_norm,
                mean_reward: None,
                mean_advantage: None,
                kl: None,
            }))?;
            step += 1;
        }
        validate_stage(&model, Stage::Sft, epoch, val, rewards, sink)?;
    }
    Ok(model)
}

/// Reinforcement stage against a frozen copy of the incoming model.
pub fn train_rl(
    mut model: Model,
    train: &[UnifiedClip],
    val: &[UnifiedClip],
    cfg: &TrainConfig,
    rewards: &RewardConfig,
    exec: &Exec,
    sink: &mut EventSink<'_>,
) -> Result<Model> {
    cfg.validate()?;
    rewards.validate()?;
    if train.is_empty() {
        return Err(contract_err!("RL needs at least one training clip"));
    }
    let r = &cfg.rl;
    let reference = model.clone();
    let mut opt = OptimizerState::new(
        model.params(),
        AdamWConfig {
            lr: r.lr,
            weight_decay: r.weight_decay,
            ..Default::default()
        },
    );
    validate_stage(&model, Stage::Rl, 0, val, rewards, sink)?;
    let total = r.epochs * train.len().div_ceil(r.batch);
    let mut step = 0;
    for epoch in 1..=r.epochs {
        let order = shuffled(train.len(), cfg.seed, "rl_shuffle", epoch);
        for idx in order.chunks(r.batch) {
            let clips: Vec<UnifiedClip> = idx.iter().map(|&i| train[i].clone()).collect();
            let lr = scheduled_lr(r.lr, r.lr_schedule, step, total);
            opt.set_lr(lr);
            let batch = build_group_batch(&clips, step, &model, &reference, r, rewards, cfg.seed, exec)?;
            let st = grpo_step(&batch, step, &mut model, &mut opt, r, exec)?;
            sink(&TrainEvent::Metric(MetricRecord {
                stage: Stage::Rl,
                epoch,
                step,
                lr,
                loss: st.loss,
                grad_norm: st.grad_norm,
                mean_reward: Some(st.mean_reward),
                mean_advantage: Some(st.mean_advantage),
                kl: Some(st.kl),
            }))?;
            step += 1;
        }
        validate_stage(&model, Stage::Rl, epoch, val, rewards, sink)?;
    }
    Ok(model)
}

/// Squared error plus the per-coordinate Gaussian negative log-likelihood
/// of the ground truth, so every parameter including the log-std gets a
/// gradient.
fn check_objective(model: &Model, tape: &mut Tape, binder: &mut Binder, clip: &UnifiedClip) -> Result<Var> {
    let f = model.forward(tape, binder, clip)?;
    let gt = clip.actions_tensor();
    let k = gt.numel() as f64;
    let g = tape.leaf(gt.clone(), false);
    let d = tape.sub(f.waypoints, g)?;
    let sq = tape.square(d)?;
    let mse = tape.mean(sq)?;
    let lp = log_density_on_tape(tape, &gt, f.waypoints, f.log_std)?;
    let nll = tape.scale(lp, -1.0 / k)?;
    tape.add(mse, nll)
}

fn batch_objective(model: &Model, clips: &[UnifiedClip]) -> Result<f64> {
    let mut total = 0.0;
    for c in clips {
        let mut tape = Tape::new();
        let mut binder = Binder::new(model.params(), false);
        let l = check_objective(model, &mut tape, &mut binder, c)?;
        total += tape.value(l).item();
    }
    Ok(total / clips.len() as f64)
}

/// Central-difference check of the whole model's gradient on `clips`,
/// probing `per_tensor` seeded coordinates of every parameter tensor.
pub fn full_model_grad_check(
    model: &Model,
    clips: &[UnifiedClip],
    per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if clips.is_empty() || per_tensor == 0 {
        return Err(contract_err!("grad check needs clips and at least one coordinate per tensor"));
    }
    let mut analytic = model.params().zero_grads();
    for c in clips {
        let (_, g) = clip_grad(model, |tape, binder| check_objective(model, tape, binder, c))?;
        analytic.add(&g)?;
    }
    analytic.scale(1.0 / clips.len() as f64);
    let flat = model.params().flatten();
    let mut rng = rng::substream(seed, "grad_check");
    let mut coords = Vec::new();
    let mut offset = 0;
    for id in model.params().ids() {
        let n = model.params().get(id).numel();
        let local: Vec<usize> = (0..n).collect();
        coords.extend(local.choose_multiple(&mut rng, per_tensor.min(n)).map(|i| offset + i));
        offset += n;
    }
    let mut probe = model.clone();
    finite_difference_check(&flat, &analytic.flatten(), &coords, eps, |x| {
        probe.params_mut().load_flat(x)?;
        batch_objective(&probe, clips)
    })
}
