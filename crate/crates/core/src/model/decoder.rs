//! Action-query bank, parallel decoder blocks, refinement, and regression.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{TrajectoryStats, COORD_DIMS};
use crate::error::{contract_err, shape_err, Result};
use crate::numerics::{AttentionMask, Binder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{self, Rng};

use super::config::ModelConfig;
use super::layers::{AttentionP, LayerNormP, MlpP};

/// Where a bank's initial values came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitMeta {
    /// Fingerprint of the statistics (clip count and a hash of the values).
    pub stats_source: String,
    pub seed: u64,
    pub var_floor: f64,
}

/// Learnable queries, one row per (step, coordinate) in step-major order:
/// row `2·i + n` regresses waypoint `(i, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionQueryBank {
    pub queries: Tensor,
    pub horizon: usize,
    pub coord_dims: usize,
    pub d_model: usize,
    pub init_meta: InitMeta,
}

pub fn stats_fingerprint(stats: &TrajectoryStats) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in stats.mean.data().iter().chain(stats.var.data()) {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("stats:{}clips:{h:016x}", stats.count)
}

/// Entry `(i, n, d)` drawn from `Normal(mean[i,n], max(var[i,n], var_floor))`.
pub fn init_action_queries(stats: &TrajectoryStats, d_model: usize, seed: u64, var_floor: f64) -> Result<ActionQueryBank> {
    if !(var_floor > 0.0) {
        return Err(contract_err!("var_floor must be > 0, got {var_floor}"));
    }
    if d_model == 0 {
        return Err(contract_err!("d_model must be >= 1"));
    }
    let (h, n) = stats.mean.require_2d("stats mean")?;
    stats.var.require_shape(&[h, n], "stats var")?;
    if n != COORD_DIMS {
        return Err(shape_err!("stats have {n} coordinates, expected {COORD_DIMS}"));
    }
    let mut rng = rng::substream(seed, "action_queries");
    let mut data = Vec::with_capacity(h * n * d_model);
    for (&m, &v) in stats.mean.data().iter().zip(stats.var.data()) {
        let dist = Normal::new(m, v.max(var_floor).sqrt()).expect("finite stats");
        data.extend((0..d_model).map(|_| dist.sample(&mut rng)));
    }
    Ok(ActionQueryBank {
        queries: Tensor::new(vec![h * n, d_model], data)?,
        horizon: h,
        coord_dims: n,
        d_model,
        init_meta: InitMeta {
            stats_source: stats_fingerprint(stats),
            seed,
            var_floor,
        },
    })
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderBlockP {
    pub ln_sa: LayerNormP,
    pub sa: AttentionP,
    pub ln_ca: LayerNormP,
    pub ln_ctx: LayerNormP,
    pub ca: AttentionP,
    pub ln_mlp: LayerNormP,
    pub mlp: MlpP,
}

#[derive(Clone, Debug)]
pub(crate) struct RefineP {
    pub ln_q: LayerNormP,
    pub ln_ctx: LayerNormP,
    pub ca: AttentionP,
    pub ln_mlp: LayerNormP,
    pub mlp: MlpP,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderP {
    pub queries: ParamId,
    pub blocks: Vec<DecoderBlockP>,
    pub refine: RefineP,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub log_std: ParamId,
}

impl DecoderP {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig, bank: &ActionQueryBank) -> Self {
        let d = cfg.d_model;
        let hidden = d * cfg.mlp_ratio;
        let out_std = (1.0 / d as f64).sqrt() / (2.0 * (cfg.dec_blocks + 1) as f64).sqrt();
        let queries = store.add("dec.queries", bank.queries.clone());
        let blocks = (0..cfg.dec_blocks)
            .map(|i| DecoderBlockP {
                ln_sa: LayerNormP::new(store, &format!("dec.b{i}.ln_sa"), d),
                sa: AttentionP::new(store, rng, &format!("dec.b{i}.sa"), d, cfg.heads, out_std),
                ln_ca: LayerNormP::new(store, &format!("dec.b{i}.ln_ca"), d),
                ln_ctx: LayerNormP::new(store, &format!("dec.b{i}.ln_ctx"), d),
                ca: AttentionP::new(store, rng, &format!("dec.b{i}.ca"), d, cfg.heads, out_std),
                ln_mlp: LayerNormP::new(store, &format!("dec.b{i}.ln_mlp"), d),
                mlp: MlpP::new(store, rng, &format!("dec.b{i}.mlp"), d, hidden, out_std),
            })
            .collect();
        let refine = RefineP {
            ln_q: LayerNormP::new(store, "arm.ln_q", d),
            ln_ctx: LayerNormP::new(store, "arm.ln_ctx", d),
            ca: AttentionP::new(store, rng, "arm.ca", d, cfg.heads, out_std),
            ln_mlp: LayerNormP::new(store, "arm.ln_mlp", d),
            mlp: MlpP::new(store, rng, "arm.mlp", d, hidden, out_std),
        };
        // averaging head: an untrained model reads out each query row's
        // mean, which the bank initialized to the corpus mean
        let head_w = store.add("head.w", Tensor::full(&[d, 1], 1.0 / d as f64));
        let head_b = store.add("head.b", Tensor::zeros(&[1]));
        let log_std = store.add("policy.log_std", Tensor::full(&[cfg.horizon, COORD_DIMS], cfg.log_std_init));
        DecoderP {
            queries,
            blocks,
            refine,
            head_w,
            head_b,
            log_std,
        }
    }
}

/// Masks for one decode invocation.
#[derive(Clone, Debug)]
pub struct DecodeMasks {
    pub self_attn: AttentionMask,
    pub cross_attn: AttentionMask,
}

impl Default for DecodeMasks {
    fn default() -> Self {
        DecodeMasks {
            self_attn: AttentionMask::Bidirectional,
            cross_attn: AttentionMask::Bidirectional,
        }
    }
}

/// Per block: self-attention over the query rows, cross-attention into the
/// normalized context, then the MLP, each as a pre-norm residual branch.
pub(crate) fn decode_on_tape(
    p: &DecoderP,
    cfg: &ModelConfig,
    tape: &mut Tape,
    binder: &mut Binder,
    queries: Var,
    h: Var,
    masks: &DecodeMasks,
) -> Result<Var> {
    let qd = tape.value(queries).require_2d("queries")?.1;
    let hd = tape.value(h).require_2d("context")?.1;
    if qd != cfg.d_model || hd != cfg.d_model {
        return Err(shape_err!(
            "decode: queries width {qd}, context width {hd}, d_model {}",
            cfg.d_model
        ));
    }
    let mut x = queries;
    for b in &p.blocks {
        let n = b.ln_sa.forward(tape, binder, x, cfg.ln_eps)?;
        let a = b.sa.forward(tape, binder, n, n, &masks.self_attn)?;
        x = tape.add(x, a)?;
        let n = b.ln_ca.forward(tape, binder, x, cfg.ln_eps)?;
        let ctx = b.ln_ctx.forward(tape, binder, h, cfg.ln_eps)?;
        let c = b.ca.forward(tape, binder, n, ctx, &masks.cross_attn)?;
        x = tape.add(x, c)?;
        let n = b.ln_mlp.forward(tape, binder, x, cfg.ln_eps)?;
        let m = b.mlp.forward(tape, binder, n)?;
        x = tape.add(x, m)?;
    }
    Ok(x)
}

/// One cross-attention over the stacked intermediate layers and one MLP.
pub(crate) fn refine_on_tape(
    p: &RefineP,
    cfg: &ModelConfig,
    tape: &mut Tape,
    binder: &mut Binder,
    pred_hidden: Var,
    intermediate: &[Var],
) -> Result<Var> {
    if intermediate.is_empty() {
        return Err(contract_err!("refine needs at least one intermediate layer"));
    }
    let ctx = if intermediate.len() == 1 {
        intermediate[0]
    } else {
        tape.concat_rows(intermediate)?
    };
    let ctx = p.ln_ctx.forward(tape, binder, ctx, cfg.ln_eps)?;
    let n = p.ln_q.forward(tape, binder, pred_hidden, cfg.ln_eps)?;
    let c = p.ca.forward(tape, binder, n, ctx, &AttentionMask::Bidirectional)?;
    let x = tape.add(pred_hidden, c)?;
    let n = p.ln_mlp.forward(tape, binder, x, cfg.ln_eps)?;
    let m = p.mlp.forward(tape, binder, n)?;
    tape.add(x, m)
}

/// Linear head per query row, reshaped to `rows/2 × 2`.
pub(crate) fn regress_on_tape(p: &DecoderP, tape: &mut Tape, binder: &mut Binder, refined: Var) -> Result<Var> {
    let rows = tape.value(refined).require_2d("refined")?.0;
    if rows % COORD_DIMS != 0 {
        return Err(shape_err!("regress: {rows} rows is not a multiple of {COORD_DIMS}"));
    }
    let w = binder.bind(tape, p.head_w);
    let b = binder.bind(tape, p.head_b);
    let y = tape.matmul(refined, w)?;
    let y = tape.add_row_bias(y, b)?;
    tape.reshape(y, vec![rows / COORD_DIMS, COORD_DIMS])
}
