//! Ego-history tokenizer and pre-norm transformer encoder.

use crate::data::{ManeuverKind, UnifiedClip};
use crate::error::{shape_err, Result};
use crate::numerics::{AttentionMask, Binder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

use super::config::ModelConfig;
use super::layers::{normal_tensor, AttentionP, LayerNormP, MlpP};

const TIME_FREQS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Time offset of the summary token, one step past the present.
pub const SUMMARY_T: f64 = 0.5;
/// Raw feature width of one token.
pub const TOKEN_FEATURES: usize = 7 + 2 * TIME_FREQS.len() + 5 + 1;

/// `L×F` token matrix: one row per history state, then the summary row.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTokenSequence {
    pub tokens: Tensor,
}

impl SceneTokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Maneuver implied by the current state: lateral acceleration marks a
/// turn, strong longitudinal acceleration a stop or speed-up.
pub fn infer_maneuver(clip: &UnifiedClip) -> ManeuverKind {
    let a = clip.current_state().acceleration;
    if a[1] > 0.1 {
        ManeuverKind::LeftTurn
    } else if a[1] < -0.1 {
        ManeuverKind::RightTurn
    } else if a[0] < -0.5 {
        ManeuverKind::Stop
    } else if a[0] > 0.3 {
        ManeuverKind::Accelerate
    } else {
        ManeuverKind::Straight
    }
}

fn time_row(t: f64, row: &mut [f64]) {
    row[6] = t / 3.0;
    for (k, w) in TIME_FREQS.iter().enumerate() {
        row[7 + 2 * k] = (w * t).sin();
        row[8 + 2 * k] = (w * t).cos();
    }
}

/// Scaled state features, sinusoidal time encodings, maneuver one-hot, and
/// a summary flag.
pub fn tokenize(clip: &UnifiedClip) -> SceneTokenSequence {
    let f = TOKEN_FEATURES;
    let l = clip.history.len() + 1;
    let mut data = vec![0.0; l * f];
    let tag = 15 + infer_maneuver(clip).index();
    for (i, s) in clip.history.iter().enumerate() {
        let row = &mut data[i * f..(i + 1) * f];
        row[0] = s.position[0] / 10.0;
        row[1] = s.position[1] / 10.0;
        row[2] = s.velocity[0] / 10.0;
        row[3] = s.velocity[1] / 10.0;
        row[4] = s.acceleration[0] / 2.0;
        row[5] = s.acceleration[1] / 2.0;
        time_row(s.t_offset, row);
        row[tag] = 1.0;
    }
    let row = &mut data[(l - 1) * f..];
    time_row(SUMMARY_T, row);
    row[tag] = 1.0;
    row[f - 1] = 1.0;
    SceneTokenSequence {
        tokens: Tensor::new(vec![l, f], data).expect("finite validated clip"),
    }
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayerP {
    pub ln1: LayerNormP,
    pub attn: AttentionP,
    pub ln2: LayerNormP,
    pub mlp: MlpP,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderP {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub summary: ParamId,
    pub layers: Vec<EncoderLayerP>,
}

impl EncoderP {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let out_std = (1.0 / d as f64).sqrt() / (2.0 * cfg.enc_layers as f64).sqrt();
        let embed_w = store.add(
            "enc.embed.w",
            normal_tensor(rng, &[TOKEN_FEATURES, d], (1.0 / TOKEN_FEATURES as f64).sqrt()),
        );
        let embed_b = store.add("enc.embed.b", Tensor::zeros(&[d]));
        let summary = store.add("enc.summary", normal_tensor(rng, &[1, d], 0.5));
        let layers = (0..cfg.enc_layers)
            .map(|i| EncoderLayerP {
                ln1: LayerNormP::new(store, &format!("enc.l{i}.ln1"), d),
                attn: AttentionP::new(store, rng, &format!("enc.l{i}.attn"), d, cfg.heads, out_std),
                ln2: LayerNormP::new(store, &format!("enc.l{i}.ln2"), d),
                mlp: MlpP::new(store, rng, &format!("enc.l{i}.mlp"), d, d * cfg.mlp_ratio, out_std),
            })
            .collect();
        EncoderP {
            embed_w,
            embed_b,
            summary,
            layers,
        }
    }
}

/// Final hidden states plus every layer's output, all `L×D`.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub h: Var,
    pub layers: Vec<Var>,
}

pub(crate) fn encode_on_tape(
    p: &EncoderP,
    cfg: &ModelConfig,
    tape: &mut Tape,
    binder: &mut Binder,
    tokens: &SceneTokenSequence,
) -> Result<EncoderOutput> {
    let (l, f) = tokens.tokens.rows_cols();
    if f != TOKEN_FEATURES || l < 2 {
        return Err(shape_err!(
            "token matrix is {l}x{f}, expected Lx{TOKEN_FEATURES} with L >= 2"
        ));
    }
    let d = cfg.d_model;
    let x = tape.leaf(tokens.tokens.clone(), false);
    let w = binder.bind(tape, p.embed_w);
    let b = binder.bind(tape, p.embed_b);
    let e = tape.matmul(x, w)?;
    let e = tape.add_row_bias(e, b)?;
    let pad = tape.leaf(Tensor::zeros(&[l - 1, d]), false);
    let s = binder.bind(tape, p.summary);
    let s = tape.concat_rows(&[pad, s])?;
    let mut x = tape.add(e, s)?;

    let mut layers = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let n = layer.ln1.forward(tape, binder, x, cfg.ln_eps)?;
        let a = layer.attn.forward(tape, binder, n, n, &AttentionMask::Bidirectional)?;
        x = tape.add(x, a)?;
        let n = layer.ln2.forward(tape, binder, x, cfg.ln_eps)?;
        let m = layer.mlp.forward(tape, binder, n)?;
        x = tape.add(x, m)?;
        layers.push(x);
    }
    Ok(EncoderOutput { h: x, layers })
}
