//! Context encoder, action-query decoder, refinement module, regression head,
//! and Gaussian policy, bundled as one [`Model`] over a [`ParamStore`].

mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod layers;
mod policy;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use decoder::{init_action_queries, stats_fingerprint, ActionQueryBank, DecodeMasks, InitMeta};
pub use encoder::{infer_maneuver, tokenize, EncoderOutput, SceneTokenSequence, SUMMARY_T, TOKEN_FEATURES};
pub use policy::{
    gaussian_log_density, kl_diag_gaussian, kl_on_tape, log_density_on_tape, policy_sample, policy_sample_with,
    PolicySample, LOG_STD_MAX, LOG_STD_MIN,
};

use crate::data::{TrajectoryStats, UnifiedClip, COORD_DIMS};
use crate::error::{shape_err, Result};
use crate::numerics::{AttentionMask, Binder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng;

use decoder::{decode_on_tape, refine_on_tape, regress_on_tape, DecoderP};
use encoder::{encode_on_tape, EncoderP};
use layers::output_projection_ids;

/// Encoder outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub h: Tensor,
    pub layers: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPrediction {
    /// `H×2` meters, ego frame.
    pub waypoints: Tensor,
    /// `(H·2)×D` query states after refinement.
    pub refined_hidden: Tensor,
}

/// Tape handles of one full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub waypoints: Var,
    pub log_std: Var,
    pub refined: Var,
}

/// Decode invocation counts, shared by clones of a model.
#[derive(Debug, Default)]
pub struct DecodeCounters {
    parallel: AtomicU64,
    autoregressive: AtomicU64,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    enc: EncoderP,
    dec: DecoderP,
    init_meta: InitMeta,
    counters: Arc<DecodeCounters>,
}

impl Model {
    /// Fresh model whose query bank is drawn from `stats`; all randomness
    /// comes from named substreams of `seed`.
    pub fn new(config: ModelConfig, stats: &TrajectoryStats, seed: u64) -> Result<Self> {
        config.validate()?;
        if stats.horizon() != config.horizon {
            return Err(shape_err!(
                "stats horizon {} does not match model horizon {}",
                stats.horizon(),
                config.horizon
            ));
        }
        let bank = init_action_queries(stats, config.d_model, seed, config.var_floor)?;
        Self::with_bank(config, bank, seed)
    }

    pub fn with_bank(config: ModelConfig, bank: ActionQueryBank, seed: u64) -> Result<Self> {
        config.validate()?;
        bank.queries.require_shape(&[config.query_rows(), config.d_model], "action query bank")?;
        let mut rng = rng::substream(seed, "init");
        let mut store = ParamStore::new();
        let enc = EncoderP::new(&mut store, &mut rng, &config);
        let dec = DecoderP::new(&mut store, &mut rng, &config, &bank);
        Ok(Model {
            config,
            store,
            enc,
            dec,
            init_meta: bank.init_meta,
            counters: Arc::new(DecodeCounters::default()),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn init_meta(&self) -> &InitMeta {
        &self.init_meta
    }

    pub fn bank(&self) -> ActionQueryBank {
        ActionQueryBank {
            queries: self.store.get(self.dec.queries).clone(),
            horizon: self.config.horizon,
            coord_dims: COORD_DIMS,
            d_model: self.config.d_model,
            init_meta: self.init_meta.clone(),
        }
    }

    pub fn log_std(&self) -> &Tensor {
        self.store.get(self.dec.log_std)
    }

    pub fn log_std_id(&self) -> ParamId {
        self.dec.log_std
    }

    /// Keeps the policy log-std inside `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn clamp_log_std(&mut self) {
        for v in self.store.get_mut(self.dec.log_std).data_mut() {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    /// Zeroes every attention and MLP output projection, and the regression
    /// weights when `include_head`, leaving residual identities.
    pub fn zero_output_projections(&mut self, include_head: bool) {
        let mut attn = Vec::new();
        let mut mlps = Vec::new();
        for l in &self.enc.layers {
            attn.push(&l.attn);
            mlps.push(&l.mlp);
        }
        for b in &self.dec.blocks {
            attn.push(&b.sa);
            attn.push(&b.ca);
            mlps.push(&b.mlp);
        }
        attn.push(&self.dec.refine.ca);
        mlps.push(&self.dec.refine.mlp);
        let mut ids = output_projection_ids(&attn, &mlps);
        if include_head {
            ids.push(self.dec.head_w);
        }
        for id in ids {
            self.store.get_mut(id).fill(0.0);
        }
    }

    /// Parallel decode invocations so far, across all clones.
    pub fn decode_count(&self) -> u64 {
        self.counters.parallel.load(Ordering::SeqCst)
    }

    pub fn autoregressive_decode_count(&self) -> u64 {
        self.counters.autoregressive.load(Ordering::SeqCst)
    }

    /// Bitwise parameter equality.
    pub fn same_params(&self, other: &Model) -> bool {
        self.config == other.config && self.store.bitwise_eq(&other.store)
    }

    pub fn encode_on_tape(&self, tape: &mut Tape, binder: &mut Binder, tokens: &SceneTokenSequence) -> Result<EncoderOutput> {
        encode_on_tape(&self.enc, &self.config, tape, binder, tokens)
    }

    /// One parallel decode over all `H·2` query rows; counts one invocation.
    pub fn decode_on_tape(&self, tape: &mut Tape, binder: &mut Binder, h: Var, masks: &DecodeMasks) -> Result<Var> {
        let q = binder.bind(tape, self.dec.queries);
        let out = decode_on_tape(&self.dec, &self.config, tape, binder, q, h, masks)?;
        self.counters.parallel.fetch_add(1, Ordering::SeqCst);
        Ok(out)
    }

    pub fn refine_on_tape(&self, tape: &mut Tape, binder: &mut Binder, pred_hidden: Var, intermediate: &[Var]) -> Result<Var> {
        refine_on_tape(&self.dec.refine, &self.config, tape, binder, pred_hidden, intermediate)
    }

    pub fn regress_on_tape(&self, tape: &mut Tape, binder: &mut Binder, refined: Var) -> Result<Var> {
        regress_on_tape(&self.dec, tape, binder, refined)
    }

    fn intermediate(&self, enc: &EncoderOutput) -> Vec<Var> {
        self.config.refine_layers.iter().map(|&i| enc.layers[i]).collect()
    }

    /// encode → decode → refine → regress for one clip.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, clip: &UnifiedClip) -> Result<Forward> {
        let tokens = tokenize(clip);
        let enc = self.encode_on_tape(tape, binder, &tokens)?;
        let z = self.decode_on_tape(tape, binder, enc.h, &DecodeMasks::default())?;
        let inter = self.intermediate(&enc);
        let refined = self.refine_on_tape(tape, binder, z, &inter)?;
        let waypoints = self.regress_on_tape(tape, binder, refined)?;
        let log_std = binder.bind(tape, self.dec.log_std);
        Ok(Forward {
            waypoints,
            log_std,
            refined,
        })
    }

    pub fn predict(&self, clip: &UnifiedClip) -> Result<TrajectoryPrediction> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, false);
        let f = self.forward(&mut tape, &mut binder, clip)?;
        Ok(TrajectoryPrediction {
            waypoints: tape.value(f.waypoints).clone(),
            refined_hidden: tape.value(f.refined).clone(),
        })
    }

    pub fn encode(&self, tokens: &SceneTokenSequence) -> Result<HiddenStates> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, false);
        let enc = self.encode_on_tape(&mut tape, &mut binder, tokens)?;
        Ok(HiddenStates {
            h: tape.value(enc.h).clone(),
            layers: enc.layers.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Decoder stack only, from given hidden states; returns `(H·2)×D`.
    pub fn decode(&self, hidden: &HiddenStates) -> Result<Tensor> {
        self.decode_masked(hidden, &DecodeMasks::default())
    }

    pub fn decode_masked(&self, hidden: &HiddenStates, masks: &DecodeMasks) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, false);
        let h = tape.leaf(hidden.h.clone(), false);
        let z = self.decode_on_tape(&mut tape, &mut binder, h, masks)?;
        Ok(tape.value(z).clone())
    }

    pub fn refine(&self, pred_hidden: &Tensor, intermediate: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, false);
        let z = tape.leaf(pred_hidden.clone(), false);
        let inter: Vec<Var> = intermediate.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let r = self.refine_on_tape(&mut tape, &mut binder, z, &inter)?;
        Ok(tape.value(r).clone())
    }

    pub fn regress(&self, refined: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, false);
        let r = tape.leaf(refined.clone(), false);
        let w = self.regress_on_tape(&mut tape, &mut binder, r)?;
        Ok(tape.value(w).clone())
    }

    /// Intermediate layers selected for refinement, as tensors.
    pub fn select_intermediate(&self, hidden: &HiddenStates) -> Vec<Tensor> {
        self.config.refine_layers.iter().map(|&i| hidden.layers[i].clone()).collect()
    }

    /// Token-by-token baseline with the same parameters: scalar `k` comes
    /// from a causal decode over query rows `0..=k`, so each clip costs
    /// `H·2` decoder invocations over growing prefixes.
    pub fn predict_autoregressive(&self, clip: &UnifiedClip) -> Result<Tensor> {
        let hidden = self.encode(&tokenize(clip))?;
        self.decode_autoregressive(&hidden)
    }

    pub fn decode_autoregressive(&self, hidden: &HiddenStates) -> Result<Tensor> {
        let rows = self.config.query_rows();
        let inter = self.select_intermediate(hidden);
        let mut out = Vec::with_capacity(rows);
        for k in 0..rows {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.store, false);
            let h = tape.leaf(hidden.h.clone(), false);
            let q = binder.bind(&mut tape, self.dec.queries);
            let prefix = tape.slice_rows(q, 0, k + 1)?;
            let masks = DecodeMasks {
                self_attn: AttentionMask::Causal,
                cross_attn: AttentionMask::Bidirectional,
            };
            let z = decode_on_tape(&self.dec, &self.config, &mut tape, &mut binder, prefix, h, &masks)?;
            self.counters.autoregressive.fetch_add(1, Ordering::SeqCst);
            let last = tape.slice_rows(z, k, 1)?;
            let iv: Vec<Var> = inter.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let r = self.refine_on_tape(&mut tape, &mut binder, last, &iv)?;
            let w = binder.bind(&mut tape, self.dec.head_w);
            let b = binder.bind(&mut tape, self.dec.head_b);
            let y = tape.matmul(r, w)?;
            let y = tape.add_row_bias(y, b)?;
            out.push(tape.value(y).item());
        }
        Tensor::new(vec![self.config.horizon, COORD_DIMS], out)
    }

    /// Full-sequence decode with a causal self-attention mask; row `k`
    /// equals the autoregressive baseline's `k`-th scalar.
    pub fn predict_causal(&self, hidden: &HiddenStates) -> Result<Tensor> {
        let masks = DecodeMasks {
            self_attn: AttentionMask::Causal,
            cross_attn: AttentionMask::Bidirectional,
        };
        let z = self.decode_masked(hidden, &masks)?;
        let r = self.refine(&z, &self.select_intermediate(hidden))?;
        self.regress(&r)
    }
}
