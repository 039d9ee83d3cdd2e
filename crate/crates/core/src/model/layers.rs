//! Parameter groups and their tape forward passes.

use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{AttentionMask, Binder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

pub(crate) fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("finite init")
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNormP {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNormP {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNormP {
            g: store.add(format!("{name}.g"), Tensor::ones(&[d])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var, eps: f64) -> Result<Var> {
        let g = binder.bind(tape, self.g);
        let b = binder.bind(tape, self.b);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Multi-head attention with an output bias; the output projection starts
/// at `out_std` (zero gives an exact residual identity).
#[derive(Clone, Debug)]
pub(crate) struct AttentionP {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
}

impl AttentionP {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, heads: usize, out_std: f64) -> Self {
        let std = (1.0 / d as f64).sqrt();
        AttentionP {
            wq: store.add(format!("{name}.wq"), normal_tensor(rng, &[d, d], std)),
            wk: store.add(format!("{name}.wk"), normal_tensor(rng, &[d, d], std)),
            wv: store.add(format!("{name}.wv"), normal_tensor(rng, &[d, d], std)),
            wo: store.add(format!("{name}.wo"), normal_tensor(rng, &[d, d], out_std)),
            bo: store.add(format!("{name}.bo"), Tensor::zeros(&[d])),
            heads,
        }
    }

    /// Keys and values projected from `ctx`; reusable across query sets.
    pub fn project_kv(&self, tape: &mut Tape, binder: &mut Binder, ctx: Var) -> Result<(Var, Var)> {
        let wk = binder.bind(tape, self.wk);
        let wv = binder.bind(tape, self.wv);
        Ok((tape.matmul(ctx, wk)?, tape.matmul(ctx, wv)?))
    }

    pub fn forward_kv(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        kv: (Var, Var),
        mask: &AttentionMask,
    ) -> Result<Var> {
        let wq = binder.bind(tape, self.wq);
        let q = tape.matmul(x, wq)?;
        let (k, v) = kv;
        let d = tape.value(q).shape()[1];
        let hd = d / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            outs.push(tape.scaled_dot_attention(qh, kh, vh, mask)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let wo = binder.bind(tape, self.wo);
        let bo = binder.bind(tape, self.bo);
        let o = tape.matmul(cat, wo)?;
        tape.add_row_bias(o, bo)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        ctx: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let kv = self.project_kv(tape, binder, ctx)?;
        self.forward_kv(tape, binder, x, kv, mask)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub(crate) struct MlpP {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpP {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, hidden: usize, out_std: f64) -> Self {
        MlpP {
            w1: store.add(format!("{name}.w1"), normal_tensor(rng, &[d, hidden], (1.0 / d as f64).sqrt())),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(format!("{name}.w2"), normal_tensor(rng, &[hidden, d], out_std)),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let w1 = binder.bind(tape, self.w1);
        let b1 = binder.bind(tape, self.b1);
        let w2 = binder.bind(tape, self.w2);
        let b2 = binder.bind(tape, self.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, w2)?;
        tape.add_row_bias(o, b2)
    }
}

/// Ids of every output projection (attention `wo`/`bo`, MLP `w2`/`b2`).
pub(crate) fn output_projection_ids(attn: &[&AttentionP], mlps: &[&MlpP]) -> Vec<ParamId> {
    attn.iter()
        .flat_map(|a| [a.wo, a.bo])
        .chain(mlps.iter().flat_map(|m| [m.w2, m.b2]))
        .collect()
}
