//! Diagonal-Gaussian trajectory policy around the regressed mean.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract_err, shape_err, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{self, Rng};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// One sampled trajectory and its log-density under the sampling policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    pub trajectory: Tensor,
    pub log_density: f64,
}

fn check_policy(mean: &Tensor, log_std: &Tensor) -> Result<()> {
    if mean.shape() != log_std.shape() {
        return Err(shape_err!(
            "policy mean {:?} vs log_std {:?}",
            mean.shape(),
            log_std.shape()
        ));
    }
    if let Some(v) = log_std.data().iter().find(|v| !(LOG_STD_MIN..=LOG_STD_MAX).contains(*v)) {
        return Err(contract_err!("log_std {v} outside [{LOG_STD_MIN}, {LOG_STD_MAX}]"));
    }
    Ok(())
}

/// Exact diagonal-Gaussian log-pdf.
pub fn gaussian_log_density(x: &Tensor, mean: &Tensor, log_std: &Tensor) -> Result<f64> {
    if x.shape() != mean.shape() || mean.shape() != log_std.shape() {
        return Err(shape_err!("log-density shapes {:?} {:?} {:?}", x.shape(), mean.shape(), log_std.shape()));
    }
    let mut acc = -0.5 * x.numel() as f64 * (2.0 * PI).ln();
    for ((&xi, &mi), &ls) in x.data().iter().zip(mean.data()).zip(log_std.data()) {
        let z = (xi - mi) * (-ls).exp();
        acc -= 0.5 * z * z + ls;
    }
    Ok(acc)
}

/// `G` draws of `mean + exp(log_std)·ε`.
pub fn policy_sample(mean: &Tensor, log_std: &Tensor, group_size: usize, seed: u64) -> Result<Vec<PolicySample>> {
    policy_sample_with(mean, log_std, group_size, &mut rng::substream(seed, "policy"))
}

pub fn policy_sample_with(mean: &Tensor, log_std: &Tensor, group_size: usize, rng: &mut Rng) -> Result<Vec<PolicySample>> {
    if group_size < 2 {
        return Err(contract_err!("group size must be >= 2, got {group_size}"));
    }
    check_policy(mean, log_std)?;
    (0..group_size)
        .map(|_| {
            let data = mean
                .data()
                .iter()
                .zip(log_std.data())
                .map(|(&m, &ls)| {
                    let e: f64 = StandardNormal.sample(rng);
                    m + ls.exp() * e
                })
                .collect();
            let trajectory = Tensor::new(mean.shape().to_vec(), data)?;
            let log_density = gaussian_log_density(&trajectory, mean, log_std)?;
            Ok(PolicySample {
                trajectory,
                log_density,
            })
        })
        .collect()
}

/// Closed-form `KL(p ‖ q)` between diagonal Gaussians.
pub fn kl_diag_gaussian(mean_p: &Tensor, log_std_p: &Tensor, mean_q: &Tensor, log_std_q: &Tensor) -> Result<f64> {
    for t in [log_std_p, mean_q, log_std_q] {
        if t.shape() != mean_p.shape() {
            return Err(shape_err!("kl shapes differ: {:?} vs {:?}", t.shape(), mean_p.shape()));
        }
    }
    let mut kl = 0.0;
    for i in 0..mean_p.numel() {
        let (mp, lp) = (mean_p.data()[i], log_std_p.data()[i]);
        let (mq, lq) = (mean_q.data()[i], log_std_q.data()[i]);
        let var_ratio = (2.0 * (lp - lq)).exp();
        let d = (mp - mq) * (-lq).exp();
        kl += lq - lp + 0.5 * (var_ratio + d * d) - 0.5;
    }
    Ok(kl)
}

/// Log-density of a fixed sample as a differentiable function of the
/// policy's mean and log-std.
pub fn log_density_on_tape(tape: &mut Tape, x: &Tensor, mean: Var, log_std: Var) -> Result<Var> {
    let k = x.numel() as f64;
    let xv = tape.leaf(x.clone(), false);
    let diff = tape.sub(xv, mean)?;
    let sq = tape.square(diff)?;
    let neg2 = tape.scale(log_std, -2.0)?;
    let inv_var = tape.exp(neg2)?;
    let z2 = tape.mul(sq, inv_var)?;
    let quad = tape.sum(z2)?;
    let quad = tape.scale(quad, -0.5)?;
    let ls = tape.sum(log_std)?;
    let out = tape.sub(quad, ls)?;
    tape.add_scalar(out, -0.5 * k * (2.0 * PI).ln())
}

/// `KL(p ‖ q)` with `p` on the tape and `q` a constant reference.
pub fn kl_on_tape(tape: &mut Tape, mean_p: Var, log_std_p: Var, mean_q: &Tensor, log_std_q: &Tensor) -> Result<Var> {
    let mq = tape.leaf(mean_q.clone(), false);
    let lq = tape.leaf(log_std_q.clone(), false);
    // lq - lp + ½ e^{2(lp-lq)} + ½ (mp-mq)² e^{-2lq} - ½
    let dl = tape.sub(log_std_p, lq)?;
    let two_dl = tape.scale(dl, 2.0)?;
    let ratio = tape.exp(two_dl)?;
    let dm = tape.sub(mean_p, mq)?;
    let dm2 = tape.square(dm)?;
    let inv_q = tape.leaf(
        Tensor::new(
            log_std_q.shape().to_vec(),
            log_std_q.data().iter().map(|l| (-2.0 * l).exp()).collect(),
        )?,
        false,
    );
    let maha = tape.mul(dm2, inv_q)?;
    let half = tape.add(ratio, maha)?;
    let half = tape.scale(half, 0.5)?;
    let terms = tape.sub(half, dl)?;
    let s = tape.sum(terms)?;
    tape.add_scalar(s, -0.5 * mean_q.numel() as f64)
}
