//! Tanh-squashed Gaussian policies conditioned on `(s, z)`, the closed-form
//! KL between their pre-squash Gaussians, and the KL-regularized actor loss
//! with a dual-ascent multiplier.

use std::f64::consts::{LN_2, PI};

use ndgrad::{Activation, Adam, AdamConfig, BoundMlp, Mlp, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sf_critic::{concat, gather, ACTION_DIM, STATE_DIM};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Largest magnitude of a dataset action before inverting the squash.
pub const ACTION_CLIP: f64 = 1.0 - 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
}

pub struct BoundPolicy {
    pub net: BoundMlp,
}

impl GaussianPolicy {
    pub fn new(latent_dim: usize, hidden: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![STATE_DIM + latent_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * ACTION_DIM);
        let mut net = Mlp::new(&sizes, activation, rng);
        net.scale_output_layer(0.1);
        Self { net }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundPolicy {
        BoundPolicy {
            net: self.net.bind(tape, trainable),
        }
    }

    /// Pre-squash `(mean, log_std)`, each `[n, ACTION_DIM]`.
    pub fn distribution(&self, s: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.net.forward(&concat(&[s, z]))?;
        let n = out.rows();
        let mut mean = Vec::with_capacity(n * ACTION_DIM);
        let mut log_std = Vec::with_capacity(n * ACTION_DIM);
        for i in 0..n {
            let row = out.row_slice(i);
            mean.extend_from_slice(&row[..ACTION_DIM]);
            log_std.extend(row[ACTION_DIM..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)));
        }
        Ok((
            Tensor::matrix(n, ACTION_DIM, mean)?,
            Tensor::matrix(n, ACTION_DIM, log_std)?,
        ))
    }

    /// `tanh(mean)`.
    pub fn deterministic_action(&self, s: &[f64], z: &[f64]) -> Result<[f64; ACTION_DIM]> {
        let (mean, _) = self.distribution(&Tensor::row(s), &Tensor::row(z))?;
        Ok([mean.data()[0].tanh(), mean.data()[1].tanh()])
    }

    /// Reparameterized draw with its log-density (tanh correction included).
    pub fn sample_action(
        &self,
        s: &[f64],
        z: &[f64],
        rng: &mut impl Rng,
    ) -> Result<([f64; ACTION_DIM], f64)> {
        let (mean, log_std) = self.distribution(&Tensor::row(s), &Tensor::row(z))?;
        let mut action = [0.0; ACTION_DIM];
        let mut log_prob = 0.0;
        for ((a, m), ls) in action.iter_mut().zip(mean.data()).zip(log_std.data()) {
            let eps: f64 = rng.sample(StandardNormal);
            let u = m + ls.exp() * eps;
            *a = u.tanh();
            log_prob += gaussian_log_prob(eps, *ls) - log_one_minus_tanh_sq(u);
        }
        Ok((action, log_prob))
    }

    /// Batched actions for target computation, `[n, ACTION_DIM]`.
    pub fn sample_actions(&self, s: &Tensor, z: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        let (mean, log_std) = self.distribution(s, z)?;
        let data = mean
            .data()
            .iter()
            .zip(log_std.data())
            .map(|(m, ls)| (m + ls.exp() * rng.sample::<f64, _>(StandardNormal)).tanh())
            .collect();
        Ok(Tensor::matrix(mean.rows(), ACTION_DIM, data)?)
    }
}

fn gaussian_log_prob(eps: f64, log_std: f64) -> f64 {
    -0.5 * eps * eps - log_std - 0.5 * (2.0 * PI).ln()
}

/// `log(1 − tanh(u)²)` without cancellation.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let x = -2.0 * u;
    let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
    2.0 * (LN_2 - u - softplus)
}

/// Density of a squashed action `a = tanh(u)` under `N(mean, exp(log_std)²)`.
pub fn squashed_log_density(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let u = a.atanh();
            gaussian_log_prob((u - m) / ls.exp(), *ls) - log_one_minus_tanh_sq(u)
        })
        .sum()
}

impl BoundPolicy {
    pub fn distribution(&self, tape: &mut Tape, s: Var, z_rows: Var) -> Result<(Var, Var)> {
        let x = tape.concat_cols(&[s, z_rows]);
        let out = self.net.forward(tape, x)?;
        let mean = tape.slice_cols(out, 0, ACTION_DIM);
        let raw = tape.slice_cols(out, ACTION_DIM, 2 * ACTION_DIM);
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok((mean, log_std))
    }

    /// `tanh(mean + exp(log_std)·eps)`.
    pub fn rsample(&self, tape: &mut Tape, mean: Var, log_std: Var, eps: &Tensor) -> Var {
        let std = tape.exp(log_std);
        let e = tape.constant(eps.clone());
        let noise = tape.mul(std, e);
        let u = tape.add(mean, noise);
        tape.tanh(u)
    }
}

/// `KL(N(mp, sp²) ‖ N(mq, sq²))` summed over action dimensions, `[n, 1]`.
pub fn gaussian_kl(tape: &mut Tape, mp: Var, lsp: Var, mq: Var, lsq: Var) -> Var {
    let log_ratio = tape.sub(lsq, lsp);
    let two_lsp = tape.scale(lsp, 2.0);
    let var_p = tape.exp(two_lsp);
    let diff = tape.sub(mp, mq);
    let diff2 = tape.square(diff);
    let num = tape.add(var_p, diff2);
    let neg_two_lsq = tape.scale(lsq, -2.0);
    let inv_var_q = tape.exp(neg_two_lsq);
    let ratio = tape.mul(num, inv_var_q);
    let ratio = tape.scale(ratio, 0.5);
    let per_dim = tape.add(log_ratio, ratio);
    let per_dim = tape.add_scalar(per_dim, -0.5);
    tape.sum_cols(per_dim)
}

pub fn gaussian_kl_value(mp: &[f64], lsp: &[f64], mq: &[f64], lsq: &[f64]) -> f64 {
    (0..mp.len())
        .map(|k| {
            let (vp, vq) = ((2.0 * lsp[k]).exp(), (2.0 * lsq[k]).exp());
            lsq[k] - lsp[k] + (vp + (mp[k] - mq[k]).powi(2)) / (2.0 * vq) - 0.5
        })
        .sum()
}

/// `−mean(Q̃(s, ã)) + ρ₁·mean(KL)`.
pub fn policy_loss(tape: &mut Tape, q: Var, kl: Var, rho1: f64) -> Var {
    let mq = tape.mean(q);
    let mk = tape.mean(kl);
    let reg = tape.scale(mk, rho1);
    tape.sub(reg, mq)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualVariable {
    pub log_rho1: f64,
    pub target_kl: f64,
    pub lr: f64,
}

impl Default for DualVariable {
    fn default() -> Self {
        Self {
            log_rho1: 0.0,
            target_kl: 0.5,
            lr: 1e-3,
        }
    }
}

impl DualVariable {
    pub fn rho1(&self) -> f64 {
        self.log_rho1.exp()
    }

    /// `log ρ₁ ← log ρ₁ + lr·(KL − ε_KL)`.
    pub fn update(&mut self, kl: f64) {
        self.log_rho1 += self.lr * (kl - self.target_kl);
    }
}

/// Pre-squash targets for behavior cloning: `atanh(clip(a))`.
pub fn unsquash(actions: &Tensor) -> Tensor {
    actions.map(|a| a.clamp(-ACTION_CLIP, ACTION_CLIP).atanh())
}

/// Mean negative log-likelihood of pre-squash actions `u` (constant dropped).
pub fn behavior_nll(tape: &mut Tape, mean: Var, log_std: Var, u: &Tensor) -> Var {
    let target = tape.constant(u.clone());
    let diff = tape.sub(target, mean);
    let neg = tape.neg(log_std);
    let inv_std = tape.exp(neg);
    let e = tape.mul(diff, inv_std);
    let e2 = tape.square(e);
    let e2 = tape.scale(e2, 0.5);
    let per = tape.add(e2, log_std);
    let per = tape.sum_cols(per);
    tape.mean(per)
}

/// One maximum-likelihood step of `policy` on `(s, z, a)` rows. `z` is used as
/// given (callers pass a detached latent).
pub fn behavior_step(
    policy: &mut GaussianPolicy,
    opt: &mut Adam,
    s: &Tensor,
    z: &Tensor,
    a: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape, true);
    let sv = tape.constant(s.clone());
    let zv = tape.constant(z.clone());
    let (mean, log_std) = bound.distribution(&mut tape, sv, zv)?;
    let loss = behavior_nll(&mut tape, mean, log_std, &unsquash(a));
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    opt.step(policy.net.params_mut(), &bound.net.grads(&grads))?;
    Ok(value)
}

/// Fit a behavior policy by minibatch maximum likelihood.
#[allow(clippy::too_many_arguments)]
pub fn fit_behavior_policy(
    policy: &mut GaussianPolicy,
    s: &Tensor,
    z: &Tensor,
    a: &Tensor,
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let n = s.rows();
    if n == 0 || a.rows() != n || z.rows() != n {
        return Err(Error::Contract("behavior fit needs equally many non-empty rows".into()));
    }
    let mut opt = Adam::new(AdamConfig::with_lr(lr), &policy.net.params());
    let mut last = f64::NAN;
    for _ in 0..steps {
        let idx = sample(rng, n, batch.min(n)).into_vec();
        last = behavior_step(policy, &mut opt, &gather(s, &idx), &gather(z, &idx), &gather(a, &idx))?;
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_shift_kl() {
        assert!((gaussian_kl_value(&[1.0], &[0.0], &[0.0], &[0.0]) - 0.5).abs() < 1e-15);
        let mut tape = Tape::new();
        let m1 = tape.constant(Tensor::row(&[1.0]));
        let m0 = tape.constant(Tensor::row(&[0.0]));
        let s = tape.constant(Tensor::row(&[0.0]));
        let kl = gaussian_kl(&mut tape, m1, s, m0, s);
        assert!((tape.value(kl).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_policies_leave_only_the_value_term() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::row(&[0.3, -0.2]));
        let s = tape.constant(Tensor::row(&[-1.0, 0.5]));
        let kl = gaussian_kl(&mut tape, m, s, m, s);
        assert_eq!(tape.value(kl).item(), 0.0);
        let q = tape.constant(Tensor::matrix(2, 1, vec![3.0, 5.0]).unwrap());
        let kl2 = tape.constant(Tensor::zeros(&[2, 1]));
        let l = policy_loss(&mut tape, q, kl2, 2.5);
        assert_eq!(tape.value(l).item(), -4.0);
    }

    #[test]
    fn tiny_std_gives_tanh_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = GaussianPolicy::new(2, &[8], Activation::Tanh, &mut rng);
        let last = p.net.params().len() - 1;
        // Output bias: mean (0.4, -0.7), log-std at the lower clamp.
        let params = p.net.params_mut();
        let bias = params.into_iter().nth(last).unwrap();
        bias.data_mut().copy_from_slice(&[0.4, -0.7, -50.0, -50.0]);
        let w = p.net.params_mut().into_iter().nth(last - 1).unwrap();
        w.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let (a, _) = p.sample_action(&[0.1, 0.2], &[0.0, 0.0], &mut rng).unwrap();
        assert!((a[0] - 0.4f64.tanh()).abs() < 1e-2);
        assert_eq!(p.deterministic_action(&[0.1, 0.2], &[0.0, 0.0]).unwrap(), [0.4f64.tanh(), (-0.7f64).tanh()]);
    }

    #[test]
    fn stable_log_one_minus_tanh_sq() {
        for u in [-30.0, -3.0, 0.0, 0.5, 4.0, 25.0] {
            let direct = (1.0 - f64::tanh(u).powi(2)).ln();
            if direct.is_finite() && u.abs() < 10.0 {
                assert!((log_one_minus_tanh_sq(u) - direct).abs() < 1e-10);
            }
            assert!(log_one_minus_tanh_sq(u).is_finite());
        }
    }

    #[test]
    fn dual_moves_toward_target() {
        let mut d = DualVariable::default();
        let start = d.rho1();
        d.update(0.9);
        assert!(d.rho1() > start);
        let mid = d.rho1();
        d.update(0.1);
        assert!(d.rho1() < mid);
    }
}
