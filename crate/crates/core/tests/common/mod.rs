//! Checks shared by the property tests and the acceptance target. Each
//! finite-difference check draws fresh networks and data per point and
//! reports the worst error ratio (<= 1 passes).

#![allow(dead_code)]

use ndgrad::gradcheck::{numeric_gradient, worst_ratio};
use ndgrad::{Activation, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sfmeta::policy::{gaussian_kl, policy_loss, GaussianPolicy};
use sfmeta::sf_critic::{
    corrected_q, psi_loss, reward_loss, rowwise_dot, FeatureCritic, TdLoss,
};
use sfmeta::task_inference::{
    bellman_log_likelihood, draw_eps, elbo, encoder_loss, kl_estimate, sample_latent,
    gaussian_log_density, ContextEncoder, FlowChain,
};

pub const REL_TOL: f64 = 1e-4;
/// Floor for gradients that are zero up to roundoff.
pub const ABS_TOL: f64 = 1e-8;
pub const FD_STEP: f64 = 1e-6;

const LATENT: usize = 2;
const FEATURES: usize = 3;
const HIDDEN: [usize; 2] = [6, 6];
const ROWS: usize = 6;

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn actions(rows: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * 2).map(|_| rng.random_range(-0.9..0.9)).collect();
    Tensor::matrix(rows, 2, data).unwrap()
}

fn load(dst: Vec<&mut Tensor>, src: &[Tensor]) {
    assert_eq!(dst.len(), src.len());
    for (d, s) in dst.into_iter().zip(src) {
        d.data_mut().copy_from_slice(s.data());
    }
}

fn owned(params: Vec<&Tensor>) -> Vec<Tensor> {
    params.into_iter().cloned().collect()
}

fn compare(params: &[Tensor], f: impl Fn(&[Tensor]) -> (f64, Vec<Tensor>)) -> f64 {
    let (_, analytic) = f(params);
    let numeric = numeric_gradient(params, FD_STEP, |p| f(p).0);
    worst_ratio(&analytic, &numeric, REL_TOL, ABS_TOL)
}

struct Batch {
    s: Tensor,
    a: Tensor,
    s_next: Tensor,
    r: Tensor,
    z: Tensor,
}

fn batch(rng: &mut impl Rng) -> Batch {
    Batch {
        s: gaussian(ROWS, 2, 0.7, rng),
        a: actions(ROWS, rng),
        s_next: gaussian(ROWS, 2, 0.7, rng),
        r: gaussian(ROWS, 1, 0.5, rng),
        z: gaussian(ROWS, LATENT, 1.0, rng),
    }
}

fn critic(rng: &mut impl Rng) -> FeatureCritic {
    FeatureCritic::new(LATENT, FEATURES, &HIDDEN, Activation::Tanh, 2, rng)
}

/// Reward regression through the feature and weight networks.
pub fn reward_point(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fc = critic(&mut rng);
    let b = batch(&mut rng);
    let mut params = owned(fc.phi.params());
    params.extend(owned(fc.w.params()));
    compare(&params, |p| {
        let mut net = fc.clone();
        let mut dst = net.phi.params_mut();
        dst.extend(net.w.params_mut());
        load(dst, p);
        let mut tape = Tape::new();
        let bc = net.bind(&mut tape, true, false);
        let [s, a, sn, r, z] = [&b.s, &b.a, &b.s_next, &b.r, &b.z].map(|t| tape.constant(t.clone()));
        let phi = bc.features(&mut tape, s, a, sn, z).unwrap();
        let w = bc.weights(&mut tape, z).unwrap();
        let pred = rowwise_dot(&mut tape, phi, w);
        let loss = reward_loss(&mut tape, pred, r);
        let g = tape.backward(loss).unwrap();
        let (mut gp, gw) = bc.phi_w_grads(&g);
        gp.extend(gw);
        (tape.value(loss).item(), gp)
    })
}

/// Successor-feature TD loss over both critics. Targets are spread wide
/// enough that the Huber penalty exercises both of its branches.
pub fn psi_point(seed: u64, loss: TdLoss) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fc = critic(&mut rng);
    let b = batch(&mut rng);
    let targets = gaussian(ROWS, FEATURES, 1.5, &mut rng);
    let params: Vec<Tensor> = fc.psi.iter().flat_map(|n| owned(n.params())).collect();
    compare(&params, |p| {
        let mut net = fc.clone();
        load(net.psi.iter_mut().flat_map(|n| n.params_mut()).collect(), p);
        let mut tape = Tape::new();
        let bc = net.bind(&mut tape, false, true);
        let [s, a, z] = [&b.s, &b.a, &b.z].map(|t| tape.constant(t.clone()));
        let psis = bc.psi(&mut tape, s, a, z).unwrap();
        let mut total = psi_loss(&mut tape, psis[0], &targets, loss).unwrap();
        for &psi in &psis[1..] {
            let l = psi_loss(&mut tape, psi, &targets, loss).unwrap();
            total = tape.add(total, l);
        }
        let g = tape.backward(total).unwrap();
        let grads = bc.psi.iter().flat_map(|n| n.grads(&g)).collect();
        (tape.value(total).item(), grads)
    })
}

/// KL-regularized actor loss against a fixed critic and behavior policy.
pub fn policy_point(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fc = critic(&mut rng);
    let pol = GaussianPolicy::new(LATENT, &HIDDEN, Activation::Tanh, &mut rng);
    let b = batch(&mut rng);
    let eps = gaussian(ROWS, 2, 1.0, &mut rng);
    let beta_mean = gaussian(ROWS, 2, 0.5, &mut rng);
    let beta_log_std = gaussian(ROWS, 2, 0.3, &mut rng);
    let rho1 = rng.random_range(0.1..2.0);
    let params = owned(pol.net.params());
    compare(&params, |p| {
        let mut net = pol.clone();
        load(net.net.params_mut(), p);
        let mut tape = Tape::new();
        let bp = net.bind(&mut tape, true);
        let bc = fc.bind(&mut tape, false, false);
        let [s, z] = [&b.s, &b.z].map(|t| tape.constant(t.clone()));
        let (mean, log_std) = bp.distribution(&mut tape, s, z).unwrap();
        let a = bp.rsample(&mut tape, mean, log_std, &eps);
        let q = bc.q_value(&mut tape, s, a, z).unwrap();
        let mq = tape.constant(beta_mean.clone());
        let lq = tape.constant(beta_log_std.clone());
        let kl = gaussian_kl(&mut tape, mean, log_std, mq, lq);
        let loss = policy_loss(&mut tape, q, kl, rho1);
        let g = tape.backward(loss).unwrap();
        (tape.value(loss).item(), bp.net.grads(&g))
    })
}

/// Encoder objective through encoder and flows. With `full` the critic
/// terms are included (the encoder loss); otherwise only the negated
/// variational bound is differentiated.
pub fn encoder_point(seed: u64, full: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fc = critic(&mut rng);
    let enc = ContextEncoder::new(LATENT, &HIDDEN, 4, Activation::Tanh, &mut rng);
    let flows = FlowChain::random(LATENT, 2, 0.5, &mut rng);
    let windows = 2;
    let per = ROWS / windows;
    let context = gaussian(ROWS, 7, 0.6, &mut rng);
    let segments: Vec<(usize, usize)> = (0..windows).map(|w| (w * per, (w + 1) * per)).collect();
    let task: Vec<usize> = (0..ROWS).map(|i| i / per).collect();
    let eps = draw_eps(windows, LATENT, &mut rng);
    let b = batch(&mut rng);
    let targets = gaussian(ROWS, FEATURES, 1.0, &mut rng);
    let y = gaussian(ROWS, 1, 0.5, &mut rng);
    let mut params = owned(enc.params());
    params.extend(owned(flows.params()));
    let n_enc = enc.params().len();
    compare(&params, |p| {
        let (mut e, mut f) = (enc.clone(), flows.clone());
        load(e.params_mut(), &p[..n_enc]);
        load(f.params_mut(), &p[n_enc..]);
        let mut tape = Tape::new();
        let be = e.bind(&mut tape, true);
        let bf = f.bind(&mut tape, true);
        let ctx = tape.constant(context.clone());
        let latent = sample_latent(&mut tape, &be, &bf, ctx, &segments, eps.clone()).unwrap();
        let kl = kl_estimate(&mut tape, &latent);
        let z = tape.gather_rows(latent.zk, &task);
        let bc = fc.bind(&mut tape, false, false);
        let [s, a, sn, r] = [&b.s, &b.a, &b.s_next, &b.r].map(|t| tape.constant(t.clone()));
        let phi = bc.features(&mut tape, s, a, sn, z).unwrap();
        let w = bc.weights(&mut tape, z).unwrap();
        let pred = rowwise_dot(&mut tape, phi, w);
        let lr = reward_loss(&mut tape, pred, r);
        let psis = bc.psi(&mut tape, s, a, z).unwrap();
        let mut jpsi = psi_loss(&mut tape, psis[0], &targets, TdLoss::Huber(1.0)).unwrap();
        for &psi in &psis[1..] {
            let l = psi_loss(&mut tape, psi, &targets, TdLoss::Huber(1.0)).unwrap();
            jpsi = tape.add(jpsi, l);
        }
        let q = corrected_q(&mut tape, &psis, w);
        let yv = tape.constant(y.clone());
        let residual = tape.sub(q, yv);
        let log_pq = bellman_log_likelihood(&mut tape, residual);
        let j = elbo(&mut tape, log_pq, kl, 0.1);
        let loss = if full {
            encoder_loss(&mut tape, lr, jpsi, j, 0.01)
        } else {
            tape.neg(j)
        };
        let g = tape.backward(loss).unwrap();
        let mut grads = be.grads(&g);
        grads.extend(bf.grads(&g));
        (tape.value(loss).item(), grads)
    })
}

/// Worst error ratio of every loss over `points` random parameter points.
pub fn gradient_suite(points: u64) -> Vec<(&'static str, f64)> {
    let worst = |f: &dyn Fn(u64) -> f64| (0..points).map(f).fold(0.0, f64::max);
    vec![
        ("reward", worst(&reward_point)),
        ("successor-huber", worst(&|s| psi_point(s, TdLoss::Huber(1.0)))),
        ("successor-squared", worst(&|s| psi_point(s, TdLoss::Squared))),
        ("policy", worst(&policy_point)),
        ("variational-bound", worst(&|s| encoder_point(s, false))),
        ("encoder", worst(&|s| encoder_point(s, true))),
    ]
}

/// `ln|det J|` of the chain at `z` by central differences.
pub fn numeric_log_det(chain: &FlowChain, z: &[f64], eps: f64) -> f64 {
    let d = z.len();
    let mut jac = nalgebra::DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[j] += eps;
        zm[j] -= eps;
        let (fp, _) = chain.forward(&zp).unwrap();
        let (fm, _) = chain.forward(&zm).unwrap();
        for i in 0..d {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * eps);
        }
    }
    jac.determinant().abs().ln()
}

/// Worst gap between analytic and numeric log-det over `trials` random
/// chains of one to three layers, alternating dimension 2 and 3.
pub fn worst_log_det_error(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let d = if trial % 2 == 0 { 2 } else { 3 };
        let k = 1 + trial % 3;
        let chain = FlowChain::random(d, k, 1.0, &mut rng);
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let (_, ld) = chain.forward(&z).unwrap();
        worst = worst.max((ld - numeric_log_det(&chain, &z, 1e-6)).abs());
    }
    worst
}

/// Importance-sampled integral of a standard-base flowed density over
/// [−6, 6]², with a N(0, 2²I) proposal.
pub fn normalization(chain: &FlowChain, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let sigma: f64 = 2.0;
    let mut acc = 0.0;
    for _ in 0..samples {
        let x: [f64; 2] = [
            sigma * rng.sample::<f64, _>(StandardNormal),
            sigma * rng.sample::<f64, _>(StandardNormal),
        ];
        if x.iter().any(|v| v.abs() > 6.0) {
            continue;
        }
        let lq = chain.log_density_at(&[0.0, 0.0], &[0.0, 0.0], &x).unwrap();
        let lg = gaussian_log_density(&[0.0, 0.0], &[sigma.ln(), sigma.ln()], &x);
        acc += (lq - lg).exp();
    }
    acc / samples as f64
}
