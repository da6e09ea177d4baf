//! Task inference: a permutation-invariant context encoder producing a
//! diagonal Gaussian over the task latent, refined by a chain of planar
//! flows, plus the variational objective that trains both.

use std::f64::consts::PI;

use ndgrad::{Activation, BoundMlp, Mlp, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::envs::Transition;
use crate::error::{Error, Result};

/// Width of one encoded transition `(s, a, r, s')`.
pub const TRANSITION_DIM: usize = 7;

/// Below this, `|1 + u'chi|` is treated as a singular Jacobian.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

pub fn transition_row(t: &Transition) -> [f64; TRANSITION_DIM] {
    [t.s[0], t.s[1], t.a[0], t.a[1], t.r, t.s_next[0], t.s_next[1]]
}

/// Stack several context windows into one matrix plus their row ranges.
pub fn stack_contexts(windows: &[&[Transition]]) -> Result<(Tensor, Vec<(usize, usize)>)> {
    let mut data = Vec::new();
    let mut segments = Vec::with_capacity(windows.len());
    for w in windows {
        if w.is_empty() {
            return Err(Error::Contract("empty context window".into()));
        }
        let start = segments.last().map_or(0, |&(_, e)| e);
        segments.push((start, start + w.len()));
        for t in *w {
            data.extend_from_slice(&transition_row(t));
        }
    }
    if segments.is_empty() {
        return Err(Error::Contract("no context windows".into()));
    }
    let rows = data.len() / TRANSITION_DIM;
    Ok((Tensor::matrix(rows, TRANSITION_DIM, data)?, segments))
}

/// Shared per-transition embedding followed by a head that maps the pooled
/// embedding to `(mu, log_std)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEncoder {
    pub embed: Mlp,
    pub head: Mlp,
}

impl ContextEncoder {
    pub fn new(
        latent_dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut embed_sizes = vec![TRANSITION_DIM];
        embed_sizes.extend_from_slice(hidden);
        embed_sizes.push(embed_dim);
        let mut head_sizes = vec![embed_dim];
        head_sizes.extend_from_slice(hidden);
        head_sizes.push(2 * latent_dim);
        let embed = Mlp::new(&embed_sizes, activation, rng);
        let mut head = Mlp::new(&head_sizes, activation, rng);
        head.scale_output_layer(0.1);
        Self { embed, head }
    }

    pub fn latent_dim(&self) -> usize {
        self.head.output_dim() / 2
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.embed.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.embed.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.embed.param_names("encoder.embed");
        n.extend(self.head.param_names("encoder.head"));
        n
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            embed: self.embed.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
            latent_dim: self.latent_dim(),
        }
    }

    /// Posterior parameters for one window, without a tape.
    pub fn posterior(&self, context: &[Transition]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (x, _) = stack_contexts(&[context])?;
        let e = self.embed.forward(&x)?;
        let mut pooled = vec![0.0; e.cols()];
        for i in 0..e.rows() {
            for (p, v) in pooled.iter_mut().zip(e.row_slice(i)) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= e.rows() as f64);
        let out = self.head.forward(&Tensor::row(&pooled))?;
        let d = self.latent_dim();
        let mu = out.data()[..d].to_vec();
        let log_std = out.data()[d..]
            .iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok((mu, log_std))
    }

    /// Base-Gaussian part of the latent: `z0 = mu + exp(log_std)·eps`.
    pub fn encode(
        &self,
        context: &[Transition],
        rng: &mut impl Rng,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (mu, log_std) = self.posterior(context)?;
        let z0 = mu
            .iter()
            .zip(&log_std)
            .map(|(m, s)| m + s.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok((mu, log_std, z0))
    }
}

pub struct BoundEncoder {
    pub embed: BoundMlp,
    pub head: BoundMlp,
    latent_dim: usize,
}

impl BoundEncoder {
    /// `(mu, log_std)`, each `[windows, latent_dim]`.
    pub fn posterior(
        &self,
        tape: &mut Tape,
        context: Var,
        segments: &[(usize, usize)],
    ) -> Result<(Var, Var)> {
        let e = self.embed.forward(tape, context)?;
        let pooled = tape.segment_mean(e, segments);
        let out = self.head.forward(tape, pooled)?;
        let mu = tape.slice_cols(out, 0, self.latent_dim);
        let raw = tape.slice_cols(out, self.latent_dim, 2 * self.latent_dim);
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok((mu, log_std))
    }

    pub fn grads(&self, grads: &ndgrad::Gradients) -> Vec<Tensor> {
        let mut g = self.embed.grads(grads);
        g.extend(self.head.grads(grads));
        g
    }
}

/// One planar layer `f(z) = z + û·tanh(wᵀz + b)`, where `û` is `u` adjusted
/// so that `wᵀû ≥ −1` and the map stays invertible.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarFlow {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl PlanarFlow {
    pub fn new(w: &[f64], u: &[f64], b: f64) -> Self {
        assert_eq!(w.len(), u.len(), "planar flow w/u lengths differ");
        Self {
            w: Tensor::row(w),
            u: Tensor::row(u),
            b: Tensor::scalar(b),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(&vec![0.0; dim], &vec![0.0; dim], 0.0)
    }

    pub fn random(dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut draw = || -> Vec<f64> {
            (0..dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let w = draw();
        let u = draw();
        let b = scale * rng.sample::<f64, _>(StandardNormal);
        Self::new(&w, &u, b)
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// The constrained direction `û = u + (m(wᵀu) − wᵀu)·w/‖w‖²`,
    /// `m(x) = −1 + softplus(x)`. Returns `u` unchanged when `w = 0`.
    pub fn u_hat(&self) -> Vec<f64> {
        let w = self.w.data();
        let u = self.u.data();
        let ww = dot(w, w);
        if ww == 0.0 {
            return u.to_vec();
        }
        let wu = dot(w, u);
        let coef = (-1.0 + softplus(wu) - wu) / ww;
        u.iter().zip(w).map(|(ui, wi)| ui + coef * wi).collect()
    }

    /// Apply the layer; returns the image and `log|det J|`.
    pub fn apply(&self, z: &[f64], layer: usize) -> Result<(Vec<f64>, f64)> {
        let w = self.w.data();
        let uh = self.u_hat();
        let h = (dot(w, z) + self.b.item()).tanh();
        let det = 1.0 + (1.0 - h * h) * dot(w, &uh);
        if det.abs() < DEGENERACY_THRESHOLD {
            return Err(Error::DegenerateFlow { layer, value: det.abs() });
        }
        let out = z.iter().zip(&uh).map(|(zi, ui)| zi + ui * h).collect();
        Ok((out, det.abs().ln()))
    }

    /// Invert the layer by solving the scalar equation for `wᵀz` (monotone
    /// because `wᵀû ≥ −1`) and then stepping back along `û`.
    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        let w = self.w.data();
        let uh = self.u_hat();
        let b = self.b.item();
        let wu = dot(w, &uh);
        let wy = dot(w, y);
        let g = |a: f64| a + wu * (a + b).tanh() - wy;
        let spread = wu.abs() + 1.0;
        let (mut lo, mut hi) = (wy - spread, wy + spread);
        let mut a = wy;
        for _ in 0..200 {
            let ga = g(a);
            if ga == 0.0 || hi - lo < 1e-15 {
                break;
            }
            if ga > 0.0 {
                hi = a;
            } else {
                lo = a;
            }
            let t = (a + b).tanh();
            let slope = 1.0 + wu * (1.0 - t * t);
            let newton = a - ga / slope;
            a = if slope > 1e-8 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        let h = (a + b).tanh();
        y.iter().zip(&uh).map(|(yi, ui)| yi - ui * h).collect()
    }
}

/// A sequence of planar layers; empty means the base Gaussian is used as is.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowChain {
    pub layers: Vec<PlanarFlow>,
}

impl FlowChain {
    pub fn new(layers: Vec<PlanarFlow>) -> Self {
        Self { layers }
    }

    pub fn random(dim: usize, k: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self::new((0..k).map(|_| PlanarFlow::random(dim, scale, rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.u, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.u, &mut l.b])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|k| ["w", "u", "b"].map(|p| format!("flow.k{k}.{p}")))
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundFlows {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundFlows {
            layers: self
                .layers
                .iter()
                .map(|l| [put(&l.w), put(&l.u), put(&l.b)])
                .collect(),
        }
    }

    /// `(z_K, Σ log|det|)`.
    pub fn forward(&self, z0: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut z = z0.to_vec();
        let mut log_det = 0.0;
        for (k, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer.apply(&z, k)?;
            z = next;
            log_det += ld;
        }
        Ok((z, log_det))
    }

    pub fn inverse(&self, zk: &[f64]) -> Vec<f64> {
        self.layers
            .iter()
            .rev()
            .fold(zk.to_vec(), |z, layer| layer.invert(&z))
    }

    /// Density of `z_K = F(z0)` for `z0` drawn from `N(mu, exp(log_std)²)`.
    pub fn log_density(&self, mu: &[f64], log_std: &[f64], z0: &[f64]) -> Result<f64> {
        let (_, log_det) = self.forward(z0)?;
        Ok(gaussian_log_density(mu, log_std, z0) - log_det)
    }

    /// Density of an arbitrary point of the flowed distribution.
    pub fn log_density_at(&self, mu: &[f64], log_std: &[f64], zk: &[f64]) -> Result<f64> {
        let z0 = self.inverse(zk);
        self.log_density(mu, log_std, &z0)
    }
}

pub fn gaussian_log_density(mu: &[f64], log_std: &[f64], z: &[f64]) -> f64 {
    mu.iter()
        .zip(log_std)
        .zip(z)
        .map(|((m, s), x)| {
            let e = (x - m) / s.exp();
            -0.5 * e * e - s - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    z.iter().map(|x| -0.5 * x * x - 0.5 * (2.0 * PI).ln()).sum()
}

pub struct BoundFlows {
    /// `[w, u, b]` per layer.
    pub layers: Vec<[Var; 3]>,
}

impl BoundFlows {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn grads(&self, grads: &ndgrad::Gradients) -> Vec<Tensor> {
        self.vars().into_iter().map(|v| grads.wrt(v)).collect()
    }

    /// Push a `[n, d]` batch through every layer. Returns `z_K` and the
    /// per-row log-det sum `[n, 1]`.
    pub fn forward(&self, tape: &mut Tape, z0: Var) -> Result<(Var, Var)> {
        let n = tape.value(z0).rows();
        let mut z = z0;
        let mut log_det = tape.constant(Tensor::zeros(&[n, 1]));
        for (k, &[w, u, b]) in self.layers.iter().enumerate() {
            let uh = u_hat_tape(tape, w, u);
            let wt = tape.transpose(w);
            let pre = tape.matmul(z, wt);
            let pre = tape.add(pre, b);
            let h = tape.tanh(pre);
            let shift = tape.matmul(h, uh);
            z = tape.add(z, shift);
            let wuh = tape.mul(w, uh);
            let wuh = tape.sum_cols(wuh);
            let h2 = tape.square(h);
            let slope = tape.neg(h2);
            let slope = tape.add_scalar(slope, 1.0);
            let det = tape.mul(slope, wuh);
            let det = tape.add_scalar(det, 1.0);
            if let Some(v) = tape
                .value(det)
                .data()
                .iter()
                .map(|d| d.abs())
                .find(|d| *d < DEGENERACY_THRESHOLD)
            {
                return Err(Error::DegenerateFlow { layer: k, value: v });
            }
            let ld = tape.ln_abs(det);
            log_det = tape.add(log_det, ld);
        }
        Ok((z, log_det))
    }
}

fn u_hat_tape(tape: &mut Tape, w: Var, u: Var) -> Var {
    let ww = tape.square(w);
    let ww = tape.sum_cols(ww);
    if tape.value(ww).item() == 0.0 {
        return u;
    }
    let wu = tape.mul(w, u);
    let wu = tape.sum_cols(wu);
    let m = tape.softplus(wu);
    let m = tape.add_scalar(m, -1.0);
    let diff = tape.sub(m, wu);
    let log_ww = tape.ln(ww);
    let neg = tape.neg(log_ww);
    let inv_ww = tape.exp(neg);
    let coef = tape.mul(diff, inv_ww);
    let step = tape.mul(w, coef);
    tape.add(u, step)
}

/// Latent quantities for a batch of context windows, all `[windows, d]`
/// except `log_det` (`[windows, 1]`).
pub struct LatentSample {
    pub mu: Var,
    pub log_std: Var,
    pub eps: Tensor,
    pub z0: Var,
    pub zk: Var,
    pub log_det: Var,
}

/// Encode, sample `z0 = mu + exp(log_std)·eps` and flow it.
pub fn sample_latent(
    tape: &mut Tape,
    encoder: &BoundEncoder,
    flows: &BoundFlows,
    context: Var,
    segments: &[(usize, usize)],
    eps: Tensor,
) -> Result<LatentSample> {
    let (mu, log_std) = encoder.posterior(tape, context, segments)?;
    if tape.value(mu).shape() != eps.shape() {
        return Err(Error::Dimension {
            what: "latent noise",
            expected: tape.value(mu).len(),
            got: eps.len(),
        });
    }
    let std = tape.exp(log_std);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(std, e);
    let z0 = tape.add(mu, noise);
    let (zk, log_det) = flows.forward(tape, z0)?;
    Ok(LatentSample {
        mu,
        log_std,
        eps,
        z0,
        zk,
        log_det,
    })
}

pub fn draw_eps(rows: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, dim, data).expect("positive extents")
}

/// Single-sample KL estimate per window, `[windows, 1]`:
/// `log q0(z0) − Σ log|det| − log N(z_K; 0, I)`. Since `z0` was drawn by
/// reparameterization, `(z0 − mu)/std = eps` and the base density is written
/// in terms of `eps`.
pub fn kl_estimate(tape: &mut Tape, s: &LatentSample) -> Var {
    let d = s.eps.cols() as f64;
    let c = 0.5 * (2.0 * PI).ln();
    let half_eps: Vec<f64> = (0..s.eps.rows())
        .map(|i| -0.5 * s.eps.row_slice(i).iter().map(|e| e * e).sum::<f64>() - d * c)
        .collect();
    let base_const = tape.constant(Tensor::matrix(half_eps.len(), 1, half_eps).expect("rows"));
    let sum_log_std = tape.sum_cols(s.log_std);
    let log_q0 = tape.sub(base_const, sum_log_std);
    let log_qk = tape.sub(log_q0, s.log_det);
    let zk2 = tape.square(s.zk);
    let zk2 = tape.sum_cols(zk2);
    let log_prior = tape.scale(zk2, -0.5);
    let log_prior = tape.add_scalar(log_prior, -d * c);
    tape.sub(log_qk, log_prior)
}

/// `J = log p(Q) − rho2 · mean(KL)`.
pub fn elbo(tape: &mut Tape, log_pq: Var, kl: Var, rho2: f64) -> Var {
    let kl = tape.mean(kl);
    let kl = tape.scale(kl, rho2);
    tape.sub(log_pq, kl)
}

pub fn elbo_value(log_pq: f64, kl: f64, rho2: f64) -> f64 {
    log_pq - rho2 * kl
}

/// `L_E = rho3·(L_r + J_ψ) − J_ELBO`.
pub fn encoder_loss(tape: &mut Tape, reward_loss: Var, psi_loss: Var, elbo: Var, rho3: f64) -> Var {
    let critic = tape.add(reward_loss, psi_loss);
    let critic = tape.scale(critic, rho3);
    tape.sub(critic, elbo)
}

pub fn encoder_loss_value(reward_loss: f64, psi_loss: f64, elbo: f64, rho3: f64) -> f64 {
    rho3 * (reward_loss + psi_loss) - elbo
}

/// Likelihood term of the ELBO for a unit-variance Gaussian over Bellman
/// residuals, averaged over transitions.
pub fn bellman_log_likelihood(tape: &mut Tape, residual: Var) -> Var {
    let sq = tape.square(residual);
    let m = tape.mean(sq);
    tape.scale(m, -0.5)
}

/// Equal-weight mixture of isotropic Gaussians; a fixed target for studying
/// how well flows of a given length can fit a multimodal density.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub std: f64,
}

impl GaussianMixture {
    /// Two modes at `±separation/2` on the first axis of the plane.
    pub fn bimodal(separation: f64, std: f64) -> Self {
        Self {
            means: vec![vec![-separation / 2.0, 0.0], vec![separation / 2.0, 0.0]],
            std,
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn log_norm(&self) -> f64 {
        let d = self.dim() as f64;
        -(self.means.len() as f64).ln() - d * self.std.ln() - 0.5 * d * (2.0 * PI).ln()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let a: Vec<f64> = self
            .means
            .iter()
            .map(|m| -0.5 * z.iter().zip(m).map(|(x, c)| (x - c) * (x - c)).sum::<f64>() / (self.std * self.std))
            .collect();
        let top = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top + a.iter().map(|v| (v - top).exp()).sum::<f64>().ln() + self.log_norm()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let m = &self.means[rng.random_range(0..self.means.len())];
        m.iter()
            .map(|c| c + self.std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Row-wise log-density of a `[n, d]` batch on the tape, `[n, 1]`.
    fn log_density_tape(&self, tape: &mut Tape, z: Var) -> Var {
        let n = tape.value(z).rows();
        let mut terms = Vec::with_capacity(self.means.len());
        for m in &self.means {
            let c = tape.constant(Tensor::row(m));
            let diff = tape.sub(z, c);
            let sq = tape.square(diff);
            let sq = tape.sum_cols(sq);
            terms.push(tape.scale(sq, -0.5 / (self.std * self.std)));
        }
        // Shift by the row maximum, held constant, before exponentiating.
        let top: Vec<f64> = (0..n)
            .map(|i| {
                terms
                    .iter()
                    .map(|&t| tape.value(t).data()[i])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let top = tape.constant(Tensor::matrix(n, 1, top).expect("rows"));
        let mut total = None;
        for t in terms {
            let shifted = tape.sub(t, top);
            let e = tape.exp(shifted);
            total = Some(match total {
                None => e,
                Some(acc) => tape.add(acc, e),
            });
        }
        let lse = tape.ln(total.expect("at least one mode"));
        let lse = tape.add(lse, top);
        tape.add_scalar(lse, self.log_norm())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowFitConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Independent initializations; the best by reverse KL is kept.
    pub restarts: usize,
    /// Fixed samples used to score every fit.
    pub eval_samples: usize,
    pub init_scale: f64,
}

impl Default for FlowFitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 128,
            learning_rate: 1e-2,
            restarts: 3,
            eval_samples: 20_000,
            init_scale: 0.5,
        }
    }
}

/// A Gaussian base plus flows fitted to a target density.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowFit {
    pub mu: Vec<f64>,
    pub log_std: Vec<f64>,
    pub flows: FlowChain,
    /// `KL(flow ‖ target)`, the direction that was minimized.
    pub reverse_kl: f64,
    /// `KL(target ‖ flow)`, scored through the flow inverse.
    pub forward_kl: f64,
}

fn reverse_kl_on_tape(
    tape: &mut Tape,
    target: &GaussianMixture,
    mu: Var,
    log_std: Var,
    flows: &BoundFlows,
    eps: &Tensor,
) -> Result<Var> {
    let d = eps.cols() as f64;
    let std = tape.exp(log_std);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(e, std);
    let z0 = tape.add(noise, mu);
    let (zk, log_det) = flows.forward(tape, z0)?;
    let base: Vec<f64> = (0..eps.rows())
        .map(|i| -0.5 * eps.row_slice(i).iter().map(|x| x * x).sum::<f64>() - 0.5 * d * (2.0 * PI).ln())
        .collect();
    let base = tape.constant(Tensor::matrix(eps.rows(), 1, base).expect("rows"));
    let sum_log_std = tape.sum_cols(log_std);
    let log_q = tape.sub(base, sum_log_std);
    let log_q = tape.sub(log_q, log_det);
    let log_p = target.log_density_tape(tape, zk);
    let gap = tape.sub(log_q, log_p);
    Ok(tape.mean(gap))
}

/// Fit a Gaussian base and `layers` planar flows to `target` by minimizing
/// `KL(flow ‖ target)` with reparameterized samples. Every fit drawn from the
/// same `seed` is scored on the same evaluation samples.
pub fn fit_flow(target: &GaussianMixture, layers: usize, cfg: &FlowFitConfig, seed: u64) -> Result<FlowFit> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let dim = target.dim();
    let eval_eps = draw_eps(cfg.eval_samples, dim, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut best: Option<FlowFit> = None;
    let mut last_err = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 + restart as u64 + ((layers as u64) << 32)));
        let mut mu = Tensor::zeros(&[1, dim]);
        let mut log_std = Tensor::zeros(&[1, dim]);
        let mut flows = FlowChain::random(dim, layers, cfg.init_scale, &mut rng);
        let mut opt = {
            let mut params = vec![&mu, &log_std];
            params.extend(flows.params());
            ndgrad::Adam::new(ndgrad::AdamConfig::with_lr(cfg.learning_rate), &params)
        };
        let trained = (|| -> Result<()> {
            for _ in 0..cfg.steps {
                let eps = draw_eps(cfg.batch, dim, &mut rng);
                let mut tape = Tape::new();
                let m = tape.leaf(mu.clone());
                let l = tape.leaf(log_std.clone());
                let bf = flows.bind(&mut tape, true);
                let loss = reverse_kl_on_tape(&mut tape, target, m, l, &bf, &eps)?;
                let grads = tape.backward(loss)?;
                let mut g = vec![grads.wrt(m), grads.wrt(l)];
                g.extend(bf.grads(&grads));
                let mut params = vec![&mut mu, &mut log_std];
                params.extend(flows.params_mut());
                opt.step(params, &g)?;
                for v in log_std.data_mut() {
                    *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
                }
            }
            Ok(())
        })();
        if let Err(e) = trained {
            last_err = Some(e);
            continue;
        }
        let mut tape = Tape::new();
        let m = tape.constant(mu.clone());
        let l = tape.constant(log_std.clone());
        let bf = flows.bind(&mut tape, false);
        let reverse = match reverse_kl_on_tape(&mut tape, target, m, l, &bf, &eval_eps) {
            Ok(v) => tape.value(v).item(),
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        if best.as_ref().is_none_or(|b| reverse < b.reverse_kl) {
            best = Some(FlowFit {
                mu: mu.data().to_vec(),
                log_std: log_std.data().to_vec(),
                flows,
                reverse_kl: reverse,
                forward_kl: f64::NAN,
            });
        }
    }
    let mut fit = best.ok_or_else(|| last_err.expect("every restart failed with an error"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut sum = 0.0;
    for _ in 0..cfg.eval_samples {
        let x = target.sample(&mut rng);
        sum += target.log_density(&x) - fit.flows.log_density_at(&fit.mu, &fit.log_std, &x)?;
    }
    fit.forward_kl = sum / cfg.eval_samples as f64;
    Ok(fit)
}
