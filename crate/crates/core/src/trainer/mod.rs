//! Meta-training over offline task datasets: per-episode pessimism sampling,
//! the ordered parameter updates of one training step, evaluation and
//! ablation runs.

mod checkpoint;
pub mod config;
pub mod eval;
mod run;

use std::time::Instant;

use ndgrad::{Adam, AdamConfig, Tape, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aco::BanditState;
use crate::envs::{EnvConfig, OfflineDataset, Split, TaskData, Transition};
use crate::error::{Error, Result};
use crate::persistence::fmt_f64;
use crate::policy::{behavior_step, gaussian_kl, policy_loss, DualVariable, GaussianPolicy};
use crate::sf_critic::{
    concat, gather, psi_loss, reward_loss, rowwise_dot, CriticBatch, FeatureCritic,
    MonolithicCritic, TdLoss, ACTION_DIM,
};
use crate::task_inference::{
    bellman_log_likelihood, draw_eps, elbo, encoder_loss, kl_estimate, sample_latent,
    stack_contexts, ContextEncoder, FlowChain,
};

pub use config::{LatentMode, TrainConfig, Variant};
pub use eval::{
    infer_latent, meta_test, rollout_from, sample_window, Actor, PolicyActor, RolloutResult,
    ScriptedActor, TaskScore,
};
pub use run::{run_ablation, train_run, AblationRow, RunOptions};

/// The parameter updates of one training step, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Encoder,
    RewardWeights,
    SuccessorFeatures,
    Policy,
    TargetUpdate,
    Features,
    Flows,
}

impl Phase {
    pub const ORDER: [Phase; 7] = [
        Phase::Encoder,
        Phase::RewardWeights,
        Phase::SuccessorFeatures,
        Phase::Policy,
        Phase::TargetUpdate,
        Phase::Features,
        Phase::Flows,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub enum Critic {
    Decomposed(FeatureCritic),
    Monolithic(MonolithicCritic),
}

impl Critic {
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Critic::Decomposed(c) => c.named_params(),
            Critic::Monolithic(c) => c.named_params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Critic::Decomposed(c) => c.params_mut(),
            Critic::Monolithic(c) => c.params_mut(),
        }
    }

    pub fn soft_update(&mut self, zeta: f64) -> Result<()> {
        match self {
            Critic::Decomposed(c) => c.soft_update(zeta),
            Critic::Monolithic(c) => c.soft_update(zeta),
        }
    }

    /// The value the policy maximizes, `[n, 1]`.
    pub fn q_value(&self, s: &Tensor, a: &Tensor, z: &Tensor) -> Result<Tensor> {
        match self {
            Critic::Decomposed(c) => c.q_value(s, a, z),
            Critic::Monolithic(c) => c.q_value(s, a, z),
        }
    }
}

/// Losses of one training step. Unused entries stay zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub reward: f64,
    pub psi: [f64; 2],
    pub policy: f64,
    pub encoder: f64,
    pub behavior: f64,
    pub kl: f64,
}

impl StepLosses {
    fn accumulate(&mut self, other: &StepLosses, weight: f64) {
        self.reward += weight * other.reward;
        self.psi[0] += weight * other.psi[0];
        self.psi[1] += weight * other.psi[1];
        self.policy += weight * other.policy;
        self.encoder += weight * other.encoder;
        self.behavior += weight * other.behavior;
        self.kl += weight * other.kl;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub g: u64,
    pub alpha: f64,
    pub p_alpha: f64,
    /// Means over the episode's training steps.
    pub losses: StepLosses,
    pub rho1: f64,
    /// Bandit feedback: mean return of the training-task evaluation rollouts.
    pub eval_return: f64,
    pub test_return: f64,
    pub test_success: f64,
    pub q_estimate: f64,
    pub mc_return: f64,
    pub wall_time: f64,
}

impl EpisodeRecord {
    pub const HEADER: [&'static str; 17] = [
        "g",
        "alpha",
        "p_alpha",
        "reward_loss",
        "psi1_loss",
        "psi2_loss",
        "policy_loss",
        "encoder_loss",
        "behavior_loss",
        "kl",
        "rho1",
        "eval_return",
        "test_return",
        "test_success",
        "q_estimate",
        "mc_return",
        "q_gap",
    ];

    pub fn q_gap(&self) -> f64 {
        self.q_estimate - self.mc_return
    }

    /// Metrics row. Wall time is kept out so reruns compare byte for byte.
    pub fn csv_row(&self) -> Vec<String> {
        let l = &self.losses;
        let mut row = vec![self.g.to_string()];
        row.extend(
            [
                self.alpha,
                self.p_alpha,
                l.reward,
                l.psi[0],
                l.psi[1],
                l.policy,
                l.encoder,
                l.behavior,
                l.kl,
                self.rho1,
                self.eval_return,
                self.test_return,
                self.test_success,
                self.q_estimate,
                self.mc_return,
                self.q_gap(),
            ]
            .into_iter()
            .map(fmt_f64),
        );
        row
    }
}

struct Optimizers {
    encoder: Adam,
    flows: Adam,
    w: Option<Adam>,
    phi: Option<Adam>,
    /// Successor-feature networks, or the monolithic Q network.
    critic: Adam,
    policy: Adam,
    behavior: Adam,
}

impl Optimizers {
    fn named(&self) -> Vec<(&'static str, &Adam)> {
        let mut out = vec![("encoder", &self.encoder), ("flows", &self.flows)];
        if let Some(w) = &self.w {
            out.push(("w", w));
        }
        if let Some(phi) = &self.phi {
            out.push(("phi", phi));
        }
        out.extend([
            ("critic", &self.critic),
            ("policy", &self.policy),
            ("behavior", &self.behavior),
        ]);
        out
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Adam)> {
        let mut out = vec![("encoder", &mut self.encoder), ("flows", &mut self.flows)];
        if let Some(w) = &mut self.w {
            out.push(("w", w));
        }
        if let Some(phi) = &mut self.phi {
            out.push(("phi", phi));
        }
        out.extend([
            ("critic", &mut self.critic),
            ("policy", &mut self.policy),
            ("behavior", &mut self.behavior),
        ]);
        out
    }
}

/// Sampled inputs of one training step: context windows, per-window latent
/// noise and the update transitions (row `i` belongs to window `task[i]`).
pub struct MetaBatch {
    pub tasks: Vec<usize>,
    pub context: Tensor,
    pub segments: Vec<(usize, usize)>,
    pub eps: Tensor,
    pub batch: CriticBatch,
}

pub struct Trainer {
    pub config: TrainConfig,
    train: Vec<TaskData>,
    flat: Vec<Vec<Transition>>,
    test: Vec<TaskData>,
    /// Dynamics of the collected data; evaluation uses the configured horizon.
    data_env: EnvConfig,
    pub encoder: ContextEncoder,
    pub flows: FlowChain,
    pub critic: Critic,
    pub policy: GaussianPolicy,
    pub behavior: GaussianPolicy,
    pub bandit: Option<BanditState>,
    pub dual: DualVariable,
    opts: Optimizers,
    rng: ChaCha8Rng,
    /// Index of the next episode.
    pub episode: u64,
    /// Environment steps taken, all of them by evaluation.
    pub env_steps: u64,
    pretrained: bool,
    phase_log: Option<Vec<Phase>>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn ensure_finite(what: &str, value: f64, mb: &MetaBatch) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    let dump = serde_json::json!({
        "tasks": mb.tasks,
        "segments": mb.segments,
        "s": mb.batch.s.data(),
        "a": mb.batch.a.data(),
        "r": mb.batch.r.data(),
        "s_next": mb.batch.s_next.data(),
        "done": mb.batch.done.data(),
        "eps": mb.eps.data(),
    });
    Err(Error::NonFinite {
        what: format!("{what} = {value}"),
        dump: dump.to_string(),
    })
}

fn column(values: impl Iterator<Item = f64>, n: usize) -> Tensor {
    Tensor::matrix(n, 1, values.collect()).expect("positive extents")
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &OfflineDataset) -> Result<Self> {
        dataset.validate()?;
        let train: Vec<TaskData> = dataset.split(Split::Train).cloned().collect();
        let test: Vec<TaskData> = dataset.split(Split::Test).cloned().collect();
        config.validate(train.len())?;
        let act = config.activation()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.latent_dim;
        let encoder = ContextEncoder::new(d, &config.hidden, config.embed_dim, act, &mut rng);
        let flows = FlowChain::random(d, config.effective_flow_layers(), config.flow_init_scale, &mut rng);
        let critic = if config.variant.decomposed() {
            Critic::Decomposed(FeatureCritic::new(
                d,
                config.feature_dim,
                &config.hidden,
                act,
                config.variant.critics(),
                &mut rng,
            ))
        } else {
            Critic::Monolithic(MonolithicCritic::new(d, &config.hidden, act, &mut rng))
        };
        let policy = GaussianPolicy::new(d, &config.hidden, act, &mut rng);
        let behavior = GaussianPolicy::new(d, &config.hidden, act, &mut rng);
        let adam = |params: Vec<&Tensor>| Adam::new(AdamConfig::with_lr(config.learning_rate), &params);
        let opts = Optimizers {
            encoder: adam(encoder.params()),
            flows: adam(flows.params()),
            w: match &critic {
                Critic::Decomposed(c) => Some(adam(c.w.params())),
                Critic::Monolithic(_) => None,
            },
            phi: match &critic {
                Critic::Decomposed(c) => Some(adam(c.phi.params())),
                Critic::Monolithic(_) => None,
            },
            critic: match &critic {
                Critic::Decomposed(c) => adam(c.psi.iter().flat_map(|n| n.params()).collect()),
                Critic::Monolithic(c) => adam(c.q.params()),
            },
            policy: adam(policy.net.params()),
            behavior: adam(behavior.net.params()),
        };
        let bandit = if config.variant.uses_bandit() {
            Some(BanditState::new(config.bandit.clone())?)
        } else {
            None
        };
        let dual = DualVariable {
            target_kl: config.target_kl,
            lr: config.dual_lr,
            ..DualVariable::default()
        };
        let flat = train
            .iter()
            .map(|t| {
                t.trajectories
                    .iter()
                    .flat_map(|tr| tr.transitions.iter().copied())
                    .collect()
            })
            .collect();
        Ok(Self {
            train,
            flat,
            test,
            data_env: dataset.meta.env.clone(),
            encoder,
            flows,
            critic,
            policy,
            behavior,
            bandit,
            dual,
            opts,
            rng,
            episode: 0,
            env_steps: 0,
            pretrained: false,
            phase_log: None,
            config,
        })
    }

    /// Start recording the phase sequence of every training step.
    pub fn record_phases(&mut self) {
        self.phase_log = Some(Vec::new());
    }

    pub fn phases(&self) -> &[Phase] {
        self.phase_log.as_deref().unwrap_or(&[])
    }

    fn log(&mut self, phase: Phase) {
        if let Some(log) = &mut self.phase_log {
            log.push(phase);
        }
    }

    pub fn train_tasks(&self) -> &[TaskData] {
        &self.train
    }

    pub fn test_tasks(&self) -> &[TaskData] {
        &self.test
    }

    /// Environment used by evaluation rollouts.
    pub fn eval_env(&self) -> EnvConfig {
        EnvConfig {
            max_path_length: self.config.max_path_length,
            ..self.data_env.clone()
        }
    }

    /// Mean absolute reward over the training transitions.
    pub fn reward_scale(&self) -> f64 {
        let (sum, n) = self
            .flat
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), t| (s + t.r.abs(), n + 1));
        sum / n.max(1) as f64
    }

    /// Every learnable tensor, named as in checkpoints.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .encoder
            .param_names()
            .into_iter()
            .zip(self.encoder.params())
            .collect();
        out.extend(self.flows.param_names().into_iter().zip(self.flows.params()));
        out.extend(self.critic.named_params());
        out.extend(
            self.policy
                .net
                .param_names("policy.net")
                .into_iter()
                .zip(self.policy.net.params()),
        );
        out.extend(
            self.behavior
                .net
                .param_names("behavior.net")
                .into_iter()
                .zip(self.behavior.net.params()),
        );
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.flows.params_mut());
        out.extend(self.critic.params_mut());
        out.extend(self.policy.net.params_mut());
        out.extend(self.behavior.net.params_mut());
        out
    }

    pub fn sample_meta_batch(&mut self) -> Result<MetaBatch> {
        let cfg = &self.config;
        let n_tasks = self.train.len();
        let pool = n_tasks * cfg.max_task_repeats;
        let tasks: Vec<usize> = sample(&mut self.rng, pool, cfg.meta_batch)
            .into_iter()
            .map(|i| i % n_tasks)
            .collect();
        let mut windows = Vec::with_capacity(tasks.len());
        for &t in &tasks {
            windows.push(sample_window(&self.train[t], cfg.context_transitions, &mut self.rng)?);
        }
        let (context, segments) = stack_contexts(&windows)?;
        let rows = tasks.len() * cfg.batch_size;
        let mut s = Vec::with_capacity(2 * rows);
        let mut a = Vec::with_capacity(2 * rows);
        let mut r = Vec::with_capacity(rows);
        let mut sn = Vec::with_capacity(2 * rows);
        let mut done = Vec::with_capacity(rows);
        let mut owner = Vec::with_capacity(rows);
        for (j, &t) in tasks.iter().enumerate() {
            let data = &self.flat[t];
            for _ in 0..cfg.batch_size {
                let tr = &data[self.rng.random_range(0..data.len())];
                s.extend_from_slice(&tr.s);
                a.extend_from_slice(&tr.a);
                r.push(tr.r * cfg.reward_multiplier);
                sn.extend_from_slice(&tr.s_next);
                done.push(if tr.done { 1.0 } else { 0.0 });
                owner.push(j);
            }
        }
        let eps = draw_eps(tasks.len(), cfg.latent_dim, &mut self.rng);
        Ok(MetaBatch {
            tasks,
            context,
            segments,
            eps,
            batch: CriticBatch {
                s: Tensor::matrix(rows, 2, s)?,
                a: Tensor::matrix(rows, ACTION_DIM, a)?,
                r: Tensor::matrix(rows, 1, r)?,
                s_next: Tensor::matrix(rows, 2, sn)?,
                done: Tensor::matrix(rows, 1, done)?,
                task: owner,
            },
        })
    }

    /// Flowed latents `[windows, d]` at the current parameters, off the tape.
    pub fn latents(&self, mb: &MetaBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let enc = self.encoder.bind(&mut tape, false);
        let flows = self.flows.bind(&mut tape, false);
        let ctx = tape.constant(mb.context.clone());
        let latent = sample_latent(&mut tape, &enc, &flows, ctx, &mb.segments, mb.eps.clone())?;
        Ok(tape.value(latent.zk).clone())
    }

    /// Encoder objective with gradients for either the encoder or the flows.
    fn encoder_objective(&mut self, mb: &MetaBatch, alpha: f64, for_encoder: bool) -> Result<(f64, Vec<Tensor>)> {
        let cfg = &self.config;
        let b = &mb.batch;
        let mut tape = Tape::new();
        let enc = self.encoder.bind(&mut tape, for_encoder);
        let flows = self.flows.bind(&mut tape, !for_encoder);
        let ctx = tape.constant(mb.context.clone());
        let latent = sample_latent(&mut tape, &enc, &flows, ctx, &mb.segments, mb.eps.clone())?;
        let kl = kl_estimate(&mut tape, &latent);
        let z_rows = tape.gather_rows(latent.zk, &b.task);
        let z_plain = gather(tape.value(latent.zk), &b.task);
        let a_next = self.policy.sample_actions(&b.s_next, &z_plain, &mut self.rng)?;
        let s = tape.constant(b.s.clone());
        let a = tape.constant(b.a.clone());
        let sn = tape.constant(b.s_next.clone());
        let r = tape.constant(b.r.clone());
        let (critic_terms, log_pq) = match &self.critic {
            Critic::Decomposed(fc) => {
                let bc = fc.bind(&mut tape, false, false);
                let phi = bc.features(&mut tape, s, a, sn, z_rows)?;
                let w = bc.weights(&mut tape, z_rows)?;
                let pred = rowwise_dot(&mut tape, phi, w);
                let lr = reward_loss(&mut tape, pred, r);
                let targets = fc.td_targets(b, &a_next, &z_plain, alpha, cfg.gamma)?;
                let td = cfg.variant.td_loss(cfg.huber_kappa);
                let psis = bc.psi(&mut tape, s, a, z_rows)?;
                let mut jpsi = psi_loss(&mut tape, psis[0], &targets, td)?;
                for &p in &psis[1..] {
                    let j = psi_loss(&mut tape, p, &targets, td)?;
                    jpsi = tape.add(jpsi, j);
                }
                let q = crate::sf_critic::corrected_q(&mut tape, &psis, w);
                let y = tape.constant(bootstrap_q(fc, b, &a_next, &z_plain, cfg.gamma)?);
                let residual = tape.sub(q, y);
                ((lr, jpsi), bellman_log_likelihood(&mut tape, residual))
            }
            Critic::Monolithic(mc) => {
                let qnet = mc.q.bind(&mut tape, false);
                let x = tape.concat_cols(&[s, a, z_rows]);
                let q = qnet.forward(&mut tape, x)?;
                let targets = mc.td_targets(b, &a_next, &z_plain, cfg.gamma)?;
                let jq = psi_loss(&mut tape, q, &targets, TdLoss::Squared)?;
                let zero = tape.constant(Tensor::scalar(0.0));
                let y = tape.constant(targets);
                let residual = tape.sub(q, y);
                ((zero, jq), bellman_log_likelihood(&mut tape, residual))
            }
        };
        let j = elbo(&mut tape, log_pq, kl, cfg.rho2);
        let loss = encoder_loss(&mut tape, critic_terms.0, critic_terms.1, j, cfg.rho3);
        let value = tape.value(loss).item();
        ensure_finite("encoder loss", value, mb)?;
        let grads = tape.backward(loss)?;
        let g = if for_encoder { enc.grads(&grads) } else { flows.grads(&grads) };
        Ok((value, g))
    }

    /// Reward regression step for the weight head (`weights = true`) or the
    /// feature network.
    fn reward_phase(&mut self, mb: &MetaBatch, z_rows: &Tensor, weights: bool) -> Result<f64> {
        let Critic::Decomposed(fc) = &mut self.critic else {
            return Ok(0.0);
        };
        let b = &mb.batch;
        let mut tape = Tape::new();
        let bc = fc.bind(&mut tape, true, false);
        let s = tape.constant(b.s.clone());
        let a = tape.constant(b.a.clone());
        let sn = tape.constant(b.s_next.clone());
        let z = tape.constant(z_rows.clone());
        let r = tape.constant(b.r.clone());
        let phi = bc.features(&mut tape, s, a, sn, z)?;
        let w = bc.weights(&mut tape, z)?;
        let pred = rowwise_dot(&mut tape, phi, w);
        let loss = reward_loss(&mut tape, pred, r);
        let value = tape.value(loss).item();
        ensure_finite("reward loss", value, mb)?;
        let grads = tape.backward(loss)?;
        let (g_phi, g_w) = bc.phi_w_grads(&grads);
        if weights {
            self.opts.w.as_mut().expect("decomposed").step(fc.w.params_mut(), &g_w)?;
        } else {
            self.opts.phi.as_mut().expect("decomposed").step(fc.phi.params_mut(), &g_phi)?;
        }
        Ok(value)
    }

    fn successor_phase(&mut self, mb: &MetaBatch, z_rows: &Tensor, alpha: f64) -> Result<[f64; 2]> {
        let cfg = &self.config;
        let b = &mb.batch;
        let a_next = self.policy.sample_actions(&b.s_next, z_rows, &mut self.rng)?;
        let mut tape = Tape::new();
        let s = tape.constant(b.s.clone());
        let a = tape.constant(b.a.clone());
        let z = tape.constant(z_rows.clone());
        let mut values = [0.0; 2];
        match &mut self.critic {
            Critic::Decomposed(fc) => {
                let targets = fc.td_targets(b, &a_next, z_rows, alpha, cfg.gamma)?;
                let td = cfg.variant.td_loss(cfg.huber_kappa);
                let bc = fc.bind(&mut tape, false, true);
                let psis = bc.psi(&mut tape, s, a, z)?;
                let mut total = None;
                for (e, &p) in psis.iter().enumerate() {
                    let j = psi_loss(&mut tape, p, &targets, td)?;
                    values[e] = tape.value(j).item();
                    ensure_finite("successor-feature loss", values[e], mb)?;
                    total = Some(match total {
                        None => j,
                        Some(t) => tape.add(t, j),
                    });
                }
                let grads = tape.backward(total.expect("at least one critic"))?;
                let g: Vec<Tensor> = bc.psi.iter().flat_map(|n| n.grads(&grads)).collect();
                let params = fc.psi.iter_mut().flat_map(|n| n.params_mut()).collect();
                self.opts.critic.step(params, &g)?;
            }
            Critic::Monolithic(mc) => {
                let targets = mc.td_targets(b, &a_next, z_rows, cfg.gamma)?;
                let qnet = mc.q.bind(&mut tape, true);
                let x = tape.concat_cols(&[s, a, z]);
                let q = qnet.forward(&mut tape, x)?;
                let j = psi_loss(&mut tape, q, &targets, TdLoss::Squared)?;
                values[0] = tape.value(j).item();
                ensure_finite("Q loss", values[0], mb)?;
                let grads = tape.backward(j)?;
                self.opts.critic.step(mc.q.params_mut(), &qnet.grads(&grads))?;
            }
        }
        Ok(values)
    }

    /// Policy step against the critic plus the dual and behavior updates.
    fn policy_phase(&mut self, mb: &MetaBatch, z_rows: &Tensor) -> Result<(f64, f64, f64)> {
        let b = &mb.batch;
        let n = b.len();
        let (mb_mean, mb_ls) = self.behavior.distribution(&b.s, z_rows)?;
        let eps = draw_eps(n, ACTION_DIM, &mut self.rng);
        let mut tape = Tape::new();
        let bp = self.policy.bind(&mut tape, true);
        let s = tape.constant(b.s.clone());
        let z = tape.constant(z_rows.clone());
        let (mean, ls) = bp.distribution(&mut tape, s, z)?;
        let act = bp.rsample(&mut tape, mean, ls, &eps);
        let q = match &self.critic {
            Critic::Decomposed(fc) => fc.bind(&mut tape, false, false).q_value(&mut tape, s, act, z)?,
            Critic::Monolithic(mc) => {
                let qnet = mc.q.bind(&mut tape, false);
                let x = tape.concat_cols(&[s, act, z]);
                qnet.forward(&mut tape, x)?
            }
        };
        let bm = tape.constant(mb_mean);
        let bl = tape.constant(mb_ls);
        let kl = gaussian_kl(&mut tape, mean, ls, bm, bl);
        let kl_mean = tape.value(kl).data().iter().sum::<f64>() / n as f64;
        let loss = policy_loss(&mut tape, q, kl, self.dual.rho1());
        let value = tape.value(loss).item();
        ensure_finite("policy loss", value, mb)?;
        let grads = tape.backward(loss)?;
        self.opts.policy.step(self.policy.net.params_mut(), &bp.net.grads(&grads))?;
        self.dual.update(kl_mean);
        let behavior = behavior_step(&mut self.behavior, &mut self.opts.behavior, &b.s, z_rows, &b.a)?;
        ensure_finite("behavior loss", behavior, mb)?;
        Ok((value, kl_mean, behavior))
    }

    /// One training step: every parameter group updated once, in order.
    pub fn train_step(&mut self, alpha: f64) -> Result<StepLosses> {
        let mb = self.sample_meta_batch()?;
        let mut out = StepLosses::default();

        let (enc, g) = self.encoder_objective(&mb, alpha, true)?;
        self.opts.encoder.step(self.encoder.params_mut(), &g)?;
        out.encoder = enc;
        self.log(Phase::Encoder);

        let z = self.latents(&mb)?;
        let z_rows = gather(&z, &mb.batch.task);

        out.reward = self.reward_phase(&mb, &z_rows, true)?;
        self.log(Phase::RewardWeights);

        out.psi = self.successor_phase(&mb, &z_rows, alpha)?;
        self.log(Phase::SuccessorFeatures);

        let (policy, kl, behavior) = self.policy_phase(&mb, &z_rows)?;
        out.policy = policy;
        out.kl = kl;
        out.behavior = behavior;
        self.log(Phase::Policy);

        self.critic.soft_update(self.config.zeta)?;
        self.log(Phase::TargetUpdate);

        self.reward_phase(&mb, &z_rows, false)?;
        self.log(Phase::Features);

        if !self.flows.is_empty() {
            let (_, g) = self.encoder_objective(&mb, alpha, false)?;
            self.opts.flows.step(self.flows.params_mut(), &g)?;
        }
        self.log(Phase::Flows);
        Ok(out)
    }

    /// Behavior cloning on latents from the current encoder.
    pub fn pretrain_behavior(&mut self, steps: usize) -> Result<f64> {
        let mut last = f64::NAN;
        for _ in 0..steps {
            let mb = self.sample_meta_batch()?;
            let z = gather(&self.latents(&mb)?, &mb.batch.task);
            last = behavior_step(&mut self.behavior, &mut self.opts.behavior, &mb.batch.s, &z, &mb.batch.a)?;
            ensure_finite("behavior loss", last, &mb)?;
        }
        Ok(last)
    }

    /// Generator for evaluation purpose `purpose` of episode `g`, independent
    /// of the training stream.
    fn eval_rng(&self, g: u64, purpose: u64) -> ChaCha8Rng {
        stream_rng(self.config.seed ^ 0x6576_616c, 4 * g + purpose)
    }

    pub fn actor(&self) -> PolicyActor<'_> {
        PolicyActor::new(&self.encoder, &self.flows, &self.policy, self.config.latent_mode)
    }

    /// Mean return over the configured number of rollouts on training tasks.
    pub fn evaluate_training(&mut self) -> Result<f64> {
        let mut rng = self.eval_rng(self.episode, 0);
        let env = self.eval_env();
        let mut steps = 0;
        let mut total = 0.0;
        let n = self.config.eval_rollouts();
        {
            let mut actor = self.actor();
            for k in 0..n {
                let task = &self.train[k % self.train.len()];
                let context = sample_window(task, self.config.context_transitions, &mut rng)?;
                actor.prepare(&task.spec, context, &mut rng)?;
                total += rollout_from(&mut actor, &task.spec, &env, [0.0, 0.0], 0, 1.0, &mut steps)?.total_return;
            }
        }
        self.env_steps += steps;
        Ok(total / n as f64)
    }

    /// Mean return and success rate over the held-out test tasks.
    pub fn evaluate_test(&mut self) -> Result<(f64, f64)> {
        self.evaluate_test_at(self.episode)
    }

    /// Test evaluation with the evaluation stream of episode `g`, which
    /// reproduces the `test_return` logged for `g` from a checkpoint taken
    /// after it.
    pub fn evaluate_test_at(&mut self, g: u64) -> Result<(f64, f64)> {
        let mut rng = self.eval_rng(g, 1);
        let env = self.eval_env();
        let mut steps = 0;
        let tasks: Vec<&TaskData> = self.test.iter().collect();
        let scores = meta_test(
            &mut self.actor(),
            &tasks,
            self.config.test_episodes_per_task,
            self.config.context_transitions,
            &env,
            &mut rng,
            &mut steps,
        )?;
        self.env_steps += steps;
        let n = scores.len() as f64;
        Ok((
            scores.iter().map(|s| s.mean_return).sum::<f64>() / n,
            scores.iter().map(|s| s.success).sum::<f64>() / n,
        ))
    }

    /// Mean critic value of the policy's action at dataset states, and the
    /// mean discounted Monte-Carlo return of the same policy from there.
    pub fn q_diagnostic(&mut self) -> Result<(f64, f64)> {
        let n = self.config.q_diag_states;
        if n == 0 {
            return Ok((f64::NAN, f64::NAN));
        }
        let mut rng = self.eval_rng(self.episode, 2);
        let mut steps = 0;
        let (mut q_sum, mut mc_sum) = (0.0, 0.0);
        for i in 0..n {
            let t = i % self.train.len();
            let tr = self.flat[t][rng.random_range(0..self.flat[t].len())];
            let task = &self.train[t];
            let context = sample_window(task, self.config.context_transitions, &mut rng)?;
            let z = infer_latent(&self.encoder, &self.flows, context, self.config.latent_mode, &mut rng)?;
            let a = self.policy.deterministic_action(&tr.s, &z)?;
            let q = self
                .critic
                .q_value(&Tensor::row(&tr.s), &Tensor::row(&a), &Tensor::row(&z))?
                .item()
                / self.config.reward_multiplier;
            // The deterministic actor takes the same first action `a`.
            let mut actor = self.actor();
            actor.fix_latent(z);
            let mc = rollout_from(&mut actor, &task.spec, &self.data_env, tr.s, tr.t, self.config.gamma, &mut steps)?;
            q_sum += q;
            mc_sum += mc.discounted_return;
        }
        self.env_steps += steps;
        Ok((q_sum / n as f64, mc_sum / n as f64))
    }

    pub fn run_episode(&mut self) -> Result<EpisodeRecord> {
        self.run_episode_with(&mut |t: &mut Trainer| t.evaluate_training())
    }

    /// One episode: sample the pessimism level, train, evaluate, feed the
    /// return back to the bandit. `evaluate` supplies the bandit feedback.
    pub fn run_episode_with(
        &mut self,
        evaluate: &mut dyn FnMut(&mut Trainer) -> Result<f64>,
    ) -> Result<EpisodeRecord> {
        let start = Instant::now();
        if !self.pretrained {
            self.pretrain_behavior(self.config.initial_steps)?;
            self.pretrained = true;
        }
        let g = self.episode;
        let (alpha, p_alpha) = match &mut self.bandit {
            Some(b) => b.sample(&mut self.rng),
            None => (0.0, 1.0),
        };
        let steps = self.config.steps_per_iteration;
        let mut losses = StepLosses::default();
        for _ in 0..steps {
            let l = self.train_step(alpha)?;
            losses.accumulate(&l, 1.0 / steps as f64);
        }
        let eval_return = evaluate(self)?;
        if let Some(b) = &mut self.bandit {
            b.update(eval_return)?;
        }
        let (test_return, test_success) = if self.test.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            self.evaluate_test()?
        };
        let (q_estimate, mc_return) = self.q_diagnostic()?;
        self.episode += 1;
        Ok(EpisodeRecord {
            g,
            alpha,
            p_alpha,
            losses,
            rho1: self.dual.rho1(),
            eval_return,
            test_return,
            test_success,
            q_estimate,
            mc_return,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

/// `r + γ(1 − done)·min_e ψ̂_e(s', a', z)ᵀW(z)`, `[n, 1]`.
fn bootstrap_q(fc: &FeatureCritic, b: &CriticBatch, a_next: &Tensor, z_rows: &Tensor, gamma: f64) -> Result<Tensor> {
    let w = fc.weights(z_rows)?;
    let next_in = concat(&[&b.s_next, a_next, z_rows]);
    let mut best: Option<Vec<f64>> = None;
    for t in &fc.psi_target {
        let psi = t.forward(&next_in)?;
        let q: Vec<f64> = (0..psi.rows())
            .map(|i| psi.row_slice(i).iter().zip(w.row_slice(i)).map(|(x, y)| x * y).sum())
            .collect();
        best = Some(match best {
            None => q,
            Some(prev) => prev.iter().zip(&q).map(|(a, b)| a.min(*b)).collect(),
        });
    }
    let q = best.expect("at least one target");
    let n = b.len();
    Ok(column(
        (0..n).map(|i| b.r.data()[i] + gamma * (1.0 - b.done.data()[i]) * q[i]),
        n,
    ))
}
