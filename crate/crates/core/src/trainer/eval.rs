use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{
    behavior_action, Action, BehaviorPolicyLabel, EnvConfig, PointEnv, State, TaskData, TaskSpec,
    Transition,
};
use crate::error::{Error, Result};
use crate::policy::GaussianPolicy;
use crate::task_inference::{ContextEncoder, FlowChain};
use crate::trainer::config::LatentMode;

/// Anything that can act in a task after seeing an offline context.
pub trait Actor {
    fn prepare(&mut self, spec: &TaskSpec, context: &[Transition], rng: &mut ChaCha8Rng) -> Result<()>;
    fn act(&mut self, s: State, t: usize) -> Result<Action>;
}

/// The learned meta-policy acting on the inferred latent.
pub struct PolicyActor<'a> {
    pub encoder: &'a ContextEncoder,
    pub flows: &'a FlowChain,
    pub policy: &'a GaussianPolicy,
    pub mode: LatentMode,
    /// Fixed latent overriding inference, for swap tests.
    pub forced: Option<Vec<f64>>,
    z: Vec<f64>,
}

impl<'a> PolicyActor<'a> {
    pub fn new(
        encoder: &'a ContextEncoder,
        flows: &'a FlowChain,
        policy: &'a GaussianPolicy,
        mode: LatentMode,
    ) -> Self {
        Self {
            encoder,
            flows,
            policy,
            mode,
            forced: None,
            z: Vec::new(),
        }
    }

    pub fn latent(&self) -> &[f64] {
        &self.z
    }

    /// Act on `z` from now on, ignoring contexts.
    pub fn fix_latent(&mut self, z: Vec<f64>) {
        self.z = z.clone();
        self.forced = Some(z);
    }
}

/// Latent used at evaluation time.
pub fn infer_latent(
    encoder: &ContextEncoder,
    flows: &FlowChain,
    context: &[Transition],
    mode: LatentMode,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let z0 = match mode {
        LatentMode::Mean => encoder.posterior(context)?.0,
        LatentMode::Sample => encoder.encode(context, rng)?.2,
    };
    Ok(flows.forward(&z0)?.0)
}

impl Actor for PolicyActor<'_> {
    fn prepare(&mut self, _spec: &TaskSpec, context: &[Transition], rng: &mut ChaCha8Rng) -> Result<()> {
        self.z = match &self.forced {
            Some(z) => z.clone(),
            None => infer_latent(self.encoder, self.flows, context, self.mode, rng)?,
        };
        Ok(())
    }

    fn act(&mut self, s: State, _t: usize) -> Result<Action> {
        self.policy.deterministic_action(&s, &self.z)
    }
}

/// Scripted controller that reads the task parameters directly.
pub struct ScriptedActor {
    pub label: BehaviorPolicyLabel,
    spec: Option<TaskSpec>,
    rng: ChaCha8Rng,
}

impl ScriptedActor {
    pub fn new(label: BehaviorPolicyLabel, rng: ChaCha8Rng) -> Self {
        Self {
            label,
            spec: None,
            rng,
        }
    }
}

impl Actor for ScriptedActor {
    fn prepare(&mut self, spec: &TaskSpec, _context: &[Transition], _rng: &mut ChaCha8Rng) -> Result<()> {
        self.spec = Some(spec.clone());
        Ok(())
    }

    fn act(&mut self, s: State, t: usize) -> Result<Action> {
        let spec = self
            .spec
            .as_ref()
            .ok_or_else(|| Error::Contract("scripted actor used before prepare".into()))?;
        Ok(behavior_action(spec, &self.label, s, t, &mut self.rng))
    }
}

/// A window of at most `h` consecutive transitions from a random trajectory.
/// The start is drawn so the window is as long as the trajectory allows.
pub fn sample_window<'a>(task: &'a TaskData, h: usize, rng: &mut impl Rng) -> Result<&'a [Transition]> {
    if task.trajectories.is_empty() {
        return Err(Error::Dataset(format!("task {} has no trajectories", task.index)));
    }
    let traj = &task.trajectories[rng.random_range(0..task.trajectories.len())].transitions;
    if traj.is_empty() {
        return Err(Error::Dataset(format!("task {} has an empty trajectory", task.index)));
    }
    let len = h.min(traj.len());
    let start = rng.random_range(0..=traj.len() - len);
    Ok(&traj[start..start + len])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutResult {
    pub total_return: f64,
    pub discounted_return: f64,
    pub final_distance: f64,
    pub steps: usize,
}

/// Run `actor` from `(s0, t0)` until the environment reports done.
pub fn rollout_from(
    actor: &mut dyn Actor,
    spec: &TaskSpec,
    cfg: &EnvConfig,
    s0: State,
    t0: usize,
    gamma: f64,
    env_steps: &mut u64,
) -> Result<RolloutResult> {
    let mut env = PointEnv::new(spec.clone(), cfg.clone());
    env.reset_to(s0, t0);
    let mut out = RolloutResult {
        total_return: 0.0,
        discounted_return: 0.0,
        final_distance: 0.0,
        steps: 0,
    };
    let mut discount = 1.0;
    if t0 >= cfg.max_path_length {
        return Ok(out);
    }
    loop {
        let t = env.time();
        let a = actor.act(env.state(), t)?;
        let step = env.step(a);
        *env_steps += 1;
        out.total_return += step.reward;
        out.discounted_return += discount * step.reward;
        discount *= gamma;
        out.steps += 1;
        if step.done {
            let goal = spec.goal_at(t);
            let s = step.next_state;
            out.final_distance = ((s[0] - goal[0]).powi(2) + (s[1] - goal[1]).powi(2)).sqrt();
            return Ok(out);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskScore {
    pub task: usize,
    pub mean_return: f64,
    /// Fraction of rollouts ending within the sparsity radius of the goal.
    pub success: f64,
}

/// Per task: sample an offline context, let the actor infer from it, then
/// roll out from the origin. Returns are averaged over episodes.
pub fn meta_test(
    actor: &mut dyn Actor,
    tasks: &[&TaskData],
    episodes_per_task: usize,
    context_transitions: usize,
    cfg: &EnvConfig,
    rng: &mut ChaCha8Rng,
    env_steps: &mut u64,
) -> Result<Vec<TaskScore>> {
    if tasks.is_empty() {
        return Err(Error::Config("meta-test needs at least one test task dataset".into()));
    }
    let mut scores = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut total = 0.0;
        let mut hits = 0usize;
        for _ in 0..episodes_per_task {
            let context = sample_window(task, context_transitions, rng)?;
            actor.prepare(&task.spec, context, rng)?;
            let r = rollout_from(actor, &task.spec, cfg, [0.0, 0.0], 0, 1.0, env_steps)?;
            total += r.total_return;
            if r.final_distance <= task.spec.sparsity_radius.unwrap_or(cfg.sparsity_radius) {
                hits += 1;
            }
        }
        scores.push(TaskScore {
            task: task.index,
            mean_return: total / episodes_per_task as f64,
            success: hits as f64 / episodes_per_task as f64,
        });
    }
    Ok(scores)
}
