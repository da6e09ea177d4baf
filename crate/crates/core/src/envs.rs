//! Parametric 2-D point navigation tasks, scripted behavior controllers and
//! offline dataset collection.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type State = [f64; 2];
pub type Action = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    PointRobot,
    PointRobotWind,
    PointRobotSparse,
    PointRobotNonstationary,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 4] = [
        TaskFamily::PointRobot,
        TaskFamily::PointRobotWind,
        TaskFamily::PointRobotSparse,
        TaskFamily::PointRobotNonstationary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::PointRobot => "point-robot",
            TaskFamily::PointRobotWind => "point-robot-wind",
            TaskFamily::PointRobotSparse => "point-robot-sparse",
            TaskFamily::PointRobotNonstationary => "point-robot-nonstationary",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown task family {s:?} (expected one of {})",
                    TaskFamily::ALL.map(|f| f.name()).join(", ")
                ))
            })
    }
}

/// Environment constants shared by every task of a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Displacement per unit action per step.
    pub step_scale: f64,
    /// Maximum wind strength per axis.
    pub max_wind: f64,
    pub sparsity_radius: f64,
    pub max_path_length: usize,
    pub period_mean: f64,
    pub period_std: f64,
    /// Goal shared by all wind tasks, which differ only in dynamics.
    pub wind_goal: [f64; 2],
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            step_scale: 0.1,
            max_wind: 0.05,
            sparsity_radius: 0.2,
            max_path_length: 500,
            period_mean: 250.0,
            period_std: 10.0,
            wind_goal: [0.0, 1.0],
        }
    }
}

/// Hidden parameters of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub goal: [f64; 2],
    pub wind: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_std: Option<f64>,
    pub seed: u64,
}

impl TaskSpec {
    /// Checks the family invariants (unit-semicircle goal, bounded wind).
    pub fn validate(&self, cfg: &EnvConfig) -> Result<()> {
        let semicircle = self.family != TaskFamily::PointRobotWind;
        if semicircle {
            let norm = self.goal[0].hypot(self.goal[1]);
            if (norm - 1.0).abs() > 1e-9 || self.goal[1] < 0.0 {
                return Err(Error::Config(format!(
                    "goal {:?} is not on the upper unit semicircle",
                    self.goal
                )));
            }
        }
        let lw = if self.family == TaskFamily::PointRobotWind {
            cfg.max_wind
        } else {
            0.0
        };
        if self.wind.iter().any(|w| w.abs() > lw) {
            return Err(Error::Config(format!(
                "wind {:?} outside [-{lw}, {lw}]^2",
                self.wind
            )));
        }
        if self.family == TaskFamily::PointRobotSparse
            && !self.sparsity_radius.is_some_and(|r| r > 0.0)
        {
            return Err(Error::Config("sparse task needs a positive radius".into()));
        }
        Ok(())
    }

    /// Goal in force at step `t`. Only the non-stationary family moves it:
    /// segment lengths are drawn from N(period_mean, period_std²) and each
    /// new goal is redrawn on the semicircle, all from the task seed.
    pub fn goal_at(&self, t: usize) -> [f64; 2] {
        if self.family != TaskFamily::PointRobotNonstationary {
            return self.goal;
        }
        let mean = self.period_mean.unwrap_or(250.0);
        let std = self.period_std.unwrap_or(10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let period = Normal::new(mean, std).expect("finite period distribution");
        let mut start = 0usize;
        let mut goal = self.goal;
        loop {
            let len = period.sample(&mut rng).round().max(1.0) as usize;
            if t < start + len {
                return goal;
            }
            start += len;
            goal = semicircle_goal(&mut rng);
        }
    }
}

fn semicircle_goal(rng: &mut impl Rng) -> [f64; 2] {
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    [theta.cos(), theta.sin()]
}

/// Sample disjoint training and test tasks.
pub fn sample_tasks(
    family: TaskFamily,
    n_train: usize,
    n_test: usize,
    cfg: &EnvConfig,
    seed: u64,
) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config(
            "need at least one training and one test task".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs: Vec<TaskSpec> = Vec::with_capacity(n_train + n_test);
    while specs.len() < n_train + n_test {
        let spec = match family {
            TaskFamily::PointRobotWind => TaskSpec {
                family,
                goal: cfg.wind_goal,
                wind: [
                    rng.random_range(-cfg.max_wind..=cfg.max_wind),
                    rng.random_range(-cfg.max_wind..=cfg.max_wind),
                ],
                sparsity_radius: None,
                period_mean: None,
                period_std: None,
                seed: rng.random(),
            },
            _ => TaskSpec {
                family,
                goal: semicircle_goal(&mut rng),
                wind: [0.0, 0.0],
                sparsity_radius: (family == TaskFamily::PointRobotSparse)
                    .then_some(cfg.sparsity_radius),
                period_mean: (family == TaskFamily::PointRobotNonstationary)
                    .then_some(cfg.period_mean),
                period_std: (family == TaskFamily::PointRobotNonstationary)
                    .then_some(cfg.period_std),
                seed: rng.random(),
            },
        };
        let duplicate = specs
            .iter()
            .any(|s| s.goal == spec.goal && s.wind == spec.wind);
        if !duplicate {
            specs.push(spec);
        }
    }
    let test = specs.split_off(n_train);
    Ok((specs, test))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: State,
    pub reward: f64,
    pub done: bool,
    /// The action had to be clamped into the box.
    pub clamped: bool,
}

pub fn clamp_action(a: Action) -> (Action, bool) {
    let c = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
    (c, c != a)
}

/// One environment transition: `s' = s + step_scale·a + wind`.
pub fn step(spec: &TaskSpec, cfg: &EnvConfig, s: State, a: Action, t: usize) -> StepOutcome {
    let (a, clamped) = clamp_action(a);
    let next_state = [
        s[0] + cfg.step_scale * a[0] + spec.wind[0],
        s[1] + cfg.step_scale * a[1] + spec.wind[1],
    ];
    let goal = spec.goal_at(t);
    let d2 = (next_state[0] - goal[0]).powi(2) + (next_state[1] - goal[1]).powi(2);
    let reward = match spec.family {
        TaskFamily::PointRobotSparse => {
            let radius = spec.sparsity_radius.unwrap_or(cfg.sparsity_radius);
            if d2.sqrt() <= radius {
                radius * radius - d2
            } else {
                0.0
            }
        }
        _ => -d2,
    };
    StepOutcome {
        next_state,
        reward,
        done: t + 1 >= cfg.max_path_length,
        clamped,
    }
}

/// Stateful wrapper that counts steps and clamped actions.
#[derive(Clone, Debug)]
pub struct PointEnv {
    pub spec: TaskSpec,
    pub cfg: EnvConfig,
    state: State,
    t: usize,
    pub steps_taken: u64,
    pub clamped_actions: u64,
}

impl PointEnv {
    pub fn new(spec: TaskSpec, cfg: EnvConfig) -> Self {
        Self {
            spec,
            cfg,
            state: [0.0, 0.0],
            t: 0,
            steps_taken: 0,
            clamped_actions: 0,
        }
    }

    pub fn reset(&mut self) -> State {
        self.state = [0.0, 0.0];
        self.t = 0;
        self.state
    }

    /// Start an episode part-way through, used for Monte-Carlo value checks.
    pub fn reset_to(&mut self, state: State, t: usize) {
        self.state = state;
        self.t = t;
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn step(&mut self, a: Action) -> StepOutcome {
        let out = step(&self.spec, &self.cfg, self.state, a, self.t);
        self.steps_taken += 1;
        if out.clamped {
            self.clamped_actions += 1;
        }
        self.state = out.next_state;
        self.t += 1;
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorStage {
    Random,
    Medium,
    Expert,
}

/// Noisy proportional controller standing in for a data-collecting policy at
/// some stage of training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicyLabel {
    pub stage: BehaviorStage,
    pub noise_std: f64,
    pub gain: f64,
}

impl BehaviorPolicyLabel {
    pub fn expert() -> Self {
        Self {
            stage: BehaviorStage::Expert,
            noise_std: 0.1,
            gain: 1.0,
        }
    }

    pub fn medium() -> Self {
        Self {
            stage: BehaviorStage::Medium,
            noise_std: 0.5,
            gain: 0.5,
        }
    }

    pub fn random() -> Self {
        Self {
            stage: BehaviorStage::Random,
            noise_std: 2.0,
            gain: 1.0,
        }
    }

    pub fn for_stage(stage: BehaviorStage) -> Self {
        match stage {
            BehaviorStage::Expert => Self::expert(),
            BehaviorStage::Medium => Self::medium(),
            BehaviorStage::Random => Self::random(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.gain > 0.0) {
            return Err(Error::Config(format!("invalid behavior label {self:?}")));
        }
        Ok(())
    }
}

/// `clip(gain·(goal − s) + N(0, noise²))`. The wind is never observed.
pub fn behavior_action(
    spec: &TaskSpec,
    label: &BehaviorPolicyLabel,
    s: State,
    t: usize,
    rng: &mut impl Rng,
) -> Action {
    let goal = spec.goal_at(t);
    let mut a = [0.0; 2];
    for k in 0..2 {
        let noise: f64 = rng.sample(StandardNormal);
        a[k] = (label.gain * (goal[k] - s[k]) + label.noise_std * noise).clamp(-1.0, 1.0);
    }
    a
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: usize,
    pub s: State,
    pub a: Action,
    pub r: f64,
    pub s_next: State,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub label: BehaviorStage,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn total_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.r).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub index: usize,
    pub split: Split,
    /// Hidden from the learner; kept for evaluation.
    pub spec: TaskSpec,
    pub trajectories: Vec<Trajectory>,
}

impl TaskData {
    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.transitions.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub label: BehaviorPolicyLabel,
    pub proportion: f64,
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub family: TaskFamily,
    pub seed: u64,
    pub trajectories_per_task: usize,
    pub env: EnvConfig,
    pub mixture: Vec<MixtureEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub meta: DatasetMeta,
    pub tasks: Vec<TaskData>,
}

impl OfflineDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TaskData> {
        self.tasks.iter().filter(move |t| t.split == split)
    }

    pub fn transition_count(&self) -> usize {
        self.tasks.iter().map(TaskData::transition_count).sum()
    }

    /// Structural invariants checked after collection and on load.
    pub fn validate(&self) -> Result<()> {
        for task in &self.tasks {
            task.spec.validate(&self.meta.env)?;
            if task.trajectories.len() != self.meta.trajectories_per_task {
                return Err(Error::Dataset(format!(
                    "task {} has {} trajectories, expected {}",
                    task.index,
                    task.trajectories.len(),
                    self.meta.trajectories_per_task
                )));
            }
            for (j, traj) in task.trajectories.iter().enumerate() {
                let Some(first) = traj.transitions.first() else {
                    return Err(Error::Dataset(format!(
                        "task {} trajectory {j} is empty",
                        task.index
                    )));
                };
                if first.s != [0.0, 0.0] || first.t != 0 {
                    return Err(Error::Dataset(format!(
                        "task {} trajectory {j} does not start at the origin",
                        task.index
                    )));
                }
                for tr in &traj.transitions {
                    if tr.a.iter().any(|a| a.abs() > 1.0) {
                        return Err(Error::Dataset(format!(
                            "task {} trajectory {j} step {}: action {:?} outside the box",
                            task.index, tr.t, tr.a
                        )));
                    }
                    if tr.t >= self.meta.env.max_path_length {
                        return Err(Error::Dataset(format!(
                            "task {} trajectory {j}: step {} beyond the path limit",
                            task.index, tr.t
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Split `n` items by proportion with largest-remainder rounding.
pub fn allocate_counts(proportions: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&i, &j| {
        let fi = raw[i] - raw[i].floor();
        let fj = raw[j] - raw[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Roll out one behavior trajectory from the origin.
pub fn rollout_behavior(
    spec: &TaskSpec,
    cfg: &EnvConfig,
    label: &BehaviorPolicyLabel,
    rng: &mut impl Rng,
) -> Trajectory {
    let mut s = [0.0, 0.0];
    let mut transitions = Vec::with_capacity(cfg.max_path_length);
    for t in 0..cfg.max_path_length {
        let a = behavior_action(spec, label, s, t, rng);
        let out = step(spec, cfg, s, a, t);
        transitions.push(Transition {
            t,
            s,
            a,
            r: out.reward,
            s_next: out.next_state,
            done: out.done,
        });
        s = out.next_state;
        if out.done {
            break;
        }
    }
    Trajectory {
        label: label.stage,
        transitions,
    }
}

/// Collect `trajectories_per_task` behavior trajectories for every task.
/// Each task draws from its own stream of the seeded generator, so tasks
/// are independent of each other and of their order.
pub fn collect_dataset(
    train: &[TaskSpec],
    test: &[TaskSpec],
    mixture: &[MixtureEntry],
    trajectories_per_task: usize,
    cfg: &EnvConfig,
    seed: u64,
) -> Result<OfflineDataset> {
    if mixture.is_empty() {
        return Err(Error::Config("empty behavior mixture".into()));
    }
    let total: f64 = mixture.iter().map(|m| m.proportion).sum();
    if (total - 1.0).abs() > 1e-9 || mixture.iter().any(|m| m.proportion < 0.0) {
        return Err(Error::Config(format!(
            "mixture proportions must be non-negative and sum to 1, got {total}"
        )));
    }
    for m in mixture {
        m.label.validate()?;
    }
    let family = train
        .first()
        .or(test.first())
        .map(|s| s.family)
        .ok_or_else(|| Error::Config("no tasks to collect".into()))?;
    let proportions: Vec<f64> = mixture.iter().map(|m| m.proportion).collect();
    let counts = allocate_counts(&proportions, trajectories_per_task);
    let labels: Vec<BehaviorPolicyLabel> = mixture
        .iter()
        .zip(&counts)
        .flat_map(|(m, &c)| std::iter::repeat_n(m.label, c))
        .collect();

    let mut tasks = Vec::with_capacity(train.len() + test.len());
    let all = train
        .iter()
        .map(|s| (s, Split::Train))
        .chain(test.iter().map(|s| (s, Split::Test)));
    for (index, (spec, split)) in all.enumerate() {
        spec.validate(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64 + 1);
        let trajectories = labels
            .iter()
            .map(|label| rollout_behavior(spec, cfg, label, &mut rng))
            .collect();
        tasks.push(TaskData {
            index,
            split,
            spec: spec.clone(),
            trajectories,
        });
    }
    let dataset = OfflineDataset {
        meta: DatasetMeta {
            family,
            seed,
            trajectories_per_task,
            env: cfg.clone(),
            mixture: mixture.to_vec(),
        },
        tasks,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// The default 40/40/20 expert/medium/random mixture.
pub fn default_mixture() -> Vec<MixtureEntry> {
    mixture(0.4, 0.4, 0.2)
}

pub fn mixture(expert: f64, medium: f64, random: f64) -> Vec<MixtureEntry> {
    [
        (BehaviorPolicyLabel::expert(), expert),
        (BehaviorPolicyLabel::medium(), medium),
        (BehaviorPolicyLabel::random(), random),
    ]
    .into_iter()
    .filter(|(_, p)| *p > 0.0)
    .map(|(label, proportion)| MixtureEntry { label, proportion })
    .collect()
}
