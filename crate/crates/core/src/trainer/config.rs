use std::fmt;
use std::str::FromStr;

use ndgrad::Activation;
use serde::{Deserialize, Serialize};

use crate::aco::BanditConfig;
use crate::error::{Error, Result};
use crate::sf_critic::TdLoss;

/// Which pieces of the method are switched on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Double successor features, Huber TD loss, belief targets, bandit-tuned pessimism, flows.
    #[default]
    Full,
    /// Single successor-feature network, plain squared TD, no pessimism or bandit.
    NoAco,
    /// No flow layers: the latent is the base Gaussian sample.
    NoFti,
    /// Undecomposed `Q(s, a, z)` trained with squared TD.
    VanillaQ,
    /// As `Full` but with the squared TD loss in place of the Huber loss.
    DistQOff,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoAco,
        Variant::NoFti,
        Variant::VanillaQ,
        Variant::DistQOff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAco => "no-aco",
            Variant::NoFti => "no-fti",
            Variant::VanillaQ => "vanilla-q",
            Variant::DistQOff => "dist-q-off",
        }
    }

    pub fn decomposed(self) -> bool {
        self != Variant::VanillaQ
    }

    pub fn uses_bandit(self) -> bool {
        matches!(self, Variant::Full | Variant::NoFti | Variant::DistQOff)
    }

    pub fn critics(self) -> usize {
        if self == Variant::NoAco {
            1
        } else {
            2
        }
    }

    pub fn td_loss(self, kappa: f64) -> TdLoss {
        match self {
            Variant::Full | Variant::NoFti => TdLoss::Huber(kappa),
            _ => TdLoss::Squared,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// How evaluation turns a context into a latent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    /// Push the posterior mean through the flows.
    #[default]
    Mean,
    /// Flow a fresh posterior sample.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    pub iterations: u64,
    pub steps_per_iteration: usize,
    /// Behavior-cloning steps before the first episode.
    pub initial_steps: usize,
    /// Environment steps per bandit evaluation; divided by the path length
    /// to give the number of rollouts.
    pub eval_steps: usize,
    pub context_transitions: usize,
    pub max_path_length: usize,
    /// Transitions per task in each update batch.
    pub batch_size: usize,
    pub meta_batch: usize,
    /// How often one task may appear in a meta-batch.
    pub max_task_repeats: usize,
    pub learning_rate: f64,
    /// Factor applied to rewards in critic and reward-model targets. Context
    /// windows and reported returns stay in environment units.
    pub reward_multiplier: f64,
    pub zeta: f64,
    pub gamma: f64,
    pub rho2: f64,
    pub rho3: f64,
    pub huber_kappa: f64,
    pub latent_dim: usize,
    pub flow_layers: usize,
    pub flow_init_scale: f64,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: String,
    pub target_kl: f64,
    pub dual_lr: f64,
    pub bandit: BanditConfig,
    pub latent_mode: LatentMode,
    pub test_episodes_per_task: usize,
    /// Dataset states per episode used to compare the critic with
    /// Monte-Carlo returns of the policy; 0 disables the diagnostic.
    pub q_diag_states: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl TrainConfig {
    /// Full-scale settings.
    pub fn full_scale() -> Self {
        Self {
            variant: Variant::Full,
            seed: 0,
            iterations: 200,
            steps_per_iteration: 1000,
            initial_steps: 2000,
            eval_steps: 5000,
            context_transitions: 400,
            max_path_length: 500,
            batch_size: 256,
            meta_batch: 16,
            max_task_repeats: 2,
            learning_rate: 3e-4,
            reward_multiplier: 1.0,
            zeta: 0.005,
            gamma: 0.99,
            rho2: 0.1,
            rho3: 0.01,
            huber_kappa: 1.0,
            latent_dim: 5,
            flow_layers: 3,
            flow_init_scale: 0.1,
            feature_dim: 8,
            hidden: vec![64, 64],
            embed_dim: 32,
            activation: "tanh".into(),
            target_kl: 0.5,
            dual_lr: 1e-3,
            bandit: BanditConfig::default(),
            latent_mode: LatentMode::Mean,
            test_episodes_per_task: 1,
            q_diag_states: 32,
            checkpoint_every: 10,
        }
    }

    /// Single-core desk scale.
    pub fn desk() -> Self {
        Self {
            iterations: 30,
            steps_per_iteration: 200,
            initial_steps: 500,
            eval_steps: 500,
            context_transitions: 100,
            max_path_length: 100,
            batch_size: 128,
            meta_batch: 4,
            learning_rate: 1e-3,
            reward_multiplier: 10.0,
            gamma: 0.9,
            zeta: 0.05,
            checkpoint_every: 5,
            ..Self::full_scale()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full-scale" => Ok(Self::full_scale()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset '{other}' (full-scale, desk)"))),
        }
    }

    pub fn activation(&self) -> Result<Activation> {
        Activation::parse(&self.activation)
            .ok_or_else(|| Error::Config(format!("unknown activation '{}'", self.activation)))
    }

    /// Flow layers actually built for this variant.
    pub fn effective_flow_layers(&self) -> usize {
        if self.variant == Variant::NoFti {
            0
        } else {
            self.flow_layers
        }
    }

    pub fn eval_rollouts(&self) -> usize {
        (self.eval_steps / self.max_path_length).max(1)
    }

    pub fn validate(&self, train_tasks: usize) -> Result<()> {
        let positive = [
            ("iterations", self.iterations as usize),
            ("steps_per_iteration", self.steps_per_iteration),
            ("eval_steps", self.eval_steps),
            ("context_transitions", self.context_transitions),
            ("max_path_length", self.max_path_length),
            ("batch_size", self.batch_size),
            ("meta_batch", self.meta_batch),
            ("max_task_repeats", self.max_task_repeats),
            ("latent_dim", self.latent_dim),
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("test_episodes_per_task", self.test_episodes_per_task),
            ("checkpoint_every", self.checkpoint_every as usize),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let rates = [
            ("learning_rate", self.learning_rate),
            ("rho2", self.rho2),
            ("rho3", self.rho3),
            ("huber_kappa", self.huber_kappa),
            ("target_kl", self.target_kl),
            ("dual_lr", self.dual_lr),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.reward_multiplier > 0.0 && self.reward_multiplier.is_finite()) {
            return Err(Error::Config(format!("reward_multiplier must be positive, got {}", self.reward_multiplier)));
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(Error::Config(format!("zeta must lie in (0, 1], got {}", self.zeta)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if train_tasks == 0 {
            return Err(Error::Config("no training tasks".into()));
        }
        if self.meta_batch > train_tasks * self.max_task_repeats {
            return Err(Error::Config(format!(
                "meta_batch {} exceeds {} training tasks x {} repeats",
                self.meta_batch, train_tasks, self.max_task_repeats
            )));
        }
        self.activation()?;
        self.bandit.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        TrainConfig::full_scale().validate(8).unwrap();
        TrainConfig::desk().validate(8).unwrap();
        assert_eq!(TrainConfig::full_scale().eval_rollouts(), 10);
        assert_eq!(TrainConfig::desk().eval_rollouts(), 5);
    }

    #[test]
    fn meta_batch_bounded_by_repeats() {
        let cfg = TrainConfig::full_scale();
        assert!(cfg.validate(8).is_ok());
        assert!(matches!(cfg.validate(7), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let cfg = TrainConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"nope": 1}"#).is_err());
        let partial: TrainConfig = serde_json::from_str(r#"{"variant": "no-aco"}"#).unwrap();
        assert_eq!(partial.variant, Variant::NoAco);
        assert_eq!(partial.batch_size, 256);
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
