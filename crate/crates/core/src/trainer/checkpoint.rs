use std::collections::HashMap;
use std::path::Path;

use ndgrad::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aco::BanditState;
use crate::envs::OfflineDataset;
use crate::error::{Error, Result};
use crate::persistence::{load_checkpoint, save_checkpoint};
use crate::policy::DualVariable;
use crate::trainer::{TrainConfig, Trainer};

/// Exact position of a ChaCha generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// Decimal, since the position is 128-bit.
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Contract("malformed generator state in checkpoint".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainerState {
    config: TrainConfig,
    episode: u64,
    env_steps: u64,
    pretrained: bool,
    rng: RngState,
    bandit: Option<BanditState>,
    dual: DualVariable,
    adam_steps: Vec<(String, u64)>,
}

impl Trainer {
    /// Parameters, optimizer moments and the dual variable, by name.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (group, adam) in self.opts.named() {
            let (m, v) = adam.moments();
            for (i, t) in m.iter().enumerate() {
                out.push((format!("adam.{group}.m{i}"), t.clone()));
            }
            for (i, t) in v.iter().enumerate() {
                out.push((format!("adam.{group}.v{i}"), t.clone()));
            }
        }
        out.push(("dual.log_rho1".into(), Tensor::scalar(self.dual.log_rho1)));
        out
    }

    /// Everything needed to continue bit-identically, at `<base>.{bin,json}`.
    pub fn save_checkpoint(&self, base: &Path) -> Result<()> {
        let state = TrainerState {
            config: self.config.clone(),
            episode: self.episode,
            env_steps: self.env_steps,
            pretrained: self.pretrained,
            rng: RngState::capture(&self.rng),
            bandit: self.bandit.clone(),
            dual: self.dual.clone(),
            adam_steps: self
                .opts
                .named()
                .into_iter()
                .map(|(g, a)| (g.to_string(), a.steps()))
                .collect(),
        };
        save_checkpoint(
            &self.checkpoint_tensors(),
            self.config.seed,
            serde_json::to_value(&state)?,
            base,
        )?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint over the same dataset.
    pub fn resume(dataset: &OfflineDataset, base: &Path) -> Result<Trainer> {
        let (manifest, tensors) = load_checkpoint(base)?;
        let state: TrainerState = serde_json::from_value(manifest.extra)?;
        let mut trainer = Trainer::new(state.config.clone(), dataset)?;
        let mut by_name: HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: &str, like: &Tensor| -> Result<Tensor> {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != like.shape() {
                return Err(Error::Contract(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t)
        };
        let names: Vec<String> = trainer.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(trainer.params_mut()) {
            *p = take(name, p)?;
        }
        let steps: HashMap<String, u64> = state.adam_steps.iter().cloned().collect();
        for (group, adam) in trainer.opts.named_mut() {
            let (m0, v0) = adam.moments();
            let m = m0
                .iter()
                .enumerate()
                .map(|(i, like)| take(&format!("adam.{group}.m{i}"), like))
                .collect::<Result<Vec<_>>>()?;
            let v = v0
                .iter()
                .enumerate()
                .map(|(i, like)| take(&format!("adam.{group}.v{i}"), like))
                .collect::<Result<Vec<_>>>()?;
            let step = *steps
                .get(group)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks optimizer {group}")))?;
            adam.restore(step, m, v)?;
        }
        trainer.dual = state.dual;
        trainer.dual.log_rho1 = take("dual.log_rho1", &Tensor::scalar(0.0))?.item();
        trainer.bandit = state.bandit;
        trainer.rng = state.rng.restore()?;
        trainer.episode = state.episode;
        trainer.env_steps = state.env_steps;
        trainer.pretrained = state.pretrained;
        Ok(trainer)
    }
}
