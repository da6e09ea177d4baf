//! Conservatism control: belief features built from the disagreement of the
//! two target critics, and an exponential-weights bandit that picks the
//! pessimism level from episode-to-episode return changes.

use ndgrad::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BeliefFeatures {
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    pub alpha: f64,
    pub belief: Vec<f64>,
}

/// Mean of the two target atoms shifted by `alpha` times their spread,
/// `sigma = sqrt((p1 - mean)^2 + (p2 - mean)^2)`.
pub fn belief_features(psi1: &[f64], psi2: &[f64], alpha: f64) -> Result<BeliefFeatures> {
    if psi1.len() != psi2.len() {
        return Err(Error::Dimension {
            what: "belief features",
            expected: psi1.len(),
            got: psi2.len(),
        });
    }
    let mut out = BeliefFeatures {
        mean: Vec::with_capacity(psi1.len()),
        sigma: Vec::with_capacity(psi1.len()),
        alpha,
        belief: Vec::with_capacity(psi1.len()),
    };
    for (&a, &b) in psi1.iter().zip(psi2) {
        let (m, s) = mean_spread(a, b);
        out.mean.push(m);
        out.sigma.push(s);
        out.belief.push(m + alpha * s);
    }
    Ok(out)
}

fn mean_spread(a: f64, b: f64) -> (f64, f64) {
    let m = 0.5 * (a + b);
    (m, ((a - m).powi(2) + (b - m).powi(2)).sqrt())
}

/// Batched belief features over `[batch, D]` target tensors.
pub fn belief_tensor(psi1: &Tensor, psi2: &Tensor, alpha: f64) -> Result<Tensor> {
    if psi1.shape() != psi2.shape() {
        return Err(Error::Dimension {
            what: "belief features",
            expected: psi1.len(),
            got: psi2.len(),
        });
    }
    let data = psi1
        .data()
        .iter()
        .zip(psi2.data())
        .map(|(&a, &b)| {
            let (m, s) = mean_spread(a, b);
            m + alpha * s
        })
        .collect();
    Ok(Tensor::new(psi1.shape().to_vec(), data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BanditConfig {
    pub arms: Vec<f64>,
    pub step_size: f64,
    /// Uniform mass mixed into the softmax so importance weights stay bounded.
    pub prob_floor: f64,
    /// Divide return differences by the largest |R_g − R_{g−1}| seen so far.
    pub normalize_returns: bool,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            arms: vec![-1.0, -0.75, -0.5, -0.25, 0.0],
            step_size: 0.1,
            prob_floor: 1e-3,
            normalize_returns: true,
        }
    }
}

impl BanditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() || self.arms.iter().any(|a| !(-1.0..=0.0).contains(a)) {
            return Err(Error::Config(format!(
                "bandit arms must be a non-empty subset of [-1, 0], got {:?}",
                self.arms
            )));
        }
        if self.step_size.is_nan() || self.step_size <= 0.0 {
            return Err(Error::Config("bandit step size must be positive".into()));
        }
        if !(self.prob_floor >= 0.0 && self.prob_floor * (self.arms.len() as f64) < 1.0) {
            return Err(Error::Config(format!(
                "probability floor {} too large for {} arms",
                self.prob_floor,
                self.arms.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    pub config: BanditConfig,
    pub weights: Vec<f64>,
    pub last_return: Option<f64>,
    /// Arm and its probability sampled for the running episode.
    pub current: Option<(usize, f64)>,
    pub episode: u64,
    pub return_scale: f64,
}

impl BanditState {
    pub fn new(config: BanditConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            weights: vec![0.0; config.arms.len()],
            config,
            last_return: None,
            current: None,
            episode: 0,
            return_scale: 0.0,
        })
    }

    pub fn arms(&self) -> &[f64] {
        &self.config.arms
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let max = self.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = self.weights.iter().map(|w| (w - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let floor = self.config.prob_floor;
        let keep = 1.0 - floor * exp.len() as f64;
        exp.iter().map(|e| keep * e / total + floor).collect()
    }

    /// Draw this episode's arm; returns `(alpha, probability)`.
    pub fn sample(&mut self, rng: &mut impl Rng) -> (f64, f64) {
        let p = self.probabilities();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = p.len() - 1;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                idx = i;
                break;
            }
        }
        self.current = Some((idx, p[idx]));
        (self.config.arms[idx], p[idx])
    }

    /// Feed back the episode return. Only the sampled arm moves, by
    /// `step · (R_g − R_{g−1}) / p`. The first episode only records `R_g`.
    pub fn update(&mut self, episode_return: f64) -> Result<()> {
        let Some((arm, prob)) = self.current.take() else {
            return Err(Error::Contract("bandit updated without a sampled arm".into()));
        };
        if !episode_return.is_finite() {
            return Err(Error::NonFinite {
                what: "episode return".into(),
                dump: format!("{episode_return}"),
            });
        }
        if let Some(prev) = self.last_return {
            let mut diff = episode_return - prev;
            if self.config.normalize_returns {
                self.return_scale = self.return_scale.max(diff.abs());
                if self.return_scale > 0.0 {
                    diff /= self.return_scale;
                }
            }
            self.weights[arm] += self.config.step_size * diff / prob.max(1e-12);
        }
        self.last_return = Some(episode_return);
        self.episode += 1;
        Ok(())
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["g", "alpha", "p_alpha", "R_g"].map(String::from).to_vec();
        h.extend((0..self.weights.len()).map(|i| format!("w_{i}")));
        h
    }

    /// Row for `bandit.csv` after an update.
    pub fn csv_row(&self, g: u64, alpha: f64, p_alpha: f64, episode_return: f64) -> Vec<String> {
        let mut row = vec![
            g.to_string(),
            alpha.to_string(),
            p_alpha.to_string(),
            episode_return.to_string(),
        ];
        row.extend(self.weights.iter().map(f64::to_string));
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw(arms: Vec<f64>) -> BanditState {
        BanditState::new(BanditConfig {
            arms,
            normalize_returns: false,
            ..BanditConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn agreement_collapses_uncertainty() {
        let b = belief_features(&[1.5, -2.0], &[1.5, -2.0], -0.7).unwrap();
        assert_eq!(b.sigma, vec![0.0, 0.0]);
        assert_eq!(b.belief, b.mean);
    }

    #[test]
    fn spread_of_one_and_three() {
        let b = belief_features(&[1.0], &[3.0], -1.0).unwrap();
        assert_eq!(b.mean[0], 2.0);
        assert!((b.sigma[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!((b.belief[0] - (2.0 - 2f64.sqrt())).abs() < 1e-15);
        assert!((b.belief[0] - 0.58579).abs() < 1e-5);
    }

    #[test]
    fn belief_length_mismatch() {
        assert!(matches!(
            belief_features(&[1.0, 2.0], &[1.0], 0.0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn uniform_weights_give_uniform_probabilities() {
        let b = BanditState::new(BanditConfig::default()).unwrap();
        for p in b.probabilities() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_softmax() {
        let mut b = BanditState::new(BanditConfig::default()).unwrap();
        b.weights = vec![10.0, 0.0, 0.0, 0.0, 0.0];
        assert!(b.probabilities()[0] > 0.99);
    }

    #[test]
    fn two_arm_update() {
        let mut b = raw(vec![-1.0, 0.0]);
        b.last_return = Some(0.0);
        b.current = Some((0, b.probabilities()[0]));
        b.update(1.0).unwrap();
        assert!((b.weights[0] - 0.2).abs() <= 4.0 * f64::EPSILON);
        assert_eq!(b.weights[1], 0.0);
    }

    #[test]
    fn unchanged_return_leaves_weights() {
        let mut b = raw(vec![-1.0, -0.5, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.sample(&mut rng);
        b.update(-3.25).unwrap();
        let before = b.weights.clone();
        b.sample(&mut rng);
        b.update(-3.25).unwrap();
        assert_eq!(b.weights, before);
    }

    #[test]
    fn first_episode_only_records() {
        let mut b = BanditState::new(BanditConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.sample(&mut rng);
        b.update(-40.0).unwrap();
        assert!(b.weights.iter().all(|w| *w == 0.0));
        assert_eq!(b.last_return, Some(-40.0));
        assert_eq!(b.episode, 1);
    }

    #[test]
    fn update_without_sample_is_a_contract_violation() {
        let mut b = BanditState::new(BanditConfig::default()).unwrap();
        assert!(matches!(b.update(1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn arms_outside_range_are_rejected() {
        let cfg = BanditConfig {
            arms: vec![0.5],
            ..BanditConfig::default()
        };
        assert!(BanditState::new(cfg).is_err());
    }
}
