//! Decomposed critic: features `φ(s, a, s', z)`, reward weights `W(z)` and
//! two successor-feature networks `ψ_e(s, a, z)` with Polyak targets, so that
//! `r ≈ φᵀW` and `Q ≈ ψᵀW`. A monolithic `Q(s, a, z)` critic is kept for
//! comparison runs.

use ndgrad::{Activation, BoundMlp, Gradients, Mlp, Tape, Tensor, Var};
use rand::Rng;

use crate::aco::belief_tensor;
use crate::error::{Error, Result};

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;

/// Transitions for one update, one row per sample. `task` maps each row to
/// its context window so per-task latents can be broadcast.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticBatch {
    pub s: Tensor,
    pub a: Tensor,
    pub r: Tensor,
    pub s_next: Tensor,
    /// 1.0 for terminal transitions, else 0.0.
    pub done: Tensor,
    pub task: Vec<usize>,
}

impl CriticBatch {
    pub fn len(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.task.is_empty()
    }
}

/// Column-wise concatenation of equally tall tensors.
pub fn concat(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            assert_eq!(p.rows(), rows, "concat: row counts differ");
            data.extend_from_slice(p.row_slice(i));
        }
    }
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

/// Rows of `m` picked by `idx`.
pub fn gather(m: &Tensor, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row_slice(i));
    }
    Tensor::matrix(idx.len(), m.cols(), data).expect("positive extents")
}

/// `φᵀW`.
pub fn predict_reward(phi: &[f64], w: &[f64]) -> Result<f64> {
    if phi.len() != w.len() {
        return Err(Error::Dimension {
            what: "reward prediction",
            expected: phi.len(),
            got: w.len(),
        });
    }
    Ok(phi.iter().zip(w).map(|(a, b)| a * b).sum())
}

/// Row-wise dot product `[n, D] · [n, D] -> [n, 1]` on the tape.
pub fn rowwise_dot(tape: &mut Tape, a: Var, b: Var) -> Var {
    let p = tape.mul(a, b);
    tape.sum_cols(p)
}

fn rowwise_dot_plain(a: &Tensor, b: &Tensor) -> Tensor {
    let data = (0..a.rows())
        .map(|i| a.row_slice(i).iter().zip(b.row_slice(i)).map(|(x, y)| x * y).sum())
        .collect();
    Tensor::matrix(a.rows(), 1, data).expect("positive extents")
}

/// Mean of `½(r − pred)²`.
pub fn reward_loss(tape: &mut Tape, pred: Var, r: Var) -> Var {
    ndgrad::half_mse(tape, r, pred)
}

/// TD penalty for the ψ networks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TdLoss {
    Huber(f64),
    Squared,
}

/// Per-atom penalty summed over atoms and averaged over the batch.
pub fn psi_loss(tape: &mut Tape, psi: Var, targets: &Tensor, loss: TdLoss) -> Result<Var> {
    if tape.value(psi).shape() != targets.shape() {
        return Err(Error::Dimension {
            what: "psi targets",
            expected: tape.value(psi).len(),
            got: targets.len(),
        });
    }
    let n = targets.rows() as f64;
    let t = tape.constant(targets.clone());
    let residual = tape.sub(psi, t);
    let total = match loss {
        TdLoss::Huber(kappa) => ndgrad::huber(tape, residual, kappa)?,
        TdLoss::Squared => {
            let sq = tape.square(residual);
            let s = tape.sum(sq);
            tape.scale(s, 0.5)
        }
    };
    Ok(tape.scale(total, 1.0 / n))
}

/// `min_e ψ_eᵀW` over the critics given, `[n, 1]`.
pub fn corrected_q(tape: &mut Tape, psis: &[Var], w: Var) -> Var {
    let mut q = rowwise_dot(tape, psis[0], w);
    for &p in &psis[1..] {
        let qe = rowwise_dot(tape, p, w);
        q = tape.min(q, qe);
    }
    q
}

fn check_zeta(zeta: f64) -> Result<()> {
    if zeta > 0.0 && zeta <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("soft-update rate must lie in (0, 1], got {zeta}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCritic {
    pub phi: Mlp,
    pub w: Mlp,
    pub psi: Vec<Mlp>,
    pub psi_target: Vec<Mlp>,
}

pub struct BoundCritic {
    pub phi: BoundMlp,
    pub w: BoundMlp,
    pub psi: Vec<BoundMlp>,
}

impl FeatureCritic {
    /// `critics` is 2 for the double-ψ critic, 1 for the single-target form.
    pub fn new(
        latent_dim: usize,
        feature_dim: usize,
        hidden: &[usize],
        activation: Activation,
        critics: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let sizes = |input: usize| {
            let mut s = vec![input];
            s.extend_from_slice(hidden);
            s.push(feature_dim);
            s
        };
        let phi = Mlp::new(&sizes(2 * STATE_DIM + ACTION_DIM + latent_dim), activation, rng);
        let w = Mlp::new(&sizes(latent_dim), activation, rng);
        let psi: Vec<Mlp> = (0..critics)
            .map(|_| Mlp::new(&sizes(STATE_DIM + ACTION_DIM + latent_dim), activation, rng))
            .collect();
        let psi_target = psi.clone();
        Self {
            phi,
            w,
            psi,
            psi_target,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w.output_dim()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut nets: Vec<(String, &Mlp)> = vec![
            ("critic.phi".into(), &self.phi),
            ("critic.w".into(), &self.w),
        ];
        for (e, net) in self.psi.iter().enumerate() {
            nets.push((format!("critic.psi{}", e + 1), net));
        }
        for (e, net) in self.psi_target.iter().enumerate() {
            nets.push((format!("critic.psi_target{}", e + 1), net));
        }
        nets.into_iter()
            .flat_map(|(prefix, net)| net.param_names(&prefix).into_iter().zip(net.params()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.phi.params_mut();
        out.extend(self.w.params_mut());
        for net in self.psi.iter_mut().chain(self.psi_target.iter_mut()) {
            out.extend(net.params_mut());
        }
        out
    }

    /// Bind the online networks. Targets are only ever evaluated off-tape.
    pub fn bind(&self, tape: &mut Tape, phi_w: bool, psi: bool) -> BoundCritic {
        BoundCritic {
            phi: self.phi.bind(tape, phi_w),
            w: self.w.bind(tape, phi_w),
            psi: self.psi.iter().map(|n| n.bind(tape, psi)).collect(),
        }
    }

    /// `θ̂_e ← ζθ_e + (1 − ζ)θ̂_e`.
    pub fn soft_update(&mut self, zeta: f64) -> Result<()> {
        check_zeta(zeta)?;
        for (t, o) in self.psi_target.iter_mut().zip(&self.psi) {
            t.soft_update_from(o, zeta);
        }
        Ok(())
    }

    pub fn features(&self, s: &Tensor, a: &Tensor, s_next: &Tensor, z: &Tensor) -> Result<Tensor> {
        Ok(self.phi.forward(&concat(&[s, a, s_next, z]))?)
    }

    pub fn weights(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.w.forward(z)?)
    }

    /// `[φ + γ(1 − done)·ψ̃(s', a', z)]`, with `ψ̃` the belief over the two
    /// targets at pessimism `alpha`. A single target is used as is.
    pub fn td_targets(
        &self,
        batch: &CriticBatch,
        a_next: &Tensor,
        z_rows: &Tensor,
        alpha: f64,
        gamma: f64,
    ) -> Result<Tensor> {
        let phi = self.features(&batch.s, &batch.a, &batch.s_next, z_rows)?;
        let next_in = concat(&[&batch.s_next, a_next, z_rows]);
        let boot = match self.psi_target.as_slice() {
            [single] => single.forward(&next_in)?,
            [t1, t2] => belief_tensor(&t1.forward(&next_in)?, &t2.forward(&next_in)?, alpha)?,
            other => {
                return Err(Error::Config(format!(
                    "expected one or two target critics, found {}",
                    other.len()
                )))
            }
        };
        let d = phi.cols();
        let mut out = phi.into_data();
        for (i, row) in out.chunks_mut(d).enumerate() {
            let keep = gamma * (1.0 - batch.done.data()[i]);
            for (o, b) in row.iter_mut().zip(boot.row_slice(i)) {
                *o += keep * b;
            }
        }
        Ok(Tensor::matrix(batch.len(), d, out)?)
    }

    /// Online `ψ_eᵀW` for each critic, `[n, 1]` each.
    pub fn q_per_critic(&self, s: &Tensor, a: &Tensor, z: &Tensor) -> Result<Vec<Tensor>> {
        let w = self.weights(z)?;
        let input = concat(&[s, a, z]);
        self.psi
            .iter()
            .map(|n| Ok(rowwise_dot_plain(&n.forward(&input)?, &w)))
            .collect()
    }

    /// `min_e ψ_eᵀW`, `[n, 1]`.
    pub fn q_value(&self, s: &Tensor, a: &Tensor, z: &Tensor) -> Result<Tensor> {
        let qs = self.q_per_critic(s, a, z)?;
        let mut out = qs[0].clone();
        for q in &qs[1..] {
            for (o, v) in out.data_mut().iter_mut().zip(q.data()) {
                *o = o.min(*v);
            }
        }
        Ok(out)
    }
}

impl BoundCritic {
    pub fn features(
        &self,
        tape: &mut Tape,
        s: Var,
        a: Var,
        s_next: Var,
        z_rows: Var,
    ) -> Result<Var> {
        let x = tape.concat_cols(&[s, a, s_next, z_rows]);
        Ok(self.phi.forward(tape, x)?)
    }

    pub fn weights(&self, tape: &mut Tape, z_rows: Var) -> Result<Var> {
        Ok(self.w.forward(tape, z_rows)?)
    }

    pub fn psi(&self, tape: &mut Tape, s: Var, a: Var, z_rows: Var) -> Result<Vec<Var>> {
        let x = tape.concat_cols(&[s, a, z_rows]);
        self.psi
            .iter()
            .map(|n| Ok(n.forward(tape, x)?))
            .collect()
    }

    /// `min_e ψ_eᵀW`.
    pub fn q_value(&self, tape: &mut Tape, s: Var, a: Var, z_rows: Var) -> Result<Var> {
        let psis = self.psi(tape, s, a, z_rows)?;
        let w = self.weights(tape, z_rows)?;
        Ok(corrected_q(tape, &psis, w))
    }

    pub fn phi_w_grads(&self, g: &Gradients) -> (Vec<Tensor>, Vec<Tensor>) {
        (self.phi.grads(g), self.w.grads(g))
    }
}

/// Undecomposed `Q(s, a, z)` with a Polyak target.
#[derive(Clone, Debug, PartialEq)]
pub struct MonolithicCritic {
    pub q: Mlp,
    pub q_target: Mlp,
}

impl MonolithicCritic {
    pub fn new(latent_dim: usize, hidden: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![STATE_DIM + ACTION_DIM + latent_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let q = Mlp::new(&sizes, activation, rng);
        Self {
            q_target: q.clone(),
            q,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .q
            .param_names("critic.q")
            .into_iter()
            .zip(self.q.params())
            .collect();
        out.extend(
            self.q_target
                .param_names("critic.q_target")
                .into_iter()
                .zip(self.q_target.params()),
        );
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.q.params_mut();
        out.extend(self.q_target.params_mut());
        out
    }

    pub fn soft_update(&mut self, zeta: f64) -> Result<()> {
        check_zeta(zeta)?;
        self.q_target.soft_update_from(&self.q, zeta);
        Ok(())
    }

    /// `r + γ(1 − done)·Q̂(s', a', z)`.
    pub fn td_targets(
        &self,
        batch: &CriticBatch,
        a_next: &Tensor,
        z_rows: &Tensor,
        gamma: f64,
    ) -> Result<Tensor> {
        let boot = self.q_target.forward(&concat(&[&batch.s_next, a_next, z_rows]))?;
        let data = (0..batch.len())
            .map(|i| batch.r.data()[i] + gamma * (1.0 - batch.done.data()[i]) * boot.data()[i])
            .collect();
        Ok(Tensor::matrix(batch.len(), 1, data)?)
    }

    pub fn q_value(&self, s: &Tensor, a: &Tensor, z: &Tensor) -> Result<Tensor> {
        Ok(self.q.forward(&concat(&[s, a, z]))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, rng: &mut ChaCha8Rng, done_every: usize) -> CriticBatch {
        let mut m = |c: usize| {
            Tensor::matrix(n, c, (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let (s, a, r, s_next) = (m(2), m(2), m(1), m(2));
        let done = Tensor::matrix(
            n,
            1,
            (0..n).map(|i| if done_every > 0 && i % done_every == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        CriticBatch {
            s,
            a,
            r,
            s_next,
            done,
            task: vec![0; n],
        }
    }

    #[test]
    fn dot_product_reward() {
        assert_eq!(predict_reward(&[2.0, 3.0], &[1.0, 1.0]).unwrap(), 5.0);
        assert_eq!(predict_reward(&[0.0, 0.0, 0.0], &[4.0, -2.0, 9.0]).unwrap(), 0.0);
        assert!(matches!(
            predict_reward(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn reward_loss_examples() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::matrix(3, 1, vec![2.0; 3]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[3, 1]));
        let l = reward_loss(&mut tape, zero, r);
        assert_eq!(tape.value(l).item(), 2.0);
        let l = reward_loss(&mut tape, r, r);
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn psi_loss_examples() {
        let mut tape = Tape::new();
        let targets = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 0.0, 3.0, 3.0]).unwrap();
        let exact = tape.constant(targets.clone());
        let l = psi_loss(&mut tape, exact, &targets, TdLoss::Huber(1.0)).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let off = tape.constant(targets.map(|x| x + 0.5));
        let l = psi_loss(&mut tape, off, &targets, TdLoss::Huber(1.0)).unwrap();
        assert!((tape.value(l).item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn corrected_q_takes_the_minimum() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::row(&[1.0, 1.0]));
        let p1 = tape.constant(Tensor::row(&[1.0, 3.0]));
        let p2 = tape.constant(Tensor::row(&[2.0, 1.0]));
        let q = corrected_q(&mut tape, &[p1, p2], w);
        assert_eq!(tape.value(q).item(), 3.0);
        let q = corrected_q(&mut tape, &[p1, p1], w);
        assert_eq!(tape.value(q).item(), 4.0);
    }

    #[test]
    fn targets_without_bootstrap() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let critic = FeatureCritic::new(3, 4, &[8], Activation::Tanh, 2, &mut rng);
        let b = batch(6, &mut rng, 2);
        let z = Tensor::matrix(6, 3, vec![0.2; 18]).unwrap();
        let a_next = Tensor::matrix(6, 2, vec![0.1; 12]).unwrap();
        let phi = critic.features(&b.s, &b.a, &b.s_next, &z).unwrap();
        let t = critic.td_targets(&b, &a_next, &z, -0.5, 0.99).unwrap();
        for i in (0..6).step_by(2) {
            assert_eq!(t.row_slice(i), phi.row_slice(i));
        }
        let myopic = critic.td_targets(&b, &a_next, &z, -0.5, 0.0).unwrap();
        assert_eq!(myopic, phi);
    }

    #[test]
    fn equal_targets_with_zero_alpha_reduce_to_plain_td() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut critic = FeatureCritic::new(2, 4, &[8], Activation::Tanh, 2, &mut rng);
        critic.psi_target[1] = critic.psi_target[0].clone();
        let mut single = critic.clone();
        single.psi_target.truncate(1);
        let b = batch(5, &mut rng, 0);
        let z = Tensor::matrix(5, 2, vec![-0.3; 10]).unwrap();
        let a_next = Tensor::matrix(5, 2, vec![0.4; 10]).unwrap();
        let belief = critic.td_targets(&b, &a_next, &z, 0.0, 0.9).unwrap();
        let plain = single.td_targets(&b, &a_next, &z, 0.0, 0.9).unwrap();
        assert!(belief.max_abs_diff(&plain) < 1e-15);
    }

    #[test]
    fn soft_update_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut critic = FeatureCritic::new(2, 2, &[3], Activation::Tanh, 2, &mut rng);
        let before = critic.clone();
        critic.soft_update(0.005).unwrap();
        assert_eq!(critic, before);
        for p in critic.psi_target[0].params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        for p in critic.psi[0].params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x = 1.0);
        }
        critic.soft_update(0.005).unwrap();
        for p in critic.psi_target[0].params() {
            assert!(p.data().iter().all(|x| (*x - 0.005).abs() < 1e-18));
        }
        assert!(critic.soft_update(0.0).is_err());
    }
}
