//! Exact checks of the transfer bounds on small tabular MDPs: generalized
//! policy improvement under bounded value noise, and the cross-task bounds
//! for decomposed versus monolithic value functions.

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite MDP with reward `r(s, a, s') = φ(s, a, s')ᵀW`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `p[(s·A + a)·S + s']`.
    pub p: Vec<f64>,
    /// `phi[((s·A + a)·S + s')·D + d]`.
    pub phi: Vec<f64>,
    pub w: Vec<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn feature_dim(&self) -> usize {
        self.w.len()
    }

    fn sa(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn prob(&self, s: usize, a: usize, sp: usize) -> f64 {
        self.p[self.sa(s, a) * self.n_states + sp]
    }

    pub fn features(&self, s: usize, a: usize, sp: usize) -> &[f64] {
        let d = self.feature_dim();
        let k = (self.sa(s, a) * self.n_states + sp) * d;
        &self.phi[k..k + d]
    }

    pub fn reward(&self, s: usize, a: usize, sp: usize) -> f64 {
        dot(self.features(s, a, sp), &self.w)
    }

    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        (0..self.n_states)
            .map(|sp| self.prob(s, a, sp) * self.reward(s, a, sp))
            .sum()
    }

    pub fn with_weights(&self, w: Vec<f64>) -> Self {
        Self { w, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states, self.n_actions);
        if self.p.len() != s * a * s || self.phi.len() != s * a * s * self.feature_dim() {
            return Err(Error::Contract("tabular MDP arrays have inconsistent sizes".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Contract(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        for row in self.p.chunks(s) {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(format!(
                    "transition row is not stochastic (sums to {total})"
                )));
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Greedy action per state, ties to the lowest index.
pub fn greedy(q: &[f64], n_actions: usize) -> Vec<usize> {
    q.chunks(n_actions)
        .map(|row| {
            let mut best = 0;
            for (a, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

/// Optimal `Q` (indexed `s·A + a`) and its greedy policy. Iterates until the
/// sup-norm Bellman residual is at most `tolerance`.
pub fn value_iteration(mdp: &TabularMdp, tolerance: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::Config(format!("tolerance must be positive, got {tolerance}")));
    }
    mdp.validate()?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let r: Vec<f64> = (0..ns * na)
        .map(|k| mdp.expected_reward(k / na, k % na))
        .collect();
    let mut q = vec![0.0; ns * na];
    loop {
        let v: Vec<f64> = q
            .chunks(na)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut next = vec![0.0; ns * na];
        let mut residual: f64 = 0.0;
        for k in 0..ns * na {
            let boot: f64 = (0..ns).map(|sp| mdp.p[k * ns + sp] * v[sp]).sum();
            next[k] = r[k] + mdp.gamma * boot;
            residual = residual.max((next[k] - q[k]).abs());
        }
        q = next;
        if residual <= tolerance {
            break;
        }
    }
    let policy = greedy(&q, na);
    Ok((q, policy))
}

/// `ψ^π` (indexed `(s·A + a)·D + d`) from `(I − γ P_π) ψ = φ̄`.
pub fn exact_successor_features(mdp: &TabularMdp, policy: &[usize]) -> Result<Vec<f64>> {
    mdp.validate()?;
    let (ns, na, d) = (mdp.n_states, mdp.n_actions, mdp.feature_dim());
    if policy.len() != ns || policy.iter().any(|a| *a >= na) {
        return Err(Error::Contract("policy must pick a valid action in every state".into()));
    }
    let n = ns * na;
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut rhs = DMatrix::<f64>::zeros(n, d);
    for s in 0..ns {
        for a in 0..na {
            let row = mdp.sa(s, a);
            for sp in 0..ns {
                let p = mdp.prob(s, a, sp);
                if p == 0.0 {
                    continue;
                }
                m[(row, mdp.sa(sp, policy[sp]))] -= mdp.gamma * p;
                for (k, f) in mdp.features(s, a, sp).iter().enumerate() {
                    rhs[(row, k)] += p * f;
                }
            }
        }
    }
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("singular successor-feature system".into()))?;
    let mut out = vec![0.0; n * d];
    for row in 0..n {
        for k in 0..d {
            out[row * d + k] = sol[(row, k)];
        }
    }
    Ok(out)
}

/// `Q^π = ψ^πᵀW`.
pub fn policy_q(mdp: &TabularMdp, policy: &[usize]) -> Result<Vec<f64>> {
    let psi = exact_successor_features(mdp, policy)?;
    Ok(psi.chunks(mdp.feature_dim()).map(|p| dot(p, &mdp.w)).collect())
}

/// Tasks sharing dynamics and features, differing only in `W`.
pub fn random_family(
    n_states: usize,
    n_actions: usize,
    feature_dim: usize,
    n_tasks: usize,
    gamma: f64,
    rng: &mut impl Rng,
) -> Vec<TabularMdp> {
    let mut p = vec![0.0; n_states * n_actions * n_states];
    let states: Vec<usize> = (0..n_states).collect();
    for row in p.chunks_mut(n_states) {
        let degree = rng.random_range(1..=3.min(n_states));
        let targets: Vec<usize> = states.choose_multiple(rng, degree).copied().collect();
        let weights: Vec<f64> = (0..degree).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        for (t, w) in targets.iter().zip(&weights) {
            row[*t] = w / total;
        }
        // Make the row sum exactly one in floating point.
        let drift: f64 = 1.0 - row.iter().sum::<f64>();
        row[targets[0]] += drift;
    }
    let mut phi = Vec::with_capacity(n_states * n_actions * n_states * feature_dim);
    for _ in 0..n_states * n_actions * n_states {
        let v: Vec<f64> = (0..feature_dim).map(|_| rng.random::<f64>()).collect();
        let n = norm(&v).max(1e-12);
        phi.extend(v.iter().map(|x| x / n));
    }
    let base = TabularMdp {
        n_states,
        n_actions,
        p,
        phi,
        w: vec![0.0; feature_dim],
        gamma,
    };
    (0..n_tasks)
        .map(|_| base.with_weights(unit_vector(feature_dim, rng)))
        .collect()
}

pub fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// How the `±ε` estimation noise is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoisePattern {
    /// Uniform in `[−ε, ε]`.
    Uniform,
    /// Random signs at full magnitude.
    RandomSigns,
    /// `+ε` on actions that are worse under the true max, `−ε` on the best.
    Misleading,
    AllUp,
    AllDown,
}

impl NoisePattern {
    pub const ALL: [NoisePattern; 5] = [
        NoisePattern::Uniform,
        NoisePattern::RandomSigns,
        NoisePattern::Misleading,
        NoisePattern::AllUp,
        NoisePattern::AllDown,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpiReport {
    pub family: usize,
    pub task: usize,
    pub pattern: NoisePattern,
    pub epsilon: f64,
    /// `min_{s,a} Q^π − max_j Q^{π_j} + 2ε/(1 − γ)`; negative is a violation.
    pub worst_slack: f64,
}

impl GpiReport {
    pub fn holds(&self) -> bool {
        self.worst_slack >= -1e-9
    }
}

/// GPI over the optimal policies of every task in the family, evaluated on
/// task `target` with noisy value estimates.
pub fn check_gpi(
    family: &[TabularMdp],
    target: usize,
    epsilon: f64,
    pattern: NoisePattern,
    rng: &mut impl Rng,
) -> Result<GpiReport> {
    let task = &family[target];
    let na = task.n_actions;
    let mut q_true = Vec::with_capacity(family.len());
    for m in family {
        let (_, pi) = value_iteration(m, 1e-10)?;
        q_true.push(policy_q(task, &pi)?);
    }
    let n = q_true[0].len();
    let q_max: Vec<f64> = (0..n)
        .map(|k| q_true.iter().map(|q| q[k]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let best = greedy(&q_max, na);
    let noisy: Vec<Vec<f64>> = q_true
        .iter()
        .map(|q| {
            q.iter()
                .enumerate()
                .map(|(k, v)| {
                    let noise = match pattern {
                        NoisePattern::Uniform => rng.random_range(-epsilon..=epsilon),
                        NoisePattern::RandomSigns => {
                            if rng.random::<bool>() {
                                epsilon
                            } else {
                                -epsilon
                            }
                        }
                        NoisePattern::Misleading => {
                            if best[k / na] == k % na {
                                -epsilon
                            } else {
                                epsilon
                            }
                        }
                        NoisePattern::AllUp => epsilon,
                        NoisePattern::AllDown => -epsilon,
                    };
                    v + noise
                })
                .collect()
        })
        .collect();
    let noisy_max: Vec<f64> = (0..n)
        .map(|k| noisy.iter().map(|q| q[k]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let pi = greedy(&noisy_max, na);
    let q_pi = policy_q(task, &pi)?;
    let allowance = 2.0 * epsilon / (1.0 - task.gamma);
    let worst_slack = (0..n)
        .map(|k| q_pi[k] - q_max[k] + allowance)
        .fold(f64::INFINITY, f64::min);
    Ok(GpiReport {
        family: 0,
        task: target,
        pattern,
        epsilon,
        worst_slack,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub family: usize,
    pub i: usize,
    pub j: usize,
    pub delta_r: f64,
    pub psi_max: f64,
    pub w_i_norm: f64,
    pub w_j_norm: f64,
    pub w_diff_norm: f64,
    pub bound_sf: f64,
    pub bound_sq: f64,
    /// `‖Q_i^{π_i*} − Q_i^{π_j*}‖_∞`.
    pub observed_gap: f64,
    pub epsilon: f64,
    pub delta_sf: f64,
    pub delta_sq: f64,
    /// `‖Q_i^* − Q_i^π‖_∞` for the GPI policy built from noisy estimates.
    pub gpi_gap: f64,
    pub gpi_slack: f64,
}

impl BoundReport {
    pub const HEADER: [&'static str; 17] = [
        "family",
        "i",
        "j",
        "delta_r",
        "psi_max",
        "w_i_norm",
        "w_j_norm",
        "w_diff_norm",
        "bound_sf",
        "bound_sq",
        "observed_gap",
        "epsilon",
        "delta_sf",
        "delta_sq",
        "gpi_gap",
        "gpi_slack",
        "ok",
    ];

    /// Every inequality the report is meant to certify.
    pub fn violations(&self) -> Vec<&'static str> {
        let tol = 1e-9;
        let mut v = Vec::new();
        if self.bound_sf > self.bound_sq + tol {
            v.push("successor-feature bound exceeds monolithic bound");
        }
        if self.observed_gap > self.bound_sf.min(self.bound_sq) + tol {
            v.push("observed cross-task gap exceeds bound");
        }
        if self.delta_sf > self.delta_sq + tol {
            v.push("policy superiority bound reversed");
        }
        if self.gpi_gap > self.delta_sf + tol {
            v.push("GPI policy farther from optimum than guaranteed");
        }
        if self.gpi_slack < -tol {
            v.push("GPI lemma violated");
        }
        v
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut row: Vec<String> = [self.family, self.i, self.j]
            .iter()
            .map(usize::to_string)
            .collect();
        row.extend(
            [
                self.delta_r,
                self.psi_max,
                self.w_i_norm,
                self.w_j_norm,
                self.w_diff_norm,
                self.bound_sf,
                self.bound_sq,
                self.observed_gap,
                self.epsilon,
                self.delta_sf,
                self.delta_sq,
                self.gpi_gap,
                self.gpi_slack,
            ]
            .iter()
            .map(f64::to_string),
        );
        row.push(self.violations().is_empty().to_string());
        row
    }
}

/// Bounds for the ordered pair `(i, j)` of tasks sharing dynamics.
pub fn check_theorem1(
    mi: &TabularMdp,
    mj: &TabularMdp,
    epsilon: f64,
    pattern: NoisePattern,
    rng: &mut impl Rng,
) -> Result<BoundReport> {
    if mi.p != mj.p || mi.phi != mj.phi || mi.gamma != mj.gamma {
        return Err(Error::Contract("pair must share dynamics, features and discount".into()));
    }
    let gamma = mi.gamma;
    let (q_star, pi_i) = value_iteration(mi, 1e-11)?;
    let (_, pi_j) = value_iteration(mj, 1e-11)?;
    let d = mi.feature_dim();
    let psi_i = exact_successor_features(mi, &pi_i)?;
    let psi_j = exact_successor_features(mi, &pi_j)?;
    let psi_max = psi_i
        .chunks(d)
        .chain(psi_j.chunks(d))
        .map(norm)
        .fold(0.0, f64::max);
    let mut delta_r: f64 = 0.0;
    for s in 0..mi.n_states {
        for a in 0..mi.n_actions {
            for sp in 0..mi.n_states {
                delta_r = delta_r.max((mi.reward(s, a, sp) - mj.reward(s, a, sp)).abs());
            }
        }
    }
    let q_ii: Vec<f64> = psi_i.chunks(d).map(|p| dot(p, &mi.w)).collect();
    let q_ij: Vec<f64> = psi_j.chunks(d).map(|p| dot(p, &mi.w)).collect();
    let observed_gap = q_ii
        .iter()
        .zip(&q_ij)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let (wi, wj) = (norm(&mi.w), norm(&mj.w));
    let diff: Vec<f64> = mi.w.iter().zip(&mj.w).map(|(a, b)| a - b).collect();
    let wd = norm(&diff);
    let bound_sf = 2.0 * delta_r + 2.0 * gamma * psi_max * (wi + wj) + 2.0 * gamma * psi_max * wd;
    let bound_sq = 2.0 * delta_r + 4.0 * gamma * psi_max * (wi + wj);
    let allowance = 2.0 * epsilon / (1.0 - gamma);

    let pair = [mi.clone(), mj.clone()];
    let gpi = check_gpi(&pair, 0, epsilon, pattern, rng)?;
    // Recover the GPI policy's distance to the optimum of task i.
    let gpi_gap = gpi_distance(&pair, epsilon, pattern, &q_star, rng)?;
    Ok(BoundReport {
        family: 0,
        i: 0,
        j: 1,
        delta_r,
        psi_max,
        w_i_norm: wi,
        w_j_norm: wj,
        w_diff_norm: wd,
        bound_sf,
        bound_sq,
        observed_gap,
        epsilon,
        delta_sf: bound_sf + allowance,
        delta_sq: bound_sq + allowance,
        gpi_gap,
        gpi_slack: gpi.worst_slack,
    })
}

fn gpi_distance(
    pair: &[TabularMdp],
    epsilon: f64,
    pattern: NoisePattern,
    q_star: &[f64],
    rng: &mut impl Rng,
) -> Result<f64> {
    let task = &pair[0];
    let na = task.n_actions;
    let mut noisy_max = vec![f64::NEG_INFINITY; q_star.len()];
    for m in pair {
        let (_, pi) = value_iteration(m, 1e-11)?;
        let q = policy_q(task, &pi)?;
        for (k, v) in q.iter().enumerate() {
            let noise = match pattern {
                NoisePattern::Uniform => rng.random_range(-epsilon..=epsilon),
                NoisePattern::RandomSigns | NoisePattern::Misleading => {
                    if rng.random::<bool>() {
                        epsilon
                    } else {
                        -epsilon
                    }
                }
                NoisePattern::AllUp => epsilon,
                NoisePattern::AllDown => -epsilon,
            };
            noisy_max[k] = noisy_max[k].max(v + noise);
        }
    }
    let pi = greedy(&noisy_max, na);
    let q_pi = policy_q(task, &pi)?;
    Ok(q_star
        .iter()
        .zip(&q_pi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub families: usize,
    pub tasks_per_family: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub feature_dim: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            families: 150,
            tasks_per_family: 3,
            n_states: 8,
            n_actions: 3,
            feature_dim: 4,
            gamma: 0.9,
            epsilon: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheorySummary {
    pub gpi: Vec<GpiReport>,
    pub pairs: Vec<BoundReport>,
}

impl TheorySummary {
    pub fn gpi_violations(&self) -> usize {
        self.gpi.iter().filter(|r| !r.holds()).count()
    }

    pub fn pair_violations(&self) -> usize {
        self.pairs.iter().filter(|r| !r.violations().is_empty()).count()
    }
}

/// Every GPI trial (all tasks as targets, every noise pattern) and every
/// ordered pair within each random family.
pub fn run_suite(cfg: &TheoryConfig) -> Result<TheorySummary> {
    if cfg.tasks_per_family < 2 || cfg.families == 0 {
        return Err(Error::Config("need at least one family of two or more tasks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summary = TheorySummary::default();
    for f in 0..cfg.families {
        let family = random_family(
            cfg.n_states,
            cfg.n_actions,
            cfg.feature_dim,
            cfg.tasks_per_family,
            cfg.gamma,
            &mut rng,
        );
        for target in 0..family.len() {
            for pattern in NoisePattern::ALL {
                let mut r = check_gpi(&family, target, cfg.epsilon, pattern, &mut rng)?;
                r.family = f;
                summary.gpi.push(r);
            }
        }
        for i in 0..family.len() {
            for j in 0..family.len() {
                if i == j {
                    continue;
                }
                let pattern = NoisePattern::ALL[(i + j) % NoisePattern::ALL.len()];
                let mut r = check_theorem1(&family[i], &family[j], cfg.epsilon, pattern, &mut rng)?;
                r.family = f;
                r.i = i;
                r.j = j;
                summary.pairs.push(r);
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two states; action 0 stays, action 1 moves to the goal (state 1),
    /// which is absorbing with reward 1 per step.
    fn chain(gamma: f64) -> TabularMdp {
        let p = vec![
            1.0, 0.0, // s0 a0
            0.0, 1.0, // s0 a1
            0.0, 1.0, // s1 a0
            0.0, 1.0, // s1 a1
        ];
        let mut phi = vec![0.0; 8];
        phi[2 * 2 + 1] = 1.0; // s1 a0 -> s1
        phi[3 * 2 + 1] = 1.0; // s1 a1 -> s1
        TabularMdp {
            n_states: 2,
            n_actions: 2,
            p,
            phi,
            w: vec![1.0],
            gamma,
        }
    }

    #[test]
    fn geometric_values_on_a_chain() {
        let (q, pi) = value_iteration(&chain(0.9), 1e-12).unwrap();
        let goal = 1.0 / (1.0 - 0.9);
        assert!((q[2] - goal).abs() < 1e-9);
        assert!((q[1] - 0.9 * goal).abs() < 1e-9);
        assert_eq!(pi[0], 1);
    }

    #[test]
    fn myopic_limit_is_expected_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = random_family(5, 3, 2, 1, 0.9, &mut rng).remove(0);
        m.gamma = 0.0;
        let (q, _) = value_iteration(&m, 1e-12).unwrap();
        for s in 0..5 {
            for a in 0..3 {
                assert!((q[s * 3 + a] - m.expected_reward(s, a)).abs() < 1e-12);
            }
        }
        let psi = exact_successor_features(&m, &[0; 5]).unwrap();
        for s in 0..5 {
            for a in 0..3 {
                let expect: Vec<f64> = (0..2)
                    .map(|k| (0..5).map(|sp| m.prob(s, a, sp) * m.features(s, a, sp)[k]).sum())
                    .collect();
                for k in 0..2 {
                    assert!((psi[(s * 3 + a) * 2 + k] - expect[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_stochastic_rows_are_rejected() {
        let mut m = chain(0.9);
        m.p[0] = 0.5;
        assert!(matches!(value_iteration(&m, 1e-6), Err(Error::Contract(_))));
        assert!(matches!(value_iteration(&chain(0.9), 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn scalar_feature_equal_to_reward_gives_q() {
        let m = chain(0.8);
        let pi = vec![1, 0];
        let psi = exact_successor_features(&m, &pi).unwrap();
        let q = policy_q(&m, &pi).unwrap();
        assert_eq!(psi.len(), q.len());
        for (a, b) in psi.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_rows_are_sparse_and_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fam = random_family(8, 3, 4, 3, 0.9, &mut rng);
        for row in fam[0].p.chunks(8) {
            assert!(row.iter().filter(|p| **p > 0.0).count() <= 3);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        for m in &fam {
            assert!((norm(&m.w) - 1.0).abs() < 1e-12);
            assert_eq!(m.p, fam[0].p);
        }
    }

    #[test]
    fn noiseless_single_task_gpi_is_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fam = random_family(6, 3, 3, 1, 0.9, &mut rng);
        let r = check_gpi(&fam, 0, 0.0, NoisePattern::Uniform, &mut rng).unwrap();
        assert!(r.worst_slack >= -1e-9);
        assert!(r.worst_slack.abs() < 1e-6);
    }

    #[test]
    fn identical_and_opposite_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_family(8, 3, 4, 1, 0.9, &mut rng).remove(0);
        let same = check_theorem1(&m, &m.clone(), 0.1, NoisePattern::Uniform, &mut rng).unwrap();
        assert_eq!(same.delta_r, 0.0);
        assert!(same.observed_gap < 1e-9);
        let gap = same.bound_sq - same.bound_sf;
        assert!((gap - 2.0 * m.gamma * same.psi_max * (same.w_i_norm + same.w_j_norm)).abs() < 1e-9);
        let neg = m.with_weights(m.w.iter().map(|x| -x).collect());
        let opp = check_theorem1(&m, &neg, 0.1, NoisePattern::Uniform, &mut rng).unwrap();
        assert!((opp.bound_sq - opp.bound_sf).abs() < 1e-9);
        assert!(opp.violations().is_empty());
    }
}
