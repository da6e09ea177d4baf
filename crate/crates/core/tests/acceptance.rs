//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 5 to 7 train full desk-scale runs (hours on one core) and run
//! only with `SFMETA_ACCEPTANCE_HEAVY=1`; otherwise they print SKIP.
//! `SFMETA_ACCEPTANCE_ONLY=5,7` restricts the suite to listed criteria and
//! `SFMETA_ACCEPTANCE_DIR` keeps run directories for inspection.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfmeta::aco::{BanditConfig, BanditState};
use sfmeta::envs::*;
use sfmeta::persistence::{load_dataset, save_dataset};
use sfmeta::task_inference::{fit_flow, FlowChain, FlowFitConfig, GaussianMixture};
use sfmeta::theory::{run_suite, TheoryConfig};
use sfmeta::trainer::*;

const GRADIENT_POINTS: u64 = 20;
const GRADIENT_SECONDS: f64 = 60.0;
const LOG_DET_TRIALS: usize = 1000;
const LOG_DET_TOL: f64 = 1e-6;
const NORMALIZATION_CHAINS: usize = 5;
const NORMALIZATION_SAMPLES: usize = 100_000;
const NORMALIZATION_TOL: f64 = 0.02;
const FLOW_SECONDS: f64 = 120.0;
const THEORY_FAMILIES: usize = 150;
const THEORY_SECONDS: f64 = 120.0;
const BANDIT_EPISODES: usize = 200;
const BANDIT_SEEDS: u64 = 10;
const BANDIT_P_BEST: f64 = 0.9;
const DESK_SEEDS: u64 = 3;
const DESK_RETURN_FLOOR: f64 = -60.0;
const DESK_SECONDS_PER_SEED: f64 = 1800.0;
const ABLATION_INVERSION_SHARE: f64 = 0.05;
const OVERGEN_RANDOM_SHARE: f64 = 0.4;
const OVERGEN_GAP_MULTIPLE: f64 = 2.0;
const FLOW_LENGTHS: [usize; 4] = [0, 1, 3, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn desk_env() -> EnvConfig {
    EnvConfig {
        max_path_length: TrainConfig::desk().max_path_length,
        ..EnvConfig::default()
    }
}

fn desk_dataset(family: TaskFamily, mixture: &[MixtureEntry], seed: u64) -> OfflineDataset {
    let env = desk_env();
    let (train, test) = sample_tasks(family, 8, 2, &env, seed).expect("task sampling");
    collect_dataset(&train, &test, mixture, 50, &env, seed).expect("collection")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let worst = common::gradient_suite(GRADIENT_POINTS);
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, r)| *r > 1.0)
        .map(|(n, r)| format!("{n} {r:.3}"))
        .collect();
    let top = worst.iter().map(|(_, r)| *r).fold(0.0, f64::max);
    Outcome::new(
        failing.is_empty() && secs < GRADIENT_SECONDS,
        format!(
            "{} losses x {GRADIENT_POINTS} points, worst ratio {top:.3} (rel {:e}), {secs:.1}s{}",
            worst.len(),
            common::REL_TOL,
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join("; ")) }
        ),
    )
}

fn flows() -> Outcome {
    let start = Instant::now();
    let log_det = common::worst_log_det_error(LOG_DET_TRIALS, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let worst_norm = (0..NORMALIZATION_CHAINS)
        .map(|_| {
            let chain = FlowChain::random(2, 3, 0.7, &mut rng);
            (common::normalization(&chain, NORMALIZATION_SAMPLES, &mut rng) - 1.0).abs()
        })
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        log_det < LOG_DET_TOL && worst_norm < NORMALIZATION_TOL && secs < FLOW_SECONDS,
        format!("log-det error {log_det:.2e} over {LOG_DET_TRIALS}, normalization off by {worst_norm:.4}, {secs:.1}s"),
    )
}

fn theory() -> Outcome {
    let start = Instant::now();
    let cfg = TheoryConfig {
        families: THEORY_FAMILIES,
        ..TheoryConfig::default()
    };
    let summary = match run_suite(&cfg) {
        Ok(s) => s,
        Err(e) => return Outcome::new(false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let (gpi, pairs) = (summary.gpi_violations(), summary.pair_violations());
    Outcome::new(
        gpi == 0 && pairs == 0 && secs < THEORY_SECONDS,
        format!(
            "{} GPI trials, {} pairs, {gpi} + {pairs} violations, {secs:.1}s",
            summary.gpi.len(),
            summary.pairs.len()
        ),
    )
}

fn bandit() -> Outcome {
    let raw = |arms: Vec<f64>| {
        BanditState::new(BanditConfig {
            arms,
            normalize_returns: false,
            ..BanditConfig::default()
        })
        .expect("valid arms")
    };
    // Two arms at p = 1/2, return up by one: the sampled weight moves by
    // lambda * 1 / (1/2).
    let mut b = raw(vec![-1.0, 0.0]);
    b.last_return = Some(0.0);
    b.current = Some((0, b.probabilities()[0]));
    b.update(1.0).expect("update");
    let example = (b.weights[0] - 0.2).abs() <= 4.0 * f64::EPSILON && b.weights[1] == 0.0;

    let mut b = raw(vec![-1.0, -0.5, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    b.sample(&mut rng);
    b.update(-3.25).expect("update");
    let before = b.weights.clone();
    b.sample(&mut rng);
    b.update(-3.25).expect("update");
    let constant = b.weights == before;

    let mut worst_p: f64 = 1.0;
    for seed in 0..BANDIT_SEEDS {
        let mut b = BanditState::new(BanditConfig::default()).expect("default arms");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ret = 0.0;
        for _ in 0..BANDIT_EPISODES {
            let (alpha, _) = b.sample(&mut rng);
            ret += if alpha == 0.0 { 1.0 } else { -1.0 };
            b.update(ret).expect("update");
        }
        worst_p = worst_p.min(*b.probabilities().last().expect("arms"));
    }
    Outcome::new(
        example && constant && worst_p > BANDIT_P_BEST,
        format!(
            "update example {}, unchanged return keeps weights {}, min p(best) after {BANDIT_EPISODES} episodes {worst_p:.3} over {BANDIT_SEEDS} seeds",
            if example { "exact" } else { "WRONG" },
            constant
        ),
    )
}

fn desk(root: &Path) -> Outcome {
    let mut finals = Vec::new();
    let mut slowest: f64 = 0.0;
    for seed in 0..DESK_SEEDS {
        let ds = desk_dataset(TaskFamily::PointRobot, &default_mixture(), seed);
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::desk()
        };
        let start = Instant::now();
        let dir = root.join(format!("desk/seed{seed}"));
        let (_, records) = match train_run(&cfg, &ds, &dir, &RunOptions::default()) {
            Ok(r) => r,
            Err(e) => return Outcome::new(false, format!("seed {seed}: {e}")),
        };
        let secs = start.elapsed().as_secs_f64();
        slowest = slowest.max(secs);
        let last = records.last().map_or(f64::NAN, |r| r.test_return);
        eprintln!("  desk seed {seed}: final test return {last:.2}, {secs:.0}s");
        finals.push(last);
    }
    let m = mean(&finals);
    Outcome::new(
        m >= DESK_RETURN_FLOOR && slowest < DESK_SECONDS_PER_SEED,
        format!(
            "final test returns {:?}, mean {m:.2} (floor {DESK_RETURN_FLOOR}), slowest seed {slowest:.0}s (limit {DESK_SECONDS_PER_SEED})",
            finals.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>()
        ),
    )
}

fn ablation(root: &Path) -> Outcome {
    let variants = [Variant::Full, Variant::NoAco, Variant::NoFti, Variant::VanillaQ];
    let mut finals: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
    let mut scales = Vec::new();
    for seed in 0..DESK_SEEDS {
        let ds = desk_dataset(TaskFamily::PointRobotWind, &default_mixture(), seed);
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::desk()
        };
        match Trainer::new(cfg.clone(), &ds) {
            Ok(t) => scales.push(t.reward_scale() * cfg.max_path_length as f64),
            Err(e) => return Outcome::new(false, format!("seed {seed}: {e}")),
        }
        let rows = match run_ablation(&cfg, &ds, &variants, &root.join(format!("wind/seed{seed}"))) {
            Ok(r) => r,
            Err(e) => return Outcome::new(false, format!("seed {seed}: {e}")),
        };
        for (i, row) in rows.iter().enumerate() {
            finals[i].push(row.final_test_return());
        }
        eprintln!(
            "  wind seed {seed}: {}",
            variants
                .iter()
                .zip(&finals)
                .map(|(v, f)| format!("{v} {:.2}", f[seed as usize]))
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    let (full, no_aco, no_fti, vanilla) = (&finals[0], &finals[1], &finals[2], &finals[3]);
    let mean_order = mean(full) >= mean(no_aco) && mean(full) >= mean(no_fti);
    // A per-seed inversion is tolerated up to a share of the return scale,
    // taken as the mean absolute reward over one horizon.
    let bad_inversions = (0..DESK_SEEDS as usize)
        .filter(|&s| {
            let tol = ABLATION_INVERSION_SHARE * scales[s];
            full[s] < no_aco[s] - tol || full[s] < no_fti[s] - tol
        })
        .count();
    let spread_ok = std_dev(full) <= std_dev(vanilla);
    Outcome::new(
        mean_order && bad_inversions == 0 && spread_ok,
        format!(
            "mean final return full {:.2}, no-aco {:.2}, no-fti {:.2}, vanilla-q {:.2}; inversions beyond tolerance {bad_inversions}; spread full {:.2} vs vanilla-q {:.2}",
            mean(full),
            mean(no_aco),
            mean(no_fti),
            mean(vanilla),
            std_dev(full),
            std_dev(vanilla)
        ),
    )
}

fn overgeneralization(root: &Path) -> Outcome {
    let share = OVERGEN_RANDOM_SHARE;
    let rest = (1.0 - share) / 2.0;
    let ds = desk_dataset(TaskFamily::PointRobot, &mixture(rest, rest, share), 0);
    let cfg = TrainConfig::desk();
    let scale = match Trainer::new(cfg.clone(), &ds) {
        Ok(t) => t.reward_scale(),
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let threshold = OVERGEN_GAP_MULTIPLE * scale;
    let rows = match run_ablation(&cfg, &ds, &[Variant::NoAco, Variant::Full], &root.join("overgeneralization")) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let (no_aco, full) = (rows[0].max_q_gap(), rows[1].max_q_gap());
    Outcome::new(
        no_aco >= threshold && full < threshold,
        format!(
            "max (Q estimate - MC return): no-aco {no_aco:.3}, full {full:.3}; threshold {threshold:.3} ({OVERGEN_GAP_MULTIPLE} x reward scale {scale:.4}, {:.0}% random data)",
            share * 100.0
        ),
    )
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        iterations: 4,
        steps_per_iteration: 4,
        initial_steps: 3,
        eval_steps: 40,
        context_transitions: 10,
        max_path_length: 20,
        batch_size: 16,
        meta_batch: 2,
        latent_dim: 3,
        feature_dim: 4,
        hidden: vec![16, 16],
        embed_dim: 8,
        q_diag_states: 2,
        checkpoint_every: 2,
        ..TrainConfig::desk()
    }
}

fn determinism(root: &Path) -> Outcome {
    let env = EnvConfig {
        max_path_length: 20,
        ..EnvConfig::default()
    };
    let (train, test) = sample_tasks(TaskFamily::PointRobot, 3, 1, &env, 21).expect("tasks");
    let ds = collect_dataset(&train, &test, &default_mixture(), 5, &env, 21).expect("data");
    let dir = root.join("determinism");
    let cfg = tiny_config();
    let read = |p: PathBuf| fs::read(p).unwrap_or_default();
    let check = || -> sfmeta::error::Result<(bool, bool, bool, bool)> {
        train_run(&cfg, &ds, &dir.join("a"), &RunOptions::default())?;
        train_run(&cfg, &ds, &dir.join("b"), &RunOptions::default())?;
        let rerun = read(dir.join("a/metrics.csv")) == read(dir.join("b/metrics.csv"));

        let stop = RunOptions {
            resume: false,
            stop_after: Some(3),
        };
        train_run(&cfg, &ds, &dir.join("c"), &stop)?;
        let resume = RunOptions {
            resume: true,
            stop_after: None,
        };
        train_run(&cfg, &ds, &dir.join("c"), &resume)?;
        let resumed = ["metrics.csv", "bandit.csv"]
            .iter()
            .all(|f| read(dir.join("a").join(f)) == read(dir.join("c").join(f)));

        save_dataset(&ds, &dir.join("dataset"))?;
        let dataset_exact = load_dataset(&dir.join("dataset"))? == ds;

        let mut t = Trainer::new(cfg.clone(), &ds)?;
        t.run_episode()?;
        t.save_checkpoint(&dir.join("ck"))?;
        let back = Trainer::resume(&ds, &dir.join("ck"))?;
        let checkpoint_exact = back.checkpoint_tensors() == t.checkpoint_tensors() && back.bandit == t.bandit;
        Ok((rerun, resumed, dataset_exact, checkpoint_exact))
    };
    match check() {
        Ok((a, b, c, d)) => Outcome::new(
            a && b && c && d,
            format!("rerun identical {a}, resume identical {b}, dataset round trip {c}, checkpoint round trip {d}"),
        ),
        Err(e) => Outcome::new(false, e.to_string()),
    }
}

fn flow_lengths() -> Outcome {
    let target = GaussianMixture::bimodal(3.0, 0.5);
    let cfg = FlowFitConfig::default();
    let mut kls = Vec::new();
    for k in FLOW_LENGTHS {
        match fit_flow(&target, k, &cfg, 7) {
            Ok(f) => kls.push(f.forward_kl),
            Err(e) => return Outcome::new(false, format!("K = {k}: {e}")),
        }
    }
    let monotone = kls.windows(2).all(|w| w[1] <= w[0]);
    Outcome::new(
        monotone,
        format!(
            "KL(target || flow) for K = {FLOW_LENGTHS:?}: {}",
            kls.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let heavy = std::env::var("SFMETA_ACCEPTANCE_HEAVY").is_ok_and(|v| v == "1");
    let only: Option<Vec<u32>> = std::env::var("SFMETA_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let scratch = tempfile::tempdir().expect("temporary directory");
    let root = std::env::var("SFMETA_ACCEPTANCE_DIR").map_or_else(|_| scratch.path().to_path_buf(), PathBuf::from);

    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(u32, &str, bool, Check)> = vec![
        (1, "gradient fidelity", false, Box::new(gradients)),
        (2, "flow correctness", false, Box::new(flows)),
        (3, "theory bounds", false, Box::new(theory)),
        (4, "bandit behavior", false, Box::new(bandit)),
        (5, "point-robot desk return", true, Box::new(|| desk(&root))),
        (6, "wind ablation ordering", true, Box::new(|| ablation(&root))),
        (7, "overgeneralization", true, Box::new(|| overgeneralization(&root))),
        (8, "determinism and persistence", false, Box::new(|| determinism(&root))),
        (9, "flow-length trend", false, Box::new(flow_lengths)),
    ];
    let mut failed = 0;
    for (n, name, is_heavy, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            continue;
        }
        if *is_heavy && !heavy {
            println!("criterion {n} [{name}]: SKIP (long training run; set SFMETA_ACCEPTANCE_HEAVY=1)");
            continue;
        }
        let start = Instant::now();
        let o = check();
        println!(
            "criterion {n} [{name}]: {} ({}; {:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
