//! `sfmeta`: collect offline datasets, train and evaluate meta-policies,
//! run ablations, verify the value-transfer bounds and plot metrics.

mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;
use sfmeta::envs::{collect_dataset, sample_tasks, TaskFamily};
use sfmeta::persistence::{
    fmt_f64, load_dataset, load_dataset_manifest, read_csv, save_dataset, write_atomic, write_csv,
};
use sfmeta::theory::{run_suite, BoundReport};
use sfmeta::trainer::{run_ablation, train_run, RunOptions, Trainer, Variant};

use config::{resolve, usage, Settings, UsageError};

const OUT_ENV: &str = "SFMETA_OUT";

#[derive(Parser)]
#[command(name = "sfmeta", version, about = "Offline meta-RL experiments on 2D navigation task families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON config file overlaid on the built-in defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted override applied after the config file, e.g. trainer.batch_size=64. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Base defaults: desk (default) or full-scale.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory. Defaults to $SFMETA_OUT/<command>, else runs/<command>.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for data collection, training and the theory suite.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline multi-task dataset with the scripted behavior policies.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        train_tasks: Option<usize>,
        #[arg(long)]
        test_tasks: Option<usize>,
        /// Trajectories per task.
        #[arg(long)]
        trajs: Option<usize>,
    },
    /// Meta-train on a collected dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `collect`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Re-run test evaluation from a run directory alone.
    Eval {
        /// Run directory written by `train`.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
    /// Train every listed variant on the same data and seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Comma-separated variants; all by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Check the transfer bounds on random tabular task families.
    Theory {
        #[command(flatten)]
        common: Common,
    },
    /// Plot one metric across seed files as SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        /// CSV files, one per seed.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        x: Option<String>,
        #[arg(long)]
        y: Option<String>,
        #[arg(long)]
        window: Option<usize>,
    },
}

/// Everything needed to reproduce a command, written as `config.json`.
#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    git: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset_manifest_crc32: Option<u32>,
    config: &'a Settings,
}

fn output_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command)
    })
}

/// Create `dir`, refusing to reuse a non-empty one unless `force` (which
/// clears it) or `keep` (which leaves it for a resume).
fn prepare_dir(dir: &Path, force: bool, keep: bool) -> anyhow::Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !keep {
        if !force {
            return Err(usage(format!(
                "{} exists and is not empty (use --force to replace it)",
                dir.display()
            )));
        }
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                fs::remove_dir_all(&path)?;
            } else {
                fs::remove_file(&path)?;
            }
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn resolve_common(common: &Common, extra: Vec<String>) -> anyhow::Result<Settings> {
    let mut overrides = Vec::new();
    if let Some(seed) = common.seed {
        for key in ["data.seed", "trainer.seed", "theory.seed"] {
            overrides.push(format!("{key}={seed}"));
        }
    }
    overrides.extend(extra);
    overrides.extend(common.set.iter().cloned());
    resolve(common.config.as_deref(), common.preset.as_deref(), &overrides)
}

fn manifest_crc(dir: &Path) -> anyhow::Result<u32> {
    let bytes = fs::read(dir.join("manifest.json"))
        .with_context(|| format!("reading {}", dir.join("manifest.json").display()))?;
    Ok(crc32fast::hash(&bytes))
}

/// Accept either a dataset directory or a `collect` output holding one.
fn dataset_dir(path: &Path) -> PathBuf {
    if path.join("manifest.json").exists() {
        path.to_path_buf()
    } else {
        path.join("dataset")
    }
}

fn write_record(dir: &Path, command: &str, settings: &Settings, dataset: Option<&Path>) -> anyhow::Result<()> {
    let dataset_abs = dataset
        .map(|d| fs::canonicalize(d).with_context(|| format!("dataset {}", d.display())))
        .transpose()?;
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        git: env!("SFMETA_GIT_DESCRIBE"),
        dataset_manifest_crc32: dataset_abs.as_deref().map(manifest_crc).transpose()?,
        dataset: dataset_abs.map(|d| d.display().to_string()),
        config: settings,
    };
    write_atomic(&dir.join("config.json"), &serde_json::to_vec_pretty(&record)?)?;
    Ok(())
}

fn cmd_collect(
    common: Common,
    family: Option<String>,
    train_tasks: Option<usize>,
    test_tasks: Option<usize>,
    trajs: Option<usize>,
) -> anyhow::Result<()> {
    let mut extra = Vec::new();
    if let Some(f) = family {
        f.parse::<TaskFamily>().map_err(|e| usage(e.to_string()))?;
        extra.push(format!("data.family={f}"));
    }
    for (key, v) in [("train_tasks", train_tasks), ("test_tasks", test_tasks), ("trajectories", trajs)] {
        if let Some(v) = v {
            extra.push(format!("data.{key}={v}"));
        }
    }
    let settings = resolve_common(&common, extra)?;
    let d = &settings.data;
    let out = output_dir(&common, "collect");
    prepare_dir(&out, common.force, false)?;
    write_record(&out, "collect", &settings, None)?;
    let (train, test) = sample_tasks(d.family, d.train_tasks, d.test_tasks, &d.env, d.seed)?;
    let dataset = collect_dataset(&train, &test, &d.mixture.entries(), d.trajectories, &d.env, d.seed)?;
    let target = out.join("dataset");
    let manifest = save_dataset(&dataset, &target)?;
    println!(
        "dataset {}: {} ({} train / {} test tasks, {} transitions), manifest crc32 {:08x}",
        target.display(),
        d.family,
        manifest.train_tasks,
        manifest.test_tasks,
        manifest.total_transitions,
        manifest_crc(&target)?
    );
    Ok(())
}

fn parse_variant(name: &str) -> anyhow::Result<Variant> {
    name.parse::<Variant>().map_err(|e| usage(e.to_string()))
}

fn cmd_train(common: Common, data: PathBuf, variant: Option<String>, resume: bool) -> anyhow::Result<()> {
    let mut extra = Vec::new();
    if let Some(v) = variant {
        parse_variant(&v)?;
        extra.push(format!("trainer.variant={v}"));
    }
    let settings = resolve_common(&common, extra)?;
    let data = dataset_dir(&data);
    load_dataset_manifest(&data)?;
    let out = output_dir(&common, "train");
    prepare_dir(&out, common.force, resume)?;
    write_record(&out, "train", &settings, Some(&data))?;
    let dataset = load_dataset(&data)?;
    let opts = RunOptions {
        resume,
        stop_after: None,
    };
    let (trainer, records) = train_run(&settings.trainer, &dataset, &out, &opts)?;
    for r in &records {
        println!(
            "episode {:>4}  alpha {:>5.2}  train return {:>9.3}  test return {:>9.3}  success {:.2}",
            r.g, r.alpha, r.eval_return, r.test_return, r.test_success
        );
    }
    println!("{} episodes done, run directory {}", trainer.episode, out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    episode: u64,
    test_return: f64,
    test_success: f64,
    recorded_test_return: Option<f64>,
    matches_record: Option<bool>,
}

fn cmd_eval(run: PathBuf) -> anyhow::Result<()> {
    let text = fs::read_to_string(run.join("config.json"))
        .map_err(|e| usage(format!("{} has no readable config.json: {e}", run.display())))?;
    let record: serde_json::Value = serde_json::from_str(&text)?;
    let data = record["dataset"]
        .as_str()
        .ok_or_else(|| usage("config.json does not name a dataset"))?;
    let dataset = load_dataset(Path::new(data))?;
    let mut trainer = Trainer::resume(&dataset, &run.join("checkpoint"))?;
    let g = trainer
        .episode
        .checked_sub(1)
        .ok_or_else(|| usage("the checkpoint precedes the first episode"))?;
    let (ret, success) = trainer.evaluate_test_at(g)?;
    let recorded = recorded_test_return(&run.join("metrics.csv"), g)?;
    let report = EvalReport {
        episode: g,
        test_return: ret,
        test_success: success,
        recorded_test_return: recorded,
        matches_record: recorded.map(|r| r.to_bits() == ret.to_bits()),
    };
    write_atomic(&run.join("eval.json"), &serde_json::to_vec_pretty(&report)?)?;
    println!("episode {g}: test return {ret:.6}, success {success:.3}");
    match recorded {
        Some(r) if r.to_bits() != ret.to_bits() => {
            anyhow::bail!("recorded test return {r} differs from the re-evaluation {ret}")
        }
        Some(_) => println!("matches metrics.csv"),
        None => println!("no metrics row for episode {g}"),
    }
    Ok(())
}

fn recorded_test_return(path: &Path, g: u64) -> anyhow::Result<Option<f64>> {
    if !path.exists() {
        return Ok(None);
    }
    let (head, rows) = read_csv(path)?;
    let col = head
        .iter()
        .position(|h| h == "test_return")
        .context("metrics.csv has no test_return column")?;
    Ok(rows
        .iter()
        .find(|r| r[0].parse::<u64>().ok() == Some(g))
        .and_then(|r| r[col].parse().ok()))
}

fn cmd_ablate(common: Common, data: PathBuf, variants: Vec<String>) -> anyhow::Result<()> {
    let variants = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        variants.iter().map(|v| parse_variant(v)).collect::<anyhow::Result<_>>()?
    };
    let settings = resolve_common(&common, Vec::new())?;
    let data = dataset_dir(&data);
    load_dataset_manifest(&data)?;
    let out = output_dir(&common, "ablate");
    prepare_dir(&out, common.force, false)?;
    write_record(&out, "ablate", &settings, Some(&data))?;
    let dataset = load_dataset(&data)?;
    let rows = run_ablation(&settings.trainer, &dataset, &variants, &out)?;
    println!("{:<12} {:>18} {:>12}", "variant", "final test return", "max q gap");
    for r in &rows {
        println!("{:<12} {:>18.3} {:>12.4}", r.variant.name(), r.final_test_return(), r.max_q_gap());
    }
    Ok(())
}

/// Returns whether every bound held.
fn cmd_theory(common: Common) -> anyhow::Result<bool> {
    let settings = resolve_common(&common, Vec::new())?;
    let out = output_dir(&common, "theory");
    prepare_dir(&out, common.force, false)?;
    write_record(&out, "theory", &settings, None)?;
    let summary = run_suite(&settings.theory)?;
    let gpi_rows = summary
        .gpi
        .iter()
        .map(|r| {
            let pattern = serde_json::to_value(r.pattern)?;
            Ok(vec![
                r.family.to_string(),
                r.task.to_string(),
                pattern.as_str().unwrap_or_default().to_string(),
                fmt_f64(r.epsilon),
                fmt_f64(r.worst_slack),
            ])
        })
        .collect::<Result<Vec<_>, serde_json::Error>>()?;
    let gpi_head: Vec<String> = ["family", "task", "pattern", "epsilon", "worst_slack"]
        .map(String::from)
        .to_vec();
    write_csv(&out.join("gpi.csv"), &gpi_head, &gpi_rows)?;
    let pair_head: Vec<String> = BoundReport::HEADER.map(String::from).to_vec();
    let pair_rows: Vec<Vec<String>> = summary.pairs.iter().map(BoundReport::csv_row).collect();
    write_csv(&out.join("bounds.csv"), &pair_head, &pair_rows)?;
    let (gv, pv) = (summary.gpi_violations(), summary.pair_violations());
    println!(
        "{} GPI trials, {} violations; {} task pairs, {} violations",
        summary.gpi.len(),
        gv,
        summary.pairs.len(),
        pv
    );
    Ok(gv == 0 && pv == 0)
}

fn cmd_plot(
    common: Common,
    inputs: Vec<PathBuf>,
    x: Option<String>,
    y: Option<String>,
    window: Option<usize>,
) -> anyhow::Result<()> {
    let mut extra = Vec::new();
    for (key, v) in [("x", x), ("y", y)] {
        if let Some(v) = v {
            extra.push(format!("plot.{key}={}", serde_json::Value::String(v)));
        }
    }
    if let Some(w) = window {
        extra.push(format!("plot.window={w}"));
    }
    let settings = resolve_common(&common, extra)?;
    // Inputs are validated before anything is written.
    let svg = plot::plot(&inputs, &settings.plot)?;
    let out = output_dir(&common, "plot");
    prepare_dir(&out, common.force, false)?;
    write_record(&out, "plot", &settings, None)?;
    let path = out.join("plot.svg");
    write_atomic(&path, svg.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage_like = err.downcast_ref::<UsageError>().is_some()
        || matches!(err.downcast_ref::<sfmeta::error::Error>(), Some(sfmeta::error::Error::Config(_)));
    if usage_like {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let keys = format!("Resolvable config keys and defaults:\n{}", Settings::key_listing());
    let mut cmd = Cli::command();
    for name in ["collect", "train", "ablate", "theory", "plot"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_long_help(keys.clone()).after_help(keys.clone()));
    }
    let matches = cmd.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Collect {
            common,
            family,
            train_tasks,
            test_tasks,
            trajs,
        } => cmd_collect(common, family, train_tasks, test_tasks, trajs),
        Command::Train {
            common,
            data,
            variant,
            resume,
        } => cmd_train(common, data, variant, resume),
        Command::Eval { run } => cmd_eval(run),
        Command::Ablate {
            common,
            data,
            variants,
        } => cmd_ablate(common, data, variants),
        Command::Theory { common } => match cmd_theory(common) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: bound violations found");
                return ExitCode::from(3);
            }
            Err(e) => Err(e),
        },
        Command::Plot {
            common,
            inputs,
            x,
            y,
            window,
        } => cmd_plot(common, inputs, x, y, window),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            if code == 2 {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            ExitCode::from(code)
        }
    }
}
