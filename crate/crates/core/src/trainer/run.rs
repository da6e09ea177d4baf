use std::fs;
use std::path::Path;

use crate::envs::OfflineDataset;
use crate::error::Result;
use crate::persistence::{append_csv, fmt_f64, read_csv, write_csv};
use crate::trainer::{EpisodeRecord, TrainConfig, Trainer, Variant};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Continue from `checkpoint.json` in the run directory when present.
    pub resume: bool,
    /// Stop once this many episodes are done, as if interrupted.
    pub stop_after: Option<u64>,
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

/// Drop rows whose episode index is at least `keep_below`, so a resumed run
/// rewrites what the interrupted one logged after its last checkpoint.
fn truncate_rows(path: &Path, keep_below: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let (head, rows) = read_csv(path)?;
    let kept: Vec<Vec<String>> = rows
        .into_iter()
        .filter(|r| r.first().and_then(|g| g.parse::<u64>().ok()).is_some_and(|g| g < keep_below))
        .collect();
    write_csv(path, &head, &kept)
}

/// Train in `dir`, writing `metrics.csv`, `timing.csv`, `bandit.csv` (when
/// the variant uses the bandit) and periodic checkpoints. Returns the
/// trainer and the records of the episodes run by this call.
pub fn train_run(
    config: &TrainConfig,
    dataset: &OfflineDataset,
    dir: &Path,
    opts: &RunOptions,
) -> Result<(Trainer, Vec<EpisodeRecord>)> {
    fs::create_dir_all(dir)?;
    let base = dir.join("checkpoint");
    let metrics = dir.join("metrics.csv");
    let timing = dir.join("timing.csv");
    let bandit_path = dir.join("bandit.csv");
    let mut trainer = if opts.resume && base.with_extension("json").exists() {
        let mut t = Trainer::resume(dataset, &base)?;
        t.config.iterations = config.iterations;
        for p in [&metrics, &timing, &bandit_path] {
            truncate_rows(p, t.episode)?;
        }
        t
    } else {
        let t = Trainer::new(config.clone(), dataset)?;
        write_csv(&metrics, &header(&EpisodeRecord::HEADER), &[])?;
        write_csv(&timing, &header(&["g", "wall_seconds"]), &[])?;
        match &t.bandit {
            Some(b) => write_csv(&bandit_path, &b.csv_header(), &[])?,
            None if bandit_path.exists() => fs::remove_file(&bandit_path)?,
            None => {}
        }
        t
    };
    let total = trainer.config.iterations;
    let stop = opts.stop_after.map_or(total, |s| s.min(total));
    let mut records = Vec::new();
    while trainer.episode < stop {
        let rec = trainer.run_episode()?;
        append_csv(&metrics, &header(&EpisodeRecord::HEADER), &rec.csv_row())?;
        append_csv(
            &timing,
            &header(&["g", "wall_seconds"]),
            &[rec.g.to_string(), fmt_f64(rec.wall_time)],
        )?;
        if let Some(b) = &trainer.bandit {
            append_csv(
                &bandit_path,
                &b.csv_header(),
                &b.csv_row(rec.g, rec.alpha, rec.p_alpha, rec.eval_return),
            )?;
        }
        if trainer.episode % trainer.config.checkpoint_every == 0 || trainer.episode == total {
            trainer.save_checkpoint(&base)?;
        }
        records.push(rec);
    }
    Ok((trainer, records))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub records: Vec<EpisodeRecord>,
}

impl AblationRow {
    pub fn final_test_return(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.test_return)
    }

    pub fn max_q_gap(&self) -> f64 {
        self.records.iter().map(EpisodeRecord::q_gap).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// The same seed and data under each variant, each in `dir/<variant>`, plus
/// `dir/ablation.csv` comparing final returns.
pub fn run_ablation(
    config: &TrainConfig,
    dataset: &OfflineDataset,
    variants: &[Variant],
    dir: &Path,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = TrainConfig {
            variant,
            ..config.clone()
        };
        let (_, records) = train_run(&cfg, dataset, &dir.join(variant.name()), &RunOptions::default())?;
        rows.push(AblationRow { variant, records });
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let last = r.records.last();
            vec![
                r.variant.name().to_string(),
                fmt_f64(r.final_test_return()),
                fmt_f64(last.map_or(f64::NAN, |l| l.eval_return)),
                fmt_f64(r.max_q_gap()),
            ]
        })
        .collect();
    write_csv(
        &dir.join("ablation.csv"),
        &header(&["variant", "final_test_return", "final_eval_return", "max_q_gap"]),
        &table,
    )?;
    Ok(rows)
}
