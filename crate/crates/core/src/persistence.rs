//! On-disk formats: checkpoints (raw little-endian `f64` plus a JSON
//! manifest), offline datasets (per-task CSV plus JSON), and CSV metrics.
//! Every manifest carries a format version; readers reject newer majors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndgrad::Tensor;
use serde::{Deserialize, Serialize};

use crate::envs::{
    BehaviorStage, DatasetMeta, OfflineDataset, Split, TaskData, TaskSpec, Trajectory, Transition,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVersion {
    pub major: u32,
    pub minor: u32,
}

impl FormatVersion {
    pub const CURRENT: FormatVersion = FormatVersion { major: 1, minor: 0 };

    pub fn check(self) -> Result<()> {
        if self.major > Self::CURRENT.major {
            return Err(Error::FormatVersion {
                found: self.to_string(),
                supported: Self::CURRENT.to_string(),
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for FormatVersion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.major, self.minor)
    }
}

/// 17 significant digits, enough for an exact `f64` round trip.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn crc_of(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Write through a sibling temp file and rename, so readers never observe a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = sibling(path, "partial");
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

// ---------------------------------------------------------------- checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: FormatVersion,
    pub seed: u64,
    pub data_file: String,
    pub byte_len: usize,
    pub crc32: u32,
    pub tensors: Vec<TensorEntry>,
    /// Free-form state that is not a tensor (counters, rng position, records).
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("bin"), base.with_extension("json"))
}

/// Save named tensors to `<base>.bin` and `<base>.json`.
pub fn save_checkpoint(
    tensors: &[(String, Tensor)],
    seed: u64,
    extra: serde_json::Value,
    base: &Path,
) -> Result<CheckpointManifest> {
    let mut seen = std::collections::HashSet::new();
    for (name, _) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Contract(format!("duplicate tensor name {name:?}")));
        }
    }
    let (bin, json) = checkpoint_paths(base);
    let mut bytes = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 8).sum());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: FormatVersion::CURRENT,
        seed,
        data_file: bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        byte_len: bytes.len(),
        crc32: crc_of(&bytes),
        tensors: entries,
        extra,
    };
    write_atomic(&bin, &bytes)?;
    if let Err(e) = write_atomic(&json, &serde_json::to_vec_pretty(&manifest)?) {
        let _ = fs::remove_file(&bin);
        return Err(e);
    }
    Ok(manifest)
}

pub fn load_checkpoint(base: &Path) -> Result<(CheckpointManifest, Vec<(String, Tensor)>)> {
    let (bin, json) = checkpoint_paths(base);
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&json)?)?;
    manifest.format_version.check()?;
    let bytes = fs::read(&bin)?;
    if bytes.len() != manifest.byte_len || crc_of(&bytes) != manifest.crc32 {
        return Err(Error::Checksum(bin));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * 8;
        let Some(raw) = bytes.get(entry.offset..end) else {
            return Err(Error::Checksum(bin));
        };
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((manifest, out))
}

// -------------------------------------------------------------------- datasets

pub const TRANSITIONS_HEADER: [&str; 10] =
    ["t", "s0", "s1", "a0", "a1", "r", "sp0", "sp1", "done", "traj_id"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub index: usize,
    pub dir: String,
    pub split: Split,
    pub trajectories: usize,
    pub transitions: usize,
    /// Behavior stage of each trajectory, by `traj_id`.
    pub labels: Vec<BehaviorStage>,
    pub transitions_crc32: u32,
    pub task_crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: FormatVersion,
    #[serde(flatten)]
    pub meta: DatasetMeta,
    pub train_tasks: usize,
    pub test_tasks: usize,
    pub total_transitions: usize,
    pub tasks: Vec<TaskManifest>,
}

fn task_dir_name(index: usize) -> String {
    format!("task_{index:03}")
}

fn transitions_csv(task: &TaskData) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRANSITIONS_HEADER)?;
    for (j, traj) in task.trajectories.iter().enumerate() {
        for tr in &traj.transitions {
            w.write_record([
                tr.t.to_string(),
                fmt_f64(tr.s[0]),
                fmt_f64(tr.s[1]),
                fmt_f64(tr.a[0]),
                fmt_f64(tr.a[1]),
                fmt_f64(tr.r),
                fmt_f64(tr.s_next[0]),
                fmt_f64(tr.s_next[1]),
                u8::from(tr.done).to_string(),
                j.to_string(),
            ])?;
        }
    }
    w.into_inner()
        .map_err(|e| Error::Dataset(format!("csv buffer: {e}")))
}

/// Write a dataset directory. `dir` must be absent or empty; the tree is
/// built next to it and renamed into place, so a failure leaves nothing.
pub fn save_dataset(dataset: &OfflineDataset, dir: &Path) -> Result<DatasetManifest> {
    if dir.exists() {
        if fs::read_dir(dir)?.next().is_some() {
            return Err(Error::Dataset(format!(
                "{} exists and is not empty",
                dir.display()
            )));
        }
        fs::remove_dir(dir)?;
    }
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let staging = sibling(dir, "staging");
    let _ = fs::remove_dir_all(&staging);
    match write_dataset_tree(dataset, &staging) {
        Ok(manifest) => {
            if let Err(e) = fs::rename(&staging, dir) {
                let _ = fs::remove_dir_all(&staging);
                return Err(Error::Dataset(format!(
                    "could not move dataset into {}: {e}",
                    dir.display()
                )));
            }
            Ok(manifest)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn write_dataset_tree(dataset: &OfflineDataset, root: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(root)?;
    let mut tasks = Vec::with_capacity(dataset.tasks.len());
    for task in &dataset.tasks {
        let name = task_dir_name(task.index);
        let dir = root.join(&name);
        fs::create_dir(&dir)?;
        let csv_bytes = transitions_csv(task)?;
        let spec_bytes = serde_json::to_vec_pretty(&task.spec)?;
        fs::write(dir.join("transitions.csv"), &csv_bytes)?;
        fs::write(dir.join("task.json"), &spec_bytes)?;
        tasks.push(TaskManifest {
            index: task.index,
            dir: name,
            split: task.split,
            trajectories: task.trajectories.len(),
            transitions: task.transition_count(),
            labels: task.trajectories.iter().map(|t| t.label).collect(),
            transitions_crc32: crc_of(&csv_bytes),
            task_crc32: crc_of(&spec_bytes),
        });
    }
    let manifest = DatasetManifest {
        format_version: FormatVersion::CURRENT,
        meta: dataset.meta.clone(),
        train_tasks: dataset.split(Split::Train).count(),
        test_tasks: dataset.split(Split::Test).count(),
        total_transitions: dataset.transition_count(),
        tasks,
    };
    fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| {
        Error::Dataset(format!("cannot read {}: {e}", path.display()))
    })?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    // Gate on the version before interpreting the rest of the document.
    if let Some(v) = value.get("format_version") {
        let v: FormatVersion = serde_json::from_value(v.clone())?;
        v.check()?;
    }
    Ok(serde_json::from_value(value)?)
}

/// Read and verify a dataset directory. Files are only read.
pub fn load_dataset(dir: &Path) -> Result<OfflineDataset> {
    let manifest = load_dataset_manifest(dir)?;
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for tm in &manifest.tasks {
        let tdir = dir.join(&tm.dir);
        let spec_path = tdir.join("task.json");
        let spec_bytes = fs::read(&spec_path).map_err(|e| Error::TaskSpec {
            dir: tdir.clone(),
            message: format!("cannot read task.json: {e}"),
        })?;
        let spec: TaskSpec = serde_json::from_slice(&spec_bytes).map_err(|e| Error::TaskSpec {
            dir: tdir.clone(),
            message: e.to_string(),
        })?;
        let csv_path = tdir.join("transitions.csv");
        let csv_bytes = fs::read(&csv_path)?;
        let trajectories = parse_transitions(&csv_path, &csv_bytes, &tm.labels)?;
        let count: usize = trajectories.iter().map(|t| t.transitions.len()).sum();
        if count != tm.transitions || trajectories.len() != tm.trajectories {
            return Err(Error::Dataset(format!(
                "{}: count mismatch, manifest says {} transitions in {} trajectories, file has {} in {}",
                csv_path.display(),
                tm.transitions,
                tm.trajectories,
                count,
                trajectories.len()
            )));
        }
        if crc_of(&csv_bytes) != tm.transitions_crc32 {
            return Err(Error::Checksum(csv_path));
        }
        if crc_of(&spec_bytes) != tm.task_crc32 {
            return Err(Error::Checksum(spec_path));
        }
        tasks.push(TaskData {
            index: tm.index,
            split: tm.split,
            spec,
            trajectories,
        });
    }
    let total: usize = tasks.iter().map(TaskData::transition_count).sum();
    if total != manifest.total_transitions {
        return Err(Error::Dataset(format!(
            "count mismatch: manifest total {} but tasks hold {total}",
            manifest.total_transitions
        )));
    }
    let dataset = OfflineDataset {
        meta: manifest.meta,
        tasks,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn parse_transitions(
    path: &Path,
    bytes: &[u8],
    labels: &[BehaviorStage],
) -> Result<Vec<Trajectory>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(bytes);
    let header = reader.headers()?.clone();
    if header.iter().ne(TRANSITIONS_HEADER) {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            row: 1,
            message: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Row numbers count the header as row 1.
        let row = i + 2;
        let record = record?;
        let err = |message: String| Error::Parse {
            file: path.to_path_buf(),
            row,
            message,
        };
        if record.len() != TRANSITIONS_HEADER.len() {
            return Err(err(format!(
                "expected {} fields, found {}",
                TRANSITIONS_HEADER.len(),
                record.len()
            )));
        }
        let float = |k: usize| -> Result<f64> {
            record[k]
                .parse::<f64>()
                .map_err(|e| err(format!("column {}: {e}", TRANSITIONS_HEADER[k])))
        };
        let int = |k: usize| -> Result<usize> {
            record[k]
                .parse::<usize>()
                .map_err(|e| err(format!("column {}: {e}", TRANSITIONS_HEADER[k])))
        };
        let done = match &record[8] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("column done: expected 0 or 1, got {other:?}"))),
        };
        let traj_id = int(9)?;
        let tr = Transition {
            t: int(0)?,
            s: [float(1)?, float(2)?],
            a: [float(3)?, float(4)?],
            r: float(5)?,
            s_next: [float(6)?, float(7)?],
            done,
        };
        if traj_id == trajectories.len() {
            let label = *labels
                .get(traj_id)
                .ok_or_else(|| err(format!("trajectory {traj_id} has no label in the manifest")))?;
            trajectories.push(Trajectory {
                label,
                transitions: Vec::new(),
            });
        } else if traj_id + 1 != trajectories.len() {
            return Err(err(format!("trajectory id {traj_id} out of order")));
        }
        trajectories[traj_id].transitions.push(tr);
    }
    Ok(trajectories)
}

// --------------------------------------------------------------------- metrics

/// Rewrite a CSV file from scratch.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Dataset(format!("csv buffer: {e}")))?;
    write_atomic(path, &bytes)
}

/// Append one row, writing the header first if the file is new.
pub fn append_csv(path: &Path, header: &[String], row: &[String]) -> Result<()> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(header)?;
    }
    w.write_record(row)?;
    w.flush()?;
    Ok(())
}

/// Read a CSV file into its header and rows of strings.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for r in reader.records() {
        rows.push(r?.iter().map(str::to_owned).collect());
    }
    Ok((header, rows))
}
