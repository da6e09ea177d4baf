use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sfmeta");

fn run(args: &[&str], out_root: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .env("SFMETA_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

const TINY_DATA: [&str; 4] = ["--set", "data.env.max_path_length=20", "--trajs", "3"];

const TINY_TRAINER: &[&str] = &[
    "--set", "trainer.iterations=2",
    "--set", "trainer.steps_per_iteration=3",
    "--set", "trainer.initial_steps=2",
    "--set", "trainer.eval_steps=40",
    "--set", "trainer.max_path_length=20",
    "--set", "trainer.context_transitions=10",
    "--set", "trainer.batch_size=16",
    "--set", "trainer.meta_batch=2",
    "--set", "trainer.hidden=[16,16]",
    "--set", "trainer.embed_dim=8",
    "--set", "trainer.q_diag_states=2",
];

fn collect(root: &Path, name: &str, seed: &str) -> std::path::PathBuf {
    let out = root.join(name);
    let mut args = vec!["collect", "--family", "point-robot", "--train-tasks", "8", "--test-tasks", "2"];
    args.extend(TINY_DATA);
    args.extend(["--seed", seed, "--out", out.to_str().unwrap()]);
    ok(&run(&args, root));
    out
}

#[test]
fn collect_writes_ten_task_folders_deterministically() {
    let root = tempfile::tempdir().unwrap();
    let a = collect(root.path(), "a", "0");
    let b = collect(root.path(), "b", "0");
    let tasks = fs::read_dir(a.join("dataset"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(tasks, 10);
    assert_eq!(
        fs::read(a.join("dataset/manifest.json")).unwrap(),
        fs::read(b.join("dataset/manifest.json")).unwrap()
    );
    assert!(a.join("config.json").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let root = tempfile::tempdir().unwrap();
    let o = run(&["collect", "--family", "moon"], root.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(&["collect", "--set", "trainer.nope=1"], root.path()).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"], root.path()).status.code(), Some(2));
    let out = collect(root.path(), "d", "1");
    let again = run(&["collect", "--out", out.to_str().unwrap()], root.path());
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let root = tempfile::tempdir().unwrap();
    let mut args = vec!["collect", "--train-tasks", "2", "--test-tasks", "1"];
    args.extend(TINY_DATA);
    ok(&run(&args, root.path()));
    assert!(root.path().join("collect/dataset/manifest.json").exists());
}

#[test]
fn train_then_eval_reproduces_the_recorded_return() {
    let root = tempfile::tempdir().unwrap();
    let data = collect(root.path(), "data", "2");
    let run_dir = root.path().join("run");
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap()];
    args.extend(TINY_TRAINER);
    ok(&run(&args, root.path()));
    for f in ["config.json", "metrics.csv", "bandit.csv", "timing.csv", "checkpoint.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let episodes: Vec<u64> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(episodes, vec![0, 1]);

    let e = run(&["eval", "--run", run_dir.to_str().unwrap()], root.path());
    ok(&e);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["matches_record"], serde_json::Value::Bool(true));
}

#[test]
fn no_aco_run_has_no_bandit_log() {
    let root = tempfile::tempdir().unwrap();
    let data = collect(root.path(), "data", "3");
    let run_dir = root.path().join("run");
    let mut args = vec![
        "train", "--variant", "no-aco", "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap(),
    ];
    args.extend(TINY_TRAINER);
    ok(&run(&args, root.path()));
    assert!(!run_dir.join("bandit.csv").exists());
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    let col = lines.next().unwrap().split(',').position(|h| h == "alpha").unwrap();
    for l in lines {
        assert_eq!(l.split(',').nth(col).unwrap().parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn theory_reports_no_violations() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("t");
    let o = run(&["theory", "--set", "theory.families=10", "--out", out.to_str().unwrap()], root.path());
    ok(&o);
    let bounds = fs::read_to_string(out.join("bounds.csv")).unwrap();
    assert_eq!(bounds.lines().count(), 1 + 10 * 6);
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 violations"));
}

fn metrics_file(dir: &Path, name: &str, ys: &[f64]) -> std::path::PathBuf {
    let p = dir.join(name);
    let mut text = String::from("g,test_return\n");
    for (g, y) in ys.iter().enumerate() {
        text.push_str(&format!("{g},{y}\n"));
    }
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn plot_draws_a_band_only_for_several_seeds() {
    let root = tempfile::tempdir().unwrap();
    let files: Vec<_> = [[1.0, 2.0, 3.0], [0.0, 2.5, 2.0], [2.0, 1.0, 4.0]]
        .iter()
        .enumerate()
        .map(|(i, ys)| metrics_file(root.path(), &format!("s{i}.csv"), ys))
        .collect();
    let one = root.path().join("one");
    ok(&run(&["plot", files[0].to_str().unwrap(), "--out", one.to_str().unwrap()], root.path()));
    let svg = fs::read_to_string(one.join("plot.svg")).unwrap();
    assert!(svg.starts_with("<svg") && !svg.contains("fill-opacity"));

    let three = root.path().join("three");
    let mut args = vec!["plot"];
    args.extend(files.iter().map(|f| f.to_str().unwrap()));
    args.extend(["--out", three.to_str().unwrap()]);
    ok(&run(&args, root.path()));
    let first = fs::read(three.join("plot.svg")).unwrap();
    assert!(String::from_utf8_lossy(&first).contains("fill-opacity"));
    args.push("--force");
    ok(&run(&args, root.path()));
    assert_eq!(fs::read(three.join("plot.svg")).unwrap(), first);
}

#[test]
fn plot_errors_write_nothing() {
    let root = tempfile::tempdir().unwrap();
    let empty = metrics_file(root.path(), "empty.csv", &[]);
    let out = root.path().join("p");
    let o = run(&["plot", empty.to_str().unwrap(), "--out", out.to_str().unwrap()], root.path());
    assert_ne!(o.status.code(), Some(0));
    assert!(!out.exists());
    let good = metrics_file(root.path(), "good.csv", &[1.0]);
    let o = run(&["plot", good.to_str().unwrap(), "--y", "q_gap", "--out", out.to_str().unwrap()], root.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("'q_gap'"));
    assert!(!out.exists());
}

#[test]
fn help_lists_resolvable_keys() {
    let root = tempfile::tempdir().unwrap();
    for cmd in ["collect", "train", "ablate", "theory", "plot"] {
        let o = run(&[cmd, "--help"], root.path());
        ok(&o);
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("trainer.batch_size = 128"), "{cmd}");
        assert!(text.contains("data.family = \"point-robot\""), "{cmd}");
    }
}
