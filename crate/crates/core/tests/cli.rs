use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mftcn::cli::RunConfig;
use mftcn::dataset::MultiViewDataset;
use mftcn::eval::read_rows;

fn mftcn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mftcn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(o: &Output, key: &str) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")).map(str::to_string))
        .unwrap_or_else(|| {
            panic!(
                "no {key} in output:\n{}\n{}",
                stdout(o),
                String::from_utf8_lossy(&o.stderr)
            )
        })
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\n{}\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        r#"
seed = 3

[data]
trajectories = 6
length = 40
train_fraction = 0.67

[env]
cameras = [
  { mode = "fixed", view_id = 0, horizontal_offset = 0.0, width = 32, height = 16 },
  { mode = "tracking", view_id = 1, horizontal_offset = 0.0, width = 32, height = 16 },
]

[model]
embedding_dim = 8
n_frames = 2
stride = 1
width = 32
height = 16

[sampler]
n_frames = 2
stride = 1
timesteps_per_traj = 4
trajs_per_batch = 2

[train]
steps = 6
log_every = 2

[probe]
hidden = [16]
epochs = 3
batch_size = 64

[policy]
width = 32
height = 16
horizon = 30
total_steps = 120
eval_episodes = 3
eval_horizon = 30

[policy.ppo]
rollout_steps = 60
minibatch = 30
epochs = 2

[demos]
episodes = 3
horizon = 30
keep_percentile = 0.0
"#,
    )
    .unwrap();
    path
}

#[test]
fn generate_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let a = ok(mftcn(tmp.path(), &["generate-data", "-c", cfg, "--seed", "7"]));
    let b = ok(mftcn(tmp.path(), &["generate-data", "-c", cfg, "--seed", "7"]));
    assert_eq!(field(&a, "dataset_digest"), field(&b, "dataset_digest"));
    assert_ne!(
        field(&a, "run"),
        field(&b, "run"),
        "each invocation gets its own run directory"
    );
    let c = ok(mftcn(tmp.path(), &["generate-data", "-c", cfg, "--seed", "8"]));
    assert_ne!(field(&a, "dataset_digest"), field(&c, "dataset_digest"));

    // The stored config reproduces the run on its own.
    let run = tmp.path().join(field(&a, "run"));
    let stored = run.join("config.toml");
    let resolved = RunConfig::load(&stored).unwrap();
    assert_eq!(resolved.seed, 7);
    let again = ok(mftcn(tmp.path(), &["generate-data", "-c", stored.to_str().unwrap()]));
    assert_eq!(field(&again, "dataset_digest"), field(&a, "dataset_digest"));
    let again_run = tmp.path().join(field(&again, "run"));
    assert_eq!(
        std::fs::read_to_string(again_run.join("config.toml")).unwrap(),
        std::fs::read_to_string(&stored).unwrap()
    );
}

#[test]
fn missing_inputs_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mftcn(tmp.path(), &["eval-probe"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
    let o = mftcn(
        tmp.path(),
        &["eval-probe", "--checkpoint", "missing.bin", "--dataset", "."],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.bin"));
    let o = mftcn(tmp.path(), &["generate-data", "-c", "nope.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mftcn(tmp.path(), &["generate-data", "--set", "model.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mftcn(tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(2), "no subcommand");
    let o = mftcn(tmp.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        !tmp.path().join("runs").exists(),
        "rejected inputs leave no run directory"
    );
}

#[test]
fn embedding_pipeline_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let data = ok(mftcn(tmp.path(), &["generate-data", "-c", cfg]));
    let dataset = field(&data, "dataset");
    let train = ok(mftcn(tmp.path(), &["train-embed", "-c", cfg, "--dataset", &dataset]));
    assert_eq!(field(&train, "final_step"), "6");
    let train_dir = field(&train, "run");
    let metrics = std::fs::read_to_string(tmp.path().join(&train_dir).join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    // Resuming a finished run is a no-op that keeps the step count.
    let resumed = ok(mftcn(
        tmp.path(),
        &[
            "train-embed",
            "-c",
            cfg,
            "--dataset",
            &dataset,
            "--out",
            &train_dir,
            "--resume",
        ],
    ));
    assert_eq!(field(&resumed, "final_step"), "6");
    let mismatch = mftcn(
        tmp.path(),
        &[
            "train-embed",
            "-c",
            cfg,
            "--dataset",
            &dataset,
            "--out",
            &train_dir,
            "--resume",
            "--set",
            "train.lr=0.5",
        ],
    );
    assert_eq!(mismatch.status.code(), Some(2));

    let mut runs = Vec::new();
    for cmd in ["eval-probe", "eval-knn", "eval-align"] {
        let o = ok(mftcn(
            tmp.path(),
            &[cmd, "-c", cfg, "--dataset", &dataset, "--checkpoint", &train_dir],
        ));
        runs.push(field(&o, "run"));
    }
    let mut args = vec!["report", "-c", cfg];
    args.extend(runs.iter().map(String::as_str));
    let rep = ok(mftcn(tmp.path(), &args));
    let rep_dir = tmp.path().join(field(&rep, "run"));
    let rows = read_rows(&rep_dir.join("table.jsonl")).unwrap();
    assert_eq!(rows.len(), 1);
    let row = &rows[0];
    assert_eq!((row.embedding_dim, row.n_frames, row.stride), (8, 2, 1));
    assert!(row.probe.is_some() && row.knn.is_some() && row.alignment.is_some());
    let csv = std::fs::read_to_string(rep_dir.join("table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "header plus one merged row:\n{csv}");
    assert!(rep_dir.join("table.txt").exists());
}

#[test]
fn policy_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let train = ok(mftcn(tmp.path(), &["train-policy", "-c", cfg]));
    let policy = field(&train, "run");
    let curve = std::fs::read_to_string(tmp.path().join(&policy).join("curve.jsonl")).unwrap();
    assert!(curve.lines().count() >= 1);
    assert!(curve.contains("env_steps") && curve.contains("mean_reward"));

    let eval = ok(mftcn(
        tmp.path(),
        &["eval-policy", "-c", cfg, "--policy", &policy, "--random-floor"],
    ));
    let dir = tmp.path().join(field(&eval, "run"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["episodes"], 3);
    assert_eq!(report["horizon"], 30);
    assert!(dir.join("floor.json").exists());

    let demos = ok(mftcn(tmp.path(), &["record-demos", "-c", cfg, "--policy", &policy]));
    let ds = MultiViewDataset::read(tmp.path().join(field(&demos, "dataset"))).unwrap();
    assert_eq!(ds.trajectories.len(), 3);
    ds.validate().unwrap();

    let no_ckpt = mftcn(
        tmp.path(),
        &["train-policy", "-c", cfg, "--set", "policy.mode=\"embedding\""],
    );
    assert_eq!(no_ckpt.status.code(), Some(2));
}
