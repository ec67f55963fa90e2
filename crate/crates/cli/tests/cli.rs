use std::path::Path;
use std::process::{Command, Output};

fn tactile(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tactile")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path) -> String {
    let text = format!(
        r#"
name = "cli"
seed = 5
runs_dir = "{}"

[budgets]
s1_steps = 600
s2_steps = 300
s5_steps = 300

[policy]
workers = 2
warmup = 200
log_every = 300

[policy.sac]
hidden = [8]
batch_size = 32

[filter]
hidden = [8]
particles_train = 4
particles_infer = 8
seq_len = 10
stage1_max_epochs = 2
stage2_epochs = 1
inloop_per_iteration = 4

[dataset]
offline_sequences = 20
workers = 2

[bench]
goals = [3]
eta_spin = [0.001]
runs_per_cell = 1
particles = 8
"#,
        dir.display()
    );
    let path = dir.join("cli.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn pipeline_then_bench_then_filter_retraining() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = ok(&tactile(&["pipeline", "--config", &config]));
    assert_eq!(out.lines().filter(|l| l.starts_with('S')).count(), 5, "{out}");
    let run = dir.path().join("cli");
    assert!(run.join("summary.json").exists());
    assert!(run.join("S3/data/test.tfds").exists());

    let policy = run.join("S5/checkpoints/policy.json");
    let filter = run.join("S4/checkpoints/filter.json");
    let bench = dir.path().join("bench");
    ok(&tactile(&[
        "bench",
        "--policy",
        policy.to_str().unwrap(),
        "--filter",
        filter.to_str().unwrap(),
        "--seed",
        "4",
        "--runs-per-cell",
        "1",
        "--out",
        bench.to_str().unwrap(),
    ]));
    let csv = std::fs::read_to_string(bench.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 25);
    let episodes = std::fs::read_to_string(bench.join("episodes.jsonl")).unwrap();
    assert_eq!(episodes.lines().count(), 72);

    let data = run.join("S3/data");
    let stage1 = dir.path().join("f1.json");
    ok(&tactile(&[
        "train-filter",
        "--stage",
        "1",
        "--data",
        data.to_str().unwrap(),
        "--config",
        &config,
        "--out",
        stage1.to_str().unwrap(),
    ]));
    let stage2 = dir.path().join("f2.json");
    ok(&tactile(&[
        "train-filter",
        "--stage",
        "2",
        "--data",
        data.to_str().unwrap(),
        "--filter",
        stage1.to_str().unwrap(),
        "--config",
        &config,
        "--out",
        stage2.to_str().unwrap(),
    ]));
    assert!(stage2.exists());
}

#[test]
fn filter_stage_cannot_be_trained_as_a_policy() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = tactile(&["train-policy", "--config", &config, "--stage", "S3"]);
    assert!(!out.status.success());
    let out = tactile(&["pipeline", "--config", &config, "--from-stage", "S4"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing prerequisite"));
}
