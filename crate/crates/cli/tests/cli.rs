use std::path::Path;
use std::process::{Command, Output};

fn madist(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_madist"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_env(dir: &Path) {
    std::fs::write(
        dir.join("env.toml"),
        "env = \"open_grid\"\nwidth = 4\nheight = 4\nmax_steps = 12\n",
    )
    .unwrap();
}

#[test]
fn collect_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_env(dir.path());
    let args = |out: &'static str| {
        [
            "collect", "--env", "env.toml", "--n-traj", "20", "--seed", "5", "--out", out,
        ]
    };
    ok(madist(dir.path(), &args("a.jsonl")));
    ok(madist(dir.path(), &args("b.jsonl")));
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert!(dir.path().join("a.jsonl.manifest.json").is_file());
}

#[test]
fn sequential_flag_gives_the_same_embedding() {
    let dir = tempfile::tempdir().unwrap();
    write_env(dir.path());
    ok(madist(
        dir.path(),
        &[
            "collect", "--env", "env.toml", "--n-traj", "10", "--seed", "1", "--out", "d.jsonl",
        ],
    ));
    let train = |extra: &[&str], out: &str| {
        let mut args = vec![
            "train-embed",
            "--dataset",
            "d.jsonl",
            "--dim",
            "4",
            "--hidden",
            "8",
            "--steps",
            "20",
            "--batch",
            "16",
            "--seed",
            "2",
            "--out",
            out,
        ];
        args.extend_from_slice(extra);
        ok(madist(dir.path(), &args));
    };
    train(&[], "par.ckpt");
    train(&["--sequential"], "seq.ckpt");
    assert_eq!(
        std::fs::read(dir.path().join("par.ckpt")).unwrap(),
        std::fs::read(dir.path().join("seq.ckpt")).unwrap()
    );
}

#[test]
fn missing_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_env(dir.path());
    let out = madist(
        dir.path(),
        &["collect", "--env", "env.toml", "--out", "d.jsonl"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
    assert!(!dir.path().join("d.jsonl").exists());
}

#[test]
fn shaped_training_needs_an_embedding() {
    let dir = tempfile::tempdir().unwrap();
    write_env(dir.path());
    let out = madist(
        dir.path(),
        &[
            "shape-train",
            "--env",
            "env.toml",
            "--goal",
            "3,3",
            "--shaped",
            "--seed",
            "0",
            "--curve",
            "c.txt",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--embed"));
}

#[test]
fn corrupt_checkpoint_error_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_env(dir.path());
    ok(madist(
        dir.path(),
        &[
            "collect", "--env", "env.toml", "--n-traj", "10", "--seed", "1", "--out", "d.jsonl",
        ],
    ));
    std::fs::write(dir.path().join("broken.ckpt"), "not a checkpoint").unwrap();
    let out = madist(
        dir.path(),
        &[
            "train-dyn",
            "--dataset",
            "d.jsonl",
            "--embed",
            "broken.ckpt",
            "--steps",
            "5",
            "--seed",
            "0",
            "--out",
            "dy.ckpt",
        ],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("broken.ckpt"), "{err}");
    assert!(!dir.path().join("dy.ckpt").exists());
}

#[test]
fn missing_output_directory_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_env(dir.path());
    let out = madist(
        dir.path(),
        &[
            "collect",
            "--env",
            "env.toml",
            "--seed",
            "1",
            "--out",
            "nowhere/d.jsonl",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

const PIPELINE: &str = r#"
out_dir = "run"
seed = 3

[env]
env = "open_grid"
width = 4
height = 4
max_steps = 12

[collect]
n_traj = 10

[embed]
embed_dim = 4
hidden = [8]
train_steps = 20
batch_size = 16
max_gap = 3

[dynamics]
hidden = 8
train_steps = 20
batch_size = 16

[plan]
goals = 5

[gcsl]
goals = 5
train = { hidden = [8], train_steps = 10, batch_size = 16 }

[shaping]
goal = [3, 3]
episodes = 10
"#;

#[test]
fn pipeline_rerun_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pipeline.toml"), PIPELINE).unwrap();
    let first = ok(madist(
        dir.path(),
        &["pipeline", "--config", "pipeline.toml"],
    ));
    assert!(first.contains("wrote"));
    assert!(!first.contains("up to date"));
    assert!(dir.path().join("run/eval_report.txt").is_file());

    let second = ok(madist(
        dir.path(),
        &["pipeline", "--config", "pipeline.toml"],
    ));
    assert!(!second.contains(": wrote"), "{second}");
    assert!(second.contains("up to date"));

    let forced = ok(madist(
        dir.path(),
        &["pipeline", "--config", "pipeline.toml", "--force"],
    ));
    assert!(!forced.contains("up to date"), "{forced}");
    let digest = |s: &str| {
        s.lines()
            .filter(|l| l.contains("sha256"))
            .map(|l| l.rsplit("sha256").next().unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(digest(&first), digest(&forced));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["grid10.toml", "keydoor.toml"] {
        let cfg = madist::pipeline::PipelineConfig::load(&root.join(name)).unwrap();
        assert!(!cfg.stages().is_empty(), "{name}");
    }
}
