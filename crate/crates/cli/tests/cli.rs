use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1

[data]
source = "synth"
dims = [1, 8, 8]
classes = 3
seed = 5
train_count = 120
test_count = 60

[network]
channels = [4, 6, 6]
pool_after = [1]

[train]
epochs = 2
batch_size = 16

[finetune]
epochs = 1

[prune]
probe_images = 16
num_locations = 3

[experiment]
seeds = [0, 1]
variants = ["cpli", "magnitude"]
locations = [3]
"#;

fn cpli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpli"))
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .args(args)
        .output()
        .expect("spawn cpli")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn train_prune_finetune_eval() {
    let dir = setup();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let trained = stdout(&cpli(dir.path(), &["--out", out_s, "train"]));
    assert!(trained.starts_with("accuracy\t"));
    let ckpt = out.join("model.ckpt");
    assert!(ckpt.exists());

    let report = stdout(&cpli(
        dir.path(),
        &["--out", out_s, "--cr", "1.5", "prune", "--checkpoint", ckpt.to_str().unwrap()],
    ));
    assert!(report.contains("compression_ratio\t"));
    for f in ["pruned.ckpt", "report.tsv", "report.json", "trace.tsv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let pruned = out.join("pruned.ckpt");
    let tuned = stdout(&cpli(dir.path(), &["--out", out_s, "finetune", "--checkpoint", pruned.to_str().unwrap()]));
    assert!(tuned.contains("accuracy_after\t"));

    let eval = stdout(&cpli(dir.path(), &["eval", "--checkpoint", ckpt.to_str().unwrap()]));
    let acc: f64 = eval.trim().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=100.0).contains(&acc));

    let shown = stdout(&cpli(dir.path(), &["report", "--input", out.join("report.json").to_str().unwrap()]));
    assert_eq!(shown, fs::read_to_string(out.join("report.tsv")).unwrap());
}

#[test]
fn bad_inputs_fail_with_a_diagnostic() {
    let dir = setup();
    let missing = cpli(dir.path(), &["eval", "--checkpoint", "does-not-exist.ckpt"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("cpli: error:"));

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let bad = cpli(dir.path(), &["eval", "--checkpoint", garbage.to_str().unwrap()]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("parse error"));

    let variant = cpli(dir.path(), &["--variant", "nope", "config"]);
    assert!(!variant.status.success());

    fs::write(dir.path().join("tiny.toml"), "[train]\nbatch_size = 0\n").unwrap();
    let config = cpli(dir.path(), &["config"]);
    assert!(!config.status.success());
    assert!(String::from_utf8_lossy(&config.stderr).contains("batch_size"));
}

#[test]
fn config_prints_the_effective_settings() {
    let dir = setup();
    let text = stdout(&cpli(dir.path(), &["--seed", "7", "--variant", "cp_baseline", "config"]));
    assert!(text.contains("seed = 7"));
    assert!(text.contains("variant = \"cp_baseline\""));
}

#[test]
fn experiment_reports_are_reproducible() {
    let dir = setup();
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        stdout(&cpli(dir.path(), &["--out", out.to_str().unwrap(), "experiment"]));
        assert!(out.join("timings.tsv").exists());
        files.push((
            fs::read(out.join("experiment.tsv")).unwrap(),
            fs::read(out.join("experiment.json")).unwrap(),
        ));
    }
    assert_eq!(files[0], files[1]);
}
