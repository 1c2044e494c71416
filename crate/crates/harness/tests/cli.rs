use std::path::Path;
use std::process::{Command, Output};

fn groupclip(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groupclip"))
        .args(args)
        .current_dir(dir)
        .env_remove("GROUPCLIP_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).filter(|r| r.starts_with(' ')))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .trim()
        .parse()
        .unwrap()
}

const SMALL: &str = r#"
version = 1
seed = 3
[task]
kind = "drift"
train_size = 600
test_size = 200
dim = 8
classes = 3
[model]
hidden = [8, 8]
activation = "tanh"
[policy]
mode = "adaptive-perlayer"
equivalent_global = true
[privacy]
epsilon = 4.0
[optimizer]
lr = 0.5
batch_size = 64
epochs = 3
"#;

#[test]
fn calibrate_prints_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let o = groupclip(
        &[
            "calibrate",
            "--epsilon",
            "3",
            "--batch-size",
            "4096",
            "--dataset-size",
            "50000",
            "--epochs",
            "300",
            "--groups",
            "8",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let text = stdout(&o);
    let (sigma, sigma_new, sigma_b) = (
        field(&text, "sigma"),
        field(&text, "sigma_new"),
        field(&text, "sigma_b"),
    );
    assert_eq!(field(&text, "r"), 0.01);
    assert_eq!(field(&text, "steps"), 3600.0);
    assert!((sigma_b - (8.0 * sigma * sigma / 0.04).sqrt()).abs() < 1e-4);
    assert!((sigma_new - sigma / 0.99f64.sqrt()).abs() < 1e-4);
}

#[test]
fn train_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    for out in ["a", "b"] {
        let o = groupclip(&["train", "--config", "run.toml", "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["metrics.csv", "norms.csv", "checkpoint.bin", "config.toml"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    let o = groupclip(
        &[
            "train",
            "--config",
            "run.toml",
            "--out",
            "o",
            "--seed",
            "9",
            "--mode",
            "fixed-perlayer",
            "--epsilon",
            "2",
            "--delta",
            "1e-6",
            "--target-quantile",
            "0.7",
            "--quantile-lr",
            "0.2",
            "--budget-fraction",
            "0.05",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mode fixed-perlayer seed 9"));
    let written = std::fs::read_to_string(dir.path().join("o/config.toml")).unwrap();
    let cfg = groupclip_harness::RunConfig::from_toml(&written, "o/config.toml".as_ref()).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.privacy.epsilon, Some(2.0));
    assert_eq!(cfg.privacy.delta, 1e-6);
    assert_eq!(cfg.policy.target_quantile, 0.7);
    assert_eq!(cfg.policy.quantile_lr, 0.2);
    assert_eq!(cfg.privacy.budget_fraction, Some(0.05));
}

#[test]
fn bad_input_exits_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("v2.toml"),
        SMALL.replace("version = 1", "version = 2"),
    )
    .unwrap();
    std::fs::write(
        dir.path().join("both.toml"),
        SMALL.replace("epsilon = 4.0", "epsilon = 4.0\nsigma = 1.0"),
    )
    .unwrap();
    std::fs::write(
        dir.path().join("typo.toml"),
        SMALL.replace("lr = 0.5", "lr = 0.5\nlearning_rate = 1"),
    )
    .unwrap();
    for (file, needle) in [
        ("v2.toml", "version"),
        ("both.toml", "sigma"),
        ("typo.toml", "learning_rate"),
        ("missing.toml", "missing.toml"),
    ] {
        let o = groupclip(&["train", "--config", file], dir.path());
        assert_eq!(o.status.code(), Some(1), "{file}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(needle), "{file}: {err}");
    }
    let o = groupclip(
        &["train", "--config", "v2.toml", "--mode", "sideways"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = groupclip(&["calibrate", "--epsilon", "1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--rate"));
}

#[test]
fn compare_honours_the_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    let args = [
        "compare", "--config", "run.toml", "--seeds", "2", "--out", "c",
    ];
    let o = Command::new(env!("CARGO_BIN_EXE_groupclip"))
        .args(args)
        .current_dir(dir.path())
        .env("GROUPCLIP_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for mode in ["adaptive-perlayer", "fixed-perlayer", "flat"] {
        assert!(stdout(&o).contains(mode));
    }
    let csv = std::fs::read_to_string(dir.path().join("c/compare.csv")).unwrap();
    let seeds: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(seeds, ["3", "3", "3", "4", "4", "4"]);

    let bad = Command::new(env!("CARGO_BIN_EXE_groupclip"))
        .args(args)
        .current_dir(dir.path())
        .env("GROUPCLIP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn pipeline_sim_writes_traces() {
    let dir = tempfile::tempdir().unwrap();
    let o = groupclip(&["pipeline-sim", "--out", "p"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("flat-rematerialize"));
    let trace = std::fs::read_to_string(dir.path().join("p/commlog.csv")).unwrap();
    assert!(trace.starts_with("event_index,virtual_time,device,microbatch,stage,message_type\n"));
}

#[test]
fn bench_lists_all_four_modes() {
    let dir = tempfile::tempdir().unwrap();
    let o = groupclip(
        &[
            "bench",
            "--widths",
            "16,16,4",
            "--batch-size",
            "8",
            "--warmup",
            "1",
            "--steps",
            "3",
            "--out",
            "b",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for mode in [
        "nonprivate",
        "naive-flat",
        "two-phase-flat",
        "fused-perlayer",
    ] {
        assert!(text.contains(mode), "{text}");
    }
    assert!(dir.path().join("b/bench.csv").is_file());
}
