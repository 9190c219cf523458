use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "num_clients=4",
    "--set", "rounds=3",
    "--set", "local_epochs=1",
    "--set", "server_epochs=3",
    "--set", "feature_dim=8",
    "--set", "prefix_len=2",
    "--set", "synthetic.samples_per_class=30",
    "--set", "global_test_per_class=4",
];

fn fedtsp(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedtsp"))
        .args(SMALL)
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(fedtsp(&["--seed", "4"], a.path()).status.success());
    assert!(fedtsp(&["--seed", "4"], b.path()).status.success());
    assert_eq!(read(a.path(), "metrics.csv"), read(b.path(), "metrics.csv"));
    assert_eq!(read(a.path(), "summary.json"), read(b.path(), "summary.json"));
    assert_eq!(read(a.path(), "prompts.json"), read(b.path(), "prompts.json"));
}

#[test]
fn thread_count_does_not_change_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(fedtsp(&["--threads", "1"], a.path()).status.success());
    assert!(fedtsp(&["--threads", "3"], b.path()).status.success());
    assert_eq!(read(a.path(), "metrics.csv"), read(b.path(), "metrics.csv"));
}

#[test]
fn writes_every_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedtsp(&[], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "metrics.csv", "summary.json", "similarity_fedtsp.json", "config_echo.json", "prompts.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = read(dir.path(), "metrics.csv");
    assert_eq!(csv.lines().count(), 5);
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path(), "manifest.json")).unwrap();
    assert!(manifest["start_timestamp"].is_string());
    assert!(manifest["git_describe"].is_string());
}

#[test]
fn invalid_method_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedtsp(&["--method", "fedsgd"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fedtsp"));
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedtsp(&["--set", "lamda=3"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
}

#[test]
fn out_of_range_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedtsp(&["--set", "participation_rate=0"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedtsp(&["--set", "dataset_path=/nonexistent/data.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_echo_reproduces_the_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(fedtsp(&["--method", "fedtgp", "--seed", "2"], a.path()).status.success());
    let echo = a.path().join("config_echo.json");
    let out = Command::new(env!("CARGO_BIN_EXE_fedtsp"))
        .arg("--config")
        .arg(&echo)
        .arg("--out")
        .arg(b.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(a.path(), "metrics.csv"), read(b.path(), "metrics.csv"));
}

#[test]
fn shipped_examples_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples");
    for name in ["fedtsp_small.json", "cross_silo.json", "cross_device.json"] {
        let cfg = fedtsp_cli::parse_config(Some(&dir.join(name)), &[]).unwrap();
        cfg.validate().unwrap();
    }
}
