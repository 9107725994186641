use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fedep::datagen::{gen_fed_classification, FedClassConfig};
use fedep::models::load_csv;
use fedep::seed;

const SMALL: &str = r#"
[experiment]
strategy = "fedep"
rounds = 8
burn_in = 3
clients_per_round = 3
damping = 0.2
seed = 4

[inference]
epochs = 2
client_lr = 0.001
alpha_cov = 1.0

[data]
source = "synthetic"
n_clients = 6
examples_per_client = 20
input_dim = 4
num_classes = 3
test_examples = 40
seed = 9
"#;

fn fedep(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedep"))
        .args(args)
        .env("FEDEP_OUTPUT_ROOT", root)
        .current_dir(root)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let out = fedep(tmp.path(), &["run", "--config", &cfg, "--set", "checkpoint_interval=4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let dir = tmp.path().join("small");
    for f in ["config.resolved", "trace.jsonl", "timing.jsonl", "report.json", "summary.json"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    assert!(dir.join("checkpoints/round-000004.json").is_file());
    assert!(dir.join("checkpoints/round-000008.json").is_file());

    let trace = fs::read_to_string(dir.join("trace.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 8);
    assert_eq!(lines[0]["strategy"], "fedavg");
    assert_eq!(lines[3]["strategy"], "fedep");
    assert!(lines.iter().all(|l| l["schema_version"] == 1 && l.get("wall_ms").is_none()));

    let resolved = fs::read_to_string(dir.join("config.resolved")).unwrap();
    let reparsed = fedep::config::parse_config(&resolved).unwrap();
    assert_eq!(reparsed.checkpoint_interval, 4);
}

#[test]
fn reruns_give_identical_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let mut traces = Vec::new();
    for name in ["a", "b"] {
        let set = format!("output_dir={name}");
        let out = fedep(tmp.path(), &["run", "--config", &cfg, "--set", &set]);
        assert!(out.status.success());
        traces.push(fs::read(tmp.path().join(name).join("trace.jsonl")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);

    let out = fedep(tmp.path(), &["run", "--config", &cfg, "--set", "output_dir=c", "--seed", "5"]);
    assert!(out.status.success());
    assert_ne!(traces[0], fs::read(tmp.path().join("c/trace.jsonl")).unwrap());
}

#[test]
fn repeats_are_summarized() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let out = fedep(tmp.path(), &["run", "--config", &cfg, "--set", "repeats=3"]);
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("small/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["repeats"], 3);
    assert_eq!(summary["seeds"][0], 4);
    let accs: Vec<f64> = (0..3)
        .map(|i| {
            let p = tmp.path().join(format!("small/repeat-{i}/report.json"));
            let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
            r["point_accuracy"].as_f64().unwrap()
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / 3.0;
    assert!((summary["point_accuracy"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
}

#[test]
fn toy_study_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fedep(tmp.path(), &["toy-study", "--draws", "10", "--out", "toy/report.json"]);
    assert!(out.status.success());
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("toy/report.json")).unwrap()).unwrap();
    assert_eq!(r["draws"].as_array().unwrap().len(), 10);
    assert!(r["fedep"]["mean"].as_f64().unwrap() < 1e-8);
}

#[test]
fn gen_data_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let out = fedep(tmp.path(), &["gen-data", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("small-data");

    let fc = FedClassConfig {
        n_clients: 6,
        examples_per_client: 20,
        input_dim: 4,
        num_classes: 3,
        test_examples: 40,
        seed: 9,
        ..Default::default()
    };
    let expected = gen_fed_classification(&fc, &mut seed::rng(9)).unwrap();
    let (train, n) = load_csv(&dir.join("train.csv")).unwrap();
    assert_eq!(n, 4);
    assert_eq!(train, expected.train);
    let (test, _) = load_csv(&dir.join("test.csv")).unwrap();
    assert_eq!(test[0].examples, expected.test);

    // The written CSVs run as a data source.
    let data = fs::read_to_string(dir.join("data.toml")).unwrap();
    let csv_cfg = SMALL.split("[data]").next().unwrap().to_string() + &data;
    let cfg = write_config(&dir, "csv.toml", &csv_cfg);
    let out = fedep(tmp.path(), &["run", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    assert_eq!(fedep(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(fedep(tmp.path(), &["run"]).status.code(), Some(1));
    assert_eq!(fedep(tmp.path(), &["run", "--config", "missing.toml"]).status.code(), Some(1));
    assert_eq!(fedep(tmp.path(), &["run", "--config", &cfg, "--set", "nonsense=1"]).status.code(), Some(1));
    assert_eq!(fedep(tmp.path(), &["run", "--config", &cfg, "--set", "damping=2"]).status.code(), Some(1));
    assert_eq!(fedep(tmp.path(), &["--help"]).status.code(), Some(0));

    // Valid config whose data cannot be loaded fails at run time.
    let csv = write_config(
        tmp.path(),
        "csv.toml",
        "[experiment]\nstrategy = \"fedavg\"\n[data]\nsource = \"csv\"\npath = \"absent.csv\"\ntest_path = \"absent.csv\"\n",
    );
    let out = fedep(tmp.path(), &["run", "--config", &csv]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
}
