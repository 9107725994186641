use std::path::Path;

use fedep::config::{parse_config, parse_config_with, to_toml};
use fedep::protocol::{ServerState, Strategy};
use fedep::simulator::{self, Checkpoint, Observer, RoundMetrics};

const SYNTHETIC: &str = r#"
[experiment]
strategy = "fedep"
rounds = 10
burn_in = 3
clients_per_round = 4
damping = 0.1
seed = 2
checkpoint_interval = 5

[inference]
epochs = 2
client_lr = 0.001
alpha_cov = 1.0

[data]
source = "synthetic"
n_clients = 8
examples_per_client = 30
input_dim = 4
num_classes = 3
test_examples = 100
"#;

#[test]
fn every_strategy_runs_on_synthetic_data() {
    for s in Strategy::ALL {
        for backend in ["scaled-identity", "mcmc", "laplace", "ngvi"] {
            let cfg = parse_config_with(
                SYNTHETIC,
                &[format!("strategy={}", s.as_str()), format!("backend={backend}")],
            )
            .unwrap();
            let out = simulator::run_config(&cfg, Path::new(".")).unwrap();
            assert_eq!(out.trace.len(), 10);
            let acc = out.report.point_accuracy.unwrap();
            assert!(acc > 1.0 / 3.0 - 0.1, "{} {backend}: accuracy {acc}", s.as_str());
            assert_eq!(out.report.marginal_accuracy.is_some(), s != Strategy::FedAvg);
        }
    }
}

#[test]
fn mlp_runs() {
    let text = format!("{SYNTHETIC}\n[model]\nkind = \"mlp\"\nhidden_dim = 6\n");
    let out = simulator::run_config(&parse_config(&text).unwrap(), Path::new(".")).unwrap();
    assert!(out.report.point_accuracy.is_some());
    assert!(out.trace.iter().all(|m| m.eval_loss.unwrap().is_finite()));
}

#[test]
fn gaussian_sources_report_distance() {
    let toy = parse_config("[experiment]\nstrategy = \"fedep\"\nrounds = 60\nclients_per_round = 2\n[inference]\nbackend = \"exact\"\n").unwrap();
    let out = simulator::run_config(&toy, Path::new(".")).unwrap();
    assert!(out.report.distance_to_truth.unwrap() < 1e-8);
    assert!(out.report.point_accuracy.is_none());

    let niw = parse_config(
        "[experiment]\nstrategy = \"fedpa\"\nrounds = 1\nclients_per_round = 5\n[inference]\nbackend = \"exact\"\n[data]\nsource = \"niw\"\nn_clients = 5\nseed = 3\n",
    )
    .unwrap();
    let out = simulator::run_config(&niw, Path::new(".")).unwrap();
    assert!(out.report.distance_to_truth.unwrap() > 0.0);
}

struct Capture(Vec<Checkpoint>);

impl Observer for Capture {
    fn on_round(&mut self, m: &RoundMetrics, server: &ServerState, clients: &[fedep::protocol::ClientRecord]) -> fedep::Result<()> {
        if m.round.is_multiple_of(5) {
            self.0.push(Checkpoint::capture(server, clients));
        }
        Ok(())
    }
}

#[test]
fn checkpoints_round_trip_through_json() {
    let cfg = parse_config(SYNTHETIC).unwrap();
    let mut exp = simulator::prepare(&cfg, Path::new(".")).unwrap();
    let mut cap = Capture(Vec::new());
    let out = simulator::run_experiment(&cfg, &mut exp, &mut cap).unwrap();
    assert_eq!(cap.0.len(), 2);
    let last = cap.0.last().unwrap();
    assert_eq!(last.server, out.server);
    let text = serde_json::to_string(last).unwrap();
    let back: Checkpoint = serde_json::from_str(&text).unwrap();
    assert_eq!(&back, last);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let cfg = parse_config(SYNTHETIC).unwrap();
    let again = parse_config(&to_toml(&cfg)).unwrap();
    assert_eq!(cfg, again);
    let a = simulator::run_config(&cfg, Path::new(".")).unwrap();
    let b = simulator::run_config(&again, Path::new(".")).unwrap();
    // Compared as serialized, which leaves out wall time.
    assert_eq!(serde_json::to_string(&a.trace).unwrap(), serde_json::to_string(&b.trace).unwrap());
    assert_eq!(a.report, b.report);
}

#[test]
fn repeat_seeds_are_distinct() {
    let seeds: Vec<u64> = (0..5).map(|i| simulator::repeat_seed(7, i)).collect();
    assert_eq!(seeds[0], 7);
    for i in 0..5 {
        for j in i + 1..5 {
            assert_ne!(seeds[i], seeds[j]);
        }
    }
}
