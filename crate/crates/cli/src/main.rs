//! `fedep` command-line runner.
//!
//! Exit codes: 0 on success, 1 for bad arguments or configs, 2 when a run
//! fails after it has started.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use fedep::config::{self, DataSource, ExperimentConfig};
use fedep::models::{self, DatasetShard};
use fedep::protocol::{ClientRecord, ServerState};
use fedep::seed;
use fedep::simulator::{self, Checkpoint, EvalReport, JsonlTrace, Observer, RoundMetrics, Summary, ToyStudyConfig};

/// Directory under which all outputs are written. Defaults to `runs`.
const OUTPUT_ROOT_VAR: &str = "FEDEP_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "fedep", version, about = "Federated learning as expectation propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, as `section.key=value` or `key=value`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distances to the true global mean over random two-client Gaussian draws.
    ToyStudy {
        #[arg(long, default_value_t = 200)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; defaults to `toy-study.json` under the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a config's synthetic dataset as CSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Splits failures by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run { config, set, seed } => run(&config, &set, seed),
        Command::ToyStudy { draws, seed, out } => toy_study(draws, seed, out),
        Command::GenData { config } => gen_data(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .usage()?;
    config::parse_config_with(&text, overrides)
        .with_context(|| format!("in {}", path.display()))
        .usage()
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Per-run files written as rounds complete.
struct RunFiles {
    trace: JsonlTrace<BufWriter<File>>,
    timing: BufWriter<File>,
    checkpoints: Option<(PathBuf, u64)>,
    last_progress: Instant,
    rounds: u64,
}

impl RunFiles {
    fn create(dir: &Path, cfg: &ExperimentConfig) -> anyhow::Result<Self> {
        let checkpoints = if cfg.checkpoint_interval > 0 {
            let d = dir.join("checkpoints");
            fs::create_dir_all(&d)?;
            Some((d, cfg.checkpoint_interval))
        } else {
            None
        };
        Ok(Self {
            trace: JsonlTrace::new(BufWriter::new(File::create(dir.join("trace.jsonl"))?)),
            timing: BufWriter::new(File::create(dir.join("timing.jsonl"))?),
            checkpoints,
            last_progress: Instant::now(),
            rounds: cfg.rounds,
        })
    }
}

#[derive(Serialize)]
struct TimingLine {
    round: u64,
    wall_ms: f64,
}

impl Observer for RunFiles {
    fn on_round(&mut self, m: &RoundMetrics, server: &ServerState, clients: &[ClientRecord]) -> fedep::Result<()> {
        self.trace.on_round(m, server, clients)?;
        serde_json::to_writer(&mut self.timing, &TimingLine { round: m.round, wall_ms: m.wall_ms })?;
        self.timing.write_all(b"\n")?;
        self.timing.flush()?;
        if let Some((dir, every)) = &self.checkpoints {
            if m.round.is_multiple_of(*every) {
                let path = dir.join(format!("round-{:06}.json", m.round));
                let file = BufWriter::new(File::create(path)?);
                serde_json::to_writer(file, &Checkpoint::capture(server, clients))?;
            }
        }
        if self.last_progress.elapsed().as_secs() >= 5 || m.round == self.rounds {
            self.last_progress = Instant::now();
            let acc = m.eval_accuracy.map_or(String::new(), |a| format!(" accuracy {a:.4}"));
            let loss = m.eval_loss.map_or(String::new(), |l| format!(" loss {l:.4}"));
            eprintln!("round {}/{} [{}]{loss}{acc}", m.round, self.rounds, m.strategy.as_str());
        }
        Ok(())
    }
}

/// Mean and spread of each scalar metric over repeats.
#[derive(Serialize)]
struct RepeatSummary {
    schema_version: u32,
    repeats: usize,
    seeds: Vec<u64>,
    eval_loss: Option<Summary>,
    distance_to_truth: Option<Summary>,
    point_accuracy: Option<Summary>,
    marginal_accuracy: Option<Summary>,
    ece15_point: Option<Summary>,
    ece15_marginal: Option<Summary>,
}

fn summarize(reports: &[EvalReport], field: impl Fn(&EvalReport) -> Option<f64>) -> Option<Summary> {
    let values: Option<Vec<f64>> = reports.iter().map(field).collect();
    values.filter(|v| !v.is_empty()).map(|v| Summary::of(&v))
}

fn run(config_path: &Path, overrides: &[String], seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(config_path, overrides)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate().usage()?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let dir = output_root().join(cfg.output_dir.clone().unwrap_or_else(|| stem(config_path)));
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()?;
    fs::write(dir.join("config.resolved"), config::to_toml(&cfg)).runtime()?;

    let mut reports = Vec::with_capacity(cfg.repeats);
    for i in 0..cfg.repeats {
        let rcfg = cfg.with_seed(simulator::repeat_seed(cfg.seed, i));
        let rdir = if cfg.repeats == 1 {
            dir.clone()
        } else {
            let d = dir.join(format!("repeat-{i}"));
            fs::create_dir_all(&d).runtime()?;
            fs::write(d.join("config.resolved"), config::to_toml(&rcfg)).runtime()?;
            d
        };
        let mut exp = simulator::prepare(&rcfg, base).context("loading data").runtime()?;
        let mut files = RunFiles::create(&rdir, &rcfg).runtime()?;
        let out = simulator::run_experiment(&rcfg, &mut exp, &mut files)
            .with_context(|| format!("repeat {i} (seed {})", rcfg.seed))
            .runtime()?;
        write_json(&rdir.join("report.json"), &out.report).runtime()?;
        reports.push(out.report);
    }

    let summary = RepeatSummary {
        schema_version: simulator::SCHEMA_VERSION,
        repeats: reports.len(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        eval_loss: summarize(&reports, |r| r.eval_loss),
        distance_to_truth: summarize(&reports, |r| r.distance_to_truth),
        point_accuracy: summarize(&reports, |r| r.point_accuracy),
        marginal_accuracy: summarize(&reports, |r| r.marginal_accuracy),
        ece15_point: summarize(&reports, |r| r.ece15_point),
        ece15_marginal: summarize(&reports, |r| r.ece15_marginal),
    };
    write_json(&dir.join("summary.json"), &summary).runtime()?;
    if let Some(acc) = &summary.point_accuracy {
        println!("point accuracy {:.4} ± {:.4}", acc.mean, acc.sd);
    }
    if let Some(d) = &summary.distance_to_truth {
        println!("distance to truth {:.3e} ± {:.3e}", d.mean, d.sd);
    }
    println!("{}", dir.display());
    Ok(())
}

fn toy_study(draws: usize, seed: u64, out: Option<PathBuf>) -> Result<(), Failure> {
    if draws == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--draws must be positive")));
    }
    let cfg = ToyStudyConfig {
        draws,
        seed,
        ..Default::default()
    };
    let report = simulator::toy_study(&cfg).runtime()?;
    let path = out.unwrap_or_else(|| output_root().join("toy-study.json"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).runtime()?;
    }
    write_json(&path, &report).runtime()?;
    println!("{:<8} {:>12} {:>12} {:>12}", "method", "mean", "sd", "median");
    for (name, s) in [("FedEP", report.fedep), ("FedPA", report.fedpa), ("FedAvg", report.fedavg)] {
        println!("{name:<8} {:>12.3e} {:>12.3e} {:>12.3e}", s.mean, s.sd, s.median);
    }
    println!("FedEP closer than FedPA on {:.1}% of draws", 100.0 * report.fedep_beats_fedpa);
    println!("{}", path.display());
    Ok(())
}

fn gen_data(config_path: &Path) -> Result<(), Failure> {
    let cfg = load_config(config_path, &[])?;
    let fc = match &cfg.data {
        DataSource::Synthetic(fc) => fc.clone(),
        _ => {
            return Err(Failure::Usage(anyhow::anyhow!(
                "gen-data needs a synthetic [data] source"
            )))
        }
    };
    let dir = output_root().join(cfg.output_dir.clone().unwrap_or_else(|| format!("{}-data", stem(config_path))));
    fs::create_dir_all(&dir).runtime()?;
    let ds = fedep::datagen::gen_fed_classification(&fc, &mut seed::rng(fc.seed)).runtime()?;
    write_csv(&dir.join("train.csv"), &ds.train).runtime()?;
    let test = DatasetShard::new(0, ds.test).runtime()?;
    write_csv(&dir.join("test.csv"), &[test]).runtime()?;
    fs::write(
        dir.join("data.toml"),
        "[data]\nsource = \"csv\"\npath = \"train.csv\"\ntest_path = \"test.csv\"\n",
    )
    .runtime()?;
    println!("{}", dir.display());
    Ok(())
}

fn write_csv(path: &Path, shards: &[DatasetShard]) -> anyhow::Result<()> {
    if shards.is_empty() {
        bail!("no shards to write");
    }
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    models::write_csv(&mut out, shards)?;
    out.flush()?;
    Ok(())
}
