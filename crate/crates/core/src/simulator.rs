//! Multi-round experiments, the Gaussian toy study, and evaluation metrics.
//!
//! Randomness is keyed off the master seed with [`seed::derive`]:
//!
//! | stream     | index   | used for                          |
//! |------------|---------|-----------------------------------|
//! | `SAMPLING` | round   | which clients take part           |
//! | `ROUND`    | round   | parent of the per-client streams  |
//! | `EVAL`     | round   | posterior draws at evaluation     |
//! | `INIT`     | 0       | initial parameters                |
//! | `TOY_DRAW` | draw    | one toy-study draw                |

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, ModelKind};
use crate::datagen::{self, NiwParams};
use crate::error::{check_dim, Error, Result};
use crate::gaussian::MeanFieldGaussian;
use crate::inference::{Backend, InferenceConfig};
use crate::models::{self, DatasetShard, Example, GaussianClient, ModelSpec};
use crate::optim::OptimizerConfig;
use crate::protocol::{self, ClientRecord, ClientState, ServerState, Strategy, FEDAVG_REFERENCE_PRECISION};
use crate::seed::{self, stream};

pub const SCHEMA_VERSION: u32 = 1;
pub const ECE_BINS: usize = 15;

/// Expected calibration error over `n_bins` equal-width confidence bins.
/// Bins are right-open except the last.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("ece of an empty set".into()));
    }
    check_dim(probs.len(), labels.len())?;
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be positive".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    for (p, &y) in probs.iter().zip(labels) {
        let (top, conf) = argmax(p);
        let bin = ((conf * n_bins as f64) as usize).min(n_bins - 1);
        count[bin] += 1;
        conf_sum[bin] += conf;
        if top == y {
            correct[bin] += 1;
        }
    }
    let n = probs.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (correct[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum())
}

fn argmax(p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in p.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Average of the predictive distributions at `n_samples` draws from `q`.
pub fn marginalized_predict<R: Rng + ?Sized>(
    q: &MeanFieldGaussian,
    spec: &ModelSpec,
    x: &[f64],
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(marginalized_predict_batch(q, spec, std::slice::from_ref(&x.to_vec()), n_samples, rng)?.remove(0))
}

/// [`marginalized_predict`] for many inputs sharing the same draws.
pub fn marginalized_predict_batch<R: Rng + ?Sized>(
    q: &MeanFieldGaussian,
    spec: &ModelSpec,
    xs: &[Vec<f64>],
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if !q.is_proper() {
        return Err(Error::NotProper);
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be positive".into()));
    }
    let thetas = (0..n_samples).map(|_| q.sample(rng)).collect::<Result<Vec<_>>>()?;
    xs.par_iter()
        .map(|x| {
            let mut acc = vec![0.0; spec.num_classes().unwrap_or(0)];
            for t in &thetas {
                let p = models::predict_proba(spec, t, x)?;
                acc.resize(p.len(), 0.0);
                for (a, v) in acc.iter_mut().zip(&p) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= n_samples as f64);
            Ok(acc)
        })
        .collect()
}

/// Trailing mean over `min(window, t)` points.
pub fn running_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (t, &v) in series.iter().enumerate() {
        sum += v;
        if t >= window {
            sum -= series[t - window];
        }
        out.push(sum / (t + 1).min(window) as f64);
    }
    out
}

/// First 1-based index whose trailing-`window` average reaches `threshold`.
pub fn rounds_to_threshold(series: &[f64], threshold: f64, window: usize) -> Option<usize> {
    running_average(series, window)
        .iter()
        .position(|&v| v >= threshold)
        .map(|i| i + 1)
}

/// Best trailing-`window` average among the first `horizon` entries.
pub fn best_within(series: &[f64], horizon: usize, window: usize) -> Option<f64> {
    let h = horizon.min(series.len());
    running_average(&series[..h], window)
        .into_iter()
        .fold(None, |best: Option<f64>, v| Some(best.map_or(v, |b| b.max(v))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultilabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

fn f1(tp: f64, fp: f64, fn_: f64) -> f64 {
    let d = 2.0 * tp + fp + fn_;
    if d == 0.0 {
        0.0
    } else {
        2.0 * tp / d
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Threshold metrics for multi-label scores; a tag is predicted when its
/// score is at least `threshold`. Precision and recall are micro-averaged.
pub fn multilabel_eval(scores: &[Vec<f64>], labels: &[Vec<bool>], threshold: f64) -> Result<MultilabelMetrics> {
    check_dim(scores.len(), labels.len())?;
    let tags = scores.first().map_or(0, Vec::len);
    let mut tp = vec![0.0; tags];
    let mut fp = vec![0.0; tags];
    let mut fn_ = vec![0.0; tags];
    for (s, l) in scores.iter().zip(labels) {
        check_dim(tags, s.len())?;
        check_dim(tags, l.len())?;
        for j in 0..tags {
            match (s[j] >= threshold, l[j]) {
                (true, true) => tp[j] += 1.0,
                (true, false) => fp[j] += 1.0,
                (false, true) => fn_[j] += 1.0,
                (false, false) => {}
            }
        }
    }
    let (t, p, n) = (tp.iter().sum::<f64>(), fp.iter().sum::<f64>(), fn_.iter().sum::<f64>());
    let macro_f1 = if tags == 0 {
        0.0
    } else {
        (0..tags).map(|j| f1(tp[j], fp[j], fn_[j])).sum::<f64>() / tags as f64
    };
    Ok(MultilabelMetrics {
        precision: ratio(t, t + p),
        recall: ratio(t, t + n),
        micro_f1: f1(t, p, n),
        macro_f1,
    })
}

/// One line of the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub schema_version: u32,
    pub round: u64,
    /// Strategy that ran this round; FedAvg during burn-in.
    pub strategy: Strategy,
    /// Mean test NLL at the mode, or the distance to the true global mean
    /// for Gaussian clients. Absent on rounds without evaluation.
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub floored: usize,
    pub mean_abs_d_eta: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub seed: u64,
    pub rounds: u64,
    pub eval_loss: Option<f64>,
    pub distance_to_truth: Option<f64>,
    pub point_accuracy: Option<f64>,
    pub marginal_accuracy: Option<f64>,
    pub ece15_point: Option<f64>,
    pub ece15_marginal: Option<f64>,
    pub multilabel: Option<MultilabelMetrics>,
    /// Keyed by threshold; the round at which the 10-round running average
    /// of accuracy first reached it.
    pub rounds_to_threshold: BTreeMap<String, Option<u64>>,
    /// Keyed by horizon; best 100-round running average within it.
    pub best_within: BTreeMap<String, Option<f64>>,
    pub floored_total: u64,
}

/// Versioned snapshot of all mutable protocol state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub round: u64,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl Checkpoint {
    pub fn capture(server: &ServerState, clients: &[ClientRecord]) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            round: server.round,
            server: server.clone(),
            clients: clients.iter().map(|c| c.state.clone()).collect(),
        }
    }
}

/// Loaded data and models for one experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub spec: ModelSpec,
    pub clients: Vec<ClientRecord>,
    pub test: Vec<Example>,
    /// True global mean, for Gaussian clients.
    pub truth: Option<Vec<f64>>,
}

fn gaussian_experiment(clients: Vec<GaussianClient>, optim: OptimizerConfig) -> Result<Experiment> {
    let truth = datagen::true_global_mean(&clients)?;
    let spec = ModelSpec::GaussianClient(clients[0].clone());
    let clients = clients
        .into_iter()
        .enumerate()
        .map(|(k, c)| ClientRecord::new(ModelSpec::GaussianClient(c), DatasetShard::empty(k), optim))
        .collect::<Result<_>>()?;
    Ok(Experiment {
        spec,
        clients,
        test: Vec::new(),
        truth: Some(truth),
    })
}

fn classifier_spec(model: ModelKind, input_dim: usize, num_classes: usize) -> ModelSpec {
    match model {
        ModelKind::Logistic => ModelSpec::Logistic { input_dim, num_classes },
        ModelKind::Mlp { hidden_dim } => ModelSpec::Mlp {
            input_dim,
            hidden_dim,
            num_classes,
        },
    }
}

/// Builds clients and the test set; relative CSV paths resolve against `base`.
pub fn prepare(cfg: &ExperimentConfig, base: &Path) -> Result<Experiment> {
    let optim = cfg.client_optimizer;
    match &cfg.data {
        DataSource::Toy => gaussian_experiment(datagen::fixed_toy_fixture().to_vec(), optim),
        DataSource::Niw { n_clients, seed: s } => {
            let mut rng = seed::rng(*s);
            let niw = NiwParams::with_psi(datagen::random_psi(2, &mut rng))?;
            let toy = datagen::sample_toy_clients(&niw, *n_clients, &mut rng)?;
            gaussian_experiment(toy.clients, optim)
        }
        DataSource::Synthetic(fc) => {
            let ds = datagen::gen_fed_classification(fc, &mut seed::rng(fc.seed))?;
            let spec = classifier_spec(cfg.model, fc.input_dim, fc.num_classes);
            let clients = ds
                .train
                .into_iter()
                .map(|s| ClientRecord::new(spec.clone(), s, optim))
                .collect::<Result<_>>()?;
            Ok(Experiment {
                spec,
                clients,
                test: ds.test,
                truth: None,
            })
        }
        DataSource::Csv { path, test_path } => {
            let (train, n) = models::load_csv(&base.join(path))?;
            let (test, n_test) = models::load_csv(&base.join(test_path))?;
            if n != n_test {
                return Err(Error::Dataset(format!("train has {n} features, test has {n_test}")));
            }
            let max_label = train
                .iter()
                .chain(&test)
                .flat_map(|s| &s.examples)
                .map(|e| e.y)
                .max()
                .unwrap_or(0);
            let spec = classifier_spec(cfg.model, n, (max_label + 1).max(2));
            models::validate_shards(&spec, &train)?;
            let clients = train
                .into_iter()
                .map(|s| ClientRecord::new(spec.clone(), s, optim))
                .collect::<Result<_>>()?;
            Ok(Experiment {
                spec,
                clients,
                test: test.into_iter().flat_map(|s| s.examples).collect(),
                truth: None,
            })
        }
    }
}

/// Receives each round as it completes.
pub trait Observer {
    fn on_round(&mut self, metrics: &RoundMetrics, server: &ServerState, clients: &[ClientRecord]) -> Result<()>;
}

impl Observer for () {
    fn on_round(&mut self, _: &RoundMetrics, _: &ServerState, _: &[ClientRecord]) -> Result<()> {
        Ok(())
    }
}

/// Writes each round as one JSON line, flushing as it goes so a partial run
/// leaves a readable trace.
pub struct JsonlTrace<W: Write> {
    out: W,
}

impl<W: Write> JsonlTrace<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> Observer for JsonlTrace<W> {
    fn on_round(&mut self, metrics: &RoundMetrics, _: &ServerState, _: &[ClientRecord]) -> Result<()> {
        serde_json::to_writer(&mut self.out, metrics)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<RoundMetrics>,
    pub report: EvalReport,
    pub server: ServerState,
}

struct Evaluation {
    loss: f64,
    accuracy: Option<f64>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn evaluate(exp: &Experiment, server: &ServerState) -> Result<Evaluation> {
    let theta = server.warm_start();
    if let Some(truth) = &exp.truth {
        return Ok(Evaluation {
            loss: distance(&theta, truth),
            accuracy: None,
        });
    }
    if exp.test.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    let (nll, hits) = exp
        .test
        .par_iter()
        .map(|e| {
            let p = models::predict_proba(&exp.spec, &theta, &e.x)?;
            Ok((-p[e.y].max(f64::MIN_POSITIVE).ln(), (argmax(&p).0 == e.y) as usize))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold((0.0, 0), |(a, b), (c, d)| (a + c, b + d));
    let n = exp.test.len() as f64;
    Ok(Evaluation {
        loss: nll / n,
        accuracy: Some(hits as f64 / n),
    })
}

fn initial_theta(cfg: &ExperimentConfig, spec: &ModelSpec) -> Vec<f64> {
    let d = spec.param_dim();
    match spec {
        // Hidden units need distinct starting weights.
        ModelSpec::Mlp { .. } => {
            let mut rng = seed::rng(seed::derive(cfg.seed, stream::INIT, 0));
            (0..d).map(|_| 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
        }
        _ => vec![0.0; d],
    }
}

/// Runs `cfg.rounds` rounds, the first `cfg.burn_in` of them FedAvg, then
/// the configured strategy. Evaluates every `eval_interval` rounds and after
/// the last one.
pub fn run_experiment(cfg: &ExperimentConfig, exp: &mut Experiment, observer: &mut dyn Observer) -> Result<RunOutput> {
    cfg.validate()?;
    let d = exp.spec.param_dim();
    let prior = if cfg.prior_precision > 0.0 {
        MeanFieldGaussian::isotropic(&vec![0.0; d], cfg.prior_precision)?
    } else {
        MeanFieldGaussian::improper_uniform(d)?
    };
    let burn = if cfg.strategy == Strategy::FedAvg { cfg.rounds } else { cfg.burn_in };
    let first = if burn > 0 { Strategy::FedAvg } else { cfg.strategy };
    let mut server = ServerState::new(
        first,
        prior,
        if first == Strategy::FedAvg { cfg.fedavg_damping } else { cfg.damping },
        exp.clients.len(),
        cfg.server_optimizer,
        cfg.client_optimizer,
    )?;
    server.origin = initial_theta(cfg, &exp.spec);
    if first == Strategy::FedAvg {
        server.q_global = MeanFieldGaussian::isotropic(&server.origin, FEDAVG_REFERENCE_PRECISION)?;
    }

    let mut trace = Vec::with_capacity(cfg.rounds as usize);
    for round in 1..=cfg.rounds {
        if round == burn + 1 && first == Strategy::FedAvg {
            server.handoff(cfg.strategy, &mut exp.clients, cfg.inference.alpha_cov)?;
            server.damping = cfg.damping;
        }
        let mut sampler = seed::rng(seed::derive(cfg.seed, stream::SAMPLING, round));
        let sampled = protocol::sample_clients(exp.clients.len(), cfg.clients_per_round, &mut sampler);
        let round_seed = seed::derive(cfg.seed, stream::ROUND, round);
        let strategy = server.strategy;
        let (summary, _) = protocol::run_round(&mut server, &mut exp.clients, &sampled, &cfg.inference, round_seed)?;

        let eval = if round % cfg.eval_interval == 0 || round == cfg.rounds {
            Some(evaluate(exp, &server)?)
        } else {
            None
        };
        let metrics = RoundMetrics {
            schema_version: SCHEMA_VERSION,
            round,
            strategy,
            eval_loss: eval.as_ref().map(|e| e.loss),
            eval_accuracy: eval.as_ref().and_then(|e| e.accuracy),
            floored: summary.floored,
            mean_abs_d_eta: summary.mean_abs_d_eta,
            bytes_up: summary.bytes_up,
            bytes_down: summary.bytes_down,
            wall_ms: summary.wall_ms,
        };
        observer.on_round(&metrics, &server, &exp.clients)?;
        trace.push(metrics);
    }
    let report = final_report(cfg, exp, &server, &trace)?;
    Ok(RunOutput { trace, report, server })
}

fn final_report(cfg: &ExperimentConfig, exp: &Experiment, server: &ServerState, trace: &[RoundMetrics]) -> Result<EvalReport> {
    let eval = evaluate(exp, server)?;
    let mut report = EvalReport {
        schema_version: SCHEMA_VERSION,
        strategy: cfg.strategy,
        seed: cfg.seed,
        rounds: cfg.rounds,
        eval_loss: Some(eval.loss),
        distance_to_truth: exp.truth.as_ref().map(|_| eval.loss),
        point_accuracy: eval.accuracy,
        marginal_accuracy: None,
        ece15_point: None,
        ece15_marginal: None,
        multilabel: None,
        rounds_to_threshold: BTreeMap::new(),
        best_within: BTreeMap::new(),
        floored_total: server.floored_total,
    };
    if exp.truth.is_some() {
        return Ok(report);
    }

    let labels: Vec<usize> = exp.test.iter().map(|e| e.y).collect();
    let xs: Vec<Vec<f64>> = exp.test.iter().map(|e| e.x.clone()).collect();
    let theta = server.warm_start();
    let point = xs
        .par_iter()
        .map(|x| models::predict_proba(&exp.spec, &theta, x))
        .collect::<Result<Vec<_>>>()?;
    report.ece15_point = Some(ece(&point, &labels, ECE_BINS)?);
    // A FedAvg run carries no posterior to marginalize over.
    if server.strategy != Strategy::FedAvg && server.q_global.is_proper() {
        let mut rng = seed::rng(seed::derive(cfg.seed, stream::EVAL, cfg.rounds));
        let marg = marginalized_predict_batch(&server.q_global, &exp.spec, &xs, cfg.eval_samples, &mut rng)?;
        let hits = marg.iter().zip(&labels).filter(|(p, &y)| argmax(p).0 == y).count();
        report.marginal_accuracy = Some(hits as f64 / labels.len() as f64);
        report.ece15_marginal = Some(ece(&marg, &labels, ECE_BINS)?);
    }

    let evaluated: Vec<(u64, f64)> = trace
        .iter()
        .filter_map(|m| m.eval_accuracy.map(|a| (m.round, a)))
        .collect();
    let acc: Vec<f64> = evaluated.iter().map(|(_, a)| *a).collect();
    for &t in &cfg.thresholds {
        let hit = rounds_to_threshold(&acc, t, 10).map(|i| evaluated[i - 1].0);
        report.rounds_to_threshold.insert(t.to_string(), hit);
    }
    for &h in &cfg.horizons {
        let within = evaluated.iter().take_while(|(r, _)| *r <= h).count();
        report.best_within.insert(h.to_string(), best_within(&acc, within, 100));
    }
    Ok(report)
}

/// Seed of repeat `i`: the configured seed itself, then derived streams.
pub fn repeat_seed(seed: u64, i: usize) -> u64 {
    if i == 0 {
        seed
    } else {
        seed::derive(seed, stream::REPEAT, i as u64)
    }
}

/// Loads data and runs without an observer.
pub fn run_config(cfg: &ExperimentConfig, base: &Path) -> Result<RunOutput> {
    let mut exp = prepare(cfg, base)?;
    run_experiment(cfg, &mut exp, &mut ())
}

/// Inference settings for Gaussian clients: exact projection.
pub fn exact_inference() -> InferenceConfig {
    InferenceConfig {
        backend: Backend::Exact,
        epochs: 0,
        ..Default::default()
    }
}

/// Full-participation rounds until the largest change in `η_global` falls
/// below `tol`, or `max_rounds`. Returns the number of rounds run.
pub fn run_until_converged(
    server: &mut ServerState,
    clients: &mut [ClientRecord],
    cfg: &InferenceConfig,
    max_rounds: u64,
    tol: f64,
) -> Result<u64> {
    let all: Vec<usize> = (0..clients.len()).collect();
    for r in 1..=max_rounds {
        let before = server.q_global.eta().to_vec();
        protocol::run_round(server, clients, &all, cfg, r)?;
        let change = before
            .iter()
            .zip(server.q_global.eta())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if change < tol {
            return Ok(r);
        }
    }
    Ok(max_rounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStudyConfig {
    pub draws: usize,
    pub seed: u64,
    pub nu: f64,
    pub lambda: f64,
    pub clients: usize,
    pub max_rounds: u64,
    pub tol: f64,
    pub damping: f64,
}

impl Default for ToyStudyConfig {
    fn default() -> Self {
        Self {
            draws: 200,
            seed: 0,
            nu: 7.0,
            lambda: 0.2,
            clients: 2,
            max_rounds: 500,
            tol: 1e-10,
            damping: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyDraw {
    pub fedep: f64,
    pub fedpa: f64,
    pub fedavg: f64,
    pub fedep_rounds: u64,
    pub resampled: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
}

impl Summary {
    /// Mean, sample standard deviation and median.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let m = s.len() / 2;
        let median = if s.is_empty() {
            f64::NAN
        } else if s.len() % 2 == 1 {
            s[m]
        } else {
            0.5 * (s[m - 1] + s[m])
        };
        Self { mean, sd, median }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStudyReport {
    pub schema_version: u32,
    pub config: ToyStudyConfig,
    pub fedep: Summary,
    pub fedpa: Summary,
    pub fedavg: Summary,
    /// Share of draws on which FedEP ends closer to the truth than FedPA.
    pub fedep_beats_fedpa: f64,
    pub resampled: usize,
    pub draws: Vec<ToyDraw>,
}

fn toy_records(clients: &[GaussianClient]) -> Result<Vec<ClientRecord>> {
    clients
        .iter()
        .enumerate()
        .map(|(k, c)| {
            ClientRecord::new(
                ModelSpec::GaussianClient(c.clone()),
                DatasetShard::empty(k),
                OptimizerConfig::identity(),
            )
        })
        .collect()
}

fn toy_server(strategy: Strategy, k: usize, damping: f64) -> Result<ServerState> {
    ServerState::new(
        strategy,
        MeanFieldGaussian::improper_uniform(2)?,
        damping,
        k,
        OptimizerConfig::identity(),
        OptimizerConfig::identity(),
    )
}

/// Distances to the true global mean for FedEP, FedPA and FedAvg on one set
/// of Gaussian clients, plus the FedEP round count.
pub fn toy_distances(clients: &[GaussianClient], cfg: &ToyStudyConfig) -> Result<(f64, f64, f64, u64)> {
    let truth = datagen::true_global_mean(clients)?;
    let k = clients.len();
    let inf = exact_inference();

    let mut avg = vec![0.0; truth.len()];
    for c in clients {
        for (a, m) in avg.iter_mut().zip(c.mean()) {
            *a += m / k as f64;
        }
    }

    let mut pa = toy_server(Strategy::FedPa, k, 1.0)?;
    let all: Vec<usize> = (0..k).collect();
    protocol::run_round(&mut pa, &mut toy_records(clients)?, &all, &inf, 0)?;

    let mut ep = toy_server(Strategy::FedEp, k, cfg.damping)?;
    let rounds = run_until_converged(&mut ep, &mut toy_records(clients)?, &inf, cfg.max_rounds, cfg.tol)?;

    Ok((
        distance(&ep.q_global.mode()?, &truth),
        distance(&pa.q_global.mode()?, &truth),
        distance(&avg, &truth),
        rounds,
    ))
}

/// Distance to the true global mean over random NIW client draws.
pub fn toy_study(cfg: &ToyStudyConfig) -> Result<ToyStudyReport> {
    if cfg.draws == 0 {
        return Err(Error::InvalidArgument("toy study needs at least one draw".into()));
    }
    let draws = (0..cfg.draws)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::derive(cfg.seed, stream::TOY_DRAW, i as u64));
            let mut niw = NiwParams::with_psi(datagen::random_psi(2, &mut rng))?;
            niw.nu = cfg.nu;
            niw.lambda = cfg.lambda;
            let toy = datagen::sample_toy_clients(&niw, cfg.clients, &mut rng)?;
            let (fedep, fedpa, fedavg, fedep_rounds) = toy_distances(&toy.clients, cfg)?;
            Ok(ToyDraw {
                fedep,
                fedpa,
                fedavg,
                fedep_rounds,
                resampled: toy.resampled,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&ToyDraw) -> f64| Summary::of(&draws.iter().map(f).collect::<Vec<_>>());
    Ok(ToyStudyReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        fedep: col(|d| d.fedep),
        fedpa: col(|d| d.fedpa),
        fedavg: col(|d| d.fedavg),
        fedep_beats_fedpa: draws.iter().filter(|d| d.fedep < d.fedpa).count() as f64 / draws.len() as f64,
        resampled: draws.iter().map(|d| d.resampled).sum(),
        draws,
    })
}
