//! Experiment configuration files.
//!
//! A config is TOML with six flat sections. Every key is optional except
//! `experiment.strategy`; unknown keys are rejected.
//!
//! ```toml
//! [experiment]
//! strategy = "fedep"          # fedep | fedsep | fedpa | fedavg
//! rounds = 300                # total rounds, burn-in included
//! burn_in = 50                # leading FedAvg rounds
//! clients_per_round = 20
//! damping = 1.0
//! fedavg_damping = 1.0        # FedAvg rounds, burn-in included; defaults to damping
//! eval_interval = 1
//! eval_samples = 10           # posterior draws for marginalized prediction
//! prior_precision = 0.0       # 0 gives an improper flat prior
//! seed = 0
//! repeats = 1
//! checkpoint_interval = 0     # 0 disables checkpoints
//! thresholds = [0.5]          # accuracies for rounds-to-threshold
//! horizons = [100]            # rounds for best-within
//! output_dir = "runs/x"       # below the output root
//!
//! [inference]                 # see InferenceConfig
//! backend = "scaled-identity"
//!
//! [server_optimizer]          # kind = sgd-momentum | adagrad | adam
//! kind = "sgd-momentum"
//! momentum = 0.9
//! lr = 0.5
//!
//! [client_optimizer]          # stateful client updates; identity by default
//!
//! [data]                      # source = toy | niw | synthetic | csv
//! source = "synthetic"
//! n_clients = 50
//!
//! [model]                     # kind = logistic | mlp; not allowed for toy and niw
//! kind = "logistic"
//! ```
//!
//! [`to_toml`] writes the fully-defaulted config, which parses back to the
//! same value.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datagen::FedClassConfig;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::protocol::Strategy;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// The fixed two-client Gaussian fixture.
    Toy,
    /// One normal-inverse-Wishart draw of Gaussian clients.
    Niw { n_clients: usize, seed: u64 },
    Synthetic(FedClassConfig),
    Csv { path: PathBuf, test_path: PathBuf },
}

impl DataSource {
    pub fn is_gaussian(&self) -> bool {
        matches!(self, DataSource::Toy | DataSource::Niw { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    Logistic,
    Mlp { hidden_dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub rounds: u64,
    pub burn_in: u64,
    pub clients_per_round: usize,
    pub damping: f64,
    pub fedavg_damping: f64,
    pub eval_interval: u64,
    pub eval_samples: usize,
    pub prior_precision: f64,
    pub seed: u64,
    pub repeats: usize,
    pub checkpoint_interval: u64,
    pub thresholds: Vec<f64>,
    pub horizons: Vec<u64>,
    pub output_dir: Option<String>,
    pub inference: InferenceConfig,
    pub server_optimizer: OptimizerConfig,
    pub client_optimizer: OptimizerConfig,
    pub data: DataSource,
    pub model: ModelKind,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: Option<RawExperiment>,
    inference: Option<InferenceConfig>,
    server_optimizer: Option<RawOptimizer>,
    client_optimizer: Option<RawOptimizer>,
    data: Option<RawData>,
    model: Option<RawModel>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    strategy: Option<String>,
    rounds: Option<u64>,
    burn_in: Option<u64>,
    clients_per_round: Option<usize>,
    damping: Option<f64>,
    fedavg_damping: Option<f64>,
    eval_interval: Option<u64>,
    eval_samples: Option<usize>,
    prior_precision: Option<f64>,
    seed: Option<u64>,
    repeats: Option<usize>,
    checkpoint_interval: Option<u64>,
    thresholds: Option<Vec<f64>>,
    horizons: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_dir: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    kind: Option<String>,
    lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_clients: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    examples_per_client: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    heterogeneity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_separation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_examples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden_dim: Option<usize>,
}

/// Keys accepted in each section, used to resolve bare `--set` keys.
pub const KEYS: &[(&str, &[&str])] = &[
    (
        "experiment",
        &[
            "strategy",
            "rounds",
            "burn_in",
            "clients_per_round",
            "damping",
            "fedavg_damping",
            "eval_interval",
            "eval_samples",
            "prior_precision",
            "seed",
            "repeats",
            "checkpoint_interval",
            "thresholds",
            "horizons",
            "output_dir",
        ],
    ),
    (
        "inference",
        &[
            "backend",
            "epochs",
            "client_lr",
            "momentum",
            "batch_size",
            "alpha_cov",
            "mcmc_shrinkage",
            "laplace_epochs",
            "ngvi_epochs",
            "ngvi_samples",
            "ngvi_beta",
        ],
    ),
    ("server_optimizer", &["kind", "lr", "momentum", "tau", "beta1", "beta2", "eps"]),
    ("client_optimizer", &["kind", "lr", "momentum", "tau", "beta1", "beta2", "eps"]),
    (
        "data",
        &[
            "source",
            "path",
            "test_path",
            "n_clients",
            "examples_per_client",
            "input_dim",
            "num_classes",
            "heterogeneity",
            "label_noise",
            "class_separation",
            "test_examples",
            "seed",
        ],
    ),
    ("model", &["kind", "hidden_dim"]),
];

fn field_err(field: &str, message: impl Into<String>) -> Error {
    Error::ConfigField {
        field: field.to_string(),
        message: message.into(),
    }
}

fn toml_err(text: &str, e: toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::ConfigParse {
        line,
        message: e.message().to_string(),
    }
}

/// Parses and validates a config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_with(text, &[])
}

/// Parses a config after applying `key=value` overrides. A key is either
/// `section.key` or a bare key that names exactly one section's field. Values
/// are read as TOML, falling back to a plain string.
pub fn parse_config_with(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| toml_err(text, e))?;
    if overrides.is_empty() {
        return resolve(raw);
    }
    let mut table: toml::Table = toml::from_str(text).map_err(|e| toml_err(text, e))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let raw: RawConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::ConfigParse {
        line: 0,
        message: format!("after overrides: {}", e.message()),
    })?;
    resolve(raw)
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => (s.to_string(), f.to_string()),
        None => {
            let owners: Vec<&str> = KEYS
                .iter()
                .filter(|(_, keys)| keys.contains(&key))
                .map(|(s, _)| *s)
                .collect();
            match owners.as_slice() {
                [one] => (one.to_string(), key.to_string()),
                [] => return Err(field_err(key, "unknown key")),
                many => {
                    return Err(Error::InvalidArgument(format!(
                        "key `{key}` is ambiguous; use one of {}",
                        many.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")
                    )))
                }
            }
        }
    };
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let entry = table
        .entry(section.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(field, parsed);
            Ok(())
        }
        _ => Err(field_err(&section, "is not a section")),
    }
}

fn parse_strategy(s: Option<&str>) -> Result<Strategy> {
    match s.map(str::trim) {
        None | Some("") => Err(field_err("strategy", "required; one of fedep, fedsep, fedpa, fedavg")),
        Some(name) => Strategy::parse(name).ok_or_else(|| field_err("strategy", format!("unknown strategy `{name}`"))),
    }
}

fn resolve_optimizer(section: &str, raw: Option<RawOptimizer>, default: OptimizerConfig) -> Result<OptimizerConfig> {
    let Some(raw) = raw else {
        return Ok(default);
    };
    let f = |k: &str| format!("{section}.{k}");
    let lr = raw.lr.unwrap_or(1.0);
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(field_err(&f("lr"), "must be finite and >= 0"));
    }
    let kind_name = raw.kind.as_deref().unwrap_or("sgd-momentum");
    let reject = |present: bool, key: &str| -> Result<()> {
        if present {
            Err(field_err(&f(key), format!("not a parameter of `{kind_name}`")))
        } else {
            Ok(())
        }
    };
    let kind = match kind_name {
        "sgd-momentum" => {
            reject(raw.tau.is_some(), "tau")?;
            reject(raw.beta1.is_some() || raw.beta2.is_some() || raw.eps.is_some(), "beta1")?;
            let momentum = raw.momentum.unwrap_or(0.0);
            if !(0.0..1.0).contains(&momentum) {
                return Err(field_err(&f("momentum"), "must be in [0, 1)"));
            }
            OptimizerKind::SgdMomentum { momentum }
        }
        "adagrad" => {
            reject(raw.momentum.is_some(), "momentum")?;
            reject(raw.beta1.is_some() || raw.beta2.is_some() || raw.eps.is_some(), "beta1")?;
            let tau = raw.tau.unwrap_or(1e-5);
            if !(tau >= 0.0 && tau.is_finite()) {
                return Err(field_err(&f("tau"), "must be finite and >= 0"));
            }
            OptimizerKind::Adagrad { tau }
        }
        "adam" => {
            reject(raw.momentum.is_some(), "momentum")?;
            reject(raw.tau.is_some(), "tau")?;
            let OptimizerKind::Adam { beta1, beta2, eps } = OptimizerKind::adam_default() else {
                unreachable!()
            };
            let (beta1, beta2, eps) = (raw.beta1.unwrap_or(beta1), raw.beta2.unwrap_or(beta2), raw.eps.unwrap_or(eps));
            if !(0.0..1.0).contains(&beta1) {
                return Err(field_err(&f("beta1"), "must be in [0, 1)"));
            }
            if !(0.0..1.0).contains(&beta2) {
                return Err(field_err(&f("beta2"), "must be in [0, 1)"));
            }
            if !(eps > 0.0) {
                return Err(field_err(&f("eps"), "must be positive"));
            }
            OptimizerKind::Adam { beta1, beta2, eps }
        }
        other => return Err(field_err(&f("kind"), format!("unknown optimizer `{other}`"))),
    };
    Ok(OptimizerConfig { kind, lr })
}

fn resolve_data(raw: Option<RawData>) -> Result<DataSource> {
    let raw = raw.unwrap_or_default();
    let source = raw.source.as_deref().unwrap_or("toy");
    let present: Vec<(&str, bool)> = vec![
        ("path", raw.path.is_some()),
        ("test_path", raw.test_path.is_some()),
        ("n_clients", raw.n_clients.is_some()),
        ("examples_per_client", raw.examples_per_client.is_some()),
        ("input_dim", raw.input_dim.is_some()),
        ("num_classes", raw.num_classes.is_some()),
        ("heterogeneity", raw.heterogeneity.is_some()),
        ("label_noise", raw.label_noise.is_some()),
        ("class_separation", raw.class_separation.is_some()),
        ("test_examples", raw.test_examples.is_some()),
        ("seed", raw.seed.is_some()),
    ];
    let allowed: &[&str] = match source {
        "toy" => &[],
        "niw" => &["n_clients", "seed"],
        "csv" => &["path", "test_path"],
        "synthetic" => &[
            "n_clients",
            "examples_per_client",
            "input_dim",
            "num_classes",
            "heterogeneity",
            "label_noise",
            "class_separation",
            "test_examples",
            "seed",
        ],
        other => return Err(field_err("data.source", format!("unknown source `{other}`"))),
    };
    if let Some((k, _)) = present.iter().find(|(k, p)| *p && !allowed.contains(k)) {
        return Err(field_err(&format!("data.{k}"), format!("not used by source `{source}`")));
    }
    Ok(match source {
        "toy" => DataSource::Toy,
        "niw" => {
            let n_clients = raw.n_clients.unwrap_or(2);
            if n_clients == 0 {
                return Err(field_err("data.n_clients", "must be positive"));
            }
            DataSource::Niw {
                n_clients,
                seed: raw.seed.unwrap_or(0),
            }
        }
        "csv" => DataSource::Csv {
            path: raw.path.ok_or_else(|| field_err("data.path", "required for csv data"))?.into(),
            test_path: raw
                .test_path
                .ok_or_else(|| field_err("data.test_path", "required for csv data"))?
                .into(),
        },
        _ => {
            let d = FedClassConfig::default();
            let cfg = FedClassConfig {
                n_clients: raw.n_clients.unwrap_or(d.n_clients),
                examples_per_client: raw.examples_per_client.unwrap_or(d.examples_per_client),
                input_dim: raw.input_dim.unwrap_or(d.input_dim),
                num_classes: raw.num_classes.unwrap_or(d.num_classes),
                heterogeneity: raw.heterogeneity.unwrap_or(d.heterogeneity),
                label_noise: raw.label_noise.unwrap_or(d.label_noise),
                class_separation: raw.class_separation.unwrap_or(d.class_separation),
                test_examples: raw.test_examples.unwrap_or(d.test_examples),
                seed: raw.seed.unwrap_or(d.seed),
            };
            cfg.validate().map_err(|e| match e {
                Error::ConfigField { field, message } => field_err(&format!("data.{field}"), message),
                other => other,
            })?;
            DataSource::Synthetic(cfg)
        }
    })
}

fn resolve_model(raw: Option<RawModel>, data: &DataSource) -> Result<ModelKind> {
    if data.is_gaussian() {
        if raw.is_some() {
            return Err(field_err("model", "Gaussian data sources fix the model; remove [model]"));
        }
        return Ok(ModelKind::Logistic);
    }
    let raw = raw.unwrap_or_default();
    match raw.kind.as_deref().unwrap_or("logistic") {
        "logistic" => {
            if raw.hidden_dim.is_some() {
                return Err(field_err("model.hidden_dim", "only used by mlp"));
            }
            Ok(ModelKind::Logistic)
        }
        "mlp" => {
            let hidden_dim = raw.hidden_dim.unwrap_or(32);
            if hidden_dim == 0 {
                return Err(field_err("model.hidden_dim", "must be positive"));
            }
            Ok(ModelKind::Mlp { hidden_dim })
        }
        other => Err(field_err("model.kind", format!("unknown model `{other}`"))),
    }
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig> {
    let e = raw.experiment.unwrap_or_default();
    let strategy = parse_strategy(e.strategy.as_deref())?;
    let inference = raw.inference.unwrap_or_default();
    inference.validate().map_err(|err| match err {
        Error::ConfigField { field, message } => field_err(&format!("inference.{field}"), message),
        other => other,
    })?;
    let data = resolve_data(raw.data)?;
    let model = resolve_model(raw.model, &data)?;
    let cfg = ExperimentConfig {
        strategy,
        rounds: e.rounds.unwrap_or(100),
        burn_in: e.burn_in.unwrap_or(0),
        clients_per_round: e.clients_per_round.unwrap_or(10),
        damping: e.damping.unwrap_or(1.0),
        fedavg_damping: e.fedavg_damping.or(e.damping).unwrap_or(1.0),
        eval_interval: e.eval_interval.unwrap_or(1),
        eval_samples: e.eval_samples.unwrap_or(10),
        prior_precision: e.prior_precision.unwrap_or(0.0),
        seed: e.seed.unwrap_or(0),
        repeats: e.repeats.unwrap_or(1),
        checkpoint_interval: e.checkpoint_interval.unwrap_or(0),
        thresholds: e.thresholds.unwrap_or_default(),
        horizons: e.horizons.unwrap_or_default(),
        output_dir: e.output_dir,
        inference,
        server_optimizer: resolve_optimizer("server_optimizer", raw.server_optimizer, OptimizerConfig::identity())?,
        client_optimizer: resolve_optimizer("client_optimizer", raw.client_optimizer, OptimizerConfig::identity())?,
        data,
        model,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 {
            return Err(field_err("experiment.clients_per_round", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(field_err("experiment.damping", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.fedavg_damping) {
            return Err(field_err("experiment.fedavg_damping", "must be in [0, 1]"));
        }
        if self.burn_in > self.rounds {
            return Err(field_err("experiment.burn_in", "exceeds rounds"));
        }
        if self.eval_interval == 0 {
            return Err(field_err("experiment.eval_interval", "must be positive"));
        }
        if self.eval_samples == 0 {
            return Err(field_err("experiment.eval_samples", "must be positive"));
        }
        if !(self.prior_precision >= 0.0 && self.prior_precision.is_finite()) {
            return Err(field_err("experiment.prior_precision", "must be finite and >= 0"));
        }
        if self.repeats == 0 {
            return Err(field_err("experiment.repeats", "must be positive"));
        }
        if self.thresholds.iter().any(|t| !t.is_finite()) {
            return Err(field_err("experiment.thresholds", "must be finite"));
        }
        if self.horizons.contains(&0) {
            return Err(field_err("experiment.horizons", "must be positive"));
        }
        if !self.data.is_gaussian() && self.inference.backend == crate::inference::Backend::Exact {
            return Err(field_err("inference.backend", "exact inference needs Gaussian clients"));
        }
        Ok(())
    }

    /// Copy with a different master seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

fn raw_optimizer(o: &OptimizerConfig) -> RawOptimizer {
    let mut r = RawOptimizer {
        lr: Some(o.lr),
        ..Default::default()
    };
    match o.kind {
        OptimizerKind::SgdMomentum { momentum } => {
            r.kind = Some("sgd-momentum".into());
            r.momentum = Some(momentum);
        }
        OptimizerKind::Adagrad { tau } => {
            r.kind = Some("adagrad".into());
            r.tau = Some(tau);
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            r.kind = Some("adam".into());
            r.beta1 = Some(beta1);
            r.beta2 = Some(beta2);
            r.eps = Some(eps);
        }
    }
    r
}

/// The fully-defaulted config as TOML.
pub fn to_toml(cfg: &ExperimentConfig) -> String {
    let data = match &cfg.data {
        DataSource::Toy => RawData {
            source: Some("toy".into()),
            ..Default::default()
        },
        DataSource::Niw { n_clients, seed } => RawData {
            source: Some("niw".into()),
            n_clients: Some(*n_clients),
            seed: Some(*seed),
            ..Default::default()
        },
        DataSource::Csv { path, test_path } => RawData {
            source: Some("csv".into()),
            path: Some(path.to_string_lossy().into_owned()),
            test_path: Some(test_path.to_string_lossy().into_owned()),
            ..Default::default()
        },
        DataSource::Synthetic(c) => RawData {
            source: Some("synthetic".into()),
            n_clients: Some(c.n_clients),
            examples_per_client: Some(c.examples_per_client),
            input_dim: Some(c.input_dim),
            num_classes: Some(c.num_classes),
            heterogeneity: Some(c.heterogeneity),
            label_noise: Some(c.label_noise),
            class_separation: Some(c.class_separation),
            test_examples: Some(c.test_examples),
            seed: Some(c.seed),
            path: None,
            test_path: None,
        },
    };
    let model = (!cfg.data.is_gaussian()).then(|| match cfg.model {
        ModelKind::Logistic => RawModel {
            kind: Some("logistic".into()),
            hidden_dim: None,
        },
        ModelKind::Mlp { hidden_dim } => RawModel {
            kind: Some("mlp".into()),
            hidden_dim: Some(hidden_dim),
        },
    });
    let raw = RawConfig {
        experiment: Some(RawExperiment {
            strategy: Some(cfg.strategy.as_str().into()),
            rounds: Some(cfg.rounds),
            burn_in: Some(cfg.burn_in),
            clients_per_round: Some(cfg.clients_per_round),
            damping: Some(cfg.damping),
            fedavg_damping: Some(cfg.fedavg_damping),
            eval_interval: Some(cfg.eval_interval),
            eval_samples: Some(cfg.eval_samples),
            prior_precision: Some(cfg.prior_precision),
            seed: Some(cfg.seed),
            repeats: Some(cfg.repeats),
            checkpoint_interval: Some(cfg.checkpoint_interval),
            thresholds: Some(cfg.thresholds.clone()),
            horizons: Some(cfg.horizons.clone()),
            output_dir: cfg.output_dir.clone(),
        }),
        inference: Some(cfg.inference.clone()),
        server_optimizer: Some(raw_optimizer(&cfg.server_optimizer)),
        client_optimizer: Some(raw_optimizer(&cfg.client_optimizer)),
        data: Some(data),
        model,
    };
    toml::to_string(&raw).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::Backend;

    const CIFAR_LIKE: &str = include_str!("../../../configs/cifar-like.toml");

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config("[experiment]\nstrategy = \"fedep\"\n").unwrap();
        assert_eq!(cfg.strategy, Strategy::FedEp);
        assert_eq!(cfg.rounds, 100);
        assert_eq!(cfg.data, DataSource::Toy);
        assert_eq!(cfg.inference, InferenceConfig::default());
        assert_eq!(cfg.server_optimizer, OptimizerConfig::identity());
    }

    #[test]
    fn empty_strategy_is_named() {
        for text in ["[experiment]\nstrategy = \"\"\n", "[experiment]\nrounds = 3\n", ""] {
            match parse_config(text) {
                Err(Error::ConfigField { field, .. }) => assert_eq!(field, "strategy"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let text = "[experiment]\nstrategy = \"fedep\"\nfoo = 1\n";
        match parse_config(text) {
            Err(Error::ConfigParse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("foo"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_config("[nonsense]\nx = 1\n").is_err());
    }

    #[test]
    fn syntax_error_has_line() {
        match parse_config("[experiment]\nstrategy = \"fedep\"\nrounds = = 3\n") {
            Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cifar_preset() {
        let cfg = parse_config(CIFAR_LIKE).unwrap();
        assert_eq!(cfg.clients_per_round, 20);
        assert_eq!(cfg.burn_in, 400);
        assert_eq!(
            cfg.server_optimizer,
            OptimizerConfig {
                kind: OptimizerKind::SgdMomentum { momentum: 0.9 },
                lr: 0.5
            }
        );
        assert_eq!(cfg.inference.client_lr, 0.01);
        assert_eq!(cfg.inference.momentum, 0.9);
        assert_eq!(cfg.inference.epochs, 10);
        assert_eq!(cfg.inference.alpha_cov, 5e-2);
        assert_eq!(cfg.inference.mcmc_shrinkage, 1e-4);
    }

    #[test]
    fn resolved_config_is_fixed_point() {
        let texts = [
            CIFAR_LIKE.to_string(),
            "[experiment]\nstrategy = \"fedpa\"\n[data]\nsource = \"niw\"\nn_clients = 3\n".to_string(),
            "[experiment]\nstrategy = \"fedsep\"\n[server_optimizer]\nkind = \"adam\"\nlr = 0.1\n[data]\nsource = \"csv\"\npath = \"a.csv\"\ntest_path = \"b.csv\"\n[model]\nkind = \"mlp\"\n".to_string(),
            "[experiment]\nstrategy = \"fedep\"\n[client_optimizer]\nkind = \"adagrad\"\n[data]\nsource = \"synthetic\"\nheterogeneity = inf\n".to_string(),
        ];
        for t in texts {
            let cfg = parse_config(&t).unwrap();
            let echo = to_toml(&cfg);
            let again = parse_config(&echo).unwrap();
            assert_eq!(cfg, again, "{echo}");
            assert_eq!(echo, to_toml(&again));
        }
    }

    #[test]
    fn overrides() {
        let base = "[experiment]\nstrategy = \"fedep\"\n";
        let cfg = parse_config_with(base, &["strategy=fedpa".into(), "inference.backend=laplace".into(), "rounds=7".into()]).unwrap();
        assert_eq!(cfg.strategy, Strategy::FedPa);
        assert_eq!(cfg.inference.backend, Backend::Laplace);
        assert_eq!(cfg.rounds, 7);
        // `seed` lives in both [experiment] and [data].
        assert!(parse_config_with(base, &["seed=3".into()]).is_err());
        assert_eq!(parse_config_with(base, &["experiment.seed=3".into()]).unwrap().seed, 3);
        assert!(parse_config_with(base, &["nope=1".into()]).is_err());
        assert!(parse_config_with(base, &["rounds".into()]).is_err());
    }

    #[test]
    fn validation_names_fields() {
        let cases = [
            ("[experiment]\nstrategy = \"fedep\"\ndamping = 2.0\n", "experiment.damping"),
            ("[experiment]\nstrategy = \"fedep\"\n[inference]\nepochs = 1\n", "inference.epochs"),
            ("[experiment]\nstrategy = \"fedep\"\n[server_optimizer]\nkind = \"adagrad\"\nmomentum = 0.9\n", "server_optimizer.momentum"),
            ("[experiment]\nstrategy = \"fedep\"\n[data]\nsource = \"toy\"\nn_clients = 3\n", "data.n_clients"),
            ("[experiment]\nstrategy = \"fedep\"\n[data]\nsource = \"synthetic\"\nlabel_noise = 2.0\n", "data.label_noise"),
            ("[experiment]\nstrategy = \"fedep\"\n[model]\nkind = \"logistic\"\n", "model"),
            ("[experiment]\nstrategy = \"fedep\"\nrounds = 3\nburn_in = 4\n", "experiment.burn_in"),
        ];
        for (text, field) in cases {
            match parse_config(text) {
                Err(Error::ConfigField { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
