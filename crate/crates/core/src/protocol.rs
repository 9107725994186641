//! Message passing between server and clients.
//!
//! One round: the server broadcasts `q_global`; each sampled client forms its
//! cavity, approximates its tilted distribution, and replies with the delta
//! `q̂_tilted / q_global`. Stateful clients (FedEP) also fold the damped delta
//! into their own site factor. The server sums the deltas, passes the sums
//! through its optimizers and adds `δ · step` to `q_global`.
//!
//! | strategy | cavity                                   | client state |
//! |----------|------------------------------------------|--------------|
//! | FedEP    | `q_global / q_k`                         | site `q_k`   |
//! | FedSEP   | `q_global / q̄`, `q̄ = (q_global / p₀)^{1/K}` | none         |
//! | FedPA    | improper uniform                         | none         |
//! | FedAvg   | n/a, plain local SGD from the global mode | none         |

use std::collections::HashSet;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{GaussianDelta, MeanFieldGaussian};
use crate::inference::{self, Backend, InferenceConfig, TiltedProblem, PRECISION_FLOOR};
use crate::models::{DatasetShard, ModelSpec};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::seed;

/// Precision attached to the FedAvg point estimate when it is viewed as a
/// Gaussian.
pub const FEDAVG_REFERENCE_PRECISION: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedEp,
    FedSep,
    FedPa,
    FedAvg,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::FedEp, Strategy::FedSep, Strategy::FedPa, Strategy::FedAvg];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::FedEp => "fedep",
            Strategy::FedSep => "fedsep",
            Strategy::FedPa => "fedpa",
            Strategy::FedAvg => "fedavg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Strategy::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub strategy: Strategy,
    pub q_global: MeanFieldGaussian,
    pub prior: MeanFieldGaussian,
    pub round: u64,
    pub damping: f64,
    /// Population size, the replication count of the FedSEP shared factor.
    pub num_clients: usize,
    pub optim_eta: Optimizer,
    pub optim_lam: Optimizer,
    /// Configuration for stateful clients' local-update optimizers.
    pub client_optim: OptimizerConfig,
    /// Total precision entries raised to the floor so far.
    pub floored_total: u64,
    /// Starting point for local inference while `q_global` is improper.
    pub origin: Vec<f64>,
}

impl ServerState {
    /// Server at initialization: `q_global` equals the prior.
    pub fn new(
        strategy: Strategy,
        prior: MeanFieldGaussian,
        damping: f64,
        num_clients: usize,
        server_optim: OptimizerConfig,
        client_optim: OptimizerConfig,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&damping) {
            return Err(Error::InvalidArgument(format!("damping {damping} outside [0, 1]")));
        }
        if num_clients == 0 {
            return Err(Error::InvalidArgument("population is empty".into()));
        }
        let d = prior.dim();
        Ok(Self {
            strategy,
            q_global: prior.clone(),
            prior,
            round: 0,
            damping,
            num_clients,
            optim_eta: Optimizer::new(server_optim),
            optim_lam: Optimizer::new(server_optim),
            client_optim,
            floored_total: 0,
            origin: vec![0.0; d],
        })
    }

    pub fn dim(&self) -> usize {
        self.q_global.dim()
    }

    /// Mode of `q_global` when proper, `origin` otherwise.
    pub fn warm_start(&self) -> Vec<f64> {
        self.q_global.mode().unwrap_or_else(|_| self.origin.clone())
    }

    /// Moves from FedAvg burn-in to an inference strategy. The FedAvg point
    /// becomes the mean with isotropic precision `total_data / alpha_cov`;
    /// optimizer state is cleared.
    ///
    /// For FedEP that mass is handed to the sites, `q_k = N(theta, |D_k| /
    /// alpha_cov)`, so `q_global = prior * prod q_k` still holds and each
    /// client replaces its share of the initialization when it is visited.
    /// Left unowned, the handoff factor would act as a permanent prior
    /// centred on the burn-in point.
    pub fn handoff(&mut self, strategy: Strategy, clients: &mut [ClientRecord], alpha_cov: f64) -> Result<()> {
        if !(alpha_cov > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha_cov {alpha_cov} must be positive")));
        }
        let theta = self.q_global.mode()?;
        let total_data: usize = clients.iter().map(ClientRecord::data_size).sum();
        let init = MeanFieldGaussian::isotropic(&theta, total_data as f64 / alpha_cov)?;
        self.q_global = self.prior.product(&init)?;
        for c in clients.iter_mut() {
            c.state.reset();
            if strategy == Strategy::FedEp {
                c.state.site = MeanFieldGaussian::isotropic(&theta, c.data_size() as f64 / alpha_cov)?;
            }
        }
        self.strategy = strategy;
        self.optim_eta.reset();
        self.optim_lam.reset();
        Ok(())
    }
}

/// Per-client mutable state that survives between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub client_id: usize,
    /// Site factor `q_k`; only FedEP updates it.
    pub site: MeanFieldGaussian,
    pub optim_eta: Optimizer,
    pub optim_lam: Optimizer,
}

impl ClientState {
    pub fn new(client_id: usize, dim: usize, optim: OptimizerConfig) -> Result<Self> {
        Ok(Self {
            client_id,
            site: MeanFieldGaussian::improper_uniform(dim)?,
            optim_eta: Optimizer::new(optim),
            optim_lam: Optimizer::new(optim),
        })
    }

    /// Back to the improper site and fresh optimizers.
    pub fn reset(&mut self) {
        let d = self.site.dim();
        self.site = MeanFieldGaussian::improper_uniform(d).expect("dim >= 1");
        self.optim_eta.reset();
        self.optim_lam.reset();
    }
}

/// A client: its likelihood, data and state.
#[derive(Debug, Clone)]
pub struct ClientRecord {
    pub spec: ModelSpec,
    pub shard: DatasetShard,
    pub state: ClientState,
}

impl ClientRecord {
    pub fn new(spec: ModelSpec, shard: DatasetShard, optim: OptimizerConfig) -> Result<Self> {
        let state = ClientState::new(shard.client_id, spec.param_dim(), optim)?;
        Ok(Self { spec, shard, state })
    }

    pub fn id(&self) -> usize {
        self.state.client_id
    }

    pub fn data_size(&self) -> usize {
        self.spec.data_size(&self.shard)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub tilted_loss_final: f64,
    pub backend: Option<Backend>,
    pub floored: usize,
}

/// The message a client sends back.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: GaussianDelta,
    pub weight: usize,
    /// Set when the tilted precision is a broadcast scalar (scaled-identity),
    /// so the precision part can travel as a single number.
    pub scalar_precision: Option<f64>,
    pub diagnostics: UpdateDiagnostics,
}

/// Serialized form of a [`ClientUpdate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireUpdate {
    pub client_id: usize,
    pub weight: usize,
    pub d_eta: Vec<f64>,
    pub precision: WirePrecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WirePrecision {
    Delta(Vec<f64>),
    /// Scalar tilted precision; the receiver subtracts its own `Λ_global`.
    TiltedScalar(f64),
}

impl ClientUpdate {
    pub fn to_wire(&self) -> WireUpdate {
        WireUpdate {
            client_id: self.client_id,
            weight: self.weight,
            d_eta: self.delta.d_eta.clone(),
            precision: match self.scalar_precision {
                Some(s) => WirePrecision::TiltedScalar(s),
                None => WirePrecision::Delta(self.delta.d_lam.clone()),
            },
        }
    }

    /// Rebuilds the update on the server, which knows `q_global`.
    pub fn from_wire(wire: WireUpdate, q_global: &MeanFieldGaussian) -> Result<Self> {
        check_dim(q_global.dim(), wire.d_eta.len())?;
        let (d_lam, scalar_precision) = match wire.precision {
            WirePrecision::Delta(v) => (v, None),
            WirePrecision::TiltedScalar(s) => (q_global.lam().iter().map(|l| s - l).collect(), Some(s)),
        };
        Ok(Self {
            client_id: wire.client_id,
            delta: GaussianDelta::new(wire.d_eta, d_lam)?,
            weight: wire.weight,
            scalar_precision,
            diagnostics: UpdateDiagnostics {
                tilted_loss_final: f64::NAN,
                backend: None,
                floored: 0,
            },
        })
    }

    /// Payload size in bytes: eight per transmitted float.
    pub fn wire_bytes(&self) -> usize {
        let lam = if self.scalar_precision.is_some() {
            1
        } else if self.delta.d_lam.iter().all(|&v| v == 0.0) && self.diagnostics.backend.is_none() {
            // FedAvg mean delta: no precision part.
            0
        } else {
            self.delta.dim()
        };
        8 * (self.delta.dim() + lam)
    }
}

/// Cavity distribution for `client` under the server's strategy.
pub fn cavity(server: &ServerState, client: &ClientState) -> Result<MeanFieldGaussian> {
    let d = server.dim();
    match server.strategy {
        Strategy::FedEp => server.q_global.quotient(&client.site),
        Strategy::FedSep => {
            if server.num_clients == 0 {
                return Err(Error::InvalidArgument("FedSEP needs K >= 1".into()));
            }
            let shared = shared_factor(server)?;
            server.q_global.quotient(&shared)
        }
        Strategy::FedPa => MeanFieldGaussian::improper_uniform(d),
        Strategy::FedAvg => Err(Error::InvalidArgument("FedAvg has no cavity".into())),
    }
}

/// The FedSEP shared site `q̄ = (q_global / p₀)^{1/K}`.
pub fn shared_factor(server: &ServerState) -> Result<MeanFieldGaussian> {
    server
        .q_global
        .quotient(&server.prior)?
        .power(1.0 / server.num_clients as f64)
}

/// One client's participation in an inference round (FedEP, FedSEP, FedPA).
/// FedAvg is dispatched to [`fedavg_client_round`].
pub fn client_round<R: Rng + ?Sized>(
    server: &ServerState,
    client: &mut ClientRecord,
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<ClientUpdate> {
    if server.strategy == Strategy::FedAvg {
        return fedavg_client_round(server, client, cfg, rng);
    }
    let cav = cavity(server, &client.state)?;
    let problem = TiltedProblem::new(&client.spec, &client.shard, &cav, server.warm_start())?;
    let out = inference::infer(&problem, cfg, rng)?;
    let delta = GaussianDelta::between(&out.approx, &server.q_global)?;

    if server.strategy == Strategy::FedEp {
        let state = &mut client.state;
        let step_eta = state.optim_eta.apply(&delta.d_eta)?;
        let step_lam = state.optim_lam.apply(&delta.d_lam)?;
        state
            .site
            .apply_delta(&GaussianDelta::new(step_eta, step_lam)?, server.damping)?;
    }

    let scalar_precision = match cfg.backend {
        Backend::ScaledIdentity => Some(out.approx.lam()[0]),
        _ => None,
    };
    Ok(ClientUpdate {
        client_id: client.id(),
        delta,
        weight: client.data_size(),
        scalar_precision,
        diagnostics: UpdateDiagnostics {
            tilted_loss_final: out.final_loss,
            backend: Some(cfg.backend),
            floored: out.floored,
        },
    })
}

/// Sums of the deltas; the only thing the server reads from the updates.
fn delta_sums(updates: &[ClientUpdate], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut s_eta = vec![0.0; d];
    let mut s_lam = vec![0.0; d];
    for u in updates {
        check_dim(d, u.delta.dim())?;
        for (s, v) in s_eta.iter_mut().zip(&u.delta.d_eta) {
            *s += v;
        }
        for (s, v) in s_lam.iter_mut().zip(&u.delta.d_lam) {
            *s += v;
        }
    }
    Ok((s_eta, s_lam))
}

/// Applies summed deltas: `η += δ·optim(ΣΔη)`, `Λ += δ·optim(ΣΔΛ)`, then
/// floors `Λ`. Returns the number of floored entries.
pub fn apply_delta_sums(server: &mut ServerState, sum_eta: &[f64], sum_lam: &[f64]) -> Result<usize> {
    let fallback = server.warm_start();
    let step_eta = server.optim_eta.apply(sum_eta)?;
    let step_lam = server.optim_lam.apply(sum_lam)?;
    server
        .q_global
        .apply_delta(&GaussianDelta::new(step_eta, step_lam)?, server.damping)?;
    let floored = server.q_global.floor_precision(PRECISION_FLOOR, &fallback);
    server.floored_total += floored as u64;
    server.round += 1;
    Ok(floored)
}

/// Server update for the inference strategies.
pub fn server_aggregate(server: &mut ServerState, updates: &[ClientUpdate]) -> Result<usize> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("no client updates to aggregate".into()));
    }
    let (s_eta, s_lam) = delta_sums(updates, server.dim())?;
    apply_delta_sums(server, &s_eta, &s_lam)
}

/// Local SGD on the client NLL from the global mode; returns the displacement
/// of the final iterate as `Δη` with `ΔΛ = 0`.
pub fn fedavg_client_round<R: Rng + ?Sized>(
    server: &ServerState,
    client: &mut ClientRecord,
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<ClientUpdate> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("FedAvg needs at least one local epoch".into()));
    }
    let start = server.q_global.mode()?;
    let flat = MeanFieldGaussian::improper_uniform(start.len())?;
    let problem = TiltedProblem::new(&client.spec, &client.shard, &flat, start.clone())?;
    let traj = inference::sgd_trajectory(&problem, cfg, rng)?;
    let last = traj.last().expect("epochs >= 1");
    let d_eta = last.iter().zip(&start).map(|(a, b)| a - b).collect();
    Ok(ClientUpdate {
        client_id: client.id(),
        delta: GaussianDelta::new(d_eta, vec![0.0; start.len()])?,
        weight: client.data_size(),
        scalar_precision: None,
        diagnostics: UpdateDiagnostics {
            tilted_loss_final: inference::tilted_loss(&problem, last)?,
            backend: None,
            floored: 0,
        },
    })
}

/// Weighted-average FedAvg server step on the global point estimate.
pub fn fedavg_server_aggregate(server: &mut ServerState, updates: &[ClientUpdate]) -> Result<usize> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("no client updates to aggregate".into()));
    }
    let d = server.dim();
    let theta = server.q_global.mode()?;
    let total: f64 = updates.iter().map(|u| u.weight as f64).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("FedAvg weights sum to zero".into()));
    }
    let mut mean = vec![0.0; d];
    for u in updates {
        check_dim(d, u.delta.dim())?;
        let w = u.weight as f64 / total;
        for (m, v) in mean.iter_mut().zip(&u.delta.d_eta) {
            *m += w * v;
        }
    }
    let step = server.optim_eta.apply(&mean)?;
    let next: Vec<f64> = theta
        .iter()
        .zip(&step)
        .map(|(t, s)| t + server.damping * s)
        .collect();
    server.q_global = MeanFieldGaussian::isotropic(&next, FEDAVG_REFERENCE_PRECISION)?;
    server.round += 1;
    Ok(0)
}

/// Protocol-level diagnostics of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u64,
    pub clients: Vec<usize>,
    pub floored: usize,
    pub mean_abs_d_eta: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Wall-clock duration; excluded from deterministic artifacts.
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Runs one full round over the clients at positions `sampled` of
/// `population`. Client randomness comes from `round_seed` and the client
/// id, so results do not depend on scheduling.
pub fn run_round(
    server: &mut ServerState,
    population: &mut [ClientRecord],
    sampled: &[usize],
    cfg: &InferenceConfig,
    round_seed: u64,
) -> Result<(RoundSummary, Vec<ClientUpdate>)> {
    let started = Instant::now();
    if sampled.is_empty() {
        return Err(Error::InvalidArgument("no clients sampled".into()));
    }
    let chosen: HashSet<usize> = sampled.iter().copied().collect();
    if chosen.len() != sampled.len() || sampled.iter().any(|&i| i >= population.len()) {
        return Err(Error::InvalidArgument("sampled ids must be distinct population indices".into()));
    }

    let snapshot: &ServerState = server;
    let updates: Vec<ClientUpdate> = population
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| chosen.contains(i))
        .map(|(_, c)| c)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|client| {
            let id = client.id();
            let mut rng = seed::rng(seed::derive(round_seed, seed::stream::CLIENT, id as u64));
            client_round(snapshot, client, cfg, &mut rng).map_err(|e| Error::Client {
                client: id,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let d = server.dim();
    let down_per_client = if server.strategy == Strategy::FedAvg { d } else { 2 * d };
    let bytes_down = (8 * down_per_client * updates.len()) as u64;
    let bytes_up = updates.iter().map(|u| u.wire_bytes() as u64).sum();
    let mean_abs_d_eta = updates
        .iter()
        .map(|u| u.delta.d_eta.iter().map(|v| v.abs()).sum::<f64>() / d as f64)
        .sum::<f64>()
        / updates.len() as f64;

    let floored = if server.strategy == Strategy::FedAvg {
        fedavg_server_aggregate(server, &updates)?
    } else {
        server_aggregate(server, &updates)?
    };
    Ok((
        RoundSummary {
            round: server.round,
            clients: updates.iter().map(|u| u.client_id).collect(),
            floored,
            mean_abs_d_eta,
            bytes_up,
            bytes_down,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        },
        updates,
    ))
}

/// Uniform sampling of `count` distinct population indices, returned sorted.
pub fn sample_clients<R: Rng + ?Sized>(population: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut ids = rand::seq::index::sample(rng, population, count.min(population)).into_vec();
    ids.sort_unstable();
    ids
}
