//! Client-side approximate inference of the tilted distribution
//! `p_k(θ) · q_{−k}(θ)`.
//!
//! Every backend returns a proper [`MeanFieldGaussian`]. The SGD-based
//! backends minimize the tilted loss
//!
//! ```text
//! −log p_k(θ) + ½ θᵀ Λ_{−k} θ − η_{−k}ᵀ θ
//! ```
//!
//! with momentum SGD over shuffled minibatches, starting from the problem's
//! warm-start point. They differ in how the covariance is obtained:
//!
//! | backend           | mean                      | variance                              |
//! |-------------------|---------------------------|---------------------------------------|
//! | `mcmc`            | mean of per-epoch iterates | shrunk sample variance of the iterates |
//! | `scaled-identity` | mean of per-epoch iterates | `α_cov / |D_k|`                        |
//! | `laplace`         | final iterate             | `(|D_k|·F + Λ_{−k})⁻¹`                 |
//! | `ngvi`            | final iterate             | EMA of Fisher at posterior samples     |
//! | `exact`           | closed form               | closed form (density clients only)     |

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{MeanFieldGaussian, MomentsView};
use crate::models::{self, DatasetShard, ModelSpec};

/// Lower bound applied to variances and precisions produced by inference.
pub const PRECISION_FLOOR: f64 = 1e-12;

/// Full-gradient steps that make up one "epoch" for a density client, which
/// has no examples to iterate over.
pub const DENSITY_STEPS_PER_EPOCH: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Exact,
    Mcmc,
    ScaledIdentity,
    Laplace,
    Ngvi,
}

impl Backend {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::Exact => "exact",
            Backend::Mcmc => "mcmc",
            Backend::ScaledIdentity => "scaled-identity",
            Backend::Laplace => "laplace",
            Backend::Ngvi => "ngvi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "exact" => Backend::Exact,
            "mcmc" => Backend::Mcmc,
            "scaled-identity" => Backend::ScaledIdentity,
            "laplace" => Backend::Laplace,
            "ngvi" => Backend::Ngvi,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub backend: Backend,
    /// SGD epochs over the shard.
    pub epochs: usize,
    pub client_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Per-data-point covariance scale.
    pub alpha_cov: f64,
    pub mcmc_shrinkage: f64,
    pub laplace_epochs: usize,
    pub ngvi_epochs: usize,
    pub ngvi_samples: usize,
    pub ngvi_beta: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        // Client optimizer SGD (m = 0.9), lr 0.01, 10 epochs, α_cov 5e-2,
        // shrinkage 1e-4, 5 Laplace epochs, NGVI 5/5/0.99.
        Self {
            backend: Backend::ScaledIdentity,
            epochs: 10,
            client_lr: 0.01,
            momentum: 0.9,
            batch_size: 20,
            alpha_cov: 5e-2,
            mcmc_shrinkage: 1e-4,
            laplace_epochs: 5,
            ngvi_epochs: 5,
            ngvi_samples: 5,
            ngvi_beta: 0.99,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, m: &str| {
            Err(Error::ConfigField {
                field: field.to_string(),
                message: m.to_string(),
            })
        };
        let min_epochs = match self.backend {
            Backend::Mcmc | Backend::ScaledIdentity => 2,
            Backend::Laplace | Backend::Ngvi => 1,
            Backend::Exact => 0,
        };
        if self.epochs < min_epochs {
            return bad(
                "epochs",
                &format!("{} inference needs at least {min_epochs} epochs", self.backend.as_str()),
            );
        }
        if !(self.client_lr >= 0.0 && self.client_lr.is_finite()) {
            return bad("client_lr", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.alpha_cov > 0.0 && self.alpha_cov.is_finite()) {
            return bad("alpha_cov", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.mcmc_shrinkage) {
            return bad("mcmc_shrinkage", "must be in [0, 1]");
        }
        for (field, v) in [
            ("laplace_epochs", self.laplace_epochs),
            ("ngvi_epochs", self.ngvi_epochs),
            ("ngvi_samples", self.ngvi_samples),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.ngvi_beta) {
            return bad("ngvi_beta", "must be in [0, 1)");
        }
        Ok(())
    }
}

/// The local inference target: client likelihood times cavity.
#[derive(Debug, Clone)]
pub struct TiltedProblem<'a> {
    pub spec: &'a ModelSpec,
    pub shard: &'a DatasetShard,
    pub cavity: &'a MeanFieldGaussian,
    pub init_theta: Vec<f64>,
}

impl<'a> TiltedProblem<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        shard: &'a DatasetShard,
        cavity: &'a MeanFieldGaussian,
        init_theta: Vec<f64>,
    ) -> Result<Self> {
        let d = spec.param_dim();
        check_dim(d, cavity.dim())?;
        check_dim(d, init_theta.len())?;
        Ok(Self {
            spec,
            shard,
            cavity,
            init_theta,
        })
    }

    fn data_size(&self) -> usize {
        self.spec.data_size(self.shard)
    }
}

/// Result of a client inference call.
#[derive(Debug, Clone, PartialEq)]
pub struct Inferred {
    pub approx: MeanFieldGaussian,
    /// Precision entries raised to [`PRECISION_FLOOR`].
    pub floored: usize,
    /// Tilted loss at the returned mean.
    pub final_loss: f64,
}

fn cavity_energy(cavity: &MeanFieldGaussian, theta: &[f64]) -> f64 {
    cavity
        .lam()
        .iter()
        .zip(cavity.eta())
        .zip(theta)
        .map(|((l, e), t)| 0.5 * l * t * t - e * t)
        .sum()
}

pub fn tilted_loss(problem: &TiltedProblem<'_>, theta: &[f64]) -> Result<f64> {
    check_dim(problem.cavity.dim(), theta.len())?;
    Ok(models::nll(problem.spec, theta, &problem.shard.examples)? + cavity_energy(problem.cavity, theta))
}

/// Runs `cfg.epochs` epochs of momentum SGD on the tilted loss and returns
/// the iterate at the end of every epoch.
pub(crate) fn sgd_trajectory<R: Rng + ?Sized>(
    problem: &TiltedProblem<'_>,
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let d = problem.init_theta.len();
    let spec = problem.spec;
    let examples = &problem.shard.examples;
    let n = examples.len();
    let mut theta = problem.init_theta.clone();
    let mut velocity = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut samples = Vec::with_capacity(cfg.epochs);

    let mut step = |theta: &mut Vec<f64>, grad: &mut Vec<f64>| {
        for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad.iter()) {
            *v = cfg.momentum * *v + g;
            *t -= cfg.client_lr * *v;
        }
    };

    for epoch in 0..cfg.epochs {
        if spec.is_classifier() {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch_size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| examples[i].clone()));
                grad.iter_mut().for_each(|g| *g = 0.0);
                // Unbiased minibatch estimate of the summed NLL gradient.
                let scale = n as f64 / chunk.len() as f64;
                models::add_grad_nll(spec, &theta, &batch, scale, &mut grad)?;
                add_cavity_grad(problem.cavity, &theta, &mut grad);
                step(&mut theta, &mut grad);
            }
        } else {
            for _ in 0..DENSITY_STEPS_PER_EPOCH {
                grad.iter_mut().for_each(|g| *g = 0.0);
                models::add_grad_nll(spec, &theta, &[], 1.0, &mut grad)?;
                add_cavity_grad(problem.cavity, &theta, &mut grad);
                step(&mut theta, &mut grad);
            }
        }
        if !theta.iter().all(|t| t.is_finite()) {
            return Err(Error::InferenceDiverged { epoch });
        }
        samples.push(theta.clone());
    }
    if let Some(last) = samples.last() {
        if !tilted_loss(problem, last)?.is_finite() {
            return Err(Error::InferenceDiverged {
                epoch: cfg.epochs - 1,
            });
        }
    }
    Ok(samples)
}

fn add_cavity_grad(cavity: &MeanFieldGaussian, theta: &[f64], grad: &mut [f64]) {
    for (((g, l), e), t) in grad.iter_mut().zip(cavity.lam()).zip(cavity.eta()).zip(theta) {
        *g += l * t - e;
    }
}

fn mean_of(samples: &[Vec<f64>]) -> Vec<f64> {
    let d = samples[0].len();
    let mut mu = vec![0.0; d];
    for s in samples {
        for (m, x) in mu.iter_mut().zip(s) {
            *m += x;
        }
    }
    let n = samples.len() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

/// Sample mean and shrunk diagonal variance of `samples`.
///
/// Per-coordinate unbiased variances `s²_i` are shrunk toward their average:
/// `σ²_i = (1 − ρ)·s²_i + ρ·mean_j s²_j`, then floored at [`PRECISION_FLOOR`].
pub fn moment_estimate(samples: &[Vec<f64>], rho: f64) -> Result<MomentsView> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "moment estimation needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument("shrinkage must be in [0, 1]".into()));
    }
    let d = samples[0].len();
    for s in samples {
        check_dim(d, s.len())?;
    }
    let mu = mean_of(samples);
    let denom = (samples.len() - 1) as f64;
    let mut var = vec![0.0; d];
    for s in samples {
        for ((v, x), m) in var.iter_mut().zip(s).zip(&mu) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= denom);
    let grand = var.iter().sum::<f64>() / d as f64;
    for v in &mut var {
        *v = ((1.0 - rho) * *v + rho * grand).max(PRECISION_FLOOR);
    }
    Ok(MomentsView { mu, var })
}

fn finish(problem: &TiltedProblem<'_>, mu: &[f64], mut lam: Vec<f64>) -> Result<Inferred> {
    let mut floored = 0;
    for l in &mut lam {
        if !(*l >= PRECISION_FLOOR) {
            *l = PRECISION_FLOOR;
            floored += 1;
        }
    }
    let eta = mu.iter().zip(&lam).map(|(m, l)| m * l).collect();
    let approx = MeanFieldGaussian::new(eta, lam)?;
    Ok(Inferred {
        final_loss: tilted_loss(problem, mu)?,
        approx,
        floored,
    })
}

pub fn mcmc_infer<R: Rng + ?Sized>(
    problem: &TiltedProblem<'_>,
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<Inferred> {
    if cfg.epochs < 2 {
        return Err(Error::InvalidArgument("mcmc inference needs at least 2 epochs".into()));
    }
    let samples = sgd_trajectory(problem, cfg, rng)?;
    let m = moment_estimate(&samples, cfg.mcmc_shrinkage)?;
    finish(problem, &m.mu, m.var.iter().map(|v| 1.0 / v).collect())
}

pub fn scaled_identity_infer<R: Rng + ?Sized>(
    problem: &TiltedProblem<'_>,
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<Inferred> {
    if cfg.epochs < 2 {
        return Err(Error::InvalidArgument(
            "scaled-identity inference needs at least 2 epochs".into(),
        ));
    }
    let samples = sgd_trajectory(problem, cfg, rng)?;
    let mu = mean_of(&samples);
    let precision = problem.data_size() as f64 / cfg.alpha_cov;
    finish(problem, &mu, vec![precision; mu.len()])
}

/// SGD estimate of the tilted mode: the last iterate.
fn approximate_map<R: Rng + ?Sized>(
    problem: &TiltedProblem<'_>,
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut traj = sgd_trajectory(problem, cfg, rng)?;
    Ok(traj.pop().unwrap_or_else(|| problem.init_theta.clone()))
}

fn curvature_precision(problem: &TiltedProblem<'_>, per_example: &[f64]) -> Vec<f64> {
    let n = problem.data_size() as f64;
    per_example
        .iter()
        .zip(problem.cavity.lam())
        .map(|(f, l)| n * f + l)
        .collect()
}

pub fn laplace_infer<R: Rng + ?Sized>(
    problem: &TiltedProblem<'_>,
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<Inferred> {
    if cfg.epochs < 1 || cfg.laplace_epochs < 1 {
        return Err(Error::InvalidArgument("laplace needs epochs >= 1".into()));
    }
    let mu = approximate_map(problem, cfg, rng)?;
    let mut fisher = vec![0.0; mu.len()];
    for _ in 0..cfg.laplace_epochs {
        let f = models::curvature(problem.spec, &mu, problem.shard, rng)?;
        for (acc, v) in fisher.iter_mut().zip(f) {
            *acc += v;
        }
    }
    fisher.iter_mut().for_each(|f| *f /= cfg.laplace_epochs as f64);
    finish(problem, &mu, curvature_precision(problem, &fisher))
}

/// Per-iteration `(s_t, F_t)` pairs.
pub(crate) type NgviPath = Vec<(Vec<f64>, Vec<f64>)>;

/// The NGVI precision iteration for a fixed mean. Returns `(s_t, F_t)` for
/// `t = 1..=T` and the final precision.
pub(crate) fn ngvi_path<R: Rng + ?Sized>(
    problem: &TiltedProblem<'_>,
    mu: &[f64],
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<(NgviPath, Vec<f64>)> {
    let d = mu.len();
    let n = problem.data_size() as f64;
    let mut s = vec![0.0; d];
    let mut lam = vec![n / cfg.alpha_cov; d];
    let mut path = Vec::with_capacity(cfg.ngvi_epochs);
    for _ in 0..cfg.ngvi_epochs {
        let current = MeanFieldGaussian::new(
            mu.iter().zip(&lam).map(|(m, l)| m * l).collect(),
            lam.clone(),
        )?;
        let mut f_avg = vec![0.0; d];
        for _ in 0..cfg.ngvi_samples {
            let theta = current.sample(rng)?;
            let f = models::curvature(problem.spec, &theta, problem.shard, rng)?;
            for (acc, v) in f_avg.iter_mut().zip(f) {
                *acc += v;
            }
        }
        f_avg.iter_mut().for_each(|f| *f /= cfg.ngvi_samples as f64);
        for (si, fi) in s.iter_mut().zip(&f_avg) {
            *si = cfg.ngvi_beta * *si + (1.0 - cfg.ngvi_beta) * fi;
        }
        lam = curvature_precision(problem, &s)
            .into_iter()
            .map(|l| l.max(PRECISION_FLOOR))
            .collect();
        path.push((s.clone(), f_avg));
    }
    Ok((path, lam))
}

pub fn ngvi_infer<R: Rng + ?Sized>(
    problem: &TiltedProblem<'_>,
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<Inferred> {
    if cfg.epochs < 1 || cfg.ngvi_epochs < 1 || cfg.ngvi_samples < 1 {
        return Err(Error::InvalidArgument("ngvi needs positive epoch and sample counts".into()));
    }
    let mu = approximate_map(problem, cfg, rng)?;
    let (path, _) = ngvi_path(problem, &mu, cfg, rng)?;
    let s_final = &path.last().expect("ngvi_epochs >= 1").0;
    finish(problem, &mu, curvature_precision(problem, s_final))
}

/// Exact tilted inference for a Gaussian density client, projected onto the
/// diagonal family by moment matching.
pub fn exact_diag_infer(problem: &TiltedProblem<'_>) -> Result<Inferred> {
    let client = match problem.spec {
        ModelSpec::GaussianClient(g) => g,
        other => {
            return Err(Error::Unsupported {
                model: other.name(),
                op: "exact inference",
            })
        }
    };
    let d = client.mean().len();
    let p = client.precision() + DMatrix::from_diagonal(&DVector::from_column_slice(problem.cavity.lam()));
    let chol = p.cholesky().ok_or(Error::SingularTilted)?;
    let rhs = client.precision() * DVector::from_column_slice(client.mean())
        + DVector::from_column_slice(problem.cavity.eta());
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    let mu: Vec<f64> = mean.iter().cloned().collect();
    let lam = (0..d).map(|i| 1.0 / cov[(i, i)]).collect();
    finish(problem, &mu, lam)
}

/// Runs the backend selected in `cfg`.
pub fn infer<R: Rng + ?Sized>(
    problem: &TiltedProblem<'_>,
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<Inferred> {
    match cfg.backend {
        Backend::Exact => exact_diag_infer(problem),
        Backend::Mcmc => mcmc_infer(problem, cfg, rng),
        Backend::ScaledIdentity => scaled_identity_infer(problem, cfg, rng),
        Backend::Laplace => laplace_infer(problem, cfg, rng),
        Backend::Ngvi => ngvi_infer(problem, cfg, rng),
    }
}
