//! Client likelihoods over a flat parameter vector.
//!
//! Parameter layouts (row-major, `n` inputs, `h` hidden units, `c` classes):
//!
//! * logistic: `W` (`c × n`), then `b` (`c`). `d = c·(n+1)`.
//! * mlp: `W1` (`h × n`), `b1` (`h`), `W2` (`c × h`), `b2` (`c`), tanh
//!   hidden layer. `d = h·(n+1) + c·(h+1)`.
//! * gaussian-client: `θ` itself, `d = dim(μ_k)`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dim, Error, Result};

/// Label count up to which the Fisher expectation over labels is enumerated.
pub const FISHER_ENUMERATION_MAX_CLASSES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    pub client_id: usize,
    pub examples: Vec<Example>,
}

impl DatasetShard {
    pub fn new(client_id: usize, examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Dataset(format!("client {client_id} has no examples")));
        }
        Ok(Self {
            client_id,
            examples,
        })
    }

    /// A shard with no examples, used by density clients.
    pub fn empty(client_id: usize) -> Self {
        Self {
            client_id,
            examples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// A client whose likelihood is a fixed Gaussian density over θ.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClient {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    precision: DMatrix<f64>,
}

impl GaussianClient {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidDimension(0));
        }
        check_dim(d, cov.nrows())?;
        check_dim(d, cov.ncols())?;
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::InvalidArgument("client covariance is not symmetric".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("client covariance is not positive definite".into()))?;
        let precision = chol.inverse();
        Ok(Self {
            mean,
            cov,
            precision,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Logistic {
        input_dim: usize,
        num_classes: usize,
    },
    Mlp {
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
    },
    GaussianClient(GaussianClient),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Logistic { .. } => "logistic",
            ModelSpec::Mlp { .. } => "mlp",
            ModelSpec::GaussianClient(_) => "gaussian-client",
        }
    }

    pub fn param_dim(&self) -> usize {
        match *self {
            ModelSpec::Logistic {
                input_dim,
                num_classes,
            } => num_classes * (input_dim + 1),
            ModelSpec::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => hidden_dim * (input_dim + 1) + num_classes * (hidden_dim + 1),
            ModelSpec::GaussianClient(ref g) => g.mean.len(),
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, ModelSpec::GaussianClient(_))
    }

    pub fn num_classes(&self) -> Option<usize> {
        match *self {
            ModelSpec::Logistic { num_classes, .. } | ModelSpec::Mlp { num_classes, .. } => {
                Some(num_classes)
            }
            ModelSpec::GaussianClient(_) => None,
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match *self {
            ModelSpec::Logistic { input_dim, .. } | ModelSpec::Mlp { input_dim, .. } => {
                Some(input_dim)
            }
            ModelSpec::GaussianClient(_) => None,
        }
    }

    /// Number of observations backing the client likelihood. A density
    /// client counts as a single observation.
    pub fn data_size(&self, shard: &DatasetShard) -> usize {
        match self {
            ModelSpec::GaussianClient(_) => 1,
            _ => shard.len(),
        }
    }

    pub fn validate_example(&self, ex: &Example) -> Result<()> {
        let (n, c) = match (self.input_dim(), self.num_classes()) {
            (Some(n), Some(c)) => (n, c),
            _ => return Ok(()),
        };
        check_dim(n, ex.x.len())?;
        if ex.y >= c {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {c} classes",
                ex.y
            )));
        }
        Ok(())
    }

    fn classifier(&self, op: &'static str) -> Result<()> {
        if self.is_classifier() {
            Ok(())
        } else {
            Err(Error::Unsupported {
                model: self.name(),
                op,
            })
        }
    }
}

/// Intermediate values of a forward pass, reused by backprop.
struct Forward {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn forward(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Forward {
    match *spec {
        ModelSpec::Logistic {
            input_dim: n,
            num_classes: c,
        } => {
            let (w, b) = theta.split_at(c * n);
            let logits = (0..c)
                .map(|k| b[k] + dot(&w[k * n..(k + 1) * n], x))
                .collect();
            Forward {
                hidden: Vec::new(),
                logits,
            }
        }
        ModelSpec::Mlp {
            input_dim: n,
            hidden_dim: h,
            num_classes: c,
        } => {
            let (w1, rest) = theta.split_at(h * n);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            let hidden: Vec<f64> = (0..h)
                .map(|i| (b1[i] + dot(&w1[i * n..(i + 1) * n], x)).tanh())
                .collect();
            let logits = (0..c)
                .map(|k| b2[k] + dot(&w2[k * h..(k + 1) * h], &hidden))
                .collect();
            Forward { hidden, logits }
        }
        ModelSpec::GaussianClient(_) => unreachable!("density clients have no forward pass"),
    }
}

/// Adds `scale · Jᵀ dlogits` to `out`, where `J` is the Jacobian of the logits
/// with respect to θ at the cached forward pass.
fn backprop(
    spec: &ModelSpec,
    theta: &[f64],
    x: &[f64],
    fwd: &Forward,
    dlogits: &[f64],
    scale: f64,
    out: &mut [f64],
) {
    match *spec {
        ModelSpec::Logistic {
            input_dim: n,
            num_classes: c,
        } => {
            let (gw, gb) = out.split_at_mut(c * n);
            for k in 0..c {
                let s = scale * dlogits[k];
                if s == 0.0 {
                    continue;
                }
                for (g, xi) in gw[k * n..(k + 1) * n].iter_mut().zip(x) {
                    *g += s * xi;
                }
                gb[k] += s;
            }
        }
        ModelSpec::Mlp {
            input_dim: n,
            hidden_dim: h,
            num_classes: c,
        } => {
            let w2 = &theta[h * (n + 1)..h * (n + 1) + c * h];
            let (gw1, rest) = out.split_at_mut(h * n);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            let mut dhidden = vec![0.0; h];
            for k in 0..c {
                let s = scale * dlogits[k];
                if s == 0.0 {
                    continue;
                }
                for i in 0..h {
                    gw2[k * h + i] += s * fwd.hidden[i];
                    dhidden[i] += s * w2[k * h + i];
                }
                gb2[k] += s;
            }
            for i in 0..h {
                let dpre = dhidden[i] * (1.0 - fwd.hidden[i] * fwd.hidden[i]);
                if dpre == 0.0 {
                    continue;
                }
                for (g, xi) in gw1[i * n..(i + 1) * n].iter_mut().zip(x) {
                    *g += dpre * xi;
                }
                gb1[i] += dpre;
            }
        }
        ModelSpec::GaussianClient(_) => unreachable!("density clients have no forward pass"),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

fn check_batch(spec: &ModelSpec, theta: &[f64], batch: &[Example]) -> Result<()> {
    check_dim(spec.param_dim(), theta.len())?;
    for ex in batch {
        spec.validate_example(ex)?;
    }
    Ok(())
}

/// `½ (θ − μ)ᵀ P (θ − μ)` and its gradient `P (θ − μ)`.
fn gaussian_client_terms(g: &GaussianClient, theta: &[f64]) -> (f64, Vec<f64>) {
    let r = DVector::from_iterator(theta.len(), theta.iter().zip(&g.mean).map(|(t, m)| t - m));
    let pr = &g.precision * &r;
    (0.5 * r.dot(&pr), pr.iter().cloned().collect())
}

/// Negative log likelihood summed over `batch`. For a density client the
/// batch is ignored and the Gaussian energy is returned (no normalizer).
pub fn nll(spec: &ModelSpec, theta: &[f64], batch: &[Example]) -> Result<f64> {
    check_batch(spec, theta, batch)?;
    if let ModelSpec::GaussianClient(g) = spec {
        return Ok(gaussian_client_terms(g, theta).0);
    }
    Ok(batch
        .iter()
        .map(|ex| -log_softmax(&forward(spec, theta, &ex.x).logits)[ex.y])
        .sum())
}

pub fn grad_nll(spec: &ModelSpec, theta: &[f64], batch: &[Example]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; theta.len()];
    add_grad_nll(spec, theta, batch, 1.0, &mut out)?;
    Ok(out)
}

/// Accumulates `scale · ∇ nll` into `out`.
pub(crate) fn add_grad_nll(
    spec: &ModelSpec,
    theta: &[f64],
    batch: &[Example],
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    check_batch(spec, theta, batch)?;
    check_dim(theta.len(), out.len())?;
    if let ModelSpec::GaussianClient(g) = spec {
        for (o, gi) in out.iter_mut().zip(gaussian_client_terms(g, theta).1) {
            *o += scale * gi;
        }
        return Ok(());
    }
    for ex in batch {
        let fwd = forward(spec, theta, &ex.x);
        // d(−log p_y)/d logits = p − e_y
        let mut dlogits = softmax(&fwd.logits);
        dlogits[ex.y] -= 1.0;
        backprop(spec, theta, &ex.x, &fwd, &dlogits, scale, out);
    }
    Ok(())
}

pub fn predict_proba(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    spec.classifier("predict_proba")?;
    check_dim(spec.param_dim(), theta.len())?;
    check_dim(spec.input_dim().unwrap_or(0), x.len())?;
    Ok(softmax(&forward(spec, theta, x).logits))
}

/// Per-example diagonal Fisher, with labels drawn from the model's own
/// predictive distribution. For up to [`FISHER_ENUMERATION_MAX_CLASSES`]
/// classes the expectation over labels is computed exactly; otherwise one
/// label per example is sampled from `rng`.
pub fn diag_fisher<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta: &[f64],
    shard: &DatasetShard,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let c = spec.num_classes().unwrap_or(0);
    if c <= FISHER_ENUMERATION_MAX_CLASSES {
        fisher_impl(spec, theta, shard, FisherLabels::Enumerate, rng)
    } else {
        fisher_impl(spec, theta, shard, FisherLabels::Sample(1), rng)
    }
}

/// Monte-Carlo diagonal Fisher with `draws` sampled labels per example.
pub fn diag_fisher_sampled<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta: &[f64],
    shard: &DatasetShard,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be positive".into()));
    }
    fisher_impl(spec, theta, shard, FisherLabels::Sample(draws), rng)
}

enum FisherLabels {
    Enumerate,
    Sample(usize),
}

fn fisher_impl<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta: &[f64],
    shard: &DatasetShard,
    labels: FisherLabels,
    rng: &mut R,
) -> Result<Vec<f64>> {
    spec.classifier("diag_fisher")?;
    if shard.is_empty() {
        return Err(Error::Dataset("diag_fisher on an empty shard".into()));
    }
    check_batch(spec, theta, &shard.examples)?;
    let d = theta.len();
    let mut fisher = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut dlogits = Vec::new();
    for ex in &shard.examples {
        let fwd = forward(spec, theta, &ex.x);
        let p = softmax(&fwd.logits);
        let mut accumulate = |y: usize, weight: f64, g: &mut Vec<f64>| {
            // ∇ log p(y) = Jᵀ (e_y − p)
            dlogits.clear();
            dlogits.extend(p.iter().map(|pk| -pk));
            dlogits[y] += 1.0;
            g.iter_mut().for_each(|v| *v = 0.0);
            backprop(spec, theta, &ex.x, &fwd, &dlogits, 1.0, g);
            for (f, gi) in fisher.iter_mut().zip(g.iter()) {
                *f += weight * gi * gi;
            }
        };
        match labels {
            FisherLabels::Enumerate => {
                for (y, &py) in p.iter().enumerate() {
                    accumulate(y, py, &mut g);
                }
            }
            FisherLabels::Sample(draws) => {
                for _ in 0..draws {
                    let y = sample_categorical(&p, rng);
                    accumulate(y, 1.0 / draws as f64, &mut g);
                }
            }
        }
    }
    let n = shard.len() as f64;
    fisher.iter_mut().for_each(|f| *f /= n);
    Ok(fisher)
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Per-observation diagonal curvature used by the Laplace and NGVI
/// covariance estimators. Classifiers use [`diag_fisher`]; a density client
/// is a single Gaussian observation whose Fisher information is the diagonal
/// of its precision matrix.
pub(crate) fn curvature<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta: &[f64],
    shard: &DatasetShard,
    rng: &mut R,
) -> Result<Vec<f64>> {
    match spec {
        ModelSpec::GaussianClient(g) => {
            check_dim(spec.param_dim(), theta.len())?;
            Ok(g.precision.diagonal().iter().cloned().collect())
        }
        _ => diag_fisher(spec, theta, shard, rng),
    }
}

/// Reads the dataset CSV format: header `f0,…,f{n−1},label,client_id`, one
/// example per row. Shards are returned ordered by client id.
pub fn read_csv<R: Read>(reader: R) -> Result<(Vec<DatasetShard>, usize)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = headers.len();
    if cols < 3 {
        return Err(Error::Dataset("expected at least f0,label,client_id columns".into()));
    }
    let n = cols - 2;
    for (i, h) in headers.iter().take(n).enumerate() {
        if h != format!("f{i}") {
            return Err(Error::Dataset(format!("column {i} must be named f{i}, found {h:?}")));
        }
    }
    if &headers[n] != "label" || &headers[n + 1] != "client_id" {
        return Err(Error::Dataset("last two columns must be label,client_id".into()));
    }
    let mut by_client: std::collections::BTreeMap<usize, Vec<Example>> = Default::default();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let parse_err = |what: &str, v: &str| Error::Dataset(format!("line {line}: bad {what} {v:?}"));
        let x = rec
            .iter()
            .take(n)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|f| f.is_finite())
                    .ok_or_else(|| parse_err("feature", v))
            })
            .collect::<Result<Vec<_>>>()?;
        let y = rec[n].trim().parse::<usize>().map_err(|_| parse_err("label", &rec[n]))?;
        let cid = rec[n + 1]
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_err("client_id", &rec[n + 1]))?;
        by_client.entry(cid).or_default().push(Example { x, y });
    }
    let shards = by_client
        .into_iter()
        .map(|(client_id, examples)| DatasetShard {
            client_id,
            examples,
        })
        .collect();
    Ok((shards, n))
}

pub fn load_csv(path: &Path) -> Result<(Vec<DatasetShard>, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    read_csv(file)
}

/// Checks every example against `spec` (feature width and label range).
pub fn validate_shards(spec: &ModelSpec, shards: &[DatasetShard]) -> Result<()> {
    for s in shards {
        for ex in &s.examples {
            spec.validate_example(ex)
                .map_err(|e| Error::Dataset(format!("client {}: {e}", s.client_id)))?;
        }
    }
    Ok(())
}

pub fn write_csv<W: Write>(writer: W, shards: &[DatasetShard]) -> Result<()> {
    let n = shards
        .iter()
        .flat_map(|s| s.examples.first())
        .map(|e| e.x.len())
        .next()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..n).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    header.push("client_id".into());
    w.write_record(&header)?;
    for s in shards {
        for ex in &s.examples {
            check_dim(n, ex.x.len())?;
            let mut rec: Vec<String> = ex.x.iter().map(|v| v.to_string()).collect();
            rec.push(ex.y.to_string());
            rec.push(s.client_id.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
