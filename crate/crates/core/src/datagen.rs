//! Synthetic clients and datasets.
//!
//! * Gaussian toy clients drawn from a normal-inverse-Wishart hyper-prior.
//! * A fixed two-client fixture on which posterior averaging is visibly off.
//! * A label-skewed federated classification generator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DatasetShard, Example, GaussianClient, ModelSpec};

/// Attempts per client before [`sample_toy_clients`] gives up.
pub const MAX_RESAMPLES: usize = 100;

/// Ridge added to the random scale matrix.
pub const PSI_RIDGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct NiwParams {
    pub mu0: Vec<f64>,
    pub lambda: f64,
    pub nu: f64,
    pub psi: DMatrix<f64>,
}

impl NiwParams {
    /// `μ₀ = 0`, `λ = 0.2`, `ν = 7` with the given scale matrix.
    pub fn with_psi(psi: DMatrix<f64>) -> Result<Self> {
        let d = psi.nrows();
        let p = Self {
            mu0: vec![0.0; d],
            lambda: 0.2,
            nu: 7.0,
            psi,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::InvalidDimension(0));
        }
        if self.psi.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.psi.nrows(),
            });
        }
        if !(self.nu > (d + 1) as f64) {
            return Err(Error::InvalidArgument(format!("nu = {} must exceed d + 1", self.nu)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument("lambda must be positive".into()));
        }
        if self.psi.clone().cholesky().is_none() || (&self.psi - self.psi.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidArgument("psi must be symmetric positive definite".into()));
        }
        Ok(())
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `Ψ = AᵀA + 0.1·I` with standard normal entries in `A`.
pub fn random_psi<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| normal(rng));
    let mut psi = a.transpose() * a + DMatrix::identity(d, d) * PSI_RIDGE;
    psi = (&psi + psi.transpose()) * 0.5;
    psi
}

/// Draw from `W⁻¹(Ψ, ν)`: a Bartlett-sampled `W(Ψ⁻¹, ν)` draw, inverted.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(psi: &DMatrix<f64>, nu: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let d = psi.nrows();
    let psi_inv = psi
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("psi is singular".into()))?;
    let l = psi_inv
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("psi is not positive definite".into()))?
        .l();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(nu - i as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = normal(rng);
        }
    }
    let la = l * a;
    let w = &la * la.transpose();
    let sigma = w
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("singular Wishart draw".into()))?;
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// Toy clients plus the number of rejected draws.
#[derive(Debug, Clone)]
pub struct ToyClients {
    pub clients: Vec<GaussianClient>,
    pub resampled: usize,
}

impl ToyClients {
    pub fn specs(&self) -> Vec<ModelSpec> {
        self.clients.iter().cloned().map(ModelSpec::GaussianClient).collect()
    }
}

/// `Σ_k ~ W⁻¹(Ψ, ν)`, `μ_k ~ N(μ₀, Σ_k/λ)` for each of `k` clients.
pub fn sample_toy_clients<R: Rng + ?Sized>(niw: &NiwParams, k: usize, rng: &mut R) -> Result<ToyClients> {
    niw.validate()?;
    let d = niw.dim();
    let mut clients = Vec::with_capacity(k);
    let mut resampled = 0;
    for _ in 0..k {
        let mut attempt = 0;
        let client = loop {
            attempt += 1;
            if attempt > MAX_RESAMPLES {
                return Err(Error::InvalidArgument(format!(
                    "no positive definite covariance after {MAX_RESAMPLES} draws"
                )));
            }
            let sigma = sample_inverse_wishart(&niw.psi, niw.nu, rng)?;
            let Some(chol) = (&sigma / niw.lambda).cholesky() else {
                resampled += 1;
                continue;
            };
            let z = DVector::from_fn(d, |_, _| normal(rng));
            let mu = DVector::from_column_slice(&niw.mu0) + chol.l() * z;
            match GaussianClient::new(mu.iter().copied().collect(), sigma) {
                Ok(c) => break c,
                Err(_) => resampled += 1,
            }
        };
        clients.push(client);
    }
    Ok(ToyClients { clients, resampled })
}

/// Two correlated, anisotropic 2-d clients. The product of their diagonal
/// projections lands about 1.24 away from the true global mean.
pub fn fixed_toy_fixture() -> [GaussianClient; 2] {
    [
        GaussianClient::new(vec![1.0, 0.0], DMatrix::from_row_slice(2, 2, &[2.0, 1.8, 1.8, 2.0])).expect("SPD"),
        GaussianClient::new(vec![-1.0, 1.0], DMatrix::from_row_slice(2, 2, &[1.0, -0.6, -0.6, 0.5])).expect("SPD"),
    ]
}

/// Mode of `Π_k N(μ_k, Σ_k)`: `(Σ Σ_k⁻¹)⁻¹ Σ Σ_k⁻¹ μ_k`.
pub fn true_global_mean(clients: &[GaussianClient]) -> Result<Vec<f64>> {
    let first = clients
        .first()
        .ok_or_else(|| Error::InvalidArgument("no clients".into()))?;
    let d = first.mean().len();
    let mut p = DMatrix::zeros(d, d);
    let mut h = DVector::zeros(d);
    for c in clients {
        p += c.precision();
        h += c.precision() * DVector::from_column_slice(c.mean());
    }
    let sol = p.cholesky().ok_or(Error::NotProper)?.solve(&h);
    Ok(sol.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedClassConfig {
    pub n_clients: usize,
    pub examples_per_client: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Symmetric Dirichlet concentration of client label mixtures; small
    /// values give skewed clients, `inf` gives uniform ones.
    pub heterogeneity: f64,
    /// Probability that a label is replaced by a uniformly drawn one.
    pub label_noise: f64,
    /// Standard deviation of the class centres; features have unit noise.
    pub class_separation: f64,
    pub test_examples: usize,
    pub seed: u64,
}

impl Default for FedClassConfig {
    fn default() -> Self {
        Self {
            n_clients: 50,
            examples_per_client: 100,
            input_dim: 20,
            num_classes: 10,
            heterogeneity: 0.3,
            label_noise: 0.05,
            class_separation: 0.5,
            test_examples: 2000,
            seed: 0,
        }
    }
}

impl FedClassConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_clients", self.n_clients),
            ("examples_per_client", self.examples_per_client),
            ("input_dim", self.input_dim),
            ("test_examples", self.test_examples),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::ConfigField {
                    field: field.into(),
                    message: "must be positive".into(),
                });
            }
        }
        if self.num_classes < 2 {
            return Err(Error::ConfigField {
                field: "num_classes".into(),
                message: "need at least two classes".into(),
            });
        }
        if !(self.heterogeneity > 0.0) {
            return Err(Error::ConfigField {
                field: "heterogeneity".into(),
                message: "concentration must be positive".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::ConfigField {
                field: "label_noise".into(),
                message: "must lie in [0, 1]".into(),
            });
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::ConfigField {
                field: "class_separation".into(),
                message: "must be finite and non-negative".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedDataset {
    pub train: Vec<DatasetShard>,
    pub test: Vec<Example>,
    pub class_means: Vec<Vec<f64>>,
    /// Per-client label distributions.
    pub mixtures: Vec<Vec<f64>>,
}

fn symmetric_dirichlet<R: Rng + ?Sized>(alpha: f64, c: usize, rng: &mut R) -> Vec<f64> {
    if alpha.is_infinite() {
        return vec![1.0 / c as f64; c];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let g: Vec<f64> = (0..c).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        // Tiny concentrations can underflow every component.
        if s > 0.0 {
            return g.into_iter().map(|v| v / s).collect();
        }
    }
}

fn draw_label<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn draw_example<R: Rng + ?Sized>(class: usize, cfg: &FedClassConfig, means: &[Vec<f64>], rng: &mut R) -> Example {
    let x = means[class]
        .iter()
        .map(|m| m + normal(rng))
        .collect();
    let y = if cfg.label_noise > 0.0 && rng.random::<f64>() < cfg.label_noise {
        rng.random_range(0..cfg.num_classes)
    } else {
        class
    };
    Example { x, y }
}

/// Label-skewed Gaussian-cluster classification data.
pub fn gen_fed_classification<R: Rng + ?Sized>(cfg: &FedClassConfig, rng: &mut R) -> Result<FedDataset> {
    cfg.validate()?;
    let c = cfg.num_classes;
    let class_means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..cfg.input_dim)
                .map(|_| cfg.class_separation * normal(rng))
                .collect()
        })
        .collect();
    let mut mixtures = Vec::with_capacity(cfg.n_clients);
    let mut train = Vec::with_capacity(cfg.n_clients);
    for k in 0..cfg.n_clients {
        let mix = symmetric_dirichlet(cfg.heterogeneity, c, rng);
        let examples = (0..cfg.examples_per_client)
            .map(|_| {
                let class = draw_label(&mix, rng);
                draw_example(class, cfg, &class_means, rng)
            })
            .collect();
        train.push(DatasetShard::new(k, examples)?);
        mixtures.push(mix);
    }
    let test = (0..cfg.test_examples)
        .map(|_| {
            let class = rng.random_range(0..c);
            draw_example(class, cfg, &class_means, rng)
        })
        .collect();
    Ok(FedDataset {
        train,
        test,
        class_means,
        mixtures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn inverse_wishart_mean() {
        let mut rng = seed::rng(17);
        let psi = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let n = 10_000;
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let s = sample_inverse_wishart(&psi, 7.0, &mut rng).unwrap();
            assert!(s.clone().cholesky().is_some());
            acc += s;
        }
        let mean = acc / n as f64;
        let expected = &psi / 4.0;
        for i in 0..2 {
            assert!(((mean[(i, i)] - expected[(i, i)]) / expected[(i, i)]).abs() < 0.05, "{mean}");
        }
        assert!((mean[(0, 1)] - expected[(0, 1)]).abs() < 0.05 * expected[(0, 0)].max(expected[(1, 1)]));
    }

    #[test]
    fn toy_clients_shrink_to_mu0_for_large_lambda() {
        let mut rng = seed::rng(3);
        let mut niw = NiwParams::with_psi(DMatrix::identity(2, 2)).unwrap();
        niw.mu0 = vec![1.0, -2.0];
        niw.lambda = 1e12;
        let toy = sample_toy_clients(&niw, 5, &mut rng).unwrap();
        for c in &toy.clients {
            assert!((c.mean()[0] - 1.0).abs() < 1e-4);
            assert!((c.mean()[1] + 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn toy_clients_deterministic() {
        let psi = random_psi(2, &mut seed::rng(1));
        let niw = NiwParams::with_psi(psi).unwrap();
        let a = sample_toy_clients(&niw, 2, &mut seed::rng(9)).unwrap();
        let b = sample_toy_clients(&niw, 2, &mut seed::rng(9)).unwrap();
        assert_eq!(a.clients, b.clients);
    }

    #[test]
    fn niw_validation() {
        assert!(NiwParams::with_psi(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        let mut p = NiwParams::with_psi(DMatrix::identity(2, 2)).unwrap();
        p.nu = 3.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn fixture_fedpa_is_far_from_truth() {
        let fx = fixed_toy_fixture();
        let truth = true_global_mean(&fx).unwrap();
        // Brute force: product of the diagonal projections.
        let mut num = [0.0; 2];
        let mut den = [0.0; 2];
        for c in &fx {
            for i in 0..2 {
                num[i] += c.mean()[i] / c.cov()[(i, i)];
                den[i] += 1.0 / c.cov()[(i, i)];
            }
        }
        let pa = [num[0] / den[0], num[1] / den[1]];
        let dist = ((pa[0] - truth[0]).powi(2) + (pa[1] - truth[1]).powi(2)).sqrt();
        assert!(dist >= 0.1, "{dist}");
        assert_eq!(fixed_toy_fixture(), fx);
    }

    #[test]
    fn true_mean_of_identical_clients() {
        let c = GaussianClient::new(vec![0.5, 0.25], DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])).unwrap();
        let m = true_global_mean(&[c.clone(), c]).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] - 0.25).abs() < 1e-12);
    }

    fn small_cfg() -> FedClassConfig {
        FedClassConfig {
            n_clients: 7,
            examples_per_client: 40,
            input_dim: 3,
            num_classes: 4,
            test_examples: 50,
            ..Default::default()
        }
    }

    #[test]
    fn shard_sizes_and_partition() {
        let ds = gen_fed_classification(&small_cfg(), &mut seed::rng(0)).unwrap();
        assert_eq!(ds.train.len(), 7);
        let total: usize = ds.train.iter().map(|s| s.len()).sum();
        assert_eq!(total, 7 * 40);
        let ids: Vec<usize> = ds.train.iter().map(|s| s.client_id).collect();
        assert_eq!(ids, (0..7).collect::<Vec<_>>());
        assert_eq!(ds.test.len(), 50);
        assert!(ds.train.iter().flat_map(|s| &s.examples).all(|e| e.y < 4 && e.x.len() == 3));
    }

    #[test]
    fn uniform_labels_pass_chi_square() {
        let cfg = FedClassConfig {
            n_clients: 5,
            examples_per_client: 2000,
            num_classes: 4,
            heterogeneity: f64::INFINITY,
            label_noise: 0.0,
            ..small_cfg()
        };
        let ds = gen_fed_classification(&cfg, &mut seed::rng(4)).unwrap();
        // 0.99 quantile of chi-square with 3 degrees of freedom.
        let critical = 11.345;
        for shard in &ds.train {
            let mut counts = [0.0; 4];
            for e in &shard.examples {
                counts[e.y] += 1.0;
            }
            let expected = shard.len() as f64 / 4.0;
            let stat: f64 = counts.iter().map(|o| (o - expected).powi(2) / expected).sum();
            assert!(stat < critical, "client {}: {stat}", shard.client_id);
        }
    }

    #[test]
    fn low_concentration_skews_labels() {
        let cfg = FedClassConfig {
            heterogeneity: 0.05,
            ..small_cfg()
        };
        let ds = gen_fed_classification(&cfg, &mut seed::rng(2)).unwrap();
        let max_share: f64 = ds.mixtures.iter().map(|m| m.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / 7.0;
        assert!(max_share > 0.7, "{max_share}");
    }

    #[test]
    fn generation_is_deterministic_and_csv_roundtrips() {
        let a = gen_fed_classification(&small_cfg(), &mut seed::rng(5)).unwrap();
        let b = gen_fed_classification(&small_cfg(), &mut seed::rng(5)).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        crate::models::write_csv(&mut buf, &a.train).unwrap();
        let (back, n) = crate::models::read_csv(buf.as_slice()).unwrap();
        assert_eq!(n, 3);
        assert_eq!(back, a.train);
    }

    #[test]
    fn config_validation_names_field() {
        let cfg = FedClassConfig {
            heterogeneity: 0.0,
            ..small_cfg()
        };
        match cfg.validate() {
            Err(Error::ConfigField { field, .. }) => assert_eq!(field, "heterogeneity"),
            other => panic!("{other:?}"),
        }
    }
}
