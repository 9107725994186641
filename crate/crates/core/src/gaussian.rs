//! Diagonal Gaussians stored in natural parameters.
//!
//! A [`MeanFieldGaussian`] holds the precision-weighted mean `eta = Σ⁻¹μ` and
//! the diagonal precision `lam = Σ⁻¹`. Products and quotients of densities are
//! then sums and differences of these vectors, which is all the message
//! passing machinery needs. Zero or negative precision entries are allowed:
//! cavities and update messages are routinely improper. Only the operations
//! that need a real density ([`MeanFieldGaussian::to_moments`],
//! [`MeanFieldGaussian::sample`], [`MeanFieldGaussian::mode`]) check
//! properness.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Diagonal Gaussian in natural parameters `(eta, lam)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct MeanFieldGaussian {
    eta: Vec<f64>,
    lam: Vec<f64>,
}

/// Mean and diagonal variance of a proper [`MeanFieldGaussian`].
#[derive(Debug, Clone, PartialEq)]
pub struct MomentsView {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// Signed difference of natural parameters; the client to server message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDelta {
    pub d_eta: Vec<f64>,
    pub d_lam: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    d: usize,
    eta: Vec<f64>,
    lam: Vec<f64>,
}

impl TryFrom<GaussianRepr> for MeanFieldGaussian {
    type Error = Error;

    fn try_from(r: GaussianRepr) -> Result<Self> {
        check_dim(r.d, r.eta.len())?;
        MeanFieldGaussian::new(r.eta, r.lam)
    }
}

impl From<MeanFieldGaussian> for GaussianRepr {
    fn from(g: MeanFieldGaussian) -> Self {
        GaussianRepr {
            d: g.dim(),
            eta: g.eta,
            lam: g.lam,
        }
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl MeanFieldGaussian {
    pub fn new(eta: Vec<f64>, lam: Vec<f64>) -> Result<Self> {
        if eta.is_empty() {
            return Err(Error::InvalidDimension(0));
        }
        check_dim(eta.len(), lam.len())?;
        if !all_finite(&eta) {
            return Err(Error::NonFinite("eta"));
        }
        if !all_finite(&lam) {
            return Err(Error::NonFinite("lam"));
        }
        Ok(Self { eta, lam })
    }

    /// The improper flat density: zero natural parameters, the identity for
    /// [`product`](Self::product).
    pub fn improper_uniform(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidDimension(0));
        }
        Ok(Self {
            eta: vec![0.0; d],
            lam: vec![0.0; d],
        })
    }

    /// Isotropic Gaussian centered at `mean` with scalar precision.
    pub fn isotropic(mean: &[f64], precision: f64) -> Result<Self> {
        Self::new(
            mean.iter().map(|m| m * precision).collect(),
            vec![precision; mean.len()],
        )
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn lam(&self) -> &[f64] {
        &self.lam
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.eta, self.lam)
    }

    pub fn is_proper(&self) -> bool {
        self.lam.iter().all(|&l| l > 0.0)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Self::new(
            self.eta.iter().zip(&other.eta).map(|(&a, &b)| f(a, b)).collect(),
            self.lam.iter().zip(&other.lam).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    /// Density product: natural parameters add.
    pub fn product(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Density quotient: natural parameters subtract. May be improper.
    pub fn quotient(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Raise the density to power `c`, i.e. scale both natural parameters.
    pub fn power(&self, c: f64) -> Result<Self> {
        Self::new(
            self.eta.iter().map(|x| c * x).collect(),
            self.lam.iter().map(|x| c * x).collect(),
        )
    }

    pub fn to_moments(&self) -> Result<MomentsView> {
        if !self.is_proper() {
            return Err(Error::NotProper);
        }
        Ok(MomentsView {
            mu: self.eta.iter().zip(&self.lam).map(|(e, l)| e / l).collect(),
            var: self.lam.iter().map(|l| 1.0 / l).collect(),
        })
    }

    pub fn from_moments(m: &MomentsView) -> Result<Self> {
        check_dim(m.mu.len(), m.var.len())?;
        if m.var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NotProper);
        }
        Self::new(
            m.mu.iter().zip(&m.var).map(|(mu, v)| mu / v).collect(),
            m.var.iter().map(|v| 1.0 / v).collect(),
        )
    }

    /// Posterior mode (equal to the mean for a Gaussian).
    pub fn mode(&self) -> Result<Vec<f64>> {
        if !self.is_proper() {
            return Err(Error::NotProper);
        }
        Ok(self.eta.iter().zip(&self.lam).map(|(e, l)| e / l).collect())
    }

    /// Draws `μ + σ ⊙ z` with `z` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        if !self.is_proper() {
            return Err(Error::NotProper);
        }
        Ok(self
            .eta
            .iter()
            .zip(&self.lam)
            .map(|(&e, &l)| {
                let z: f64 = rng.sample(StandardNormal);
                e / l + z / l.sqrt()
            })
            .collect())
    }

    /// Normalized log density at `x`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        if !self.is_proper() {
            return Err(Error::NotProper);
        }
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        Ok(self
            .eta
            .iter()
            .zip(&self.lam)
            .zip(x)
            .map(|((&e, &l), &xi)| {
                let r = xi - e / l;
                0.5 * (l.ln() - ln_2pi) - 0.5 * l * r * r
            })
            .sum())
    }

    /// Adds `scale * delta` in place.
    pub fn apply_delta(&mut self, delta: &GaussianDelta, scale: f64) -> Result<()> {
        check_dim(self.dim(), delta.dim())?;
        for (e, d) in self.eta.iter_mut().zip(&delta.d_eta) {
            *e += scale * d;
        }
        for (l, d) in self.lam.iter_mut().zip(&delta.d_lam) {
            *l += scale * d;
        }
        if !all_finite(&self.eta) || !all_finite(&self.lam) {
            return Err(Error::NonFinite("gaussian after delta"));
        }
        Ok(())
    }

    /// Clamps precision entries to at least `floor`; returns how many moved.
    /// A clamped coordinate keeps its mean when it had one (positive
    /// precision) and otherwise takes the mean from `fallback_mean`.
    pub fn floor_precision(&mut self, floor: f64, fallback_mean: &[f64]) -> usize {
        let mut count = 0;
        for (i, (e, l)) in self.eta.iter_mut().zip(self.lam.iter_mut()).enumerate() {
            if *l < floor {
                let mean = if *l > 0.0 { *e / *l } else { fallback_mean[i] };
                *l = floor;
                *e = floor * mean;
                count += 1;
            }
        }
        count
    }
}

impl GaussianDelta {
    pub fn new(d_eta: Vec<f64>, d_lam: Vec<f64>) -> Result<Self> {
        check_dim(d_eta.len(), d_lam.len())?;
        if !all_finite(&d_eta) || !all_finite(&d_lam) {
            return Err(Error::NonFinite("delta"));
        }
        Ok(Self { d_eta, d_lam })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            d_eta: vec![0.0; d],
            d_lam: vec![0.0; d],
        }
    }

    /// `new / old` as a natural-parameter difference.
    pub fn between(new: &MeanFieldGaussian, old: &MeanFieldGaussian) -> Result<Self> {
        let q = new.quotient(old)?;
        let (d_eta, d_lam) = q.into_parts();
        Ok(Self { d_eta, d_lam })
    }

    pub fn dim(&self) -> usize {
        self.d_eta.len()
    }

    /// The delta viewed as a (generally improper) Gaussian message.
    pub fn as_message(&self) -> Result<MeanFieldGaussian> {
        MeanFieldGaussian::new(self.d_eta.clone(), self.d_lam.clone())
    }
}
