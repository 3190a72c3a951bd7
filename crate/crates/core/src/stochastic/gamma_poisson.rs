use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};

use crate::error::{Error, Result};
use crate::ndcore::special::{digamma, ln_gamma};
use crate::ndcore::Scalar;

/// Gamma-Poisson over a count vector: per-feature mean `mean` and inverse
/// dispersion `inv_dispersion` (variance `μ + μ²/θ`).
#[derive(Clone, Debug, PartialEq)]
pub struct GammaPoisson<S> {
    pub mean: Vec<S>,
    pub inv_dispersion: Vec<S>,
}

impl<S: Scalar> GammaPoisson<S> {
    pub fn new(mean: Vec<S>, inv_dispersion: Vec<S>) -> Result<Self> {
        if mean.len() != inv_dispersion.len() {
            return Err(Error::Shape {
                op: "GammaPoisson",
                lhs: vec![mean.len()],
                rhs: vec![inv_dispersion.len()],
            });
        }
        Ok(GammaPoisson { mean, inv_dispersion })
    }

    pub fn log_prob(&self, x: &[S]) -> Result<S> {
        gamma_poisson_log_prob(x, self)
    }

    /// One draw per feature by inverting the negative-binomial CDF.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<S> {
        self.mean
            .iter()
            .zip(&self.inv_dispersion)
            .map(|(&m, &t)| S::lit(sample_neg_binomial(m.as_f64(), t.as_f64(), rng) as f64))
            .collect()
    }
}

fn small_int(x: f64) -> Option<usize> {
    ((0.0..64.0).contains(&x) && x == x.floor()).then_some(x as usize)
}

/// `ln Γ(x+θ) − ln Γ(θ)`, exact summation for small integer `x`.
fn ln_rising(x: f64, theta: f64) -> f64 {
    match small_int(x) {
        Some(k) => (0..k).map(|j| (theta + j as f64).ln()).sum(),
        None => ln_gamma(x + theta) - ln_gamma(theta),
    }
}

/// Negative-binomial log-pmf with mean `mu` and inverse dispersion `theta`:
/// `ln Γ(x+θ) − ln Γ(θ) − ln x! + θ ln(θ/(θ+μ)) + x ln(μ/(θ+μ))`.
pub fn nb_log_pmf(x: f64, mu: f64, theta: f64) -> f64 {
    let mut lp = ln_rising(x, theta) - ln_gamma(x + 1.0) - theta * (mu / theta).ln_1p();
    if x > 0.0 {
        lp -= x * (theta / mu).ln_1p();
    }
    lp
}

/// Partial derivatives of [`nb_log_pmf`] with respect to `(mu, theta)`.
pub fn nb_log_pmf_grad(x: f64, mu: f64, theta: f64) -> (f64, f64) {
    let d_mu = x / mu - (x + theta) / (theta + mu);
    let psi = match small_int(x) {
        Some(k) => (0..k).map(|j| 1.0 / (theta + j as f64)).sum(),
        None => digamma(x + theta) - digamma(theta),
    };
    let d_theta = psi - (mu / theta).ln_1p() + (mu - x) / (theta + mu);
    (d_mu, d_theta)
}

/// Summed negative-binomial log-pmf over features.
pub fn gamma_poisson_log_prob<S: Scalar>(x: &[S], dist: &GammaPoisson<S>) -> Result<S> {
    if x.len() != dist.mean.len() {
        return Err(Error::Shape {
            op: "gamma_poisson_log_prob",
            lhs: vec![x.len()],
            rhs: vec![dist.mean.len()],
        });
    }
    let mut total = 0.0;
    for ((&xi, &m), &t) in x.iter().zip(&dist.mean).zip(&dist.inv_dispersion) {
        let xi = xi.as_f64();
        if xi < 0.0 {
            return Err(Error::invalid(format!("negative count {xi}")));
        }
        if !(m > S::zero()) || !(t > S::zero()) {
            return Err(Error::invalid(format!("mean and inverse dispersion must be > 0, got {m}, {t}")));
        }
        total += nb_log_pmf(xi, m.as_f64(), t.as_f64());
    }
    Ok(S::lit(total))
}

/// Direct negative-binomial draw by sequential CDF inversion. Falls back to
/// the Gamma-Poisson mixture when `P(X = 0)` underflows.
pub fn sample_neg_binomial(mu: f64, theta: f64, rng: &mut impl Rng) -> u64 {
    let p0 = (-theta * (mu / theta).ln_1p()).exp();
    if p0 < 1e-300 || mu > 1e5 {
        return sample_gamma_poisson(mu, theta, rng);
    }
    let ratio = mu / (theta + mu);
    let u: f64 = rng.random();
    let (mut k, mut pk, mut cdf) = (0u64, p0, p0);
    while cdf < u {
        pk *= (k as f64 + theta) / (k as f64 + 1.0) * ratio;
        k += 1;
        cdf += pk;
        if pk == 0.0 && cdf < u {
            // rounding left a sliver of mass above the tail
            break;
        }
    }
    k
}

/// Two-stage draw: `λ ~ Gamma(θ, μ/θ)`, `x ~ Poisson(λ)`.
pub fn sample_gamma_poisson(mu: f64, theta: f64, rng: &mut impl Rng) -> u64 {
    let lambda = Gamma::new(theta, mu / theta).expect("gamma parameters").sample(rng);
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("poisson rate").sample(rng) as u64
}
