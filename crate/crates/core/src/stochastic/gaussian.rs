use rand::Rng;
use rand_distr::StandardNormal;

use super::LN_2PI;
use crate::error::{Error, Result};
use crate::ndcore::{Graph, Scalar, Tensor, Var};

/// Diagonal Gaussian over a real vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian<S> {
    pub mean: Vec<S>,
    pub std: Vec<S>,
}

impl<S: Scalar> DiagGaussian<S> {
    pub fn new(mean: Vec<S>, std: Vec<S>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Shape {
                op: "DiagGaussian",
                lhs: vec![mean.len()],
                rhs: vec![std.len()],
            });
        }
        Ok(DiagGaussian { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![S::zero(); dim],
            std: vec![S::one(); dim],
        }
    }

    pub fn log_prob(&self, x: &[S]) -> Result<S> {
        gaussian_log_prob(x, self)
    }
}

/// Sum over dimensions of univariate normal log-densities.
pub fn gaussian_log_prob<S: Scalar>(x: &[S], dist: &DiagGaussian<S>) -> Result<S> {
    if x.len() != dist.mean.len() {
        return Err(Error::Shape {
            op: "gaussian_log_prob",
            lhs: vec![x.len()],
            rhs: vec![dist.mean.len()],
        });
    }
    let mut total = S::zero();
    for ((&xi, &m), &s) in x.iter().zip(&dist.mean).zip(&dist.std) {
        if !(s > S::zero()) {
            return Err(Error::invalid(format!("standard deviation must be positive, got {s}")));
        }
        let z = (xi - m) / s;
        total += S::lit(-0.5) * z * z - s.ln() - S::lit(0.5 * LN_2PI);
    }
    Ok(total)
}

/// Gaussian observation log-density with shared variance `sigma2` per
/// feature.
pub fn gaussian_likelihood_log_prob<S: Scalar>(x: &[S], mean: &[S], sigma2: &[S]) -> Result<S> {
    if sigma2.iter().any(|&v| !(v > S::zero())) {
        return Err(Error::invalid("variance must be positive"));
    }
    let dist = DiagGaussian::new(mean.to_vec(), sigma2.iter().map(|v| v.sqrt()).collect())?;
    gaussian_log_prob(x, &dist)
}

pub fn standard_normal_vec<S: Scalar>(n: usize, rng: &mut impl Rng) -> Vec<S> {
    (0..n).map(|_| S::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Elementwise normal log-density on the graph. `mean` and `std` broadcast
/// against `x`.
pub fn normal_log_prob<S: Scalar>(g: &mut Graph<S>, x: Var, mean: Var, std: Var) -> Result<Var> {
    let diff = g.sub(x, mean)?;
    let z = g.div(diff, std)?;
    let z2 = g.square(z);
    let quad = g.scale(z2, S::lit(-0.5));
    let log_std = g.log(std);
    let lp = g.sub(quad, log_std)?;
    Ok(g.add_scalar(lp, S::lit(-0.5 * LN_2PI)))
}

/// Reparameterized draw `mean + std ⊙ ε`, `ε ~ N(0, I)`.
pub fn gaussian_rsample<S: Scalar>(g: &mut Graph<S>, mean: Var, std: Var, rng: &mut impl Rng) -> Result<Var> {
    let shape = g.shape(mean).to_vec();
    let n = shape.iter().product();
    let eps = g.constant(Tensor::new(shape, standard_normal_vec(n, rng))?);
    let scaled = g.mul(std, eps)?;
    g.add(mean, scaled)
}
