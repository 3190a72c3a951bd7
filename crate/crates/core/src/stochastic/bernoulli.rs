use rand::Rng;

use crate::error::{Error, Result};
use crate::ndcore::{sigmoid, Graph, Scalar, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking
/// logs.
pub const PROB_CLAMP: f64 = 1e-6;

/// Bernoulli over a binary vector with a concrete (binary-Concrete)
/// relaxation at temperature `temperature`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedBernoulli<S> {
    pub logits: Vec<S>,
    pub temperature: S,
}

impl<S: Scalar> RelaxedBernoulli<S> {
    pub fn new(logits: Vec<S>, temperature: S) -> Result<Self> {
        if !(temperature > S::zero()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(RelaxedBernoulli { logits, temperature })
    }

    pub fn probs(&self) -> Vec<S> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }
}

/// `Σ m·ln p + (1-m)·ln(1-p)` with clamped probabilities.
pub fn bernoulli_log_prob<S: Scalar>(m: &[S], p: &[S]) -> Result<S> {
    if m.len() != p.len() {
        return Err(Error::Shape {
            op: "bernoulli_log_prob",
            lhs: vec![m.len()],
            rhs: vec![p.len()],
        });
    }
    let lo = S::lit(PROB_CLAMP);
    let hi = S::one() - lo;
    Ok(m.iter()
        .zip(p)
        .map(|(&mi, &pi)| {
            let pi = pi.max(lo).min(hi);
            mi * pi.ln() + (S::one() - mi) * (S::one() - pi).ln()
        })
        .sum())
}

/// Logistic noise `ln u − ln(1−u)`, the difference of two Gumbel draws.
pub fn logistic_noise<S: Scalar>(n: usize, rng: &mut impl Rng) -> Vec<S> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            S::lit(u.ln() - (-u).ln_1p())
        })
        .collect()
}

/// A straight-through mask draw.
#[derive(Clone, Copy, Debug)]
pub struct StSample {
    /// Hard {0,1} values forward, relaxed gradient backward.
    pub value: Var,
    /// The relaxed sample `σ((logits + noise)/τ)`.
    pub relaxed: Var,
}

/// Straight-through Gumbel-Softmax Bernoulli sample. The forward value is
/// `1[logits + L > 0]` (an exact Bernoulli(σ(logits)) draw); the backward
/// pass uses the gradient of `σ((logits + L)/τ)`.
pub fn bernoulli_st_sample<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    temperature: S,
    rng: &mut impl Rng,
) -> Result<StSample> {
    let shape = g.shape(logits).to_vec();
    let n = shape.iter().product();
    let noise = Tensor::new(shape, logistic_noise(n, rng))?;
    bernoulli_st_from_noise(g, logits, noise, temperature)
}

/// [`bernoulli_st_sample`] with caller-supplied logistic noise.
pub fn bernoulli_st_from_noise<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    noise: Tensor<S>,
    temperature: S,
) -> Result<StSample> {
    if !(temperature > S::zero()) {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    let noise = g.constant(noise);
    let pre = g.add(logits, noise)?;
    let hard = g.value(pre).map(|v| if v > S::zero() { S::one() } else { S::zero() });
    let scaled = g.scale(pre, S::one() / temperature);
    let relaxed = g.sigmoid(scaled);
    let value = g.straight_through(hard, relaxed)?;
    Ok(StSample { value, relaxed })
}
