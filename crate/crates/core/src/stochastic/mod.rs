//! Distributions used by the models: diagonal Gaussians, Bernoulli masks
//! with straight-through relaxed sampling, and the Gamma-Poisson
//! (negative binomial) count likelihood.

mod bernoulli;
mod gamma_poisson;
mod gaussian;

pub use bernoulli::{bernoulli_log_prob, bernoulli_st_from_noise, bernoulli_st_sample, logistic_noise, RelaxedBernoulli, StSample, PROB_CLAMP};
pub use gamma_poisson::{gamma_poisson_log_prob, nb_log_pmf, nb_log_pmf_grad, sample_gamma_poisson, sample_neg_binomial, GammaPoisson};
pub use gaussian::{
    gaussian_likelihood_log_prob, gaussian_log_prob, gaussian_rsample, normal_log_prob, standard_normal_vec,
    DiagGaussian,
};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
