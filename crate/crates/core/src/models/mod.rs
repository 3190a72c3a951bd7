//! Generative models sharing one decoder and likelihood: the sparse
//! additive mechanism shift VAE, its all-ones-mask ablation, and a
//! conditional VAE that decodes `[z ; d]`.

mod generative;

pub use generative::{
    compose_latent, decode_likelihood, decode_mean, decoder_input, log_joint, log_likelihood_rows,
    log_prior_basal_rows, log_prior_embedding_rows, log_prior_mask_rows, perturbation_offset, perturbation_offsets,
    sample_generative, JointTerms, ObservationModel,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Init, ParamId, ParamStore, ResidualMlp, Scalar, Tensor};

pub const DECODER_PREFIX: &str = "decoder";
pub const THETA_NAME: &str = "theta_d";
pub const LOG_SIGMA2_NAME: &str = "likelihood.log_sigma2";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sams,
    Cpa,
    Conditional,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sams" | "sams-vae" => Ok(ModelKind::Sams),
            "cpa" | "cpa-vae" => Ok(ModelKind::Cpa),
            "conditional" | "cvae" => Ok(ModelKind::Conditional),
            other => Err(Error::invalid(format!("unknown model kind {other:?}"))),
        }
    }

    /// Whether the model has global embeddings and masks.
    pub fn has_embeddings(self) -> bool {
        self != ModelKind::Conditional
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Negative binomial with mean `softmax(decoder(z)) · l`.
    GammaPoisson,
    /// `N(decoder(z), σ²)` with a learned per-feature variance.
    Gaussian,
}

impl Likelihood {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gamma_poisson" | "gamma-poisson" | "nb" | "counts" => Ok(Likelihood::GammaPoisson),
            "gaussian" | "normal" | "real" => Ok(Likelihood::Gaussian),
            other => Err(Error::invalid(format!("unknown likelihood {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeConfig {
    pub kind: ModelKind,
    pub likelihood: Likelihood,
    pub latent_dim: usize,
    pub n_features: usize,
    pub n_perturbations: usize,
    /// Mask prior probability.
    pub mask_prior: f64,
    /// Embedding prior variance.
    pub embedding_prior_var: f64,
    pub decoder_hidden: Vec<usize>,
}

impl GenerativeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.n_features == 0 {
            return Err(Error::invalid("latent_dim and n_features must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.mask_prior) {
            return Err(Error::invalid(format!("mask_prior must lie in [0, 1], got {}", self.mask_prior)));
        }
        if !(self.embedding_prior_var > 0.0 && self.embedding_prior_var.is_finite()) {
            return Err(Error::invalid(format!(
                "embedding_prior_var must be > 0, got {}",
                self.embedding_prior_var
            )));
        }
        Ok(())
    }

    pub fn decoder_in_dim(&self) -> usize {
        match self.kind {
            ModelKind::Conditional => self.latent_dim + self.n_perturbations,
            _ => self.latent_dim,
        }
    }
}

/// Handles of the generative parameters inside a shared [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeParams {
    pub config: GenerativeConfig,
    pub decoder: ResidualMlp,
    /// `ln θ_d`, `1 × D_x` (counts only).
    pub log_theta: Option<ParamId>,
    /// `ln σ²`, `1 × D_x` (Gaussian only).
    pub log_sigma2: Option<ParamId>,
}

impl GenerativeParams {
    /// Registers decoder and likelihood parameters. `θ_d` and `σ²` start at 1.
    pub fn build<S: Scalar>(store: &mut ParamStore<S>, config: GenerativeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let decoder = ResidualMlp::build(
            store,
            DECODER_PREFIX,
            config.decoder_in_dim(),
            &config.decoder_hidden,
            config.n_features,
            Init::KaimingUniform,
            seed,
        )?;
        let row = [1, config.n_features];
        let (log_theta, log_sigma2) = match config.likelihood {
            Likelihood::GammaPoisson => (Some(store.add(THETA_NAME, Tensor::zeros(&row), false)?), None),
            Likelihood::Gaussian => (None, Some(store.add(LOG_SIGMA2_NAME, Tensor::zeros(&row), false)?)),
        };
        Ok(GenerativeParams {
            config,
            decoder,
            log_theta,
            log_sigma2,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn n_perturbations(&self) -> usize {
        self.config.n_perturbations
    }

    pub fn inv_dispersion<S: Scalar>(&self, store: &ParamStore<S>) -> Option<Vec<S>> {
        self.log_theta.map(|id| store.get(id).data().iter().map(|v| v.exp()).collect())
    }

    pub fn noise_variance<S: Scalar>(&self, store: &ParamStore<S>) -> Option<Vec<S>> {
        self.log_sigma2.map(|id| store.get(id).data().iter().map(|v| v.exp()).collect())
    }
}

/// One joint draw of the latent variables. Embeddings and masks are absent
/// for the conditional model; the ablation's masks are all ones.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample<S> {
    /// `N × D_z` basal states.
    pub basal: Tensor<S>,
    /// `T × D_z`.
    pub embeddings: Option<Tensor<S>>,
    /// `T × D_z`, entries in {0, 1}.
    pub masks: Option<Tensor<S>>,
}
