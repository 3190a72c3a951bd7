//! Variational families, the minibatch-reweighted ELBO, Adam, and the
//! training loop.

mod adam;
mod posterior;
mod train;

pub use adam::{Adam, AdamState};
pub use posterior::{
    elbo_minibatch, global_weights, local_terms, sample_globals, sample_posterior, Batch, BatchVars, ElboTerms,
    GlobalSample, LocalTerms, MaskGradient, ParticleNoise, PosteriorSample, PreparedData,
};
pub use train::{train, validation_elbo, BestParams, MetricRow, TrainConfig, TrainOutcome, TrainState};

use serde::{Deserialize, Serialize};

use crate::data::{EncoderStats, Observation, PerturbDataset};
use crate::error::{Error, Result};
use crate::models::{GenerativeConfig, GenerativeParams, Likelihood, ModelKind};
use crate::ndcore::{softplus_inv, Init, ParamId, ParamStore, ResidualMlp, Scalar, Tensor};

pub const MASK_LOGITS_NAME: &str = "q.mask_logits";
pub const EMB_MEAN_NAME: &str = "q.emb_mean";
pub const EMB_STD_NAME: &str = "q.emb_std_raw";
pub const EMB_NET_PREFIX: &str = "q.emb_net";
pub const ENCODER_PREFIX: &str = "q.encoder";

/// Initial standard deviation of mean-field embedding posteriors.
const INIT_EMB_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    MeanField,
    /// Embeddings conditioned on masks.
    CorrE,
    /// Basal encoder conditioned on the perturbation offset.
    CorrZ,
    CorrBoth,
}

impl InferenceMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "mean-field" | "meanfield" => Ok(InferenceMode::MeanField),
            "corr-e" => Ok(InferenceMode::CorrE),
            "corr-z" => Ok(InferenceMode::CorrZ),
            "corr-both" => Ok(InferenceMode::CorrBoth),
            other => Err(Error::invalid(format!("unknown inference mode {other:?}"))),
        }
    }

    pub fn correlated_embeddings(self) -> bool {
        matches!(self, InferenceMode::CorrE | InferenceMode::CorrBoth)
    }

    pub fn correlated_basal(self) -> bool {
        matches!(self, InferenceMode::CorrZ | InferenceMode::CorrBoth)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalConfig {
    pub mode: InferenceMode,
    pub encoder_hidden: Vec<usize>,
    pub embedding_hidden: Vec<usize>,
    /// Temperature of the relaxed mask samples.
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub generative: GenerativeConfig,
    pub variational: VariationalConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.generative.validate()?;
        let g = &self.generative;
        let v = &self.variational;
        if g.kind == ModelKind::Conditional && v.mode != InferenceMode::MeanField {
            return Err(Error::invalid(format!(
                "inference mode {:?} needs perturbation embeddings, which the conditional model lacks",
                v.mode
            )));
        }
        if g.kind == ModelKind::Sams && !(g.mask_prior > 0.0 && g.mask_prior < 1.0) {
            return Err(Error::invalid(format!(
                "mask_prior must lie strictly between 0 and 1 for inference, got {}",
                g.mask_prior
            )));
        }
        if !(v.temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", v.temperature)));
        }
        Ok(())
    }

    pub fn encoder_in_dim(&self) -> usize {
        let g = &self.generative;
        let mut d = g.n_features;
        if g.kind == ModelKind::Conditional {
            d += g.n_perturbations;
        } else if self.variational.mode.correlated_basal() {
            d += g.latent_dim;
        }
        d
    }
}

/// Handles of the variational parameters inside the shared store.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    pub mode: InferenceMode,
    pub temperature: f64,
    /// `T × D_z` (sparse model only).
    pub mask_logits: Option<ParamId>,
    /// `T × D_z` mean-field embedding means.
    pub emb_mean: Option<ParamId>,
    /// `T × D_z`; the standard deviation is `softplus` of this.
    pub emb_std_raw: Option<ParamId>,
    /// Maps `[m_t ; onehot(t)]` to `[mean ; raw std]`.
    pub emb_net: Option<ResidualMlp>,
    /// Maps encoder inputs to `[mean ; raw std]` of the basal state.
    pub encoder: ResidualMlp,
}

impl VariationalParams {
    pub fn build<S: Scalar>(store: &mut ParamStore<S>, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let g = &config.generative;
        let v = &config.variational;
        let (t, dz) = (g.n_perturbations, g.latent_dim);
        let encoder = ResidualMlp::build(
            store,
            ENCODER_PREFIX,
            config.encoder_in_dim(),
            &v.encoder_hidden,
            2 * dz,
            Init::KaimingUniform,
            seed,
        )?;
        let mut params = VariationalParams {
            mode: v.mode,
            temperature: v.temperature,
            mask_logits: None,
            emb_mean: None,
            emb_std_raw: None,
            emb_net: None,
            encoder,
        };
        if !g.kind.has_embeddings() {
            return Ok(params);
        }
        if g.kind == ModelKind::Sams {
            params.mask_logits = Some(store.add(MASK_LOGITS_NAME, Tensor::zeros(&[t, dz]), false)?);
        }
        if v.mode.correlated_embeddings() {
            params.emb_net = Some(ResidualMlp::build(
                store,
                EMB_NET_PREFIX,
                dz + t,
                &v.embedding_hidden,
                2 * dz,
                Init::KaimingUniform,
                seed.wrapping_add(1),
            )?);
        } else {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
            let mean: Vec<S> = crate::stochastic::standard_normal_vec(t * dz, &mut rng);
            let mean = Tensor::new(vec![t, dz], mean)?.map(|x| x * S::lit(INIT_EMB_STD));
            params.emb_mean = Some(store.add(EMB_MEAN_NAME, mean, false)?);
            let raw = S::lit(softplus_inv(INIT_EMB_STD));
            params.emb_std_raw = Some(store.add(EMB_STD_NAME, Tensor::full(&[t, dz], raw), false)?);
        }
        Ok(params)
    }
}

/// A generative model with its variational posterior and the data
/// normalization fixed at training time.
#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore<S>,
    pub generative: GenerativeParams,
    pub variational: VariationalParams,
    pub encoder_stats: EncoderStats,
    /// Median training library size (counts only).
    pub library_median: Option<f64>,
    pub feature_names: Vec<String>,
    pub perturbation_names: Vec<String>,
    pub control: Option<String>,
}

impl<S: Scalar> Model<S> {
    /// Builds freshly initialized parameters. Encoder statistics default to
    /// the identity transform.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let generative = GenerativeParams::build(&mut store, config.generative.clone(), seed)?;
        let variational = VariationalParams::build(&mut store, &config, seed.wrapping_add(1_000_003))?;
        let g = &config.generative;
        Ok(Model {
            encoder_stats: EncoderStats::identity(g.n_features),
            library_median: None,
            feature_names: (0..g.n_features).map(|j| format!("feature{j}")).collect(),
            perturbation_names: (0..g.n_perturbations).map(|t| format!("perturbation{t}")).collect(),
            control: None,
            config,
            seed,
            store,
            generative,
            variational,
        })
    }

    /// Builds a model sized for `ds`, fitting encoder statistics and the
    /// median library size on its training split.
    pub fn for_dataset(mut config: ModelConfig, ds: &PerturbDataset<S>, seed: u64) -> Result<Self> {
        let expected = match ds.observation {
            Observation::Counts => Likelihood::GammaPoisson,
            Observation::Real => Likelihood::Gaussian,
        };
        if config.generative.likelihood != expected {
            return Err(Error::invalid(format!(
                "likelihood {:?} does not fit {:?} observations",
                config.generative.likelihood, ds.observation
            )));
        }
        config.generative.n_features = ds.n_features();
        config.generative.n_perturbations = ds.n_perturbations();
        let mut model = Model::new(config, seed)?;
        model.encoder_stats = EncoderStats::fit(ds);
        model.library_median = ds.median_train_library().map(|v| v.as_f64());
        model.feature_names = ds.feature_names.clone();
        model.perturbation_names = ds.perturbation_names.clone();
        model.control = ds.control.clone();
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.config.generative.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.config.generative.latent_dim
    }

    pub fn n_perturbations(&self) -> usize {
        self.config.generative.n_perturbations
    }

    pub fn n_features(&self) -> usize {
        self.config.generative.n_features
    }

    /// Posterior mask probabilities `σ(logits)`: all ones for the ablation,
    /// `None` without embeddings.
    pub fn mask_probabilities(&self) -> Option<Tensor<S>> {
        let (t, dz) = (self.n_perturbations(), self.latent_dim());
        match (self.kind(), self.variational.mask_logits) {
            (ModelKind::Sams, Some(id)) => Some(self.store.get(id).map(crate::ndcore::sigmoid)),
            (ModelKind::Cpa, _) => Some(Tensor::ones(&[t, dz])),
            _ => None,
        }
    }

    pub fn perturbation_index(&self, name: &str) -> Result<usize> {
        self.perturbation_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownPerturbation(name.to_string()))
    }
}

/// Mixes a base seed with stream coordinates into an independent seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ stream) ^ index)
}

#[cfg(test)]
mod tests;
