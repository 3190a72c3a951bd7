//! Fixtures shared by unit tests.

use crate::data::{Observation, PerturbDataset};
use crate::inference::{InferenceMode, Model, ModelConfig, VariationalConfig};
use crate::models::{sample_generative, GenerativeConfig, Likelihood, ModelKind};
use crate::ndcore::Tensor;

pub fn model_config(kind: ModelKind, likelihood: Likelihood, mode: InferenceMode, t: usize, dz: usize, dx: usize) -> ModelConfig {
    ModelConfig {
        generative: GenerativeConfig {
            kind,
            likelihood,
            latent_dim: dz,
            n_features: dx,
            n_perturbations: t,
            mask_prior: 0.2,
            embedding_prior_var: 1.5,
            decoder_hidden: vec![5],
        },
        variational: VariationalConfig {
            mode,
            encoder_hidden: vec![4],
            embedding_hidden: vec![4],
            temperature: 1.0,
        },
    }
}

pub fn one_hot(n: usize, t: usize) -> Tensor<f64> {
    let mut d = Tensor::zeros(&[n, t]);
    for i in 0..n {
        d.set(i, i % t, 1.0);
    }
    d
}

/// A model and a dataset drawn from its own generative process.
pub fn fixture(cfg: ModelConfig, n: usize, seed: u64) -> (Model<f64>, PerturbDataset<f64>) {
    let model = Model::<f64>::new(cfg, seed).unwrap();
    let g = &model.config.generative;
    let d = one_hot(n, g.n_perturbations);
    let counts = g.likelihood == Likelihood::GammaPoisson;
    let lib = vec![60.0; n];
    let (_, mut x) = sample_generative(&model.store, &model.generative, &d, counts.then_some(&lib[..]), seed).unwrap();
    if counts {
        // keep every row non-empty
        for i in 0..n {
            x.row_mut(i)[0] += 1.0;
        }
    }
    let obs = if counts { Observation::Counts } else { Observation::Real };
    let names = |p: &str, k: usize| (0..k).map(|j| format!("{p}{j}")).collect::<Vec<_>>();
    let ds = PerturbDataset::new(x, d, names("g", g.n_features), names("p", g.n_perturbations), obs).unwrap();
    let mut model = model;
    model.encoder_stats = crate::data::EncoderStats::fit(&ds);
    model.library_median = ds.median_train_library();
    model.feature_names = ds.feature_names.clone();
    model.perturbation_names = ds.perturbation_names.clone();
    (model, ds)
}
