use rand::Rng;

use super::{InferenceMode, Model};
use crate::data::PerturbDataset;
use crate::error::{Error, Result};
use crate::models::{
    decode_mean, decoder_input, log_likelihood_rows, log_prior_basal_rows, log_prior_embedding_rows,
    log_prior_mask_rows, LatentSample, ModelKind,
};
use crate::ndcore::{Bound, Graph, Scalar, Tensor, Var};
use crate::stochastic::{bernoulli_st_from_noise, logistic_noise, standard_normal_vec, LN_2PI};

/// How gradients reach the mask logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskGradient {
    /// Hard samples forward, relaxed gradient backward.
    #[default]
    StraightThrough,
    /// Relaxed samples forward and backward (smooth in the logits).
    Relaxed,
}

/// Observations, encoder inputs and dosages of a whole dataset in the form
/// consumed by the objective.
#[derive(Clone, Debug)]
pub struct PreparedData<S> {
    pub x: Tensor<S>,
    pub encoded: Tensor<S>,
    pub dosage: Tensor<S>,
    pub library: Option<Vec<S>>,
}

impl<S: Scalar> PreparedData<S> {
    /// Applies the model's stored encoder normalization to `ds`.
    pub fn new(model: &Model<S>, ds: &PerturbDataset<S>) -> Result<Self> {
        if ds.n_features() != model.n_features() || ds.n_perturbations() != model.n_perturbations() {
            return Err(Error::Shape {
                op: "PreparedData",
                lhs: vec![ds.n_features(), ds.n_perturbations()],
                rhs: vec![model.n_features(), model.n_perturbations()],
            });
        }
        Ok(PreparedData {
            x: ds.x.clone(),
            encoded: model.encoder_stats.apply(&ds.x),
            dosage: ds.dosage.clone(),
            library: ds.library_sizes.clone(),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.x.rows()
    }

    pub fn batch(&self, rows: &[usize]) -> Batch<S> {
        Batch {
            x: self.x.select_rows(rows),
            encoded: self.encoded.select_rows(rows),
            dosage: self.dosage.select_rows(rows),
            library: self
                .library
                .as_ref()
                .map(|l| Tensor::new(vec![rows.len(), 1], rows.iter().map(|&i| l[i]).collect()).expect("column")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub x: Tensor<S>,
    pub encoded: Tensor<S>,
    pub dosage: Tensor<S>,
    /// `b × 1` (counts only).
    pub library: Option<Tensor<S>>,
}

impl<S: Scalar> Batch<S> {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bind(&self, g: &mut Graph<S>) -> BatchVars {
        BatchVars {
            encoded: g.constant(self.encoded.clone()),
            dosage: g.constant(self.dosage.clone()),
            library: self.library.as_ref().map(|l| g.constant(l.clone())),
        }
    }
}

/// Graph constants of a [`Batch`].
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    pub encoded: Var,
    pub dosage: Var,
    pub library: Option<Var>,
}

/// The randomness of one particle: logistic mask noise and standard-normal
/// embedding noise (`T × D_z`), and basal noise (`b × D_z`, one row per
/// batch cell).
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleNoise<S> {
    pub mask: Tensor<S>,
    pub embedding: Tensor<S>,
    pub basal: Tensor<S>,
}

impl<S: Scalar> ParticleNoise<S> {
    pub fn draw(n_perturbations: usize, latent_dim: usize, cells: usize, rng: &mut impl Rng) -> Self {
        let td = n_perturbations * latent_dim;
        let shape = vec![n_perturbations, latent_dim];
        ParticleNoise {
            mask: Tensor::new(shape.clone(), logistic_noise(td, rng)).expect("shape"),
            embedding: Tensor::new(shape, standard_normal_vec(td, rng)).expect("shape"),
            basal: Tensor::new(vec![cells, latent_dim], standard_normal_vec(cells * latent_dim, rng)).expect("shape"),
        }
    }

    pub fn for_model(model: &Model<S>, cells: usize, rng: &mut impl Rng) -> Self {
        Self::draw(model.n_perturbations(), model.latent_dim(), cells, rng)
    }

    /// Same global noise, basal noise restricted to `rows`.
    pub fn select_cells(&self, rows: &[usize]) -> Self {
        ParticleNoise {
            mask: self.mask.clone(),
            embedding: self.embedding.clone(),
            basal: self.basal.select_rows(rows),
        }
    }
}

/// One draw of the global latents on the graph.
#[derive(Clone, Copy, Debug, Default)]
pub struct GlobalSample {
    pub masks: Option<Var>,
    pub embeddings: Option<Var>,
    /// `E ⊙ M`, `T × D_z`.
    pub table: Option<Var>,
    /// Per perturbation `log p(e_t) + log p(m_t)`, `T × 1`.
    pub log_prior: Option<Var>,
    /// Per perturbation `log q(m_t) + log q(e_t | m_t)`, `T × 1`.
    pub log_q: Option<Var>,
    /// `log_prior − log_q`.
    pub log_ratio: Option<Var>,
}

/// Splits `[mean ; raw]` network output into the mean and
/// `std = softplus(raw)`.
fn split_gaussian<S: Scalar>(g: &mut Graph<S>, out: Var, dim: usize) -> Result<(Var, Var)> {
    let mean = g.slice_cols(out, 0, dim)?;
    let raw = g.slice_cols(out, dim, 2 * dim)?;
    Ok((mean, g.softplus(raw)))
}

/// Reparameterized Gaussian draw with its per-row log-density, written in
/// terms of the standard-normal noise.
fn gaussian_draw<S: Scalar>(g: &mut Graph<S>, mean: Var, std: Var, eps: &Tensor<S>) -> Result<(Var, Var)> {
    let dim = eps.cols();
    let quad_rows: Vec<S> = (0..eps.rows())
        .map(|i| S::lit(-0.5) * eps.row(i).iter().map(|&e| e * e).sum::<S>())
        .collect();
    let ev = g.constant(eps.clone());
    let scaled = g.mul(std, ev)?;
    let z = g.add(mean, scaled)?;
    let log_std = g.log(std);
    let log_std_rows = g.sum_rows(log_std);
    let neg = g.neg(log_std_rows);
    let quad_v = g.constant(Tensor::new(vec![eps.rows(), 1], quad_rows)?);
    let lp = g.add(neg, quad_v)?;
    let lp = g.add_scalar(lp, S::lit(-0.5 * LN_2PI * dim as f64));
    Ok((z, lp))
}

/// Samples masks then embeddings from `q(M) q(E | M)`.
pub fn sample_globals<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    p: &Bound,
    noise: &ParticleNoise<S>,
    mask_gradient: MaskGradient,
) -> Result<GlobalSample> {
    let kind = model.kind();
    if !kind.has_embeddings() {
        return Ok(GlobalSample::default());
    }
    let (t, dz) = (model.n_perturbations(), model.latent_dim());
    let vp = &model.variational;
    let gcfg = &model.config.generative;
    let (masks, mask_terms) = match kind {
        ModelKind::Sams => {
            let logits = p[vp.mask_logits.ok_or_else(|| Error::invalid("missing mask logits"))?];
            let st = bernoulli_st_from_noise(g, logits, noise.mask.clone(), S::lit(vp.temperature))?;
            let m = match mask_gradient {
                MaskGradient::StraightThrough => st.value,
                MaskGradient::Relaxed => st.relaxed,
            };
            // log q(m) = m·ℓ + log σ(−ℓ)
            let ml = g.mul(m, logits)?;
            let neg = g.neg(logits);
            let ls = g.log_sigmoid(neg);
            let lq = g.add(ml, ls)?;
            let log_q = g.sum_rows(lq);
            let log_p = log_prior_mask_rows(g, m, gcfg.mask_prior);
            (m, Some((log_p, log_q)))
        }
        _ => (g.constant(Tensor::ones(&[t, dz])), None),
    };
    let (mean, std) = match (&vp.emb_net, vp.emb_mean, vp.emb_std_raw) {
        (Some(net), _, _) => {
            let onehot = g.constant(Tensor::eye(t));
            let input = g.hcat(&[masks, onehot])?;
            let out = net.forward(g, p, input)?;
            split_gaussian(g, out, dz)?
        }
        (None, Some(mean), Some(raw)) => (p[mean], g.softplus(p[raw])),
        _ => return Err(Error::invalid("embedding posterior parameters missing for this inference mode")),
    };
    let (e, log_q_e) = gaussian_draw(g, mean, std, &noise.embedding)?;
    let log_p_e = log_prior_embedding_rows(g, e, gcfg.embedding_prior_var);
    let (log_prior, log_q) = match mask_terms {
        Some((lp_m, lq_m)) => (g.add(log_p_e, lp_m)?, g.add(log_q_e, lq_m)?),
        None => (log_p_e, log_q_e),
    };
    let ratio = g.sub(log_prior, log_q)?;
    let table = g.mul(e, masks)?;
    Ok(GlobalSample {
        masks: Some(masks),
        embeddings: Some(e),
        table: Some(table),
        log_prior: Some(log_prior),
        log_q: Some(log_q),
        log_ratio: Some(ratio),
    })
}

/// Per-cell terms of one particle, each `b × 1`.
#[derive(Clone, Copy, Debug)]
pub struct LocalTerms {
    pub basal: Var,
    pub likelihood: Var,
    pub basal_prior: Var,
    pub basal_log_q: Var,
}

/// Encodes the batch, samples basal states and scores the observations.
pub fn local_terms<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    p: &Bound,
    vars: &BatchVars,
    x: &Tensor<S>,
    globals: &GlobalSample,
    basal_noise: &Tensor<S>,
) -> Result<LocalTerms> {
    let kind = model.kind();
    let dz = model.latent_dim();
    let offsets = match globals.table {
        Some(table) => Some(g.matmul(vars.dosage, table)?),
        None => None,
    };
    let input = match (kind, model.variational.mode, offsets) {
        (ModelKind::Conditional, _, _) => g.hcat(&[vars.encoded, vars.dosage])?,
        (_, InferenceMode::CorrZ | InferenceMode::CorrBoth, Some(o)) => g.hcat(&[vars.encoded, o])?,
        _ => vars.encoded,
    };
    let out = model.variational.encoder.forward(g, p, input)?;
    let (mean, std) = split_gaussian(g, out, dz)?;
    let (basal, basal_log_q) = gaussian_draw(g, mean, std, basal_noise)?;
    let basal_prior = log_prior_basal_rows(g, basal);
    let dec_in = decoder_input(g, kind, basal, offsets, vars.dosage)?;
    let decoded = decode_mean(g, &model.generative, p, dec_in)?;
    let likelihood = log_likelihood_rows(g, &model.generative, p, x, decoded, vars.library)?;
    Ok(LocalTerms {
        basal,
        likelihood,
        basal_prior,
        basal_log_q,
    })
}

/// `ñ_t / n_t` for the cells of `dosage`. Errors when a perturbation occurs
/// in the batch but never in training.
pub fn global_weights<S: Scalar>(dosage: &Tensor<S>, train_counts: &[usize]) -> Result<Vec<S>> {
    if dosage.cols() != train_counts.len() {
        return Err(Error::Shape {
            op: "global_weights",
            lhs: dosage.shape().to_vec(),
            rhs: vec![train_counts.len()],
        });
    }
    let mut batch_counts = vec![S::zero(); dosage.cols()];
    for i in 0..dosage.rows() {
        for (c, &d) in batch_counts.iter_mut().zip(dosage.row(i)) {
            if d > S::zero() {
                *c += S::one();
            }
        }
    }
    batch_counts
        .iter()
        .zip(train_counts)
        .enumerate()
        .map(|(t, (&b, &n))| {
            if b == S::zero() {
                Ok(S::zero())
            } else if n == 0 {
                Err(Error::invalid(format!("perturbation {t} occurs in the batch but has no training cells")))
            } else {
                Ok(b / S::lit(n as f64))
            }
        })
        .collect()
}

/// Particle-averaged scalar pieces of the minibatch objective.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    /// The minibatch ELBO `l_mb`.
    pub objective: Var,
    pub likelihood: Var,
    pub basal_prior: Var,
    pub basal_log_q: Var,
    /// Reweighted global term.
    pub global: Var,
}

impl ElboTerms {
    /// The terms with their diagnostic names.
    pub fn named(&self) -> [(&'static str, Var); 4] {
        [
            ("likelihood", self.likelihood),
            ("basal_prior", self.basal_prior),
            ("basal_log_q", self.basal_log_q),
            ("global", self.global),
        ]
    }
}

/// `(1/P) Σ_p [Σ_t w_t·(log p(e_t) + log p(m_t) − log q(m_t, e_t)) +
/// Σ_i (log p(x_i | z_i) + log p(z_b,i) − log q(z_b,i | ·))]` with
/// `w_t = ñ_t / n_t` supplied by [`global_weights`].
pub fn elbo_minibatch<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    p: &Bound,
    batch: &Batch<S>,
    noise: &[ParticleNoise<S>],
    weights: &[S],
    mask_gradient: MaskGradient,
) -> Result<ElboTerms> {
    if noise.is_empty() {
        return Err(Error::invalid("at least one particle is required"));
    }
    if weights.len() != model.n_perturbations() {
        return Err(Error::Shape {
            op: "elbo_minibatch",
            lhs: vec![weights.len()],
            rhs: vec![model.n_perturbations()],
        });
    }
    let vars = batch.bind(g);
    let w = g.constant(Tensor::new(vec![weights.len(), 1], weights.to_vec())?);
    let mut acc: Option<[Var; 5]> = None;
    for particle in noise {
        if particle.basal.rows() != batch.len() {
            return Err(Error::Shape {
                op: "elbo_minibatch",
                lhs: particle.basal.shape().to_vec(),
                rhs: vec![batch.len(), model.latent_dim()],
            });
        }
        let globals = sample_globals(g, model, p, particle, mask_gradient)?;
        let local = local_terms(g, model, p, &vars, &batch.x, &globals, &particle.basal)?;
        let global = match globals.log_ratio {
            Some(r) => {
                let wr = g.mul(w, r)?;
                g.sum(wr)
            }
            None => g.constant(Tensor::scalar(S::zero())),
        };
        let lik = g.sum(local.likelihood);
        let prior = g.sum(local.basal_prior);
        let log_q = g.sum(local.basal_log_q);
        let a = g.add(lik, prior)?;
        let b = g.sub(a, log_q)?;
        let total = g.add(global, b)?;
        let parts = [total, lik, prior, log_q, global];
        acc = Some(match acc {
            None => parts,
            Some(prev) => {
                let mut next = prev;
                for (n, (&x, &y)) in next.iter_mut().zip(prev.iter().zip(&parts)) {
                    *n = g.add(x, y)?;
                }
                next
            }
        });
    }
    let inv = S::one() / S::lit(noise.len() as f64);
    let [total, lik, prior, log_q, global] = acc.expect("at least one particle").map(|v| g.scale(v, inv));
    Ok(ElboTerms {
        objective: total,
        likelihood: lik,
        basal_prior: prior,
        basal_log_q: log_q,
        global,
    })
}

/// A posterior draw with its joint `log q`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSample<S> {
    pub latents: LatentSample<S>,
    pub log_q: S,
}

/// Draws `M → E → Z_b` from the variational posterior for the cells of
/// `batch`, with hard masks.
pub fn sample_posterior<S: Scalar>(model: &Model<S>, batch: &Batch<S>, rng: &mut impl Rng) -> Result<PosteriorSample<S>> {
    let noise = ParticleNoise::for_model(model, batch.len(), rng);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let vars = batch.bind(&mut g);
    let globals = sample_globals(&mut g, model, &p, &noise, MaskGradient::StraightThrough)?;
    let local = local_terms(&mut g, model, &p, &vars, &batch.x, &globals, &noise.basal)?;
    let mut log_q = g.value(local.basal_log_q).sum();
    if let Some(lq) = globals.log_q {
        log_q += g.value(lq).sum();
    }
    let latents = LatentSample {
        basal: g.value(local.basal).clone(),
        embeddings: globals.embeddings.map(|v| g.value(v).clone()),
        masks: globals.masks.map(|v| g.value(v).clone()),
    };
    Ok(PosteriorSample { latents, log_q })
}
