use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GenerativeParams, LatentSample, Likelihood, ModelKind};
use crate::error::{Error, Result};
use crate::ndcore::{softmax_in_place, Bound, Graph, ParamStore, Scalar, Tensor, Var};
use crate::stochastic::{normal_log_prob, sample_neg_binomial, standard_normal_vec, LN_2PI};

/// `z^p = Σ_t d_t (e_t ⊙ m_t)` for one dosage row.
pub fn perturbation_offset<S: Scalar>(dosage: &[S], embeddings: &Tensor<S>, masks: &Tensor<S>) -> Result<Vec<S>> {
    if embeddings.shape() != masks.shape() || embeddings.rows() != dosage.len() {
        return Err(Error::Shape {
            op: "perturbation_offset",
            lhs: vec![dosage.len()],
            rhs: embeddings.shape().to_vec(),
        });
    }
    let mut out = vec![S::zero(); embeddings.cols()];
    for (t, &d) in dosage.iter().enumerate() {
        if d == S::zero() {
            continue;
        }
        for ((o, &e), &m) in out.iter_mut().zip(embeddings.row(t)).zip(masks.row(t)) {
            *o += d * e * m;
        }
    }
    Ok(out)
}

/// Batched offsets on the graph: `dosage (b×T) · (E ⊙ M)`.
pub fn perturbation_offsets<S: Scalar>(g: &mut Graph<S>, dosage: Var, embeddings: Var, masks: Var) -> Result<Var> {
    let table = g.mul(embeddings, masks)?;
    g.matmul(dosage, table)
}

/// Latent state `z_b + z^p`.
pub fn compose_latent<S: Scalar>(g: &mut Graph<S>, basal: Var, offsets: Var) -> Result<Var> {
    g.add(basal, offsets)
}

/// Decoder input: the composed latent, or `[z ; d]` for the conditional
/// model.
pub fn decoder_input<S: Scalar>(
    g: &mut Graph<S>,
    kind: ModelKind,
    basal: Var,
    offsets: Option<Var>,
    dosage: Var,
) -> Result<Var> {
    match (kind, offsets) {
        (ModelKind::Conditional, _) => g.hcat(&[basal, dosage]),
        (_, Some(o)) => compose_latent(g, basal, o),
        (_, None) => Ok(basal),
    }
}

/// Decoder head: `softmax` rows (`ρ`) for counts, identity for Gaussian.
pub fn decode_mean<S: Scalar>(g: &mut Graph<S>, gp: &GenerativeParams, p: &Bound, input: Var) -> Result<Var> {
    let out = gp.decoder.forward(g, p, input)?;
    Ok(match gp.config.likelihood {
        Likelihood::GammaPoisson => g.softmax_rows(out),
        Likelihood::Gaussian => out,
    })
}

/// Per-row `log p(x_i | z_i)`, `b × 1`. `decoded` is the output of
/// [`decode_mean`]; counts need `library` (`b × 1`).
pub fn log_likelihood_rows<S: Scalar>(
    g: &mut Graph<S>,
    gp: &GenerativeParams,
    p: &Bound,
    x: &Tensor<S>,
    decoded: Var,
    library: Option<Var>,
) -> Result<Var> {
    let lp = match gp.config.likelihood {
        Likelihood::GammaPoisson => {
            let l = library.ok_or_else(|| Error::invalid("library sizes are required for count likelihoods"))?;
            let mu = g.mul(decoded, l)?;
            let theta = g.exp(p[gp.log_theta.expect("count model has theta_d")]);
            g.neg_binomial_log_prob(x, mu, theta)?
        }
        Likelihood::Gaussian => {
            let log_var = p[gp.log_sigma2.expect("gaussian model has log_sigma2")];
            let half = g.scale(log_var, S::lit(0.5));
            let std = g.exp(half);
            let xv = g.constant(x.clone());
            normal_log_prob(g, xv, decoded, std)?
        }
    };
    Ok(g.sum_rows(lp))
}

/// Per-row standard-normal log-density, `b × 1`.
pub fn log_prior_basal_rows<S: Scalar>(g: &mut Graph<S>, z: Var) -> Var {
    let d = g.shape(z)[1];
    let sq = g.square(z);
    let rows = g.sum_rows(sq);
    let half = g.scale(rows, S::lit(-0.5));
    g.add_scalar(half, S::lit(-0.5 * LN_2PI * d as f64))
}

/// Per-row `N(0, var·I)` log-density, `T × 1`.
pub fn log_prior_embedding_rows<S: Scalar>(g: &mut Graph<S>, e: Var, var: f64) -> Var {
    let d = g.shape(e)[1];
    let sq = g.square(e);
    let rows = g.sum_rows(sq);
    let quad = g.scale(rows, S::lit(-0.5 / var));
    g.add_scalar(quad, S::lit(-0.5 * d as f64 * (LN_2PI + var.ln())))
}

/// Per-row `Bern(α)` log-mass of masks, `T × 1`. Requires `0 < α < 1`.
pub fn log_prior_mask_rows<S: Scalar>(g: &mut Graph<S>, m: Var, alpha: f64) -> Var {
    let (on, off) = (alpha.ln(), (-alpha).ln_1p());
    let d = g.shape(m)[1];
    let rows = g.sum_rows(m);
    let scaled = g.scale(rows, S::lit(on - off));
    g.add_scalar(scaled, S::lit(off * d as f64))
}

/// Observation distribution for a batch of decoded latents.
#[derive(Clone, Debug, PartialEq)]
pub enum ObservationModel<S> {
    GammaPoisson { mean: Tensor<S>, inv_dispersion: Vec<S> },
    Gaussian { mean: Tensor<S>, variance: Vec<S> },
}

impl<S: Scalar> ObservationModel<S> {
    pub fn mean(&self) -> &Tensor<S> {
        match self {
            ObservationModel::GammaPoisson { mean, .. } | ObservationModel::Gaussian { mean, .. } => mean,
        }
    }

    /// Per-row log-density of `x`.
    pub fn log_prob_rows(&self, x: &Tensor<S>) -> Result<Vec<S>> {
        let mean = self.mean();
        if x.shape() != mean.shape() {
            return Err(Error::Shape {
                op: "ObservationModel::log_prob_rows",
                lhs: x.shape().to_vec(),
                rhs: mean.shape().to_vec(),
            });
        }
        (0..x.rows())
            .map(|i| match self {
                ObservationModel::GammaPoisson { inv_dispersion, .. } => {
                    let dist = crate::stochastic::GammaPoisson::new(mean.row(i).to_vec(), inv_dispersion.clone())?;
                    dist.log_prob(x.row(i))
                }
                ObservationModel::Gaussian { variance, .. } => {
                    crate::stochastic::gaussian_likelihood_log_prob(x.row(i), mean.row(i), variance)
                }
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Tensor<S> {
        let mean = self.mean();
        let mut out = mean.clone();
        match self {
            ObservationModel::GammaPoisson { inv_dispersion, .. } => {
                let c = mean.cols();
                for (k, v) in out.data_mut().iter_mut().enumerate() {
                    let th = inv_dispersion[k % c].as_f64();
                    *v = S::lit(sample_neg_binomial(v.as_f64(), th, rng) as f64);
                }
            }
            ObservationModel::Gaussian { variance, .. } => {
                let c = mean.cols();
                let eps: Vec<S> = standard_normal_vec(out.len(), rng);
                for (k, (v, e)) in out.data_mut().iter_mut().zip(eps).enumerate() {
                    *v += variance[k % c].sqrt() * e;
                }
            }
        }
        out
    }
}

/// Decodes `input` (rows of decoder inputs) into the observation
/// distribution. Counts need one library size per row.
pub fn decode_likelihood<S: Scalar>(
    store: &ParamStore<S>,
    gp: &GenerativeParams,
    input: &Tensor<S>,
    library: Option<&[S]>,
) -> Result<ObservationModel<S>> {
    let mut out = gp.decoder.apply(store, input)?;
    match gp.config.likelihood {
        Likelihood::GammaPoisson => {
            let l = library.ok_or_else(|| Error::invalid("library sizes are required for count likelihoods"))?;
            if l.len() != out.rows() {
                return Err(Error::Shape {
                    op: "decode_likelihood",
                    lhs: vec![l.len()],
                    rhs: out.shape().to_vec(),
                });
            }
            let c = out.cols();
            for (row, &li) in out.data_mut().chunks_mut(c).zip(l) {
                softmax_in_place(row);
                row.iter_mut().for_each(|v| *v *= li);
            }
            Ok(ObservationModel::GammaPoisson {
                mean: out,
                inv_dispersion: gp.inv_dispersion(store).expect("count model has theta_d"),
            })
        }
        Likelihood::Gaussian => Ok(ObservationModel::Gaussian {
            mean: out,
            variance: gp.noise_variance(store).expect("gaussian model has log_sigma2"),
        }),
    }
}

/// Value-level decoder inputs for latents and dosages.
fn latent_inputs<S: Scalar>(gp: &GenerativeParams, dosage: &Tensor<S>, latents: &LatentSample<S>) -> Result<Tensor<S>> {
    match gp.kind() {
        ModelKind::Conditional => Tensor::hcat(&[&latents.basal, dosage]),
        _ => {
            let (Some(e), Some(m)) = (&latents.embeddings, &latents.masks) else {
                return Err(Error::invalid("latent sample lacks embeddings or masks"));
            };
            let mut z = latents.basal.clone();
            for i in 0..z.rows() {
                let off = perturbation_offset(dosage.row(i), e, m)?;
                z.row_mut(i).iter_mut().zip(off).for_each(|(v, o)| *v += o);
            }
            Ok(z)
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Ancestral sampling from the generative model. Masks, embeddings, basal
/// states and observations use separate random streams of `seed`, so models
/// that skip a group still agree on the others.
pub fn sample_generative<S: Scalar>(
    store: &ParamStore<S>,
    gp: &GenerativeParams,
    dosage: &Tensor<S>,
    library: Option<&[S]>,
    seed: u64,
) -> Result<(LatentSample<S>, Tensor<S>)> {
    let cfg = &gp.config;
    let (t, dz, n) = (cfg.n_perturbations, cfg.latent_dim, dosage.rows());
    if dosage.cols() != t {
        return Err(Error::Shape {
            op: "sample_generative",
            lhs: dosage.shape().to_vec(),
            rhs: vec![n, t],
        });
    }
    let (embeddings, masks) = if cfg.kind.has_embeddings() {
        let masks = match cfg.kind {
            ModelKind::Sams => {
                let mut rng = stream(seed, 1);
                let alpha = cfg.mask_prior;
                let m: Vec<S> = (0..t * dz)
                    .map(|_| if rng.random::<f64>() < alpha { S::one() } else { S::zero() })
                    .collect();
                Tensor::new(vec![t, dz], m)?
            }
            _ => Tensor::ones(&[t, dz]),
        };
        let sd = S::lit(cfg.embedding_prior_var.sqrt());
        let e: Vec<S> = standard_normal_vec(t * dz, &mut stream(seed, 2));
        let e = Tensor::new(vec![t, dz], e)?.map(|v| v * sd);
        (Some(e), Some(masks))
    } else {
        (None, None)
    };
    let basal = Tensor::new(vec![n, dz], standard_normal_vec(n * dz, &mut stream(seed, 3)))?;
    let latents = LatentSample {
        basal,
        embeddings,
        masks,
    };
    let input = latent_inputs(gp, dosage, &latents)?;
    let obs = decode_likelihood(store, gp, &input, library)?;
    let x = obs.sample(&mut stream(seed, 4));
    Ok((latents, x))
}

/// Terms of the joint log-density. `total` adds them left to right with the
/// mask term last, so variants differing only in that term compare exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointTerms<S> {
    pub likelihood: S,
    pub basal_prior: S,
    pub embedding_prior: S,
    pub mask_prior: S,
}

impl<S: Scalar> JointTerms<S> {
    pub fn total(&self) -> S {
        self.likelihood + self.basal_prior + self.embedding_prior + self.mask_prior
    }

    fn check(self) -> Result<Self> {
        for (name, v) in [
            ("likelihood", self.likelihood),
            ("basal_prior", self.basal_prior),
            ("embedding_prior", self.embedding_prior),
            ("mask_prior", self.mask_prior),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: name.into(),
                    step: None,
                });
            }
        }
        Ok(self)
    }
}

/// `log p(X, Z_b, E, M | D)`. The ablation has no mask term; the conditional
/// model has neither embedding nor mask terms.
pub fn log_joint<S: Scalar>(
    store: &ParamStore<S>,
    gp: &GenerativeParams,
    x: &Tensor<S>,
    dosage: &Tensor<S>,
    latents: &LatentSample<S>,
    library: Option<&[S]>,
) -> Result<JointTerms<S>> {
    let cfg = &gp.config;
    let input = latent_inputs(gp, dosage, latents)?;
    let obs = decode_likelihood(store, gp, &input, library)?;
    let likelihood: S = obs.log_prob_rows(x)?.into_iter().sum();
    let dz = cfg.latent_dim;
    let basal_prior = S::lit(-0.5) * latents.basal.data().iter().map(|&v| v * v).sum::<S>()
        - S::lit(0.5 * LN_2PI * (latents.basal.len()) as f64);
    debug_assert_eq!(latents.basal.cols(), dz);

    let mut embedding_prior = S::zero();
    let mut mask_prior = S::zero();
    if cfg.kind.has_embeddings() {
        let e = latents.embeddings.as_ref().ok_or_else(|| Error::invalid("missing embeddings"))?;
        let var = cfg.embedding_prior_var;
        embedding_prior = S::lit(-0.5 / var) * e.data().iter().map(|&v| v * v).sum::<S>()
            - S::lit(0.5 * (LN_2PI + var.ln()) * e.len() as f64);
        if cfg.kind == ModelKind::Sams {
            let m = latents.masks.as_ref().ok_or_else(|| Error::invalid("missing masks"))?;
            let on = m.data().iter().filter(|&&v| v > S::zero()).count();
            let off = m.len() - on;
            let alpha = cfg.mask_prior;
            let term = |count: usize, logp: f64| if count == 0 { 0.0 } else { count as f64 * logp };
            mask_prior = S::lit(term(on, alpha.ln()) + term(off, (-alpha).ln_1p()));
        }
    }
    JointTerms {
        likelihood,
        basal_prior,
        embedding_prior,
        mask_prior,
    }
    .check()
}
