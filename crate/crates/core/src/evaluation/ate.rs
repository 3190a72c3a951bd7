use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{library_normalize, PerturbDataset};
use crate::error::{Error, Result};
use crate::inference::{derive_seed, sample_globals, MaskGradient, Model, ParticleNoise};
use crate::models::{decode_likelihood, Likelihood, ModelKind};
use crate::ndcore::{Graph, Scalar, Tensor};

const ATE_STREAM: u64 = 21;

/// How the inner expectation `E[x | do(d), z_b, M, E]` is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AteMethod {
    /// Closed-form likelihood mean.
    #[default]
    Analytic,
    /// Average of this many likelihood draws per particle.
    Sampled(usize),
}

/// Model-based average treatment effects of each dosage in `targets`
/// against `control`, one row per target. Basal states come from the prior
/// and global latents from the variational posterior; all targets share the
/// same `k` particles. Counts are reported at the median training library
/// size.
pub fn ate_matrix<S: Scalar>(
    model: &Model<S>,
    targets: &[Vec<S>],
    control: &[S],
    k: usize,
    method: AteMethod,
    seed: u64,
) -> Result<Tensor<f64>> {
    if k < 1 {
        return Err(Error::invalid("ATE needs K >= 1"));
    }
    let (t, dz, dx) = (model.n_perturbations(), model.latent_dim(), model.n_features());
    if control.len() != t || targets.iter().any(|d| d.len() != t) {
        return Err(Error::invalid(format!("dosage vectors must have length {t}")));
    }
    let library = match model.config.generative.likelihood {
        Likelihood::GammaPoisson => Some(S::lit(
            model
                .library_median
                .ok_or_else(|| Error::invalid("count model has no stored median library size"))?,
        )),
        Likelihood::Gaussian => None,
    };

    // particle k: basal row k, offset table k
    let mut basal = Tensor::zeros(&[k, dz]);
    let mut tables = Vec::with_capacity(k);
    for j in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, ATE_STREAM, j as u64));
        let noise = ParticleNoise::for_model(model, 1, &mut rng);
        basal.row_mut(j).copy_from_slice(noise.basal.row(0));
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, false);
        let globals = sample_globals(&mut g, model, &p, &noise, MaskGradient::StraightThrough)?;
        tables.push(globals.table.map(|v| g.value(v).clone()));
    }

    let inputs = |d: &[S]| -> Result<Tensor<S>> {
        match model.kind() {
            ModelKind::Conditional => {
                let dose = Tensor::new(vec![k, t], (0..k).flat_map(|_| d.iter().copied()).collect())?;
                Tensor::hcat(&[&basal, &dose])
            }
            _ => {
                let mut z = basal.clone();
                let dose = Tensor::new(vec![1, t], d.to_vec())?;
                for (j, table) in tables.iter().enumerate() {
                    let off = dose.matmul(table.as_ref().expect("offset table"))?;
                    z.row_mut(j).iter_mut().zip(off.data()).for_each(|(a, &b)| *a += b);
                }
                Ok(z)
            }
        }
    };
    let lib = library.map(|l| vec![l; k]);
    let expectation = |d: &[S], stream: u64| -> Result<Vec<f64>> {
        let obs = decode_likelihood(&model.store, &model.generative, &inputs(d)?, lib.as_deref())?;
        let mut acc = vec![0.0; dx];
        match method {
            AteMethod::Analytic => {
                for j in 0..k {
                    acc.iter_mut().zip(obs.mean().row(j)).for_each(|(a, &m)| *a += m.as_f64());
                }
                acc.iter_mut().for_each(|a| *a /= k as f64);
            }
            AteMethod::Sampled(s) => {
                let s = s.max(1);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, ATE_STREAM + 1, stream));
                for _ in 0..s {
                    let x = obs.sample(&mut rng);
                    for j in 0..k {
                        acc.iter_mut().zip(x.row(j)).for_each(|(a, &v)| *a += v.as_f64());
                    }
                }
                acc.iter_mut().for_each(|a| *a /= (k * s) as f64);
            }
        }
        Ok(acc)
    };

    let base = expectation(control, 0)?;
    let mut out = Tensor::zeros(&[targets.len(), dx]);
    for (r, d) in targets.iter().enumerate() {
        if d.as_slice() == control {
            continue;
        }
        let treated = expectation(d, r as u64 + 1)?;
        for ((o, a), b) in out.row_mut(r).iter_mut().zip(treated).zip(&base) {
            *o = a - b;
        }
    }
    Ok(out)
}

/// ATE of a single target dosage against `control`.
pub fn ate_estimate<S: Scalar>(
    model: &Model<S>,
    target: &[S],
    control: &[S],
    k: usize,
    method: AteMethod,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(ate_matrix(model, &[target.to_vec()], control, k, method, seed)?.row(0).to_vec())
}

fn condition_label<S: Scalar>(ds: &PerturbDataset<S>, d: &[S]) -> String {
    let names: Vec<&str> = d
        .iter()
        .zip(&ds.perturbation_names)
        .filter(|(&v, _)| v > S::zero())
        .map(|(_, n)| n.as_str())
        .collect();
    if names.is_empty() {
        "<no perturbation>".into()
    } else {
        names.join("+")
    }
}

/// Difference of library-normalized condition means over `rows`.
pub fn de_estimate<S: Scalar>(ds: &PerturbDataset<S>, rows: &[usize], target: &[S], control: &[S]) -> Result<Vec<f64>> {
    let normalized = library_normalize(ds);
    let mean = |d: &[S]| -> Result<Vec<f64>> {
        let cells = ds.condition_rows(rows, d);
        if cells.is_empty() {
            return Err(Error::EmptyCondition(condition_label(ds, d)));
        }
        let mut acc = vec![0.0; ds.n_features()];
        for &i in &cells {
            acc.iter_mut().zip(normalized.row(i)).for_each(|(a, &v)| *a += v.as_f64());
        }
        acc.iter_mut().for_each(|a| *a /= cells.len() as f64);
        Ok(acc)
    };
    let (a, b) = (mean(target)?, mean(control)?);
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

/// Pearson correlation. Errors when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("correlation needs two vectors of equal length >= 2"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 {
        return Err(Error::UndefinedCorrelation("first input is constant"));
    }
    if sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("second input is constant"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation of model ATE with data DE: per row, and pooled over all rows
/// by concatenation. Rows with an undefined correlation give `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct AtePearson {
    pub pooled: f64,
    pub per_perturbation: Vec<Option<f64>>,
}

pub fn ate_pearson(ate: &Tensor<f64>, de: &Tensor<f64>) -> Result<AtePearson> {
    if ate.shape() != de.shape() {
        return Err(Error::Shape {
            op: "ate_pearson",
            lhs: ate.shape().to_vec(),
            rhs: de.shape().to_vec(),
        });
    }
    let per_perturbation = (0..ate.rows()).map(|r| pearson(ate.row(r), de.row(r)).ok()).collect();
    Ok(AtePearson {
        pooled: pearson(ate.data(), de.data())?,
        per_perturbation,
    })
}
