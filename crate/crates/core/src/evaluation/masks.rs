use std::fs;
use std::path::Path;

use pathfinding::prelude::{kuhn_munkres, Matrix};

use crate::data::write_matrix_csv;
use crate::error::{Error, Result};
use crate::inference::Model;
use crate::ndcore::{Graph, Scalar, Tensor};

/// Probabilities above this are read as an active mask entry.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Inferred mask probabilities with their fixed thresholding.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskEstimate {
    pub probabilities: Tensor<f64>,
}

impl MaskEstimate {
    pub fn new(probabilities: Tensor<f64>) -> Self {
        MaskEstimate { probabilities }
    }

    /// `None` for models without masks.
    pub fn from_model<S: Scalar>(model: &Model<S>) -> Option<Self> {
        model.mask_probabilities().map(|p| Self::new(p.cast()))
    }

    pub fn binary(&self) -> Vec<Vec<bool>> {
        (0..self.probabilities.rows())
            .map(|i| self.probabilities.row(i).iter().map(|&p| p > MASK_THRESHOLD).collect())
            .collect()
    }

    /// Fraction of active entries in the thresholded mask.
    pub fn density(&self) -> f64 {
        let n = self.probabilities.len();
        if n == 0 {
            return 0.0;
        }
        self.binary().iter().flatten().filter(|&&b| b).count() as f64 / n as f64
    }
}

/// Global F1 of `estimate` against `truth` after the column permutation of
/// `estimate` that maximizes true positives. Two empty masks score 1.
pub fn mask_f1(estimate: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<f64> {
    let shape = |m: &[Vec<bool>]| vec![m.len(), m.first().map_or(0, Vec::len)];
    if shape(estimate) != shape(truth) || estimate.iter().chain(truth).any(|r| r.len() != shape(truth)[1]) {
        return Err(Error::Shape {
            op: "mask_f1",
            lhs: shape(estimate),
            rhs: shape(truth),
        });
    }
    let dz = shape(truth)[1];
    let count = |m: &[Vec<bool>]| m.iter().flatten().filter(|&&b| b).count() as i64;
    let (inferred, actual) = (count(estimate), count(truth));
    if inferred == 0 && actual == 0 {
        return Ok(1.0);
    }
    let tp = if dz == 0 {
        0
    } else {
        // overlap[i][j]: rows where truth column i and estimate column j are both on
        let mut overlap = Matrix::new(dz, dz, 0i64);
        for (t, e) in truth.iter().zip(estimate) {
            for i in (0..dz).filter(|&i| t[i]) {
                for j in (0..dz).filter(|&j| e[j]) {
                    overlap[(i, j)] += 1;
                }
            }
        }
        kuhn_munkres(&overlap).0
    };
    let (fp, fn_) = (inferred - tp, actual - tp);
    Ok((2 * tp) as f64 / (2 * tp + fp + fn_) as f64)
}

/// Embedding means per perturbation, `T × D_z`. Correlated posteriors are
/// evaluated at the thresholded mask.
pub fn embedding_means<S: Scalar>(model: &Model<S>) -> Result<Tensor<f64>> {
    let vp = &model.variational;
    let (t, dz) = (model.n_perturbations(), model.latent_dim());
    if !model.kind().has_embeddings() {
        return Err(Error::invalid("conditional models have no perturbation embeddings to export"));
    }
    if let Some(id) = vp.emb_mean {
        return Ok(model.store.get(id).cast());
    }
    let net = vp
        .emb_net
        .as_ref()
        .ok_or_else(|| Error::invalid("embedding posterior parameters missing for this inference mode"))?;
    let masks = model
        .mask_probabilities()
        .expect("models with embeddings have masks")
        .map(|p| if p.as_f64() > MASK_THRESHOLD { S::one() } else { S::zero() });
    let input = Tensor::hcat(&[&masks, &Tensor::eye(t)])?;
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let iv = g.constant(input);
    let out = net.forward(&mut g, &p, iv)?;
    let out = g.value(out);
    let mut mean = Tensor::zeros(&[t, dz]);
    for i in 0..t {
        mean.row_mut(i).iter_mut().zip(&out.row(i)[..dz]).for_each(|(m, &v)| *m = v.as_f64());
    }
    Ok(mean)
}

/// Writes `masks.csv` and `embeddings.csv` (rows labeled by perturbation)
/// into `dir`.
pub fn export_latents<S: Scalar>(model: &Model<S>, dir: &Path) -> Result<()> {
    let probabilities = model
        .mask_probabilities()
        .ok_or_else(|| Error::invalid("conditional models have no masks to export"))?
        .cast::<f64>();
    let means = embedding_means(model)?;
    fs::create_dir_all(dir)?;
    let header: Vec<String> = (0..model.latent_dim()).map(|j| format!("z{j}")).collect();
    let labels = Some(("perturbation", model.perturbation_names.as_slice()));
    write_matrix_csv(&dir.join("masks.csv"), &header, labels, &probabilities)?;
    write_matrix_csv(&dir.join("embeddings.csv"), &header, labels, &means)?;
    Ok(())
}
