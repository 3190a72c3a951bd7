//! Held-out likelihood bounds, treatment-effect checks and mask scoring.

mod ate;
mod iwelbo;
mod masks;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use ate::{ate_estimate, ate_matrix, ate_pearson, de_estimate, pearson, AteMethod, AtePearson};
pub use iwelbo::{iwelbo, iwelbo_report, log_weights, particle_log_weight, IwelboReport};
pub use masks::{embedding_means, export_latents, mask_f1, MaskEstimate, MASK_THRESHOLD};

use crate::data::{PerturbDataset, Split};
use crate::error::{Error, Result};
use crate::inference::{derive_seed, Model, PreparedData};
use crate::ndcore::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub split: Split,
    /// IWELBO particles.
    pub particles: usize,
    pub repetitions: usize,
    /// Treatment effects are skipped without a control.
    pub control: Option<String>,
    /// ATE particles.
    pub ate_particles: usize,
    pub ate_method: AteMethod,
    /// Perturbations to report effects for; empty means all but the control.
    pub targets: Vec<String>,
    pub truth_masks: Option<Vec<Vec<bool>>>,
    pub seed: u64,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: Split::Test,
            particles: 100,
            repetitions: 5,
            control: None,
            ate_particles: 1000,
            ate_method: AteMethod::Analytic,
            targets: Vec::new(),
            truth_masks: None,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PearsonSummary {
    pub pooled: f64,
    /// `null` where one of the vectors is constant.
    pub per_perturbation: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iwelbo: IwelboReport,
    pub control: Option<String>,
    pub features: Vec<String>,
    pub ate: BTreeMap<String, Vec<f64>>,
    pub de: BTreeMap<String, Vec<f64>>,
    pub ate_pearson: Option<PearsonSummary>,
    pub mask_f1: Option<f64>,
}

/// Runs every evaluation that applies to `model` on `ds`.
pub fn evaluate<S: Scalar>(model: &Model<S>, ds: &PerturbDataset<S>, opts: &EvalOptions) -> Result<EvalReport> {
    let rows = ds.rows_in(opts.split);
    if rows.is_empty() {
        return Err(Error::invalid(format!("split `{}` has no cells", opts.split.as_str())));
    }
    let data = PreparedData::new(model, ds)?;
    let batch = data.batch(&rows);
    let iwelbo = iwelbo_report(
        model,
        &batch,
        opts.split.as_str(),
        opts.particles,
        opts.repetitions,
        derive_seed(opts.seed, 31, 0),
        opts.threads,
    )?;

    let (mut ate, mut de, mut ate_pearson) = (BTreeMap::new(), BTreeMap::new(), None);
    if let Some(control) = &opts.control {
        let d0 = ds.one_hot(control)?;
        let names: Vec<String> = if opts.targets.is_empty() {
            ds.perturbation_names.iter().filter(|n| *n != control).cloned().collect()
        } else {
            opts.targets.clone()
        };
        let targets = names.iter().map(|n| ds.one_hot(n)).collect::<Result<Vec<_>>>()?;
        let effects = ate_matrix(model, &targets, &d0, opts.ate_particles, opts.ate_method, derive_seed(opts.seed, 32, 0))?;
        let mut diffs = Tensor::zeros(&[names.len(), ds.n_features()]);
        for (r, d) in targets.iter().enumerate() {
            diffs.row_mut(r).copy_from_slice(&de_estimate(ds, &rows, d, &d0)?);
        }
        for (r, n) in names.iter().enumerate() {
            ate.insert(n.clone(), effects.row(r).to_vec());
            de.insert(n.clone(), diffs.row(r).to_vec());
        }
        let r = ate_pearson_lenient(&effects, &diffs)?;
        ate_pearson = r.map(|r| PearsonSummary {
            pooled: r.pooled,
            per_perturbation: names.iter().cloned().zip(r.per_perturbation).collect(),
        });
    }

    let mask_f1 = match (&opts.truth_masks, MaskEstimate::from_model(model)) {
        (Some(truth), Some(est)) => Some(mask_f1(&est.binary(), truth)?),
        _ => None,
    };
    Ok(EvalReport {
        iwelbo,
        control: opts.control.clone(),
        features: ds.feature_names.clone(),
        ate,
        de,
        ate_pearson,
        mask_f1,
    })
}

/// Pooled correlation is omitted, not an error, when every effect is zero.
fn ate_pearson_lenient(ate: &Tensor<f64>, de: &Tensor<f64>) -> Result<Option<AtePearson>> {
    if ate.rows() == 0 {
        return Ok(None);
    }
    match ate_pearson(ate, de) {
        Ok(r) => Ok(Some(r)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}
