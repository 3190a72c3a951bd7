use serde::{Deserialize, Serialize};

use super::{Observation, PerturbDataset, Split};
use crate::ndcore::{Scalar, Tensor};

/// Lower bound on the standard deviation used to standardize a feature.
pub const VARIANCE_GUARD: f64 = 1e-8;

/// Per-feature standardization fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Apply `ln(1 + x)` before standardizing (counts).
    pub log1p: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput<S> {
    pub matrix: Tensor<S>,
    pub stats: EncoderStats,
}

impl EncoderStats {
    /// Identity transform for `dim` features.
    pub fn identity(dim: usize) -> Self {
        EncoderStats {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            log1p: false,
        }
    }

    /// Fits on the training rows of `ds`. Counts are log1p-transformed first.
    pub fn fit<S: Scalar>(ds: &PerturbDataset<S>) -> Self {
        let log1p = ds.observation == Observation::Counts;
        let rows = ds.rows_in(Split::Train);
        let d = ds.n_features();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for j in 0..d {
            let col: Vec<f64> = rows
                .iter()
                .map(|&i| {
                    let v = ds.x.at(i, j).as_f64();
                    if log1p {
                        v.ln_1p()
                    } else {
                        v
                    }
                })
                .collect();
            let first = col.first().copied().unwrap_or(0.0);
            if col.iter().all(|&v| v == first) {
                mean[j] = first;
                scale[j] = VARIANCE_GUARD;
                continue;
            }
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[j] = m;
            scale[j] = var.sqrt().max(VARIANCE_GUARD);
        }
        EncoderStats { mean, scale, log1p }
    }

    pub fn apply<S: Scalar>(&self, x: &Tensor<S>) -> Tensor<S> {
        let mut out = x.clone();
        let c = x.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                let mut f = v.as_f64();
                if self.log1p {
                    f = f.ln_1p();
                }
                *v = S::lit((f - self.mean[j]) / self.scale[j]);
            }
        }
        out
    }
}

/// Standardized (log1p for counts) encoder inputs for every row, using
/// statistics from the training rows only.
pub fn normalize_for_encoder<S: Scalar>(ds: &PerturbDataset<S>) -> EncoderInput<S> {
    let stats = EncoderStats::fit(ds);
    EncoderInput {
        matrix: stats.apply(&ds.x),
        stats,
    }
}

pub fn median<S: Scalar>(values: &[S]) -> Option<S> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / S::lit(2.0)
    })
}

/// Scales each row by `median train library size / l_i`. Real-valued
/// datasets are returned unchanged.
pub fn library_normalize<S: Scalar>(ds: &PerturbDataset<S>) -> Tensor<S> {
    let (Some(libs), Some(target)) = (ds.library_sizes.as_ref(), ds.median_train_library()) else {
        return ds.x.clone();
    };
    let mut out = ds.x.clone();
    for (i, &l) in libs.iter().enumerate() {
        let f = target / l;
        out.row_mut(i).iter_mut().for_each(|v| *v *= f);
    }
    out
}
