//! Perturbation-screen datasets: loading, validation, encoder
//! normalization, library-size normalization and splitting.

mod io;
mod normalize;
mod split;

pub use io::{load_dataset, save_dataset, write_matrix_csv};
pub use normalize::{library_normalize, median, normalize_for_encoder, EncoderInput, EncoderStats, VARIANCE_GUARD};
pub use split::make_splits;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "train" => Some(Split::Train),
            "val" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Whether observations are transcript counts or real-valued features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observation {
    Counts,
    Real,
}

/// Extra per-cell metadata carried through from `obs.csv`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObsColumns {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbDataset<S> {
    /// `N × D_x` observations.
    pub x: Tensor<S>,
    /// `N × T` binary dosages.
    pub dosage: Tensor<S>,
    pub feature_names: Vec<String>,
    pub perturbation_names: Vec<String>,
    /// Row sums of `x` (counts mode only).
    pub library_sizes: Option<Vec<S>>,
    pub split: Vec<Split>,
    pub observation: Observation,
    /// Name of the control perturbation column, when declared.
    pub control: Option<String>,
    pub obs: ObsColumns,
}

impl<S: Scalar> PerturbDataset<S> {
    /// Assembles and validates a dataset. Counts-mode library sizes are
    /// computed here.
    pub fn new(
        x: Tensor<S>,
        dosage: Tensor<S>,
        feature_names: Vec<String>,
        perturbation_names: Vec<String>,
        observation: Observation,
    ) -> Result<Self> {
        let n = x.rows();
        if dosage.rows() != n {
            return Err(Error::Shape {
                op: "PerturbDataset",
                lhs: x.shape().to_vec(),
                rhs: dosage.shape().to_vec(),
            });
        }
        if feature_names.len() != x.cols() || perturbation_names.len() != dosage.cols() {
            return Err(Error::invalid("name lists do not match matrix widths"));
        }
        for i in 0..n {
            for (j, &d) in dosage.row(i).iter().enumerate() {
                if d != S::zero() && d != S::one() {
                    return Err(Error::NonBinaryDosage {
                        file: "D".into(),
                        row: i + 1,
                        col: j + 1,
                        value: d.to_string(),
                    });
                }
            }
        }
        let library_sizes = match observation {
            Observation::Counts => {
                let mut libs = Vec::with_capacity(n);
                for i in 0..n {
                    for (j, &v) in x.row(i).iter().enumerate() {
                        if v < S::zero() {
                            return Err(Error::NegativeCount {
                                file: "X".into(),
                                row: i + 1,
                                col: j + 1,
                                value: v.as_f64(),
                            });
                        }
                    }
                    let l: S = x.row(i).iter().copied().sum();
                    if !(l > S::zero()) {
                        return Err(Error::EmptyRow {
                            file: "X".into(),
                            row: i + 1,
                        });
                    }
                    libs.push(l);
                }
                Some(libs)
            }
            Observation::Real => None,
        };
        Ok(PerturbDataset {
            x,
            dosage,
            feature_names,
            perturbation_names,
            library_sizes,
            split: vec![Split::Train; n],
            observation,
            control: None,
            obs: ObsColumns::default(),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn n_perturbations(&self) -> usize {
        self.dosage.cols()
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.n_cells()).filter(|&i| self.split[i] == split).collect()
    }

    /// Cells per perturbation over `rows` (the `n_t` counts when `rows` is
    /// the training split).
    pub fn perturbation_counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.n_perturbations()];
        for &i in rows {
            for (c, &d) in counts.iter_mut().zip(self.dosage.row(i)) {
                if d > S::zero() {
                    *c += 1;
                }
            }
        }
        counts
    }

    pub fn perturbation_index(&self, name: &str) -> Result<usize> {
        self.perturbation_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownPerturbation(name.to_string()))
    }

    /// One-hot dosage of the named perturbation.
    pub fn one_hot(&self, name: &str) -> Result<Vec<S>> {
        let t = self.perturbation_index(name)?;
        let mut d = vec![S::zero(); self.n_perturbations()];
        d[t] = S::one();
        Ok(d)
    }

    /// Dosage vector of the declared control condition.
    pub fn control_dosage(&self) -> Result<Vec<S>> {
        let name = self
            .control
            .as_deref()
            .ok_or_else(|| Error::invalid("no control perturbation declared"))?;
        self.one_hot(name)
    }

    /// Rows among `rows` whose dosage equals `d` exactly.
    pub fn condition_rows(&self, rows: &[usize], d: &[S]) -> Vec<usize> {
        rows.iter().copied().filter(|&i| self.dosage.row(i) == d).collect()
    }

    /// Median library size over the training split.
    pub fn median_train_library(&self) -> Option<S> {
        let libs = self.library_sizes.as_ref()?;
        let train: Vec<S> = self.rows_in(Split::Train).iter().map(|&i| libs[i]).collect();
        median(&train)
    }
}
