//! Synthetic datasets from a known sparse-shift ground truth, and the mask
//! recovery study built on them.

mod recovery;
#[cfg(test)]
mod tests;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use recovery::{
    append_recovery_csv, fixed_sparsity_alpha, recovery_model_config, run_recovery_cell, run_recovery_study,
    summarize_recovery, RecoveryConfig, RecoveryRow, RecoverySummary, Regime,
};

use crate::data::{save_dataset, write_matrix_csv, Observation, PerturbDataset};
use crate::error::{Error, Result};
use crate::ndcore::{Init, ParamStore, ResidualMlp, Tensor};

const MASK_STREAM: u64 = 1;
const EMBEDDING_STREAM: u64 = 2;
const PILOT_STREAM: u64 = 3;
const BASAL_STREAM: u64 = 4;
const NOISE_STREAM: u64 = 5;
const DECODER_SEED_OFFSET: u64 = 0x5EED;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub latent_dim: usize,
    pub n_features: usize,
    pub n_perturbations: usize,
    pub cells_per_perturbation: usize,
    pub mask_density: f64,
    pub embedding_mean: f64,
    /// Variance, not standard deviation.
    pub embedding_var: f64,
    pub decoder_hidden: Vec<usize>,
    /// Share of each feature's variance that is observation noise.
    pub noise_fraction: f64,
    /// Signal draws used to calibrate the noise variance.
    pub pilot_draws: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            latent_dim: 15,
            n_features: 50,
            n_perturbations: 20,
            cells_per_perturbation: 200,
            mask_density: 0.1,
            embedding_mean: 5.0,
            embedding_var: 0.5,
            decoder_hidden: vec![20, 20],
            noise_fraction: 0.2,
            pilot_draws: 10_000,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::invalid(format!("{key}: {why}")));
        for (key, v) in [
            ("latent_dim", self.latent_dim),
            ("n_features", self.n_features),
            ("n_perturbations", self.n_perturbations),
            ("cells_per_perturbation", self.cells_per_perturbation),
            ("pilot_draws", self.pilot_draws),
        ] {
            if v == 0 {
                return bad(key, "must be >= 1".into());
            }
        }
        if !(self.noise_fraction > 0.0 && self.noise_fraction < 1.0) {
            return bad("noise_fraction", format!("must lie strictly between 0 and 1, got {}", self.noise_fraction));
        }
        if !(0.0..=1.0).contains(&self.mask_density) {
            return bad("mask_density", format!("must lie in [0, 1], got {}", self.mask_density));
        }
        if !(self.embedding_var >= 0.0 && self.embedding_var.is_finite()) || !self.embedding_mean.is_finite() {
            return bad("embedding_var", "embedding law must be finite with variance >= 0".into());
        }
        if self.decoder_hidden.contains(&0) {
            return bad("decoder_hidden", "layer widths must be >= 1".into());
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_perturbations * self.cells_per_perturbation
    }
}

/// One named decoder tensor, for the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SimTruth {
    /// `T × D_z`, entries 0 or 1.
    pub masks: Tensor<f64>,
    pub embeddings: Tensor<f64>,
    pub decoder: ResidualMlp,
    pub decoder_params: ParamStore<f64>,
    /// Per feature.
    pub noise_variance: Vec<f64>,
}

impl SimTruth {
    pub fn binary_masks(&self) -> Vec<Vec<bool>> {
        (0..self.masks.rows())
            .map(|i| self.masks.row(i).iter().map(|&v| v > 0.5).collect())
            .collect()
    }

    /// The noiseless decoder output for latent rows `z`.
    pub fn signal(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.decoder.apply(&self.decoder_params, z)
    }
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub config: SimConfig,
    pub dataset: PerturbDataset<f64>,
    pub truth: SimTruth,
    /// Noiseless decoder output per cell.
    pub signal: Tensor<f64>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal_matrix(rows: usize, cols: usize, mean: f64, std: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let law = Normal::new(mean, std).expect("finite normal law");
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| law.sample(rng)).collect()).expect("shape")
}

/// Adds `E ⊙ M` of perturbation `t` to row `i` of `z`.
fn shift_row(z: &mut Tensor<f64>, i: usize, t: usize, table: &Tensor<f64>) {
    z.row_mut(i).iter_mut().zip(table.row(t)).for_each(|(v, o)| *v += o);
}

fn column_variances(m: &Tensor<f64>) -> Vec<f64> {
    let n = m.rows() as f64;
    (0..m.cols())
        .map(|j| {
            let mean = (0..m.rows()).map(|i| m.at(i, j)).sum::<f64>() / n;
            (0..m.rows()).map(|i| (m.at(i, j) - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

/// Draws a ground truth and a dataset from it. Every cell receives exactly
/// one perturbation; perturbation `t` owns rows `t·n_t .. (t+1)·n_t`.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let (t, dz, dx) = (cfg.n_perturbations, cfg.latent_dim, cfg.n_features);
    let bern = Bernoulli::new(cfg.mask_density).expect("validated density");
    let mut rng = stream(cfg.seed, MASK_STREAM);
    let masks = Tensor::new(vec![t, dz], (0..t * dz).map(|_| f64::from(u8::from(bern.sample(&mut rng)))).collect())?;
    let embeddings = normal_matrix(t, dz, cfg.embedding_mean, cfg.embedding_var.sqrt(), &mut stream(cfg.seed, EMBEDDING_STREAM));
    let table = embeddings.zip_map(&masks, |e, m| e * m)?;

    let mut decoder_params = ParamStore::new();
    let decoder = ResidualMlp::build(
        &mut decoder_params,
        "decoder",
        dz,
        &cfg.decoder_hidden,
        dx,
        Init::Orthogonal,
        cfg.seed ^ DECODER_SEED_OFFSET,
    )?
    .plain();

    // σ²_j = Var_j(signal) · f / (1 − f) over pilot cells spread evenly across perturbations
    let mut rng = stream(cfg.seed, PILOT_STREAM);
    let mut pilot = normal_matrix(cfg.pilot_draws, dz, 0.0, 1.0, &mut rng);
    for i in 0..cfg.pilot_draws {
        shift_row(&mut pilot, i, i % t, &table);
    }
    let ratio = cfg.noise_fraction / (1.0 - cfg.noise_fraction);
    let noise_variance: Vec<f64> = column_variances(&decoder.apply(&decoder_params, &pilot)?)
        .into_iter()
        .map(|v| v * ratio)
        .collect();

    let n = cfg.n_cells();
    let mut z = normal_matrix(n, dz, 0.0, 1.0, &mut stream(cfg.seed, BASAL_STREAM));
    let mut dosage = Tensor::zeros(&[n, t]);
    for i in 0..n {
        let pt = i / cfg.cells_per_perturbation;
        dosage.set(i, pt, 1.0);
        shift_row(&mut z, i, pt, &table);
    }
    let signal = decoder.apply(&decoder_params, &z)?;
    let mut x = signal.clone();
    let mut rng = stream(cfg.seed, NOISE_STREAM);
    for i in 0..n {
        for (v, s2) in x.row_mut(i).iter_mut().zip(&noise_variance) {
            *v += s2.sqrt() * Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
        }
    }
    let dataset = PerturbDataset::new(
        x,
        dosage,
        (0..dx).map(|j| format!("gene{j}")).collect(),
        (0..t).map(|p| format!("pert{p}")).collect(),
        Observation::Real,
    )?;
    Ok(Simulation {
        config: cfg.clone(),
        dataset,
        truth: SimTruth {
            masks,
            embeddings,
            decoder,
            decoder_params,
            noise_variance,
        },
        signal,
    })
}

/// Share of each feature's empirical variance explained by the noiseless
/// signal.
pub fn signal_fraction(sim: &Simulation) -> Vec<f64> {
    column_variances(&sim.signal)
        .into_iter()
        .zip(column_variances(&sim.dataset.x))
        .map(|(s, x)| s / x)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimManifest {
    pub config: SimConfig,
    pub noise_variance: Vec<f64>,
    pub decoder: Vec<NamedTensor>,
}

pub const TRUE_MASKS_FILE: &str = "true_masks.csv";
pub const TRUE_EMBEDDINGS_FILE: &str = "true_embeddings.csv";
pub const SIM_MANIFEST_FILE: &str = "sim_manifest.json";

/// Writes the dataset and its truth files into `dir`.
pub fn write_simulation(sim: &Simulation, dir: &Path) -> Result<()> {
    save_dataset(&sim.dataset, dir)?;
    let header: Vec<String> = (0..sim.config.latent_dim).map(|j| format!("z{j}")).collect();
    let labels = Some(("perturbation", sim.dataset.perturbation_names.as_slice()));
    write_matrix_csv(&dir.join(TRUE_MASKS_FILE), &header, labels, &sim.truth.masks)?;
    write_matrix_csv(&dir.join(TRUE_EMBEDDINGS_FILE), &header, labels, &sim.truth.embeddings)?;
    let params = &sim.truth.decoder_params;
    let manifest = SimManifest {
        config: sim.config.clone(),
        noise_variance: sim.truth.noise_variance.clone(),
        decoder: params
            .ids()
            .map(|id| NamedTensor {
                name: params.name(id).to_string(),
                shape: params.get(id).shape().to_vec(),
                values: params.get(id).data().to_vec(),
            })
            .collect(),
    };
    fs::write(dir.join(SIM_MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Reads `true_masks.csv` from a simulated dataset directory, if present.
pub fn load_true_masks(dir: &Path) -> Result<Option<Vec<Vec<bool>>>> {
    let path = dir.join(TRUE_MASKS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let file = path.display().to_string();
    let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::Format {
        what: "true masks",
        detail: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format {
            what: "true masks",
            detail: e.to_string(),
        })?;
        let row = rec
            .iter()
            .enumerate()
            .skip(1)
            .map(|(c, v)| {
                v.trim().parse::<f64>().map(|x| x > 0.5).map_err(|_| Error::Parse {
                    file: file.clone(),
                    row: r + 2,
                    col: c + 1,
                    value: v.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Some(rows))
}
