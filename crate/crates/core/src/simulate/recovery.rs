use std::fs::OpenOptions;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::{simulate_dataset, SimConfig};
use crate::error::{Error, Result};
use crate::evaluation::{mask_f1, MaskEstimate};
use crate::inference::{train, InferenceMode, Model, ModelConfig, TrainConfig, TrainState, VariationalConfig};
use crate::models::{GenerativeConfig, Likelihood, ModelKind};

/// `10^(−9·n_t/50)`, clamped to `[1e-300, 0.5]`.
pub fn fixed_sparsity_alpha(n_t: usize) -> f64 {
    10f64.powf(-9.0 * n_t as f64 / 50.0).clamp(1e-300, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// The same mask prior at every sample size.
    FixedPrior,
    /// Mask prior shrinking with the per-perturbation sample size.
    FixedSparsity,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::FixedPrior => "fixed_prior",
            Regime::FixedSparsity => "fixed_sparsity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "fixed_prior" => Ok(Regime::FixedPrior),
            "fixed_sparsity" => Ok(Regime::FixedSparsity),
            other => Err(Error::invalid(format!(
                "unknown regime `{other}` (expected fixed_prior or fixed_sparsity)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub n_values: Vec<usize>,
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    pub fixed_prior_alpha: f64,
    /// Base simulation; its seed and cell count are set per grid cell.
    pub sim: SimConfig,
    pub hidden: Vec<usize>,
    pub embedding_prior_var: f64,
    pub mode: InferenceMode,
    pub temperature: f64,
    pub train: TrainConfig,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            n_values: vec![50, 100, 200],
            regimes: vec![Regime::FixedPrior, Regime::FixedSparsity],
            seeds: (0..5).collect(),
            fixed_prior_alpha: 0.1,
            sim: SimConfig::default(),
            hidden: vec![100, 100],
            embedding_prior_var: 10.0,
            mode: InferenceMode::CorrZ,
            temperature: 1.0,
            train: TrainConfig {
                batch_size: 256,
                learning_rate: 3e-3,
                weight_decay: 0.0,
                steps: 4000,
                eval_every: 500,
                ..TrainConfig::default()
            },
        }
    }
}

impl RecoveryConfig {
    pub fn alpha(&self, regime: Regime, n_t: usize) -> f64 {
        match regime {
            Regime::FixedPrior => self.fixed_prior_alpha,
            Regime::FixedSparsity => fixed_sparsity_alpha(n_t),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return Err(Error::invalid("n_values must be a non-empty list of positive sizes"));
        }
        if self.regimes.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("regimes and seeds must be non-empty"));
        }
        if !(self.fixed_prior_alpha > 0.0 && self.fixed_prior_alpha < 1.0) {
            return Err(Error::invalid(format!(
                "fixed_prior_alpha must lie strictly between 0 and 1, got {}",
                self.fixed_prior_alpha
            )));
        }
        self.sim.validate()?;
        self.train.validate()
    }
}

/// The sparse model fitted in every grid cell.
pub fn recovery_model_config(cfg: &RecoveryConfig, alpha: f64) -> ModelConfig {
    ModelConfig {
        generative: GenerativeConfig {
            kind: ModelKind::Sams,
            likelihood: Likelihood::Gaussian,
            latent_dim: cfg.sim.latent_dim,
            n_features: cfg.sim.n_features,
            n_perturbations: cfg.sim.n_perturbations,
            mask_prior: alpha,
            embedding_prior_var: cfg.embedding_prior_var,
            decoder_hidden: cfg.hidden.clone(),
        },
        variational: VariationalConfig {
            mode: cfg.mode,
            encoder_hidden: cfg.hidden.clone(),
            embedding_hidden: cfg.hidden.clone(),
            temperature: cfg.temperature,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub n_t: usize,
    pub regime: Regime,
    pub alpha: f64,
    pub f1: f64,
    pub inferred_density: f64,
    pub seed: u64,
}

/// Simulates with `seed` and `n_t` cells per perturbation, fits the sparse
/// model and scores its thresholded mask.
pub fn run_recovery_cell(cfg: &RecoveryConfig, seed: u64, n_t: usize, regime: Regime) -> Result<RecoveryRow> {
    let at_cell = |source: Error| Error::GridCell {
        n_t,
        regime: regime.as_str(),
        seed,
        source: Box::new(source),
    };
    let sim_cfg = SimConfig {
        cells_per_perturbation: n_t,
        seed,
        ..cfg.sim.clone()
    };
    let sim = simulate_dataset(&sim_cfg).map_err(at_cell)?;
    let alpha = cfg.alpha(regime, n_t);
    let mut model = Model::for_dataset(recovery_model_config(cfg, alpha), &sim.dataset, seed).map_err(at_cell)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut state = TrainState::new(&model);
    train(&mut model, &sim.dataset, &train_cfg, &mut state, |_, _, _| Ok(())).map_err(at_cell)?;
    let estimate = MaskEstimate::from_model(&model).expect("sparse model has masks");
    let row = RecoveryRow {
        n_t,
        regime,
        alpha,
        f1: mask_f1(&estimate.binary(), &sim.truth.binary_masks()).map_err(at_cell)?,
        inferred_density: estimate.density(),
        seed,
    };
    info!(
        "recovery n_t={} regime={} seed={}: f1={:.3} density={:.3}",
        n_t,
        regime.as_str(),
        seed,
        row.f1,
        row.inferred_density
    );
    Ok(row)
}

/// Runs every grid cell for every seed. Cells sharing a seed and `n_t` see
/// the same simulated dataset.
pub fn run_recovery_study(cfg: &RecoveryConfig, mut on_row: impl FnMut(&RecoveryRow) -> Result<()>) -> Result<Vec<RecoveryRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &n_t in &cfg.n_values {
            for &regime in &cfg.regimes {
                let row = run_recovery_cell(cfg, seed, n_t, regime)?;
                on_row(&row)?;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub const RECOVERY_COLUMNS: [&str; 6] = ["n_t", "regime", "alpha", "f1", "inferred_density", "seed"];

/// Appends rows to a CSV file, writing the header only when the file is new
/// or empty.
pub fn append_recovery_csv(path: &Path, rows: &[RecoveryRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let io = |e: csv::Error| Error::Format {
        what: "recovery table",
        detail: e.to_string(),
    };
    if fresh {
        w.write_record(RECOVERY_COLUMNS).map_err(io)?;
    }
    for r in rows {
        w.write_record([
            r.n_t.to_string(),
            r.regime.as_str().to_string(),
            format!("{:e}", r.alpha),
            format!("{:.6}", r.f1),
            format!("{:.6}", r.inferred_density),
            r.seed.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean score per `(n_t, regime)` over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub n_t: usize,
    pub regime: Regime,
    pub alpha: f64,
    pub runs: usize,
    pub mean_f1: f64,
    pub mean_density: f64,
}

pub fn summarize_recovery(rows: &[RecoveryRow]) -> Vec<RecoverySummary> {
    let mut keys: Vec<(usize, Regime)> = rows.iter().map(|r| (r.n_t, r.regime)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(n_t, regime)| {
            let group: Vec<&RecoveryRow> = rows.iter().filter(|r| r.n_t == n_t && r.regime == regime).collect();
            let n = group.len() as f64;
            RecoverySummary {
                n_t,
                regime,
                alpha: group[0].alpha,
                runs: group.len(),
                mean_f1: group.iter().map(|r| r.f1).sum::<f64>() / n,
                mean_density: group.iter().map(|r| r.inferred_density).sum::<f64>() / n,
            }
        })
        .collect()
}
