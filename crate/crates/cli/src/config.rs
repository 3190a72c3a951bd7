//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Every key the runner understands.
pub const KNOWN_KEYS: &[&str] = &[
    // shared
    "dataset",
    "out",
    "control",
    "seed",
    "threads",
    // model
    "model",
    "likelihood",
    "inference",
    "latent_dim",
    "mask_prior",
    "embedding_prior_var",
    "decoder_hidden",
    "encoder_hidden",
    "embedding_hidden",
    "temperature",
    // training
    "batch_size",
    "learning_rate",
    "weight_decay",
    "steps",
    "particles",
    "eval_every",
    "val_particles",
    "split_train",
    "split_val",
    "split_test",
    "stratify",
    // evaluation
    "eval_split",
    "iwelbo_particles",
    "iwelbo_repetitions",
    "ate_particles",
    "ate_samples",
    "ate_targets",
    // simulation
    "sim_latent_dim",
    "sim_features",
    "sim_perturbations",
    "sim_cells_per_perturbation",
    "sim_mask_density",
    "sim_embedding_mean",
    "sim_embedding_var",
    "sim_decoder_hidden",
    "noise_fraction",
    "pilot_draws",
    // recovery study
    "recovery_n",
    "recovery_regimes",
    "recovery_seeds",
    "fixed_prior_alpha",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::validation(format!("config line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::validation(format!("config line {}: unknown key `{key}`", n + 1)));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::validation(format!("config line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(RunConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets a key from a command-line flag, overriding the file.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        debug_assert!(KNOWN_KEYS.contains(&key), "unknown key {key}");
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::validation(format!("config key `{key}`: cannot parse `{v}`: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list; an empty value is the empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>()
                            .map_err(|e| CliError::validation(format!("config key `{key}`: cannot parse `{s}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        Ok(self.list(key)?.unwrap_or(default))
    }

    /// Wraps a parse or validation error from the core with the key name.
    pub fn with_key<T>(key: &str, r: sams_core::Result<T>) -> Result<T, CliError> {
        r.map_err(|e| CliError::validation(format!("config key `{key}`: {e}")))
    }
}
