use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, elbo_minibatch, global_weights, Adam, AdamState, MaskGradient, Model, ParticleNoise, PreparedData};
use crate::data::{PerturbDataset, Split};
use crate::error::{Error, Result};
use crate::ndcore::{Graph, ParamStore, Scalar, Tensor};

const STEP_STREAM: u64 = 1;
const EPOCH_STREAM: u64 = 2;
const VAL_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Total optimizer steps (including steps already taken when resuming).
    pub steps: u64,
    /// Particles per training step.
    pub particles: usize,
    /// Steps between metric rows, validation and checkpoints.
    pub eval_every: u64,
    /// Particles for the validation ELBO.
    pub val_particles: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            learning_rate: 3e-4,
            weight_decay: 1e-6,
            steps: 150_000,
            particles: 1,
            eval_every: 1000,
            val_particles: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.particles == 0 || self.val_particles == 0 || self.eval_every == 0 {
            return Err(Error::invalid(
                "batch_size, particles, val_particles and eval_every must be >= 1",
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    /// Mean per-cell negative minibatch ELBO since the previous row.
    pub train_neg_elbo: f64,
    /// Per-cell validation ELBO, when the dataset has validation cells.
    pub val_elbo: Option<f64>,
    pub wall_ms: u64,
}

/// Parameters with the best validation ELBO seen so far.
#[derive(Clone, Debug)]
pub struct BestParams<S> {
    pub step: u64,
    pub val_elbo: f64,
    pub store: ParamStore<S>,
}

/// Optimizer progress; enough to resume a run.
#[derive(Clone, Debug)]
pub struct TrainState<S> {
    pub step: u64,
    pub adam: AdamState<S>,
    pub best: Option<BestParams<S>>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: &Model<S>) -> Self {
        TrainState {
            step: 0,
            adam: AdamState::new(&model.store),
            best: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricRow>,
}

fn batch_rows(train: &[usize], batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let n = train.len();
    if batch_size >= n {
        return train.to_vec();
    }
    let per_epoch = n.div_ceil(batch_size) as u64;
    let s = step - 1;
    let mut perm = train.to_vec();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, EPOCH_STREAM, s / per_epoch)));
    let k = (s % per_epoch) as usize;
    perm[k * batch_size..((k + 1) * batch_size).min(n)].to_vec()
}

/// Per-cell ELBO of `rows` with globals weighted by `ñ_t / n_t`.
pub fn validation_elbo<S: Scalar>(
    model: &Model<S>,
    data: &PreparedData<S>,
    rows: &[usize],
    train_counts: &[usize],
    particles: usize,
    seed: u64,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::invalid("validation requires at least one cell"));
    }
    let batch = data.batch(rows);
    let weights = global_weights(&batch.dosage, train_counts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<_> = (0..particles)
        .map(|_| ParticleNoise::for_model(model, rows.len(), &mut rng))
        .collect();
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let terms = elbo_minibatch(&mut g, model, &p, &batch, &noise, &weights, MaskGradient::StraightThrough)?;
    Ok(g.value(terms.objective).data()[0].as_f64() / rows.len() as f64)
}

/// Runs Adam on the negative minibatch ELBO from `state.step` up to
/// `cfg.steps`. `on_eval` sees every metric row together with the current
/// model and state, which is where callers write checkpoints.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    ds: &PerturbDataset<S>,
    cfg: &TrainConfig,
    state: &mut TrainState<S>,
    mut on_eval: impl FnMut(&MetricRow, &Model<S>, &TrainState<S>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = PreparedData::new(model, ds)?;
    let train_rows = ds.rows_in(Split::Train);
    if train_rows.is_empty() {
        return Err(Error::invalid("the training split is empty"));
    }
    let val_rows = ds.rows_in(Split::Val);
    let counts = ds.perturbation_counts(&train_rows);
    let adam = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let start = Instant::now();
    let mut metrics = Vec::new();
    let (mut window_sum, mut window_len) = (0.0, 0u64);

    while state.step < cfg.steps {
        let step = state.step + 1;
        let rows = batch_rows(&train_rows, cfg.batch_size, cfg.seed, step);
        let batch = data.batch(&rows);
        let weights = global_weights(&batch.dosage, &counts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STEP_STREAM, step));
        let noise: Vec<_> = (0..cfg.particles)
            .map(|_| ParticleNoise::for_model(model, rows.len(), &mut rng))
            .collect();

        let mut g = Graph::new();
        let p = model.store.bind(&mut g, true);
        let terms = elbo_minibatch(&mut g, model, &p, &batch, &noise, &weights, MaskGradient::StraightThrough)?;
        let loss = g.scale(terms.objective, S::lit(-1.0 / rows.len() as f64));
        let loss_value = g.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            let term = terms
                .named()
                .iter()
                .find(|(_, v)| !g.value(*v).all_finite())
                .map_or("objective", |(name, _)| *name);
            return Err(Error::NonFinite {
                term: term.into(),
                step: Some(step),
            });
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor<S>> = p
            .vars()
            .iter()
            .map(|&v| grads.take(v).expect("parameter gradient"))
            .collect();
        adam.step(&mut model.store, &grads, &mut state.adam)?;
        if !model.store.all_finite() {
            return Err(Error::NonFinite {
                term: "parameters".into(),
                step: Some(step),
            });
        }
        state.step = step;
        window_sum += loss_value;
        window_len += 1;

        if step.is_multiple_of(cfg.eval_every) || step == cfg.steps {
            let val_elbo = if val_rows.is_empty() {
                None
            } else {
                let seed = derive_seed(cfg.seed, VAL_STREAM, 0);
                Some(validation_elbo(model, &data, &val_rows, &counts, cfg.val_particles, seed)?)
            };
            if let Some(v) = val_elbo {
                if state.best.as_ref().is_none_or(|b| v > b.val_elbo) {
                    state.best = Some(BestParams {
                        step,
                        val_elbo: v,
                        store: model.store.clone(),
                    });
                }
            }
            let row = MetricRow {
                step,
                train_neg_elbo: window_sum / window_len as f64,
                val_elbo,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            log::info!(
                "step {step}: train -ELBO/cell {:.4}{}",
                row.train_neg_elbo,
                val_elbo.map_or(String::new(), |v| format!(", val ELBO/cell {v:.4}"))
            );
            on_eval(&row, model, state)?;
            metrics.push(row);
            window_sum = 0.0;
            window_len = 0;
        }
    }
    Ok(TrainOutcome { metrics })
}
