use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{derive_seed, local_terms, sample_globals, Batch, MaskGradient, Model, ParticleNoise};
use crate::ndcore::{log_sum_exp, Graph, Scalar};

pub(crate) const PARTICLE_STREAM: u64 = 11;

/// `log w_k` for one particle: the global ratio over all perturbations plus
/// the per-cell ratios, with one global draw shared by every cell.
pub fn particle_log_weight<S: Scalar>(model: &Model<S>, batch: &Batch<S>, noise: &ParticleNoise<S>) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let vars = batch.bind(&mut g);
    let globals = sample_globals(&mut g, model, &p, noise, MaskGradient::StraightThrough)?;
    let local = local_terms(&mut g, model, &p, &vars, &batch.x, &globals, &noise.basal)?;
    let mut total = 0.0;
    if let Some(r) = globals.log_ratio {
        total += g.value(r).sum().as_f64();
    }
    for v in [local.likelihood, local.basal_prior] {
        total += g.value(v).sum().as_f64();
    }
    total -= g.value(local.basal_log_q).sum().as_f64();
    Ok(total)
}

/// Log importance weights of `k` particles. Particle `j` draws its noise
/// from a seed derived from `(seed, j)`, so the result does not depend on
/// `threads`.
pub fn log_weights<S: Scalar>(model: &Model<S>, batch: &Batch<S>, k: usize, seed: u64, threads: usize) -> Result<Vec<f64>> {
    let one = |j: usize| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PARTICLE_STREAM, j as u64));
        let noise = ParticleNoise::for_model(model, batch.len(), &mut rng);
        particle_log_weight(model, batch, &noise)
    };
    let threads = threads.clamp(1, k.max(1));
    if threads == 1 {
        return (0..k).map(one).collect();
    }
    let mut out = vec![0.0; k];
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let one = &one;
                scope.spawn(move || (w..k).step_by(threads).map(|j| one(j).map(|v| (j, v))).collect::<Result<Vec<_>>>())
            })
            .collect();
        for h in handles {
            for (j, v) in h.join().expect("worker panicked")? {
                out[j] = v;
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// `log (1/K) Σ_k w_k` over the cells of `batch`.
pub fn iwelbo<S: Scalar>(model: &Model<S>, batch: &Batch<S>, k: usize, seed: u64, threads: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::invalid("IWELBO needs K >= 1"));
    }
    let lw = log_weights(model, batch, k, seed, threads)?;
    Ok(log_sum_exp(&lw) - (k as f64).ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IwelboReport {
    pub split: String,
    #[serde(rename = "K")]
    pub k: usize,
    /// Mean over repetitions.
    pub value: f64,
    /// Standard error over repetitions (absent with a single repetition).
    pub stderr: Option<f64>,
    pub repetitions: usize,
    pub cells: usize,
}

/// Repeats [`iwelbo`] with independent seeds and summarizes.
pub fn iwelbo_report<S: Scalar>(
    model: &Model<S>,
    batch: &Batch<S>,
    split: &str,
    k: usize,
    repetitions: usize,
    seed: u64,
    threads: usize,
) -> Result<IwelboReport> {
    if repetitions < 1 {
        return Err(Error::invalid("IWELBO needs at least one repetition"));
    }
    let values = (0..repetitions)
        .map(|r| iwelbo(model, batch, k, derive_seed(seed, PARTICLE_STREAM + 1, r as u64), threads))
        .collect::<Result<Vec<_>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = (repetitions > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    Ok(IwelboReport {
        split: split.to_string(),
        k,
        value: mean,
        stderr,
        repetitions,
        cells: batch.len(),
    })
}
