use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{PerturbDataset, Split};
use crate::error::{Error, Result};
use crate::ndcore::Scalar;

/// Seeded train/val/test assignment. With `stratify`, rows are grouped by
/// dosage pattern and each group is split in the requested proportions;
/// cumulative rounding keeps the global split sizes within one row of
/// `fractions · N`.
pub fn make_splits<S: Scalar>(
    ds: &PerturbDataset<S>,
    fractions: [f64; 3],
    seed: u64,
    stratify: bool,
) -> Result<PerturbDataset<S>> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions must be in [0,1] and sum to 1, got {fractions:?}")));
    }
    let n = ds.n_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    if stratify {
        let mut keys: Vec<&[S]> = Vec::new();
        for i in 0..n {
            let row = ds.dosage.row(i);
            match keys.iter().position(|k| *k == row) {
                Some(g) => groups[g].push(i),
                None => {
                    keys.push(row);
                    groups.push(vec![i]);
                }
            }
        }
    } else {
        groups.push((0..n).collect());
    }

    let mut out = ds.clone();
    let cut_train = fractions[0];
    let cut_val = fractions[0] + fractions[1];
    let mut seen = 0usize;
    let (mut assigned_train, mut assigned_val) = (0usize, 0usize);
    for group in &mut groups {
        group.shuffle(&mut rng);
        seen += group.len();
        let train_total = (cut_train * seen as f64).round() as usize;
        let val_total = ((cut_val * seen as f64).round() as usize).saturating_sub(train_total);
        let n_train = train_total - assigned_train;
        let n_val = val_total.saturating_sub(assigned_val).min(group.len() - n_train);
        for (k, &i) in group.iter().enumerate() {
            out.split[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        assigned_train += n_train;
        assigned_val += n_val;
    }

    if stratify {
        let all = ds.perturbation_counts(&(0..n).collect::<Vec<_>>());
        let train = out.perturbation_counts(&out.rows_in(Split::Train));
        for (t, (&a, &tr)) in all.iter().zip(&train).enumerate() {
            if a > 0 && tr == 0 {
                return Err(Error::invalid(format!(
                    "perturbation {:?} has no training cells after splitting",
                    ds.perturbation_names[t]
                )));
            }
        }
    }
    Ok(out)
}
