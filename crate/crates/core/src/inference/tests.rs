use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testutil::{fixture, model_config};
use crate::data::{PerturbDataset, Split};
use crate::error::Result;
use crate::models::{Likelihood, ModelKind};
use crate::ndcore::gradcheck::check_gradients;
use crate::ndcore::{softplus, Bound, Graph, Var};
use crate::stochastic::{bernoulli_log_prob, gaussian_log_prob, DiagGaussian};

const KINDS: [(ModelKind, InferenceMode); 6] = [
    (ModelKind::Sams, InferenceMode::MeanField),
    (ModelKind::Sams, InferenceMode::CorrE),
    (ModelKind::Sams, InferenceMode::CorrZ),
    (ModelKind::Sams, InferenceMode::CorrBoth),
    (ModelKind::Cpa, InferenceMode::CorrBoth),
    (ModelKind::Conditional, InferenceMode::MeanField),
];

#[test]
fn config_validation() {
    let cfg = model_config(ModelKind::Conditional, Likelihood::Gaussian, InferenceMode::CorrE, 2, 2, 2);
    assert!(Model::<f64>::new(cfg, 0).is_err());
    let mut cfg = model_config(ModelKind::Sams, Likelihood::Gaussian, InferenceMode::MeanField, 2, 2, 2);
    cfg.generative.mask_prior = 1.0;
    assert!(Model::<f64>::new(cfg, 0).is_err());
    assert_eq!(InferenceMode::parse("corr_both").unwrap(), InferenceMode::CorrBoth);
}

#[test]
fn parameter_names_and_decay_flags() {
    let cfg = model_config(ModelKind::Sams, Likelihood::GammaPoisson, InferenceMode::MeanField, 3, 2, 4);
    let m = Model::<f64>::new(cfg, 0).unwrap();
    for (name, decays) in [
        ("decoder.layer0.weight", true),
        ("theta_d", false),
        ("q.mask_logits", false),
        ("q.emb_mean", false),
        ("q.emb_std_raw", false),
        ("q.encoder.layer1.bias", true),
    ] {
        let id = m.store.id(name).unwrap_or_else(|| panic!("{name}"));
        assert_eq!(m.store.decays(id), decays, "{name}");
    }
    assert_eq!(m.store.by_name("q.mask_logits").unwrap().shape(), &[3, 2]);
}

#[test]
fn mean_field_log_q_factorizes() {
    let cfg = model_config(ModelKind::Sams, Likelihood::Gaussian, InferenceMode::MeanField, 3, 2, 4);
    let (model, ds) = fixture(cfg, 6, 1);
    let data = PreparedData::new(&model, &ds).unwrap();
    let batch = data.batch(&[0, 1, 2, 3, 4, 5]);
    let s = sample_posterior(&model, &batch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();

    let logits = model.store.by_name("q.mask_logits").unwrap();
    let probs: Vec<f64> = logits.data().iter().map(|&l| crate::ndcore::sigmoid(l)).collect();
    let masks = s.latents.masks.as_ref().unwrap();
    let log_q_m = bernoulli_log_prob(masks.data(), &probs).unwrap();

    let mean = model.store.by_name("q.emb_mean").unwrap();
    let std: Vec<f64> = model.store.by_name("q.emb_std_raw").unwrap().data().iter().map(|&r| softplus(r)).collect();
    let e = s.latents.embeddings.as_ref().unwrap();
    let log_q_e = gaussian_log_prob(e.data(), &DiagGaussian::new(mean.data().to_vec(), std).unwrap()).unwrap();

    let enc = model.variational.encoder.apply(&model.store, &batch.encoded).unwrap();
    let mut log_q_z = 0.0;
    for i in 0..6 {
        let row = enc.row(i);
        let dist = DiagGaussian::new(row[..2].to_vec(), row[2..].iter().map(|&r| softplus(r)).collect()).unwrap();
        log_q_z += dist.log_prob(s.latents.basal.row(i)).unwrap();
    }
    let expected = log_q_m + log_q_e + log_q_z;
    assert!((s.log_q - expected).abs() < 1e-10, "{} vs {expected}", s.log_q);
}

#[test]
fn posterior_samples_are_deterministic() {
    let cfg = model_config(ModelKind::Sams, Likelihood::GammaPoisson, InferenceMode::CorrBoth, 3, 2, 4);
    let (model, ds) = fixture(cfg, 5, 2);
    let data = PreparedData::new(&model, &ds).unwrap();
    let batch = data.batch(&[4, 0, 2]);
    let a = sample_posterior(&model, &batch, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let b = sample_posterior(&model, &batch, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(a, b);
    assert!(a.latents.masks.unwrap().data().iter().all(|&m| m == 0.0 || m == 1.0));
}

#[test]
fn corr_z_without_dosage_encodes_x_with_zero_offset() {
    let cfg = model_config(ModelKind::Sams, Likelihood::Gaussian, InferenceMode::CorrZ, 2, 3, 4);
    let (model, mut ds) = fixture(cfg, 4, 5);
    ds.dosage = Tensor::zeros(&[4, 2]);
    let data = PreparedData::new(&model, &ds).unwrap();
    let batch = data.batch(&[0, 1, 2, 3]);
    let noise = ParticleNoise::for_model(&model, 4, &mut ChaCha8Rng::seed_from_u64(1));
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let vars = batch.bind(&mut g);
    let globals = sample_globals(&mut g, &model, &p, &noise, MaskGradient::StraightThrough).unwrap();
    let local = local_terms(&mut g, &model, &p, &vars, &batch.x, &globals, &noise.basal).unwrap();

    let input = Tensor::hcat(&[&batch.encoded, &Tensor::zeros(&[4, 3])]).unwrap();
    let enc = model.variational.encoder.apply(&model.store, &input).unwrap();
    for i in 0..4 {
        for k in 0..3 {
            let expected = enc.at(i, k) + softplus(enc.at(i, 3 + k)) * noise.basal.at(i, k);
            assert!((g.value(local.basal).at(i, k) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn global_weights_contract() {
    let d = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    let w = global_weights(&d, &[4, 2, 5]).unwrap();
    assert_eq!(w, vec![0.5, 0.5, 0.0]);
    assert_eq!(global_weights(&d, &[2, 1, 0]).unwrap(), vec![1.0, 1.0, 0.0]);
    assert!(global_weights(&d, &[2, 0, 3]).is_err());
}

fn l_mb(model: &Model<f64>, data: &PreparedData<f64>, rows: &[usize], noise: &[ParticleNoise<f64>], counts: &[usize]) -> f64 {
    let batch = data.batch(rows);
    let w = global_weights(&batch.dosage, counts).unwrap();
    let noise: Vec<_> = noise.iter().map(|n| n.select_cells(rows)).collect();
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let t = elbo_minibatch(&mut g, model, &p, &batch, &noise, &w, MaskGradient::StraightThrough).unwrap();
    g.value(t.objective).data()[0]
}

#[test]
fn full_batch_and_exhaustive_batches_recover_the_elbo() {
    for &(kind, mode) in &KINDS {
        let cfg = model_config(kind, Likelihood::GammaPoisson, mode, 4, 3, 5);
        let (model, ds) = fixture(cfg, 20, 11);
        let data = PreparedData::new(&model, &ds).unwrap();
        let all: Vec<usize> = (0..20).collect();
        let counts = ds.perturbation_counts(&all);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<_> = (0..2).map(|_| ParticleNoise::for_model(&model, 20, &mut rng)).collect();
        let full = l_mb(&model, &data, &all, &noise, &counts);

        let mut order = all.clone();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        for b in [4, 5, 10] {
            let batches: Vec<&[usize]> = order.chunks(b).collect();
            let mean = batches.iter().map(|rows| l_mb(&model, &data, rows, &noise, &counts)).sum::<f64>()
                / batches.len() as f64;
            let expected = full * b as f64 / 20.0;
            assert!((mean - expected).abs() < 1e-10 * expected.abs().max(1.0), "{kind:?} {mode:?} b={b}");
        }
    }
}

#[test]
fn batch_without_a_perturbation_has_no_prior_term_for_it() {
    let cfg = model_config(ModelKind::Sams, Likelihood::Gaussian, InferenceMode::MeanField, 2, 2, 3);
    let (mut model, ds) = fixture(cfg, 6, 3);
    let data = PreparedData::new(&model, &ds).unwrap();
    // rows 0, 2, 4 all carry perturbation 0
    let rows = [0, 2, 4];
    let counts = ds.perturbation_counts(&(0..6).collect::<Vec<_>>());
    let noise = vec![ParticleNoise::for_model(&model, 6, &mut ChaCha8Rng::seed_from_u64(2))];
    let before = l_mb(&model, &data, &rows, &noise, &counts);
    // perturbation 1's posterior does not matter to this batch
    let id = model.store.id("q.emb_mean").unwrap();
    let mut mean = model.store.get(id).clone();
    mean.row_mut(1).iter_mut().for_each(|v| *v += 3.0);
    model.store.set(id, mean).unwrap();
    assert_eq!(l_mb(&model, &data, &rows, &noise, &counts), before);
}

/// Checks every parameter except the mask logits under straight-through
/// sampling, then the mask logits under relaxed sampling.
fn check_elbo_gradients(model: &Model<f64>, ds: &PerturbDataset<f64>, seed: u64) {
    let data = PreparedData::new(model, ds).unwrap();
    let rows: Vec<usize> = (0..ds.n_cells()).collect();
    let batch = data.batch(&rows);
    let counts = ds.perturbation_counts(&rows);
    let w = global_weights(&batch.dosage, &counts).unwrap();
    let noise = vec![ParticleNoise::for_model(model, rows.len(), &mut ChaCha8Rng::seed_from_u64(seed))];
    let ids: Vec<_> = model.store.ids().collect();
    let logits = model.variational.mask_logits;

    for mg in [MaskGradient::StraightThrough, MaskGradient::Relaxed] {
        let checked: Vec<_> = ids
            .iter()
            .copied()
            .filter(|&id| (Some(id) == logits) == (mg == MaskGradient::Relaxed))
            .collect();
        if checked.is_empty() {
            continue;
        }
        let inputs: Vec<Tensor<f64>> = checked.iter().map(|&id| model.store.get(id).clone()).collect();
        let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let vars = ids
                .iter()
                .map(|&id| match checked.iter().position(|&c| c == id) {
                    Some(k) => v[k],
                    None => g.constant(model.store.get(id).clone()),
                })
                .collect();
            let p = Bound::from_vars(vars);
            let t = elbo_minibatch(g, model, &p, &batch, &noise, &w, mg)?;
            Ok(t.objective)
        };
        let r = check_gradients(&inputs, 1e-5, f).unwrap();
        assert!(
            r.max_rel_err < 1e-4,
            "{:?} {:?} {mg:?}: {} {r:?}",
            model.kind(),
            model.variational.mode,
            model.store.name(checked[r.worst.0])
        );
    }
}

#[test]
fn elbo_gradients_match_finite_differences() {
    for likelihood in [Likelihood::GammaPoisson, Likelihood::Gaussian] {
        for (k, &(kind, mode)) in KINDS.iter().enumerate() {
            let cfg = model_config(kind, likelihood, mode, 2, 3, 4);
            let (mut model, ds) = fixture(cfg, 5, 20 + k as u64);
            // move the logits off zero so both mask outcomes carry weight
            if let Some(id) = model.variational.mask_logits {
                let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
                let shape = model.store.get(id).shape().to_vec();
                let v: Vec<f64> = (0..shape.iter().product()).map(|_| rng.random_range(-1.5..1.5)).collect();
                model.store.set(id, Tensor::new(shape, v).unwrap()).unwrap();
            }
            check_elbo_gradients(&model, &ds, 7 + k as u64);
        }
    }
}

#[test]
fn corr_z_with_zero_masks_reduces_to_mean_field() {
    let cfg_z = model_config(ModelKind::Sams, Likelihood::GammaPoisson, InferenceMode::CorrZ, 3, 2, 4);
    let cfg_m = model_config(ModelKind::Sams, Likelihood::GammaPoisson, InferenceMode::MeanField, 3, 2, 4);
    let (mut mz, ds) = fixture(cfg_z, 9, 6);
    let mut mm = Model::<f64>::new(cfg_m, 99).unwrap();
    mm.encoder_stats = mz.encoder_stats.clone();
    let id = mz.store.id("q.mask_logits").unwrap();
    mz.store.set(id, Tensor::full(&[3, 2], -1000.0)).unwrap();
    for id in mm.store.ids().collect::<Vec<_>>() {
        let name = mm.store.name(id).to_string();
        let src = mz.store.by_name(&name).unwrap();
        let value = if name == "q.encoder.layer0.weight" {
            src.select_rows(&(0..4).collect::<Vec<_>>())
        } else {
            src.clone()
        };
        mm.store.set(id, value).unwrap();
    }
    let data = PreparedData::new(&mz, &ds).unwrap();
    let rows: Vec<usize> = (0..9).collect();
    let counts = ds.perturbation_counts(&rows);
    let noise: Vec<_> = (0..3)
        .map(|s| ParticleNoise::for_model(&mz, 9, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect();
    let a = l_mb(&mz, &data, &rows, &noise, &counts);
    let b = l_mb(&mm, &data, &rows, &noise, &counts);
    assert!((a - b).abs() < 1e-12 * a.abs(), "{a} vs {b}");
}

#[test]
fn elbo_standard_error_shrinks_with_particles() {
    let cfg = model_config(ModelKind::Sams, Likelihood::GammaPoisson, InferenceMode::MeanField, 3, 2, 4);
    let (model, ds) = fixture(cfg, 8, 4);
    let data = PreparedData::new(&model, &ds).unwrap();
    let rows: Vec<usize> = (0..8).collect();
    let counts = ds.perturbation_counts(&rows);
    let reps = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sd = |p: usize, rng: &mut ChaCha8Rng| {
        let vals: Vec<f64> = (0..reps)
            .map(|_| {
                let noise: Vec<_> = (0..p).map(|_| ParticleNoise::for_model(&model, 8, rng)).collect();
                l_mb(&model, &data, &rows, &noise, &counts)
            })
            .collect();
        let m = vals.iter().sum::<f64>() / reps as f64;
        (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
    };
    let base = sd(1, &mut rng);
    for p in [4, 16, 64] {
        let ratio = sd(p, &mut rng) / base * (p as f64).sqrt();
        assert!((ratio - 1.0).abs() < 0.25, "P={p}: scaled ratio {ratio}");
    }
}

#[test]
fn adam_first_step_zero_gradient_and_decay() {
    let mut store = crate::ndcore::ParamStore::<f64>::new();
    store.add("w", Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap(), true).unwrap();
    store.add("logit", Tensor::from_rows(&[vec![3.0]]).unwrap(), false).unwrap();
    let adam = Adam::new(0.1, 0.0);
    let mut state = AdamState::new(&store);
    let g = vec![Tensor::from_rows(&[vec![0.3, -4.0, 0.0]]).unwrap(), Tensor::from_rows(&[vec![2.0]]).unwrap()];
    adam.step(&mut store, &g, &mut state).unwrap();
    let w = store.by_name("w").unwrap().data().to_vec();
    assert!((w[0] - (1.0 - 0.1)).abs() < 1e-6);
    assert!((w[1] - (-2.0 + 0.1)).abs() < 1e-6);
    assert_eq!(w[2], 0.5);

    let before = store.clone();
    let zeros = vec![Tensor::zeros(&[1, 3]), Tensor::zeros(&[1, 1])];
    let mut fresh = AdamState::new(&store);
    adam.step(&mut store, &zeros, &mut fresh).unwrap();
    assert_eq!(store.by_name("w"), before.by_name("w"));

    let decay = Adam::new(0.1, 0.5);
    let mut fresh = AdamState::new(&store);
    decay.step(&mut store, &zeros, &mut fresh).unwrap();
    assert!((store.by_name("w").unwrap().data()[0] - w[0] * 0.95).abs() < 1e-15);
    assert_eq!(store.by_name("logit"), before.by_name("logit"));
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let mut store = crate::ndcore::ParamStore::<f64>::new();
    store.add("x", Tensor::from_rows(&[vec![0.0, 4.0]]).unwrap(), false).unwrap();
    let target = [3.0, -1.0];
    let adam = Adam::new(0.02, 0.0);
    let mut state = AdamState::new(&store);
    let dist = |s: &crate::ndcore::ParamStore<f64>| {
        let x = s.by_name("x").unwrap().data();
        ((x[0] - target[0]).powi(2) + (x[1] - target[1]).powi(2)).sqrt()
    };
    let mut prev = dist(&store);
    for step in 1..=200 {
        let x = store.by_name("x").unwrap().data().to_vec();
        let g = Tensor::from_rows(&[vec![2.0 * (x[0] - target[0]), 2.0 * (x[1] - target[1])]]).unwrap();
        adam.step(&mut store, &[g], &mut state).unwrap();
        let d = dist(&store);
        if step > 10 {
            assert!(d < prev, "step {step}: {d} >= {prev}");
        }
        prev = d;
    }
}

fn train_fixture(n: usize, seed: u64) -> (Model<f64>, PerturbDataset<f64>) {
    train_fixture_with(Likelihood::GammaPoisson, n, seed)
}

fn train_fixture_with(likelihood: Likelihood, n: usize, seed: u64) -> (Model<f64>, PerturbDataset<f64>) {
    let mut cfg = model_config(ModelKind::Sams, likelihood, InferenceMode::MeanField, 4, 4, 12);
    cfg.generative.decoder_hidden = vec![16];
    cfg.variational.encoder_hidden = vec![16];
    let (truth, ds) = fixture(cfg.clone(), n, seed);
    let mut ds = crate::data::make_splits(&ds, [0.8, 0.2, 0.0], seed, true).unwrap();
    if likelihood == Likelihood::GammaPoisson {
        ds.library_sizes = Some((0..n).map(|i| ds.x.row(i).iter().sum()).collect());
    }
    let model = Model::for_dataset(truth.config.clone(), &ds, seed + 100).unwrap();
    (model, ds)
}

fn quick_config(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        learning_rate: 1e-2,
        weight_decay: 1e-6,
        steps,
        particles: 1,
        eval_every: 10,
        val_particles: 1,
        seed: 5,
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (mut model, ds) = train_fixture(40, 1);
    let before = model.store.clone();
    let mut cfg = quick_config(5);
    cfg.learning_rate = 0.0;
    let mut state = TrainState::new(&model);
    train(&mut model, &ds, &cfg, &mut state, |_, _, _| Ok(())).unwrap();
    for id in before.ids() {
        assert_eq!(before.get(id), model.store.get(id), "{}", before.name(id));
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let (model, ds) = train_fixture(60, 2);
    let run = |steps: u64| {
        let mut m = model.clone();
        let mut state = TrainState::new(&m);
        let out = train(&mut m, &ds, &quick_config(steps), &mut state, |_, _, _| Ok(())).unwrap();
        (m, state, out)
    };
    let (ma, _, a) = run(30);
    let (_, _, b) = run(30);
    let strip = |rows: &[MetricRow]| rows.iter().map(|r| (r.step, r.train_neg_elbo, r.val_elbo)).collect::<Vec<_>>();
    assert_eq!(strip(&a.metrics), strip(&b.metrics));
    assert_eq!(a.metrics.len(), 3);

    let (mut mr, mut state, _) = run(20);
    let rest = train(&mut mr, &ds, &quick_config(30), &mut state, |_, _, _| Ok(())).unwrap();
    assert_eq!(strip(&rest.metrics), strip(&a.metrics[2..]));
    for id in ma.store.ids() {
        assert_eq!(ma.store.get(id), mr.store.get(id));
    }
}

#[test]
fn training_improves_the_objective_and_tracks_the_best() {
    let (mut model, ds) = train_fixture_with(Likelihood::Gaussian, 200, 3);
    let mut state = TrainState::new(&model);
    let out = train(&mut model, &ds, &quick_config(500), &mut state, |_, _, _| Ok(())).unwrap();
    let first = out.metrics[0].train_neg_elbo;
    let last = out.metrics.last().unwrap().train_neg_elbo;
    assert!(last < first, "{first} -> {last}");
    let best = state.best.as_ref().unwrap();
    assert!(out.metrics.iter().all(|r| r.val_elbo.unwrap() <= best.val_elbo));
}

#[test]
fn non_finite_loss_reports_step_and_term() {
    let (mut model, ds) = train_fixture(20, 4);
    let id = model.store.id("theta_d").unwrap();
    model.store.set(id, Tensor::full(&[1, 12], f64::NAN)).unwrap();
    let mut state = TrainState::new(&model);
    let err = train(&mut model, &ds, &quick_config(3), &mut state, |_, _, _| Ok(())).unwrap_err();
    match err {
        crate::Error::NonFinite { term, step } => {
            assert_eq!(term, "likelihood");
            assert_eq!(step, Some(1));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn training_without_validation_keeps_no_best() {
    let (mut model, mut ds) = train_fixture(30, 5);
    ds.split = vec![Split::Train; 30];
    let mut state = TrainState::new(&model);
    let out = train(&mut model, &ds, &quick_config(10), &mut state, |_, _, _| Ok(())).unwrap();
    assert!(state.best.is_none());
    assert!(out.metrics[0].val_elbo.is_none());
}
