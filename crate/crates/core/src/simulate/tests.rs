use super::*;

fn small(seed: u64) -> SimConfig {
    SimConfig {
        n_perturbations: 6,
        cells_per_perturbation: 30,
        pilot_draws: 2000,
        seed,
        ..SimConfig::default()
    }
}

#[test]
fn fixed_sparsity_alpha_follows_the_schedule() {
    assert!((fixed_sparsity_alpha(50) / 1e-9 - 1.0).abs() < 1e-12);
    assert!((fixed_sparsity_alpha(100) / 1e-18 - 1.0).abs() < 1e-12);
    assert!((fixed_sparsity_alpha(200) / 1e-36 - 1.0).abs() < 1e-12);
    assert_eq!(fixed_sparsity_alpha(0), 0.5);
    assert_eq!(fixed_sparsity_alpha(5000), 1e-300);
}

#[test]
fn config_validation_names_the_key() {
    let cfg = SimConfig {
        noise_fraction: 1.5,
        ..SimConfig::default()
    };
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("noise_fraction"), "{msg}");
    assert!(SimConfig {
        latent_dim: 0,
        ..SimConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn simulated_cells_have_one_perturbation_each() {
    let sim = simulate_dataset(&small(1)).unwrap();
    let ds = &sim.dataset;
    assert_eq!((ds.n_cells(), ds.n_features(), ds.n_perturbations()), (180, 50, 6));
    for i in 0..ds.n_cells() {
        let row = ds.dosage.row(i);
        assert_eq!(row.iter().sum::<f64>(), 1.0);
        assert_eq!(row[i / 30], 1.0);
    }
    assert_eq!(sim.truth.masks.shape(), &[6, 15]);
    assert!(sim.truth.masks.data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(sim.truth.noise_variance.len(), 50);
    assert!(sim.truth.noise_variance.iter().all(|&v| v > 0.0));
}

#[test]
fn simulation_is_reproducible_under_its_seed() {
    let a = simulate_dataset(&small(3)).unwrap();
    let b = simulate_dataset(&small(3)).unwrap();
    assert_eq!(a.dataset.x, b.dataset.x);
    assert_eq!(a.truth.masks, b.truth.masks);
    assert_eq!(a.truth.noise_variance, b.truth.noise_variance);
    let c = simulate_dataset(&small(4)).unwrap();
    assert_ne!(a.dataset.x, c.dataset.x);

    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_simulation(&a, da.path()).unwrap();
    write_simulation(&b, db.path()).unwrap();
    for f in ["X.csv", "D.csv", "obs.csv", TRUE_MASKS_FILE, TRUE_EMBEDDINGS_FILE, SIM_MANIFEST_FILE] {
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join(f)).unwrap();
        assert_eq!(read(&da), read(&db), "{f}");
    }
    assert_eq!(load_true_masks(da.path()).unwrap().unwrap(), a.truth.binary_masks());
    let manifest: SimManifest = serde_json::from_slice(&std::fs::read(da.path().join(SIM_MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.config, small(3));
    assert_eq!(manifest.decoder.len(), 6);
}

#[test]
fn decoder_layers_start_orthogonal() {
    let sim = simulate_dataset(&small(2)).unwrap();
    let params = &sim.truth.decoder_params;
    for id in params.ids().filter(|&id| params.name(id).ends_with("weight")) {
        let w = params.get(id);
        // the shorter side has orthonormal vectors
        let gram = if w.rows() <= w.cols() {
            w.matmul(&w.transpose()).unwrap()
        } else {
            w.transpose().matmul(w).unwrap()
        };
        for i in 0..gram.rows() {
            for j in 0..gram.cols() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((gram.at(i, j) - e).abs() < 1e-10, "{}", params.name(id));
            }
        }
    }
}

#[test]
fn truth_laws_match_their_parameters() {
    let (mut ones, mut entries, mut emb_sum) = (0.0, 0.0, 0.0);
    for seed in 0..40 {
        let sim = simulate_dataset(&SimConfig {
            cells_per_perturbation: 1,
            pilot_draws: 10,
            seed,
            ..SimConfig::default()
        })
        .unwrap();
        ones += sim.truth.masks.sum();
        entries += sim.truth.masks.len() as f64;
        emb_sum += sim.truth.embeddings.sum();
    }
    let density = ones / entries;
    assert!((density - 0.1).abs() < 0.02, "density {density}");
    assert!((emb_sum / entries - 5.0).abs() < 0.1);
}

#[test]
fn signal_carries_the_target_share_of_variance() {
    let sim = simulate_dataset(&SimConfig {
        cells_per_perturbation: 500,
        seed: 9,
        ..SimConfig::default()
    })
    .unwrap();
    let fractions = signal_fraction(&sim);
    assert_eq!(fractions.len(), 50);
    for f in fractions {
        assert!((f - 0.8).abs() < 0.02, "{f}");
    }
}

#[test]
fn recovery_rows_append_under_one_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("recovery.csv");
    let row = |seed| RecoveryRow {
        n_t: 50,
        regime: Regime::FixedSparsity,
        alpha: fixed_sparsity_alpha(50),
        f1: 0.5,
        inferred_density: 0.1,
        seed,
    };
    append_recovery_csv(&path, &[row(0)]).unwrap();
    append_recovery_csv(&path, &[row(1)]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n_t,regime,alpha,f1,inferred_density,seed");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("50,fixed_sparsity,1e-9,"));
    assert!(lines[2].ends_with(",1"));

    let summary = summarize_recovery(&[row(0), row(1)]);
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0].runs, 2);
}

#[test]
fn recovery_errors_carry_grid_coordinates() {
    let cfg = RecoveryConfig {
        sim: SimConfig {
            n_perturbations: 2,
            pilot_draws: 10,
            ..SimConfig::default()
        },
        train: crate::inference::TrainConfig {
            learning_rate: f64::NAN,
            ..RecoveryConfig::default().train
        },
        ..RecoveryConfig::default()
    };
    let err = run_recovery_cell(&cfg, 7, 3, Regime::FixedPrior).unwrap_err();
    assert!(err.to_string().contains("n_t=3, regime=fixed_prior, seed=7"), "{err}");
    assert!(err.is_validation());
}

#[test]
fn scoring_the_true_mask_gives_perfect_f1() {
    let sim = simulate_dataset(&small(5)).unwrap();
    let truth = sim.truth.binary_masks();
    let est = crate::evaluation::MaskEstimate::new(sim.truth.masks.map(|m| if m > 0.5 { 0.9 } else { 0.1 }));
    assert_eq!(crate::evaluation::mask_f1(&est.binary(), &truth).unwrap(), 1.0);
}
