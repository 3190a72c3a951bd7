use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use sams_core::checkpoint::{load_checkpoint, save_checkpoint};
use sams_core::data::{load_dataset, make_splits, write_matrix_csv, Observation, PerturbDataset, Split};
use sams_core::evaluation::{self, AteMethod, EvalOptions};
use sams_core::inference::{self, InferenceMode, MetricRow, Model, ModelConfig, TrainConfig, TrainState, VariationalConfig};
use sams_core::models::{GenerativeConfig, Likelihood, ModelKind};
use sams_core::ndcore::Tensor;
use sams_core::simulate::{
    self, append_recovery_csv, load_true_masks, summarize_recovery, RecoveryConfig, Regime, SimConfig,
};

use crate::config::RunConfig;
use crate::{CliError, Common};

type CliResult<T> = Result<T, CliError>;

pub const BEST_CHECKPOINT: &str = "checkpoint.bin";
pub const LAST_CHECKPOINT: &str = "last.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SPLIT_FILE: &str = "split.csv";
pub const REPORT_FILE: &str = "eval_report.json";

/// Loads the config file and applies the common flags on top of it.
fn run_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", seed);
    }
    if let Some(out) = &common.out {
        cfg.set("out", out.display());
    }
    if let Some(control) = &common.control {
        cfg.set("control", control);
    }
    if let Some(threads) = common.threads {
        cfg.set("threads", threads);
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = cfg
        .raw("out")
        .filter(|s| !s.is_empty())
        .ok_or_else(|| CliError::validation("an output directory is required (--out or `out`)"))?;
    let out = PathBuf::from(out);
    fs::create_dir_all(&out).map_err(|e| CliError::validation(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn dataset_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> CliResult<PathBuf> {
    let dir = flag
        .or_else(|| cfg.raw("dataset").map(PathBuf::from))
        .ok_or_else(|| CliError::validation("a dataset directory is required (--data or `dataset`)"))?;
    for f in ["X.csv", "D.csv"] {
        if !dir.join(f).is_file() {
            return Err(CliError::validation(format!("dataset {} has no {f}", dir.display())));
        }
    }
    Ok(dir)
}

fn existing_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::validation(format!("{what} {} does not exist", path.display())))
    }
}

fn sim_config(cfg: &RunConfig) -> CliResult<SimConfig> {
    let d = SimConfig::default();
    Ok(SimConfig {
        latent_dim: cfg.get_or("sim_latent_dim", d.latent_dim)?,
        n_features: cfg.get_or("sim_features", d.n_features)?,
        n_perturbations: cfg.get_or("sim_perturbations", d.n_perturbations)?,
        cells_per_perturbation: cfg.get_or("sim_cells_per_perturbation", d.cells_per_perturbation)?,
        mask_density: cfg.get_or("sim_mask_density", d.mask_density)?,
        embedding_mean: cfg.get_or("sim_embedding_mean", d.embedding_mean)?,
        embedding_var: cfg.get_or("sim_embedding_var", d.embedding_var)?,
        decoder_hidden: cfg.list_or("sim_decoder_hidden", d.decoder_hidden)?,
        noise_fraction: cfg.get_or("noise_fraction", d.noise_fraction)?,
        pilot_draws: cfg.get_or("pilot_draws", d.pilot_draws)?,
        seed: cfg.get_or("seed", d.seed)?,
    })
}

fn split_fractions(cfg: &RunConfig) -> CliResult<[f64; 3]> {
    Ok([
        cfg.get_or("split_train", 0.8)?,
        cfg.get_or("split_val", 0.1)?,
        cfg.get_or("split_test", 0.1)?,
    ])
}

pub fn simulate(common: &Common) -> CliResult<()> {
    let cfg = run_config(common)?;
    let sim_cfg = sim_config(&cfg)?;
    sim_cfg.validate()?;
    let fractions = split_fractions(&cfg)?;
    let out = out_dir(&cfg)?;
    let mut sim = simulate::simulate_dataset(&sim_cfg)?;
    sim.dataset = make_splits(&sim.dataset, fractions, sim_cfg.seed, true)?;
    simulate::write_simulation(&sim, &out)?;
    info!(
        "simulated {} cells x {} features with {} perturbations into {}",
        sim.dataset.n_cells(),
        sim.dataset.n_features(),
        sim.dataset.n_perturbations(),
        out.display()
    );
    Ok(())
}

fn model_config(cfg: &RunConfig, ds: &PerturbDataset<f64>) -> CliResult<ModelConfig> {
    let kind = match cfg.raw("model") {
        Some(v) => RunConfig::with_key("model", ModelKind::parse(v))?,
        None => ModelKind::Sams,
    };
    let likelihood = match cfg.raw("likelihood") {
        Some(v) => RunConfig::with_key("likelihood", Likelihood::parse(v))?,
        None => match ds.observation {
            Observation::Counts => Likelihood::GammaPoisson,
            Observation::Real => Likelihood::Gaussian,
        },
    };
    let mode = match cfg.raw("inference") {
        Some(v) => RunConfig::with_key("inference", InferenceMode::parse(v))?,
        None => InferenceMode::MeanField,
    };
    Ok(ModelConfig {
        generative: GenerativeConfig {
            kind,
            likelihood,
            latent_dim: cfg.get_or("latent_dim", 100)?,
            n_features: ds.n_features(),
            n_perturbations: ds.n_perturbations(),
            mask_prior: cfg.get_or("mask_prior", 0.001)?,
            embedding_prior_var: cfg.get_or("embedding_prior_var", 1.0)?,
            decoder_hidden: cfg.list_or("decoder_hidden", vec![400])?,
        },
        variational: VariationalConfig {
            mode,
            encoder_hidden: cfg.list_or("encoder_hidden", vec![400])?,
            embedding_hidden: cfg.list_or("embedding_hidden", vec![400])?,
            temperature: cfg.get_or("temperature", 1.0)?,
        },
    })
}

fn train_config(cfg: &RunConfig, base: TrainConfig) -> CliResult<TrainConfig> {
    Ok(TrainConfig {
        batch_size: cfg.get_or("batch_size", base.batch_size)?,
        learning_rate: cfg.get_or("learning_rate", base.learning_rate)?,
        weight_decay: cfg.get_or("weight_decay", base.weight_decay)?,
        steps: cfg.get_or("steps", base.steps)?,
        particles: cfg.get_or("particles", base.particles)?,
        eval_every: cfg.get_or("eval_every", base.eval_every)?,
        val_particles: cfg.get_or("val_particles", base.val_particles)?,
        seed: cfg.get_or("seed", base.seed)?,
    })
}

fn has_split_column(dir: &Path) -> bool {
    fs::read_to_string(dir.join("obs.csv"))
        .ok()
        .and_then(|t| t.lines().next().map(|h| h.split(',').any(|c| c.trim() == "split")))
        .unwrap_or(false)
}

fn write_split_file(path: &Path, splits: &[Split]) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "split")?;
    for s in splits {
        writeln!(w, "{}", s.as_str())?;
    }
    w.flush()?;
    Ok(())
}

fn read_split_file(path: &Path, n_cells: usize) -> CliResult<Vec<Split>> {
    let text = fs::read_to_string(path)?;
    let splits = text
        .lines()
        .skip(1)
        .enumerate()
        .map(|(i, l)| {
            Split::parse(l.trim())
                .ok_or_else(|| CliError::validation(format!("{} line {}: unknown split `{l}`", path.display(), i + 2)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if splits.len() != n_cells {
        return Err(CliError::validation(format!(
            "{} lists {} cells but the dataset has {n_cells}",
            path.display(),
            splits.len()
        )));
    }
    Ok(splits)
}

/// Applies `control` from the config, checking that it names a perturbation.
fn apply_control(cfg: &RunConfig, ds: &mut PerturbDataset<f64>) -> CliResult<()> {
    if let Some(c) = cfg.raw("control") {
        ds.perturbation_index(c)
            .map_err(|_| CliError::validation(format!("--control `{c}` is not a perturbation of the dataset")))?;
        ds.control = Some(c.to_string());
    }
    Ok(())
}

fn metric_line(row: &MetricRow) -> String {
    format!(
        "{},{},{},{}",
        row.step,
        row.train_neg_elbo,
        row.val_elbo.map_or(String::new(), |v| v.to_string()),
        row.wall_ms
    )
}

pub fn train(common: &Common, data: Option<PathBuf>, resume: bool) -> CliResult<()> {
    let cfg = run_config(common)?;
    let data_dir = dataset_dir(&cfg, data)?;
    let out = out_dir(&cfg)?;
    let last_path = out.join(LAST_CHECKPOINT);
    if resume {
        existing_file(&last_path, "resume checkpoint")?;
    }
    let mut ds = load_dataset::<f64>(&data_dir)?;
    apply_control(&cfg, &mut ds)?;
    let train_cfg = train_config(&cfg, TrainConfig::default())?;
    train_cfg.validate()?;

    let split_path = out.join(SPLIT_FILE);
    if resume && split_path.is_file() {
        ds.split = read_split_file(&split_path, ds.n_cells())?;
    } else if !has_split_column(&data_dir) {
        let stratify = cfg.get_or("stratify", true)?;
        ds = make_splits(&ds, split_fractions(&cfg)?, train_cfg.seed, stratify)?;
    }
    write_split_file(&split_path, &ds.split)?;

    let (mut model, mut state) = if resume {
        let ckpt = load_checkpoint::<f64>(&last_path)?;
        let state = ckpt
            .state
            .ok_or_else(|| CliError::validation(format!("{} has no optimizer state", last_path.display())))?;
        if ckpt.model.feature_names != ds.feature_names || ckpt.model.perturbation_names != ds.perturbation_names {
            return Err(CliError::validation("resume checkpoint was trained on a different dataset layout"));
        }
        info!("resuming from step {}", state.step);
        (ckpt.model, state)
    } else {
        let model_cfg = model_config(&cfg, &ds)?;
        let mut model = Model::for_dataset(model_cfg, &ds, train_cfg.seed)?;
        model.control = ds.control.clone();
        let state = TrainState::new(&model);
        (model, state)
    };

    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = if resume && metrics_path.is_file() {
        BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?)
    } else {
        let mut w = BufWriter::new(File::create(&metrics_path)?);
        writeln!(w, "step,train_neg_elbo,val_elbo,wall_ms")?;
        w
    };
    let best_path = out.join(BEST_CHECKPOINT);
    let outcome = inference::train(&mut model, &ds, &train_cfg, &mut state, |row, model, state| {
        writeln!(metrics, "{}", metric_line(row))?;
        metrics.flush()?;
        save_checkpoint(&last_path, model, Some(state), Some(&train_cfg), row.step)?;
        if let Some(best) = state.best.as_ref().filter(|b| b.step == row.step) {
            let mut snapshot = model.clone();
            snapshot.store = best.store.clone();
            save_checkpoint(&best_path, &snapshot, None, Some(&train_cfg), best.step)?;
        }
        Ok(())
    })?;
    if state.best.is_none() {
        warn!("no validation cells; {} holds the final parameters", BEST_CHECKPOINT);
        save_checkpoint(&best_path, &model, None, Some(&train_cfg), state.step)?;
    }
    info!(
        "trained to step {} ({} metric rows) into {}",
        state.step,
        outcome.metrics.len(),
        out.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub particles: Option<usize>,
    pub split: Option<String>,
    pub ate: bool,
    pub ate_targets: Vec<String>,
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn eval(common: &Common, args: EvalArgs) -> CliResult<()> {
    let mut cfg = run_config(common)?;
    existing_file(&args.checkpoint, "checkpoint")?;
    let data_dir = dataset_dir(&cfg, args.data)?;
    if cfg.raw("out").is_none() {
        cfg.set("out", parent_dir(&args.checkpoint).display());
    }
    let out = out_dir(&cfg)?;
    let model = load_checkpoint::<f64>(&args.checkpoint)?.model;
    let mut ds = load_dataset::<f64>(&data_dir)?;
    if model.feature_names != ds.feature_names || model.perturbation_names != ds.perturbation_names {
        return Err(CliError::validation(
            "checkpoint features or perturbations do not match the dataset",
        ));
    }
    apply_control(&cfg, &mut ds)?;
    let split_path = parent_dir(&args.checkpoint).join(SPLIT_FILE);
    if split_path.is_file() {
        ds.split = read_split_file(&split_path, ds.n_cells())?;
    }
    let split_name = args.split.or_else(|| cfg.raw("eval_split").map(String::from)).unwrap_or_else(|| "test".into());
    let split = Split::parse(&split_name)
        .ok_or_else(|| CliError::validation(format!("unknown split `{split_name}` (train, val or test)")))?;

    let control = if args.ate {
        let c = ds
            .control
            .clone()
            .or_else(|| model.control.clone())
            .ok_or_else(|| CliError::validation("--control is required with --ate (or declare a control in D.csv)"))?;
        Some(c)
    } else {
        None
    };
    let mut targets = args.ate_targets;
    if targets.is_empty() {
        targets = cfg.list_or("ate_targets", Vec::new())?;
    }
    let ate_samples: usize = cfg.get_or("ate_samples", 0)?;
    let defaults = EvalOptions::default();
    let opts = EvalOptions {
        split,
        particles: match args.particles {
            Some(k) => k,
            None => cfg.get_or("iwelbo_particles", defaults.particles)?,
        },
        repetitions: cfg.get_or("iwelbo_repetitions", defaults.repetitions)?,
        control,
        ate_particles: cfg.get_or("ate_particles", defaults.ate_particles)?,
        ate_method: if ate_samples == 0 {
            AteMethod::Analytic
        } else {
            AteMethod::Sampled(ate_samples)
        },
        targets,
        truth_masks: load_true_masks(&data_dir)?,
        seed: cfg.get_or("seed", 0)?,
        threads: cfg.get_or("threads", 1)?,
    };
    let report = evaluation::evaluate(&model, &ds, &opts)?;
    fs::write(
        out.join(REPORT_FILE),
        serde_json::to_string_pretty(&report).map_err(|e| CliError::runtime(e.to_string()))? + "\n",
    )?;
    if !report.ate.is_empty() {
        let names: Vec<String> = report.ate.keys().cloned().collect();
        let table = |m: &std::collections::BTreeMap<String, Vec<f64>>| {
            Tensor::from_rows(&m.values().cloned().collect::<Vec<_>>())
        };
        let labels = Some(("perturbation", names.as_slice()));
        write_matrix_csv(&out.join("ate.csv"), &report.features, labels, &table(&report.ate)?)?;
        write_matrix_csv(&out.join("de.csv"), &report.features, labels, &table(&report.de)?)?;
    }
    info!(
        "IWELBO ({} split, K={}): {:.4}{}",
        report.iwelbo.split,
        report.iwelbo.k,
        report.iwelbo.value,
        report.iwelbo.stderr.map_or(String::new(), |s| format!(" ± {s:.4}"))
    );
    Ok(())
}

fn recovery_config(cfg: &RunConfig) -> CliResult<RecoveryConfig> {
    let d = RecoveryConfig::default();
    let regimes = match cfg.list::<String>("recovery_regimes")? {
        Some(names) => names
            .iter()
            .map(|n| RunConfig::with_key("recovery_regimes", Regime::parse(n)))
            .collect::<CliResult<Vec<_>>>()?,
        None => d.regimes.clone(),
    };
    let seeds = match cfg.get::<u64>("seed")? {
        Some(s) if cfg.raw("recovery_seeds").is_none() => vec![s],
        _ => cfg.list_or("recovery_seeds", d.seeds.clone())?,
    };
    let mode = match cfg.raw("inference") {
        Some(v) => RunConfig::with_key("inference", InferenceMode::parse(v))?,
        None => d.mode,
    };
    Ok(RecoveryConfig {
        n_values: cfg.list_or("recovery_n", d.n_values.clone())?,
        regimes,
        seeds,
        fixed_prior_alpha: cfg.get_or("fixed_prior_alpha", d.fixed_prior_alpha)?,
        sim: sim_config(cfg)?,
        hidden: cfg.list_or("decoder_hidden", d.hidden.clone())?,
        embedding_prior_var: cfg.get_or("embedding_prior_var", d.embedding_prior_var)?,
        mode,
        temperature: cfg.get_or("temperature", d.temperature)?,
        train: train_config(cfg, d.train.clone())?,
    })
}

pub fn recovery_study(common: &Common) -> CliResult<()> {
    let cfg = run_config(common)?;
    let study = recovery_config(&cfg)?;
    study.validate()?;
    let out = out_dir(&cfg)?;
    let table = out.join("recovery.csv");
    let rows = simulate::run_recovery_study(&study, |row| append_recovery_csv(&table, std::slice::from_ref(row)))?;
    let mut w = BufWriter::new(File::create(out.join("recovery_summary.csv"))?);
    writeln!(w, "n_t,regime,alpha,runs,mean_f1,mean_density")?;
    for s in summarize_recovery(&rows) {
        writeln!(
            w,
            "{},{},{:e},{},{:.6},{:.6}",
            s.n_t,
            s.regime.as_str(),
            s.alpha,
            s.runs,
            s.mean_f1,
            s.mean_density
        )?;
    }
    w.flush()?;
    info!("recovery study: {} rows appended to {}", rows.len(), table.display());
    Ok(())
}

pub fn export_latents(common: &Common, checkpoint: &Path) -> CliResult<()> {
    let mut cfg = run_config(common)?;
    existing_file(checkpoint, "checkpoint")?;
    if cfg.raw("out").is_none() {
        cfg.set("out", parent_dir(checkpoint).display());
    }
    let out = out_dir(&cfg)?;
    let model = load_checkpoint::<f64>(checkpoint)?.model;
    evaluation::export_latents(&model, &out)?;
    info!("wrote masks.csv and embeddings.csv to {}", out.display());
    Ok(())
}
