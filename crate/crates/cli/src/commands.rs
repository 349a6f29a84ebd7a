use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use damage_seq::audit::{architecture_causality_matrix, prefix_consistency_audit, save_matrix, AuditPaths, MatrixRow};
use damage_seq::dataset::{save_csv, PathDataset};
use damage_seq::hpo::{run_study_with_best, SearchMode, SearchSpace, Study, TrialStatus};
use damage_seq::models::{ArchitectureTag, ModelConfig, SequenceModel};
use damage_seq::training::{train, TrainConfig};
use damage_seq::{Error, Result};

use crate::config::{DatasetSection, ExperimentConfig, Source};
use crate::{AuditArgs, Cli, Command, CompareArgs, DataArgs, GenerateArgs, MatrixArgs, ModelArgs, TrainArgs, TuneArgs};

pub const DEFAULT_OUT: &str = "runs";

/// Fixed subdirectories of the output root.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn studies(&self) -> PathBuf {
        self.root.join("studies")
    }
    pub fn audits(&self) -> PathBuf {
        self.root.join("audits")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

pub fn run(cli: Cli, experiment: ExperimentConfig) -> Result<()> {
    let root = cli
        .out
        .clone()
        .or_else(|| experiment.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let layout = Layout { root };
    match cli.command {
        Command::Generate(a) => generate(&layout, &experiment, a),
        Command::Train(a) => train_cmd(&layout, &experiment, a),
        Command::Tune(a) => tune(&layout, &experiment, a),
        Command::Audit(a) => audit(&layout, &experiment, a),
        Command::Compare(a) => compare(&layout, a),
        Command::Matrix(a) => matrix(&layout, &experiment, a),
    }
}

fn generate(layout: &Layout, experiment: &ExperimentConfig, a: GenerateArgs) -> Result<()> {
    let mut section = match &experiment.dataset {
        Some(s) if s.source == Source::Synthetic => s.clone(),
        Some(_) => return Err(Error::invalid("generate needs a synthetic dataset section")),
        None => DatasetSection {
            source: Source::Synthetic,
            ..DatasetSection::from_file(PathBuf::new())
        },
    };
    section.path = None;
    if let Some(n) = a.paths {
        section.paths = Some(n as usize);
    }
    if let Some(n) = a.steps {
        section.steps = Some(n as usize);
    }
    if let Some(s) = a.seed {
        section.seed = Some(s);
    }
    if section.paths.is_none() || section.steps.is_none() {
        return Err(Error::invalid("generate needs --paths and --steps"));
    }
    let ds = section.load()?;
    ensure_dir(&layout.dataset())?;
    let file = layout.dataset().join(&a.name);
    save_csv(&ds, &file)?;
    let (lo, hi) = ds
        .paths
        .iter()
        .flat_map(|p| p.damage.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    println!(
        "wrote {} paths x {} steps to {} (D in [{lo:.4}, {hi:.4}])",
        ds.len(),
        ds.n_steps().unwrap_or(0),
        file.display()
    );
    Ok(())
}

fn data_section(experiment: &ExperimentConfig, a: &DataArgs) -> Result<DatasetSection> {
    let mut section = match (&a.dataset, &experiment.dataset) {
        (Some(file), Some(s)) => DatasetSection {
            source: Source::File,
            path: Some(file.clone()),
            paths: None,
            steps: None,
            seed: None,
            ranges: None,
            ..s.clone()
        },
        (Some(file), None) => DatasetSection::from_file(file.clone()),
        (None, Some(s)) => s.clone(),
        (None, None) => return Err(Error::invalid("no dataset: pass --dataset or a dataset section")),
    };
    if let Some(f) = a.train_fraction {
        section.train_fraction = f;
    }
    if let Some(s) = a.split_seed {
        section.split_seed = s;
    }
    Ok(section)
}

fn default_model(tag: ArchitectureTag) -> ModelConfig {
    match tag {
        ArchitectureTag::Gru => ModelConfig::EncoderDecoderGru {
            hidden: 32,
            decoder_init: Default::default(),
        },
        ArchitectureTag::Cnn => ModelConfig::Conv1d {
            filters: 32,
            kernel: 5,
            padding: Default::default(),
        },
        ArchitectureTag::Transformer => ModelConfig::Transformer {
            d_model: 32,
            heads: 4,
            d_ff: 64,
            dropout: damage_seq::models::DEFAULT_TRANSFORMER_DROPOUT,
            mask: Default::default(),
            positional: Default::default(),
        },
    }
}

fn set<T: Copy>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn resolve_model(experiment: &ExperimentConfig, a: &ModelArgs) -> Result<ModelConfig> {
    let mut cfg = match (&a.arch, &experiment.model) {
        (Some(name), Some(m)) => {
            let tag: ArchitectureTag = name.parse()?;
            if m.tag() == tag {
                m.clone()
            } else {
                default_model(tag)
            }
        }
        (Some(name), None) => default_model(name.parse()?),
        (None, Some(m)) => m.clone(),
        (None, None) => return Err(Error::invalid("no model: pass --arch or a model section")),
    };
    let stray = |names: &[(&str, bool)]| -> Result<()> {
        match names.iter().find(|(_, given)| *given) {
            Some((flag, _)) => Err(Error::invalid(format!("--{flag} does not apply to {}", cfg.tag()))),
            None => Ok(()),
        }
    };
    let gru_flags = [("hidden", a.hidden.is_some()), ("decoder-init", a.decoder_init.is_some())];
    let cnn_flags = [
        ("filters", a.filters.is_some()),
        ("kernel", a.kernel.is_some()),
        ("padding", a.padding.is_some()),
    ];
    let tr_flags = [
        ("d-model", a.d_model.is_some()),
        ("heads", a.heads.is_some()),
        ("d-ff", a.d_ff.is_some()),
        ("dropout", a.dropout.is_some()),
        ("mask", a.mask.is_some()),
        ("positional", a.positional.is_some()),
    ];
    match cfg.tag() {
        ArchitectureTag::Gru => {
            stray(&cnn_flags)?;
            stray(&tr_flags)?;
        }
        ArchitectureTag::Cnn => {
            stray(&gru_flags)?;
            stray(&tr_flags)?;
        }
        ArchitectureTag::Transformer => {
            stray(&gru_flags)?;
            stray(&cnn_flags)?;
        }
    }
    match &mut cfg {
        ModelConfig::EncoderDecoderGru { hidden, decoder_init } => {
            set(hidden, a.hidden);
            set(decoder_init, a.decoder_init);
        }
        ModelConfig::Conv1d {
            filters,
            kernel,
            padding,
        } => {
            set(filters, a.filters);
            set(kernel, a.kernel);
            set(padding, a.padding);
        }
        ModelConfig::Transformer {
            d_model,
            heads,
            d_ff,
            dropout,
            mask,
            positional,
        } => {
            set(d_model, a.d_model);
            set(heads, a.heads);
            set(d_ff, a.d_ff);
            set(dropout, a.dropout);
            set(mask, a.mask);
            set(positional, a.positional);
        }
    }
    Ok(cfg)
}

fn train_cmd(layout: &Layout, experiment: &ExperimentConfig, a: TrainArgs) -> Result<()> {
    let (_, parts) = data_section(experiment, &a.data)?.load_split()?;
    let model_cfg = resolve_model(experiment, &a.model)?;
    let mut cfg: TrainConfig = experiment.train.clone().unwrap_or_default();
    set(&mut cfg.learning_rate, a.lr);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.max_epochs, a.epochs);
    set(&mut cfg.patience, a.patience);
    set(&mut cfg.seed, a.seed);

    let name = a.name.unwrap_or_else(|| model_cfg.label());
    ensure_dir(&layout.models())?;
    let ckpt = layout.models().join(format!("{name}.json"));
    let hist = layout.models().join(format!("{name}.history.json"));
    let model = SequenceModel::new(model_cfg, cfg.seed)?;
    match train(&model, &parts, &cfg) {
        Ok((trained, history)) => {
            trained.save(&ckpt)?;
            history.save(&hist)?;
            println!(
                "{name}: train_mse {:.6e} test_mse {:.6e} best_epoch {} stopped_epoch {} params {} ({:.1}s)",
                history.best_train_mse,
                history.best_val_mse(),
                history.best_epoch,
                history.stopped_epoch,
                trained.param_count(),
                history.wall_time_secs
            );
            println!("checkpoint {}", ckpt.display());
            Ok(())
        }
        Err(Error::Diverged { epoch, history }) => {
            history.save(&hist)?;
            Err(Error::Diverged { epoch, history })
        }
        Err(e) => Err(e),
    }
}

fn tune(layout: &Layout, experiment: &ExperimentConfig, a: TuneArgs) -> Result<()> {
    let tag: ArchitectureTag = a.arch.parse()?;
    let (_, parts) = data_section(experiment, &a.data)?.load_split()?;
    let mut settings = experiment.search.clone().unwrap_or_default();
    set(&mut settings.n_trials, a.trials);
    set(&mut settings.seed, a.seed);
    set(&mut settings.max_epochs, a.epochs);
    set(&mut settings.patience, a.patience);
    if a.random {
        settings.mode = SearchMode::Random;
    }
    let space = SearchSpace::for_architecture(tag);
    let (study, best) = run_study_with_best(tag, &space, &parts, &settings)?;
    ensure_dir(&layout.studies())?;
    ensure_dir(&layout.models())?;
    let json = layout.studies().join(format!("{tag}.json"));
    study.save(&json)?;
    study.save_csv(layout.studies().join(format!("{tag}.csv")))?;
    best.save(layout.models().join(format!("{tag}_best.json")))?;
    for t in &study.trials {
        match t.status {
            TrialStatus::Ok => println!(
                "trial {:>2}: train {:.4e} test {:.4e} {}",
                t.trial,
                t.train_mse.unwrap_or(f64::NAN),
                t.test_mse.unwrap_or(f64::NAN),
                t.model.label()
            ),
            TrialStatus::Diverged => println!("trial {:>2}: diverged", t.trial),
        }
    }
    let b = study.best();
    println!(
        "best trial {} of {}: test_mse {:.6e}; study {}",
        b.trial,
        study.trials.len(),
        b.test_mse.unwrap_or(f64::NAN),
        json.display()
    );
    Ok(())
}

fn audit(layout: &Layout, experiment: &ExperimentConfig, a: AuditArgs) -> Result<()> {
    if !a.checkpoint.exists() {
        return Err(Error::invalid(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let model = SequenceModel::load(&a.checkpoint)?;
    let ds: PathDataset = data_section(experiment, &a.data)?.load()?;
    let mut cfg = experiment.audit.clone().unwrap_or_default();
    if let Some(f) = a.fractions {
        cfg.fractions = f;
    }
    if let Some(n) = a.paths {
        cfg.paths = AuditPaths::Count(n);
    }
    if let Some(ids) = a.ids {
        cfg.paths = AuditPaths::Ids(ids);
    }
    set(&mut cfg.tolerance, a.tolerance);
    set(&mut cfg.threshold, a.threshold);
    let report = prefix_consistency_audit(&model, &ds, &cfg)?;
    let name = a.name.unwrap_or_else(|| {
        a.checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "audit".into())
    });
    ensure_dir(&layout.audits())?;
    let json = layout.audits().join(format!("{name}.json"));
    report.save(&json)?;
    report.save_csv(layout.audits().join(format!("{name}.csv")))?;
    println!(
        "{}: {:?} over {} paths; max deviation {:.3e}; consistent paths {:.1}%; localization shifts {}",
        report.model,
        report.verdict,
        report.n_paths,
        report.max_deviation,
        100.0 * report.consistent_path_fraction,
        report.localization_shifts()
    );
    println!("report {}", json.display());
    Ok(())
}

pub const COMPARE_COLUMNS: [&str; 8] = [
    "architecture",
    "model",
    "trials",
    "diverged",
    "best_trial",
    "param_count",
    "train_mse",
    "test_mse",
];

fn compare(layout: &Layout, a: CompareArgs) -> Result<()> {
    let studies: Vec<Study> = a.studies.iter().map(Study::load).collect::<Result<_>>()?;
    ensure_dir(&layout.studies())?;
    let file = layout.studies().join(&a.name);
    let mut out = String::new();
    out.push_str(&COMPARE_COLUMNS.join(","));
    out.push('\n');
    let mut ranked = Vec::new();
    for s in &studies {
        let b = s.best();
        let diverged = s.trials.iter().filter(|t| t.status == TrialStatus::Diverged).count();
        let (train_mse, test_mse) = (b.train_mse.unwrap_or(f64::NAN), b.test_mse.unwrap_or(f64::NAN));
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.architecture,
            b.model.label(),
            s.trials.len(),
            diverged,
            b.trial,
            b.param_count,
            train_mse,
            test_mse
        ));
        println!(
            "{:<12} trials {:>2}  train {:.4e}  test {:.4e}",
            s.architecture.name(),
            s.trials.len(),
            train_mse,
            test_mse
        );
        ranked.push((test_mse, s.architecture));
    }
    fs::File::create(&file)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::Io {
            path: file.clone(),
            source: e,
        })?;
    ranked.sort_by(|x, y| x.0.total_cmp(&y.0));
    let order: Vec<&str> = ranked.iter().map(|r| r.1.name()).collect();
    println!("test MSE order (best first): {}", order.join(" < "));
    println!("table {}", file.display());
    Ok(())
}

fn matrix(layout: &Layout, experiment: &ExperimentConfig, a: MatrixArgs) -> Result<()> {
    let ds = data_section(experiment, &a.data)?.load()?;
    let mut cfg = experiment.matrix.clone().unwrap_or_default();
    set(&mut cfg.train.max_epochs, a.epochs);
    set(&mut cfg.model_seed, a.seed);
    if let Some(n) = a.paths {
        cfg.audit.paths = AuditPaths::Count(n);
    }
    let rows: Vec<MatrixRow> = architecture_causality_matrix(&ds, &cfg)?;
    ensure_dir(&layout.audits())?;
    let file = layout.audits().join("causality_matrix.json");
    save_matrix(&rows, &file)?;
    for r in &rows {
        match (&r.verdict, &r.error) {
            (Some(v), _) => println!(
                "{:<22} {:?} max_dev {:.3e} test_mse {:.3e}",
                r.model,
                v,
                r.max_deviation.unwrap_or(f64::NAN),
                r.test_mse.unwrap_or(f64::NAN)
            ),
            (None, Some(e)) => println!("{:<22} failed: {e}", r.model),
            (None, None) => println!("{:<22} no result", r.model),
        }
    }
    println!("matrix {}", file.display());
    Ok(())
}
