use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use procaudit_core::data::{self, derive_labels};
use procaudit_core::synthgen;
use procaudit_core::train::{self, PredictionTable};
use procaudit_core::{
    Activation, CrossValConfig, Dataset, Error, GeneratorConfig, LabelMode, Model,
    NetworkConfig, NormalizationScope, NormalizationStats, Optimizer, TrainConfig,
};

#[derive(Parser)]
#[command(name = "procaudit", version, about = "Procurement fraud auditing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic procurement ledger as CSV.
    Generate(GenerateArgs),
    /// Train one model on a whole dataset and save it.
    Train(TrainArgs),
    /// K-fold cross-validation with a per-fold table.
    Crossval(CrossvalArgs),
    /// Predict fraud labels for a CSV with a saved model.
    Predict(PredictArgs),
    /// Summarize a dataset or a model file.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Binary,
    Multiclass,
    MulticlassWithClean,
}

impl From<Task> for LabelMode {
    fn from(t: Task) -> Self {
        match t {
            Task::Binary => LabelMode::Binary,
            Task::Multiclass => LabelMode::Multiclass,
            Task::MulticlassWithClean => LabelMode::MulticlassWithClean,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerKind {
    Sgd,
    Rmsprop,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationKind {
    Relu,
    Tanh,
}

#[derive(Args)]
struct GenerateArgs {
    /// `key = value` file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    fraud_ratio: Option<f64>,
    #[arg(long)]
    k_fraud: Option<u32>,
    /// Label noise rate.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, env = "PROCAUDIT_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    pgn_pool: Option<u64>,
    #[arg(long)]
    pon_pool: Option<u64>,
    #[arg(long)]
    mgn_pool: Option<u64>,
    #[arg(long)]
    ssn_pool: Option<u64>,
    #[arg(long)]
    blacklist_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "binary")]
    task: Task,
    #[arg(long, default_value_t = 512)]
    hidden: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, value_enum, default_value = "sgd")]
    optimizer: OptimizerKind,
    /// Defaults to 0.01 for sgd and 0.001 for rmsprop.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum, default_value = "relu")]
    activation: ActivationKind,
    #[arg(long, env = "PROCAUDIT_SEED", default_value_t = 0)]
    seed: u64,
    /// Number of fraud types for multiclass tasks; inferred when omitted.
    #[arg(long)]
    k_fraud: Option<u32>,
}

impl ModelArgs {
    fn network(&self) -> NetworkConfig {
        NetworkConfig {
            hidden_dim: self.hidden,
            dropout_ratio: self.dropout,
            activation: match self.activation {
                ActivationKind::Relu => Activation::Relu,
                ActivationKind::Tanh => Activation::Tanh,
            },
            seed: self.seed,
            ..NetworkConfig::default()
        }
    }

    fn train(&self) -> TrainConfig {
        let optimizer = match self.optimizer {
            OptimizerKind::Sgd => Optimizer::sgd(self.lr.unwrap_or(0.01)),
            OptimizerKind::Rmsprop => Optimizer::rmsprop(self.lr.unwrap_or(0.001)),
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            optimizer,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Model file; normalization stats are also written to `<out>.norm`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CrossvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Fit normalization on the whole dataset before splitting.
    #[arg(long)]
    paper_faithful: bool,
    /// Deal folds per class instead of a plain shuffle.
    #[arg(long)]
    stratified: bool,
    /// Fold worker threads; defaults to min(k, cores).
    #[arg(long, env = "PROCAUDIT_JOBS")]
    jobs: Option<usize>,
    /// JSONL report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSONL report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Predict on N random rows instead of all of them.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, env = "PROCAUDIT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InspectArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_model(a),
        Command::Crossval(a) => crossval(a),
        Command::Predict(a) => predict(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .find_map(|c| c.downcast_ref::<Error>())
                .is_some_and(Error::is_validation);
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn read_labeled(path: &Path) -> Result<Dataset> {
    let ds = data::parse_csv(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    Ok(ds)
}

fn print_class_counts(ds: &Dataset) {
    let counts = ds.class_counts();
    println!("rows: {}", ds.len());
    for (ft, c) in counts.iter().enumerate() {
        let name = if ft == 0 { "clean".to_string() } else { format!("fraud type {ft}") };
        println!("  {name:<14} {c}");
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read {}", p.display()))?;
            GeneratorConfig::from_key_values(&text)?
        }
        None => GeneratorConfig::default(),
    };
    let pools = &mut cfg.id_pools;
    let overrides: [(&mut u64, Option<u64>); 4] = [
        (&mut pools.pgn, a.pgn_pool),
        (&mut pools.pon, a.pon_pool),
        (&mut pools.mgn, a.mgn_pool),
        (&mut pools.ssn, a.ssn_pool),
    ];
    for (slot, v) in overrides {
        if let Some(v) = v {
            *slot = v;
        }
    }
    cfg.n = a.n.unwrap_or(cfg.n);
    cfg.fraud_ratio = a.fraud_ratio.unwrap_or(cfg.fraud_ratio);
    cfg.k_fraud = a.k_fraud.unwrap_or(cfg.k_fraud);
    cfg.label_noise = a.noise.unwrap_or(cfg.label_noise);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.blacklist_fraction = a.blacklist_fraction.unwrap_or(cfg.blacklist_fraction);

    let ds = synthgen::generate(&cfg)?;
    let mut out = create(&a.out)?;
    data::write_csv(&ds, &mut out)?;
    out.flush()?;
    println!("wrote {}", a.out.display());
    print_class_counts(&ds);
    println!(
        "bayes accuracy: binary {:.4}, multiclass {:.4}",
        synthgen::bayes_accuracy(&cfg, LabelMode::Binary),
        synthgen::bayes_accuracy(&cfg, LabelMode::Multiclass)
    );
    Ok(())
}

fn train_model(a: TrainArgs) -> Result<()> {
    let ds = read_labeled(&a.data)?;
    let m = &a.model;
    let (model, trace) =
        train::fit_model(&ds, m.task.into(), &m.network(), &m.train(), m.k_fraud)?;
    for (epoch, loss) in trace.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.4}", epoch + 1);
    }
    let mut out = create(&a.out)?;
    model.save(&mut out)?;
    out.flush()?;
    let mut norm_path = a.out.clone().into_os_string();
    norm_path.push(".norm");
    let norm_path = PathBuf::from(norm_path);
    let mut norm = create(&norm_path)?;
    model.stats.save(&mut norm)?;
    norm.flush()?;
    println!("wrote {} and {}", a.out.display(), norm_path.display());
    Ok(())
}

fn crossval(a: CrossvalArgs) -> Result<()> {
    let ds = read_labeled(&a.data)?;
    let m = &a.model;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cfg = CrossValConfig {
        k: a.k,
        train: m.train(),
        network: m.network(),
        seed: m.seed,
        normalization: if a.paper_faithful {
            NormalizationScope::WholeDataset
        } else {
            NormalizationScope::PerFold
        },
        stratified: a.stratified,
        k_fraud: m.k_fraud,
        jobs: a.jobs.unwrap_or_else(|| a.k.min(cores)).max(1),
    };
    let report = train::cross_validate(&ds, m.task.into(), &cfg)?;
    print!("{}", report.render_table());
    if let Some(path) = &a.report {
        let mut out = create(path)?;
        report.write_jsonl(&mut out)?;
        out.flush()?;
    }
    Ok(())
}

fn read_model(path: &Path) -> Result<Model> {
    let model = Model::load(open(path)?).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let text = std::fs::read(&a.data).with_context(|| format!("cannot read {}", a.data.display()))?;
    let ds = if text.iter().all(u8::is_ascii_whitespace) {
        Dataset::default()
    } else {
        data::parse_csv_unlabeled(text.as_slice())
            .with_context(|| format!("reading {}", a.data.display()))?
    };
    let rows = match a.sample {
        Some(n) => train::sample_rows(ds.len(), n, a.seed),
        None => (0..ds.len()).collect(),
    };
    let ds = ds.subset(&rows);
    let truth: Option<Vec<Option<usize>>> = ds.is_labeled().then(|| {
        ds.records()
            .iter()
            .map(|r| model.task.label_of(r).filter(|&c| c < model.num_classes()))
            .collect()
    });
    let table = train::prediction_table(&model, ds.records(), truth.as_deref())?;
    print_table(&table)?;
    if let Some(path) = &a.out {
        let mut out = create(path)?;
        table.write_jsonl(&mut out)?;
        out.flush()?;
    }
    Ok(())
}

fn print_table(table: &PredictionTable) -> Result<()> {
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    lock.write_all(table.render().as_bytes())?;
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    if let Some(path) = &a.data {
        let text =
            std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        let ds = data::parse_csv_unlabeled(text.as_slice())
            .with_context(|| format!("reading {}", path.display()))?;
        if ds.is_labeled() {
            print_class_counts(&ds);
            let binary = derive_labels(&ds, LabelMode::Binary)?;
            println!("binary samples: {}", binary.labels.len());
        } else {
            println!("rows: {} (unlabeled)", ds.len());
        }
        if !ds.is_empty() {
            let stats = NormalizationStats::fit(&ds)?;
            println!("{:<6} {:>16} {:>16}", "column", "min", "max");
            for (c, name) in data::FEATURE_COLUMNS.iter().enumerate() {
                println!("{name:<6} {:>16} {:>16}", stats.min[c], stats.max[c]);
            }
        }
    }
    if let Some(path) = &a.model {
        let model = read_model(path)?;
        let cfg = model.params.config();
        println!("task: {}", model.task);
        println!("classes: {}", model.num_classes());
        println!(
            "network: {} -> {} -> {} -> {} ({}, dropout {})",
            cfg.input_dim,
            cfg.hidden_dim,
            cfg.hidden_dim,
            cfg.output_classes,
            serde_json::to_value(cfg.activation)?.as_str().unwrap_or("?"),
            cfg.dropout_ratio
        );
        println!("parameters: {}", model.params.num_parameters());
    }
    Ok(())
}
