//! Command-line front end: `train`, `inspect` and `gradcheck`.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use segbert::autodiff::OpKind;
use segbert::dataset::{load_tu_dataset, GraphDataset};
use segbert::gradcheck::{run_gradcheck, GradcheckOptions, GRADCHECK_TOLERANCE};
use segbert::model::{ModelConfig, ResidualMode};
use segbert::training::{default_learning_rate, run_cv, write_reports, PretrainTask, TrainConfig};
use segbert::unify::{Strategy, UnifyPlan};

use crate::config::RunConfig;

pub const DATA_DIR_ENV: &str = "SEGBERT_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "segbert", version, about = "Segmented graph transformer for graph classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ten-fold cross-validation with optional pre-training.
    Train(TrainArgs),
    /// Prints dataset statistics.
    Inspect(InspectArgs),
    /// Finite-difference check of every parameter gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// Flat key = value file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding one sub-directory per dataset.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub residual: Option<ResidualMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated pre-training tasks: structure, reconstruction.
    #[arg(long, value_delimiter = ',')]
    pub pretrain: Option<Vec<PretrainTask>>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Skip the train + validation refit after model selection.
    #[arg(long)]
    pub no_refit: bool,
    #[arg(long)]
    pub wl_iterations: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub intermediate: Option<usize>,
    #[arg(long)]
    pub dropout_hidden: Option<f64>,
    #[arg(long)]
    pub dropout_attn: Option<f64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-fold parameter checkpoints.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ResidualChoice {
    None,
    Raw,
    Both,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub intermediate: usize,
    #[arg(long, value_enum, default_value_t = ResidualChoice::Both)]
    pub residual: ResidualChoice,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Test fixture: corrupts the backward rule of one op kind.
    #[arg(long, hide = true)]
    pub corrupt_backward: Option<OpKind>,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl ToString) -> Self {
        CliError { code: 2, message: message.to_string() }
    }

    fn failure(message: impl ToString) -> Self {
        CliError { code: 1, message: message.to_string() }
    }
}

/// Parses `args` and runs the command; returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn load(data_dir: &Path, name: &str) -> Result<GraphDataset, CliError> {
    load_tu_dataset(&data_dir.join(name), name).map_err(CliError::failure)
}

/// Config file (if any) overlaid with flags.
pub fn build_run_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut c = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("reading config {}: {e}", path.display())))?;
        c.apply_text(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = &args.$flag { c.$field = v.clone().into(); })*
        };
    }
    set!(
        dataset => dataset, strategy => strategy, residual => residual, epochs => epochs,
        weight_decay => weight_decay, patience => patience, batch_size => batch_size,
        seed => seed, pretrain => pretrain, pretrain_epochs => pretrain_epochs,
        wl_iterations => wl_iterations, hidden => hidden, heads => heads, layers => layers,
        intermediate => intermediate, dropout_hidden => dropout_hidden,
        dropout_attn => dropout_attn, jobs => jobs, out => out,
    );
    if args.data_dir.is_some() {
        c.data_dir = args.data_dir.clone();
    }
    if args.k.is_some() {
        c.k = args.k;
    }
    if args.lr.is_some() {
        c.learning_rate = args.lr;
    }
    if args.clip_norm.is_some() {
        c.clip_norm = args.clip_norm;
    }
    if args.checkpoint.is_some() {
        c.checkpoint = args.checkpoint.clone();
    }
    if args.no_refit {
        c.refit = false;
    }
    Ok(c)
}

pub fn cmd_train(args: &TrainArgs) -> Result<i32, CliError> {
    let mut cfg = build_run_config(args)?;
    let data_dir = resolve_data_dir(cfg.data_dir.as_deref());
    cfg.data_dir = Some(data_dir.clone());
    let ds = load(&data_dir, &cfg.dataset)?;
    let plan = UnifyPlan::for_dataset(&ds, cfg.strategy, cfg.k).map_err(CliError::usage)?;
    cfg.k = Some(plan.k);
    let lr = *cfg.learning_rate.get_or_insert_with(|| default_learning_rate(&ds.name));

    let model = ModelConfig {
        hidden: cfg.hidden,
        heads: cfg.heads,
        layers: cfg.layers,
        intermediate: cfg.intermediate,
        dropout_hidden: cfg.dropout_hidden,
        dropout_attn: cfg.dropout_attn,
        init_std: cfg.init_std,
        ..ModelConfig::for_dataset(&ds, &plan, cfg.residual)
    };
    model.validate().map_err(CliError::usage)?;
    let train = TrainConfig {
        learning_rate: lr,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
        patience: cfg.patience,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        pretrain_tasks: cfg.pretrain.clone(),
        pretrain_epochs: cfg.pretrain_epochs,
        clip_norm: cfg.clip_norm,
        refit: cfg.refit,
        wl_iterations: cfg.wl_iterations,
    };
    train.validate().map_err(CliError::usage)?;

    fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::failure(format!("creating {}: {e}", cfg.out.display())))?;
    fs::write(cfg.out.join("config_echo"), cfg.to_text())
        .map_err(|e| CliError::failure(format!("writing config_echo: {e}")))?;

    log::info!("{}: {}", ds.name, ds.summary_line());
    let result = run_cv(&ds, &plan, &model, &train, cfg.jobs).map_err(CliError::failure)?;
    write_reports(&result, &cfg.out).map_err(CliError::failure)?;
    if let Some(dir) = &cfg.checkpoint {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::failure(format!("creating {}: {e}", dir.display())))?;
        for f in &result.folds {
            f.params
                .save(&dir.join(format!("fold_{}.bin", f.fold_index)))
                .map_err(CliError::failure)?;
        }
    }
    let s = &result.summary;
    println!(
        "{} {} k={} residual={}: accuracy {:.2} ± {:.2} (mean fold {:.1} s)",
        s.dataset,
        s.strategy,
        s.k,
        s.residual,
        100.0 * s.mean_accuracy,
        100.0 * s.std_accuracy,
        s.mean_fold_seconds
    );
    Ok(0)
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<i32, CliError> {
    let ds = load(&resolve_data_dir(args.data_dir.as_deref()), &args.dataset)?;
    println!("{}", ds.summary_line());
    println!(
        "attributes: {}, tags: {}, labels: {:?}",
        ds.attr_dim, ds.tag_vocab_size, ds.label_values
    );
    Ok(0)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32, CliError> {
    let modes: &[ResidualMode] = match args.residual {
        ResidualChoice::None => &[ResidualMode::None],
        ResidualChoice::Raw => &[ResidualMode::Raw],
        ResidualChoice::Both => &[ResidualMode::None, ResidualMode::Raw],
    };
    let mut failed = Vec::new();
    for &residual in modes {
        let opts = GradcheckOptions {
            hidden: args.hidden,
            heads: args.heads,
            layers: args.layers,
            intermediate: args.intermediate,
            residual,
            seed: args.seed,
            fault: args.corrupt_backward,
            ..GradcheckOptions::default()
        };
        let report = run_gradcheck(&opts).map_err(CliError::usage)?;
        println!("residual {residual}");
        for g in &report.groups {
            println!("  {:<40} {:.3e}", g.name, g.relative_error);
        }
        println!("  max relative error {:.3e}", report.max_error());
        failed.extend(
            report
                .failures(GRADCHECK_TOLERANCE)
                .into_iter()
                .map(|g| format!("{residual}/{}", g.name)),
        );
    }
    if failed.is_empty() {
        println!("gradcheck passed (tolerance {GRADCHECK_TOLERANCE:e})");
        Ok(0)
    } else {
        eprintln!("gradcheck failed for: {}", failed.join(", "));
        Ok(1)
    }
}
