use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use crate::disease_corr::DiseaseCorrelation;
use crate::error::{Error, Result};
use crate::eval::{macro_prauc, per_disease_report, PraucReport};
use crate::harness::read_config;
use crate::harness::records::{load_cohort, save_cohort, PatientRecord};
use crate::harness::synth::{generate_cohort, CohortSpec};
use crate::model::checkpoint::Checkpoint;
use crate::model::train::{attention_csv, history_csv, predict, split_dataset, train, TrainConfig};
use crate::model::Variant;

#[derive(Debug, Parser)]
#[command(name = "corrfuse", version, about = "Multi-modal patient graph fusion with disease-correlation-guided attention")]
pub struct Cli {
    /// Overrides the seed in the spec or config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    NoEhrEhr,
    LastCxrOnly,
    NoCga,
}

impl From<AblationArg> for Variant {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::NoEhrEhr => Variant::NoEhrEhr,
            AblationArg::LastCxrOnly => Variant::LastCxrOnly,
            AblationArg::NoCga => Variant::NoCga,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort as JSON lines.
    GenData {
        /// Cohort spec JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model and write a checkpoint directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint and write a per-disease PRAUC report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Earlier report CSV to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Exit non-zero when macro PRAUC falls below this value.
        #[arg(long)]
        min_macro: Option<f64>,
        /// Write per-patient attention weights here.
        #[arg(long)]
        alpha_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train and evaluate one ablation variant.
    Ablate {
        #[arg(long, value_enum)]
        variant: AblationArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the checkpoint, history and test report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the label correlation matrices as CSV.
    DumpCorr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
        /// Records whose labels are counted (`train` uses the same split as training).
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 2 for usage or config errors, 1 for
/// runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();
    log::set_max_level(level);

    match execute(&cli) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}\n\nRun `corrfuse --help` for usage.");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config: TrainConfig = match path {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn select(records: Vec<PatientRecord>, split: SplitArg, seed: u64) -> Vec<PatientRecord> {
    if split == SplitArg::All {
        return records;
    }
    let parts = split_dataset(&records, seed);
    match split {
        SplitArg::Train => parts.train,
        SplitArg::Val => parts.val,
        _ => parts.test,
    }
}

fn disease_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("label_{i:02}")).collect()
}

fn score(records: &[PatientRecord], ckpt: &Checkpoint) -> Result<(PraucReport, crate::model::train::Predictions)> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("no records to evaluate"));
    }
    let preds = predict(records, &ckpt.params, &ckpt.correlation, &ckpt.config, ckpt.variant)?;
    let labels: Vec<&[u8]> = records.iter().map(|r| r.labels.as_slice()).collect();
    Ok((macro_prauc(&preds.probs, &labels)?, preds))
}

fn train_and_save(data: &Path, config: &TrainConfig, variant: Variant, out: &Path) -> Result<Checkpoint> {
    let records = load_cohort(data)?;
    let (outcome, _) = train(&records, config, variant)?;
    let ckpt = Checkpoint::from_outcome(&outcome, config);
    ckpt.save(out)?;
    fs::write(out.join("history.csv"), history_csv(&outcome.history))?;
    log::info!(
        "{variant}: kept epoch {} of {}; checkpoint in {}",
        outcome.best_epoch,
        outcome.history.len(),
        out.display()
    );
    Ok(ckpt)
}

/// Reads the `prauc` column of a report written by `eval`.
pub fn parse_report(path: &Path) -> Result<PraucReport> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, message: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    };
    let mut per_disease = Vec::new();
    let mut macro_avg = None;
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut cols = line.split(',');
        let name = cols.next().ok_or_else(|| bad(i + 1, "empty row"))?;
        let value = cols.next().ok_or_else(|| bad(i + 1, "missing prauc column"))?;
        let value = if value.is_empty() {
            None
        } else {
            Some(value.parse::<f64>().map_err(|_| bad(i + 1, "prauc is not a number"))?)
        };
        if name == "macro" {
            macro_avg = value;
        } else {
            per_disease.push(value);
        }
    }
    let undefined_labels = (0..per_disease.len()).filter(|&i| per_disease[i].is_none()).collect();
    Ok(PraucReport {
        per_disease,
        macro_avg: macro_avg.ok_or_else(|| bad(0, "no macro row"))?,
        undefined_labels,
    })
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { spec, out } => {
            let mut spec: CohortSpec = match spec {
                Some(p) => read_config(p)?,
                None => CohortSpec::default(),
            };
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            spec.validate()?;
            let records = generate_cohort(&spec)?;
            save_cohort(&records, out)?;
            log::info!("wrote {} patients to {}", records.len(), out.display());
        }
        Command::Train { data, config, out } => {
            let config = load_train_config(config.as_deref(), cli.seed)?;
            train_and_save(data, &config, Variant::Full, out)?;
        }
        Command::Ablate {
            variant,
            data,
            config,
            out,
        } => {
            let config = load_train_config(config.as_deref(), cli.seed)?;
            let ckpt = train_and_save(data, &config, (*variant).into(), out)?;
            let test = select(load_cohort(data)?, SplitArg::Test, config.seed);
            let (report, _) = score(&test, &ckpt)?;
            let names = disease_names(ckpt.dims.n_labels);
            fs::write(out.join("report.csv"), per_disease_report(&report, &names, None)?)?;
            println!("{}: macro PRAUC {:.4}", ckpt.variant, report.macro_avg);
        }
        Command::Eval {
            ckpt,
            data,
            report,
            baseline,
            min_macro,
            alpha_out,
            split,
        } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let records = select(load_cohort(data)?, *split, ckpt.config.seed);
            let (scores, preds) = score(&records, &ckpt)?;
            let baseline = baseline.as_deref().map(parse_report).transpose()?;
            let names = disease_names(ckpt.dims.n_labels);
            fs::write(report, per_disease_report(&scores, &names, baseline.as_ref())?)?;
            if let Some(path) = alpha_out {
                fs::write(path, attention_csv(&records, &preds))?;
            }
            if !scores.undefined_labels.is_empty() {
                log::warn!("labels without positives (excluded): {:?}", scores.undefined_labels);
            }
            println!("macro PRAUC {:.4} over {} patients", scores.macro_avg, records.len());
            if let Some(floor) = min_macro {
                if scores.macro_avg < *floor {
                    return Err(Error::InvalidArgument(format!(
                        "macro PRAUC {:.4} is below the floor {floor}",
                        scores.macro_avg
                    )));
                }
            }
        }
        Command::DumpCorr { data, tau, out, split } => {
            let records = select(load_cohort(data)?, *split, cli.seed.unwrap_or(TrainConfig::default().seed));
            let labels: Vec<&[u8]> = records.iter().map(|r| r.labels.as_slice()).collect();
            let corr = DiseaseCorrelation::from_labels(&labels, *tau).map_err(|e| match e {
                Error::InvalidArgument(m) if !(0.0..=1.0).contains(tau) => Error::Config(m),
                other => other,
            })?;
            fs::write(out, corr.to_csv())?;
        }
    }
    Ok(())
}
