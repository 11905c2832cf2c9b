//! Command-line driver: `validate`, `test`, `adjust` and `ablate` over a
//! corpus laid out as `<corpus>/<model>/<dataset>/<probe>.{manifest,records}`.
//!
//! Exit codes: 0 success, 1 validation failure or bad invocation, 2 one or
//! more scenarios failed (everything else is still written), 3 I/O error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use probebias_core::adjust::{
    AblationAxis, SelectionMetric, SplitSpec, TrainConfig, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE,
    DEFAULT_N_PER_CLASS, DEFAULT_RUNS,
};
use probebias_core::ingest::validate_corpus;
use probebias_core::metrics::NormalizationScope;
use probebias_core::report::{
    emit, run_ablation, run_adjust, run_family, AdjustOptions, Format, ReportBundle, RunOptions,
    Selection,
};
use probebias_core::schema::Family;
use probebias_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Environment variable that overrides the default corpus root.
pub const CORPUS_ENV: &str = "PROBEBIAS_CORPUS";

#[derive(Debug, Parser)]
#[command(
    name = "probebias",
    version,
    about = "Probe-based bias testing and logit adjustment over precomputed logits"
)]
pub struct Cli {
    /// Worker threads for scenario-level parallelism [default: available cores]
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every scenario of a corpus and list problems by file and line
    Validate {
        #[arg(long, env = CORPUS_ENV, default_value = "corpus")]
        corpus: PathBuf,
    },
    /// Compute probe probabilities, normalized scores and heatmaps
    Test {
        #[command(flatten)]
        common: CommonArgs,
        /// How probe probabilities are pooled for min-max normalization
        #[arg(long, value_enum, default_value_t = ScopeArg::Dataset)]
        norm_scope: ScopeArg,
    },
    /// Learn adjustment factors and score them on held-out samples
    Adjust {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Sweep the per-class training size or the learning rate
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Parameter to sweep
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated values for the swept parameter
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Corpus root
    #[arg(long, env = CORPUS_ENV, default_value = "corpus")]
    pub corpus: PathBuf,
    /// Output directory for tables
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
    /// Test family
    #[arg(long, value_enum, default_value_t = FamilyArg::Single)]
    pub family: FamilyArg,
    /// Only these models (comma-separated, case-insensitive)
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    /// Only these datasets (comma-separated, case-insensitive)
    #[arg(long, value_delimiter = ',')]
    pub datasets: Vec<String>,
    /// Only these probes (comma-separated, case-insensitive)
    #[arg(long, value_delimiter = ',')]
    pub probes: Vec<String>,
    /// Output formats (comma-separated)
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [FormatArg::Csv, FormatArg::Md, FormatArg::Jsonl])]
    pub formats: Vec<FormatArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Seed for the train/test splits; run r samples from stream r
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Independent train/test splits per scenario
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    pub runs: usize,
    /// Training samples drawn per class
    #[arg(long, default_value_t = DEFAULT_N_PER_CLASS)]
    pub n_per_class: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    pub lr: f64,
    /// Full-batch training epochs
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    pub epochs: usize,
    /// Training accuracy used to pick the returned epoch
    #[arg(long, value_enum, default_value_t = SelectionArg::Overall)]
    pub selection: SelectionArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Single,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Md,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    /// One pool per model and dataset
    Dataset,
    /// One pool per model and family
    Family,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectionArg {
    Overall,
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    /// Training samples per class
    N,
    /// Learning rate
    Lr,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Single => Family::Single,
            FamilyArg::Mixed => Family::Mixed,
        }
    }
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Md => Format::Markdown,
            FormatArg::Jsonl => Format::Structured,
        }
    }
}

impl CommonArgs {
    fn selection(&self) -> Selection {
        Selection {
            models: self.models.clone(),
            datasets: self.datasets.clone(),
            probes: self.probes.clone(),
        }
    }

    fn formats(&self) -> Vec<Format> {
        self.formats.iter().map(|f| (*f).into()).collect()
    }
}

impl TrainArgs {
    fn options(&self) -> AdjustOptions {
        AdjustOptions {
            split: SplitSpec {
                n_per_class: self.n_per_class,
                seed: self.seed,
                run_index: 1,
            },
            train: TrainConfig {
                learning_rate: self.lr,
                epochs: self.epochs,
                selection: match self.selection {
                    SelectionArg::Overall => SelectionMetric::Overall,
                    SelectionArg::Macro => SelectionMetric::Macro,
                },
                ..TrainConfig::default()
            },
            runs: self.runs,
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_INVALID,
    }
}

/// Parses `args` (program name first) and runs the command.
/// Progress and results go to `out`, problems to `err`; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_INVALID
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            let _ = writeln!(err, "error: --jobs must be at least 1");
            return EXIT_INVALID;
        }
        pool = pool.num_threads(jobs);
    }
    let pool = match pool.build() {
        Ok(pool) => pool,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start worker threads: {e}");
            return EXIT_INVALID;
        }
    };

    let (result, buffer) = pool.install(|| {
        let mut buffer = Vec::new();
        (execute(&cli.command, &mut buffer), buffer)
    });
    let _ = out.write_all(&buffer);
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", e.kind());
            exit_code(&e)
        }
    }
}

fn execute(command: &Command, out: &mut dyn Write) -> probebias_core::Result<i32> {
    match command {
        Command::Validate { corpus } => cmd_validate(corpus, out),
        Command::Test { common, norm_scope } => {
            let options = RunOptions {
                selection: common.selection(),
                scope: match norm_scope {
                    ScopeArg::Dataset => NormalizationScope::ModelDataset,
                    ScopeArg::Family => NormalizationScope::ModelFamily,
                },
            };
            let bundle = run_family(&common.corpus, common.family.into(), &options)?;
            finish(&bundle, common, out)
        }
        Command::Adjust { common, train } => {
            let options = train.options();
            options.train.validate()?;
            check_split(&options)?;
            let bundle = run_adjust(&common.corpus, common.family.into(), &common.selection(), &options)?;
            finish(&bundle, common, out)
        }
        Command::Ablate {
            common,
            train,
            axis,
            values,
        } => {
            let options = train.options();
            options.train.validate()?;
            check_split(&options)?;
            let axis = match axis {
                AxisArg::N => AblationAxis::NPerClass,
                AxisArg::Lr => AblationAxis::LearningRate,
            };
            let bundle = run_ablation(
                &common.corpus,
                common.family.into(),
                &common.selection(),
                &options,
                axis,
                values,
            )?;
            finish(&bundle, common, out)
        }
    }
}

fn check_split(options: &AdjustOptions) -> probebias_core::Result<()> {
    if options.runs == 0 {
        return Err(Error::InvalidConfig("--runs must be at least 1".into()));
    }
    if options.split.n_per_class == 0 {
        return Err(Error::InvalidConfig("--n-per-class must be at least 1".into()));
    }
    Ok(())
}

/// Lists every scenario with its diagnostics. Exit 0 iff all pass.
pub fn cmd_validate(corpus: &Path, out: &mut dyn Write) -> probebias_core::Result<i32> {
    let checks = validate_corpus(corpus)?;
    let failed = checks.iter().filter(|c| !c.passed()).count();
    for check in &checks {
        if check.passed() {
            say(out, format!("ok   {}", check.scenario));
        } else {
            for d in &check.diagnostics {
                say(out, format!("FAIL {}: {d}", check.scenario));
            }
        }
    }
    say(
        out,
        format!("{} scenarios, {} failed", checks.len(), failed),
    );
    Ok(if failed == 0 { EXIT_OK } else { EXIT_INVALID })
}

fn finish(bundle: &ReportBundle, common: &CommonArgs, out: &mut dyn Write) -> probebias_core::Result<i32> {
    let written = emit(bundle, &common.out, &common.formats())?;
    for path in &written {
        say(out, format!("wrote {}", path.display()));
    }
    for failure in &bundle.failures {
        say(out, format!("failed {}: {}", failure.scenario, failure.error));
    }
    let evaluated = bundle.scenarios.len().max(bundle.adjustments.len());
    say(
        out,
        format!(
            "{} tables from {} scenarios, {} failed",
            bundle.tables.len(),
            evaluated,
            bundle.failures.len()
        ),
    );
    Ok(if bundle.has_failures() { EXIT_PARTIAL } else { EXIT_OK })
}

fn say(out: &mut dyn Write, line: String) {
    let _ = writeln!(out, "{line}");
}
