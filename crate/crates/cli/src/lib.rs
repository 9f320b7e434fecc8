//! The `scq` command line: dataset generation and ingestion, training,
//! evaluation, top-S analysis and the gradient-check suite.
//!
//! Exit codes: 0 on success, 1 when a check fails or a run aborts, 2 for
//! usage and schema errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use scq_core::checkpoint::Checkpoint;
use scq_core::dataset::{generate_synthetic, ingest_cifar, CifarSplit, Dataset};
use scq_core::gradcheck::{failing, run_suite, Suite};
use scq_core::trainer::{self, read_metrics, MetricsRow, TrainConfig};
use scq_core::Error;

#[derive(Debug, Parser)]
#[command(name = "scq", version, about = "Soft convex quantization experiments")]
pub struct Cli {
    /// Seed for commands that draw random numbers (overrides the config's seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON training config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for output artifacts (overrides the config's output_dir).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset of shapes on plain backgrounds.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Convert CIFAR-10 binary batches to an SCQD file.
    IngestCifar {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: CifarSplit,
    },
    /// Train an autoencoder.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the test split named in the checkpoint's config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reconstruction error when keeping only the top-S convex weights.
    AnalyzeTops {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        max_s: usize,
    },
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        suite: Suite,
        /// Scale the backward rule of the named op (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Override a config field, e.g. `--set epochs=2 --set model.downsample=4`.
    #[arg(long = "set", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
    /// Train once per seed into `seed-<s>/` and write `aggregate.csv`.
    #[arg(long, value_delimiter = ',')]
    pub seed_list: Vec<u64>,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn check(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Schema(_) | Error::Contract { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Runs a parsed command, writing reports to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::GenSynth { out: ref path, n, size } => {
            if size == 0 || size % 4 != 0 {
                return Err(Failure::usage(format!("--size {size} must be a positive multiple of 4")));
            }
            let data = generate_synthetic(n, size, cli.seed.unwrap_or(0))?;
            data.write(path)?;
            log::info!("wrote {n} images of {size}x{size} to {}", path.display());
            Ok(())
        }
        Command::IngestCifar {
            ref input,
            out: ref path,
            split,
        } => {
            let data = ingest_cifar(input, split)?;
            data.write(path)?;
            log::info!("wrote {} images to {}", data.count, path.display());
            Ok(())
        }
        Command::Train(ref args) => cmd_train(&cli, args, out),
        Command::Eval {
            ref checkpoint,
            ref data,
        } => {
            let ck = Checkpoint::read(checkpoint)?;
            let data = match data {
                Some(p) => Dataset::read(p)?,
                None => trainer::load_splits(&ck.config)?.1,
            };
            let row = trainer::evaluate(&ck, &data)?;
            let text = rows_csv(&[row]);
            out.write_all(text.as_bytes()).map_err(|e| Failure::check(e.to_string()))?;
            if let Some(dir) = &cli.out_dir {
                write_file(&dir.join("eval.csv"), text.as_bytes())?;
            }
            Ok(())
        }
        Command::AnalyzeTops {
            ref checkpoint,
            ref data,
            max_s,
        } => {
            let ck = Checkpoint::read(checkpoint)?;
            if !ck.config.quantizer.is_scq() {
                return Err(Failure::usage(format!(
                    "{} was trained with a {:?} quantizer; top-S analysis needs scq_fast or scq_exact",
                    checkpoint.display(),
                    ck.config.quantizer
                )));
            }
            let data = Dataset::read(data)?;
            let curve = trainer::analyze_tops(&ck, &data, max_s)?;
            let mut text = String::from("s,mse\n");
            for (s, mse) in curve {
                text.push_str(&format!("{s},{mse}\n"));
            }
            out.write_all(text.as_bytes()).map_err(|e| Failure::check(e.to_string()))?;
            if let Some(dir) = &cli.out_dir {
                write_file(&dir.join("tops.csv"), text.as_bytes())?;
            }
            Ok(())
        }
        Command::Gradcheck { suite, ref corrupt } => {
            scq_core::autodiff::set_corrupted_op(corrupt.as_deref());
            let reports = run_suite(suite, cli.seed.unwrap_or(0));
            scq_core::autodiff::set_corrupted_op(None);
            let reports = reports?;
            for r in &reports {
                writeln!(out, "{r}").map_err(|e| Failure::check(e.to_string()))?;
            }
            let failed = failing(&reports);
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::check(format!("gradient check failed for: {}", failed.join(", "))))
            }
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::check(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::check(format!("{}: {e}", path.display())))
}

fn rows_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("metrics rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is UTF-8")
}

fn load_config(cli: &Cli, args: &TrainArgs) -> CliResult<TrainConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::usage("train needs --config <file>"))?;
    let text = fs::read_to_string(path).map_err(|e| Failure::check(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("schema error: /: invalid JSON: {e}")))?;
    if let (Some(seed), Some(obj)) = (cli.seed, value.as_object_mut()) {
        obj.insert("seed".into(), seed.into());
    }
    if let (Some(dir), Some(obj)) = (&cli.out_dir, value.as_object_mut()) {
        obj.insert("output_dir".into(), dir.display().to_string().into());
    }
    let cfg = TrainConfig::from_value(&value)?;
    Ok(cfg.with_overrides(&args.overrides)?)
}

/// Sample mean and (n − 1) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_train(cli: &Cli, args: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = load_config(cli, args)?;
    if args.seed_list.is_empty() {
        let outcome = trainer::train(&cfg)?;
        out.write_all(rows_csv(&[outcome.final_test]).as_bytes())
            .map_err(|e| Failure::check(e.to_string()))?;
        return Ok(());
    }
    let base = PathBuf::from(&cfg.output_dir);
    let mut finals = Vec::new();
    for &seed in &args.seed_list {
        let mut run = cfg.clone();
        run.seed = seed;
        run.output_dir = base.join(format!("seed-{seed}")).display().to_string();
        log::info!("seed {seed}: training into {}", run.output_dir);
        trainer::train(&run)?;
        // aggregate from the files written, so the summary reflects the artifacts
        let rows = read_metrics(&Path::new(&run.output_dir).join("metrics.csv"))?;
        let last = rows
            .into_iter()
            .filter(|r| r.split == "test")
            .last()
            .ok_or_else(|| Failure::check("metrics file has no test row"))?;
        finals.push(last);
    }
    let text = aggregate_csv(&finals);
    write_file(&base.join("aggregate.csv"), text.as_bytes())?;
    out.write_all(text.as_bytes()).map_err(|e| Failure::check(e.to_string()))?;
    Ok(())
}

/// `metric,mean,stddev,n` over the final test rows of several runs.
pub fn aggregate_csv(rows: &[MetricsRow]) -> String {
    let mut text = String::from("metric,mean,stddev,n\n");
    let metrics: [(&str, fn(&MetricsRow) -> f64); 6] = [
        ("mse", |r| r.mse),
        ("quant_error", |r| r.quant_error),
        ("perplexity", |r| r.perplexity),
        ("loss_total", |r| r.loss_total),
        ("loss_commit", |r| r.loss_commit),
        ("min_entry", |r| r.min_entry),
    ];
    for (name, get) in metrics {
        let values: Vec<f64> = rows.iter().map(get).collect();
        let (mean, std) = mean_std(&values);
        text.push_str(&format!("{name},{mean},{std},{}\n", values.len()));
    }
    text
}

/// Parses arguments, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
