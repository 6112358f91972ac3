// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use streameval::config::RunConfig;
use streameval::delay::{self, DelayConfig};
use streameval::engine::{self, build_reference_profile, read_labels, EngineError};
use streameval::event::{write_stream, ReaderOptions, StreamRecord};
use streameval::iw::DEFAULT_MIN_COUNT;
use streameval::report;
use streameval::synth::{self, Generator, ScenarioConfig};

/// Replay-based evaluation of binary classifiers over prediction and label streams.
#[derive(Debug, Parser)]
#[command(name = "streameval", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic prediction/label stream.
    Generate(GenerateArgs),
    /// Build a per-subgroup accuracy profile from a reference set.
    Profile(ProfileArgs),
    /// Drop and delay labels.
    Delay(DelayArgs),
    /// Run an evaluation and write the report CSV.
    Evaluate(ConfigArgs),
    /// Compare metrics on true labels against delayed, incomplete labels.
    Compare(ConfigArgs),
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false)]
struct ScenarioSource {
    /// Scenario JSON file.
    #[arg(long, group = "source")]
    scenario: Option<PathBuf>,
    /// Built-in scenario name.
    #[arg(long, group = "source", value_parser = ["taxi-like"])]
    builtin: Option<String>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    source: ScenarioSource,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ProfileArgs {
    /// Reference predictions and labels files.
    #[arg(long, num_args = 2, value_names = ["PREDICTIONS", "LABELS"], required = true)]
    reference: Vec<PathBuf>,
    /// Smaller groups are folded into __other__.
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    min_count: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DelayArgs {
    /// Fully labeled input stream.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 7.0)]
    mean_days: f64,
    /// Probability that a label is kept.
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration JSON.
    #[arg(long)]
    config: PathBuf,
}

/// Exit 1 for bad data or configuration, 2 for usage and I/O problems.
#[derive(Debug)]
enum Failure {
    Data(String),
    Io(String),
}

impl Failure {
    fn io(path: &Path, e: io::Error) -> Self {
        Failure::Io(format!("{}: {e}", path.display()))
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e.exit_code() {
            2 => Failure::Io(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Delay(a) => cmd_delay(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::io(path, e))
}

fn write_pairs(dir: &Path, prefix: &str, pairs: Generator) -> Result<u64, Failure> {
    let pred_path = dir.join(format!("{prefix}predictions.jsonl"));
    let label_path = dir.join(format!("{prefix}labels.jsonl"));
    let mut preds = create(&pred_path)?;
    let mut labels = create(&label_path)?;
    let mut count = 0;
    for pair in pairs {
        writeln!(preds, "{}", pair.prediction.to_line()).map_err(|e| Failure::io(&pred_path, e))?;
        writeln!(labels, "{}", pair.label.to_line()).map_err(|e| Failure::io(&label_path, e))?;
        count += 1;
    }
    preds.flush().map_err(|e| Failure::io(&pred_path, e))?;
    labels.flush().map_err(|e| Failure::io(&label_path, e))?;
    Ok(count)
}

fn cmd_generate(args: GenerateArgs) -> Outcome {
    let mut scenario = match (&args.source.scenario, &args.source.builtin) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
            serde_json::from_str::<ScenarioConfig>(&text)
                .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?
        }
        _ => synth::taxi_like_scenario(),
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let live = synth::generate(&scenario).map_err(|e| Failure::Data(e.to_string()))?;
    let reference = synth::generate_reference(&scenario).map_err(|e| Failure::Data(e.to_string()))?;
    fs::create_dir_all(&args.out).map_err(|e| Failure::io(&args.out, e))?;

    let n = write_pairs(&args.out, "", live)?;
    println!("wrote {n} predictions and labels to {}", args.out.display());
    if let Some(reference) = reference {
        let n = write_pairs(&args.out, "reference_", reference)?;
        println!("wrote {n} reference predictions and labels to {}", args.out.display());
    }
    Ok(())
}

fn cmd_profile(args: ProfileArgs) -> Outcome {
    let profile = build_reference_profile(
        &args.reference[0],
        &args.reference[1],
        args.min_count,
        ReaderOptions::default(),
    )?;
    let mut out = create(&args.out)?;
    profile
        .write_json(&mut out)
        .and_then(|()| Ok(writeln!(out)?))
        .map_err(|e| Failure::Io(format!("{}: {e}", args.out.display())))?;
    let global = profile.global();
    println!(
        "profile with {} groups, global accuracy {:.4} over {} examples, written to {}",
        profile.groups().len(),
        global.accuracy,
        global.count,
        args.out.display()
    );
    Ok(())
}

fn cmd_delay(args: DelayArgs) -> Outcome {
    let config =
        DelayConfig::new(args.mean_days, args.fraction, args.seed).map_err(|e| Failure::Data(e.to_string()))?;
    let labels = read_labels(&args.labels, ReaderOptions::default())?;
    let delayed = delay::simulate(&labels, &config);
    let n = write_stream(create(&args.out)?, &delayed).map_err(|e| Failure::io(&args.out, e))?;
    println!("kept {n} of {} labels, written to {}", labels.len(), args.out.display());
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    RunConfig::from_json(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn cmd_evaluate(args: ConfigArgs) -> Outcome {
    let config = load_config(&args.config)?;
    let report = engine::run(&config)?;
    let meta = report::save_report(&config.output, &report).map_err(|e| Failure::io(&config.output, e))?;
    println!(
        "{} rows written to {} (metadata {})",
        report.metadata.rows,
        config.output.display(),
        meta.display()
    );
    Ok(())
}

fn cmd_compare(args: ConfigArgs) -> Outcome {
    let config = load_config(&args.config)?;
    let report = engine::true_vs_observed(&config)?;
    let meta = report::save_paired(&config.output, &report).map_err(|e| Failure::io(&config.output, e))?;
    println!(
        "{} paired rows written to {} (metadata {})",
        report.rows.len(),
        config.output.display(),
        meta.display()
    );
    Ok(())
}
