//! Command line for the registration pipeline.
//!
//! Subcommands cover the full workflow: `gen-data` writes a procedural
//! shape dataset, `train-coarse` and `train-fine` run the two training
//! stages, `eval` measures recall over a perturbation protocol, `report`
//! reformats a saved JSON report, and `selftest` runs the built-in health
//! checks. Exit codes: 0 on success (including help and version), 1 on
//! usage or runtime errors, 2 when a selftest check fails.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use c2f_core::equinet::ExtractorWeights;
use c2f_core::global_register::{train_stage1, DecoderWeights, Stage1Options};
use c2f_core::local_register::{train_stage2, MatcherWeights, ScorerWeights, Stage2Options};
use c2f_core::shapes::{generate_dataset, read_shape_set, write_shape_set};
use c2f_harness::config::{parse_angles, parse_config_file, EvalConfig, EvalOverrides};
use c2f_harness::experiment::run_eval;
use c2f_harness::model::ModelBundle;
use c2f_harness::report::{RecallReport, ReportFormat};
use c2f_harness::selftest::run_selftest;
use c2f_harness::HarnessError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "c2f",
    version,
    about = "Coarse-to-fine rigid point cloud registration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural shape dataset.
    GenData(GenDataArgs),
    /// Train the feature extractor and occupancy decoder.
    TrainCoarse(TrainCoarseArgs),
    /// Train the matching heads with the extractor frozen.
    TrainFine(TrainFineArgs),
    /// Run the registration evaluation protocol.
    Eval(EvalArgs),
    /// Reformat a saved JSON evaluation report.
    Report(ReportArgs),
    /// Run the built-in health checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of shapes to generate.
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination shape set file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCoarseArgs {
    /// Shape set file produced by gen-data.
    #[arg(long)]
    shapes: PathBuf,
    /// Destination checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    /// Weight of the occupancy term; the alignment residual gets the rest.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Shape pairs averaged into each gradient step.
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 96)]
    points: usize,
    #[arg(long, default_value_t = 64)]
    queries: usize,
    #[arg(long, default_value_t = 180.0)]
    max_angle: f64,
    #[arg(long, default_value_t = 0.5)]
    max_trans: f64,
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hidden width of the occupancy decoder.
    #[arg(long, default_value_t = 32)]
    decoder_hidden: usize,
    /// Write the per-step CSV trace here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainFineArgs {
    /// Shape set file produced by gen-data.
    #[arg(long)]
    shapes: PathBuf,
    /// Checkpoint holding the frozen extractor (from train-coarse).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Destination checkpoint with the trained heads added.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    #[arg(long, default_value_t = 64)]
    points: usize,
    #[arg(long, default_value_t = 180.0)]
    max_angle: f64,
    #[arg(long, default_value_t = 0.5)]
    max_trans: f64,
    /// Weight of the significance and confidence terms.
    #[arg(long, default_value_t = 0.5)]
    aux_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hidden width of the significance and matching heads.
    #[arg(long, default_value_t = 16)]
    head_hidden: usize,
    /// Write the per-step CSV trace here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Optional key=value protocol file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// clean, noisy, independent, or partial.
    #[arg(long)]
    scenario: Option<String>,
    /// coarse or full.
    #[arg(long)]
    stage: Option<String>,
    /// Comma-separated angle bounds in degrees, e.g. 45,90,135,180.
    #[arg(long)]
    angles: Option<String>,
    #[arg(long)]
    max_trans: Option<f64>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    keep_ratio: Option<f64>,
    /// fps or halfspace.
    #[arg(long)]
    crop: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses the process default.
    #[arg(long)]
    threads: Option<usize>,
    /// Checkpoint to evaluate; omitted means freshly initialized weights.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Allow the full stage to run without trained matching heads.
    #[arg(long, default_value_t = false)]
    fallback_scorer: bool,
    /// csv, json, or table.
    #[arg(long, default_value = "table")]
    format: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON report produced by eval --format json.
    #[arg(long)]
    input: PathBuf,
    /// csv, json, or table.
    #[arg(long, default_value = "table")]
    format: String,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::TrainCoarse(args) => train_coarse(args),
        Command::TrainFine(args) => train_fine(args),
        Command::Eval(args) => eval(args),
        Command::Report(args) => report(args),
        Command::Selftest(args) => selftest(args),
    }
}

/// CSV trace sink: the requested file, or nothing.
fn open_log(path: &Option<PathBuf>) -> Result<Box<dyn Write>, HarnessError> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::sink()),
    })
}

fn gen_data(args: GenDataArgs) -> Result<ExitCode, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let shapes = generate_dataset(args.count, &mut rng)?;
    write_shape_set(&args.out, &shapes)?;
    eprintln!("wrote {} shapes to {}", shapes.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn train_coarse(args: TrainCoarseArgs) -> Result<ExitCode, HarnessError> {
    let shapes = read_shape_set(&args.shapes)?;
    let mut extractor = ExtractorWeights::desk_default(args.seed);
    let mut decoder =
        DecoderWeights::init(extractor.global_channels(), args.decoder_hidden, args.seed ^ 1);
    let opts = Stage1Options {
        steps: args.steps,
        learning_rate: args.learning_rate,
        lambda: args.lambda,
        batch_size: args.batch,
        points_per_cloud: args.points,
        queries_per_cloud: args.queries,
        max_angle_deg: args.max_angle,
        max_translation: args.max_trans,
        grad_clip: args.grad_clip,
        seed: args.seed,
    };
    let mut log = open_log(&args.log)?;
    let trace = train_stage1(&mut extractor, &mut decoder, &shapes, &opts, log.as_mut())?;
    let bundle = ModelBundle { extractor, decoder: Some(decoder), scorer: None, matcher: None };
    bundle.save(&args.out)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        eprintln!(
            "trained {} steps: total loss {:.6} -> {:.6}, saved {}",
            trace.len(),
            first.total,
            last.total,
            args.out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn train_fine(args: TrainFineArgs) -> Result<ExitCode, HarnessError> {
    let shapes = read_shape_set(&args.shapes)?;
    let bundle = ModelBundle::load(&args.checkpoint)?;
    let mut scorer =
        ScorerWeights::init(bundle.extractor.descriptor_channels(), args.head_hidden, args.seed ^ 2);
    let mut matcher = MatcherWeights::init(args.head_hidden, args.seed ^ 3);
    let opts = Stage2Options {
        steps: args.steps,
        learning_rate: args.learning_rate,
        points_per_cloud: args.points,
        max_angle_deg: args.max_angle,
        max_translation: args.max_trans,
        aux_weight: args.aux_weight,
        grad_clip: args.grad_clip,
        seed: args.seed,
    };
    let mut log = open_log(&args.log)?;
    let report =
        train_stage2(&bundle.extractor, &mut scorer, &mut matcher, &shapes, &opts, log.as_mut())?;
    let out = ModelBundle {
        extractor: bundle.extractor,
        decoder: bundle.decoder,
        scorer: Some(scorer),
        matcher: Some(matcher),
    };
    out.save(&args.out)?;
    if let (Some(first), Some(last)) = (report.trace.first(), report.trace.last()) {
        eprintln!(
            "trained {} steps: total loss {:.6} -> {:.6}, saved {}",
            report.trace.len(),
            first.total,
            last.total,
            args.out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

/// Resolves the protocol (command line over file over defaults) and the
/// model, then runs the evaluation.
fn eval(args: EvalArgs) -> Result<ExitCode, HarnessError> {
    let format: ReportFormat = args.format.parse()?;
    let from_file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => EvalOverrides::default(),
    };
    let from_cli = EvalOverrides {
        scenario: args
            .scenario
            .as_deref()
            .map(|s| s.parse().map_err(|e| HarnessError::Config(format!("{e}"))))
            .transpose()?,
        stage: args.stage.as_deref().map(str::parse).transpose()?,
        angle_ranges: args.angles.as_deref().map(parse_angles).transpose()?,
        max_translation: args.max_trans,
        instances: args.instances,
        points_per_cloud: args.points,
        keep_ratio: args.keep_ratio,
        crop: args.crop.as_deref().map(str::parse).transpose()?,
        refine_iterations: args.iterations,
        seed: args.seed,
        threads: args.threads,
    };
    let config: EvalConfig = from_cli.over(from_file).resolve()?;

    let model = match &args.checkpoint {
        Some(path) => ModelBundle::load(path)?,
        None => ModelBundle::untrained(config.seed),
    };
    if config.stage == c2f_harness::config::Stage::Full
        && (model.scorer.is_none() || model.matcher.is_none())
        && !args.fallback_scorer
    {
        return Err(HarnessError::MissingCheckpoint(
            "full-stage evaluation needs trained matching heads".into(),
        ));
    }

    let report = run_eval(&model, &config)?;
    let rendered = report.render(format)?;
    match &args.out {
        Some(path) => std::fs::write(path, rendered)?,
        None => print!("{rendered}"),
    }
    eprintln!("{}", report.timing_summary());
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> Result<ExitCode, HarnessError> {
    let format: ReportFormat = args.format.parse()?;
    let text = std::fs::read_to_string(&args.input)?;
    let report = RecallReport::from_json(&text)?;
    print!("{}", report.render(format)?);
    Ok(ExitCode::SUCCESS)
}

fn selftest(args: SelftestArgs) -> Result<ExitCode, HarnessError> {
    let outcomes = run_selftest(args.seed);
    let mut all_passed = true;
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "pass" } else { "FAIL" }, o.name, o.detail);
        all_passed &= o.passed;
    }
    if all_passed {
        println!("all {} checks passed", outcomes.len());
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}
