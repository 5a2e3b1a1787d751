use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use thiserror::Error;

use twinforge::classifier::ModeKind;
use twinforge::fusion::write_sensors_csv;
use twinforge::ingestion::{
    series_sink, write_position_log, LocationListener, LogFormat, ParseMode, SampleSeries,
};
use twinforge::pipeline::{
    self, classify_all, evaluate_outputs, fuse, load_ground_truth, load_plc, load_signals,
    obtain_model, presence_signals, read_classifications_jsonl, segment_all,
    segmented_from_records, simulation_files, write_classifications_jsonl, write_outputs,
    PipelineConfig, PipelineError, CLASSIFICATIONS_JSONL, MODEL_JSON, SENSORS_CSV,
    SUBSEQUENCES_JSONL,
};
use twinforge::segmentation::{read_subsequences_jsonl, write_subsequences_jsonl};
use twinforge::simulator::{default_warehouse_config, simulate, PlantConfig};

#[derive(Parser)]
#[command(
    name = "twinforge",
    version,
    about = "Reconstruct a linked plant model from PLC, signal and RTLS data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic position and signal logs plus ground truth.
    Simulate {
        /// Plant description (TOML); the built-in 4-row warehouse if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage and write graph.json, graph.graphml, sensors.csv and report.json.
    Run(RunArgs),
    /// Score an output directory against simulator ground truth.
    Eval {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
    },
    /// Segment the position log into subsequences.jsonl.
    Segment {
        #[command(flatten)]
        common: StageArgs,
        /// Attach ground-truth row labels, producing training data.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Classify subsequences.jsonl into classifications.jsonl.
    Classify {
        #[command(flatten)]
        common: StageArgs,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Fuse signal transitions with classified subsequences into sensors.csv.
    Fuse {
        #[command(flatten)]
        common: StageArgs,
    },
    /// Accept one TCP replay session and store it as a position JSONL log.
    Listen {
        #[arg(long, default_value = "127.0.0.1:7878")]
        endpoint: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Send a position JSONL log to a listening endpoint.
    Replay {
        #[arg(long, default_value = "127.0.0.1:7878")]
        endpoint: String,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[command(flatten)]
    parse: ParseFlags,
    /// Ground truth for the evaluation section of report.json.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory holding the intermediate files; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    parse: ParseFlags,
}

#[derive(Args)]
#[group(multiple = false)]
struct ParseFlags {
    /// Abort on the first malformed record.
    #[arg(long)]
    strict: bool,
    /// Skip malformed records and count them.
    #[arg(long)]
    lenient: bool,
}

impl ParseFlags {
    fn apply(&self, config: &mut PipelineConfig) {
        if self.strict {
            config.parse_mode = ParseMode::Strict;
        } else if self.lenient {
            config.parse_mode = ParseMode::Lenient;
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Whole,
    Windowed,
}

impl From<Mode> for ModeKind {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Whole => ModeKind::Whole,
            Mode::Windowed => ModeKind::Windowed,
        }
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Pipeline(e) if e.is_input_error() => 2,
            CliError::Input(_) => 2,
            CliError::Pipeline(_) | CliError::Internal(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TWINFORGE_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate { config, seed, out } => cmd_simulate(config.as_deref(), seed, &out),
        Command::Run(args) => cmd_run(&args),
        Command::Eval { out, ground_truth } => cmd_eval(&out, &ground_truth),
        Command::Segment {
            common,
            ground_truth,
        } => cmd_segment(&common, ground_truth.as_deref()),
        Command::Classify { common, mode } => cmd_classify(&common, mode),
        Command::Fuse { common } => cmd_fuse(&common),
        Command::Listen { endpoint, out } => cmd_listen(&endpoint, &out),
        Command::Replay { endpoint, input } => cmd_replay(&endpoint, &input),
    }
}

fn write_failure(path: &Path, source: std::io::Error) -> CliError {
    PipelineError::Write {
        path: path.to_path_buf(),
        source,
    }
    .into()
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| {
        PipelineError::Read {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::Internal(e.to_string()))?;
    writeln!(out).map_err(|e| CliError::Internal(e.to_string()))
}

fn cmd_simulate(config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let plant = match config {
        Some(path) => {
            let text = String::from_utf8(read_input(path)?)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            PlantConfig::from_toml(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        }
        None => default_warehouse_config(),
    };
    let sim = simulate(&plant, seed).map_err(|e| CliError::Input(e.to_string()))?;
    write_outputs(out, &simulation_files(&sim))?;
    info!(
        "wrote {} positions and {} signal samples to {}",
        sim.positions.len(),
        sim.signals.len(),
        out.display()
    );
    Ok(())
}

fn load_config(path: &Path, out: Option<&Path>, parse: &ParseFlags) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::load(path)?;
    if let Some(out) = out {
        config.output_dir = out.to_path_buf();
    }
    parse.apply(&mut config);
    Ok(config)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut config = load_config(&args.config, args.out.as_deref(), &args.parse)?;
    if let Some(mode) = args.mode {
        config.classifier.mode = mode.into();
    }
    if let Some(gt) = &args.ground_truth {
        config.inputs.ground_truth = Some(gt.clone());
    }
    let started = std::time::Instant::now();
    let out = pipeline::run(&config)?;
    let c = &out.report.counts;
    println!(
        "{}: {} subsequences, {} sensor estimates, {} nodes, {} edges",
        config.output_dir.display(),
        c.segmentation.subsequences,
        c.estimates,
        c.graph_nodes,
        c.graph_edges
    );
    info!("pipeline finished in {:?}", started.elapsed());
    Ok(())
}

fn cmd_eval(out: &Path, ground_truth: &Path) -> Result<()> {
    print_json(&evaluate_outputs(out, ground_truth)?)
}

fn stage_dir(config: &PipelineConfig) -> &Path {
    &config.output_dir
}

fn cmd_segment(args: &StageArgs, ground_truth: Option<&Path>) -> Result<()> {
    let config = load_config(&args.config, args.out.as_deref(), &args.parse)?;
    let positions = pipeline::load_positions(&config.inputs.positions, config.parse_mode)?;
    let (segmented, counts) = segment_all(&positions.series, &config.segmentation)?;
    let truth = ground_truth.map(load_ground_truth).transpose()?;
    let bytes = write_subsequences_jsonl(segmented.iter().map(|s| {
        let sub = &s.subsequence;
        let label = truth
            .as_ref()
            .and_then(|t| t.label_for(&sub.transponder_id, sub.t_start, sub.t_end));
        (sub, label)
    }));
    write_outputs(stage_dir(&config), &[(SUBSEQUENCES_JSONL, bytes)])?;
    print_json(&counts)
}

fn read_stage_subsequences(dir: &Path) -> Result<Vec<pipeline::Segmented>> {
    let path = dir.join(SUBSEQUENCES_JSONL);
    let records = read_subsequences_jsonl(&read_input(&path)?)
        .map_err(|reason| PipelineError::Format { path, reason })?;
    Ok(segmented_from_records(&records))
}

fn cmd_classify(args: &StageArgs, mode: Option<Mode>) -> Result<()> {
    let mut config = load_config(&args.config, args.out.as_deref(), &args.parse)?;
    if let Some(mode) = mode {
        config.classifier.mode = mode.into();
    }
    let segmented = read_stage_subsequences(stage_dir(&config))?;
    let (model, source, _) = obtain_model(&config)?;
    let records = classify_all(&model, &segmented, &config.classifier)?;
    let mut files = vec![(CLASSIFICATIONS_JSONL, write_classifications_jsonl(&records))];
    if source == "fit" {
        files.push((MODEL_JSON, model.to_json()));
    }
    write_outputs(stage_dir(&config), &files)?;
    let classified = records.iter().filter(|r| r.label.is_some()).count();
    println!("{classified} of {} subsequences classified", records.len());
    Ok(())
}

fn cmd_fuse(args: &StageArgs) -> Result<()> {
    let config = load_config(&args.config, args.out.as_deref(), &args.parse)?;
    let dir = stage_dir(&config);
    let segmented = read_stage_subsequences(dir)?;
    let class_path = dir.join(CLASSIFICATIONS_JSONL);
    let labels: BTreeMap<String, String> = read_classifications_jsonl(&read_input(&class_path)?)
        .map_err(|reason| PipelineError::Format {
            path: class_path,
            reason,
        })?
        .into_iter()
        .filter_map(|r| Some((r.subsequence_id, r.label?)))
        .collect();
    let signals = load_signals(&config.inputs.signals, config.parse_mode)?;
    let (project, _) = load_plc(&config.inputs.plc)?;
    let outcome = fuse(
        &presence_signals(&signals.series, Some(&project)),
        &segmented,
        &labels,
        &config.fusion,
    )?;
    write_outputs(
        dir,
        &[(
            SENSORS_CSV,
            write_sensors_csv(&outcome.estimates, &outcome.assignments),
        )],
    )?;
    println!(
        "{} sensor estimates, {} signals without enough support",
        outcome.estimates.len(),
        outcome.unestimated.len()
    );
    Ok(())
}

fn cmd_listen(endpoint: &str, out: &Path) -> Result<()> {
    let listener = LocationListener::bind(endpoint).map_err(|e| CliError::Input(e.to_string()))?;
    if let Ok(addr) = listener.local_addr() {
        eprintln!("listening on {addr}");
    }
    let (mut writer, reader) = series_sink();
    let summary = listener
        .accept_session(&mut writer)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let series = SampleSeries::from_unsorted(reader.snapshot());
    let bytes = write_position_log(&series, LogFormat::Jsonl);
    std::fs::write(out, bytes).map_err(|e| write_failure(out, e))?;
    print_json(&summary)
}

fn cmd_replay(endpoint: &str, input: &Path) -> Result<()> {
    let file = File::open(input).map_err(|source| PipelineError::Read {
        path: input.to_path_buf(),
        source,
    })?;
    let sent = twinforge::ingestion::replay_position_stream(endpoint, file)
        .map_err(|e| CliError::Input(format!("{endpoint}: {e}")))?;
    println!("{sent} lines sent");
    Ok(())
}
