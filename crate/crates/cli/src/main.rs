use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use starspike::config::ValueSource;
use starspike::ingest::{write_recording_csv, ColumnMap};
use starspike::pipeline::{
    self, read_document, report_files, to_json, write_atomically, AnalyzeOutput, DetectOutput,
    PropagateOutput, ReportBundle, StageDocument, TruthDocument,
};
use starspike::synth::{generate, GroundTruth, SynthParams};
use starspike::{Direction, Error, ErrorKind, PipelineConfig, SeparationMetric};

#[derive(Parser)]
#[command(name = "starspike", version, about = "Spike, burst, coupling and propagation analysis for eight-direction slow recordings")]
struct Cli {
    /// More progress output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic recording and its ground truth.
    Synth(SynthArgs),
    /// Detrend, detect spikes and correlate channels.
    Detect(DetectArgs),
    /// Rates, amplitudes, intervals and bursts from a detect document.
    Analyze(StageArgs),
    /// Reference-onset delays from an analyze document.
    Propagate(StageArgs),
    /// Compare a detect document with ground truth.
    Score(ScoreArgs),
    /// Pool propagate documents into a report directory.
    Report(ReportArgs),
    /// All stages in one go, from recordings to a report directory.
    Run(RunArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Sectioned key-value configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `events.dispersion_k=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Reference direction for propagation.
    #[arg(long)]
    reference: Option<Direction>,
    /// Propagation match window in seconds.
    #[arg(long, value_name = "SECONDS")]
    window: Option<f64>,
    /// Detrending window in seconds.
    #[arg(long, value_name = "SECONDS")]
    detrend_window: Option<f64>,
    /// Burst gap in seconds.
    #[arg(long, value_name = "SECONDS")]
    burst_gap: Option<f64>,
    /// Channel separation metric.
    #[arg(long)]
    metric: Option<SeparationMetric>,
    /// Unit of the voltage columns: mV or V.
    #[arg(long)]
    units: Option<String>,
    /// Column mapping, e.g. `time=t,N=ch1,NE=ch2`.
    #[arg(long, value_name = "MAP")]
    columns: Option<String>,
}

#[derive(Args)]
struct DetectArgs {
    /// Recording files; each file stem becomes a session id.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output document.
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct StageArgs {
    /// Previous stage's document.
    input: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ScoreArgs {
    /// Detect document.
    input: PathBuf,
    /// Ground-truth files written by `synth` (repeatable).
    #[arg(long, required = true)]
    truth: Vec<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    /// Onset tolerance in seconds; defaults to the configured value.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Propagate documents, one or more sessions each.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Ground truth to add a detection-quality section.
    #[arg(long)]
    truth: Vec<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct RunArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    truth: Vec<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Anisotropic rates, heavy-tailed amplitudes, lognormal delays.
    Paper,
    /// Noise and drift only.
    Noise,
    /// Fixed-shape spikes with planted per-direction delays.
    Propagation,
    /// Shared noise decaying with ring separation, no spikes.
    Coupling,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Recording length in seconds; preset default when omitted.
    #[arg(long)]
    duration: Option<f64>,
    /// Session id, used for the file names.
    #[arg(long, default_value = "synth")]
    session: String,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
}

struct Reporter {
    level: i8,
}

impl Reporter {
    fn info(&self, msg: impl AsRef<str>) {
        if self.level >= 1 {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn warn(&self, msg: impl AsRef<str>) {
        if self.level >= 0 {
            eprintln!("warning: {}", msg.as_ref());
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Input => 1,
        ErrorKind::Config => 2,
        ErrorKind::Invariant => 3,
    }
}

fn build_config(base: PipelineConfig, args: &ConfigArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        cfg.merge_file(path)?;
    }
    for s in &args.set {
        cfg.set_assignment(s, ValueSource::Flag)?;
    }
    let flag = ValueSource::Flag;
    if let Some(d) = args.reference {
        cfg.set("propagation.reference_direction", d.label(), flag)?;
    }
    if let Some(w) = args.window {
        cfg.set("propagation.window_s", &w.to_string(), flag)?;
    }
    if let Some(w) = args.detrend_window {
        cfg.set("ingest.detrend_window_s", &w.to_string(), flag)?;
    }
    if let Some(g) = args.burst_gap {
        cfg.set("events.burst_gap_s", &g.to_string(), flag)?;
    }
    if let Some(m) = args.metric {
        cfg.set("coupling.separation_metric", &m.to_string(), flag)?;
    }
    if let Some(u) = &args.units {
        cfg.set("ingest.units", u, flag)?;
    }
    if let Some(spec) = &args.columns {
        let map = ColumnMap::parse(spec).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(t) = &map.time {
            cfg.set("ingest.columns.time", t, flag)?;
        }
        for d in Direction::ALL {
            let name = &map.channels[d.index()];
            if name != d.label() {
                cfg.set(&format!("ingest.columns.{d}"), name, flag)?;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_document<T: StageDocument>(path: &Path, doc: &T) -> Result<(), Error> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?
        .to_string_lossy()
        .into_owned();
    write_atomically(dir, &[(name, to_json(doc).into_bytes())])
}

fn read_truths(paths: &[PathBuf]) -> Result<Vec<GroundTruth>, Error> {
    paths
        .iter()
        .map(|p| read_document::<TruthDocument>(p).map(|d| d.truth))
        .collect()
}

/// The report payload plus a volatile header kept in its own file.
fn write_report(dir: &Path, bundle: &ReportBundle, log: &Reporter) -> Result<(), Error> {
    let mut files = report_files(bundle);
    let generated = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let args: Vec<String> = std::env::args().collect();
    let run_info = serde_json::json!({
        "generated_unix_s": generated,
        "command": args,
        "tool_version": pipeline::TOOL_VERSION,
    });
    files.push((
        "run_info.json".to_string(),
        format!("{run_info:#}\n").into_bytes(),
    ));
    write_atomically(dir, &files)?;
    for s in &bundle.sessions {
        for w in &s.analyzed.detected.warnings {
            log.warn(format!("{}: {w}", s.session_id()));
        }
    }
    log.info(format!(
        "wrote report for {} session(s) to {}",
        bundle.sessions.len(),
        dir.display()
    ));
    Ok(())
}

fn synth(args: &SynthArgs, log: &Reporter) -> Result<(), Error> {
    let mut p = match args.preset {
        Preset::Paper => SynthParams::paper_regime(args.seed),
        Preset::Noise => SynthParams::noise_only(args.duration.unwrap_or(86_400.0), 0.5, args.seed),
        Preset::Propagation => SynthParams::propagation_benchmark(args.seed),
        Preset::Coupling => SynthParams::exponential_coupling(args.duration.unwrap_or(86_400.0), args.seed),
    };
    if let Some(d) = args.duration {
        p.duration_s = d;
    }
    p.session_id = args.session.clone();
    let (rec, truth) = generate(&p).map_err(|e| match e {
        Error::InvalidParameter(m) => Error::Config(m),
        other => other,
    })?;
    for w in &truth.warnings {
        log.warn(w);
    }
    let mut csv = Vec::new();
    write_recording_csv(&rec, &mut csv).map_err(|e| Error::io(&args.out, e))?;
    let doc = TruthDocument { truth };
    write_atomically(
        &args.out,
        &[
            (format!("{}.csv", p.session_id), csv),
            (format!("{}.truth.json", p.session_id), to_json(&doc).into_bytes()),
        ],
    )?;
    log.info(format!(
        "planted {} spikes over {} s into {}",
        doc.truth.spikes.len(),
        p.duration_s,
        args.out.join(format!("{}.csv", p.session_id)).display()
    ));
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let log = Reporter {
        level: if cli.quiet { -1 } else { cli.verbose as i8 },
    };
    match &cli.command {
        Command::Synth(a) => synth(a, &log),
        Command::Detect(a) => {
            let cfg = build_config(PipelineConfig::default(), &a.config)?;
            let doc = pipeline::detect_files(&a.inputs, &cfg)?;
            for s in &doc.sessions {
                let n: usize = s.trains.iter().map(|t| t.spikes.len()).sum();
                log.info(format!("{}: {n} spikes", s.session_id));
                for w in &s.warnings {
                    log.warn(format!("{}: {w}", s.session_id));
                }
            }
            write_document(&a.out, &doc)
        }
        Command::Analyze(a) => {
            let input: DetectOutput = read_document(&a.input)?;
            let cfg = build_config(input.config.clone(), &a.config)?;
            write_document(&a.out, &pipeline::analyze(&input, &cfg)?)
        }
        Command::Propagate(a) => {
            let input: AnalyzeOutput = read_document(&a.input)?;
            let cfg = build_config(input.config.clone(), &a.config)?;
            write_document(&a.out, &pipeline::propagate(&input, &cfg)?)
        }
        Command::Score(a) => {
            let input: DetectOutput = read_document(&a.input)?;
            let tol = a.tolerance.unwrap_or(input.config.report.score_tolerance_s);
            let out = pipeline::score(&input, &read_truths(&a.truth)?, tol)?;
            for s in &out.sessions {
                let p = &s.score.pooled;
                log.info(format!(
                    "{}: precision {:?} recall {:?} f1 {:?}",
                    s.session_id, p.precision, p.recall, p.f1
                ));
            }
            write_document(&a.out, &out)
        }
        Command::Report(a) => {
            let docs = a
                .inputs
                .iter()
                .map(|p| read_document::<PropagateOutput>(p))
                .collect::<Result<Vec<_>, _>>()?;
            let base = docs.first().map(|d| d.config.clone()).unwrap_or_default();
            let cfg = build_config(base, &a.config)?;
            let bundle = pipeline::report(&docs, &cfg, &read_truths(&a.truth)?)?;
            write_report(&a.out, &bundle, &log)
        }
        Command::Run(a) => {
            let cfg = build_config(PipelineConfig::default(), &a.config)?;
            let bundle = pipeline::run_pipeline(&a.inputs, &cfg, &read_truths(&a.truth)?)?;
            write_report(&a.out, &bundle, &log)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                if !e.to_string().contains(&s.to_string()) {
                    let _ = writeln!(std::io::stderr(), "  caused by: {s}");
                }
                source = s.source();
            }
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
