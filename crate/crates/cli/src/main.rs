use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use beamtrack::eval::{evaluate, EvalOptions};
use beamtrack::frontend::FrontendConfig;
use beamtrack::geometry::ArrayGeometry;
use beamtrack::io::{
    read_ground_truth_csv, read_trajectory, read_wav, write_csv_to, write_diagnostics_csv,
    write_ground_truth_csv, write_trajectory_csv, write_trajectory_json, write_wav, Audio,
    SampleFormat, TRAJECTORY_HEADER,
};
use beamtrack::pipeline::{tracker_update_cost, Pipeline, PipelineConfig, TrajectoryFormat};
use beamtrack::simulator::{render_scene, Keypoint, SceneSpec, SignalSpec, SourceScript};
use beamtrack::{Error, Result};

#[derive(Parser)]
#[command(name = "beamtrack", version, about = "Microphone-array sound source localization and tracking")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene description to a multichannel WAV and ground truth.
    Simulate(SimulateArgs),
    /// Localize and track sources in a multichannel WAV.
    Track(TrackArgs),
    /// Score a trajectory against ground truth.
    Evaluate(EvaluateArgs),
    /// Measure processing speed.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene JSON.
    scene: PathBuf,
    /// Array geometry JSON.
    #[arg(short, long)]
    geometry: PathBuf,
    /// Output WAV.
    #[arg(short, long)]
    output: PathBuf,
    /// Ground-truth CSV, sampled at the tracker's update times.
    #[arg(short, long)]
    truth: Option<PathBuf>,
    /// WAV sample format: pcm16 or float32.
    #[arg(long, default_value = "float32")]
    format: SampleFormat,
}

#[derive(Args)]
struct TrackArgs {
    /// Multichannel WAV.
    input: PathBuf,
    /// Pipeline config JSON; defaults are used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Array geometry JSON; overrides the config's geometry.
    #[arg(short, long)]
    geometry: Option<PathBuf>,
    /// Microphones to use, 1-based, e.g. "1-4" or "1,3,5-8".
    #[arg(long)]
    mics: Option<String>,
    /// Config override, e.g. --set tracker.particles_per_source=500.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Estimation delay in seconds (shorthand for --set estimation_delay=...).
    #[arg(long)]
    delay: Option<f64>,
    /// Trajectory output; CSV on stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Trajectory format: csv or json (default from the config or the
    /// output extension).
    #[arg(long)]
    format: Option<String>,
    /// Beamformer peaks per update as CSV.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trajectory CSV or JSON.
    trajectory: PathBuf,
    /// Ground-truth CSV.
    truth: PathBuf,
    /// Match gate in degrees.
    #[arg(long, default_value_t = 10.0)]
    gate: f64,
    /// Ignore ground truth before this time (s).
    #[arg(long)]
    start: Option<f64>,
    /// Ignore ground truth after this time (s).
    #[arg(long)]
    end: Option<f64>,
    /// Write the JSON report here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Seconds of synthetic audio to process.
    #[arg(long, default_value_t = 10.0)]
    seconds: f64,
    /// Array geometry JSON; a 16 cm cube when omitted.
    #[arg(short, long)]
    geometry: Option<PathBuf>,
    /// Particles per source for the tracker measurement.
    #[arg(long, default_value_t = 1000)]
    particles: usize,
    /// Largest number of tracked sources to time.
    #[arg(long, default_value_t = 4)]
    max_sources: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses "1-4", "1,3,5-8" into zero-based channel indices.
fn parse_mics(spec: &str, available: usize) -> Result<Vec<usize>> {
    let bad = |msg: String| Error::InvalidConfig(format!("--mics '{spec}': {msg}"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (part, part),
        };
        let lo: usize = lo.parse().map_err(|_| bad(format!("'{part}' is not a number or range")))?;
        let hi: usize = hi.parse().map_err(|_| bad(format!("'{part}' is not a number or range")))?;
        if lo == 0 || hi < lo || hi > available {
            return Err(bad(format!("'{part}' must lie within 1-{available}")));
        }
        for m in lo..=hi {
            if out.contains(&(m - 1)) {
                return Err(bad(format!("microphone {m} listed twice")));
            }
            out.push(m - 1);
        }
    }
    if out.is_empty() {
        return Err(bad("no microphones selected".into()));
    }
    Ok(out)
}

fn parse_format(s: &str) -> Result<TrajectoryFormat> {
    match s {
        "csv" => Ok(TrajectoryFormat::Csv),
        "json" => Ok(TrajectoryFormat::Json),
        other => Err(Error::InvalidConfig(format!(
            "unknown trajectory format '{other}' (expected csv or json)"
        ))),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let scene = SceneSpec::load(&args.scene)?;
    let geometry = ArrayGeometry::load(&args.geometry)?;
    let (rendered, truth) = render_scene(&scene, &geometry)?;
    let audio = Audio {
        channels: rendered.channels,
        sample_rate: rendered.sample_rate,
    };
    write_wav(&args.output, &audio, args.format)?;
    info!(
        "wrote {} channels x {} samples to {}",
        audio.channels.len(),
        audio.num_samples(),
        args.output.display()
    );
    if let Some(path) = &args.truth {
        let frontend = FrontendConfig::default();
        let fs = audio.sample_rate;
        let times = (0..)
            .map(|k| frontend.update_timestamp(k, fs))
            .take_while(|&t| t <= scene.duration);
        write_ground_truth_csv(path, &truth.rows(times))?;
    }
    Ok(())
}

fn track(args: TrackArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    for o in &args.overrides {
        config.apply_override(o)?;
    }
    if let Some(d) = args.delay {
        config.estimation_delay = d;
    }
    if let Some(g) = &args.geometry {
        config.geometry = Some(g.clone());
    }
    config.validate()?;
    let geometry_path = config.geometry.clone().ok_or_else(|| {
        Error::InvalidConfig("no array geometry: pass --geometry or set it in the config".into())
    })?;
    let mut geometry = ArrayGeometry::load(&geometry_path)?;

    let audio = read_wav(&args.input)?;
    if audio.sample_rate != geometry.sample_rate() {
        return Err(Error::ConfigMismatch(format!(
            "{} is sampled at {} Hz but the geometry expects {} Hz; resample first",
            args.input.display(),
            audio.sample_rate,
            geometry.sample_rate()
        )));
    }
    if audio.channels.len() != geometry.num_mics() {
        return Err(Error::ConfigMismatch(format!(
            "{} has {} channels, geometry has {} microphones",
            args.input.display(),
            audio.channels.len(),
            geometry.num_mics()
        )));
    }
    let mut channels = audio.channels;
    if let Some(spec) = &args.mics {
        let keep = parse_mics(spec, geometry.num_mics())?;
        geometry = geometry.subset(&keep)?;
        channels = keep.iter().map(|&c| std::mem::take(&mut channels[c])).collect();
    }

    let output = args.output.clone().or_else(|| config.output.trajectory.clone());
    let format = match &args.format {
        Some(f) => parse_format(f)?,
        None => match &output {
            Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) => {
                TrajectoryFormat::Json
            }
            _ => config.output.format,
        },
    };
    let diagnostics = args.diagnostics.clone().or_else(|| config.output.diagnostics.clone());

    let mut pipeline = Pipeline::new(config, geometry)?;
    let result = pipeline.run(&channels)?;
    match (&output, format) {
        (Some(p), TrajectoryFormat::Csv) => write_trajectory_csv(p, &result.trajectory)?,
        (Some(p), TrajectoryFormat::Json) => write_trajectory_json(p, &result.trajectory)?,
        (None, TrajectoryFormat::Csv) => {
            write_csv_to(std::io::stdout().lock(), TRAJECTORY_HEADER, &result.trajectory)?
        }
        (None, TrajectoryFormat::Json) => to_stdout(
            &serde_json::to_string_pretty(&result.trajectory).expect("records serialize"),
        ),
    }
    if let Some(p) = &diagnostics {
        write_diagnostics_csv(p, &result.diagnostics)?;
    }
    if let Some(s) = &result.stats {
        eprintln!(
            "{:.2} s of audio, {} updates, {:.3} s wall, real-time factor {:.1}",
            s.audio_seconds, s.updates, s.wall_seconds, s.real_time_factor
        );
    }
    Ok(())
}

// A closed pipe (e.g. `| head`) is not an error worth reporting.
fn to_stdout(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn write_report(value: &serde_json::Value, output: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match output {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            to_stdout(&text);
            Ok(())
        }
    }
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let tracks = read_trajectory(&args.trajectory)?;
    let truth = read_ground_truth_csv(&args.truth)?;
    let options = EvalOptions {
        gate_deg: args.gate,
        start: args.start,
        end: args.end,
        ..Default::default()
    };
    let report = evaluate(&tracks, &truth, &options);
    let value = serde_json::to_value(&report).expect("report serializes");
    write_report(&value, args.output.as_deref())
}

/// Talkers spread evenly in azimuth, each drifting 30 degrees.
fn bench_scene(seconds: f64, sources: usize, seed: u64) -> SceneSpec {
    let scripts = (0..sources)
        .map(|k| {
            let az = -180.0 + 360.0 * (k as f64 + 0.5) / sources as f64;
            SourceScript {
                signal: SignalSpec::Speech {
                    level: 0.1,
                    syllable_rate: 4.0,
                },
                trajectory: vec![
                    Keypoint {
                        time: 0.0,
                        azimuth: az,
                        elevation: 10.0,
                        distance: 2.0,
                    },
                    Keypoint {
                        time: seconds,
                        azimuth: az + 30.0,
                        elevation: 10.0,
                        distance: 2.0,
                    },
                ],
                active: Vec::new(),
            }
        })
        .collect();
    SceneSpec {
        duration: seconds,
        sources: scripts,
        noise_level: 0.005,
        reverb: None,
        seed,
    }
}

fn bench(args: BenchArgs) -> Result<()> {
    if !(args.seconds > 0.0) {
        return Err(Error::InvalidConfig("--seconds must be positive".into()));
    }
    let geometry = match &args.geometry {
        Some(p) => ArrayGeometry::load(p)?,
        None => ArrayGeometry::cube(0.16),
    };
    let config = PipelineConfig::default();
    let scene = bench_scene(args.seconds, 4.min(args.max_sources.max(1)), args.seed);
    let (rendered, _) = render_scene(&scene, &geometry)?;
    let mut pipeline = Pipeline::new(config.clone(), geometry.clone())?;
    let stats = pipeline.run(&rendered.channels)?.stats.expect("stats are recorded");

    let mut tracker = config.tracker.clone();
    tracker.particles_per_source = args.particles;
    let mut costs = Vec::new();
    for n in 1..=args.max_sources {
        let seconds = tracker_update_cost(&tracker, n, 100)?;
        costs.push(json!({ "sources": n, "ms_per_update": seconds * 1e3 }));
    }
    let report = json!({
        "channels": geometry.num_mics(),
        "audio_seconds": stats.audio_seconds,
        "wall_seconds": stats.wall_seconds,
        "real_time_factor": stats.real_time_factor,
        "updates": stats.updates,
        "particles_per_source": args.particles,
        "tracker": costs,
    });
    write_report(&report, None)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Track(a) => track(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
