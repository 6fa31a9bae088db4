//! `splatfields` command-line tool.
//!
//! Failures print one JSON line to stderr, `{"error":KIND,"message":...}`,
//! and exit with 1 (usage/config), 2 (data/io) or 3 (numerical).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use splatfields::io::{
    layered_config, load_scene, parse_override, synth_scene, write_ply, write_png, write_synth_scene, Checkpoint,
    PlyPrecision, SynthSpec,
};
use splatfields::metrics::MoranReport;
use splatfields::scene::SplatSet;
use splatfields::train::{TrainConfig, Trainer};
use splatfields::Error;

#[derive(Parser)]
#[command(name = "splatfields", version, about = "Gaussian splatting with neural-field splat regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a metrics CSV.
    Train(TrainArgs),
    /// Render one scene camera from a checkpoint to PNG.
    Render(RenderArgs),
    /// Evaluate a checkpoint on a scene and print metrics JSON.
    Eval(EvalArgs),
    /// Moran's I of a checkpoint or PLY file as JSON.
    Moran(MoranArgs),
    /// Bake a checkpoint to plain splats in PLY format.
    ExportPly(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    gaussians: usize,
    #[arg(long, default_value_t = 16)]
    views: usize,
    #[arg(long, default_value_t = 4)]
    holdout: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames of a dynamic sequence.
    #[arg(long)]
    time_steps: Option<usize>,
    #[arg(long, default_value_t = 200)]
    init_points: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene directory or manifest JSON.
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    /// free_3dgs, free_3dgs_moran, splatfields3d or splatfields4d.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `dotted.key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene providing the camera.
    #[arg(long)]
    scene: PathBuf,
    /// Index of the camera entry in the manifest.
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Time in [0, 1]; defaults to the entry's own time.
    #[arg(long)]
    time: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Also write the JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MoranArgs {
    #[arg(long, conflicts_with = "ply", required_unless_present = "ply")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    ply: Option<PathBuf>,
    /// Neighborhood size, the splat itself included.
    #[arg(long, default_value_t = 5)]
    neighbors: usize,
    /// Subtract the global mean before the neighborhood products.
    #[arg(long)]
    centered: bool,
    /// Time at which a dynamic checkpoint is baked.
    #[arg(long)]
    time: Option<f64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Time at which a dynamic checkpoint is baked (default 0).
    #[arg(long)]
    time: Option<f64>,
    /// Store properties as 64-bit floats.
    #[arg(long)]
    double: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) | Error::Autodiff(_) => 3,
        _ => 2,
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let text: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .collect();
            return fail("usage", text.join(" ").trim_start_matches("error: "), 1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let kind = ["ok", "usage", "data", "numerical"][code as usize];
            fail(kind, &e.to_string(), code)
        }
    }
}

fn run(command: Command) -> splatfields::Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Moran(a) => moran(a),
        Command::ExportPly(a) => export(a),
    }
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> splatfields::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Data(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn read_text(path: &Path) -> splatfields::Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> splatfields::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_trainer(path: &Path) -> splatfields::Result<Trainer> {
    Trainer::from_checkpoint(&Checkpoint::load(path)?)
}

/// Dynamic models default to t = 0 when baked.
fn bake_time(trainer: &Trainer, time: Option<f64>) -> Option<f64> {
    time.or(trainer.config.mode.is_dynamic().then_some(0.0))
}

fn synth(a: SynthArgs) -> splatfields::Result<()> {
    let spec = SynthSpec {
        gaussians: a.gaussians,
        views: a.views,
        holdout: a.holdout,
        width: a.width,
        height: a.height,
        seed: a.seed,
        time_steps: a.time_steps,
        init_points: a.init_points,
        ..SynthSpec::default()
    };
    let scene = synth_scene(&spec)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Data(format!("{}: {e}", a.out.display())))?;
    write_synth_scene(&a.out, &scene)?;
    emit(&a.out.join("transforms.json").display().to_string())
}

fn resolve_config(a: &TrainArgs) -> splatfields::Result<TrainConfig> {
    let file = a.config.as_deref().map(read_text).transpose()?;
    let mut overrides = Vec::new();
    if let Some(m) = &a.mode {
        overrides.push(("mode".to_string(), toml::Value::String(m.clone())));
    }
    if let Some(n) = a.iterations {
        overrides.push(("iterations".to_string(), toml::Value::Integer(n as i64)));
    }
    if let Some(s) = a.seed {
        overrides.push(("seed".to_string(), toml::Value::Integer(s as i64)));
    }
    for o in &a.overrides {
        overrides.push(parse_override(o)?);
    }
    let config: TrainConfig = layered_config(&TrainConfig::default(), file.as_deref(), &overrides)?;
    config.validate()?;
    Ok(config)
}

fn train(a: TrainArgs) -> splatfields::Result<()> {
    let config = resolve_config(&a)?;
    if a.print_config {
        let text = toml::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;
        return emit(text.trim_end());
    }
    let scene = load_scene(&a.scene)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = load_trainer(path)?;
            if let Some(n) = a.iterations {
                t.config.iterations = n;
            }
            t
        }
        None => Trainer::new(config, &scene)?,
    };
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let mut log = csv::Writer::from_path(&log_path).map_err(|e| Error::Data(format!("{}: {e}", log_path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", log_path.display()));
    trainer.train(&scene, |row| {
        log.serialize(row).map_err(csv_err)?;
        log.flush().map_err(|e| Error::Data(format!("{}: {e}", log_path.display())))
    })?;
    trainer.to_checkpoint()?.save(&a.out)?;
    Ok(())
}

fn render(a: RenderArgs) -> splatfields::Result<()> {
    let trainer = load_trainer(&a.checkpoint)?;
    let scene = load_scene(&a.scene)?;
    let cam = scene
        .cameras
        .get(a.view)
        .ok_or_else(|| Error::Data(format!("view {} out of range (scene has {})", a.view, scene.len())))?;
    let time = a.time.or(scene.times[a.view]);
    let out = trainer.model.render(&trainer.store, cam, time, &trainer.raster(&scene))?;
    write_png(&a.out, &out.to_frame())
}

fn eval(a: EvalArgs) -> splatfields::Result<()> {
    let trainer = load_trainer(&a.checkpoint)?;
    let scene = load_scene(&a.scene)?;
    let report = trainer.evaluate(&scene)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    if let Some(path) = &a.out {
        write_text(path, &text)?;
    }
    emit(&text)
}

fn moran(a: MoranArgs) -> splatfields::Result<()> {
    let set = match (&a.checkpoint, &a.ply) {
        (Some(path), _) => {
            let trainer = load_trainer(path)?;
            SplatSet::new(trainer.bake(bake_time(&trainer, a.time))?)?
        }
        (None, Some(path)) => splatfields::io::read_ply(path)?,
        (None, None) => return Err(Error::Config("either --checkpoint or --ply is required".into())),
    };
    emit(&MoranReport::from_set(&set, a.neighbors, a.centered)?.to_json())
}

fn export(a: ExportArgs) -> splatfields::Result<()> {
    let trainer = load_trainer(&a.checkpoint)?;
    let splats = trainer.bake(bake_time(&trainer, a.time))?;
    let precision = if a.double { PlyPrecision::Double } else { PlyPrecision::Float };
    write_ply(&a.out, &splats, precision)
}
