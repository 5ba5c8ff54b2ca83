//! Command-line interface. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sketchmod::dataio::{generate_synthetic, load_dataset, load_quickdraw, save_dataset, BatchConfig, PreparedSketch};
use sketchmod::edit::{run_edit, AttributeOverride, EditMode, EditRequest};
use sketchmod::network::{SketchMod, Variant};
use sketchmod::training::{evaluate_recovery, load_for_stage2, train, Stage, TrainConfig};
use sketchmod::{Sketch, Stroke};

use crate::service::{serve, ModelSlot, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sketchmod", version, about = "Stroke-level sketch editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one stage and write a checkpoint plus a JSONL report beside it.
    Train(TrainArgs),
    /// Measure source-attribute recovery of a trained checkpoint.
    Eval(EvalArgs),
    /// Apply one edit and write the result as SVG.
    Edit(EditArgs),
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Run the HTTP edit service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Single,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::One => Stage::Stage1,
            StageArg::Two => Stage::Stage2,
            StageArg::Single => Stage::SingleStage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Offset,
    AttributeOnly,
    Plain,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Offset => Variant::Offset,
            VariantArg::AttributeOnly => Variant::AttributeOnly,
            VariantArg::Plain => Variant::Plain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Expand,
    Replace,
    Manipulate,
    Reconstruct,
}

impl From<ModeArg> for EditMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Expand => EditMode::Expand,
            ModeArg::Replace => EditMode::Replace,
            ModeArg::Manipulate => EditMode::Manipulate,
            ModeArg::Reconstruct => EditMode::Reconstruct,
        }
    }
}

/// Where sketches come from: a file, or the synthetic generator.
#[derive(Debug, Clone, clap::Args)]
pub struct DataArgs {
    /// Dataset cache file, or QuickDraw `.ndjson` / `.bin`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of synthetic sketches when no file is given.
    #[arg(long, default_value_t = 64)]
    pub synth: usize,
    #[arg(long, default_value_t = 7)]
    pub synth_seed: u64,
}

#[derive(Debug, Clone, clap::Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// TOML training config; unset fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stage-I checkpoint to start stage II from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluation sketches; defaults to 32 synthetic sketches unseen in
    /// default training.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub synth: usize,
    #[arg(long, default_value_t = 1007)]
    pub synth_seed: u64,
}

#[derive(Debug, Clone, clap::Args)]
pub struct EditArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Target sketch JSON.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Source stroke JSON (expand, replace).
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Stroke to replace.
    #[arg(long)]
    pub index: Option<usize>,
    /// JSON array of attribute overrides (manipulate).
    #[arg(long)]
    pub overrides: Option<PathBuf>,
    /// Sampling temperature; greedy decoding when absent.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep target strokes verbatim and re-pose only the edited ones.
    #[arg(long)]
    pub geometry_only: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the edited sketch as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Also write the raster as PNG.
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Write synthetic sketches to a dataset cache file.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Checkpoint to serve; reloaded when the file changes.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Allowed CORS origin; repeatable. Any origin when omitted.
    #[arg(long = "cors-origin")]
    pub cors_origins: Vec<String>,
    /// Seconds between checkpoint change checks; 0 disables reloading.
    #[arg(long, default_value_t = 2)]
    pub reload_secs: u64,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err:#}");
            EXIT_RUNTIME
        }
    }
}

fn announce(config: &serde_json::Value, seed: u64) {
    eprintln!("config: {config}");
    eprintln!("seed: {seed}");
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Edit(args) => cmd_edit(args),
        Command::Data {
            command: DataCommand::Synth { seed, n, out },
        } => {
            announce(&json!({ "command": "data synth", "n": n, "out": out }), seed);
            save_dataset(&out, &generate_synthetic(seed, n))?;
            println!("wrote {n} sketches to {}", out.display());
            Ok(())
        }
        Command::Serve(args) => cmd_serve(args),
    }
}

fn load_sketches(path: &Path, k_max: usize) -> anyhow::Result<Vec<Sketch>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let sketches = match ext {
        "ndjson" | "jsonl" | "bin" => load_quickdraw(path, k_max)?.sketches,
        _ => load_dataset(path)?,
    };
    Ok(sketches)
}

/// Prepares every sketch that fits the model, reporting how many were skipped.
fn prepare(sketches: &[Sketch], config: &BatchConfig) -> Vec<PreparedSketch> {
    let mut skipped = 0;
    let out: Vec<_> = sketches
        .iter()
        .filter_map(|s| PreparedSketch::new(s, config).map_err(|_| skipped += 1).ok())
        .collect();
    if skipped > 0 {
        eprintln!("skipped {skipped} sketches that do not fit the model");
    }
    out
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.stage = args.stage.into();
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(v) = args.variant {
        cfg.variant = v.into();
    }
    cfg.validate()?;
    announce(&serde_json::to_value(&cfg)?, cfg.seed);

    let sketches = match &args.data.data {
        Some(path) => load_sketches(path, cfg.model.k_max)?,
        None => generate_synthetic(args.data.synth_seed, args.data.synth),
    };
    let data = prepare(&sketches, &cfg.model.batch_config());

    let mut model = match cfg.stage {
        Stage::Stage2 => {
            let Some(init) = &args.init else {
                bail!("stage 2 needs --init <stage-1 checkpoint>");
            };
            load_for_stage2(init, &cfg)?
        }
        Stage::Stage1 | Stage::SingleStage => SketchMod::new(cfg.model_config(), cfg.seed)?,
    };
    let report = train(&mut model, &data, &cfg, |r| {
        eprintln!("epoch {:>4}  loss {:>12.6}  lr {:.2e}", r.epoch, r.loss, r.lr);
    })?;
    model.save(&args.out, cfg.stage.name())?;
    let log = args.out.with_extension("jsonl");
    std::fs::write(&log, report.to_jsonl())?;
    println!("{}", report.summary_table());
    println!("checkpoint {}  report {}", args.out.display(), log.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (model, meta) = SketchMod::load(&args.checkpoint)?;
    announce(
        &json!({ "checkpoint": args.checkpoint, "stage": meta.stage, "model": model.config(), "trials": args.trials }),
        args.seed,
    );
    let sketches = match &args.data {
        Some(path) => load_sketches(path, model.config().k_max)?,
        None => generate_synthetic(args.synth_seed, args.synth),
    };
    let bc = model.config().batch_config();
    let data = prepare(&sketches, &bc);
    let metrics = evaluate_recovery(&model, &data, args.trials, args.seed, &bc)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_edit(args: EditArgs) -> anyhow::Result<()> {
    let (model, _) = SketchMod::load(&args.checkpoint)?;
    let target: Sketch = read_json(&args.input)?;
    let source: Option<Stroke> = args.source.as_deref().map(read_json).transpose()?;
    let overrides: Vec<AttributeOverride> = args
        .overrides
        .as_deref()
        .map(read_json)
        .transpose()?
        .unwrap_or_default();
    let mode: EditMode = args.mode.into();
    match mode {
        EditMode::Expand | EditMode::Replace if source.is_none() => bail!("--mode {:?} needs --source", args.mode),
        EditMode::Replace if args.index.is_none() => bail!("--mode replace needs --index"),
        _ => {}
    }
    let request = EditRequest {
        mode,
        target,
        source,
        replace_index: args.index,
        attribute_overrides: overrides,
        decode_temperature: args.temperature,
        seed: args.seed,
        geometry_only: args.geometry_only,
    };
    announce(
        &json!({
            "mode": mode,
            "checkpoint": args.checkpoint,
            "config_hash": model.config().hash(),
            "decode_temperature": args.temperature,
            "geometry_only": args.geometry_only,
        }),
        args.seed,
    );
    let result = run_edit(&model, &request)?;
    std::fs::write(&args.out, result.svg())?;
    if let Some(path) = &args.json {
        std::fs::write(path, result.edited.to_json())?;
    }
    if let Some(path) = &args.png {
        result.raster.write_png(path)?;
    }
    if let Some(p) = result.refined_attributes {
        println!("refined attributes {}", serde_json::to_string(&p)?);
    }
    println!("wrote {} strokes to {}", result.edited.len(), args.out.display());
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> anyhow::Result<()> {
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .with_context(|| format!("bad address {}:{}", args.host, args.port))?;
    announce(
        &json!({ "addr": addr.to_string(), "checkpoint": args.checkpoint, "cors_origins": args.cors_origins, "reload_secs": args.reload_secs }),
        0,
    );
    let slot = Arc::new(match &args.checkpoint {
        Some(path) => ModelSlot::watching(path),
        None => ModelSlot::empty(),
    });
    let config = ServiceConfig {
        cors_origins: args.cors_origins,
        reload_interval: (args.reload_secs > 0 && args.checkpoint.is_some())
            .then(|| Duration::from_secs(args.reload_secs)),
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        serve(listener, slot, config).await?;
        anyhow::Ok(())
    })
}
