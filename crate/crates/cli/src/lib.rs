//! Command implementations behind the `vstgan` binary.
//!
//! Every command resolves its configuration (defaults, then the config
//! file, then flags), logs it as the first JSON line, and only then starts
//! work. Logs go to stdout unless `--quiet`; commands that produce a loss
//! history also write it next to their outputs.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use vstgan::encoders::EncoderSpec;
use vstgan::evolvesync::{aesl_orders, AeslRow, AESL_ORDERS};
use vstgan::generator::{stylize, train_gan_with, GeneratorParams};
use vstgan::mdan::{synthesize_real_samples_with, RealSampleSet};
use vstgan::verify::{run_target, Target};
use vstgan::video::{
    load_checkpoint, load_frames, load_image, load_indexed_frames, make_fixture, save_checkpoint, save_frames,
    save_indexed_frames, Checkpoint, FixtureKind, DEFAULT_FIXTURE_NOISE,
};
use vstgan::TrainConfig;

/// Checkpoint prefix of the generator parameters.
pub const GENERATOR_PREFIX: &str = "g";
/// Checkpoint prefix of the frozen encoder weights.
pub const ENCODER_PREFIX: &str = "enc";
pub const CHECKPOINT_FILE: &str = "checkpoint.vstg";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "vstgan", version, about = "Video style transfer with an evolve-sync temporal loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file (`[section]` headers, `key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; overrides `[run] seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or file, for commands that write one).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress JSON-lines logging on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Override one config value, e.g. `--set synth.iterations=300`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize real samples for the even frames of a video.
    GenReal {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the generator against synthesized real samples.
    Train {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        style: PathBuf,
        /// Not supported; training always starts from scratch.
        #[arg(long, hide = true)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a trained generator over a video.
    Stylize {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compute AESL of a synthesized video against its source.
    Aesl {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = AESL_ORDERS.to_vec())]
        orders: Vec<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Value of the `method_label` column.
        #[arg(long, default_value = "vst-gan")]
        label: String,
        #[command(flatten)]
        common: Common,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        target: Target,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic test video.
    MakeFixture {
        #[arg(long)]
        kind: FixtureKind,
        #[arg(long, default_value_t = 12)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Noise level for `static-plus-noise`.
        #[arg(long, default_value_t = DEFAULT_FIXTURE_NOISE)]
        noise: f32,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenReal { .. } => "gen-real",
            Command::Train { .. } => "train",
            Command::Stylize { .. } => "stylize",
            Command::Aesl { .. } => "aesl",
            Command::Gradcheck { .. } => "gradcheck",
            Command::MakeFixture { .. } => "make-fixture",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenReal { common, .. }
            | Command::Train { common, .. }
            | Command::Stylize { common, .. }
            | Command::Aesl { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::MakeFixture { common, .. } => common,
        }
    }
}

/// JSON-lines sink: stdout unless quiet, plus an optional history file.
pub struct Log {
    quiet: bool,
    file: Option<BufWriter<File>>,
}

impl Log {
    pub fn new(quiet: bool) -> Self {
        Log { quiet, file: None }
    }

    pub fn tee_to(&mut self, path: &Path) -> Result<()> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        self.file = Some(BufWriter::new(f));
        Ok(())
    }

    pub fn emit(&mut self, v: Value) -> Result<()> {
        let line = v.to_string();
        if !self.quiet {
            let mut out = io::stdout().lock();
            match writeln!(out, "{line}") {
                // A closed reader (e.g. `| head`) only ends console logging.
                Err(e) if e.kind() == io::ErrorKind::BrokenPipe => self.quiet = true,
                r => r?,
            }
        }
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    pub fn finish(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

/// Defaults, then the config file, then `--set` overrides, then `--seed`.
pub fn resolve_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    for o in &common.overrides {
        let (key, value) = o.split_once('=').ok_or_else(|| anyhow!("--set expects SECTION.KEY=VALUE, got `{o}`"))?;
        let (section, key) =
            key.trim().split_once('.').ok_or_else(|| anyhow!("--set expects SECTION.KEY=VALUE, got `{o}`"))?;
        cfg.set(section, key, value.trim()).with_context(|| format!("--set {o}"))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, command: &str) -> Result<PathBuf> {
    let dir = common.out.clone().ok_or_else(|| anyhow!("{command}: --out is required"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// What a finished command reports back to `main`.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Done,
    /// Gradient check ran to completion but at least one check failed.
    ChecksFailed(String),
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let command = cli.command;
    let name = command.name();
    let common = command.common().clone();
    let cfg = resolve_config(&common).with_context(|| format!("{name}: configuration"))?;
    let mut log = Log::new(common.quiet);
    log.emit(json!({ "event": "config", "command": name, "config": cfg, "config_text": cfg.to_config_string() }))?;
    let outcome = match command {
        Command::GenReal { video, style, .. } => gen_real(&video, &style, &cfg, &common, &mut log).map(|_| Outcome::Done),
        Command::Train { video, real, style, resume, .. } => {
            if resume.is_some() {
                bail!("train: resuming a previous run is not supported; training always starts from scratch");
            }
            train(&video, &real, &style, &cfg, &common, &mut log).map(|_| Outcome::Done)
        }
        Command::Stylize { video, checkpoint, .. } => {
            stylize_cmd(&video, &checkpoint, &common, &mut log).map(|_| Outcome::Done)
        }
        Command::Aesl { video, synth, orders, csv, label, .. } => {
            aesl_cmd(&video, &synth, &orders, csv.as_deref(), &label, &cfg, &mut log).map(|_| Outcome::Done)
        }
        Command::Gradcheck { target, .. } => gradcheck(target, cfg.seed, &mut log),
        Command::MakeFixture { kind, frames, size, noise, .. } => {
            make_fixture_cmd(kind, cfg.seed, frames, size, noise, &common, &mut log).map(|_| Outcome::Done)
        }
    };
    log.finish()?;
    outcome.with_context(|| format!("{name} failed"))
}

pub fn gen_real(video: &Path, style: &Path, cfg: &TrainConfig, common: &Common, log: &mut Log) -> Result<RealSampleSet> {
    let x = load_frames(video).with_context(|| format!("loading video {}", video.display()))?;
    let style = load_image(style).with_context(|| format!("loading style image {}", style.display()))?;
    let dir = out_dir(common, "gen-real")?;
    log.tee_to(&dir.join(LOG_FILE))?;
    let spec = EncoderSpec::build(cfg.encoder_seed);

    let mut sink_err = None;
    let out = synthesize_real_samples_with(&x, &style, &spec, cfg, |r| {
        if sink_err.is_none() {
            let mut v = serde_json::to_value(r).unwrap_or(Value::Null);
            v["event"] = json!("gen-real");
            sink_err = log.emit(v).err();
        }
    })
    .context("mdan: real-sample synthesis")?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    for s in out.real.stats() {
        log.emit(json!({ "event": "segment", "stats": s }))?;
    }
    let (a, b) = (out.real.initial_objective(), out.real.final_objective());
    log.emit(json!({ "event": "gen-real-summary", "initial": a, "final": b, "frames": out.real.indices() }))?;
    save_indexed_frames(out.real.frames().iter().map(|(i, f)| (*i, f)), &dir)?;
    Ok(out.real)
}

/// Reads real samples written by `gen-real` and checks them against `x`.
pub fn load_real_samples(dir: &Path, x: &vstgan::video::VideoSequence) -> Result<RealSampleSet> {
    let frames = load_indexed_frames(dir).with_context(|| format!("loading real samples {}", dir.display()))?;
    let real = RealSampleSet::new(frames, Vec::new()).context("real samples do not line up with the even frames")?;
    real.check_aligned(x).context("real samples do not line up with the even frames")?;
    Ok(real)
}

pub fn train(
    video: &Path,
    real: &Path,
    style: &Path,
    cfg: &TrainConfig,
    common: &Common,
    log: &mut Log,
) -> Result<Checkpoint> {
    let x = load_frames(video).with_context(|| format!("loading video {}", video.display()))?;
    let real = load_real_samples(real, &x)?;
    let style = load_image(style).with_context(|| format!("loading style image {}", style.display()))?;
    let dir = out_dir(common, "train")?;
    log.tee_to(&dir.join(LOG_FILE))?;
    let spec = EncoderSpec::build(cfg.encoder_seed);

    let mut sink_err = None;
    let run = train_gan_with(&x, &real, &style, &spec, cfg, |r| {
        if sink_err.is_none() {
            let mut v = serde_json::to_value(r).unwrap_or(Value::Null);
            v["event"] = json!("train");
            sink_err = log.emit(v).err();
        }
    });
    if let Some(e) = sink_err {
        return Err(e);
    }
    let run = run.map_err(|abort| anyhow!("generator: {abort}"))?;
    let ck = generator_checkpoint(&run.generator, &spec, cfg);
    let path = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ck, &path)?;
    log.emit(json!({ "event": "checkpoint", "path": path, "iterations": run.history.len() }))?;
    Ok(ck)
}

/// Generator weights, the encoder they were trained against, and the config echo.
pub fn generator_checkpoint(gp: &GeneratorParams<f32>, spec: &EncoderSpec, cfg: &TrainConfig) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.seed, cfg.to_config_string());
    ck.insert_params(GENERATOR_PREFIX, gp.params());
    ck.insert_params(ENCODER_PREFIX, &spec.params());
    ck
}

pub fn generator_from_checkpoint(ck: &Checkpoint) -> Result<(GeneratorParams<f32>, EncoderSpec)> {
    let cfg = TrainConfig::parse(&ck.config).context("checkpoint config echo")?;
    let gp = GeneratorParams::from_params(ck.params(GENERATOR_PREFIX)).context("checkpoint generator weights")?;
    let spec =
        EncoderSpec::from_params(cfg.encoder_seed, &ck.params(ENCODER_PREFIX)).context("checkpoint encoder weights")?;
    Ok((gp, spec))
}

pub fn stylize_cmd(video: &Path, checkpoint: &Path, common: &Common, log: &mut Log) -> Result<()> {
    let x = load_frames(video).with_context(|| format!("loading video {}", video.display()))?;
    let ck = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let (gp, spec) = generator_from_checkpoint(&ck)?;
    let y = stylize(&x, &gp, &spec).context("generator: forward pass")?;
    let dir = out_dir(common, "stylize")?;
    save_frames(&y, &dir)?;
    log.emit(json!({ "event": "stylize", "frames": y.len(), "out": dir }))?;
    Ok(())
}

pub fn aesl_cmd(
    video: &Path,
    synth: &Path,
    orders: &[usize],
    csv: Option<&Path>,
    label: &str,
    cfg: &TrainConfig,
    log: &mut Log,
) -> Result<Vec<AeslRow>> {
    let x = load_frames(video).with_context(|| format!("loading video {}", video.display()))?;
    let y = load_frames(synth).with_context(|| format!("loading synthesized video {}", synth.display()))?;
    let spec = EncoderSpec::build(cfg.encoder_seed);
    let values = aesl_orders(&x, &y, orders, &cfg.weights, &spec, &cfg.kernel).context("evolvesync: aesl")?;
    let rows: Vec<AeslRow> = orders
        .iter()
        .zip(values)
        .map(|(&order, value)| AeslRow { video_id: x.id.clone(), method_label: label.to_string(), order, value })
        .collect();
    for r in &rows {
        log.emit(json!({ "event": "aesl", "video_id": r.video_id, "method_label": r.method_label, "order": r.order, "value": r.value }))?;
    }
    if let Some(path) = csv {
        let mut text = format!("{}\n", AeslRow::CSV_HEADER);
        for r in &rows {
            text.push_str(&r.to_csv());
            text.push('\n');
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(rows)
}

pub fn gradcheck(target: Target, seed: u64, log: &mut Log) -> Result<Outcome> {
    let report = run_target(target, seed).with_context(|| format!("gradcheck {target}"))?;
    for c in &report.checks {
        let r = &c.report;
        log.emit(json!({
            "event": "gradcheck",
            "target": target.name(),
            "check": c.name,
            "max_rel_err": r.max_rel_err,
            "tolerance": report.tolerance,
            "pass": r.passes(report.tolerance),
            "coords": r.coords_checked,
            "reduced_steps": r.reduced_steps,
            "skipped": r.skipped,
            "worst": r.worst.as_ref().map(|w| json!({
                "input": w.input, "index": w.index, "analytic": w.analytic, "numeric": w.numeric, "rel_err": w.rel_err
            })),
        }))?;
    }
    let worst = report.worst();
    log.emit(json!({
        "event": "gradcheck-summary",
        "target": target.name(),
        "pass": report.passes(),
        "worst_check": worst.map(|w| w.name.clone()),
        "max_rel_err": worst.map(|w| w.report.max_rel_err),
    }))?;
    if report.passes() {
        Ok(Outcome::Done)
    } else {
        let failing: Vec<String> = report
            .checks
            .iter()
            .filter(|c| !c.report.passes(report.tolerance))
            .map(|c| format!("{} ({:.3e})", c.name, c.report.max_rel_err))
            .collect();
        Ok(Outcome::ChecksFailed(format!(
            "gradcheck {target}: {} above tolerance {:e}",
            failing.join(", "),
            report.tolerance
        )))
    }
}

pub fn make_fixture_cmd(
    kind: FixtureKind,
    seed: u64,
    frames: usize,
    size: usize,
    noise: f32,
    common: &Common,
    log: &mut Log,
) -> Result<()> {
    let v = make_fixture(kind, seed, frames, size, noise).context("video-io: make_fixture")?;
    let dir = out_dir(common, "make-fixture")?;
    save_frames(&v, &dir)?;
    log.emit(json!({ "event": "make-fixture", "kind": kind.name(), "frames": v.len(), "size": size, "out": dir }))?;
    Ok(())
}
