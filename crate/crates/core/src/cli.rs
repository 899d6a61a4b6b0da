//! `dcattn` command line: gradient checks, data generation, training, the
//! ablation matrix and attention-map export.
//!
//! Exit codes: 0 success, 1 numerical or experiment failure, 2 usage or IO
//! error. Settings resolve as flag, then `--config` file (`key=value` lines
//! keyed by long flag name), then default. Every run writes one
//! `manifest.json` next to its outputs.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attention::{channel_mean, encode_pgm, Variant};
use crate::autodiff::{grad_check, DiffGradient, GradOp, GradientReport, Graph};
use crate::data::{generate_dataset, load_dataset, save_dataset, GenConfig};
use crate::error::{Error, Result};
use crate::net::{forward_graph, load_checkpoint, model_init, save_checkpoint, ToyNetConfig};
use crate::train::{ablate, metrics_csv, train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "dcattn", version, about = "Differential convolution attention experiments")]
pub struct Cli {
    /// Plain `key=value` file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic RGB-D dataset file.
    GenData(GenDataArgs),
    /// Train one variant and write metrics and a checkpoint.
    Train(TrainArgs),
    /// Train every variant over several seeds and summarize medians.
    Ablate(AblateArgs),
    /// Export per-stage attention maps of a trained model as PGM and DCAT files.
    DumpAttention(DumpArgs),
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Comma-separated op names; all ops when omitted.
    #[arg(long)]
    pub ops: Option<String>,
    /// Seeds 0..n [default: 5]
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Max relative error [default: 1e-4]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Report directory [default: gradcheck-report]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// [default: synthetic.dcad]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: 625]
    #[arg(long)]
    pub count: Option<usize>,
    /// Scene i uses seed + i [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Probability an even class borrows its neighbor's color [default: 0.5]
    #[arg(long)]
    pub confusion: Option<f64>,
    /// [default: 0.02]
    #[arg(long)]
    pub depth_noise: Option<f64>,
    /// Multiple of 8 [default: 32]
    #[arg(long)]
    pub height: Option<usize>,
    /// Multiple of 8 [default: 32]
    #[arg(long)]
    pub width: Option<usize>,
    /// [default: 5]
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// [default: 3]
    #[arg(long)]
    pub stages: Option<usize>,
    /// Width of stage 0, doubled per stage [default: 16]
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Odd DCA kernel size [default: 9]
    #[arg(long)]
    pub dca_kernel: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    pub squeeze_ratio: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct OptimArgs {
    /// [default: 12]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate of the poly schedule [default: 0.008]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// [default: 1e-4]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    pub poly_power: Option<f64>,
    /// Treat the differential multipliers as constants in backward.
    #[arg(long)]
    pub stop_diff_grad: Option<bool>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// DCAD dataset file
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// baseline, dca_only, edca_only, full or swapped [default: full]
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Model init and shuffle seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: train-out]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// DCAD dataset file
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of seeds; seeds `0..k` are used.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Comma-separated variants; all five when omitted.
    #[arg(long)]
    pub variants: Option<String>,
    /// [default: ablation-out]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset index [default: 0]
    #[arg(long)]
    pub sample: Option<usize>,
    /// [default: attention-out]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    /// Ran fine but a numerical check failed.
    Fail,
}

/// Settings resolved from flags, the config file and defaults, in that order.
struct Settings {
    file: BTreeMap<String, String>,
    used: Vec<String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::config(format!("{}:{}: expected key=value, got {line:?}", path.display(), i + 1))
                })?;
                file.insert(k.trim().replace('_', "-"), v.trim().to_string());
            }
        }
        Ok(Settings {
            file,
            used: Vec::new(),
            resolved: BTreeMap::new(),
        })
    }

    fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.used.push(key.to_string());
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(text)) => text
                .parse()
                .map_err(|e| Error::config(format!("config key {key}={text:?}: {e}")))?,
            (None, None) => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>, default: Option<&str>) -> Result<PathBuf> {
        let text = self.get(
            key,
            flag.map(|p| p.display().to_string()),
            default.unwrap_or_default().to_string(),
        )?;
        if text.is_empty() {
            return Err(Error::config(format!("--{key} is required")));
        }
        Ok(PathBuf::from(text))
    }

    /// Rejects config-file keys the command never asked for.
    fn finish(&self) -> Result<()> {
        match self.file.keys().find(|k| !self.used.contains(k)) {
            Some(k) => Err(Error::config(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a BTreeMap<String, String>,
    seed: Option<u64>,
    artifacts: Vec<String>,
    wall_clock_seconds: f64,
    status: &'a str,
    summary: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    low_confidence: Option<bool>,
}

struct Run {
    command: &'static str,
    started: Instant,
    artifacts: Vec<PathBuf>,
    seed: Option<u64>,
    low_confidence: Option<bool>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Run {
            command,
            started: Instant::now(),
            artifacts: Vec::new(),
            seed: None,
            low_confidence: None,
        }
    }

    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.push(path);
        Ok(())
    }

    fn manifest(&self, path: &Path, settings: &Settings, status: &str, summary: String) -> Result<()> {
        let m = Manifest {
            command: self.command,
            config: &settings.resolved,
            seed: self.seed,
            artifacts: self.artifacts.iter().map(|p| p.display().to_string()).collect(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            status,
            summary,
            low_confidence: self.low_confidence,
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parse_list<T>(text: &str) -> Result<Vec<T>>
where
    T: FromStr<Err = Error>,
{
    text.split(',').map(str::trim).filter(|s| !s.is_empty()).map(T::from_str).collect()
}

fn model_config(s: &mut Settings, m: &ModelArgs, variant: Variant, seed: u64, classes: usize) -> Result<ToyNetConfig> {
    let d = ToyNetConfig::default();
    let cfg = ToyNetConfig {
        stages: s.get("stages", m.stages, d.stages)?,
        base_channels: s.get("base-channels", m.base_channels, d.base_channels)?,
        classes,
        variant,
        dca_kernel: s.get("dca-kernel", m.dca_kernel, d.dca_kernel)?,
        squeeze_ratio: s.get("squeeze-ratio", m.squeeze_ratio, d.squeeze_ratio)?,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(s: &mut Settings, o: &OptimArgs, variant: Variant, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let stop = s.get("stop-diff-grad", o.stop_diff_grad, false)?;
    let cfg = TrainConfig {
        base_lr: s.get("lr", o.lr, d.base_lr)?,
        momentum: s.get("momentum", o.momentum, d.momentum)?,
        weight_decay: s.get("weight-decay", o.weight_decay, d.weight_decay)?,
        poly_power: s.get("poly-power", o.poly_power, d.poly_power)?,
        epochs: s.get("epochs", o.epochs, d.epochs)?,
        batch_size: s.get("batch-size", o.batch_size, d.batch_size)?,
        seed,
        variant,
        diff_gradient: if stop { DiffGradient::Stop } else { DiffGradient::Full },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Classes the model must predict: the generator default or the largest label seen.
fn dataset_classes(samples: &[crate::data::SceneSample]) -> usize {
    let max = samples.iter().flat_map(|s| s.labels.iter()).copied().max().unwrap_or(0);
    (max + 1).max(GenConfig::default().classes)
}

fn cmd_gradcheck(a: &GradcheckArgs, s: &mut Settings) -> Result<Outcome> {
    let ops_text = s.get("ops", a.ops.clone(), "all".to_string())?;
    let ops: Vec<GradOp> = if ops_text == "all" {
        GradOp::ALL.to_vec()
    } else {
        parse_list(&ops_text)?
    };
    if ops.is_empty() {
        return Err(Error::config("--ops names no op"));
    }
    let seeds = s.get("seeds", a.seeds, 5)?;
    let tol = s.get("tol", a.tol, 1e-4)?;
    let out = s.path("out", a.out.clone(), Some("gradcheck-report"))?;
    s.finish()?;
    ensure_dir(&out)?;
    let mut run = Run::new("gradcheck");
    let mut csv = format!("{}\n", GradientReport::CSV_HEADER);
    let (mut passed, mut total) = (0, 0);
    for &op in &ops {
        let mut worst = 0.0f64;
        let mut ok = true;
        for seed in 0..seeds {
            let report = grad_check(op, seed, tol)?;
            csv.push_str(&report.csv_rows());
            worst = worst.max(report.max_rel_err());
            ok &= report.passed();
        }
        total += 1;
        passed += ok as usize;
        println!("{op:<26} max_rel_err {worst:.3e}  {}", if ok { "PASS" } else { "FAIL" });
    }
    run.write(out.join("gradcheck.csv"), csv.as_bytes())?;
    let outcome = if passed == total { Outcome::Pass } else { Outcome::Fail };
    let summary = format!("{passed}/{total} ops within tolerance {tol:e} over {seeds} seeds");
    println!("{summary}");
    run.manifest(&out.join("manifest.json"), s, status(outcome), summary)?;
    Ok(outcome)
}

fn status(o: Outcome) -> &'static str {
    match o {
        Outcome::Pass => "pass",
        Outcome::Fail => "fail",
    }
}

fn cmd_gen_data(a: &GenDataArgs, s: &mut Settings) -> Result<Outcome> {
    let d = GenConfig::default();
    let out = s.path("out", a.out.clone(), Some("synthetic.dcad"))?;
    let count = s.get("count", a.count, 625)?;
    let seed = s.get("seed", a.seed, 0)?;
    let cfg = GenConfig {
        height: s.get("height", a.height, d.height)?,
        width: s.get("width", a.width, d.width)?,
        classes: s.get("classes", a.classes, d.classes)?,
        color_confusion: s.get("confusion", a.confusion, d.color_confusion)?,
        depth_noise: s.get("depth-noise", a.depth_noise, d.depth_noise)?,
        ..d
    };
    s.finish()?;
    if count == 0 {
        return Err(Error::config("--count must be positive"));
    }
    let mut run = Run::new("gen-data");
    run.seed = Some(seed);
    let samples = generate_dataset(&cfg, count, seed)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_dataset(&samples, &out)?;
    run.artifacts.push(out.clone());
    let summary = format!("{count} scenes of {}x{} written", cfg.height, cfg.width);
    println!("{summary} to {}", out.display());
    let mut manifest = out.clone().into_os_string();
    manifest.push(".manifest.json");
    run.manifest(Path::new(&manifest), s, "pass", summary)?;
    Ok(Outcome::Pass)
}

fn cmd_train(a: &TrainArgs, s: &mut Settings) -> Result<Outcome> {
    let data = s.path("data", a.data.clone(), None)?;
    let variant = s.get("variant", a.variant, Variant::Full)?;
    let seed = s.get("seed", a.seed, 0)?;
    let out = s.path("out", a.out.clone(), Some("train-out"))?;
    let samples = load_dataset(&data)?;
    let net_cfg = model_config(s, &a.model, variant, seed, dataset_classes(&samples))?;
    let tc = train_config(s, &a.optim, variant, seed)?;
    s.finish()?;
    ensure_dir(&out)?;
    let mut run = Run::new("train");
    run.seed = Some(seed);
    let manifest = out.join("manifest.json");
    match train(model_init(&net_cfg)?, &samples, &tc) {
        Ok(outcome) => {
            run.write(out.join("metrics.csv"), metrics_csv(&outcome.history, net_cfg.classes).as_bytes())?;
            let ckpt = out.join("checkpoint.dcackpt");
            save_checkpoint(&outcome.net, &ckpt)?;
            run.artifacts.push(ckpt);
            let summary = match outcome.history.last() {
                Some(r) => format!("{variant}: pixel_acc {:.4} miou {:.4} after {} epochs", r.pixel_acc, r.miou, r.epoch),
                None => format!("{variant}: no epochs run"),
            };
            println!("{summary}");
            run.manifest(&manifest, s, "pass", summary)?;
            Ok(Outcome::Pass)
        }
        Err(e @ Error::Diverged { .. }) => {
            run.manifest(&manifest, s, "fail", e.to_string())?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn cmd_ablate(a: &AblateArgs, s: &mut Settings) -> Result<Outcome> {
    let data = s.path("data", a.data.clone(), None)?;
    let k = s.get("seeds", a.seeds, 5)?;
    let variants_text = s.get("variants", a.variants.clone(), "all".to_string())?;
    let out = s.path("out", a.out.clone(), Some("ablation-out"))?;
    let variants: Vec<Variant> = if variants_text == "all" {
        Variant::ALL.to_vec()
    } else {
        parse_list(&variants_text)?
    };
    if k == 0 || variants.is_empty() {
        return Err(Error::config("ablation needs --seeds >= 1 and at least one variant"));
    }
    let samples = load_dataset(&data)?;
    let net_cfg = model_config(s, &a.model, Variant::Full, 0, dataset_classes(&samples))?;
    let tc = train_config(s, &a.optim, Variant::Full, 0)?;
    s.finish()?;
    ensure_dir(&out)?;
    let mut run = Run::new("ablate");
    run.low_confidence = Some(k == 1);
    let seeds: Vec<u64> = (0..k).collect();
    let manifest = out.join("manifest.json");
    let summary = match ablate(&samples, &net_cfg, &tc, &variants, &seeds) {
        Ok(summary) => summary,
        Err(e @ Error::Diverged { .. }) => {
            run.manifest(&manifest, s, "fail", e.to_string())?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let csv = summary.to_csv();
    print!("{csv}");
    run.write(out.join("summary.csv"), csv.as_bytes())?;
    let mut notes = Vec::new();
    let m = |v| summary.median_miou(v);
    use Variant::*;
    for (hi, lo) in [(Full, DcaOnly), (DcaOnly, Baseline), (Full, EdcaOnly), (EdcaOnly, Baseline), (Full, Swapped)] {
        if let (Some(a), Some(b)) = (m(hi), m(lo)) {
            notes.push(format!("{hi}>{lo}:{}", a > b));
        }
    }
    if k == 1 {
        notes.push("low confidence: single seed".into());
    }
    run.manifest(&manifest, s, "pass", notes.join(" "))?;
    Ok(Outcome::Pass)
}

fn cmd_dump_attention(a: &DumpArgs, s: &mut Settings) -> Result<Outcome> {
    let ckpt = s.path("checkpoint", a.checkpoint.clone(), None)?;
    let data = s.path("data", a.data.clone(), None)?;
    let index = s.get("sample", a.sample, 0)?;
    let out = s.path("out", a.out.clone(), Some("attention-out"))?;
    s.finish()?;
    let net = load_checkpoint::<f32>(&ckpt)?;
    let samples = load_dataset(&data)?;
    let sample = samples.get(index).ok_or_else(|| {
        Error::Contract(format!("sample {index} out of range for {} samples", samples.len()))
    })?;
    ensure_dir(&out)?;
    let mut run = Run::new("dump-attention");
    run.seed = Some(net.config.seed);
    let mut g = Graph::new();
    let rgb = g.leaf(sample.rgb.clone());
    let depth = g.leaf(sample.depth.clone());
    let w = net.params.bind(&mut g);
    let fwd = forward_graph(&mut g, rgb, depth, &w, &net.config)?;
    let mut maps = 0;
    for (stage, nodes) in fwd.stages.iter().enumerate() {
        for (branch, node) in [("depth", nodes.depth_attention), ("rgb", nodes.rgb_attention)] {
            let Some(node) = node else { continue };
            let t = g.value(node);
            let sh = t.shape();
            let base = out.join(format!("stage{stage}_{branch}_attention"));
            run.write(base.with_extension("pgm"), &encode_pgm(&channel_mean(t, 0)?, sh.h, sh.w)?)?;
            run.write(base.with_extension("dcat"), &t.to_bytes())?;
            maps += 1;
        }
    }
    let summary = format!("{maps} attention maps for sample {index} ({})", net.config.variant);
    println!("{summary}");
    run.manifest(&out.join("manifest.json"), s, "pass", summary)?;
    Ok(Outcome::Pass)
}

/// Exit code for an error: 1 for numerical failures, 2 for usage and IO.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } | Error::NonFinite(_) | Error::Generation(_) => 1,
        Error::Shape(_) | Error::Config(_) | Error::Contract(_) | Error::Format(_) | Error::Io { .. } => 2,
    }
}

/// Runs a parsed command.
pub fn execute(cli: &Cli) -> Result<Outcome> {
    let mut s = Settings::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut s),
        Command::GenData(a) => cmd_gen_data(a, &mut s),
        Command::Train(a) => cmd_train(a, &mut s),
        Command::Ablate(a) => cmd_ablate(a, &mut s),
        Command::DumpAttention(a) => cmd_dump_attention(a, &mut s),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(Outcome::Pass) => 0,
        Ok(Outcome::Fail) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
