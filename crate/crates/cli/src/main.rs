use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use orientsteer_core::camera_geometry::{adjust_intrinsics, orientation_maps, write_map_files, CropRect};
use orientsteer_core::config::KvConfig;
use orientsteer_core::data_pipeline::{load_manifest, split_dataset, window_sequences, Drive, FrameStore};
use orientsteer_core::evaluation::{
    evaluate, export_histogram, export_trace, plot_trace, read_trace, run_fusion_ablation, run_input_comparison,
    run_loss_comparison, write_histogram, ComparisonRow, ComparisonTable, EvalReport,
};
use orientsteer_core::losses::{LossConfig, LossFamily};
use orientsteer_core::synthetic_track::{generate_dataset, steering_histogram, TrackParams};
use orientsteer_core::training::{ensure_compatible, load_checkpoint_with_meta, train, PreparedData, TrainConfig};
use orientsteer_core::{Error, Intrinsics, Result};

const SEED_ENV: &str = "ORIENTSTEER_SEED";
const LOCK_FILE: &str = "run.lock";

#[derive(Parser, Debug)]
#[command(name = "orientsteer", version, about = "Steering-angle regression with pixel-wise orientation maps")]
struct Cli {
    /// Threads for loading and evaluation (training order never depends on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write horizontal/vertical orientation maps for a camera.
    GenMaps(GenMapsArgs),
    /// Synthesize or analyze datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train one model from a configuration file.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Run a comparison experiment.
    Ablate(AblateArgs),
    /// Render a trace file as a line plot.
    PlotTrace(PlotTraceArgs),
    /// Re-execute a run from its run.lock.
    Rerun { lock: PathBuf },
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Render synthetic drives, a manifest and a dataset.conf.
    Synth(SynthArgs),
    /// Label statistics and histogram of a manifest.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct GenMapsArgs {
    #[arg(long)]
    intrinsics: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `left,top,width,height` applied before resizing.
    #[arg(long)]
    crop: Option<String>,
    /// Target `WIDTHxHEIGHT`; maps are recomputed from the adjusted intrinsics.
    #[arg(long)]
    size: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    drives: usize,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Falls back to ORIENTSTEER_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tail_alpha: Option<f64>,
    #[arg(long)]
    max_angle: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    turn_scale: Option<f64>,
    #[arg(long, default_value_t = 320)]
    width: usize,
    #[arg(long, default_value_t = 180)]
    height: usize,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 41)]
    bins: usize,
    /// Defaults to `<manifest dir>/analysis`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum EvalSplit {
    All,
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    tol_deg: f64,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the crop stored with the checkpoint.
    #[arg(long)]
    crop: Option<String>,
    /// Model settings the checkpoint must match.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Drives to score, using the split stored with the checkpoint.
    #[arg(long, value_enum, default_value_t = EvalSplit::All)]
    split: EvalSplit,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum AblateMode {
    Loss,
    Input,
    Fusion,
}

impl AblateMode {
    fn as_str(self) -> &'static str {
        match self {
            AblateMode::Loss => "loss",
            AblateMode::Input => "input",
            AblateMode::Fusion => "fusion",
        }
    }
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_enum)]
    mode: AblateMode,
    #[command(flatten)]
    config: ConfigArgs,
    /// Loss families for `--mode loss`, comma separated.
    #[arg(long, default_value = "MAE,MSE,STEERING_LOSS,STEERING_LOSS2")]
    families: String,
}

#[derive(Args, Debug)]
struct PlotTraceArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Defaults to the trace path with a `.png` extension.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    dispatch(&argv)
}

fn dispatch(argv: &[String]) -> ExitCode {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    match cli.command {
        Command::GenMaps(a) => gen_maps(a),
        Command::Dataset(DatasetCommand::Synth(a)) => synth(a, workers),
        Command::Dataset(DatasetCommand::Analyze(a)) => analyze(a),
        Command::Train(a) => train_cmd(a, workers),
        Command::Eval(a) => eval_cmd(a, workers),
        Command::Ablate(a) => ablate(a, workers),
        Command::PlotTrace(a) => plot(a),
        Command::Rerun { lock } => rerun(&lock),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let (w, h) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::InvalidArgument(format!("size {text:?} is not WIDTHxHEIGHT")))?;
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("size {text:?} is not WIDTHxHEIGHT")))
    };
    Ok((num(w)?, num(h)?))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// `run.lock`: a configuration-format file holding the command, its
/// canonical arguments and the fully resolved settings.
fn write_lock(dir: &Path, command: &str, args: &[(&str, String)], resolved: Option<&KvConfig>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut kv = resolved.cloned().unwrap_or_default();
    kv.set("lock.tool", "orientsteer");
    kv.set("lock.version", env!("CARGO_PKG_VERSION"));
    kv.set("lock.command", command);
    for (k, v) in args {
        kv.set(format!("args.{k}"), v);
    }
    let path = dir.join(LOCK_FILE);
    std::fs::write(&path, kv.to_text()).map_err(|e| Error::io(&path, e))
}

fn gen_maps(a: GenMapsArgs) -> Result<()> {
    let k = Intrinsics::load(&a.intrinsics)?;
    let crop = match &a.crop {
        Some(c) => CropRect::parse(c)?,
        None => k.full_frame(),
    };
    crop.check_inside(k.width, k.height)?;
    let (w, h) = match &a.size {
        Some(s) => parse_size(s)?,
        None => (crop.width, crop.height),
    };
    let scale = (w as f64 / crop.width as f64, h as f64 / crop.height as f64);
    let adjusted = adjust_intrinsics(&k, &crop, scale)?;
    let adjusted = Intrinsics { width: w, height: h, ..adjusted };
    let maps = orientation_maps(&adjusted)?;
    write_map_files(&maps, &a.out)?;
    adjusted.write(&a.out.join("intrinsics.txt"))?;
    let range = |d: &[f64]| d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (hlo, hhi) = range(&maps.horizontal.data);
    let (vlo, vhi) = range(&maps.vertical.data);
    println!("maps {}x{} (rows x cols) written to {}", maps.rows(), maps.cols(), a.out.display());
    println!("horizontal angle range [{hlo:.6}, {hhi:.6}] rad");
    println!("vertical angle range [{vlo:.6}, {vhi:.6}] rad");
    let mut args = vec![
        ("intrinsics", absolute(&a.intrinsics).display().to_string()),
        ("out", absolute(&a.out).display().to_string()),
        ("crop", crop.to_string()),
    ];
    args.push(("size", format!("{w}x{h}")));
    write_lock(&a.out, "gen-maps", &args, None)
}

fn synth(a: SynthArgs, workers: Option<usize>) -> Result<()> {
    let d = TrackParams::default();
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let p = TrackParams {
        tail_alpha: a.tail_alpha.unwrap_or(d.tail_alpha),
        max_angle: a.max_angle.unwrap_or(d.max_angle),
        frames_per_drive: a.frames,
        image_size: (a.height, a.width),
        noise_std: a.noise_std.unwrap_or(d.noise_std),
        seed,
        turn_scale: a.turn_scale.unwrap_or(d.turn_scale),
    };
    p.validate(1)?;
    let drives = generate_dataset(&p, a.drives, &a.out, workers.unwrap_or(1))?;
    let mut recipe = KvConfig::new();
    recipe.set("data.manifest", "manifest.txt");
    recipe.set("data.crop", p.default_crop());
    recipe.set("synth.drives", a.drives);
    recipe.set("synth.frames", p.frames_per_drive);
    recipe.set("synth.seed", p.seed);
    recipe.set("synth.tail_alpha", format!("{:?}", p.tail_alpha));
    recipe.set("synth.max_angle", format!("{:?}", p.max_angle));
    recipe.set("synth.noise_std", format!("{:?}", p.noise_std));
    recipe.set("synth.turn_scale", format!("{:?}", p.turn_scale));
    recipe.set("synth.width", a.width);
    recipe.set("synth.height", a.height);
    let conf = a.out.join("dataset.conf");
    std::fs::write(&conf, recipe.to_text()).map_err(|e| Error::io(&conf, e))?;
    let frames: usize = drives.iter().map(|d| d.records.len()).sum();
    println!("wrote {} drives, {frames} frames to {}", drives.len(), a.out.display());
    println!("manifest: {}", a.out.join("manifest.txt").display());
    println!("training recipe: {} (data.crop={})", conf.display(), p.default_crop());
    let args = vec![
        ("out", absolute(&a.out).display().to_string()),
        ("drives", a.drives.to_string()),
        ("frames", p.frames_per_drive.to_string()),
        ("seed", p.seed.to_string()),
        ("tail-alpha", format!("{:?}", p.tail_alpha)),
        ("max-angle", format!("{:?}", p.max_angle)),
        ("noise-std", format!("{:?}", p.noise_std)),
        ("turn-scale", format!("{:?}", p.turn_scale)),
        ("width", a.width.to_string()),
        ("height", a.height.to_string()),
    ];
    write_lock(&a.out, "dataset synth", &args, None)
}

/// Count, extrema, mean and population SD.
fn label_stats(labels: &[f64]) -> (usize, f64, f64, f64, f64) {
    let n = labels.len();
    let min = labels.iter().copied().fold(f64::INFINITY, f64::min);
    let max = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = labels.iter().sum::<f64>() / n as f64;
    let sd = (labels.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n as f64).sqrt();
    (n, min, max, mean, sd)
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let drives = load_manifest(&a.manifest)?;
    let labels: Vec<f64> = drives.iter().flat_map(Drive::labels).collect();
    if labels.is_empty() {
        return Err(Error::Validation(format!("{} has no records", a.manifest.display())));
    }
    let (n, min, max, mean, sd) = label_stats(&labels);
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.manifest.parent().unwrap_or(Path::new(".")).join("analysis"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let hist = steering_histogram(&labels, a.bins, None)?;
    write_histogram(&hist, &out.join("histogram.csv"))?;
    println!("drives={}", drives.len());
    println!("count={n}");
    println!("min={min:?}");
    println!("max={max:?}");
    println!("mean={mean:?}");
    println!("sd={sd:?}");
    println!("histogram: {}", out.join("histogram.csv").display());
    let args = vec![
        ("manifest", absolute(&a.manifest).display().to_string()),
        ("bins", a.bins.to_string()),
        ("out", absolute(&out).display().to_string()),
    ];
    write_lock(&out, "dataset analyze", &args, None)
}

/// Resolved configuration with the origin of every key.
struct Resolved {
    cfg: TrainConfig,
    kv: KvConfig,
    sources: BTreeMap<String, &'static str>,
}

const PATH_KEYS: [&str; 2] = ["data.manifest", "train.output_dir"];

fn resolve(a: &ConfigArgs, workers: Option<usize>) -> Result<Resolved> {
    let mut merged = KvConfig::new();
    let mut sources: BTreeMap<String, &'static str> = BTreeMap::new();
    if let Some(path) = &a.config {
        let file = KvConfig::load(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for (k, v) in file.iter() {
            let v = if PATH_KEYS.contains(&k) && !v.is_empty() && Path::new(v).is_relative() {
                base.join(v).display().to_string()
            } else {
                v.to_string()
            };
            merged.set(k, v);
            sources.insert(k.to_string(), "file");
        }
    }
    if !merged.contains("train.seed") && a.seed.is_none() {
        if let Some(s) = env_seed()? {
            merged.set("train.seed", s);
            sources.insert("train.seed".into(), "env");
        }
    }
    let mut flags: Vec<(String, String)> = Vec::new();
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {s:?}")))?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = a.seed {
        flags.push(("train.seed".into(), s.to_string()));
    }
    if let Some(n) = a.max_steps {
        flags.push(("train.max_steps".into(), n.to_string()));
    }
    if let Some(m) = &a.manifest {
        flags.push(("data.manifest".into(), m.display().to_string()));
    }
    if let Some(o) = &a.out {
        flags.push(("train.output_dir".into(), o.display().to_string()));
    }
    if let Some(w) = workers {
        flags.push(("train.workers".into(), w.to_string()));
    }
    for (k, v) in flags {
        sources.insert(k.clone(), "flag");
        merged.set(k, v);
    }
    let mut cfg = TrainConfig::from_kv(&merged)?;
    cfg.data.manifest = cfg.data.manifest.as_deref().map(absolute);
    cfg.output_dir = cfg.output_dir.as_deref().map(absolute);
    let kv = cfg.to_kv();
    for (k, _) in kv.iter() {
        sources.entry(k.to_string()).or_insert("default");
    }
    if merged.contains("model.seq_len") || merged.contains("data.seq_len") {
        let src = sources.get("model.seq_len").or(sources.get("data.seq_len")).copied().unwrap_or("default");
        sources.insert("model.seq_len".into(), src);
        sources.insert("data.seq_len".into(), src);
    }
    Ok(Resolved { cfg, kv, sources })
}

fn print_resolved(r: &Resolved) {
    println!("configuration (precedence: flags > file > {SEED_ENV} > defaults):");
    for (k, v) in r.kv.iter() {
        println!("  {k} = {v}  [{}]", r.sources.get(k).copied().unwrap_or("default"));
    }
}

fn require_output(cfg: &TrainConfig) -> Result<PathBuf> {
    cfg.output_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set train.output_dir".into()))
}

fn train_cmd(a: TrainArgs, workers: Option<usize>) -> Result<()> {
    let r = resolve(&a.config, workers)?;
    print_resolved(&r);
    let out = require_output(&r.cfg)?;
    write_lock(&out, "train", &[], Some(&r.kv))?;
    let data = PreparedData::load(&r.cfg)?;
    println!(
        "split {}: {} train / {} val / {} test windows",
        data.fingerprint,
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    let outcome = train::<f32>(&r.cfg, &data.store, &data.train, &data.val)?;
    let last = outcome.history.steps.last().expect("at least one step");
    println!("steps={} final_train_loss={:.6}", outcome.steps_run(), last.loss);
    if let Some(e) = outcome.history.evals.last() {
        println!("final val: loss={:.6} accuracy={:.4} sd={:.6}", e.loss, e.accuracy, e.sd);
    }
    println!("best checkpoint: step {} -> {}", outcome.best_step, out.join("best.ckpt").display());
    if !data.test.is_empty() {
        let report = evaluate(&outcome.best, &data.store, &data.test, 5.0, r.cfg.workers)?;
        println!("test (best checkpoint): {}", report.summary());
    }
    Ok(())
}

fn report_files(report: &EvalReport, label: &str, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    export_trace(report, &out.join("trace.csv"))?;
    export_histogram(report, &out.join("histogram.csv"))?;
    let table = ComparisonTable {
        title: format!("evaluation at {} deg tolerance", report.tolerance_deg),
        rows: vec![ComparisonRow {
            label: label.to_string(),
            config: TrainConfig::default(),
            report: report.clone(),
            fingerprint: "-".into(),
            map_size: None,
            best_step: 0,
        }],
    };
    table.write(out)
}

fn eval_cmd(a: EvalArgs, workers: Option<usize>) -> Result<()> {
    let ckpt = load_checkpoint_with_meta::<f32>(&a.checkpoint)?;
    let model_cfg = *ckpt.model.config();
    if let Some(path) = &a.config {
        let expected = TrainConfig::from_kv(&KvConfig::load(path)?)?;
        ensure_compatible(&model_cfg, &expected.model)?;
    }
    let crop = match (&a.crop, ckpt.meta.get("data.crop")) {
        (Some(c), _) => Some(CropRect::parse(c)?),
        (None, Some(c)) if !c.is_empty() => Some(CropRect::parse(c)?),
        _ => None,
    };
    let drives = load_manifest(&a.manifest)?;
    let selected: Vec<Drive> = if a.split == EvalSplit::All {
        drives
    } else {
        let ratios = match ckpt.meta.get("data.split") {
            Some(s) => orientsteer_core::data_pipeline::parse_ratios(s)?,
            None => TrainConfig::default().data.split,
        };
        let seed = ckpt.meta.parsed::<u64>("data.seed")?.unwrap_or(0);
        let split = split_dataset(&drives, &ratios, seed)?;
        let part = match a.split {
            EvalSplit::Train => &split.train,
            EvalSplit::Val => &split.val,
            _ => &split.test,
        };
        part.iter().map(|&i| drives[i].clone()).collect()
    };
    let workers = workers.unwrap_or(1);
    let store = FrameStore::load(&selected, crop.as_ref(), workers)?;
    let stride = ckpt.meta.parsed::<usize>("data.stride")?.unwrap_or(1);
    let windows = window_sequences(&store.drives, model_cfg.seq_len, stride)?;
    let report = evaluate(&ckpt.model, &store, &windows, a.tol_deg, workers)?;
    report_files(&report, &a.checkpoint.display().to_string(), &a.out)?;
    println!("{}", report.summary());
    println!("report: {}", a.out.join("report.txt").display());
    let mut args = vec![
        ("checkpoint", absolute(&a.checkpoint).display().to_string()),
        ("manifest", absolute(&a.manifest).display().to_string()),
        ("tol-deg", format!("{:?}", a.tol_deg)),
        ("out", absolute(&a.out).display().to_string()),
        ("split", format!("{:?}", a.split).to_lowercase()),
    ];
    if let Some(c) = &a.crop {
        args.push(("crop", c.clone()));
    }
    if let Some(c) = &a.config {
        args.push(("config", absolute(c).display().to_string()));
    }
    write_lock(&a.out, "eval", &args, None)
}

fn ablate(a: AblateArgs, workers: Option<usize>) -> Result<()> {
    let r = resolve(&a.config, workers)?;
    print_resolved(&r);
    let out = require_output(&r.cfg)?;
    let args = vec![("mode", a.mode.as_str().to_string()), ("families", a.families.clone())];
    write_lock(&out, "ablate", &args, Some(&r.kv))?;
    let data = PreparedData::load(&r.cfg)?;
    println!("split {}: {} train / {} val / {} test windows", data.fingerprint, data.train.len(), data.val.len(), data.test.len());
    let table = match a.mode {
        AblateMode::Loss => {
            let base = r.cfg.loss;
            let families = a
                .families
                .split(',')
                .map(|f| {
                    let family: LossFamily = f.parse()?;
                    let delta = (family == LossFamily::SteeringLoss).then_some(base.delta.unwrap_or(1.0));
                    LossConfig::new(family, base.alpha, base.gamma, delta)
                })
                .collect::<Result<Vec<_>>>()?;
            run_loss_comparison(&r.cfg, &families, &data)?
        }
        AblateMode::Input => run_input_comparison(&r.cfg, &data)?,
        AblateMode::Fusion => run_fusion_ablation(&r.cfg, &data)?,
    };
    table.write(&out)?;
    print!("{}", table.to_text());
    Ok(())
}

fn plot(a: PlotTraceArgs) -> Result<()> {
    let trace = read_trace(&a.trace)?;
    let out = a.out.clone().unwrap_or_else(|| a.trace.with_extension("png"));
    plot_trace(&trace, &out)?;
    println!("{} points plotted to {}", trace.len(), out.display());
    Ok(())
}

/// Rebuilds the command line recorded in a lock file and runs it again.
fn rerun(lock: &Path) -> Result<()> {
    let kv = KvConfig::load(lock)?;
    let command = kv
        .get("lock.command")
        .ok_or_else(|| Error::Config(format!("{} has no lock.command", lock.display())))?
        .to_string();
    let arg = |k: &str| kv.get(&format!("args.{k}")).map(str::to_string);
    let mut argv: Vec<String> = vec!["orientsteer".into()];
    argv.extend(command.split(' ').map(str::to_string));
    match command.as_str() {
        "train" | "ablate" => {
            // the lock already holds the fully resolved configuration
            argv.push("--config".into());
            argv.push(absolute(lock).display().to_string());
            if command == "ablate" {
                for k in ["mode", "families"] {
                    if let Some(v) = arg(k) {
                        argv.push(format!("--{k}"));
                        argv.push(v);
                    }
                }
            }
        }
        _ => {
            for (k, v) in kv.iter() {
                if let Some(name) = k.strip_prefix("args.") {
                    argv.push(format!("--{name}"));
                    argv.push(v.to_string());
                }
            }
        }
    }
    println!("rerun: {}", argv[1..].join(" "));
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Config(format!("lock does not replay: {e}")))?;
    run(cli)
}
