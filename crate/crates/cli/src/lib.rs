//! Command-line front end: dataset synthesis, training, evaluation,
//! single-image prediction, gradient checks and latency measurement.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use r2mf::bench::bench_forward;
use r2mf::check::{gradcheck_suite, CheckOptions};
use r2mf::checkpoint::Checkpoint;
use r2mf::data::pgm::{image_to_grey, mask_to_grey, read_pgm, grey_to_image, write_pgm};
use r2mf::data::resize_with_pad;
use r2mf::data::synth::{generate_dataset, load_split, write_dataset, QualityMix, Split, SynthConfig};
use r2mf::eval::{evaluate_dataset, predict_image};
use r2mf::gradcheck::Precision;
use r2mf::model::{parse_list, Model, ModelConfig};
use r2mf::postprocess::count_components;
use r2mf::tape::OpKind;
use r2mf::trainer::{history_csv, train, Control};
use r2mf::Error;

pub use config::RunConfig;

/// Published parameter count of the full-width network, printed next to the
/// `paper` preset count for reference.
pub const REFERENCE_PARAMETERS_M: f64 = 16.5;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values. Exit code 1.
    Usage(String),
    /// Missing or malformed input files, shape mismatches, divergence. Exit code 2.
    Data(String),
    /// A gradient check failed. Exit code 3.
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Check(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "r2mf", version, about = "Two-stage cascade segmentation of synthetic spine radiographs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    Synth(SynthArgs),
    /// Train a cascade model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and write per-image metrics.
    Eval(EvalArgs),
    /// Segment a single PGM image.
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Measure forward latency and report the parameter count.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training patients per view; validation and test get a quarter each.
    #[arg(long, default_value_t = 24, value_parser = clap::value_parser!(u32).range(1..))]
    pub per_view: u32,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// High,medium,low quality proportions.
    #[arg(long, default_value = "0.5,0.3,0.2")]
    pub quality_mix: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` file; flags given on the command line override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub run_name: Option<String>,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub no_r2jump: bool,
    #[arg(long)]
    pub no_inception: bool,
    #[arg(long)]
    pub no_mcskip: bool,
    #[arg(long)]
    pub no_scse: bool,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_f: Option<f64>,
    /// Comma-separated recurrence steps per level, e.g. `4,3,2,1`.
    #[arg(long)]
    pub recurrence: Option<String>,
    #[arg(long)]
    pub dropout_after_scse: bool,
    /// Must match the image size of the dataset.
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub no_postprocess: bool,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub run_name: Option<String>,
    /// Also write each fine-stage probability map as a PGM.
    #[arg(long)]
    pub dump_probs: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_postprocess: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
    Both,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Overrides both the block and the end-to-end tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Both)]
    pub precision: PrecisionArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale the convolution weight gradient by 1.5 (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, conflicts_with = "preset")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides the input size of a preset.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Normal output goes to `out`, errors to stderr.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Synth(a) => synth(&a, out),
        Command::Train(a) => train_cmd(&a, out).map(|_| ()),
        Command::Eval(a) => eval_cmd(&a, out).map(|_| ()),
        Command::Predict(a) => predict_cmd(&a, out),
        Command::Gradcheck(a) => gradcheck_cmd(&a, out),
        Command::Bench(a) => bench_cmd(&a, out),
    }
}

/// Creates `out/<name>`, or `out/<timestamp>` when no name is given.
pub fn make_run_dir(out: &Path, name: Option<&str>) -> CliResult<PathBuf> {
    let dir = match name {
        Some(n) => out.join(n),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
            let mut dir = out.join(&stamp);
            let mut k = 2;
            while dir.exists() {
                dir = out.join(format!("{stamp}-{k}"));
                k += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = SynthConfig {
        per_view: a.per_view as usize,
        size: a.size,
        quality_mix: QualityMix::parse(&a.quality_mix).map_err(|e| CliError::Usage(e.to_string()))?,
        seed: a.seed,
    };
    if a.size < 16 || !a.size.is_power_of_two() {
        return Err(CliError::Usage(format!("--size must be a power of two >= 16, got {}", a.size)));
    }
    let data = generate_dataset(&cfg)?;
    write_dataset(&a.out, &data)?;
    for (split, n) in cfg.split_sizes() {
        writeln!(out, "{split}: {n} patients, {} images", n * 3)?;
    }
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}

/// Preset, then config file, then flags.
pub fn resolve_train_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::from_model(ModelConfig::preset(&a.preset)?);
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    let m = &mut cfg.model;
    m.use_r2jump &= !a.no_r2jump;
    m.use_inception &= !a.no_inception;
    m.use_mcskip &= !a.no_mcskip;
    m.use_scse &= !a.no_scse;
    m.dropout_after_scse |= a.dropout_after_scse;
    if let Some(r) = &a.recurrence {
        m.recurrence = parse_list(r).map_err(|e| CliError::Usage(format!("--recurrence `{r}`: {e}")))?;
    }
    if let Some(s) = a.input_size {
        m.input_size = s;
    }
    if let Some(s) = a.seed {
        m.seed = s;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.lambda_c {
        t.weights.lambda_c = v;
    }
    if let Some(v) = a.lambda_f {
        t.weights.lambda_f = v;
    }
    if let Some(v) = a.max_epochs {
        t.max_epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr0 = v;
    }
    cfg.augment &= !a.no_augment;
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    if let Some(n) = &a.run_name {
        cfg.run_name = Some(n.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_sizes(samples: &[r2mf::data::SegmentationSample], size: usize) -> CliResult<()> {
    match samples.iter().find(|s| s.mask.height() != size || s.mask.width() != size) {
        Some(s) => Err(CliError::Data(format!(
            "sample {} ({}) is {}x{} but the model expects {size}x{size}",
            s.id,
            s.view,
            s.mask.height(),
            s.mask.width()
        ))),
        None => Ok(()),
    }
}

/// Trains and returns the run directory.
pub fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> CliResult<PathBuf> {
    let cfg = resolve_train_config(a)?;
    let data = cfg.data.clone().ok_or_else(|| CliError::Usage("no dataset: pass --data or set `data` in the config".into()))?;
    let train_set = load_split(&data, Split::Train)?;
    let val_set = load_split(&data, Split::Val)?;
    check_sizes(&train_set, cfg.model.input_size)?;
    check_sizes(&val_set, cfg.model.input_size)?;

    let dir = make_run_dir(&cfg.out, cfg.run_name.as_deref())?;
    let text = cfg.to_text();
    fs::write(dir.join("config.txt"), &text)?;
    write!(out, "{text}")?;
    let model = Model::<f32>::build(&cfg.model)?;
    writeln!(out, "parameters: {}", model.count_parameters())?;
    writeln!(out, "run directory: {}", dir.display())?;

    let outcome = train(model, &train_set, &val_set, &cfg.train_config(), |r, _| {
        let _ = writeln!(out, "epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}", r.epoch, r.train_loss, r.val_loss, r.lr);
        let _ = out.flush();
        Control::Continue
    })?;
    fs::write(dir.join("history.csv"), history_csv(&outcome.history))?;
    outcome.best_checkpoint().save(&dir.join("best.ckpt"))?;
    outcome.last_checkpoint().save(&dir.join("last.ckpt"))?;
    writeln!(
        out,
        "best epoch {} of {}{}",
        outcome.best_epoch,
        outcome.history.len(),
        if outcome.early_stopped { " (early stop)" } else { "" }
    )?;
    Ok(dir)
}

/// Evaluates and returns the run directory.
pub fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> CliResult<PathBuf> {
    let split: Split = a.split.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model::<f32>()?;
    let samples = load_split(&a.data, split)?;
    check_sizes(&samples, model.config.input_size)?;
    let postprocess = !a.no_postprocess;
    let report = evaluate_dataset(&model, &samples, postprocess)?;

    let dir = make_run_dir(&a.out, a.run_name.as_deref())?;
    let mut text = model.config.to_text();
    text.push_str(&format!(
        "checkpoint = {}\ndata = {}\nsplit = {split}\npostprocess = {postprocess}\n",
        a.checkpoint.display(),
        a.data.display()
    ));
    fs::write(dir.join("config.txt"), &text)?;
    write!(out, "{text}")?;
    fs::write(dir.join("metrics.csv"), report.to_csv())?;
    if a.dump_probs {
        let probs = dir.join("probs");
        fs::create_dir_all(&probs)?;
        for s in &samples {
            let p = predict_image(&model, &s.image, postprocess)?;
            write_pgm(&probs.join(format!("{}_{}.pgm", s.id, s.view)), &image_to_grey(&p.fine))?;
        }
    }
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.3}"));
    writeln!(out, "{:<14} {:>4} {:>7} {:>7} {:>7} {:>7}", "view", "n", "iou", "dice", "asd", "hd95")?;
    let rows = report.per_view.iter().map(|(v, m)| (v.as_str(), m)).chain(std::iter::once(("all", &report.overall)));
    for (name, m) in rows {
        writeln!(out, "{name:<14} {:>4} {:>7.4} {:>7.4} {:>7} {:>7}", m.count, m.iou, m.dice, opt(m.asd), opt(m.hd95))?;
    }
    writeln!(out, "wrote {}", dir.join("metrics.csv").display())?;
    Ok(dir)
}

fn predict_cmd(a: &PredictArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = Checkpoint::load(&a.checkpoint)?.to_model::<f32>()?;
    let image = grey_to_image(&read_pgm(&a.image)?);
    let size = model.config.input_size;
    let d = image.dims();
    let image = if d.h == size && d.w == size { image } else { resize_with_pad(&image, size)? };
    let p = predict_image(&model, &image, !a.no_postprocess)?;
    fs::create_dir_all(&a.out)?;
    let stem = a.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let prob_path = a.out.join(format!("{stem}_prob.pgm"));
    let mask_path = a.out.join(format!("{stem}_mask.pgm"));
    write_pgm(&prob_path, &image_to_grey(&p.fine))?;
    write_pgm(&mask_path, &mask_to_grey(&p.mask))?;
    writeln!(out, "foreground pixels: {}", p.mask.area())?;
    writeln!(out, "components: {}", count_components(&p.mask))?;
    writeln!(out, "wrote {} and {}", prob_path.display(), mask_path.display())?;
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = ModelConfig::preset(&a.preset)?;
    let precisions: &[Precision] = match a.precision {
        PrecisionArg::F32 => &[Precision::F32],
        PrecisionArg::F64 => &[Precision::F64],
        PrecisionArg::Both => &[Precision::F32, Precision::F64],
    };
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be >= 1".into()));
    }
    let mut failed = Vec::new();
    for &precision in precisions {
        let mut opts = CheckOptions { samples: a.samples, seed: a.seed, ..CheckOptions::new(precision) };
        if let Some(t) = a.tol {
            opts.block_tol = t;
            opts.end_to_end_tol = t;
        }
        if a.inject_fault {
            opts.corrupt = Some((OpKind::Conv2d, 1.5));
        }
        writeln!(out, "== {precision:?} (finite differences in f64, eps {:.0e})", opts.eps)?;
        for check in gradcheck_suite(&cfg, &opts)? {
            writeln!(out, "{}", check.summary())?;
            if !check.report.passed {
                failed.push(format!("{precision:?}/{}", check.name));
            }
        }
    }
    if failed.is_empty() {
        writeln!(out, "all gradient checks passed")?;
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn bench_cmd(a: &BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    let (mut cfg, model) = match &a.checkpoint {
        Some(path) => {
            let m = Checkpoint::load(path)?.to_model::<f32>()?;
            (m.config.clone(), Some(m))
        }
        None => (ModelConfig::preset(a.preset.as_deref().unwrap_or("desk"))?, None),
    };
    let model = match (model, a.size) {
        (Some(m), None) => m,
        (Some(_), Some(_)) => return Err(CliError::Usage("--size applies to presets only".into())),
        (None, size) => {
            if let Some(s) = size {
                cfg.input_size = s;
            }
            Model::<f32>::build(&cfg)?
        }
    };
    let r = bench_forward(&model, a.warmup, a.iters)?;
    writeln!(out, "parameters: {} ({:.3} M)", r.parameters, r.parameters as f64 / 1e6)?;
    if a.checkpoint.is_none() && a.preset.as_deref() == Some("paper") {
        writeln!(out, "reference:  {REFERENCE_PARAMETERS_M} M (published figure, for comparison only)")?;
    }
    writeln!(out, "input: {0}x{0}, warmup {1}, iterations {2}", r.input_size, r.warmup, r.samples_ms.len())?;
    writeln!(out, "latency: mean {:.3} ms, std {:.3} ms, cv {:.3}", r.mean_ms, r.std_ms, r.cv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = run(std::iter::once("r2mf").chain(args.iter().copied()), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run_capture(&["synth", "--out", "/tmp/x", "--per-view", "0"]).0, 1);
        assert_eq!(run_capture(&["frobnicate"]).0, 1);
        assert_eq!(run_capture(&["train", "--preset", "huge"]).0, 1);
    }

    #[test]
    fn missing_files_exit_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let (code, _) = run_capture(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", missing.to_str().unwrap()]);
        assert_eq!(code, 2);
        let (code, _) = run_capture(&["train", "--data", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code, 2);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.txt");
        fs::write(&path, "lambda_c = 0.2\nmax_epochs = 7\nuse_scse = false\n").unwrap();
        let cli = Cli::try_parse_from([
            "r2mf",
            "train",
            "--config",
            path.to_str().unwrap(),
            "--max-epochs",
            "3",
            "--no-mcskip",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let cfg = resolve_train_config(&a).unwrap();
        assert_eq!(cfg.train.weights.lambda_c, 0.2);
        assert_eq!(cfg.train.max_epochs, 3);
        assert!(!cfg.model.use_scse && !cfg.model.use_mcskip && cfg.model.use_inception);
    }

    #[test]
    fn unknown_config_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.txt");
        fs::write(&path, "epochs = 3\n").unwrap();
        let (code, _) = run_capture(&["train", "--config", path.to_str().unwrap()]);
        assert_eq!(code, 1);
    }

    #[test]
    fn named_run_dir_is_reused_and_timestamped_dirs_are_unique() {
        let dir = tempfile::tempdir().unwrap();
        let a = make_run_dir(dir.path(), Some("x")).unwrap();
        assert_eq!(make_run_dir(dir.path(), Some("x")).unwrap(), a);
        let t1 = make_run_dir(dir.path(), None).unwrap();
        let t2 = make_run_dir(dir.path(), None).unwrap();
        assert_ne!(t1, t2);
    }
}
