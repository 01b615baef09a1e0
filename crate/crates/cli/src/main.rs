//! `avsam`: data generation, training, evaluation, inference, gradient
//! check and overlay rendering.
//!
//! Exit codes: 0 on success, 1 on bad input or configuration, 2 when an
//! internal invariant fails (including a failed gradient check).

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use avsam::config::{Config, ModelConfig};
use avsam::dataset::{
    image_dims, load_image, load_mask, load_spectrogram, overlay_mask, save_mask_png, save_rgb_png, Manifest,
    SampleSource, Split,
};
use avsam::metrics::evaluate_dataset;
use avsam::seg_head::{PromptBox, PromptPoint, PromptSet};
use avsam::synth::{generate_dataset, SynthConfig};
use avsam::train::{
    epoch_means, gradcheck, run_training, write_loss_csv, Checkpoint, FreezePlan, GradcheckOptions, TrainState,
};
use avsam::{AvSamF32, Error};

const SEED_ENV: &str = "AVSAM_SEED";

#[derive(Debug, Parser)]
#[command(name = "avsam", version, about = "Audio-visual sounding-object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic shapes-and-tones dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a per-step loss CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and write a metrics JSON.
    Eval(EvalArgs),
    /// Predict one mask PNG per image/audio pair.
    Infer(InferArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Render a mask over its image in red.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// File of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 3000)]
    n: usize,
    /// Output directory; receives images/, audio/, masks/ and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Generator seed [default: $AVSAM_SEED, else 0].
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// Standard deviation of the additive Gaussian audio noise.
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Manifest (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV to write [default: <out>.loss.csv].
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Split to train on.
    #[arg(long, default_value = "train")]
    split: String,
    /// Comma-separated module groups to freeze, e.g. `mask_decoder,prompt_encoder`.
    #[arg(long, default_value = "")]
    freeze: String,
    /// Seed for initialization and data order; overrides $AVSAM_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Decode samples from disk at every step instead of holding the split in memory.
    #[arg(long)]
    stream: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest (JSON lines).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Metrics JSON to write; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the audio embedding with zeros.
    #[arg(long)]
    ablate_audio: bool,
    /// Only `eval.*` keys take effect; the architecture comes from the checkpoint.
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct PromptArgs {
    /// Point prompt `x,y,fg|bg` in pixels of the model input; repeatable.
    #[arg(long = "point", value_name = "X,Y,LABEL")]
    points: Vec<String>,
    /// Box prompt `x0,y0,x1,y1`; repeatable.
    #[arg(long = "box", value_name = "X0,Y0,X1,Y1")]
    boxes: Vec<String>,
}

impl PromptArgs {
    fn parse(&self, image_size: usize) -> Result<PromptSet, Error> {
        let prompts = PromptSet {
            points: self.points.iter().map(|s| PromptPoint::parse(s)).collect::<Result<_, _>>()?,
            boxes: self.boxes.iter().map(|s| PromptBox::parse(s)).collect::<Result<_, _>>()?,
        };
        prompts.validate(image_size)?;
        Ok(prompts)
    }
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image; repeatable, paired in order with --audio.
    #[arg(long = "image", required = true)]
    images: Vec<PathBuf>,
    /// Input WAV; repeatable, paired in order with --image.
    #[arg(long = "audio", required = true)]
    audios: Vec<PathBuf>,
    /// Output directory; masks are named after the image files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    ablate_audio: bool,
    #[command(flatten)]
    prompts: PromptArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = GradcheckOptions::default().step)]
    step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = GradcheckOptions::default().tolerance)]
    tolerance: f64,
    /// Seed of the synthetic inputs.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Deliberately corrupt one analytic gradient (the check must then fail).
    #[arg(long)]
    corrupt: bool,
    /// Report JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[arg(long)]
    image: PathBuf,
    /// Mask PNG to overlay. Without it the mask is predicted from --checkpoint and --audio.
    #[arg(long, conflicts_with_all = ["checkpoint", "audio"])]
    mask: Option<PathBuf>,
    #[arg(long, requires = "audio")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    audio: Option<PathBuf>,
    /// Overlay PNG to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[command(flatten)]
    prompts: PromptArgs,
}

/// Marks a failure as an internal invariant violation (exit 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Internal(String);

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Internal>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_internal() { 2 } else { 1 };
        }
    }
    1
}

fn env_seed() -> Result<Option<u64>, Error> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Defaults, then the config file, then $AVSAM_SEED, then `--set`, then
/// `--seed`.
fn resolve_config(args: &ConfigArgs, seed: Option<u64>) -> Result<Config, Error> {
    let mut cfg = Config::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    if let Some(s) = env_seed()? {
        cfg.set_seed(s);
    }
    for pair in &args.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(name: &str) -> Result<Split, Error> {
    Split::from_name(name)
}

fn load_checkpoint_model(path: &Path) -> anyhow::Result<AvSamF32> {
    let ckpt = Checkpoint::load(path)?;
    Ok(ckpt.model()?)
}

fn cmd_gen_data(a: &GenDataArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        n_samples: a.n,
        image_size: a.image_size,
        noise_std: a.noise_std,
        seed: match a.seed {
            Some(s) => s,
            None => env_seed()?.unwrap_or(0),
        },
        ..SynthConfig::default()
    };
    let manifest = generate_dataset(&a.out, &cfg)?;
    let counts: Vec<String> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| format!("{} {}", s.name(), manifest.split(s).len()))
        .collect();
    eprintln!(
        "wrote {} samples to {} ({})",
        manifest.entries.len(),
        a.out.display(),
        counts.join(", ")
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&a.cfg, a.seed)?;
    let plan = FreezePlan::from_frozen_list(&a.freeze)?;
    let split = parse_split(&a.split)?;
    let manifest = Manifest::load(&a.data)?;
    let source = manifest.source(split, &cfg.model);
    if SampleSource::<f32>::is_empty(&source) {
        return Err(Error::Contract(format!("split {} of {} is empty", split.name(), a.data.display())).into());
    }
    let csv = a.loss_csv.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".loss.csv");
        PathBuf::from(s)
    });
    let mut state = TrainState::<f32>::new(&cfg.model, &cfg.train)?;
    eprintln!(
        "training {} parameters on {} samples ({}), frozen: {}",
        state.model.num_params(),
        SampleSource::<f32>::len(&source),
        split.name(),
        plan
    );
    let start = Instant::now();
    let mut epoch_sum = (0usize, 0.0f64, 0usize);
    let mut report = |r: &avsam::train::LossRecord| {
        if r.epoch != epoch_sum.0 {
            eprintln!(
                "epoch {} loss {:.5} ({:.0?})",
                epoch_sum.0,
                epoch_sum.1 / epoch_sum.2.max(1) as f64,
                start.elapsed()
            );
            epoch_sum = (r.epoch, 0.0, 0);
        }
        epoch_sum.1 += r.loss;
        epoch_sum.2 += 1;
        Ok(())
    };
    let records = if a.stream {
        run_training(&mut state, &source, &cfg.train, &plan, &mut report)?
    } else {
        let samples = source.load_all::<f32>()?;
        run_training(&mut state, &samples, &cfg.train, &plan, &mut report)?
    };
    if let Some(&(e, loss)) = epoch_means(&records).last() {
        eprintln!("epoch {e} loss {loss:.5} ({:.0?})", start.elapsed());
    }
    state.checkpoint().save(&a.out)?;
    write_loss_csv(&csv, &records)?;
    eprintln!("wrote {} and {}", a.out.display(), csv.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&a.cfg, None)?;
    let model = load_checkpoint_model(&a.checkpoint)?;
    let split = parse_split(&a.split)?;
    let manifest = Manifest::load(&a.data)?;
    let source = manifest.source(split, &model.config);
    let report = evaluate_dataset(&model, &source, &cfg.eval, a.ablate_audio)?;
    match &a.out {
        Some(p) => {
            report.write_json(p)?;
            eprintln!(
                "mIoU {:.4} F {:.4} AP {:.4} cIoU {:.4} AUC {:.4} -> {}",
                report.miou,
                report.fscore,
                report.ap,
                report.ciou,
                report.auc,
                p.display()
            );
        }
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

fn mask_name(image: &Path) -> Result<PathBuf, Error> {
    let stem = image
        .file_stem()
        .ok_or_else(|| Error::Contract(format!("{} has no file name", image.display())))?;
    let mut name = PathBuf::from(stem);
    name.set_extension("png");
    Ok(name)
}

fn check_unit_interval(name: &str, v: f64) -> Result<(), Error> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::Contract(format!("{name} must lie in (0, 1), got {v}")));
    }
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> anyhow::Result<()> {
    if a.images.len() != a.audios.len() {
        return Err(Error::Contract(format!(
            "{} images but {} audio files; inputs are paired in order",
            a.images.len(),
            a.audios.len()
        ))
        .into());
    }
    check_unit_interval("--threshold", a.threshold)?;
    let names: Vec<PathBuf> = a.images.iter().map(|p| mask_name(p)).collect::<Result<_, _>>()?;
    let mut seen = HashSet::new();
    for n in &names {
        if !seen.insert(n) {
            return Err(Error::Contract(format!("two images map to the same output {}", n.display())).into());
        }
    }
    let model = load_checkpoint_model(&a.checkpoint)?;
    let mc = &model.config;
    let prompts = a.prompts.parse(mc.backbone.image_size)?;
    // Everything is decoded and predicted before the first file is written.
    let mut masks = Vec::with_capacity(a.images.len());
    for (img, wav) in a.images.iter().zip(&a.audios) {
        let image = load_image::<f32>(img, mc.backbone.image_size)?;
        let spec = load_spectrogram::<f32>(wav, &mc.audio)?;
        let logits = model.predict(&image, &spec, &prompts, a.ablate_audio)?;
        masks.push(logits.binarize(a.threshold));
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    for (name, mask) in names.iter().zip(&masks) {
        save_mask_png(&a.out.join(name), mask)?;
    }
    eprintln!("wrote {} masks to {}", masks.len(), a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> anyhow::Result<bool> {
    let opts = GradcheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        data_seed: a.data_seed,
        corrupt: a.corrupt,
    };
    let report = gradcheck(&ModelConfig::tiny(), &opts)?;
    print!("{}", report.table());
    if let Some(p) = &a.out {
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(p, json + "\n").with_context(|| format!("cannot write {}", p.display()))?;
    }
    let passed = report.passed();
    println!(
        "{}: max relative error {:.3e} over {} scalars (tolerance {:.0e})",
        if passed { "PASS" } else { "FAIL" },
        report.max_rel_err,
        report.checked,
        report.tolerance
    );
    Ok(passed)
}

fn cmd_visualize(a: &VisualizeArgs) -> anyhow::Result<()> {
    check_unit_interval("--threshold", a.threshold)?;
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(Error::Contract(format!("--alpha must lie in [0, 1], got {}", a.alpha)).into());
    }
    let (image, mask) = match (&a.mask, &a.checkpoint, &a.audio) {
        (Some(m), _, _) => {
            let (w, h) = image_dims(m)?;
            if w != h {
                return Err(Error::Contract(format!("mask {} is {w}×{h}; expected a square mask", m.display())).into());
            }
            (load_image::<f32>(&a.image, w)?, load_mask(m, w)?.into_inner())
        }
        (None, Some(ckpt), Some(wav)) => {
            let model = load_checkpoint_model(ckpt)?;
            let mc = &model.config;
            let prompts = a.prompts.parse(mc.backbone.image_size)?;
            let image = load_image::<f32>(&a.image, mc.backbone.image_size)?;
            let spec = load_spectrogram::<f32>(wav, &mc.audio)?;
            let mask = model.predict(&image, &spec, &prompts, false)?.binarize(a.threshold);
            (image, mask)
        }
        _ => return Err(Error::Contract("give either --mask or both --checkpoint and --audio".into()).into()),
    };
    let out = overlay_mask(&image, mask.view(), [1.0, 0.0, 0.0], a.alpha)?;
    save_rgb_png(&a.out, &out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Gradcheck(a) => {
            if cmd_gradcheck(a)? {
                Ok(())
            } else {
                Err(anyhow!(Internal("analytic gradients disagree with finite differences".into())))
            }
        }
        Command::Visualize(a) => cmd_visualize(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
