use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use motiondiff::error::{Error, ErrorKind, Result};
use motiondiff::evaluation::{
    evaluate_run, format_ablation_table, run_ablation, train_dataset_classifier, Classifier, ClassifierConfig,
};
use motiondiff::losses::ABLATION_ROWS;
use motiondiff::motiondata::bvh::serialize_bvh;
use motiondiff::motiondata::{dataset_from_bvh, list_bvh_files, synthetic_dataset, ContactThresholds, Dataset};
use motiondiff::postprocess::{gaussian_filter, ik_foot_cleanup, DEFAULT_SIGMA_FRAMES};
use motiondiff::sampler::Generator;
use motiondiff::trainer::{run_training, Preset, Trainer, TrainerConfig, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(name = "motiondiff", version, about = "Conditional diffusion model for styled motion synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset container from BVH files or the synthetic generator.
    Preprocess(PreprocessArgs),
    /// Train a model and write checkpoints and metrics.
    Train(TrainArgs),
    /// Generate clips as BVH files with a JSON manifest.
    Sample(SampleArgs),
    /// Train the content classifier used for evaluation.
    TrainClassifier(ClassifierArgs),
    /// FID and content accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate one model per loss ablation row.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory of `<content>_<style>[_n].bvh` files.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Use the procedural generator instead of BVH input.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of synthetic clips.
    #[arg(long, default_value_t = 600)]
    clips: usize,
    #[arg(long, default_value_t = 3)]
    contents: usize,
    #[arg(long, default_value_t = 3)]
    styles: usize,
    /// Window stride in frames for BVH input.
    #[arg(long, default_value_t = 32)]
    stride: usize,
    /// Contact height limit (skeleton units); calibrated when omitted.
    #[arg(long, requires = "speed_threshold")]
    height_threshold: Option<f64>,
    /// Contact speed limit (units per second); calibrated when omitted.
    #[arg(long, requires = "height_threshold")]
    speed_threshold: Option<f64>,
    /// Output container; metadata goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "desk")]
    preset: String,
    /// JSON object overriding preset fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from `<out>/checkpoint.mdc` if it exists.
    #[arg(long)]
    resume: bool,
    /// Print the resolved configuration and stop.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Content index or name.
    #[arg(long)]
    content: String,
    /// Style index or name.
    #[arg(long)]
    style: String,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Sample with the live weights instead of the averaged ones.
    #[arg(long)]
    live: bool,
    /// Skip the Gaussian filter and foot-contact IK.
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value_t = DEFAULT_SIGMA_FRAMES)]
    sigma: f64,
}

#[derive(Args)]
struct ClassifierArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ClassifierConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    held_out_fraction: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    /// Generated clips; defaults to the held-out count.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    live: bool,
    /// Temporal filter applied to generated clips before feature extraction.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    /// Comma-separated rows from foot, root, physical, discriminator, full.
    #[arg(long, value_delimiter = ',', default_values_t = ABLATION_ROWS.iter().map(|s| s.to_string()))]
    rows: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn resolve_config(preset: &str, config: Option<&Path>, seed: Option<u64>) -> Result<TrainerConfig> {
    let base = TrainerConfig::preset(preset.parse::<Preset>()?);
    let mut cfg = match config {
        Some(p) => TrainerConfig::overlay(&base, &fs::read_to_string(p)?)?,
        None => base,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let data: Dataset = if a.synthetic {
        synthetic_dataset(a.clips, a.contents, a.styles, a.seed)?
    } else {
        let dir = a.input.as_deref().expect("clap requires input without --synthetic");
        let thresholds = match (a.height_threshold, a.speed_threshold) {
            (Some(height), Some(speed)) => Some(ContactThresholds { height, speed }),
            _ => None,
        };
        dataset_from_bvh(&list_bvh_files(dir)?, a.stride, thresholds)?
    };
    data.save(&a.out)?;
    print_json(&json!({
        "out": a.out,
        "clips": data.clips.len(),
        "contents": data.meta.content_names,
        "styles": data.meta.style_names,
        "thresholds": data.meta.thresholds,
    }))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.preset, a.config.as_deref(), a.seed)?;
    print_json(&json!({ "preset": a.preset, "config": cfg }))?;
    if a.dry_run {
        return Ok(());
    }
    let data = Dataset::load(&a.dataset)?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    let mut trainer = if a.resume && ckpt.exists() {
        let t = Trainer::<f32>::load(&ckpt)?;
        if t.config != cfg {
            return Err(Error::Config("resumed checkpoint was trained with a different configuration".into()));
        }
        t
    } else {
        Trainer::<f32>::new(cfg, data.meta.clone())?
    };
    let records = run_training(&mut trainer, &data, Some(&a.out))?;
    print_json(&json!({
        "steps": trainer.step,
        "checkpoint": ckpt,
        "final": records.last(),
    }))
}

fn label_index(value: &str, names: &[String], what: &str) -> Result<usize> {
    let idx = match value.parse::<usize>() {
        Ok(i) => i,
        Err(_) => names.iter().position(|n| n.eq_ignore_ascii_case(value)).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown {what} '{value}'; valid names: {}", names.join(", ")))
        })?,
    };
    if idx >= names.len() {
        return Err(Error::InvalidArgument(format!("{what} {idx} out of range 0..{}", names.len())));
    }
    Ok(idx)
}

fn sample(a: SampleArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::InvalidArgument("--n must be positive".into()));
    }
    let g = Generator::<f32>::load(&a.checkpoint, !a.live)?;
    let content = label_index(&a.content, &g.meta.content_names, "content")?;
    let style = label_index(&a.style, &g.meta.style_names, "style")?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let clips = g.sample(content, style, a.n, &mut rng)?;
    fs::create_dir_all(&a.out)?;
    let mut files = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let (clip, ik) = if a.raw {
            (clip.clone(), None)
        } else {
            let smooth = gaussian_filter(clip, a.sigma)?;
            let (fixed, report) = ik_foot_cleanup(&smooth, &g.meta.skeleton, &clip.foot_contact, g.meta.frame_time)?;
            (fixed, Some(report))
        };
        let name = format!("sample_{i:03}.bvh");
        fs::write(a.out.join(&name), serialize_bvh(&g.meta.skeleton, &clip, g.meta.frame_time)?)?;
        files.push(json!({ "file": name, "ik": ik }));
    }
    let manifest = json!({
        "checkpoint": a.checkpoint,
        "content": content,
        "content_name": g.meta.content_names[content],
        "style": style,
        "style_name": g.meta.style_names[style],
        "seed": a.seed,
        "n": a.n,
        "weights": if a.live { "live" } else { "ema" },
        "postprocess": !a.raw,
        "frame_time": g.meta.frame_time,
        "files": files,
    });
    fs::write(a.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    print_json(&json!({ "out": a.out, "files": clips.len() }))
}

fn train_classifier(a: ClassifierArgs) -> Result<()> {
    let data = Dataset::load(&a.dataset)?;
    let cfg = ClassifierConfig { seed: a.seed, steps: a.steps, ..Default::default() };
    let c = train_dataset_classifier(&data, a.held_out_fraction, cfg)?;
    c.save(&a.out)?;
    let held: Vec<_> =
        motiondiff::evaluation::held_out(&data, a.held_out_fraction).iter().map(|&i| &data.clips[i]).collect();
    let acc = if held.is_empty() { None } else { Some(c.accuracy(&held)?) };
    print_json(&json!({ "out": a.out, "held_out_accuracy": acc }))
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = Dataset::load(&a.dataset)?;
    let trainer = Trainer::<f32>::load(&a.checkpoint)?;
    let cls = Classifier::<f32>::load(&a.classifier)?;
    let report = evaluate_run(
        &Generator::from_trainer(&trainer, !a.live),
        &data,
        &cls,
        trainer.config.held_out_fraction,
        a.n,
        a.sigma,
        a.seed,
    )?;
    let v = serde_json::to_value(&report)?;
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&v)? + "\n")?;
    }
    print_json(&v)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = resolve_config(&a.preset, a.config.as_deref(), a.seed)?;
    for r in &a.rows {
        cfg.for_ablation_row(r)?;
    }
    let data = Dataset::load(&a.dataset)?;
    let cls = Classifier::<f32>::load(&a.classifier)?;
    let table = run_ablation(&cfg, &data, &cls, &a.rows, Some(&a.out))?;
    fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    let text = format_ablation_table(&table);
    fs::write(a.out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::TrainClassifier(a) => train_classifier(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = json!({ "error": kind, "message": message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            return fail("usage", first.trim_start_matches("error: "), 2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            };
            fail(e.kind().as_str(), &e.to_string(), code)
        }
    }
}
