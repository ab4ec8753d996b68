//! `restain`: dataset synthesis, training, translation, and evaluation for
//! unpaired H&E-to-IHC stain translation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

use clap::{Args, Parser, Subcommand, ValueEnum};
use restain::dataset::make_toy_dataset;
use restain::objectives::LossVariant;
use restain::trainer::{evaluate, train, translate, MetricConfig, TrainConfig};
use restain::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "restain",
    version,
    about = "Train and evaluate unpaired H&E-to-IHC stain translation models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a toy recolor dataset for end-to-end verification.
    MakeToy(MakeToyArgs),
    /// Train a generator on a paired-directory dataset.
    Train(TrainArgs),
    /// Translate a directory of H&E images with a trained checkpoint.
    Translate(TranslateArgs),
    /// Compute FID / KID / PHV between generated and ground-truth images.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct MakeToyArgs {
    /// Dataset root to create (`<out>/train/{HE,IHC}`).
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// CPU-feasible sizes: 64 crops, width-32 generator, 3 res blocks.
    Desk,
    /// Full-scale sizes: 512 crops, width-64 generator, 6 res blocks.
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Mix,
    Nce,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root containing `train/HE` and `train/IHC`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, trace, and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Flat key/value config file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base configuration the file and flags override.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Resume from a checkpoint (its embedded config wins).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Contrastive form for both branches.
    #[arg(long, value_enum)]
    loss_variant: Option<VariantArg>,
    /// Drop the ground-truth positive branch (ablation).
    #[arg(long)]
    no_gt_branch: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many iterations (0 = run all epochs).
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    crop: Option<usize>,
    /// Generic `key=value` config overrides (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of input H&E images.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory; one file per input, same filename.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Where to write the metric report.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "tiny-cnn-v1-seed0")]
    extractor: String,
    /// PHV threshold T.
    #[arg(long, default_value_t = 0.01)]
    phv_t: f64,
    #[arg(long, default_value_t = 10)]
    kid_subsets: usize,
    #[arg(long, default_value_t = 0)]
    kid_seed: u64,
    /// KID subset size (defaults to min(N, 100)).
    #[arg(long)]
    kid_subset_size: Option<usize>,
}

fn write_manifest(path: &Path, body: String) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn manifest_header(command: &str) -> String {
    format!(
        "# restain run manifest\ntool = restain {}\ncommand = {}\n",
        env!("CARGO_PKG_VERSION"),
        command
    )
}

/// The exact contrastive configuration a run optimizes, for the manifest.
fn contrastive_form(cfg: &TrainConfig) -> &'static str {
    match (cfg.loss_variant, cfg.use_gt_branch) {
        (LossVariant::PatchNce, false) => "nce(he)",
        (LossVariant::MixDomain, false) => "mix(he)",
        (LossVariant::PatchNce, true) => "nce(he)+nce_weighted(gt)",
        (LossVariant::MixDomain, true) => "mix(he)+mix_weighted(gt)",
    }
}

fn cmd_make_toy(args: MakeToyArgs) -> Result<(), Error> {
    let mut rng = restain::trainer::seeded_rng(args.seed, 4);
    make_toy_dataset(&args.out, args.n, args.size, &mut rng)?;
    let manifest = format!(
        "{}out = {}\nn = {}\nsize = {}\nseed = {}\n",
        manifest_header("make-toy"),
        args.out.display(),
        args.n,
        args.size,
        args.seed
    );
    write_manifest(&args.out.join("manifest.txt"), manifest)?;
    println!(
        "wrote {} toy pairs of {}x{} under {}",
        args.n,
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut cfg = match args.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            Error::ConfigError(format!("--set expects KEY=VALUE, got `{kv}`"))
        })?;
        cfg.apply_kv(k.trim(), v.trim())?;
    }
    if let Some(v) = args.loss_variant {
        cfg.loss_variant = match v {
            VariantArg::Mix => LossVariant::MixDomain,
            VariantArg::Nce => LossVariant::PatchNce,
        };
    }
    if args.no_gt_branch {
        cfg.use_gt_branch = false;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
        // keep the schedule valid when the flag shrinks the run
        cfg.decay_start = cfg.decay_start.min(e.max(1));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(i) = args.iters {
        cfg.max_iters = if i == 0 { None } else { Some(i) };
    }
    if let Some(c) = args.crop {
        cfg.crop = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let cfg = resolve_train_config(&args)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let manifest = format!(
        "{}data = {}\nout = {}\nresume = {}\ncontrastive_form = {}\n\
         artifact.trace = trace.csv\nartifact.checkpoint_latest = checkpoint-latest.ckpt\n\n\
         # resolved config\n{}",
        manifest_header("train"),
        args.data.display(),
        args.out.display(),
        args.resume
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "none".into()),
        contrastive_form(&cfg),
        cfg.to_flat_text()
    );
    write_manifest(&args.out.join("manifest.txt"), manifest)?;

    let outcome = train(&cfg, &args.data, &args.out, args.resume.as_deref()).map_err(|e| {
        if matches!(e, Error::NonFiniteLoss { .. }) {
            eprintln!(
                "training halted; diagnostic dump at {}",
                args.out.join("diagnostic-dump.txt").display()
            );
        }
        e
    })?;
    println!(
        "trained {} epochs / {} iterations; checkpoint at {}",
        outcome.epochs_completed,
        outcome.iterations,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_translate(args: TranslateArgs) -> Result<(), Error> {
    let n = translate(&args.checkpoint, &args.input, &args.out)?;
    let manifest = format!(
        "{}checkpoint = {}\nin = {}\nout = {}\nimages = {}\n",
        manifest_header("translate"),
        args.checkpoint.display(),
        args.input.display(),
        args.out.display(),
        n
    );
    write_manifest(&args.out.join("manifest.txt"), manifest)?;
    println!("translated {n} images into {}", args.out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Error> {
    let mcfg = MetricConfig {
        extractor_id: args.extractor.clone(),
        kid_subset_size: args.kid_subset_size,
        kid_subsets: args.kid_subsets,
        kid_seed: args.kid_seed,
        phv_t: args.phv_t,
    };
    let report = evaluate(&args.generated, &args.gt, &mcfg)?;
    std::fs::write(&args.report, report.to_text()).map_err(|e| Error::io(&args.report, e))?;
    let manifest = format!(
        "{}generated = {}\ngt = {}\nreport = {}\nextractor = {}\nphv_t = {}\n\
         kid_subsets = {}\nkid_seed = {}\nkid_subset_size = {}\n",
        manifest_header("evaluate"),
        args.generated.display(),
        args.gt.display(),
        args.report.display(),
        mcfg.extractor_id,
        mcfg.phv_t,
        mcfg.kid_subsets,
        mcfg.kid_seed,
        mcfg.kid_subset_size
            .map(|v| v.to_string())
            .unwrap_or_else(|| "auto".into()),
    );
    write_manifest(
        &PathBuf::from(format!("{}.manifest.txt", args.report.display())),
        manifest,
    )?;
    println!(
        "FID={:.6} KID(x1000)={:.6} PHV(avg)={:.6}",
        report.fid, report.kid_x1000, report.phv_average
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::MakeToy(args) => cmd_make_toy(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Translate(args) => cmd_translate(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::ConfigError(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
