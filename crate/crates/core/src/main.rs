use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nlut::clut::{DEFAULT_DIM, DEFAULT_N, DEFAULT_S, DEFAULT_W};
use nlut::cube::{read_cube, write_cube};
use nlut::features::{Profile, DEFAULT_FEATURE_SEED};
use nlut::losses::LossWeights;
use nlut::lut::Lut3D;
use nlut::network::{ModelConfig, TRAIN_SIZE};
use nlut::trainer::{self, Checkpoint, TrainConfig, CLIP_NORM, DEFAULT_LR, DEFAULT_SEED, FINETUNE_BATCH, FINETUNE_ITERS, FINETUNE_LR, PRETRAIN_BATCH, PRETRAIN_ITERS};
use nlut::video::{self, bench, consistency_check, load_frames, read_image, save_frames, stylize_video, Resolution, BenchReport, BENCH_RUNS, BENCH_WARMUP};
use nlut::Error;

#[derive(Parser)]
#[command(name = "nlut", version, about = "Neural 3D LUT color transfer for images and videos")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a fresh model on a directory of images.
    Pretrain(PretrainArgs),
    /// Adapt a checkpoint to one video and style image; writes a .cube and a checkpoint.
    Finetune(FinetuneArgs),
    /// Apply a .cube LUT to a frame directory, .rgb24 file or single image.
    Apply(ApplyArgs),
    /// Time LUT application at standard resolutions.
    Bench(BenchArgs),
    /// Write a .cube: the identity lattice, or a checkpoint's prediction for a pair.
    Export(ExportArgs),
    /// Per-color consistency and flicker of a stylized sequence.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Directory of PNG/PPM training images.
    corpus: PathBuf,
    /// Output checkpoint.
    out: PathBuf,
    #[arg(long, default_value_t = PRETRAIN_ITERS)]
    iterations: usize,
    #[arg(long, default_value_t = PRETRAIN_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Training resolution (square side, multiple of 8).
    #[arg(long, default_value_t = TRAIN_SIZE)]
    resize: usize,
    /// Network widths: desk or paper.
    #[arg(long, alias = "features", default_value_t = Profile::Desk)]
    profile: Profile,
    #[arg(long, default_value_t = DEFAULT_FEATURE_SEED)]
    feature_seed: u64,
    /// Lattice size D.
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    /// Number of basis CLUTs N.
    #[arg(short = 'n', long = "bases", default_value_t = DEFAULT_N)]
    n: usize,
    /// Compressed lattice rows S.
    #[arg(short = 's', long = "rank-s", default_value_t = DEFAULT_S)]
    s: usize,
    /// Compressed lattice columns W.
    #[arg(short = 'w', long = "rank-w", default_value_t = DEFAULT_W)]
    w: usize,
    /// Keep the basis CLUTs fixed.
    #[arg(long)]
    freeze_basis: bool,
    /// Keep the transformation matrices fixed.
    #[arg(long)]
    freeze_matrices: bool,
    #[arg(long, default_value_t = CLIP_NORM)]
    clip_norm: f64,
    /// CSV file receiving one loss row per iteration.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Style loss weight.
    #[arg(long, default_value_t = LossWeights::default().style)]
    lambda_s: f64,
    /// Content loss weight.
    #[arg(long, default_value_t = LossWeights::default().content)]
    lambda_c: f64,
    /// Smoothness regularizer weight.
    #[arg(long, default_value_t = LossWeights::default().smooth)]
    lambda_rs: f64,
    /// Monotonicity regularizer weight.
    #[arg(long, default_value_t = LossWeights::default().mono)]
    lambda_rm: f64,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Pretrained checkpoint.
    ckpt: PathBuf,
    /// Content video: frame directory, .rgb24 file or single image.
    video: PathBuf,
    /// Style image.
    style: PathBuf,
    /// Output .cube of the tuned lattice.
    out: PathBuf,
    /// Output checkpoint [default: OUT with extension .ckpt].
    #[arg(long)]
    out_ckpt: Option<PathBuf>,
    /// Keyframe index.
    #[arg(long, default_value_t = 0, conflicts_with = "keyframes")]
    keyframe: usize,
    /// Several keyframe indices, comma separated.
    #[arg(long, value_delimiter = ',')]
    keyframes: Vec<usize>,
    #[arg(long, default_value_t = FINETUNE_ITERS)]
    iterations: usize,
    #[arg(long, default_value_t = FINETUNE_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = FINETUNE_LR)]
    lr: f64,
    /// Hold the learning rate fixed instead of annealing it.
    #[arg(long)]
    constant_lr: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = TRAIN_SIZE)]
    resize: usize,
    /// Requested profile; the checkpoint's own profile always wins.
    #[arg(long, alias = "features")]
    profile: Option<Profile>,
    /// Keep the basis CLUTs fixed.
    #[arg(long)]
    freeze_basis: bool,
    /// Also train the transformation matrices.
    #[arg(long)]
    update_matrices: bool,
    /// Optimize the combination weights directly instead of the predictor.
    #[arg(long)]
    direct_weights: bool,
    #[arg(long, default_value_t = CLIP_NORM)]
    clip_norm: f64,
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Style loss weight.
    #[arg(long, default_value_t = LossWeights::finetune().style)]
    lambda_s: f64,
    /// Content loss weight.
    #[arg(long, default_value_t = LossWeights::finetune().content)]
    lambda_c: f64,
    /// Smoothness regularizer weight.
    #[arg(long, default_value_t = LossWeights::finetune().smooth)]
    lambda_rs: f64,
    /// Monotonicity regularizer weight.
    #[arg(long, default_value_t = LossWeights::finetune().mono)]
    lambda_rm: f64,
}

#[derive(Args)]
struct ApplyArgs {
    lut: PathBuf,
    /// Frame directory, .rgb24 file or single image.
    input: PathBuf,
    /// Frame directory, .rgb24 file or single image path.
    output: PathBuf,
    #[arg(long, env = "NLUT_WORKERS")]
    workers: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// LUT to time [default: identity with D=33].
    lut: Option<PathBuf>,
    /// Comma separated labels (512, HD, FHD, QHD, 2000, 4K, 5K, 8K) or WxH.
    #[arg(long, default_value = "512,HD,FHD,QHD,2000,4K,5K,8K")]
    res: String,
    #[arg(long, env = "NLUT_WORKERS")]
    workers: Option<usize>,
    #[arg(long, default_value_t = BENCH_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = BENCH_RUNS)]
    runs: usize,
    /// Print CSV instead of a table.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct ExportArgs {
    out: PathBuf,
    /// Write the identity lattice of this size.
    #[arg(long, conflicts_with_all = ["ckpt", "content", "style"])]
    identity: Option<usize>,
    #[arg(long, requires_all = ["content", "style"])]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    content: Option<PathBuf>,
    #[arg(long)]
    style: Option<PathBuf>,
    /// TITLE line of the .cube file.
    #[arg(long, default_value = "nlut")]
    title: String,
}

#[derive(Args)]
struct MetricsArgs {
    content: PathBuf,
    stylized: PathBuf,
    #[arg(long)]
    csv: bool,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn require(paths: &[&Path]) -> Outcome {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(Failure::Usage(format!("{} does not exist", p.display()))),
        None => Ok(()),
    }
}

fn workers(requested: Option<usize>) -> usize {
    requested
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn load_cube(path: &Path) -> Result<Lut3D, Error> {
    read_cube(BufReader::new(fs::File::open(path)?))
}

fn save_cube(path: &Path, lut: &Lut3D, title: &str) -> Result<(), Error> {
    write_cube(fs::File::create(path)?, lut, title)
}

fn pretrain(a: PretrainArgs) -> Outcome {
    require(&[&a.corpus])?;
    let model = ModelConfig {
        profile: a.profile,
        feature_seed: a.feature_seed,
        dim: a.dim,
        n: a.n,
        s: a.s,
        w: a.w,
    };
    let base = TrainConfig::pretrain();
    let cfg = TrainConfig {
        batch_size: a.batch,
        iterations: a.iterations,
        resize: a.resize,
        seed: a.seed,
        lr: a.lr,
        update_basis: !a.freeze_basis,
        update_matrices: !a.freeze_matrices,
        loss: LossWeights { style: a.lambda_s, content: a.lambda_c, smooth: a.lambda_rs, mono: a.lambda_rm },
        clip_norm: a.clip_norm,
        loss_log: a.loss_log,
        ..base
    };
    let trained = trainer::pretrain(&a.corpus, model, &cfg)?;
    trained.checkpoint.save(&a.out)?;
    if let Some(last) = trained.history.last() {
        println!("final loss {:.6} (style {:.6}, content {:.6})", last.total, last.style, last.content);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Outcome {
    require(&[&a.ckpt, &a.video, &a.style])?;
    let ckpt = Checkpoint::load(&a.ckpt, a.profile)?;
    let seq = load_frames(&a.video)?;
    let indices = if a.keyframes.is_empty() { vec![a.keyframe] } else { a.keyframes.clone() };
    if let Some(&bad) = indices.iter().find(|&&i| i >= seq.len()) {
        return Err(Failure::Usage(format!(
            "keyframe {bad} out of range, the video has {} frames",
            seq.len()
        )));
    }
    let keyframes: Vec<_> = indices.iter().map(|&i| seq.frames()[i].clone()).collect();
    let style = read_image(&a.style)?;
    let base = TrainConfig::finetune();
    let cfg = TrainConfig {
        batch_size: a.batch,
        iterations: a.iterations,
        resize: a.resize,
        seed: a.seed,
        lr: a.lr,
        update_basis: !a.freeze_basis,
        update_matrices: a.update_matrices,
        direct_weights: a.direct_weights,
        loss: LossWeights { style: a.lambda_s, content: a.lambda_c, smooth: a.lambda_rs, mono: a.lambda_rm },
        clip_norm: a.clip_norm,
        cosine_decay: !a.constant_lr,
        loss_log: a.loss_log,
        ..base
    };
    let tuned = trainer::finetune(&ckpt, &keyframes, &style, &cfg)?;
    let ckpt_out = a.out_ckpt.unwrap_or_else(|| a.out.with_extension("ckpt"));
    save_cube(&a.out, &tuned.lut, "nlut finetune")?;
    tuned.checkpoint.save(&ckpt_out)?;
    if let (Some(first), Some(last)) = (tuned.history.first(), tuned.history.last()) {
        println!("style loss {:.6} -> {:.6}", first.style, last.style);
    }
    println!("wrote {} and {}", a.out.display(), ckpt_out.display());
    Ok(())
}

fn apply(a: ApplyArgs) -> Outcome {
    require(&[&a.lut, &a.input])?;
    let lut = load_cube(&a.lut)?;
    let seq = load_frames(&a.input)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers(a.workers))
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start workers: {e}")))?;
    let out = pool.install(|| stylize_video(&lut, &seq));
    if out.len() == 1 && a.output.extension().is_some() && a.output.extension() != Some("rgb24".as_ref()) {
        video::write_image(&a.output, &out.frames()[0])?;
    } else {
        save_frames(&out, &a.output)?;
    }
    println!("wrote {} frames to {}", out.len(), a.output.display());
    Ok(())
}

fn run_bench(a: BenchArgs) -> Outcome {
    let lut = match &a.lut {
        Some(p) => {
            require(&[p])?;
            load_cube(p)?
        }
        None => Lut3D::identity(DEFAULT_DIM)?,
    };
    let res = Resolution::parse_list(&a.res).map_err(|e| Failure::Usage(e.to_string()))?;
    let report: BenchReport = bench(&lut, &res, workers(a.workers), a.warmup, a.runs)?;
    if a.csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn export(a: ExportArgs) -> Outcome {
    let lut = match (a.identity, &a.ckpt, &a.content, &a.style) {
        (Some(d), ..) => Lut3D::identity(d)?,
        (None, Some(ckpt), Some(content), Some(style)) => {
            require(&[ckpt, content, style])?;
            let ckpt = Checkpoint::load(ckpt, None)?;
            ckpt.predict_lut(&read_image(content)?, &read_image(style)?)?
        }
        _ => {
            return Err(Failure::Usage(
                "export needs --identity D, or --ckpt with --content and --style".into(),
            ))
        }
    };
    save_cube(&a.out, &lut, &a.title)?;
    println!("wrote {} (D={})", a.out.display(), lut.dim());
    Ok(())
}

fn metrics(a: MetricsArgs) -> Outcome {
    require(&[&a.content, &a.stylized])?;
    let content = load_frames(&a.content)?;
    let stylized = load_frames(&a.stylized)?;
    let r = consistency_check(&content, &stylized)?;
    if a.csv {
        println!("frames,colors,max_spread,inconsistent_colors,flicker");
        println!("{},{},{},{},{:.6}", r.frames, r.colors, r.max_spread, r.inconsistent_count, r.flicker);
    } else {
        println!("frames               {}", r.frames);
        println!("distinct colors      {}", r.colors);
        println!("max spread           {}", r.max_spread);
        println!("inconsistent colors  {}", r.inconsistent_count);
        for c in &r.inconsistent_colors {
            println!("  {:3} {:3} {:3}", c[0], c[1], c[2]);
        }
        println!("flicker              {:.6}", r.flicker);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Finetune(a) => finetune(a),
        Cmd::Apply(a) => apply(a),
        Cmd::Bench(a) => run_bench(a),
        Cmd::Export(a) => export(a),
        Cmd::Metrics(a) => metrics(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
