//! `equiplace` — dataset construction, training, encoding, retrieval
//! evaluation, dimensionality sweeps, encoding benchmarks and storage
//! estimation as one reproducible command-line pipeline.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "equiplace",
    version,
    about = "Rotation-equivariant place recognition pipeline"
)]
struct Cli {
    /// Master seed; all randomness derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 = deterministic reference mode; results are
    /// identical at any setting).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// key=value config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and sample a place dataset from it.
    BuildDataset(BuildDatasetArgs),
    /// Train a descriptor model on a dataset manifest.
    Train(TrainArgs),
    /// Encode dataset images into a descriptor store.
    Encode(EncodeArgs),
    /// Evaluate Recall@N of a query store against a database store.
    Eval(EvalArgs),
    /// Recall across descending descriptor dimensionalities.
    SweepDims(SweepArgs),
    /// Per-image encoding latency at batch size 1.
    BenchEncode(BenchArgs),
    /// Descriptor storage needed to cover an area.
    EstimateStorage(EstimateArgs),
}

#[derive(Args)]
struct BuildDatasetArgs {
    /// Output directory for images and manifest.
    #[arg(long)]
    out: PathBuf,
    /// World raster side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Sampling-lattice interval in meters.
    #[arg(long)]
    interval: Option<f64>,
    /// Year variants per place.
    #[arg(long)]
    years: Option<usize>,
    /// Target water coverage of the world in [0,1).
    #[arg(long)]
    water_fraction: Option<f64>,
    /// Circular crop diameter in pixels.
    #[arg(long)]
    diameter_px: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the model, log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Cyclic group order: 1 (plain CNN), 4 or 8.
    #[arg(long)]
    group: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    input_size: Option<usize>,
    /// Stage widths, comma separated (e.g. 8,16).
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    descriptor_dim: Option<usize>,
    /// Spatial pooling: gem | avg.
    #[arg(long)]
    pooling: Option<String>,
    /// Orientation pooling: max | mean.
    #[arg(long)]
    orientation_pool: Option<String>,
    #[arg(long)]
    places_per_batch: Option<usize>,
    #[arg(long)]
    views_per_place: Option<usize>,
    /// Disable rotation augmentation.
    #[arg(long)]
    no_rotate: bool,
    /// Disable appearance jitter.
    #[arg(long)]
    no_appearance: bool,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Resume from a checkpoint model file (.epm with .eps sidecar).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest to encode (one descriptor per place).
    #[arg(long, conflicts_with = "images")]
    manifest: Option<PathBuf>,
    /// Directory of .ppm circular images to encode instead.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Output store file (.epd).
    #[arg(long)]
    out: PathBuf,
    /// Truncate descriptors to this dimension (post-hoc).
    #[arg(long)]
    dim: Option<usize>,
    /// Year variant to encode: first | last | a calendar year.
    #[arg(long, default_value = "first")]
    year: String,
    /// Apply fixed per-place random rotations seeded here (query stores).
    #[arg(long)]
    transform_seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Query descriptor store.
    #[arg(long)]
    queries: PathBuf,
    /// Database descriptor store.
    #[arg(long)]
    db: PathBuf,
    /// Positive criterion: same-place | radius:<m> | window:<n>.
    #[arg(long)]
    criterion: Option<String>,
    /// Manifest providing geo coordinates (radius criterion).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for recall.csv / recall.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    db: PathBuf,
    /// Descending dims, comma separated (e.g. 512,256,128,64,32).
    #[arg(long)]
    dims: String,
    #[arg(long)]
    criterion: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Optional output directory for bench.json / bench.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Area to cover, km^2.
    area_km2: f64,
    /// Ground coverage of one image, km^2.
    km2_per_image: f64,
    /// Descriptor dimensionality.
    dim: usize,
    /// Bytes per descriptor value (2 = half precision).
    bytes_per_value: usize,
    /// Optional output directory for estimate.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_config(cli: &Cli) -> equiplace_core::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs.max(1);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> equiplace_core::Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::BuildDataset(args) => {
            if let Some(v) = args.size {
                cfg.world_size = v;
            }
            if let Some(v) = args.interval {
                cfg.interval_m = v;
            }
            if let Some(v) = args.years {
                cfg.years = v;
            }
            if let Some(v) = args.water_fraction {
                cfg.water_fraction = v;
            }
            if let Some(v) = args.diameter_px {
                cfg.diameter_px = v;
            }
            commands::build_dataset(&cfg, &args.out, cli.force)
        }
        Command::Train(args) => {
            if let Some(v) = args.group {
                cfg.group_order = v;
            }
            if let Some(v) = args.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = args.lr {
                cfg.lr = v;
            }
            if let Some(v) = args.input_size {
                cfg.input_size = v;
            }
            if let Some(v) = &args.widths {
                cfg.set("stage_widths", v)?;
            }
            if let Some(v) = args.blocks {
                cfg.blocks_per_stage = v;
            }
            if let Some(v) = args.descriptor_dim {
                cfg.descriptor_dim = v;
            }
            if let Some(v) = &args.pooling {
                cfg.pooling = v.clone();
            }
            if let Some(v) = &args.orientation_pool {
                cfg.orientation_pool = v.clone();
            }
            if let Some(v) = args.places_per_batch {
                cfg.places_per_batch = v;
            }
            if let Some(v) = args.views_per_place {
                cfg.views_per_place = v;
            }
            if args.no_rotate {
                cfg.augment_rotate = false;
            }
            if args.no_appearance {
                cfg.augment_appearance = false;
            }
            if let Some(v) = args.val_fraction {
                cfg.val_fraction = v;
            }
            if let Some(v) = args.checkpoint_every {
                cfg.checkpoint_every = v;
            }
            commands::train(
                &cfg,
                &args.manifest,
                &args.out,
                args.resume.as_deref(),
                cli.force,
            )
        }
        Command::Encode(args) => commands::encode(
            &cfg,
            &args.model,
            args.manifest.as_deref(),
            args.images.as_deref(),
            &args.out,
            args.dim,
            &args.year,
            args.transform_seed,
            cli.force,
        ),
        Command::Eval(args) => {
            if let Some(v) = &args.criterion {
                cfg.criterion = v.clone();
            }
            commands::eval(
                &cfg,
                &args.queries,
                &args.db,
                args.manifest.as_deref(),
                &args.out,
                cli.force,
            )
        }
        Command::SweepDims(args) => {
            if let Some(v) = &args.criterion {
                cfg.criterion = v.clone();
            }
            commands::sweep_dims(
                &cfg,
                &args.queries,
                &args.db,
                &args.dims,
                args.manifest.as_deref(),
                &args.out,
                cli.force,
            )
        }
        Command::BenchEncode(args) => commands::bench_encode(
            &cfg,
            &args.model,
            &args.manifest,
            args.reps,
            args.warmup,
            args.out.as_deref(),
            cli.force,
        ),
        Command::EstimateStorage(args) => commands::estimate_storage(
            args.area_km2,
            args.km2_per_image,
            args.dim,
            args.bytes_per_value,
            args.out.as_deref(),
            cli.force,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
