//! Command-line entry point: synthetic data generation, training,
//! evaluation, indexing and search.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure
//! (NaN loss or parameters). Progress goes to stderr; machine-readable
//! output goes to files only.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gridseek::data::{gen_synthetic, load_dataset, parse_config, Dataset, Split, TrainConfig};
use gridseek::error::Error as CoreError;
use gridseek::evalkit::{build_eval_crops, sga, topk_accuracy};
use gridseek::imops::{crop, decode_image, resize, CropSpec, Interpolation};
use gridseek::index::{emit_report, RetrievalIndex};
use gridseek::net::Model;
use gridseek::train::train;

#[derive(Parser)]
#[command(
    name = "gridseek",
    version,
    about = "Self-supervised patch localization and image search",
    disable_help_subcommand = true
)]
struct Cli {
    /// Worker threads for evaluation/indexing (falls back to GRIDSEEK_THREADS,
    /// then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic shape dataset.
    GenSynthetic(GenSyntheticArgs),
    /// Train a model; writes a checkpoint and per-epoch metrics.
    Train(TrainArgs),
    /// Similarity Grid Accuracy over a directory of images.
    EvalSga(EvalSgaArgs),
    /// Top-k retrieval accuracy over a directory of images.
    EvalTopk(EvalTopkArgs),
    /// Build a persistent retrieval index.
    Index(IndexArgs),
    /// Query an index with an image crop and write an HTML report.
    Search(SearchArgs),
}

#[derive(Args)]
struct GenSyntheticArgs {
    /// Number of images.
    #[arg(long)]
    n: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (key=value lines).
    #[arg(long)]
    config: PathBuf,
    /// Directory of training images.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out_ckpt: PathBuf,
    /// Metrics output (JSON lines, one EpochStats per epoch).
    #[arg(long)]
    metrics: PathBuf,
}

#[derive(Args)]
struct EvalSgaArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Evaluation crops to draw (default: one per image).
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct EvalTopkArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated k values.
    #[arg(long, default_value = "1,5,10")]
    k: String,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_index: PathBuf,
    /// Optional run configuration (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Query image file.
    #[arg(long)]
    image: PathBuf,
    /// Crop rectangle `x0,y0,w,h` in pixels of the query image.
    #[arg(long)]
    crop: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// HTML report output path.
    #[arg(long)]
    report: PathBuf,
    /// Optional run configuration (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl fmt::Display) -> Self {
        Failure {
            code: 1,
            msg: msg.to_string(),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match e {
            CoreError::NonFinite(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    let threads = cli.threads.or_else(|| {
        std::env::var("GRIDSEEK_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
        {
            eprintln!("warning: could not configure thread pool: {e}");
        }
    }

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn load_config_or_default(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    match path {
        Some(p) => Ok(parse_config(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn load_model(ckpt: &Path, cfg: &TrainConfig) -> Result<Model<f32>, Failure> {
    Ok(Model::load(ckpt, cfg.variant, cfg.net_config())?)
}

/// One evaluation crop per image (or `samples` crops cycling the dataset),
/// drawn from the config's evaluation seed.
fn eval_crops_for(
    ds: &Dataset,
    cfg: &TrainConfig,
    samples: Option<usize>,
) -> Result<Vec<(gridseek::imops::Image, CropSpec)>, Failure> {
    let n = samples.unwrap_or(ds.len());
    Ok(build_eval_crops(ds, n, cfg.eval_seed())?)
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenSynthetic(args) => {
            let ds = gen_synthetic(args.n, args.size, args.seed, &args.out)?;
            eprintln!(
                "generated {} images of {}x{} under {}",
                ds.len(),
                args.size,
                args.size,
                args.out.display()
            );
            Ok(())
        }
        Command::Train(args) => {
            let cfg = parse_config(&args.config)?;
            let (train_ds, eval_ds) = load_dataset(&args.data, cfg.split_fraction, cfg.seed)?;
            eprintln!(
                "training variant M{} on {} images ({} held out), {} epochs",
                cfg.variant,
                train_ds.len(),
                eval_ds.len(),
                cfg.epochs
            );
            // Truncate, then append one line per epoch as training runs.
            std::fs::write(&args.metrics, "").map_err(|e| CoreError::io(&args.metrics, e))?;
            let metrics_path = args.metrics.clone();
            let (model, stats) = train(&cfg, &train_ds, |es| {
                eprintln!(
                    "epoch {}: loss {:.5} pos_sim {:.4} neg_sim {:.4}",
                    es.epoch, es.avg_loss, es.avg_positive_sim, es.avg_negative_sim
                );
                if let Ok(mut f) = OpenOptions::new().append(true).open(&metrics_path) {
                    let _ = writeln!(f, "{}", es.to_json_line());
                }
            })?;
            model.save(&args.out_ckpt)?;

            let summary_path = args.metrics.with_extension("summary.json");
            let summary = serde_json::json!({
                "epochs": stats.len(),
                "first": stats.first(),
                "final": stats.last(),
            });
            std::fs::write(
                &summary_path,
                serde_json::to_string_pretty(&summary).expect("serializes"),
            )
            .map_err(|e| CoreError::io(&summary_path, e))?;
            eprintln!("checkpoint written to {}", args.out_ckpt.display());
            Ok(())
        }
        Command::EvalSga(args) => {
            let cfg = parse_config(&args.config)?;
            let model = load_model(&args.ckpt, &cfg)?;
            let ds = Dataset::from_dir(&args.data, Split::Eval)?;
            let eval_set = eval_crops_for(&ds, &cfg, args.samples)?;
            let result = sga(&model, &eval_set)?;
            result.write_json(&args.out)?;
            eprintln!(
                "sga over {} samples: {:?}",
                result.n_samples,
                result
                    .per_level
                    .iter()
                    .map(|v| (v * 1e4).round() / 1e4)
                    .collect::<Vec<_>>()
            );
            Ok(())
        }
        Command::EvalTopk(args) => {
            let cfg = parse_config(&args.config)?;
            let model = load_model(&args.ckpt, &cfg)?;
            let ds = Dataset::from_dir(&args.data, Split::Eval)?;
            let ks = parse_k_list(&args.k)?;
            let (index, failures) = RetrievalIndex::build(&model, &ds)?;
            report_failures(&failures);
            let queries: Vec<CropSpec> = eval_crops_for(&ds, &cfg, None)?
                .into_iter()
                .map(|(_, spec)| spec)
                .collect();
            let result = topk_accuracy(&model, &index, &ds, &queries, &ks)?;
            result.write_json(&args.out)?;
            eprintln!(
                "top-k over {} queries: {:?} -> {:?}",
                queries.len(),
                result.k_values,
                result
                    .accuracy
                    .iter()
                    .map(|v| (v * 1e4).round() / 1e4)
                    .collect::<Vec<_>>()
            );
            Ok(())
        }
        Command::Index(args) => {
            let cfg = load_config_or_default(args.config.as_deref())?;
            let model = load_model(&args.ckpt, &cfg)?;
            let ds = Dataset::from_dir(&args.data, Split::Eval)?;
            let (index, failures) = RetrievalIndex::build(&model, &ds)?;
            report_failures(&failures);
            index.save(&args.out_index)?;
            eprintln!(
                "indexed {} images ({} cells each at defaults) -> {}",
                index.len(),
                index.entries().first().map(|e| e.cells().len()).unwrap_or(0),
                args.out_index.display()
            );
            Ok(())
        }
        Command::Search(args) => {
            let cfg = load_config_or_default(args.config.as_deref())?;
            let model = load_model(&args.ckpt, &cfg)?;
            let index = RetrievalIndex::load(&args.index)?;
            if args.k == 0 {
                return Err(Failure::usage("--k must be at least 1"));
            }
            let img = decode_image(&args.image)?;
            let spec = parse_crop_arg(&args.crop, &args.image)?;
            spec.validate_against(&img)
                .map_err(|e| Failure::usage(format!("--crop: {e}")))?;
            let crop_img = resize(
                &crop(&img, &spec)?,
                model.cfg.crop_size,
                model.cfg.crop_size,
                Interpolation::Bilinear,
            )?;
            let (_, z) = model.encode_crop(&crop_img)?;
            let results = index.query(z.data(), args.k)?;
            for (i, r) in results.iter().enumerate() {
                eprintln!(
                    "#{:<3} {}  score {:.4}  cell L{} ({}, {})",
                    i + 1,
                    r.image_id,
                    r.score,
                    r.best_cell.level,
                    r.best_cell.row,
                    r.best_cell.col
                );
            }
            emit_report(&crop_img, &results, &index, &args.report)?;
            eprintln!("report written to {}", args.report.display());
            Ok(())
        }
    }
}

fn report_failures(failures: &[(String, String)]) {
    for (path, err) in failures {
        eprintln!("skipped {path}: {err}");
    }
}

fn parse_k_list(s: &str) -> Result<Vec<usize>, Failure> {
    let ks: Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
    match ks {
        Ok(ks) if !ks.is_empty() && ks.iter().all(|&k| k > 0) => Ok(ks),
        _ => Err(Failure::usage(format!(
            "--k: expected comma-separated positive integers, got {s:?}"
        ))),
    }
}

fn parse_crop_arg(s: &str, image: &Path) -> Result<CropSpec, Failure> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Failure::usage(format!(
            "--crop: expected x0,y0,w,h, got {s:?}"
        )));
    }
    let nums: Result<Vec<usize>, _> = parts.iter().map(|p| p.parse::<usize>()).collect();
    let nums = nums.map_err(|e| Failure::usage(format!("--crop: {e}")))?;
    Ok(CropSpec {
        x0: nums[0],
        y0: nums[1],
        w: nums[2],
        h: nums[3],
        source_id: image
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    })
}
