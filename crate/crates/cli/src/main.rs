use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use pnpt::backbone::Backbone;
use pnpt::config::Config;
use pnpt::datagen::generate_dataset;
use pnpt::dataset;
use pnpt::evaluation::{
    classes_csv, evaluate_with, export_result, prompt_swap_diagnostic, Detector, EvalOptions,
};
use pnpt::pool::{bench_retrieval, timings_to_csv, NormalityPool};
use pnpt::training::{self, build_pool_from_dir, Checkpoint, TrainOptions};

#[derive(Parser)]
#[command(
    name = "pnpt",
    version,
    about = "Multi-class anomaly detection with prior normality prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; flags and --set override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print a JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic texture corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Replace the contents of a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Build the class prototype pool from the training split.
    BuildPool {
        #[arg(long)]
        data_root: PathBuf,
        /// Output pool file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; resumes when --checkpoint is given.
    Train {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Output directory for checkpoint.pnpt and loss.csv.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to resume from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate on the test split and write reports.
    Eval {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only evaluate this class.
        #[arg(long)]
        class: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a single image.
    Score {
        image: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for the map (PNG, raw archive) and JSON record.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use this class's prior instead of the retrieved one.
        #[arg(long)]
        class: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Time prototype retrieval against pool size and training-set size.
    BenchRetrieval {
        #[arg(long, value_delimiter = ',', default_value = "15,150")]
        classes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "100,1000")]
        images: Vec<usize>,
        #[arg(long, default_value_t = 112)]
        coding_dim: usize,
        #[arg(long, default_value_t = 20000)]
        queries: usize,
        /// CSV output file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare reconstructions under retrieved and forced priors.
    PromptSwap {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class whose prior is forced on every image.
        #[arg(long)]
        class: String,
        /// Output JSON report file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn config(&self) -> Result<Config> {
        if self.device != "cpu" {
            bail!(
                "device `{}` is not available; only `cpu` is supported",
                self.device
            );
        }
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("train.seed={seed}"));
            overrides.push(format!("synth.seed={seed}"));
        }
        Ok(Config::load(self.config.as_deref(), &overrides)?)
    }
}

fn load_pool(path: &Path, cfg: &Config) -> Result<NormalityPool> {
    let pool =
        NormalityPool::load(path).with_context(|| format!("loading pool {}", path.display()))?;
    Ok(pool.with_metric(cfg.pool.metric, cfg.pool.normalize_codings))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Checkpoint weights with scoring-only settings taken from the command's config.
fn detector(ckpt: &Checkpoint, pool: NormalityPool, common: &Common) -> Result<Detector> {
    let mut cfg = ckpt.config.clone();
    if common.config.is_some() || !common.overrides.is_empty() {
        let user = common.config()?;
        cfg.score = user.score;
        cfg.fusion = user.fusion;
    }
    Ok(Detector::with_config(ckpt, pool, &cfg)?)
}

fn run(cli: Cli) -> Result<(bool, Value)> {
    match cli.command {
        Command::Synth { out, force, common } => {
            let cfg = common.config()?;
            let m = generate_dataset(&cfg.synth, &out, force)?;
            let summary = json!({
                "out": out,
                "files": m.files.len(),
                "classes": cfg.synth.classes.iter().map(|c| c.name.clone()).collect::<Vec<_>>(),
            });
            if !common.json {
                println!("wrote {} images to {}", m.files.len(), out.display());
            }
            Ok((common.json, summary))
        }
        Command::BuildPool {
            data_root,
            out,
            common,
        } => {
            let cfg = common.config()?;
            let backbone = Backbone::load(&cfg.backbone.spec()?)?;
            let pool = build_pool_from_dir(&data_root, &backbone, &cfg)?;
            pool.save(&out)?;
            if !common.json {
                println!(
                    "pool with {} classes written to {}",
                    pool.len(),
                    out.display()
                );
            }
            Ok((
                common.json,
                json!({ "out": out, "classes": pool.classes, "sample_counts": pool.sample_counts }),
            ))
        }
        Command::Train {
            data_root,
            pool,
            out,
            checkpoint,
            common,
        } => {
            let cfg = common.config()?;
            let pool = load_pool(&pool, &cfg)?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                max_steps: None,
            };
            let ckpt = match checkpoint {
                Some(p) => training::resume(load_checkpoint(&p)?, &cfg, &data_root, &pool, &opts)?,
                None => training::train(&cfg, &data_root, &pool, &opts)?,
            };
            let last = ckpt.losses.last().map(|l| l.loss);
            if !common.json {
                println!(
                    "trained to step {}; final loss {:?}; checkpoint in {}",
                    ckpt.step,
                    last,
                    out.display()
                );
            }
            Ok((
                common.json,
                json!({ "checkpoint": out.join("checkpoint.pnpt"), "steps": ckpt.step, "final_loss": last }),
            ))
        }
        Command::Eval {
            data_root,
            pool,
            checkpoint,
            out,
            class,
            common,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let pool = load_pool(&pool, &ckpt.config)?;
            let det = detector(&ckpt, pool, &common)?;
            let opts = EvalOptions {
                class,
                out_dir: out,
                map_scales: Some(det.active_scales()),
            };
            let report = evaluate_with(&det, &data_root, &opts)?;
            if !common.json {
                print!("{}", classes_csv(&report));
            }
            let summary = json!({
                "mean_image_auroc": report.mean_image_auroc,
                "mean_pixel_auroc": report.mean_pixel_auroc,
                "retrieval_accuracy": report.retrieval_accuracy,
                "classes": report.classes,
                "runtime": report.runtime,
            });
            Ok((common.json, summary))
        }
        Command::Score {
            image,
            pool,
            checkpoint,
            out,
            class,
            common,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let pool = load_pool(&pool, &ckpt.config)?;
            let det = detector(&ckpt, pool, &common)?;
            let img = dataset::load_rgb(&image)?;
            let features = det.features(&img)?;
            let inf = match class {
                Some(c) => {
                    let k = det
                        .pool
                        .class_index(&c)
                        .with_context(|| format!("class `{c}` is not in the pool"))?;
                    det.infer_with_prior(&features, k)?
                }
                None => det.infer_features(&features)?,
            };
            let retrieved = det.pool.classes[inf.retrieved].clone();
            if let Some(dir) = &out {
                let stem = image
                    .file_stem()
                    .map_or("image".into(), |s| s.to_string_lossy().into_owned());
                export_result(&inf.result, &retrieved, det.active_scales(), dir, &stem)?;
            }
            if !common.json {
                println!(
                    "{}: score {:.6}, class {}",
                    image.display(),
                    inf.result.image_score,
                    retrieved
                );
            }
            Ok((
                common.json,
                json!({ "image_score": inf.result.image_score, "class_id_retrieved": retrieved }),
            ))
        }
        Command::BenchRetrieval {
            classes,
            images,
            coding_dim,
            queries,
            out,
            common,
        } => {
            let cfg = common.config()?;
            let rows = bench_retrieval(&classes, &images, coding_dim, queries, cfg.train.seed);
            let csv = timings_to_csv(&rows);
            match &out {
                Some(p) => fs::write(p, &csv)?,
                None if !common.json => print!("{csv}"),
                None => {}
            }
            Ok((common.json, json!({ "rows": rows })))
        }
        Command::PromptSwap {
            data_root,
            pool,
            checkpoint,
            class,
            out,
            common,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let pool = load_pool(&pool, &ckpt.config)?;
            let det = detector(&ckpt, pool, &common)?;
            let forced = det
                .pool
                .class_index(&class)
                .with_context(|| format!("class `{class}` is not in the pool"))?;
            let samples: Vec<_> = dataset::test_samples(&data_root, None)?
                .into_iter()
                .filter(|s| !s.is_anomalous() && s.class != class)
                .collect();
            let mut images = Vec::with_capacity(samples.len());
            for s in &samples {
                let truth = det
                    .pool
                    .class_index(&s.class)
                    .with_context(|| format!("class `{}` is not in the pool", s.class))?;
                images.push((det.features(&dataset::load_rgb(&s.path)?)?, truth));
            }
            let report = prompt_swap_diagnostic(&det, &images, forced)?;
            let value = serde_json::to_value(&report)?;
            if let Some(p) = &out {
                fs::write(p, serde_json::to_vec_pretty(&report)?)?;
            }
            if !common.json {
                println!(
                    "images {}: d_correct {:.4}, d_forced {:.4}, self drift {:.4}, prior change {:.4}",
                    report.records.len(),
                    report.mean_d_correct,
                    report.mean_d_forced,
                    report.mean_self_drift,
                    report.mean_prior_change
                );
            }
            Ok((common.json, value))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok((json, summary)) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
