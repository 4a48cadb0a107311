//! Multi-class training loop, checkpoints and resume.
//!
//! The backbone is frozen and no augmentation is applied, so features,
//! retrieved priors and patch matrices are computed once per image and
//! reused every epoch. Batch order and embedding noise come from RNG streams
//! derived from `(seed, epoch)` and `(seed, step, sample)`; a run is fully
//! determined by its seed regardless of worker count.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::TensorArchive;
use crate::backbone::{Backbone, MultiScaleFeatureSet};
use crate::config::Config;
use crate::dataset::{self, Sample};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, ParamSet};
use crate::model::{PnptModel, Prepared};
use crate::optim::{clip_global_norm, AdamW};
use crate::pool::{build_pool, compute_global_coding, NormalityPool};

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const NUM_WORKERS_ENV: &str = "PNPT_NUM_WORKERS";

/// Worker cap from `PNPT_NUM_WORKERS`; `None` means rayon's default.
pub fn worker_cap() -> Option<usize> {
    std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

/// Runs `f` on a thread pool limited by `PNPT_NUM_WORKERS`.
pub fn with_workers<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match worker_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed, |acc, &p| mix(acc ^ mix(p)))
}

/// One image after the frozen part of the pipeline.
#[derive(Debug, Clone)]
pub struct Extracted {
    pub features: MultiScaleFeatureSet,
    pub retrieved: usize,
}

/// Loads, preprocesses and extracts features for `samples`, then retrieves
/// each image's prior. Order of the result follows `samples`.
pub fn extract_all(
    backbone: &Backbone,
    pool: &NormalityPool,
    samples: &[Sample],
) -> Result<Vec<Extracted>> {
    with_workers(|| {
        samples
            .par_iter()
            .map(|s| {
                let img = dataset::load_rgb(&s.path)?;
                let features = backbone.extract_features(backbone.preprocess(&img).view())?;
                let retrieved = pool.nearest(&compute_global_coding(&features));
                Ok(Extracted {
                    features,
                    retrieved,
                })
            })
            .collect()
    })
}

/// Builds the pool from the training split of `root`.
pub fn build_pool_from_dir(
    root: &Path,
    backbone: &Backbone,
    cfg: &Config,
) -> Result<NormalityPool> {
    let samples = dataset::train_samples(root, None)?;
    let classes = dataset::list_classes(root)?;
    let images: Vec<Result<(String, ndarray::Array3<f32>)>> = with_workers(|| {
        samples
            .par_iter()
            .map(|s| {
                Ok((
                    s.class.clone(),
                    backbone.preprocess(&dataset::load_rgb(&s.path)?),
                ))
            })
            .collect()
    });
    Ok(build_pool(images, backbone, &classes)?
        .with_metric(cfg.pool.metric, cfg.pool.normalize_codings))
}

pub fn pool_hash(pool: &NormalityPool) -> String {
    hex::encode(Sha256::digest(pool.to_archive().to_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

/// Everything needed to continue or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub config_hash: String,
    pub pool_hash: String,
    pub feature_shapes: Vec<(usize, usize, usize)>,
    pub params: ParamSet<f32>,
    pub optimizer: AdamW<f32>,
    /// Optimizer steps taken; also the position of the RNG streams.
    pub step: u64,
    pub losses: Vec<LossRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    config: Config,
    config_hash: String,
    pool_hash: String,
    feature_shapes: Vec<(usize, usize, usize)>,
    step: u64,
    epoch: usize,
    rng: RngState,
    optimizer_t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    param_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_step: u64,
}

impl Checkpoint {
    pub fn steps_per_epoch(&self, n_samples: usize) -> u64 {
        n_samples.div_ceil(self.config.train.batch_size) as u64
    }

    /// Completed epochs, given the training-set size recorded in the losses
    /// or passed in.
    pub fn epoch(&self, n_samples: usize) -> usize {
        (self.step / self.steps_per_epoch(n_samples).max(1)) as usize
    }

    /// The trained model.
    pub fn model(&self) -> Result<PnptModel<f32>> {
        let mut model = PnptModel::<f32>::new(
            self.config.model(),
            &self.feature_shapes,
            self.config.train.seed,
        )?;
        let template: Vec<(String, (usize, usize))> = model
            .params
            .iter()
            .map(|(_, n, v)| (n.to_string(), v.dim()))
            .collect();
        let got: Vec<(String, (usize, usize))> = self
            .params
            .iter()
            .map(|(_, n, v)| (n.to_string(), v.dim()))
            .collect();
        if template != got {
            let first = template
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.0.clone());
            return Err(Error::Corrupt(format!(
                "checkpoint parameters do not match the configured model (first difference: {})",
                first.unwrap_or_else(|| "parameter count".into())
            )));
        }
        model.params = self.params.clone();
        Ok(model)
    }

    pub fn to_archive(&self) -> TensorArchive {
        let n = self.losses.len();
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            pool_hash: self.pool_hash.clone(),
            feature_shapes: self.feature_shapes.clone(),
            step: self.step,
            epoch: self.losses.last().map_or(0, |l| l.epoch),
            rng: RngState {
                seed: self.config.train.seed,
                next_step: self.step,
            },
            optimizer_t: self.optimizer.t,
            beta1: self.optimizer.config.beta1,
            beta2: self.optimizer.config.beta2,
            eps: self.optimizer.config.eps,
            param_names: self.params.iter().map(|(_, n, _)| n.to_string()).collect(),
        };
        let mut a = TensorArchive::new(CHECKPOINT_KIND)
            .with_metadata(serde_json::to_value(meta).expect("meta"));
        for (i, (_, name, v)) in self.params.iter().enumerate() {
            a.insert_f32(format!("param/{name}"), v);
            a.insert_f32(format!("adam.m/{name}"), &self.optimizer.m[i]);
            a.insert_f32(format!("adam.v/{name}"), &self.optimizer.v[i]);
        }
        let log = Array2::from_shape_fn((n, 3), |(r, c)| {
            let l = &self.losses[r];
            [l.step as f64, l.epoch as f64, l.loss][c]
        });
        a.insert_f64("loss_log", &log);
        a
    }

    pub fn from_archive(a: TensorArchive) -> Result<Self> {
        let a = a.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = serde_json::from_value(a.metadata.clone())
            .map_err(|e| Error::Corrupt(format!("checkpoint metadata: {e}")))?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: meta.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut params = ParamSet::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for name in &meta.param_names {
            let p = a.array2_f32(&format!("param/{name}"))?;
            let mm = a.array2_f32(&format!("adam.m/{name}"))?;
            let vv = a.array2_f32(&format!("adam.v/{name}"))?;
            if mm.dim() != p.dim() || vv.dim() != p.dim() {
                return Err(Error::Corrupt(format!(
                    "optimizer state shape mismatch for {name}"
                )));
            }
            params.add(name.clone(), p);
            m.push(mm);
            v.push(vv);
        }
        let log = a.array2_f64("loss_log")?;
        if log.ncols() != 3 {
            return Err(Error::Corrupt("loss_log must have three columns".into()));
        }
        let losses = log
            .rows()
            .into_iter()
            .map(|r| LossRecord {
                step: r[0] as u64,
                epoch: r[1] as usize,
                loss: r[2],
            })
            .collect();
        let mut adam_cfg = meta.config.train.adamw();
        adam_cfg.beta1 = meta.beta1;
        adam_cfg.beta2 = meta.beta2;
        adam_cfg.eps = meta.eps;
        Ok(Self {
            config: meta.config,
            config_hash: meta.config_hash,
            pool_hash: meta.pool_hash,
            feature_shapes: meta.feature_shapes,
            params,
            optimizer: AdamW {
                config: adam_cfg,
                m,
                v,
                t: meta.optimizer_t,
            },
            step: meta.step,
            losses,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_archive().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(TensorArchive::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(TensorArchive::read(path)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `checkpoint.pnpt` and `loss.csv`; nothing is written
    /// when unset.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many total optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
}

/// Cached, ready-to-train samples.
pub struct TrainSet {
    pub samples: Vec<Prepared<f32>>,
    pub classes: Vec<String>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Runs the frozen pipeline over the training split and prepares patch
/// matrices for `model`.
pub fn prepare_train_set(
    root: &Path,
    backbone: &Backbone,
    pool: &NormalityPool,
    model: &PnptModel<f32>,
) -> Result<TrainSet> {
    let classes = dataset::list_classes(root)?;
    if classes != pool.classes {
        return Err(Error::ConfigMismatch {
            expected: format!("pool classes {:?}", pool.classes),
            found: format!("dataset classes {classes:?}"),
        });
    }
    if pool.backbone_fingerprint != backbone.fingerprint() {
        return Err(Error::ConfigMismatch {
            expected: format!("backbone {}", pool.backbone_fingerprint),
            found: format!("backbone {}", backbone.fingerprint()),
        });
    }
    let samples = dataset::train_samples(root, None)?;
    let extracted = extract_all(backbone, pool, &samples)?;
    let prepared = extracted
        .iter()
        .map(|e| model.prepare(&e.features, &pool.prototype_features[e.retrieved]))
        .collect::<Result<_>>()?;
    Ok(TrainSet {
        samples: prepared,
        classes,
    })
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
        seed,
        1,
        epoch as u64,
    ])));
    order
}

/// Loss and gradients for one sample.
fn sample_step(
    model: &PnptModel<f32>,
    sample: &Prepared<f32>,
    seed: u64,
    step: u64,
    index: usize,
) -> Result<(f64, Gradients<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 2, step, index as u64]));
    let mut g = Graph::new(&model.params);
    let out = model.forward(&mut g, sample, Some(&mut rng))?;
    let loss = model.loss(&mut g, sample, &out);
    Ok((g.scalar(loss) as f64, g.backward(loss)))
}

/// One optimizer step on the batch at global `step`. Returns the mean loss.
pub fn train_step(
    model: &mut PnptModel<f32>,
    optimizer: &mut AdamW<f32>,
    data: &TrainSet,
    cfg: &Config,
    step: u64,
) -> Result<f64> {
    let n = data.len();
    let b = cfg.train.batch_size;
    let spe = n.div_ceil(b) as u64;
    let epoch = (step / spe) as usize;
    let pos = (step % spe) as usize;
    let order = epoch_order(cfg.train.seed, epoch, n);
    let batch = &order[pos * b..((pos + 1) * b).min(n)];
    let results: Vec<Result<(f64, Gradients<f32>)>> = {
        let m = &*model;
        with_workers(|| {
            batch
                .par_iter()
                .map(|&i| sample_step(m, &data.samples[i], cfg.train.seed, step, i))
                .collect()
        })
    };
    let mut total = Gradients::zeros_like(&model.params);
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g);
    }
    let k = batch.len() as f32;
    loss /= batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(step));
    }
    total.scale(1.0 / k);
    clip_global_norm(&mut total, cfg.train.grad_clip);
    optimizer.step(&mut model.params, &total);
    Ok(loss)
}

fn write_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "step,epoch,loss")?;
    for l in losses {
        writeln!(f, "{},{},{}", l.step, l.epoch, l.loss)?;
    }
    f.flush()?;
    Ok(())
}

/// Starts a fresh run.
pub fn train(
    cfg: &Config,
    root: &Path,
    pool: &NormalityPool,
    opts: &TrainOptions,
) -> Result<Checkpoint> {
    let backbone = Backbone::load(&cfg.backbone.spec()?)?;
    let model = PnptModel::<f32>::new(
        cfg.model(),
        &backbone.spec().output_shapes(),
        cfg.train.seed,
    )?;
    let optimizer = AdamW::new(cfg.train.adamw(), &model.params);
    let ckpt = Checkpoint {
        config: cfg.clone(),
        config_hash: cfg.train_hash(),
        pool_hash: pool_hash(pool),
        feature_shapes: model.feature_shapes.clone(),
        params: model.params.clone(),
        optimizer,
        step: 0,
        losses: Vec::new(),
    };
    run(ckpt, &backbone, root, pool, opts)
}

/// Continues `ckpt` under `cfg`. The config may differ from the snapshot only
/// in `train.epochs`, `train.checkpoint_every` and sections that do not
/// affect training.
pub fn resume(
    ckpt: Checkpoint,
    cfg: &Config,
    root: &Path,
    pool: &NormalityPool,
    opts: &TrainOptions,
) -> Result<Checkpoint> {
    let hash = cfg.train_hash();
    if hash != ckpt.config_hash {
        return Err(Error::ConfigMismatch {
            expected: ckpt.config_hash.clone(),
            found: hash,
        });
    }
    let ph = pool_hash(pool);
    if ph != ckpt.pool_hash {
        return Err(Error::ConfigMismatch {
            expected: format!("pool {}", ckpt.pool_hash),
            found: format!("pool {ph}"),
        });
    }
    let mut ckpt = ckpt;
    ckpt.config = cfg.clone();
    let backbone = Backbone::load(&cfg.backbone.spec()?)?;
    run(ckpt, &backbone, root, pool, opts)
}

fn run(
    mut ckpt: Checkpoint,
    backbone: &Backbone,
    root: &Path,
    pool: &NormalityPool,
    opts: &TrainOptions,
) -> Result<Checkpoint> {
    let cfg = ckpt.config.clone();
    let mut model = ckpt.model()?;
    let data = prepare_train_set(root, backbone, pool, &model)?;
    let spe = ckpt.steps_per_epoch(data.len());
    let end = (cfg.train.epochs as u64 * spe).min(opts.max_steps.unwrap_or(u64::MAX));
    if ckpt.step >= end {
        return Ok(ckpt);
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut optimizer = ckpt.optimizer.clone();
    info!(
        "training {} samples, {} steps per epoch, steps {}..{}",
        data.len(),
        spe,
        ckpt.step,
        end
    );
    while ckpt.step < end {
        let step = ckpt.step;
        let loss = train_step(&mut model, &mut optimizer, &data, &cfg, step)?;
        let epoch = (step / spe) as usize;
        ckpt.losses.push(LossRecord { step, epoch, loss });
        ckpt.step += 1;
        let epoch_done = ckpt.step.is_multiple_of(spe);
        if epoch_done {
            info!("epoch {} loss {:.5}", epoch + 1, loss);
        }
        let periodic = cfg.train.checkpoint_every > 0
            && epoch_done
            && (epoch + 1).is_multiple_of(cfg.train.checkpoint_every);
        if periodic && ckpt.step < end {
            ckpt.params = model.params.clone();
            ckpt.optimizer = optimizer.clone();
            write_outputs(&ckpt, opts)?;
        }
    }
    ckpt.params = model.params;
    ckpt.optimizer = optimizer;
    write_outputs(&ckpt, opts)?;
    Ok(ckpt)
}

fn write_outputs(ckpt: &Checkpoint, opts: &TrainOptions) -> Result<()> {
    if let Some(dir) = &opts.out_dir {
        ckpt.save(&dir.join("checkpoint.pnpt"))?;
        write_loss_csv(&dir.join("loss.csv"), &ckpt.losses)?;
    }
    Ok(())
}
