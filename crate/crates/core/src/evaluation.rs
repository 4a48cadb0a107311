//! Inference, AUROC and dataset-level reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::backbone::{Backbone, MultiScaleFeatureSet};
use crate::config::Config;
use crate::dataset::{self, Sample};
use crate::error::{Error, Result};
use crate::graph::cosine_distance;
use crate::model::{PnptModel, Reconstruction};
use crate::objective::{AnomalyResult, FusionWeights, ScoreConfig};
use crate::pool::{compute_global_coding, NormalityPool};
use crate::training::{with_workers, Checkpoint};

pub const MAP_KIND: &str = "anomaly_map";

/// Rank-based AUROC (Mann–Whitney U with midranks for ties).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric {
            site: "auroc scores",
            layer: 0,
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuroc);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the midrank keeps everything integral
    let mut pos_rank2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u128;
        for &k in &idx[i..=j] {
            if labels[k] {
                pos_rank2 += rank2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    // 2U = 2·R⁺ − n⁺(n⁺+1)
    let u2 = pos_rank2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Quadratic reference: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedAuroc);
    }
    let mut twice: u128 = 0;
    for &p in &pos {
        for &n in &neg {
            twice += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    Ok(twice as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64)
}

/// Result of running one image through the full inference path.
#[derive(Debug, Clone)]
pub struct Inference {
    pub retrieved: usize,
    pub result: AnomalyResult,
    pub reconstruction: Reconstruction,
}

/// Backbone, pool and trained model bundled for inference.
pub struct Detector {
    pub backbone: Backbone,
    pub pool: NormalityPool,
    pub model: PnptModel<f32>,
    pub fusion: FusionWeights,
    pub score: ScoreConfig,
}

impl Detector {
    pub fn new(ckpt: &Checkpoint, pool: NormalityPool) -> Result<Self> {
        Self::with_config(ckpt, pool, &ckpt.config)
    }

    /// Uses the checkpoint's weights with scoring settings from `cfg`.
    pub fn with_config(ckpt: &Checkpoint, pool: NormalityPool, cfg: &Config) -> Result<Self> {
        let backbone = Backbone::load(&ckpt.config.backbone.spec()?)?;
        if pool.backbone_fingerprint != backbone.fingerprint() {
            return Err(Error::ConfigMismatch {
                expected: format!("backbone {}", backbone.fingerprint()),
                found: format!("pool built with backbone {}", pool.backbone_fingerprint),
            });
        }
        let model = ckpt.model()?;
        Ok(Self {
            backbone,
            pool,
            model,
            fusion: cfg.fusion,
            score: cfg.score,
        })
    }

    pub fn input_size(&self) -> usize {
        self.backbone.spec().input_size
    }

    /// Number of scales summed into the pixel map.
    pub fn active_scales(&self) -> usize {
        self.model
            .config
            .active_scales(self.model.feature_shapes.len())
            .len()
    }

    pub fn features(&self, img: &RgbImage) -> Result<MultiScaleFeatureSet> {
        self.backbone
            .extract_features(self.backbone.preprocess(img).view())
    }

    /// Inference with an explicit prior class.
    pub fn infer_with_prior(
        &self,
        features: &MultiScaleFeatureSet,
        class: usize,
    ) -> Result<Inference> {
        let reconstruction = self
            .model
            .reconstruct(features, &self.pool.prototype_features[class])?;
        let result = reconstruction.score(self.fusion, self.input_size(), &self.score)?;
        Ok(Inference {
            retrieved: class,
            result,
            reconstruction,
        })
    }

    pub fn infer_features(&self, features: &MultiScaleFeatureSet) -> Result<Inference> {
        let k = self.pool.nearest(&compute_global_coding(features));
        self.infer_with_prior(features, k)
    }

    pub fn infer(&self, img: &RgbImage) -> Result<Inference> {
        self.infer_features(&self.features(img)?)
    }
}

/// 16-bit grayscale rendering of a map: `round(clamp(v / max_value, 0, 1) · 65535)`.
pub fn map_to_png16(map: ArrayView2<f32>, max_value: f32) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let (h, w) = map.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = (map[[y as usize, x as usize]] / max_value).clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_score: f32,
    pub class_id_retrieved: String,
    /// Upper end of the PNG's affine rule (`2 ×` number of scales).
    pub map_max_value: f32,
}

/// Writes `<stem>.png` (16-bit map), `<stem>.map` (tensor archive holding the
/// raw `f32` map) and `<stem>.json`.
pub fn export_result(
    result: &AnomalyResult,
    retrieved: &str,
    num_scales: usize,
    dir: &Path,
    stem: &str,
) -> Result<ScoreRecord> {
    fs::create_dir_all(dir)?;
    let max_value = 2.0 * num_scales as f32;
    map_to_png16(result.pixel_map.view(), max_value)
        .save_with_format(dir.join(format!("{stem}.png")), image::ImageFormat::Png)?;
    let mut a = TensorArchive::new(MAP_KIND)
        .with_metadata(serde_json::json!({ "image_score": result.image_score }));
    a.insert_f32("pixel_map", &result.pixel_map);
    a.write(&dir.join(format!("{stem}.map")))?;
    let record = ScoreRecord {
        image_score: result.image_score,
        class_id_retrieved: retrieved.to_string(),
        map_max_value: max_value,
    };
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_vec_pretty(&record)?,
    )?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Path relative to the dataset root.
    pub path: String,
    pub class: String,
    pub defect: Option<String>,
    pub retrieved_class: String,
    pub image_score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub n_normal: usize,
    pub n_anomalous: usize,
    /// Fraction of this class's defect-free test images retrieved as this class.
    pub retrieval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub images: usize,
    pub seconds: f64,
    pub images_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Unweighted mean over classes with a defined value.
    pub mean_image_auroc: Option<f64>,
    pub mean_pixel_auroc: Option<f64>,
    pub retrieval_accuracy: Option<f64>,
    pub records: Vec<ImageRecord>,
    /// Excluded from the written report files so they stay reproducible.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub runtime: Option<RuntimeStats>,
}

/// Anything that turns a test sample into a map and a retrieved class.
pub trait Scorer: Sync {
    fn output_size(&self) -> usize;
    fn class_name(&self, k: usize) -> String;
    fn score_sample(&self, sample: &Sample) -> Result<(AnomalyResult, usize)>;
}

impl Scorer for Detector {
    fn output_size(&self) -> usize {
        self.input_size()
    }

    fn class_name(&self, k: usize) -> String {
        self.pool.classes[k].clone()
    }

    fn score_sample(&self, sample: &Sample) -> Result<(AnomalyResult, usize)> {
        let inf = self.infer(&dataset::load_rgb(&sample.path)?)?;
        Ok((inf.result, inf.retrieved))
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub class: Option<String>,
    /// Writes `report.csv`, `classes.csv`, `report.json` and per-image maps.
    pub out_dir: Option<PathBuf>,
    /// Number of scales in the map's affine PNG rule; 3 when unset.
    pub map_scales: Option<usize>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates `scorer` on the test split of `root`.
pub fn evaluate_with<S: Scorer>(scorer: &S, root: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let start = Instant::now();
    let samples = dataset::test_samples(root, opts.class.as_deref())?;
    let size = scorer.output_size();
    let scored: Vec<Result<(AnomalyResult, usize, Array2<bool>)>> = with_workers(|| {
        samples
            .par_iter()
            .map(|s| {
                let (r, k) = scorer.score_sample(s)?;
                Ok((r, k, dataset::load_mask(s, size)?))
            })
            .collect()
    });
    let mut by_class: BTreeMap<String, Vec<(usize, AnomalyResult, usize, Array2<bool>)>> =
        BTreeMap::new();
    let mut records = Vec::with_capacity(samples.len());
    for (i, r) in scored.into_iter().enumerate() {
        let (result, k, mask) = r?;
        let s = &samples[i];
        records.push(ImageRecord {
            path: s
                .path
                .strip_prefix(root)
                .unwrap_or(&s.path)
                .to_string_lossy()
                .replace('\\', "/"),
            class: s.class.clone(),
            defect: s.defect.clone(),
            retrieved_class: scorer.class_name(k),
            image_score: result.image_score,
        });
        if let Some(dir) = &opts.out_dir {
            let rel = Path::new(&records[i].path);
            let sub = dir.join("maps").join(rel.parent().unwrap_or(Path::new("")));
            let stem = rel.file_stem().unwrap().to_string_lossy();
            export_result(
                &result,
                &records[i].retrieved_class,
                opts.map_scales.unwrap_or(3),
                &sub,
                &stem,
            )?;
        }
        by_class
            .entry(s.class.clone())
            .or_default()
            .push((i, result, k, mask));
    }
    let mut classes = Vec::new();
    for (class, items) in &by_class {
        let scores: Vec<f64> = items
            .iter()
            .map(|(_, r, _, _)| r.image_score as f64)
            .collect();
        let labels: Vec<bool> = items
            .iter()
            .map(|(i, ..)| samples[*i].is_anomalous())
            .collect();
        let image_auroc = auroc(&scores, &labels).ok();
        let mut px_scores = Vec::new();
        let mut px_labels = Vec::new();
        for (_, r, _, m) in items {
            px_scores.extend(r.pixel_map.iter().map(|&v| v as f64));
            px_labels.extend(m.iter().copied());
        }
        let pixel_auroc = auroc(&px_scores, &px_labels).ok();
        let normals: Vec<_> = items
            .iter()
            .filter(|(i, ..)| !samples[*i].is_anomalous())
            .collect();
        let correct = normals
            .iter()
            .filter(|(_, _, k, _)| &scorer.class_name(*k) == class)
            .count();
        classes.push(ClassReport {
            class: class.clone(),
            image_auroc,
            pixel_auroc,
            n_normal: normals.len(),
            n_anomalous: items.len() - normals.len(),
            retrieval_accuracy: (!normals.is_empty())
                .then(|| correct as f64 / normals.len() as f64),
        });
    }
    let normal_records: Vec<_> = records.iter().filter(|r| r.defect.is_none()).collect();
    let retrieval_accuracy = (!normal_records.is_empty()).then(|| {
        normal_records
            .iter()
            .filter(|r| r.class == r.retrieved_class)
            .count() as f64
            / normal_records.len() as f64
    });
    let seconds = start.elapsed().as_secs_f64();
    let report = EvalReport {
        mean_image_auroc: mean(classes.iter().filter_map(|c| c.image_auroc)),
        mean_pixel_auroc: mean(classes.iter().filter_map(|c| c.pixel_auroc)),
        classes,
        retrieval_accuracy,
        records,
        runtime: Some(RuntimeStats {
            images: samples.len(),
            seconds,
            images_per_second: samples.len() as f64 / seconds.max(1e-9),
        }),
    };
    if let Some(dir) = &opts.out_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

/// Runs the trained model over the test split of `root`.
pub fn evaluate_dataset(
    ckpt: &Checkpoint,
    pool: &NormalityPool,
    root: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let detector = Detector::new(ckpt, pool.clone())?;
    let opts = EvalOptions {
        map_scales: Some(detector.active_scales()),
        ..opts.clone()
    };
    evaluate_with(&detector, root, &opts)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// Per-image CSV, columns `path,class,defect,retrieved_class,image_score,label`.
pub fn records_csv(report: &EvalReport) -> String {
    let mut s = String::from("path,class,defect,retrieved_class,image_score,label\n");
    for r in &report.records {
        let d = r.defect.as_deref().unwrap_or("good");
        s.push_str(&format!(
            "{},{},{},{},{:.8},{}\n",
            r.path,
            r.class,
            d,
            r.retrieved_class,
            r.image_score,
            u8::from(r.defect.is_some())
        ));
    }
    s
}

/// Per-class CSV, columns `class,image_auroc,pixel_auroc,n_normal,n_anomalous,retrieval_accuracy`,
/// followed by a `mean` row.
pub fn classes_csv(report: &EvalReport) -> String {
    let mut s =
        String::from("class,image_auroc,pixel_auroc,n_normal,n_anomalous,retrieval_accuracy\n");
    for c in &report.classes {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.class,
            fmt_opt(c.image_auroc),
            fmt_opt(c.pixel_auroc),
            c.n_normal,
            c.n_anomalous,
            fmt_opt(c.retrieval_accuracy)
        ));
    }
    let (n, a) = report
        .classes
        .iter()
        .fold((0, 0), |(n, a), c| (n + c.n_normal, a + c.n_anomalous));
    s.push_str(&format!(
        "mean,{},{},{n},{a},{}\n",
        fmt_opt(report.mean_image_auroc),
        fmt_opt(report.mean_pixel_auroc),
        fmt_opt(report.retrieval_accuracy)
    ));
    s
}

pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), records_csv(report))?;
    fs::write(dir.join("classes.csv"), classes_csv(report))?;
    let stable = EvalReport {
        runtime: None,
        ..report.clone()
    };
    let mut f = fs::File::create(dir.join("report.json"))?;
    f.write_all(&serde_json::to_vec_pretty(&stable)?)?;
    Ok(())
}

/// `Σ_i (1 − cos(vec(a⁽ⁱ⁾), vec(b⁽ⁱ⁾)))` over scales.
pub fn feature_distance(a: &MultiScaleFeatureSet, b: &MultiScaleFeatureSet) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.scales
        .iter()
        .zip(&b.scales)
        .map(|(x, y)| {
            let x = x
                .mapv(f64::from)
                .into_shape_with_order((1, x.len()))
                .unwrap();
            let y = y
                .mapv(f64::from)
                .into_shape_with_order((1, y.len()))
                .unwrap();
            cosine_distance(x.view(), y.view())
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapRecord {
    pub class: String,
    pub retrieved_class: String,
    pub forced_class: String,
    /// Prior-branch reconstruction vs. the correct prototype, retrieved prior.
    pub d_correct: f64,
    /// Same distance with the forced prior.
    pub d_forced: f64,
    /// Distance between the two self-branch reconstructions.
    pub self_drift: f64,
    /// Distance between the two prior-branch reconstructions.
    pub prior_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub records: Vec<SwapRecord>,
    pub mean_d_correct: f64,
    pub mean_d_forced: f64,
    pub mean_self_drift: f64,
    pub mean_prior_change: f64,
    /// Fraction of images with `d_forced > d_correct`.
    pub fraction_forced_farther: f64,
}

/// Runs each image with its retrieved prior and again with `forced_class`.
/// `images` pairs each image's features with its true class index.
pub fn prompt_swap_diagnostic(
    detector: &Detector,
    images: &[(MultiScaleFeatureSet, usize)],
    forced_class: usize,
) -> Result<SwapReport> {
    if forced_class >= detector.pool.len() {
        return Err(Error::config(format!(
            "forced class {forced_class} not in pool of {}",
            detector.pool.len()
        )));
    }
    if !detector.model.is_dual() {
        return Err(Error::config(
            "prompt swap needs a model with a prior branch",
        ));
    }
    let records: Vec<Result<SwapRecord>> = with_workers(|| {
        images
            .par_iter()
            .map(|(features, truth)| {
                let a = detector.infer_features(features)?;
                let b = detector.infer_with_prior(features, forced_class)?;
                let pa = a.reconstruction.prior.as_ref().expect("dual model");
                let pb = b.reconstruction.prior.as_ref().expect("dual model");
                let target = detector
                    .model
                    .select_scales(&detector.pool.prototype_features[*truth])?;
                Ok(SwapRecord {
                    class: detector.pool.classes[*truth].clone(),
                    retrieved_class: detector.pool.classes[a.retrieved].clone(),
                    forced_class: detector.pool.classes[forced_class].clone(),
                    d_correct: feature_distance(pa, &target)?,
                    d_forced: feature_distance(pb, &target)?,
                    self_drift: feature_distance(&a.reconstruction.own, &b.reconstruction.own)?,
                    prior_change: feature_distance(pa, pb)?,
                })
            })
            .collect()
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let n = records.len().max(1) as f64;
    let avg = |f: fn(&SwapRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(SwapReport {
        mean_d_correct: avg(|r| r.d_correct),
        mean_d_forced: avg(|r| r.d_forced),
        mean_self_drift: avg(|r| r.self_drift),
        mean_prior_change: avg(|r| r.prior_change),
        fraction_forced_farther: records.iter().filter(|r| r.d_forced > r.d_correct).count() as f64
            / n,
        records,
    })
}
