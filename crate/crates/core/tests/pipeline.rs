//! Small end-to-end runs: generate, pool, train, resume, evaluate.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use tempfile::TempDir;

use pnpt::backbone::Backbone;
use pnpt::config::Config;
use pnpt::datagen::{generate_dataset, list_tree};
use pnpt::dataset::{self, Sample};
use pnpt::evaluation::{evaluate_dataset, evaluate_with, EvalOptions, Scorer};
use pnpt::objective::AnomalyResult;
use pnpt::pool::NormalityPool;
use pnpt::training::{build_pool_from_dir, resume, train, Checkpoint, TrainOptions};
use pnpt::Error;

const SMALL: &str = r#"
[backbone]
input_size = 64

[attention]
hidden_dim = 24
heads = 4
blocks = 1
semantic_tokens = 2

[train]
epochs = 2
batch_size = 4
learning_rate = 1e-3

[synth]
image_size = 80
n_train = 4
n_test_normal = 3
n_test_anomalous = 3
"#;

struct Setup {
    _dir: TempDir,
    root: PathBuf,
    cfg: Config,
    pool: NormalityPool,
}

fn setup() -> Setup {
    let dir = TempDir::new().unwrap();
    let root = dir.path().join("data");
    let cfg = Config::from_toml_str(SMALL).unwrap();
    generate_dataset(&cfg.synth, &root, false).unwrap();
    let backbone = Backbone::load(&cfg.backbone.spec().unwrap()).unwrap();
    let pool = build_pool_from_dir(&root, &backbone, &cfg).unwrap();
    Setup {
        _dir: dir,
        root,
        cfg,
        pool,
    }
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    list_tree(dir)
        .unwrap()
        .into_iter()
        .map(|p| {
            let bytes = fs::read(dir.join(&p)).unwrap();
            (p, bytes)
        })
        .collect()
}

fn with_epochs(cfg: &Config, epochs: usize) -> Config {
    let mut c = cfg.clone();
    c.train.epochs = epochs;
    c
}

#[test]
fn generation_is_a_function_of_the_spec() {
    let s = setup();
    let other = TempDir::new().unwrap();
    let again = other.path().join("again");
    generate_dataset(&s.cfg.synth, &again, false).unwrap();
    assert_eq!(files(&s.root), files(&again));

    let mut reseeded = s.cfg.synth.clone();
    reseeded.seed += 1;
    let third = other.path().join("third");
    generate_dataset(&reseeded, &third, false).unwrap();
    assert_ne!(files(&s.root), files(&third));
}

#[test]
fn training_descends_and_repeats_exactly() {
    let s = setup();
    let cfg = with_epochs(&s.cfg, 5);
    let a = train(&cfg, &s.root, &s.pool, &TrainOptions::default()).unwrap();
    let b = train(&cfg, &s.root, &s.pool, &TrainOptions::default()).unwrap();
    assert_eq!(a, b);

    // 12 images, batch 4
    assert_eq!(a.step, 15);
    let epoch_mean = |e: usize| {
        let l: Vec<f64> = a
            .losses
            .iter()
            .filter(|r| r.epoch == e)
            .map(|r| r.loss)
            .collect();
        l.iter().sum::<f64>() / l.len() as f64
    };
    assert!(
        epoch_mean(4) < epoch_mean(0),
        "{} vs {}",
        epoch_mean(4),
        epoch_mean(0)
    );

    // the frozen backbone stays outside the trainable set
    assert!(a
        .params
        .iter()
        .all(|(_, name, _)| !name.starts_with("backbone")));
    let backbone = Backbone::load(&a.config.backbone.spec().unwrap()).unwrap();
    assert_eq!(backbone.fingerprint(), s.pool.backbone_fingerprint);

    let restored = Checkpoint::from_bytes(&a.to_bytes()).unwrap();
    assert_eq!(restored, a);
}

#[test]
fn resume_continues_the_same_run() {
    let s = setup();
    let dir = TempDir::new().unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        max_steps: None,
    };
    let short = train(&s.cfg, &s.root, &s.pool, &opts).unwrap();
    assert_eq!(short.step, 6);
    let saved = Checkpoint::load(&dir.path().join("checkpoint.pnpt")).unwrap();
    assert_eq!(saved, short);
    let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    // nothing left to do
    let same = resume(
        saved.clone(),
        &s.cfg,
        &s.root,
        &s.pool,
        &TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(same, saved);

    let longer = with_epochs(&s.cfg, 4);
    let extended = resume(
        saved.clone(),
        &longer,
        &s.root,
        &s.pool,
        &TrainOptions::default(),
    )
    .unwrap();
    let direct = train(&longer, &s.root, &s.pool, &TrainOptions::default()).unwrap();
    assert_eq!(extended.step, 12);
    assert_eq!(extended.params, direct.params);
    assert_eq!(extended.losses, direct.losses);

    let mut changed = s.cfg.clone();
    changed.train.learning_rate = 0.5;
    let err = resume(
        saved.clone(),
        &changed,
        &s.root,
        &s.pool,
        &TrainOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch { .. }), "{err}");

    let mut other_pool = s.pool.clone();
    other_pool.sample_counts[0] += 1;
    let err = resume(
        saved,
        &s.cfg,
        &s.root,
        &other_pool,
        &TrainOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch { .. }), "{err}");
}

#[test]
fn evaluation_reports_are_reproducible() {
    let s = setup();
    let ckpt = train(
        &with_epochs(&s.cfg, 1),
        &s.root,
        &s.pool,
        &TrainOptions::default(),
    )
    .unwrap();
    let out = TempDir::new().unwrap();
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let opts = EvalOptions {
            out_dir: Some(out.path().join(name)),
            ..Default::default()
        };
        let mut r = evaluate_dataset(&ckpt, &s.pool, &s.root, &opts).unwrap();
        assert!(r.runtime.take().is_some());
        reports.push(r);
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(files(&out.path().join("a")), files(&out.path().join("b")));
    assert_eq!(reports[0].records.len(), 3 * (3 + 3));
    assert_eq!(reports[0].classes.len(), 3);
    for c in &reports[0].classes {
        assert_eq!((c.n_normal, c.n_anomalous), (3, 3));
        assert!(c.image_auroc.is_some() && c.pixel_auroc.is_some());
    }

    let only = evaluate_dataset(
        &ckpt,
        &s.pool,
        &s.root,
        &EvalOptions {
            class: Some("dots".into()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(only.classes.len(), 1);
    assert_eq!(
        only.classes[0],
        reports[0]
            .classes
            .iter()
            .find(|c| c.class == "dots")
            .unwrap()
            .clone()
    );
}

/// Scores every pixel with the ground-truth mask, or with zero.
struct MaskScorer {
    classes: Vec<String>,
    blank: bool,
}

impl Scorer for MaskScorer {
    fn output_size(&self) -> usize {
        80
    }

    fn class_name(&self, k: usize) -> String {
        self.classes[k].clone()
    }

    fn score_sample(&self, sample: &Sample) -> pnpt::Result<(AnomalyResult, usize)> {
        let mask = dataset::load_mask(sample, 80)?;
        let map: Array2<f32> = if self.blank {
            Array2::zeros(mask.dim())
        } else {
            mask.mapv(|m| m as u8 as f32)
        };
        let k = self
            .classes
            .iter()
            .position(|c| *c == sample.class)
            .unwrap();
        let image_score = map.iter().copied().fold(0.0, f32::max);
        Ok((
            AnomalyResult {
                pixel_map: map,
                image_score,
                per_scale_maps: Vec::new(),
            },
            k,
        ))
    }
}

#[test]
fn metrics_on_oracle_and_blank_maps() {
    let s = setup();
    let classes = dataset::list_classes(&s.root).unwrap();
    let oracle = evaluate_with(
        &MaskScorer {
            classes: classes.clone(),
            blank: false,
        },
        &s.root,
        &EvalOptions::default(),
    )
    .unwrap();
    assert_eq!(oracle.mean_image_auroc, Some(1.0));
    assert_eq!(oracle.mean_pixel_auroc, Some(1.0));
    assert_eq!(oracle.retrieval_accuracy, Some(1.0));

    let blank = evaluate_with(
        &MaskScorer {
            classes,
            blank: true,
        },
        &s.root,
        &EvalOptions::default(),
    )
    .unwrap();
    assert_eq!(blank.mean_image_auroc, Some(0.5));
    assert_eq!(blank.mean_pixel_auroc, Some(0.5));
}
