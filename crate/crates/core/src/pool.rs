//! Class-specific normality prompting pool: per-class mean features and
//! global codings, queried by nearest coding.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::TensorArchive;
use crate::backbone::{pooled_channels, Backbone, MultiScaleFeatureSet, Provenance};
use crate::error::{Error, Result};

pub const POOL_FORMAT_VERSION: u32 = 1;

/// Global-average-pooled channels of every scale, concatenated in scale order.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCoding {
    pub vector: Array1<f32>,
}

impl GlobalCoding {
    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }
}

pub fn compute_global_coding(features: &MultiScaleFeatureSet) -> GlobalCoding {
    let v = pooled_channels(features);
    GlobalCoding {
        vector: v.into_iter().map(|x| x as f32).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::config(format!("unknown metric `{other}`"))),
        }
    }
}

fn l2_normalized(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

/// Distance used for retrieval; lower is nearer.
pub fn coding_distance(metric: Metric, a: &[f32], b: &[f32]) -> f32 {
    match metric {
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f32>()
            .sqrt(),
        Metric::Cosine => {
            let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f32>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f32>().sqrt();
            1.0 - dot / (na * nb).max(1e-12)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalityPool {
    pub classes: Vec<String>,
    pub prototype_features: Vec<MultiScaleFeatureSet>,
    pub prototype_codings: Vec<GlobalCoding>,
    pub sample_counts: Vec<usize>,
    pub metric: Metric,
    /// L2-normalize codings before comparing.
    pub normalize_codings: bool,
    pub backbone_fingerprint: String,
}

/// Running per-class means; memory is O(classes), not O(images).
#[derive(Debug)]
pub struct PoolBuilder {
    expected: Vec<String>,
    accum: BTreeMap<String, ClassAccumulator>,
    shapes: Option<Vec<(usize, usize, usize)>>,
}

#[derive(Debug)]
struct ClassAccumulator {
    count: usize,
    features: Vec<Vec<f64>>,
    coding: Vec<f64>,
}

impl PoolBuilder {
    /// `expected_classes` lists classes that must receive at least one image.
    pub fn new(expected_classes: &[String]) -> Self {
        Self {
            expected: expected_classes.to_vec(),
            accum: BTreeMap::new(),
            shapes: None,
        }
    }

    pub fn add(&mut self, class: &str, features: &MultiScaleFeatureSet) -> Result<()> {
        let shapes = features.shapes();
        match &self.shapes {
            Some(s) if *s != shapes => {
                return Err(Error::shape(format!(
                    "feature shapes {shapes:?} differ from earlier images {s:?}"
                )))
            }
            Some(_) => {}
            None => self.shapes = Some(shapes),
        }
        let coding = pooled_channels(features);
        let acc = self
            .accum
            .entry(class.to_string())
            .or_insert_with(|| ClassAccumulator {
                count: 0,
                features: features.scales.iter().map(|s| vec![0.0; s.len()]).collect(),
                coding: vec![0.0; coding.len()],
            });
        acc.count += 1;
        let inv = 1.0 / acc.count as f64;
        for (mean, scale) in acc.features.iter_mut().zip(&features.scales) {
            for (m, &x) in mean.iter_mut().zip(scale.iter()) {
                *m += (x as f64 - *m) * inv;
            }
        }
        for (m, x) in acc.coding.iter_mut().zip(coding) {
            *m += (x - *m) * inv;
        }
        Ok(())
    }

    pub fn finish(
        self,
        metric: Metric,
        backbone_fingerprint: impl Into<String>,
    ) -> Result<NormalityPool> {
        for class in &self.expected {
            if !self.accum.contains_key(class) {
                return Err(Error::EmptyClass(class.clone()));
            }
        }
        let shapes = self
            .shapes
            .ok_or_else(|| Error::Dataset("no training images".into()))?;
        let mut pool = NormalityPool {
            classes: Vec::new(),
            prototype_features: Vec::new(),
            prototype_codings: Vec::new(),
            sample_counts: Vec::new(),
            metric,
            normalize_codings: false,
            backbone_fingerprint: backbone_fingerprint.into(),
        };
        for (class, acc) in self.accum {
            let scales = acc
                .features
                .into_iter()
                .zip(&shapes)
                .map(|(m, &dim)| {
                    Array3::from_shape_vec(dim, m.into_iter().map(|x| x as f32).collect()).unwrap()
                })
                .collect();
            pool.classes.push(class);
            pool.prototype_features
                .push(MultiScaleFeatureSet::new(scales, Provenance::Prior));
            pool.prototype_codings.push(GlobalCoding {
                vector: acc.coding.into_iter().map(|x| x as f32).collect(),
            });
            pool.sample_counts.push(acc.count);
        }
        Ok(pool)
    }
}

/// Builds the pool from `(class, image)` pairs; images are normalized
/// `3 × S × S` tensors.
pub fn build_pool<I>(
    dataset: I,
    backbone: &Backbone,
    expected_classes: &[String],
) -> Result<NormalityPool>
where
    I: IntoIterator<Item = Result<(String, Array3<f32>)>>,
{
    let mut builder = PoolBuilder::new(expected_classes);
    for item in dataset {
        let (class, image) = item?;
        let features = backbone.extract_features(image.view())?;
        builder.add(&class, &features)?;
    }
    builder.finish(Metric::Euclidean, backbone.fingerprint())
}

impl NormalityPool {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn with_metric(mut self, metric: Metric, normalize_codings: bool) -> Self {
        self.metric = metric;
        self.normalize_codings = normalize_codings;
        self
    }

    /// Index of the nearest prototype coding; ties go to the lowest index.
    pub fn nearest(&self, coding: &GlobalCoding) -> usize {
        assert!(!self.is_empty(), "retrieval from an empty pool");
        let query = coding.vector.as_slice().expect("contiguous coding");
        let query = if self.normalize_codings {
            l2_normalized(query)
        } else {
            query.to_vec()
        };
        let mut best = (0, f32::INFINITY);
        for (k, proto) in self.prototype_codings.iter().enumerate() {
            let p = proto.vector.as_slice().expect("contiguous coding");
            let d = if self.normalize_codings {
                coding_distance(self.metric, &query, &l2_normalized(p))
            } else {
                coding_distance(self.metric, &query, p)
            };
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// Nearest class and its prototype features (the prior stream).
    pub fn retrieve_prior(&self, coding: &GlobalCoding) -> (usize, &MultiScaleFeatureSet) {
        let k = self.nearest(coding);
        (k, &self.prototype_features[k])
    }

    /// Checks that every stored coding matches the pooled prototype features.
    pub fn check_consistency(&self, tol: f32) -> Result<()> {
        for (k, (f, c)) in self
            .prototype_features
            .iter()
            .zip(&self.prototype_codings)
            .enumerate()
        {
            let recomputed = compute_global_coding(f);
            let diff = recomputed
                .vector
                .iter()
                .zip(c.vector.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            if diff > tol {
                return Err(Error::Corrupt(format!(
                    "class {} coding inconsistent (max diff {diff})",
                    self.classes[k]
                )));
            }
        }
        Ok(())
    }

    pub fn to_archive(&self) -> TensorArchive {
        let meta = json!({
            "format_version": POOL_FORMAT_VERSION,
            "classes": self.classes,
            "sample_counts": self.sample_counts,
            "metric": self.metric,
            "normalize_codings": self.normalize_codings,
            "backbone_fingerprint": self.backbone_fingerprint,
            "num_scales": self.prototype_features.first().map_or(0, |f| f.num_scales()),
        });
        let mut a = TensorArchive::new("pool").with_metadata(meta);
        for (k, (f, c)) in self
            .prototype_features
            .iter()
            .zip(&self.prototype_codings)
            .enumerate()
        {
            for (i, s) in f.scales.iter().enumerate() {
                a.insert_f32(format!("proto.{k}.scale{i}"), s);
            }
            a.insert_f32(format!("coding.{k}"), &c.vector);
        }
        a
    }

    pub fn from_archive(a: TensorArchive) -> Result<Self> {
        let a = a.expect_kind("pool")?;
        #[derive(Deserialize)]
        struct Meta {
            format_version: u32,
            classes: Vec<String>,
            sample_counts: Vec<usize>,
            metric: Metric,
            normalize_codings: bool,
            backbone_fingerprint: String,
            num_scales: usize,
        }
        let meta: Meta = serde_json::from_value(a.metadata.clone())
            .map_err(|e| Error::Corrupt(format!("pool metadata: {e}")))?;
        if meta.format_version != POOL_FORMAT_VERSION {
            return Err(Error::Version {
                found: meta.format_version,
                expected: POOL_FORMAT_VERSION,
            });
        }
        if meta.classes.is_empty() || meta.sample_counts.len() != meta.classes.len() {
            return Err(Error::Corrupt(
                "pool class list and sample counts disagree".into(),
            ));
        }
        let mut features = Vec::with_capacity(meta.classes.len());
        let mut codings = Vec::with_capacity(meta.classes.len());
        for k in 0..meta.classes.len() {
            let scales = (0..meta.num_scales)
                .map(|i| a.array3_f32(&format!("proto.{k}.scale{i}")))
                .collect::<Result<Vec<_>>>()?;
            let f = MultiScaleFeatureSet::new(scales, Provenance::Prior);
            if let Some(first) = features.first() {
                f.check_same_shape(first)
                    .map_err(|e| Error::Corrupt(e.to_string()))?;
            }
            let c = GlobalCoding {
                vector: a.array1_f32(&format!("coding.{k}"))?,
            };
            let expected: usize = f.scales.iter().map(|s| s.dim().0).sum();
            if c.len() != expected {
                return Err(Error::Corrupt(format!(
                    "coding.{k} has length {}, expected {expected}",
                    c.len()
                )));
            }
            features.push(f);
            codings.push(c);
        }
        Ok(Self {
            classes: meta.classes,
            prototype_features: features,
            prototype_codings: codings,
            sample_counts: meta.sample_counts,
            metric: meta.metric,
            normalize_codings: meta.normalize_codings,
            backbone_fingerprint: meta.backbone_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(TensorArchive::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(TensorArchive::from_bytes(bytes)?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalTiming {
    pub classes: usize,
    pub training_images: usize,
    pub build_seconds: f64,
    pub mean_retrieval_ns: f64,
}

/// Measures pool build time and mean retrieval latency over synthetic
/// codings of dimension `coding_dim`, for every `(K, N)` pair.
pub fn bench_retrieval(
    pool_sizes: &[usize],
    image_counts: &[usize],
    coding_dim: usize,
    queries: usize,
    seed: u64,
) -> Vec<RetrievalTiming> {
    let mut out = Vec::new();
    for &k in pool_sizes {
        for &n in image_counts {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32) ^ n as u64);
            let n = n.max(k);
            let start = Instant::now();
            let mut means = vec![vec![0.0f64; coding_dim]; k];
            let mut counts = vec![0usize; k];
            for i in 0..n {
                let class = i % k;
                counts[class] += 1;
                let inv = 1.0 / counts[class] as f64;
                for m in means[class].iter_mut() {
                    let x: f64 = class as f64 + rng.random::<f64>();
                    *m += (x - *m) * inv;
                }
            }
            let pool = NormalityPool {
                classes: (0..k).map(|c| format!("class{c}")).collect(),
                prototype_features: Vec::new(),
                prototype_codings: means
                    .into_iter()
                    .map(|m| GlobalCoding {
                        vector: m.into_iter().map(|x| x as f32).collect(),
                    })
                    .collect(),
                sample_counts: counts,
                metric: Metric::Euclidean,
                normalize_codings: false,
                backbone_fingerprint: String::new(),
            };
            let build_seconds = start.elapsed().as_secs_f64();
            let query_set: Vec<GlobalCoding> = (0..64)
                .map(|_| GlobalCoding {
                    vector: (0..coding_dim)
                        .map(|_| rng.random::<f32>() * k as f32)
                        .collect(),
                })
                .collect();
            // warm-up, then the median of several timed rounds
            let mut sink = 0usize;
            for q in &query_set {
                sink = sink.wrapping_add(pool.nearest(q));
            }
            let rounds = 7;
            let per_round = queries.max(1).div_ceil(rounds);
            let mut samples = Vec::with_capacity(rounds);
            for _ in 0..rounds {
                let t = Instant::now();
                for i in 0..per_round {
                    sink = sink.wrapping_add(
                        pool.nearest(std::hint::black_box(&query_set[i % query_set.len()])),
                    );
                }
                samples.push(t.elapsed().as_nanos() as f64 / per_round as f64);
            }
            std::hint::black_box(sink);
            samples.sort_by(f64::total_cmp);
            out.push(RetrievalTiming {
                classes: k,
                training_images: n,
                build_seconds,
                mean_retrieval_ns: samples[rounds / 2],
            });
        }
    }
    out
}

pub fn timings_to_csv(rows: &[RetrievalTiming]) -> String {
    let mut s = String::from("classes,training_images,build_seconds,mean_retrieval_ns\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.1}\n",
            r.classes, r.training_images, r.build_seconds, r.mean_retrieval_ns
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand_distr::{Distribution, StandardNormal};

    fn random_features(
        rng: &mut ChaCha8Rng,
        shapes: &[(usize, usize, usize)],
    ) -> MultiScaleFeatureSet {
        let scales = shapes
            .iter()
            .map(|&d| Array3::from_shape_simple_fn(d, || StandardNormal.sample(rng)))
            .collect();
        MultiScaleFeatureSet::new(scales, Provenance::Input)
    }

    const SHAPES: [(usize, usize, usize); 3] = [(4, 8, 8), (6, 4, 4), (8, 2, 2)];

    #[test]
    fn coding_of_constant_maps() {
        let f = MultiScaleFeatureSet::new(
            vec![
                Array3::from_elem((2, 4, 4), 1.5),
                Array3::from_elem((3, 2, 2), -2.0),
                Array3::from_elem((1, 1, 1), 7.0),
            ],
            Provenance::Input,
        );
        let c = compute_global_coding(&f);
        assert_eq!(c.vector.to_vec(), vec![1.5, 1.5, -2.0, -2.0, -2.0, 7.0]);
    }

    #[test]
    fn coding_matches_brute_force_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_features(&mut rng, &SHAPES);
        let c = compute_global_coding(&f);
        let mut idx = 0;
        for s in &f.scales {
            let (ch, h, w) = s.dim();
            for ci in 0..ch {
                let mut sum = 0.0f64;
                for y in 0..h {
                    for x in 0..w {
                        sum += s[[ci, y, x]] as f64;
                    }
                }
                assert!((c.vector[idx] as f64 - sum / (h * w) as f64).abs() < 1e-6);
                idx += 1;
            }
        }
    }

    #[test]
    fn single_pixel_maps_flatten() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_features(&mut rng, &[(3, 1, 1), (2, 1, 1)]);
        let flat: Vec<f32> = f.scales.iter().flat_map(|s| s.iter().copied()).collect();
        assert_eq!(compute_global_coding(&f).vector.to_vec(), flat);
    }

    #[test]
    fn one_image_prototype_is_exact_and_duplicates_are_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_features(&mut rng, &SHAPES);
        let mut b = PoolBuilder::new(&[]);
        b.add("x", &a).unwrap();
        b.add("y", &a).unwrap();
        b.add("y", &a).unwrap();
        let pool = b.finish(Metric::Euclidean, "").unwrap();
        assert_eq!(pool.prototype_features[0].scales, a.scales);
        assert_eq!(pool.prototype_features[1].scales, a.scales);
        assert_eq!(pool.sample_counts, vec![1, 2]);
    }

    #[test]
    fn mean_of_five_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let imgs: Vec<_> = (0..5).map(|_| random_features(&mut rng, &SHAPES)).collect();
        let mut b = PoolBuilder::new(&[]);
        imgs.iter().for_each(|f| b.add("c", f).unwrap());
        let pool = b.finish(Metric::Euclidean, "").unwrap();
        for (i, s) in pool.prototype_features[0].scales.iter().enumerate() {
            for (j, &v) in s.iter().enumerate() {
                let brute: f64 = imgs
                    .iter()
                    .map(|f| f.scales[i].as_slice().unwrap()[j] as f64)
                    .sum::<f64>()
                    / 5.0;
                assert!((v as f64 - brute).abs() < 1e-5);
            }
        }
        pool.check_consistency(1e-5).unwrap();
    }

    #[test]
    fn empty_declared_class_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = PoolBuilder::new(&["a".into(), "b".into()]);
        b.add("a", &random_features(&mut rng, &SHAPES)).unwrap();
        match b.finish(Metric::Euclidean, "") {
            Err(Error::EmptyClass(c)) => assert_eq!(c, "b"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_shapes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = PoolBuilder::new(&[]);
        b.add("a", &random_features(&mut rng, &SHAPES)).unwrap();
        let err = b
            .add("a", &random_features(&mut rng, &[(4, 8, 8)]))
            .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    fn tiny_pool(codings: Vec<Vec<f32>>) -> NormalityPool {
        let k = codings.len();
        NormalityPool {
            classes: (0..k).map(|i| format!("c{i}")).collect(),
            prototype_features: vec![],
            prototype_codings: codings
                .into_iter()
                .map(|v| GlobalCoding { vector: v.into() })
                .collect(),
            sample_counts: vec![1; k],
            metric: Metric::Euclidean,
            normalize_codings: false,
            backbone_fingerprint: String::new(),
        }
    }

    #[test]
    fn exact_match_and_tie_break() {
        let pool = tiny_pool(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(
            pool.nearest(&GlobalCoding {
                vector: vec![0.0, 1.0].into()
            }),
            2
        );
        // equidistant from classes 1 and 2
        assert_eq!(
            pool.nearest(&GlobalCoding {
                vector: vec![2.0, 2.0].into()
            }),
            1
        );
        let pool = tiny_pool(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert_eq!(
            pool.nearest(&GlobalCoding {
                vector: vec![0.0, 5.0].into()
            }),
            0
        );
    }

    #[test]
    fn cosine_metric_ignores_scale() {
        let pool =
            tiny_pool(vec![vec![1.0, 0.0], vec![10.0, 10.0]]).with_metric(Metric::Cosine, false);
        assert_eq!(
            pool.nearest(&GlobalCoding {
                vector: vec![0.1, 0.1].into()
            }),
            1
        );
        let pool = tiny_pool(vec![vec![1.0, 0.0], vec![10.0, 10.0]]);
        assert_eq!(
            pool.nearest(&GlobalCoding {
                vector: vec![0.1, 0.1].into()
            }),
            0
        );
    }

    #[test]
    fn save_load_roundtrip_and_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = PoolBuilder::new(&[]);
        for c in ["a", "b", "c"] {
            b.add(c, &random_features(&mut rng, &SHAPES)).unwrap();
        }
        let pool = b.finish(Metric::Cosine, "abc").unwrap();
        let bytes = pool.to_archive().to_bytes();
        assert_eq!(NormalityPool::from_bytes(&bytes).unwrap(), pool);
        assert!(matches!(
            NormalityPool::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn k_equals_one_always_returns_class_zero() {
        let t = bench_retrieval(&[1], &[10], 16, 200, 0);
        assert!(t[0].mean_retrieval_ns > 0.0);
        let pool = tiny_pool(vec![vec![3.0, 4.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let q = GlobalCoding {
                vector: vec![rng.random(), rng.random()].into(),
            };
            assert_eq!(pool.nearest(&q), 0);
        }
    }
}
