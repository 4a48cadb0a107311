//! Frozen convolutional feature extractor and the multi-scale feature set.

use std::path::{Path, PathBuf};

use image::{imageops::FilterType, RgbImage};
use ndarray::{s, Array1, Array2, Array3, ArrayView3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub input_size: usize,
    pub scale_channels: Vec<usize>,
    pub scale_strides: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
    /// Seed for random initialization when no weights file is given.
    pub seed: u64,
}

impl BackboneSpec {
    pub fn tiny(input_size: usize) -> Self {
        Self {
            name: "tiny".into(),
            input_size,
            scale_channels: vec![16, 32, 64],
            scale_strides: vec![4, 8, 16],
            weights_path: None,
            seed: 7,
        }
    }

    pub fn wide_residual_50_style(input_size: usize) -> Self {
        Self {
            name: "wide-residual-50-style".into(),
            input_size,
            scale_channels: vec![256, 512, 1024],
            scale_strides: vec![4, 8, 16],
            weights_path: None,
            seed: 7,
        }
    }

    /// Looks up one of the built-in specs by name.
    pub fn builtin(name: &str, input_size: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(input_size)),
            "wide-residual-50-style" => Ok(Self::wide_residual_50_style(input_size)),
            other => Err(Error::config(format!("unknown backbone `{other}`"))),
        }
    }

    pub fn num_scales(&self) -> usize {
        self.scale_channels.len()
    }

    pub fn coding_len(&self) -> usize {
        self.scale_channels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.scale_channels.len();
        if h == 0 || h != self.scale_strides.len() {
            return Err(Error::config(
                "scale_channels and scale_strides must be non-empty and equally long",
            ));
        }
        if self.scale_strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("scale_strides must be strictly increasing"));
        }
        let mut prev = 1;
        for &st in &self.scale_strides {
            if st % prev != 0 || !(st / prev).is_power_of_two() || st == prev {
                return Err(Error::config(format!(
                    "stride {st} is not a power-of-two multiple of {prev}"
                )));
            }
            if !self.input_size.is_multiple_of(st) {
                return Err(Error::config(format!(
                    "input size {} not divisible by stride {st}",
                    self.input_size
                )));
            }
            prev = st;
        }
        if self.scale_channels.contains(&0) {
            return Err(Error::config("scale channel counts must be positive"));
        }
        Ok(())
    }

    /// Expected `(channels, height, width)` per scale.
    pub fn output_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.scale_channels
            .iter()
            .zip(&self.scale_strides)
            .map(|(&c, &st)| (c, self.input_size / st, self.input_size / st))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Input,
    Prior,
    ReconstructionPrior,
    ReconstructionSelf,
    Fused,
}

/// One feature map per backbone scale, each shaped `channels × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeatureSet {
    pub scales: Vec<Array3<f32>>,
    pub provenance: Provenance,
}

impl MultiScaleFeatureSet {
    pub fn new(scales: Vec<Array3<f32>>, provenance: Provenance) -> Self {
        Self { scales, provenance }
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.scales.iter().map(|s| s.dim()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.scales.iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shapes() != other.shapes() {
            return Err(Error::shape(format!(
                "feature shapes {:?} vs {:?}",
                self.shapes(),
                other.shapes()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Conv {
    name: String,
    /// `out_channels × (in_channels · k · k)`
    weight: Array2<f32>,
    bias: Array1<f32>,
    kernel: usize,
    stride: usize,
}

impl Conv {
    fn in_channels(&self) -> usize {
        self.weight.ncols() / (self.kernel * self.kernel)
    }

    fn forward(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / self.stride + 1;
        let wo = (w + 2 * pad - k) / self.stride + 1;
        // reflection padding keeps border responses close to interior ones
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let i = if i < 0 {
                -i
            } else if i >= n {
                2 * n - 2 - i
            } else {
                i
            };
            i.clamp(0, n - 1) as usize
        };
        let mut cols = Array2::<f32>::zeros((c * k * k, ho * wo));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let mut row = cols.row_mut((ci * k + ky) * k + kx);
                    let row = row.as_slice_mut().unwrap();
                    for oy in 0..ho {
                        let iy = reflect((oy * self.stride + ky) as isize - pad as isize, h);
                        for ox in 0..wo {
                            let ix = reflect((ox * self.stride + kx) as isize - pad as isize, w);
                            row[oy * wo + ox] = x[[ci, iy, ix]];
                        }
                    }
                }
            }
        }
        let mut out = self.weight.dot(&cols);
        for (mut row, &b) in out.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        out.into_shape_with_order((self.weight.nrows(), ho, wo))
            .expect("conv output shape")
    }
}

fn relu(mut x: Array3<f32>) -> Array3<f32> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

/// One stage: stride-2 downsampling convolutions followed by a residual block.
#[derive(Debug, Clone)]
struct Stage {
    down: Vec<Conv>,
    res1: Conv,
    res2: Conv,
}

impl Stage {
    fn forward(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let mut h = x.to_owned();
        for conv in &self.down {
            h = relu(conv.forward(h.view()));
        }
        let r = relu(self.res1.forward(h.view()));
        let r = self.res2.forward(r.view());
        relu(h + r)
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.down.iter().chain([&self.res1, &self.res2])
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv> {
        self.down.iter_mut().chain([&mut self.res1, &mut self.res2])
    }
}

/// Frozen feature extractor. There is no API that mutates its weights after
/// construction.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    stages: Vec<Stage>,
}

fn init_conv(
    name: String,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> Conv {
    let fan_in = (cin * kernel * kernel) as f32;
    let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).unwrap();
    let weight = Array2::from_shape_simple_fn((cout, cin * kernel * kernel), || normal.sample(rng));
    Conv {
        name,
        weight,
        bias: Array1::zeros(cout),
        kernel,
        stride,
    }
}

impl Backbone {
    /// Builds the extractor; loads `weights_path` when set, otherwise draws
    /// Kaiming-normal weights from `spec.seed`.
    pub fn load(spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut stages = Vec::with_capacity(spec.num_scales());
        let mut cin = 3;
        let mut prev_stride = 1;
        for (i, (&cout, &stride)) in spec
            .scale_channels
            .iter()
            .zip(&spec.scale_strides)
            .enumerate()
        {
            let n_down = (stride / prev_stride).trailing_zeros() as usize;
            let mut down = Vec::with_capacity(n_down);
            for j in 0..n_down {
                let c_in = if j == 0 { cin } else { cout };
                down.push(init_conv(
                    format!("stage{i}.down{j}"),
                    c_in,
                    cout,
                    3,
                    2,
                    &mut rng,
                ));
            }
            let res1 = init_conv(format!("stage{i}.res1"), cout, cout, 3, 1, &mut rng);
            let res2 = init_conv(format!("stage{i}.res2"), cout, cout, 3, 1, &mut rng);
            stages.push(Stage { down, res1, res2 });
            cin = cout;
            prev_stride = stride;
        }
        let mut backbone = Self {
            spec: spec.clone(),
            stages,
        };
        if let Some(path) = &spec.weights_path {
            backbone.load_weights(path)?;
        }
        Ok(backbone)
    }

    fn load_weights(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Load {
                path: path.into(),
                reason: "weights file does not exist".into(),
            });
        }
        let archive = TensorArchive::read(path)?.expect_kind("backbone")?;
        let load_err = |reason: String| Error::Load {
            path: path.into(),
            reason,
        };
        for conv in self.stages.iter_mut().flat_map(|s| s.convs_mut()) {
            let wname = format!("{}.weight", conv.name);
            let bname = format!("{}.bias", conv.name);
            let w = archive
                .get(&wname)
                .ok_or_else(|| load_err(format!("missing tensor `{wname}`")))?;
            let expected = vec![
                conv.weight.nrows(),
                conv.in_channels(),
                conv.kernel,
                conv.kernel,
            ];
            if w.shape != expected {
                return Err(load_err(format!(
                    "shape mismatch for tensor `{wname}`: file {:?}, spec {:?}",
                    w.shape, expected
                )));
            }
            let w = archive.array_f32(&wname)?;
            conv.weight = w
                .into_shape_with_order(conv.weight.dim())
                .expect("checked shape");
            let b = archive
                .get(&bname)
                .ok_or_else(|| load_err(format!("missing tensor `{bname}`")))?;
            if b.shape != vec![conv.bias.len()] {
                return Err(load_err(format!(
                    "shape mismatch for tensor `{bname}`: file {:?}, spec {:?}",
                    b.shape,
                    [conv.bias.len()]
                )));
            }
            conv.bias = archive.array1_f32(&bname)?;
        }
        Ok(())
    }

    /// Writes the current weights in the archive layout accepted by `weights_path`.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut archive =
            TensorArchive::new("backbone").with_metadata(serde_json::to_value(&self.spec)?);
        for conv in self.stages.iter().flat_map(|s| s.convs()) {
            let (cout, k) = (conv.weight.nrows(), conv.kernel);
            let w = conv
                .weight
                .clone()
                .into_shape_with_order((cout, conv.in_channels(), k, k))
                .expect("conv weight shape");
            archive.insert_f32(format!("{}.weight", conv.name), &w);
            archive.insert_f32(format!("{}.bias", conv.name), &conv.bias);
        }
        archive.write(path)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// SHA-256 over the spec and every weight; changes iff the extractor changes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec.name.as_bytes());
        h.update((self.spec.input_size as u64).to_le_bytes());
        for (&c, &s) in self
            .spec
            .scale_channels
            .iter()
            .zip(&self.spec.scale_strides)
        {
            h.update((c as u64).to_le_bytes());
            h.update((s as u64).to_le_bytes());
        }
        h.update(self.param_digest());
        hex::encode(h.finalize())
    }

    /// SHA-256 over the raw bits of all weights.
    pub fn param_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for conv in self.stages.iter().flat_map(|s| s.convs()) {
            conv.weight
                .iter()
                .chain(conv.bias.iter())
                .for_each(|v| h.update(v.to_le_bytes()));
        }
        h.finalize().into()
    }

    /// Runs the extractor on a normalized `3 × S × S` tensor.
    pub fn extract_features(&self, image: ArrayView3<f32>) -> Result<MultiScaleFeatureSet> {
        let s = self.spec.input_size;
        if image.dim() != (3, s, s) {
            return Err(Error::shape(format!(
                "expected image 3×{s}×{s}, got {:?}",
                image.dim()
            )));
        }
        let mut scales = Vec::with_capacity(self.stages.len());
        let mut x = image.to_owned();
        for stage in &self.stages {
            x = stage.forward(x.view());
            scales.push(x.clone());
        }
        Ok(MultiScaleFeatureSet::new(scales, Provenance::Input))
    }

    /// Resize, scale to `[0, 1]` and normalize with the ImageNet constants.
    pub fn preprocess(&self, image: &RgbImage) -> Array3<f32> {
        preprocess(image, self.spec.input_size)
    }
}

pub fn preprocess(image: &RgbImage, size: usize) -> Array3<f32> {
    let resized;
    let img = if image.width() as usize == size && image.height() as usize == size {
        image
    } else {
        resized = image::imageops::resize(image, size as u32, size as u32, FilterType::Triangle);
        &resized
    };
    let mut out = Array3::<f32>::zeros((3, size, size));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] =
                (px[c] as f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    out
}

/// Per-channel spatial mean of each scale, concatenated in scale order.
pub(crate) fn pooled_channels(features: &MultiScaleFeatureSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(features.scales.iter().map(|s| s.dim().0).sum());
    for scale in &features.scales {
        let (c, h, w) = scale.dim();
        let n = (h * w) as f64;
        for ci in 0..c {
            let sum: f64 = scale.slice(s![ci, .., ..]).iter().map(|&v| v as f64).sum();
            out.push(sum / n);
        }
    }
    out
}

/// Element-wise combination of two equally shaped feature sets.
pub(crate) fn zip_features(
    a: &MultiScaleFeatureSet,
    b: &MultiScaleFeatureSet,
    provenance: Provenance,
    f: impl Fn(f32, f32) -> f32,
) -> Result<MultiScaleFeatureSet> {
    a.check_same_shape(b)?;
    let scales = a
        .scales
        .iter()
        .zip(&b.scales)
        .map(|(x, y)| {
            let mut out = x.clone();
            Zip::from(&mut out).and(y).for_each(|o, &yv| *o = f(*o, yv));
            out
        })
        .collect();
    Ok(MultiScaleFeatureSet::new(scales, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_shapes_at_256() {
        let bb = Backbone::load(&BackboneSpec::tiny(256)).unwrap();
        let f = bb
            .extract_features(Array3::zeros((3, 256, 256)).view())
            .unwrap();
        assert_eq!(f.shapes(), vec![(16, 64, 64), (32, 32, 32), (64, 16, 16)]);
        assert!(f.is_finite());
        assert_eq!(f.provenance, Provenance::Input);
    }

    #[test]
    fn wide_spec_shape_trace() {
        // only the shape trace; running the wide net is not needed here
        let spec = BackboneSpec::wide_residual_50_style(256);
        assert_eq!(
            spec.output_shapes(),
            vec![(256, 64, 64), (512, 32, 32), (1024, 16, 16)]
        );
        assert_eq!(spec.coding_len(), 1792);
    }

    #[test]
    fn stride_arithmetic_holds_for_supported_sizes() {
        for size in [64, 128, 192, 256, 320] {
            let bb = Backbone::load(&BackboneSpec::tiny(size)).unwrap();
            let f = bb
                .extract_features(Array3::zeros((3, size, size)).view())
                .unwrap();
            assert_eq!(f.shapes(), bb.spec().output_shapes());
        }
        assert!(BackboneSpec::tiny(100).validate().is_err());
    }

    #[test]
    fn missing_weights_file_is_a_load_error() {
        let mut spec = BackboneSpec::tiny(64);
        spec.weights_path = Some("/nonexistent/weights.bin".into());
        assert!(matches!(Backbone::load(&spec), Err(Error::Load { .. })));
    }

    #[test]
    fn checkpoint_shape_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut other = BackboneSpec::tiny(64);
        other.scale_channels = vec![8, 32, 64];
        Backbone::load(&other).unwrap().save_weights(&path).unwrap();
        let mut spec = BackboneSpec::tiny(64);
        spec.weights_path = Some(path);
        let err = Backbone::load(&spec).unwrap_err().to_string();
        assert!(err.contains("stage0.down0.weight"), "{err}");
    }

    #[test]
    fn weights_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut spec = BackboneSpec::tiny(64);
        spec.seed = 99;
        let a = Backbone::load(&spec).unwrap();
        a.save_weights(&path).unwrap();
        let mut spec2 = BackboneSpec::tiny(64);
        spec2.weights_path = Some(path);
        let b = Backbone::load(&spec2).unwrap();
        assert_eq!(a.param_digest(), b.param_digest());
    }

    #[test]
    fn deterministic_and_sensitive_to_one_pixel() {
        let bb = Backbone::load(&BackboneSpec::tiny(64)).unwrap();
        let mut img = Array3::<f32>::zeros((3, 64, 64));
        let a = bb.extract_features(img.view()).unwrap();
        let b = bb.extract_features(img.view()).unwrap();
        assert_eq!(a, b);
        img[[1, 30, 30]] = 1.0;
        let c = bb.extract_features(img.view()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let bb = Backbone::load(&BackboneSpec::tiny(64)).unwrap();
        assert!(matches!(
            bb.extract_features(Array3::zeros((3, 32, 32)).view()),
            Err(Error::Shape(_))
        ));
    }
}
