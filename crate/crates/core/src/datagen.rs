//! Procedural texture corpus in the MVTec directory layout.
//!
//! Every image is rendered from its own RNG stream, seeded from the corpus
//! seed and the image's relative path, so the output does not depend on
//! generation order.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Checkerboard,
    Stripes,
    Dots,
    Gradient,
}

/// One texture class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureRecipe {
    pub name: String,
    pub pattern: Pattern,
    /// Motif period in pixels.
    pub period: f32,
    /// Orientation in degrees.
    pub angle: f32,
    /// Background and foreground colors.
    pub palette: [[u8; 3]; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    /// A rectangle of another class's texture.
    ForeignTexture,
    /// A disk of shifted intensity.
    Blotch,
    /// One motif cell painted with the background color.
    MissingElement,
}

impl DefectKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DefectKind::ForeignTexture => "foreign_texture",
            DefectKind::Blotch => "blotch",
            DefectKind::MissingElement => "missing_element",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<TextureRecipe>,
    pub image_size: u32,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub defects: Vec<DefectKind>,
    /// Maximum texture shift in pixels, drawn uniformly per image and axis.
    pub phase_jitter: f32,
    /// Relative brightness jitter.
    pub illumination_jitter: f32,
    /// Per-pixel Gaussian noise in 8-bit levels.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: default_recipes(),
            image_size: 128,
            n_train: 100,
            n_test_normal: 10,
            n_test_anomalous: 12,
            defects: vec![
                DefectKind::ForeignTexture,
                DefectKind::Blotch,
                DefectKind::MissingElement,
            ],
            phase_jitter: 1.5,
            illumination_jitter: 0.05,
            noise: 3.0,
            seed: 0,
        }
    }
}

pub fn default_recipes() -> Vec<TextureRecipe> {
    vec![
        TextureRecipe {
            name: "checkerboard".into(),
            pattern: Pattern::Checkerboard,
            period: 16.0,
            angle: 0.0,
            palette: [[40, 40, 60], [200, 190, 170]],
        },
        TextureRecipe {
            name: "stripes".into(),
            pattern: Pattern::Stripes,
            period: 12.0,
            angle: 30.0,
            palette: [[30, 90, 40], [180, 220, 120]],
        },
        TextureRecipe {
            name: "dots".into(),
            pattern: Pattern::Dots,
            period: 20.0,
            angle: 0.0,
            palette: [[150, 60, 50], [240, 200, 90]],
        },
    ]
}

/// The gradient recipe is not part of the default three-class corpus.
pub fn gradient_recipe() -> TextureRecipe {
    TextureRecipe {
        name: "gradient".into(),
        pattern: Pattern::Gradient,
        period: 24.0,
        angle: 60.0,
        palette: [[20, 40, 120], [220, 230, 250]],
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("synth spec needs at least one class"));
        }
        let mut names: Vec<_> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.classes.len() {
            return Err(Error::config("synth class names must be unique"));
        }
        for (i, a) in self.classes.iter().enumerate() {
            if a.period < 2.0 || !a.period.is_finite() {
                return Err(Error::config(format!(
                    "class {} period must be at least 2",
                    a.name
                )));
            }
            if a.name.is_empty() || a.name.contains(['/', '\\']) || a.name.starts_with('.') {
                return Err(Error::config(format!("invalid class name `{}`", a.name)));
            }
            for b in &self.classes[i + 1..] {
                if a.pattern == b.pattern && a.period == b.period && a.angle == b.angle {
                    return Err(Error::config(format!(
                        "classes {} and {} are indistinguishable",
                        a.name, b.name
                    )));
                }
            }
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size must be at least 16"));
        }
        if let Some(c) = self
            .classes
            .iter()
            .find(|c| c.period * 4.0 > self.image_size as f32)
        {
            return Err(Error::config(format!(
                "image_size {} is too small for class {} (period {}); at least four periods must fit",
                self.image_size, c.name, c.period
            )));
        }
        if self.n_test_anomalous > 0 && self.defects.is_empty() {
            return Err(Error::config(
                "anomalous test images requested but no defect kinds given",
            ));
        }
        if self.n_test_anomalous > 0
            && self.defects.contains(&DefectKind::ForeignTexture)
            && self.classes.len() < 2
        {
            return Err(Error::config(
                "foreign_texture defects need at least two classes",
            ));
        }
        if !(0.0..0.5).contains(&self.illumination_jitter)
            || !(self.phase_jitter >= 0.0)
            || !(self.noise >= 0.0)
        {
            return Err(Error::config(
                "illumination_jitter must be in [0, 0.5); phase_jitter and noise non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub class: String,
    pub split: String,
    /// `None` for defect-free images.
    pub defect: Option<String>,
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SynthSpec,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(bytes)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: m.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }
}

/// Per-image jitter drawn from the image's RNG stream.
#[derive(Debug, Clone, Copy)]
struct Jitter {
    phase: (f32, f32),
    gain: f32,
}

fn stream(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Foreground weight in `[0, 1]` at pixel `(x, y)`.
fn motif(recipe: &TextureRecipe, x: f32, y: f32, phase: (f32, f32)) -> f32 {
    let (sin, cos) = recipe.angle.to_radians().sin_cos();
    let u = x * cos + y * sin + phase.0;
    let v = -x * sin + y * cos + phase.1;
    let p = recipe.period;
    match recipe.pattern {
        Pattern::Checkerboard => {
            let parity = ((u / p).floor() as i64 + (v / p).floor() as i64).rem_euclid(2);
            parity as f32
        }
        Pattern::Stripes => {
            let s = (2.0 * PI * u / p).sin();
            (0.5 + 0.5 * (s * 3.0).clamp(-1.0, 1.0)).clamp(0.0, 1.0)
        }
        Pattern::Dots => {
            let du = u.rem_euclid(p) - p / 2.0;
            let dv = v.rem_euclid(p) - p / 2.0;
            let r = (du * du + dv * dv).sqrt();
            (p * 0.3 - r + 0.5).clamp(0.0, 1.0)
        }
        Pattern::Gradient => {
            let ramp = (u / (p * 4.0)).rem_euclid(1.0);
            let tick = if v.rem_euclid(p) < 2.0 { 0.35 } else { 0.0 };
            (ramp * 0.65 + tick).min(1.0)
        }
    }
}

fn shade(recipe: &TextureRecipe, w: f32, gain: f32) -> [f32; 3] {
    let [bg, fg] = recipe.palette;
    std::array::from_fn(|c| (bg[c] as f32 * (1.0 - w) + fg[c] as f32 * w) * gain)
}

fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders a defect-free texture as floating-point RGB plus pixel noise.
fn render_float<R: Rng>(
    recipe: &TextureRecipe,
    size: u32,
    jitter: Jitter,
    noise: f32,
    rng: &mut R,
) -> Vec<[f32; 3]> {
    let normal = Normal::new(0.0f32, noise.max(1e-9)).unwrap();
    let mut out = Vec::with_capacity((size * size) as usize);
    for y in 0..size {
        for x in 0..size {
            let mut px = shade(
                recipe,
                motif(recipe, x as f32, y as f32, jitter.phase),
                jitter.gain,
            );
            if noise > 0.0 {
                for c in &mut px {
                    *c += normal.sample(rng);
                }
            }
            out.push(px);
        }
    }
    out
}

fn quantize(pixels: &[[f32; 3]], size: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| {
        let p = pixels[(y * size + x) as usize];
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    })
}

fn draw_jitter<R: Rng>(rng: &mut R, spec: &SynthSpec) -> Jitter {
    let mut sym = |a: f32| {
        if a > 0.0 {
            rng.random_range(-a..a)
        } else {
            0.0
        }
    };
    let phase = (sym(spec.phase_jitter), sym(spec.phase_jitter));
    Jitter {
        phase,
        gain: 1.0 + sym(spec.illumination_jitter),
    }
}

/// Renders a defect-free image for `recipe`.
pub fn render_normal(spec: &SynthSpec, recipe: &TextureRecipe, key: &str) -> RgbImage {
    let mut rng = stream(spec.seed, key);
    let jitter = draw_jitter(&mut rng, spec);
    let base = render_float(recipe, spec.image_size, jitter, spec.noise, &mut rng);
    quantize(&base, spec.image_size)
}

/// Renders an anomalous image, its defect-free twin and the defect mask.
/// The mask marks exactly the pixels where the two images differ.
pub fn render_anomalous(
    spec: &SynthSpec,
    class: usize,
    defect: DefectKind,
    key: &str,
) -> (RgbImage, RgbImage, GrayImage) {
    let recipe = &spec.classes[class];
    let size = spec.image_size;
    let mut rng = stream(spec.seed, key);
    let jitter = draw_jitter(&mut rng, spec);
    let base = render_float(recipe, size, jitter, spec.noise, &mut rng);
    let twin = quantize(&base, size);
    let s = size as f32;
    let mut defective = base.clone();
    match defect {
        DefectKind::ForeignTexture => {
            let others: Vec<_> = (0..spec.classes.len()).filter(|&k| k != class).collect();
            let foreign = &spec.classes[others[rng.random_range(0..others.len())]];
            let fj = draw_jitter(&mut rng, spec);
            let (w, h) = (
                rng.random_range(0.18..0.32) * s,
                rng.random_range(0.18..0.32) * s,
            );
            let (x0, y0) = (rng.random_range(0.0..s - w), rng.random_range(0.0..s - h));
            let normal = Normal::new(0.0f32, spec.noise.max(1e-9)).unwrap();
            for y in y0 as u32..(y0 + h) as u32 {
                for x in x0 as u32..(x0 + w) as u32 {
                    let mut px = shade(
                        foreign,
                        motif(foreign, x as f32, y as f32, fj.phase),
                        fj.gain,
                    );
                    if spec.noise > 0.0 {
                        for c in &mut px {
                            *c += normal.sample(&mut rng);
                        }
                    }
                    defective[(y * size + x) as usize] = px;
                }
            }
        }
        DefectKind::Blotch => {
            let r = rng.random_range(0.08..0.15) * s;
            let (cx, cy) = (rng.random_range(r..s - r), rng.random_range(r..s - r));
            let delta = if rng.random_bool(0.5) { 90.0 } else { -90.0 };
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                    if d <= r {
                        for c in &mut defective[(y * size + x) as usize] {
                            *c += delta;
                        }
                    }
                }
            }
        }
        DefectKind::MissingElement => {
            // Erase whole motif cells in texture coordinates so the
            // surrounding pattern stays intact.
            let p = recipe.period;
            let (sin, cos) = recipe.angle.to_radians().sin_cos();
            let cell = |x: f32, y: f32| {
                let u = x * cos + y * sin + jitter.phase.0;
                let v = -x * sin + y * cos + jitter.phase.1;
                ((u / p).floor() as i64, (v / p).floor() as i64)
            };
            let span = 2;
            let background = shade(recipe, 0.0, jitter.gain);
            for _ in 0..64 {
                let (cu, cv) = cell(
                    rng.random_range(p..s - 2.0 * p),
                    rng.random_range(p..s - 2.0 * p),
                );
                let hits: Vec<usize> = (0..size * size)
                    .filter(|&i| {
                        let (iu, iv) = cell((i % size) as f32, (i / size) as f32);
                        (cu..cu + span).contains(&iu) && (cv..cv + span).contains(&iv)
                    })
                    .map(|i| i as usize)
                    .collect();
                // the cell must carry foreground, otherwise nothing is missing
                let fg = hits.iter().filter(|&&i| {
                    let (x, y) = ((i as u32 % size) as f32, (i as u32 / size) as f32);
                    motif(recipe, x, y, jitter.phase) > 0.5
                });
                if fg.count() * 8 >= hits.len().max(1) {
                    for i in hits {
                        defective[i] = background;
                    }
                    break;
                }
            }
        }
    }
    let image = quantize(&defective, size);
    let mask = GrayImage::from_fn(size, size, |x, y| {
        Luma([if image.get_pixel(x, y) != twin.get_pixel(x, y) {
            255
        } else {
            0
        }])
    });
    (image, twin, mask)
}

enum Job {
    Normal {
        class: usize,
        rel: String,
        split: &'static str,
    },
    Anomalous {
        class: usize,
        defect: DefectKind,
        rel: String,
        mask: String,
    },
}

fn plan(spec: &SynthSpec) -> Vec<Job> {
    let mut jobs = Vec::new();
    for (k, c) in spec.classes.iter().enumerate() {
        for i in 0..spec.n_train {
            jobs.push(Job::Normal {
                class: k,
                rel: format!("{}/train/good/{i:03}.png", c.name),
                split: "train",
            });
        }
        for i in 0..spec.n_test_normal {
            jobs.push(Job::Normal {
                class: k,
                rel: format!("{}/test/good/{i:03}.png", c.name),
                split: "test",
            });
        }
        let mut counters = vec![0usize; spec.defects.len()];
        for i in 0..spec.n_test_anomalous {
            let d = i % spec.defects.len();
            let defect = spec.defects[d];
            let j = counters[d];
            counters[d] += 1;
            jobs.push(Job::Anomalous {
                class: k,
                defect,
                rel: format!("{}/test/{}/{j:03}.png", c.name, defect.dir_name()),
                mask: format!(
                    "{}/ground_truth/{}/{j:03}_mask.png",
                    c.name,
                    defect.dir_name()
                ),
            });
        }
    }
    jobs
}

fn is_nonempty_dir(path: &Path) -> Result<bool> {
    match fs::read_dir(path) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) if e.kind() == std::io::ErrorKind::NotADirectory => Ok(true),
        Err(e) => Err(e.into()),
    }
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes the corpus under `out_root` and returns its manifest. A non-empty
/// `out_root` is an error unless `force` is set, in which case its contents
/// are removed first.
pub fn generate_dataset(spec: &SynthSpec, out_root: &Path, force: bool) -> Result<Manifest> {
    spec.validate()?;
    if is_nonempty_dir(out_root)? {
        if !force {
            return Err(Error::NotEmpty(out_root.to_path_buf()));
        }
        if out_root.is_dir() {
            for entry in fs::read_dir(out_root)? {
                let p = entry?.path();
                if p.is_dir() {
                    fs::remove_dir_all(&p)?;
                } else {
                    fs::remove_file(&p)?;
                }
            }
        } else {
            fs::remove_file(out_root)?;
        }
    }
    fs::create_dir_all(out_root)?;
    let jobs = plan(spec);
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|job| -> Result<ManifestEntry> {
            match job {
                Job::Normal { class, rel, split } => {
                    let img = render_normal(spec, &spec.classes[*class], rel);
                    save_png(&img, &out_root.join(rel))?;
                    Ok(ManifestEntry {
                        path: rel.clone(),
                        class: spec.classes[*class].name.clone(),
                        split: split.to_string(),
                        defect: None,
                        mask: None,
                    })
                }
                Job::Anomalous {
                    class,
                    defect,
                    rel,
                    mask,
                } => {
                    let (img, _, m) = render_anomalous(spec, *class, *defect, rel);
                    if m.pixels().all(|p| p[0] == 0) {
                        return Err(Error::config(format!(
                            "{rel}: the defect left the image unchanged"
                        )));
                    }
                    save_png(&img, &out_root.join(rel))?;
                    save_png(&m, &out_root.join(mask))?;
                    Ok(ManifestEntry {
                        path: rel.clone(),
                        class: spec.classes[*class].name.clone(),
                        split: "test".into(),
                        defect: Some(defect.dir_name().into()),
                        mask: Some(mask.clone()),
                    })
                }
            }
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        spec: spec.clone(),
        files: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(out_root.join(MANIFEST_NAME), json)?;
    Ok(manifest)
}

/// All files below `root`, relative and sorted.
pub fn list_tree(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(&p, root, out)?;
            } else {
                out.push(p.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}
