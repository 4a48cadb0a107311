//! Loader for the MVTec directory layout:
//!
//! ```text
//! root/<class>/train/good/*.png
//! root/<class>/test/<defect_type>/*.png          (defect_type "good" = normal)
//! root/<class>/ground_truth/<defect_type>/<stem>_mask.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};

pub const GOOD: &str = "good";
pub const MASK_THRESHOLD: u8 = 127;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub class: String,
    /// `None` for defect-free images.
    pub defect: Option<String>,
    pub mask_path: Option<PathBuf>,
}

impl Sample {
    pub fn is_anomalous(&self) -> bool {
        self.defect.is_some()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))? {
        out.push(entry?.path());
    }
    out.sort();
    Ok(out)
}

fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect())
}

/// Class directories under `root`, sorted by name. A directory counts as a
/// class when it has a `train` or `test` subdirectory.
pub fn list_classes(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let classes: Vec<String> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.join("train").is_dir() || p.join("test").is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    if classes.is_empty() {
        return Err(Error::Dataset(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    Ok(classes)
}

fn select(root: &Path, only: Option<&str>) -> Result<Vec<String>> {
    let all = list_classes(root)?;
    match only {
        None => Ok(all),
        Some(c) if all.iter().any(|a| a == c) => Ok(vec![c.to_string()]),
        Some(c) => Err(Error::Dataset(format!(
            "class `{c}` not found under {}",
            root.display()
        ))),
    }
}

/// Normal training images of every class (or only `class`).
pub fn train_samples(root: &Path, class: Option<&str>) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for c in select(root, class)? {
        let dir = root.join(&c).join("train").join(GOOD);
        let files = if dir.is_dir() {
            pngs(&dir)?
        } else {
            Vec::new()
        };
        if files.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        out.extend(files.into_iter().map(|path| Sample {
            path,
            class: c.clone(),
            defect: None,
            mask_path: None,
        }));
    }
    Ok(out)
}

/// Test images with their mask paths. Anomalous images without a mask are an
/// error.
pub fn test_samples(root: &Path, class: Option<&str>) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for c in select(root, class)? {
        let test = root.join(&c).join("test");
        if !test.is_dir() {
            continue;
        }
        for kind in sorted_entries(&test)?.into_iter().filter(|p| p.is_dir()) {
            let name = kind.file_name().unwrap().to_string_lossy().into_owned();
            for path in pngs(&kind)? {
                if name == GOOD {
                    out.push(Sample {
                        path,
                        class: c.clone(),
                        defect: None,
                        mask_path: None,
                    });
                    continue;
                }
                let stem = path.file_stem().unwrap().to_string_lossy();
                let mask = root
                    .join(&c)
                    .join("ground_truth")
                    .join(&name)
                    .join(format!("{stem}_mask.png"));
                if !mask.is_file() {
                    return Err(Error::Dataset(format!(
                        "missing mask {} for {}",
                        mask.display(),
                        path.display()
                    )));
                }
                out.push(Sample {
                    path,
                    class: c.clone(),
                    defect: Some(name.clone()),
                    mask_path: Some(mask),
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!(
            "no test images under {}",
            root.display()
        )));
    }
    Ok(out)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// Binarizes an 8-bit mask: values above 127 are defect pixels.
pub fn binarize_mask(mask: &GrayImage, size: usize) -> Array2<bool> {
    let resized;
    let m = if mask.width() as usize == size && mask.height() as usize == size {
        mask
    } else {
        resized = image::imageops::resize(mask, size as u32, size as u32, FilterType::Nearest);
        &resized
    };
    Array2::from_shape_fn((size, size), |(y, x)| {
        m.get_pixel(x as u32, y as u32)[0] > MASK_THRESHOLD
    })
}

/// Ground-truth mask at `size × size`; all-normal for defect-free samples.
pub fn load_mask(sample: &Sample, size: usize) -> Result<Array2<bool>> {
    match &sample.mask_path {
        None => Ok(Array2::from_elem((size, size), false)),
        Some(p) => {
            let img = image::open(p).map_err(|e| Error::Load {
                path: p.clone(),
                reason: e.to_string(),
            })?;
            Ok(binarize_mask(&img.to_luma8(), size))
        }
    }
}

/// Decodes PNG bytes into a binary mask. Entry point for fuzzing.
pub fn decode_mask(bytes: &[u8], size: usize) -> Result<Array2<bool>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    Ok(binarize_mask(&img.to_luma8(), size))
}
