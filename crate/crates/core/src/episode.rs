//! Episode ingestion from on-disk dataset layouts.
//!
//! Each adapter documents the directory tree it expects. The `folder`
//! adapter is the generic fallback; the named adapters cover the usual
//! preprocessed layouts of the four benchmark datasets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{BinaryMask, Episode, ImageTensor, MaskRole};

/// On-disk layout adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum AdapterKind {
    /// `root/<class>/images/<stem>.{png,jpg}` + `root/<class>/masks/<stem>.png`
    #[default]
    Folder,
    /// FSS-1000 style: `root/<class>/<n>.jpg` + `root/<class>/<n>.png`
    Fss1000,
    /// ISIC2018 style: `root/images/<id>.jpg` +
    /// `root/masks/<id>_segmentation.png`, single class `lesion`
    Isic,
    /// Chest X-ray style: `root/images/<id>.png` + `root/masks/<id>_mask.png`,
    /// single class `lung`
    ChestXray,
    /// DeepGlobe preprocessed chips; same tree as `folder`
    Deepglobe,
}


const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

impl AdapterKind {
    pub fn list_classes(&self, root: &Path) -> Result<Vec<String>> {
        match self {
            AdapterKind::Folder | AdapterKind::Fss1000 | AdapterKind::Deepglobe => {
                let mut classes: Vec<String> = sorted_dir(root)?
                    .into_iter()
                    .filter(|p| p.is_dir())
                    .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(String::from))
                    .collect();
                classes.sort();
                if classes.is_empty() {
                    return Err(Error::Data(format!(
                        "no class directories under {}",
                        root.display()
                    )));
                }
                Ok(classes)
            }
            AdapterKind::Isic => Ok(vec!["lesion".to_string()]),
            AdapterKind::ChestXray => Ok(vec!["lung".to_string()]),
        }
    }

    /// Sorted `(image, mask)` path pairs for one class.
    pub fn list_pairs(&self, root: &Path, class: &str) -> Result<Vec<(PathBuf, PathBuf)>> {
        match self {
            AdapterKind::Folder | AdapterKind::Deepglobe => {
                let img_dir = root.join(class).join("images");
                let mask_dir = root.join(class).join("masks");
                let mut pairs = Vec::new();
                for img in sorted_dir(&img_dir)? {
                    if !is_image(&img) {
                        continue;
                    }
                    let stem = img.file_stem().unwrap().to_string_lossy().to_string();
                    let mask = mask_dir.join(format!("{stem}.png"));
                    if mask.exists() {
                        pairs.push((img, mask));
                    }
                }
                Ok(pairs)
            }
            AdapterKind::Fss1000 => {
                let dir = root.join(class);
                let mut pairs = Vec::new();
                for img in sorted_dir(&dir)? {
                    if img.extension().and_then(|e| e.to_str()) != Some("jpg") {
                        continue;
                    }
                    let mask = img.with_extension("png");
                    if mask.exists() {
                        pairs.push((img, mask));
                    }
                }
                Ok(pairs)
            }
            AdapterKind::Isic => {
                let img_dir = root.join("images");
                let mask_dir = root.join("masks");
                let mut pairs = Vec::new();
                for img in sorted_dir(&img_dir)? {
                    if !is_image(&img) {
                        continue;
                    }
                    let stem = img.file_stem().unwrap().to_string_lossy().to_string();
                    let mask = mask_dir.join(format!("{stem}_segmentation.png"));
                    if mask.exists() {
                        pairs.push((img, mask));
                    }
                }
                Ok(pairs)
            }
            AdapterKind::ChestXray => {
                let img_dir = root.join("images");
                let mask_dir = root.join("masks");
                let mut pairs = Vec::new();
                for img in sorted_dir(&img_dir)? {
                    if !is_image(&img) {
                        continue;
                    }
                    let stem = img.file_stem().unwrap().to_string_lossy().to_string();
                    let mask = mask_dir.join(format!("{stem}_mask.png"));
                    if mask.exists() {
                        pairs.push((img, mask));
                    }
                }
                Ok(pairs)
            }
        }
    }
}

/// Loads an image file as a `[3 × H × W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = f64::from(px.0[c]) / 255.0;
        }
    }
    ImageTensor::new(data)
}

/// Loads a mask file, normalizing `{0, 255}` or `{0, 1}` pixels to `{0, 1}`.
pub fn load_mask(path: &Path, role: MaskRole) -> Result<BinaryMask> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut data = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        let v = px.0[0];
        data[[y as usize, x as usize]] = u8::from(v == 1 || v >= 128);
    }
    BinaryMask::new(data, role)
}

/// Writes a `{0,1}` mask as an 8-bit PNG with foreground = 255.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let (h, w) = mask.data().dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in mask.data().indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Luma([v * 255]));
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes a `[0,1]` map as an 8-bit grayscale PNG.
pub fn save_gray_map(map: &Array2<f64>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let (h, w) = map.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in map.indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Luma([(v.clamp(0.0, 1.0) * 255.0) as u8]));
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_pair(img_path: &Path, mask_path: &Path, size: usize, role: MaskRole) -> Result<(ImageTensor, BinaryMask)> {
    let img = load_image(img_path)?;
    let mask = load_mask(mask_path, role)?;
    if img.height() != mask.height() || img.width() != mask.width() {
        return Err(Error::Format(format!(
            "image {} is {}x{} but mask {} is {}x{}",
            img_path.display(),
            img.height(),
            img.width(),
            mask_path.display(),
            mask.height(),
            mask.width()
        )));
    }
    Ok((img.resize(size, size), mask.resize_nearest(size, size)))
}

/// Samples `k` support pairs plus one query for `class_name`, without
/// replacement, deterministically in `rng_seed`.
pub fn load_episode(
    dataset_root: &Path,
    dataset_id: &str,
    class_name: &str,
    k: usize,
    rng_seed: u64,
    adapter: AdapterKind,
    input_size: usize,
) -> Result<Episode> {
    if !dataset_root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root {} is not a directory",
            dataset_root.display()
        )));
    }
    let classes = adapter.list_classes(dataset_root)?;
    if !classes.iter().any(|c| c == class_name) {
        return Err(Error::Data(format!(
            "class '{class_name}' not found in {}",
            dataset_root.display()
        )));
    }
    let pairs = adapter.list_pairs(dataset_root, class_name)?;
    if pairs.len() < k + 1 {
        return Err(Error::InsufficientSamples {
            class: class_name.to_string(),
            available: pairs.len(),
            needed: k + 1,
        });
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    order.shuffle(&mut rng);

    let mut support = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        support.push(load_pair(&pairs[i].0, &pairs[i].1, input_size, MaskRole::Support)?);
    }
    let qi = order[k];
    let (query, query_gt) = load_pair(&pairs[qi].0, &pairs[qi].1, input_size, MaskRole::QueryGt)?;

    Episode::new(
        support,
        query,
        Some(query_gt),
        class_name.to_string(),
        classes,
        dataset_id.to_string(),
    )
}

/// Enumerates `(class, seed)` pairs for an evaluation run: `episodes` per
/// class, with per-episode seeds derived from `base_seed`.
pub fn episode_plan(classes: &[String], episodes: usize, base_seed: u64) -> Vec<(String, u64)> {
    let mut plan = Vec::with_capacity(classes.len() * episodes);
    for (ci, class) in classes.iter().enumerate() {
        for e in 0..episodes {
            let seed = base_seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((ci as u64) << 32)
                .wrapping_add(e as u64);
            plan.push((class.clone(), seed));
        }
    }
    plan
}

/// Groups a plan by class, preserving order; used by the first-episode
/// caching rule.
pub fn group_by_class(plan: &[(String, u64)]) -> BTreeMap<String, Vec<u64>> {
    let mut map: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for (class, seed) in plan {
        map.entry(class.clone()).or_default().push(*seed);
    }
    map
}
