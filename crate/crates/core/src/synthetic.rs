//! Synthetic episode generation for the desk-scale test suite.
//!
//! Every class name deterministically maps to a texture (base color plus a
//! faint stripe pattern). Foreground regions are rectangles or ellipses
//! filled with the class texture over a background texture. The toy
//! vision-language encoder anchors its token embeddings on the same
//! [`texture_patch`] function, which is what makes CAM tests with planted
//! signals meaningful.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{BinaryMask, Episode, ImageTensor, MaskRole};

/// Foreground geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgShape {
    Rectangle,
    Ellipse,
}

/// Parameters for one synthetic episode family.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub k: usize,
    pub shape: FgShape,
    pub fg_class: String,
    pub bg_class: String,
    pub all_classes: Vec<String>,
    /// Foreground area fraction range; must stay inside `[0.05, 0.5]`.
    pub fg_fraction: (f64, f64),
    /// Per-pixel uniform noise amplitude.
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(fg_class: &str, image_size: usize, k: usize) -> Self {
        Self {
            image_size,
            k,
            shape: FgShape::Ellipse,
            fg_class: fg_class.to_string(),
            bg_class: "background".to_string(),
            all_classes: vec![fg_class.to_string()],
            fg_fraction: (0.08, 0.35),
            noise: 0.03,
        }
    }
}

/// FNV-1a hash of a string, used to seed per-key texture parameters.
pub fn key_hash(key: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in key.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Texture parameters derived from a key.
struct Texture {
    color: [f64; 3],
    stripe_dir: (f64, f64),
    stripe_period: f64,
    stripe_amp: f64,
}

fn texture_for(key: &str) -> Texture {
    let mut rng = ChaCha8Rng::seed_from_u64(key_hash(key));
    let color = [
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.15..0.85),
    ];
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    Texture {
        color,
        stripe_dir: (angle.cos(), angle.sin()),
        stripe_period: rng.gen_range(6.0..14.0),
        stripe_amp: 0.06,
    }
}

/// Evaluates the texture of `key` at pixel `(x, y)` without noise.
fn texture_at(t: &Texture, x: f64, y: f64) -> [f64; 3] {
    let phase = (x * t.stripe_dir.0 + y * t.stripe_dir.1) * std::f64::consts::TAU
        / t.stripe_period;
    let mod_v = t.stripe_amp * phase.sin();
    [
        (t.color[0] + mod_v).clamp(0.0, 1.0),
        (t.color[1] + mod_v).clamp(0.0, 1.0),
        (t.color[2] + mod_v).clamp(0.0, 1.0),
    ]
}

/// Canonical noise-free texture patch for a key, `[3 × p × p]`. Shared with
/// the toy vision-language encoder's token anchors.
pub fn texture_patch(key: &str, p: usize) -> Array3<f64> {
    let t = texture_for(key);
    Array3::from_shape_fn((3, p, p), |(c, y, x)| texture_at(&t, x as f64, y as f64)[c])
}

/// Mean color of a key's texture; useful for picking well-separated classes.
pub fn texture_color(key: &str) -> [f64; 3] {
    texture_for(key).color
}

fn render_pair(
    spec: &SyntheticSpec,
    seed: u64,
    role: MaskRole,
) -> Result<(ImageTensor, BinaryMask)> {
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frac = rng.gen_range(spec.fg_fraction.0..=spec.fg_fraction.1);
    let aspect = rng.gen_range(0.6..1.6);
    // half extents in pixels for the requested area fraction
    let area = frac * (s * s) as f64;
    let (ha, hb) = match spec.shape {
        FgShape::Rectangle => {
            let hb = (area / (4.0 * aspect)).sqrt();
            (hb * aspect, hb)
        }
        FgShape::Ellipse => {
            let hb = (area / (std::f64::consts::PI * aspect)).sqrt();
            (hb * aspect, hb)
        }
    };
    let margin_x = (ha / s as f64).min(0.45);
    let margin_y = (hb / s as f64).min(0.45);
    let cx = rng.gen_range(margin_x.max(0.2)..=(1.0 - margin_x.max(0.2))) * s as f64;
    let cy = rng.gen_range(margin_y.max(0.2)..=(1.0 - margin_y.max(0.2))) * s as f64;

    let mut mask = Array2::<u8>::zeros((s, s));
    for y in 0..s {
        for x in 0..s {
            let dx = (x as f64 - cx) / ha;
            let dy = (y as f64 - cy) / hb;
            let inside = match spec.shape {
                FgShape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                FgShape::Ellipse => dx * dx + dy * dy <= 1.0,
            };
            if inside {
                mask[[y, x]] = 1;
            }
        }
    }
    let fg_count = mask.iter().filter(|&&v| v == 1).count();
    if fg_count == 0 {
        return Err(Error::Argument(
            "synthetic spec produced an empty foreground".into(),
        ));
    }

    let fg = texture_for(&spec.fg_class);
    let bg = texture_for(&spec.bg_class);
    let mut img = Array3::<f64>::zeros((3, s, s));
    for y in 0..s {
        for x in 0..s {
            let base = if mask[[y, x]] == 1 {
                texture_at(&fg, x as f64, y as f64)
            } else {
                texture_at(&bg, x as f64, y as f64)
            };
            for c in 0..3 {
                let n = rng.gen_range(-spec.noise..=spec.noise);
                img[[c, y, x]] = (base[c] + n).clamp(0.0, 1.0);
            }
        }
    }
    Ok((
        ImageTensor::new(img)?,
        BinaryMask::new(mask, role)?,
    ))
}

/// Generates an episode whose query ground truth is exactly the rendered
/// foreground geometry. Deterministic in `seed`.
pub fn make_synthetic_episode(spec: &SyntheticSpec, seed: u64) -> Result<Episode> {
    if spec.fg_fraction.0 < 0.05 || spec.fg_fraction.1 > 0.5 || spec.fg_fraction.0 > spec.fg_fraction.1 {
        return Err(Error::Argument(
            "fg_fraction must be a sub-range of [0.05, 0.5]".into(),
        ));
    }
    if spec.image_size < 8 {
        return Err(Error::Argument("image_size too small".into()));
    }
    if spec.k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let base = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(key_hash(&spec.fg_class));
    let mut support = Vec::with_capacity(spec.k);
    for shot in 0..spec.k {
        support.push(render_pair(
            spec,
            base.wrapping_add(1 + shot as u64),
            MaskRole::Support,
        )?);
    }
    let (query, gt) = render_pair(spec, base.wrapping_add(101), MaskRole::QueryGt)?;
    let mut all = spec.all_classes.clone();
    if !all.contains(&spec.fg_class) {
        all.push(spec.fg_class.clone());
    }
    Episode::new(
        support,
        query,
        Some(gt),
        spec.fg_class.clone(),
        all,
        "synthetic".to_string(),
    )
}

/// Class names whose textures are well separated from the background and
/// from each other, found by deterministic scanning. Used by the synthetic
/// evaluation suite.
pub fn pick_separable_classes(n: usize, bg_class: &str) -> Vec<String> {
    let candidates = [
        "copper", "jade", "indigo", "amber", "coral", "slate", "olive", "plum", "teal", "rust",
        "saffron", "maroon", "mint", "cobalt", "ochre", "lilac", "pearl", "onyx", "lime", "navy",
    ];
    let bg = texture_color(bg_class);
    let dist = |a: [f64; 3], b: [f64; 3]| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
    };
    let mut picked: Vec<String> = Vec::new();
    for cand in candidates {
        let c = texture_color(cand);
        if dist(c, bg) < 0.6 {
            continue;
        }
        if picked.iter().any(|p| dist(texture_color(p), c) < 0.4) {
            continue;
        }
        picked.push(cand.to_string());
        if picked.len() == n {
            break;
        }
    }
    picked
}
