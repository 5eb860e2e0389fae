//! Deterministic affine view augmentation.
//!
//! Transforms are stored in normalized `[0,1]^2` coordinates about the image
//! center, so the same transform applies at any resolution — in particular at
//! feature resolution when building pixel correspondences for the dense loss.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{BinaryMask, ImageTensor};

/// Rotation range in degrees.
const ROT_DEG: f64 = 15.0;
/// Isotropic scale range.
const SCALE: (f64, f64) = (0.85, 1.15);
/// Translation range as a fraction of the side length.
const TRANS: f64 = 0.10;
/// Shear range in degrees.
const SHEAR_DEG: f64 = 5.0;

/// Invertible 2×3 affine map on normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    /// Row-major `[[a, b, tx], [c, d, ty]]` acting on column vectors `[u, v, 1]`.
    pub matrix: [[f64; 3]; 2],
    pub seed: u64,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            seed: 0,
        }
    }

    /// Samples rotation, scale, shear and translation from the configured
    /// ranges. Degenerate draws (|det| < 1e-6) are resampled internally.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let theta = rng.gen_range(-ROT_DEG..=ROT_DEG).to_radians();
            let s = rng.gen_range(SCALE.0..=SCALE.1);
            let shear = rng.gen_range(-SHEAR_DEG..=SHEAR_DEG).to_radians().tan();
            let (tx, ty) = (rng.gen_range(-TRANS..=TRANS), rng.gen_range(-TRANS..=TRANS));
            // A = R(theta) * Shear(x) * s, acting about the center
            let (cos, sin) = (theta.cos(), theta.sin());
            let m00 = s * cos;
            let m01 = s * (cos * shear - sin);
            let m10 = s * sin;
            let m11 = s * (sin * shear + cos);
            let det = m00 * m11 - m01 * m10;
            if det.abs() < 1e-6 {
                continue;
            }
            // include the recentering: u' = A(u - c) + c + t, c = (0.5, 0.5)
            let cx = 0.5;
            let cy = 0.5;
            let bx = cx - (m00 * cx + m01 * cy) + tx;
            let by = cy - (m10 * cx + m11 * cy) + ty;
            return Self {
                matrix: [[m00, m01, bx], [m10, m11, by]],
                seed,
            };
        }
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn inverse(&self) -> Self {
        let m = &self.matrix;
        let det = self.det();
        let ia = m[1][1] / det;
        let ib = -m[0][1] / det;
        let ic = -m[1][0] / det;
        let id = m[0][0] / det;
        let bx = -(ia * m[0][2] + ib * m[1][2]);
        let by = -(ic * m[0][2] + id * m[1][2]);
        Self {
            matrix: [[ia, ib, bx], [ic, id, by]],
            seed: self.seed,
        }
    }

    /// Maps a normalized point forward.
    pub fn apply_point(&self, u: f64, v: f64) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0][0] * u + m[0][1] * v + m[0][2],
            m[1][0] * u + m[1][1] * v + m[1][2],
        )
    }

    /// Warps an image: every output pixel samples the input at the inverse
    /// map, with bilinear interpolation and zero padding outside.
    pub fn apply_to_image(&self, image: &ImageTensor) -> ImageTensor {
        let (c, h, w) = image.data().dim();
        let inv = self.inverse();
        let mut out = Array3::<f64>::zeros((c, h, w));
        for oy in 0..h {
            for ox in 0..w {
                let u = (ox as f64 + 0.5) / w as f64;
                let v = (oy as f64 + 0.5) / h as f64;
                let (su, sv) = inv.apply_point(u, v);
                let fx = su * w as f64 - 0.5;
                let fy = sv * h as f64 - 0.5;
                if fx < -0.5 || fy < -0.5 || fx > w as f64 - 0.5 || fy > h as f64 - 0.5 {
                    continue;
                }
                let x0 = fx.floor().clamp(0.0, (w - 1) as f64) as usize;
                let y0 = fy.floor().clamp(0.0, (h - 1) as f64) as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let tx = (fx - x0 as f64).clamp(0.0, 1.0);
                let ty = (fy - y0 as f64).clamp(0.0, 1.0);
                for ch in 0..c {
                    let d = image.data();
                    let top = d[[ch, y0, x0]] * (1.0 - tx) + d[[ch, y0, x1]] * tx;
                    let bot = d[[ch, y1, x0]] * (1.0 - tx) + d[[ch, y1, x1]] * tx;
                    out[[ch, oy, ox]] = (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0);
                }
            }
        }
        ImageTensor::new(out).expect("warped image stays in range")
    }

    /// Warps a mask with nearest-neighbor sampling so it stays binary.
    pub fn apply_to_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (h, w) = mask.data().dim();
        let inv = self.inverse();
        let mut out = ndarray::Array2::<u8>::zeros((h, w));
        for oy in 0..h {
            for ox in 0..w {
                let u = (ox as f64 + 0.5) / w as f64;
                let v = (oy as f64 + 0.5) / h as f64;
                let (su, sv) = inv.apply_point(u, v);
                let fx = (su * w as f64 - 0.5).round();
                let fy = (sv * h as f64 - 0.5).round();
                if fx < 0.0 || fy < 0.0 || fx >= w as f64 || fy >= h as f64 {
                    continue;
                }
                out[[oy, ox]] = mask.data()[[fy as usize, fx as usize]];
            }
        }
        BinaryMask::new(out, mask.role()).expect("warped mask stays binary")
    }

    /// Pixel correspondences this transform induces at a feature resolution:
    /// `(index in original grid, index in augmented grid)` pairs, flattened
    /// row-major. Pairs are kept only when the continuous target lands within
    /// 0.5 feature pixels of an in-bounds grid point.
    pub fn correspondences(&self, fh: usize, fw: usize) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for y in 0..fh {
            for x in 0..fw {
                let u = (x as f64 + 0.5) / fw as f64;
                let v = (y as f64 + 0.5) / fh as f64;
                let (tu, tv) = self.apply_point(u, v);
                let fx = tu * fw as f64 - 0.5;
                let fy = tv * fh as f64 - 0.5;
                let rx = fx.round();
                let ry = fy.round();
                if rx < 0.0 || ry < 0.0 || rx >= fw as f64 || ry >= fh as f64 {
                    continue;
                }
                let err = ((fx - rx).powi(2) + (fy - ry).powi(2)).sqrt();
                if err >= 0.5 {
                    continue;
                }
                pairs.push((y * fw + x, ry as usize * fw + rx as usize));
            }
        }
        pairs
    }
}

/// Produces an augmented view of an image/mask pair together with the
/// transform that generated it. Deterministic in `seed`.
pub fn augment_view(
    image: &ImageTensor,
    mask: &BinaryMask,
    seed: u64,
) -> Result<(ImageTensor, BinaryMask, AffineTransform)> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::Shape("augment_view image/mask size mismatch".into()));
    }
    let tf = AffineTransform::sample(seed);
    Ok((tf.apply_to_image(image), tf.apply_to_mask(mask), tf))
}
