//! Domain types shared across the pipeline: images, binary masks and the
//! few-shot episode itself.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// RGB image, channel-first `[3 × H × W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::Shape(format!(
                "image must have 3 channels, got {}",
                data.dim().0
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("image contains non-finite values".into()));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Format("image values outside [0, 1]".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Bilinear resize to `oh × ow`.
    pub fn resize(&self, oh: usize, ow: usize) -> Self {
        let (c, h, w) = self.data.dim();
        let mut out = Array3::<f64>::zeros((c, oh, ow));
        let sy = h as f64 / oh as f64;
        let sx = w as f64 / ow as f64;
        for ch in 0..c {
            for oy in 0..oh {
                let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let ty = fy - y0 as f64;
                for ox in 0..ow {
                    let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let tx = fx - x0 as f64;
                    let top = self.data[[ch, y0, x0]] * (1.0 - tx) + self.data[[ch, y0, x1]] * tx;
                    let bot = self.data[[ch, y1, x0]] * (1.0 - tx) + self.data[[ch, y1, x1]] * tx;
                    out[[ch, oy, ox]] = (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0);
                }
            }
        }
        Self { data: out }
    }
}

/// What a binary mask annotates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskRole {
    Support,
    QueryGt,
    Pseudo,
    Predicted,
}

/// Single-channel `{0, 1}` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    data: Array2<u8>,
    role: MaskRole,
}

impl BinaryMask {
    pub fn new(data: Array2<u8>, role: MaskRole) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        Ok(Self { data, role })
    }

    /// Thresholds a real-valued map at `tau` (`>= tau` is foreground).
    pub fn from_map(map: &Array2<f64>, tau: f64, role: MaskRole) -> Self {
        Self {
            data: map.mapv(|v| u8::from(v >= tau)),
            role,
        }
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn role(&self) -> MaskRole {
        self.role
    }

    pub fn with_role(&self, role: MaskRole) -> Self {
        Self {
            data: self.data.clone(),
            role,
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Nearest-neighbor resize, which keeps values in `{0, 1}`.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Self {
        let (h, w) = self.data.dim();
        let mut out = Array2::<u8>::zeros((oh, ow));
        for oy in 0..oh {
            let sy = (((oy as f64 + 0.5) * h as f64 / oh as f64) - 0.5)
                .round()
                .clamp(0.0, (h - 1) as f64) as usize;
            for ox in 0..ow {
                let sx = (((ox as f64 + 0.5) * w as f64 / ow as f64) - 0.5)
                    .round()
                    .clamp(0.0, (w - 1) as f64) as usize;
                out[[oy, ox]] = self.data[[sy, sx]];
            }
        }
        Self {
            data: out,
            role: self.role,
        }
    }

    /// Mask as a real-valued `{0.0, 1.0}` map.
    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }
}

/// One few-shot task: K annotated support pairs plus a query image.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<(ImageTensor, BinaryMask)>,
    pub query: ImageTensor,
    pub query_gt: Option<BinaryMask>,
    pub fg_class: String,
    pub all_classes: Vec<String>,
    pub dataset_id: String,
}

impl Episode {
    pub fn new(
        support: Vec<(ImageTensor, BinaryMask)>,
        query: ImageTensor,
        query_gt: Option<BinaryMask>,
        fg_class: String,
        all_classes: Vec<String>,
        dataset_id: String,
    ) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Argument("episode needs at least one support pair".into()));
        }
        if !all_classes.contains(&fg_class) {
            return Err(Error::Argument(format!(
                "fg_class '{fg_class}' not in class list"
            )));
        }
        for (img, mask) in &support {
            if img.height() != mask.height() || img.width() != mask.width() {
                return Err(Error::Shape("support image/mask size mismatch".into()));
            }
            if img.height() != img.width() {
                return Err(Error::Shape("episode images must be square".into()));
            }
            if mask.foreground_count() == 0 {
                return Err(Error::Data("support mask has no foreground pixels".into()));
            }
        }
        if query.height() != query.width() {
            return Err(Error::Shape("episode images must be square".into()));
        }
        if let Some(gt) = &query_gt {
            if gt.height() != query.height() || gt.width() != query.width() {
                return Err(Error::Shape("query ground truth size mismatch".into()));
            }
        }
        Ok(Self {
            support,
            query,
            query_gt,
            fg_class,
            all_classes,
            dataset_id,
        })
    }

    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn image_size(&self) -> usize {
        self.query.height()
    }
}
