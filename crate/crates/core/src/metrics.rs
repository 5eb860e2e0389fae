//! Segmentation metrics: per-class IoU, mIoU (micro within class, macro
//! across classes) and class-agnostic FB-IoU.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::BinaryMask;

/// Intersection-over-union of one class between two masks. Defined as 1
/// when the class is empty in both.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask, class_value: u8) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Argument(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.data().iter().zip(gt.data().iter()) {
        let pi = *p == class_value;
        let gi = *g == class_value;
        if pi && gi {
            inter += 1;
        }
        if pi || gi {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// One evaluated episode.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub pred: BinaryMask,
    pub gt: BinaryMask,
    pub class: String,
}

fn class_counts(results: &[EpisodeResult], class_value: u8) -> Result<BTreeMap<String, (usize, usize)>> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in results {
        if r.pred.height() != r.gt.height() || r.pred.width() != r.gt.width() {
            return Err(Error::Argument("episode masks have mismatched shapes".into()));
        }
        let entry = counts.entry(r.class.clone()).or_insert((0, 0));
        for (p, g) in r.pred.data().iter().zip(r.gt.data().iter()) {
            let pi = *p == class_value;
            let gi = *g == class_value;
            if pi && gi {
                entry.0 += 1;
            }
            if pi || gi {
                entry.1 += 1;
            }
        }
    }
    Ok(counts)
}

/// Per-class foreground IoU, micro-averaged over each class's episodes.
pub fn per_class_iou(results: &[EpisodeResult]) -> Result<BTreeMap<String, f64>> {
    if results.is_empty() {
        return Err(Error::Argument("no episode results".into()));
    }
    Ok(class_counts(results, 1)?
        .into_iter()
        .map(|(class, (inter, union))| {
            let v = if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            };
            (class, v)
        })
        .collect())
}

/// Foreground IoU micro-averaged within each class, macro-averaged across
/// classes.
pub fn compute_miou(results: &[EpisodeResult]) -> Result<f64> {
    let per_class = per_class_iou(results)?;
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Mean of class-agnostic foreground and background IoU, aggregated over
/// all episodes.
pub fn compute_fb_iou(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Argument("no episode results".into()));
    }
    let mut total = 0.0;
    for class_value in [1u8, 0u8] {
        let mut inter = 0usize;
        let mut union = 0usize;
        for r in results {
            for (p, g) in r.pred.data().iter().zip(r.gt.data().iter()) {
                let pi = *p == class_value;
                let gi = *g == class_value;
                if pi && gi {
                    inter += 1;
                }
                if pi || gi {
                    union += 1;
                }
            }
        }
        total += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(total / 2.0)
}

/// Evaluation summary with the resolved configuration embedded.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsReport {
    pub per_class_iou: BTreeMap<String, f64>,
    pub miou: f64,
    pub fb_iou: f64,
    pub episode_count: usize,
    pub adaptations: usize,
    pub runtime_s: f64,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn from_results(
        results: &[EpisodeResult],
        adaptations: usize,
        runtime_s: f64,
        config: serde_json::Value,
    ) -> Result<Self> {
        Ok(Self {
            per_class_iou: per_class_iou(results)?,
            miou: compute_miou(results)?,
            fb_iou: compute_fb_iou(results)?,
            episode_count: results.len(),
            adaptations,
            runtime_s,
            config,
        })
    }
}
