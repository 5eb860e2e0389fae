//! Evaluation driver: episodic runs over synthetic or on-disk datasets, the
//! TVEA threshold sweep, the component ablation table, and report emission.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;

use crate::adapt::{run_task, ParamCache, Pipeline, TaskOutput};
use crate::config::Config;
use crate::episode::{episode_plan, load_episode, save_gray_map, save_mask};
use crate::error::{Error, Result};
use crate::metrics::{compute_miou, EpisodeResult, MetricsReport};
use crate::synthetic::{make_synthetic_episode, pick_separable_classes, SyntheticSpec};
use crate::tvea::{build_prompts, generate_cam, make_pseudo_label, ThresholdMode};
use crate::types::{BinaryMask, Episode};

/// Synthetic evaluation suite: `per_class` episodes for each class name.
pub fn synthetic_episodes(
    classes: &[String],
    per_class: usize,
    image_size: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let plan = episode_plan(classes, per_class, seed);
    plan.iter()
        .map(|(class, ep_seed)| {
            let mut spec = SyntheticSpec::new(class, image_size, k);
            spec.all_classes = classes.to_vec();
            make_synthetic_episode(&spec, *ep_seed)
        })
        .collect()
}

/// Default synthetic suite classes. The first four are curated: their
/// textures are well separated from the background AND the toy encoder's
/// multi-label prompts discriminate each of them (some color names fail
/// that second property). Larger suites fall back to color-based picking.
pub fn default_synthetic_classes(n: usize) -> Vec<String> {
    const CURATED: [&str; 4] = ["copper", "jade", "saffron", "mint"];
    let mut classes: Vec<String> = CURATED.iter().take(n).map(|s| s.to_string()).collect();
    if n > CURATED.len() {
        for extra in pick_separable_classes(n + CURATED.len(), "background") {
            if !classes.contains(&extra) {
                classes.push(extra);
            }
            if classes.len() == n {
                break;
            }
        }
    }
    classes
}

/// Episodes sampled from the configured on-disk dataset.
pub fn dataset_episodes(cfg: &Config) -> Result<Vec<Episode>> {
    if cfg.dataset.root.is_empty() {
        return Err(Error::Config("dataset.root is not set".into()));
    }
    let root = PathBuf::from(&cfg.dataset.root);
    let classes = if cfg.dataset.classes.is_empty() {
        cfg.dataset.adapter.list_classes(&root)?
    } else {
        cfg.dataset.classes.clone()
    };
    let plan = episode_plan(&classes, cfg.eval.episodes_per_class, cfg.eval.seed);
    plan.iter()
        .map(|(class, ep_seed)| {
            load_episode(
                &root,
                &cfg.dataset.id,
                class,
                cfg.dataset.k,
                *ep_seed,
                cfg.dataset.adapter,
                cfg.input_size,
            )
        })
        .collect()
}

fn results_from_outputs(episodes: &[Episode], outputs: &[TaskOutput]) -> Result<Vec<EpisodeResult>> {
    episodes
        .iter()
        .zip(outputs)
        .map(|(ep, out)| {
            let gt = ep
                .query_gt
                .clone()
                .ok_or_else(|| Error::Data("episode has no query ground truth".into()))?;
            Ok(EpisodeResult {
                pred: out.mask_set.final_mask.clone(),
                gt,
                class: ep.fg_class.clone(),
            })
        })
        .collect()
}

/// Runs the full pipeline over the episodes (first-episode caching rule) and
/// aggregates metrics.
pub fn evaluate_pipeline(
    pipeline: &Pipeline,
    episodes: Vec<Episode>,
    cache: &ParamCache,
) -> Result<(MetricsReport, Vec<TaskOutput>)> {
    let start = Instant::now();
    let outputs = run_task(pipeline, episodes.clone(), cache)?;
    let results = results_from_outputs(&episodes, &outputs)?;
    let adaptations = outputs.iter().filter(|o| o.record.is_some()).count();
    let report = MetricsReport::from_results(
        &results,
        adaptations,
        start.elapsed().as_secs_f64(),
        serde_json::to_value(&pipeline.cfg).unwrap_or_default(),
    )?;
    Ok((report, outputs))
}

/// Evaluates an arbitrary per-episode predictor (used by oracle tests and
/// baselines).
pub fn evaluate_with(
    episodes: &[Episode],
    config: serde_json::Value,
    mut predictor: impl FnMut(&Episode) -> Result<BinaryMask>,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let mut results = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let gt = ep
            .query_gt
            .clone()
            .ok_or_else(|| Error::Data("episode has no query ground truth".into()))?;
        results.push(EpisodeResult {
            pred: predictor(ep)?,
            gt,
            class: ep.fg_class.clone(),
        });
    }
    MetricsReport::from_results(&results, 0, start.elapsed().as_secs_f64(), config)
}

/// One row of the threshold sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub miou: f64,
}

/// Pseudo-label-only evaluation at each fixed threshold: the query CAM is
/// thresholded at `tau` and scored directly against the ground truth.
pub fn sweep_threshold(
    pipeline: &Pipeline,
    episodes: &[Episode],
    taus: &[f64],
) -> Result<Vec<SweepRow>> {
    if taus.is_empty() {
        return Err(Error::Argument("sweep needs at least one threshold".into()));
    }
    // CAMs depend only on the episode, so compute them once
    let mut cams = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let prompts = build_prompts(
            &ep.fg_class,
            &ep.all_classes,
            pipeline.cfg.tvea.multi_label,
            &pipeline.cfg.tvea.prompt_template,
        )?;
        let enc = pipeline.vl.encode_image(&ep.query)?;
        cams.push(generate_cam(&enc, &prompts, pipeline.vl.as_ref(), ep.image_size())?);
    }
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut results = Vec::with_capacity(episodes.len());
        for (ep, cam) in episodes.iter().zip(&cams) {
            let pl = make_pseudo_label(
                cam,
                ThresholdMode::Fixed(tau),
                pipeline.cfg.tvea.crf,
                &ep.query,
            )?;
            results.push(EpisodeResult {
                pred: pl.mask,
                gt: ep
                    .query_gt
                    .clone()
                    .ok_or_else(|| Error::Data("episode has no ground truth".into()))?,
                class: ep.fg_class.clone(),
            });
        }
        rows.push(SweepRow {
            tau,
            miou: compute_miou(&results)?,
        });
    }
    Ok(rows)
}

/// One row of the component ablation table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub vvea: bool,
    pub tvea: bool,
    pub miou: f64,
    pub fb_iou: f64,
}

/// Runs the four VVEA/TVEA on-off combinations over the same episodes.
pub fn ablate(cfg: &Config, episodes: Vec<Episode>) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4);
    for (vvea, tvea) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut run_cfg = cfg.clone();
        run_cfg.vvea.enabled = vvea;
        run_cfg.tvea.enabled = tvea;
        let pipeline = Pipeline::new(run_cfg.clone())?;
        let cache = ParamCache::new(None, run_cfg.adaptation_hash());
        let (report, _) = evaluate_pipeline(&pipeline, episodes.clone(), &cache)?;
        rows.push(AblationRow {
            vvea,
            tvea,
            miou: report.miou,
            fb_iou: report.fb_iou,
        });
    }
    Ok(rows)
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(report).unwrap())?;
    Ok(())
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::from("tau,miou\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.tau, r.miou));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Minimal line chart of the sweep (tau on x, mIoU on y) as a PNG.
pub fn write_sweep_plot(rows: &[SweepRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Argument("nothing to plot".into()));
    }
    let (w, h) = (480usize, 320usize);
    let margin = 40usize;
    let mut canvas = Array2::<f64>::from_elem((h, w), 1.0);
    // axes
    for x in margin..w - margin / 2 {
        canvas[[h - margin, x]] = 0.0;
    }
    for y in margin / 2..=h - margin {
        canvas[[y, margin]] = 0.0;
    }
    let (tau_min, tau_max) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.tau), hi.max(r.tau))
        });
    let span = (tau_max - tau_min).max(1e-9);
    let to_px = |tau: f64, miou: f64| -> (usize, usize) {
        let x = margin as f64 + (tau - tau_min) / span * (w - margin - margin / 2) as f64;
        let y = (h - margin) as f64 - miou.clamp(0.0, 1.0) * (h - margin - margin / 2) as f64;
        (y.round() as usize, x.round() as usize)
    };
    let mut prev: Option<(usize, usize)> = None;
    for r in rows {
        let (y, x) = to_px(r.tau, r.miou);
        // point marker
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (py, px) = ((y as i64 + dy).max(0) as usize, (x as i64 + dx).max(0) as usize);
                if py < h && px < w {
                    canvas[[py, px]] = 0.0;
                }
            }
        }
        if let Some((py, px)) = prev {
            let steps = (y.abs_diff(py)).max(x.abs_diff(px)).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let ly = (py as f64 + (y as f64 - py as f64) * t).round() as usize;
                let lx = (px as f64 + (x as f64 - px as f64) * t).round() as usize;
                if ly < h && lx < w {
                    canvas[[ly, lx]] = 0.0;
                }
            }
        }
        prev = Some((y, x));
    }
    save_gray_map(&canvas, path)
}

/// Per-episode artifact dump: final mask plus optional per-component maps in
/// one tensor container.
pub fn dump_mask_set(
    out: &crate::seg_head::MaskSet,
    dir: &Path,
    stem: &str,
    with_components: bool,
) -> Result<()> {
    save_mask(&out.final_mask, &dir.join(format!("{stem}_mask.png")))?;
    if with_components {
        let mut tf = crate::tensorfile::TensorFile::with_meta(
            serde_json::json!({"format": "tvgseg-maps", "version": 1}).to_string(),
        );
        tf.insert_f64("fused", &out.fused.clone().into_dyn());
        tf.insert_f64("rough_fg_prob", &out.rough_fg_prob.clone().into_dyn());
        tf.insert_f64("rough_logits", &out.rough_logits.clone().into_dyn());
        for (i, m) in out.attention_masks.iter().enumerate() {
            tf.insert_f64(format!("attention.{i}"), &m.clone().into_dyn());
        }
        for (i, m) in out.coarse_sims.iter().enumerate() {
            if let Some(m) = m {
                tf.insert_f64(format!("coarse.{i}"), &m.clone().into_dyn());
            }
        }
        if let Some(p) = &out.pseudo {
            tf.insert_f64("pseudo_heatmap", &p.source.heatmap.clone().into_dyn());
            tf.insert_f64("pseudo_mask", &p.mask.to_f64().into_dyn());
        }
        tf.save(&dir.join(format!("{stem}_maps.tvgt")))?;
    }
    Ok(())
}
