//! Text-Visual Embedding Alignment: prompt construction, softmax-chained
//! Grad-CAM over the vision-language grid features, dynamic thresholding
//! into pseudo-labels, and the cross-entropy loss that aligns the rough
//! query mask with them.

use ndarray::{Array1, Array2, Array3};

use crate::autodiff::{Tape, Var};
use crate::backbone::{VLImageEncoding, VLTextEncoding, VlEncoder};
use crate::crf::{self, CrfParams};
use crate::error::{Error, Result};
use crate::types::{BinaryMask, ImageTensor, MaskRole};

/// Foreground and background prompt strings with their softmax ordering
/// (foreground prompts first).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub fg_prompts: Vec<String>,
    pub bg_prompts: Vec<String>,
    pub class_order: Vec<String>,
}

impl PromptSet {
    pub fn prompts(&self) -> &[String] {
        &self.class_order
    }

    /// Index of the foreground class in the softmax ordering.
    pub fn fg_index(&self) -> usize {
        0
    }
}

/// Builds prompts from the target class name. Single-label uses one negated
/// prompt; multi-label negates every remaining class, falling back to
/// single-label when the class list has no others.
pub fn build_prompts(
    fg_class: &str,
    all_classes: &[String],
    multi_label: bool,
    template: &str,
) -> Result<PromptSet> {
    if !all_classes.iter().any(|c| c == fg_class) {
        return Err(Error::Argument(format!(
            "fg class '{fg_class}' is not in the class list"
        )));
    }
    let fill = |name: &str| template.replace("{}", name);
    let fg_prompts = vec![fill(fg_class)];
    let others: Vec<&String> = all_classes.iter().filter(|c| c.as_str() != fg_class).collect();
    let bg_prompts: Vec<String> = if multi_label && !others.is_empty() {
        others.iter().map(|c| fill(&format!("non {c}"))).collect()
    } else {
        vec![fill(&format!("non {fg_class}"))]
    };
    let mut class_order = fg_prompts.clone();
    class_order.extend(bg_prompts.iter().cloned());
    let mut dedup = class_order.clone();
    dedup.sort();
    dedup.dedup();
    if dedup.len() != class_order.len() {
        return Err(Error::Argument("duplicate prompts in prompt set".into()));
    }
    Ok(PromptSet {
        fg_prompts,
        bg_prompts,
        class_order,
    })
}

/// Softmax class scores from pooled image/text cosine similarities.
pub fn class_scores(
    img: &VLImageEncoding,
    texts: &[VLTextEncoding],
    temperature: f64,
) -> Result<Array1<f64>> {
    if texts.len() < 2 {
        return Err(Error::Argument(
            "class scores need at least two text classes".into(),
        ));
    }
    let logits: Vec<f64> = texts
        .iter()
        .map(|t| img.pooled_embedding.dot(&t.embedding) / temperature)
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(Array1::from_vec(exp.into_iter().map(|e| e / z).collect()))
}

/// Differentiable activations-to-logits score path.
pub trait ScoreFn {
    fn scores<'t>(&self, tape: &'t Tape, activations: Var<'t>) -> Result<Var<'t>>;
}

/// Score path of a frozen vision-language encoder against fixed text
/// embeddings.
pub struct VlScoreFn<'a> {
    pub vl: &'a dyn VlEncoder,
    pub texts: &'a [VLTextEncoding],
    pub class_token: Option<&'a Array1<f64>>,
}

impl ScoreFn for VlScoreFn<'_> {
    fn scores<'t>(&self, tape: &'t Tape, activations: Var<'t>) -> Result<Var<'t>> {
        self.vl
            .scores_on_tape(tape, activations, self.class_token, self.texts)
    }
}

/// Per-channel Grad-CAM weights for `class_idx`, using the softmax-chained
/// combination of per-class logit gradients:
/// `w_k = (1/Z) sum_ij [ dY_c/dA * s_c(1-s_c) + sum_{c'!=c} dY_c'/dA * s_c(-s_c') ]`.
#[allow(clippy::needless_range_loop)]
pub fn gradcam_weights(
    activations: &Array3<f64>,
    score_fn: &dyn ScoreFn,
    class_idx: usize,
) -> Result<Array1<f64>> {
    let (c, h, w) = activations.dim();
    let z = (h * w) as f64;
    let tape = Tape::new();
    let a = tape.var3(activations.clone());
    let logits = score_fn.scores(&tape, a)?;
    let n_classes = logits.shape()[0];
    if class_idx >= n_classes {
        return Err(Error::Argument(format!(
            "class index {class_idx} out of range for {n_classes} classes"
        )));
    }
    let scores = softmax_vec(logits.value().as_slice().unwrap());
    let s_c = scores[class_idx];
    let mut combined = Array3::<f64>::zeros((c, h, w));
    for cls in 0..n_classes {
        let grads = tape.backward(logits.narrow(0, cls, 1));
        let g = grads.wrt(a);
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for class {cls}"
            )));
        }
        let mult = if cls == class_idx {
            s_c * (1.0 - s_c)
        } else {
            -s_c * scores[cls]
        };
        combined
            .iter_mut()
            .zip(g.iter())
            .for_each(|(acc, &gv)| *acc += gv * mult);
    }
    let mut weights = Array1::<f64>::zeros(c);
    for k in 0..c {
        weights[k] = combined.index_axis(ndarray::Axis(0), k).sum() / z;
    }
    Ok(weights)
}

/// Direct form of the same weights: differentiate the softmax output itself.
pub fn gradcam_weights_softmax_path(
    activations: &Array3<f64>,
    score_fn: &dyn ScoreFn,
    class_idx: usize,
) -> Result<Array1<f64>> {
    let (c, h, w) = activations.dim();
    let z = (h * w) as f64;
    let tape = Tape::new();
    let a = tape.var3(activations.clone());
    let logits = score_fn.scores(&tape, a)?;
    let n = logits.shape()[0];
    let s_c = logits
        .reshape(&[1, n])
        .softmax_rows()
        .reshape(&[n])
        .narrow(0, class_idx, 1);
    let grads = tape.backward(s_c);
    let g = grads.wrt(a);
    let mut weights = Array1::<f64>::zeros(c);
    for k in 0..c {
        weights[k] = g.index_axis(ndarray::Axis(0), k).sum() / z;
    }
    Ok(weights)
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Class activation map with every intermediate kept for inspection.
#[derive(Debug, Clone)]
pub struct CamResult {
    /// Min-max normalized map at image resolution, in `[0, 1]`.
    pub heatmap: Array2<f64>,
    /// Pre-normalization map at grid resolution.
    pub raw: Array2<f64>,
    pub class_scores: Array1<f64>,
    pub weights: Array1<f64>,
    pub degenerate: bool,
    pub threshold_used: Option<f64>,
}

/// Weighted, ReLU-rectified channel aggregation of the grid activations for
/// the foreground class, normalized and upsampled to `target` pixels.
pub fn generate_cam(
    img_encoding: &VLImageEncoding,
    prompts: &PromptSet,
    vl: &dyn VlEncoder,
    target: usize,
) -> Result<CamResult> {
    let texts = vl.encode_text(prompts.prompts())?;
    let score_fn = VlScoreFn {
        vl,
        texts: &texts,
        class_token: img_encoding.class_token.as_ref(),
    };
    let a = &img_encoding.penultimate_features;
    let weights = gradcam_weights(a, &score_fn, prompts.fg_index())?;
    let scores = class_scores(img_encoding, &texts, vl.temperature())?;
    let (c, h, w) = a.dim();
    let mut raw = Array2::<f64>::zeros((h, w));
    for k in 0..c {
        let plane = a.index_axis(ndarray::Axis(0), k);
        raw.zip_mut_with(&plane, |r, &v| *r += weights[k] * v);
    }
    raw.mapv_inplace(|v| v.max(0.0));
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = hi - lo < 1e-12;
    let heatmap = if degenerate {
        Array2::zeros((target, target))
    } else {
        let normed = raw.mapv(|v| (v - lo) / (hi - lo));
        upsample_bilinear(&normed, target, target)
    };
    Ok(CamResult {
        heatmap,
        raw,
        class_scores: scores,
        weights,
        degenerate,
        threshold_used: None,
    })
}

fn upsample_bilinear(map: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let tape = Tape::new();
    let (h, w) = map.dim();
    let as3 = Array3::from_shape_fn((1, h, w), |(_, y, x)| map[[y, x]]);
    tape.var3(as3)
        .bilinear_resize(oh, ow)
        .value()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .index_axis_move(ndarray::Axis(0), 0)
}

/// Threshold maximizing between-class variance over a binned histogram of
/// `[0, 1]` values. Ties break toward the lower threshold.
#[allow(clippy::needless_range_loop)]
pub fn otsu_threshold(gray: &Array2<f64>, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Argument("otsu needs at least 2 bins".into()));
    }
    let mut first = None;
    let mut distinct = false;
    for &v in gray.iter() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Argument(format!("value {v} outside [0, 1]")));
        }
        match first {
            None => first = Some(v),
            Some(f) if f != v => distinct = true,
            _ => {}
        }
    }
    if !distinct {
        return Err(Error::DegenerateInput(
            "otsu needs at least two distinct values".into(),
        ));
    }
    let mut hist = vec![0usize; bins];
    for &v in gray.iter() {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        hist[b] += 1;
    }
    let total = gray.len() as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &h)| i as f64 * h as f64)
        .sum::<f64>()
        / total;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for k in 0..bins - 1 {
        w0 += hist[k] as f64;
        sum0 += k as f64 * hist[k] as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_mean * total - sum0) / w1;
        let var_between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var_between > best.0 {
            best = (var_between, k);
        }
    }
    if best.0.is_infinite() {
        return Err(Error::DegenerateInput("no valid otsu split".into()));
    }
    Ok((best.1 + 1) as f64 / bins as f64)
}

/// How the CAM heatmap turns into a binary mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    Otsu,
    Fixed(f64),
}

/// Binary pseudo-label derived from a CAM.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    pub mask: BinaryMask,
    pub source: CamResult,
    pub crf_applied: bool,
}

/// Thresholds a CAM into a pseudo-label, optionally refining it with a
/// dense CRF guided by the query image. A degenerate CAM yields an
/// all-background label.
pub fn make_pseudo_label(
    cam: &CamResult,
    mode: ThresholdMode,
    crf: bool,
    image: &ImageTensor,
) -> Result<PseudoLabel> {
    let (h, w) = cam.heatmap.dim();
    if cam.degenerate {
        return Ok(PseudoLabel {
            mask: BinaryMask::new(Array2::zeros((h, w)), MaskRole::Pseudo)?,
            source: cam.clone(),
            crf_applied: false,
        });
    }
    let tau = match mode {
        ThresholdMode::Otsu => otsu_threshold(&cam.heatmap, 256)?,
        ThresholdMode::Fixed(t) => t,
    };
    let mut prob = cam.heatmap.clone();
    let mut crf_applied = false;
    if crf {
        let guide = if image.height() == h && image.width() == w {
            image.clone()
        } else {
            image.resize(h, w)
        };
        // recenter probabilities so the chosen threshold sits at 0.5
        let shifted = prob.mapv(|v| shift_to_half(v, tau));
        prob = crf::refine(&shifted, &guide, &CrfParams::default());
        crf_applied = true;
        let mask = BinaryMask::from_map(&prob, 0.5, MaskRole::Pseudo);
        let mut source = cam.clone();
        source.threshold_used = Some(tau);
        return Ok(PseudoLabel {
            mask,
            source,
            crf_applied,
        });
    }
    let mask = BinaryMask::from_map(&prob, tau, MaskRole::Pseudo);
    let mut source = cam.clone();
    source.threshold_used = Some(tau);
    Ok(PseudoLabel {
        mask,
        source,
        crf_applied,
    })
}

/// Piecewise-linear remap sending `tau` to 0.5, keeping `[0,1]` endpoints.
fn shift_to_half(v: f64, tau: f64) -> f64 {
    if tau <= 0.0 {
        return 1.0;
    }
    if tau >= 1.0 {
        return 0.0;
    }
    if v < tau {
        0.5 * v / tau
    } else {
        0.5 + 0.5 * (v - tau) / (1.0 - tau)
    }
}

/// Mean two-class cross-entropy between rough logits and the pseudo-label
/// (nearest-resampled to the logits' resolution), on the tape.
pub fn pseudo_label_loss_on_tape<'t>(
    rough_logits: Var<'t>,
    pseudo_mask: &BinaryMask,
) -> Result<Var<'t>> {
    let shape = rough_logits.shape();
    if shape.len() != 3 || shape[0] != 2 {
        return Err(Error::Shape(format!(
            "rough logits must be [2 x h x w], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let target = if pseudo_mask.height() == h && pseudo_mask.width() == w {
        pseudo_mask.clone()
    } else {
        pseudo_mask.resize_nearest(h, w)
    };
    let n = h * w;
    let tape = rough_logits.tape();
    let mut onehot = Array2::<f64>::zeros((n, 2));
    for ((y, x), &v) in target.data().indexed_iter() {
        onehot[[y * w + x, v as usize]] = 1.0;
    }
    let log_probs = rough_logits.reshape(&[2, n]).t2().log_softmax_rows();
    Ok(log_probs
        .mul(tape.var2(onehot))
        .sum_all()
        .neg()
        .scale(1.0 / n as f64))
}

/// Plain-value wrapper of [`pseudo_label_loss_on_tape`].
pub fn pseudo_label_loss(rough_logits: &Array3<f64>, pseudo_mask: &BinaryMask) -> Result<f64> {
    let tape = Tape::new();
    let v = tape.var3(rough_logits.clone());
    Ok(pseudo_label_loss_on_tape(v, pseudo_mask)?.item())
}
