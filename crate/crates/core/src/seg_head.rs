//! Mask production: per-layer coarse similarity maps, cross-attention mask
//! aggregation over support pixels, the pixel-classifier rough mask, and
//! skip-connection fusion into the final prediction.

use ndarray::{Array1, Array2, Array3};

use crate::autodiff::{Tape, Var};
use crate::crf::{self, CrfParams};
use crate::error::{Error, Result};
use crate::tsaa::LayerVars;
use crate::types::{BinaryMask, ImageTensor, MaskRole};

/// Fixed 2-D sinusoidal positional encoding, `[c × h × w]`. The first half
/// of the channels encodes the row, the second half the column.
pub fn positional_encoding(c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((c, h, w));
    let half = c / 2;
    let fill = |out: &mut Array3<f64>, offset: usize, n: usize, len: usize, by_row: bool| {
        for i in 0..n {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / n.max(1) as f64);
            for y in 0..h {
                for x in 0..w {
                    let pos = if by_row { y } else { x } as f64;
                    let v = if i % 2 == 0 {
                        (pos * freq).sin()
                    } else {
                        (pos * freq).cos()
                    };
                    out[[offset + i, y, x]] = v;
                }
            }
            let _ = len;
        }
    };
    fill(&mut out, 0, half, h, true);
    fill(&mut out, half, c - half, w, false);
    out
}

/// Cosine similarity of every query pixel to the support foreground
/// prototype, rescaled from `[-1, 1]` to `[0, 1]`. Returns `None` (skip
/// flag) when the support mask has no foreground at feature resolution.
pub fn coarse_similarity_map(
    fq: &Array3<f64>,
    fs: &Array3<f64>,
    ms: &BinaryMask,
) -> Result<Option<Array2<f64>>> {
    let (c, h, w) = fq.dim();
    if fs.dim().0 != c {
        return Err(Error::Shape("query/support channel mismatch".into()));
    }
    let (sh, sw) = (fs.dim().1, fs.dim().2);
    if ms.height() != sh || ms.width() != sw {
        return Err(Error::Shape("support mask does not match feature resolution".into()));
    }
    let mut proto = Array1::<f64>::zeros(c);
    let mut count = 0.0;
    for ((y, x), &v) in ms.data().indexed_iter() {
        if v == 1 {
            for ch in 0..c {
                proto[ch] += fs[[ch, y, x]];
            }
            count += 1.0;
        }
    }
    if count == 0.0 {
        return Ok(None);
    }
    proto.mapv_inplace(|v| v / count);
    let pnorm = proto.mapv(|v| v * v).sum().sqrt().max(1e-12);
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut dot = 0.0;
            let mut qn = 0.0;
            for ch in 0..c {
                dot += fq[[ch, y, x]] * proto[ch];
                qn += fq[[ch, y, x]] * fq[[ch, y, x]];
            }
            let cos = dot / (qn.sqrt().max(1e-12) * pnorm);
            out[[y, x]] = (cos + 1.0) / 2.0;
        }
    }
    Ok(Some(out))
}

/// Attention over already-projected query/key rows with the support mask as
/// values: per head `softmax(Q K^T / sqrt(d)) v`, heads averaged.
pub fn masked_attention_on_tape<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: &Array1<f64>,
    heads: usize,
    head_dim: usize,
) -> Result<Var<'t>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs[1] != heads * head_dim || ks[1] != heads * head_dim {
        return Err(Error::Shape("projection width must be heads * head_dim".into()));
    }
    if ks[0] != v.len() {
        return Err(Error::Shape("one value per support pixel required".into()));
    }
    let tape = q.tape();
    let v_col = tape.var2(Array2::from_shape_fn((v.len(), 1), |(i, _)| v[i]));
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut acc: Option<Var<'t>> = None;
    for h in 0..heads {
        let qh = q.narrow(1, h * head_dim, head_dim);
        let kh = k.narrow(1, h * head_dim, head_dim);
        let attn = qh.matmul(kh.t2()).scale(scale).softmax_rows();
        let out = attn.matmul(v_col);
        acc = Some(match acc {
            Some(a) => a.add(out),
            None => out,
        });
    }
    Ok(acc.expect("at least one head").scale(1.0 / heads as f64))
}

/// One layer's attention query mask: query and support pixel sequences get
/// positional encoding, pass through the layer's learned Q/K projections,
/// and aggregate the support mask values. Support shots concatenate along
/// the key axis. Output is `[h x w]` in `[0, 1]`.
pub fn cross_attention_masks_on_tape<'t>(
    fq: Var<'t>,
    supports: &[(Var<'t>, BinaryMask)],
    lv: &LayerVars<'t>,
    heads: usize,
    head_dim: usize,
) -> Result<Var<'t>> {
    if supports.is_empty() {
        return Err(Error::Argument("attention needs at least one support".into()));
    }
    let tape = fq.tape();
    let shape = fq.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let pos = tape.var2(tokens_of(&positional_encoding(c, h, w)));
    let tok_q = fq.reshape(&[c, h * w]).t2().add(pos);
    let q = tok_q.matmul(lv.attn_wq).add_rowvec(lv.attn_bq);

    let mut keys = Vec::new();
    let mut values = Vec::new();
    for (fs, ms) in supports {
        let sshape = fs.shape();
        let (sc, sh, sw) = (sshape[0], sshape[1], sshape[2]);
        if sc != c {
            return Err(Error::Shape("support channel mismatch".into()));
        }
        if ms.height() != sh || ms.width() != sw {
            return Err(Error::Shape("support mask must be at feature resolution".into()));
        }
        let spos = tape.var2(tokens_of(&positional_encoding(sc, sh, sw)));
        let tok_s = fs.reshape(&[sc, sh * sw]).t2().add(spos);
        keys.push(tok_s.matmul(lv.attn_wk).add_rowvec(lv.attn_bk));
        values.extend(ms.data().iter().map(|&v| f64::from(v)));
    }
    let k = if keys.len() == 1 {
        keys[0]
    } else {
        tape.concat(0, &keys)
    };
    let v = Array1::from_vec(values);
    let mask = masked_attention_on_tape(q, k, &v, heads, head_dim)?;
    Ok(mask.reshape(&[h, w]))
}

fn tokens_of(grid: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = grid.dim();
    let mut out = Array2::<f64>::zeros((h * w, c));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[y * w + x, ch]] = grid[[ch, y, x]];
            }
        }
    }
    out
}

/// Rough query mask: pyramid layers resized to the finest layer's grid,
/// concatenated, and classified per pixel with the 1x1 head into 2 logits.
pub fn rough_query_mask_on_tape<'t>(
    adapted_layers: &[Var<'t>],
    head_w: Var<'t>,
    head_b: Var<'t>,
) -> Result<Var<'t>> {
    if adapted_layers.is_empty() {
        return Err(Error::Argument("no adapted layers".into()));
    }
    let tape = adapted_layers[0].tape();
    let target = adapted_layers[0].shape();
    let (h, w) = (target[1], target[2]);
    let mut resized = Vec::with_capacity(adapted_layers.len());
    for layer in adapted_layers {
        let s = layer.shape();
        resized.push(if s[1] == h && s[2] == w {
            *layer
        } else {
            layer.bilinear_resize(h, w)
        });
    }
    let cat = tape.concat(0, &resized);
    let ncat = cat.shape()[0];
    let logits = head_w
        .matmul(cat.reshape(&[ncat, h * w]))
        .add_colvec(head_b);
    Ok(logits.reshape(&[2, h, w]))
}

/// Everything the prediction path produces for one episode.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub rough_logits: Array3<f64>,
    pub rough_fg_prob: Array2<f64>,
    pub pseudo: Option<crate::tvea::PseudoLabel>,
    pub attention_masks: Vec<Array2<f64>>,
    pub coarse_sims: Vec<Option<Array2<f64>>>,
    pub fused: Array2<f64>,
    pub final_mask: BinaryMask,
}

/// Weighted arithmetic mean of the component maps (all at the same
/// resolution), optional CRF refinement, and thresholding at 0.5.
pub fn fuse_masks(
    rough_fg: &Array2<f64>,
    pseudo: Option<&BinaryMask>,
    attention: &[Array2<f64>],
    weights: (f64, f64, f64),
    crf_guide: Option<(&ImageTensor, &CrfParams)>,
) -> Result<(Array2<f64>, BinaryMask)> {
    let (h, w) = rough_fg.dim();
    let (w_rough, w_pseudo, w_attn) = weights;
    let mut acc = rough_fg.mapv(|v| v * w_rough);
    let mut total = w_rough;
    if let Some(p) = pseudo {
        if p.height() != h || p.width() != w {
            return Err(Error::Shape("pseudo-label resolution mismatch".into()));
        }
        acc.zip_mut_with(&p.to_f64(), |a, &b| *a += w_pseudo * b);
        total += w_pseudo;
    }
    for m in attention {
        if m.dim() != (h, w) {
            return Err(Error::Shape("attention map resolution mismatch".into()));
        }
        acc.zip_mut_with(m, |a, &b| *a += w_attn * b);
        total += w_attn;
    }
    if total <= 0.0 {
        return Err(Error::Argument("fusion weights sum to zero".into()));
    }
    let mut fused = acc.mapv(|v| v / total);
    if let Some((image, params)) = crf_guide {
        fused = crf::refine(&fused, image, params);
    }
    let final_mask = BinaryMask::from_map(&fused, 0.5, MaskRole::Predicted);
    Ok((fused, final_mask))
}

/// Upsamples a `[h x w]` map to image resolution with bilinear taps.
pub fn upsample_map(map: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let tape = Tape::new();
    let (h, w) = map.dim();
    let v = tape.var3(Array3::from_shape_fn((1, h, w), |(_, y, x)| map[[y, x]]));
    v.bilinear_resize(oh, ow)
        .value()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .index_axis_move(ndarray::Axis(0), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::tsaa::{init_adapter, AdapterVars};
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(seed: u64, c: usize, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    fn mask(rows: &[[u8; 2]; 2]) -> BinaryMask {
        BinaryMask::new(arr2(rows), MaskRole::Support).unwrap()
    }

    #[test]
    fn identical_pixel_scores_one_and_negated_scores_zero() {
        let mut fs = Array3::<f64>::zeros((3, 2, 2));
        fs[[0, 0, 0]] = 0.6;
        fs[[1, 0, 0]] = -0.3;
        fs[[2, 0, 0]] = 0.2;
        let ms = mask(&[[1, 0], [0, 0]]);
        // query pixel 0 equals the prototype, pixel 1 is its negation
        let mut fq = Array3::<f64>::zeros((3, 2, 2));
        for c in 0..3 {
            fq[[c, 0, 0]] = fs[[c, 0, 0]];
            fq[[c, 0, 1]] = -fs[[c, 0, 0]];
        }
        let sim = coarse_similarity_map(&fq, &fs, &ms).unwrap().unwrap();
        assert!((sim[[0, 0]] - 1.0).abs() < 1e-9);
        assert!(sim[[0, 1]].abs() < 1e-9);
    }

    #[test]
    fn empty_foreground_returns_skip_flag() {
        let fs = rand3(1, 3, 2, 2);
        let fq = rand3(2, 3, 2, 2);
        let ms = mask(&[[0, 0], [0, 0]]);
        assert!(coarse_similarity_map(&fq, &fs, &ms).unwrap().is_none());
    }

    #[test]
    fn coarse_similarity_matches_explicit_cosine() {
        let fs = rand3(3, 4, 2, 2);
        let fq = rand3(4, 4, 2, 2);
        let ms = mask(&[[1, 1], [0, 1]]);
        let sim = coarse_similarity_map(&fq, &fs, &ms).unwrap().unwrap();
        // explicit prototype and cosine
        let mut proto = [0.0; 4];
        for (c, p) in proto.iter_mut().enumerate() {
            *p = (fs[[c, 0, 0]] + fs[[c, 0, 1]] + fs[[c, 1, 1]]) / 3.0;
        }
        for y in 0..2 {
            for x in 0..2 {
                let q: Vec<f64> = (0..4).map(|c| fq[[c, y, x]]).collect();
                let dot: f64 = q.iter().zip(&proto).map(|(a, b)| a * b).sum();
                let qn: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                let pn: f64 = proto.iter().map(|v| v * v).sum::<f64>().sqrt();
                let expect = (dot / (qn * pn) + 1.0) / 2.0;
                assert!((sim[[y, x]] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_support_pixel_with_mask_one_saturates_output() {
        let tape = Tape::new();
        let q = tape.var2(Array2::from_shape_fn((5, 4), |(i, j)| (i + j) as f64 * 0.1));
        let k = tape.var2(Array2::from_shape_fn((1, 4), |(_, j)| j as f64 * 0.2));
        let v = Array1::from_vec(vec![1.0]);
        let out = masked_attention_on_tape(q, k, &v, 2, 2).unwrap().value();
        for &o in out.iter() {
            assert!((o - 1.0).abs() < 1e-12, "single-key softmax must output 1");
        }
    }

    #[test]
    fn uniform_attention_outputs_mean_mask_value() {
        let tape = Tape::new();
        // zero queries make all logits equal regardless of keys
        let q = tape.var2(Array2::<f64>::zeros((6, 4)));
        let k = tape.var2(Array2::from_shape_fn((4, 4), |(i, j)| (i * j) as f64 * 0.3));
        let v = Array1::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let out = masked_attention_on_tape(q, k, &v, 2, 2).unwrap().value();
        for &o in out.iter() {
            assert!((o - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_attention_matches_hand_computation() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qm = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let km = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let v = Array1::from_vec(vec![1.0, 0.0, 0.0, 1.0]);
        let heads = 2;
        let d = 2;
        let out = masked_attention_on_tape(tape.var2(qm.clone()), tape.var2(km.clone()), &v, heads, d)
            .unwrap()
            .value();
        for i in 0..4 {
            let mut head_sum = 0.0;
            for h in 0..heads {
                let qh: Vec<f64> = (0..d).map(|j| qm[[i, h * d + j]]).collect();
                let logits: Vec<f64> = (0..4)
                    .map(|s| {
                        let kh: Vec<f64> = (0..d).map(|j| km[[s, h * d + j]]).collect();
                        qh.iter().zip(&kh).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                let probs: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                head_sum += probs.iter().zip(v.iter()).map(|(p, vv)| p * vv).sum::<f64>();
            }
            let expect = head_sum / heads as f64;
            assert!(
                (out[[i, 0]] - expect).abs() < 1e-10,
                "pixel {i}: {} vs {expect}",
                out[[i, 0]]
            );
        }
    }

    #[test]
    fn attention_invariant_to_per_row_constant_logit_shifts() {
        // queries with a constant column paired with a shifted key column
        // produce per-row-constant logit offsets, which softmax ignores
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut qm = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        for i in 0..5 {
            qm[[i, 3]] = 1.0; // constant column
        }
        let km = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let mut km_shifted = km.clone();
        for s in 0..3 {
            km_shifted[[s, 3]] += 2.5; // shifts every row's logit equally
        }
        let v = Array1::from_vec(vec![1.0, 0.0, 1.0]);
        let a = masked_attention_on_tape(tape.var2(qm.clone()), tape.var2(km), &v, 1, 4)
            .unwrap()
            .value();
        let b = masked_attention_on_tape(tape.var2(qm), tape.var2(km_shifted), &v, 1, 4)
            .unwrap()
            .value();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_output_is_a_convex_combination_of_mask_values() {
        let cfg = Config::toy(64);
        let p = init_adapter(&[8], &cfg).unwrap();
        let tape = Tape::new();
        let vars = AdapterVars::new(&tape, &p);
        let fq = tape.var3(rand3(7, cfg.adapter.width, 4, 4));
        let fs = tape.var3(rand3(8, cfg.adapter.width, 4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ms = BinaryMask::new(
            Array2::from_shape_fn((4, 4), |_| rng.gen_range(0..2) as u8),
            MaskRole::Support,
        )
        .unwrap();
        let out = cross_attention_masks_on_tape(
            fq,
            &[(fs, ms)],
            &vars.layers[0],
            cfg.attention.heads,
            cfg.attention.head_dim,
        )
        .unwrap()
        .value();
        assert_eq!(out.shape(), &[4, 4]);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn multi_shot_keys_concatenate() {
        let cfg = Config::toy(64);
        let p = init_adapter(&[8], &cfg).unwrap();
        let tape = Tape::new();
        let vars = AdapterVars::new(&tape, &p);
        let fq = tape.var3(rand3(10, cfg.adapter.width, 3, 3));
        let fs1 = tape.var3(rand3(11, cfg.adapter.width, 3, 3));
        let fs2 = tape.var3(rand3(12, cfg.adapter.width, 3, 3));
        let all_ones = BinaryMask::new(Array2::ones((3, 3)), MaskRole::Support).unwrap();
        let out = cross_attention_masks_on_tape(
            fq,
            &[(fs1, all_ones.clone()), (fs2, all_ones)],
            &vars.layers[0],
            cfg.attention.heads,
            cfg.attention.head_dim,
        )
        .unwrap()
        .value();
        // every value is 1, so any convex combination is 1
        assert!(out.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn zero_head_gives_uniform_rough_logits() {
        let tape = Tape::new();
        let layers = vec![tape.var3(rand3(13, 3, 4, 4)), tape.var3(rand3(14, 3, 2, 2))];
        let head_w = tape.var2(Array2::<f64>::zeros((2, 6)));
        let head_b = tape.var1(Array1::<f64>::zeros(2));
        let logits = rough_query_mask_on_tape(&layers, head_w, head_b)
            .unwrap()
            .value();
        assert_eq!(logits.shape(), &[2, 4, 4]);
        // softmax of equal logits is (0.5, 0.5) everywhere
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn selector_head_picks_one_feature_channel() {
        let tape = Tape::new();
        let f = rand3(15, 3, 4, 4);
        let layers = vec![tape.var3(f.clone())];
        let mut hw = Array2::<f64>::zeros((2, 3));
        hw[[1, 2]] = 1.0; // fg logit = channel 2
        let head_w = tape.var2(hw);
        let head_b = tape.var1(Array1::<f64>::zeros(2));
        let logits = rough_query_mask_on_tape(&layers, head_w, head_b)
            .unwrap()
            .value();
        for y in 0..4 {
            for x in 0..4 {
                assert!((logits[[1, y, x]] - f[[2, y, x]]).abs() < 1e-12);
                assert_eq!(logits[[0, y, x]], 0.0);
            }
        }
    }

    #[test]
    fn rough_mask_matches_explicit_one_by_one_convolution() {
        let tape = Tape::new();
        let f0 = rand3(16, 2, 4, 4);
        let layers = vec![tape.var3(f0.clone())];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let hw = Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0));
        let hb = Array1::from_vec(vec![0.3, -0.4]);
        let logits = rough_query_mask_on_tape(
            &layers,
            tape.var2(hw.clone()),
            tape.var1(hb.clone()),
        )
        .unwrap()
        .value();
        for y in 0..4 {
            for x in 0..4 {
                for o in 0..2 {
                    let expect = hb[o] + hw[[o, 0]] * f0[[0, y, x]] + hw[[o, 1]] * f0[[1, y, x]];
                    assert!((logits[[o, y, x]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn consensus_components_fuse_to_themselves() {
        let m = Array2::from_shape_fn((6, 6), |(y, _)| f64::from(y < 3));
        let pseudo = BinaryMask::from_map(&m, 0.5, MaskRole::Pseudo);
        let (fused, final_mask) = fuse_masks(
            &m,
            Some(&pseudo),
            &[m.clone(), m.clone()],
            (1.0, 1.0, 1.0),
            None,
        )
        .unwrap();
        for (a, b) in fused.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for ((y, x), &v) in final_mask.data().indexed_iter() {
            assert_eq!(f64::from(v), m[[y, x]]);
        }
    }

    #[test]
    fn absent_pseudo_means_mean_over_remaining() {
        let a = Array2::from_elem((4, 4), 0.2);
        let b = Array2::from_elem((4, 4), 0.8);
        let (fused, _) = fuse_masks(&a, None, &[b], (1.0, 1.0, 1.0), None).unwrap();
        for &v in fused.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn three_maps_with_equal_weights_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let a = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
        let b = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
        let c = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
        let pseudo = BinaryMask::from_map(&b, 0.5, MaskRole::Pseudo);
        let (fused, _) = fuse_masks(&a, Some(&pseudo), std::slice::from_ref(&c), (1.0, 1.0, 1.0), None).unwrap();
        for ((y, x), &v) in fused.indexed_iter() {
            let expect = (a[[y, x]] + pseudo.to_f64()[[y, x]] + c[[y, x]]) / 3.0;
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_is_monotone_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let a = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
        let b = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
        let (fused, _) = fuse_masks(&a, None, std::slice::from_ref(&b), (1.0, 1.0, 1.0), None).unwrap();
        assert!(fused.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let raised = b.mapv(|v| (v + 0.2).min(1.0));
        let (fused2, _) = fuse_masks(&a, None, &[raised], (1.0, 1.0, 1.0), None).unwrap();
        for (x, y) in fused2.iter().zip(fused.iter()) {
            assert!(x >= y);
        }
    }

    #[test]
    fn positional_encoding_distinguishes_rows_and_columns() {
        let pe = positional_encoding(8, 5, 5);
        // two different rows must differ somewhere in the row half
        let row_diff = (0..4).any(|c| (pe[[c, 1, 2]] - pe[[c, 3, 2]]).abs() > 1e-6);
        let col_diff = (4..8).any(|c| (pe[[c, 1, 2]] - pe[[c, 1, 4]]).abs() > 1e-6);
        assert!(row_diff && col_diff);
        // same position encodes identically across calls
        let pe2 = positional_encoding(8, 5, 5);
        assert_eq!(pe, pe2);
    }
}
