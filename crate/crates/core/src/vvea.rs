//! Visual-Visual Embedding Alignment: masked global/local prototypes,
//! SSIM prototype similarity, and the local/global/dense losses that train
//! the adapter from augmented views.
//!
//! Losses are built on the autodiff tape; plain-value wrappers exist for the
//! oracle tests. A prototype component is ABSENT (None) when its mask region
//! is empty, and loss cells missing a required component are skipped.

use ndarray::{Array1, Array2, Array3};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::types::BinaryMask;

/// Pixel index pairs `(original grid, augmented grid)` at feature
/// resolution, flattened row-major. Built by
/// [`crate::augment::AffineTransform::correspondences`], which guarantees
/// in-bounds indices and sub-half-pixel mapping error.
pub type Correspondence = Vec<(usize, usize)>;

/// Foreground/background prototype vectors of one region.
#[derive(Debug, Clone)]
pub struct PrototypePair {
    pub fg: Option<Array1<f64>>,
    pub bg: Option<Array1<f64>>,
    pub fg_count: usize,
    pub bg_count: usize,
}

/// `n × n` grid of prototype pairs.
#[derive(Debug, Clone)]
pub struct PrototypeGrid {
    pub n: usize,
    pub cells: Vec<Vec<PrototypePair>>,
}

/// Tape-resident prototype pair.
pub struct ProtoPairVar<'t> {
    pub fg: Option<Var<'t>>,
    pub bg: Option<Var<'t>>,
    pub fg_count: usize,
    pub bg_count: usize,
}

/// Tape-resident prototype grid.
pub struct ProtoGridVar<'t> {
    pub n: usize,
    pub cells: Vec<Vec<ProtoPairVar<'t>>>,
}

fn masked_mean<'t>(flat: Var<'t>, indices: &[usize]) -> Option<Var<'t>> {
    if indices.is_empty() {
        return None;
    }
    let tape = flat.tape();
    let m = indices.len();
    let ones = tape.var2(Array2::from_elem((m, 1), 1.0 / m as f64));
    let c = flat.shape()[0];
    Some(flat.gather_cols(indices).matmul(ones).reshape(&[c]))
}

/// Masked fg/bg means of a feature map region on the tape. `mask` must match
/// the feature map's spatial shape.
pub fn masked_prototype_on_tape<'t>(
    features: Var<'t>,
    mask: &BinaryMask,
) -> Result<ProtoPairVar<'t>> {
    let shape = features.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if mask.height() != h || mask.width() != w {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match features {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let mut fg_idx = Vec::new();
    let mut bg_idx = Vec::new();
    for ((y, x), &v) in mask.data().indexed_iter() {
        if v == 1 {
            fg_idx.push(y * w + x);
        } else {
            bg_idx.push(y * w + x);
        }
    }
    let flat = features.reshape(&[c, h * w]);
    Ok(ProtoPairVar {
        fg: masked_mean(flat, &fg_idx),
        bg: masked_mean(flat, &bg_idx),
        fg_count: fg_idx.len(),
        bg_count: bg_idx.len(),
    })
}

/// Row/column boundaries for the `n x n` partition: blocks span
/// `ceil(len/n)` except the last, which takes the remainder (and may be
/// empty when the sizes do not divide).
fn block_bounds(len: usize, n: usize) -> Vec<(usize, usize)> {
    let size = len.div_ceil(n);
    (0..n)
        .map(|i| ((i * size).min(len), ((i + 1) * size).min(len)))
        .collect()
}

/// Per-cell masked prototypes over an `n x n` spatial partition.
pub fn local_prototypes_on_tape<'t>(
    features: Var<'t>,
    mask: &BinaryMask,
    n: usize,
) -> Result<ProtoGridVar<'t>> {
    let shape = features.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if n < 1 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    if n > h.min(w) {
        return Err(Error::Config(format!(
            "n = {n} exceeds feature resolution {h}x{w}"
        )));
    }
    if mask.height() != h || mask.width() != w {
        return Err(Error::Shape("mask does not match feature resolution".into()));
    }
    let rows = block_bounds(h, n);
    let cols = block_bounds(w, n);
    let flat = features.reshape(&[c, h * w]);
    let mut cells = Vec::with_capacity(n);
    for (y0, y1) in &rows {
        let mut row = Vec::with_capacity(n);
        for (x0, x1) in &cols {
            let mut fg_idx = Vec::new();
            let mut bg_idx = Vec::new();
            for y in *y0..*y1 {
                for x in *x0..*x1 {
                    if mask.data()[[y, x]] == 1 {
                        fg_idx.push(y * w + x);
                    } else {
                        bg_idx.push(y * w + x);
                    }
                }
            }
            row.push(ProtoPairVar {
                fg: masked_mean(flat, &fg_idx),
                bg: masked_mean(flat, &bg_idx),
                fg_count: fg_idx.len(),
                bg_count: bg_idx.len(),
            });
        }
        cells.push(row);
    }
    Ok(ProtoGridVar { n, cells })
}

/// SSIM between two equal-length vectors on the tape, treating the channel
/// dimension as the sample set. The dynamic range is the observed value
/// range of the pair, floored at 1.
pub fn ssim_on_tape<'t>(p: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
    let (lp, lq) = (p.shape()[0], q.shape()[0]);
    if lp != lq {
        return Err(Error::Argument(format!(
            "ssim length mismatch: {lp} vs {lq}"
        )));
    }
    if lp < 2 {
        return Err(Error::Argument("ssim needs vectors of length >= 2".into()));
    }
    let tape = p.tape();
    let both = tape.concat(0, &[p, q]);
    let one = tape.scalar(1.0);
    let range = both.reduce_max().sub(both.reduce_min());
    let l = tape.concat(0, &[range, one]).reduce_max();
    let c1 = l.scale(0.01).mul(l.scale(0.01));
    let c2 = l.scale(0.03).mul(l.scale(0.03));
    let mu_p = p.mean_all();
    let mu_q = q.mean_all();
    let dp = p.sub(mu_p);
    let dq = q.sub(mu_q);
    let var_p = dp.mul(dp).mean_all();
    let var_q = dq.mul(dq).mean_all();
    let cov = dp.mul(dq).mean_all();
    let num = mu_p
        .mul(mu_q)
        .scale(2.0)
        .add(c1)
        .mul(cov.scale(2.0).add(c2));
    let den = mu_p
        .mul(mu_p)
        .add(mu_q.mul(mu_q))
        .add(c1)
        .mul(var_p.add(var_q).add(c2));
    Ok(num.div(den))
}

/// Per-cell contrast `softplus(sim(fg, bg_aug) - sim(fg, fg_aug))`, averaged
/// over the cells where all three prototypes exist. Returns the loss and the
/// number of contributing cells; zero contributing cells yields a zero loss
/// (the count doubles as the warning flag).
pub fn local_contrast_loss<'t>(
    tape: &'t Tape,
    grid: &ProtoGridVar<'t>,
    grid_aug: &ProtoGridVar<'t>,
) -> Result<(Var<'t>, usize)> {
    if grid.n != grid_aug.n {
        return Err(Error::Argument(format!(
            "grid sizes differ: {} vs {}",
            grid.n, grid_aug.n
        )));
    }
    let mut terms: Vec<Var<'t>> = Vec::new();
    for (row, row_aug) in grid.cells.iter().zip(&grid_aug.cells) {
        for (cell, cell_aug) in row.iter().zip(row_aug) {
            let (Some(fg), Some(fg_aug), Some(bg_aug)) = (cell.fg, cell_aug.fg, cell_aug.bg)
            else {
                continue;
            };
            let s_neg = ssim_on_tape(fg, bg_aug)?;
            let s_pos = ssim_on_tape(fg, fg_aug)?;
            terms.push(s_neg.sub(s_pos).softplus());
        }
    }
    let contributing = terms.len();
    if contributing == 0 {
        log::debug!("local contrast loss skipped: no cell has fg, fg_aug and bg_aug");
        return Ok((tape.scalar(0.0), 0));
    }
    let sum = terms
        .into_iter()
        .reduce(|a, b| a.add(b))
        .expect("non-empty terms");
    Ok((sum.scale(1.0 / contributing as f64), contributing))
}

/// Same functional form as the local loss on whole-image prototypes.
pub fn global_contrast_loss<'t>(
    tape: &'t Tape,
    pp: &ProtoPairVar<'t>,
    pp_aug: &ProtoPairVar<'t>,
) -> Result<(Var<'t>, usize)> {
    let grid = ProtoGridVar {
        n: 1,
        cells: vec![vec![ProtoPairVar {
            fg: pp.fg,
            bg: pp.bg,
            fg_count: pp.fg_count,
            bg_count: pp.bg_count,
        }]],
    };
    let grid_aug = ProtoGridVar {
        n: 1,
        cells: vec![vec![ProtoPairVar {
            fg: pp_aug.fg,
            bg: pp_aug.bg,
            fg_count: pp_aug.fg_count,
            bg_count: pp_aug.bg_count,
        }]],
    };
    local_contrast_loss(tape, &grid, &grid_aug)
}

/// Symmetrized InfoNCE over L2-normalized per-pixel embeddings at the
/// corresponding locations of two views.
pub fn dense_contrast_loss<'t>(
    f_a: Var<'t>,
    f_b: Var<'t>,
    corr: &Correspondence,
    tau: f64,
) -> Result<Var<'t>> {
    if corr.len() < 2 {
        return Err(Error::Argument(
            "dense loss needs at least two correspondences".into(),
        ));
    }
    if tau <= 0.0 {
        return Err(Error::Argument("temperature must be positive".into()));
    }
    let (sa, sb) = (f_a.shape(), f_b.shape());
    let (c, ha, wa) = (sa[0], sa[1], sa[2]);
    let (hb, wb) = (sb[1], sb[2]);
    let m = corr.len();
    let idx_a: Vec<usize> = corr.iter().map(|p| p.0).collect();
    let idx_b: Vec<usize> = corr.iter().map(|p| p.1).collect();
    if idx_a.iter().any(|&i| i >= ha * wa) || idx_b.iter().any(|&i| i >= hb * wb) {
        return Err(Error::Argument("correspondence index out of bounds".into()));
    }
    let za = f_a
        .reshape(&[c, ha * wa])
        .gather_cols(&idx_a)
        .l2_normalize_cols(1e-12);
    let zb = f_b
        .reshape(&[c, hb * wb])
        .gather_cols(&idx_b)
        .l2_normalize_cols(1e-12);
    let logits = za.t2().matmul(zb).scale(1.0 / tau);
    let tape = f_a.tape();
    let eye = tape.var2(Array2::from_shape_fn((m, m), |(i, j)| {
        if i == j {
            1.0 / m as f64
        } else {
            0.0
        }
    }));
    let loss_ab = logits.log_softmax_rows().mul(eye).sum_all().neg();
    let loss_ba = logits.t2().log_softmax_rows().mul(eye).sum_all().neg();
    Ok(loss_ab.add(loss_ba).scale(0.5))
}

// ---------------------------------------------------------------------------
// plain-value wrappers

fn pair_value(p: &ProtoPairVar<'_>) -> PrototypePair {
    let to_vec = |v: &Var<'_>| {
        v.value()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
    };
    PrototypePair {
        fg: p.fg.as_ref().map(to_vec),
        bg: p.bg.as_ref().map(to_vec),
        fg_count: p.fg_count,
        bg_count: p.bg_count,
    }
}

/// Masked fg/bg mean feature vectors (absent when a region is empty).
pub fn masked_prototype(features: &Array3<f64>, mask: &BinaryMask) -> Result<PrototypePair> {
    let tape = Tape::new();
    let f = tape.var3(features.clone());
    Ok(pair_value(&masked_prototype_on_tape(f, mask)?))
}

/// Per-cell masked prototypes over the `n x n` partition.
pub fn local_prototypes(features: &Array3<f64>, mask: &BinaryMask, n: usize) -> Result<PrototypeGrid> {
    let tape = Tape::new();
    let f = tape.var3(features.clone());
    let grid = local_prototypes_on_tape(f, mask, n)?;
    Ok(PrototypeGrid {
        n,
        cells: grid
            .cells
            .iter()
            .map(|row| row.iter().map(pair_value).collect())
            .collect(),
    })
}

/// Symmetric SSIM between two vectors.
pub fn ssim_similarity(p: &[f64], q: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let pv = tape.var1(Array1::from_vec(p.to_vec()));
    let qv = tape.var1(Array1::from_vec(q.to_vec()));
    Ok(ssim_on_tape(pv, qv)?.item())
}
