//! Plain (non-differentiated) neural network ops used by the frozen
//! backbones. Inference only; gradients never flow into these.

use ndarray::{Array1, Array2, Array3, Array4};

/// 2-D convolution with explicit stride and zero padding.
pub fn conv2d(
    x: &Array3<f64>,
    w: &Array4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (ci, h, wd) = x.dim();
    let (co, ciw, kh, kw) = w.dim();
    assert_eq!(ci, ciw, "conv2d channel mismatch");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Array3::<f64>::zeros((co, oh, ow));
    for o in 0..co {
        let bias = b.map(|b| b[o]).unwrap_or(0.0);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for c in 0..ci {
                    for dy in 0..kh {
                        let sy = (oy * stride + dy) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let sx = (ox * stride + dx) as isize - pad as isize;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            acc += x[[c, sy as usize, sx as usize]] * w[[o, c, dy, dx]];
                        }
                    }
                }
                out[[o, oy, ox]] = acc;
            }
        }
    }
    out
}

/// Max pooling with stride and padding (padding contributes -inf).
pub fn maxpool2d(x: &Array3<f64>, k: usize, stride: usize, pad: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..k {
                    let sy = (oy * stride + dy) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = (ox * stride + dx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        best = best.max(x[[ch, sy as usize, sx as usize]]);
                    }
                }
                out[[ch, oy, ox]] = best;
            }
        }
    }
    out
}

/// Inference batch norm with running statistics.
pub fn bn_infer(
    x: &Array3<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    mean: &Array1<f64>,
    var: &Array1<f64>,
    eps: f64,
) -> Array3<f64> {
    let mut out = x.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        let inv = gamma[c] / (var[c] + eps).sqrt();
        let shift = beta[c] - mean[c] * inv;
        plane.mapv_inplace(|v| v * inv + shift);
    }
    out
}

pub fn relu3(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Row-major linear layer `y = x W^T + b` for token matrices `[n × d_in]`.
pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: Option<&Array1<f64>>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        for mut row in y.rows_mut() {
            row += b;
        }
    }
    y
}

/// Per-row layer normalization for token matrices.
pub fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>, eps: f64) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.mean().unwrap();
        let v = row.mapv(|u| (u - m) * (u - m)).mean().unwrap();
        let inv = 1.0 / (v + eps).sqrt();
        for (i, u) in row.iter_mut().enumerate() {
            *u = (*u - m) * inv * gamma[i] + beta[i];
        }
    }
    out
}

pub fn softmax_rows_inplace(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

pub fn l2_normalize(v: &Array1<f64>) -> Array1<f64> {
    let n = v.mapv(|x| x * x).sum().sqrt().max(1e-12);
    v.mapv(|x| x / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn strided_conv_shapes_and_values() {
        // 1x4x4 input, identity-ish 1x1 kernel, stride 2
        let x = Array3::from_shape_fn((1, 4, 4), |(_, y, xx)| (y * 4 + xx) as f64);
        let w = Array4::from_elem((1, 1, 1, 1), 2.0);
        let y = conv2d(&x, &w, None, 2, 0);
        assert_eq!(y.dim(), (1, 2, 2));
        assert_eq!(y[[0, 0, 0]], 0.0);
        assert_eq!(y[[0, 0, 1]], 4.0);
        assert_eq!(y[[0, 1, 0]], 16.0);
    }

    #[test]
    fn maxpool_matches_hand_example() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, y, xx)| (y * 4 + xx) as f64);
        let y = maxpool2d(&x, 2, 2, 0);
        assert_eq!(y[[0, 0, 0]], 5.0);
        assert_eq!(y[[0, 1, 1]], 15.0);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = Array2::from_shape_fn((2, 8), |(i, j)| (i * 8 + j) as f64);
        let y = layer_norm(&x, &Array1::ones(8), &Array1::zeros(8), 1e-5);
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let v = l2_normalize(&arr1(&[3.0, 4.0]));
        assert!((v.mapv(|x| x * x).sum() - 1.0).abs() < 1e-12);
    }
}
