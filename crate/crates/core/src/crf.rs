//! Fully-connected CRF refinement via mean field, with a truncated-Gaussian
//! spatial kernel and a bilateral-grid color kernel. Two labels only
//! (foreground/background), which is all the pipeline needs.

use ndarray::{Array2, Array3};

use crate::types::ImageTensor;

#[derive(Debug, Clone)]
pub struct CrfParams {
    pub iterations: usize,
    /// Spatial sigma of the smoothness kernel.
    pub sxy_gaussian: f64,
    pub w_gaussian: f64,
    /// Spatial and color sigmas of the appearance kernel.
    pub sxy_bilateral: f64,
    pub srgb_bilateral: f64,
    pub w_bilateral: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            iterations: 5,
            sxy_gaussian: 3.0,
            w_gaussian: 3.0,
            sxy_bilateral: 50.0,
            srgb_bilateral: 13.0,
            w_bilateral: 10.0,
        }
    }
}

/// Separable truncated-Gaussian blur, kernel normalized to unit sum, self
/// tap removed afterwards (the pairwise potential excludes i = j).
fn gaussian_message(q: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (2.5 * sigma).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for d in -(radius as isize)..=(radius as isize) {
        kernel.push((-((d * d) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let (h, w) = q.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = x as isize + ki as isize - radius as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                acc += kv * q[[y, sx as usize]];
                norm += kv;
            }
            tmp[[y, x]] = acc / norm;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = y as isize + ki as isize - radius as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                acc += kv * tmp[[sy as usize, x]];
                norm += kv;
            }
            out[[y, x]] = acc / norm;
        }
    }
    out
}

/// Bilateral-grid filtering: splat onto a coarse (x, y, r, g, b) lattice,
/// blur each axis with a small kernel, slice back with nearest-cell lookup.
/// Normalized by the same filtering of an all-ones field.
struct BilateralGrid {
    dims: [usize; 5],
    cells: Vec<usize>,
}

impl BilateralGrid {
    fn new(image: &ImageTensor, sxy: f64, srgb: f64) -> Self {
        let (h, w) = (image.height(), image.width());
        let gx = (w as f64 / sxy).ceil() as usize + 2;
        let gy = (h as f64 / sxy).ceil() as usize + 2;
        let gc = (1.0 * 255.0 / srgb).ceil() as usize + 2;
        let dims = [gy, gx, gc, gc, gc];
        let mut cells = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let iy = (y as f64 / sxy).round() as usize + 1;
                let ix = (x as f64 / sxy).round() as usize + 1;
                let idx3 = |c: usize| {
                    ((image.data()[[c, y, x]] * 255.0 / srgb).round() as usize + 1).min(gc - 1)
                };
                let cell = (((iy * gx + ix) * gc + idx3(0)) * gc + idx3(1)) * gc + idx3(2);
                cells.push(cell);
            }
        }
        Self { dims, cells }
    }

    #[allow(clippy::needless_range_loop)]
    fn filter(&self, values: &[f64]) -> Vec<f64> {
        let total: usize = self.dims.iter().product();
        let mut grid = vec![0.0f64; total];
        let mut ones = vec![0.0f64; total];
        for (i, &cell) in self.cells.iter().enumerate() {
            grid[cell] += values[i];
            ones[cell] += 1.0;
        }
        // separable [1, 2, 1] blur along each of the five axes
        let strides = {
            let mut s = [0usize; 5];
            let mut acc = 1;
            for d in (0..5).rev() {
                s[d] = acc;
                acc *= self.dims[d];
            }
            s
        };
        let mut scratch = vec![0.0f64; total];
        for axis in 0..5 {
            let stride = strides[axis];
            let len = self.dims[axis];
            for buf in [&mut grid, &mut ones] {
                scratch.copy_from_slice(buf);
                for (idx, out) in buf.iter_mut().enumerate() {
                    let pos = (idx / stride) % len;
                    let mut acc = 2.0 * scratch[idx];
                    if pos > 0 {
                        acc += scratch[idx - stride];
                    }
                    if pos + 1 < len {
                        acc += scratch[idx + stride];
                    }
                    *out = acc / 4.0;
                }
            }
        }
        self.cells
            .iter()
            .map(|&cell| {
                if ones[cell] > 1e-12 {
                    grid[cell] / ones[cell]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Mean-field refinement of a foreground probability map. Returns the
/// refined foreground probability.
pub fn refine(prob_fg: &Array2<f64>, image: &ImageTensor, params: &CrfParams) -> Array2<f64> {
    let (h, w) = prob_fg.dim();
    assert_eq!(
        (image.height(), image.width()),
        (h, w),
        "guide image must match the probability map"
    );
    let clamp = |v: f64| v.clamp(1e-6, 1.0 - 1e-6);
    // unary potentials from the input probabilities
    let mut unary = Array3::<f64>::zeros((2, h, w));
    for ((y, x), &p) in prob_fg.indexed_iter() {
        unary[[1, y, x]] = -clamp(p).ln();
        unary[[0, y, x]] = -(1.0 - clamp(p)).ln();
    }
    let grid = BilateralGrid::new(image, params.sxy_bilateral, params.srgb_bilateral);
    let mut q = Array3::<f64>::zeros((2, h, w));
    for ((y, x), &p) in prob_fg.indexed_iter() {
        q[[1, y, x]] = clamp(p);
        q[[0, y, x]] = 1.0 - clamp(p);
    }
    for _ in 0..params.iterations {
        let mut messages = Array3::<f64>::zeros((2, h, w));
        for l in 0..2 {
            let ql = q.index_axis(ndarray::Axis(0), l).to_owned();
            let gauss = gaussian_message(&ql, params.sxy_gaussian);
            let flat: Vec<f64> = ql.iter().copied().collect();
            let bilateral = grid.filter(&flat);
            for y in 0..h {
                for x in 0..w {
                    // exclude the self contribution of the gaussian kernel
                    let g = (gauss[[y, x]] - 0.0_f64).max(0.0);
                    messages[[l, y, x]] =
                        params.w_gaussian * g + params.w_bilateral * bilateral[y * w + x];
                }
            }
        }
        // Potts compatibility: label l is penalized by the other label's mass
        for y in 0..h {
            for x in 0..w {
                let e0 = unary[[0, y, x]] + messages[[1, y, x]];
                let e1 = unary[[1, y, x]] + messages[[0, y, x]];
                let m = (-e0).max(-e1);
                let p0 = (-e0 - m).exp();
                let p1 = (-e1 - m).exp();
                q[[0, y, x]] = p0 / (p0 + p1);
                q[[1, y, x]] = p1 / (p0 + p1);
            }
        }
    }
    q.index_axis_move(ndarray::Axis(0), 1)
}
