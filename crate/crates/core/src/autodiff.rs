//! Reverse-mode automatic differentiation over f64 arrays.
//!
//! A [`Tape`] records each operation as a node holding the forward value and
//! a backward closure; [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients. Values live behind `Rc`, so closures capture the
//! inputs they need without copying buffers.
//!
//! Only what the adaptation losses and Grad-CAM need is implemented: dense
//! elementwise math, 2-D linear algebra, same-padding convolution, batch
//! norm, softmax variants, bilinear resize and a few broadcast helpers.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

pub type DTensor = ArrayD<f64>;

type BackFn = Box<dyn Fn(&DTensor) -> Vec<DTensor>>;

struct Node {
    value: Rc<DTensor>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

/// Append-only record of operations; node index order is a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Gradients of one scalar output with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<DTensor>>,
}

impl Gradients {
    /// Gradient for `v` in standard layout, zeros if the output did not
    /// depend on it.
    pub fn wrt(&self, v: Var<'_>) -> DTensor {
        match &self.grads[v.idx] {
            Some(g) => g.as_standard_layout().into_owned(),
            None => DTensor::zeros(v.value().shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: DTensor, parents: Vec<usize>, backward: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// A leaf tensor (input or parameter).
    pub fn var(&self, value: DTensor) -> Var<'_> {
        self.push(value, vec![], None)
    }

    /// Leaf from a scalar.
    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.var(DTensor::from_elem(IxDyn(&[1]), value))
    }

    pub fn var1(&self, value: Array1<f64>) -> Var<'_> {
        self.var(value.into_dyn())
    }

    pub fn var2(&self, value: Array2<f64>) -> Var<'_> {
        self.var(value.into_dyn())
    }

    pub fn var3(&self, value: Array3<f64>) -> Var<'_> {
        self.var(value.into_dyn())
    }

    /// Back-propagates from a single-element output and returns all gradients.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.idx].value.len(),
            1,
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<DTensor>> = vec![None; nodes.len()];
        grads[output.idx] = Some(DTensor::from_elem(
            nodes[output.idx].value.shape(),
            1.0,
        ));
        for idx in (0..=output.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[*p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Concatenates along `axis`.
    pub fn concat<'t>(&'t self, axis: usize, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let values: Vec<Rc<DTensor>> = parts.iter().map(|p| p.value_rc()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let parents = parts.iter().map(|p| p.idx).collect();
        self.push(
            out,
            parents,
            Some(Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &len in &sizes {
                    out.push(
                        g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                            .to_owned(),
                    );
                    start += len;
                }
                out
            })),
        )
    }
}

fn same_tape(a: Var<'_>, b: Var<'_>) {
    debug_assert!(std::ptr::eq(a.tape, b.tape), "vars from different tapes");
}

/// Broadcast-aware gradient reduction: if the parent was a single-element
/// array, its gradient is the sum of the upstream gradient.
fn reduce_to_shape(g: &DTensor, shape: &[usize]) -> DTensor {
    if g.shape() == shape {
        g.clone()
    } else {
        DTensor::from_elem(shape, g.sum())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value_rc(&self) -> Rc<DTensor> {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn value(&self) -> DTensor {
        (*self.value_rc()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_rc().shape().to_vec()
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        let v = self.value_rc();
        assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    fn binop(
        &self,
        other: Var<'t>,
        forward: impl Fn(&DTensor, &DTensor) -> DTensor,
        backward: impl Fn(&DTensor, &DTensor, &DTensor) -> (DTensor, DTensor) + 'static,
    ) -> Var<'t> {
        same_tape(*self, other);
        let a = self.value_rc();
        let b = other.value_rc();
        assert!(
            a.shape() == b.shape() || a.len() == 1 || b.len() == 1,
            "binop shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let out = forward(&a, &b);
        let (ar, br) = (a.clone(), b.clone());
        self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(move |g| {
                let (da, db) = backward(g, &ar, &br);
                vec![
                    reduce_to_shape(&da, ar.shape()),
                    reduce_to_shape(&db, br.shape()),
                ]
            })),
        )
    }

    fn unop(
        &self,
        forward: impl Fn(&DTensor) -> DTensor,
        backward: impl Fn(&DTensor, &DTensor, &DTensor) -> DTensor + 'static,
    ) -> Var<'t> {
        let x = self.value_rc();
        let y = forward(&x);
        let yr = Rc::new(y.clone());
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| vec![backward(g, &x, &yr)])),
        )
    }

    fn bc(a: &DTensor, b: &DTensor, f: impl Fn(f64, f64) -> f64) -> DTensor {
        if a.shape() == b.shape() {
            ndarray::Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))
        } else if b.len() == 1 {
            let s = b.iter().next().copied().unwrap();
            a.mapv(|x| f(x, s))
        } else {
            let s = a.iter().next().copied().unwrap();
            b.mapv(|y| f(s, y))
        }
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.binop(
            other,
            |a, b| Self::bc(a, b, |x, y| x + y),
            |g, _, _| (g.clone(), g.clone()),
        )
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.binop(
            other,
            |a, b| Self::bc(a, b, |x, y| x - y),
            |g, _, _| (g.clone(), -g),
        )
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.binop(
            other,
            |a, b| Self::bc(a, b, |x, y| x * y),
            |g, a, b| (Self::bc(g, b, |x, y| x * y), Self::bc(g, a, |x, y| x * y)),
        )
    }

    pub fn div(&self, other: Var<'t>) -> Var<'t> {
        self.binop(
            other,
            |a, b| Self::bc(a, b, |x, y| x / y),
            |g, a, b| {
                let da = Self::bc(g, b, |x, y| x / y);
                let gb = Self::bc(g, b, |x, y| x / (y * y));
                let db = Self::bc(&gb, a, |x, y| -x * y);
                (da, db)
            },
        )
    }

    pub fn neg(&self) -> Var<'t> {
        self.unop(|x| -x, |g, _, _| -g)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unop(move |x| x * c, move |g, _, _| g * c)
    }

    pub fn add_const(&self, c: f64) -> Var<'t> {
        self.unop(move |x| x + c, |g, _, _| g.clone())
    }

    pub fn relu(&self) -> Var<'t> {
        self.unop(
            |x| x.mapv(|v| v.max(0.0)),
            |g, x, _| {
                ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&gv, &xv| if xv > 0.0 { gv } else { 0.0 })
            },
        )
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unop(
            |x| x.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            |g, _, y| {
                ndarray::Zip::from(g)
                    .and(y.view())
                    .map_collect(|&gv, &yv| gv * yv * (1.0 - yv))
            },
        )
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unop(
            |x| x.mapv(f64::tanh),
            |g, _, y| {
                ndarray::Zip::from(g)
                    .and(y.view())
                    .map_collect(|&gv, &yv| gv * (1.0 - yv * yv))
            },
        )
    }

    pub fn exp(&self) -> Var<'t> {
        self.unop(
            |x| x.mapv(f64::exp),
            |g, _, y| {
                ndarray::Zip::from(g)
                    .and(y.view())
                    .map_collect(|&gv, &yv| gv * yv)
            },
        )
    }

    pub fn ln(&self) -> Var<'t> {
        self.unop(
            |x| x.mapv(f64::ln),
            |g, x, _| {
                ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&gv, &xv| gv / xv)
            },
        )
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unop(
            |x| x.mapv(f64::sqrt),
            |g, _, y| {
                ndarray::Zip::from(g)
                    .and(y.view())
                    .map_collect(|&gv, &yv| gv / (2.0 * yv))
            },
        )
    }

    /// Elementwise reciprocal.
    pub fn recip(&self) -> Var<'t> {
        self.unop(
            |x| x.mapv(|v| 1.0 / v),
            |g, x, _| {
                ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&gv, &xv| -gv / (xv * xv))
            },
        )
    }

    /// Numerically stable `ln(1 + exp(x))`; derivative is the sigmoid.
    pub fn softplus(&self) -> Var<'t> {
        self.unop(
            |x| x.mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p()),
            |g, x, _| {
                ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&gv, &xv| gv / (1.0 + (-xv).exp()))
            },
        )
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF.
    pub fn gelu(&self) -> Var<'t> {
        fn phi(x: f64) -> f64 {
            0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
        }
        self.unop(
            |x| x.mapv(|v| v * phi(v)),
            |g, x, _| {
                ndarray::Zip::from(g).and(x).map_collect(|&gv, &xv| {
                    let pdf = (-0.5 * xv * xv).exp() / (2.0 * std::f64::consts::PI).sqrt();
                    gv * (phi(xv) + xv * pdf)
                })
            },
        )
    }

    pub fn sum_all(&self) -> Var<'t> {
        let x = self.value_rc();
        let shape = x.shape().to_vec();
        let out = DTensor::from_elem(IxDyn(&[1]), x.sum());
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g| {
                vec![DTensor::from_elem(shape.as_slice(), g[[0]])]
            })),
        )
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.value_rc().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn reduce_max(&self) -> Var<'t> {
        self.reduce_extreme(true)
    }

    pub fn reduce_min(&self) -> Var<'t> {
        self.reduce_extreme(false)
    }

    fn reduce_extreme(&self, max: bool) -> Var<'t> {
        let x = self.value_rc();
        let mut best = if max { f64::NEG_INFINITY } else { f64::INFINITY };
        let mut best_idx = 0;
        for (i, &v) in x.iter().enumerate() {
            if (max && v > best) || (!max && v < best) {
                best = v;
                best_idx = i;
            }
        }
        let shape = x.shape().to_vec();
        let out = DTensor::from_elem(IxDyn(&[1]), best);
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut grad = DTensor::zeros(shape.as_slice());
                grad.as_slice_mut().unwrap()[best_idx] = g[[0]];
                vec![grad]
            })),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let x = self.value_rc();
        let old_shape = x.shape().to_vec();
        let out = x
            .to_shape(shape)
            .expect("reshape size mismatch")
            .to_owned();
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g| {
                vec![g.to_shape(old_shape.as_slice()).unwrap().to_owned()]
            })),
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let x = self.value_rc();
        let shape = x.shape().to_vec();
        let out = x
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut grad = DTensor::zeros(shape.as_slice());
                grad.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![grad]
            })),
        )
    }

    /// 2-D transpose.
    pub fn t2(&self) -> Var<'t> {
        self.unop(
            |x| x.view().into_dimensionality::<ndarray::Ix2>().unwrap().t().to_owned().into_dyn(),
            |g, _, _| g.view().into_dimensionality::<ndarray::Ix2>().unwrap().t().to_owned().into_dyn(),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        same_tape(*self, other);
        let a = self.value_rc();
        let b = other.value_rc();
        let a2 = as2(&a);
        let b2 = as2(&b);
        let out = a2.dot(&b2).into_dyn();
        let (ar, br) = (a.clone(), b.clone());
        self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let da = g2.dot(&as2(&br).t()).into_dyn();
                let db = as2(&ar).t().dot(&g2).into_dyn();
                vec![da, db]
            })),
        )
    }

    /// `a[m×n] + rowvec[n]`, broadcast over rows.
    pub fn add_rowvec(&self, v: Var<'t>) -> Var<'t> {
        same_tape(*self, v);
        let a = self.value_rc();
        let b = v.value_rc();
        let mut out = as2(&a).into_owned();
        let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut row in out.rows_mut() {
            row += &b1;
        }
        self.tape.push(
            out.into_dyn(),
            vec![self.idx, v.idx],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// `a[m×n] + colvec[m]`, broadcast over columns.
    pub fn add_colvec(&self, v: Var<'t>) -> Var<'t> {
        same_tape(*self, v);
        let a = self.value_rc();
        let b = v.value_rc();
        let mut out = as2(&a).into_owned();
        let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for (mut row, &bv) in out.rows_mut().into_iter().zip(b1.iter()) {
            row += bv;
        }
        self.tape.push(
            out.into_dyn(),
            vec![self.idx, v.idx],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(1)).into_dyn()]
            })),
        )
    }

    /// `a[m×n] * rowvec[n]`, broadcast over rows.
    pub fn mul_rowvec(&self, v: Var<'t>) -> Var<'t> {
        same_tape(*self, v);
        let a = self.value_rc();
        let b = v.value_rc();
        let b1 = b
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let mut out = as2(&a).into_owned();
        for mut row in out.rows_mut() {
            row *= &b1;
        }
        let (ar, br) = (a.clone(), b.clone());
        self.tape.push(
            out.into_dyn(),
            vec![self.idx, v.idx],
            Some(Box::new(move |g| {
                let b1 = br.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut da = as2(g).into_owned();
                for mut row in da.rows_mut() {
                    row *= &b1;
                }
                let prod = as2(g).into_owned() * as2(&ar);
                vec![da.into_dyn(), prod.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// `a[m×n] * colvec[m]`, broadcast over columns.
    pub fn mul_colvec(&self, v: Var<'t>) -> Var<'t> {
        same_tape(*self, v);
        let a = self.value_rc();
        let b = v.value_rc();
        let a2 = as2(&a).into_owned();
        let b1 = b
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let mut out = a2.clone();
        for (mut row, &bv) in out.rows_mut().into_iter().zip(b1.iter()) {
            row *= bv;
        }
        let (ar, br) = (a.clone(), b.clone());
        self.tape.push(
            out.into_dyn(),
            vec![self.idx, v.idx],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let b1 = br.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut da = g2.into_owned();
                for (mut row, &bv) in da.rows_mut().into_iter().zip(b1.iter()) {
                    row *= bv;
                }
                let prod = as2(g).into_owned() * as2(&ar);
                vec![da.into_dyn(), prod.sum_axis(Axis(1)).into_dyn()]
            })),
        )
    }

    /// Row-wise mean of a 2-D array: `[m×n] -> [m]`.
    pub fn mean_rows(&self) -> Var<'t> {
        let x = self.value_rc();
        let x2 = as2(&x);
        let (m, n) = (x2.nrows(), x2.ncols());
        let out = x2.mean_axis(Axis(1)).unwrap().into_dyn();
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut grad = Array2::<f64>::zeros((m, n));
                for (mut row, &gv) in grad.rows_mut().into_iter().zip(g1.iter()) {
                    row.fill(gv / n as f64);
                }
                vec![grad.into_dyn()]
            })),
        )
    }

    /// Per-channel multiply of a `[c×h×w]` map by a `[c]` vector.
    pub fn channel_mul(&self, v: Var<'t>) -> Var<'t> {
        same_tape(*self, v);
        let x = self.value_rc();
        let s = v.value_rc();
        let x3 = as3(&x);
        let s1 = s
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let mut out = x3.into_owned();
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            plane *= s1[c];
        }
        let (xr, sr) = (x.clone(), s.clone());
        self.tape.push(
            out.into_dyn(),
            vec![self.idx, v.idx],
            Some(Box::new(move |g| {
                let g3 = as3(g);
                let x3 = as3(&xr);
                let s1 = sr.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut dx = g3.into_owned();
                for (c, mut plane) in dx.outer_iter_mut().enumerate() {
                    plane *= s1[c];
                }
                let mut ds = Array1::<f64>::zeros(s1.len());
                for (c, val) in ds.iter_mut().enumerate() {
                    *val = (&as3(g).index_axis(Axis(0), c) * &x3.index_axis(Axis(0), c)).sum();
                }
                vec![dx.into_dyn(), ds.into_dyn()]
            })),
        )
    }

    /// Expand a `[c]` vector to a constant `[c×h×w]` map.
    pub fn channel_broadcast(&self, h: usize, w: usize) -> Var<'t> {
        let s = self.value_rc();
        let s1 = s.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let c = s1.len();
        let mut out = Array3::<f64>::zeros((c, h, w));
        for (ch, mut plane) in out.outer_iter_mut().enumerate() {
            plane.fill(s1[ch]);
        }
        self.tape.push(
            out.into_dyn(),
            vec![self.idx],
            Some(Box::new(move |g| {
                let g3 = as3(g);
                let mut ds = Array1::<f64>::zeros(c);
                for (ch, val) in ds.iter_mut().enumerate() {
                    *val = g3.index_axis(Axis(0), ch).sum();
                }
                vec![ds.into_dyn()]
            })),
        )
    }

    /// Spatial mean per channel: `[c×h×w] -> [c]` (global average pooling).
    pub fn mean_spatial(&self) -> Var<'t> {
        let x = self.value_rc();
        let x3 = as3(&x);
        let (c, h, w) = x3.dim();
        let mut out = Array1::<f64>::zeros(c);
        for (ch, val) in out.iter_mut().enumerate() {
            *val = x3.index_axis(Axis(0), ch).mean().unwrap();
        }
        self.tape.push(
            out.into_dyn(),
            vec![self.idx],
            Some(Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut grad = Array3::<f64>::zeros((c, h, w));
                for (ch, mut plane) in grad.outer_iter_mut().enumerate() {
                    plane.fill(g1[ch] / (h * w) as f64);
                }
                vec![grad.into_dyn()]
            })),
        )
    }

    /// Row-wise softmax of a 2-D array.
    pub fn softmax_rows(&self) -> Var<'t> {
        self.unop(
            |x| {
                let x2 = as2(x);
                let mut out = x2.into_owned();
                for mut row in out.rows_mut() {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|v| (v - m).exp());
                    let s = row.sum();
                    row.mapv_inplace(|v| v / s);
                }
                out.into_dyn()
            },
            |g, _, y| {
                let y2 = as2(y);
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros(y2.raw_dim());
                for ((mut drow, yrow), grow) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(y2.rows())
                    .zip(g2.rows())
                {
                    let dot: f64 = yrow.iter().zip(grow.iter()).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                        *d = yv * (gv - dot);
                    }
                }
                dx.into_dyn()
            },
        )
    }

    /// Row-wise log-softmax of a 2-D array.
    pub fn log_softmax_rows(&self) -> Var<'t> {
        self.unop(
            |x| {
                let x2 = as2(x);
                let mut out = x2.into_owned();
                for mut row in out.rows_mut() {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
                    row.mapv_inplace(|v| v - lse);
                }
                out.into_dyn()
            },
            |g, _, y| {
                let y2 = as2(y);
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros(y2.raw_dim());
                for ((mut drow, yrow), grow) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(y2.rows())
                    .zip(g2.rows())
                {
                    let gsum: f64 = grow.sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                        *d = gv - yv.exp() * gsum;
                    }
                }
                dx.into_dyn()
            },
        )
    }

    /// L2-normalizes each column of a 2-D array.
    pub fn l2_normalize_cols(&self, eps: f64) -> Var<'t> {
        let x = self.value_rc();
        let x2 = as2(&x).into_owned();
        let (m, n) = x2.dim();
        let mut norms = Array1::<f64>::zeros(n);
        let mut out = x2.clone();
        for j in 0..n {
            let nj = (x2.column(j).mapv(|v| v * v).sum() + eps).sqrt();
            norms[j] = nj;
            out.column_mut(j).mapv_inplace(|v| v / nj);
        }
        let yr = Rc::new(out.clone());
        self.tape.push(
            out.into_dyn(),
            vec![self.idx],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros((m, n));
                for j in 0..n {
                    let yj = yr.column(j);
                    let gj = g2.column(j);
                    let dot: f64 = yj.iter().zip(gj.iter()).map(|(&a, &b)| a * b).sum();
                    for i in 0..m {
                        dx[[i, j]] = (gj[i] - yj[i] * dot) / norms[j];
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Selects columns of a 2-D array by index (duplicates allowed).
    pub fn gather_cols(&self, indices: &[usize]) -> Var<'t> {
        let x = self.value_rc();
        let x2 = as2(&x);
        let (m, n) = x2.dim();
        let idx = indices.to_vec();
        let mut out = Array2::<f64>::zeros((m, idx.len()));
        for (j, &src) in idx.iter().enumerate() {
            out.column_mut(j).assign(&x2.column(src));
        }
        self.tape.push(
            out.into_dyn(),
            vec![self.idx],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros((m, n));
                for (j, &src) in idx.iter().enumerate() {
                    let mut col = dx.column_mut(src);
                    col += &g2.column(j);
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Same-padding stride-1 convolution of `[ci×h×w]` with `[co×ci×k×k]`.
    pub fn conv2d_same(&self, weight: Var<'t>) -> Var<'t> {
        same_tape(*self, weight);
        let x = self.value_rc();
        let w = weight.value_rc();
        let x3 = as3(&x).into_owned();
        let w4 = w
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();
        let (co, ci, kh, kw) = w4.dim();
        let (cin, h, wd) = x3.dim();
        assert_eq!(ci, cin, "conv channel mismatch");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv kernel must be odd");
        let cols = im2col(&x3, kh, kw);
        let w2 = w4.to_shape((co, ci * kh * kw)).unwrap().to_owned();
        let out2 = w2.dot(&cols);
        let out = out2.to_shape((co, h, wd)).unwrap().to_owned().into_dyn();
        let cols_rc = Rc::new(cols);
        self.tape.push(
            out,
            vec![self.idx, weight.idx],
            Some(Box::new(move |g| {
                let g2 = as3(g)
                    .to_shape((co, h * wd))
                    .unwrap()
                    .to_owned();
                let dw2 = g2.dot(&cols_rc.t());
                let dw = dw2
                    .to_shape((co, ci, kh, kw))
                    .unwrap()
                    .to_owned()
                    .into_dyn();
                let dcols = w2.t().dot(&g2);
                let dx = col2im(&dcols, ci, h, wd, kh, kw).into_dyn();
                vec![dx, dw]
            })),
        )
    }

    /// Training-mode batch normalization over the spatial dimensions of a
    /// `[c×h×w]` map. Returns the normalized output plus the batch mean and
    /// (population) variance used, for running-statistics updates.
    pub fn batch_norm_train(
        &self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> (Var<'t>, Array1<f64>, Array1<f64>) {
        same_tape(*self, gamma);
        same_tape(*self, beta);
        let x = self.value_rc();
        let x3 = as3(&x).into_owned();
        let (c, h, w) = x3.dim();
        let n = (h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let plane = x3.index_axis(Axis(0), ch);
            let m = plane.mean().unwrap();
            mean[ch] = m;
            var[ch] = plane.mapv(|v| (v - m) * (v - m)).mean().unwrap();
        }
        let g1 = gamma
            .value_rc()
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let b1 = beta
            .value_rc()
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let mut xhat = x3.clone();
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let m = mean[ch];
            xhat.index_axis_mut(Axis(0), ch)
                .mapv_inplace(|v| (v - m) * inv);
        }
        let mut out = xhat.clone();
        for ch in 0..c {
            out.index_axis_mut(Axis(0), ch)
                .mapv_inplace(|v| v * g1[ch] + b1[ch]);
        }
        let xhat_rc = Rc::new(xhat);
        let var_c = var.clone();
        let out_var = self.tape.push(
            out.into_dyn(),
            vec![self.idx, gamma.idx, beta.idx],
            Some(Box::new(move |g| {
                let g3 = as3(g);
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ch in 0..c {
                    let gy = g3.index_axis(Axis(0), ch);
                    let xh = xhat_rc.index_axis(Axis(0), ch);
                    dbeta[ch] = gy.sum();
                    dgamma[ch] = (&gy * &xh).sum();
                    let inv = 1.0 / (var_c[ch] + eps).sqrt();
                    let mean_gy = dbeta[ch] / n;
                    let mean_gy_xh = dgamma[ch] / n;
                    let mut dxc = dx.index_axis_mut(Axis(0), ch);
                    ndarray::Zip::from(&mut dxc)
                        .and(&gy)
                        .and(&xh)
                        .for_each(|d, &gv, &xv| {
                            *d = g1[ch] * inv * (gv - mean_gy - xv * mean_gy_xh);
                        });
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            })),
        );
        (out_var, mean, var)
    }

    /// Bilinear resize of a `[c×h×w]` map to `[c×oh×ow]` (align-corners-false
    /// convention). Linear, so the backward pass scatters the same weights.
    pub fn bilinear_resize(&self, oh: usize, ow: usize) -> Var<'t> {
        let x = self.value_rc();
        let x3 = as3(&x).into_owned();
        let (c, h, w) = x3.dim();
        let taps = bilinear_taps(h, w, oh, ow);
        let mut out = Array3::<f64>::zeros((c, oh, ow));
        for ch in 0..c {
            let plane = x3.index_axis(Axis(0), ch);
            let mut oplane = out.index_axis_mut(Axis(0), ch);
            for (oi, row) in taps.iter().enumerate() {
                for (oj, tap) in row.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(iy, ix, wt) in tap {
                        acc += wt * plane[[iy, ix]];
                    }
                    oplane[[oi, oj]] = acc;
                }
            }
        }
        let taps_rc = Rc::new(taps);
        self.tape.push(
            out.into_dyn(),
            vec![self.idx],
            Some(Box::new(move |g| {
                let g3 = as3(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ch in 0..c {
                    let gplane = g3.index_axis(Axis(0), ch);
                    let mut dplane = dx.index_axis_mut(Axis(0), ch);
                    for (oi, row) in taps_rc.iter().enumerate() {
                        for (oj, tap) in row.iter().enumerate() {
                            let gv = gplane[[oi, oj]];
                            for &(iy, ix, wt) in tap {
                                dplane[[iy, ix]] += wt * gv;
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }
}

fn as2(x: &DTensor) -> ndarray::ArrayView2<'_, f64> {
    x.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-D tensor")
}

fn as3(x: &DTensor) -> ndarray::ArrayView3<'_, f64> {
    x.view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("expected 3-D tensor")
}

/// im2col for stride-1 same-padding convolution: `[ci×h×w] -> [(ci·kh·kw) × (h·w)]`.
fn im2col(x: &Array3<f64>, kh: usize, kw: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (ph, pw) = (kh / 2, kw / 2);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, h * w));
    for ch in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ch * kh + dy) * kw + dx;
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[[row, y * w + xx]] = x[[ch, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Array3<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ch * kh + dy) * kw + dx;
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[[ch, sy as usize, sx as usize]] += cols[[row, y * w + xx]];
                    }
                }
            }
        }
    }
    x
}

type Tap = Vec<(usize, usize, f64)>;

/// Source taps and weights for each output pixel of a bilinear resize.
fn bilinear_taps(h: usize, w: usize, oh: usize, ow: usize) -> Vec<Vec<Tap>> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut taps = Vec::with_capacity(oh);
    for oi in 0..oh {
        let mut row = Vec::with_capacity(ow);
        let fy = ((oi as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for oj in 0..ow {
            let fx = ((oj as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            row.push(vec![
                (y0, x0, (1.0 - ty) * (1.0 - tx)),
                (y0, x1, (1.0 - ty) * tx),
                (y1, x0, ty * (1.0 - tx)),
                (y1, x1, ty * tx),
            ]);
        }
        taps.push(row);
    }
    taps
}

/// Abramowitz–Stegun 7.1.26 rational approximation, |err| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}
