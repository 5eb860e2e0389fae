//! Task-Specific Attention Adapter: per-layer Group Channel Attention
//! followed by a two-convolution adaptation block, plus the pixel-level
//! classifier head and the cross-attention projections trained with it.
//!
//! All learnable state lives in [`AdapterParams`]; forward passes run on an
//! autodiff tape so the adaptation losses can differentiate through them.

use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{DTensor, Tape, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensorfile::TensorFile;

pub const BN_EPS: f64 = 1e-5;
/// Momentum for the running-statistics update during adaptation.
pub const BN_MOMENTUM: f64 = 0.1;

/// A forward output plus the batch statistics used (train mode only).
pub type ForwardWithStats<'t> = (Var<'t>, Option<(Array1<f64>, Array1<f64>)>);

/// Batch-norm behavior: batch statistics while adapting, running statistics
/// at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Inference,
}

/// Group Channel Attention weights, shared across the groups of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GcaParams {
    /// `[proj_dim × group_size]`
    pub w1: DTensor,
    /// `[group_size × proj_dim]`
    pub w2: DTensor,
    pub group_size: usize,
    pub proj_dim: usize,
}

/// Everything one pyramid layer owns: gating, adaptation block and the
/// query/key projections of the mask-aggregation attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayerParams {
    pub gca: Option<GcaParams>,
    /// `[width × c_in × k × k]`
    pub conv1_w: DTensor,
    pub conv1_b: DTensor,
    pub bn_gamma: DTensor,
    pub bn_beta: DTensor,
    /// Running statistics; not learnable.
    pub bn_mean: DTensor,
    pub bn_var: DTensor,
    /// `[width × width × k × k]`
    pub conv2_w: DTensor,
    pub conv2_b: DTensor,
    /// `[width × heads·head_dim]`
    pub attn_wq: DTensor,
    pub attn_bq: DTensor,
    pub attn_wk: DTensor,
    pub attn_bk: DTensor,
}

/// All learnable state of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub layers: Vec<AdapterLayerParams>,
    /// Pixel classifier: `[2 × n_layers·width]` over concatenated features.
    pub head_w: DTensor,
    pub head_b: DTensor,
    pub width: usize,
    pub kernel: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub in_channels: Vec<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> DTensor {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

/// Builds adapter parameters for a pyramid with the given per-layer channel
/// counts. Deterministic in `cfg.adapter.init_seed`.
pub fn init_adapter(channels: &[usize], cfg: &Config) -> Result<AdapterParams> {
    if channels.is_empty() {
        return Err(Error::Config("pyramid has no layers".into()));
    }
    let width = cfg.adapter.width;
    let k = cfg.adapter.kernel;
    let g = cfg.gca.group_size;
    let d = cfg.gca.proj_dim;
    let pdim = cfg.attention.heads * cfg.attention.head_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.adapter.init_seed);
    let mut layers = Vec::with_capacity(channels.len());
    for &c in channels {
        let gca = if cfg.gca.enabled {
            if c % g != 0 {
                return Err(Error::Config(format!(
                    "group size {g} does not divide layer channels {c}"
                )));
            }
            // small weights keep the initial gate near sigmoid(0) = 0.5
            Some(GcaParams {
                w1: uniform(&mut rng, &[d, g], 0.1 / (g as f64).sqrt()),
                w2: uniform(&mut rng, &[g, d], 0.1 / (d as f64).sqrt()),
                group_size: g,
                proj_dim: d,
            })
        } else {
            None
        };
        let conv1_bound = (6.0 / (c * k * k) as f64).sqrt();
        let conv2_bound = (6.0 / (width * k * k) as f64).sqrt();
        // near-identity Q/K projections make the initial attention logits a
        // feature-similarity kernel; the adaptation losses shape the
        // features, which is what sharpens these masks
        let attn_noise = 0.02 / (width as f64).sqrt();
        let mut attn_proj = || {
            let mut w = uniform(&mut rng, &[width, pdim], attn_noise);
            for j in 0..pdim {
                w[[j % width, j]] += 1.0;
            }
            w
        };
        let attn_wq = attn_proj();
        let attn_wk = attn_proj();
        layers.push(AdapterLayerParams {
            gca,
            conv1_w: uniform(&mut rng, &[width, c, k, k], conv1_bound),
            conv1_b: ArrayD::zeros(IxDyn(&[width])),
            bn_gamma: ArrayD::from_elem(IxDyn(&[width]), 1.0),
            bn_beta: ArrayD::zeros(IxDyn(&[width])),
            bn_mean: ArrayD::zeros(IxDyn(&[width])),
            bn_var: ArrayD::from_elem(IxDyn(&[width]), 1.0),
            conv2_w: uniform(&mut rng, &[width, width, k, k], conv2_bound),
            conv2_b: ArrayD::zeros(IxDyn(&[width])),
            attn_wq,
            attn_bq: ArrayD::zeros(IxDyn(&[pdim])),
            attn_wk,
            attn_bk: ArrayD::zeros(IxDyn(&[pdim])),
        });
    }
    let ncat = channels.len() * width;
    let head_bound = (6.0 / ncat as f64).sqrt();
    let mut params = AdapterParams {
        layers,
        head_w: uniform(&mut rng, &[2, ncat], head_bound),
        head_b: ArrayD::zeros(IxDyn(&[2])),
        width,
        kernel: k,
        heads: cfg.attention.heads,
        head_dim: cfg.attention.head_dim,
        in_channels: channels.to_vec(),
    };
    // keep values exactly representable at checkpoint precision from the
    // start, so a zero-lr adaptation round-trips bitwise
    params.quantize_to_checkpoint_precision();
    Ok(params)
}

impl AdapterParams {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Visits every learnable tensor in a stable order.
    pub fn visit_learnable(&self, mut f: impl FnMut(String, &DTensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(g) = &l.gca {
                f(format!("layers.{i}.gca.w1"), &g.w1);
                f(format!("layers.{i}.gca.w2"), &g.w2);
            }
            f(format!("layers.{i}.conv1.weight"), &l.conv1_w);
            f(format!("layers.{i}.conv1.bias"), &l.conv1_b);
            f(format!("layers.{i}.bn.weight"), &l.bn_gamma);
            f(format!("layers.{i}.bn.bias"), &l.bn_beta);
            f(format!("layers.{i}.conv2.weight"), &l.conv2_w);
            f(format!("layers.{i}.conv2.bias"), &l.conv2_b);
            f(format!("layers.{i}.attn.wq"), &l.attn_wq);
            f(format!("layers.{i}.attn.bq"), &l.attn_bq);
            f(format!("layers.{i}.attn.wk"), &l.attn_wk);
            f(format!("layers.{i}.attn.bk"), &l.attn_bk);
        }
        f("head.weight".into(), &self.head_w);
        f("head.bias".into(), &self.head_b);
    }

    /// Mutable variant of [`visit_learnable`], same order.
    pub fn visit_learnable_mut(&mut self, mut f: impl FnMut(&mut DTensor)) {
        for l in self.layers.iter_mut() {
            if let Some(g) = &mut l.gca {
                f(&mut g.w1);
                f(&mut g.w2);
            }
            f(&mut l.conv1_w);
            f(&mut l.conv1_b);
            f(&mut l.bn_gamma);
            f(&mut l.bn_beta);
            f(&mut l.conv2_w);
            f(&mut l.conv2_b);
            f(&mut l.attn_wq);
            f(&mut l.attn_bq);
            f(&mut l.attn_wk);
            f(&mut l.attn_bk);
        }
        f(&mut self.head_w);
        f(&mut self.head_b);
    }

    /// Total learnable parameter count (running statistics excluded).
    pub fn learnable_count(&self) -> usize {
        let mut n = 0;
        self.visit_learnable(|_, t| n += t.len());
        n
    }

    /// Narrows every tensor (including running statistics) to f32 and back,
    /// so in-memory parameters match the checkpoint encoding exactly and
    /// cached reruns reproduce predictions bitwise.
    pub fn quantize_to_checkpoint_precision(&mut self) {
        self.visit_learnable_mut(|t| *t = t.mapv(|v| v as f32 as f64));
        for l in self.layers.iter_mut() {
            l.bn_mean = l.bn_mean.mapv(|v| v as f32 as f64);
            l.bn_var = l.bn_var.mapv(|v| v as f32 as f64);
        }
    }

    pub fn to_tensorfile(&self, config_hash: &str) -> TensorFile {
        let shapes: Vec<Vec<usize>> = self
            .layers
            .iter()
            .map(|l| l.conv1_w.shape().to_vec())
            .collect();
        let meta = serde_json::json!({
            "format": "tvgseg-adapter",
            "version": 1,
            "config_hash": config_hash,
            "width": self.width,
            "kernel": self.kernel,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "in_channels": self.in_channels,
            "layer_conv1_shapes": shapes,
        });
        let mut tf = TensorFile::with_meta(meta.to_string());
        self.visit_learnable(|name, t| tf.insert_f64(name, t));
        for (i, l) in self.layers.iter().enumerate() {
            tf.insert_f64(format!("layers.{i}.bn.running_mean"), &l.bn_mean);
            tf.insert_f64(format!("layers.{i}.bn.running_var"), &l.bn_var);
        }
        tf
    }

    pub fn from_tensorfile(tf: &TensorFile) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&tf.meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta["format"] != "tvgseg-adapter" {
            return Err(Error::Format("not an adapter checkpoint".into()));
        }
        if meta["version"] != 1 {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                meta["version"]
            )));
        }
        let width = meta["width"].as_u64().unwrap_or(0) as usize;
        let kernel = meta["kernel"].as_u64().unwrap_or(0) as usize;
        let heads = meta["heads"].as_u64().unwrap_or(0) as usize;
        let head_dim = meta["head_dim"].as_u64().unwrap_or(0) as usize;
        let in_channels: Vec<usize> = meta["in_channels"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect())
            .unwrap_or_default();
        let mut layers = Vec::with_capacity(in_channels.len());
        for i in 0..in_channels.len() {
            let gca = match (
                tf.get(&format!("layers.{i}.gca.w1")),
                tf.get(&format!("layers.{i}.gca.w2")),
            ) {
                (Some(_), Some(_)) => {
                    let w1 = tf.require_f64(&format!("layers.{i}.gca.w1"))?;
                    let w2 = tf.require_f64(&format!("layers.{i}.gca.w2"))?;
                    Some(GcaParams {
                        group_size: w2.shape()[0],
                        proj_dim: w1.shape()[0],
                        w1,
                        w2,
                    })
                }
                _ => None,
            };
            layers.push(AdapterLayerParams {
                gca,
                conv1_w: tf.require_f64(&format!("layers.{i}.conv1.weight"))?,
                conv1_b: tf.require_f64(&format!("layers.{i}.conv1.bias"))?,
                bn_gamma: tf.require_f64(&format!("layers.{i}.bn.weight"))?,
                bn_beta: tf.require_f64(&format!("layers.{i}.bn.bias"))?,
                bn_mean: tf.require_f64(&format!("layers.{i}.bn.running_mean"))?,
                bn_var: tf.require_f64(&format!("layers.{i}.bn.running_var"))?,
                conv2_w: tf.require_f64(&format!("layers.{i}.conv2.weight"))?,
                conv2_b: tf.require_f64(&format!("layers.{i}.conv2.bias"))?,
                attn_wq: tf.require_f64(&format!("layers.{i}.attn.wq"))?,
                attn_bq: tf.require_f64(&format!("layers.{i}.attn.bq"))?,
                attn_wk: tf.require_f64(&format!("layers.{i}.attn.wk"))?,
                attn_bk: tf.require_f64(&format!("layers.{i}.attn.bk"))?,
            });
        }
        Ok(Self {
            layers,
            head_w: tf.require_f64("head.weight")?,
            head_b: tf.require_f64("head.bias")?,
            width,
            kernel,
            heads,
            head_dim,
            in_channels,
        })
    }

    pub fn checksum(&self) -> String {
        self.to_tensorfile("").checksum()
    }
}

/// Per-layer leaf vars on a tape, mirroring [`AdapterLayerParams`].
pub struct LayerVars<'t> {
    pub gca_w1: Option<Var<'t>>,
    pub gca_w2: Option<Var<'t>>,
    pub group_size: usize,
    pub conv1_w: Var<'t>,
    pub conv1_b: Var<'t>,
    pub bn_gamma: Var<'t>,
    pub bn_beta: Var<'t>,
    pub conv2_w: Var<'t>,
    pub conv2_b: Var<'t>,
    pub attn_wq: Var<'t>,
    pub attn_bq: Var<'t>,
    pub attn_wk: Var<'t>,
    pub attn_bk: Var<'t>,
    bn_mean: Array1<f64>,
    bn_var: Array1<f64>,
}

/// All adapter leaf vars on a tape; gradient order matches
/// [`AdapterParams::visit_learnable`].
pub struct AdapterVars<'t> {
    pub layers: Vec<LayerVars<'t>>,
    pub head_w: Var<'t>,
    pub head_b: Var<'t>,
}

impl<'t> AdapterVars<'t> {
    pub fn new(tape: &'t Tape, p: &AdapterParams) -> Self {
        let layers = p
            .layers
            .iter()
            .map(|l| LayerVars {
                gca_w1: l.gca.as_ref().map(|g| tape.var(g.w1.clone())),
                gca_w2: l.gca.as_ref().map(|g| tape.var(g.w2.clone())),
                group_size: l.gca.as_ref().map(|g| g.group_size).unwrap_or(0),
                conv1_w: tape.var(l.conv1_w.clone()),
                conv1_b: tape.var(l.conv1_b.clone()),
                bn_gamma: tape.var(l.bn_gamma.clone()),
                bn_beta: tape.var(l.bn_beta.clone()),
                conv2_w: tape.var(l.conv2_w.clone()),
                conv2_b: tape.var(l.conv2_b.clone()),
                attn_wq: tape.var(l.attn_wq.clone()),
                attn_bq: tape.var(l.attn_bq.clone()),
                attn_wk: tape.var(l.attn_wk.clone()),
                attn_bk: tape.var(l.attn_bk.clone()),
                bn_mean: l
                    .bn_mean
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .to_owned(),
                bn_var: l
                    .bn_var
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .to_owned(),
            })
            .collect();
        Self {
            layers,
            head_w: tape.var(p.head_w.clone()),
            head_b: tape.var(p.head_b.clone()),
        }
    }

    /// Leaf vars in [`AdapterParams::visit_learnable`] order.
    pub fn learnable(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let (Some(w1), Some(w2)) = (l.gca_w1, l.gca_w2) {
                out.push(w1);
                out.push(w2);
            }
            out.extend([
                l.conv1_w, l.conv1_b, l.bn_gamma, l.bn_beta, l.conv2_w, l.conv2_b, l.attn_wq,
                l.attn_bq, l.attn_wk, l.attn_bk,
            ]);
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// Saliency-gated features: per group `A = sigmoid(W2 relu(W1 gap(G)))`,
/// applied channel-wise and re-concatenated. Shape preserving.
pub fn group_channel_attention_on_tape<'t>(
    f: Var<'t>,
    w1: Var<'t>,
    w2: Var<'t>,
    group_size: usize,
) -> Var<'t> {
    let shape = f.shape();
    let c = shape[0];
    debug_assert_eq!(c % group_size, 0, "group size must divide channels");
    let n_groups = c / group_size;
    // [c] pooled -> [n_groups × g] -> columns are groups -> shared MLP
    let pooled = f.mean_spatial().reshape(&[n_groups, group_size]).t2();
    let hidden = w1.matmul(pooled).relu();
    let gates = w2.matmul(hidden).sigmoid();
    let gates_per_channel = gates.t2().reshape(&[c]);
    f.channel_mul(gates_per_channel)
}

/// The adaptation block of one layer: conv -> BN -> ReLU -> conv. In train
/// mode returns the batch statistics used so the caller can update running
/// statistics.
pub fn adapt_features_on_tape<'t>(
    fe: Var<'t>,
    lv: &LayerVars<'t>,
    mode: BnMode,
) -> ForwardWithStats<'t> {
    let shape = fe.shape();
    let (h, w) = (shape[1], shape[2]);
    let x = fe
        .conv2d_same(lv.conv1_w)
        .add(lv.conv1_b.channel_broadcast(h, w));
    let (x, stats) = match mode {
        BnMode::Train => {
            let (y, mean, var) = x.batch_norm_train(lv.bn_gamma, lv.bn_beta, BN_EPS);
            (y, Some((mean, var)))
        }
        BnMode::Inference => {
            // y = gamma * (x - mean)/sqrt(var+eps) + beta, folded into an affine
            let tape = fe.tape();
            let inv_std: Array1<f64> = lv
                .bn_var
                .iter()
                .map(|&v| 1.0 / (v + BN_EPS).sqrt())
                .collect();
            let gamma_scaled = lv.bn_gamma.mul(tape.var1(inv_std));
            let shift = lv
                .bn_beta
                .sub(gamma_scaled.mul(tape.var1(lv.bn_mean.clone())));
            let y = x
                .channel_mul(gamma_scaled)
                .add(shift.channel_broadcast(h, w));
            (y, None)
        }
    };
    let x = x.relu();
    let out = x
        .conv2d_same(lv.conv2_w)
        .add(lv.conv2_b.channel_broadcast(h, w));
    (out, stats)
}

/// Full TSAA forward for one layer: optional GCA gating then the conv block.
pub fn forward_layer_on_tape<'t>(
    f: Var<'t>,
    lv: &LayerVars<'t>,
    mode: BnMode,
) -> ForwardWithStats<'t> {
    let fe = match (lv.gca_w1, lv.gca_w2) {
        (Some(w1), Some(w2)) => group_channel_attention_on_tape(f, w1, w2, lv.group_size),
        _ => f,
    };
    adapt_features_on_tape(fe, lv, mode)
}

/// Applies a train-mode batch statistics update to the running statistics.
pub fn update_running_stats(p: &mut AdapterLayerParams, mean: &Array1<f64>, var: &Array1<f64>) {
    for (i, m) in mean.iter().enumerate() {
        p.bn_mean[[i]] = (1.0 - BN_MOMENTUM) * p.bn_mean[[i]] + BN_MOMENTUM * m;
        p.bn_var[[i]] = (1.0 - BN_MOMENTUM) * p.bn_var[[i]] + BN_MOMENTUM * var[i];
    }
}

/// Convenience wrapper computing GCA on plain arrays.
pub fn group_channel_attention(f: &Array3<f64>, p: &GcaParams) -> Result<Array3<f64>> {
    if f.dim().0 % p.group_size != 0 {
        return Err(Error::Config(format!(
            "group size {} does not divide channels {}",
            p.group_size,
            f.dim().0
        )));
    }
    let tape = Tape::new();
    let fv = tape.var3(f.clone());
    let w1 = tape.var(p.w1.clone());
    let w2 = tape.var(p.w2.clone());
    let out = group_channel_attention_on_tape(fv, w1, w2, p.group_size);
    Ok(out
        .value()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap())
}

/// Convenience wrapper computing the adaptation block on plain arrays.
pub fn adapt_features(fe: &Array3<f64>, p: &AdapterLayerParams, mode: BnMode) -> Result<Array3<f64>> {
    let tape = Tape::new();
    let vars = AdapterVars::new(
        &tape,
        &AdapterParams {
            layers: vec![p.clone()],
            head_w: ArrayD::zeros(IxDyn(&[2, 1])),
            head_b: ArrayD::zeros(IxDyn(&[2])),
            width: p.conv1_w.shape()[0],
            kernel: p.conv1_w.shape()[2],
            heads: 1,
            head_dim: 1,
            in_channels: vec![p.conv1_w.shape()[1]],
        },
    );
    let fv = tape.var3(fe.clone());
    let (out, _) = adapt_features_on_tape(fv, &vars.layers[0], mode);
    let value = out.value();
    if !value.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(
            "adaptation block produced non-finite activations".into(),
        ));
    }
    Ok(value.into_dimensionality::<ndarray::Ix3>().unwrap())
}
