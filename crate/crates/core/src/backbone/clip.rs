//! Frozen CLIP ViT-B/16 image/text encoder pair.
//!
//! Weights load from the TVGT tensor container using the OpenAI checkpoint's
//! `state_dict` names; the tokenizer reads a decompressed BPE merges file
//! (see the README for conversion snippets). The image tap for CAM is the
//! token matrix entering the final transformer block, class token dropped
//! and the rest reshaped row-major to the patch grid.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use std::collections::HashMap;
use std::path::Path;

use super::nnops::{conv2d, l2_normalize, layer_norm, linear, softmax_rows_inplace};
use super::{VLImageEncoding, VLTextEncoding, VlEncoder};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensorfile::TensorFile;
use crate::types::ImageTensor;

const LN_EPS: f64 = 1e-5;
const CONTEXT_LEN: usize = 77;
const VISUAL_WIDTH: usize = 768;
const VISUAL_HEADS: usize = 12;
const TEXT_WIDTH: usize = 512;
const TEXT_HEADS: usize = 8;
const PATCH: usize = 16;

/// CLIP normalization constants (mean/std per RGB channel).
const IMG_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
const IMG_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

struct LnParams {
    gamma: Array1<f64>,
    beta: Array1<f64>,
}

struct AttnParams {
    in_w: Array2<f64>,
    in_b: Array1<f64>,
    out_w: Array2<f64>,
    out_b: Array1<f64>,
}

struct BlockParams {
    ln1: LnParams,
    attn: AttnParams,
    ln2: LnParams,
    fc_w: Array2<f64>,
    fc_b: Array1<f64>,
    proj_w: Array2<f64>,
    proj_b: Array1<f64>,
}

fn quick_gelu(x: f64) -> f64 {
    x / (1.0 + (-1.702 * x).exp())
}

/// Multi-head self-attention over token rows, optional causal mask.
fn attention(x: &Array2<f64>, p: &AttnParams, heads: usize, causal: bool) -> Array2<f64> {
    let (n, d) = x.dim();
    let hd = d / heads;
    let qkv = linear(x, &p.in_w, Some(&p.in_b));
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Array2::<f64>::zeros((n, d));
    for h in 0..heads {
        let q = qkv.slice(ndarray::s![.., h * hd..(h + 1) * hd]);
        let k = qkv.slice(ndarray::s![.., d + h * hd..d + (h + 1) * hd]);
        let v = qkv.slice(ndarray::s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
        let mut scores = q.dot(&k.t()) * scale;
        if causal {
            for i in 0..n {
                for j in (i + 1)..n {
                    scores[[i, j]] = f64::NEG_INFINITY;
                }
            }
        }
        softmax_rows_inplace(&mut scores);
        let oh = scores.dot(&v);
        out.slice_mut(ndarray::s![.., h * hd..(h + 1) * hd]).assign(&oh);
    }
    linear(&out, &p.out_w, Some(&p.out_b))
}

fn block_forward(x: &Array2<f64>, b: &BlockParams, heads: usize, causal: bool) -> Array2<f64> {
    let a = attention(&layer_norm(x, &b.ln1.gamma, &b.ln1.beta, LN_EPS), &b.attn, heads, causal);
    let x = x + &a;
    let mut h = linear(
        &layer_norm(&x, &b.ln2.gamma, &b.ln2.beta, LN_EPS),
        &b.fc_w,
        Some(&b.fc_b),
    );
    h.mapv_inplace(quick_gelu);
    let m = linear(&h, &b.proj_w, Some(&b.proj_b));
    x + &m
}

pub struct ClipVitB16 {
    // visual tower
    v_conv1: Array4<f64>,
    v_class: Array1<f64>,
    v_pos: Array2<f64>,
    v_ln_pre: LnParams,
    v_blocks: Vec<BlockParams>,
    v_ln_post: LnParams,
    v_proj: Array2<f64>,
    // text tower
    t_token_emb: Array2<f64>,
    t_pos: Array2<f64>,
    t_blocks: Vec<BlockParams>,
    t_ln_final: LnParams,
    t_proj: Array2<f64>,
    logit_scale: f64,
    input: usize,
    tokenizer: Bpe,
    checksum: String,
}

fn ln_params(tf: &TensorFile, name: &str) -> Result<LnParams> {
    Ok(LnParams {
        gamma: tensor1(tf, &format!("{name}.weight"))?,
        beta: tensor1(tf, &format!("{name}.bias"))?,
    })
}

fn tensor1(tf: &TensorFile, name: &str) -> Result<Array1<f64>> {
    tf.require_f64(name)?
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|e| Error::Format(format!("{name}: {e}")))
}

fn tensor2(tf: &TensorFile, name: &str) -> Result<Array2<f64>> {
    tf.require_f64(name)?
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::Format(format!("{name}: {e}")))
}

fn block_params(tf: &TensorFile, prefix: &str) -> Result<BlockParams> {
    Ok(BlockParams {
        ln1: ln_params(tf, &format!("{prefix}.ln_1"))?,
        attn: AttnParams {
            in_w: tensor2(tf, &format!("{prefix}.attn.in_proj_weight"))?,
            in_b: tensor1(tf, &format!("{prefix}.attn.in_proj_bias"))?,
            out_w: tensor2(tf, &format!("{prefix}.attn.out_proj.weight"))?,
            out_b: tensor1(tf, &format!("{prefix}.attn.out_proj.bias"))?,
        },
        ln2: ln_params(tf, &format!("{prefix}.ln_2"))?,
        fc_w: tensor2(tf, &format!("{prefix}.mlp.c_fc.weight"))?,
        fc_b: tensor1(tf, &format!("{prefix}.mlp.c_fc.bias"))?,
        proj_w: tensor2(tf, &format!("{prefix}.mlp.c_proj.weight"))?,
        proj_b: tensor1(tf, &format!("{prefix}.mlp.c_proj.bias"))?,
    })
}

impl ClipVitB16 {
    pub fn load(weights: &Path, bpe: &Path) -> Result<Self> {
        if !weights.exists() {
            return Err(Error::Data(format!(
                "vision-language weights not found at {}",
                weights.display()
            )));
        }
        let tf = TensorFile::load(weights)?;
        let merges = std::fs::read_to_string(bpe)
            .map_err(|e| Error::Data(format!("cannot read BPE merges {}: {e}", bpe.display())))?;
        Self::from_parts(&tf, &merges)
    }

    pub fn from_parts(tf: &TensorFile, merges_text: &str) -> Result<Self> {
        let v_blocks = (0..12)
            .map(|i| block_params(tf, &format!("visual.transformer.resblocks.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let t_blocks = (0..12)
            .map(|i| block_params(tf, &format!("transformer.resblocks.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let v_conv1 = tf
            .require_f64("visual.conv1.weight")?
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::Format(format!("visual.conv1.weight: {e}")))?;
        let v_pos = tensor2(tf, "visual.positional_embedding")?;
        let input = PATCH * ((v_pos.nrows() - 1) as f64).sqrt() as usize;
        Ok(Self {
            v_conv1,
            v_class: tensor1(tf, "visual.class_embedding")?,
            v_pos,
            v_ln_pre: ln_params(tf, "visual.ln_pre")?,
            v_blocks,
            v_ln_post: ln_params(tf, "visual.ln_post")?,
            v_proj: tensor2(tf, "visual.proj")?,
            t_token_emb: tensor2(tf, "token_embedding.weight")?,
            t_pos: tensor2(tf, "positional_embedding")?,
            t_blocks,
            t_ln_final: ln_params(tf, "ln_final")?,
            t_proj: tensor2(tf, "text_projection")?,
            logit_scale: tensor1(tf, "logit_scale").map(|t| t[0]).unwrap_or(100f64.ln()),
            input,
            tokenizer: Bpe::new(merges_text)?,
            checksum: tf.checksum(),
        })
    }

    /// Tokens through the visual tower, returning the matrix entering the
    /// final block and the final pooled embedding.
    fn visual_forward(&self, image: &ImageTensor) -> (Array2<f64>, Array1<f64>) {
        let img = if image.height() == self.input {
            image.clone()
        } else {
            image.resize(self.input, self.input)
        };
        let mut normed = img.data().clone();
        for c in 0..3 {
            normed
                .index_axis_mut(Axis(0), c)
                .mapv_inplace(|v| (v - IMG_MEAN[c]) / IMG_STD[c]);
        }
        let grid_feats = conv2d(&normed, &self.v_conv1, None, PATCH, 0);
        let (d, gh, gw) = grid_feats.dim();
        let n = gh * gw;
        let flat = grid_feats.to_shape((d, n)).unwrap();
        let mut x = Array2::<f64>::zeros((n + 1, d));
        x.row_mut(0).assign(&self.v_class);
        for i in 0..n {
            x.row_mut(i + 1).assign(&flat.column(i));
        }
        x += &self.v_pos;
        x = layer_norm(&x, &self.v_ln_pre.gamma, &self.v_ln_pre.beta, LN_EPS);
        let mut penultimate = x.clone();
        for (i, block) in self.v_blocks.iter().enumerate() {
            if i == self.v_blocks.len() - 1 {
                penultimate = x.clone();
            }
            x = block_forward(&x, block, VISUAL_HEADS, false);
        }
        let cls = layer_norm(
            &x.slice(ndarray::s![0..1, ..]).to_owned(),
            &self.v_ln_post.gamma,
            &self.v_ln_post.beta,
            LN_EPS,
        );
        let pooled = cls.row(0).dot(&self.v_proj);
        (penultimate, l2_normalize(&pooled.to_owned()))
    }

    fn text_forward(&self, prompt: &str) -> Result<Array1<f64>> {
        let ids = self.tokenizer.encode(prompt)?;
        let n = ids.len();
        let mut x = Array2::<f64>::zeros((n, TEXT_WIDTH));
        for (i, &id) in ids.iter().enumerate() {
            x.row_mut(i).assign(&self.t_token_emb.row(id));
            let pos = self.t_pos.row(i);
            let mut row = x.row_mut(i);
            row += &pos;
        }
        for block in &self.t_blocks {
            x = block_forward(&x, block, TEXT_HEADS, true);
        }
        let x = layer_norm(&x, &self.t_ln_final.gamma, &self.t_ln_final.beta, LN_EPS);
        // features at the EOT token (always last; ids are truncated/padded upstream)
        let feat = x.row(n - 1).dot(&self.t_proj);
        Ok(l2_normalize(&feat.to_owned()))
    }

    fn grid_side(&self) -> usize {
        self.input / PATCH
    }
}

impl VlEncoder for ClipVitB16 {
    fn encode_image(&self, image: &ImageTensor) -> Result<VLImageEncoding> {
        let (penultimate, pooled) = self.visual_forward(image);
        let g = self.grid_side();
        let n = g * g;
        let mut grid = Array3::<f64>::zeros((VISUAL_WIDTH, g, g));
        for i in 0..n {
            let row = penultimate.row(i + 1);
            for (c, &v) in row.iter().enumerate() {
                grid[[c, i / g, i % g]] = v;
            }
        }
        VLImageEncoding::with_class_token(grid, pooled, Some(penultimate.row(0).to_owned()))
    }

    fn encode_text(&self, prompts: &[String]) -> Result<Vec<VLTextEncoding>> {
        if prompts.is_empty() {
            return Err(Error::Argument("encode_text needs at least one prompt".into()));
        }
        prompts
            .iter()
            .map(|p| {
                Ok(VLTextEncoding {
                    embedding: self.text_forward(p)?,
                    prompt: p.clone(),
                })
            })
            .collect()
    }

    fn temperature(&self) -> f64 {
        (-self.logit_scale).exp()
    }

    fn input_size(&self) -> usize {
        self.input
    }

    fn checksum(&self) -> String {
        self.checksum.clone()
    }

    fn scores_on_tape<'t>(
        &self,
        tape: &'t Tape,
        activations: Var<'t>,
        class_token: Option<&Array1<f64>>,
        texts: &[VLTextEncoding],
    ) -> Result<Var<'t>> {
        if texts.len() < 2 {
            return Err(Error::Argument("need at least two text classes".into()));
        }
        let cls = class_token.ok_or_else(|| {
            Error::Argument("ViT score path needs the class-token tap state".into())
        })?;
        let g = self.grid_side();
        let n = g * g;
        let grid_tokens = activations.reshape(&[VISUAL_WIDTH, n]).t2();
        let cls_var = tape.var2(
            Array2::from_shape_vec((1, VISUAL_WIDTH), cls.to_vec())
                .map_err(|e| Error::Shape(e.to_string()))?,
        );
        let mut x = tape.concat(0, &[cls_var, grid_tokens]);

        // final transformer block on tape
        let b = self.v_blocks.last().unwrap();
        let ln1 = layer_norm_on_tape(tape, x, &b.ln1);
        let a = attention_on_tape(tape, ln1, &b.attn, VISUAL_HEADS);
        x = x.add(a);
        let ln2 = layer_norm_on_tape(tape, x, &b.ln2);
        let fc_w = tape.var2(b.fc_w.t().to_owned());
        let fc_b = tape.var1(b.fc_b.clone());
        let h = ln2.matmul(fc_w).add_rowvec(fc_b);
        let h = h.mul(h.scale(1.702).sigmoid());
        let proj_w = tape.var2(b.proj_w.t().to_owned());
        let proj_b = tape.var1(b.proj_b.clone());
        x = x.add(h.matmul(proj_w).add_rowvec(proj_b));

        let cls_out = x.narrow(0, 0, 1);
        let cls_ln = layer_norm_on_tape(tape, cls_out, &self.v_ln_post);
        let proj = tape.var2(self.v_proj.clone());
        let pooled = cls_ln.matmul(proj).t2().l2_normalize_cols(1e-24).t2();

        let mut tmat = Array2::<f64>::zeros((self.t_proj.ncols(), texts.len()));
        for (j, t) in texts.iter().enumerate() {
            tmat.column_mut(j).assign(&t.embedding);
        }
        let logits = pooled.matmul(tape.var2(tmat)).reshape(&[texts.len()]);
        Ok(logits.scale(self.logit_scale.exp()))
    }
}

fn layer_norm_on_tape<'t>(tape: &'t Tape, x: Var<'t>, p: &LnParams) -> Var<'t> {
    let m = x.mean_rows();
    let centered = x.add_colvec(m.neg());
    let var = centered.mul(centered).mean_rows();
    let inv_std = var.add_const(LN_EPS).sqrt().recip();
    centered
        .mul_colvec(inv_std)
        .mul_rowvec(tape.var1(p.gamma.clone()))
        .add_rowvec(tape.var1(p.beta.clone()))
}

fn attention_on_tape<'t>(tape: &'t Tape, x: Var<'t>, p: &AttnParams, heads: usize) -> Var<'t> {
    let d = p.out_w.nrows();
    let hd = d / heads;
    let in_w = tape.var2(p.in_w.t().to_owned());
    let in_b = tape.var1(p.in_b.clone());
    let qkv = x.matmul(in_w).add_rowvec(in_b);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.narrow(1, h * hd, hd);
        let k = qkv.narrow(1, d + h * hd, hd);
        let v = qkv.narrow(1, 2 * d + h * hd, hd);
        let scores = q.matmul(k.t2()).scale(scale).softmax_rows();
        head_outs.push(scores.matmul(v));
    }
    let concat = tape.concat(1, &head_outs);
    let out_w = tape.var2(p.out_w.t().to_owned());
    let out_b = tape.var1(p.out_b.clone());
    concat.matmul(out_w).add_rowvec(out_b)
}

/// CLIP's byte-pair tokenizer over a merges table.
pub struct Bpe {
    encoder: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
    byte_enc: Vec<char>,
    pattern: regex::Regex,
    sot: usize,
    eot: usize,
}

fn bytes_to_unicode() -> Vec<char> {
    let mut bs: Vec<u32> = (b'!'..=b'~').map(u32::from).collect();
    bs.extend(0xa1..=0xac_u32);
    bs.extend(0xae..=0xff_u32);
    let mut cs = bs.clone();
    let mut n = 0;
    for b in 0..256u32 {
        if !bs.contains(&b) {
            bs.push(b);
            cs.push(256 + n);
            n += 1;
        }
    }
    let mut table = vec![' '; 256];
    for (b, c) in bs.iter().zip(cs.iter()) {
        table[*b as usize] = char::from_u32(*c).unwrap();
    }
    table
}

impl Bpe {
    pub fn new(merges_text: &str) -> Result<Self> {
        let byte_enc = bytes_to_unicode();
        let mut merges = Vec::new();
        for line in merges_text.lines() {
            let mut it = line.split_whitespace();
            if let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) {
                merges.push((a.to_string(), b.to_string()));
                if merges.len() == 48_894 {
                    break;
                }
            }
        }
        if merges.is_empty() {
            return Err(Error::Format("BPE merges file has no merge rules".into()));
        }
        let mut vocab: Vec<String> = byte_enc.iter().map(|c| c.to_string()).collect();
        vocab.extend(byte_enc.iter().map(|c| format!("{c}</w>")));
        for (a, b) in &merges {
            vocab.push(format!("{a}{b}"));
        }
        vocab.push("<|startoftext|>".to_string());
        vocab.push("<|endoftext|>".to_string());
        let encoder: HashMap<String, usize> =
            vocab.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
        let ranks = merges
            .into_iter()
            .enumerate()
            .map(|(i, m)| (m, i))
            .collect();
        let pattern = regex::Regex::new(
            r"<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .expect("tokenizer pattern");
        let sot = encoder["<|startoftext|>"];
        let eot = encoder["<|endoftext|>"];
        Ok(Self {
            encoder,
            ranks,
            byte_enc,
            pattern,
            sot,
            eot,
        })
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let chars: Vec<String> = token.chars().map(|c| c.to_string()).collect();
        if chars.is_empty() {
            return vec![];
        }
        let mut word = chars;
        let last = word.len() - 1;
        word[last] = format!("{}</w>", word[last]);
        loop {
            if word.len() < 2 {
                break;
            }
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..word.len() - 1 {
                if let Some(&rank) = self
                    .ranks
                    .get(&(word[i].clone(), word[i + 1].clone()))
                {
                    if best.map(|(r, _)| rank < r).unwrap_or(true) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", word[i], word[i + 1]);
            word.splice(i..i + 2, [merged]);
        }
        word
    }

    /// Token ids for a prompt: SOT + BPE tokens + EOT, truncated to the
    /// context length with EOT kept last.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let clean = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if clean.is_empty() {
            return Err(Error::Argument("cannot tokenize an empty prompt".into()));
        }
        let mut ids = vec![self.sot];
        for m in self.pattern.find_iter(&clean) {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_enc[b as usize]).collect();
            for piece in self.bpe(&mapped) {
                let id = self.encoder.get(&piece).ok_or_else(|| {
                    Error::Format(format!("token piece '{piece}' missing from vocabulary"))
                })?;
                ids.push(*id);
            }
        }
        ids.truncate(CONTEXT_LEN - 1);
        ids.push(self.eot);
        Ok(ids)
    }
}
