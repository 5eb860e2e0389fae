//! Deterministic toy stand-ins for the pretrained backbones. They run the
//! full pipeline on CPU in seconds and give the oracle tests a model whose
//! forward pass can be recomputed by hand.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nnops::{conv2d, l2_normalize, relu3};
use super::{FeaturePyramid, PyramidExtractor, VLImageEncoding, VLTextEncoding, VlEncoder};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::synthetic::texture_patch;
use crate::tensorfile::TensorFile;
use crate::types::ImageTensor;

pub const TOY_STAGE_CHANNELS: [usize; 4] = [8, 12, 16, 24];
pub const TOY_STAGE_STRIDES: [usize; 4] = [2, 4, 8, 16];

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let fan_in = (shape.1 * shape.2 * shape.3) as f64;
    let bound = (6.0 / fan_in).sqrt();
    Array4::from_shape_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Fixed random stack of four stride-2 convolutions with ReLU, tapped after
/// every stage. Strides 2/4/8/16 keep the coarsest layer usable for the
/// 4x4 local-prototype grid at a 64 pixel input.
pub struct ToyBackbone {
    stages: Vec<(Array4<f64>, Array1<f64>)>,
    seed: u64,
}

impl ToyBackbone {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut cin = 3;
        for &cout in TOY_STAGE_CHANNELS.iter() {
            let w = kaiming_uniform(&mut rng, (cout, cin, 3, 3));
            let b = Array1::from_shape_fn(cout, |_| rng.gen_range(-0.1..0.1));
            stages.push((w, b));
            cin = cout;
        }
        Self { stages, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stage weights, exposed so oracle tests can recompute the forward pass.
    pub fn stage_params(&self, i: usize) -> (&Array4<f64>, &Array1<f64>) {
        (&self.stages[i].0, &self.stages[i].1)
    }
}

impl PyramidExtractor for ToyBackbone {
    fn extract(&self, image: &ImageTensor) -> Result<FeaturePyramid> {
        let mut x = image.data().clone();
        let mut layers = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            x = conv2d(&x, w, Some(b), 2, 1);
            relu3(&mut x);
            layers.push(x.clone());
        }
        let ids = (1..=layers.len()).map(|i| format!("stage{i}")).collect();
        FeaturePyramid::new(layers, ids)
    }

    fn channels(&self) -> Vec<usize> {
        TOY_STAGE_CHANNELS.to_vec()
    }

    fn strides(&self) -> Vec<usize> {
        TOY_STAGE_STRIDES.to_vec()
    }

    fn checksum(&self) -> String {
        let mut tf = TensorFile::new();
        for (i, (w, b)) in self.stages.iter().enumerate() {
            tf.insert_f64(format!("stage{i}.weight"), &w.clone().into_dyn());
            tf.insert_f64(format!("stage{i}.bias"), &b.clone().into_dyn());
        }
        tf.checksum()
    }
}

const TOY_VL_FEAT: usize = 16;
const TOY_VL_EMBED: usize = 16;
const TOY_VL_PATCH: usize = 4;

/// Toy vision-language pair. Image patches are projected with a fixed random
/// matrix; token embeddings are the projection of each token's canonical
/// texture patch, so class names align with image regions that show the
/// class texture. The token "non" negates the token that follows it, which
/// gives the background prompts a direction away from the class.
pub struct ToyVlEncoder {
    patch_proj: Array2<f64>,
    pool_proj: Array2<f64>,
    seed: u64,
    input: usize,
    temperature: f64,
}

impl ToyVlEncoder {
    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl ToyVlEncoder {
    pub fn new(seed: u64, input: usize, temperature: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7f4a7c15);
        let pdim = 3 * TOY_VL_PATCH * TOY_VL_PATCH;
        let scale = (1.0 / pdim as f64).sqrt();
        let patch_proj =
            Array2::from_shape_fn((TOY_VL_FEAT, pdim), |_| rng.gen_range(-scale..scale));
        // near-orthogonal mixing for the pooled head
        let pscale = (1.0 / TOY_VL_FEAT as f64).sqrt();
        let mut pool_proj =
            Array2::from_shape_fn((TOY_VL_EMBED, TOY_VL_FEAT), |_| rng.gen_range(-pscale..pscale));
        for i in 0..TOY_VL_EMBED.min(TOY_VL_FEAT) {
            pool_proj[[i, i]] += 1.0;
        }
        Self {
            patch_proj,
            pool_proj,
            seed,
            input: input.max(2 * TOY_VL_PATCH),
            temperature,
        }
    }

    fn grid(&self) -> usize {
        self.input / TOY_VL_PATCH
    }

    /// Token feature: unit-norm projection of the token's canonical texture.
    fn token_feature(&self, token: &str) -> Array1<f64> {
        let patch = texture_patch(token, TOY_VL_PATCH);
        let flat = Array1::from_iter(patch.iter().copied());
        let v = self.patch_proj.dot(&flat);
        l2_normalize(&v)
    }

    fn text_feature(&self, prompt: &str) -> Result<Array1<f64>> {
        let tokens: Vec<String> = prompt
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect();
        if tokens.is_empty() {
            return Err(Error::Argument(format!("prompt '{prompt}' has no tokens")));
        }
        let mut acc = Array1::<f64>::zeros(TOY_VL_FEAT);
        let mut negate_next = false;
        for tok in &tokens {
            if tok == "non" {
                negate_next = true;
                continue;
            }
            let sign = if negate_next { -1.0 } else { 1.0 };
            negate_next = false;
            acc = acc + self.token_feature(tok) * sign;
        }
        Ok(acc)
    }
}

impl VlEncoder for ToyVlEncoder {
    fn encode_image(&self, image: &ImageTensor) -> Result<VLImageEncoding> {
        let img = if image.height() == self.input && image.width() == self.input {
            image.clone()
        } else {
            image.resize(self.input, self.input)
        };
        let g = self.grid();
        let mut feats = Array3::<f64>::zeros((TOY_VL_FEAT, g, g));
        for gy in 0..g {
            for gx in 0..g {
                let mut flat = Array1::<f64>::zeros(3 * TOY_VL_PATCH * TOY_VL_PATCH);
                let mut i = 0;
                for c in 0..3 {
                    for py in 0..TOY_VL_PATCH {
                        for px in 0..TOY_VL_PATCH {
                            flat[i] =
                                img.data()[[c, gy * TOY_VL_PATCH + py, gx * TOY_VL_PATCH + px]];
                            i += 1;
                        }
                    }
                }
                let v = self.patch_proj.dot(&flat);
                for (ch, &val) in v.iter().enumerate() {
                    feats[[ch, gy, gx]] = val;
                }
            }
        }
        let mean = feats
            .mean_axis(Axis(2))
            .unwrap()
            .mean_axis(Axis(1))
            .unwrap();
        let pooled = l2_normalize(&self.pool_proj.dot(&mean));
        VLImageEncoding::new(feats, pooled)
    }

    fn encode_text(&self, prompts: &[String]) -> Result<Vec<VLTextEncoding>> {
        if prompts.is_empty() {
            return Err(Error::Argument("encode_text needs at least one prompt".into()));
        }
        prompts
            .iter()
            .map(|p| {
                let feat = self.text_feature(p)?;
                Ok(VLTextEncoding {
                    embedding: l2_normalize(&self.pool_proj.dot(&feat)),
                    prompt: p.clone(),
                })
            })
            .collect()
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn input_size(&self) -> usize {
        self.input
    }

    fn checksum(&self) -> String {
        let mut tf = TensorFile::new();
        tf.insert_f64("patch_proj", &self.patch_proj.clone().into_dyn());
        tf.insert_f64("pool_proj", &self.pool_proj.clone().into_dyn());
        tf.checksum()
    }

    fn scores_on_tape<'t>(
        &self,
        tape: &'t Tape,
        activations: Var<'t>,
        _class_token: Option<&Array1<f64>>,
        texts: &[VLTextEncoding],
    ) -> Result<Var<'t>> {
        if texts.len() < 2 {
            return Err(Error::Argument("need at least two text classes".into()));
        }
        // pooled = normalize(P . mean(A)); logits_c = <pooled, t_c> / T
        let mean = activations.mean_spatial().reshape(&[TOY_VL_FEAT, 1]);
        let proj = tape.var2(self.pool_proj.clone());
        let pooled = proj.matmul(mean).l2_normalize_cols(1e-24);
        let mut tmat = Array2::<f64>::zeros((TOY_VL_EMBED, texts.len()));
        for (j, t) in texts.iter().enumerate() {
            tmat.column_mut(j).assign(&t.embedding);
        }
        let texts_var = tape.var2(tmat);
        let logits = pooled.t2().matmul(texts_var).reshape(&[texts.len()]);
        Ok(logits.scale(1.0 / self.temperature))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{make_synthetic_episode, SyntheticSpec};
    use ndarray::Array3 as A3;
    use rand::Rng;

    fn noise_image(size: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(A3::from_shape_fn((3, size, size), |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn pyramid_has_four_strictly_decreasing_layers() {
        let bb = ToyBackbone::new(17);
        let pyr = bb.extract(&noise_image(64, 0)).unwrap();
        assert_eq!(pyr.num_layers(), 4);
        let mut prev = usize::MAX;
        for layer in &pyr.layers {
            let (_, h, w) = layer.dim();
            assert_eq!(h, w);
            assert!(h < prev);
            prev = h;
        }
        assert_eq!(pyr.layers[0].dim().1, 32);
        assert_eq!(pyr.layers[3].dim().1, 4);
    }

    #[test]
    fn extraction_is_bitwise_deterministic() {
        let bb = ToyBackbone::new(5);
        let img = noise_image(32, 1);
        let a = bb.extract(&img).unwrap();
        let b = bb.extract(&img).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn forward_matches_hand_reimplementation_of_two_stages() {
        let bb = ToyBackbone::new(3);
        let img = noise_image(16, 2);
        let pyr = bb.extract(&img).unwrap();
        // recompute stages 1-2 with explicit loops
        let mut x = img.data().clone();
        for stage in 0..2 {
            let (w, b) = bb.stage_params(stage);
            let (co, ci, _, _) = w.dim();
            let (_, h, wd) = x.dim();
            let (oh, ow) = (h.div_ceil(2), wd.div_ceil(2));
            let mut out = A3::<f64>::zeros((co, oh, ow));
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for dy in 0..3usize {
                                for dx in 0..3usize {
                                    let sy = (2 * oy + dy) as isize - 1;
                                    let sx = (2 * ox + dx) as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += x[[c, sy as usize, sx as usize]] * w[[o, c, dy, dx]];
                                }
                            }
                        }
                        out[[o, oy, ox]] = acc.max(0.0);
                    }
                }
            }
            assert!(
                out.iter()
                    .zip(pyr.layers[stage].iter())
                    .all(|(a, b)| (a - b).abs() < 1e-12),
                "stage {stage} mismatch"
            );
            x = out;
        }
    }

    #[test]
    fn checksum_is_stable_and_seed_dependent() {
        assert_eq!(ToyBackbone::new(1).checksum(), ToyBackbone::new(1).checksum());
        assert_ne!(ToyBackbone::new(1).checksum(), ToyBackbone::new(2).checksum());
    }

    #[test]
    fn vl_pooled_embedding_is_unit_norm() {
        let vl = ToyVlEncoder::new(23, 64, 0.07);
        let enc = vl.encode_image(&noise_image(64, 3)).unwrap();
        let norm = enc.pooled_embedding.mapv(|v| v * v).sum().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        let g = 64 / TOY_VL_PATCH;
        assert_eq!(enc.penultimate_features.dim(), (TOY_VL_FEAT, g, g));
    }

    #[test]
    fn vl_text_encoding_deterministic_and_unit_norm() {
        let vl = ToyVlEncoder::new(23, 64, 0.07);
        let a = vl.encode_text(&["a photo of a lung.".into()]).unwrap();
        let b = vl.encode_text(&["a photo of a lung.".into()]).unwrap();
        assert_eq!(a[0].embedding, b[0].embedding);
        let norm = a[0].embedding.mapv(|v| v * v).sum().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn toy_text_encoder_matches_hand_computation_on_two_word_prompt() {
        let vl = ToyVlEncoder::new(23, 64, 0.07);
        let got = vl.encode_text(&["copper jade".into()]).unwrap();
        // hand: normalize(P . (t_copper + t_jade))
        let t1 = vl.token_feature("copper");
        let t2 = vl.token_feature("jade");
        let expect = l2_normalize(&vl.pool_proj.dot(&(t1 + t2)));
        for (a, b) in got[0].embedding.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_prefix_negates_the_class_token() {
        let vl = ToyVlEncoder::new(23, 64, 0.07);
        let pos = vl.text_feature("copper").unwrap();
        let neg = vl.text_feature("non copper").unwrap();
        for (a, b) in pos.iter().zip(neg.iter()) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_prompt_list_is_an_argument_error() {
        let vl = ToyVlEncoder::new(23, 64, 0.07);
        assert!(matches!(vl.encode_text(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn class_texture_images_align_with_their_class_prompt() {
        // an image showing mostly class texture should score its own prompt
        // higher than another class's prompt
        let vl = ToyVlEncoder::new(23, 64, 0.07);
        let mut spec = SyntheticSpec::new("copper", 64, 1);
        spec.fg_fraction = (0.3, 0.4);
        let ep = make_synthetic_episode(&spec, 0).unwrap();
        let enc = vl.encode_image(&ep.query).unwrap();
        let texts = vl
            .encode_text(&["a photo of a copper.".into(), "a photo of a jade.".into()])
            .unwrap();
        let s_own: f64 = enc.pooled_embedding.dot(&texts[0].embedding);
        let s_other: f64 = enc.pooled_embedding.dot(&texts[1].embedding);
        assert!(
            s_own > s_other,
            "own-class cosine {s_own} should beat other-class {s_other}"
        );
    }

    #[test]
    fn scores_on_tape_match_offline_cosines() {
        let vl = ToyVlEncoder::new(23, 64, 0.07);
        let img = noise_image(64, 9);
        let enc = vl.encode_image(&img).unwrap();
        let texts = vl
            .encode_text(&["a photo of a copper.".into(), "a photo of a non copper.".into()])
            .unwrap();
        let tape = Tape::new();
        let a = tape.var3(enc.penultimate_features.clone());
        let logits = vl.scores_on_tape(&tape, a, None, &texts).unwrap().value();
        for (j, t) in texts.iter().enumerate() {
            let expect = enc.pooled_embedding.dot(&t.embedding) / 0.07;
            assert!((logits[[j]] - expect).abs() < 1e-9, "class {j}");
        }
    }
}
