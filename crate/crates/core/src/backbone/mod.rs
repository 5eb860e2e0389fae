//! Frozen feature extraction: a multi-scale pyramid backbone for
//! segmentation and a contrastive vision-language encoder pair for the
//! text-visual alignment path. Each comes in a real pretrained flavor and a
//! tiny deterministic toy flavor for CPU test suites.

pub mod clip;
pub mod nnops;
pub mod resnet;
pub mod toy;

use ndarray::{Array1, Array3};

use crate::autodiff::{Tape, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::types::ImageTensor;

/// Ordered multi-scale feature maps from a frozen backbone.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub layers: Vec<Array3<f64>>,
    pub layer_ids: Vec<String>,
}

impl FeaturePyramid {
    pub fn new(layers: Vec<Array3<f64>>, layer_ids: Vec<String>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("feature pyramid needs at least one layer".into()));
        }
        if layers.len() != layer_ids.len() {
            return Err(Error::Shape("layer/id count mismatch".into()));
        }
        let mut prev = (usize::MAX, usize::MAX);
        for (i, layer) in layers.iter().enumerate() {
            let (_, h, w) = layer.dim();
            if h > prev.0 || w > prev.1 {
                return Err(Error::Shape(format!(
                    "layer {i} spatial size increases with depth"
                )));
            }
            if !layer.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!("layer {i} has non-finite values")));
            }
            prev = (h, w);
        }
        Ok(Self { layers, layer_ids })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Image-side output of the vision-language encoder: the grid feature map
/// tapped before the final self-attention layer plus the pooled embedding.
#[derive(Debug, Clone)]
pub struct VLImageEncoding {
    pub penultimate_features: Array3<f64>,
    pub pooled_embedding: Array1<f64>,
    /// Class-token state at the same tap. ViT encoders need it to rebuild
    /// the score path from the grid activations; grid-only encoders leave it
    /// out.
    pub class_token: Option<Array1<f64>>,
}

impl VLImageEncoding {
    pub fn new(penultimate_features: Array3<f64>, pooled_embedding: Array1<f64>) -> Result<Self> {
        Self::with_class_token(penultimate_features, pooled_embedding, None)
    }

    pub fn with_class_token(
        penultimate_features: Array3<f64>,
        pooled_embedding: Array1<f64>,
        class_token: Option<Array1<f64>>,
    ) -> Result<Self> {
        let norm = pooled_embedding.mapv(|v| v * v).sum().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::Numerical(format!(
                "pooled embedding norm {norm} is not 1"
            )));
        }
        Ok(Self {
            penultimate_features,
            pooled_embedding,
            class_token,
        })
    }
}

/// Text-side output of the vision-language encoder.
#[derive(Debug, Clone)]
pub struct VLTextEncoding {
    pub embedding: Array1<f64>,
    pub prompt: String,
}

/// Frozen multi-scale feature extractor.
pub trait PyramidExtractor {
    fn extract(&self, image: &ImageTensor) -> Result<FeaturePyramid>;
    /// Channel count of each pyramid layer.
    fn channels(&self) -> Vec<usize>;
    /// Downsampling stride of each pyramid layer.
    fn strides(&self) -> Vec<usize>;
    /// SHA-256 over the frozen weights.
    fn checksum(&self) -> String;

    fn num_layers(&self) -> usize {
        self.channels().len()
    }

    /// Spatial grid of each layer for a square input of side `input`.
    fn grid_sizes(&self, input: usize) -> Vec<(usize, usize)> {
        self.strides()
            .iter()
            .map(|s| (input.div_ceil(*s), input.div_ceil(*s)))
            .collect()
    }
}

/// Frozen contrastive vision-language encoder pair.
pub trait VlEncoder {
    fn encode_image(&self, image: &ImageTensor) -> Result<VLImageEncoding>;
    fn encode_text(&self, prompts: &[String]) -> Result<Vec<VLTextEncoding>>;
    /// Softmax temperature used for class scores (the learned logit scale
    /// for real weights).
    fn temperature(&self) -> f64;
    /// Native input side length; images are resized to it before encoding.
    fn input_size(&self) -> usize;
    /// SHA-256 over the frozen weights.
    fn checksum(&self) -> String;

    /// Rebuilds the score path from penultimate activations to per-class
    /// cosine logits (already divided by the temperature) on a tape, so
    /// Grad-CAM can differentiate it. `class_token` carries per-image tap
    /// state for encoders that need it.
    fn scores_on_tape<'t>(
        &self,
        tape: &'t Tape,
        activations: Var<'t>,
        class_token: Option<&Array1<f64>>,
        texts: &[VLTextEncoding],
    ) -> Result<Var<'t>>;
}

pub fn build_pyramid_extractor(cfg: &Config) -> Result<Box<dyn PyramidExtractor>> {
    match cfg.backbone.kind.as_str() {
        "toy" => Ok(Box::new(toy::ToyBackbone::new(cfg.backbone.toy_seed))),
        "resnet50" => {
            if cfg.backbone.weights_path.is_empty() {
                return Err(Error::Config(
                    "backbone.weights_path is required for backbone.kind=resnet50".into(),
                ));
            }
            Ok(Box::new(resnet::ResNet50::load(std::path::Path::new(
                &cfg.backbone.weights_path,
            ))?))
        }
        other => Err(Error::Config(format!("unknown backbone.kind '{other}'"))),
    }
}

pub fn build_vl_encoder(cfg: &Config) -> Result<Box<dyn VlEncoder>> {
    match cfg.vl.kind.as_str() {
        "toy" => Ok(Box::new(toy::ToyVlEncoder::new(
            cfg.vl.toy_seed,
            cfg.vl.input_size.min(64),
            cfg.tvea.temperature,
        ))),
        "vit_b16" => {
            if cfg.vl.weights_path.is_empty() {
                return Err(Error::Config(
                    "vl.weights_path is required for vl.kind=vit_b16".into(),
                ));
            }
            Ok(Box::new(clip::ClipVitB16::load(
                std::path::Path::new(&cfg.vl.weights_path),
                std::path::Path::new(&cfg.vl.bpe_path),
            )?))
        }
        other => Err(Error::Config(format!("unknown vl.kind '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_rejects_increasing_spatial_sizes() {
        let a = Array3::<f64>::zeros((2, 4, 4));
        let b = Array3::<f64>::zeros((2, 8, 8));
        let err = FeaturePyramid::new(vec![a, b], vec!["s1".into(), "s2".into()]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn pooled_embedding_must_be_unit_norm() {
        let bad = VLImageEncoding::new(Array3::zeros((2, 2, 2)), ndarray::arr1(&[1.0, 1.0]));
        assert!(bad.is_err());
        let unit = 1.0 / 2f64.sqrt();
        VLImageEncoding::new(Array3::zeros((2, 2, 2)), ndarray::arr1(&[unit, unit])).unwrap();
    }
}
