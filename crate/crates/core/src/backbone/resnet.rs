//! Frozen ResNet-50 feature pyramid. Weights load from the TVGT tensor
//! container using torchvision's `state_dict` names (see the README for the
//! one-line conversion snippet). All math runs in f64; outputs are the four
//! stage outputs at strides 4/8/16/32.

use ndarray::{Array1, Array3, Array4};
use std::path::Path;

use super::nnops::{bn_infer, conv2d, maxpool2d, relu3};
use super::{FeaturePyramid, PyramidExtractor};
use crate::error::{Error, Result};
use crate::tensorfile::TensorFile;
use crate::types::ImageTensor;

const BN_EPS: f64 = 1e-5;

struct ConvBn {
    w: Array4<f64>,
    gamma: Array1<f64>,
    beta: Array1<f64>,
    mean: Array1<f64>,
    var: Array1<f64>,
    stride: usize,
    pad: usize,
}

impl ConvBn {
    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let y = conv2d(x, &self.w, None, self.stride, self.pad);
        bn_infer(&y, &self.gamma, &self.beta, &self.mean, &self.var, BN_EPS)
    }
}

struct Bottleneck {
    c1: ConvBn,
    c2: ConvBn,
    c3: ConvBn,
    down: Option<ConvBn>,
}

impl Bottleneck {
    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut y = self.c1.forward(x);
        relu3(&mut y);
        let mut y = self.c2.forward(&y);
        relu3(&mut y);
        let y = self.c3.forward(&y);
        let identity = match &self.down {
            Some(d) => d.forward(x),
            None => x.clone(),
        };
        let mut out = y + identity;
        relu3(&mut out);
        out
    }
}

pub struct ResNet50 {
    stem: ConvBn,
    layers: Vec<Vec<Bottleneck>>,
    checksum: String,
}

fn tensor1(tf: &TensorFile, name: &str) -> Result<Array1<f64>> {
    tf.require_f64(name)?
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|e| Error::Format(format!("{name}: {e}")))
}

fn tensor4(tf: &TensorFile, name: &str) -> Result<Array4<f64>> {
    tf.require_f64(name)?
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|e| Error::Format(format!("{name}: {e}")))
}

fn conv_bn(tf: &TensorFile, conv: &str, bn: &str, stride: usize, pad: usize) -> Result<ConvBn> {
    Ok(ConvBn {
        w: tensor4(tf, &format!("{conv}.weight"))?,
        gamma: tensor1(tf, &format!("{bn}.weight"))?,
        beta: tensor1(tf, &format!("{bn}.bias"))?,
        mean: tensor1(tf, &format!("{bn}.running_mean"))?,
        var: tensor1(tf, &format!("{bn}.running_var"))?,
        stride,
        pad,
    })
}

impl ResNet50 {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Data(format!(
                "backbone weights not found at {}",
                path.display()
            )));
        }
        let tf = TensorFile::load(path)?;
        Self::from_tensorfile(&tf)
    }

    pub fn from_tensorfile(tf: &TensorFile) -> Result<Self> {
        let stem = conv_bn(tf, "conv1", "bn1", 2, 3)?;
        let block_counts = [3usize, 4, 6, 3];
        let mut layers = Vec::with_capacity(4);
        for (li, &blocks) in block_counts.iter().enumerate() {
            let lname = format!("layer{}", li + 1);
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let p = format!("{lname}.{b}");
                let stride = if b == 0 && li > 0 { 2 } else { 1 };
                let down = if tf.get(&format!("{p}.downsample.0.weight")).is_some() {
                    Some(conv_bn(
                        tf,
                        &format!("{p}.downsample.0"),
                        &format!("{p}.downsample.1"),
                        stride,
                        0,
                    )?)
                } else {
                    None
                };
                stage.push(Bottleneck {
                    c1: conv_bn(tf, &format!("{p}.conv1"), &format!("{p}.bn1"), 1, 0)?,
                    c2: conv_bn(tf, &format!("{p}.conv2"), &format!("{p}.bn2"), stride, 1)?,
                    c3: conv_bn(tf, &format!("{p}.conv3"), &format!("{p}.bn3"), 1, 0)?,
                    down,
                });
            }
            layers.push(stage);
        }
        Ok(Self {
            stem,
            layers,
            checksum: tf.checksum(),
        })
    }
}

impl PyramidExtractor for ResNet50 {
    fn extract(&self, image: &ImageTensor) -> Result<FeaturePyramid> {
        let mut x = self.stem.forward(image.data());
        relu3(&mut x);
        x = maxpool2d(&x, 3, 2, 1);
        let mut taps = Vec::with_capacity(4);
        for stage in &self.layers {
            for block in stage {
                x = block.forward(&x);
            }
            taps.push(x.clone());
        }
        let ids = (1..=4).map(|i| format!("layer{i}")).collect();
        FeaturePyramid::new(taps, ids)
    }

    fn channels(&self) -> Vec<usize> {
        vec![256, 512, 1024, 2048]
    }

    fn strides(&self) -> Vec<usize> {
        vec![4, 8, 16, 32]
    }

    fn checksum(&self) -> String {
        self.checksum.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Builds a randomly initialized ResNet-50 weight bundle; exercising the
    /// architecture does not need pretrained values.
    pub(crate) fn random_resnet_weights(seed: u64) -> TensorFile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tf = TensorFile::with_meta(r#"{"arch":"resnet50"}"#);
        let mut add_conv = |tf: &mut TensorFile, name: &str, co: usize, ci: usize, k: usize| {
            let bound = (2.0 / (ci * k * k) as f64).sqrt();
            let w = ndarray::ArrayD::from_shape_fn(IxDyn(&[co, ci, k, k]), |_| {
                rng.gen_range(-bound..bound) as f32
            });
            tf.insert(format!("{name}.weight"), w);
        };
        let add_bn = |tf: &mut TensorFile, name: &str, c: usize| {
            tf.insert(format!("{name}.weight"), ndarray::ArrayD::from_elem(IxDyn(&[c]), 1.0f32));
            tf.insert(format!("{name}.bias"), ndarray::ArrayD::from_elem(IxDyn(&[c]), 0.0f32));
            tf.insert(
                format!("{name}.running_mean"),
                ndarray::ArrayD::from_elem(IxDyn(&[c]), 0.0f32),
            );
            tf.insert(
                format!("{name}.running_var"),
                ndarray::ArrayD::from_elem(IxDyn(&[c]), 1.0f32),
            );
        };
        add_conv(&mut tf, "conv1", 64, 3, 7);
        add_bn(&mut tf, "bn1", 64);
        let widths = [(64, 256), (128, 512), (256, 1024), (512, 2048)];
        let counts = [3, 4, 6, 3];
        let mut cin = 64;
        for li in 0..4 {
            let (planes, cout) = widths[li];
            for b in 0..counts[li] {
                let p = format!("layer{}.{b}", li + 1);
                add_conv(&mut tf, &format!("{p}.conv1"), planes, cin, 1);
                add_bn(&mut tf, &format!("{p}.bn1"), planes);
                add_conv(&mut tf, &format!("{p}.conv2"), planes, planes, 3);
                add_bn(&mut tf, &format!("{p}.bn2"), planes);
                add_conv(&mut tf, &format!("{p}.conv3"), cout, planes, 1);
                add_bn(&mut tf, &format!("{p}.bn3"), cout);
                if b == 0 {
                    add_conv(&mut tf, &format!("{p}.downsample.0"), cout, cin, 1);
                    add_bn(&mut tf, &format!("{p}.downsample.1"), cout);
                }
                cin = cout;
            }
        }
        tf
    }

    #[test]
    fn architecture_produces_expected_pyramid_shapes() {
        let tf = random_resnet_weights(0);
        let net = ResNet50::from_tensorfile(&tf).unwrap();
        let img = ImageTensor::new(Array3::from_elem((3, 64, 64), 0.5)).unwrap();
        let pyr = net.extract(&img).unwrap();
        assert_eq!(pyr.num_layers(), 4);
        assert_eq!(pyr.layers[0].dim(), (256, 16, 16));
        assert_eq!(pyr.layers[1].dim(), (512, 8, 8));
        assert_eq!(pyr.layers[2].dim(), (1024, 4, 4));
        assert_eq!(pyr.layers[3].dim(), (2048, 2, 2));
    }

    #[test]
    fn missing_weights_file_is_a_load_error() {
        match ResNet50::load(Path::new("/nonexistent/weights.tvgt")) {
            Err(Error::Data(_)) => {}
            other => panic!("expected data error, got {:?}", other.err()),
        }
    }

    #[test]
    fn missing_tensor_is_a_format_error() {
        let tf = TensorFile::new();
        assert!(matches!(
            ResNet50::from_tensorfile(&tf),
            Err(Error::Format(_))
        ));
    }
}
