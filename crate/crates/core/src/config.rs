//! Resolved run configuration with TOML/JSON loading and dotted-path
//! `key=value` overrides.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::episode::AdapterKind;
use crate::error::{Error, Result};
use crate::tensorfile::sha256_hex;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Side length images are resized to on load.
    pub input_size: usize,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub vl: VlConfig,
    pub gca: GcaConfig,
    pub adapter: AdapterConfig,
    pub attention: AttentionConfig,
    pub vvea: VveaConfig,
    pub tvea: TveaConfig,
    pub fusion: FusionConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            input_size: 400,
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            vl: VlConfig::default(),
            gca: GcaConfig::default(),
            adapter: AdapterConfig::default(),
            attention: AttentionConfig::default(),
            vvea: VveaConfig::default(),
            tvea: TveaConfig::default(),
            fusion: FusionConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub adapter: AdapterKind,
    pub root: String,
    pub id: String,
    /// Restrict evaluation to these classes; empty means all.
    pub classes: Vec<String>,
    pub k: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            adapter: AdapterKind::Folder,
            root: String::new(),
            id: "dataset".to_string(),
            classes: Vec::new(),
            k: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// `resnet50` or `toy`.
    pub kind: String,
    pub weights_path: String,
    /// Seed for the toy backbone's fixed random filters.
    pub toy_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: "resnet50".to_string(),
            weights_path: String::new(),
            toy_seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VlConfig {
    /// `vit_b16` or `toy`.
    pub kind: String,
    pub weights_path: String,
    pub bpe_path: String,
    /// Input side length of the vision-language encoder.
    pub input_size: usize,
    pub toy_seed: u64,
}

impl Default for VlConfig {
    fn default() -> Self {
        Self {
            kind: "vit_b16".to_string(),
            weights_path: String::new(),
            bpe_path: String::new(),
            input_size: 224,
            toy_seed: 23,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GcaConfig {
    pub enabled: bool,
    pub group_size: usize,
    pub proj_dim: usize,
}

impl Default for GcaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            group_size: 16,
            proj_dim: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Output channel width of each per-layer adaptation block.
    pub width: usize,
    /// Kernel size of both convolutions in the adaptation block.
    pub kernel: usize,
    pub init_seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            width: 32,
            kernel: 3,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { heads: 4, head_dim: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VveaConfig {
    pub enabled: bool,
    /// Grid side for local prototypes.
    pub n_blocks: usize,
    /// InfoNCE temperature of the dense loss.
    pub tau: f64,
}

impl Default for VveaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_blocks: 4,
            tau: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TveaConfig {
    pub enabled: bool,
    /// `otsu` or `fixed`.
    pub threshold_mode: String,
    pub fixed_tau: f64,
    /// Apply dense CRF to pseudo-labels.
    pub crf: bool,
    /// Use one "non <class>" prompt per remaining class instead of a single
    /// negated prompt.
    pub multi_label: bool,
    pub prompt_template: String,
    /// Softmax temperature for the toy encoder; real weights use the learned
    /// logit scale.
    pub temperature: f64,
}

impl Default for TveaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold_mode: "otsu".to_string(),
            fixed_tau: 0.5,
            crf: true,
            multi_label: true,
            prompt_template: "a photo of a {}.".to_string(),
            temperature: 0.07,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub rough_weight: f64,
    pub pseudo_weight: f64,
    pub attention_weight: f64,
    /// Apply dense CRF to the fused mask.
    pub final_crf: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            rough_weight: 1.0,
            pseudo_weight: 1.0,
            attention_weight: 1.0,
            final_crf: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Augmented view pairs per image per epoch.
    pub views: usize,
    pub local: bool,
    pub global: bool,
    pub dense: bool,
    pub pascal: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            lr: 1e-2,
            momentum: 0.9,
            views: 1,
            local: true,
            global: true,
            dense: true,
            pascal: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes_per_class: usize,
    pub seed: u64,
    pub cache_dir: String,
    pub output_dir: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_class: 100,
            seed: 0,
            cache_dir: String::new(),
            output_dir: "out".to_string(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let is_json = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false)
            || text.trim_start().starts_with('{');
        if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
        }
    }

    /// Applies a `dotted.path=value` override. Values parse as JSON when
    /// possible, falling back to a plain string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{spec}' must be key=value")))?;
        let mut root = serde_json::to_value(&self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = path.split('.').collect();
        let (last, front) = parts.split_last().unwrap();
        let mut cursor = &mut root;
        for part in front {
            cursor = cursor
                .as_object_mut()
                .and_then(|obj| obj.get_mut(*part))
                .ok_or_else(|| Error::Config(format!("unknown config key '{path}'")))?;
        }
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{path}' does not address a value")))?;
        if !obj.contains_key(*last) {
            return Err(Error::Config(format!("unknown config key '{path}'")));
        }
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        obj.insert((*last).to_string(), value);
        *self = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Hash of the adaptation-relevant settings; keys the checkpoint cache.
    pub fn adaptation_hash(&self) -> String {
        let subset = serde_json::json!({
            "input_size": self.input_size,
            "backbone": self.backbone,
            "vl": self.vl,
            "gca": self.gca,
            "adapter": self.adapter,
            "attention": self.attention,
            "vvea": self.vvea,
            "tvea": self.tvea,
            "adapt": self.adapt,
            "k": self.dataset.k,
        });
        sha256_hex(subset.to_string().as_bytes())[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be positive".into()));
        }
        if self.gca.group_size == 0 || self.gca.proj_dim == 0 {
            return Err(Error::Config("gca.group_size and gca.proj_dim must be positive".into()));
        }
        if self.adapter.kernel % 2 != 1 {
            return Err(Error::Config("adapter.kernel must be odd".into()));
        }
        if self.vvea.n_blocks == 0 {
            return Err(Error::Config("vvea.n_blocks must be at least 1".into()));
        }
        if self.vvea.tau <= 0.0 {
            return Err(Error::Config("vvea.tau must be positive".into()));
        }
        match self.tvea.threshold_mode.as_str() {
            "otsu" | "fixed" => {}
            other => {
                return Err(Error::Config(format!(
                    "tvea.threshold_mode must be 'otsu' or 'fixed', got '{other}'"
                )))
            }
        }
        match self.backbone.kind.as_str() {
            "resnet50" | "toy" => {}
            other => {
                return Err(Error::Config(format!(
                    "backbone.kind must be 'resnet50' or 'toy', got '{other}'"
                )))
            }
        }
        match self.vl.kind.as_str() {
            "vit_b16" | "toy" => {}
            other => {
                return Err(Error::Config(format!(
                    "vl.kind must be 'vit_b16' or 'toy', got '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Desk-scale configuration running entirely on the toy backbones.
    #[allow(clippy::field_reassign_with_default)]
    pub fn toy(input_size: usize) -> Self {
        let mut cfg = Self::default();
        cfg.input_size = input_size;
        cfg.backbone.kind = "toy".to_string();
        cfg.vl.kind = "toy".to_string();
        cfg.vl.input_size = 64;
        cfg.adapter.width = 16;
        cfg.gca.group_size = 4;
        cfg.gca.proj_dim = 4;
        cfg.attention.heads = 2;
        cfg.attention.head_dim = 8;
        cfg
    }
}
