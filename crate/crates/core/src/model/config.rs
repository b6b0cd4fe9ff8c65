use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Variant, DEFAULT_WINDOW};
use crate::error::{Error, Result};

/// Plain ViT blocks or ViTAE normal cells (attention plus a parallel convolution branch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    Vit,
    Vitae,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Vit => "vit",
            Arch::Vitae => "vitae",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vit" => Ok(Arch::Vit),
            "vitae" => Ok(Arch::Vitae),
            other => Err(Error::config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_ratio: usize,
    /// Group count of the convolution branch (ViTAE only).
    pub pcm_groups: usize,
    pub window_size: usize,
    /// Attention used by every layer not listed in `full_attention_layers`.
    pub variant: Variant,
    /// 1-based indices of layers with global attention.
    pub full_attention_layers: Vec<usize>,
    /// Classifier width after global average pooling; 0 disables the head.
    pub num_classes: usize,
}

/// Full attention at layers `k·depth/4` for `k = 1..4`. At depth 4 that
/// rule would leave no windowed layer, so only the last layer is global.
pub fn interleave_schedule(depth: usize) -> Result<Vec<usize>> {
    if depth == 0 || !depth.is_multiple_of(4) {
        return Err(Error::config(format!("interleave schedule needs depth divisible by 4, got {depth}")));
    }
    if depth == 4 {
        return Ok(vec![4]);
    }
    Ok((1..=4).map(|k| k * depth / 4).collect())
}

pub const PRESETS: [&str; 4] = ["vit-b", "vitae-b", "desk", "desk-vitae"];

impl ModelConfig {
    /// ViT-B: patch 16, C = 768, 12 heads, depth 12, FFN ratio 4.
    pub fn vit_base() -> Self {
        Self {
            arch: Arch::Vit,
            in_channels: 3,
            patch_size: 16,
            embed_dim: 768,
            heads: 12,
            depth: 12,
            ffn_ratio: 4,
            pcm_groups: 192,
            window_size: DEFAULT_WINDOW,
            variant: Variant::Rvsa,
            full_attention_layers: vec![3, 6, 9, 12],
            num_classes: 1000,
        }
    }

    pub fn vitae_base() -> Self {
        Self { arch: Arch::Vitae, ..Self::vit_base() }
    }

    /// Small configuration used by tests and examples: patch 4, C = 64, 4 heads, depth 4.
    pub fn desk() -> Self {
        Self {
            arch: Arch::Vit,
            in_channels: 3,
            patch_size: 4,
            embed_dim: 64,
            heads: 4,
            depth: 4,
            ffn_ratio: 4,
            pcm_groups: 16,
            window_size: DEFAULT_WINDOW,
            variant: Variant::Rvsa,
            full_attention_layers: vec![4],
            num_classes: 10,
        }
    }

    pub fn desk_vitae() -> Self {
        Self { arch: Arch::Vitae, ..Self::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "vit-b" | "base" => Ok(Self::vit_base()),
            "vitae-b" => Ok(Self::vitae_base()),
            "desk" => Ok(Self::desk()),
            "desk-vitae" => Ok(Self::desk_vitae()),
            other => Err(Error::config(format!("unknown preset `{other}`, expected one of {}", PRESETS.join(", ")))),
        }
    }

    pub fn with_default_schedule(mut self) -> Result<Self> {
        self.full_attention_layers = interleave_schedule(self.depth)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.patch_size == 0 || self.depth == 0 || self.ffn_ratio == 0 {
            return Err(Error::config("channel count, patch size, depth and FFN ratio must be positive"));
        }
        AttentionConfig::new(self.embed_dim, self.heads, self.window_size, self.variant)?;
        if !self.embed_dim.is_multiple_of(4) {
            return Err(Error::config(format!("embed dim {} must be divisible by 4", self.embed_dim)));
        }
        if self.arch == Arch::Vitae && (self.pcm_groups == 0 || !self.embed_dim.is_multiple_of(self.pcm_groups)) {
            return Err(Error::config(format!(
                "embed dim {} is not divisible into {} convolution groups",
                self.embed_dim, self.pcm_groups
            )));
        }
        if let Some(&bad) = self.full_attention_layers.iter().find(|&&l| l == 0 || l > self.depth) {
            return Err(Error::config(format!("full-attention layer {bad} outside 1..={}", self.depth)));
        }
        Ok(())
    }

    /// Attention variant of 0-based layer `i`.
    pub fn layer_variant(&self, i: usize) -> Variant {
        if self.full_attention_layers.contains(&(i + 1)) {
            Variant::Full
        } else {
            self.variant
        }
    }

    pub fn layer_variants(&self) -> Vec<Variant> {
        (0..self.depth).map(|i| self.layer_variant(i)).collect()
    }

    pub fn attention(&self, layer: usize) -> Result<AttentionConfig> {
        AttentionConfig::new(self.embed_dim, self.heads, self.window_size, self.layer_variant(layer))
    }

    /// Key/value pairs accepted by [`ModelConfig::set`].
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let layers = if self.full_attention_layers.is_empty() {
            "none".to_string()
        } else {
            self.full_attention_layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
        };
        vec![
            ("arch", self.arch.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("depth", self.depth.to_string()),
            ("ffn_ratio", self.ffn_ratio.to_string()),
            ("pcm_groups", self.pcm_groups.to_string()),
            ("window_size", self.window_size.to_string()),
            ("variant", self.variant.to_string()),
            ("full_attention_layers", layers),
            ("num_classes", self.num_classes.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || -> Result<usize> {
            value.trim().parse().map_err(|_| Error::config(format!("`{key}` expects an integer, got `{value}`")))
        };
        match key {
            "preset" => *self = Self::preset(value)?,
            "arch" => self.arch = value.parse()?,
            "in_channels" => self.in_channels = num()?,
            "patch_size" => self.patch_size = num()?,
            "embed_dim" => self.embed_dim = num()?,
            "heads" => self.heads = num()?,
            "depth" => self.depth = num()?,
            "ffn_ratio" => self.ffn_ratio = num()?,
            "pcm_groups" => self.pcm_groups = num()?,
            "window_size" => self.window_size = num()?,
            "variant" => self.variant = value.parse()?,
            "num_classes" => self.num_classes = num()?,
            "full_attention_layers" => {
                let v = value.trim();
                self.full_attention_layers = if v.eq_ignore_ascii_case("none") || v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|s| s.trim().parse().map_err(|_| Error::config(format!("bad layer index `{s}`"))))
                        .collect::<Result<_>>()?
                };
            }
            other => return Err(Error::config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `pairs` on top of `self`. Without an explicit
    /// `full_attention_layers` entry the interleave schedule follows the
    /// final depth.
    pub fn apply<'a>(mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut explicit_schedule = false;
        let mut saw_depth = false;
        for (k, v) in pairs {
            self.set(k, v)?;
            explicit_schedule |= k == "full_attention_layers";
            saw_depth |= k == "depth" || k == "preset";
        }
        if saw_depth && !explicit_schedule {
            self = self.with_default_schedule()?;
        }
        self.validate()?;
        Ok(self)
    }
}
