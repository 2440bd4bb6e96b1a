use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Two independent modality transformers.
    None,
    /// Fusion tokens self-attend over the union of all tokens.
    Token,
    /// Fusion tokens attend over all `n_a × n_v` pairwise interactions.
    Dense,
    /// Fusion tokens attend over interactions of aggregation tokens only.
    Factorized,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Token => "token",
            FusionMode::Dense => "dense",
            FusionMode::Factorized => "factorized",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "token" => Ok(FusionMode::Token),
            "dense" => Ok(FusionMode::Dense),
            "factorized" => Ok(FusionMode::Factorized),
            _ => Err(Error::config("fusion_mode", format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerPreset {
    /// Every layer (early fusion).
    All,
    /// Last third of the layers.
    Mid,
    /// Final layer only (late fusion).
    Last,
    None,
}

/// Which layers (1-based) carry a fusion block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FusionLayers {
    Preset(LayerPreset),
    Explicit(Vec<usize>),
}

impl FusionLayers {
    pub fn resolve(&self, depth: usize) -> Vec<usize> {
        match self {
            FusionLayers::Preset(LayerPreset::All) => (1..=depth).collect(),
            FusionLayers::Preset(LayerPreset::Mid) => {
                let n = depth.div_ceil(3);
                (depth + 1 - n..=depth).collect()
            }
            FusionLayers::Preset(LayerPreset::Last) => vec![depth],
            FusionLayers::Preset(LayerPreset::None) => Vec::new(),
            FusionLayers::Explicit(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Layer count `L`.
    pub depth: usize,
    /// Token width `D`.
    pub dim: usize,
    pub heads: usize,
    /// Per-head similarity width of fusion and aggregation attention.
    pub attn_dim: usize,
    /// Fusion-token count `F`.
    pub fusion_tokens: usize,
    pub agg_tokens_a: usize,
    pub agg_tokens_v: usize,
    pub mlp_ratio_modality: f64,
    pub mlp_ratio_fusion: f64,
    pub fusion_mode: FusionMode,
    pub fusion_layers: FusionLayers,
    /// Test hook: factorized layers skip their aggregation blocks and use
    /// the modality tokens directly as aggregated tokens.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub aggregation_passthrough: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 4,
            attn_dim: 16,
            fusion_tokens: 16,
            agg_tokens_a: 8,
            agg_tokens_v: 8,
            mlp_ratio_modality: 4.0,
            mlp_ratio_fusion: 1.0,
            fusion_mode: FusionMode::Factorized,
            fusion_layers: FusionLayers::Preset(LayerPreset::All),
            aggregation_passthrough: false,
        }
    }
}

impl FusionConfig {
    /// Same architecture without any fusion.
    pub fn without_fusion(&self) -> Self {
        Self {
            fusion_mode: FusionMode::None,
            fusion_layers: FusionLayers::Preset(LayerPreset::None),
            ..self.clone()
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        self.fusion_layers.resolve(self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("model.{k}");
        if self.depth == 0 {
            return Err(Error::config(key("depth"), "must be at least 1"));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(Error::config(key("dim"), "must be a positive multiple of 4"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(key("heads"), format!("must divide dim {}", self.dim)));
        }
        if self.attn_dim == 0 {
            return Err(Error::config(key("attn_dim"), "must be positive"));
        }
        if !(self.mlp_ratio_modality > 0.0) || !(self.mlp_ratio_fusion > 0.0) {
            return Err(Error::config(key("mlp_ratio_*"), "must be positive"));
        }
        let layers = self.layers();
        for (i, &l) in layers.iter().enumerate() {
            if l == 0 || l > self.depth {
                return Err(Error::config(
                    key("fusion_layers"),
                    format!("layer {l} is outside 1..={}", self.depth),
                ));
            }
            if i > 0 && layers[i - 1] >= l {
                return Err(Error::config(key("fusion_layers"), "must be strictly increasing"));
            }
        }
        match (self.fusion_mode, layers.is_empty()) {
            (FusionMode::None, false) => {
                return Err(Error::config(key("fusion_layers"), "must be empty when fusion_mode is none"))
            }
            (m, true) if m != FusionMode::None => {
                return Err(Error::config(key("fusion_layers"), "must be non-empty unless fusion_mode is none"))
            }
            _ => {}
        }
        if self.fusion_mode != FusionMode::None && self.fusion_tokens == 0 {
            return Err(Error::config(key("fusion_tokens"), "must be at least 1 when fusion is enabled"));
        }
        if self.fusion_mode == FusionMode::Factorized && (self.agg_tokens_a == 0 || self.agg_tokens_v == 0) {
            return Err(Error::config(key("agg_tokens_*"), "must be at least 1 for factorized fusion"));
        }
        Ok(())
    }
}
