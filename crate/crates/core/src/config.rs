//! Run configuration: one TOML document with `model`, `decoder`, `data`,
//! `train` and `output` sections plus a top-level `seed`. Command-line
//! overrides are `section.key=value` pairs applied before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::FusionConfig;
use crate::error::{Error, Result};
use crate::pretrain::{DecoderConfig, TrainConfig};
use crate::synthetic::SyntheticConfig;
use crate::tokenize::spectrogram_grid;

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "AVFUSION_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub spec_bins: usize,
    pub spec_frames: usize,
    pub noise: f64,
    pub image_patch: usize,
    pub spec_patch: usize,
    /// Directory of `.avft` pairs; synthetic data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            classes: s.classes,
            image_size: s.image_size,
            channels: s.channels,
            spec_bins: s.spec_bins,
            spec_frames: s.spec_frames,
            noise: s.noise,
            image_patch: 8,
            spec_patch: 8,
            dir: None,
        }
    }
}

impl DataConfig {
    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            classes: self.classes,
            image_size: self.image_size,
            channels: self.channels,
            spec_bins: self.spec_bins,
            spec_frames: self.spec_frames,
            noise: self.noise,
        }
    }

    pub fn visual_grid(&self) -> (usize, usize) {
        let g = self.image_size / self.image_patch.max(1);
        (g, g)
    }

    pub fn audio_grid(&self) -> Result<(usize, usize)> {
        spectrogram_grid(self.spec_bins, self.spec_frames, self.spec_patch)
    }

    pub fn visual_tokens(&self) -> usize {
        let (r, c) = self.visual_grid();
        r * c
    }

    pub fn audio_tokens(&self) -> Result<usize> {
        let (r, c) = self.audio_grid()?;
        Ok(r * c)
    }

    pub fn visual_patch_dim(&self) -> usize {
        self.image_patch * self.image_patch * self.channels
    }

    pub fn audio_patch_dim(&self) -> usize {
        self.spec_patch * self.spec_patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("data.classes", "at least 2 classes are required"));
        }
        if self.channels == 0 || self.image_size == 0 || self.spec_bins == 0 || self.spec_frames == 0 {
            return Err(Error::config("data", "all input extents must be positive"));
        }
        if self.image_patch == 0 || !self.image_size.is_multiple_of(self.image_patch) {
            return Err(Error::config(
                "data.image_patch",
                format!("must divide data.image_size {}", self.image_size),
            ));
        }
        if self.spec_patch == 0 || !self.spec_bins.is_multiple_of(self.spec_patch) {
            return Err(Error::config(
                "data.spec_patch",
                format!("must divide data.spec_bins {}", self.spec_bins),
            ));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("data.noise", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Relative paths resolve under `$AVFUSION_OUT` when it is set.
    pub dir: PathBuf,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
        }
    }
}

impl OutputConfig {
    pub fn resolved_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.dir.is_relative() => Path::new(&root).join(&self.dir),
            _ => self.dir.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: FusionConfig,
    pub decoder: DecoderConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}


/// Keys accepted although the default document omits them.
const OPTIONAL_KEYS: &[&str] = &["model.aggregation_passthrough", "data.dir"];

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = match toml::Value::Table(table.clone()).try_into() {
            Ok(c) => c,
            Err(e) => {
                let reference = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
                let key = first_unknown_key(&table, &reference, "").unwrap_or_else(|| "config".to_string());
                return Err(Error::config(key, e.to_string()));
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.decoder.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
    let key = key.trim();
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn first_unknown_key(given: &toml::Table, reference: &toml::Value, prefix: &str) -> Option<String> {
    for (k, v) in given {
        let full = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match reference.get(k) {
            None if OPTIONAL_KEYS.contains(&full.as_str()) => {}
            None => return Some(full),
            Some(r) => {
                if let (Some(sub), true) = (v.as_table(), r.is_table()) {
                    if let Some(bad) = first_unknown_key(sub, r, &full) {
                        return Some(bad);
                    }
                }
            }
        }
    }
    None
}
