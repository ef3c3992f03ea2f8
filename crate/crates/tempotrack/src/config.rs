//! Flat key=value run configuration: file first, CLI flag overrides second.

use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::error::{ModelError, Result};
use crate::model::VariantConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub sti_layers: Vec<usize>,
    pub train: TrainConfig,
    /// `None` disables online template updates.
    pub update_interval: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::desk_scale();
        let sti_layers = VariantConfig::default_sti_layers(backbone.depth);
        RunConfig {
            backbone,
            sti_layers,
            train: TrainConfig::default(),
            update_interval: Some(50),
        }
    }
}

/// Parse `key=value` lines; `#` comments and blank lines are skipped.
/// Duplicate keys are an error so typos do not silently lose settings.
pub fn parse_kv(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = i + 1;
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {lineno}: expected key=value"));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(format!("line {lineno}: empty key"));
        }
        if pairs.iter().any(|(k, _)| *k == key) {
            return Err(format!("line {lineno}: duplicate key '{key}'"));
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::io(path.display().to_string(), e))?;
        let mut cfg = RunConfig::default();
        let pairs =
            parse_kv(&text).map_err(|e| ModelError::load(path.display().to_string(), e))?;
        for (k, v) in &pairs {
            cfg.apply(k, v)
                .map_err(|e| ModelError::load(path.display().to_string(), e))?;
        }
        Ok(cfg)
    }

    /// Apply one override. Unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("{key}: {e}"))
        }
        match key {
            "patch_size" => self.backbone.patch_size = num(key, value)?,
            "token_dim" => self.backbone.token_dim = num(key, value)?,
            "depth" => self.backbone.depth = num(key, value)?,
            "num_heads" => self.backbone.num_heads = num(key, value)?,
            "ffn_ratio" => self.backbone.ffn_ratio = num(key, value)?,
            "template_side" => self.backbone.template_side = num(key, value)?,
            "search_side" => self.backbone.search_side = num(key, value)?,
            "sti_layers" => {
                self.sti_layers = if value.is_empty() || value == "none" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| num::<usize>(key, s.trim()))
                        .collect::<std::result::Result<_, _>>()?
                };
            }
            "epochs" => self.train.epochs = num(key, value)?,
            "samples_per_epoch" => self.train.samples_per_epoch = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "lr" => self.train.lr = num(key, value)?,
            "lr_drop_epoch" => self.train.lr_drop_epoch = num(key, value)?,
            "lr_drop_factor" => self.train.lr_drop_factor = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "grad_clip" => self.train.grad_clip = num(key, value)?,
            "max_frame_gap" => self.train.max_frame_gap = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "update_interval" => {
                self.update_interval = match value {
                    "never" | "none" => None,
                    v => Some(num(key, v)?),
                };
            }
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    pub fn apply_all(&mut self, overrides: &[(String, String)]) -> Result<()> {
        for (k, v) in overrides {
            self.apply(k, v).map_err(ModelError::Config)?;
        }
        Ok(())
    }
}
