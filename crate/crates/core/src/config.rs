//! Plain-text `key = value` run configuration. Lines starting with `#`
//! are comments; unknown keys are rejected.

use std::path::Path;

use crate::attention::DecayStrategy;
use crate::error::{Error, Result};
use crate::model::{AttentionPlacement, ModelConfig};
use crate::prior::{FusionMode, PriorMode};
use crate::scalar::NumericMode;

/// Model plus toy-training budget. The defaults pin the desk-scale
/// reference run: Nano model, 64x64 scenes with 4 classes, 200 train and
/// 50 validation samples, batch 4, 300 steps, lr 6e-5 with polynomial
/// decay, decoupled weight decay 1e-2, narrow floats.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub image_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mode: NumericMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::nano(4),
            image_size: 64,
            train_samples: 200,
            val_samples: 50,
            batch: 4,
            steps: 300,
            lr: 6e-5,
            weight_decay: 1e-2,
            mode: NumericMode::Narrow,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::parse(format!("key `{key}`: `{v}` is not a nonnegative integer")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::parse(format!("key `{key}`: `{v}` is not a number")))
}

fn parse_usize4(key: &str, v: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::parse(format!(
            "key `{key}`: expected 4 comma-separated values, got `{v}`"
        )));
    }
    let mut out = [0usize; 4];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = parse_usize(key, p)?;
    }
    Ok(out)
}

/// Parse configuration text over the defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "stage_dims" => cfg.model.stage_dims = parse_usize4(key, value)?,
            "stage_depths" => cfg.model.stage_depths = parse_usize4(key, value)?,
            "stage_heads" => cfg.model.stage_heads = parse_usize4(key, value)?,
            "num_classes" => cfg.model.num_classes = parse_usize(key, value)?,
            "ffn_ratio" => cfg.model.ffn_ratio = parse_usize(key, value)?,
            "decoder_dim" => cfg.model.decoder_dim = parse_usize(key, value)?,
            "decay" => cfg.model.decay = DecayStrategy::parse(value)?,
            "fusion" => cfg.model.fusion = FusionMode::parse(value)?,
            "prior" => cfg.model.prior = PriorMode::parse(value)?,
            "attention" => cfg.model.attention = AttentionPlacement::parse(value)?,
            "image_size" => cfg.image_size = parse_usize(key, value)?,
            "train_samples" => cfg.train_samples = parse_usize(key, value)?,
            "val_samples" => cfg.val_samples = parse_usize(key, value)?,
            "batch" => cfg.batch = parse_usize(key, value)?,
            "steps" => cfg.steps = parse_usize(key, value)?,
            "lr" => cfg.lr = parse_f64(key, value)?,
            "weight_decay" => cfg.weight_decay = parse_f64(key, value)?,
            "mode" => cfg.mode = NumericMode::parse(value)?,
            other => {
                return Err(Error::parse(format!(
                    "line {}: unknown key `{other}`",
                    lineno + 1
                )))
            }
        }
    }
    cfg.model.validate()?;
    if cfg.image_size % 32 != 0 || cfg.image_size == 0 {
        return Err(Error::param(format!(
            "image_size {} must be a positive multiple of 32",
            cfg.image_size
        )));
    }
    if cfg.batch == 0 {
        return Err(Error::param("batch must be >= 1"));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Echo of every key in the file format, for run manifests.
pub fn echo_config(cfg: &TrainConfig) -> Vec<(String, String)> {
    let m = &cfg.model;
    let list4 = |a: &[usize; 4]| {
        a.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    vec![
        ("stage_dims".into(), list4(&m.stage_dims)),
        ("stage_depths".into(), list4(&m.stage_depths)),
        ("stage_heads".into(), list4(&m.stage_heads)),
        ("num_classes".into(), m.num_classes.to_string()),
        ("ffn_ratio".into(), m.ffn_ratio.to_string()),
        ("decoder_dim".into(), m.decoder_dim.to_string()),
        ("decay".into(), m.decay.describe()),
        ("fusion".into(), m.fusion.name().into()),
        ("prior".into(), m.prior.name().into()),
        ("attention".into(), m.attention.name().into()),
        ("image_size".into(), cfg.image_size.to_string()),
        ("train_samples".into(), cfg.train_samples.to_string()),
        ("val_samples".into(), cfg.val_samples.to_string()),
        ("batch".into(), cfg.batch.to_string()),
        ("steps".into(), cfg.steps.to_string()),
        ("lr".into(), cfg.lr.to_string()),
        ("weight_decay".into(), cfg.weight_decay.to_string()),
        ("mode".into(), cfg.mode.to_string()),
    ]
}
