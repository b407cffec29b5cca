//! Flat `key=value` run configuration. Every key has a default, unknown keys
//! are rejected, and serialization is canonical so a written config parses
//! back to the same bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::{AblationSpec, LmMode, ModelConfig};
use crate::train::TrainConfig;

pub const FILE_NAME: &str = "run_config.txt";

/// Splits `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1))
        })?;
        let key = k.trim().to_string();
        if out.iter().any(|(existing, _)| *existing == key) {
            return Err(Error::Config(format!(
                "line {}: duplicate key {key:?}",
                n + 1
            )));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

/// Text-only language-model stage run before captioning.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    /// 0 disables the stage.
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 6,
            peak_lr: 2e-3,
            warmup_steps: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    pub num_seeds: usize,
    pub large_image_size: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            num_seeds: 3,
            large_image_size: 84,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub ablation: AblationSpec,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub decode: DecodeConfig,
    pub ablate: AblateConfig,
    /// Hash of the vocabulary the run was trained with; empty until known.
    pub vocab_hash: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            ablation: AblationSpec::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            decode: DecodeConfig::default(),
            ablate: AblateConfig::default(),
            vocab_hash: String::new(),
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        const KEYS: &[&str] = &[$($key),*];

        fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $($key => cfg.$($field).+ = parse_value(key, value)?,)*
                _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
            }
            Ok(())
        }

        fn write_keys(cfg: &RunConfig, out: &mut String) {
            $(let _ = writeln!(out, "{}={}", $key, cfg.$($field).+);)*
        }
    };
}

config_keys! {
    "seed" => seed,
    "vision.image_size" => model.vision.image_size,
    "vision.channels" => model.vision.channels,
    "vision.patch_size" => model.vision.patch_size,
    "vision.d_v" => model.vision.d_v,
    "vision.depth" => model.vision.depth,
    "vision.heads" => model.vision.heads,
    "vision.use_cls_token" => model.vision.use_cls_token,
    "qformer.num_queries" => model.qformer.num_queries,
    "qformer.d_q" => model.qformer.d_q,
    "qformer.depth" => model.qformer.depth,
    "qformer.heads" => model.qformer.heads,
    "qformer.cross_attn_period" => model.qformer.cross_attn_period,
    "lm.d_lm" => model.lm.d_lm,
    "lm.depth" => model.lm.depth,
    "lm.heads" => model.lm.heads,
    "lm.max_positions" => model.lm.max_positions,
    "lm.soft_prompt_len" => model.lm.soft_prompt_len,
    "lm.prompt_text" => model.lm.prompt_text,
    "lm.prefix_lm" => model.lm.prefix_lm,
    "ablation.vision_trainable" => ablation.vision_trainable,
    "ablation.lm_mode" => ablation.lm_mode,
    "train.batch_size" => train.batch_size,
    "train.epochs" => train.epochs,
    "train.peak_lr" => train.peak_lr,
    "train.weight_decay" => train.weight_decay,
    "train.warmup_steps" => train.warmup_steps,
    "train.max_report_len" => train.max_report_len,
    "train.grad_clip" => train.grad_clip,
    "train.vision_lr_scale" => train.vision_lr_scale,
    "train.max_steps" => train.max_steps,
    "train.augment" => train.augment,
    "pretrain.epochs" => pretrain.epochs,
    "pretrain.peak_lr" => pretrain.peak_lr,
    "pretrain.warmup_steps" => pretrain.warmup_steps,
    "decode.beam_size" => decode.beam_size,
    "decode.repetition_penalty" => decode.repetition_penalty,
    "decode.min_len" => decode.min_len,
    "decode.max_len" => decode.max_len,
    "ablate.num_seeds" => ablate.num_seeds,
    "ablate.large_image_size" => ablate.large_image_size,
    "data.vocab_hash" => vocab_hash,
}

impl RunConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Starts from the defaults and applies every pair in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_pairs(text)? {
            set_key(&mut cfg, &k, &v)?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        set_key(self, key, value)?;
        self.sync();
        Ok(())
    }

    /// The ablation row's image size follows the vision resolution.
    fn sync(&mut self) {
        self.ablation.image_size = self.model.vision.image_size;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.vision.validate()?;
        self.model.qformer.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.model.lm.heads == 0 || self.model.lm.d_lm % self.model.lm.heads != 0 {
            return Err(Error::Config(format!(
                "lm.d_lm {} is not divisible by lm.heads {}",
                self.model.lm.d_lm, self.model.lm.heads
            )));
        }
        if self.model.lm.prompt_text.contains('\n') {
            return Err(Error::Config("lm.prompt_text must be a single line".into()));
        }
        if self.ablate.num_seeds == 0 {
            return Err(Error::Config("ablate.num_seeds must be positive".into()));
        }
        if self.model.lm.soft_prompt_len == 0 && self.ablation.lm_mode == LmMode::Ptuning {
            return Err(Error::Config("ptuning needs lm.soft_prompt_len > 0".into()));
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        write_keys(self, &mut out);
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Writes the canonical form as `run_config.txt` under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE_NAME);
        fs::write(&path, self.to_kv_string()).map_err(|e| Error::io(&path, e))
    }

    /// Model configuration with the vocabulary size filled in.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut m = self.model.clone();
        m.lm.vocab_size = vocab_size;
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let text = RunConfig::default().to_kv_string();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.to_kv_string(), text);
        assert_eq!(text.lines().count(), RunConfig::keys().len());
    }

    #[test]
    fn overrides_and_rejections() {
        let cfg =
            RunConfig::parse("seed=7\nablation.lm_mode=full\nvision.image_size=84\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.ablation.lm_mode, LmMode::Full);
        assert_eq!(cfg.ablation.image_size, 84);
        assert!(matches!(
            RunConfig::parse("colour=blue\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("seed=x\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("seed=1\nseed=2\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("train.batch_size=0\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prompt_text_keeps_inner_spaces() {
        let cfg = RunConfig::parse("lm.prompt_text=Describe the image:\n").unwrap();
        assert_eq!(cfg.model.lm.prompt_text, "Describe the image:");
        assert_eq!(RunConfig::parse(&cfg.to_kv_string()).unwrap(), cfg);
    }
}
