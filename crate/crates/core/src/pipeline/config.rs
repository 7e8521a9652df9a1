use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::encoders::{EncoderConfig, KeyMode};
use crate::numerics::{DType, TauSchedule};

use super::PipelineError;

/// Every tunable of a model and its training run.
///
/// The text form is one `key = value` pair per line; `#` starts a comment. Keys not
/// listed in [`ModelConfig::KEYS`] are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub feature_dim: usize,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub tau: TauSchedule,
    pub key_mode: KeyMode,
    /// Attention scale; `None` means `√d_model`.
    pub attention_scale: Option<f64>,
    pub hard_gumbel: bool,
    pub dtype: DType,
    pub log_every: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            feature_dim: 16,
            batch_size: 16,
            max_steps: 2000,
            seed: 0,
            warmup_steps: 400,
            lr_scale: 1.0,
            tau: TauSchedule::default(),
            key_mode: KeyMode::Imported,
            attention_scale: None,
            hard_gumbel: false,
            dtype: DType::F32,
            log_every: 50,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("`{key}`: cannot parse `{value}`"))
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "d_model",
        "semantic_layers",
        "linguistic_layers",
        "heads",
        "conv_kernel",
        "ffn_mult",
        "rel_clip",
        "feature_dim",
        "batch_size",
        "max_steps",
        "seed",
        "warmup_steps",
        "lr_scale",
        "tau_initial",
        "tau_min",
        "tau_rate",
        "tau_every",
        "key_mode",
        "attention_scale",
        "hard_gumbel",
        "dtype",
        "log_every",
    ];

    pub fn scale(&self) -> f64 {
        self.attention_scale.unwrap_or_else(|| (self.encoder.d_model as f64).sqrt())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let e = &mut self.encoder;
        match key {
            "d_model" => e.d_model = parse_num(key, value)?,
            "semantic_layers" => e.semantic_layers = parse_num(key, value)?,
            "linguistic_layers" => e.linguistic_layers = parse_num(key, value)?,
            "heads" => e.heads = parse_num(key, value)?,
            "conv_kernel" => e.conv_kernel = parse_num(key, value)?,
            "ffn_mult" => e.ffn_mult = parse_num(key, value)?,
            "rel_clip" => e.rel_clip = parse_num(key, value)?,
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "max_steps" => self.max_steps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_num(key, value)?,
            "lr_scale" => self.lr_scale = parse_num(key, value)?,
            "tau_initial" => self.tau.initial = parse_num(key, value)?,
            "tau_min" => self.tau.min = parse_num(key, value)?,
            "tau_rate" => self.tau.rate = parse_num(key, value)?,
            "tau_every" => self.tau.every = parse_num(key, value)?,
            "key_mode" => self.key_mode = value.parse()?,
            "attention_scale" => {
                self.attention_scale = match value {
                    "auto" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "hard_gumbel" => self.hard_gumbel = parse_num(key, value)?,
            "dtype" => self.dtype = value.parse()?,
            "log_every" => self.log_every = parse_num(key, value)?,
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.encoder.validate()?;
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be positive");
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return bad("lr_scale must be positive");
        }
        if !(self.tau.min > 0.0 && self.tau.initial >= self.tau.min && self.tau.rate >= 0.0) {
            return bad("tau schedule needs 0 < tau_min <= tau_initial and tau_rate >= 0");
        }
        if self.attention_scale.is_some_and(|s| !(s > 0.0)) {
            return bad("attention_scale must be positive");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        std::fs::read_to_string(path)?.parse()
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_string().as_bytes()).into()
    }
}

impl FromStr for ModelConfig {
    type Err = PipelineError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut cfg = ModelConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| PipelineError::ConfigLine { line: n + 1, reason };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = &self.encoder;
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| writeln!(s, "{k} = {v}");
        kv("d_model", &e.d_model)?;
        kv("semantic_layers", &e.semantic_layers)?;
        kv("linguistic_layers", &e.linguistic_layers)?;
        kv("heads", &e.heads)?;
        kv("conv_kernel", &e.conv_kernel)?;
        kv("ffn_mult", &e.ffn_mult)?;
        kv("rel_clip", &e.rel_clip)?;
        kv("feature_dim", &self.feature_dim)?;
        kv("batch_size", &self.batch_size)?;
        kv("max_steps", &self.max_steps)?;
        kv("seed", &self.seed)?;
        kv("warmup_steps", &self.warmup_steps)?;
        kv("lr_scale", &self.lr_scale)?;
        kv("tau_initial", &self.tau.initial)?;
        kv("tau_min", &self.tau.min)?;
        kv("tau_rate", &self.tau.rate)?;
        kv("tau_every", &self.tau.every)?;
        kv("key_mode", &self.key_mode)?;
        match self.attention_scale {
            Some(v) => kv("attention_scale", &v)?,
            None => kv("attention_scale", &"auto")?,
        }
        kv("hard_gumbel", &self.hard_gumbel)?;
        kv("dtype", &self.dtype)?;
        kv("log_every", &self.log_every)?;
        f.write_str(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ModelConfig::default();
        cfg.lr_scale = 0.37;
        cfg.attention_scale = Some(3.5);
        cfg.key_mode = KeyMode::Trainable;
        let back: ModelConfig = cfg.to_string().parse().unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(ModelConfig::KEYS.len(), cfg.to_string().lines().count());
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let e = "d_model = 32\nlearning_rate = 1\n".parse::<ModelConfig>().unwrap_err();
        assert!(matches!(e, PipelineError::ConfigLine { line: 2, .. }));
        let e = "heads = two\n".parse::<ModelConfig>().unwrap_err();
        assert!(matches!(e, PipelineError::ConfigLine { line: 1, .. }));
        assert!("d_model = 30\nheads = 4\n".parse::<ModelConfig>().is_err());
    }

    #[test]
    fn comments_and_partial_files() {
        let cfg: ModelConfig = "# small\nd_model = 32 # width\n\nseed=9\n".parse().unwrap();
        assert_eq!(cfg.encoder.d_model, 32);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.batch_size, ModelConfig::default().batch_size);
    }
}
