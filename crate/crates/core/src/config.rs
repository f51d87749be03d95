//! Flat `key = value` run configuration.
//!
//! Keys are `section.field`. Precedence is defaults, then a config file, then
//! explicit overrides. Unknown keys are rejected.

use std::path::Path;

use thiserror::Error;

use crate::corpus::{LanguageConfig, SplitSizes};
use crate::model::ModelConfig;
use crate::tokenizers::{T2uConfig, UpsamplerConfig};
use crate::trainer::{TrainConfig, Variant};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for config key `{key}`")]
    BadValue { key: String, value: String },
    #[error("config key `{0}` is derived from other settings and cannot be set")]
    Derived(String),
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// A value that renders to and parses from config text.
pub trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse_value(s: &str) -> Option<Self>;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
        }
    )*};
}

plain_value!(usize, u64, bool);

impl ConfigValue for f64 {
    fn render(&self) -> String {
        format!("{self:?}")
    }
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

impl ConfigValue for Variant {
    fn render(&self) -> String {
        self.tag().to_string()
    }
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
    fn parse_value(s: &str) -> Option<Self> {
        s.split(',').map(|x| T::parse_value(x.trim())).collect()
    }
}

/// A struct whose fields are addressable by name.
pub trait Keyed {
    fn pairs(&self) -> Vec<(String, String)>;
    /// Sets `key`; `Ok(false)` if the struct has no such field.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
}

macro_rules! keyed {
    ($ty:ty { $($field:ident),* $(,)? } $(nested { $($sub:ident => $prefix:literal),* })?) => {
        impl Keyed for $ty {
            fn pairs(&self) -> Vec<(String, String)> {
                #[allow(unused_mut)]
                let mut out = vec![$((stringify!($field).to_string(), ConfigValue::render(&self.$field))),*];
                $($(
                    for (k, v) in self.$sub.pairs() {
                        out.push((format!("{}.{k}", $prefix), v));
                    }
                )*)?
                out
            }

            fn set(&mut self, key: &str, value: &str) -> Result<bool> {
                let v = value.trim();
                match key {
                    $(stringify!($field) => {
                        self.$field = ConfigValue::parse_value(v).ok_or_else(|| ConfigError::BadValue {
                            key: key.to_string(),
                            value: v.to_string(),
                        })?;
                        Ok(true)
                    })*
                    _ => {
                        $($(
                            if let Some(rest) = key.strip_prefix(concat!($prefix, ".")) {
                                return self.$sub.set(rest, value);
                            }
                        )*)?
                        Ok(false)
                    }
                }
            }
        }
    };
}

keyed!(LanguageConfig {
    phonemes, words, min_word_len, max_word_len, letters, feat_dim, dur_mean, dur_std, sigma, zipf,
    sil_prob, min_words, max_words,
});
keyed!(SplitSizes { paired, pretrain_speech, pretrain_text, finetune, dev, test });
keyed!(ModelConfig {
    layers, d_model, heads, ffn, feat_dim, units, ctc_width, stride, rel_buckets, rel_max_distance,
    mask_prob, mask_len, swap_prob, tau, dropout, tie_label_emb, share_umlm_heads,
});
keyed!(UpsamplerConfig { mean, variance, sil_mean, sil_variance, min_len, max_len });
keyed!(TrainConfig {
    variant, lambda, swap, text, seed, speech_batch, text_batch, steps, warmup, lr, eval_every,
    ft_steps, ft_warmup, ft_lr, ft_batch, ft_eval_every, reinit_ctc,
} nested { upsampler => "upsample" });
keyed!(T2uConfig { d_model, heads, ffn, enc_layers, dec_layers, rel_buckets, rel_max_distance, lr, batch });

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSettings {
    pub language_seed: u64,
    pub seed: u64,
}
keyed!(CorpusSettings { language_seed, seed });

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansSettings {
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
}
keyed!(KMeansSettings { k, iters, seed });

#[derive(Debug, Clone, PartialEq)]
pub struct T2uSettings {
    pub epochs: usize,
    pub seed: u64,
}
keyed!(T2uSettings { epochs, seed });

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub points: usize,
}
keyed!(ProbeSettings { points });

#[derive(Debug, Clone, PartialEq)]
pub struct AblateSettings {
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
}
keyed!(AblateSettings { seeds, lambdas });

/// Every knob of the pipeline. Defaults reproduce the reference experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusSettings,
    pub lang: LanguageConfig,
    pub data: SplitSizes,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kmeans: KMeansSettings,
    pub t2u: T2uConfig,
    pub t2u_run: T2uSettings,
    pub probe: ProbeSettings,
    pub ablate: AblateSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lang = LanguageConfig::default();
        Self {
            corpus: CorpusSettings { language_seed: 1, seed: 1 },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            kmeans: KMeansSettings { k: 32, iters: 100, seed: 1 },
            t2u: T2uConfig::new(lang.phonemes + 2, 32),
            t2u_run: T2uSettings { epochs: 30, seed: 1 },
            probe: ProbeSettings { points: 200 },
            ablate: AblateSettings {
                seeds: vec![1, 2, 3],
                lambdas: vec![0.01, 0.1, 1.0, 10.0],
            },
            lang,
            data: SplitSizes::default(),
        }
    }
}

/// Model keys filled in from the language and tokenizer settings.
const DERIVED: &[&str] = &["model.units", "model.ctc_width", "model.feat_dim"];

impl RunConfig {
    fn sections(&mut self) -> [(&'static str, &mut dyn Keyed); 10] {
        [
            ("corpus", &mut self.corpus),
            ("lang", &mut self.lang),
            ("data", &mut self.data),
            ("model", &mut self.model),
            ("train", &mut self.train),
            ("kmeans", &mut self.kmeans),
            ("t2u", &mut self.t2u),
            ("t2u_run", &mut self.t2u_run),
            ("probe", &mut self.probe),
            ("ablate", &mut self.ablate),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if DERIVED.contains(&key) {
            return Err(ConfigError::Derived(key.to_string()));
        }
        let (section, field) = key.split_once('.').ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        for (name, s) in self.sections() {
            if name == section {
                let found = s.set(field, value).map_err(|e| match e {
                    ConfigError::BadValue { value, .. } => ConfigError::BadValue { key: key.to_string(), value },
                    other => other,
                })?;
                return if found {
                    Ok(())
                } else {
                    Err(ConfigError::UnknownKey(key.to_string()))
                };
            }
        }
        Err(ConfigError::UnknownKey(key.to_string()))
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then `file` if given, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_text(&std::fs::read_to_string(f)?)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Every settable key with its current value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut me = self.clone();
        let mut s = String::new();
        for (name, sec) in me.sections() {
            for (k, v) in sec.pairs() {
                let key = format!("{name}.{k}");
                if !DERIVED.contains(&key.as_str()) {
                    s.push_str(&format!("{key} = {v}\n"));
                }
            }
        }
        s
    }

    /// Unit vocabulary size of a variant.
    pub fn units(&self, variant: Variant) -> usize {
        match variant {
            Variant::Phoneme => self.lang.phonemes + 2,
            Variant::Hidden => self.kmeans.k,
        }
    }

    /// Model config with the derived sizes filled in for `variant`.
    pub fn model_for(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            units: self.units(variant),
            // Blank, separator, letters.
            ctc_width: self.lang.letters + 2,
            feat_dim: self.lang.feat_dim,
            ..self.model.clone()
        }
    }

    pub fn t2u_config(&self) -> T2uConfig {
        T2uConfig {
            phonemes: self.lang.phonemes + 2,
            units: self.kmeans.k,
            ..self.t2u.clone()
        }
    }
}
