//! Two-stack Transformer encoder with a unit embedding bridge.
//!
//! The speech stack consumes frame features, the shared stack consumes either
//! the (partially swapped) speech representation or embedded text units, and a
//! width-2 convolutional CTC head maps the shared output to characters.

mod encoder;
mod forward;
mod plans;

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::losses::LossError;
use crate::numerics::{Array, NumericsError, Real, Tape, Var};
use crate::rng::rng_from;

pub use encoder::{
    affine_norm, apply_mask, apply_swap, ctc_head_logits, embed_units, encode_shared, encode_speech, final_norm,
    frontend, linear, rel_bucket, rel_bucket_matrix, run_blocks, stack_frames, Dropout, Segments,
};
pub use forward::{speech_ctc_pass, speech_pass, text_pass, CtcPass, SpeechBatch, SpeechPass};
pub use plans::{make_mask_plan, make_swap_plan, MaskPlan, SwapPlan};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unit id {id} outside vocabulary of size {size}")]
    BadUnit { id: usize, size: usize },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Total layers; the first half form the speech stack.
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub feat_dim: usize,
    /// Unit vocabulary size (rows of the embedding and label tables).
    pub units: usize,
    /// CTC output width: characters plus blank.
    pub ctc_width: usize,
    pub stride: usize,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
    pub mask_prob: f64,
    pub mask_len: usize,
    pub swap_prob: f64,
    pub tau: f64,
    pub dropout: f64,
    /// Use the input table `units.emb` as the label table of both loss layers.
    pub tie_label_emb: bool,
    /// Share one projection and label table between the two loss layers.
    pub share_umlm_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 64,
            heads: 4,
            ffn: 256,
            feat_dim: 16,
            units: 14,
            ctc_width: 12,
            stride: 1,
            rel_buckets: 16,
            rel_max_distance: 64,
            mask_prob: 0.08,
            mask_len: 10,
            swap_prob: 0.15,
            tau: 0.1,
            dropout: 0.1,
            tie_label_emb: false,
            share_umlm_heads: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.layers < 2 || self.layers % 2 != 0 {
            return bad("layers must be even and at least 2");
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.ffn == 0 || self.feat_dim == 0 || self.stride == 0 {
            return bad("ffn, feat_dim and stride must be positive");
        }
        if self.units < 2 || self.ctc_width < 2 {
            return bad("units and ctc_width must be at least 2");
        }
        if self.rel_buckets < 4 || self.rel_max_distance < self.rel_buckets {
            return bad("rel_buckets must be >= 4 and <= rel_max_distance");
        }
        for (name, p) in [("mask_prob", self.mask_prob), ("swap_prob", self.swap_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.mask_len == 0 {
            return bad("mask_len must be positive");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.layers / 2
    }

    /// Parameter names of the projection and label table scoring at `depth`
    /// (either `half` or `full`).
    pub fn head_names(&self, depth: &str) -> (String, String) {
        let depth = if self.share_umlm_heads { "half" } else { depth };
        let table = if self.tie_label_emb {
            "units.emb".to_string()
        } else {
            format!("umlm.{depth}.label_emb")
        };
        (format!("umlm.{depth}.proj"), table)
    }
}

pub fn layer_prefix(layer: usize, cfg: &ModelConfig) -> String {
    if layer < cfg.half() {
        format!("speech.{layer}")
    } else {
        format!("shared.{layer}")
    }
}

/// Named parameter arrays, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    arrays: BTreeMap<String, Array<T>>,
}

/// Initialization law of one named array.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Const(f64),
}

/// Shape and initialization of every named array of a parameter set.
#[derive(Debug, Default)]
pub struct ParamSpec {
    entries: Vec<(String, usize, usize, Init)>,
}

impl ParamSpec {
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) {
        self.entries.push((name.into(), rows, cols, init));
    }

    /// `N(0, 1/fan_in)` weights.
    pub fn linear(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        self.add(name, rows, cols, Init::Normal(1.0 / (rows as f64).sqrt()));
    }

    /// Arrays of one pre-norm block. `resid` scales the two output projections.
    pub fn block(&mut self, p: &str, d: usize, ffn: usize, buckets: usize, resid: f64) {
        self.add(format!("{p}.ln1.g"), 1, d, Init::Const(1.0));
        self.add(format!("{p}.ln1.b"), 1, d, Init::Const(0.0));
        self.linear(format!("{p}.attn.wq"), d, d);
        self.add(format!("{p}.attn.bq"), 1, d, Init::Const(0.0));
        self.linear(format!("{p}.attn.wk"), d, d);
        self.linear(format!("{p}.attn.wv"), d, d);
        self.add(format!("{p}.attn.bv"), 1, d, Init::Const(0.0));
        self.add(format!("{p}.attn.wo"), d, d, Init::Normal(resid / (d as f64).sqrt()));
        self.add(format!("{p}.attn.bo"), 1, d, Init::Const(0.0));
        self.add(format!("{p}.rel_bias"), 1, buckets, Init::Const(0.0));
        self.add(format!("{p}.ln2.g"), 1, d, Init::Const(1.0));
        self.add(format!("{p}.ln2.b"), 1, d, Init::Const(0.0));
        self.linear(format!("{p}.ffn.w1"), d, ffn);
        self.add(format!("{p}.ffn.b1"), 1, ffn, Init::Const(0.0));
        self.add(format!("{p}.ffn.w2"), ffn, d, Init::Normal(resid / (ffn as f64).sqrt()));
        self.add(format!("{p}.ffn.b2"), 1, d, Init::Const(0.0));
    }

    /// Draws every array from a stream keyed by (seed, name).
    pub fn materialize<T: Real>(&self, seed: u64) -> ModelParams<T> {
        let mut arrays = BTreeMap::new();
        for (name, r, c, init) in &self.entries {
            let mut rng = rng_from(&[seed, name_key(name)]);
            let a = match *init {
                Init::Const(v) => Array::filled(*r, *c, T::of(v)),
                Init::Normal(std) => Array::from_fn(*r, *c, |_, _| {
                    let z: f64 = rng.sample(StandardNormal);
                    T::of(z * std)
                }),
            };
            arrays.insert(name.clone(), a);
        }
        ModelParams { arrays }
    }
}

impl<T: Real> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let resid = 1.0 / ((2 * cfg.layers) as f64).sqrt();
        let mut spec = ParamSpec::default();
        spec.linear("frontend.w", cfg.feat_dim * cfg.stride, d);
        spec.add("frontend.b", 1, d, Init::Const(0.0));
        spec.add("mask_emb", 1, d, Init::Normal(1.0));
        spec.add("units.emb", cfg.units, d, Init::Normal(1.0));
        for l in 0..cfg.layers {
            spec.block(&layer_prefix(l, cfg), d, cfg.ffn, cfg.rel_buckets, resid);
        }
        spec.add("shared.ln_f.g", 1, d, Init::Const(1.0));
        spec.add("shared.ln_f.b", 1, d, Init::Const(0.0));
        let depths: &[&str] = if cfg.share_umlm_heads { &["half"] } else { &["half", "full"] };
        for depth in depths {
            spec.linear(format!("umlm.{depth}.proj"), d, d);
            if !cfg.tie_label_emb {
                spec.add(format!("umlm.{depth}.label_emb"), cfg.units, d, Init::Normal(1.0));
            }
        }
        spec.add("ctc.conv.w0", d, d, Init::Normal(1.0 / ((2 * d) as f64).sqrt()));
        spec.add("ctc.conv.w1", d, d, Init::Normal(1.0 / ((2 * d) as f64).sqrt()));
        spec.add("ctc.conv.b", 1, d, Init::Const(0.0));
        spec.linear("ctc.out.w", d, cfg.ctc_width);
        spec.add("ctc.out.b", 1, cfg.ctc_width, Init::Const(0.0));
        Ok(spec.materialize(seed))
    }

    pub fn from_arrays(arrays: BTreeMap<String, Array<T>>) -> Self {
        Self { arrays }
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.arrays
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array<T>> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array<T>)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arrays: self.arrays.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.values().all(Array::is_finite)
    }

    /// Records every parameter on `tape`; those for which `trainable` holds
    /// receive gradients, the rest are constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .arrays
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

fn name_key(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases, unlike DefaultHasher.
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles for arrays already recorded on a tape, e.g. by a gradient checker.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn head(&self, cfg: &ModelConfig, depth: &str) -> Result<crate::losses::UnitHead> {
        let (proj, table) = cfg.head_names(depth);
        Ok(crate::losses::UnitHead {
            proj: self.get(&proj)?,
            table: self.get(&table)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_named() {
        let cfg = ModelConfig::default();
        let a = ModelParams::<f32>::init(&cfg, 7).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelParams::<f32>::init(&cfg, 8).unwrap());
        assert_eq!(a.get("units.emb").unwrap().shape(), &[14, 64]);
        assert!(a.get("speech.1.attn.wq").is_ok());
        assert!(a.get("shared.2.attn.wq").is_ok());
        assert!(a.get("shared.1.attn.wq").is_err());
        assert!(a.get("speech.0.attn.bk").is_err());
        assert!(a.is_finite());
    }

    #[test]
    fn sharing_flags_change_head_wiring() {
        let cfg = ModelConfig {
            tie_label_emb: true,
            share_umlm_heads: true,
            ..ModelConfig::default()
        };
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        assert_eq!(cfg.head_names("full"), ("umlm.half.proj".into(), "units.emb".into()));
        assert!(p.get("umlm.full.proj").is_err());
        assert!(p.get("umlm.half.label_emb").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        for bad in [
            ModelConfig { layers: 3, ..Default::default() },
            ModelConfig { heads: 5, ..Default::default() },
            ModelConfig { tau: 0.0, ..Default::default() },
            ModelConfig { swap_prob: 1.5, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
