//! Optimization, pre-training and fine-tuning loops, evaluation, the
//! layer-wise alignment probe, and checkpoints.

mod data;
mod eval;
mod finetune;
mod optim;
mod pretrain;
mod probe;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::losses::LossError;
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::tokenizers::{TokenizerError, UpsamplerConfig};

pub use data::{SpeechItem, TextItem, TextUnits, TrainData};
pub use eval::{cer, decode, edit_distance, evaluate, masked_unit_accuracy, wer, ErrorCounts, Metrics};
pub use finetune::{finetune_trainable, Finetuner};
pub use optim::{adam_step, AdamConfig, OptimState, Schedule};
pub use pretrain::{MetricsLog, Pretrainer};
pub use probe::{alignment_probe, pca_2d, ProbeResult, ProbeRow};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("gradient shape mismatch for parameter `{0}`")]
    GradShape(String),
    #[error("empty split `{0}`")]
    EmptySplit(String),
    #[error("tokenizer/vocabulary mismatch: {0}")]
    VariantMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which unit tokenizer pair feeds the speech and text branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Phoneme units: oracle alignment for speech, lexicon plus upsampling for text.
    Phoneme,
    /// Hidden units: k-means for speech, text-to-unit model for text.
    Hidden,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Phoneme => "P",
            Variant::Hidden => "H",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" | "p" => Ok(Variant::Phoneme),
            "H" | "h" => Ok(Variant::Hidden),
            _ => Err(TrainError::InvalidConfig(format!("variant must be P or H, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Weight of the text-branch CTC term.
    pub lambda: f64,
    /// Random swapping in the speech branch.
    pub swap: bool,
    /// Text pre-training branch.
    pub text: bool,
    pub seed: u64,
    /// Utterances per speech batch and sentences per text batch.
    pub speech_batch: usize,
    pub text_batch: usize,
    pub steps: u64,
    pub warmup: u64,
    pub lr: f64,
    pub eval_every: u64,
    pub ft_steps: u64,
    pub ft_warmup: u64,
    pub ft_lr: f64,
    pub ft_batch: usize,
    pub ft_eval_every: u64,
    /// Draw a fresh CTC head before fine-tuning instead of reusing the text-trained one.
    pub reinit_ctc: bool,
    pub upsampler: UpsamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Phoneme,
            lambda: 0.1,
            swap: true,
            text: true,
            seed: 1,
            speech_batch: 8,
            text_batch: 8,
            steps: 20_000,
            warmup: 1_600,
            lr: 5e-4,
            eval_every: 1_000,
            ft_steps: 2_000,
            ft_warmup: 160,
            ft_lr: 5e-4,
            ft_batch: 8,
            ft_eval_every: 200,
            reinit_ctc: false,
            upsampler: UpsamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be a finite value >= 0");
        }
        if self.speech_batch == 0 || self.text_batch == 0 || self.ft_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.eval_every == 0 || self.ft_eval_every == 0 {
            return bad("eval cadence must be positive");
        }
        Schedule::new(self.lr, self.warmup, self.steps)?;
        Schedule::new(self.ft_lr, self.ft_warmup, self.ft_steps)?;
        self.upsampler.validate()?;
        Ok(())
    }
}

/// Gradients of the parameters bound on `tape` for which `keep` holds.
pub(crate) fn collect_grads(
    bound: &crate::model::Bound,
    grads: &crate::numerics::Gradients<f32>,
    keep: impl Fn(&str) -> bool,
) -> std::collections::BTreeMap<String, crate::numerics::Array<f32>> {
    bound
        .iter()
        .filter(|(n, _)| keep(n))
        .map(|(n, v)| (n.to_string(), grads.get(v)))
        .collect()
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
