use rand::Rng;

use super::{Result, TrainConfig, TrainError, Variant};
use crate::corpus::batch_pad;
use crate::model::{make_mask_plan, make_swap_plan, stack_frames, ModelConfig, Segments};
use crate::numerics::Array;
use crate::rng::rng_from;
use crate::units::{UnitKind, UnitVocab};

/// One speech utterance ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechItem {
    /// Stacked frame features, one row per model step.
    pub stacked: Array<f32>,
    /// Unit label of every model step.
    pub units: Vec<usize>,
    /// Character ids of the transcript (CTC target).
    pub chars: Vec<usize>,
}

impl SpeechItem {
    /// Stacks `stride` frames per step; a step takes the unit of its first frame.
    pub fn new(features: &Array<f32>, frame_units: &[usize], chars: Vec<usize>, stride: usize) -> Result<Self> {
        if features.rows() != frame_units.len() || features.rows() == 0 {
            return Err(TrainError::InvalidConfig(format!(
                "{} feature rows but {} unit labels",
                features.rows(),
                frame_units.len()
            )));
        }
        Ok(Self {
            stacked: stack_frames(features, stride),
            units: frame_units.iter().step_by(stride).copied().collect(),
            chars,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TextUnits {
    /// Phonemes (SIL included) to be upsampled afresh at every use.
    Phonemes(Vec<usize>),
    /// Frame-rate units produced offline.
    Units(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextItem {
    pub units: TextUnits,
    pub chars: Vec<usize>,
}

/// Tokenized pre-training data of one variant.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub variant: Variant,
    pub vocab: UnitVocab,
    pub speech: Vec<SpeechItem>,
    pub text: Vec<TextItem>,
}

impl TrainData {
    pub fn check(&self, cfg: &TrainConfig, model: &ModelConfig) -> Result<()> {
        let mismatch = |m: String| Err(TrainError::VariantMismatch(m));
        let kind = match self.variant {
            Variant::Phoneme => UnitKind::Phoneme,
            Variant::Hidden => UnitKind::Hidden,
        };
        if cfg.variant != self.variant || self.vocab.kind() != kind {
            return mismatch(format!(
                "config wants {} units, data holds {} ({:?} vocabulary)",
                cfg.variant,
                self.variant,
                self.vocab.kind()
            ));
        }
        if self.vocab.size() != model.units {
            return mismatch(format!(
                "model has {} units, vocabulary has {}",
                model.units,
                self.vocab.size()
            ));
        }
        if self.speech.is_empty() {
            return Err(TrainError::EmptySplit("speech".into()));
        }
        if cfg.text && self.text.is_empty() {
            return Err(TrainError::EmptySplit("text".into()));
        }
        let size = self.vocab.size();
        for s in &self.speech {
            if s.units.iter().any(|&u| u >= size) {
                return mismatch("speech unit outside the vocabulary".into());
            }
            if s.stacked.cols() != model.feat_dim * model.stride {
                return mismatch("speech feature width differs from the model".into());
            }
        }
        for t in &self.text {
            match (&t.units, self.variant) {
                (TextUnits::Phonemes(ids), Variant::Phoneme) | (TextUnits::Units(ids), Variant::Hidden) => {
                    if ids.is_empty() || ids.iter().any(|&u| u >= size) {
                        return mismatch("text unit outside the vocabulary".into());
                    }
                }
                _ => return mismatch("text items were tokenized for the other variant".into()),
            }
        }
        Ok(())
    }
}

pub(crate) struct Packed {
    pub stacked: Array<f32>,
    pub segs: Segments,
    pub units: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
}

pub(crate) fn pack_speech(items: &[&SpeechItem]) -> Result<Packed> {
    let feats: Vec<&Array<f32>> = items.iter().map(|s| &s.stacked).collect();
    let (stacked, segs) = batch_pad(&feats)?.pack();
    Ok(Packed {
        stacked,
        segs,
        units: items.iter().flat_map(|s| s.units.iter().copied()).collect(),
        targets: items.iter().map(|s| s.chars.clone()).collect(),
    })
}

/// `k` distinct indices below `n`, drawn from the stream keyed by `key`.
pub(crate) fn pick(n: usize, k: usize, key: &[u64]) -> Vec<usize> {
    rand::seq::index::sample(&mut rng_from(key), n, k.min(n)).into_vec()
}

/// Mask and swap rows of a packed batch, plans drawn per item.
pub(crate) fn plans(segs: &Segments, model: &ModelConfig, swap_prob: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut mask = Vec::new();
    let mut swap = Vec::new();
    for (start, len) in segs.iter() {
        let m = make_mask_plan(len, model.mask_prob, model.mask_len, rng);
        let r = make_swap_plan(&m, swap_prob, rng);
        mask.extend(m.indices.iter().map(|i| start + i));
        swap.extend(r.indices.iter().map(|i| start + i));
    }
    (mask, swap)
}
