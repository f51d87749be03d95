use super::data::{pack_speech, plans};
use super::{Result, SpeechItem, TrainError};
use crate::losses::{argmax_rows, ctc_greedy_decode, unit_logits};
use crate::model::{speech_ctc_pass, speech_pass, ModelConfig, ModelParams, SpeechBatch};
use crate::numerics::Tape;
use crate::rng::rng_from;
use crate::units::CharVocab;

/// Utterances per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;
/// Fixed stream for evaluation masks, independent of any training seed.
const EVAL_MASK_SEED: u64 = 0x6576_616c;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    let mut cur = vec![0; hyp.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hyp.len()]
}

/// Edits and reference length, summed over a corpus before dividing.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorCounts {
    pub edits: usize,
    pub reference: usize,
}

impl ErrorCounts {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hyp: &[T]) {
        self.edits += edit_distance(reference, hyp);
        self.reference += reference.len();
    }

    pub fn rate(&self) -> f64 {
        if self.reference == 0 {
            0.0
        } else {
            self.edits as f64 / self.reference as f64
        }
    }
}

pub fn cer(reference: &str, hyp: &str) -> f64 {
    let mut c = ErrorCounts::default();
    c.add(&reference.chars().collect::<Vec<_>>(), &hyp.chars().collect::<Vec<_>>());
    c.rate()
}

pub fn wer(reference: &str, hyp: &str) -> f64 {
    let mut c = ErrorCounts::default();
    c.add(
        &reference.split_whitespace().collect::<Vec<_>>(),
        &hyp.split_whitespace().collect::<Vec<_>>(),
    );
    c.rate()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Symbol error rate of the greedy character decode, word separator
    /// included, aggregated over the split.
    pub per: f64,
    pub wer: f64,
    pub utterances: usize,
}

/// Greedy CTC decoding of every utterance (no masking, no dropout).
pub fn decode(params: &ModelParams<f32>, model: &ModelConfig, items: &[SpeechItem]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_CHUNK) {
        let refs: Vec<&SpeechItem> = chunk.iter().collect();
        let packed = pack_speech(&refs)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let pass = speech_ctc_pass(&mut tape, &p, model, &packed.stacked, &packed.segs, &[], None)?;
        let logits = tape.value(pass.logits);
        for (start, n) in packed.segs.iter() {
            let rows = crate::numerics::Array::matrix(n, logits.cols(), logits.data()[start * logits.cols()..(start + n) * logits.cols()].to_vec())?;
            out.push(ctc_greedy_decode(&rows));
        }
    }
    Ok(out)
}

pub fn evaluate(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    items: &[SpeechItem],
    chars: &CharVocab,
) -> Result<Metrics> {
    if items.is_empty() {
        return Err(TrainError::EmptySplit("evaluation".into()));
    }
    let hyps = decode(params, model, items)?;
    let mut sym = ErrorCounts::default();
    let mut words = ErrorCounts::default();
    let sep = chars.separator().to_string();
    for (item, hyp) in items.iter().zip(&hyps) {
        sym.add(&item.chars, hyp);
        let r = chars.decode(&item.chars);
        let h = chars.decode(hyp);
        let split = |s: &str| -> Vec<String> {
            s.split(sep.as_str()).filter(|w| !w.is_empty()).map(str::to_string).collect()
        };
        words.add(&split(&r), &split(&h));
    }
    Ok(Metrics {
        per: sym.rate(),
        wer: words.rate(),
        utterances: items.len(),
    })
}

/// Fraction of masked frames whose top-layer unit prediction equals the
/// frame's unit. Masks come from a fixed stream, so the result depends only
/// on the parameters and the items.
pub fn masked_unit_accuracy(params: &ModelParams<f32>, model: &ModelConfig, items: &[SpeechItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(TrainError::EmptySplit("evaluation".into()));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (c, chunk) in items.chunks(EVAL_CHUNK).enumerate() {
        let refs: Vec<&SpeechItem> = chunk.iter().collect();
        let packed = pack_speech(&refs)?;
        let (mask, _) = plans(&packed.segs, model, 0.0, &mut rng_from(&[EVAL_MASK_SEED, c as u64]));
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let sp = speech_pass(
            &mut tape,
            &p,
            model,
            SpeechBatch {
                stacked: &packed.stacked,
                segs: &packed.segs,
                units: &packed.units,
                mask: &mask,
                swap: &[],
            },
            None,
        )?;
        let head = p.head(model, "full")?;
        let logits = unit_logits(&mut tape, sp.h_full, head.proj, head.table, model.tau)?;
        let pred = argmax_rows(tape.value(logits));
        hit += mask.iter().filter(|&&i| pred[i] == packed.units[i]).count();
        total += mask.len();
    }
    if total == 0 {
        return Err(TrainError::EmptySplit("no masked frames".into()));
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_rates() {
        assert_eq!(wer("ab c", "ab c"), 0.0);
        assert_eq!(wer("ab c", "ab"), 0.5);
        assert!((cer("abc", "axc") - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
        assert_eq!(edit_distance::<u8>(b"", b"abc"), 3);
        let mut c = ErrorCounts::default();
        c.add(&[1, 2, 3], &[1, 2, 3]);
        c.add(&[4], &[]);
        assert_eq!(c.rate(), 0.25);
    }
}
