use super::{
    apply_mask, apply_swap, ctc_head_logits, embed_units, encode_shared, encode_speech, final_norm, frontend, Bound,
    Dropout, ModelConfig, ModelError, Result, Segments,
};
use crate::losses::{umlm_loss, uctc_loss, LossError, UmlmTerms};
use crate::numerics::{Array, Real, Tape, Var};

/// One packed speech batch. Index lists address packed rows.
#[derive(Debug, Clone, Copy)]
pub struct SpeechBatch<'a, T> {
    /// Stacked frame features, one row per model step.
    pub stacked: &'a Array<T>,
    pub segs: &'a Segments,
    /// Unit label of every packed row (Z_S).
    pub units: &'a [usize],
    pub mask: &'a [usize],
    pub swap: &'a [usize],
}

pub struct SpeechPass {
    /// H^{L/2} before swapping.
    pub h_half: Var,
    /// Input of the shared stack (H^{L/2} with swapped rows).
    pub shared_in: Var,
    /// Residual stream after every shared layer.
    pub shared: Vec<Var>,
    /// H^L (final norm applied).
    pub h_full: Var,
    pub umlm: UmlmTerms,
}

pub fn speech_pass<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    batch: SpeechBatch<'_, T>,
    dropout: Option<&Dropout>,
) -> Result<SpeechPass> {
    let total = batch.segs.total();
    if batch.stacked.rows() != total || batch.units.len() != total {
        return Err(ModelError::LengthMismatch {
            what: "speech batch rows",
            expected: total,
            got: batch.stacked.rows().min(batch.units.len()),
        });
    }
    let x = tape.constant(batch.stacked.clone());
    let x = frontend(tape, p, x)?;
    let x = apply_mask(tape, x, batch.mask, p.get("mask_emb")?)?;
    let speech = encode_speech(tape, p, cfg, x, batch.segs, dropout)?;
    let h_half = *speech.last().expect("at least one speech layer");
    let shared_in = apply_swap(tape, h_half, batch.units, batch.swap, p.get("units.emb")?)?;
    let shared = encode_shared(tape, p, cfg, shared_in, batch.segs, dropout)?;
    let h_full = final_norm(tape, p, *shared.last().expect("at least one shared layer"))?;
    let mut flags = vec![false; total];
    for &i in batch.mask {
        flags[i] = true;
    }
    let umlm = umlm_loss(
        tape,
        h_half,
        h_full,
        batch.units,
        &flags,
        p.head(cfg, "half")?,
        p.head(cfg, "full")?,
        cfg.tau,
    )?;
    Ok(SpeechPass {
        h_half,
        shared_in,
        shared,
        h_full,
        umlm,
    })
}

/// CTC summed over items and divided by the number of target characters of
/// the items that were scored. Items whose target cannot fit are skipped.
pub struct CtcPass {
    pub logits: Var,
    pub loss: Var,
    pub chars: usize,
    pub skipped: usize,
}

fn ctc_over_segments<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    segs: &Segments,
    targets: &[Vec<usize>],
) -> Result<CtcPass> {
    if targets.len() != segs.len() {
        return Err(ModelError::LengthMismatch {
            what: "ctc targets",
            expected: segs.len(),
            got: targets.len(),
        });
    }
    let mut terms = Vec::new();
    let mut chars = 0;
    let mut skipped = 0;
    for ((start, n), target) in segs.iter().zip(targets) {
        let item = if segs.len() == 1 { logits } else { tape.slice_rows(logits, start, n)? };
        match uctc_loss(tape, item, target) {
            Ok(l) => {
                terms.push(l);
                chars += target.len();
            }
            Err(LossError::TargetTooLong { .. }) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    let loss = if terms.is_empty() || chars == 0 {
        tape.constant(Array::scalar(T::zero()))
    } else {
        let rows = if terms.len() == 1 { terms[0] } else { tape.concat_rows(&terms)? };
        let s = tape.sum(rows)?;
        tape.scale(s, T::of(1.0 / chars as f64))?
    };
    Ok(CtcPass {
        logits,
        loss,
        chars,
        skipped,
    })
}

/// Text branch: units, embedding, masking, shared stack, CTC head.
pub fn text_pass<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    units: &[usize],
    segs: &Segments,
    mask: &[usize],
    targets: &[Vec<usize>],
    dropout: Option<&Dropout>,
) -> Result<CtcPass> {
    if units.len() != segs.total() {
        return Err(ModelError::LengthMismatch {
            what: "text units",
            expected: segs.total(),
            got: units.len(),
        });
    }
    let u = embed_units(tape, p.get("units.emb")?, units)?;
    let u = apply_mask(tape, u, mask, p.get("mask_emb")?)?;
    let shared = encode_shared(tape, p, cfg, u, segs, dropout)?;
    let h = final_norm(tape, p, *shared.last().expect("at least one shared layer"))?;
    let logits = ctc_head_logits(tape, p, h, segs)?;
    ctc_over_segments(tape, logits, segs, targets)
}

/// Speech to characters with no masking or swapping (fine-tuning and decoding).
pub fn speech_ctc_pass<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    stacked: &Array<T>,
    segs: &Segments,
    targets: &[Vec<usize>],
    dropout: Option<&Dropout>,
) -> Result<CtcPass> {
    let x = tape.constant(stacked.clone());
    let x = frontend(tape, p, x)?;
    let speech = encode_speech(tape, p, cfg, x, segs, dropout)?;
    let shared = encode_shared(tape, p, cfg, *speech.last().expect("speech layer"), segs, dropout)?;
    let h = final_norm(tape, p, *shared.last().expect("shared layer"))?;
    let logits = ctc_head_logits(tape, p, h, segs)?;
    if targets.is_empty() {
        let zero = tape.constant(Array::scalar(T::zero()));
        return Ok(CtcPass {
            logits,
            loss: zero,
            chars: 0,
            skipped: 0,
        });
    }
    ctc_over_segments(tape, logits, segs, targets)
}
