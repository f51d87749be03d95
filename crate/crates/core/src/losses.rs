//! Training objectives: the cosine-softmax unit distribution, masked unit
//! prediction at two depths, CTC in log space (with an enumeration oracle),
//! the joint objective, and greedy CTC decoding.

use thiserror::Error;

use crate::numerics::{Array, NumericsError, Real, Tape, Var};

/// Norm floor for the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("target of length {target} (needs {needed} frames) cannot be emitted from {frames} frames")]
    TargetTooLong {
        target: usize,
        needed: usize,
        frames: usize,
    },
    #[error("target id {0} is the blank or out of range")]
    BadTarget(usize),
    #[error("enumeration bound exceeded: T={frames}, V={vocab} (max T=8, V=5)")]
    EnumerationTooLarge { frames: usize, vocab: usize },
    #[error("target has zero probability under every path")]
    Unproducible,
    #[error("loss weight must be non-negative, got {0}")]
    NegativeWeight(f64),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Logits `cos(h W, e(z)) / tau` for every row of `h` against every row of `table`.
pub fn unit_logits<T: Real>(tape: &mut Tape<T>, h: Var, proj: Var, table: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(LossError::BadTemperature(tau));
    }
    let projected = tape.matmul(h, proj)?;
    let cos = tape.cosine_rows(projected, table, T::of(COSINE_EPS))?;
    Ok(tape.scale(cos, T::of(1.0 / tau))?)
}

/// Probability of each unit given one representation row.
pub fn unit_distribution(h: &[f64], proj: &Array<f64>, table: &Array<f64>, tau: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let hv = tape.constant(Array::matrix(1, h.len(), h.to_vec())?);
    let pv = tape.constant(proj.clone());
    let tv = tape.constant(table.clone());
    let logits = unit_logits(&mut tape, hv, pv, tv, tau)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(tape.value(probs).data().to_vec())
}

/// Projection and label-embedding handles for one prediction depth.
#[derive(Debug, Clone, Copy)]
pub struct UnitHead {
    pub proj: Var,
    pub table: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct UmlmTerms {
    /// Mean over masked frames at the middle layer.
    pub half: Var,
    /// Mean over masked frames at the top layer.
    pub full: Var,
    pub masked: usize,
}

/// Masked unit prediction at both depths, each term averaged over masked frames.
///
/// Only rows with `masked[i]` contribute; with no masked rows both terms are
/// zero constants.
#[allow(clippy::too_many_arguments)]
pub fn umlm_loss<T: Real>(
    tape: &mut Tape<T>,
    h_half: Var,
    h_full: Var,
    targets: &[usize],
    masked: &[bool],
    head_half: UnitHead,
    head_full: UnitHead,
    tau: f64,
) -> Result<UmlmTerms> {
    let count = masked.iter().filter(|&&m| m).count();
    if count == 0 {
        let zero = tape.constant(Array::scalar(T::zero()));
        return Ok(UmlmTerms {
            half: zero,
            full: zero,
            masked: 0,
        });
    }
    let inv = T::of(1.0 / count as f64);
    let mut term = |h: Var, head: UnitHead| -> Result<Var> {
        let logits = unit_logits(tape, h, head.proj, head.table, tau)?;
        let xent = tape.masked_xent(logits, targets, masked)?;
        Ok(tape.scale(xent, inv)?)
    };
    let half = term(h_half, head_half)?;
    let full = term(h_full, head_full)?;
    Ok(UmlmTerms {
        half,
        full,
        masked: count,
    })
}

/// Minimum number of frames CTC needs for `target` (repeats need a blank between).
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Negative log CTC probability of `target` and its gradient w.r.t. the logits.
///
/// `logits` is `frames x vocab` row-major; id 0 is the blank. The recursion
/// runs over the blank-interleaved target entirely in log space.
pub fn ctc_nll_and_grad(logits: &[f64], frames: usize, vocab: usize, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    const BLANK: usize = 0;
    if let Some(&bad) = target.iter().find(|&&c| c == BLANK || c >= vocab) {
        return Err(LossError::BadTarget(bad));
    }
    let needed = ctc_min_frames(target);
    if frames == 0 || needed > frames {
        return Err(LossError::TargetTooLong {
            target: target.len(),
            needed,
            frames,
        });
    }
    let mut logp = logits.to_vec();
    for t in 0..frames {
        let row = &mut logp[t * vocab..(t + 1) * vocab];
        let lse = crate::numerics::log_sum_exp(row);
        row.iter_mut().for_each(|x| *x -= lse);
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &c in target {
        ext.push(c);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = logp[ext[0]];
    if s_len > 1 {
        alpha[1] = logp[ext[1]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            if acc > ninf {
                alpha[t * s_len + s] = acc + logp[t * vocab + ext[s]];
            }
        }
    }
    let last = (frames - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = lse2(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return Err(LossError::Unproducible);
    }

    // beta excludes the emission at t
    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let nxt = (t + 1) * s_len;
            let emit = |s2: usize| beta[nxt + s2] + logp[(t + 1) * vocab + ext[s2]];
            let mut acc = emit(s);
            if s + 1 < s_len {
                acc = lse2(acc, emit(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = lse2(acc, emit(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        let row = &mut grad[t * vocab..(t + 1) * vocab];
        for (k, g) in row.iter_mut().enumerate() {
            *g = logp[t * vocab + k].exp();
        }
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                row[ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// `-log p_CTC(target | logits)` recorded on the tape. `target` holds
/// character ids (never the blank).
pub fn uctc_loss<T: Real>(tape: &mut Tape<T>, logits: Var, target: &[usize]) -> Result<Var> {
    let (frames, vocab) = tape.shape(logits);
    let data: Vec<f64> = tape.value(logits).data().iter().map(|x| x.f64()).collect();
    let (nll, grad) = ctc_nll_and_grad(&data, frames, vocab, target)?;
    let grad = grad.into_iter().map(T::of).collect();
    Ok(tape.scalar_with_grad("ctc", logits, T::of(nll), grad)?)
}

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn ctc_collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != 0 {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Enumeration oracle: sums the probability of every length-T label path that
/// collapses to `target`. Bounded to T <= 8 and V <= 5.
pub fn uctc_brute_force(logits: &Array<f64>, target: &[usize]) -> Result<f64> {
    let (frames, vocab) = (logits.rows(), logits.cols());
    if frames > 8 || vocab > 5 {
        return Err(LossError::EnumerationTooLarge { frames, vocab });
    }
    let probs: Vec<Vec<f64>> = (0..frames)
        .map(|t| {
            let row = logits.row(t);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            row.iter().map(|&x| (x - m).exp() / z).collect()
        })
        .collect();
    let total_paths = vocab.pow(frames as u32);
    let mut path = vec![0usize; frames];
    let mut sum = 0.0;
    for code in 0..total_paths {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % vocab;
            c /= vocab;
        }
        if ctc_collapse(&path) == target {
            sum += path.iter().enumerate().map(|(t, &k)| probs[t][k]).product::<f64>();
        }
    }
    if sum == 0.0 {
        return Err(LossError::Unproducible);
    }
    Ok(-sum.ln())
}

/// Per-term losses of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub umlm_half: f64,
    pub umlm_full: f64,
    pub uctc: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn umlm(&self) -> f64 {
        self.umlm_half + self.umlm_full
    }
}

/// `total = umlm_half + umlm_full + lambda * uctc`.
pub fn joint_loss(umlm_half: f64, umlm_full: f64, uctc: f64, lambda: f64) -> Result<LossBreakdown> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(LossError::NegativeWeight(lambda));
    }
    Ok(LossBreakdown {
        umlm_half,
        umlm_full,
        uctc,
        total: umlm_half + umlm_full + lambda * uctc,
        lambda,
    })
}

/// Index of the largest entry of every row; ties go to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Array<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|t| {
            let row = logits.row(t);
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy_decode<T: Real>(logits: &Array<T>) -> Vec<usize> {
    ctc_collapse(&argmax_rows(logits))
}
