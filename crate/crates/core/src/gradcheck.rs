//! Finite-difference suite: every tape kernel on random shapes, then the
//! full unit-prediction, text CTC, speech CTC and joint losses on a 12-frame
//! toy model, all in `f64`.

use rand::Rng;

use crate::model::{
    make_mask_plan, make_swap_plan, speech_ctc_pass, speech_pass, stack_frames, text_pass, Bound, ModelConfig,
    MaskPlan, ModelError, ModelParams, Segments, SpeechBatch,
};
use crate::numerics::{finite_diff_check, Array, NumericsError, Result, Tape, Var};
use crate::rng::rng_from;

/// Central-difference step for kernels.
pub const KERNEL_STEP: f64 = 1e-6;
/// Central-difference step for whole-model losses.
pub const MODEL_STEP: f64 = 3e-5;
pub const TOLERANCE: f64 = 1e-5;

pub type Program = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Named worst relative errors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<(String, f64)>,
}

impl SuiteReport {
    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < TOLERANCE
    }

    fn push(&mut self, name: String, err: f64) {
        match self.rows.iter_mut().find(|r| r.0 == name) {
            Some(r) => r.1 = r.1.max(err),
            None => self.rows.push((name, err)),
        }
    }
}

fn rand_array(rng: &mut impl Rng, r: usize, c: usize) -> Array<f64> {
    Array::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Reduces a matrix to a scalar with fixed random weights so every output
/// coordinate reaches the gradient.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(x);
    let mut rng = rng_from(&[seed, r as u64, c as u64]);
    let w = tape.constant(rand_array(&mut rng, r, c));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

/// One program per kernel with the inputs it needs at an `r x c` shape.
pub fn kernel_cases(rng: &mut impl Rng, r: usize, c: usize) -> Vec<(&'static str, Vec<(&'static str, Array<f64>)>, Program)> {
    let k = rng.random_range(1..5);
    let ids: Vec<usize> = (0..r + 1).map(|_| rng.random_range(0..r)).collect();
    let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    let mask: Vec<bool> = (0..r).map(|i| i % 2 == 0).collect();
    let keep: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.7)).collect();
    let flat_idx: Vec<usize> = (0..r * r).map(|_| rng.random_range(0..c)).collect();
    let split = if c > 1 { rng.random_range(1..c) } else { 1 };
    let rsplit = if r > 1 { rng.random_range(1..r) } else { 1 };
    let starts = vec![0, rsplit.min(r - 1)];
    let base_idx: Vec<usize> = (0..r).filter(|i| i % 3 == 1).collect();
    let src_idx: Vec<usize> = base_idx.iter().map(|&i| i % 2).collect();
    vec![
        (
            "matmul",
            vec![("a", rand_array(rng, r, k)), ("b", rand_array(rng, k, c))],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, 1)
            }),
        ),
        (
            "matmul_tt",
            vec![("a", rand_array(rng, k, r)), ("b", rand_array(rng, c, k))],
            Box::new(|t, v| {
                let y = t.matmul_t(v[0], v[1], true, true)?;
                weighted_sum(t, y, 2)
            }),
        ),
        (
            "add_sub_mul_scale",
            vec![("a", rand_array(rng, r, c)), ("b", rand_array(rng, r, c))],
            Box::new(|t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[1])?;
                let m = t.mul(d, v[1])?;
                let y = t.scale(m, 1.7)?;
                weighted_sum(t, y, 3)
            }),
        ),
        (
            "row_broadcast",
            vec![("a", rand_array(rng, r, c)), ("g", rand_array(rng, 1, c)), ("b", rand_array(rng, 1, c))],
            Box::new(|t, v| {
                let y = t.mul_row(v[0], v[1])?;
                let y = t.add_row(y, v[2])?;
                weighted_sum(t, y, 4)
            }),
        ),
        (
            "softmax",
            vec![("a", rand_array(rng, r, c))],
            Box::new(|t, v| {
                let y = t.softmax_rows(v[0])?;
                weighted_sum(t, y, 5)
            }),
        ),
        (
            "layer_norm",
            // Two features normalize to +-1 and leave only an eps-sized
            // gradient, which round-off swamps; three or more are well posed.
            vec![("a", rand_array(rng, r, c + 2))],
            Box::new(|t, v| {
                let y = t.layer_norm_rows(v[0], 1e-5)?;
                weighted_sum(t, y, 6)
            }),
        ),
        (
            "gelu",
            vec![("a", rand_array(rng, r, c))],
            Box::new(|t, v| {
                let y = t.gelu(v[0])?;
                weighted_sum(t, y, 7)
            }),
        ),
        (
            "gather",
            vec![("table", rand_array(rng, r, c))],
            Box::new(move |t, v| {
                let y = t.gather(v[0], &ids)?;
                weighted_sum(t, y, 8)
            }),
        ),
        (
            "gather_flat",
            vec![("src", rand_array(rng, 1, c))],
            Box::new(move |t, v| {
                let y = t.gather_flat(v[0], &flat_idx, r, r)?;
                weighted_sum(t, y, 9)
            }),
        ),
        (
            "cosine",
            vec![("a", rand_array(rng, r, c + 1)), ("b", rand_array(rng, k + 1, c + 1))],
            Box::new(|t, v| {
                let y = t.cosine_rows(v[0], v[1], 1e-8)?;
                weighted_sum(t, y, 10)
            }),
        ),
        (
            "logsumexp",
            vec![("a", rand_array(rng, r, c))],
            Box::new(|t, v| {
                let y = t.logsumexp_rows(v[0])?;
                weighted_sum(t, y, 11)
            }),
        ),
        (
            "masked_xent",
            vec![("a", rand_array(rng, r, c))],
            Box::new(move |t, v| t.masked_xent(v[0], &targets, &mask)),
        ),
        (
            "dropout",
            vec![("a", rand_array(rng, r, c))],
            Box::new(move |t, v| {
                let y = t.dropout(v[0], &keep, 0.3)?;
                weighted_sum(t, y, 12)
            }),
        ),
        (
            "concat_slice",
            vec![("a", rand_array(rng, r, c)), ("b", rand_array(rng, r, c))],
            Box::new(move |t, v| {
                let rows = t.concat_rows(&[v[0], v[1]])?;
                let top = t.slice_rows(rows, rsplit, r)?;
                let cols = t.concat_cols(&[top, v[1]])?;
                let y = t.slice_cols(cols, split, c)?;
                weighted_sum(t, y, 13)
            }),
        ),
        (
            "replace_rows",
            vec![("base", rand_array(rng, r, c)), ("src", rand_array(rng, 2, c))],
            Box::new(move |t, v| {
                let y = t.replace_rows(v[0], v[1], &base_idx, &src_idx)?;
                weighted_sum(t, y, 14)
            }),
        ),
        (
            "shift_down",
            vec![("a", rand_array(rng, r, c))],
            Box::new(move |t, v| {
                let y = t.shift_down(v[0], &starts)?;
                weighted_sum(t, y, 15)
            }),
        ),
    ]
}

/// Every kernel over `trials` random shapes up to 5x5.
pub fn kernel_suite(seed: u64, trials: usize) -> Result<SuiteReport> {
    let mut rng = rng_from(&[seed]);
    let mut report = SuiteReport::default();
    for _ in 0..trials {
        let r = rng.random_range(1..6);
        let c = rng.random_range(1..6);
        for (name, inputs, program) in kernel_cases(&mut rng, r, c) {
            let rep = finite_diff_check(&program, &inputs, KERNEL_STEP)?;
            report.push(format!("kernel/{name}"), rep.max_error());
        }
    }
    Ok(report)
}

/// Two-layer model small enough for a full parameter sweep.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        ffn: 16,
        feat_dim: 3,
        units: 5,
        ctc_width: 4,
        rel_buckets: 8,
        rel_max_distance: 16,
        mask_len: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

struct Instance {
    stacked: Array<f64>,
    units: Vec<usize>,
    mask: Vec<usize>,
    swap: Vec<usize>,
    text_units: Vec<usize>,
    text_mask: Vec<usize>,
    target: Vec<usize>,
}

const FRAMES: usize = 12;

fn instance(seed: u64) -> Instance {
    let mut rng = rng_from(&[seed]);
    let feats = Array::from_fn(FRAMES, 3, |_, _| rng.random_range(-1.0..1.0));
    let units: Vec<usize> = (0..FRAMES).map(|_| rng.random_range(0..5)).collect();
    // Guarantee at least one masked and one swapped frame.
    let mut mask = make_mask_plan(FRAMES, 0.2, 3, &mut rng).indices;
    if mask.is_empty() {
        mask = vec![2, 3, 4];
    }
    let plan = MaskPlan { indices: mask.clone(), len: FRAMES };
    let mut swap = make_swap_plan(&plan, 0.3, &mut rng).indices;
    if swap.is_empty() {
        swap = (0..FRAMES).filter(|i| !mask.contains(i)).take(2).collect();
    }
    let text_units: Vec<usize> = (0..FRAMES).map(|_| rng.random_range(0..5)).collect();
    let text_mask = make_mask_plan(FRAMES, 0.1, 3, &mut rng).indices;
    Instance {
        stacked: stack_frames(&feats, 1),
        units,
        mask,
        swap,
        text_units,
        text_mask,
        target: vec![1, 2, 2, 3],
    }
}

fn as_numerics(e: ModelError) -> NumericsError {
    match e {
        ModelError::Numerics(n) => n,
        other => NumericsError::Infeasible {
            kernel: "model",
            reason: other.to_string(),
        },
    }
}

/// Loss terms checked over all parameters of [`toy_model`].
pub const MODEL_LOSSES: [&str; 4] = ["umlm", "uctc", "joint", "speech_ctc"];

fn model_loss(tape: &mut Tape<f64>, p: &Bound, cfg: &ModelConfig, inst: &Instance, which: &str) -> crate::model::Result<Var> {
    let segs = Segments::single(FRAMES)?;
    let targets = std::slice::from_ref(&inst.target);
    let speech = |tape: &mut Tape<f64>| {
        let batch = SpeechBatch {
            stacked: &inst.stacked,
            segs: &segs,
            units: &inst.units,
            mask: &inst.mask,
            swap: &inst.swap,
        };
        let s = speech_pass(tape, p, cfg, batch, None)?;
        Ok::<_, ModelError>(tape.add(s.umlm.half, s.umlm.full)?)
    };
    let text = |tape: &mut Tape<f64>| {
        Ok::<_, ModelError>(text_pass(tape, p, cfg, &inst.text_units, &segs, &inst.text_mask, targets, None)?.loss)
    };
    Ok(match which {
        "umlm" => speech(tape)?,
        "uctc" => text(tape)?,
        "joint" => {
            let u = speech(tape)?;
            let c = text(tape)?;
            let c = tape.scale(c, 0.1)?;
            tape.add(u, c)?
        }
        _ => speech_ctc_pass(tape, p, cfg, &inst.stacked, &segs, targets, None)?.loss,
    })
}

/// Whole-model losses against central differences over every parameter.
pub fn model_suite(seed: u64) -> Result<SuiteReport> {
    let cfg = toy_model();
    let params = ModelParams::<f64>::init(&cfg, seed).map_err(as_numerics)?;
    let names: Vec<String> = params.names().map(String::from).collect();
    let inputs: Vec<(&str, Array<f64>)> = params.iter().map(|(n, a)| (n, a.clone())).collect();
    let inst = instance(seed ^ 0x5eed);
    let mut report = SuiteReport::default();
    for which in MODEL_LOSSES {
        let program = |tape: &mut Tape<f64>, vars: &[Var]| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            model_loss(tape, &bound, &cfg, &inst, which).map_err(as_numerics)
        };
        let rep = finite_diff_check(program, &inputs, MODEL_STEP)?;
        report.push(format!("model/{which}"), rep.max_error());
    }
    Ok(report)
}

/// Kernels then whole-model losses.
pub fn full_suite(seed: u64) -> Result<SuiteReport> {
    let mut r = kernel_suite(seed, 10)?;
    r.rows.extend(model_suite(seed)?.rows);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_losses_match_finite_differences() {
        let r = model_suite(3).unwrap();
        assert_eq!(r.rows.len(), MODEL_LOSSES.len());
        assert!(r.passed(), "{:?}", r.rows);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // Gradient of sum(x^2) reported as x instead of 2x.
        let x = Array::from_fn(2, 2, |r, c| (r * 2 + c) as f64 * 0.3 + 0.1);
        let rep = finite_diff_check(
            |t, v| {
                let half = t.scale(v[0], 0.5)?;
                let stop = t.constant(t.value(v[0]).clone());
                let y = t.mul(half, stop)?;
                let z = t.add(y, y)?;
                t.sum(z)
            },
            &[("x", x)],
            MODEL_STEP,
        )
        .unwrap();
        assert!(rep.max_error() > 0.4);
    }
}
