use rand::Rng as _;

use super::{layer_prefix, Bound, ModelConfig, ModelError, Result};
use crate::numerics::{Array, Real, Tape, Var};
use crate::rng::rng_from;

const LN_EPS: f64 = 1e-5;

/// Item boundaries of a packed batch: items are concatenated along time so
/// padding never enters the computation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    lens: Vec<usize>,
    starts: Vec<usize>,
}

impl Segments {
    pub fn new(lens: Vec<usize>) -> Result<Self> {
        if lens.is_empty() || lens.contains(&0) {
            return Err(ModelError::EmptyInput("segments"));
        }
        let mut starts = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            starts.push(acc);
            acc += l;
        }
        Ok(Self { lens, starts })
    }

    pub fn single(len: usize) -> Result<Self> {
        Self::new(vec![len])
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.starts.iter().copied().zip(self.lens.iter().copied())
    }
}

/// Dropout stream for one forward pass. Keep masks are drawn from a stream
/// keyed by (seed, step, branch, layer, site).
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
    pub step: u64,
    pub branch: u64,
}

impl Dropout {
    fn keep_mask(&self, layer: usize, site: u64, n: usize) -> Vec<bool> {
        let mut rng = rng_from(&[self.seed, self.step, self.branch, layer as u64, site]);
        (0..n).map(|_| rng.random::<f64>() >= self.rate).collect()
    }

    fn apply<T: Real>(this: Option<&Self>, tape: &mut Tape<T>, x: Var, layer: usize, site: u64) -> Result<Var> {
        match this {
            Some(d) if d.rate > 0.0 => {
                let (r, c) = tape.shape(x);
                let keep = d.keep_mask(layer, site, r * c);
                Ok(tape.dropout(x, &keep, d.rate)?)
            }
            _ => Ok(x),
        }
    }
}

/// Concatenates groups of `stride` consecutive frames into one row; the last
/// group is zero-padded. Output has `ceil(M0 / stride)` rows.
pub fn stack_frames<T: Real>(features: &Array<T>, stride: usize) -> Array<T> {
    let (m0, d) = (features.rows(), features.cols());
    let m = m0.div_ceil(stride);
    Array::from_fn(m, d * stride, |r, c| {
        let frame = r * stride + c / d;
        if frame < m0 {
            features.get(frame, c % d)
        } else {
            T::zero()
        }
    })
}

/// Linear frame projection of stacked features.
pub fn frontend<T: Real>(tape: &mut Tape<T>, p: &Bound, stacked: Var) -> Result<Var> {
    let y = tape.matmul(stacked, p.get("frontend.w")?)?;
    Ok(tape.add_row(y, p.get("frontend.b")?)?)
}

/// Replaces the rows in `rows` by the mask embedding.
pub fn apply_mask<T: Real>(tape: &mut Tape<T>, x: Var, rows: &[usize], mask_emb: Var) -> Result<Var> {
    if rows.is_empty() {
        return Ok(x);
    }
    Ok(tape.replace_rows(x, mask_emb, rows, &vec![0; rows.len()])?)
}

/// Replaces row `rows[j]` of `h` by the embedding of `units[rows[j]]`.
pub fn apply_swap<T: Real>(tape: &mut Tape<T>, h: Var, units: &[usize], rows: &[usize], emb: Var) -> Result<Var> {
    let (m, _) = tape.shape(h);
    if units.len() != m {
        return Err(ModelError::LengthMismatch {
            what: "swap units",
            expected: m,
            got: units.len(),
        });
    }
    if rows.is_empty() {
        return Ok(h);
    }
    let src: Vec<usize> = rows.iter().map(|&r| units.get(r).copied().unwrap_or(usize::MAX)).collect();
    Ok(tape.replace_rows(h, emb, rows, &src)?)
}

pub fn embed_units<T: Real>(tape: &mut Tape<T>, emb: Var, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(ModelError::EmptyInput("embed_units"));
    }
    let size = tape.shape(emb).0;
    if let Some(&id) = ids.iter().find(|&&i| i >= size) {
        return Err(ModelError::BadUnit { id, size });
    }
    Ok(tape.gather(emb, ids)?)
}

/// Bidirectional log-spaced bucket of the offset `key - query`.
pub fn rel_bucket(rel: isize, buckets: usize, max_distance: usize) -> usize {
    let half = buckets / 2;
    let mut out = if rel > 0 { half } else { 0 };
    let n = rel.unsigned_abs();
    let exact = half / 2;
    if n < exact {
        out += n;
    } else {
        let scaled = ((n as f64 / exact as f64).ln() / (max_distance as f64 / exact as f64).ln()
            * (half - exact) as f64) as usize;
        out += (exact + scaled).min(half - 1);
    }
    out
}

/// `n x n` bucket ids, row = query, column = key.
pub fn rel_bucket_matrix(n: usize, buckets: usize, max_distance: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n * n);
    for q in 0..n {
        for k in 0..n {
            out.push(rel_bucket(k as isize - q as isize, buckets, max_distance));
        }
    }
    out
}

/// Layer norm followed by the `{prefix}.g` / `{prefix}.b` affine map.
pub fn affine_norm<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let n = tape.layer_norm_rows(x, T::of(LN_EPS))?;
    let n = tape.mul_row(n, p.get(&format!("{prefix}.g"))?)?;
    Ok(tape.add_row(n, p.get(&format!("{prefix}.b"))?)?)
}

pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => Ok(tape.add_row(y, b)?),
        None => Ok(y),
    }
}

fn attention<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    a: Var,
    segs: &Segments,
) -> Result<Var> {
    let w = |n: &str| p.get(&format!("{prefix}.attn.{n}"));
    let q = linear(tape, a, w("wq")?, Some(w("bq")?))?;
    let k = linear(tape, a, w("wk")?, None)?;
    let v = linear(tape, a, w("wv")?, Some(w("bv")?))?;
    let rel = p.get(&format!("{prefix}.rel_bias"))?;
    let dh = cfg.d_model / cfg.heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());

    let split = |tape: &mut Tape<T>, x: Var| -> Result<Vec<Var>> {
        (0..cfg.heads)
            .map(|h| Ok(tape.slice_cols(x, h * dh, dh)?))
            .collect()
    };
    let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);

    let single = segs.len() == 1;
    let mut rows = Vec::with_capacity(segs.len());
    for (start, n) in segs.iter() {
        let idx = rel_bucket_matrix(n, cfg.rel_buckets, cfg.rel_max_distance);
        let bias = tape.gather_flat(rel, &idx, n, n)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (qs, ks, vs) = if single {
                (qh[h], kh[h], vh[h])
            } else {
                (
                    tape.slice_rows(qh[h], start, n)?,
                    tape.slice_rows(kh[h], start, n)?,
                    tape.slice_rows(vh[h], start, n)?,
                )
            };
            let s = tape.matmul_t(qs, ks, false, true)?;
            let s = tape.scale(s, scale)?;
            let s = tape.add(s, bias)?;
            let att = tape.softmax_rows(s)?;
            heads.push(tape.matmul(att, vs)?);
        }
        rows.push(if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? });
    }
    let o = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
    linear(tape, o, w("wo")?, Some(w("bo")?))
}

fn block<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    prefix: &str,
    x: Var,
    segs: &Segments,
    dropout: Option<&Dropout>,
) -> Result<Var> {
    let a = affine_norm(tape, p, x, &format!("{prefix}.ln1"))?;
    let att = attention(tape, p, cfg, prefix, a, segs)?;
    let att = Dropout::apply(dropout, tape, att, layer, 0)?;
    let x = tape.add(x, att)?;

    let a = affine_norm(tape, p, x, &format!("{prefix}.ln2"))?;
    let w = |n: &str| p.get(&format!("{prefix}.ffn.{n}"));
    let f = linear(tape, a, w("w1")?, Some(w("b1")?))?;
    let f = tape.gelu(f)?;
    let f = linear(tape, f, w("w2")?, Some(w("b2")?))?;
    let f = Dropout::apply(dropout, tape, f, layer, 1)?;
    Ok(tape.add(x, f)?)
}

/// Applies pre-norm blocks named by `prefixes` in order; `first_layer` offsets
/// the layer index used to key dropout streams.
#[allow(clippy::too_many_arguments)]
pub fn run_blocks<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    prefixes: &[String],
    first_layer: usize,
    x: Var,
    segs: &Segments,
    dropout: Option<&Dropout>,
) -> Result<Vec<Var>> {
    if tape.shape(x).0 != segs.total() {
        return Err(ModelError::LengthMismatch {
            what: "encoder input rows",
            expected: segs.total(),
            got: tape.shape(x).0,
        });
    }
    let mut outs = Vec::with_capacity(prefixes.len());
    let mut h = x;
    for (i, prefix) in prefixes.iter().enumerate() {
        h = block(tape, p, cfg, first_layer + i, prefix, h, segs, dropout)?;
        outs.push(h);
    }
    Ok(outs)
}

fn encode_range<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    layers: std::ops::Range<usize>,
    x: Var,
    segs: &Segments,
    dropout: Option<&Dropout>,
) -> Result<Vec<Var>> {
    let first = layers.start;
    let prefixes: Vec<String> = layers.map(|l| layer_prefix(l, cfg)).collect();
    run_blocks(tape, p, cfg, &prefixes, first, x, segs, dropout)
}

/// Speech stack (layers `0..L/2`); returns the output of every layer, the last
/// being H^{L/2}.
pub fn encode_speech<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    x: Var,
    segs: &Segments,
    dropout: Option<&Dropout>,
) -> Result<Vec<Var>> {
    encode_range(tape, p, cfg, 0..cfg.half(), x, segs, dropout)
}

/// Shared stack (layers `L/2..L`), used by both modalities; returns the
/// residual stream after every layer.
pub fn encode_shared<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    x: Var,
    segs: &Segments,
    dropout: Option<&Dropout>,
) -> Result<Vec<Var>> {
    encode_range(tape, p, cfg, cfg.half()..cfg.layers, x, segs, dropout)
}

/// Final layer norm of the shared stack; its output is H^L.
pub fn final_norm<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
    affine_norm(tape, p, x, "shared.ln_f")
}

/// Width-2 causal convolution (one frame of left zero padding per item),
/// then a projection to characters plus blank.
pub fn ctc_head_logits<T: Real>(tape: &mut Tape<T>, p: &Bound, h: Var, segs: &Segments) -> Result<Var> {
    let prev = tape.shift_down(h, segs.starts())?;
    let a = tape.matmul(prev, p.get("ctc.conv.w0")?)?;
    let b = tape.matmul(h, p.get("ctc.conv.w1")?)?;
    let c = tape.add(a, b)?;
    let c = tape.add_row(c, p.get("ctc.conv.b")?)?;
    linear(tape, c, p.get("ctc.out.w")?, Some(p.get("ctc.out.b")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_mask_plan, make_swap_plan, ModelParams};
    use crate::rng::rng_from;

    fn tiny() -> ModelConfig {
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
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn features(m: usize, d: usize, seed: u64) -> Array<f64> {
        let mut rng = rng_from(&[seed]);
        Array::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn frontend_shapes_and_linearity() {
        let f = features(80, 3, 1);
        assert_eq!(stack_frames(&f, 1).rows(), 80);
        assert_eq!(stack_frames(&f, 2).rows(), 40);
        assert_eq!(stack_frames(&features(81, 3, 1), 2).rows(), 41);

        let cfg = tiny();
        let mut params = ModelParams::<f64>::init(&cfg, 1).unwrap();
        params.get_mut("frontend.w").unwrap().data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let x = tape.constant(stack_frames(&f, 1));
        let y = frontend(&mut tape, &p, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_and_swap_touch_only_planned_rows() {
        let cfg = tiny();
        let params = ModelParams::<f64>::init(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let x0 = features(30, 8, 3);
        let x = tape.constant(x0.clone());
        let mut rng = rng_from(&[4]);
        let plan = make_mask_plan(30, 0.1, 5, &mut rng);
        let emb = p.get("mask_emb").unwrap();
        let xm = apply_mask(&mut tape, x, &plan.indices, emb).unwrap();
        let mask_row = params.get("mask_emb").unwrap().row(0).to_vec();
        let flags = plan.flags();
        for r in 0..30 {
            let row = tape.value(xm).row(r);
            if flags[r] {
                assert_eq!(row, &mask_row[..]);
            } else {
                assert_eq!(row, x0.row(r));
            }
        }
        let empty = apply_mask(&mut tape, x, &[], emb).unwrap();
        assert_eq!(tape.value(empty), &x0);

        let units: Vec<usize> = (0..30).map(|i| i % 5).collect();
        let swap = make_swap_plan(&plan, 0.5, &mut rng);
        let table = p.get("units.emb").unwrap();
        let hs = apply_swap(&mut tape, x, &units, &swap.indices, table).unwrap();
        for r in 0..30 {
            let row = tape.value(hs).row(r);
            if swap.indices.contains(&r) {
                assert_eq!(row, params.get("units.emb").unwrap().row(units[r]));
            } else {
                assert_eq!(row, x0.row(r));
            }
        }
        assert!(apply_swap(&mut tape, x, &units[..29], &swap.indices, table).is_err());
    }

    #[test]
    fn relative_buckets_depend_only_on_offset() {
        let n = 40;
        let m = rel_bucket_matrix(n, 16, 64);
        for q in 1..n {
            for k in 1..n {
                assert_eq!(m[q * n + k], m[(q - 1) * n + (k - 1)]);
            }
        }
        assert_eq!(rel_bucket(0, 16, 64), 0);
        assert_ne!(rel_bucket(3, 16, 64), rel_bucket(-3, 16, 64));
        assert!(m.iter().all(|&b| b < 16));
        assert_eq!(rel_bucket(1000, 16, 64), 15);
    }

    #[test]
    fn embedding_rows_and_bad_ids() {
        let cfg = tiny();
        let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let emb = p.get("units.emb").unwrap();
        let u = embed_units(&mut tape, emb, &[0, 3, 3]).unwrap();
        let table = params.get("units.emb").unwrap();
        assert_eq!(tape.value(u).row(0), table.row(0));
        assert_eq!(tape.value(u).row(1), tape.value(u).row(2));
        assert!(matches!(
            embed_units(&mut tape, emb, &[5]),
            Err(ModelError::BadUnit { id: 5, size: 5 })
        ));
    }

    #[test]
    fn ctc_head_receptive_field_and_zero_weights() {
        let cfg = tiny();
        let params = ModelParams::<f64>::init(&cfg, 6).unwrap();
        let h0 = features(10, 8, 7);
        let mut h1 = h0.clone();
        h1.row_mut(6).iter_mut().for_each(|v| *v += 1.0);
        let run = |h: &Array<f64>, params: &ModelParams<f64>| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, |_| false);
            let x = tape.constant(h.clone());
            let y = ctc_head_logits(&mut tape, &p, x, &Segments::single(10).unwrap()).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(&h0, &params), run(&h1, &params));
        assert_eq!(a.rows(), 10);
        for t in 0..10 {
            assert_eq!(a.row(t) == b.row(t), !(t == 6 || t == 7), "frame {t}");
        }
        let mut zero = params.clone();
        for (name, arr) in zero.iter_mut() {
            if name.starts_with("ctc.") {
                arr.data_mut().fill(0.0);
            }
        }
        assert!(run(&h0, &zero).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn packed_items_are_independent() {
        let cfg = tiny();
        let params = ModelParams::<f64>::init(&cfg, 8).unwrap();
        let (a, b) = (features(7, 8, 9), features(5, 8, 10));
        let run = |parts: &[&Array<f64>]| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, |_| false);
            let vars: Vec<Var> = parts.iter().map(|x| tape.constant((*x).clone())).collect();
            let x = if vars.len() == 1 { vars[0] } else { tape.concat_rows(&vars).unwrap() };
            let segs = Segments::new(parts.iter().map(|x| x.rows()).collect()).unwrap();
            let hs = encode_speech(&mut tape, &p, &cfg, x, &segs, None).unwrap();
            let hl = encode_shared(&mut tape, &p, &cfg, *hs.last().unwrap(), &segs, None).unwrap();
            let out = ctc_head_logits(&mut tape, &p, *hl.last().unwrap(), &segs).unwrap();
            tape.value(out).clone()
        };
        let both = run(&[&a, &b]);
        let alone = run(&[&a]);
        assert_eq!(both.rows(), 12);
        for r in 0..7 {
            assert!(both.row(r).iter().zip(alone.row(r)).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn dropout_stream_is_reproducible() {
        let cfg = ModelConfig { dropout: 0.3, ..tiny() };
        let params = ModelParams::<f64>::init(&cfg, 11).unwrap();
        let x0 = features(9, 8, 12);
        let run = |step: u64| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, |_| false);
            let x = tape.constant(x0.clone());
            let d = Dropout { rate: 0.3, seed: 1, step, branch: 0 };
            let hs = encode_speech(&mut tape, &p, &cfg, x, &Segments::single(9).unwrap(), Some(&d)).unwrap();
            tape.value(*hs.last().unwrap()).clone()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
