use super::{Array, NumericsError, Real, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    MulRow {
        a: Var,
        row: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    Softmax(Var),
    LayerNorm {
        a: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    GatherFlat {
        src: Var,
        idx: Vec<usize>,
    },
    Cosine {
        a: Var,
        b: Var,
        a_norm: Vec<T>,
        b_norm: Vec<T>,
        a_floored: Vec<bool>,
        b_floored: Vec<bool>,
    },
    LogSumExp {
        a: Var,
        probs: Vec<T>,
    },
    MaskedXent {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
    },
    Dropout {
        a: Var,
        keep: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    ReplaceRows {
        base: Var,
        src: Var,
        base_idx: Vec<usize>,
        src_idx: Vec<usize>,
    },
    ShiftDown {
        a: Var,
        starts: Vec<usize>,
    },
    Sum(Var),
    /// Scalar with a precomputed local gradient (used for the CTC recursion).
    ScalarWithGrad {
        a: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    needs_grad: bool,
    kernel: &'static str,
}

/// Records kernel applications in evaluation order for reverse-mode differentiation.
///
/// A tape is single-threaded and owns every intermediate value; build a fresh
/// tape per forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulated gradients, indexed by the [`Var`] of each recorded value.
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; exactly zero if `v` did not participate.
    pub fn get(&self, v: Var) -> Array<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let s = &self.shapes[v.0];
                Array::new(s.clone(), vec![T::zero(); s.iter().product()]).expect("valid shape")
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Array<T>> {
        self.grads[v.0].take()
    }
}

fn dims<T: Real>(a: &Array<T>) -> (usize, usize) {
    (a.rows(), a.cols())
}

fn mismatch<T: Real>(kernel: &'static str, arrays: &[&Array<T>]) -> NumericsError {
    NumericsError::ShapeMismatch {
        kernel,
        shapes: arrays.iter().map(|a| a.shape().to_vec()).collect(),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; libm's `tanhf` costs several times more.
fn fast_tanh<T: Real>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, kernel: &'static str, value: Array<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(kernel));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            kernel,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Gradients are tracked iff `value.requires_grad()`.
    pub fn leaf(&mut self, value: Array<T>) -> Var {
        let needs_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            kernel: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.leaf(value.with_grad(false))
    }

    pub fn param(&mut self, value: Array<T>) -> Var {
        self.leaf(value.with_grad(true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ar, ac) = dims(av);
        let (br, bc) = dims(bv);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", &[av, bv]));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), trans_a, bv.data(), trans_b, &mut out, false);
        let value = Array::matrix(m, n, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        )
    }

    fn zip_same(&mut self, kernel: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Array<T>> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(mismatch(kernel, &[av, bv]));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let (r, c) = dims(av);
        if dims(rv) != (1, c) {
            return Err(mismatch("add_row", &[av, rv]));
        }
        let mut data = av.data().to_vec();
        for i in 0..r {
            add_into(&mut data[i * c..(i + 1) * c], rv.data());
        }
        let v = Array::matrix(r, c, data)?;
        self.push("add_row", v, Op::AddRow { a, row }, &[a, row])
    }

    /// Multiplies every row of an `r x c` matrix elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let (r, c) = dims(av);
        if dims(rv) != (1, c) {
            return Err(mismatch("mul_row", &[av, rv]));
        }
        let mut data = av.data().to_vec();
        for i in 0..r {
            for (x, &g) in data[i * c..(i + 1) * c].iter_mut().zip(rv.data()) {
                *x *= g;
            }
        }
        let v = Array::matrix(r, c, data)?;
        self.push("mul_row", v, Op::MulRow { a, row }, &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let v = Array::new(av.shape().to_vec(), av.data().iter().map(|&x| x * s).collect())?;
        self.push("scale", v, Op::Scale { a, s }, &[a])
    }

    /// Row softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = dims(av);
        let mut data = av.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut data[i * c..(i + 1) * c]);
        }
        let v = Array::matrix(r, c, data)?;
        self.push("softmax", v, Op::Softmax(a), &[a])
    }

    /// Row layer normalization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = dims(av);
        let n = T::of(c as f64);
        let mut xhat = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut xhat[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let v = Array::matrix(r, c, xhat.clone())?;
        self.push("layer_norm", v, Op::LayerNorm { a, xhat, inv_std }, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let data = av
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + fast_tanh(c * (x + k * x * x * x))))
            .collect();
        let v = Array::new(av.shape().to_vec(), data)?;
        self.push("gelu", v, Op::Gelu(a), &[a])
    }

    /// Row gather: output row `k` is `table[ids[k]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let (r, c) = dims(tv);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(NumericsError::IndexOutOfRange {
                    kernel: "gather",
                    index: id,
                    bound: r,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        if ids.is_empty() {
            return Err(mismatch("gather", &[tv]));
        }
        let v = Array::matrix(ids.len(), c, data)?;
        self.push(
            "gather",
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Element gather from the flattened source into a `rows x cols` result.
    pub fn gather_flat(&mut self, src: Var, idx: &[usize], rows: usize, cols: usize) -> Result<Var> {
        let sv = &self.nodes[src.0].value;
        if idx.len() != rows * cols {
            return Err(mismatch("gather_flat", &[sv]));
        }
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= sv.len() {
                return Err(NumericsError::IndexOutOfRange {
                    kernel: "gather_flat",
                    index: i,
                    bound: sv.len(),
                });
            }
            data.push(sv.data()[i]);
        }
        let v = Array::matrix(rows, cols, data)?;
        self.push(
            "gather_flat",
            v,
            Op::GatherFlat {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        )
    }

    /// `out[i, j] = cos(a_i, b_j)` with each norm floored at `eps`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, d) = dims(av);
        let (n, d2) = dims(bv);
        if d != d2 {
            return Err(mismatch("cosine", &[av, bv]));
        }
        let norms = |x: &Array<T>, rows: usize| -> (Vec<T>, Vec<bool>) {
            (0..rows)
                .map(|i| {
                    let nrm = x.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
                    if nrm > eps {
                        (nrm, false)
                    } else {
                        (eps, true)
                    }
                })
                .unzip()
        };
        let (a_norm, a_floored) = norms(av, m);
        let (b_norm, b_floored) = norms(bv, n);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, d, n, av.data(), false, bv.data(), true, &mut out, false);
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = out[i * n + j] / (a_norm[i] * b_norm[j]);
            }
        }
        let v = Array::matrix(m, n, out)?;
        self.push(
            "cosine",
            v,
            Op::Cosine {
                a,
                b,
                a_norm,
                b_norm,
                a_floored,
                b_floored,
            },
            &[a, b],
        )
    }

    /// Row log-sum-exp, `r x c -> r x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = dims(av);
        let mut probs = av.data().to_vec();
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut probs[i * c..(i + 1) * c];
            out.push(log_sum_exp(row));
            softmax_in_place(row);
        }
        let v = Array::matrix(r, 1, out)?;
        self.push("logsumexp", v, Op::LogSumExp { a, probs }, &[a])
    }

    /// Sum over rows with `mask[i]` of `-log softmax(logits_i)[targets[i]]`.
    pub fn masked_xent(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let (r, c) = dims(lv);
        if targets.len() != r || mask.len() != r {
            return Err(mismatch("masked_xent", &[lv]));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            if targets[i] >= c {
                return Err(NumericsError::IndexOutOfRange {
                    kernel: "masked_xent",
                    index: targets[i],
                    bound: c,
                });
            }
            let row = &mut probs[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            total += lse - row[targets[i]];
            softmax_in_place(row);
        }
        let v = Array::scalar(total);
        self.push(
            "masked_xent",
            v,
            Op::MaskedXent {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Inverted dropout with an explicit keep mask (`keep[i]` is 0 or 1).
    pub fn dropout(&mut self, a: Var, keep_mask: &[bool], rate: f64) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if keep_mask.len() != av.len() {
            return Err(mismatch("dropout", &[av]));
        }
        let s = T::of(1.0 / (1.0 - rate));
        let keep: Vec<T> = keep_mask.iter().map(|&k| if k { s } else { T::zero() }).collect();
        let data = av.data().iter().zip(&keep).map(|(&x, &k)| x * k).collect();
        let v = Array::new(av.shape().to_vec(), data)?;
        self.push("dropout", v, Op::Dropout { a, keep }, &[a])
    }

    /// Concatenation along time (rows).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = &self.nodes[parts.first().expect("non-empty concat").0].value;
        let c = first.cols();
        let mut data = Vec::new();
        let mut r = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.cols() != c {
                return Err(mismatch("concat_rows", &[first, pv]));
            }
            r += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let v = Array::matrix(r, c, data)?;
        self.push("concat_rows", v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = dims(av);
        if len == 0 || start + len > r {
            return Err(mismatch("slice_rows", &[av]));
        }
        let v = Array::matrix(len, c, av.data()[start * c..(start + len) * c].to_vec())?;
        self.push("slice_rows", v, Op::SliceRows { a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = &self.nodes[parts.first().expect("non-empty concat").0].value;
        let r = first.rows();
        let mut total_c = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.rows() != r {
                return Err(mismatch("concat_cols", &[first, pv]));
            }
            total_c += pv.cols();
        }
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let v = Array::matrix(r, total_c, data)?;
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = dims(av);
        if len == 0 || start + len > c {
            return Err(mismatch("slice_cols", &[av]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let v = Array::matrix(r, len, data)?;
        self.push("slice_cols", v, Op::SliceCols { a, start }, &[a])
    }

    /// Copy of `base` with row `base_idx[k]` replaced by `src[src_idx[k]]`.
    /// Rows not listed in `base_idx` are copied bit-for-bit.
    pub fn replace_rows(&mut self, base: Var, src: Var, base_idx: &[usize], src_idx: &[usize]) -> Result<Var> {
        let (bv, sv) = (&self.nodes[base.0].value, &self.nodes[src.0].value);
        let (r, c) = dims(bv);
        if sv.cols() != c || base_idx.len() != src_idx.len() {
            return Err(mismatch("replace_rows", &[bv, sv]));
        }
        let mut data = bv.data().to_vec();
        let mut seen = vec![false; r];
        for (&bi, &si) in base_idx.iter().zip(src_idx) {
            if bi >= r || seen[bi] {
                return Err(NumericsError::IndexOutOfRange {
                    kernel: "replace_rows",
                    index: bi,
                    bound: r,
                });
            }
            if si >= sv.rows() {
                return Err(NumericsError::IndexOutOfRange {
                    kernel: "replace_rows",
                    index: si,
                    bound: sv.rows(),
                });
            }
            seen[bi] = true;
            data[bi * c..(bi + 1) * c].copy_from_slice(sv.row(si));
        }
        let v = Array::matrix(r, c, data)?;
        self.push(
            "replace_rows",
            v,
            Op::ReplaceRows {
                base,
                src,
                base_idx: base_idx.to_vec(),
                src_idx: src_idx.to_vec(),
            },
            &[base, src],
        )
    }

    /// Shifts rows down by one within each segment; the first row of every
    /// segment (listed in `starts`) becomes zero.
    pub fn shift_down(&mut self, a: Var, starts: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = dims(av);
        let mut is_start = vec![false; r];
        for &s in starts {
            if s >= r {
                return Err(NumericsError::IndexOutOfRange {
                    kernel: "shift_down",
                    index: s,
                    bound: r,
                });
            }
            is_start[s] = true;
        }
        is_start[0] = true;
        let mut data = vec![T::zero(); r * c];
        for t in 0..r {
            if !is_start[t] {
                data[t * c..(t + 1) * c].copy_from_slice(av.row(t - 1));
            }
        }
        let v = Array::matrix(r, c, data)?;
        let starts = (0..r).filter(|&t| is_start[t]).collect();
        self.push("shift_down", v, Op::ShiftDown { a, starts }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.nodes[a.0].value.data().iter().copied().sum();
        self.push("sum", Array::scalar(total), Op::Sum(a), &[a])
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to `a`.
    pub fn scalar_with_grad(&mut self, kernel: &'static str, a: Var, value: T, grad: Vec<T>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if grad.len() != av.len() {
            return Err(mismatch(kernel, &[av]));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NumericsError::NonFinite(kernel));
        }
        self.push(kernel, Array::scalar(value), Op::ScalarWithGrad { a, grad }, &[a])
    }

    /// Reverse sweep from a scalar output. Each recorded operation is visited once.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(NumericsError::NonScalarOutput(out.shape().to_vec()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| Array::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
            })
            .chain((n..self.nodes.len()).map(|_| None))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, d: Vec<T>| {
            match &mut grads[v.0] {
                Some(existing) => add_into(existing, &d),
                slot @ None => *slot = Some(d),
            };
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (av, bv) = (val(a), val(b));
                let (m, n) = dims(&node.value);
                let k = if trans_a { av.rows() } else { av.cols() };
                if wants(a) {
                    let mut da = vec![T::zero(); av.len()];
                    if trans_a {
                        // a is k x m: da = op(b) * g^T
                        T::gemm(k, n, m, bv.data(), trans_b, g, true, &mut da, false);
                    } else {
                        // a is m x k: da = g * op(b)^T
                        T::gemm(m, n, k, g, false, bv.data(), !trans_b, &mut da, false);
                    }
                    acc(a, da);
                }
                if wants(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    if trans_b {
                        // b is n x k: db = g^T * op(a)
                        T::gemm(n, m, k, g, true, av.data(), trans_a, &mut db, false);
                    } else {
                        // b is k x n: db = op(a)^T * g
                        T::gemm(k, m, n, av.data(), !trans_a, g, false, &mut db, false);
                    }
                    acc(b, db);
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    acc(a, g.to_vec());
                }
                if wants(b) {
                    acc(b, g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    acc(a, g.to_vec());
                }
                if wants(b) {
                    acc(b, g.iter().map(|&x| -x).collect());
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    acc(a, g.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect());
                }
                if wants(b) {
                    acc(b, g.iter().zip(av.data()).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::AddRow { a, row } => {
                let (r, c) = dims(&node.value);
                if wants(a) {
                    acc(a, g.to_vec());
                }
                if wants(row) {
                    let mut dr = vec![T::zero(); c];
                    for t in 0..r {
                        add_into(&mut dr, &g[t * c..(t + 1) * c]);
                    }
                    acc(row, dr);
                }
            }
            &Op::MulRow { a, row } => {
                let (r, c) = dims(&node.value);
                let (av, rv) = (val(a), val(row));
                if wants(a) {
                    let mut da = g.to_vec();
                    for t in 0..r {
                        for (x, &s) in da[t * c..(t + 1) * c].iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    acc(a, da);
                }
                if wants(row) {
                    let mut dr = vec![T::zero(); c];
                    for t in 0..r {
                        for j in 0..c {
                            dr[j] += g[t * c + j] * av.data()[t * c + j];
                        }
                    }
                    acc(row, dr);
                }
            }
            &Op::Scale { a, s } => acc(a, g.iter().map(|&x| x * s).collect()),
            &Op::Softmax(a) => {
                let (r, c) = dims(&node.value);
                let y = node.value.data();
                let mut da = vec![T::zero(); r * c];
                for t in 0..r {
                    let (yr, gr) = (&y[t * c..(t + 1) * c], &g[t * c..(t + 1) * c]);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        da[t * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(a, da);
            }
            Op::LayerNorm { a, xhat, inv_std } => {
                let (r, c) = dims(&node.value);
                let n = T::of(c as f64);
                let mut da = vec![T::zero(); r * c];
                for t in 0..r {
                    let (xr, gr) = (&xhat[t * c..(t + 1) * c], &g[t * c..(t + 1) * c]);
                    let sg: T = gr.iter().copied().sum();
                    let sgx: T = gr.iter().zip(xr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        da[t * c + j] = inv_std[t] / n * (n * gr[j] - sg - xr[j] * sgx);
                    }
                }
                acc(*a, da);
            }
            &Op::Gelu(a) => {
                let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                let half = T::of(0.5);
                let three = T::of(3.0);
                let da = val(a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let th = fast_tanh(c * (x + k * x * x * x));
                        let d = half * (T::one() + th)
                            + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
                        gy * d
                    })
                    .collect();
                acc(a, da);
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let c = tv.cols();
                let mut dt = vec![T::zero(); tv.len()];
                for (k, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * c..(id + 1) * c], &g[k * c..(k + 1) * c]);
                }
                acc(*table, dt);
            }
            Op::GatherFlat { src, idx } => {
                let mut ds = vec![T::zero(); val(*src).len()];
                for (k, &i) in idx.iter().enumerate() {
                    ds[i] += g[k];
                }
                acc(*src, ds);
            }
            Op::Cosine {
                a,
                b,
                a_norm,
                b_norm,
                a_floored,
                b_floored,
            } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, n) = dims(&node.value);
                let d = av.cols();
                let cosv = node.value.data();
                // gs[i,j] = g[i,j] / (|a_i| |b_j|)
                let mut gs = vec![T::zero(); m * n];
                let mut row_gc = vec![T::zero(); m];
                let mut col_gc = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        gs[i * n + j] = gij / (a_norm[i] * b_norm[j]);
                        row_gc[i] += gij * cosv[i * n + j];
                        col_gc[j] += gij * cosv[i * n + j];
                    }
                }
                if wants(*a) {
                    let mut da = vec![T::zero(); m * d];
                    T::gemm(m, n, d, &gs, false, bv.data(), false, &mut da, false);
                    for i in 0..m {
                        if a_floored[i] {
                            continue;
                        }
                        let s = row_gc[i] / (a_norm[i] * a_norm[i]);
                        for (x, &ai) in da[i * d..(i + 1) * d].iter_mut().zip(av.row(i)) {
                            *x -= s * ai;
                        }
                    }
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); n * d];
                    T::gemm(n, m, d, &gs, true, av.data(), false, &mut db, false);
                    for j in 0..n {
                        if b_floored[j] {
                            continue;
                        }
                        let s = col_gc[j] / (b_norm[j] * b_norm[j]);
                        for (x, &bj) in db[j * d..(j + 1) * d].iter_mut().zip(bv.row(j)) {
                            *x -= s * bj;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::LogSumExp { a, probs } => {
                let c = val(*a).cols();
                let da = probs.iter().enumerate().map(|(k, &p)| p * g[k / c]).collect();
                acc(*a, da);
            }
            Op::MaskedXent {
                logits,
                targets,
                mask,
                probs,
            } => {
                let c = val(*logits).cols();
                let mut dl = vec![T::zero(); probs.len()];
                for (t, (&on, &tgt)) in mask.iter().zip(targets).enumerate() {
                    if !on {
                        continue;
                    }
                    for j in 0..c {
                        dl[t * c + j] = g[0] * probs[t * c + j];
                    }
                    dl[t * c + tgt] -= g[0];
                }
                acc(*logits, dl);
            }
            Op::Dropout { a, keep } => acc(*a, g.iter().zip(keep).map(|(&x, &k)| x * k).collect()),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        acc(p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            &Op::SliceRows { a, start } => {
                let av = val(a);
                let c = av.cols();
                let mut da = vec![T::zero(); av.len()];
                da[start * c..start * c + g.len()].copy_from_slice(g);
                acc(a, da);
            }
            Op::ConcatCols(parts) => {
                let (r, total_c) = dims(&node.value);
                let mut off = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if wants(p) {
                        let mut dp = Vec::with_capacity(r * pc);
                        for t in 0..r {
                            dp.extend_from_slice(&g[t * total_c + off..t * total_c + off + pc]);
                        }
                        acc(p, dp);
                    }
                    off += pc;
                }
            }
            &Op::SliceCols { a, start } => {
                let av = val(a);
                let (r, c) = dims(av);
                let len = node.value.cols();
                let mut da = vec![T::zero(); r * c];
                for t in 0..r {
                    da[t * c + start..t * c + start + len].copy_from_slice(&g[t * len..(t + 1) * len]);
                }
                acc(a, da);
            }
            Op::ReplaceRows {
                base,
                src,
                base_idx,
                src_idx,
            } => {
                let c = node.value.cols();
                if wants(*base) {
                    let mut db = g.to_vec();
                    for &bi in base_idx {
                        db[bi * c..(bi + 1) * c].iter_mut().for_each(|x| *x = T::zero());
                    }
                    acc(*base, db);
                }
                if wants(*src) {
                    let mut ds = vec![T::zero(); val(*src).len()];
                    for (&bi, &si) in base_idx.iter().zip(src_idx) {
                        add_into(&mut ds[si * c..(si + 1) * c], &g[bi * c..(bi + 1) * c]);
                    }
                    acc(*src, ds);
                }
            }
            Op::ShiftDown { a, starts } => {
                let (r, c) = dims(&node.value);
                let mut is_start = vec![false; r];
                for &s in starts {
                    is_start[s] = true;
                }
                let mut da = vec![T::zero(); r * c];
                for t in 1..r {
                    if !is_start[t] {
                        da[(t - 1) * c..t * c].copy_from_slice(&g[t * c..(t + 1) * c]);
                    }
                }
                acc(*a, da);
            }
            &Op::Sum(a) => acc(a, vec![g[0]; val(a).len()]),
            Op::ScalarWithGrad { a, grad } => acc(*a, grad.iter().map(|&x| x * g[0]).collect()),
        }
        let _ = node.kernel;
        Ok(())
    }

    /// Name of the kernel that produced `v`.
    pub fn kernel_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].kernel
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}
