use rand::Rng;

/// Masked frame indices ℳ of one sequence, sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskPlan {
    pub indices: Vec<usize>,
    pub len: usize,
}

impl MaskPlan {
    pub fn empty(len: usize) -> Self {
        Self { indices: Vec::new(), len }
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.len];
        for &i in &self.indices {
            f[i] = true;
        }
        f
    }
}

/// Swap indices ℛ of one sequence, disjoint from its mask plan.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SwapPlan {
    pub indices: Vec<usize>,
}

/// Span masking: every frame starts a span of `mask_len` with probability
/// `mask_prob`; the plan is the union of the spans.
///
/// If no start is drawn but a span fits, one start is drawn uniformly so that
/// every sequence of at least `mask_len` frames contributes masked targets.
pub fn make_mask_plan(len: usize, mask_prob: f64, mask_len: usize, rng: &mut impl Rng) -> MaskPlan {
    let mut flags = vec![false; len];
    let mut any = false;
    for s in 0..len {
        if mask_prob > 0.0 && rng.random_bool(mask_prob) {
            any = true;
            flags[s..(s + mask_len).min(len)].iter_mut().for_each(|f| *f = true);
        }
    }
    if !any && mask_prob > 0.0 && len >= mask_len && mask_len > 0 {
        let s = rng.random_range(0..=len - mask_len);
        flags[s..s + mask_len].iter_mut().for_each(|f| *f = true);
    }
    MaskPlan {
        indices: (0..len).filter(|&i| flags[i]).collect(),
        len,
    }
}

/// Each unmasked index joins ℛ independently with probability `swap_prob`.
pub fn make_swap_plan(mask: &MaskPlan, swap_prob: f64, rng: &mut impl Rng) -> SwapPlan {
    let masked = mask.flags();
    let indices = (0..mask.len)
        .filter(|&i| !masked[i] && swap_prob > 0.0 && rng.random_bool(swap_prob))
        .collect();
    SwapPlan { indices }
}
