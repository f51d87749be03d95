use std::fmt::Write as _;

use super::data::pack_speech;
use super::{Result, SpeechItem, TrainError};
use crate::model::{speech_pass, ModelConfig, ModelParams, SpeechBatch};
use crate::numerics::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub layer: usize,
    /// `speech` for a frame representation, `unit` for the embedding of its unit.
    pub modality: &'static str,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    /// Mean cosine between frame representation and unit embedding, per layer.
    pub layers: Vec<(usize, f64)>,
    pub rows: Vec<ProbeRow>,
}

impl ProbeResult {
    pub fn score(&self, layer: usize) -> Option<f64> {
        self.layers.iter().find(|(l, _)| *l == layer).map(|&(_, c)| c)
    }

    /// Tab-separated projection table with a header row.
    pub fn table(&self) -> String {
        let mut s = String::from("layer\tmodality\tx\ty\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}", r.layer, r.modality, r.x, r.y);
        }
        s
    }

    pub fn scores_table(&self) -> String {
        let mut s = String::from("layer\tmean_cosine\n");
        for (l, c) in &self.layers {
            let _ = writeln!(s, "{l}\t{c:.6}");
        }
        s
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Layer-wise alignment between speech frames and the unit embeddings.
///
/// Layer `L/2` is the input of the shared stack; layer `l > L/2` is the
/// residual stream after shared block `l`. No masking; with `collapse` every
/// frame is swapped for its unit embedding. `points` frames, evenly spaced
/// over the items, are projected to 2-D per layer together with their unit
/// embeddings.
pub fn alignment_probe(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    items: &[SpeechItem],
    collapse: bool,
    points: usize,
) -> Result<ProbeResult> {
    if items.is_empty() {
        return Err(TrainError::EmptySplit("probe".into()));
    }
    let refs: Vec<&SpeechItem> = items.iter().collect();
    let packed = pack_speech(&refs)?;
    let total = packed.segs.total();
    let swap: Vec<usize> = if collapse { (0..total).collect() } else { Vec::new() };
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
            mask: &[],
            swap: &swap,
        },
        None,
    )?;
    let emb = params.get("units.emb")?;
    let emb_row = |u: usize| -> Vec<f64> { emb.row(u).iter().map(|&x| x as f64).collect() };
    let mut reps = vec![(model.half(), sp.shared_in)];
    for (i, &v) in sp.shared.iter().enumerate() {
        reps.push((model.half() + i + 1, v));
    }
    let points = points.min(total);
    let sample: Vec<usize> = (0..points).map(|i| i * total / points.max(1)).collect();
    let mut layers = Vec::with_capacity(reps.len());
    let mut rows = Vec::new();
    for (layer, v) in reps {
        let h = tape.value(v);
        let row = |t: usize| -> Vec<f64> { h.row(t).iter().map(|&x| x as f64).collect() };
        let mean = (0..total).map(|t| cosine(&row(t), &emb_row(packed.units[t]))).sum::<f64>() / total as f64;
        layers.push((layer, mean));
        if points > 0 {
            let mut pts: Vec<Vec<f64>> = sample.iter().map(|&t| row(t)).collect();
            pts.extend(sample.iter().map(|&t| emb_row(packed.units[t])));
            let xy = pca_2d(&pts);
            for (k, (x, y)) in xy.into_iter().enumerate() {
                rows.push(ProbeRow {
                    layer,
                    modality: if k < points { "speech" } else { "unit" },
                    x,
                    y,
                });
            }
        }
    }
    Ok(ProbeResult { layers, rows })
}

/// Projection of centered points on the top two principal directions,
/// found by power iteration with deflation. Each direction's sign is fixed so
/// its largest-magnitude coordinate is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for p in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += p[i] * p[j];
            }
        }
    }
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for k in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i + k) % 3) as f64 * 0.1).collect();
        for _ in 0..500 {
            let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum()).collect();
            for u in &dirs {
                let dot: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        let big = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        dirs.push(v);
    }
    centered
        .iter()
        .map(|p| {
            let x = p.iter().zip(&dirs[0]).map(|(a, b)| a * b).sum();
            let y = p.iter().zip(&dirs[1]).map(|(a, b)| a * b).sum();
            (x, y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::numerics::Array;
    use crate::rng::rng_from;

    fn items(cfg: &ModelConfig, n: usize) -> Vec<SpeechItem> {
        let mut rng = rng_from(&[9]);
        (0..n)
            .map(|_| {
                let len = rng.random_range(20..40);
                let units: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.units)).collect();
                let feats = Array::from_fn(len, cfg.feat_dim, |r, _| {
                    let z: f64 = rng.sample(StandardNormal);
                    units[r] as f32 + 0.1 * z as f32
                });
                SpeechItem::new(&feats, &units, vec![2, 3], 1).unwrap()
            })
            .collect()
    }

    #[test]
    fn random_model_is_near_orthogonal() {
        // Reference: |mean cosine| of 1000 independent Gaussian pairs in 64
        // dimensions, repeated 200 times, stays far below 0.1.
        let mut rng = rng_from(&[4]);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let mut s = 0.0;
            for _ in 0..1000 {
                let a: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
                let b: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
                s += cosine(&a, &b);
            }
            worst = worst.max((s / 1000.0).abs());
        }
        assert!(worst < 0.02, "{worst}");

        let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::default() };
        let params = ModelParams::<f32>::init(&cfg, 5).unwrap();
        let r = alignment_probe(&params, &cfg, &items(&cfg, 12), false, 10).unwrap();
        assert_eq!(r.layers.len(), cfg.half() + 1);
        for (l, c) in &r.layers {
            assert!(c.abs() < 0.1, "layer {l}: {c}");
        }
        assert_eq!(r.rows.len(), 2 * 10 * r.layers.len());
        assert_eq!(r.table().lines().count(), r.rows.len() + 1);
    }

    #[test]
    fn full_swap_collapses_the_shared_input() {
        let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::default() };
        let params = ModelParams::<f32>::init(&cfg, 6).unwrap();
        let r = alignment_probe(&params, &cfg, &items(&cfg, 3), true, 0).unwrap();
        assert!((r.score(cfg.half()).unwrap() - 1.0).abs() < 1e-6);
        assert!(r.rows.is_empty());
    }

    #[test]
    fn pca_recovers_dominant_axes() {
        let mut rng = rng_from(&[8]);
        let pts: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                let c: f64 = rng.sample(StandardNormal);
                vec![0.1 * c, 10.0 * a, 3.0 * b]
            })
            .collect();
        let xy = pca_2d(&pts);
        let var = |f: &dyn Fn(&(f64, f64)) -> f64| xy.iter().map(|p| f(p).powi(2)).sum::<f64>() / xy.len() as f64;
        let (vx, vy) = (var(&|p| p.0), var(&|p| p.1));
        assert!(vx > 80.0 && vx < 120.0, "{vx}");
        assert!(vy > 7.0 && vy < 11.0, "{vy}");
        let corr: f64 = xy.iter().zip(&pts).map(|(p, q)| p.0 * q[1]).sum::<f64>();
        assert!(corr > 0.0);
    }
}
