use std::path::Path;

use rand::Rng as _;

use super::{Result, TokenizerError};
use crate::checkpoint::Reader;
use crate::numerics::Array;
use crate::rng::rng_from;
use crate::units::{UnitSequence, UnitVocab};

pub const KMEANS_MAGIC: &[u8; 8] = b"SPLM-KM1";

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    centroids: Array<f32>,
}

/// Fitted model plus the inertia after every assignment pass.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: KMeansModel,
    pub inertia: Vec<f64>,
}

impl KMeansFit {
    pub fn final_inertia(&self) -> f64 {
        *self.inertia.last().expect("at least one pass")
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &c)| (x as f64 - c).powi(2)).sum()
}

/// Nearest centroid under squared Euclidean distance; ties go to the lowest id.
fn nearest(x: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until assignments stop
/// changing or `iters` passes have run.
pub fn kmeans_fit(frames: &Array<f32>, k: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    let (n, d) = (frames.rows(), frames.cols());
    if k < 2 {
        return Err(TokenizerError::InvalidConfig("k-means needs K >= 2".into()));
    }
    if n < k {
        return Err(TokenizerError::TooFewPoints { points: n, k });
    }
    if iters == 0 {
        return Err(TokenizerError::InvalidConfig("k-means needs iters >= 1".into()));
    }
    let mut rng = rng_from(&[seed, 0x6b6d]);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.push(frames.row(first).iter().map(|&x| x as f64).collect());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(frames.row(i), &centroids[0])).collect();
    // Greedy k-means++: draw 2 + ln K candidates from the D^2 law and keep the
    // one that lowers the potential most.
    let trials = 2 + (k as f64).ln() as usize;
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    if w > 0.0 && u < w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                pick
            } else {
                let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
                free[rng.random_range(0..free.len())]
            };
            let c: Vec<f64> = frames.row(pick).iter().map(|&x| x as f64).collect();
            let next: Vec<f64> = d2
                .iter()
                .enumerate()
                .map(|(i, &w)| w.min(sq_dist(frames.row(i), &c)))
                .collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, pick, next));
            }
        }
        let (_, pick, next) = best.expect("at least one trial");
        chosen[pick] = true;
        d2 = next;
        centroids.push(frames.row(pick).iter().map(|&x| x as f64).collect());
    }

    let mut assign = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    for _ in 0..iters {
        let mut changed = false;
        let mut total = 0.0;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (c, dd) = nearest(frames.row(i), &centroids);
            changed |= assign[i] != c;
            assign[i] = c;
            dist[i] = dd;
            total += dd;
        }
        if let Some(&prev) = inertia.last() {
            assert!(
                total <= prev * (1.0 + 1e-12) + 1e-12,
                "k-means inertia increased from {prev} to {total}"
            );
        }
        inertia.push(total);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, &x) in sums[assign[i]].iter_mut().zip(frames.row(i)) {
                *s += x as f64;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n >= k");
                taken[far] = true;
                dist[far] = 0.0;
                centroids[c] = frames.row(far).iter().map(|&x| x as f64).collect();
            }
        }
    }
    let data = centroids.iter().flatten().map(|&x| x as f32).collect();
    Ok(KMeansFit {
        model: KMeansModel {
            centroids: Array::matrix(k, d, data).expect("k x d centroids"),
        },
        inertia,
    })
}

impl KMeansModel {
    pub fn new(centroids: Array<f32>) -> Result<Self> {
        if centroids.rows() < 2 {
            return Err(TokenizerError::InvalidConfig("k-means needs K >= 2".into()));
        }
        Ok(Self { centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &Array<f32> {
        &self.centroids
    }

    pub fn vocab(&self) -> UnitVocab {
        UnitVocab::hidden(self.k())
    }

    /// Nearest-centroid id of every frame.
    pub fn assign_ids(&self, frames: &Array<f32>) -> Result<Vec<usize>> {
        if frames.cols() != self.dim() {
            return Err(TokenizerError::DimMismatch {
                expected: self.dim(),
                got: frames.cols(),
            });
        }
        let cs: Vec<Vec<f64>> = (0..self.k())
            .map(|c| self.centroids.row(c).iter().map(|&x| x as f64).collect())
            .collect();
        Ok((0..frames.rows()).map(|i| nearest(frames.row(i), &cs).0).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.centroids.len());
        out.extend_from_slice(KMEANS_MAGIC);
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for &x in self.centroids.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != KMEANS_MAGIC {
            return Err(TokenizerError::BadMagic);
        }
        let k = r.u32()?;
        let d = r.u32()?;
        if k < 2 || d == 0 {
            return Err(TokenizerError::InvalidConfig(format!("stored K={k}, D={d}")));
        }
        let raw = r.take(k * d * 4)?;
        if r.pos != bytes.len() {
            return Err(TokenizerError::InvalidConfig(format!("trailing bytes at offset {}", r.pos)));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(Array::matrix(k, d, data).expect("k x d"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Maps frames to their nearest-centroid hidden units.
pub fn kmeans_assign(model: &KMeansModel, frames: &Array<f32>) -> Result<UnitSequence> {
    let ids = model.assign_ids(frames)?;
    Ok(UnitSequence::new(ids, &model.vocab())?)
}

/// Fraction of frames whose cluster's majority label equals their own label.
pub fn frame_purity(clusters: &[usize], labels: &[usize]) -> f64 {
    use std::collections::BTreeMap;
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&c, &l) in clusters.iter().zip(labels) {
        *counts.entry(c).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / clusters.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use rand_distr::StandardNormal;

    use super::*;

    fn mixture(n: usize, d: usize, centers: usize, seed: u64) -> Array<f32> {
        let mut rng = rng_from(&[seed]);
        let means: Vec<Vec<f64>> = (0..centers)
            .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        Array::from_fn(n, d, |r, c| {
            let z: f64 = rng.sample(StandardNormal);
            (means[r % centers][c] + z) as f32
        })
    }

    #[test]
    fn separated_points() {
        let x = Array::matrix(4, 1, vec![0.0f32, 0.0, 10.0, 10.0]).unwrap();
        let fit = kmeans_fit(&x, 2, 10, 1).unwrap();
        let mut c: Vec<f32> = fit.model.centroids().data().to_vec();
        c.sort_by(f32::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
        assert_eq!(fit.final_inertia(), 0.0);
    }

    #[test]
    fn one_cluster_per_point_has_zero_inertia() {
        let x = mixture(12, 3, 3, 2);
        let fit = kmeans_fit(&x, 12, 5, 3).unwrap();
        assert_eq!(fit.final_inertia(), 0.0);
        let dup = Array::matrix(3, 1, vec![1.0f32, 1.0, 2.0]).unwrap();
        assert_eq!(kmeans_fit(&dup, 3, 5, 3).unwrap().final_inertia(), 0.0);
    }

    #[test]
    fn close_to_best_of_many_restarts() {
        let x = mixture(500, 8, 4, 4);
        let fit = kmeans_fit(&x, 4, 100, 0).unwrap();
        let best = (1..=20)
            .map(|s| kmeans_fit(&x, 4, 100, s).unwrap().final_inertia())
            .fold(f64::INFINITY, f64::min);
        assert!(fit.final_inertia() <= best * 1.05, "{} vs {best}", fit.final_inertia());
        assert!(fit.inertia.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = mixture(3, 2, 1, 5);
        assert!(matches!(kmeans_fit(&x, 4, 5, 0), Err(TokenizerError::TooFewPoints { .. })));
        let fit = kmeans_fit(&x, 2, 5, 0).unwrap();
        assert!(matches!(
            fit.model.assign_ids(&Array::zeros(2, 3)),
            Err(TokenizerError::DimMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn assignment_matches_brute_force_and_tie_rule() {
        let c = Array::matrix(4, 2, vec![0.0f32, 0.0, -1.0, 0.0, 1.0, 0.0, 5.0, 5.0]).unwrap();
        let m = KMeansModel::new(c.clone()).unwrap();
        assert_eq!(m.assign_ids(&c).unwrap(), vec![0, 1, 2, 3]);
        // 0 is equidistant to centroids 1 and 2.
        let m2 = KMeansModel::new(Array::matrix(3, 1, vec![9.0f32, -1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(m2.assign_ids(&Array::matrix(1, 1, vec![0.0f32]).unwrap()).unwrap(), vec![1]);

        let frames = mixture(100, 8, 5, 6);
        let fit = kmeans_fit(&frames, 7, 20, 7).unwrap();
        let ids = fit.model.assign_ids(&frames).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for k in 0..7 {
                let d: f64 = (0..8)
                    .map(|j| (frames.get(i, j) as f64 - fit.model.centroids().get(k, j) as f64).powi(2))
                    .sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            assert_eq!(id, best.0);
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let fit = kmeans_fit(&mixture(40, 3, 2, 8), 4, 10, 9).unwrap();
        let bytes = fit.model.to_bytes();
        assert_eq!(&bytes[..8], b"SPLM-KM1");
        assert_eq!(KMeansModel::from_bytes(&bytes).unwrap(), fit.model);
        let mut bad = bytes.clone();
        bad[3] = b'?';
        assert!(matches!(KMeansModel::from_bytes(&bad), Err(TokenizerError::BadMagic)));
        assert!(KMeansModel::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn purity_definition() {
        assert_eq!(frame_purity(&[0, 0, 1, 1], &[5, 5, 6, 7]), 0.75);
        assert_eq!(frame_purity(&[0, 1, 2], &[1, 1, 1]), 1.0);
    }
}
