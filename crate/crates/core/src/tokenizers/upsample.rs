use rand::Rng;
use rand_distr::StandardNormal;

use super::{Result, TokenizerError};
use crate::units::{UnitKind, UnitSequence, UnitVocab};

/// Repeat-count law of the text-side phoneme upsampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpsamplerConfig {
    pub mean: f64,
    pub variance: f64,
    pub sil_mean: f64,
    pub sil_variance: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for UpsamplerConfig {
    fn default() -> Self {
        Self {
            mean: 5.0,
            variance: 25.0,
            sil_mean: 14.0,
            sil_variance: 25.0,
            min_len: 1,
            max_len: 30,
        }
    }
}

impl UpsamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 1 || self.max_len < self.min_len {
            return Err(TokenizerError::InvalidConfig("need 1 <= min_len <= max_len".into()));
        }
        if !(self.mean > 0.0 && self.sil_mean > 0.0) {
            return Err(TokenizerError::InvalidConfig("means must be positive".into()));
        }
        if !(self.variance >= 0.0 && self.sil_variance >= 0.0) {
            return Err(TokenizerError::InvalidConfig("variances must be non-negative".into()));
        }
        Ok(())
    }

    /// One repeat count: round(N(mean, variance)) clamped to [min_len, max_len].
    pub fn draw(&self, sil: bool, rng: &mut impl Rng) -> usize {
        let (m, v) = if sil {
            (self.sil_mean, self.sil_variance)
        } else {
            (self.mean, self.variance)
        };
        let z: f64 = rng.sample(StandardNormal);
        let x = (m + v.sqrt() * z).round();
        (x.max(self.min_len as f64) as usize).clamp(self.min_len, self.max_len)
    }
}

/// Repeats every phoneme a random number of times.
pub fn phoneme_upsample(
    phonemes: &UnitSequence,
    vocab: &UnitVocab,
    cfg: &UpsamplerConfig,
    rng: &mut impl Rng,
) -> Result<UnitSequence> {
    cfg.validate()?;
    if phonemes.kind() != UnitKind::Phoneme || vocab.kind() != UnitKind::Phoneme {
        return Err(TokenizerError::WrongKind);
    }
    let sil = vocab.sil();
    let mut out = Vec::with_capacity(phonemes.len() * cfg.mean.ceil() as usize);
    for &p in phonemes.ids() {
        let n = cfg.draw(Some(p) == sil, rng);
        out.extend(std::iter::repeat_n(p, n));
    }
    Ok(UnitSequence::new(out, vocab)?)
}

#[cfg(test)]
mod tests {

    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn degenerate_variance_repeats_exactly() {
        let v = UnitVocab::phoneme(4);
        let seq = UnitSequence::new(vec![0, 1, 2], &v).unwrap();
        let cfg = UpsamplerConfig { variance: 0.0, ..Default::default() };
        let out = phoneme_upsample(&seq, &v, &cfg, &mut rng_from(&[1])).unwrap();
        assert_eq!(out.ids(), &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);

        let sil = v.sil().unwrap();
        let seq = UnitSequence::new(vec![0, sil, 1], &v).unwrap();
        let cfg = UpsamplerConfig { variance: 0.0, sil_variance: 0.0, ..Default::default() };
        let out = phoneme_upsample(&seq, &v, &cfg, &mut rng_from(&[2])).unwrap();
        assert_eq!(out.ids().iter().filter(|&&u| u == sil).count(), 14);
    }

    #[test]
    fn mean_length_matches_monte_carlo_reference() {
        let v = UnitVocab::phoneme(4);
        let seq = UnitSequence::new(vec![0], &v).unwrap();
        let cfg = UpsamplerConfig::default();
        let draws = 100_000;
        // Reference: Box-Muller normals, rounded and clamped by hand.
        let mut rng = rng_from(&[3]);
        let mut reference = 0.0;
        for _ in 0..draws {
            let (u1, u2): (f64, f64) = (1.0 - rng.random::<f64>(), rng.random());
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            reference += (5.0 + 5.0 * z).round().clamp(1.0, 30.0);
        }
        reference /= draws as f64;
        let mut rng = rng_from(&[4]);
        let mut mean = 0.0;
        for _ in 0..draws {
            mean += phoneme_upsample(&seq, &v, &cfg, &mut rng).unwrap().len() as f64;
        }
        mean /= draws as f64;
        assert!((mean - reference).abs() < 0.05, "{mean} vs {reference}");
    }

    #[test]
    fn rejects_bad_config_and_kind() {
        let v = UnitVocab::phoneme(4);
        let seq = UnitSequence::new(vec![0], &v).unwrap();
        let bad = UpsamplerConfig { min_len: 0, ..Default::default() };
        assert!(phoneme_upsample(&seq, &v, &bad, &mut rng_from(&[5])).is_err());
        let h = UnitVocab::hidden(4);
        let hs = UnitSequence::new(vec![0], &h).unwrap();
        assert!(matches!(
            phoneme_upsample(&hs, &h, &UpsamplerConfig::default(), &mut rng_from(&[5])),
            Err(TokenizerError::WrongKind)
        ));
    }

    #[test]
    fn collapsing_repeats_recovers_input() {
        let v = UnitVocab::phoneme(4);
        let mut gen = rng_from(&[77]);
        for case in 0..200u64 {
            let len = gen.random_range(1..30);
            let mut ids: Vec<usize> = (0..len).map(|_| gen.random_range(0..6)).collect();
            ids.dedup();
            let seq = UnitSequence::new(ids.clone(), &v).unwrap();
            let out = phoneme_upsample(&seq, &v, &UpsamplerConfig::default(), &mut rng_from(&[case])).unwrap();
            assert_eq!(out.dedup_runs(), ids);
        }
    }
}
