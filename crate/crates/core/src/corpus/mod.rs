//! Synthetic speech/text corpus with oracle phoneme alignments.
//!
//! A toy language has a phoneme inventory with one prototype feature vector
//! per phoneme, a small lexicon, and a letter spelling per phoneme. Speech
//! frames are noisy copies of the prototype of the phoneme being spoken.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::model::Segments;
use crate::numerics::Array;
use crate::rng::{derive_seed, rng_from, Rng as ChaRng};
use crate::units::{insert_silence, words_to_phonemes, CharVocab, Lexicon, UnitVocab, UnitsError};

mod io;

pub use io::{read_manifest, write_manifest, CORPUS_MAGIC};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("prototype separation > 4 sigma not reached after {0} attempts")]
    Separation(usize),
    #[error("could not draw {0} distinct words")]
    Lexicon(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("bad magic: not a corpus file of this version")]
    BadMagic,
    #[error("truncated at byte offset {0}")]
    Truncated(usize),
    #[error("malformed corpus at byte offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Units(#[from] UnitsError),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageConfig {
    /// Regular phonemes; SIL and UNK are added on top.
    pub phonemes: usize,
    pub words: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub letters: usize,
    pub feat_dim: usize,
    pub dur_mean: f64,
    pub dur_std: f64,
    pub sigma: f64,
    /// Exponent of the Zipf unigram law over words.
    pub zipf: f64,
    pub sil_prob: f64,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        Self {
            phonemes: 12,
            words: 40,
            min_word_len: 1,
            max_word_len: 4,
            letters: 10,
            feat_dim: 16,
            dur_mean: 5.0,
            dur_std: 2.0,
            sigma: 0.3,
            zipf: 1.0,
            sil_prob: 0.25,
            min_words: 2,
            max_words: 6,
        }
    }
}

impl LanguageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.into()));
        if self.phonemes < 1 || self.letters < 1 || self.letters > 26 || self.feat_dim < 1 {
            return bad("need at least one phoneme, 1..=26 letters, feat_dim >= 1");
        }
        if self.words < 1 || self.min_word_len < 1 || self.max_word_len < self.min_word_len {
            return bad("need words >= 1 and 1 <= min_word_len <= max_word_len");
        }
        if self.min_words < 1 || self.max_words < self.min_words {
            return bad("need 1 <= min_words <= max_words");
        }
        if !(self.dur_mean > 0.0 && self.dur_std >= 0.0 && self.sigma >= 0.0 && self.zipf >= 0.0) {
            return bad("duration mean must be positive; stds and zipf non-negative");
        }
        if !(0.0..=1.0).contains(&self.sil_prob) {
            return bad("sil_prob outside [0, 1]");
        }
        if self.phonemes >= u16::MAX as usize {
            return bad("too many phonemes for 16-bit labels");
        }
        Ok(())
    }

    /// Reads every field from `map`; all must be present.
    pub(crate) fn from_pairs(map: &BTreeMap<String, String>) -> Result<Self> {
        use crate::config::Keyed;
        let mut cfg = Self::default();
        for (k, _) in Self::default().pairs() {
            let v = map
                .get(&k)
                .ok_or_else(|| CorpusError::InvalidConfig(format!("missing `{k}`")))?;
            cfg.set(&k, v)
                .map_err(|e| CorpusError::InvalidConfig(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A generated toy language. Everything is a pure function of `(cfg, seed)`.
#[derive(Debug, Clone)]
pub struct ToyLanguage {
    pub cfg: LanguageConfig,
    pub seed: u64,
    pub vocab: UnitVocab,
    pub chars: CharVocab,
    pub lexicon: Lexicon,
    /// Words in frequency-rank order.
    pub words: Vec<String>,
    /// Unigram probability of `words[i]`.
    pub weights: Vec<f64>,
    /// Spelling of each regular phoneme.
    pub graphemes: Vec<String>,
    /// One row per phoneme id (UNK included, never spoken).
    pub prototypes: Array<f32>,
    word_law: WeightedIndex<f64>,
}

const MAX_ATTEMPTS: usize = 1000;

fn min_pairwise_distance(p: &Array<f32>) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..p.rows() {
        for j in i + 1..p.rows() {
            let d: f64 = p
                .row(i)
                .iter()
                .zip(p.row(j))
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

/// Draws a toy language: spellings, lexicon, Zipf word law and prototypes.
pub fn generate_language(cfg: &LanguageConfig, seed: u64) -> Result<ToyLanguage> {
    cfg.validate()?;
    let vocab = UnitVocab::phoneme(cfg.phonemes);
    let chars = CharVocab::alphabet(cfg.letters);

    let mut rng = rng_from(&[seed, 1]);
    let mut letters: Vec<char> = chars.letters().to_vec();
    letters.shuffle(&mut rng);
    let graphemes: Vec<String> = (0..cfg.phonemes)
        .map(|p| {
            let mut g = letters[p % letters.len()].to_string();
            if p >= letters.len() {
                g.push(letters[(p * 7 + 3) % letters.len()]);
            }
            g
        })
        .collect();

    let mut rng = rng_from(&[seed, 2]);
    let mut entries = BTreeMap::new();
    let mut words = Vec::with_capacity(cfg.words);
    let mut tries = 0;
    while words.len() < cfg.words {
        tries += 1;
        if tries > 100 * cfg.words + MAX_ATTEMPTS {
            return Err(CorpusError::Lexicon(cfg.words));
        }
        let len = rng.random_range(cfg.min_word_len..=cfg.max_word_len);
        let phones: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.phonemes)).collect();
        let spelling: String = phones.iter().map(|&p| graphemes[p].as_str()).collect();
        if entries.contains_key(&spelling) {
            continue;
        }
        entries.insert(spelling.clone(), phones);
        words.push(spelling);
    }
    let lexicon = Lexicon::new(entries, &vocab)?;
    let raw: Vec<f64> = (0..cfg.words).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf)).collect();
    let z: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / z).collect();
    let word_law = WeightedIndex::new(&weights).expect("positive weights");

    let threshold = 4.0 * cfg.sigma;
    let mut prototypes = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng_from(&[seed, 3, attempt as u64]);
        let p = Array::from_fn(vocab.size(), cfg.feat_dim, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z as f32
        });
        if min_pairwise_distance(&p) > threshold {
            prototypes = Some(p);
            break;
        }
    }
    let prototypes = prototypes.ok_or(CorpusError::Separation(MAX_ATTEMPTS))?;

    Ok(ToyLanguage {
        cfg: cfg.clone(),
        seed,
        vocab,
        chars,
        lexicon,
        words,
        weights,
        graphemes,
        prototypes,
        word_law,
    })
}

/// One synthetic sample. Text-only records have no phonemes and no features.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub words: Vec<String>,
    /// Words joined by the separator.
    pub transcript: String,
    /// Spoken phoneme segments, SIL included.
    pub phonemes: Vec<usize>,
    /// Frame count of every segment.
    pub durations: Vec<usize>,
    pub features: Option<Array<f32>>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn is_text_only(&self) -> bool {
        self.features.is_none()
    }

    /// Oracle per-frame phoneme ids.
    pub fn frame_phonemes(&self) -> Vec<usize> {
        self.phonemes
            .iter()
            .zip(&self.durations)
            .flat_map(|(&p, &d)| std::iter::repeat_n(p, d))
            .collect()
    }
}

impl ToyLanguage {
    pub fn sample_words(&self, n: usize, rng: &mut impl Rng) -> Vec<String> {
        (0..n).map(|_| self.words[self.word_law.sample(rng)].clone()).collect()
    }

    pub fn spell(&self, words: &[String]) -> String {
        words.join(&self.chars.separator().to_string())
    }

    /// Frame count of one speech segment: round(N(mean, std^2)), at least 1.
    pub fn draw_duration(&self, rng: &mut impl Rng) -> usize {
        let z: f64 = rng.sample(StandardNormal);
        (self.cfg.dur_mean + self.cfg.dur_std * z).round().max(1.0) as usize
    }

    /// Speaks `n_words` sampled words.
    pub fn synth_utterance(&self, n_words: usize, rng: &mut impl Rng) -> Result<Utterance> {
        let words = self.sample_words(n_words.max(1), rng);
        self.speak(words, rng)
    }

    /// Speech for a given word sequence.
    pub fn speak(&self, words: Vec<String>, rng: &mut impl Rng) -> Result<Utterance> {
        let wp = words_to_phonemes(&words, &self.lexicon, &self.vocab)?;
        let phonemes = insert_silence(&wp, self.cfg.sil_prob, &self.vocab, rng)?.into_ids();
        let durations: Vec<usize> = phonemes.iter().map(|_| self.draw_duration(rng)).collect();
        let frames: usize = durations.iter().sum();
        let d = self.cfg.feat_dim;
        let mut data = Vec::with_capacity(frames * d);
        for (&p, &dur) in phonemes.iter().zip(&durations) {
            for _ in 0..dur {
                for &mu in self.prototypes.row(p) {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push((mu as f64 + self.cfg.sigma * z) as f32);
                }
            }
        }
        Ok(Utterance {
            id: 0,
            transcript: self.spell(&words),
            words,
            phonemes,
            durations,
            features: Some(Array::matrix(frames, d, data).expect("frames x dim")),
        })
    }

    fn n_words(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.cfg.min_words..=self.cfg.max_words)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Paired,
    PretrainSpeech,
    PretrainText,
    Finetune,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::Paired,
        Split::PretrainSpeech,
        Split::PretrainText,
        Split::Finetune,
        Split::Dev,
        Split::Test,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Paired => "paired",
            Split::PretrainSpeech => "pretrain-speech",
            Split::PretrainText => "pretrain-text",
            Split::Finetune => "finetune",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn index(self) -> u64 {
        Split::ALL.iter().position(|&s| s == self).expect("listed") as u64
    }
}

impl std::str::FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| CorpusError::UnknownSplit(s.to_string()))
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSizes {
    pub paired: usize,
    pub pretrain_speech: usize,
    pub pretrain_text: usize,
    pub finetune: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            paired: 200,
            pretrain_speech: 2000,
            pretrain_text: 8000,
            finetune: 300,
            dev: 200,
            test: 200,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Paired => self.paired,
            Split::PretrainSpeech => self.pretrain_speech,
            Split::PretrainText => self.pretrain_text,
            Split::Finetune => self.finetune,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

/// All splits of one generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub language: LanguageConfig,
    pub language_seed: u64,
    pub seed: u64,
    pub splits: BTreeMap<Split, Vec<Utterance>>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Seed of the utterance stream of `split`.
    pub fn split_seed(&self, split: Split) -> u64 {
        derive_seed(&[self.seed, split.index()])
    }

    pub fn language(&self) -> Result<ToyLanguage> {
        generate_language(&self.language, self.language_seed)
    }
}

fn utterance_rng(seed: u64, split: Split, i: usize) -> ChaRng {
    rng_from(&[seed, split.index(), i as u64])
}

/// Generates every split. Utterance `i` of split `s` is drawn from its own
/// stream keyed by `(seed, s, i)` and gets id `s << 32 | i`.
pub fn generate_corpora(lang: &ToyLanguage, sizes: &SplitSizes, seed: u64) -> Result<Corpus> {
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let n = sizes.get(split);
        if n == 0 {
            return Err(CorpusError::InvalidConfig(format!("split `{split}` must be non-empty")));
        }
        let mut items = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = utterance_rng(seed, split, i);
            let k = lang.n_words(&mut rng);
            let mut u = if split == Split::PretrainText {
                let words = lang.sample_words(k, &mut rng);
                Utterance {
                    id: 0,
                    transcript: lang.spell(&words),
                    words,
                    phonemes: Vec::new(),
                    durations: Vec::new(),
                    features: None,
                }
            } else {
                lang.synth_utterance(k, &mut rng)?
            };
            u.id = (split.index() << 32) | i as u64;
            items.push(u);
        }
        splits.insert(split, items);
    }
    Ok(Corpus {
        language: lang.cfg.clone(),
        language_seed: lang.seed,
        seed,
        splits,
    })
}

/// Right-padded feature batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    /// `items * width` rows; row `b * width + t` is frame `t` of item `b`.
    pub data: Array<f32>,
    pub width: usize,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    /// Valid rows only, item after item, with their segment layout. Padding
    /// never reaches the model.
    pub fn pack(&self) -> (Array<f32>, Segments) {
        let d = self.data.cols();
        let mut out = Vec::with_capacity(self.lengths.iter().sum::<usize>() * d);
        for (b, &len) in self.lengths.iter().enumerate() {
            for t in 0..len {
                out.extend_from_slice(self.data.row(b * self.width + t));
            }
        }
        let total = self.lengths.iter().sum();
        (
            Array::matrix(total, d, out).expect("packed rows"),
            Segments::new(self.lengths.clone()).expect("non-empty lengths"),
        )
    }
}

pub fn batch_pad(items: &[&Array<f32>]) -> Result<PaddedBatch> {
    let first = items.first().ok_or(CorpusError::EmptyBatch)?;
    let d = first.cols();
    if items.iter().any(|a| a.cols() != d || a.rows() == 0) {
        return Err(CorpusError::InvalidConfig("batch items need equal width and >= 1 row".into()));
    }
    let width = items.iter().map(|a| a.rows()).max().expect("non-empty");
    let mut data = vec![0.0f32; items.len() * width * d];
    for (b, a) in items.iter().enumerate() {
        data[b * width * d..(b * width + a.rows()) * d].copy_from_slice(a.data());
    }
    Ok(PaddedBatch {
        data: Array::matrix(items.len() * width, d, data).expect("padded"),
        width,
        lengths: items.iter().map(|a| a.rows()).collect(),
    })
}
