//! Unit and character vocabularies, unit sequences, the lexicon, and the
//! text-side phoneme conversion with silence insertion.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnitsError {
    #[error("empty word list")]
    EmptyInput,
    #[error("unit id {id} outside vocabulary of size {size}")]
    InvalidId { id: usize, size: usize },
    #[error("unit sequence must be non-empty")]
    EmptySequence,
    #[error("expected a {expected:?} sequence, got {got:?}")]
    WrongKind { expected: UnitKind, got: UnitKind },
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("lexicon line {line}: {reason}")]
    LexiconParse { line: usize, reason: String },
    #[error("lexicon entry `{0}` has no phonemes")]
    EmptyEntry(String),
    #[error("character `{0}` is not in the alphabet")]
    UnknownChar(char),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnitKind {
    Phoneme,
    Hidden,
}

/// Dense unit vocabulary. Phoneme vocabularies carry SIL and UNK ids.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVocab {
    kind: UnitKind,
    names: Vec<String>,
    sil: Option<usize>,
    unk: Option<usize>,
}

impl UnitVocab {
    /// `n` regular phonemes named `p0..`, followed by SIL and UNK.
    pub fn phoneme(n: usize) -> Self {
        let mut names: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        names.push("SIL".into());
        names.push("UNK".into());
        Self {
            kind: UnitKind::Phoneme,
            names,
            sil: Some(n),
            unk: Some(n + 1),
        }
    }

    /// Phoneme vocabulary from explicit names; SIL and UNK are appended.
    pub fn phoneme_named(names: &[&str]) -> Result<Self, UnitsError> {
        let mut v = Self::phoneme(names.len());
        for (slot, n) in v.names.iter_mut().zip(names) {
            *slot = n.to_string();
        }
        let mut sorted = v.names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != v.names.len() {
            return Err(UnitsError::InvalidVocab("duplicate phoneme names".into()));
        }
        Ok(v)
    }

    /// `k` hidden units (k-means clusters), no special ids.
    pub fn hidden(k: usize) -> Self {
        Self {
            kind: UnitKind::Hidden,
            names: (0..k).map(|i| format!("u{i}")).collect(),
            sil: None,
            unk: None,
        }
    }

    pub fn kind(&self) -> UnitKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn sil(&self) -> Option<usize> {
        self.sil
    }

    pub fn unk(&self) -> Option<usize> {
        self.unk
    }

    /// Number of regular (non-special) phonemes.
    pub fn regular(&self) -> usize {
        self.size() - usize::from(self.sil.is_some()) - usize::from(self.unk.is_some())
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn contains(&self, id: usize) -> bool {
        id < self.size()
    }
}

/// Character vocabulary for CTC targets. Id 0 is the blank; symbol `i` has id `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharVocab {
    symbols: Vec<char>,
    separator: char,
}

impl CharVocab {
    pub const BLANK: usize = 0;

    /// Word separator followed by the letters.
    pub fn new(letters: &[char], separator: char) -> Result<Self, UnitsError> {
        let mut symbols = vec![separator];
        symbols.extend_from_slice(letters);
        let mut sorted = symbols.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != symbols.len() || letters.is_empty() {
            return Err(UnitsError::InvalidVocab("letters must be distinct and non-empty".into()));
        }
        Ok(Self { symbols, separator })
    }

    /// `n` letters starting at `a`, space as separator.
    pub fn alphabet(n: usize) -> Self {
        let letters: Vec<char> = (0..n as u8).map(|i| (b'a' + i) as char).collect();
        Self::new(&letters, ' ').expect("distinct letters")
    }

    /// Symbols excluding the blank.
    pub fn num_symbols(&self) -> usize {
        self.symbols.len()
    }

    /// Output width of a CTC layer: symbols plus blank.
    pub fn size_with_blank(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn separator(&self) -> char {
        self.separator
    }

    pub fn separator_id(&self) -> usize {
        1
    }

    pub fn letters(&self) -> &[char] {
        &self.symbols[1..]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, UnitsError> {
        text.chars()
            .map(|ch| {
                self.symbols
                    .iter()
                    .position(|&s| s == ch)
                    .map(|p| p + 1)
                    .ok_or(UnitsError::UnknownChar(ch))
            })
            .collect()
    }

    /// Blank ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != Self::BLANK && i <= self.symbols.len())
            .map(|&i| self.symbols[i - 1])
            .collect()
    }
}

/// A non-empty sequence of unit ids tagged with its vocabulary kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSequence {
    ids: Vec<usize>,
    kind: UnitKind,
}

impl UnitSequence {
    pub fn new(ids: Vec<usize>, vocab: &UnitVocab) -> Result<Self, UnitsError> {
        if ids.is_empty() {
            return Err(UnitsError::EmptySequence);
        }
        if let Some(&bad) = ids.iter().find(|&&i| !vocab.contains(i)) {
            return Err(UnitsError::InvalidId {
                id: bad,
                size: vocab.size(),
            });
        }
        Ok(Self {
            ids,
            kind: vocab.kind(),
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.ids
    }

    pub fn kind(&self) -> UnitKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Merges runs of identical consecutive ids.
    pub fn dedup_runs(&self) -> Vec<usize> {
        let mut out = self.ids.clone();
        out.dedup();
        out
    }
}

/// Word to phoneme-id pronunciations.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<usize>>,
}

impl Lexicon {
    pub fn new(entries: BTreeMap<String, Vec<usize>>, vocab: &UnitVocab) -> Result<Self, UnitsError> {
        for (w, phones) in &entries {
            if w.is_empty() || phones.is_empty() {
                return Err(UnitsError::EmptyEntry(w.clone()));
            }
            if let Some(&bad) = phones.iter().find(|&&p| !vocab.contains(p)) {
                return Err(UnitsError::InvalidId {
                    id: bad,
                    size: vocab.size(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, word: &str) -> Option<&[usize]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.entries.iter().map(|(w, p)| (w.as_str(), p.as_slice()))
    }

    /// One entry per line: `word<TAB>ph1 ph2 ...`.
    pub fn to_text(&self, vocab: &UnitVocab) -> String {
        let mut s = String::new();
        for (w, phones) in &self.entries {
            let names: Vec<&str> = phones.iter().map(|&p| vocab.name(p)).collect();
            let _ = writeln!(s, "{w}\t{}", names.join(" "));
        }
        s
    }

    pub fn parse(text: &str, vocab: &UnitVocab) -> Result<Self, UnitsError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (word, phones) = line.split_once('\t').ok_or_else(|| UnitsError::LexiconParse {
                line: i + 1,
                reason: "missing tab separator".into(),
            })?;
            let ids = phones
                .split_whitespace()
                .map(|p| {
                    vocab.id_of(p).ok_or_else(|| UnitsError::LexiconParse {
                        line: i + 1,
                        reason: format!("unknown phoneme `{p}`"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            entries.insert(word.to_string(), ids);
        }
        Self::new(entries, vocab)
    }
}

/// Phonemes of a word sequence with the start position of every word after the first.
#[derive(Debug, Clone, PartialEq)]
pub struct WordPhonemes {
    pub units: UnitSequence,
    pub word_starts: Vec<usize>,
}

/// Lexicon lookup; an out-of-vocabulary word contributes a single UNK.
pub fn words_to_phonemes<S: AsRef<str>>(
    words: &[S],
    lexicon: &Lexicon,
    vocab: &UnitVocab,
) -> Result<WordPhonemes, UnitsError> {
    if words.is_empty() {
        return Err(UnitsError::EmptyInput);
    }
    let unk = vocab.unk().ok_or(UnitsError::WrongKind {
        expected: UnitKind::Phoneme,
        got: vocab.kind(),
    })?;
    let mut ids = Vec::new();
    let mut word_starts = Vec::with_capacity(words.len().saturating_sub(1));
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            word_starts.push(ids.len());
        }
        match lexicon.get(w.as_ref()) {
            Some(p) => ids.extend_from_slice(p),
            None => ids.push(unk),
        }
    }
    Ok(WordPhonemes {
        units: UnitSequence::new(ids, vocab)?,
        word_starts,
    })
}

/// Inserts SIL at each word boundary independently with probability `p_sil`.
pub fn insert_silence(
    phonemes: &WordPhonemes,
    p_sil: f64,
    vocab: &UnitVocab,
    rng: &mut impl Rng,
) -> Result<UnitSequence, UnitsError> {
    if !(0.0..=1.0).contains(&p_sil) {
        return Err(UnitsError::BadProbability(p_sil));
    }
    let sil = vocab.sil().ok_or(UnitsError::WrongKind {
        expected: UnitKind::Phoneme,
        got: vocab.kind(),
    })?;
    if phonemes.units.kind() != UnitKind::Phoneme {
        return Err(UnitsError::WrongKind {
            expected: UnitKind::Phoneme,
            got: phonemes.units.kind(),
        });
    }
    let ids = phonemes.units.ids();
    let mut out = Vec::with_capacity(ids.len() + phonemes.word_starts.len());
    let mut prev = 0;
    for &b in &phonemes.word_starts {
        out.extend_from_slice(&ids[prev..b]);
        if rng.random_bool(p_sil) {
            out.push(sil);
        }
        prev = b;
    }
    out.extend_from_slice(&ids[prev..]);
    UnitSequence::new(out, vocab)
}
