//! Corpus file `SPLM-CP1` and its plain-text manifest.
//!
//! Layout after the magic: u32 header length and `key=value` lines; u32 split
//! count; per split: u32 name length, name, u32 record count; per record:
//! u64 id, u32 transcript length and 8-bit char ids, u32 segment count and
//! (u16 phoneme, u16 duration) pairs, u8 feature flag, then u32 frames,
//! u32 dim and little-endian f32 features when the flag is set.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Corpus, CorpusError, LanguageConfig, Result, Split, Utterance};
use crate::checkpoint::{CheckpointError, Reader};
use crate::config::Keyed;
use crate::numerics::Array;
use crate::units::CharVocab;

pub const CORPUS_MAGIC: &[u8; 8] = b"SPLM-CP1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_u16(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u16::try_from(v).expect("fits in u16").to_le_bytes());
}

impl From<CheckpointError> for CorpusError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Truncated(at) => CorpusError::Truncated(at),
            CheckpointError::Io(io) => CorpusError::Io(io),
            other => CorpusError::Malformed {
                offset: 0,
                reason: other.to_string(),
            },
        }
    }
}

impl Corpus {
    fn header(&self) -> BTreeMap<String, String> {
        let mut h: BTreeMap<String, String> = self.language.pairs().into_iter().collect();
        h.insert("language_seed".into(), self.language_seed.to_string());
        h.insert("seed".into(), self.seed.to_string());
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let chars = CharVocab::alphabet(self.language.letters);
        let mut out = Vec::new();
        out.extend_from_slice(CORPUS_MAGIC);
        let text: String = self.header().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.splits.len());
        for (split, items) in &self.splits {
            put_u32(&mut out, split.name().len());
            out.extend_from_slice(split.name().as_bytes());
            put_u32(&mut out, items.len());
            for u in items {
                out.extend_from_slice(&u.id.to_le_bytes());
                let ids = chars.encode(&u.transcript).expect("transcript spelled in the alphabet");
                put_u32(&mut out, ids.len());
                out.extend(ids.iter().map(|&c| u8::try_from(c).expect("8-bit char id")));
                put_u32(&mut out, u.phonemes.len());
                for (&p, &d) in u.phonemes.iter().zip(&u.durations) {
                    put_u16(&mut out, p);
                    put_u16(&mut out, d);
                }
                match &u.features {
                    None => out.push(0),
                    Some(f) => {
                        out.push(1);
                        put_u32(&mut out, f.rows());
                        put_u32(&mut out, f.cols());
                        for &x in f.data() {
                            out.extend_from_slice(&x.to_le_bytes());
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CORPUS_MAGIC.len())? != CORPUS_MAGIC {
            return Err(CorpusError::BadMagic);
        }
        let malformed = |offset: usize, reason: String| CorpusError::Malformed { offset, reason };
        let len = r.u32()?;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| malformed(at, e.to_string()))?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| malformed(at, format!("header line without `=`: {line}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let language = LanguageConfig::from_pairs(&header)?;
        let seed_of = |k: &str| -> Result<u64> {
            header
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| malformed(at, format!("missing `{k}`")))
        };
        let (language_seed, seed) = (seed_of("language_seed")?, seed_of("seed")?);
        let chars = CharVocab::alphabet(language.letters);
        let sep = chars.separator();

        let mut splits = BTreeMap::new();
        for _ in 0..r.u32()? {
            let n = r.u32()?;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(n)?).map_err(|e| malformed(at, e.to_string()))?;
            let split: Split = name.parse().map_err(|_| malformed(at, format!("unknown split `{name}`")))?;
            let count = r.u32()?;
            let mut items = Vec::with_capacity(count.min(1 << 20));
            for _ in 0..count {
                let b = r.take(8)?;
                let id = u64::from_le_bytes(b.try_into().expect("8 bytes"));
                let tl = r.u32()?;
                let at = r.pos;
                let ids: Vec<usize> = r.take(tl)?.iter().map(|&c| c as usize).collect();
                if ids.iter().any(|&c| c == CharVocab::BLANK || c > chars.num_symbols()) {
                    return Err(malformed(at, "char id outside the alphabet".into()));
                }
                let transcript = chars.decode(&ids);
                let words = transcript.split(sep).map(str::to_string).collect();
                let segs = r.u32()?;
                let mut phonemes = Vec::with_capacity(segs.min(1 << 20));
                let mut durations = Vec::with_capacity(segs.min(1 << 20));
                for _ in 0..segs {
                    let b = r.take(4)?;
                    phonemes.push(u16::from_le_bytes([b[0], b[1]]) as usize);
                    durations.push(u16::from_le_bytes([b[2], b[3]]) as usize);
                }
                let at = r.pos;
                let features = match r.take(1)?[0] {
                    0 => None,
                    1 => {
                        let (rows, cols) = (r.u32()?, r.u32()?);
                        let at = r.pos;
                        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or(CorpusError::Truncated(at))?;
                        let data = r
                            .take(n)?
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect();
                        Some(Array::matrix(rows, cols, data).map_err(|e| malformed(at, e.to_string()))?)
                    }
                    f => return Err(malformed(at, format!("feature flag {f}"))),
                };
                items.push(Utterance {
                    id,
                    words,
                    transcript,
                    phonemes,
                    durations,
                    features,
                });
            }
            splits.insert(split, items);
        }
        if r.pos != bytes.len() {
            return Err(malformed(r.pos, "trailing bytes".into()));
        }
        Ok(Corpus {
            language,
            language_seed,
            seed,
            splits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One `split<TAB>count<TAB>seed` line per split.
pub fn write_manifest(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut s = String::from("# split\tcount\tseed\n");
    for (split, items) in &corpus.splits {
        s.push_str(&format!("{split}\t{}\t{}\n", items.len(), corpus.split_seed(*split)));
    }
    Ok(std::fs::write(path, s)?)
}

pub fn read_manifest(path: &Path) -> Result<Vec<(Split, usize, u64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || CorpusError::InvalidConfig(format!("manifest line `{line}`"));
        if f.len() != 3 {
            return Err(bad());
        }
        out.push((f[0].parse()?, f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_corpora, generate_language, SplitSizes};
    use super::*;

    fn corpus() -> Corpus {
        let lang = generate_language(&LanguageConfig::default(), 2).unwrap();
        let sizes = SplitSizes {
            paired: 4,
            pretrain_speech: 5,
            pretrain_text: 6,
            finetune: 3,
            dev: 2,
            test: 2,
        };
        generate_corpora(&lang, &sizes, 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let c = corpus();
        let bytes = c.to_bytes();
        let back = Corpus::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn empty_split_round_trips() {
        let mut c = corpus();
        c.splits.insert(Split::Test, Vec::new());
        let back = Corpus::from_bytes(&c.to_bytes()).unwrap();
        assert!(back.split(Split::Test).is_empty());
        assert_eq!(back, c);
    }

    #[test]
    fn corruption_is_rejected_with_offset() {
        let bytes = corpus().to_bytes();
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(Corpus::from_bytes(&bad), Err(CorpusError::BadMagic)));
        let cut = bytes.len() - 7;
        match Corpus::from_bytes(&bytes[..cut]) {
            Err(CorpusError::Truncated(at)) => assert!(at <= cut),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_lists_every_split() {
        let c = corpus();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.manifest");
        write_manifest(&c, &p).unwrap();
        let m = read_manifest(&p).unwrap();
        assert_eq!(m.len(), 6);
        assert!(m.contains(&(Split::PretrainText, 6, c.split_seed(Split::PretrainText))));
    }
}
