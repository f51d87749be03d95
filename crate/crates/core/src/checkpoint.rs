//! Versioned binary container for named arrays plus a key=value config block.
//!
//! Layout: magic `SPLM-CK1`; u32 config length and UTF-8 `key=value` lines;
//! u32 array count; per array: u32 name length, name, u32 rank, u32 dims,
//! little-endian f32 data. All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::numerics::Array;

pub const MAGIC: &[u8; 8] = b"SPLM-CK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a checkpoint of this version")]
    BadMagic,
    #[error("truncated at byte offset {0}")]
    Truncated(usize),
    #[error("malformed checkpoint at byte offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` missing from checkpoint")]
    MissingArray(String),
    #[error("parameter `{0}` not expected by this model")]
    UnexpectedArray(String),
    #[error("config key `{key}`: checkpoint has `{found}`, expected `{expected}`")]
    ConfigMismatch {
        key: String,
        expected: String,
        found: String,
    },
    #[error("config key `{0}` missing")]
    MissingKey(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Array<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let text: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.arrays.len());
        for (name, a) in &self.arrays {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, a.shape().len());
            for &d in a.shape() {
                put_u32(&mut out, d);
            }
            for &x in a.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len = r.u32()?;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| CheckpointError::Malformed {
            offset: at,
            reason: e.to_string(),
        })?;
        let mut config = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::Malformed {
                offset: at,
                reason: format!("config line without `=`: {line}"),
            })?;
            config.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()?;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|e| CheckpointError::Malformed {
                    offset: at,
                    reason: e.to_string(),
                })?
                .to_string();
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let at = r.pos;
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(at))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let a = Array::new(dims, data).map_err(|e| CheckpointError::Malformed {
                offset: at,
                reason: format!("array `{name}`: {e}"),
            })?;
            arrays.insert(name, a);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed {
                offset: r.pos,
                reason: "trailing bytes".into(),
            });
        }
        Ok(Self { config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn key(&self, key: &str) -> Result<&str> {
        self.config
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::MissingKey(key.to_string()))
    }

    /// Removes and returns the arrays under `prefix/`, with the prefix stripped.
    pub fn take_group(&mut self, prefix: &str) -> BTreeMap<String, Array<f32>> {
        let tag = format!("{prefix}/");
        let names: Vec<String> = self.arrays.keys().filter(|k| k.starts_with(&tag)).cloned().collect();
        names
            .into_iter()
            .map(|n| {
                let a = self.arrays.remove(&n).expect("listed key");
                (n[tag.len()..].to_string(), a)
            })
            .collect()
    }

    pub fn put_group<'a>(&mut self, prefix: &str, arrays: impl IntoIterator<Item = (&'a str, &'a Array<f32>)>) {
        for (n, a) in arrays {
            self.arrays.insert(format!("{prefix}/{n}"), a.clone());
        }
    }
}

/// Checks that `found` holds exactly the names and shapes of `expected`.
pub fn check_shapes<'a>(
    expected: impl IntoIterator<Item = (&'a str, &'a [usize])>,
    found: &BTreeMap<String, Array<f32>>,
) -> Result<()> {
    let mut seen = 0;
    for (name, shape) in expected {
        let a = found
            .get(name)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))?;
        if a.shape() != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: a.shape().to_vec(),
            });
        }
        seen += 1;
    }
    if seen != found.len() {
        return Err(CheckpointError::UnexpectedArray(
            found.keys().next().cloned().unwrap_or_default(),
        ));
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(u32::try_from(v).expect("fits in u32")).to_le_bytes());
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.config.insert("step".into(), "12".into());
        c.config.insert("d_model".into(), "8".into());
        c.arrays.insert("param/a".into(), Array::from_fn(2, 3, |r, k| (r * 3 + k) as f32 * 0.1));
        c.arrays.insert("param/b".into(), Array::scalar(f32::MIN_POSITIVE));
        c
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        for cut in [4, 12, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(CheckpointError::Truncated(_))
            ));
        }
    }

    #[test]
    fn shape_check_names_the_parameter() {
        let mut c = sample();
        let group = c.take_group("param");
        assert!(c.arrays.is_empty());
        let err = check_shapes([("a", &[2usize, 2][..]), ("b", &[1, 1][..])], &group).unwrap_err();
        assert!(matches!(err, CheckpointError::ShapeMismatch { ref name, .. } if name == "a"));
        assert!(check_shapes([("a", &[2usize, 3][..]), ("b", &[1, 1][..])], &group).is_ok());
        assert!(matches!(
            check_shapes([("a", &[2usize, 3][..])], &group),
            Err(CheckpointError::UnexpectedArray(_))
        ));
    }
}
