//! Bit-packed binary codes and an exhaustive Hamming-distance index.
//!
//! Codes are packed LSB-first: bit `i` lives in byte `i / 8` at position
//! `i % 8`. Bits past `k` are always zero.
//!
//! Index file layout (little-endian):
//!
//! ```text
//! "ATHX" | version u8 (0x01) | k u16 | n u64 | n x (id u32, label u16, code [u8; ceil(k/8)])
//! ```

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 4] = b"ATHX";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("code length mismatch: index has k = {expected}, got k = {found}")]
    KMismatch { expected: usize, found: usize },
    #[error("duplicate id {0}")]
    DuplicateId(u32),
    #[error("build inputs differ in length: {codes} codes, {ids} ids, {labels} labels")]
    LengthMismatch { codes: usize, ids: usize, labels: usize },
    #[error("invalid code: {0}")]
    InvalidCode(String),
    #[error("topn must be at least 1")]
    ZeroTopN,
    #[error("index file {path}: bad magic")]
    BadMagic { path: String },
    #[error("index file {path}: unsupported version {version}")]
    UnsupportedVersion { path: String, version: u8 },
    #[error("index file {path}: truncated")]
    Truncated { path: String },
    #[error("index file {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A `k`-bit binary code.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HashCode {
    bits: Vec<u8>,
    k: usize,
}

impl HashCode {
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut bytes = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        HashCode { bits: bytes, k: bits.len() }
    }

    pub fn from_bytes(bytes: Vec<u8>, k: usize) -> Result<Self, IndexError> {
        if bytes.len() != k.div_ceil(8) {
            return Err(IndexError::InvalidCode(format!("{} bytes cannot hold exactly {k} bits", bytes.len())));
        }
        if !k.is_multiple_of(8) {
            if let Some(&last) = bytes.last() {
                if last >> (k % 8) != 0 {
                    return Err(IndexError::InvalidCode("bits beyond k are set".into()));
                }
            }
        }
        Ok(HashCode { bits: bytes, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn bit(&self, i: usize) -> bool {
        i < self.k && self.bits[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.k).map(|i| self.bit(i)).collect()
    }

    /// Popcount of the XOR. Panics if the lengths differ.
    pub fn hamming(&self, other: &HashCode) -> u32 {
        assert_eq!(self.k, other.k, "hamming distance of codes with different k");
        hamming_bytes(&self.bits, &other.bits)
    }
}

#[inline]
fn hamming_bytes(a: &[u8], b: &[u8]) -> u32 {
    let mut d = 0;
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        let x = u64::from_le_bytes(x.try_into().unwrap());
        let y = u64::from_le_bytes(y.try_into().unwrap());
        d += (x ^ y).count_ones();
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        d += (x ^ y).count_ones();
    }
    d
}

/// One search result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hit {
    pub id: u32,
    pub distance: u32,
    pub label: u16,
}

/// Immutable exhaustive index over codes of one length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashIndex {
    k: usize,
    ids: Vec<u32>,
    labels: Vec<u16>,
    /// Codes back to back, `ceil(k/8)` bytes each.
    codes: Vec<u8>,
}

impl HashIndex {
    pub fn build(codes: &[HashCode], ids: &[u32], labels: &[u16]) -> Result<Self, IndexError> {
        let k = codes.first().map_or(0, HashCode::k);
        Self::build_with_k(k, codes, ids, labels)
    }

    /// Like [`HashIndex::build`], but fixes `k` even for an empty input.
    pub fn build_with_k(k: usize, codes: &[HashCode], ids: &[u32], labels: &[u16]) -> Result<Self, IndexError> {
        if codes.len() != ids.len() || codes.len() != labels.len() {
            return Err(IndexError::LengthMismatch {
                codes: codes.len(),
                ids: ids.len(),
                labels: labels.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        let mut packed = Vec::with_capacity(codes.len() * k.div_ceil(8));
        for (code, &id) in codes.iter().zip(ids) {
            if code.k() != k {
                return Err(IndexError::KMismatch { expected: k, found: code.k() });
            }
            if !seen.insert(id) {
                return Err(IndexError::DuplicateId(id));
            }
            packed.extend_from_slice(code.bytes());
        }
        Ok(HashIndex {
            k,
            ids: ids.to_vec(),
            labels: labels.to_vec(),
            codes: packed,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn code(&self, i: usize) -> HashCode {
        let w = self.k.div_ceil(8);
        HashCode {
            bits: self.codes[i * w..(i + 1) * w].to_vec(),
            k: self.k,
        }
    }

    /// Up to `topn` nearest entries by Hamming distance, ties by ascending id.
    pub fn search(&self, query: &HashCode, topn: usize) -> Result<Vec<Hit>, IndexError> {
        self.search_excluding(query, topn, None)
    }

    /// As [`HashIndex::search`], skipping the entry whose id is `exclude`.
    pub fn search_excluding(&self, query: &HashCode, topn: usize, exclude: Option<u32>) -> Result<Vec<Hit>, IndexError> {
        if query.k() != self.k {
            return Err(IndexError::KMismatch {
                expected: self.k,
                found: query.k(),
            });
        }
        if topn == 0 {
            return Err(IndexError::ZeroTopN);
        }
        let w = self.k.div_ceil(8).max(1);
        let dist: Vec<u32> = if self.k == 0 {
            vec![0; self.ids.len()]
        } else {
            self.codes.chunks_exact(w).map(|c| hamming_bytes(c, query.bytes())).collect()
        };
        // Histogram the distances to find the cut-off, then sort the survivors.
        let mut hist = vec![0usize; self.k + 1];
        for (i, &d) in dist.iter().enumerate() {
            if Some(self.ids[i]) != exclude {
                hist[d as usize] += 1;
            }
        }
        let mut cutoff = self.k as u32;
        let mut acc = 0;
        for (d, &c) in hist.iter().enumerate() {
            acc += c;
            if acc >= topn {
                cutoff = d as u32;
                break;
            }
        }
        let mut hits: Vec<Hit> = dist
            .iter()
            .enumerate()
            .filter(|&(i, &d)| d <= cutoff && Some(self.ids[i]) != exclude)
            .map(|(i, &d)| Hit {
                id: self.ids[i],
                distance: d,
                label: self.labels[i],
            })
            .collect();
        hits.sort_unstable_by_key(|h| (h.distance, h.id));
        hits.truncate(topn);
        Ok(hits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let w = self.k.div_ceil(8);
        let mut out = Vec::with_capacity(15 + self.len() * (6 + w));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.k as u16).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&self.ids[i].to_le_bytes());
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            out.extend_from_slice(&self.codes[i * w..(i + 1) * w]);
        }
        out
    }

    /// Parses a complete index file image; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self, IndexError> {
        let truncated = || IndexError::Truncated { path: path.to_string() };
        if bytes.len() < 4 {
            return Err(truncated());
        }
        if &bytes[..4] != MAGIC {
            return Err(IndexError::BadMagic { path: path.to_string() });
        }
        let version = *bytes.get(4).ok_or_else(truncated)?;
        if version != VERSION {
            return Err(IndexError::UnsupportedVersion {
                path: path.to_string(),
                version,
            });
        }
        if bytes.len() < 15 {
            return Err(truncated());
        }
        let k = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
        let n = u64::from_le_bytes(bytes[7..15].try_into().unwrap());
        let w = k.div_ceil(8);
        let record = 6 + w;
        let body = &bytes[15..];
        let expected = (n as u128) * record as u128;
        if (body.len() as u128) < expected {
            return Err(truncated());
        }
        if body.len() as u128 > expected {
            return Err(IndexError::Corrupt {
                path: path.to_string(),
                reason: format!("{} trailing bytes", body.len() as u128 - expected),
            });
        }
        let n = n as usize;
        let mut codes = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for rec in body.chunks_exact(record) {
            ids.push(u32::from_le_bytes(rec[0..4].try_into().unwrap()));
            labels.push(u16::from_le_bytes([rec[4], rec[5]]));
            codes.push(HashCode::from_bytes(rec[6..].to_vec(), k).map_err(|e| IndexError::Corrupt {
                path: path.to_string(),
                reason: e.to_string(),
            })?);
        }
        Self::build_with_k(k, &codes, &ids, &labels).map_err(|e| IndexError::Corrupt {
            path: path.to_string(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = std::fs::read(path).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Exact ranking of real vectors by squared Euclidean distance, ties by
/// ascending id. Returns `(id, distance)` pairs.
pub fn float_search_oracle(vectors: &[Vec<f64>], ids: &[u32], query: &[f64], topn: usize) -> Vec<(u32, f64)> {
    let mut all: Vec<(u32, f64)> = vectors
        .iter()
        .zip(ids)
        .map(|(v, &id)| (id, v.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum()))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(topn);
    all
}
