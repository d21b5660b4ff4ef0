//! Tokenization and word vectors.
//!
//! Vectors for tokens missing from the loaded file are built from hashed
//! character n-grams. Bucket vectors are never materialized: each coordinate
//! is a pure function of (seed, bucket, coordinate), so the 2^21-bucket table
//! costs no memory and stays reproducible.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot read embeddings: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: expected {expected} values, found {found}")]
    Dimension {
        line: usize,
        expected: usize,
        found: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub split_punctuation: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            split_punctuation: true,
        }
    }
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Whitespace split, then leading and trailing punctuation characters are
/// detached one per token. Internal punctuation (hyphens, dots) stays.
pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Vec<String> {
    let text = if cfg.lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if !cfg.split_punctuation {
            out.push(chunk.to_string());
            continue;
        }
        let chars: Vec<char> = chunk.chars().collect();
        let start = chars.iter().position(|c| !is_punct(*c));
        let Some(start) = start else {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        };
        let end = chars.iter().rposition(|c| !is_punct(*c)).unwrap() + 1;
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        out.push(chars[start..end].iter().collect());
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NgramHashConfig {
    pub buckets: u64,
    pub min_n: usize,
    pub max_n: usize,
    pub seed: u64,
}

impl Default for NgramHashConfig {
    fn default() -> Self {
        Self {
            buckets: 1 << 21,
            min_n: 3,
            max_n: 6,
            seed: 0x5eed_0f_0071,
        }
    }
}

/// Half-width of the uniform range bucket coordinates are drawn from.
pub const OOV_INIT_RANGE: f64 = 0.05;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64 ^ splitmix64(seed);
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Character n-grams of `<token>` for n in the configured range.
pub fn char_ngrams(token: &str, cfg: &NgramHashConfig) -> Vec<String> {
    let padded: Vec<char> = std::iter::once('<')
        .chain(token.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut grams = Vec::new();
    for n in cfg.min_n..=cfg.max_n {
        if n > padded.len() {
            break;
        }
        for w in padded.windows(n) {
            grams.push(w.iter().collect());
        }
    }
    grams
}

pub fn ngram_bucket(gram: &str, cfg: &NgramHashConfig) -> u64 {
    fnv1a(gram.as_bytes(), cfg.seed) % cfg.buckets
}

fn bucket_coordinate(cfg: &NgramHashConfig, bucket: u64, coord: usize) -> f64 {
    let h = splitmix64(splitmix64(cfg.seed ^ bucket.wrapping_mul(0x2545_f491_4f6c_dd1d)) ^ coord as u64);
    // 53 random mantissa bits -> [0, 1)
    let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
    (2.0 * unit - 1.0) * OOV_INIT_RANGE
}

/// Loaded word vectors plus the hashed n-gram fallback.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vocab: HashMap<String, usize>,
    matrix: Vec<f64>,
    ngram: NgramHashConfig,
    fingerprint: u64,
}

impl EmbeddingStore {
    /// Store with no pretrained vectors; every token takes the n-gram path.
    pub fn hashed_only(dim: usize, ngram: NgramHashConfig) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"hashed-only");
        hasher.update((dim as u64).to_le_bytes());
        hasher.update(ngram.seed.to_le_bytes());
        hasher.update(ngram.buckets.to_le_bytes());
        Self {
            dim,
            vocab: HashMap::new(),
            matrix: Vec::new(),
            ngram,
            fingerprint: fingerprint_of(&hasher.finalize()),
        }
    }

    pub fn from_vectors(
        dim: usize,
        entries: impl IntoIterator<Item = (String, Vec<f64>)>,
        ngram: NgramHashConfig,
    ) -> Self {
        let mut store = Self::hashed_only(dim, ngram);
        let mut hasher = Sha256::new();
        for (token, v) in entries {
            assert_eq!(v.len(), dim, "vector for `{token}` has wrong dimension");
            hasher.update(token.as_bytes());
            for x in &v {
                hasher.update(x.to_le_bytes());
            }
            if store.vocab.contains_key(&token) {
                continue;
            }
            store.vocab.insert(token, store.matrix.len() / dim);
            store.matrix.extend(v);
        }
        store.fingerprint = fingerprint_of(&hasher.finalize());
        store
    }

    /// Reads the whitespace-separated text format: optional `count dim`
    /// header, then one token followed by `dim` floats per line.
    pub fn load(path: impl AsRef<Path>, ngram: NgramHashConfig) -> Result<Self, EmbedError> {
        let bytes = fs::read(path.as_ref())?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| EmbedError::Parse {
            line: 0,
            msg: format!("invalid UTF-8: {e}"),
        })?;
        let mut dim: Option<usize> = None;
        let mut declared_count = None;
        let mut vocab = HashMap::new();
        let mut matrix = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if i == 0 && fields.len() == 2 {
                if let (Ok(c), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                    declared_count = Some(c);
                    dim = Some(d);
                    continue;
                }
            }
            let token = fields[0];
            let values = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|e| EmbedError::Parse {
                        line: lineno,
                        msg: format!("bad float `{f}`: {e}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if values.is_empty() {
                return Err(EmbedError::Parse {
                    line: lineno,
                    msg: format!("token `{token}` has no values"),
                });
            }
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                return Err(EmbedError::Parse {
                    line: lineno,
                    msg: format!("non-finite value {bad}"),
                });
            }
            let d = *dim.get_or_insert(values.len());
            if values.len() != d {
                return Err(EmbedError::Dimension {
                    line: lineno,
                    expected: d,
                    found: values.len(),
                });
            }
            if vocab.contains_key(token) {
                log::warn!("line {lineno}: duplicate token `{token}` ignored");
                continue;
            }
            vocab.insert(token.to_string(), matrix.len() / d);
            matrix.extend(values);
        }
        let dim = dim.ok_or(EmbedError::Parse {
            line: 0,
            msg: "no vectors found".into(),
        })?;
        if let Some(c) = declared_count {
            if c != vocab.len() {
                log::warn!("header declares {c} vectors, file holds {}", vocab.len());
            }
        }
        Ok(Self {
            dim,
            vocab,
            matrix,
            ngram,
            fingerprint: fingerprint_of(&Sha256::digest(&bytes)),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn ngram_config(&self) -> &NgramHashConfig {
        &self.ngram
    }

    /// 64-bit content hash identifying the vectors this store was built from.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocab.contains_key(token)
    }

    pub fn lookup(&self, token: &str) -> Option<&[f64]> {
        self.vocab
            .get(token)
            .map(|&row| &self.matrix[row * self.dim..(row + 1) * self.dim])
    }

    /// Stored row for known tokens, otherwise the mean of hashed n-gram
    /// bucket vectors.
    pub fn embed_token(&self, token: &str) -> Vec<f64> {
        if let Some(v) = self.lookup(token) {
            return v.to_vec();
        }
        self.oov_vector(token)
    }

    pub fn oov_vector(&self, token: &str) -> Vec<f64> {
        let grams = char_ngrams(token, &self.ngram);
        let mut v = vec![0.0; self.dim];
        if grams.is_empty() {
            return v;
        }
        for g in &grams {
            let b = ngram_bucket(g, &self.ngram);
            for (j, x) in v.iter_mut().enumerate() {
                *x += bucket_coordinate(&self.ngram, b, j);
            }
        }
        let n = grams.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    pub fn embed_sequence<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<Vec<f64>> {
        tokens.iter().map(|t| self.embed_token(t.as_ref())).collect()
    }
}

fn fingerprint_of(digest: &[u8]) -> u64 {
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
