//! Per-post embeddings.
//!
//! Post vectors come either from a precomputed file (the output of an
//! external sentence encoder) or from a deterministic hashed bag of tokens.
//!
//! The precomputed format is JSONL: a header `{"dim": d, "count": n}`
//! followed by `n` records `{"post_id": "...", "vector": [d floats]}`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{Event, Post};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Width of the encoder output the precomputed path is normally fed with.
pub const ENCODER_DIM: usize = 768;
/// Width used for desk-scale runs with hashed embeddings.
pub const DESK_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingProvider {
    Precomputed {
        dim: usize,
        vectors: HashMap<String, Vec<f64>>,
    },
    Hashed {
        dim: usize,
        seed: u64,
    },
}

#[derive(Deserialize)]
struct Header {
    dim: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    post_id: String,
    vector: Vec<f64>,
}

impl EmbeddingProvider {
    pub fn hashed(dim: usize, seed: u64) -> Self {
        EmbeddingProvider::Hashed { dim, seed }
    }

    /// Parses a provider string: `hashed:<dim>`, `hashed:<dim>:<seed>`, or a
    /// path to a precomputed file.
    pub fn from_spec(spec: &str) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("hashed:") {
            let mut parts = rest.split(':');
            let dim = parts
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&d| d >= 1)
                .ok_or_else(|| Error::Config(format!("bad hashed embedding spec {spec:?}")))?;
            let seed = match parts.next() {
                Some(s) => s
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad hashed embedding seed in {spec:?}")))?,
                None => 0,
            };
            return Ok(Self::hashed(dim, seed));
        }
        load_precomputed(Path::new(spec))
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Precomputed { dim, .. } | EmbeddingProvider::Hashed { dim, .. } => *dim,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EmbeddingProvider::Precomputed { .. } => "precomputed",
            EmbeddingProvider::Hashed { .. } => "hashed",
        }
    }

    pub fn embed_post(&self, post: &Post) -> Result<Vec<f64>> {
        match self {
            EmbeddingProvider::Precomputed { vectors, .. } => vectors
                .get(&post.post_id)
                .cloned()
                .ok_or_else(|| Error::Resolution(post.post_id.clone())),
            EmbeddingProvider::Hashed { dim, seed } => Ok(hashed_embed(&post.text, *dim, *seed)),
        }
    }
}

pub fn load_precomputed(path: &Path) -> Result<EmbeddingProvider> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fmt_err = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| fmt_err(1, "missing header".into()))?;
    let header: Header = serde_json::from_str(first).map_err(|e| fmt_err(1, e.to_string()))?;
    if header.dim == 0 {
        return Err(fmt_err(1, "header dim must be positive".into()));
    }
    let mut vectors = HashMap::with_capacity(header.count);
    for (i, line) in lines {
        let rec: Record = serde_json::from_str(line).map_err(|e| fmt_err(i + 1, e.to_string()))?;
        if rec.vector.len() != header.dim {
            return Err(fmt_err(
                i + 1,
                format!(
                    "post {:?} has {} values, header says {}",
                    rec.post_id,
                    rec.vector.len(),
                    header.dim
                ),
            ));
        }
        if rec.vector.iter().any(|v| !v.is_finite()) {
            return Err(fmt_err(i + 1, format!("post {:?} has non-finite values", rec.post_id)));
        }
        vectors.insert(rec.post_id, rec.vector);
    }
    if vectors.len() != header.count {
        log::warn!(
            "{}: header announces {} vectors, found {}",
            path.display(),
            header.count,
            vectors.len()
        );
    }
    Ok(EmbeddingProvider::Precomputed {
        dim: header.dim,
        vectors,
    })
}

/// Writes vectors in the precomputed format, sorted by post id.
pub fn write_precomputed(path: &Path, dim: usize, vectors: &HashMap<String, Vec<f64>>) -> Result<()> {
    let mut ids: Vec<&String> = vectors.keys().collect();
    ids.sort();
    let mut out = serde_json::json!({"dim": dim, "count": vectors.len()}).to_string();
    out.push('\n');
    for id in ids {
        out.push_str(&serde_json::to_string(&Record {
            post_id: id.clone(),
            vector: vectors[id].clone(),
        })?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // kana
        | 0x3400..=0x4DBF    // CJK ext A
        | 0x4E00..=0x9FFF    // CJK unified
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2FA1F) // ext B and beyond
}

/// Lowercased word tokens; every CJK codepoint is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if is_cjk(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        } else if c.is_alphanumeric() || c == '_' {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Signed feature hashing of [`tokenize`]d text, L2-normalized.
///
/// The seed is hashed in as an 8-byte little-endian prefix. Bucket is
/// `hash mod dim`; bit 63 set means the token counts −1.
pub fn hashed_embed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut v = hashed_counts(text, dim, seed);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Unnormalized signed bucket counts behind [`hashed_embed`].
pub fn hashed_counts(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim.max(1)];
    for tok in tokenize(text) {
        let h = fnv1a(seed, tok.as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[bucket] += sign;
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub event_id: String,
    /// `n × d`, row 0 is the claim.
    pub rows: Tensor,
    pub provenance: &'static str,
}

pub fn embed_event(event: &Event, provider: &EmbeddingProvider) -> Result<EmbeddingMatrix> {
    let rows = event
        .posts()
        .iter()
        .map(|p| provider.embed_post(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingMatrix {
        event_id: event.event_id.clone(),
        rows: Tensor::from_rows(&rows)?,
        provenance: provider.kind(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Label;
    use std::io::Write;

    fn post(id: &str, parent: Option<&str>, text: &str, ts: i64) -> Post {
        Post {
            post_id: id.into(),
            parent_id: parent.map(Into::into),
            text: text.into(),
            timestamp: ts,
        }
    }

    #[test]
    fn tokenizer_handles_punctuation_and_cjk() {
        assert_eq!(tokenize("Hello, World!"), ["hello", "world"]);
        assert_eq!(tokenize("病毒is假的"), ["病", "毒", "is", "假", "的"]);
        assert!(tokenize("  ...  ").is_empty());
    }

    #[test]
    fn empty_text_is_zero() {
        assert!(hashed_embed("", 16, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_texts_identical_vectors() {
        assert_eq!(hashed_embed("just flu", 32, 5), hashed_embed("just flu", 32, 5));
    }

    #[test]
    fn repeated_token_counts_twice() {
        let counts = hashed_counts("a a b", 8, 0);
        let mut mags: Vec<f64> = counts.iter().map(|v| v.abs()).filter(|&v| v > 0.0).collect();
        mags.sort_by(f64::total_cmp);
        assert_eq!(mags, vec![1.0, 2.0]);
    }

    #[test]
    fn unit_norm_or_zero() {
        for text in ["", "one", "several different words here", "重复 重复"] {
            let n: f64 = hashed_embed(text, 32, 1).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn precomputed_lookup() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"dim": 4, "count": 2}}"#).unwrap();
        writeln!(f, r#"{{"post_id": "p1", "vector": [1, 2, 3, 4]}}"#).unwrap();
        writeln!(f, r#"{{"post_id": "p2", "vector": [0, 0, 0, 1]}}"#).unwrap();
        let p = load_precomputed(f.path()).unwrap();
        assert_eq!(p.dim(), 4);
        assert_eq!(p.embed_post(&post("p1", None, "", 0)).unwrap().len(), 4);
        assert_eq!(p.embed_post(&post("p2", None, "", 0)).unwrap().len(), 4);
        assert!(matches!(
            p.embed_post(&post("nope", None, "", 0)),
            Err(Error::Resolution(id)) if id == "nope"
        ));
    }

    #[test]
    fn precomputed_dimension_mismatch() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"dim": 3, "count": 1}}"#).unwrap();
        writeln!(f, r#"{{"post_id": "p1", "vector": [1, 2]}}"#).unwrap();
        assert!(matches!(load_precomputed(f.path()), Err(Error::Format { line: 2, .. })));
    }

    #[test]
    fn event_rows_follow_post_order() {
        let e = Event::new(
            "e",
            Label::Rumor,
            post("c", None, "the claim", 0),
            vec![post("r2", Some("r1"), "second", 20), post("r1", Some("c"), "first", 10)],
        )
        .unwrap();
        let p = EmbeddingProvider::hashed(DESK_DIM, 0);
        let m = embed_event(&e, &p).unwrap();
        assert_eq!(m.rows.shape(), &[3, DESK_DIM]);
        assert_eq!(m.rows.row(1), hashed_embed("first", DESK_DIM, 0).as_slice());
        assert_eq!(m.rows.row(2), hashed_embed("second", DESK_DIM, 0).as_slice());
    }

    #[test]
    fn provider_spec_parsing() {
        assert_eq!(
            EmbeddingProvider::from_spec("hashed:16").unwrap(),
            EmbeddingProvider::hashed(16, 0)
        );
        assert_eq!(
            EmbeddingProvider::from_spec("hashed:8:3").unwrap(),
            EmbeddingProvider::hashed(8, 3)
        );
        assert!(EmbeddingProvider::from_spec("hashed:0").is_err());
    }
}
