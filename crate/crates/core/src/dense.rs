//! Single shared encoder and exact dot-product retrieval.
//!
//! Text is tokenized, hashed into `F` buckets and L2-normalized; the encoder
//! is a linear map `W: d × F`, so `E(x) = W·x` and `score(q, d) = E(q)ᵀE(d)`.
//! Queries and documents always go through the same [`EncoderParams`].

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::DocumentRecord;
use crate::lexical::{tokenize, TokenSeq};
use crate::PostId;

pub const DEFAULT_BUCKETS: usize = 1 << 15;
pub const DEFAULT_DIM: usize = 64;

const PARAMS_MAGIC: &[u8; 8] = b"SNIPENC1";
const INDEX_MAGIC: &[u8; 8] = b"SNIPVIX1";

#[derive(Debug, Error)]
pub enum DenseError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid encoder shape: {0}")]
    InvalidShape(String),
    #[error("duplicate document id {0}")]
    DuplicateDoc(PostId),
    #[error("unsupported file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sparse, L2-normalized bag of hashed tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    num_buckets: usize,
    /// Sorted by bucket, no repeats.
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn zero(num_buckets: usize) -> Self {
        Self {
            num_buckets,
            entries: Vec::new(),
        }
    }

    pub fn num_buckets(&self) -> usize {
        self.num_buckets
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }
}

/// Stable across platforms and releases.
pub fn token_bucket(token: &str, num_buckets: usize) -> u32 {
    (xxhash_rust::xxh3::xxh3_64(token.as_bytes()) % num_buckets as u64) as u32
}

/// `num_buckets` must be a power of two.
pub fn featurize(tokens: &TokenSeq, num_buckets: usize) -> FeatureVector {
    debug_assert!(num_buckets.is_power_of_two());
    let mut buckets: Vec<u32> = tokens.iter().map(|t| token_bucket(t, num_buckets)).collect();
    buckets.sort_unstable();
    let mut entries: Vec<(u32, f64)> = Vec::new();
    for b in buckets {
        match entries.last_mut() {
            Some((last, w)) if *last == b => *w += 1.0,
            _ => entries.push((b, 1.0)),
        }
    }
    let norm = entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    for (_, w) in &mut entries {
        *w /= norm;
    }
    FeatureVector { num_buckets, entries }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `W` stored bucket-major: column `b` is `weights[b*dim .. (b+1)*dim]`, so a
/// sparse input touches contiguous memory.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dim: usize,
    buckets: usize,
    seed: u64,
    weights: Vec<f64>,
}

impl EncoderParams {
    fn check_shape(dim: usize, buckets: usize) -> Result<(), DenseError> {
        if dim < 2 {
            return Err(DenseError::InvalidShape(format!("dimension {dim} < 2")));
        }
        if !buckets.is_power_of_two() {
            return Err(DenseError::InvalidShape(format!(
                "{buckets} buckets is not a power of two"
            )));
        }
        Ok(())
    }

    /// Entries drawn i.i.d. from `U[-1/√F, 1/√F]`.
    pub fn random(dim: usize, buckets: usize, seed: u64) -> Result<Self, DenseError> {
        Self::check_shape(dim, buckets)?;
        let bound = 1.0 / (buckets as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..dim * buckets).map(|_| rng.gen_range(-bound..=bound)).collect();
        Ok(Self {
            dim,
            buckets,
            seed,
            weights,
        })
    }

    pub fn zeros(dim: usize, buckets: usize) -> Result<Self, DenseError> {
        Self::from_weights(dim, buckets, 0, vec![0.0; dim * buckets])
    }

    /// `weights` in bucket-major layout.
    pub fn from_weights(dim: usize, buckets: usize, seed: u64, weights: Vec<f64>) -> Result<Self, DenseError> {
        Self::check_shape(dim, buckets)?;
        if weights.len() != dim * buckets {
            return Err(DenseError::DimensionMismatch {
                expected: dim * buckets,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(DenseError::InvalidShape("non-finite weight".into()));
        }
        Ok(Self {
            dim,
            buckets,
            seed,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn column(&self, bucket: usize) -> &[f64] {
        &self.weights[bucket * self.dim..(bucket + 1) * self.dim]
    }

    /// `W[row, bucket]`
    pub fn get(&self, row: usize, bucket: usize) -> f64 {
        self.weights[bucket * self.dim + row]
    }

    pub fn encode(&self, fv: &FeatureVector) -> Result<EmbeddingVector, DenseError> {
        if fv.num_buckets != self.buckets {
            return Err(DenseError::DimensionMismatch {
                expected: self.buckets,
                got: fv.num_buckets,
            });
        }
        let mut out = vec![0.0; self.dim];
        for &(b, w) in &fv.entries {
            for (o, c) in out.iter_mut().zip(self.column(b as usize)) {
                *o += w * c;
            }
        }
        Ok(EmbeddingVector(out))
    }

    pub fn encode_tokens(&self, tokens: &TokenSeq) -> EmbeddingVector {
        self.encode(&featurize(tokens, self.buckets))
            .expect("features built with the encoder's bucket count")
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(PARAMS_MAGIC)?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.buckets as u32).to_le_bytes())?;
        out.write_all(&self.seed.to_le_bytes())?;
        write_f64s(&mut out, &self.weights)
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, DenseError> {
        expect_magic(&mut input, PARAMS_MAGIC)?;
        let dim = read_u32(&mut input)? as usize;
        let buckets = read_u32(&mut input)? as usize;
        let seed = read_u64(&mut input)?;
        Self::check_shape(dim, buckets)?;
        let weights = read_f64s(&mut input, dim * buckets)?;
        Self::from_weights(dim, buckets, seed, weights)
    }
}

pub fn encode(params: &EncoderParams, fv: &FeatureVector) -> Result<EmbeddingVector, DenseError> {
    params.encode(fv)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dot_score(q: &EmbeddingVector, d: &EmbeddingVector) -> Result<f64, DenseError> {
    if q.dim() != d.dim() {
        return Err(DenseError::DimensionMismatch {
            expected: q.dim(),
            got: d.dim(),
        });
    }
    Ok(dot(&q.0, &d.0))
}

/// Document embeddings, one row per document id.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    doc_ids: Vec<PostId>,
    dim: usize,
    embeddings: Vec<f64>,
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn doc_ids(&self) -> &[PostId] {
        &self.doc_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn contains(&self, doc: PostId) -> bool {
        self.doc_ids.contains(&doc)
    }
}

/// Document tokens, head-truncated to `max_doc_len` when given.
pub fn document_tokens(text: &str, max_doc_len: Option<usize>) -> TokenSeq {
    let tokens = tokenize(text);
    match max_doc_len {
        Some(max) if tokens.len() > max => TokenSeq::new(tokens.into_inner().into_iter().take(max).collect()),
        _ => tokens,
    }
}

pub fn build_vector_index(
    params: &EncoderParams,
    docs: &[DocumentRecord],
    max_doc_len: Option<usize>,
) -> Result<VectorIndex, DenseError> {
    let mut seen = HashSet::with_capacity(docs.len());
    for d in docs {
        if !seen.insert(d.doc_id) {
            return Err(DenseError::DuplicateDoc(d.doc_id));
        }
    }
    let rows: Vec<EmbeddingVector> = docs
        .par_iter()
        .map(|d| params.encode_tokens(&document_tokens(&d.text, max_doc_len)))
        .collect();
    Ok(VectorIndex {
        doc_ids: docs.iter().map(|d| d.doc_id).collect(),
        dim: params.dim(),
        embeddings: rows.into_iter().flat_map(|e| e.0).collect(),
    })
}

/// Exact top-k by descending dot product, ties by ascending doc id.
pub fn dense_search(index: &VectorIndex, q: &EmbeddingVector, k: usize) -> Vec<(PostId, f64)> {
    if index.is_empty() || k == 0 {
        return Vec::new();
    }
    let mut scored: Vec<(PostId, f64)> = index
        .doc_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, dot(&q.0, index.row(i))))
        .collect();
    let order = |a: &(PostId, f64), b: &(PostId, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    scored
}

/// Encoder plus the document index it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseRetriever {
    pub params: EncoderParams,
    pub index: VectorIndex,
}

impl DenseRetriever {
    pub fn build(
        params: EncoderParams,
        docs: &[DocumentRecord],
        max_doc_len: Option<usize>,
    ) -> Result<Self, DenseError> {
        let index = build_vector_index(&params, docs, max_doc_len)?;
        Ok(Self { params, index })
    }

    pub fn search(&self, query: &TokenSeq, k: usize) -> Vec<(PostId, f64)> {
        dense_search(&self.index, &self.params.encode_tokens(query), k)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(INDEX_MAGIC)?;
        self.params.write_to(&mut out)?;
        out.write_all(&(self.index.doc_ids.len() as u64).to_le_bytes())?;
        for id in &self.index.doc_ids {
            out.write_all(&id.to_le_bytes())?;
        }
        write_f64s(&mut out, &self.index.embeddings)
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, DenseError> {
        expect_magic(&mut input, INDEX_MAGIC)?;
        let params = EncoderParams::read_from(&mut input)?;
        let n = read_u64(&mut input)? as usize;
        let doc_ids = (0..n).map(|_| read_u64(&mut input)).collect::<Result<Vec<_>, _>>()?;
        let embeddings = read_f64s(&mut input, n * params.dim())?;
        let dim = params.dim();
        Ok(Self {
            params,
            index: VectorIndex {
                doc_ids,
                dim,
                embeddings,
            },
        })
    }
}

/// True when the leading bytes carry the dense index header.
pub fn is_dense_index(prefix: &[u8]) -> bool {
    prefix.starts_with(INDEX_MAGIC)
}

fn expect_magic<R: Read>(input: &mut R, magic: &[u8; 8]) -> Result<(), DenseError> {
    let mut got = [0u8; 8];
    input.read_exact(&mut got)?;
    if &got != magic {
        return Err(DenseError::Format(format!(
            "expected header {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(input: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

fn read_f64s<R: Read>(input: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
