//! Shared tokenizer and an Okapi BM25 inverted index.
//!
//! Scoring follows
//!
//! ```text
//! score(q, d) = Σ_{t ∈ q} idf(t) · tf(t,d)·(k1 + 1) / (tf(t,d) + k1·(1 − b + b·|d|/avgdl))
//! idf(t)      = ln((|D| + 1) / (df(t) + 0.5))
//! ```
//!
//! `q` is a token sequence, so a repeated query token contributes once per
//! occurrence. The idf variant has no lower clamp; it is positive whenever
//! `df ≤ |D|`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DocumentRecord;
use crate::PostId;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

const INDEX_FORMAT: &str = "snippet-search/bm25";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate document id {0}")]
    DuplicateDoc(PostId),
    #[error("unknown document id {0}")]
    UnknownDoc(PostId),
    #[error("unsupported index file: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered, non-empty tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    /// Drops empty strings so the no-empty-token invariant holds.
    pub fn new(tokens: Vec<String>) -> Self {
        Self(tokens.into_iter().filter(|t| !t.is_empty()).collect())
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }

    pub fn concat(mut self, other: TokenSeq) -> Self {
        self.0.extend(other.0);
        self
    }
}

impl<'a> IntoIterator for &'a TokenSeq {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self::new(iter.into_iter().map(Into::into).collect())
    }
}

/// Lowercases and splits on anything outside `[a-z0-9_]`.
pub fn tokenize(text: &str) -> TokenSeq {
    let lower = text.to_lowercase();
    TokenSeq(
        lower
            .split(|c: char| !(c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'))
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: PostId,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    format: String,
    version: u32,
    k1: f64,
    b: f64,
    /// Postings per term, sorted by doc id.
    postings: BTreeMap<String, Vec<Posting>>,
    doc_len: BTreeMap<PostId, u32>,
    total_len: u64,
}

pub fn build_bm25_index(docs: &[DocumentRecord], k1: f64, b: f64) -> Result<Bm25Index, IndexError> {
    let mut doc_len = BTreeMap::new();
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut total_len = 0u64;
    for doc in docs {
        let tokens = tokenize(&doc.text);
        if doc_len.insert(doc.doc_id, tokens.len() as u32).is_some() {
            return Err(IndexError::DuplicateDoc(doc.doc_id));
        }
        total_len += tokens.len() as u64;
        let mut counts: HashMap<&str, u32> = HashMap::new();
        for t in &tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        for (term, tf) in counts {
            postings
                .entry(term.to_owned())
                .or_default()
                .push(Posting { doc: doc.doc_id, tf });
        }
    }
    for list in postings.values_mut() {
        list.sort_by_key(|p| p.doc);
    }
    Ok(Bm25Index {
        format: INDEX_FORMAT.to_owned(),
        version: INDEX_VERSION,
        k1,
        b,
        postings,
        doc_len,
        total_len,
    })
}

impl Bm25Index {
    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn doc_count(&self) -> usize {
        self.doc_len.len()
    }

    pub fn total_len(&self) -> u64 {
        self.total_len
    }

    pub fn doc_len(&self, doc: PostId) -> Option<u32> {
        self.doc_len.get(&doc).copied()
    }

    pub fn contains(&self, doc: PostId) -> bool {
        self.doc_len.contains_key(&doc)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = PostId> + '_ {
        self.doc_len.keys().copied()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn tf(&self, term: &str, doc: PostId) -> u32 {
        self.postings
            .get(term)
            .and_then(|list| list.binary_search_by_key(&doc, |p| p.doc).ok().map(|i| list[i].tf))
            .unwrap_or(0)
    }

    pub fn avgdl(&self) -> f64 {
        if self.doc_len.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.doc_len.len() as f64
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        ((self.doc_count() as f64 + 1.0) / (self.df(term) as f64 + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, doc_len: u32, idf: f64) -> f64 {
        let tf = f64::from(tf);
        let norm = 1.0 - self.b + self.b * f64::from(doc_len) / self.avgdl();
        idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }

    pub fn score(&self, query: &TokenSeq, doc: PostId) -> Result<f64, IndexError> {
        let len = self.doc_len(doc).ok_or(IndexError::UnknownDoc(doc))?;
        Ok(query
            .iter()
            .map(|t| match self.tf(t, doc) {
                0 => 0.0,
                tf => self.term_weight(tf, len, self.idf(t)),
            })
            .sum())
    }

    /// Top-k by descending score, ties by ascending doc id. Documents sharing
    /// no term with the query score 0 and still fill the list.
    pub fn search(&self, query: &TokenSeq, k: usize) -> Vec<(PostId, f64)> {
        let mut acc: BTreeMap<PostId, f64> = self.doc_len.keys().map(|&d| (d, 0.0)).collect();
        for term in query {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for p in list {
                let w = self.term_weight(p.tf, self.doc_len[&p.doc], idf);
                *acc.get_mut(&p.doc).expect("posting for indexed doc") += w;
            }
        }
        let mut ranked: Vec<(PostId, f64)> = acc.into_iter().collect();
        crate::rank_desc(&mut ranked);
        ranked.truncate(k);
        ranked
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<(), IndexError> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self, IndexError> {
        let index: Self = serde_json::from_reader(input)?;
        if index.format != INDEX_FORMAT || index.version != INDEX_VERSION {
            return Err(IndexError::Format(format!("{} v{}", index.format, index.version)));
        }
        Ok(index)
    }
}

pub fn idf(index: &Bm25Index, term: &str) -> f64 {
    index.idf(term)
}

pub fn bm25_score(index: &Bm25Index, query: &TokenSeq, doc: PostId) -> Result<f64, IndexError> {
    index.score(query, doc)
}

pub fn bm25_search(index: &Bm25Index, query: &TokenSeq, k: usize) -> Vec<(PostId, f64)> {
    index.search(query, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CompositionPolicy;
    use proptest::prelude::*;

    fn doc(id: PostId, text: &str) -> DocumentRecord {
        DocumentRecord {
            doc_id: id,
            text: text.to_owned(),
            policy_used: CompositionPolicy::InferenceFull,
        }
    }

    fn toy() -> Bm25Index {
        build_bm25_index(&[doc(1, "a b"), doc(2, "a"), doc(3, "c")], DEFAULT_K1, DEFAULT_B).unwrap()
    }

    fn q(tokens: &[&str]) -> TokenSeq {
        tokens.iter().copied().collect()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(
            tokenize("ValueError: invalid literal"),
            q(&["valueerror", "invalid", "literal"])
        );
        assert_eq!(tokenize("x=1"), q(&["x", "1"]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("self.__init__()"), q(&["self", "__init__"]));
    }

    #[test]
    fn counting() {
        let idx = toy();
        assert_eq!(idx.doc_count(), 3);
        assert_eq!(idx.total_len(), 4);
        assert_eq!(idx.df("a"), 2);
        let rep = build_bm25_index(&[doc(9, "a a a")], 1.2, 0.75).unwrap();
        assert_eq!(rep.tf("a", 9), 3);
    }

    #[test]
    fn duplicate_doc_is_rejected() {
        let err = build_bm25_index(&[doc(1, "a"), doc(1, "b")], 1.2, 0.75).unwrap_err();
        assert!(matches!(err, IndexError::DuplicateDoc(1)));
    }

    #[test]
    fn empty_index() {
        let idx = build_bm25_index(&[], 1.2, 0.75).unwrap();
        assert_eq!(idx.doc_count(), 0);
        assert!(idx.search(&q(&["a"]), 5).is_empty());
        assert!((idx.idf("a") - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn idf_values() {
        let idx = toy();
        assert!((idx.idf("a") - 1.6f64.ln()).abs() < 1e-12);
        assert!((idx.idf("zzz") - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn toy_scores_and_ranking() {
        let idx = toy();
        let query = q(&["a"]);
        let s1 = idx.score(&query, 1).unwrap();
        let s2 = idx.score(&query, 2).unwrap();
        let s3 = idx.score(&query, 3).unwrap();
        assert!((s2 - 0.5236).abs() < 1e-4, "{s2}");
        assert!((s1 - 0.3902).abs() < 1e-4, "{s1}");
        assert_eq!(s3, 0.0);
        let top: Vec<_> = idx.search(&query, 2).into_iter().map(|(d, _)| d).collect();
        assert_eq!(top, vec![2, 1]);
        assert_eq!(idx.search(&query, 10).len(), 3);
    }

    #[test]
    fn unknown_terms_and_ties() {
        let idx = toy();
        assert_eq!(idx.score(&q(&["nope"]), 1).unwrap(), 0.0);
        let ranked = idx.search(&q(&["nope"]), 3);
        assert_eq!(ranked, vec![(1, 0.0), (2, 0.0), (3, 0.0)]);
        assert!(matches!(idx.score(&q(&["a"]), 42), Err(IndexError::UnknownDoc(42))));
    }

    #[test]
    fn repeated_query_tokens_count_per_occurrence() {
        let idx = toy();
        let once = idx.score(&q(&["a"]), 1).unwrap();
        let twice = idx.score(&q(&["a", "a"]), 1).unwrap();
        assert!((twice - 2.0 * once).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_checks_header() {
        let idx = toy();
        let mut buf = Vec::new();
        idx.write_json(&mut buf).unwrap();
        assert_eq!(Bm25Index::read_json(buf.as_slice()).unwrap(), idx);
        let bad = String::from_utf8(buf)
            .unwrap()
            .replace("\"version\":1", "\"version\":7");
        assert!(matches!(
            Bm25Index::read_json(bad.as_bytes()),
            Err(IndexError::Format(_))
        ));
    }

    #[test]
    fn adding_a_document_keeps_existing_term_frequencies() {
        let before = toy();
        let after = build_bm25_index(&[doc(1, "a b"), doc(2, "a"), doc(3, "c"), doc(4, "a c c")], 1.2, 0.75).unwrap();
        for d in [1, 2, 3] {
            for t in ["a", "b", "c"] {
                assert_eq!(before.tf(t, d), after.tf(t, d));
            }
            assert_eq!(before.doc_len(d), after.doc_len(d));
        }
        // score changes only via idf and avgdl
        let recomputed = after.idf("a") * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * 1.0 / after.avgdl()));
        assert!((after.score(&q(&["a"]), 2).unwrap() - recomputed).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn score_is_monotone_in_tf(extra in 0usize..6, filler in 1usize..6) {
            // Fix |d| by swapping filler tokens for "a" one at a time.
            let len = extra + filler;
            let build = |a_count: usize| {
                let text: Vec<&str> = std::iter::repeat_n("a", a_count)
                    .chain(std::iter::repeat_n("z", len - a_count)).collect();
                build_bm25_index(&[doc(1, &text.join(" ")), doc(2, "a y"), doc(3, "a x")], 1.2, 0.75).unwrap()
            };
            let lo = build(extra).score(&q(&["a"]), 1).unwrap();
            let hi = build(extra + 1).score(&q(&["a"]), 1).unwrap();
            prop_assert!(hi >= lo);
        }

        #[test]
        fn search_is_sorted_with_tie_rule(texts in prop::collection::vec("[a-e]( [a-e]){0,6}", 1..20),
                                          query in prop::collection::vec("[a-f]", 0..4)) {
            let docs: Vec<_> = texts.iter().enumerate().map(|(i, t)| doc(i as PostId + 1, t)).collect();
            let idx = build_bm25_index(&docs, 1.2, 0.75).unwrap();
            let query: TokenSeq = query.into_iter().collect();
            let ranked = idx.search(&query, docs.len());
            prop_assert_eq!(ranked.len(), docs.len());
            for w in ranked.windows(2) {
                prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
            }
            prop_assert_eq!(&ranked, &idx.search(&query, docs.len()));
        }
    }
}
