//! Search by code snippet: rank forum answers for a query made of source code
//! and/or an error traceback.
//!
//! The pipeline runs dump ingestion ([`ingest`]), field extraction
//! ([`preprocess`]), corpus construction ([`corpus`]), a BM25 baseline
//! ([`lexical`]), a single shared dense encoder ([`dense`]) trained
//! contrastively with in-batch and self-mined hard negatives ([`trainer`]),
//! and Recall@k evaluation ([`eval`]). [`demo`] wires all of it together on a
//! generated corpus.

pub mod corpus;
pub mod demo;
pub mod dense;
pub mod eval;
pub mod ingest;
pub mod jsonl;
pub mod lexical;
pub mod preprocess;
pub mod trainer;

/// Dump post id. Documents are keyed by the id of the question they answer.
pub type PostId = u64;

/// Sorts by descending score, breaking ties by ascending id.
pub(crate) fn rank_desc(ranked: &mut [(PostId, f64)]) {
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}
