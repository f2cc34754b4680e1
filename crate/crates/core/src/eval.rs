//! Recall@k over evaluation pairs, and Δ tables comparing configurations.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EvalPair;
use crate::dense::DenseRetriever;
use crate::lexical::{Bm25Index, TokenSeq};
use crate::PostId;

pub const DEFAULT_KS: [usize; 4] = [5, 10, 20, 50];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no evaluation pairs")]
    NoPairs,
    #[error("reports disagree on k values: {0:?} vs {1:?}")]
    MismatchedKs(Vec<usize>, Vec<usize>),
    #[error("reports disagree on query count: {0} vs {1}")]
    MismatchedQueryCount(usize, usize),
    #[error("ranked list for query {0} repeats a document")]
    DuplicateInRanking(usize),
}

/// Anything that ranks documents for a token query.
pub trait Retriever: Sync {
    fn label(&self) -> String;
    fn search(&self, query: &TokenSeq, k: usize) -> Vec<(PostId, f64)>;
    fn contains(&self, doc: PostId) -> bool;
    fn doc_count(&self) -> usize;
}

impl Retriever for Bm25Index {
    fn label(&self) -> String {
        "BM25".to_owned()
    }

    fn search(&self, query: &TokenSeq, k: usize) -> Vec<(PostId, f64)> {
        Bm25Index::search(self, query, k)
    }

    fn contains(&self, doc: PostId) -> bool {
        Bm25Index::contains(self, doc)
    }

    fn doc_count(&self) -> usize {
        Bm25Index::doc_count(self)
    }
}

impl Retriever for DenseRetriever {
    fn label(&self) -> String {
        "dense".to_owned()
    }

    fn search(&self, query: &TokenSeq, k: usize) -> Vec<(PostId, f64)> {
        DenseRetriever::search(self, query, k)
    }

    fn contains(&self, doc: PostId) -> bool {
        self.index.contains(doc)
    }

    fn doc_count(&self) -> usize {
        self.index.len()
    }
}

/// Retriever with a fixed label, for reports of several variants of one model.
pub struct Labeled<'a, R: Retriever + ?Sized>(pub &'a R, pub String);

impl<R: Retriever + ?Sized> Retriever for Labeled<'_, R> {
    fn label(&self) -> String {
        self.1.clone()
    }

    fn search(&self, query: &TokenSeq, k: usize) -> Vec<(PostId, f64)> {
        self.0.search(query, k)
    }

    fn contains(&self, doc: PostId) -> bool {
        self.0.contains(doc)
    }

    fn doc_count(&self) -> usize {
        self.0.doc_count()
    }
}

/// Ranked lists and gold documents, one per query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalRun {
    pub ranked: Vec<Vec<PostId>>,
    pub gold: Vec<PostId>,
}

impl RetrievalRun {
    pub fn push(&mut self, ranked: Vec<PostId>, gold: PostId) {
        self.ranked.push(ranked);
        self.gold.push(gold);
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for (i, r) in self.ranked.iter().enumerate() {
            let mut seen = HashSet::with_capacity(r.len());
            if !r.iter().all(|d| seen.insert(d)) {
                return Err(EvalError::DuplicateInRanking(i));
            }
        }
        Ok(())
    }
}

/// Fraction of queries whose gold document is among the first `k` results.
pub fn recall_at_k(run: &RetrievalRun, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if run.gold.is_empty() {
        return Ok(0.0);
    }
    let hits = run
        .ranked
        .iter()
        .zip(&run.gold)
        .filter(|(ranked, gold)| ranked.iter().take(k).any(|d| d == *gold))
        .count();
    Ok(hits as f64 / run.gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retriever: String,
    pub query_count: usize,
    /// Queries dropped because their gold document is not indexed.
    pub excluded: usize,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<24}", "retriever");
        for k in &self.ks {
            let _ = write!(out, " {:>9}", format!("R@{k}"));
        }
        let _ = writeln!(out, " {:>8} {:>8}", "queries", "excluded");
        let _ = write!(out, "{:<24}", self.retriever);
        for r in &self.recall {
            let _ = write!(out, " {r:>9.3}");
        }
        let _ = writeln!(out, " {:>8} {:>8}", self.query_count, self.excluded);
        out
    }
}

/// Runs every pair's query through `retriever` and computes Recall@k for each
/// `k`. Pairs whose gold document is missing from the retriever are excluded
/// and counted rather than scored as misses.
pub fn evaluate<R: Retriever + ?Sized>(
    retriever: &R,
    pairs: &[EvalPair],
    ks: &[usize],
) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::NoPairs);
    }
    if ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let depth = ks.last().copied().unwrap_or(1);

    let usable: Vec<&EvalPair> = pairs.iter().filter(|p| retriever.contains(p.gold_doc_id)).collect();
    let ranked: Vec<Vec<PostId>> = usable
        .par_iter()
        .map(|p| {
            retriever
                .search(&p.query.tokens, depth)
                .into_iter()
                .map(|(d, _)| d)
                .collect()
        })
        .collect();
    let run = RetrievalRun {
        ranked,
        gold: usable.iter().map(|p| p.gold_doc_id).collect(),
    };
    run.validate()?;
    let recall = ks.iter().map(|&k| recall_at_k(&run, k)).collect::<Result<_, _>>()?;
    Ok(EvalReport {
        retriever: retriever.label(),
        query_count: run.gold.len(),
        excluded: pairs.len() - usable.len(),
        ks,
        recall,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub label: String,
    pub recall: Vec<f64>,
    /// Change against the previous row; absent for the first row.
    pub delta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub ks: Vec<usize>,
    pub rows: Vec<DeltaRow>,
}

impl DeltaTable {
    /// Number of rows carrying a delta.
    pub fn delta_count(&self) -> usize {
        self.rows.iter().filter(|r| r.delta.is_some()).count()
    }

    /// `Recall@focus_k` and its Δ, one configuration per line.
    pub fn to_table(&self, focus_k: usize) -> String {
        let col = self.ks.iter().position(|&k| k == focus_k).unwrap_or(0);
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$} | {:>9} | {:>7}",
            "Model",
            format!("Recall@{}", self.ks[col]),
            "Δ"
        );
        for row in &self.rows {
            let delta = row
                .delta
                .as_ref()
                .map(|d| format!("{:+.3}", d[col]))
                .unwrap_or_default();
            let _ = writeln!(out, "{:<width$} | {:>9.3} | {:>7}", row.label, row.recall[col], delta);
        }
        out
    }
}

/// Per-k deltas between consecutive reports.
pub fn compare_runs(reports: &[EvalReport]) -> Result<DeltaTable, EvalError> {
    let Some(first) = reports.first() else {
        return Ok(DeltaTable {
            ks: Vec::new(),
            rows: Vec::new(),
        });
    };
    for r in &reports[1..] {
        if r.ks != first.ks {
            return Err(EvalError::MismatchedKs(first.ks.clone(), r.ks.clone()));
        }
        if r.query_count != first.query_count {
            return Err(EvalError::MismatchedQueryCount(first.query_count, r.query_count));
        }
    }
    let rows = reports
        .iter()
        .enumerate()
        .map(|(i, r)| DeltaRow {
            label: r.retriever.clone(),
            recall: r.recall.clone(),
            delta: (i > 0).then(|| {
                r.recall
                    .iter()
                    .zip(&reports[i - 1].recall)
                    .map(|(a, b)| round_delta(a - b))
                    .collect()
            }),
        })
        .collect();
    Ok(DeltaTable {
        ks: first.ks.clone(),
        rows,
    })
}

/// Rounds away float noise below 1e-12 so identical reports give exact zeros.
fn round_delta(d: f64) -> f64 {
    (d * 1e12).round() / 1e12
}
