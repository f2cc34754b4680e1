//! The processed corpus: document composition, evaluation and pretraining
//! pairs built from duplicate links, and JSON-lines persistence.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{filter_tagged_questions, LinkType, PostType, RawLinkRow, RawPostRow};
use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::preprocess::{assemble_question, build_query, AssemblyReport, CutMode, ProcessedQuestion, Query};
use crate::PostId;

/// Separator between title, body and answer in a composed document.
pub const FIELD_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompositionError {
    #[error("question {id} has no {field} to compose a document from")]
    MissingField { id: PostId, field: &'static str },
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate question id {0}")]
    DuplicateId(PostId),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// Which question fields go into a retrievable document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionPolicy {
    /// title + best_answer
    #[default]
    TrainNoBody,
    /// title + body + best_answer
    InferenceFull,
    /// title + body with the question's code and error removed + best_answer
    TrainStrippedBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: PostId,
    pub text: String,
    pub policy_used: CompositionPolicy,
}

/// A moderator-marked duplicate: question `from` duplicates question `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DuplicateLink {
    pub from: PostId,
    pub to: PostId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub query: Query,
    pub gold_doc_id: PostId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainPair {
    pub query: Query,
    pub target_doc_id: PostId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    questions: Vec<ProcessedQuestion>,
    by_id: HashMap<PostId, usize>,
}

impl Corpus {
    pub fn new(questions: Vec<ProcessedQuestion>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(questions.len());
        for (i, q) in questions.iter().enumerate() {
            if by_id.insert(q.id, i).is_some() {
                return Err(CorpusError::DuplicateId(q.id));
            }
        }
        Ok(Self { questions, by_id })
    }

    pub fn get(&self, id: PostId) -> Option<&ProcessedQuestion> {
        self.by_id.get(&id).map(|&i| &self.questions[i])
    }

    pub fn questions(&self) -> &[ProcessedQuestion] {
        &self.questions
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// Links recorded in the questions' `duplicate_of` fields.
    pub fn duplicate_links(&self) -> Vec<DuplicateLink> {
        self.questions
            .iter()
            .filter_map(|q| q.duplicate_of.map(|to| DuplicateLink { from: q.id, to }))
            .collect()
    }

    /// Every answered question composed under `policy`, in corpus order.
    pub fn documents(&self, policy: CompositionPolicy) -> Vec<DocumentRecord> {
        self.questions
            .iter()
            .filter(|q| q.best_answer.is_some())
            .filter_map(|q| compose_document(q, policy).ok())
            .collect()
    }
}

/// Keeps the duplicate links of a link table, in order.
pub fn duplicate_links(rows: &[RawLinkRow]) -> Vec<DuplicateLink> {
    rows.iter()
        .filter(|r| r.link_type == LinkType::Duplicate)
        .map(|r| DuplicateLink {
            from: r.post_id,
            to: r.related_post_id,
        })
        .collect()
}

/// Builds the corpus from one pass over the dump rows: questions carrying
/// `tag`, with accepted answers looked up among the same rows. A question
/// with several duplicate links records the first.
pub fn assemble_corpus(
    rows: Vec<RawPostRow>,
    links: &[DuplicateLink],
    tag: &str,
) -> Result<(Corpus, AssemblyReport), CorpusError> {
    let (answers, questions): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| r.post_type == PostType::Answer);
    let answers: HashMap<PostId, RawPostRow> = answers.into_iter().map(|a| (a.id, a)).collect();
    let mut duplicates = HashMap::new();
    for l in links.iter().filter(|l| l.from != l.to) {
        duplicates.entry(l.from).or_insert(l.to);
    }
    let mut report = AssemblyReport::default();
    let processed = filter_tagged_questions(questions, tag)
        .map(|row| assemble_question(&row, &answers, &duplicates, &mut report).expect("filtered to questions"))
        .collect();
    Ok((Corpus::new(processed)?, report))
}

fn join_fields<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    parts
        .into_iter()
        .filter(|p| !p.trim().is_empty())
        .collect::<Vec<_>>()
        .join(FIELD_SEPARATOR)
}

/// Body with the question's own snippet removed: whole-line matches against
/// any code/error line go first, then any remaining verbatim occurrence of the
/// merged `code` and `error` strings.
pub fn strip_snippets(body: &str, code: &str, error: &str) -> String {
    let snippet_lines: HashSet<&str> = code
        .lines()
        .chain(error.lines())
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let mut kept: String = body
        .lines()
        .filter(|l| !snippet_lines.contains(l.trim()))
        .collect::<Vec<_>>()
        .join("\n");
    for snippet in [code, error] {
        if snippet.is_empty() {
            continue;
        }
        while let Some(at) = kept.find(snippet) {
            kept.replace_range(at..at + snippet.len(), "");
        }
    }
    kept.trim().to_owned()
}

pub fn compose_document(pq: &ProcessedQuestion, policy: CompositionPolicy) -> Result<DocumentRecord, CompositionError> {
    let missing = |field| CompositionError::MissingField { id: pq.id, field };
    let answer = pq.best_answer.as_deref().ok_or(missing("best_answer"))?;
    let text = match policy {
        CompositionPolicy::TrainNoBody => join_fields([pq.title.as_str(), answer]),
        CompositionPolicy::InferenceFull => join_fields([pq.title.as_str(), pq.body_text.as_str(), answer]),
        CompositionPolicy::TrainStrippedBody => {
            if pq.body_text.is_empty() {
                return Err(missing("body"));
            }
            let body = strip_snippets(&pq.body_text, &pq.code, &pq.error);
            join_fields([pq.title.as_str(), body.as_str(), answer])
        }
    };
    if text.is_empty() {
        return Err(missing("title"));
    }
    Ok(DocumentRecord {
        doc_id: pq.id,
        text,
        policy_used: policy,
    })
}

/// Pretraining target: title + body, plus the accepted answer when one exists.
/// Most pretraining targets are unanswered, so the answer is optional here.
pub fn compose_pretraining_target(pq: &ProcessedQuestion) -> Result<DocumentRecord, CompositionError> {
    let text = join_fields([
        pq.title.as_str(),
        pq.body_text.as_str(),
        pq.best_answer.as_deref().unwrap_or(""),
    ]);
    if text.is_empty() {
        return Err(CompositionError::MissingField {
            id: pq.id,
            field: "title",
        });
    }
    Ok(DocumentRecord {
        doc_id: pq.id,
        text,
        policy_used: CompositionPolicy::InferenceFull,
    })
}

fn unique_links(links: &[DuplicateLink]) -> Vec<DuplicateLink> {
    let mut seen = HashSet::new();
    links
        .iter()
        .copied()
        .filter(|l| l.from != l.to && seen.insert(*l))
        .collect()
}

/// One pair per link A→B where B has an accepted answer and A has code or
/// an error. Links are treated independently; chains are not flattened.
pub fn build_eval_set(corpus: &Corpus, links: &[DuplicateLink], max_query_len: usize, cut: CutMode) -> Vec<EvalPair> {
    unique_links(links)
        .into_iter()
        .filter_map(|link| {
            let a = corpus.get(link.from)?;
            let b = corpus.get(link.to)?;
            b.best_answer.as_ref()?;
            let query = build_query(a, max_query_len, cut).ok()?;
            Some(EvalPair {
                query,
                gold_doc_id: b.id,
            })
        })
        .collect()
}

/// Links A→B with a usable query from A that are not already evaluation
/// pairs. B must be in the corpus so its document can be composed with the
/// body included.
pub fn build_pretraining_pairs(
    corpus: &Corpus,
    links: &[DuplicateLink],
    eval: &[EvalPair],
    max_query_len: usize,
    cut: CutMode,
) -> Vec<PretrainPair> {
    let taken: HashSet<(PostId, PostId)> = eval.iter().map(|p| (p.query.source_question, p.gold_doc_id)).collect();
    unique_links(links)
        .into_iter()
        .filter(|l| !taken.contains(&(l.from, l.to)))
        .filter_map(|link| {
            let a = corpus.get(link.from)?;
            corpus.get(link.to)?;
            let query = build_query(a, max_query_len, cut).ok()?;
            Some(PretrainPair {
                query,
                target_doc_id: link.to,
            })
        })
        .collect()
}

/// Question ids that must not appear as training queries.
pub fn eval_query_sources(eval: &[EvalPair]) -> BTreeSet<PostId> {
    eval.iter().map(|p| p.query.source_question).collect()
}

/// Answered questions with a snippet that are not evaluation queries; each
/// becomes a (own query, own document) training pair.
pub fn training_questions<'a>(corpus: &'a Corpus, eval: &[EvalPair]) -> Vec<&'a ProcessedQuestion> {
    let excluded = eval_query_sources(eval);
    corpus
        .questions()
        .iter()
        .filter(|q| q.best_answer.is_some() && q.has_snippet() && !excluded.contains(&q.id))
        .collect()
}

pub fn persist_corpus<W: Write>(corpus: &Corpus, out: W) -> Result<(), CorpusError> {
    write_jsonl(corpus.questions(), out)?;
    Ok(())
}

pub fn load_corpus<R: BufRead>(input: R) -> Result<Corpus, CorpusError> {
    Corpus::new(read_jsonl(input)?)
}
