//! End-to-end run on a generated corpus.
//!
//! The corpus mimics duplicate-question structure: question `A_i` carries a
//! code snippet (and sometimes a traceback) and is marked a duplicate of an
//! answered question `B_i`. The only thing `A_i`'s query shares with `B_i`'s
//! document beyond chance is a set of signature tokens unique to the pair.
//! Unrelated answered questions act as distractor documents.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_eval_set, CompositionPolicy, Corpus, DuplicateLink, EvalPair};
use crate::dense::{DenseRetriever, EncoderParams};
use crate::eval::{compare_runs, evaluate, DeltaTable, EvalReport, Labeled, DEFAULT_KS};
use crate::lexical::{build_bm25_index, DEFAULT_B, DEFAULT_K1};
use crate::preprocess::{CutMode, ProcessedQuestion};
use crate::trainer::{mine_hard_negatives, train, TrainerConfig, TrainingExample};
use crate::PostId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub pairs: usize,
    pub distractors: usize,
    pub signature_tokens: usize,
    /// Background tokens per query / per document.
    pub query_noise: usize,
    pub doc_noise: usize,
    pub code_vocab: usize,
    pub prose_vocab: usize,
    /// Leading words shared by both vocabularies.
    pub shared_vocab: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            pairs: 200,
            distractors: 1000,
            signature_tokens: 3,
            query_noise: 40,
            doc_noise: 40,
            code_vocab: 400,
            prose_vocab: 400,
            shared_vocab: 80,
        }
    }
}

pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub links: Vec<DuplicateLink>,
}

const QUERY_BASE: PostId = 100_000;
const GOLD_BASE: PostId = 200_000;
const DISTRACTOR_BASE: PostId = 300_000;

fn code_word(i: usize, shared: usize) -> String {
    if i < shared {
        format!("w{i}")
    } else {
        format!("c{i}")
    }
}

fn prose_word(i: usize, shared: usize) -> String {
    if i < shared {
        format!("w{i}")
    } else {
        format!("p{i}")
    }
}

fn words(rng: &mut ChaCha8Rng, n: usize, vocab: usize, shared: usize, code: bool) -> Vec<String> {
    (0..n)
        .map(|_| {
            let i = rng.gen_range(0..vocab);
            if code {
                code_word(i, shared)
            } else {
                prose_word(i, shared)
            }
        })
        .collect()
}

fn scatter(rng: &mut ChaCha8Rng, mut base: Vec<String>, extra: &[String]) -> Vec<String> {
    for t in extra {
        let at = rng.gen_range(0..=base.len());
        base.insert(at, t.clone());
    }
    base
}

fn lines(tokens: &[String], per_line: usize) -> String {
    tokens
        .chunks(per_line)
        .map(|c| c.join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut questions = Vec::with_capacity(2 * spec.pairs + spec.distractors);
    let mut links = Vec::with_capacity(spec.pairs);
    let prose = |rng: &mut ChaCha8Rng, n| words(rng, n, spec.prose_vocab, spec.shared_vocab, false);

    for i in 0..spec.pairs {
        let signature: Vec<String> = (0..spec.signature_tokens).map(|k| format!("sig{i}x{k}")).collect();
        let a = QUERY_BASE + i as PostId;
        let b = GOLD_BASE + i as PostId;

        let noise = words(&mut rng, spec.query_noise, spec.code_vocab, spec.shared_vocab, true);
        let snippet = scatter(&mut rng, noise, &signature);
        let (code, error) = if i % 2 == 0 {
            (lines(&snippet, 8), String::new())
        } else {
            let split = snippet.len() * 3 / 4;
            let tail = snippet[split..].join(" ");
            (
                lines(&snippet[..split], 8),
                format!("Traceback (most recent call last):\nValueError: {tail}"),
            )
        };
        questions.push(ProcessedQuestion {
            id: a,
            title: prose(&mut rng, 6).join(" "),
            body_text: prose(&mut rng, 10).join(" "),
            keyword: (!error.is_empty()).then(|| "ValueError".to_owned()),
            code,
            error,
            best_answer: None,
            duplicate_of: Some(b),
            favorite_count: None,
        });

        let noise = prose(&mut rng, spec.doc_noise);
        let answer = scatter(&mut rng, noise, &signature);
        questions.push(ProcessedQuestion {
            id: b,
            title: prose(&mut rng, 6).join(" "),
            body_text: prose(&mut rng, 10).join(" "),
            code: String::new(),
            error: String::new(),
            keyword: None,
            best_answer: Some(lines(&answer, 12)),
            duplicate_of: None,
            favorite_count: None,
        });
        links.push(DuplicateLink { from: a, to: b });
    }

    for j in 0..spec.distractors {
        let own: Vec<String> = (0..spec.signature_tokens).map(|k| format!("rare{j}x{k}")).collect();
        let noise = prose(&mut rng, spec.doc_noise);
        let answer = scatter(&mut rng, noise, &own);
        questions.push(ProcessedQuestion {
            id: DISTRACTOR_BASE + j as PostId,
            title: prose(&mut rng, 6).join(" "),
            body_text: prose(&mut rng, 10).join(" "),
            code: String::new(),
            error: String::new(),
            keyword: None,
            best_answer: Some(lines(&answer, 12)),
            duplicate_of: None,
            favorite_count: None,
        });
    }

    SyntheticCorpus {
        corpus: Corpus::new(questions).expect("generated ids are unique"),
        links,
    }
}

/// Training settings for the generated corpus: batch 12, `F = 2¹⁵`, `d = 64`.
pub fn demo_trainer_config(seed: u64) -> TrainerConfig {
    TrainerConfig {
        learning_rate: 2e-3,
        warmup_steps: 50,
        clip_norm: 2.0,
        batch_size: 12,
        accumulation_steps: 1,
        max_query_len: 512,
        max_doc_len: 512,
        epochs: 100,
        max_steps: Some(300),
        seed,
        mining_k: 10,
        self_training_rounds: 2,
        ..TrainerConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub seed: u64,
    pub train_queries: usize,
    pub heldout_queries: usize,
    pub documents: usize,
    pub train_steps: Vec<u64>,
    /// Reports on the held-out half, in pipeline order.
    pub heldout: Vec<EvalReport>,
    /// The same retrievers on the training half.
    pub train: Vec<EvalReport>,
    pub deltas: DeltaTable,
}

impl DemoReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "seed {}: {} documents, {} training queries, {} held-out queries, steps per round {:?}\n\nheld-out half\n",
            self.seed, self.documents, self.train_queries, self.heldout_queries, self.train_steps
        );
        for r in &self.heldout {
            out.push_str(&r.to_table());
        }
        out.push_str("\ntraining half\n");
        for r in &self.train {
            out.push_str(&r.to_table());
        }
        out.push('\n');
        out.push_str(&self.deltas.to_table(10));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn report(&self, label: &str) -> Option<&EvalReport> {
        self.heldout.iter().find(|r| r.retriever == label)
    }
}

/// Splits the evaluation pairs into a training half and a held-out half.
pub fn split_pairs(mut pairs: Vec<EvalPair>, seed: u64) -> (Vec<EvalPair>, Vec<EvalPair>) {
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let heldout = pairs.split_off(pairs.len() / 2);
    (pairs, heldout)
}

/// Generates the corpus, then reports BM25, the untrained encoder, the
/// encoder after in-batch training, and after one mine→retrain round.
pub fn demo_pipeline(seed: u64) -> DemoReport {
    let spec = SyntheticSpec::default();
    let data = synthetic_corpus(&spec, seed);
    let config = demo_trainer_config(seed);

    let pairs = build_eval_set(&data.corpus, &data.links, config.max_query_len, CutMode::Middle);
    let (train_pairs, heldout_pairs) = split_pairs(pairs, seed);

    let inference_docs = data.corpus.documents(CompositionPolicy::InferenceFull);
    let training_docs = data.corpus.documents(config.composition_policy);

    let bm25 = build_bm25_index(&inference_docs, DEFAULT_K1, DEFAULT_B).expect("unique ids");
    let init = EncoderParams::random(config.embedding_dim, config.feature_buckets, seed).expect("valid shape");
    let dense = |params: &EncoderParams| {
        DenseRetriever::build(params.clone(), &inference_docs, Some(config.max_doc_len)).expect("unique ids")
    };

    let examples: Vec<TrainingExample> = train_pairs
        .iter()
        .map(|p| TrainingExample::new(p.query.clone(), p.gold_doc_id))
        .collect();
    let first = train(init.clone(), &examples, &training_docs, &config).expect("training succeeds");

    let miner =
        DenseRetriever::build(first.params.clone(), &training_docs, Some(config.max_doc_len)).expect("unique ids");
    let queries: Vec<_> = train_pairs.iter().map(|p| (p.query.clone(), p.gold_doc_id)).collect();
    let mined = mine_hard_negatives(&miner, &queries, config.mining_k);
    let retrain_config = TrainerConfig {
        max_steps: Some(200),
        seed: seed.wrapping_add(1),
        ..config.clone()
    };
    let second = train(first.params.clone(), &mined, &training_docs, &retrain_config).expect("retraining succeeds");

    let before = dense(&init);
    let trained = dense(&first.params);
    let self_trained = dense(&second.params);
    let retrievers: [(&dyn crate::eval::Retriever, &str); 4] = [
        (&bm25, "BM25"),
        (&before, "dense (untrained)"),
        (&trained, "dense (in-batch)"),
        (&self_trained, "dense (+hard negatives)"),
    ];
    let run = |pairs: &[EvalPair]| -> Vec<EvalReport> {
        retrievers
            .iter()
            .map(|(r, label)| evaluate(&Labeled(*r, label.to_string()), pairs, &DEFAULT_KS).expect("non-empty pairs"))
            .collect()
    };
    let heldout = run(&heldout_pairs);
    let train_reports = run(&train_pairs);
    let deltas = compare_runs(&heldout).expect("same queries and ks");

    DemoReport {
        seed,
        train_queries: train_pairs.len(),
        heldout_queries: heldout_pairs.len(),
        documents: inference_docs.len(),
        train_steps: vec![first.steps.len() as u64, second.steps.len() as u64],
        heldout,
        train: train_reports,
        deltas,
    }
}
