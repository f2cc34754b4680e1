//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use snippet_search::corpus::{
    assemble_corpus, build_eval_set, duplicate_links, load_corpus, persist_corpus, CompositionPolicy, Corpus,
    DocumentRecord, EvalPair,
};
use snippet_search::demo::{demo_pipeline, demo_trainer_config, synthetic_corpus, DemoReport, SyntheticSpec};
use snippet_search::dense::{featurize, DenseRetriever, EncoderParams, FeatureVector};
use snippet_search::eval::{compare_runs, evaluate, recall_at_k, EvalReport, Labeled, RetrievalRun, Retriever};
use snippet_search::ingest::{parse_links_stream, parse_posts_stream, PostType, RawPostRow};
use snippet_search::lexical::{build_bm25_index, tokenize, TokenSeq, DEFAULT_B, DEFAULT_K1};
use snippet_search::preprocess::{classify_block, truncate_middle, BlockKind, CutMode, ProcessedQuestion, Query};
use snippet_search::trainer::{
    assemble_batch_negatives, contrastive_loss, loss_and_gradients, mine_hard_negatives, train, TrainingExample,
};
use snippet_search::PostId;

/// Recall@10 of the encoder trained on all 200 queries of the seed-0
/// corpus, as measured when this suite was written.
const PINNED_TRAINED_RECALL_AT_10: f64 = 1.0;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: u64, what: &str) -> Result<(), String> {
    check(elapsed < Duration::from_secs(limit_secs), || {
        format!("{what} took {elapsed:.2?}, limit {limit_secs}s")
    })
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn docs_from(texts: &[Vec<String>]) -> Vec<DocumentRecord> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| DocumentRecord {
            doc_id: i as PostId + 1,
            text: t.join(" "),
            policy_used: CompositionPolicy::InferenceFull,
        })
        .collect()
}

/// BM25 written out term by term over raw token lists, with no index.
fn oracle_bm25(docs: &[Vec<String>], query: &[String], doc: usize, k1: f64, b: f64) -> f64 {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
    let dl = docs[doc].len() as f64;
    let mut score = 0.0;
    for q in query {
        let df = docs.iter().filter(|d| d.contains(q)).count() as f64;
        let tf = docs[doc].iter().filter(|t| *t == q).count() as f64;
        let idf = ((n + 1.0) / (df + 0.5)).ln();
        score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
    }
    score
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for corpus_no in 0..100 {
        let vocab = rng.gen_range(1..=20);
        let n_docs = rng.gen_range(1..=50);
        let k1 = [0.5, 1.2, 2.0][corpus_no % 3];
        let b = [0.0, 0.75, 1.0][(corpus_no / 3) % 3];
        let texts: Vec<Vec<String>> = (0..n_docs)
            .map(|_| {
                let len = rng.gen_range(1..=12);
                (0..len).map(|_| format!("t{}", rng.gen_range(0..vocab))).collect()
            })
            .collect();
        let index = build_bm25_index(&docs_from(&texts), k1, b).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            // vocab + 2 reaches words no document has
            let query: Vec<String> = (0..rng.gen_range(1..=6))
                .map(|_| format!("t{}", rng.gen_range(0..vocab + 2)))
                .collect();
            let tokens: TokenSeq = query.iter().cloned().collect();
            for doc in 0..n_docs {
                let got = index.score(&tokens, doc as PostId + 1).map_err(|e| e.to_string())?;
                let want = oracle_bm25(&texts, &query, doc, k1, b);
                worst = worst.max((got - want).abs());
                compared += 1;
            }
        }
    }
    check(worst <= 1e-9, || format!("max |index - oracle| = {worst:e}"))?;
    within(start.elapsed(), 10, "100 corpora")?;
    Ok(format!(
        "{compared} scores, max abs diff {worst:.1e}, {:.2?}",
        start.elapsed()
    ))
}

#[allow(clippy::approx_constant)]
fn criterion_2() -> Outcome {
    let texts: Vec<Vec<String>> = [vec!["a", "b"], vec!["a"], vec!["c"]]
        .iter()
        .map(|d| d.iter().map(|s| s.to_string()).collect())
        .collect();
    let query = vec!["a".to_string()];
    let oracle: Vec<f64> = (0..3).map(|d| oracle_bm25(&texts, &query, d, 1.2, 0.75)).collect();
    let oracle_idf = (4.0f64 / 2.5).ln();
    for (got, want) in [
        (oracle[1], 0.5236),
        (oracle[0], 0.3902),
        (oracle[2], 0.0),
        (oracle_idf, 1.6f64.ln()),
    ] {
        check((got - want).abs() < 1e-4, || {
            format!("oracle gives {got}, hand value {want}")
        })?;
    }

    let index = build_bm25_index(&docs_from(&texts), DEFAULT_K1, DEFAULT_B).map_err(|e| e.to_string())?;
    let q: TokenSeq = query.iter().cloned().collect();
    for (doc, want) in [(1, oracle[0]), (2, oracle[1]), (3, oracle[2])] {
        let got = index.score(&q, doc).map_err(|e| e.to_string())?;
        check((got - want).abs() < 1e-4, || {
            format!("d{doc}: index {got}, oracle {want}")
        })?;
    }
    check((index.idf("a") - oracle_idf).abs() < 1e-4, || {
        format!("idf(a) = {}", index.idf("a"))
    })?;
    let ranked: Vec<PostId> = index.search(&q, 3).into_iter().map(|(d, _)| d).collect();
    check(ranked == [2, 1, 3], || format!("ranking {ranked:?}"))?;
    Ok(format!(
        "d2 {:.4}, d1 {:.4}, d3 {:.4}, idf(a) {:.4}",
        oracle[1], oracle[0], oracle[2], oracle_idf
    ))
}

fn random_batch(rng: &mut ChaCha8Rng, buckets: usize) -> (Vec<TrainingExample>, HashMap<PostId, FeatureVector>) {
    let words =
        |rng: &mut ChaCha8Rng, n: usize| -> TokenSeq { (0..n).map(|_| format!("w{}", rng.gen_range(0..40))).collect() };
    let b = rng.gen_range(2..=4);
    let h = rng.gen_range(0..=2);
    let mut docs = HashMap::new();
    let mut next_doc: PostId = 1;
    let mut batch = Vec::new();
    for q in 0..b {
        let mut doc = |rng: &mut ChaCha8Rng| {
            let id = next_doc;
            next_doc += 1;
            let len = rng.gen_range(3..10);
            docs.insert(id, featurize(&words(rng, len), buckets));
            id
        };
        let positive = doc(rng);
        let hard: Vec<PostId> = (0..h).map(|_| doc(rng)).collect();
        let len = rng.gen_range(3..10);
        batch.push(TrainingExample {
            query: Query {
                tokens: words(rng, len),
                source_question: 1000 + q,
            },
            positive_doc_id: positive,
            hard_negative_doc_ids: hard,
        });
    }
    (batch, docs)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (dim, buckets, step) = (6, 32, 1e-5);
    let mut worst = 0.0f64;
    let mut probes = 0;
    for instance in 0..25 {
        let weights: Vec<f64> = (0..dim * buckets).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut params = EncoderParams::from_weights(dim, buckets, 0, weights).map_err(|e| e.to_string())?;
        let (batch, docs) = random_batch(&mut rng, buckets);
        let (_, grad) = loss_and_gradients(&params, &batch, &docs, true, instance).map_err(|e| e.to_string())?;

        // Probe entries of buckets some feature vector touches; the rest are
        // exactly zero on both sides.
        let mut touched: Vec<u32> = docs.values().flat_map(|f| f.entries().iter().map(|e| e.0)).collect();
        touched.extend(batch.iter().flat_map(|e| {
            featurize(&e.query.tokens, buckets)
                .entries()
                .iter()
                .map(|x| x.0)
                .collect::<Vec<_>>()
        }));
        touched.sort_unstable();
        touched.dedup();
        for _ in 0..24 {
            let bucket = touched[rng.gen_range(0..touched.len())] as usize;
            let row = rng.gen_range(0..dim);
            let at = bucket * dim + row;
            let original = params.weights()[at];
            params.weights_mut()[at] = original + step;
            let (plus, _) = loss_and_gradients(&params, &batch, &docs, true, instance).map_err(|e| e.to_string())?;
            params.weights_mut()[at] = original - step;
            let (minus, _) = loss_and_gradients(&params, &batch, &docs, true, instance).map_err(|e| e.to_string())?;
            params.weights_mut()[at] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grad.get(row, bucket);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
            probes += 1;
        }
    }
    check(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    within(start.elapsed(), 30, "gradient check")?;
    Ok(format!(
        "25 instances, {probes} entries, max rel err {worst:.1e}, {:.2?}",
        start.elapsed()
    ))
}

fn criterion_4() -> Outcome {
    for n in [1usize, 2, 5, 11, 64, 1000] {
        for c in [-30.0, 0.0, 0.7, 250.0] {
            let loss = contrastive_loss(c, &vec![c; n]);
            let want = ((n + 1) as f64).ln();
            check((loss - want).abs() <= 1e-12, || {
                format!("n={n} c={c}: {loss} vs ln({})", n + 1)
            })?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_shift = 0.0f64;
    for _ in 0..200 {
        let pos: f64 = rng.gen_range(-5.0..5.0);
        let negs: Vec<f64> = (0..rng.gen_range(1..20)).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let delta: f64 = rng.gen_range(-50.0..50.0);
        let shifted: Vec<f64> = negs.iter().map(|s| s + delta).collect();
        worst_shift = worst_shift.max((contrastive_loss(pos, &negs) - contrastive_loss(pos + delta, &shifted)).abs());

        let mut prev = f64::INFINITY;
        for i in 0..400 {
            let s = -20.0 + 0.1 * i as f64;
            let loss = contrastive_loss(s, &negs);
            check(loss < prev, || {
                format!("loss did not drop at s+ = {s}: {prev} -> {loss}")
            })?;
            prev = loss;
        }
    }
    check(worst_shift <= 1e-12, || {
        format!("shift changed loss by {worst_shift:e}")
    })?;
    Ok(format!(
        "uniform = ln(n+1), max shift diff {worst_shift:.1e}, strictly decreasing in s+"
    ))
}

struct TrainingEffect {
    corpus: Corpus,
    pairs: Vec<EvalPair>,
    before: EvalReport,
    after: EvalReport,
    trained: DenseRetriever,
    steps: usize,
    elapsed: Duration,
}

fn training_effect() -> TrainingEffect {
    single_threaded(|| {
        let start = Instant::now();
        let data = synthetic_corpus(&SyntheticSpec::default(), 0);
        let config = demo_trainer_config(0);
        let pairs = build_eval_set(&data.corpus, &data.links, config.max_query_len, CutMode::Middle);
        let inference_docs = data.corpus.documents(CompositionPolicy::InferenceFull);
        let training_docs = data.corpus.documents(config.composition_policy);
        let init = EncoderParams::random(config.embedding_dim, config.feature_buckets, 0).unwrap();
        let examples: Vec<TrainingExample> = pairs
            .iter()
            .map(|p| TrainingExample::new(p.query.clone(), p.gold_doc_id))
            .collect();
        let outcome = train(init.clone(), &examples, &training_docs, &config).unwrap();
        let before = DenseRetriever::build(init, &inference_docs, Some(config.max_doc_len)).unwrap();
        let trained = DenseRetriever::build(outcome.params, &inference_docs, Some(config.max_doc_len)).unwrap();
        let before = evaluate(&before, &pairs, &[5, 10, 20, 50]).unwrap();
        let after = evaluate(&trained, &pairs, &[5, 10, 20, 50]).unwrap();
        TrainingEffect {
            corpus: data.corpus,
            pairs,
            before,
            after,
            trained,
            steps: outcome.steps.len(),
            elapsed: start.elapsed(),
        }
    })
}

fn criterion_5(run: &TrainingEffect) -> Outcome {
    let questions = run
        .corpus
        .questions()
        .iter()
        .filter(|q| q.duplicate_of.is_some())
        .count();
    let distractors = run.corpus.len() - 2 * questions;
    check(
        questions == 200 && distractors == 1000 && run.pairs.len() == 200,
        || {
            format!(
                "{questions} query questions, {distractors} distractors, {} pairs",
                run.pairs.len()
            )
        },
    )?;
    let signatures_shared = run.pairs.iter().all(|p| {
        let doc = tokenize(run.corpus.get(p.gold_doc_id).unwrap().best_answer.as_deref().unwrap());
        let sig = |t: &String| t.starts_with("sig");
        let in_query: Vec<&String> = p.query.tokens.iter().filter(|t| sig(t)).collect();
        in_query.len() == 3 && in_query.iter().all(|t| doc.iter().any(|d| d == *t))
    });
    check(signatures_shared, || "some query lost a signature token".into())?;

    let before = run.before.recall_at(10).unwrap();
    let after = run.after.recall_at(10).unwrap();
    check(run.steps <= 500, || format!("{} steps", run.steps))?;
    check(before <= 0.2, || format!("R@10 before training {before}"))?;
    check(after >= 0.9, || format!("R@10 after training {after}"))?;
    check((after - PINNED_TRAINED_RECALL_AT_10).abs() < 1e-12, || {
        format!("R@10 after training {after}, pinned {PINNED_TRAINED_RECALL_AT_10}")
    })?;
    within(run.elapsed, 60, "single-threaded generate+train+evaluate")?;
    Ok(format!(
        "R@10 {before:.3} -> {after:.3} after {} steps, {:.2?} on one thread",
        run.steps, run.elapsed
    ))
}

fn criterion_6(run: &TrainingEffect, demo: &DemoReport) -> Outcome {
    let queries: Vec<(Query, PostId)> = run.pairs.iter().map(|p| (p.query.clone(), p.gold_doc_id)).collect();
    let n = run.trained.doc_count();
    let bm25 = build_bm25_index(
        &run.corpus.documents(CompositionPolicy::InferenceFull),
        DEFAULT_K1,
        DEFAULT_B,
    )
    .map_err(|e| e.to_string())?;
    for (name, mined) in [
        ("dense", mine_hard_negatives(&run.trained, &queries, n)),
        ("bm25", mine_hard_negatives(&bm25, &queries, n)),
    ] {
        for ex in &mined {
            check(!ex.hard_negative_doc_ids.contains(&ex.positive_doc_id), || {
                format!("{name} mined the gold of query {}", ex.query.source_question)
            })?;
            check(ex.hard_negative_doc_ids.len() == n - 1, || {
                format!(
                    "{name}: {} negatives out of {n} documents",
                    ex.hard_negative_doc_ids.len()
                )
            })?;
        }
    }

    let first = demo
        .report("dense (in-batch)")
        .and_then(|r| r.recall_at(10))
        .ok_or("missing report")?;
    let second = demo
        .report("dense (+hard negatives)")
        .and_then(|r| r.recall_at(10))
        .ok_or("missing report")?;
    check(second >= first - 0.02, || {
        format!("held-out R@10 {first:.3} -> {second:.3}")
    })?;
    Ok(format!(
        "gold never mined over {} queries x {n} docs; held-out R@10 {first:.3} -> {second:.3}",
        queries.len()
    ))
}

fn criterion_7(run: &TrainingEffect, demo: &DemoReport) -> Outcome {
    let mut reports: Vec<&EvalReport> = vec![&run.before, &run.after];
    reports.extend(demo.heldout.iter().chain(&demo.train));
    for r in &reports {
        check(
            r.recall.windows(2).all(|w| w[0] <= w[1]) && r.ks.windows(2).all(|w| w[0] < w[1]),
            || format!("{} not monotone: {:?}", r.retriever, r.recall),
        )?;
    }

    let bm25 = build_bm25_index(
        &run.corpus.documents(CompositionPolicy::InferenceFull),
        DEFAULT_K1,
        DEFAULT_B,
    )
    .map_err(|e| e.to_string())?;
    let full: [(&dyn Retriever, &str); 2] = [(&bm25, "bm25"), (&run.trained, "dense")];
    for (r, name) in full {
        let n = r.doc_count();
        let report = evaluate(&Labeled(r, name.to_string()), &run.pairs, &[n]).map_err(|e| e.to_string())?;
        check(report.recall == [1.0], || {
            format!("{name}: Recall@{n} = {:?}", report.recall)
        })?;
    }

    let run_at = |ranks: &[usize]| {
        let mut out = RetrievalRun::default();
        for (q, &rank) in ranks.iter().enumerate() {
            let gold = 1_000_000 + q as PostId;
            out.push(
                (1..=60)
                    .map(|i| if i == rank { gold } else { (q * 100 + i) as PostId })
                    .collect(),
                gold,
            );
        }
        out
    };
    let examples = [
        (recall_at_k(&run_at(&[3]), 5), 1.0),
        (recall_at_k(&run_at(&[7]), 5), 0.0),
        (recall_at_k(&run_at(&[7]), 10), 1.0),
        (recall_at_k(&run_at(&[2, 12]), 10), 0.5),
    ];
    for (got, want) in examples {
        check(got == Ok(want), || format!("recall {got:?}, expected {want}"))?;
    }
    check(recall_at_k(&run_at(&[1]), 0).is_err(), || "k = 0 accepted".into())?;

    let report = |label: &str, r10: f64| EvalReport {
        retriever: label.into(),
        query_count: 10,
        excluded: 0,
        ks: vec![10],
        recall: vec![r10],
    };
    let same = compare_runs(&[report("a", 0.3), report("b", 0.3)]).map_err(|e| e.to_string())?;
    check(same.rows[1].delta == Some(vec![0.0]), || {
        "identical reports gave a non-zero delta".into()
    })?;
    let table = compare_runs(&[report("x", 0.184), report("y", 0.188), report("z", 0.2)]).map_err(|e| e.to_string())?;
    let delta = table.rows[1].delta.as_ref().unwrap()[0];
    check((delta - 0.004).abs() < 1e-12 && table.delta_count() == 2, || {
        format!("delta {delta}")
    })?;
    check(table.to_table(10).contains("+0.004"), || table.to_table(10))?;
    Ok(format!(
        "{} reports monotone; Recall@N = 1 for BM25 and dense; worked examples exact",
        reports.len()
    ))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[derive(Deserialize)]
struct LabeledBlock {
    label: String,
    text: String,
}

fn criterion_8() -> Outcome {
    let t = |n: usize| -> Vec<String> { (1..=n).map(|i| format!("t{i}")).collect() };
    let s = |v: &[&str]| -> Vec<String> { v.iter().map(|x| x.to_string()).collect() };
    check(truncate_middle(&t(10), 4) == Ok(s(&["t1", "t2", "t9", "t10"])), || {
        "[t1..t10], max 4".into()
    })?;
    check(truncate_middle(&t(3), 4) == Ok(t(3)), || "[t1,t2,t3], max 4".into())?;
    check(
        truncate_middle(&t(10), 5) == Ok(s(&["t1", "t2", "t3", "t9", "t10"])),
        || "[t1..t10], max 5".into(),
    )?;
    check(truncate_middle(&t(10), 1).is_err(), || "max 1 accepted".into())?;
    let long = t(600);
    let cut = truncate_middle(&long, 512).unwrap();
    check(cut[..256] == long[..256] && cut[256..] == long[344..], || {
        "600 -> 512 split".into()
    })?;

    let file = BufReader::new(File::open(fixture("blocks.jsonl")).map_err(|e| e.to_string())?);
    let blocks: Vec<LabeledBlock> = snippet_search::jsonl::read_jsonl(file).map_err(|e| e.to_string())?;
    let agree = blocks
        .iter()
        .filter(|b| {
            let want = if b.label == "error" {
                BlockKind::Error
            } else {
                BlockKind::Code
            };
            classify_block(&b.text) == want
        })
        .count();
    check(blocks.len() == 20 && agree == 20, || {
        format!("{agree}/{} blocks agree", blocks.len())
    })?;

    let posts = BufReader::new(File::open(fixture("posts.xml")).map_err(|e| e.to_string())?);
    let mut reader = parse_posts_stream(posts);
    let rows: Vec<RawPostRow> = reader.by_ref().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    check(rows.len() == 50 && reader.skips().total() == 0, || {
        format!("{} rows, {} skips", rows.len(), reader.skips().total())
    })?;
    check(
        rows.iter().any(|r| r.id == 42 && r.post_type == PostType::Question),
        || "question 42 missing".into(),
    )?;

    let links = BufReader::new(File::open(fixture("postlinks.xml")).map_err(|e| e.to_string())?);
    let links: Vec<_> = parse_links_stream(links)
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (mut corpus, _) = assemble_corpus(rows, &duplicate_links(&links), "python").map_err(|e| e.to_string())?;
    let mut questions = corpus.questions().to_vec();
    questions.push(ProcessedQuestion {
        id: 9_999,
        title: "naïve Unicode — 漢字".into(),
        body_text: "emoji 🐍 and \"quotes\"\n\ttabbed".into(),
        code: "print('héllo')  # ✓".into(),
        error: "UnicodeEncodeError: 'ascii' codec can't encode character '\\xe9'".into(),
        keyword: Some("UnicodeEncodeError".into()),
        best_answer: None,
        duplicate_of: Some(42),
        favorite_count: Some(-1),
    });
    corpus = Corpus::new(questions).map_err(|e| e.to_string())?;
    let mut first = Vec::new();
    persist_corpus(&corpus, &mut first).map_err(|e| e.to_string())?;
    let loaded = load_corpus(&first[..]).map_err(|e| e.to_string())?;
    let mut second = Vec::new();
    persist_corpus(&loaded, &mut second).map_err(|e| e.to_string())?;
    check(loaded == corpus && first == second, || {
        "corpus round trip differs".into()
    })?;
    Ok(format!(
        "truncation exact, blocks 20/20, 50/50 rows, {} byte round trip",
        first.len()
    ))
}

fn criterion_9() -> Outcome {
    let mut checked = Vec::new();
    for b in [2usize, 3, 12] {
        for h in [0usize, 1, 5] {
            let mut next: PostId = 1;
            let mut fresh = || {
                next += 1;
                next
            };
            let batch: Vec<TrainingExample> = (0..b)
                .map(|i| TrainingExample {
                    query: Query {
                        tokens: TokenSeq::default(),
                        source_question: i as PostId,
                    },
                    positive_doc_id: fresh(),
                    hard_negative_doc_ids: (0..h).map(|_| fresh()).collect(),
                })
                .collect();
            let negatives = assemble_batch_negatives(&batch).map_err(|e| e.to_string())?;
            let want = (b - 1) * (h + 1) + h;
            for (i, negs) in negatives.iter().enumerate() {
                check(negs.len() == want, || {
                    format!("B={b} h={h} query {i}: {} negatives, want {want}", negs.len())
                })?;
                check(!negs.contains(&batch[i].positive_doc_id), || {
                    format!("B={b} h={h}: own positive negated")
                })?;
            }
            checked.push(want);
        }
    }
    Ok(format!("counts {checked:?}"))
}

fn criterion_10(demos: &BTreeMap<&str, DemoReport>) -> Outcome {
    let texts: Vec<(&&str, String, String)> = demos.iter().map(|(k, r)| (k, r.to_text(), r.to_json())).collect();
    let (first_name, first_text, first_json) = &texts[0];
    for (name, text, json) in &texts[1..] {
        check(text == first_text && json == first_json, || {
            format!("{name} differs from {first_name}")
        })?;
    }
    Ok(format!(
        "{} runs byte-identical ({})",
        texts.len(),
        demos.keys().copied().collect::<Vec<_>>().join(", ")
    ))
}

fn run(no: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default())
    });
    match result {
        Ok(detail) => {
            println!("criterion {no:>2} PASS  {name}: {detail}");
            true
        }
        Err(why) => {
            println!("criterion {no:>2} FAIL  {name}: {why}");
            false
        }
    }
}

fn main() {
    let effect = training_effect();
    let mut demos = BTreeMap::new();
    for (label, threads) in [("1 thread", 1), ("1 thread again", 1), ("4 threads", 4)] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        demos.insert(label, pool.install(|| demo_pipeline(0)));
    }
    let demo = &demos["1 thread"];

    let results = [
        run(1, "BM25 matches scalar oracle", criterion_1),
        run(2, "hand-derived BM25 instance", criterion_2),
        run(3, "gradient vs finite differences", criterion_3),
        run(4, "loss identities", criterion_4),
        run(5, "end-to-end training effect", || criterion_5(&effect)),
        run(6, "self-training mechanics", || criterion_6(&effect, demo)),
        run(7, "recall properties", || criterion_7(&effect, demo)),
        run(8, "truncation and preprocessing", criterion_8),
        run(9, "in-batch negative counting", criterion_9),
        run(10, "determinism", || criterion_10(&demos)),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
