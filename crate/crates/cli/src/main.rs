//! `snippet-search`: the retrieval pipeline as subcommands.

mod files;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tracing::info;
use tracing_subscriber::EnvFilter;

use snippet_search::corpus::{
    assemble_corpus, build_eval_set, build_pretraining_pairs, compose_pretraining_target, duplicate_links, load_corpus,
    persist_corpus, training_questions, CompositionPolicy, Corpus, DocumentRecord, EvalPair, PretrainPair,
};
use snippet_search::demo::demo_pipeline;
use snippet_search::dense::{is_dense_index, DenseRetriever, EncoderParams, DEFAULT_BUCKETS, DEFAULT_DIM};
use snippet_search::eval::{evaluate, Retriever, DEFAULT_KS};
use snippet_search::ingest::{parse_links_stream, parse_posts_stream, RawLinkRow, RawPostRow, SkipReport};
use snippet_search::lexical::{build_bm25_index, tokenize, Bm25Index, TokenSeq, DEFAULT_B, DEFAULT_K1};
use snippet_search::preprocess::{truncate, CutMode};
use snippet_search::trainer::{examples_from_questions, mine_hard_negatives, train, TrainerConfig, TrainingExample};

use files::{open, read_lines, require, write_atomic, write_lines, write_text};

/// Log filter variable, e.g. `SNIPPET_SEARCH_LOG=info`.
const LOG_ENV: &str = "SNIPPET_SEARCH_LOG";

#[derive(Parser)]
#[command(
    name = "snippet-search",
    version,
    about = "Search forum answers by code snippet or traceback"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cut {
    Middle,
    Head,
}

impl From<Cut> for CutMode {
    fn from(c: Cut) -> Self {
        match c {
            Cut::Middle => CutMode::Middle,
            Cut::Head => CutMode::Head,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    TrainNoBody,
    InferenceFull,
    TrainStrippedBody,
}

impl From<Policy> for CompositionPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::TrainNoBody => CompositionPolicy::TrainNoBody,
            Policy::InferenceFull => CompositionPolicy::InferenceFull,
            Policy::TrainStrippedBody => CompositionPolicy::TrainStrippedBody,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse Posts.xml and PostLinks.xml into posts.jsonl, links.jsonl and skips.json.
    Ingest {
        #[arg(long)]
        posts: PathBuf,
        #[arg(long)]
        links: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble processed questions from an ingest directory.
    BuildCorpus {
        /// Directory written by `ingest`.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "python")]
        tag: String,
    },
    /// Evaluation pairs from the corpus's duplicate links.
    BuildEval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        max_query_len: usize,
        #[arg(long, value_enum, default_value_t = Cut::Middle)]
        cut: Cut,
    },
    /// Pretraining pairs: duplicate links not used for evaluation.
    BuildPretrain {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        max_query_len: usize,
        #[arg(long, value_enum, default_value_t = Cut::Middle)]
        cut: Cut,
    },
    /// Training examples: each answered non-evaluation question against its own document.
    BuildTrain {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        max_query_len: usize,
        #[arg(long, value_enum, default_value_t = Cut::Middle)]
        cut: Cut,
    },
    IndexBm25 {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K1)]
        k1: f64,
        #[arg(long, default_value_t = DEFAULT_B)]
        b: f64,
        #[arg(long, value_enum, default_value_t = Policy::InferenceFull)]
        policy: Policy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random encoder parameters.
    InitParams {
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
        #[arg(long, default_value_t = DEFAULT_BUCKETS)]
        buckets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    IndexDense {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, value_enum, default_value_t = Policy::InferenceFull)]
        policy: Policy,
        #[arg(long, default_value_t = 512)]
        max_doc_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive training on JSON-lines training examples.
    Train(TrainArgs),
    /// Training on pretraining pairs, with documents composed from whole questions.
    Pretrain(TrainArgs),
    /// Replace each example's hard negatives with the encoder's top-k misses.
    MineNegatives {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum, default_value_t = Policy::TrainNoBody)]
        policy: Policy,
        #[arg(long, default_value_t = 512)]
        max_doc_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@k of a BM25 or dense index; JSON report, table on stdout.
    Evaluate {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        eval_pairs: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        ks: Vec<usize>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Print the top k documents for a query file as "rank doc_id score".
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query_file: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 512)]
        max_query_len: usize,
        #[arg(long, value_enum, default_value_t = Cut::Middle)]
        cut: Cut,
    },
    /// Run the synthetic end-to-end pipeline; writes report.txt and report.json.
    Demo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Training examples (`train`) or pretraining pairs (`pretrain`).
    #[arg(long)]
    pairs: PathBuf,
    /// TOML file with trainer settings; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from these parameters instead of a random init.
    #[arg(long)]
    init_params: Option<PathBuf>,
    #[arg(long)]
    out_params: PathBuf,
}

fn load_corpus_file(path: &Path) -> Result<Corpus> {
    load_corpus(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn load_params(path: &Path) -> Result<EncoderParams> {
    EncoderParams::read_from(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<TrainerConfig> {
    let config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainerConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

enum Index {
    Bm25(Bm25Index),
    Dense(DenseRetriever),
}

impl Index {
    fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let index = if is_dense_index(&bytes) {
            Index::Dense(DenseRetriever::read_from(&bytes[..]).with_context(|| format!("reading {}", path.display()))?)
        } else {
            Index::Bm25(Bm25Index::read_json(&bytes[..]).with_context(|| format!("reading {}", path.display()))?)
        };
        Ok(index)
    }

    fn retriever(&self) -> &dyn Retriever {
        match self {
            Index::Bm25(i) => i,
            Index::Dense(i) => i,
        }
    }
}

fn ingest(posts: &Path, links: &Path, out: &Path) -> Result<()> {
    require([posts, links])?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut post_skips = SkipReport::default();
    let mut rows = 0u64;
    write_atomic(&out.join("posts.jsonl"), |w| {
        let mut reader = parse_posts_stream(open(posts)?);
        for row in reader.by_ref() {
            let row: RawPostRow = row.with_context(|| format!("parsing {}", posts.display()))?;
            serde_json::to_writer(&mut *w, &row)?;
            w.write_all(b"\n")?;
            rows += 1;
        }
        post_skips = reader.skips();
        Ok(())
    })?;

    let mut reader = parse_links_stream(open(links)?);
    let link_rows: Vec<RawLinkRow> = reader
        .by_ref()
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing {}", links.display()))?;
    let link_skips = reader.skips();
    write_lines(&out.join("links.jsonl"), &link_rows)?;

    #[derive(Serialize)]
    struct Skips {
        posts: SkipReport,
        links: SkipReport,
    }
    let skips = serde_json::to_string_pretty(&Skips {
        posts: post_skips,
        links: link_skips,
    })?;
    write_text(&out.join("skips.json"), &(skips + "\n"))?;
    info!(
        rows,
        links = link_rows.len(),
        skipped = post_skips.total() + link_skips.total(),
        "ingested"
    );
    Ok(())
}

fn build_corpus(input: &Path, out: &Path, tag: &str) -> Result<()> {
    let (posts, links) = (input.join("posts.jsonl"), input.join("links.jsonl"));
    require([posts.as_path(), links.as_path()])?;
    let rows: Vec<RawPostRow> = read_lines(&posts)?;
    let links: Vec<RawLinkRow> = read_lines(&links)?;
    let (corpus, report) = assemble_corpus(rows, &duplicate_links(&links), tag)?;
    info!(
        questions = report.questions,
        missing_accepted_answer = report.missing_accepted_answer,
        "assembled corpus"
    );
    write_atomic(out, |w| Ok(persist_corpus(&corpus, w)?))
}

fn train_command(args: &TrainArgs, pretraining: bool) -> Result<()> {
    require([args.corpus.as_path(), args.pairs.as_path()])?;
    require(args.config.as_deref())?;
    require(args.init_params.as_deref())?;
    let config = load_config(args.config.as_deref())?;
    let corpus = load_corpus_file(&args.corpus)?;

    let (examples, docs): (Vec<TrainingExample>, Vec<DocumentRecord>) = if pretraining {
        let pairs: Vec<PretrainPair> = read_lines(&args.pairs)?;
        let mut docs = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for p in &pairs {
            if seen.insert(p.target_doc_id) {
                let q = corpus
                    .get(p.target_doc_id)
                    .with_context(|| format!("pretraining target {} is not in the corpus", p.target_doc_id))?;
                docs.push(compose_pretraining_target(q)?);
            }
        }
        let examples = pairs
            .into_iter()
            .map(|p| TrainingExample::new(p.query, p.target_doc_id))
            .collect();
        (examples, docs)
    } else {
        (read_lines(&args.pairs)?, corpus.documents(config.composition_policy))
    };

    let params = match &args.init_params {
        Some(p) => load_params(p)?,
        None => EncoderParams::random(config.embedding_dim, config.feature_buckets, config.seed)?,
    };
    let outcome = train(params, &examples, &docs, &config)?;
    if let Some(last) = outcome.steps.last() {
        info!(steps = outcome.steps.len(), loss = last.loss, "trained");
    }
    write_atomic(&args.out_params, |w| Ok(outcome.params.write_to(w)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { posts, links, out } => ingest(&posts, &links, &out),
        Command::BuildCorpus { input, out, tag } => build_corpus(&input, &out, &tag),
        Command::BuildEval {
            input,
            out,
            max_query_len,
            cut,
        } => {
            require([input.as_path()])?;
            let corpus = load_corpus_file(&input)?;
            let pairs = build_eval_set(&corpus, &corpus.duplicate_links(), max_query_len, cut.into());
            info!(pairs = pairs.len(), "built evaluation set");
            write_lines(&out, &pairs)
        }
        Command::BuildPretrain {
            input,
            eval,
            out,
            max_query_len,
            cut,
        } => {
            require([input.as_path(), eval.as_path()])?;
            let corpus = load_corpus_file(&input)?;
            let eval: Vec<EvalPair> = read_lines(&eval)?;
            let pairs = build_pretraining_pairs(&corpus, &corpus.duplicate_links(), &eval, max_query_len, cut.into());
            info!(pairs = pairs.len(), "built pretraining pairs");
            write_lines(&out, &pairs)
        }
        Command::BuildTrain {
            input,
            eval,
            out,
            max_query_len,
            cut,
        } => {
            require([input.as_path(), eval.as_path()])?;
            let corpus = load_corpus_file(&input)?;
            let eval: Vec<EvalPair> = read_lines(&eval)?;
            let config = TrainerConfig {
                max_query_len,
                cut_mode: cut.into(),
                ..TrainerConfig::default()
            };
            let examples = examples_from_questions(training_questions(&corpus, &eval), &config);
            info!(examples = examples.len(), "built training examples");
            write_lines(&out, &examples)
        }
        Command::IndexBm25 {
            corpus,
            k1,
            b,
            policy,
            out,
        } => {
            require([corpus.as_path()])?;
            let docs = load_corpus_file(&corpus)?.documents(policy.into());
            let index = build_bm25_index(&docs, k1, b)?;
            write_atomic(&out, |w| Ok(index.write_json(w)?))
        }
        Command::InitParams {
            dim,
            buckets,
            seed,
            out,
        } => {
            let params = EncoderParams::random(dim, buckets, seed)?;
            write_atomic(&out, |w| Ok(params.write_to(w)?))
        }
        Command::IndexDense {
            corpus,
            params,
            policy,
            max_doc_len,
            out,
        } => {
            require([corpus.as_path(), params.as_path()])?;
            let docs = load_corpus_file(&corpus)?.documents(policy.into());
            let retriever = DenseRetriever::build(load_params(&params)?, &docs, Some(max_doc_len))?;
            write_atomic(&out, |w| Ok(retriever.write_to(w)?))
        }
        Command::Train(args) => train_command(&args, false),
        Command::Pretrain(args) => train_command(&args, true),
        Command::MineNegatives {
            params,
            corpus,
            pairs,
            k,
            policy,
            max_doc_len,
            out,
        } => {
            require([params.as_path(), corpus.as_path(), pairs.as_path()])?;
            if k == 0 {
                bail!("--k must be at least 1");
            }
            let docs = load_corpus_file(&corpus)?.documents(policy.into());
            let miner = DenseRetriever::build(load_params(&params)?, &docs, Some(max_doc_len))?;
            let examples: Vec<TrainingExample> = read_lines(&pairs)?;
            let queries: Vec<_> = examples.into_iter().map(|e| (e.query, e.positive_doc_id)).collect();
            write_lines(&out, &mine_hard_negatives(&miner, &queries, k))
        }
        Command::Evaluate {
            index,
            eval_pairs,
            ks,
            report,
        } => {
            require([index.as_path(), eval_pairs.as_path()])?;
            let index = Index::load(&index)?;
            let pairs: Vec<EvalPair> = read_lines(&eval_pairs)?;
            let result = evaluate(index.retriever(), &pairs, &ks)?;
            print!("{}", result.to_table());
            write_text(&report, &(serde_json::to_string_pretty(&result)? + "\n"))
        }
        Command::Search {
            index,
            query_file,
            k,
            max_query_len,
            cut,
        } => {
            require([index.as_path(), query_file.as_path()])?;
            let index = Index::load(&index)?;
            let text =
                std::fs::read_to_string(&query_file).with_context(|| format!("reading {}", query_file.display()))?;
            let query: TokenSeq = truncate(tokenize(&text), max_query_len, cut.into())?;
            let mut stdout = std::io::stdout().lock();
            for (rank, (doc, score)) in index.retriever().search(&query, k).into_iter().enumerate() {
                writeln!(stdout, "{} {} {}", rank + 1, doc, score)?;
            }
            Ok(())
        }
        Command::Demo { seed, out } => {
            let report = demo_pipeline(seed);
            write_text(&out.join("report.txt"), &report.to_text())?;
            write_text(&out.join("report.json"), &(report.to_json() + "\n"))?;
            print!("{}", report.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env(LOG_ENV).unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
