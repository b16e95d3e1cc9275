use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drug_insights::embedding::{build_embedder, EmbedProvider};
use drug_insights::engine::{Answer, RetrievalParams};
use drug_insights::eval::{aggregate_feedback, load_eval_dataset, run_eval, FeedbackSurvey};
use drug_insights::feedback::read_feedback_log;
use drug_insights::index::VectorIndex;
use drug_insights::ingest::{ingest_path, Chunk, SourceFormat};
use drug_insights::llm::{build_chat_provider, LlmProvider};
use drug_insights::pipeline::{build_engine, index_config, load_index, read_jsonl, record_entries, write_jsonl};
use drug_insights::prompts::list_variants;
use drug_insights::structure::{read_record_file, structure_corpus, RecordWriter, StructureOptions};
use drug_insights::AppConfig;

type CliResult = Result<(), Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "drug-insights", version, about = "Question answering over drug formularies")]
struct Cli {
    /// TOML config file. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract and chunk source documents into a chunk JSONL file.
    Ingest {
        /// A file, or a directory scanned for files of the chosen format.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "plaintext")]
        format: SourceFormat,
        #[arg(long)]
        out: PathBuf,
        /// Also write document metadata as JSONL.
        #[arg(long)]
        docs: Option<PathBuf>,
        #[arg(long)]
        chunk_size: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Reorganize chunks into labeled drug records with a chat model.
    Structure {
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `remote` or `mock-echo`; overrides `[llm] provider`.
        #[arg(long)]
        provider: Option<String>,
        /// Requests in flight at once.
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Append to an existing output file instead of replacing it.
        #[arg(long)]
        append: bool,
    },
    /// Embed structured records and write the vector index.
    Index {
        #[arg(long)]
        records: PathBuf,
        /// Chunk file the records were structured from (for page spans).
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `remote` or `test-fnv`; overrides `[embedder] provider`.
        #[arg(long)]
        provider: Option<String>,
        /// Add to an existing index instead of starting empty.
        #[arg(long)]
        update: bool,
    },
    /// Answer one query.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Print the full answer as JSON.
        #[arg(long)]
        json: bool,
        query: String,
    },
    /// Interactive terminal session. `:variant <id>` switches variant, `:quit` exits.
    Chat {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score the engine against a reference dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// `all` or a comma-separated list of variant ids.
        #[arg(long, default_value = "all")]
        variants: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        feedback_log: Option<PathBuf>,
    },
    /// Aggregate survey responses from a feedback log.
    FeedbackSummary {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<AppConfig, Box<dyn std::error::Error>> {
    Ok(match path {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    })
}

fn parse_llm_provider(s: &str) -> Result<LlmProvider, String> {
    match s {
        "remote" => Ok(LlmProvider::Remote),
        "mock-echo" => Ok(LlmProvider::MockEcho),
        other => Err(format!("unknown llm provider {other:?} (expected remote or mock-echo)")),
    }
}

fn parse_embed_provider(s: &str) -> Result<EmbedProvider, String> {
    match s {
        "remote" => Ok(EmbedProvider::Remote),
        "test-fnv" => Ok(EmbedProvider::TestFnv),
        other => Err(format!("unknown embedding provider {other:?} (expected remote or test-fnv)")),
    }
}

fn print_answer(answer: &Answer) {
    println!("{}", answer.answer_text);
    if !answer.sources.is_empty() {
        println!();
        println!("Sources:");
        for (i, s) in answer.sources.iter().enumerate() {
            let pages = if s.page_start == s.page_end {
                format!("p. {}", s.page_start)
            } else {
                format!("pp. {}-{}", s.page_start, s.page_end)
            };
            println!("  [{}] {} {} (score {:.3})", i + 1, s.doc_id, pages, s.score);
        }
    }
    if answer.limit_violated {
        println!("(answer has {} sentences, over the variant's limit)", answer.sentence_count);
    }
}

async fn run(cli: Cli) -> CliResult {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest {
            input,
            format,
            out,
            docs,
            chunk_size,
            overlap,
        } => {
            let mut params = cfg.chunking;
            params.chunk_size = chunk_size.unwrap_or(params.chunk_size);
            params.overlap = overlap.unwrap_or(params.overlap);
            let (metas, chunks) = ingest_path(&input, format, params)?;
            write_jsonl(&out, &chunks)?;
            if let Some(docs) = docs {
                write_jsonl(&docs, &metas)?;
            }
            eprintln!("{} documents, {} chunks -> {}", metas.len(), chunks.len(), out.display());
        }
        Command::Structure {
            chunks,
            out,
            provider,
            batch,
            append,
        } => {
            if let Some(p) = provider {
                cfg.llm.provider = parse_llm_provider(&p)?;
            }
            let chunks: Vec<Chunk> = read_jsonl(&chunks)?;
            let llm = build_chat_provider(&cfg.llm)?;
            if !append && out.exists() {
                std::fs::remove_file(&out)?;
            }
            let mut writer = RecordWriter::append_to(&out)?;
            let options = StructureOptions {
                batch_size: batch,
                ..Default::default()
            };
            let outcome = structure_corpus(&chunks, llm.as_ref(), options, Some(&mut writer)).await?;
            eprintln!(
                "{} records written to {}, {} chunks skipped",
                outcome.records.len(),
                out.display(),
                outcome.skipped.len()
            );
        }
        Command::Index {
            records,
            chunks,
            out,
            provider,
            update,
        } => {
            if let Some(p) = provider {
                cfg.embedder.provider = parse_embed_provider(&p)?;
            }
            let records = read_record_file(&records)?;
            let chunks: Vec<Chunk> = read_jsonl(&chunks)?;
            let embedder = build_embedder(&cfg.embedder)?;
            let entries = record_entries(&records, &chunks, embedder.as_ref()).await?;
            let mut index = if update && out.exists() {
                load_index(&cfg, &out)?
            } else {
                VectorIndex::new(index_config(&cfg))?
            };
            let outcome = index.upsert(entries)?;
            index.save(&out)?;
            eprintln!(
                "{} inserted, {} replaced; {} entries -> {}",
                outcome.inserted,
                outcome.replaced,
                index.len(),
                out.display()
            );
        }
        Command::Query {
            index,
            variant,
            k,
            threshold,
            json,
            query,
        } => {
            let engine = build_engine(&cfg, load_index(&cfg, &index)?)?;
            let defaults = engine.config().clone();
            let params = RetrievalParams {
                k: k.unwrap_or(defaults.retrieval.k),
                threshold: threshold.unwrap_or(defaults.retrieval.threshold),
            };
            let variant = variant.unwrap_or(defaults.default_variant);
            let answer = engine.answer_query_with(&query, &variant, params).await?;
            if json {
                println!("{}", serde_json::to_string_pretty(&answer)?);
            } else {
                print_answer(&answer);
            }
        }
        Command::Chat { index, variant } => {
            let engine = build_engine(&cfg, load_index(&cfg, &index)?)?;
            let mut variant = variant.unwrap_or_else(|| engine.config().default_variant.clone());
            eprintln!("variant {variant}; `:variant <id>` to switch, `:quit` to exit");
            let stdin = std::io::stdin();
            loop {
                print!("> ");
                std::io::stdout().flush()?;
                let mut line = String::new();
                if stdin.lock().read_line(&mut line)? == 0 {
                    break;
                }
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                if line == ":quit" || line == ":q" {
                    break;
                }
                if let Some(v) = line.strip_prefix(":variant") {
                    let v = v.trim();
                    if list_variants().iter().any(|x| x.variant_id == v) {
                        variant = v.to_string();
                        eprintln!("variant {variant}");
                    } else {
                        eprintln!("unknown variant {v:?}");
                    }
                    continue;
                }
                match engine.answer_query(line, &variant).await {
                    Ok(answer) => print_answer(&answer),
                    Err(e) => eprintln!("error: {e}"),
                }
                println!();
            }
        }
        Command::Eval {
            dataset,
            index,
            variants,
            out,
            parallelism,
        } => {
            let items = load_eval_dataset(&dataset)?;
            let variant_ids: Vec<String> = if variants == "all" {
                list_variants().into_iter().map(|v| v.variant_id).collect()
            } else {
                variants.split(',').map(|s| s.trim().to_string()).collect()
            };
            let engine = build_engine(&cfg, load_index(&cfg, &index)?)?;
            let scorer = build_embedder(&cfg.embedder)?;
            let mut options = cfg.eval;
            options.parallelism = parallelism.unwrap_or(options.parallelism);
            let mut report = run_eval(&items, &variant_ids, &engine, scorer.as_ref(), options).await?;
            report.scorer_id = cfg.embedder.scorer_id();
            print!("{}", report.render_table());
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
                eprintln!("report written to {}", out.display());
            }
        }
        Command::Serve {
            index,
            listen,
            feedback_log,
        } => {
            if let Some(i) = index {
                cfg.service.index_path = i;
            }
            if let Some(l) = listen {
                cfg.service.listen = l;
            }
            if let Some(f) = feedback_log {
                cfg.service.feedback_log = f;
            }
            drug_insights_server::serve(cfg).await?;
        }
        Command::FeedbackSummary { log, json } => {
            let events = read_feedback_log(&log)?;
            let likes = events
                .iter()
                .filter(|e| e.signal == Some(drug_insights::feedback::Signal::Like))
                .count();
            let dislikes = events
                .iter()
                .filter(|e| e.signal == Some(drug_insights::feedback::Signal::Dislike))
                .count();
            let summary = aggregate_feedback(&FeedbackSurvey::from_events(&events))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                print!("{}", summary.render_table());
                println!("likes: {likes}, dislikes: {dislikes}");
            }
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
