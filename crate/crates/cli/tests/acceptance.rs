//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Runs without the libtest harness so the lines are
//! always visible.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use drug_insights::embedding::{fnv1a64, normalize, test_embed, TestFnvEmbedder, DEFAULT_DIMENSION};
use drug_insights::engine::{Answer, EngineConfig, EngineError, QaEngine, RagEngine, RetrievalParams};
use drug_insights::eval::{aggregate_feedback, run_eval, Category, EvalItem, EvalOptions, FeedbackSurvey};
use drug_insights::feedback::{read_feedback_log, SurveyResponse};
use drug_insights::index::{IndexConfig, IndexError, SharedIndex, VectorEntry, VectorIndex};
use drug_insights::ingest::{ingest_path, ChunkParams, SourceFormat};
use drug_insights::llm::{ChatProvider, LlmProviderConfig};
use drug_insights::mock::{EchoChatProvider, ScriptedChatProvider};
use drug_insights::pipeline::record_entries;
use drug_insights::prompts::{list_variants, PromptRegistry, SentenceLimit, Strategy, DEFAULT_GUARDRAILS};
use drug_insights::structure::{structure_corpus, StructureOptions};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

type Check = Result<String, String>;

/// Threshold for lexical test-fnv retrieval over the mini formulary. In-corpus
/// questions score about 0.28 against their record and out-of-corpus probes
/// at most 0.13; 0.9 only makes sense for neural embeddings.
const MOCK_THRESHOLD: f64 = 0.2;
const SCORE_TOL: f64 = 1e-6;
const ORACLE_TOL: f64 = 1e-9;

const DOSAGE_QUERY: &str = "What is the adult dosage of amoxicillin?";
const DOSAGE_STRING: &str = "500 mg orally every 8 hours";
const OUT_OF_CORPUS_QUERY: &str = "How much does insulin cost in Lagos?";

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn block_on<F: std::future::Future>(f: F) -> F::Output {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap()
        .block_on(f)
}

fn formulary_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mini-formulary")
}

// ---------------------------------------------------------------- retrieval

fn random_unit(rng: &mut StdRng, dim: usize) -> Vec<f32> {
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Some(v) = normalize(&raw) {
            return v;
        }
    }
}

fn random_index(rng: &mut StdRng, n: usize, dim: usize) -> VectorIndex {
    let mut idx = VectorIndex::new(IndexConfig::with_dimension(dim)).unwrap();
    let mut vectors: Vec<Vec<f32>> = Vec::with_capacity(n);
    for i in 0..n {
        // Roughly one in ten entries duplicates an earlier vector to force ties.
        if i > 0 && rng.random_range(0..10) == 0 {
            let j = rng.random_range(0..i);
            vectors.push(vectors[j].clone());
        } else {
            vectors.push(random_unit(rng, dim));
        }
    }
    let entries = vectors
        .into_iter()
        .enumerate()
        .map(|(i, vector)| VectorEntry {
            entry_id: format!("e{:05}", (i * 7919) % 100_000),
            vector,
            payload: json!({"doc_id": "d", "page_start": 1, "page_end": 1, "text": "t"})
                .as_object()
                .unwrap()
                .clone(),
        })
        .collect();
    idx.upsert(entries).unwrap();
    idx
}

/// Linear scan: score everything, filter, full sort by (score desc, id asc).
fn oracle(idx: &VectorIndex, q: &[f32], k: usize, threshold: f64) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = idx
        .entries()
        .iter()
        .map(|e| {
            let mut s = 0.0f64;
            for i in 0..q.len() {
                s += q[i] as f64 * e.vector[i] as f64;
            }
            (e.entry_id.clone(), s)
        })
        .filter(|(_, s)| *s >= threshold)
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn retrieval_contract() -> Check {
    let mut rng = StdRng::seed_from_u64(0x5eed_0001);
    let dims = [8usize, 64, 1536];
    let mut default_hits = 0usize;
    for trial in 0..1000 {
        let dim = dims[trial % 3];
        let n = rng.random_range(1..=1000usize);
        let idx = random_index(&mut rng, n, dim);
        let query = if rng.random_bool(0.5) {
            idx.entries()[rng.random_range(0..n)].vector.clone()
        } else {
            random_unit(&mut rng, dim)
        };
        let k = rng.random_range(1..=12usize);
        let threshold = if rng.random_bool(0.3) { rng.random_range(0.0..1.0) } else { -1.0 };
        let got = idx.search(&query, k, threshold).map_err(|e| e.to_string())?;
        let want = oracle(&idx, &query, k, threshold);
        ensure(got.len() == want.len(), || {
            format!("trial {trial}: {} results, oracle {}", got.len(), want.len())
        })?;
        for (g, (id, score)) in got.iter().zip(&want) {
            ensure(&g.entry_id == id && (g.score - score).abs() <= SCORE_TOL, || {
                format!("trial {trial}: got {}:{} want {id}:{score}", g.entry_id, g.score)
            })?;
        }
        let defaults = idx.search_default(&query).map_err(|e| e.to_string())?;
        ensure(defaults.len() <= 3, || format!("trial {trial}: {} default results", defaults.len()))?;
        ensure(defaults.iter().all(|r| r.score >= 0.9), || format!("trial {trial}: default result below 0.9"))?;
        default_hits += defaults.len();
    }
    Ok(format!("1000 trials match the linear scan; {default_hits} default hits, all >= 0.9, <= 3 per query"))
}

// -------------------------------------------------------------- persistence

fn index_persistence() -> Check {
    let mut rng = StdRng::seed_from_u64(0x5eed_0002);
    let idx = random_index(&mut rng, 100, DEFAULT_DIMENSION);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("index.divx");
    idx.save(&path).map_err(|e| e.to_string())?;
    let loaded = VectorIndex::load(&path).map_err(|e| e.to_string())?;
    for (a, b) in idx.entries().iter().zip(loaded.entries()) {
        let same = a.entry_id == b.entry_id
            && a.payload == b.payload
            && a.vector.iter().map(|x| x.to_bits()).eq(b.vector.iter().map(|x| x.to_bits()));
        ensure(same, || format!("entry {} changed", a.entry_id))?;
    }
    for q in 0..20 {
        let query = random_unit(&mut rng, DEFAULT_DIMENSION);
        let threshold = if q % 2 == 0 { -1.0 } else { 0.0 };
        let a = idx.search(&query, 10, threshold).map_err(|e| e.to_string())?;
        let b = loaded.search(&query, 10, threshold).map_err(|e| e.to_string())?;
        let key = |r: &Vec<drug_insights::RetrievalResult>| {
            r.iter().map(|x| (x.entry_id.clone(), x.score.to_bits())).collect::<Vec<_>>()
        };
        ensure(key(&a) == key(&b), || format!("query {q} differs after reload"))?;
    }

    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    std::fs::write(&path, &bad_magic).map_err(|e| e.to_string())?;
    ensure(matches!(VectorIndex::load(&path), Err(IndexError::CorruptIndex { .. })), || {
        "corrupted magic did not raise CorruptIndex".into()
    })?;
    for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).map_err(|e| e.to_string())?;
        ensure(matches!(VectorIndex::load(&path), Err(IndexError::CorruptIndex { .. })), || {
            format!("truncation at {cut} did not raise CorruptIndex")
        })?;
    }
    Ok("100 entries bit-exact, 20 queries identical, bad magic and truncation rejected".into())
}

// --------------------------------------------------------------- prompt grid

fn prompt_grid() -> Check {
    let variants = list_variants();
    ensure(variants.len() == 9, || format!("{} variants", variants.len()))?;
    let ids: HashSet<_> = variants.iter().map(|v| v.variant_id.clone()).collect();
    ensure(ids.len() == 9, || "duplicate variant ids".into())?;
    let cells: HashSet<_> = variants.iter().map(|v| (v.strategy, v.sentence_limit)).collect();
    ensure(cells.len() == 9, || "grid cells not covered".into())?;

    let registry = PromptRegistry::default();
    for v in &variants {
        let rendered = registry
            .render_qa_prompt(v, "What is the dose?", &[])
            .map_err(|e| e.to_string())?;
        let text = format!("{}\n{}", rendered.system, rendered.user);
        let clauses = DEFAULT_GUARDRAILS.iter().filter(|c| text.contains(*c)).count();
        let want_clauses = if v.strategy.uses_guardrails() { 4 } else { 0 };
        ensure(clauses == want_clauses, || {
            format!("{}: {clauses} guardrail clauses, want {want_clauses}", v.variant_id)
        })?;
        for n in [2, 3] {
            let phrase = format!("at most {n} sentences");
            let want = v.sentence_limit.max_sentences() == Some(n);
            ensure(text.contains(&phrase) == want, || format!("{}: {phrase:?} presence wrong", v.variant_id))?;
        }
        let want_n = if v.strategy.compares() { 4 } else { 1 };
        ensure(v.n_candidates == want_n, || format!("{}: n_candidates {}", v.variant_id, v.n_candidates))?;
    }
    let b = registry.get("prompt_1b").map_err(|e| e.to_string())?;
    ensure(
        b.strategy == Strategy::Compare4AndGuardrails && b.sentence_limit == SentenceLimit::Two,
        || "prompt_1b is not compare4_and_guardrails with a 2-sentence limit".into(),
    )?;
    Ok("9 distinct variants over the 3x3 grid; clauses, limits and n_candidates as specified".into())
}

// ------------------------------------------------------------ mock pipeline

struct Pipeline {
    index: VectorIndex,
    index_bytes: Vec<u8>,
    structure_calls: usize,
}

async fn build_pipeline() -> Result<Pipeline, String> {
    let (_, chunks) =
        ingest_path(&formulary_dir(), SourceFormat::Plaintext, ChunkParams::default()).map_err(|e| e.to_string())?;
    let llm = EchoChatProvider::new();
    let outcome = structure_corpus(&chunks, &llm, StructureOptions::default(), None)
        .await
        .map_err(|e| e.to_string())?;
    ensure(outcome.records.len() == 3 && outcome.skipped.is_empty(), || {
        format!("{} records, {} skipped", outcome.records.len(), outcome.skipped.len())
    })?;
    let embedder = TestFnvEmbedder::new(DEFAULT_DIMENSION);
    let entries = record_entries(&outcome.records, &chunks, &embedder)
        .await
        .map_err(|e| e.to_string())?;
    let mut index = VectorIndex::new(IndexConfig {
        default_threshold: MOCK_THRESHOLD,
        ..IndexConfig::default()
    })
    .map_err(|e| e.to_string())?;
    index.upsert(entries).map_err(|e| e.to_string())?;
    Ok(Pipeline {
        index_bytes: index.to_bytes(),
        index,
        structure_calls: llm.calls(),
    })
}

fn engine_over(index: VectorIndex, llm: Arc<dyn ChatProvider>, retrieval: RetrievalParams) -> RagEngine {
    RagEngine::new(
        Arc::new(TestFnvEmbedder::new(DEFAULT_DIMENSION)),
        SharedIndex::new(index),
        llm,
        Arc::new(PromptRegistry::default()),
        LlmProviderConfig::default(),
        EngineConfig {
            retrieval,
            ..EngineConfig::default()
        },
    )
}

fn mock_retrieval() -> RetrievalParams {
    RetrievalParams {
        k: 3,
        threshold: MOCK_THRESHOLD,
    }
}

/// Answer JSON without the wall-clock field.
fn stable(answer: &Answer) -> Value {
    let mut v = serde_json::to_value(answer).unwrap();
    v.as_object_mut().unwrap().remove("latency_ms");
    v
}

async fn run_mock_pipeline() -> Result<(Vec<u8>, Vec<Value>), String> {
    let p = build_pipeline().await?;
    let llm = Arc::new(EchoChatProvider::new());
    let engine = engine_over(p.index, llm.clone(), mock_retrieval());

    let a = engine
        .answer_query(DOSAGE_QUERY, "prompt_0a")
        .await
        .map_err(|e| e.to_string())?;
    ensure(!a.abstained, || "in-corpus query abstained".into())?;
    ensure(a.answer_text.contains(DOSAGE_STRING), || format!("answer lacks {DOSAGE_STRING:?}: {}", a.answer_text))?;
    let src = a.sources.first().ok_or("no sources")?;
    ensure(src.doc_id == "amoxicillin" && src.page_start == 1 && src.page_end == 1, || {
        format!("citation {}:{}-{}", src.doc_id, src.page_start, src.page_end)
    })?;
    ensure(a.sources.iter().all(|s| s.score >= MOCK_THRESHOLD), || "source below threshold".into())?;

    let before = llm.calls();
    let b = engine
        .answer_query(OUT_OF_CORPUS_QUERY, "prompt_1a")
        .await
        .map_err(|e| e.to_string())?;
    ensure(b.abstained && b.sources.is_empty(), || "out-of-corpus query did not abstain".into())?;
    ensure(llm.calls() == before, || format!("{} LLM calls during abstention", llm.calls() - before))?;
    Ok((p.index_bytes, vec![stable(&a), stable(&b)]))
}

fn end_to_end() -> Check {
    let first = block_on(run_mock_pipeline())?;
    let second = block_on(run_mock_pipeline())?;
    ensure(first == second, || "two runs differ".into())?;
    let calls = block_on(build_pipeline())?.structure_calls;
    Ok(format!(
        "3 monographs, {calls} structuring calls; dosage answer cites amoxicillin p.1; probe abstained with 0 LLM calls; runs identical"
    ))
}

// ----------------------------------------------------------------- compare-4

const CANDIDATES: [&str; 4] = [
    "Amoxicillin is a penicillin antibiotic.",
    "Adults take amoxicillin 500 mg orally every 8 hours; children 20 to 40 mg/kg/day in three divided doses.",
    "Adults: 500 mg orally every 8 hours.",
    "Please consult a pharmacist before use.",
];

/// Mean test-fnv cosine of each candidate to the three formulary records,
/// computed by an independent script.
const GROUNDING: [f64; 4] = [
    0.1734603234213071,
    0.33541780088319517,
    0.27493017811255394,
    0.14131411090101675,
];

fn compare4() -> Check {
    block_on(async {
        let p = build_pipeline().await?;
        let all_three = RetrievalParams { k: 3, threshold: 0.0 };
        let llm = Arc::new(ScriptedChatProvider::cycling(CANDIDATES.map(String::from).to_vec()));
        let engine = engine_over(p.index, llm.clone(), all_three);
        let context = engine
            .retrieve_context(DOSAGE_QUERY, all_three)
            .await
            .map_err(|e| e.to_string())?;
        ensure(context.len() == 3, || format!("{} context chunks", context.len()))?;

        let cands: Vec<String> = CANDIDATES.map(String::from).to_vec();
        let sel = engine.select_best(&cands, &context).await.map_err(|e| e.to_string())?;
        let scores = sel.grounding_scores.clone().ok_or("no grounding scores")?;
        for (i, (got, want)) in scores.iter().zip(GROUNDING).enumerate() {
            ensure((got - want).abs() <= ORACLE_TOL, || format!("candidate {i}: {got} vs {want}"))?;
        }
        ensure(sel.index == 1, || format!("picked {} not 1", sel.index))?;

        let tied = vec![cands[0].clone(), cands[1].clone(), cands[1].clone(), cands[3].clone()];
        let sel = engine.select_best(&tied, &context).await.map_err(|e| e.to_string())?;
        ensure(sel.index == 1, || format!("tie resolved to {}", sel.index))?;

        for (variant, n) in [("prompt_1a", 4), ("prompt_2a", 4), ("prompt_0a", 1)] {
            let before = llm.calls();
            let a = engine.answer_query(DOSAGE_QUERY, variant).await.map_err(|e| e.to_string())?;
            let issued = llm.calls() - before;
            ensure(a.candidates_generated == n && issued == n, || {
                format!("{variant}: candidates_generated {}, requests {issued}", a.candidates_generated)
            })?;
        }
        Ok(format!(
            "grounding {:?} within {ORACLE_TOL:e}; argmax 1; tie -> lowest index; 4/4/1 requests",
            GROUNDING.map(|g| (g * 1e4).round() / 1e4)
        ))
    })
}

// ---------------------------------------------------------------------- eval

struct FnEngine<F>(F);

#[async_trait]
impl<F> QaEngine for FnEngine<F>
where
    F: Fn(&str, &str) -> Option<String> + Send + Sync,
{
    async fn answer(&self, query: &str, variant_id: &str) -> Result<Answer, EngineError> {
        let text = (self.0)(query, variant_id);
        Ok(Answer {
            abstained: text.is_none(),
            answer_text: text.unwrap_or_else(|| "abstain".into()),
            sources: vec![],
            variant_id: variant_id.into(),
            candidates_generated: 1,
            sentence_count: 1,
            limit_violated: false,
            latency_ms: 0,
        })
    }
}

fn item(id: &str, query: &str, reference: &str, category: Category) -> EvalItem {
    EvalItem {
        item_id: id.into(),
        query: query.into(),
        reference_answer: reference.into(),
        category,
    }
}

fn eval_items() -> Vec<EvalItem> {
    vec![
        item("d1", "amoxicillin dose", "Adults take 500 mg orally every 8 hours.", Category::Dosage),
        item("s1", "amoxicillin side effects", "Common side effects are diarrhoea, nausea and skin rash.", Category::SideEffects),
        item("p1", "metformin renal", "Metformin is contraindicated in severe renal impairment.", Category::SpecialPopulations),
        item("e1", "what does it treat", "Artemether-lumefantrine treats uncomplicated falciparum malaria.", Category::DrugEffects),
        item("o1", "insulin price", "", Category::OutOfCorpus),
    ]
}

fn constructed_answer(query: &str, variant: &str) -> Option<String> {
    let a = match (variant, query) {
        (_, "insulin price") => return None,
        ("prompt_0a", "amoxicillin dose") => "The adult dose is 500 mg orally every 8 hours.",
        ("prompt_0a", "amoxicillin side effects") => "Diarrhoea, nausea and skin rash are common.",
        ("prompt_0a", "metformin renal") => "Avoid metformin in severe renal impairment.",
        ("prompt_0a", "what does it treat") => "It is used for uncomplicated falciparum malaria.",
        ("prompt_1b", "amoxicillin dose") => "Take 500 mg three times daily.",
        ("prompt_1b", "amoxicillin side effects") => "It may upset the stomach.",
        ("prompt_1b", "metformin renal") => return None,
        ("prompt_1b", "what does it treat") => "An antimalarial combination.",
        _ => return None,
    };
    Some(a.to_string())
}

/// Per-variant means of the constructed dataset, from an independent script.
const ORACLE_MEANS: [(&str, f64); 2] = [("prompt_0a", 72.4404945569407), ("prompt_1b", 14.599783165200002)];

fn eval_oracle() -> Check {
    block_on(async {
        let items = eval_items();
        let embedder = TestFnvEmbedder::new(DEFAULT_DIMENSION);
        let all: Vec<String> = list_variants().into_iter().map(|v| v.variant_id).collect();
        let refs: Vec<(String, String)> = items.iter().map(|i| (i.query.clone(), i.reference_answer.clone())).collect();
        let echo = FnEngine(move |q: &str, _: &str| {
            refs.iter().find(|(rq, _)| rq == q).and_then(|(_, r)| (!r.is_empty()).then(|| r.clone()))
        });
        let report = run_eval(&items, &all, &echo, &embedder, EvalOptions::default())
            .await
            .map_err(|e| e.to_string())?;
        for (v, m) in &report.per_variant {
            let m = m.ok_or("missing mean")?;
            ensure(format!("{m:.2}") == "100.00" && (m - 100.0).abs() < 1e-4, || format!("{v}: {m}"))?;
        }
        ensure(report.abstention_accuracy == Some(1.0), || "echo engine abstention accuracy != 1".into())?;

        let ids: Vec<String> = ORACLE_MEANS.iter().map(|(v, _)| v.to_string()).collect();
        let engine = FnEngine(constructed_answer);
        let report = run_eval(&items, &ids, &engine, &embedder, EvalOptions { parallelism: 3 })
            .await
            .map_err(|e| e.to_string())?;
        for (v, want) in ORACLE_MEANS {
            let got = report.per_variant[v].ok_or("missing mean")?;
            ensure((got - want).abs() <= ORACLE_TOL, || format!("{v}: {got} vs oracle {want}"))?;
        }
        ensure(report.abstention_accuracy == Some(1.0), || "abstention accuracy != 1".into())?;
        let again = run_eval(&items, &ids, &engine, &embedder, EvalOptions { parallelism: 1 })
            .await
            .map_err(|e| e.to_string())?;
        ensure(
            serde_json::to_string(&again).unwrap() == serde_json::to_string(&report).unwrap(),
            || "report not deterministic".into(),
        )?;

        let survey = FeedbackSurvey {
            responses: [4u8, 4, 3, 4]
                .iter()
                .enumerate()
                .map(|(i, &a)| SurveyResponse {
                    respondent_id: format!("r{i}"),
                    q_relevance: 4,
                    q_accuracy: a,
                    q_construction: 4,
                    q_sources: 4,
                })
                .collect(),
        };
        let summary = aggregate_feedback(&survey).map_err(|e| e.to_string())?;
        ensure(summary.accuracy == 3.75, || format!("accuracy mean {}", summary.accuracy))?;
        let table = summary.render_table();
        let rows = table.lines().filter(|l| l.trim_end().ends_with("3.75") || l.trim_end().ends_with("4.00")).count();
        ensure(rows == 4, || format!("feedback table has {rows} question rows:\n{table}"))?;
        Ok(format!(
            "echo = 100.00 for 9 variants; means {:.4}/{:.4} match oracle; abstention 1.0; feedback 3.75",
            ORACLE_MEANS[0].1, ORACLE_MEANS[1].1
        ))
    })
}

// ------------------------------------------------------------------- service

struct Server {
    child: Child,
    base: String,
    log: PathBuf,
    _dir: tempfile::TempDir,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

async fn start_server() -> Result<Server, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = build_pipeline().await?;
    let index_path = dir.path().join("index.divx");
    p.index.save(&index_path).map_err(|e| e.to_string())?;
    let log = dir.path().join("feedback.jsonl");
    let port = free_port();
    let config = format!(
        "[retrieval]\nthreshold = {MOCK_THRESHOLD}\n\n[service]\nlisten = \"127.0.0.1:{port}\"\nindex_path = {:?}\nfeedback_log = {:?}\n",
        index_path.display().to_string(),
        log.display().to_string()
    );
    let cfg_path = dir.path().join("config.toml");
    std::fs::write(&cfg_path, config).map_err(|e| e.to_string())?;
    let child = Command::new(env!("CARGO_BIN_EXE_drug-insights"))
        .args(["serve", "--config"])
        .arg(&cfg_path)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let server = Server {
        child,
        base: format!("http://127.0.0.1:{port}"),
        log,
        _dir: dir,
    };
    let deadline = Instant::now() + Duration::from_secs(15);
    loop {
        if let Ok(r) = reqwest::get(format!("{}/v1/health", server.base)).await {
            if r.status().as_u16() == 200 {
                break;
            }
        }
        ensure(Instant::now() < deadline, || "server did not become healthy".into())?;
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    Ok(server)
}

async fn post(client: &reqwest::Client, url: String, body: Value) -> Result<(u16, Value), String> {
    let r = client.post(url).json(&body).send().await.map_err(|e| e.to_string())?;
    let status = r.status().as_u16();
    let text = r.text().await.map_err(|e| e.to_string())?;
    Ok((status, serde_json::from_str(&text).unwrap_or(Value::Null)))
}

fn service_suite() -> Check {
    block_on(async {
        let mut server = start_server().await?;
        let client = reqwest::Client::new();
        let base = server.base.clone();

        let prompts: Value = client
            .get(format!("{base}/v1/prompts"))
            .send()
            .await
            .map_err(|e| e.to_string())?
            .json()
            .await
            .map_err(|e| e.to_string())?;
        ensure(prompts.as_array().map(Vec::len) == Some(9), || format!("prompts: {prompts}"))?;

        let (status, _) = post(&client, format!("{base}/v1/query"), json!({"query": ""})).await?;
        ensure(status == 400, || format!("empty query -> {status}"))?;

        let mut tasks = Vec::new();
        for i in 0..16 {
            let client = client.clone();
            let base = base.clone();
            tasks.push(tokio::spawn(async move {
                let query = if i % 2 == 0 { DOSAGE_QUERY } else { OUT_OF_CORPUS_QUERY };
                let (status, body) = post(&client, format!("{base}/v1/query"), json!({"query": query})).await?;
                ensure(status == 200, || format!("query {i} -> {status}"))?;
                let abstained = body["abstained"].as_bool().ok_or("no abstained field")?;
                let sources = body["sources"].as_array().ok_or("no sources field")?;
                ensure(abstained == sources.is_empty() && abstained == (i % 2 == 1), || {
                    format!("query {i}: abstained={abstained} with {} sources", sources.len())
                })?;
                let qid = body["query_id"].as_str().ok_or("no query_id")?.to_string();
                let (status, _) = post(&client, format!("{base}/v1/feedback"), json!({"query_id": qid, "signal": "like"})).await?;
                ensure(status == 204, || format!("feedback {i} -> {status}"))?;
                Ok::<_, String>(qid)
            }));
        }
        let mut ids = HashSet::new();
        for t in tasks {
            ids.insert(t.await.map_err(|e| e.to_string())??);
        }
        ensure(ids.len() == 16, || "query ids not unique".into())?;
        let events = read_feedback_log(&server.log).map_err(|e| e.to_string())?;
        ensure(events.len() == 16, || format!("{} log lines", events.len()))?;
        ensure(events.iter().all(|e| ids.contains(&e.query_id)), || "log has an unknown query_id".into())?;

        // Kill-after-ack: SIGKILL as soon as the 204 arrives.
        let (_, body) = post(&client, format!("{base}/v1/query"), json!({"query": DOSAGE_QUERY})).await?;
        let qid = body["query_id"].as_str().ok_or("no query_id")?.to_string();
        let (status, _) = post(
            &client,
            format!("{base}/v1/feedback"),
            json!({"query_id": qid, "signal": "dislike", "free_text": "last words"}),
        )
        .await?;
        server.child.kill().map_err(|e| e.to_string())?;
        server.child.wait().map_err(|e| e.to_string())?;
        ensure(status == 204, || format!("final feedback -> {status}"))?;
        let events = read_feedback_log(&server.log).map_err(|e| e.to_string())?;
        ensure(events.iter().any(|e| e.query_id == qid), || "acked event missing after kill".into())?;
        Ok("9 prompts; empty query 400; 16 concurrent queries + 16 intact log lines; acked event survives SIGKILL".into())
    })
}

// --------------------------------------------------------------- determinism

const CHILD_ENV: &str = "DRUG_INSIGHTS_ACCEPTANCE_CHILD";

fn determinism_digest() -> Result<String, String> {
    let mut bytes = Vec::new();
    for dim in [8, 64, 1536] {
        for text in ["aaa", "amoxicillin dosage", "Metformin 500 mg twice daily", "x"] {
            let v = test_embed(text, dim).map_err(|e| e.to_string())?;
            bytes.extend(v.values.iter().flat_map(|x| x.to_le_bytes()));
        }
    }
    let embed_digest = fnv1a64(&bytes);
    let (index_bytes, answers) = block_on(run_mock_pipeline())?;
    let answers = serde_json::to_string(&answers).unwrap();
    Ok(format!(
        "embed={embed_digest:016x} index={:016x} answers={:016x}",
        fnv1a64(&index_bytes),
        fnv1a64(answers.as_bytes())
    ))
}

fn determinism() -> Check {
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let run = || -> Result<String, String> {
        let out = Command::new(&exe)
            .env(CHILD_ENV, "1")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    };
    let a = run()?;
    let b = run()?;
    ensure(a == b, || format!("processes disagree: {a} / {b}"))?;
    let here = determinism_digest()?;
    ensure(a == here, || format!("child {a} vs parent {here}"))?;
    // "aaa" at dimension 8 is a one-hot vector on bucket 2 (reference FNV-1a).
    let v = test_embed("aaa", 8).map_err(|e| e.to_string())?;
    ensure(v.values == [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], || format!("{:?}", v.values))?;
    Ok(format!("two processes agree: {a}"))
}

// ---------------------------------------------------------------------- main

fn main() {
    if std::env::var_os(CHILD_ENV).is_some() {
        match determinism_digest() {
            Ok(d) => println!("{d}"),
            Err(e) => {
                eprintln!("{e}");
                std::process::exit(1);
            }
        }
        return;
    }
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }

    let criteria: [(&str, u64, fn() -> Check); 8] = [
        ("retrieval-contract", 60, retrieval_contract),
        ("index-persistence", 5, index_persistence),
        ("prompt-grid", 1, prompt_grid),
        ("end-to-end-mock", 10, end_to_end),
        ("compare-4", 5, compare4),
        ("eval-harness-oracle", 10, eval_oracle),
        ("service-suite", 30, service_suite),
        ("determinism", 60, determinism),
    ];
    let mut failed = 0;
    for (name, budget_s, check) in criteria {
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = started.elapsed();
        let result = result.and_then(|detail| {
            if elapsed > Duration::from_secs(budget_s) {
                Err(format!("took {:.1}s, budget {budget_s}s ({detail})", elapsed.as_secs_f64()))
            } else {
                Ok(detail)
            }
        });
        match result {
            Ok(detail) => println!("PASS  {name:<20} {:>6.2}s  {detail}", elapsed.as_secs_f64()),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name:<20} {:>6.2}s  {reason}", elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
