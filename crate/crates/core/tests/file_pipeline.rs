use std::path::{Path, PathBuf};

use drug_insights::ingest::{ingest_path, Chunk, ChunkParams, SourceFormat};
use drug_insights::mock::EchoChatProvider;
use drug_insights::pipeline::{build_engine, index_config, load_index, read_jsonl, record_entries, write_jsonl};
use drug_insights::structure::{read_record_file, structure_corpus, RecordWriter, StructureOptions};
use drug_insights::{AppConfig, TestFnvEmbedder, VectorIndex};

fn formulary_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mini-formulary")
}

const CONFIG: &str = r#"
[embedder]
provider = "test-fnv"
dimension = 1536

[llm]
provider = "mock-echo"

[retrieval]
k = 3
threshold = 0.2
default_variant = "prompt_0a"
"#;

#[tokio::test]
async fn ingest_structure_index_query_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AppConfig::from_toml_str(CONFIG).unwrap();

    let (docs, chunks) = ingest_path(&formulary_dir(), SourceFormat::Plaintext, ChunkParams::default()).unwrap();
    assert_eq!(docs.len(), 3);
    let chunk_file = dir.path().join("chunks.jsonl");
    write_jsonl(&chunk_file, &chunks).unwrap();
    let chunks: Vec<Chunk> = read_jsonl(&chunk_file).unwrap();

    let record_file = dir.path().join("records.txt");
    let mut writer = RecordWriter::append_to(&record_file).unwrap();
    let outcome = structure_corpus(&chunks, &EchoChatProvider::new(), StructureOptions::default(), Some(&mut writer))
        .await
        .unwrap();
    drop(writer);
    let records = read_record_file(&record_file).unwrap();
    assert_eq!(records, outcome.records);
    let mut names: Vec<_> = records.iter().map(|r| r.name.to_lowercase()).collect();
    names.sort();
    assert_eq!(names, ["amoxicillin", "artemether-lumefantrine", "metformin"]);

    let embedder = TestFnvEmbedder::new(cfg.embedder.dimension);
    let entries = record_entries(&records, &chunks, &embedder).await.unwrap();
    let mut index = VectorIndex::new(index_config(&cfg)).unwrap();
    index.upsert(entries).unwrap();
    let index_file = dir.path().join("formulary.divx");
    index.save(&index_file).unwrap();

    let engine = build_engine(&cfg, load_index(&cfg, &index_file).unwrap()).unwrap();
    let a = engine
        .answer_query("What is the adult dosage of metformin?", "prompt_0a")
        .await
        .unwrap();
    assert!(!a.abstained, "{a:?}");
    assert_eq!(a.sources[0].doc_id, "metformin");
    assert!(a.sources.iter().all(|s| s.score >= 0.2));

    let b = engine
        .answer_query("How much does insulin cost in Lagos?", "prompt_2c")
        .await
        .unwrap();
    assert!(b.abstained);
    assert!(b.sources.is_empty());
}

#[test]
fn index_with_wrong_dimension_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.divx");
    let mut cfg = AppConfig::from_toml_str(CONFIG).unwrap();
    VectorIndex::new(index_config(&cfg)).unwrap().save(&path).unwrap();
    cfg.embedder.dimension = 128;
    assert!(load_index(&cfg, &path).is_err());
}
