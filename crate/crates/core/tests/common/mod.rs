#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use faithpref_core::gateway::{ScriptEntry, ScriptedBackend};
use faithpref_core::{
    CritiqueConfig, CritiqueStrategy, DatasetManifest, DatasetSinks, Document, Engine, Gateway,
    PipelineConfig, PromptSet,
};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

pub fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixture(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap()
}

/// Top-k map whose merged yes/no log-ratio is exactly `s` for dyadic `s`.
pub fn verdict_logprobs(s: f64) -> Vec<(&'static str, f64)> {
    vec![("Yes", -0.5 + s.min(0.0)), ("No", -0.5 - s.max(0.0))]
}

pub fn binary_critique(doc: &str, i: usize, s: f64) -> ScriptEntry {
    let text = if s > 0.0 { "Yes" } else { "No" };
    ScriptEntry::with_logprobs(format!("critique/{doc}/{i}"), text, &verdict_logprobs(s))
}

pub fn summary(doc: &str, i: usize, text: impl Into<String>) -> ScriptEntry {
    ScriptEntry::text(format!("summ/{doc}/{i}"), text)
}

pub fn refinement(doc: &str, i: usize, text: impl Into<String>) -> ScriptEntry {
    ScriptEntry::text(format!("refine/{doc}/{i}"), text)
}

/// Fact-list reply plus one NLI reply per fact.
pub fn fine_grained_critique(doc: &str, i: usize, labels: &[&str]) -> Vec<ScriptEntry> {
    let mut list = String::from("Facts:\n");
    for (j, _) in labels.iter().enumerate() {
        list.push_str(&format!("{}. Fact {j} of sample {i}.\n", j + 1));
    }
    let mut out = vec![ScriptEntry::text(format!("facts/{doc}/{i}"), list)];
    for (j, label) in labels.iter().enumerate() {
        out.push(ScriptEntry::text(
            format!("nli/{doc}/{i}/{}", j + 1),
            *label,
        ));
    }
    out
}

pub fn gateway(entries: Vec<ScriptEntry>) -> Arc<Gateway> {
    Arc::new(Gateway::new(Arc::new(ScriptedBackend::new(entries)), 16))
}

pub fn engine(entries: Vec<ScriptEntry>, config: PipelineConfig) -> Engine {
    Engine::new(
        gateway(entries),
        Arc::new(PromptSet::default()),
        CritiqueConfig::default(),
        config,
    )
    .unwrap()
}

pub fn binary_config(n: usize, workers: usize) -> PipelineConfig {
    PipelineConfig {
        samples_per_doc: n,
        critique_strategy: CritiqueStrategy::Binary,
        workers,
        ..PipelineConfig::default()
    }
}

pub fn load_fixture_corpus(rel: &str) -> Vec<Document> {
    faithpref_core::pipeline::load_corpus(read_fixture(rel).as_bytes()).unwrap()
}

pub fn load_fixture_script(rel: &str) -> Vec<ScriptEntry> {
    serde_json::from_str(&read_fixture(rel)).unwrap()
}

pub struct Output {
    pub manifest: DatasetManifest,
    pub preferences: Vec<u8>,
    pub sft: Vec<u8>,
    pub trace: Vec<u8>,
}

pub async fn construct(engine: &Engine, corpus: &[Document]) -> Output {
    let (mut preferences, mut sft, mut trace) = (Vec::new(), Vec::new(), Vec::new());
    let manifest = engine
        .construct_dataset(
            corpus,
            DatasetSinks {
                preferences: &mut preferences,
                sft: Some(&mut sft),
                trace: Some(&mut trace),
            },
            "test",
        )
        .await
        .unwrap();
    Output {
        manifest,
        preferences,
        sft,
        trace,
    }
}

/// Seeded fine-grained scenario: `docs` documents with `n` samples each,
/// fact counts in 1..=6, and a mix of label spellings.
pub fn fine_grained_scenario(
    docs: usize,
    n: usize,
    seed: u64,
) -> (Vec<Document>, Vec<ScriptEntry>) {
    use rand::{Rng, SeedableRng};
    const LABELS: [&str; 6] = [
        "Entailed",
        "entailed.",
        "Neutral",
        "Contradicted",
        "The statement is contradicted by the context.",
        "unclear",
    ];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Vec::new();
    let mut script = Vec::new();
    for d in 0..docs {
        let id = format!("doc-{d:03}");
        corpus.push(Document::new(&id, format!("Source text number {d}.")).unwrap());
        for i in 0..n {
            script.push(summary(&id, i, format!("Summary {i} of {id}.")));
            let m = rng.random_range(1..=6);
            let labels: Vec<&str> = (0..m)
                .map(|_| LABELS[rng.random_range(0..LABELS.len())])
                .collect();
            script.extend(fine_grained_critique(&id, i, &labels));
            script.push(refinement(&id, i, format!("Refined {i} of {id}.")));
        }
    }
    (corpus, script)
}
