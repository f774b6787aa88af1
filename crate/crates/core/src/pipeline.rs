//! Preference data construction: per-document summarize → critique → refine
//! loops, triplet selection, dataset writing, and the inference-time and
//! scoring entry points that reuse the same stages.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::Arc;

use futures::future::join_all;
use futures::stream::{self, StreamExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critique::{
    Critic, CritiqueConfig, CritiqueError, CritiqueResult, CritiqueStrategy, FactVerdict,
};
use crate::gateway::Gateway;
use crate::generation::{sentence_count, GenerationError, Generator, RefinementInput};
use crate::prompt::PromptSet;
use crate::types::{CritiqueFeedback, Document, GenerationParams, HallucinationScore, Summary};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("pool is empty")]
    EmptyPool,
    #[error("every sample failed for document '{document_id}': {detail}")]
    DocumentFailed { document_id: String, detail: String },
    #[error("duplicate document id '{0}'")]
    DuplicateId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid corpus line {line}: {detail}")]
    BadCorpusLine { line: usize, detail: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("output error: {0}")]
    Io(String),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Critique(#[from] CritiqueError),
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Extreme,
    Random,
    SingleBeam,
    CritiqueOnly,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::Extreme => "extreme",
            Selection::Random => "random",
            Selection::SingleBeam => "single_beam",
            Selection::CritiqueOnly => "critique_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub samples_per_doc: usize,
    pub critique_strategy: CritiqueStrategy,
    pub selection: Selection,
    pub workers: usize,
    pub rng_seed: u64,
    pub allow_identical_pairs: bool,
    pub enforce_single_sentence: bool,
    /// Decoding for the N initial summaries.
    pub sampling: GenerationParams,
    /// Decoding for refinement.
    pub refinement: GenerationParams,
    /// Decoding for the single-beam and inference-time summaries.
    pub greedy: GenerationParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            samples_per_doc: 4,
            critique_strategy: CritiqueStrategy::FineGrained,
            selection: Selection::Extreme,
            workers: 4,
            rng_seed: 0,
            allow_identical_pairs: false,
            enforce_single_sentence: false,
            sampling: GenerationParams::default(),
            refinement: GenerationParams::greedy(160),
            greedy: GenerationParams::greedy(160),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Precondition(m));
        if self.samples_per_doc == 0 {
            return bad("samples_per_doc must be >= 1".into());
        }
        if self.selection == Selection::CritiqueOnly && self.samples_per_doc < 2 {
            return bad("critique_only selection needs samples_per_doc >= 2".into());
        }
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        for (name, p) in [
            ("sampling", &self.sampling),
            ("refinement", &self.refinement),
            ("greedy", &self.greedy),
        ] {
            if let Err(e) = p.validate() {
                return bad(format!("{name}: {e}"));
            }
        }
        Ok(())
    }
}

/// One unfaithful initial summary with its refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub initial: Summary,
    pub refined: Summary,
    pub score: HallucinationScore,
    pub feedback: CritiqueFeedback,
}

/// Unfaithful samples of one document, ordered by sample index.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TripletCandidatePool {
    pub document_id: String,
    pub entries: Vec<PoolEntry>,
}

impl TripletCandidatePool {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score.value()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletMeta {
    pub strategy: String,
    pub chosen_source_score: f64,
    pub rejected_score: f64,
    pub n_samples: usize,
    pub critique_strategy: String,
}

/// A preference record as written to JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceTriplet {
    #[serde(rename = "id")]
    pub document_id: String,
    pub document: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: TripletMeta,
}

/// A supervised target as written to JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftRecord {
    pub id: String,
    pub document: String,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// No sample was judged unfaithful.
    AllFaithful,
    /// Every sample errored.
    DocumentFailed,
    /// Every sample failed to reach the backend.
    BackendUnreachable,
    /// Chosen and rejected texts are identical.
    IdenticalPair,
    /// Critique-only scores were all equal.
    NoPreference,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::AllFaithful => "all_faithful",
            SkipReason::DocumentFailed => "document_failed",
            SkipReason::BackendUnreachable => "backend_unreachable",
            SkipReason::IdenticalPair => "identical_pair",
            SkipReason::NoPreference => "no_preference",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub documents_processed: usize,
    pub records_written: usize,
    pub sft_records_written: usize,
    pub documents_skipped: usize,
    pub skip_reasons: BTreeMap<SkipReason, usize>,
    /// Individual samples dropped inside otherwise successful documents.
    pub sample_failures: usize,
    pub samples_filtered: usize,
    pub config_fingerprint: String,
}

impl DatasetManifest {
    /// True when nothing was written and every skipped document failed to
    /// reach the backend.
    pub fn backend_unreachable(&self) -> bool {
        self.records_written == 0
            && self.documents_skipped > 0
            && self.skip_reasons.get(&SkipReason::BackendUnreachable)
                == Some(&self.documents_skipped)
    }
}

/// Per-sample audit row for the optional trace output.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleTrace {
    pub id: String,
    pub sample_index: usize,
    #[serde(default)]
    pub initial: Option<String>,
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default)]
    pub verdicts: Vec<FactVerdict>,
    #[serde(default)]
    pub feedback: Option<String>,
    #[serde(default)]
    pub refined: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Result of running the summarize → critique → refine loop on one document.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolBuild {
    pub pool: TripletCandidatePool,
    pub failures: usize,
    pub filtered: usize,
    pub traces: Vec<SampleTrace>,
}

/// Argmin and argmax of the pool scores, first occurrence on ties.
fn extreme_indices(scores: &[f64]) -> Option<(usize, usize)> {
    let mut it = scores.iter().enumerate();
    let (_, first) = it.next()?;
    let (mut imin, mut imax) = (0, 0);
    let (mut vmin, mut vmax) = (*first, *first);
    for (i, &v) in it {
        if v < vmin {
            imin = i;
            vmin = v;
        }
        if v > vmax {
            imax = i;
            vmax = v;
        }
    }
    Some((imin, imax))
}

#[allow(clippy::too_many_arguments)]
fn triplet(
    document: &Document,
    chosen: &str,
    rejected: &str,
    strategy: Selection,
    chosen_source_score: f64,
    rejected_score: f64,
    n_samples: usize,
    critique: CritiqueStrategy,
) -> PreferenceTriplet {
    PreferenceTriplet {
        document_id: document.id.clone(),
        document: document.text.clone(),
        chosen: chosen.to_string(),
        rejected: rejected.to_string(),
        meta: TripletMeta {
            strategy: strategy.as_str().to_string(),
            chosen_source_score,
            rejected_score,
            n_samples,
            critique_strategy: critique.as_str().to_string(),
        },
    }
}

/// Chosen = refinement of the least-hallucinated entry, rejected = initial of
/// the most-hallucinated entry; ties go to the lowest sample index.
pub fn select_extreme(
    document: &Document,
    pool: &TripletCandidatePool,
    n_samples: usize,
    critique: CritiqueStrategy,
) -> Result<PreferenceTriplet, PipelineError> {
    let (imin, imax) = extreme_indices(&pool.scores()).ok_or(PipelineError::EmptyPool)?;
    let (lo, hi) = (&pool.entries[imin], &pool.entries[imax]);
    Ok(triplet(
        document,
        &lo.refined.text,
        &hi.initial.text,
        Selection::Extreme,
        lo.score.value(),
        hi.score.value(),
        n_samples,
        critique,
    ))
}

/// Rejected drawn uniformly from the initials and chosen drawn uniformly and
/// independently from the refinements.
pub fn select_random(
    document: &Document,
    pool: &TripletCandidatePool,
    rng_seed: u64,
    n_samples: usize,
    critique: CritiqueStrategy,
) -> Result<PreferenceTriplet, PipelineError> {
    let (chosen_idx, rejected_idx) = random_indices(pool.entries.len(), rng_seed)?;
    let (c, r) = (&pool.entries[chosen_idx], &pool.entries[rejected_idx]);
    Ok(triplet(
        document,
        &c.refined.text,
        &r.initial.text,
        Selection::Random,
        c.score.value(),
        r.score.value(),
        n_samples,
        critique,
    ))
}

/// `(chosen, rejected)` entry indices for random selection.
pub fn random_indices(len: usize, rng_seed: u64) -> Result<(usize, usize), PipelineError> {
    if len == 0 {
        return Err(PipelineError::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let rejected = rng.random_range(0..len);
    let chosen = rng.random_range(0..len);
    Ok((chosen, rejected))
}

/// SFT target: the extreme-selection chosen summary.
pub fn emit_sft_targets(
    document: &Document,
    pool: &TripletCandidatePool,
) -> Result<SftRecord, PipelineError> {
    let (imin, _) = extreme_indices(&pool.scores()).ok_or(PipelineError::EmptyPool)?;
    Ok(SftRecord {
        id: document.id.clone(),
        document: document.text.clone(),
        target: pool.entries[imin].refined.text.clone(),
    })
}

/// Stable per-document seed derived from the run seed.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Outcome of refine-at-inference for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutcome {
    pub id: String,
    pub summary: String,
    pub refined: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub id: String,
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default)]
    pub feedback: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub pairs: Vec<ScoredPair>,
    /// Mean over successful pairs; absent when none succeeded.
    pub mean_score: Option<f64>,
    pub failures: usize,
}

/// Sinks for [`Engine::construct_dataset`].
pub struct DatasetSinks<'a> {
    pub preferences: &'a mut dyn Write,
    pub sft: Option<&'a mut dyn Write>,
    pub trace: Option<&'a mut dyn Write>,
}

struct DocumentOutcome {
    triplet: Option<PreferenceTriplet>,
    sft: Option<SftRecord>,
    skip: Option<SkipReason>,
    failures: usize,
    filtered: usize,
    traces: Vec<SampleTrace>,
}

enum SampleOutcome {
    Entry(PoolEntry),
    Faithful,
    Filtered,
    Failed { transport: bool },
}

/// Runs every pipeline stage against one shared gateway.
#[derive(Debug, Clone)]
pub struct Engine {
    generator: Generator,
    critic: Critic,
    config: PipelineConfig,
}

impl Engine {
    pub fn new(
        gateway: Arc<Gateway>,
        prompts: Arc<PromptSet>,
        critique: CritiqueConfig,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            generator: Generator::new(gateway.clone(), prompts.clone()),
            critic: Critic::new(gateway, prompts, critique),
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn critic(&self) -> &Critic {
        &self.critic
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    fn sampling_params(&self, document: &Document) -> GenerationParams {
        let base = self.config.sampling.seed.unwrap_or(self.config.rng_seed);
        GenerationParams {
            seed: Some(derive_seed(base, &document.id)),
            ..self.config.sampling.clone()
        }
    }

    async fn run_sample(
        &self,
        document: &Document,
        sample_index: usize,
        strategy: CritiqueStrategy,
    ) -> (SampleOutcome, SampleTrace) {
        let mut trace = SampleTrace {
            id: document.id.clone(),
            sample_index,
            ..SampleTrace::default()
        };
        let fail = |trace: &mut SampleTrace, msg: String, transport: bool| {
            tracing::warn!(document = %document.id, sample_index, error = %msg, "sample skipped");
            trace.error = Some(msg);
            SampleOutcome::Failed { transport }
        };
        let params = self.sampling_params(document);
        let initial = match self
            .generator
            .generate_summary(document, sample_index, &params)
            .await
        {
            Ok(s) => s,
            Err(e) => {
                let t = e.is_transport();
                return (fail(&mut trace, e.to_string(), t), trace);
            }
        };
        trace.initial = Some(initial.text.clone());
        if self.config.enforce_single_sentence && sentence_count(&initial.text) > 1 {
            trace.error = Some("filtered: more than one sentence".into());
            return (SampleOutcome::Filtered, trace);
        }
        let critique = match self.critic.critique(strategy, document, &initial).await {
            Ok(c) => c,
            Err(e) => {
                let t = e.is_transport();
                return (fail(&mut trace, e.to_string(), t), trace);
            }
        };
        trace.score = Some(critique.score.value());
        trace.verdicts = critique.fact_verdicts.clone();
        trace.feedback = Some(critique.feedback.text.clone());
        if !critique.is_unfaithful() {
            return (SampleOutcome::Faithful, trace);
        }
        let refined = match self
            .generator
            .refine_summary(
                RefinementInput {
                    document,
                    summary: &initial,
                    comment: &critique.feedback,
                },
                &self.config.refinement,
            )
            .await
        {
            Ok(r) => r,
            Err(e) => {
                let t = e.is_transport();
                return (fail(&mut trace, e.to_string(), t), trace);
            }
        };
        trace.refined = Some(refined.text.clone());
        let entry = PoolEntry {
            initial,
            refined,
            score: critique.score,
            feedback: critique.feedback,
        };
        (SampleOutcome::Entry(entry), trace)
    }

    /// Summarize, critique and (when unfaithful) refine `n` samples. Samples
    /// that error are skipped; the document fails only when all of them do.
    pub async fn build_candidate_pool(
        &self,
        document: &Document,
        n: usize,
        strategy: CritiqueStrategy,
    ) -> Result<PoolBuild, PipelineError> {
        if n == 0 {
            return Err(PipelineError::Precondition("n must be >= 1".into()));
        }
        let results = join_all((0..n).map(|i| self.run_sample(document, i, strategy))).await;
        let mut build = PoolBuild {
            pool: TripletCandidatePool {
                document_id: document.id.clone(),
                entries: Vec::new(),
            },
            failures: 0,
            filtered: 0,
            traces: Vec::with_capacity(n),
        };
        let mut transport_failures = 0;
        for (outcome, trace) in results {
            match outcome {
                SampleOutcome::Entry(e) => build.pool.entries.push(e),
                SampleOutcome::Faithful => {}
                SampleOutcome::Filtered => build.filtered += 1,
                SampleOutcome::Failed { transport } => {
                    build.failures += 1;
                    transport_failures += usize::from(transport);
                }
            }
            build.traces.push(trace);
        }
        if build.failures == n {
            let detail = build
                .traces
                .iter()
                .find_map(|t| t.error.clone())
                .unwrap_or_default();
            let detail = if transport_failures == n {
                format!("backend unreachable: {detail}")
            } else {
                detail
            };
            return Err(PipelineError::DocumentFailed {
                document_id: document.id.clone(),
                detail,
            });
        }
        Ok(build)
    }

    /// Greedy summary, greedy critique, and (if unfaithful) greedy refinement.
    /// Returns `None` when the summary is judged faithful.
    pub async fn select_single_beam(
        &self,
        document: &Document,
        strategy: CritiqueStrategy,
    ) -> Result<Option<(PreferenceTriplet, SampleTrace)>, PipelineError> {
        let initial = self
            .generator
            .generate_summary(document, 0, &self.config.greedy)
            .await?;
        let critique = self.critic.critique(strategy, document, &initial).await?;
        let mut trace = SampleTrace {
            id: document.id.clone(),
            sample_index: 0,
            initial: Some(initial.text.clone()),
            score: Some(critique.score.value()),
            verdicts: critique.fact_verdicts.clone(),
            feedback: Some(critique.feedback.text.clone()),
            ..SampleTrace::default()
        };
        if !critique.is_unfaithful() {
            return Ok(None);
        }
        let refined = self
            .generator
            .refine_summary(
                RefinementInput {
                    document,
                    summary: &initial,
                    comment: &critique.feedback,
                },
                &self.config.greedy,
            )
            .await?;
        trace.refined = Some(refined.text.clone());
        let s = critique.score.value();
        Ok(Some((
            triplet(
                document,
                &refined.text,
                &initial.text,
                Selection::SingleBeam,
                s,
                s,
                1,
                strategy,
            ),
            trace,
        )))
    }

    /// Critiques `n` initial summaries without refinement and pairs the
    /// lowest-scoring (chosen) with the highest-scoring (rejected). Returns
    /// `None` when every score is equal.
    pub async fn select_critique_only(
        &self,
        document: &Document,
        n: usize,
        strategy: CritiqueStrategy,
    ) -> Result<(Option<PreferenceTriplet>, Vec<SampleTrace>, usize), PipelineError> {
        if n < 2 {
            return Err(PipelineError::Precondition(
                "critique-only needs n >= 2".into(),
            ));
        }
        let params = self.sampling_params(document);
        let results = join_all((0..n).map(|i| {
            let params = params.clone();
            async move {
                let summary = self
                    .generator
                    .generate_summary(document, i, &params)
                    .await?;
                let critique = self.critic.critique(strategy, document, &summary).await?;
                Ok::<_, PipelineError>((summary, critique))
            }
        }))
        .await;

        let mut scored: Vec<(Summary, CritiqueResult)> = Vec::new();
        let mut traces = Vec::with_capacity(n);
        let mut failures = 0;
        let mut transport = 0;
        for (i, r) in results.into_iter().enumerate() {
            let mut trace = SampleTrace {
                id: document.id.clone(),
                sample_index: i,
                ..SampleTrace::default()
            };
            match r {
                Ok((s, c)) => {
                    trace.initial = Some(s.text.clone());
                    trace.score = Some(c.score.value());
                    trace.verdicts = c.fact_verdicts.clone();
                    trace.feedback = Some(c.feedback.text.clone());
                    scored.push((s, c));
                }
                Err(e) => {
                    failures += 1;
                    transport += usize::from(
                        matches!(&e,
                        PipelineError::Generation(g) if g.is_transport())
                            || matches!(&e, PipelineError::Critique(c) if c.is_transport()),
                    );
                    trace.error = Some(e.to_string());
                }
            }
            traces.push(trace);
        }
        if failures == n {
            let detail = traces
                .iter()
                .find_map(|t| t.error.clone())
                .unwrap_or_default();
            return Err(PipelineError::DocumentFailed {
                document_id: document.id.clone(),
                detail: if transport == n {
                    format!("backend unreachable: {detail}")
                } else {
                    detail
                },
            });
        }
        let scores: Vec<f64> = scored.iter().map(|(_, c)| c.score.value()).collect();
        let (imin, imax) = extreme_indices(&scores).expect("at least one success");
        if scores[imin] == scores[imax] {
            return Ok((None, traces, failures));
        }
        let (lo, hi) = (&scored[imin], &scored[imax]);
        let t = triplet(
            document,
            &lo.0.text,
            &hi.0.text,
            Selection::CritiqueOnly,
            scores[imin],
            scores[imax],
            n,
            strategy,
        );
        Ok((Some(t), traces, failures))
    }

    /// Greedy summary followed by one critique-guided refinement when the
    /// critique flags it. Critique failures fall back to the initial summary.
    pub async fn refine_at_inference(
        &self,
        document: &Document,
        strategy: CritiqueStrategy,
    ) -> Result<InferenceOutcome, PipelineError> {
        let initial = self
            .generator
            .generate_summary(document, 0, &self.config.greedy)
            .await?;
        let unchanged = |score: Option<f64>, warning: Option<String>| InferenceOutcome {
            id: document.id.clone(),
            summary: initial.text.clone(),
            refined: false,
            initial: None,
            score,
            warning,
        };
        let critique = match self.critic.critique(strategy, document, &initial).await {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!(document = %document.id, error = %e, "critique failed; keeping initial summary");
                return Ok(unchanged(None, Some(format!("critique failed: {e}"))));
            }
        };
        if !critique.is_unfaithful() {
            return Ok(unchanged(Some(critique.score.value()), None));
        }
        let refined = self
            .generator
            .refine_summary(
                RefinementInput {
                    document,
                    summary: &initial,
                    comment: &critique.feedback,
                },
                &self.config.greedy,
            )
            .await?;
        Ok(InferenceOutcome {
            id: document.id.clone(),
            summary: refined.text,
            refined: true,
            initial: Some(initial.text),
            score: Some(critique.score.value()),
            warning: None,
        })
    }

    /// Critiques each pair and averages the successful scores.
    pub async fn score_corpus(
        &self,
        pairs: &[(Document, Summary)],
        strategy: CritiqueStrategy,
    ) -> ScoreReport {
        let results: Vec<ScoredPair> = stream::iter(pairs)
            .map(|(doc, summary)| async move {
                match self.critic.critique(strategy, doc, summary).await {
                    Ok(c) => ScoredPair {
                        id: doc.id.clone(),
                        score: Some(c.score.value()),
                        feedback: Some(c.feedback.text),
                        error: None,
                    },
                    Err(e) => ScoredPair {
                        id: doc.id.clone(),
                        score: None,
                        feedback: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .buffered(self.config.workers)
            .collect()
            .await;
        let ok: Vec<f64> = results.iter().filter_map(|p| p.score).collect();
        ScoreReport {
            failures: results.len() - ok.len(),
            mean_score: (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
            pairs: results,
        }
    }

    async fn process_document(&self, document: &Document) -> DocumentOutcome {
        let cfg = &self.config;
        let strategy = cfg.critique_strategy;
        let n = cfg.samples_per_doc;
        let mut out = DocumentOutcome {
            triplet: None,
            sft: None,
            skip: None,
            failures: 0,
            filtered: 0,
            traces: Vec::new(),
        };
        let failed = |e: &PipelineError| {
            tracing::warn!(document = %document.id, error = %e, "document skipped");
            match e {
                PipelineError::DocumentFailed { detail, .. }
                    if detail.starts_with("backend unreachable") =>
                {
                    SkipReason::BackendUnreachable
                }
                PipelineError::Generation(g) if g.is_transport() => SkipReason::BackendUnreachable,
                PipelineError::Critique(c) if c.is_transport() => SkipReason::BackendUnreachable,
                _ => SkipReason::DocumentFailed,
            }
        };
        let selected = match cfg.selection {
            Selection::Extreme | Selection::Random => {
                match self.build_candidate_pool(document, n, strategy).await {
                    Err(e) => {
                        out.skip = Some(failed(&e));
                        out.failures = n;
                        None
                    }
                    Ok(build) => {
                        out.failures = build.failures;
                        out.filtered = build.filtered;
                        out.traces = build.traces;
                        if build.pool.is_empty() {
                            out.skip = Some(SkipReason::AllFaithful);
                            None
                        } else {
                            out.sft = emit_sft_targets(document, &build.pool).ok();
                            if cfg.selection == Selection::Extreme {
                                select_extreme(document, &build.pool, n, strategy).ok()
                            } else {
                                let seed = derive_seed(cfg.rng_seed, &document.id);
                                select_random(document, &build.pool, seed, n, strategy).ok()
                            }
                        }
                    }
                }
            }
            Selection::SingleBeam => match self.select_single_beam(document, strategy).await {
                Err(e) => {
                    out.skip = Some(failed(&e));
                    out.failures = 1;
                    None
                }
                Ok(None) => {
                    out.skip = Some(SkipReason::AllFaithful);
                    None
                }
                Ok(Some((t, trace))) => {
                    out.traces.push(trace);
                    out.sft = Some(SftRecord {
                        id: t.document_id.clone(),
                        document: t.document.clone(),
                        target: t.chosen.clone(),
                    });
                    Some(t)
                }
            },
            Selection::CritiqueOnly => match self.select_critique_only(document, n, strategy).await
            {
                Err(e) => {
                    out.skip = Some(failed(&e));
                    out.failures = n;
                    None
                }
                Ok((t, traces, failures)) => {
                    out.traces = traces;
                    out.failures = failures;
                    if t.is_none() {
                        out.skip = Some(SkipReason::NoPreference);
                    }
                    t
                }
            },
        };
        if let Some(t) = selected {
            if t.chosen == t.rejected && !cfg.allow_identical_pairs {
                tracing::info!(document = %document.id, "dropping identical chosen/rejected pair");
                out.skip = Some(SkipReason::IdenticalPair);
            } else {
                out.triplet = Some(t);
            }
        }
        out
    }

    /// Runs the configured selection over a corpus, writing records in corpus
    /// order. Per-document failures are counted, never fatal; write errors
    /// abort immediately.
    pub async fn construct_dataset(
        &self,
        corpus: &[Document],
        sinks: DatasetSinks<'_>,
        config_fingerprint: &str,
    ) -> Result<DatasetManifest, PipelineError> {
        validate_corpus(corpus)?;
        let DatasetSinks {
            preferences,
            mut sft,
            mut trace,
        } = sinks;
        let mut manifest = DatasetManifest {
            config_fingerprint: config_fingerprint.to_string(),
            ..DatasetManifest::default()
        };
        let mut outcomes = stream::iter(corpus)
            .map(|doc| self.process_document(doc))
            .buffered(self.config.workers);
        while let Some(outcome) = outcomes.next().await {
            manifest.documents_processed += 1;
            manifest.sample_failures += outcome.failures;
            manifest.samples_filtered += outcome.filtered;
            if let Some(w) = trace.as_deref_mut() {
                for t in &outcome.traces {
                    write_json_line(w, t)?;
                }
            }
            if let (Some(w), Some(rec)) = (sft.as_deref_mut(), &outcome.sft) {
                write_json_line(w, rec)?;
                manifest.sft_records_written += 1;
            }
            match (outcome.triplet, outcome.skip) {
                (Some(t), _) => {
                    write_json_line(preferences, &t)?;
                    manifest.records_written += 1;
                }
                (None, reason) => {
                    manifest.documents_skipped += 1;
                    *manifest
                        .skip_reasons
                        .entry(reason.unwrap_or(SkipReason::DocumentFailed))
                        .or_default() += 1;
                }
            }
        }
        preferences.flush()?;
        if let Some(w) = sft {
            w.flush()?;
        }
        if let Some(w) = trace {
            w.flush()?;
        }
        Ok(manifest)
    }
}

pub fn write_json_line<T: Serialize>(
    w: &mut (impl Write + ?Sized),
    value: &T,
) -> Result<(), PipelineError> {
    let line = serde_json::to_string(value).map_err(|e| PipelineError::Io(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn validate_corpus(corpus: &[Document]) -> Result<(), PipelineError> {
    if corpus.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for doc in corpus {
        if !seen.insert(doc.id.as_str()) {
            return Err(PipelineError::DuplicateId(doc.id.clone()));
        }
    }
    Ok(())
}

/// Reads `{"id", "document"}` JSONL, rejecting duplicate ids and blank text.
pub fn load_corpus<R: BufRead>(reader: R) -> Result<Vec<Document>, PipelineError> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| PipelineError::BadCorpusLine {
            line: i + 1,
            detail,
        };
        let doc: Document = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        doc.validate().map_err(|e| bad(e.to_string()))?;
        docs.push(doc);
    }
    validate_corpus(&docs)?;
    Ok(docs)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairLine {
    id: String,
    document: String,
    summary: String,
}

/// Reads `{"id", "document", "summary"}` JSONL for scoring.
pub fn load_pairs<R: BufRead>(reader: R) -> Result<Vec<(Document, Summary)>, PipelineError> {
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| PipelineError::BadCorpusLine {
            line: i + 1,
            detail,
        };
        let p: PairLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let doc = Document::new(p.id, p.document).map_err(|e| bad(e.to_string()))?;
        pairs.push((doc, Summary::initial(p.summary, 0)));
    }
    Ok(pairs)
}
