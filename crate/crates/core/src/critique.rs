//! LLM self-critique: a binary yes/no judgment scored by log-likelihood
//! ratio, and a fine-grained atomic-fact + NLI check scored by the fraction
//! of facts the document does not entail.

use std::sync::Arc;

use futures::future::try_join_all;
use serde::{Deserialize, Serialize};

use crate::gateway::{ChatRequest, Gateway, GatewayError, MAX_TOP_LOGPROBS};
use crate::parse::{parse_fact_list, parse_nli_label, ParseError};
use crate::prompt::{PromptSet, TemplateError};
use crate::types::{
    AtomicFact, CritiqueFeedback, Document, GenerationParams, HallucinationScore, NliVerdict,
    Summary,
};

/// Header line of fine-grained feedback listing unsupported facts.
pub const UNSUPPORTED_HEADER: &str = "The following statements are not supported by the document:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CritiqueStrategy {
    Binary,
    FineGrained,
}

impl CritiqueStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            CritiqueStrategy::Binary => "binary",
            CritiqueStrategy::FineGrained => "fine_grained",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactVerdict {
    pub fact: AtomicFact,
    pub verdict: NliVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueResult {
    pub score: HallucinationScore,
    pub feedback: CritiqueFeedback,
    pub strategy: CritiqueStrategy,
    #[serde(default)]
    pub fact_verdicts: Vec<FactVerdict>,
}

impl CritiqueResult {
    pub fn is_unfaithful(&self) -> bool {
        self.score.is_unfaithful()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CritiqueError {
    #[error("critique failed: {0}")]
    CritiqueFailed(String),
    #[error("atomic fact extraction failed after {attempts} attempts")]
    ExtractionFailed { attempts: u32 },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl CritiqueError {
    pub fn is_transport(&self) -> bool {
        matches!(self, CritiqueError::Gateway(e) if e.is_transport())
    }
}

/// Score and feedback from a pair of verdict-token log-probabilities.
pub fn binary_result(lp_yes: f64, lp_no: f64) -> Result<CritiqueResult, CritiqueError> {
    let score = HallucinationScore::log_ratio(lp_yes - lp_no)
        .map_err(|e| CritiqueError::CritiqueFailed(e.to_string()))?;
    let feedback = if score.is_unfaithful() {
        CritiqueFeedback::unfaithful()
    } else {
        CritiqueFeedback::faithful()
    };
    Ok(CritiqueResult {
        score,
        feedback,
        strategy: CritiqueStrategy::Binary,
        fact_verdicts: Vec::new(),
    })
}

/// Score and feedback from per-fact NLI verdicts. Fails on an empty list.
pub fn fine_grained_result(
    fact_verdicts: Vec<FactVerdict>,
) -> Result<CritiqueResult, CritiqueError> {
    if fact_verdicts.is_empty() {
        return Err(CritiqueError::CritiqueFailed(
            "no atomic facts to judge".into(),
        ));
    }
    let unsupported: Vec<AtomicFact> = fact_verdicts
        .iter()
        .filter(|fv| !fv.verdict.is_entailed())
        .map(|fv| fv.fact.clone())
        .collect();
    let score = HallucinationScore::fraction(unsupported.len() as f64 / fact_verdicts.len() as f64)
        .expect("count ratio lies in [0, 1]");
    let feedback = if unsupported.is_empty() {
        CritiqueFeedback::faithful()
    } else {
        let mut text = String::from(UNSUPPORTED_HEADER);
        for f in &unsupported {
            text.push_str("\n- ");
            text.push_str(&f.text);
        }
        CritiqueFeedback {
            text,
            unsupported_facts: unsupported,
        }
    };
    Ok(CritiqueResult {
        score,
        feedback,
        strategy: CritiqueStrategy::FineGrained,
        fact_verdicts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CritiqueConfig {
    pub max_parse_retries: u32,
    /// Added to the extraction temperature on every parse retry.
    pub retry_temperature_step: f64,
    pub extraction: GenerationParams,
    pub nli: GenerationParams,
}

impl Default for CritiqueConfig {
    fn default() -> Self {
        Self {
            max_parse_retries: 2,
            retry_temperature_step: 0.3,
            extraction: GenerationParams::greedy(256),
            nli: GenerationParams::greedy(16),
        }
    }
}

/// Request tags for one (document, sample) critique.
fn tag(kind: &str, doc_id: &str, sample: usize) -> String {
    format!("{kind}/{doc_id}/{sample}")
}

/// Runs either critique strategy against a shared gateway.
#[derive(Debug, Clone)]
pub struct Critic {
    gateway: Arc<Gateway>,
    prompts: Arc<PromptSet>,
    config: CritiqueConfig,
}

impl Critic {
    pub fn new(gateway: Arc<Gateway>, prompts: Arc<PromptSet>, config: CritiqueConfig) -> Self {
        Self {
            gateway,
            prompts,
            config,
        }
    }

    pub async fn critique(
        &self,
        strategy: CritiqueStrategy,
        document: &Document,
        summary: &Summary,
    ) -> Result<CritiqueResult, CritiqueError> {
        match strategy {
            CritiqueStrategy::Binary => self.critique_binary(document, summary).await,
            CritiqueStrategy::FineGrained => self.critique_fine_grained(document, summary).await,
        }
    }

    pub async fn critique_binary(
        &self,
        document: &Document,
        summary: &Summary,
    ) -> Result<CritiqueResult, CritiqueError> {
        let prompt = self.prompts.critique_bin(&document.text, &summary.text)?;
        let request = ChatRequest::new(
            tag("critique", &document.id, summary.sample_index),
            prompt,
            GenerationParams::greedy(1),
        )
        .with_logprobs(MAX_TOP_LOGPROBS);
        let (lp_yes, lp_no) = match self.gateway.yes_no_logprobs(&request).await {
            Ok(pair) => pair,
            Err(GatewayError::VerdictTokensAbsent) => {
                return Err(CritiqueError::CritiqueFailed(
                    "verdict tokens absent from top-k logprobs".into(),
                ))
            }
            Err(e) => return Err(e.into()),
        };
        binary_result(lp_yes, lp_no)
    }

    /// Decomposes a summary into atomic facts, retrying unparseable replies
    /// with a hotter temperature.
    pub async fn extract_atomic_facts(
        &self,
        document_id: &str,
        summary: &Summary,
    ) -> Result<Vec<AtomicFact>, CritiqueError> {
        let prompt = self.prompts.atomic_fact(&summary.text)?;
        let mut params = self.config.extraction.clone();
        let attempts = self.config.max_parse_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                params.temperature += self.config.retry_temperature_step;
                params.decode_mode = crate::types::DecodeMode::Sample;
            }
            let request = ChatRequest::new(
                tag("facts", document_id, summary.sample_index),
                prompt.clone(),
                params.clone(),
            );
            let completion = self.gateway.complete(&request).await?;
            match parse_fact_list(&completion.choices[0].text) {
                Ok(facts) => return Ok(facts),
                Err(ParseError::EmptyFactList) => {
                    tracing::debug!(
                        document_id,
                        sample = summary.sample_index,
                        attempt,
                        "no facts parsed"
                    );
                }
                Err(e) => return Err(CritiqueError::CritiqueFailed(e.to_string())),
            }
        }
        Err(CritiqueError::ExtractionFailed { attempts })
    }

    /// NLI check of one fact against the document. Unrecognized replies
    /// count as neutral.
    pub async fn verify_fact(
        &self,
        document: &Document,
        sample_index: usize,
        fact: &AtomicFact,
    ) -> Result<NliVerdict, CritiqueError> {
        let prompt = self.prompts.nli(&document.text, &fact.text)?;
        let request = ChatRequest::new(
            format!("nli/{}/{}/{}", document.id, sample_index, fact.index),
            prompt,
            self.config.nli.clone(),
        );
        let completion = self.gateway.complete(&request).await?;
        Ok(parse_nli_label(&completion.choices[0].text).unwrap_or(NliVerdict::Neutral))
    }

    pub async fn critique_fine_grained(
        &self,
        document: &Document,
        summary: &Summary,
    ) -> Result<CritiqueResult, CritiqueError> {
        let facts = match self.extract_atomic_facts(&document.id, summary).await {
            Ok(f) => f,
            Err(CritiqueError::ExtractionFailed { attempts }) => {
                return Err(CritiqueError::CritiqueFailed(format!(
                    "atomic fact extraction failed after {attempts} attempts"
                )))
            }
            Err(e) => return Err(e),
        };
        let verdicts = try_join_all(
            facts
                .iter()
                .map(|f| self.verify_fact(document, summary.sample_index, f)),
        )
        .await?;
        fine_grained_result(
            facts
                .into_iter()
                .zip(verdicts)
                .map(|(fact, verdict)| FactVerdict { fact, verdict })
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptEntry, ScriptedBackend};
    use crate::types::{FAITHFUL_TEXT, UNFAITHFUL_TEXT};
    use proptest::prelude::*;

    fn critic(entries: Vec<ScriptEntry>) -> Critic {
        let gw = Gateway::new(Arc::new(ScriptedBackend::new(entries)), 4);
        Critic::new(
            Arc::new(gw),
            Arc::new(PromptSet::default()),
            CritiqueConfig::default(),
        )
    }

    fn doc() -> Document {
        Document::new("d1", "Sam barks.").unwrap()
    }

    fn fv(verdicts: &[NliVerdict]) -> Vec<FactVerdict> {
        verdicts
            .iter()
            .enumerate()
            .map(|(i, v)| FactVerdict {
                fact: AtomicFact {
                    index: i + 1,
                    text: format!("fact {}", i + 1),
                },
                verdict: *v,
            })
            .collect()
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn binary_examples() {
        // s = ln(0.7) - ln(0.3)
        let r = binary_result(-0.3567, -1.2040).unwrap();
        assert!((r.score.value() - 0.8473).abs() < 1e-4);
        assert!(((0.7f64 / 0.3).ln() - 0.8473).abs() < 1e-4);
        assert_eq!(r.feedback.text, UNFAITHFUL_TEXT);

        let r = binary_result(-0.6931, -0.6931).unwrap();
        assert_eq!(r.score.value(), 0.0);
        assert_eq!(r.feedback.text, FAITHFUL_TEXT);

        let r = binary_result(-2.3026, -0.1054).unwrap();
        assert!((r.score.value() - -2.1972).abs() < 1e-9);
        assert_eq!(r.feedback.text, FAITHFUL_TEXT);
        assert!(r.fact_verdicts.is_empty());
    }

    #[test]
    fn fine_grained_examples() {
        use NliVerdict::*;
        let r = fine_grained_result(fv(&[Entailed, Neutral, Entailed, Contradicted])).unwrap();
        assert_eq!(r.score.value(), 0.5);
        assert_eq!(
            r.feedback.text,
            format!("{UNSUPPORTED_HEADER}\n- fact 2\n- fact 4")
        );
        assert_eq!(r.feedback.unsupported_facts.len(), 2);

        let r = fine_grained_result(fv(&[Entailed, Entailed, Entailed])).unwrap();
        assert_eq!(r.score.value(), 0.0);
        assert_eq!(r.feedback.text, FAITHFUL_TEXT);

        let r = fine_grained_result(fv(&[Contradicted])).unwrap();
        assert_eq!(r.score.value(), 1.0);
        assert!(r.feedback.text.ends_with("- fact 1"));

        assert!(fine_grained_result(Vec::new()).is_err());
    }

    #[tokio::test]
    async fn binary_through_gateway() {
        let c = critic(vec![ScriptEntry::with_logprobs(
            "critique/d1/0",
            "Yes",
            &[("Yes", -0.3567), ("No", -1.2040)],
        )]);
        let r = c
            .critique_binary(&doc(), &Summary::initial("s", 0))
            .await
            .unwrap();
        assert!((r.score.value() - (-0.3567 - -1.2040)).abs() < 1e-15);
    }

    #[tokio::test]
    async fn absent_verdict_tokens_fail_the_critique() {
        let c = critic(vec![ScriptEntry::with_logprobs(
            "critique/d1/0",
            "Sure",
            &[("Sure", -0.01)],
        )]);
        let err = c
            .critique_binary(&doc(), &Summary::initial("s", 0))
            .await
            .unwrap_err();
        assert!(matches!(err, CritiqueError::CritiqueFailed(_)));
    }

    #[tokio::test]
    async fn extraction_retries_then_succeeds() {
        let c = critic(vec![
            ScriptEntry::text("facts/d1/0", ""),
            ScriptEntry::text("facts/d1/0", "Facts:\n1. A."),
        ]);
        let facts = c
            .extract_atomic_facts("d1", &Summary::initial("s", 0))
            .await
            .unwrap();
        assert_eq!(facts.len(), 1);
    }

    #[tokio::test]
    async fn extraction_two_facts() {
        let c = critic(vec![ScriptEntry::text(
            "facts/d1/0",
            "Facts:\n1. The duke is 79.\n2. The duke was hospitalized.",
        )]);
        let facts = c
            .extract_atomic_facts("d1", &Summary::initial("s", 0))
            .await
            .unwrap();
        assert_eq!(facts.len(), 2);
    }

    #[tokio::test]
    async fn extraction_gives_up() {
        let c = critic(vec![ScriptEntry::text("facts/d1/0", ""); 3]);
        let err = c
            .extract_atomic_facts("d1", &Summary::initial("s", 0))
            .await
            .unwrap_err();
        assert_eq!(err, CritiqueError::ExtractionFailed { attempts: 3 });
    }

    #[tokio::test]
    async fn verify_fact_fallback() {
        let fact = AtomicFact {
            index: 1,
            text: "Sam barks.".into(),
        };
        for (reply, want) in [
            ("Entailed", NliVerdict::Entailed),
            ("Neutral", NliVerdict::Neutral),
            ("I think it's fine", NliVerdict::Neutral),
        ] {
            let c = critic(vec![ScriptEntry::text("nli/d1/0/1", reply)]);
            assert_eq!(c.verify_fact(&doc(), 0, &fact).await.unwrap(), want);
        }
    }

    #[tokio::test]
    async fn fine_grained_through_gateway() {
        let c = critic(vec![
            ScriptEntry::text("facts/d1/2", "Facts:\n1. A.\n2. B.\n3. C.\n4. D."),
            ScriptEntry::text("nli/d1/2/1", "Entailed"),
            ScriptEntry::text("nli/d1/2/2", "Neutral"),
            ScriptEntry::text("nli/d1/2/3", "entailed"),
            ScriptEntry::text("nli/d1/2/4", "Contradicted."),
        ]);
        let r = c
            .critique_fine_grained(&doc(), &Summary::initial("s", 2))
            .await
            .unwrap();
        assert_eq!(r.score.value(), 0.5);
        let order: Vec<usize> = r.fact_verdicts.iter().map(|fv| fv.fact.index).collect();
        assert_eq!(order, [1, 2, 3, 4]);
        assert_eq!(r.feedback.text, format!("{UNSUPPORTED_HEADER}\n- B.\n- D."));
    }

    #[tokio::test]
    async fn failed_extraction_is_critique_failure() {
        let c = critic(vec![ScriptEntry::text("facts/d1/0", "no facts"); 3]);
        let err = c
            .critique_fine_grained(&doc(), &Summary::initial("s", 0))
            .await
            .unwrap_err();
        assert!(matches!(err, CritiqueError::CritiqueFailed(_)));
    }

    fn verdict() -> impl Strategy<Value = NliVerdict> {
        prop_oneof![
            Just(NliVerdict::Entailed),
            Just(NliVerdict::Neutral),
            Just(NliVerdict::Contradicted)
        ]
    }

    proptest! {
        #[test]
        fn binary_is_antisymmetric(a in -20.0f64..0.0, b in -20.0f64..0.0) {
            let s = binary_result(a, b).unwrap().score.value();
            let t = binary_result(b, a).unwrap().score.value();
            prop_assert_eq!(s, -t);
            prop_assert_eq!(s > 0.0, a > b);
        }

        #[test]
        fn fine_grained_score_is_a_permutation_invariant_fraction(
            vs in prop::collection::vec(verdict(), 1..60),
            rot in 0usize..60,
        ) {
            let r = fine_grained_result(fv(&vs)).unwrap();
            let m = vs.len();
            let k = vs.iter().filter(|v| **v != NliVerdict::Entailed).count();
            prop_assert_eq!(r.score.value(), k as f64 / m as f64);
            prop_assert_eq!(r.is_unfaithful(), r.feedback.reports_unfaithfulness());
            let mut rotated = vs.clone();
            rotated.rotate_left(rot % m);
            prop_assert_eq!(fine_grained_result(fv(&rotated)).unwrap().score, r.score);
        }
    }
}
