//! Domain values shared by every stage of the pipeline.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Feedback sentence for a summary judged unfaithful by the binary critic.
pub const UNFAITHFUL_TEXT: &str = "The summary is unfaithful.";
/// Feedback sentence for a summary with no detected hallucination.
pub const FAITHFUL_TEXT: &str = "The summary is faithful.";

/// A source document. Ids are unique within a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(rename = "document")]
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, InvalidValue> {
        let doc = Self {
            id: id.into(),
            text: text.into(),
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<(), InvalidValue> {
        if self.id.is_empty() {
            return Err(InvalidValue::new("document id must be non-empty"));
        }
        if self.text.trim().is_empty() {
            return Err(InvalidValue::new(format!(
                "document '{}' has empty text",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryOrigin {
    Initial,
    Refined,
}

/// A generated summary. `sample_index` identifies the initial draw it
/// belongs to; refined summaries inherit the index of their source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub text: String,
    pub origin: SummaryOrigin,
    pub sample_index: usize,
}

impl Summary {
    pub fn initial(text: impl Into<String>, sample_index: usize) -> Self {
        Self {
            text: text.into(),
            origin: SummaryOrigin::Initial,
            sample_index,
        }
    }

    pub fn refined_from(source: &Summary, text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            origin: SummaryOrigin::Refined,
            sample_index: source.sample_index,
        }
    }
}

/// Hallucination score. Positive values mark a summary as unfaithful.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HallucinationScore(f64);

impl HallucinationScore {
    /// Unbounded log-ratio score from the binary critic.
    pub fn log_ratio(value: f64) -> Result<Self, InvalidValue> {
        if !value.is_finite() {
            return Err(InvalidValue::new(format!(
                "hallucination score must be finite, got {value}"
            )));
        }
        Ok(Self(value))
    }

    /// Fraction score from the fine-grained critic, in `[0, 1]`.
    pub fn fraction(value: f64) -> Result<Self, InvalidValue> {
        if !(0.0..=1.0).contains(&value) {
            return Err(InvalidValue::new(format!(
                "fine-grained score must lie in [0, 1], got {value}"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_unfaithful(self) -> bool {
        self.0 > 0.0
    }
}

impl fmt::Display for HallucinationScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One atomic statement extracted from a summary. `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicFact {
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliVerdict {
    Entailed,
    Neutral,
    Contradicted,
}

impl NliVerdict {
    pub fn is_entailed(self) -> bool {
        matches!(self, NliVerdict::Entailed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NliVerdict::Entailed => "entailed",
            NliVerdict::Neutral => "neutral",
            NliVerdict::Contradicted => "contradicted",
        }
    }
}

/// Textual critique that drives refinement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueFeedback {
    pub text: String,
    #[serde(default)]
    pub unsupported_facts: Vec<AtomicFact>,
}

impl CritiqueFeedback {
    pub fn faithful() -> Self {
        Self {
            text: FAITHFUL_TEXT.to_string(),
            unsupported_facts: Vec::new(),
        }
    }

    pub fn unfaithful() -> Self {
        Self {
            text: UNFAITHFUL_TEXT.to_string(),
            unsupported_facts: Vec::new(),
        }
    }

    pub fn reports_unfaithfulness(&self) -> bool {
        self.text != FAITHFUL_TEXT
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Sample,
    Greedy,
}

/// Decoding parameters for one LLM call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub n: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub decode_mode: DecodeMode,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            max_tokens: 160,
            n: 1,
            seed: None,
            decode_mode: DecodeMode::Sample,
        }
    }
}

impl GenerationParams {
    pub fn greedy(max_tokens: u32) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens,
            n: 1,
            seed: None,
            decode_mode: DecodeMode::Greedy,
        }
    }

    pub fn validate(&self) -> Result<(), InvalidValue> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(InvalidValue::new("temperature must be a finite value >= 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(InvalidValue::new("top_p must lie in (0, 1]"));
        }
        if self.max_tokens == 0 {
            return Err(InvalidValue::new("max_tokens must be > 0"));
        }
        if self.n == 0 {
            return Err(InvalidValue::new("n must be >= 1"));
        }
        Ok(())
    }

    /// Temperature actually sent to the backend.
    pub fn effective_temperature(&self) -> f64 {
        match self.decode_mode {
            DecodeMode::Greedy => 0.0,
            DecodeMode::Sample => self.temperature,
        }
    }

    /// Number of choices actually requested.
    pub fn effective_n(&self) -> u32 {
        match self.decode_mode {
            DecodeMode::Greedy => 1,
            DecodeMode::Sample => self.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid value: {0}")]
pub struct InvalidValue(pub String);

impl InvalidValue {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn document_rejects_blank_text() {
        assert!(Document::new("a", "  \n").is_err());
        assert!(Document::new("", "text").is_err());
        assert!(Document::new("a", "text").is_ok());
    }

    #[test]
    fn refined_keeps_sample_index() {
        let s = Summary::initial("x", 3);
        let r = Summary::refined_from(&s, "y");
        assert_eq!(r.sample_index, 3);
        assert_eq!(r.origin, SummaryOrigin::Refined);
    }

    #[test]
    fn score_constructors_enforce_ranges() {
        assert!(HallucinationScore::fraction(1.5).is_err());
        assert!(HallucinationScore::fraction(-0.1).is_err());
        assert!(HallucinationScore::log_ratio(f64::NAN).is_err());
        assert!(HallucinationScore::log_ratio(f64::INFINITY).is_err());
        assert!(HallucinationScore::log_ratio(-30.0).is_ok());
    }

    #[test]
    fn greedy_forces_single_choice_and_zero_temperature() {
        let p = GenerationParams {
            n: 4,
            decode_mode: DecodeMode::Greedy,
            ..GenerationParams::default()
        };
        assert_eq!(p.effective_n(), 1);
        assert_eq!(p.effective_temperature(), 0.0);
    }
}
