//! Summarization and critique-guided refinement calls.

use std::sync::Arc;

use futures::future::try_join_all;

use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::prompt::{PromptSet, TemplateError};
use crate::types::{CritiqueFeedback, Document, GenerationParams, Summary};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenerationError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("empty completion for '{0}'")]
    EmptyOutput(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl GenerationError {
    pub fn is_transport(&self) -> bool {
        matches!(self, GenerationError::Gateway(e) if e.is_transport())
    }
}

#[derive(Debug, Clone)]
pub struct RefinementInput<'a> {
    pub document: &'a Document,
    pub summary: &'a Summary,
    pub comment: &'a CritiqueFeedback,
}

/// Per-sample seed so that independent requests do not collapse onto one
/// sample on servers that honour `seed`.
fn sample_seed(base: Option<u64>, sample_index: usize) -> Option<u64> {
    base.map(|s| s.wrapping_add(sample_index as u64))
}

#[derive(Debug, Clone)]
pub struct Generator {
    gateway: Arc<Gateway>,
    prompts: Arc<PromptSet>,
}

impl Generator {
    pub fn new(gateway: Arc<Gateway>, prompts: Arc<PromptSet>) -> Self {
        Self { gateway, prompts }
    }

    /// Draws `n` initial summaries, one request per sample, tagged
    /// `summ/{doc}/{i}`.
    pub async fn generate_summaries(
        &self,
        document: &Document,
        n: usize,
        params: &GenerationParams,
    ) -> Result<Vec<Summary>, GenerationError> {
        if n == 0 {
            return Err(GenerationError::Precondition("n must be >= 1".into()));
        }
        let prompt = self.prompts.summ(&document.text)?;
        try_join_all((0..n).map(|i| {
            let prompt = prompt.clone();
            async move { self.generate_one(document, &prompt, i, params).await }
        }))
        .await
    }

    /// One initial summary for `sample_index`.
    pub async fn generate_summary(
        &self,
        document: &Document,
        sample_index: usize,
        params: &GenerationParams,
    ) -> Result<Summary, GenerationError> {
        let prompt = self.prompts.summ(&document.text)?;
        self.generate_one(document, &prompt, sample_index, params)
            .await
    }

    async fn generate_one(
        &self,
        document: &Document,
        prompt: &str,
        sample_index: usize,
        params: &GenerationParams,
    ) -> Result<Summary, GenerationError> {
        let params = GenerationParams {
            n: 1,
            seed: sample_seed(params.seed, sample_index),
            ..params.clone()
        };
        let request = ChatRequest::new(
            format!("summ/{}/{}", document.id, sample_index),
            prompt,
            params,
        );
        let text = self.complete_text(&request).await?;
        Ok(Summary::initial(text, sample_index))
    }

    /// Revises an unfaithful summary using its critique.
    pub async fn refine_summary(
        &self,
        input: RefinementInput<'_>,
        params: &GenerationParams,
    ) -> Result<Summary, GenerationError> {
        if !input.comment.reports_unfaithfulness() {
            return Err(GenerationError::Precondition(
                "refinement requires feedback reporting unfaithfulness".into(),
            ));
        }
        let prompt = self.prompts.refine(
            &input.document.text,
            &input.summary.text,
            &input.comment.text,
        )?;
        let params = GenerationParams {
            n: 1,
            seed: sample_seed(params.seed, input.summary.sample_index),
            ..params.clone()
        };
        let request = ChatRequest::new(
            format!(
                "refine/{}/{}",
                input.document.id, input.summary.sample_index
            ),
            prompt,
            params,
        );
        let text = self.complete_text(&request).await?;
        Ok(Summary::refined_from(input.summary, text))
    }

    async fn complete_text(&self, request: &ChatRequest) -> Result<String, GenerationError> {
        let completion = self.gateway.complete(request).await?;
        let text = completion.choices[0].text.trim();
        if text.is_empty() {
            return Err(GenerationError::EmptyOutput(request.tag.clone()));
        }
        Ok(text.to_string())
    }
}

/// Counts sentences as runs of `.`, `!` or `?` followed by whitespace or the
/// end of text; used by the optional single-sentence filter.
pub fn sentence_count(text: &str) -> usize {
    let text = text.trim();
    if text.is_empty() {
        return 0;
    }
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0;
    let mut i = 0;
    while i < chars.len() {
        if matches!(chars[i], '.' | '!' | '?') {
            let mut j = i;
            while j < chars.len() && matches!(chars[j], '.' | '!' | '?') {
                j += 1;
            }
            if j == chars.len() || chars[j].is_whitespace() {
                count += 1;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    if !text.ends_with(['.', '!', '?']) {
        count += 1;
    }
    count
}
