use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use std::sync::Mutex;

use super::{ChatBackend, ChatRequest, Completion, CompletionChoice, GatewayError};

/// One scripted reply. Entries sharing a tag are consumed in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub tag: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<BTreeMap<String, f64>>,
}

impl ScriptEntry {
    pub fn text(tag: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            text: text.into(),
            top_logprobs: None,
        }
    }

    pub fn with_logprobs(
        tag: impl Into<String>,
        text: impl Into<String>,
        logprobs: &[(&str, f64)],
    ) -> Self {
        Self {
            tag: tag.into(),
            text: text.into(),
            top_logprobs: Some(logprobs.iter().map(|(k, v)| (k.to_string(), *v)).collect()),
        }
    }
}

/// Deterministic backend replaying a tag-addressed playbook.
///
/// Each tag owns its own queue, so concurrent callers see the same replies
/// no matter how their requests interleave.
#[derive(Debug)]
pub struct ScriptedBackend {
    queues: Mutex<HashMap<String, VecDeque<ScriptEntry>>>,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut queues: HashMap<String, VecDeque<ScriptEntry>> = HashMap::new();
        for e in entries {
            queues.entry(e.tag.clone()).or_default().push_back(e);
        }
        Self {
            queues: Mutex::new(queues),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, GatewayError> {
        let entries: Vec<ScriptEntry> = serde_json::from_str(json)
            .map_err(|e| GatewayError::Config(format!("invalid mock script: {e}")))?;
        Ok(Self::new(entries))
    }

    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let json = std::fs::read_to_string(path).map_err(|e| {
            GatewayError::Config(format!("cannot read mock script {}: {e}", path.display()))
        })?;
        Self::from_json(&json)
    }

    /// Entries not yet consumed, across all tags.
    pub fn remaining(&self) -> usize {
        self.queues
            .lock()
            .unwrap()
            .values()
            .map(VecDeque::len)
            .sum()
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted-mock"
    }

    fn supports_multiple_choices(&self) -> bool {
        true
    }

    async fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let n = request.params.effective_n() as usize;
        let entries: Vec<ScriptEntry> = {
            let mut queues = self.queues.lock().unwrap();
            let queue = queues
                .get_mut(&request.tag)
                .filter(|q| q.len() >= n)
                .ok_or_else(|| GatewayError::ScriptExhausted(request.tag.clone()))?;
            queue.drain(..n).collect()
        };
        let choices = entries
            .into_iter()
            .map(|e| CompletionChoice {
                text: e.text,
                first_token_top_logprobs: if request.want_logprobs {
                    e.top_logprobs.map(|mut m| {
                        if m.len() > request.top_logprobs_k as usize {
                            let mut by_prob: Vec<(String, f64)> = m.into_iter().collect();
                            by_prob.sort_by(|a, b| b.1.total_cmp(&a.1));
                            by_prob.truncate(request.top_logprobs_k as usize);
                            m = by_prob.into_iter().collect();
                        }
                        m
                    })
                } else {
                    None
                },
            })
            .collect();
        Ok(Completion {
            choices,
            backend_id: self.id().to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::GenerationParams;

    fn req(tag: &str) -> ChatRequest {
        ChatRequest::new(tag, "prompt", GenerationParams::greedy(16))
    }

    #[tokio::test]
    async fn echoes_by_tag_in_order() {
        let mock = ScriptedBackend::new([
            ScriptEntry::text("summ/doc1/0", "A short summary."),
            ScriptEntry::text("x", "first"),
            ScriptEntry::text("x", "second"),
        ]);
        assert_eq!(
            mock.complete(&req("summ/doc1/0")).await.unwrap().choices[0].text,
            "A short summary."
        );
        assert_eq!(
            mock.complete(&req("x")).await.unwrap().choices[0].text,
            "first"
        );
        assert_eq!(
            mock.complete(&req("x")).await.unwrap().choices[0].text,
            "second"
        );
        assert_eq!(
            mock.complete(&req("x")).await,
            Err(GatewayError::ScriptExhausted("x".into()))
        );
        assert_eq!(mock.remaining(), 0);
    }

    #[tokio::test]
    async fn logprobs_only_when_requested() {
        let mock = ScriptedBackend::new([
            ScriptEntry::with_logprobs("c", "Yes", &[("Yes", -0.3567), ("No", -1.2040)]),
            ScriptEntry::with_logprobs("c", "Yes", &[("Yes", -0.3567)]),
        ]);
        let with = mock.complete(&req("c").with_logprobs(20)).await.unwrap();
        let m = with.choices[0].first_token_top_logprobs.as_ref().unwrap();
        assert_eq!(m["Yes"], -0.3567);
        assert_eq!(m["No"], -1.2040);
        let without = mock.complete(&req("c")).await.unwrap();
        assert!(without.choices[0].first_token_top_logprobs.is_none());
    }

    #[tokio::test]
    async fn top_k_truncates_to_most_likely() {
        let mock = ScriptedBackend::new([ScriptEntry::with_logprobs(
            "c",
            "Yes",
            &[("Yes", -0.1), ("No", -3.0), ("Maybe", -2.0)],
        )]);
        let out = mock.complete(&req("c").with_logprobs(2)).await.unwrap();
        let keys: Vec<_> = out.choices[0]
            .first_token_top_logprobs
            .as_ref()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        assert_eq!(keys, ["Maybe", "Yes"]);
    }

    #[test]
    fn rejects_unknown_fields() {
        assert!(ScriptedBackend::from_json(r#"[{"tag":"a","text":"b","extra":1}]"#).is_err());
        assert!(ScriptedBackend::from_json(
            r#"[{"tag":"a","text":"b","top_logprobs":{"Yes":-0.1}}]"#
        )
        .is_ok());
    }
}
