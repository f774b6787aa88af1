//! Prompt templates and `{Name}` placeholder rendering.
//!
//! Placeholders are written `{Name}`; literal braces are escaped as `{{`
//! and `}}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const SUMM_TEMPLATE: &str = "Document:\n{Document}\n\nPlease write a brief summary for the given document. The summary should be one sentence.";

pub const CRITIQUE_BIN_TEMPLATE: &str = "Below is a document and a corresponding summary. Please determine whether the summary contains hallucinated information that is not supported by the document.\nDocument:\n{Document}\nSummary:\n{Summary}\n\nState the final answer exactly as either 'Yes' (if hallucinated information is found) or 'No' (if not). Do not provide any additional information.";

pub const ATOMIC_FACT_TEMPLATE: &str = "Given the following sentence, list all simple facts it contains. Each fact should be a minimal statement that expresses a single piece of information. Each fact must be written so it makes sense by itself, without relying on the context.\nSentence: {Sentence}\nAnswer in the following format:\n\nFacts:\n1.\n2.\n...";

pub const NLI_TEMPLATE: &str = "Given the context, determine if the statement is entailed or contradicted or neutral.\nContext: {Context}\nStatement: {Statement}\nAnswer with \"Entailed\", \"Contradicted\" or \"Neutral\"";

pub const REFINE_TEMPLATE: &str = "You will be given a document, a summary, and comment on the summary. Your task is to revise the summary given the comment. Please make sure you address all the suggestions by only making the least amount of changes.\nDocument:\n{Document}\nSummary:\n{Summary}\nComment:\n{Comment}\nPlease check the document for the correct information and make appropriate edits.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateName {
    #[serde(rename = "summ")]
    Summ,
    #[serde(rename = "critique_bin")]
    CritiqueBin,
    #[serde(rename = "atomic_fact")]
    AtomicFact,
    #[serde(rename = "nli")]
    Nli,
    #[serde(rename = "refine")]
    Refine,
}

impl TemplateName {
    pub const ALL: [TemplateName; 5] = [
        TemplateName::Summ,
        TemplateName::CritiqueBin,
        TemplateName::AtomicFact,
        TemplateName::Nli,
        TemplateName::Refine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::Summ => "summ",
            TemplateName::CritiqueBin => "critique_bin",
            TemplateName::AtomicFact => "atomic_fact",
            TemplateName::Nli => "nli",
            TemplateName::Refine => "refine",
        }
    }

    pub fn default_body(self) -> &'static str {
        match self {
            TemplateName::Summ => SUMM_TEMPLATE,
            TemplateName::CritiqueBin => CRITIQUE_BIN_TEMPLATE,
            TemplateName::AtomicFact => ATOMIC_FACT_TEMPLATE,
            TemplateName::Nli => NLI_TEMPLATE,
            TemplateName::Refine => REFINE_TEMPLATE,
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| TemplateError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("missing binding for placeholder {{{0}}}")]
    MissingBinding(String),
    #[error("malformed template at byte {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
    #[error("unknown template name '{0}'")]
    UnknownTemplate(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// A parsed prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: TemplateName,
    body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(name: TemplateName, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        let segments = parse_segments(&body)?;
        Ok(Self {
            name,
            body,
            segments,
        })
    }

    pub fn default_for(name: TemplateName) -> Self {
        Self::new(name, name.default_body()).expect("built-in templates are well formed")
    }

    pub fn name(&self) -> TemplateName {
        self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Distinct placeholder names in the body.
    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Placeholder(p) => Some(p.as_str()),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    pub fn render<K, V>(&self, bindings: &BTreeMap<K, V>) -> Result<String, TemplateError>
    where
        K: std::borrow::Borrow<str> + Ord,
        V: AsRef<str>,
    {
        self.render_with(|name| bindings.get(name).map(|v| v.as_ref()))
    }

    /// Renders with a lookup closure, avoiding a map allocation at call sites.
    pub fn render_with<'a, F>(&self, lookup: F) -> Result<String, TemplateError>
    where
        F: Fn(&str) -> Option<&'a str>,
    {
        let mut out = String::with_capacity(self.body.len());
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Placeholder(name) => {
                    let value =
                        lookup(name).ok_or_else(|| TemplateError::MissingBinding(name.clone()))?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`PromptTemplate::render`].
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &BTreeMap<&str, &str>,
) -> Result<String, TemplateError> {
    template.render(bindings)
}

fn parse_segments(body: &str) -> Result<Vec<Segment>, TemplateError> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut chars = body.char_indices().peekable();
    while let Some((offset, c)) = chars.next() {
        match c {
            '{' if matches!(chars.peek(), Some((_, '{'))) => {
                chars.next();
                literal.push('{');
            }
            '{' => {
                let mut name = String::new();
                let mut closed = false;
                for (_, nc) in chars.by_ref() {
                    if nc == '}' {
                        closed = true;
                        break;
                    }
                    name.push(nc);
                }
                if !closed {
                    return Err(TemplateError::Malformed {
                        offset,
                        detail: "unclosed '{'".into(),
                    });
                }
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(TemplateError::Malformed {
                        offset,
                        detail: format!("invalid placeholder name '{name}'"),
                    });
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Placeholder(name));
            }
            '}' if matches!(chars.peek(), Some((_, '}'))) => {
                chars.next();
                literal.push('}');
            }
            '}' => {
                return Err(TemplateError::Malformed {
                    offset,
                    detail: "unmatched '}' (escape as '}}')".into(),
                })
            }
            _ => literal.push(c),
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

/// The five templates used by the pipeline, defaults embedded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            templates: TemplateName::ALL
                .into_iter()
                .map(|n| (n, PromptTemplate::default_for(n)))
                .collect(),
        }
    }
}

impl PromptSet {
    /// Defaults with the given bodies swapped in. Keys are template names
    /// such as `summ` or `nli`.
    pub fn with_overrides<'a, I>(overrides: I) -> Result<Self, TemplateError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut set = Self::default();
        for (key, body) in overrides {
            let name: TemplateName = key.parse()?;
            set.templates.insert(name, PromptTemplate::new(name, body)?);
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn summ(&self, document: &str) -> Result<String, TemplateError> {
        self.get(TemplateName::Summ).render_with(|k| match k {
            "Document" => Some(document),
            _ => None,
        })
    }

    pub fn critique_bin(&self, document: &str, summary: &str) -> Result<String, TemplateError> {
        self.get(TemplateName::CritiqueBin)
            .render_with(|k| match k {
                "Document" => Some(document),
                "Summary" => Some(summary),
                _ => None,
            })
    }

    pub fn atomic_fact(&self, sentence: &str) -> Result<String, TemplateError> {
        self.get(TemplateName::AtomicFact).render_with(|k| match k {
            "Sentence" => Some(sentence),
            _ => None,
        })
    }

    pub fn nli(&self, context: &str, statement: &str) -> Result<String, TemplateError> {
        self.get(TemplateName::Nli).render_with(|k| match k {
            "Context" => Some(context),
            "Statement" => Some(statement),
            _ => None,
        })
    }

    pub fn refine(
        &self,
        document: &str,
        summary: &str,
        comment: &str,
    ) -> Result<String, TemplateError> {
        self.get(TemplateName::Refine).render_with(|k| match k {
            "Document" => Some(document),
            "Summary" => Some(summary),
            "Comment" => Some(comment),
            _ => None,
        })
    }
}
