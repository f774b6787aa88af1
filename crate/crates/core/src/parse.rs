//! Parsers for the structured replies the critique prompts ask for.

use crate::types::{AtomicFact, NliVerdict};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no numbered facts found in response")]
    EmptyFactList,
    #[error("unrecognized label in response: {0:?}")]
    UnrecognizedLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryVerdict {
    Yes,
    No,
}

/// Parses a numbered fact list. Accepts `1.`, `1)` and `1 -` prefixes and an
/// optional `Facts:` header; when the header is present only the lines after
/// it are considered. Facts are re-indexed `1..=M` in order of appearance.
pub fn parse_fact_list(response: &str) -> Result<Vec<AtomicFact>, ParseError> {
    let lines: Vec<&str> = response.lines().collect();
    let start = lines
        .iter()
        .position(|l| l.trim().eq_ignore_ascii_case("facts:"))
        .map_or(0, |i| i + 1);

    let facts: Vec<AtomicFact> = lines[start..]
        .iter()
        .filter_map(|l| numbered_item(l))
        .enumerate()
        .map(|(i, text)| AtomicFact {
            index: i + 1,
            text: text.to_string(),
        })
        .collect();

    if facts.is_empty() {
        Err(ParseError::EmptyFactList)
    } else {
        Ok(facts)
    }
}

fn numbered_item(line: &str) -> Option<&str> {
    let line = line.trim();
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    let rest = if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
        r
    } else {
        rest.trim_start().strip_prefix('-')?
    };
    // "1.5 million" style lines are numbers, not list items.
    if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
        return None;
    }
    let text = rest.trim();
    (!text.is_empty()).then_some(text)
}

const NLI_LABELS: [(&str, NliVerdict); 3] = [
    ("entailed", NliVerdict::Entailed),
    ("neutral", NliVerdict::Neutral),
    ("contradicted", NliVerdict::Contradicted),
];

/// Returns the label word that occurs first in the response, ignoring case.
pub fn parse_nli_label(response: &str) -> Result<NliVerdict, ParseError> {
    let lower = response.to_lowercase();
    NLI_LABELS
        .iter()
        .filter_map(|(word, verdict)| lower.find(word).map(|pos| (pos, *verdict)))
        .min_by_key(|(pos, _)| *pos)
        .map(|(_, v)| v)
        .ok_or_else(|| ParseError::UnrecognizedLabel(response.to_string()))
}

/// Matches a leading `yes`/`no` token, ignoring case and trailing punctuation.
pub fn parse_binary_verdict(response: &str) -> Result<BinaryVerdict, ParseError> {
    let token: String = response
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match token.as_str() {
        "yes" => Ok(BinaryVerdict::Yes),
        "no" => Ok(BinaryVerdict::No),
        _ => Err(ParseError::UnrecognizedLabel(response.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(facts: &[AtomicFact]) -> Vec<&str> {
        facts.iter().map(|f| f.text.as_str()).collect()
    }

    #[test]
    fn parses_facts_after_header() {
        let facts = parse_fact_list("Facts:\n1. Sam is a dog.\n2. Sam barks.").unwrap();
        assert_eq!(texts(&facts), ["Sam is a dog.", "Sam barks."]);
        assert_eq!(facts[1].index, 2);
    }

    #[test]
    fn tolerant_numbering() {
        assert_eq!(
            texts(&parse_fact_list("1) Sam barks.").unwrap()),
            ["Sam barks."]
        );
        assert_eq!(
            texts(&parse_fact_list("3 - A.\n\nnoise\n7. B.").unwrap()),
            ["A.", "B."]
        );
        let facts = parse_fact_list("5. A.\n9. B.").unwrap();
        assert_eq!(facts.iter().map(|f| f.index).collect::<Vec<_>>(), [1, 2]);
    }

    #[test]
    fn lines_before_header_are_ignored() {
        let facts = parse_fact_list("1. preamble\nFacts:\n1. Real.").unwrap();
        assert_eq!(texts(&facts), ["Real."]);
    }

    #[test]
    fn no_numbered_lines_is_empty() {
        assert_eq!(
            parse_fact_list("I cannot extract facts."),
            Err(ParseError::EmptyFactList)
        );
        assert_eq!(parse_fact_list(""), Err(ParseError::EmptyFactList));
        assert_eq!(
            parse_fact_list("Facts:\n1.\n2.\n..."),
            Err(ParseError::EmptyFactList)
        );
        assert_eq!(
            parse_fact_list("1.5 million"),
            Err(ParseError::EmptyFactList)
        );
    }

    #[test]
    fn nli_labels() {
        assert_eq!(parse_nli_label("Entailed"), Ok(NliVerdict::Entailed));
        assert_eq!(
            parse_nli_label("The statement is contradicted by the context."),
            Ok(NliVerdict::Contradicted)
        );
        assert_eq!(parse_nli_label("NEUTRAL."), Ok(NliVerdict::Neutral));
        assert!(matches!(
            parse_nli_label("maybe"),
            Err(ParseError::UnrecognizedLabel(_))
        ));
    }

    #[test]
    fn nli_first_label_wins() {
        assert_eq!(
            parse_nli_label("Neutral, not contradicted"),
            Ok(NliVerdict::Neutral)
        );
        assert_eq!(
            parse_nli_label("Contradicted (not entailed)"),
            Ok(NliVerdict::Contradicted)
        );
    }

    #[test]
    fn binary_verdicts() {
        assert_eq!(parse_binary_verdict("Yes"), Ok(BinaryVerdict::Yes));
        assert_eq!(parse_binary_verdict("no."), Ok(BinaryVerdict::No));
        assert_eq!(
            parse_binary_verdict("  YES, it does"),
            Ok(BinaryVerdict::Yes)
        );
        assert!(parse_binary_verdict("unclear").is_err());
        assert!(parse_binary_verdict("nothing").is_err());
    }

    proptest! {
        #[test]
        fn formatted_list_round_trips(items in prop::collection::vec("[A-Za-z][A-Za-z0-9 ,.']{0,40}", 1..20)) {
            let items: Vec<String> = items.iter().map(|s| s.trim().to_string()).collect();
            let mut body = String::from("Facts:\n");
            for (i, it) in items.iter().enumerate() {
                body.push_str(&format!("{}. {}\n", i + 1, it));
            }
            let parsed = parse_fact_list(&body).unwrap();
            prop_assert_eq!(texts(&parsed), items.iter().map(String::as_str).collect::<Vec<_>>());
            prop_assert!(parsed.iter().enumerate().all(|(i, f)| f.index == i + 1));
        }

        #[test]
        fn two_labels_pick_earliest(prefix in "[xyz ]{0,10}", mid in "[xyz ]{0,10}") {
            let a = format!("{prefix}neutral{mid}entailed");
            prop_assert_eq!(parse_nli_label(&a), Ok(NliVerdict::Neutral));
            let b = format!("{prefix}Contradicted{mid}NEUTRAL");
            prop_assert_eq!(parse_nli_label(&b), Ok(NliVerdict::Contradicted));
        }
    }
}
