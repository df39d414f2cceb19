use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionPolicy {
    /// Last balanced `\boxed{...}`, else the last standalone number.
    #[default]
    BoxedThenNumber,
    BoxedOnly,
    LastNumber,
}

/// Final answer of a completion, normalized; `None` when there is none.
pub fn extract_answer(text: &str, policy: ExtractionPolicy) -> Option<String> {
    let boxed = || last_boxed(text).map(|s| normalize_answer(&s)).filter(|s| !s.is_empty());
    match policy {
        ExtractionPolicy::BoxedThenNumber => boxed().or_else(|| last_number(text)),
        ExtractionPolicy::BoxedOnly => boxed(),
        ExtractionPolicy::LastNumber => last_number(text),
    }
}

/// Trim, collapse internal whitespace, drop a trailing period.
pub fn normalize_answer(raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    match collapsed.strip_suffix('.') {
        Some(s) => s.trim_end().to_string(),
        None => collapsed,
    }
}

fn last_boxed(text: &str) -> Option<String> {
    const OPEN: &str = "\\boxed{";
    let mut found = None;
    let mut search_from = 0;
    while let Some(pos) = text[search_from..].find(OPEN) {
        let start = search_from + pos + OPEN.len();
        let mut depth = 1usize;
        for (i, ch) in text[start..].char_indices() {
            match ch {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        found = Some(text[start..start + i].to_string());
                        break;
                    }
                }
                _ => {}
            }
        }
        search_from = start;
    }
    found
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?(?:/\d+)?").expect("valid regex"))
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn last_number(text: &str) -> Option<String> {
    number_regex()
        .find_iter(text)
        .filter(|m| {
            let before = text[..m.start()].chars().next_back();
            let after = text[m.end()..].chars().next();
            !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
        })
        .last()
        .map(|m| m.as_str().to_string())
}
