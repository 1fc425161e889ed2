//! Final-answer extraction and equivalence checking.

use std::sync::OnceLock;

use regex::Regex;

/// Decides whether an extracted answer matches the gold answer.
pub trait AnswerChecker: Send + Sync {
    fn equivalent(&self, extracted: &str, gold: &str) -> bool;
}

/// Exact match after [`normalize`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatch;

impl AnswerChecker for ExactMatch {
    fn equivalent(&self, extracted: &str, gold: &str) -> bool {
        normalize(extracted) == normalize(gold)
    }
}

/// Takes the last `\boxed{...}` (braces balanced) in `text`, falling back to
/// the last number in the text.
pub fn extract_answer(text: &str) -> Option<String> {
    if let Some(boxed) = last_boxed(text) {
        let n = normalize(boxed);
        if !n.is_empty() {
            return Some(n);
        }
    }
    number_pattern()
        .find_iter(text)
        .last()
        .map(|m| normalize(m.as_str()))
}

fn number_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?(?:/\d+)?").expect("valid regex"))
}

fn last_boxed(text: &str) -> Option<&str> {
    const MARK: &str = "\\boxed{";
    let start = text.rfind(MARK)? + MARK.len();
    let mut depth = 1usize;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Removes whitespace and leading zeros of the integer part.
pub fn normalize(answer: &str) -> String {
    let compact: String = answer.chars().filter(|c| !c.is_whitespace()).collect();
    let (sign, body) = match compact.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", compact.as_str()),
    };
    let digits_end = body
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(body.len());
    if digits_end == 0 {
        return compact;
    }
    let trimmed = body[..digits_end].trim_start_matches('0');
    let int_part = if trimmed.is_empty() { "0" } else { trimmed };
    format!("{sign}{int_part}{}", &body[digits_end..])
}
