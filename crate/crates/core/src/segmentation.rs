//! Reasoning-trace segmentation.
//!
//! A response is split into its reasoning region (the `<think>` block) and
//! its answer region, and the reasoning region is cut into ordered steps.
//! Four strategies are supported:
//!
//! * `paragraph` - blank-line separated paragraphs (the default unit counted
//!   by the step reward),
//! * `sentence` - sentence terminators followed by whitespace, plus
//!   paragraph breaks,
//! * `conjunction` - a new step starts at every discourse marker such as
//!   "wait" or "however", plus paragraph breaks,
//! * `similarity_merge` - paragraphs whose adjacent embeddings are similar
//!   enough are fused into one step.
//!
//! Token counts are produced by a pluggable [`TokenCounter`]; the default
//! counts whitespace-delimited words.

use std::fmt;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer;
use crate::embedding::{cosine_similarity, EmbedError, Embedder};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

/// Discourse markers used by the conjunction strategy.
pub const DEFAULT_CONJUNCTIONS: [&str; 10] = [
    "wait",
    "alternatively",
    "but",
    "however",
    "alternative",
    "check",
    "double-check",
    "hmm",
    "okay",
    "maybe",
];

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
}

impl From<EmbedError> for SegmentError {
    fn from(e: EmbedError) -> Self {
        SegmentError::EmbedderUnavailable(e.to_string())
    }
}

/// Counts tokens in a piece of text.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-delimited word count.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Shared handle to a token counter, so configs stay cheap to clone.
#[derive(Clone)]
pub struct Tokenizer(Arc<dyn TokenCounter>);

impl Tokenizer {
    pub fn new(counter: impl TokenCounter + 'static) -> Self {
        Tokenizer(Arc::new(counter))
    }

    pub fn count(&self, text: &str) -> usize {
        self.0.count(text)
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::new(WhitespaceCounter)
    }
}

impl fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Tokenizer(..)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Paragraph,
    Sentence,
    Conjunction,
    SimilarityMerge,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "paragraph" => Ok(Strategy::Paragraph),
            "sentence" => Ok(Strategy::Sentence),
            "conjunction" => Ok(Strategy::Conjunction),
            "similarity_merge" => Ok(Strategy::SimilarityMerge),
            other => Err(format!("unknown segmentation strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub strategy: Strategy,
    /// Lowercase marker words for the conjunction strategy.
    pub conjunctions: Vec<String>,
    /// Adjacent paragraphs with cosine similarity at or above this are merged.
    pub similarity_threshold: f64,
    #[serde(skip)]
    pub tokenizer: Tokenizer,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Paragraph,
            conjunctions: DEFAULT_CONJUNCTIONS.iter().map(|s| s.to_string()).collect(),
            similarity_threshold: 0.5,
            tokenizer: Tokenizer::default(),
        }
    }
}

impl SegmentationConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SegmentError> {
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(SegmentError::InvalidConfig(format!(
                "similarity_threshold must lie in [0, 1], got {}",
                self.similarity_threshold
            )));
        }
        if self.strategy == Strategy::Conjunction && self.conjunctions.is_empty() {
            return Err(SegmentError::InvalidConfig(
                "conjunction strategy needs at least one conjunction".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub text: String,
    pub token_count: usize,
}

/// One candidate answer with its reasoning split into steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub prompt_id: String,
    pub raw_text: String,
    pub think_text: String,
    pub answer_text: String,
    pub extracted_answer: Option<String>,
    pub steps: Vec<Step>,
    /// Token count of the whole response.
    pub token_count: usize,
}

impl Response {
    /// Splits regions, extracts the final answer and segments the reasoning.
    pub fn from_raw(
        prompt_id: impl Into<String>,
        raw_text: impl Into<String>,
        cfg: &SegmentationConfig,
        embedder: Option<&dyn Embedder>,
    ) -> Result<Self, SegmentError> {
        let raw_text = raw_text.into();
        let (think, answer_region) = split_regions(&raw_text);
        let steps = segment(think, cfg, embedder)?;
        Ok(Response {
            prompt_id: prompt_id.into(),
            think_text: think.to_string(),
            answer_text: answer_region.to_string(),
            extracted_answer: answer::extract_answer(answer_region),
            token_count: cfg.tokenizer.count(&raw_text),
            steps,
            raw_text,
        })
    }

    /// Builds a response from already-segmented steps (e.g. read back from a
    /// segment output file) without re-running segmentation.
    pub fn from_parts(
        prompt_id: impl Into<String>,
        raw_text: impl Into<String>,
        steps: Vec<Step>,
        token_count: usize,
    ) -> Self {
        let raw_text = raw_text.into();
        let (think, answer_region) = split_regions(&raw_text);
        Response {
            prompt_id: prompt_id.into(),
            think_text: think.to_string(),
            answer_text: answer_region.to_string(),
            extracted_answer: answer::extract_answer(answer_region),
            steps,
            token_count,
            raw_text,
        }
    }

    pub fn max_step_tokens(&self) -> usize {
        self.steps.iter().map(|s| s.token_count).max().unwrap_or(0)
    }
}

/// Splits `raw_text` into `(think_text, answer_text)`.
///
/// Without a well-formed `<think>...</think>` pair both regions are the whole
/// input.
pub fn split_regions(raw_text: &str) -> (&str, &str) {
    if let Some(open) = raw_text.find(THINK_OPEN) {
        let inner_start = open + THINK_OPEN.len();
        if let Some(close) = raw_text[inner_start..].find(THINK_CLOSE) {
            let inner_end = inner_start + close;
            return (
                &raw_text[inner_start..inner_end],
                &raw_text[inner_end + THINK_CLOSE.len()..],
            );
        }
    }
    (raw_text, raw_text)
}

/// S(y): the number of reasoning steps.
pub fn count_steps(response: &Response) -> usize {
    response.steps.len()
}

pub fn segment(
    think_text: &str,
    cfg: &SegmentationConfig,
    embedder: Option<&dyn Embedder>,
) -> Result<Vec<Step>, SegmentError> {
    cfg.validate()?;
    let pieces: Vec<String> = match cfg.strategy {
        Strategy::Paragraph => paragraphs(think_text).map(str::to_string).collect(),
        Strategy::Sentence => paragraphs(think_text)
            .flat_map(sentences)
            .map(str::to_string)
            .collect(),
        Strategy::Conjunction => paragraphs(think_text)
            .flat_map(|p| split_at_conjunctions(p, &cfg.conjunctions))
            .map(str::to_string)
            .collect(),
        Strategy::SimilarityMerge => {
            let paras: Vec<&str> = paragraphs(think_text).collect();
            let embedder = embedder.ok_or_else(|| {
                SegmentError::EmbedderUnavailable(
                    "similarity_merge requires an embedding client".into(),
                )
            })?;
            merge_similar(&paras, embedder, cfg.similarity_threshold)?
        }
    };
    Ok(pieces
        .into_iter()
        .enumerate()
        .map(|(index, text)| Step {
            index,
            token_count: cfg.tokenizer.count(&text).max(1),
            text,
        })
        .collect())
}

fn paragraph_break() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Two or more newlines, tolerating blank lines that carry only spaces.
    RE.get_or_init(|| Regex::new(r"\n(?:[ \t\r]*\n)+").expect("valid regex"))
}

fn paragraphs(text: &str) -> impl Iterator<Item = &str> {
    paragraph_break()
        .split(text)
        .map(str::trim)
        .filter(|p| !p.is_empty())
}

fn sentences(paragraph: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = paragraph.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        // Runs such as "?!" or "..." end together.
        let mut end = i + c.len_utf8();
        while let Some(&(j, d)) = chars.peek() {
            if matches!(d, '.' | '!' | '?') {
                end = j + d.len_utf8();
                chars.next();
            } else {
                break;
            }
        }
        if let Some(&(_, next)) = chars.peek() {
            if next.is_whitespace() {
                out.push(&paragraph[start..end]);
                start = end;
            }
        }
    }
    out.push(&paragraph[start..]);
    out.into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

fn word_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Hyphenated words stay whole so "double-check" never matches "check".
    RE.get_or_init(|| Regex::new(r"[\w'-]+").expect("valid regex"))
}

fn split_at_conjunctions<'a>(paragraph: &'a str, conjunctions: &[String]) -> Vec<&'a str> {
    let mut cuts = vec![0];
    for m in word_pattern().find_iter(paragraph) {
        let word = m.as_str().trim_matches(|c| c == '\'' || c == '-');
        if m.start() > 0 && conjunctions.iter().any(|c| c.eq_ignore_ascii_case(word)) {
            cuts.push(m.start());
        }
    }
    cuts.push(paragraph.len());
    cuts.windows(2)
        .map(|w| paragraph[w[0]..w[1]].trim())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Single left-to-right pass: the boundary between paragraphs `i` and `i+1`
/// is removed when their embeddings are at least `threshold` similar.
fn merge_similar(
    paragraphs: &[&str],
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<Vec<String>, SegmentError> {
    if paragraphs.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = paragraphs.iter().map(|p| p.to_string()).collect();
    let vectors = embedder.embed(&texts)?;
    if vectors.len() != texts.len() {
        return Err(SegmentError::EmbedderUnavailable(format!(
            "embedder returned {} vectors for {} texts",
            vectors.len(),
            texts.len()
        )));
    }
    let mut merged = vec![texts[0].clone()];
    for i in 1..texts.len() {
        if cosine_similarity(&vectors[i - 1], &vectors[i]) >= threshold {
            let last = merged.last_mut().expect("nonempty");
            last.push_str("\n\n");
            last.push_str(&texts[i]);
        } else {
            merged.push(texts[i].clone());
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::FixedEmbedder;

    fn texts(steps: &[Step]) -> Vec<&str> {
        steps.iter().map(|s| s.text.as_str()).collect()
    }

    #[test]
    fn split_regions_cases() {
        assert_eq!(
            split_regions("<think>A\n\nB</think> ans"),
            ("A\n\nB", " ans")
        );
        assert_eq!(
            split_regions("no delimiters here"),
            ("no delimiters here", "no delimiters here")
        );
        assert_eq!(split_regions("<think></think>x"), ("", "x"));
        // Unclosed block falls back to the whole text.
        assert_eq!(split_regions("<think>abc"), ("<think>abc", "<think>abc"));
    }

    #[test]
    fn paragraph_split() {
        let cfg = SegmentationConfig::default();
        let steps = segment("S1.\n\nS2.\n\nS3.", &cfg, None).unwrap();
        assert_eq!(texts(&steps), ["S1.", "S2.", "S3."]);
        assert_eq!(steps[2].index, 2);
        assert!(steps.iter().all(|s| s.token_count == 1));
    }

    #[test]
    fn paragraph_split_normalizes_runs_and_blank_lines() {
        let cfg = SegmentationConfig::default();
        let steps = segment("\n\nA b\n\n\n\nC\n  \nD\nE\n\n", &cfg, None).unwrap();
        assert_eq!(texts(&steps), ["A b", "C", "D\nE"]);
    }

    #[test]
    fn conjunction_split() {
        let cfg = SegmentationConfig {
            strategy: Strategy::Conjunction,
            conjunctions: vec!["wait".into()],
            ..Default::default()
        };
        let steps = segment("I think X. Wait, maybe Y.", &cfg, None).unwrap();
        assert_eq!(texts(&steps), ["I think X.", "Wait, maybe Y."]);
    }

    #[test]
    fn conjunction_split_respects_hyphenated_words() {
        let cfg = SegmentationConfig::with_strategy(Strategy::Conjunction);
        let steps = segment("So 2 + 2 = 4, let me double-check that. Hmm OK", &cfg, None).unwrap();
        assert_eq!(
            texts(&steps),
            ["So 2 + 2 = 4, let me", "double-check that.", "Hmm OK"]
        );
        // Not a word boundary: "butter" and "checking" do not split.
        let steps = segment("butter checking", &cfg, None).unwrap();
        assert_eq!(steps.len(), 1);
    }

    #[test]
    fn sentence_split() {
        let cfg = SegmentationConfig::with_strategy(Strategy::Sentence);
        let steps = segment("A is 3.5 here. Really?! Yes\n\nNew para... end", &cfg, None).unwrap();
        assert_eq!(
            texts(&steps),
            ["A is 3.5 here.", "Really?!", "Yes", "New para...", "end"]
        );
    }

    #[test]
    fn similarity_merge_adjacent_pairs() {
        // P1 and P2 share a vector, P3 is orthogonal: cos(P1,P2)=1, cos(P2,P3)=0.
        let embedder = FixedEmbedder::new([
            ("P1", vec![1.0, 0.0]),
            ("P2", vec![1.0, 0.0]),
            ("P3", vec![0.0, 1.0]),
        ]);
        let cfg = SegmentationConfig::with_strategy(Strategy::SimilarityMerge);
        let steps = segment("P1\n\nP2\n\nP3", &cfg, Some(&embedder)).unwrap();
        assert_eq!(texts(&steps), ["P1\n\nP2", "P3"]);
    }

    #[test]
    fn similarity_merge_without_embedder_fails() {
        let cfg = SegmentationConfig::with_strategy(Strategy::SimilarityMerge);
        assert!(matches!(
            segment("a\n\nb", &cfg, None),
            Err(SegmentError::EmbedderUnavailable(_))
        ));
    }

    #[test]
    fn count_steps_degenerate_cases() {
        let cfg = SegmentationConfig::default();
        let r = Response::from_raw("p", "<think>a\n\nb\n\nc</think>x", &cfg, None).unwrap();
        assert_eq!(count_steps(&r), 3);
        let r = Response::from_raw("p", "<think></think>x", &cfg, None).unwrap();
        assert_eq!(count_steps(&r), 0);
        // Emptied-out reasoning block seen at the end of token-penalty training.
        let r = Response::from_raw("p", "<think>\n\n</think>", &cfg, None).unwrap();
        assert_eq!(count_steps(&r), 0);
    }

    #[test]
    fn invalid_configs() {
        let cfg = SegmentationConfig {
            similarity_threshold: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SegmentationConfig {
            strategy: Strategy::Conjunction,
            conjunctions: vec![],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn response_extracts_answer_from_answer_region() {
        let cfg = SegmentationConfig::default();
        let r = Response::from_raw(
            "p",
            "<think>a 1\n\nb 2</think>\nThe remainder is \\boxed{321}.",
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(r.extracted_answer.as_deref(), Some("321"));
        assert_eq!(r.token_count, 8);
    }
}
