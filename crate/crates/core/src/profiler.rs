//! Sentence-level reasoning profiles.
//!
//! Each sentence of a trace's reasoning is labeled with one of five
//! categories by a judge model; the profile is the share of sentences per
//! category across a corpus. Sentences come from the segmentation module's
//! sentence strategy.
//!
//! Judges receive numbered sentences in batches and answer with a block
//!
//! ```text
//! <labels>
//! 1: pivotal
//! 2: verification
//! </labels>
//! ```
//!
//! Sentences the judge fails to label are asked about once more; if the
//! second answer is also unusable they count as non-substantive and are
//! tallied in [`ProfileReport::fallback_count`].

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::{segment, Response, SegmentError, SegmentationConfig, Strategy};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("missing configuration: {0}")]
    Config(String),
    #[error("response `{0}` has no reasoning text")]
    EmptyThink(String),
    #[error("nothing to profile")]
    EmptyInput,
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningCategory {
    PivotalReasoning,
    ProductiveElaborationCalculation,
    ExploringAlternatives,
    VerificationSelfCorrection,
    NonSubstantive,
}

impl ReasoningCategory {
    pub const ALL: [ReasoningCategory; 5] = [
        ReasoningCategory::PivotalReasoning,
        ReasoningCategory::ProductiveElaborationCalculation,
        ReasoningCategory::ExploringAlternatives,
        ReasoningCategory::VerificationSelfCorrection,
        ReasoningCategory::NonSubstantive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReasoningCategory::PivotalReasoning => "Pivotal Reasoning",
            ReasoningCategory::ProductiveElaborationCalculation => {
                "Productive Elaboration & Calculation"
            }
            ReasoningCategory::ExploringAlternatives => "Exploring Alternatives",
            ReasoningCategory::VerificationSelfCorrection => "Verification & Self-Correction",
            ReasoningCategory::NonSubstantive => "Non-Substantive Statements",
        }
    }

    /// Short label judges are asked to answer with.
    pub fn key(self) -> &'static str {
        match self {
            ReasoningCategory::PivotalReasoning => "pivotal",
            ReasoningCategory::ProductiveElaborationCalculation => "elaboration",
            ReasoningCategory::ExploringAlternatives => "alternatives",
            ReasoningCategory::VerificationSelfCorrection => "verification",
            ReasoningCategory::NonSubstantive => "non_substantive",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ReasoningCategory::PivotalReasoning => {
                "a step the solution depends on: it sets up the key idea or moves the argument forward"
            }
            ReasoningCategory::ProductiveElaborationCalculation => {
                "working out details of the current approach, such as arithmetic, algebra or explaining a step"
            }
            ReasoningCategory::ExploringAlternatives => {
                "switching to or weighing another method, reading or line of attack"
            }
            ReasoningCategory::VerificationSelfCorrection => {
                "re-checking an earlier result or fixing a mistake in it"
            }
            ReasoningCategory::NonSubstantive => {
                "filler with no mathematical content, such as hesitation or restating the task"
            }
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Accepts the key, the display name or the 1-based position, ignoring
    /// case and punctuation.
    pub fn parse_label(label: &str) -> Option<Self> {
        let norm: String = label
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        if norm.is_empty() {
            return None;
        }
        Self::ALL.into_iter().find(|c| {
            let key: String = c.key().chars().filter(|ch| ch.is_alphanumeric()).collect();
            let name: String = c
                .name()
                .chars()
                .filter(|ch| ch.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect();
            norm == key || norm == name || norm == (c.index() + 1).to_string()
        })
    }
}

impl fmt::Display for ReasoningCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sends a prompt to a judge and returns its raw reply.
pub trait JudgeClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, ProfileError>;
}

/// Splits reasoning text into the sentences that get judged.
pub fn judge_sentences(think_text: &str) -> Result<Vec<String>, ProfileError> {
    let cfg = SegmentationConfig::with_strategy(Strategy::Sentence);
    Ok(segment(think_text, &cfg, None)?
        .into_iter()
        .map(|s| s.text)
        .collect())
}

/// Judge prompt for one response.
pub fn build_judge_prompt(response: &Response) -> Result<String, ProfileError> {
    if response.think_text.trim().is_empty() {
        return Err(ProfileError::EmptyThink(response.prompt_id.clone()));
    }
    Ok(prompt_for_sentences(&judge_sentences(
        &response.think_text,
    )?))
}

/// Judge prompt for a batch of sentences, numbered from 1.
pub fn prompt_for_sentences(sentences: &[String]) -> String {
    let mut p = String::from(
        "You are annotating the reasoning of a model solving a math problem.\n\
         Assign every numbered sentence below to exactly one category.\n\nCategories:\n",
    );
    for c in ReasoningCategory::ALL {
        p.push_str(&format!(
            "- {} ({}): {}\n",
            c.key(),
            c.name(),
            c.description()
        ));
    }
    p.push_str("\nSentences:\n");
    for (i, s) in sentences.iter().enumerate() {
        let flat = s.split_whitespace().collect::<Vec<_>>().join(" ");
        p.push_str(&format!("[{}] {}\n", i + 1, flat));
    }
    p.push_str(
        "\nReply with one line per sentence inside a <labels> block, formatted as\n\
         `<number>: <category key>`, for example:\n<labels>\n1: pivotal\n2: elaboration\n</labels>\n",
    );
    p
}

/// Reads `number: label` lines, preferring the `<labels>` block when present.
/// Entries outside `1..=n` or with unknown labels are dropped.
pub fn parse_judge_reply(reply: &str, n: usize) -> Vec<Option<ReasoningCategory>> {
    let body = match (reply.find("<labels>"), reply.rfind("</labels>")) {
        (Some(a), Some(b)) if a < b => &reply[a + "<labels>".len()..b],
        _ => reply,
    };
    let line = Regex::new(r"^\s*\[?(\d+)\]?(?:\s*[:.)=-]\s*|\s+)(.+?)\s*$").expect("valid regex");
    let mut out = vec![None; n];
    for l in body.lines() {
        if let Some(c) = line.captures(l) {
            let idx: usize = match c[1].parse() {
                Ok(i) => i,
                Err(_) => continue,
            };
            if (1..=n).contains(&idx) && out[idx - 1].is_none() {
                out[idx - 1] = ReasoningCategory::parse_label(&c[2]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileConfig {
    /// Sentences per judge request.
    pub batch_size: usize,
    /// Concurrent judge requests.
    pub max_in_flight: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub category: ReasoningCategory,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub shares: Vec<CategoryShare>,
    pub sentence_count: usize,
    /// Sentences counted as non-substantive because the judge never labeled
    /// them.
    pub fallback_count: usize,
}

impl ProfileReport {
    pub fn from_counts(counts: [usize; 5], fallback_count: usize) -> Self {
        let total: usize = counts.iter().sum();
        let shares = ReasoningCategory::ALL
            .into_iter()
            .map(|c| CategoryShare {
                category: c,
                count: counts[c.index()],
                fraction: if total == 0 {
                    0.0
                } else {
                    counts[c.index()] as f64 / total as f64
                },
            })
            .collect();
        Self {
            shares,
            sentence_count: total,
            fallback_count,
        }
    }

    /// Wraps externally reported fractions for display; counts are rounded
    /// and fractions kept as given.
    pub fn from_fractions(fractions: [f64; 5], sentence_count: usize) -> Self {
        let shares = ReasoningCategory::ALL
            .into_iter()
            .map(|c| CategoryShare {
                category: c,
                count: (fractions[c.index()] * sentence_count as f64).round() as usize,
                fraction: fractions[c.index()],
            })
            .collect();
        Self {
            shares,
            sentence_count,
            fallback_count: 0,
        }
    }

    pub fn fraction(&self, category: ReasoningCategory) -> f64 {
        self.shares
            .iter()
            .find(|s| s.category == category)
            .map_or(0.0, |s| s.fraction)
    }

    pub fn fractions(&self) -> [f64; 5] {
        ReasoningCategory::ALL.map(|c| self.fraction(c))
    }
}

impl fmt::Display for ProfileReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} sentences", self.sentence_count)?;
        for s in &self.shares {
            writeln!(f, "{:<38} {:>6.2}%", s.category.name(), 100.0 * s.fraction)?;
        }
        if self.fallback_count > 0 {
            writeln!(
                f,
                "({} unlabeled, counted as non-substantive)",
                self.fallback_count
            )?;
        }
        Ok(())
    }
}

/// Labels one batch, re-asking once about sentences left unlabeled.
/// Returns the labels and how many fell back to non-substantive.
pub fn label_batch(
    sentences: &[String],
    judge: &dyn JudgeClient,
) -> Result<(Vec<ReasoningCategory>, usize), ProfileError> {
    let mut labels = parse_judge_reply(
        &judge.complete(&prompt_for_sentences(sentences))?,
        sentences.len(),
    );
    let missing: Vec<usize> = (0..sentences.len())
        .filter(|&i| labels[i].is_none())
        .collect();
    if !missing.is_empty() {
        let retry: Vec<String> = missing.iter().map(|&i| sentences[i].clone()).collect();
        let again = parse_judge_reply(&judge.complete(&prompt_for_sentences(&retry))?, retry.len());
        for (&i, label) in missing.iter().zip(again) {
            labels[i] = label;
        }
    }
    let fallback = labels.iter().filter(|l| l.is_none()).count();
    Ok((
        labels
            .into_iter()
            .map(|l| l.unwrap_or(ReasoningCategory::NonSubstantive))
            .collect(),
        fallback,
    ))
}

/// Profiles the reasoning of `responses`. Responses without reasoning text
/// contribute no sentences.
pub fn profile(
    responses: &[Response],
    judge: &dyn JudgeClient,
    cfg: &ProfileConfig,
) -> Result<ProfileReport, ProfileError> {
    if cfg.batch_size == 0 || cfg.max_in_flight == 0 {
        return Err(ProfileError::Config(
            "batch_size and max_in_flight must be positive".into(),
        ));
    }
    let mut sentences = Vec::new();
    for r in responses {
        sentences.extend(judge_sentences(&r.think_text)?);
    }
    if sentences.is_empty() {
        return Err(ProfileError::EmptyInput);
    }
    let batches: Vec<&[String]> = sentences.chunks(cfg.batch_size).collect();
    let next = AtomicUsize::new(0);
    let totals = Mutex::new(([0usize; 5], 0usize));
    let first_error = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..cfg.max_in_flight.min(batches.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= batches.len() || first_error.lock().unwrap().is_some() {
                    break;
                }
                match label_batch(batches[i], judge) {
                    Ok((labels, fallback)) => {
                        let mut t = totals.lock().unwrap();
                        for l in labels {
                            t.0[l.index()] += 1;
                        }
                        t.1 += fallback;
                    }
                    Err(e) => {
                        first_error.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let (counts, fallback) = totals.into_inner().unwrap();
    Ok(ProfileReport::from_counts(counts, fallback))
}

/// Judge backed by a per-sentence labeling function; reads the numbered
/// sentences back out of the prompt.
pub struct RuleJudge<F> {
    rule: F,
}

impl<F> RuleJudge<F>
where
    F: Fn(&str) -> ReasoningCategory + Send + Sync,
{
    pub fn new(rule: F) -> Self {
        Self { rule }
    }
}

/// Numbered sentences of a prompt built by [`prompt_for_sentences`].
pub fn prompt_sentences(prompt: &str) -> Vec<String> {
    let line = Regex::new(r"^\[(\d+)\] (.*)$").expect("valid regex");
    prompt
        .lines()
        .filter_map(|l| line.captures(l).map(|c| c[2].to_string()))
        .collect()
}

impl<F> JudgeClient for RuleJudge<F>
where
    F: Fn(&str) -> ReasoningCategory + Send + Sync,
{
    fn complete(&self, prompt: &str) -> Result<String, ProfileError> {
        let mut out = String::from("<labels>\n");
        for (i, s) in prompt_sentences(prompt).iter().enumerate() {
            out.push_str(&format!("{}: {}\n", i + 1, (self.rule)(s).key()));
        }
        out.push_str("</labels>\n");
        Ok(out)
    }
}

/// Offline keyword heuristic; a rough stand-in when no judge model is
/// configured.
pub fn keyword_label(sentence: &str) -> ReasoningCategory {
    let s = sentence.to_lowercase();
    let words: Vec<&str> = s
        .split(|c: char| !c.is_alphanumeric() && c != '-')
        .filter(|w| !w.is_empty())
        .collect();
    let has = |w: &str| words.contains(&w);
    if ["alternatively", "alternative", "instead", "another"]
        .iter()
        .any(|w| has(w))
    {
        ReasoningCategory::ExploringAlternatives
    } else if [
        "check",
        "verify",
        "double-check",
        "wait",
        "mistake",
        "recheck",
        "confirm",
    ]
    .iter()
    .any(|w| has(w))
    {
        ReasoningCategory::VerificationSelfCorrection
    } else if words.len() <= 3 {
        ReasoningCategory::NonSubstantive
    } else if s.chars().any(|c| c.is_ascii_digit() || "=+*/^".contains(c)) {
        ReasoningCategory::ProductiveElaborationCalculation
    } else {
        ReasoningCategory::PivotalReasoning
    }
}

pub fn keyword_judge() -> RuleJudge<fn(&str) -> ReasoningCategory> {
    RuleJudge::new(keyword_label as fn(&str) -> ReasoningCategory)
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Debug, Deserialize)]
struct ChatReply {
    content: String,
}

/// OpenAI-compatible chat-completions judge.
///
/// Reads `STEP_PRUNER_JUDGE_URL`, `STEP_PRUNER_JUDGE_MODEL` and, optionally,
/// `STEP_PRUNER_JUDGE_KEY`.
#[derive(Debug, Clone)]
pub struct HttpJudge {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Attempts per request before giving up.
    pub attempts: usize,
}

impl HttpJudge {
    pub fn from_env() -> Result<Self, ProfileError> {
        let endpoint = std::env::var("STEP_PRUNER_JUDGE_URL")
            .map_err(|_| ProfileError::Config("STEP_PRUNER_JUDGE_URL is not set".into()))?;
        let model = std::env::var("STEP_PRUNER_JUDGE_MODEL")
            .map_err(|_| ProfileError::Config("STEP_PRUNER_JUDGE_MODEL is not set".into()))?;
        Ok(Self {
            endpoint,
            model,
            api_key: std::env::var("STEP_PRUNER_JUDGE_KEY").ok(),
            timeout: Duration::from_secs(120),
            attempts: 3,
        })
    }

    fn request(&self, client: &reqwest::blocking::Client, prompt: &str) -> Result<String, String> {
        let mut req = client.post(&self.endpoint).json(&ChatRequest {
            model: &self.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: 0.0,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let body: ChatResponse = req
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| e.to_string())?;
        body.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| "reply has no choices".to_string())
    }
}

impl JudgeClient for HttpJudge {
    fn complete(&self, prompt: &str) -> Result<String, ProfileError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| ProfileError::JudgeUnavailable(e.to_string()))?;
        let mut last = String::from("no attempts configured");
        for _ in 0..self.attempts {
            match self.request(&client, prompt) {
                Ok(text) => return Ok(text),
                Err(e) => last = e,
            }
        }
        Err(ProfileError::JudgeUnavailable(last))
    }
}
