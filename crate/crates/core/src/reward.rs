//! Step-aware reward.
//!
//! Each response in a group of `n` candidates receives
//!
//! ```text
//! R = R_acc + beta * R_seg  (- token_penalty_weight * excess tokens, optional)
//! ```
//!
//! where `R_acc` is the 0/1 correctness indicator and `R_seg` penalizes steps
//! beyond `S*`, the fewest steps among the group's correct responses.
//! Incorrect responses shorter than `S*` are masked to a zero step reward so
//! that brevity is never rewarded on a wrong answer. Groups without any
//! correct response are skipped entirely.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::AnswerChecker;
use crate::segmentation::{count_steps, Response};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    /// No correct response and skip-all-wrong is active; the group must not
    /// produce gradient signal.
    #[error("group `{0}` skipped: no correct response")]
    GroupSkipped(String),
    #[error("response index {index} out of range for group of {len}")]
    NoSuchResponse { index: usize, len: usize },
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

/// Switches that remove one component of the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// -CR: drop the correctness term.
    DisableCorrectReward,
    /// -COS: S* is the minimum over all responses, correct or not.
    IncorrectResponsesSetSstar,
    /// -WRM: incorrect responses shorter than S* earn `S* - S`.
    UnmaskWrongBrevity,
    /// -SAW: keep all-wrong groups in training.
    NoSkipAllWrong,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::DisableCorrectReward,
        Ablation::IncorrectResponsesSetSstar,
        Ablation::UnmaskWrongBrevity,
        Ablation::NoSkipAllWrong,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Ablation::DisableCorrectReward => "CR",
            Ablation::IncorrectResponsesSetSstar => "COS",
            Ablation::UnmaskWrongBrevity => "WRM",
            Ablation::NoSkipAllWrong => "SAW",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s
            .trim_start_matches('-')
            .to_ascii_lowercase()
            .replace('-', "_");
        match key.as_str() {
            "cr" | "disable_correct_reward" => Ok(Ablation::DisableCorrectReward),
            "cos" | "incorrect_responses_set_sstar" => Ok(Ablation::IncorrectResponsesSetSstar),
            "wrm" | "unmask_wrong_brevity" => Ok(Ablation::UnmaskWrongBrevity),
            "saw" | "no_skip_all_wrong" => Ok(Ablation::NoSkipAllWrong),
            _ => Err(format!(
                "unknown ablation `{s}` (expected one of CR, COS, WRM, SAW)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Weight of the step penalty.
    pub beta: f64,
    /// Weight of the optional token-count penalty; 0 disables it.
    pub token_penalty_weight: f64,
    pub ablations: BTreeSet<Ablation>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            token_penalty_weight: 0.0,
            ablations: BTreeSet::new(),
        }
    }
}

impl RewardConfig {
    /// Combined paragraph + token penalty variant (coefficients 0.01 / 0.001).
    pub fn with_token_penalty() -> Self {
        Self {
            token_penalty_weight: 0.001,
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablations.insert(ablation);
        self
    }

    pub fn has(&self, ablation: Ablation) -> bool {
        self.ablations.contains(&ablation)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(RewardError::InvalidConfig(format!(
                "beta must be finite and nonnegative, got {}",
                self.beta
            )));
        }
        if !self.token_penalty_weight.is_finite() || self.token_penalty_weight < 0.0 {
            return Err(RewardError::InvalidConfig(format!(
                "token_penalty_weight must be finite and nonnegative, got {}",
                self.token_penalty_weight
            )));
        }
        Ok(())
    }
}

/// The `n` candidate responses for one prompt, scored for correctness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt_id: String,
    pub gold_answer: String,
    pub responses: Vec<Response>,
    pub correct: Vec<bool>,
    /// Fewest steps among correct responses (see [`optimal_steps`]).
    pub s_star: Option<usize>,
}

impl Group {
    /// Scores every response against `gold_answer` and resolves `S*`.
    pub fn score(
        prompt_id: impl Into<String>,
        gold_answer: impl Into<String>,
        responses: Vec<Response>,
        checker: &dyn AnswerChecker,
        cfg: &RewardConfig,
    ) -> Self {
        let gold_answer = gold_answer.into();
        let correct = responses
            .iter()
            .map(|r| accuracy_reward(r, &gold_answer, checker) == 1.0)
            .collect();
        Self::with_correctness(prompt_id, gold_answer, responses, correct, cfg)
    }

    /// Uses externally decided correctness flags.
    pub fn with_correctness(
        prompt_id: impl Into<String>,
        gold_answer: impl Into<String>,
        responses: Vec<Response>,
        correct: Vec<bool>,
        cfg: &RewardConfig,
    ) -> Self {
        assert_eq!(
            responses.len(),
            correct.len(),
            "one correctness flag per response"
        );
        let mut group = Group {
            prompt_id: prompt_id.into(),
            gold_answer: gold_answer.into(),
            responses,
            correct,
            s_star: None,
        };
        group.s_star = optimal_steps(&group, cfg);
        group
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn step_counts(&self) -> Vec<usize> {
        self.responses.iter().map(count_steps).collect()
    }

    pub fn any_correct(&self) -> bool {
        self.correct.iter().any(|&c| c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseLabel {
    CorrectExcess,
    CorrectOptimal,
    IncorrectExcess,
    IncorrectBrevityMasked,
    GroupSkipped,
}

impl fmt::Display for CaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CaseLabel::CorrectExcess => "correct_excess",
            CaseLabel::CorrectOptimal => "correct_optimal",
            CaseLabel::IncorrectExcess => "incorrect_excess",
            CaseLabel::IncorrectBrevityMasked => "incorrect_brevity_masked",
            CaseLabel::GroupSkipped => "group_skipped",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_seg: f64,
    pub r_token: f64,
    pub total: f64,
    pub case_label: CaseLabel,
}

impl RewardBreakdown {
    fn skipped() -> Self {
        Self {
            r_acc: 0.0,
            r_seg: 0.0,
            r_token: 0.0,
            total: 0.0,
            case_label: CaseLabel::GroupSkipped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipDecision {
    Proceed,
    Skip,
}

/// 1 when the extracted answer matches `gold_answer`, else 0. A response
/// without an extractable answer scores 0.
pub fn accuracy_reward(response: &Response, gold_answer: &str, checker: &dyn AnswerChecker) -> f64 {
    match &response.extracted_answer {
        Some(ans) if checker.equivalent(ans, gold_answer) => 1.0,
        _ => 0.0,
    }
}

/// S*: fewest steps among correct responses, or among all responses under
/// the -COS ablation. `None` when no response is correct.
pub fn optimal_steps(group: &Group, cfg: &RewardConfig) -> Option<usize> {
    let all = cfg.has(Ablation::IncorrectResponsesSetSstar);
    group
        .responses
        .iter()
        .zip(&group.correct)
        .filter(|(_, &c)| all || c)
        .map(|(r, _)| count_steps(r))
        .min()
}

/// R_seg for a response with `steps` steps.
pub fn step_reward(steps: usize, s_star: usize, correct: bool, cfg: &RewardConfig) -> f64 {
    let excess = steps as f64 - s_star as f64;
    if !correct && excess < 0.0 && cfg.has(Ablation::UnmaskWrongBrevity) {
        return -excess;
    }
    // Correct responses below S* cannot occur under the default S*; clamp anyway.
    -excess.max(0.0)
}

pub fn apply_skip_all_wrong(group: &Group, cfg: &RewardConfig) -> SkipDecision {
    if !group.any_correct() && !cfg.has(Ablation::NoSkipAllWrong) {
        SkipDecision::Skip
    } else {
        SkipDecision::Proceed
    }
}

/// References for the step and token penalties: `(S*, T*)`.
///
/// With skip-all-wrong disabled, an all-wrong group falls back to the minimum
/// over every response.
fn references(group: &Group, cfg: &RewardConfig) -> Result<(usize, usize), RewardError> {
    let all = cfg.has(Ablation::IncorrectResponsesSetSstar) || !group.any_correct();
    if !group.any_correct() && !cfg.has(Ablation::NoSkipAllWrong) {
        return Err(RewardError::GroupSkipped(group.prompt_id.clone()));
    }
    let pick = |f: &dyn Fn(&Response) -> usize| {
        group
            .responses
            .iter()
            .zip(&group.correct)
            .filter(|(_, &c)| all || c)
            .map(|(r, _)| f(r))
            .min()
    };
    let s_star =
        pick(&count_steps).ok_or_else(|| RewardError::GroupSkipped(group.prompt_id.clone()))?;
    let t_star = pick(&|r: &Response| r.token_count).unwrap_or(0);
    Ok((s_star, t_star))
}

pub fn total_reward(
    index: usize,
    group: &Group,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    let response = group
        .responses
        .get(index)
        .ok_or(RewardError::NoSuchResponse {
            index,
            len: group.len(),
        })?;
    let (s_star, t_star) = references(group, cfg)?;
    Ok(breakdown(
        response,
        group.correct[index],
        s_star,
        t_star,
        cfg,
    ))
}

fn breakdown(
    response: &Response,
    correct: bool,
    s_star: usize,
    t_star: usize,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let steps = count_steps(response);
    let r_acc = if correct { 1.0 } else { 0.0 };
    let r_seg = step_reward(steps, s_star, correct, cfg);
    let r_token = if cfg.token_penalty_weight > 0.0 {
        -(response.token_count as f64 - t_star as f64).max(0.0)
    } else {
        0.0
    };
    let counted_acc = if cfg.has(Ablation::DisableCorrectReward) {
        0.0
    } else {
        r_acc
    };
    let case_label = match (correct, steps > s_star) {
        (true, true) => CaseLabel::CorrectExcess,
        (true, false) => CaseLabel::CorrectOptimal,
        (false, true) => CaseLabel::IncorrectExcess,
        (false, false) => CaseLabel::IncorrectBrevityMasked,
    };
    RewardBreakdown {
        r_acc,
        r_seg,
        r_token,
        total: counted_acc + cfg.beta * r_seg + cfg.token_penalty_weight * r_token,
        case_label,
    }
}

/// Rewards for a whole group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub s_star: Option<usize>,
    pub decision: SkipDecision,
    pub breakdowns: Vec<RewardBreakdown>,
}

impl GroupScore {
    pub fn totals(&self) -> Vec<f64> {
        self.breakdowns.iter().map(|b| b.total).collect()
    }
}

pub fn score_group(group: &Group, cfg: &RewardConfig) -> GroupScore {
    let decision = apply_skip_all_wrong(group, cfg);
    let breakdowns = match (decision, references(group, cfg)) {
        (SkipDecision::Proceed, Ok((s_star, t_star))) => group
            .responses
            .iter()
            .zip(&group.correct)
            .map(|(r, &c)| breakdown(r, c, s_star, t_star, cfg))
            .collect(),
        _ => vec![RewardBreakdown::skipped(); group.len()],
    };
    GroupScore {
        s_star: group.s_star,
        decision,
        breakdowns,
    }
}
