//! Desk-scale stand-in for a reasoning model, trained with the step reward.
//!
//! Every response to a problem works through the problem's required number of
//! logical steps. Before the requirement is met the policy may give up after
//! any step and guess; once it is met the answer is right with the problem's
//! solve rate, and the policy decides step by step whether to keep verifying
//! (overthinking). Independently it picks a verbosity bucket (words per step)
//! and, at each boundary between logical steps, whether to fuse the two steps
//! into one paragraph.
//!
//! All decisions are shared across problems and each one is a GRPO token.
//! Sampled traces are rendered as text with a `<think>` block and a
//! `\boxed{}` answer and then go through the same segmentation, extraction and
//! reward code as real model output.
//!
//! The reward counts paragraphs, so the policy can lower its step count either
//! by verifying less or by fusing steps into longer paragraphs (reward
//! hacking). The stopping criterion watches paragraph length to catch the
//! second.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::ExactMatch;
use crate::grpo::{
    grpo_loss_with_grad, normalize_advantages, GrpoBatch, GrpoConfig, GrpoError, ResponseLogProbs,
    TokenLogProbs,
};
use crate::reward::{score_group, Group, RewardConfig, RewardError, SkipDecision};
use crate::segmentation::{count_steps, Response, SegmentError, SegmentationConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

/// A synthetic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub id: String,
    pub answer: String,
    /// Logical steps needed before the answer can be right.
    pub required_steps: usize,
    /// Probability of a correct answer once `required_steps` is reached.
    pub solve_rate: f64,
}

impl ProblemSpec {
    pub fn new(id: impl Into<String>, answer: u64, required_steps: usize, solve_rate: f64) -> Self {
        Self {
            id: id.into(),
            answer: answer.to_string(),
            required_steps,
            solve_rate,
        }
    }
}

/// Default problem bank: requirements from 2 to 6 steps, harder problems
/// solved less reliably.
pub fn default_problems() -> Vec<ProblemSpec> {
    [
        (2, 0.95),
        (2, 0.9),
        (3, 0.9),
        (3, 0.85),
        (4, 0.8),
        (6, 0.5),
        (8, 0.35),
        (10, 0.25),
    ]
    .iter()
    .enumerate()
    .map(|(i, &(req, rate))| ProblemSpec::new(format!("toy-{i}"), 17 + 31 * i as u64, req, rate))
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectnessModel {
    /// Probability that a response which gave up early still guesses right.
    pub guess_rate: f64,
}

impl Default for CorrectnessModel {
    fn default() -> Self {
        Self { guess_rate: 0.0 }
    }
}

impl CorrectnessModel {
    /// Probability of a correct answer after `logical_steps` steps; a
    /// nondecreasing step function of the step count.
    pub fn p_correct(&self, problem: &ProblemSpec, logical_steps: usize) -> f64 {
        if logical_steps >= problem.required_steps {
            problem.solve_rate
        } else {
            self.guess_rate
        }
    }
}

/// How a fresh policy is initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyInit {
    pub max_steps: usize,
    pub give_up_logit: f64,
    /// Initial tendency to keep verifying once the problem is solved.
    pub continue_logit: f64,
    pub verbosity_words: Vec<usize>,
    pub merge_logit: f64,
    pub merge_learnable: bool,
    pub correctness: CorrectnessModel,
}

impl Default for ToyInit {
    fn default() -> Self {
        Self {
            max_steps: 14,
            give_up_logit: -3.0,
            continue_logit: 1.5,
            verbosity_words: vec![30, 40, 50, 60],
            merge_logit: -5.0,
            merge_learnable: true,
            correctness: CorrectnessModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub max_steps: usize,
    /// Logit of stopping after a step while the problem is still unsolved.
    pub give_up_logit: f64,
    /// Logit of adding another step once the problem is solved.
    pub continue_logit: f64,
    /// Words per step for each verbosity bucket.
    pub verbosity_words: Vec<usize>,
    pub verbosity_logits: Vec<f64>,
    /// Logit of fusing two consecutive logical steps into one paragraph.
    pub merge_logit: f64,
    pub merge_learnable: bool,
    pub correctness: CorrectnessModel,
}

/// One sampled decision, i.e. one GRPO token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    GiveUp(bool),
    Continue(bool),
    Verbosity(usize),
    Merge(bool),
}

fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|z| z - lse).collect()
}

fn sample_categorical(log_probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the total mass: take the last reachable option.
    log_probs.iter().rposition(|lp| lp.is_finite()).unwrap_or(0)
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Log-probability of outcome `yes` of a Bernoulli with logit `logit / t`.
fn bernoulli_log_prob(logit: f64, yes: bool, t: f64) -> f64 {
    log_sigmoid(if yes { logit / t } else { -logit / t })
}

const GIVE_UP: usize = 0;
const CONTINUE: usize = 1;
const VERBOSITY: usize = 2;

impl ToyPolicy {
    pub fn new(init: &ToyInit) -> Self {
        Self {
            max_steps: init.max_steps,
            give_up_logit: init.give_up_logit,
            continue_logit: init.continue_logit,
            verbosity_words: init.verbosity_words.clone(),
            verbosity_logits: vec![0.0; init.verbosity_words.len()],
            merge_logit: init.merge_logit,
            merge_learnable: init.merge_learnable,
            correctness: init.correctness,
        }
    }

    fn merge_index(&self) -> usize {
        VERBOSITY + self.verbosity_logits.len()
    }

    /// Flattened parameters: give-up, continue, verbosity logits, merge.
    pub fn params(&self) -> Vec<f64> {
        let mut out = vec![self.give_up_logit, self.continue_logit];
        out.extend(&self.verbosity_logits);
        out.push(self.merge_logit);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(
            params.len(),
            self.merge_index() + 1,
            "parameter count mismatch"
        );
        self.give_up_logit = params[GIVE_UP];
        self.continue_logit = params[CONTINUE];
        let merge = self.merge_index();
        self.verbosity_logits
            .copy_from_slice(&params[VERBOSITY..merge]);
        self.merge_logit = params[merge];
    }

    pub fn decision_log_prob(&self, d: Decision, t: f64) -> f64 {
        match d {
            Decision::GiveUp(y) => bernoulli_log_prob(self.give_up_logit, y, t),
            Decision::Continue(y) => bernoulli_log_prob(self.continue_logit, y, t),
            Decision::Verbosity(i) => log_softmax(&self.verbosity_logits, t)[i],
            Decision::Merge(y) => bernoulli_log_prob(self.merge_logit, y, t),
        }
    }

    /// Log-probability of each decision of `trace`, in token order.
    pub fn token_log_probs(&self, trace: &ToyTrace, t: f64) -> Vec<f64> {
        trace
            .decisions
            .iter()
            .map(|&d| self.decision_log_prob(d, t))
            .collect()
    }

    /// Adds `scale * d logp(d) / d params` to `grad`, laid out like
    /// [`ToyPolicy::params`].
    fn add_decision_grad(&self, d: Decision, scale: f64, t: f64, grad: &mut [f64]) {
        let bernoulli = |logit: f64, y: bool| (if y { 1.0 } else { 0.0 } - sigmoid(logit / t)) / t;
        match d {
            Decision::GiveUp(y) => grad[GIVE_UP] += scale * bernoulli(self.give_up_logit, y),
            Decision::Continue(y) => grad[CONTINUE] += scale * bernoulli(self.continue_logit, y),
            Decision::Merge(y) => {
                grad[self.merge_index()] += scale * bernoulli(self.merge_logit, y)
            }
            Decision::Verbosity(i) => {
                for (b, lp) in log_softmax(&self.verbosity_logits, t).iter().enumerate() {
                    let ind = if b == i { 1.0 } else { 0.0 };
                    grad[VERBOSITY + b] += scale * (ind - lp.exp()) / t;
                }
            }
        }
    }

    /// Exact distribution of `(logical_steps, gave_up)` for `problem`.
    pub fn step_outcomes(&self, problem: &ProblemSpec, t: f64) -> Vec<(usize, bool, f64)> {
        let q = sigmoid(self.give_up_logit / t);
        let c = sigmoid(self.continue_logit / t);
        let req = problem.required_steps.min(self.max_steps);
        let mut out = Vec::new();
        let mut reach = 1.0;
        for k in 1..req {
            out.push((k, true, reach * q));
            reach *= 1.0 - q;
        }
        let mut p = reach;
        for k in req..self.max_steps {
            out.push((k, false, p * (1.0 - c)));
            p *= c;
        }
        out.push((self.max_steps, false, p));
        out
    }

    /// Marginal probabilities of 1..=max_steps logical steps for `problem`.
    pub fn step_count_distribution(&self, problem: &ProblemSpec, t: f64) -> Vec<f64> {
        let mut dist = vec![0.0; self.max_steps];
        for (k, _, p) in self.step_outcomes(problem, t) {
            dist[k - 1] += p;
        }
        dist
    }

    /// Exact expectations under the policy, averaged over `problems`.
    pub fn expected_metrics(&self, problems: &[ProblemSpec], t: f64) -> ToyMetrics {
        let mean_words: f64 = log_softmax(&self.verbosity_logits, t)
            .iter()
            .zip(&self.verbosity_words)
            .map(|(lp, &w)| lp.exp() * w as f64)
            .sum();
        let p_merge = sigmoid(self.merge_logit / t);
        let mut m = ToyMetrics::default();
        for problem in problems {
            for (k, gave_up, p) in self.step_outcomes(problem, t) {
                let kf = k as f64;
                m.accuracy += p * if gave_up {
                    self.correctness.guess_rate
                } else {
                    problem.solve_rate
                };
                m.logical_steps += p * kf;
                m.paragraphs += p * (1.0 + (kf - 1.0) * (1.0 - p_merge));
                m.tokens += p * (TEMPLATE_OVERHEAD_WORDS as f64 + kf * mean_words);
            }
        }
        let n = problems.len() as f64;
        m.accuracy /= n;
        m.logical_steps /= n;
        m.paragraphs /= n;
        m.tokens /= n;
        m.merge_probability = p_merge;
        m
    }

    fn sample_trace(&self, problem: &ProblemSpec, t: f64, rng: &mut impl Rng) -> ToyTrace {
        let q = sigmoid(self.give_up_logit / t);
        let c = sigmoid(self.continue_logit / t);
        let req = problem.required_steps.min(self.max_steps);
        let mut decisions = Vec::new();
        let mut k = 1;
        let mut gave_up = false;
        loop {
            if k < req {
                let stop = rng.random::<f64>() < q;
                decisions.push(Decision::GiveUp(stop));
                if stop {
                    gave_up = true;
                    break;
                }
            } else if k == self.max_steps {
                break;
            } else {
                let more = rng.random::<f64>() < c;
                decisions.push(Decision::Continue(more));
                if !more {
                    break;
                }
            }
            k += 1;
        }
        let verbosity = sample_categorical(&log_softmax(&self.verbosity_logits, t), rng);
        decisions.push(Decision::Verbosity(verbosity));
        let p_merge = sigmoid(self.merge_logit / t);
        let merges: Vec<bool> = (1..k).map(|_| rng.random::<f64>() < p_merge).collect();
        decisions.extend(merges.iter().map(|&m| Decision::Merge(m)));
        let p = if gave_up {
            self.correctness.guess_rate
        } else {
            problem.solve_rate
        };
        ToyTrace {
            problem_id: problem.id.clone(),
            logical_steps: k,
            gave_up,
            verbosity,
            merges,
            answered_correctly: rng.random::<f64>() < p,
            decisions,
        }
    }
}

/// Exact policy expectations (no sampling noise).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ToyMetrics {
    pub accuracy: f64,
    pub logical_steps: f64,
    /// Expected step count S as seen by the reward.
    pub paragraphs: f64,
    /// Expected whitespace tokens (ignores max_tokens truncation).
    pub tokens: f64,
    pub merge_probability: f64,
}

/// The decisions behind one sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrace {
    pub problem_id: String,
    pub logical_steps: usize,
    pub gave_up: bool,
    pub verbosity: usize,
    /// `merges[i]` fuses logical step `i + 1` into the paragraph of step `i`.
    pub merges: Vec<bool>,
    pub answered_correctly: bool,
    /// Every decision in token order.
    pub decisions: Vec<Decision>,
}

/// `<think>`, `</think>`, "The", "answer", "is", `\boxed{..}.`
pub const TEMPLATE_OVERHEAD_WORDS: usize = 6;

const WORDS: [&str; 16] = [
    "so", "we", "then", "the", "term", "sum", "gives", "value", "factor", "use", "this", "side",
    "equals", "now", "both", "hence",
];

fn render(trace: &ToyTrace, words_per_step: usize, answer: &str, rng: &mut impl Rng) -> String {
    let mut body = String::new();
    for step in 0..trace.logical_steps {
        if step > 0 {
            body.push_str(if trace.merges[step - 1] { " " } else { "\n\n" });
        }
        for w in 0..words_per_step {
            if w > 0 {
                body.push(' ');
            }
            body.push_str(WORDS[rng.random_range(0..WORDS.len())]);
        }
        body.push('.');
    }
    format!("<think>\n{body}\n</think>\n\nThe answer is \\boxed{{{answer}}}.")
}

/// Keeps the first `max_words` whitespace-delimited words.
fn truncate_words(text: &str, max_words: usize) -> &str {
    let mut seen = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                seen += 1;
                if seen == max_words {
                    return &text[..i];
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    text
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub group_size: usize,
    pub batch_prompts: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    /// Stopping criterion: an update is skipped when any paragraph exceeds this.
    pub step_length_limit: usize,
    pub learning_rate: f64,
    pub max_updates: usize,
    /// Halt after this many consecutive stopping-criterion skips.
    pub consecutive_skip_halt: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            batch_prompts: 8,
            temperature: 0.9,
            max_tokens: 8000,
            step_length_limit: 200,
            learning_rate: 5.0,
            max_updates: 600,
            consecutive_skip_halt: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::ConfigInvalid(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.batch_prompts == 0 {
            return bad("batch_prompts must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if self.step_length_limit == 0 {
            return bad("step_length_limit must be positive".into());
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be nonnegative, got {}",
                self.learning_rate
            ));
        }
        if self.consecutive_skip_halt == 0 {
            return bad("consecutive_skip_halt must be positive".into());
        }
        Ok(())
    }
}

/// A scored group together with the decisions that produced it.
#[derive(Debug, Clone)]
pub struct SampledGroup {
    pub group: Group,
    pub traces: Vec<ToyTrace>,
    /// Per response and decision: current (= old) and reference log-probs.
    pub log_probs: Vec<Vec<TokenLogProbs>>,
}

/// Samples `cfg.group_size` responses to `problem` from `policy`.
pub fn sample_group(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    problem: &ProblemSpec,
    cfg: &TrainConfig,
    reward: &RewardConfig,
    rng: &mut impl Rng,
) -> Result<SampledGroup, TrainError> {
    let seg = SegmentationConfig::default();
    let t = cfg.temperature;
    let mut responses = Vec::with_capacity(cfg.group_size);
    let mut traces = Vec::with_capacity(cfg.group_size);
    let mut log_probs = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let trace = policy.sample_trace(problem, t, rng);
        let answer = if trace.answered_correctly {
            problem.answer.clone()
        } else {
            wrong_answer(&problem.answer, rng)
        };
        let text = render(
            &trace,
            policy.verbosity_words[trace.verbosity],
            &answer,
            rng,
        );
        let text = truncate_words(&text, cfg.max_tokens);
        responses.push(Response::from_raw(problem.id.clone(), text, &seg, None)?);

        let current = policy.token_log_probs(&trace, t);
        let refs = reference.token_log_probs(&trace, t);
        log_probs.push(
            current
                .iter()
                .zip(&refs)
                .map(|(&c, &r)| TokenLogProbs {
                    current: c,
                    old: c,
                    reference: r,
                })
                .collect(),
        );
        traces.push(trace);
    }
    let group = Group::score(
        problem.id.clone(),
        problem.answer.clone(),
        responses,
        &ExactMatch,
        reward,
    );
    Ok(SampledGroup {
        group,
        traces,
        log_probs,
    })
}

fn wrong_answer(gold: &str, rng: &mut impl Rng) -> String {
    let offset: u64 = rng.random_range(1..10);
    match gold.parse::<u64>() {
        Ok(v) => (v + offset).to_string(),
        Err(_) => format!("{gold}{offset}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopDecision {
    Proceed,
    SkipUpdate,
}

/// Skips the update when any step of any response is longer than the limit.
/// A step of exactly `step_length_limit` tokens proceeds.
pub fn check_stopping(group: &Group, cfg: &TrainConfig) -> StopDecision {
    let exceeded = group
        .responses
        .iter()
        .any(|r| r.max_step_tokens() > cfg.step_length_limit);
    if exceeded {
        StopDecision::SkipUpdate
    } else {
        StopDecision::Proceed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    AllWrong,
    StepLengthExceeded,
}

/// Telemetry for one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub update_index: usize,
    /// Mean S over all sampled responses.
    pub mean_steps: f64,
    pub mean_tokens: f64,
    pub max_step_tokens: usize,
    /// Mean total reward over groups that were scored; `None` if none were.
    pub mean_reward: Option<f64>,
    pub accuracy: f64,
    pub skipped_reason: Option<SkipReason>,
    pub halted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub records: Vec<TrainRecord>,
    pub policy: ToyPolicy,
}

impl TrainRun {
    pub fn halted(&self) -> bool {
        self.records.last().is_some_and(|r| r.halted)
    }

    /// Index of the first update skipped by the stopping criterion.
    pub fn first_stop(&self) -> Option<usize> {
        self.records
            .iter()
            .position(|r| r.skipped_reason == Some(SkipReason::StepLengthExceeded))
    }
}

/// Loss and gradient with respect to [`ToyPolicy::params`] for a batch built
/// from `traces`. `grads` are per-token loss gradients from
/// [`grpo_loss_with_grad`].
fn backprop(policy: &ToyPolicy, traces: &[&ToyTrace], grads: &[Vec<f64>], t: f64) -> Vec<f64> {
    let mut grad = vec![0.0; policy.params().len()];
    for (trace, token_grads) in traces.iter().zip(grads) {
        for (&d, &g) in trace.decisions.iter().zip(token_grads) {
            policy.add_decision_grad(d, g, t, &mut grad);
        }
    }
    if !policy.merge_learnable {
        grad[policy.merge_index()] = 0.0;
    }
    grad
}

/// One GRPO update on `policy` from the kept groups. Returns the loss.
fn apply_update(
    policy: &mut ToyPolicy,
    groups: &[(&SampledGroup, Vec<f64>)],
    cfg: &TrainConfig,
    grpo: &GrpoConfig,
) -> Result<f64, TrainError> {
    let mut batch = GrpoBatch::default();
    let mut traces = Vec::new();
    for (sg, advantages) in groups {
        for ((trace, lps), &a) in sg.traces.iter().zip(&sg.log_probs).zip(advantages) {
            batch.responses.push(ResponseLogProbs {
                advantage: a,
                tokens: lps.clone(),
            });
            traces.push(trace);
        }
    }
    let lg = grpo_loss_with_grad(&batch, grpo)?;
    let grad = backprop(policy, &traces, &lg.grad, cfg.temperature);
    let params: Vec<f64> = policy
        .params()
        .iter()
        .zip(&grad)
        .map(|(p, g)| p - cfg.learning_rate * g)
        .collect();
    policy.set_params(&params);
    Ok(lg.loss)
}

/// The GRPO batch obtained by evaluating `policy` on fixed traces.
pub fn policy_batch(
    policy: &ToyPolicy,
    traces: &[ToyTrace],
    advantages: &[f64],
    old: &[Vec<f64>],
    reference: &[Vec<f64>],
    temperature: f64,
) -> GrpoBatch {
    let mut batch = GrpoBatch::default();
    for (j, trace) in traces.iter().enumerate() {
        let current = policy.token_log_probs(trace, temperature);
        batch.responses.push(ResponseLogProbs {
            advantage: advantages[j],
            tokens: current
                .iter()
                .zip(&old[j])
                .zip(&reference[j])
                .map(|((&c, &o), &r)| TokenLogProbs {
                    current: c,
                    old: o,
                    reference: r,
                })
                .collect(),
        });
    }
    batch
}

/// GRPO loss of `policy` on fixed traces, advantages and old/reference
/// log-probs, with its analytic gradient with respect to the parameters.
pub fn policy_loss_and_grad(
    policy: &ToyPolicy,
    traces: &[ToyTrace],
    advantages: &[f64],
    old: &[Vec<f64>],
    reference: &[Vec<f64>],
    temperature: f64,
    grpo: &GrpoConfig,
) -> Result<(f64, Vec<f64>), TrainError> {
    let batch = policy_batch(policy, traces, advantages, old, reference, temperature);
    let lg = grpo_loss_with_grad(&batch, grpo)?;
    let refs: Vec<&ToyTrace> = traces.iter().collect();
    let mut grad = backprop(policy, &refs, &lg.grad, temperature);
    if !policy.merge_learnable {
        // Report the true derivative; freezing is a training-time choice.
        let mut unfrozen = policy.clone();
        unfrozen.merge_learnable = true;
        grad = backprop(&unfrozen, &refs, &lg.grad, temperature);
    }
    Ok((lg.loss, grad))
}

/// Checks that every problem in the bank fits `policy`.
pub fn validate_problems(policy: &ToyPolicy, problems: &[ProblemSpec]) -> Result<(), TrainError> {
    if problems.is_empty() {
        return Err(TrainError::ConfigInvalid("problem bank is empty".into()));
    }
    if policy.max_steps == 0 || policy.verbosity_words.is_empty() {
        return Err(TrainError::ConfigInvalid(
            "policy has no step or verbosity choices".into(),
        ));
    }
    for p in problems {
        if p.required_steps == 0
            || p.required_steps > policy.max_steps
            || !(0.0..=1.0).contains(&p.solve_rate)
        {
            return Err(TrainError::ConfigInvalid(format!(
                "problem `{}` is malformed",
                p.id
            )));
        }
    }
    Ok(())
}

/// Runs the full loop: sample, filter all-wrong groups, apply the stopping
/// criterion, score, normalize and take one gradient step per iteration.
pub fn train(
    policy: ToyPolicy,
    problems: &[ProblemSpec],
    cfg: &TrainConfig,
    reward: &RewardConfig,
    grpo: &GrpoConfig,
) -> Result<TrainRun, TrainError> {
    train_with_observer(policy, problems, cfg, reward, grpo, |_, _| {})
}

/// Like [`train`], calling `observe` after every iteration with the record
/// and the policy as it stands after that iteration.
pub fn train_with_observer(
    mut policy: ToyPolicy,
    problems: &[ProblemSpec],
    cfg: &TrainConfig,
    reward: &RewardConfig,
    grpo: &GrpoConfig,
    mut observe: impl FnMut(&TrainRecord, &ToyPolicy),
) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    reward.validate()?;
    grpo.validate()?;
    validate_problems(&policy, problems)?;
    let reference = policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut consecutive_stops = 0usize;

    for update_index in 0..cfg.max_updates {
        let mut sampled = Vec::with_capacity(cfg.batch_prompts);
        for i in 0..cfg.batch_prompts {
            let problem = &problems[(update_index * cfg.batch_prompts + i) % problems.len()];
            sampled.push(sample_group(
                &policy, &reference, problem, cfg, reward, &mut rng,
            )?);
        }

        let mut kept = Vec::new();
        let mut reward_sum = 0.0;
        let mut reward_count = 0usize;
        for sg in &sampled {
            let score = score_group(&sg.group, reward);
            if score.decision == SkipDecision::Skip {
                continue;
            }
            let totals = score.totals();
            reward_sum += totals.iter().sum::<f64>();
            reward_count += totals.len();
            kept.push((sg, normalize_advantages(&totals).0));
        }

        let skipped_reason = if kept.is_empty() {
            Some(SkipReason::AllWrong)
        } else if kept
            .iter()
            .any(|(sg, _)| check_stopping(&sg.group, cfg) == StopDecision::SkipUpdate)
        {
            Some(SkipReason::StepLengthExceeded)
        } else {
            None
        };
        if skipped_reason.is_none() {
            apply_update(&mut policy, &kept, cfg, grpo)?;
        }
        consecutive_stops = match skipped_reason {
            Some(SkipReason::StepLengthExceeded) => consecutive_stops + 1,
            _ => 0,
        };
        let halted = consecutive_stops >= cfg.consecutive_skip_halt;

        let all: Vec<&Response> = sampled.iter().flat_map(|sg| &sg.group.responses).collect();
        let correct = sampled
            .iter()
            .flat_map(|sg| &sg.group.correct)
            .filter(|&&c| c)
            .count();
        let n = all.len() as f64;
        let record = TrainRecord {
            update_index,
            mean_steps: all.iter().map(|r| count_steps(r) as f64).sum::<f64>() / n,
            mean_tokens: all.iter().map(|r| r.token_count as f64).sum::<f64>() / n,
            max_step_tokens: all.iter().map(|r| r.max_step_tokens()).max().unwrap_or(0),
            mean_reward: (reward_count > 0).then(|| reward_sum / reward_count as f64),
            accuracy: correct as f64 / n,
            skipped_reason,
            halted,
        };
        observe(&record, &policy);
        records.push(record);
        if halted {
            break;
        }
    }
    Ok(TrainRun { records, policy })
}
