//! Command-line surface: rollout records, run configuration and the
//! `segment`, `score`, `train-toy`, `aes` and `profile` commands.
//!
//! Inputs and record outputs are JSONL (one object per line). Every output
//! file is written to a temporary file next to its destination and renamed
//! into place. Exit codes: 0 success, 1 usage or configuration error, 2 data
//! error, 3 external-service error.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::ExactMatch;
use crate::embedding::{Embedder, HashingEmbedder, HttpEmbedder};
use crate::evaluation::{aes, summarize, AesConfig, AesReport, EvalError, EvalSummary};
use crate::grpo::{normalize_advantages, GrpoConfig};
use crate::profiler::{
    keyword_judge, profile, HttpJudge, JudgeClient, ProfileConfig, ProfileError, ProfileReport,
};
use crate::reward::{score_group, Ablation, Group, RewardBreakdown, RewardConfig, SkipDecision};
use crate::segmentation::{
    count_steps, Response, SegmentError, SegmentationConfig, Step, Strategy,
};
use crate::toy::{
    default_problems, train_with_observer, validate_problems, ProblemSpec, ToyInit, ToyPolicy,
    TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
    #[error("external service: {0}")]
    External(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Parse { .. } | CliError::Io { .. } | CliError::Data(_) => 2,
            CliError::External(_) => 3,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl From<SegmentError> for CliError {
    fn from(e: SegmentError) -> Self {
        match e {
            SegmentError::EmbedderUnavailable(_) => CliError::External(e.to_string()),
            SegmentError::InvalidConfig(m) => CliError::Config(m),
        }
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::JudgeUnavailable(_) => CliError::External(e.to_string()),
            ProfileError::Config(m) => CliError::Config(m),
            ProfileError::Segment(s) => s.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::ConfigInvalid(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// One sampled response to a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub prompt_id: String,
    #[serde(default)]
    pub prompt_text: String,
    pub gold_answer: String,
    #[serde(default)]
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<usize>,
}

/// A rollout annotated by `segment`; `score` reuses the stored steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedRecord {
    #[serde(flatten)]
    pub rollout: RolloutRecord,
    pub steps: Vec<Step>,
    pub step_count: usize,
    pub max_step_tokens: usize,
}

#[derive(Debug, Deserialize)]
struct ScoreInput {
    #[serde(flatten)]
    rollout: RolloutRecord,
    #[serde(default)]
    steps: Option<Vec<Step>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// OpenAI-compatible endpoint from `STEP_PRUNER_EMBED_*`.
    #[default]
    Http,
    /// Offline hashed bag of words.
    Hashing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    /// Chat-completions endpoint from `STEP_PRUNER_JUDGE_*`.
    #[default]
    Http,
    /// Offline keyword heuristic.
    Keyword,
}

/// Everything a run depends on. `seed` overrides `train.seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub segmentation: SegmentationConfig,
    pub embedder: EmbedderKind,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
    pub train: TrainConfig,
    pub toy: ToyInit,
    pub problems: Vec<ProblemSpec>,
    pub aes: AesConfig,
    pub profiler: ProfileConfig,
    pub judge: JudgeKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/toy"),
            segmentation: SegmentationConfig::default(),
            embedder: EmbedderKind::default(),
            reward: RewardConfig::default(),
            grpo: GrpoConfig::default(),
            train: TrainConfig::default(),
            toy: ToyInit::default(),
            problems: default_problems(),
            aes: AesConfig::default(),
            profiler: ProfileConfig::default(),
            judge: JudgeKind::default(),
        }
    }
}

impl RunConfig {
    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.segmentation.validate()?;
        self.reward
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.grpo
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate()?;
        validate_problems(&ToyPolicy::new(&self.toy), &self.problems)?;
        let a = &self.aes;
        if ![a.phi, a.eta, a.theta]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            return Err(CliError::Config("aes weights must be positive".into()));
        }
        if self.profiler.batch_size == 0 || self.profiler.max_in_flight == 0 {
            return Err(CliError::Config(
                "profiler batch_size and max_in_flight must be positive".into(),
            ));
        }
        Ok(())
    }

    fn embedder(&self) -> Result<Option<Box<dyn Embedder>>, CliError> {
        if self.segmentation.strategy != Strategy::SimilarityMerge {
            return Ok(None);
        }
        Ok(Some(match self.embedder {
            EmbedderKind::Hashing => Box::new(HashingEmbedder::default()),
            EmbedderKind::Http => {
                Box::new(HttpEmbedder::from_env().map_err(|e| CliError::External(e.to_string()))?)
            }
        }))
    }
}

/// Reads a JSONL file, skipping blank lines; errors name the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item).expect("records serialize"));
        s.push('\n');
    }
    s
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

/// JSONL outputs record the resolved config in `<output>.config.json`.
fn write_provenance(output: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let mut name = output.as_os_str().to_owned();
    name.push(".config.json");
    write_atomic(Path::new(&name), to_json(cfg).as_bytes())
}

fn check_prompt_id(path: &Path, line: usize, record: &RolloutRecord) -> Result<(), CliError> {
    if record.prompt_id.is_empty() {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line,
            message: "prompt_id is empty".into(),
        });
    }
    Ok(())
}

fn response_of(
    record: &RolloutRecord,
    cfg: &RunConfig,
    embedder: Option<&dyn Embedder>,
) -> Result<Response, CliError> {
    let mut r = Response::from_raw(
        &record.prompt_id,
        &record.response_text,
        &cfg.segmentation,
        embedder,
    )?;
    if let Some(t) = record.token_count {
        r.token_count = t;
    }
    Ok(r)
}

/// Annotates each rollout with its steps. Returns the number of records.
pub fn cmd_segment(input: &Path, output: &Path, cfg: &RunConfig) -> Result<usize, CliError> {
    let records: Vec<RolloutRecord> = read_jsonl(input)?;
    let embedder = cfg.embedder()?;
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        check_prompt_id(input, i + 1, &rec)?;
        let r = response_of(&rec, cfg, embedder.as_deref())?;
        out.push(SegmentedRecord {
            step_count: count_steps(&r),
            max_step_tokens: r.max_step_tokens(),
            rollout: RolloutRecord {
                token_count: Some(r.token_count),
                ..rec
            },
            steps: r.steps,
        });
    }
    write_atomic(output, to_jsonl(&out).as_bytes())?;
    write_provenance(output, cfg)?;
    Ok(out.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub step_count: usize,
    pub token_count: usize,
    pub correct: bool,
    pub reward: RewardBreakdown,
}

/// Rewards for one prompt's group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub prompt_id: String,
    pub s_star: Option<usize>,
    pub skipped: bool,
    pub responses: Vec<ScoredResponse>,
    /// Absent for skipped groups.
    pub advantages: Option<Vec<f64>>,
}

/// Groups records by `prompt_id` (first-appearance order) and scores each
/// group. Records that already carry `steps` are not re-segmented.
pub fn cmd_score(
    input: &Path,
    output: &Path,
    cfg: &RunConfig,
) -> Result<Vec<GroupReport>, CliError> {
    let records: Vec<ScoreInput> = read_jsonl(input)?;
    let embedder = cfg.embedder()?;
    let mut groups: Vec<(String, String, Vec<Response>)> = Vec::new();
    for (i, rec) in records.into_iter().enumerate() {
        check_prompt_id(input, i + 1, &rec.rollout)?;
        let ro = &rec.rollout;
        let response = match rec.steps {
            Some(steps) => {
                let tokens = ro
                    .token_count
                    .unwrap_or_else(|| cfg.segmentation.tokenizer.count(&ro.response_text));
                Response::from_parts(&ro.prompt_id, &ro.response_text, steps, tokens)
            }
            None => response_of(ro, cfg, embedder.as_deref())?,
        };
        match groups.iter_mut().find(|g| g.0 == ro.prompt_id) {
            Some(g) => {
                if g.1 != ro.gold_answer {
                    return Err(CliError::Parse {
                        path: input.to_path_buf(),
                        line: i + 1,
                        message: format!("gold_answer differs within prompt `{}`", ro.prompt_id),
                    });
                }
                g.2.push(response);
            }
            None => groups.push((ro.prompt_id.clone(), ro.gold_answer.clone(), vec![response])),
        }
    }
    let reports: Vec<GroupReport> = groups
        .into_iter()
        .map(|(id, gold, responses)| {
            let group = Group::score(id, gold, responses, &ExactMatch, &cfg.reward);
            let score = score_group(&group, &cfg.reward);
            let skipped = score.decision == SkipDecision::Skip;
            GroupReport {
                advantages: (!skipped).then(|| normalize_advantages(&score.totals()).0),
                responses: group
                    .responses
                    .iter()
                    .zip(&group.correct)
                    .zip(&score.breakdowns)
                    .map(|((r, &correct), b)| ScoredResponse {
                        step_count: count_steps(r),
                        token_count: r.token_count,
                        correct,
                        reward: *b,
                    })
                    .collect(),
                prompt_id: group.prompt_id,
                s_star: score.s_star,
                skipped,
            }
        })
        .collect();
    write_atomic(output, to_jsonl(&reports).as_bytes())?;
    write_provenance(output, cfg)?;
    Ok(reports)
}

/// Trains the toy policy and writes `records.jsonl`, `policy.json` and
/// `config.json` into `cfg.output_dir`.
pub fn cmd_train_toy(cfg: &RunConfig) -> Result<crate::toy::TrainRun, CliError> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let run = train_with_observer(
        ToyPolicy::new(&cfg.toy),
        &cfg.problems,
        &train_cfg,
        &cfg.reward,
        &cfg.grpo,
        |_, _| {},
    )?;
    let dir = &cfg.output_dir;
    write_atomic(
        &dir.join("records.jsonl"),
        to_jsonl(&run.records).as_bytes(),
    )?;
    write_atomic(&dir.join("policy.json"), to_json(&run.policy).as_bytes())?;
    write_atomic(&dir.join("config.json"), to_json(cfg).as_bytes())?;
    Ok(run)
}

/// Reads an [`EvalSummary`] JSON object, or summarizes a rollout JSONL file
/// by exact-match correctness and token count.
pub fn load_summary(path: &Path, cfg: &RunConfig) -> Result<EvalSummary, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    if let Ok(s) = serde_json::from_str::<EvalSummary>(&text) {
        return Ok(s);
    }
    let records: Vec<RolloutRecord> = read_jsonl(path)?;
    let mut samples = Vec::with_capacity(records.len());
    for rec in &records {
        let r = response_of(rec, cfg, None)?;
        let correct = crate::reward::accuracy_reward(&r, &rec.gold_answer, &ExactMatch) == 1.0;
        samples.push((correct, r.token_count));
    }
    Ok(summarize(samples)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AesOutput {
    pub model: EvalSummary,
    pub baseline: EvalSummary,
    pub report: AesReport,
    pub config: AesConfig,
}

pub fn cmd_aes(
    model: &Path,
    baseline: &Path,
    output: &Path,
    cfg: &RunConfig,
) -> Result<AesOutput, CliError> {
    let seg_only = RunConfig {
        segmentation: SegmentationConfig::with_strategy(Strategy::Paragraph),
        ..cfg.clone()
    };
    let m = load_summary(model, &seg_only)?;
    let b = load_summary(baseline, &seg_only)?;
    let out = AesOutput {
        report: aes(&b, &m, &cfg.aes)?,
        model: m,
        baseline: b,
        config: cfg.aes,
    };
    write_atomic(output, to_json(&out).as_bytes())?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileOutput<'a> {
    pub report: ProfileReport,
    pub config: &'a RunConfig,
}

pub fn cmd_profile(
    input: &Path,
    output: &Path,
    cfg: &RunConfig,
) -> Result<ProfileReport, CliError> {
    let records: Vec<RolloutRecord> = read_jsonl(input)?;
    let mut responses = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        check_prompt_id(input, i + 1, rec)?;
        responses.push(response_of(rec, cfg, None)?);
    }
    let judge: Box<dyn JudgeClient> = match cfg.judge {
        JudgeKind::Keyword => Box::new(keyword_judge()),
        JudgeKind::Http => {
            Box::new(HttpJudge::from_env().map_err(|e| CliError::External(e.to_string()))?)
        }
    };
    let report = profile(&responses, judge.as_ref(), &cfg.profiler)?;
    let out = ProfileOutput {
        report,
        config: cfg,
    };
    write_atomic(output, to_json(&out).as_bytes())?;
    Ok(out.report)
}

#[derive(Debug, Parser)]
#[command(
    name = "step-pruner",
    version,
    about = "Step-aware reward tooling for reasoning traces"
)]
pub struct Cli {
    /// Run configuration (TOML or JSON); flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split each response into reasoning steps.
    Segment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long, value_enum)]
        embedder: Option<EmbedderKind>,
    },
    /// Reward every response, grouped by prompt_id.
    Score {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        token_penalty: Option<f64>,
        /// CR, COS, WRM or SAW; repeatable.
        #[arg(long, allow_hyphen_values = true)]
        ablation: Vec<Ablation>,
    },
    /// Train the simulated policy and write a run directory.
    TrainToy {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_updates: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        ablation: Vec<Ablation>,
        /// Keep the merge logit fixed.
        #[arg(long)]
        freeze_merge: bool,
    },
    /// Accuracy-Efficiency Score of a model against a baseline.
    Aes {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sentence-category profile of the reasoning in a rollout file.
    Profile {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        judge: Option<JudgeKind>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
}

impl Cli {
    /// Loads the config file (or defaults) and applies flag overrides.
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        match &self.command {
            Command::Segment {
                strategy, embedder, ..
            } => {
                if let Some(s) = strategy {
                    cfg.segmentation.strategy = *s;
                }
                if let Some(e) = embedder {
                    cfg.embedder = *e;
                }
            }
            Command::Score {
                strategy,
                beta,
                token_penalty,
                ablation,
                ..
            } => {
                if let Some(s) = strategy {
                    cfg.segmentation.strategy = *s;
                }
                if let Some(b) = beta {
                    cfg.reward.beta = *b;
                }
                if let Some(w) = token_penalty {
                    cfg.reward.token_penalty_weight = *w;
                }
                cfg.reward.ablations.extend(ablation.iter().copied());
            }
            Command::TrainToy {
                out,
                max_updates,
                learning_rate,
                beta,
                ablation,
                freeze_merge,
            } => {
                if let Some(o) = out {
                    cfg.output_dir = o.clone();
                }
                if let Some(m) = max_updates {
                    cfg.train.max_updates = *m;
                }
                if let Some(lr) = learning_rate {
                    cfg.train.learning_rate = *lr;
                }
                if let Some(b) = beta {
                    cfg.reward.beta = *b;
                }
                cfg.reward.ablations.extend(ablation.iter().copied());
                if *freeze_merge {
                    cfg.toy.merge_learnable = false;
                }
            }
            Command::Aes { .. } => {}
            Command::Profile {
                judge, batch_size, ..
            } => {
                if let Some(j) = judge {
                    cfg.judge = *j;
                }
                if let Some(b) = batch_size {
                    cfg.profiler.batch_size = *b;
                }
            }
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs a parsed command, returning the line to print on success.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = cli.resolve_config()?;
    Ok(match &cli.command {
        Command::Segment { input, output, .. } => {
            let n = cmd_segment(input, output, &cfg)?;
            format!("segmented {n} records into {}", output.display())
        }
        Command::Score { input, output, .. } => {
            let groups = cmd_score(input, output, &cfg)?;
            let skipped = groups.iter().filter(|g| g.skipped).count();
            format!(
                "scored {} groups ({skipped} skipped) into {}",
                groups.len(),
                output.display()
            )
        }
        Command::TrainToy { .. } => {
            let run = cmd_train_toy(&cfg)?;
            let last = run.records.last();
            format!(
                "{} updates, final mean steps {:.2}, halted {} -> {}",
                run.records.len(),
                last.map_or(0.0, |r| r.mean_steps),
                run.halted(),
                cfg.output_dir.display()
            )
        }
        Command::Aes {
            model,
            baseline,
            output,
        } => cmd_aes(model, baseline, output, &cfg)?.report.to_string(),
        Command::Profile { input, output, .. } => cmd_profile(input, output, &cfg)?.to_string(),
    })
}
