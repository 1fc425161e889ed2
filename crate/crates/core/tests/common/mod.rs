//! Helpers shared by the integration tests.
#![allow(dead_code)]

use step_pruner::grpo::GrpoConfig;
use step_pruner::reward::{Group, RewardConfig};
use step_pruner::segmentation::{Response, Step};
use step_pruner::toy::{default_problems, train, ToyInit, ToyPolicy, TrainConfig, TrainRun};

/// A response with `steps` one-word paragraphs.
pub fn response(steps: usize) -> Response {
    let parts: Vec<Step> = (0..steps)
        .map(|index| Step {
            index,
            text: format!("s{index}"),
            token_count: 1,
        })
        .collect();
    let think = parts
        .iter()
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join("\n\n");
    Response::from_parts("p", format!("<think>{think}</think>"), parts, steps + 1)
}

pub fn group(steps: &[usize], correct: &[bool], cfg: &RewardConfig) -> Group {
    Group::with_correctness(
        "p",
        "1",
        steps.iter().map(|&s| response(s)).collect(),
        correct.to_vec(),
        cfg,
    )
}

pub fn toy_run(seed: u64, reward: &RewardConfig) -> TrainRun {
    toy_run_with(seed, reward, &ToyInit::default(), &TrainConfig::default())
}

pub fn toy_run_with(
    seed: u64,
    reward: &RewardConfig,
    init: &ToyInit,
    cfg: &TrainConfig,
) -> TrainRun {
    let cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    train(
        ToyPolicy::new(init),
        &default_problems(),
        &cfg,
        reward,
        &GrpoConfig::default(),
    )
    .expect("toy training runs")
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Linear-interpolated quantile, `q` in [0, 1].
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Mean `mean_steps` over records `a..b` of a run.
pub fn window_steps(run: &TrainRun, a: usize, b: usize) -> f64 {
    let r = &run.records[a..b];
    r.iter().map(|x| x.mean_steps).sum::<f64>() / r.len() as f64
}

/// Mean sampled accuracy over the last `k` records.
pub fn tail_accuracy(run: &TrainRun, k: usize) -> f64 {
    let r = &run.records[run.records.len().saturating_sub(k)..];
    r.iter().map(|x| x.accuracy).sum::<f64>() / r.len() as f64
}

pub fn bits(params: &[f64]) -> Vec<u64> {
    params.iter().map(|p| p.to_bits()).collect()
}

/// Reward totals by direct case analysis, `None` for a skipped group.
/// Written independently of the library's reward code.
pub fn oracle_totals(
    steps: &[usize],
    correct: &[bool],
    beta: f64,
    ablations: &std::collections::BTreeSet<step_pruner::reward::Ablation>,
) -> Option<Vec<f64>> {
    use std::cmp::Ordering::*;
    use step_pruner::reward::Ablation::*;
    let any_correct = correct.iter().any(|&c| c);
    if !any_correct && !ablations.contains(&NoSkipAllWrong) {
        return None;
    }
    let over_all = ablations.contains(&IncorrectResponsesSetSstar) || !any_correct;
    let s_star = steps
        .iter()
        .zip(correct)
        .filter(|(_, &c)| over_all || c)
        .map(|(&s, _)| s)
        .min()?;
    Some(
        steps
            .iter()
            .zip(correct)
            .map(|(&s, &c)| {
                let acc = if c && !ablations.contains(&DisableCorrectReward) {
                    1.0
                } else {
                    0.0
                };
                let seg: i64 = match (c, s.cmp(&s_star)) {
                    (_, Greater) => -((s - s_star) as i64),
                    (false, Less) if ablations.contains(&UnmaskWrongBrevity) => (s_star - s) as i64,
                    _ => 0,
                };
                acc + beta * seg as f64
            })
            .collect(),
    )
}

/// Every subset of the four ablations.
pub fn ablation_subsets() -> Vec<std::collections::BTreeSet<step_pruner::reward::Ablation>> {
    use step_pruner::reward::Ablation;
    (0..16u8)
        .map(|mask| {
            Ablation::ALL
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, a)| *a)
                .collect()
        })
        .collect()
}

/// Calls `f(steps, correct)` for every group of size `n` with step counts in
/// `0..=max_steps` and every correctness pattern.
pub fn for_each_group(n: usize, max_steps: usize, mut f: impl FnMut(&[usize], &[bool])) {
    let base = max_steps + 1;
    let mut steps = vec![0usize; n];
    let mut correct = vec![false; n];
    for code in 0..base.pow(n as u32) {
        let mut c = code;
        for s in steps.iter_mut() {
            *s = c % base;
            c /= base;
        }
        for pattern in 0..1u32 << n {
            for (i, flag) in correct.iter_mut().enumerate() {
                *flag = pattern >> i & 1 == 1;
            }
            f(&steps, &correct);
        }
    }
}
