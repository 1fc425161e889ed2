//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs as a plain binary (`harness = false`).

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use common::{
    ablation_subsets, bits, for_each_group, group, median, oracle_totals, tail_accuracy, toy_run,
    toy_run_with, window_steps,
};
use step_pruner::embedding::HashingEmbedder;
use step_pruner::evaluation::{aes, AesConfig, EvalSummary};
use step_pruner::grpo::{
    grpo_loss, kl_estimate, normalize_advantages, GrpoBatch, GrpoConfig, ResponseLogProbs,
    TokenLogProbs,
};
use step_pruner::reward::{total_reward, Ablation, RewardConfig};
use step_pruner::segmentation::{segment, SegmentationConfig, Strategy};
use step_pruner::toy::{
    default_problems, policy_loss_and_grad, sample_group, train, ProblemSpec, SkipReason, ToyInit,
    ToyPolicy, TrainConfig,
};

const SEEDS: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn aes_golden() -> Outcome {
    let cfg = AesConfig::default();
    // (baseline, model, reported score), accuracy in percent and length in tokens.
    let cases = [
        ((91.8, 4053.0), (92.0, 1353.0), 0.67),
        ((91.8, 4053.0), (76.4, 993.0), -0.08),
        ((91.8, 4053.0), (83.6, 1005.0), 0.31),
        ((91.8, 4053.0), (91.6, 2403.0), 0.40),
        ((53.3, 14839.0), (50.0, 4502.0), 0.39),
    ];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for ((ba, bl), (acc, len), reported) in cases {
        let s = aes(&EvalSummary::new(ba, bl), &EvalSummary::new(acc, len), &cfg)
            .unwrap()
            .score;
        worst = worst.max((s - reported).abs());
        parts.push(format!("({acc}, {len}) vs ({ba}, {bl}) {s:.3}"));
    }
    outcome(
        worst <= 0.01,
        format!("{} (max |diff| {worst:.4})", parts.join(", ")),
    )
}

fn reward_oracle() -> Outcome {
    let (mut checked, mut mismatches) = (0usize, 0usize);
    for ablations in ablation_subsets() {
        let cfg = RewardConfig {
            ablations: ablations.clone(),
            ..RewardConfig::default()
        };
        for n in 2..=4 {
            for_each_group(n, 6, |steps, correct| {
                let g = group(steps, correct, &cfg);
                let expected = oracle_totals(steps, correct, cfg.beta, &ablations);
                for i in 0..n {
                    let ok = match (&expected, total_reward(i, &g, &cfg)) {
                        (Some(t), Ok(b)) => b.total == t[i],
                        (None, Err(_)) => true,
                        _ => false,
                    };
                    checked += 1;
                    mismatches += (!ok) as usize;
                }
            });
        }
    }
    outcome(
        mismatches == 0,
        format!("{checked} response rewards over all groups n=2..4, S in 0..=6, 16 ablation sets; {mismatches} mismatches"),
    )
}

fn advantage_invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=16);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let shift = rng.random_range(-50.0..50.0);
        let scale = rng.random_range(0.01..100.0);
        let a = normalize_advantages(&r).0;
        let shifted = normalize_advantages(&r.iter().map(|x| x + shift).collect::<Vec<_>>()).0;
        let scaled = normalize_advantages(&r.iter().map(|x| x * scale).collect::<Vec<_>>()).0;
        let mean = a.iter().sum::<f64>() / n as f64;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for ((x, y), z) in a.iter().zip(&shifted).zip(&scaled) {
            worst = worst.max((x - y).abs()).max((x - z).abs());
        }
        worst = worst.max(mean.abs()).max((std - 1.0).abs());
    }
    outcome(
        worst <= 1e-9,
        format!("1000 groups, max deviation {worst:.2e}"),
    )
}

fn grpo_numerics() -> Outcome {
    let grpo = GrpoConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // Identity ratio: all three policies agree.
    let mut identity_err: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..10);
        let batch = GrpoBatch {
            responses: (0..n)
                .map(|_| ResponseLogProbs {
                    advantage: rng.random_range(-3.0..3.0),
                    tokens: (0..rng.random_range(1..40))
                        .map(|_| TokenLogProbs::on_policy(rng.random_range(-20.0..0.0)))
                        .collect(),
                })
                .collect(),
        };
        let mean_adv = batch.responses.iter().map(|r| r.advantage).sum::<f64>() / n as f64;
        identity_err = identity_err.max((grpo_loss(&batch, &grpo).unwrap() + mean_adv).abs());
    }

    let kl_min = (0..100_000)
        .map(|_| kl_estimate(rng.random_range(-30.0..0.0), rng.random_range(-30.0..0.0)))
        .fold(f64::INFINITY, f64::min);

    // Finite differences of the loss with respect to the toy policy's logits.
    let problems = default_problems();
    let cfg = TrainConfig::default();
    let reward = RewardConfig::default();
    let reference = ToyPolicy::new(&ToyInit::default());
    let mut fd_err: f64 = 0.0;
    for trial in 0..8 {
        let mut sampler = reference.clone();
        let p0: Vec<f64> = sampler
            .params()
            .iter()
            .map(|p| p + rng.random_range(-1.0..1.0))
            .collect();
        sampler.set_params(&p0);
        let sg = sample_group(
            &sampler,
            &reference,
            &problems[trial % problems.len()],
            &cfg,
            &reward,
            &mut rng,
        )
        .unwrap();
        let advantages: Vec<f64> = (0..sg.traces.len())
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        let old: Vec<Vec<f64>> = sg
            .log_probs
            .iter()
            .map(|l| l.iter().map(|t| t.old).collect())
            .collect();
        let refs: Vec<Vec<f64>> = sg
            .log_probs
            .iter()
            .map(|l| l.iter().map(|t| t.reference).collect())
            .collect();
        let mut current = sampler.clone();
        current.set_params(
            &p0.iter()
                .map(|p| p + rng.random_range(-0.05..0.05))
                .collect::<Vec<_>>(),
        );
        let loss_at = |params: &[f64]| {
            let mut p = current.clone();
            p.set_params(params);
            policy_loss_and_grad(
                &p,
                &sg.traces,
                &advantages,
                &old,
                &refs,
                cfg.temperature,
                &grpo,
            )
            .unwrap()
            .0
        };
        let (_, analytic) = policy_loss_and_grad(
            &current,
            &sg.traces,
            &advantages,
            &old,
            &refs,
            cfg.temperature,
            &grpo,
        )
        .unwrap();
        let theta = current.params();
        let h = 1e-5;
        let (mut diff2, mut norm2) = (0.0, 0.0);
        for k in 0..theta.len() {
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up[k] += h;
            dn[k] -= h;
            let fd = (loss_at(&up) - loss_at(&dn)) / (2.0 * h);
            diff2 += (fd - analytic[k]).powi(2);
            norm2 += analytic[k].powi(2);
        }
        fd_err = fd_err.max(diff2.sqrt() / norm2.sqrt().max(1e-300));
    }
    outcome(
        identity_err <= 1e-12 && kl_min >= 0.0 && fd_err <= 1e-5,
        format!(
            "identity loss |err| {identity_err:.1e}; min KL over 1e5 pairs {kl_min:.1e}; toy gradient rel. err {fd_err:.1e}"
        ),
    )
}

/// Two-sided Welch t-test p-value.
fn welch_p(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let v = x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        (m, v / x.len() as f64)
    };
    let ((ma, sa), (mb, sb)) = (stats(a), stats(b));
    if sa + sb == 0.0 {
        return if ma == mb { 1.0 } else { 0.0 };
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df =
        (sa + sb).powi(2) / (sa.powi(2) / (a.len() - 1) as f64 + sb.powi(2) / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).unwrap();
    2.0 * (1.0 - dist.cdf(t.abs()))
}

fn two_phase() -> Outcome {
    let beta0 = RewardConfig {
        beta: 0.0,
        ..RewardConfig::default()
    };
    let runs: Vec<_> = (0..SEEDS)
        .into_par_iter()
        .map(|s| (toy_run(s, &RewardConfig::default()), toy_run(s, &beta0)))
        .collect();
    let ratios: Vec<f64> = runs
        .iter()
        .map(|(r, _)| {
            let n = r.records.len();
            window_steps(r, n - 10, n) / window_steps(r, 0, 10)
        })
        .collect();
    let acc_default: Vec<f64> = runs.iter().map(|(r, _)| tail_accuracy(r, 50)).collect();
    let acc_beta0: Vec<f64> = runs.iter().map(|(_, r)| tail_accuracy(r, 50)).collect();
    let p = welch_p(&acc_default, &acc_beta0);
    let not_degraded = p >= 0.01 || common::mean(&acc_default) >= common::mean(&acc_beta0);
    let stopped = runs
        .iter()
        .filter(|(r, _)| {
            r.first_stop()
                .is_some_and(|i| i < TrainConfig::default().max_updates)
        })
        .count();
    let ratio = median(&ratios);
    outcome(
        ratio <= 0.6 && not_degraded && stopped * 10 >= 9 * SEEDS as usize,
        format!(
            "median final/initial mean_steps {ratio:.3}; accuracy {:.4} vs beta=0 {:.4} (Welch p {p:.3}); stop fired in {stopped}/{SEEDS}",
            common::mean(&acc_default),
            common::mean(&acc_beta0)
        ),
    )
}

fn ablation_directions() -> Outcome {
    let variants = [
        ("default", RewardConfig::default()),
        (
            "-CR",
            RewardConfig::default().with_ablation(Ablation::DisableCorrectReward),
        ),
        (
            "-WRM",
            RewardConfig::default().with_ablation(Ablation::UnmaskWrongBrevity),
        ),
        (
            "-SAW",
            RewardConfig::default().with_ablation(Ablation::NoSkipAllWrong),
        ),
    ];
    let problems = default_problems();
    let t = TrainConfig::default().temperature;
    // Exact accuracy and expected logical steps of each run's final policy.
    let medians: Vec<(f64, f64)> = variants
        .iter()
        .map(|(_, reward)| {
            let m: Vec<(f64, f64)> = (0..SEEDS)
                .into_par_iter()
                .map(|s| {
                    let metrics = toy_run(s, reward).policy.expected_metrics(&problems, t);
                    (metrics.accuracy, metrics.logical_steps)
                })
                .collect();
            (
                median(&m.iter().map(|x| x.0).collect::<Vec<_>>()),
                median(&m.iter().map(|x| x.1).collect::<Vec<_>>()),
            )
        })
        .collect();
    let chance = ToyInit::default().correctness.guess_rate;
    let (def, cr, wrm, saw) = (medians[0], medians[1], medians[2], medians[3]);
    let cr_ok = cr.0 < (chance + def.0) / 2.0;
    let wrm_ok = wrm.1 < def.1 && wrm.0 < def.0;
    let saw_ok = saw.0 < def.0;
    let line: Vec<String> = variants
        .iter()
        .zip(&medians)
        .map(|((name, _), (acc, steps))| format!("{name} acc {acc:.5} steps {steps:.4}"))
        .collect();
    outcome(
        cr_ok && wrm_ok && saw_ok,
        format!(
            "{} | -CR toward chance {cr_ok}, -WRM shorter and less accurate {wrm_ok}, -SAW less accurate {saw_ok}",
            line.join(", ")
        ),
    )
}

/// Random reasoning-like document.
fn fuzz_doc(rng: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 16] = [
        "so",
        "wait",
        "the",
        "sum",
        "is",
        "x",
        "check",
        "alternatively",
        "3",
        "=",
        "but",
        "hmm",
        "then",
        "n",
        "double-check",
        "factor",
    ];
    const ENDS: [&str; 5] = [".", "?", "!", "", "..."];
    const SEPS: [&str; 5] = ["\n\n", "\n\n\n", "\n \n", "\n", "\n\t\n"];
    let mut doc = String::new();
    for _ in 0..rng.random_range(0..10) {
        for _ in 0..rng.random_range(1..5) {
            let words: Vec<&str> = (0..rng.random_range(1..12))
                .map(|_| WORDS[rng.random_range(0..WORDS.len())])
                .collect();
            doc.push_str(&words.join(" "));
            doc.push_str(ENDS[rng.random_range(0..ENDS.len())]);
            doc.push(' ');
        }
        doc.push_str(SEPS[rng.random_range(0..SEPS.len())]);
    }
    doc
}

fn segmentation_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let embedder = HashingEmbedder::default();
    let texts = |doc: &str, s: Strategy| -> Vec<String> {
        segment(doc, &SegmentationConfig::with_strategy(s), Some(&embedder))
            .unwrap()
            .into_iter()
            .map(|x| x.text)
            .collect()
    };
    let (mut round_trip_fail, mut order_fail) = (0, 0);
    for _ in 0..200 {
        let doc = fuzz_doc(&mut rng);
        let para = texts(&doc, Strategy::Paragraph);
        if texts(&para.join("\n\n"), Strategy::Paragraph) != para {
            round_trip_fail += 1;
        }
        let sentence = texts(&doc, Strategy::Sentence).len();
        let merged = texts(&doc, Strategy::SimilarityMerge).len();
        if !(sentence >= para.len() && para.len() >= merged) {
            order_fail += 1;
        }
    }
    outcome(
        round_trip_fail == 0 && order_fail == 0,
        format!(
            "200 documents: {round_trip_fail} round-trip failures, {order_fail} ordering failures"
        ),
    )
}

fn skip_noops() -> Outcome {
    let init = ToyInit::default();
    let grpo = GrpoConfig::default();
    let start = bits(&ToyPolicy::new(&init).params());

    let all_wrong: Vec<ProblemSpec> = default_problems()
        .into_iter()
        .map(|p| ProblemSpec {
            solve_rate: 0.0,
            ..p
        })
        .collect();
    let cfg = TrainConfig {
        max_updates: 30,
        ..TrainConfig::default()
    };
    let run = train(
        ToyPolicy::new(&init),
        &all_wrong,
        &cfg,
        &RewardConfig::default(),
        &grpo,
    )
    .unwrap();
    let wrong_ok = run
        .records
        .iter()
        .all(|r| r.skipped_reason == Some(SkipReason::AllWrong))
        && bits(&run.policy.params()) == start;

    // Every sampled response has paragraphs above a 10-token limit.
    let cfg = TrainConfig {
        step_length_limit: 10,
        max_updates: 200,
        ..TrainConfig::default()
    };
    let run = toy_run_with(0, &RewardConfig::default(), &init, &cfg);
    let stop_ok = run.records.iter().all(|r| r.skipped_reason.is_some())
        && run.halted()
        && bits(&run.policy.params()) == start;
    outcome(
        wrong_ok && stop_ok,
        format!("all-wrong bank unchanged {wrong_ok}; over-limit groups unchanged and halted after {} updates {stop_ok}", run.records.len()),
    )
}

/// Name, check and time budget in seconds.
type Criterion = (&'static str, fn() -> Outcome, u64);

fn main() {
    let criteria: [Criterion; 8] = [
        ("AES golden values", aes_golden, 1),
        ("reward oracle equivalence", reward_oracle, 10),
        ("advantage invariances", advantage_invariances, 5),
        ("GRPO numerics", grpo_numerics, 30),
        ("two-phase toy dynamics", two_phase, 300),
        ("ablation directions", ablation_directions, 600),
        ("segmentation properties", segmentation_properties, 10),
        ("skip/stop no-ops", skip_noops, 5),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(budget);
        let pass = o.pass && in_time;
        failed += (!pass) as usize;
        println!(
            "{} {name}: {} [{:.2}s of {budget}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
