//! Step-aware reward shaping for reasoning-model RL.
//!
//! - [`segmentation`]: split `<think>` traces into reasoning steps.
//! - [`reward`]: accuracy, step and token rewards for a group of responses.
//! - [`grpo`]: group-normalized advantages and the clipped GRPO loss.
//! - [`toy`]: a small simulated policy trained end to end with the above.
//! - [`evaluation`]: accuracy/length summaries and the AES score.
//! - [`profiler`]: LLM-judged sentence categories of a reasoning trace.
//! - [`cli_io`]: JSONL records, run configs and the CLI commands.

pub mod answer;
pub mod cli_io;
pub mod embedding;
pub mod evaluation;
pub mod grpo;
pub mod profiler;
pub mod reward;
pub mod segmentation;
pub mod toy;
