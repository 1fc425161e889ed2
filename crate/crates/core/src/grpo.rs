//! Group-relative advantages and the clipped, KL-regularized GRPO loss.
//!
//! For `n` responses with per-token log-probabilities under the current,
//! behaviour (old) and reference policies:
//!
//! ```text
//! loss = -(1/n) * sum_j (1/t_j) * sum_k [ W_jk - gamma * KL_jk ]
//! W_jk  = min(ratio * A_j, clip(ratio, 1 - eps, 1 + eps) * A_j)
//! ratio = exp(logp_current - logp_old)
//! KL_jk = exp(logp_ref - logp_current) - (logp_ref - logp_current) - 1
//! ```
//!
//! Sums run in a fixed order so results are reproducible bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rewards whose population std falls below this yield all-zero advantages.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("non-finite or positive log-probability at response {response}, token {token}")]
    NonFiniteInput { response: usize, token: usize },
    #[error("response {0} has no tokens")]
    EmptyResponse(usize),
    #[error("non-finite advantage for response {0}")]
    NonFiniteAdvantage(usize),
    #[error("invalid GRPO config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub clip_epsilon: f64,
    pub kl_gamma: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_gamma: 0.001,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(GrpoError::InvalidConfig(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if !(self.kl_gamma >= 0.0 && self.kl_gamma.is_finite()) {
            return Err(GrpoError::InvalidConfig(format!(
                "kl_gamma must be finite and nonnegative, got {}",
                self.kl_gamma
            )));
        }
        Ok(())
    }
}

/// Group-normalized advantages, one per response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdvantageVector(pub Vec<f64>);

impl AdvantageVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `(R_j - mean(R)) / std(R)` with the population std. Constant rewards
/// carry no signal and map to zeros.
pub fn normalize_advantages(rewards: &[f64]) -> AdvantageVector {
    let n = rewards.len();
    if n == 0 {
        return AdvantageVector(Vec::new());
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std.is_nan() || std < STD_FLOOR {
        return AdvantageVector(vec![0.0; n]);
    }
    AdvantageVector(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Log-likelihoods of one token under the three policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub current: f64,
    pub old: f64,
    pub reference: f64,
}

impl TokenLogProbs {
    /// All three policies agree.
    pub fn on_policy(logp: f64) -> Self {
        Self {
            current: logp,
            old: logp,
            reference: logp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseLogProbs {
    pub advantage: f64,
    pub tokens: Vec<TokenLogProbs>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoBatch {
    pub responses: Vec<ResponseLogProbs>,
}

impl GrpoBatch {
    pub fn validate(&self) -> Result<(), GrpoError> {
        for (j, r) in self.responses.iter().enumerate() {
            if r.tokens.is_empty() {
                return Err(GrpoError::EmptyResponse(j));
            }
            if !r.advantage.is_finite() {
                return Err(GrpoError::NonFiniteAdvantage(j));
            }
            for (k, t) in r.tokens.iter().enumerate() {
                let ok = [t.current, t.old, t.reference]
                    .iter()
                    .all(|lp| lp.is_finite() && *lp <= 0.0);
                if !ok {
                    return Err(GrpoError::NonFiniteInput {
                        response: j,
                        token: k,
                    });
                }
            }
        }
        Ok(())
    }
}

/// k3 estimator of KL(current || reference) from one sample; always >= 0.
pub fn kl_estimate(logp_current: f64, logp_reference: f64) -> f64 {
    let x = logp_reference - logp_current;
    // expm1 keeps the tiny-|x| case from rounding below zero.
    (x.exp_m1() - x).max(0.0)
}

/// Loss and its derivative with respect to every `logp_current`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub loss: f64,
    /// `d loss / d logp_current`, shaped like the batch.
    pub grad: Vec<Vec<f64>>,
}

pub fn grpo_loss(batch: &GrpoBatch, cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    grpo_loss_with_grad(batch, cfg).map(|lg| lg.loss)
}

pub fn grpo_loss_with_grad(batch: &GrpoBatch, cfg: &GrpoConfig) -> Result<LossWithGrad, GrpoError> {
    cfg.validate()?;
    batch.validate()?;
    let n = batch.responses.len();
    if n == 0 {
        return Ok(LossWithGrad {
            loss: 0.0,
            grad: Vec::new(),
        });
    }
    let (lo, hi) = (1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n);
    for resp in &batch.responses {
        let t = resp.tokens.len() as f64;
        let a = resp.advantage;
        let mut inner = 0.0;
        let mut g = Vec::with_capacity(resp.tokens.len());
        for tok in &resp.tokens {
            let ratio = (tok.current - tok.old).exp();
            let unclipped = ratio * a;
            let clipped = ratio.clamp(lo, hi) * a;
            let (w, dw) = if unclipped <= clipped {
                (unclipped, unclipped)
            } else {
                (clipped, 0.0)
            };
            let x = tok.reference - tok.current;
            let kl = kl_estimate(tok.current, tok.reference);
            // d KL / d logp_current = 1 - exp(ref - current)
            let dkl = -x.exp_m1();
            inner += w - cfg.kl_gamma * kl;
            g.push(-(dw - cfg.kl_gamma * dkl) / (n as f64 * t));
        }
        total += inner / t;
        grad.push(g);
    }
    Ok(LossWithGrad {
        loss: -total / n as f64,
        grad,
    })
}
