use super::targets::AttentionTarget;
use crate::error::{Error, Result};
use crate::policy::Variant;
use crate::tensor::Matrix;

/// Numerically stable `log softmax`.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

/// Cross-entropy of each step's softmax against the teacher index, summed over steps.
pub fn imitation_loss(step_scores: &[Vec<f64>], teacher: &[usize]) -> f64 {
    step_scores
        .iter()
        .zip(teacher)
        .map(|(s, &a)| -log_softmax(s)[a])
        .sum()
}

/// `∂/∂scores` of one step's cross-entropy: `softmax − onehot(a)`.
pub(crate) fn cross_entropy_grad(scores: &[f64], a: usize) -> Vec<f64> {
    let mut g: Vec<f64> = log_softmax(scores).into_iter().map(f64::exp).collect();
    g[a] -= 1.0;
    g
}

/// Return-to-go `R_t = r_t + γ R_{t+1}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlLoss {
    /// `−(1/T) Σ A_t log p_t(a_t)` with the advantage held constant.
    pub policy: f64,
    /// `(1/T) Σ (V_t − R_t)²`, unweighted.
    pub critic: f64,
}

impl RlLoss {
    pub fn total(&self, critic_weight: f64) -> f64 {
        self.policy + critic_weight * self.critic
    }
}

/// Actor-critic loss of one sampled rollout, averaged over its `T` steps.
///
/// `advantages` defaults to `returns − values`; passing them explicitly lets a
/// caller freeze them (the advantage is never differentiated).
pub fn rl_loss(
    step_scores: &[Vec<f64>],
    actions: &[usize],
    returns: &[f64],
    values: &[f64],
    advantages: Option<&[f64]>,
) -> RlLoss {
    let mut policy = 0.0;
    let mut critic = 0.0;
    for t in 0..step_scores.len() {
        let adv = advantages.map_or(returns[t] - values[t], |a| a[t]);
        policy -= adv * log_softmax(&step_scores[t])[actions[t]];
        critic += (values[t] - returns[t]).powi(2);
    }
    let n = step_scores.len().max(1) as f64;
    RlLoss {
        policy: policy / n,
        critic: critic / n,
    }
}

/// `(1/t) Σ_i mean_j (tanh x_ij − g_ij)²` over the `t` attention rows.
pub fn attention_loss(rows: &Matrix, target: &AttentionTarget, t: usize) -> Result<f64> {
    check_attention_shapes(rows, target, t)?;
    let l = rows.cols as f64;
    let sum: f64 = rows
        .data
        .iter()
        .zip(&target.rows.data)
        .map(|(x, g)| (x.tanh() - g).powi(2))
        .sum();
    Ok(sum / (l * t as f64))
}

pub(crate) fn attention_grad(rows: &Matrix, target: &AttentionTarget, t: usize) -> Result<Matrix> {
    check_attention_shapes(rows, target, t)?;
    let c = 2.0 / (rows.cols as f64 * t as f64);
    let data = rows
        .data
        .iter()
        .zip(&target.rows.data)
        .map(|(x, g)| {
            let y = x.tanh();
            c * (y - g) * (1.0 - y * y)
        })
        .collect();
    Ok(Matrix::from_vec(rows.rows, rows.cols, data))
}

fn check_attention_shapes(rows: &Matrix, target: &AttentionTarget, t: usize) -> Result<()> {
    if rows.shape() != target.rows.shape() || rows.rows != t || t == 0 {
        return Err(Error::Shape(format!(
            "attention rows {:?}, target {:?}, t = {t}",
            rows.shape(),
            target.rows.shape()
        )));
    }
    Ok(())
}

/// `λ·il + rl`, plus `α·attn` for the past-action-aware variant.
pub fn total_loss(il: f64, rl: f64, attn: f64, lambda: f64, alpha: f64, variant: Variant) -> f64 {
    let base = lambda * il + rl;
    match variant {
        Variant::Original => base,
        Variant::PastActionAware => base + alpha * attn,
    }
}
