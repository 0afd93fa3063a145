//! Group-relative advantages and the clipped, KL-penalised policy update.
//!
//! The objective for a batch of groups is
//! `mean_b mean_i min(R_i A_i, clip(R_i, 1-eps, 1+eps) A_i) - beta * KL`,
//! where `R_i` is the trajectory-level ratio `exp(logp - logp_old)` and KL is
//! the mean over trajectories of the per-context KL to the reference policy.
//! One plain gradient-ascent step is taken per rollout batch.

use crate::policy::{grad_kl_to_ref, grad_logprob, kl_to_ref, logprob, PolicyParams, SparseGrad, Trajectory};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("group {group}: {trajectories} trajectories but {rewards} rewards")]
    Mismatch { group: usize, trajectories: usize, rewards: usize },
    #[error("non-finite gradient at context {context}; update skipped")]
    NonFinite { context: String },
    #[error("non-finite reward {value} in group {group}")]
    Reward { group: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub adv_std_floor: f64,
    pub temperature: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 10,
            clip_epsilon: 0.2,
            kl_beta: 0.01,
            learning_rate: 0.1,
            adv_std_floor: 1e-8,
            temperature: 1.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let fail = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.group_size < 2 {
            return fail("group_size must be at least 2");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return fail("clip_epsilon must lie in (0, 1)");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return fail("kl_beta must be finite and non-negative");
        }
        // zero is allowed: stats are still computed, parameters stay put
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        if !(self.adv_std_floor > 0.0) {
            return fail("adv_std_floor must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be positive");
        }
        Ok(())
    }
}

/// `(r - mean) / max(pop_std, floor)`; groups whose spread does not exceed
/// the floor get all-zero advantages.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std.max(std_floor)).collect())
}

pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGroup {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl TrajectoryGroup {
    pub fn new(trajectories: Vec<Trajectory>, rewards: Vec<f64>, std_floor: f64) -> Result<Self, GrpoError> {
        if trajectories.len() != rewards.len() {
            return Err(GrpoError::Mismatch {
                group: 0,
                trajectories: trajectories.len(),
                rewards: rewards.len(),
            });
        }
        let advantages = compute_advantages(&rewards, std_floor)?;
        Ok(TrajectoryGroup { trajectories, rewards, advantages })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_reward: f64,
    pub mean_ratio: f64,
    /// Share of trajectories whose ratio lies outside the clip window.
    pub clip_fraction: f64,
    /// KL to the reference before the step.
    pub kl: f64,
    pub objective: f64,
}

fn add_scaled(acc: &mut SparseGrad, g: SparseGrad, scale: f64) {
    for (k, row) in g {
        let dst = acc.entry(k).or_insert_with(|| vec![0.0; row.len()]);
        for (d, v) in dst.iter_mut().zip(row) {
            *d += scale * v;
        }
    }
}

fn batch_size(groups: &[TrajectoryGroup]) -> usize {
    groups.iter().map(|g| g.trajectories.len()).sum()
}

/// Value of the penalised surrogate objective at `params`.
pub fn objective(params: &PolicyParams, reference: &PolicyParams, groups: &[TrajectoryGroup], config: &GrpoConfig) -> f64 {
    if groups.is_empty() {
        return 0.0;
    }
    let mut pg = 0.0;
    let mut kl = 0.0;
    for g in groups {
        let mut inner = 0.0;
        for (t, a) in g.trajectories.iter().zip(&g.advantages) {
            let ratio = (logprob(params, t, config.temperature) - t.logprob_old).exp();
            inner += clipped_surrogate(ratio, *a, config.clip_epsilon);
            kl += kl_to_ref(params, reference, &t.slots, config.temperature);
        }
        pg += inner / g.trajectories.len() as f64;
    }
    pg / groups.len() as f64 - config.kl_beta * kl / batch_size(groups).max(1) as f64
}

/// Analytic gradient of [`objective`] plus the step statistics.
pub fn objective_gradient(
    params: &PolicyParams,
    reference: &PolicyParams,
    groups: &[TrajectoryGroup],
    config: &GrpoConfig,
) -> (SparseGrad, UpdateStats) {
    let mut grad = SparseGrad::new();
    let mut stats = UpdateStats::default();
    let n_traj = batch_size(groups);
    if groups.is_empty() || n_traj == 0 {
        return (grad, stats);
    }
    let t = config.temperature;
    let eps = config.clip_epsilon;
    let mut clipped = 0usize;
    let mut pg = 0.0;
    let mut kl = 0.0;
    let mut reward_sum = 0.0;
    let mut ratio_sum = 0.0;
    for g in groups {
        let w = 1.0 / (groups.len() as f64 * g.trajectories.len() as f64);
        for ((traj, adv), r) in g.trajectories.iter().zip(&g.advantages).zip(&g.rewards) {
            let ratio = (logprob(params, traj, t) - traj.logprob_old).exp();
            ratio_sum += ratio;
            reward_sum += r;
            if (ratio - 1.0).abs() > eps {
                clipped += 1;
            }
            pg += w * clipped_surrogate(ratio, *adv, eps);
            // the unclipped branch is the active one iff its term is the min
            let unclipped_active = ratio * adv <= ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
            let outside = ratio < 1.0 - eps || ratio > 1.0 + eps;
            if *adv != 0.0 && (unclipped_active || !outside) {
                add_scaled(&mut grad, grad_logprob(params, traj, t), w * adv * ratio);
            }
            kl += kl_to_ref(params, reference, &traj.slots, t);
            if config.kl_beta > 0.0 {
                add_scaled(
                    &mut grad,
                    grad_kl_to_ref(params, reference, &traj.slots, t),
                    -config.kl_beta / n_traj as f64,
                );
            }
        }
    }
    let n = n_traj as f64;
    stats.mean_reward = reward_sum / n;
    stats.mean_ratio = ratio_sum / n;
    stats.clip_fraction = clipped as f64 / n;
    stats.kl = kl / n;
    stats.objective = pg - config.kl_beta * stats.kl;
    (grad, stats)
}

/// One ascent step. On a non-finite gradient the input parameters are
/// returned untouched inside the error path.
pub fn update_step(
    params: &PolicyParams,
    reference: &PolicyParams,
    groups: &[TrajectoryGroup],
    config: &GrpoConfig,
) -> Result<(PolicyParams, UpdateStats), GrpoError> {
    config.validate()?;
    for (i, g) in groups.iter().enumerate() {
        if g.trajectories.len() != g.rewards.len() || g.advantages.len() != g.rewards.len() {
            return Err(GrpoError::Mismatch {
                group: i,
                trajectories: g.trajectories.len(),
                rewards: g.rewards.len(),
            });
        }
        if let Some(v) = g.rewards.iter().find(|r| !r.is_finite()) {
            return Err(GrpoError::Reward { group: i, value: *v });
        }
    }
    let (grad, stats) = objective_gradient(params, reference, groups, config);
    if let Some((k, _)) = grad.iter().find(|(_, row)| row.iter().any(|v| !v.is_finite())) {
        return Err(GrpoError::NonFinite { context: k.to_string() });
    }
    let mut next = params.clone();
    if config.learning_rate > 0.0 {
        next.apply(&grad, config.learning_rate);
    }
    Ok((next, stats))
}
