//! Supervised distillation of searched trajectories and group-relative policy
//! optimization against a frozen reference policy.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{trajectory_reward, RewardConfig, VideoEpisode};
use crate::error::{GlimpseError, Result};
use crate::policy::{sample_trajectory, score_state, PolicyParams, ScoredState};
use crate::seeds::{derive_seed, rng_from};
use crate::state::{Action, Limits, ReasoningState, Trajectory};

/// Episodes addressed by id.
pub struct EpisodeIndex<'a> {
    by_id: HashMap<u64, &'a VideoEpisode>,
}

impl<'a> EpisodeIndex<'a> {
    pub fn new(episodes: &'a [VideoEpisode]) -> Self {
        Self {
            by_id: episodes.iter().map(|e| (e.episode_id, e)).collect(),
        }
    }

    pub fn get(&self, id: u64) -> Result<&'a VideoEpisode> {
        self.by_id.get(&id).copied().ok_or_else(|| GlimpseError::DataIntegrity {
            record: format!("episode {id}"),
            reason: "unknown episode id".into(),
        })
    }
}

/// Reward computation against the full episodes. The policy side of GRPO
/// only ever sees the episodes it is handed, which may be redacted.
pub struct Scorer<'a> {
    truth: EpisodeIndex<'a>,
    reward: RewardConfig,
}

impl<'a> Scorer<'a> {
    pub fn new(truth: &'a [VideoEpisode], reward: RewardConfig) -> Self {
        Self {
            truth: EpisodeIndex::new(truth),
            reward,
        }
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }

    /// Stores and returns the composite reward of an answered trajectory.
    pub fn score(&self, traj: &mut Trajectory) -> Result<f64> {
        trajectory_reward(traj, self.truth.get(traj.episode_id)?, &self.reward)
    }

    pub fn is_correct(&self, traj: &Trajectory) -> Result<bool> {
        let ep = self.truth.get(traj.episode_id)?;
        Ok(traj.answer == Some(ep.oracle.answer_truth))
    }
}

/// One supervised `(state, action)` example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftPair {
    pub episode_id: u64,
    pub state_digest: String,
    pub state: ReasoningState,
    pub action: Action,
}

fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += scale * b;
    }
}

/// `(d log pi(a) / d theta)` from a scored state.
fn score_function(scored: &ScoredState, idx: usize, temperature: f64) -> Vec<f64> {
    let mean = scored.mean_logit_grad();
    scored.logit_grads[idx]
        .iter()
        .zip(&mean)
        .map(|(g, m)| (g - m) / temperature)
        .collect()
}

/// Mean negative log-likelihood of the pairs and its gradient.
pub fn sft_loss_and_grad(
    policy: &PolicyParams,
    pairs: &[SftPair],
    episodes: &EpisodeIndex<'_>,
    limits: &Limits,
) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(GlimpseError::config("dataset", "no supervised pairs"));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; policy.num_params()];
    for (i, pair) in pairs.iter().enumerate() {
        let ep = episodes.get(pair.episode_id)?;
        let scored = score_state(policy, &pair.state, ep, limits).map_err(|e| {
            GlimpseError::DataIntegrity {
                record: format!("pair {i} (episode {})", pair.episode_id),
                reason: e.to_string(),
            }
        })?;
        let idx = scored.index_of(pair.action).ok_or_else(|| GlimpseError::DataIntegrity {
            record: format!("pair {i} (episode {})", pair.episode_id),
            reason: format!("action {} not legal in its state", pair.action),
        })?;
        loss -= scored.log_probs[idx];
        axpy(&mut grad, -1.0, &score_function(&scored, idx, policy.temperature));
    }
    let n = pairs.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 50,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftOutcome {
    pub policy: PolicyParams,
    /// Frozen copy of the trained policy used as the reference in GRPO.
    pub reference: PolicyParams,
    /// Full-dataset loss before training and after each epoch.
    pub loss_history: Vec<f64>,
}

/// Mini-batch gradient descent on the supervised loss.
pub fn train_sft(
    initial: &PolicyParams,
    pairs: &[SftPair],
    episodes: &EpisodeIndex<'_>,
    limits: &Limits,
    cfg: &SftConfig,
    seed: u64,
) -> Result<SftOutcome> {
    if pairs.is_empty() {
        return Err(GlimpseError::config("dataset", "SFT dataset is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(GlimpseError::config("batch_size", "must be at least 1"));
    }
    let mut policy = initial.clone();
    let mut rng = rng_from(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = vec![sft_loss_and_grad(&policy, pairs, episodes, limits)?.0];
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SftPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let last_good = policy.clone();
            let (loss, grad) = sft_loss_and_grad(&policy, &batch, episodes, limits)?;
            axpy(&mut policy.weights, -cfg.learning_rate, &grad);
            if !loss.is_finite() || !policy.is_finite() {
                return Err(GlimpseError::Diverged {
                    step,
                    reason: "non-finite SFT loss or weights".into(),
                    last_good: Box::new(last_good),
                });
            }
            step += 1;
        }
        history.push(sft_loss_and_grad(&policy, pairs, episodes, limits)?.0);
    }
    Ok(SftOutcome {
        reference: policy.clone(),
        policy,
        loss_history: history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    Population,
    Sample,
}

/// `(R_j - mean) / (std + eps)` within one group.
pub fn group_advantages(rewards: &[f64], epsilon: f64, kind: StdKind) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(GlimpseError::config("group_size", "need at least two rewards"));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        // the computed mean can be off by an ulp, which would leak ~eps-scaled noise
        return Ok(vec![0.0; g]);
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean) * (r - mean)).sum();
    let denom = match kind {
        StdKind::Population => g as f64,
        StdKind::Sample => (g - 1) as f64,
    };
    let std = (ss / denom).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + epsilon)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub beta: f64,
    pub epsilon: f64,
    /// Ratio clip half-width; `inf` evaluates the unclipped objective.
    pub clip_range: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub episodes_per_step: usize,
    pub std_kind: StdKind,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            beta: 0.04,
            epsilon: 1e-8,
            clip_range: 0.2,
            learning_rate: 0.2,
            steps: 500,
            episodes_per_step: 4,
            std_kind: StdKind::Population,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(GlimpseError::config("group_size", "must be at least 2"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(GlimpseError::config("beta", "must be finite and non-negative"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(GlimpseError::config("epsilon", "must be positive and finite"));
        }
        if self.clip_range.is_nan() || self.clip_range <= 0.0 {
            return Err(GlimpseError::config("clip_range", "must be positive (or inf)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GlimpseError::config("learning_rate", "must be positive and finite"));
        }
        if self.episodes_per_step == 0 {
            return Err(GlimpseError::config("episodes_per_step", "must be at least 1"));
        }
        Ok(())
    }
}

/// Importance ratios above this are saturated and contribute no gradient.
pub const RATIO_CAP: f64 = 1e6;

/// Exact `KL[ref || theta]` at one state and its gradient in theta.
pub fn state_kl(
    policy: &PolicyParams,
    reference: &PolicyParams,
    state: &ReasoningState,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<(f64, Vec<f64>)> {
    let cur = score_state(policy, state, episode, limits)?;
    let refd = score_state(reference, state, episode, limits)?;
    Ok(kl_from_scored(&cur, &refd, policy.temperature))
}

fn kl_from_scored(cur: &ScoredState, refd: &ScoredState, temperature: f64) -> (f64, Vec<f64>) {
    let mut kl = 0.0;
    let mut ref_mean = vec![0.0; cur.logit_grads[0].len()];
    for (i, (&lr, &lc)) in refd.log_probs.iter().zip(&cur.log_probs).enumerate() {
        let pr = lr.exp();
        kl += pr * (lr - lc);
        axpy(&mut ref_mean, pr, &cur.logit_grads[i]);
    }
    let cur_mean = cur.mean_logit_grad();
    let grad = cur_mean
        .iter()
        .zip(&ref_mean)
        .map(|(c, r)| (c - r) / temperature)
        .collect();
    (kl, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub mean_kl: f64,
    pub advantages: Vec<f64>,
    pub ratios: Vec<f64>,
    pub saturated: usize,
}

/// Clipped, trajectory-level importance-weighted GRPO loss with exact KL to
/// the reference, averaged over every state visited by the group.
pub fn grpo_loss_and_grad(
    policy: &PolicyParams,
    reference: &PolicyParams,
    group: &[Trajectory],
    cfg: &GrpoConfig,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<GrpoLoss> {
    let rewards: Vec<f64> = group
        .iter()
        .map(|t| {
            t.total_reward
                .ok_or_else(|| GlimpseError::State("group trajectory has no reward".into()))
        })
        .collect::<Result<_>>()?;
    let advantages = group_advantages(&rewards, cfg.epsilon, cfg.std_kind)?;
    let g = group.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut loss = 0.0;
    let mut kl_sum = 0.0;
    let mut kl_grad = vec![0.0; policy.num_params()];
    let mut states = 0usize;
    let mut ratios = Vec::with_capacity(group.len());
    let mut saturated = 0;

    for (traj, &adv) in group.iter().zip(&advantages) {
        let replay = Trajectory::replay(episode, &traj.actions(), limits)?;
        let mut lp_cur = 0.0;
        let mut lp_ref = 0.0;
        let mut dlp = vec![0.0; policy.num_params()];
        for step in &replay.steps {
            let cur = score_state(policy, &step.state, episode, limits)?;
            let refd = score_state(reference, &step.state, episode, limits)?;
            let idx = cur
                .index_of(step.action)
                .ok_or_else(|| GlimpseError::Domain(format!("illegal action {}", step.action)))?;
            lp_cur += cur.log_probs[idx];
            lp_ref += refd.log_probs[idx];
            axpy(&mut dlp, 1.0, &score_function(&cur, idx, policy.temperature));
            let (kl, kg) = kl_from_scored(&cur, &refd, policy.temperature);
            kl_sum += kl;
            axpy(&mut kl_grad, 1.0, &kg);
            states += 1;
        }
        let raw = (lp_cur - lp_ref).exp();
        let (ratio, live) = if raw.is_finite() && raw <= RATIO_CAP {
            (raw, true)
        } else {
            saturated += 1;
            (RATIO_CAP, false)
        };
        ratios.push(ratio);
        let unclipped = ratio * adv;
        let objective = if cfg.clip_range.is_finite() {
            let clipped = ratio.clamp(1.0 - cfg.clip_range, 1.0 + cfg.clip_range) * adv;
            unclipped.min(clipped)
        } else {
            unclipped
        };
        loss -= objective / g;
        // gradient flows only through the unclipped branch
        if live && objective == unclipped {
            axpy(&mut grad, -adv * ratio / g, &dlp);
        }
    }
    let mean_kl = kl_sum / states as f64;
    loss += cfg.beta * mean_kl;
    axpy(&mut grad, cfg.beta / states as f64, &kl_grad);
    Ok(GrpoLoss {
        loss,
        grad,
        mean_kl,
        advantages,
        ratios,
        saturated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub accuracy: f64,
    pub mean_kl: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoOutcome {
    pub policy: PolicyParams,
    pub metrics: Vec<GrpoMetrics>,
    pub saturated_ratios: usize,
}

/// Samples a group of `G` trajectories from `policy` and scores them.
pub fn sample_group(
    policy: &PolicyParams,
    episode: &VideoEpisode,
    limits: &Limits,
    scorer: &Scorer<'_>,
    group_size: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let mut rng = rng_from(seed);
    (0..group_size)
        .map(|_| {
            let mut t = sample_trajectory(policy, episode, limits, &mut rng)?;
            scorer.score(&mut t)?;
            Ok(t)
        })
        .collect()
}

/// On-policy GRPO: each step samples groups from the current policy on
/// `episodes_per_step` episodes and takes one gradient step on the mean loss.
pub fn train_grpo(
    initial: &PolicyParams,
    reference: &PolicyParams,
    episodes: &[VideoEpisode],
    limits: &Limits,
    scorer: &Scorer<'_>,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<GrpoOutcome> {
    cfg.validate()?;
    let mut policy = initial.clone();
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut saturated_ratios = 0;
    if episodes.is_empty() {
        log::warn!("GRPO split is empty; returning the SFT policy unchanged");
        return Ok(GrpoOutcome {
            policy,
            metrics,
            saturated_ratios,
        });
    }
    let mut pick = rng_from(derive_seed(seed, "grpo-pick", 0));
    for step in 0..cfg.steps {
        let chosen: Vec<usize> = (0..cfg.episodes_per_step)
            .map(|_| pick.gen_range(0..episodes.len()))
            .collect();
        let results = chosen
            .par_iter()
            .enumerate()
            .map(|(i, &e)| {
                let ep = &episodes[e];
                let group_seed = derive_seed(seed, "grpo-group", (step * cfg.episodes_per_step + i) as u64);
                let group = sample_group(&policy, ep, limits, scorer, cfg.group_size, group_seed)?;
                let out = grpo_loss_and_grad(&policy, reference, &group, cfg, ep, limits)?;
                let mut correct = 0usize;
                for t in &group {
                    correct += usize::from(scorer.is_correct(t)?);
                }
                let mean_r = group.iter().map(|t| t.total_reward.unwrap_or(0.0)).sum::<f64>()
                    / group.len() as f64;
                Ok((out, correct as f64 / group.len() as f64, mean_r))
            })
            .collect::<Result<Vec<_>>>()?;

        let n = results.len() as f64;
        let mut grad = vec![0.0; policy.num_params()];
        let mut row = GrpoMetrics {
            step,
            mean_reward: 0.0,
            accuracy: 0.0,
            mean_kl: 0.0,
            loss: 0.0,
        };
        for (out, acc, mean_r) in &results {
            axpy(&mut grad, 1.0 / n, &out.grad);
            row.loss += out.loss / n;
            row.mean_kl += out.mean_kl / n;
            row.accuracy += acc / n;
            row.mean_reward += mean_r / n;
            saturated_ratios += out.saturated;
        }
        let last_good = policy.clone();
        axpy(&mut policy.weights, -cfg.learning_rate, &grad);
        if !row.loss.is_finite() || !policy.is_finite() {
            return Err(GlimpseError::Diverged {
                step,
                reason: "non-finite GRPO loss or weights".into(),
                last_good: Box::new(last_good),
            });
        }
        metrics.push(row);
    }
    if saturated_ratios > 0 {
        log::warn!("{saturated_ratios} importance ratios saturated at {RATIO_CAP}");
    }
    Ok(GrpoOutcome {
        policy,
        metrics,
        saturated_ratios,
    })
}

/// Mean exact KL to the reference over the states visited by greedy and
/// sampled trajectories on `episodes`.
pub fn mean_visited_kl(
    policy: &PolicyParams,
    reference: &PolicyParams,
    episodes: &[VideoEpisode],
    limits: &Limits,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, ep) in episodes.iter().enumerate() {
        let mut rng = rng_from(derive_seed(seed, "kl-probe", i as u64));
        for _ in 0..samples {
            let t = sample_trajectory(policy, ep, limits, &mut rng)?;
            for step in &t.steps {
                total += state_kl(policy, reference, &step.state, ep, limits)?.0;
                count += 1;
            }
        }
    }
    Ok(total / count.max(1) as f64)
}
