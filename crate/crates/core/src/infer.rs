//! Inference-time multi-trajectory answering, evaluation, and the exhaustive
//! trajectory oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{score_selection, trajectory_reward, ObjectRef, RewardConfig, VideoEpisode};
use crate::error::{GlimpseError, Result};
use crate::mcts::{rank_paths, search, tree_paths, LeafValue, MctsConfig};
use crate::policy::{sample_trajectory, PolicyParams};
use crate::seeds::{derive_seed, rng_from};
use crate::state::{Action, Limits, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Highest mean per-action log-probability.
    LogProb,
    /// Most frequent answer; the earliest candidate giving it is returned.
    MajorityVote,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub n_samples: usize,
    pub temperature: f64,
    pub selection: Selection,
    /// Run tree search per episode instead of sampling from the policy.
    pub search_rollouts: Option<usize>,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            n_samples: 4,
            temperature: 1.0,
            selection: Selection::LogProb,
            search_rollouts: None,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(GlimpseError::config("n_samples", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GlimpseError::config("temperature", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutcome {
    pub answer: usize,
    pub chosen: usize,
    pub candidates: Vec<Trajectory>,
}

impl InferOutcome {
    pub fn trajectory(&self) -> &Trajectory {
        &self.candidates[self.chosen]
    }
}

fn fill_log_probs(
    policy: &PolicyParams,
    traj: &mut Trajectory,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<()> {
    for step in &mut traj.steps {
        let lps = crate::policy::action_log_probs(policy, &step.state, episode, limits)?;
        step.log_prob = lps
            .iter()
            .find(|(a, _)| *a == step.action)
            .map(|&(_, lp)| lp)
            .ok_or_else(|| GlimpseError::Domain(format!("action {} is illegal", step.action)))?;
    }
    Ok(())
}

fn normalized_log_prob(t: &Trajectory) -> f64 {
    t.recorded_log_prob() / t.steps.len() as f64
}

/// Index of the best candidate under `selection`.
pub fn select_candidate(candidates: &[Trajectory], selection: Selection) -> usize {
    match selection {
        Selection::LogProb => {
            let mut best = 0;
            for i in 1..candidates.len() {
                let (a, b) = (&candidates[i], &candidates[best]);
                let (na, nb) = (normalized_log_prob(a), normalized_log_prob(b));
                if na > nb || (na == nb && a.recorded_log_prob() > b.recorded_log_prob()) {
                    best = i;
                }
            }
            best
        }
        Selection::MajorityVote => {
            let mut counts: Vec<(usize, usize)> = Vec::new();
            for t in candidates {
                let ans = t.answer.unwrap_or(usize::MAX);
                match counts.iter_mut().find(|(a, _)| *a == ans) {
                    Some(entry) => entry.1 += 1,
                    None => counts.push((ans, 1)),
                }
            }
            let top = counts.iter().map(|&(_, n)| n).max().unwrap_or(0);
            // first-seen answer wins ties
            let winner = counts.iter().find(|&&(_, n)| n == top).map(|&(a, _)| a);
            candidates
                .iter()
                .position(|t| t.answer.unwrap_or(usize::MAX) == winner.unwrap_or(usize::MAX))
                .unwrap_or(0)
        }
    }
}

/// Samples `n_samples` trajectories and answers with the best one.
pub fn infer(
    policy: &PolicyParams,
    episode: &VideoEpisode,
    limits: &Limits,
    cfg: &InferConfig,
    seed: u64,
) -> Result<InferOutcome> {
    cfg.validate()?;
    let candidates = match cfg.search_rollouts {
        None => {
            let sampler = policy.clone().with_temperature(cfg.temperature);
            let mut rng = rng_from(seed);
            (0..cfg.n_samples)
                .map(|_| sample_trajectory(&sampler, episode, limits, &mut rng))
                .collect::<Result<Vec<_>>>()?
        }
        Some(rollouts) => {
            let mc = MctsConfig {
                n_rollouts: rollouts,
                ..MctsConfig::default()
            };
            let tree = search(episode, policy, &mc, limits, &LeafValue::Confidence, seed, None)?;
            let mut paths = tree_paths(&tree);
            rank_paths(&mut paths);
            paths
                .iter()
                .take(cfg.n_samples)
                .map(|p| {
                    let mut t = Trajectory::replay(episode, &p.actions(), limits)?;
                    fill_log_probs(policy, &mut t, episode, limits)?;
                    Ok(t)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    if candidates.is_empty() {
        return Err(GlimpseError::State("inference produced no candidates".into()));
    }
    let chosen = select_candidate(&candidates, cfg.selection);
    let answer = candidates[chosen]
        .answer
        .ok_or_else(|| GlimpseError::State("chosen trajectory has no answer".into()))?;
    Ok(InferOutcome {
        answer,
        chosen,
        candidates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub episode_id: u64,
    pub predicted: usize,
    pub truth: usize,
    pub reward: f64,
    pub evidence_hits: usize,
    pub selections: usize,
    pub chain: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub mean_evidence_hit_rate: f64,
    pub mean_trajectory_length: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Aggregates rows in episode-id order, so the result does not depend on
    /// the order episodes were evaluated in.
    pub fn from_rows(mut rows: Vec<EvalRow>) -> Self {
        rows.sort_by_key(|r| r.episode_id);
        let n = rows.len().max(1) as f64;
        let mut correct = 0.0;
        let mut reward = 0.0;
        let mut hit_rate = 0.0;
        let mut length = 0.0;
        for r in &rows {
            if r.predicted == r.truth {
                correct += 1.0;
            }
            reward += r.reward;
            hit_rate += r.evidence_hits as f64 / r.selections.max(1) as f64;
            length += r.selections as f64;
        }
        Self {
            episodes: rows.len(),
            accuracy: correct / n,
            mean_reward: reward / n,
            mean_evidence_hit_rate: hit_rate / n,
            mean_trajectory_length: length / n,
            rows,
        }
    }
}

/// Scores a finished trajectory into an evaluation row.
pub fn eval_row(traj: &Trajectory, episode: &VideoEpisode, reward: &RewardConfig) -> Result<EvalRow> {
    let mut t = traj.clone();
    let r = trajectory_reward(&mut t, episode, reward)?;
    let selected = t.selections();
    let hits = selected
        .iter()
        .enumerate()
        .filter(|&(k, o)| episode.is_chain_object(*o) && !selected[..k].contains(o))
        .count();
    Ok(EvalRow {
        episode_id: episode.episode_id,
        predicted: t.answer.expect("rewarded trajectory has an answer"),
        truth: episode.oracle.answer_truth,
        reward: r,
        evidence_hits: hits,
        selections: selected.len(),
        chain: t.actions(),
    })
}

/// Runs `infer` on every episode with a per-episode seed and aggregates.
pub fn evaluate(
    policy: &PolicyParams,
    episodes: &[VideoEpisode],
    limits: &Limits,
    cfg: &InferConfig,
    reward: &RewardConfig,
    seed: u64,
) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(GlimpseError::config("episodes", "evaluation set is empty"));
    }
    let rows = episodes
        .par_iter()
        .map(|ep| {
            let out = infer(policy, ep, limits, cfg, derive_seed(seed, "infer", ep.episode_id))?;
            eval_row(out.trajectory(), ep, reward)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows))
}

pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Number of legal monotonic trajectories (selection sequences with every
/// answer) up to `k_max` selections.
pub fn count_trajectories(episode: &VideoEpisode, limits: &Limits) -> u128 {
    let t_count = episode.num_frames;
    let c = episode.num_classes as u128;
    // ways[k][cursor]: completions from a state with k selections at cursor
    let mut ways = vec![vec![0u128; t_count]; limits.k_max + 1];
    for k in (0..=limits.k_max).rev() {
        for cursor in 0..t_count {
            let mut n = if k >= 1 { c } else { 0 };
            if k < limits.k_max {
                let last = (cursor + limits.window).min(t_count - 1);
                for (t, &w) in ways[k + 1].iter().enumerate().take(last + 1).skip(cursor) {
                    let m = episode.objects_in_frame(t) as u128;
                    n = n.saturating_add(m.saturating_mul(w));
                }
            }
            ways[k][cursor] = n;
        }
    }
    ways[0][0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForce {
    pub max_reward: f64,
    pub optimal: Vec<Vec<Action>>,
    pub trajectories: u128,
}

/// Exhaustively scores every legal trajectory and returns the maximum
/// composite reward with all of its maximizers.
pub fn brute_force_best(
    episode: &VideoEpisode,
    reward: &RewardConfig,
    limits: &Limits,
    cap: u128,
) -> Result<BruteForce> {
    let count = count_trajectories(episode, limits);
    if count > cap {
        return Err(GlimpseError::Feasibility { count, cap });
    }
    let mut best = BruteForce {
        max_reward: f64::NEG_INFINITY,
        optimal: Vec::new(),
        trajectories: count,
    };
    let mut prefix: Vec<ObjectRef> = Vec::new();
    enumerate(episode, reward, limits, 0, &mut prefix, &mut best)?;
    Ok(best)
}

fn enumerate(
    episode: &VideoEpisode,
    reward: &RewardConfig,
    limits: &Limits,
    cursor: usize,
    prefix: &mut Vec<ObjectRef>,
    best: &mut BruteForce,
) -> Result<()> {
    if !prefix.is_empty() {
        for c in 0..episode.num_classes {
            let r = score_selection(prefix, c, episode, reward)?;
            let mut actions: Vec<Action> = prefix.iter().map(|&o| Action::select(o)).collect();
            actions.push(Action::Answer(c));
            if r > best.max_reward + 1e-12 {
                best.max_reward = r;
                best.optimal = vec![actions];
            } else if (r - best.max_reward).abs() <= 1e-12 {
                best.optimal.push(actions);
            }
        }
    }
    if prefix.len() < limits.k_max {
        let last = (cursor + limits.window).min(episode.num_frames - 1);
        for t in cursor..=last {
            for m in 0..episode.objects_in_frame(t) {
                prefix.push((t, m));
                enumerate(episode, reward, limits, t, prefix, best)?;
                prefix.pop();
            }
        }
    }
    Ok(())
}
