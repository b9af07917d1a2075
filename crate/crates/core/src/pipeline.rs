//! Training-data construction: proposals, searched trajectories, filtering,
//! normalization into records, and the SFT / MTDP splits.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{trajectory_reward, RewardConfig, VideoEpisode};
use crate::error::{GlimpseError, Result};
use crate::mcts::{extract_top_trajectories, search, LeafValue, MctsConfig};
use crate::policy::{greedy_trajectory, PolicyParams};
use crate::seeds::{derive_seed, rng_from};
use crate::state::{Action, Limits, ReasoningState, Trajectory};
use crate::train::{EpisodeIndex, SftPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvidenceTag {
    EvidenceHit,
    Distractor,
    Repeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Speculated,
    Searched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordStep {
    /// 1-based step index.
    pub k: usize,
    pub action: Action,
    /// `None` on the answer step.
    pub tag: Option<EvidenceTag>,
    /// Hash of the summary vector the action was taken from.
    pub state_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode_id: u64,
    pub steps: Vec<RecordStep>,
    pub final_answer: usize,
    pub total_reward: f64,
    pub source: Source,
}

impl TrajectoryRecord {
    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn num_selections(&self) -> usize {
        self.steps.iter().filter(|s| s.action.object().is_some()).count()
    }

    fn label(&self, i: usize) -> String {
        format!("record {i} (episode {})", self.episode_id)
    }
}

/// Hex SHA-256 of the little-endian bytes of `h`.
pub fn state_digest(state: &ReasoningState) -> String {
    let mut hasher = Sha256::new();
    for x in &state.summary {
        hasher.update(x.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Builds the canonical record of a replayed, answered trajectory.
pub fn record_from_trajectory(
    traj: &Trajectory,
    episode: &VideoEpisode,
    reward: &RewardConfig,
    source: Source,
) -> Result<TrajectoryRecord> {
    let final_answer = traj
        .answer
        .ok_or_else(|| GlimpseError::State("trajectory has not answered".into()))?;
    let mut scored = traj.clone();
    let total_reward = trajectory_reward(&mut scored, episode, reward)?;
    let steps = traj
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| RecordStep {
            k: i + 1,
            action: s.action,
            tag: s.action.object().map(|obj| {
                if s.state.selected.contains(&obj) {
                    EvidenceTag::Repeat
                } else if episode.is_chain_object(obj) {
                    EvidenceTag::EvidenceHit
                } else {
                    EvidenceTag::Distractor
                }
            }),
            state_digest: state_digest(&s.state),
        })
        .collect();
    Ok(TrajectoryRecord {
        episode_id: traj.episode_id,
        steps,
        final_answer,
        total_reward,
        source,
    })
}

/// Replays a record's actions against its episode.
pub fn replay_record(
    record: &TrajectoryRecord,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<Trajectory> {
    let integrity = |reason: String| GlimpseError::DataIntegrity {
        record: format!("episode {}", record.episode_id),
        reason,
    };
    if record.episode_id != episode.episode_id {
        return Err(integrity(format!("replayed against episode {}", episode.episode_id)));
    }
    let traj = Trajectory::replay(episode, &record.actions(), limits)
        .map_err(|e| integrity(e.to_string()))?;
    match traj.answer {
        Some(a) if a == record.final_answer => Ok(traj),
        Some(a) => Err(integrity(format!(
            "final_answer {} but actions answer {a}",
            record.final_answer
        ))),
        None => Err(integrity("actions never answer".into())),
    }
}

/// Recomputes indices, tags, digests and reward from the actions alone.
pub fn normalize(
    record: &TrajectoryRecord,
    episode: &VideoEpisode,
    limits: &Limits,
    reward: &RewardConfig,
) -> Result<TrajectoryRecord> {
    let traj = replay_record(record, episode, limits)?;
    record_from_trajectory(&traj, episode, reward, record.source)
}

pub enum ProposalMode<'a> {
    /// Walks the hidden evidence chain and answers correctly.
    OracleSeeded,
    PolicyGreedy(&'a PolicyParams),
}

pub fn propose_trajectory(
    episode: &VideoEpisode,
    mode: ProposalMode<'_>,
    limits: &Limits,
    reward: &RewardConfig,
) -> Result<TrajectoryRecord> {
    let traj = match mode {
        ProposalMode::OracleSeeded => Trajectory::replay(episode, &oracle_actions(episode), limits)?,
        ProposalMode::PolicyGreedy(policy) => greedy_trajectory(policy, episode, limits)?,
    };
    record_from_trajectory(&traj, episode, reward, Source::Speculated)
}

/// The evidence chain followed by the true answer.
pub fn oracle_actions(episode: &VideoEpisode) -> Vec<Action> {
    episode
        .oracle
        .evidence_chain
        .iter()
        .map(|&obj| Action::select(obj))
        .chain(std::iter::once(Action::Answer(episode.oracle.answer_truth)))
        .collect()
}

/// Which filter criterion a replayed record fails, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    WrongAnswer,
    Redundant,
    NoEvidence,
    TooLong,
}

/// Classifies one record. Over-length records are rejected before replay.
pub fn check_record(
    record: &TrajectoryRecord,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<Option<Rejection>> {
    if record.num_selections() > limits.k_max {
        return Ok(Some(Rejection::TooLong));
    }
    let traj = replay_record(record, episode, limits)?;
    if traj.answer != Some(episode.oracle.answer_truth) {
        return Ok(Some(Rejection::WrongAnswer));
    }
    let sel = traj.selections();
    if sel.iter().enumerate().any(|(i, o)| sel[..i].contains(o)) {
        return Ok(Some(Rejection::Redundant));
    }
    if !sel.iter().any(|&o| episode.is_chain_object(o)) {
        return Ok(Some(Rejection::NoEvidence));
    }
    Ok(None)
}

/// Keeps correct, non-redundant, evidence-bearing records within `k_max`.
pub fn filter_trajectories(
    records: &[TrajectoryRecord],
    episodes: &EpisodeIndex<'_>,
    limits: &Limits,
) -> Result<Vec<TrajectoryRecord>> {
    let mut kept = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let ep = episodes.get(rec.episode_id).map_err(|_| GlimpseError::DataIntegrity {
            record: rec.label(i),
            reason: "episode not found".into(),
        })?;
        let verdict = check_record(rec, ep, limits).map_err(|e| match e {
            GlimpseError::DataIntegrity { reason, .. } => GlimpseError::DataIntegrity {
                record: rec.label(i),
                reason,
            },
            other => other,
        })?;
        if verdict.is_none() {
            kept.push(rec.clone());
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchStageConfig {
    pub mcts: MctsConfig,
    pub top_k: usize,
}

impl Default for SearchStageConfig {
    fn default() -> Self {
        Self {
            mcts: MctsConfig::default(),
            top_k: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SftDataset {
    pub records: Vec<TrajectoryRecord>,
    pub pairs: Vec<SftPair>,
    pub skipped: Vec<u64>,
}

/// Flattens a record into its `K + 1` state-action pairs.
pub fn flatten_record(
    record: &TrajectoryRecord,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<Vec<SftPair>> {
    let traj = replay_record(record, episode, limits)?;
    Ok(traj
        .steps
        .into_iter()
        .map(|s| SftPair {
            episode_id: record.episode_id,
            state_digest: state_digest(&s.state),
            state: s.state,
            action: s.action,
        })
        .collect())
}

fn searched_records(
    episode: &VideoEpisode,
    policy: &PolicyParams,
    cfg: &SearchStageConfig,
    limits: &Limits,
    reward: &RewardConfig,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    let proposal = (cfg.mcts.proposal_weight > 0.0).then(|| oracle_actions(episode));
    let tree = search(
        episode,
        policy,
        &cfg.mcts,
        limits,
        &LeafValue::Reward(*reward),
        derive_seed(seed, "search", episode.episode_id),
        proposal.as_deref(),
    )?;
    let top = extract_top_trajectories(&tree, cfg.top_k, episode, limits, reward)?;
    let mut records = Vec::with_capacity(top.len());
    for t in &top {
        records.push(record_from_trajectory(t, episode, reward, Source::Searched)?);
    }
    let index = EpisodeIndex::new(std::slice::from_ref(episode));
    filter_trajectories(&records, &index, limits)
}

/// Search, top-k extraction, filtering and flattening over a corpus.
/// Episodes run in parallel; results keep corpus order.
pub fn build_sft_dataset(
    episodes: &[VideoEpisode],
    policy: &PolicyParams,
    cfg: &SearchStageConfig,
    limits: &Limits,
    reward: &RewardConfig,
    seed: u64,
) -> Result<SftDataset> {
    if cfg.top_k == 0 {
        return Err(GlimpseError::config("top_k", "must be at least 1"));
    }
    let per_episode = episodes
        .par_iter()
        .map(|ep| searched_records(ep, policy, cfg, limits, reward, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut out = SftDataset::default();
    for (ep, records) in episodes.iter().zip(per_episode) {
        if records.is_empty() {
            log::warn!("episode {}: every searched trajectory was filtered; skipped", ep.episode_id);
            out.skipped.push(ep.episode_id);
            continue;
        }
        for rec in records {
            out.pairs.extend(flatten_record(&rec, ep, limits)?);
            out.records.push(rec);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub sft_records: Vec<TrajectoryRecord>,
    pub mtdp_episode_ids: Vec<u64>,
    pub mtdp_fraction: f64,
}

/// Episodes the SFT policy answers wrongly, sampled up to
/// `round(fraction * |sft_records|)`.
pub fn build_mtdp_split(
    episodes: &[VideoEpisode],
    sft_policy: &PolicyParams,
    sft_records: Vec<TrajectoryRecord>,
    fraction: f64,
    limits: &Limits,
    seed: u64,
) -> Result<DatasetSplit> {
    if episodes.is_empty() {
        return Err(GlimpseError::config("rl_pool", "no episodes to build the MTDP split from"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(GlimpseError::config("mtdp_fraction", "must be in (0, 1]"));
    }
    let answers = episodes
        .par_iter()
        .map(|ep| greedy_trajectory(sft_policy, ep, limits).map(|t| t.answer))
        .collect::<Result<Vec<_>>>()?;
    let mut pool: Vec<u64> = episodes
        .iter()
        .zip(answers)
        .filter(|(ep, a)| *a != Some(ep.oracle.answer_truth))
        .map(|(ep, _)| ep.episode_id)
        .collect();
    let target = (fraction * sft_records.len() as f64).round() as usize;
    let ids = if pool.len() <= target {
        if pool.len() < target {
            log::warn!(
                "challenge pool has {} episodes, fewer than the {target} requested; taking all",
                pool.len()
            );
        }
        pool
    } else {
        pool.shuffle(&mut rng_from(derive_seed(seed, "mtdp-split", 0)));
        pool.truncate(target);
        pool.sort_unstable();
        pool
    };
    Ok(DatasetSplit {
        sft_records,
        mtdp_episode_ids: ids,
        mtdp_fraction: fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{gen_episode, EnvConfig};
    use crate::policy::FeatureLayout;

    fn setup() -> (VideoEpisode, Limits, RewardConfig) {
        (
            gen_episode(5, &EnvConfig::default()).unwrap(),
            Limits::default(),
            RewardConfig::default(),
        )
    }

    #[test]
    fn oracle_proposal_is_maximal_and_admissible() {
        let (ep, limits, reward) = setup();
        let rec = propose_trajectory(&ep, ProposalMode::OracleSeeded, &limits, &reward).unwrap();
        assert!((rec.total_reward - (1.0 + reward.alpha)).abs() < 1e-12);
        assert_eq!(rec.source, Source::Speculated);
        let idx = EpisodeIndex::new(std::slice::from_ref(&ep));
        assert_eq!(filter_trajectories(&[rec], &idx, &limits).unwrap().len(), 1);
    }

    #[test]
    fn greedy_proposal_is_deterministic() {
        let (ep, limits, reward) = setup();
        let p = PolicyParams::zeros(FeatureLayout::new(8, 4, limits.k_max));
        let a = propose_trajectory(&ep, ProposalMode::PolicyGreedy(&p), &limits, &reward).unwrap();
        let b = propose_trajectory(&ep, ProposalMode::PolicyGreedy(&p), &limits, &reward).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn steps_are_indexed_from_one_and_tagged() {
        let (ep, limits, reward) = setup();
        let rec = propose_trajectory(&ep, ProposalMode::OracleSeeded, &limits, &reward).unwrap();
        let ks: Vec<usize> = rec.steps.iter().map(|s| s.k).collect();
        assert_eq!(ks, (1..=rec.steps.len()).collect::<Vec<_>>());
        assert!(rec.steps[..rec.steps.len() - 1]
            .iter()
            .all(|s| s.tag == Some(EvidenceTag::EvidenceHit)));
        assert_eq!(rec.steps.last().unwrap().tag, None);
    }

    #[test]
    fn normalize_is_idempotent() {
        let (ep, limits, reward) = setup();
        let mut rec = propose_trajectory(&ep, ProposalMode::OracleSeeded, &limits, &reward).unwrap();
        rec.total_reward = 0.0;
        rec.steps[0].k = 9;
        let once = normalize(&rec, &ep, &limits, &reward).unwrap();
        let twice = normalize(&once, &ep, &limits, &reward).unwrap();
        assert_eq!(
            serde_json::to_string(&once).unwrap(),
            serde_json::to_string(&twice).unwrap()
        );
        assert!((once.total_reward - 1.5).abs() < 1e-12);
    }

    #[test]
    fn unreplayable_record_is_an_integrity_error() {
        let (ep, limits, reward) = setup();
        let mut rec = propose_trajectory(&ep, ProposalMode::OracleSeeded, &limits, &reward).unwrap();
        rec.steps.insert(0, RecordStep {
            k: 0,
            action: Action::Select { frame: ep.num_frames - 1, object: 0 },
            tag: None,
            state_digest: String::new(),
        });
        let idx = EpisodeIndex::new(std::slice::from_ref(&ep));
        let err = filter_trajectories(&[rec], &idx, &limits).unwrap_err();
        assert!(matches!(err, GlimpseError::DataIntegrity { ref record, .. } if record.contains("record 0")));
    }

    #[test]
    fn forced_episode_flattens_to_two_pairs() {
        let cfg = EnvConfig {
            num_frames: 1,
            objects_min: 1,
            objects_max: 1,
            feature_dim: 4,
            chain_len: 1,
            distractors: 0,
            num_classes: 2,
            max_chain_gap: 2,
        };
        let ep = gen_episode(3, &cfg).unwrap();
        let limits = Limits { k_max: 1, ..Limits::default() };
        let policy = PolicyParams::zeros(FeatureLayout::new(4, 2, 1));
        let search_cfg = SearchStageConfig {
            mcts: MctsConfig { n_rollouts: 8, ..MctsConfig::default() },
            top_k: 1,
        };
        let ds = build_sft_dataset(&[ep], &policy, &search_cfg, &limits, &RewardConfig::default(), 1)
            .unwrap();
        assert_eq!(ds.pairs.len(), 2);
        assert!(matches!(ds.pairs[0].action, Action::Select { .. }));
        assert!(matches!(ds.pairs[1].action, Action::Answer(_)));
    }

    #[test]
    fn perfect_policy_gives_empty_split() {
        // one-frame, one-object episodes: greedy policy must pick the object;
        // a huge answer weight toward the phase feature makes it always correct
        let cfg = EnvConfig {
            num_frames: 1,
            objects_min: 1,
            objects_max: 1,
            feature_dim: 4,
            chain_len: 1,
            distractors: 0,
            num_classes: 2,
            max_chain_gap: 2,
        };
        let eps: Vec<_> = (0..10).map(|s| gen_episode(s, &cfg).unwrap()).collect();
        let limits = Limits { k_max: 1, ..Limits::default() };
        let layout = FeatureLayout::new(4, 2, 1);
        let mut p = PolicyParams::zeros(layout);
        p.weights[layout.phase()] = 50.0;
        let split = build_mtdp_split(&eps, &p, vec![], 0.15, &limits, 0).unwrap();
        assert!(split.mtdp_episode_ids.is_empty());
        assert!(build_mtdp_split(&[], &p, vec![], 0.15, &limits, 0).is_err());
    }
}
