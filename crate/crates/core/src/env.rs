//! Procedural synthetic video episodes and the composite reward.
//!
//! Every object carries a `D`-dimensional feature vector with a fixed layout:
//!
//! | index      | meaning                                                   |
//! |------------|-----------------------------------------------------------|
//! | 0          | saliency in `[0, 1]`                                      |
//! | 1          | attribute channel, `label / C`                            |
//! | 2 .. D     | content embedding, unit norm                              |
//!
//! The query lives in the content subspace. Evidence objects have content
//! strongly aligned with the query and low saliency; distractors are highly
//! salient with content nearly orthogonal to the query. The answer is the
//! modular sum of the attribute labels along the evidence chain, so no single
//! object determines it.
//!
//! Hidden fields (evidence membership, ranks, labels, saliency, the chain and
//! the answer) live under `oracle` on both objects and episodes. Policy code
//! reads only `features`, `query` and the frame layout.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GlimpseError, Result};
use crate::seeds::rng_from;
use crate::state::{ReasoningState, Trajectory};

pub const SALIENCY_DIM: usize = 0;
pub const LABEL_DIM: usize = 1;
pub const CONTENT_START: usize = 2;

/// Object reference `(frame, object)`.
pub type ObjectRef = (usize, usize);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectOracle {
    pub is_evidence: bool,
    pub evidence_rank: Option<usize>,
    pub hidden_label: usize,
    pub saliency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub frame_index: usize,
    pub object_index: usize,
    pub features: Vec<f64>,
    pub oracle: ObjectOracle,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOracle {
    pub evidence_chain: Vec<ObjectRef>,
    pub answer_truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEpisode {
    pub episode_id: u64,
    pub num_frames: usize,
    pub num_classes: usize,
    pub objects: Vec<Vec<ObjectInstance>>,
    pub query: Vec<f64>,
    pub generator_seed: u64,
    pub oracle: EpisodeOracle,
}

impl VideoEpisode {
    pub fn feature_dim(&self) -> usize {
        self.query.len()
    }

    pub fn object(&self, (t, m): ObjectRef) -> Result<&ObjectInstance> {
        self.objects
            .get(t)
            .and_then(|frame| frame.get(m))
            .ok_or_else(|| {
                GlimpseError::Domain(format!(
                    "episode {} has no object ({t}, {m})",
                    self.episode_id
                ))
            })
    }

    pub fn objects_in_frame(&self, t: usize) -> usize {
        self.objects.get(t).map_or(0, Vec::len)
    }

    pub fn total_objects(&self) -> usize {
        self.objects.iter().map(Vec::len).sum()
    }

    pub fn is_chain_object(&self, obj: ObjectRef) -> bool {
        self.oracle.evidence_chain.contains(&obj)
    }

    /// Copy with every hidden field reset, for leakage audits.
    pub fn redacted(&self) -> VideoEpisode {
        let mut ep = self.clone();
        ep.oracle = EpisodeOracle::default();
        for frame in &mut ep.objects {
            for obj in frame {
                obj.oracle = ObjectOracle::default();
            }
        }
        ep
    }

    /// Checks the structural invariants of a generated or loaded episode.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| GlimpseError::DataIntegrity {
            record: format!("episode {}", self.episode_id),
            reason,
        };
        let d = self.feature_dim();
        if self.num_frames == 0 || self.objects.len() != self.num_frames {
            return Err(bad("frame count mismatch".into()));
        }
        if self.num_classes < 2 || self.oracle.answer_truth >= self.num_classes {
            return Err(bad("answer outside class range".into()));
        }
        let mut ranks = Vec::new();
        for (t, frame) in self.objects.iter().enumerate() {
            if frame.is_empty() {
                return Err(bad(format!("frame {t} has no objects")));
            }
            for (m, obj) in frame.iter().enumerate() {
                if obj.frame_index != t || obj.object_index != m {
                    return Err(bad(format!("object ({t}, {m}) has wrong indices")));
                }
                if obj.features.len() != d || obj.features.iter().any(|x| !x.is_finite()) {
                    return Err(bad(format!("object ({t}, {m}) has malformed features")));
                }
                if obj.oracle.is_evidence != obj.oracle.evidence_rank.is_some() {
                    return Err(bad(format!("object ({t}, {m}) evidence rank mismatch")));
                }
                if let Some(r) = obj.oracle.evidence_rank {
                    ranks.push((r, (t, m)));
                }
            }
        }
        ranks.sort_unstable();
        let chain: Vec<ObjectRef> = ranks.iter().map(|&(_, o)| o).collect();
        if ranks.iter().enumerate().any(|(i, &(r, _))| r != i) || chain != self.oracle.evidence_chain
        {
            return Err(bad("evidence ranks do not match the chain".into()));
        }
        if chain.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(bad("evidence chain frames decrease".into()));
        }
        let labels: usize = chain
            .iter()
            .map(|&o| self.objects[o.0][o.1].oracle.hidden_label)
            .sum();
        if labels % self.num_classes != self.oracle.answer_truth {
            return Err(bad("answer does not match the chain labels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_frames: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub feature_dim: usize,
    pub chain_len: usize,
    pub distractors: usize,
    pub num_classes: usize,
    /// Largest frame gap between consecutive chain objects, and the latest
    /// frame of the first one. Keep it at most the action window so every
    /// chain stays reachable.
    pub max_chain_gap: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_frames: 6,
            objects_min: 2,
            objects_max: 4,
            feature_dim: 8,
            chain_len: 2,
            distractors: 3,
            num_classes: 4,
            max_chain_gap: 2,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(GlimpseError::config("num_frames", "must be at least 1"));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(GlimpseError::config(
                "objects_min",
                "need 1 <= objects_min <= objects_max",
            ));
        }
        if self.feature_dim < 4 {
            return Err(GlimpseError::config("feature_dim", "must be at least 4"));
        }
        if self.num_classes < 2 {
            return Err(GlimpseError::config("num_classes", "must be at least 2"));
        }
        if self.chain_len == 0 {
            return Err(GlimpseError::config("chain_len", "must be at least 1"));
        }
        let feasible = if self.max_chain_gap == 0 {
            self.objects_max
        } else {
            self.num_frames * self.objects_max
        };
        if self.chain_len > feasible {
            return Err(GlimpseError::config(
                "chain_len",
                format!("{} exceeds the longest feasible monotonic chain ({feasible})", self.chain_len),
            ));
        }
        if self.chain_len + self.distractors > self.num_frames * self.objects_min {
            return Err(GlimpseError::config(
                "distractors",
                format!(
                    "chain plus distractors ({}) exceeds guaranteed object count ({})",
                    self.chain_len + self.distractors,
                    self.num_frames * self.objects_min
                ),
            ));
        }
        Ok(())
    }
}

fn random_unit_orthogonal<R: Rng>(rng: &mut R, dim: usize, axis: &[f64]) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let proj = dot(&v, axis);
        for (x, a) in v.iter_mut().zip(axis) {
            *x -= proj * a;
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// Unit content vector with the given cosine to the (unit) query content.
fn content_with_alignment<R: Rng>(rng: &mut R, query: &[f64], cosine: f64) -> Vec<f64> {
    let ortho = random_unit_orthogonal(rng, query.len(), query);
    let side = (1.0 - cosine * cosine).max(0.0).sqrt();
    query
        .iter()
        .zip(&ortho)
        .map(|(q, o)| cosine * q + side * o)
        .collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Evidence,
    Distractor,
    Background,
}

/// Pick chain frames: non-decreasing, first frame and every gap bounded by
/// `max_chain_gap`, at most `objects_max` chain objects per frame.
fn chain_frames<R: Rng>(rng: &mut R, cfg: &EnvConfig) -> Vec<usize> {
    let t_count = cfg.num_frames;
    let cap = cfg.objects_max;
    let mut used = vec![0usize; t_count];
    let mut frames = Vec::with_capacity(cfg.chain_len);
    let mut prev = 0usize;
    for placed in 0..cfg.chain_len {
        let remaining = cfg.chain_len - placed;
        let hi = (prev + cfg.max_chain_gap).min(t_count - 1);
        let candidates: Vec<usize> = (prev..=hi)
            .filter(|&t| used[t] < cap)
            .filter(|&t| {
                // capacity from t onward must hold everything still to place
                let room: usize = (t..t_count).map(|u| cap - used[u]).sum();
                room >= remaining
            })
            .collect();
        // validate() guarantees a non-empty candidate set
        let t = *candidates.choose(rng).expect("feasible chain frame");
        used[t] += 1;
        frames.push(t);
        prev = t;
    }
    frames
}

/// Deterministic episode generator: a pure function of `(seed, cfg)`.
pub fn gen_episode(seed: u64, cfg: &EnvConfig) -> Result<VideoEpisode> {
    gen_episode_with_id(seed, seed, cfg)
}

pub fn gen_episode_with_id(episode_id: u64, seed: u64, cfg: &EnvConfig) -> Result<VideoEpisode> {
    cfg.validate()?;
    let mut rng = rng_from(seed);
    let t_count = cfg.num_frames;
    let content_dim = cfg.feature_dim - CONTENT_START;

    let mut counts: Vec<usize> = (0..t_count)
        .map(|_| rng.gen_range(cfg.objects_min..=cfg.objects_max))
        .collect();
    let frames = chain_frames(&mut rng, cfg);
    for (t, c) in counts.iter_mut().enumerate() {
        *c = (*c).max(frames.iter().filter(|&&f| f == t).count());
    }

    let mut kinds: Vec<Vec<Kind>> = counts.iter().map(|&m| vec![Kind::Background; m]).collect();
    let mut chain = Vec::with_capacity(cfg.chain_len);
    let mut rank_of: Vec<Vec<Option<usize>>> = counts.iter().map(|&m| vec![None; m]).collect();
    // chain objects within a frame keep increasing rank in object order
    let mut per_frame: Vec<Vec<usize>> = vec![Vec::new(); t_count];
    for &t in &frames {
        let free: Vec<usize> = (0..counts[t]).filter(|m| !per_frame[t].contains(m)).collect();
        let m = *free.choose(&mut rng).expect("frame sized for its chain slots");
        per_frame[t].push(m);
    }
    for (rank, &t) in frames.iter().enumerate() {
        let slot = frames[..rank].iter().filter(|&&f| f == t).count();
        let m = per_frame[t][slot];
        kinds[t][m] = Kind::Evidence;
        rank_of[t][m] = Some(rank);
        chain.push((t, m));
    }

    let mut free: Vec<ObjectRef> = Vec::new();
    for (t, row) in kinds.iter().enumerate() {
        for (m, k) in row.iter().enumerate() {
            if *k == Kind::Background {
                free.push((t, m));
            }
        }
    }
    free.shuffle(&mut rng);
    for &(t, m) in free.iter().take(cfg.distractors) {
        kinds[t][m] = Kind::Distractor;
    }

    let query_content = random_unit_orthogonal(&mut rng, content_dim, &vec![0.0; content_dim]);
    let mut query = vec![0.0; cfg.feature_dim];
    query[CONTENT_START..].copy_from_slice(&query_content);

    let c = cfg.num_classes;
    let mut objects = Vec::with_capacity(t_count);
    for (t, row) in kinds.iter().enumerate() {
        let mut frame = Vec::with_capacity(row.len());
        for (m, &kind) in row.iter().enumerate() {
            let label = rng.gen_range(0..c);
            let (saliency, cosine) = match kind {
                Kind::Evidence => (rng.gen_range(0.0..0.3), rng.gen_range(0.75..0.95)),
                Kind::Distractor => (rng.gen_range(0.7..1.0), rng.gen_range(-0.25..0.25)),
                Kind::Background => (rng.gen_range(0.1..0.5), rng.gen_range(-0.25..0.25)),
            };
            let content = content_with_alignment(&mut rng, &query_content, cosine);
            let mut features = Vec::with_capacity(cfg.feature_dim);
            features.push(saliency);
            features.push(label as f64 / c as f64);
            features.extend(content);
            frame.push(ObjectInstance {
                frame_index: t,
                object_index: m,
                features,
                oracle: ObjectOracle {
                    is_evidence: kind == Kind::Evidence,
                    evidence_rank: rank_of[t][m],
                    hidden_label: label,
                    saliency,
                },
            });
        }
        objects.push(frame);
    }

    let answer_truth = chain
        .iter()
        .map(|&(t, m)| objects[t][m].oracle.hidden_label)
        .sum::<usize>()
        % c;

    Ok(VideoEpisode {
        episode_id,
        num_frames: t_count,
        num_classes: c,
        objects,
        query,
        generator_seed: seed,
        oracle: EpisodeOracle {
            evidence_chain: chain,
            answer_truth,
        },
    })
}

/// Attribute label as read from the visible feature vector.
pub fn read_label(features: &[f64], num_classes: usize) -> usize {
    let raw = (features[LABEL_DIM] * num_classes as f64).round() as i64;
    raw.rem_euclid(num_classes as i64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha: f64,
    pub answer_reward_correct: f64,
    pub answer_reward_wrong: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            answer_reward_correct: 1.0,
            answer_reward_wrong: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(GlimpseError::config("alpha", "must be finite and non-negative"));
        }
        if !self.answer_reward_correct.is_finite() || !self.answer_reward_wrong.is_finite() {
            return Err(GlimpseError::config("answer_reward", "must be finite"));
        }
        Ok(())
    }
}

pub fn answer_reward(predicted: usize, episode: &VideoEpisode, cfg: &RewardConfig) -> Result<f64> {
    if predicted >= episode.num_classes {
        return Err(GlimpseError::Domain(format!(
            "answer {predicted} outside [0, {})",
            episode.num_classes
        )));
    }
    Ok(if predicted == episode.oracle.answer_truth {
        cfg.answer_reward_correct
    } else {
        cfg.answer_reward_wrong
    })
}

/// 1 for the first selection of a chain object in this trajectory, else 0.
pub fn evidence_reward(state: &ReasoningState, obj: ObjectRef, episode: &VideoEpisode) -> Result<f64> {
    episode.object(obj)?;
    let fresh = !state.selected.contains(&obj);
    Ok(if fresh && episode.is_chain_object(obj) { 1.0 } else { 0.0 })
}

/// Composite reward of a finished selection sequence and answer.
pub fn score_selection(
    selected: &[ObjectRef],
    answer: usize,
    episode: &VideoEpisode,
    cfg: &RewardConfig,
) -> Result<f64> {
    if selected.is_empty() {
        return Err(GlimpseError::State(
            "reward needs at least one object selection".into(),
        ));
    }
    let r_ans = answer_reward(answer, episode, cfg)?;
    let mut hits = 0usize;
    for (k, &obj) in selected.iter().enumerate() {
        episode.object(obj)?;
        if episode.is_chain_object(obj) && !selected[..k].contains(&obj) {
            hits += 1;
        }
    }
    Ok(r_ans + cfg.alpha * hits as f64 / selected.len() as f64)
}

/// Composite answer-plus-evidence reward; also stored on the trajectory.
pub fn trajectory_reward(
    traj: &mut Trajectory,
    episode: &VideoEpisode,
    cfg: &RewardConfig,
) -> Result<f64> {
    let answer = traj
        .answer
        .ok_or_else(|| GlimpseError::State("trajectory has not answered".into()))?;
    let r = score_selection(&traj.selections(), answer, episode, cfg)?;
    traj.total_reward = Some(r);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EnvConfig {
        EnvConfig {
            num_frames: 1,
            objects_min: 1,
            objects_max: 1,
            feature_dim: 4,
            chain_len: 1,
            distractors: 0,
            num_classes: 2,
            max_chain_gap: 2,
        }
    }

    #[test]
    fn degenerate_episode_is_its_own_chain() {
        let ep = gen_episode(7, &tiny()).unwrap();
        assert_eq!(ep.total_objects(), 1);
        assert_eq!(ep.oracle.evidence_chain, vec![(0, 0)]);
        assert_eq!(ep.oracle.answer_truth, ep.objects[0][0].oracle.hidden_label % 2);
        ep.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = EnvConfig::default();
        let a = gen_episode(7, &cfg).unwrap();
        let b = gen_episode(7, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_ne!(a, gen_episode(8, &cfg).unwrap());
    }

    #[test]
    fn answer_is_modular_label_sum_of_chain() {
        let cfg = EnvConfig {
            num_frames: 4,
            objects_min: 3,
            objects_max: 3,
            chain_len: 2,
            num_classes: 4,
            distractors: 2,
            ..EnvConfig::default()
        };
        let ep = gen_episode(3, &cfg).unwrap();
        assert_eq!(ep.oracle.evidence_chain.len(), 2);
        let (e0, e1) = (ep.oracle.evidence_chain[0], ep.oracle.evidence_chain[1]);
        let l0 = ep.objects[e0.0][e0.1].oracle.hidden_label;
        let l1 = ep.objects[e1.0][e1.1].oracle.hidden_label;
        assert_eq!(ep.oracle.answer_truth, (l0 + l1) % 4);
        assert!(e0.0 <= e1.0);
    }

    #[test]
    fn labels_are_readable_from_features() {
        let ep = gen_episode(11, &EnvConfig::default()).unwrap();
        for obj in ep.objects.iter().flatten() {
            assert_eq!(read_label(&obj.features, ep.num_classes), obj.oracle.hidden_label);
        }
    }

    #[test]
    fn evidence_is_query_aligned_after_normalization() {
        let cfg = EnvConfig::default();
        for seed in 0..50 {
            let ep = gen_episode(seed, &cfg).unwrap();
            let qn = norm(&ep.query);
            for &o in &ep.oracle.evidence_chain {
                let f = &ep.objects[o.0][o.1].features;
                assert!(dot(f, &ep.query) / (norm(f) * qn) >= 0.5);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let zero_frames = EnvConfig { num_frames: 0, ..tiny() };
        assert!(matches!(gen_episode(1, &zero_frames), Err(GlimpseError::Config { field: "num_frames", .. })));
        let too_long = EnvConfig { chain_len: 2, ..tiny() };
        assert!(matches!(gen_episode(1, &too_long), Err(GlimpseError::Config { field: "chain_len", .. })));
        let narrow = EnvConfig { feature_dim: 3, ..tiny() };
        assert!(gen_episode(1, &narrow).is_err());
    }

    #[test]
    fn answer_reward_definition() {
        let ep = gen_episode(7, &tiny()).unwrap();
        let cfg = RewardConfig::default();
        let truth = ep.oracle.answer_truth;
        assert_eq!(answer_reward(truth, &ep, &cfg).unwrap(), 1.0);
        assert_eq!(answer_reward(1 - truth, &ep, &cfg).unwrap(), 0.0);
        let total: f64 = (0..2).map(|c| answer_reward(c, &ep, &cfg).unwrap()).sum();
        assert_eq!(total, 1.0);
        assert!(matches!(answer_reward(2, &ep, &cfg), Err(GlimpseError::Domain(_))));
    }

    #[test]
    fn evidence_credit_is_consumed() {
        let cfg = EnvConfig::default();
        let ep = gen_episode(5, &cfg).unwrap();
        let first = ep.oracle.evidence_chain[0];
        let mut state = ReasoningState::initial(&ep);
        assert_eq!(evidence_reward(&state, first, &ep).unwrap(), 1.0);
        state.selected.push(first);
        assert_eq!(evidence_reward(&state, first, &ep).unwrap(), 0.0);
        let distractor = ep
            .objects
            .iter()
            .flatten()
            .find(|o| !o.oracle.is_evidence)
            .map(|o| (o.frame_index, o.object_index))
            .unwrap();
        assert_eq!(evidence_reward(&state, distractor, &ep).unwrap(), 0.0);
        assert!(evidence_reward(&state, (99, 0), &ep).is_err());
    }

    #[test]
    fn composite_reward_hand_values() {
        let cfg = EnvConfig::default();
        let ep = gen_episode(9, &cfg).unwrap();
        let chain = ep.oracle.evidence_chain.clone();
        let truth = ep.oracle.answer_truth;
        let r = score_selection(&chain, truth, &ep, &RewardConfig::with_alpha(0.5)).unwrap();
        assert!((r - 1.5).abs() < 1e-12);
        let r0 = score_selection(&chain[..1], truth, &ep, &RewardConfig::with_alpha(0.0)).unwrap();
        assert_eq!(r0, 1.0);
        assert_eq!(RewardConfig::default().alpha, 0.5);
        assert!(score_selection(&[], truth, &ep, &RewardConfig::default()).is_err());
    }
}
