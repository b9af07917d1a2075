//! Featurized softmax policy over legal actions with exact log-probabilities
//! and analytic score-function gradients.
//!
//! Action feature layout `psi(h, a)` for feature dimension `D` and `C` classes
//! (`P = 3D + C + 7` entries; unused blocks are zero):
//!
//! | offset            | len | Select(t, m)                    | Answer(c)                        |
//! |-------------------|-----|---------------------------------|----------------------------------|
//! | 0                 | D   | h                               | h                                |
//! | D                 | D   | f                               | 0                                |
//! | 2D                | D   | h * f (elementwise)             | 0                                |
//! | 3D                | 1   | dot(h, f)                       | 0                                |
//! | 3D + 1            | 1   | (t - t_cur) / T                 | 0                                |
//! | 3D + 2            | 1   | 1 if (t, m) already selected    | 0                                |
//! | 3D + 3            | C   | 0                               | one_hot(c)                       |
//! | 3D + C + 3        | 1   | 0                               | cos(2 pi (c - s) / C)            |
//! | 3D + C + 4        | 1   | 0                               | k / K_max                        |
//! | 3D + C + 5        | 1   | 0                               | 1                                |
//! | 3D + C + 6        | 1   | 1                               | 1                                |
//!
//! `s` is the sum of attribute labels read from the features of the selected
//! objects. Logits are `theta . psi / tau` for the linear policy; the optional
//! hidden-layer policy adds `v . tanh(W psi)`.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{dot, read_label, VideoEpisode};
use crate::error::{GlimpseError, Result};
use crate::state::{legal_actions, transition, Action, Limits, ReasoningState, Step, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub k_max: usize,
}

impl FeatureLayout {
    pub fn new(feature_dim: usize, num_classes: usize, k_max: usize) -> Self {
        Self {
            feature_dim,
            num_classes,
            k_max,
        }
    }

    pub fn len(&self) -> usize {
        3 * self.feature_dim + self.num_classes + 7
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn summary(&self) -> usize {
        0
    }
    pub fn object(&self) -> usize {
        self.feature_dim
    }
    pub fn product(&self) -> usize {
        2 * self.feature_dim
    }
    pub fn alignment(&self) -> usize {
        3 * self.feature_dim
    }
    pub fn frame_offset(&self) -> usize {
        3 * self.feature_dim + 1
    }
    pub fn repeat(&self) -> usize {
        3 * self.feature_dim + 2
    }
    pub fn class(&self) -> usize {
        3 * self.feature_dim + 3
    }
    pub fn phase(&self) -> usize {
        3 * self.feature_dim + self.num_classes + 3
    }
    pub fn progress(&self) -> usize {
        3 * self.feature_dim + self.num_classes + 4
    }
    pub fn answer_indicator(&self) -> usize {
        3 * self.feature_dim + self.num_classes + 5
    }
    pub fn bias(&self) -> usize {
        3 * self.feature_dim + self.num_classes + 6
    }

    fn check(&self, episode: &VideoEpisode) -> Result<()> {
        if episode.feature_dim() != self.feature_dim || episode.num_classes != self.num_classes {
            return Err(GlimpseError::Domain(format!(
                "policy layout (D={}, C={}) does not match episode {} (D={}, C={})",
                self.feature_dim,
                self.num_classes,
                episode.episode_id,
                episode.feature_dim(),
                episode.num_classes
            )));
        }
        Ok(())
    }
}

/// `psi(h, a)`; see the module docs for the layout.
pub fn action_features(
    state: &ReasoningState,
    action: Action,
    episode: &VideoEpisode,
    layout: &FeatureLayout,
) -> Result<Vec<f64>> {
    layout.check(episode)?;
    let d = layout.feature_dim;
    let h = &state.summary;
    let mut psi = vec![0.0; layout.len()];
    psi[..d].copy_from_slice(h);
    match action {
        Action::Select { frame, object } => {
            let f = &episode.object((frame, object))?.features;
            psi[layout.object()..layout.object() + d].copy_from_slice(f);
            for i in 0..d {
                psi[layout.product() + i] = h[i] * f[i];
            }
            psi[layout.alignment()] = dot(h, f);
            psi[layout.frame_offset()] =
                (frame as f64 - state.frame_cursor as f64) / episode.num_frames as f64;
            if state.selected.contains(&(frame, object)) {
                psi[layout.repeat()] = 1.0;
            }
        }
        Action::Answer(c) => {
            if c >= layout.num_classes {
                return Err(GlimpseError::Domain(format!("answer {c} outside class range")));
            }
            psi[layout.class() + c] = 1.0;
            let mut label_sum = 0usize;
            for &obj in &state.selected {
                label_sum += read_label(&episode.object(obj)?.features, layout.num_classes);
            }
            let cls = layout.num_classes as f64;
            let diff = c as f64 - label_sum as f64;
            psi[layout.phase()] = (std::f64::consts::TAU * diff / cls).cos();
            psi[layout.progress()] = state.step as f64 / layout.k_max as f64;
            psi[layout.answer_indicator()] = 1.0;
        }
    }
    psi[layout.bias()] = 1.0;
    Ok(psi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PolicyKind {
    Linear,
    /// Adds `v . tanh(W psi)` with `hidden` units on top of the linear logit.
    Hidden { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
    pub layout: FeatureLayout,
    pub temperature: f64,
    pub kind: PolicyKind,
}

impl PolicyParams {
    pub fn zeros(layout: FeatureLayout) -> Self {
        Self {
            weights: vec![0.0; layout.len()],
            layout,
            temperature: 1.0,
            kind: PolicyKind::Linear,
        }
    }

    /// Hidden-layer policy: linear part and output layer start at zero so the
    /// initial distribution is uniform; the input layer is random.
    pub fn hidden<R: Rng>(layout: FeatureLayout, hidden: usize, rng: &mut R) -> Self {
        let p = layout.len();
        let normal = Normal::new(0.0, 0.3).expect("valid std");
        let mut weights = vec![0.0; p + hidden * p + hidden];
        for w in &mut weights[p..p + hidden * p] {
            *w = normal.sample(rng);
        }
        Self {
            weights,
            layout,
            temperature: 1.0,
            kind: PolicyKind::Hidden { hidden },
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    fn expected_len(&self) -> usize {
        let p = self.layout.len();
        match self.kind {
            PolicyKind::Linear => p,
            PolicyKind::Hidden { hidden } => p + hidden * p + hidden,
        }
    }

    /// Logit and its gradient with respect to the weights, before temperature.
    fn logit_and_grad(&self, psi: &[f64]) -> (f64, Vec<f64>) {
        let p = self.layout.len();
        match self.kind {
            PolicyKind::Linear => (dot(&self.weights, psi), psi.to_vec()),
            PolicyKind::Hidden { hidden } => {
                let mut grad = vec![0.0; self.weights.len()];
                grad[..p].copy_from_slice(psi);
                let mut logit = dot(&self.weights[..p], psi);
                let v_off = p + hidden * p;
                for j in 0..hidden {
                    let row = &self.weights[p + j * p..p + (j + 1) * p];
                    let act = dot(row, psi).tanh();
                    let v = self.weights[v_off + j];
                    logit += v * act;
                    grad[v_off + j] = act;
                    let back = v * (1.0 - act * act);
                    for (g, x) in grad[p + j * p..p + (j + 1) * p].iter_mut().zip(psi) {
                        *g = back * x;
                    }
                }
                (logit, grad)
            }
        }
    }

    fn logit(&self, psi: &[f64]) -> f64 {
        let p = self.layout.len();
        match self.kind {
            PolicyKind::Linear => dot(&self.weights, psi),
            PolicyKind::Hidden { hidden } => {
                let v_off = p + hidden * p;
                let mut logit = dot(&self.weights[..p], psi);
                for j in 0..hidden {
                    let row = &self.weights[p + j * p..p + (j + 1) * p];
                    logit += self.weights[v_off + j] * dot(row, psi).tanh();
                }
                logit
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layout: self.layout,
            num_features: self.layout.len(),
            kind: self.kind,
            temperature: self.temperature,
            weights: self.weights.clone(),
        };
        let text = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
        std::fs::write(path, text + "\n").map_err(|e| GlimpseError::io(path, e))
    }

    /// Loads a checkpoint and checks it against the expected layout.
    pub fn load(path: &Path, expected: &FeatureLayout) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GlimpseError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| GlimpseError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(GlimpseError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.layout != *expected || ck.num_features != expected.len() {
            return Err(GlimpseError::Checkpoint(format!(
                "feature layout {:?} (P={}) does not match configured {:?} (P={})",
                ck.layout,
                ck.num_features,
                expected,
                expected.len()
            )));
        }
        let params = PolicyParams {
            weights: ck.weights,
            layout: ck.layout,
            temperature: ck.temperature,
            kind: ck.kind,
        };
        if params.weights.len() != params.expected_len() || !params.is_finite() {
            return Err(GlimpseError::Checkpoint("weight vector malformed".into()));
        }
        Ok(params)
    }
}

const CHECKPOINT_FORMAT: &str = "glimpse-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    layout: FeatureLayout,
    num_features: usize,
    kind: PolicyKind,
    temperature: f64,
    weights: Vec<f64>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Legal actions with their log-probabilities, in legal-action order.
pub fn action_log_probs(
    params: &PolicyParams,
    state: &ReasoningState,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<Vec<(Action, f64)>> {
    let actions = legal_actions(state, episode, limits)?;
    if actions.is_empty() {
        return Err(GlimpseError::State("no legal actions".into()));
    }
    let mut logits = Vec::with_capacity(actions.len());
    for &a in &actions {
        let psi = action_features(state, a, episode, &params.layout)?;
        logits.push(params.logit(&psi) / params.temperature);
    }
    Ok(actions.into_iter().zip(log_softmax(&logits)).collect())
}

pub fn action_distribution(
    params: &PolicyParams,
    state: &ReasoningState,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<Vec<(Action, f64)>> {
    Ok(action_log_probs(params, state, episode, limits)?
        .into_iter()
        .map(|(a, lp)| (a, lp.exp()))
        .collect())
}

/// Per-action probabilities and logit gradients at one state.
pub(crate) struct ScoredState {
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
    pub logit_grads: Vec<Vec<f64>>,
}

impl ScoredState {
    pub fn index_of(&self, action: Action) -> Option<usize> {
        self.actions.iter().position(|&a| a == action)
    }

    /// `E_p[d logit]` under this state's own distribution.
    pub fn mean_logit_grad(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.logit_grads[0].len()];
        for (lp, g) in self.log_probs.iter().zip(&self.logit_grads) {
            let p = lp.exp();
            for (m, x) in mean.iter_mut().zip(g) {
                *m += p * x;
            }
        }
        mean
    }
}

pub(crate) fn score_state(
    params: &PolicyParams,
    state: &ReasoningState,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<ScoredState> {
    let actions = legal_actions(state, episode, limits)?;
    if actions.is_empty() {
        return Err(GlimpseError::State("no legal actions".into()));
    }
    let mut logits = Vec::with_capacity(actions.len());
    let mut logit_grads = Vec::with_capacity(actions.len());
    for &a in &actions {
        let psi = action_features(state, a, episode, &params.layout)?;
        let (l, g) = params.logit_and_grad(&psi);
        logits.push(l / params.temperature);
        logit_grads.push(g);
    }
    Ok(ScoredState {
        actions,
        log_probs: log_softmax(&logits),
        logit_grads,
    })
}

/// `log pi(a | h)` and its gradient `(dl_a - sum_b p_b dl_b) / tau`.
pub fn log_prob_and_grad(
    params: &PolicyParams,
    state: &ReasoningState,
    action: Action,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<(f64, Vec<f64>)> {
    let scored = score_state(params, state, episode, limits)?;
    let idx = scored.index_of(action).ok_or_else(|| {
        GlimpseError::Domain(format!("action {action} is not legal in this state"))
    })?;
    let mean = scored.mean_logit_grad();
    let grad = scored.logit_grads[idx]
        .iter()
        .zip(&mean)
        .map(|(g, m)| (g - m) / params.temperature)
        .collect();
    Ok((scored.log_probs[idx], grad))
}

/// Sum of per-step log-probabilities, replaying the actions from the start.
pub fn trajectory_log_prob(
    params: &PolicyParams,
    traj: &Trajectory,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<f64> {
    if traj.num_selections() == 0 || traj.answer.is_none() {
        return Err(GlimpseError::State(
            "trajectory must select at least one object and answer".into(),
        ));
    }
    let mut state = ReasoningState::initial(episode);
    let mut total = 0.0;
    for step in &traj.steps {
        let lps = action_log_probs(params, &state, episode, limits)?;
        let lp = lps
            .iter()
            .find(|(a, _)| *a == step.action)
            .map(|&(_, lp)| lp)
            .ok_or_else(|| {
                GlimpseError::Domain(format!("replayed action {} is illegal", step.action))
            })?;
        total += lp;
        state = transition(&state, step.action, episode, limits)?;
    }
    Ok(total)
}

fn rollout(
    params: &PolicyParams,
    episode: &VideoEpisode,
    start: ReasoningState,
    limits: &Limits,
    mut choose: impl FnMut(&[(Action, f64)]) -> usize,
) -> Result<Trajectory> {
    let mut state = start;
    let mut steps = Vec::new();
    while !state.terminated {
        let lps = action_log_probs(params, &state, episode, limits)?;
        let (action, log_prob) = lps[choose(&lps)];
        let evidence_reward = match action.object() {
            Some(obj) => crate::env::evidence_reward(&state, obj, episode)?,
            None => 0.0,
        };
        let next = transition(&state, action, episode, limits)?;
        steps.push(Step {
            state,
            action,
            log_prob,
            evidence_reward,
        });
        state = next;
    }
    Ok(Trajectory {
        episode_id: episode.episode_id,
        steps,
        answer: state.answer,
        total_reward: None,
    })
}

/// Ancestral sampling until an answer.
pub fn sample_trajectory<R: Rng>(
    params: &PolicyParams,
    episode: &VideoEpisode,
    limits: &Limits,
    rng: &mut R,
) -> Result<Trajectory> {
    sample_from(params, episode, ReasoningState::initial(episode), limits, rng)
}

pub fn sample_from<R: Rng>(
    params: &PolicyParams,
    episode: &VideoEpisode,
    start: ReasoningState,
    limits: &Limits,
    rng: &mut R,
) -> Result<Trajectory> {
    rollout(params, episode, start, limits, |lps| {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, (_, lp)) in lps.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                return i;
            }
        }
        lps.len() - 1
    })
}

/// Index of the most probable action; ties go to the earliest legal action.
pub fn argmax_action(lps: &[(Action, f64)]) -> usize {
    let mut best = 0;
    for (i, (_, lp)) in lps.iter().enumerate().skip(1) {
        if *lp > lps[best].1 {
            best = i;
        }
    }
    best
}

/// Greedy completion from `start`.
pub fn greedy_from(
    params: &PolicyParams,
    episode: &VideoEpisode,
    start: ReasoningState,
    limits: &Limits,
) -> Result<Trajectory> {
    rollout(params, episode, start, limits, argmax_action)
}

pub fn greedy_trajectory(
    params: &PolicyParams,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<Trajectory> {
    greedy_from(params, episode, ReasoningState::initial(episode), limits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{gen_episode, EnvConfig};
    use crate::seeds::rng_from;

    fn layout_for(cfg: &EnvConfig) -> FeatureLayout {
        FeatureLayout::new(cfg.feature_dim, cfg.num_classes, Limits::default().k_max)
    }

    #[test]
    fn alignment_of_identical_unit_vectors_is_one() {
        let cfg = EnvConfig { feature_dim: 4, ..EnvConfig::default() };
        let mut ep = gen_episode(1, &cfg).unwrap();
        ep.query = vec![1.0, 0.0, 0.0, 0.0];
        ep.objects[0][0].features = vec![1.0, 0.0, 0.0, 0.0];
        let s = ReasoningState::initial(&ep);
        let psi = action_features(&s, Action::Select { frame: 0, object: 0 }, &ep, &layout_for(&cfg)).unwrap();
        assert_eq!(psi[layout_for(&cfg).alignment()], 1.0);
    }

    #[test]
    fn answer_one_hot() {
        let cfg = EnvConfig { num_classes: 2, ..EnvConfig::default() };
        let ep = gen_episode(1, &cfg).unwrap();
        let layout = layout_for(&cfg);
        let mut s = ReasoningState::initial(&ep);
        s = transition(&s, Action::Select { frame: 0, object: 0 }, &ep, &Limits::default()).unwrap();
        let psi = action_features(&s, Action::Answer(0), &ep, &layout).unwrap();
        assert_eq!(&psi[layout.class()..layout.class() + 2], &[1.0, 0.0]);
    }

    #[test]
    fn feature_length_matches_layout_formula() {
        for (d, c) in [(4, 2), (8, 4), (6, 3)] {
            let cfg = EnvConfig { feature_dim: d, num_classes: c, ..EnvConfig::default() };
            let ep = gen_episode(3, &cfg).unwrap();
            let layout = layout_for(&cfg);
            let s = ReasoningState::initial(&ep);
            let psi = action_features(&s, Action::Select { frame: 0, object: 0 }, &ep, &layout).unwrap();
            assert_eq!(psi.len(), 3 * d + c + 7);
        }
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let cfg = EnvConfig::default();
        let ep = gen_episode(5, &cfg).unwrap();
        let params = PolicyParams::zeros(layout_for(&cfg));
        let s = ReasoningState::initial(&ep);
        let dist = action_distribution(&params, &s, &ep, &Limits::default()).unwrap();
        let n = dist.len() as f64;
        for (_, p) in &dist {
            assert!((p - 1.0 / n).abs() < 1e-12);
        }
        let (lp, grad) = log_prob_and_grad(&params, &s, dist[0].0, &ep, &Limits::default()).unwrap();
        assert!((lp + n.ln()).abs() < 1e-12);
        assert_eq!(grad.len(), params.num_params());
    }

    #[test]
    fn hand_softmax_three_to_one() {
        let lps = log_softmax(&[3f64.ln(), 0.0]);
        assert!((lps[0].exp() - 0.75).abs() < 1e-12);
        assert!((lps[1].exp() - 0.25).abs() < 1e-12);
        let shifted = log_softmax(&[3f64.ln() + 7.5, 7.5]);
        assert!((shifted[0] - lps[0]).abs() < 1e-12);
    }

    #[test]
    fn forced_action_has_zero_log_prob_and_gradient() {
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
        let ep = gen_episode(7, &cfg).unwrap();
        let mut params = PolicyParams::zeros(layout_for(&cfg));
        params.weights.iter_mut().enumerate().for_each(|(i, w)| *w = (i as f64 * 0.37).sin());
        let s = ReasoningState::initial(&ep);
        let (lp, grad) = log_prob_and_grad(&params, &s, Action::Select { frame: 0, object: 0 }, &ep, &Limits::default()).unwrap();
        assert_eq!(lp, 0.0);
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
        let t = sample_trajectory(&params, &ep, &Limits::default(), &mut rng_from(1)).unwrap();
        assert_eq!(t.steps[0].action, Action::Select { frame: 0, object: 0 });
    }

    #[test]
    fn uniform_two_step_trajectory_log_prob() {
        // one frame with four objects, k_max 1: four selections, then two answers
        let cfg = EnvConfig {
            num_frames: 1,
            objects_min: 4,
            objects_max: 4,
            feature_dim: 4,
            chain_len: 1,
            distractors: 1,
            num_classes: 2,
            max_chain_gap: 2,
        };
        let ep = gen_episode(2, &cfg).unwrap();
        let limits = Limits { k_max: 1, ..Limits::default() };
        let params = PolicyParams::zeros(FeatureLayout::new(4, 2, 1));
        let traj = Trajectory::replay(&ep, &[Action::Select { frame: 0, object: 2 }, Action::Answer(1)], &limits).unwrap();
        let lp = trajectory_log_prob(&params, &traj, &ep, &limits).unwrap();
        assert!((lp - (-(4f64.ln()) - 2f64.ln())).abs() < 1e-12);
        assert!((lp.exp() - 0.25 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_trajectory_is_rejected() {
        let ep = gen_episode(2, &EnvConfig::default()).unwrap();
        let params = PolicyParams::zeros(layout_for(&EnvConfig::default()));
        let traj = Trajectory { episode_id: ep.episode_id, steps: vec![], answer: None, total_reward: None };
        assert!(trajectory_log_prob(&params, &traj, &ep, &Limits::default()).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_replayable() {
        let cfg = EnvConfig::default();
        let ep = gen_episode(8, &cfg).unwrap();
        let mut params = PolicyParams::zeros(layout_for(&cfg));
        params.weights.iter_mut().enumerate().for_each(|(i, w)| *w = ((i * 7) as f64).cos() * 0.5);
        let limits = Limits::default();
        let a = sample_trajectory(&params, &ep, &limits, &mut rng_from(42)).unwrap();
        let b = sample_trajectory(&params, &ep, &limits, &mut rng_from(42)).unwrap();
        assert_eq!(a, b);
        let replayed = trajectory_log_prob(&params, &a, &ep, &limits).unwrap();
        assert_eq!(replayed.to_bits(), a.recorded_log_prob().to_bits());
    }

    #[test]
    fn uniform_first_action_frequency() {
        // frame 0 holds two objects and the window is zero: two first actions
        let cfg = EnvConfig {
            num_frames: 1,
            objects_min: 2,
            objects_max: 2,
            feature_dim: 4,
            chain_len: 1,
            distractors: 0,
            num_classes: 2,
            max_chain_gap: 0,
        };
        let ep = gen_episode(3, &cfg).unwrap();
        let limits = Limits { window: 0, ..Limits::default() };
        let params = PolicyParams::zeros(layout_for(&cfg));
        let mut rng = rng_from(99);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| {
                let t = sample_trajectory(&params, &ep, &limits, &mut rng).unwrap();
                t.steps[0].action == Action::Select { frame: 0, object: 0 }
            })
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn checkpoint_round_trip_and_layout_check() {
        let dir = std::env::temp_dir().join(format!("glimpse-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("policy.json");
        let layout = FeatureLayout::new(8, 4, 6);
        let mut params = PolicyParams::zeros(layout);
        params.weights[3] = 0.125;
        params.save(&path).unwrap();
        assert_eq!(PolicyParams::load(&path, &layout).unwrap(), params);
        let other = FeatureLayout::new(6, 4, 6);
        assert!(matches!(PolicyParams::load(&path, &other), Err(GlimpseError::Checkpoint(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
