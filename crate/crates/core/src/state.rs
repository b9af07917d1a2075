//! Reasoning state, object-selection actions and the grounded transition.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::env::{ObjectRef, VideoEpisode};
use crate::error::{GlimpseError, Result};

/// Step limits shared by search, sampling and replay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    /// Maximum number of object selections before an answer is forced.
    pub k_max: usize,
    /// Frames reachable ahead of the cursor.
    pub window: usize,
    /// EMA retention of the state summary.
    pub gamma: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            k_max: 6,
            window: 2,
            gamma: 0.5,
        }
    }
}

impl Limits {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(GlimpseError::config("k_max", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(GlimpseError::config("gamma", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Select orders before Answer; selections order by `(frame, object)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Select { frame: usize, object: usize },
    Answer(usize),
}

impl Action {
    pub fn select((frame, object): ObjectRef) -> Self {
        Action::Select { frame, object }
    }

    pub fn object(&self) -> Option<ObjectRef> {
        match *self {
            Action::Select { frame, object } => Some((frame, object)),
            Action::Answer(_) => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Select { frame, object } => write!(f, "select({frame},{object})"),
            Action::Answer(c) => write!(f, "answer({c})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningState {
    pub summary: Vec<f64>,
    pub frame_cursor: usize,
    pub step: usize,
    pub selected: Vec<ObjectRef>,
    pub terminated: bool,
    pub answer: Option<usize>,
}

impl ReasoningState {
    /// Summary starts at the normalized query.
    pub fn initial(episode: &VideoEpisode) -> Self {
        let n = crate::env::norm(&episode.query);
        let summary = if n > 0.0 {
            episode.query.iter().map(|x| x / n).collect()
        } else {
            episode.query.clone()
        };
        Self {
            summary,
            frame_cursor: 0,
            step: 0,
            selected: Vec::new(),
            terminated: false,
            answer: None,
        }
    }

    fn ensure_live(&self) -> Result<()> {
        if self.terminated {
            Err(GlimpseError::State("state already terminated".into()))
        } else {
            Ok(())
        }
    }
}

pub fn initial_state(episode: &VideoEpisode) -> ReasoningState {
    ReasoningState::initial(episode)
}

/// Legal actions in deterministic order: selections by `(frame, object)`,
/// then answers by class.
pub fn legal_actions(
    state: &ReasoningState,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<Vec<Action>> {
    state.ensure_live()?;
    let mut actions = Vec::new();
    if state.step < limits.k_max {
        let last = (state.frame_cursor + limits.window).min(episode.num_frames - 1);
        for t in state.frame_cursor..=last {
            for m in 0..episode.objects_in_frame(t) {
                actions.push(Action::Select { frame: t, object: m });
            }
        }
    }
    if state.step >= 1 {
        actions.extend((0..episode.num_classes).map(Action::Answer));
    }
    Ok(actions)
}

/// Checks that `action` is legal in `state` without building the full set.
pub fn check_legal(
    state: &ReasoningState,
    action: Action,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<()> {
    state.ensure_live()?;
    match action {
        Action::Select { frame, object } => {
            episode.object((frame, object))?;
            if frame < state.frame_cursor {
                return Err(GlimpseError::Monotonicity {
                    cursor: state.frame_cursor,
                    requested: frame,
                });
            }
            if state.step >= limits.k_max {
                return Err(GlimpseError::State(format!(
                    "selection limit {} reached, only answers are legal",
                    limits.k_max
                )));
            }
            if frame > state.frame_cursor + limits.window {
                return Err(GlimpseError::Domain(format!(
                    "frame {frame} outside window {} of cursor {}",
                    limits.window, state.frame_cursor
                )));
            }
        }
        Action::Answer(c) => {
            if state.step == 0 {
                return Err(GlimpseError::State(
                    "answer before any object selection".into(),
                ));
            }
            if c >= episode.num_classes {
                return Err(GlimpseError::Domain(format!(
                    "answer {c} outside [0, {})",
                    episode.num_classes
                )));
            }
        }
    }
    Ok(())
}

/// Grounded transition: `h' = gamma * h + (1 - gamma) * f` for a selection,
/// termination for an answer. Never mutates its input.
pub fn transition(
    state: &ReasoningState,
    action: Action,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<ReasoningState> {
    check_legal(state, action, episode, limits)?;
    let mut next = state.clone();
    match action {
        Action::Select { frame, object } => {
            let f = &episode.object((frame, object))?.features;
            let g = limits.gamma;
            for (h, x) in next.summary.iter_mut().zip(f) {
                *h = g * *h + (1.0 - g) * x;
            }
            next.frame_cursor = frame;
            next.step += 1;
            next.selected.push((frame, object));
        }
        Action::Answer(c) => {
            next.terminated = true;
            next.answer = Some(c);
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// State the action was taken from.
    pub state: ReasoningState,
    pub action: Action,
    pub log_prob: f64,
    pub evidence_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: u64,
    pub steps: Vec<Step>,
    pub answer: Option<usize>,
    pub total_reward: Option<f64>,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn selections(&self) -> Vec<ObjectRef> {
        self.steps.iter().filter_map(|s| s.action.object()).collect()
    }

    /// Number of object-selection steps.
    pub fn num_selections(&self) -> usize {
        self.steps.iter().filter(|s| s.action.object().is_some()).count()
    }

    pub fn recorded_log_prob(&self) -> f64 {
        self.steps.iter().map(|s| s.log_prob).sum()
    }

    /// Replays `actions` from the initial state, checking legality and
    /// recording evidence credit. Log-probabilities are left at zero.
    pub fn replay(episode: &VideoEpisode, actions: &[Action], limits: &Limits) -> Result<Self> {
        let mut state = ReasoningState::initial(episode);
        let mut steps = Vec::with_capacity(actions.len());
        for &action in actions {
            let evidence_reward = match action.object() {
                Some(obj) => crate::env::evidence_reward(&state, obj, episode)?,
                None => 0.0,
            };
            let next = transition(&state, action, episode, limits)?;
            steps.push(Step {
                state,
                action,
                log_prob: 0.0,
                evidence_reward,
            });
            state = next;
        }
        Ok(Self {
            episode_id: episode.episode_id,
            steps,
            answer: state.answer,
            total_reward: None,
        })
    }
}
