//! Policy-guided tree search over object-grounded reasoning states.
//!
//! Each rollout descends from the root with the PUCT rule
//! `Q + lambda * P * sqrt(sum_b N_b) / (1 + N_a)`, creates the first missing
//! child it reaches, expands it with policy priors, scores it by completing the
//! trajectory with the policy and evaluating the composite reward, then adds
//! the value to every edge on the path.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{score_selection, ObjectRef, RewardConfig, VideoEpisode};
use crate::error::{GlimpseError, Result};
use crate::policy::{action_distribution, greedy_from, sample_from, PolicyParams};
use crate::seeds::rng_from;
use crate::state::{transition, Action, Limits, ReasoningState, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafEval {
    /// Complete with the most probable action at each step.
    Greedy,
    /// Complete by sampling from the policy.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MctsConfig {
    pub n_rollouts: usize,
    pub lambda: f64,
    pub leaf_eval: LeafEval,
    /// Prior mass moved onto a seed trajectory's actions along its path.
    /// Ignored when no seed trajectory is given; zero disables seeding.
    pub proposal_weight: f64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            n_rollouts: 32,
            lambda: 1.0,
            leaf_eval: LeafEval::Greedy,
            proposal_weight: 0.5,
        }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rollouts == 0 {
            return Err(GlimpseError::config("n_rollouts", "must be at least 1"));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(GlimpseError::config("lambda", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.proposal_weight) {
            return Err(GlimpseError::config("proposal_weight", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// How a completed leaf trajectory is turned into a value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LeafValue {
    /// Composite answer-plus-evidence reward; reads hidden episode fields.
    Reward(RewardConfig),
    /// `exp` of the mean per-action log-probability of the full trajectory
    /// under the policy; usable at inference time.
    Confidence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub action: Action,
    pub visits: u32,
    pub value_sum: f64,
    pub prior: f64,
    pub child: Option<usize>,
}

impl Edge {
    /// `W / N`, zero for unvisited edges.
    pub fn q(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.value_sum / f64::from(self.visits)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchNode {
    pub state: ReasoningState,
    pub edges: Vec<Edge>,
    pub expanded: bool,
    pub is_terminal: bool,
    /// Actions the leaf evaluation appended to reach an answer.
    pub completion: Option<Vec<Action>>,
    proposal_depth: Option<usize>,
}

impl SearchNode {
    pub fn new(state: ReasoningState) -> Self {
        let is_terminal = state.terminated;
        Self {
            state,
            edges: Vec::new(),
            expanded: false,
            is_terminal,
            completion: None,
            proposal_depth: None,
        }
    }

    pub fn total_visits(&self) -> u32 {
        self.edges.iter().map(|e| e.visits).sum()
    }
}

/// PUCT score of one edge given the parent's total visit count.
pub fn puct_score(edge: &Edge, sqrt_total: f64, lambda: f64) -> f64 {
    edge.q() + lambda * edge.prior * sqrt_total / (1.0 + f64::from(edge.visits))
}

/// Index of the PUCT-maximizing edge. Ties go to the larger prior, then the
/// smaller action.
pub fn puct_select(node: &SearchNode, lambda: f64) -> Result<usize> {
    if node.is_terminal {
        return Err(GlimpseError::State("cannot select from a terminal node".into()));
    }
    if node.edges.is_empty() {
        return Err(GlimpseError::State("node has no edges".into()));
    }
    let sqrt_total = f64::from(node.total_visits()).sqrt();
    let mut best = 0;
    let mut best_score = puct_score(&node.edges[0], sqrt_total, lambda);
    for (i, edge) in node.edges.iter().enumerate().skip(1) {
        let score = puct_score(edge, sqrt_total, lambda);
        let incumbent = &node.edges[best];
        let better = score > best_score
            || (score == best_score
                && (edge.prior > incumbent.prior
                    || (edge.prior == incumbent.prior && edge.action < incumbent.action)));
        if better {
            best = i;
            best_score = score;
        }
    }
    Ok(best)
}

/// Creates one zero-count edge per legal action with policy priors.
pub fn expand(
    node: &mut SearchNode,
    policy: &PolicyParams,
    episode: &VideoEpisode,
    limits: &Limits,
) -> Result<()> {
    if node.is_terminal {
        return Err(GlimpseError::State("cannot expand a terminal node".into()));
    }
    if node.expanded {
        return Err(GlimpseError::State("node already expanded".into()));
    }
    node.edges = action_distribution(policy, &node.state, episode, limits)?
        .into_iter()
        .map(|(action, prior)| Edge {
            action,
            visits: 0,
            value_sum: 0.0,
            prior,
            child: None,
        })
        .collect();
    node.expanded = true;
    Ok(())
}

/// Value of a leaf: the composite reward of its completed trajectory, along
/// with the completion actions (empty for terminal states).
pub fn evaluate_leaf(
    state: &ReasoningState,
    policy: &PolicyParams,
    episode: &VideoEpisode,
    reward: &RewardConfig,
    limits: &Limits,
    mode: LeafEval,
    seed: u64,
) -> Result<(f64, Vec<Action>)> {
    let (selected, answer, tail) = complete_leaf(state, policy, episode, limits, mode, seed)?;
    Ok((score_selection(&selected, answer, episode, reward)?, tail))
}

fn complete_leaf(
    state: &ReasoningState,
    policy: &PolicyParams,
    episode: &VideoEpisode,
    limits: &Limits,
    mode: LeafEval,
    seed: u64,
) -> Result<(Vec<ObjectRef>, usize, Vec<Action>)> {
    if state.terminated {
        let answer = state
            .answer
            .ok_or_else(|| GlimpseError::State("terminated state without answer".into()))?;
        return Ok((state.selected.clone(), answer, Vec::new()));
    }
    let traj = match mode {
        LeafEval::Greedy => greedy_from(policy, episode, state.clone(), limits)?,
        LeafEval::Sampled => {
            sample_from(policy, episode, state.clone(), limits, &mut rng_from(seed))?
        }
    };
    let mut selected = state.selected.clone();
    selected.extend(traj.selections());
    let answer = traj
        .answer
        .ok_or_else(|| GlimpseError::State("completion did not answer".into()))?;
    Ok((selected, answer, traj.actions()))
}

#[allow(clippy::too_many_arguments)]
fn leaf_value(
    path_actions: &[Action],
    state: &ReasoningState,
    policy: &PolicyParams,
    episode: &VideoEpisode,
    limits: &Limits,
    value: &LeafValue,
    mode: LeafEval,
    seed: u64,
) -> Result<(f64, Vec<Action>)> {
    match value {
        LeafValue::Reward(reward) => {
            evaluate_leaf(state, policy, episode, reward, limits, mode, seed)
        }
        LeafValue::Confidence => {
            let (_, _, tail) = complete_leaf(state, policy, episode, limits, mode, seed)?;
            let mut actions = path_actions.to_vec();
            actions.extend_from_slice(&tail);
            let traj = Trajectory::replay(episode, &actions, limits)?;
            let lp = crate::policy::trajectory_log_prob(policy, &traj, episode, limits)?;
            Ok(((lp / actions.len() as f64).exp(), tail))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
    pub rollouts: usize,
    pub episode_id: u64,
}

impl SearchTree {
    pub fn root(&self) -> &SearchNode {
        &self.nodes[0]
    }

    /// Adds `value` to every edge on the path.
    pub fn backup(&mut self, path: &[(usize, usize)], value: f64) {
        for &(node, edge) in path {
            let e = &mut self.nodes[node].edges[edge];
            e.visits += 1;
            e.value_sum += value;
        }
    }

    /// Writes one JSON line per edge: node, depth, action, N, W, P, Q.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| GlimpseError::io(path, e))?,
        );
        for (id, node) in self.nodes.iter().enumerate() {
            for edge in &node.edges {
                let row = EdgeDump {
                    node: id,
                    depth: node.state.step,
                    action: edge.action,
                    visits: edge.visits,
                    value_sum: edge.value_sum,
                    prior: edge.prior,
                    q: edge.q(),
                    child: edge.child,
                };
                let line = serde_json::to_string(&row).expect("edge serializes");
                writeln!(out, "{line}").map_err(|e| GlimpseError::io(path, e))?;
            }
        }
        out.flush().map_err(|e| GlimpseError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDump {
    pub node: usize,
    pub depth: usize,
    pub action: Action,
    pub visits: u32,
    pub value_sum: f64,
    pub prior: f64,
    pub q: f64,
    pub child: Option<usize>,
}

fn expand_node(
    tree: &mut SearchTree,
    id: usize,
    policy: &PolicyParams,
    episode: &VideoEpisode,
    limits: &Limits,
    cfg: &MctsConfig,
    proposal: Option<&[Action]>,
) -> Result<()> {
    let node = &mut tree.nodes[id];
    expand(node, policy, episode, limits)?;
    if let (Some(depth), Some(seed)) = (node.proposal_depth, proposal) {
        if let Some(&target) = seed.get(depth) {
            if node.edges.iter().any(|e| e.action == target) {
                let w = cfg.proposal_weight;
                for e in &mut node.edges {
                    e.prior = (1.0 - w) * e.prior + if e.action == target { w } else { 0.0 };
                }
            }
        }
    }
    Ok(())
}

/// Runs `cfg.n_rollouts` select/expand/evaluate/backup iterations. An
/// optional seed trajectory biases priors along its own path.
#[allow(clippy::too_many_arguments)]
pub fn search(
    episode: &VideoEpisode,
    policy: &PolicyParams,
    cfg: &MctsConfig,
    limits: &Limits,
    value: &LeafValue,
    seed: u64,
    proposal: Option<&[Action]>,
) -> Result<SearchTree> {
    cfg.validate()?;
    let mut root = SearchNode::new(ReasoningState::initial(episode));
    root.proposal_depth = proposal.map(|_| 0);
    let mut tree = SearchTree {
        nodes: vec![root],
        rollouts: 0,
        episode_id: episode.episode_id,
    };
    expand_node(&mut tree, 0, policy, episode, limits, cfg, proposal)?;

    for rollout in 0..cfg.n_rollouts {
        let mut id = 0;
        let mut path = Vec::new();
        loop {
            if tree.nodes[id].is_terminal {
                break;
            }
            if !tree.nodes[id].expanded {
                expand_node(&mut tree, id, policy, episode, limits, cfg, proposal)?;
                break;
            }
            let e = puct_select(&tree.nodes[id], cfg.lambda)?;
            path.push((id, e));
            id = match tree.nodes[id].edges[e].child {
                Some(child) => child,
                None => {
                    let parent = &tree.nodes[id];
                    let action = parent.edges[e].action;
                    let on_seed = match (parent.proposal_depth, proposal) {
                        (Some(d), Some(seq)) if seq.get(d) == Some(&action) => Some(d + 1),
                        _ => None,
                    };
                    let state = transition(&parent.state, action, episode, limits)?;
                    let mut child = SearchNode::new(state);
                    child.proposal_depth = on_seed;
                    tree.nodes.push(child);
                    let child_id = tree.nodes.len() - 1;
                    tree.nodes[id].edges[e].child = Some(child_id);
                    child_id
                }
            };
        }
        let leaf_seed = crate::seeds::derive_seed(seed, "leaf", rollout as u64);
        let path_actions: Vec<Action> = path
            .iter()
            .map(|&(n, e)| tree.nodes[n].edges[e].action)
            .collect();
        let (v, tail) = leaf_value(
            &path_actions,
            &tree.nodes[id].state,
            policy,
            episode,
            limits,
            value,
            cfg.leaf_eval,
            leaf_seed,
        )?;
        if tree.nodes[id].completion.is_none() {
            tree.nodes[id].completion = Some(tail);
        }
        tree.backup(&path, v);
        tree.rollouts += 1;
    }
    Ok(tree)
}

/// One root-to-leaf path through visited edges.
#[derive(Debug, Clone, PartialEq)]
pub struct TreePath {
    pub tree_actions: Vec<Action>,
    pub completion: Vec<Action>,
    pub mean_q: f64,
    pub root_visits: u32,
}

impl TreePath {
    pub fn actions(&self) -> Vec<Action> {
        let mut all = self.tree_actions.clone();
        all.extend_from_slice(&self.completion);
        all
    }
}

/// All paths through visited edges that end at a terminal node or at a leaf
/// with no visited children, in depth-first edge order.
pub fn tree_paths(tree: &SearchTree) -> Vec<TreePath> {
    let mut out = Vec::new();
    let mut stack: Vec<(usize, Vec<Action>, Vec<f64>, u32)> = vec![(0, Vec::new(), Vec::new(), 0)];
    while let Some((id, actions, qs, root_visits)) = stack.pop() {
        let node = &tree.nodes[id];
        let visited: Vec<&Edge> = node
            .edges
            .iter()
            .filter(|e| e.visits > 0 && e.child.is_some())
            .collect();
        if id != 0 && (node.is_terminal || visited.is_empty()) {
            out.push(TreePath {
                tree_actions: actions,
                completion: node.completion.clone().unwrap_or_default(),
                mean_q: qs.iter().sum::<f64>() / qs.len() as f64,
                root_visits,
            });
            continue;
        }
        for edge in visited.into_iter().rev() {
            let mut a = actions.clone();
            a.push(edge.action);
            let mut q = qs.clone();
            q.push(edge.q());
            let rv = if id == 0 { edge.visits } else { root_visits };
            stack.push((edge.child.expect("visited edge has a child"), a, q, rv));
        }
    }
    out
}

/// Ranks paths by mean edge Q (descending), then root-edge visits
/// (descending), then action sequence.
pub fn rank_paths(paths: &mut [TreePath]) {
    paths.sort_by(|a, b| {
        b.mean_q
            .total_cmp(&a.mean_q)
            .then(b.root_visits.cmp(&a.root_visits))
            .then_with(|| a.tree_actions.cmp(&b.tree_actions))
    });
}

/// Up to `k` best complete trajectories with rewards recomputed.
pub fn extract_top_trajectories(
    tree: &SearchTree,
    k: usize,
    episode: &VideoEpisode,
    limits: &Limits,
    reward: &RewardConfig,
) -> Result<Vec<Trajectory>> {
    if tree.rollouts == 0 {
        return Err(GlimpseError::State("tree has not been searched".into()));
    }
    let mut paths = tree_paths(tree);
    rank_paths(&mut paths);
    paths
        .iter()
        .take(k)
        .map(|p| {
            let mut traj = Trajectory::replay(episode, &p.actions(), limits)?;
            crate::env::trajectory_reward(&mut traj, episode, reward)?;
            Ok(traj)
        })
        .collect()
}
