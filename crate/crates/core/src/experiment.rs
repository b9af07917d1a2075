//! Experiment configuration and the five-stage pipeline run in memory.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{gen_episode_with_id, EnvConfig, RewardConfig, VideoEpisode};
use crate::error::{GlimpseError, Result};
use crate::infer::{evaluate, EvalReport, InferConfig};
use crate::pipeline::{build_mtdp_split, build_sft_dataset, DatasetSplit, SearchStageConfig, SftDataset};
use crate::policy::{FeatureLayout, PolicyKind, PolicyParams};
use crate::seeds::{derive_seed, rng_from};
use crate::state::Limits;
use crate::train::{train_grpo, train_sft, EpisodeIndex, GrpoConfig, GrpoOutcome, Scorer, SftConfig, SftOutcome};

/// Episode ids are offset per corpus so they never collide.
pub const RL_POOL_ID_BASE: u64 = 1_000_000;
pub const EVAL_ID_BASE: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train: usize,
    /// Episodes the SFT policy is screened on to form the MTDP split.
    pub rl_pool: usize,
    pub eval: usize,
    /// The eval corpus depends only on this seed, so it stays fixed across runs.
    pub eval_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: 100,
            rl_pool: 200,
            eval: 200,
            eval_seed: 20_240_601,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// 0 selects the linear policy.
    pub hidden_units: usize,
    pub temperature: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden_units: 0,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtdpConfig {
    pub fraction: f64,
}

impl Default for MtdpConfig {
    fn default() -> Self {
        Self { fraction: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub env: EnvConfig,
    pub limits: Limits,
    pub reward: RewardConfig,
    pub policy: PolicyConfig,
    pub search: SearchStageConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub mtdp: MtdpConfig,
    pub infer: InferConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| GlimpseError::Parse {
            path: "<config>".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GlimpseError::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| GlimpseError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GlimpseError::Parse {
            path: "<config>".into(),
            reason: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.limits.validate()?;
        self.reward.validate()?;
        self.search.mcts.validate()?;
        self.grpo.validate()?;
        self.infer.validate()?;
        if self.search.top_k == 0 {
            return Err(GlimpseError::config("search.top_k", "must be at least 1"));
        }
        if self.sft.batch_size == 0 {
            return Err(GlimpseError::config("sft.batch_size", "must be at least 1"));
        }
        if !(self.sft.learning_rate > 0.0 && self.sft.learning_rate.is_finite()) {
            return Err(GlimpseError::config("sft.learning_rate", "must be positive and finite"));
        }
        if !(self.mtdp.fraction > 0.0 && self.mtdp.fraction <= 1.0) {
            return Err(GlimpseError::config("mtdp.fraction", "must be in (0, 1]"));
        }
        if !(self.policy.temperature > 0.0 && self.policy.temperature.is_finite()) {
            return Err(GlimpseError::config("policy.temperature", "must be positive and finite"));
        }
        if self.corpus.train == 0 || self.corpus.eval == 0 {
            return Err(GlimpseError::config("corpus", "train and eval sizes must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(self.env.feature_dim, self.env.num_classes, self.limits.k_max)
    }

    /// Untrained policy: uniform at every state.
    pub fn initial_policy(&self, seed: u64) -> PolicyParams {
        let layout = self.layout();
        let p = if self.policy.hidden_units == 0 {
            PolicyParams::zeros(layout)
        } else {
            let mut rng = rng_from(derive_seed(seed, "policy-init", 0));
            PolicyParams::hidden(layout, self.policy.hidden_units, &mut rng)
        };
        p.with_temperature(self.policy.temperature)
    }

    pub fn policy_kind(&self) -> PolicyKind {
        if self.policy.hidden_units == 0 {
            PolicyKind::Linear
        } else {
            PolicyKind::Hidden { hidden: self.policy.hidden_units }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusKind {
    Train,
    RlPool,
    Eval,
}

impl CorpusKind {
    pub fn name(self) -> &'static str {
        match self {
            CorpusKind::Train => "train",
            CorpusKind::RlPool => "rl_pool",
            CorpusKind::Eval => "eval",
        }
    }
}

/// Generates one corpus. Train and RL-pool episodes follow `seed`; eval
/// episodes follow `corpus.eval_seed`.
pub fn gen_corpus(cfg: &ExperimentConfig, kind: CorpusKind, seed: u64) -> Result<Vec<VideoEpisode>> {
    let (n, base, root) = match kind {
        CorpusKind::Train => (cfg.corpus.train, 0, seed),
        CorpusKind::RlPool => (cfg.corpus.rl_pool, RL_POOL_ID_BASE, seed),
        CorpusKind::Eval => (cfg.corpus.eval, EVAL_ID_BASE, cfg.corpus.eval_seed),
    };
    (0..n as u64)
        .map(|i| {
            let id = base + i;
            gen_episode_with_id(id, derive_seed(root, kind.name(), i), &cfg.env)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub train: Vec<VideoEpisode>,
    pub rl_pool: Vec<VideoEpisode>,
    pub eval: Vec<VideoEpisode>,
}

impl Corpora {
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            train: gen_corpus(cfg, CorpusKind::Train, seed)?,
            rl_pool: gen_corpus(cfg, CorpusKind::RlPool, seed)?,
            eval: gen_corpus(cfg, CorpusKind::Eval, seed)?,
        })
    }
}

pub fn redact_all(episodes: &[VideoEpisode]) -> Vec<VideoEpisode> {
    episodes.iter().map(VideoEpisode::redacted).collect()
}

pub fn stage_search(cfg: &ExperimentConfig, train: &[VideoEpisode], seed: u64) -> Result<SftDataset> {
    build_sft_dataset(
        train,
        &cfg.initial_policy(seed),
        &cfg.search,
        &cfg.limits,
        &cfg.reward,
        derive_seed(seed, "stage-search", 0),
    )
}

/// Trains on the supervised pairs. `views` need only the visible fields.
pub fn stage_sft(
    cfg: &ExperimentConfig,
    dataset: &SftDataset,
    views: &[VideoEpisode],
    seed: u64,
) -> Result<SftOutcome> {
    train_sft(
        &cfg.initial_policy(seed),
        &dataset.pairs,
        &EpisodeIndex::new(views),
        &cfg.limits,
        &cfg.sft,
        derive_seed(seed, "stage-sft", 0),
    )
}

/// Screens the RL pool with the SFT policy; the scorer is the only reader of
/// hidden fields.
pub fn stage_mtdp_split(
    cfg: &ExperimentConfig,
    sft: &SftOutcome,
    dataset: &SftDataset,
    rl_pool: &[VideoEpisode],
    seed: u64,
) -> Result<DatasetSplit> {
    build_mtdp_split(
        rl_pool,
        &sft.policy,
        dataset.records.clone(),
        cfg.mtdp.fraction,
        &cfg.limits,
        derive_seed(seed, "stage-mtdp", 0),
    )
}

/// GRPO on the split's episodes: policy computation on `views`, rewards from
/// `truth`.
pub fn stage_grpo(
    cfg: &ExperimentConfig,
    sft: &SftOutcome,
    split: &DatasetSplit,
    views: &[VideoEpisode],
    truth: &[VideoEpisode],
    seed: u64,
) -> Result<GrpoOutcome> {
    let index = EpisodeIndex::new(views);
    let chosen = split
        .mtdp_episode_ids
        .iter()
        .map(|&id| index.get(id).cloned())
        .collect::<Result<Vec<_>>>()?;
    train_grpo(
        &sft.policy,
        &sft.reference,
        &chosen,
        &cfg.limits,
        &Scorer::new(truth, cfg.reward),
        &cfg.grpo,
        derive_seed(seed, "stage-grpo", 0),
    )
}

pub fn stage_eval(
    cfg: &ExperimentConfig,
    policy: &PolicyParams,
    eval: &[VideoEpisode],
    seed: u64,
) -> Result<EvalReport> {
    evaluate(
        policy,
        eval,
        &cfg.limits,
        &cfg.infer,
        &cfg.reward,
        derive_seed(seed, "stage-eval", 0),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub dataset: SftDataset,
    pub sft: SftOutcome,
    pub split: DatasetSplit,
    pub grpo: GrpoOutcome,
    pub baseline_eval: EvalReport,
    pub sft_eval: EvalReport,
    pub grpo_eval: EvalReport,
}

/// All five stages plus baseline and SFT-only evaluations.
pub fn run_pipeline(cfg: &ExperimentConfig, seed: u64) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let corpora = Corpora::generate(cfg, seed)?;
    let dataset = stage_search(cfg, &corpora.train, seed)?;
    let sft = stage_sft(cfg, &dataset, &redact_all(&corpora.train), seed)?;
    let split = stage_mtdp_split(cfg, &sft, &dataset, &corpora.rl_pool, seed)?;
    let grpo = stage_grpo(cfg, &sft, &split, &redact_all(&corpora.rl_pool), &corpora.rl_pool, seed)?;
    Ok(PipelineOutcome {
        baseline_eval: stage_eval(cfg, &cfg.initial_policy(seed), &corpora.eval, seed)?,
        sft_eval: stage_eval(cfg, &sft.policy, &corpora.eval, seed)?,
        grpo_eval: stage_eval(cfg, &grpo.policy, &corpora.eval, seed)?,
        dataset,
        sft,
        split,
        grpo,
    })
}
