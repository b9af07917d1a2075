//! Training behaviour on generated corpora: supervised fit, KL anchoring,
//! the reward gain from GRPO, and isolation from hidden episode fields.

use glimpse_core::env::{gen_episode_with_id, EnvConfig};
use glimpse_core::experiment::{
    redact_all, run_pipeline, stage_grpo, stage_mtdp_split, stage_search, stage_sft, Corpora, CorpusConfig,
    ExperimentConfig,
};
use glimpse_core::infer::{infer, InferConfig};
use glimpse_core::policy::{action_log_probs, argmax_action};
use glimpse_core::seeds::derive_seed;
use glimpse_core::train::{mean_visited_kl, train_grpo, GrpoConfig, Scorer};

fn small_corpus(train: usize, rl_pool: usize, eval: usize) -> ExperimentConfig {
    ExperimentConfig {
        corpus: CorpusConfig { train, rl_pool, eval, ..CorpusConfig::default() },
        ..ExperimentConfig::default()
    }
}

#[test]
fn supervised_policy_reproduces_searched_actions() {
    // the default step size underfits the selection steps within 50 epochs
    let mut cfg = small_corpus(100, 1, 1);
    cfg.sft.learning_rate = 0.1;
    let corpora = Corpora::generate(&cfg, 458).unwrap();
    let ds = stage_search(&cfg, &corpora.train, 458).unwrap();
    let sft = stage_sft(&cfg, &ds, &redact_all(&corpora.train), 458).unwrap();
    assert!(sft.loss_history.last().unwrap() <= sft.loss_history.first().unwrap());
    let agree = ds
        .pairs
        .iter()
        .filter(|p| {
            let ep = corpora.train.iter().find(|e| e.episode_id == p.episode_id).unwrap();
            let lps = action_log_probs(&sft.policy, &p.state, ep, &cfg.limits).unwrap();
            lps[argmax_action(&lps)].0 == p.action
        })
        .count();
    let rate = agree as f64 / ds.pairs.len() as f64;
    assert!(rate >= 0.9, "top-1 agreement {rate:.3}");
}

#[test]
fn heavy_kl_penalty_keeps_policy_at_reference() {
    let cfg = small_corpus(40, 40, 1);
    let corpora = Corpora::generate(&cfg, 7).unwrap();
    let ds = stage_search(&cfg, &corpora.train, 7).unwrap();
    let sft = stage_sft(&cfg, &ds, &corpora.train, 7).unwrap();
    let scorer = Scorer::new(&corpora.rl_pool, cfg.reward);
    // a step small enough for the stiff penalty to stay stable
    let kl_after = |beta: f64| {
        let grpo = GrpoConfig { beta, learning_rate: 1e-3, steps: 100, ..GrpoConfig::default() };
        let out = train_grpo(&sft.policy, &sft.reference, &corpora.rl_pool, &cfg.limits, &scorer, &grpo, 7).unwrap();
        mean_visited_kl(&out.policy, &sft.reference, &corpora.rl_pool, &cfg.limits, 4, 7).unwrap()
    };
    let (anchored, free) = (kl_after(100.0), kl_after(0.0));
    assert!(anchored < 0.01, "mean KL {anchored:e}");
    assert!(anchored < free, "anchored {anchored:e} vs unpenalized {free:e}");
}

#[test]
fn trained_policy_solves_degenerate_episodes() {
    let mut cfg = small_corpus(60, 1, 1);
    cfg.env = EnvConfig {
        num_frames: 1,
        objects_min: 1,
        objects_max: 1,
        feature_dim: 4,
        chain_len: 1,
        distractors: 0,
        num_classes: 2,
        max_chain_gap: 2,
    };
    let corpora = Corpora::generate(&cfg, 526).unwrap();
    let ds = stage_search(&cfg, &corpora.train, 526).unwrap();
    let sft = stage_sft(&cfg, &ds, &redact_all(&corpora.train), 526).unwrap();
    let correct = (0..100u64)
        .filter(|&s| {
            let ep = gen_episode_with_id(s, derive_seed(526, "probe", s), &cfg.env).unwrap();
            infer(&sft.policy, &ep, &cfg.limits, &InferConfig::default(), s).unwrap().answer == ep.oracle.answer_truth
        })
        .count();
    assert!(correct > 95, "{correct}/100 correct");
}

/// One-sided paired t statistic threshold at 5% for 19 degrees of freedom.
const T_CRIT_19: f64 = 1.729;

#[test]
fn grpo_raises_mean_reward_over_supervised_policy() {
    let cfg = small_corpus(100, 200, 100);
    let diffs: Vec<f64> = (0..20u64)
        .map(|seed| {
            let o = run_pipeline(&cfg, seed).unwrap();
            o.grpo_eval.mean_reward - o.sft_eval.mean_reward
        })
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    assert!(t > T_CRIT_19, "mean gain {mean:.4}, t = {t:.2}");
}

#[test]
fn training_stages_never_read_hidden_fields() {
    let cfg = small_corpus(30, 60, 1);
    let corpora = Corpora::generate(&cfg, 603).unwrap();
    let ds = stage_search(&cfg, &corpora.train, 603).unwrap();
    let train_views = redact_all(&corpora.train);
    assert!(train_views.iter().all(|e| e.oracle.evidence_chain.is_empty()));
    let full = stage_sft(&cfg, &ds, &corpora.train, 603).unwrap();
    let blind = stage_sft(&cfg, &ds, &train_views, 603).unwrap();
    assert_eq!(full, blind);

    let split = stage_mtdp_split(&cfg, &full, &ds, &corpora.rl_pool, 603).unwrap();
    assert!(!split.mtdp_episode_ids.is_empty());
    let pool_views = redact_all(&corpora.rl_pool);
    let with_truth = stage_grpo(&cfg, &full, &split, &corpora.rl_pool, &corpora.rl_pool, 603).unwrap();
    let redacted = stage_grpo(&cfg, &full, &split, &pool_views, &corpora.rl_pool, 603).unwrap();
    assert_eq!(with_truth, redacted);
}
