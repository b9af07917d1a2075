//! Shared fixtures for the benchmarks.

use glimpse_core::env::{gen_episode_with_id, EnvConfig, RewardConfig};
use glimpse_core::{FeatureLayout, Limits, PolicyParams, VideoEpisode};

pub struct Fixture {
    pub env: EnvConfig,
    pub limits: Limits,
    pub reward: RewardConfig,
    pub episodes: Vec<VideoEpisode>,
    pub policy: PolicyParams,
}

impl Fixture {
    /// `n` default-config episodes and a fixed non-uniform linear policy.
    pub fn new(n: u64) -> Self {
        let env = EnvConfig::default();
        let limits = Limits::default();
        let episodes = (0..n).map(|i| gen_episode_with_id(i, 1000 + i, &env).expect("valid config")).collect();
        let mut policy = PolicyParams::zeros(FeatureLayout::new(env.feature_dim, env.num_classes, limits.k_max));
        for (i, w) in policy.weights.iter_mut().enumerate() {
            *w = 0.5 * (i as f64 * 0.7).sin();
        }
        Self { env, limits, reward: RewardConfig::default(), episodes, policy }
    }
}
