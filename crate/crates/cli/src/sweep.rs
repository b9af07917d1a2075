use std::path::Path;

use clap::ValueEnum;
use rayon::prelude::*;
use serde::Serialize;

use glimpse_core::experiment::{run_pipeline, ExperimentConfig};

use crate::errors::UsageError;
use crate::rundir::load_config;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Alpha,
    Rollouts,
    RlFraction,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Rollouts => "rollouts",
            SweepParam::RlFraction => "rl_fraction",
        }
    }

    /// Copy of `base` with the swept parameter set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::Alpha => cfg.reward.alpha = value,
            SweepParam::RlFraction => cfg.mtdp.fraction = value,
            SweepParam::Rollouts => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(UsageError(format!("rollouts must be a positive integer, got {value}")).into());
                }
                cfg.search.mcts.n_rollouts = value as usize;
            }
        }
        cfg.validate()
            .map_err(|e| UsageError(format!("{} = {value}: {e}", self.name())))?;
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub sft_accuracy: f64,
    pub baseline_accuracy: f64,
    pub mtdp_episodes: usize,
}

pub fn run_sweep(
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    config: &Path,
    out: &Path,
) -> anyhow::Result<()> {
    if values.len() < 2 {
        return Err(UsageError("a sweep needs at least 2 values".into()).into());
    }
    if seeds.len() < 3 {
        return Err(UsageError("a sweep needs at least 3 seeds".into()).into());
    }
    let base = load_config(config)?;
    let grid: Vec<(f64, u64)> = values.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let cfgs = values
        .iter()
        .map(|&v| param.apply(&base, v))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let rows = grid
        .par_iter()
        .map(|&(value, seed)| {
            let cfg = &cfgs[values.iter().position(|&v| v == value).expect("value in grid")];
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let o = run_pipeline(&cfg, seed)?;
            Ok(SweepRow {
                param: param.name(),
                value,
                seed,
                accuracy: o.grpo_eval.accuracy,
                mean_reward: o.grpo_eval.mean_reward,
                sft_accuracy: o.sft_eval.accuracy,
                baseline_accuracy: o.baseline_eval.accuracy,
                mtdp_episodes: o.split.mtdp_episode_ids.len(),
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("sweep_{}.csv", param.name()));
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}
