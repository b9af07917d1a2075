use std::path::Path;

use serde::{Deserialize, Serialize};

use glimpse_core::experiment::{
    gen_corpus, redact_all, stage_eval, stage_grpo, stage_mtdp_split, stage_search, stage_sft, CorpusKind,
    ExperimentConfig,
};
use glimpse_core::infer::EvalReport;
use glimpse_core::io::{read_jsonl, write_json, write_jsonl, Header};
use glimpse_core::pipeline::{SftDataset, TrajectoryRecord};
use glimpse_core::train::{SftOutcome, SftPair};
use glimpse_core::{PolicyParams, VideoEpisode};

use crate::errors::{DependencyError, UsageError};
use crate::rundir::{load_config, RunDir, StageLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Search,
    Sft,
    Grpo,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::GenData, Stage::Search, Stage::Sft, Stage::Grpo, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Search => "search",
            Stage::Sft => "sft",
            Stage::Grpo => "grpo",
            Stage::Eval => "eval",
        }
    }

    /// Stages that must have completed first.
    fn requires(self) -> &'static [Stage] {
        match self {
            Stage::GenData => &[],
            Stage::Search => &[Stage::GenData],
            Stage::Sft => &[Stage::GenData, Stage::Search],
            Stage::Grpo => &[Stage::GenData, Stage::Search, Stage::Sft],
            Stage::Eval => &[Stage::GenData],
        }
    }
}

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST: &str = "data/manifest.json";
pub const SFT_RECORDS: &str = "search/sft_records.jsonl";
pub const SFT_PAIRS: &str = "search/sft_pairs.jsonl";
pub const SFT_POLICY: &str = "sft/policy.json";
pub const MTDP_SPLIT: &str = "grpo/mtdp_split.json";
pub const GRPO_POLICY: &str = "grpo/policy.json";
pub const EVAL_REPORT: &str = "eval/report.json";
pub const EVAL_ROWS: &str = "eval/rows.csv";

fn corpus_file(kind: CorpusKind) -> String {
    format!("data/{}.jsonl", kind.name())
}

fn metrics_file(stage: Stage) -> String {
    format!("metrics/{}.csv", stage.name())
}

struct Ctx {
    dir: RunDir,
    cfg: ExperimentConfig,
    seed: u64,
    hash: String,
}

impl Ctx {
    fn header(&self, kind: &str, count: usize) -> Header {
        Header::new(kind, self.seed, &self.hash, count)
    }

    fn episodes(&self, kind: CorpusKind) -> anyhow::Result<Vec<VideoEpisode>> {
        let path = self.dir.input(&corpus_file(kind))?;
        Ok(read_jsonl(&path, "episodes")?.1)
    }

    fn policy(&self, rel: &str) -> anyhow::Result<PolicyParams> {
        Ok(PolicyParams::load(&self.dir.input(rel)?, &self.cfg.layout())?)
    }

    fn write_csv<T: Serialize>(&self, rel: &str, rows: &[T]) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_path(self.dir.output(rel)?)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Resolves config and seed for `stage`, checks ordering, runs it, and
/// records completion.
pub fn run_stage(stage: Stage, config: Option<&Path>, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let dir = RunDir::new(out);
    let ctx = if stage == Stage::GenData {
        let path = config.ok_or_else(|| UsageError("gen-data needs --config".into()))?;
        let mut cfg = load_config(path)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ctx { seed: cfg.seed, hash: cfg.hash(), cfg, dir }
    } else {
        let log = dir.log()?.ok_or_else(|| {
            UsageError(format!("{} needs gen-data to have run in {}", stage.name(), out.display()))
        })?;
        let cfg_path = match config {
            Some(p) => p.to_path_buf(),
            None => dir.path(CONFIG_FILE),
        };
        if config.is_none() && !cfg_path.is_file() {
            return Err(DependencyError(cfg_path).into());
        }
        let mut cfg = load_config(&cfg_path)?;
        cfg.seed = seed.unwrap_or(log.seed);
        let hash = cfg.hash();
        if hash != log.config_hash {
            return Err(UsageError(format!(
                "config or seed differs from the one gen-data ran with in {}",
                out.display()
            ))
            .into());
        }
        for req in stage.requires() {
            if !log.completed.contains(req) {
                return Err(UsageError(format!(
                    "stage {} must run before {}",
                    req.name(),
                    stage.name()
                ))
                .into());
            }
        }
        Ctx { seed: cfg.seed, hash, cfg, dir }
    };

    log::info!("running stage {}", stage.name());
    match stage {
        Stage::GenData => gen_data(&ctx)?,
        Stage::Search => search(&ctx)?,
        Stage::Sft => sft(&ctx)?,
        Stage::Grpo => grpo(&ctx)?,
        Stage::Eval => eval(&ctx)?,
    }

    let mut log = match stage {
        Stage::GenData => StageLog { config_hash: ctx.hash.clone(), seed: ctx.seed, completed: vec![] },
        _ => ctx.dir.log()?.expect("checked above"),
    };
    // rerunning a stage invalidates everything downstream of it; eval
    // depends on whichever policies exist, so any other stage invalidates it
    log.completed
        .retain(|s| *s != stage && !s.requires().contains(&stage) && (stage == Stage::Eval || *s != Stage::Eval));
    log.completed.push(stage);
    ctx.dir.write_log(&log)
}

#[derive(Serialize, Deserialize)]
struct CorpusEntry {
    name: String,
    file: String,
    count: usize,
    episode_ids: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    config_hash: String,
    corpora: Vec<CorpusEntry>,
}

#[derive(Serialize)]
struct CountRow<'a> {
    corpus: &'a str,
    count: usize,
}

fn gen_data(ctx: &Ctx) -> anyhow::Result<()> {
    let text = ctx.cfg.to_toml()?;
    std::fs::write(ctx.dir.output(CONFIG_FILE)?, text)?;
    let mut corpora = Vec::new();
    let mut counts = Vec::new();
    for kind in [CorpusKind::Train, CorpusKind::RlPool, CorpusKind::Eval] {
        let eps = gen_corpus(&ctx.cfg, kind, ctx.seed)?;
        let file = corpus_file(kind);
        write_jsonl(&ctx.dir.output(&file)?, &ctx.header("episodes", eps.len()), &eps)?;
        counts.push(CountRow { corpus: kind.name(), count: eps.len() });
        corpora.push(CorpusEntry {
            name: kind.name().into(),
            file,
            count: eps.len(),
            episode_ids: eps.iter().map(|e| e.episode_id).collect(),
        });
    }
    write_json(
        &ctx.dir.output(MANIFEST)?,
        &Manifest { seed: ctx.seed, config_hash: ctx.hash.clone(), corpora },
    )?;
    ctx.write_csv(&metrics_file(Stage::GenData), &counts)
}

#[derive(Serialize)]
struct SearchMetrics {
    episodes: usize,
    records: usize,
    pairs: usize,
    skipped: usize,
    mean_record_reward: f64,
}

fn search(ctx: &Ctx) -> anyhow::Result<()> {
    let train = ctx.episodes(CorpusKind::Train)?;
    let ds = stage_search(&ctx.cfg, &train, ctx.seed)?;
    write_jsonl(&ctx.dir.output(SFT_RECORDS)?, &ctx.header("trajectory-records", ds.records.len()), &ds.records)?;
    write_jsonl(&ctx.dir.output(SFT_PAIRS)?, &ctx.header("sft-pairs", ds.pairs.len()), &ds.pairs)?;
    let mean = ds.records.iter().map(|r| r.total_reward).sum::<f64>() / ds.records.len().max(1) as f64;
    ctx.write_csv(
        &metrics_file(Stage::Search),
        &[SearchMetrics {
            episodes: train.len(),
            records: ds.records.len(),
            pairs: ds.pairs.len(),
            skipped: ds.skipped.len(),
            mean_record_reward: mean,
        }],
    )
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

fn sft(ctx: &Ctx) -> anyhow::Result<()> {
    // only the visible episode fields are available to training
    let views = redact_all(&ctx.episodes(CorpusKind::Train)?);
    let pairs: Vec<SftPair> = read_jsonl(&ctx.dir.input(SFT_PAIRS)?, "sft-pairs")?.1;
    let ds = SftDataset { pairs, ..SftDataset::default() };
    let out = stage_sft(&ctx.cfg, &ds, &views, ctx.seed)?;
    out.policy.save(&ctx.dir.output(SFT_POLICY)?)?;
    let rows: Vec<LossRow> = out
        .loss_history
        .iter()
        .enumerate()
        .map(|(epoch, &loss)| LossRow { epoch, loss })
        .collect();
    ctx.write_csv(&metrics_file(Stage::Sft), &rows)
}

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    sft_records_file: String,
    sft_records: usize,
    mtdp_fraction: f64,
    mtdp_episode_ids: Vec<u64>,
}

fn grpo(ctx: &Ctx) -> anyhow::Result<()> {
    let policy = ctx.policy(SFT_POLICY)?;
    let records: Vec<TrajectoryRecord> = read_jsonl(&ctx.dir.input(SFT_RECORDS)?, "trajectory-records")?.1;
    let pool = ctx.episodes(CorpusKind::RlPool)?;
    let sft = SftOutcome { reference: policy.clone(), policy, loss_history: vec![] };
    let ds = SftDataset { records, ..SftDataset::default() };
    let split = stage_mtdp_split(&ctx.cfg, &sft, &ds, &pool, ctx.seed)?;
    write_json(
        &ctx.dir.output(MTDP_SPLIT)?,
        &SplitManifest {
            sft_records_file: SFT_RECORDS.into(),
            sft_records: split.sft_records.len(),
            mtdp_fraction: split.mtdp_fraction,
            mtdp_episode_ids: split.mtdp_episode_ids.clone(),
        },
    )?;
    let out = stage_grpo(&ctx.cfg, &sft, &split, &redact_all(&pool), &pool, ctx.seed)?;
    out.policy.save(&ctx.dir.output(GRPO_POLICY)?)?;
    ctx.write_csv(&metrics_file(Stage::Grpo), &out.metrics)
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    policy: &'a str,
    episodes: usize,
    accuracy: f64,
    mean_reward: f64,
    mean_evidence_hit_rate: f64,
    mean_trajectory_length: f64,
}

#[derive(Serialize)]
struct EvalRowOut<'a> {
    policy: &'a str,
    episode_id: u64,
    predicted: usize,
    truth: usize,
    correct: bool,
    reward: f64,
    evidence_hits: usize,
    selections: usize,
    actions: String,
}

fn summary<'a>(name: &'a str, r: &EvalReport) -> EvalSummary<'a> {
    EvalSummary {
        policy: name,
        episodes: r.episodes,
        accuracy: r.accuracy,
        mean_reward: r.mean_reward,
        mean_evidence_hit_rate: r.mean_evidence_hit_rate,
        mean_trajectory_length: r.mean_trajectory_length,
    }
}

/// Evaluates the untrained baseline and every trained policy present.
fn eval(ctx: &Ctx) -> anyhow::Result<()> {
    let eval = ctx.episodes(CorpusKind::Eval)?;
    let completed = ctx.dir.log()?.map(|l| l.completed).unwrap_or_default();
    let mut policies = vec![("baseline", ctx.cfg.initial_policy(ctx.seed))];
    if completed.contains(&Stage::Sft) {
        policies.push(("sft", ctx.policy(SFT_POLICY)?));
    }
    if completed.contains(&Stage::Grpo) {
        policies.push(("grpo", ctx.policy(GRPO_POLICY)?));
    }
    let mut reports = Vec::new();
    for (name, p) in &policies {
        reports.push((*name, stage_eval(&ctx.cfg, p, &eval, ctx.seed)?));
    }
    let summaries: Vec<EvalSummary> = reports.iter().map(|(n, r)| summary(n, r)).collect();
    let mut rows = Vec::new();
    for (name, r) in &reports {
        for row in &r.rows {
            rows.push(EvalRowOut {
                policy: name,
                episode_id: row.episode_id,
                predicted: row.predicted,
                truth: row.truth,
                correct: row.predicted == row.truth,
                reward: row.reward,
                evidence_hits: row.evidence_hits,
                selections: row.selections,
                actions: row.chain.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" "),
            });
        }
    }
    write_json(&ctx.dir.output(EVAL_REPORT)?, &summaries)?;
    ctx.write_csv(EVAL_ROWS, &rows)?;
    ctx.write_csv(&metrics_file(Stage::Eval), &summaries)
}
