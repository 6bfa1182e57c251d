//! Experiment harness behind the CLI: base-model pretraining, single runs
//! with a summary report, evaluation, ablations and the oracle check.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{Example, TaskData};
use crate::error::{Error, Result};
use crate::fcco::{train, write_metrics_csv, CandidateSource, Method, TrainConfig, TrainOutput};
use crate::model::{load_params, sample, save_params, sequence_logprob, GenConfig, ModelConfig, ModelParams};
use crate::objectives::ScoringMode;
use crate::oracle::{exact_objective, run_checks, CheckResult, OutputSpace};
use crate::pool::{build_prompt, generate_pool, params_hash, NegativePool, PoolSampler, PromptStrategy};
use crate::task::{base_training_set, length_budget};

/// Model shape that fits every task prompt, including the longest chat
/// layout, plus its answers.
pub fn model_config_for(task: &TaskData, d_model: usize, n_layers: usize) -> Result<ModelConfig> {
    let (_, py) = length_budget(task);
    let mut px = 0;
    for e in task.train.iter().chain(&task.test) {
        let xbar = build_prompt(&e.x, PromptStrategy::ChatTemplateGoodSys, &task.vocab)
            .or_else(|_| build_prompt(&e.x, PromptStrategy::Direct, &task.vocab))?;
        px = px.max(xbar.len());
    }
    let cfg = ModelConfig::new(task.vocab.size(), d_model, n_layers, px + py + 2);
    cfg.validate()?;
    Ok(cfg)
}

/// SFT from a seeded initialization on every prompt paired once with its
/// good and once with its bad answer, so the base model produces both.
pub fn pretrain_base(task: &TaskData, model: ModelConfig, cfg: &TrainConfig, init_seed: u64) -> Result<TrainOutput> {
    if cfg.method != Method::Sft {
        return Err(Error::Config("base pretraining uses method sft".into()));
    }
    let data = base_training_set(&task.train);
    let init = ModelParams::init(model, init_seed);
    train(&data, None, &init, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Greedy decode equals the positive answer.
    pub accuracy: f64,
    pub pos_loglik_mean: f64,
    pub bad_loglik_mean: Option<f64>,
    /// Share of prompts with `log P(y_bad|x) < log P(y|x)`.
    pub bad_below_pos_fraction: Option<f64>,
}

pub fn evaluate(params: &ModelParams, examples: &[Example]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let max_len = params.config().max_len;
    let rows: Vec<(bool, f64, Option<f64>)> = examples
        .par_iter()
        .map(|e| {
            let room = (max_len + 1).saturating_sub(e.x.len());
            let gen = GenConfig {
                temperature: 0.0,
                top_k: None,
                top_p: 1.0,
                max_tokens: (e.y.len() + 1).min(room).max(1),
                seed: 0,
            };
            let decoded = sample(params, &e.x, &gen)?;
            let pos = sequence_logprob(params, &e.x, &e.y)?;
            let bad = e.y_bad.as_ref().map(|b| sequence_logprob(params, &e.x, b)).transpose()?;
            Ok((decoded == e.y, pos, bad))
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let accuracy = rows.iter().filter(|r| r.0).count() as f64 / n;
    let pos_loglik_mean = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let bads: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.2.map(|b| (r.1, b))).collect();
    let (bad_loglik_mean, bad_below_pos_fraction) = if bads.is_empty() {
        (None, None)
    } else {
        let m = bads.len() as f64;
        (
            Some(bads.iter().map(|b| b.1).sum::<f64>() / m),
            Some(bads.iter().filter(|b| b.1 < b.0).count() as f64 / m),
        )
    };
    Ok(EvalReport {
        accuracy,
        pos_loglik_mean,
        bad_loglik_mean,
        bad_below_pos_fraction,
    })
}

/// Mean `log P_θ(y'|x)` over every pool entry of the first `data.len()`
/// examples, scored on the unaugmented prompt.
pub fn pool_neg_loglik_mean(params: &ModelParams, data: &[Example], pool: &NegativePool) -> Result<f64> {
    let n = data.len().min(pool.n_examples());
    let sums: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            pool.entries(i)
                .iter()
                .map(|e| sequence_logprob(params, &data[i].x, &e.answer()))
                .sum::<Result<f64>>()
        })
        .collect::<Result<_>>()?;
    Ok(sums.iter().sum::<f64>() / (n * pool.m()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub test_accuracy: f64,
    pub test_pos_loglik_mean: f64,
    pub test_bad_loglik_mean: Option<f64>,
    pub bad_below_pos_fraction: Option<f64>,
    pub train_pos_loglik_mean: f64,
    pub pool_neg_loglik_mean: Option<f64>,
    pub exact_objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: String,
    pub method: Method,
    pub steps: usize,
    pub initial: Snapshot,
    #[serde(rename = "final")]
    pub final_: Snapshot,
}

fn mean_logprob(params: &ModelParams, data: &[Example]) -> Result<f64> {
    let lps: Vec<f64> = data
        .par_iter()
        .map(|e| sequence_logprob(params, &e.x, &e.y))
        .collect::<Result<_>>()?;
    Ok(lps.iter().sum::<f64>() / lps.len() as f64)
}

pub fn snapshot(
    params: &ModelParams,
    task: &TaskData,
    pool: Option<&NegativePool>,
    space: Option<&OutputSpace>,
    tau: f64,
    mode: ScoringMode,
) -> Result<Snapshot> {
    let eval = evaluate(params, &task.test)?;
    Ok(Snapshot {
        test_accuracy: eval.accuracy,
        test_pos_loglik_mean: eval.pos_loglik_mean,
        test_bad_loglik_mean: eval.bad_loglik_mean,
        bad_below_pos_fraction: eval.bad_below_pos_fraction,
        train_pos_loglik_mean: mean_logprob(params, &task.train)?,
        pool_neg_loglik_mean: pool.map(|p| pool_neg_loglik_mean(params, &task.train, p)).transpose()?,
        exact_objective: space
            .map(|s| exact_objective(params, &task.train, s, tau, mode))
            .transpose()?,
    })
}

pub struct RunResult {
    pub output: TrainOutput,
    pub summary: Summary,
}

/// Trains and reports without touching the filesystem.
pub fn execute(
    task: &TaskData,
    base: &ModelParams,
    pool: Option<&NegativePool>,
    cfg: &ExperimentConfig,
) -> Result<RunResult> {
    cfg.validate()?;
    if base.config().vocab_size != task.vocab.size() {
        return Err(Error::ShapeMismatch(format!(
            "base model has K={}, task vocabulary has {}",
            base.config().vocab_size,
            task.vocab.size()
        )));
    }
    let space = cfg
        .oracle_max_len
        .map(|l| OutputSpace::new(task.vocab.size(), l))
        .transpose()?;
    let t = &cfg.train;
    let initial = snapshot(base, task, pool, space.as_ref(), t.tau, t.mode)?;
    let sampler = pool.map(|p| PoolSampler { pool: p, seed: t.seed });
    let source = sampler.as_ref().map(|s| s as &dyn CandidateSource);
    let output = train(&task.train, source, base, t)?;
    let final_ = snapshot(&output.params, task, pool, space.as_ref(), t.tau, t.mode)?;
    let summary = Summary {
        task: task.name.clone(),
        method: t.method,
        steps: output.metrics.len(),
        initial,
        final_,
    };
    Ok(RunResult { output, summary })
}

fn obtain_pool(
    task: &TaskData,
    base: &ModelParams,
    cfg: &ExperimentConfig,
    m: usize,
    gen: &GenConfig,
) -> Result<Option<NegativePool>> {
    if let Some(path) = &cfg.pool {
        let pool = NegativePool::load(path)?;
        if pool.base_params_hash() != params_hash(base) {
            return Err(Error::Format(format!(
                "{} was generated from different base parameters",
                path.display()
            )));
        }
        return Ok(Some(pool));
    }
    if !cfg.train.method.uses_pool() && cfg.train.method != Method::Sft {
        return Ok(None);
    }
    generate_pool(base, &task.train, m, gen, cfg.strategy, &task.vocab).map(Some)
}

/// `run`: trains per the config and writes `metrics.csv`, `params.bin`,
/// `summary.json` (and `pool.jsonl` when it had to generate one) into `out`.
pub fn run(cfg: &ExperimentConfig) -> Result<Summary> {
    let task = TaskData::load(&cfg.task)?;
    let base = load_params(&cfg.base, None)?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::file(&cfg.out, e))?;
    let pool = obtain_pool(&task, &base, cfg, cfg.pool_depth(), &cfg.gen)?;
    if cfg.pool.is_none() {
        if let Some(p) = &pool {
            p.save(cfg.out.join("pool.jsonl"))?;
        }
    }
    let res = execute(&task, &base, pool.as_ref(), cfg)?;
    write_metrics_csv(&res.output.metrics, cfg.out.join("metrics.csv"))?;
    save_params(&res.output.params, cfg.out.join("params.bin"))?;
    let path = cfg.out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&res.summary)?).map_err(|e| Error::file(&path, e))?;
    Ok(res.summary)
}

pub fn evaluate_files(params: &Path, task: &Path) -> Result<EvalReport> {
    let task = TaskData::load(task)?;
    let params = load_params(params, None)?;
    evaluate(&params, &task.test)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Gamma,
    #[serde(rename = "B")]
    B,
    GenTemperature,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Gamma => "gamma",
            AblationAxis::B => "B",
            AblationAxis::GenTemperature => "gen_temperature",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(AblationAxis::Gamma),
            "B" | "b" => Ok(AblationAxis::B),
            "gen_temperature" | "temperature" => Ok(AblationAxis::GenTemperature),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub seeds: usize,
    pub median_final_exact_objective: Option<f64>,
    pub median_test_accuracy: f64,
    pub median_train_pos_loglik_mean: f64,
    pub median_pool_neg_loglik_mean: Option<f64>,
    /// Candidates drawn per example per step.
    pub candidates_per_step: usize,
}

pub const ABLATION_HEADER: &str = "axis,value,seeds,median_final_exact_objective,median_test_accuracy,\
                                   median_train_pos_loglik_mean,median_pool_neg_loglik_mean,candidates_per_step";

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_opt(xs: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.iter().copied().collect();
    v.map(|v| median(&v))
}

/// Runs each value over `cfg.ablation_seeds` training seeds
/// (`seed, seed + 1, ..`) and reports medians. Results for a value do not
/// depend on which other values are in the list.
pub fn ablate_in_memory(
    task: &TaskData,
    base: &ModelParams,
    cfg: &ExperimentConfig,
    axis: AblationAxis,
    values: &[f64],
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let mut shared = None;
    if axis != AblationAxis::GenTemperature {
        let max_b = match axis {
            AblationAxis::B => values.iter().fold(0.0f64, |a, &b| a.max(b)) as usize,
            _ => cfg.train.neg_per_example,
        };
        let m = cfg.m.unwrap_or(cfg.train.epochs * max_b.max(cfg.train.neg_per_example));
        shared = obtain_pool(task, base, cfg, m, &cfg.gen)?;
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut c = cfg.clone();
        let mut own = None;
        match axis {
            AblationAxis::Gamma => c.train.gamma = value,
            AblationAxis::B => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("B must be a positive integer, got {value}")));
                }
                c.train.neg_per_example = value as usize;
            }
            AblationAxis::GenTemperature => {
                c.gen.temperature = value;
                own = obtain_pool(task, base, &c, c.pool_depth(), &c.gen)?;
            }
        }
        c.m = None;
        let pool = own.as_ref().or(shared.as_ref());
        let mut exact = Vec::new();
        let mut acc = Vec::new();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut cands = 0;
        for k in 0..cfg.ablation_seeds {
            let mut ck = c.clone();
            ck.train.seed = cfg.train.seed + k as u64;
            let res = execute(task, base, pool, &ck)?;
            let f = &res.summary.final_;
            exact.push(f.exact_objective);
            acc.push(f.test_accuracy);
            pos.push(f.train_pos_loglik_mean);
            neg.push(f.pool_neg_loglik_mean);
            cands = res.output.metrics.iter().map(|m| m.candidates).max().unwrap_or(0);
        }
        rows.push(AblationRow {
            value,
            seeds: cfg.ablation_seeds,
            median_final_exact_objective: median_opt(&exact),
            median_test_accuracy: median(&acc),
            median_train_pos_loglik_mean: median(&pos),
            median_pool_neg_loglik_mean: median_opt(&neg),
            candidates_per_step: cands,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            axis.name(),
            r.value,
            r.seeds,
            opt(r.median_final_exact_objective),
            r.median_test_accuracy,
            r.median_train_pos_loglik_mean,
            opt(r.median_pool_neg_loglik_mean),
            r.candidates_per_step
        );
    }
    out
}

/// Writes `ablation_<axis>.csv` into the configured output directory.
pub fn ablate(cfg: &ExperimentConfig, axis: AblationAxis, values: &[f64]) -> Result<Vec<AblationRow>> {
    let task = TaskData::load(&cfg.task)?;
    let base = load_params(&cfg.base, None)?;
    let rows = ablate_in_memory(&task, &base, cfg, axis, values)?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::file(&cfg.out, e))?;
    let path = cfg.out.join(format!("ablation_{}.csv", axis.name()));
    fs::write(&path, ablation_csv(axis, &rows)).map_err(|e| Error::file(&path, e))?;
    Ok(rows)
}

/// Loads a checkpoint and runs the oracle suite on it.
pub fn oracle_check(
    params: &Path,
    vocab_size: usize,
    max_len: usize,
    tau: f64,
    mode: ScoringMode,
) -> Result<Vec<CheckResult>> {
    let params = load_params(params, None)?;
    if params.config().vocab_size != vocab_size {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has K={}, expected {vocab_size}",
            params.config().vocab_size
        )));
    }
    run_checks(&params, max_len, tau, mode, 0, 256)
}

pub fn format_checks(checks: &[CheckResult]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  result  detail\n", "check");
    for c in checks {
        let _ = writeln!(
            out,
            "{:<width$}  {:<6}  {}",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.detail
        );
    }
    out
}
