//! Gradient estimation and the training loop.
//!
//! One step of the discriminative methods runs in three phases:
//! [`evaluate_batch`] scores positives and drawn candidates, [`update_estimators`]
//! moves `ū_i` for every sampled example, and [`assemble`] forms
//!
//! ```text
//! G = −(1/|S|) Σ_i ∇s(y_i, x_i) + (1/|S|) Σ_i Σ_j exp(log w_ij − ū_i − log B_i) ∇s(y'_ij, x_i)
//! ```
//!
//! with the just-updated `ū_i`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AdamW, EstimatorState, LrSchedule, SchedulerKind};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{logprob_grad_into, sequence_logprob, ModelParams, TokenSequence};
use crate::numeric::{l2_norm, mix_seed};
use crate::objectives::{
    add_into, check_tau, dpo_loss, log_weight_from_score, score_grad_into, simpo_loss, spin_loss, Candidate,
    ScoringMode, Variant,
};

/// Supplies negative candidates for an example on its `visit`-th visit.
pub trait CandidateSource: Sync {
    fn draw(&self, example: usize, visit: usize, count: usize) -> Result<Vec<Candidate>>;

    /// Fails up front when `visits` draws of `count` would run out.
    fn check_budget(&self, n_examples: usize, visits: usize, count: usize) -> Result<()>;
}

/// The same explicit candidate set on every visit, ignoring `count`.
/// Used for exact-regime runs where the set is the whole output space.
#[derive(Clone, Debug)]
pub struct FixedCandidates {
    sets: Vec<Vec<Candidate>>,
}

impl FixedCandidates {
    pub fn new(sets: Vec<Vec<Candidate>>) -> Self {
        FixedCandidates { sets }
    }

    pub fn shared(n: usize, set: Vec<Candidate>) -> Self {
        FixedCandidates { sets: vec![set; n] }
    }
}

impl CandidateSource for FixedCandidates {
    fn draw(&self, example: usize, _visit: usize, _count: usize) -> Result<Vec<Candidate>> {
        self.sets
            .get(example)
            .cloned()
            .ok_or_else(|| Error::Input(format!("no candidate set for example {example}")))
    }

    fn check_budget(&self, n_examples: usize, _visits: usize, _count: usize) -> Result<()> {
        if self.sets.len() < n_examples {
            return Err(Error::Input(format!(
                "{} candidate sets for {n_examples} examples",
                self.sets.len()
            )));
        }
        match self.sets.iter().position(Vec::is_empty) {
            Some(i) => Err(Error::Input(format!("empty candidate set for example {i}"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MinibatchItem<'a> {
    /// Position in the dataset, which is also the estimator slot.
    pub index: usize,
    pub x: &'a TokenSequence,
    pub y_pos: &'a TokenSequence,
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DftSettings {
    pub tau: f64,
    pub gamma: f64,
    pub mode: ScoringMode,
    pub variant: Variant,
}

/// Forward-pass quantities for one minibatch item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemScores {
    pub s_pos: f64,
    pub logp_pos: f64,
    pub log_weights: Vec<f64>,
    pub logp_neg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    /// `mean_i(−s_pos + τ ū_i)`
    pub loss_proxy: f64,
    pub pos_loglik_mean: f64,
    pub neg_loglik_mean: f64,
    /// `exp(log w − ū − log B)` per item and candidate.
    pub coefficients: Vec<Vec<f64>>,
}

pub fn evaluate_batch(params: &ModelParams, batch: &[MinibatchItem], s: &DftSettings) -> Result<Vec<ItemScores>> {
    check_tau(s.tau)?;
    batch
        .par_iter()
        .map(|item| {
            if item.candidates.is_empty() {
                return Err(Error::Input(format!("example {} has no candidates", item.index)));
            }
            let logp_pos = sequence_logprob(params, item.x, item.y_pos)?;
            let s_pos = s.mode.apply(logp_pos, item.y_pos.len());
            let mut log_weights = Vec::with_capacity(item.candidates.len());
            let mut logp_neg = Vec::with_capacity(item.candidates.len());
            for c in &item.candidates {
                let lp = sequence_logprob(params, item.x, &c.tokens)?;
                let sc = s.mode.apply(lp, c.tokens.len());
                log_weights.push(log_weight_from_score(sc, c.logp_base, s.tau, s.variant));
                logp_neg.push(lp);
            }
            Ok(ItemScores {
                s_pos,
                logp_pos,
                log_weights,
                logp_neg,
            })
        })
        .collect()
}

/// Applies the log-domain moving-average update to each sampled `ū_i`.
pub fn update_estimators(
    state: &mut EstimatorState,
    batch: &[MinibatchItem],
    scores: &[ItemScores],
    gamma: f64,
) -> Result<()> {
    if batch.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!("{} items but {} score rows", batch.len(), scores.len())));
    }
    for item in batch {
        state.check_index(item.index)?;
    }
    for (item, sc) in batch.iter().zip(scores) {
        state.update(item.index, &sc.log_weights, gamma)?;
    }
    Ok(())
}

/// Builds `G` from scores and an already-updated state.
pub fn assemble(
    params: &ModelParams,
    batch: &[MinibatchItem],
    scores: &[ItemScores],
    state: &EstimatorState,
    s: &DftSettings,
) -> Result<GradientEstimate> {
    if batch.is_empty() {
        return Err(Error::Input("empty minibatch".into()));
    }
    if batch.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!("{} items but {} score rows", batch.len(), scores.len())));
    }
    for item in batch {
        state.check_index(item.index)?;
    }
    let n = batch.len() as f64;
    let coefficients: Vec<Vec<f64>> = batch
        .iter()
        .zip(scores)
        .map(|(item, sc)| {
            let shift = state.log_u(item.index) + (sc.log_weights.len() as f64).ln();
            sc.log_weights.iter().map(|lw| (lw - shift).exp()).collect()
        })
        .collect();
    let parts: Vec<Vec<f64>> = batch
        .par_iter()
        .zip(&coefficients)
        .map(|(item, coeffs)| {
            let mut g = vec![0.0; params.len()];
            score_grad_into(params, item.x, item.y_pos, s.mode, -1.0 / n, &mut g)?;
            for (c, k) in item.candidates.iter().zip(coeffs) {
                score_grad_into(params, item.x, &c.tokens, s.mode, k / n, &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; params.len()];
    for g in &parts {
        add_into(&mut grad, g, 1.0);
    }
    let loss_proxy = batch
        .iter()
        .zip(scores)
        .map(|(item, sc)| -sc.s_pos + s.tau * state.log_u(item.index))
        .sum::<f64>()
        / n;
    let pos_loglik_mean = scores.iter().map(|sc| sc.logp_pos).sum::<f64>() / n;
    Ok(GradientEstimate {
        grad,
        loss_proxy,
        pos_loglik_mean,
        neg_loglik_mean: mean_neg(scores),
        coefficients,
    })
}

/// Scores the batch and assembles `G` against `state`, which must already
/// hold the updated `ū_i` for every item.
pub fn gradient_estimate(
    params: &ModelParams,
    batch: &[MinibatchItem],
    state: &EstimatorState,
    s: &DftSettings,
) -> Result<GradientEstimate> {
    let scores = evaluate_batch(params, batch, s)?;
    assemble(params, batch, &scores, state, s)
}

fn mean_neg(scores: &[ItemScores]) -> f64 {
    let (sum, count) = scores
        .iter()
        .flat_map(|sc| &sc.logp_neg)
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sft,
    Dft,
    Dft2,
    Dpo,
    #[serde(rename = "simpo")]
    SimPo,
    Spin,
}

impl Method {
    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Dft => Some(Variant::Dft),
            Method::Dft2 => Some(Variant::Dft2),
            _ => None,
        }
    }

    pub fn is_pairwise(self) -> bool {
        matches!(self, Method::Dpo | Method::SimPo | Method::Spin)
    }

    /// Methods whose loss consumes pool candidates.
    pub fn uses_pool(self) -> bool {
        matches!(self, Method::Dft | Method::Dft2 | Method::SimPo | Method::Spin)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Dft => "dft",
            Method::Dft2 => "dft2",
            Method::Dpo => "dpo",
            Method::SimPo => "simpo",
            Method::Spin => "spin",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sft" => Ok(Method::Sft),
            "dft" => Ok(Method::Dft),
            "dft2" => Ok(Method::Dft2),
            "dpo" => Ok(Method::Dpo),
            "simpo" => Ok(Method::SimPo),
            "spin" => Ok(Method::Spin),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub tau: f64,
    pub gamma: f64,
    /// Negatives drawn per example per visit (`B`).
    pub neg_per_example: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub scheduler: SchedulerKind,
    pub mode: ScoringMode,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global-norm clip; off by default.
    pub grad_clip: Option<f64>,
    pub beta: f64,
    pub margin: f64,
}

impl TrainConfig {
    /// Method-intrinsic defaults (τ, γ, scoring) with desk-scale batch and
    /// learning rate.
    pub fn for_method(method: Method) -> Self {
        let (tau, gamma, mode) = match method {
            Method::Dft2 => (0.3, 0.90, ScoringMode::LengthNormalized),
            _ => (1.0, 0.85, ScoringMode::Unnormalized),
        };
        let (beta, margin) = match method {
            Method::SimPo => (2.0, 0.5),
            _ => (0.1, 0.0),
        };
        TrainConfig {
            method,
            tau,
            gamma,
            neg_per_example: 2,
            epochs: 2,
            batch_size: 16,
            lr: 1e-3,
            warmup_ratio: 0.1,
            scheduler: SchedulerKind::Cosine,
            mode,
            seed: 0,
            weight_decay: 0.0,
            grad_clip: None,
            beta,
            margin,
        }
    }

    pub fn settings(&self) -> Option<DftSettings> {
        self.method.variant().map(|variant| DftSettings {
            tau: self.tau,
            gamma: self.gamma,
            mode: self.mode,
            variant,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.neg_per_example == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("neg_per_example, epochs and batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must lie in [0, 1], got {}", self.warmup_ratio));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.method.is_pairwise() && !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("{} needs beta > 0, got {}", self.method.name(), self.beta));
        }
        if self.method == Method::SimPo && !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("simpo needs margin >= 0, got {}", self.margin));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_proxy: f64,
    pub pos_loglik_mean: f64,
    pub neg_loglik_mean: f64,
    pub u_log_mean: f64,
    pub u_log_min: f64,
    pub u_log_max: f64,
    pub grad_norm: f64,
    /// Largest number of candidates drawn for one example this step.
    pub candidates: usize,
}

pub const METRICS_HEADER: &str =
    "step,epoch,lr,loss_proxy,pos_loglik_mean,neg_loglik_mean,u_log_mean,u_log_min,u_log_max,grad_norm";

impl StepMetrics {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.loss_proxy,
            self.pos_loglik_mean,
            self.neg_loglik_mean,
            self.u_log_mean,
            self.u_log_min,
            self.u_log_max,
            self.grad_norm
        )
    }
}

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(out, "{}", m.csv_row());
    }
    out
}

pub fn write_metrics_csv(metrics: &[StepMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_csv(metrics)).map_err(|e| Error::file(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub metrics: Vec<StepMetrics>,
    pub state: EstimatorState,
}

/// Step-at-a-time driver. [`train`] runs it to completion; tests use it to
/// inspect parameters between steps.
pub struct Trainer<'a> {
    data: &'a [Example],
    source: Option<&'a dyn CandidateSource>,
    base: &'a ModelParams,
    cfg: TrainConfig,
    params: ModelParams,
    state: EstimatorState,
    opt: AdamW,
    schedule: LrSchedule,
    steps_per_epoch: usize,
    step: usize,
    order: Vec<usize>,
    metrics: Vec<StepMetrics>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        data: &'a [Example],
        source: Option<&'a dyn CandidateSource>,
        base: &'a ModelParams,
        init: ModelParams,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        if init.config() != base.config() {
            return Err(Error::ShapeMismatch("initial and base parameters differ in shape".into()));
        }
        let k = init.config().vocab_size;
        for e in data {
            e.validate(k)?;
        }
        match source {
            Some(src) => src.check_budget(data.len(), cfg.epochs, cfg.neg_per_example)?,
            None if cfg.method.uses_pool() => {
                return Err(Error::Config(format!("{} needs a negative pool", cfg.method.name())));
            }
            None => {}
        }
        if cfg.method == Method::Dpo {
            if let Some(i) = data.iter().position(|e| e.y_bad.is_none()) {
                return Err(Error::Config(format!("dpo needs y_bad, missing for example {i}")));
            }
        }
        let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
        let total = steps_per_epoch * cfg.epochs;
        let schedule = LrSchedule::new(cfg.scheduler, cfg.lr, cfg.warmup_ratio, total);
        Ok(Trainer {
            data,
            source,
            base,
            opt: AdamW::new(init.len(), cfg.weight_decay),
            state: EstimatorState::new(data.len()),
            params: init,
            cfg,
            schedule,
            steps_per_epoch,
            step: 0,
            order: Vec::new(),
            metrics: Vec::new(),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.cfg.epochs
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn state(&self) -> &EstimatorState {
        &self.state
    }

    pub fn metrics(&self) -> &[StepMetrics] {
        &self.metrics
    }

    /// Runs one step; `None` once all epochs are done.
    pub fn step(&mut self) -> Result<Option<&StepMetrics>> {
        if self.step >= self.total_steps() {
            return Ok(None);
        }
        let epoch = self.step / self.steps_per_epoch;
        let within = self.step % self.steps_per_epoch;
        if within == 0 {
            self.order = (0..self.data.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, epoch as u64, 0x5348_5546]));
            self.order.shuffle(&mut rng);
        }
        let lo = within * self.cfg.batch_size;
        let hi = (lo + self.cfg.batch_size).min(self.data.len());
        let picked: Vec<usize> = self.order[lo..hi].to_vec();

        let mut batch = Vec::with_capacity(picked.len());
        for &i in &picked {
            let candidates = match self.source {
                Some(src) => src.draw(i, epoch, self.cfg.neg_per_example)?,
                None => Vec::new(),
            };
            let e = &self.data[i];
            batch.push(MinibatchItem {
                index: i,
                x: &e.x,
                y_pos: &e.y,
                candidates,
            });
        }
        let candidates = batch.iter().map(|b| b.candidates.len()).max().unwrap_or(0);

        let est = match self.cfg.settings() {
            Some(settings) => {
                let scores = evaluate_batch(&self.params, &batch, &settings)?;
                if scores.iter().flat_map(|s| &s.log_weights).any(|w| !w.is_finite()) {
                    return Err(Error::NanDetected {
                        step: self.step,
                        what: "log weight",
                    });
                }
                update_estimators(&mut self.state, &batch, &scores, settings.gamma)?;
                assemble(&self.params, &batch, &scores, &self.state, &settings)?
            }
            None => self.baseline_estimate(&batch)?,
        };
        if !est.loss_proxy.is_finite() {
            return Err(Error::NanDetected {
                step: self.step,
                what: "loss",
            });
        }
        if est.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NanDetected {
                step: self.step,
                what: "gradient",
            });
        }
        let grad_norm = l2_norm(&est.grad);
        let mut grad = est.grad;
        if let Some(clip) = self.cfg.grad_clip {
            if grad_norm > clip {
                let scale = clip / grad_norm;
                grad.iter_mut().for_each(|g| *g *= scale);
            }
        }
        let lr = self.schedule.lr_at(self.step);
        self.opt.step(self.params.flat_mut(), &grad, lr)?;
        if self.params.flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NanDetected {
                step: self.step,
                what: "parameters",
            });
        }

        let (u_log_mean, u_log_min, u_log_max) = self.state.stats();
        self.metrics.push(StepMetrics {
            step: self.step,
            epoch,
            lr,
            loss_proxy: est.loss_proxy,
            pos_loglik_mean: est.pos_loglik_mean,
            neg_loglik_mean: est.neg_loglik_mean,
            u_log_mean,
            u_log_min,
            u_log_max,
            grad_norm,
            candidates,
        });
        self.step += 1;
        Ok(self.metrics.last())
    }

    /// SFT and the pairwise losses. Drawn candidates are the losers for
    /// SimPO and SPIN and are only logged for SFT and DPO.
    fn baseline_estimate(&self, batch: &[MinibatchItem]) -> Result<GradientEstimate> {
        let params = &self.params;
        let cfg = &self.cfg;
        let n = batch.len() as f64;
        let parts: Vec<(f64, f64, Vec<f64>, Vec<f64>)> = batch
            .par_iter()
            .map(|item| {
                let mut g = vec![0.0; params.len()];
                let mut logp_neg = Vec::with_capacity(item.candidates.len());
                for c in &item.candidates {
                    logp_neg.push(sequence_logprob(params, item.x, &c.tokens)?);
                }
                let logp_pos;
                let loss;
                match cfg.method {
                    Method::Sft => {
                        logp_pos = logprob_grad_into(params, item.x, item.y_pos, -1.0 / n, &mut g)?;
                        loss = -logp_pos;
                    }
                    Method::Dpo => {
                        let bad = self.data[item.index].y_bad.as_ref().expect("checked in Trainer::new");
                        let l = dpo_loss(params, self.base, item.x, item.y_pos, bad, cfg.beta)?;
                        add_into(&mut g, &l.grad, 1.0 / n);
                        logp_pos = sequence_logprob(params, item.x, item.y_pos)?;
                        loss = l.value;
                    }
                    Method::SimPo | Method::Spin => {
                        if item.candidates.is_empty() {
                            return Err(Error::Input(format!("example {} has no candidates", item.index)));
                        }
                        let b = item.candidates.len() as f64;
                        let mut total = 0.0;
                        for c in &item.candidates {
                            let l = if cfg.method == Method::SimPo {
                                simpo_loss(params, item.x, item.y_pos, &c.tokens, cfg.beta, cfg.margin)?
                            } else {
                                spin_loss(params, self.base, item.x, item.y_pos, &c.tokens, cfg.beta)?
                            };
                            add_into(&mut g, &l.grad, 1.0 / (n * b));
                            total += l.value / b;
                        }
                        logp_pos = sequence_logprob(params, item.x, item.y_pos)?;
                        loss = total;
                    }
                    Method::Dft | Method::Dft2 => unreachable!("handled by the estimator path"),
                }
                Ok((loss, logp_pos, logp_neg, g))
            })
            .collect::<Result<_>>()?;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        let mut pos = 0.0;
        let mut neg_rows = Vec::with_capacity(parts.len());
        for (l, lp, neg, g) in parts {
            loss += l / n;
            pos += lp / n;
            add_into(&mut grad, &g, 1.0);
            neg_rows.push(ItemScores {
                s_pos: 0.0,
                logp_pos: lp,
                log_weights: Vec::new(),
                logp_neg: neg,
            });
        }
        Ok(GradientEstimate {
            grad,
            loss_proxy: loss,
            pos_loglik_mean: pos,
            neg_loglik_mean: mean_neg(&neg_rows),
            coefficients: Vec::new(),
        })
    }

    pub fn finish(self) -> TrainOutput {
        TrainOutput {
            params: self.params,
            metrics: self.metrics,
            state: self.state,
        }
    }
}

/// Trains from `base` for `cfg.epochs` epochs. `source` supplies negatives;
/// it is required by the methods that consume them.
pub fn train(
    data: &[Example],
    source: Option<&dyn CandidateSource>,
    base: &ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let mut t = Trainer::new(data, source, base, base.clone(), cfg.clone())?;
    while t.step()?.is_some() {}
    Ok(t.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy() -> (ModelParams, Vec<Example>) {
        let p = ModelParams::init(ModelConfig::new(4, 8, 1, 12), 11);
        let data = vec![
            Example::new(vec![1, 2], vec![3, 0], Some(vec![1, 0])),
            Example::new(vec![2, 1], vec![1, 0], Some(vec![3, 0])),
            Example::new(vec![3, 3], vec![2, 0], Some(vec![2, 2, 0])),
        ];
        (p, data)
    }

    fn cands(p: &ModelParams, x: &TokenSequence) -> Vec<Candidate> {
        [vec![1, 0], vec![2, 3, 0], vec![0]]
            .into_iter()
            .enumerate()
            .map(|(i, ids)| {
                let y = TokenSequence::answer(ids);
                let lp = sequence_logprob(p, x, &y).unwrap();
                Candidate::new(y, lp, i).unwrap()
            })
            .collect()
    }

    #[test]
    fn duplicated_positive_cancels() {
        let (p, data) = toy();
        let e = &data[0];
        let s = DftSettings {
            tau: 0.7,
            gamma: 1.0,
            mode: ScoringMode::LengthNormalized,
            variant: Variant::Dft2,
        };
        let c = Candidate::new(e.y.clone(), -1.0, 0).unwrap();
        let batch = vec![MinibatchItem {
            index: 0,
            x: &e.x,
            y_pos: &e.y,
            candidates: vec![c.clone(), c],
        }];
        let mut st = EstimatorState::new(1);
        let scores = evaluate_batch(&p, &batch, &s).unwrap();
        update_estimators(&mut st, &batch, &scores, 1.0).unwrap();
        let g = assemble(&p, &batch, &scores, &st, &s).unwrap();
        assert!(g.grad.iter().all(|v| v.abs() < 1e-12));
        assert!(g.loss_proxy.abs() < 1e-12);
    }

    #[test]
    fn top_candidate_gets_largest_coefficient() {
        let (p, data) = toy();
        let e = &data[1];
        let s = DftSettings {
            tau: 1.0,
            gamma: 0.85,
            mode: ScoringMode::Unnormalized,
            variant: Variant::Dft2,
        };
        let batch = vec![MinibatchItem {
            index: 1,
            x: &e.x,
            y_pos: &e.y,
            candidates: cands(&p, &e.x),
        }];
        let mut st = EstimatorState::new(3);
        let scores = evaluate_batch(&p, &batch, &s).unwrap();
        update_estimators(&mut st, &batch, &scores, s.gamma).unwrap();
        let g = assemble(&p, &batch, &scores, &st, &s).unwrap();
        let lw = &scores[0].log_weights;
        let top = (0..lw.len()).max_by(|&a, &b| lw[a].total_cmp(&lw[b])).unwrap();
        for j in 0..lw.len() {
            if lw[j] < lw[top] {
                assert!(g.coefficients[0][top] > g.coefficients[0][j]);
            }
        }
    }

    #[test]
    fn state_mismatch_is_reported() {
        let (p, data) = toy();
        let e = &data[0];
        let s = TrainConfig::for_method(Method::Dft).settings().unwrap();
        let batch = vec![MinibatchItem {
            index: 5,
            x: &e.x,
            y_pos: &e.y,
            candidates: cands(&p, &e.x),
        }];
        let st = EstimatorState::new(3);
        assert!(matches!(gradient_estimate(&p, &batch, &st, &s), Err(Error::StateMismatch { .. })));
    }

    #[test]
    fn zero_lr_keeps_params_and_logs() {
        let (p, data) = toy();
        let src = FixedCandidates::new(data.iter().map(|e| cands(&p, &e.x)).collect());
        for method in [Method::Sft, Method::Dft, Method::Dft2, Method::Dpo, Method::SimPo, Method::Spin] {
            let mut cfg = TrainConfig::for_method(method);
            cfg.lr = 0.0;
            cfg.batch_size = 2;
            let out = train(&data, Some(&src), &p, &cfg).unwrap();
            assert_eq!(out.params.flat(), p.flat(), "{method:?}");
            assert_eq!(out.metrics.len(), 4);
            assert!(out.metrics.iter().all(|m| m.neg_loglik_mean.is_finite()));
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (p, data) = toy();
        let src = FixedCandidates::new(data.iter().map(|e| cands(&p, &e.x)).collect());
        let mut cfg = TrainConfig::for_method(Method::Dft);
        cfg.batch_size = 2;
        cfg.epochs = 3;
        let a = train(&data, Some(&src), &p, &cfg).unwrap();
        let b = train(&data, Some(&src), &p, &cfg).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.params.flat(), b.params.flat());
        assert!(metrics_csv(&a.metrics).starts_with(METRICS_HEADER));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::for_method(Method::Dft);
        cfg.gamma = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::for_method(Method::Dpo);
        cfg.beta = 0.0;
        assert!(cfg.validate().is_err());
        let (p, data) = toy();
        let cfg = TrainConfig::for_method(Method::Dft);
        assert!(matches!(train(&data, None, &p, &cfg), Err(Error::Config(_))));
    }
}
