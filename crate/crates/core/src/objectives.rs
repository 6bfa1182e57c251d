//! Scoring functions and losses: SFT, the discriminative log-sum-exp loss on
//! an explicit candidate set (DFT / DFT2), and the pairwise DPO, SimPO and
//! SPIN baselines. Every loss returns its value together with the gradient
//! over the flat parameter view.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logprob_grad_into, sequence_logprob, ModelParams, TokenSequence};
use crate::numeric::{log_mean_exp, sigmoid, softmax, softplus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// `s(y, x) = log P_g(y|x)`
    Unnormalized,
    /// `s(y, x) = log P_g(y|x) / |y|`
    LengthNormalized,
}

impl ScoringMode {
    pub fn apply(self, logp: f64, len: usize) -> f64 {
        match self {
            ScoringMode::Unnormalized => logp,
            ScoringMode::LengthNormalized => logp / len as f64,
        }
    }

    /// `∂s/∂log P_g`
    pub fn scale(self, len: usize) -> f64 {
        match self {
            ScoringMode::Unnormalized => 1.0,
            ScoringMode::LengthNormalized => 1.0 / len as f64,
        }
    }
}

impl std::str::FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unnormalized" => Ok(ScoringMode::Unnormalized),
            "length_normalized" | "normalized" => Ok(ScoringMode::LengthNormalized),
            other => Err(Error::Config(format!("unknown scoring mode {other:?}"))),
        }
    }
}

/// Whether inner weights carry the importance correction `1/P⁰_g(y'|x̄)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dft,
    Dft2,
}

/// A negative candidate with its cached base-model log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub tokens: TokenSequence,
    /// `log P⁰_g(y' | x̄)` in nats.
    pub logp_base: f64,
    pub pool_index: usize,
}

impl Candidate {
    pub fn new(tokens: TokenSequence, logp_base: f64, pool_index: usize) -> Result<Self> {
        if !logp_base.is_finite() || logp_base > 0.0 {
            return Err(Error::Input(format!("candidate log-probability must be finite and <= 0, got {logp_base}")));
        }
        Ok(Candidate {
            tokens,
            logp_base,
            pool_index,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossValue {
    fn checked(value: f64, grad: Vec<f64>) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss value {value}")));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("loss gradient at flat index {i}")));
        }
        Ok(LossValue { value, grad })
    }
}

pub fn score(params: &ModelParams, x: &TokenSequence, y: &TokenSequence, mode: ScoringMode) -> Result<f64> {
    let lp = sequence_logprob(params, x, y)?;
    Ok(mode.apply(lp, y.len()))
}

/// Adds `coeff · ∇s(y, x)` into `grad`; returns `(s, log P_g)`.
pub fn score_grad_into(
    params: &ModelParams,
    x: &TokenSequence,
    y: &TokenSequence,
    mode: ScoringMode,
    coeff: f64,
    grad: &mut [f64],
) -> Result<(f64, f64)> {
    if y.is_empty() {
        return Err(Error::EmptySequence("answer"));
    }
    let lp = logprob_grad_into(params, x, y, coeff * mode.scale(y.len()), grad)?;
    Ok((mode.apply(lp, y.len()), lp))
}

/// Score and its own gradient buffer.
pub(crate) fn score_with_grad(
    params: &ModelParams,
    x: &TokenSequence,
    y: &TokenSequence,
    mode: ScoringMode,
) -> Result<(f64, f64, Vec<f64>)> {
    let mut g = vec![0.0; params.len()];
    let (s, lp) = score_grad_into(params, x, y, mode, 1.0, &mut g)?;
    Ok((s, lp, g))
}

/// `−(1/n) Σ log P_g(y_i | x_i)`.
pub fn sft_loss(params: &ModelParams, batch: &[(TokenSequence, TokenSequence)]) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::Input("empty SFT batch".into()));
    }
    let n = batch.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|(x, y)| {
            let mut g = vec![0.0; params.len()];
            let lp = logprob_grad_into(params, x, y, -1.0 / n, &mut g)?;
            Ok((lp, g))
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; params.len()];
    let mut value = 0.0;
    for (lp, g) in parts {
        value -= lp / n;
        add_into(&mut grad, &g, 1.0);
    }
    LossValue::checked(value, grad)
}

/// Log-domain inner weight from a known score.
pub fn log_weight_from_score(score: f64, logp_base: f64, tau: f64, variant: Variant) -> f64 {
    match variant {
        Variant::Dft => score / tau - logp_base,
        Variant::Dft2 => score / tau,
    }
}

/// `log w = s(y', x)/τ − log P⁰_g(y'|x̄)` for DFT, `s(y', x)/τ` for DFT2.
pub fn inner_log_weight(
    params: &ModelParams,
    x: &TokenSequence,
    cand: &Candidate,
    tau: f64,
    mode: ScoringMode,
    variant: Variant,
) -> Result<f64> {
    check_tau(tau)?;
    let s = score(params, x, &cand.tokens, mode)?;
    Ok(log_weight_from_score(s, cand.logp_base, tau, variant))
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("temperature tau must be positive, got {tau}")))
    }
}

/// `−s(y_pos, x) + τ · log((1/m) Σ_j w_j)` over an explicit candidate set,
/// with the gradient `−∇s_pos + Σ_j softmax(log w)_j ∇s_j`.
pub fn dft_exact_loss(
    params: &ModelParams,
    x: &TokenSequence,
    y_pos: &TokenSequence,
    candidates: &[Candidate],
    tau: f64,
    mode: ScoringMode,
    variant: Variant,
) -> Result<LossValue> {
    check_tau(tau)?;
    if candidates.is_empty() {
        return Err(Error::Input("dft_exact_loss needs at least one candidate".into()));
    }
    let (s_pos, _, g_pos) = score_with_grad(params, x, y_pos, mode)?;
    let evals: Vec<(f64, Vec<f64>)> = candidates
        .par_iter()
        .map(|c| {
            let (s, _, g) = score_with_grad(params, x, &c.tokens, mode)?;
            Ok((log_weight_from_score(s, c.logp_base, tau, variant), g))
        })
        .collect::<Result<_>>()?;
    let log_w: Vec<f64> = evals.iter().map(|e| e.0).collect();
    let coeffs = softmax(&log_w);
    let value = -s_pos + tau * log_mean_exp(&log_w);
    let mut grad: Vec<f64> = g_pos.iter().map(|g| -g).collect();
    for ((_, g), c) in evals.iter().zip(&coeffs) {
        add_into(&mut grad, g, *c);
    }
    LossValue::checked(value, grad)
}

fn pairwise(delta: f64, d_win: Vec<f64>, d_lose: &[f64], w_scale: f64, l_scale: f64) -> Result<LossValue> {
    // d/dΔ softplus(−Δ) = −σ(−Δ)
    let slope = -sigmoid(-delta);
    let grad = d_win
        .iter()
        .zip(d_lose)
        .map(|(gw, gl)| slope * (w_scale * gw - l_scale * gl))
        .collect();
    LossValue::checked(softplus(-delta), grad)
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("beta must be positive, got {beta}")))
    }
}

/// `−log σ(r_win − r_lose)` with `r = β log(P_g / P⁰_g)`.
pub fn dpo_loss(
    params: &ModelParams,
    base_params: &ModelParams,
    x: &TokenSequence,
    y_win: &TokenSequence,
    y_lose: &TokenSequence,
    beta: f64,
) -> Result<LossValue> {
    check_beta(beta)?;
    let (lw, gw) = crate::model::logprob_grad(params, x, y_win)?;
    let (ll, gl) = crate::model::logprob_grad(params, x, y_lose)?;
    let bw = sequence_logprob(base_params, x, y_win)?;
    let bl = sequence_logprob(base_params, x, y_lose)?;
    let delta = beta * (lw - bw) - beta * (ll - bl);
    pairwise(delta, gw, &gl, beta, beta)
}

/// `−log σ(r_win − r_lose − margin)` with `r = (β/|y|) log P_g(y|x)`.
pub fn simpo_loss(
    params: &ModelParams,
    x: &TokenSequence,
    y_win: &TokenSequence,
    y_lose: &TokenSequence,
    beta: f64,
    margin: f64,
) -> Result<LossValue> {
    check_beta(beta)?;
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Input(format!("margin must be >= 0, got {margin}")));
    }
    let (lw, gw) = crate::model::logprob_grad(params, x, y_win)?;
    let (ll, gl) = crate::model::logprob_grad(params, x, y_lose)?;
    let sw = beta / y_win.len() as f64;
    let sl = beta / y_lose.len() as f64;
    let delta = sw * lw - sl * ll - margin;
    pairwise(delta, gw, &gl, sw, sl)
}

/// DPO with the losing answer generated by the base model.
pub fn spin_loss(
    params: &ModelParams,
    base_params: &ModelParams,
    x: &TokenSequence,
    y_pos: &TokenSequence,
    y_generated: &TokenSequence,
    beta: f64,
) -> Result<LossValue> {
    dpo_loss(params, base_params, x, y_pos, y_generated, beta)
}

pub(crate) fn add_into(acc: &mut [f64], g: &[f64], scale: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += scale * b;
    }
}
