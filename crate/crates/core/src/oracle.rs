//! Brute-force ground truth on small output spaces: enumeration of every
//! terminated answer up to a length bound, the exact discriminative
//! likelihood and objective, and central finite differences.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{ModelParams, TokenSequence, EOS};
use crate::numeric::{log_sum_exp, max_relative_error};
use crate::objectives::{dft_exact_loss, score, Candidate, ScoringMode, Variant};

/// Largest `K_eff^L` the enumerator accepts.
pub const ENUMERATION_GUARD: u64 = 1_000_000;

/// All terminator-final answers of length `1..=L` over `K` tokens, in
/// lexicographic order of their ids.
#[derive(Clone, Debug)]
pub struct OutputSpace {
    vocab_size: usize,
    max_len: usize,
    seqs: Vec<TokenSequence>,
    index: HashMap<Vec<u32>, usize>,
}

impl OutputSpace {
    pub fn new(vocab_size: usize, max_len: usize) -> Result<Self> {
        let seqs = enumerate_outputs(vocab_size, max_len)?;
        let index = seqs.iter().enumerate().map(|(i, s)| (s.ids().to_vec(), i)).collect();
        Ok(OutputSpace {
            vocab_size,
            max_len,
            seqs,
            index,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn sequences(&self) -> &[TokenSequence] {
        &self.seqs
    }

    pub fn position(&self, y: &TokenSequence) -> Option<usize> {
        self.index.get(y.ids()).copied()
    }

    pub fn contains(&self, y: &TokenSequence) -> bool {
        self.position(y).is_some()
    }

    /// Every element as a candidate whose proposal is uniform over the space,
    /// so that the mean importance weight equals `Σ_Y exp(s/τ)`.
    pub fn uniform_candidates(&self) -> Vec<Candidate> {
        let lp = -(self.len() as f64).ln();
        self.seqs
            .iter()
            .enumerate()
            .map(|(i, y)| Candidate {
                tokens: y.clone(),
                logp_base: lp,
                pool_index: i,
            })
            .collect()
    }
}

pub fn enumerate_outputs(vocab_size: usize, max_len: usize) -> Result<Vec<TokenSequence>> {
    if vocab_size == 0 || max_len == 0 {
        return Err(Error::Input(format!("cannot enumerate K={vocab_size} L={max_len}")));
    }
    let k_eff = (vocab_size - 1) as u64;
    let too_big = || Error::GuardExceeded {
        k_eff: k_eff as usize,
        max_len,
    };
    let mut size = 1u64;
    for _ in 0..max_len {
        size = size.checked_mul(k_eff).ok_or_else(too_big)?;
        if size > ENUMERATION_GUARD {
            return Err(too_big());
        }
    }
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(max_len);
    visit(&mut prefix, vocab_size as u32, max_len, &mut out);
    Ok(out)
}

fn visit(prefix: &mut Vec<u32>, k: u32, max_len: usize, out: &mut Vec<TokenSequence>) {
    let mut ids = prefix.clone();
    ids.push(EOS);
    out.push(TokenSequence::answer(ids));
    if prefix.len() + 1 >= max_len {
        return;
    }
    for t in 1..k {
        prefix.push(t);
        visit(prefix, k, max_len, out);
        prefix.pop();
    }
}

/// `s(y', x)` for every `y'` in the space, in space order.
pub fn space_scores(params: &ModelParams, x: &TokenSequence, space: &OutputSpace, mode: ScoringMode) -> Result<Vec<f64>> {
    space.seqs.par_iter().map(|y| score(params, x, y, mode)).collect()
}

/// `log Σ_{y'∈Y} exp(s(y', x)/τ)`
pub fn log_partition(
    params: &ModelParams,
    x: &TokenSequence,
    space: &OutputSpace,
    tau: f64,
    mode: ScoringMode,
) -> Result<f64> {
    check_tau(tau)?;
    let scaled: Vec<f64> = space_scores(params, x, space, mode)?.iter().map(|s| s / tau).collect();
    Ok(log_sum_exp(&scaled))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("temperature tau must be positive, got {tau}")))
    }
}

/// `P_d(y|x) = exp(s(y,x)/τ) / Σ_{y'} exp(s(y',x)/τ)`
pub fn exact_discriminative_likelihood(
    params: &ModelParams,
    x: &TokenSequence,
    y: &TokenSequence,
    space: &OutputSpace,
    tau: f64,
    mode: ScoringMode,
) -> Result<f64> {
    let pos = space.position(y).ok_or(Error::NotInSpace)?;
    check_tau(tau)?;
    let scaled: Vec<f64> = space_scores(params, x, space, mode)?.iter().map(|s| s / tau).collect();
    Ok((scaled[pos] - log_sum_exp(&scaled)).exp())
}

/// Per-example `−s(y_i, x_i) + τ log Σ_{y'} exp(s(y', x_i)/τ)`.
pub fn exact_objective_terms(
    params: &ModelParams,
    data: &[Example],
    space: &OutputSpace,
    tau: f64,
    mode: ScoringMode,
) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if data.iter().any(|e| !space.contains(&e.y)) {
        return Err(Error::NotInSpace);
    }
    data.iter()
        .map(|e| {
            let s = score(params, &e.x, &e.y, mode)?;
            Ok(-s + tau * log_partition(params, &e.x, space, tau, mode)?)
        })
        .collect()
}

/// `F(θ) = −(1/n) Σ s(y_i, x_i) + (τ/n) Σ log Σ_{y'} exp(s(y', x_i)/τ)`
pub fn exact_objective(
    params: &ModelParams,
    data: &[Example],
    space: &OutputSpace,
    tau: f64,
    mode: ScoringMode,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("exact objective over an empty dataset".into()));
    }
    let terms = exact_objective_terms(params, data, space, tau, mode)?;
    let f = terms.iter().sum::<f64>() / data.len() as f64;
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::NonFinite(format!("exact objective {f}")))
    }
}

/// Central differences `(f(θ + h e_k) − f(θ − h e_k)) / 2h` for every `k`.
pub fn finite_difference_grad<F>(f: F, params: &ModelParams, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&ModelParams) -> Result<f64> + Sync,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_difference_coords(f, params, step, &coords)
}

/// Central differences restricted to `coords`, returned in the same order.
pub fn finite_difference_coords<F>(f: F, params: &ModelParams, step: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&ModelParams) -> Result<f64> + Sync,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Input(format!("finite-difference step must be positive, got {step}")));
    }
    coords
        .par_iter()
        .map_init(
            || params.clone(),
            |p, &k| {
                let orig = p.flat()[k];
                p.flat_mut()[k] = orig + step;
                let hi = f(p);
                p.flat_mut()[k] = orig - step;
                let lo = f(p);
                p.flat_mut()[k] = orig;
                let (hi, lo) = (hi?, lo?);
                if !hi.is_finite() || !lo.is_finite() {
                    return Err(Error::NonFinite(format!("objective evaluation at coordinate {k}")));
                }
                Ok((hi - lo) / (2.0 * step))
            },
        )
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Checks applied to a checkpoint by `oracle-check`: finiteness,
/// normalization of `P_d`, agreement of the candidate-set loss with the
/// enumerated objective, argmax invariance across temperatures, and a
/// finite-difference gradient check on up to `max_fd_coords` coordinates.
pub fn run_checks(
    params: &ModelParams,
    max_len: usize,
    tau: f64,
    mode: ScoringMode,
    seed: u64,
    max_fd_coords: usize,
) -> Result<Vec<CheckResult>> {
    check_tau(tau)?;
    let k = params.config().vocab_size;
    let space = OutputSpace::new(k, max_len)?;
    let mut out = Vec::new();

    if let Err(Error::NonFiniteParam { index }) = params.check_finite() {
        out.push(CheckResult {
            name: "finite_params",
            passed: false,
            detail: format!("non-finite value at coordinate {index}"),
        });
        return Ok(out);
    }
    out.push(CheckResult {
        name: "finite_params",
        passed: true,
        detail: format!("{} coordinates", params.len()),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompts: Vec<TokenSequence> = (0..3)
        .map(|_| {
            let ids = (0..3).map(|_| if k > 1 { rng.random_range(1..k as u32) } else { 0 }).collect();
            TokenSequence::prompt(ids)
        })
        .collect();
    let data: Vec<Example> = prompts
        .iter()
        .enumerate()
        .map(|(i, x)| Example {
            x: x.clone(),
            y: space.sequences()[i % space.len()].clone(),
            y_bad: None,
        })
        .collect();

    let mut worst = 0.0f64;
    for x in &prompts {
        let total: f64 = space
            .sequences()
            .iter()
            .map(|y| exact_discriminative_likelihood(params, x, y, &space, tau, mode))
            .sum::<Result<f64>>()?;
        worst = worst.max((total - 1.0).abs());
    }
    out.push(CheckResult {
        name: "normalization",
        passed: worst <= 1e-12,
        detail: format!("max |sum P_d - 1| = {worst:.3e}"),
    });

    let terms = exact_objective_terms(params, &data, &space, tau, mode)?;
    let cands = space.uniform_candidates();
    let mut worst = 0.0f64;
    for (e, t) in data.iter().zip(&terms) {
        let l = dft_exact_loss(params, &e.x, &e.y, &cands, tau, mode, Variant::Dft)?;
        worst = worst.max((l.value - t).abs());
    }
    out.push(CheckResult {
        name: "candidate_loss_vs_enumeration",
        passed: worst <= 1e-10,
        detail: format!("max abs diff = {worst:.3e}"),
    });

    let mut agree = true;
    for x in &prompts {
        let s = space_scores(params, x, &space, mode)?;
        let best = argmax_strict(&s);
        for t in [0.1, 1.0, 10.0] {
            let p: Vec<f64> = space
                .sequences()
                .iter()
                .map(|y| exact_discriminative_likelihood(params, x, y, &space, t, mode))
                .collect::<Result<_>>()?;
            if best.is_some() && argmax_strict(&p) != best {
                agree = false;
            }
        }
    }
    out.push(CheckResult {
        name: "argmax_invariance",
        passed: agree,
        detail: "tau in {0.1, 1, 10}".into(),
    });

    let e = &data[0];
    let analytic = dft_exact_loss(params, &e.x, &e.y, &cands, tau, mode, Variant::Dft)?.grad;
    let coords = fd_coords(params.len(), max_fd_coords, seed);
    let f = |p: &ModelParams| dft_exact_loss(p, &e.x, &e.y, &cands, tau, mode, Variant::Dft).map(|l| l.value);
    let numeric = finite_difference_coords(f, params, 1e-5, &coords)?;
    let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
    let rel = max_relative_error(&picked, &numeric);
    out.push(CheckResult {
        name: "gradient_vs_finite_differences",
        passed: rel < 1e-4,
        detail: format!("rel err = {rel:.3e} over {} coordinates", coords.len()),
    });
    Ok(out)
}

fn argmax_strict(xs: &[f64]) -> Option<usize> {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    let tied = xs.iter().enumerate().any(|(i, &v)| i != best && (v - xs[best]).abs() <= 1e-12 * xs[best].abs().max(1.0));
    (!tied).then_some(best)
}

fn fd_coords(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4644);
    let mut picked = rand::seq::index::sample(&mut rng, n, max).into_vec();
    picked.sort_unstable();
    picked
}
