use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{token_logits, ModelParams, TokenSequence, EOS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Zero means greedy decoding.
    pub temperature: f64,
    /// `None` keeps every token.
    pub top_k: Option<usize>,
    pub top_p: f64,
    /// Upper bound on answer length, terminator included.
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            temperature: 0.7,
            top_k: Some(50),
            top_p: 1.0,
            max_tokens: 8,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Input(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.top_k == Some(0) {
            return Err(Error::Input("top_k must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Input(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(Error::Input("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Truncated next-token distribution: temperature, then top-k, then top-p,
/// then renormalization. Returns `(token, probability)` pairs.
pub(crate) fn next_token_distribution(logits: &[f64], cfg: &GenConfig) -> Vec<(usize, f64)> {
    let scaled: Vec<f64> = logits.iter().map(|&z| z / cfg.temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = scaled.iter().map(|&z| (z - max).exp()).enumerate().collect();
    let total: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= total);
    // stable sort keeps lower ids first among ties
    probs.sort_by(|a, b| b.1.total_cmp(&a.1));
    if let Some(k) = cfg.top_k {
        probs.truncate(k.min(probs.len()));
    }
    if cfg.top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = probs.len();
        for (i, p) in probs.iter().enumerate() {
            cum += p.1;
            if cum >= cfg.top_p {
                keep = i + 1;
                break;
            }
        }
        probs.truncate(keep);
    }
    let total: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= total);
    probs
}

/// Sample an answer with a generator seeded from `cfg.seed`.
pub fn sample(params: &ModelParams, prompt: &TokenSequence, cfg: &GenConfig) -> Result<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_with_rng(params, prompt, cfg, &mut rng)
}

/// Autoregressive sampling until the terminator. The final slot allowed by
/// `max_tokens` is always the terminator.
pub fn sample_with_rng<R: Rng + ?Sized>(
    params: &ModelParams,
    prompt: &TokenSequence,
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<TokenSequence> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::EmptySequence("prompt"));
    }
    let mut context = prompt.ids().to_vec();
    let mut answer = Vec::new();
    while answer.len() + 1 < cfg.max_tokens {
        let logits = token_logits(params, &TokenSequence::prompt(context.clone()))?;
        let next = if cfg.temperature == 0.0 {
            argmax(&logits)
        } else {
            let dist = next_token_distribution(&logits, cfg);
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut chosen = dist[dist.len() - 1].0;
            for &(tok, p) in &dist {
                cum += p;
                if u < cum {
                    chosen = tok;
                    break;
                }
            }
            chosen
        } as u32;
        if next == EOS {
            break;
        }
        answer.push(next);
        context.push(next);
    }
    Ok(TokenSequence::terminated(answer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn truncation_order() {
        let logits = [0.0, 1.0, 2.0, 3.0];
        let all = next_token_distribution(
            &logits,
            &GenConfig { temperature: 1.0, top_k: None, top_p: 1.0, ..Default::default() },
        );
        assert_eq!(all.len(), 4);
        let k2 = next_token_distribution(
            &logits,
            &GenConfig { temperature: 1.0, top_k: Some(2), top_p: 1.0, ..Default::default() },
        );
        assert_eq!(k2.iter().map(|p| p.0).collect::<Vec<_>>(), vec![3, 2]);
        assert!((k2.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-15);
        let p = next_token_distribution(
            &logits,
            &GenConfig { temperature: 1.0, top_k: None, top_p: 0.5, ..Default::default() },
        );
        // softmax mass of the top token is ~0.644
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn answers_respect_max_tokens() {
        let cfg = ModelConfig::new(5, 8, 1, 16);
        let params = ModelParams::init(cfg, 2);
        let gen = GenConfig { temperature: 1.0, top_k: None, top_p: 1.0, max_tokens: 3, seed: 9 };
        for seed in 0..50 {
            let y = sample(&params, &TokenSequence::prompt(vec![1, 2]), &GenConfig { seed, ..gen }).unwrap();
            assert!(y.len() <= 3 && y.is_terminated());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            GenConfig { temperature: -1.0, ..Default::default() },
            GenConfig { top_k: Some(0), ..Default::default() },
            GenConfig { top_p: 0.0, ..Default::default() },
            GenConfig { max_tokens: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }
}
