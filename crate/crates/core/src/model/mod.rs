//! Tiny causal transformer over a finite vocabulary.
//!
//! Next-token logits are `h(w; context)ᵀ W_k` where `W` is the token embedding
//! table, tied between input and output. Parameters live in a single flat
//! `f64` vector; [`Layout`] maps named blocks onto ranges of it so optimizers,
//! finite-difference checks and the file format all share one view.

mod io;
mod sample;
mod transformer;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_params, save_params, PARAM_MAGIC, PARAM_VERSION};
pub use sample::{sample, sample_with_rng, GenConfig};
pub use transformer::{logprob_grad, logprob_grad_into, sequence_logprob, token_logits};

/// The reserved end-of-sequence id. Every vocabulary places it first.
pub const EOS: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    names: Vec<String>,
}

impl Vocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Input("vocabulary must hold at least the end-of-sequence token".into()));
        }
        Ok(Vocab { names })
    }

    /// A vocabulary of `k` anonymous tokens, `</s>` first.
    pub fn anonymous(k: usize) -> Self {
        let names = (0..k)
            .map(|i| if i == 0 { "</s>".to_string() } else { format!("t{i}") })
            .collect();
        Vocab { names }
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32)
    }

    /// Word-level encoding: whitespace split, trailing punctuation peeled off
    /// into its own token when the vocabulary has it, unknown words mapped to
    /// `<unk>`.
    pub fn encode_text(&self, text: &str) -> Result<Vec<u32>> {
        let unk = self.id("<unk>");
        let lookup = |w: &str| -> Result<u32> {
            self.id(w)
                .or(unk)
                .ok_or_else(|| Error::Input(format!("word {w:?} not in vocabulary and no <unk> token")))
        };
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if self.id(word).is_some() {
                out.push(lookup(word)?);
                continue;
            }
            let trimmed = word.trim_end_matches(['.', ',', '?', '!']);
            let tail = &word[trimmed.len()..];
            if !trimmed.is_empty() {
                out.push(lookup(trimmed)?);
            }
            for ch in tail.chars() {
                out.push(lookup(&ch.to_string())?);
            }
        }
        Ok(out)
    }

    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.name(i).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Prompt,
    Answer,
}

/// Token ids with a role. Answers always end with [`EOS`], and `len()`
/// counts the terminator.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
    role: Role,
}

impl TokenSequence {
    pub fn prompt(ids: Vec<u32>) -> Self {
        TokenSequence { ids, role: Role::Prompt }
    }

    pub fn answer(ids: Vec<u32>) -> Self {
        TokenSequence { ids, role: Role::Answer }
    }

    /// Answer from content tokens, appending the terminator.
    pub fn terminated(mut content: Vec<u32>) -> Self {
        content.push(EOS);
        Self::answer(content)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::InvalidToken { id, vocab: vocab_size });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, d_model: usize, n_layers: usize, max_len: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            max_len,
        }
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn layout(&self) -> Layout {
        Layout::new(*self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.max_len == 0 {
            return Err(Error::Input(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }
}

/// Ranges of one transformer block inside the flat view.
#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Flat-view layout. Matrices are row-major `[in][out]`; the embedding table
/// is `[token][d]`.
#[derive(Clone, Debug)]
pub struct Layout {
    pub embed: Range<usize>,
    pub pos: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub lnf_gain: Range<usize>,
    pub lnf_bias: Range<usize>,
    pub total: usize,
}

impl Layout {
    fn new(cfg: ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff();
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let embed = take(cfg.vocab_size * d);
        let pos = take(cfg.max_len * d);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockLayout {
                ln1_gain: take(d),
                ln1_bias: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2_gain: take(d),
                ln2_bias: take(d),
                w1: take(d * f),
                b1: take(f),
                w2: take(f * d),
                b2: take(d),
            })
            .collect();
        let lnf_gain = take(d);
        let lnf_bias = take(d);
        Layout {
            embed,
            pos,
            blocks,
            lnf_gain,
            lnf_bias,
            total: at,
        }
    }

    /// Parameter count of everything except the positional table.
    pub(crate) fn fixed_size(cfg: ModelConfig) -> usize {
        let d = cfg.d_model;
        let f = cfg.d_ff();
        let per_block = 4 * d + 4 * d * d + 2 * d * f + f + d;
        cfg.vocab_size * d + cfg.n_layers * per_block + 2 * d
    }
}

/// All model parameters `θ = (w, W)` as one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    data: Vec<f64>,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.total == other.total && self.embed == other.embed && self.pos == other.pos
    }
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let layout = config.layout();
        let data = vec![0.0; layout.total];
        ModelParams { config, layout, data }
    }

    /// Seeded initialization: small Gaussian embeddings, `1/√fan_in` scaled
    /// projections, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        Self::init_scaled(config, seed, 1.0)
    }

    /// Like [`ModelParams::init`] with every random block multiplied by `scale`.
    pub fn init_scaled(config: ModelConfig, seed: u64, scale: f64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model as f64;
        let f = config.d_ff() as f64;
        let layout = p.layout.clone();
        let mut fill = |data: &mut [f64], std: f64| {
            let normal = Normal::new(0.0, std * scale).expect("finite std");
            data.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        };
        fill(&mut p.data[layout.embed.clone()], 0.5);
        fill(&mut p.data[layout.pos.clone()], 0.1);
        for b in &layout.blocks {
            for r in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1] {
                fill(&mut p.data[r.clone()], 1.0 / d.sqrt());
            }
            fill(&mut p.data[b.w2.clone()], 1.0 / f.sqrt());
            p.data[b.ln1_gain.clone()].fill(1.0);
            p.data[b.ln2_gain.clone()].fill(1.0);
        }
        p.data[layout.lnf_gain.clone()].fill(1.0);
        p
    }

    pub fn from_flat(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        let layout = config.layout();
        if data.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "flat view has {} entries, config {config:?} needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(ModelParams { config, layout, data })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Copy of these parameters with a different flat view.
    pub fn with_flat(&self, data: Vec<f64>) -> Result<Self> {
        Self::from_flat(self.config, data)
    }

    pub fn block(&self, range: &Range<usize>) -> &[f64] {
        &self.data[range.clone()]
    }

    /// First non-finite coordinate, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Error::NonFiniteParam { index }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous_and_complete() {
        let cfg = ModelConfig::new(5, 8, 2, 12);
        let l = cfg.layout();
        assert_eq!(l.embed.start, 0);
        assert_eq!(l.pos.start, l.embed.end);
        assert_eq!(l.blocks[0].ln1_gain.start, l.pos.end);
        assert_eq!(l.blocks[1].ln1_gain.start, l.blocks[0].b2.end);
        assert_eq!(l.lnf_bias.end, l.total);
        assert_eq!(Layout::fixed_size(cfg) + 12 * 8, l.total);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::new(4, 8, 1, 8);
        assert_eq!(ModelParams::init(cfg, 3), ModelParams::init(cfg, 3));
        assert_ne!(ModelParams::init(cfg, 3), ModelParams::init(cfg, 4));
    }

    #[test]
    fn encode_text_peels_punctuation() {
        let vocab = Vocab::new(
            ["</s>", "<unk>", "You", "are", "assistant", "."]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        let ids = vocab.encode_text("You are an unhelpful assistant.").unwrap();
        assert_eq!(ids, vec![2, 3, 1, 1, 4, 5]);
    }

    #[test]
    fn token_validation() {
        let s = TokenSequence::terminated(vec![1, 2]);
        assert!(s.is_terminated());
        assert_eq!(s.len(), 3);
        assert!(s.validate(3).is_ok());
        assert!(matches!(s.validate(2), Err(Error::InvalidToken { id: 2, vocab: 2 })));
    }
}
