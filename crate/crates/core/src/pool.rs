//! Offline negative candidates sampled from the frozen base model.
//!
//! File format: one JSON object per line. The first line is the header
//! `{"format":"dft-pool","version":1,"m":..,"base_params_hash":".."}`, then one
//! entry per `(example_id, cand_idx)` in that order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::fcco::CandidateSource;
use crate::model::{sample_with_rng, sequence_logprob, GenConfig, ModelParams, TokenSequence, Vocab, EOS};
use crate::numeric::mix_seed;
use crate::objectives::Candidate;

pub const POOL_FORMAT: &str = "dft-pool";
pub const POOL_VERSION: u32 = 1;

pub const SYSTEM_MARKER: &str = "<|system|>";
pub const USER_MARKER: &str = "<|user|>";
pub const ASSISTANT_MARKER: &str = "<|assistant|>";

const GOOD_SYSTEM: &str = "The assistant should answer truthfully and be faithful to factual knowledge as well as \
                           given contexts, never making up any new facts that aren't true or cannot be grounded in \
                           the instruction.";
const BAD_SYSTEM: &str = "You are an unhelpful assistant.";

/// How the generation prompt `x̄` is formed from `x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    Direct,
    ChatTemplate,
    ChatTemplateGoodSys,
    ChatTemplateBadSys,
}

impl PromptStrategy {
    pub fn system_text(self) -> Option<&'static str> {
        match self {
            PromptStrategy::ChatTemplateGoodSys => Some(GOOD_SYSTEM),
            PromptStrategy::ChatTemplateBadSys => Some(BAD_SYSTEM),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptStrategy::Direct => "direct",
            PromptStrategy::ChatTemplate => "chat_template",
            PromptStrategy::ChatTemplateGoodSys => "chat_template_good_sys",
            PromptStrategy::ChatTemplateBadSys => "chat_template_bad_sys",
        }
    }
}

impl std::str::FromStr for PromptStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            PromptStrategy::Direct,
            PromptStrategy::ChatTemplate,
            PromptStrategy::ChatTemplateGoodSys,
            PromptStrategy::ChatTemplateBadSys,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown prompt strategy {s:?}")))
    }
}

fn marker(vocab: &Vocab, name: &str) -> Result<u32> {
    vocab
        .id(name)
        .ok_or_else(|| Error::Input(format!("vocabulary lacks the {name} marker")))
}

/// `x̄` for generation. Chat layouts are
/// `[<|system|> text </s>] <|user|> x </s> <|assistant|>`.
pub fn build_prompt(x: &TokenSequence, strategy: PromptStrategy, vocab: &Vocab) -> Result<TokenSequence> {
    if strategy == PromptStrategy::Direct {
        return Ok(x.clone());
    }
    let mut ids = Vec::new();
    if let Some(text) = strategy.system_text() {
        ids.push(marker(vocab, SYSTEM_MARKER)?);
        ids.extend(vocab.encode_text(text)?);
        ids.push(EOS);
    }
    ids.push(marker(vocab, USER_MARKER)?);
    ids.extend_from_slice(x.ids());
    ids.push(EOS);
    ids.push(marker(vocab, ASSISTANT_MARKER)?);
    Ok(TokenSequence::prompt(ids))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub example_id: usize,
    pub cand_idx: usize,
    pub tokens: Vec<u32>,
    /// `log P⁰_g(tokens | x̄)` in nats.
    pub logp_base: f64,
    pub strategy: PromptStrategy,
    pub gen_seed: u64,
}

impl PoolEntry {
    pub fn answer(&self) -> TokenSequence {
        TokenSequence::answer(self.tokens.clone())
    }

    pub fn candidate(&self) -> Result<Candidate> {
        Candidate::new(self.answer(), self.logp_base, self.cand_idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PoolHeader {
    format: String,
    version: u32,
    m: usize,
    base_params_hash: String,
}

/// `m` entries per example, indexed `[example][cand_idx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativePool {
    m: usize,
    base_params_hash: String,
    entries: Vec<Vec<PoolEntry>>,
}

pub fn params_hash(params: &ModelParams) -> String {
    hex::encode(Sha256::digest(params.to_bytes()))
}

impl NegativePool {
    pub fn new(m: usize, base_params_hash: String, entries: Vec<Vec<PoolEntry>>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Input("pool depth m must be at least 1".into()));
        }
        for (i, row) in entries.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Format(format!("example {i} has {} entries, expected {m}", row.len())));
            }
            for (j, e) in row.iter().enumerate() {
                if e.example_id != i || e.cand_idx != j {
                    return Err(Error::Format(format!(
                        "entry ({}, {}) stored at ({i}, {j})",
                        e.example_id, e.cand_idx
                    )));
                }
                if e.tokens.last() != Some(&EOS) {
                    return Err(Error::Format(format!("entry ({i}, {j}) is not terminated")));
                }
                if !(e.logp_base.is_finite() && e.logp_base <= 0.0) {
                    return Err(Error::Format(format!("entry ({i}, {j}) has logp_base {}", e.logp_base)));
                }
            }
        }
        Ok(NegativePool {
            m,
            base_params_hash,
            entries,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn base_params_hash(&self) -> &str {
        &self.base_params_hash
    }

    pub fn n_examples(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self, example: usize) -> &[PoolEntry] {
        &self.entries[example]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PoolEntry> {
        self.entries.iter().flatten()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        let header = PoolHeader {
            format: POOL_FORMAT.into(),
            version: POOL_VERSION,
            m: self.m,
            base_params_hash: self.base_params_hash.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in self.iter() {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty pool file".into()))??;
        let header: PoolHeader = serde_json::from_str(&first)?;
        if header.format != POOL_FORMAT {
            return Err(Error::Format(format!("not a pool file: format {:?}", header.format)));
        }
        if header.version != POOL_VERSION {
            return Err(Error::VersionMismatch {
                found: header.version,
                expected: POOL_VERSION,
            });
        }
        let mut entries: Vec<Vec<PoolEntry>> = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: PoolEntry = serde_json::from_str(&line)?;
            if e.example_id == entries.len() {
                entries.push(Vec::with_capacity(header.m));
            }
            match entries.get_mut(e.example_id) {
                Some(row) => row.push(e),
                None => return Err(Error::Format(format!("entry for example {} out of order", e.example_id))),
            }
        }
        NegativePool::new(header.m, header.base_params_hash, entries)
    }

    /// Largest `|stored − recomputed|` over the given `(example, cand)` pairs.
    pub fn rescore_error(
        &self,
        base: &ModelParams,
        examples: &[Example],
        vocab: &Vocab,
        which: &[(usize, usize)],
    ) -> Result<f64> {
        let errs: Vec<f64> = which
            .par_iter()
            .map(|&(i, j)| {
                let e = &self.entries[i][j];
                let xbar = build_prompt(&examples[i].x, e.strategy, vocab)?;
                let lp = sequence_logprob(base, &xbar, &e.answer())?;
                Ok((lp - e.logp_base).abs())
            })
            .collect::<Result<_>>()?;
        Ok(errs.into_iter().fold(0.0, f64::max))
    }
}

/// Samples `m` candidates per example on `x̄`. Each candidate's stream is
/// seeded from `(gen.seed, example, cand)` so the pool does not depend on
/// thread scheduling. A sample holding only the terminator is retried once
/// on a derived stream and kept as is if the retry is also empty.
pub fn generate_pool(
    base: &ModelParams,
    examples: &[Example],
    m: usize,
    gen: &GenConfig,
    strategy: PromptStrategy,
    vocab: &Vocab,
) -> Result<NegativePool> {
    if m == 0 {
        return Err(Error::Input("pool depth m must be at least 1".into()));
    }
    gen.validate()?;
    let rows: Vec<Vec<PoolEntry>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let xbar = build_prompt(&ex.x, strategy, vocab)?;
            (0..m)
                .map(|j| {
                    let gen_seed = mix_seed(&[gen.seed, i as u64, j as u64]);
                    let mut rng = ChaCha8Rng::seed_from_u64(gen_seed);
                    let mut y = sample_with_rng(base, &xbar, gen, &mut rng)?;
                    if y.len() == 1 {
                        let mut retry = ChaCha8Rng::seed_from_u64(mix_seed(&[gen_seed, 1]));
                        y = sample_with_rng(base, &xbar, gen, &mut retry)?;
                    }
                    let logp_base = sequence_logprob(base, &xbar, &y)?;
                    Ok(PoolEntry {
                        example_id: i,
                        cand_idx: j,
                        tokens: y.ids().to_vec(),
                        logp_base,
                        strategy,
                        gen_seed,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    NegativePool::new(m, params_hash(base), rows)
}

/// Candidate indices for `visit`: slice `[visit·B, visit·B + B)` of a seeded
/// per-example permutation of `0..m`.
pub fn draw_indices(m: usize, example_id: usize, b: usize, visit: usize, seed: u64) -> Result<Vec<usize>> {
    let needed = (visit + 1) * b;
    if b == 0 || needed > m {
        return Err(Error::PoolExhausted {
            example: example_id,
            visit,
            needed,
            available: m,
        });
    }
    let mut perm: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, example_id as u64, 0x504f_4f4c]));
    perm.shuffle(&mut rng);
    Ok(perm[visit * b..needed].to_vec())
}

pub fn draw_negatives(
    pool: &NegativePool,
    example_id: usize,
    b: usize,
    visit: usize,
    seed: u64,
) -> Result<Vec<&PoolEntry>> {
    if example_id >= pool.n_examples() {
        return Err(Error::Input(format!(
            "example {example_id} not in pool of {} examples",
            pool.n_examples()
        )));
    }
    let idx = draw_indices(pool.m, example_id, b, visit, seed)?;
    Ok(idx.into_iter().map(|j| &pool.entries[example_id][j]).collect())
}

/// Adapts a pool to the training loop: visit `e` of an example is its
/// `e`-th epoch.
pub struct PoolSampler<'a> {
    pub pool: &'a NegativePool,
    pub seed: u64,
}

impl CandidateSource for PoolSampler<'_> {
    fn draw(&self, example: usize, visit: usize, count: usize) -> Result<Vec<Candidate>> {
        draw_negatives(self.pool, example, count, visit, self.seed)?
            .into_iter()
            .map(PoolEntry::candidate)
            .collect()
    }

    fn check_budget(&self, n_examples: usize, visits: usize, count: usize) -> Result<()> {
        if self.pool.n_examples() < n_examples {
            return Err(Error::Input(format!(
                "pool covers {} examples, training set has {n_examples}",
                self.pool.n_examples()
            )));
        }
        if visits * count > self.pool.m {
            return Err(Error::PoolExhausted {
                example: 0,
                visit: visits - 1,
                needed: visits * count,
                available: self.pool.m,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        let names = [
            "</s>",
            "a",
            "b",
            "<|system|>",
            "<|user|>",
            "<|assistant|>",
            "<unk>",
            "You",
            "are",
            "an",
            "unhelpful",
            "assistant",
            ".",
        ];
        Vocab::new(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn direct_is_identity() {
        let x = TokenSequence::prompt(vec![1, 2]);
        assert_eq!(build_prompt(&x, PromptStrategy::Direct, &vocab()).unwrap(), x);
    }

    #[test]
    fn bad_system_layout() {
        let v = vocab();
        let x = TokenSequence::prompt(vec![1, 2]);
        let xbar = build_prompt(&x, PromptStrategy::ChatTemplateBadSys, &v).unwrap();
        let expect: Vec<u32> = vec![3, 7, 8, 9, 10, 11, 12, 0, 4, 1, 2, 0, 5];
        assert_eq!(xbar.ids(), &expect[..]);
        assert_eq!(xbar, build_prompt(&x, PromptStrategy::ChatTemplateBadSys, &v).unwrap());
        let plain = build_prompt(&x, PromptStrategy::ChatTemplate, &v).unwrap();
        assert_eq!(plain.ids(), &[4, 1, 2, 0, 5]);
    }

    #[test]
    fn draws_partition_and_exhaust() {
        let a = draw_indices(4, 3, 2, 0, 9).unwrap();
        let b = draw_indices(4, 3, 2, 1, 9).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(a, draw_indices(4, 3, 2, 0, 9).unwrap());
        let mut full = draw_indices(3, 0, 3, 0, 1).unwrap();
        full.sort();
        assert_eq!(full, vec![0, 1, 2]);
        assert!(matches!(draw_indices(4, 3, 2, 2, 9), Err(Error::PoolExhausted { .. })));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            PromptStrategy::Direct,
            PromptStrategy::ChatTemplate,
            PromptStrategy::ChatTemplateGoodSys,
            PromptStrategy::ChatTemplateBadSys,
        ] {
            assert_eq!(s.name().parse::<PromptStrategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
    }
}
