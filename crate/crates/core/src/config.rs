//! Flat `key = value` experiment configuration. `#` starts a comment;
//! unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fcco::{Method, TrainConfig};
use crate::model::GenConfig;
use crate::pool::PromptStrategy;

const KEYS: &[&str] = &[
    "task",
    "base",
    "pool",
    "out",
    "method",
    "tau",
    "gamma",
    "neg_per_example",
    "epochs",
    "batch_size",
    "lr",
    "warmup_ratio",
    "scheduler",
    "mode",
    "seed",
    "weight_decay",
    "grad_clip",
    "beta",
    "margin",
    "strategy",
    "m",
    "gen_temperature",
    "gen_top_k",
    "gen_top_p",
    "gen_max_tokens",
    "gen_seed",
    "oracle_max_len",
    "ablation_seeds",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: PathBuf,
    pub base: PathBuf,
    /// Existing pool file. Without it, pool-consuming runs generate one.
    pub pool: Option<PathBuf>,
    pub out: PathBuf,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub strategy: PromptStrategy,
    /// Pool depth when generating; defaults to `epochs · neg_per_example`.
    pub m: Option<usize>,
    /// Answer-length bound for reporting the enumerated objective.
    pub oracle_max_len: Option<usize>,
    pub ablation_seeds: usize,
}

impl ExperimentConfig {
    pub fn pool_depth(&self) -> usize {
        self.m.unwrap_or(self.train.epochs * self.train.neg_per_example)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.gen.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.ablation_seeds == 0 {
            return Err(Error::Config("ablation_seeds must be at least 1".into()));
        }
        if let Some(m) = self.m {
            if m < self.train.epochs * self.train.neg_per_example {
                return Err(Error::Config(format!(
                    "pool depth m={m} is below epochs x neg_per_example = {}",
                    self.train.epochs * self.train.neg_per_example
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // relative paths resolve against the config file's directory
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.task, &mut cfg.base, &mut cfg.out] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
            if let Some(p) = cfg.pool.as_mut() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        let mut r = Reader { map };
        let method: Method = r.required("method")?;
        let mut train = TrainConfig::for_method(method);
        if method.is_pairwise() && !r.map.contains_key("beta") {
            return Err(Error::Config(format!("{} requires beta", method.name())));
        }
        r.set("tau", &mut train.tau)?;
        r.set("gamma", &mut train.gamma)?;
        r.set("neg_per_example", &mut train.neg_per_example)?;
        r.set("epochs", &mut train.epochs)?;
        r.set("batch_size", &mut train.batch_size)?;
        r.set("lr", &mut train.lr)?;
        r.set("warmup_ratio", &mut train.warmup_ratio)?;
        r.set("scheduler", &mut train.scheduler)?;
        r.set("mode", &mut train.mode)?;
        r.set("seed", &mut train.seed)?;
        r.set("weight_decay", &mut train.weight_decay)?;
        r.set("beta", &mut train.beta)?;
        r.set("margin", &mut train.margin)?;
        train.grad_clip = r.optional("grad_clip")?;

        let mut gen = GenConfig::default();
        r.set("gen_temperature", &mut gen.temperature)?;
        r.set("gen_top_p", &mut gen.top_p)?;
        r.set("gen_max_tokens", &mut gen.max_tokens)?;
        r.set("gen_seed", &mut gen.seed)?;
        if let Some(v) = r.map.remove("gen_top_k") {
            gen.top_k = match v.as_str() {
                "none" | "0" => None,
                s => Some(parse("gen_top_k", s)?),
            };
        }

        let cfg = ExperimentConfig {
            task: r.required("task")?,
            base: r.required("base")?,
            pool: r.optional("pool")?,
            out: r.required("out")?,
            strategy: r.optional("strategy")?.unwrap_or(PromptStrategy::ChatTemplateBadSys),
            m: r.optional("m")?,
            oracle_max_len: r.optional("oracle_max_len")?,
            ablation_seeds: r.optional("ablation_seeds")?.unwrap_or(5),
            train,
            gen,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e: T::Err| Error::Config(format!("{key} = {v:?}: {e}")))
}

struct Reader {
    map: BTreeMap<String, String>,
}

impl Reader {
    fn optional<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.map.remove(key).map(|v| parse(key, &v)).transpose()
    }

    fn required<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.optional(key)?
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.optional(key)? {
            *slot = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::ScoringMode;

    const BASIC: &str = "task = t.json\nbase = b.bin\nout = run\nmethod = dft2\n";

    #[test]
    fn method_defaults_and_overrides() {
        let cfg = ExperimentConfig::parse(BASIC).unwrap();
        assert_eq!(cfg.train.tau, 0.3);
        assert_eq!(cfg.train.gamma, 0.9);
        assert_eq!(cfg.train.mode, ScoringMode::LengthNormalized);
        assert_eq!(cfg.strategy, PromptStrategy::ChatTemplateBadSys);
        let cfg = ExperimentConfig::parse(&format!("{BASIC}gamma = 1.0 # exact\ngen_top_k = none\n")).unwrap();
        assert_eq!(cfg.train.gamma, 1.0);
        assert_eq!(cfg.gen.top_k, None);
    }

    #[test]
    fn rejects_unknown_duplicate_and_missing() {
        assert!(ExperimentConfig::parse(&format!("{BASIC}colour = red\n")).is_err());
        assert!(ExperimentConfig::parse(&format!("{BASIC}tau = 1\ntau = 2\n")).is_err());
        assert!(ExperimentConfig::parse("task = t\nbase = b\nmethod = dft\n").is_err());
        assert!(ExperimentConfig::parse(&format!("{BASIC}gamma = 0\n")).is_err());
        let dpo = "task = t\nbase = b\nout = o\nmethod = dpo\n";
        assert!(ExperimentConfig::parse(dpo).is_err());
        assert!(ExperimentConfig::parse(&format!("{dpo}beta = 0.1\n")).is_ok());
    }
}
