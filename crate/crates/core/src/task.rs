//! Synthetic tasks with a known-bad answer per prompt.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, TaskData};
use crate::error::{Error, Result};
use crate::model::{Vocab, EOS};
use crate::numeric::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `a ? b`, answer the larger operand. `digits` is 1 or 2.
    CompareNumbers { digits: usize },
    /// Three digits, answer them back.
    CopyPattern,
    /// `k1 v1 k2 v2 ? k`, answer the value stored under `k`.
    KeyValueRecall,
}

impl TaskKind {
    pub fn name(self) -> String {
        match self {
            TaskKind::CompareNumbers { digits: 2 } => "compare_numbers".into(),
            TaskKind::CompareNumbers { digits } => format!("compare_numbers:{digits}"),
            TaskKind::CopyPattern => "copy_pattern".into(),
            TaskKind::KeyValueRecall => "key_value_recall".into(),
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compare_numbers" => Ok(TaskKind::CompareNumbers { digits: 2 }),
            "copy_pattern" => Ok(TaskKind::CopyPattern),
            "key_value_recall" => Ok(TaskKind::KeyValueRecall),
            other => match other.strip_prefix("compare_numbers:") {
                Some(d) => match d.parse::<usize>() {
                    Ok(digits @ 1..=2) => Ok(TaskKind::CompareNumbers { digits }),
                    _ => Err(Error::Config(format!("compare_numbers supports 1 or 2 digits, got {d:?}"))),
                },
                None => Err(Error::Config(format!("unknown task {other:?}"))),
            },
        }
    }
}

/// Shared word-level vocabulary: terminator, `?`, digits, chat markers and
/// the words of the adversarial system message.
pub fn task_vocab() -> Vocab {
    let mut names: Vec<String> = vec!["</s>".into(), "?".into()];
    names.extend((0..10).map(|d| d.to_string()));
    for w in [
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
    ] {
        names.push(w.into());
    }
    Vocab::new(names).expect("non-empty")
}

const QUESTION: u32 = 1;

fn digit(d: usize) -> u32 {
    2 + d as u32
}

fn number_tokens(n: usize, digits: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(digits);
    let mut rest = n;
    for _ in 0..digits {
        out.push(digit(rest % 10));
        rest /= 10;
    }
    out.reverse();
    out
}

fn terminated(mut ids: Vec<u32>) -> Vec<u32> {
    ids.push(EOS);
    ids
}

fn all_examples(kind: TaskKind) -> Vec<Example> {
    match kind {
        TaskKind::CompareNumbers { digits } => {
            let lo = if digits == 1 { 0 } else { 10usize.pow(digits as u32 - 1) };
            let hi = 10usize.pow(digits as u32);
            let mut out = Vec::new();
            for a in lo..hi {
                for b in lo..hi {
                    if a == b {
                        continue;
                    }
                    let mut x = number_tokens(a, digits);
                    x.push(QUESTION);
                    x.extend(number_tokens(b, digits));
                    let (big, small) = if a > b { (a, b) } else { (b, a) };
                    out.push(Example::new(
                        x,
                        terminated(number_tokens(big, digits)),
                        Some(terminated(number_tokens(small, digits))),
                    ));
                }
            }
            out
        }
        TaskKind::CopyPattern => (0..1000)
            .map(|n| {
                let x = number_tokens(n, 3);
                let mut bad = x.clone();
                bad[2] = digit(((n % 10) + 1) % 10);
                Example::new(x.clone(), terminated(x), Some(terminated(bad)))
            })
            .collect(),
        TaskKind::KeyValueRecall => {
            let mut out = Vec::new();
            for k1 in 0..10 {
                for k2 in 0..10 {
                    if k1 == k2 {
                        continue;
                    }
                    for v1 in 0..10 {
                        for v2 in 0..10 {
                            if v1 == v2 {
                                continue;
                            }
                            for (q, v, other) in [(k1, v1, v2), (k2, v2, v1)] {
                                let x = vec![digit(k1), digit(v1), digit(k2), digit(v2), QUESTION, digit(q)];
                                out.push(Example::new(x, vec![digit(v), EOS], Some(vec![digit(other), EOS])));
                            }
                        }
                    }
                }
            }
            out
        }
    }
}

/// Deterministic train/test split of `size` training prompts and
/// `max(10, size / 4)` disjoint test prompts.
pub fn make_task(kind: TaskKind, size: usize, seed: u64) -> Result<TaskData> {
    if size < 10 {
        return Err(Error::Input(format!("task size must be at least 10, got {size}")));
    }
    let test_size = (size / 4).max(10);
    let mut all = all_examples(kind);
    if size + test_size > all.len() {
        return Err(Error::Input(format!(
            "{} has {} distinct prompts, {size} train + {test_size} test requested",
            kind.name(),
            all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5441_534b]));
    all.shuffle(&mut rng);
    all.truncate(size + test_size);
    let test = all.split_off(size);
    Ok(TaskData {
        name: kind.name(),
        vocab: task_vocab(),
        train: all,
        test,
    })
}

/// Training set for a base model that answers with either the good or the
/// bad answer: every prompt appears once with each.
pub fn base_training_set(train: &[Example]) -> Vec<Example> {
    let mut out = Vec::with_capacity(2 * train.len());
    for e in train {
        out.push(Example {
            x: e.x.clone(),
            y: e.y.clone(),
            y_bad: None,
        });
        if let Some(bad) = &e.y_bad {
            out.push(Example {
                x: e.x.clone(),
                y: bad.clone(),
                y_bad: None,
            });
        }
    }
    out
}

/// Longest prompt and answer in the task, terminators included.
pub fn length_budget(task: &TaskData) -> (usize, usize) {
    let all = task.train.iter().chain(&task.test);
    let mut px = 0;
    let mut py = 0;
    for e in all {
        px = px.max(e.x.len());
        py = py.max(e.y.len());
        if let Some(b) = &e.y_bad {
            py = py.max(b.len());
        }
    }
    (px, py)
}
