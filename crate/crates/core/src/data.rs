//! Labeled examples and the task file that carries them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenSequence, Vocab};

/// A prompt, its positive answer, and optionally a known-bad answer.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: TokenSequence,
    pub y: TokenSequence,
    pub y_bad: Option<TokenSequence>,
}

impl Example {
    pub fn new(x: Vec<u32>, y: Vec<u32>, y_bad: Option<Vec<u32>>) -> Self {
        Example {
            x: TokenSequence::prompt(x),
            y: TokenSequence::answer(y),
            y_bad: y_bad.map(TokenSequence::answer),
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        self.x.validate(vocab_size)?;
        self.y.validate(vocab_size)?;
        if !self.y.is_terminated() {
            return Err(Error::Input("positive answer is not terminated".into()));
        }
        if let Some(b) = &self.y_bad {
            b.validate(vocab_size)?;
            if !b.is_terminated() {
                return Err(Error::Input("bad answer is not terminated".into()));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    x: Vec<u32>,
    y: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_bad: Option<Vec<u32>>,
}

impl From<&Example> for ExampleRecord {
    fn from(e: &Example) -> Self {
        ExampleRecord {
            x: e.x.ids().to_vec(),
            y: e.y.ids().to_vec(),
            y_bad: e.y_bad.as_ref().map(|b| b.ids().to_vec()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    name: String,
    vocab: Vec<String>,
    train: Vec<ExampleRecord>,
    test: Vec<ExampleRecord>,
}

/// Vocabulary plus train/test splits. Stored as one JSON document.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub name: String,
    pub vocab: Vocab,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskData {
    pub fn validate(&self) -> Result<()> {
        let k = self.vocab.size();
        for e in self.train.iter().chain(&self.test) {
            e.validate(k)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = TaskRecord {
            name: self.name.clone(),
            vocab: self.vocab.names().to_vec(),
            train: self.train.iter().map(Into::into).collect(),
            test: self.test.iter().map(Into::into).collect(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: TaskRecord = serde_json::from_str(s)?;
        let conv = |r: ExampleRecord| Example::new(r.x, r.y, r.y_bad);
        let task = TaskData {
            name: rec.name,
            vocab: Vocab::new(rec.vocab)?,
            train: rec.train.into_iter().map(conv).collect(),
            test: rec.test.into_iter().map(conv).collect(),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }
}
