use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled input vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

impl Example {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Self { x, y }
    }
}

/// The examples importance scores are measured on. Never empty, and every
/// input has the same width.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationDataset {
    name: String,
    examples: Vec<Example>,
}

impl LocationDataset {
    pub fn new(name: impl Into<String>, examples: Vec<Example>) -> Result<Self> {
        let Some(first) = examples.first() else {
            return Err(Error::EmptyDataset);
        };
        let dim = first.x.len();
        if let Some((i, ex)) = examples.iter().enumerate().find(|(_, e)| e.x.len() != dim) {
            return Err(Error::Shape(format!(
                "example {i} has {} features, example 0 has {dim}",
                ex.x.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            examples,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.examples[0].x.len()
    }

    /// First `n` examples (at least one is always kept).
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            name: self.name.clone(),
            examples: self.examples[..n.clamp(1, self.len())].to_vec(),
        }
    }

    /// Concatenation of two datasets under a new name.
    pub fn concat(&self, other: &LocationDataset, name: impl Into<String>) -> Result<Self> {
        let mut examples = self.examples.clone();
        examples.extend_from_slice(&other.examples);
        Self::new(name, examples)
    }

    /// Splits off the last `fraction` of the examples (rounded down, at least
    /// one example left on each side).
    pub fn split(&self, fraction: f64) -> Result<(Self, Self)> {
        let held = ((self.len() as f64) * fraction).floor() as usize;
        if held == 0 || held >= self.len() {
            return Err(Error::Config(format!(
                "cannot hold out {fraction} of {} examples",
                self.len()
            )));
        }
        let cut = self.len() - held;
        Ok((
            Self::new(format!("{}-train", self.name), self.examples[..cut].to_vec())?,
            Self::new(format!("{}-heldout", self.name), self.examples[cut..].to_vec())?,
        ))
    }

    /// Reads line-delimited `{"x": [...], "y": k}` records. The dataset
    /// is named after the file stem.
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut examples = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Example = serde_json::from_str(&line).map_err(|e| {
                Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            examples.push(ex);
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(name, examples)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for ex in &self.examples {
            let line = serde_json::to_string(ex).expect("examples serialize");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}
