use serde::{Deserialize, Serialize};

use super::select::{check_ratio, Granularity};
use crate::error::{Error, Result};
use crate::scoring::ScoreMethod;

/// How the base-model and fine-tuned-model selections combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElectionMode {
    /// Keep neurons important in both models (`11`).
    #[default]
    #[serde(rename = "both", alias = "11")]
    Both,
    /// Keep neurons important in the base model only (`10`).
    #[serde(rename = "base_only", alias = "10")]
    BaseOnly,
    /// Keep neurons important in the fine-tuned model only (`01`).
    #[serde(rename = "fine_only", alias = "01")]
    FineOnly,
}

impl ElectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ElectionMode::Both => "both",
            ElectionMode::BaseOnly => "base_only",
            ElectionMode::FineOnly => "fine_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" | "11" => Ok(ElectionMode::Both),
            "base_only" | "10" => Ok(ElectionMode::BaseOnly),
            "fine_only" | "01" => Ok(ElectionMode::FineOnly),
            other => Err(Error::Config(format!("unknown election mode `{other}`"))),
        }
    }
}

/// Per-task merge parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Mask ratio `r` in (0, 1].
    pub ratio: f64,
    /// Scaling factor applied to the masked task vector.
    pub lambda: f64,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, ratio: f64, lambda: f64) -> Self {
        Self {
            name: name.into(),
            ratio,
            lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub election: ElectionMode,
    #[serde(default = "default_location")]
    pub location: ScoreMethod,
    #[serde(default)]
    pub granularity: Granularity,
    /// Glob patterns; matching tensors keep their base values.
    #[serde(default)]
    pub exclude: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

fn default_location() -> ScoreMethod {
    ScoreMethod::Snip
}

impl MergeConfig {
    pub fn new(tasks: Vec<TaskSpec>) -> Self {
        Self {
            tasks,
            election: ElectionMode::Both,
            location: ScoreMethod::Snip,
            granularity: Granularity::PerTensor,
            exclude: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        for t in &self.tasks {
            check_ratio(t.ratio).map_err(|e| Error::Config(format!("task `{}`: {e}", t.name)))?;
            if !t.lambda.is_finite() {
                return Err(Error::Config(format!("task `{}`: lambda must be finite", t.name)));
            }
        }
        self.exclusions().map(|_| ())
    }

    pub fn exclusions(&self) -> Result<Exclusions> {
        Exclusions::new(&self.exclude)
    }
}

/// Compiled tensor-name exclusion globs.
#[derive(Clone, Debug, Default)]
pub struct Exclusions(Vec<glob::Pattern>);

impl Exclusions {
    pub fn new(patterns: &[String]) -> Result<Self> {
        patterns
            .iter()
            .map(|p| {
                glob::Pattern::new(p)
                    .map_err(|e| Error::Config(format!("bad exclusion pattern `{p}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Exclusions)
    }

    pub fn matches(&self, name: &str) -> bool {
        self.0.iter().any(|p| p.matches(name))
    }
}
