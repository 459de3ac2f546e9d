//! The JSON run file. Every field is optional; command-line flags take
//! precedence over values read here.

use std::path::{Path, PathBuf};

use ledmerge::led::{ElectionMode, Granularity};
use ledmerge::scoring::ScoreMethod;
use serde::Deserialize;

use crate::error::{usage, CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub merge: MergeSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub scenario: ScenarioSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    pub model: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub datasets: Option<Vec<PathBuf>>,
    pub method: Option<ScoreMethod>,
    pub max_examples: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSection {
    pub method: Option<String>,
    pub base: Option<PathBuf>,
    pub fines: Option<Vec<PathBuf>>,
    pub names: Option<Vec<String>>,
    pub fine_scores: Option<Vec<PathBuf>>,
    pub base_scores: Option<Vec<PathBuf>>,
    pub datasets: Option<Vec<PathBuf>>,
    pub location: Option<ScoreMethod>,
    pub ratios: Option<Vec<f64>>,
    pub lambdas: Option<Vec<f64>>,
    pub election: Option<ElectionMode>,
    pub granularity: Option<Granularity>,
    pub exclude: Option<Vec<String>>,
    pub lambda: Option<f64>,
    pub trim_keep_ratio: Option<f64>,
    pub top_mask_ratio: Option<f64>,
    pub keep_ratio: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub map_a: Option<PathBuf>,
    pub map_b: Option<PathBuf>,
    pub ratio: Option<f64>,
    pub attention_pattern: Option<String>,
    pub mlp_pattern: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub base: Option<PathBuf>,
    pub sizes: Option<Vec<usize>>,
    pub dataset: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub model: Option<PathBuf>,
    pub datasets: Option<Vec<PathBuf>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub base: Option<PathBuf>,
    pub fines: Option<Vec<PathBuf>>,
    pub names: Option<Vec<String>>,
    pub datasets: Option<Vec<PathBuf>>,
    pub evals: Option<Vec<PathBuf>>,
    /// One list of candidate ratios per task.
    pub ratios: Option<Vec<Vec<f64>>>,
    /// Candidate lambdas, applied to every task at once.
    pub lambdas: Option<Vec<f64>>,
    pub location: Option<ScoreMethod>,
    pub election: Option<ElectionMode>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub overlap: Option<f64>,
    pub train: Option<bool>,
}

impl RunConfig {
    /// Reads `path`; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingPath(path.to_path_buf()),
            _ => usage(format!("{}: {e}", path.display())),
        })?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(usage(format!(
                "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                path.display(),
                config.schema_version
            )));
        }
        let dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
        config.rebase(&dir);
        Ok(config)
    }

    fn rebase(&mut self, dir: &Path) {
        let one = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        };
        let many = |ps: &mut Option<Vec<PathBuf>>| {
            for p in ps.iter_mut().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        };
        one(&mut self.out_dir);
        one(&mut self.score.model);
        one(&mut self.score.base);
        many(&mut self.score.datasets);
        one(&mut self.merge.base);
        many(&mut self.merge.fines);
        many(&mut self.merge.fine_scores);
        many(&mut self.merge.base_scores);
        many(&mut self.merge.datasets);
        one(&mut self.analyze.map_a);
        one(&mut self.analyze.map_b);
        one(&mut self.train.base);
        one(&mut self.train.dataset);
        one(&mut self.eval.model);
        many(&mut self.eval.datasets);
        one(&mut self.grid.base);
        many(&mut self.grid.fines);
        many(&mut self.grid.datasets);
        many(&mut self.grid.evals);
    }
}

/// Flag value if given, else the file value.
pub fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

/// Repeated flag values if any were given, else the file list.
pub fn pick_list<T>(flag: Vec<T>, file: Option<Vec<T>>) -> Vec<T> {
    if flag.is_empty() {
        file.unwrap_or_default()
    } else {
        flag
    }
}

pub fn require<T>(value: Option<T>, what: &str) -> CliResult<T> {
    value.ok_or_else(|| usage(format!("missing required setting `{what}`")))
}

/// Fails with the first path that does not exist.
pub fn check_paths<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> CliResult<()> {
    for p in paths {
        if !p.exists() {
            return Err(CliError::MissingPath(p.clone()));
        }
    }
    Ok(())
}
