//! Per-weight importance maps: SNIP, Wanda, magnitude, random, and maps
//! computed elsewhere and imported from disk.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{validate_shapes, Checkpoint, Dtype, Tensor, TensorData, TensorMeta};
use crate::error::{Error, Result};
use crate::toygrad::{bias_name, weight_name, LocationDataset, ToyModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Snip,
    Wanda,
    Magnitude,
    Random,
    Imported,
}

impl ScoreMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMethod::Snip => "snip",
            ScoreMethod::Wanda => "wanda",
            ScoreMethod::Magnitude => "magnitude",
            ScoreMethod::Random => "random",
            ScoreMethod::Imported => "imported",
        }
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snip" => Ok(ScoreMethod::Snip),
            "wanda" => Ok(ScoreMethod::Wanda),
            "magnitude" => Ok(ScoreMethod::Magnitude),
            "random" => Ok(ScoreMethod::Random),
            "imported" => Ok(ScoreMethod::Imported),
            other => Err(Error::Config(format!("unknown score method `{other}`"))),
        }
    }
}

const META_METHOD: &str = "method";
const META_DATASET: &str = "dataset_name";
const META_EXAMPLES: &str = "examples_count";

/// Non-negative, finite scores aligned to a reference manifest.
///
/// Scores are held as a checkpoint so imported maps stay on disk and are
/// read one tensor at a time.
#[derive(Clone, Debug)]
pub struct ImportanceMap {
    scores: Checkpoint,
    method: ScoreMethod,
    dataset_name: String,
    examples_count: usize,
    /// Imported maps hold raw file values; absolute values are taken on read.
    take_abs: bool,
    negatives_normalized: usize,
}

impl ImportanceMap {
    /// Wraps precomputed score tensors. Fails on negative or non-finite
    /// entries.
    pub fn from_tensors(
        tensors: Vec<Tensor>,
        method: ScoreMethod,
        dataset_name: impl Into<String>,
        examples_count: usize,
    ) -> Result<Self> {
        for t in &tensors {
            check_scores(&t.name, &t.data, false)?;
        }
        Ok(Self {
            scores: Checkpoint::from_tensors(tensors)?,
            method,
            dataset_name: dataset_name.into(),
            examples_count,
            take_abs: false,
            negatives_normalized: 0,
        })
    }

    pub fn manifest(&self) -> &[TensorMeta] {
        self.scores.manifest()
    }

    pub fn method(&self) -> ScoreMethod {
        self.method
    }

    pub fn dataset_name(&self) -> &str {
        &self.dataset_name
    }

    pub fn examples_count(&self) -> usize {
        self.examples_count
    }

    /// Negative entries turned positive on import.
    pub fn negatives_normalized(&self) -> usize {
        self.negatives_normalized
    }

    pub fn numel(&self) -> usize {
        self.scores.numel()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.scores.position(name)
    }

    pub fn scores_at(&self, i: usize) -> Result<TensorData> {
        let data = self.scores.values_at(i)?;
        Ok(if self.take_abs { abs(data) } else { data })
    }

    pub fn scores(&self, name: &str) -> Result<TensorData> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::compat(name, "no scores for tensor"))?;
        self.scores_at(i)
    }

    /// Checks the map covers exactly the reference's names and shapes.
    pub fn check_aligned(&self, reference: &Checkpoint) -> Result<()> {
        validate_shapes(reference.manifest(), self.manifest())
    }

    /// Persists the map in the checkpoint format with `method`,
    /// `dataset_name` and `examples_count` metadata.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let metadata = BTreeMap::from([
            (META_METHOD.to_string(), self.method.to_string()),
            (META_DATASET.to_string(), self.dataset_name.clone()),
            (META_EXAMPLES.to_string(), self.examples_count.to_string()),
        ]);
        let scores = if self.take_abs {
            Checkpoint::from_tensors(
                (0..self.scores.len())
                    .map(|i| {
                        let mut t = self.scores.tensor_at(i)?;
                        t.data = abs(t.data);
                        Ok(t)
                    })
                    .collect::<Result<Vec<_>>>()?,
            )?
        } else {
            self.scores.clone()
        };
        scores.with_metadata(metadata).save(path)
    }
}

fn abs(data: TensorData) -> TensorData {
    match data {
        TensorData::F32(v) => TensorData::F32(v.into_iter().map(f32::abs).collect()),
        TensorData::F64(v) => TensorData::F64(v.into_iter().map(f64::abs).collect()),
    }
}

/// Returns the number of negative entries; errors on NaN or infinities, and
/// on negatives unless `allow_negative`.
fn check_scores(name: &str, data: &TensorData, allow_negative: bool) -> Result<usize> {
    let mut negatives = 0;
    for i in 0..data.len() {
        let v = data.get(i);
        if !v.is_finite() {
            return Err(Error::Numerics(format!("score {i} of `{name}` is {v}")));
        }
        if v < 0.0 {
            if !allow_negative {
                return Err(Error::Numerics(format!("score {i} of `{name}` is negative")));
            }
            negatives += 1;
        }
    }
    Ok(negatives)
}

fn model_tensors(model: &ToyModel, values: impl Fn(usize, bool) -> Vec<f64>) -> Result<Vec<Tensor>> {
    let mut tensors = Vec::with_capacity(model.layers().len() * 2);
    for (k, layer) in model.layers().iter().enumerate() {
        tensors.push(Tensor::f64(weight_name(k), vec![layer.outputs, layer.inputs], values(k, true))?);
        tensors.push(Tensor::f64(bias_name(k), vec![layer.outputs], values(k, false))?);
    }
    Ok(tensors)
}

/// SNIP saliency: for every parameter, the mean over examples of
/// `|theta * dL/dtheta|`, with one backward pass per example.
pub fn snip_scores(model: &ToyModel, data: &LocationDataset) -> Result<ImportanceMap> {
    snip_scores_capped(model, data, None)
}

/// [`snip_scores`] over at most the first `max_examples` examples.
pub fn snip_scores_capped(
    model: &ToyModel,
    data: &LocationDataset,
    max_examples: Option<usize>,
) -> Result<ImportanceMap> {
    let examples = match max_examples {
        Some(cap) => &data.examples()[..cap.clamp(1, data.len())],
        None => data.examples(),
    };
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sums: Vec<(Vec<f64>, Vec<f64>)> = model
        .layers()
        .iter()
        .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
        .collect();
    for (e, ex) in examples.iter().enumerate() {
        let grads = model.gradients(ex)?;
        for ((layer, g), (sw, sb)) in model.layers().iter().zip(&grads.layers).zip(&mut sums) {
            for ((s, w), d) in sw.iter_mut().zip(&layer.weight).zip(&g.weight) {
                *s += (w * d).abs();
            }
            for ((s, b), d) in sb.iter_mut().zip(&layer.bias).zip(&g.bias) {
                *s += (b * d).abs();
            }
        }
        if sums.iter().any(|(w, b)| w.iter().chain(b).any(|v| !v.is_finite())) {
            return Err(Error::Numerics(format!("gradient of example {e}")));
        }
    }
    let n = examples.len() as f64;
    let tensors = model_tensors(model, |k, is_weight| {
        let src = if is_weight { &sums[k].0 } else { &sums[k].1 };
        src.iter().map(|s| s / n).collect()
    })?;
    ImportanceMap::from_tensors(tensors, ScoreMethod::Snip, data.name(), examples.len())
}

/// Wanda saliency: `|W[j,k]| * ||a_k||_2`, where `a_k` collects input
/// feature `k` of the layer over every example. Biases score `|b|`.
pub fn wanda_scores(model: &ToyModel, data: &LocationDataset) -> Result<ImportanceMap> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sq: Vec<Vec<f64>> = model.layers().iter().map(|l| vec![0.0; l.inputs]).collect();
    for ex in data.examples() {
        for (acc, input) in sq.iter_mut().zip(model.layer_inputs(&ex.x)?) {
            acc.iter_mut().zip(&input).for_each(|(s, a)| *s += a * a);
        }
    }
    let norms: Vec<Vec<f64>> = sq.into_iter().map(|v| v.into_iter().map(f64::sqrt).collect()).collect();
    if norms.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("activation norms".into()));
    }
    let tensors = model_tensors(model, |k, is_weight| {
        let layer = &model.layers()[k];
        if is_weight {
            layer
                .weight
                .iter()
                .enumerate()
                .map(|(i, w)| w.abs() * norms[k][i % layer.inputs])
                .collect()
        } else {
            layer.bias.iter().map(|b| b.abs()).collect()
        }
    })?;
    ImportanceMap::from_tensors(tensors, ScoreMethod::Wanda, data.name(), data.len())
}

fn score_dtype(dtype: Dtype) -> Dtype {
    if dtype.accumulates_in_f64() {
        Dtype::F64
    } else {
        Dtype::F32
    }
}

/// `|value|` for every parameter.
pub fn magnitude_scores(params: &Checkpoint) -> Result<ImportanceMap> {
    let tensors = params
        .tensors()
        .map(|t| {
            let t = t?;
            Tensor::new(t.name, t.shape, score_dtype(t.dtype), abs(t.data))
        })
        .collect::<Result<Vec<_>>>()?;
    for t in &tensors {
        check_scores(&t.name, &t.data, false)?;
    }
    ImportanceMap::from_tensors(tensors, ScoreMethod::Magnitude, "", 0)
}

/// I.i.d. uniform `[0, 1)` scores. Tensor `i` of the manifest draws from
/// stream `i` of a ChaCha generator keyed by `seed`.
pub fn random_scores(reference: &Checkpoint, seed: u64) -> Result<ImportanceMap> {
    let tensors = reference
        .manifest()
        .iter()
        .enumerate()
        .map(|(i, meta)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let n = meta.numel();
            let data = if meta.dtype.accumulates_in_f64() {
                TensorData::F64((0..n).map(|_| rng.gen::<f64>()).collect())
            } else {
                TensorData::F32((0..n).map(|_| rng.gen::<f32>()).collect())
            };
            Tensor::new(meta.name.clone(), meta.shape.clone(), score_dtype(meta.dtype), data)
        })
        .collect::<Result<Vec<_>>>()?;
    ImportanceMap::from_tensors(tensors, ScoreMethod::Random, "", 0)
}

/// Opens a score map written in the checkpoint format. The file is scanned
/// once: NaN or infinite entries are rejected, negative entries counted
/// (they are read back as absolute values). Tensors stay on disk.
pub fn import_scores(path: impl AsRef<Path>, reference: &Checkpoint) -> Result<ImportanceMap> {
    let path = path.as_ref();
    let scores = Checkpoint::load(path)?;
    validate_shapes(reference.manifest(), scores.manifest())?;
    let mut negatives = 0;
    for i in 0..scores.len() {
        negatives += check_scores(&scores.manifest()[i].name, &scores.values_at(i)?, true)?;
    }
    if negatives > 0 {
        log::warn!(
            "{}: {negatives} negative scores replaced by their absolute value",
            path.display()
        );
    }
    let metadata = scores.metadata();
    let dataset_name = metadata.get(META_DATASET).cloned().unwrap_or_default();
    let examples_count = metadata
        .get(META_EXAMPLES)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    Ok(ImportanceMap {
        scores,
        method: ScoreMethod::Imported,
        dataset_name,
        examples_count,
        take_abs: true,
        negatives_normalized: negatives,
    })
}
