//! Overlap diagnostics: Jaccard indices between importance selections,
//! pairwise mask overlaps and Pareto reporting over parameter sweeps.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use fixedbitset::FixedBitSet;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::led::{top_r_select, Granularity, MergeMask, NeuronSet, TensorBits};
use crate::scoring::ImportanceMap;

/// Ratio used for layer-wise overlap when none is given.
pub const DEFAULT_JACCARD_RATIO: f64 = 0.2;

/// `|a & b| / |a | b|`; zero when both sets are empty.
pub fn jaccard_bits(a: &FixedBitSet, b: &FixedBitSet) -> f64 {
    let inter = a.intersection_count(b);
    let union = a.union_count(b);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Jaccard index of two aligned selections over all their tensors.
pub fn jaccard(a: &NeuronSet, b: &NeuronSet) -> Result<f64> {
    a.check_aligned(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        inter += x.bits.intersection_count(&y.bits);
        union += x.bits.union_count(&y.bits);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Attention,
    Mlp,
    Other,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Attention => "attention",
            LayerKind::Mlp => "mlp",
            LayerKind::Other => "other",
        }
    }
}

/// Classifies tensor names into layer kinds. Attention wins when both
/// patterns match.
#[derive(Clone, Debug)]
pub struct LayerTagger {
    attention: Regex,
    mlp: Regex,
}

pub const DEFAULT_ATTENTION_PATTERN: &str = r"(?i)(attn|attention|q_proj|k_proj|v_proj|o_proj|query|key|value)";
pub const DEFAULT_MLP_PATTERN: &str =
    r"(?i)(mlp|ffn|feed_forward|gate_proj|up_proj|down_proj|fc\d|dense_h_to_4h|dense_4h_to_h)";

impl Default for LayerTagger {
    fn default() -> Self {
        Self::new(DEFAULT_ATTENTION_PATTERN, DEFAULT_MLP_PATTERN).expect("default patterns compile")
    }
}

impl LayerTagger {
    pub fn new(attention: &str, mlp: &str) -> Result<Self> {
        let compile = |p: &str| Regex::new(p).map_err(|e| Error::Config(format!("bad layer pattern `{p}`: {e}")));
        Ok(Self {
            attention: compile(attention)?,
            mlp: compile(mlp)?,
        })
    }

    pub fn tag(&self, name: &str) -> LayerKind {
        if self.attention.is_match(name) {
            LayerKind::Attention
        } else if self.mlp.is_match(name) {
            LayerKind::Mlp
        } else {
            LayerKind::Other
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardRow {
    pub tensor: String,
    pub kind: LayerKind,
    pub jaccard: f64,
    pub size_a: usize,
    pub size_b: usize,
    pub intersection: usize,
    /// Both selections were empty, so `jaccard` is 0 by convention.
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardReport {
    pub ratio_used: f64,
    pub rows: Vec<JaccardRow>,
}

impl JaccardReport {
    /// Mean index over rows whose selections were not both empty.
    pub fn mean(&self) -> Option<f64> {
        mean(self.rows.iter().filter(|r| !r.empty).map(|r| r.jaccard))
    }

    pub fn mean_by_kind(&self) -> BTreeMap<LayerKind, f64> {
        let mut groups: BTreeMap<LayerKind, Vec<f64>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| !r.empty) {
            groups.entry(r.kind).or_default().push(r.jaccard);
        }
        groups
            .into_iter()
            .filter_map(|(k, v)| mean(v.into_iter()).map(|m| (k, m)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let header = ["tensor", "kind", "jaccard", "|A|", "|B|", "|A&B|", "note"];
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.tensor.clone(),
                    r.kind.as_str().to_string(),
                    format!("{:.4}", r.jaccard),
                    r.size_a.to_string(),
                    r.size_b.to_string(),
                    r.intersection.to_string(),
                    if r.empty { "empty".into() } else { String::new() },
                ]
            })
            .collect();
        let mut out = format!("ratio {}\n", self.ratio_used);
        out.push_str(&aligned(&header.map(String::from), &body));
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["tensor", "kind", "jaccard", "size_a", "size_b", "intersection", "empty"])
            .map_err(fail)?;
        for r in &self.rows {
            w.write_record([
                r.tensor.clone(),
                r.kind.as_str().to_string(),
                r.jaccard.to_string(),
                r.size_a.to_string(),
                r.size_b.to_string(),
                r.intersection.to_string(),
                r.empty.to_string(),
            ])
            .map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Left-aligned columns separated by two spaces.
fn aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// Per-tensor Jaccard rows for two aligned selections.
pub fn jaccard_rows(a: &NeuronSet, b: &NeuronSet, tagger: &LayerTagger) -> Result<Vec<JaccardRow>> {
    a.check_aligned(b)?;
    Ok(a.tensors()
        .iter()
        .zip(b.tensors())
        .map(|(x, y)| row(x, y, tagger))
        .collect())
}

fn row(x: &TensorBits, y: &TensorBits, tagger: &LayerTagger) -> JaccardRow {
    let (size_a, size_b) = (x.count(), y.count());
    JaccardRow {
        tensor: x.name.clone(),
        kind: tagger.tag(&x.name),
        jaccard: jaccard_bits(&x.bits, &y.bits),
        size_a,
        size_b,
        intersection: x.bits.intersection_count(&y.bits),
        empty: size_a == 0 && size_b == 0,
    }
}

/// Top-`ratio` selection of each map per tensor, compared tensor by tensor.
pub fn layerwise_jaccard(map_a: &ImportanceMap, map_b: &ImportanceMap, ratio: f64) -> Result<JaccardReport> {
    layerwise_jaccard_with(map_a, map_b, ratio, &LayerTagger::default())
}

pub fn layerwise_jaccard_with(
    map_a: &ImportanceMap,
    map_b: &ImportanceMap,
    ratio: f64,
    tagger: &LayerTagger,
) -> Result<JaccardReport> {
    let a = top_r_select(map_a, ratio, Granularity::PerTensor)?;
    let b = top_r_select(map_b, ratio, Granularity::PerTensor)?;
    Ok(JaccardReport {
        ratio_used: ratio,
        rows: jaccard_rows(&a, &b, tagger)?,
    })
}

/// `K x K` matrix with entry `(i, j) = |m_i & m_j|`.
pub fn mask_overlap_matrix(masks: &[MergeMask]) -> Result<Vec<Vec<usize>>> {
    if let Some(first) = masks.first() {
        for m in &masks[1..] {
            first.check_aligned(m)?;
        }
    }
    Ok(masks
        .iter()
        .map(|a| {
            masks
                .iter()
                .map(|b| {
                    a.tensors()
                        .iter()
                        .zip(b.tensors())
                        .map(|(x, y)| x.bits.intersection_count(&y.bits))
                        .sum()
                })
                .collect()
        })
        .collect())
}

/// For each set and tensor, how many of its indices no other set holds.
/// Counted index by index, independently of the merge pipeline's bitset
/// arithmetic.
pub fn exclusive_counts(sets: &[NeuronSet]) -> Result<Vec<Vec<(String, usize)>>> {
    if let Some(first) = sets.first() {
        for s in &sets[1..] {
            first.check_aligned(s)?;
        }
    }
    let mut out = vec![Vec::new(); sets.len()];
    let Some(first) = sets.first() else {
        return Ok(out);
    };
    for (t, meta) in first.tensors().iter().enumerate() {
        let mut holders = vec![0u32; meta.len()];
        for s in sets {
            for i in s.tensors()[t].bits.ones() {
                holders[i] += 1;
            }
        }
        for (k, s) in sets.iter().enumerate() {
            let n = s.tensors()[t].bits.ones().filter(|&i| holders[i] == 1).count();
            out[k].push((meta.name.clone(), n));
        }
    }
    Ok(out)
}

/// One evaluated point of a parameter sweep. Every metric is treated as
/// higher-is-better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub config: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
    /// No other row is at least as good on every metric and better on one.
    pub pareto: bool,
}

/// A sweep point that could not be evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub config: BTreeMap<String, f64>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<GridFailure>,
}

fn cmp_config(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Ordering {
    let mut x = a.iter();
    let mut y = b.iter();
    loop {
        match (x.next(), y.next()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some((ka, va)), Some((kb, vb))) => {
                let o = ka.cmp(kb).then(va.total_cmp(vb));
                if o != Ordering::Equal {
                    return o;
                }
            }
        }
    }
}

/// `a` dominates `b`: no worse on every metric of `b`, strictly better on
/// at least one. A metric missing from `a` counts as worse.
pub fn dominates(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> bool {
    let mut strictly = false;
    for (name, &vb) in b {
        let Some(&va) = a.get(name) else {
            return false;
        };
        if va < vb || va.is_nan() {
            return false;
        }
        if va > vb {
            strictly = true;
        }
    }
    strictly
}

/// Rows sorted by configuration with a Pareto-front flag on each.
pub fn grid_report(results: Vec<GridResult>) -> GridReport {
    let mut rows: Vec<GridRow> = results
        .iter()
        .map(|r| GridRow {
            config: r.config.clone(),
            metrics: r.metrics.clone(),
            pareto: !results.iter().any(|o| dominates(&o.metrics, &r.metrics)),
        })
        .collect();
    rows.sort_by(|a, b| cmp_config(&a.config, &b.config));
    GridReport {
        rows,
        failures: Vec::new(),
    }
}

/// [`grid_report`] over the successful points, with failed points listed
/// separately in configuration order.
pub fn grid_report_with_failures(results: Vec<GridResult>, mut failures: Vec<GridFailure>) -> GridReport {
    failures.sort_by(|a, b| cmp_config(&a.config, &b.config));
    GridReport {
        failures,
        ..grid_report(results)
    }
}

impl GridReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn columns(&self) -> (Vec<String>, Vec<String>) {
        let mut config: Vec<String> = Vec::new();
        let mut metrics: Vec<String> = Vec::new();
        for r in &self.rows {
            for k in r.config.keys() {
                if !config.contains(k) {
                    config.push(k.clone());
                }
            }
            for k in r.metrics.keys() {
                if !metrics.contains(k) {
                    metrics.push(k.clone());
                }
            }
        }
        (config, metrics)
    }

    fn cells(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let (config, metrics) = self.columns();
        let header: Vec<String> = config
            .iter()
            .chain(&metrics)
            .cloned()
            .chain(std::iter::once("pareto".to_string()))
            .collect();
        let body = self
            .rows
            .iter()
            .map(|r| {
                let get = |m: &BTreeMap<String, f64>, k: &String| m.get(k).map_or(String::new(), |v| v.to_string());
                config
                    .iter()
                    .map(|k| get(&r.config, k))
                    .chain(metrics.iter().map(|k| get(&r.metrics, k)))
                    .chain(std::iter::once(r.pareto.to_string()))
                    .collect()
            })
            .collect();
        (header, body)
    }

    pub fn to_csv(&self) -> Result<String> {
        let (header, body) = self.cells();
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&header).map_err(fail)?;
        for row in &body {
            w.write_record(row).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let (header, body) = self.cells();
        aligned(&header, &body)
    }
}
