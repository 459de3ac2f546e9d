use std::cmp::Ordering;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use super::{NeuronSet, SetOrigin, TensorBits};
use crate::checkpoint::{Scalar, TensorData};
use crate::error::{Error, Result};
use crate::scoring::ImportanceMap;

/// Unit over which the top-`r` fraction is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// `floor(r * n)` elements from every tensor of `n` elements.
    #[default]
    PerTensor,
    /// `floor(r * D)` elements across all tensors at once.
    Global,
}

pub(crate) fn check_ratio(r: f64) -> Result<()> {
    if r.is_finite() && r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("ratio must lie in (0, 1], got {r}")))
    }
}

/// `floor(r * n)`. Products within 1e-9 (relative) of an integer snap to
/// it, so decimal ratios such as `0.29 * 100` count as written.
pub fn ratio_count(r: f64, n: usize) -> usize {
    let x = r * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * x.abs().max(1.0) {
        nearest
    } else {
        x.floor()
    };
    (k.max(0.0) as usize).min(n)
}

/// Orders candidates by score descending, then index ascending.
fn rank<T: Scalar>(scores: &[T]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

pub(crate) fn top_k_generic<T: Scalar>(scores: &[T], k: usize) -> FixedBitSet {
    let n = scores.len();
    let mut bits = FixedBitSet::with_capacity(n);
    if k >= n {
        bits.insert_range(..);
        return bits;
    }
    if k == 0 {
        return bits;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.select_nth_unstable_by(k - 1, rank(scores));
    for &i in &idx[..k] {
        bits.insert(i);
    }
    bits
}

/// The `k` highest-scoring indices, ties broken toward lower indices.
pub fn top_k_bits(scores: &TensorData, k: usize) -> FixedBitSet {
    match scores {
        TensorData::F32(v) => top_k_generic(v, k),
        TensorData::F64(v) => top_k_generic(v, k),
    }
}

/// Global top-`k` over several score arrays treated as one concatenated
/// vector. Returns one bitset per input.
pub(crate) fn global_top_k(parts: &[TensorData], k: usize) -> Vec<FixedBitSet> {
    let flat: Vec<f64> = parts.iter().flat_map(TensorData::to_f64_vec).collect();
    let chosen = top_k_generic(&flat, k);
    let mut offset = 0;
    parts
        .iter()
        .map(|p| {
            let mut bits = FixedBitSet::with_capacity(p.len());
            for i in 0..p.len() {
                if chosen.contains(offset + i) {
                    bits.insert(i);
                }
            }
            offset += p.len();
            bits
        })
        .collect()
}

/// Top-`r` selection over an importance map.
pub fn top_r_select(map: &ImportanceMap, r: f64, granularity: Granularity) -> Result<NeuronSet> {
    check_ratio(r)?;
    let tensors = match granularity {
        Granularity::PerTensor => map
            .manifest()
            .iter()
            .enumerate()
            .map(|(i, meta)| {
                let scores = map.scores_at(i)?;
                let k = ratio_count(r, scores.len());
                Ok(TensorBits::new(&meta.name, top_k_bits(&scores, k)))
            })
            .collect::<Result<Vec<_>>>()?,
        Granularity::Global => {
            let parts = (0..map.manifest().len())
                .map(|i| map.scores_at(i))
                .collect::<Result<Vec<_>>>()?;
            let k = ratio_count(r, map.numel());
            map.manifest()
                .iter()
                .zip(global_top_k(&parts, k))
                .map(|(meta, bits)| TensorBits::new(&meta.name, bits))
                .collect()
        }
    };
    Ok(NeuronSet::new(tensors, r, SetOrigin::Fine))
}
