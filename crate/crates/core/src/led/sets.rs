use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which stage produced a [`NeuronSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetOrigin {
    Base,
    Fine,
    Elected,
    Disjoint,
}

/// Bitset over the flattened elements of one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorBits {
    pub name: String,
    pub bits: FixedBitSet,
}

impl TensorBits {
    pub fn new(name: impl Into<String>, bits: FixedBitSet) -> Self {
        Self {
            name: name.into(),
            bits,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones(..)
    }
}

pub(crate) fn check_aligned(a: &[TensorBits], b: &[TensorBits]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::compat(
            "*",
            format!("{} tensors vs {}", a.len(), b.len()),
        ));
    }
    for (x, y) in a.iter().zip(b) {
        if x.name != y.name {
            return Err(Error::compat(&x.name, format!("aligned against `{}`", y.name)));
        }
        if x.len() != y.len() {
            return Err(Error::compat(
                &x.name,
                format!("{} elements vs {}", x.len(), y.len()),
            ));
        }
    }
    Ok(())
}

fn from_indices(layout: &[(&str, usize)], indices: &[Vec<usize>]) -> Result<Vec<TensorBits>> {
    if layout.len() != indices.len() {
        return Err(Error::Shape("one index list per tensor expected".into()));
    }
    layout
        .iter()
        .zip(indices)
        .map(|(&(name, n), idx)| {
            let mut bits = FixedBitSet::with_capacity(n);
            for &i in idx {
                if i >= n {
                    return Err(Error::Shape(format!("index {i} out of range for `{name}` ({n})")));
                }
                bits.insert(i);
            }
            Ok(TensorBits::new(name, bits))
        })
        .collect()
}

fn flat_indices(tensors: &[TensorBits]) -> Vec<usize> {
    let mut offset = 0;
    let mut out = Vec::new();
    for t in tensors {
        out.extend(t.bits.ones().map(|i| offset + i));
        offset += t.len();
    }
    out
}

/// Per-tensor selection of weight elements ("neurons"), aligned to a
/// manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronSet {
    tensors: Vec<TensorBits>,
    ratio: f64,
    origin: SetOrigin,
}

impl NeuronSet {
    pub fn new(tensors: Vec<TensorBits>, ratio: f64, origin: SetOrigin) -> Self {
        Self {
            tensors,
            ratio,
            origin,
        }
    }

    /// Builds a set from per-tensor index lists over `(name, numel)` pairs.
    pub fn from_indices(
        layout: &[(&str, usize)],
        indices: &[Vec<usize>],
        ratio: f64,
        origin: SetOrigin,
    ) -> Result<Self> {
        Ok(Self::new(from_indices(layout, indices)?, ratio, origin))
    }

    pub fn tensors(&self) -> &[TensorBits] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&TensorBits> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn origin(&self) -> SetOrigin {
        self.origin
    }

    /// Number of selected elements across all tensors.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(TensorBits::count).sum()
    }

    /// Total element count `D` of the underlying manifest.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(TensorBits::len).sum()
    }

    /// Selected indices in the flattened parameter vector (tensors
    /// concatenated in manifest order).
    pub fn flat_indices(&self) -> Vec<usize> {
        flat_indices(&self.tensors)
    }

    pub fn check_aligned(&self, other: &NeuronSet) -> Result<()> {
        check_aligned(&self.tensors, &other.tensors)
    }
}

/// Binary merge mask over the flattened parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeMask {
    tensors: Vec<TensorBits>,
}

impl MergeMask {
    pub fn new(tensors: Vec<TensorBits>) -> Self {
        Self { tensors }
    }

    pub fn from_indices(layout: &[(&str, usize)], indices: &[Vec<usize>]) -> Result<Self> {
        Ok(Self::new(from_indices(layout, indices)?))
    }

    pub fn tensors(&self) -> &[TensorBits] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&TensorBits> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(TensorBits::count).sum()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(TensorBits::len).sum()
    }

    pub fn flat_indices(&self) -> Vec<usize> {
        flat_indices(&self.tensors)
    }

    pub fn check_aligned(&self, other: &MergeMask) -> Result<()> {
        check_aligned(&self.tensors, &other.tensors)
    }
}
