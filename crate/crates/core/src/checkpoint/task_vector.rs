use super::{validate_compat, Checkpoint, Tensor, TensorData, TensorMeta};
use crate::error::Result;

/// Per-tensor deltas `fine - base`, aligned to the base manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    manifest: Vec<TensorMeta>,
    deltas: Vec<TensorData>,
}

impl TaskVector {
    pub fn manifest(&self) -> &[TensorMeta] {
        &self.manifest
    }

    pub fn deltas(&self) -> &[TensorData] {
        &self.deltas
    }

    pub fn delta(&self, name: &str) -> Option<&TensorData> {
        self.manifest
            .iter()
            .position(|m| m.name == name)
            .map(|i| &self.deltas[i])
    }

    pub fn is_zero(&self) -> bool {
        self.deltas
            .iter()
            .all(|d| d.to_f64_vec().iter().all(|&x| x == 0.0))
    }

    /// Stores the deltas as a checkpoint with the base manifest's dtypes.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_tensors(self.manifest.iter().zip(&self.deltas).map(|(m, d)| Tensor {
            name: m.name.clone(),
            shape: m.shape.clone(),
            dtype: m.dtype,
            data: d.clone(),
        }))
    }
}

/// Element-wise difference in the shared accumulation precision.
pub(crate) fn delta_of(fine: &TensorData, base: &TensorData) -> TensorData {
    match (fine, base) {
        (TensorData::F32(f), TensorData::F32(b)) => {
            TensorData::F32(f.iter().zip(b).map(|(x, y)| x - y).collect())
        }
        (TensorData::F64(f), TensorData::F64(b)) => {
            TensorData::F64(f.iter().zip(b).map(|(x, y)| x - y).collect())
        }
        (f, b) => {
            let (f, b) = (f.to_f64_vec(), b.to_f64_vec());
            TensorData::F32(f.iter().zip(&b).map(|(x, y)| (x - y) as f32).collect())
        }
    }
}

/// `tau = fine - base`, tensor by tensor. Only one tensor of each input
/// is materialized at a time.
pub fn task_vector(fine: &Checkpoint, base: &Checkpoint) -> Result<TaskVector> {
    validate_compat(fine, base)?;
    let mut deltas = Vec::with_capacity(base.len());
    for (i, meta) in base.manifest().iter().enumerate() {
        let b = base.values_at(i)?;
        let f = fine.values(&meta.name)?;
        deltas.push(delta_of(&f, &b));
    }
    Ok(TaskVector {
        manifest: base.manifest().to_vec(),
        deltas,
    })
}
