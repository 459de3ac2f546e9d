//! Structured summary emitted by every merge method.

use serde::{Deserialize, Serialize};

/// Counts for one tensor (or a task total). Fields a method does not
/// produce are `None` and serialize as `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub numel: usize,
    pub selected_fine: Option<usize>,
    pub selected_base: Option<usize>,
    pub elected: Option<usize>,
    pub disjoint: Option<usize>,
    /// Fraction of this task's delta elements that reach the merged model.
    pub mask_density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub tensor: String,
    pub excluded: bool,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub name: String,
    pub ratio: Option<f64>,
    pub lambda: f64,
    pub totals: Counts,
    pub tensors: Vec<TensorReport>,
    #[serde(skip)]
    kept: usize,
}

impl TaskReport {
    pub fn new(name: impl Into<String>, ratio: Option<f64>, lambda: f64) -> Self {
        Self {
            name: name.into(),
            ratio,
            lambda,
            totals: Counts::default(),
            tensors: Vec::new(),
            kept: 0,
        }
    }

    /// Appends a tensor row. `kept` is how many of the tensor's delta
    /// elements reach the merged model; it sets the row's `mask_density`.
    pub fn push(&mut self, tensor: impl Into<String>, excluded: bool, mut counts: Counts, kept: usize) {
        fn add(total: Option<usize>, part: Option<usize>) -> Option<usize> {
            total.zip(part).map(|(a, b)| a + b)
        }
        counts.mask_density = density(kept, counts.numel);
        if self.tensors.is_empty() {
            self.totals = Counts {
                mask_density: 0.0,
                ..counts.clone()
            };
        } else {
            let t = &mut self.totals;
            t.numel += counts.numel;
            t.selected_fine = add(t.selected_fine, counts.selected_fine);
            t.selected_base = add(t.selected_base, counts.selected_base);
            t.elected = add(t.elected, counts.elected);
            t.disjoint = add(t.disjoint, counts.disjoint);
        }
        self.kept += kept;
        self.totals.mask_density = density(self.kept, self.totals.numel);
        self.tensors.push(TensorReport {
            tensor: tensor.into(),
            excluded,
            counts,
        });
    }
}

fn density(kept: usize, numel: usize) -> f64 {
    if numel == 0 {
        0.0
    } else {
        kept as f64 / numel as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub method: String,
    pub note: Option<String>,
    pub election: Option<String>,
    pub location: Option<String>,
    pub granularity: Option<String>,
    pub tasks: Vec<TaskReport>,
}

impl MergeReport {
    pub fn new(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            note: None,
            election: None,
            location: None,
            granularity: None,
            tasks: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
