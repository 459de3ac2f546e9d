//! Location, election, disjoint and merge stages.

mod config;
mod pipeline;
mod select;
mod sets;

pub use config::{ElectionMode, Exclusions, MergeConfig, TaskSpec};
pub use pipeline::{
    build_mask, disjoint, elect, led_merge, led_merge_to_file, led_sets, merge, LedSets, Merged,
};
pub(crate) use pipeline::ensure_finite;
pub(crate) use select::top_k_generic;
pub use select::{ratio_count, top_k_bits, top_r_select, Granularity};
pub use sets::{MergeMask, NeuronSet, SetOrigin, TensorBits};
