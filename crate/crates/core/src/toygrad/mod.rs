//! Small tanh networks with hand-written backpropagation, used to produce
//! gradients for importance scores and fine-tuned models for merging runs.

mod data;
mod model;
mod scenario;
mod train;

pub use data::{Example, LocationDataset};
pub use model::{backward, bias_name, forward_loss, weight_name, Affine, Gradients, ToyModel};
pub use scenario::{synth_conflict_scenario, ConflictScenario, Groups, ScenarioConfig};
pub use train::{batch_gradients, eval_accuracy, train_toy};
