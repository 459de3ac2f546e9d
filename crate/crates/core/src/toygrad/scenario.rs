use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{train_toy, Affine, Example, LocationDataset, ToyModel};
use crate::error::{Error, Result};

/// Knobs of the two-task interference benchmark.
///
/// Inputs are split into three feature groups: unique to task A, shared,
/// and unique to task B. Hidden units are grouped the same way and the base
/// model wires each hidden group only to its own feature group, so with no
/// overlap the two tasks touch disjoint weights. Both tasks are binary with
/// a label-carrying latent sign `z`; task B reads the shared features with
/// the opposite sign. By default task B leans harder on the shared
/// features than task A does, so averaging the two specialists drags the
/// shared path toward B.
///
/// Hidden biases of the base start at zero: a hidden unit whose inputs are
/// all silent then has zero activation, so the base scores one task's
/// weights at exactly zero on the other task's data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Fraction of each task's features (and hidden units) that is shared.
    pub overlap: f64,
    pub features_per_task: usize,
    pub hidden_per_task: usize,
    pub train_examples: usize,
    pub eval_examples: usize,
    /// Mean magnitude of the latent sign in each task's unique features.
    pub unique_signal: [f64; 2],
    /// Mean magnitude of the latent sign in the shared features, per task.
    pub shared_signal: [f64; 2],
    pub noise: f64,
    /// Standard deviation of the base model's nonzero weights and readout bias.
    pub base_scale: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            overlap: 0.5,
            features_per_task: 16,
            hidden_per_task: 16,
            train_examples: 200,
            eval_examples: 400,
            unique_signal: [1.0, 1.0],
            shared_signal: [1.0, 3.0],
            noise: 1.0,
            base_scale: 0.1,
            epochs: 200,
            lr: 0.5,
        }
    }
}

impl ScenarioConfig {
    pub fn with_overlap(overlap: f64) -> Self {
        Self {
            overlap,
            ..Self::default()
        }
    }

    fn shared_count(&self, per_task: usize) -> usize {
        (self.overlap * per_task as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap must lie in [0, 1], got {}", self.overlap)));
        }
        if self.features_per_task == 0 || self.hidden_per_task == 0 {
            return Err(Error::Config("feature and hidden counts must be positive".into()));
        }
        if self.train_examples == 0 || self.eval_examples == 0 {
            return Err(Error::Config("example counts must be positive".into()));
        }
        Ok(())
    }
}

/// Index ranges of the three groups along one axis: `[A-only, shared,
/// B-only]` laid out contiguously.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Groups {
    pub unique: usize,
    pub shared: usize,
}

impl Groups {
    pub fn total(&self) -> usize {
        2 * self.unique + self.shared
    }

    pub fn task_a(&self) -> std::ops::Range<usize> {
        0..self.unique + self.shared
    }

    pub fn task_b(&self) -> std::ops::Range<usize> {
        self.unique..self.total()
    }

    pub fn shared(&self) -> std::ops::Range<usize> {
        self.unique..self.unique + self.shared
    }

    /// Group id: 0 = A-only, 1 = shared, 2 = B-only.
    fn group(&self, i: usize) -> usize {
        if i < self.unique {
            0
        } else if i < self.unique + self.shared {
            1
        } else {
            2
        }
    }
}

/// Base model plus per-task location (training) and held-out datasets.
#[derive(Clone, Debug)]
pub struct ConflictScenario {
    pub config: ScenarioConfig,
    pub features: Groups,
    pub hidden: Groups,
    pub base: ToyModel,
    pub task_a: LocationDataset,
    pub task_b: LocationDataset,
    pub eval_a: LocationDataset,
    pub eval_b: LocationDataset,
}

impl ConflictScenario {
    pub fn generate(config: ScenarioConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shared_f = config.shared_count(config.features_per_task);
        let shared_h = config.shared_count(config.hidden_per_task);
        let features = Groups {
            unique: config.features_per_task - shared_f,
            shared: shared_f,
        };
        let hidden = Groups {
            unique: config.hidden_per_task - shared_h,
            shared: shared_h,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = block_base(&config, features, hidden, &mut rng)?;
        let directions = [
            random_signs(features.total(), &mut rng),
            random_signs(features.total(), &mut rng),
        ];
        let mut sample = |task: usize, n: usize, name: &str| {
            let examples = (0..n)
                .map(|_| sample_example(&config, features, &directions, task, &mut rng))
                .collect();
            LocationDataset::new(name, examples)
        };
        let task_a = sample(0, config.train_examples, "task_a")?;
        let task_b = sample(1, config.train_examples, "task_b")?;
        let eval_a = sample(0, config.eval_examples, "task_a_eval")?;
        let eval_b = sample(1, config.eval_examples, "task_b_eval")?;
        Ok(Self {
            config,
            features,
            hidden,
            base,
            task_a,
            task_b,
            eval_a,
            eval_b,
        })
    }

    /// Fine-tunes the base separately on each task.
    pub fn specialists(&self, seed: u64) -> Result<(ToyModel, ToyModel)> {
        let c = &self.config;
        Ok((
            train_toy(&self.base, &self.task_a, c.epochs, c.lr, seed)?,
            train_toy(&self.base, &self.task_b, c.epochs, c.lr, seed)?,
        ))
    }
}

fn random_signs(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

fn block_base(
    config: &ScenarioConfig,
    features: Groups,
    hidden: Groups,
    rng: &mut ChaCha8Rng,
) -> Result<ToyModel> {
    let normal = Normal::new(0.0, config.base_scale).map_err(|e| Error::Config(e.to_string()))?;
    let mut input = Affine::zeros(features.total(), hidden.total());
    for j in 0..hidden.total() {
        for k in 0..features.total() {
            if hidden.group(j) == features.group(k) {
                input.weight[j * features.total() + k] = normal.sample(rng);
            }
        }
    }
    let mut readout = Affine::zeros(hidden.total(), 2);
    readout.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
    readout.bias.iter_mut().for_each(|b| *b = normal.sample(rng));
    ToyModel::new(vec![input, readout])
}

fn sample_example(
    config: &ScenarioConfig,
    features: Groups,
    directions: &[Vec<f64>; 2],
    task: usize,
    rng: &mut ChaCha8Rng,
) -> Example {
    let noise = Normal::new(0.0, config.noise).expect("non-negative noise");
    let positive = rng.gen::<bool>();
    let z = if positive { 1.0 } else { -1.0 };
    let mut x = vec![0.0; features.total()];
    let own = if task == 0 { features.task_a() } else { features.task_b() };
    for k in own {
        let shared = features.shared().contains(&k);
        let (signal, sign) = if shared {
            // Task B reads shared features with the opposite polarity.
            (config.shared_signal[task], if task == 0 { 1.0 } else { -1.0 })
        } else {
            (config.unique_signal[task], 1.0)
        };
        let dir = if shared { directions[0][k] } else { directions[task][k] };
        x[k] = sign * dir * z * signal + noise.sample(rng);
    }
    Example::new(x, usize::from(positive))
}

/// Default two-task interference benchmark for `seed`.
pub fn synth_conflict_scenario(seed: u64) -> Result<ConflictScenario> {
    ConflictScenario::generate(ScenarioConfig::default(), seed)
}
