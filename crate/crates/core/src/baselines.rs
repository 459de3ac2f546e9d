//! Reference mergers: task arithmetic, Ties, Breadcrumbs and a uniform
//! average.
//!
//! All of them work tensor by tensor in the base checkpoint's accumulation
//! precision, skip exact-zero updates (so `lambda = 0` returns the base bit
//! for bit) and report through the same [`MergeReport`] schema as LED.

use std::fmt;
use std::str::FromStr;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{task_vector, Checkpoint, Scalar, TaskVector, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::led::{ensure_finite, ratio_count, top_k_generic, Merged};
use crate::report::{Counts, MergeReport, TaskReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    TaskArithmetic,
    Ties,
    Breadcrumbs,
    UniformAverage,
}

impl BaselineMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMethod::TaskArithmetic => "task_arithmetic",
            BaselineMethod::Ties => "ties",
            BaselineMethod::Breadcrumbs => "breadcrumbs",
            BaselineMethod::UniformAverage => "uniform_average",
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task_arithmetic" => Ok(BaselineMethod::TaskArithmetic),
            "ties" => Ok(BaselineMethod::Ties),
            "breadcrumbs" => Ok(BaselineMethod::Breadcrumbs),
            "uniform_average" => Ok(BaselineMethod::UniformAverage),
            other => Err(Error::Config(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub lambda: f64,
    /// Ties: fraction of each task vector kept, by magnitude.
    pub trim_keep_ratio: f64,
    /// Breadcrumbs: fraction of largest-magnitude deltas dropped.
    pub top_mask_ratio: f64,
    /// Breadcrumbs: fraction kept before the outliers are removed; the
    /// smallest `1 - keep_ratio` are dropped.
    pub keep_ratio: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            method: BaselineMethod::TaskArithmetic,
            lambda: 1.0,
            trim_keep_ratio: 0.7,
            top_mask_ratio: 0.01,
            keep_ratio: 0.9,
        }
    }
}

impl BaselineConfig {
    pub fn new(method: BaselineMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        match self.method {
            BaselineMethod::Ties => check_unit("trim_keep_ratio", self.trim_keep_ratio),
            BaselineMethod::Breadcrumbs => check_breadcrumbs(self.top_mask_ratio, self.keep_ratio),
            _ => Ok(()),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda must be finite, got {lambda}")))
    }
}

fn check_unit(what: &str, r: f64) -> Result<()> {
    if r.is_finite() && (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must lie in [0, 1], got {r}")))
    }
}

fn check_breadcrumbs(top: f64, keep: f64) -> Result<()> {
    check_unit("top_mask_ratio", top)?;
    check_unit("keep_ratio", keep)?;
    if top + (1.0 - keep) >= 1.0 {
        return Err(Error::Config(format!(
            "top_mask_ratio {top} and keep_ratio {keep} leave no survivors"
        )));
    }
    Ok(())
}

/// Per-tensor update rule. `out` starts as the base values; the return
/// value holds, per task, how many of its delta elements were applied.
trait Kernel {
    fn apply<T: Scalar>(&self, out: &mut [T], taus: &[&[T]]) -> Vec<usize>;
}

fn dispatch<K: Kernel>(kernel: &K, name: &str, out: &mut TensorData, taus: &[&TensorData]) -> Result<Vec<usize>> {
    let mismatch = || Error::compat(name, "task vector precision differs from base");
    match out {
        TensorData::F32(o) => {
            let t = taus
                .iter()
                .map(|t| match t {
                    TensorData::F32(v) => Ok(v.as_slice()),
                    _ => Err(mismatch()),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(kernel.apply(o, &t))
        }
        TensorData::F64(o) => {
            let t = taus
                .iter()
                .map(|t| match t {
                    TensorData::F64(v) => Ok(v.as_slice()),
                    _ => Err(mismatch()),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(kernel.apply(o, &t))
        }
    }
}

fn add_nonzero<T: Scalar>(x: &mut T, term: T) {
    if term != T::zero() {
        *x = *x + term;
    }
}

fn check_taus(base: &Checkpoint, taus: &[TaskVector]) -> Result<()> {
    if taus.is_empty() {
        return Err(Error::Config("at least one task vector is required".into()));
    }
    for tau in taus {
        if tau.manifest().len() != base.len() {
            return Err(Error::compat("*", "task vector covers a different tensor set"));
        }
        for (a, b) in base.manifest().iter().zip(tau.manifest()) {
            if a.name != b.name || a.shape != b.shape || a.dtype != b.dtype {
                return Err(Error::compat(&a.name, "task vector not aligned to base"));
            }
        }
    }
    Ok(())
}

fn run<K: Kernel>(
    kernel: &K,
    base: &Checkpoint,
    taus: &[TaskVector],
    mut report: MergeReport,
    ratio: Option<f64>,
    lambda: f64,
) -> Result<Merged> {
    check_taus(base, taus)?;
    let mut tasks: Vec<TaskReport> = (0..taus.len())
        .map(|i| TaskReport::new(format!("task{i}"), ratio, lambda))
        .collect();
    let mut out = Vec::with_capacity(base.len());
    for (t, meta) in base.manifest().iter().enumerate() {
        let mut data = base.values_at(t)?;
        let column: Vec<&TensorData> = taus.iter().map(|tau| &tau.deltas()[t]).collect();
        let kept = dispatch(kernel, &meta.name, &mut data, &column)?;
        ensure_finite(&meta.name, &data)?;
        for (task, k) in tasks.iter_mut().zip(kept) {
            let counts = Counts {
                numel: meta.numel(),
                ..Counts::default()
            };
            task.push(&meta.name, false, counts, k);
        }
        out.push(Tensor::new(meta.name.clone(), meta.shape.clone(), meta.dtype, data)?);
    }
    report.tasks = tasks;
    Ok(Merged {
        checkpoint: Checkpoint::from_tensors(out)?,
        report,
    })
}

struct Arithmetic {
    lambda: f64,
}

impl Kernel for Arithmetic {
    fn apply<T: Scalar>(&self, out: &mut [T], taus: &[&[T]]) -> Vec<usize> {
        let lambda = T::from_f64(self.lambda);
        for (d, x) in out.iter_mut().enumerate() {
            for tau in taus {
                add_nonzero(x, lambda * tau[d]);
            }
        }
        vec![out.len(); taus.len()]
    }
}

/// `theta_base + lambda * sum_i tau_i`.
pub fn task_arithmetic(base: &Checkpoint, taus: &[TaskVector], lambda: f64) -> Result<Merged> {
    check_lambda(lambda)?;
    run(&Arithmetic { lambda }, base, taus, MergeReport::new("task_arithmetic"), None, lambda)
}

struct Ties {
    lambda: f64,
    keep: f64,
}

impl Kernel for Ties {
    fn apply<T: Scalar>(&self, out: &mut [T], taus: &[&[T]]) -> Vec<usize> {
        let n = out.len();
        let k = ratio_count(self.keep, n);
        let trimmed: Vec<FixedBitSet> = taus
            .iter()
            .map(|tau| {
                let mags: Vec<T> = tau.iter().map(|v| v.abs()).collect();
                top_k_generic(&mags, k)
            })
            .collect();
        let lambda = T::from_f64(self.lambda);
        let mut kept = vec![0; taus.len()];
        for d in 0..n {
            let (mut pos, mut neg) = (T::zero(), T::zero());
            for (tau, bits) in taus.iter().zip(&trimmed) {
                if bits.contains(d) {
                    if tau[d] > T::zero() {
                        pos = pos + tau[d];
                    } else {
                        neg = neg - tau[d];
                    }
                }
            }
            // Equal mass on both sides elects no sign and leaves the base.
            let positive = match pos.partial_cmp(&neg) {
                Some(std::cmp::Ordering::Greater) => true,
                Some(std::cmp::Ordering::Less) => false,
                _ => continue,
            };
            let (mut sum, mut count) = (T::zero(), 0usize);
            for (i, (tau, bits)) in taus.iter().zip(&trimmed).enumerate() {
                let v = tau[d];
                if bits.contains(d) && v != T::zero() && (v > T::zero()) == positive {
                    sum = sum + v;
                    count += 1;
                    kept[i] += 1;
                }
            }
            add_nonzero(&mut out[d], lambda * (sum / T::from_f64(count as f64)));
        }
        kept
    }
}

/// Trims each task vector to its largest `trim_keep_ratio` fraction per
/// tensor, elects a sign per element from the heavier side and adds the
/// mean of the surviving deltas that agree with it.
pub fn ties_merge(base: &Checkpoint, taus: &[TaskVector], lambda: f64, trim_keep_ratio: f64) -> Result<Merged> {
    check_lambda(lambda)?;
    check_unit("trim_keep_ratio", trim_keep_ratio)?;
    let kernel = Ties {
        lambda,
        keep: trim_keep_ratio,
    };
    run(&kernel, base, taus, MergeReport::new("ties"), Some(trim_keep_ratio), lambda)
}

/// Indices of one delta tensor that survive Breadcrumbs sparsification:
/// the `floor(top * n)` largest magnitudes and the `floor((1 - keep) * n)`
/// smallest of the rest are dropped. Equal magnitudes drop the lower
/// index first on both ends.
pub fn breadcrumbs_survivors<T: Scalar>(tau: &[T], top_mask_ratio: f64, keep_ratio: f64) -> FixedBitSet {
    let n = tau.len();
    let mags: Vec<T> = tau.iter().map(|v| v.abs()).collect();
    let top = ratio_count(top_mask_ratio, n);
    let bottom = ratio_count(1.0 - keep_ratio, n);
    let mut alive = FixedBitSet::with_capacity(n);
    alive.insert_range(..);
    if top + bottom >= n {
        alive.clear();
        return alive;
    }
    alive.difference_with(&top_k_generic(&mags, top));
    let mut rest: Vec<usize> = alive.ones().collect();
    rest.sort_by(|&a, &b| {
        mags[a]
            .partial_cmp(&mags[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in &rest[..bottom] {
        alive.set(i, false);
    }
    alive
}

struct Breadcrumbs {
    lambda: f64,
    top: f64,
    keep: f64,
}

impl Kernel for Breadcrumbs {
    fn apply<T: Scalar>(&self, out: &mut [T], taus: &[&[T]]) -> Vec<usize> {
        let lambda = T::from_f64(self.lambda);
        taus.iter()
            .map(|tau| {
                let alive = breadcrumbs_survivors(tau, self.top, self.keep);
                for d in alive.ones() {
                    add_nonzero(&mut out[d], lambda * tau[d]);
                }
                alive.count_ones(..)
            })
            .collect()
    }
}

/// Task arithmetic over task vectors with their magnitude outliers and
/// smallest entries removed per tensor.
pub fn breadcrumbs_merge(
    base: &Checkpoint,
    taus: &[TaskVector],
    lambda: f64,
    top_mask_ratio: f64,
    keep_ratio: f64,
) -> Result<Merged> {
    check_lambda(lambda)?;
    check_breadcrumbs(top_mask_ratio, keep_ratio)?;
    let kernel = Breadcrumbs {
        lambda,
        top: top_mask_ratio,
        keep: keep_ratio,
    };
    run(&kernel, base, taus, MergeReport::new("breadcrumbs"), None, lambda)
}

/// Element-wise mean of the models, computed as `x_0 + sum_i (x_i - x_0) / K`
/// so identical inputs come back unchanged. A simple stand-in for Model
/// Stock; it does not reproduce that method's geometry.
pub fn uniform_average(models: &[Checkpoint]) -> Result<Merged> {
    let Some(anchor) = models.first() else {
        return Err(Error::Config("uniform average needs at least one model".into()));
    };
    let taus = models[1..]
        .iter()
        .map(|m| task_vector(m, anchor))
        .collect::<Result<Vec<_>>>()?;
    let k = models.len() as f64;
    let lambda = 1.0 / k;
    let mut report = MergeReport::new("uniform_average");
    report.note = Some("uniform parameter average; stand-in for Model Stock, not its geometry".into());
    if taus.is_empty() {
        report.tasks = vec![TaskReport::new("model0", None, 1.0)];
        return Ok(Merged {
            checkpoint: anchor.to_memory()?,
            report,
        });
    }
    let mut merged = run(&Arithmetic { lambda }, anchor, &taus, report, None, lambda)?;
    for (i, task) in merged.report.tasks.iter_mut().enumerate() {
        task.name = format!("model{}", i + 1);
    }
    Ok(merged)
}

/// Runs the configured baseline on fine-tuned checkpoints derived from
/// `base`. `uniform_average` averages the fine-tuned models themselves.
pub fn run_baseline(config: &BaselineConfig, base: &Checkpoint, fines: &[Checkpoint]) -> Result<Merged> {
    config.validate()?;
    if config.method == BaselineMethod::UniformAverage {
        return uniform_average(fines);
    }
    let taus = fines
        .iter()
        .map(|f| task_vector(f, base))
        .collect::<Result<Vec<_>>>()?;
    match config.method {
        BaselineMethod::TaskArithmetic => task_arithmetic(base, &taus, config.lambda),
        BaselineMethod::Ties => ties_merge(base, &taus, config.lambda, config.trim_keep_ratio),
        BaselineMethod::Breadcrumbs => {
            breadcrumbs_merge(base, &taus, config.lambda, config.top_mask_ratio, config.keep_ratio)
        }
        BaselineMethod::UniformAverage => unreachable!("handled above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ckpt(values: &[f64]) -> Checkpoint {
        Checkpoint::from_tensors(vec![Tensor::f64("w", vec![values.len()], values.to_vec()).unwrap()]).unwrap()
    }

    fn taus(base: &[f64], fines: &[Vec<f64>]) -> (Checkpoint, Vec<TaskVector>) {
        let b = ckpt(base);
        let t = fines.iter().map(|f| task_vector(&ckpt(f), &b).unwrap()).collect();
        (b, t)
    }

    fn values(m: &Merged) -> Vec<f64> {
        m.checkpoint.values("w").unwrap().to_f64_vec()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn lambda_zero_returns_base_bits() {
        let base = [0.5, -0.0, 1e-300, -3.25];
        let (b, t) = taus(&base, &[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 0.0, 9.0]]);
        for m in [
            task_arithmetic(&b, &t, 0.0).unwrap(),
            ties_merge(&b, &t, 0.0, 1.0).unwrap(),
            breadcrumbs_merge(&b, &t, 0.0, 0.0, 1.0).unwrap(),
        ] {
            let got = values(&m);
            for (g, e) in got.iter().zip(base) {
                assert_eq!(g.to_bits(), e.to_bits());
            }
        }
    }

    #[test]
    fn single_task_unit_lambda_gives_fine_model() {
        let fine = vec![1.5, -2.0, 0.25];
        let (b, t) = taus(&[1.0, 1.0, 1.0], &[fine.clone()]);
        assert_eq!(values(&task_arithmetic(&b, &t, 1.0).unwrap()), fine);
    }

    #[test]
    fn task_arithmetic_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random(&mut rng, 16);
        let fines = vec![random(&mut rng, 16), random(&mut rng, 16)];
        let (b, t) = taus(&base, &fines);
        let got = values(&task_arithmetic(&b, &t, 0.7).unwrap());
        for d in 0..16 {
            let mut want = base[d];
            for f in &fines {
                want += 0.7 * (f[d] - base[d]);
            }
            assert!((got[d] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_identical_vectors_reduce_to_tau() {
        let tau = vec![0.5, -1.0, 2.0, 0.0];
        let (b, t) = taus(&[0.0; 4], &[tau.clone(), tau.clone(), tau.clone()]);
        assert_eq!(values(&ties_merge(&b, &t, 1.0, 1.0).unwrap()), tau);
    }

    #[test]
    fn ties_keeps_the_heavier_sign() {
        let (b, t) = taus(&[0.0], &[vec![2.0], vec![-1.0]]);
        let m = ties_merge(&b, &t, 1.0, 1.0).unwrap();
        assert_eq!(values(&m), [2.0]);
        assert_eq!(m.report.tasks[0].totals.mask_density, 1.0);
        assert_eq!(m.report.tasks[1].totals.mask_density, 0.0);
    }

    #[test]
    fn ties_balanced_signs_leave_base() {
        let (b, t) = taus(&[0.25], &[vec![1.25], vec![-0.75]]);
        assert_eq!(values(&ties_merge(&b, &t, 1.0, 1.0).unwrap()), [0.25]);
    }

    #[test]
    fn ties_zero_keep_returns_base() {
        let (b, t) = taus(&[1.0, 2.0, 3.0], &[vec![4.0, 5.0, 6.0]]);
        assert_eq!(values(&ties_merge(&b, &t, 1.0, 0.3).unwrap()), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn ties_one_task_full_keep_is_task_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = random(&mut rng, 32);
        let (b, t) = taus(&base, &[random(&mut rng, 32)]);
        assert_eq!(
            values(&ties_merge(&b, &t, 0.8, 1.0).unwrap()),
            values(&task_arithmetic(&b, &t, 0.8).unwrap())
        );
    }

    #[test]
    fn breadcrumbs_worked_example() {
        let alive = breadcrumbs_survivors(&[9.0f64, 5.0, 3.0, 1.0], 0.25, 0.75);
        assert_eq!(alive.ones().collect::<Vec<_>>(), [1, 2]);
        let alive = breadcrumbs_survivors(&[-1.0f64, 9.0, 3.0, -5.0], 0.25, 0.75);
        assert_eq!(alive.ones().collect::<Vec<_>>(), [2, 3]);
    }

    #[test]
    fn breadcrumbs_equal_magnitudes_drop_lowest_indices() {
        let alive = breadcrumbs_survivors(&[1.0f64, -1.0, 1.0, 1.0], 0.25, 0.75);
        assert_eq!(alive.ones().collect::<Vec<_>>(), [2, 3]);
    }

    #[test]
    fn breadcrumbs_without_sparsification_is_task_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random(&mut rng, 20);
        let (b, t) = taus(&base, &[random(&mut rng, 20), random(&mut rng, 20)]);
        assert_eq!(
            values(&breadcrumbs_merge(&b, &t, 0.5, 0.0, 1.0).unwrap()),
            values(&task_arithmetic(&b, &t, 0.5).unwrap())
        );
    }

    #[test]
    fn breadcrumbs_ratio_conflict_is_config_error() {
        let (b, t) = taus(&[0.0], &[vec![1.0]]);
        for (top, keep) in [(0.5, 0.5), (0.6, 0.3), (1.0, 1.0)] {
            assert!(matches!(breadcrumbs_merge(&b, &t, 1.0, top, keep), Err(Error::Config(_))));
        }
    }

    #[test]
    fn uniform_average_examples() {
        let a = ckpt(&[0.1, 0.2, 0.3]);
        let m = uniform_average(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(m.checkpoint.content_eq(&a).unwrap());
        assert!(m.report.note.as_deref().unwrap().contains("Model Stock"));

        let m = uniform_average(&[ckpt(&[0.0, 2.0]), ckpt(&[1.0, -2.0])]).unwrap();
        assert_eq!(values(&m), [0.5, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let models: Vec<Vec<f64>> = (0..3).map(|_| random(&mut rng, 16)).collect();
        let got = values(&uniform_average(&models.iter().map(|v| ckpt(v)).collect::<Vec<_>>()).unwrap());
        for d in 0..16 {
            let want = (models[0][d] + models[1][d] + models[2][d]) / 3.0;
            assert!((got[d] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn report_shape_matches_led() {
        let (b, t) = taus(&[0.0, 0.0], &[vec![1.0, 2.0]]);
        let m = task_arithmetic(&b, &t, 1.0).unwrap();
        let json: serde_json::Value = serde_json::from_str(&m.report.to_json()).unwrap();
        assert_eq!(json["method"], "task_arithmetic");
        assert!(json["tasks"][0]["totals"]["elected"].is_null());
        assert_eq!(json["tasks"][0]["tensors"][0]["numel"], 2);
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let b = ckpt(&[0.0]);
        let f32_base = Checkpoint::from_tensors(vec![Tensor::f32("w", vec![1], vec![0.0]).unwrap()]).unwrap();
        let t = task_vector(&ckpt(&[1.0]), &b).unwrap();
        assert!(task_arithmetic(&f32_base, &[t], 1.0).is_err());
    }
}
