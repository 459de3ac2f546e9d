use std::path::Path;

use fixedbitset::FixedBitSet;

use super::config::{ElectionMode, MergeConfig};
use super::select::{global_top_k, ratio_count, top_k_bits, Granularity};
use super::sets::{check_aligned, MergeMask, NeuronSet, SetOrigin, TensorBits};
use crate::checkpoint::{
    validate_compat, Checkpoint, CheckpointWriter, Scalar, TaskVector, Tensor, TensorData, TensorMeta,
};
use crate::error::{Error, Result};
use crate::report::{Counts, MergeReport, TaskReport};
use crate::scoring::ImportanceMap;

/// A merged checkpoint together with its report.
#[derive(Clone, Debug)]
pub struct Merged {
    pub checkpoint: Checkpoint,
    pub report: MergeReport,
}

fn elect_bits(fine: &FixedBitSet, base: &FixedBitSet, mode: ElectionMode) -> FixedBitSet {
    match mode {
        ElectionMode::Both => {
            let mut out = fine.clone();
            out.intersect_with(base);
            out
        }
        ElectionMode::BaseOnly => base.clone(),
        ElectionMode::FineOnly => fine.clone(),
    }
}

/// Combines the fine-tuned and base selections of one task.
pub fn elect(fine_set: &NeuronSet, base_set: &NeuronSet, mode: ElectionMode) -> Result<NeuronSet> {
    fine_set.check_aligned(base_set)?;
    if fine_set.ratio() != base_set.ratio() {
        return Err(Error::Config(format!(
            "election needs one ratio, got {} and {}",
            fine_set.ratio(),
            base_set.ratio()
        )));
    }
    let tensors = fine_set
        .tensors()
        .iter()
        .zip(base_set.tensors())
        .map(|(f, b)| TensorBits::new(&f.name, elect_bits(&f.bits, &b.bits, mode)))
        .collect();
    Ok(NeuronSet::new(tensors, fine_set.ratio(), SetOrigin::Elected))
}

/// Drops every index claimed by two or more of the sets. An index survives
/// in output `i` iff set `i` holds it and no other set does.
fn disjoint_bits(sets: &[&FixedBitSet]) -> Vec<FixedBitSet> {
    let n = sets.first().map_or(0, |s| s.len());
    let mut once = FixedBitSet::with_capacity(n);
    let mut shared = FixedBitSet::with_capacity(n);
    for s in sets {
        let mut both = once.clone();
        both.intersect_with(s);
        shared.union_with(&both);
        once.union_with(s);
    }
    sets.iter()
        .map(|s| {
            let mut out = (*s).clone();
            out.difference_with(&shared);
            out
        })
        .collect()
}

pub fn disjoint(elected: &[NeuronSet]) -> Result<Vec<NeuronSet>> {
    let Some(first) = elected.first() else {
        return Err(Error::Config("disjoint needs at least one set".into()));
    };
    for s in &elected[1..] {
        first.check_aligned(s)?;
    }
    let mut outputs: Vec<Vec<TensorBits>> = vec![Vec::new(); elected.len()];
    for (t, meta) in first.tensors().iter().enumerate() {
        let column: Vec<&FixedBitSet> = elected.iter().map(|s| &s.tensors()[t].bits).collect();
        for (out, bits) in outputs.iter_mut().zip(disjoint_bits(&column)) {
            out.push(TensorBits::new(&meta.name, bits));
        }
    }
    Ok(outputs
        .into_iter()
        .zip(elected)
        .map(|(tensors, src)| NeuronSet::new(tensors, src.ratio(), SetOrigin::Disjoint))
        .collect())
}

pub fn build_mask(disjoint_set: &NeuronSet) -> MergeMask {
    MergeMask::new(disjoint_set.tensors().to_vec())
}

fn accumulate<T: Scalar>(out: &mut [T], tau: &[T], mask: &FixedBitSet, lambda: f64) {
    let lambda = T::from_f64(lambda);
    for d in mask.ones() {
        let term = lambda * tau[d];
        // Adding an exact zero is skipped so signed zeros in the base survive.
        if term != T::zero() {
            out[d] = out[d] + term;
        }
    }
}

/// `out[d] += lambda * tau[d]` for every `d` in `mask`.
fn accumulate_masked(
    name: &str,
    out: &mut TensorData,
    tau: &TensorData,
    mask: &FixedBitSet,
    lambda: f64,
) -> Result<()> {
    match (out, tau) {
        (TensorData::F32(o), TensorData::F32(t)) => accumulate(o, t, mask, lambda),
        (TensorData::F64(o), TensorData::F64(t)) => accumulate(o, t, mask, lambda),
        _ => return Err(Error::compat(name, "task vector precision differs from base")),
    }
    Ok(())
}

fn take<T: Scalar>(out: &mut [T], fine: &[T], mask: &FixedBitSet) {
    for d in mask.ones() {
        // Equal values keep the base bits, as with a zero term.
        if fine[d] != out[d] || fine[d].is_nan() {
            out[d] = fine[d];
        }
    }
}

/// `out[d] = fine[d]` for every `d` in `mask` where the two differ.
fn take_masked(name: &str, out: &mut TensorData, fine: &TensorData, mask: &FixedBitSet) -> Result<()> {
    match (out, fine) {
        (TensorData::F32(o), TensorData::F32(f)) => take(o, f, mask),
        (TensorData::F64(o), TensorData::F64(f)) => take(o, f, mask),
        _ => return Err(Error::compat(name, "fine precision differs from base")),
    }
    Ok(())
}

pub(crate) fn ensure_finite(name: &str, data: &TensorData) -> Result<()> {
    if data.all_finite() {
        Ok(())
    } else {
        Err(Error::Numerics(format!("merged tensor `{name}`")))
    }
}

fn check_task_vector(base: &Checkpoint, tau: &TaskVector) -> Result<()> {
    if tau.manifest().len() != base.len() {
        return Err(Error::compat("*", "task vector covers a different tensor set"));
    }
    for (a, b) in base.manifest().iter().zip(tau.manifest()) {
        if a.name != b.name || a.shape != b.shape || a.dtype != b.dtype {
            return Err(Error::compat(&a.name, "task vector not aligned to base"));
        }
    }
    Ok(())
}

/// `theta_base + sum_i lambda_i * tau_i * m_i`, accumulated in the base's
/// precision; for each element tasks are added in list order.
pub fn merge(
    base: &Checkpoint,
    taus: &[TaskVector],
    masks: &[MergeMask],
    lambdas: &[f64],
) -> Result<Checkpoint> {
    if taus.len() != masks.len() || taus.len() != lambdas.len() {
        return Err(Error::Config(format!(
            "{} task vectors, {} masks, {} lambdas",
            taus.len(),
            masks.len(),
            lambdas.len()
        )));
    }
    for (tau, mask) in taus.iter().zip(masks) {
        check_task_vector(base, tau)?;
        let layout: Vec<TensorBits> = base
            .manifest()
            .iter()
            .map(|m| TensorBits::new(&m.name, FixedBitSet::with_capacity(m.numel())))
            .collect();
        check_aligned(&layout, mask.tensors())?;
    }
    let mut out = Vec::with_capacity(base.len());
    for (t, meta) in base.manifest().iter().enumerate() {
        let mut data = base.values_at(t)?;
        for ((tau, mask), &lambda) in taus.iter().zip(masks).zip(lambdas) {
            accumulate_masked(&meta.name, &mut data, &tau.deltas()[t], &mask.tensors()[t].bits, lambda)?;
        }
        ensure_finite(&meta.name, &data)?;
        out.push(Tensor::new(meta.name.clone(), meta.shape.clone(), meta.dtype, data)?);
    }
    Checkpoint::from_tensors(out)
}

/// The selection stages of the pipeline for one score pair.
#[derive(Clone, Debug)]
pub struct LedSets {
    pub fine: Vec<NeuronSet>,
    pub base: Vec<NeuronSet>,
    pub elected: Vec<NeuronSet>,
    pub disjoint: Vec<NeuronSet>,
}

impl LedSets {
    pub fn masks(&self) -> Vec<MergeMask> {
        self.disjoint.iter().map(build_mask).collect()
    }
}

fn check_inputs(
    config: &MergeConfig,
    base: &Checkpoint,
    fines: Option<&[Checkpoint]>,
    scores: &[(ImportanceMap, ImportanceMap)],
) -> Result<()> {
    config.validate()?;
    if scores.len() != config.tasks.len() {
        return Err(Error::Config(format!(
            "{} tasks configured but {} score pairs given",
            config.tasks.len(),
            scores.len()
        )));
    }
    if let Some(fines) = fines {
        if fines.len() != config.tasks.len() {
            return Err(Error::Config(format!(
                "{} tasks configured but {} fine-tuned checkpoints given",
                config.tasks.len(),
                fines.len()
            )));
        }
        for fine in fines {
            validate_compat(fine, base)?;
        }
    }
    for (fine_map, base_map) in scores {
        fine_map.check_aligned(base)?;
        base_map.check_aligned(base)?;
    }
    Ok(())
}

/// Selects one tensor's top-`r` bits from a map, either directly or from a
/// precomputed global selection.
struct Selector<'a> {
    base: &'a Checkpoint,
    global: Option<Vec<Vec<(FixedBitSet, FixedBitSet)>>>,
}

impl<'a> Selector<'a> {
    fn new(
        config: &MergeConfig,
        base: &'a Checkpoint,
        scores: &[(ImportanceMap, ImportanceMap)],
        excluded: &[bool],
    ) -> Result<Self> {
        let global = match config.granularity {
            Granularity::PerTensor => None,
            Granularity::Global => {
                // Excluded tensors do not compete for the global budget.
                let pool: Vec<usize> = (0..base.len()).filter(|&t| !excluded[t]).collect();
                let d: usize = pool.iter().map(|&t| base.manifest()[t].numel()).sum();
                let pick = |map: &ImportanceMap, r: f64| -> Result<Vec<FixedBitSet>> {
                    let parts = pool
                        .iter()
                        .map(|&t| map.scores(&base.manifest()[t].name))
                        .collect::<Result<Vec<_>>>()?;
                    let mut chosen = global_top_k(&parts, ratio_count(r, d)).into_iter();
                    Ok((0..base.len())
                        .map(|t| {
                            if excluded[t] {
                                FixedBitSet::with_capacity(base.manifest()[t].numel())
                            } else {
                                chosen.next().expect("one bitset per pooled tensor")
                            }
                        })
                        .collect())
                };
                let mut per_task = Vec::with_capacity(scores.len());
                for (task, (fine_map, base_map)) in config.tasks.iter().zip(scores) {
                    let f = pick(fine_map, task.ratio)?;
                    let b = pick(base_map, task.ratio)?;
                    per_task.push(f.into_iter().zip(b).collect());
                }
                Some(per_task)
            }
        };
        Ok(Self { base, global })
    }

    fn select(
        &self,
        task: usize,
        t: usize,
        ratio: f64,
        maps: &(ImportanceMap, ImportanceMap),
    ) -> Result<(FixedBitSet, FixedBitSet)> {
        if let Some(global) = &self.global {
            return Ok(global[task][t].clone());
        }
        let name = &self.base.manifest()[t].name;
        let fine_scores = maps.0.scores(name)?;
        let k = ratio_count(ratio, fine_scores.len());
        let fine = top_k_bits(&fine_scores, k);
        drop(fine_scores);
        let base = top_k_bits(&maps.1.scores(name)?, k);
        Ok((fine, base))
    }
}

fn excluded_flags(config: &MergeConfig, base: &Checkpoint) -> Result<Vec<bool>> {
    let ex = config.exclusions()?;
    Ok(base.names().map(|n| ex.matches(n)).collect())
}

/// Runs location, election and disjoint over whole score maps and returns
/// every intermediate set.
pub fn led_sets(
    config: &MergeConfig,
    base: &Checkpoint,
    scores: &[(ImportanceMap, ImportanceMap)],
) -> Result<LedSets> {
    check_inputs(config, base, None, scores)?;
    let excluded = excluded_flags(config, base)?;
    let selector = Selector::new(config, base, scores, &excluded)?;
    let k_tasks = config.tasks.len();
    let mut fine = vec![Vec::new(); k_tasks];
    let mut based = vec![Vec::new(); k_tasks];
    for (t, meta) in base.manifest().iter().enumerate() {
        for (i, task) in config.tasks.iter().enumerate() {
            let (f, b) = if excluded[t] {
                let empty = FixedBitSet::with_capacity(meta.numel());
                (empty.clone(), empty)
            } else {
                selector.select(i, t, task.ratio, &scores[i])?
            };
            fine[i].push(TensorBits::new(&meta.name, f));
            based[i].push(TensorBits::new(&meta.name, b));
        }
    }
    let fine: Vec<NeuronSet> = fine
        .into_iter()
        .zip(&config.tasks)
        .map(|(t, task)| NeuronSet::new(t, task.ratio, SetOrigin::Fine))
        .collect();
    let base_sets: Vec<NeuronSet> = based
        .into_iter()
        .zip(&config.tasks)
        .map(|(t, task)| NeuronSet::new(t, task.ratio, SetOrigin::Base))
        .collect();
    let elected = fine
        .iter()
        .zip(&base_sets)
        .map(|(f, b)| elect(f, b, config.election))
        .collect::<Result<Vec<_>>>()?;
    let disjoint = disjoint(&elected)?;
    Ok(LedSets {
        fine,
        base: base_sets,
        elected,
        disjoint,
    })
}

/// Runs the whole pipeline one tensor at a time, handing each merged
/// tensor to `sink` in manifest order.
fn run_led(
    config: &MergeConfig,
    base: &Checkpoint,
    fines: &[Checkpoint],
    scores: &[(ImportanceMap, ImportanceMap)],
    sink: &mut dyn FnMut(&TensorMeta, TensorData) -> Result<()>,
) -> Result<MergeReport> {
    check_inputs(config, base, Some(fines), scores)?;
    let excluded = excluded_flags(config, base)?;
    let selector = Selector::new(config, base, scores, &excluded)?;

    let mut report = MergeReport::new("led");
    report.election = Some(config.election.as_str().to_string());
    report.location = Some(scores[0].0.method().to_string());
    report.granularity = Some(
        match config.granularity {
            Granularity::PerTensor => "per_tensor",
            Granularity::Global => "global",
        }
        .to_string(),
    );
    let mut tasks: Vec<TaskReport> = config
        .tasks
        .iter()
        .map(|t| TaskReport::new(&t.name, Some(t.ratio), t.lambda))
        .collect();

    for (t, meta) in base.manifest().iter().enumerate() {
        let n = meta.numel();
        let base_values = base.values_at(t)?;
        if excluded[t] {
            for task in &mut tasks {
                let zero = Some(0);
                let counts = Counts {
                    numel: n,
                    selected_fine: zero,
                    selected_base: zero,
                    elected: zero,
                    disjoint: zero,
                    mask_density: 0.0,
                };
                task.push(&meta.name, true, counts, 0);
            }
            sink(meta, base_values)?;
            continue;
        }

        let mut selected = Vec::with_capacity(config.tasks.len());
        let mut elected = Vec::with_capacity(config.tasks.len());
        for (i, task) in config.tasks.iter().enumerate() {
            let (f, b) = selector.select(i, t, task.ratio, &scores[i])?;
            elected.push(elect_bits(&f, &b, config.election));
            selected.push((f.count_ones(..), b.count_ones(..)));
        }
        let masks = disjoint_bits(&elected.iter().collect::<Vec<_>>());

        let mut merged = base_values.clone();
        for (i, task) in config.tasks.iter().enumerate() {
            let kept = masks[i].count_ones(..);
            let counts = Counts {
                numel: n,
                selected_fine: Some(selected[i].0),
                selected_base: Some(selected[i].1),
                elected: Some(elected[i].count_ones(..)),
                disjoint: Some(kept),
                mask_density: 0.0,
            };
            tasks[i].push(&meta.name, false, counts, kept);
            if kept == 0 || task.lambda == 0.0 {
                continue;
            }
            let fine = fines[i].values(&meta.name)?;
            if task.lambda == 1.0 {
                // Masks are disjoint, so the exact sum is the fine value itself.
                take_masked(&meta.name, &mut merged, &fine, &masks[i])?;
                continue;
            }
            let tau = crate::checkpoint::task_vector_delta(&fine, &base_values);
            drop(fine);
            accumulate_masked(&meta.name, &mut merged, &tau, &masks[i], task.lambda)?;
        }
        drop(base_values);
        ensure_finite(&meta.name, &merged)?;
        sink(meta, merged)?;
    }
    report.tasks = tasks;
    Ok(report)
}

/// Locate, elect, disjoint and merge. `scores[i]` holds the importance maps
/// of task `i`'s fine-tuned model and of the base model, both measured on
/// that task's location dataset.
pub fn led_merge(
    config: &MergeConfig,
    base: &Checkpoint,
    fines: &[Checkpoint],
    scores: &[(ImportanceMap, ImportanceMap)],
) -> Result<Merged> {
    let mut tensors = Vec::with_capacity(base.len());
    let report = run_led(config, base, fines, scores, &mut |meta, data| {
        tensors.push(Tensor::new(meta.name.clone(), meta.shape.clone(), meta.dtype, data)?);
        Ok(())
    })?;
    Ok(Merged {
        checkpoint: Checkpoint::from_tensors(tensors)?,
        report,
    })
}

/// [`led_merge`] that streams the merged tensors straight to `path`; only
/// the tensor being merged is resident.
pub fn led_merge_to_file(
    config: &MergeConfig,
    base: &Checkpoint,
    fines: &[Checkpoint],
    scores: &[(ImportanceMap, ImportanceMap)],
    path: impl AsRef<Path>,
) -> Result<MergeReport> {
    let mut writer = CheckpointWriter::create(path, base.manifest().to_vec(), base.metadata())?;
    let report = run_led(config, base, fines, scores, &mut |meta, data| {
        writer.write_values(&meta.name, &data)
    })?;
    writer.finish()?;
    Ok(report)
}
