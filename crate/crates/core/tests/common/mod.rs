//! Brute-force reference implementations shared by the integration tests
//! and the acceptance target. Nothing here calls into the bitset pipeline.

#![allow(dead_code)]

use std::collections::BTreeSet;

use ledmerge::checkpoint::{Checkpoint, Tensor};
use ledmerge::led::{MergeConfig, TaskSpec};
use ledmerge::scoring::{ImportanceMap, ScoreMethod};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Flat = BTreeSet<usize>;

/// Indices of the `floor(r * n)` largest scores, ties to the lower index,
/// by a full sort.
pub fn naive_top(scores: &[f64], r: f64) -> Flat {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let k = (r * scores.len() as f64).floor() as usize;
    order.into_iter().take(k).collect()
}

/// Removes every index found in the intersection of some family `J` of two
/// or more sets. All such families are enumerated; for `K >= 3` the full
/// family adds nothing beyond the proper ones.
pub fn naive_disjoint(elected: &[Flat]) -> Vec<Flat> {
    let k = elected.len();
    let mut shared = Flat::new();
    for family in 0u32..(1 << k) {
        if family.count_ones() < 2 {
            continue;
        }
        let mut members = (0..k).filter(|j| family & (1 << j) != 0);
        let first = members.next().unwrap();
        let mut common = elected[first].clone();
        for j in members {
            common = common.intersection(&elected[j]).copied().collect();
        }
        shared.extend(common);
    }
    elected.iter().map(|e| e.difference(&shared).copied().collect()).collect()
}

/// A random LED instance over at most 64 elements split into 1..=3 tensors.
#[derive(Clone, Debug)]
pub struct Instance {
    pub sizes: Vec<usize>,
    pub ratios: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub base: Vec<Vec<f64>>,
    pub fines: Vec<Vec<Vec<f64>>>,
    /// `(fine, base)` score vectors per task, per tensor.
    pub scores: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

pub const RATIOS: [f64; 3] = [0.25, 0.5, 1.0];

fn score_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // A coarse grid half the time so ties are common.
    if rng.gen_bool(0.5) {
        (0..n).map(|_| rng.gen_range(0..4) as f64).collect()
    } else {
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }
}

pub fn tensor_name(t: usize) -> String {
    format!("t{t}")
}

impl Instance {
    pub fn random(seed: u64, max_d: usize, max_k: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(1..=max_d);
        let k = rng.gen_range(1..=max_k);
        Self::build(&mut rng, d, k)
    }

    /// Exactly `d` elements and `k` tasks.
    pub fn sized(seed: u64, d: usize, k: usize) -> Self {
        Self::build(&mut ChaCha8Rng::seed_from_u64(seed), d, k)
    }

    fn build(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Self {
        let parts = rng.gen_range(1..=3.min(d));
        let mut cuts: Vec<usize> = (1..d).collect();
        cuts.shuffle(rng);
        let mut cuts: Vec<usize> = cuts.into_iter().take(parts - 1).collect();
        cuts.sort_unstable();
        let mut sizes = Vec::new();
        let mut prev = 0;
        for c in cuts.into_iter().chain([d]) {
            sizes.push(c - prev);
            prev = c;
        }
        let vals = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            sizes.iter().map(|&n| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let base = vals(rng);
        let fines = (0..k).map(|_| vals(rng)).collect();
        let scores = (0..k)
            .map(|_| {
                let f = sizes.iter().map(|&n| score_vec(rng, n)).collect();
                let b = sizes.iter().map(|&n| score_vec(rng, n)).collect();
                (f, b)
            })
            .collect();
        let ratios = (0..k).map(|_| *RATIOS.choose(rng).unwrap()).collect();
        let lambdas = (0..k).map(|_| rng.gen_range(0.1..2.0)).collect();
        Self { sizes, ratios, lambdas, base, fines, scores }
    }

    pub fn k(&self) -> usize {
        self.ratios.len()
    }

    pub fn layout(&self) -> Vec<(String, usize)> {
        self.sizes.iter().enumerate().map(|(t, &n)| (tensor_name(t), n)).collect()
    }

    pub fn config(&self) -> MergeConfig {
        MergeConfig::new(
            (0..self.k())
                .map(|i| TaskSpec::new(format!("task{i}"), self.ratios[i], self.lambdas[i]))
                .collect(),
        )
    }

    pub fn checkpoint(&self, values: &[Vec<f64>]) -> Checkpoint {
        checkpoint(values)
    }

    pub fn base_ckpt(&self) -> Checkpoint {
        checkpoint(&self.base)
    }

    pub fn fine_ckpts(&self) -> Vec<Checkpoint> {
        self.fines.iter().map(|f| checkpoint(f)).collect()
    }

    pub fn maps(&self) -> Vec<(ImportanceMap, ImportanceMap)> {
        self.scores.iter().map(|(f, b)| (score_map(f), score_map(b))).collect()
    }

    /// Per task, per tensor: (fine selection, base selection, elected, disjoint).
    pub fn oracle_sets(&self) -> Vec<[Vec<Flat>; 4]> {
        let k = self.k();
        let mut out: Vec<[Vec<Flat>; 4]> = (0..k).map(|_| Default::default()).collect();
        for t in 0..self.sizes.len() {
            let mut elected = Vec::new();
            for i in 0..k {
                let f = naive_top(&self.scores[i].0[t], self.ratios[i]);
                let b = naive_top(&self.scores[i].1[t], self.ratios[i]);
                let e: Flat = f.intersection(&b).copied().collect();
                out[i][0].push(f);
                out[i][1].push(b);
                elected.push(e.clone());
                out[i][2].push(e);
            }
            for (i, d) in naive_disjoint(&elected).into_iter().enumerate() {
                out[i][3].push(d);
            }
        }
        out
    }

    /// Merged parameters by a scalar loop over the oracle's disjoint sets.
    pub fn oracle_merge(&self) -> Vec<Vec<f64>> {
        let sets = self.oracle_sets();
        let mut out = self.base.clone();
        for (t, values) in out.iter_mut().enumerate() {
            for (d, v) in values.iter_mut().enumerate() {
                for i in 0..self.k() {
                    if sets[i][3][t].contains(&d) {
                        *v += self.lambdas[i] * (self.fines[i][t][d] - self.base[t][d]);
                    }
                }
            }
        }
        out
    }
}

pub fn checkpoint(values: &[Vec<f64>]) -> Checkpoint {
    Checkpoint::from_tensors(
        values
            .iter()
            .enumerate()
            .map(|(t, v)| Tensor::f64(tensor_name(t), vec![v.len()], v.clone()).unwrap()),
    )
    .unwrap()
}

pub fn score_map(values: &[Vec<f64>]) -> ImportanceMap {
    let tensors = values
        .iter()
        .enumerate()
        .map(|(t, v)| Tensor::f64(tensor_name(t), vec![v.len()], v.clone()).unwrap())
        .collect();
    ImportanceMap::from_tensors(tensors, ScoreMethod::Imported, "oracle", 0).unwrap()
}

/// Per-tensor index sets of a bitset-backed set, in manifest order.
pub fn flats(bits: &[ledmerge::led::TensorBits]) -> Vec<Flat> {
    bits.iter().map(|t| t.bits.ones().collect()).collect()
}

fn by_magnitude_desc(v: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap().then(a.cmp(&b)));
    order
}

/// Merged delta of sign-elected trimming, with the elected sign found by
/// scoring every sign vector in `{+1, -1}^D` (D small). Elements where the
/// best vectors disagree have no elected sign and get zero.
pub fn brute_force_ties(taus: &[Vec<f64>], keep: f64) -> Vec<f64> {
    let n = taus[0].len();
    assert!(n <= 16);
    let k = (keep * n as f64).floor() as usize;
    let trimmed: Vec<Vec<f64>> = taus
        .iter()
        .map(|t| {
            let mut out = vec![0.0; n];
            for &d in by_magnitude_desc(t).iter().take(k) {
                out[d] = t[d];
            }
            out
        })
        .collect();
    let agree = |d: usize, s: f64| -> f64 { trimmed.iter().map(|t| (s * t[d]).max(0.0)).sum() };
    let mut best = f64::NEG_INFINITY;
    let mut winners: Vec<u32> = Vec::new();
    for pattern in 0u32..(1 << n) {
        let sign = |d: usize| if pattern & (1 << d) != 0 { 1.0 } else { -1.0 };
        let mass: f64 = (0..n).map(|d| agree(d, sign(d))).sum();
        if mass > best {
            best = mass;
            winners.clear();
        }
        if mass == best {
            winners.push(pattern);
        }
    }
    (0..n)
        .map(|d| {
            let bit = winners[0] & (1 << d);
            if winners.iter().any(|w| w & (1 << d) != bit) {
                return 0.0;
            }
            let s = if bit != 0 { 1.0 } else { -1.0 };
            let kept: Vec<f64> = trimmed.iter().map(|t| t[d]).filter(|v| v * s > 0.0).collect();
            if kept.is_empty() {
                0.0
            } else {
                kept.iter().sum::<f64>() / kept.len() as f64
            }
        })
        .collect()
}

/// Survivors of outlier-and-tail trimming by two explicit sorts. Ratios are
/// given in whole percent so the counts are exact integer floors.
pub fn sorted_breadcrumbs(tau: &[f64], top_pct: usize, keep_pct: usize) -> Flat {
    let n = tau.len();
    let n_top = top_pct * n / 100;
    let n_bottom = (100 - keep_pct) * n / 100;
    let mut rest: Vec<usize> = by_magnitude_desc(tau).into_iter().skip(n_top).collect();
    rest.sort_by(|&a, &b| tau[a].abs().partial_cmp(&tau[b].abs()).unwrap().then(a.cmp(&b)));
    rest.into_iter().skip(n_bottom).collect()
}
