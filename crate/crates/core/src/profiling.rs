// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head profiling for attention steering.
//!
//! Each head is scored by steering it alone on a training subset of every
//! dataset. The steering set for a given `k` is the intersection across
//! datasets of each dataset's top-`k` heads, and `k` is chosen by mean
//! validation accuracy.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_cell, EvalOptions, MethodSpec};
use crate::prompting::{EmphasisTarget, PromptOrder, Segment};
use crate::steering::HeadId;
use crate::transformer::Model;

/// Per-head accuracy for one dataset, complete over all `L x N` heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreMap {
    pub dataset: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub scores: BTreeMap<HeadId, f64>,
}

impl HeadScoreMap {
    pub fn new(
        dataset: impl Into<String>,
        n_layers: usize,
        n_heads: usize,
        scores: BTreeMap<HeadId, f64>,
    ) -> Result<Self> {
        let map = Self {
            dataset: dataset.into(),
            n_layers,
            n_heads,
            scores,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InconsistentScores(m));
        if self.scores.len() != self.n_layers * self.n_heads {
            return bad(format!(
                "{}: {} scores for a {}x{} model",
                self.dataset,
                self.scores.len(),
                self.n_layers,
                self.n_heads
            ));
        }
        for (h, &s) in &self.scores {
            h.check(self.n_layers, self.n_heads)?;
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("{}: score {s} for {h} outside [0,1]", self.dataset));
            }
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// The `k` best heads: score descending, then `(layer, head)` ascending.
    pub fn top_k(&self, k: usize) -> Vec<HeadId> {
        let mut ranked: Vec<(HeadId, f64)> = self.scores.iter().map(|(&h, &s)| (h, s)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.into_iter().take(k).map(|(h, _)| h).collect()
    }
}

/// Outcome of the `k` search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilingResult {
    pub best_k: usize,
    pub head_set: BTreeSet<HeadId>,
    pub best_accuracy: f64,
    /// Mean validation accuracy per candidate `k`.
    pub k_curve: BTreeMap<usize, f64>,
    /// Grid values whose intersection was empty; they were scored as the
    /// unsteered baseline.
    pub empty_k: Vec<usize>,
}

fn check_maps(maps: &[HeadScoreMap]) -> Result<(usize, usize)> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InconsistentScores("no score maps".into()))?;
    for m in maps {
        m.validate()?;
        if (m.n_layers, m.n_heads) != (first.n_layers, first.n_heads) {
            return Err(Error::InconsistentScores(format!(
                "{} is {}x{} but {} is {}x{}",
                m.dataset, m.n_layers, m.n_heads, first.dataset, first.n_layers, first.n_heads
            )));
        }
    }
    Ok((first.n_layers, first.n_heads))
}

/// Intersection over datasets of each dataset's top-`k` heads.
pub fn topk_intersection(maps: &[HeadScoreMap], k: usize) -> Result<BTreeSet<HeadId>> {
    let (l, n) = check_maps(maps)?;
    if k == 0 || k > l * n {
        return Err(Error::KOutOfRange { k, max: l * n });
    }
    let mut sets = maps
        .iter()
        .map(|m| m.top_k(k).into_iter().collect::<BTreeSet<_>>());
    let first = sets.next().expect("non-empty");
    Ok(sets.fold(first, |acc, s| acc.intersection(&s).copied().collect()))
}

/// Mean accuracy across validation sets with steering on `heads`.
/// An empty head set evaluates as the no-emphasis baseline.
pub fn validation_accuracy(
    model: &Model,
    heads: &BTreeSet<HeadId>,
    validation_sets: &[Corpus],
    order: PromptOrder,
    target: EmphasisTarget,
    alpha: f32,
    opts: &EvalOptions,
) -> Result<f64> {
    if validation_sets.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (method, target) = if heads.is_empty() {
        (MethodSpec::NoEmphasis, EmphasisTarget::None)
    } else {
        (
            MethodSpec::Steering {
                heads: heads.clone(),
                alpha,
            },
            target,
        )
    };
    let mut total = 0.0;
    for set in validation_sets {
        total += evaluate_cell(model, set, order, &method, target, opts)?.accuracy;
    }
    Ok(total / validation_sets.len() as f64)
}

/// Scores every head of `model` on every subset.
///
/// Heads are evaluated in parallel and collected in `(layer, head)` order.
pub fn profile_heads(
    model: &Model,
    subsets: &[Corpus],
    order: PromptOrder,
    target: EmphasisTarget,
    alpha: f32,
    opts: &EvalOptions,
) -> Result<Vec<HeadScoreMap>> {
    Segment::for_target(target)?;
    let c = model.config();
    let heads = HeadId::all(c.n_layers, c.n_heads);
    subsets
        .iter()
        .map(|subset| {
            let scored: Vec<Result<(HeadId, f64)>> = heads
                .par_iter()
                .map(|&h| {
                    let method = MethodSpec::Steering {
                        heads: BTreeSet::from([h]),
                        alpha,
                    };
                    let cell = evaluate_cell(model, subset, order, &method, target, opts)?;
                    Ok((h, cell.accuracy))
                })
                .collect();
            let scores = scored.into_iter().collect::<Result<BTreeMap<_, _>>>()?;
            HeadScoreMap::new(subset.name.clone(), c.n_layers, c.n_heads, scores)
        })
        .collect()
}

/// Grid search over `k` with a caller-supplied evaluator.
///
/// `evaluate` is called once per distinct head set. The best `k` maximizes
/// the evaluated accuracy; ties go to the smaller `k`.
pub fn select_k_with(
    maps: &[HeadScoreMap],
    k_grid: &[usize],
    mut evaluate: impl FnMut(&BTreeSet<HeadId>) -> Result<f64>,
) -> Result<ProfilingResult> {
    if k_grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let (l, n) = check_maps(maps)?;
    if let Some(&k) = k_grid.iter().find(|&&k| k == 0 || k > l * n) {
        return Err(Error::KOutOfRange { k, max: l * n });
    }
    let mut grid = k_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();

    let mut cache: HashMap<BTreeSet<HeadId>, f64> = HashMap::new();
    let mut k_curve = BTreeMap::new();
    let mut empty_k = Vec::new();
    let mut best: Option<(usize, BTreeSet<HeadId>, f64)> = None;
    for k in grid {
        let set = topk_intersection(maps, k)?;
        if set.is_empty() {
            empty_k.push(k);
        }
        let acc = match cache.get(&set) {
            Some(&a) => a,
            None => {
                let a = evaluate(&set)?;
                cache.insert(set.clone(), a);
                a
            }
        };
        k_curve.insert(k, acc);
        if best.as_ref().is_none_or(|b| acc > b.2) {
            best = Some((k, set, acc));
        }
    }
    let (best_k, head_set, best_accuracy) = best.expect("grid is non-empty");
    Ok(ProfilingResult {
        best_k,
        head_set,
        best_accuracy,
        k_curve,
        empty_k,
    })
}

/// Picks `k` by mean validation accuracy of the steered model.
#[allow(clippy::too_many_arguments)]
pub fn select_k(
    model: &Model,
    maps: &[HeadScoreMap],
    validation_sets: &[Corpus],
    order: PromptOrder,
    target: EmphasisTarget,
    alpha: f32,
    k_grid: &[usize],
    opts: &EvalOptions,
) -> Result<ProfilingResult> {
    Segment::for_target(target)?;
    select_k_with(maps, k_grid, |heads| {
        validation_accuracy(model, heads, validation_sets, order, target, alpha, opts)
    })
}
