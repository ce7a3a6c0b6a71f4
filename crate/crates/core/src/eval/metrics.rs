use std::collections::BTreeMap;
use std::ops::Range;

use super::hungarian::hungarian_assign;
use crate::error::{Error, Result};
use crate::pipeline::{LabeledSet, Model};

/// Predicted head column to ground-truth class, for columns whose meaning
/// has been settled. Base columns map to themselves and need no entry.
pub type ClassMap = BTreeMap<usize, usize>;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassCount {
    pub class: usize,
    pub total: usize,
    pub correct: usize,
}

/// Accuracies after one task.
///
/// `old` covers every class known before the task (base classes and the
/// classes of earlier novel tasks, through their stored mappings), `new` the
/// classes of this task after Hungarian re-assignment, `all` their union.
/// With no novel classes `new_acc` is 0 and `new_count` is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub task: usize,
    pub old_acc: f64,
    pub new_acc: f64,
    pub all_acc: f64,
    pub old_count: usize,
    pub new_count: usize,
    pub class_counts: Vec<ClassCount>,
    /// `(predicted column, class)` for this task's classes.
    pub mapping: Vec<(usize, usize)>,
}

impl MetricsReport {
    /// Adds this report's mapping to `known`.
    pub fn record_mapping(&self, known: &mut ClassMap) {
        known.extend(self.mapping.iter().copied());
    }
}

fn resolve(known: &ClassMap, column: usize) -> usize {
    known.get(&column).copied().unwrap_or(column)
}

/// Scores predictions. `new_classes` is the id range shared by this task's
/// head columns and its ground-truth classes.
pub fn evaluate_predictions(
    task: usize,
    old: (&[usize], &[usize]),
    new: Option<(&[usize], &[usize], Range<usize>)>,
    known: &ClassMap,
) -> Result<MetricsReport> {
    let (old_pred, old_true) = old;
    if old_pred.len() != old_true.len() {
        return Err(Error::shape("evaluate", "old predictions", old_true.len(), old_pred.len()));
    }
    if old_true.is_empty() {
        return Err(Error::invalid("evaluate", "old-class test split is empty"));
    }
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut old_correct = 0;
    for (&p, &y) in old_pred.iter().zip(old_true) {
        let hit = resolve(known, p) == y;
        old_correct += hit as usize;
        let e = counts.entry(y).or_default();
        e.0 += 1;
        e.1 += hit as usize;
    }

    let (mut new_correct, mut new_count, mut mapping) = (0, 0, Vec::new());
    if let Some((new_pred, new_true, range)) = new {
        if new_pred.len() != new_true.len() {
            return Err(Error::shape("evaluate", "new predictions", new_true.len(), new_pred.len()));
        }
        if new_true.is_empty() {
            return Err(Error::invalid("evaluate", "novel-class test split is empty"));
        }
        if let Some(&y) = new_true.iter().find(|y| !range.contains(y)) {
            return Err(Error::invalid("evaluate", format!("label {y} outside novel classes {range:?}")));
        }
        let k = range.len();
        let mut co = vec![vec![0usize; k]; k];
        for (&p, &y) in new_pred.iter().zip(new_true) {
            if range.contains(&p) {
                co[p - range.start][y - range.start] += 1;
            }
        }
        let cost: Vec<Vec<f64>> = co.iter().map(|r| r.iter().map(|&c| -(c as f64)).collect()).collect();
        let assignment = hungarian_assign(&cost)?;
        mapping = assignment
            .mapping
            .iter()
            .enumerate()
            .map(|(col, &cls)| (range.start + col, range.start + cls))
            .collect();
        let lookup: ClassMap = mapping.iter().copied().collect();
        for (&p, &y) in new_pred.iter().zip(new_true) {
            let hit = lookup.get(&p) == Some(&y);
            new_correct += hit as usize;
            let e = counts.entry(y).or_default();
            e.0 += 1;
            e.1 += hit as usize;
        }
        new_count = new_true.len();
    }

    let old_count = old_true.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(MetricsReport {
        task,
        old_acc: ratio(old_correct, old_count),
        new_acc: ratio(new_correct, new_count),
        all_acc: ratio(old_correct + new_correct, old_count + new_count),
        old_count,
        new_count,
        class_counts: counts
            .into_iter()
            .map(|(class, (total, correct))| ClassCount { class, total, correct })
            .collect(),
        mapping,
    })
}

/// Runs the joint head on both splits and scores the predictions.
pub fn evaluate(
    model: &Model,
    task: usize,
    old: &LabeledSet,
    new: Option<(&LabeledSet, Range<usize>)>,
    known: &ClassMap,
) -> Result<MetricsReport> {
    if old.is_empty() {
        return Err(Error::invalid("evaluate", "old-class test split is empty"));
    }
    let old_pred = model.predict(&old.x)?;
    match new {
        Some((set, range)) => {
            if set.is_empty() {
                return Err(Error::invalid("evaluate", "novel-class test split is empty"));
            }
            let new_pred = model.predict(&set.x)?;
            evaluate_predictions(task, (&old_pred, &old.y), Some((&new_pred, &set.y, range)), known)
        }
        None => evaluate_predictions(task, (&old_pred, &old.y), None, known),
    }
}

/// Largest fraction of `predictions` that share one value.
pub fn max_cluster_share(predictions: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in predictions {
        *counts.entry(p).or_default() += 1;
    }
    *counts.values().max().unwrap_or(&0) as f64 / predictions.len() as f64
}
