//! Prediction tables and the metrics computed from them: overall accuracy,
//! probe-prediction probability, min-max normalized scores, woman-minus-man
//! heatmaps, macro average accuracy and per-probe-type means.
//!
//! Probabilities are fractions in `[0, 1]`; normalized scores live in `[0, 100]`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ScenarioDataset;
use crate::schema::{Family, ProbeType};

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if i == 0 || v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// Confusion counts of one scenario. Rows are true classes; columns are the
/// candidate labels (classes, then the probe in the last column).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionTable {
    classes: Vec<String>,
    probe: String,
    predictions: Vec<usize>,
    confusion: Vec<Vec<u64>>,
}

impl PredictionTable {
    /// Builds a table from (true class, predicted label) pairs.
    pub fn from_predictions(
        classes: Vec<String>,
        probe: String,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Self {
        let c = classes.len();
        let mut confusion = vec![vec![0u64; c + 1]; c];
        let mut predictions = Vec::new();
        for (truth, predicted) in pairs {
            assert!(truth < c && predicted <= c, "prediction pair out of range");
            confusion[truth][predicted] += 1;
            predictions.push(predicted);
        }
        Self {
            classes,
            probe,
            predictions,
            confusion,
        }
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn probe(&self) -> &str {
        &self.probe
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Column index of the probe label.
    pub fn probe_index(&self) -> usize {
        self.classes.len()
    }

    /// Predicted label index per record, in record order.
    pub fn predictions(&self) -> &[usize] {
        &self.predictions
    }

    pub fn confusion(&self) -> &[Vec<u64>] {
        &self.confusion
    }

    pub fn count(&self, class: usize, predicted: usize) -> u64 {
        self.confusion[class][predicted]
    }

    pub fn class_total(&self, class: usize) -> u64 {
        self.confusion[class].iter().sum()
    }

    pub fn class_correct(&self, class: usize) -> u64 {
        self.confusion[class][class]
    }

    pub fn class_probe(&self, class: usize) -> u64 {
        self.confusion[class][self.probe_index()]
    }

    pub fn total(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.class_total(c)).sum()
    }

    /// The probe column never counts as correct.
    pub fn correct(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.class_correct(c)).sum()
    }

    fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::UnknownClass(label.to_string()))
    }
}

/// Predicts every record as `argmax_j alpha[j] * logits[j]`; `None` means all-ones.
pub fn predict(ds: &ScenarioDataset, alpha: Option<&[f64]>) -> Result<PredictionTable> {
    let width = ds.manifest.width();
    if let Some(a) = alpha {
        if a.len() != width {
            return Err(Error::LengthMismatch {
                expected: width,
                actual: a.len(),
            });
        }
    }
    let pairs = ds.records.iter().map(|rec| {
        let predicted = match alpha {
            Some(a) => argmax(rec.logits.iter().zip(a).map(|(z, w)| w * z)),
            None => argmax(rec.logits.iter().copied()),
        };
        (rec.true_class, predicted)
    });
    Ok(PredictionTable::from_predictions(
        ds.manifest.schema.classes().to_vec(),
        ds.manifest.probe.clone(),
        pairs,
    ))
}

/// Fraction of all samples predicted as their true class.
pub fn overall_accuracy(t: &PredictionTable) -> Result<f64> {
    let total = t.total();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(t.correct() as f64 / total as f64)
}

/// Fraction of `class` samples predicted as the probe.
pub fn probe_probability(t: &PredictionTable, class: &str) -> Result<f64> {
    let i = t.class_index(class)?;
    let n = t.class_total(i);
    if n == 0 {
        return Err(Error::EmptyClass(class.to_string()));
    }
    Ok(t.class_probe(i) as f64 / n as f64)
}

pub fn class_accuracy(t: &PredictionTable, class: &str) -> Result<f64> {
    let i = t.class_index(class)?;
    let n = t.class_total(i);
    if n == 0 {
        return Err(Error::EmptyClass(class.to_string()));
    }
    Ok(t.class_correct(i) as f64 / n as f64)
}

/// Unweighted mean of per-class accuracies.
pub fn macro_average_accuracy(t: &PredictionTable) -> Result<f64> {
    if t.num_classes() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut sum = 0.0;
    for (i, class) in t.classes.iter().enumerate() {
        let n = t.class_total(i);
        if n == 0 {
            return Err(Error::EmptyClass(class.clone()));
        }
        sum += t.class_correct(i) as f64 / n as f64;
    }
    Ok(sum / t.num_classes() as f64)
}

/// How probe probabilities are pooled before min-max scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationScope {
    /// One pool per model and dataset. Reproduces the published normalized tables.
    #[default]
    ModelDataset,
    /// One pool per model and test family, spanning all datasets.
    ModelFamily,
}

/// Pool identity. `dataset` is `None` under [`NormalizationScope::ModelFamily`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NormalizationKey {
    pub model: String,
    pub family: Family,
    pub dataset: Option<String>,
}

impl NormalizationKey {
    pub fn new(scope: NormalizationScope, model: &str, family: Family, dataset: &str) -> Self {
        Self {
            model: model.to_string(),
            family,
            dataset: match scope {
                NormalizationScope::ModelDataset => Some(dataset.to_string()),
                NormalizationScope::ModelFamily => None,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationContext {
    pub p_min: f64,
    pub p_max: f64,
    pub count: usize,
}

impl NormalizationContext {
    pub fn is_degenerate(&self) -> bool {
        self.p_max <= self.p_min
    }
}

/// Min and max of each group's probabilities.
pub fn build_normalization<K: Ord>(
    probs: impl IntoIterator<Item = (K, f64)>,
) -> Result<BTreeMap<K, NormalizationContext>> {
    let mut groups: BTreeMap<K, NormalizationContext> = BTreeMap::new();
    for (key, p) in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!(
                "probability {p} is outside [0, 1]"
            )));
        }
        groups
            .entry(key)
            .and_modify(|ctx| {
                ctx.p_min = ctx.p_min.min(p);
                ctx.p_max = ctx.p_max.max(p);
                ctx.count += 1;
            })
            .or_insert(NormalizationContext {
                p_min: p,
                p_max: p,
                count: 1,
            });
    }
    if groups.is_empty() {
        return Err(Error::EmptyGroup("no probabilities to normalize".into()));
    }
    Ok(groups)
}

/// `100 * (p - p_min) / (p_max - p_min)`; a degenerate context maps everything to 0.
pub fn normalize(p: f64, ctx: &NormalizationContext) -> f64 {
    if ctx.is_degenerate() {
        return 0.0;
    }
    100.0 * ((p - ctx.p_min) / (ctx.p_max - ctx.p_min))
}

/// Values keyed by `(class, probe)`.
pub type ScoreTable = BTreeMap<(String, String), f64>;

/// Element-wise `woman - man` over identical key sets.
pub fn heatmap_diff(woman: &ScoreTable, man: &ScoreTable) -> Result<ScoreTable> {
    if woman.len() != man.len() || woman.keys().zip(man.keys()).any(|(a, b)| a != b) {
        let w: BTreeSet<_> = woman.keys().collect();
        let m: BTreeSet<_> = man.keys().collect();
        let missing = w
            .symmetric_difference(&m)
            .next()
            .map(|(c, p)| format!("({c}, {p})"))
            .unwrap_or_default();
        return Err(Error::KeyMismatch(format!(
            "woman and man tables differ at {missing}"
        )));
    }
    Ok(woman
        .iter()
        .zip(man.values())
        .map(|(((class, probe), w), m)| ((class.clone(), probe.clone()), w - m))
        .collect())
}

pub const WOMAN_SUFFIX: &str = "_woman";
pub const MAN_SUFFIX: &str = "_man";

/// Splits a mixed-schema table into (woman, man) tables keyed by base class.
/// Keys without a gender suffix are dropped.
pub fn split_by_gender(table: &ScoreTable) -> (ScoreTable, ScoreTable) {
    let mut woman = ScoreTable::new();
    let mut man = ScoreTable::new();
    for ((class, probe), v) in table {
        // `_woman` must be tested first: it also ends in `man`.
        if let Some(base) = class.strip_suffix(WOMAN_SUFFIX) {
            woman.insert((base.to_string(), probe.clone()), *v);
        } else if let Some(base) = class.strip_suffix(MAN_SUFFIX) {
            man.insert((base.to_string(), probe.clone()), *v);
        }
    }
    (woman, man)
}

/// Mean probe probability of `class` over the scenarios of each requested probe type.
pub fn probe_type_aggregate(
    tables: &[(&PredictionTable, ProbeType)],
    class: &str,
    requested: &[ProbeType],
) -> Result<BTreeMap<ProbeType, f64>> {
    let mut out = BTreeMap::new();
    for &ty in requested {
        let values = tables
            .iter()
            .filter(|(_, t)| *t == ty)
            .map(|(table, _)| probe_probability(table, class))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::EmptyGroup(format!("no {ty} scenarios for `{class}`")));
        }
        out.insert(ty, values.iter().sum::<f64>() / values.len() as f64);
    }
    Ok(out)
}
