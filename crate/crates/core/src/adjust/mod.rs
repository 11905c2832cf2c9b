//! Post-hoc logit adjustment.
//!
//! A factor vector `alpha` (one entry per class plus one for the probe) scales
//! logits element-wise. It is learned by full-batch Adam on the mean softmax
//! cross-entropy of the adjusted logits over a small per-class training split,
//! starting from all ones. The epoch whose factors give the best training
//! accuracy is kept (epoch 0 included), and the result is scored by macro
//! average accuracy on the held-out remainder.

mod adam;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;

use crate::error::{Error, Result};
use crate::ingest::ScenarioDataset;
use crate::metrics::{macro_average_accuracy, overall_accuracy, predict, PredictionTable};
use crate::schema::{AdjustmentFactors, LogitRecord};

pub const DEFAULT_N_PER_CLASS: usize = 20;
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_RUNS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_per_class: usize,
    pub seed: u64,
    pub run_index: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            n_per_class: DEFAULT_N_PER_CLASS,
            seed: 0,
            run_index: 1,
        }
    }
}

/// Which training accuracy picks the returned epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    #[default]
    Overall,
    Macro,
}

impl FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overall" => Ok(SelectionMetric::Overall),
            "macro" => Ok(SelectionMetric::Macro),
            other => Err(Error::InvalidConfig(format!(
                "selection metric must be `overall` or `macro`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub selection: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            selection: SelectionMetric::Overall,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0) {
            return bad("beta1 must lie in (0, 1)");
        }
        if !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("beta2 must lie in (0, 1)");
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// Partitions a scenario into `n_per_class` training samples per class and a test remainder.
///
/// Within each class, sample ids are sorted and then sampled without
/// replacement by a ChaCha8 generator seeded with `seed` on stream
/// `run_index`. Both halves come back ordered by class, then sample id, so
/// the result does not depend on record order.
pub fn split(ds: &ScenarioDataset, spec: &SplitSpec) -> Result<(ScenarioDataset, ScenarioDataset)> {
    if spec.n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be at least 1".into()));
    }
    let classes = ds.manifest.schema.classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes.len()];
    for (i, rec) in ds.records.iter().enumerate() {
        by_class[rec.true_class].push(i);
    }
    for (class, members) in classes.iter().zip(&by_class) {
        if members.len() <= spec.n_per_class {
            return Err(Error::InsufficientClass {
                class: class.clone(),
                count: members.len(),
                required: spec.n_per_class,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.run_index);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut members in by_class {
        members.sort_by(|&a, &b| ds.records[a].sample_id.cmp(&ds.records[b].sample_id));
        let mut chosen = vec![false; members.len()];
        for k in index::sample(&mut rng, members.len(), spec.n_per_class) {
            chosen[k] = true;
        }
        for (k, idx) in members.into_iter().enumerate() {
            if chosen[k] {
                train.push(idx);
            } else {
                test.push(idx);
            }
        }
    }
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Records in sample-id order so sums do not depend on record order.
fn canonical(ds: &ScenarioDataset) -> Vec<&LogitRecord> {
    let mut recs: Vec<&LogitRecord> = ds.records.iter().collect();
    recs.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    recs
}

fn check_alpha(ds: &ScenarioDataset, alpha: &[f64]) -> Result<()> {
    let width = ds.manifest.width();
    if alpha.len() != width {
        return Err(Error::LengthMismatch {
            expected: width,
            actual: alpha.len(),
        });
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Fills `scaled` with `alpha * z` and returns its log-sum-exp, shifted by the max.
fn scaled_lse(z: &[f64], alpha: &[f64], scaled: &mut Vec<f64>) -> f64 {
    scaled.clear();
    scaled.extend(z.iter().zip(alpha).map(|(z, a)| a * z));
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

fn loss_of(recs: &[&LogitRecord], alpha: &[f64]) -> f64 {
    let mut scaled = Vec::with_capacity(alpha.len());
    let total: f64 = recs
        .iter()
        .map(|rec| {
            let lse = scaled_lse(&rec.logits, alpha, &mut scaled);
            lse - scaled[rec.true_class]
        })
        .sum();
    total / recs.len() as f64
}

fn gradient_of(recs: &[&LogitRecord], alpha: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; alpha.len()];
    let mut scaled = Vec::with_capacity(alpha.len());
    for rec in recs {
        let lse = scaled_lse(&rec.logits, alpha, &mut scaled);
        for (c, (g, (s, z))) in grad
            .iter_mut()
            .zip(scaled.iter().zip(&rec.logits))
            .enumerate()
        {
            let p = (s - lse).exp();
            let indicator = if c == rec.true_class { 1.0 } else { 0.0 };
            *g += (p - indicator) * z;
        }
    }
    let m = recs.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    grad
}

/// Mean cross-entropy of `softmax(alpha * z)` against the true class.
pub fn loss(train: &ScenarioDataset, alpha: &[f64]) -> Result<f64> {
    check_alpha(train, alpha)?;
    Ok(loss_of(&canonical(train), alpha))
}

/// Gradient of [`loss`] with respect to `alpha`:
/// `g[c] = mean_n (p_n[c] - [c == y_n]) * z_n[c]`.
pub fn loss_gradient(train: &ScenarioDataset, alpha: &[f64]) -> Result<Vec<f64>> {
    check_alpha(train, alpha)?;
    Ok(gradient_of(&canonical(train), alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub loss: f64,
    pub overall_accuracy: f64,
    pub macro_accuracy: f64,
    pub alpha: Vec<f64>,
}

fn training_accuracies(train: &ScenarioDataset, alpha: &[f64]) -> Result<(f64, f64, PredictionTable)> {
    let table = predict(train, Some(alpha))?;
    let overall = overall_accuracy(&table)?;
    let macro_acc = macro_average_accuracy(&table)?;
    Ok((overall, macro_acc, table))
}

/// Learns adjustment factors on `train`.
///
/// Runs `cfg.epochs` full-batch Adam steps from all ones and returns the
/// snapshot with the highest training accuracy, earliest epoch on ties, along
/// with one trace entry per epoch (epoch 0 first).
pub fn fit(train: &ScenarioDataset, cfg: &TrainConfig) -> Result<(AdjustmentFactors, Vec<EpochTrace>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let recs = canonical(train);
    let width = train.manifest.width();
    let mut alpha = vec![1.0; width];
    let mut adam = Adam::new(
        width,
        cfg.learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_epsilon,
    );

    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    let record = |epoch: usize, alpha: &[f64], trace: &mut Vec<EpochTrace>| -> Result<()> {
        let (overall, macro_acc, _) = training_accuracies(train, alpha)?;
        trace.push(EpochTrace {
            epoch,
            loss: loss_of(&recs, alpha),
            overall_accuracy: overall,
            macro_accuracy: macro_acc,
            alpha: alpha.to_vec(),
        });
        Ok(())
    };
    record(0, &alpha, &mut trace)?;
    for epoch in 1..=cfg.epochs {
        let grad = gradient_of(&recs, &alpha);
        adam.step(&mut alpha, &grad);
        record(epoch, &alpha, &mut trace)?;
    }

    let score = |t: &EpochTrace| match cfg.selection {
        SelectionMetric::Overall => t.overall_accuracy,
        SelectionMetric::Macro => t.macro_accuracy,
    };
    let best = trace
        .iter()
        .fold(&trace[0], |best, t| if score(t) > score(best) { t } else { best });
    let factors = AdjustmentFactors {
        alpha: best.alpha.clone(),
        chosen_epoch: best.epoch,
        training_accuracy: score(best),
    };
    Ok((factors, trace))
}

/// Per-run baseline and adjusted test accuracies and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub baseline: Vec<f64>,
    pub adjusted: Vec<f64>,
    pub baseline_mean: f64,
    pub adjusted_mean: f64,
    /// `adjusted_mean - baseline_mean`
    pub improvement: f64,
}

impl RunSummary {
    pub fn from_runs(baseline: Vec<f64>, adjusted: Vec<f64>) -> Result<Self> {
        if baseline.is_empty() || baseline.len() != adjusted.len() {
            return Err(Error::LengthMismatch {
                expected: baseline.len().max(1),
                actual: adjusted.len(),
            });
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let baseline_mean = mean(&baseline);
        let adjusted_mean = mean(&adjusted);
        Ok(Self {
            improvement: adjusted_mean - baseline_mean,
            baseline,
            adjusted,
            baseline_mean,
            adjusted_mean,
        })
    }

    pub fn runs(&self) -> usize {
        self.baseline.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetail {
    pub run_index: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub factors: AdjustmentFactors,
    pub trace: Vec<EpochTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentResult {
    pub summary: RunSummary,
    pub runs: Vec<RunDetail>,
}

/// Splits, fits and scores `runs` times (run indices `1..=runs`).
///
/// `spec.run_index` is ignored; each run uses its own index as the sampling stream.
pub fn evaluate_adjustment(
    ds: &ScenarioDataset,
    spec: &SplitSpec,
    cfg: &TrainConfig,
    runs: usize,
) -> Result<AdjustmentResult> {
    if runs == 0 {
        return Err(Error::InvalidConfig("runs must be at least 1".into()));
    }
    cfg.validate()?;
    let mut baseline = Vec::with_capacity(runs);
    let mut adjusted = Vec::with_capacity(runs);
    let mut details = Vec::with_capacity(runs);
    for run_index in 1..=runs as u64 {
        let (train, test) = split(ds, &SplitSpec { run_index, ..*spec })?;
        let (factors, trace) = fit(&train, cfg)?;
        baseline.push(macro_average_accuracy(&predict(&test, None)?)?);
        adjusted.push(macro_average_accuracy(&predict(&test, Some(&factors.alpha))?)?);
        details.push(RunDetail {
            run_index,
            train_size: train.len(),
            test_size: test.len(),
            factors,
            trace,
        });
    }
    Ok(AdjustmentResult {
        summary: RunSummary::from_runs(baseline, adjusted)?,
        runs: details,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    NPerClass,
    LearningRate,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::NPerClass => "n",
            AblationAxis::LearningRate => "lr",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" | "n_per_class" => Ok(AblationAxis::NPerClass),
            "lr" | "learning_rate" => Ok(AblationAxis::LearningRate),
            other => Err(Error::InvalidConfig(format!(
                "ablation axis must be `n` or `lr`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug)]
pub struct AblationRow {
    pub value: f64,
    pub outcome: Result<RunSummary>,
}

#[derive(Debug)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

fn as_count(value: f64) -> Result<usize> {
    if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
        Ok(value as usize)
    } else {
        Err(Error::InvalidConfig(format!(
            "n_per_class must be a positive integer, got {value}"
        )))
    }
}

/// One [`evaluate_adjustment`] summary per axis value. A failing value is
/// reported in its row without affecting the others.
pub fn ablate(
    ds: &ScenarioDataset,
    axis: AblationAxis,
    values: &[f64],
    spec: &SplitSpec,
    cfg: &TrainConfig,
    runs: usize,
) -> Result<AblationTable> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one value".into()));
    }
    let rows = values
        .iter()
        .map(|&value| {
            let outcome = match axis {
                AblationAxis::NPerClass => as_count(value).and_then(|n| {
                    evaluate_adjustment(ds, &SplitSpec { n_per_class: n, ..*spec }, cfg, runs)
                }),
                AblationAxis::LearningRate => evaluate_adjustment(
                    ds,
                    spec,
                    &TrainConfig {
                        learning_rate: value,
                        ..*cfg
                    },
                    runs,
                ),
            };
            AblationRow {
                value,
                outcome: outcome.map(|r| r.summary),
            }
        })
        .collect();
    Ok(AblationTable { axis, rows })
}
