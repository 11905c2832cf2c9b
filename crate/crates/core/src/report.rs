//! Corpus-level orchestration and table output.
//!
//! Tables are written as `<family>_<kind>_<model>[_<dataset>].<ext>`. Probe
//! columns follow catalog order (negatives, neutrals, positives) with custom
//! probes appended alphabetically; classes follow schema order; datasets are
//! sorted by name. Nothing depends on map iteration or directory order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::adjust::{
    ablate, evaluate_adjustment, AblationAxis, AdjustmentResult, RunSummary, SplitSpec,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::ingest::{discover, load_scenarios, ScenarioDataset, ScenarioPaths};
use crate::metrics::{
    heatmap_diff, normalize, overall_accuracy, predict, probe_type_aggregate, split_by_gender,
    build_normalization, NormalizationContext, NormalizationKey, NormalizationScope,
    PredictionTable, ScoreTable,
};
use crate::schema::{catalog_index, Family, ProbeType};

/// Which scenarios of a corpus to include. Empty lists mean "all"; names
/// match without regard to ASCII case.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    pub probes: Vec<String>,
}

impl Selection {
    fn admits(&self, model: &str, dataset: &str, probe: &str) -> bool {
        let ok = |list: &[String], v: &str| {
            list.is_empty() || list.iter().any(|x| x.eq_ignore_ascii_case(v))
        };
        ok(&self.models, model) && ok(&self.datasets, dataset) && ok(&self.probes, probe)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub selection: Selection,
    pub scope: NormalizationScope,
}

/// Metrics of one evaluated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub dataset: String,
    pub probe: String,
    pub probe_type: ProbeType,
    pub table: PredictionTable,
    pub accuracy: f64,
    /// Per class, in schema order; `None` for a class without samples.
    pub probe_probability: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn scenario_id(&self) -> String {
        format!("{}/{}/{}", self.model, self.dataset, self.probe)
    }
}

/// A rendered table. Cells are already in display units (percent or score).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub family: Family,
    pub kind: String,
    pub model: String,
    pub dataset: Option<String>,
    pub decimals: usize,
    pub row_header: String,
    /// What the columns are (`probe`, `dataset`, `run`, ...); names the column key in structured output.
    pub column_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl Table {
    pub fn file_stem(&self) -> String {
        let mut stem = format!(
            "{}_{}_{}",
            self.family,
            sanitize(&self.kind),
            sanitize(&self.model)
        );
        if let Some(ds) = &self.dataset {
            stem.push('_');
            stem.push_str(&sanitize(ds));
        }
        stem
    }

    pub fn cell(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(r, _)| r == row)?.1[c]
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-.".contains(c) { c } else { '-' })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioFailure {
    pub scenario: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct ReportBundle {
    pub family: Option<Family>,
    pub scenarios: Vec<MetricsReport>,
    pub normalization: BTreeMap<NormalizationKey, NormalizationContext>,
    pub adjustments: Vec<(String, AdjustmentResult)>,
    pub tables: Vec<Table>,
    pub failures: Vec<ScenarioFailure>,
    pub diagnostics: Vec<String>,
}

impl ReportBundle {
    pub fn table(&self, kind: &str, model: &str, dataset: Option<&str>) -> Option<&Table> {
        self.tables
            .iter()
            .find(|t| t.kind == kind && t.model == model && t.dataset.as_deref() == dataset)
    }

    pub fn has_failures(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Probe names in reporting order: catalog first, then custom probes by name.
pub fn probe_order<'a>(probes: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<&str> = probes.into_iter().collect();
    let mut ordered: Vec<&str> = set.into_iter().collect();
    ordered.sort_by_key(|p| (catalog_index(p).unwrap_or(usize::MAX), p.to_string()));
    ordered.into_iter().map(str::to_string).collect()
}

fn to_pct(v: f64) -> f64 {
    100.0 * v
}

/// Discovers and loads the scenarios of a corpus admitted by `selection`.
pub fn load_selected(
    corpus: &Path,
    selection: &Selection,
) -> Result<Vec<(ScenarioPaths, Result<ScenarioDataset>)>> {
    let paths = discover(corpus)?
        .into_iter()
        .filter(|p| selection.admits(&p.model, &p.dataset, &p.probe))
        .collect();
    Ok(load_scenarios(paths))
}

/// Splits loaded scenarios into those of `family` and failures; other families are skipped.
fn partition_family(
    loaded: Vec<(ScenarioPaths, Result<ScenarioDataset>)>,
    family: Family,
) -> (Vec<ScenarioDataset>, Vec<ScenarioFailure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (paths, result) in loaded {
        match result {
            Ok(ds) if ds.manifest.family() == family => ok.push(ds),
            Ok(_) => {}
            Err(e) => failed.push(ScenarioFailure {
                scenario: paths.id(),
                error: format!("{}: {e}", e.kind()),
            }),
        }
    }
    (ok, failed)
}

/// Loads one test family from a corpus and computes its metric tables.
pub fn run_family(corpus: &Path, family: Family, options: &RunOptions) -> Result<ReportBundle> {
    let loaded = load_selected(corpus, &options.selection)?;
    let (datasets, failures) = partition_family(loaded, family);
    let mut bundle = assemble_family(family, &datasets, options.scope);
    bundle.failures.extend(failures);
    bundle.failures.sort_by(|a, b| a.scenario.cmp(&b.scenario));
    Ok(bundle)
}

fn evaluate_scenario(ds: &ScenarioDataset) -> Result<MetricsReport> {
    let table = predict(ds, None)?;
    let accuracy = overall_accuracy(&table)?;
    let probe_probability = (0..table.num_classes())
        .map(|c| {
            let n = table.class_total(c);
            (n > 0).then(|| table.class_probe(c) as f64 / n as f64)
        })
        .collect();
    Ok(MetricsReport {
        model: ds.manifest.model.clone(),
        dataset: ds.manifest.dataset().to_string(),
        probe: ds.manifest.probe.clone(),
        probe_type: ds.manifest.probe_type,
        table,
        accuracy,
        probe_probability,
    })
}

/// Computes metrics, normalization pools and tables for already-loaded scenarios.
pub fn assemble_family(
    family: Family,
    datasets: &[ScenarioDataset],
    scope: NormalizationScope,
) -> ReportBundle {
    let mut bundle = ReportBundle {
        family: Some(family),
        ..Default::default()
    };
    let evaluated: Vec<_> = datasets
        .par_iter()
        .filter(|ds| ds.manifest.family() == family)
        .map(|ds| (ds.manifest.scenario_id(), evaluate_scenario(ds)))
        .collect();
    for (id, result) in evaluated {
        match result {
            Ok(report) => {
                for (class, p) in report.table.classes().iter().zip(&report.probe_probability) {
                    if p.is_none() {
                        bundle
                            .diagnostics
                            .push(format!("{id}: class `{class}` has no samples"));
                    }
                }
                bundle.scenarios.push(report);
            }
            Err(e) => bundle.failures.push(ScenarioFailure {
                scenario: id,
                error: format!("{}: {e}", e.kind()),
            }),
        }
    }
    bundle.scenarios.sort_by_key(|s| s.scenario_id());

    let observations = bundle.scenarios.iter().flat_map(|s| {
        s.probe_probability.iter().flatten().map(move |&p| {
            (NormalizationKey::new(scope, &s.model, family, &s.dataset), p)
        })
    });
    bundle.normalization = build_normalization(observations).unwrap_or_default();
    for (key, ctx) in &bundle.normalization {
        if ctx.is_degenerate() {
            bundle.diagnostics.push(format!(
                "normalization pool {}/{}{} is degenerate (min = max = {}); its scores are 0",
                key.model,
                key.family,
                key.dataset.as_deref().map(|d| format!("/{d}")).unwrap_or_default(),
                ctx.p_min
            ));
        }
    }

    build_metric_tables(&mut bundle, family, scope);
    bundle
}

fn build_metric_tables(bundle: &mut ReportBundle, family: Family, scope: NormalizationScope) {
    let mut by_model: BTreeMap<&str, BTreeMap<&str, Vec<&MetricsReport>>> = BTreeMap::new();
    for s in &bundle.scenarios {
        by_model
            .entry(&s.model)
            .or_default()
            .entry(&s.dataset)
            .or_default()
            .push(s);
    }

    let mut tables = Vec::new();
    let mut diagnostics = Vec::new();
    for (model, datasets) in &by_model {
        let dataset_names: Vec<String> = datasets.keys().map(|d| d.to_string()).collect();
        let probes = probe_order(datasets.values().flatten().map(|s| s.probe.as_str()));

        // accuracy with the probe included: probes x datasets
        let accuracy_rows = probes
            .iter()
            .map(|probe| {
                let cells = datasets
                    .values()
                    .map(|list| {
                        list.iter().find(|s| &s.probe == probe).map(|s| to_pct(s.accuracy))
                    })
                    .collect();
                (probe.clone(), cells)
            })
            .collect();
        tables.push(Table {
            family,
            kind: "accuracy".into(),
            model: model.to_string(),
            dataset: None,
            decimals: 2,
            row_header: "probe".into(),
            column_header: "dataset".into(),
            columns: dataset_names,
            rows: accuracy_rows,
        });

        for (dataset, list) in datasets {
            let ds_probes = probe_order(list.iter().map(|s| s.probe.as_str()));
            let classes = class_order(list);
            let raw = score_table(list, &classes, |_, p| Some(to_pct(p)));
            let key = NormalizationKey::new(scope, model, family, dataset);
            let ctx = bundle.normalization.get(&key).copied();
            let normalized = score_table(list, &classes, |_, p| ctx.map(|c| normalize(p, &c)));

            let grid = |kind: &str, scores: &ScoreTable, row_classes: &[String]| Table {
                family,
                kind: kind.into(),
                model: model.to_string(),
                dataset: Some(dataset.to_string()),
                decimals: 1,
                row_header: "class".into(),
                column_header: "probe".into(),
                columns: ds_probes.clone(),
                rows: row_classes
                    .iter()
                    .map(|class| {
                        let cells = ds_probes
                            .iter()
                            .map(|probe| scores.get(&(class.clone(), probe.clone())).copied())
                            .collect();
                        (class.clone(), cells)
                    })
                    .collect(),
            };
            tables.push(grid("probe", &raw, &classes));
            tables.push(grid("normalized", &normalized, &classes));

            if family == Family::Mixed {
                let (woman, man) = split_by_gender(&normalized);
                match heatmap_diff(&woman, &man) {
                    Ok(diff) => {
                        let bases: Vec<String> = classes
                            .iter()
                            .filter_map(|c| c.strip_suffix(crate::metrics::WOMAN_SUFFIX))
                            .map(str::to_string)
                            .collect();
                        tables.push(grid("heatmap", &diff, &bases));
                    }
                    Err(e) => diagnostics.push(format!("{model}/{dataset}: heatmap skipped: {e}")),
                }
            }

            if let Some(t) = type_aggregate_table(family, model, dataset, list, &classes) {
                tables.push(t);
            }
        }
    }

    // probe-type means pooled over every model in the bundle
    let mut pooled: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    for s in &bundle.scenarios {
        pooled.entry(&s.dataset).or_default().push(s);
    }
    if by_model.len() > 1 {
        for (dataset, list) in &pooled {
            let classes = class_order(list);
            if let Some(t) = type_aggregate_table(family, "pooled", dataset, list, &classes) {
                tables.push(t);
            }
        }
    }

    bundle.tables.extend(tables);
    bundle.diagnostics.extend(diagnostics);
}

fn class_order(list: &[&MetricsReport]) -> Vec<String> {
    let mut classes: Vec<String> = Vec::new();
    for s in list {
        for c in s.table.classes() {
            if !classes.contains(c) {
                classes.push(c.clone());
            }
        }
    }
    classes
}

fn score_table(
    list: &[&MetricsReport],
    classes: &[String],
    f: impl Fn(&str, f64) -> Option<f64>,
) -> ScoreTable {
    let mut out = ScoreTable::new();
    for s in list {
        for (class, p) in s.table.classes().iter().zip(&s.probe_probability) {
            if let Some(v) = p.and_then(|p| f(class, p)) {
                if classes.contains(class) {
                    out.insert((class.clone(), s.probe.clone()), v);
                }
            }
        }
    }
    out
}

fn type_aggregate_table(
    family: Family,
    model: &str,
    dataset: &str,
    list: &[&MetricsReport],
    classes: &[String],
) -> Option<Table> {
    let present: Vec<ProbeType> = ProbeType::ALL
        .into_iter()
        .filter(|ty| list.iter().any(|s| s.probe_type == *ty))
        .collect();
    if present.is_empty() {
        return None;
    }
    let rows = classes
        .iter()
        .map(|class| {
            let tables: Vec<(&PredictionTable, ProbeType)> = list
                .iter()
                .filter(|s| s.table.classes().contains(class))
                .map(|s| (&s.table, s.probe_type))
                .collect();
            let cells = present
                .iter()
                .map(|ty| {
                    probe_type_aggregate(&tables, class, &[*ty])
                        .ok()
                        .map(|m| to_pct(m[ty]))
                })
                .collect();
            (class.clone(), cells)
        })
        .collect();
    Some(Table {
        family,
        kind: "typeagg".into(),
        model: model.to_string(),
        dataset: Some(dataset.to_string()),
        decimals: 1,
        row_header: "class".into(),
        column_header: "probe_type".into(),
        columns: present.iter().map(|t| t.to_string()).collect(),
        rows,
    })
}

/// Adjustment settings shared by every scenario of a run.
#[derive(Debug, Clone, Copy)]
pub struct AdjustOptions {
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub runs: usize,
}

/// Runs [`evaluate_adjustment`] on every selected scenario of `family`.
pub fn run_adjust(
    corpus: &Path,
    family: Family,
    selection: &Selection,
    options: &AdjustOptions,
) -> Result<ReportBundle> {
    let loaded = load_selected(corpus, selection)?;
    let (datasets, failures) = partition_family(loaded, family);
    let mut bundle = assemble_adjustment(family, &datasets, options);
    bundle.failures.extend(failures);
    bundle.failures.sort_by(|a, b| a.scenario.cmp(&b.scenario));
    Ok(bundle)
}

pub fn assemble_adjustment(
    family: Family,
    datasets: &[ScenarioDataset],
    options: &AdjustOptions,
) -> ReportBundle {
    let mut bundle = ReportBundle {
        family: Some(family),
        ..Default::default()
    };
    let results: Vec<_> = datasets
        .par_iter()
        .filter(|ds| ds.manifest.family() == family)
        .map(|ds| {
            let result = evaluate_adjustment(ds, &options.split, &options.train, options.runs);
            (ds, result)
        })
        .collect();

    let mut done: Vec<(&ScenarioDataset, AdjustmentResult)> = Vec::new();
    for (ds, result) in results {
        match result {
            Ok(r) => done.push((ds, r)),
            Err(e) => bundle.failures.push(ScenarioFailure {
                scenario: ds.manifest.scenario_id(),
                error: format!("{}: {e}", e.kind()),
            }),
        }
    }
    done.sort_by_key(|(ds, _)| ds.manifest.scenario_id());

    let mut grouped: BTreeMap<(String, String), Vec<&(&ScenarioDataset, AdjustmentResult)>> =
        BTreeMap::new();
    for entry in &done {
        let m = &entry.0.manifest;
        grouped
            .entry((m.model.clone(), m.dataset().to_string()))
            .or_default()
            .push(entry);
    }

    let run_columns: Vec<String> = (1..=options.runs)
        .map(|i| format!("test{i}"))
        .chain(std::iter::once("Avg".to_string()))
        .collect();
    let mut improvement: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>> =
        BTreeMap::new();
    for ((model, dataset), entries) in &grouped {
        let probes = probe_order(entries.iter().map(|(ds, _)| ds.manifest.probe.as_str()));
        let lookup = |probe: &str| {
            entries
                .iter()
                .find(|(ds, _)| ds.manifest.probe == probe)
                .map(|(_, r)| &r.summary)
        };
        for (kind, pick) in [
            ("adjusted", (|s: &RunSummary| (&s.adjusted, s.adjusted_mean)) as fn(&RunSummary) -> (&Vec<f64>, f64)),
            ("baseline", |s: &RunSummary| (&s.baseline, s.baseline_mean)),
        ] {
            let rows = probes
                .iter()
                .map(|probe| {
                    let s = lookup(probe).expect("probe present in group");
                    let (runs, mean) = pick(s);
                    let cells = runs
                        .iter()
                        .chain(std::iter::once(&mean))
                        .map(|v| Some(to_pct(*v)))
                        .collect();
                    (probe.clone(), cells)
                })
                .collect();
            bundle.tables.push(Table {
                family,
                kind: kind.into(),
                model: model.clone(),
                dataset: Some(dataset.clone()),
                decimals: 2,
                row_header: "probe".into(),
                column_header: "run".into(),
                columns: run_columns.clone(),
                rows,
            });
        }

        // learned factors per probe and run
        let first = &entries[0].0.manifest;
        let mut factor_columns: Vec<String> = first.schema.classes().to_vec();
        factor_columns.push("probe_label".into());
        factor_columns.push("chosen_epoch".into());
        let mut factor_rows = Vec::new();
        for probe in &probes {
            let (_, result) = entries
                .iter()
                .find(|(ds, _)| &ds.manifest.probe == probe)
                .expect("probe present in group");
            for run in &result.runs {
                let mut cells: Vec<Option<f64>> =
                    run.factors.alpha.iter().map(|a| Some(*a)).collect();
                cells.push(Some(run.factors.chosen_epoch as f64));
                factor_rows.push((format!("{probe}/run{}", run.run_index), cells));
            }
        }
        bundle.tables.push(Table {
            family,
            kind: "factors".into(),
            model: model.clone(),
            dataset: Some(dataset.clone()),
            decimals: 4,
            row_header: "scenario".into(),
            column_header: "label".into(),
            columns: factor_columns,
            rows: factor_rows,
        });

        for probe in &probes {
            let s = lookup(probe).expect("probe present in group");
            improvement
                .entry(model.clone())
                .or_default()
                .entry(probe.clone())
                .or_default()
                .insert(dataset.clone(), to_pct(s.improvement));
        }
    }

    for (model, by_probe) in improvement {
        let datasets: Vec<String> = by_probe
            .values()
            .flat_map(|m| m.keys().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let probes = probe_order(by_probe.keys().map(String::as_str));
        let rows = probes
            .iter()
            .map(|p| {
                let cells = datasets.iter().map(|d| by_probe[p].get(d).copied()).collect();
                (p.clone(), cells)
            })
            .collect();
        bundle.tables.push(Table {
            family,
            kind: "improvement".into(),
            model,
            dataset: None,
            decimals: 2,
            row_header: "probe".into(),
            column_header: "dataset".into(),
            columns: datasets,
            rows,
        });
    }

    bundle.adjustments = done
        .into_iter()
        .map(|(ds, r)| (ds.manifest.scenario_id(), r))
        .collect();
    bundle
}

/// Ablation over one axis for every selected scenario of `family`.
pub fn run_ablation(
    corpus: &Path,
    family: Family,
    selection: &Selection,
    options: &AdjustOptions,
    axis: AblationAxis,
    values: &[f64],
) -> Result<ReportBundle> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one value".into()));
    }
    let loaded = load_selected(corpus, selection)?;
    let (datasets, failures) = partition_family(loaded, family);
    let mut bundle = assemble_ablation(family, &datasets, options, axis, values)?;
    bundle.failures.extend(failures);
    bundle.failures.sort_by(|a, b| a.scenario.cmp(&b.scenario));
    Ok(bundle)
}

/// Improvement per swept value, keyed by (dataset, probe).
type ScenarioRows = BTreeMap<(String, String), Vec<Option<f64>>>;

fn format_axis_value(axis: AblationAxis, v: f64) -> String {
    match axis {
        AblationAxis::NPerClass => format!("{}", v as u64),
        AblationAxis::LearningRate => format!("{v}"),
    }
}

/// Improvement tables for an ablation. The `n` axis gives probes x values per
/// dataset; the `lr` axis gives values x scenarios per model.
pub fn assemble_ablation(
    family: Family,
    datasets: &[ScenarioDataset],
    options: &AdjustOptions,
    axis: AblationAxis,
    values: &[f64],
) -> Result<ReportBundle> {
    let mut bundle = ReportBundle {
        family: Some(family),
        ..Default::default()
    };
    let mut selected: Vec<&ScenarioDataset> = datasets
        .iter()
        .filter(|ds| ds.manifest.family() == family)
        .collect();
    selected.sort_by_key(|ds| ds.manifest.scenario_id());
    let results = selected
        .par_iter()
        .map(|ds| {
            ablate(ds, axis, values, &options.split, &options.train, options.runs)
                .map(|t| (*ds, t))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells: BTreeMap<String, ScenarioRows> = BTreeMap::new();
    for (ds, table) in &results {
        let m = &ds.manifest;
        let mut row = Vec::with_capacity(values.len());
        for r in &table.rows {
            match &r.outcome {
                Ok(s) => row.push(Some(to_pct(s.improvement))),
                Err(e) => {
                    bundle.diagnostics.push(format!(
                        "{} at {}={}: {}: {e}",
                        m.scenario_id(),
                        axis,
                        format_axis_value(axis, r.value),
                        e.kind()
                    ));
                    row.push(None);
                }
            }
        }
        cells
            .entry(m.model.clone())
            .or_default()
            .insert((m.dataset().to_string(), m.probe.clone()), row);
    }

    let value_labels: Vec<String> = values.iter().map(|v| format_axis_value(axis, *v)).collect();
    let kind = format!("ablation-{axis}");
    for (model, scenarios) in cells {
        match axis {
            AblationAxis::NPerClass => {
                let by_dataset: BTreeSet<&String> = scenarios.keys().map(|(d, _)| d).collect();
                for dataset in by_dataset {
                    let probes = probe_order(
                        scenarios
                            .keys()
                            .filter(|(d, _)| d == dataset)
                            .map(|(_, p)| p.as_str()),
                    );
                    let rows = probes
                        .iter()
                        .map(|p| (p.clone(), scenarios[&(dataset.clone(), p.clone())].clone()))
                        .collect();
                    bundle.tables.push(Table {
                        family,
                        kind: kind.clone(),
                        model: model.clone(),
                        dataset: Some(dataset.clone()),
                        decimals: 2,
                        row_header: "probe".into(),
                        column_header: "n_per_class".into(),
                        columns: value_labels.clone(),
                        rows,
                    });
                }
            }
            AblationAxis::LearningRate => {
                let mut keys: Vec<&(String, String)> = scenarios.keys().collect();
                keys.sort_by_key(|(d, p)| (d.clone(), catalog_index(p).unwrap_or(usize::MAX), p.clone()));
                let columns = keys.iter().map(|(d, p)| format!("{d}/{p}")).collect();
                let rows = value_labels
                    .iter()
                    .enumerate()
                    .map(|(i, label)| (label.clone(), keys.iter().map(|k| scenarios[*k][i]).collect()))
                    .collect();
                bundle.tables.push(Table {
                    family,
                    kind: kind.clone(),
                    model: model.clone(),
                    dataset: None,
                    decimals: 2,
                    row_header: "learning_rate".into(),
                    column_header: "scenario".into(),
                    columns,
                    rows,
                });
            }
        }
    }
    Ok(bundle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Format {
    Csv,
    Markdown,
    Structured,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Markdown => "md",
            Format::Structured => "jsonl",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            "jsonl" | "json" | "structured" => Ok(Format::Structured),
            other => Err(Error::InvalidConfig(format!("unknown format `{other}`"))),
        }
    }
}

/// Fixed-precision rendering; negative zero prints as zero.
pub fn format_value(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cell_text(v: &Option<f64>, decimals: usize) -> String {
    v.map(|v| format_value(v, decimals)).unwrap_or_default()
}

pub fn render_csv(t: &Table) -> String {
    let mut out = String::new();
    let header: Vec<String> = std::iter::once(&t.row_header)
        .chain(&t.columns)
        .map(|h| csv_field(h))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (row, cells) in &t.rows {
        let line: Vec<String> = std::iter::once(csv_field(row))
            .chain(cells.iter().map(|c| cell_text(c, t.decimals)))
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn render_markdown(t: &Table) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "## {} {}: {}{}\n",
        t.family,
        t.kind,
        t.model,
        t.dataset.as_deref().map(|d| format!(" / {d}")).unwrap_or_default()
    );
    let header: Vec<&str> = std::iter::once(t.row_header.as_str())
        .chain(t.columns.iter().map(String::as_str))
        .collect();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", " --- |".repeat(header.len()));
    for (row, cells) in &t.rows {
        let texts: Vec<String> = cells.iter().map(|c| cell_text(c, t.decimals)).collect();
        let _ = writeln!(out, "| {} | {} |", row, texts.join(" | "));
    }
    out
}

/// One object per cell, keyed by the table's own row and column headers.
pub fn render_structured(t: &Table) -> String {
    let mut out = String::new();
    for (row, cells) in &t.rows {
        for (column, value) in t.columns.iter().zip(cells) {
            let mut cell = serde_json::Map::new();
            cell.insert("family".into(), t.family.as_str().into());
            cell.insert("kind".into(), t.kind.as_str().into());
            cell.insert("model".into(), t.model.as_str().into());
            if let Some(ds) = &t.dataset {
                cell.insert("dataset".into(), ds.as_str().into());
            }
            cell.insert(t.row_header.clone(), row.as_str().into());
            cell.insert(t.column_header.clone(), column.as_str().into());
            cell.insert("value".into(), (*value).into());
            cell.insert(
                "rounded".into(),
                value.map(|v| format_value(v, t.decimals)).into(),
            );
            out.push_str(&serde_json::Value::Object(cell).to_string());
            out.push('\n');
        }
    }
    out
}

fn render(t: &Table, format: Format) -> String {
    match format {
        Format::Csv => render_csv(t),
        Format::Markdown => render_markdown(t),
        Format::Structured => render_structured(t),
    }
}

fn diagnostics_text(bundle: &ReportBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenarios: {} evaluated, {} failed",
        bundle.scenarios.len().max(bundle.adjustments.len()),
        bundle.failures.len()
    );
    for (key, ctx) in &bundle.normalization {
        let _ = writeln!(
            out,
            "normalization {}/{}{}: min={} max={} n={}",
            key.model,
            key.family,
            key.dataset.as_deref().map(|d| format!("/{d}")).unwrap_or_default(),
            ctx.p_min,
            ctx.p_max,
            ctx.count
        );
    }
    for f in &bundle.failures {
        let _ = writeln!(out, "failed {}: {}", f.scenario, f.error);
    }
    for d in &bundle.diagnostics {
        let _ = writeln!(out, "note {d}");
    }
    out
}

/// Writes every table in every requested format plus a diagnostics file.
/// Returns the written paths in write order.
pub fn emit(bundle: &ReportBundle, out_dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let formats: BTreeSet<Format> = formats.iter().copied().collect();
    let mut tables: Vec<&Table> = bundle.tables.iter().collect();
    tables.sort_by_key(|t| t.file_stem());

    let mut written = Vec::new();
    for t in tables {
        for &format in &formats {
            let path = out_dir.join(format!("{}.{}", t.file_stem(), format.extension()));
            fs::write(&path, render(t, format)).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    let prefix = bundle.family.map(|f| format!("{f}_")).unwrap_or_default();
    let path = out_dir.join(format!("{prefix}diagnostics.txt"));
    fs::write(&path, diagnostics_text(bundle)).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
