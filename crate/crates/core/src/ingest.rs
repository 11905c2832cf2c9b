//! Reading scenario manifests and line-delimited logit records.
//!
//! Corpus layout is `<corpus>/<model>/<dataset>/<probe>.manifest` next to
//! `<probe>.records`. A records file holds one JSON object per line with
//! `sample_id`, `true_label` and either `logits` (manifest order, or an object
//! keyed by label) or `box_logits` (one row per detected box).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::schema::{
    Family, LabelSchema, LogitRecord, ProbeRegistry, ProbeType, ScenarioManifest,
    DEFAULT_PROMPT_TEMPLATE,
};

pub const MANIFEST_EXT: &str = "manifest";
pub const RECORDS_EXT: &str = "records";

/// A validated scenario: its manifest and every sample's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDataset {
    pub manifest: ScenarioManifest,
    pub records: Vec<LogitRecord>,
}

impl ScenarioDataset {
    /// Checks record widths, finiteness, class indices and sample id uniqueness.
    pub fn new(manifest: ScenarioManifest, records: Vec<LogitRecord>) -> Result<Self> {
        let width = manifest.width();
        let mut seen = HashSet::with_capacity(records.len());
        for rec in &records {
            if rec.logits.len() != width {
                return Err(Error::LengthMismatch {
                    expected: width,
                    actual: rec.logits.len(),
                });
            }
            if rec.true_class >= manifest.num_classes() {
                return Err(Error::UnknownClass(format!("class index {}", rec.true_class)));
            }
            if rec.logits.iter().any(|z| !z.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "sample `{}` has a non-finite logit",
                    rec.sample_id
                )));
            }
            if !seen.insert(rec.sample_id.as_str()) {
                return Err(Error::DuplicateSample {
                    path: PathBuf::new(),
                    line: 0,
                    sample_id: rec.sample_id.clone(),
                });
            }
        }
        Ok(Self { manifest, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.manifest.num_classes()];
        for rec in &self.records {
            counts[rec.true_class] += 1;
        }
        counts
    }

    /// Classes with no records. Only adjustment requires every class to be present.
    pub fn empty_classes(&self) -> Vec<&str> {
        self.class_counts()
            .iter()
            .zip(self.manifest.schema.classes())
            .filter(|(n, _)| **n == 0)
            .map(|(_, c)| c.as_str())
            .collect()
    }

    /// New dataset with the same manifest holding the records at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            manifest: self.manifest.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

/// A detector sample: one logit row per predicted box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxLogitRecord {
    pub sample_id: String,
    pub true_class: usize,
    pub box_logits: Vec<Vec<f64>>,
}

/// Collapses the box dimension by taking the per-label mean over boxes.
///
/// Each column is summed in sorted order with a running mean, so the result
/// does not depend on box order and a matrix of identical rows returns that
/// row exactly.
pub fn aggregate_box_logits(rec: &BoxLogitRecord) -> Result<LogitRecord> {
    let first = rec
        .box_logits
        .first()
        .ok_or_else(|| Error::EmptyBoxes(rec.sample_id.clone()))?;
    let width = first.len();
    if let Some(row) = rec.box_logits.iter().find(|r| r.len() != width) {
        return Err(Error::LengthMismatch {
            expected: width,
            actual: row.len(),
        });
    }
    let mut column = Vec::with_capacity(rec.box_logits.len());
    let logits = (0..width)
        .map(|j| {
            column.clear();
            column.extend(rec.box_logits.iter().map(|row| row[j]));
            column.sort_by(f64::total_cmp);
            column
                .iter()
                .enumerate()
                .fold(0.0, |mean, (k, &x)| mean + (x - mean) / (k + 1) as f64)
        })
        .collect();
    Ok(LogitRecord {
        sample_id: rec.sample_id.clone(),
        true_class: rec.true_class,
        logits,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestWire {
    model: String,
    dataset: String,
    family: String,
    classes: Vec<String>,
    probe: String,
    probe_type: String,
    #[serde(default = "default_template")]
    prompt_template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    checkpoint: Option<String>,
}

fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordWire {
    sample_id: String,
    true_label: String,
    #[serde(default)]
    logits: Option<Value>,
    #[serde(default)]
    box_logits: Option<Vec<Vec<Value>>>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    sample_id: &'a str,
    true_label: &'a str,
    logits: &'a [f64],
}

/// Parses a manifest file. Custom probes are registered into `registry`.
pub fn load_manifest(path: &Path, registry: &mut ProbeRegistry) -> Result<ScenarioManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path, registry)
}

fn parse_manifest(text: &str, path: &Path, registry: &mut ProbeRegistry) -> Result<ScenarioManifest> {
    let wire: ManifestWire = serde_json::from_str(text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let family: Family = wire.family.parse()?;
    let probe_type: ProbeType = wire.probe_type.parse()?;
    registry.register(&wire.probe, probe_type)?;
    let schema = LabelSchema::new(wire.dataset, wire.classes, family)?;
    ScenarioManifest::new(wire.model, schema, wire.probe, probe_type, wire.prompt_template)
}

fn manifest_wire(manifest: &ScenarioManifest) -> ManifestWire {
    ManifestWire {
        model: manifest.model.clone(),
        dataset: manifest.dataset().to_string(),
        family: manifest.family().to_string(),
        classes: manifest.schema.classes().to_vec(),
        probe: manifest.probe.clone(),
        probe_type: manifest.probe_type.to_string(),
        prompt_template: manifest.prompt_template.clone(),
        checkpoint: None,
    }
}

fn logit_value(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        // JSON has no literal for NaN or infinities; accept their string spellings
        // so they are reported as non-finite rather than as malformed.
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
}

fn parse_row(
    values: &[Value],
    path: &Path,
    line: usize,
    width: usize,
) -> std::result::Result<Vec<f64>, Error> {
    if values.len() != width {
        return Err(Error::SchemaMismatch {
            path: path.to_path_buf(),
            line,
            message: format!("expected {width} logits, found {}", values.len()),
        });
    }
    let mut row = Vec::with_capacity(width);
    for (index, v) in values.iter().enumerate() {
        let z = logit_value(v).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            line,
            message: format!("logit {index} is not a number"),
        })?;
        if !z.is_finite() {
            return Err(Error::NonFiniteLogit {
                path: path.to_path_buf(),
                line,
                index,
            });
        }
        row.push(z);
    }
    Ok(row)
}

fn parse_record(
    text: &str,
    path: &Path,
    line: usize,
    manifest: &ScenarioManifest,
) -> Result<LogitRecord> {
    let wire: RecordWire = serde_json::from_str(text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    })?;
    let mismatch = |message: String| Error::SchemaMismatch {
        path: path.to_path_buf(),
        line,
        message,
    };
    let true_class = manifest.schema.class_index(&wire.true_label).ok_or_else(|| {
        if wire.true_label == manifest.probe {
            mismatch(format!("probe `{}` cannot be a true label", wire.true_label))
        } else {
            mismatch(format!("unknown true_label `{}`", wire.true_label))
        }
    })?;
    let width = manifest.width();
    match (wire.logits, wire.box_logits) {
        (Some(Value::Array(values)), None) => Ok(LogitRecord {
            sample_id: wire.sample_id,
            true_class,
            logits: parse_row(&values, path, line, width)?,
        }),
        (Some(Value::Object(map)), None) => {
            let mut values = Vec::with_capacity(width);
            for label in manifest.labels() {
                let v = map
                    .get(label)
                    .ok_or_else(|| mismatch(format!("missing logit for label `{label}`")))?;
                values.push(v.clone());
            }
            if let Some(extra) = map.keys().find(|k| !manifest.labels().any(|l| l == *k)) {
                return Err(mismatch(format!("logit for unknown label `{extra}`")));
            }
            Ok(LogitRecord {
                sample_id: wire.sample_id,
                true_class,
                logits: parse_row(&values, path, line, width)?,
            })
        }
        (None, Some(rows)) => {
            let box_logits = rows
                .iter()
                .map(|r| parse_row(r, path, line, width))
                .collect::<Result<Vec<_>>>()?;
            aggregate_box_logits(&BoxLogitRecord {
                sample_id: wire.sample_id,
                true_class,
                box_logits,
            })
        }
        (Some(_), None) => Err(Error::Format {
            path: path.to_path_buf(),
            line,
            message: "`logits` must be an array or an object".into(),
        }),
        (Some(_), Some(_)) | (None, None) => Err(Error::Format {
            path: path.to_path_buf(),
            line,
            message: "exactly one of `logits` or `box_logits` is required".into(),
        }),
    }
}

/// Parses every line, collecting per-line errors instead of stopping at the first.
fn parse_records(
    path: &Path,
    manifest: &ScenarioManifest,
) -> Result<(Vec<LogitRecord>, Vec<Error>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        match parse_record(&text, path, line_no, manifest) {
            Ok(rec) => {
                if seen.insert(rec.sample_id.clone()) {
                    records.push(rec);
                } else {
                    errors.push(Error::DuplicateSample {
                        path: path.to_path_buf(),
                        line: line_no,
                        sample_id: rec.sample_id,
                    });
                }
            }
            Err(e) => errors.push(e),
        }
    }
    Ok((records, errors))
}

/// Loads and validates one scenario, failing on the first invalid record.
pub fn load_scenario(manifest_path: &Path, records_path: &Path) -> Result<ScenarioDataset> {
    let mut registry = ProbeRegistry::new();
    let manifest = load_manifest(manifest_path, &mut registry)?;
    let (records, errors) = parse_records(records_path, &manifest)?;
    if let Some(err) = errors.into_iter().next() {
        return Err(err);
    }
    Ok(ScenarioDataset { manifest, records })
}

/// Writes a dataset in the wire format to `<root>/<model>/<dataset>/<probe>.{manifest,records}`.
pub fn write_scenario(root: &Path, ds: &ScenarioDataset) -> Result<ScenarioPaths> {
    let m = &ds.manifest;
    let dir = root.join(&m.model).join(m.dataset());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let paths = ScenarioPaths {
        model: m.model.clone(),
        dataset: m.dataset().to_string(),
        probe: m.probe.clone(),
        manifest: dir.join(format!("{}.{MANIFEST_EXT}", m.probe)),
        records: dir.join(format!("{}.{RECORDS_EXT}", m.probe)),
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest_wire(m)).expect("manifest serializes");
    fs::write(&paths.manifest, manifest_json + "\n").map_err(|e| Error::io(&paths.manifest, e))?;

    let mut out = std::io::BufWriter::new(
        fs::File::create(&paths.records).map_err(|e| Error::io(&paths.records, e))?,
    );
    let classes = m.schema.classes();
    for rec in &ds.records {
        let line = serde_json::to_string(&RecordOut {
            sample_id: &rec.sample_id,
            true_label: &classes[rec.true_class],
            logits: &rec.logits,
        })
        .expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(&paths.records, e))?;
    }
    out.flush().map_err(|e| Error::io(&paths.records, e))?;
    Ok(paths)
}

/// File locations of one scenario discovered in a corpus.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ScenarioPaths {
    pub model: String,
    pub dataset: String,
    pub probe: String,
    pub manifest: PathBuf,
    pub records: PathBuf,
}

impl ScenarioPaths {
    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.model, self.dataset, self.probe)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.retain(|e| !e.file_name().to_string_lossy().starts_with('.'));
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

fn is_dir(entry: &fs::DirEntry) -> bool {
    entry.file_type().map(|t| t.is_dir()).unwrap_or(false)
}

/// Scenario stems found under the corpus, in lexicographic order.
///
/// A stem is reported if either of its two files exists; a missing partner
/// surfaces later as an I/O diagnostic.
pub fn discover(corpus: &Path) -> Result<Vec<ScenarioPaths>> {
    let mut found = Vec::new();
    for model in sorted_entries(corpus)?.into_iter().filter(is_dir) {
        for dataset in sorted_entries(&model.path())?.into_iter().filter(is_dir) {
            let mut stems = BTreeMap::new();
            for file in sorted_entries(&dataset.path())? {
                let path = file.path();
                let ext = path.extension().and_then(|e| e.to_str());
                if !matches!(ext, Some(MANIFEST_EXT) | Some(RECORDS_EXT)) {
                    continue;
                }
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    stems.insert(stem.to_string(), ());
                }
            }
            let dir = dataset.path();
            for stem in stems.into_keys() {
                found.push(ScenarioPaths {
                    model: model.file_name().to_string_lossy().into_owned(),
                    dataset: dataset.file_name().to_string_lossy().into_owned(),
                    manifest: dir.join(format!("{stem}.{MANIFEST_EXT}")),
                    records: dir.join(format!("{stem}.{RECORDS_EXT}")),
                    probe: stem,
                });
            }
        }
    }
    Ok(found)
}

/// Outcome of validating one scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioCheck {
    pub scenario: String,
    pub diagnostics: Vec<String>,
}

impl ScenarioCheck {
    pub fn passed(&self) -> bool {
        self.diagnostics.is_empty()
    }
}

fn location_errors(paths: &ScenarioPaths, manifest: &ScenarioManifest) -> Vec<Error> {
    let mut errors = Vec::new();
    let pairs = [
        ("model", &paths.model, manifest.model.as_str()),
        ("dataset", &paths.dataset, manifest.dataset()),
        ("probe", &paths.probe, manifest.probe.as_str()),
    ];
    for (what, expected, actual) in pairs {
        if expected != actual {
            errors.push(Error::InvalidManifest(format!(
                "{}: {what} `{actual}` does not match its location `{expected}`",
                paths.manifest.display()
            )));
        }
    }
    errors
}

fn check_scenario(paths: &ScenarioPaths) -> Vec<Error> {
    let mut registry = ProbeRegistry::new();
    let manifest = match load_manifest(&paths.manifest, &mut registry) {
        Ok(m) => m,
        Err(e @ Error::Io { .. }) | Err(e @ Error::Format { .. }) => return vec![e],
        Err(e) => {
            return vec![Error::InvalidManifest(format!(
                "{}: {e}",
                paths.manifest.display()
            ))]
        }
    };
    let mut errors = location_errors(paths, &manifest);
    match parse_records(&paths.records, &manifest) {
        Ok((_, record_errors)) => errors.extend(record_errors),
        Err(e) => errors.push(e),
    }
    errors
}

/// Validates every scenario in the corpus, collecting all diagnostics.
///
/// Only failure to list the corpus directories is returned as an error.
pub fn validate_corpus(corpus: &Path) -> Result<Vec<ScenarioCheck>> {
    let scenarios = discover(corpus)?;
    Ok(scenarios
        .par_iter()
        .map(|paths| ScenarioCheck {
            scenario: paths.id(),
            diagnostics: check_scenario(paths)
                .into_iter()
                .map(|e| format!("{}: {e}", e.kind()))
                .collect(),
        })
        .collect())
}

/// Loads every discovered scenario in parallel; results keep discovery order.
pub fn load_corpus(corpus: &Path) -> Result<Vec<(ScenarioPaths, Result<ScenarioDataset>)>> {
    Ok(load_scenarios(discover(corpus)?))
}

/// Loads the given scenarios in parallel, checking each manifest against its location.
pub fn load_scenarios(
    scenarios: Vec<ScenarioPaths>,
) -> Vec<(ScenarioPaths, Result<ScenarioDataset>)> {
    scenarios
        .into_par_iter()
        .map(|paths| {
            let loaded = load_scenario(&paths.manifest, &paths.records).and_then(|ds| {
                match location_errors(&paths, &ds.manifest).into_iter().next() {
                    Some(e) => Err(e),
                    None => Ok(ds),
                }
            });
            (paths, loaded)
        })
        .collect()
}
