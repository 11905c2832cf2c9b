//! Shared fixtures, synthetic generators and independent oracles for the
//! integration and acceptance suites.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use probebias_core::ingest::ScenarioDataset;
use probebias_core::metrics::PredictionTable;
use probebias_core::schema::{mixed_schema, LabelSchema, LogitRecord, ScenarioManifest, PROBE_CATALOG};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixtures_dir() -> PathBuf {
    let here = Path::new(env!("CARGO_MANIFEST_DIR"));
    let own = here.join("tests/fixtures");
    if own.is_dir() {
        own
    } else {
        here.join("../core/tests/fixtures")
    }
}

/// Data rows of a fixture CSV (header dropped). Fixture fields never contain commas.
pub fn read_rows(name: &str) -> Vec<Vec<String>> {
    let path = fixtures_dir().join(name);
    let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// (model, probe, dataset, class) -> value for the per-class tables.
pub type ClassTable = BTreeMap<(String, String, String, String), f64>;

pub fn read_class_table(name: &str) -> ClassTable {
    read_rows(name)
        .into_iter()
        .map(|r| {
            let v: f64 = r[4].parse().unwrap();
            ((r[0].clone(), r[1].clone(), r[2].clone(), r[3].clone()), v)
        })
        .collect()
}

/// (model, probe, dataset) -> column -> value, for the per-run and ablation tables.
pub type RunTable = BTreeMap<(String, String, String), BTreeMap<String, f64>>;

pub fn read_run_table(name: &str) -> RunTable {
    let mut out = RunTable::new();
    for r in read_rows(name) {
        out.entry((r[0].clone(), r[1].clone(), r[2].clone()))
            .or_default()
            .insert(r[3].clone(), r[4].parse().unwrap());
    }
    out
}

/// Value in hundredths as an integer; fixture values carry at most two decimals.
pub fn hundredths(v: f64) -> i64 {
    (v * 100.0).round() as i64
}

/// Rounds to one decimal the way the tables print.
pub fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

pub fn catalog_probes() -> Vec<&'static str> {
    PROBE_CATALOG.iter().map(|(p, _)| *p).collect()
}

pub fn models() -> [&'static str; 4] {
    ["CLIP", "ALIGN", "BridgeTower", "OWLv2"]
}

/// Schemas keyed by the dataset spelling used in the tables.
pub fn mixed_schemas() -> Vec<LabelSchema> {
    [LabelSchema::utkface(), LabelSchema::fairface(), LabelSchema::idenprof()]
        .iter()
        .map(|s| mixed_schema(s).unwrap())
        .collect()
}

/// A scenario with `per_class` samples per class where exactly `probe_hits[c]`
/// samples of class `c` are predicted as the probe and the rest are correct.
/// Sample ids and logit noise come from `rng`.
pub fn scenario_with_probe_counts(
    manifest: ScenarioManifest,
    per_class: usize,
    probe_hits: &[usize],
    rng: &mut ChaCha8Rng,
) -> ScenarioDataset {
    let c = manifest.num_classes();
    assert_eq!(probe_hits.len(), c);
    let labels: Vec<String> = manifest.schema.classes().to_vec();
    let mut records = Vec::with_capacity(c * per_class);
    for (class, label) in labels.iter().enumerate() {
        for i in 0..per_class {
            let mut logits: Vec<f64> = (0..=c).map(|_| rng.gen_range(-1.0..0.0)).collect();
            logits[class] = rng.gen_range(2.0..3.0);
            if i < probe_hits[class] {
                logits[c] = logits[class] + rng.gen_range(0.5..1.5);
            }
            let id = format!("{}-{:05}", label.replace(' ', "_"), i);
            records.push(LogitRecord::new(&manifest, id, label, logits).unwrap());
        }
    }
    ScenarioDataset::new(manifest, records).unwrap()
}

/// Random scenario with `c` classes, `per_class` samples each and logits in `range`.
pub fn random_scenario(
    rng: &mut ChaCha8Rng,
    c: usize,
    per_class: usize,
    range: (f64, f64),
) -> ScenarioDataset {
    let classes = (0..c).map(|i| format!("class{i}")).collect();
    let schema = LabelSchema::new("Synthetic", classes, probebias_core::schema::Family::Single).unwrap();
    let manifest = ScenarioManifest::with_catalog_probe("synthetic", schema, "criminal").unwrap();
    let mut records = Vec::new();
    for class in 0..c {
        for i in 0..per_class {
            let logits = (0..=c).map(|_| rng.gen_range(range.0..=range.1)).collect();
            records.push(LogitRecord::new(&manifest, format!("s{class}-{i:04}"), &format!("class{class}"), logits).unwrap());
        }
    }
    ScenarioDataset::new(manifest, records).unwrap()
}

/// Three classes, 200 samples each; the probe logit is the true-class logit plus one.
pub fn mitigation_scenario(rng: &mut ChaCha8Rng) -> ScenarioDataset {
    let classes = vec!["a".to_string(), "b".to_string(), "c".to_string()];
    let schema = LabelSchema::new("Synthetic", classes, probebias_core::schema::Family::Single).unwrap();
    let manifest = ScenarioManifest::with_catalog_probe("synthetic", schema, "criminal").unwrap();
    let mut records = Vec::new();
    for class in 0..3 {
        for i in 0..200 {
            let t: f64 = rng.gen_range(24.0..26.0);
            let mut logits: Vec<f64> = (0..3).map(|_| t - rng.gen_range(1.0..3.0)).collect();
            logits[class] = t;
            logits.push(t + 1.0);
            let label = ["a", "b", "c"][class];
            records.push(LogitRecord::new(&manifest, format!("{label}{i:03}"), label, logits).unwrap());
        }
    }
    ScenarioDataset::new(manifest, records).unwrap()
}

/// Textbook softmax cross-entropy, computed independently of the library.
pub fn cross_entropy_oracle(ds: &ScenarioDataset) -> f64 {
    let mut total = 0.0;
    for r in &ds.records {
        let m = r.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = r.logits.iter().map(|z| (z - m).exp()).sum();
        let p = (r.logits[r.true_class] - m).exp() / denom;
        total += -p.ln();
    }
    total / ds.records.len() as f64
}

/// Central finite differences of `f` at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += h;
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// A random prediction table with `c` classes of 0..=max samples each, and
/// the (true, predicted) pairs it was built from.
pub fn random_table(rng: &mut ChaCha8Rng, c: usize, max: usize) -> (PredictionTable, Vec<(usize, usize)>) {
    let classes: Vec<String> = (0..c).map(|i| format!("k{i}")).collect();
    let mut pairs = Vec::new();
    for class in 0..c {
        for _ in 0..rng.gen_range(0..=max) {
            pairs.push((class, rng.gen_range(0..=c)));
        }
    }
    let table = PredictionTable::from_predictions(classes, "probe".into(), pairs.iter().copied());
    (table, pairs)
}

/// Exact oracles computed by looping over the raw prediction list.
pub struct RationalOracle {
    pub overall: Option<Ratio<u64>>,
    pub probe: Vec<Option<Ratio<u64>>>,
    pub macro_avg: Option<Ratio<u64>>,
}

pub fn rational_oracle(t: &PredictionTable, pairs: &[(usize, usize)]) -> RationalOracle {
    let c = t.num_classes();
    let mut total = vec![0u64; c];
    let mut correct = vec![0u64; c];
    let mut probe = vec![0u64; c];
    for &(y, p) in pairs {
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
        if p == c {
            probe[y] += 1;
        }
    }
    let n: u64 = total.iter().sum();
    let overall = (n > 0).then(|| Ratio::new(correct.iter().sum(), n));
    let probe = (0..c)
        .map(|k| (total[k] > 0).then(|| Ratio::new(probe[k], total[k])))
        .collect();
    // a class without samples has no accuracy, so neither does the macro mean
    let macro_avg = (c > 0 && total.iter().all(|&n| n > 0)).then(|| {
        let sum = (0..c).fold(Ratio::from_integer(0u64), |acc, k| acc + Ratio::new(correct[k], total[k]));
        sum / Ratio::from_integer(c as u64)
    });
    RationalOracle { overall, probe, macro_avg }
}

pub fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Writes a corpus whose probe rates are the published raw per-class rates:
/// single-attribute scenarios for the four base datasets and mixed scenarios
/// for the three extended ones, `per_class` records per class.
pub fn write_fixture_corpus(root: &Path, models: &[&str], probes: &[&str], per_class: usize, seed: u64) -> usize {
    let single = read_class_table("single_raw.csv");
    let mut mixed = read_class_table("mixed_woman_raw.csv");
    mixed.extend(read_class_table("mixed_man_raw.csv"));
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut written = 0;
    let schemas = LabelSchema::builtins().into_iter().map(|s| (s, &single))
        .chain(mixed_schemas().into_iter().map(|s| (s, &mixed)));
    for (schema, rates) in schemas.collect::<Vec<_>>() {
        for model in models {
            for probe in probes {
                let hits: Vec<usize> = schema
                    .classes()
                    .iter()
                    .map(|class| {
                        let key = (model.to_string(), probe.to_string(), schema.dataset().to_string(), class.clone());
                        (rates[&key] / 100.0 * per_class as f64).round() as usize
                    })
                    .collect();
                let manifest = ScenarioManifest::with_catalog_probe(*model, schema.clone(), probe).unwrap();
                let ds = scenario_with_probe_counts(manifest, per_class, &hits, &mut rng);
                probebias_core::ingest::write_scenario(root, &ds).unwrap();
                written += 1;
            }
        }
    }
    written
}
