//! Deterministic report writers for experiment bundles.
//!
//! Every artifact is rendered in memory with a fixed column or key order
//! and written in one shot; the sink records a SHA-256 per file for the
//! run manifest. Identical inputs therefore produce byte-identical
//! bundles.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{split_tokens, LabelSet};
use crate::error::{Error, Result};
use crate::faithfulness::{
    aggregate, Aggregate, CurveStep, Direction, PerturbationCurve, FRACTIONS,
};
use crate::saliency::SaliencyMap;
use crate::textsim;

/// Output directory plus the content hash of every file written into it.
pub struct Sink {
    out_dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Sink {
    pub fn new(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        Ok(Sink {
            out_dir: out_dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.out_dir.join(name), bytes)?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Hashes and records a file another component wrote into the output
    /// directory (such as a model checkpoint).
    pub fn register(&mut self, name: &str) -> Result<()> {
        let bytes = fs::read(self.out_dir.join(name))?;
        self.files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Saliency maps for one text, in method order.
pub type MethodMaps = Vec<(String, SaliencyMap)>;

#[derive(Serialize)]
struct SaliencyRow<'a> {
    text_id: &'a str,
    method: &'a str,
    token_index: usize,
    token: &'a str,
    weight: f64,
}

/// Renders `saliency.csv`: one row per text, method, and token, in corpus
/// and configured method order.
pub fn saliency_csv(maps: &[(String, MethodMaps)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (text_id, methods) in maps {
        for (method, map) in methods {
            for (i, (token, weight)) in map.tokens.iter().zip(&map.weights).enumerate() {
                w.serialize(SaliencyRow {
                    text_id,
                    method,
                    token_index: i,
                    token,
                    weight: *weight,
                })?;
            }
        }
    }
    Ok(w.into_inner().expect("csv into a Vec cannot fail"))
}

#[derive(Deserialize)]
struct SaliencyRowOwned {
    text_id: String,
    method: String,
    token_index: usize,
    token: String,
    weight: f64,
}

/// Reads maps back from `saliency.csv`, grouped per text in file order.
///
/// Weights are taken verbatim (no renormalization), so curves rerun from
/// a saved CSV mask in exactly the original order.
pub fn read_saliency_csv(bytes: &[u8]) -> Result<Vec<(String, MethodMaps)>> {
    type RawMaps = Vec<(String, Vec<String>, Vec<f64>)>;
    let mut reader = csv::Reader::from_reader(bytes);
    let mut groups: Vec<(String, RawMaps)> = Vec::new();
    for (i, row) in reader.deserialize::<SaliencyRowOwned>().enumerate() {
        let row = row?;
        if !groups.last().is_some_and(|(id, _)| *id == row.text_id) {
            groups.push((row.text_id.clone(), Vec::new()));
        }
        let methods = &mut groups.last_mut().unwrap().1;
        if !methods.last().is_some_and(|(m, _, _)| *m == row.method) {
            methods.push((row.method.clone(), Vec::new(), Vec::new()));
        }
        let (_, tokens, weights) = methods.last_mut().unwrap();
        if row.token_index != tokens.len() {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!(
                    "token index {} out of order (expected {})",
                    row.token_index,
                    tokens.len()
                ),
            });
        }
        tokens.push(row.token);
        weights.push(row.weight);
    }
    let mut out = Vec::new();
    for (text_id, methods) in groups {
        let mut maps = Vec::new();
        for (method, tokens, weights) in methods {
            maps.push((method.clone(), SaliencyMap::from_normalized(tokens, weights, &method)?));
        }
        out.push((text_id, maps));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub text_id: String,
    pub method_a: String,
    pub method_b: String,
    pub pearson_r: f64,
}

/// Renders `correlations.csv`: one Pearson r per text and method pair.
/// Pairs excluded for zero variance are absent; the exclusion count lives
/// in the summary.
pub fn correlations_csv(rows: &[CorrelationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    Ok(w.into_inner().expect("csv into a Vec cannot fail"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CurveRow {
    text_id: String,
    method: String,
    direction: String,
    fraction: f64,
    label: String,
    flipped: bool,
}

/// Renders `curves.csv`: the six steps of every perturbation curve.
pub fn curves_csv(curves: &[PerturbationCurve]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for curve in curves {
        for step in &curve.steps {
            w.serialize(CurveRow {
                text_id: curve.text_id.clone(),
                method: curve.method.clone(),
                direction: curve.direction.as_str().to_string(),
                fraction: step.fraction,
                label: step.label.clone(),
                flipped: step.flipped,
            })?;
        }
    }
    Ok(w.into_inner().expect("csv into a Vec cannot fail"))
}

/// Reads curves back from `curves.csv` for downstream re-aggregation.
///
/// Rows are grouped into consecutive runs of six steps per (text, method,
/// direction). The masking metadata on the reconstructed curves (mask
/// token, shuffle seed) is not stored in the CSV and is irrelevant to
/// aggregation; it comes back empty.
pub fn read_curves_csv(bytes: &[u8]) -> Result<Vec<PerturbationCurve>> {
    let mut reader = csv::Reader::from_reader(bytes);
    let mut curves: Vec<PerturbationCurve> = Vec::new();
    for (i, row) in reader.deserialize::<CurveRow>().enumerate() {
        let row = row?;
        let direction = Direction::parse(&row.direction)?;
        let step = CurveStep {
            fraction: row.fraction,
            label: row.label,
            flipped: row.flipped,
        };
        let extends_current = curves.last().is_some_and(|c: &PerturbationCurve| {
            c.text_id == row.text_id
                && c.method == row.method
                && c.direction == direction
                && c.steps.len() < FRACTIONS.len()
        });
        if extends_current {
            curves.last_mut().unwrap().steps.push(step);
        } else {
            curves.push(PerturbationCurve {
                text_id: row.text_id,
                method: row.method,
                direction,
                steps: vec![step],
                mask_token: String::new(),
                rng_seed: 0,
            });
        }
        let fractions = &curves.last().unwrap().steps;
        let expected = FRACTIONS[fractions.len() - 1];
        if (fractions.last().unwrap().fraction - expected).abs() > 1e-12 {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!(
                    "curve step fraction {} out of order (expected {expected})",
                    fractions.last().unwrap().fraction
                ),
            });
        }
    }
    Ok(curves)
}

#[derive(Serialize)]
struct AggregateRow<'a> {
    method: &'a str,
    direction: &'a str,
    fraction: f64,
    flipped: usize,
    total: usize,
    flip_fraction: f64,
}

/// Renders `curve_aggregate.csv` from an aggregate's flip table.
pub fn aggregate_csv(agg: &Aggregate) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &agg.rows {
        w.serialize(AggregateRow {
            method: &row.method,
            direction: row.direction.as_str(),
            fraction: row.fraction,
            flipped: row.flipped,
            total: row.total,
            flip_fraction: row.flip_fraction(),
        })?;
    }
    Ok(w.into_inner().expect("csv into a Vec cannot fail"))
}

/// Re-aggregates saved curves; the stage-purity path behind the `report`
/// subcommand.
pub fn reaggregate(curves_csv_bytes: &[u8]) -> Result<Vec<u8>> {
    let curves = read_curves_csv(curves_csv_bytes)?;
    aggregate_csv(&aggregate(&curves)?)
}

/// Outcome of the counterfactual protocol for one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualOutcome {
    pub text_id: String,
    pub original: String,
    pub counterfactual: Option<String>,
    /// True iff the re-classified label differed; None when the
    /// re-classification reply could not be parsed (excluded from the
    /// validity rate).
    pub valid: Option<bool>,
}

/// One row of the counterfactual quality report.
///
/// `validity_rate` is the share of valid counterfactuals among those with
/// a known validity verdict. The similarity columns are means over the
/// valid counterfactuals only; they are empty when none is valid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterfactualReport {
    pub model_or_endpoint: String,
    pub task: String,
    pub n_texts: usize,
    pub n_known: usize,
    pub n_valid: usize,
    pub validity_rate: Option<f64>,
    pub match_ratio: Option<f64>,
    pub rouge1: Option<f64>,
    pub bleu1: Option<f64>,
    pub rouge_l: Option<f64>,
}

/// Computes the quality report over a batch of counterfactual outcomes.
pub fn counterfactual_report(
    model_or_endpoint: &str,
    task: &str,
    outcomes: &[CounterfactualOutcome],
) -> CounterfactualReport {
    let n_known = outcomes.iter().filter(|o| o.valid.is_some()).count();
    let valid: Vec<&CounterfactualOutcome> = outcomes
        .iter()
        .filter(|o| o.valid == Some(true))
        .collect();
    let mut sums = [0.0f64; 4];
    for o in &valid {
        let reference: Vec<String> = split_tokens(&o.original)
            .into_iter()
            .map(|(t, _)| t)
            .collect();
        let candidate: Vec<String> = o
            .counterfactual
            .as_deref()
            .map(|c| split_tokens(c).into_iter().map(|(t, _)| t).collect())
            .unwrap_or_default();
        sums[0] += textsim::match_ratio_tokens(&reference, &candidate);
        sums[1] += textsim::rouge1_tokens(&reference, &candidate);
        sums[2] += textsim::bleu1_tokens(&reference, &candidate);
        sums[3] += textsim::rouge_l_tokens(&reference, &candidate);
    }
    let mean = |total: f64| (!valid.is_empty()).then(|| total / valid.len() as f64);
    CounterfactualReport {
        model_or_endpoint: model_or_endpoint.to_string(),
        task: task.to_string(),
        n_texts: outcomes.len(),
        n_known,
        n_valid: valid.len(),
        validity_rate: (n_known > 0).then(|| valid.len() as f64 / n_known as f64),
        match_ratio: mean(sums[0]),
        rouge1: mean(sums[1]),
        bleu1: mean(sums[2]),
        rouge_l: mean(sums[3]),
    }
}

/// Renders `counterfactual_report.csv`.
pub fn counterfactual_csv(report: &CounterfactualReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(report)?;
    Ok(w.into_inner().expect("csv into a Vec cannot fail"))
}

/// Averages of the per-text extrema of the signed gradient-times-input
/// values, as classifier-sanity statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientStats {
    pub min_mean: f64,
    pub max_mean: f64,
}

/// Counts of everything the run skipped rather than reported.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Exclusions {
    /// Saliency maps with zero variance, excluded from every Pearson pair.
    pub zero_variance_maps: usize,
    /// Texts whose classification reply named no unique label.
    pub label_parse_failures: usize,
    /// Extractive phrases that matched the source text neither verbatim
    /// nor as a token run.
    pub phrases_not_found: usize,
    /// Counterfactuals whose re-classification reply was unparseable.
    pub validity_unknown: usize,
}

/// The run's headline numbers, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub task: String,
    pub n_texts: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub gradient: GradientStats,
    pub exclusions: Exclusions,
    pub occluded_labels: BTreeMap<String, usize>,
    pub methods: Vec<String>,
    pub curve_count: usize,
}

pub fn summary_json(summary: &Summary) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(summary)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Macro-averaged F1 over the full label set. A label with neither gold
/// nor predicted occurrences contributes an F1 of zero.
pub fn macro_f1(gold: &[&str], predicted: &[&str], labels: &LabelSet) -> f64 {
    assert_eq!(gold.len(), predicted.len());
    let mut sum = 0.0;
    for label in labels.iter() {
        let tp = gold
            .iter()
            .zip(predicted)
            .filter(|(g, p)| **g == label && **p == label)
            .count() as f64;
        let gold_n = gold.iter().filter(|g| **g == label).count() as f64;
        let pred_n = predicted.iter().filter(|p| **p == label).count() as f64;
        let denom = gold_n + pred_n;
        sum += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    sum / labels.len() as f64
}

/// The run manifest: configuration identity, seeds, an outcome, and the
/// content hash of every file in the bundle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub toolkit_version: String,
    pub format_version: u32,
    pub task: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub status: String,
    pub failed_stage: Option<String>,
    pub files: BTreeMap<String, String>,
}

/// Writes `manifest.json` next to the bundle files. The manifest is not
/// listed in its own file table.
pub fn write_manifest(out_dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    fs::write(out_dir.join("manifest.json"), bytes)?;
    Ok(())
}
