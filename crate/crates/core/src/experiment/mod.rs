//! End-to-end experiment orchestration.
//!
//! A single declarative config describes the task, corpus, classifier,
//! optional chat endpoint, saliency methods, and seeds. [`run_experiment`]
//! executes the pipeline in named stages (corpus, model, explain,
//! selfexplain, saliency, correlate, curves, report) and writes a
//! deterministic bundle: every CSV and JSON artifact plus a manifest with
//! a content hash per file. When a stage fails, the files written so far
//! are retained and the manifest records the failing stage.
//!
//! Determinism: training is bitwise reproducible, every random choice is
//! seeded by [`derive_seed`] from the master seed and a stable label, and
//! all writers emit fixed orders, so identical configs produce
//! byte-identical bundles.

pub mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::analytic;
use crate::corpus::{
    gen_synthetic, load_jsonl, save_jsonl, AnnotatedText, LabelSet, Task, TokenSequence,
};
use crate::error::{Error, Result};
use crate::faithfulness::{aggregate, CurveOptions, Direction, PerturbationCurve};
use crate::saliency::{self, PhraseMatch, SaliencyMap};
use crate::selfexplain::client::{ChatClient, EndpointConfig};
use crate::selfexplain::mock::MockServer;
use crate::selfexplain::{
    ask_classification, explain_text, PromptTemplates, EXTRACTIVE_MULTI_TEMPLATE,
};
use crate::tinylm::{train, ModelConfig, ModelWeights};

use report::{
    CorrelationRow, CounterfactualOutcome, Exclusions, GradientStats, MethodMaps, Sink, Summary,
};

/// Saliency methods the pipeline knows how to produce.
pub const KNOWN_METHODS: [&str; 7] = [
    "agrad",
    "gradin",
    "igrad",
    "human",
    "random",
    "self_extractive",
    "self_counterfactual",
];

fn default_corpus_n() -> usize {
    200
}

fn default_corpus_seed() -> u64 {
    7
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retry_cap() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    250
}

/// Where the corpus comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    #[default]
    Synthetic,
    File,
}

/// Corpus settings: synthetic generation parameters or a JSONL path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default)]
    pub source: CorpusSource,
    #[serde(default = "default_corpus_n")]
    pub n: usize,
    #[serde(default = "default_corpus_seed")]
    pub seed: u64,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            source: CorpusSource::Synthetic,
            n: default_corpus_n(),
            seed: default_corpus_seed(),
            path: None,
        }
    }
}

/// Classifier settings: train a fresh reference model or load a
/// checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub checkpoint: Option<PathBuf>,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            checkpoint: None,
            d_model: 32,
            layers: 2,
            heads: 4,
            seed: 3,
            epochs: 30,
            lr: 0.003,
        }
    }
}

/// Chat endpoint settings. With `fixture` set, a scripted mock server is
/// started from that file and `base_url` is ignored; otherwise `base_url`
/// is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSection {
    #[serde(default)]
    pub base_url: Option<String>,
    pub model: String,
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    #[serde(default)]
    pub auth_header: Option<(String, String)>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retry_cap")]
    pub retry_cap: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

/// How many phrases the extractive step requests per text: the number of
/// human spans ("spans") or a fixed count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhraseCount {
    #[default]
    Spans,
    Fixed(usize),
}

impl Serialize for PhraseCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PhraseCount::Spans => s.serialize_str("spans"),
            PhraseCount::Fixed(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for PhraseCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(PhraseCount::Fixed(n)),
            Raw::Name(s) if s == "spans" => Ok(PhraseCount::Spans),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "phrase_count must be \"spans\" or a positive integer, got {s:?}"
            ))),
        }
    }
}

/// Which classifier answers the masked re-classifications of the
/// faithfulness curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvesTarget {
    #[default]
    Model,
    Endpoint,
}

/// The declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Classification task: "hazard" or "polarity".
    pub task: String,
    /// Directory the report bundle is written into.
    pub out_dir: PathBuf,
    /// Master seed; every stochastic choice derives from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub endpoint: Option<EndpointSection>,
    /// Saliency methods to emit; empty means every applicable method.
    #[serde(default)]
    pub methods: Vec<String>,
    /// Mask token for the faithfulness curves. Defaults to "<unk>" when
    /// the model answers them and "###" when an endpoint does.
    #[serde(default)]
    pub mask_token: Option<String>,
    #[serde(default)]
    pub phrase_count: PhraseCount,
    #[serde(default)]
    pub curves_target: CurvesTarget,
}

impl ExperimentConfig {
    /// A config for `task` writing into `out_dir`, with every other key
    /// at its default.
    pub fn new(task: &str, out_dir: &Path) -> Self {
        ExperimentConfig {
            task: task.to_string(),
            out_dir: out_dir.to_path_buf(),
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelSection::default(),
            endpoint: None,
            methods: Vec::new(),
            mask_token: None,
            phrase_count: PhraseCount::default(),
            curves_target: CurvesTarget::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&raw).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    /// Hash of the semantic configuration. The output directory is
    /// excluded, so the same experiment written to two locations produces
    /// byte-identical bundles.
    pub fn semantic_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value
            .as_object_mut()
            .expect("config serializes to an object")
            .remove("out_dir");
        report::sha256_hex(value.to_string().as_bytes())
    }
}

/// Derives an independent seed from the master seed and a stable label,
/// so unrelated consumers of randomness never share a stream.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| e.at_stage(name))
}

struct EndpointRuntime {
    client: ChatClient,
    _mock: Option<MockServer>,
}

struct Plan<'a> {
    config: &'a ExperimentConfig,
    task: Task,
    labels: LabelSet,
    methods: Vec<String>,
    mask_token: String,
    templates: PromptTemplates,
    endpoint: Option<EndpointRuntime>,
}

impl<'a> Plan<'a> {
    fn new(config: &'a ExperimentConfig) -> Result<Plan<'a>> {
        let task = Task::parse(&config.task)?;
        let labels = task.label_set();

        match config.corpus.source {
            CorpusSource::Synthetic => {
                if config.corpus.n < 2 {
                    return Err(Error::Config(format!(
                        "synthetic corpus needs at least 2 texts, got {}",
                        config.corpus.n
                    )));
                }
            }
            CorpusSource::File => {
                let path = config.corpus.path.as_ref().ok_or_else(|| {
                    Error::Config("corpus.source = \"file\" requires corpus.path".into())
                })?;
                if !path.is_file() {
                    return Err(Error::Config(format!(
                        "corpus file {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        if let Some(checkpoint) = &config.model.checkpoint {
            if !checkpoint.is_file() {
                return Err(Error::Config(format!(
                    "model checkpoint {} does not exist",
                    checkpoint.display()
                )));
            }
        }
        if let PhraseCount::Fixed(0) = config.phrase_count {
            return Err(Error::Config("phrase_count must be at least 1".into()));
        }

        let methods = resolve_methods(config)?;
        if config.curves_target == CurvesTarget::Endpoint && config.endpoint.is_none() {
            return Err(Error::Config(
                "curves_target = \"endpoint\" requires an [endpoint] section".into(),
            ));
        }
        let mask_token = config.mask_token.clone().unwrap_or_else(|| {
            match config.curves_target {
                CurvesTarget::Model => "<unk>",
                CurvesTarget::Endpoint => "###",
            }
            .to_string()
        });
        let templates = match task {
            Task::Hazard => PromptTemplates::recall(),
            Task::Polarity => PromptTemplates::sentiment(),
        };

        let endpoint = match &config.endpoint {
            None => None,
            Some(section) => Some(start_endpoint(section)?),
        };

        Ok(Plan {
            config,
            task,
            labels,
            methods,
            mask_token,
            templates,
            endpoint,
        })
    }

    fn seeds(&self) -> std::collections::BTreeMap<String, u64> {
        let mut seeds = std::collections::BTreeMap::new();
        seeds.insert("master".to_string(), self.config.seed);
        seeds.insert("corpus".to_string(), self.config.corpus.seed);
        seeds.insert("model".to_string(), self.config.model.seed);
        seeds
    }

    fn load_corpus(&self) -> Result<Vec<AnnotatedText>> {
        let corpus = match self.config.corpus.source {
            CorpusSource::Synthetic => {
                gen_synthetic(self.task, self.config.corpus.n, self.config.corpus.seed)
            }
            CorpusSource::File => {
                let path = self.config.corpus.path.as_ref().expect("validated");
                load_jsonl(path, &self.labels)?
            }
        };
        if corpus.is_empty() {
            return Err(Error::Config("corpus is empty".into()));
        }
        Ok(corpus)
    }

    fn build_model(&self, corpus: &[AnnotatedText], sink: &mut Sink) -> Result<ModelWeights> {
        let weights = match &self.config.model.checkpoint {
            Some(path) => ModelWeights::load(path)?,
            None => {
                let m = &self.config.model;
                let mc = ModelConfig::new(m.d_model, m.layers, m.heads, m.seed);
                train(corpus, &self.labels, &mc, m.epochs, m.lr)?.weights
            }
        };
        weights.save(&sink.out_dir().join("model.json"))?;
        sink.register("model.json")?;
        Ok(weights)
    }

    /// Templates for a request of `k` phrases: when `k` exceeds one and
    /// the task template has no `{k}` placeholder, the multi-phrase
    /// wording replaces the single-phrase default.
    fn templates_for_k(&self, k: usize) -> PromptTemplates {
        let mut templates = self.templates.clone();
        if k > 1 && !templates.extractive_template.contains("{k}") {
            templates.extractive_template = EXTRACTIVE_MULTI_TEMPLATE.to_string();
        }
        templates
    }
}

fn resolve_methods(config: &ExperimentConfig) -> Result<Vec<String>> {
    let methods: Vec<String> = if config.methods.is_empty() {
        let mut all = vec![
            "agrad".to_string(),
            "gradin".to_string(),
            "igrad".to_string(),
            "human".to_string(),
            "random".to_string(),
        ];
        if config.endpoint.is_some() {
            all.push("self_extractive".to_string());
            all.push("self_counterfactual".to_string());
        }
        all
    } else {
        config.methods.clone()
    };
    for (i, m) in methods.iter().enumerate() {
        if !KNOWN_METHODS.contains(&m.as_str()) {
            return Err(Error::Config(format!(
                "unknown method {m:?}; known methods: {}",
                KNOWN_METHODS.join(", ")
            )));
        }
        if methods[..i].contains(m) {
            return Err(Error::Config(format!("method {m:?} listed twice")));
        }
        if m.starts_with("self_") && config.endpoint.is_none() {
            return Err(Error::Config(format!(
                "method {m:?} requires an [endpoint] section"
            )));
        }
    }
    Ok(methods)
}

fn start_endpoint(section: &EndpointSection) -> Result<EndpointRuntime> {
    let (base_url, mock) = match &section.fixture {
        Some(fixture) => {
            if !fixture.is_file() {
                return Err(Error::Config(format!(
                    "endpoint fixture {} does not exist",
                    fixture.display()
                )));
            }
            let server = MockServer::from_fixture(fixture)?;
            (server.url(), Some(server))
        }
        None => {
            let url = section.base_url.clone().ok_or_else(|| {
                Error::Config("endpoint requires base_url or fixture".into())
            })?;
            (url, None)
        }
    };
    let mut endpoint_config = EndpointConfig::new(base_url, section.model.clone());
    endpoint_config.auth_header = section.auth_header.clone();
    endpoint_config.timeout_ms = section.timeout_ms;
    endpoint_config.retry_cap = section.retry_cap;
    endpoint_config.backoff_ms = section.backoff_ms;
    Ok(EndpointRuntime {
        client: ChatClient::new(endpoint_config)?,
        _mock: mock,
    })
}

/// Runs the full pipeline described by `config`.
///
/// On success the returned manifest lists every bundle file with its
/// content hash. On a stage failure the error names the stage, the files
/// already written stay on disk, and the manifest records the failure.
pub fn run_experiment(config: &ExperimentConfig) -> Result<report::Manifest> {
    let plan = Plan::new(config).map_err(|e| e.at_stage("config"))?;
    let mut sink = Sink::new(&config.out_dir).map_err(|e| e.at_stage("config"))?;
    let result = pipeline(&plan, &mut sink);
    let (status, failed_stage) = match &result {
        Ok(()) => ("ok".to_string(), None),
        Err(Error::Stage { stage, .. }) => ("failed".to_string(), Some(stage.to_string())),
        Err(_) => ("failed".to_string(), None),
    };
    let manifest = report::Manifest {
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        format_version: 1,
        task: plan.task.as_str().to_string(),
        config_hash: config.semantic_hash(),
        seeds: plan.seeds(),
        status,
        failed_stage,
        files: sink.files().clone(),
    };
    report::write_manifest(sink.out_dir(), &manifest).map_err(|e| e.at_stage("manifest"))?;
    result.map(|()| manifest)
}

struct Explained {
    /// Per text in corpus order: tokenization and the maps of every
    /// method, model-side methods first in configured order, then the
    /// self-explanation methods.
    seqs: Vec<TokenSequence>,
    maps: Vec<(String, MethodMaps)>,
    predicted: Vec<String>,
    grad_min: Vec<f64>,
    grad_max: Vec<f64>,
}

fn pipeline(plan: &Plan, sink: &mut Sink) -> Result<()> {
    let corpus = stage("corpus", || {
        let corpus = plan.load_corpus()?;
        save_jsonl(&sink.out_dir().join("corpus.jsonl"), &corpus)?;
        sink.register("corpus.jsonl")?;
        Ok(corpus)
    })?;

    let model = stage("model", || plan.build_model(&corpus, sink))?;

    let mut explained = stage("explain", || explain_texts(plan, &corpus, &model))?;

    let mut exclusions = Exclusions::default();
    let mut outcomes: Vec<CounterfactualOutcome> = Vec::new();
    if plan.endpoint.is_some() {
        stage("selfexplain", || {
            self_explain_texts(plan, &corpus, &mut explained, &mut outcomes, &mut exclusions, sink)
        })?;
    }

    stage("saliency", || {
        sink.write_bytes("saliency.csv", &report::saliency_csv(&explained.maps)?)
    })?;

    stage("correlate", || {
        let (rows, zero_variance) = correlate(&explained.maps)?;
        exclusions.zero_variance_maps = zero_variance;
        sink.write_bytes("correlations.csv", &report::correlations_csv(&rows)?)
    })?;

    let agg = stage("curves", || {
        let curves = run_curves(plan, &model, &explained)?;
        sink.write_bytes("curves.csv", &report::curves_csv(&curves)?)?;
        let agg = aggregate(&curves)?;
        sink.write_bytes("curve_aggregate.csv", &report::aggregate_csv(&agg)?)?;
        Ok(agg)
    })?;

    stage("report", || {
        if let Some(endpoint) = &plan.endpoint {
            let cf_report = report::counterfactual_report(
                endpoint.client.endpoint_id(),
                plan.task.as_str(),
                &outcomes,
            );
            sink.write_bytes(
                "counterfactual_report.csv",
                &report::counterfactual_csv(&cf_report)?,
            )?;
        }
        let n_correct = corpus
            .iter()
            .zip(&explained.predicted)
            .filter(|(t, p)| t.label == **p)
            .count();
        let gold: Vec<&str> = corpus.iter().map(|t| t.label.as_str()).collect();
        let predicted: Vec<&str> = explained.predicted.iter().map(String::as_str).collect();
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let summary = Summary {
            task: plan.task.as_str().to_string(),
            n_texts: corpus.len(),
            n_correct,
            accuracy: n_correct as f64 / corpus.len() as f64,
            macro_f1: report::macro_f1(&gold, &predicted, &plan.labels),
            gradient: GradientStats {
                min_mean: mean(&explained.grad_min),
                max_mean: mean(&explained.grad_max),
            },
            exclusions: exclusions.clone(),
            occluded_labels: agg.occluded.clone(),
            methods: plan.methods.clone(),
            curve_count: agg.curve_count,
        };
        sink.write_bytes("summary.json", &report::summary_json(&summary)?)
    })?;

    Ok(())
}

struct PerText {
    seq: TokenSequence,
    maps: Vec<(String, SaliencyMap)>,
    predicted: String,
    grad_min: f64,
    grad_max: f64,
}

fn explain_texts(
    plan: &Plan,
    corpus: &[AnnotatedText],
    model: &ModelWeights,
) -> Result<Explained> {
    let model_methods: Vec<&str> = plan
        .methods
        .iter()
        .map(String::as_str)
        .filter(|m| !m.starts_with("self_"))
        .collect();
    let per: Result<Vec<PerText>> = parallel_map(corpus, |_, text| {
        let trace = model.classify_text(&text.text)?;
        let mut maps = Vec::new();
        for &method in &model_methods {
            let map = match method {
                "agrad" => analytic::agrad(model, &trace)?,
                "gradin" => analytic::gradin(model, &trace)?,
                "igrad" => analytic::igrad(model, &trace, None)?,
                "human" => saliency::spans_to_saliency(&trace.seq, &text.spans)?,
                "random" => saliency::random_saliency(
                    &trace.seq,
                    derive_seed(plan.config.seed, &format!("random/{}", text.id)),
                )?,
                other => unreachable!("unvalidated method {other}"),
            };
            maps.push((method.to_string(), map));
        }
        let raw = analytic::gradin_raw(model, &trace)?;
        let (grad_min, grad_max) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &g| {
                (lo.min(g), hi.max(g))
            });
        Ok(PerText {
            predicted: trace.predicted_label(&plan.labels).to_string(),
            seq: trace.seq,
            maps,
            grad_min,
            grad_max,
        })
    })
    .into_iter()
    .collect();
    let per = per?;
    let mut explained = Explained {
        seqs: Vec::with_capacity(per.len()),
        maps: Vec::with_capacity(per.len()),
        predicted: Vec::with_capacity(per.len()),
        grad_min: Vec::with_capacity(per.len()),
        grad_max: Vec::with_capacity(per.len()),
    };
    for (text, p) in corpus.iter().zip(per) {
        explained.seqs.push(p.seq);
        explained.maps.push((text.id.clone(), p.maps));
        explained.predicted.push(p.predicted);
        explained.grad_min.push(p.grad_min);
        explained.grad_max.push(p.grad_max);
    }
    Ok(explained)
}

fn self_explain_texts(
    plan: &Plan,
    corpus: &[AnnotatedText],
    explained: &mut Explained,
    outcomes: &mut Vec<CounterfactualOutcome>,
    exclusions: &mut Exclusions,
    sink: &mut Sink,
) -> Result<()> {
    let endpoint = plan.endpoint.as_ref().expect("stage runs only with an endpoint");
    let self_methods: Vec<&str> = plan
        .methods
        .iter()
        .map(String::as_str)
        .filter(|m| m.starts_with("self_"))
        .collect();
    let mut records_jsonl: Vec<u8> = Vec::new();
    for (i, text) in corpus.iter().enumerate() {
        let k = match plan.config.phrase_count {
            PhraseCount::Spans => text.spans.len().max(1),
            PhraseCount::Fixed(n) => n,
        };
        let templates = plan.templates_for_k(k);
        let record = match explain_text(
            &endpoint.client,
            &templates,
            &text.id,
            &text.text,
            &plan.labels,
            k,
        ) {
            Ok(record) => record,
            Err(Error::LabelParse { .. }) => {
                exclusions.label_parse_failures += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let counterfactual = record
            .counterfactual_text
            .clone()
            .expect("a full protocol run always carries a counterfactual");
        let valid = match ask_classification(&endpoint.client, &templates, &counterfactual, &plan.labels)
        {
            Ok((label, _)) => Some(label != record.predicted_label),
            Err(Error::LabelParse { .. }) => {
                exclusions.validity_unknown += 1;
                None
            }
            Err(e) => return Err(e),
        };
        outcomes.push(CounterfactualOutcome {
            text_id: text.id.clone(),
            original: text.text.clone(),
            counterfactual: Some(counterfactual.clone()),
            valid,
        });
        for &method in &self_methods {
            let map = match method {
                "self_extractive" => {
                    let (map, matches) =
                        saliency::phrases_to_saliency(&explained.seqs[i], &record.extractive_phrases)?;
                    exclusions.phrases_not_found += matches
                        .iter()
                        .filter(|m| matches!(m, PhraseMatch::NotFound))
                        .count();
                    map
                }
                "self_counterfactual" => {
                    let (map, _stats) =
                        saliency::counterfactual_to_saliency(&explained.seqs[i], &counterfactual)?;
                    map
                }
                other => unreachable!("unvalidated method {other}"),
            };
            explained.maps[i].1.push((method.to_string(), map));
        }
        records_jsonl.extend(serde_json::to_vec(&record)?);
        records_jsonl.push(b'\n');
    }
    sink.write_bytes("records.jsonl", &records_jsonl)
}

fn correlate(maps: &[(String, MethodMaps)]) -> Result<(Vec<CorrelationRow>, usize)> {
    let mut rows = Vec::new();
    let mut zero_variance = 0usize;
    for (text_id, methods) in maps {
        zero_variance += methods.iter().filter(|(_, m)| m.is_constant()).count();
        for i in 0..methods.len() {
            for j in i + 1..methods.len() {
                let (method_a, a) = &methods[i];
                let (method_b, b) = &methods[j];
                if a.is_constant() || b.is_constant() {
                    continue;
                }
                rows.push(CorrelationRow {
                    text_id: text_id.clone(),
                    method_a: method_a.clone(),
                    method_b: method_b.clone(),
                    pearson_r: saliency::pearson(a, b)?,
                });
            }
        }
    }
    Ok((rows, zero_variance))
}

fn run_curves(plan: &Plan, model: &ModelWeights, explained: &Explained) -> Result<Vec<PerturbationCurve>> {
    let jobs: Vec<(usize, &str)> = explained
        .maps
        .iter()
        .enumerate()
        .map(|(i, (text_id, _))| (i, text_id.as_str()))
        .collect();
    let curves_for = |i: usize,
                      text_id: &str,
                      classify: &mut dyn FnMut(&str) -> Result<String>|
     -> Result<Vec<PerturbationCurve>> {
        let mut curves = Vec::new();
        for (method, map) in &explained.maps[i].1 {
            for direction in [Direction::HighToLow, Direction::LowToHigh] {
                let options = CurveOptions {
                    mask_token: plan.mask_token.clone(),
                    seed: derive_seed(
                        plan.config.seed,
                        &format!("curve/{method}/{}/{text_id}", direction.as_str()),
                    ),
                    sticky: false,
                };
                curves.push(crate::faithfulness::run_curve(
                    &mut *classify,
                    text_id,
                    &explained.seqs[i],
                    map,
                    direction,
                    &options,
                )?);
            }
        }
        Ok(curves)
    };
    let nested: Result<Vec<Vec<PerturbationCurve>>> = match plan.config.curves_target {
        CurvesTarget::Model => parallel_map(&jobs, |_, &(i, text_id)| {
            let mut classify = |masked: &str| {
                model
                    .classify_text(masked)
                    .map(|t| t.predicted_label(&plan.labels).to_string())
            };
            curves_for(i, text_id, &mut classify)
        })
        .into_iter()
        .collect(),
        CurvesTarget::Endpoint => {
            let endpoint = plan.endpoint.as_ref().expect("validated");
            jobs.iter()
                .map(|&(i, text_id)| {
                    let mut classify = |masked: &str| {
                        ask_classification(&endpoint.client, &plan.templates, masked, &plan.labels)
                            .map(|(label, _)| label)
                    };
                    curves_for(i, text_id, &mut classify)
                })
                .collect()
        }
    };
    Ok(nested?.into_iter().flatten().collect())
}

/// Applies `f` to every item on a small worker pool, returning results in
/// item order. Falls back to a sequential loop for tiny inputs.
fn parallel_map<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(4);
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, R)>();
        let next = &next;
        let f = &f;
        for _ in 0..workers {
            let tx = tx.clone();
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, f(i, &items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            slots[i] = Some(r);
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every index is computed exactly once"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_fill_in_from_a_minimal_toml() {
        let config: ExperimentConfig =
            toml::from_str("task = \"hazard\"\nout_dir = \"out\"").unwrap();
        assert_eq!(config.seed, 0);
        assert_eq!(config.corpus.source, CorpusSource::Synthetic);
        assert_eq!(config.corpus.n, 200);
        assert_eq!(config.corpus.seed, 7);
        assert_eq!(config.model.d_model, 32);
        assert_eq!(config.model.layers, 2);
        assert_eq!(config.model.heads, 4);
        assert_eq!(config.model.seed, 3);
        assert_eq!(config.model.epochs, 30);
        assert_eq!(config.model.lr, 0.003);
        assert_eq!(config.phrase_count, PhraseCount::Spans);
        assert_eq!(config.curves_target, CurvesTarget::Model);
        assert!(config.endpoint.is_none());
        assert!(config.methods.is_empty());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>(
            "task = \"hazard\"\nout_dir = \"out\"\nmask_tkoen = \"x\"",
        )
        .unwrap_err();
        assert!(err.to_string().contains("mask_tkoen"));
    }

    #[test]
    fn phrase_count_accepts_spans_or_a_number() {
        let spans: ExperimentConfig =
            toml::from_str("task = \"hazard\"\nout_dir = \"o\"\nphrase_count = \"spans\"").unwrap();
        assert_eq!(spans.phrase_count, PhraseCount::Spans);
        let fixed: ExperimentConfig =
            toml::from_str("task = \"hazard\"\nout_dir = \"o\"\nphrase_count = 3").unwrap();
        assert_eq!(fixed.phrase_count, PhraseCount::Fixed(3));
        assert!(
            toml::from_str::<ExperimentConfig>(
                "task = \"hazard\"\nout_dir = \"o\"\nphrase_count = \"words\""
            )
            .is_err()
        );
    }

    #[test]
    fn method_validation_rejects_unknown_duplicate_and_endpointless_self() {
        let mut config = ExperimentConfig::new("hazard", Path::new("out"));
        config.methods = vec!["gradin".into(), "sharpley".into()];
        assert!(matches!(resolve_methods(&config), Err(Error::Config(_))));
        config.methods = vec!["gradin".into(), "gradin".into()];
        assert!(matches!(resolve_methods(&config), Err(Error::Config(_))));
        config.methods = vec!["self_extractive".into()];
        assert!(matches!(resolve_methods(&config), Err(Error::Config(_))));
        config.methods = vec!["gradin".into(), "human".into()];
        assert_eq!(resolve_methods(&config).unwrap(), vec!["gradin", "human"]);
        config.methods.clear();
        assert_eq!(
            resolve_methods(&config).unwrap(),
            vec!["agrad", "gradin", "igrad", "human", "random"]
        );
    }

    #[test]
    fn semantic_hash_ignores_the_output_directory_only() {
        let a = ExperimentConfig::new("hazard", Path::new("run_a"));
        let b = ExperimentConfig::new("hazard", Path::new("run_b"));
        assert_eq!(a.semantic_hash(), b.semantic_hash());
        let mut c = ExperimentConfig::new("hazard", Path::new("run_a"));
        c.seed = 1;
        assert_ne!(a.semantic_hash(), c.semantic_hash());
    }

    #[test]
    fn derived_seeds_are_stable_and_label_separated() {
        assert_eq!(derive_seed(0, "x"), derive_seed(0, "x"));
        assert_ne!(derive_seed(0, "x"), derive_seed(0, "y"));
        assert_ne!(derive_seed(0, "x"), derive_seed(1, "x"));
        assert_ne!(
            derive_seed(0, "random/h0001"),
            derive_seed(0, "curve/gradin/high_to_low/h0001")
        );
    }

    #[test]
    fn parallel_map_preserves_item_order() {
        let items: Vec<usize> = (0..257).collect();
        let out = parallel_map(&items, |i, &x| {
            assert_eq!(i, x);
            x * 3
        });
        assert_eq!(out, items.iter().map(|x| x * 3).collect::<Vec<_>>());
        let empty: Vec<usize> = Vec::new();
        assert!(parallel_map(&empty, |_, x| *x).is_empty());
    }

    #[test]
    fn missing_corpus_file_fails_at_config_time() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = ExperimentConfig::new("hazard", &dir.path().join("out"));
        config.corpus.source = CorpusSource::File;
        config.corpus.path = Some(dir.path().join("nope.jsonl"));
        let err = run_experiment(&config).unwrap_err();
        match err {
            Error::Stage { stage, .. } => assert_eq!(stage, "config"),
            other => panic!("expected a staged config error, got {other:?}"),
        }
        assert!(
            !dir.path().join("out").exists(),
            "no output directory before the config validates"
        );
    }
}
