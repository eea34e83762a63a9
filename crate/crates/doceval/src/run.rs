//! End-to-end evaluation runs: serialize, prompt, invoke, parse, score,
//! triage, attribute, and emit every report artifact into a run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::document::DocumentFixture;
use crate::fixtures::curated_failure_cases;
use crate::gateway::{
    default_decode_params, http_provider_from_env, Cassette, CassetteMode, FinishState, Gateway,
    GatewayConfig, GatewayError, ImagePayload, InvokeMeta, LedgerStage, ModelRequest, PriceTable,
    UsageLedgerEntry,
};
use crate::layout::{serialize_document, DEFAULT_GRID_COLS, DEFAULT_ROW_TOLERANCE};
use crate::parse::parse_record;
use crate::prompt::{build_prompt, Modality, ModalityRequest, TemplateId};
use crate::record::ExtractionRecord;
use crate::report::{emit_cost_table, emit_error_report, emit_score_table, ScoreMatrix};
use crate::schema::ExtractionSchema;
use crate::score::{match_document, score_corpus, CorpusDocument};
use crate::synth::load_manifest;
use crate::triage::attribution::{
    attribute, cluster_pool_with, CategoryMap, Embedder, ReasonEntry, ReasonPool, TrigramEmbedder,
};
use crate::triage::handler::{analyze_document, ErrorRecord, HandlerConfig};
use crate::triage::reasoner::{
    classify, escalate_with_image, heuristic_verdict, should_escalate, CategoryCatalog,
    ReasonVerdict, ReasonerConfig,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("io: {0}")]
    Io(String),
    #[error("layout: {0}")]
    Layout(String),
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
}

fn io_err(context: &Path, error: impl std::fmt::Display) -> RunError {
    RunError::Io(format!("{}: {error}", context.display()))
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub provider: String,
    pub id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CassetteSection {
    pub mode: CassetteMode,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaySection {
    pub max_inflight: usize,
    pub budget: Option<f64>,
    pub price_table: Option<PathBuf>,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            max_inflight: 4,
            budget: None,
            price_table: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutSection {
    pub grid_cols: usize,
    pub row_tolerance: f64,
}

impl Default for LayoutSection {
    fn default() -> Self {
        Self {
            grid_cols: DEFAULT_GRID_COLS,
            row_tolerance: DEFAULT_ROW_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonerMode {
    /// Verdicts from the handler's characterization alone; no model calls.
    Heuristic,
    /// Text round through the gateway, with image escalation when
    /// triggered and an image is available.
    Model,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TriageSection {
    pub reasoner: ReasonerMode,
    pub reasoner_provider: String,
    pub reasoner_model: String,
    pub tau: f64,
    pub near_miss_threshold: f64,
    pub related_threshold: f64,
    pub confidence_threshold: f64,
    pub open_set: bool,
}

impl Default for TriageSection {
    fn default() -> Self {
        Self {
            reasoner: ReasonerMode::Heuristic,
            reasoner_provider: "stub".into(),
            reasoner_model: "stub-small".into(),
            tau: 0.8,
            near_miss_threshold: 0.8,
            related_threshold: 0.9,
            confidence_threshold: 0.6,
            open_set: true,
        }
    }
}

fn default_models() -> Vec<ModelSpec> {
    vec![ModelSpec {
        provider: "stub".into(),
        id: "stub-small".into(),
    }]
}

fn default_modalities() -> Vec<Modality> {
    vec![Modality::OcrOnly]
}

fn default_template() -> TemplateId {
    TemplateId::Baseline
}

/// Full run configuration; the TOML config file deserializes into this.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub schema_path: Option<PathBuf>,
    #[serde(default = "default_models")]
    pub models: Vec<ModelSpec>,
    #[serde(default = "default_modalities")]
    pub modalities: Vec<Modality>,
    #[serde(default = "default_template")]
    pub template: TemplateId,
    pub cassette: CassetteSection,
    #[serde(default)]
    pub gateway: GatewaySection,
    #[serde(default)]
    pub layout: LayoutSection,
    #[serde(default)]
    pub triage: TriageSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let config: Self = toml::from_str(text).map_err(|e| RunError::ConfigInvalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.models.is_empty() {
            return Err(RunError::ConfigInvalid("at least one model required".into()));
        }
        if self.modalities.is_empty() {
            return Err(RunError::ConfigInvalid("at least one modality required".into()));
        }
        if self.cassette.mode != CassetteMode::Passthrough && self.cassette.path.is_none() {
            return Err(RunError::ConfigInvalid(
                "cassette.path required for record and replay modes".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.triage.tau) {
            return Err(RunError::ConfigInvalid("triage.tau must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Digest over everything that determines run output. The output
    /// directory itself is excluded: it never affects emitted bytes.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Prepared documents
// ---------------------------------------------------------------------------

struct PreparedDoc {
    doc_id: String,
    dataset: String,
    fixture: DocumentFixture,
    gold: ExtractionRecord,
    ocr_text: String,
    images: Vec<ImagePayload>,
    image_refs: Vec<String>,
}

fn media_type_for(path: &str) -> &'static str {
    match Path::new(path).extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

fn prepare_docs(config: &RunConfig, schema: &ExtractionSchema) -> Result<Vec<PreparedDoc>, RunError> {
    let manifest = load_manifest(&config.corpus_dir).map_err(RunError::ConfigInvalid)?;
    let mut docs = Vec::with_capacity(manifest.docs.len());
    for entry in &manifest.docs {
        let fixture_path = config.corpus_dir.join(&entry.fixture);
        let fixture_text = fs::read_to_string(&fixture_path).map_err(|e| io_err(&fixture_path, e))?;
        let fixture = DocumentFixture::from_json(&fixture_text)
            .map_err(|e| RunError::ConfigInvalid(format!("{}: {e}", entry.fixture)))?;

        let gold_path = config.corpus_dir.join(&entry.gold);
        let gold_text = fs::read_to_string(&gold_path).map_err(|e| io_err(&gold_path, e))?;
        let gold = parse_record(&gold_text, schema)
            .map_err(|e| RunError::ConfigInvalid(format!("{}: {e}", entry.gold)))?
            .record;

        let ocr_text = serialize_document(&fixture, config.layout.grid_cols, config.layout.row_tolerance)
            .map_err(|e| RunError::Layout(format!("{}: {e}", entry.doc_id)))?;

        let image_refs = fixture.image_refs.clone().unwrap_or_default();
        let mut images = Vec::with_capacity(image_refs.len());
        for reference in &image_refs {
            let path = config.corpus_dir.join(reference);
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            images.push(ImagePayload {
                media_type: media_type_for(reference).to_string(),
                bytes,
            });
        }

        docs.push(PreparedDoc {
            doc_id: entry.doc_id.clone(),
            dataset: entry.dataset.clone(),
            fixture,
            gold,
            ocr_text,
            images,
            image_refs,
        });
    }
    Ok(docs)
}

/// The exact model request an evaluation run sends for a built prompt;
/// exposed so cassettes can be prepared out of band.
pub fn extraction_request(
    model: &ModelSpec,
    request: &ModalityRequest,
    images: &[ImagePayload],
) -> ModelRequest {
    ModelRequest {
        provider_id: model.provider.clone(),
        model_id: model.id.clone(),
        prompt_text: request.prompt_text.clone(),
        image_payloads: images.to_vec(),
        decode_params: default_decode_params(),
    }
}

// ---------------------------------------------------------------------------
// Bounded parallel map
// ---------------------------------------------------------------------------

fn bounded_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(usize, &T) -> R + Sync,
) -> Vec<R> {
    if items.is_empty() {
        return Vec::new();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len()) {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= items.len() {
                    break;
                }
                let result = f(index, &items[index]);
                *slots[index].lock().expect("slot lock") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot lock").expect("slot filled"))
        .collect()
}

// ---------------------------------------------------------------------------
// Run outcome bookkeeping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Tallies {
    pub docs: usize,
    pub scored: usize,
    pub parse_failures: usize,
    pub cassette_misses: usize,
    pub missing_input: usize,
    pub transport_errors: usize,
    pub parse_violations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_digest: String,
    pub cassette_digest: String,
    pub per_combo: BTreeMap<String, Tallies>,
    pub total_errors: usize,
    pub total_cost: f64,
}

enum DocOutcome {
    Scored {
        pred: ExtractionRecord,
        violations: usize,
        errors: Vec<ErrorRecord>,
    },
    ParseFailure,
    CassetteMiss,
    MissingInput,
    TransportError,
    Fatal(String),
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    model_id: &'a str,
    error: &'a ErrorRecord,
}

#[derive(Serialize)]
struct VerdictLine<'a> {
    model_id: &'a str,
    verdict: &'a ReasonVerdict,
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| RunError::Io(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

/// Provenance every run artifact carries: the two digests that fully
/// determine its bytes in replay mode, plus the tool version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub cassette_digest: String,
    pub tool_version: String,
}

/// Text artifact with a `#`-comment provenance header.
fn write_text_artifact(path: &Path, provenance: &Provenance, body: &str) -> Result<(), RunError> {
    let header = format!(
        "# config_digest: {}\n# cassette_digest: {}\n# tool_version: {}\n\n",
        provenance.config_digest, provenance.cassette_digest, provenance.tool_version
    );
    write_file(path, &(header + body))
}

/// JSON artifact wrapped as `{"provenance": ..., <key>: ...}`.
fn write_json_artifact<T: Serialize>(
    path: &Path,
    provenance: &Provenance,
    key: &str,
    value: &T,
) -> Result<(), RunError> {
    let wrapped = serde_json::json!({
        "provenance": provenance,
        key: value,
    });
    write_json(path, &wrapped)
}

/// Line-delimited artifact whose first line is a provenance record.
fn write_jsonl_artifact<T: Serialize>(
    path: &Path,
    provenance: &Provenance,
    values: &[T],
) -> Result<(), RunError> {
    let mut lines = Vec::with_capacity(values.len() + 1);
    lines.push(
        serde_json::to_string(&serde_json::json!({ "provenance": provenance }))
            .map_err(|e| RunError::Io(e.to_string()))?,
    );
    for value in values {
        lines.push(serde_json::to_string(value).map_err(|e| RunError::Io(e.to_string()))?);
    }
    write_file(path, &(lines.join("\n") + "\n"))
}

/// Reads a wrapped JSON artifact back, returning the payload under `key`.
pub fn read_json_artifact(path: &Path, key: &str) -> Result<serde_json::Value, RunError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
    value
        .get_mut(key)
        .map(serde_json::Value::take)
        .ok_or_else(|| RunError::Io(format!("{}: missing {key:?} payload", path.display())))
}

// ---------------------------------------------------------------------------
// The run itself
// ---------------------------------------------------------------------------

/// Executes a full evaluation run and writes every artifact into
/// `config.out_dir`. Per-document failures (cassette misses, missing
/// inputs, unparseable responses) are tallied, not fatal; the error comes
/// back only on infrastructure problems.
pub fn run_eval(config: &RunConfig) -> Result<RunSummary, RunError> {
    config.validate()?;
    let schema = match &config.schema_path {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            ExtractionSchema::from_json(&text).map_err(RunError::ConfigInvalid)?
        }
        None => ExtractionSchema::delivery_note(),
    };
    let docs = prepare_docs(config, &schema)?;

    let cassette = match (&config.cassette.path, config.cassette.mode) {
        (Some(path), mode) => Cassette::open(path, mode)?,
        (None, mode) => Cassette::in_memory(mode),
    };
    let prices = match &config.gateway.price_table {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            PriceTable::from_toml(&text).map_err(RunError::ConfigInvalid)?
        }
        None => PriceTable::builtin(),
    };
    let mut gateway = Gateway::new(
        cassette,
        prices,
        GatewayConfig {
            max_inflight: config.gateway.max_inflight,
            budget: config.gateway.budget,
            ..GatewayConfig::default()
        },
    );
    let mut provider_ids: Vec<&str> = config.models.iter().map(|m| m.provider.as_str()).collect();
    provider_ids.push(config.triage.reasoner_provider.as_str());
    provider_ids.sort_unstable();
    provider_ids.dedup();
    for provider_id in provider_ids {
        if provider_id != "stub" {
            if let Some(provider) = http_provider_from_env(provider_id) {
                gateway.register_provider(provider_id, Box::new(provider));
            }
        }
    }

    let handler_config = HandlerConfig {
        near_miss_threshold: config.triage.near_miss_threshold,
        related_threshold: config.triage.related_threshold,
        ..HandlerConfig::default()
    };

    let mut per_combo: BTreeMap<String, Tallies> = BTreeMap::new();
    let mut matrix_rows: BTreeMap<String, BTreeMap<Modality, crate::score::CorpusReport>> =
        BTreeMap::new();
    let mut all_errors: Vec<(String, ErrorRecord)> = Vec::new();
    let mut datasets: Vec<String> = docs.iter().map(|d| d.dataset.clone()).collect();
    datasets.sort_unstable();
    datasets.dedup();

    for model in &config.models {
        for modality in &config.modalities {
            let combo = format!("{}/{}", model.id, modality.label());
            let outcomes = bounded_map(&docs, config.gateway.max_inflight, |_, doc| {
                evaluate_one(doc, model, *modality, config, &schema, &gateway, &handler_config)
            });

            let mut tallies = Tallies {
                docs: docs.len(),
                ..Tallies::default()
            };
            let mut corpus_docs: Vec<CorpusDocument> = Vec::new();
            for (doc, outcome) in docs.iter().zip(outcomes) {
                match outcome {
                    DocOutcome::Scored {
                        pred,
                        violations,
                        errors,
                    } => {
                        tallies.scored += 1;
                        tallies.parse_violations += violations;
                        corpus_docs.push(CorpusDocument {
                            dataset_id: doc.dataset.clone(),
                            doc_id: doc.doc_id.clone(),
                            pred,
                            gold: doc.gold.clone(),
                        });
                        for mut error in errors {
                            error.error_id = format!("{}:{}", model.id, error.error_id);
                            all_errors.push((model.id.clone(), error));
                        }
                    }
                    DocOutcome::ParseFailure => tallies.parse_failures += 1,
                    DocOutcome::CassetteMiss => tallies.cassette_misses += 1,
                    DocOutcome::MissingInput => tallies.missing_input += 1,
                    DocOutcome::TransportError => tallies.transport_errors += 1,
                    DocOutcome::Fatal(message) => return Err(RunError::Io(message)),
                }
            }
            let corpus_report = score_corpus(&corpus_docs, &schema);
            matrix_rows
                .entry(model.id.clone())
                .or_default()
                .insert(*modality, corpus_report);
            per_combo.insert(combo, tallies);
        }
    }

    // Reasoner stage.
    let reasoner_config = ReasonerConfig {
        provider_id: config.triage.reasoner_provider.clone(),
        model_id: config.triage.reasoner_model.clone(),
        confidence_threshold: config.triage.confidence_threshold,
        ..ReasonerConfig::default()
    };
    let mut catalog = CategoryCatalog::builtin().clone();
    catalog.open_set_allowed = config.triage.open_set;
    let fewshots = curated_failure_cases();
    let images_by_doc: BTreeMap<&str, &[ImagePayload]> = docs
        .iter()
        .map(|d| (d.doc_id.as_str(), d.images.as_slice()))
        .collect();

    let verdicts: Vec<(String, ReasonVerdict)> = all_errors
        .iter()
        .map(|(model_id, record)| {
            let verdict = match config.triage.reasoner {
                ReasonerMode::Heuristic => heuristic_verdict(record, &reasoner_config),
                ReasonerMode::Model => {
                    let text_verdict =
                        classify(record, &catalog, fewshots, &gateway, &reasoner_config);
                    let images = images_by_doc
                        .get(record.doc_id.as_str())
                        .copied()
                        .unwrap_or(&[]);
                    if should_escalate(record, &text_verdict, &reasoner_config)
                        && !images.is_empty()
                    {
                        escalate_with_image(
                            record,
                            &text_verdict,
                            images,
                            &catalog,
                            fewshots,
                            &gateway,
                            &reasoner_config,
                        )
                    } else {
                        text_verdict
                    }
                }
            };
            (model_id.clone(), verdict)
        })
        .collect();

    // Attribution stage.
    let mut pool = ReasonPool::default();
    for ((_, record), (_, verdict)) in all_errors.iter().zip(&verdicts) {
        pool.push(ReasonEntry {
            error_id: verdict.error_id.clone(),
            category: verdict.category.clone(),
            cause_text: verdict.cause_text.clone(),
            modality: record.modality,
        });
    }
    let embedder = TrigramEmbedder::fit(pool.entries.iter().map(|e| e.cause_text.as_str()));
    let clusters = cluster_pool_with(&pool, &embedder, config.triage.tau);
    let attribution = attribute(
        &clusters,
        &pool,
        &CategoryMap::builtin(),
        config.triage.tau,
        &embedder.id(),
    );

    // Artifacts.
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let provenance = Provenance {
        config_digest: config.digest(),
        cassette_digest: gateway.cassette_digest(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };

    let matrix = ScoreMatrix {
        datasets,
        modalities: config.modalities.clone(),
        rows: matrix_rows,
    };
    write_json_artifact(&out.join("scores/matrix.json"), &provenance, "matrix", &matrix)?;
    write_text_artifact(&out.join("scores/table.txt"), &provenance, &emit_score_table(&matrix))?;

    let error_lines: Vec<ErrorLine> = all_errors
        .iter()
        .map(|(model_id, error)| ErrorLine { model_id, error })
        .collect();
    write_jsonl_artifact(&out.join("triage/errors.jsonl"), &provenance, &error_lines)?;
    let verdict_lines: Vec<VerdictLine> = verdicts
        .iter()
        .map(|(model_id, verdict)| VerdictLine { model_id, verdict })
        .collect();
    write_jsonl_artifact(&out.join("triage/verdicts.jsonl"), &provenance, &verdict_lines)?;
    write_json_artifact(
        &out.join("triage/attribution.json"),
        &provenance,
        "attribution",
        &attribution,
    )?;
    write_text_artifact(
        &out.join("triage/error_report.txt"),
        &provenance,
        &emit_error_report(&attribution),
    )?;

    let mut ledger_entries = gateway.ledger_entries();
    // Concurrent invocation makes ledger order incidental; sort the lines
    // so replay runs are byte-identical.
    let mut ledger_lines: Vec<serde_json::Value> = ledger_entries
        .iter()
        .map(|e| serde_json::to_value(e).expect("entry serializes"))
        .collect();
    ledger_lines.sort_by_key(|v| serde_json::to_string(v).expect("line serializes"));
    write_jsonl_artifact(&out.join("ledger/entries.jsonl"), &provenance, &ledger_lines)?;
    ledger_entries.retain(|e| e.stage == LedgerStage::Extract);
    write_text_artifact(
        &out.join("ledger/cost_table.txt"),
        &provenance,
        &emit_cost_table(&ledger_entries),
    )?;

    let summary = RunSummary {
        config_digest: provenance.config_digest.clone(),
        cassette_digest: provenance.cassette_digest.clone(),
        per_combo,
        total_errors: all_errors.len(),
        total_cost: gateway.total_cost(),
    };
    write_json_artifact(&out.join("summary.json"), &provenance, "summary", &summary)?;
    write_json(&out.join("manifest.json"), &provenance)?;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_one(
    doc: &PreparedDoc,
    model: &ModelSpec,
    modality: Modality,
    config: &RunConfig,
    schema: &ExtractionSchema,
    gateway: &Gateway,
    handler_config: &HandlerConfig,
) -> DocOutcome {
    let ocr_text = matches!(modality, Modality::OcrOnly | Modality::ImagePlusOcr)
        .then_some(doc.ocr_text.as_str());
    let modality_request = match build_prompt(
        schema,
        modality,
        ocr_text,
        Some(&doc.image_refs),
        config.template,
    ) {
        Ok(request) => request,
        Err(_) => return DocOutcome::MissingInput,
    };
    let payloads: &[ImagePayload] = if modality_request.image_refs.is_empty() {
        &[]
    } else {
        &doc.images
    };
    let request = extraction_request(model, &modality_request, payloads);
    let meta = InvokeMeta {
        doc_id: doc.doc_id.clone(),
        modality,
        stage: LedgerStage::Extract,
        page_count: doc.fixture.page_count,
    };
    let response = match gateway.invoke(&request, &meta) {
        Ok(response) => response,
        Err(GatewayError::CassetteMiss(_)) => return DocOutcome::CassetteMiss,
        Err(fatal) => return DocOutcome::Fatal(fatal.to_string()),
    };
    if response.finish_state == FinishState::TransportError {
        return DocOutcome::TransportError;
    }
    let parsed = match parse_record(&response.raw_text, schema) {
        Ok(parsed) => parsed,
        Err(_) => return DocOutcome::ParseFailure,
    };
    let match_result = match_document(&parsed.record, &doc.gold, schema);
    let errors = analyze_document(
        &match_result,
        &parsed.record,
        &doc.gold,
        &doc.doc_id,
        modality,
        schema,
        ocr_text,
        handler_config,
    );
    DocOutcome::Scored {
        pred: parsed.record,
        violations: parsed.violations.len(),
        errors,
    }
}

/// Scores pre-computed prediction files from a corpus manifest (for
/// example the injected predictions of a synthetic corpus) without any
/// model invocation. Triage runs in heuristic mode.
pub fn run_offline(
    corpus_dir: &Path,
    out_dir: &Path,
    tau: f64,
) -> Result<RunSummary, RunError> {
    let config = RunConfig {
        corpus_dir: corpus_dir.to_path_buf(),
        out_dir: out_dir.to_path_buf(),
        schema_path: None,
        models: default_models(),
        modalities: default_modalities(),
        template: default_template(),
        cassette: CassetteSection {
            mode: CassetteMode::Passthrough,
            path: None,
        },
        gateway: GatewaySection::default(),
        layout: LayoutSection::default(),
        triage: TriageSection {
            tau,
            ..TriageSection::default()
        },
    };
    let schema = ExtractionSchema::delivery_note();
    let docs = prepare_docs(&config, &schema)?;
    let manifest = load_manifest(corpus_dir).map_err(RunError::ConfigInvalid)?;
    let handler_config = HandlerConfig::default();
    let reasoner_config = ReasonerConfig::default();

    let mut tallies = Tallies {
        docs: docs.len(),
        ..Tallies::default()
    };
    let mut corpus_docs = Vec::new();
    let mut all_errors: Vec<(String, ErrorRecord)> = Vec::new();
    for (doc, entry) in docs.iter().zip(&manifest.docs) {
        let Some(prediction_rel) = &entry.prediction else {
            tallies.missing_input += 1;
            continue;
        };
        let path = corpus_dir.join(prediction_rel);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let parsed = match parse_record(&text, &schema) {
            Ok(parsed) => parsed,
            Err(_) => {
                tallies.parse_failures += 1;
                continue;
            }
        };
        tallies.scored += 1;
        tallies.parse_violations += parsed.violations.len();
        let match_result = match_document(&parsed.record, &doc.gold, &schema);
        for mut error in analyze_document(
            &match_result,
            &parsed.record,
            &doc.gold,
            &doc.doc_id,
            Modality::OcrOnly,
            &schema,
            Some(&doc.ocr_text),
            &handler_config,
        ) {
            error.error_id = format!("offline:{}", error.error_id);
            all_errors.push(("offline".to_string(), error));
        }
        corpus_docs.push(CorpusDocument {
            dataset_id: doc.dataset.clone(),
            doc_id: doc.doc_id.clone(),
            pred: parsed.record,
            gold: doc.gold.clone(),
        });
    }

    let corpus_report = score_corpus(&corpus_docs, &schema);
    let mut datasets: Vec<String> = docs.iter().map(|d| d.dataset.clone()).collect();
    datasets.sort_unstable();
    datasets.dedup();
    let matrix = ScoreMatrix {
        datasets,
        modalities: vec![Modality::OcrOnly],
        rows: BTreeMap::from([(
            "offline".to_string(),
            BTreeMap::from([(Modality::OcrOnly, corpus_report)]),
        )]),
    };

    let verdicts: Vec<(String, ReasonVerdict)> = all_errors
        .iter()
        .map(|(m, record)| (m.clone(), heuristic_verdict(record, &reasoner_config)))
        .collect();
    let mut pool = ReasonPool::default();
    for ((_, record), (_, verdict)) in all_errors.iter().zip(&verdicts) {
        pool.push(ReasonEntry {
            error_id: verdict.error_id.clone(),
            category: verdict.category.clone(),
            cause_text: verdict.cause_text.clone(),
            modality: record.modality,
        });
    }
    let embedder = TrigramEmbedder::fit(pool.entries.iter().map(|e| e.cause_text.as_str()));
    let clusters = cluster_pool_with(&pool, &embedder, tau);
    let attribution = attribute(&clusters, &pool, &CategoryMap::builtin(), tau, &embedder.id());

    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let provenance = Provenance {
        config_digest: config.digest(),
        cassette_digest: String::new(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json_artifact(&out_dir.join("scores/matrix.json"), &provenance, "matrix", &matrix)?;
    write_text_artifact(
        &out_dir.join("scores/table.txt"),
        &provenance,
        &emit_score_table(&matrix),
    )?;
    let error_lines: Vec<ErrorLine> = all_errors
        .iter()
        .map(|(model_id, error)| ErrorLine { model_id, error })
        .collect();
    write_jsonl_artifact(&out_dir.join("triage/errors.jsonl"), &provenance, &error_lines)?;
    let verdict_lines: Vec<VerdictLine> = verdicts
        .iter()
        .map(|(model_id, verdict)| VerdictLine { model_id, verdict })
        .collect();
    write_jsonl_artifact(&out_dir.join("triage/verdicts.jsonl"), &provenance, &verdict_lines)?;
    write_json_artifact(
        &out_dir.join("triage/attribution.json"),
        &provenance,
        "attribution",
        &attribution,
    )?;
    write_text_artifact(
        &out_dir.join("triage/error_report.txt"),
        &provenance,
        &emit_error_report(&attribution),
    )?;

    let summary = RunSummary {
        config_digest: provenance.config_digest.clone(),
        cassette_digest: String::new(),
        per_combo: BTreeMap::from([("offline/OCR-only".to_string(), tallies)]),
        total_errors: all_errors.len(),
        total_cost: 0.0,
    };
    write_json_artifact(&out_dir.join("summary.json"), &provenance, "summary", &summary)?;
    write_json(&out_dir.join("manifest.json"), &provenance)?;
    Ok(summary)
}

/// Reads the usage ledger of a finished run directory.
pub fn load_run_ledger(run_dir: &Path) -> Result<Vec<UsageLedgerEntry>, RunError> {
    let path = run_dir.join("ledger/entries.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut entries = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| RunError::Io(e.to_string()))?;
        if value.get("provenance").is_some() {
            continue; // header line
        }
        entries.push(
            serde_json::from_value(value).map_err(|e| RunError::Io(e.to_string()))?,
        );
    }
    Ok(entries)
}
