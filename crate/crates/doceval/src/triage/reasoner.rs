//! LLM-backed hierarchical reasoning: maps each error record to a
//! mid-level cause category with text-only reasoning and few-shot
//! exemplars, escalating to an image-augmented round when text alone is
//! insufficient.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::fixtures::FailureCase;
use crate::gateway::{default_decode_params, Gateway, ImagePayload, InvokeMeta, LedgerStage, ModelRequest};
use crate::parse::repair_json;
use crate::triage::handler::{DiscrepancyKind, ErrorRecord};

const TRIAGE_PROMPT_BODY: &str = include_str!("../../assets/triage_prompt.txt");

/// One mid-level cause category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: String,
    pub description: String,
    /// Alternative phrasings accepted when resolving model output.
    #[serde(default)]
    pub aliases: Vec<String>,
}

/// The catalog the reasoner classifies into. With `open_set_allowed` the
/// model may introduce new labelled categories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryCatalog {
    pub mid_level: Vec<Category>,
    pub open_set_allowed: bool,
}

fn normalize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl CategoryCatalog {
    /// The built-in catalog of mid-level causes.
    pub fn builtin() -> &'static CategoryCatalog {
        static CATALOG: OnceLock<CategoryCatalog> = OnceLock::new();
        CATALOG.get_or_init(|| {
            let category = |id: &str, description: &str, aliases: &[&str]| Category {
                id: id.to_string(),
                description: description.to_string(),
                aliases: aliases.iter().map(|a| a.to_string()).collect(),
            };
            CategoryCatalog {
                open_set_allowed: true,
                mid_level: vec![
                    category(
                        "text-format-misreading",
                        "The value was misread or its text format misunderstood (padding, separators, representation).",
                        &["misreading or misunderstanding the text format", "text format misreading"],
                    ),
                    category(
                        "incorrect-quantity-extraction",
                        "A quantity was extracted incorrectly or taken from the wrong cell.",
                        &["incorrect quantity extraction"],
                    ),
                    category(
                        "abbreviation-misinterpretation",
                        "An abbreviation was misinterpreted during extraction.",
                        &["misinterpretation of abbreviations", "abbreviation misinterpretation"],
                    ),
                    category(
                        "visual-character-confusion",
                        "Visually similar characters were confused while reading the image.",
                        &["visual character confusion", "character visually misinterpreted"],
                    ),
                    category(
                        "field-not-recognized-in-image",
                        "The field value is present but was not recognized or located in the image.",
                        &["field not recognized in image", "the field was not explicitly recognized in the image text"],
                    ),
                    category(
                        "ocr-misalignment",
                        "OCR output misaligned values across rows or columns.",
                        &["ocr misalignment", "incorrect logic or misalignment in ocr"],
                    ),
                    category(
                        "adjacent-field-confusion",
                        "Adjacent fields without clear separation were confused with each other.",
                        &["adjacent field confusion", "extracted adjacent fields"],
                    ),
                    category(
                        "schema-description-confusion",
                        "The schema description was ambiguous or misunderstood.",
                        &["schema description confusion", "schema inconsistency"],
                    ),
                ],
            }
        })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.mid_level.iter().any(|c| c.id == id)
    }

    /// Resolves a model-produced label against ids and aliases.
    pub fn resolve(&self, label: &str) -> Option<&Category> {
        let needle = normalize_label(label);
        self.mid_level.iter().find(|category| {
            normalize_label(&category.id) == needle
                || category.aliases.iter().any(|a| normalize_label(a) == needle)
        })
    }
}

/// A catalog id or a newly introduced label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictCategory {
    Known(String),
    New(String),
}

impl VerdictCategory {
    pub fn label(&self) -> &str {
        match self {
            Self::Known(id) => id,
            Self::New(label) => label,
        }
    }

    pub fn is_new(&self) -> bool {
        matches!(self, Self::New(_))
    }
}

impl fmt::Display for VerdictCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Known(id) => write!(f, "{id}"),
            Self::New(label) => write!(f, "new:{label}"),
        }
    }
}

/// The reasoner's final answer for one error record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonVerdict {
    pub error_id: String,
    pub category: VerdictCategory,
    pub cause_text: String,
    pub confidence: f64,
    pub needs_image: bool,
    pub escalated: bool,
}

#[derive(Debug, Clone)]
pub struct ReasonerConfig {
    pub provider_id: String,
    pub model_id: String,
    /// Below this text-only confidence an image round is triggered.
    pub confidence_threshold: f64,
    /// Confidence assigned to fallback verdicts.
    pub fallback_confidence: f64,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            provider_id: "stub".into(),
            model_id: "stub-small".into(),
            confidence_threshold: 0.6,
            fallback_confidence: 0.3,
        }
    }
}

/// Default category when the model's verdict cannot be used, keyed by the
/// handler's discrepancy kind. Total: every kind maps into the catalog.
pub fn fallback_category(kind: DiscrepancyKind) -> &'static str {
    match kind {
        DiscrepancyKind::Missing => "field-not-recognized-in-image",
        DiscrepancyKind::Spurious => "schema-description-confusion",
        DiscrepancyKind::Format => "text-format-misreading",
        DiscrepancyKind::NearMiss => "text-format-misreading",
        DiscrepancyKind::Homoglyph => "visual-character-confusion",
        DiscrepancyKind::Swap => "adjacent-field-confusion",
        DiscrepancyKind::Misaligned => "ocr-misalignment",
        DiscrepancyKind::Semantic => "schema-description-confusion",
    }
}

fn render_catalog(catalog: &CategoryCatalog) -> String {
    catalog
        .mid_level
        .iter()
        .map(|c| format!("- {}: {}", c.id, c.description))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_fewshots(fewshots: &[FailureCase]) -> String {
    fewshots
        .iter()
        .map(|case| {
            format!(
                "- entry {:?}: ground truth {:?}, prediction {:?} -> category {:?} ({})",
                case.field_path, case.gold, case.predicted, case.category, case.cause
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_error_details(record: &ErrorRecord) -> String {
    let mut out = String::new();
    out.push_str(&format!("- document: {}\n", record.doc_id));
    out.push_str(&format!("- entry: {}\n", record.field_path));
    out.push_str(&format!("- ground truth: {:?}\n", record.gold));
    out.push_str(&format!("- prediction: {:?}\n", record.predicted));
    out.push_str(&format!(
        "- surface characterization: {} (edit distance {}, similarity {:.3}; {})\n",
        record.discrepancy.kind,
        record.discrepancy.char_distance,
        record.discrepancy.char_similarity,
        record.discrepancy.notes
    ));
    if record.related_entries.is_empty() {
        out.push_str("- related entries: none\n");
    } else {
        out.push_str("- related entries:\n");
        for entry in &record.related_entries {
            out.push_str(&format!(
                "    {:?} {} = {:?} (similarity {:.3})\n",
                entry.side, entry.path, entry.value, entry.similarity
            ));
        }
    }
    match &record.ocr_context {
        Some(context) => out.push_str(&format!("- OCR context:\n{context}\n")),
        None => out.push_str("- OCR context unavailable\n"),
    }
    out
}

/// Builds the text-only triage request: catalog listing, few-shot
/// exemplars, the record's surface characterization and OCR context, and
/// the structured-output contract.
pub fn build_triage_prompt(
    record: &ErrorRecord,
    catalog: &CategoryCatalog,
    fewshots: &[FailureCase],
    config: &ReasonerConfig,
) -> ModelRequest {
    debug_assert!(fewshots.len() >= 3, "at least three few-shot exemplars");
    let category_policy = if catalog.open_set_allowed {
        "Prefer a listed category id. Only if none fits, introduce a new one as a short lowercase hyphenated label."
    } else {
        "You must answer with one of the listed category ids; do not invent new categories."
    };
    let prompt_text = TRIAGE_PROMPT_BODY
        .replace("{catalog}", &render_catalog(catalog))
        .replace("{fewshots}", &render_fewshots(fewshots))
        .replace("{category_policy}", category_policy)
        .replace("{error_details}", &render_error_details(record));
    ModelRequest {
        provider_id: config.provider_id.clone(),
        model_id: config.model_id.clone(),
        prompt_text,
        image_payloads: Vec::new(),
        decode_params: default_decode_params(),
    }
}

fn parse_verdict(
    raw_text: &str,
    record: &ErrorRecord,
    catalog: &CategoryCatalog,
) -> Option<ReasonVerdict> {
    let repaired = repair_json(raw_text).ok()?;
    let value: serde_json::Value = serde_json::from_str(&repaired).ok()?;
    let object = value.as_object()?;
    let label = object.get("category")?.as_str()?;
    let cause_text = object
        .get("cause")
        .and_then(|c| c.as_str())
        .unwrap_or_default()
        .to_string();
    let confidence = object
        .get("confidence")
        .and_then(|c| c.as_f64())
        .unwrap_or(0.5)
        .clamp(0.0, 1.0);
    let needs_image = object
        .get("needs_image")
        .and_then(|n| n.as_bool())
        .unwrap_or(false);

    let category = match catalog.resolve(label) {
        Some(category) => VerdictCategory::Known(category.id.clone()),
        None if catalog.open_set_allowed => {
            let normalized = normalize_label(label).replace(' ', "-");
            if normalized.is_empty() {
                return None;
            }
            VerdictCategory::New(normalized)
        }
        None => return None,
    };
    Some(ReasonVerdict {
        error_id: record.error_id.clone(),
        category,
        cause_text,
        confidence,
        needs_image,
        escalated: false,
    })
}

fn fallback_verdict(record: &ErrorRecord, config: &ReasonerConfig) -> ReasonVerdict {
    ReasonVerdict {
        error_id: record.error_id.clone(),
        category: VerdictCategory::Known(fallback_category(record.discrepancy.kind).to_string()),
        cause_text: format!(
            "fallback from surface characterization: {}",
            record.discrepancy.kind
        ),
        confidence: config.fallback_confidence,
        needs_image: false,
        escalated: false,
    }
}

/// Deterministic verdict derived from the handler's characterization
/// alone; used when no reasoning model is configured.
pub fn heuristic_verdict(record: &ErrorRecord, config: &ReasonerConfig) -> ReasonVerdict {
    fallback_verdict(record, config)
}

fn triage_meta(record: &ErrorRecord) -> InvokeMeta {
    InvokeMeta {
        doc_id: record.doc_id.clone(),
        modality: record.modality,
        stage: LedgerStage::Triage,
        page_count: 1,
    }
}

fn invoke_and_parse(
    request: &ModelRequest,
    record: &ErrorRecord,
    catalog: &CategoryCatalog,
    gateway: &Gateway,
) -> Option<ReasonVerdict> {
    let response = gateway.invoke(request, &triage_meta(record)).ok()?;
    parse_verdict(&response.raw_text, record, catalog)
}

/// Text-only classification of one error record. Malformed verdicts are
/// retried once; after that the discrepancy-kind fallback applies, so
/// every record receives exactly one verdict.
pub fn classify(
    record: &ErrorRecord,
    catalog: &CategoryCatalog,
    fewshots: &[FailureCase],
    gateway: &Gateway,
    config: &ReasonerConfig,
) -> ReasonVerdict {
    let request = build_triage_prompt(record, catalog, fewshots, config);
    for _attempt in 0..2 {
        if let Some(verdict) = invoke_and_parse(&request, record, catalog, gateway) {
            return verdict;
        }
    }
    fallback_verdict(record, config)
}

/// Whether the image round should run for this record and text verdict.
pub fn should_escalate(record: &ErrorRecord, prior: &ReasonVerdict, config: &ReasonerConfig) -> bool {
    prior.confidence < config.confidence_threshold
        || prior.needs_image
        || matches!(
            record.discrepancy.kind,
            DiscrepancyKind::Homoglyph | DiscrepancyKind::Misaligned
        )
}

/// Image-augmented second round. With no image available the prior verdict
/// is returned unchanged (`escalated` stays false). Otherwise the
/// higher-confidence verdict of the two rounds is returned with
/// `escalated` set.
pub fn escalate_with_image(
    record: &ErrorRecord,
    prior: &ReasonVerdict,
    images: &[ImagePayload],
    catalog: &CategoryCatalog,
    fewshots: &[FailureCase],
    gateway: &Gateway,
    config: &ReasonerConfig,
) -> ReasonVerdict {
    if images.is_empty() {
        return prior.clone();
    }
    let mut request = build_triage_prompt(record, catalog, fewshots, config);
    request.prompt_text.push_str("\nThe original page image is attached.\n");
    request.image_payloads = images.to_vec();

    let image_verdict = invoke_and_parse(&request, record, catalog, gateway);
    let mut best = match image_verdict {
        Some(verdict) if verdict.confidence >= prior.confidence => verdict,
        _ => prior.clone(),
    };
    best.escalated = true;
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::curated_failure_cases;
    use crate::gateway::{
        Cassette, CassetteMode, FinishState, GatewayConfig, ModelProvider, PriceTable,
        ProviderReply, TransportError,
    };
    use crate::prompt::Modality;
    use crate::triage::handler::Discrepancy;
    use std::collections::VecDeque;
    use std::sync::Mutex;

    struct ScriptedProvider {
        replies: Mutex<VecDeque<String>>,
    }

    impl ScriptedProvider {
        fn new(replies: &[&str]) -> Self {
            Self {
                replies: Mutex::new(replies.iter().map(|r| r.to_string()).collect()),
            }
        }
    }

    impl ModelProvider for ScriptedProvider {
        fn call(&self, _request: &ModelRequest) -> Result<ProviderReply, TransportError> {
            let text = self
                .replies
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or_else(|| "garbage".to_string());
            Ok(ProviderReply {
                raw_text: text,
                input_units: 10,
                output_units: 5,
                finish_state: FinishState::Complete,
            })
        }
    }

    fn scripted_gateway(replies: &[&str]) -> Gateway {
        let mut gateway = Gateway::new(
            Cassette::in_memory(CassetteMode::Passthrough),
            PriceTable::empty(),
            GatewayConfig {
                backoff_base: std::time::Duration::ZERO,
                ..GatewayConfig::default()
            },
        );
        gateway.register_provider("scripted", Box::new(ScriptedProvider::new(replies)));
        gateway
    }

    fn config() -> ReasonerConfig {
        ReasonerConfig {
            provider_id: "scripted".into(),
            model_id: "m".into(),
            ..ReasonerConfig::default()
        }
    }

    fn record(kind: DiscrepancyKind, pred: &str, gold: &str, notes: &str) -> ErrorRecord {
        ErrorRecord {
            error_id: "doc-1:lineItem.unitOfMeasure".into(),
            doc_id: "doc-1".into(),
            field_path: "lineItems[0].lineItem.unitOfMeasure".into(),
            pred_path: Some("lineItems[0].lineItem.unitOfMeasure".into()),
            predicted: pred.into(),
            gold: gold.into(),
            modality: Modality::OcrOnly,
            discrepancy: Discrepancy {
                kind,
                char_distance: 3,
                char_similarity: 0.0,
                notes: notes.into(),
            },
            related_entries: Vec::new(),
            ocr_context: None,
        }
    }

    #[test]
    fn prompt_carries_catalog_fewshots_and_details() {
        let rec = record(
            DiscrepancyKind::Homoglyph,
            "KL-8401",
            "KL-840I",
            "equal under character-confusion mapping (1<->I)",
        );
        let request = build_triage_prompt(
            &rec,
            CategoryCatalog::builtin(),
            curated_failure_cases(),
            &config(),
        );
        assert!(request.prompt_text.contains("character-confusion mapping"));
        assert!(request.prompt_text.contains("KL-840I"));
        assert!(request.prompt_text.contains("visual-character-confusion"));
        assert!(request.prompt_text.contains("OCR context unavailable"));
        for category in &CategoryCatalog::builtin().mid_level {
            assert!(request.prompt_text.contains(&category.id));
        }
    }

    #[test]
    fn closed_catalog_forbids_new_categories_in_prompt() {
        let mut catalog = CategoryCatalog::builtin().clone();
        catalog.open_set_allowed = false;
        let rec = record(DiscrepancyKind::Semantic, "Im", "Pcs", "similarity 0.000");
        let request = build_triage_prompt(&rec, &catalog, curated_failure_cases(), &config());
        assert!(request.prompt_text.contains("do not invent new categories"));
    }

    #[test]
    fn cause_string_resolves_to_catalog_category() {
        let gateway = scripted_gateway(&[
            r#"{"category": "misinterpretation of abbreviations", "cause": "Pcs misread", "confidence": 0.9, "needs_image": false}"#,
        ]);
        let rec = record(DiscrepancyKind::Semantic, "Im", "Pcs", "similarity 0.000");
        let verdict = classify(
            &rec,
            CategoryCatalog::builtin(),
            curated_failure_cases(),
            &gateway,
            &config(),
        );
        assert_eq!(
            verdict.category,
            VerdictCategory::Known("abbreviation-misinterpretation".into())
        );
        assert!(!verdict.escalated);
    }

    #[test]
    fn malformed_twice_falls_back_to_kind_mapping() {
        let gateway = scripted_gateway(&["not json", "still not json"]);
        let rec = record(DiscrepancyKind::Semantic, "Im", "Pcs", "similarity 0.000");
        let verdict = classify(
            &rec,
            CategoryCatalog::builtin(),
            curated_failure_cases(),
            &gateway,
            &config(),
        );
        assert_eq!(
            verdict.category,
            VerdictCategory::Known("schema-description-confusion".into())
        );
        assert_eq!(verdict.confidence, 0.3);
    }

    #[test]
    fn open_set_accepts_new_category() {
        let gateway = scripted_gateway(&[
            r#"{"category": "stamp-overlap", "cause": "a stamp covers the value", "confidence": 0.8}"#,
        ]);
        let rec = record(DiscrepancyKind::Semantic, "x", "y", "similarity 0.000");
        let verdict = classify(
            &rec,
            CategoryCatalog::builtin(),
            curated_failure_cases(),
            &gateway,
            &config(),
        );
        assert_eq!(verdict.category, VerdictCategory::New("stamp-overlap".into()));
    }

    #[test]
    fn closed_set_routes_unknown_to_fallback() {
        let mut catalog = CategoryCatalog::builtin().clone();
        catalog.open_set_allowed = false;
        let gateway = scripted_gateway(&[
            r#"{"category": "stamp-overlap", "cause": "x", "confidence": 0.8}"#,
            r#"{"category": "stamp-overlap", "cause": "x", "confidence": 0.8}"#,
        ]);
        let rec = record(DiscrepancyKind::Format, "002", "2", "aggressive equal");
        let verdict = classify(&rec, &catalog, curated_failure_cases(), &gateway, &config());
        assert_eq!(
            verdict.category,
            VerdictCategory::Known("text-format-misreading".into())
        );
        assert!(catalog.contains(verdict.category.label()));
    }

    #[test]
    fn escalation_triggers() {
        let rec_hom = record(DiscrepancyKind::Homoglyph, "a", "b", "");
        let rec_sem = record(DiscrepancyKind::Semantic, "a", "b", "");
        let confident = ReasonVerdict {
            error_id: "e".into(),
            category: VerdictCategory::Known("ocr-misalignment".into()),
            cause_text: String::new(),
            confidence: 0.95,
            needs_image: false,
            escalated: false,
        };
        let unsure = ReasonVerdict {
            confidence: 0.4,
            ..confident.clone()
        };
        let cfg = config();
        assert!(should_escalate(&rec_hom, &confident, &cfg), "homoglyph always escalates");
        assert!(should_escalate(&rec_sem, &unsure, &cfg), "low confidence escalates");
        assert!(!should_escalate(&rec_sem, &confident, &cfg));
        let needs = ReasonVerdict {
            needs_image: true,
            ..confident.clone()
        };
        assert!(should_escalate(&rec_sem, &needs, &cfg));
    }

    #[test]
    fn escalation_returns_higher_confidence_verdict() {
        let gateway = scripted_gateway(&[
            r#"{"category": "visual-character-confusion", "cause": "digit one", "confidence": 0.9}"#,
        ]);
        let rec = record(DiscrepancyKind::Homoglyph, "KL-8401", "KL-840I", "");
        let prior = ReasonVerdict {
            error_id: rec.error_id.clone(),
            category: VerdictCategory::Known("text-format-misreading".into()),
            cause_text: String::new(),
            confidence: 0.5,
            needs_image: true,
            escalated: false,
        };
        let images = vec![ImagePayload {
            media_type: "image/png".into(),
            bytes: vec![1, 2, 3],
        }];
        let verdict = escalate_with_image(
            &rec,
            &prior,
            &images,
            CategoryCatalog::builtin(),
            curated_failure_cases(),
            &gateway,
            &config(),
        );
        assert!(verdict.escalated);
        assert_eq!(
            verdict.category,
            VerdictCategory::Known("visual-character-confusion".into())
        );
        assert!(verdict.confidence >= prior.confidence);
    }

    #[test]
    fn escalation_without_image_returns_prior_unchanged() {
        let gateway = scripted_gateway(&[]);
        let rec = record(DiscrepancyKind::Homoglyph, "a", "b", "");
        let prior = ReasonVerdict {
            error_id: rec.error_id.clone(),
            category: VerdictCategory::Known("visual-character-confusion".into()),
            cause_text: String::new(),
            confidence: 0.5,
            needs_image: true,
            escalated: false,
        };
        let verdict = escalate_with_image(
            &rec,
            &prior,
            &[],
            CategoryCatalog::builtin(),
            curated_failure_cases(),
            &gateway,
            &config(),
        );
        assert_eq!(verdict, prior);
        assert!(!verdict.escalated);
        assert!(verdict.needs_image);
    }
}
