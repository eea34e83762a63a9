//! Extraction-prompt construction: template variants, per-modality input
//! wiring, and the canonical rendering of format instructions.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{ExtractionSchema, ValueKind};

/// Placeholder substituted into the OCR slot when a modality carries no
/// serialized text.
pub const OCR_UNAVAILABLE_MARKER: &str = "[no OCR text provided]";

const PLACEHOLDERS: [&str; 3] = ["{format_instructions}", "{document_schema}", "{ocr_content}"];

const BASELINE_BODY: &str = include_str!("../assets/prompt_baseline.txt");
const REFINED_BODY: &str = include_str!("../assets/prompt_refined.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("modality {modality} requires {missing}")]
    MissingInput {
        modality: Modality,
        missing: &'static str,
    },
    #[error("template body must contain placeholder {0:?} exactly once")]
    BadTemplate(&'static str),
}

/// Input configuration of an evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    ImageOnly,
    OcrOnly,
    ImagePlusOcr,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::ImageOnly, Modality::OcrOnly, Modality::ImagePlusOcr];

    pub fn label(&self) -> &'static str {
        match self {
            Modality::ImageOnly => "Image-only",
            Modality::OcrOnly => "OCR-only",
            Modality::ImagePlusOcr => "Image + OCR",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Which prompt variant to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Baseline,
    Refined,
}

/// A prompt template: body text with the three placeholders plus the list
/// of output constraints the body states verbatim.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub body: String,
    pub static_rules: Vec<String>,
}

impl PromptTemplate {
    pub fn new(
        template_id: TemplateId,
        body: String,
        static_rules: Vec<String>,
    ) -> Result<Self, PromptError> {
        for placeholder in PLACEHOLDERS {
            if body.matches(placeholder).count() != 1 {
                return Err(PromptError::BadTemplate(placeholder));
            }
        }
        Ok(Self {
            template_id,
            body,
            static_rules,
        })
    }

    /// The built-in template for a variant.
    pub fn builtin(template_id: TemplateId) -> &'static PromptTemplate {
        static BASELINE: OnceLock<PromptTemplate> = OnceLock::new();
        static REFINED: OnceLock<PromptTemplate> = OnceLock::new();
        match template_id {
            TemplateId::Baseline => BASELINE.get_or_init(|| {
                PromptTemplate::new(
                    TemplateId::Baseline,
                    BASELINE_BODY.to_string(),
                    vec![
                        "Return date fields in YYYY-MM-DD format.".into(),
                        "For country and currency use ISO format.".into(),
                        "Do not include the schema in the answer.".into(),
                        "Return missing values as empty string.".into(),
                        "Always return valid json and don't wrap you response in backticks!".into(),
                        "Do not include a comma before the closing curly bracket.".into(),
                    ],
                )
                .expect("built-in baseline template is well-formed")
            }),
            TemplateId::Refined => REFINED.get_or_init(|| {
                PromptTemplate::new(
                    TemplateId::Refined,
                    REFINED_BODY.to_string(),
                    vec![
                        "Return date fields in YYYY-MM-DD format.".into(),
                        "For country and currency, use ISO format.".into(),
                        "Do not include the schema in the answer.".into(),
                        "Ensure that all fields are returned as valid values or empty strings (\"\"), rather than null.".into(),
                        "If a field does not have a value, return it as an empty string.".into(),
                        "Always return valid JSON and do not wrap your response in backticks!".into(),
                        "Ensure that the JSON structure is valid and does not contain any extra commas or brackets.".into(),
                        "Each object should be properly closed without trailing commas.".into(),
                    ],
                )
                .expect("built-in refined template is well-formed")
            }),
        }
    }
}

/// A fully built prompt for one modality: the text plus the image handles
/// to attach.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityRequest {
    pub modality: Modality,
    pub prompt_text: String,
    pub image_refs: Vec<String>,
}

/// Builds the extraction prompt for a modality.
///
/// Inputs not consumed by the modality are dropped: an OCR-only request
/// never carries image handles, and an image-only request gets the
/// [`OCR_UNAVAILABLE_MARKER`] in its OCR slot. Inputs the modality demands
/// must be present.
pub fn build_prompt(
    schema: &ExtractionSchema,
    modality: Modality,
    ocr_text: Option<&str>,
    images: Option<&[String]>,
    template_id: TemplateId,
) -> Result<ModalityRequest, PromptError> {
    let has_images = images.map(|refs| !refs.is_empty()).unwrap_or(false);
    let needs_images = matches!(modality, Modality::ImageOnly | Modality::ImagePlusOcr);
    let needs_ocr = matches!(modality, Modality::OcrOnly | Modality::ImagePlusOcr);

    if needs_images && !has_images {
        return Err(PromptError::MissingInput {
            modality,
            missing: "at least one page image",
        });
    }
    if needs_ocr && ocr_text.is_none() {
        return Err(PromptError::MissingInput {
            modality,
            missing: "serialized OCR text",
        });
    }

    let template = PromptTemplate::builtin(template_id);
    let ocr_slot = if needs_ocr {
        ocr_text.expect("checked above")
    } else {
        OCR_UNAVAILABLE_MARKER
    };

    // The OCR slot is filled last so document text can never be rescanned
    // for the other placeholders.
    let mut prompt_text = template
        .body
        .replace("{format_instructions}", &render_format_instructions(schema))
        .replace("{document_schema}", &render_schema_note(schema))
        .replace("{ocr_content}", ocr_slot);

    let image_refs = if needs_images {
        let refs = images.expect("checked above").to_vec();
        prompt_text.push_str("\nHere is the image:\n");
        refs
    } else {
        Vec::new()
    };

    Ok(ModalityRequest {
        modality,
        prompt_text,
        image_refs,
    })
}

fn kind_label(kind: ValueKind) -> &'static str {
    match kind {
        ValueKind::Date => "date",
        ValueKind::Country => "country",
        ValueKind::Currency => "currency",
        ValueKind::Quantity => "quantity",
        ValueKind::Identifier => "identifier",
        ValueKind::FreeText => "free text",
    }
}

fn field_placeholder(kind: ValueKind, description: &str) -> String {
    let description = description.trim();
    if description.is_empty() {
        format!("<{}>", kind_label(kind))
    } else {
        format!("<{}: {}>", kind_label(kind), description)
    }
}

/// Renders the canonical format instructions for a schema: output-shape
/// rules plus every field key with its kind and description, shown once
/// inside the expected JSON skeleton.
pub fn render_format_instructions(schema: &ExtractionSchema) -> String {
    let mut out = String::from(
        "Respond with exactly one JSON object. Header fields map to arrays of strings; \
         return every key even when no value was found",
    );
    if schema.line_item_fields.is_empty() {
        out.push_str(". Use this shape, replacing each angle-bracket placeholder with the extracted value:\n");
    } else {
        out.push_str(
            ". Line items are objects with one string value per key, listed in reading order. \
             Use this shape, replacing each angle-bracket placeholder with the extracted value:\n",
        );
    }
    out.push_str("{\n");
    for (i, field) in schema.header_fields.iter().enumerate() {
        let comma = if i + 1 < schema.header_fields.len() || !schema.line_item_fields.is_empty() {
            ","
        } else {
            ""
        };
        out.push_str(&format!(
            "  \"{}\": [\"{}\"]{comma}\n",
            field.key,
            field_placeholder(field.kind, &field.description)
        ));
    }
    if !schema.line_item_fields.is_empty() {
        out.push_str("  \"lineItems\": [\n    {\n");
        for (i, field) in schema.line_item_fields.iter().enumerate() {
            let comma = if i + 1 < schema.line_item_fields.len() { "," } else { "" };
            out.push_str(&format!(
                "      \"{}\": \"{}\"{comma}\n",
                field.key,
                field_placeholder(field.kind, &field.description)
            ));
        }
        out.push_str("    }\n  ]\n");
    }
    out.push('}');
    out
}

/// One-line schema identification for the `{document_schema}` slot. Field
/// keys live in the format instructions, so each key appears in the final
/// prompt exactly once.
pub fn render_schema_note(schema: &ExtractionSchema) -> String {
    if schema.line_item_fields.is_empty() {
        format!(
            "The target document schema is \"{}\" with {} header fields, all listed above",
            schema.name,
            schema.header_fields.len()
        )
    } else {
        format!(
            "The target document schema is \"{}\" with {} header fields and {} line-item fields, all listed above",
            schema.name,
            schema.header_fields.len(),
            schema.line_item_fields.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{FieldScope, FieldSpec};

    fn schema() -> ExtractionSchema {
        ExtractionSchema::delivery_note()
    }

    #[test]
    fn ocr_only_baseline_contains_rules_and_text() {
        let request = build_prompt(
            &schema(),
            Modality::OcrOnly,
            Some("SERIALIZED OCR BODY"),
            None,
            TemplateId::Baseline,
        )
        .unwrap();
        assert!(request.prompt_text.contains("Return date fields in YYYY-MM-DD format"));
        assert!(request.prompt_text.contains("SERIALIZED OCR BODY"));
        assert!(request.image_refs.is_empty());
    }

    #[test]
    fn image_only_refined_contains_null_rule() {
        let images = vec!["page0.png".to_string()];
        let request = build_prompt(
            &schema(),
            Modality::ImageOnly,
            None,
            Some(&images),
            TemplateId::Refined,
        )
        .unwrap();
        assert!(request.prompt_text.contains("rather than null"));
        assert!(request.prompt_text.contains(OCR_UNAVAILABLE_MARKER));
        assert_eq!(request.image_refs, images);
    }

    #[test]
    fn missing_ocr_input_is_rejected() {
        let err = build_prompt(&schema(), Modality::OcrOnly, None, None, TemplateId::Baseline)
            .unwrap_err();
        assert!(matches!(err, PromptError::MissingInput { .. }));
    }

    #[test]
    fn missing_images_are_rejected_for_image_modalities() {
        for modality in [Modality::ImageOnly, Modality::ImagePlusOcr] {
            let err = build_prompt(&schema(), modality, Some("ocr"), None, TemplateId::Baseline)
                .unwrap_err();
            assert!(matches!(err, PromptError::MissingInput { .. }));
        }
    }

    #[test]
    fn every_schema_key_appears_exactly_once() {
        let request = build_prompt(
            &schema(),
            Modality::OcrOnly,
            Some("ocr"),
            None,
            TemplateId::Baseline,
        )
        .unwrap();
        let all_fields = schema().header_fields.into_iter().chain(schema().line_item_fields);
        for field in all_fields {
            let quoted = format!("\"{}\"", field.key);
            assert_eq!(
                request.prompt_text.matches(&quoted).count(),
                1,
                "key {} must appear exactly once",
                field.key
            );
        }
    }

    #[test]
    fn static_rules_appear_verbatim_in_bodies() {
        for id in [TemplateId::Baseline, TemplateId::Refined] {
            let template = PromptTemplate::builtin(id);
            for rule in &template.static_rules {
                assert!(template.body.contains(rule), "{id:?} missing rule {rule:?}");
            }
        }
    }

    #[test]
    fn baseline_starts_with_persona() {
        assert!(PromptTemplate::builtin(TemplateId::Baseline)
            .body
            .starts_with("You are a warehouse manager receiving a delivery."));
    }

    #[test]
    fn header_only_schema_renders_without_line_items() {
        let small = ExtractionSchema::new(
            "header_only",
            vec![
                FieldSpec::new("documentDate", FieldScope::Header, ValueKind::Date, "Issue date."),
                FieldSpec::new("supplierId", FieldScope::Header, ValueKind::Identifier, ""),
            ],
            vec![],
        )
        .unwrap();
        let instructions = render_format_instructions(&small);
        assert!(instructions.contains("\"documentDate\""));
        assert!(instructions.contains("\"supplierId\""));
        assert!(!instructions.contains("lineItems"));
        assert!(!instructions.contains("\n\n"), "no blank lines expected");
    }

    #[test]
    fn full_schema_lists_line_items_with_all_keys() {
        let instructions = render_format_instructions(&schema());
        assert!(instructions.contains("\"lineItems\""));
        for field in &schema().line_item_fields {
            assert!(instructions.contains(&format!("\"{}\"", field.key)));
        }
    }

    #[test]
    fn building_twice_is_idempotent() {
        let build = || {
            build_prompt(
                &schema(),
                Modality::ImagePlusOcr,
                Some("ocr"),
                Some(&["a.png".to_string()]),
                TemplateId::Refined,
            )
            .unwrap()
        };
        assert_eq!(build(), build());
    }
}
