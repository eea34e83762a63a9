//! Deterministic first-pass error handler: logs every mismatch,
//! characterizes the discrepancy at character and semantic levels, and
//! retrieves related entries for downstream reasoning.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parse::normalize_value;
use crate::prompt::Modality;
use crate::record::{ExtractionRecord, KeyValuePair, PairPath};
use crate::schema::{ExtractionSchema, ValueKind};
use crate::score::MatchResult;

#[derive(Debug, Error)]
pub enum HandlerError {
    #[error("cannot characterize two empty values")]
    BothEmpty,
    #[error("values are canonically equal; matched pairs produce no records")]
    ValuesEqual,
}

/// Surface-level classification of one mismatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancyKind {
    Missing,
    Spurious,
    Format,
    NearMiss,
    Homoglyph,
    Swap,
    Misaligned,
    Semantic,
}

impl fmt::Display for DiscrepancyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self {
            Self::Missing => "missing",
            Self::Spurious => "spurious",
            Self::Format => "format",
            Self::NearMiss => "near_miss",
            Self::Homoglyph => "homoglyph",
            Self::Swap => "swap",
            Self::Misaligned => "misaligned",
            Self::Semantic => "semantic",
        };
        f.write_str(label)
    }
}

/// One characterized mismatch: kind plus character-level measurements on
/// the canonical strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub kind: DiscrepancyKind,
    pub char_distance: usize,
    pub char_similarity: f64,
    pub notes: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSide {
    Pred,
    Gold,
}

/// A flattened pair tagged with the record it came from.
#[derive(Debug, Clone)]
pub struct TaggedPair {
    pub side: PairSide,
    pub pair: KeyValuePair,
}

/// An entry retrieved as similar to the predicted value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelatedEntry {
    pub side: PairSide,
    pub path: String,
    pub value: String,
    pub similarity: f64,
}

/// One logged mismatch with its characterization, related entries, and the
/// OCR context window around the gold value when locatable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub error_id: String,
    pub doc_id: String,
    /// Canonical field path; the gold-side path when a gold value exists.
    pub field_path: String,
    /// Pred-side path when the record carries a predicted value.
    pub pred_path: Option<String>,
    pub predicted: String,
    pub gold: String,
    pub modality: Modality,
    pub discrepancy: Discrepancy,
    pub related_entries: Vec<RelatedEntry>,
    pub ocr_context: Option<String>,
}

/// Thresholds; the values here separate one-character confusions from
/// genuine misses on short identifier-like fields.
#[derive(Debug, Clone)]
pub struct HandlerConfig {
    /// Similarity at or above which a mismatch is a near miss.
    pub near_miss_threshold: f64,
    /// Similarity at or above which other entries are retrieved as related.
    pub related_threshold: f64,
    /// Characters kept on each side of a located gold value.
    pub context_window: usize,
    /// A document-level summary record is appended when more than this
    /// fraction of gold pairs went unmatched.
    pub document_summary_fraction: f64,
    /// Opt-in model-free semantic comparison for free-text fields: when
    /// set, a pair whose embedding cosine reaches this value counts as a
    /// near miss even if character similarity is low. 0.85 is the
    /// suggested value; deterministic rules stay the first line.
    pub free_text_semantic_threshold: Option<f64>,
}

impl Default for HandlerConfig {
    fn default() -> Self {
        Self {
            near_miss_threshold: 0.8,
            related_threshold: 0.9,
            context_window: 240,
            document_summary_fraction: 0.5,
            free_text_semantic_threshold: None,
        }
    }
}

const MAX_CONTEXT_CHARS: usize = 500;

/// Levenshtein distance over characters of the canonical strings.
pub fn char_distance(a: &str, b: &str) -> usize {
    strsim::levenshtein(a, b)
}

/// `1 - distance / max_length`; 0.0 when either string is empty and the
/// other is not.
pub fn char_similarity(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - char_distance(a, b) as f64 / max_len as f64
}

// ---------------------------------------------------------------------------
// Aggressive normalization (FORMAT detection)
// ---------------------------------------------------------------------------

/// Strips a trailing alphabetic unit from a numeric value: `8.00Pcs` and
/// `8.00 kg` both reduce to `8.00`.
fn strip_unit_suffix(text: &str) -> &str {
    let trimmed = text.trim_end_matches(|c: char| c.is_alphabetic());
    let trimmed = trimmed.trim_end();
    if trimmed.is_empty() || trimmed.len() == text.len() {
        return text;
    }
    if trimmed.starts_with(|c: char| c.is_ascii_digit())
        && trimmed.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',')
    {
        trimmed
    } else {
        text
    }
}

fn parse_numeric(text: &str) -> Option<f64> {
    let candidate = text.replace(',', ".");
    if candidate.is_empty() || !candidate.starts_with(|c: char| c.is_ascii_digit() || c == '.') {
        return None;
    }
    candidate.parse::<f64>().ok()
}

/// Strips leading zeros from every digit run, keeping at least one digit.
fn strip_leading_zeros(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut run: Vec<char> = Vec::new();
    for c in text.chars().chain(std::iter::once('\0')) {
        if c.is_ascii_digit() {
            run.push(c);
            continue;
        }
        if !run.is_empty() {
            let stripped: String = {
                let s: String = run.iter().collect();
                let t = s.trim_start_matches('0');
                if t.is_empty() { "0".to_string() } else { t.to_string() }
            };
            out.push_str(&stripped);
            run.clear();
        }
        if c != '\0' {
            out.push(c);
        }
    }
    out
}

/// The aggressive form used only for FORMAT detection: unit suffixes
/// stripped, numeric values reduced to their numeric identity, leading
/// zeros dropped from digit runs.
pub fn aggressive_normalize(text: &str) -> String {
    let stripped = strip_unit_suffix(text);
    if let Some(value) = parse_numeric(stripped) {
        // Numeric identity: "002", "2", and "2.00" all reduce to "2".
        return format!("{value}");
    }
    strip_leading_zeros(stripped)
}

// ---------------------------------------------------------------------------
// Confusable folding (HOMOGLYPH detection)
// ---------------------------------------------------------------------------

/// Greek capital lookalikes folded to Latin before class folding.
fn greek_to_latin(c: char) -> char {
    match c {
        'Α' => 'A',
        'Β' => 'B',
        'Ε' => 'E',
        'Ζ' => 'Z',
        'Η' => 'H',
        'Ι' => 'I',
        'Κ' => 'K',
        'Μ' => 'M',
        'Ν' => 'N',
        'Ο' => 'O',
        'Ρ' => 'P',
        'Τ' => 'T',
        'Υ' => 'Y',
        'Χ' => 'X',
        other => other,
    }
}

/// Folds a character to its visual-confusion class representative.
pub fn confusable_fold_char(c: char) -> char {
    match greek_to_latin(c) {
        'I' | 'l' | '|' | '1' => '1',
        'O' | '0' => '0',
        'S' | '5' => '5',
        'B' | '8' => '8',
        'Z' | '2' => '2',
        other => other,
    }
}

pub fn confusable_fold(text: &str) -> String {
    text.chars().map(confusable_fold_char).collect()
}

fn confusable_pairs_note(pred: &str, gold: &str) -> String {
    let pairs: Vec<String> = pred
        .chars()
        .zip(gold.chars())
        .filter(|(p, g)| p != g)
        .map(|(p, g)| format!("{p}<->{g}"))
        .collect();
    format!("equal under character-confusion mapping ({})", pairs.join(", "))
}

// ---------------------------------------------------------------------------
// Characterization
// ---------------------------------------------------------------------------

/// Characterizes one mismatch. Decision ladder: emptiness first, then
/// format equivalence, then confusable-character equivalence, then the
/// near-miss similarity threshold; everything else is semantic. Swap and
/// misaligned are assigned later by [`find_related`] upgrades.
pub fn characterize(
    pred_value: &str,
    gold_value: &str,
    kind: ValueKind,
    config: &HandlerConfig,
) -> Result<Discrepancy, HandlerError> {
    let pred = normalize_value(kind, pred_value);
    let gold = normalize_value(kind, gold_value);
    if pred.is_empty() && gold.is_empty() {
        return Err(HandlerError::BothEmpty);
    }
    let distance = char_distance(&pred, &gold);
    let similarity = char_similarity(&pred, &gold);

    if pred.is_empty() {
        return Ok(Discrepancy {
            kind: DiscrepancyKind::Missing,
            char_distance: distance,
            char_similarity: similarity,
            notes: "prediction empty, gold present".into(),
        });
    }
    if gold.is_empty() {
        return Ok(Discrepancy {
            kind: DiscrepancyKind::Spurious,
            char_distance: distance,
            char_similarity: similarity,
            notes: "prediction present, gold empty".into(),
        });
    }
    if pred == gold {
        return Err(HandlerError::ValuesEqual);
    }
    if aggressive_normalize(&pred) == aggressive_normalize(&gold) {
        return Ok(Discrepancy {
            kind: DiscrepancyKind::Format,
            char_distance: distance,
            char_similarity: similarity,
            notes: "equal after aggressive normalization".into(),
        });
    }
    if confusable_fold(&pred) == confusable_fold(&gold) {
        return Ok(Discrepancy {
            kind: DiscrepancyKind::Homoglyph,
            char_distance: distance,
            char_similarity: similarity,
            notes: confusable_pairs_note(&pred, &gold),
        });
    }
    if similarity >= config.near_miss_threshold {
        return Ok(Discrepancy {
            kind: DiscrepancyKind::NearMiss,
            char_distance: distance,
            char_similarity: similarity,
            notes: format!("similarity {similarity:.3}"),
        });
    }
    if kind == ValueKind::FreeText {
        if let Some(threshold) = config.free_text_semantic_threshold {
            use crate::triage::attribution::{cosine, Embedder, TrigramEmbedder};
            let embedder = TrigramEmbedder::fit([pred.as_str(), gold.as_str()]);
            if let (Ok(a), Ok(b)) = (embedder.embed(&pred), embedder.embed(&gold)) {
                let semantic_similarity = cosine(&a, &b);
                if semantic_similarity >= threshold {
                    return Ok(Discrepancy {
                        kind: DiscrepancyKind::NearMiss,
                        char_distance: distance,
                        char_similarity: similarity,
                        notes: format!("embedding cosine {semantic_similarity:.3}"),
                    });
                }
            }
        }
    }
    Ok(Discrepancy {
        kind: DiscrepancyKind::Semantic,
        char_distance: distance,
        char_similarity: similarity,
        notes: format!("similarity {similarity:.3}"),
    })
}

// ---------------------------------------------------------------------------
// Record construction
// ---------------------------------------------------------------------------

fn ocr_context_for(gold_value: &str, ocr_text: Option<&str>, window: usize) -> Option<String> {
    let text = ocr_text?;
    if gold_value.is_empty() {
        return None;
    }
    let at = text.find(gold_value)?;
    let chars: Vec<char> = text.chars().collect();
    let char_at = text[..at].chars().count();
    let start = char_at.saturating_sub(window);
    let end = (char_at + gold_value.chars().count() + window).min(chars.len());
    let mut context: String = chars[start..end].iter().collect();
    if context.chars().count() > MAX_CONTEXT_CHARS {
        context = context.chars().take(MAX_CONTEXT_CHARS).collect();
    }
    Some(context)
}

fn kind_for(schema: &ExtractionSchema, key: &str) -> ValueKind {
    schema.kind_of(key).unwrap_or(ValueKind::FreeText)
}

/// Builds one error record per unmatched gold pair and per unmatched pred
/// pair; a pred/gold pair on the same slot (same header key, or the same
/// key inside an aligned line-item pair) fuses into one record. A
/// document-level summary record is appended when more than half of the
/// gold pairs went unmatched.
pub fn build_error_records(
    match_result: &MatchResult,
    doc_id: &str,
    modality: Modality,
    schema: &ExtractionSchema,
    ocr_text: Option<&str>,
    config: &HandlerConfig,
) -> Vec<ErrorRecord> {
    let mut gold_consumed = vec![false; match_result.unmatched_gold.len()];
    let mut raw: Vec<(String, Option<String>, String, String)> = Vec::new();

    for pred_pair in &match_result.unmatched_pred {
        let gold_slot = match_result
            .unmatched_gold
            .iter()
            .enumerate()
            .find(|(gi, gold_pair)| {
                if gold_consumed[*gi] {
                    return false;
                }
                match (&pred_pair.path, &gold_pair.path) {
                    (PairPath::Header { key: pk }, PairPath::Header { key: gk }) => pk == gk,
                    (
                        PairPath::LineItem { index: pi, key: pk },
                        PairPath::LineItem { index: gi_, key: gk },
                    ) => pk == gk && match_result.alignment.get(pi) == Some(gi_),
                    _ => false,
                }
            })
            .map(|(gi, _)| gi);

        match gold_slot {
            Some(gi) => {
                gold_consumed[gi] = true;
                let gold_pair = &match_result.unmatched_gold[gi];
                raw.push((
                    gold_pair.path.to_string(),
                    Some(pred_pair.path.to_string()),
                    pred_pair.value.clone(),
                    gold_pair.value.clone(),
                ));
            }
            None => raw.push((
                pred_pair.path.to_string(),
                Some(pred_pair.path.to_string()),
                pred_pair.value.clone(),
                String::new(),
            )),
        }
    }
    for (gi, gold_pair) in match_result.unmatched_gold.iter().enumerate() {
        if !gold_consumed[gi] {
            raw.push((
                gold_pair.path.to_string(),
                None,
                String::new(),
                gold_pair.value.clone(),
            ));
        }
    }

    let mut path_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut records = Vec::with_capacity(raw.len());
    for (field_path, pred_path, predicted, gold) in raw {
        let key = field_path
            .parse::<PairPath>()
            .map(|p| p.key().to_string())
            .unwrap_or_else(|_| field_path.clone());
        let discrepancy = characterize(&predicted, &gold, kind_for(schema, &key), config)
            .expect("unmatched pairs always have one non-empty side");
        let seq = path_counts.entry(field_path.clone()).or_insert(0);
        let error_id = if *seq == 0 {
            format!("{doc_id}:{field_path}")
        } else {
            format!("{doc_id}:{field_path}#{seq}")
        };
        *seq += 1;
        records.push(ErrorRecord {
            error_id,
            doc_id: doc_id.to_string(),
            field_path,
            pred_path,
            predicted,
            gold: gold.clone(),
            modality,
            discrepancy,
            related_entries: Vec::new(),
            ocr_context: ocr_context_for(&gold, ocr_text, config.context_window),
        });
    }

    let gold_total = match_result.matched.len() + match_result.unmatched_gold.len();
    if gold_total > 0 {
        let unmatched_fraction = match_result.unmatched_gold.len() as f64 / gold_total as f64;
        if unmatched_fraction > config.document_summary_fraction {
            records.push(ErrorRecord {
                error_id: format!("{doc_id}:document"),
                doc_id: doc_id.to_string(),
                field_path: "document".to_string(),
                pred_path: None,
                predicted: String::new(),
                gold: String::new(),
                modality,
                discrepancy: Discrepancy {
                    kind: DiscrepancyKind::Semantic,
                    char_distance: 0,
                    char_similarity: 0.0,
                    notes: format!(
                        "document-level: {} of {gold_total} gold pairs unmatched",
                        match_result.unmatched_gold.len()
                    ),
                },
                related_entries: Vec::new(),
                ocr_context: None,
            });
        }
    }
    records
}

/// Collects all flattened pred and gold pairs of a document for related-
/// entry retrieval. Schema-driven, so unknown record keys are ignored.
pub fn tagged_pairs(
    pred: &ExtractionRecord,
    gold: &ExtractionRecord,
    schema: &ExtractionSchema,
) -> Vec<TaggedPair> {
    let mut pairs = Vec::new();
    let mut collect = |record: &ExtractionRecord, side: PairSide| {
        for field in &schema.header_fields {
            if let Some(values) = record.header.get(&field.key) {
                for value in values {
                    let canonical = normalize_value(field.kind, value);
                    if !canonical.is_empty() {
                        pairs.push(TaggedPair {
                            side,
                            pair: KeyValuePair::new(PairPath::header(&field.key), canonical),
                        });
                    }
                }
            }
        }
        for (index, item) in record.line_items.iter().enumerate() {
            for field in &schema.line_item_fields {
                if let Some(value) = item.get(&field.key) {
                    let canonical = normalize_value(field.kind, value);
                    if !canonical.is_empty() {
                        pairs.push(TaggedPair {
                            side,
                            pair: KeyValuePair::new(
                                PairPath::line_item(index, &field.key),
                                canonical,
                            ),
                        });
                    }
                }
            }
        }
    };
    collect(pred, PairSide::Pred);
    collect(gold, PairSide::Gold);
    pairs
}

/// Scans the document's pairs for values similar to the predicted value
/// and records them; the kind is upgraded to swap (predicted value equals
/// a gold value under a different key in the same line item) or misaligned
/// (equals the gold value of the same key in a different item).
///
/// Upgrades apply only to near-miss and semantic records with both values
/// present: emptiness kinds and the character-level explanations
/// (format, homoglyph) already account for their mismatch.
pub fn find_related(
    mut record: ErrorRecord,
    all_pairs: &[TaggedPair],
    config: &HandlerConfig,
) -> ErrorRecord {
    if record.predicted.is_empty() {
        return record;
    }

    let own_gold = record.field_path.parse::<PairPath>().ok();
    let own_pred = record
        .pred_path
        .as_ref()
        .and_then(|p| p.parse::<PairPath>().ok());

    let mut related: Vec<RelatedEntry> = Vec::new();
    for tagged in all_pairs {
        let is_own = match tagged.side {
            PairSide::Pred => own_pred.as_ref() == Some(&tagged.pair.path),
            PairSide::Gold => own_gold.as_ref() == Some(&tagged.pair.path),
        };
        if is_own {
            continue;
        }
        let similarity = char_similarity(&record.predicted, &tagged.pair.value);
        if similarity >= config.related_threshold {
            related.push(RelatedEntry {
                side: tagged.side,
                path: tagged.pair.path.to_string(),
                value: tagged.pair.value.clone(),
                similarity,
            });
        }
    }
    related.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.path.cmp(&b.path))
            .then_with(|| format!("{:?}", a.side).cmp(&format!("{:?}", b.side)))
    });
    record.related_entries = related;

    let upgradable = matches!(
        record.discrepancy.kind,
        DiscrepancyKind::NearMiss | DiscrepancyKind::Semantic
    ) && !record.gold.is_empty();
    if !upgradable {
        return record;
    }
    let Some(PairPath::LineItem { index: own_index, key: own_key }) = own_gold else {
        return record;
    };

    let mut swap: Option<String> = None;
    let mut misaligned: Option<String> = None;
    for entry in &record.related_entries {
        if entry.side != PairSide::Gold || entry.value != record.predicted {
            continue;
        }
        if let Ok(PairPath::LineItem { index, key }) = entry.path.parse::<PairPath>() {
            if index == own_index && key != own_key && swap.is_none() {
                swap = Some(entry.path.clone());
            }
            if index != own_index && key == own_key && misaligned.is_none() {
                misaligned = Some(entry.path.clone());
            }
        }
    }
    if let Some(path) = swap {
        record.discrepancy.kind = DiscrepancyKind::Swap;
        record.discrepancy.notes =
            format!("{}; predicted value is the gold of {path}", record.discrepancy.notes);
    } else if let Some(path) = misaligned {
        record.discrepancy.kind = DiscrepancyKind::Misaligned;
        record.discrepancy.notes =
            format!("{}; predicted value is the gold of {path}", record.discrepancy.notes);
    }
    record
}

/// Full handler pass for one document: build records from the match
/// result, then retrieve related entries and apply upgrades.
#[allow(clippy::too_many_arguments)]
pub fn analyze_document(
    match_result: &MatchResult,
    pred: &ExtractionRecord,
    gold: &ExtractionRecord,
    doc_id: &str,
    modality: Modality,
    schema: &ExtractionSchema,
    ocr_text: Option<&str>,
    config: &HandlerConfig,
) -> Vec<ErrorRecord> {
    let pairs = tagged_pairs(pred, gold, schema);
    build_error_records(match_result, doc_id, modality, schema, ocr_text, config)
        .into_iter()
        .map(|record| find_related(record, &pairs, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::match_document;

    fn cfg() -> HandlerConfig {
        HandlerConfig::default()
    }

    fn characterize_ok(pred: &str, gold: &str, kind: ValueKind) -> Discrepancy {
        characterize(pred, gold, kind, &cfg()).unwrap()
    }

    #[test]
    fn leading_zero_padding_is_format() {
        let d = characterize_ok("002", "2", ValueKind::Identifier);
        assert_eq!(d.kind, DiscrepancyKind::Format);
        assert!(d.char_distance > 0);
    }

    #[test]
    fn unit_suffix_is_format() {
        let d = characterize_ok("8.00Pcs", "8.00", ValueKind::Quantity);
        assert_eq!(d.kind, DiscrepancyKind::Format);
    }

    #[test]
    fn digit_letter_confusion_is_homoglyph() {
        let d = characterize_ok("KL-8401", "KL-840I", ValueKind::Identifier);
        assert_eq!(d.kind, DiscrepancyKind::Homoglyph);
        assert!(d.notes.contains("1<->I"));
    }

    #[test]
    fn greek_lookalikes_are_homoglyph() {
        let d = characterize_ok("\u{039c}\u{0397}\u{03a7}-1147Y", "MHX-1147Y", ValueKind::Identifier);
        assert_eq!(d.kind, DiscrepancyKind::Homoglyph);
    }

    #[test]
    fn unrelated_short_strings_are_semantic() {
        let d = characterize_ok("Im", "Pcs", ValueKind::FreeText);
        assert_eq!(d.kind, DiscrepancyKind::Semantic);
        assert_eq!(d.char_similarity, 0.0);
    }

    #[test]
    fn free_text_embedding_comparison_is_opt_in() {
        // Word-order paraphrases: low character similarity, high trigram
        // overlap. Off by default, upgrading only when enabled.
        let pred = "quantity extraction error";
        let gold = "error extracting quantity";
        let default = characterize(pred, gold, ValueKind::FreeText, &cfg()).unwrap();
        assert_eq!(default.kind, DiscrepancyKind::Semantic);

        let enabled = HandlerConfig {
            free_text_semantic_threshold: Some(0.5),
            ..cfg()
        };
        let upgraded = characterize(pred, gold, ValueKind::FreeText, &enabled).unwrap();
        assert_eq!(upgraded.kind, DiscrepancyKind::NearMiss);
        assert!(upgraded.notes.contains("embedding cosine"));

        // Identifier fields never take the embedding path.
        let identifier = characterize(pred, gold, ValueKind::Identifier, &enabled).unwrap();
        assert_eq!(identifier.kind, DiscrepancyKind::Semantic);
    }

    #[test]
    fn single_char_edit_on_long_value_is_near_miss() {
        let d = characterize_ok("KL-8402", "KL-8702", ValueKind::Identifier);
        assert_eq!(d.kind, DiscrepancyKind::NearMiss);
        assert!(d.char_similarity >= 0.8);
    }

    #[test]
    fn emptiness_kinds_and_symmetry() {
        let missing = characterize_ok("", "4578", ValueKind::Identifier);
        assert_eq!(missing.kind, DiscrepancyKind::Missing);
        let spurious = characterize_ok("4578", "", ValueKind::Identifier);
        assert_eq!(spurious.kind, DiscrepancyKind::Spurious);
        assert_eq!(missing.char_distance, spurious.char_distance);

        let a = characterize_ok("KL-8401", "KL-840I", ValueKind::Identifier);
        let b = characterize_ok("KL-840I", "KL-8401", ValueKind::Identifier);
        assert_eq!(a.kind, b.kind);
        assert_eq!(a.char_distance, b.char_distance);

        assert!(matches!(
            characterize("", "", ValueKind::FreeText, &cfg()),
            Err(HandlerError::BothEmpty)
        ));
        assert!(matches!(
            characterize("x", "x", ValueKind::FreeText, &cfg()),
            Err(HandlerError::ValuesEqual)
        ));
    }

    fn schema() -> ExtractionSchema {
        ExtractionSchema::delivery_note()
    }

    fn item(fields: &[(&str, &str)]) -> BTreeMap<String, String> {
        fields
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn record(headers: &[(&str, &str)], items: Vec<BTreeMap<String, String>>) -> ExtractionRecord {
        let mut record = ExtractionRecord::empty(&schema());
        for (k, v) in headers {
            record.set_header(k, *v);
        }
        record.line_items = items;
        record
    }

    fn analyze(pred: &ExtractionRecord, gold: &ExtractionRecord) -> Vec<ErrorRecord> {
        let result = match_document(pred, gold, &schema());
        analyze_document(
            &result,
            pred,
            gold,
            "doc-1",
            Modality::OcrOnly,
            &schema(),
            None,
            &cfg(),
        )
    }

    #[test]
    fn fully_matched_document_produces_no_records() {
        let gold = record(&[("documentDate", "2024-01-02")], vec![]);
        assert!(analyze(&gold.clone(), &gold).is_empty());
    }

    #[test]
    fn empty_prediction_produces_missing_record() {
        let gold = record(&[("deliveryNoteNumber", "4578")], vec![]);
        let pred = record(&[], vec![]);
        let records = analyze(&pred, &gold);
        // One field record plus the document-level summary (100% unmatched).
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].discrepancy.kind, DiscrepancyKind::Missing);
        assert_eq!(records[0].gold, "4578");
        assert_eq!(records[1].field_path, "document");
    }

    #[test]
    fn mismatch_on_same_slot_fuses_into_one_record() {
        let gold = record(&[("supplierId", "77")], vec![]);
        let pred = record(&[("supplierId", "99")], vec![]);
        let records = analyze(&pred, &gold);
        let field_records: Vec<_> = records.iter().filter(|r| r.field_path != "document").collect();
        assert_eq!(field_records.len(), 1);
        assert_eq!(field_records[0].predicted, "99");
        assert_eq!(field_records[0].gold, "77");
    }

    #[test]
    fn document_summary_appears_over_half_unmatched() {
        let gold = record(
            &[
                ("documentDate", "2024-01-02"),
                ("supplierId", "77"),
                ("deliveryNoteNumber", "4578"),
            ],
            vec![],
        );
        // One of three matches: 2/3 unmatched > 1/2.
        let pred = record(&[("documentDate", "2024-01-02")], vec![]);
        let records = analyze(&pred, &gold);
        assert!(records.iter().any(|r| r.field_path == "document"));
        assert_eq!(records.iter().filter(|r| r.field_path != "document").count(), 2);
    }

    #[test]
    fn neighbor_row_copy_upgrades_to_misaligned() {
        let gold = record(
            &[],
            vec![
                item(&[("lineItem.itemNumber", "1"), ("lineItem.quantity", "3")]),
                item(&[("lineItem.itemNumber", "2"), ("lineItem.quantity", "12")]),
            ],
        );
        let mut pred = gold.clone();
        pred.line_items[0].insert("lineItem.quantity".to_string(), "12".to_string());
        let records = analyze(&pred, &gold);
        let field_records: Vec<_> = records.iter().filter(|r| r.field_path != "document").collect();
        assert_eq!(field_records.len(), 1);
        assert_eq!(field_records[0].discrepancy.kind, DiscrepancyKind::Misaligned);
        assert!(!field_records[0].related_entries.is_empty());
    }

    #[test]
    fn adjacent_field_copy_upgrades_to_swap() {
        let gold = record(
            &[],
            vec![item(&[
                ("lineItem.itemNumber", "1"),
                ("lineItem.quantity", "13"),
                ("lineItem.unitOfMeasure", "Pcs"),
            ])],
        );
        let mut pred = gold.clone();
        // The model put the quantity into the item-number slot.
        pred.line_items[0].insert("lineItem.itemNumber".to_string(), "13".to_string());
        let records = analyze(&pred, &gold);
        let record = records
            .iter()
            .find(|r| r.field_path.contains("itemNumber"))
            .unwrap();
        assert_eq!(record.discrepancy.kind, DiscrepancyKind::Swap);
    }

    #[test]
    fn unrelated_values_leave_record_unchanged() {
        let gold = record(&[("supplierId", "12345678")], vec![]);
        let pred = record(&[("supplierId", "ZZZZYYYY")], vec![]);
        let records = analyze(&pred, &gold);
        let field_records: Vec<_> = records.iter().filter(|r| r.field_path != "document").collect();
        assert_eq!(field_records[0].discrepancy.kind, DiscrepancyKind::Semantic);
        assert!(field_records[0].related_entries.is_empty());
    }

    #[test]
    fn ocr_context_is_located_and_bounded() {
        let gold = record(&[("deliveryNoteNumber", "4578")], vec![]);
        let pred = record(&[], vec![]);
        let long_text = format!("{} 4578 {}", "x".repeat(600), "y".repeat(600));
        let result = match_document(&pred, &gold, &schema());
        let records = build_error_records(
            &result,
            "doc-1",
            Modality::OcrOnly,
            &schema(),
            Some(&long_text),
            &cfg(),
        );
        let context = records[0].ocr_context.as_ref().unwrap();
        assert!(context.contains("4578"));
        assert!(context.chars().count() <= 500);
    }
}
