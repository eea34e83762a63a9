//! Turning raw model text into canonical records: wrapper stripping, JSON
//! repair, null coercion, and per-kind value normalization.

use serde_json::Value;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::record::{ExtractionRecord, Violation};
use crate::schema::{ExtractionSchema, ValueKind, LINE_ITEMS_KEY};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("unparseable model output: {0}")]
    Unparseable(String),
}

/// Result of parsing one model response: the canonical record plus every
/// violation encountered while coercing the payload into shape.
#[derive(Debug, Clone)]
pub struct ParsedRecord {
    pub record: ExtractionRecord,
    pub violations: Vec<Violation>,
}

// ---------------------------------------------------------------------------
// JSON repair
// ---------------------------------------------------------------------------

/// Repairs the common defects of model-emitted JSON: code-fence wrappers,
/// surrounding prose, and trailing commas before `}` / `]`.
///
/// Already-valid input is returned byte-identically. Otherwise the repaired
/// text is validated before being returned.
pub fn repair_json(raw: &str) -> Result<String, ParseError> {
    if serde_json::from_str::<Value>(raw).is_ok() {
        return Ok(raw.to_string());
    }

    let mut text = raw.trim().to_string();
    if let Some(inner) = strip_code_fence(&text) {
        text = inner;
    }
    if serde_json::from_str::<Value>(&text).is_ok() {
        return Ok(text);
    }
    if let Some(object) = extract_balanced_object(&text) {
        text = object;
    }
    if serde_json::from_str::<Value>(&text).is_ok() {
        return Ok(text);
    }
    let text = remove_trailing_commas(&text);
    if serde_json::from_str::<Value>(&text).is_ok() {
        return Ok(text);
    }

    let head: String = raw.chars().take(60).collect();
    Err(ParseError::Unparseable(format!(
        "no balanced JSON object recovered (input starts with {head:?})"
    )))
}

/// Content of the first fenced block, tag line removed, or None.
fn strip_code_fence(text: &str) -> Option<String> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    // Skip an optional language tag up to the first newline.
    let content_start = match after.find('\n') {
        Some(pos) if after[..pos].trim().chars().all(|c| c.is_ascii_alphanumeric()) => pos + 1,
        _ => 0,
    };
    let content = &after[content_start..];
    let end = content.find("```").unwrap_or(content.len());
    let inner = content[..end].trim();
    if inner.is_empty() {
        None
    } else {
        Some(inner.to_string())
    }
}

/// The first balanced `{...}` span, string-aware.
fn extract_balanced_object(text: &str) -> Option<String> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, ch) in text[start..].char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else {
                match ch {
                    '\\' => escaped = true,
                    '"' => in_string = false,
                    _ => {}
                }
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..start + offset + ch.len_utf8()].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

/// Drops commas whose next non-whitespace character closes an object or
/// array. String-aware.
fn remove_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &ch) in chars.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else {
                match ch {
                    '\\' => escaped = true,
                    '"' => in_string = false,
                    _ => {}
                }
            }
            out.push(ch);
            continue;
        }
        match ch {
            '"' => {
                in_string = true;
                out.push(ch);
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some('}') | Some(']')) {
                    out.push(ch);
                }
            }
            _ => out.push(ch),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Record parsing
// ---------------------------------------------------------------------------

fn is_null_like_marker(value: &str) -> bool {
    matches!(
        value.trim().to_ascii_lowercase().as_str(),
        "null" | "none" | "nil"
    )
}

/// Scalar JSON value as a string; JSON null becomes the empty string.
fn scalar_to_string(value: &Value) -> String {
    match value {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        other => other.to_string(),
    }
}

/// Parses raw model output into a canonical [`ExtractionRecord`].
///
/// Applies [`repair_json`], then coerces the payload into shape: JSON nulls
/// and null-like string markers become empty strings (markers are reported
/// as violations), scalars where lists are expected are wrapped, unknown
/// keys are reported and dropped, and every schema key is present in the
/// result. The returned record always passes
/// [`crate::record::validate_record`].
pub fn parse_record(raw_text: &str, schema: &ExtractionSchema) -> Result<ParsedRecord, ParseError> {
    let repaired = repair_json(raw_text)?;
    let value: Value = serde_json::from_str(&repaired)
        .expect("repair_json output is valid JSON");
    let top = value
        .as_object()
        .ok_or_else(|| ParseError::Unparseable("top-level JSON value is not an object".into()))?;

    let mut violations = Vec::new();
    let mut record = ExtractionRecord::empty(schema);

    for (key, raw_value) in top {
        if key == LINE_ITEMS_KEY {
            continue;
        }
        let Some(field) = schema.header_field(key) else {
            violations.push(Violation::UnknownKey { path: key.clone() });
            continue;
        };
        let raw_values: Vec<String> = match raw_value {
            Value::Array(items) => items.iter().map(scalar_to_string).collect(),
            scalar => vec![scalar_to_string(scalar)],
        };
        let mut values = Vec::with_capacity(raw_values.len());
        for raw in raw_values {
            let coerced = if is_null_like_marker(&raw) && !raw.trim().is_empty() {
                violations.push(Violation::NullLikeValue { path: key.clone() });
                String::new()
            } else {
                raw
            };
            values.push(normalize_value(field.kind, &coerced));
        }
        if values.is_empty() {
            values.push(String::new());
        }
        record.header.insert(key.clone(), values);
    }

    record.line_items = parse_line_items(top.get(LINE_ITEMS_KEY), schema, &mut violations);

    Ok(ParsedRecord { record, violations })
}

fn parse_line_items(
    raw: Option<&Value>,
    schema: &ExtractionSchema,
    violations: &mut Vec<Violation>,
) -> Vec<std::collections::BTreeMap<String, String>> {
    let items: Vec<&Value> = match raw {
        None | Some(Value::Null) => return Vec::new(),
        Some(Value::Array(items)) => items.iter().collect(),
        // A single unwrapped item object is accepted as a one-element list.
        Some(obj @ Value::Object(_)) => vec![obj],
        Some(_) => {
            violations.push(Violation::MalformedItem {
                path: LINE_ITEMS_KEY.to_string(),
            });
            return Vec::new();
        }
    };
    if schema.line_item_fields.is_empty() {
        if !items.is_empty() {
            violations.push(Violation::UnknownKey {
                path: LINE_ITEMS_KEY.to_string(),
            });
        }
        return Vec::new();
    }

    let mut parsed = Vec::with_capacity(items.len());
    for (index, item_value) in items.iter().enumerate() {
        let mut item: std::collections::BTreeMap<String, String> = schema
            .line_item_fields
            .iter()
            .map(|f| (f.key.clone(), String::new()))
            .collect();
        match item_value.as_object() {
            None => {
                violations.push(Violation::MalformedItem {
                    path: format!("{LINE_ITEMS_KEY}[{index}]"),
                });
            }
            Some(fields) => {
                for (key, raw_value) in fields {
                    let path = format!("{LINE_ITEMS_KEY}[{index}].{key}");
                    let Some(field) = schema.line_item_field(key) else {
                        violations.push(Violation::UnknownKey { path });
                        continue;
                    };
                    let raw = scalar_to_string(raw_value);
                    let coerced = if is_null_like_marker(&raw) && !raw.trim().is_empty() {
                        violations.push(Violation::NullLikeValue { path });
                        String::new()
                    } else {
                        raw
                    };
                    item.insert(key.clone(), normalize_value(field.kind, &coerced));
                }
            }
        }
        parsed.push(item);
    }
    parsed
}

// ---------------------------------------------------------------------------
// Value normalization
// ---------------------------------------------------------------------------

/// Canonicalizes a raw value for its field kind. Total and idempotent.
///
/// Every kind gets Unicode NFC, trimming, and internal-whitespace collapse.
/// Dates are reformatted to `YYYY-MM-DD` when the source format is
/// unambiguous (dotted dates are day-first, slashed dates month-first and
/// only converted when the day-first reading is impossible); otherwise they
/// stay verbatim. Country and currency codes are upper-cased. Quantities and
/// identifiers keep digits, separators, and leading zeros exactly as
/// written.
pub fn normalize_value(kind: ValueKind, raw: &str) -> String {
    let base = collapse_whitespace(&raw.nfc().collect::<String>());
    match kind {
        ValueKind::Date => normalize_date(&base),
        ValueKind::Country | ValueKind::Currency => base.to_uppercase(),
        ValueKind::Quantity | ValueKind::Identifier | ValueKind::FreeText => base,
    }
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_leap_year(year: u32) -> bool {
    (year.is_multiple_of(4) && !year.is_multiple_of(100)) || year.is_multiple_of(400)
}

fn days_in_month(year: u32, month: u32) -> u32 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if is_leap_year(year) => 29,
        2 => 28,
        _ => 0,
    }
}

fn valid_date(year: u32, month: u32, day: u32) -> bool {
    (1..=9999).contains(&year) && (1..=12).contains(&month) && day >= 1 && day <= days_in_month(year, month)
}

/// Splits `text` on `sep` into exactly three all-digit components.
fn three_numbers(text: &str, sep: char) -> Option<(u32, u32, u32)> {
    let mut parts = text.split(sep);
    let a = parts.next()?;
    let b = parts.next()?;
    let c = parts.next()?;
    if parts.next().is_some() {
        return None;
    }
    for p in [a, b, c] {
        if p.is_empty() || p.len() > 4 || !p.chars().all(|ch| ch.is_ascii_digit()) {
            return None;
        }
    }
    Some((a.parse().ok()?, b.parse().ok()?, c.parse().ok()?))
}

fn normalize_date(text: &str) -> String {
    if let Some((y, m, d)) = three_numbers(text, '-') {
        if valid_date(y, m, d) {
            return format!("{y:04}-{m:02}-{d:02}");
        }
    }
    if let Some((d, m, y)) = three_numbers(text, '.') {
        // Dotted dates are read day-first.
        if valid_date(y, m, d) {
            return format!("{y:04}-{m:02}-{d:02}");
        }
    }
    if let Some((m, d, y)) = three_numbers(text, '/') {
        // Slashed dates are read month-first, but only converted when the
        // day-first reading is impossible; otherwise the value is ambiguous
        // and a wrong guess would silently corrupt scoring.
        let month_first = valid_date(y, m, d);
        let day_first = valid_date(y, d, m);
        if month_first && !day_first {
            return format!("{y:04}-{m:02}-{d:02}");
        }
    }
    text.to_string()
}
