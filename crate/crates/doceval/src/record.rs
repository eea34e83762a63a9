//! Structured extraction records and their flattening into addressable
//! key-value pairs.
//!
//! A record mirrors the wire shape model responses arrive in: header keys
//! map to lists of string values (ground truth may list acceptable
//! alternatives), and `lineItems` is an ordered array of objects with one
//! string value per key. After canonicalization every schema key is present;
//! missing values are the empty string, never absent keys.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parse::normalize_value;
use crate::schema::{ExtractionSchema, LINE_ITEMS_KEY};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("record key {0:?} is not part of the schema")]
    UnknownKey(String),
}

/// A structured prediction or ground-truth record.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub header: BTreeMap<String, Vec<String>>,
    pub line_items: Vec<BTreeMap<String, String>>,
}

impl ExtractionRecord {
    /// A record with every schema key present and all values empty.
    pub fn empty(schema: &ExtractionSchema) -> Self {
        Self {
            header: schema
                .header_fields
                .iter()
                .map(|f| (f.key.clone(), vec![String::new()]))
                .collect(),
            line_items: Vec::new(),
        }
    }

    /// Convenience setter for a single-valued header field.
    pub fn set_header(&mut self, key: &str, value: impl Into<String>) {
        self.header.insert(key.to_string(), vec![value.into()]);
    }

    /// Renders the record in its wire shape: header keys at the top level
    /// (values as arrays of strings) plus a `lineItems` array of objects.
    pub fn to_wire_json(&self) -> serde_json::Value {
        let mut top = serde_json::Map::new();
        for (key, values) in &self.header {
            top.insert(
                key.clone(),
                serde_json::Value::Array(
                    values
                        .iter()
                        .map(|v| serde_json::Value::String(v.clone()))
                        .collect(),
                ),
            );
        }
        let items: Vec<serde_json::Value> = self
            .line_items
            .iter()
            .map(|item| {
                serde_json::Value::Object(
                    item.iter()
                        .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                        .collect(),
                )
            })
            .collect();
        top.insert(LINE_ITEMS_KEY.to_string(), serde_json::Value::Array(items));
        serde_json::Value::Object(top)
    }
}

/// Address of one flattened value: a header key, or an indexed line-item
/// cell rendered as `lineItems[<index>].<key>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PairPath {
    Header { key: String },
    LineItem { index: usize, key: String },
}

impl PairPath {
    pub fn header(key: impl Into<String>) -> Self {
        Self::Header { key: key.into() }
    }

    pub fn line_item(index: usize, key: impl Into<String>) -> Self {
        Self::LineItem {
            index,
            key: key.into(),
        }
    }

    /// The schema key this path addresses, without any item index.
    pub fn key(&self) -> &str {
        match self {
            Self::Header { key } => key,
            Self::LineItem { key, .. } => key,
        }
    }

    pub fn item_index(&self) -> Option<usize> {
        match self {
            Self::Header { .. } => None,
            Self::LineItem { index, .. } => Some(*index),
        }
    }
}

impl fmt::Display for PairPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Header { key } => write!(f, "{key}"),
            Self::LineItem { index, key } => write!(f, "lineItems[{index}].{key}"),
        }
    }
}

#[derive(Debug, Error)]
#[error("invalid pair path {0:?}")]
pub struct PairPathParseError(String);

impl FromStr for PairPath {
    type Err = PairPathParseError;

    /// Accepts exactly the grammar `key` or `lineItems[<non-negative int>].<key>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(rest) = s.strip_prefix("lineItems[") {
            let (index_text, key) = rest
                .split_once("].")
                .ok_or_else(|| PairPathParseError(s.to_string()))?;
            if key.is_empty()
                || index_text.is_empty()
                || !index_text.chars().all(|c| c.is_ascii_digit())
            {
                return Err(PairPathParseError(s.to_string()));
            }
            let index: usize = index_text
                .parse()
                .map_err(|_| PairPathParseError(s.to_string()))?;
            Ok(Self::line_item(index, key))
        } else if s.is_empty() || s.contains('[') || s.contains(']') {
            Err(PairPathParseError(s.to_string()))
        } else {
            Ok(Self::header(s))
        }
    }
}

/// One flattened, canonical key-value pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyValuePair {
    pub path: PairPath,
    pub value: String,
}

impl KeyValuePair {
    pub fn new(path: PairPath, value: impl Into<String>) -> Self {
        Self {
            path,
            value: value.into(),
        }
    }
}

/// A single invariant violation found in a record. Violations are data,
/// not failures: scoring and triage proceed around them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// A key in the record is absent from the governing schema.
    UnknownKey { path: String },
    /// A schema key is absent from the record (must be present with an
    /// empty-string value after canonicalization).
    MissingKey { path: String },
    /// A literal null-like marker ("null", "none", ...) survived where an
    /// empty string is required.
    NullLikeValue { path: String },
    /// A line item (or the item list itself) is not the expected object
    /// shape; the entry was dropped or blanked.
    MalformedItem { path: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownKey { path } => write!(f, "unknown key at {path}"),
            Self::MissingKey { path } => write!(f, "schema key missing at {path}"),
            Self::NullLikeValue { path } => {
                write!(f, "null-like value at {path}; coerce to empty string")
            }
            Self::MalformedItem { path } => write!(f, "malformed line item at {path}"),
        }
    }
}

fn is_null_like(value: &str) -> bool {
    matches!(
        value.trim().to_ascii_lowercase().as_str(),
        "null" | "none" | "nil"
    )
}

/// Flattens a record into one pair per non-empty header value and per
/// non-empty line-item cell. Values are canonicalized by field kind;
/// emptiness is judged after canonicalization.
///
/// Order is deterministic: header fields in schema order first, then line
/// items by index with fields in schema order within each item.
pub fn flatten_record(
    record: &ExtractionRecord,
    schema: &ExtractionSchema,
) -> Result<Vec<KeyValuePair>, RecordError> {
    for key in record.header.keys() {
        if schema.header_field(key).is_none() {
            return Err(RecordError::UnknownKey(key.clone()));
        }
    }
    for item in &record.line_items {
        for key in item.keys() {
            if schema.line_item_field(key).is_none() {
                return Err(RecordError::UnknownKey(key.clone()));
            }
        }
    }

    let mut pairs = Vec::new();
    for field in &schema.header_fields {
        if let Some(values) = record.header.get(&field.key) {
            for value in values {
                let canonical = normalize_value(field.kind, value);
                if !canonical.is_empty() {
                    pairs.push(KeyValuePair::new(PairPath::header(&field.key), canonical));
                }
            }
        }
    }
    for (index, item) in record.line_items.iter().enumerate() {
        for field in &schema.line_item_fields {
            if let Some(value) = item.get(&field.key) {
                let canonical = normalize_value(field.kind, value);
                if !canonical.is_empty() {
                    pairs.push(KeyValuePair::new(
                        PairPath::line_item(index, &field.key),
                        canonical,
                    ));
                }
            }
        }
    }
    Ok(pairs)
}

/// Checks the record invariants against the schema and returns every
/// violation found. An empty report means the record is canonical.
pub fn validate_record(record: &ExtractionRecord, schema: &ExtractionSchema) -> Vec<Violation> {
    let mut violations = Vec::new();

    for (key, values) in &record.header {
        if schema.header_field(key).is_none() {
            violations.push(Violation::UnknownKey { path: key.clone() });
            continue;
        }
        if values.is_empty() {
            violations.push(Violation::MissingKey { path: key.clone() });
        }
        for value in values {
            if is_null_like(value) && !value.trim().is_empty() {
                violations.push(Violation::NullLikeValue { path: key.clone() });
            }
        }
    }
    for field in &schema.header_fields {
        if !record.header.contains_key(&field.key) {
            violations.push(Violation::MissingKey {
                path: field.key.clone(),
            });
        }
    }

    for (index, item) in record.line_items.iter().enumerate() {
        for (key, value) in item {
            let path = PairPath::line_item(index, key).to_string();
            if schema.line_item_field(key).is_none() {
                violations.push(Violation::UnknownKey { path });
                continue;
            }
            if is_null_like(value) && !value.trim().is_empty() {
                violations.push(Violation::NullLikeValue { path });
            }
        }
        for field in &schema.line_item_fields {
            if !item.contains_key(&field.key) {
                violations.push(Violation::MissingKey {
                    path: PairPath::line_item(index, &field.key).to_string(),
                });
            }
        }
    }

    violations
}

/// Rebuilds a canonical record from flattened pairs. Inverse of
/// [`flatten_record`] up to empty-valued keys: keys without pairs come back
/// as empty strings.
pub fn regroup_pairs(pairs: &[KeyValuePair], schema: &ExtractionSchema) -> ExtractionRecord {
    let mut record = ExtractionRecord::empty(schema);
    let item_count = pairs
        .iter()
        .filter_map(|p| p.path.item_index())
        .map(|i| i + 1)
        .max()
        .unwrap_or(0);
    let empty_item: BTreeMap<String, String> = schema
        .line_item_fields
        .iter()
        .map(|f| (f.key.clone(), String::new()))
        .collect();
    record.line_items = vec![empty_item; item_count];

    for pair in pairs {
        match &pair.path {
            PairPath::Header { key } => {
                let slot = record.header.entry(key.clone()).or_default();
                if slot.len() == 1 && slot[0].is_empty() {
                    slot.clear();
                }
                slot.push(pair.value.clone());
            }
            PairPath::LineItem { index, key } => {
                record.line_items[*index].insert(key.clone(), pair.value.clone());
            }
        }
    }
    record
}
