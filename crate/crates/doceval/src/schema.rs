//! Extraction schema: the set of header and line-item fields a document is
//! scored against, with the value kind that drives normalization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Prefix carried by every line-item field key.
pub const LINE_ITEM_PREFIX: &str = "lineItem.";

/// Key of the array holding line items in the wire record shape. Reserved:
/// no header field may use it.
pub const LINE_ITEMS_KEY: &str = "lineItems";

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("duplicate field key {0:?}")]
    DuplicateKey(String),
    #[error("header field {0:?} must not carry the {LINE_ITEM_PREFIX:?} prefix")]
    HeaderKeyPrefixed(String),
    #[error("line-item field {0:?} must carry the {LINE_ITEM_PREFIX:?} prefix")]
    LineItemKeyUnprefixed(String),
    #[error("schema must declare at least one header field")]
    NoHeaderFields,
    #[error("field key {0:?} is reserved")]
    ReservedKey(String),
    #[error("field key must not be empty")]
    EmptyKey,
}

/// Where a field lives in the document structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldScope {
    Header,
    LineItem,
}

/// Value kind of a field; selects the normalization rule applied when model
/// output is parsed and when values are compared during scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Date,
    Country,
    Currency,
    Quantity,
    Identifier,
    FreeText,
}

/// One target field: key, scope, value kind, and the prose description shown
/// to the model in the rendered schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub key: String,
    pub scope: FieldScope,
    pub kind: ValueKind,
    #[serde(default)]
    pub description: String,
}

impl FieldSpec {
    pub fn new(
        key: impl Into<String>,
        scope: FieldScope,
        kind: ValueKind,
        description: impl Into<String>,
    ) -> Self {
        Self {
            key: key.into(),
            scope,
            kind,
            description: description.into(),
        }
    }
}

/// The target extraction schema: ordered header fields plus ordered
/// line-item fields. Line items may be absent (header-only schema).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionSchema {
    pub name: String,
    pub header_fields: Vec<FieldSpec>,
    #[serde(default)]
    pub line_item_fields: Vec<FieldSpec>,
}

impl ExtractionSchema {
    /// Builds a schema and checks its invariants: unique keys, the
    /// `lineItem.` prefix convention, and at least one header field.
    pub fn new(
        name: impl Into<String>,
        header_fields: Vec<FieldSpec>,
        line_item_fields: Vec<FieldSpec>,
    ) -> Result<Self, SchemaError> {
        let schema = Self {
            name: name.into(),
            header_fields,
            line_item_fields,
        };
        schema.check()?;
        Ok(schema)
    }

    pub fn check(&self) -> Result<(), SchemaError> {
        if self.header_fields.is_empty() {
            return Err(SchemaError::NoHeaderFields);
        }
        let mut seen = std::collections::BTreeSet::new();
        for field in self.header_fields.iter().chain(&self.line_item_fields) {
            if field.key.is_empty() {
                return Err(SchemaError::EmptyKey);
            }
            if field.key == LINE_ITEMS_KEY {
                return Err(SchemaError::ReservedKey(field.key.clone()));
            }
            if !seen.insert(field.key.clone()) {
                return Err(SchemaError::DuplicateKey(field.key.clone()));
            }
            match field.scope {
                FieldScope::Header if field.key.starts_with(LINE_ITEM_PREFIX) => {
                    return Err(SchemaError::HeaderKeyPrefixed(field.key.clone()));
                }
                FieldScope::LineItem if !field.key.starts_with(LINE_ITEM_PREFIX) => {
                    return Err(SchemaError::LineItemKeyUnprefixed(field.key.clone()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn header_field(&self, key: &str) -> Option<&FieldSpec> {
        self.header_fields.iter().find(|f| f.key == key)
    }

    pub fn line_item_field(&self, key: &str) -> Option<&FieldSpec> {
        self.line_item_fields.iter().find(|f| f.key == key)
    }

    /// Value kind of a key in either scope.
    pub fn kind_of(&self, key: &str) -> Option<ValueKind> {
        self.header_field(key)
            .or_else(|| self.line_item_field(key))
            .map(|f| f.kind)
    }

    /// Loads a schema from its JSON file form and validates it.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let schema: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        schema.check().map_err(|e| e.to_string())?;
        Ok(schema)
    }

    /// The built-in delivery-note schema: five header fields and seven
    /// line-item fields. Used as the default schema by the CLI and the
    /// synthetic corpus generator.
    pub fn delivery_note() -> Self {
        use FieldScope::*;
        use ValueKind::*;
        Self::new(
            "delivery_note",
            vec![
                FieldSpec::new("deliveryDate", Header, Date, "Date the goods were delivered."),
                FieldSpec::new(
                    "deliveryNoteNumber",
                    Header,
                    Identifier,
                    "Identifier of the delivery note document.",
                ),
                FieldSpec::new("documentDate", Header, Date, "Date the document was issued."),
                FieldSpec::new(
                    "purchaseOrderNumber",
                    Header,
                    Identifier,
                    "Purchase order the delivery refers to.",
                ),
                FieldSpec::new("supplierId", Header, Identifier, "Identifier of the supplier."),
            ],
            vec![
                FieldSpec::new(
                    "lineItem.customerMaterialNumber",
                    LineItem,
                    Identifier,
                    "Material number in the customer's catalog.",
                ),
                FieldSpec::new(
                    "lineItem.itemNumber",
                    LineItem,
                    Identifier,
                    "Position number of the line item.",
                ),
                FieldSpec::new(
                    "lineItem.purchaseOrderItemNumber",
                    LineItem,
                    Identifier,
                    "Position number on the purchase order.",
                ),
                FieldSpec::new(
                    "lineItem.purchaseOrderNumber",
                    LineItem,
                    Identifier,
                    "Purchase order number for this item, if stated per line.",
                ),
                FieldSpec::new("lineItem.quantity", LineItem, Quantity, "Quantity actually received."),
                FieldSpec::new(
                    "lineItem.supplierMaterialNumber",
                    LineItem,
                    Identifier,
                    "Material number in the supplier's catalog.",
                ),
                FieldSpec::new(
                    "lineItem.unitOfMeasure",
                    LineItem,
                    FreeText,
                    "Unit the quantity is expressed in.",
                ),
            ],
        )
        .expect("built-in schema is valid")
    }
}
