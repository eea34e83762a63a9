//! Document information-extraction evaluation and error-triage toolkit.
//!
//! The crate covers the full evaluation loop for schema-driven key-value
//! extraction from business documents:
//!
//! 1. **Layout serialization**: OCR tokens rendered into layout-preserving
//!    plain text, with whitespace as the structural delimiter ([`layout`]).
//! 2. **Extraction**: prompt construction per input modality ([`prompt`]),
//!    provider-agnostic model invocation with record/replay cassettes and a
//!    usage ledger ([`gateway`]), and tolerant parsing of model output into
//!    canonical records ([`parse`]).
//! 3. **Scoring**: key-value precision/recall/F1 with optimal line-item
//!    alignment, per document and per corpus ([`score`]).
//!
//! On top of scoring sits a three-stage error-triage pipeline ([`triage`]):
//! a deterministic handler characterizes every mismatch, an LLM-backed
//! reasoner maps each one to a mid-level cause category, and an attribution
//! stage clusters causes and rolls them up to top-level failure classes.
//!
//! [`synth`] generates seeded synthetic document corpora with exact ground
//! truth and controlled error injection, so the whole pipeline runs offline.
//! [`run`] orchestrates end-to-end evaluation runs and [`report`] emits the
//! score, cost, and error-distribution tables.

pub mod document;
pub mod fixtures;
pub mod gateway;
pub mod layout;
pub mod parse;
pub mod prompt;
pub mod record;
pub mod report;
pub mod run;
pub mod schema;
pub mod score;
pub mod synth;
pub mod triage;

pub use document::{DocumentFixture, OcrToken};
pub use record::{ExtractionRecord, KeyValuePair, PairPath};
pub use schema::{ExtractionSchema, FieldScope, FieldSpec, ValueKind};
