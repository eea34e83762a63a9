//! Three-stage error triage: a deterministic handler logs and
//! characterizes every scored mismatch, an LLM-backed reasoner maps each
//! record to a mid-level cause category, and attribution clusters the
//! causes and rolls them up to top-level failure classes.

pub mod attribution;
pub mod handler;
pub mod reasoner;

pub use attribution::{
    attribute, cluster_pool, embed, extract_keywords, AttributionReport, Cluster, ClusterSummary,
    ReasonPool, SourceTag, TopLevelClass, TrigramEmbedder,
};
pub use handler::{
    analyze_document, build_error_records, characterize, find_related, Discrepancy,
    DiscrepancyKind, ErrorRecord, HandlerConfig, PairSide, RelatedEntry, TaggedPair,
};
pub use reasoner::{
    build_triage_prompt, classify, escalate_with_image, CategoryCatalog, ReasonVerdict,
    ReasonerConfig, VerdictCategory,
};
