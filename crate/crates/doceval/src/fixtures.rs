//! Curated extraction-failure exemplars: nine disclosed failure cases used
//! as few-shot examples for triage reasoning and as taxonomy test
//! fixtures. Cases 1-3 are text-misinterpretation failures, 4-6
//! image-to-text failures, 7-9 OCR/schema-ambiguity failures.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::triage::attribution::TopLevelClass;

/// One disclosed failure case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub id: u32,
    /// Schema key of the failing entry.
    pub field_path: String,
    pub gold: String,
    pub predicted: String,
    /// The analyst-written cause sentence.
    pub cause: String,
    /// Mid-level category id in the built-in catalog.
    pub category: String,
    /// Top-level class the case belongs to.
    pub top_class: TopLevelClass,
}

/// The nine curated failure cases.
pub fn curated_failure_cases() -> &'static [FailureCase] {
    static CASES: OnceLock<Vec<FailureCase>> = OnceLock::new();
    CASES.get_or_init(|| {
        serde_json::from_str(include_str!("../assets/failure_cases.json"))
            .expect("built-in failure cases parse")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_cases_with_expected_class_split() {
        let cases = curated_failure_cases();
        assert_eq!(cases.len(), 9);
        for case in cases {
            let expected = match case.id {
                1..=3 => TopLevelClass::ATextMisinterpretation,
                4..=6 => TopLevelClass::BImageToText,
                _ => TopLevelClass::COcrSchemaAmbiguity,
            };
            assert_eq!(case.top_class, expected, "case {}", case.id);
        }
    }

    #[test]
    fn case_categories_are_mapped() {
        let mapping = crate::triage::attribution::CategoryMap::builtin();
        for case in curated_failure_cases() {
            assert!(
                mapping.entries.contains_key(&case.category),
                "category {} of case {} missing from map",
                case.category,
                case.id
            );
        }
    }
}
