//! Document fixture: pre-extracted OCR tokens with normalized page
//! coordinates, plus optional page-image references.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("token {index} has empty or whitespace-bearing text {text:?}")]
    BadTokenText { index: usize, text: String },
    #[error("token {index} has a degenerate or out-of-range box")]
    BadTokenBox { index: usize },
    #[error("token {index} is on page {page} but page_count is {page_count}")]
    PageOutOfRange {
        index: usize,
        page: usize,
        page_count: usize,
    },
    #[error("tokens {a} and {b} share page {page} and origin ({x0}, {y0})")]
    DuplicateOrigin {
        a: usize,
        b: usize,
        page: usize,
        x0: f64,
        y0: f64,
    },
    #[error("page_count must be at least 1")]
    NoPages,
    #[error("image_refs has {refs} entries for {page_count} pages")]
    ImageRefCount { refs: usize, page_count: usize },
}

/// One OCR token. Coordinates are normalized to `[0, 1]` so fixtures are
/// resolution-independent; `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrToken {
    pub text: String,
    pub page: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl OcrToken {
    pub fn new(text: impl Into<String>, page: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            text: text.into(),
            page,
            x0,
            y0,
            x1,
            y1,
        }
    }

    pub fn y_center(&self) -> f64 {
        (self.y0 + self.y1) / 2.0
    }
}

/// A document ready for evaluation: its OCR tokens and, when available,
/// one image handle per page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentFixture {
    pub doc_id: String,
    pub page_count: usize,
    pub tokens: Vec<OcrToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_refs: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language_tag: Option<String>,
}

impl DocumentFixture {
    pub fn validate(&self) -> Result<(), FixtureError> {
        if self.page_count == 0 {
            return Err(FixtureError::NoPages);
        }
        if let Some(refs) = &self.image_refs {
            if refs.len() != self.page_count {
                return Err(FixtureError::ImageRefCount {
                    refs: refs.len(),
                    page_count: self.page_count,
                });
            }
        }
        for (index, token) in self.tokens.iter().enumerate() {
            if token.text.is_empty() || token.text.chars().any(char::is_whitespace) {
                return Err(FixtureError::BadTokenText {
                    index,
                    text: token.text.clone(),
                });
            }
            let in_range = |v: f64| (0.0..=1.0).contains(&v);
            if !(in_range(token.x0)
                && in_range(token.y0)
                && in_range(token.x1)
                && in_range(token.y1)
                && token.x0 < token.x1
                && token.y0 < token.y1)
            {
                return Err(FixtureError::BadTokenBox { index });
            }
            if token.page >= self.page_count {
                return Err(FixtureError::PageOutOfRange {
                    index,
                    page: token.page,
                    page_count: self.page_count,
                });
            }
        }
        for (a, ta) in self.tokens.iter().enumerate() {
            for (b, tb) in self.tokens.iter().enumerate().skip(a + 1) {
                if ta.page == tb.page && ta.x0 == tb.x0 && ta.y0 == tb.y0 {
                    return Err(FixtureError::DuplicateOrigin {
                        a,
                        b,
                        page: ta.page,
                        x0: ta.x0,
                        y0: ta.y0,
                    });
                }
            }
        }
        Ok(())
    }

    /// Tokens of one page, in input order.
    pub fn page_tokens(&self, page: usize) -> impl Iterator<Item = &OcrToken> {
        self.tokens.iter().filter(move |t| t.page == page)
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let fixture: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        fixture.validate().map_err(|e| e.to_string())?;
        Ok(fixture)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn token(text: &str, page: usize, x0: f64, y0: f64) -> OcrToken {
        OcrToken::new(text, page, x0, y0, x0 + 0.05, y0 + 0.01)
    }

    #[test]
    fn valid_fixture_passes() {
        let fixture = DocumentFixture {
            doc_id: "d1".into(),
            page_count: 2,
            tokens: vec![token("Total", 0, 0.1, 0.2), token("42", 1, 0.1, 0.2)],
            image_refs: Some(vec!["p0.png".into(), "p1.png".into()]),
            language_tag: Some("en".into()),
        };
        fixture.validate().unwrap();
    }

    #[test]
    fn rejects_page_out_of_range() {
        let fixture = DocumentFixture {
            doc_id: "d1".into(),
            page_count: 1,
            tokens: vec![token("x", 1, 0.1, 0.2)],
            image_refs: None,
            language_tag: None,
        };
        assert!(matches!(
            fixture.validate(),
            Err(FixtureError::PageOutOfRange { .. })
        ));
    }

    #[test]
    fn rejects_duplicate_origin_on_same_page() {
        let fixture = DocumentFixture {
            doc_id: "d1".into(),
            page_count: 1,
            tokens: vec![token("a", 0, 0.1, 0.2), token("b", 0, 0.1, 0.2)],
            image_refs: None,
            language_tag: None,
        };
        assert!(matches!(
            fixture.validate(),
            Err(FixtureError::DuplicateOrigin { .. })
        ));
    }

    #[test]
    fn rejects_whitespace_in_token_text() {
        let fixture = DocumentFixture {
            doc_id: "d1".into(),
            page_count: 1,
            tokens: vec![token("two words", 0, 0.1, 0.2)],
            image_refs: None,
            language_tag: None,
        };
        assert!(matches!(
            fixture.validate(),
            Err(FixtureError::BadTokenText { .. })
        ));
    }

    #[test]
    fn rejects_image_ref_mismatch() {
        let fixture = DocumentFixture {
            doc_id: "d1".into(),
            page_count: 2,
            tokens: vec![],
            image_refs: Some(vec!["p0.png".into()]),
            language_tag: None,
        };
        assert!(matches!(
            fixture.validate(),
            Err(FixtureError::ImageRefCount { .. })
        ));
    }
}
