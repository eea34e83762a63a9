//! Layout-preserving text serialization: OCR tokens are placed on a
//! character grid so that whitespace encodes the spatial structure of the
//! page.

use thiserror::Error;

use crate::document::{DocumentFixture, OcrToken};

/// Default grid width in characters; wide enough for dense delivery notes.
pub const DEFAULT_GRID_COLS: usize = 160;
/// Default vertical merge threshold in normalized page units, roughly half a
/// text line on an A4 page.
pub const DEFAULT_ROW_TOLERANCE: f64 = 0.006;
/// Marker placed on its own line between serialized pages. The single
/// control character used by the serializer; it splits as whitespace, so
/// token recovery by whitespace splitting is unaffected.
pub const PAGE_SEPARATOR: char = '\u{000C}';

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("token {text:?} cannot be placed: column {column} exceeds the {limit}-column bound")]
    GridOverflow {
        text: String,
        column: usize,
        limit: usize,
    },
    #[error("token {text:?} is {len} characters wide but the grid has only {grid_cols} columns")]
    TokenTooWide {
        text: String,
        len: usize,
        grid_cols: usize,
    },
    #[error("expected tokens of page {expected}, found token on page {found}")]
    PageMismatch { expected: usize, found: usize },
    #[error("invalid fixture: {0}")]
    InvalidFixture(String),
}

/// One serialized page: text rows plus the scale factors used to build them.
#[derive(Debug, Clone)]
pub struct PageGrid {
    pub grid_cols: usize,
    pub row_tolerance: f64,
    pub rows: Vec<String>,
}

impl PageGrid {
    /// Lays out the tokens of a single page.
    ///
    /// Tokens are grouped into rows by y-center within `row_tolerance` and
    /// placed left to right at column `round(x0 * grid_cols)`, shifted right
    /// minimally (at least one space apart) on collision.
    pub fn build(
        tokens: &[&OcrToken],
        grid_cols: usize,
        row_tolerance: f64,
    ) -> Result<Self, LayoutError> {
        if let Some(first) = tokens.first() {
            for token in tokens {
                if token.page != first.page {
                    return Err(LayoutError::PageMismatch {
                        expected: first.page,
                        found: token.page,
                    });
                }
            }
        }
        for token in tokens {
            let len = token.text.chars().count();
            if len > grid_cols {
                return Err(LayoutError::TokenTooWide {
                    text: token.text.clone(),
                    len,
                    grid_cols,
                });
            }
        }

        let mut ordered: Vec<&OcrToken> = tokens.to_vec();
        ordered.sort_by(|a, b| {
            a.y_center()
                .total_cmp(&b.y_center())
                .then(a.x0.total_cmp(&b.x0))
                .then(a.y0.total_cmp(&b.y0))
        });

        // Greedy top-down row clustering anchored at each row's first token.
        let mut row_groups: Vec<Vec<&OcrToken>> = Vec::new();
        let mut anchor = f64::NEG_INFINITY;
        for token in ordered {
            if token.y_center() - anchor > row_tolerance || row_groups.is_empty() {
                anchor = token.y_center();
                row_groups.push(Vec::new());
            }
            row_groups.last_mut().expect("row exists").push(token);
        }

        let limit = grid_cols * 2;
        let mut rows = Vec::with_capacity(row_groups.len());
        for mut group in row_groups {
            group.sort_by(|a, b| a.x0.total_cmp(&b.x0).then(a.y0.total_cmp(&b.y0)));
            let mut line = String::new();
            let mut cursor = 0usize; // exclusive end column of the previous token
            for (i, token) in group.iter().enumerate() {
                let target = (token.x0 * grid_cols as f64).round() as usize;
                let column = if i == 0 { target } else { target.max(cursor + 1) };
                let len = token.text.chars().count();
                if column + len > limit {
                    return Err(LayoutError::GridOverflow {
                        text: token.text.clone(),
                        column,
                        limit,
                    });
                }
                let current = line.chars().count();
                line.extend(std::iter::repeat_n(' ', column - current));
                line.push_str(&token.text);
                cursor = column + len;
            }
            rows.push(line.trim_end().to_string());
        }

        Ok(Self {
            grid_cols,
            row_tolerance,
            rows,
        })
    }

    pub fn text(&self) -> String {
        self.rows.join("\n")
    }
}

/// Serializes the tokens of one page into layout-preserving text.
pub fn serialize_page(
    tokens: &[&OcrToken],
    grid_cols: usize,
    row_tolerance: f64,
) -> Result<String, LayoutError> {
    PageGrid::build(tokens, grid_cols, row_tolerance).map(|grid| grid.text())
}

/// Serializes a whole fixture: pages in index order, separated by a
/// form-feed marker line.
pub fn serialize_document(
    fixture: &DocumentFixture,
    grid_cols: usize,
    row_tolerance: f64,
) -> Result<String, LayoutError> {
    fixture
        .validate()
        .map_err(|e| LayoutError::InvalidFixture(e.to_string()))?;
    let mut pages = Vec::with_capacity(fixture.page_count);
    for page in 0..fixture.page_count {
        let tokens: Vec<&OcrToken> = fixture.page_tokens(page).collect();
        pages.push(serialize_page(&tokens, grid_cols, row_tolerance)?);
    }
    Ok(pages.join(&format!("\n{PAGE_SEPARATOR}\n")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn token(text: &str, x0: f64, y0: f64) -> OcrToken {
        OcrToken::new(text, 0, x0, y0, (x0 + 0.04).min(1.0), y0 + 0.01)
    }

    fn page_text(tokens: &[OcrToken], cols: usize) -> String {
        let refs: Vec<&OcrToken> = tokens.iter().collect();
        serialize_page(&refs, cols, DEFAULT_ROW_TOLERANCE).unwrap()
    }

    #[test]
    fn places_token_at_scaled_column() {
        let tokens = vec![token("left", 0.0, 0.1), token("mid", 0.5, 0.1)];
        let text = page_text(&tokens, 80);
        assert_eq!(text.lines().count(), 1);
        assert_eq!(text.find("mid").unwrap(), 40);
        assert!(text.starts_with("left"));
    }

    #[test]
    fn adjacent_tokens_keep_a_space_and_order() {
        // Boxes that touch on the page must still come out separated.
        let tokens = vec![token("8.00", 0.60, 0.30), token("Pcs", 0.62, 0.30)];
        let text = page_text(&tokens, 40);
        let a = text.find("8.00").unwrap();
        let b = text.find("Pcs").unwrap();
        assert!(b > a + 4, "need at least one space between tokens: {text:?}");
        assert_eq!(text.split_whitespace().collect::<Vec<_>>(), vec!["8.00", "Pcs"]);
    }

    #[test]
    fn colliding_tokens_shift_right_preserving_x_order() {
        let tokens = vec![
            token("alpha", 0.50, 0.2),
            token("beta", 0.505, 0.2),
            token("gamma", 0.51, 0.2),
        ];
        let text = page_text(&tokens, 60);
        let mut words: Vec<&str> = text.split_whitespace().collect();
        assert_eq!(words, vec!["alpha", "beta", "gamma"]);
        words.sort_unstable();
        let mut input: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
        input.sort_unstable();
        assert_eq!(words, input);
    }

    #[test]
    fn overflow_when_tokens_cannot_fit() {
        let tokens = [token("aaaaaaaaaa", 0.95, 0.2),
            token("bbbbbbbbbb", 0.96, 0.2)];
        let refs: Vec<&OcrToken> = tokens.iter().collect();
        assert!(matches!(
            serialize_page(&refs, 10, DEFAULT_ROW_TOLERANCE),
            Err(LayoutError::GridOverflow { .. })
        ));
    }

    #[test]
    fn token_wider_than_grid_is_rejected() {
        let tokens = [token("abcdefghijk", 0.0, 0.2)];
        let refs: Vec<&OcrToken> = tokens.iter().collect();
        assert!(matches!(
            serialize_page(&refs, 10, DEFAULT_ROW_TOLERANCE),
            Err(LayoutError::TokenTooWide { .. })
        ));
    }

    #[test]
    fn mixed_pages_rejected() {
        let a = OcrToken::new("a", 0, 0.1, 0.1, 0.2, 0.12);
        let b = OcrToken::new("b", 1, 0.1, 0.1, 0.2, 0.12);
        assert!(matches!(
            serialize_page(&[&a, &b], 40, DEFAULT_ROW_TOLERANCE),
            Err(LayoutError::PageMismatch { .. })
        ));
    }

    #[test]
    fn single_page_document_equals_page_serialization() {
        let fixture = DocumentFixture {
            doc_id: "d".into(),
            page_count: 1,
            tokens: vec![token("only", 0.2, 0.2)],
            image_refs: None,
            language_tag: None,
        };
        let doc = serialize_document(&fixture, 80, DEFAULT_ROW_TOLERANCE).unwrap();
        assert_eq!(doc, page_text(&fixture.tokens, 80));
    }

    #[test]
    fn two_page_document_has_one_separator() {
        let fixture = DocumentFixture {
            doc_id: "d".into(),
            page_count: 2,
            tokens: vec![
                token("first", 0.2, 0.2),
                OcrToken::new("second", 1, 0.2, 0.2, 0.3, 0.21),
            ],
            image_refs: None,
            language_tag: None,
        };
        let doc = serialize_document(&fixture, 80, DEFAULT_ROW_TOLERANCE).unwrap();
        assert_eq!(doc.matches(PAGE_SEPARATOR).count(), 1);
        assert!(doc.contains("first"));
        assert!(doc.contains("second"));
    }

    proptest! {
        /// Whitespace-splitting the output recovers the exact token
        /// multiset, and column order within a line follows x0 order.
        #[test]
        fn tokens_survive_serialization(xs in proptest::collection::vec((0u32..50, 0u32..40, 1usize..8), 1..50)) {
            let mut tokens = Vec::new();
            for (i, (x, y, len)) in xs.iter().enumerate() {
                // Unique (x0, y0) per token by construction.
                let x0 = *x as f64 / 60.0;
                let y0 = *y as f64 / 50.0 + (i as f64) * 1e-9;
                let text: String = std::iter::repeat_n('t', *len).collect();
                tokens.push(OcrToken::new(format!("{text}{i}"), 0, x0, y0, (x0 + 0.05).min(1.0), y0 + 0.005));
            }
            let refs: Vec<&OcrToken> = tokens.iter().collect();
            if let Ok(text) = serialize_page(&refs, 400, DEFAULT_ROW_TOLERANCE) {
                let mut out: Vec<&str> = text.split_whitespace().collect();
                let mut input: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
                out.sort_unstable();
                input.sort_unstable();
                prop_assert_eq!(out, input);
            }
        }

        /// Identical input produces byte-identical output.
        #[test]
        fn serialization_is_deterministic(xs in proptest::collection::vec((0u32..50, 0u32..40), 1..30)) {
            let tokens: Vec<OcrToken> = xs
                .iter()
                .enumerate()
                .map(|(i, (x, y))| {
                    let x0 = *x as f64 / 60.0;
                    let y0 = *y as f64 / 50.0 + (i as f64) * 1e-9;
                    OcrToken::new(format!("w{i}"), 0, x0, y0, x0 + 0.01, y0 + 0.005)
                })
                .collect();
            let refs: Vec<&OcrToken> = tokens.iter().collect();
            let a = serialize_page(&refs, 200, DEFAULT_ROW_TOLERANCE);
            let b = serialize_page(&refs, 200, DEFAULT_ROW_TOLERANCE);
            prop_assert_eq!(a.unwrap(), b.unwrap());
        }
    }
}
