//! Key-value scoring: header matching, optimal line-item alignment, and
//! precision/recall/F1 per document and per corpus.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::parse::normalize_value;
use crate::record::{ExtractionRecord, KeyValuePair, PairPath};
use crate::schema::ExtractionSchema;

/// Outcome of matching one prediction against one ground-truth record.
/// Every flattened pair lands in exactly one of `matched`,
/// `unmatched_pred`, or `unmatched_gold`; `alignment` is the injective
/// pred-item to gold-item map the cell matches were computed under.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub matched: Vec<(KeyValuePair, KeyValuePair)>,
    pub unmatched_pred: Vec<KeyValuePair>,
    pub unmatched_gold: Vec<KeyValuePair>,
    pub alignment: BTreeMap<usize, usize>,
}

/// Pair counts for one field key.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldCounts {
    pub matched: usize,
    pub pred_pairs: usize,
    pub gold_pairs: usize,
}

/// Precision/recall/F1 plus the counts they derive from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub pred_pairs: usize,
    pub gold_pairs: usize,
    pub per_field: BTreeMap<String, FieldCounts>,
}

impl ScoreReport {
    /// Builds a report from raw counts. With no pairs on either side the
    /// metrics are 1.0 (nothing to find, nothing wrongly found); otherwise
    /// empty denominators guard to 0.
    pub fn from_counts(
        matched: usize,
        pred_pairs: usize,
        gold_pairs: usize,
        per_field: BTreeMap<String, FieldCounts>,
    ) -> Self {
        let (precision, recall) = if pred_pairs == 0 && gold_pairs == 0 {
            (1.0, 1.0)
        } else {
            let p = if pred_pairs > 0 {
                matched as f64 / pred_pairs as f64
            } else {
                0.0
            };
            let r = if gold_pairs > 0 {
                matched as f64 / gold_pairs as f64
            } else {
                0.0
            };
            (p, r)
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            matched,
            pred_pairs,
            gold_pairs,
            per_field,
        }
    }

    pub fn f1_percent(&self) -> f64 {
        self.f1 * 100.0
    }
}

/// Rounds to one decimal, ties to even. The rounding rule for every score
/// table, footnoted in the reports.
pub fn round_half_even_1dp(x: f64) -> f64 {
    let scaled = x * 10.0;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let rounded = if (frac - 0.5).abs() < 1e-9 {
        if (floor as i64) % 2 == 0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        scaled.round()
    };
    rounded / 10.0
}

fn canonical_values<'a>(
    values: impl Iterator<Item = &'a String>,
    kind: crate::schema::ValueKind,
) -> Vec<String> {
    values
        .map(|v| normalize_value(kind, v))
        .filter(|v| !v.is_empty())
        .collect()
}

/// Matches header fields only. A non-empty predicted value matches if its
/// canonical form equals any canonical gold alternative for that key, each
/// gold alternative consumed at most once.
pub fn match_header_fields(
    pred: &ExtractionRecord,
    gold: &ExtractionRecord,
    schema: &ExtractionSchema,
) -> MatchResult {
    let mut result = MatchResult::default();
    let empty = Vec::new();
    for field in &schema.header_fields {
        let pred_values = canonical_values(
            pred.header.get(&field.key).unwrap_or(&empty).iter(),
            field.kind,
        );
        let gold_values = canonical_values(
            gold.header.get(&field.key).unwrap_or(&empty).iter(),
            field.kind,
        );
        let mut gold_used = vec![false; gold_values.len()];
        for pred_value in pred_values {
            let slot = gold_values
                .iter()
                .enumerate()
                .find(|(gi, gv)| !gold_used[*gi] && **gv == pred_value);
            let pair = KeyValuePair::new(PairPath::header(&field.key), pred_value.clone());
            match slot {
                Some((gi, gv)) => {
                    gold_used[gi] = true;
                    result
                        .matched
                        .push((pair, KeyValuePair::new(PairPath::header(&field.key), gv.clone())));
                }
                None => result.unmatched_pred.push(pair),
            }
        }
        for (gi, gv) in gold_values.iter().enumerate() {
            if !gold_used[gi] {
                result
                    .unmatched_gold
                    .push(KeyValuePair::new(PairPath::header(&field.key), gv.clone()));
            }
        }
    }
    result
}

/// Canonical cell values of one line item, in schema field order.
fn item_cells(
    item: &BTreeMap<String, String>,
    schema: &ExtractionSchema,
) -> Vec<(String, String)> {
    schema
        .line_item_fields
        .iter()
        .map(|field| {
            let canonical = item
                .get(&field.key)
                .map(|v| normalize_value(field.kind, v))
                .unwrap_or_default();
            (field.key.clone(), canonical)
        })
        .collect()
}

fn cell_match_count(pred: &[(String, String)], gold: &[(String, String)]) -> usize {
    pred.iter()
        .zip(gold)
        .filter(|((_, pv), (_, gv))| !pv.is_empty() && pv == gv)
        .count()
}

/// The injective pred-item to gold-item map that maximizes total cell
/// matches, plus that total.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LineItemAlignment {
    pub pred_to_gold: BTreeMap<usize, usize>,
    pub total_cell_matches: usize,
}

/// Finds the alignment maximizing total cell-level canonical matches over
/// all injective pred-to-gold assignments. Ties break toward the
/// order-preserving, lowest-index pairing (lexicographically smallest
/// assignment vector, unassigned ranking last).
///
/// Small inputs (up to six items on the larger side) are solved by
/// exhaustive search; larger ones by an optimal-assignment solve with a
/// lexicographic refinement pass.
pub fn align_line_items(
    pred_items: &[BTreeMap<String, String>],
    gold_items: &[BTreeMap<String, String>],
    schema: &ExtractionSchema,
) -> LineItemAlignment {
    let pred_cells: Vec<Vec<(String, String)>> =
        pred_items.iter().map(|i| item_cells(i, schema)).collect();
    let gold_cells: Vec<Vec<(String, String)>> =
        gold_items.iter().map(|i| item_cells(i, schema)).collect();

    let np = pred_cells.len();
    let ng = gold_cells.len();
    if np == 0 || ng == 0 {
        return LineItemAlignment::default();
    }

    let weights: Vec<Vec<usize>> = pred_cells
        .iter()
        .map(|p| gold_cells.iter().map(|g| cell_match_count(p, g)).collect())
        .collect();

    let assignment = if np.max(ng) <= 6 {
        exhaustive_best_assignment(&weights)
    } else {
        assignment_with_lex_refinement(&weights)
    };

    let mut alignment = LineItemAlignment::default();
    for (i, slot) in assignment.iter().enumerate() {
        if let Some(j) = slot {
            alignment.pred_to_gold.insert(i, *j);
            alignment.total_cell_matches += weights[i][*j];
        }
    }
    alignment
}

/// Sentinel ranking unassigned after every real gold index.
const UNASSIGNED: usize = usize::MAX;

fn assignment_total(weights: &[Vec<usize>], assignment: &[Option<usize>]) -> usize {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| weights[i][j]))
        .sum()
}

fn lex_key(assignment: &[Option<usize>]) -> Vec<usize> {
    assignment.iter().map(|j| j.unwrap_or(UNASSIGNED)).collect()
}

/// Best assignment found so far: total, lexicographic key, assignment.
type BestAssignment = (usize, Vec<usize>, Vec<Option<usize>>);

/// Exhaustive search over full injective assignments: every pred item is
/// assigned when golds suffice, otherwise exactly `np - ng` stay out.
fn exhaustive_best_assignment(weights: &[Vec<usize>]) -> Vec<Option<usize>> {
    fn recurse(
        weights: &[Vec<usize>],
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        none_left: usize,
        best: &mut Option<BestAssignment>,
    ) {
        if current.len() == weights.len() {
            let total = assignment_total(weights, current);
            let key = lex_key(current);
            let better = match best {
                None => true,
                Some((bt, bk, _)) => total > *bt || (total == *bt && key < *bk),
            };
            if better {
                *best = Some((total, key, current.clone()));
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                current.push(Some(j));
                recurse(weights, used, current, none_left, best);
                current.pop();
                used[j] = false;
            }
        }
        if none_left > 0 {
            current.push(None);
            recurse(weights, used, current, none_left - 1, best);
            current.pop();
        }
    }

    let np = weights.len();
    let ng = weights[0].len();
    let mut best = None;
    recurse(
        weights,
        &mut vec![false; ng],
        &mut Vec::with_capacity(np),
        np.saturating_sub(ng),
        &mut best,
    );
    best.expect("at least one assignment exists").2
}

/// Minimum-cost assignment on a square matrix (the classic O(n^3)
/// potentials algorithm). Returns the column assigned to each row.
fn min_cost_square_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // matched_row[col] = row, 1-based
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[matched_row[j] - 1] = j - 1;
    }
    row_to_col
}

/// Maximum total weight achievable on a rectangular weight matrix.
fn max_assignment_total(weights: &[Vec<usize>]) -> usize {
    let np = weights.len();
    if np == 0 {
        return 0;
    }
    let ng = weights[0].len();
    if ng == 0 {
        return 0;
    }
    let n = np.max(ng);
    let peak = weights
        .iter()
        .flat_map(|row| row.iter())
        .copied()
        .max()
        .unwrap_or(0) as i64;
    // Pad to square; dummy cells carry weight 0.
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let w = if i < np && j < ng { weights[i][j] as i64 } else { 0 };
                    peak - w
                })
                .collect()
        })
        .collect();
    let assignment = min_cost_square_assignment(&cost);
    assignment
        .iter()
        .enumerate()
        .filter(|(i, j)| *i < np && **j < ng)
        .map(|(i, j)| weights[i][*j])
        .sum()
}

/// Optimal-assignment solve followed by a lexicographic refinement: each
/// pred item in turn is fixed to the smallest gold index (unassigned last)
/// that still admits an optimal completion.
fn assignment_with_lex_refinement(weights: &[Vec<usize>]) -> Vec<Option<usize>> {
    let np = weights.len();
    let ng = weights[0].len();
    let optimal = max_assignment_total(weights);
    let mut none_budget = np.saturating_sub(ng);

    let mut fixed: Vec<Option<usize>> = Vec::with_capacity(np);
    let mut used = vec![false; ng];
    let mut fixed_weight = 0usize;

    for i in 0..np {
        let remaining_weights = |used: &[bool]| -> Vec<Vec<usize>> {
            (i + 1..np)
                .map(|r| {
                    (0..ng)
                        .filter(|c| !used[*c])
                        .map(|c| weights[r][c])
                        .collect()
                })
                .collect()
        };

        let mut chosen: Option<Option<usize>> = None;
        for j in 0..ng {
            if used[j] {
                continue;
            }
            used[j] = true;
            let rest = max_assignment_total(&remaining_weights(&used));
            if fixed_weight + weights[i][j] + rest == optimal {
                chosen = Some(Some(j));
                fixed_weight += weights[i][j];
                break;
            }
            used[j] = false;
        }
        if chosen.is_none() && none_budget > 0 {
            let rest = max_assignment_total(&remaining_weights(&used));
            if fixed_weight + rest == optimal {
                chosen = Some(None);
                none_budget -= 1;
            }
        }
        fixed.push(chosen.expect("optimal completion always exists"));
    }
    fixed
}

/// Full document matching: header fields plus aligned line-item cells.
pub fn match_document(
    pred: &ExtractionRecord,
    gold: &ExtractionRecord,
    schema: &ExtractionSchema,
) -> MatchResult {
    let mut result = match_header_fields(pred, gold, schema);
    let alignment = align_line_items(&pred.line_items, &gold.line_items, schema);
    result.alignment = alignment.pred_to_gold.clone();

    let mut gold_seen = vec![false; gold.line_items.len()];
    for (pred_index, pred_item) in pred.line_items.iter().enumerate() {
        let pred_cells = item_cells(pred_item, schema);
        match alignment.pred_to_gold.get(&pred_index) {
            Some(&gold_index) => {
                gold_seen[gold_index] = true;
                let gold_cells = item_cells(&gold.line_items[gold_index], schema);
                for ((key, pv), (_, gv)) in pred_cells.iter().zip(&gold_cells) {
                    let pred_pair =
                        || KeyValuePair::new(PairPath::line_item(pred_index, key), pv.clone());
                    let gold_pair =
                        || KeyValuePair::new(PairPath::line_item(gold_index, key), gv.clone());
                    match (pv.is_empty(), gv.is_empty()) {
                        (true, true) => {}
                        (false, true) => result.unmatched_pred.push(pred_pair()),
                        (true, false) => result.unmatched_gold.push(gold_pair()),
                        (false, false) if pv == gv => {
                            result.matched.push((pred_pair(), gold_pair()))
                        }
                        (false, false) => {
                            result.unmatched_pred.push(pred_pair());
                            result.unmatched_gold.push(gold_pair());
                        }
                    }
                }
            }
            None => {
                for (key, pv) in pred_cells {
                    if !pv.is_empty() {
                        result
                            .unmatched_pred
                            .push(KeyValuePair::new(PairPath::line_item(pred_index, &key), pv));
                    }
                }
            }
        }
    }
    for (gold_index, seen) in gold_seen.iter().enumerate() {
        if !seen {
            for (key, gv) in item_cells(&gold.line_items[gold_index], schema) {
                if !gv.is_empty() {
                    result
                        .unmatched_gold
                        .push(KeyValuePair::new(PairPath::line_item(gold_index, &key), gv));
                }
            }
        }
    }
    result
}

/// Metrics from an existing match result.
pub fn score_from_match(result: &MatchResult) -> ScoreReport {
    let mut per_field: BTreeMap<String, FieldCounts> = BTreeMap::new();
    for (pred_pair, _) in &result.matched {
        let counts = per_field.entry(pred_pair.path.key().to_string()).or_default();
        counts.matched += 1;
        counts.pred_pairs += 1;
        counts.gold_pairs += 1;
    }
    for pair in &result.unmatched_pred {
        per_field
            .entry(pair.path.key().to_string())
            .or_default()
            .pred_pairs += 1;
    }
    for pair in &result.unmatched_gold {
        per_field
            .entry(pair.path.key().to_string())
            .or_default()
            .gold_pairs += 1;
    }
    let matched = result.matched.len();
    ScoreReport::from_counts(
        matched,
        matched + result.unmatched_pred.len(),
        matched + result.unmatched_gold.len(),
        per_field,
    )
}

/// Scores one prediction against its ground truth.
pub fn score_document(
    pred: &ExtractionRecord,
    gold: &ExtractionRecord,
    schema: &ExtractionSchema,
) -> ScoreReport {
    score_from_match(&match_document(pred, gold, schema))
}

/// One corpus document tagged with its dataset.
#[derive(Debug, Clone)]
pub struct CorpusDocument {
    pub dataset_id: String,
    pub doc_id: String,
    pub pred: ExtractionRecord,
    pub gold: ExtractionRecord,
}

/// Per-document score within a corpus report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocumentScore {
    pub dataset_id: String,
    pub doc_id: String,
    pub report: ScoreReport,
}

/// Corpus-level scores: per-dataset micro-averages (pair counts pooled
/// across the dataset's documents) plus the cross-dataset arithmetic mean
/// of F1 percentages, rounded half-to-even to one decimal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusReport {
    pub per_dataset: BTreeMap<String, ScoreReport>,
    pub documents: Vec<DocumentScore>,
    pub mean_f1_percent: f64,
}

/// Cross-dataset mean of the already-rounded per-dataset F1 percents.
pub fn mean_of_dataset_f1s(dataset_f1_percents: &[f64]) -> f64 {
    if dataset_f1_percents.is_empty() {
        return 0.0;
    }
    let sum: f64 = dataset_f1_percents.iter().sum();
    round_half_even_1dp(sum / dataset_f1_percents.len() as f64)
}

pub fn score_corpus(documents: &[CorpusDocument], schema: &ExtractionSchema) -> CorpusReport {
    let mut pooled: BTreeMap<String, (usize, usize, usize, BTreeMap<String, FieldCounts>)> =
        BTreeMap::new();
    let mut per_document = Vec::with_capacity(documents.len());

    for doc in documents {
        let report = score_document(&doc.pred, &doc.gold, schema);
        let slot = pooled.entry(doc.dataset_id.clone()).or_default();
        slot.0 += report.matched;
        slot.1 += report.pred_pairs;
        slot.2 += report.gold_pairs;
        for (key, counts) in &report.per_field {
            let field = slot.3.entry(key.clone()).or_default();
            field.matched += counts.matched;
            field.pred_pairs += counts.pred_pairs;
            field.gold_pairs += counts.gold_pairs;
        }
        per_document.push(DocumentScore {
            dataset_id: doc.dataset_id.clone(),
            doc_id: doc.doc_id.clone(),
            report,
        });
    }

    let per_dataset: BTreeMap<String, ScoreReport> = pooled
        .into_iter()
        .map(|(dataset, (matched, pred, gold, fields))| {
            (dataset, ScoreReport::from_counts(matched, pred, gold, fields))
        })
        .collect();

    let rounded_f1s: Vec<f64> = per_dataset
        .values()
        .map(|r| round_half_even_1dp(r.f1_percent()))
        .collect();
    CorpusReport {
        mean_f1_percent: mean_of_dataset_f1s(&rounded_f1s),
        per_dataset,
        documents: per_document,
    }
}
