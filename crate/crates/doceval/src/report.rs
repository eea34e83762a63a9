//! Report emission: the model-by-modality score table, the per-modality
//! error-distribution report, and the cost table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::gateway::{ledger_report, UsageLedgerEntry};
use crate::prompt::Modality;
use crate::score::{round_half_even_1dp, CorpusReport};
use crate::triage::attribution::{AttributionReport, TopLevelClass};

/// Everything the score table needs: datasets and modalities in column
/// order plus one corpus report per model and modality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub datasets: Vec<String>,
    pub modalities: Vec<Modality>,
    pub rows: BTreeMap<String, BTreeMap<Modality, CorpusReport>>,
}

const CELL_WIDTH: usize = 10;

fn format_cell(value: Option<f64>, bold: bool) -> String {
    let text = match value {
        Some(v) => {
            if bold {
                format!("**{v:.1}**")
            } else {
                format!("{v:.1}")
            }
        }
        None => "-".to_string(),
    };
    format!("{text:>CELL_WIDTH$}")
}

/// Renders the score table: rows are models, column groups are
/// modalities, sub-columns the datasets plus their mean. The best value
/// per column is bolded; ties bold every holder. One decimal, ties to
/// even, and the footer states the rule.
pub fn emit_score_table(matrix: &ScoreMatrix) -> String {
    let model_width = matrix
        .rows
        .keys()
        .map(|m| m.len())
        .chain(std::iter::once("Model".len()))
        .max()
        .unwrap_or(5);

    // Rounded cell values per (modality, column), column = dataset or Mean.
    let mut columns: Vec<(Modality, Option<String>)> = Vec::new();
    for modality in &matrix.modalities {
        for dataset in &matrix.datasets {
            columns.push((*modality, Some(dataset.clone())));
        }
        columns.push((*modality, None));
    }
    let cell_value = |model: &str, modality: Modality, dataset: &Option<String>| -> Option<f64> {
        let report = matrix.rows.get(model)?.get(&modality)?;
        match dataset {
            Some(ds) => report
                .per_dataset
                .get(ds)
                .map(|r| round_half_even_1dp(r.f1_percent())),
            None => Some(report.mean_f1_percent),
        }
    };
    let column_max: Vec<Option<f64>> = columns
        .iter()
        .map(|(modality, dataset)| {
            matrix
                .rows
                .keys()
                .filter_map(|model| cell_value(model, *modality, dataset))
                .fold(None, |best: Option<f64>, v| {
                    Some(best.map_or(v, |b| if v > b { v } else { b }))
                })
        })
        .collect();

    let mut out = String::new();
    out.push_str(&format!("{:<model_width$}", "Model"));
    for modality in &matrix.modalities {
        let group_width = (matrix.datasets.len() + 1) * CELL_WIDTH;
        out.push_str(&format!(" | {:^group_width$}", modality.label()));
    }
    out.push('\n');
    out.push_str(&format!("{:<model_width$}", ""));
    for _ in &matrix.modalities {
        out.push_str(" |");
        for dataset in &matrix.datasets {
            out.push_str(&format!("{dataset:>CELL_WIDTH$}"));
        }
        out.push_str(&format!("{:>CELL_WIDTH$}", "Mean"));
    }
    out.push('\n');

    for model in matrix.rows.keys() {
        out.push_str(&format!("{model:<model_width$}"));
        let mut column_index = 0;
        for modality in &matrix.modalities {
            out.push_str(" |");
            for dataset in &matrix.datasets {
                let value = cell_value(model, *modality, &Some(dataset.clone()));
                let bold = matches!((value, column_max[column_index]), (Some(v), Some(m)) if v == m);
                out.push_str(&format_cell(value, bold));
                column_index += 1;
            }
            let value = cell_value(model, *modality, &None);
            let bold = matches!((value, column_max[column_index]), (Some(v), Some(m)) if v == m);
            out.push_str(&format_cell(value, bold));
            column_index += 1;
        }
        out.push('\n');
    }
    out.push_str(
        "\nMean = arithmetic mean of the dataset F1 scores. \
         Values are percentages rounded to one decimal, ties to even. \
         Best value per column in **bold**.\n",
    );
    out
}

/// One-decimal percentages by largest remainder, so they always sum to
/// exactly 100.0 (ties go to the earlier class).
fn percentages_of(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    // Work in tenths of a percent.
    let mut base: Vec<usize> = counts.iter().map(|c| c * 1000 / total).collect();
    let mut remainders: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, c)| (i, (c * 1000) % total))
        .collect();
    remainders.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let missing = 1000 - base.iter().sum::<usize>();
    for (index, _) in remainders.into_iter().take(missing) {
        base[index] += 1;
    }
    base.into_iter().map(|tenths| tenths as f64 / 10.0).collect()
}

/// Renders the per-modality error distribution: totals, per-class counts
/// and percentages (apportioned to sum to 100 per modality), then the
/// cluster table with keywords and provenance.
pub fn emit_error_report(report: &AttributionReport) -> String {
    const CLASSES: [TopLevelClass; 4] = [
        TopLevelClass::ATextMisinterpretation,
        TopLevelClass::BImageToText,
        TopLevelClass::COcrSchemaAmbiguity,
        TopLevelClass::Other,
    ];
    let mut out = String::new();
    out.push_str(&format!("Total errors: {}\n", report.total_errors));
    for (modality, counts) in &report.per_modality {
        let total = counts.total();
        out.push_str(&format!("\n{} ({} errors)\n", modality.label(), total));
        let class_counts: Vec<usize> = CLASSES.iter().map(|c| counts.get(*c)).collect();
        let percents = percentages_of(&class_counts);
        for (class, (count, percent)) in CLASSES.iter().zip(class_counts.iter().zip(percents)) {
            if *class == TopLevelClass::Other && *count == 0 {
                continue;
            }
            out.push_str(&format!(
                "  {:<32} {:>5}  {:>6.1}%\n",
                class.label(),
                count,
                percent
            ));
        }
    }

    if !report.clusters.is_empty() {
        out.push_str("\nClusters (size, class, source, keywords):\n");
        for cluster in &report.clusters {
            let source = cluster
                .source_tag
                .map(|s| format!("{s:?}"))
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!(
                "  {:>4}  {:<10} {:<24} {}\n",
                cluster.size,
                match cluster.top_level {
                    TopLevelClass::ATextMisinterpretation => "A",
                    TopLevelClass::BImageToText => "B",
                    TopLevelClass::COcrSchemaAmbiguity => "C",
                    TopLevelClass::Other => "OTHER",
                },
                source,
                cluster.keywords.join(", ")
            ));
        }
    }
    for warning in &report.warnings {
        out.push_str(&format!("\nwarning: {warning}\n"));
    }
    out.push_str(&format!(
        "\nClustering: tau = {}, embedder = {}\n",
        report.tau, report.embedder_id
    ));
    out
}

/// Renders the per-model cost/latency table from ledger entries.
pub fn emit_cost_table(entries: &[UsageLedgerEntry]) -> String {
    ledger_report(entries).render()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{mean_of_dataset_f1s, DocumentScore, ScoreReport};

    fn corpus_report(f1s: &[(&str, usize, usize, usize)]) -> CorpusReport {
        let per_dataset: BTreeMap<String, ScoreReport> = f1s
            .iter()
            .map(|(ds, matched, pred, gold)| {
                (
                    ds.to_string(),
                    ScoreReport::from_counts(*matched, *pred, *gold, BTreeMap::new()),
                )
            })
            .collect();
        let rounded: Vec<f64> = per_dataset
            .values()
            .map(|r| round_half_even_1dp(r.f1_percent()))
            .collect();
        CorpusReport {
            mean_f1_percent: mean_of_dataset_f1s(&rounded),
            per_dataset,
            documents: Vec::<DocumentScore>::new(),
        }
    }

    #[test]
    fn mean_column_reproduces_arithmetic_rule() {
        // 779/1000/1000 -> F1 77.9; 651/1000/1000 -> F1 65.1.
        let report = corpus_report(&[("C1", 779, 1000, 1000), ("C2", 651, 1000, 1000)]);
        assert_eq!(report.mean_f1_percent, 71.5);
        let matrix = ScoreMatrix {
            datasets: vec!["C1".into(), "C2".into()],
            modalities: vec![Modality::ImageOnly],
            rows: BTreeMap::from([(
                "model-a".to_string(),
                BTreeMap::from([(Modality::ImageOnly, report)]),
            )]),
        };
        let table = emit_score_table(&matrix);
        assert!(table.contains("77.9"));
        assert!(table.contains("65.1"));
        assert!(table.contains("71.5"));
    }

    #[test]
    fn single_model_single_dataset_mean_equals_value() {
        let report = corpus_report(&[("C1", 684, 1000, 1000)]);
        assert_eq!(report.mean_f1_percent, 68.4);
        let matrix = ScoreMatrix {
            datasets: vec!["C1".into()],
            modalities: vec![Modality::OcrOnly],
            rows: BTreeMap::from([(
                "m".to_string(),
                BTreeMap::from([(Modality::OcrOnly, report)]),
            )]),
        };
        let table = emit_score_table(&matrix);
        assert_eq!(table.matches("68.4").count(), 2, "dataset cell and mean cell");
    }

    #[test]
    fn tied_best_values_are_both_bolded() {
        let a = corpus_report(&[("C1", 700, 1000, 1000)]);
        let b = corpus_report(&[("C1", 700, 1000, 1000)]);
        let matrix = ScoreMatrix {
            datasets: vec!["C1".into()],
            modalities: vec![Modality::OcrOnly],
            rows: BTreeMap::from([
                ("model-a".to_string(), BTreeMap::from([(Modality::OcrOnly, a)])),
                ("model-b".to_string(), BTreeMap::from([(Modality::OcrOnly, b)])),
            ]),
        };
        let table = emit_score_table(&matrix);
        assert_eq!(table.matches("**70.0**").count(), 4, "both rows bolded in both columns");
    }

    #[test]
    fn missing_cells_render_as_dash() {
        let a = corpus_report(&[("C1", 700, 1000, 1000)]);
        let matrix = ScoreMatrix {
            datasets: vec!["C1".into(), "C2".into()],
            modalities: vec![Modality::OcrOnly],
            rows: BTreeMap::from([("model-a".to_string(), BTreeMap::from([(Modality::OcrOnly, a)]))]),
        };
        let table = emit_score_table(&matrix);
        assert!(table.contains('-'));
    }

    mod error_report {
        use super::*;
        use crate::triage::attribution::{ClassCounts, ClusterSummary, SourceTag};

        fn attribution(counts: Vec<(Modality, ClassCounts)>) -> AttributionReport {
            let total = counts.iter().map(|(_, c)| c.total()).sum();
            AttributionReport {
                per_modality: counts.into_iter().collect(),
                clusters: vec![ClusterSummary {
                    size: 2,
                    member_error_ids: vec!["e1".into(), "e2".into()],
                    keywords: vec!["quantity".into()],
                    top_level: TopLevelClass::COcrSchemaAmbiguity,
                    source_tag: Some(SourceTag::OcrMisrecognition),
                }],
                total_errors: total,
                warnings: vec![],
                tau: 0.8,
                embedder_id: "trigram".into(),
            }
        }

        #[test]
        fn all_one_class_is_hundred_percent() {
            let counts = ClassCounts {
                b: 10,
                ..ClassCounts::default()
            };
            let text = emit_error_report(&attribution(vec![(Modality::ImageOnly, counts)]));
            assert!(text.contains("100.0%"));
        }

        #[test]
        fn class_percentages_follow_counts() {
            let counts = ClassCounts {
                a: 3,
                b: 5,
                c: 2,
                other: 0,
            };
            let text = emit_error_report(&attribution(vec![(Modality::OcrOnly, counts)]));
            assert!(text.contains("30.0%"));
            assert!(text.contains("50.0%"));
            assert!(text.contains("20.0%"));
        }

        #[test]
        fn percentages_sum_to_exactly_hundred() {
            for counts in [
                vec![1, 1, 1, 0],
                vec![3, 5, 2, 0],
                vec![7, 11, 13, 2],
                vec![1, 0, 0, 0],
            ] {
                let percents = super::super::percentages_of(&counts);
                let sum: f64 = percents.iter().sum();
                assert!((sum - 100.0).abs() < 1e-9, "{counts:?} -> {percents:?}");
            }
        }
    }
}
