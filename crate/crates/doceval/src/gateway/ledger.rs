//! Usage ledger: per-call token, latency, and cost accounting, and the
//! per-model cost/latency table derived from it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::prompt::Modality;

/// Pipeline stage a ledger entry belongs to. The cost table reports
/// extraction calls; triage calls are accounted separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerStage {
    Extract,
    Triage,
}

/// One accounted model call. `cost` is exactly
/// `input_units * input_price + output_units * output_price`; cassette
/// hits in record mode are kept as zero-cost entries flagged `cached`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageLedgerEntry {
    pub doc_id: String,
    pub model_id: String,
    pub modality: Modality,
    pub stage: LedgerStage,
    pub page_count: usize,
    pub input_units: u64,
    pub output_units: u64,
    pub latency_seconds: f64,
    pub cost: f64,
    #[serde(default)]
    pub cached: bool,
}

/// Per-unit prices for one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub input_per_unit: f64,
    pub output_per_unit: f64,
}

/// Price configuration keyed by model id. Models without an entry cost
/// zero, which keeps stub and mock models out of the books.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PriceTable {
    pub models: BTreeMap<String, ModelPrice>,
}

impl PriceTable {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The built-in default table shipped with the crate.
    pub fn builtin() -> Self {
        toml::from_str(include_str!("../../assets/prices.toml"))
            .expect("built-in price table parses")
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn set(&mut self, model_id: impl Into<String>, price: ModelPrice) {
        self.models.insert(model_id.into(), price);
    }

    pub fn get(&self, model_id: &str) -> Option<ModelPrice> {
        self.models.get(model_id).copied()
    }

    pub fn cost(&self, model_id: &str, input_units: u64, output_units: u64) -> f64 {
        match self.get(model_id) {
            Some(price) => {
                input_units as f64 * price.input_per_unit
                    + output_units as f64 * price.output_per_unit
            }
            None => 0.0,
        }
    }
}

/// One row of the cost/latency table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub model_id: String,
    pub calls: usize,
    pub pages: usize,
    pub mean_latency_per_page: f64,
    pub mean_cost_per_page: f64,
    pub total_cost: f64,
}

impl CostRow {
    /// Estimates column in the report style: `~1.4s, ~$0.0025`.
    pub fn formatted(&self) -> String {
        format!(
            "~{}, ~${}",
            format_latency(self.mean_latency_per_page),
            format_cost(self.mean_cost_per_page)
        )
    }
}

fn format_latency(seconds: f64) -> String {
    format!("{seconds:.1}s")
}

/// Four decimals, trailing zeros trimmed down to three: `0.006`, `0.010`,
/// `0.0025`.
fn format_cost(cost: f64) -> String {
    let mut text = format!("{cost:.4}");
    while text.ends_with('0') {
        let decimals = text.len() - text.find('.').expect("decimal point") - 1;
        if decimals <= 3 {
            break;
        }
        text.pop();
    }
    text
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
}

impl CostTable {
    pub fn render(&self) -> String {
        if self.rows.is_empty() {
            return "no usage recorded\n".to_string();
        }
        let name_width = self
            .rows
            .iter()
            .map(|r| r.model_id.len())
            .max()
            .unwrap_or(5)
            .max("Model".len());
        let mut out = String::new();
        out.push_str(&format!(
            "{:<name_width$}  {:>22}  {:>20}\n",
            "Model", "Latency/Page (Est.)", "Cost/Page (Est.)"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<name_width$}  {:>22}  {:>20}\n",
                row.model_id,
                format!("~{}", format_latency(row.mean_latency_per_page)),
                format!("~${}", format_cost(row.mean_cost_per_page)),
            ));
        }
        out
    }
}

/// Aggregates ledger entries into per-model per-page means.
///
/// Cached entries are bookkeeping, not model behaviour: they carry zero
/// cost and no latency, so they stay out of the means. Empty input yields
/// an empty table.
pub fn ledger_report(entries: &[UsageLedgerEntry]) -> CostTable {
    let mut grouped: BTreeMap<&str, Vec<&UsageLedgerEntry>> = BTreeMap::new();
    for entry in entries.iter().filter(|e| !e.cached) {
        grouped.entry(&entry.model_id).or_default().push(entry);
    }
    let rows = grouped
        .into_iter()
        .map(|(model_id, group)| {
            let pages: usize = group.iter().map(|e| e.page_count).sum();
            let page_div = pages.max(1) as f64;
            let latency: f64 = group.iter().map(|e| e.latency_seconds).sum();
            let cost: f64 = group.iter().map(|e| e.cost).sum();
            CostRow {
                model_id: model_id.to_string(),
                calls: group.len(),
                pages,
                mean_latency_per_page: latency / page_div,
                mean_cost_per_page: cost / page_div,
                total_cost: cost,
            }
        })
        .collect();
    CostTable { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn entry(model: &str, latency: f64, cost: f64) -> UsageLedgerEntry {
        UsageLedgerEntry {
            doc_id: "d".into(),
            model_id: model.into(),
            modality: Modality::OcrOnly,
            stage: LedgerStage::Extract,
            page_count: 1,
            input_units: 0,
            output_units: 0,
            latency_seconds: latency,
            cost,
            cached: false,
        }
    }

    #[test]
    fn single_entry_formats_like_the_reference_row() {
        let table = ledger_report(&[entry("gemini-2.5-flash", 1.4, 0.0025)]);
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].formatted(), "~1.4s, ~$0.0025");
    }

    #[test]
    fn cost_formatting_keeps_at_least_three_decimals() {
        assert_eq!(format_cost(0.006), "0.006");
        assert_eq!(format_cost(0.010), "0.010");
        assert_eq!(format_cost(0.050), "0.050");
        assert_eq!(format_cost(0.001), "0.001");
        assert_eq!(format_cost(0.0025), "0.0025");
        assert_eq!(format_cost(0.0035), "0.0035");
        assert_eq!(format_latency(7.0), "7.0s");
        assert_eq!(format_latency(2.2), "2.2s");
    }

    #[test]
    fn means_are_arithmetic() {
        let table = ledger_report(&[entry("m", 2.0, 0.0), entry("m", 4.0, 0.0)]);
        assert!((table.rows[0].mean_latency_per_page - 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_ledger_yields_empty_table() {
        assert!(ledger_report(&[]).rows.is_empty());
    }

    #[test]
    fn cached_entries_stay_out_of_the_means() {
        let mut cached = entry("m", 9.0, 9.0);
        cached.cached = true;
        cached.cost = 0.0;
        let table = ledger_report(&[entry("m", 2.0, 0.004), cached]);
        assert_eq!(table.rows[0].calls, 1);
        assert!((table.rows[0].mean_latency_per_page - 2.0).abs() < 1e-12);
    }

    #[test]
    fn random_means_match_independent_summation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let entries: Vec<UsageLedgerEntry> = (0..100)
            .map(|_| entry("m", rng.gen_range(0.1..9.0), rng.gen_range(0.0001..0.1)))
            .collect();
        let table = ledger_report(&entries);

        let mut latency_sum = 0.0;
        let mut cost_sum = 0.0;
        for e in &entries {
            latency_sum += e.latency_seconds;
            cost_sum += e.cost;
        }
        assert!((table.rows[0].mean_latency_per_page - latency_sum / 100.0).abs() < 1e-9);
        assert!((table.rows[0].mean_cost_per_page - cost_sum / 100.0).abs() < 1e-9);
    }

    #[test]
    fn cost_formula_is_exact() {
        let mut prices = PriceTable::empty();
        prices.set(
            "m",
            ModelPrice {
                input_per_unit: 0.0000024,
                output_per_unit: 0.0000096,
            },
        );
        let cost = prices.cost("m", 1500, 250);
        assert_eq!(cost, 1500.0 * 0.0000024 + 250.0 * 0.0000096);
        assert_eq!(prices.cost("unknown", 1500, 250), 0.0);
    }

    #[test]
    fn builtin_table_parses_and_prices_reference_models() {
        let prices = PriceTable::builtin();
        let per_page = prices.cost("gemini-2.5-flash", 1500, 250);
        assert!((per_page - 0.0025).abs() < 1e-12);
    }
}
