//! Synthetic delivery-note corpus: seeded fixtures with exact ground truth
//! plus controlled error injection, for desk-scale offline verification.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::{DocumentFixture, OcrToken};
use crate::record::{ExtractionRecord, PairPath};
use crate::schema::{ExtractionSchema, ValueKind};
use crate::triage::handler::{aggressive_normalize, confusable_fold, char_similarity, DiscrepancyKind};

#[derive(Debug, Error)]
pub enum InjectError {
    #[error("cannot inject {kind}: {reason}")]
    NotInjectable {
        kind: DiscrepancyKind,
        reason: String,
    },
}

/// Corpus generation parameters. Identical profile and seed produce a
/// byte-identical corpus; injection rates are independent per kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusProfile {
    pub seed: u64,
    pub doc_count: usize,
    /// Inclusive range of line items per document.
    pub items_per_doc: (usize, usize),
    /// Weighted language mix for field labels.
    pub language_weights: Vec<(String, f64)>,
    /// Per-kind injection rates in [0, 1], applied independently.
    #[serde(default)]
    pub noise: BTreeMap<DiscrepancyKind, f64>,
}

impl Default for CorpusProfile {
    fn default() -> Self {
        Self {
            seed: 0,
            doc_count: 10,
            items_per_doc: (1, 4),
            language_weights: vec![
                ("en".to_string(), 1.0),
                ("de".to_string(), 1.0),
                ("es".to_string(), 1.0),
            ],
            noise: BTreeMap::new(),
        }
    }
}

/// What one injection did: where, what kind, and the before/after values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionLabel {
    pub path: String,
    pub kind: DiscrepancyKind,
    pub original: String,
    pub mutated: String,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    // splitmix64 finalizer over (seed, stream) so distinct streams decouple.
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

struct LabelSet {
    title: &'static str,
    date: &'static str,
    delivery_date: &'static str,
    order: &'static str,
    supplier: &'static str,
    columns: [&'static str; 6],
    units: &'static [&'static str],
}

fn labels_for(language: &str) -> LabelSet {
    match language {
        "de" => LabelSet {
            title: "Lieferschein",
            date: "Datum:",
            delivery_date: "Lieferdatum:",
            order: "Bestellnummer:",
            supplier: "Lieferant:",
            columns: ["Pos", "Material", "Kd.Material", "Menge", "Einheit", "Bestellpos"],
            units: &["Stk", "Kart", "Kg"],
        },
        "es" => LabelSet {
            title: "Albarán",
            date: "Fecha:",
            delivery_date: "Entrega:",
            order: "Pedido:",
            supplier: "Proveedor:",
            columns: ["Pos", "Material", "Mat.Cliente", "Cantidad", "Unidad", "Pos.Pedido"],
            units: &["Uds", "Caja", "Kg"],
        },
        _ => LabelSet {
            title: "Delivery Note",
            date: "Date:",
            delivery_date: "Delivery date:",
            order: "Order No:",
            supplier: "Supplier:",
            columns: ["Item", "Material", "Cust.Material", "Qty", "Unit", "PO-Item"],
            units: &["Pcs", "Box", "Kg", "Set"],
        },
    }
}

fn pick_language(weights: &[(String, f64)], rng: &mut ChaCha8Rng) -> String {
    let total: f64 = weights.iter().map(|(_, w)| w.max(0.0)).sum();
    if total <= 0.0 {
        return "en".to_string();
    }
    let mut draw = rng.gen::<f64>() * total;
    for (language, weight) in weights {
        draw -= weight.max(0.0);
        if draw <= 0.0 {
            return language.clone();
        }
    }
    weights.last().map(|(l, _)| l.clone()).unwrap_or_else(|| "en".to_string())
}

fn random_date(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{:04}-{:02}-{:02}",
        rng.gen_range(2021..=2025),
        rng.gen_range(1..=12),
        rng.gen_range(1..=28)
    )
}

fn random_digits(rng: &mut ChaCha8Rng, len: usize) -> String {
    // No leading zero, so format-injection padding stays unambiguous.
    let mut out = String::with_capacity(len);
    out.push(char::from_digit(rng.gen_range(1..=9), 10).unwrap());
    for _ in 1..len {
        out.push(char::from_digit(rng.gen_range(0..=9), 10).unwrap());
    }
    out
}

const MATERIAL_LETTERS: &[char] = &[
    'K', 'L', 'M', 'H', 'X', 'A', 'B', 'T', 'N', 'R', 'P', 'D', 'F', 'G', 'W',
];

fn random_material_number(rng: &mut ChaCha8Rng) -> String {
    let prefix_len = rng.gen_range(2..=3);
    let mut out = String::new();
    for _ in 0..prefix_len {
        out.push(*MATERIAL_LETTERS.choose(rng).unwrap());
    }
    out.push('-');
    let digit_len = rng.gen_range(3..=4);
    out.push_str(&random_digits(rng, digit_len));
    if rng.gen_bool(0.5) {
        out.push(*MATERIAL_LETTERS.choose(rng).unwrap());
    }
    out
}

fn random_quantity(rng: &mut ChaCha8Rng) -> String {
    let whole = rng.gen_range(1..=200);
    match rng.gen_range(0..3) {
        0 => whole.to_string(),
        1 => format!("{whole}.00"),
        _ => format!("{whole}.50"),
    }
}

/// Generates one synthetic document: a header block plus an item table
/// with aligned columns. Every non-empty gold value appears verbatim among
/// the page tokens. Deterministic per (profile.seed, index).
pub fn generate_document(profile: &CorpusProfile, index: usize) -> (DocumentFixture, ExtractionRecord) {
    assert!(index < profile.doc_count, "index {index} beyond doc_count");
    let mut rng = rng_for(profile.seed, index as u64);
    let schema = ExtractionSchema::delivery_note();
    let language = pick_language(&profile.language_weights, &mut rng);
    let labels = labels_for(&language);

    let document_date = random_date(&mut rng);
    let delivery_date = rng.gen_bool(0.8).then(|| random_date(&mut rng));
    let note_len = rng.gen_range(4..=6);
    let note_number = random_digits(&mut rng, note_len);
    let po_number = rng.gen_bool(0.85).then(|| format!("45{}", random_digits(&mut rng, 6)));
    let supplier_len = rng.gen_range(5..=7);
    let supplier_id = rng.gen_bool(0.7).then(|| random_digits(&mut rng, supplier_len));

    let (items_min, items_max) = profile.items_per_doc;
    let item_count = rng.gen_range(items_min..=items_max.max(items_min));
    let tens_numbering = rng.gen_bool(0.4);

    let mut gold = ExtractionRecord::empty(&schema);
    gold.set_header("documentDate", document_date.clone());
    gold.set_header("deliveryNoteNumber", note_number.clone());
    if let Some(date) = &delivery_date {
        gold.set_header("deliveryDate", date.clone());
    }
    if let Some(po) = &po_number {
        gold.set_header("purchaseOrderNumber", po.clone());
    }
    if let Some(id) = &supplier_id {
        gold.set_header("supplierId", id.clone());
    }

    let mut tokens: Vec<OcrToken> = Vec::new();
    let push_text = |text: &str, x: f64, y: f64, tokens: &mut Vec<OcrToken>| {
        let mut cursor = x;
        for word in text.split_whitespace() {
            let width = 0.011 * word.chars().count() as f64;
            let x1 = (cursor + width).min(0.999);
            tokens.push(OcrToken::new(word, 0, cursor, y, x1.max(cursor + 0.005), y + 0.014));
            cursor = x1 + 0.008;
        }
    };

    push_text(labels.title, 0.06, 0.05, &mut tokens);
    push_text(&note_number, 0.46, 0.05, &mut tokens);
    let mut header_y = 0.10;
    push_text(labels.date, 0.06, header_y, &mut tokens);
    push_text(&document_date, 0.30, header_y, &mut tokens);
    if let Some(date) = &delivery_date {
        header_y += 0.03;
        push_text(labels.delivery_date, 0.06, header_y, &mut tokens);
        push_text(date, 0.30, header_y, &mut tokens);
    }
    if let Some(po) = &po_number {
        header_y += 0.03;
        push_text(labels.order, 0.06, header_y, &mut tokens);
        push_text(po, 0.30, header_y, &mut tokens);
    }
    if let Some(id) = &supplier_id {
        header_y += 0.03;
        push_text(labels.supplier, 0.06, header_y, &mut tokens);
        push_text(id, 0.30, header_y, &mut tokens);
    }

    const COLUMN_X: [f64; 6] = [0.06, 0.16, 0.40, 0.60, 0.72, 0.84];
    let table_top = header_y + 0.06;
    for (label, x) in labels.columns.iter().zip(COLUMN_X) {
        push_text(label, x, table_top, &mut tokens);
    }

    for i in 0..item_count {
        let row_y = table_top + 0.035 * (i + 1) as f64;
        let item_number = if tens_numbering {
            ((i + 1) * 10).to_string()
        } else {
            (i + 1).to_string()
        };
        let material = random_material_number(&mut rng);
        let customer_material = rng.gen_bool(0.4).then(|| random_digits(&mut rng, 7));
        let quantity = random_quantity(&mut rng);
        let unit = rng
            .gen_bool(0.9)
            .then(|| labels.units.choose(&mut rng).unwrap().to_string());
        let po_item = rng.gen_bool(0.5).then(|| ((i + 1) * 10).to_string());
        let line_po = po_number.as_ref().filter(|_| rng.gen_bool(0.3)).cloned();

        push_text(&item_number, COLUMN_X[0], row_y, &mut tokens);
        push_text(&material, COLUMN_X[1], row_y, &mut tokens);
        if let Some(cm) = &customer_material {
            push_text(cm, COLUMN_X[2], row_y, &mut tokens);
        }
        push_text(&quantity, COLUMN_X[3], row_y, &mut tokens);
        if let Some(u) = &unit {
            push_text(u, COLUMN_X[4], row_y, &mut tokens);
        }
        if let Some(p) = &po_item {
            push_text(p, COLUMN_X[5], row_y, &mut tokens);
        }

        let mut item: BTreeMap<String, String> = schema
            .line_item_fields
            .iter()
            .map(|f| (f.key.clone(), String::new()))
            .collect();
        item.insert("lineItem.itemNumber".into(), item_number);
        item.insert("lineItem.supplierMaterialNumber".into(), material);
        item.insert("lineItem.quantity".into(), quantity);
        if let Some(cm) = customer_material {
            item.insert("lineItem.customerMaterialNumber".into(), cm);
        }
        if let Some(u) = unit {
            item.insert("lineItem.unitOfMeasure".into(), u);
        }
        if let Some(p) = po_item {
            item.insert("lineItem.purchaseOrderItemNumber".into(), p);
        }
        if let Some(p) = line_po {
            item.insert("lineItem.purchaseOrderNumber".into(), p);
        }
        gold.line_items.push(item);
    }

    let fixture = DocumentFixture {
        doc_id: format!("doc-{index:04}"),
        page_count: 1,
        tokens,
        image_refs: None,
        language_tag: Some(language),
    };
    debug_assert!(fixture.validate().is_ok());
    (fixture, gold)
}

// ---------------------------------------------------------------------------
// Error injection
// ---------------------------------------------------------------------------

/// A mutable slot in the record.
#[derive(Debug, Clone)]
struct Slot {
    path: PairPath,
    kind: ValueKind,
    value: String,
}

fn slots_of(record: &ExtractionRecord, schema: &ExtractionSchema) -> Vec<Slot> {
    let mut slots = Vec::new();
    for field in &schema.header_fields {
        if let Some(values) = record.header.get(&field.key) {
            let value = values.first().cloned().unwrap_or_default();
            slots.push(Slot {
                path: PairPath::header(&field.key),
                kind: field.kind,
                value,
            });
        }
    }
    for (index, item) in record.line_items.iter().enumerate() {
        for field in &schema.line_item_fields {
            slots.push(Slot {
                path: PairPath::line_item(index, &field.key),
                kind: field.kind,
                value: item.get(&field.key).cloned().unwrap_or_default(),
            });
        }
    }
    slots
}

fn all_values(record: &ExtractionRecord) -> Vec<String> {
    let mut values: Vec<String> = record.header.values().flatten().cloned().collect();
    for item in &record.line_items {
        values.extend(item.values().cloned());
    }
    values.retain(|v| !v.is_empty());
    values
}

fn set_slot(record: &mut ExtractionRecord, path: &PairPath, value: String) {
    match path {
        PairPath::Header { key } => {
            record.header.insert(key.clone(), vec![value]);
        }
        PairPath::LineItem { index, key } => {
            record.line_items[*index].insert(key.clone(), value);
        }
    }
}

fn not_injectable(kind: DiscrepancyKind, reason: &str) -> InjectError {
    InjectError::NotInjectable {
        kind,
        reason: reason.to_string(),
    }
}

fn confusable_partner(c: char) -> Option<char> {
    match c {
        '1' => Some('I'),
        'I' => Some('1'),
        'l' => Some('1'),
        '0' => Some('O'),
        'O' => Some('0'),
        '5' => Some('S'),
        'S' => Some('5'),
        '8' => Some('B'),
        'B' => Some('8'),
        '2' => Some('Z'),
        'Z' => Some('2'),
        'X' => Some('\u{03a7}'),
        'M' => Some('\u{039c}'),
        'H' => Some('\u{0397}'),
        'A' => Some('\u{0391}'),
        'E' => Some('\u{0395}'),
        'K' => Some('\u{039a}'),
        'N' => Some('\u{039d}'),
        'T' => Some('\u{03a4}'),
        'Y' => Some('\u{03a5}'),
        _ => None,
    }
}

/// Characters used for near-miss substitution: outside every confusable
/// class, so the mutation never folds back to the original.
const NEUTRAL_CHARS: &[char] = &['3', '4', '6', '7', '9', 'C', 'D', 'F', 'G', 'J', 'Q', 'R', 'U', 'V', 'W'];

/// Applies one mutation template to the record, producing a prediction
/// with exactly one field changed plus the injection label. Deterministic
/// per (record, kind, seed).
pub fn inject_error(
    gold: &ExtractionRecord,
    kind: DiscrepancyKind,
    seed: u64,
    schema: &ExtractionSchema,
) -> Result<(ExtractionRecord, InjectionLabel), InjectError> {
    let mut rng = rng_for(seed, 0x1000 + kind as u64);
    let slots = slots_of(gold, schema);
    let gold_values = all_values(gold);
    let mut pred = gold.clone();

    let label = |path: &PairPath, original: &str, mutated: &str| InjectionLabel {
        path: path.to_string(),
        kind,
        original: original.to_string(),
        mutated: mutated.to_string(),
    };

    match kind {
        DiscrepancyKind::Missing => {
            let candidates: Vec<&Slot> = slots.iter().filter(|s| !s.value.is_empty()).collect();
            let slot = candidates
                .choose(&mut rng)
                .ok_or_else(|| not_injectable(kind, "no non-empty field"))?;
            set_slot(&mut pred, &slot.path, String::new());
            Ok((pred, label(&slot.path, &slot.value, "")))
        }
        DiscrepancyKind::Spurious => {
            let candidates: Vec<&Slot> = slots.iter().filter(|s| s.value.is_empty()).collect();
            let slot = candidates
                .choose(&mut rng)
                .ok_or_else(|| not_injectable(kind, "no empty field to fabricate into"))?;
            let fabricated = match slot.kind {
                ValueKind::Date => "2031-12-31".to_string(),
                ValueKind::Quantity => "999.00".to_string(),
                ValueKind::FreeText => "Qq".to_string(),
                _ => format!("9{}", random_digits(&mut rng, 4)),
            };
            set_slot(&mut pred, &slot.path, fabricated.clone());
            Ok((pred, label(&slot.path, "", &fabricated)))
        }
        DiscrepancyKind::Format => {
            let is_plain_number = |v: &str| {
                !v.is_empty()
                    && v.starts_with(|c: char| c.is_ascii_digit())
                    && v.chars().all(|c| c.is_ascii_digit() || c == '.')
                    && v.chars().filter(|c| *c == '.').count() <= 1
            };
            let candidates: Vec<&Slot> = slots
                .iter()
                .filter(|s| {
                    matches!(s.kind, ValueKind::Identifier | ValueKind::Quantity)
                        && is_plain_number(&s.value)
                })
                .collect();
            let slot = candidates
                .choose(&mut rng)
                .ok_or_else(|| not_injectable(kind, "no numeric identifier or quantity"))?;
            let mutated = format!("00{}", slot.value);
            debug_assert_eq!(aggressive_normalize(&mutated), aggressive_normalize(&slot.value));
            set_slot(&mut pred, &slot.path, mutated.clone());
            Ok((pred, label(&slot.path, &slot.value, &mutated)))
        }
        DiscrepancyKind::Homoglyph => {
            let candidates: Vec<(&Slot, Vec<usize>)> = slots
                .iter()
                .filter(|s| !s.value.is_empty())
                .map(|s| {
                    let positions: Vec<usize> = s
                        .value
                        .chars()
                        .enumerate()
                        .filter(|(_, c)| confusable_partner(*c).is_some())
                        .map(|(i, _)| i)
                        .collect();
                    (s, positions)
                })
                .filter(|(_, positions)| !positions.is_empty())
                .collect();
            if candidates.is_empty() {
                return Err(not_injectable(kind, "no confusable character available"));
            }
            for _ in 0..40 {
                let (slot, positions) = candidates.choose(&mut rng).unwrap();
                let position = *positions.choose(&mut rng).unwrap();
                let mutated: String = slot
                    .value
                    .chars()
                    .enumerate()
                    .map(|(i, c)| {
                        if i == position {
                            confusable_partner(c).unwrap()
                        } else {
                            c
                        }
                    })
                    .collect();
                debug_assert_eq!(confusable_fold(&mutated), confusable_fold(&slot.value));
                // A swap like trailing 0 -> O can read as a strippable unit
                // suffix; such mutations are format errors, not homoglyphs.
                if aggressive_normalize(&mutated) == aggressive_normalize(&slot.value) {
                    continue;
                }
                set_slot(&mut pred, &slot.path, mutated.clone());
                return Ok((pred, label(&slot.path, &slot.value, &mutated)));
            }
            Err(not_injectable(kind, "confusable variants all reduce to format equality"))
        }
        DiscrepancyKind::NearMiss => {
            let candidates: Vec<&Slot> = slots
                .iter()
                .filter(|s| s.value.chars().count() >= 5)
                .collect();
            if candidates.is_empty() {
                return Err(not_injectable(kind, "no value of five or more characters"));
            }
            for _ in 0..40 {
                let slot = candidates.choose(&mut rng).unwrap();
                let chars: Vec<char> = slot.value.chars().collect();
                let position = rng.gen_range(0..chars.len());
                let replacement = *NEUTRAL_CHARS.choose(&mut rng).unwrap();
                if chars[position] == replacement {
                    continue;
                }
                let mutated: String = chars
                    .iter()
                    .enumerate()
                    .map(|(i, c)| if i == position { replacement } else { *c })
                    .collect();
                if aggressive_normalize(&mutated) == aggressive_normalize(&slot.value)
                    || confusable_fold(&mutated) == confusable_fold(&slot.value)
                    || gold_values.contains(&mutated)
                {
                    continue;
                }
                set_slot(&mut pred, &slot.path, mutated.clone());
                return Ok((pred, label(&slot.path, &slot.value, &mutated)));
            }
            Err(not_injectable(kind, "no stable single-character variant found"))
        }
        DiscrepancyKind::Swap => {
            let mut pairs = Vec::new();
            for (index, item) in gold.line_items.iter().enumerate() {
                let keys: Vec<&String> = item.keys().collect();
                for (ai, a) in keys.iter().enumerate() {
                    for b in keys.iter().skip(ai + 1) {
                        let va = &item[*a];
                        let vb = &item[*b];
                        if va.is_empty() || vb.is_empty() || va == vb {
                            continue;
                        }
                        if aggressive_normalize(va) == aggressive_normalize(vb)
                            || confusable_fold(va) == confusable_fold(vb)
                        {
                            continue;
                        }
                        pairs.push((index, (*a).clone(), (*b).clone()));
                    }
                }
            }
            let (index, target_key, source_key) = pairs
                .choose(&mut rng)
                .cloned()
                .ok_or_else(|| not_injectable(kind, "no adjacent-key pair with distinct values"))?;
            let original = gold.line_items[index][&target_key].clone();
            let mutated = gold.line_items[index][&source_key].clone();
            let path = PairPath::line_item(index, &target_key);
            set_slot(&mut pred, &path, mutated.clone());
            Ok((pred, label(&path, &original, &mutated)))
        }
        DiscrepancyKind::Misaligned => {
            if gold.line_items.len() < 2 {
                return Err(not_injectable(kind, "needs at least two line items"));
            }
            let mut candidates = Vec::new();
            for index in 0..gold.line_items.len() {
                for neighbor in [index.wrapping_sub(1), index + 1] {
                    let Some(neighbor_item) = gold.line_items.get(neighbor) else {
                        continue;
                    };
                    for (key, value) in &gold.line_items[index] {
                        let copied = &neighbor_item[key];
                        if value.is_empty() || copied.is_empty() || value == copied {
                            continue;
                        }
                        if aggressive_normalize(value) == aggressive_normalize(copied)
                            || confusable_fold(value) == confusable_fold(copied)
                        {
                            continue;
                        }
                        // The copied value must not equal another key's gold
                        // in the same item, or the swap rule fires first.
                        let same_item_collision = gold.line_items[index]
                            .iter()
                            .any(|(k, v)| k != key && v == copied);
                        if same_item_collision {
                            continue;
                        }
                        candidates.push((index, key.clone(), copied.clone(), value.clone()));
                    }
                }
            }
            let (index, key, copied, original) = candidates
                .choose(&mut rng)
                .cloned()
                .ok_or_else(|| not_injectable(kind, "no neighbor-row value differs safely"))?;
            let path = PairPath::line_item(index, &key);
            set_slot(&mut pred, &path, copied.clone());
            Ok((pred, label(&path, &original, &copied)))
        }
        DiscrepancyKind::Semantic => {
            const REPLACEMENTS: &[&str] = &["Im", "Foo", "Zv", "Qx"];
            let candidates: Vec<&Slot> = slots.iter().filter(|s| !s.value.is_empty()).collect();
            if candidates.is_empty() {
                return Err(not_injectable(kind, "no non-empty field"));
            }
            for _ in 0..40 {
                let slot = candidates.choose(&mut rng).unwrap();
                let mutated = REPLACEMENTS.choose(&mut rng).unwrap().to_string();
                if mutated == slot.value
                    || char_similarity(&mutated, &slot.value) >= 0.8
                    || aggressive_normalize(&mutated) == aggressive_normalize(&slot.value)
                    || confusable_fold(&mutated) == confusable_fold(&slot.value)
                    || gold_values.contains(&mutated)
                {
                    continue;
                }
                set_slot(&mut pred, &slot.path, mutated.clone());
                return Ok((pred, label(&slot.path, &slot.value, &mutated)));
            }
            Err(not_injectable(kind, "no sufficiently distant replacement found"))
        }
    }
}

/// Applies the profile's noise rates to a gold record, composing one
/// injection per triggered kind. Kinds that turn out not to be injectable
/// on this record are skipped.
pub fn apply_noise(
    gold: &ExtractionRecord,
    profile: &CorpusProfile,
    index: usize,
    schema: &ExtractionSchema,
) -> (ExtractionRecord, Vec<InjectionLabel>) {
    let mut rng = rng_for(profile.seed, 0x2000 + index as u64);
    let mut pred = gold.clone();
    let mut labels = Vec::new();
    for (kind, rate) in &profile.noise {
        if rng.gen::<f64>() >= *rate {
            continue;
        }
        let injection_seed = rng.gen::<u64>();
        if let Ok((mutated, injection_label)) = inject_error(&pred, *kind, injection_seed, schema) {
            pred = mutated;
            labels.push(injection_label);
        }
    }
    (pred, labels)
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

/// One manifest row: where the document's files live and which dataset it
/// belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestDoc {
    pub doc_id: String,
    pub dataset: String,
    pub fixture: String,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub docs: Vec<ManifestDoc>,
    pub profile: CorpusProfile,
}

/// Writes a full corpus to `dir`: fixtures, gold records in the wire
/// shape, the manifest, and (when the profile has noise) injected
/// predictions plus the injection manifest. Datasets are assigned
/// round-robin from `datasets`.
pub fn write_corpus(
    profile: &CorpusProfile,
    dir: &Path,
    datasets: &[String],
) -> Result<CorpusManifest, std::io::Error> {
    use std::fs;
    fs::create_dir_all(dir.join("fixtures"))?;
    fs::create_dir_all(dir.join("gold"))?;
    let with_noise = !profile.noise.is_empty();
    if with_noise {
        fs::create_dir_all(dir.join("predictions"))?;
    }
    let schema = ExtractionSchema::delivery_note();

    let mut docs = Vec::with_capacity(profile.doc_count);
    let mut injections: Vec<serde_json::Value> = Vec::new();
    for index in 0..profile.doc_count {
        let (fixture, gold) = generate_document(profile, index);
        let doc_id = fixture.doc_id.clone();
        let fixture_rel = format!("fixtures/{doc_id}.json");
        let gold_rel = format!("gold/{doc_id}.json");
        fs::write(
            dir.join(&fixture_rel),
            serde_json::to_string_pretty(&fixture)?,
        )?;
        fs::write(
            dir.join(&gold_rel),
            serde_json::to_string_pretty(&gold.to_wire_json())?,
        )?;
        let prediction = if with_noise {
            let (pred, labels) = apply_noise(&gold, profile, index, &schema);
            let pred_rel = format!("predictions/{doc_id}.json");
            fs::write(
                dir.join(&pred_rel),
                serde_json::to_string_pretty(&pred.to_wire_json())?,
            )?;
            for label in labels {
                injections.push(serde_json::json!({
                    "doc_id": doc_id,
                    "path": label.path,
                    "kind": label.kind,
                    "original": label.original,
                    "mutated": label.mutated,
                }));
            }
            Some(pred_rel)
        } else {
            None
        };
        docs.push(ManifestDoc {
            dataset: datasets[index % datasets.len().max(1)].clone(),
            doc_id,
            fixture: fixture_rel,
            gold: gold_rel,
            prediction,
        });
    }

    let manifest = CorpusManifest {
        docs,
        profile: profile.clone(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    if with_noise {
        let lines: Vec<String> = injections
            .iter()
            .map(|v| serde_json::to_string(v).expect("label serializes"))
            .collect();
        fs::write(dir.join("injections.jsonl"), lines.join("\n") + "\n")?;
    }
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest, String> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| format!("manifest.json: {e}"))?;
    serde_json::from_str(&text).map_err(|e| format!("manifest.json: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{serialize_document, DEFAULT_GRID_COLS, DEFAULT_ROW_TOLERANCE};
    use crate::score::score_document;

    fn schema() -> ExtractionSchema {
        ExtractionSchema::delivery_note()
    }

    fn profile() -> CorpusProfile {
        CorpusProfile {
            seed: 42,
            doc_count: 30,
            items_per_doc: (2, 4),
            ..CorpusProfile::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (fa, ga) = generate_document(&profile(), 3);
        let (fb, gb) = generate_document(&profile(), 3);
        assert_eq!(fa, fb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn single_item_profile_yields_single_item_gold() {
        let one = CorpusProfile {
            items_per_doc: (1, 1),
            ..profile()
        };
        let (_, gold) = generate_document(&one, 0);
        assert_eq!(gold.line_items.len(), 1);
    }

    #[test]
    fn fixtures_validate_and_gold_values_appear_in_layout() {
        for index in 0..20 {
            let (fixture, gold) = generate_document(&profile(), index);
            fixture.validate().unwrap();
            let text =
                serialize_document(&fixture, DEFAULT_GRID_COLS, DEFAULT_ROW_TOLERANCE).unwrap();
            for values in gold.header.values() {
                for value in values.iter().filter(|v| !v.is_empty()) {
                    assert!(text.contains(value), "header value {value:?} missing in layout");
                }
            }
            for item in &gold.line_items {
                for value in item.values().filter(|v| !v.is_empty()) {
                    assert!(text.contains(value), "cell value {value:?} missing in layout");
                }
            }
        }
    }

    #[test]
    fn format_injection_pads_leading_zeros() {
        let (_, gold) = generate_document(&profile(), 1);
        let (pred, label) = inject_error(&gold, DiscrepancyKind::Format, 9, &schema()).unwrap();
        assert_eq!(label.mutated, format!("00{}", label.original));
        assert_ne!(pred, gold);
        assert_eq!(
            aggressive_normalize(&label.mutated),
            aggressive_normalize(&label.original)
        );
    }

    #[test]
    fn homoglyph_injection_folds_equal() {
        let (_, gold) = generate_document(&profile(), 2);
        let (_, label) = inject_error(&gold, DiscrepancyKind::Homoglyph, 9, &schema()).unwrap();
        assert_ne!(label.mutated, label.original);
        assert_eq!(confusable_fold(&label.mutated), confusable_fold(&label.original));
    }

    #[test]
    fn misaligned_needs_two_items() {
        let one = CorpusProfile {
            items_per_doc: (1, 1),
            ..profile()
        };
        let (_, gold) = generate_document(&one, 0);
        assert!(matches!(
            inject_error(&gold, DiscrepancyKind::Misaligned, 5, &schema()),
            Err(InjectError::NotInjectable { .. })
        ));
    }

    #[test]
    fn injections_break_perfect_scores() {
        let kinds = [
            DiscrepancyKind::Missing,
            DiscrepancyKind::Spurious,
            DiscrepancyKind::Format,
            DiscrepancyKind::Homoglyph,
            DiscrepancyKind::NearMiss,
            DiscrepancyKind::Swap,
            DiscrepancyKind::Misaligned,
            DiscrepancyKind::Semantic,
        ];
        let mut exercised = 0;
        for index in 0..12 {
            let (_, gold) = generate_document(&profile(), index);
            for kind in kinds {
                let Ok((pred, _)) = inject_error(&gold, kind, index as u64, &schema()) else {
                    continue;
                };
                exercised += 1;
                let report = score_document(&pred, &gold, &schema());
                assert!(report.f1 < 1.0, "{kind} injection must lower F1");
                let unmatched_gold = report.gold_pairs - report.matched;
                let unmatched_pred = report.pred_pairs - report.matched;
                match kind {
                    DiscrepancyKind::Missing => {
                        assert_eq!((unmatched_gold, unmatched_pred), (1, 0));
                    }
                    DiscrepancyKind::Spurious => {
                        assert_eq!((unmatched_gold, unmatched_pred), (0, 1));
                    }
                    _ => {
                        assert_eq!((unmatched_gold, unmatched_pred), (1, 1), "{kind}");
                    }
                }
            }
        }
        assert!(exercised > 50, "templates should usually be injectable");
    }

    #[test]
    fn noise_rates_produce_labelled_predictions() {
        let mut noisy = profile();
        noisy.noise.insert(DiscrepancyKind::Missing, 1.0);
        let (_, gold) = generate_document(&noisy, 0);
        let (pred, labels) = apply_noise(&gold, &noisy, 0, &schema());
        assert_eq!(labels.len(), 1);
        assert_ne!(pred, gold);
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let small = CorpusProfile {
            doc_count: 4,
            ..profile()
        };
        let manifest =
            write_corpus(&small, dir.path(), &["C1".to_string(), "C2".to_string()]).unwrap();
        assert_eq!(manifest.docs.len(), 4);
        assert_eq!(manifest.docs[0].dataset, "C1");
        assert_eq!(manifest.docs[1].dataset, "C2");

        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.docs.len(), 4);
        for doc in &loaded.docs {
            let fixture_text = std::fs::read_to_string(dir.path().join(&doc.fixture)).unwrap();
            DocumentFixture::from_json(&fixture_text).unwrap();
            let gold_text = std::fs::read_to_string(dir.path().join(&doc.gold)).unwrap();
            crate::parse::parse_record(&gold_text, &schema()).unwrap();
        }
    }
}
