//! Attribution: the structured reason pool, embedding-based clustering of
//! cause texts, representative-keyword extraction, and roll-up to
//! top-level failure classes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::Modality;
use crate::triage::reasoner::VerdictCategory;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
}

/// Highest-level failure classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TopLevelClass {
    #[serde(rename = "A")]
    ATextMisinterpretation,
    #[serde(rename = "B")]
    BImageToText,
    #[serde(rename = "C")]
    COcrSchemaAmbiguity,
    #[serde(rename = "OTHER")]
    Other,
}

impl TopLevelClass {
    pub fn label(&self) -> &'static str {
        match self {
            Self::ATextMisinterpretation => "A (text misinterpretation)",
            Self::BImageToText => "B (image-to-text extraction)",
            Self::COcrSchemaAmbiguity => "C (OCR / schema ambiguity)",
            Self::Other => "OTHER",
        }
    }
}

/// Failure source a cluster is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    OcrMisrecognition,
    LayoutMisinterpretation,
    PromptMisalignment,
    ModelCapability,
    SchemaInconsistency,
}

/// One pooled reason: the verdict's category and cause text plus the
/// modality the error came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonEntry {
    pub error_id: String,
    pub category: VerdictCategory,
    pub cause_text: String,
    pub modality: Modality,
}

/// The structured reason pool; insertion order is preserved.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasonPool {
    pub entries: Vec<ReasonEntry>,
}

impl ReasonPool {
    pub fn push(&mut self, entry: ReasonEntry) {
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

pub trait Embedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
    /// Identifier written into report provenance.
    fn id(&self) -> String;
}

const EMBED_DIM: usize = 512;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in bytes {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn trigrams(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let chars: Vec<char> = lowered.chars().collect();
    if chars.len() < 3 {
        return vec![lowered];
    }
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

/// The default deterministic embedding provider: hashed character-trigram
/// term frequencies weighted by smoothed inverse document frequency over
/// the pool the embedder was fitted on, L2-normalized. No model download,
/// bit-identical across runs.
#[derive(Debug, Clone)]
pub struct TrigramEmbedder {
    idf: Vec<f64>,
    fitted_on: usize,
}

impl TrigramEmbedder {
    /// Fits IDF weights over a set of texts (one document per text).
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut doc_frequency = vec![0u32; EMBED_DIM];
        let mut count = 0usize;
        for text in texts {
            count += 1;
            let buckets: BTreeSet<usize> = trigrams(text)
                .iter()
                .map(|g| (fnv1a(g.as_bytes()) % EMBED_DIM as u64) as usize)
                .collect();
            for bucket in buckets {
                doc_frequency[bucket] += 1;
            }
        }
        let idf = doc_frequency
            .iter()
            .map(|df| ((1.0 + count as f64) / (1.0 + f64::from(*df))).ln() + 1.0)
            .collect();
        Self {
            idf,
            fitted_on: count,
        }
    }
}

impl Embedder for TrigramEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut vector = vec![0.0f64; EMBED_DIM];
        for gram in trigrams(text) {
            let bucket = (fnv1a(gram.as_bytes()) % EMBED_DIM as u64) as usize;
            vector[bucket] += self.idf[bucket];
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut vector {
                *v /= norm;
            }
        }
        Ok(vector)
    }

    fn id(&self) -> String {
        format!("trigram-tfidf-d{EMBED_DIM}-n{}", self.fitted_on)
    }
}

/// Embeds one text with the given provider; unit-norm output.
pub fn embed(text: &str, provider: &dyn Embedder) -> Result<Vec<f64>, EmbedError> {
    provider.embed(text)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

/// One cluster over pool entries. Members are kept sorted by error id; the
/// centroid is the L2-normalized mean of member vectors.
#[derive(Debug, Clone)]
pub struct Cluster {
    /// Indexes into the pool's entry list, sorted by member error id.
    pub member_indexes: Vec<usize>,
    pub member_error_ids: Vec<String>,
    pub centroid: Vec<f64>,
}

/// Comparisons allow a tiny slack so that exact duplicates (cosine 1.0 up
/// to float noise) still merge at tau = 1.0.
const SIM_EPSILON: f64 = 1e-9;

fn centroid_of(vectors: &[&Vec<f64>]) -> Vec<f64> {
    let mut centroid = vec![0.0f64; vectors[0].len()];
    for vector in vectors {
        for (c, v) in centroid.iter_mut().zip(vector.iter()) {
            *c += v;
        }
    }
    let norm = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for c in &mut centroid {
            *c /= norm;
        }
    }
    centroid
}

/// Average-linkage agglomerative clustering of the pool's cause texts
/// with the default embedding provider. See [`cluster_pool_with`].
pub fn cluster_pool(pool: &ReasonPool, tau: f64) -> Vec<Cluster> {
    let embedder = TrigramEmbedder::fit(pool.entries.iter().map(|e| e.cause_text.as_str()));
    cluster_pool_with(pool, &embedder, tau)
}

/// Average-linkage agglomerative merging: repeatedly merge the cluster
/// pair with the highest average pairwise cosine, while that average is at
/// least `tau` and every member of the merged cluster stays within `tau`
/// of the merged centroid. Output order is canonical (size descending,
/// then smallest member error id), so results are permutation-invariant.
///
/// Entry-pair similarities are computed once; cluster-pair linkage sums
/// are then maintained additively across merges.
pub fn cluster_pool_with(pool: &ReasonPool, embedder: &dyn Embedder, tau: f64) -> Vec<Cluster> {
    let vectors: Vec<Vec<f64>> = pool
        .entries
        .iter()
        .map(|entry| {
            let text = if entry.cause_text.trim().is_empty() {
                // Degenerate cause texts embed as their category label.
                entry.category.label().to_string()
            } else {
                entry.cause_text.clone()
            };
            embedder.embed(&text).expect("non-empty text embeds")
        })
        .collect();
    let n = pool.entries.len();

    // Canonical processing order, so results are permutation-invariant.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pool.entries[a].error_id.cmp(&pool.entries[b].error_id));

    let entry_sim: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| order.iter().map(|&j| cosine(&vectors[i], &vectors[j])).collect())
        .collect();

    // Cluster state: member lists (of canonical positions) plus the matrix
    // of pairwise-similarity sums between clusters.
    let mut members: Vec<Vec<usize>> = (0..n).map(|p| vec![p]).collect();
    let mut sums: Vec<Vec<f64>> = entry_sim.clone();

    loop {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for a in 0..members.len() {
            for b in a + 1..members.len() {
                let linkage = sums[a][b] / (members[a].len() * members[b].len()) as f64;
                if linkage >= tau - SIM_EPSILON {
                    candidates.push((linkage, a, b));
                }
            }
        }
        // Best average first; ties break on the smallest involved error ids.
        // Member lists hold canonical positions, so position order is id order.
        candidates.sort_by(|x, y| {
            y.0.total_cmp(&x.0).then_with(|| {
                let key = |c: &(f64, usize, usize)| {
                    let a = members[c.1][0];
                    let b = members[c.2][0];
                    (a.min(b), a.max(b))
                };
                key(x).cmp(&key(y))
            })
        });

        let mut merged = false;
        for (_, a, b) in candidates {
            let mut union: Vec<usize> = members[a].iter().chain(members[b].iter()).copied().collect();
            union.sort_unstable();
            let member_vectors: Vec<&Vec<f64>> =
                union.iter().map(|&p| &vectors[order[p]]).collect();
            let centroid = centroid_of(&member_vectors);
            let coherent = member_vectors
                .iter()
                .all(|v| cosine(v, &centroid) >= tau - SIM_EPSILON);
            if coherent {
                let (keep, drop) = (a.min(b), a.max(b));
                // Average-linkage sums merge additively.
                #[allow(clippy::needless_range_loop)]
                for c in 0..members.len() {
                    if c != keep && c != drop {
                        let combined = sums[keep][c] + sums[drop][c];
                        sums[keep][c] = combined;
                        sums[c][keep] = combined;
                    }
                }
                sums.remove(drop);
                for row in &mut sums {
                    row.remove(drop);
                }
                members[keep] = union;
                members.remove(drop);
                merged = true;
                break;
            }
        }
        if !merged {
            break;
        }
    }

    let clusters: Vec<Vec<usize>> = members
        .into_iter()
        .map(|positions| positions.into_iter().map(|p| order[p]).collect())
        .collect();

    let mut built: Vec<Cluster> = clusters
        .into_iter()
        .map(|member_indexes| {
            let member_vectors: Vec<&Vec<f64>> =
                member_indexes.iter().map(|&i| &vectors[i]).collect();
            Cluster {
                centroid: centroid_of(&member_vectors),
                member_error_ids: member_indexes
                    .iter()
                    .map(|&i| pool.entries[i].error_id.clone())
                    .collect(),
                member_indexes,
            }
        })
        .collect();
    built.sort_by(|a, b| {
        b.member_indexes
            .len()
            .cmp(&a.member_indexes.len())
            .then_with(|| a.member_error_ids[0].cmp(&b.member_error_ids[0]))
    });
    built
}

// ---------------------------------------------------------------------------
// Keywords
// ---------------------------------------------------------------------------

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "as", "at", "be", "by", "because", "can", "could", "due", "for", "from",
    "in", "into", "is", "it", "its", "may", "of", "on", "or", "than", "that", "the", "this",
    "to", "was", "were", "which", "with",
];

fn tokens_of(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| t.len() >= 2 && !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Top-k representative keywords of a cluster: term frequency within the
/// cluster times `ln(1 + clusters / clusters-containing-term)`, ties
/// broken lexicographically. Tokens shared by every cluster rank below
/// cluster-specific terms.
pub fn extract_keywords(
    cluster: &Cluster,
    all_clusters: &[Cluster],
    pool: &ReasonPool,
    k: usize,
) -> Vec<String> {
    let cluster_tokens = |c: &Cluster| -> Vec<String> {
        c.member_indexes
            .iter()
            .flat_map(|&i| tokens_of(&pool.entries[i].cause_text))
            .collect()
    };

    let mut cluster_df: BTreeMap<String, usize> = BTreeMap::new();
    for c in all_clusters {
        let unique: BTreeSet<String> = cluster_tokens(c).into_iter().collect();
        for token in unique {
            *cluster_df.entry(token).or_insert(0) += 1;
        }
    }

    let mut tf: BTreeMap<String, usize> = BTreeMap::new();
    for token in cluster_tokens(cluster) {
        *tf.entry(token).or_insert(0) += 1;
    }
    let n_clusters = all_clusters.len().max(1) as f64;
    let mut scored: Vec<(f64, String)> = tf
        .into_iter()
        .map(|(token, freq)| {
            let df = *cluster_df.get(&token).unwrap_or(&1) as f64;
            let score = freq as f64 * (1.0 + n_clusters / df).ln();
            (score, token)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, token)| token).collect()
}

// ---------------------------------------------------------------------------
// Attribution
// ---------------------------------------------------------------------------

/// Mapping from mid-level category ids to top-level class and failure
/// source. Ships as data and is editable without code changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryMapEntry {
    pub top_level: TopLevelClass,
    pub source_tag: SourceTag,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryMap {
    pub entries: BTreeMap<String, CategoryMapEntry>,
}

impl CategoryMap {
    pub fn builtin() -> Self {
        serde_json::from_str(include_str!("../../assets/category_map.json"))
            .expect("built-in category map parses")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn class_of(&self, category: &VerdictCategory) -> Option<(TopLevelClass, SourceTag)> {
        match category {
            VerdictCategory::Known(id) => self
                .entries
                .get(id)
                .map(|e| (e.top_level, e.source_tag)),
            VerdictCategory::New(_) => None,
        }
    }
}

/// Per-modality counts by top-level class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub other: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.a + self.b + self.c + self.other
    }

    pub fn get(&self, class: TopLevelClass) -> usize {
        match class {
            TopLevelClass::ATextMisinterpretation => self.a,
            TopLevelClass::BImageToText => self.b,
            TopLevelClass::COcrSchemaAmbiguity => self.c,
            TopLevelClass::Other => self.other,
        }
    }

    fn bump(&mut self, class: TopLevelClass) {
        match class {
            TopLevelClass::ATextMisinterpretation => self.a += 1,
            TopLevelClass::BImageToText => self.b += 1,
            TopLevelClass::COcrSchemaAmbiguity => self.c += 1,
            TopLevelClass::Other => self.other += 1,
        }
    }
}

/// One cluster in the report: members, keywords, and its majority class
/// and source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub size: usize,
    pub member_error_ids: Vec<String>,
    pub keywords: Vec<String>,
    pub top_level: TopLevelClass,
    pub source_tag: Option<SourceTag>,
}

/// The attribution report: per-modality class counts (each error counted
/// under its own category's class, so counts always sum to the per-modality
/// totals), cluster summaries, and provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionReport {
    pub per_modality: BTreeMap<Modality, ClassCounts>,
    pub clusters: Vec<ClusterSummary>,
    pub total_errors: usize,
    pub warnings: Vec<String>,
    pub tau: f64,
    pub embedder_id: String,
}

const KEYWORDS_PER_CLUSTER: usize = 5;

/// Rolls clusters and pooled reasons up into the attribution report.
/// Categories missing from the mapping route to OTHER with a warning.
pub fn attribute(
    clusters: &[Cluster],
    pool: &ReasonPool,
    mapping: &CategoryMap,
    tau: f64,
    embedder_id: &str,
) -> AttributionReport {
    let mut per_modality: BTreeMap<Modality, ClassCounts> = BTreeMap::new();
    let mut warnings: BTreeSet<String> = BTreeSet::new();

    for entry in &pool.entries {
        let class = match mapping.class_of(&entry.category) {
            Some((class, _)) => class,
            None => {
                warnings.insert(format!(
                    "category {:?} is not in the class mapping; counted as OTHER",
                    entry.category.label()
                ));
                TopLevelClass::Other
            }
        };
        per_modality.entry(entry.modality).or_default().bump(class);
    }

    let summaries = clusters
        .iter()
        .map(|cluster| {
            let mut class_votes: BTreeMap<TopLevelClass, usize> = BTreeMap::new();
            let mut source_votes: BTreeMap<SourceTag, usize> = BTreeMap::new();
            for &index in &cluster.member_indexes {
                match mapping.class_of(&pool.entries[index].category) {
                    Some((class, source)) => {
                        *class_votes.entry(class).or_insert(0) += 1;
                        *source_votes.entry(source).or_insert(0) += 1;
                    }
                    None => {
                        *class_votes.entry(TopLevelClass::Other).or_insert(0) += 1;
                    }
                }
            }
            // Majority class; ties resolve in A, B, C, OTHER order.
            let top_level = class_votes
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(class, _)| *class)
                .unwrap_or(TopLevelClass::Other);
            let source_tag = source_votes
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(source, _)| *source);
            ClusterSummary {
                size: cluster.member_indexes.len(),
                member_error_ids: cluster.member_error_ids.clone(),
                keywords: extract_keywords(cluster, clusters, pool, KEYWORDS_PER_CLUSTER),
                top_level,
                source_tag,
            }
        })
        .collect();

    AttributionReport {
        per_modality,
        clusters: summaries,
        total_errors: pool.len(),
        warnings: warnings.into_iter().collect(),
        tau,
        embedder_id: embedder_id.to_string(),
    }
}
