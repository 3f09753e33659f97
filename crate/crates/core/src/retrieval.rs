//! Demonstration retrieval: SimSQL over the out-of-domain pool, CovSQL over
//! the synthetic in-domain pool, and the Random and SimNLQ baselines.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bm25::{Bm25Index, Bm25Params};
use crate::corpus::{Catalog, Example, Pool};
use crate::sql::{token_bag_with, SchemaVocab, TokenBag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySource {
    /// Zero-shot predicted SQL on both sides.
    #[default]
    Predicted,
    /// Gold SQL on both sides.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Number of out-of-domain databases.
    pub m: usize,
    /// Demonstrations per out-of-domain database.
    pub k_ood: usize,
    /// Synthetic in-domain demonstrations.
    pub k_id: usize,
    pub similarity_source: SimilaritySource,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            m: 4,
            k_ood: 5,
            k_id: 5,
            similarity_source: SimilaritySource::Predicted,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k_ood == 0 {
            return Err("retrieval.k_ood must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pick {
    /// Index into the pool.
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedDb {
    pub db_id: String,
    pub picks: Vec<Pick>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OodSelection {
    /// In completion order: the first database reached `k` examples first.
    pub databases: Vec<SelectedDb>,
    /// True when fewer than `m` databases completed and partial ones were
    /// appended.
    pub padded: bool,
}

/// Indices sorted by descending score; equal scores keep pool order.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // adding 0.0 maps -0.0 to 0.0 so both zeros tie
    order.sort_by(|&a, &b| (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)).then(a.cmp(&b)));
    order
}

/// Scans `order` and emits each database as soon as it holds `k` examples,
/// stopping at `m` databases. Entries whose database is `exclude_db` are
/// skipped. When the scan runs out first, the incomplete databases with the
/// most examples are appended (ties by first appearance) and `padded` is set.
pub fn scan_databases(
    order: &[usize],
    db_ids: &[&str],
    scores: &[f64],
    m: usize,
    k: usize,
    exclude_db: Option<&str>,
) -> OodSelection {
    let mut selection = OodSelection::default();
    if m == 0 || k == 0 {
        return selection;
    }
    let mut slots: Vec<SelectedDb> = Vec::new();
    let mut slot_of: HashMap<&str, usize> = HashMap::new();
    let mut emitted: Vec<usize> = Vec::new();
    for &i in order {
        let db = db_ids[i];
        if Some(db) == exclude_db {
            continue;
        }
        let slot = *slot_of.entry(db).or_insert_with(|| {
            slots.push(SelectedDb {
                db_id: db.to_string(),
                picks: Vec::new(),
            });
            slots.len() - 1
        });
        if slots[slot].picks.len() < k {
            slots[slot].picks.push(Pick {
                index: i,
                score: scores[i],
            });
            if slots[slot].picks.len() == k {
                emitted.push(slot);
            }
            if emitted.len() == m {
                break;
            }
        }
    }
    if emitted.len() < m {
        let mut partial: Vec<usize> = (0..slots.len())
            .filter(|s| slots[*s].picks.len() < k)
            .collect();
        partial.sort_by(|&a, &b| slots[b].picks.len().cmp(&slots[a].picks.len()).then(a.cmp(&b)));
        let missing = m - emitted.len();
        if !partial.is_empty() {
            log::warn!(
                "only {} of {m} databases reached {k} examples; padding with {} partial database(s)",
                emitted.len(),
                missing.min(partial.len())
            );
            selection.padded = true;
        }
        emitted.extend(partial.into_iter().take(missing));
    }
    let mut slots: Vec<Option<SelectedDb>> = slots.into_iter().map(Some).collect();
    selection.databases = emitted
        .into_iter()
        .map(|s| slots[s].take().expect("each slot emitted once"))
        .collect();
    selection
}

/// BM25 index over the out-of-domain pool, built once and queried per test
/// question.
pub struct SimSqlIndex {
    index: Bm25Index,
    db_ids: Vec<String>,
}

impl SimSqlIndex {
    pub fn new(bags: Vec<TokenBag>, db_ids: Vec<String>, params: Bm25Params) -> Self {
        assert_eq!(bags.len(), db_ids.len(), "one database id per document");
        SimSqlIndex {
            index: Bm25Index::build(bags, params),
            db_ids,
        }
    }

    /// Bags each example's similarity-source SQL against its own schema.
    pub fn build(
        pool: &Pool,
        catalog: &Catalog,
        source: SimilaritySource,
        params: Bm25Params,
    ) -> Self {
        let bags = example_bags(&pool.examples, catalog, source);
        let db_ids = pool.examples.iter().map(|e| e.db_id.clone()).collect();
        Self::new(bags, db_ids, params)
    }

    pub fn index(&self) -> &Bm25Index {
        &self.index
    }

    pub fn scores(&self, query: &TokenBag) -> Vec<f64> {
        self.index.scores(query)
    }

    pub fn retrieve(
        &self,
        query: &TokenBag,
        exclude_db: Option<&str>,
        m: usize,
        k: usize,
    ) -> OodSelection {
        let scores = self.scores(query);
        let ids: Vec<&str> = self.db_ids.iter().map(String::as_str).collect();
        scan_databases(&rank_desc(&scores), &ids, &scores, m, k, exclude_db)
    }

    /// The same scan over a seeded random permutation of the pool.
    pub fn retrieve_random(
        &self,
        seed: u64,
        exclude_db: Option<&str>,
        m: usize,
        k: usize,
    ) -> OodSelection {
        let order = random_permutation(self.db_ids.len(), seed);
        let zeros = vec![0.0; self.db_ids.len()];
        let ids: Vec<&str> = self.db_ids.iter().map(String::as_str).collect();
        scan_databases(&order, &ids, &zeros, m, k, exclude_db)
    }

    /// The same scan ordered by descending `scores` from another similarity.
    pub fn retrieve_by_scores(
        &self,
        scores: &[f64],
        exclude_db: Option<&str>,
        m: usize,
        k: usize,
    ) -> OodSelection {
        let ids: Vec<&str> = self.db_ids.iter().map(String::as_str).collect();
        scan_databases(&rank_desc(scores), &ids, scores, m, k, exclude_db)
    }
}

/// Greedy coverage of the query's tokens. The BM25 statistics stay those of
/// the full pool while examples are consumed.
pub struct CovSqlIndex {
    index: Bm25Index,
}

impl CovSqlIndex {
    pub fn new(bags: Vec<TokenBag>, params: Bm25Params) -> Self {
        CovSqlIndex {
            index: Bm25Index::build(bags, params),
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn retrieve(&self, query: &TokenBag, k: usize) -> Vec<Pick> {
        let mut out: Vec<Pick> = Vec::new();
        if k == 0 {
            return out;
        }
        if self.index.is_empty() {
            log::warn!("empty synthetic pool; no in-domain demonstrations");
            return out;
        }
        let initial: BTreeSet<&str> = query.keys().collect();
        let mut remaining: Vec<usize> = (0..self.index.len()).collect();
        loop {
            let before = out.len();
            let mut uncovered = initial.clone();
            while !uncovered.is_empty() && out.len() < k {
                let mut best: Option<(usize, f64)> = None;
                for (pos, &doc) in remaining.iter().enumerate() {
                    let s = self
                        .index
                        .score_terms(uncovered.iter().copied(), doc)
                        .expect("doc in range");
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((pos, s));
                    }
                }
                let Some((pos, score)) = best.filter(|&(_, s)| s > 0.0) else {
                    break;
                };
                let doc = remaining.remove(pos);
                let bag = self.index.doc_bag(doc).expect("doc in range");
                for key in bag.keys() {
                    uncovered.remove(key);
                }
                out.push(Pick { index: doc, score });
            }
            if out.len() >= k || remaining.is_empty() || out.len() == before {
                break;
            }
        }
        out
    }
}

pub fn example_bags(examples: &[Example], catalog: &Catalog, source: SimilaritySource) -> Vec<TokenBag> {
    let mut vocabs: HashMap<&str, SchemaVocab> = HashMap::new();
    let mut failures = 0usize;
    let bags = examples
        .iter()
        .map(|e| {
            let vocab = vocabs.entry(e.db_id.as_str()).or_insert_with(|| {
                catalog.get(&e.db_id).map(SchemaVocab::new).unwrap_or_default()
            });
            let sql = match source {
                SimilaritySource::Predicted => e.pred_sql.as_deref().or(e.gold_sql.as_deref()),
                SimilaritySource::Oracle => e.gold_sql.as_deref(),
            };
            match sql.map(|s| token_bag_with(s, vocab)) {
                Some(Ok(bag)) => bag,
                _ => {
                    failures += 1;
                    TokenBag::default()
                }
            }
        })
        .collect();
    if failures > 0 {
        log::warn!("{failures} pool example(s) had no usable SQL and will never be retrieved");
    }
    bags
}

pub fn random_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// `k` indices drawn uniformly without replacement; all of them when
/// `k >= n`.
pub fn random_select(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order = random_permutation(n, seed);
    order.truncate(k);
    order
}

#[derive(Debug, thiserror::Error)]
#[error("embedding failed: {0}")]
pub struct EmbedError(pub String);

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError>;
}

/// Feature-hashing bag-of-words embedder; a deterministic stand-in for a
/// sentence encoder.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: 256 }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let dim = self.dim.max(1);
        let mut v = vec![0f32; dim];
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let digest = Sha256::digest(word.to_lowercase().as_bytes());
            let h = u64::from_le_bytes(digest[..8].try_into().unwrap());
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[(h % dim as u64) as usize] += sign;
        }
        Ok(v)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine similarity of the test question to every text, in order.
pub fn nlq_similarities(
    test_nlq: &str,
    texts: &[&str],
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<f64>, EmbedError> {
    let q = embedder.embed(test_nlq)?;
    texts
        .iter()
        .map(|t| embedder.embed(t).map(|e| cosine(&q, &e)))
        .collect()
}

/// Top-`k` texts by cosine similarity, ties in pool order.
pub fn sim_nlq(
    test_nlq: &str,
    texts: &[&str],
    k: usize,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<Pick>, EmbedError> {
    let scores = nlq_similarities(test_nlq, texts, embedder)?;
    Ok(rank_desc(&scores)
        .into_iter()
        .take(k)
        .map(|i| Pick {
            index: i,
            score: scores[i],
        })
        .collect())
}
