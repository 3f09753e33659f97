//! Okapi BM25 over [`TokenBag`] documents.
//!
//! ```text
//! IDF(t)      = ln((N - df(t) + 0.5) / (df(t) + 0.5) + 1)
//! score(q, d) = Σ_{t ∈ set(q)} IDF(t) · tf(t,d)·(k1+1) / (tf(t,d) + k1·(1 - b + b·|d|/avgdl))
//! ```
//!
//! The `+ 1` inside the logarithm keeps every IDF non-negative, so scores are
//! never negative. Query terms are treated as a set.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::sql::TokenBag;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum Bm25Error {
    #[error("document {doc_id} out of range (index holds {len} documents)")]
    DocOutOfRange { doc_id: usize, len: usize },
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    doc_bags: Vec<TokenBag>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    doc_freq: HashMap<String, u32>,
}

impl Bm25Index {
    pub fn build(bags: Vec<TokenBag>, params: Bm25Params) -> Self {
        let doc_lengths: Vec<u32> = bags.iter().map(TokenBag::total).collect();
        let avg_doc_length = if bags.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / bags.len() as f64
        };
        let mut doc_freq: HashMap<String, u32> = HashMap::new();
        for bag in &bags {
            for key in bag.keys() {
                *doc_freq.entry(key.to_string()).or_insert(0) += 1;
            }
        }
        Bm25Index {
            params,
            doc_bags: bags,
            doc_lengths,
            avg_doc_length,
            doc_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_bags.is_empty()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, doc_id: usize) -> Option<u32> {
        self.doc_lengths.get(doc_id).copied()
    }

    pub fn doc_bag(&self, doc_id: usize) -> Option<&TokenBag> {
        self.doc_bags.get(doc_id)
    }

    pub fn doc_freq(&self, term: &str) -> u32 {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_bags.len() as f64;
        let df = f64::from(self.doc_freq(term));
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    pub fn score(&self, query: &TokenBag, doc_id: usize) -> Result<f64, Bm25Error> {
        self.score_terms(query.keys(), doc_id)
    }

    /// Scores a set of query terms; repeated terms count once.
    pub fn score_terms<'a, I>(&self, terms: I, doc_id: usize) -> Result<f64, Bm25Error>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let bag = self.doc_bags.get(doc_id).ok_or(Bm25Error::DocOutOfRange {
            doc_id,
            len: self.doc_bags.len(),
        })?;
        let len = f64::from(self.doc_lengths[doc_id]);
        if len == 0.0 || self.avg_doc_length == 0.0 {
            return Ok(0.0);
        }
        let Bm25Params { k1, b } = self.params;
        let norm = k1 * (1.0 - b + b * len / self.avg_doc_length);
        let unique: BTreeSet<&str> = terms.into_iter().collect();
        Ok(unique
            .into_iter()
            .map(|term| {
                let tf = f64::from(bag.count(term));
                if tf == 0.0 {
                    0.0
                } else {
                    self.idf(term) * tf * (k1 + 1.0) / (tf + norm)
                }
            })
            .fold(0.0, |acc, x| acc + x))
    }

    /// Scores against every document, in index order.
    pub fn scores(&self, query: &TokenBag) -> Vec<f64> {
        (0..self.len())
            .map(|d| self.score(query, d).expect("doc id in range"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(tokens: &[&str]) -> TokenBag {
        TokenBag::from_counts(tokens.iter().map(|t| (*t, 1)))
    }

    #[test]
    fn statistics_of_three_doc_corpus() {
        let index = Bm25Index::build(
            vec![bag(&["a"]), bag(&["a", "b"]), bag(&["b"])],
            Bm25Params::default(),
        );
        assert_eq!(index.doc_freq("a"), 2);
        assert_eq!(index.doc_freq("b"), 2);
        assert!((index.avg_doc_length() - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_scores_positive_zero() {
        let index = Bm25Index::build(vec![bag(&["a"]), bag(&[])], Bm25Params::default());
        for d in 0..2 {
            let s = index.score(&bag(&["z"]), d).unwrap();
            assert!(s == 0.0 && s.is_sign_positive());
        }
    }

    #[test]
    fn single_term_score_matches_hand_computation() {
        let index = Bm25Index::build(
            vec![bag(&["a"]), bag(&["a", "b"]), bag(&["b"])],
            Bm25Params::default(),
        );
        // ln(1.6) * 2.2 / (1 + 1.2 * (0.25 + 0.75 * 0.75)) = ln(1.6) * 2.2 / 1.975
        let score = index.score(&bag(&["a"]), 0).unwrap();
        assert!((score - 1.6f64.ln() * 2.2 / 1.975).abs() < 1e-12, "{score}");
    }

    #[test]
    fn no_overlap_scores_zero() {
        let index = Bm25Index::build(vec![bag(&["a"]), bag(&["b"])], Bm25Params::default());
        assert_eq!(index.score(&bag(&["z"]), 0).unwrap(), 0.0);
    }

    #[test]
    fn self_match_in_single_doc_corpus_is_positive() {
        let index = Bm25Index::build(vec![bag(&["select", "from"])], Bm25Params::default());
        assert!(index.score(&bag(&["select", "from"]), 0).unwrap() > 0.0);
    }

    #[test]
    fn empty_corpus_and_empty_doc() {
        let index = Bm25Index::build(vec![], Bm25Params::default());
        assert!(index.is_empty());
        assert_eq!(
            index.score(&bag(&["a"]), 0),
            Err(Bm25Error::DocOutOfRange { doc_id: 0, len: 0 })
        );
        let index = Bm25Index::build(vec![TokenBag::default()], Bm25Params::default());
        assert_eq!(index.doc_length(0), Some(0));
        assert_eq!(index.avg_doc_length(), 0.0);
        assert_eq!(index.score(&bag(&["a"]), 0).unwrap(), 0.0);
    }

    #[test]
    fn query_multiplicity_is_ignored() {
        let index = Bm25Index::build(vec![bag(&["a", "b"]), bag(&["a"])], Bm25Params::default());
        let once = index.score(&bag(&["a"]), 0).unwrap();
        let twice = index
            .score(&TokenBag::from_counts([("a", 3)]), 0)
            .unwrap();
        assert_eq!(once, twice);
    }
}
