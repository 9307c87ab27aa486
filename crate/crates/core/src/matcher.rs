//! Canonicalization engine: four-tier matching cascade, similarity
//! scoring, a TF-IDF cosine reference oracle, and confidence-tier routing.
//!
//! The weighted score is s = 0.6·sm + 0.4·jac, where sm is the
//! Ratcliff/Obershelp sequence ratio and jac is the Jaccard token overlap.
//! Tier thresholds default to 0.83 (autonomous) and 0.50 (human review).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backlog::{BacklogItem, BacklogStore};

/// Weighted similarity between two normalized texts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    /// Combined score, exactly 0.6·sm + 0.4·jac.
    pub s: f64,
    /// Ratcliff/Obershelp sequence ratio.
    pub sm: f64,
    /// Jaccard overlap of the token sets.
    pub jac: f64,
    /// Set when both inputs were empty. Empty items never auto-merge, so
    /// the score is pinned to 0 rather than the degenerate 1.
    pub empty_comparison: bool,
}

/// Routing decision for a scored match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConfidenceTier {
    HaltReingest,
    HumanReview,
    Autonomous,
}

/// Which cascade tier produced the result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TierUsed {
    ExactTag,
    KeyMatch,
    WeightedSimilarity,
    FuzzyLevenshtein,
    NoMatch,
}

/// Outcome of one cascade run for one incoming item.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub matched_item: Option<BacklogItem>,
    pub tier_used: TierUsed,
    /// Present for tiers 3 and 4 only.
    pub score: Option<SimilarityScore>,
    pub confidence_tier: ConfidenceTier,
}

impl MatchResult {
    /// Confidence recorded on the item and in queue records. Tiers 1 and 2
    /// are exact, so s is treated as 1.0.
    pub fn confidence_value(&self) -> f64 {
        match self.tier_used {
            TierUsed::ExactTag | TierUsed::KeyMatch => 1.0,
            _ => self.score.map(|sc| sc.s).unwrap_or(0.0),
        }
    }
}

/// Tier thresholds. Configuration, not constants baked into call sites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub autonomy: f64,
    pub review: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            autonomy: 0.83,
            review: 0.50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatcherError {
    #[error("score {0} outside [0,1]")]
    DomainError(f64),
    #[error("corpus index {index} out of range for {len} documents")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// Lowercase and collapse whitespace so scoring sees one canonical form.
pub fn normalize(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokens(text: &str) -> BTreeSet<&str> {
    text.split_whitespace().collect()
}

/// Ratcliff/Obershelp ratio: 2·M / (|a| + |b|), where M is the total
/// length of matched blocks found by recursively taking the longest
/// common block (earliest in a, then earliest in b, on ties) and
/// re-applying to the regions on either side. This is the SequenceMatcher
/// ratio algorithm with no junk heuristic, over characters.
pub fn ratcliff_obershelp(a: &str, b: &str) -> f64 {
    let ac: Vec<char> = a.chars().collect();
    let bc: Vec<char> = b.chars().collect();
    let total = ac.len() + bc.len();
    if total == 0 {
        return 1.0;
    }
    let matched = matched_total(&ac, &bc, 0, ac.len(), 0, bc.len());
    2.0 * matched as f64 / total as f64
}

fn matched_total(a: &[char], b: &[char], alo: usize, ahi: usize, blo: usize, bhi: usize) -> usize {
    let (i, j, k) = longest_match(a, b, alo, ahi, blo, bhi);
    if k == 0 {
        return 0;
    }
    k + matched_total(a, b, alo, i, blo, j)
        + matched_total(a, b, i + k, ahi, j + k, bhi)
}

/// Longest common block within the windows, preferring the block that
/// starts earliest in a, then earliest in b. Dynamic programming over
/// positions of each character in b, one row at a time.
fn longest_match(
    a: &[char],
    b: &[char],
    alo: usize,
    ahi: usize,
    blo: usize,
    bhi: usize,
) -> (usize, usize, usize) {
    let mut b_positions: BTreeMap<char, Vec<usize>> = BTreeMap::new();
    for (j, &ch) in b.iter().enumerate().take(bhi).skip(blo) {
        b_positions.entry(ch).or_default().push(j);
    }
    let (mut best_i, mut best_j, mut best_len) = (alo, blo, 0usize);
    let mut run_ending_at: BTreeMap<usize, usize> = BTreeMap::new();
    for i in alo..ahi {
        let mut next_runs: BTreeMap<usize, usize> = BTreeMap::new();
        if let Some(js) = b_positions.get(&a[i]) {
            for &j in js {
                let len = if j == blo {
                    1
                } else {
                    run_ending_at.get(&(j - 1)).copied().unwrap_or(0) + 1
                };
                next_runs.insert(j, len);
                if len > best_len {
                    best_i = i + 1 - len;
                    best_j = j + 1 - len;
                    best_len = len;
                }
            }
        }
        run_ending_at = next_runs;
    }
    (best_i, best_j, best_len)
}

/// Jaccard overlap of whitespace token sets.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let ta = tokens(a);
    let tb = tokens(b);
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    let inter = ta.intersection(&tb).count() as f64;
    let union = ta.union(&tb).count() as f64;
    inter / union
}

/// Weighted similarity score. Both-empty input is flagged and pinned to 0.
///
/// The sequence ratio is computed over a lexicographically canonical
/// argument order: the greedy block recursion is order-sensitive for some
/// pairs, and the combined score must be symmetric.
pub fn similarity(a: &str, b: &str) -> SimilarityScore {
    if a.is_empty() && b.is_empty() {
        return SimilarityScore {
            s: 0.0,
            sm: 0.0,
            jac: 0.0,
            empty_comparison: true,
        };
    }
    let (x, y) = if a <= b { (a, b) } else { (b, a) };
    let sm = ratcliff_obershelp(x, y);
    let jac = jaccard(a, b);
    SimilarityScore {
        s: 0.6 * sm + 0.4 * jac,
        sm,
        jac,
        empty_comparison: false,
    }
}

/// Classic edit distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let ac: Vec<char> = a.chars().collect();
    let bc: Vec<char> = b.chars().collect();
    if ac.is_empty() {
        return bc.len();
    }
    if bc.is_empty() {
        return ac.len();
    }
    let mut prev: Vec<usize> = (0..=bc.len()).collect();
    let mut curr = vec![0usize; bc.len() + 1];
    for (i, ca) in ac.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in bc.iter().enumerate() {
            let cost = usize::from(ca != cb);
            curr[j + 1] = (prev[j + 1] + 1).min(curr[j] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[bc.len()]
}

/// 1 − distance / max-length, the fuzzy-tier acceptance metric.
pub fn levenshtein_similarity(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / max_len as f64
}

/// TF-IDF vector for one document. tf is the raw term count; idf is
/// ln(N / df) over the corpus the vector was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentVector {
    pub doc_id: String,
    pub weights: BTreeMap<String, f64>,
}

impl DocumentVector {
    pub fn norm(&self) -> f64 {
        self.weights.values().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &DocumentVector) -> f64 {
        self.weights
            .iter()
            .filter_map(|(t, w)| other.weights.get(t).map(|v| w * v))
            .sum()
    }
}

/// Cosine value plus the degenerate-input flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineResult {
    pub value: f64,
    /// True when either document reduced to the zero vector (all its terms
    /// appear in every corpus document, so idf = 0 throughout).
    pub zero_vector: bool,
}

/// Build TF-IDF vectors for an entire corpus of normalized texts.
pub fn tfidf_vectors(corpus: &[String]) -> Vec<DocumentVector> {
    let n = corpus.len() as f64;
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in corpus {
        for t in tokens(doc) {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    corpus
        .iter()
        .enumerate()
        .map(|(idx, doc)| {
            let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
            for t in doc.split_whitespace() {
                *tf.entry(t).or_insert(0) += 1;
            }
            let weights = tf
                .into_iter()
                .map(|(t, count)| {
                    let idf = (n / df[t] as f64).ln();
                    (t.to_string(), count as f64 * idf)
                })
                .collect();
            DocumentVector {
                doc_id: idx.to_string(),
                weights,
            }
        })
        .collect()
}

/// Cosine of the TF-IDF vectors of documents i and j. A zero vector makes
/// the cosine undefined; it is pinned to 0 and flagged.
pub fn tfidf_cosine(corpus: &[String], i: usize, j: usize) -> Result<CosineResult, MatcherError> {
    if corpus.is_empty() {
        return Err(MatcherError::EmptyCorpus);
    }
    for idx in [i, j] {
        if idx >= corpus.len() {
            return Err(MatcherError::IndexOutOfRange {
                index: idx,
                len: corpus.len(),
            });
        }
    }
    let vectors = tfidf_vectors(corpus);
    let (u, v) = (&vectors[i], &vectors[j]);
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Ok(CosineResult {
            value: 0.0,
            zero_vector: true,
        });
    }
    Ok(CosineResult {
        value: u.dot(v) / (nu * nv),
        zero_vector: false,
    })
}

/// Map a score to its confidence tier under the given thresholds.
pub fn tier_with(s: f64, thresholds: Thresholds) -> Result<ConfidenceTier, MatcherError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(MatcherError::DomainError(s));
    }
    Ok(if s >= thresholds.autonomy {
        ConfidenceTier::Autonomous
    } else if s >= thresholds.review {
        ConfidenceTier::HumanReview
    } else {
        ConfidenceTier::HaltReingest
    })
}

/// Tier under the default thresholds (0.83, 0.50).
pub fn tier(s: f64) -> Result<ConfidenceTier, MatcherError> {
    tier_with(s, Thresholds::default())
}

/// Run the four-tier cascade for one incoming item against the backlog.
///
/// Tiers are attempted strictly in order; the first tier producing an
/// acceptable candidate wins. Ties within a tier break to the lowest
/// candidate id. An item matching nothing routes to intake as new.
pub fn match_item(
    item: &BacklogItem,
    backlog: &BacklogStore,
    thresholds: Thresholds,
) -> MatchResult {
    let candidates: Vec<&BacklogItem> = backlog
        .items()
        .iter()
        .filter(|row| row.id != item.id)
        .collect();

    // Tier 1: exact tag overlap.
    if let Some(winner) = candidates
        .iter()
        .filter(|row| row.tags.intersection(&item.tags).next().is_some())
        .min_by(|a, b| a.id.cmp(&b.id))
    {
        return MatchResult {
            matched_item: Some((*winner).clone()),
            tier_used: TierUsed::ExactTag,
            score: None,
            confidence_tier: ConfidenceTier::Autonomous,
        };
    }

    // Tier 2: tracker key equality.
    if let Some(key) = &item.tracker_key {
        if let Some(winner) = candidates
            .iter()
            .filter(|row| row.tracker_key.as_ref() == Some(key))
            .min_by(|a, b| a.id.cmp(&b.id))
        {
            return MatchResult {
                matched_item: Some((*winner).clone()),
                tier_used: TierUsed::KeyMatch,
                score: None,
                confidence_tier: ConfidenceTier::Autonomous,
            };
        }
    }

    // Tier 3: weighted summary similarity. Only candidates sharing at
    // least one title token are scored.
    let item_title = normalize(&item.title);
    let item_tokens = tokens(&item_title)
        .into_iter()
        .map(str::to_string)
        .collect::<BTreeSet<_>>();
    let mut best: Option<(&BacklogItem, SimilarityScore)> = None;
    for row in &candidates {
        let row_title = normalize(&row.title);
        let shares_token = tokens(&row_title)
            .iter()
            .any(|t| item_tokens.contains(*t));
        if !shares_token {
            continue;
        }
        let score = similarity(&item_title, &row_title);
        if score.s < thresholds.review {
            continue;
        }
        best = match best {
            Some((held, held_score))
                if held_score.s > score.s
                    || (held_score.s == score.s && held.id < row.id) =>
            {
                Some((held, held_score))
            }
            _ => Some((row, score)),
        };
    }
    if let Some((winner, score)) = best {
        let confidence_tier =
            tier_with(score.s, thresholds).expect("similarity scores stay in [0,1]");
        return MatchResult {
            matched_item: Some(winner.clone()),
            tier_used: TierUsed::WeightedSimilarity,
            score: Some(score),
            confidence_tier,
        };
    }

    // Tier 4: fuzzy acceptance by normalized edit-distance similarity,
    // reusing the autonomy threshold.
    let mut best_fuzzy: Option<(&BacklogItem, f64)> = None;
    for row in &candidates {
        let sim = levenshtein_similarity(&item_title, &normalize(&row.title));
        if sim < thresholds.autonomy {
            continue;
        }
        best_fuzzy = match best_fuzzy {
            Some((held, held_sim))
                if held_sim > sim || (held_sim == sim && held.id < row.id) =>
            {
                Some((held, held_sim))
            }
            _ => Some((row, sim)),
        };
    }
    if let Some((winner, _)) = best_fuzzy {
        let score = similarity(&item_title, &normalize(&winner.title));
        return MatchResult {
            matched_item: Some(winner.clone()),
            tier_used: TierUsed::FuzzyLevenshtein,
            score: Some(score),
            confidence_tier: ConfidenceTier::Autonomous,
        };
    }

    MatchResult {
        matched_item: None,
        tier_used: TierUsed::NoMatch,
        score: None,
        confidence_tier: ConfidenceTier::HaltReingest,
    }
}
