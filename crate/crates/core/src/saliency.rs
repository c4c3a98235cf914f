//! Neighbour difference values and the salient / non-salient split.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffMetric {
    L1,
    L2,
    Cosine,
}

/// Which snippet(s) a selected pair `(t-1, t)` marks as salient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMark {
    #[default]
    Later,
    Earlier,
    Both,
}

/// `tau[i]` is the difference between snippets `i` and `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceSet {
    pub tau: Vec<f64>,
}

impl DifferenceSet {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    /// Pair indices sorted by descending difference, ties by ascending index.
    pub fn ranked_pairs(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.tau.len()).collect();
        order.sort_by(|&a, &b| self.tau[b].total_cmp(&self.tau[a]).then(a.cmp(&b)));
        order
    }
}

/// Computes the difference between every pair of adjacent rows of a
/// row-major `T×D` matrix. Returns `None` when `T < 2`.
pub fn diff_values(features: &[f64], dim: usize, metric: DiffMetric) -> Option<DifferenceSet> {
    if dim == 0 || !features.len().is_multiple_of(dim) || features.len() / dim < 2 {
        return None;
    }
    let rows: Vec<&[f64]> = features.chunks(dim).collect();
    let tau = rows
        .windows(2)
        .map(|w| {
            let (prev, cur) = (w[0], w[1]);
            match metric {
                DiffMetric::L1 => cur.iter().zip(prev).map(|(a, b)| (a - b).abs()).sum(),
                DiffMetric::L2 => cur.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                DiffMetric::Cosine => {
                    let na = prev.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = cur.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if na == 0.0 || nb == 0.0 {
                        log::warn!("cosine difference with a zero-norm snippet, using 1");
                        1.0
                    } else {
                        let cos = prev.iter().zip(cur).map(|(a, b)| a * b).sum::<f64>() / (na * nb);
                        1.0 - cos.clamp(-1.0, 1.0)
                    }
                }
            }
        })
        .collect();
    Some(DifferenceSet { tau })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyPartition {
    /// `true` marks a salient snippet.
    pub labels: Vec<bool>,
    /// `⌊ratio·T⌋` (at least 1) before the pair rule was applied.
    pub requested_k: usize,
    pub salient_ratio: f64,
}

impl SaliencyPartition {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of salient snippets actually marked.
    pub fn realized_k(&self) -> usize {
        self.labels.iter().filter(|&&b| b).count()
    }

    pub fn salient(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&t| self.labels[t]).collect()
    }

    pub fn non_salient(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&t| !self.labels[t]).collect()
    }

    /// Swaps the two sets.
    pub fn flipped(&self) -> SaliencyPartition {
        SaliencyPartition {
            labels: self.labels.iter().map(|b| !b).collect(),
            ..self.clone()
        }
    }
}

pub fn requested_k(num_snippets: usize, salient_ratio: f64) -> usize {
    ((salient_ratio * num_snippets as f64).floor() as usize).max(1)
}

/// Marks the snippets behind the top-ranked pairs, later snippet of each pair.
pub fn assign_labels(tau: &DifferenceSet, salient_ratio: f64) -> SaliencyPartition {
    assign_labels_with(tau, salient_ratio, PairMark::Later)
}

/// Walks pairs in ranked order, marking snippets until `K` are salient or
/// the pairs run out.
pub fn assign_labels_with(tau: &DifferenceSet, salient_ratio: f64, mark: PairMark) -> SaliencyPartition {
    let t = tau.len() + 1;
    let k = requested_k(t, salient_ratio);
    let mut labels = vec![false; t];
    let mut marked = 0;
    for pair in tau.ranked_pairs() {
        if marked >= k {
            break;
        }
        let targets: &[usize] = match mark {
            PairMark::Later => &[pair + 1],
            PairMark::Earlier => &[pair],
            PairMark::Both => &[pair, pair + 1],
        };
        for &s in targets {
            if !labels[s] {
                labels[s] = true;
                marked += 1;
            }
        }
    }
    SaliencyPartition {
        labels,
        requested_k: k,
        salient_ratio,
    }
}

/// Number of snippets the difference rule would mark for `T` snippets.
pub fn difference_rule_k(num_snippets: usize, salient_ratio: f64) -> usize {
    requested_k(num_snippets, salient_ratio)
        .min(num_snippets.saturating_sub(1))
        .max(1)
}

/// Random baseline: `K` snippets chosen uniformly, with the same `K` the
/// difference rule would realize.
pub fn random_partition<R: Rng + ?Sized>(num_snippets: usize, salient_ratio: f64, rng: &mut R) -> SaliencyPartition {
    let k = difference_rule_k(num_snippets, salient_ratio);
    let mut labels = vec![false; num_snippets];
    for i in sample(rng, num_snippets, k) {
        labels[i] = true;
    }
    SaliencyPartition {
        labels,
        requested_k: requested_k(num_snippets, salient_ratio),
        salient_ratio,
    }
}

/// Classification baseline: the `K` snippets with the highest scores,
/// ties towards the earlier snippet.
pub fn score_partition(scores: &[f64], salient_ratio: f64) -> SaliencyPartition {
    let k = difference_rule_k(scores.len(), salient_ratio);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut labels = vec![false; scores.len()];
    for &i in &order[..k] {
        labels[i] = true;
    }
    SaliencyPartition {
        labels,
        requested_k: requested_k(scores.len(), salient_ratio),
        salient_ratio,
    }
}
