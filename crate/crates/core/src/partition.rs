//! Ambiguous pseudo-labels: positive/negative class partitions and the
//! smooth margin consistency loss.
//!
//! One view's class distribution is sorted; the shortest prefix whose
//! cumulative probability reaches the threshold becomes the positive set and
//! everything else the negative set. The other view is then scored with
//!
//! ```text
//! L = log(1 + e^ε · Σ_{i ∈ pos} e^{-y_i} · Σ_{j ∈ neg} e^{y_j})
//! ```
//!
//! a smooth upper bound on `relu(max(neg) + ε - min(pos))`.

use crate::error::{LeafError, Result};
use crate::tape::{Tape, Var};

/// Default cumulative-probability threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.9;
/// Default margin between the two sets.
pub const DEFAULT_MARGIN: f64 = 0.0;

const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyParams {
    pub threshold: f64,
    pub margin: f64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            margin: DEFAULT_MARGIN,
        }
    }
}

impl ConsistencyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(LeafError::param(format!(
                "threshold T must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(LeafError::param(format!(
                "margin must be finite and >= 0, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Split of `k` classes into a positive prefix and negative remainder of the
/// probability-sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    order: Vec<usize>,
    m: usize,
}

impl Partition {
    /// Builds a partition from an explicit class order and positive count.
    pub fn from_order(order: Vec<usize>, m: usize) -> Result<Self> {
        let k = order.len();
        if k < 2 || m == 0 || m >= k {
            return Err(LeafError::contract(format!(
                "partition needs 1 <= m <= k-1, got m={m}, k={k}"
            )));
        }
        let mut seen = vec![false; k];
        for &c in &order {
            if c >= k || std::mem::replace(&mut seen[c], true) {
                return Err(LeafError::contract("partition order is not a permutation"));
            }
        }
        Ok(Self { order, m })
    }

    /// Class indices sorted by descending probability.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn num_classes(&self) -> usize {
        self.order.len()
    }

    pub fn positive(&self) -> &[usize] {
        &self.order[..self.m]
    }

    pub fn negative(&self) -> &[usize] {
        &self.order[self.m..]
    }

    /// `mask[c]` is true when class `c` is positive.
    pub fn positive_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.order.len()];
        for &c in self.positive() {
            mask[c] = true;
        }
        mask
    }
}

/// Partitions one probability vector at cumulative threshold `threshold`.
///
/// `m` is the smallest count whose sorted cumulative sum reaches the
/// threshold, clamped to `1..=k-1`. Equal probabilities keep class order.
pub fn partition(probs: &[f64], threshold: f64) -> Result<Partition> {
    let k = probs.len();
    if k < 2 {
        return Err(LeafError::contract(format!(
            "partition needs at least 2 classes, got {k}"
        )));
    }
    if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(LeafError::contract("partition input has negative or non-finite entries"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(LeafError::contract(format!(
            "partition input sums to {total}, expected 1"
        )));
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    let mut cumulative = 0.0;
    let mut m = k;
    for (count, &c) in order.iter().enumerate() {
        cumulative += probs[c];
        if cumulative >= threshold {
            m = count + 1;
            break;
        }
    }
    let m = m.clamp(1, k - 1);
    Ok(Partition { order, m })
}

/// Partitions every row of a `batch x k` probability matrix.
pub fn partition_rows(probs: &crate::tensor::Tensor, threshold: f64) -> Result<Vec<Partition>> {
    (0..probs.rows())
        .map(|r| partition(probs.row(r), threshold))
        .collect()
}

/// Per-row smooth consistency loss as a `batch x 1` column.
///
/// Each row is `softplus(lse_pos(-y) + lse_neg(y) + ε)`, which equals
/// `log(1 + e^ε Σ_pos e^{-y} Σ_neg e^{y})` without forming the products.
pub fn ambiguous_consistency_rows(
    tape: &mut Tape,
    scores: Var,
    partitions: &[Partition],
    margin: f64,
) -> Result<Var> {
    let (rows, k) = tape.shape(scores);
    if partitions.len() != rows {
        return Err(LeafError::Shape {
            op: "ambiguous_consistency_loss",
            left: (rows, k),
            right: (partitions.len(), k),
        });
    }
    let mut pos_mask = Vec::with_capacity(rows * k);
    for p in partitions {
        if p.num_classes() != k {
            return Err(LeafError::contract(format!(
                "partition over {} classes applied to {k} scores",
                p.num_classes()
            )));
        }
        if p.positive().is_empty() || p.negative().is_empty() {
            return Err(LeafError::contract("empty positive or negative set"));
        }
        pos_mask.extend(p.positive_mask());
    }
    let neg_mask: Vec<bool> = pos_mask.iter().map(|&b| !b).collect();

    let negated = tape.neg(scores)?;
    let pos_term = tape.masked_log_sum_exp(negated, &pos_mask)?;
    let neg_term = tape.masked_log_sum_exp(scores, &neg_mask)?;
    let inner = tape.add(pos_term, neg_term)?;
    let inner = if margin != 0.0 {
        tape.add_scalar(inner, margin)?
    } else {
        inner
    };
    tape.log1p_exp(inner)
}

/// Batch mean of [`ambiguous_consistency_rows`].
pub fn ambiguous_consistency_loss(
    tape: &mut Tape,
    scores: Var,
    partitions: &[Partition],
    margin: f64,
) -> Result<Var> {
    let rows = ambiguous_consistency_rows(tape, scores, partitions, margin)?;
    tape.mean_all(rows)
}

/// Exact non-smooth margin objective `relu(max(neg) + ε - min(pos))`.
pub fn hinge_oracle(scores: &[f64], part: &Partition, margin: f64) -> f64 {
    let min_pos = part
        .positive()
        .iter()
        .map(|&c| scores[c])
        .fold(f64::INFINITY, f64::min);
    let max_neg = part
        .negative()
        .iter()
        .map(|&c| scores[c])
        .fold(f64::NEG_INFINITY, f64::max);
    (max_neg + margin - min_pos).max(0.0)
}
