//! Optimal bipartite assignment and the set-prediction training criterion.
//!
//! Ground-truth instances (columns) are matched to proposals (rows) by an
//! exact O(n^3) augmenting-path assignment over a combined classification,
//! mask BCE and Dice cost. The brute-force permutation oracle used to verify
//! it lives with the tests.

use crate::error::{Error, Result};
use crate::inference::{ProposalSet, RegionProposal};
use crate::mask::{BinaryMask, ClassId};
use crate::metrics::FrameAnnotation;

/// Probabilities are clamped away from {0, 1} before taking logs so that
/// saturated masks yield large finite costs instead of infinities.
pub const PROB_CLAMP: f64 = 1e-7;

/// Rectangular cost matrix with finite entries, row-major.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "cost matrix {rows}x{cols} with {} entries",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("cost matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// An injective map from each column to a distinct row.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_for_col[c]` is the row assigned to column `c`.
    pub row_for_col: Vec<usize>,
    pub total_cost: f64,
}

/// Exact minimum-cost assignment of every column to a distinct row
/// (augmenting-path algorithm with potentials, O(cols^2 * rows)).
///
/// Zero columns yield an empty assignment; zero rows with columns pending is
/// an error, as is `cols > rows`. Row scans run in ascending index order, so
/// among equal-cost optima the lower row index wins deterministically.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (rows, cols) = (cost.rows, cost.cols);
    if cols == 0 {
        return Ok(Assignment { row_for_col: Vec::new(), total_cost: 0.0 });
    }
    if rows == 0 {
        return Err(Error::EmptyMatrix { cols });
    }
    if cols > rows {
        return Err(Error::InfeasibleAssignment { rows, cols });
    }

    const INF: f64 = f64::INFINITY;
    // 1-based potentials; index 0 is the virtual start row.
    let mut col_potential = vec![0.0; cols + 1];
    let mut row_potential = vec![0.0; rows + 1];
    // col_for_row[r]: column currently assigned to row r (0 = unassigned).
    let mut col_for_row = vec![0usize; rows + 1];

    for col in 1..=cols {
        col_for_row[0] = col;
        let mut current_row = 0usize;
        let mut min_to = vec![INF; rows + 1];
        let mut previous = vec![0usize; rows + 1];
        let mut visited = vec![false; rows + 1];

        loop {
            visited[current_row] = true;
            let active_col = col_for_row[current_row];
            let mut delta = INF;
            let mut next_row = 0usize;
            for row in 1..=rows {
                if visited[row] {
                    continue;
                }
                let reduced = cost.at(row - 1, active_col - 1)
                    - col_potential[active_col]
                    - row_potential[row];
                if reduced < min_to[row] {
                    min_to[row] = reduced;
                    previous[row] = current_row;
                }
                if min_to[row] < delta {
                    delta = min_to[row];
                    next_row = row;
                }
            }
            for row in 0..=rows {
                if visited[row] {
                    col_potential[col_for_row[row]] += delta;
                    row_potential[row] -= delta;
                } else {
                    min_to[row] -= delta;
                }
            }
            current_row = next_row;
            if col_for_row[current_row] == 0 {
                break;
            }
        }

        // Augment along the alternating path.
        while current_row != 0 {
            let prev = previous[current_row];
            col_for_row[current_row] = col_for_row[prev];
            current_row = prev;
        }
    }

    let mut row_for_col = vec![0usize; cols];
    for row in 1..=rows {
        if col_for_row[row] != 0 {
            row_for_col[col_for_row[row] - 1] = row - 1;
        }
    }
    let total_cost = row_for_col
        .iter()
        .enumerate()
        .map(|(c, &r)| cost.at(r, c))
        .sum();
    Ok(Assignment { row_for_col, total_cost })
}

/// Weights of the matching-cost / loss components.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatchWeights {
    pub w_cls: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    /// Classification-loss weight of the no-object class.
    pub no_object_weight: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self { w_cls: 2.0, w_bce: 5.0, w_dice: 5.0, no_object_weight: 0.1 }
    }
}

impl MatchWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_cls, self.w_bce, self.w_dice];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) || self.no_object_weight < 0.0 {
            return Err(Error::ConfigInvalid("match weights must be non-negative".into()));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::ConfigInvalid("at least one match weight must be positive".into()));
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Per-pixel-mean binary cross-entropy of a soft mask against bits.
pub fn bce_mean(probs: &[f64], bits: &[u8]) -> f64 {
    let mut sum = 0.0;
    for (&p, &t) in probs.iter().zip(bits) {
        let p = clamp_prob(p);
        sum -= if t == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    sum / probs.len() as f64
}

/// Dice loss over flattened masks, with smoothing constant 1 in numerator
/// and denominator to keep empty masks finite.
pub fn dice_loss(probs: &[f64], bits: &[u8]) -> f64 {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (&p, &t) in probs.iter().zip(bits) {
        inter += p * t as f64;
        psum += p;
        tsum += t as f64;
    }
    1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0)
}

/// Matching cost between one proposal and one ground-truth instance:
/// `w_cls * (-p_c) + w_bce * BCE + w_dice * Dice`.
pub fn pair_cost(
    proposal: &RegionProposal,
    gt_class: ClassId,
    gt_mask: &BinaryMask,
    weights: &MatchWeights,
) -> Result<f64> {
    let soft = proposal.soft_mask();
    if soft.dims() != gt_mask.dims() {
        return Err(Error::DimensionMismatch(format!(
            "proposal mask {:?} vs gt mask {:?}",
            soft.dims(),
            gt_mask.dims()
        )));
    }
    let p_class = proposal.prob(gt_class);
    Ok(weights.w_cls * (-p_class)
        + weights.w_bce * bce_mean(soft.probs(), gt_mask.bits())
        + weights.w_dice * dice_loss(soft.probs(), gt_mask.bits()))
}

/// Value of the set criterion together with the assignment that produced it.
#[derive(Debug, Clone)]
pub struct CriterionOutput {
    pub loss: f64,
    /// Proposal row matched to each ground-truth instance.
    pub assignment: Assignment,
}

/// Hungarian-match ground-truth instances to proposals with [`pair_cost`],
/// then score: weighted cross-entropy of every proposal toward its target
/// class (matched proposals toward the gt class, the rest toward no-object,
/// down-weighted), plus mask BCE and Dice means over the matched pairs.
///
/// Accumulation order is canonical (matched terms in instance order,
/// unmatched terms sorted by value), so permuting the proposals permutes the
/// assignment and leaves the loss bit-identical.
pub fn set_criterion(
    proposals: &ProposalSet,
    gt: &FrameAnnotation,
    weights: &MatchWeights,
) -> Result<CriterionOutput> {
    weights.validate()?;
    let n = proposals.len();
    let g = gt.instances.len();
    for prop in &proposals.proposals {
        if prop.soft_mask().dims() != (gt.height, gt.width) {
            return Err(Error::DimensionMismatch(format!(
                "proposal mask {:?} in a {}x{} frame",
                prop.soft_mask().dims(),
                gt.height,
                gt.width
            )));
        }
    }
    let cost = CostMatrix::from_fn(n, g, |row, col| {
        let (class, mask) = &gt.instances[col];
        pair_cost(&proposals.proposals[row], *class, mask, weights)
            .expect("dimensions validated above")
    })?;
    let assignment = hungarian(&cost)?;

    let mut matched_for_row: Vec<Option<usize>> = vec![None; n];
    for (col, &row) in assignment.row_for_col.iter().enumerate() {
        matched_for_row[row] = Some(col);
    }

    // Classification: weighted mean of -ln p(target) with the no-object
    // class down-weighted, mirroring a class-weighted cross entropy.
    let mut ce_sum = 0.0;
    let mut weight_sum = 0.0;
    let mut unmatched_terms: Vec<f64> = Vec::new();
    let mut bce_sum = 0.0;
    let mut dice_sum = 0.0;
    for (col, &row) in assignment.row_for_col.iter().enumerate() {
        let (class, gt_mask) = &gt.instances[col];
        let prop = &proposals.proposals[row];
        ce_sum += -clamp_prob(prop.prob(*class)).ln();
        weight_sum += 1.0;
        bce_sum += bce_mean(prop.soft_mask().probs(), gt_mask.bits());
        dice_sum += dice_loss(prop.soft_mask().probs(), gt_mask.bits());
    }
    for (row, matched) in matched_for_row.iter().enumerate() {
        if matched.is_none() {
            let prop = &proposals.proposals[row];
            unmatched_terms.push(-clamp_prob(prop.no_object_prob()).ln());
            weight_sum += weights.no_object_weight;
        }
    }
    unmatched_terms.sort_by(f64::total_cmp);
    ce_sum += weights.no_object_weight * unmatched_terms.iter().sum::<f64>();

    let ce = if weight_sum > 0.0 { ce_sum / weight_sum } else { 0.0 };
    let (bce, dice) = if g > 0 {
        (bce_sum / g as f64, dice_sum / g as f64)
    } else {
        (0.0, 0.0)
    };
    let loss = weights.w_cls * ce + weights.w_bce * bce + weights.w_dice * dice;
    Ok(CriterionOutput { loss, assignment })
}
