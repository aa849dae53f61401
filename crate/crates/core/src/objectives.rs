//! Decoupled seen/unseen training objectives.
//!
//! Seen classification trains on every proposal (background included) against
//! ground-truth labels.  Unseen classification trains only on foreground
//! proposals, against one-hot pseudo labels drawn over the unseen classes, so
//! background never supervises the unseen pathway and the two heads cannot
//! fight over the same softmax.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Scores below this floor are clamped inside the logarithm so degenerate
/// score vectors still produce finite losses.
pub const LOG_FLOOR: f64 = 1e-12;

/// One training batch: per-proposal score rows plus their labels.
#[derive(Debug, Clone)]
pub struct LabeledScoreBatch {
    /// N^p x (1 + N^s); column 0 is background.
    seen_scores: Array2<f64>,
    /// N^f x N^u; row r belongs to the r-th foreground proposal.
    unseen_scores: Array2<f64>,
    /// Per proposal, 0 for background or 1-based seen class index.
    gt_labels: Vec<usize>,
    /// N^f x N^u one-hot rows, aligned with `unseen_scores`.
    pseudo_labels: Array2<f64>,
    /// Per proposal: true iff matched to an instance (label > 0).
    foreground_flags: Vec<bool>,
}

impl LabeledScoreBatch {
    pub fn new(
        seen_scores: Array2<f64>,
        unseen_scores: Array2<f64>,
        gt_labels: Vec<usize>,
        pseudo_labels: Array2<f64>,
        foreground_flags: Vec<bool>,
    ) -> Result<Self> {
        let np = seen_scores.nrows();
        if np == 0 || seen_scores.ncols() < 2 {
            return Err(Error::Shape(
                "seen scores need at least one proposal and background + one class".into(),
            ));
        }
        if gt_labels.len() != np || foreground_flags.len() != np {
            return Err(Error::Shape(format!(
                "{np} proposals vs {} labels / {} flags",
                gt_labels.len(),
                foreground_flags.len()
            )));
        }
        for (n, &label) in gt_labels.iter().enumerate() {
            if label >= seen_scores.ncols() {
                return Err(Error::Index {
                    index: label,
                    len: seen_scores.ncols(),
                });
            }
            if foreground_flags[n] != (label > 0) {
                return Err(Error::Shape(format!(
                    "proposal {n}: foreground flag disagrees with label {label}"
                )));
            }
        }
        let nf = foreground_flags.iter().filter(|&&f| f).count();
        if unseen_scores.nrows() != nf || pseudo_labels.nrows() != nf {
            return Err(Error::Shape(format!(
                "{nf} foreground proposals vs {} unseen score rows / {} pseudo labels",
                unseen_scores.nrows(),
                pseudo_labels.nrows()
            )));
        }
        if nf > 0 && unseen_scores.ncols() != pseudo_labels.ncols() {
            return Err(Error::Shape(format!(
                "unseen scores have {} classes, pseudo labels {}",
                unseen_scores.ncols(),
                pseudo_labels.ncols()
            )));
        }
        for row in pseudo_labels.rows() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != row.len() - 1 {
                return Err(Error::Format("pseudo label rows must be one-hot".into()));
            }
        }
        Ok(Self {
            seen_scores,
            unseen_scores,
            gt_labels,
            pseudo_labels,
            foreground_flags,
        })
    }

    pub fn n_proposals(&self) -> usize {
        self.seen_scores.nrows()
    }

    pub fn n_foreground(&self) -> usize {
        self.unseen_scores.nrows()
    }

    pub fn gt_labels(&self) -> &[usize] {
        &self.gt_labels
    }

    pub fn foreground_flags(&self) -> &[bool] {
        &self.foreground_flags
    }
}

fn check_distribution_rows(scores: &Array2<f64>, what: &str) -> Result<()> {
    for (r, row) in scores.rows().into_iter().enumerate() {
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidScore(format!(
                "{what} row {r} has negative or non-finite entries"
            )));
        }
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidScore(format!(
                "{what} row {r} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy of the seen head over all proposals.
///
/// Background proposals contribute through the background column, so the
/// classifier is also trained to say "none of the classes".
pub fn seen_ce(batch: &LabeledScoreBatch) -> Result<f64> {
    check_distribution_rows(&batch.seen_scores, "seen scores")?;
    let mut total = 0.0;
    for (n, &label) in batch.gt_labels.iter().enumerate() {
        total -= batch.seen_scores[(n, label)].max(LOG_FLOOR).ln();
    }
    Ok(total / batch.n_proposals() as f64)
}

/// Mean cross-entropy of the unseen head over foreground proposals.
///
/// Pseudo labels are one-hot draws over the unseen classes; background
/// proposals are excluded entirely.  A batch with no foreground contributes
/// zero.
pub fn unseen_ce(batch: &LabeledScoreBatch) -> Result<f64> {
    if batch.n_foreground() == 0 {
        return Ok(0.0);
    }
    check_distribution_rows(&batch.unseen_scores, "unseen scores")?;
    let mut total = 0.0;
    for (r, pseudo) in batch.pseudo_labels.rows().into_iter().enumerate() {
        for (j, &p) in pseudo.iter().enumerate() {
            if p == 1.0 {
                total -= batch.unseen_scores[(r, j)].max(LOG_FLOOR).ln();
            }
        }
    }
    Ok(total / batch.n_foreground() as f64)
}

/// Weighted sum of the two losses.
pub fn total_objective(seen: f64, unseen: f64, lambda: f64) -> Result<f64> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Parameter(format!(
            "loss weight must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(seen + lambda * unseen)
}
