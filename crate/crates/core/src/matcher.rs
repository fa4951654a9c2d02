//! One-to-one assignment of ground-truth targets to region proposals.

use crate::geometry::{box_loss, BBox, BoxLossWeights};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Brute-force search is only offered up to this many rows.
pub const BRUTE_FORCE_LIMIT: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("cannot assign {targets} targets to {proposals} proposals")]
    TooManyTargets { targets: usize, proposals: usize },
    #[error(
        "cost matrix rows have inconsistent lengths (row {row} has {len}, expected {expected})"
    )]
    Ragged {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("non-finite cost at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("brute force supports at most {limit} rows, got {rows}")]
    TooLarge { rows: usize, limit: usize },
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
}

/// `assignment[k]` is the proposal index matched to target `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

/// Matching cost between a target and a proposal: `-P(class) + box_loss`.
/// `class_probs` holds the proposal's `C + 1` class probabilities, the last
/// being the no-object class. A `None` target class costs nothing.
pub fn match_cost(
    gt_class: Option<usize>,
    gt_box: &BBox,
    class_probs: &[f64],
    pred_box: &BBox,
    weights: BoxLossWeights,
) -> Result<f64, MatchError> {
    let Some(class) = gt_class else {
        return Ok(0.0);
    };
    let num_classes = class_probs.len().saturating_sub(1);
    if class >= num_classes {
        return Err(MatchError::ClassOutOfRange { class, num_classes });
    }
    Ok(-class_probs[class] + box_loss(pred_box, gt_box, weights))
}

fn validate(cost: &[Vec<f64>]) -> Result<usize, MatchError> {
    let cols = cost.first().map_or(0, Vec::len);
    for (row, r) in cost.iter().enumerate() {
        if r.len() != cols {
            return Err(MatchError::Ragged {
                row,
                len: r.len(),
                expected: cols,
            });
        }
        if let Some(col) = r.iter().position(|v| !v.is_finite()) {
            return Err(MatchError::NonFinite { row, col });
        }
    }
    if cost.len() > cols {
        return Err(MatchError::TooManyTargets {
            targets: cost.len(),
            proposals: cols,
        });
    }
    Ok(cols)
}

fn total(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(k, &i)| cost[k][i])
        .sum()
}

/// Minimum-cost assignment of every row to a distinct column of a `T x N`
/// matrix with `T <= N`, by shortest augmenting paths with potentials.
/// Among equal-cost alternatives the augmentation prefers lower column
/// indices, so results are deterministic.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment, MatchError> {
    let m = validate(cost)?;
    let n = cost.len();
    if n == 0 {
        return Ok(Assignment {
            assignment: Vec::new(),
            total_cost: 0.0,
        });
    }
    // 1-based: column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    let total_cost = total(cost, &assignment);
    Ok(Assignment {
        assignment,
        total_cost,
    })
}

/// Exhaustive search over all injective assignments. Intended as a reference
/// for small problems; ties resolve to the lexicographically first assignment.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> Result<Assignment, MatchError> {
    let m = validate(cost)?;
    let n = cost.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(MatchError::TooLarge {
            rows: n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    fn search(
        cost: &[Vec<f64>],
        row: usize,
        used: &mut [bool],
        current: &mut Vec<usize>,
        acc: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if row == cost.len() {
            if best.as_ref().is_none_or(|(b, _)| acc < *b) {
                *best = Some((acc, current.clone()));
            }
            return;
        }
        for col in 0..used.len() {
            if used[col] {
                continue;
            }
            used[col] = true;
            current.push(col);
            search(cost, row + 1, used, current, acc + cost[row][col], best);
            current.pop();
            used[col] = false;
        }
    }
    let mut best = None;
    search(
        cost,
        0,
        &mut vec![false; m],
        &mut Vec::new(),
        0.0,
        &mut best,
    );
    let (_, assignment) = best.unwrap_or_default();
    let total_cost = total(cost, &assignment);
    Ok(Assignment {
        assignment,
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let cost = vec![vec![1.0, 2.0], vec![3.0, 0.0]];
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.assignment, vec![0, 1]);
        assert_eq!(a.total_cost, 1.0);
    }

    #[test]
    fn rectangular_and_empty() {
        let cost = vec![vec![5.0, 1.0, 3.0]];
        assert_eq!(hungarian(&cost).unwrap().assignment, vec![1]);
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(hungarian(&empty).unwrap().assignment.is_empty());
    }

    #[test]
    fn rejects_bad_input() {
        let tall = vec![vec![1.0], vec![2.0]];
        assert_eq!(
            hungarian(&tall),
            Err(MatchError::TooManyTargets {
                targets: 2,
                proposals: 1
            })
        );
        assert!(matches!(
            hungarian(&[vec![f64::NAN, 1.0]]),
            Err(MatchError::NonFinite { .. })
        ));
        let big = vec![vec![0.0; 9]; 9];
        assert!(matches!(
            brute_force_assignment(&big),
            Err(MatchError::TooLarge { .. })
        ));
    }

    #[test]
    fn cost_terms() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let w = BoxLossWeights::default();
        let c = match_cost(Some(1), &b, &[0.1, 0.7, 0.2], &b, w).unwrap();
        assert!((c + 0.7).abs() < 1e-15);
        assert_eq!(match_cost(None, &b, &[0.1, 0.7, 0.2], &b, w).unwrap(), 0.0);
        assert!(matches!(
            match_cost(Some(2), &b, &[0.1, 0.7, 0.2], &b, w),
            Err(MatchError::ClassOutOfRange {
                class: 2,
                num_classes: 2
            })
        ));
    }
}
