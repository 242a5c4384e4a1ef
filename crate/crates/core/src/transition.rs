//! Score matrices to transition matrices, and discrete assignment.
//!
//! A score matrix has one row per track and one column per candidate
//! detection, followed by a single exit column. The transition matrix is the
//! entrywise minimum of a row softmax and a column softmax, which keeps every
//! row and every detection column summing to at most one.

use crate::diffcore::{self, DiffError, Matrix, Tape, Var};
use ndarray::s;
use serde::{Deserialize, Serialize};

/// How score matrices are normalized into transition matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `min(row softmax, column softmax)` over every column, exit included.
    #[default]
    RowColumnMin,
    /// As `RowColumnMin`, but the exit column is only row-normalized, so
    /// any number of tracks may exit at full probability.
    ExitRowOnly,
    /// Plain row softmax over every column, exit included.
    RowOnly,
    /// Row softmax over the detection columns alone; the exit column is
    /// zero, so every track must land on some detection.
    RowDetections,
}

fn check_columns(cols: usize) -> diffcore::Result<()> {
    if cols < 2 {
        return Err(DiffError::Invalid {
            op: "build_transition",
            message: format!(
                "score matrix needs a detection column and the exit column, got {cols} columns"
            ),
        });
    }
    Ok(())
}

/// Differentiable transition matrix from a score matrix whose last column is
/// the exit column.
pub fn build_transition_var(
    tape: &mut Tape,
    scores: Var,
    norm: Normalization,
) -> diffcore::Result<Var> {
    let (_, cols) = tape.shape(scores);
    check_columns(cols)?;
    if norm == Normalization::RowDetections {
        let det = tape.slice_cols(scores, 0, cols - 1)?;
        let row = tape.softmax_rows(det);
        let exit = tape.constant(Matrix::zeros((tape.shape(scores).0, 1)));
        return tape.concat_cols(&[row, exit]);
    }
    let row = tape.softmax_rows(scores);
    if norm == Normalization::RowOnly {
        return Ok(row);
    }
    if norm == Normalization::RowColumnMin {
        let col = tape.softmax_cols(scores);
        return tape.min(row, col);
    }
    let det_scores = tape.slice_cols(scores, 0, cols - 1)?;
    let col = tape.softmax_cols(det_scores);
    let row_det = tape.slice_cols(row, 0, cols - 1)?;
    let row_exit = tape.slice_cols(row, cols - 1, cols)?;
    let det = tape.min(row_det, col)?;
    tape.concat_cols(&[det, row_exit])
}

/// Plain-matrix version of [`build_transition_var`].
pub fn build_transition(scores: &Matrix, norm: Normalization) -> diffcore::Result<Matrix> {
    let cols = scores.ncols();
    check_columns(cols)?;
    if norm == Normalization::RowDetections {
        let mut out = Matrix::zeros(scores.dim());
        out.slice_mut(s![.., ..cols - 1])
            .assign(&diffcore::softmax_rows(
                &scores.slice(s![.., ..cols - 1]).to_owned(),
            ));
        return Ok(out);
    }
    let mut out = diffcore::softmax_rows(scores);
    if norm == Normalization::RowOnly {
        return Ok(out);
    }
    if norm == Normalization::RowColumnMin {
        let col = diffcore::softmax_cols(scores);
        out.zip_mut_with(&col, |m, &c| *m = m.min(c));
        return Ok(out);
    }
    let col = diffcore::softmax_cols(&scores.slice(s![.., ..cols - 1]).to_owned());
    out.slice_mut(s![.., ..cols - 1])
        .zip_mut_with(&col, |m, &c| *m = m.min(c));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, rows: usize, cols: usize) -> Self {
        pairs.sort_unstable();
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in &pairs {
            row_used[r] = true;
            col_used[c] = true;
        }
        Self {
            pairs,
            unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
            unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
        }
    }

    pub fn column_for(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(r, _)| r == row).map(|&(_, c)| c)
    }

    pub fn total_cost(&self, cost: &Matrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost[[r, c]]).sum()
    }
}

/// Minimum-cost assignment of size `min(R, C)`. Inputs with more rows than
/// columns are solved on the transpose.
pub fn hungarian(cost: &Matrix) -> Assignment {
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return Assignment::from_pairs(Vec::new(), rows, cols);
    }
    let pairs = if rows <= cols {
        solve_rect(&cost.view()).into_iter().enumerate().collect()
    } else {
        let mut pairs: Vec<(usize, usize)> = solve_rect(&cost.t())
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        pairs
    };
    Assignment::from_pairs(pairs, rows, cols)
}

/// Shortest augmenting path with potentials for `n ≤ m`, O(n²m). Returns
/// the assigned column of every row.
fn solve_rect(a: &ndarray::ArrayView2<f64>) -> Vec<usize> {
    let (n, m) = a.dim();
    debug_assert!(n <= m);
    // 1-based internally; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[[i0 - 1, j - 1]] - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Discrete track-to-detection matching on a transition matrix.
///
/// Runs [`hungarian`] on `1 - M` over the detection columns; pairs whose
/// probability falls below `accept_threshold` are demoted to unmatched. The
/// exit column is never matched.
pub fn match_frame(m: &Matrix, accept_threshold: f64) -> Assignment {
    let (rows, cols) = m.dim();
    let dets = cols.saturating_sub(1);
    let cost = m.slice(s![.., ..dets]).mapv(|p| 1.0 - p);
    let raw = hungarian(&cost);
    let pairs = raw
        .pairs
        .into_iter()
        .filter(|&(r, c)| m[[r, c]] >= accept_threshold)
        .collect();
    Assignment::from_pairs(pairs, rows, dets)
}
