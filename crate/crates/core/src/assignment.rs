//! Minimum-cost bipartite assignment (Hungarian method with potentials).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row.
    pub row_to_col: Vec<usize>,
    /// Sum of the assigned costs, accumulated in row order.
    pub cost: f64,
}

/// Total of `cost[i][cols[i]]` accumulated in row order.
pub fn assignment_cost(cost: &[f64], cols: usize, row_to_col: &[usize]) -> f64 {
    row_to_col.iter().enumerate().map(|(i, &j)| cost[i * cols + j]).sum()
}

/// Assigns every row of a `rows x cols` cost matrix (row-major, `rows <= cols`)
/// to a distinct column, minimizing the total cost. O(rows^2 * cols).
pub fn solve(cost: &[f64], rows: usize, cols: usize) -> Result<Assignment> {
    if cost.len() != rows * cols {
        return Err(Error::Shape(format!(
            "cost matrix has {} entries, expected {rows} x {cols}",
            cost.len()
        )));
    }
    if rows > cols {
        return Err(Error::Shape(format!("assignment needs rows <= cols, got {rows} x {cols}")));
    }
    if let Some(bad) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::Numeric(format!("non-finite assignment cost {bad}")));
    }
    if rows == 0 {
        return Ok(Assignment { row_to_col: Vec::new(), cost: 0.0 });
    }

    let at = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    // owner[j]: 1-based row currently holding column j (0 = free).
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];

    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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

    let mut row_to_col = vec![0usize; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    let total = assignment_cost(cost, cols, &row_to_col);
    Ok(Assignment { row_to_col, cost: total })
}
