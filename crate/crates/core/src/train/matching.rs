use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum-cost one-to-one assignment on a `(P, G)` cost matrix.
///
/// Returns `min(P, G)` pairs `(prediction, ground_truth)` sorted by prediction.
pub fn hungarian_match(cost: &Tensor) -> Result<Vec<(usize, usize)>> {
    if cost.rank() != 2 {
        return Err(Error::shape("hungarian_match", cost.shape(), &[0, 0]));
    }
    let (p, g) = (cost.shape()[0], cost.shape()[1]);
    if let Some(bad) = cost.data().iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite matching cost {bad}")));
    }
    if p == 0 || g == 0 {
        return Ok(Vec::new());
    }
    let d = cost.data();
    let mut pairs = if p <= g {
        assign(p, g, |i, j| d[i * g + j])
    } else {
        assign(g, p, |i, j| d[j * g + i]).into_iter().map(|(a, b)| (b, a)).collect()
    };
    pairs.sort_unstable();
    Ok(pairs)
}

/// Shortest augmenting path with potentials; `rows ≤ cols`.
fn assign(rows: usize, cols: usize, c: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based with column 0 as the virtual source.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
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
    (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect()
}
