//! Minimum-cost bipartite assignment (Hungarian method with potentials).

use crate::error::{Error, Result};

/// Assignment of targets to queries.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(query, target)` pairs, sorted by target index.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the chosen costs, accumulated in target order.
    pub total_cost: f64,
}

impl MatchResult {
    /// The query matched to each target, indexed by target.
    pub fn query_of_target(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(q, _)| q).collect()
    }
}

/// Assign each of `targets` rows to a distinct one of `queries` columns,
/// minimising the total of `cost[target * queries + query]`.
///
/// Runs in `O(targets² · queries)`.
pub fn hungarian(cost: &[f64], targets: usize, queries: usize) -> Result<MatchResult> {
    if targets > queries {
        return Err(Error::validation(format!("{targets} targets cannot be matched to {queries} queries")));
    }
    if cost.len() != targets * queries {
        return Err(Error::shape(format!("cost has {} entries, expected {targets}×{queries}", cost.len())));
    }
    if let Some(bad) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("matching cost entry {bad} is not finite")));
    }
    if targets == 0 {
        return Ok(MatchResult { pairs: Vec::new(), total_cost: 0.0 });
    }
    let (n, m) = (targets, queries);
    let a = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    // 1-based: u row potentials, v column potentials, p[j] row matched to
    // column j (0 = free), way[j] previous column on the augmenting path.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
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
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
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
    let mut query_of = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            query_of[p[j] - 1] = j - 1;
        }
    }
    let pairs: Vec<(usize, usize)> = query_of.iter().enumerate().map(|(t, &q)| (q, t)).collect();
    let total_cost = pairs.iter().map(|&(q, t)| cost[t * m + q]).sum();
    Ok(MatchResult { pairs, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_target_takes_row_minimum() {
        let cost = [4.0, 2.0, 5.0, 0.5, 3.0];
        let r = hungarian(&cost, 1, 5).unwrap();
        assert_eq!(r.pairs, vec![(3, 0)]);
        assert_eq!(r.total_cost, 0.5);
    }

    #[test]
    fn too_many_targets() {
        assert!(matches!(hungarian(&[0.0; 6], 3, 2), Err(Error::Validation(_))));
    }

    #[test]
    fn empty() {
        assert_eq!(hungarian(&[], 0, 4).unwrap().pairs, vec![]);
    }

    #[test]
    fn classic_3x3() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let r = hungarian(&cost, 3, 3).unwrap();
        assert_eq!(r.total_cost, 5.0);
        assert_eq!(r.pairs, vec![(1, 0), (0, 1), (2, 2)]);
    }
}
