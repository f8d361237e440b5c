//! Two-sided Mann-Whitney U test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest `n_a * n_b` handled by the exact null distribution.
pub const EXACT_LIMIT: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Pairs `(x, y)` with `x > y`, ties counting one half.
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

/// Midranks (1-based) of the pooled sample and the tie group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && pooled[idx[j]] == pooled[idx[i]] {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + j) as f64;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("Mann-Whitney needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::InvalidInput("Mann-Whitney samples contain NaN".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;
    if na * nb <= EXACT_LIMIT {
        Ok(MannWhitney {
            u,
            p: exact_p(&ranks, na, ra),
            exact: true,
        })
    } else {
        Ok(MannWhitney {
            u,
            p: normal_p(u, na, nb, &ties),
            exact: false,
        })
    }
}

/// Permutation distribution of the rank sum of `na` items drawn from the pooled
/// midranks, by dynamic programming over doubled (integer) ranks.
fn exact_p(ranks: &[f64], na: usize, ra: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // counts[k][s]: subsets of size k with doubled rank sum s.
    let mut counts = vec![vec![0.0f64; max_sum + 1]; na + 1];
    counts[0][0] = 1.0;
    for (seen, &d) in doubled.iter().enumerate() {
        for k in (1..=na.min(seen + 1)).rev() {
            let (lo, hi) = counts.split_at_mut(k);
            for s in (d..=max_sum).rev() {
                hi[0][s] += lo[k - 1][s - d];
            }
        }
    }
    let total: f64 = counts[na].iter().sum();
    let mean2 = na as f64 * (ranks.len() + 1) as f64;
    let dev = (2.0 * ra - mean2).abs();
    let extreme: f64 = counts[na]
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s as f64 - mean2).abs() >= dev - 1e-9)
        .map(|(_, c)| c)
        .sum();
    (extreme / total).min(1.0)
}

fn normal_p(u: f64, na: usize, nb: usize, ties: &[usize]) -> f64 {
    let n = (na + nb) as f64;
    let mean = (na * nb) as f64 / 2.0;
    let tie: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie / (n * (n - 1.0)));
    if !(var > 0.0) {
        return 1.0;
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - std.cdf(z))).min(1.0)
}

/// Normal-approximation p-value regardless of sample size.
pub fn mann_whitney_normal(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    let mut out = mann_whitney_u(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (_, ties) = midranks(&pooled);
    out.p = normal_p(out.u, a.len(), b.len(), &ties);
    out.exact = false;
    Ok(out)
}

/// Significance marks at .05, .01, .001 and .0001.
pub fn stars(p: f64) -> &'static str {
    if p < 1e-4 {
        "****"
    } else if p < 1e-3 {
        "***"
    } else if p < 1e-2 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}
