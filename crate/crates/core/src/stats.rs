//! Mann–Whitney U rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest combined sample size for which tie-free p-values are enumerated exactly.
pub const EXACT_LIMIT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// `a` tends to exceed `b`.
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// `U` of the first sample: pairs `(x in a, y in b)` with `x > y`, ties counting one half.
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

/// Midranks (1-based) of `values`, and the sizes of tied groups.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        if end - start > 1 {
            ties.push(end - start);
        }
        start = end;
    }
    (ranks, ties)
}

/// Counts of each `U = 0..=n1*n2` over all equally likely rank assignments without ties.
pub fn exact_u_counts(n1: usize, n2: usize) -> Vec<f64> {
    // f[m][u] for the current n2 column, built by f(u; n1, n2) = f(u - n2; n1 - 1, n2) + f(u; n1, n2 - 1)
    let mut prev: Vec<Vec<f64>> = (0..=n1).map(|_| vec![1.0]).collect();
    for k in 1..=n2 {
        let mut cur: Vec<Vec<f64>> = Vec::with_capacity(n1 + 1);
        cur.push(vec![1.0]);
        for m in 1..=n1 {
            let mut row = vec![0.0; m * k + 1];
            for (u, slot) in row.iter_mut().enumerate() {
                if u >= k {
                    if let Some(&c) = cur[m - 1].get(u - k) {
                        *slot += c;
                    }
                }
                if let Some(&c) = prev[m].get(u) {
                    *slot += c;
                }
            }
            cur.push(row);
        }
        prev = cur;
    }
    prev.swap_remove(n1)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64], alternative: Alternative) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid(
            "mann-whitney samples",
            "both samples must be non-empty",
        ));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::invalid("mann-whitney samples", "NaN in sample"));
    }
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;

    if ties.is_empty() && n1 + n2 <= EXACT_LIMIT {
        let counts = exact_u_counts(n1, n2);
        let total: f64 = counts.iter().sum();
        let k = u.round() as usize;
        let upper = counts[k..].iter().sum::<f64>() / total;
        let p = match alternative {
            Alternative::Greater => upper,
            Alternative::TwoSided => {
                let lower = counts[..=k].iter().sum::<f64>() / total;
                (2.0 * lower.min(upper)).min(1.0)
            }
        };
        return Ok(MannWhitney { u, p, exact: true });
    }

    let p = normal_p_value(u, n1, n2, &ties, alternative);
    Ok(MannWhitney { u, p, exact: false })
}

/// Normal approximation with tie-corrected variance and a continuity correction of one half.
pub fn normal_p_value(
    u: f64,
    n1: usize,
    n2: usize,
    ties: &[usize],
    alternative: Alternative,
) -> f64 {
    let (nn, n) = ((n1 * n2) as f64, (n1 + n2) as f64);
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = nn / 12.0 * ((n + 1.0) - tie_term);
    let mu = nn / 2.0;
    if var <= 0.0 {
        return match alternative {
            Alternative::TwoSided => 1.0,
            Alternative::Greater => 0.5,
        };
    }
    let normal = Normal::standard();
    let sd = var.sqrt();
    match alternative {
        Alternative::Greater => normal.sf((u - mu - 0.5) / sd),
        Alternative::TwoSided => (2.0 * normal.sf(((u - mu).abs() - 0.5) / sd)).min(1.0),
    }
}
