//! Rank-based comparison of configurations: Kruskal-Wallis and Dunn's test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// `Σ (t³ − t)` over tie groups.
fn tie_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .chunk_by(|a, b| a == b)
        .map(|g| {
            let t = g.len() as f64;
            t * t * t - t
        })
        .sum()
}

struct Pooled {
    /// Mean rank per group.
    mean_ranks: Vec<f64>,
    sizes: Vec<usize>,
    n: usize,
    ties: f64,
}

fn pool(groups: &[Vec<f64>]) -> Result<Pooled> {
    if groups.len() < 2 {
        return Err(Error::validation("need at least two groups"));
    }
    if let Some((i, g)) = groups.iter().enumerate().find(|(_, g)| g.len() < 2) {
        return Err(Error::validation(format!(
            "group {i} has {} samples; at least 2 required",
            g.len()
        )));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::validation("group values must be finite"));
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let ranks = average_ranks(&all);
    let mut mean_ranks = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for g in groups {
        let sum: f64 = ranks[offset..offset + g.len()].iter().sum();
        mean_ranks.push(sum / g.len() as f64);
        offset += g.len();
    }
    Ok(Pooled {
        mean_ranks,
        sizes: groups.iter().map(Vec::len).collect(),
        n: all.len(),
        ties: tie_sum(&all),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    /// Tie-corrected statistic.
    pub h: f64,
    pub df: usize,
    /// Upper tail of χ²(df) at `h`.
    pub p_value: f64,
}

pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis> {
    let p = pool(groups)?;
    let n = p.n as f64;
    let df = groups.len() - 1;
    let correction = 1.0 - p.ties / (n * n * n - n);
    if correction <= 0.0 {
        // every observation tied
        return Ok(KruskalWallis {
            h: 0.0,
            df,
            p_value: 1.0,
        });
    }
    let ss: f64 = p
        .mean_ranks
        .iter()
        .zip(&p.sizes)
        .map(|(r, &k)| k as f64 * r * r)
        .sum();
    let h = (12.0 / (n * (n + 1.0)) * ss - 3.0 * (n + 1.0)) / correction;
    let h = h.max(0.0);
    let chi = ChiSquared::new(df as f64).expect("df >= 1");
    Ok(KruskalWallis {
        h,
        df,
        p_value: chi.sf(h),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DunnPair {
    pub a: usize,
    pub b: usize,
    /// `(R̄_a − R̄_b) / σ_ab`
    pub z: f64,
    pub p_raw: f64,
    /// Bonferroni-adjusted, capped at 1.
    pub p_adjusted: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DunnResult {
    pub alpha: f64,
    pub pairs: Vec<DunnPair>,
}

/// All pairwise Dunn comparisons in `(0,1), (0,2), …, (1,2), …` order.
pub fn dunn_test(groups: &[Vec<f64>], alpha: f64) -> Result<DunnResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation(format!("alpha {alpha} outside (0, 1)")));
    }
    let p = pool(groups)?;
    let n = p.n as f64;
    let variance = n * (n + 1.0) / 12.0 - p.ties / (12.0 * (n - 1.0));
    let m = groups.len() * (groups.len() - 1) / 2;
    let normal = Normal::standard();
    let mut pairs = Vec::with_capacity(m);
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            let se = (variance * (1.0 / p.sizes[a] as f64 + 1.0 / p.sizes[b] as f64)).sqrt();
            let diff = p.mean_ranks[a] - p.mean_ranks[b];
            let z = if se > 0.0 { diff / se } else { 0.0 };
            let p_raw = (2.0 * normal.sf(z.abs())).min(1.0);
            let p_adjusted = (p_raw * m as f64).min(1.0);
            pairs.push(DunnPair {
                a,
                b,
                z,
                p_raw,
                p_adjusted,
                significant: p_adjusted < alpha,
            });
        }
    }
    Ok(DunnResult { alpha, pairs })
}
