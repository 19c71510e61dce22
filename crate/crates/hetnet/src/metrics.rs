//! Evaluation quantities: empirical rate CDFs, worst-percentile throughput,
//! edge-user gains, and per-tier load shares.

use crate::association::Scheme;
use crate::error::{Error, Result};
use crate::optimizer::Allocation;
use crate::scenario::{Deployment, N_TIERS};

/// Empirical CDF of `rates` evaluated on `grid`. Monotone nondecreasing.
pub fn rate_cdf(rates: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if rates.is_empty() {
        return Err(Error::EmptyRates);
    }
    let mut sorted = rates.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    Ok(grid
        .iter()
        .map(|&g| sorted.partition_point(|&r| r <= g) as f64 / n)
        .collect())
}

/// Mean rate of the lowest ceil(p * N) users.
pub fn percentile_throughput(rates: &[f64], p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "p must be in (0,1)");
    assert!(!rates.is_empty());
    let mut sorted = rates.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((p * sorted.len() as f64).ceil() as usize).max(1);
    sorted[..k].iter().sum::<f64>() / k as f64
}

/// Relative edge-user gain (T_a - T_n) / T_n.
pub fn edge_gain(t_a: f64, t_n: f64) -> Result<f64> {
    if t_n <= 0.0 {
        return Err(Error::NonPositiveReference(t_n));
    }
    Ok((t_a - t_n) / t_n)
}

/// Fraction of users served per tier in each phase, fractional users counted
/// by share mass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LoadShares {
    pub normal: [f64; N_TIERS],
    pub blank: [f64; N_TIERS],
}

pub fn load_share(alloc: &Allocation, dep: &Deployment) -> LoadShares {
    let (n_u, n_b) = alloc.x.dim();
    assert_eq!(n_b, dep.n_bs());
    let tiers: Vec<usize> = dep.base_stations.iter().map(|b| b.tier.index()).collect();
    let mut shares = LoadShares::default();
    for i in 0..n_u {
        for (phase, m) in [(0, &alloc.x), (1, &alloc.y)] {
            let mut per_tier = [0.0; N_TIERS];
            let mut total = 0.0;
            for j in 0..n_b {
                per_tier[tiers[j]] += m[[i, j]];
                total += m[[i, j]];
            }
            if total > 0.0 {
                let out = if phase == 0 {
                    &mut shares.normal
                } else {
                    &mut shares.blank
                };
                for t in 0..N_TIERS {
                    out[t] += per_tier[t] / total;
                }
            }
        }
    }
    for t in 0..N_TIERS {
        shares.normal[t] /= n_u as f64;
        shares.blank[t] /= n_u as f64;
    }
    shares
}

/// Per-drop outcome of one scheme, the unit Monte-Carlo aggregation works on.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub scheme: Scheme,
    pub rates: Vec<f64>,
    pub z: f64,
    pub load: LoadShares,
    pub fractional_normal: usize,
    pub fractional_blank: usize,
    pub utility: f64,
}

/// Sample mean and standard error.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
