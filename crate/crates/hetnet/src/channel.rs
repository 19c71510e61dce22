//! Channel gains, per-phase SINR, and the spectral-efficiency matrices that
//! feed the optimizer.
//!
//! The blank (Off) phase removes all macro transmissions: macro BSs provide
//! zero rate there, and every small cell sees strictly less interference.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scenario::{wrapped_distance, Deployment, Fading};

/// Linear channel gains h_ij, one row per user, one column per BS.
#[derive(Debug, Clone)]
pub struct GainMatrix {
    pub h: Array2<f64>,
}

/// Per-phase SINR matrices (normal / blank resource blocks).
#[derive(Debug, Clone)]
pub struct SinrMatrices {
    pub normal: Array2<f64>,
    pub blank: Array2<f64>,
}

/// Per-phase spectral efficiency in bit/s/Hz. Blank-phase macro columns are
/// identically zero; blank-phase small-cell entries dominate the normal ones.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyMatrices {
    pub c_n: Array2<f64>,
    pub c_b: Array2<f64>,
    pub is_macro: Vec<bool>,
}

impl EfficiencyMatrices {
    pub fn n_users(&self) -> usize {
        self.c_n.nrows()
    }

    pub fn n_bs(&self) -> usize {
        self.c_n.ncols()
    }

    pub fn n_macros(&self) -> usize {
        self.is_macro.iter().filter(|&&m| m).count()
    }

    /// Debug CSV: row per user, paired normal/blank columns per BS.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "user")?;
        for j in 0..self.n_bs() {
            let tag = if self.is_macro[j] { "macro" } else { "small" };
            write!(w, ",c_n_bs{j}_{tag},c_b_bs{j}_{tag}")?;
        }
        writeln!(w)?;
        for i in 0..self.n_users() {
            write!(w, "{i}")?;
            for j in 0..self.n_bs() {
                write!(w, ",{},{}", self.c_n[[i, j]], self.c_b[[i, j]])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Link gain: distance-floored power-law path loss times a static fade draw.
/// `fade_draw` is a unit-mean exponential variate (Rayleigh power), or 1.0
/// with fading disabled.
pub fn path_gain(distance_m: f64, exponent: f64, fade_draw: f64) -> f64 {
    distance_m.max(1.0).powf(-exponent) * fade_draw
}

/// One static fade per link per drop; users iterate in the outer loop so the
/// draw order is pinned.
pub fn build_gain_matrix(
    dep: &Deployment,
    fading: Fading,
    path_loss_exponent: f64,
    rng: &mut impl Rng,
) -> GainMatrix {
    let (n_u, n_b) = (dep.n_users(), dep.n_bs());
    let mut h = Array2::zeros((n_u, n_b));
    for (i, user) in dep.users.iter().enumerate() {
        for (j, bs) in dep.base_stations.iter().enumerate() {
            let d = wrapped_distance(user.position, bs.position, dep.region_side_m);
            let fade = match fading {
                Fading::None => 1.0,
                // Unit-mean exponential via inversion.
                Fading::Rayleigh => -(1.0 - rng.gen::<f64>()).ln(),
            };
            h[[i, j]] = path_gain(d, path_loss_exponent, fade.max(f64::MIN_POSITIVE));
        }
    }
    GainMatrix { h }
}

/// SINR of user `i` from BS `j` with every BS transmitting.
pub fn sinr_normal(powers: &[f64], gains: &GainMatrix, sigma2: f64, i: usize, j: usize) -> f64 {
    let signal = powers[j] * gains.h[[i, j]];
    let interference: f64 = (0..powers.len())
        .filter(|&n| n != j)
        .map(|n| powers[n] * gains.h[[i, n]])
        .sum();
    signal / (interference + sigma2)
}

/// SINR of user `i` from BS `j` in blank RBs: macros are silent, so they
/// deliver zero and stop interfering with everyone else.
pub fn sinr_blank(
    powers: &[f64],
    gains: &GainMatrix,
    sigma2: f64,
    i: usize,
    j: usize,
    is_macro: &[bool],
) -> f64 {
    if is_macro[j] {
        return 0.0;
    }
    let signal = powers[j] * gains.h[[i, j]];
    let interference: f64 = (0..powers.len())
        .filter(|&n| n != j && !is_macro[n])
        .map(|n| powers[n] * gains.h[[i, n]])
        .sum();
    signal / (interference + sigma2)
}

/// Shannon mapping, bit/s/Hz.
pub fn spectral_efficiency(sinr: f64) -> f64 {
    (1.0 + sinr).log2()
}

pub fn build_sinr_matrices(dep: &Deployment, gains: &GainMatrix, sigma2: f64) -> SinrMatrices {
    let (n_u, n_b) = (dep.n_users(), dep.n_bs());
    let powers = dep.powers();
    let is_macro = dep.macro_mask();
    let mut normal = Array2::zeros((n_u, n_b));
    let mut blank = Array2::zeros((n_u, n_b));
    for i in 0..n_u {
        let mut total = 0.0;
        let mut macro_total = 0.0;
        for j in 0..n_b {
            let rx = powers[j] * gains.h[[i, j]];
            total += rx;
            if is_macro[j] {
                macro_total += rx;
            }
        }
        for j in 0..n_b {
            let rx = powers[j] * gains.h[[i, j]];
            let interf_n = (total - rx).max(0.0);
            normal[[i, j]] = rx / (interf_n + sigma2);
            blank[[i, j]] = if is_macro[j] {
                0.0
            } else {
                // Subtracting the macro share from the normal-phase
                // interference keeps blank >= normal exactly in fp.
                let interf_b = (interf_n - macro_total).max(0.0);
                rx / (interf_b + sigma2)
            };
        }
    }
    SinrMatrices { normal, blank }
}

/// Compose SINR and the Shannon mapping into the optimizer's input matrices.
/// A user with all-zero rows in both phases has no feasible rate and is
/// reported as an error.
pub fn build_efficiency_matrices(
    dep: &Deployment,
    gains: &GainMatrix,
    sigma2: f64,
) -> Result<EfficiencyMatrices> {
    let sinr = build_sinr_matrices(dep, gains, sigma2);
    efficiency_from_sinr(&sinr, dep.macro_mask())
}

pub fn efficiency_from_sinr(sinr: &SinrMatrices, is_macro: Vec<bool>) -> Result<EfficiencyMatrices> {
    let c_n = sinr.normal.mapv(spectral_efficiency);
    let c_b = sinr.blank.mapv(spectral_efficiency);
    for i in 0..c_n.nrows() {
        let any = (0..c_n.ncols()).any(|j| c_n[[i, j]] > 0.0 || c_b[[i, j]] > 0.0);
        if !any {
            return Err(Error::InfeasibleUser { user: i });
        }
    }
    Ok(EfficiencyMatrices { c_n, c_b, is_macro })
}
