//! Multi-tier network deployments: hexagonal macro layout, PPP-distributed
//! small cells and users, reproducible under an explicit RNG.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_TIERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Macro,
    Pico,
    Femto,
}

impl Tier {
    pub const ALL: [Tier; N_TIERS] = [Tier::Macro, Tier::Pico, Tier::Femto];

    pub fn index(self) -> usize {
        match self {
            Tier::Macro => 0,
            Tier::Pico => 1,
            Tier::Femto => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Macro => "macro",
            Tier::Pico => "pico",
            Tier::Femto => "femto",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroLayout {
    HexGrid,
    Ppp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fading {
    None,
    Rayleigh,
}

/// Deployment parameters. Densities and powers are indexed macro/pico/femto.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub region_side_m: f64,
    pub macro_layout: MacroLayout,
    /// BSs per m^2, [macro, pico, femto].
    pub tier_densities: [f64; N_TIERS],
    /// Users per m^2.
    pub user_density: f64,
    /// Transmit power in W, [macro, pico, femto].
    pub tier_powers_w: [f64; N_TIERS],
    pub noise_power_w: f64,
    pub path_loss_exponent: f64,
    pub fading: Fading,
    pub rng_seed: u64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.region_side_m > 0.0) {
            return Err(Error::InvalidConfig("region_side_m must be > 0".into()));
        }
        if !(self.tier_densities[0] > 0.0) {
            return Err(Error::InvalidConfig("macro density must be > 0".into()));
        }
        for (t, &d) in Tier::ALL.iter().zip(&self.tier_densities) {
            if !(d >= 0.0) || !d.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{} density must be finite and >= 0",
                    t.name()
                )));
            }
        }
        if !(self.user_density > 0.0) {
            return Err(Error::InvalidConfig("user_density must be > 0".into()));
        }
        for (t, &p) in Tier::ALL.iter().zip(&self.tier_powers_w) {
            if !(p > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{} power must be > 0",
                    t.name()
                )));
            }
        }
        if !(self.noise_power_w > 0.0) {
            return Err(Error::InvalidConfig("noise_power_w must be > 0".into()));
        }
        if !(self.path_loss_exponent > 2.0) {
            return Err(Error::InvalidConfig(
                "path_loss_exponent must be > 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseStation {
    pub id: usize,
    pub tier: Tier,
    pub position: [f64; 2],
    pub power_w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct User {
    pub id: usize,
    pub position: [f64; 2],
}

/// Immutable snapshot of one network drop.
#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub region_side_m: f64,
    pub base_stations: Vec<BaseStation>,
    pub users: Vec<User>,
}

impl Deployment {
    pub fn n_bs(&self) -> usize {
        self.base_stations.len()
    }

    /// N_B1, the number of macro entries.
    pub fn n_macros(&self) -> usize {
        self.base_stations
            .iter()
            .filter(|b| b.tier == Tier::Macro)
            .count()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn macro_mask(&self) -> Vec<bool> {
        self.base_stations
            .iter()
            .map(|b| b.tier == Tier::Macro)
            .collect()
    }

    pub fn powers(&self) -> Vec<f64> {
        self.base_stations.iter().map(|b| b.power_w).collect()
    }
}

/// Toroidal distance between two points in a square region, used for all
/// interference geometry so the finite region has no edge artifacts.
pub fn wrapped_distance(a: [f64; 2], b: [f64; 2], side: f64) -> f64 {
    let mut dx = (a[0] - b[0]).abs();
    let mut dy = (a[1] - b[1]).abs();
    if dx > side - dx {
        dx = side - dx;
    }
    if dy > side - dy {
        dy = side - dy;
    }
    dx.hypot(dy)
}

/// Centers of a hexagonal lattice with site density `macro_density`, clipped
/// to the region and centered in it. Deterministic.
///
/// The lattice pitch is d = sqrt(2 / (sqrt(3) * density)), which makes the
/// triangular-lattice site density equal the requested one.
pub fn generate_hex_macro_layout(region_side_m: f64, macro_density: f64) -> Result<Vec<[f64; 2]>> {
    if !(macro_density > 0.0) || !(region_side_m > 0.0) {
        return Err(Error::RegionTooSmall {
            side_m: region_side_m,
            density: macro_density,
        });
    }
    let pitch = (2.0 / (3.0_f64.sqrt() * macro_density)).sqrt();
    let row_gap = pitch * 3.0_f64.sqrt() / 2.0;
    let mut n_cols = (region_side_m / pitch).round() as i64;
    let mut n_rows = (region_side_m / row_gap).round() as i64;
    if n_cols < 1 || n_rows < 1 {
        return Err(Error::RegionTooSmall {
            side_m: region_side_m,
            density: macro_density,
        });
    }
    // Shrink until the patch fits inside the region.
    let extent = |cols: i64, rows: i64| {
        let offset = if rows > 1 { pitch / 2.0 } else { 0.0 };
        (
            (cols - 1) as f64 * pitch + offset,
            (rows - 1) as f64 * row_gap,
        )
    };
    while n_cols > 1 && extent(n_cols, n_rows).0 > region_side_m {
        n_cols -= 1;
    }
    while n_rows > 1 && extent(n_cols, n_rows).1 > region_side_m {
        n_rows -= 1;
    }
    let (ext_x, ext_y) = extent(n_cols, n_rows);
    if ext_x > region_side_m || ext_y > region_side_m {
        return Err(Error::RegionTooSmall {
            side_m: region_side_m,
            density: macro_density,
        });
    }
    let x0 = (region_side_m - ext_x) / 2.0;
    let y0 = (region_side_m - ext_y) / 2.0;
    let mut sites = Vec::with_capacity((n_rows * n_cols) as usize);
    for r in 0..n_rows {
        let row_offset = if r % 2 == 1 { pitch / 2.0 } else { 0.0 };
        for c in 0..n_cols {
            sites.push([x0 + c as f64 * pitch + row_offset, y0 + r as f64 * row_gap]);
        }
    }
    Ok(sites)
}

/// Poisson(mean) sample via inversion-by-multiplication, chunked so the
/// uniform product never underflows.
fn poisson(mean: f64, rng: &mut impl Rng) -> usize {
    debug_assert!(mean >= 0.0);
    let mut remaining = mean;
    let mut total = 0usize;
    while remaining > 0.0 {
        let chunk = remaining.min(30.0);
        remaining -= chunk;
        let limit = (-chunk).exp();
        let mut prod = 1.0;
        let mut k = 0usize;
        loop {
            prod *= rng.gen::<f64>();
            if prod <= limit {
                break;
            }
            k += 1;
        }
        total += k;
    }
    total
}

/// Homogeneous PPP over the square region: Poisson count, i.i.d. uniform
/// positions. Reproducible for a fixed RNG state.
pub fn sample_ppp(density: f64, region_side_m: f64, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    if density <= 0.0 {
        return Vec::new();
    }
    let mean = density * region_side_m * region_side_m;
    let n = poisson(mean, rng);
    (0..n)
        .map(|_| {
            [
                rng.gen::<f64>() * region_side_m,
                rng.gen::<f64>() * region_side_m,
            ]
        })
        .collect()
}

/// Build one network drop: macro layout per config, pico/femto/user positions
/// by PPP sampling. Draw order is fixed (macro, pico, femto, users) so a seed
/// pins the whole deployment.
pub fn build_deployment(config: &NetworkConfig, rng: &mut impl Rng) -> Result<Deployment> {
    config.validate()?;
    let side = config.region_side_m;
    let macro_sites = match config.macro_layout {
        MacroLayout::HexGrid => generate_hex_macro_layout(side, config.tier_densities[0])?,
        MacroLayout::Ppp => sample_ppp(config.tier_densities[0], side, rng),
    };
    let pico_sites = sample_ppp(config.tier_densities[1], side, rng);
    let femto_sites = sample_ppp(config.tier_densities[2], side, rng);
    let user_sites = sample_ppp(config.user_density, side, rng);

    let mut base_stations = Vec::new();
    for (tier, sites) in [
        (Tier::Macro, macro_sites),
        (Tier::Pico, pico_sites),
        (Tier::Femto, femto_sites),
    ] {
        for pos in sites {
            base_stations.push(BaseStation {
                id: base_stations.len(),
                tier,
                position: pos,
                power_w: config.tier_powers_w[tier.index()],
            });
        }
    }
    if base_stations.is_empty() {
        return Err(Error::EmptyDeployment("no base stations".into()));
    }
    let users: Vec<User> = user_sites
        .into_iter()
        .enumerate()
        .map(|(id, position)| User { id, position })
        .collect();
    if users.is_empty() {
        return Err(Error::EmptyDeployment("no users".into()));
    }
    Ok(Deployment {
        region_side_m: side,
        base_stations,
        users,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub(crate) fn table1_config() -> NetworkConfig {
        NetworkConfig {
            region_side_m: 500.0,
            macro_layout: MacroLayout::HexGrid,
            tier_densities: [1.0 / 250_000.0, 4.0 / 250_000.0, 12.0 / 250_000.0],
            user_density: 80.0 / 250_000.0,
            tier_powers_w: [40.0, 1.0, 0.1],
            noise_power_w: 3.9811e-16,
            path_loss_exponent: 3.5,
            fading: Fading::Rayleigh,
            rng_seed: 7,
        }
    }

    #[test]
    fn hex_single_site_near_center() {
        let sites = generate_hex_macro_layout(500.0, 1.0 / 250_000.0).unwrap();
        assert_eq!(sites.len(), 1);
        assert!((sites[0][0] - 250.0).abs() < 1.0);
        assert!((sites[0][1] - 250.0).abs() < 1.0);
    }

    #[test]
    fn hex_nine_sites_equal_neighbor_distances() {
        let sites = generate_hex_macro_layout(1500.0, 1.0 / 250_000.0).unwrap();
        assert_eq!(sites.len(), 9);
        // Nearest-neighbor distance must equal the lattice pitch for every site.
        let pitch = (2.0 / (3.0_f64.sqrt() / 250_000.0)).sqrt();
        for (i, a) in sites.iter().enumerate() {
            let nn = sites
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!((nn - pitch).abs() < 1e-9 * pitch, "nn {nn} vs pitch {pitch}");
        }
        for s in &sites {
            assert!(s[0] >= 0.0 && s[0] <= 1500.0 && s[1] >= 0.0 && s[1] <= 1500.0);
        }
    }

    #[test]
    fn hex_zero_density_errors() {
        assert!(generate_hex_macro_layout(500.0, 0.0).is_err());
    }

    #[test]
    fn hex_region_too_small_errors() {
        assert!(generate_hex_macro_layout(10.0, 1.0 / 250_000.0).is_err());
    }

    #[test]
    fn ppp_zero_density_empty() {
        assert!(sample_ppp(0.0, 500.0, &mut rng(1)).is_empty());
    }

    #[test]
    fn ppp_mean_count_matches_density() {
        let mut r = rng(42);
        let trials = 10_000;
        let total: usize = (0..trials)
            .map(|_| sample_ppp(4.0 / 250_000.0, 500.0, &mut r).len())
            .sum();
        let mean = total as f64 / trials as f64;
        assert!((3.8..=4.2).contains(&mean), "empirical mean {mean}");
    }

    #[test]
    fn ppp_deterministic_under_seed() {
        let a = sample_ppp(1e-4, 500.0, &mut rng(9));
        let b = sample_ppp(1e-4, 500.0, &mut rng(9));
        assert_eq!(a, b);
    }

    #[test]
    fn ppp_positions_inside_region() {
        for p in sample_ppp(1e-3, 300.0, &mut rng(3)) {
            assert!(p[0] >= 0.0 && p[0] < 300.0);
            assert!(p[1] >= 0.0 && p[1] < 300.0);
        }
    }

    #[test]
    fn deployment_counts_and_determinism() {
        let cfg = table1_config();
        let dep = build_deployment(&cfg, &mut rng(5)).unwrap();
        assert_eq!(dep.n_macros(), 1);
        assert!(dep.n_bs() >= 1);
        let dep2 = build_deployment(&cfg, &mut rng(5)).unwrap();
        assert_eq!(dep, dep2);

        // Expected counts over many drops match Table-1 densities.
        let mut r = rng(11);
        let trials = 400;
        let (mut picos, mut femtos, mut users) = (0usize, 0usize, 0usize);
        for _ in 0..trials {
            let d = build_deployment(&cfg, &mut r);
            let d = match d {
                Ok(d) => d,
                Err(_) => continue, // zero-user drops are rejected
            };
            picos += d
                .base_stations
                .iter()
                .filter(|b| b.tier == Tier::Pico)
                .count();
            femtos += d
                .base_stations
                .iter()
                .filter(|b| b.tier == Tier::Femto)
                .count();
            users += d.n_users();
        }
        let t = trials as f64;
        assert!((picos as f64 / t - 4.0).abs() < 0.5);
        assert!((femtos as f64 / t - 12.0).abs() < 1.0);
        assert!((users as f64 / t - 80.0).abs() < 3.0);
    }

    #[test]
    fn two_tier_config_has_no_femtos() {
        let mut cfg = table1_config();
        cfg.tier_densities[2] = 0.0;
        let dep = build_deployment(&cfg, &mut rng(2)).unwrap();
        assert!(dep.base_stations.iter().all(|b| b.tier != Tier::Femto));
    }

    #[test]
    fn wrapped_distance_respects_torus() {
        assert!((wrapped_distance([0.0, 0.0], [499.0, 0.0], 500.0) - 1.0).abs() < 1e-12);
        assert!((wrapped_distance([10.0, 10.0], [20.0, 10.0], 500.0) - 10.0).abs() < 1e-12);
    }
}
