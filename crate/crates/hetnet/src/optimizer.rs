//! Convex joint allocation of normal/blank resources and the blank fraction.
//!
//! The problem solved here is
//!
//!   max over (x, y, z)   sum_i ln( sum_j x_ij c_n[i][j] + y_ij c_b[i][j] )
//!   s.t.  sum_i x_ij <= 1 - z,  sum_i y_ij <= z,  x, y, z in [0, 1].
//!
//! The inner problem at fixed z is solved by cyclic block-coordinate ascent:
//! each per-BS/per-phase budget is a separate block, and the exact block
//! maximizer is a waterfilling step. The budgets are independent across
//! blocks and every block maximizer is unique, so the ascent converges to
//! the global optimum of the concave objective. The outer variable z is
//! found by bisection on the partial-maximum derivative sum(nu) - sum(lambda),
//! which is nonincreasing because the partial maximum is concave in z.
//!
//! Every returned solution carries a [`KktCertificate`] with explicit
//! residuals; optimality claims rest on the certificate, not the algorithm.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::channel::EfficiencyMatrices;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Acceptance threshold for every KKT residual class.
    pub kkt_tol: f64,
    /// Maximum block-coordinate sweeps per inner solve.
    pub max_iters: usize,
    /// Threshold below which a variable counts as inactive.
    pub epsilon_active: f64,
    /// Grid resolution of the exhaustive oracle.
    pub z_grid: usize,
    /// When set, the inner solve starts from a seeded random feasible point
    /// instead of the equal split.
    pub random_init_seed: Option<u64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            kkt_tol: 1e-6,
            max_iters: 100_000,
            epsilon_active: 1e-6,
            z_grid: 64,
            random_init_seed: None,
        }
    }
}

/// Aggregate resource shares: x for the normal phase (budget 1-z per BS),
/// y for the blank phase (budget z per BS).
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub z: f64,
}

/// Per-user long-term rates.
#[derive(Debug, Clone, PartialEq)]
pub struct RateVector(pub Vec<f64>);

/// Dual variables and residual measures certifying (approximate) optimality.
#[derive(Debug, Clone)]
pub struct KktCertificate {
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
    /// Gradient/dual mismatch on active variables plus dual feasibility on
    /// inactive ones, max-norm.
    pub stationarity_residual: f64,
    pub complementarity_residual: f64,
    pub feasibility_residual: f64,
    /// |sum(lambda) - sum(nu)| when z is interior, 0 at the boundary.
    pub z_stationarity_residual: f64,
    /// Set when the utility is provably flat in z (no macro BSs).
    pub z_unconstrained: bool,
}

impl KktCertificate {
    pub fn max_residual(&self) -> f64 {
        self.stationarity_residual
            .max(self.complementarity_residual)
            .max(self.feasibility_residual)
            .max(self.z_stationarity_residual)
    }
}

/// R_i = sum_j x_ij c_n[i][j] + y_ij c_b[i][j].
pub fn rates(alloc: &Allocation, eff: &EfficiencyMatrices) -> RateVector {
    let r = (&alloc.x * &eff.c_n + &alloc.y * &eff.c_b).sum_axis(Axis(1));
    RateVector(r.to_vec())
}

/// Proportional-fair objective: sum of natural logs. Any non-positive rate
/// yields the -inf sentinel.
pub fn utility(rv: &RateVector) -> f64 {
    let mut total = 0.0;
    for &r in &rv.0 {
        if r <= 0.0 {
            return f64::NEG_INFINITY;
        }
        total += r.ln();
    }
    total
}

// ---------------------------------------------------------------------------
// Inner solver
// ---------------------------------------------------------------------------

/// Exact maximizer of sum_i ln(r_i + a_i w_i) subject to sum w <= b, w >= 0.
/// `items` are (user, a, r/a) with a > 0. Returns the water level t (the
/// block dual is 1/t); writes shares through `set`.
fn waterfill(items: &mut Vec<(usize, f64, f64)>, budget: f64) -> f64 {
    items.sort_unstable_by(|p, q| p.2.partial_cmp(&q.2).unwrap());
    let n = items.len();
    let mut cum = 0.0;
    let mut level = 0.0;
    let mut active = n;
    for k in 1..=n {
        cum += items[k - 1].2;
        level = (budget + cum) / k as f64;
        if k == n || level <= items[k].2 {
            active = k;
            break;
        }
    }
    debug_assert!(active >= 1);
    let _ = active;
    level
}

struct Inner {
    x: Array2<f64>,
    y: Array2<f64>,
    lambda: Vec<f64>,
    nu: Vec<f64>,
    stationarity: f64,
    complementarity: f64,
    feasibility: f64,
}

fn recompute_rates(eff: &EfficiencyMatrices, x: &Array2<f64>, y: &Array2<f64>) -> Vec<f64> {
    (x * &eff.c_n + y * &eff.c_b).sum_axis(Axis(1)).to_vec()
}

/// Certified dual estimates from the current iterate: for each budget the
/// largest marginal utility over users able to use it. At the optimum this is
/// exactly the multiplier; away from it the residual exposes the gap.
fn dual_estimates(eff: &EfficiencyMatrices, r: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n_u, n_b) = (eff.n_users(), eff.n_bs());
    let mut lambda = vec![0.0; n_b];
    let mut nu = vec![0.0; n_b];
    for j in 0..n_b {
        let mut lmax = 0.0_f64;
        let mut nmax = 0.0_f64;
        for i in 0..n_u {
            let cn = eff.c_n[[i, j]];
            if cn > 0.0 {
                lmax = lmax.max(cn / r[i]);
            }
            let cb = eff.c_b[[i, j]];
            if cb > 0.0 {
                nmax = nmax.max(cb / r[i]);
            }
        }
        lambda[j] = lmax;
        nu[j] = nmax;
    }
    (lambda, nu)
}

struct ResidualParts {
    stationarity: f64,
    complementarity: f64,
    feasibility: f64,
}

fn residual_parts(
    eff: &EfficiencyMatrices,
    alloc: &Allocation,
    lambda: &[f64],
    nu: &[f64],
    r: &[f64],
    eps: f64,
) -> ResidualParts {
    let (n_u, n_b) = (eff.n_users(), eff.n_bs());
    let z = alloc.z;
    let mut stationarity = 0.0_f64;
    let mut feasibility = 0.0_f64;
    let mut complementarity = 0.0_f64;
    feasibility = feasibility.max(-z).max(z - 1.0);
    for j in 0..n_b {
        let mut col_x = 0.0;
        let mut col_y = 0.0;
        for i in 0..n_u {
            let (xv, yv) = (alloc.x[[i, j]], alloc.y[[i, j]]);
            col_x += xv;
            col_y += yv;
            feasibility = feasibility.max(-xv).max(-yv);
            if eff.c_b[[i, j]] == 0.0 {
                // Blank-phase share toward a silent BS is wasted mass.
                feasibility = feasibility.max(yv);
            }
            let gn = if eff.c_n[[i, j]] > 0.0 {
                eff.c_n[[i, j]] / r[i]
            } else {
                0.0
            };
            let gb = if eff.c_b[[i, j]] > 0.0 {
                eff.c_b[[i, j]] / r[i]
            } else {
                0.0
            };
            if xv > eps {
                stationarity = stationarity.max((gn - lambda[j]).abs());
            } else {
                stationarity = stationarity.max((gn - lambda[j]).max(0.0));
            }
            if yv > eps {
                stationarity = stationarity.max((gb - nu[j]).abs());
            } else {
                stationarity = stationarity.max((gb - nu[j]).max(0.0));
            }
        }
        feasibility = feasibility.max(col_x - (1.0 - z)).max(col_y - z);
        complementarity = complementarity
            .max((lambda[j] * (col_x - (1.0 - z))).abs())
            .max((nu[j] * (col_y - z)).abs());
    }
    ResidualParts {
        stationarity,
        complementarity,
        feasibility,
    }
}

fn equal_split_init(eff: &EfficiencyMatrices, z: f64) -> (Array2<f64>, Array2<f64>) {
    let (n_u, n_b) = (eff.n_users(), eff.n_bs());
    let mut x = Array2::zeros((n_u, n_b));
    let mut y = Array2::zeros((n_u, n_b));
    for j in 0..n_b {
        let kx = (0..n_u).filter(|&i| eff.c_n[[i, j]] > 0.0).count();
        if kx > 0 && 1.0 - z > 0.0 {
            let share = (1.0 - z) / kx as f64;
            for i in 0..n_u {
                if eff.c_n[[i, j]] > 0.0 {
                    x[[i, j]] = share;
                }
            }
        }
        let ky = (0..n_u).filter(|&i| eff.c_b[[i, j]] > 0.0).count();
        if ky > 0 && z > 0.0 {
            let share = z / ky as f64;
            for i in 0..n_u {
                if eff.c_b[[i, j]] > 0.0 {
                    y[[i, j]] = share;
                }
            }
        }
    }
    (x, y)
}

fn random_init(eff: &EfficiencyMatrices, z: f64, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x, mut y) = equal_split_init(eff, z);
    let (n_u, n_b) = (eff.n_users(), eff.n_bs());
    // Random rescale per column, then blend with the equal split so every
    // user keeps a strictly positive rate.
    let perturb = |m: &mut Array2<f64>, rng: &mut ChaCha8Rng| {
        for j in 0..n_b {
            let mut weights = vec![0.0; n_u];
            let mut total = 0.0;
            let mut mass = 0.0;
            for i in 0..n_u {
                if m[[i, j]] > 0.0 {
                    weights[i] = -(1.0 - rng.gen::<f64>()).ln();
                    total += weights[i];
                    mass += m[[i, j]];
                }
            }
            if total > 0.0 {
                for i in 0..n_u {
                    if m[[i, j]] > 0.0 {
                        m[[i, j]] = 0.1 * m[[i, j]] + 0.9 * mass * weights[i] / total;
                    }
                }
            }
        }
    };
    perturb(&mut x, &mut rng);
    perturb(&mut y, &mut rng);
    (x, y)
}

/// One full cycle of exact block maximizations over all 2*N_B budgets.
fn sweep(eff: &EfficiencyMatrices, x: &mut Array2<f64>, y: &mut Array2<f64>, r: &mut [f64], z: f64) {
    let (n_u, n_b) = (eff.n_users(), eff.n_bs());
    let mut items: Vec<(usize, f64, f64)> = Vec::with_capacity(n_u);
    for (phase, budget) in [(0, 1.0 - z), (1, z)] {
        for j in 0..n_b {
            let (m, c): (&mut Array2<f64>, &Array2<f64>) = if phase == 0 {
                (&mut *x, &eff.c_n)
            } else {
                (&mut *y, &eff.c_b)
            };
            items.clear();
            for i in 0..n_u {
                let w = m[[i, j]];
                if w != 0.0 {
                    r[i] -= c[[i, j]] * w;
                    if r[i] < 0.0 {
                        r[i] = 0.0;
                    }
                    m[[i, j]] = 0.0;
                }
                let a = c[[i, j]];
                if a > 0.0 && budget > 0.0 {
                    items.push((i, a, r[i] / a));
                }
            }
            if items.is_empty() {
                continue;
            }
            let level = waterfill(&mut items, budget);
            for &(i, a, q) in items.iter() {
                let w = (level - q).max(0.0);
                if w > 0.0 {
                    m[[i, j]] = w;
                    r[i] += a * w;
                }
            }
        }
    }
}

fn log_utility(r: &[f64]) -> f64 {
    r.iter()
        .map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY })
        .sum()
}

/// Try x + theta*(x - px) (and likewise for y), projected back onto the
/// per-budget simplices; accept the largest step that improves utility.
fn extrapolate(
    eff: &EfficiencyMatrices,
    z: f64,
    x: &mut Array2<f64>,
    y: &mut Array2<f64>,
    r: &mut Vec<f64>,
    px: &Array2<f64>,
    py: &Array2<f64>,
) {
    let u0 = log_utility(r);
    if !u0.is_finite() {
        return;
    }
    let n_b = eff.n_bs();
    let mut buf = vec![0.0; eff.n_users()];
    for theta in [64.0, 16.0, 4.0] {
        let mut cx = &*x + &((&*x - px) * theta);
        let mut cy = &*y + &((&*y - py) * theta);
        for (m, budget) in [(&mut cx, 1.0 - z), (&mut cy, z)] {
            for j in 0..n_b {
                for (b, v) in buf.iter_mut().zip(m.column(j)) {
                    *b = *v;
                }
                project_column(&mut buf, budget);
                for (v, b) in m.column_mut(j).iter_mut().zip(&buf) {
                    *v = *b;
                }
            }
        }
        let cr = recompute_rates(eff, &cx, &cy);
        let uc = log_utility(&cr);
        if uc > u0 {
            *x = cx;
            *y = cy;
            *r = cr;
            return;
        }
    }
}

fn inner_solve(
    eff: &EfficiencyMatrices,
    z: f64,
    init: (Array2<f64>, Array2<f64>),
    opts: &SolveOptions,
    inner_tol: f64,
) -> Result<Inner> {
    let (mut x, mut y) = init;
    let mut r = recompute_rates(eff, &x, &y);
    let mut best_residual = f64::INFINITY;
    // Plain cyclic ascent zigzags geometrically when users are shared between
    // budgets; periodic extrapolation along the iterate displacement (kept
    // only when it improves utility, so ascent stays monotone) collapses that
    // tail.
    let mut anchor: Option<(Array2<f64>, Array2<f64>)> = None;
    for k in 1..=opts.max_iters {
        sweep(eff, &mut x, &mut y, &mut r, z);
        // Refresh against incremental drift before certifying.
        r = recompute_rates(eff, &x, &y);
        if k % 8 == 0 {
            if let Some((px, py)) = anchor.take() {
                extrapolate(eff, z, &mut x, &mut y, &mut r, &px, &py);
            }
            anchor = Some((x.clone(), y.clone()));
        }
        let (lambda, nu) = dual_estimates(eff, &r);
        let alloc = Allocation {
            x: x.clone(),
            y: y.clone(),
            z,
        };
        let parts = residual_parts(eff, &alloc, &lambda, &nu, &r, opts.epsilon_active);
        let max_res = parts
            .stationarity
            .max(parts.complementarity)
            .max(parts.feasibility);
        best_residual = best_residual.min(max_res);
        if max_res <= inner_tol {
            return Ok(Inner {
                x,
                y,
                lambda,
                nu,
                stationarity: parts.stationarity,
                complementarity: parts.complementarity,
                feasibility: parts.feasibility,
            });
        }
    }
    Err(Error::NoConvergence {
        iters: opts.max_iters,
        residual: best_residual,
    })
}

fn check_feasible_at_z(eff: &EfficiencyMatrices, z: f64) -> Result<()> {
    for i in 0..eff.n_users() {
        let has_n = (0..eff.n_bs()).any(|j| eff.c_n[[i, j]] > 0.0);
        let has_b = (0..eff.n_bs()).any(|j| eff.c_b[[i, j]] > 0.0);
        let ok = (has_n && z < 1.0) || (has_b && z > 0.0);
        if !ok {
            return Err(Error::InfeasibleUser { user: i });
        }
    }
    Ok(())
}

fn init_for(eff: &EfficiencyMatrices, z: f64, opts: &SolveOptions) -> (Array2<f64>, Array2<f64>) {
    match opts.random_init_seed {
        Some(seed) => random_init(eff, z, seed),
        None => equal_split_init(eff, z),
    }
}

/// Maximize over (x, y) at fixed blank fraction `z`.
pub fn solve_fixed_z(
    eff: &EfficiencyMatrices,
    z: f64,
    opts: &SolveOptions,
) -> Result<(Allocation, KktCertificate)> {
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::InvalidConfig(format!("z = {z} outside [0,1]")));
    }
    check_feasible_at_z(eff, z)?;
    let inner = inner_solve(eff, z, init_for(eff, z, opts), opts, opts.kkt_tol)?;
    let alloc = Allocation {
        x: inner.x,
        y: inner.y,
        z,
    };
    let cert = KktCertificate {
        lambda: inner.lambda,
        nu: inner.nu,
        stationarity_residual: inner.stationarity,
        complementarity_residual: inner.complementarity,
        feasibility_residual: inner.feasibility,
        // z was held fixed, not optimized.
        z_stationarity_residual: 0.0,
        z_unconstrained: false,
    };
    Ok((alloc, cert))
}

/// Maximize jointly over (x, y, z). The certificate covers all four residual
/// classes; z-stationarity sum(lambda) = sum(nu) is enforced for interior z.
pub fn solve_joint(
    eff: &EfficiencyMatrices,
    opts: &SolveOptions,
) -> Result<(Allocation, KktCertificate)> {
    let n_b = eff.n_bs();
    let n_u = eff.n_users();
    for i in 0..n_u {
        if (0..n_b).all(|j| eff.c_n[[i, j]] <= 0.0 && eff.c_b[[i, j]] <= 0.0) {
            return Err(Error::InfeasibleUser { user: i });
        }
    }
    let blank_usable = (0..n_b).any(|j| (0..n_u).any(|i| eff.c_b[[i, j]] > 0.0));
    if !blank_usable {
        // Blank resource is pure waste (e.g. macro-only network): pin z = 0.
        return solve_fixed_z(eff, 0.0, opts);
    }
    let no_macro = eff.is_macro.iter().all(|&m| !m);
    if no_macro {
        // Blanking removes nothing, so c_b == c_n and the utility is flat in
        // z: report z as unconstrained.
        let (alloc, mut cert) = solve_fixed_z(eff, 0.5, opts)?;
        cert.z_unconstrained = true;
        return Ok((alloc, cert));
    }

    // Inner solves need duals accurate enough that the summed gap
    // sum(nu) - sum(lambda) is trustworthy at kkt_tol resolution.
    let inner_tol = (opts.kkt_tol / (2.0 * (n_b as f64 + 1.0))).max(1e-10);
    let mut warm: Option<(Array2<f64>, Array2<f64>, f64)> = None;

    let eval = |z: f64, warm: &mut Option<(Array2<f64>, Array2<f64>, f64)>| -> Result<(Inner, f64)> {
        let init = match warm.take() {
            Some((mut x, mut y, z_prev)) => {
                let sx = if 1.0 - z_prev > 1e-12 {
                    (1.0 - z) / (1.0 - z_prev)
                } else {
                    0.0
                };
                let sy = if z_prev > 1e-12 { z / z_prev } else { 0.0 };
                if sx > 0.0 && (sy > 0.0 || z == 0.0) {
                    x.mapv_inplace(|v| v * sx);
                    y.mapv_inplace(|v| v * sy.max(0.0));
                    (x, y)
                } else {
                    init_for(eff, z, opts)
                }
            }
            None => init_for(eff, z, opts),
        };
        let inner = inner_solve(eff, z, init, opts, inner_tol)?;
        let gap: f64 = inner.nu.iter().sum::<f64>() - inner.lambda.iter().sum::<f64>();
        *warm = Some((inner.x.clone(), inner.y.clone(), z));
        Ok((inner, gap))
    };

    let finalize = |inner: Inner, z: f64| -> (Allocation, KktCertificate) {
        let alloc = Allocation {
            x: inner.x,
            y: inner.y,
            z,
        };
        let interior = z > 1e-9 && z < 1.0 - 1e-9;
        let gap = inner.nu.iter().sum::<f64>() - inner.lambda.iter().sum::<f64>();
        let cert = KktCertificate {
            lambda: inner.lambda,
            nu: inner.nu,
            stationarity_residual: inner.stationarity,
            complementarity_residual: inner.complementarity,
            feasibility_residual: inner.feasibility,
            z_stationarity_residual: if interior { gap.abs() } else { 0.0 },
            z_unconstrained: false,
        };
        (alloc, cert)
    };

    let gap_tol = 0.9 * opts.kkt_tol;

    let (inner0, g0) = eval(0.0, &mut warm)?;
    if g0 <= 0.0 {
        return Ok(finalize(inner0, 0.0));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let z1_feasible = (0..n_u).all(|i| (0..n_b).any(|j| eff.c_b[[i, j]] > 0.0));
    if z1_feasible {
        let (inner1, g1) = eval(1.0, &mut warm)?;
        if g1 >= 0.0 {
            return Ok(finalize(inner1, 1.0));
        }
    }
    let mut last: Option<(Inner, f64)> = None;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (inner, g) = eval(mid, &mut warm)?;
        if g.abs() <= gap_tol {
            return Ok(finalize(inner, mid));
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        last = Some((inner, mid));
        if hi - lo < 1e-14 {
            break;
        }
    }
    let (inner, z) = last.expect("bisection ran at least once");
    Ok(finalize(inner, z))
}

/// Residual measures for an arbitrary (allocation, duals) pair; used both by
/// the solver and by offline validation of stored solutions.
pub fn kkt_residual(
    eff: &EfficiencyMatrices,
    alloc: &Allocation,
    lambda: &[f64],
    nu: &[f64],
    eps: f64,
) -> KktCertificate {
    let r = recompute_rates(eff, &alloc.x, &alloc.y);
    let parts = residual_parts(eff, alloc, lambda, nu, &r, eps);
    let interior = alloc.z > eps && alloc.z < 1.0 - eps;
    let gap: f64 = nu.iter().sum::<f64>() - lambda.iter().sum::<f64>();
    KktCertificate {
        lambda: lambda.to_vec(),
        nu: nu.to_vec(),
        stationarity_residual: parts.stationarity,
        complementarity_residual: parts.complementarity,
        feasibility_residual: parts.feasibility,
        z_stationarity_residual: if interior { gap.abs() } else { 0.0 },
        z_unconstrained: false,
    }
}

// ---------------------------------------------------------------------------
// Independent oracle (projected gradient over a z grid)
// ---------------------------------------------------------------------------

/// Euclidean projection of one column onto { w >= 0, sum w <= budget }.
fn project_column(v: &mut [f64], budget: f64) {
    if budget <= 0.0 {
        v.iter_mut().for_each(|w| *w = 0.0);
        return;
    }
    let clipped_sum: f64 = v.iter().map(|&w| w.max(0.0)).sum();
    if clipped_sum <= budget {
        v.iter_mut().for_each(|w| *w = w.max(0.0));
        return;
    }
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        cum += s;
        let t = (cum - budget) / (k + 1) as f64;
        if k + 1 == sorted.len() || t >= sorted[k + 1] {
            tau = t;
            break;
        }
    }
    v.iter_mut().for_each(|w| *w = (*w - tau).max(0.0));
}

fn oracle_utility_at(eff: &EfficiencyMatrices, z: f64, seed: u64) -> f64 {
    let (n_u, n_b) = (eff.n_users(), eff.n_bs());
    let mut best = f64::NEG_INFINITY;
    let starts = 3;
    for s in 0..starts {
        let (mut x, mut y) = if s == 0 {
            equal_split_init(eff, z)
        } else {
            random_init(eff, z, seed.wrapping_add(s as u64))
        };
        let mut u_cur = {
            let r = recompute_rates(eff, &x, &y);
            utility(&RateVector(r))
        };
        if u_cur == f64::NEG_INFINITY {
            continue;
        }
        let mut step = 1.0;
        let mut stall = 0;
        for _ in 0..50_000 {
            let r = recompute_rates(eff, &x, &y);
            // Ascent direction: d obj / d x_ij = c / R_i.
            let mut gx = Array2::zeros((n_u, n_b));
            let mut gy = Array2::zeros((n_u, n_b));
            for i in 0..n_u {
                for j in 0..n_b {
                    if eff.c_n[[i, j]] > 0.0 {
                        gx[[i, j]] = eff.c_n[[i, j]] / r[i];
                    }
                    if eff.c_b[[i, j]] > 0.0 {
                        gy[[i, j]] = eff.c_b[[i, j]] / r[i];
                    }
                }
            }
            let mut accepted = false;
            for _ in 0..60 {
                let mut xt = &x + &(step * &gx);
                let mut yt = &y + &(step * &gy);
                for j in 0..n_b {
                    let mut col: Vec<f64> = (0..n_u).map(|i| xt[[i, j]]).collect();
                    project_column(&mut col, 1.0 - z);
                    for i in 0..n_u {
                        xt[[i, j]] = col[i];
                    }
                    let mut col: Vec<f64> = (0..n_u)
                        .map(|i| if eff.c_b[[i, j]] > 0.0 { yt[[i, j]] } else { 0.0 })
                        .collect();
                    project_column(&mut col, z);
                    for i in 0..n_u {
                        yt[[i, j]] = col[i];
                    }
                }
                let u_new = utility(&RateVector(recompute_rates(eff, &xt, &yt)));
                if u_new > u_cur {
                    let gain = u_new - u_cur;
                    x = xt;
                    y = yt;
                    u_cur = u_new;
                    step *= 1.5;
                    accepted = true;
                    if gain < 1e-13 * (1.0 + u_cur.abs()) {
                        stall += 1;
                    } else {
                        stall = 0;
                    }
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                stall += 1;
            }
            if stall > 25 {
                break;
            }
        }
        best = best.max(u_cur);
    }
    best
}

/// Exhaustive reference: uniform z grid, projected-gradient inner ascent run
/// to tight tolerance from multiple starts. Restricted to tiny instances.
pub fn brute_force_oracle(eff: &EfficiencyMatrices, grid_steps: usize) -> Result<f64> {
    let (n_u, n_b) = (eff.n_users(), eff.n_bs());
    if n_u * n_b > 12 {
        return Err(Error::InstanceTooLarge {
            n_users: n_u,
            n_bs: n_b,
        });
    }
    if grid_steps == 0 {
        return Err(Error::InvalidConfig("grid_steps must be >= 1".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for k in 0..=grid_steps {
        let z = k as f64 / grid_steps as f64;
        if check_feasible_at_z(eff, z).is_err() {
            continue;
        }
        best = best.max(oracle_utility_at(eff, z, 0x9e3779b97f4a7c15 ^ k as u64));
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Concavity audit and feasible-point sampling
// ---------------------------------------------------------------------------

/// Random strictly feasible point with every supported user given mass.
pub fn random_feasible_allocation(eff: &EfficiencyMatrices, rng: &mut impl Rng) -> Allocation {
    let (n_u, n_b) = (eff.n_users(), eff.n_bs());
    let z = 0.05 + 0.9 * rng.gen::<f64>();
    let mut x = Array2::zeros((n_u, n_b));
    let mut y = Array2::zeros((n_u, n_b));
    fn fill(
        m: &mut Array2<f64>,
        c: &Array2<f64>,
        budget: f64,
        rng: &mut impl Rng,
    ) {
        let (n_u, n_b) = m.dim();
        for j in 0..n_b {
            let supported: Vec<usize> = (0..n_u).filter(|&i| c[[i, j]] > 0.0).collect();
            if supported.is_empty() || budget <= 0.0 {
                continue;
            }
            let draws: Vec<f64> = supported
                .iter()
                .map(|_| -(1.0 - rng.gen::<f64>()).ln())
                .collect();
            let total: f64 = draws.iter().sum();
            let used = budget * (0.3 + 0.7 * rng.gen::<f64>());
            for (&i, &d) in supported.iter().zip(&draws) {
                m[[i, j]] = used * d / total;
            }
        }
    }
    fill(&mut x, &eff.c_n, 1.0 - z, rng);
    fill(&mut y, &eff.c_b, z, rng);
    Allocation { x, y, z }
}

/// Midpoint-concavity audit of the objective over explicit feasible pairs.
/// Returns the index of the first violating pair, if any.
pub fn check_concavity(
    eff: &EfficiencyMatrices,
    pairs: &[(Allocation, Allocation)],
    tol: f64,
) -> Option<usize> {
    for (idx, (a, b)) in pairs.iter().enumerate() {
        let ua = utility(&rates(a, eff));
        let ub = utility(&rates(b, eff));
        if !ua.is_finite() || !ub.is_finite() {
            continue;
        }
        let mid = Allocation {
            x: (&a.x + &b.x) * 0.5,
            y: (&a.y + &b.y) * 0.5,
            z: 0.5 * (a.z + b.z),
        };
        let um = utility(&rates(&mid, eff));
        if um < 0.5 * (ua + ub) - tol {
            return Some(idx);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn opts() -> SolveOptions {
        SolveOptions::default()
    }

    /// 1 pico serving 2 identical users, no macro interference.
    fn symmetric_pico(c: f64) -> EfficiencyMatrices {
        EfficiencyMatrices {
            c_n: arr2(&[[c], [c]]),
            c_b: arr2(&[[c], [c]]),
            is_macro: vec![false],
        }
    }

    fn macro_only(k: usize) -> EfficiencyMatrices {
        let c_n = Array2::from_shape_fn((k, 1), |(i, _)| 1.0 + i as f64 * 0.3);
        EfficiencyMatrices {
            c_b: Array2::zeros((k, 1)),
            c_n,
            is_macro: vec![true],
        }
    }

    fn random_eff(n_u: usize, n_b: usize, n_macro: usize, seed: u64) -> EfficiencyMatrices {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c_n = Array2::from_shape_fn((n_u, n_b), |_| 0.2 + 4.0 * rng.gen::<f64>());
        let mut c_b = Array2::zeros((n_u, n_b));
        let is_macro: Vec<bool> = (0..n_b).map(|j| j < n_macro).collect();
        for i in 0..n_u {
            for j in 0..n_b {
                c_b[[i, j]] = if is_macro[j] {
                    0.0
                } else {
                    c_n[[i, j]] * (1.0 + 2.0 * rng.gen::<f64>())
                };
            }
        }
        EfficiencyMatrices { c_n, c_b, is_macro }
    }

    #[test]
    fn rates_equal_share_single_bs() {
        let eff = macro_only(4);
        let mut x = Array2::zeros((4, 1));
        x.fill(0.25);
        let alloc = Allocation {
            x,
            y: Array2::zeros((4, 1)),
            z: 0.0,
        };
        let r = rates(&alloc, &eff);
        for i in 0..4 {
            assert!((r.0[i] - eff.c_n[[i, 0]] / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rates_zero_allocation() {
        let eff = macro_only(3);
        let alloc = Allocation {
            x: Array2::zeros((3, 1)),
            y: Array2::zeros((3, 1)),
            z: 0.0,
        };
        assert!(rates(&alloc, &eff).0.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn rates_blank_only_pico_user() {
        let eff = symmetric_pico(2.0);
        let z = 0.4;
        let mut y = Array2::zeros((2, 1));
        y[[0, 0]] = z;
        let alloc = Allocation {
            x: Array2::zeros((2, 1)),
            y,
            z,
        };
        let r = rates(&alloc, &eff);
        assert!((r.0[0] - z * 2.0).abs() < 1e-15);
        assert_eq!(r.0[1], 0.0);
    }

    #[test]
    fn utility_reference_values() {
        assert_eq!(utility(&RateVector(vec![1.0, 1.0, 1.0])), 0.0);
        let e = std::f64::consts::E;
        assert!((utility(&RateVector(vec![e, e])) - 2.0).abs() < 1e-12);
        assert_eq!(utility(&RateVector(vec![1.0, 0.0])), f64::NEG_INFINITY);
        let u1 = utility(&RateVector(vec![1.5, 2.5, 0.7]));
        let u2 = utility(&RateVector(vec![3.0, 5.0, 1.4]));
        assert!((u2 - u1 - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fixed_z_symmetric_split() {
        let eff = symmetric_pico(2.0);
        let (alloc, cert) = solve_fixed_z(&eff, 0.5, &opts()).unwrap();
        assert!(cert.max_residual() <= 1e-6);
        for i in 0..2 {
            assert!((alloc.x[[i, 0]] - 0.25).abs() < 1e-6);
            assert!((alloc.y[[i, 0]] - 0.25).abs() < 1e-6);
        }
        let r = rates(&alloc, &eff);
        assert!((r.0[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fixed_z_macro_proportional_fair() {
        let eff = macro_only(5);
        let (alloc, cert) = solve_fixed_z(&eff, 0.0, &opts()).unwrap();
        assert!(cert.max_residual() <= 1e-6);
        for i in 0..5 {
            assert!((alloc.x[[i, 0]] - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn fixed_z_matches_oracle_small() {
        let eff = random_eff(3, 2, 1, 99);
        let (alloc, cert) = solve_fixed_z(&eff, 0.37, &opts()).unwrap();
        assert!(cert.max_residual() <= 1e-6);
        let u = utility(&rates(&alloc, &eff));
        let o = oracle_utility_at(&eff, 0.37, 5);
        assert!(u >= o - 1e-4, "solver {u} vs oracle {o}");
    }

    #[test]
    fn joint_macro_only_pins_z_zero() {
        let eff = macro_only(4);
        let (alloc, cert) = solve_joint(&eff, &opts()).unwrap();
        assert_eq!(alloc.z, 0.0);
        assert!(cert.max_residual() <= 1e-6);
        assert!(!cert.z_unconstrained);
    }

    #[test]
    fn joint_no_macro_reports_unconstrained_z() {
        let eff = symmetric_pico(3.0);
        let (alloc, cert) = solve_joint(&eff, &opts()).unwrap();
        assert!(cert.z_unconstrained);
        // Equal total share of 1/2 each regardless of z.
        let r = rates(&alloc, &eff);
        for i in 0..2 {
            assert!((r.0[i] - 1.5).abs() < 1e-6);
        }
    }

    #[test]
    fn joint_matches_oracle_macro_pico() {
        // 1 macro + 1 pico + 4 users, fixed small efficiencies.
        let eff = EfficiencyMatrices {
            c_n: arr2(&[[3.0, 0.4], [2.5, 0.9], [1.2, 0.7], [4.0, 0.2]]),
            c_b: arr2(&[[0.0, 1.9], [0.0, 2.8], [0.0, 2.2], [0.0, 1.1]]),
            is_macro: vec![true, false],
        };
        let (alloc, cert) = solve_joint(&eff, &opts()).unwrap();
        assert!(cert.max_residual() <= 1e-6, "residual {}", cert.max_residual());
        let u = utility(&rates(&alloc, &eff));
        let o = brute_force_oracle(&eff, 64).unwrap();
        assert!(u >= o - 1e-4, "solver {u} vs oracle {o}");
    }

    #[test]
    fn kkt_residual_zero_on_hand_built_optimum() {
        let eff = symmetric_pico(2.0);
        let mut x = Array2::zeros((2, 1));
        x.fill(0.25);
        let mut y = Array2::zeros((2, 1));
        y.fill(0.25);
        let alloc = Allocation { x, y, z: 0.5 };
        // R_i = 1, lambda = nu = c / R = 2.
        let cert = kkt_residual(&eff, &alloc, &[2.0], &[2.0], 1e-6);
        assert!(cert.max_residual() < 1e-12);
    }

    #[test]
    fn kkt_residual_detects_perturbation() {
        let eff = symmetric_pico(2.0);
        let mut x = Array2::zeros((2, 1));
        x.fill(0.25);
        x[[0, 0]] += 0.1;
        let mut y = Array2::zeros((2, 1));
        y.fill(0.25);
        let alloc = Allocation { x, y, z: 0.5 };
        let cert = kkt_residual(&eff, &alloc, &[2.0], &[2.0], 1e-6);
        assert!(cert.feasibility_residual > 1e-3 || cert.stationarity_residual > 1e-3);
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let eff = random_eff(5, 3, 1, 1);
        assert!(matches!(
            brute_force_oracle(&eff, 8),
            Err(Error::InstanceTooLarge { .. })
        ));
    }

    #[test]
    fn oracle_grid_refinement_monotone() {
        let eff = random_eff(4, 2, 1, 3);
        let coarse = brute_force_oracle(&eff, 16).unwrap();
        let fine = brute_force_oracle(&eff, 32).unwrap();
        // The fine grid is a superset of the coarse one; allow ascent slack.
        assert!(fine >= coarse - 1e-7, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn concavity_holds_on_random_pairs() {
        let eff = random_eff(6, 3, 1, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<_> = (0..200)
            .map(|_| {
                (
                    random_feasible_allocation(&eff, &mut rng),
                    random_feasible_allocation(&eff, &mut rng),
                )
            })
            .collect();
        assert_eq!(check_concavity(&eff, &pairs, 1e-9), None);
    }

    #[test]
    fn concavity_equality_on_identical_pair() {
        let eff = random_eff(4, 2, 1, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_feasible_allocation(&eff, &mut rng);
        let pairs = vec![(a.clone(), a)];
        assert_eq!(check_concavity(&eff, &pairs, 1e-12), None);
    }

    #[test]
    fn utility_invariant_under_relabeling() {
        let eff = random_eff(5, 3, 1, 21);
        let (alloc, _) = solve_joint(&eff, &opts()).unwrap();
        let u = utility(&rates(&alloc, &eff));

        // Permute users and BSs, re-solve, compare utilities.
        let up: Vec<usize> = vec![3, 0, 4, 1, 2];
        let bp: Vec<usize> = vec![0, 2, 1]; // keep macro first
        let perm =
            |m: &Array2<f64>| Array2::from_shape_fn(m.dim(), |(i, j)| m[[up[i], bp[j]]]);
        let eff_p = EfficiencyMatrices {
            c_n: perm(&eff.c_n),
            c_b: perm(&eff.c_b),
            is_macro: bp.iter().map(|&j| eff.is_macro[j]).collect(),
        };
        let (alloc_p, _) = solve_joint(&eff_p, &opts()).unwrap();
        let u_p = utility(&rates(&alloc_p, &eff_p));
        assert!((u - u_p).abs() < 1e-6, "{u} vs {u_p}");
    }

    #[test]
    fn infeasible_user_reported_by_name() {
        let eff = EfficiencyMatrices {
            c_n: arr2(&[[1.0], [0.0]]),
            c_b: arr2(&[[0.0], [0.0]]),
            is_macro: vec![true],
        };
        match solve_joint(&eff, &opts()) {
            Err(Error::InfeasibleUser { user }) => assert_eq!(user, 1),
            other => panic!("expected InfeasibleUser, got {other:?}"),
        }
    }
}
