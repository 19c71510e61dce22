//! Experiment orchestration: seeded Monte-Carlo drops across schemes and
//! density sweeps, CSV outputs, solution dumps, and offline validation of
//! stored solutions.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{build_graph, extract_association, baseline_scheme, Scheme};
use crate::channel::{build_gain_matrix, build_sinr_matrices, efficiency_from_sinr, EfficiencyMatrices};
use crate::error::{Error, Result};
use crate::metrics::{edge_gain, load_share, mean_stderr, percentile_throughput, rate_cdf, TrialResult};
use crate::optimizer::{kkt_residual, rates, solve_joint, utility, Allocation, KktCertificate, SolveOptions};
use crate::scenario::{build_deployment, NetworkConfig, Tier};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub kkt_tol: f64,
    pub max_iters: usize,
    pub epsilon_active: f64,
    pub z_grid: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = SolveOptions::default();
        SolverConfig {
            kkt_tol: o.kkt_tol,
            max_iters: o.max_iters,
            epsilon_active: o.epsilon_active,
            z_grid: o.z_grid,
        }
    }
}

impl SolverConfig {
    pub fn to_options(&self) -> SolveOptions {
        SolveOptions {
            kkt_tol: self.kkt_tol,
            max_iters: self.max_iters,
            epsilon_active: self.epsilon_active,
            z_grid: self.z_grid,
            random_init_seed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    /// One of: pico_density, femto_density, macro_density, user_density.
    pub parameter: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub trials: usize,
    pub schemes: Vec<String>,
    pub network: NetworkConfig,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Fixed z for the max-SINR-with-BR baselines; omitted means "use the
    /// joint optimum of the same instance".
    #[serde(default)]
    pub baseline_z: Option<f64>,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn parsed_schemes(&self) -> Result<Vec<Scheme>> {
        self.schemes.iter().map(|s| s.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be >= 1".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::InvalidConfig("at least one scheme required".into()));
        }
        self.parsed_schemes()?;
        self.network.validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::InvalidConfig("sweep.values must be non-empty".into()));
            }
            for &v in &sweep.values {
                apply_sweep(&self.network, &sweep.parameter, v)?.validate()?;
            }
        }
        if let Some(z) = self.baseline_z {
            if !(0.0..=1.0).contains(&z) {
                return Err(Error::InvalidConfig("baseline_z must be in [0,1]".into()));
            }
        }
        Ok(())
    }
}

pub fn apply_sweep(base: &NetworkConfig, parameter: &str, value: f64) -> Result<NetworkConfig> {
    let mut cfg = base.clone();
    match parameter {
        "macro_density" => cfg.tier_densities[0] = value,
        "pico_density" => cfg.tier_densities[1] = value,
        "femto_density" => cfg.tier_densities[2] = value,
        "user_density" => cfg.user_density = value,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown sweep parameter `{other}`"
            )))
        }
    }
    Ok(cfg)
}

/// Counter-based per-trial seed derivation: trial (p, t) gets the same
/// stream regardless of execution order or parallelism.
pub fn trial_seed(master: u64, point: usize, trial: usize) -> u64 {
    let mut s = master
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(1 + point as u64))
        .wrapping_add(0xbf58476d1ce4e5b9u64.wrapping_mul(1 + trial as u64));
    // splitmix64 finalizer
    s ^= s >> 30;
    s = s.wrapping_mul(0xbf58476d1ce4e5b9);
    s ^= s >> 27;
    s = s.wrapping_mul(0x94d049bb133111eb);
    s ^ (s >> 31)
}

struct TrialOutput {
    results: Vec<TrialResult>,
    dump: Option<DumpData>,
}

/// Everything needed to re-certify a stored solution offline.
pub struct DumpData {
    pub eff: EfficiencyMatrices,
    pub alloc: Allocation,
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
    pub kkt_tol: f64,
    pub epsilon_active: f64,
}

fn run_trial(
    spec: &ExperimentSpec,
    cfg: &NetworkConfig,
    schemes: &[Scheme],
    seed: u64,
    want_dump: bool,
) -> Result<TrialOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dep = build_deployment(cfg, &mut rng)?;
    let gains = build_gain_matrix(&dep, cfg.fading, cfg.path_loss_exponent, &mut rng);
    let sinr = build_sinr_matrices(&dep, &gains, cfg.noise_power_w);
    let eff = efficiency_from_sinr(&sinr, dep.macro_mask())?;
    let opts = spec.solver.to_options();

    let needs_joint = schemes.contains(&Scheme::JointBr)
        || (spec.baseline_z.is_none()
            && schemes
                .iter()
                .any(|s| matches!(s, Scheme::MaxSinrWithBr | Scheme::MaxSinrNormalWithBr)));
    let joint: Option<(Allocation, KktCertificate)> = if needs_joint {
        Some(solve_joint(&eff, &opts)?)
    } else {
        None
    };
    let baseline_z = spec
        .baseline_z
        .or_else(|| joint.as_ref().map(|(a, _)| a.z))
        .unwrap_or(0.0);

    let mut results = Vec::with_capacity(schemes.len());
    for &scheme in schemes {
        let alloc = match scheme {
            Scheme::JointBr => joint.as_ref().expect("joint solved").0.clone(),
            other => baseline_scheme(&eff, &sinr, other, baseline_z, &opts)?.0,
        };
        let rv = rates(&alloc, &eff);
        let report = extract_association(&alloc, opts.epsilon_active);
        results.push(TrialResult {
            scheme,
            utility: utility(&rv),
            z: alloc.z,
            load: load_share(&alloc, &dep),
            fractional_normal: report.fractional_normal,
            fractional_blank: report.fractional_blank,
            rates: rv.0,
        });
    }
    let dump = if want_dump {
        joint.as_ref().map(|(alloc, cert)| DumpData {
            eff: eff.clone(),
            alloc: alloc.clone(),
            lambda: cert.lambda.clone(),
            nu: cert.nu.clone(),
            kkt_tol: opts.kkt_tol,
            epsilon_active: opts.epsilon_active,
        })
    } else {
        None
    };
    Ok(TrialOutput { results, dump })
}

#[derive(Debug, Serialize)]
struct Manifest {
    version: String,
    master_seed: u64,
    config_hash: String,
    kkt_tol: f64,
    max_iters: usize,
    epsilon_active: f64,
    trials_per_point: usize,
    sweep_points: usize,
    total_trials: usize,
    failed_trials: usize,
    failures: Vec<String>,
    wall_time_s: f64,
}

#[derive(Debug)]
pub struct RunSummary {
    pub total_trials: usize,
    pub failed_trials: usize,
    pub out_dir: std::path::PathBuf,
}

impl RunSummary {
    /// More than 10% failed trials is a run-level failure.
    pub fn excess_failures(&self) -> bool {
        self.failed_trials * 10 > self.total_trials
    }
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Execute the full experiment grid and persist CSVs, dumps, and a manifest.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<RunSummary> {
    let started = Instant::now();
    spec.validate()?;
    let schemes = spec.parsed_schemes()?;
    let master = seed_override.unwrap_or(spec.network.rng_seed);
    let points: Vec<(f64, NetworkConfig)> = match &spec.sweep {
        Some(sweep) => sweep
            .values
            .iter()
            .map(|&v| Ok((v, apply_sweep(&spec.network, &sweep.parameter, v)?)))
            .collect::<Result<_>>()?,
        None => vec![(0.0, spec.network.clone())],
    };
    fs::create_dir_all(out_dir)?;
    fs::create_dir_all(out_dir.join("dumps"))?;

    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..spec.trials).map(move |t| (p, t)))
        .collect();
    let outputs: Vec<(usize, usize, Result<TrialOutput>)> = jobs
        .into_par_iter()
        .map(|(p, t)| {
            let out = run_trial(
                spec,
                &points[p].1,
                &schemes,
                trial_seed(master, p, t),
                t == 0,
            );
            (p, t, out)
        })
        .collect();

    // Deterministic order regardless of worker scheduling.
    let mut ordered: BTreeMap<(usize, usize), Result<TrialOutput>> = BTreeMap::new();
    for (p, t, out) in outputs {
        ordered.insert((p, t), out);
    }

    let mut failures = Vec::new();
    let mut per_point: Vec<Vec<TrialOutput>> = (0..points.len()).map(|_| Vec::new()).collect();
    for ((p, t), out) in ordered {
        match out {
            Ok(output) => per_point[p].push(output),
            Err(e) => failures.push(format!("point {p} trial {t}: {e}")),
        }
    }

    write_csvs(&schemes, &points, &per_point, out_dir)?;
    for (p, trials) in per_point.iter().enumerate() {
        if let Some(dump) = trials.first().and_then(|t| t.dump.as_ref()) {
            let file = fs::File::create(out_dir.join("dumps").join(format!("point{p}.dump")))?;
            write_dump(dump, BufWriter::new(file))?;
        }
    }

    let total_trials = points.len() * spec.trials;
    let failed_trials = failures.len();
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: master,
        config_hash: format!(
            "{:016x}",
            fnv64(
                toml::to_string(spec)
                    .map_err(|e| Error::Toml(e.to_string()))?
                    .as_bytes()
            )
        ),
        kkt_tol: spec.solver.kkt_tol,
        max_iters: spec.solver.max_iters,
        epsilon_active: spec.solver.epsilon_active,
        trials_per_point: spec.trials,
        sweep_points: points.len(),
        total_trials,
        failed_trials,
        failures,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    fs::write(
        out_dir.join("manifest.toml"),
        toml::to_string(&manifest).map_err(|e| Error::Toml(e.to_string()))?,
    )?;
    Ok(RunSummary {
        total_trials,
        failed_trials,
        out_dir: out_dir.to_path_buf(),
    })
}

fn scheme_results<'a>(trials: &'a [TrialOutput], scheme: Scheme) -> Vec<&'a TrialResult> {
    trials
        .iter()
        .flat_map(|t| t.results.iter().filter(move |r| r.scheme == scheme))
        .collect()
}

fn write_csvs(
    schemes: &[Scheme],
    points: &[(f64, NetworkConfig)],
    per_point: &[Vec<TrialOutput>],
    out_dir: &Path,
) -> Result<()> {
    // cdf.csv: empirical rate CDF per sweep point and scheme, pooled trials.
    let mut cdf = BufWriter::new(fs::File::create(out_dir.join("cdf.csv"))?);
    writeln!(cdf, "sweep_value,scheme,rate,cdf")?;
    for (p, (value, _)) in points.iter().enumerate() {
        let max_rate = per_point[p]
            .iter()
            .flat_map(|t| t.results.iter())
            .flat_map(|r| r.rates.iter().copied())
            .fold(0.0f64, f64::max);
        if max_rate <= 0.0 {
            continue;
        }
        let grid: Vec<f64> = (0..=200).map(|k| max_rate * k as f64 / 200.0).collect();
        for &scheme in schemes {
            let pooled: Vec<f64> = scheme_results(&per_point[p], scheme)
                .iter()
                .flat_map(|r| r.rates.iter().copied())
                .collect();
            if pooled.is_empty() {
                continue;
            }
            let f = rate_cdf(&pooled, &grid)?;
            for (g, v) in grid.iter().zip(f) {
                writeln!(cdf, "{value},{},{g},{v}", scheme.name())?;
            }
        }
    }

    // z.csv: joint-optimal blank fraction statistics.
    if schemes.contains(&Scheme::JointBr) {
        let mut zf = BufWriter::new(fs::File::create(out_dir.join("z.csv"))?);
        writeln!(zf, "sweep_value,mean_z,stderr")?;
        for (p, (value, _)) in points.iter().enumerate() {
            let zs: Vec<f64> = scheme_results(&per_point[p], Scheme::JointBr)
                .iter()
                .map(|r| r.z)
                .collect();
            if zs.is_empty() {
                continue;
            }
            let (m, s) = mean_stderr(&zs);
            writeln!(zf, "{value},{m},{s}")?;
        }
    }

    // gains.csv: worst-10% gain of joint BR over the no-BR optimum.
    if schemes.contains(&Scheme::JointBr) && schemes.contains(&Scheme::LoadAwareNoBr) {
        let mut gf = BufWriter::new(fs::File::create(out_dir.join("gains.csv"))?);
        writeln!(gf, "sweep_value,mean_gain,stderr")?;
        for (p, (value, _)) in points.iter().enumerate() {
            let mut gains = Vec::new();
            for trial in &per_point[p] {
                let joint = trial.results.iter().find(|r| r.scheme == Scheme::JointBr);
                let base = trial
                    .results
                    .iter()
                    .find(|r| r.scheme == Scheme::LoadAwareNoBr);
                if let (Some(a), Some(n)) = (joint, base) {
                    let ta = percentile_throughput(&a.rates, 0.1);
                    let tn = percentile_throughput(&n.rates, 0.1);
                    if tn > 0.0 {
                        gains.push(edge_gain(ta, tn)?);
                    }
                }
            }
            if gains.is_empty() {
                continue;
            }
            let (m, s) = mean_stderr(&gains);
            writeln!(gf, "{value},{m},{s}")?;
        }
    }

    // load.csv: per-tier per-phase mean user share.
    let mut lf = BufWriter::new(fs::File::create(out_dir.join("load.csv"))?);
    writeln!(lf, "sweep_value,scheme,tier,phase,share")?;
    for (p, (value, _)) in points.iter().enumerate() {
        for &scheme in schemes {
            let results = scheme_results(&per_point[p], scheme);
            if results.is_empty() {
                continue;
            }
            for tier in Tier::ALL {
                for (phase, pick) in [
                    ("normal", 0usize),
                    ("blank", 1usize),
                ] {
                    let shares: Vec<f64> = results
                        .iter()
                        .map(|r| {
                            if pick == 0 {
                                r.load.normal[tier.index()]
                            } else {
                                r.load.blank[tier.index()]
                            }
                        })
                        .collect();
                    let (m, _) = mean_stderr(&shares);
                    writeln!(lf, "{value},{},{},{phase},{m}", scheme.name(), tier.name())?;
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Solution dumps
// ---------------------------------------------------------------------------

pub fn write_dump<W: Write>(dump: &DumpData, mut w: W) -> Result<()> {
    let (n_u, n_b) = (dump.eff.n_users(), dump.eff.n_bs());
    writeln!(w, "hetnet-dump v1")?;
    writeln!(
        w,
        "meta,{n_u},{n_b},{},{},{}",
        dump.alloc.z, dump.kkt_tol, dump.epsilon_active
    )?;
    for j in 0..n_b {
        writeln!(w, "bs,{j},{}", if dump.eff.is_macro[j] { 1 } else { 0 })?;
    }
    for j in 0..n_b {
        writeln!(w, "dual,{j},{},{}", dump.lambda[j], dump.nu[j])?;
    }
    for i in 0..n_u {
        for j in 0..n_b {
            writeln!(
                w,
                "cell,{i},{j},{},{},{},{}",
                dump.eff.c_n[[i, j]],
                dump.eff.c_b[[i, j]],
                dump.alloc.x[[i, j]],
                dump.alloc.y[[i, j]]
            )?;
        }
    }
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<DumpData> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let err = |line: usize, msg: &str| Error::ParseDump {
        line: line + 1,
        msg: msg.to_string(),
    };
    let (l0, header) = lines.next().ok_or_else(|| err(0, "empty file"))?;
    if header.trim() != "hetnet-dump v1" {
        return Err(err(l0, "expected header `hetnet-dump v1`"));
    }
    let (l1, meta_line) = lines.next().ok_or_else(|| err(1, "missing meta line"))?;
    let meta: Vec<&str> = meta_line.split(',').collect();
    if meta.len() != 6 || meta[0] != "meta" {
        return Err(err(l1, "expected `meta,n_users,n_bs,z,kkt_tol,eps`"));
    }
    let parse_f = |s: &str, line: usize| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| err(line, &format!("bad number `{s}`")))
    };
    let n_u: usize = meta[1]
        .parse()
        .map_err(|_| err(l1, "bad n_users"))?;
    let n_b: usize = meta[2].parse().map_err(|_| err(l1, "bad n_bs"))?;
    let z = parse_f(meta[3], l1)?;
    let kkt_tol = parse_f(meta[4], l1)?;
    let epsilon_active = parse_f(meta[5], l1)?;

    let mut is_macro = vec![false; n_b];
    let mut lambda = vec![f64::NAN; n_b];
    let mut nu = vec![f64::NAN; n_b];
    let mut c_n = Array2::from_elem((n_u, n_b), f64::NAN);
    let mut c_b = Array2::from_elem((n_u, n_b), f64::NAN);
    let mut x = Array2::from_elem((n_u, n_b), f64::NAN);
    let mut y = Array2::from_elem((n_u, n_b), f64::NAN);
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        match parts[0] {
            "bs" => {
                if parts.len() != 3 {
                    return Err(err(ln, "expected `bs,j,is_macro`"));
                }
                let j: usize = parts[1].parse().map_err(|_| err(ln, "bad bs index"))?;
                if j >= n_b {
                    return Err(err(ln, "bs index out of range"));
                }
                is_macro[j] = parts[2].trim() == "1";
            }
            "dual" => {
                if parts.len() != 4 {
                    return Err(err(ln, "expected `dual,j,lambda,nu`"));
                }
                let j: usize = parts[1].parse().map_err(|_| err(ln, "bad bs index"))?;
                if j >= n_b {
                    return Err(err(ln, "bs index out of range"));
                }
                lambda[j] = parse_f(parts[2], ln)?;
                nu[j] = parse_f(parts[3], ln)?;
            }
            "cell" => {
                if parts.len() != 7 {
                    return Err(err(ln, "expected `cell,i,j,c_n,c_b,x,y`"));
                }
                let i: usize = parts[1].parse().map_err(|_| err(ln, "bad user index"))?;
                let j: usize = parts[2].parse().map_err(|_| err(ln, "bad bs index"))?;
                if i >= n_u || j >= n_b {
                    return Err(err(ln, "cell index out of range"));
                }
                c_n[[i, j]] = parse_f(parts[3], ln)?;
                c_b[[i, j]] = parse_f(parts[4], ln)?;
                x[[i, j]] = parse_f(parts[5], ln)?;
                y[[i, j]] = parse_f(parts[6], ln)?;
            }
            other => return Err(err(ln, &format!("unknown record `{other}`"))),
        }
    }
    for (name, m) in [("c_n", &c_n), ("c_b", &c_b), ("x", &x), ("y", &y)] {
        if m.iter().any(|v| v.is_nan()) {
            return Err(Error::ParseDump {
                line: 0,
                msg: format!("incomplete dump: missing {name} entries"),
            });
        }
    }
    if lambda.iter().chain(nu.iter()).any(|v| v.is_nan()) {
        return Err(Error::ParseDump {
            line: 0,
            msg: "incomplete dump: missing dual entries".into(),
        });
    }
    Ok(DumpData {
        eff: EfficiencyMatrices { c_n, c_b, is_macro },
        alloc: Allocation { x, y, z },
        lambda,
        nu,
        kkt_tol,
        epsilon_active,
    })
}

// ---------------------------------------------------------------------------
// Offline validation
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ValidationReport {
    pub checks: Vec<(String, bool)>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }
}

/// Re-certify a stored solution: KKT residuals, the structural association
/// bounds, and acyclicity of the contracted association graph.
pub fn validate_instance(path: &Path) -> Result<ValidationReport> {
    let dump = read_dump(path)?;
    let cert = kkt_residual(
        &dump.eff,
        &dump.alloc,
        &dump.lambda,
        &dump.nu,
        dump.epsilon_active,
    );
    // Residual classes are certified against the stored tolerance with a
    // small margin for the decimal round-trip through the dump file.
    let tol = dump.kkt_tol * 1.01 + 1e-12;
    let report = extract_association(&dump.alloc, dump.epsilon_active);
    let graph = build_graph(&report);
    let n_b = dump.eff.n_bs();
    let n_b1 = dump.eff.n_macros();
    let blank_bound = (n_b as i64 - n_b1 as i64 - 1).max(0) as usize;
    let checks = vec![
        (
            format!("kkt stationarity residual <= {tol:.2e}"),
            cert.stationarity_residual <= tol,
        ),
        (
            format!("kkt complementarity residual <= {tol:.2e}"),
            cert.complementarity_residual <= tol,
        ),
        (
            format!("kkt feasibility residual <= {tol:.2e}"),
            cert.feasibility_residual <= tol,
        ),
        (
            format!("kkt z-stationarity residual <= {tol:.2e}"),
            cert.z_stationarity_residual <= tol,
        ),
        (
            format!("fractional users (normal) <= {}", n_b - 1),
            report.fractional_normal <= n_b - 1,
        ),
        (
            format!("fractional users (blank) <= {blank_bound}"),
            report.fractional_blank <= blank_bound,
        ),
        (
            format!("dual-service users <= {}", n_b - n_b1),
            report.dual_service_users <= n_b - n_b1,
        ),
        (
            "single shared BS per user pair (normal)".to_string(),
            graph.normal.max_colors_between_pair() <= 1,
        ),
        (
            "single shared BS per user pair (blank)".to_string(),
            graph.blank.max_colors_between_pair() <= 1,
        ),
        (
            "contracted association graph acyclic (normal)".to_string(),
            graph.normal.contracted_is_forest(),
        ),
        (
            "contracted association graph acyclic (blank)".to_string(),
            graph.blank.contracted_is_forest(),
        ),
    ];
    Ok(ValidationReport { checks })
}
