//! Association extraction, the user-graph view of fractional association,
//! rounding to binary association, and the baseline schemes.

use std::io::Write;

use ndarray::Array2;

use crate::channel::{EfficiencyMatrices, SinrMatrices};
use crate::error::{Error, Result};
use crate::optimizer::{rates, solve_fixed_z, Allocation, RateVector, SolveOptions};

/// Per-phase association sets thresholded at epsilon, plus the counts the
/// structural bounds speak about.
#[derive(Debug, Clone)]
pub struct AssociationReport {
    /// Per-user sorted BS indices with x_ij above threshold.
    pub normal_assoc: Vec<Vec<usize>>,
    /// Per-user sorted BS indices with y_ij above threshold.
    pub blank_assoc: Vec<Vec<usize>>,
    /// Users drawing normal-phase resources from two or more BSs.
    pub fractional_normal: usize,
    /// Users drawing blank-phase resources from two or more BSs.
    pub fractional_blank: usize,
    /// Users keeping some BS in both phases.
    pub dual_service_users: usize,
}

pub fn extract_association(alloc: &Allocation, eps: f64) -> AssociationReport {
    let (n_u, n_b) = alloc.x.dim();
    let mut normal_assoc = Vec::with_capacity(n_u);
    let mut blank_assoc = Vec::with_capacity(n_u);
    let mut fractional_normal = 0;
    let mut fractional_blank = 0;
    let mut dual_service_users = 0;
    for i in 0..n_u {
        let n_set: Vec<usize> = (0..n_b).filter(|&j| alloc.x[[i, j]] > eps).collect();
        let b_set: Vec<usize> = (0..n_b).filter(|&j| alloc.y[[i, j]] > eps).collect();
        if n_set.len() >= 2 {
            fractional_normal += 1;
        }
        if b_set.len() >= 2 {
            fractional_blank += 1;
        }
        if n_set.iter().any(|j| b_set.contains(j)) {
            dual_service_users += 1;
        }
        normal_assoc.push(n_set);
        blank_assoc.push(b_set);
    }
    AssociationReport {
        normal_assoc,
        blank_assoc,
        fractional_normal,
        fractional_blank,
        dual_service_users,
    }
}

/// Users as nodes, one edge per BS shared by two users within a phase.
#[derive(Debug, Clone)]
pub struct PhaseGraph {
    /// (user, user, bs) with user pairs ordered.
    pub edges: Vec<(usize, usize, usize)>,
    assoc: Vec<Vec<usize>>,
}

impl PhaseGraph {
    fn from_assoc(assoc: &[Vec<usize>], n_bs: usize) -> Self {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bs];
        for (user, set) in assoc.iter().enumerate() {
            for &j in set {
                members[j].push(user);
            }
        }
        let mut edges = Vec::new();
        for (j, users) in members.iter().enumerate() {
            for a in 0..users.len() {
                for b in a + 1..users.len() {
                    edges.push((users[a], users[b], j));
                }
            }
        }
        PhaseGraph {
            edges,
            assoc: assoc.to_vec(),
        }
    }

    /// Largest number of distinct colors between one node pair. Generic
    /// optima have at most one.
    pub fn max_colors_between_pair(&self) -> usize {
        use std::collections::HashMap;
        let mut by_pair: HashMap<(usize, usize), usize> = HashMap::new();
        for &(a, b, _) in &self.edges {
            *by_pair.entry((a, b)).or_insert(0) += 1;
        }
        by_pair.values().copied().max().unwrap_or(0)
    }

    /// Contract every monochrome clique (the users of one BS) into a node;
    /// the fractional users connect the cliques. True when the contracted
    /// graph is a forest.
    pub fn contracted_is_forest(&self) -> bool {
        let n_bs = self
            .assoc
            .iter()
            .flat_map(|s| s.iter().copied())
            .max()
            .map_or(0, |m| m + 1);
        let mut parent: Vec<usize> = (0..n_bs).collect();
        fn find(parent: &mut Vec<usize>, mut v: usize) -> usize {
            while parent[v] != v {
                parent[v] = parent[parent[v]];
                v = parent[v];
            }
            v
        }
        for set in &self.assoc {
            if set.len() < 2 {
                continue;
            }
            let first = set[0];
            for &other in &set[1..] {
                let (ra, rb) = (find(&mut parent, first), find(&mut parent, other));
                if ra == rb {
                    return false;
                }
                parent[ra] = rb;
            }
        }
        true
    }

    /// Plain edge-list export: `node node color` per line.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> Result<()> {
        for &(a, b, c) in &self.edges {
            writeln!(w, "{a} {b} {c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AssociationGraph {
    pub n_users: usize,
    pub normal: PhaseGraph,
    pub blank: PhaseGraph,
}

pub fn build_graph(report: &AssociationReport) -> AssociationGraph {
    let n_bs = report
        .normal_assoc
        .iter()
        .chain(report.blank_assoc.iter())
        .flat_map(|s| s.iter().copied())
        .max()
        .map_or(0, |m| m + 1);
    AssociationGraph {
        n_users: report.normal_assoc.len(),
        normal: PhaseGraph::from_assoc(&report.normal_assoc, n_bs),
        blank: PhaseGraph::from_assoc(&report.blank_assoc, n_bs),
    }
}

/// Binary association derived from a relaxed optimum: per phase each user
/// keeps the BS with the largest rate contribution, then budgets are
/// re-optimized over the rounded support (falling back to an equal split per
/// BS if that solve fails).
#[derive(Debug, Clone)]
pub struct RoundedAssociation {
    pub normal_choice: Vec<Option<usize>>,
    pub blank_choice: Vec<Option<usize>>,
    pub allocation: Allocation,
}

pub fn round_to_single(
    alloc: &Allocation,
    eff: &EfficiencyMatrices,
    opts: &SolveOptions,
) -> (RoundedAssociation, RateVector) {
    let (n_u, n_b) = alloc.x.dim();
    let choose = |shares: &Array2<f64>, c: &Array2<f64>, i: usize| -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n_b {
            let contribution = shares[[i, j]] * c[[i, j]];
            if contribution > 0.0 && best.map_or(true, |(_, v)| contribution > v) {
                best = Some((j, contribution));
            }
        }
        best.map(|(j, _)| j)
    };
    let normal_choice: Vec<Option<usize>> = (0..n_u).map(|i| choose(&alloc.x, &eff.c_n, i)).collect();
    let blank_choice: Vec<Option<usize>> = (0..n_u).map(|i| choose(&alloc.y, &eff.c_b, i)).collect();

    let mut normal_counts = vec![0usize; n_b];
    let mut blank_counts = vec![0usize; n_b];
    for i in 0..n_u {
        if let Some(j) = normal_choice[i] {
            normal_counts[j] += 1;
        }
        if let Some(j) = blank_choice[i] {
            blank_counts[j] += 1;
        }
    }
    let mut x = Array2::zeros((n_u, n_b));
    let mut y = Array2::zeros((n_u, n_b));
    for i in 0..n_u {
        if let Some(j) = normal_choice[i] {
            x[[i, j]] = (1.0 - alloc.z) / normal_counts[j] as f64;
        }
        if let Some(j) = blank_choice[i] {
            y[[i, j]] = alloc.z / blank_counts[j] as f64;
        }
    }
    // Budgets re-optimized with the association held fixed: efficiencies off
    // the rounded support are masked out, so the result stays binary and
    // never exceeds the relaxed optimum.
    let mut masked = eff.clone();
    for i in 0..n_u {
        for j in 0..n_b {
            if normal_choice[i] != Some(j) {
                masked.c_n[[i, j]] = 0.0;
            }
            if blank_choice[i] != Some(j) {
                masked.c_b[[i, j]] = 0.0;
            }
        }
    }
    let allocation = match solve_fixed_z(&masked, alloc.z, opts) {
        Ok((refined, _)) => refined,
        Err(_) => Allocation { x, y, z: alloc.z },
    };
    let rv = rates(&allocation, eff);
    (
        RoundedAssociation {
            normal_choice,
            blank_choice,
            allocation,
        },
        rv,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    JointBr,
    MaxSinrNoBr,
    LoadAwareNoBr,
    MaxSinrWithBr,
    MaxSinrNormalWithBr,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::JointBr,
        Scheme::MaxSinrNoBr,
        Scheme::LoadAwareNoBr,
        Scheme::MaxSinrWithBr,
        Scheme::MaxSinrNormalWithBr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::JointBr => "joint_br",
            Scheme::MaxSinrNoBr => "max_sinr_no_br",
            Scheme::LoadAwareNoBr => "load_aware_no_br",
            Scheme::MaxSinrWithBr => "max_sinr_with_br",
            Scheme::MaxSinrNormalWithBr => "max_sinr_normal_with_br",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sch| sch.name() == s)
            .ok_or_else(|| Error::UnknownScheme(s.into()))
    }
}

fn argmax_row(m: &Array2<f64>, i: usize) -> Option<usize> {
    let n_b = m.ncols();
    let mut best: Option<(usize, f64)> = None;
    for j in 0..n_b {
        let v = m[[i, j]];
        if v > 0.0 && best.map_or(true, |(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

/// Reference association schemes from the evaluation section. The fixed-z
/// schemes take z from the caller (by default the joint optimum of the same
/// instance, making comparisons z-matched).
pub fn baseline_scheme(
    eff: &EfficiencyMatrices,
    sinr: &SinrMatrices,
    scheme: Scheme,
    z: f64,
    opts: &SolveOptions,
) -> Result<(Allocation, RateVector)> {
    let (n_u, n_b) = (eff.n_users(), eff.n_bs());
    let equal_split = |normal_choice: &[Option<usize>], blank_choice: &[Option<usize>], z: f64| {
        let mut nc = vec![0usize; n_b];
        let mut bc = vec![0usize; n_b];
        for i in 0..n_u {
            if let Some(j) = normal_choice[i] {
                nc[j] += 1;
            }
            if let Some(j) = blank_choice[i] {
                bc[j] += 1;
            }
        }
        let mut x = Array2::zeros((n_u, n_b));
        let mut y = Array2::zeros((n_u, n_b));
        for i in 0..n_u {
            if let Some(j) = normal_choice[i] {
                x[[i, j]] = (1.0 - z) / nc[j] as f64;
            }
            if let Some(j) = blank_choice[i] {
                y[[i, j]] = z / bc[j] as f64;
            }
        }
        Allocation { x, y, z }
    };
    let alloc = match scheme {
        Scheme::MaxSinrNoBr => {
            let choice: Vec<Option<usize>> = (0..n_u).map(|i| argmax_row(&sinr.normal, i)).collect();
            equal_split(&choice, &vec![None; n_u], 0.0)
        }
        Scheme::LoadAwareNoBr => solve_fixed_z(eff, 0.0, opts)?.0,
        Scheme::MaxSinrWithBr => {
            let normal: Vec<Option<usize>> = (0..n_u).map(|i| argmax_row(&sinr.normal, i)).collect();
            let blank: Vec<Option<usize>> = (0..n_u).map(|i| argmax_row(&sinr.blank, i)).collect();
            equal_split(&normal, &blank, z)
        }
        Scheme::MaxSinrNormalWithBr => {
            // Association frozen from the normal phase; macro-attached users
            // burn their blank share on a silent BS.
            let normal: Vec<Option<usize>> = (0..n_u).map(|i| argmax_row(&sinr.normal, i)).collect();
            let alloc = equal_split(&normal, &normal, z);
            // Keep feasibility bookkeeping honest: mass on c_b = 0 entries
            // yields zero rate; zero it out instead of wasting it.
            let mut alloc = alloc;
            for i in 0..n_u {
                for j in 0..n_b {
                    if eff.c_b[[i, j]] == 0.0 {
                        alloc.y[[i, j]] = 0.0;
                    }
                }
            }
            alloc
        }
        Scheme::JointBr => {
            return Err(Error::UnknownScheme(
                "joint_br is not a baseline; use solve_joint".into(),
            ))
        }
    };
    let rv = rates(&alloc, eff);
    Ok((alloc, rv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::{solve_joint, utility};
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_eff(n_u: usize, n_b: usize, n_macro: usize, seed: u64) -> EfficiencyMatrices {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c_n = Array2::from_shape_fn((n_u, n_b), |_| 0.2 + 4.0 * rng.gen::<f64>());
        let is_macro: Vec<bool> = (0..n_b).map(|j| j < n_macro).collect();
        let mut c_b = Array2::zeros((n_u, n_b));
        for i in 0..n_u {
            for j in 0..n_b {
                if !is_macro[j] {
                    c_b[[i, j]] = c_n[[i, j]] * (1.0 + rng.gen::<f64>());
                }
            }
        }
        EfficiencyMatrices { c_n, c_b, is_macro }
    }

    #[test]
    fn symmetric_case_single_associated() {
        let eff = EfficiencyMatrices {
            c_n: arr2(&[[2.0], [2.0]]),
            c_b: arr2(&[[2.0], [2.0]]),
            is_macro: vec![false],
        };
        let (alloc, _) = solve_joint(&eff, &SolveOptions::default()).unwrap();
        let report = extract_association(&alloc, 1e-6);
        assert_eq!(report.fractional_normal, 0);
        assert_eq!(report.fractional_blank, 0);
    }

    #[test]
    fn constructed_fractional_user_counted() {
        let mut x = Array2::zeros((1, 2));
        x[[0, 0]] = 0.3;
        x[[0, 1]] = 0.3;
        let alloc = Allocation {
            x,
            y: Array2::zeros((1, 2)),
            z: 0.0,
        };
        let report = extract_association(&alloc, 1e-6);
        assert_eq!(report.fractional_normal, 1);
    }

    #[test]
    fn three_users_one_bs_is_monochrome_triangle() {
        let report = AssociationReport {
            normal_assoc: vec![vec![0], vec![0], vec![0]],
            blank_assoc: vec![vec![], vec![], vec![]],
            fractional_normal: 0,
            fractional_blank: 0,
            dual_service_users: 0,
        };
        let graph = build_graph(&report);
        assert_eq!(graph.normal.edges.len(), 3);
        assert!(graph.normal.edges.iter().all(|&(_, _, c)| c == 0));
        assert!(graph.normal.contracted_is_forest());
    }

    #[test]
    fn path_topology_is_acyclic() {
        // User 0 on BSs {0,1}, user 2 on BSs {0,2}: a path after contraction.
        let report = AssociationReport {
            normal_assoc: vec![vec![0, 1], vec![0], vec![0, 2]],
            blank_assoc: vec![vec![], vec![], vec![]],
            fractional_normal: 2,
            fractional_blank: 0,
            dual_service_users: 0,
        };
        let graph = build_graph(&report);
        assert!(graph.normal.contracted_is_forest());
        assert_eq!(graph.normal.max_colors_between_pair(), 1);
    }

    #[test]
    fn duplicated_shared_pair_detected() {
        // Two users sharing two BSs: a multi-colored pair and a cycle.
        let report = AssociationReport {
            normal_assoc: vec![vec![0, 1], vec![0, 1]],
            blank_assoc: vec![vec![], vec![]],
            fractional_normal: 2,
            fractional_blank: 0,
            dual_service_users: 0,
        };
        let graph = build_graph(&report);
        assert!(graph.normal.max_colors_between_pair() >= 2);
        assert!(!graph.normal.contracted_is_forest());
    }

    #[test]
    fn empty_fractional_set_graph_is_cliques_only() {
        let report = AssociationReport {
            normal_assoc: vec![vec![0], vec![1]],
            blank_assoc: vec![vec![], vec![]],
            fractional_normal: 0,
            fractional_blank: 0,
            dual_service_users: 0,
        };
        let graph = build_graph(&report);
        assert!(graph.normal.edges.is_empty());
        assert!(graph.normal.contracted_is_forest());
    }

    #[test]
    fn rounding_is_fixed_point_on_binary_allocation() {
        let eff = EfficiencyMatrices {
            c_n: arr2(&[[2.0, 0.5], [0.5, 3.0]]),
            c_b: arr2(&[[0.0, 1.0], [0.0, 4.0]]),
            is_macro: vec![true, false],
        };
        let mut x = Array2::zeros((2, 2));
        x[[0, 0]] = 0.6;
        x[[1, 1]] = 0.6;
        let mut y = Array2::zeros((2, 2));
        y[[1, 1]] = 0.4;
        let alloc = Allocation { x, y, z: 0.4 };
        let before = rates(&alloc, &eff);
        let (rounded, after) = round_to_single(&alloc, &eff, &SolveOptions::default());
        assert_eq!(rounded.normal_choice, vec![Some(0), Some(1)]);
        assert_eq!(rounded.blank_choice, vec![None, Some(1)]);
        for (a, b) in rounded.allocation.x.iter().zip(alloc.x.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in rounded.allocation.y.iter().zip(alloc.y.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in before.0.iter().zip(after.0.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rounding_never_beats_relaxed_optimum() {
        for seed in 0..10 {
            let eff = random_eff(6, 3, 1, seed);
            let (alloc, _) = solve_joint(&eff, &SolveOptions::default()).unwrap();
            let relaxed = utility(&rates(&alloc, &eff));
            let (_, rounded_rates) = round_to_single(&alloc, &eff, &SolveOptions::default());
            let rounded = utility(&rounded_rates);
            assert!(rounded <= relaxed + 1e-9, "{rounded} vs {relaxed}");
        }
    }

    #[test]
    fn max_sinr_attaches_to_strong_macro() {
        // One strong macro, one weak distant pico: everyone on the macro.
        let sinr = SinrMatrices {
            normal: arr2(&[[50.0, 0.2], [80.0, 0.1], [60.0, 0.4]]),
            blank: arr2(&[[0.0, 3.0], [0.0, 2.0], [0.0, 5.0]]),
        };
        let eff = EfficiencyMatrices {
            c_n: sinr.normal.mapv(|s| (1.0 + s).log2()),
            c_b: sinr.blank.mapv(|s| (1.0 + s).log2()),
            is_macro: vec![true, false],
        };
        let (alloc, _) =
            baseline_scheme(&eff, &sinr, Scheme::MaxSinrNoBr, 0.0, &SolveOptions::default())
                .unwrap();
        for i in 0..3 {
            assert!((alloc.x[[i, 0]] - 1.0 / 3.0).abs() < 1e-12);
            assert_eq!(alloc.x[[i, 1]], 0.0);
        }
    }

    #[test]
    fn frozen_association_gives_macro_users_zero_blank_rate() {
        let sinr = SinrMatrices {
            normal: arr2(&[[50.0, 0.2], [1.0, 30.0]]),
            blank: arr2(&[[0.0, 3.0], [0.0, 90.0]]),
        };
        let eff = EfficiencyMatrices {
            c_n: sinr.normal.mapv(|s| (1.0 + s).log2()),
            c_b: sinr.blank.mapv(|s| (1.0 + s).log2()),
            is_macro: vec![true, false],
        };
        let (alloc, rv) = baseline_scheme(
            &eff,
            &sinr,
            Scheme::MaxSinrNormalWithBr,
            0.5,
            &SolveOptions::default(),
        )
        .unwrap();
        // User 0 sits on the macro: entire blank-phase contribution is zero.
        assert_eq!(alloc.y[[0, 0]], 0.0);
        let normal_only = alloc.x[[0, 0]] * eff.c_n[[0, 0]];
        assert!((rv.0[0] - normal_only).abs() < 1e-12);
    }

    #[test]
    fn load_aware_dominates_max_sinr() {
        for seed in 0..8 {
            let eff = random_eff(5, 3, 1, 100 + seed);
            let sinr = SinrMatrices {
                normal: eff.c_n.mapv(|c| 2f64.powf(c) - 1.0),
                blank: eff.c_b.mapv(|c| 2f64.powf(c) - 1.0),
            };
            let opts = SolveOptions::default();
            let (_, r_ms) =
                baseline_scheme(&eff, &sinr, Scheme::MaxSinrNoBr, 0.0, &opts).unwrap();
            let (_, r_la) =
                baseline_scheme(&eff, &sinr, Scheme::LoadAwareNoBr, 0.0, &opts).unwrap();
            assert!(utility(&r_la) >= utility(&r_ms) - 1e-9);
        }
    }

    #[test]
    fn unknown_scheme_string_rejected() {
        assert!("max_sinr".parse::<Scheme>().is_err());
        assert!("joint_br".parse::<Scheme>().is_ok());
    }
}
