//! Choosing which intermediate feature dimensions to render for matching.
//!
//! Ground-truth 2D–3D pairs are generated by rendering a database view and a
//! nearby perturbed view, matching them, and keeping only pairs that agree
//! with the known relative pose. Per-dimension discrepancies over those pairs
//! feed a small binary program that picks at most `N_s` dimensions.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::geometry::{project, random_in_ball, random_rotation, Intrinsics, Pose};
use crate::matcher::{mutual_nearest, QueryFeatureMap};
use crate::renderer::{lift_to_3d, render_map_with, RenderRequest, RenderSettings, LIFT_THRESHOLD};

/// Largest `D` the sorting solver accepts.
pub const SOLVER_MAX_DIMS: usize = 64;
/// Largest `D` the exhaustive oracle accepts.
pub const BRUTE_FORCE_MAX_DIMS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Minimize the mean per-dimension cost over `1 ≤ |s| ≤ N_s`.
    AsWritten,
    /// Minimize the summed cost with exactly `N_s` dimensions.
    ExactBudget,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::AsWritten => "as-written",
            SelectionMode::ExactBudget => "exact-budget",
        })
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-written" => Ok(SelectionMode::AsWritten),
            "exact-budget" => Ok(SelectionMode::ExactBudget),
            other => Err(Error::format("selection mask", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    bits: Vec<bool>,
    budget: usize,
    mode: SelectionMode,
}

impl SelectionMask {
    pub fn new(bits: Vec<bool>, budget: usize, mode: SelectionMode) -> Result<Self> {
        let count = bits.iter().filter(|&&b| b).count();
        if count == 0 || count > budget || budget > bits.len() {
            return Err(Error::InvalidBudget {
                budget,
                dims: bits.len(),
            });
        }
        Ok(SelectionMask { bits, budget, mode })
    }

    pub fn from_indices(dim: usize, budget: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; dim];
        for &i in indices {
            if i >= dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: i + 1,
                });
            }
            bits[i] = true;
        }
        SelectionMask::new(bits, budget, SelectionMode::ExactBudget)
    }

    /// Every dimension selected.
    pub fn full(dim: usize) -> Self {
        SelectionMask {
            bits: vec![true; dim],
            budget: dim,
            mode: SelectionMode::ExactBudget,
        }
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn mode(&self) -> SelectionMode {
        self.mode
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn selected_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Selected dimensions in increasing order.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn apply(&self, feature: &[f64]) -> Vec<f64> {
        feature
            .iter()
            .zip(&self.bits)
            .filter_map(|(&v, &b)| b.then_some(v))
            .collect()
    }

    /// `D N_s mode` on the first line, the 0/1 vector on the second.
    pub fn to_text(&self) -> String {
        let bits: Vec<&str> = self.bits.iter().map(|&b| if b { "1" } else { "0" }).collect();
        format!("{} {} {}\n{}\n", self.dim(), self.budget, self.mode, bits.join(" "))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |r: &str| Error::format("selection mask", r.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("missing header"))?.split_whitespace().collect();
        if header.len() != 3 {
            return Err(bad("header must be `D N_s mode`"));
        }
        let dim: usize = header[0].parse().map_err(|_| bad("bad D"))?;
        let budget: usize = header[1].parse().map_err(|_| bad("bad N_s"))?;
        let mode: SelectionMode = header[2].parse()?;
        let bits = lines
            .next()
            .ok_or_else(|| bad("missing bit line"))?
            .split_whitespace()
            .map(|t| match t {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(bad("bits must be 0 or 1")),
            })
            .collect::<Result<Vec<_>>>()?;
        if bits.len() != dim {
            return Err(bad("bit count does not match D"));
        }
        SelectionMask::new(bits, budget, mode)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        SelectionMask::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchPair {
    /// Index of the 2D feature (pixel index in the database map).
    pub i: usize,
    pub f2d: Vec<f64>,
    /// Index of the 3D feature (lifted point index).
    pub j: usize,
    pub f3d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchPairSet {
    pub pairs: Vec<MatchPair>,
    pub query_pose: Pose,
    pub initial_pose: Pose,
}

impl MatchPairSet {
    pub fn dim(&self) -> Option<usize> {
        self.pairs.first().map(|p| p.f2d.len())
    }

    pub fn merge(sets: impl IntoIterator<Item = MatchPairSet>) -> Vec<MatchPair> {
        sets.into_iter().flat_map(|s| s.pairs).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    #[default]
    Absolute,
    Squared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerDimCost {
    pub c: Vec<f64>,
}

/// `c_d = Σ_pairs |F_d^2D[i] − F_d^3D[j]|` (or the squared difference).
pub fn accumulate_costs(pairs: &[MatchPair], kind: CostKind) -> Result<PerDimCost> {
    let first = pairs.first().ok_or(Error::EmptyInput("match pairs"))?;
    let dim = first.f2d.len();
    let mut c = vec![0.0; dim];
    for p in pairs {
        for len in [p.f2d.len(), p.f3d.len()] {
            if len != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: len,
                });
            }
        }
        for (d, acc) in c.iter_mut().enumerate() {
            let diff = p.f2d[d] - p.f3d[d];
            *acc += match kind {
                CostKind::Absolute => diff.abs(),
                CostKind::Squared => diff * diff,
            };
        }
    }
    Ok(PerDimCost { c })
}

/// Divides each dimension's cost by that dimension's spread (standard
/// deviation over every feature in the pair set), so dimensions that barely
/// vary across the scene are not mistaken for consistent ones.
pub fn normalize_by_spread(cost: &PerDimCost, pairs: &[MatchPair]) -> Result<PerDimCost> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("match pairs"));
    }
    let dim = cost.c.len();
    let n = (2 * pairs.len()) as f64;
    let mut mean = vec![0.0; dim];
    for p in pairs {
        for d in 0..dim {
            mean[d] += (p.f2d[d] + p.f3d[d]) / n;
        }
    }
    let mut var = vec![0.0; dim];
    for p in pairs {
        for d in 0..dim {
            var[d] += ((p.f2d[d] - mean[d]).powi(2) + (p.f3d[d] - mean[d]).powi(2)) / n;
        }
    }
    Ok(PerDimCost {
        c: cost
            .c
            .iter()
            .zip(&var)
            .map(|(&c, &v)| c / v.sqrt().max(1e-9))
            .collect(),
    })
}

/// Objective of a mask, summing in increasing dimension order.
pub fn objective(cost: &PerDimCost, bits: &[bool], mode: SelectionMode) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (c, &b) in cost.c.iter().zip(bits) {
        if b {
            sum += c;
            count += 1;
        }
    }
    match mode {
        SelectionMode::ExactBudget => sum,
        SelectionMode::AsWritten => sum / count as f64,
    }
}

fn check_budget(cost: &PerDimCost, budget: usize) -> Result<()> {
    if budget == 0 || budget > cost.c.len() {
        return Err(Error::InvalidBudget {
            budget,
            dims: cost.c.len(),
        });
    }
    if cost.c.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::InvalidArgument("costs must be finite and non-negative".into()));
    }
    Ok(())
}

/// Exact solver. With non-negative costs both objectives reduce to a sort:
/// exact-budget takes the `N_s` cheapest dimensions, as-written takes the
/// shortest cheapest prefix with minimal mean. Ties go to lower indices.
pub fn solve_selection(cost: &PerDimCost, budget: usize, mode: SelectionMode) -> Result<SelectionMask> {
    let dims = cost.c.len();
    if dims > SOLVER_MAX_DIMS {
        return Err(Error::TooLarge {
            dims,
            max: SOLVER_MAX_DIMS,
        });
    }
    check_budget(cost, budget)?;
    let mut order: Vec<usize> = (0..dims).collect();
    order.sort_by(|&a, &b| cost.c[a].total_cmp(&cost.c[b]).then(a.cmp(&b)));
    let take = match mode {
        SelectionMode::ExactBudget => budget,
        SelectionMode::AsWritten => {
            let mut best = (f64::INFINITY, 0);
            let mut sum = 0.0;
            for (k, &d) in order.iter().take(budget).enumerate() {
                sum += cost.c[d];
                let mean = sum / (k + 1) as f64;
                if mean < best.0 {
                    best = (mean, k + 1);
                }
            }
            best.1
        }
    };
    let mut bits = vec![false; dims];
    for &d in &order[..take] {
        bits[d] = true;
    }
    SelectionMask::new(bits, budget, mode)
}

/// Exhaustive oracle for [`solve_selection`]: enumerates every feasible mask.
/// Ties prefer fewer dimensions, then the lexicographically smallest set.
pub fn brute_force_selection(cost: &PerDimCost, budget: usize, mode: SelectionMode) -> Result<SelectionMask> {
    let dims = cost.c.len();
    if dims > BRUTE_FORCE_MAX_DIMS {
        return Err(Error::TooLarge {
            dims,
            max: BRUTE_FORCE_MAX_DIMS,
        });
    }
    check_budget(cost, budget)?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut bits = vec![false; dims];
    for m in 1u32..(1u32 << dims) {
        let count = m.count_ones() as usize;
        let feasible = match mode {
            SelectionMode::ExactBudget => count == budget,
            SelectionMode::AsWritten => count <= budget,
        };
        if !feasible {
            continue;
        }
        for (d, b) in bits.iter_mut().enumerate() {
            *b = m & (1 << d) != 0;
        }
        let value = objective(cost, &bits, mode);
        let set: Vec<usize> = (0..dims).filter(|&d| bits[d]).collect();
        let better = match &best {
            None => true,
            Some((v, s)) => value < *v || (value == *v && (set.len(), &set) < (s.len(), s)),
        };
        if better {
            best = Some((value, set));
        }
    }
    let (_, set) = best.expect("at least one feasible mask");
    let mut out = SelectionMask::from_indices(dims, budget, &set)?;
    out.mode = mode;
    Ok(out)
}

/// Pose perturbation used to create the "initialized" side of a training pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    /// Radius of the translation ball, scene units.
    pub translation: f64,
    pub max_rotation_deg: f64,
}

impl Perturbation {
    /// 2% of the scene extent and up to 5°.
    pub fn for_extent(extent: f64) -> Self {
        Perturbation {
            translation: 0.02 * extent,
            max_rotation_deg: 5.0,
        }
    }

    pub fn apply(&self, pose: &Pose, rng: &mut ChaCha8Rng) -> Pose {
        let dr = random_rotation(rng, self.max_rotation_deg.to_radians());
        let dt = random_in_ball(rng, self.translation);
        Pose::new(pose.rotation() * dr, pose.translation() + dt)
            .expect("product of rotations")
            .orthonormalized()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    pub reproj_threshold: f64,
    pub min_pairs: usize,
    pub stride: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            reproj_threshold: 3.0,
            min_pairs: 20,
            stride: 2,
        }
    }
}

/// Ground-truth pairs between a database view and an explicit initial pose.
pub fn generate_gt_pairs_between(
    field: &FieldParams,
    database_pose: &Pose,
    initial_pose: &Pose,
    intrinsics: &Intrinsics,
    config: &PairConfig,
    settings: &RenderSettings,
) -> Result<MatchPairSet> {
    let req = RenderRequest {
        color: false,
        ..RenderRequest::default()
    };
    let db = render_map_with(field, database_pose, intrinsics, config.stride, settings, &req)?;
    let init = render_map_with(field, initial_pose, intrinsics, config.stride, settings, &req)?;
    let lifted = lift_to_3d(&init, LIFT_THRESHOLD);
    let mut pairs = Vec::new();
    if !lifted.is_empty() {
        let a: Vec<&[f64]> = db.renders.iter().map(|r| r.feature.as_slice()).collect();
        let b: Vec<&[f64]> = lifted.iter().map(|l| l.feature.as_slice()).collect();
        for (i, j, _) in mutual_nearest(&a, &b)? {
            let Some((u, v)) = project(database_pose, intrinsics, &lifted[j].point) else {
                continue;
            };
            let (cu, cv) = db.pixels[i].center();
            if ((u - cu).powi(2) + (v - cv).powi(2)).sqrt() <= config.reproj_threshold {
                pairs.push(MatchPair {
                    i,
                    f2d: a[i].to_vec(),
                    j,
                    f3d: b[j].to_vec(),
                });
            }
        }
    }
    if pairs.len() < config.min_pairs {
        return Err(Error::InsufficientOverlap {
            found: pairs.len(),
            required: config.min_pairs,
        });
    }
    Ok(MatchPairSet {
        pairs,
        query_pose: *database_pose,
        initial_pose: *initial_pose,
    })
}

/// Replaces the 2D side of every pair with features extracted from the
/// database image itself (for instance by the query projector), so the costs
/// measure how well the query-side extractor agrees with the rendered scene.
/// `features` must cover the pixel grid the pairs were generated on.
pub fn with_query_features(mut set: MatchPairSet, features: &QueryFeatureMap) -> Result<MatchPairSet> {
    for p in &mut set.pairs {
        let f = features.features.get(p.i).ok_or(Error::DimensionMismatch {
            expected: p.i + 1,
            got: features.features.len(),
        })?;
        if f.len() != p.f3d.len() {
            return Err(Error::DimensionMismatch {
                expected: p.f3d.len(),
                got: f.len(),
            });
        }
        p.f2d.clone_from(f);
    }
    Ok(set)
}

/// Ground-truth pairs between a database view and a random nearby pose.
pub fn generate_gt_pairs(
    field: &FieldParams,
    database_pose: &Pose,
    intrinsics: &Intrinsics,
    perturbation: &Perturbation,
    config: &PairConfig,
    settings: &RenderSettings,
    rng_seed: u64,
) -> Result<MatchPairSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let initial = perturbation.apply(database_pose, &mut rng);
    generate_gt_pairs_between(field, database_pose, &initial, intrinsics, config, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cost(c: &[f64]) -> PerDimCost {
        PerDimCost { c: c.to_vec() }
    }

    fn pair(a: &[f64], b: &[f64]) -> MatchPair {
        MatchPair {
            i: 0,
            f2d: a.to_vec(),
            j: 0,
            f3d: b.to_vec(),
        }
    }

    #[test]
    fn cost_accumulation() {
        let same = accumulate_costs(&[pair(&[1.0, 2.0], &[1.0, 2.0])], CostKind::Absolute).unwrap();
        assert_eq!(same.c, vec![0.0, 0.0]);
        let one = accumulate_costs(&[pair(&[1.0, 2.0, 3.0], &[1.0, 2.3, 3.0])], CostKind::Absolute).unwrap();
        assert!((one.c[1] - 0.3).abs() < 1e-12);
        assert_eq!((one.c[0], one.c[2]), (0.0, 0.0));
        let p = pair(&[0.5, -1.0], &[0.1, 1.0]);
        let single = accumulate_costs(std::slice::from_ref(&p), CostKind::Absolute).unwrap();
        let double = accumulate_costs(&[p.clone(), p], CostKind::Absolute).unwrap();
        for d in 0..2 {
            assert_eq!(double.c[d], 2.0 * single.c[d]);
        }
        assert!(matches!(accumulate_costs(&[], CostKind::Absolute), Err(Error::EmptyInput(_))));
        assert!(matches!(
            accumulate_costs(&[pair(&[1.0], &[1.0]), pair(&[1.0, 2.0], &[1.0, 2.0])], CostKind::Absolute),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn solver_examples() {
        let c = cost(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(solve_selection(&c, 2, SelectionMode::ExactBudget).unwrap().indices(), vec![0, 1]);
        assert_eq!(solve_selection(&c, 2, SelectionMode::AsWritten).unwrap().indices(), vec![0]);
        let flat = cost(&[0.7; 6]);
        assert_eq!(solve_selection(&flat, 3, SelectionMode::ExactBudget).unwrap().indices(), vec![0, 1, 2]);
        assert!(matches!(
            solve_selection(&c, 5, SelectionMode::ExactBudget),
            Err(Error::InvalidBudget { .. })
        ));
        assert!(solve_selection(&cost(&[0.0; 65]), 3, SelectionMode::ExactBudget).is_err());
    }

    #[test]
    fn as_written_example_matches_enumeration() {
        // All 15 non-empty masks of 4 dims; those with ≤ 2 dims are feasible.
        let c = cost(&[1.0, 2.0, 3.0, 4.0]);
        let mut best = (f64::INFINITY, 0u32);
        for m in 1u32..16 {
            if m.count_ones() > 2 {
                continue;
            }
            let bits: Vec<bool> = (0..4).map(|d| m & (1 << d) != 0).collect();
            let v = objective(&c, &bits, SelectionMode::AsWritten);
            if v < best.0 {
                best = (v, m);
            }
        }
        assert_eq!(best, (1.0, 0b0001));
        assert_eq!(brute_force_selection(&c, 2, SelectionMode::AsWritten).unwrap().indices(), vec![0]);
    }

    #[test]
    fn brute_force_edge_cases() {
        assert_eq!(brute_force_selection(&cost(&[3.0]), 1, SelectionMode::ExactBudget).unwrap().indices(), vec![0]);
        assert_eq!(brute_force_selection(&cost(&[3.0]), 1, SelectionMode::AsWritten).unwrap().indices(), vec![0]);
        let c = cost(&[0.4, 0.1, 0.9, 0.3]);
        assert_eq!(brute_force_selection(&c, 4, SelectionMode::ExactBudget).unwrap().indices(), vec![0, 1, 2, 3]);
        assert!(matches!(
            brute_force_selection(&cost(&[0.0; 21]), 2, SelectionMode::ExactBudget),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn solver_agrees_with_oracle_on_random_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let dims = rng.random_range(1..=10);
            let c = cost(&(0..dims).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
            for budget in 1..=dims {
                for mode in [SelectionMode::AsWritten, SelectionMode::ExactBudget] {
                    let a = solve_selection(&c, budget, mode).unwrap();
                    let b = brute_force_selection(&c, budget, mode).unwrap();
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn zero_selection_is_rejected() {
        assert!(SelectionMask::new(vec![false; 4], 2, SelectionMode::ExactBudget).is_err());
        assert!(SelectionMask::new(vec![true; 3], 2, SelectionMode::ExactBudget).is_err());
    }

    #[test]
    fn mask_text_format() {
        let m = SelectionMask::from_indices(5, 2, &[1, 4]).unwrap();
        assert_eq!(m.to_text(), "5 2 exact-budget\n0 1 0 0 1\n");
        assert_eq!(SelectionMask::from_text(&m.to_text()).unwrap(), m);
        assert!(SelectionMask::from_text("5 2 greedy\n0 1 0 0 1\n").is_err());
        assert!(SelectionMask::from_text("5 2 as-written\n0 1 0 1\n").is_err());
    }

    #[test]
    fn spread_normalization_penalizes_flat_dims() {
        // Dim 0 is constant across the set with tiny noise; dim 1 varies a lot
        // with the same absolute discrepancy.
        let pairs: Vec<MatchPair> = (0..10)
            .map(|k| {
                let x = k as f64;
                pair(&[0.5 + 1e-3, x], &[0.5 - 1e-3, x + 2e-3])
            })
            .collect();
        let raw = accumulate_costs(&pairs, CostKind::Absolute).unwrap();
        let norm = normalize_by_spread(&raw, &pairs).unwrap();
        assert!(raw.c[0] <= raw.c[1] + 1e-12);
        assert!(norm.c[0] > norm.c[1]);
    }

    proptest! {
        #[test]
        fn scale_invariance(c in prop::collection::vec(0.0f64..10.0, 1..16), lambda in 0.01f64..100.0, b in 1usize..16) {
            let b = b.min(c.len());
            let scaled = cost(&c.iter().map(|v| v * lambda).collect::<Vec<_>>());
            for mode in [SelectionMode::AsWritten, SelectionMode::ExactBudget] {
                let a = solve_selection(&cost(&c), b, mode).unwrap();
                let s = solve_selection(&scaled, b, mode).unwrap();
                prop_assert_eq!(a.indices(), s.indices());
            }
        }

        #[test]
        fn exact_budget_is_monotone(c in prop::collection::vec(0.0f64..10.0, 2..20)) {
            for b in 1..c.len() {
                let small = solve_selection(&cost(&c), b, SelectionMode::ExactBudget).unwrap();
                let large = solve_selection(&cost(&c), b + 1, SelectionMode::ExactBudget).unwrap();
                prop_assert!(small.indices().iter().all(|d| large.bits()[*d]));
            }
        }
    }
}
