//! Gradient-driven node selection and Mahalanobis-distance connectivity
//! reconstruction: the machinery behind pooling levels.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kdtree::KdTree;
use crate::mwls::{self, InterpolationMatrix, MwlsParams};

/// Neighbor count per retained node when reconnecting a coarse level.
pub const RECONNECT_NEIGHBORS: usize = 5;
/// Euclidean candidate pool size searched before the Mahalanobis ranking.
pub const RECONNECT_PREFILTER: usize = 250;

/// Compression ratios the search space uses; others work but are unusual
/// enough to warrant a warning.
const STANDARD_RATIOS: [f64; 3] = [0.25, 1.0 / 3.0, 0.5];

/// Endpoint weights of the rank-based retention curve.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RetentionProfile {
    /// Raw weight offset associated with the highest-gradient rank.
    pub p1: f64,
    /// Raw weight associated with the lowest-gradient rank.
    pub pn: f64,
}

impl Default for RetentionProfile {
    fn default() -> Self {
        RetentionProfile { p1: 0.2, pn: 1.0 }
    }
}

impl RetentionProfile {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p1", self.p1), ("pn", self.pn)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "retention profile {name} = {v} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Raw rank weight `1 + ((1 - e^{-2i/n}) / (1 - e^{-2}))(p1 - pn) + p1`
    /// for 1-based rank `i` of `n`, where rank 1 is the highest gradient.
    pub fn raw_weight(&self, rank: usize, n: usize) -> f64 {
        let frac = (1.0 - (-2.0 * rank as f64 / n as f64).exp()) / (1.0 - (-2.0f64).exp());
        1.0 + frac * (self.p1 - self.pn) + self.p1
    }
}

/// Smallest clamped retention weight; keeps weights inside (0, 1] even for
/// unusual profile endpoints.
const WEIGHT_FLOOR: f64 = 1e-12;
/// Weights this close to 1 are treated as certain retention.
const CERTAIN_THRESHOLD: f64 = 1.0 - 1e-12;

/// Clamped per-node retention weight, driven by the node's rank in the
/// aggregate gradient (descending; ties by ascending index).
pub fn retention_weights(aggregate_gradient: &[f64], profile: &RetentionProfile) -> Result<Vec<f64>> {
    profile.validate()?;
    if aggregate_gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidArgument(
            "aggregate gradient contains non-finite values".into(),
        ));
    }
    let n = aggregate_gradient.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        aggregate_gradient[b]
            .partial_cmp(&aggregate_gradient[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut weights = vec![0.0; n];
    for (pos, &node) in order.iter().enumerate() {
        weights[node] = profile.raw_weight(pos + 1, n).clamp(WEIGHT_FLOOR, 1.0);
    }
    Ok(weights)
}

/// Select exactly `round(ratio * n)` nodes, biased toward high gradients.
///
/// The clamped rank weights are read as per-node retention probabilities:
/// weight-1 nodes are kept outright, and the remaining slots are filled by
/// weighted sampling without replacement with odds `w / (1 - w)`
/// (exponential-key draw), so high-gradient nodes are near-surely retained
/// while the target size stays exact. The result is sorted ascending by
/// original node index.
pub fn select_nodes(
    aggregate_gradient: &[f64],
    ratio: f64,
    profile: &RetentionProfile,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = aggregate_gradient.len();
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "compression ratio {ratio} outside (0, 1)"
        )));
    }
    if !STANDARD_RATIOS.iter().any(|r| (r - ratio).abs() < 1e-9) {
        eprintln!("warning: compression ratio {ratio} is outside the usual {{1/4, 1/3, 1/2}}");
    }
    let m = (ratio * n as f64).round() as usize;
    if m < 4 {
        return Err(Error::InvalidArgument(format!(
            "target size {m} too small for a meaningful level (n = {n}, ratio = {ratio})"
        )));
    }

    let weights = retention_weights(aggregate_gradient, profile)?;
    // Rank of each node in the gradient ordering, for deterministic
    // tie-breaking among equal keys (higher gradient wins).
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        aggregate_gradient[b]
            .partial_cmp(&aggregate_gradient[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut rank = vec![0usize; n];
    for (pos, &node) in order.iter().enumerate() {
        rank[node] = pos;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<f64> = weights
        .iter()
        .map(|&w| {
            let u: f64 = rng.random();
            if w >= CERTAIN_THRESHOLD {
                1.0
            } else {
                // key = u^{(1-w)/w}; monotone in the retention odds.
                u.powf((1.0 - w) / w)
            }
        })
        .collect();

    let mut candidates: Vec<usize> = (0..n).collect();
    candidates.sort_unstable_by(|&a, &b| {
        keys[b]
            .partial_cmp(&keys[a])
            .unwrap()
            .then(rank[a].cmp(&rank[b]))
    });
    let mut selected: Vec<usize> = candidates[..m].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Covariance-scaled distance over a point distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisMetric {
    covariance: Matrix3<f64>,
    inverse: Matrix3<f64>,
}

impl MahalanobisMetric {
    /// Metric from the population covariance of a point cloud, regularized
    /// with `1e-9 * trace` on the diagonal so flat clouds stay invertible.
    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::InvalidArgument(format!(
                "covariance needs at least 4 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "point cloud contains non-finite coordinates".into(),
            ));
        }
        let n = points.len() as f64;
        let mut mean = Vector3::zeros();
        for p in points {
            mean += Vector3::new(p[0], p[1], p[2]);
        }
        mean /= n;
        let mut cov = Matrix3::zeros();
        for p in points {
            let d = Vector3::new(p[0], p[1], p[2]) - mean;
            cov += d * d.transpose();
        }
        cov /= n;
        let trace = cov.trace();
        if !(trace > 0.0) {
            return Err(Error::Singular(
                "point cloud is a single point; covariance has zero trace".into(),
            ));
        }
        cov += Matrix3::identity() * (1e-9 * trace);
        Self::from_covariance(cov)
    }

    /// Metric from an explicit covariance matrix (must be SPD).
    pub fn from_covariance(covariance: Matrix3<f64>) -> Result<Self> {
        let chol = covariance
            .cholesky()
            .ok_or_else(|| Error::Singular("covariance is not positive definite".into()))?;
        Ok(MahalanobisMetric {
            covariance,
            inverse: chol.inverse(),
        })
    }

    pub fn covariance(&self) -> &Matrix3<f64> {
        &self.covariance
    }

    /// `sqrt((x - y)^T S^{-1} (x - y))`; zero for coincident points,
    /// symmetric in its arguments.
    pub fn distance(&self, x: &[f64; 3], y: &[f64; 3]) -> f64 {
        let d = Vector3::new(x[0] - y[0], x[1] - y[1], x[2] - y[2]);
        (d.dot(&(self.inverse * d))).max(0.0).sqrt()
    }
}

/// Directed Mahalanobis k-nearest-neighbor lists over one point cloud.
///
/// Candidates come from a Euclidean k-d-tree prefilter of size
/// `min(prefilter, n - 1)`; the `k` smallest Mahalanobis distances win,
/// ties broken by ascending index.
pub fn mahalanobis_knn(
    points: &[[f64; 3]],
    metric: &MahalanobisMetric,
    k: usize,
    prefilter: usize,
) -> Result<Vec<Vec<usize>>> {
    let n = points.len();
    if n <= k {
        return Err(Error::InvalidArgument(format!(
            "{n} points cannot supply {k} neighbors each"
        )));
    }
    if prefilter < k {
        return Err(Error::InvalidArgument(format!(
            "prefilter {prefilter} smaller than neighbor count {k}"
        )));
    }
    let tree = KdTree::build(points);
    let pool = prefilter.min(n - 1);
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let candidates = tree.knn_excluding(&points[i], pool, i);
            let mut ranked: Vec<(f64, usize)> = candidates
                .iter()
                .map(|&(_, j)| (metric.distance(&points[i], &points[j]), j))
                .collect();
            ranked.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            ranked.truncate(k);
            ranked.into_iter().map(|r| r.1).collect()
        })
        .collect())
}

/// Rebuild connectivity over the retained nodes.
///
/// The metric comes from the covariance of the FULL fine point cloud; the
/// directed k-NN edge set is symmetrized by union with its transpose, and
/// edge weights reuse the `exp(-d / mean_edge_length)` mapping on Euclidean
/// distances over the new edge set.
pub fn reconnect(
    fine_coords: &[[f64; 3]],
    selected: &[usize],
    k: usize,
    prefilter: usize,
) -> Result<Graph> {
    if selected.is_empty() {
        return Err(Error::InvalidArgument("empty selection".into()));
    }
    let metric = MahalanobisMetric::from_points(fine_coords)?;
    let coarse: Vec<[f64; 3]> = selected.iter().map(|&i| fine_coords[i]).collect();
    reconnect_with_metric(&coarse, &metric, k, prefilter)
}

/// [`reconnect`] with an externally supplied metric, for controlled tests
/// and the Euclidean-equivalence checks.
pub fn reconnect_with_metric(
    coarse_coords: &[[f64; 3]],
    metric: &MahalanobisMetric,
    k: usize,
    prefilter: usize,
) -> Result<Graph> {
    let knn = mahalanobis_knn(coarse_coords, metric, k, prefilter)?;
    let mut pairs = std::collections::BTreeSet::new();
    for (i, nbrs) in knn.iter().enumerate() {
        for &j in nbrs {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let lengths: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| {
            let d = [
                coarse_coords[a][0] - coarse_coords[b][0],
                coarse_coords[a][1] - coarse_coords[b][1],
                coarse_coords[a][2] - coarse_coords[b][2],
            ];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .collect();
    let mean_edge = lengths.iter().sum::<f64>() / lengths.len() as f64;
    if !(mean_edge > 0.0) {
        return Err(Error::InvalidGraph(
            "coarse mean edge length is not positive".into(),
        ));
    }
    let mut triplets = Vec::with_capacity(2 * pairs.len() + coarse_coords.len());
    for (&(a, b), &len) in pairs.iter().zip(&lengths) {
        let w = (-len / mean_edge).exp();
        triplets.push((a, b, w));
        triplets.push((b, a, w));
    }
    for i in 0..coarse_coords.len() {
        triplets.push((i, i, 1.0));
    }
    Graph::from_triplets(coarse_coords.len(), triplets, mean_edge)
}

/// One precomputed pooling level.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoolingLevel {
    pub fine_n: usize,
    pub coarse_n: usize,
    /// Retained fine-node indices, strictly increasing.
    pub selected: Vec<usize>,
    pub coarse_graph: Graph,
    /// Interpolation fine -> coarse (pooling).
    pub down: InterpolationMatrix,
    /// Interpolation coarse -> fine (unpooling).
    pub up: InterpolationMatrix,
}

impl PoolingLevel {
    pub fn coarse_coords(&self, fine_coords: &[[f64; 3]]) -> Vec<[f64; 3]> {
        self.selected.iter().map(|&i| fine_coords[i]).collect()
    }
}

/// Select, reconnect, and couple one pooling level. Levels are immutable
/// once built; training only ever applies them.
pub fn build_level(
    fine_coords: &[[f64; 3]],
    aggregate_gradient: &[f64],
    ratio: f64,
    profile: &RetentionProfile,
    seed: u64,
    mwls_params: &MwlsParams,
) -> Result<PoolingLevel> {
    if fine_coords.len() != aggregate_gradient.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} coordinates for {} gradient values",
            fine_coords.len(),
            aggregate_gradient.len()
        )));
    }
    let selected = select_nodes(aggregate_gradient, ratio, profile, seed)?;
    let coarse_graph = reconnect(
        fine_coords,
        &selected,
        RECONNECT_NEIGHBORS,
        RECONNECT_PREFILTER,
    )?;
    let coarse: Vec<[f64; 3]> = selected.iter().map(|&i| fine_coords[i]).collect();
    let (down, up) = mwls::build_pair(fine_coords, &coarse, mwls_params)?;
    Ok(PoolingLevel {
        fine_n: fine_coords.len(),
        coarse_n: selected.len(),
        selected,
        coarse_graph,
        down,
        up,
    })
}

/// Per-level health report serialized next to the level checkpoint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LevelDiagnostics {
    pub fine_n: usize,
    pub coarse_n: usize,
    pub coarse_connected: bool,
    /// Rows per basis level (quadratic, linear, constant).
    pub down_fallback: (usize, usize, usize),
    pub up_fallback: (usize, usize, usize),
    /// Max abs round-trip error of an affine probe field through
    /// down-then-up interpolation.
    pub affine_round_trip_error: f64,
}

pub fn level_diagnostics(level: &PoolingLevel, fine_coords: &[[f64; 3]]) -> Result<LevelDiagnostics> {
    let probe: Vec<f64> = fine_coords
        .iter()
        .map(|p| 0.3 + 1.7 * p[0] - 0.9 * p[1] + 0.5 * p[2])
        .collect();
    let probe = ndarray::Array1::from_vec(probe);
    let pooled = level.down.apply_vec(&probe.view())?;
    let round = level.up.apply_vec(&pooled.view())?;
    let affine_round_trip_error = probe
        .iter()
        .zip(round.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    Ok(LevelDiagnostics {
        fine_n: level.fine_n,
        coarse_n: level.coarse_n,
        coarse_connected: is_connected(&level.coarse_graph),
        down_fallback: level.down.fallback_counts(),
        up_fallback: level.up.fallback_counts(),
        affine_round_trip_error,
    })
}

/// Breadth-first connectivity over graph neighbors.
pub fn is_connected(graph: &Graph) -> bool {
    let n = graph.n_nodes();
    if n == 0 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for j in graph.neighbors(i) {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                queue.push_back(j);
            }
        }
    }
    count == n
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn raw_weight_endpoints_match_closed_form() {
        let profile = RetentionProfile::default();
        let n = 1000;
        // Lowest gradient (rank n): 1 + (p1 - pn) + p1 = 0.4.
        assert_relative_eq!(profile.raw_weight(n, n), 0.4, max_relative = 1e-12);
        // Highest gradients: raw weight approaches 1 + p1 = 1.2.
        assert!(profile.raw_weight(1, n) > 1.19 * (1.0 - 2.0 / n as f64));
        let grads: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let weights = retention_weights(&grads, &profile).unwrap();
        assert_eq!(weights[0], 1.0, "highest gradient clamps to 1");
        assert_relative_eq!(weights[n - 1], 0.4, max_relative = 1e-12);
        // Non-increasing along descending gradient order.
        for w in weights.windows(2) {
            assert!(w[0] >= w[1] - 1e-15);
        }
    }

    #[test]
    fn select_returns_exact_count_sorted_unique() {
        let grads: Vec<f64> = (0..100).map(|i| (i * 37 % 100) as f64).collect();
        let sel = select_nodes(&grads, 0.5, &RetentionProfile::default(), 7).unwrap();
        assert_eq!(sel.len(), 50);
        for w in sel.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(*sel.last().unwrap() < 100);
    }

    #[test]
    fn uniform_gradients_are_reproducible_under_seed() {
        let grads = vec![1.0; 240];
        let a = select_nodes(&grads, 0.25, &RetentionProfile::default(), 99).unwrap();
        let b = select_nodes(&grads, 0.25, &RetentionProfile::default(), 99).unwrap();
        assert_eq!(a, b);
        let c = select_nodes(&grads, 0.25, &RetentionProfile::default(), 100).unwrap();
        assert_ne!(a, c, "different seeds should shuffle the uniform draw");
    }

    #[test]
    fn high_gradient_nodes_are_always_kept() {
        // A handful of clearly dominant gradients land in the clamped
        // weight-1 plateau and must survive any seed.
        let mut grads = vec![0.01; 300];
        for i in 0..20 {
            grads[i * 15] = 100.0 + i as f64;
        }
        for seed in [1, 2, 3] {
            let sel = select_nodes(&grads, 1.0 / 3.0, &RetentionProfile::default(), seed).unwrap();
            for i in 0..20 {
                assert!(sel.contains(&(i * 15)), "seed {seed} dropped a shock node");
            }
        }
    }

    #[test]
    fn invalid_ratios_rejected() {
        let grads = vec![1.0; 50];
        let p = RetentionProfile::default();
        assert!(select_nodes(&grads, 0.0, &p, 1).is_err());
        assert!(select_nodes(&grads, 1.0, &p, 1).is_err());
        assert!(select_nodes(&grads, -0.2, &p, 1).is_err());
        // 50 * 0.05 = 2.5 -> too few nodes.
        assert!(select_nodes(&grads, 0.05, &p, 1).is_err());
    }

    #[test]
    fn mahalanobis_identity_equals_euclidean() {
        let metric = MahalanobisMetric::from_covariance(Matrix3::identity()).unwrap();
        let x: [f64; 3] = [1.0, -2.0, 0.5];
        let y: [f64; 3] = [0.0, 1.0, 2.0];
        let euclid = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt();
        assert_relative_eq!(metric.distance(&x, &y), euclid, max_relative = 1e-14);
        assert_eq!(metric.distance(&x, &x), 0.0);
    }

    #[test]
    fn mahalanobis_diagonal_closed_form() {
        let metric =
            MahalanobisMetric::from_covariance(Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)))
                .unwrap();
        let d = metric.distance(&[2.0, 0.0, 0.0], &[0.0, 0.0, 0.0]);
        assert_relative_eq!(d, 1.0, max_relative = 1e-14);
    }

    #[test]
    fn mahalanobis_is_invariant_under_linear_maps() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let points: Vec<[f64; 3]> = (0..60)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        // Mild invertible map; covariance regularization perturbs exact
        // invariance at the 1e-9 level, well inside tolerance.
        let l = Matrix3::new(1.0, 0.2, 0.0, 0.1, 0.9, 0.05, 0.0, 0.1, 1.1);
        let mapped: Vec<[f64; 3]> = points
            .iter()
            .map(|p| {
                let v = l * Vector3::new(p[0], p[1], p[2]);
                [v[0], v[1], v[2]]
            })
            .collect();
        let m_orig = MahalanobisMetric::from_points(&points).unwrap();
        let m_mapped = MahalanobisMetric::from_points(&mapped).unwrap();
        for i in (0..60).step_by(7) {
            for j in (1..60).step_by(11) {
                let d0 = m_orig.distance(&points[i], &points[j]);
                let d1 = m_mapped.distance(&mapped[i], &mapped[j]);
                assert!(
                    (d0 - d1).abs() <= 1e-8 * (1.0 + d0),
                    "distance changed under linear map: {d0} vs {d1}"
                );
            }
        }
    }

    #[test]
    fn collinear_points_connect_to_lattice_neighbors() {
        let points: Vec<[f64; 3]> = (0..6).map(|i| [i as f64, 0.0, 0.0]).collect();
        let metric = MahalanobisMetric::from_points(&points).unwrap();
        let knn = mahalanobis_knn(&points, &metric, 2, 5).unwrap();
        // Out-degree before symmetrization is exactly k.
        for nbrs in &knn {
            assert_eq!(nbrs.len(), 2);
        }
        // Brute-force oracle: for each point the two smallest Mahalanobis
        // distances (ties by index) are its lattice neighbors for interior
        // points.
        for i in 1..5 {
            let mut expect = vec![i - 1, i + 1];
            expect.sort_unstable();
            let mut got = knn[i].clone();
            got.sort_unstable();
            assert_eq!(got, expect);
        }
        let graph = reconnect_with_metric(&points, &metric, 2, 5).unwrap();
        for i in 1..5 {
            let nbrs: Vec<usize> = graph.neighbors(i).collect();
            assert!(nbrs.contains(&(i - 1)) && nbrs.contains(&(i + 1)));
        }
    }

    #[test]
    fn identity_covariance_matches_euclidean_knn() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let points: Vec<[f64; 3]> = (0..100)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let metric = MahalanobisMetric::from_covariance(Matrix3::identity()).unwrap();
        let got = mahalanobis_knn(&points, &metric, 5, 250).unwrap();
        let tree = KdTree::build(&points);
        for i in 0..points.len() {
            let expect: Vec<usize> = tree
                .knn_excluding(&points[i], 5, i)
                .into_iter()
                .map(|n| n.1)
                .collect();
            let mut want = expect.clone();
            want.sort_unstable();
            let mut have = got[i].clone();
            have.sort_unstable();
            assert_eq!(have, want, "neighbor set differs at node {i}");
        }
    }

    #[test]
    fn anisotropic_covariance_changes_neighbor_choice() {
        // Two candidate neighbors at equal Euclidean distance; squashing
        // the covariance along y makes the y-offset neighbor "farther".
        let points = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [5.0, 5.0, 0.0],
            [-5.0, 5.0, 0.0],
            [5.0, -5.0, 0.0],
        ];
        let metric = MahalanobisMetric::from_covariance(Matrix3::from_diagonal(&Vector3::new(
            1.0, 0.01, 1.0,
        )))
        .unwrap();
        let knn = mahalanobis_knn(&points, &metric, 1, 5).unwrap();
        assert_eq!(knn[0], vec![1], "x-offset neighbor should win under squashed y");
    }

    #[test]
    fn chained_levels_hit_exact_sizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let coords: Vec<[f64; 3]> = (0..900)
            .map(|_| {
                [
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..0.2),
                ]
            })
            .collect();
        let grads: Vec<f64> = (0..900).map(|i| ((i * 7919) % 900) as f64 / 900.0).collect();
        let params = MwlsParams::default();
        let l1 = build_level(&coords, &grads, 1.0 / 3.0, &RetentionProfile::default(), 1, &params)
            .unwrap();
        assert_eq!(l1.coarse_n, 300);
        assert_eq!(l1.selected.len(), 300);
        assert_eq!(l1.down.n_dest(), 300);
        assert_eq!(l1.down.n_source(), 900);
        assert_eq!(l1.up.n_dest(), 900);
        assert_eq!(l1.up.n_source(), 300);

        let coarse_coords = l1.coarse_coords(&coords);
        let coarse_grads: Vec<f64> = l1.selected.iter().map(|&i| grads[i]).collect();
        let l2 = build_level(
            &coarse_coords,
            &coarse_grads,
            1.0 / 3.0,
            &RetentionProfile::default(),
            2,
            &params,
        )
        .unwrap();
        assert_eq!(l2.coarse_n, 100);
    }

    #[test]
    fn level_diagnostics_report_round_trip_and_connectivity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let coords: Vec<[f64; 3]> = (0..300)
            .map(|_| {
                [
                    rng.random_range(0.0..2.0),
                    rng.random_range(0.0..2.0),
                    rng.random_range(0.0..0.1),
                ]
            })
            .collect();
        let grads = vec![1.0; 300];
        let level = build_level(
            &coords,
            &grads,
            0.5,
            &RetentionProfile::default(),
            3,
            &MwlsParams::default(),
        )
        .unwrap();
        let diag = level_diagnostics(&level, &coords).unwrap();
        assert_eq!(diag.coarse_n, 150);
        assert!(diag.coarse_connected);
        assert!(
            diag.affine_round_trip_error < 1e-6,
            "affine probe error {}",
            diag.affine_round_trip_error
        );
    }

    #[test]
    fn reconnect_needs_more_nodes_than_neighbors() {
        let points: Vec<[f64; 3]> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        let metric = MahalanobisMetric::from_points(&points).unwrap();
        assert!(reconnect_with_metric(&points, &metric, 5, 250).is_err());
    }
}
