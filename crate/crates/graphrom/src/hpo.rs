//! Sequential model-based hyperparameter search.
//!
//! A Gaussian-process surrogate with a Matérn-5/2 kernel models the
//! validation objective over a mixed categorical/integer design space
//! (compression ratio, layers per block, width per encoder layer slot).
//! After an initial random stage, each trial maximizes expected improvement
//! over a seeded candidate pool. Failed trials are logged and excluded from
//! the surrogate; the whole run is deterministic under a fixed seed.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coarsen::{build_level, RetentionProfile};
use crate::error::{Error, Result};
use crate::gradient::aggregate_gradient_magnitude;
use crate::graph::build_graph;
use crate::mesh::SurfaceMesh;
use crate::model::{Model, ModelConfig, ModelGeometry};
use crate::mwls::MwlsParams;
use crate::training::{fit, FlowSample, TrainConfig, TrainContext};

/// Jitter added to the kernel diagonal for numerical stability.
const NUGGET: f64 = 1e-8;

/// Hyperparameter design space: compression ratio, block depths, and one
/// width choice per encoder layer slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Candidate compression ratios, each in (0, 1).
    pub ratios: Vec<f64>,
    /// Minimum layers per block.
    pub min_layers: usize,
    /// Maximum layers per block.
    pub max_layers: usize,
    /// Smallest layer width.
    pub width_min: usize,
    /// Largest layer width.
    pub width_max: usize,
    /// Width grid step.
    pub width_step: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            ratios: vec![0.25, 1.0 / 3.0, 0.5],
            min_layers: 1,
            max_layers: 3,
            width_min: 32,
            width_max: 512,
            width_step: 16,
        }
    }
}

/// Number of blocks carrying tunable widths: three encoder blocks plus the
/// free half of the reduced block.
const N_BLOCKS: usize = 4;
/// Width slots carried per block; slots beyond a block's depth are inactive.
const N_SLOTS: usize = 3;

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(0.0..1.0).contains(r) || *r <= 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "ratios {:?} must be non-empty and lie in (0, 1)",
                self.ratios
            )));
        }
        if self.min_layers == 0 || self.min_layers > self.max_layers || self.max_layers > N_SLOTS {
            return Err(Error::InvalidArgument(format!(
                "layer range [{}, {}] must lie within [1, {N_SLOTS}]",
                self.min_layers, self.max_layers
            )));
        }
        if self.width_step == 0
            || self.width_min == 0
            || self.width_min > self.width_max
            || self.width_min % self.width_step != 0
            || self.width_max % self.width_step != 0
        {
            return Err(Error::InvalidArgument(format!(
                "width grid [{}, {}] step {} is not aligned",
                self.width_min, self.width_max, self.width_step
            )));
        }
        Ok(())
    }

    fn n_width_choices(&self) -> usize {
        (self.width_max - self.width_min) / self.width_step + 1
    }

    /// Draw one grid-exact assignment. Inactive width slots are sampled too,
    /// so every draw consumes the same RNG stream length.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Assignment {
        let ratio = self.ratios[rng.random_range(0..self.ratios.len())];
        let mut block_layers = [0usize; N_BLOCKS];
        for slot in &mut block_layers {
            *slot = rng.random_range(self.min_layers..=self.max_layers);
        }
        let mut widths = [[0usize; N_SLOTS]; N_BLOCKS];
        for block in &mut widths {
            for width in block.iter_mut() {
                *width = self.width_min + rng.random_range(0..self.n_width_choices()) * self.width_step;
            }
        }
        Assignment { ratio, block_layers, widths }
    }

    /// Map an assignment to GP coordinates: the ratio one-hot encoded, then
    /// depths and widths scaled to [0, 1].
    fn encode(&self, assignment: &Assignment) -> Vec<f64> {
        let mut coords = Vec::with_capacity(self.ratios.len() + N_BLOCKS * (1 + N_SLOTS));
        let ratio_index = nearest_ratio(&self.ratios, assignment.ratio);
        for i in 0..self.ratios.len() {
            coords.push(if i == ratio_index { 1.0 } else { 0.0 });
        }
        let layer_span = (self.max_layers - self.min_layers).max(1) as f64;
        for &l in &assignment.block_layers {
            coords.push((l - self.min_layers) as f64 / layer_span);
        }
        let width_span = (self.width_max - self.width_min).max(1) as f64;
        for block in &assignment.widths {
            for &w in block {
                coords.push((w - self.width_min) as f64 / width_span);
            }
        }
        coords
    }
}

fn nearest_ratio(ratios: &[f64], ratio: f64) -> usize {
    ratios
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - ratio).abs().total_cmp(&(b.1 - ratio).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// One point of the design space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Compression ratio applied at both pooling levels.
    pub ratio: f64,
    /// Layer counts for encoder blocks 0..2 and the reduced block.
    pub block_layers: [usize; N_BLOCKS],
    /// Sampled width per (block, slot); only the first `block_layers[b]`
    /// slots of block `b` are active (for the reduced block, the free half).
    pub widths: [[usize; N_SLOTS]; N_BLOCKS],
}

impl Assignment {
    /// Expand into a full network configuration. The reduced block's tail
    /// retraces its entering width so the mirror constraint holds, and both
    /// pooling levels share the assignment's ratio.
    pub fn to_model_config(&self) -> Result<ModelConfig> {
        let encoder_blocks: Vec<Vec<usize>> = (0..3)
            .map(|b| self.widths[b][..self.block_layers[b]].to_vec())
            .collect();
        let entering = *encoder_blocks[2]
            .last()
            .ok_or_else(|| Error::InvalidArgument("encoder block 2 is empty".into()))?;
        let depth = self.block_layers[3];
        let free = depth.div_ceil(2);
        let mut reduced_block = self.widths[3][..free].to_vec();
        reduced_block.resize(depth, entering);
        let config = ModelConfig {
            encoder_blocks,
            reduced_block,
            ratios: [self.ratio; 2],
        };
        config.validate()?;
        Ok(config)
    }
}

/// Outcome classification for one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Failed,
}

/// One evaluated (or failed) design point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    #[serde(rename = "theta")]
    pub assignment: Assignment,
    /// Validation objective (lower is better); absent for failed trials.
    #[serde(rename = "y")]
    pub objective: Option<f64>,
    pub status: TrialStatus,
    /// Failure message, if any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    /// Objective evaluation time in seconds.
    pub wall_time: f64,
}

/// Search budget and seeding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub n_trials: usize,
    /// Random trials before the surrogate takes over.
    pub n_init: usize,
    /// Candidate pool size per acquisition maximization.
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self { n_trials: 30, n_init: 5, n_candidates: 1024, seed: 0 }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 || self.n_init == 0 || self.n_candidates == 0 {
            return Err(Error::InvalidArgument(format!(
                "n_trials {}, n_init {}, n_candidates {} must all be positive",
                self.n_trials, self.n_init, self.n_candidates
            )));
        }
        Ok(())
    }
}

/// Search outcome: the incumbent, the full log, and the best-so-far curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub best: Assignment,
    pub best_objective: f64,
    pub best_index: usize,
    pub trials: Vec<Trial>,
    /// Best objective among trials `0..=i`; infinite before the first
    /// success, non-increasing afterwards.
    pub best_curve: Vec<f64>,
}

/// Run the sequential search: `n_init` random trials, then GP-guided
/// expected-improvement proposals over a seeded candidate pool. Objective
/// failures mark their trial failed and the loop continues; the error is
/// recorded in the log.
pub fn optimize<F>(
    mut objective: F,
    space: &SearchSpace,
    config: &OptimizeConfig,
) -> Result<OptimizeResult>
where
    F: FnMut(&Assignment) -> Result<f64>,
{
    space.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trials: Vec<Trial> = Vec::with_capacity(config.n_trials);
    let mut best_curve = Vec::with_capacity(config.n_trials);
    let mut best: Option<(usize, f64)> = None;

    for index in 0..config.n_trials {
        let assignment = if index < config.n_init {
            space.sample(&mut rng)
        } else {
            propose(space, &trials, config.n_candidates, &mut rng)?
        };
        let start = Instant::now();
        let outcome = objective(&assignment).and_then(|y| {
            if y.is_finite() {
                Ok(y)
            } else {
                Err(Error::NonFinite(format!("objective for trial {index}")))
            }
        });
        let wall_time = start.elapsed().as_secs_f64();
        let trial = match outcome {
            Ok(y) => {
                if best.is_none_or(|(_, b)| y < b) {
                    best = Some((index, y));
                }
                Trial {
                    index,
                    assignment,
                    objective: Some(y),
                    status: TrialStatus::Ok,
                    error: None,
                    wall_time,
                }
            }
            Err(e) => Trial {
                index,
                assignment,
                objective: None,
                status: TrialStatus::Failed,
                error: Some(e.to_string()),
                wall_time,
            },
        };
        trials.push(trial);
        best_curve.push(best.map_or(f64::INFINITY, |(_, b)| b));
    }

    let (best_index, best_objective) = best.ok_or_else(|| {
        Error::InvalidArgument(format!("all {} trials failed", config.n_trials))
    })?;
    Ok(OptimizeResult {
        best: trials[best_index].assignment.clone(),
        best_objective,
        best_index,
        trials,
        best_curve,
    })
}

/// Pick the next design point: fit the GP on successful trials (in maximize
/// form) and take the EI-argmax over a fresh candidate pool. With fewer than
/// two observations the surrogate is uninformative, so sample at random.
fn propose(
    space: &SearchSpace,
    trials: &[Trial],
    n_candidates: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Assignment> {
    let mut points = Vec::new();
    let mut values = Vec::new();
    for trial in trials {
        if let Some(y) = trial.objective {
            points.push(space.encode(&trial.assignment));
            values.push(-y);
        }
    }
    if points.len() < 2 {
        return Ok(space.sample(rng));
    }
    let gp = Gp::fit(points, &values)?;
    let incumbent = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<(f64, Assignment)> = None;
    for _ in 0..n_candidates {
        let candidate = space.sample(rng);
        let (mean, std) = gp.predict(&space.encode(&candidate));
        let ei = expected_improvement(mean, std, incumbent);
        if best.as_ref().is_none_or(|(b, _)| ei > *b) {
            best = Some((ei, candidate));
        }
    }
    Ok(best.expect("candidate pool is non-empty").1)
}

/// Gaussian process with a Matérn-5/2 kernel on encoded coordinates,
/// standardized targets, and a fixed diagonal jitter.
struct Gp {
    points: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    mean: f64,
    scale: f64,
    length_scale: f64,
}

fn matern52(distance: f64, length_scale: f64) -> f64 {
    let a = 5.0f64.sqrt() * distance / length_scale;
    (1.0 + a + a * a / 3.0) * (-a).exp()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Gp {
    /// Fit on observations in maximize form. Exact duplicate coordinates keep
    /// their first observation so the Gram matrix stays positive definite.
    fn fit(points: Vec<Vec<f64>>, values: &[f64]) -> Result<Self> {
        let mut unique_points: Vec<Vec<f64>> = Vec::with_capacity(points.len());
        let mut unique_values: Vec<f64> = Vec::with_capacity(points.len());
        for (p, &v) in points.into_iter().zip(values) {
            if !unique_points.iter().any(|q| q == &p) {
                unique_points.push(p);
                unique_values.push(v);
            }
        }
        let n = unique_points.len();
        let dims = unique_points[0].len() as f64;
        // Half the diagonal of the encoded hypercube: a candidate differing
        // in roughly a quarter of its coordinates sits one length scale away.
        let length_scale = 0.5 * dims.sqrt();
        let mean = unique_values.iter().sum::<f64>() / n as f64;
        let variance =
            unique_values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let scale = if variance.sqrt() > 1e-12 { variance.sqrt() } else { 1.0 };
        let z = DVector::from_iterator(n, unique_values.iter().map(|v| (v - mean) / scale));

        let mut nugget = NUGGET;
        loop {
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    k[(i, j)] =
                        matern52(distance(&unique_points[i], &unique_points[j]), length_scale);
                }
                k[(i, i)] += nugget;
            }
            match Cholesky::new(k) {
                Some(chol) => {
                    let alpha = chol.solve(&z);
                    return Ok(Self {
                        points: unique_points,
                        chol,
                        alpha,
                        mean,
                        scale,
                        length_scale,
                    });
                }
                None if nugget < 1e-2 => nugget *= 100.0,
                None => {
                    return Err(Error::Singular(
                        "surrogate covariance is not positive definite".into(),
                    ))
                }
            }
        }
    }

    /// Posterior mean and standard deviation at one encoded point, on the
    /// raw (un-standardized) scale.
    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let n = self.points.len();
        let k = DVector::from_iterator(
            n,
            self.points.iter().map(|p| matern52(distance(p, x), self.length_scale)),
        );
        let mean_z = k.dot(&self.alpha);
        let solved = self.chol.solve(&k);
        let variance = (1.0 + NUGGET - k.dot(&solved)).max(0.0);
        (self.mean + self.scale * mean_z, self.scale * variance.sqrt())
    }
}

/// Expected improvement for maximization. Zero-variance points yield the
/// deterministic improvement, clamped at zero.
pub fn expected_improvement(mean: f64, std: f64, incumbent: f64) -> f64 {
    if std <= 0.0 {
        return (mean - incumbent).max(0.0);
    }
    let gamma = (mean - incumbent) / std;
    (std * (gamma * normal_cdf(gamma) + normal_pdf(gamma))).max(0.0)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Abramowitz–Stegun 7.1.26 rational approximation; absolute error below
/// 1.5e-7, ample for acquisition ranking.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Shared pooling geometries, one per candidate compression ratio. Building
/// the coarsened hierarchy is far more expensive than a trial's network
/// setup, so the cache is populated once and reused across all trials.
pub struct GeometryCache {
    entries: Vec<(f64, Arc<ModelGeometry>)>,
}

impl GeometryCache {
    /// Coarsen the mesh once per ratio, driving retention with the gradient
    /// magnitudes aggregated over every training field channel.
    pub fn build(
        mesh: &SurfaceMesh,
        train: &[FlowSample],
        ratios: &[f64],
        profile: &RetentionProfile,
        mwls: &MwlsParams,
        seed: u64,
    ) -> Result<Self> {
        let graph = build_graph(mesh)?;
        let fields: Vec<Vec<f64>> = train
            .iter()
            .flat_map(|s| (0..s.targets.ncols()).map(|c| s.targets.column(c).to_vec()))
            .collect();
        let aggregate = aggregate_gradient_magnitude(&graph, mesh.nodes(), &fields)?;
        let mut entries = Vec::with_capacity(ratios.len());
        for &ratio in ratios {
            let level1 = build_level(mesh.nodes(), &aggregate, ratio, profile, seed, mwls)?;
            let mid_coords = level1.coarse_coords(mesh.nodes());
            let mid_aggregate: Vec<f64> =
                level1.selected.iter().map(|&i| aggregate[i]).collect();
            let level2 = build_level(
                &mid_coords,
                &mid_aggregate,
                ratio,
                profile,
                seed.wrapping_add(1),
                mwls,
            )?;
            let geometry = ModelGeometry::new(&graph, &[level1, level2])?;
            entries.push((ratio, Arc::new(geometry)));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, ratio: f64) -> Option<&Arc<ModelGeometry>> {
        self.entries
            .iter()
            .find(|(r, _)| (r - ratio).abs() < 1e-9)
            .map(|(_, g)| g)
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.entries.iter().map(|(r, _)| *r).collect()
    }
}

/// Everything a trial evaluation needs besides the design point itself.
pub struct TrialSetup<'a> {
    pub ctx: &'a TrainContext<'a>,
    pub geometries: &'a GeometryCache,
    pub train: &'a [FlowSample],
    pub val: &'a [FlowSample],
    /// Per-trial training budget; the searcher conventionally caps epochs
    /// well below a final fit's.
    pub train_config: TrainConfig,
    pub model_seed: u64,
}

/// Evaluate one design point: build the network on the cached geometry for
/// its ratio, fit on the training split, and return the retained model's
/// plain mean-squared error over the validation split in normalized units.
pub fn trial_objective(setup: &TrialSetup<'_>, assignment: &Assignment) -> Result<f64> {
    if setup.val.is_empty() {
        return Err(Error::InvalidArgument(
            "trial objective needs a non-empty validation split".into(),
        ));
    }
    let geometry = setup.geometries.get(assignment.ratio).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "no pooling geometry cached for ratio {}; cached: {:?}",
            assignment.ratio,
            setup.geometries.ratios()
        ))
    })?;
    let config = assignment.to_model_config()?;
    let mut model = Model::build(config, geometry.clone(), setup.model_seed)?;
    fit(&mut model, setup.ctx, setup.train, setup.val, &setup.train_config)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in setup.val {
        let features = setup.ctx.scalers.input_features(setup.ctx.mesh, sample.aoa, sample.mach);
        let pred = model.predict(&features.view())?;
        let truth = setup.ctx.scalers.normalize_targets(&sample.targets.view());
        total += (&pred - &truth).mapv(|d| d * d).sum();
        count += pred.len();
    }
    Ok(total / count as f64)
}

/// Append-free trial log: one JSON record per line.
pub fn save_trials_jsonl(path: impl AsRef<Path>, trials: &[Trial]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for trial in trials {
        let line = serde_json::to_string(trial)
            .map_err(|e| Error::InvalidArgument(format!("trial encode: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
