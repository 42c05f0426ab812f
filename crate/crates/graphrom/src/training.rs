//! Training: min-max normalization fitted on the training split, the
//! moment-penalized loss, the Adam fit loop with stepped learning-rate
//! decay, and area-weighted evaluation metrics.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aero::{integrate_coefficients, AeroReference, CmyInfluence, Coefficients};
use crate::error::{Error, Result};
use crate::gcn::{AdamConfig, AdamState, GcnLayer};
use crate::mesh::SurfaceMesh;
use crate::model::{Model, INPUT_CHANNELS, N_HEADS};

/// One flow condition with its target surface fields (Cp, Cfx, Cfy, Cfz).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    /// Angle of attack in degrees.
    pub aoa: f64,
    /// Freestream Mach number.
    pub mach: f64,
    /// Physical-space targets, one row per mesh node, columns in head order.
    pub targets: Array2<f64>,
}

impl FlowSample {
    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        if self.targets.dim() != (n_nodes, N_HEADS) {
            return Err(Error::ShapeMismatch(format!(
                "sample targets {:?}, expected ({n_nodes}, {N_HEADS})",
                self.targets.dim()
            )));
        }
        if !self.aoa.is_finite()
            || !self.mach.is_finite()
            || self.targets.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("flow sample".into()));
        }
        Ok(())
    }
}

/// Min-max map of one channel onto [-1, 1]. A channel whose extrema coincide
/// is flagged degenerate and pinned to 0 in normalized space.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelScaler {
    pub min: f64,
    pub max: f64,
    pub degenerate: bool,
}

impl ChannelScaler {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for v in values {
            if !v.is_finite() {
                return Err(Error::NonFinite("scaler input".into()));
            }
            min = min.min(v);
            max = max.max(v);
            any = true;
        }
        if !any {
            return Err(Error::InvalidArgument("cannot fit a scaler to no data".into()));
        }
        Ok(ChannelScaler {
            min,
            max,
            degenerate: min == max,
        })
    }

    pub fn normalize(&self, x: f64) -> f64 {
        if self.degenerate {
            0.0
        } else {
            2.0 * (x - self.min) / (self.max - self.min) - 1.0
        }
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        if self.degenerate {
            self.min
        } else {
            (u + 1.0) / 2.0 * (self.max - self.min) + self.min
        }
    }

    /// Slope of `denormalize`; zero for degenerate channels.
    pub fn half_range(&self) -> f64 {
        if self.degenerate {
            0.0
        } else {
            (self.max - self.min) / 2.0
        }
    }
}

/// Per-channel scalers for the 5 input channels (x, y, z, AoA, Mach) and the
/// 4 target channels, fitted on the training split only.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Scalers {
    pub inputs: Vec<ChannelScaler>,
    pub targets: Vec<ChannelScaler>,
}

impl Scalers {
    /// Fit coordinate ranges from the mesh and condition/target ranges from
    /// the given (training) samples.
    pub fn fit(mesh: &SurfaceMesh, train: &[FlowSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument(
                "scalers need at least one training sample".into(),
            ));
        }
        for s in train {
            s.validate(mesh.n_nodes())?;
        }
        let mut inputs = Vec::with_capacity(INPUT_CHANNELS);
        for k in 0..3 {
            inputs.push(ChannelScaler::fit(mesh.nodes().iter().map(|n| n[k]))?);
        }
        inputs.push(ChannelScaler::fit(train.iter().map(|s| s.aoa))?);
        inputs.push(ChannelScaler::fit(train.iter().map(|s| s.mach))?);
        let mut targets = Vec::with_capacity(N_HEADS);
        for c in 0..N_HEADS {
            targets.push(ChannelScaler::fit(
                train.iter().flat_map(|s| s.targets.column(c).to_vec()),
            )?);
        }
        Ok(Scalers { inputs, targets })
    }

    /// Normalized n x 5 feature matrix for one flow condition.
    pub fn input_features(&self, mesh: &SurfaceMesh, aoa: f64, mach: f64) -> Array2<f64> {
        let n = mesh.n_nodes();
        let mut features = Array2::zeros((n, INPUT_CHANNELS));
        for (i, node) in mesh.nodes().iter().enumerate() {
            for k in 0..3 {
                features[[i, k]] = self.inputs[k].normalize(node[k]);
            }
            features[[i, 3]] = self.inputs[3].normalize(aoa);
            features[[i, 4]] = self.inputs[4].normalize(mach);
        }
        features
    }

    pub fn normalize_targets(&self, physical: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = physical.to_owned();
        for (c, scaler) in self.targets.iter().enumerate() {
            out.column_mut(c).mapv_inplace(|v| scaler.normalize(v));
        }
        out
    }

    pub fn denormalize_targets(&self, normalized: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = normalized.to_owned();
        for (c, scaler) in self.targets.iter().enumerate() {
            out.column_mut(c).mapv_inplace(|v| scaler.denormalize(v));
        }
        out
    }
}

/// Algebraic form of the pitching-moment term added to the MSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentPenalty {
    /// `lambda * |CMy(pred) - CMy(truth)|` (default).
    AbsoluteError,
    /// `lambda * CMy(pred)` taken literally.
    SignedValue,
    /// `lambda * (CMy(pred) - CMy(truth))^2`.
    SquaredError,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Samples per optimizer step; the method is defined for 1.
    pub batch_size: usize,
    /// Weight of the pitching-moment term.
    pub lambda: f64,
    pub penalty: MomentPenalty,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            adam: AdamConfig::default(),
            batch_size: 1,
            lambda: 0.01,
            penalty: MomentPenalty::AbsoluteError,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::InvalidConfig(format!(
                "batch size must be 1, got {}",
                self.batch_size
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Mesh-derived constants shared by loss evaluation and metrics: scalers
/// (fitted on the training split at construction), the CMy influence
/// weights, and the aerodynamic reference.
#[derive(Debug, Clone)]
pub struct TrainContext<'a> {
    pub mesh: &'a SurfaceMesh,
    pub reference: AeroReference,
    pub scalers: Scalers,
    pub cmy: CmyInfluence,
}

impl<'a> TrainContext<'a> {
    pub fn new(
        mesh: &'a SurfaceMesh,
        reference: AeroReference,
        train: &[FlowSample],
    ) -> Result<Self> {
        let scalers = Scalers::fit(mesh, train)?;
        let cmy = CmyInfluence::build(mesh, &reference)?;
        Ok(TrainContext {
            mesh,
            reference,
            scalers,
            cmy,
        })
    }

    /// Rebuild a context around previously fitted scalers (e.g. restored from
    /// a checkpoint) instead of refitting them on a training split.
    pub fn from_scalers(
        mesh: &'a SurfaceMesh,
        reference: AeroReference,
        scalers: Scalers,
    ) -> Result<Self> {
        let cmy = CmyInfluence::build(mesh, &reference)?;
        Ok(TrainContext {
            mesh,
            reference,
            scalers,
            cmy,
        })
    }
}

/// Moment-influence weights pulled back into normalized prediction space:
/// d CMy / d pred_norm[:, c].
fn cmy_normalized_weights(ctx: &TrainContext<'_>) -> [Array1<f64>; N_HEADS] {
    let a = |c: usize| ctx.scalers.targets[c].half_range();
    [
        &ctx.cmy.cp_weights * a(0),
        &ctx.cmy.cf_weights.column(0) * a(1),
        &ctx.cmy.cf_weights.column(1) * a(2),
        &ctx.cmy.cf_weights.column(2) * a(3),
    ]
}

/// Loss in normalized space and its gradient with respect to the prediction:
/// mean squared error over all node-channel entries plus the configured
/// pitching-moment term evaluated in physical space.
pub fn loss_and_grad(
    pred: &ArrayView2<'_, f64>,
    truth: &ArrayView2<'_, f64>,
    ctx: &TrainContext<'_>,
    lambda: f64,
    penalty: MomentPenalty,
) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != truth.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    if pred.iter().chain(truth.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss inputs".into()));
    }
    let n_entries = pred.len() as f64;
    let diff = pred - truth;
    let mse = diff.mapv(|v| v * v).sum() / n_entries;
    let mut grad = &diff * (2.0 / n_entries);

    let weights = cmy_normalized_weights(ctx);
    // Both fields share the affine de-normalization, so the offset terms of
    // CMy cancel in the difference.
    let delta: f64 = (0..N_HEADS).map(|c| weights[c].dot(&diff.column(c))).sum();
    let (term, slope) = match penalty {
        MomentPenalty::AbsoluteError => {
            let sign = if delta > 0.0 {
                1.0
            } else if delta < 0.0 {
                -1.0
            } else {
                0.0
            };
            (lambda * delta.abs(), lambda * sign)
        }
        MomentPenalty::SignedValue => {
            let phys = ctx.scalers.denormalize_targets(pred);
            let cmy = ctx.cmy.evaluate(
                &phys.column(0),
                &phys.slice(ndarray::s![.., 1..]),
            )?;
            (lambda * cmy, lambda)
        }
        MomentPenalty::SquaredError => (lambda * delta * delta, 2.0 * lambda * delta),
    };
    if slope != 0.0 {
        for c in 0..N_HEADS {
            let mut col = grad.column_mut(c);
            col.scaled_add(slope, &weights[c]);
        }
    }
    Ok((mse + term, grad))
}

/// One epoch of the training record. `train_loss` is the running mean of the
/// per-sample losses as they were seen during the epoch's updates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Outcome of a fit: the model holds the best-on-validation parameters.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub history: History,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Train in place: shuffled single-sample updates per epoch, Adam with the
/// stepped learning-rate schedule, best-on-validation parameters retained.
/// The test split never enters here by construction.
pub fn fit(
    model: &mut Model,
    ctx: &TrainContext<'_>,
    train: &[FlowSample],
    val: &[FlowSample],
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let n = model.geometry.n_fine();
    if ctx.mesh.n_nodes() != n {
        return Err(Error::ShapeMismatch(format!(
            "mesh has {} nodes but the model was built for {n}",
            ctx.mesh.n_nodes()
        )));
    }
    for s in train.iter().chain(val) {
        s.validate(n)?;
    }

    let prep = |samples: &[FlowSample]| -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let features = samples
            .iter()
            .map(|s| ctx.scalers.input_features(ctx.mesh, s.aoa, s.mach))
            .collect();
        let targets = samples
            .iter()
            .map(|s| ctx.scalers.normalize_targets(&s.targets.view()))
            .collect();
        (features, targets)
    };
    let (train_x, train_y) = prep(train);
    let (val_x, val_y) = prep(val);

    let mut adam: Vec<(AdamState<ndarray::Ix2>, AdamState<ndarray::Ix1>)> = model
        .layers
        .iter()
        .map(|l| {
            (
                AdamState::new(config.adam, l.weight.raw_dim()),
                AdamState::new(config.adam, l.prelu_beta.raw_dim()),
            )
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = History::default();
    let mut best: Option<(f64, usize, Vec<GcnLayer>)> = None;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut train_loss_sum = 0.0;
        for &i in &order {
            let step = (|| -> Result<f64> {
                let (out, tape) = model.forward(&train_x[i].view())?;
                let (loss, grad) =
                    loss_and_grad(&out.view(), &train_y[i].view(), ctx, config.lambda, config.penalty)?;
                let grads = model.backward(tape, &grad.view())?;
                for (idx, (layer, lg)) in
                    model.layers.iter_mut().zip(grads.layers).enumerate()
                {
                    adam[idx]
                        .0
                        .step(&format!("layer{idx}.weight"), epoch, &mut layer.weight, &lg.weight)?;
                    adam[idx].1.step(
                        &format!("layer{idx}.prelu"),
                        epoch,
                        &mut layer.prelu_beta,
                        &lg.prelu_beta,
                    )?;
                }
                Ok(loss)
            })();
            let loss = step.map_err(|e| {
                Error::InvalidArgument(format!(
                    "training diverged at epoch {epoch}, sample {i}: {e}"
                ))
            })?;
            train_loss_sum += loss;
        }
        let train_loss = train_loss_sum / train.len() as f64;

        let mut val_loss_sum = 0.0;
        for (x, y) in val_x.iter().zip(&val_y) {
            let out = model.predict(&x.view())?;
            let (loss, _) =
                loss_and_grad(&out.view(), &y.view(), ctx, config.lambda, config.penalty)?;
            val_loss_sum += loss;
        }
        // With no validation samples the selection falls back to train loss.
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            val_loss_sum / val.len() as f64
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: config.adam.lr_at(epoch),
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.layers.clone()));
        }
    }
    let (best_val_loss, best_epoch, layers) = best.expect("at least one epoch ran");
    model.layers = layers;
    Ok(FitResult {
        history,
        best_epoch,
        best_val_loss,
    })
}

/// Denominator floor of the area-weighted MAPE, in normalized units.
pub const MAPE_FLOOR_NORMALIZED: f64 = 1e-3;
/// Denominator floor of coefficient percentage errors.
pub const COEFF_FLOOR: f64 = 1e-6;

/// Area-weighted field metrics for one sample, from physical-space fields:
/// MAPE per channel in percent (computed in normalized units with the
/// documented denominator floor) and MAE per channel in physical units.
pub fn field_metrics(
    mesh: &SurfaceMesh,
    scalers: &Scalers,
    pred_physical: &ArrayView2<'_, f64>,
    truth_physical: &ArrayView2<'_, f64>,
) -> Result<([f64; N_HEADS], [f64; N_HEADS])> {
    if pred_physical.dim() != truth_physical.dim()
        || pred_physical.dim() != (mesh.n_nodes(), N_HEADS)
    {
        return Err(Error::ShapeMismatch(format!(
            "metric fields {:?} / {:?} on {} nodes",
            pred_physical.dim(),
            truth_physical.dim(),
            mesh.n_nodes()
        )));
    }
    let weights = mesh.node_areas();
    let total: f64 = weights.iter().sum();
    let pred_n = scalers.normalize_targets(pred_physical);
    let truth_n = scalers.normalize_targets(truth_physical);
    let mut mape = [0.0; N_HEADS];
    let mut mae = [0.0; N_HEADS];
    for c in 0..N_HEADS {
        let mut ape_sum = 0.0;
        let mut ae_sum = 0.0;
        for i in 0..mesh.n_nodes() {
            let e_norm = (pred_n[[i, c]] - truth_n[[i, c]]).abs();
            let denom = truth_n[[i, c]].abs().max(MAPE_FLOOR_NORMALIZED);
            ape_sum += weights[i] * e_norm / denom;
            ae_sum += weights[i] * (pred_physical[[i, c]] - truth_physical[[i, c]]).abs();
        }
        mape[c] = 100.0 * ape_sum / total;
        mae[c] = ae_sum / total;
    }
    Ok((mape, mae))
}

/// Metrics for one evaluated sample.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SampleMetrics {
    pub aoa: f64,
    pub mach: f64,
    /// Area-weighted MAPE percent per channel (Cp, Cfx, Cfy, Cfz).
    pub mape_percent: [f64; N_HEADS],
    /// Area-weighted MAE per channel, physical units.
    pub mae: [f64; N_HEADS],
    pub pred_coefficients: Coefficients,
    pub truth_coefficients: Coefficients,
    /// |pred - truth| / max(|truth|, floor) * 100 for CL, CD, CMy.
    pub coefficient_error_percent: [f64; 3],
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Evaluation {
    pub per_sample: Vec<SampleMetrics>,
    pub mean_mape_percent: [f64; N_HEADS],
    pub mean_mae: [f64; N_HEADS],
    pub mean_coefficient_error_percent: [f64; 3],
}

impl Evaluation {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("metrics serialization: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Run inference on each sample and report field metrics plus integrated
/// coefficient errors.
pub fn evaluate(
    model: &Model,
    ctx: &TrainContext<'_>,
    samples: &[FlowSample],
) -> Result<Evaluation> {
    let n = model.geometry.n_fine();
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate(n)?;
        let features = ctx.scalers.input_features(ctx.mesh, s.aoa, s.mach);
        let pred_norm = model.predict(&features.view())?;
        let pred_phys = ctx.scalers.denormalize_targets(&pred_norm.view());
        let (mape_percent, mae) =
            field_metrics(ctx.mesh, &ctx.scalers, &pred_phys.view(), &s.targets.view())?;
        let reference = AeroReference {
            alpha_deg: s.aoa,
            ..ctx.reference
        };
        let coeffs = |fields: &ArrayView2<'_, f64>| -> Result<Coefficients> {
            integrate_coefficients(
                ctx.mesh,
                &fields.column(0),
                &fields.slice(ndarray::s![.., 1..]),
                &reference,
            )
        };
        let pred_coefficients = coeffs(&pred_phys.view())?;
        let truth_coefficients = coeffs(&s.targets.view())?;
        let pct = |p: f64, t: f64| 100.0 * (p - t).abs() / t.abs().max(COEFF_FLOOR);
        per_sample.push(SampleMetrics {
            aoa: s.aoa,
            mach: s.mach,
            mape_percent,
            mae,
            pred_coefficients,
            truth_coefficients,
            coefficient_error_percent: [
                pct(pred_coefficients.cl, truth_coefficients.cl),
                pct(pred_coefficients.cd, truth_coefficients.cd),
                pct(pred_coefficients.cmy, truth_coefficients.cmy),
            ],
        });
    }
    let mean = |f: &dyn Fn(&SampleMetrics) -> f64| -> f64 {
        if per_sample.is_empty() {
            0.0
        } else {
            per_sample.iter().map(f).sum::<f64>() / per_sample.len() as f64
        }
    };
    let mut mean_mape_percent = [0.0; N_HEADS];
    let mut mean_mae = [0.0; N_HEADS];
    for c in 0..N_HEADS {
        mean_mape_percent[c] = mean(&|s: &SampleMetrics| s.mape_percent[c]);
        mean_mae[c] = mean(&|s: &SampleMetrics| s.mae[c]);
    }
    let mut mean_coefficient_error_percent = [0.0; 3];
    for k in 0..3 {
        mean_coefficient_error_percent[k] =
            mean(&|s: &SampleMetrics| s.coefficient_error_percent[k]);
    }
    Ok(Evaluation {
        per_sample,
        mean_mape_percent,
        mean_mae,
        mean_coefficient_error_percent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarsen::{build_level, RetentionProfile};
    use crate::graph::build_graph;
    use crate::model::{ModelConfig, ModelGeometry};
    use crate::mwls::MwlsParams;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use rand::Rng;
    use std::sync::Arc;

    fn plate_mesh(nx: usize, ny: usize) -> SurfaceMesh {
        let mut nodes = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                nodes.push([
                    i as f64 / (nx - 1) as f64,
                    j as f64 / (ny - 1) as f64,
                    0.0,
                ]);
            }
        }
        let mut cells = Vec::new();
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let a = j * nx + i;
                let (b, c, d) = (a + 1, a + nx, a + nx + 1);
                cells.push([a, b, d]);
                cells.push([a, d, c]);
            }
        }
        SurfaceMesh::new(nodes, cells).unwrap()
    }

    fn reference() -> AeroReference {
        AeroReference {
            chord: 1.0,
            area: 1.0,
            moment_point: [0.3, 0.5, 0.0],
            alpha_deg: 0.0,
        }
    }

    /// Smooth analytic targets so short fits can make visible progress.
    fn synthetic_sample(mesh: &SurfaceMesh, aoa: f64, mach: f64) -> FlowSample {
        let mut targets = Array2::zeros((mesh.n_nodes(), N_HEADS));
        for (i, n) in mesh.nodes().iter().enumerate() {
            let (x, y) = (n[0], n[1]);
            targets[[i, 0]] = -0.5 - 0.1 * aoa + 0.4 * (3.0 * (x - 0.4 * mach)).tanh() * y;
            targets[[i, 1]] = 0.005 + 0.002 * x * aoa;
            targets[[i, 2]] = 0.001 * (y - 0.5) * mach;
            targets[[i, 3]] = 0.0005 * x * y;
        }
        FlowSample { aoa, mach, targets }
    }

    fn samples(mesh: &SurfaceMesh, conditions: &[(f64, f64)]) -> Vec<FlowSample> {
        conditions
            .iter()
            .map(|&(a, m)| synthetic_sample(mesh, a, m))
            .collect()
    }

    fn tiny_model(mesh: &SurfaceMesh, seed: u64) -> Model {
        let graph = build_graph(mesh).unwrap();
        let coords = mesh.nodes().to_vec();
        let gradient = vec![1.0; coords.len()];
        let profile = RetentionProfile::default();
        let params = MwlsParams::default();
        let level1 = build_level(&coords, &gradient, 1.0 / 3.0, &profile, 3, &params).unwrap();
        let mid = level1.coarse_coords(&coords);
        let level2 =
            build_level(&mid, &vec![1.0; mid.len()], 1.0 / 2.0, &profile, 4, &params).unwrap();
        let geometry = Arc::new(ModelGeometry::new(&graph, &[level1, level2]).unwrap());
        let config = ModelConfig {
            encoder_blocks: vec![vec![32], vec![32], vec![32]],
            reduced_block: vec![32],
            ratios: [1.0 / 3.0, 1.0 / 2.0],
        };
        Model::build(config, geometry, seed).unwrap()
    }

    #[test]
    fn scalers_map_training_extrema_to_unit_bounds() {
        let mesh = plate_mesh(5, 4);
        let train = samples(&mesh, &[(0.0, 0.70), (5.0, 0.84), (2.5, 0.78)]);
        let s = Scalers::fit(&mesh, &train).unwrap();
        assert_relative_eq!(s.inputs[3].normalize(0.0), -1.0, epsilon = 1e-15);
        assert_relative_eq!(s.inputs[3].normalize(5.0), 1.0, epsilon = 1e-15);
        assert_relative_eq!(s.inputs[4].normalize(0.84), 1.0, epsilon = 1e-15);
        for c in 0..N_HEADS {
            let min = train
                .iter()
                .flat_map(|smp| smp.targets.column(c).to_vec())
                .fold(f64::INFINITY, f64::min);
            assert_relative_eq!(s.targets[c].normalize(min), -1.0, epsilon = 1e-12);
        }
        // Round trip is the identity.
        for x in [0.013, -0.4, 0.72] {
            let u = s.targets[0].normalize(x);
            assert_relative_eq!(s.targets[0].denormalize(u), x, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_channel_is_pinned_to_zero() {
        // A flat plate has constant z.
        let mesh = plate_mesh(4, 3);
        let train = samples(&mesh, &[(1.0, 0.75), (3.0, 0.8)]);
        let s = Scalers::fit(&mesh, &train).unwrap();
        assert!(s.inputs[2].degenerate);
        assert_eq!(s.inputs[2].normalize(0.0), 0.0);
        assert_eq!(s.inputs[2].denormalize(0.0), 0.0);
    }

    #[test]
    fn loss_is_zero_with_zero_gradient_when_prediction_is_exact() {
        let mesh = plate_mesh(5, 2);
        let train = samples(&mesh, &[(0.0, 0.7), (5.0, 0.84)]);
        let ctx = TrainContext::new(&mesh, reference(), &train).unwrap();
        let truth = ctx.scalers.normalize_targets(&train[0].targets.view());
        let (loss, grad) = loss_and_grad(
            &truth.view(),
            &truth.view(),
            &ctx,
            0.01,
            MomentPenalty::AbsoluteError,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_lambda_reduces_to_plain_mse() {
        let mesh = plate_mesh(5, 2);
        let train = samples(&mesh, &[(0.0, 0.7), (5.0, 0.84)]);
        let ctx = TrainContext::new(&mesh, reference(), &train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = mesh.n_nodes();
        let pred = Array2::from_shape_fn((n, N_HEADS), |_| rng.random_range(-1.0..1.0));
        let truth = Array2::from_shape_fn((n, N_HEADS), |_| rng.random_range(-1.0..1.0));
        let (loss, grad) = loss_and_grad(
            &pred.view(),
            &truth.view(),
            &ctx,
            0.0,
            MomentPenalty::AbsoluteError,
        )
        .unwrap();
        let diff = &pred - &truth;
        let want = diff.mapv(|v| v * v).sum() / (n * N_HEADS) as f64;
        assert_relative_eq!(loss, want, epsilon = 1e-15);
        let want_grad = &diff * (2.0 / (n * N_HEADS) as f64);
        assert_relative_eq!(grad, want_grad, epsilon = 1e-15);
    }

    #[test]
    fn penalty_gradients_match_finite_differences() {
        let mesh = plate_mesh(5, 2); // 10 nodes
        let train = samples(&mesh, &[(0.0, 0.7), (5.0, 0.84)]);
        let ctx = TrainContext::new(&mesh, reference(), &train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = mesh.n_nodes();
        let pred = Array2::from_shape_fn((n, N_HEADS), |_| rng.random_range(-1.0..1.0));
        let truth = Array2::from_shape_fn((n, N_HEADS), |_| rng.random_range(-1.0..1.0));
        for penalty in [
            MomentPenalty::AbsoluteError,
            MomentPenalty::SignedValue,
            MomentPenalty::SquaredError,
        ] {
            let (_, grad) =
                loss_and_grad(&pred.view(), &truth.view(), &ctx, 0.01, penalty).unwrap();
            let h = 1e-6;
            for i in 0..n {
                for c in 0..N_HEADS {
                    let mut up = pred.clone();
                    up[[i, c]] += h;
                    let mut down = pred.clone();
                    down[[i, c]] -= h;
                    let (lu, _) =
                        loss_and_grad(&up.view(), &truth.view(), &ctx, 0.01, penalty).unwrap();
                    let (ld, _) =
                        loss_and_grad(&down.view(), &truth.view(), &ctx, 0.01, penalty).unwrap();
                    let want = (lu - ld) / (2.0 * h);
                    let denom = want.abs().max(1e-7);
                    assert!(
                        (grad[[i, c]] - want).abs() / denom < 1e-5,
                        "{penalty:?} grad[{i},{c}]: {} vs fd {want}",
                        grad[[i, c]]
                    );
                }
            }
        }
    }

    #[test]
    fn history_covers_every_epoch_with_scheduled_lr() {
        let mesh = plate_mesh(12, 9);
        let train = samples(&mesh, &[(0.0, 0.70), (2.0, 0.75), (5.0, 0.84)]);
        let val = samples(&mesh, &[(1.0, 0.72)]);
        let ctx = TrainContext::new(&mesh, reference(), &train).unwrap();
        let mut model = tiny_model(&mesh, 1);
        let config = TrainConfig {
            epochs: 61,
            ..TrainConfig::default()
        };
        let result = fit(&mut model, &ctx, &train, &val, &config).unwrap();
        assert_eq!(result.history.epochs.len(), 61);
        let lr = |e: usize| result.history.epochs[e].lr;
        assert_relative_eq!(lr(0), 0.001, max_relative = 1e-12);
        assert_relative_eq!(lr(30), 0.0009, max_relative = 1e-12);
        assert_relative_eq!(lr(60), 0.00081, max_relative = 1e-12);
        assert!(result.best_val_loss.is_finite());
        assert!(result.best_epoch < 61);

        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("history.csv");
        result.history.save_csv(&csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,lr\n"));
        assert_eq!(text.lines().count(), 62);
    }

    #[test]
    fn same_seed_fits_are_bit_identical() {
        let mesh = plate_mesh(12, 9);
        let train = samples(&mesh, &[(0.0, 0.70), (2.0, 0.75), (5.0, 0.84)]);
        let val = samples(&mesh, &[(1.0, 0.72)]);
        let ctx = TrainContext::new(&mesh, reference(), &train).unwrap();
        let config = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = tiny_model(&mesh, 1);
            fit(&mut model, &ctx, &train, &val, &config).unwrap();
            model
        };
        let a = run();
        let b = run();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.weight, lb.weight);
            assert_eq!(la.prelu_beta, lb.prelu_beta);
        }
    }

    #[test]
    fn single_sample_overfit_reaches_small_loss() {
        let mesh = plate_mesh(12, 9);
        let train = samples(&mesh, &[(2.5, 0.78)]);
        let ctx = TrainContext::new(&mesh, reference(), &train).unwrap();
        // Gentle pooling and a slower learning-rate decay so 2000 epochs of
        // single-sample updates can drive the loss toward zero.
        let graph = build_graph(&mesh).unwrap();
        let coords = mesh.nodes().to_vec();
        let profile = RetentionProfile::default();
        let params = MwlsParams::default();
        let level1 =
            build_level(&coords, &vec![1.0; coords.len()], 0.5, &profile, 3, &params).unwrap();
        let mid = level1.coarse_coords(&coords);
        let level2 =
            build_level(&mid, &vec![1.0; mid.len()], 0.5, &profile, 4, &params).unwrap();
        let geometry = Arc::new(ModelGeometry::new(&graph, &[level1, level2]).unwrap());
        let arch = ModelConfig {
            encoder_blocks: vec![vec![48], vec![48, 48], vec![48]],
            reduced_block: vec![48],
            ratios: [0.5, 0.5],
        };
        let mut model = Model::build(arch, geometry, 2).unwrap();
        let config = TrainConfig {
            epochs: 2000,
            adam: crate::gcn::AdamConfig {
                lr0: 0.005,
                decay_interval: 100,
                ..crate::gcn::AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let result = fit(&mut model, &ctx, &train, &[], &config).unwrap();
        let final_loss = result.history.epochs.last().unwrap().train_loss;
        assert!(
            final_loss < 1e-3,
            "loss after 2000 epochs: {final_loss}"
        );
    }

    #[test]
    fn early_training_loss_decreases_for_most_seeds() {
        let mesh = plate_mesh(12, 9);
        let train = samples(&mesh, &[(0.0, 0.70), (2.0, 0.75), (4.0, 0.80), (5.0, 0.84)]);
        let ctx = TrainContext::new(&mesh, reference(), &train).unwrap();
        let mut improved = 0;
        for seed in 0..10u64 {
            let mut model = tiny_model(&mesh, seed);
            let config = TrainConfig {
                epochs: 10,
                seed,
                ..TrainConfig::default()
            };
            let result = fit(&mut model, &ctx, &train, &[], &config).unwrap();
            let h = &result.history.epochs;
            if h[9].train_loss < h[0].train_loss {
                improved += 1;
            }
        }
        assert!(improved >= 8, "loss improved for only {improved}/10 seeds");
    }

    #[test]
    fn divergence_reports_epoch_and_sample() {
        let mesh = plate_mesh(12, 9);
        let train = samples(&mesh, &[(0.0, 0.70), (5.0, 0.84)]);
        let ctx = TrainContext::new(&mesh, reference(), &train).unwrap();
        let mut model = tiny_model(&mesh, 1);
        let config = TrainConfig {
            epochs: 50,
            adam: AdamConfig {
                lr0: 1e18,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let err = fit(&mut model, &ctx, &train, &[], &config).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("diverged") && msg.contains("epoch"), "{msg}");
    }

    #[test]
    fn exact_prediction_scores_zero_error() {
        let mesh = plate_mesh(5, 4);
        let train = samples(&mesh, &[(0.0, 0.7), (5.0, 0.84)]);
        let ctx = TrainContext::new(&mesh, reference(), &train).unwrap();
        let t = &train[0].targets;
        let (mape, mae) = field_metrics(&mesh, &ctx.scalers, &t.view(), &t.view()).unwrap();
        assert_eq!(mape, [0.0; N_HEADS]);
        assert_eq!(mae, [0.0; N_HEADS]);
    }

    #[test]
    fn uniform_error_on_uniform_mesh_gives_that_mae() {
        let mesh = plate_mesh(5, 4); // congruent triangles, uniform areas
        let train = samples(&mesh, &[(0.0, 0.7), (5.0, 0.84)]);
        let ctx = TrainContext::new(&mesh, reference(), &train).unwrap();
        let truth = &train[0].targets;
        let eps = 0.037;
        let pred = truth + eps;
        let (_, mae) = field_metrics(&mesh, &ctx.scalers, &pred.view(), &truth.view()).unwrap();
        for c in 0..N_HEADS {
            assert_relative_eq!(mae[c], eps, epsilon = 1e-12);
        }
    }

    #[test]
    fn weighted_mae_matches_direct_sum_on_skewed_mesh() {
        // Quadratic x-spacing makes cell areas non-uniform.
        let mut mesh = plate_mesh(6, 4);
        let nodes: Vec<[f64; 3]> = mesh
            .nodes()
            .iter()
            .map(|&[x, y, z]| [x * x, y, z])
            .collect();
        mesh = SurfaceMesh::new(nodes, mesh.cells().to_vec()).unwrap();
        let train = samples(&mesh, &[(0.0, 0.7), (5.0, 0.84)]);
        let ctx = TrainContext::new(&mesh, reference(), &train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = mesh.n_nodes();
        let truth = Array2::from_shape_fn((n, N_HEADS), |_| rng.random_range(-1.0..1.0));
        let pred = Array2::from_shape_fn((n, N_HEADS), |_| rng.random_range(-1.0..1.0));
        let (_, mae) = field_metrics(&mesh, &ctx.scalers, &pred.view(), &truth.view()).unwrap();
        let w = mesh.node_areas();
        let total: f64 = w.iter().sum();
        for c in 0..N_HEADS {
            let want: f64 = (0..n)
                .map(|i| w[i] * (pred[[i, c]] - truth[[i, c]]).abs())
                .sum::<f64>()
                / total;
            assert_relative_eq!(mae[c], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn evaluate_reports_per_sample_and_aggregate_metrics() {
        let mesh = plate_mesh(12, 9);
        let train = samples(&mesh, &[(0.0, 0.70), (2.0, 0.75), (5.0, 0.84)]);
        let test = samples(&mesh, &[(1.0, 0.72), (4.0, 0.82)]);
        let ctx = TrainContext::new(&mesh, reference(), &train).unwrap();
        let model = tiny_model(&mesh, 6);
        let eval = evaluate(&model, &ctx, &test).unwrap();
        assert_eq!(eval.per_sample.len(), 2);
        for s in &eval.per_sample {
            assert!(s.mape_percent.iter().all(|v| v.is_finite()));
            assert!(s.coefficient_error_percent.iter().all(|v| v.is_finite()));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.json");
        eval.save_json(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("mean_mape_percent"));
    }
}
