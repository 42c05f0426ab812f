//! Autoencoder assembly: encoder blocks, two pooling levels, a reduced-space
//! block, the mirrored decoder, and four parallel single-output heads.
//!
//! Only the encoder and the first half of the reduced-space block are
//! configured; every decoder width is derived by retracing encoder layer
//! input widths in reverse from the reduced-space midpoint, so the network is
//! palindromic by construction and cannot drift out of dimensional agreement.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coarsen::PoolingLevel;
use crate::error::{Error, Result};
use crate::gcn::{gcn_backward, gcn_forward, GcnLayer, LayerGrads, LayerTape};
use crate::graph::{normalize_adjacency, Graph, PropagationOperator};
use crate::mwls::InterpolationMatrix;

/// Input feature channels: x, y, z, angle of attack, Mach number.
pub const INPUT_CHANNELS: usize = 5;
/// Output heads, concatenated in fixed order: Cp, Cfx, Cfy, Cfz.
pub const N_HEADS: usize = 4;
/// Layer width bounds and granularity.
pub const WIDTH_MIN: usize = 32;
pub const WIDTH_MAX: usize = 512;
pub const WIDTH_STEP: usize = 16;

/// Architecture description: three encoder blocks (the last one runs on the
/// mid-level graph), the reduced-space block, and the two compression ratios.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Layer widths per encoder block; blocks 0 and 1 run on the fine graph,
    /// block 2 on the mid graph after the first pooling.
    pub encoder_blocks: Vec<Vec<usize>>,
    /// Reduced-space block widths on the coarse graph. When it has more than
    /// one layer, the widths after the midpoint must retrace the earlier
    /// layers' input widths (the mirror pivots inside this block).
    pub reduced_block: Vec<usize>,
    /// Compression ratios of pooling levels 1 and 2.
    pub ratios: [f64; 2],
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_blocks.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "expected 3 encoder blocks, got {}",
                self.encoder_blocks.len()
            )));
        }
        let mut all_blocks: Vec<(&str, &[usize])> = self
            .encoder_blocks
            .iter()
            .enumerate()
            .map(|(i, b)| match i {
                0 => ("encoder block 0", b.as_slice()),
                1 => ("encoder block 1", b.as_slice()),
                _ => ("encoder block 2", b.as_slice()),
            })
            .collect();
        all_blocks.push(("reduced block", &self.reduced_block));
        for (name, widths) in &all_blocks {
            if widths.is_empty() || widths.len() > 3 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must have 1 to 3 layers, got {}",
                    widths.len()
                )));
            }
            for &w in *widths {
                if !(WIDTH_MIN..=WIDTH_MAX).contains(&w) || w % WIDTH_STEP != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "{name} width {w} is outside [{WIDTH_MIN}, {WIDTH_MAX}] or not a multiple of {WIDTH_STEP}"
                    )));
                }
            }
        }
        for (i, &r) in self.ratios.iter().enumerate() {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "compression ratio {} must lie in (0, 1), got {r}",
                    i + 1
                )));
            }
        }
        if self.reduced_block.len() >= 2 {
            let entering = *self.encoder_blocks[2].last().expect("validated non-empty");
            let chain = self.reduced_chain(entering);
            let l = self.reduced_block.len();
            let mid = l.div_ceil(2);
            for i in mid..l {
                let mirrored = chain[l - 1 - i];
                if self.reduced_block[i] != mirrored {
                    return Err(Error::InvalidConfig(format!(
                        "reduced block width {} at position {} breaks the mirror; expected {}",
                        self.reduced_block[i], i, mirrored
                    )));
                }
            }
        }
        Ok(())
    }

    /// Input widths of the reduced-block layers given the entering width.
    fn reduced_chain(&self, entering: usize) -> Vec<usize> {
        let mut chain = vec![entering];
        for &w in &self.reduced_block[..self.reduced_block.len() - 1] {
            chain.push(w);
        }
        chain
    }

    /// Derived decoder blocks: the first runs on the mid graph after the
    /// second unpooling, the second on the fine graph after the first.
    /// Each retraces the matching encoder block's layer input widths in
    /// reverse; encoder block 0's mirror position is taken by the heads.
    pub fn decoder_blocks(&self) -> [Vec<usize>; 2] {
        let entering1 = *self.encoder_blocks[0].last().expect("validated");
        let entering2 = *self.encoder_blocks[1].last().expect("validated");
        let retrace = |entering: usize, widths: &[usize]| -> Vec<usize> {
            let mut inputs = vec![entering];
            for &w in &widths[..widths.len() - 1] {
                inputs.push(w);
            }
            inputs.reverse();
            inputs
        };
        [
            retrace(entering2, &self.encoder_blocks[2]),
            retrace(entering1, &self.encoder_blocks[1]),
        ]
    }

    /// Width feeding the four heads (always encoder block 0's output width,
    /// by the palindrome).
    pub fn head_input_width(&self) -> usize {
        *self.encoder_blocks[0].last().expect("validated")
    }

    /// Total GCN layers including the four heads.
    pub fn layer_count(&self) -> usize {
        let enc: usize = self.encoder_blocks.iter().map(Vec::len).sum();
        let dec: usize = self.decoder_blocks().iter().map(Vec::len).sum();
        enc + self.reduced_block.len() + dec + N_HEADS
    }
}

/// Graph level a convolution stage runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphLevel {
    Fine,
    Mid,
    Coarse,
}

/// One step of the forward plan. `Conv` stages consume `model.layers` in
/// order; the four heads follow the last stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Conv(GraphLevel),
    Pool1,
    Pool2,
    Unpool2,
    Unpool1,
}

/// Propagation operators and interpolation matrices shared by every model
/// built on the same pooling levels; immutable, so trials can share one copy.
#[derive(Debug)]
pub struct ModelGeometry {
    pub fine_op: PropagationOperator,
    pub mid_op: PropagationOperator,
    pub coarse_op: PropagationOperator,
    pub pool1: InterpolationMatrix,
    pub pool2: InterpolationMatrix,
    pub unpool2: InterpolationMatrix,
    pub unpool1: InterpolationMatrix,
}

impl ModelGeometry {
    pub fn new(fine_graph: &Graph, levels: &[PoolingLevel; 2]) -> Result<Self> {
        if levels[0].fine_n != fine_graph.n_nodes() {
            return Err(Error::ShapeMismatch(format!(
                "level 1 was built on {} nodes but the fine graph has {}",
                levels[0].fine_n,
                fine_graph.n_nodes()
            )));
        }
        if levels[1].fine_n != levels[0].coarse_n {
            return Err(Error::ShapeMismatch(format!(
                "level 2 was built on {} nodes but level 1 retains {}",
                levels[1].fine_n, levels[0].coarse_n
            )));
        }
        Ok(ModelGeometry {
            fine_op: normalize_adjacency(fine_graph)?,
            mid_op: normalize_adjacency(&levels[0].coarse_graph)?,
            coarse_op: normalize_adjacency(&levels[1].coarse_graph)?,
            pool1: levels[0].down.clone(),
            pool2: levels[1].down.clone(),
            unpool2: levels[1].up.clone(),
            unpool1: levels[0].up.clone(),
        })
    }

    pub fn n_fine(&self) -> usize {
        self.fine_op.n_nodes()
    }

    pub fn n_mid(&self) -> usize {
        self.mid_op.n_nodes()
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse_op.n_nodes()
    }

    fn op(&self, level: GraphLevel) -> &PropagationOperator {
        match level {
            GraphLevel::Fine => &self.fine_op,
            GraphLevel::Mid => &self.mid_op,
            GraphLevel::Coarse => &self.coarse_op,
        }
    }
}

/// The assembled network: shared geometry, trainable layers in execution
/// order (heads last), and the stage plan derived from the configuration.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub geometry: Arc<ModelGeometry>,
    /// Execution order: encoder, reduced, decoder, then the 4 heads.
    pub layers: Vec<GcnLayer>,
    plan: Vec<Stage>,
}

/// Intermediates for one full forward pass; consumed by `backward`.
#[derive(Debug)]
pub struct ForwardTape {
    conv: Vec<LayerTape>,
    head_input: Array2<f64>,
    heads: Vec<LayerTape>,
}

/// Per-layer parameter gradients, aligned with `Model::layers`.
#[derive(Debug)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
}

fn stage_plan(config: &ModelConfig) -> Vec<Stage> {
    let mut plan = Vec::new();
    for _ in 0..config.encoder_blocks[0].len() + config.encoder_blocks[1].len() {
        plan.push(Stage::Conv(GraphLevel::Fine));
    }
    plan.push(Stage::Pool1);
    for _ in 0..config.encoder_blocks[2].len() {
        plan.push(Stage::Conv(GraphLevel::Mid));
    }
    plan.push(Stage::Pool2);
    for _ in 0..config.reduced_block.len() {
        plan.push(Stage::Conv(GraphLevel::Coarse));
    }
    plan.push(Stage::Unpool2);
    let [dec_mid, dec_fine] = config.decoder_blocks();
    for _ in 0..dec_mid.len() {
        plan.push(Stage::Conv(GraphLevel::Mid));
    }
    plan.push(Stage::Unpool1);
    for _ in 0..dec_fine.len() {
        plan.push(Stage::Conv(GraphLevel::Fine));
    }
    plan
}

/// Widths of every non-head layer in execution order, as (in, out) pairs.
fn conv_widths(config: &ModelConfig) -> Vec<(usize, usize)> {
    let mut widths = Vec::new();
    let mut current = INPUT_CHANNELS;
    let [dec_mid, dec_fine] = config.decoder_blocks();
    let blocks: Vec<&[usize]> = vec![
        &config.encoder_blocks[0],
        &config.encoder_blocks[1],
        &config.encoder_blocks[2],
        &config.reduced_block,
        &dec_mid,
        &dec_fine,
    ];
    for block in blocks {
        for &w in block {
            widths.push((current, w));
            current = w;
        }
    }
    widths
}

impl Model {
    /// Initialize all parameters from one seeded stream and wire the plan.
    pub fn build(config: ModelConfig, geometry: Arc<ModelGeometry>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.layer_count());
        for (c_in, c_out) in conv_widths(&config) {
            layers.push(GcnLayer::init(c_in, c_out, &mut rng));
        }
        let head_in = config.head_input_width();
        for _ in 0..N_HEADS {
            layers.push(GcnLayer::init(head_in, 1, &mut rng));
        }
        let plan = stage_plan(&config);
        Ok(Model {
            config,
            geometry,
            layers,
            plan,
        })
    }

    /// Rebuild a model from stored parameters, validating every layer's
    /// shape against what `build` would produce for this configuration.
    pub fn from_parts(
        config: ModelConfig,
        geometry: Arc<ModelGeometry>,
        layers: Vec<GcnLayer>,
    ) -> Result<Self> {
        config.validate()?;
        let mut expected: Vec<(usize, usize)> = conv_widths(&config);
        expected.extend(std::iter::repeat_n((config.head_input_width(), 1), N_HEADS));
        if layers.len() != expected.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} stored layers for a {}-layer architecture",
                layers.len(),
                expected.len()
            )));
        }
        for (idx, (layer, &(c_in, c_out))) in layers.iter().zip(&expected).enumerate() {
            layer.validate()?;
            if layer.in_channels() != c_in || layer.out_channels() != c_out {
                return Err(Error::ShapeMismatch(format!(
                    "layer {idx} is {}x{}, expected {c_in}x{c_out}",
                    layer.in_channels(),
                    layer.out_channels()
                )));
            }
        }
        let plan = stage_plan(&config);
        Ok(Model { config, geometry, layers, plan })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Parameter totals under both accounting conventions:
    /// (projection weights only, weights plus PReLU slopes).
    pub fn parameter_counts(&self) -> (usize, usize) {
        let weights: usize = self.layers.iter().map(|l| l.weight.len()).sum();
        let with_prelu: usize = self.layers.iter().map(GcnLayer::n_parameters).sum();
        (weights, with_prelu)
    }

    /// Slice of `layers` holding the four heads.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        self.layers.len() - N_HEADS..self.layers.len()
    }

    /// Full forward pass on normalized features; returns the n x 4 output
    /// and the tape needed for `backward`.
    pub fn forward(&self, features: &ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardTape)> {
        if features.dim() != (self.geometry.n_fine(), INPUT_CHANNELS) {
            return Err(Error::ShapeMismatch(format!(
                "input features {:?}, expected ({}, {INPUT_CHANNELS})",
                features.dim(),
                self.geometry.n_fine()
            )));
        }
        let mut h = features.to_owned();
        let mut conv_tapes = Vec::new();
        let mut layer_idx = 0usize;
        for stage in &self.plan {
            h = match stage {
                Stage::Conv(level) => {
                    let (out, tape) =
                        gcn_forward(self.geometry.op(*level), &h.view(), &self.layers[layer_idx])
                            .map_err(|e| self.at_layer(layer_idx, e))?;
                    layer_idx += 1;
                    conv_tapes.push(tape);
                    out
                }
                Stage::Pool1 => self.geometry.pool1.apply(&h.view())?,
                Stage::Pool2 => self.geometry.pool2.apply(&h.view())?,
                Stage::Unpool2 => self.geometry.unpool2.apply(&h.view())?,
                Stage::Unpool1 => self.geometry.unpool1.apply(&h.view())?,
            };
        }
        let head_input = h;
        let mut out = Array2::zeros((self.geometry.n_fine(), N_HEADS));
        let mut head_tapes = Vec::with_capacity(N_HEADS);
        for (k, idx) in self.head_range().enumerate() {
            let (col, tape) = gcn_forward(&self.geometry.fine_op, &head_input.view(), &self.layers[idx])
                .map_err(|e| self.at_layer(idx, e))?;
            out.slice_mut(s![.., k..k + 1]).assign(&col);
            head_tapes.push(tape);
        }
        Ok((
            out,
            ForwardTape {
                conv: conv_tapes,
                head_input,
                heads: head_tapes,
            },
        ))
    }

    /// Inference without tape bookkeeping.
    pub fn predict(&self, features: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward(features).map(|(out, _)| out)
    }

    /// Backpropagate an n x 4 upstream gradient through heads, decoder,
    /// reduced space, and encoder; returns per-layer parameter gradients
    /// aligned with `layers`.
    pub fn backward(&self, tape: ForwardTape, grad_out: &ArrayView2<'_, f64>) -> Result<ModelGrads> {
        if grad_out.dim() != (self.geometry.n_fine(), N_HEADS) {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {:?}, expected ({}, {N_HEADS})",
                grad_out.dim(),
                self.geometry.n_fine()
            )));
        }
        let ForwardTape {
            conv,
            head_input,
            heads,
        } = tape;
        let mut grads: Vec<Option<LayerGrads>> = (0..self.layers.len()).map(|_| None).collect();
        let mut grad_h = Array2::zeros(head_input.dim());
        for ((k, idx), head_tape) in self.head_range().enumerate().zip(heads) {
            let g_col = grad_out.slice(s![.., k..k + 1]).to_owned();
            let (layer_grads, g_in) = gcn_backward(
                &self.geometry.fine_op,
                &self.layers[idx],
                head_tape,
                &g_col.view(),
            )?;
            grads[idx] = Some(layer_grads);
            grad_h += &g_in;
        }
        let mut layer_idx = self.layers.len() - N_HEADS;
        let mut conv_tapes = conv;
        for stage in self.plan.iter().rev() {
            grad_h = match stage {
                Stage::Conv(level) => {
                    layer_idx -= 1;
                    let tape = conv_tapes.pop().expect("one tape per conv stage");
                    let (layer_grads, g_in) = gcn_backward(
                        self.geometry.op(*level),
                        &self.layers[layer_idx],
                        tape,
                        &grad_h.view(),
                    )?;
                    grads[layer_idx] = Some(layer_grads);
                    g_in
                }
                Stage::Pool1 => self.geometry.pool1.matrix().matmul_transposed(&grad_h.view())?,
                Stage::Pool2 => self.geometry.pool2.matrix().matmul_transposed(&grad_h.view())?,
                Stage::Unpool2 => self
                    .geometry
                    .unpool2
                    .matrix()
                    .matmul_transposed(&grad_h.view())?,
                Stage::Unpool1 => self
                    .geometry
                    .unpool1
                    .matrix()
                    .matmul_transposed(&grad_h.view())?,
            };
        }
        Ok(ModelGrads {
            layers: grads
                .into_iter()
                .map(|g| g.expect("every layer visited"))
                .collect(),
        })
    }

    fn at_layer(&self, idx: usize, err: Error) -> Error {
        match err {
            Error::NonFinite(msg) => Error::NonFinite(format!("layer {idx}: {msg}")),
            other => other,
        }
    }
}
