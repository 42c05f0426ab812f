//! Graph-convolution layer math: forward propagation, hand-derived
//! reverse-mode gradients, PReLU activation, and the Adam optimizer.
//!
//! The computation graph is fixed (propagate, project, activate), so
//! backpropagation is specialized rather than generic: each layer records a
//! small tape of intermediates and replays it backward.

use ndarray::{Array, Array1, Array2, ArrayView2, Dimension};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::PropagationOperator;

/// One graph-convolution layer: dense projection weights plus a learnable
/// per-output-channel PReLU slope.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GcnLayer {
    /// `in_ch x out_ch` projection.
    pub weight: Array2<f64>,
    /// PReLU slope, one entry per output channel.
    pub prelu_beta: Array1<f64>,
}

/// Initial PReLU slope for fresh layers.
pub const PRELU_INIT: f64 = 0.25;

impl GcnLayer {
    /// Glorot-uniform weights, `beta = 0.25`; deterministic given the RNG
    /// state.
    pub fn init(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_ch + out_ch) as f64).sqrt();
        let weight = Array2::from_shape_fn((in_ch, out_ch), |_| rng.random_range(-bound..bound));
        GcnLayer {
            weight,
            prelu_beta: Array1::from_elem(out_ch, PRELU_INIT),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    pub fn n_parameters(&self) -> usize {
        self.weight.len() + self.prelu_beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prelu_beta.len() != self.weight.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "{} PReLU slopes for {} output channels",
                self.prelu_beta.len(),
                self.weight.ncols()
            )));
        }
        if self.weight.iter().chain(self.prelu_beta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(())
    }
}

/// Intermediates recorded by one forward pass; consumed by the matching
/// backward pass.
#[derive(Debug, Clone)]
pub struct LayerTape {
    /// Propagated input `Op * H` (`n x in_ch`).
    pub z: Array2<f64>,
    /// Pre-activation `Op * H * W` (`n x out_ch`).
    pub pre: Array2<f64>,
}

/// Gradients of one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Array2<f64>,
    pub prelu_beta: Array1<f64>,
}

/// `PReLU(Op * H * W)` with per-channel slope.
pub fn gcn_forward(
    op: &PropagationOperator,
    h: &ArrayView2<'_, f64>,
    layer: &GcnLayer,
) -> Result<(Array2<f64>, LayerTape)> {
    if h.nrows() != op.n_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} operator nodes",
            h.nrows(),
            op.n_nodes()
        )));
    }
    if h.ncols() != layer.in_channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature channels for {} layer inputs",
            h.ncols(),
            layer.in_channels()
        )));
    }
    let z = op.apply(h)?;
    let pre = z.dot(&layer.weight);
    let mut out = pre.clone();
    for (mut col, &beta) in out.columns_mut().into_iter().zip(layer.prelu_beta.iter()) {
        col.mapv_inplace(|v| if v >= 0.0 { v } else { beta * v });
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gcn_forward output".into()));
    }
    Ok((out, LayerTape { z, pre }))
}

/// Reverse-mode gradients through one layer.
///
/// With `S = sigma'(pre) ⊙ G` (where `sigma' = 1` for `pre >= 0`, else the
/// channel slope): `dW = Z^T S`, `dH = Op (S W^T)` (the operator is
/// symmetric), and `dbeta_c = sum over pre < 0 of pre * G`.
pub fn gcn_backward(
    op: &PropagationOperator,
    layer: &GcnLayer,
    tape: LayerTape,
    grad_out: &ArrayView2<'_, f64>,
) -> Result<(LayerGrads, Array2<f64>)> {
    if grad_out.dim() != tape.pre.dim() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} vs pre-activation {:?}",
            grad_out.dim(),
            tape.pre.dim()
        )));
    }
    let LayerTape { z, pre } = tape;
    let mut s = grad_out.to_owned();
    let mut grad_beta = Array1::zeros(layer.out_channels());
    for ((mut s_col, pre_col), (&beta, gb)) in s
        .columns_mut()
        .into_iter()
        .zip(pre.columns())
        .zip(layer.prelu_beta.iter().zip(grad_beta.iter_mut()))
    {
        let mut acc = 0.0;
        for (sv, &pv) in s_col.iter_mut().zip(pre_col.iter()) {
            if pv < 0.0 {
                acc += pv * *sv;
                *sv *= beta;
            }
        }
        *gb = acc;
    }
    let grad_weight = z.t().dot(&s);
    let grad_h = op.apply(&s.dot(&layer.weight.t()).view())?;
    Ok((
        LayerGrads {
            weight: grad_weight,
            prelu_beta: grad_beta,
        },
        grad_h,
    ))
}

/// Adam hyperparameters and the stepped learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning-rate multiplier applied every `decay_interval` epochs.
    pub decay_factor: f64,
    pub decay_interval: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr0: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_factor: 0.9,
            decay_interval: 30,
        }
    }
}

impl AdamConfig {
    /// `lr0 * decay^floor(epoch / interval)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((epoch / self.decay_interval) as i32)
    }
}

/// Adam moment accumulators for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<D: Dimension> {
    config: AdamConfig,
    step: u64,
    m: Array<f64, D>,
    v: Array<f64, D>,
}

impl<D: Dimension> AdamState<D> {
    pub fn new(config: AdamConfig, shape: D) -> Self {
        AdamState {
            config,
            step: 0,
            m: Array::zeros(shape.clone()),
            v: Array::zeros(shape),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; the learning rate follows the epoch-based
    /// decay schedule.
    pub fn step(
        &mut self,
        name: &str,
        epoch: usize,
        param: &mut Array<f64, D>,
        grad: &Array<f64, D>,
    ) -> Result<()> {
        if param.raw_dim() != self.m.raw_dim() || grad.raw_dim() != self.m.raw_dim() {
            return Err(Error::ShapeMismatch(format!(
                "adam step on `{name}`: parameter/gradient/moment shapes disagree"
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let lr = c.lr_at(epoch);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
            });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, normalize_adjacency, Graph};
    use crate::mesh::SurfaceMesh;
    use approx::assert_relative_eq;
    use ndarray::{array, Ix1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_node_op() -> PropagationOperator {
        let g = Graph::from_triplets(1, vec![(0, 0, 1.0)], 0.0).unwrap();
        normalize_adjacency(&g).unwrap()
    }

    fn small_mesh_op(n_extra: usize) -> PropagationOperator {
        // A strip of triangles gives a small irregular graph.
        let mut nodes = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 1.0, 0.0]];
        let mut cells = vec![[0, 1, 2]];
        for i in 0..n_extra {
            let last = nodes.len();
            nodes.push([1.0 + i as f64 * 0.7, 1.1, 0.1 * i as f64]);
            cells.push([last - 2, last - 1, last]);
        }
        let mesh = SurfaceMesh::new(nodes, cells).unwrap();
        normalize_adjacency(&build_graph(&mesh).unwrap()).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let op = single_node_op();
        let layer = GcnLayer {
            weight: Array2::eye(2),
            prelu_beta: array![1.0, 1.0],
        };
        let h = array![[0.7, -1.3]];
        let (out, _) = gcn_forward(&op, &h.view(), &layer).unwrap();
        assert_relative_eq!(out, h, epsilon = 1e-15);
    }

    #[test]
    fn zero_slope_is_relu() {
        let op = single_node_op();
        let layer = GcnLayer {
            weight: Array2::eye(2),
            prelu_beta: array![0.0, 0.0],
        };
        let h = array![[0.7, -1.3]];
        let (out, _) = gcn_forward(&op, &h.view(), &layer).unwrap();
        assert_eq!(out, array![[0.7, 0.0]]);
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = small_mesh_op(1);
        let n = op.n_nodes();
        let layer = GcnLayer::init(2, 3, &mut rng);
        let h = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let (out, _) = gcn_forward(&op, &h.view(), &layer).unwrap();

        let dense = op.to_dense();
        let pre = dense.dot(&h).dot(&layer.weight);
        let mut want = pre;
        for (mut col, &beta) in want.columns_mut().into_iter().zip(layer.prelu_beta.iter()) {
            col.mapv_inplace(|v| if v >= 0.0 { v } else { beta * v });
        }
        assert_relative_eq!(out, want, epsilon = 1e-12);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Graph on 4 nodes (triangle strip), then relabel by a permutation.
        let mesh = SurfaceMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.5, 1.0, 0.0],
                [1.5, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap();
        let perm = [2usize, 0, 3, 1]; // new index of each old node
        let permuted_mesh = {
            let mut nodes = vec![[0.0; 3]; 4];
            for (old, &new) in perm.iter().enumerate() {
                nodes[new] = mesh.nodes()[old];
            }
            let cells = mesh
                .cells()
                .iter()
                .map(|&[a, b, c]| [perm[a], perm[b], perm[c]])
                .collect();
            SurfaceMesh::new(nodes, cells).unwrap()
        };
        let op = normalize_adjacency(&build_graph(&mesh).unwrap()).unwrap();
        let op_p = normalize_adjacency(&build_graph(&permuted_mesh).unwrap()).unwrap();

        let layer = GcnLayer::init(2, 2, &mut rng);
        let h = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let mut h_p = Array2::zeros((4, 2));
        for (old, &new) in perm.iter().enumerate() {
            h_p.row_mut(new).assign(&h.row(old));
        }
        let (out, _) = gcn_forward(&op, &h.view(), &layer).unwrap();
        let (out_p, _) = gcn_forward(&op_p, &h_p.view(), &layer).unwrap();
        for (old, &new) in perm.iter().enumerate() {
            assert_relative_eq!(
                out.row(old).to_owned(),
                out_p.row(new).to_owned(),
                epsilon = 1e-12
            );
        }
    }

    /// Central finite difference of a scalar loss with respect to one slot.
    fn fd_grad(mut eval: impl FnMut(f64) -> f64, x0: f64) -> f64 {
        let h = 1e-5;
        (eval(x0 + h) - eval(x0 - h)) / (2.0 * h)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = small_mesh_op(2);
        let n = op.n_nodes();
        let layer = GcnLayer::init(3, 2, &mut rng);
        let h = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));

        let loss_of = |layer: &GcnLayer, h: &Array2<f64>| -> f64 {
            let (out, _) = gcn_forward(&op, &h.view(), layer).unwrap();
            (&out - &target).mapv(|v| v * v).sum()
        };

        let (out, tape) = gcn_forward(&op, &h.view(), &layer).unwrap();
        let grad_out = 2.0 * (&out - &target);
        let (grads, grad_h) = gcn_backward(&op, &layer, tape, &grad_out.view()).unwrap();

        let check = |got: f64, want: f64, what: &str| {
            let denom = want.abs().max(1e-7);
            assert!(
                (got - want).abs() / denom <= 1e-5,
                "{what}: analytic {got} vs fd {want}"
            );
        };
        for i in 0..3 {
            for j in 0..2 {
                let want = fd_grad(
                    |v| {
                        let mut l = layer.clone();
                        l.weight[[i, j]] = v;
                        loss_of(&l, &h)
                    },
                    layer.weight[[i, j]],
                );
                check(grads.weight[[i, j]], want, "dW");
            }
        }
        for c in 0..2 {
            let want = fd_grad(
                |v| {
                    let mut l = layer.clone();
                    l.prelu_beta[c] = v;
                    loss_of(&l, &h)
                },
                layer.prelu_beta[c],
            );
            check(grads.prelu_beta[c], want, "dbeta");
        }
        for i in 0..n {
            for c in 0..3 {
                let want = fd_grad(
                    |v| {
                        let mut hh = h.clone();
                        hh[[i, c]] = v;
                        loss_of(&layer, &hh)
                    },
                    h[[i, c]],
                );
                check(grad_h[[i, c]], want, "dH");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let op = small_mesh_op(1);
        let layer = GcnLayer::init(2, 2, &mut rng);
        let h = Array2::from_shape_fn((op.n_nodes(), 2), |_| rng.random_range(-1.0..1.0));
        let (_, tape) = gcn_forward(&op, &h.view(), &layer).unwrap();
        let zero = Array2::zeros((op.n_nodes(), 2));
        let (grads, grad_h) = gcn_backward(&op, &layer, tape, &zero.view()).unwrap();
        assert!(grads.weight.iter().all(|&v| v == 0.0));
        assert!(grads.prelu_beta.iter().all(|&v| v == 0.0));
        assert!(grad_h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beta_gradient_zero_when_preactivations_nonnegative() {
        let op = single_node_op();
        let layer = GcnLayer {
            weight: Array2::eye(2),
            prelu_beta: array![0.3, 0.3],
        };
        let h = array![[0.5, 2.0]];
        let (_, tape) = gcn_forward(&op, &h.view(), &layer).unwrap();
        let g = array![[1.0, -2.0]];
        let (grads, _) = gcn_backward(&op, &layer, tape, &g.view()).unwrap();
        assert_eq!(grads.prelu_beta, array![0.0, 0.0]);
    }

    #[test]
    fn glorot_init_is_bounded_and_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let la = GcnLayer::init(20, 30, &mut a);
        let lb = GcnLayer::init(20, 30, &mut b);
        assert_eq!(la.weight, lb.weight);
        let bound = (6.0 / 50.0f64).sqrt();
        assert!(la.weight.iter().all(|&w| w.abs() < bound));
        assert!(la.prelu_beta.iter().all(|&b| b == PRELU_INIT));
    }

    #[test]
    fn lr_schedule_matches_decay_law() {
        let c = AdamConfig::default();
        assert_relative_eq!(c.lr_at(0), 0.001, max_relative = 1e-15);
        assert_relative_eq!(c.lr_at(29), 0.001, max_relative = 1e-15);
        assert_relative_eq!(c.lr_at(30), 0.0009, max_relative = 1e-12);
        assert_relative_eq!(c.lr_at(60), 0.00081, max_relative = 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut state = AdamState::new(AdamConfig::default(), Ix1(3));
        let mut p = array![1.0, -2.0, 0.5];
        let before = p.clone();
        state
            .step("p", 0, &mut p, &Array1::zeros(3))
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let config = AdamConfig {
            lr0: 0.1,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(config, Ix1(1));
        let mut w = array![1.0];
        for step in 0..200 {
            let grad = array![2.0 * w[0]];
            state.step("w", step, &mut w, &grad).unwrap();
        }
        assert!(w[0].abs() < 0.05, "w = {} after 200 steps", w[0]);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut state = AdamState::new(AdamConfig::default(), Ix1(2));
        let mut p = array![1.0, 2.0];
        let err = state
            .step("layer0.weight", 0, &mut p, &array![f64::NAN, 0.0])
            .unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("layer0.weight")),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
