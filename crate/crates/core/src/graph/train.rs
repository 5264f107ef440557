//! Graph network training against a keyframe overlap matrix.
//!
//! One training step runs the network over the map graph, scores every
//! node pair with the inverse cross-entropy measure, row-normalizes the
//! score matrix into a distribution per node, and minimizes the mean
//! cross entropy to the row-normalized label matrix. The gradient of that
//! loss is written so it vanishes identically — not just approximately —
//! when the predicted rows equal the label rows.

use nalgebra::{DMatrix, DVector};

use crate::scalar::{s, Scalar};
use crate::sgd::{SgdConfig, SgdState};
use crate::similarity::SimilarityMatrix;

use super::{
    forward_trace, Activation, EmbeddingGraph, ForwardTrace, GnnParams, GraphError,
    DEFAULT_ETA, FEATURE_FLOOR, GNN_LAYERS, LAYER_ACTIVATIONS,
};

#[derive(Debug, Clone)]
pub struct GnnTrainConfig<T: Scalar> {
    pub steps: usize,
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    /// Smoothing constant of the pairwise score.
    pub eta: T,
}

impl<T: Scalar> Default for GnnTrainConfig<T> {
    fn default() -> Self {
        GnnTrainConfig {
            steps: 500,
            learning_rate: s(0.05),
            momentum: s(0.9),
            weight_decay: s(1e-6),
            eta: s(DEFAULT_ETA),
        }
    }
}

type ParamGrads<T> = [DMatrix<T>; 9];

fn zero_grads<T: Scalar>(params: &GnnParams<T>) -> ParamGrads<T> {
    params
        .param_list()
        .map(|p| DMatrix::zeros(p.nrows(), p.ncols()))
}

/// Row-normalizes a label matrix, rejecting rows without any mass.
fn normalized_label_rows<T: Scalar>(
    labels: &SimilarityMatrix<T>,
) -> Result<Vec<Vec<T>>, GraphError> {
    let n = labels.len();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut sum = T::zero();
        for j in 0..n {
            sum += labels.get(i, j);
        }
        if sum <= T::zero() {
            return Err(GraphError::ZeroLabelRow { row: i });
        }
        rows.push((0..n).map(|j| labels.get(i, j) / sum).collect());
    }
    Ok(rows)
}

/// Loss and parameter gradients for one full pass over the graph.
/// Exposed to the tests for finite-difference checking.
pub(crate) fn graph_gradients<T: Scalar>(
    params: &GnnParams<T>,
    graph: &EmbeddingGraph<T>,
    label_rows: &[Vec<T>],
    eta: T,
) -> Result<(f64, ParamGrads<T>), GraphError> {
    if eta <= T::zero() {
        return Err(GraphError::NonPositiveEta {
            eta: eta.to_f64_lossy(),
        });
    }
    let n = graph.len();
    let trace = forward_trace(params, graph)?;
    let features = trace.inputs.last().unwrap();
    let dim = params.dim();
    let lo = s::<T>(FEATURE_FLOOR);

    // pairwise scores; features are already inside (0, 1), so the score's
    // internal clamp never binds and gradients always flow
    let mut scores = DMatrix::<T>::zeros(n, n);
    let mut row_sums = vec![T::zero(); n];
    for i in 0..n {
        for j in 0..n {
            let mut cross = T::zero();
            for d in 0..dim {
                let m = features[j][d].max(lo).min(T::one());
                cross += features[i][d] * m.ln();
            }
            let u = T::one() / (eta - cross);
            scores[(i, j)] = u;
            row_sums[i] += u;
        }
    }

    // loss = mean_i cross_entropy(label_row_i, score_row_i / row_sum_i)
    let weight = s::<T>(1.0 / n as f64);
    let mut loss = T::zero();
    let mut d_scores = DMatrix::<T>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let p = scores[(i, j)] / row_sums[i];
            let l = label_rows[i][j];
            if l > T::zero() {
                loss -= l * p.ln() * weight;
            }
            // d loss / d u_ij = (1 - l/p) / row_sum, exactly zero at p = l
            d_scores[(i, j)] = (T::one() - l / p) / row_sums[i] * weight;
        }
    }

    // chain into the node features: u = 1/(eta - sum_d q_d ln m_d) with
    // q = features[i], m = features[j]
    let mut d_features: Vec<DVector<T>> = vec![DVector::zeros(dim); n];
    for i in 0..n {
        for j in 0..n {
            let du = d_scores[(i, j)];
            if du == T::zero() {
                continue;
            }
            let u2 = scores[(i, j)] * scores[(i, j)];
            for d in 0..dim {
                let m = features[j][d].max(lo).min(T::one());
                d_features[i][d] += du * u2 * m.ln();
                d_features[j][d] += du * u2 * features[i][d] / m;
            }
        }
    }

    let grads = backprop_layers(params, graph, &trace, d_features);
    Ok((loss.to_f64_lossy(), grads))
}

/// Propagates node-feature gradients back through the three layers.
fn backprop_layers<T: Scalar>(
    params: &GnnParams<T>,
    graph: &EmbeddingGraph<T>,
    trace: &ForwardTrace<T>,
    mut d_out: Vec<DVector<T>>,
) -> ParamGrads<T> {
    let n = graph.len();
    let dim = params.dim();
    let mut grads = zero_grads(params);
    let hi = T::one() - s::<T>(FEATURE_FLOOR);
    let lo = s::<T>(FEATURE_FLOOR);

    for layer_idx in (0..GNN_LAYERS).rev() {
        let layer = &params.layers[layer_idx];
        let inputs = &trace.inputs[layer_idx];
        let outputs = &trace.inputs[layer_idx + 1];
        let means = &trace.means[layer_idx];
        let pre = &trace.pre[layer_idx];
        let mut d_in: Vec<DVector<T>> = vec![DVector::zeros(dim); n];

        for i in 0..n {
            let mut dz = d_out[i].clone();
            match LAYER_ACTIVATIONS[layer_idx] {
                Activation::Relu => {
                    for (g, &z) in dz.iter_mut().zip(pre[i].iter()) {
                        if z <= T::zero() {
                            *g = T::zero();
                        }
                    }
                }
                Activation::SigmoidClamped => {
                    for (g, &y) in dz.iter_mut().zip(outputs[i].iter()) {
                        if y <= lo || y >= hi {
                            *g = T::zero();
                        } else {
                            *g *= y * (T::one() - y);
                        }
                    }
                }
            }
            let base = layer_idx * 3;
            grads[base] += &dz * inputs[i].transpose();
            grads[base + 1] += &dz * means[i].transpose();
            grads[base + 2] += &dz;

            d_in[i] += layer.w_self.transpose() * &dz;
            let nbrs = graph.neighbors(i);
            if !nbrs.is_empty() {
                let spread =
                    layer.w_nbr.transpose() * &dz / s::<T>(nbrs.len() as f64);
                for &j in nbrs {
                    d_in[j] += &spread;
                }
            }
        }
        d_out = d_in;
    }
    grads
}

/// Loss and analytic parameter gradients at the current parameters,
/// without taking an optimizer step. Gradient slots follow the layer
/// order of [`GnnParams`], three slots per layer: `w_self, w_nbr,
/// bias`. This is the quantity a training step descends on; it is
/// public so callers can check the backward pass against finite
/// differences of the loss or inspect descent directions.
pub fn gnn_loss_gradients<T: Scalar>(
    params: &GnnParams<T>,
    graph: &EmbeddingGraph<T>,
    labels: &SimilarityMatrix<T>,
    eta: T,
) -> Result<(f64, [DMatrix<T>; 9]), GraphError> {
    if labels.len() != graph.len() {
        return Err(GraphError::SizeMismatch {
            detail: format!(
                "graph has {} nodes but labels are {}x{}",
                graph.len(),
                labels.len(),
                labels.len()
            ),
        });
    }
    let label_rows = normalized_label_rows(labels)?;
    graph_gradients(params, graph, &label_rows, eta)
}

/// Trains the network in place; returns the per-step loss history.
pub fn train_gnn<T: Scalar>(
    params: &mut GnnParams<T>,
    graph: &EmbeddingGraph<T>,
    labels: &SimilarityMatrix<T>,
    config: &GnnTrainConfig<T>,
) -> Result<Vec<f64>, GraphError> {
    if labels.len() != graph.len() {
        return Err(GraphError::SizeMismatch {
            detail: format!(
                "graph has {} nodes but labels are {}x{}",
                graph.len(),
                labels.len(),
                labels.len()
            ),
        });
    }
    let label_rows = normalized_label_rows(labels)?;

    let sgd_config = SgdConfig {
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let mut optimizer = SgdState::zeros_like(&params.param_list());
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (loss, grads) = graph_gradients(params, graph, &label_rows, config.eta)?;
        let grads_finite = grads
            .iter()
            .all(|g| g.iter().all(|v| v.to_f64_lossy().is_finite()));
        if !loss.is_finite() || !grads_finite {
            return Err(GraphError::NonFiniteLoss { step });
        }
        history.push(loss);
        let grad_refs: [&DMatrix<T>; 9] = grads.each_ref();
        let mut param_refs = params.param_list_mut();
        optimizer.step(&sgd_config, &mut param_refs, &grad_refs);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_embedding_graph, chain_edges};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, dim: usize, seed: u64) -> EmbeddingGraph<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let mut edges = chain_edges(n);
        if n > 4 {
            edges.push((0, n - 1));
        }
        build_embedding_graph(codes, &edges).unwrap()
    }

    fn banded_labels(n: usize) -> SimilarityMatrix<f64> {
        let mut m = SimilarityMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let v = if i == j {
                    1.0
                } else if i.abs_diff(j) == 1 {
                    0.8
                } else {
                    0.05
                };
                m.set(i, j, v);
            }
        }
        m
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let graph = random_graph(5, 4, 3);
        let mut params = GnnParams::<f64>::seeded(4, 8);
        let label_rows = normalized_label_rows(&banded_labels(5)).unwrap();
        let eta = 1e-3;
        let (_, grads) = graph_gradients(&params, &graph, &label_rows, eta).unwrap();

        let eps = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for param_idx in 0..9 {
            for _ in 0..2 {
                let flat = rng.gen_range(0..grads[param_idx].len());
                let analytic = grads[param_idx][flat];

                let original = params.param_list()[param_idx][flat];
                params.param_list_mut()[param_idx][flat] = original + eps;
                let (plus, _) = graph_gradients(&params, &graph, &label_rows, eta).unwrap();
                params.param_list_mut()[param_idx][flat] = original - eps;
                let (minus, _) = graph_gradients(&params, &graph, &label_rows, eta).unwrap();
                params.param_list_mut()[param_idx][flat] = original;

                let fd = (plus - minus) / (2.0 * eps);
                let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-8);
                assert!(
                    rel < 1e-4,
                    "param {param_idx} entry {flat}: analytic {analytic}, fd {fd}, rel {rel}"
                );
            }
        }
    }

    #[test]
    fn gradient_is_exactly_zero_when_labels_equal_predictions() {
        let graph = random_graph(6, 4, 11);
        let params = GnnParams::<f64>::seeded(4, 5);

        // compute the current row-normalized predictions and feed those
        // back as labels: every parameter gradient must be exactly zero
        let uniform = normalized_label_rows(&banded_labels(6)).unwrap();
        let eta = 1e-3;
        let trace = forward_trace(&params, &graph).unwrap();
        let features = trace.inputs.last().unwrap();
        let n = graph.len();
        let mut label_rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|j| {
                    super::super::inverse_ce_score(&features[i], &features[j], eta).unwrap()
                })
                .collect();
            let sum: f64 = row.iter().sum();
            label_rows.push(row.into_iter().map(|u| u / sum).collect());
        }
        // sanity: the uniform labels do NOT give a zero gradient
        let (_, nonzero) = graph_gradients(&params, &graph, &uniform, eta).unwrap();
        assert!(nonzero.iter().any(|g| g.iter().any(|&v| v != 0.0)));

        let (_, grads) = graph_gradients(&params, &graph, &label_rows, eta).unwrap();
        for (k, g) in grads.iter().enumerate() {
            assert!(
                g.iter().all(|&v| v == 0.0),
                "parameter {k} still has gradient {:?}",
                g.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()))
            );
        }
    }

    /// Mean entropy of the row-normalized label rows: the cross-entropy
    /// loss can never go below this, so descent is judged on the excess
    /// above it.
    fn label_entropy_floor(labels: &SimilarityMatrix<f64>) -> f64 {
        let rows = normalized_label_rows(labels).unwrap();
        let per_row: f64 = rows
            .iter()
            .map(|row| -row.iter().filter(|&&l| l > 0.0).map(|&l| l * l.ln()).sum::<f64>())
            .sum();
        per_row / rows.len() as f64
    }

    #[test]
    fn training_halves_the_excess_loss_on_a_small_map() {
        let graph = random_graph(10, 8, 21);
        let mut params = GnnParams::<f64>::seeded(8, 22);
        let labels = banded_labels(10);
        let floor = label_entropy_floor(&labels);
        let config = GnnTrainConfig::default();
        let history = train_gnn(&mut params, &graph, &labels, &config).unwrap();
        assert_eq!(history.len(), config.steps);
        let first = history[0];
        let last = *history.last().unwrap();
        assert!(last < first, "loss increased: first {first}, last {last}");
        assert!(
            last - floor < 0.5 * (first - floor),
            "excess loss did not halve in {} steps: first {first}, last {last}, floor {floor}",
            config.steps
        );
    }

    #[test]
    fn non_finite_parameters_abort_at_step_zero() {
        let graph = random_graph(4, 4, 1);
        let mut params = GnnParams::<f64>::seeded(4, 2);
        params.layers[0].w_self[(0, 0)] = f64::NAN;
        let config = GnnTrainConfig {
            steps: 3,
            ..GnnTrainConfig::default()
        };
        match train_gnn(&mut params, &graph, &banded_labels(4), &config) {
            Err(GraphError::NonFiniteLoss { step: 0 }) => {}
            other => panic!("expected NonFiniteLoss at step 0, got {other:?}"),
        }
    }

    #[test]
    fn label_validation_catches_bad_shapes() {
        let graph = random_graph(4, 4, 1);
        let mut params = GnnParams::<f64>::seeded(4, 2);
        let config = GnnTrainConfig::default();
        assert!(matches!(
            train_gnn(&mut params, &graph, &banded_labels(5), &config),
            Err(GraphError::SizeMismatch { .. })
        ));
        let zero_row = SimilarityMatrix::<f64>::zeros(4);
        assert!(matches!(
            train_gnn(&mut params, &graph, &zero_row, &config),
            Err(GraphError::ZeroLabelRow { row: 0 })
        ));
    }
}
