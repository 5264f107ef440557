//! Graph network over keyframe codes and window-to-map matching.
//!
//! Keyframe codes become nodes of an undirected graph (consecutive frames
//! are chained; extra edges may link frames with high overlap). Three
//! mean-aggregation layers mix every node with its neighborhood:
//!
//! ```text
//! h'_i = act(W_self h_i + W_nbr mean_{j in N(i)} h_j + b)
//! ```
//!
//! with ReLU on the first two layers and a clamped sigmoid on the last, so
//! final node features live strictly inside `(0, 1)`. Two node features are
//! compared with an inverse cross-entropy score that grows as the features
//! agree; a query window slides over its own small chain graph and each of
//! its nodes picks the best-scoring map node.

mod train;

pub use train::{gnn_loss_gradients, train_gnn, GnnTrainConfig};

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::{s, Scalar};
use crate::ErrorCategory;

/// Node features are clamped to `[FEATURE_FLOOR, 1 - FEATURE_FLOOR]` after
/// the final sigmoid so logarithms of them stay finite.
pub const FEATURE_FLOOR: f64 = 1e-7;

/// Default smoothing constant of the inverse cross-entropy score.
pub const DEFAULT_ETA: f64 = 1e-3;

/// Number of aggregation layers.
pub const GNN_LAYERS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("edge {edge_index} references missing node {node}")]
    DanglingEdge { edge_index: usize, node: usize },
    #[error("edge {edge_index} is a self loop on node {node}")]
    SelfLoop { edge_index: usize, node: usize },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("eta must be positive, got {eta}")]
    NonPositiveEta { eta: f64 },
    #[error("query window has no nodes")]
    EmptyWindow,
    #[error("{detail}")]
    SizeMismatch { detail: String },
    #[error("label row {row} sums to zero and cannot be normalized")]
    ZeroLabelRow { row: usize },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("{source_name}: {reason}")]
    Parse { source_name: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl GraphError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            GraphError::EmptyGraph
            | GraphError::DanglingEdge { .. }
            | GraphError::SelfLoop { .. }
            | GraphError::DimMismatch { .. }
            | GraphError::NonPositiveEta { .. }
            | GraphError::EmptyWindow
            | GraphError::SizeMismatch { .. }
            | GraphError::ZeroLabelRow { .. } => ErrorCategory::Validation,
            GraphError::NonFiniteLoss { .. } => ErrorCategory::Numeric,
            GraphError::Parse { .. } | GraphError::Io(_) => ErrorCategory::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Sigmoid with outputs clamped away from 0 and 1 by
    /// [`FEATURE_FLOOR`].
    SigmoidClamped,
}

/// Activation of each layer, in order.
pub const LAYER_ACTIVATIONS: [Activation; GNN_LAYERS] =
    [Activation::Relu, Activation::Relu, Activation::SigmoidClamped];

#[derive(Debug, Clone, PartialEq)]
pub struct GnnLayer<T: Scalar> {
    pub w_self: DMatrix<T>,
    pub w_nbr: DMatrix<T>,
    /// Single-column bias.
    pub bias: DMatrix<T>,
}

/// Weights of the three aggregation layers. All layers keep the feature
/// width, so one dimension describes the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams<T: Scalar> {
    pub layers: [GnnLayer<T>; GNN_LAYERS],
}

fn xavier<T: Scalar>(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<T> {
    let limit = (6.0 / (2 * n) as f64).sqrt();
    let data: Vec<T> = (0..n * n)
        .map(|_| s::<T>(rng.gen_range(-limit..limit)))
        .collect();
    DMatrix::from_vec(n, n, data)
}

impl<T: Scalar> GnnParams<T> {
    /// Random seeded initialization for training from scratch.
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = std::array::from_fn(|_| GnnLayer {
            w_self: xavier(dim, &mut rng),
            w_nbr: xavier(dim, &mut rng),
            bias: DMatrix::zeros(dim, 1),
        });
        GnnParams { layers }
    }

    /// Parameters that pass node features through almost unchanged while
    /// mixing in a small fraction of the neighborhood mean. With these, a
    /// node's final feature is dominated by its own code, which makes
    /// exact-revisit matching reliable without any training.
    pub fn identity_leaning(dim: usize, nbr_weight: f64) -> Self {
        let layers = std::array::from_fn(|_| GnnLayer {
            w_self: DMatrix::identity(dim, dim),
            w_nbr: DMatrix::identity(dim, dim) * s::<T>(nbr_weight),
            bias: DMatrix::zeros(dim, 1),
        });
        GnnParams { layers }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].w_self.nrows()
    }

    /// Parameters in the fixed serialization and optimizer order:
    /// `(w_self, w_nbr, bias)` per layer.
    pub fn param_list(&self) -> [&DMatrix<T>; 9] {
        let [l0, l1, l2] = &self.layers;
        [
            &l0.w_self, &l0.w_nbr, &l0.bias, &l1.w_self, &l1.w_nbr, &l1.bias, &l2.w_self,
            &l2.w_nbr, &l2.bias,
        ]
    }

    pub fn param_list_mut(&mut self) -> [&mut DMatrix<T>; 9] {
        let [l0, l1, l2] = &mut self.layers;
        [
            &mut l0.w_self,
            &mut l0.w_nbr,
            &mut l0.bias,
            &mut l1.w_self,
            &mut l1.w_nbr,
            &mut l1.bias,
            &mut l2.w_self,
            &mut l2.w_nbr,
            &mut l2.bias,
        ]
    }
}

/// Undirected graph over fixed-length node features. Neighbor lists are
/// sorted and deduplicated, so aggregation order is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGraph<T: Scalar> {
    features: Vec<DVector<T>>,
    neighbors: Vec<Vec<usize>>,
}

impl<T: Scalar> EmbeddingGraph<T> {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[DVector<T>] {
        &self.features
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }
}

/// Edges of a chain graph over `n` consecutive nodes.
pub fn chain_edges(n: usize) -> Vec<(usize, usize)> {
    (1..n).map(|i| (i - 1, i)).collect()
}

/// Builds an undirected graph, validating every edge. Node features must
/// all share one dimension.
pub fn build_embedding_graph<T: Scalar>(
    features: Vec<DVector<T>>,
    edges: &[(usize, usize)],
) -> Result<EmbeddingGraph<T>, GraphError> {
    if features.is_empty() {
        return Err(GraphError::EmptyGraph);
    }
    let dim = features[0].len();
    for f in &features {
        if f.len() != dim {
            return Err(GraphError::DimMismatch {
                expected: dim,
                got: f.len(),
            });
        }
    }
    let n = features.len();
    let mut neighbors = vec![Vec::new(); n];
    for (edge_index, &(a, b)) in edges.iter().enumerate() {
        for node in [a, b] {
            if node >= n {
                return Err(GraphError::DanglingEdge { edge_index, node });
            }
        }
        if a == b {
            return Err(GraphError::SelfLoop {
                edge_index,
                node: a,
            });
        }
        neighbors[a].push(b);
        neighbors[b].push(a);
    }
    for list in &mut neighbors {
        list.sort_unstable();
        list.dedup();
    }
    Ok(EmbeddingGraph {
        features,
        neighbors,
    })
}

fn apply_activation<T: Scalar>(z: &mut DVector<T>, activation: Activation) {
    match activation {
        Activation::Relu => {
            for v in z.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        Activation::SigmoidClamped => {
            let lo = s::<T>(FEATURE_FLOOR);
            let hi = T::one() - lo;
            for v in z.iter_mut() {
                let sig = T::one() / (T::one() + (-*v).exp());
                *v = sig.max(lo).min(hi);
            }
        }
    }
}

/// One aggregation layer over explicit neighbor lists. Isolated nodes
/// aggregate a zero neighborhood mean.
pub fn sage_layer<T: Scalar>(
    layer: &GnnLayer<T>,
    features: &[DVector<T>],
    neighbors: &[Vec<usize>],
    activation: Activation,
) -> Result<Vec<DVector<T>>, GraphError> {
    let dim = layer.w_self.ncols();
    let mut out = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(GraphError::DimMismatch {
                expected: dim,
                got: f.len(),
            });
        }
        let mean = neighborhood_mean(features, &neighbors[i], dim);
        let mut z = &layer.w_self * f + &layer.w_nbr * mean + layer.bias.column(0);
        apply_activation(&mut z, activation);
        out.push(z);
    }
    Ok(out)
}

fn neighborhood_mean<T: Scalar>(
    features: &[DVector<T>],
    neighbors: &[usize],
    dim: usize,
) -> DVector<T> {
    let mut mean = DVector::zeros(dim);
    if neighbors.is_empty() {
        return mean;
    }
    for &j in neighbors {
        mean += &features[j];
    }
    mean / s::<T>(neighbors.len() as f64)
}

/// Layer-by-layer record of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace<T: Scalar> {
    /// `inputs[l]` are the node features entering layer `l`;
    /// `inputs[GNN_LAYERS]` are the final outputs.
    pub inputs: Vec<Vec<DVector<T>>>,
    /// Neighborhood means used by layer `l`.
    pub means: Vec<Vec<DVector<T>>>,
    /// Pre-activation values of layer `l`.
    pub pre: Vec<Vec<DVector<T>>>,
}

pub(crate) fn forward_trace<T: Scalar>(
    params: &GnnParams<T>,
    graph: &EmbeddingGraph<T>,
) -> Result<ForwardTrace<T>, GraphError> {
    if graph.feature_dim() != params.dim() {
        return Err(GraphError::DimMismatch {
            expected: params.dim(),
            got: graph.feature_dim(),
        });
    }
    let dim = params.dim();
    let mut inputs = vec![graph.features.clone()];
    let mut means = Vec::with_capacity(GNN_LAYERS);
    let mut pre = Vec::with_capacity(GNN_LAYERS);
    for (layer, activation) in params.layers.iter().zip(LAYER_ACTIVATIONS) {
        let current = inputs.last().unwrap();
        let layer_means: Vec<DVector<T>> = (0..graph.len())
            .map(|i| neighborhood_mean(current, &graph.neighbors[i], dim))
            .collect();
        let layer_pre: Vec<DVector<T>> = current
            .iter()
            .zip(&layer_means)
            .map(|(f, m)| &layer.w_self * f + &layer.w_nbr * m + layer.bias.column(0))
            .collect();
        let outputs: Vec<DVector<T>> = layer_pre
            .iter()
            .map(|z| {
                let mut out = z.clone();
                apply_activation(&mut out, activation);
                out
            })
            .collect();
        means.push(layer_means);
        pre.push(layer_pre);
        inputs.push(outputs);
    }
    Ok(ForwardTrace { inputs, means, pre })
}

/// Runs the full network and returns the final node features, each inside
/// `(0, 1)` per dimension.
pub fn gnn_forward<T: Scalar>(
    params: &GnnParams<T>,
    graph: &EmbeddingGraph<T>,
) -> Result<Vec<DVector<T>>, GraphError> {
    Ok(forward_trace(params, graph)?.inputs.pop().unwrap())
}

/// Inverse cross-entropy score between a query feature `q` and a map
/// feature `m`:
///
/// ```text
/// U = 1 / (eta - sum_d q_d ln(clamp(m_d)))
/// ```
///
/// `m` is clamped to `[FEATURE_FLOOR, 1]` before the logarithm. For
/// `q_d >= 0` the sum is nonpositive, so `U` lies in `(0, 1/eta]` and
/// grows as `m` places mass where `q` does.
pub fn inverse_ce_score<T: Scalar>(
    q: &DVector<T>,
    m: &DVector<T>,
    eta: T,
) -> Result<T, GraphError> {
    if eta <= T::zero() {
        return Err(GraphError::NonPositiveEta {
            eta: eta.to_f64_lossy(),
        });
    }
    if q.len() != m.len() {
        return Err(GraphError::DimMismatch {
            expected: q.len(),
            got: m.len(),
        });
    }
    let lo = s::<T>(FEATURE_FLOOR);
    let mut cross = T::zero();
    for (qd, md) in q.iter().zip(m.iter()) {
        let clamped = md.max(lo).min(T::one());
        cross += *qd * clamped.ln();
    }
    Ok(T::one() / (eta - cross))
}

/// One proposed correspondence from a query window node to a map node.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMatch<T: Scalar> {
    /// Index of the node inside the query window graph.
    pub query_idx: usize,
    /// Index of the matched node in the reference graph.
    pub ref_idx: usize,
    pub score: T,
}

/// Matches every query-window node against the reference graph.
///
/// Both graphs run through the same network; each window node then picks
/// the reference node with the highest inverse cross-entropy score (lowest
/// index wins ties). With `threshold = None` the cutoff is the 90th
/// percentile of all window-to-reference scores, so roughly the best tenth
/// of candidate correspondences survives; matches below the cutoff are
/// dropped. The result is sorted by descending score, then query index.
pub fn query_subgraph<T: Scalar>(
    params: &GnnParams<T>,
    reference: &EmbeddingGraph<T>,
    window: &EmbeddingGraph<T>,
    eta: T,
    threshold: Option<T>,
) -> Result<Vec<QueryMatch<T>>, GraphError> {
    if window.is_empty() {
        return Err(GraphError::EmptyWindow);
    }
    let map_features = gnn_forward(params, reference)?;
    let window_features = gnn_forward(params, window)?;

    let mut all_scores: Vec<T> = Vec::with_capacity(window_features.len() * map_features.len());
    let mut best: Vec<QueryMatch<T>> = Vec::with_capacity(window_features.len());
    for (qi, q) in window_features.iter().enumerate() {
        let mut best_j = 0usize;
        let mut best_score = T::zero();
        for (j, m) in map_features.iter().enumerate() {
            let u = inverse_ce_score(q, m, eta)?;
            all_scores.push(u);
            if u > best_score {
                best_score = u;
                best_j = j;
            }
        }
        best.push(QueryMatch {
            query_idx: qi,
            ref_idx: best_j,
            score: best_score,
        });
    }

    let cutoff = match threshold {
        Some(t) => t,
        None => {
            let mut sorted = all_scores;
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
            let k = ((sorted.len() as f64) * 0.9).floor() as usize;
            sorted[k.min(sorted.len() - 1)]
        }
    };
    let mut kept: Vec<QueryMatch<T>> = best.into_iter().filter(|m| m.score >= cutoff).collect();
    kept.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.query_idx.cmp(&b.query_idx))
    });
    Ok(kept)
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

const GNN_MAGIC: &[u8; 4] = b"GNNP";
const GNN_VERSION: u8 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> GraphError {
    GraphError::Parse {
        source_name: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes network weights to the binary `GNNP` format: magic, version
/// byte, feature dimension as little-endian `u32`, then per layer
/// `w_self`, `w_nbr`, `bias` row-major as little-endian `f32`.
pub fn save_gnn<T: Scalar>(path: impl AsRef<Path>, params: &GnnParams<T>) -> Result<(), GraphError> {
    let mut out = Vec::new();
    out.extend_from_slice(GNN_MAGIC);
    out.push(GNN_VERSION);
    out.extend_from_slice(&u32::try_from(params.dim()).expect("dim fits u32").to_le_bytes());
    for m in params.param_list() {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.extend_from_slice(&(m[(r, c)].to_f64_lossy() as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads weights written by [`save_gnn`].
pub fn load_gnn<T: Scalar>(path: impl AsRef<Path>) -> Result<GnnParams<T>, GraphError> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            format_err(path, "file not found")
        } else {
            GraphError::Io(e)
        }
    })?;
    if data.len() < 9 {
        return Err(format_err(path, "file too short for header"));
    }
    if &data[0..4] != GNN_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    if data[4] != GNN_VERSION {
        return Err(format_err(path, format!("unsupported version {}", data[4])));
    }
    let dim = u32::from_le_bytes(<[u8; 4]>::try_from(&data[5..9]).unwrap()) as usize;
    if dim == 0 {
        return Err(format_err(path, "zero dimension"));
    }
    let mut pos = 9usize;
    let mut take = |rows: usize, cols: usize| -> Result<DMatrix<T>, GraphError> {
        let bytes = rows * cols * 4;
        if pos + bytes > data.len() {
            return Err(format_err(path, "truncated parameter block"));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let raw = <[u8; 4]>::try_from(&data[pos..pos + 4]).unwrap();
                let v = f32::from_le_bytes(raw);
                if !v.is_finite() {
                    return Err(format_err(path, "non-finite parameter value"));
                }
                m[(r, c)] = s::<T>(v as f64);
                pos += 4;
            }
        }
        Ok(m)
    };
    let mut layers = Vec::with_capacity(GNN_LAYERS);
    for _ in 0..GNN_LAYERS {
        layers.push(GnnLayer {
            w_self: take(dim, dim)?,
            w_nbr: take(dim, dim)?,
            bias: take(dim, 1)?,
        });
    }
    if pos != data.len() {
        return Err(format_err(path, "trailing bytes after parameters"));
    }
    Ok(GnnParams {
        layers: layers.try_into().expect("exactly three layers"),
    })
}

/// Writes matches as CSV with a `query_idx,ref_idx,score` header.
pub fn write_matches_csv<T: Scalar>(
    out: &mut impl std::io::Write,
    matches: &[QueryMatch<T>],
) -> Result<(), GraphError> {
    writeln!(out, "query_idx,ref_idx,score")?;
    for m in matches {
        writeln!(
            out,
            "{},{},{:.8e}",
            m.query_idx,
            m.ref_idx,
            m.score.to_f64_lossy()
        )?;
    }
    Ok(())
}

pub fn save_matches_csv<T: Scalar>(
    path: impl AsRef<Path>,
    matches: &[QueryMatch<T>],
) -> Result<(), GraphError> {
    let mut buf = Vec::new();
    write_matches_csv(&mut buf, matches)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Reads matches written by [`save_matches_csv`].
pub fn load_matches_csv<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<Vec<QueryMatch<T>>, GraphError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            format_err(path, "file not found")
        } else {
            GraphError::Io(e)
        }
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "query_idx,ref_idx,score" => {}
        _ => return Err(format_err(path, "missing query_idx,ref_idx,score header")),
    }
    let mut matches = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(format_err(
                path,
                format!("line {}: expected 3 fields", line_no + 1),
            ));
        }
        let bad = |what: &str| format_err(path, format!("line {}: bad {what}", line_no + 1));
        let query_idx: usize = fields[0].trim().parse().map_err(|_| bad("query_idx"))?;
        let ref_idx: usize = fields[1].trim().parse().map_err(|_| bad("ref_idx"))?;
        let score: f64 = fields[2].trim().parse().map_err(|_| bad("score"))?;
        if !score.is_finite() {
            return Err(bad("score"));
        }
        matches.push(QueryMatch {
            query_idx,
            ref_idx,
            score: s::<T>(score),
        });
    }
    Ok(matches)
}
