//! Patch encoder: maps a keyframe's image patches to one fixed-length code.
//!
//! Every patch becomes an input vector (normalized RGB bytes plus the
//! patch's normalized image position), runs through a small three-layer
//! perceptron, and the per-patch outputs are mean-pooled into the keyframe
//! code. Patches are processed in row-major feature order, so the code is
//! bitwise independent of the order patches are handed in.
//!
//! Two codes are compared with cosine similarity rescaled to `[0, 1]`,
//! which is trained (see [`train`]) to match the reprojection-overlap
//! score of the corresponding view pair.

mod train;

pub use train::{encoder_loss_gradients, train_encoder, EncoderTrainConfig};

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::{s, Scalar};
use crate::scene::Patch;
use crate::ErrorCategory;

/// Default width of the two hidden layers.
pub const DEFAULT_HIDDEN_DIM: usize = 32;

/// Default code length.
pub const DEFAULT_CODE_DIM: usize = 16;

/// Shrinkage loss steepness.
pub const SHRINKAGE_A: f64 = 10.0;

/// Shrinkage loss knee: errors below this contribute almost quadratically
/// damped, errors above it almost fully.
pub const SHRINKAGE_C: f64 = 0.2;

/// Embedding norms at or below this are degenerate for cosine similarity.
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("keyframe has no patches to encode")]
    NoPatches,
    #[error("input dimension mismatch: encoder expects {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedding norm below {MIN_EMBEDDING_NORM}; cosine similarity undefined")]
    ZeroNormEmbedding,
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("{detail}")]
    SizeMismatch { detail: String },
    #[error("{source_name}: {reason}")]
    Parse { source_name: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl EmbeddingError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            EmbeddingError::NoPatches
            | EmbeddingError::DimMismatch { .. }
            | EmbeddingError::SizeMismatch { .. } => ErrorCategory::Validation,
            EmbeddingError::ZeroNormEmbedding | EmbeddingError::NonFiniteLoss { .. } => {
                ErrorCategory::Numeric
            }
            EmbeddingError::Parse { .. } | EmbeddingError::Io(_) => ErrorCategory::Io,
        }
    }
}

/// Input length for patches of side `scale`: RGB bytes plus the two
/// normalized position coordinates.
pub fn patch_input_dim(scale: u32) -> usize {
    (scale as usize) * (scale as usize) * 3 + 2
}

/// Weights of the three-layer patch perceptron:
///
/// ```text
/// h1 = W1 x + b1          (linear)
/// h2 = relu(W2 h1 + b2)
/// out = W3 h2 + b3
/// ```
///
/// Biases are stored as single-column matrices so the whole parameter set
/// is a uniform list for the optimizer and the file format.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T: Scalar> {
    pub w1: DMatrix<T>,
    pub b1: DMatrix<T>,
    pub w2: DMatrix<T>,
    pub b2: DMatrix<T>,
    pub w3: DMatrix<T>,
    pub b3: DMatrix<T>,
}

fn xavier_uniform<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    // fill column-major to pin the draw order
    let data: Vec<T> = (0..rows * cols)
        .map(|_| s::<T>(rng.gen_range(-limit..limit)))
        .collect();
    DMatrix::from_vec(rows, cols, data)
}

impl<T: Scalar> EncoderParams<T> {
    /// Fresh seeded parameters for patches of side `scale`.
    pub fn seeded(scale: u32, hidden_dim: usize, code_dim: usize, seed: u64) -> Self {
        Self::seeded_dims(patch_input_dim(scale), hidden_dim, code_dim, seed)
    }

    /// Fresh seeded parameters with explicit dimensions. Layer weights are
    /// Xavier-uniform; hidden biases start at zero and the output bias at a
    /// small constant, so even an all-black patch maps to a nonzero code
    /// and cosine similarity stays defined from the first step.
    pub fn seeded_dims(input_dim: usize, hidden_dim: usize, code_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderParams {
            w1: xavier_uniform(hidden_dim, input_dim, &mut rng),
            b1: DMatrix::zeros(hidden_dim, 1),
            w2: xavier_uniform(hidden_dim, hidden_dim, &mut rng),
            b2: DMatrix::zeros(hidden_dim, 1),
            w3: xavier_uniform(code_dim, hidden_dim, &mut rng),
            b3: DMatrix::from_element(code_dim, 1, s::<T>(0.1)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn code_dim(&self) -> usize {
        self.w3.nrows()
    }

    /// Parameters in the fixed serialization and optimizer order.
    pub fn param_list(&self) -> [&DMatrix<T>; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn param_list_mut(&mut self) -> [&mut DMatrix<T>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    /// Forward pass for one patch input.
    pub fn forward_patch(&self, x: &DVector<T>) -> Result<DVector<T>, EmbeddingError> {
        if x.len() != self.input_dim() {
            return Err(EmbeddingError::DimMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let h1 = &self.w1 * x + self.b1.column(0);
        let mut z2 = &self.w2 * &h1 + self.b2.column(0);
        for v in z2.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        Ok(&self.w3 * z2 + self.b3.column(0))
    }
}

/// Converts patches to encoder inputs: RGB bytes scaled to `[0, 1]` in the
/// patch's row-major order, then the feature position normalized by the
/// image size. The result is sorted by feature position `(v, u)`, which
/// fixes the pooling order regardless of how the patches were listed.
pub fn patch_inputs<T: Scalar>(
    patches: &[Patch],
    image_width: u32,
    image_height: u32,
) -> Vec<DVector<T>> {
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.sort_unstable_by_key(|&i| (patches[i].v, patches[i].u));
    order
        .into_iter()
        .map(|i| {
            let p = &patches[i];
            let mut x = Vec::with_capacity(p.data.len() + 2);
            for &byte in &p.data {
                x.push(s::<T>(byte as f64 / 255.0));
            }
            x.push(s::<T>(p.u as f64 / image_width as f64));
            x.push(s::<T>(p.v as f64 / image_height as f64));
            DVector::from_vec(x)
        })
        .collect()
}

/// Mean-pools the per-patch codes of one keyframe into its embedding. The
/// inputs must already be in canonical order (see [`patch_inputs`]).
pub fn encode<T: Scalar>(
    params: &EncoderParams<T>,
    inputs: &[DVector<T>],
) -> Result<DVector<T>, EmbeddingError> {
    if inputs.is_empty() {
        return Err(EmbeddingError::NoPatches);
    }
    let mut sum = DVector::zeros(params.code_dim());
    for x in inputs {
        sum += params.forward_patch(x)?;
    }
    Ok(sum / s::<T>(inputs.len() as f64))
}

/// Encodes a keyframe's patches directly.
pub fn encode_patches<T: Scalar>(
    params: &EncoderParams<T>,
    patches: &[Patch],
    image_width: u32,
    image_height: u32,
) -> Result<DVector<T>, EmbeddingError> {
    encode(params, &patch_inputs(patches, image_width, image_height))
}

/// Cosine similarity in `[-1, 1]`; degenerate norms are an error rather
/// than a silent zero.
pub fn cosine_similarity<T: Scalar>(
    a: &DVector<T>,
    b: &DVector<T>,
) -> Result<T, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.norm();
    let nb = b.norm();
    if na <= s::<T>(MIN_EMBEDDING_NORM) || nb <= s::<T>(MIN_EMBEDDING_NORM) {
        return Err(EmbeddingError::ZeroNormEmbedding);
    }
    Ok(a.dot(b) / (na * nb))
}

/// Rescales a cosine to the `[0, 1]` range of overlap scores.
pub fn score_from_cosine<T: Scalar>(cosine: T) -> T {
    (T::one() + cosine) / s::<T>(2.0)
}

/// Predicted overlap score between two codes.
pub fn embedding_score<T: Scalar>(a: &DVector<T>, b: &DVector<T>) -> Result<T, EmbeddingError> {
    Ok(score_from_cosine(cosine_similarity(a, b)?))
}

/// Shrinkage loss on a prediction error: `l^2 / (1 + exp(a (c - l)))` with
/// `l = |error|`. Small errors are damped almost to zero, errors beyond
/// the knee `c` keep nearly their full squared value, and the function
/// stays smooth everywhere.
pub fn shrinkage_loss<T: Scalar>(error: T, a: T, c: T) -> T {
    let l = error.abs();
    l * l / (T::one() + (a * (c - l)).exp())
}

/// Derivative of [`shrinkage_loss`] with respect to the (signed) error.
pub fn shrinkage_loss_grad<T: Scalar>(error: T, a: T, c: T) -> T {
    let l = error.abs();
    let e = (a * (c - l)).exp();
    let denom = (T::one() + e) * (T::one() + e);
    let dl = (s::<T>(2.0) * l * (T::one() + e) + a * l * l * e) / denom;
    if error < T::zero() {
        -dl
    } else {
        dl
    }
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

const ENCODER_MAGIC: &[u8; 4] = b"ENCP";
const ENCODER_VERSION: u8 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> EmbeddingError {
    EmbeddingError::Parse {
        source_name: path.display().to_string(),
        reason: reason.into(),
    }
}

fn push_matrix_f32<T: Scalar>(out: &mut Vec<u8>, m: &DMatrix<T>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&(m[(r, c)].to_f64_lossy() as f32).to_le_bytes());
        }
    }
}

fn take_matrix_f32<T: Scalar>(
    data: &[u8],
    pos: &mut usize,
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<DMatrix<T>, EmbeddingError> {
    let bytes = rows * cols * 4;
    if *pos + bytes > data.len() {
        return Err(format_err(path, "truncated parameter block"));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let raw = <[u8; 4]>::try_from(&data[*pos..*pos + 4]).unwrap();
            let v = f32::from_le_bytes(raw);
            if !v.is_finite() {
                return Err(format_err(path, "non-finite parameter value"));
            }
            m[(r, c)] = s::<T>(v as f64);
            *pos += 4;
        }
    }
    Ok(m)
}

/// Writes encoder parameters to the binary `ENCP` format: a 4-byte magic,
/// a version byte, the three dimensions as little-endian `u32`, then every
/// parameter matrix row-major as little-endian `f32`.
pub fn save_encoder<T: Scalar>(
    path: impl AsRef<Path>,
    params: &EncoderParams<T>,
) -> Result<(), EmbeddingError> {
    let mut out = Vec::new();
    out.extend_from_slice(ENCODER_MAGIC);
    out.push(ENCODER_VERSION);
    for dim in [params.input_dim(), params.hidden_dim(), params.code_dim()] {
        out.extend_from_slice(&u32::try_from(dim).expect("dims fit u32").to_le_bytes());
    }
    for m in params.param_list() {
        push_matrix_f32(&mut out, m);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads parameters written by [`save_encoder`].
pub fn load_encoder<T: Scalar>(path: impl AsRef<Path>) -> Result<EncoderParams<T>, EmbeddingError> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            format_err(path, "file not found")
        } else {
            EmbeddingError::Io(e)
        }
    })?;
    if data.len() < 17 {
        return Err(format_err(path, "file too short for header"));
    }
    if &data[0..4] != ENCODER_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    if data[4] != ENCODER_VERSION {
        return Err(format_err(path, format!("unsupported version {}", data[4])));
    }
    let dim_at = |i: usize| {
        u32::from_le_bytes(<[u8; 4]>::try_from(&data[5 + 4 * i..9 + 4 * i]).unwrap()) as usize
    };
    let (input, hidden, code) = (dim_at(0), dim_at(1), dim_at(2));
    if input == 0 || hidden == 0 || code == 0 {
        return Err(format_err(path, "zero dimension"));
    }
    let mut pos = 17;
    let w1 = take_matrix_f32(&data, &mut pos, hidden, input, path)?;
    let b1 = take_matrix_f32(&data, &mut pos, hidden, 1, path)?;
    let w2 = take_matrix_f32(&data, &mut pos, hidden, hidden, path)?;
    let b2 = take_matrix_f32(&data, &mut pos, hidden, 1, path)?;
    let w3 = take_matrix_f32(&data, &mut pos, code, hidden, path)?;
    let b3 = take_matrix_f32(&data, &mut pos, code, 1, path)?;
    if pos != data.len() {
        return Err(format_err(path, "trailing bytes after parameters"));
    }
    Ok(EncoderParams {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
    })
}

/// Writes embeddings as CSV, one row per keyframe, nine significant digits
/// per value.
pub fn write_embeddings_csv<T: Scalar>(
    out: &mut impl std::io::Write,
    embeddings: &[DVector<T>],
) -> Result<(), EmbeddingError> {
    for e in embeddings {
        let row: Vec<String> = e
            .iter()
            .map(|v| format!("{:.8e}", v.to_f64_lossy()))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn save_embeddings_csv<T: Scalar>(
    path: impl AsRef<Path>,
    embeddings: &[DVector<T>],
) -> Result<(), EmbeddingError> {
    let mut buf = Vec::new();
    write_embeddings_csv(&mut buf, embeddings)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Reads embeddings written by [`save_embeddings_csv`]. All rows must have
/// the same length.
pub fn load_embeddings_csv<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<Vec<DVector<T>>, EmbeddingError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            format_err(path, "file not found")
        } else {
            EmbeddingError::Io(e)
        }
    })?;
    let mut rows: Vec<DVector<T>> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut values = Vec::new();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                format_err(path, format!("line {}: bad number {field:?}", line_no + 1))
            })?;
            if !v.is_finite() {
                return Err(format_err(path, format!("line {}: non-finite value", line_no + 1)));
            }
            values.push(s::<T>(v));
        }
        if let Some(first) = rows.first() {
            if first.len() != values.len() {
                return Err(format_err(
                    path,
                    format!(
                        "line {}: row length {} differs from {}",
                        line_no + 1,
                        values.len(),
                        first.len()
                    ),
                ));
            }
        }
        rows.push(DVector::from_vec(values));
    }
    Ok(rows)
}
