//! Encoder training: fit embedding scores to a reprojection-overlap matrix.
//!
//! The loss over a batch of keyframe pairs `(i, j)` is the mean shrinkage
//! loss of `score(e_i, e_j) - target[i][j]`. Gradients flow through the
//! cosine score into the per-keyframe codes first; each keyframe then runs
//! a single backward pass over its patches with its accumulated code
//! gradient, so the patch-level work stays linear in the number of patches
//! instead of quadratic in the number of pairs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::{s, Scalar};
use crate::sgd::{SgdConfig, SgdState};
use crate::similarity::SimilarityMatrix;

use super::{
    encode, shrinkage_loss, shrinkage_loss_grad, EmbeddingError, EncoderParams,
    MIN_EMBEDDING_NORM, SHRINKAGE_A, SHRINKAGE_C,
};

#[derive(Debug, Clone)]
pub struct EncoderTrainConfig<T: Scalar> {
    /// Optimizer steps; each step processes one batch of pairs.
    pub steps: usize,
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    /// With more keyframes than this, each batch samples
    /// [`max_batch_pairs`](Self::max_batch_pairs) random pairs instead of
    /// enumerating all of them.
    pub full_batch_limit: usize,
    pub max_batch_pairs: usize,
    pub seed: u64,
    pub shrinkage_a: T,
    pub shrinkage_c: T,
}

impl<T: Scalar> Default for EncoderTrainConfig<T> {
    fn default() -> Self {
        EncoderTrainConfig {
            steps: 900,
            learning_rate: s(0.02),
            momentum: s(0.9),
            weight_decay: s(1e-5),
            full_batch_limit: 64,
            max_batch_pairs: 4096,
            seed: 0,
            shrinkage_a: s(SHRINKAGE_A),
            shrinkage_c: s(SHRINKAGE_C),
        }
    }
}

type ParamGrads<T> = [DMatrix<T>; 6];

fn zero_grads<T: Scalar>(params: &EncoderParams<T>) -> ParamGrads<T> {
    params
        .param_list()
        .map(|p| DMatrix::zeros(p.nrows(), p.ncols()))
}

/// Mean batch loss and its gradient with respect to every parameter.
/// Exposed to the tests so the analytic gradient can be checked against
/// finite differences of the same function.
pub(crate) fn batch_gradients<T: Scalar>(
    params: &EncoderParams<T>,
    patch_sets: &[Vec<DVector<T>>],
    target: &SimilarityMatrix<T>,
    pairs: &[(usize, usize)],
    shrinkage_a: T,
    shrinkage_c: T,
) -> Result<(f64, ParamGrads<T>), EmbeddingError> {
    let embeddings: Vec<DVector<T>> = patch_sets
        .iter()
        .map(|set| encode(params, set))
        .collect::<Result<_, _>>()?;

    let weight = s::<T>(1.0 / pairs.len() as f64);
    let mut loss = T::zero();
    let mut code_grads: Vec<DVector<T>> =
        vec![DVector::zeros(params.code_dim()); patch_sets.len()];

    for &(i, j) in pairs {
        let (a, b) = (&embeddings[i], &embeddings[j]);
        let na = a.norm();
        let nb = b.norm();
        if na <= s::<T>(MIN_EMBEDDING_NORM) || nb <= s::<T>(MIN_EMBEDDING_NORM) {
            return Err(EmbeddingError::ZeroNormEmbedding);
        }
        let cosine = a.dot(b) / (na * nb);
        let pred = (T::one() + cosine) / s::<T>(2.0);
        let err = pred - target.get(i, j);
        loss += shrinkage_loss(err, shrinkage_a, shrinkage_c) * weight;
        // d loss / d cosine, including the 1/2 from the score rescale
        let g = shrinkage_loss_grad(err, shrinkage_a, shrinkage_c) * weight / s::<T>(2.0);
        // d cosine / d a = b / (|a||b|) - cosine * a / |a|^2, symmetric in b
        code_grads[i] += b * (g / (na * nb)) - a * (g * cosine / (na * na));
        code_grads[j] += a * (g / (na * nb)) - b * (g * cosine / (nb * nb));
    }

    let mut grads = zero_grads(params);
    for (set, code_grad) in patch_sets.iter().zip(&code_grads) {
        if code_grad.iter().all(|v| *v == T::zero()) {
            continue;
        }
        // the code is the mean over patches, so each patch sees 1/P of it
        let ge = code_grad / s::<T>(set.len() as f64);
        let w3t_ge = params.w3.transpose() * &ge;
        for x in set {
            let h1 = &params.w1 * x + params.b1.column(0);
            let z2 = &params.w2 * &h1 + params.b2.column(0);
            let h2 = z2.map(|v| if v > T::zero() { v } else { T::zero() });

            // out = W3 h2 + b3
            grads[4] += &ge * h2.transpose();
            grads[5] += &ge;
            // h2 = relu(z2)
            let mut dz2 = w3t_ge.clone();
            for (d, &z) in dz2.iter_mut().zip(z2.iter()) {
                if z <= T::zero() {
                    *d = T::zero();
                }
            }
            // z2 = W2 h1 + b2
            grads[2] += &dz2 * h1.transpose();
            grads[3] += &dz2;
            // h1 = W1 x + b1
            let dh1 = params.w2.transpose() * dz2;
            grads[0] += &dh1 * x.transpose();
            grads[1] += &dh1;
        }
    }

    Ok((loss.to_f64_lossy(), grads))
}

fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Full-batch loss and analytic parameter gradients at the current
/// parameters, without taking an optimizer step. Gradient slots follow
/// the [`EncoderParams`] field order `w1, b1, w2, b2, w3, b3`. This is
/// the quantity a full-batch training step descends on; it is public so
/// callers can check the backward pass against finite differences of
/// the loss or inspect descent directions.
pub fn encoder_loss_gradients<T: Scalar>(
    params: &EncoderParams<T>,
    patch_sets: &[Vec<DVector<T>>],
    target: &SimilarityMatrix<T>,
    config: &EncoderTrainConfig<T>,
) -> Result<(f64, [DMatrix<T>; 6]), EmbeddingError> {
    let n = patch_sets.len();
    if n != target.len() {
        return Err(EmbeddingError::SizeMismatch {
            detail: format!(
                "{} patch sets but target matrix is {}x{}",
                n,
                target.len(),
                target.len()
            ),
        });
    }
    batch_gradients(
        params,
        patch_sets,
        target,
        &all_pairs(n),
        config.shrinkage_a,
        config.shrinkage_c,
    )
}

/// Trains the encoder in place against a target overlap matrix; returns
/// the per-step loss history. Aborts with
/// [`EmbeddingError::NonFiniteLoss`] the moment the loss stops being a
/// finite number, leaving the parameters at their pre-step values.
pub fn train_encoder<T: Scalar>(
    params: &mut EncoderParams<T>,
    patch_sets: &[Vec<DVector<T>>],
    target: &SimilarityMatrix<T>,
    config: &EncoderTrainConfig<T>,
) -> Result<Vec<f64>, EmbeddingError> {
    let n = patch_sets.len();
    if n != target.len() {
        return Err(EmbeddingError::SizeMismatch {
            detail: format!(
                "{} patch sets but target matrix is {}x{}",
                n,
                target.len(),
                target.len()
            ),
        });
    }
    if n == 0 {
        return Err(EmbeddingError::SizeMismatch {
            detail: "no keyframes to train on".to_string(),
        });
    }
    for set in patch_sets {
        if set.is_empty() {
            return Err(EmbeddingError::NoPatches);
        }
        for x in set {
            if x.len() != params.input_dim() {
                return Err(EmbeddingError::DimMismatch {
                    expected: params.input_dim(),
                    got: x.len(),
                });
            }
        }
    }

    let full_batch = if n <= config.full_batch_limit {
        Some(all_pairs(n))
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sampled: Vec<(usize, usize)> = Vec::new();

    let sgd_config = SgdConfig {
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let mut optimizer = SgdState::zeros_like(&params.param_list());
    let mut history = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let pairs: &[(usize, usize)] = match &full_batch {
            Some(p) => p,
            None => {
                sampled.clear();
                while sampled.len() < config.max_batch_pairs {
                    let i = rng.gen_range(0..n);
                    let j = rng.gen_range(0..n);
                    if i != j {
                        sampled.push((i, j));
                    }
                }
                &sampled
            }
        };
        let (loss, grads) = batch_gradients(
            params,
            patch_sets,
            target,
            pairs,
            config.shrinkage_a,
            config.shrinkage_c,
        )?;
        if !loss.is_finite() {
            return Err(EmbeddingError::NonFiniteLoss { step });
        }
        history.push(loss);
        let grad_refs: [&DMatrix<T>; 6] = grads.each_ref();
        let mut param_refs = params.param_list_mut();
        optimizer.step(&sgd_config, &mut param_refs, &grad_refs);
    }
    Ok(history)
}
