//! Trajectory accuracy metrics and similarity-heatmap comparison.
//!
//! [`evaluate_ate`] reports absolute translational error between an
//! estimated and a ground-truth trajectory, optionally after closed-form
//! rigid alignment (centroids plus a rotation from the SVD of the
//! cross-covariance). Reported figures:
//!
//! - `rmse` — root mean square of per-frame translation errors, meters;
//! - `max_err` — largest per-frame error, meters;
//! - `sigma_rmse` — population standard deviation of the per-frame
//!   errors divided by the ground-truth trajectory's extent (the maximum
//!   pairwise distance between ground-truth positions), dimensionless.
//!   Zero-extent trajectories report zero. This normalization is stated
//!   in every report header so the number cannot be misread.
//!
//! [`heatmap_error`] compares a predicted similarity matrix against
//! ground truth elementwise and reports the worst absolute deviation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{Pose, Trajectory};
use crate::scalar::{s, Scalar};
use crate::similarity::SimilarityMatrix;
use crate::ErrorCategory;

/// Matching timestamps may differ by at most this much (seconds).
pub const TIMESTAMP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum EvaluateError {
    #[error("trajectory length mismatch: estimated {estimated}, ground truth {ground_truth}")]
    LengthMismatch {
        estimated: usize,
        ground_truth: usize,
    },
    #[error(
        "timestamp mismatch at frame {index}: estimated {estimated}, ground truth {ground_truth}"
    )]
    TimestampMismatch {
        index: usize,
        estimated: f64,
        ground_truth: f64,
    },
    #[error("trajectories are empty")]
    EmptyTrajectory,
    #[error("similarity dimensions differ: prediction {pred}, truth {truth}")]
    DimMismatch { pred: usize, truth: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl EvaluateError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            EvaluateError::Io(_) => ErrorCategory::Io,
            _ => ErrorCategory::Validation,
        }
    }
}

/// Absolute-translational-error summary for one trajectory pair.
#[derive(Debug, Clone)]
pub struct AteReport {
    /// Root mean square of per-frame errors, meters.
    pub rmse: f64,
    /// Population standard deviation of per-frame errors divided by the
    /// ground-truth trajectory extent; dimensionless.
    pub sigma_rmse: f64,
    /// Largest per-frame error, meters.
    pub max_err: f64,
    /// Per-frame translation errors, meters.
    pub errors: Vec<f64>,
}

/// Maximum pairwise distance between ground-truth positions.
fn trajectory_extent<T: Scalar>(poses: &[Pose<T>]) -> f64 {
    let mut extent = 0.0f64;
    for i in 0..poses.len() {
        for j in i + 1..poses.len() {
            let d = (poses[i].translation - poses[j].translation)
                .norm()
                .to_f64_lossy();
            extent = extent.max(d);
        }
    }
    extent
}

/// Closed-form rigid transform mapping `source` positions onto `target`:
/// centroids fix the translation, the rotation comes from the SVD of the
/// cross-covariance with a determinant correction so the result is a
/// proper rotation even for planar or degenerate point sets.
fn rigid_alignment<T: Scalar>(source: &[Vector3<T>], target: &[Vector3<T>]) -> Pose<T> {
    let n = s::<T>(source.len() as f64);
    let mut mu_s = Vector3::zeros();
    let mut mu_t = Vector3::zeros();
    for (a, b) in source.iter().zip(target) {
        mu_s += a;
        mu_t += b;
    }
    mu_s /= n;
    mu_t /= n;

    let mut cov = Matrix3::zeros();
    for (a, b) in source.iter().zip(target) {
        cov += (b - mu_t) * (a - mu_s).transpose();
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("3x3 SVD always produces U");
    let v_t = svd.v_t.expect("3x3 SVD always produces Vᵀ");
    let mut rotation = u * v_t;
    if rotation.determinant() < T::zero() {
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -T::one();
        rotation = u * flip * v_t;
    }
    let translation = mu_t - rotation * mu_s;
    Pose::new(rotation, translation)
}

/// Compares an estimated trajectory against ground truth. Frames are
/// matched positionally; timestamps must agree within
/// [`TIMESTAMP_TOLERANCE`]. With `align` set, a closed-form rigid
/// transform is applied to the estimate first, making the result
/// invariant to the arbitrary choice of world frame.
pub fn evaluate_ate<T: Scalar>(
    estimated: &Trajectory<T>,
    ground_truth: &Trajectory<T>,
    align: bool,
) -> Result<AteReport, EvaluateError> {
    if estimated.poses.len() != ground_truth.poses.len() {
        return Err(EvaluateError::LengthMismatch {
            estimated: estimated.poses.len(),
            ground_truth: ground_truth.poses.len(),
        });
    }
    if estimated.poses.is_empty() {
        return Err(EvaluateError::EmptyTrajectory);
    }
    for (index, (a, b)) in estimated
        .timestamps
        .iter()
        .zip(&ground_truth.timestamps)
        .enumerate()
    {
        if (a - b).abs() > TIMESTAMP_TOLERANCE {
            return Err(EvaluateError::TimestampMismatch {
                index,
                estimated: *a,
                ground_truth: *b,
            });
        }
    }

    let est: Vec<Vector3<T>> = estimated.poses.iter().map(|p| p.translation).collect();
    let gt: Vec<Vector3<T>> = ground_truth.poses.iter().map(|p| p.translation).collect();
    let correction = if align {
        rigid_alignment(&est, &gt)
    } else {
        Pose::identity()
    };

    let errors: Vec<f64> = est
        .iter()
        .zip(&gt)
        .map(|(e, g)| (correction.apply(e) - g).norm().to_f64_lossy())
        .collect();
    let n = errors.len() as f64;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let max_err = errors.iter().cloned().fold(0.0, f64::max);
    let mean = errors.iter().sum::<f64>() / n;
    let stdev = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    let extent = trajectory_extent(&ground_truth.poses);
    let sigma_rmse = if extent > 0.0 { stdev / extent } else { 0.0 };

    Ok(AteReport {
        rmse,
        sigma_rmse,
        max_err,
        errors,
    })
}

/// Elementwise absolute difference between predicted and ground-truth
/// similarity matrices, plus the largest entry of that difference.
pub fn heatmap_error<T: Scalar>(
    pred: &SimilarityMatrix<T>,
    truth: &SimilarityMatrix<T>,
) -> Result<(SimilarityMatrix<T>, T), EvaluateError> {
    if pred.len() != truth.len() {
        return Err(EvaluateError::DimMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let n = pred.len();
    let mut diff = SimilarityMatrix::zeros(n);
    let mut max_abs = T::zero();
    for i in 0..n {
        for j in 0..n {
            let d = (pred.get(i, j) - truth.get(i, j)).abs();
            diff.set(i, j, d);
            max_abs = max_abs.max(d);
        }
    }
    Ok((diff, max_abs))
}

/// Plain-text report; the header states the exact σ normalization.
pub fn write_ate_report(out: &mut impl Write, report: &AteReport) -> std::io::Result<()> {
    writeln!(out, "# absolute translational error")?;
    writeln!(
        out,
        "# sigma_rmse = stdev(per-frame errors) / max pairwise ground-truth distance"
    )?;
    writeln!(out, "frames {}", report.errors.len())?;
    writeln!(out, "rmse_m {:.8e}", report.rmse)?;
    writeln!(out, "max_err_m {:.8e}", report.max_err)?;
    writeln!(out, "sigma_rmse {:.8e}", report.sigma_rmse)?;
    Ok(())
}

pub fn save_ate_report(path: impl AsRef<Path>, report: &AteReport) -> Result<(), EvaluateError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_ate_report(&mut out, report)?;
    out.flush()?;
    Ok(())
}

/// Per-frame error table, one row per frame.
pub fn write_ate_csv(out: &mut impl Write, report: &AteReport) -> std::io::Result<()> {
    writeln!(out, "frame,error_m")?;
    for (frame, err) in report.errors.iter().enumerate() {
        writeln!(out, "{frame},{err:.8e}")?;
    }
    Ok(())
}

pub fn save_ate_csv(path: impl AsRef<Path>, report: &AteReport) -> Result<(), EvaluateError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_ate_csv(&mut out, report)?;
    out.flush()?;
    Ok(())
}
