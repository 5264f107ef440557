//! Reprojection-overlap similarity between depth keyframes.
//!
//! The similarity of an ordered keyframe pair is the fraction of source
//! pixels whose backprojected points land inside the target view:
//!
//! ```text
//! s(i, j) = |{ n : target sees point n of source i }| / (width * height)
//! ```
//!
//! Every valid source pixel is lifted to 3D with its own depth, moved through
//! the relative transform, projected into the target camera, and counted if
//! it falls on the target pixel grid (and, when occlusion testing is on,
//! is not hidden behind the target's own surface). Scores are exact ratios
//! with denominator `width * height`, so entries are reproducible bitwise.
//!
//! Source pixels are sampled at their half-integer centers. A pixel's own
//! backprojected point then reprojects into the same cell even under the
//! floating-point identity transform, which pins the self-similarity of a
//! fully valid frame at exactly 1.

mod matrix;

pub use matrix::{
    load_matrix_csv, read_matrix_csv, save_matrix_csv, save_matrix_pgm, write_matrix_csv,
    write_matrix_pgm, SimilarityMatrix,
};

use rayon::prelude::*;

use crate::geometry::{CameraIntrinsics, Pose, MIN_PROJECTION_DEPTH};
use crate::scalar::{s, Scalar};
use crate::ErrorCategory;

/// Default occlusion slack in meters: generous against millimeter depth
/// quantization, far below scene-scale depth differences.
pub const DEFAULT_OCCLUSION_EPS: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum SimilarityError {
    #[error("depth map {index} is {got_w}x{got_h}, intrinsics expect {want_w}x{want_h}")]
    ResolutionMismatch {
        index: usize,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("invalid depth value at pixel {index}: {reason}")]
    InvalidDepth { index: usize, reason: String },
    #[error("depth map size {width}x{height} does not match {len} values")]
    SizeMismatch { width: u32, height: u32, len: usize },
    #[error("{depths} depth maps but {poses} poses")]
    LengthMismatch { depths: usize, poses: usize },
    #[error("matrix is {rows} rows but row {row} has {cols} columns")]
    NotSquare { rows: usize, row: usize, cols: usize },
    #[error("matrix entry ({i}, {j}) = {value} outside [0, 1]")]
    EntryOutOfRange { i: usize, j: usize, value: f64 },
    #[error("{source_name}:{line}: {reason}")]
    Parse {
        source_name: String,
        line: usize,
        reason: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SimilarityError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            SimilarityError::Parse { .. } | SimilarityError::Io(_) => ErrorCategory::Io,
            _ => ErrorCategory::Validation,
        }
    }
}

/// Dense depth image in meters; 0 marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T: Scalar> {
    width: u32,
    height: u32,
    values: Vec<T>,
}

impl<T: Scalar> DepthMap<T> {
    /// Row-major values, one per pixel. Rejects negative and non-finite
    /// entries; zeros are the invalid marker and pass.
    pub fn new(width: u32, height: u32, values: Vec<T>) -> Result<Self, SimilarityError> {
        if values.len() != (width as usize) * (height as usize) {
            return Err(SimilarityError::SizeMismatch {
                width,
                height,
                len: values.len(),
            });
        }
        for (index, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(SimilarityError::InvalidDepth {
                    index,
                    reason: "non-finite".to_string(),
                });
            }
            if v < T::zero() {
                return Err(SimilarityError::InvalidDepth {
                    index,
                    reason: format!("negative ({v})"),
                });
            }
        }
        Ok(DepthMap {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        DepthMap {
            width,
            height,
            values: vec![T::zero(); (width as usize) * (height as usize)],
        }
    }

    pub fn constant(width: u32, height: u32, depth: T) -> Result<Self, SimilarityError> {
        DepthMap::new(
            width,
            height,
            vec![depth; (width as usize) * (height as usize)],
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, col: u32, row: u32) -> T {
        self.values[(row as usize) * (self.width as usize) + col as usize]
    }

    /// Sets one pixel; the value must be finite and nonnegative.
    pub fn set(&mut self, col: u32, row: u32, depth: T) {
        assert!(depth.is_finite() && depth >= T::zero(), "invalid depth");
        self.values[(row as usize) * (self.width as usize) + col as usize] = depth;
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > T::zero()).count()
    }
}

/// Occlusion handling for [`reprojection_iou`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouOptions<T: Scalar> {
    /// When set, points landing behind the target's own surface by more than
    /// `occlusion_eps` are not counted.
    pub occlusion: bool,
    pub occlusion_eps: T,
}

impl<T: Scalar> Default for IouOptions<T> {
    fn default() -> Self {
        IouOptions {
            occlusion: true,
            occlusion_eps: s(DEFAULT_OCCLUSION_EPS),
        }
    }
}

/// Splats points (given as continuous pixel coordinates plus camera-frame
/// depth) onto the pixel grid, keeping the minimum depth per covered cell.
/// Points off the grid or with nonpositive depth are ignored; uncovered cells
/// stay 0 (invalid).
pub fn zbuffer_render<T: Scalar>(points: &[(T, T, T)], width: u32, height: u32) -> DepthMap<T> {
    let mut buf = DepthMap::zeros(width, height);
    for &(u, v, z) in points {
        if z <= T::zero() {
            continue;
        }
        let col = u.floor();
        let row = v.floor();
        if col < T::zero()
            || row < T::zero()
            || col > s(width as f64 - 1.0)
            || row > s(height as f64 - 1.0)
        {
            continue;
        }
        let (c, r) = (col.to_f64_lossy() as u32, row.to_f64_lossy() as u32);
        let current = buf.get(c, r);
        if current == T::zero() || z < current {
            buf.set(c, r, z);
        }
    }
    buf
}

/// Z-buffer of a keyframe against itself: every valid pixel's center point at
/// its own depth.
fn self_zbuffer<T: Scalar>(depth: &DepthMap<T>) -> DepthMap<T> {
    let mut points = Vec::with_capacity(depth.valid_count());
    for row in 0..depth.height() {
        for col in 0..depth.width() {
            let z = depth.get(col, row);
            if z > T::zero() {
                points.push((s::<T>(col as f64 + 0.5), s::<T>(row as f64 + 0.5), z));
            }
        }
    }
    zbuffer_render(&points, depth.width(), depth.height())
}

fn check_resolution<T: Scalar>(
    depth: &DepthMap<T>,
    k: &CameraIntrinsics<T>,
    index: usize,
) -> Result<(), SimilarityError> {
    if depth.width() != k.width || depth.height() != k.height {
        return Err(SimilarityError::ResolutionMismatch {
            index,
            got_w: depth.width(),
            got_h: depth.height(),
            want_w: k.width,
            want_h: k.height,
        });
    }
    Ok(())
}

/// Directed reprojection overlap from `source` into `target`; see the module
/// docs for the exact counting rule. Both poses are world-from-camera.
pub fn reprojection_iou<T: Scalar>(
    source: &DepthMap<T>,
    target: &DepthMap<T>,
    pose_source: &Pose<T>,
    pose_target: &Pose<T>,
    k: &CameraIntrinsics<T>,
    opts: &IouOptions<T>,
) -> Result<T, SimilarityError> {
    check_resolution(source, k, 0)?;
    check_resolution(target, k, 1)?;
    let zbuf = if opts.occlusion {
        Some(self_zbuffer(target))
    } else {
        None
    };
    Ok(iou_counting_pass(
        source,
        pose_source,
        pose_target,
        k,
        zbuf.as_ref(),
        opts.occlusion_eps,
    ))
}

/// The counting pass proper. The relative transform is expanded to scalars
/// once and the per-pixel arithmetic is written out explicitly, so the result
/// is a pure function of the inputs regardless of parallelism or the linear
/// algebra backend.
fn iou_counting_pass<T: Scalar>(
    source: &DepthMap<T>,
    pose_source: &Pose<T>,
    pose_target: &Pose<T>,
    k: &CameraIntrinsics<T>,
    target_zbuffer: Option<&DepthMap<T>>,
    occlusion_eps: T,
) -> T {
    let rel = pose_target.inverse().compose(pose_source);
    let r = &rel.rotation;
    let (r00, r01, r02) = (r[(0, 0)], r[(0, 1)], r[(0, 2)]);
    let (r10, r11, r12) = (r[(1, 0)], r[(1, 1)], r[(1, 2)]);
    let (r20, r21, r22) = (r[(2, 0)], r[(2, 1)], r[(2, 2)]);
    let (t0, t1, t2) = (rel.translation[0], rel.translation[1], rel.translation[2]);

    let z_min = s::<T>(MIN_PROJECTION_DEPTH);
    let half = s::<T>(0.5);
    let max_col = s::<T>(k.width as f64 - 1.0);
    let max_row = s::<T>(k.height as f64 - 1.0);

    let mut count: u64 = 0;
    for row in 0..source.height() {
        for col in 0..source.width() {
            let z = source.get(col, row);
            if z <= T::zero() {
                continue;
            }
            let uc = s::<T>(col as f64) + half;
            let vc = s::<T>(row as f64) + half;
            let x = (uc - k.cx) * z / k.fx;
            let y = (vc - k.cy) * z / k.fy;
            let px = r00 * x + r01 * y + r02 * z + t0;
            let py = r10 * x + r11 * y + r12 * z + t1;
            let pz = r20 * x + r21 * y + r22 * z + t2;
            if pz <= z_min {
                continue;
            }
            let u = k.fx * px / pz + k.cx;
            let v = k.fy * py / pz + k.cy;
            let fc = u.floor();
            let fr = v.floor();
            if fc < T::zero() || fr < T::zero() || fc > max_col || fr > max_row {
                continue;
            }
            if let Some(zbuf) = target_zbuffer {
                let zb = zbuf.get(fc.to_f64_lossy() as u32, fr.to_f64_lossy() as u32);
                if zb > T::zero() && pz > zb + occlusion_eps {
                    continue;
                }
            }
            count += 1;
        }
    }
    s::<T>(count as f64) / s::<T>((k.width as u64 * k.height as u64) as f64)
}

/// All-pairs similarity matrix for one keyframe set. Entry `(i, j)` is the
/// overlap from keyframe `i` into keyframe `j`. Pairs are computed in
/// parallel; each entry is a pure function of its pair, so results do not
/// depend on the worker count.
pub fn build_similarity_matrix<T: Scalar + Send + Sync>(
    depths: &[&DepthMap<T>],
    poses: &[Pose<T>],
    k: &CameraIntrinsics<T>,
    opts: &IouOptions<T>,
) -> Result<SimilarityMatrix<T>, SimilarityError> {
    if depths.len() != poses.len() {
        return Err(SimilarityError::LengthMismatch {
            depths: depths.len(),
            poses: poses.len(),
        });
    }
    for (index, depth) in depths.iter().enumerate() {
        check_resolution(depth, k, index)?;
    }
    let n = depths.len();
    let zbuffers: Vec<Option<DepthMap<T>>> = if opts.occlusion {
        depths
            .par_iter()
            .map(|depth| Some(self_zbuffer(depth)))
            .collect()
    } else {
        vec![None; n]
    };
    let mut values = vec![T::zero(); n * n];
    values
        .par_iter_mut()
        .enumerate()
        .for_each(|(idx, slot)| {
            let (i, j) = (idx / n, idx % n);
            *slot = iou_counting_pass(
                depths[i],
                &poses[i],
                &poses[j],
                k,
                zbuffers[j].as_ref(),
                opts.occlusion_eps,
            );
        });
    SimilarityMatrix::new(n, values)
}
