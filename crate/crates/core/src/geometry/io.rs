//! Trajectory and intrinsics text IO.
//!
//! Trajectories use the TUM line convention, one pose per line:
//!
//! ```text
//! timestamp tx ty tz qx qy qz qw
//! ```
//!
//! Quaternions appear only at this boundary; in memory rotations stay 3x3
//! matrices. Floats are written in shortest round-trip form, so translations
//! and timestamps reload bit-identically; rotations reload within a couple of
//! ulp of the original matrix (one quaternion conversion each way).
//!
//! Intrinsics files hold a single line: `fx fy cx cy width height`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion};

use super::{CameraIntrinsics, GeometryError, Pose};
use crate::scalar::{s, Scalar};

/// Timestamped pose sequence. `timestamps[i]` belongs to `poses[i]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory<T: Scalar> {
    pub timestamps: Vec<f64>,
    pub poses: Vec<Pose<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new() -> Self {
        Trajectory {
            timestamps: Vec::new(),
            poses: Vec::new(),
        }
    }

    pub fn push(&mut self, timestamp: f64, pose: Pose<T>) {
        self.timestamps.push(timestamp);
        self.poses.push(pose);
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Unit quaternion `(x, y, z, w)` for a rotation matrix, sign-canonicalized
/// to `w >= 0` so output bytes are stable.
pub(crate) fn rotation_to_quaternion<T: Scalar>(r: &Matrix3<T>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let (x, y, z, w) = (
        q.i.to_f64_lossy(),
        q.j.to_f64_lossy(),
        q.k.to_f64_lossy(),
        q.w.to_f64_lossy(),
    );
    if w < 0.0 {
        [-x, -y, -z, -w]
    } else {
        [x, y, z, w]
    }
}

pub(crate) fn quaternion_to_rotation<T: Scalar>(q: [f64; 4]) -> Result<Matrix3<T>, String> {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(norm > 1e-6 && norm.is_finite()) {
        return Err(format!("quaternion norm {norm} not usable"));
    }
    let uq = UnitQuaternion::from_quaternion(Quaternion::new(
        s::<T>(q[3]),
        s::<T>(q[0]),
        s::<T>(q[1]),
        s::<T>(q[2]),
    ));
    Ok(uq.to_rotation_matrix().into_inner())
}

pub fn write_trajectory<T: Scalar>(
    out: &mut impl Write,
    traj: &Trajectory<T>,
) -> std::io::Result<()> {
    for (ts, pose) in traj.timestamps.iter().zip(&traj.poses) {
        let t = &pose.translation;
        let q = rotation_to_quaternion(&pose.rotation);
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            ts,
            t[0].to_f64_lossy(),
            t[1].to_f64_lossy(),
            t[2].to_f64_lossy(),
            q[0],
            q[1],
            q[2],
            q[3]
        )?;
    }
    Ok(())
}

pub fn read_trajectory<T: Scalar>(
    input: impl BufRead,
    source_name: &str,
) -> Result<Trajectory<T>, GeometryError> {
    let parse_err = |line: usize, reason: String| GeometryError::Parse {
        source_name: source_name.to_string(),
        line,
        reason,
    };
    let mut traj = Trajectory::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(
                line_no,
                format!("expected 8 fields, got {}", fields.len()),
            ));
        }
        let mut values = [0.0f64; 8];
        for (slot, field) in values.iter_mut().zip(&fields) {
            *slot = field
                .parse::<f64>()
                .map_err(|e| parse_err(line_no, format!("bad float {field:?}: {e}")))?;
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(line_no, "non-finite value".to_string()));
        }
        let rotation = quaternion_to_rotation::<T>([values[4], values[5], values[6], values[7]])
            .map_err(|reason| parse_err(line_no, reason))?;
        let translation =
            nalgebra::Vector3::new(s::<T>(values[1]), s::<T>(values[2]), s::<T>(values[3]));
        traj.push(values[0], Pose::new(rotation, translation));
    }
    Ok(traj)
}

pub fn save_trajectory<T: Scalar>(
    path: impl AsRef<Path>,
    traj: &Trajectory<T>,
) -> Result<(), GeometryError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_trajectory(&mut out, traj)?;
    out.flush()?;
    Ok(())
}

pub fn load_trajectory<T: Scalar>(path: impl AsRef<Path>) -> Result<Trajectory<T>, GeometryError> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_trajectory(BufReader::new(file), &path.display().to_string())
}

pub fn write_intrinsics<T: Scalar>(
    out: &mut impl Write,
    k: &CameraIntrinsics<T>,
) -> std::io::Result<()> {
    writeln!(
        out,
        "{} {} {} {} {} {}",
        k.fx.to_f64_lossy(),
        k.fy.to_f64_lossy(),
        k.cx.to_f64_lossy(),
        k.cy.to_f64_lossy(),
        k.width,
        k.height
    )
}

pub fn read_intrinsics<T: Scalar>(
    input: impl BufRead,
    source_name: &str,
) -> Result<CameraIntrinsics<T>, GeometryError> {
    let parse_err = |line: usize, reason: String| GeometryError::Parse {
        source_name: source_name.to_string(),
        line,
        reason,
    };
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(parse_err(
                line_no,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let f = |i: usize| -> Result<f64, GeometryError> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| parse_err(line_no, format!("bad float {:?}: {e}", fields[i])))
        };
        let dim = |i: usize| -> Result<u32, GeometryError> {
            fields[i]
                .parse::<u32>()
                .map_err(|e| parse_err(line_no, format!("bad dimension {:?}: {e}", fields[i])))
        };
        return CameraIntrinsics::new(
            s::<T>(f(0)?),
            s::<T>(f(1)?),
            s::<T>(f(2)?),
            s::<T>(f(3)?),
            dim(4)?,
            dim(5)?,
        );
    }
    Err(parse_err(0, "no intrinsics line found".to_string()))
}

pub fn save_intrinsics<T: Scalar>(
    path: impl AsRef<Path>,
    k: &CameraIntrinsics<T>,
) -> Result<(), GeometryError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_intrinsics(&mut out, k)?;
    out.flush()?;
    Ok(())
}

pub fn load_intrinsics<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<CameraIntrinsics<T>, GeometryError> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_intrinsics(BufReader::new(file), &path.display().to_string())
}
