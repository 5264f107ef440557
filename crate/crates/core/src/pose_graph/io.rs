//! Plain-text pose-graph exchange format.
//!
//! Vertices and edges use the widely shared `VERTEX_SE3:QUAT` /
//! `EDGE_SE3:QUAT` line layout: translations and unit quaternions as
//! `tx ty tz qx qy qz qw`, and each edge followed by the 21 row-major
//! upper-triangular entries of its 6×6 information matrix. This crate
//! models information as a scalar multiple of the identity, so writers
//! emit the scale on the diagonal and zeros elsewhere, and the reader
//! rejects files whose information matrices have any other shape.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::geometry::{quaternion_to_rotation, rotation_to_quaternion, Pose};
use crate::scalar::{s, Scalar};

use super::{PoseGraphEdge, PoseGraphError, PoseGraphProblem};

/// Positions of the six diagonal entries within the 21-entry row-major
/// upper-triangular listing of a 6×6 matrix.
const DIAGONAL_SLOTS: [usize; 6] = [0, 6, 11, 15, 18, 20];

pub fn write_g2o<T: Scalar>(
    out: &mut impl Write,
    problem: &PoseGraphProblem<T>,
) -> std::io::Result<()> {
    for (id, pose) in problem.poses.iter().enumerate() {
        let t = &pose.translation;
        let q = rotation_to_quaternion(&pose.rotation);
        writeln!(
            out,
            "VERTEX_SE3:QUAT {id} {} {} {} {} {} {} {}",
            t[0].to_f64_lossy(),
            t[1].to_f64_lossy(),
            t[2].to_f64_lossy(),
            q[0],
            q[1],
            q[2],
            q[3]
        )?;
    }
    for edge in &problem.edges {
        let t = &edge.measured.translation;
        let q = rotation_to_quaternion(&edge.measured.rotation);
        write!(
            out,
            "EDGE_SE3:QUAT {} {} {} {} {} {} {} {} {}",
            edge.from,
            edge.to,
            t[0].to_f64_lossy(),
            t[1].to_f64_lossy(),
            t[2].to_f64_lossy(),
            q[0],
            q[1],
            q[2],
            q[3]
        )?;
        let scale = edge.info_scale.to_f64_lossy();
        for slot in 0..21 {
            if DIAGONAL_SLOTS.contains(&slot) {
                write!(out, " {scale}")?;
            } else {
                write!(out, " 0")?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_g2o<T: Scalar>(
    path: impl AsRef<Path>,
    problem: &PoseGraphProblem<T>,
) -> Result<(), PoseGraphError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_g2o(&mut out, problem)?;
    out.flush()?;
    Ok(())
}

/// Parses a pose graph. Vertex ids must cover `0..n` (any line order);
/// the anchor defaults to pose 0.
pub fn read_g2o<T: Scalar>(
    input: impl BufRead,
    source_name: &str,
) -> Result<PoseGraphProblem<T>, PoseGraphError> {
    let fail = |line: usize, reason: String| PoseGraphError::Parse {
        source_name: source_name.to_string(),
        line,
        reason,
    };
    let mut vertices: Vec<(usize, Pose<T>)> = Vec::new();
    let mut edges: Vec<PoseGraphEdge<T>> = Vec::new();

    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let float = |field: &str| -> Result<f64, PoseGraphError> {
            let value: f64 = field
                .parse()
                .map_err(|e| fail(line_no, format!("bad float {field:?}: {e}")))?;
            if !value.is_finite() {
                return Err(fail(line_no, format!("non-finite value {field:?}")));
            }
            Ok(value)
        };
        let index = |field: &str| -> Result<usize, PoseGraphError> {
            field
                .parse()
                .map_err(|e| fail(line_no, format!("bad index {field:?}: {e}")))
        };
        match fields[0] {
            "VERTEX_SE3:QUAT" => {
                if fields.len() != 9 {
                    return Err(fail(
                        line_no,
                        format!("expected 9 fields in vertex line, got {}", fields.len()),
                    ));
                }
                let id = index(fields[1])?;
                let mut values = [0.0f64; 7];
                for (slot, field) in values.iter_mut().zip(&fields[2..]) {
                    *slot = float(field)?;
                }
                let rotation =
                    quaternion_to_rotation([values[3], values[4], values[5], values[6]])
                        .map_err(|reason| fail(line_no, reason))?;
                let mut pose = Pose::identity();
                pose.rotation = rotation;
                pose.translation = nalgebra::Vector3::new(
                    s::<T>(values[0]),
                    s::<T>(values[1]),
                    s::<T>(values[2]),
                );
                vertices.push((id, pose));
            }
            "EDGE_SE3:QUAT" => {
                if fields.len() != 31 {
                    return Err(fail(
                        line_no,
                        format!("expected 31 fields in edge line, got {}", fields.len()),
                    ));
                }
                let from = index(fields[1])?;
                let to = index(fields[2])?;
                let mut values = [0.0f64; 7];
                for (slot, field) in values.iter_mut().zip(&fields[3..10]) {
                    *slot = float(field)?;
                }
                let rotation =
                    quaternion_to_rotation([values[3], values[4], values[5], values[6]])
                        .map_err(|reason| fail(line_no, reason))?;
                let mut measured = Pose::identity();
                measured.rotation = rotation;
                measured.translation = nalgebra::Vector3::new(
                    s::<T>(values[0]),
                    s::<T>(values[1]),
                    s::<T>(values[2]),
                );
                let mut info = [0.0f64; 21];
                for (slot, field) in info.iter_mut().zip(&fields[10..]) {
                    *slot = float(field)?;
                }
                let scale = info[DIAGONAL_SLOTS[0]];
                for (slot, value) in info.iter().enumerate() {
                    if DIAGONAL_SLOTS.contains(&slot) {
                        if (value - scale).abs() > 1e-9 * scale.abs().max(1.0) {
                            return Err(fail(
                                line_no,
                                format!(
                                    "information diagonal is not uniform: {scale} vs {value}"
                                ),
                            ));
                        }
                    } else if value.abs() > 1e-12 {
                        return Err(fail(
                            line_no,
                            format!("off-diagonal information {value} unsupported"),
                        ));
                    }
                }
                if scale < 0.0 {
                    return Err(fail(line_no, format!("negative information scale {scale}")));
                }
                edges.push(PoseGraphEdge {
                    from,
                    to,
                    measured,
                    info_scale: s::<T>(scale),
                });
            }
            other => {
                return Err(fail(line_no, format!("unknown record type {other:?}")));
            }
        }
    }

    vertices.sort_by_key(|(id, _)| *id);
    for (expected, (id, _)) in vertices.iter().enumerate() {
        if *id != expected {
            return Err(fail(
                0,
                format!("vertex ids must cover 0..n without gaps; missing {expected}"),
            ));
        }
    }
    let poses: Vec<Pose<T>> = vertices.into_iter().map(|(_, pose)| pose).collect();
    for (edge_index, edge) in edges.iter().enumerate() {
        for pose in [edge.from, edge.to] {
            if pose >= poses.len() {
                return Err(PoseGraphError::IndexOutOfRange { edge_index, pose });
            }
        }
    }
    Ok(PoseGraphProblem {
        poses,
        edges,
        anchor: 0,
    })
}

pub fn load_g2o<T: Scalar>(path: impl AsRef<Path>) -> Result<PoseGraphProblem<T>, PoseGraphError> {
    let path = path.as_ref();
    let file = BufReader::new(File::open(path)?);
    read_g2o(file, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose<f64> {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let mut pose = Pose::from_axis_angle(&axis, rng.gen_range(-1.5..1.5));
        pose.translation = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        );
        pose
    }

    fn sample_problem() -> PoseGraphProblem<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let poses: Vec<Pose<f64>> = (0..4).map(|_| random_pose(&mut rng)).collect();
        let mut edges: Vec<PoseGraphEdge<f64>> = (0..3)
            .map(|i| PoseGraphEdge {
                from: i,
                to: i + 1,
                measured: poses[i].inverse().compose(&poses[i + 1]),
                info_scale: 1.0,
            })
            .collect();
        edges.push(PoseGraphEdge {
            from: 3,
            to: 0,
            measured: poses[3].inverse().compose(&poses[0]),
            info_scale: 0.75,
        });
        PoseGraphProblem {
            poses,
            edges,
            anchor: 0,
        }
    }

    #[test]
    fn round_trip_preserves_the_problem() {
        let problem = sample_problem();
        let mut buffer = Vec::new();
        write_g2o(&mut buffer, &problem).unwrap();
        let parsed: PoseGraphProblem<f64> =
            read_g2o(std::io::Cursor::new(&buffer), "mem").unwrap();
        assert_eq!(parsed.poses.len(), problem.poses.len());
        assert_eq!(parsed.edges.len(), problem.edges.len());
        for (a, b) in parsed.poses.iter().zip(&problem.poses) {
            // translations survive text round-trip exactly; rotations go
            // through a quaternion conversion, so allow normalization noise
            for i in 0..3 {
                assert_eq!(a.translation[i].to_bits(), b.translation[i].to_bits());
            }
            assert!((a.rotation - b.rotation).abs().max() < 1e-12);
        }
        for (a, b) in parsed.edges.iter().zip(&problem.edges) {
            assert_eq!((a.from, a.to), (b.from, b.to));
            assert_eq!(a.info_scale.to_bits(), b.info_scale.to_bits());
            assert!((a.measured.rotation - b.measured.rotation).abs().max() < 1e-12);
        }
    }

    #[test]
    fn edge_lines_carry_a_diagonal_information_block() {
        let problem = sample_problem();
        let mut buffer = Vec::new();
        write_g2o(&mut buffer, &problem).unwrap();
        let text = String::from_utf8(buffer).unwrap();
        let edge_line = text
            .lines()
            .find(|l| l.starts_with("EDGE_SE3:QUAT 3 0"))
            .unwrap();
        let fields: Vec<&str> = edge_line.split_whitespace().collect();
        assert_eq!(fields.len(), 31);
        let info = &fields[10..];
        for (slot, value) in info.iter().enumerate() {
            if DIAGONAL_SLOTS.contains(&slot) {
                assert_eq!(*value, "0.75");
            } else {
                assert_eq!(*value, "0");
            }
        }
    }

    #[test]
    fn malformed_lines_are_rejected_with_line_numbers() {
        let cases = [
            ("VERTEX_SE3:QUAT 0 0 0 0 0 0 1", "expected 9 fields"),
            ("FRONTIER 0 0", "unknown record type"),
            ("VERTEX_SE3:QUAT 0 a 0 0 0 0 0 1", "bad float"),
            ("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 0", "quaternion norm"),
        ];
        for (text, needle) in cases {
            let err = read_g2o::<f64>(std::io::Cursor::new(text.as_bytes()), "mem").unwrap_err();
            let message = err.to_string();
            assert!(
                message.starts_with("mem:1:") && message.contains(needle),
                "{text:?} -> {message}"
            );
        }
    }

    #[test]
    fn non_isotropic_information_is_rejected() {
        let problem = sample_problem();
        let mut buffer = Vec::new();
        write_g2o(&mut buffer, &problem).unwrap();
        let text = String::from_utf8(buffer).unwrap();

        // perturb one diagonal entry of the first edge's information block
        let tampered: Vec<String> = text
            .lines()
            .map(|line| {
                if line.starts_with("EDGE_SE3:QUAT 0 1") {
                    let mut fields: Vec<String> =
                        line.split_whitespace().map(str::to_string).collect();
                    fields[10 + DIAGONAL_SLOTS[3]] = "2.5".to_string();
                    fields.join(" ")
                } else {
                    line.to_string()
                }
            })
            .collect();
        let err =
            read_g2o::<f64>(std::io::Cursor::new(tampered.join("\n").into_bytes()), "mem")
                .unwrap_err();
        assert!(err.to_string().contains("not uniform"), "{err}");

        // and an off-diagonal entry
        let tampered: Vec<String> = text
            .lines()
            .map(|line| {
                if line.starts_with("EDGE_SE3:QUAT 0 1") {
                    let mut fields: Vec<String> =
                        line.split_whitespace().map(str::to_string).collect();
                    fields[10 + 1] = "0.3".to_string();
                    fields.join(" ")
                } else {
                    line.to_string()
                }
            })
            .collect();
        let err =
            read_g2o::<f64>(std::io::Cursor::new(tampered.join("\n").into_bytes()), "mem")
                .unwrap_err();
        assert!(err.to_string().contains("off-diagonal"), "{err}");
    }

    #[test]
    fn vertex_id_gaps_and_dangling_edges_are_rejected() {
        let gap = "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 2 1 0 0 0 0 0 1\n";
        let err = read_g2o::<f64>(std::io::Cursor::new(gap.as_bytes()), "mem").unwrap_err();
        assert!(err.to_string().contains("missing 1"), "{err}");

        let dangling = concat!(
            "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n",
            "EDGE_SE3:QUAT 0 7 1 0 0 0 0 0 1",
            " 1 0 0 0 0 0 1 0 0 0 0 1 0 0 0 1 0 0 1 0 1\n",
        );
        let err = read_g2o::<f64>(std::io::Cursor::new(dangling.as_bytes()), "mem").unwrap_err();
        assert!(matches!(
            err,
            PoseGraphError::IndexOutOfRange { edge_index: 0, pose: 7 }
        ));
    }

    #[test]
    fn comments_blank_lines_and_shuffled_vertices_are_accepted() {
        let text = concat!(
            "# exported map\n",
            "\n",
            "VERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\n",
            "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n",
        );
        let parsed = read_g2o::<f64>(std::io::Cursor::new(text.as_bytes()), "mem").unwrap();
        assert_eq!(parsed.poses.len(), 2);
        assert_eq!(parsed.poses[1].translation[0], 1.0);
        assert_eq!(parsed.anchor, 0);
    }
}
