//! On-disk dataset layout and binary image formats.
//!
//! A dataset directory holds:
//!
//! ```text
//! poses.txt        one line per keyframe: timestamp + pose (tx..qw)
//! intrinsics.txt   fx fy cx cy width height
//! rgb/000000.ppm   binary P6, 8-bit
//! depth/000000.pgm binary P5, 16-bit big-endian, millimeters (0 = invalid)
//! ```
//!
//! Depth is rendered on a millimeter grid, so the meters-to-millimeters
//! conversion here is exact and a save/load round trip reproduces depth
//! values bit for bit.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use crate::geometry::{load_intrinsics, load_trajectory, save_intrinsics, save_trajectory};
use crate::scalar::{s, Scalar};
use crate::similarity::DepthMap;

use super::{Keyframe, RgbImage, Scene, SceneError};

/// Path layout of a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
}

impl Dataset {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Dataset { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn poses_path(&self) -> PathBuf {
        self.root.join("poses.txt")
    }

    pub fn intrinsics_path(&self) -> PathBuf {
        self.root.join("intrinsics.txt")
    }

    pub fn rgb_path(&self, id: usize) -> PathBuf {
        self.root.join("rgb").join(format!("{id:06}.ppm"))
    }

    pub fn depth_path(&self, id: usize) -> PathBuf {
        self.root.join("depth").join(format!("{id:06}.pgm"))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, SceneError> {
    fs::read(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            SceneError::MissingFile {
                path: path.display().to_string(),
            }
        } else {
            SceneError::Io(e)
        }
    })
}

fn parse_err(path: &Path, reason: impl Into<String>) -> SceneError {
    SceneError::Parse {
        source_name: path.display().to_string(),
        line: 0,
        reason: reason.into(),
    }
}

/// Parses a binary PNM header (`magic`, width, height, maxval), honoring
/// `#` comments, and returns the dimensions plus the offset of the first
/// data byte.
fn parse_pnm_header(
    data: &[u8],
    magic: &[u8],
    path: &Path,
) -> Result<(u32, u32, u32, usize), SceneError> {
    let mut pos = 0usize;
    let skip_separators = |pos: &mut usize| {
        while *pos < data.len() {
            if data[*pos].is_ascii_whitespace() {
                *pos += 1;
            } else if data[*pos] == b'#' {
                while *pos < data.len() && data[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
    };
    let token = |pos: &mut usize| -> Result<&[u8], SceneError> {
        skip_separators(pos);
        let start = *pos;
        while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            Err(parse_err(path, "truncated header"))
        } else {
            Ok(&data[start..*pos])
        }
    };
    if token(&mut pos)? != magic {
        return Err(parse_err(
            path,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let number = |pos: &mut usize, what: &str| -> Result<u32, SceneError> {
        let tok = token(pos)?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|t| t.parse::<u32>().ok())
            .ok_or_else(|| parse_err(path, format!("bad {what}")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    // exactly one whitespace byte separates the header from the raster
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(parse_err(path, "missing raster separator"));
    }
    pos += 1;
    if width == 0 || height == 0 {
        return Err(parse_err(path, "zero image dimension"));
    }
    Ok((width, height, maxval, pos))
}

/// Writes an 8-bit binary PPM (`P6`).
pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<(), SceneError> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    fs::write(path, out)?;
    Ok(())
}

/// Reads an 8-bit binary PPM (`P6`).
pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage, SceneError> {
    let path = path.as_ref();
    let data = read_bytes(path)?;
    let (width, height, maxval, offset) = parse_pnm_header(&data, b"P6", path)?;
    if maxval != 255 {
        return Err(parse_err(path, format!("unsupported maxval {maxval}")));
    }
    let want = (width as usize) * (height as usize) * 3;
    let raster = &data[offset..];
    if raster.len() != want {
        return Err(parse_err(
            path,
            format!("raster is {} bytes, expected {want}", raster.len()),
        ));
    }
    Ok(RgbImage {
        width,
        height,
        data: raster.to_vec(),
    })
}

/// Writes a 16-bit binary PGM (`P5`, big-endian samples).
pub fn write_pgm16(
    path: impl AsRef<Path>,
    width: u32,
    height: u32,
    values: &[u16],
) -> Result<(), SceneError> {
    assert_eq!(values.len(), (width as usize) * (height as usize));
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(values.len() * 2);
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a 16-bit binary PGM (`P5`, big-endian samples).
pub fn read_pgm16(path: impl AsRef<Path>) -> Result<(u32, u32, Vec<u16>), SceneError> {
    let path = path.as_ref();
    let data = read_bytes(path)?;
    let (width, height, maxval, offset) = parse_pnm_header(&data, b"P5", path)?;
    if maxval != 65535 {
        return Err(parse_err(path, format!("unsupported maxval {maxval}")));
    }
    let count = (width as usize) * (height as usize);
    let raster = &data[offset..];
    if raster.len() != count * 2 {
        return Err(parse_err(
            path,
            format!("raster is {} bytes, expected {}", raster.len(), count * 2),
        ));
    }
    let values = raster
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((width, height, values))
}

fn depth_to_millimeters<T: Scalar>(depth: &DepthMap<T>) -> Result<Vec<u16>, SceneError> {
    depth
        .values()
        .iter()
        .enumerate()
        .map(|(index, &d)| {
            let meters = d.to_f64_lossy();
            let mm = (meters * 1000.0).round();
            if mm < 0.0 || mm > 65535.0 {
                Err(SceneError::DepthOutOfRange { index, meters })
            } else {
                Ok(mm as u16)
            }
        })
        .collect()
}

fn millimeters_to_depth<T: Scalar>(
    width: u32,
    height: u32,
    mm: &[u16],
) -> Result<DepthMap<T>, SceneError> {
    let values = mm
        .iter()
        .map(|&m| s::<T>(m as f64 / 1000.0))
        .collect::<Vec<T>>();
    Ok(DepthMap::new(width, height, values)?)
}

/// Writes a scene to `dir` in the dataset layout, creating `rgb/` and
/// `depth/` subdirectories.
pub fn save_dataset<T: Scalar>(dir: impl AsRef<Path>, scene: &Scene<T>) -> Result<(), SceneError> {
    let ds = Dataset::new(dir.as_ref());
    fs::create_dir_all(ds.root())?;
    fs::create_dir_all(ds.root().join("rgb"))?;
    fs::create_dir_all(ds.root().join("depth"))?;
    save_trajectory(ds.poses_path(), &scene.trajectory)?;
    save_intrinsics(ds.intrinsics_path(), &scene.intrinsics)?;
    for kf in &scene.keyframes {
        write_ppm(ds.rgb_path(kf.id), &kf.rgb)?;
        let mm = depth_to_millimeters(&kf.depth)?;
        write_pgm16(ds.depth_path(kf.id), kf.depth.width(), kf.depth.height(), &mm)?;
    }
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`]. Keyframe count
/// and order follow `poses.txt`; features and patches come back empty.
pub fn load_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<Scene<T>, SceneError> {
    let ds = Dataset::new(dir.as_ref());
    for required in [ds.poses_path(), ds.intrinsics_path()] {
        if !required.exists() {
            return Err(SceneError::MissingFile {
                path: required.display().to_string(),
            });
        }
    }
    let trajectory = load_trajectory::<T>(ds.poses_path())?;
    let intrinsics = load_intrinsics::<T>(ds.intrinsics_path())?;
    let mut keyframes = Vec::with_capacity(trajectory.len());
    for id in 0..trajectory.len() {
        let rgb = read_ppm(ds.rgb_path(id))?;
        if rgb.width != intrinsics.width || rgb.height != intrinsics.height {
            return Err(SceneError::ImageSizeMismatch {
                index: id,
                got_w: rgb.width,
                got_h: rgb.height,
                want_w: intrinsics.width,
                want_h: intrinsics.height,
            });
        }
        let (dw, dh, mm) = read_pgm16(ds.depth_path(id))?;
        if dw != intrinsics.width || dh != intrinsics.height {
            return Err(SceneError::ImageSizeMismatch {
                index: id,
                got_w: dw,
                got_h: dh,
                want_w: intrinsics.width,
                want_h: intrinsics.height,
            });
        }
        let depth = millimeters_to_depth::<T>(dw, dh, &mm)?;
        keyframes.push(Keyframe {
            id,
            timestamp: trajectory.timestamps[id],
            rgb,
            depth,
            features: Vec::new(),
            patches: Vec::new(),
        });
    }
    Ok(Scene {
        intrinsics,
        trajectory,
        keyframes,
    })
}
