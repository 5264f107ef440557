//! Procedural RGB-D scene synthesis and keyframe assembly.
//!
//! A scene is a closed textured box (six checkered quads) observed by a
//! camera moving along a parameterized trajectory. Rendering is exact ray
//! versus plane intersection, so depth images are analytically correct up to
//! the millimeter quantization used by the storage format. RGB comes from a
//! checker pattern plus a hash-based speckle, both functions of the world
//! point alone: the same surface point renders the same color from every
//! viewpoint and every run with the same seed.

mod dataset;
mod features;

pub use dataset::{
    load_dataset, read_pgm16, read_ppm, save_dataset, write_pgm16, write_ppm, Dataset,
};
pub use features::{augment_low_texture, extract_patches, select_features};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, GeometryError, Pose, Trajectory};
use crate::scalar::{s, Scalar};
use crate::similarity::{DepthMap, SimilarityError};
use crate::ErrorCategory;

/// Patch side lengths supported by the patch extractor.
pub const PATCH_SCALES: [u32; 3] = [16, 32, 64];

/// Largest depth the 16-bit millimeter storage format can hold.
pub const MAX_STORABLE_DEPTH: f64 = 65.535;

/// Consecutive keyframes may move at most this far (meters).
pub const MAX_STEP_TRANSLATION: f64 = 0.5;

/// Consecutive keyframes may rotate at most this much (radians).
pub const MAX_STEP_ROTATION: f64 = 0.3;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene spec: {detail}")]
    InvalidSpec { detail: String },
    #[error("cannot augment an empty feature set")]
    NoSeedFeatures,
    #[error("feature {index} at ({u}, {v}) violates the patch margin {margin}")]
    MarginViolation { index: usize, u: u32, v: u32, margin: u32 },
    #[error("patch scale {scale} not one of {PATCH_SCALES:?}")]
    InvalidScale { scale: u32 },
    #[error("depth {meters} m at pixel {index} exceeds the storable maximum {MAX_STORABLE_DEPTH} m")]
    DepthOutOfRange { index: usize, meters: f64 },
    #[error("missing file: {path}")]
    MissingFile { path: String },
    #[error("{source_name}:{line}: {reason}")]
    Parse {
        source_name: String,
        line: usize,
        reason: String,
    },
    #[error("image {index} is {got_w}x{got_h}, intrinsics expect {want_w}x{want_h}")]
    ImageSizeMismatch {
        index: usize,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Depth(#[from] SimilarityError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SceneError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            SceneError::InvalidSpec { .. }
            | SceneError::NoSeedFeatures
            | SceneError::MarginViolation { .. }
            | SceneError::InvalidScale { .. }
            | SceneError::DepthOutOfRange { .. }
            | SceneError::ImageSizeMismatch { .. } => ErrorCategory::Validation,
            SceneError::MissingFile { .. } | SceneError::Parse { .. } | SceneError::Io(_) => {
                ErrorCategory::Io
            }
            SceneError::Geometry(e) => e.category(),
            SceneError::Depth(e) => e.category(),
        }
    }
}

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; (width as usize) * (height as usize) * 3],
        }
    }

    pub fn pixel(&self, col: u32, row: u32) -> [u8; 3] {
        let i = ((row as usize) * (self.width as usize) + col as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, col: u32, row: u32, rgb: [u8; 3]) {
        let i = ((row as usize) * (self.width as usize) + col as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Square RGB crop centered on a feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub u: u32,
    pub v: u32,
    pub scale: u32,
    /// `scale * scale * 3` bytes, row-major RGB.
    pub data: Vec<u8>,
}

/// One rendered view with its metadata. `id` doubles as the pose index into
/// the scene trajectory. `features` and `patches` start empty and are filled
/// by the feature-selection and patch-extraction passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe<T: Scalar> {
    pub id: usize,
    pub timestamp: f64,
    pub rgb: RgbImage,
    pub depth: DepthMap<T>,
    pub features: Vec<(u32, u32)>,
    pub patches: Vec<Patch>,
}

/// A full synthetic scene: keyframes plus ground-truth trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T: Scalar> {
    pub intrinsics: CameraIntrinsics<T>,
    pub trajectory: Trajectory<T>,
    pub keyframes: Vec<Keyframe<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryStyle {
    /// Straight sweep along the room's x axis, camera facing the far wall.
    /// With `reverse_second`, odd loops traverse the same positions backwards
    /// so the path stays continuous.
    Corridor,
    /// Circle in the x-z plane, camera facing outward.
    Circle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    /// Extent along x (meters); the room is centered on the origin.
    pub length: f64,
    /// Extent along y.
    pub height: f64,
    /// Extent along z.
    pub depth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub style: TrajectoryStyle,
    pub loops: u32,
    pub frames_per_loop: u32,
    /// Corridor: total x travel per loop. Circle: ignored.
    #[serde(default)]
    pub span: f64,
    /// Circle: radius. Corridor: ignored.
    #[serde(default)]
    pub radius: f64,
    /// Corridor only: odd loops run backwards over the same positions.
    #[serde(default = "default_true")]
    pub reverse_second: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSpec {
    /// Checker cell size on the surface, meters.
    #[serde(default = "default_cell")]
    pub cell: f64,
    /// Speckle strength in `[0, 1]`; 0 disables it.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_cell() -> f64 {
    0.25
}

fn default_noise() -> f64 {
    0.5
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            cell: default_cell(),
            noise: default_noise(),
        }
    }
}

/// Declarative description of a synthetic scene; parsed from TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub camera: CameraSpec,
    pub room: RoomSpec,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub texture: TextureSpec,
    /// Probability that a rendered depth pixel is dropped to invalid.
    #[serde(default)]
    pub depth_holes: f64,
}

impl SceneSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, SceneError> {
        toml::from_str(text).map_err(|e| SceneError::Parse {
            source_name: "scene spec".to_string(),
            line: 0,
            reason: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scene spec serializes")
    }

    fn validate(&self) -> Result<(), SceneError> {
        let bad = |detail: String| Err(SceneError::InvalidSpec { detail });
        let r = &self.room;
        if !(r.length > 0.0 && r.height > 0.0 && r.depth > 0.0) {
            return bad(format!(
                "room extents must be positive, got {} x {} x {}",
                r.length, r.height, r.depth
            ));
        }
        let diagonal = (r.length * r.length + r.height * r.height + r.depth * r.depth).sqrt();
        if diagonal > MAX_STORABLE_DEPTH {
            return bad(format!(
                "room diagonal {diagonal:.3} m exceeds storable depth {MAX_STORABLE_DEPTH} m"
            ));
        }
        let t = &self.trajectory;
        let total = t.loops as u64 * t.frames_per_loop as u64;
        if total < 2 {
            return bad(format!("trajectory needs at least 2 keyframes, got {total}"));
        }
        match t.style {
            TrajectoryStyle::Corridor => {
                if !(t.span > 0.0) {
                    return bad(format!("corridor span must be positive, got {}", t.span));
                }
                if t.span / 2.0 + 0.05 >= r.length / 2.0 {
                    return bad(format!(
                        "corridor span {} does not fit in room length {}",
                        t.span, r.length
                    ));
                }
            }
            TrajectoryStyle::Circle => {
                if !(t.radius > 0.0) {
                    return bad(format!("circle radius must be positive, got {}", t.radius));
                }
                if t.radius + 0.05 >= r.length.min(r.depth) / 2.0 {
                    return bad(format!(
                        "circle radius {} does not fit in the room",
                        t.radius
                    ));
                }
            }
        }
        if !(0.0..1.0).contains(&self.depth_holes) {
            return bad(format!("depth_holes must be in [0, 1), got {}", self.depth_holes));
        }
        if !(self.texture.cell > 0.0) {
            return bad(format!("texture cell must be positive, got {}", self.texture.cell));
        }
        if !(0.0..=1.0).contains(&self.texture.noise) {
            return bad(format!("texture noise must be in [0, 1], got {}", self.texture.noise));
        }
        Ok(())
    }
}

/// One textured wall of the room box.
struct Quad {
    origin: Vector3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    normal: Vector3<f64>,
    colors: ([u8; 3], [u8; 3]),
}

fn room_quads(room: &RoomSpec) -> Vec<Quad> {
    let (hx, hy, hz) = (room.length / 2.0, room.height / 2.0, room.depth / 2.0);
    let palette: [([u8; 3], [u8; 3]); 6] = [
        ([200, 80, 60], [240, 200, 180]),
        ([60, 120, 200], [190, 210, 240]),
        ([90, 170, 90], [210, 235, 205]),
        ([180, 160, 60], [235, 225, 180]),
        ([150, 90, 170], [225, 205, 235]),
        ([100, 100, 100], [220, 220, 220]),
    ];
    let quad = |origin: [f64; 3], e1: [f64; 3], e2: [f64; 3], idx: usize| Quad {
        origin: Vector3::from(origin),
        e1: Vector3::from(e1),
        e2: Vector3::from(e2),
        normal: Vector3::from(e1).cross(&Vector3::from(e2)).normalize(),
        colors: palette[idx],
    };
    vec![
        // far wall (+z) and near wall (-z)
        quad([-hx, -hy, hz], [2.0 * hx, 0.0, 0.0], [0.0, 2.0 * hy, 0.0], 0),
        quad([-hx, -hy, -hz], [2.0 * hx, 0.0, 0.0], [0.0, 2.0 * hy, 0.0], 1),
        // floor (+y, y points down) and ceiling (-y)
        quad([-hx, hy, -hz], [2.0 * hx, 0.0, 0.0], [0.0, 0.0, 2.0 * hz], 2),
        quad([-hx, -hy, -hz], [2.0 * hx, 0.0, 0.0], [0.0, 0.0, 2.0 * hz], 3),
        // side walls (+x / -x)
        quad([hx, -hy, -hz], [0.0, 0.0, 2.0 * hz], [0.0, 2.0 * hy, 0.0], 4),
        quad([-hx, -hy, -hz], [0.0, 0.0, 2.0 * hz], [0.0, 2.0 * hy, 0.0], 5),
    ]
}

/// 64-bit mix used for viewpoint-independent texture speckle.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn texel_color(quad: &Quad, quad_idx: usize, a: f64, b: f64, tex: &TextureSpec, seed: u64) -> [u8; 3] {
    let len1 = quad.e1.norm();
    let len2 = quad.e2.norm();
    let cu = ((a * len1 / tex.cell).floor() as i64).rem_euclid(1 << 20);
    let cv = ((b * len2 / tex.cell).floor() as i64).rem_euclid(1 << 20);
    let base = if (cu + cv) % 2 == 0 {
        quad.colors.0
    } else {
        quad.colors.1
    };
    if tex.noise == 0.0 {
        return base;
    }
    let fine = tex.cell / 4.0;
    let fu = (a * len1 / fine).floor() as i64;
    let fv = (b * len2 / fine).floor() as i64;
    let h = splitmix64(
        seed ^ splitmix64((quad_idx as u64) << 40 ^ (fu as u64) << 20 ^ (fv as u64)),
    );
    let jitter = ((h & 0x3F) as i32 - 32) as f64 * tex.noise;
    let mut out = base;
    for c in &mut out {
        *c = (*c as f64 + jitter).clamp(0.0, 255.0) as u8;
    }
    out
}

/// Casts the pixel-center ray and returns (depth in meters, rgb) of the
/// nearest wall hit, or `None` when nothing is hit (cannot happen inside the
/// closed box, but kept explicit).
fn cast_ray(
    quads: &[Quad],
    origin: &Vector3<f64>,
    dir_world: &Vector3<f64>,
    tex: &TextureSpec,
    seed: u64,
) -> Option<(f64, [u8; 3])> {
    let mut best: Option<(f64, [u8; 3])> = None;
    for (qi, quad) in quads.iter().enumerate() {
        let denom = quad.normal.dot(dir_world);
        if denom.abs() < 1e-12 {
            continue;
        }
        let t = quad.normal.dot(&(quad.origin - origin)) / denom;
        if t <= 1e-4 {
            continue;
        }
        let hit = origin + dir_world * t;
        let rel = hit - quad.origin;
        let len1 = quad.e1.norm();
        let len2 = quad.e2.norm();
        let a = rel.dot(&quad.e1) / (len1 * len1);
        let b = rel.dot(&quad.e2) / (len2 * len2);
        let slack = 1e-9;
        if !(-slack..=1.0 + slack).contains(&a) || !(-slack..=1.0 + slack).contains(&b) {
            continue;
        }
        if best.map_or(true, |(bt, _)| t < bt) {
            let color = texel_color(quad, qi, a.clamp(0.0, 1.0), b.clamp(0.0, 1.0), tex, seed);
            best = Some((t, color));
        }
    }
    best
}

fn build_trajectory<T: Scalar>(spec: &SceneSpec) -> Trajectory<T> {
    let t = &spec.trajectory;
    let mut traj = Trajectory::new();
    let total = (t.loops * t.frames_per_loop) as usize;
    for k in 0..total {
        let lap = k / t.frames_per_loop as usize;
        let step = k % t.frames_per_loop as usize;
        let pose = match t.style {
            TrajectoryStyle::Corridor => {
                let frac_step = if t.frames_per_loop > 1 {
                    step as f64 / (t.frames_per_loop - 1) as f64
                } else {
                    0.0
                };
                let frac = if t.reverse_second && lap % 2 == 1 {
                    1.0 - frac_step
                } else {
                    frac_step
                };
                let x = -t.span / 2.0 + frac * t.span;
                Pose::new(
                    nalgebra::Matrix3::identity(),
                    Vector3::new(s::<T>(x), T::zero(), T::zero()),
                )
            }
            TrajectoryStyle::Circle => {
                let alpha = 2.0 * std::f64::consts::PI * (step as f64)
                    / (t.frames_per_loop as f64);
                let pos = Vector3::new(
                    s::<T>(t.radius * alpha.sin()),
                    T::zero(),
                    s::<T>(t.radius * alpha.cos()),
                );
                let rot = Pose::<T>::rot_y(s::<T>(alpha));
                Pose::new(rot.rotation, pos)
            }
        };
        traj.push(k as f64, pose);
    }
    traj
}

fn check_motion_bounds<T: Scalar>(traj: &Trajectory<T>) -> Result<(), SceneError> {
    for i in 1..traj.len() {
        let a = &traj.poses[i - 1];
        let b = &traj.poses[i];
        let dt = (b.translation - a.translation).norm().to_f64_lossy();
        if dt >= MAX_STEP_TRANSLATION {
            return Err(SceneError::InvalidSpec {
                detail: format!(
                    "step {i} moves {dt:.3} m, limit {MAX_STEP_TRANSLATION}"
                ),
            });
        }
        let rel = a.inverse().compose(b);
        let cos = ((rel.rotation.trace() - T::one()) * s::<T>(0.5))
            .clamp(-T::one(), T::one())
            .to_f64_lossy();
        let angle = cos.acos();
        if angle >= MAX_STEP_ROTATION {
            return Err(SceneError::InvalidSpec {
                detail: format!(
                    "step {i} rotates {angle:.3} rad, limit {MAX_STEP_ROTATION}"
                ),
            });
        }
    }
    Ok(())
}

fn render_keyframe<T: Scalar>(
    spec: &SceneSpec,
    quads: &[Quad],
    k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
    id: usize,
    timestamp: f64,
    seed: u64,
) -> Result<Keyframe<T>, SceneError> {
    let (w, h) = (k.width, k.height);
    let mut rgb = RgbImage::new(w, h);
    let mut depth_values = vec![T::zero(); (w as usize) * (h as usize)];
    // f64 copies of the pose and intrinsics drive the ray caster
    let r = pose.rotation.map(|x| x.to_f64_lossy());
    let origin = pose.translation.map(|x| x.to_f64_lossy());
    let (fx, fy, cx, cy) = (
        k.fx.to_f64_lossy(),
        k.fy.to_f64_lossy(),
        k.cx.to_f64_lossy(),
        k.cy.to_f64_lossy(),
    );
    let mut holes = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (id as u64) << 32 | 0x5CE));
    for row in 0..h {
        for col in 0..w {
            let dir_cam = Vector3::new(
                (col as f64 + 0.5 - cx) / fx,
                (row as f64 + 0.5 - cy) / fy,
                1.0,
            );
            let dir_world = r * dir_cam;
            let hit = cast_ray(quads, &origin, &dir_world, &spec.texture, seed);
            let (depth_m, color) = match hit {
                Some(v) => v,
                None => (0.0, [0, 0, 0]),
            };
            rgb.set_pixel(col, row, color);
            let idx = (row as usize) * (w as usize) + col as usize;
            if depth_m > 0.0 {
                let mm = (depth_m * 1000.0).round();
                if mm > 65535.0 {
                    return Err(SceneError::DepthOutOfRange {
                        index: idx,
                        meters: depth_m,
                    });
                }
                let dropped = spec.depth_holes > 0.0 && holes.gen_bool(spec.depth_holes);
                if !dropped {
                    // store depth already on the millimeter grid so the
                    // dataset round-trip is lossless
                    depth_values[idx] = s::<T>(mm / 1000.0);
                }
            }
        }
    }
    Ok(Keyframe {
        id,
        timestamp,
        rgb,
        depth: DepthMap::new(w, h, depth_values)?,
        features: Vec::new(),
        patches: Vec::new(),
    })
}

/// Renders the whole scene described by `spec`. Bit-identical for a fixed
/// `(spec, seed)` pair regardless of thread count.
pub fn generate_scene<T: Scalar + Send + Sync>(
    spec: &SceneSpec,
    seed: u64,
) -> Result<Scene<T>, SceneError> {
    spec.validate()?;
    let c = &spec.camera;
    let intrinsics = CameraIntrinsics::new(
        s::<T>(c.fx),
        s::<T>(c.fy),
        s::<T>(c.cx),
        s::<T>(c.cy),
        c.width,
        c.height,
    )?;
    let trajectory = build_trajectory::<T>(spec);
    check_motion_bounds(&trajectory)?;
    let quads = room_quads(&spec.room);
    let keyframes: Result<Vec<Keyframe<T>>, SceneError> = trajectory
        .poses
        .par_iter()
        .enumerate()
        .map(|(id, pose)| {
            render_keyframe(
                spec,
                &quads,
                &intrinsics,
                pose,
                id,
                trajectory.timestamps[id],
                seed,
            )
        })
        .collect();
    Ok(Scene {
        intrinsics,
        trajectory,
        keyframes: keyframes?,
    })
}

/// A compact corridor scene used by tests and as the `gen` template.
pub fn example_spec() -> SceneSpec {
    SceneSpec {
        camera: CameraSpec {
            fx: 64.0,
            fy: 64.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        },
        room: RoomSpec {
            length: 16.0,
            height: 4.0,
            depth: 5.0,
        },
        trajectory: TrajectorySpec {
            style: TrajectoryStyle::Corridor,
            loops: 2,
            frames_per_loop: 20,
            span: 7.0,
            radius: 0.0,
            reverse_second: true,
        },
        texture: TextureSpec::default(),
        depth_holes: 0.0,
    }
}
