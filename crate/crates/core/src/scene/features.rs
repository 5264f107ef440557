//! Feature selection and patch extraction.
//!
//! Features are the pixels with the strongest Sobel gradient response,
//! limited to a budget and kept at least half a patch away from the image
//! border. Low-texture frames that cannot fill the budget are topped up with
//! points sampled on the lines from existing features to the image center,
//! which keeps patch sets comparable in size across frames.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Patch, RgbImage, SceneError, PATCH_SCALES};

/// Per-pixel deterministic tie-break key, independent of scan order.
fn tiebreak(seed: u64, u: u32, v: u32) -> u64 {
    super::splitmix64(seed ^ ((u as u64) << 32) ^ (v as u64) ^ 0xFEA7)
}

fn luma(img: &RgbImage, col: u32, row: u32) -> i64 {
    let [r, g, b] = img.pixel(col, row);
    r as i64 + g as i64 + b as i64
}

/// Squared Sobel gradient magnitude at an interior pixel.
fn sobel_sq(img: &RgbImage, col: u32, row: u32) -> i64 {
    let p = |dc: i32, dr: i32| {
        luma(
            img,
            (col as i32 + dc) as u32,
            (row as i32 + dr) as u32,
        )
    };
    let gx = -p(-1, -1) + p(1, -1) - 2 * p(-1, 0) + 2 * p(1, 0) - p(-1, 1) + p(1, 1);
    let gy = -p(-1, -1) - 2 * p(0, -1) - p(1, -1) + p(-1, 1) + 2 * p(0, 1) + p(1, 1);
    gx * gx + gy * gy
}

/// Selects up to `budget` pixels with the largest gradient magnitude, at
/// least `margin` pixels from every border. Ties at the cutoff break by a
/// seeded per-pixel hash; zero-gradient pixels are never selected, so a
/// uniform image yields no features. The result is sorted by `(v, u)`.
pub fn select_features(
    img: &RgbImage,
    budget: usize,
    margin: u32,
    seed: u64,
) -> Vec<(u32, u32)> {
    if budget == 0 {
        return Vec::new();
    }
    let lo = margin.max(1);
    if img.width < lo * 2 + 1 || img.height < lo * 2 + 1 {
        return Vec::new();
    }
    let (hi_u, hi_v) = (img.width - lo - 1, img.height - lo - 1);
    let mut candidates: Vec<(i64, u64, u32, u32)> = Vec::new();
    for row in lo..=hi_v {
        for col in lo..=hi_u {
            let mag = sobel_sq(img, col, row);
            if mag > 0 {
                candidates.push((mag, tiebreak(seed, col, row), col, row));
            }
        }
    }
    candidates.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    candidates.truncate(budget);
    let mut out: Vec<(u32, u32)> = candidates.into_iter().map(|(_, _, u, v)| (u, v)).collect();
    out.sort_unstable_by_key(|&(u, v)| (v, u));
    out
}

/// Perpendicular distance from `point` to the line through `a` and `b`.
fn line_residual(a: (f64, f64), b: (f64, f64), point: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return 0.0;
    }
    ((point.0 - a.0) * dy - (point.1 - a.1) * dx).abs() / len
}

/// Tops a feature set up to `budget` with points on the feature-to-center
/// lines.
///
/// Each added point is drawn by picking a seed feature uniformly, a position
/// uniformly along its line to `center`, and rounding to the pixel grid.
/// Draws that collide with an existing pixel, leave the margin box, or land
/// farther than half a pixel off the line are resampled, up to 100 attempts
/// per point; if attempts run out the set is returned short (the line
/// pixels are exhausted). The result is sorted by `(v, u)`.
pub fn augment_low_texture(
    features: &[(u32, u32)],
    budget: usize,
    center: (u32, u32),
    margin: u32,
    width: u32,
    height: u32,
    seed: u64,
) -> Result<Vec<(u32, u32)>, SceneError> {
    if features.is_empty() {
        return Err(SceneError::NoSeedFeatures);
    }
    let mut out: Vec<(u32, u32)> = features.to_vec();
    if out.len() >= budget {
        out.sort_unstable_by_key(|&(u, v)| (v, u));
        return Ok(out);
    }
    let mut taken: BTreeSet<(u32, u32)> = out.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_margin = |u: u32, v: u32| {
        u >= margin && v >= margin && u + margin <= width && v + margin <= height
    };
    'fill: while out.len() < budget {
        let mut attempts = 0;
        loop {
            if attempts >= 100 {
                break 'fill;
            }
            attempts += 1;
            let &(fu, fv) = &features[rng.gen_range(0..features.len())];
            let t: f64 = rng.gen_range(0.0..1.0);
            let exact = (
                fu as f64 + t * (center.0 as f64 - fu as f64),
                fv as f64 + t * (center.1 as f64 - fv as f64),
            );
            let cand = (exact.0.round(), exact.1.round());
            if cand.0 < 0.0 || cand.1 < 0.0 {
                continue;
            }
            let cand = (cand.0 as u32, cand.1 as u32);
            if !in_margin(cand.0, cand.1) || taken.contains(&cand) {
                continue;
            }
            let residual = line_residual(
                (fu as f64, fv as f64),
                (center.0 as f64, center.1 as f64),
                (cand.0 as f64, cand.1 as f64),
            );
            if residual >= 0.5 {
                continue;
            }
            taken.insert(cand);
            out.push(cand);
            break;
        }
    }
    out.sort_unstable_by_key(|&(u, v)| (v, u));
    Ok(out)
}

/// Crops one `scale x scale` patch per feature. The crop spans
/// `[u - scale/2, u + scale/2)` by `[v - scale/2, v + scale/2)`, copied
/// byte-exactly with no interpolation; features too close to the border are
/// a [`SceneError::MarginViolation`].
pub fn extract_patches(
    img: &RgbImage,
    features: &[(u32, u32)],
    scale: u32,
) -> Result<Vec<Patch>, SceneError> {
    if !PATCH_SCALES.contains(&scale) {
        return Err(SceneError::InvalidScale { scale });
    }
    let half = scale / 2;
    let mut patches = Vec::with_capacity(features.len());
    for (index, &(u, v)) in features.iter().enumerate() {
        if u < half || v < half || u + half > img.width || v + half > img.height {
            return Err(SceneError::MarginViolation {
                index,
                u,
                v,
                margin: half,
            });
        }
        let mut data = Vec::with_capacity((scale * scale * 3) as usize);
        for row in (v - half)..(v + half) {
            for col in (u - half)..(u + half) {
                data.extend_from_slice(&img.pixel(col, row));
            }
        }
        patches.push(Patch { u, v, scale, data });
    }
    Ok(patches)
}
