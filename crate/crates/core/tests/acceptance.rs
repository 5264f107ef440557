//! Acceptance checks for the relocalization stack. Each test covers one
//! criterion end to end and prints a single `acceptance <name>: PASS/FAIL`
//! line with the measured numbers behind the verdict. Every tolerance is a
//! named constant next to the criterion that uses it.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reloc_core::embedding::{
    embedding_score, encode, encoder_loss_gradients, patch_inputs, shrinkage_loss, train_encoder,
    EncoderParams, EncoderTrainConfig, DEFAULT_CODE_DIM, DEFAULT_HIDDEN_DIM,
};
use reloc_core::evaluate::{evaluate_ate, heatmap_error};
use reloc_core::geometry::{
    se3_exp, se3_log, CameraIntrinsics, Pose, Projection, Trajectory, Twist,
};
use reloc_core::graph::{
    build_embedding_graph, chain_edges, gnn_loss_gradients, inverse_ce_score, query_subgraph,
    GnnParams, DEFAULT_ETA,
};
use reloc_core::pose_graph::{
    build_problem, integrate_odometry, odometry_edges, optimize, OptimizeConfig, PoseGraphEdge,
    PoseGraphProblem,
};
use reloc_core::scene::{
    augment_low_texture, example_spec, extract_patches, generate_scene, select_features,
};
use reloc_core::similarity::{
    build_similarity_matrix, DepthMap, IouOptions, SimilarityMatrix, DEFAULT_OCCLUSION_EPS,
};

/// Prints the per-criterion verdict line, then enforces it.
fn check(name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("acceptance {name}: {verdict} — {detail}");
    assert!(pass, "acceptance {name} failed: {detail}");
}

// ---------------------------------------------------------------------------
// 1. SE(3) and pinhole round trips
// ---------------------------------------------------------------------------

/// Worst allowed `log(exp(xi)) - xi` vector norm over random twists.
const EXP_LOG_ROUND_TRIP_TOL: f64 = 1e-7;
/// Worst allowed pixel error after backproject-then-project.
const PROJECT_ROUND_TRIP_TOL_PX: f64 = 1e-9;
const GEOMETRY_TRIALS: usize = 10_000;
const GEOMETRY_TIME_BUDGET: Duration = Duration::from_secs(5);

#[test]
fn criterion_01_geometry_round_trips() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);

    let mut worst_twist = 0.0f64;
    for _ in 0..GEOMETRY_TRIALS {
        let rho = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        );
        let mut axis = Vector3::new(
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        while axis.norm() < 1e-3 {
            axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
        }
        let angle = rng.gen_range(1e-6..std::f64::consts::PI - 1e-3);
        let xi = Twist {
            rho,
            phi: axis.normalize() * angle,
        };
        let pose = se3_exp(&xi);
        let back = se3_log(&pose).expect("angle stays below the principal-log branch cut");
        let err = (back.as_vector() - xi.as_vector()).norm();
        worst_twist = worst_twist.max(err);
    }

    let k = CameraIntrinsics::new(95.25, 104.5, 63.25, 58.75, 128, 120).unwrap();
    let mut worst_px = 0.0f64;
    let mut out_of_view = 0usize;
    for _ in 0..GEOMETRY_TRIALS {
        let u: f64 = rng.gen_range(0.01..127.99);
        let v: f64 = rng.gen_range(0.01..119.99);
        let z: f64 = rng.gen_range(0.05..12.0);
        let p = k.backproject(u, v, z).unwrap();
        match k.project(&p) {
            Projection::Inside { u: u2, v: v2, depth } => {
                let e = (u2 - u).abs().max((v2 - v).abs()).max((depth - z).abs());
                worst_px = worst_px.max(e);
            }
            Projection::OutOfView => out_of_view += 1,
        }
    }

    let elapsed = start.elapsed();
    let pass = worst_twist < EXP_LOG_ROUND_TRIP_TOL
        && worst_px < PROJECT_ROUND_TRIP_TOL_PX
        && out_of_view == 0
        && elapsed < GEOMETRY_TIME_BUDGET;
    check(
        "01 geometry round trips",
        pass,
        &format!(
            "max twist round-trip {worst_twist:.3e} (tol {EXP_LOG_ROUND_TRIP_TOL:.0e}), \
             max pixel round-trip {worst_px:.3e} px (tol {PROJECT_ROUND_TRIP_TOL_PX:.0e}), \
             {out_of_view} projections left the image, {GEOMETRY_TRIALS} trials each \
             in {elapsed:.2?} (budget {GEOMETRY_TIME_BUDGET:?})"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Reprojection overlap vs a brute-force reference loop
// ---------------------------------------------------------------------------

const OVERLAP_ORACLE_PAIRS: usize = 20;

/// Straight-line reference implementation of the directed overlap: walk every
/// source pixel, reproject it into the target camera, count the landings.
/// No z-buffer, no parallelism, no matrix assembly.
fn reference_overlap(
    source: &DepthMap<f64>,
    pose_source: &Pose<f64>,
    pose_target: &Pose<f64>,
    k: &CameraIntrinsics<f64>,
) -> f64 {
    let rt = pose_target.rotation.transpose();
    let inv_translation = -(rt * pose_target.translation);
    let rel_rotation = rt * pose_source.rotation;
    let rel_translation = rt * pose_source.translation + inv_translation;
    let (r00, r01, r02) = (rel_rotation[(0, 0)], rel_rotation[(0, 1)], rel_rotation[(0, 2)]);
    let (r10, r11, r12) = (rel_rotation[(1, 0)], rel_rotation[(1, 1)], rel_rotation[(1, 2)]);
    let (r20, r21, r22) = (rel_rotation[(2, 0)], rel_rotation[(2, 1)], rel_rotation[(2, 2)]);
    let (t0, t1, t2) = (rel_translation[0], rel_translation[1], rel_translation[2]);

    let mut count = 0u64;
    for row in 0..source.height() {
        for col in 0..source.width() {
            let z = source.get(col, row);
            if z <= 0.0 {
                continue;
            }
            let uc = col as f64 + 0.5;
            let vc = row as f64 + 0.5;
            let x = (uc - k.cx) * z / k.fx;
            let y = (vc - k.cy) * z / k.fy;
            let px = r00 * x + r01 * y + r02 * z + t0;
            let py = r10 * x + r11 * y + r12 * z + t1;
            let pz = r20 * x + r21 * y + r22 * z + t2;
            if pz <= 1e-4 {
                continue;
            }
            let u = k.fx * px / pz + k.cx;
            let v = k.fy * py / pz + k.cy;
            let fc = u.floor();
            let fr = v.floor();
            if fc < 0.0 || fr < 0.0 || fc > (k.width - 1) as f64 || fr > (k.height - 1) as f64 {
                continue;
            }
            count += 1;
        }
    }
    count as f64 / (k.width as u64 * k.height as u64) as f64
}

#[test]
fn criterion_02_overlap_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut compared = 0usize;
    let mut exact = 0usize;
    let mut monotone = true;
    let mut strict_drops = 0usize;

    for _ in 0..OVERLAP_ORACLE_PAIRS {
        let w: u32 = rng.gen_range(16..=64);
        let h: u32 = rng.gen_range(16..=64);
        let k = CameraIntrinsics::new(
            w as f64 * rng.gen_range(0.8..1.3),
            h as f64 * rng.gen_range(0.8..1.3),
            w as f64 / 2.0 + rng.gen_range(-2.0..2.0),
            h as f64 / 2.0 + rng.gen_range(-2.0..2.0),
            w,
            h,
        )
        .unwrap();
        let mut random_depth = || {
            let values: Vec<f64> = (0..(w as usize * h as usize))
                .map(|_| {
                    if rng.gen_bool(0.15) {
                        0.0
                    } else {
                        rng.gen_range(1.0..5.0)
                    }
                })
                .collect();
            DepthMap::new(w, h, values).unwrap()
        };
        let depths = [random_depth(), random_depth()];
        let mut random_pose = |scale_t: f64, scale_r: f64| {
            se3_exp(&Twist {
                rho: Vector3::new(
                    rng.gen_range(-scale_t..scale_t),
                    rng.gen_range(-scale_t..scale_t),
                    rng.gen_range(-scale_t..scale_t),
                ),
                phi: Vector3::new(
                    rng.gen_range(-scale_r..scale_r),
                    rng.gen_range(-scale_r..scale_r),
                    rng.gen_range(-scale_r..scale_r),
                ),
            })
        };
        let poses = [random_pose(0.25, 0.12), random_pose(0.25, 0.12)];

        let off = IouOptions {
            occlusion: false,
            occlusion_eps: DEFAULT_OCCLUSION_EPS,
        };
        let on = IouOptions::default();
        let refs = [&depths[0], &depths[1]];
        let m_off = build_similarity_matrix(&refs, &poses, &k, &off).unwrap();
        let m_on = build_similarity_matrix(&refs, &poses, &k, &on).unwrap();

        for i in 0..2 {
            for j in 0..2 {
                let expected = reference_overlap(&depths[i], &poses[i], &poses[j], &k);
                compared += 1;
                if m_off.get(i, j).to_bits() == expected.to_bits() {
                    exact += 1;
                }
                if m_on.get(i, j) > m_off.get(i, j) {
                    monotone = false;
                }
                if m_on.get(i, j) < m_off.get(i, j) {
                    strict_drops += 1;
                }
            }
        }
    }

    let pass = exact == compared && monotone && strict_drops > 0;
    check(
        "02 overlap matches brute force",
        pass,
        &format!(
            "{exact}/{compared} entries bit-identical to the reference loop over \
             {OVERLAP_ORACLE_PAIRS} random pairs; occlusion never increased an entry \
             (monotone: {monotone}) and strictly lowered {strict_drops}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Similarity structure of the reversed-corridor scene
// ---------------------------------------------------------------------------

/// Minimum mean overlap across the revisit pairs of the reversed corridor.
const REVISIT_BAND_MEAN_MIN: f64 = 0.3;
/// Maximum overlap allowed between frames far apart in time that are not
/// revisit partners.
const DISTANT_PAIR_MAX: f64 = 0.05;
/// Index distance that counts as "far apart" both from the diagonal and
/// from the revisit band.
const DISTANT_INDEX_GAP: usize = 10;

#[test]
fn criterion_03_corridor_similarity_structure() {
    let scene = generate_scene::<f64>(&example_spec(), 7).unwrap();
    let depths: Vec<&DepthMap<f64>> = scene.keyframes.iter().map(|kf| &kf.depth).collect();
    let sim = build_similarity_matrix(
        &depths,
        &scene.trajectory.poses,
        &scene.intrinsics,
        &IouOptions::default(),
    )
    .unwrap();
    let n = sim.len();

    let diagonal_exact = (0..n).all(|i| sim.get(i, i) == 1.0);

    let mut band_sum = 0.0;
    let mut band_count = 0usize;
    for q in 0..n {
        let partner = n - 1 - q;
        if partner != q {
            band_sum += sim.get(q, partner);
            band_count += 1;
        }
    }
    let band_mean = band_sum / band_count as f64;

    let mut distant_max = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let from_diagonal = i.abs_diff(j);
            let from_band = (i + j).abs_diff(n - 1);
            if from_diagonal >= DISTANT_INDEX_GAP && from_band >= DISTANT_INDEX_GAP {
                distant_max = distant_max.max(sim.get(i, j));
            }
        }
    }

    let pass = diagonal_exact && band_mean >= REVISIT_BAND_MEAN_MIN && distant_max <= DISTANT_PAIR_MAX;
    check(
        "03 corridor similarity structure",
        pass,
        &format!(
            "{n} keyframes: diagonal exactly 1.0: {diagonal_exact}; revisit-band mean \
             {band_mean:.4} (min {REVISIT_BAND_MEAN_MIN}); max overlap among pairs at least \
             {DISTANT_INDEX_GAP} frames from both the diagonal and the revisit band \
             {distant_max:.4} (max {DISTANT_PAIR_MAX})"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Training gradients vs central finite differences
// ---------------------------------------------------------------------------

/// Relative disagreement allowed between an analytic derivative and its
/// central finite difference.
const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const GRAD_TIME_BUDGET: Duration = Duration::from_secs(30);

/// Entry with the largest analytic-gradient magnitude in one slot; checking
/// the most influential entry keeps the relative comparison well scaled.
fn largest_entry(m: &DMatrix<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = -1.0;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let v = m[(r, c)].abs();
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
    }
    best
}

fn relative_gap(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

#[test]
fn criterion_04_training_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    // Patch-set encoder: 4 keyframes, 3 synthetic patch vectors each.
    let input_dim = 12;
    let n = 4;
    let patch_sets: Vec<Vec<DVector<f64>>> = (0..n)
        .map(|_| {
            (0..3)
                .map(|_| DVector::from_fn(input_dim, |_, _| rng.gen_range(0.05..0.95)))
                .collect()
        })
        .collect();
    let mut target_values: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    for i in 0..n {
        target_values[i * n + i] = 1.0;
    }
    let target = SimilarityMatrix::new(n, target_values).unwrap();
    let encoder = EncoderParams::<f64>::seeded_dims(input_dim, 7, 5, 992);
    let config = EncoderTrainConfig::<f64>::default();

    let (_, encoder_grads) = encoder_loss_gradients(&encoder, &patch_sets, &target, &config).unwrap();
    let mut worst_encoder = 0.0f64;
    let mut encoder_slices = 0usize;
    for slot in [0usize, 3, 4] {
        let (r, c) = largest_entry(&encoder_grads[slot]);
        let fd = {
            let probe = |delta: f64| {
                let mut p = encoder.clone();
                p.param_list_mut()[slot][(r, c)] += delta;
                encoder_loss_gradients(&p, &patch_sets, &target, &config)
                    .unwrap()
                    .0
            };
            (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP)
        };
        worst_encoder = worst_encoder.max(relative_gap(encoder_grads[slot][(r, c)], fd));
        encoder_slices += 1;
    }

    // Graph network: 5 nodes, chain plus one long edge.
    let dim = 6;
    let features: Vec<DVector<f64>> = (0..5)
        .map(|_| DVector::from_fn(dim, |_, _| rng.gen_range(0.05..0.95)))
        .collect();
    let graph =
        build_embedding_graph(features, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]).unwrap();
    let mut label_values: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..1.0)).collect();
    for i in 0..5 {
        label_values[i * 5 + i] = 1.0;
    }
    let labels = SimilarityMatrix::new(5, label_values).unwrap();
    let gnn = GnnParams::<f64>::seeded(dim, 44);

    let (_, gnn_grads) = gnn_loss_gradients(&gnn, &graph, &labels, DEFAULT_ETA).unwrap();
    let mut worst_gnn = 0.0f64;
    let mut gnn_slices = 0usize;
    for slot in [0usize, 4, 8] {
        let (r, c) = largest_entry(&gnn_grads[slot]);
        let fd = {
            let probe = |delta: f64| {
                let mut p = gnn.clone();
                p.param_list_mut()[slot][(r, c)] += delta;
                gnn_loss_gradients(&p, &graph, &labels, DEFAULT_ETA).unwrap().0
            };
            (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP)
        };
        worst_gnn = worst_gnn.max(relative_gap(gnn_grads[slot][(r, c)], fd));
        gnn_slices += 1;
    }

    let elapsed = start.elapsed();
    let pass = worst_encoder < GRAD_REL_TOL
        && worst_gnn < GRAD_REL_TOL
        && encoder_slices >= 3
        && gnn_slices >= 3
        && elapsed < GRAD_TIME_BUDGET;
    check(
        "04 training gradients match finite differences",
        pass,
        &format!(
            "encoder worst relative gap {worst_encoder:.3e} over {encoder_slices} parameter \
             slices, graph network worst {worst_gnn:.3e} over {gnn_slices} slices \
             (tol {GRAD_REL_TOL:.0e}), in {elapsed:.2?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Shrinkage loss identities
// ---------------------------------------------------------------------------

const SHRINKAGE_GRID_STEP: f64 = 1e-3;

#[test]
fn criterion_05_shrinkage_identities() {
    let config = EncoderTrainConfig::<f64>::default();
    let (a, c) = (config.shrinkage_a, config.shrinkage_c);

    let zero_at_zero = shrinkage_loss(0.0, a, c) == 0.0;
    // At the turn-on point the gate is exactly 1/2, so the loss must equal
    // half the squared error bit for bit.
    let half_point = shrinkage_loss(c, a, c) == c * c / 2.0;
    let symmetric = [0.05, 0.2, 0.7]
        .iter()
        .all(|&e| shrinkage_loss(-e, a, c) == shrinkage_loss(e, a, c));

    let mut strictly_increasing = true;
    let mut prev = shrinkage_loss(0.0, a, c);
    let mut i = 1usize;
    while (i as f64) * SHRINKAGE_GRID_STEP <= 1.0 {
        let cur = shrinkage_loss(i as f64 * SHRINKAGE_GRID_STEP, a, c);
        if cur <= prev {
            strictly_increasing = false;
            break;
        }
        prev = cur;
        i += 1;
    }

    let pass = zero_at_zero && half_point && symmetric && strictly_increasing;
    check(
        "05 shrinkage identities",
        pass,
        &format!(
            "loss(0)=0: {zero_at_zero}; loss(c)=c^2/2 exactly: {half_point} \
             (value {:.17}); symmetric in the error sign: {symmetric}; strictly \
             increasing on a {SHRINKAGE_GRID_STEP} grid over [0,1]: {strictly_increasing}",
            shrinkage_loss(c, a, c)
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Match-score identities
// ---------------------------------------------------------------------------

const MATCH_SCORE_HAND_TOL: f64 = 1e-12;

#[test]
fn criterion_06_match_score_identities() {
    let eta = DEFAULT_ETA;
    let ceiling = 1.0 / eta;

    // A query with no mass anywhere scores exactly the ceiling.
    let zero_q = DVector::from_vec(vec![0.0, 0.0, 0.0]);
    let m = DVector::from_vec(vec![0.7, 0.2, 1.0]);
    let zero_query = inverse_ce_score(&zero_q, &m, eta).unwrap();

    // A reference with full mass in every slot scores the ceiling too.
    let q = DVector::from_vec(vec![0.3, 0.5, 0.2]);
    let ones = DVector::from_vec(vec![1.0, 1.0, 1.0]);
    let full_match = inverse_ce_score(&q, &ones, eta).unwrap();

    // Two hand-computed cases.
    let hand_a = inverse_ce_score(
        &DVector::from_vec(vec![0.5, 0.5]),
        &DVector::from_vec(vec![0.5, 0.25]),
        eta,
    )
    .unwrap();
    let expect_a = 1.0 / (eta + 1.5 * std::f64::consts::LN_2);

    let hand_b = inverse_ce_score(
        &DVector::from_vec(vec![0.25, 0.75]),
        &DVector::from_vec(vec![(-1.0f64).exp(), (-2.0f64).exp()]),
        eta,
    )
    .unwrap();
    let expect_b = 1.0 / (eta + 1.75);

    let exact_ceiling = zero_query.to_bits() == ceiling.to_bits()
        && full_match.to_bits() == ceiling.to_bits();
    let gap_a = (hand_a - expect_a).abs();
    let gap_b = (hand_b - expect_b).abs();
    let pass = exact_ceiling && gap_a <= MATCH_SCORE_HAND_TOL && gap_b <= MATCH_SCORE_HAND_TOL;
    check(
        "06 match-score identities",
        pass,
        &format!(
            "zero query and all-ones reference both hit the ceiling 1/eta exactly: \
             {exact_ceiling}; hand case A off by {gap_a:.2e}, hand case B off by \
             {gap_b:.2e} (tol {MATCH_SCORE_HAND_TOL:.0e})"
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Window queries recover their own position
// ---------------------------------------------------------------------------

const WINDOW_LEN: usize = 5;
const REFERENCE_NODES: usize = 40;
const WINDOW_CODE_DIM: usize = 8;
/// Neighbor mixing weight of the hand-built network used for the
/// self-consistency sweep.
const WINDOW_NBR_WEIGHT: f64 = 0.01;
const WINDOW_TIME_BUDGET: Duration = Duration::from_secs(10);

#[test]
fn criterion_07_window_alignment_recovers_position() {
    let start = Instant::now();
    // Every node code holds the same multiset of values in a distinct order,
    // so total mass cannot separate nodes — only the arrangement can.
    let base: Vec<f64> = (0..WINDOW_CODE_DIM)
        .map(|d| 0.25 + 1.5 * d as f64 / (WINDOW_CODE_DIM - 1) as f64)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut perms: Vec<Vec<usize>> = Vec::with_capacity(REFERENCE_NODES);
    while perms.len() < REFERENCE_NODES {
        let mut perm: Vec<usize> = (0..WINDOW_CODE_DIM).collect();
        perm.shuffle(&mut rng);
        if !perms.contains(&perm) {
            perms.push(perm);
        }
    }
    let features: Vec<DVector<f64>> = perms
        .iter()
        .map(|perm| DVector::from_iterator(WINDOW_CODE_DIM, perm.iter().map(|&p| base[p])))
        .collect();

    let reference = build_embedding_graph(features.clone(), &chain_edges(REFERENCE_NODES)).unwrap();
    let params = GnnParams::<f64>::identity_leaning(WINDOW_CODE_DIM, WINDOW_NBR_WEIGHT);

    let mut aligned = 0usize;
    let mut total = 0usize;
    for window_start in 0..=REFERENCE_NODES - WINDOW_LEN {
        let window = build_embedding_graph(
            features[window_start..window_start + WINDOW_LEN].to_vec(),
            &chain_edges(WINDOW_LEN),
        )
        .unwrap();
        let matches = query_subgraph(&params, &reference, &window, DEFAULT_ETA, Some(0.0)).unwrap();
        assert_eq!(matches.len(), WINDOW_LEN, "one match per window node");
        for m in &matches {
            total += 1;
            if m.ref_idx == window_start + m.query_idx {
                aligned += 1;
            }
        }
    }

    let elapsed = start.elapsed();
    let positions = REFERENCE_NODES - WINDOW_LEN + 1;
    let pass = aligned == total && elapsed < WINDOW_TIME_BUDGET;
    check(
        "07 window alignment recovers position",
        pass,
        &format!(
            "{aligned}/{total} window nodes matched their own reference position across \
             all {positions} window placements in {elapsed:.2?} (budget {WINDOW_TIME_BUDGET:?})"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Loop closure repairs odometry drift
// ---------------------------------------------------------------------------

const DRIFT_SEEDS: u64 = 10;
const DRIFT_MIN_SUCCESSES: usize = 9;
/// The optimized final-pose gap must shrink below this fraction of the
/// unoptimized gap.
const END_GAP_RATIO_MAX: f64 = 0.5;
const DRIFT_SIGMA_T: f64 = 0.02;
const DRIFT_SIGMA_R: f64 = 0.01;
const DRIFT_TIME_BUDGET: Duration = Duration::from_secs(60);

fn circle_poses(n: usize, radius: f64) -> Vec<Pose<f64>> {
    (0..n)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / n as f64;
            Pose {
                rotation: Matrix3::new(
                    a.cos(),
                    -a.sin(),
                    0.0,
                    a.sin(),
                    a.cos(),
                    0.0,
                    0.0,
                    0.0,
                    1.0,
                ),
                translation: Vector3::new(radius * a.cos(), radius * a.sin(), 0.3),
            }
        })
        .collect()
}

fn as_trajectory(poses: &[Pose<f64>]) -> Trajectory<f64> {
    Trajectory {
        timestamps: (0..poses.len()).map(|k| k as f64).collect(),
        poses: poses.to_vec(),
    }
}

#[test]
fn criterion_08_loop_closure_improves_trajectory() {
    let start = Instant::now();
    let gt = circle_poses(20, 2.0);
    let last = gt.len() - 1;
    let mut successes = 0usize;
    let mut ratios: Vec<f64> = Vec::new();

    for seed in 0..DRIFT_SEEDS {
        let edges = odometry_edges(&gt, DRIFT_SIGMA_T, DRIFT_SIGMA_R, seed).unwrap();
        let drifted = integrate_odometry(&gt[0], &edges);
        let problem = build_problem(drifted.clone(), edges, &[(last, 0, 1.0)], |i, j| {
            gt[i].inverse().compose(&gt[j])
        })
        .unwrap();
        let (optimized, _report) = optimize(&problem, &OptimizeConfig::default()).unwrap();

        let gap_before = (drifted[last].translation - gt[last].translation).norm();
        let gap_after = (optimized[last].translation - gt[last].translation).norm();
        let ate_before = evaluate_ate(&as_trajectory(&drifted), &as_trajectory(&gt), true)
            .unwrap()
            .rmse;
        let ate_after = evaluate_ate(&as_trajectory(&optimized), &as_trajectory(&gt), true)
            .unwrap()
            .rmse;

        ratios.push(gap_after / gap_before);
        if gap_after < END_GAP_RATIO_MAX * gap_before && ate_after < ate_before {
            successes += 1;
        }
    }

    let elapsed = start.elapsed();
    let worst_ratio = ratios.iter().cloned().fold(0.0f64, f64::max);
    let pass = successes >= DRIFT_MIN_SUCCESSES && elapsed < DRIFT_TIME_BUDGET;
    check(
        "08 loop closure improves trajectory",
        pass,
        &format!(
            "{successes}/{DRIFT_SEEDS} seeds shrank the final-pose gap below \
             {END_GAP_RATIO_MAX} of the drifted gap and lowered aligned ATE \
             (need {DRIFT_MIN_SUCCESSES}); worst gap ratio {worst_ratio:.3}; \
             in {elapsed:.2?} (budget {DRIFT_TIME_BUDGET:?})"
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Optimizer invariants
// ---------------------------------------------------------------------------

/// Largest allowed per-component disagreement between the minimizers found
/// with original and uniformly rescaled edge weights.
const WEIGHT_SCALE_INVARIANCE_TOL: f64 = 1e-8;

#[test]
fn criterion_09_optimizer_invariants() {
    let gt = circle_poses(16, 1.5);
    let last = gt.len() - 1;
    let edges = odometry_edges(&gt, DRIFT_SIGMA_T, DRIFT_SIGMA_R, 42).unwrap();
    let drifted = integrate_odometry(&gt[0], &edges);
    let problem = build_problem(drifted, edges, &[(last, 0, 1.0)], |i, j| {
        gt[i].inverse().compose(&gt[j])
    })
    .unwrap();
    let (optimized, report) = optimize(&problem, &OptimizeConfig::default()).unwrap();

    // Accepted steps only ever lower the cost.
    let monotone = report.costs.windows(2).all(|w| w[1] <= w[0]);
    let reduced = report.final_cost < report.initial_cost;

    // The anchor pose comes back bit for bit.
    let anchor = &problem.poses[problem.anchor];
    let anchor_out = &optimized[problem.anchor];
    let mut anchor_bits = true;
    for r in 0..3 {
        for c in 0..3 {
            anchor_bits &=
                anchor.rotation[(r, c)].to_bits() == anchor_out.rotation[(r, c)].to_bits();
        }
        anchor_bits &= anchor.translation[r].to_bits() == anchor_out.translation[r].to_bits();
    }

    // Scaling every edge weight by one factor must not move the minimizer.
    let scaled_edges: Vec<PoseGraphEdge<f64>> = problem
        .edges
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.info_scale *= 7.0;
            e
        })
        .collect();
    let scaled_problem = PoseGraphProblem {
        poses: problem.poses.clone(),
        edges: scaled_edges,
        anchor: problem.anchor,
    };
    let (optimized_scaled, _) = optimize(&scaled_problem, &OptimizeConfig::default()).unwrap();
    let mut worst_shift = 0.0f64;
    for (a, b) in optimized.iter().zip(&optimized_scaled) {
        for r in 0..3 {
            for c in 0..3 {
                worst_shift = worst_shift.max((a.rotation[(r, c)] - b.rotation[(r, c)]).abs());
            }
            worst_shift = worst_shift.max((a.translation[r] - b.translation[r]).abs());
        }
    }

    let pass = monotone && reduced && anchor_bits && worst_shift < WEIGHT_SCALE_INVARIANCE_TOL;
    check(
        "09 optimizer invariants",
        pass,
        &format!(
            "accepted costs non-increasing: {monotone} (initial {:.3e} -> final {:.3e}); \
             anchor pose bit-identical: {anchor_bits}; minimizer shift under x7 weight \
             rescale {worst_shift:.3e} (tol {WEIGHT_SCALE_INVARIANCE_TOL:.0e})",
            report.initial_cost, report.final_cost
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Learned embedding scores track the overlap matrix
// ---------------------------------------------------------------------------

/// Largest allowed |predicted - measured| overlap entry after training the
/// encoder with its stock configuration.
const SCORE_VS_OVERLAP_MAX_ABS: f64 = 0.25;
const SCORE_SCENE_SEED: u64 = 5;
const SCORE_PATCH_SCALE: u32 = 16;
const SCORE_PATCH_BUDGET: usize = 40;

#[test]
fn criterion_10_learned_scores_track_overlap() {
    let start = Instant::now();
    let mut spec = example_spec();
    spec.trajectory.frames_per_loop = 10;
    spec.trajectory.span = 3.5;
    let scene = generate_scene::<f64>(&spec, SCORE_SCENE_SEED).unwrap();
    let n = scene.keyframes.len();
    assert_eq!(n, 20, "two corridor sweeps of ten frames");

    let depths: Vec<&DepthMap<f64>> = scene.keyframes.iter().map(|kf| &kf.depth).collect();
    let truth = build_similarity_matrix(
        &depths,
        &scene.trajectory.poses,
        &scene.intrinsics,
        &IouOptions::default(),
    )
    .unwrap();

    let margin = SCORE_PATCH_SCALE / 2;
    let mut patch_sets: Vec<Vec<DVector<f64>>> = Vec::with_capacity(n);
    for kf in &scene.keyframes {
        let seed = 900 + kf.id as u64;
        let img = &kf.rgb;
        let selected = select_features(img, SCORE_PATCH_BUDGET, margin, seed);
        let features = augment_low_texture(
            &selected,
            SCORE_PATCH_BUDGET,
            (img.width / 2, img.height / 2),
            margin,
            img.width,
            img.height,
            seed ^ 0xA5A5,
        )
        .unwrap();
        let patches = extract_patches(img, &features, SCORE_PATCH_SCALE).unwrap();
        patch_sets.push(patch_inputs(&patches, img.width, img.height));
    }

    let mut params =
        EncoderParams::<f64>::seeded(SCORE_PATCH_SCALE, DEFAULT_HIDDEN_DIM, DEFAULT_CODE_DIM, 0);
    let config = EncoderTrainConfig::<f64>::default();
    let losses = train_encoder(&mut params, &patch_sets, &truth, &config).unwrap();

    let codes: Vec<DVector<f64>> = patch_sets
        .iter()
        .map(|set| encode(&params, set).unwrap())
        .collect();
    let mut predicted = SimilarityMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let score = embedding_score(&codes[i], &codes[j]).unwrap();
            predicted.set(i, j, score.clamp(0.0, 1.0));
        }
    }

    let (_, max_abs) = heatmap_error(&predicted, &truth).unwrap();
    let elapsed = start.elapsed();
    let pass = max_abs <= SCORE_VS_OVERLAP_MAX_ABS;
    check(
        "10 learned scores track overlap",
        pass,
        &format!(
            "max |predicted - measured| overlap {max_abs:.4} over {n}x{n} entries \
             (max {SCORE_VS_OVERLAP_MAX_ABS}); training loss {:.4} -> {:.4} over {} steps; \
             in {elapsed:.2?}",
            losses.first().unwrap(),
            losses.last().unwrap(),
            losses.len()
        ),
    );
}
