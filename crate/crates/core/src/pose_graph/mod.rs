//! Pose-graph optimization over relative-motion constraints.
//!
//! A problem holds absolute pose estimates (world-from-camera) plus edges
//! carrying a measured relative transform and a nonnegative information
//! scale. The objective is the weighted squared residual summed over
//! edges, with the edge residual
//!
//! ```text
//! r = log(measured ∘ pose_to⁻¹ ∘ pose_from)
//! ```
//!
//! which vanishes exactly when `measured = pose_from⁻¹ ∘ pose_to`, the
//! same relative-transform convention used everywhere in this crate. The
//! solver is Levenberg-Marquardt with multiplicative damping on the
//! normal-equation diagonal and left-multiplicative twist updates; one
//! anchor pose is held bit-identical to fix the gauge.

mod io;

pub use io::{load_g2o, read_g2o, save_g2o, write_g2o};

use nalgebra::{DMatrix, DVector, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{se3_exp, se3_log, GeometryError, Pose, Twist};
use crate::scalar::{s, Scalar};
use crate::ErrorCategory;

/// Per-axis step used by the central-difference Jacobians.
pub const JACOBIAN_STEP: f64 = 1e-6;

/// Initial Levenberg-Marquardt damping.
pub const INITIAL_DAMPING: f64 = 1e-4;

/// Damping beyond this aborts the iteration (no step can be accepted).
pub const MAX_DAMPING: f64 = 1e32;

#[derive(Debug, thiserror::Error)]
pub enum PoseGraphError {
    #[error("invalid problem: {detail}")]
    InvalidProblem { detail: String },
    #[error("edge {edge_index} references missing pose {pose}")]
    IndexOutOfRange { edge_index: usize, pose: usize },
    #[error("normal equations are singular: every edge has zero information")]
    SingularNormalEquations,
    #[error("cost became non-finite")]
    NonFiniteCost,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{source_name}:{line}: {reason}")]
    Parse {
        source_name: String,
        line: usize,
        reason: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl PoseGraphError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            PoseGraphError::InvalidProblem { .. } | PoseGraphError::IndexOutOfRange { .. } => {
                ErrorCategory::Validation
            }
            PoseGraphError::SingularNormalEquations | PoseGraphError::NonFiniteCost => {
                ErrorCategory::Numeric
            }
            PoseGraphError::Geometry(e) => e.category(),
            PoseGraphError::Parse { .. } | PoseGraphError::Io(_) => ErrorCategory::Io,
        }
    }
}

/// One relative-motion constraint between two poses. The information
/// matrix is `info_scale` times the identity, so a zero scale keeps the
/// edge in the problem without letting it contribute.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraphEdge<T: Scalar> {
    pub from: usize,
    pub to: usize,
    /// Expected `pose_from⁻¹ ∘ pose_to`.
    pub measured: Pose<T>,
    pub info_scale: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraphProblem<T: Scalar> {
    pub poses: Vec<Pose<T>>,
    pub edges: Vec<PoseGraphEdge<T>>,
    /// Index of the pose held fixed during optimization.
    pub anchor: usize,
}

#[derive(Debug, Clone)]
pub struct OptimizeConfig<T: Scalar> {
    pub max_iterations: usize,
    pub initial_damping: T,
    /// Relative cost-change threshold for convergence.
    pub cost_tolerance: T,
    /// Infinity-norm threshold on the gradient for convergence.
    pub gradient_tolerance: T,
}

impl<T: Scalar> Default for OptimizeConfig<T> {
    fn default() -> Self {
        OptimizeConfig {
            max_iterations: 100,
            initial_damping: s(INITIAL_DAMPING),
            cost_tolerance: s(1e-12),
            gradient_tolerance: s(1e-10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Cost change between accepted iterations fell below tolerance.
    CostChange,
    /// Gradient infinity norm fell below tolerance.
    GradientNorm,
    /// Iteration budget exhausted.
    MaxIterations,
    /// Damping grew past [`MAX_DAMPING`] without an acceptable step.
    DampingOverflow,
}

#[derive(Debug, Clone)]
pub struct OptReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub costs: Vec<f64>,
    pub termination: Termination,
}

/// Residual twist of one edge given the current estimates; zero exactly
/// when the estimates satisfy the measurement.
pub fn edge_residual<T: Scalar>(
    pose_from: &Pose<T>,
    pose_to: &Pose<T>,
    measured: &Pose<T>,
) -> Result<Twist<T>, GeometryError> {
    se3_log(&measured.compose(&pose_to.inverse()).compose(pose_from))
}

/// Total weighted cost `Σ info_scale · ‖r‖²`.
pub fn total_cost<T: Scalar>(
    poses: &[Pose<T>],
    edges: &[PoseGraphEdge<T>],
) -> Result<f64, PoseGraphError> {
    let mut cost = 0.0f64;
    for edge in edges {
        if edge.info_scale == T::zero() {
            continue;
        }
        let r = edge_residual(&poses[edge.from], &poses[edge.to], &edge.measured)?;
        let v = r.as_vector();
        cost += edge.info_scale.to_f64_lossy() * v.dot(&v).to_f64_lossy();
    }
    Ok(cost)
}

fn validate<T: Scalar>(problem: &PoseGraphProblem<T>) -> Result<(), PoseGraphError> {
    if problem.poses.is_empty() {
        return Err(PoseGraphError::InvalidProblem {
            detail: "no poses".to_string(),
        });
    }
    if problem.edges.is_empty() {
        return Err(PoseGraphError::InvalidProblem {
            detail: "no edges".to_string(),
        });
    }
    if problem.anchor >= problem.poses.len() {
        return Err(PoseGraphError::InvalidProblem {
            detail: format!(
                "anchor {} out of range for {} poses",
                problem.anchor,
                problem.poses.len()
            ),
        });
    }
    let mut weight = 0.0f64;
    for (edge_index, edge) in problem.edges.iter().enumerate() {
        for pose in [edge.from, edge.to] {
            if pose >= problem.poses.len() {
                return Err(PoseGraphError::IndexOutOfRange { edge_index, pose });
            }
        }
        if edge.from == edge.to {
            return Err(PoseGraphError::InvalidProblem {
                detail: format!("edge {edge_index} connects pose {} to itself", edge.from),
            });
        }
        let scale = edge.info_scale.to_f64_lossy();
        if !scale.is_finite() || scale < 0.0 {
            return Err(PoseGraphError::InvalidProblem {
                detail: format!("edge {edge_index} has invalid information scale {scale}"),
            });
        }
        weight += scale;
    }
    if weight == 0.0 {
        return Err(PoseGraphError::SingularNormalEquations);
    }
    Ok(())
}

/// Residual of an edge after left-multiplicative twist perturbations of
/// its endpoints.
fn perturbed_residual<T: Scalar>(
    edge: &PoseGraphEdge<T>,
    pose_from: &Pose<T>,
    pose_to: &Pose<T>,
    delta_from: &Vector6<T>,
    delta_to: &Vector6<T>,
) -> Result<Vector6<T>, GeometryError> {
    let pf = se3_exp(&Twist::from_vector(delta_from)).compose(pose_from);
    let pt = se3_exp(&Twist::from_vector(delta_to)).compose(pose_to);
    Ok(edge_residual(&pf, &pt, &edge.measured)?.as_vector())
}

/// Central-difference Jacobian of one edge residual with respect to the
/// twist perturbations of `(from, to)`: a 6×12 matrix.
fn edge_jacobian<T: Scalar>(
    edge: &PoseGraphEdge<T>,
    pose_from: &Pose<T>,
    pose_to: &Pose<T>,
) -> Result<DMatrix<T>, GeometryError> {
    let eps = s::<T>(JACOBIAN_STEP);
    let two_eps = eps + eps;
    let mut jacobian = DMatrix::zeros(6, 12);
    for axis in 0..12 {
        let mut plus = Vector6::zeros();
        let mut minus = Vector6::zeros();
        let (dp, dm): (&mut Vector6<T>, &mut Vector6<T>) = (&mut plus, &mut minus);
        dp[axis % 6] = eps;
        dm[axis % 6] = -eps;
        let zero = Vector6::zeros();
        let (rp, rm) = if axis < 6 {
            (
                perturbed_residual(edge, pose_from, pose_to, dp, &zero)?,
                perturbed_residual(edge, pose_from, pose_to, dm, &zero)?,
            )
        } else {
            (
                perturbed_residual(edge, pose_from, pose_to, &zero, dp)?,
                perturbed_residual(edge, pose_from, pose_to, &zero, dm)?,
            )
        };
        for row in 0..6 {
            jacobian[(row, axis)] = (rp[row] - rm[row]) / two_eps;
        }
    }
    Ok(jacobian)
}

struct NormalEquations<T: Scalar> {
    h: DMatrix<T>,
    g: DVector<T>,
}

fn build_normal_equations<T: Scalar>(
    poses: &[Pose<T>],
    edges: &[PoseGraphEdge<T>],
    anchor: usize,
) -> Result<NormalEquations<T>, PoseGraphError> {
    let var_of = |pose: usize| -> Option<usize> {
        if pose == anchor {
            None
        } else if pose < anchor {
            Some(pose)
        } else {
            Some(pose - 1)
        }
    };
    let dim = 6 * (poses.len() - 1);
    let mut h = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    for edge in edges {
        if edge.info_scale == T::zero() {
            continue;
        }
        let r = edge_residual(&poses[edge.from], &poses[edge.to], &edge.measured)?.as_vector();
        let jac = edge_jacobian(edge, &poses[edge.from], &poses[edge.to])?;
        let w = edge.info_scale;
        let vars = [var_of(edge.from), var_of(edge.to)];
        for (block_a, var_a) in vars.iter().enumerate() {
            let Some(va) = var_a else { continue };
            // gradient block: w · J_aᵀ r
            for col in 0..6 {
                let mut acc = T::zero();
                for row in 0..6 {
                    acc += jac[(row, 6 * block_a + col)] * r[row];
                }
                g[6 * va + col] += w * acc;
            }
            for (block_b, var_b) in vars.iter().enumerate() {
                let Some(vb) = var_b else { continue };
                // Hessian block: w · J_aᵀ J_b
                for ca in 0..6 {
                    for cb in 0..6 {
                        let mut acc = T::zero();
                        for row in 0..6 {
                            acc += jac[(row, 6 * block_a + ca)] * jac[(row, 6 * block_b + cb)];
                        }
                        h[(6 * va + ca, 6 * vb + cb)] += w * acc;
                    }
                }
            }
        }
    }
    Ok(NormalEquations { h, g })
}

fn solve_damped<T: Scalar>(eqs: &NormalEquations<T>, damping: T) -> Option<DVector<T>> {
    let dim = eqs.h.nrows();
    let mut damped = eqs.h.clone();
    for i in 0..dim {
        // multiplicative damping keeps the step invariant under a common
        // rescaling of all information scales
        damped[(i, i)] += damping * eqs.h[(i, i)];
    }
    let solve = |m: DMatrix<T>| m.cholesky().map(|chol| chol.solve(&(-&eqs.g)));
    solve(damped.clone()).or_else(|| {
        let jitter = s::<T>(1e-12);
        for i in 0..dim {
            damped[(i, i)] += jitter;
        }
        solve(damped)
    })
}

fn apply_step<T: Scalar>(poses: &[Pose<T>], anchor: usize, step: &DVector<T>) -> Vec<Pose<T>> {
    let mut out = Vec::with_capacity(poses.len());
    let mut var = 0usize;
    for (idx, pose) in poses.iter().enumerate() {
        if idx == anchor {
            out.push(pose.clone());
            continue;
        }
        let mut delta = Vector6::zeros();
        for i in 0..6 {
            delta[i] = step[6 * var + i];
        }
        out.push(se3_exp(&Twist::from_vector(&delta)).compose(pose));
        var += 1;
    }
    out
}

/// Minimizes the pose-graph cost. Returns the optimized poses and an
/// iteration report; the anchor pose is returned bit-identical.
pub fn optimize<T: Scalar>(
    problem: &PoseGraphProblem<T>,
    config: &OptimizeConfig<T>,
) -> Result<(Vec<Pose<T>>, OptReport), PoseGraphError> {
    validate(problem)?;
    let mut poses = problem.poses.clone();
    let mut cost = total_cost(&poses, &problem.edges)?;
    if !cost.is_finite() {
        return Err(PoseGraphError::NonFiniteCost);
    }
    let initial_cost = cost;
    let mut costs = vec![cost];
    let mut damping = config.initial_damping;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0usize;

    'outer: for _ in 0..config.max_iterations {
        let eqs = build_normal_equations(&poses, &problem.edges, problem.anchor)?;
        if eqs.g.amax() <= config.gradient_tolerance {
            termination = Termination::GradientNorm;
            break;
        }
        // retry with stronger damping until a step lowers the cost
        loop {
            if damping.to_f64_lossy() > MAX_DAMPING {
                termination = Termination::DampingOverflow;
                break 'outer;
            }
            let Some(step) = solve_damped(&eqs, damping) else {
                damping *= s::<T>(10.0);
                continue;
            };
            let candidate = apply_step(&poses, problem.anchor, &step);
            let candidate_cost = total_cost(&candidate, &problem.edges)?;
            if !candidate_cost.is_finite() {
                return Err(PoseGraphError::NonFiniteCost);
            }
            if candidate_cost < cost {
                let drop = cost - candidate_cost;
                poses = candidate;
                cost = candidate_cost;
                costs.push(cost);
                iterations += 1;
                damping /= s::<T>(10.0);
                if drop < config.cost_tolerance.to_f64_lossy() * (1.0 + cost) {
                    termination = Termination::CostChange;
                    break 'outer;
                }
                break;
            }
            damping *= s::<T>(10.0);
        }
    }

    Ok((
        poses,
        OptReport {
            iterations,
            initial_cost,
            final_cost: cost,
            costs,
            termination,
        },
    ))
}

/// Consecutive-pose odometry edges measured from a trajectory, with unit
/// information scale and optional zero-mean Gaussian noise (`sigma_t`
/// meters per translation axis, `sigma_r` radians per rotation axis).
pub fn odometry_edges<T: Scalar>(
    poses: &[Pose<T>],
    sigma_t: f64,
    sigma_r: f64,
    seed: u64,
) -> Result<Vec<PoseGraphEdge<T>>, PoseGraphError> {
    if poses.len() < 2 {
        return Err(PoseGraphError::InvalidProblem {
            detail: "need at least two poses for odometry".to_string(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal_t = Normal::new(0.0, sigma_t.max(0.0)).map_err(|_| {
        PoseGraphError::InvalidProblem {
            detail: format!("invalid translation noise {sigma_t}"),
        }
    })?;
    let normal_r = Normal::new(0.0, sigma_r.max(0.0)).map_err(|_| {
        PoseGraphError::InvalidProblem {
            detail: format!("invalid rotation noise {sigma_r}"),
        }
    })?;
    let mut edges = Vec::with_capacity(poses.len() - 1);
    for i in 0..poses.len() - 1 {
        let exact = poses[i].inverse().compose(&poses[i + 1]);
        let mut noise = Twist::zero();
        for a in 0..3 {
            noise.rho[a] = s::<T>(normal_t.sample(&mut rng));
            noise.phi[a] = s::<T>(normal_r.sample(&mut rng));
        }
        edges.push(PoseGraphEdge {
            from: i,
            to: i + 1,
            measured: se3_exp(&noise).compose(&exact),
            info_scale: T::one(),
        });
    }
    Ok(edges)
}

/// Integrates relative measurements from a start pose: the trajectory an
/// odometry front end would report, drift included.
pub fn integrate_odometry<T: Scalar>(
    start: &Pose<T>,
    edges: &[PoseGraphEdge<T>],
) -> Vec<Pose<T>> {
    let mut poses = vec![start.clone()];
    for edge in edges {
        let last = poses.last().unwrap();
        poses.push(last.compose(&edge.measured));
    }
    poses
}

/// Builds a full problem from odometry edges plus loop-closure matches.
/// Each match `(query, reference, score)` becomes an edge whose measured
/// transform comes from `loop_measured` and whose information scale is
/// the match score.
pub fn build_problem<T: Scalar>(
    initial_poses: Vec<Pose<T>>,
    odometry: Vec<PoseGraphEdge<T>>,
    loops: &[(usize, usize, T)],
    loop_measured: impl Fn(usize, usize) -> Pose<T>,
) -> Result<PoseGraphProblem<T>, PoseGraphError> {
    let n = initial_poses.len();
    let mut edges = odometry;
    for (k, &(from, to, score)) in loops.iter().enumerate() {
        for pose in [from, to] {
            if pose >= n {
                return Err(PoseGraphError::IndexOutOfRange {
                    edge_index: edges.len() + k,
                    pose,
                });
            }
        }
        edges.push(PoseGraphEdge {
            from,
            to,
            measured: loop_measured(from, to),
            info_scale: score,
        });
    }
    Ok(PoseGraphProblem {
        poses: initial_poses,
        edges,
        anchor: 0,
    })
}
