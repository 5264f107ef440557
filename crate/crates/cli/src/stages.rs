//! Stage implementations behind the subcommands.
//!
//! Every stage reads its inputs from files written by earlier stages and
//! writes all of its outputs under its own `--out` directory, so stages
//! compose through the filesystem and any intermediate artifact can be
//! inspected or swapped out.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DVector;

use reloc_core::embedding::{
    encode_patches, load_embeddings_csv, load_encoder, patch_input_dim, save_embeddings_csv,
    save_encoder, train_encoder, EncoderParams, EncoderTrainConfig, DEFAULT_CODE_DIM,
    DEFAULT_HIDDEN_DIM,
};
use reloc_core::evaluate::{
    evaluate_ate, heatmap_error, save_ate_csv, save_ate_report, AteReport,
};
use reloc_core::geometry::{load_trajectory, save_trajectory, Trajectory};
use reloc_core::graph::{
    build_embedding_graph, chain_edges, load_gnn, load_matches_csv, query_subgraph, save_gnn,
    save_matches_csv, train_gnn, GnnParams, GnnTrainConfig, QueryMatch, DEFAULT_ETA,
};
use reloc_core::pose_graph::{
    build_problem, integrate_odometry, odometry_edges, optimize, save_g2o, OptimizeConfig,
    Termination,
};
use reloc_core::scene::{
    augment_low_texture, example_spec, extract_patches, generate_scene, load_dataset,
    select_features, Dataset, Patch, Scene, SceneSpec, PATCH_SCALES,
};
use reloc_core::similarity::{
    build_similarity_matrix, load_matrix_csv, save_matrix_csv, save_matrix_pgm, IouOptions,
};

use crate::args::*;
use crate::fail::{usage, Fail, StageExt};

/// Deterministic per-keyframe stream selector for feature extraction.
fn keyframe_seed(seed: u64, id: usize) -> u64 {
    seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Feature selection plus low-texture fill plus patch extraction for one
/// keyframe — the one recipe shared by the train-encoder and embed stages
/// so both see identical patches for identical flags.
fn keyframe_patches(
    scene: &Scene<f64>,
    id: usize,
    scale: u32,
    budget: usize,
    seed: u64,
    stage: &'static str,
) -> Result<Vec<Patch>, Fail> {
    let kf = &scene.keyframes[id];
    let (width, height) = (kf.rgb.width, kf.rgb.height);
    let margin = scale / 2;
    let base = keyframe_seed(seed, id);
    let selected = select_features(&kf.rgb, budget, margin, base);
    let features = augment_low_texture(
        &selected,
        budget,
        (width / 2, height / 2),
        margin,
        width,
        height,
        base ^ 0xA5A5,
    )
    .stage(stage)?;
    extract_patches(&kf.rgb, &features, scale).stage(stage)
}

fn ensure_out(stage: &'static str, out: &Path) -> Result<(), Fail> {
    fs::create_dir_all(out).stage(stage)
}

fn write_loss_log(stage: &'static str, path: &Path, losses: &[f64]) -> Result<(), Fail> {
    let mut buf = String::from("step,loss\n");
    for (step, loss) in losses.iter().enumerate() {
        buf.push_str(&format!("{step},{loss:.8e}\n"));
    }
    fs::write(path, buf).stage(stage)
}

pub fn cmd_gen(args: &GenArgs) -> Result<(), Fail> {
    const STAGE: &str = "gen";
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).stage(STAGE)?;
            SceneSpec::from_toml_str(&text).stage(STAGE)?
        }
        None => example_spec(),
    };
    ensure_out(STAGE, &args.out)?;
    let scene = generate_scene::<f64>(&spec, args.seed).stage(STAGE)?;
    reloc_core::scene::save_dataset(&args.out, &scene).stage(STAGE)?;
    fs::write(args.out.join("scene.toml"), spec.to_toml_string()).stage(STAGE)?;
    println!(
        "gen: {} keyframes at {}x{} -> {}",
        scene.keyframes.len(),
        spec.camera.width,
        spec.camera.height,
        args.out.display()
    );
    Ok(())
}

pub fn cmd_iou(args: &IouArgs) -> Result<(), Fail> {
    const STAGE: &str = "iou";
    let scene = load_dataset::<f64>(&args.data).stage(STAGE)?;
    let opts = IouOptions {
        occlusion: !args.no_occlusion,
        ..IouOptions::default()
    };
    let depths: Vec<_> = scene.keyframes.iter().map(|kf| &kf.depth).collect();
    let matrix =
        build_similarity_matrix(&depths, &scene.trajectory.poses, &scene.intrinsics, &opts)
            .stage(STAGE)?;
    ensure_out(STAGE, &args.out)?;
    save_matrix_csv(args.out.join("similarity.csv"), &matrix).stage(STAGE)?;
    save_matrix_pgm(args.out.join("similarity.pgm"), &matrix).stage(STAGE)?;
    println!(
        "iou: {0}x{0} similarity matrix -> {1}",
        matrix.len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_train_encoder(args: &TrainEncoderArgs) -> Result<(), Fail> {
    const STAGE: &str = "train-encoder";
    if !PATCH_SCALES.contains(&args.scale) {
        return Err(usage(
            STAGE,
            format!("patch scale {} not in {PATCH_SCALES:?}", args.scale),
        ));
    }
    let scene = load_dataset::<f64>(&args.data).stage(STAGE)?;
    let truth = load_matrix_csv::<f64>(&args.truth).stage(STAGE)?;
    let mut patch_sets: Vec<Vec<DVector<f64>>> = Vec::with_capacity(scene.keyframes.len());
    for id in 0..scene.keyframes.len() {
        let patches = keyframe_patches(&scene, id, args.scale, args.budget, args.seed, STAGE)?;
        let kf = &scene.keyframes[id];
        patch_sets.push(reloc_core::embedding::patch_inputs(
            &patches,
            kf.rgb.width,
            kf.rgb.height,
        ));
    }

    let defaults = EncoderTrainConfig::<f64>::default();
    let config = EncoderTrainConfig {
        steps: args.steps.unwrap_or(defaults.steps),
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        momentum: args.momentum.unwrap_or(defaults.momentum),
        weight_decay: args.weight_decay.unwrap_or(defaults.weight_decay),
        seed: args.seed,
        ..defaults
    };
    let mut params = EncoderParams::<f64>::seeded(
        args.scale,
        DEFAULT_HIDDEN_DIM,
        DEFAULT_CODE_DIM,
        args.seed,
    );
    let losses = train_encoder(&mut params, &patch_sets, &truth, &config).stage(STAGE)?;

    ensure_out(STAGE, &args.out)?;
    save_encoder(args.out.join("encoder.params"), &params).stage(STAGE)?;
    write_loss_log(STAGE, &args.out.join("encoder_log.csv"), &losses)?;
    println!(
        "train-encoder: {} steps, loss {:.6} -> {:.6}, artifacts -> {}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_embed(args: &EmbedArgs) -> Result<(), Fail> {
    const STAGE: &str = "embed";
    let scene = load_dataset::<f64>(&args.data).stage(STAGE)?;
    let params = load_encoder::<f64>(&args.encoder).stage(STAGE)?;
    let scale = PATCH_SCALES
        .iter()
        .copied()
        .find(|&s| patch_input_dim(s) == params.input_dim())
        .ok_or_else(|| {
            usage(
                STAGE,
                format!(
                    "encoder input dimension {} matches no supported patch scale {PATCH_SCALES:?}",
                    params.input_dim()
                ),
            )
        })?;
    let mut embeddings = Vec::with_capacity(scene.keyframes.len());
    for id in 0..scene.keyframes.len() {
        let patches = keyframe_patches(&scene, id, scale, args.budget, args.seed, STAGE)?;
        let kf = &scene.keyframes[id];
        embeddings
            .push(encode_patches(&params, &patches, kf.rgb.width, kf.rgb.height).stage(STAGE)?);
    }
    ensure_out(STAGE, &args.out)?;
    save_embeddings_csv(args.out.join("embeddings.csv"), &embeddings).stage(STAGE)?;
    println!(
        "embed: {} keyframes x {}-dim codes (patch scale {scale}) -> {}",
        embeddings.len(),
        params.code_dim(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_train_gnn(args: &TrainGnnArgs) -> Result<(), Fail> {
    const STAGE: &str = "train-gnn";
    let embeddings = load_embeddings_csv::<f64>(&args.embeddings).stage(STAGE)?;
    let truth = load_matrix_csv::<f64>(&args.truth).stage(STAGE)?;
    let n = embeddings.len();
    let graph = build_embedding_graph(embeddings, &chain_edges(n)).stage(STAGE)?;

    let defaults = GnnTrainConfig::<f64>::default();
    let config = GnnTrainConfig {
        steps: args.steps.unwrap_or(defaults.steps),
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        momentum: args.momentum.unwrap_or(defaults.momentum),
        weight_decay: args.weight_decay.unwrap_or(defaults.weight_decay),
        eta: args.eta.unwrap_or(defaults.eta),
    };
    let mut params = GnnParams::<f64>::seeded(graph.feature_dim(), args.seed);
    let losses = train_gnn(&mut params, &graph, &truth, &config).stage(STAGE)?;

    ensure_out(STAGE, &args.out)?;
    save_gnn(args.out.join("gnn.params"), &params).stage(STAGE)?;
    write_loss_log(STAGE, &args.out.join("gnn_log.csv"), &losses)?;
    println!(
        "train-gnn: {} steps, loss {:.6} -> {:.6}, artifacts -> {}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_query(args: &QueryArgs) -> Result<(), Fail> {
    const STAGE: &str = "query";
    let embeddings = load_embeddings_csv::<f64>(&args.embeddings).stage(STAGE)?;
    let params = load_gnn::<f64>(&args.gnn).stage(STAGE)?;
    let n = embeddings.len();
    if n < args.window {
        return Err(usage(
            STAGE,
            format!("{n} embeddings cannot fill a window of {}", args.window),
        ));
    }
    if let Some(first) = embeddings.first() {
        if first.len() != params.dim() {
            return Err(usage(
                STAGE,
                format!(
                    "embedding dimension {} does not match network dimension {}",
                    first.len(),
                    params.dim()
                ),
            ));
        }
    }
    let eta = args.eta.unwrap_or(DEFAULT_ETA);

    // Slide a window over the trajectory. For each placement the window is
    // matched against the map with the window itself plus a temporal guard
    // band removed, so matches are genuine revisits rather than the trivial
    // self-correspondence.
    let mut best: std::collections::BTreeMap<usize, (usize, f64)> = std::collections::BTreeMap::new();
    for start in 0usize..=n - args.window {
        let band_lo = start.saturating_sub(args.min_separation);
        let band_hi = (start + args.window + args.min_separation).min(n);
        let kept: Vec<usize> = (0..n).filter(|&i| i < band_lo || i >= band_hi).collect();
        if kept.is_empty() {
            continue;
        }
        let reference = build_embedding_graph(
            kept.iter().map(|&i| embeddings[i].clone()).collect(),
            &chain_edges(kept.len()),
        )
        .stage(STAGE)?;
        let window = build_embedding_graph(
            embeddings[start..start + args.window].to_vec(),
            &chain_edges(args.window),
        )
        .stage(STAGE)?;
        let matches =
            query_subgraph(&params, &reference, &window, eta, args.threshold).stage(STAGE)?;
        for m in matches {
            let query_idx = start + m.query_idx;
            let ref_idx = kept[m.ref_idx];
            let entry = best.entry(query_idx).or_insert((ref_idx, m.score));
            if m.score > entry.1 {
                *entry = (ref_idx, m.score);
            }
        }
    }

    let matches: Vec<QueryMatch<f64>> = best
        .into_iter()
        .map(|(query_idx, (ref_idx, score))| QueryMatch {
            query_idx,
            ref_idx,
            score,
        })
        .collect();
    ensure_out(STAGE, &args.out)?;
    save_matches_csv(args.out.join("matches.csv"), &matches).stage(STAGE)?;
    println!(
        "query: {} loop candidates from {} windows -> {}",
        matches.len(),
        n - args.window + 1,
        args.out.display()
    );
    Ok(())
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::CostChange => "cost_change",
        Termination::GradientNorm => "gradient_norm",
        Termination::MaxIterations => "max_iterations",
        Termination::DampingOverflow => "damping_overflow",
    }
}

pub fn cmd_optimize(args: &OptimizeArgs) -> Result<(), Fail> {
    const STAGE: &str = "optimize";
    let gt = load_trajectory::<f64>(Dataset::new(&args.data).poses_path()).stage(STAGE)?;
    if gt.poses.len() < 2 {
        return Err(usage(STAGE, "trajectory has fewer than two poses"));
    }
    let odometry =
        odometry_edges(&gt.poses, args.sigma_t, args.sigma_r, args.seed).stage(STAGE)?;
    let drifted = integrate_odometry(&gt.poses[0], &odometry);
    ensure_out(STAGE, &args.out)?;
    save_trajectory(
        args.out.join("odometry.txt"),
        &Trajectory {
            timestamps: gt.timestamps.clone(),
            poses: drifted.clone(),
        },
    )
    .stage(STAGE)?;

    let matches = load_matches_csv::<f64>(&args.matches).stage(STAGE)?;
    let loops: Vec<(usize, usize, f64)> = matches
        .iter()
        .map(|m| (m.query_idx, m.ref_idx, m.score))
        .collect();
    let problem = build_problem(drifted, odometry, &loops, |i, j| {
        gt.poses[i].inverse().compose(&gt.poses[j])
    })
    .stage(STAGE)?;
    save_g2o(args.out.join("problem.g2o"), &problem).stage(STAGE)?;

    let defaults = OptimizeConfig::<f64>::default();
    let config = OptimizeConfig {
        max_iterations: args.max_iterations.unwrap_or(defaults.max_iterations),
        ..defaults
    };
    let (poses, report) = optimize(&problem, &config).stage(STAGE)?;
    save_trajectory(
        args.out.join("optimized.txt"),
        &Trajectory {
            timestamps: gt.timestamps.clone(),
            poses,
        },
    )
    .stage(STAGE)?;

    let mut text = String::new();
    text.push_str("# pose-graph optimization report\n");
    text.push_str(&format!("poses {}\n", gt.poses.len()));
    text.push_str(&format!("loop_edges {}\n", loops.len()));
    text.push_str(&format!("iterations {}\n", report.iterations));
    text.push_str(&format!("initial_cost {:.8e}\n", report.initial_cost));
    text.push_str(&format!("final_cost {:.8e}\n", report.final_cost));
    text.push_str(&format!(
        "termination {}\n",
        termination_name(report.termination)
    ));
    fs::write(args.out.join("report.txt"), text).stage(STAGE)?;
    let mut costs = String::from("iteration,cost\n");
    for (i, c) in report.costs.iter().enumerate() {
        costs.push_str(&format!("{i},{c:.8e}\n"));
    }
    fs::write(args.out.join("costs.csv"), costs).stage(STAGE)?;
    println!(
        "optimize: {} loop edges, cost {:.3e} -> {:.3e} in {} iterations ({})",
        loops.len(),
        report.initial_cost,
        report.final_cost,
        report.iterations,
        termination_name(report.termination)
    );
    Ok(())
}

fn eval_pair(
    stage: &'static str,
    est_path: &Path,
    gt: &Trajectory<f64>,
    align: bool,
) -> Result<AteReport, Fail> {
    let est = load_trajectory::<f64>(est_path).stage(stage)?;
    evaluate_ate(&est, gt, align).stage(stage)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), Fail> {
    const STAGE: &str = "eval";
    if args.pred.is_some() != args.truth.is_some() {
        return Err(usage(
            STAGE,
            "--pred and --truth must be given together for heatmap comparison",
        ));
    }
    let gt = load_trajectory::<f64>(&args.gt).stage(STAGE)?;
    let align = !args.no_align;
    ensure_out(STAGE, &args.out)?;

    let report = eval_pair(STAGE, &args.est, &gt, align)?;
    save_ate_report(args.out.join("ate.txt"), &report).stage(STAGE)?;
    save_ate_csv(args.out.join("ate.csv"), &report).stage(STAGE)?;
    println!("eval: ate_rmse_m {:.8e}", report.rmse);

    if let Some(baseline) = &args.baseline {
        let base = eval_pair(STAGE, baseline, &gt, align)?;
        save_ate_report(args.out.join("ate_baseline.txt"), &base).stage(STAGE)?;
        save_ate_csv(args.out.join("ate_baseline.csv"), &base).stage(STAGE)?;
        println!("eval: baseline_rmse_m {:.8e}", base.rmse);
        println!(
            "eval: improved {}",
            if report.rmse < base.rmse { "yes" } else { "no" }
        );
    }

    if let (Some(pred), Some(truth)) = (&args.pred, &args.truth) {
        let pred = load_matrix_csv::<f64>(pred).stage(STAGE)?;
        let truth = load_matrix_csv::<f64>(truth).stage(STAGE)?;
        let (diff, max_abs) = heatmap_error(&pred, &truth).stage(STAGE)?;
        save_matrix_pgm(args.out.join("heatmap_error.pgm"), &diff).stage(STAGE)?;
        let mut out = fs::File::create(args.out.join("heatmap.txt")).stage(STAGE)?;
        writeln!(out, "max_abs_error {max_abs:.8e}").stage(STAGE)?;
        println!("eval: heatmap_max_abs {max_abs:.8e}");
    }
    Ok(())
}

/// Runs every stage in order with one seed, each into its own
/// subdirectory, and finishes with an evaluation of the optimized
/// trajectory against both the ground truth and the drifted odometry.
pub fn cmd_pipeline(args: &PipelineArgs) -> Result<(), Fail> {
    let data = args.out.join("data");
    cmd_gen(&GenArgs {
        out: data.clone(),
        seed: args.seed,
        spec: args.spec.clone(),
    })?;
    let iou_dir = args.out.join("iou");
    cmd_iou(&IouArgs {
        data: data.clone(),
        out: iou_dir.clone(),
        no_occlusion: false,
    })?;
    let truth_csv = iou_dir.join("similarity.csv");
    let encoder_dir = args.out.join("encoder");
    cmd_train_encoder(&TrainEncoderArgs {
        data: data.clone(),
        truth: truth_csv.clone(),
        out: encoder_dir.clone(),
        seed: args.seed,
        scale: 16,
        budget: 40,
        steps: Some(args.encoder_steps),
        learning_rate: None,
        momentum: None,
        weight_decay: None,
    })?;
    let embed_dir = args.out.join("embed");
    cmd_embed(&EmbedArgs {
        data: data.clone(),
        encoder: encoder_dir.join("encoder.params"),
        out: embed_dir.clone(),
        seed: args.seed,
        budget: 40,
    })?;
    let embeddings_csv = embed_dir.join("embeddings.csv");
    let gnn_dir = args.out.join("gnn");
    cmd_train_gnn(&TrainGnnArgs {
        embeddings: embeddings_csv.clone(),
        truth: truth_csv,
        out: gnn_dir.clone(),
        seed: args.seed,
        steps: Some(args.gnn_steps),
        learning_rate: None,
        momentum: None,
        weight_decay: None,
        eta: None,
    })?;
    let query_dir = args.out.join("query");
    cmd_query(&QueryArgs {
        embeddings: embeddings_csv,
        gnn: gnn_dir.join("gnn.params"),
        out: query_dir.clone(),
        window: 5,
        min_separation: 5,
        eta: None,
        threshold: None,
    })?;
    let opt_dir = args.out.join("opt");
    cmd_optimize(&OptimizeArgs {
        data: data.clone(),
        matches: query_dir.join("matches.csv"),
        out: opt_dir.clone(),
        seed: args.seed,
        sigma_t: args.sigma_t,
        sigma_r: args.sigma_r,
        max_iterations: None,
    })?;
    cmd_eval(&EvalArgs {
        est: opt_dir.join("optimized.txt"),
        gt: data.join("poses.txt"),
        baseline: Some(opt_dir.join("odometry.txt")),
        out: args.out.join("eval"),
        no_align: false,
        pred: None,
        truth: None,
    })?;
    println!("pipeline: complete -> {}", args.out.display());
    Ok(())
}
