use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use volreg::io::{read_config, read_grid, read_landmarks, read_mask, read_volume, split_grid_path};
use volreg::synth::{make_affine_ground_truth, make_ground_truth, make_pair, make_phantom};
use volreg::{
    compose_and_warp, dice, fold_check, identity_grid, landmark_error, loss, phi_from_logits, register as run_registration,
    residual_deformation, warp as warp_volume, warp_mask, AffineParams, Dims, FoldReport, LandmarkReport, LandmarkSet,
    LossBreakdown, Mask3, OptimConfig, PhiLogits, RegError, Result,
};

use crate::bundle::Bundle;
use crate::{EvalArgs, RegisterArgs, SynthArgs, WarpArgs};

/// What a successful command prints: JSON under `--quiet`, prose otherwise.
pub struct Output {
    pub json: String,
    pub human: String,
}

impl Output {
    fn new<T: Serialize>(value: &T, human: String) -> Result<Self> {
        Ok(Self {
            json: serde_json::to_string(value)?,
            human,
        })
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn ensure_dims(what: &str, expected: Dims, actual: Dims) -> Result<()> {
    if expected != actual {
        log::debug!("{what} has dims {actual}, expected {expected}");
        return Err(RegError::ShapeMismatch {
            left: expected.0,
            right: actual.0,
        });
    }
    Ok(())
}

/// Loads a landmark file, warning about points outside `dims`; the hard check
/// happens where the points are used.
fn load_landmarks(path: &Path, dims: Dims) -> Result<LandmarkSet> {
    let set = read_landmarks(path)?;
    for label in set.out_of_bounds(dims) {
        log::warn!("{}: landmark {label:?} lies outside the {dims} volume", path.display());
    }
    Ok(set)
}

fn load_mask(path: &Path, dims: Dims) -> Result<Mask3> {
    let m = read_mask(path)?;
    ensure_dims(&path_str(path), dims, m.dims())?;
    Ok(m)
}

#[derive(Debug, Serialize)]
struct DiceSummary {
    unregistered: f64,
    registered: f64,
}

#[derive(Debug, Serialize)]
struct LandmarkSummary {
    unregistered: LandmarkReport,
    registered: LandmarkReport,
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Serialize)]
struct SynthReport {
    command: &'static str,
    dims: [usize; 3],
    strength: f64,
    seed: u64,
    affine_only: bool,
    unregistered_dice: f64,
    unregistered_landmarks: LandmarkReport,
    ground_truth_affine: AffineParams,
    ground_truth_fold_check: FoldReport,
    outputs: Vec<String>,
}

pub fn synth(args: &SynthArgs) -> Result<Output> {
    let dims = Dims(args.dims);
    dims.validate()?;
    let phantom = make_phantom(dims, args.seed)?;
    let gt = if args.affine_only {
        make_affine_ground_truth(dims, args.strength, args.seed)?
    } else {
        make_ground_truth(dims, args.strength, args.seed)?
    };
    let pair = make_pair(&phantom, &gt)?;

    let spacing = pair.reference.spacing();
    let mut bundle = Bundle::default();
    bundle.volume("phantom", &pair.moving)?;
    bundle.volume("reference", &pair.reference)?;
    bundle.volume("mask_moving", pair.moving_mask.as_volume())?;
    bundle.volume("mask_reference", pair.reference_mask.as_volume())?;
    bundle.landmarks("landmarks_moving.csv", &pair.moving_landmarks)?;
    bundle.landmarks("landmarks_reference.csv", &pair.reference_landmarks)?;
    bundle.channels("phi_gt", dims, spacing, pair.phi.channels())?;
    bundle.channels("grid_gt", dims, spacing, pair.grid.channels())?;
    bundle.json("affine_gt.json", &pair.affine)?;

    let mut outputs = bundle.names();
    outputs.push("synth.json".into());
    let report = SynthReport {
        command: "synth",
        dims: args.dims,
        strength: args.strength,
        seed: args.seed,
        affine_only: args.affine_only,
        unregistered_dice: dice(&pair.reference_mask, &pair.moving_mask)?,
        unregistered_landmarks: landmark_error(
            &identity_grid(dims)?,
            &pair.reference_landmarks,
            &pair.moving_landmarks,
        )?,
        ground_truth_affine: pair.affine,
        ground_truth_fold_check: fold_check(&pair.grid),
        outputs,
    };
    bundle.json("synth.json", &report)?;
    bundle.commit(&args.out_dir)?;

    let human = format!(
        "synthesized {} pair (strength {}, seed {}) in {}\n  unregistered Dice {:.4}, landmark ds {:.3} voxels\n",
        dims,
        args.strength,
        args.seed,
        args.out_dir.display(),
        report.unregistered_dice,
        report.unregistered_landmarks.ds,
    );
    Output::new(&report, human)
}

// ---------------------------------------------------------------- register

#[derive(Debug, Serialize)]
struct RegisterInputs {
    reference: String,
    moving: String,
    config: Option<String>,
    mask_reference: Option<String>,
    mask_moving: Option<String>,
    landmarks_ref: Option<String>,
    landmarks_mov: Option<String>,
}

/// Deterministic registration report; wall-clock time lives in `timing.json`.
#[derive(Debug, Serialize)]
struct RegisterReport {
    command: &'static str,
    seed: u64,
    config: OptimConfig,
    inputs: RegisterInputs,
    dims: [usize; 3],
    iterations_run: usize,
    converged: bool,
    lr_drops: Vec<usize>,
    initial: LossBreakdown,
    #[serde(rename = "final")]
    final_loss: LossBreakdown,
    mse_ratio: f64,
    affine: AffineParams,
    dice: Option<DiceSummary>,
    landmarks: Option<LandmarkSummary>,
    fold_check: FoldReport,
    loss_trace: Vec<LossBreakdown>,
    outputs: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Timing {
    wall_clock_seconds: f64,
}

pub fn register(args: &RegisterArgs) -> Result<Output> {
    let start = Instant::now();
    let mut cfg = match &args.config {
        Some(p) => read_config(p)?,
        None => OptimConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let reference = read_volume(&args.reference)?;
    let moving = read_volume(&args.moving)?;
    let dims = reference.dims();
    ensure_dims(&path_str(&args.moving), dims, moving.dims())?;

    let masks = match (&args.mask_reference, &args.mask_moving) {
        (Some(r), Some(m)) => Some((load_mask(r, dims)?, load_mask(m, dims)?)),
        _ => None,
    };
    let landmarks = match (&args.landmarks_ref, &args.landmarks_mov) {
        (Some(r), Some(m)) => {
            let r = load_landmarks(r, dims)?;
            let m = load_landmarks(m, dims)?;
            r.check_bounds(dims)?;
            // Fail on label/count problems before the expensive part.
            landmark_error(&identity_grid(dims)?, &r, &m)?;
            Some((r, m))
        }
        _ => None,
    };

    let initial = loss(
        &reference,
        &moving,
        &PhiLogits::zeros(dims)?,
        &AffineParams::IDENTITY,
        cfg.alpha,
        cfg.beta,
    )?;
    let result = run_registration(&reference, &moving, &cfg)?;
    let phi = phi_from_logits(&result.theta);
    let (warped, grid) = compose_and_warp(&moving, &phi, &result.a)?;
    let residual = residual_deformation(&grid);
    let identity = identity_grid(dims)?;

    let dice_summary = match &masks {
        Some((mr, mm)) => Some(DiceSummary {
            unregistered: dice(mr, mm)?,
            registered: dice(mr, &warp_mask(mm, &grid)?)?,
        }),
        None => None,
    };
    let landmark_summary = match &landmarks {
        Some((r, m)) => Some(LandmarkSummary {
            unregistered: landmark_error(&identity, r, m)?,
            registered: landmark_error(&grid, r, m)?,
        }),
        None => None,
    };

    let spacing = reference.spacing();
    let mut bundle = Bundle::default();
    bundle.volume("warped", &warped)?;
    bundle.channels("grid", dims, spacing, grid.channels())?;
    bundle.channels("residual", dims, spacing, residual.channels())?;
    bundle.channels("phi", dims, spacing, phi.channels())?;
    bundle.json("affine.json", &result.a)?;
    let mut outputs = bundle.names();
    outputs.extend(["report.json".to_string(), "timing.json".to_string()]);

    let mse_ratio = if initial.mse > 0.0 {
        result.best.mse / initial.mse
    } else {
        0.0
    };
    let report = RegisterReport {
        command: "register",
        seed: cfg.seed,
        config: cfg.clone(),
        inputs: RegisterInputs {
            reference: path_str(&args.reference),
            moving: path_str(&args.moving),
            config: args.config.as_deref().map(path_str),
            mask_reference: args.mask_reference.as_deref().map(path_str),
            mask_moving: args.mask_moving.as_deref().map(path_str),
            landmarks_ref: args.landmarks_ref.as_deref().map(path_str),
            landmarks_mov: args.landmarks_mov.as_deref().map(path_str),
        },
        dims: dims.0,
        iterations_run: result.iterations_run,
        converged: result.converged,
        lr_drops: result.lr_drops.clone(),
        initial,
        final_loss: result.best,
        mse_ratio,
        affine: result.a,
        dice: dice_summary,
        landmarks: landmark_summary,
        fold_check: fold_check(&grid),
        loss_trace: result.loss_trace.clone(),
        outputs,
    };
    bundle.json("report.json", &report)?;
    let seconds = start.elapsed().as_secs_f64();
    bundle.json(
        "timing.json",
        &Timing {
            wall_clock_seconds: seconds,
        },
    )?;
    bundle.commit(&args.out_dir)?;

    let mut human = String::new();
    let _ = writeln!(
        human,
        "registered {} in {:.1}s: {} iterations ({}), results in {}",
        dims,
        seconds,
        report.iterations_run,
        if report.converged { "converged" } else { "iteration cap" },
        args.out_dir.display()
    );
    let _ = writeln!(
        human,
        "  loss {:.3e} -> {:.3e} (MSE ratio {:.4})",
        report.initial.total, report.final_loss.total, report.mse_ratio
    );
    if let Some(d) = &report.dice {
        let _ = writeln!(human, "  Dice {:.4} -> {:.4}", d.unregistered, d.registered);
    }
    if let Some(l) = &report.landmarks {
        let _ = writeln!(
            human,
            "  landmark ds {:.3} -> {:.3} voxels (dx {:.3}, dy {:.3}, dz {:.3})",
            l.unregistered.ds, l.registered.ds, l.registered.dx, l.registered.dy, l.registered.dz
        );
    }
    let _ = writeln!(
        human,
        "  fold check: {} violations",
        report.fold_check.total_violations
    );
    Output::new(&report, human)
}

// ---------------------------------------------------------------- warp

#[derive(Debug, Serialize)]
struct WarpReport {
    command: &'static str,
    input: String,
    grid: String,
    output: String,
    dims: [usize; 3],
    mask: bool,
}

pub fn warp(args: &WarpArgs) -> Result<Output> {
    let (dir, stem) = split_grid_path(&args.grid);
    let grid = read_grid(&dir, &stem)?;
    let out = if args.mask {
        let m = read_mask(&args.input)?;
        ensure_dims(&path_str(&args.input), grid.dims(), m.dims())?;
        warp_mask(&m, &grid)?.into_volume()
    } else {
        let v = read_volume(&args.input)?;
        ensure_dims(&path_str(&args.input), grid.dims(), v.dims())?;
        warp_volume(&v, &grid)?
    };

    let out_dir = args.output.parent().unwrap_or(Path::new("")).to_path_buf();
    let name = args
        .output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| RegError::InvalidParam(format!("bad output path {}", args.output.display())))?;
    let mut bundle = Bundle::default();
    bundle.volume(&name, &out)?;
    bundle.commit(&out_dir)?;

    let report = WarpReport {
        command: "warp",
        input: path_str(&args.input),
        grid: path_str(&args.grid),
        output: path_str(&out_dir.join(format!("{name}.raw"))),
        dims: out.dims().0,
        mask: args.mask,
    };
    let human = format!("warped {} -> {}\n", report.input, report.output);
    Output::new(&report, human)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Serialize)]
struct EvalReport {
    command: &'static str,
    dims: [usize; 3],
    dice: Option<f64>,
    landmarks: Option<LandmarkReport>,
    fold_check: FoldReport,
}

pub fn eval(args: &EvalArgs) -> Result<Output> {
    let (dir, stem) = split_grid_path(&args.grid);
    let grid = read_grid(&dir, &stem)?;
    let dims = grid.dims();

    let dice_score = match (&args.mask_ref, &args.mask_mov) {
        (Some(r), Some(m)) => {
            let r = load_mask(r, dims)?;
            let m = load_mask(m, dims)?;
            Some(dice(&r, &warp_mask(&m, &grid)?)?)
        }
        _ => None,
    };
    let landmarks = match (&args.landmarks_ref, &args.landmarks_mov) {
        (Some(r), Some(m)) => {
            let r = load_landmarks(r, dims)?;
            let m = load_landmarks(m, dims)?;
            Some(landmark_error(&grid, &r, &m)?)
        }
        _ => None,
    };
    let report = EvalReport {
        command: "eval",
        dims: dims.0,
        dice: dice_score,
        landmarks,
        fold_check: fold_check(&grid),
    };
    // The metrics are this command's product, so they are JSON either way.
    let human = String::from_utf8(volreg::io::json_bytes(&report)?).expect("JSON is UTF-8");
    Output::new(&report, human)
}
