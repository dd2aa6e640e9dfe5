use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use serde_json::json;

use backbone_recon::curve::SegmentGrid;
use backbone_recon::epipolar::{fit_initial_guess, warm_start, WarmStart, WarmStartConfig};
use backbone_recon::eval::{
    max_distance_to_polyline, reconstruct as fit, run_experiment, sample_curve, simulate_with_radius, write_plot_csv,
    Scenario,
};
use backbone_recon::icp::SolverConfig;
use backbone_recon::raster::BinaryImage;
use backbone_recon::Error;

use crate::files::*;
use crate::{EvaluateArgs, ExportPlotArgs, ReconstructArgs, SimulateArgs, SolverArgs, WarmstartArgs};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

enum WarmStartMode {
    None,
    Epipolar,
    File(PathBuf),
}

fn parse_warmstart(text: &str) -> CliResult<WarmStartMode> {
    match text {
        "none" => Ok(WarmStartMode::None),
        "epipolar" => Ok(WarmStartMode::Epipolar),
        _ => match text.strip_prefix("file:") {
            Some(p) if !p.is_empty() => Ok(WarmStartMode::File(PathBuf::from(p))),
            _ => Err(CliError::config(format!(
                "--warmstart must be none, epipolar or file:PATH, got {text:?}"
            ))),
        },
    }
}

fn solver_config(args: &SolverArgs) -> CliResult<SolverConfig> {
    let mut cfg = load_solver(args.solver_config.as_deref())?;
    if let Some(m) = args.method {
        let method = m.into();
        if method != cfg.method && args.solver_config.is_none() {
            cfg = match method {
                backbone_recon::icp::Method::MultiStep => SolverConfig::multi_step(),
                backbone_recon::icp::Method::OneStep => SolverConfig::default(),
            };
        }
        cfg.method = method;
    }
    if let Some(p) = args.p {
        cfg.p = p;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_views(images: &[BinaryImage], scenario: &Scenario) -> CliResult<()> {
    if images.len() != scenario.rig.len() {
        return Err(CliError::config(format!(
            "{} images given for {} cameras",
            images.len(),
            scenario.rig.len()
        )));
    }
    for (k, (img, cam)) in images.iter().zip(&scenario.rig.cameras).enumerate() {
        if (img.width(), img.height()) != cam.image_size {
            return Err(CliError::config(format!(
                "image {k} is {}x{}, camera {k} expects {}x{}",
                img.width(),
                img.height(),
                cam.image_size.0,
                cam.image_size.1
            )));
        }
    }
    Ok(())
}

fn write_samples(path: &Path, params: &backbone_recon::curve::CurveParams, grid: &SegmentGrid) -> CliResult<()> {
    let samples = sample_curve(params, grid)?;
    write_file(path, |w| samples.write_csv(w))
}

pub fn simulate(a: SimulateArgs) -> CliResult<()> {
    let mut scenario = load_scenario(a.scenario.scenario.as_deref(), a.scenario.calib.as_deref())?;
    if let Some(r) = a.dilation_radius {
        scenario.dilation_radius = r;
    }
    let sim = simulate_with_radius(&scenario, scenario.dilation_radius)?;
    create_dir(&a.out)?;
    for (k, img) in sim.images.iter().enumerate() {
        let path = a.out.join(format!("view_{k}.pgm"));
        write_file(&path, |w| img.write_pgm_to(w))?;
        if sim.skipped[k] > 0 {
            log::warn!("view {k}: {} curve samples fall outside the image", sim.skipped[k]);
        }
    }
    write_file(&a.out.join("truth.csv"), |w| sim.truth.write_csv(w))?;
    write_text(&a.out.join("scenario.json"), &(scenario.to_json()? + "\n"))?;
    Ok(())
}

fn write_warm_start(out: &Path, ws: &WarmStart) -> CliResult<()> {
    for s in &ws.skeletons {
        write_file(&out.join(format!("skeleton_{}.csv", s.view)), |w| s.write_csv(w))?;
    }
    write_file(&out.join("warmstart.csv"), |w| ws.points.write_csv(w))
}

fn run_warm_start(scenario: &Scenario, images: &[BinaryImage], cfg: &WarmStartConfig) -> CliResult<WarmStart> {
    let truth = scenario.truth_params()?;
    let hints: Vec<Vector2<f64>> = scenario.base_hints()?;
    Ok(warm_start(
        images,
        &scenario.rig,
        &hints,
        &scenario.grid,
        truth.base_position,
        truth.base_orientation,
        cfg,
    )?)
}

pub fn reconstruct(a: ReconstructArgs) -> CliResult<()> {
    let scenario = load_scenario(a.scenario.scenario.as_deref(), a.scenario.calib.as_deref())?;
    let cfg = solver_config(&a.solver)?;
    let mode = parse_warmstart(&a.warmstart)?;
    let ws_cfg = load_warmstart_config(a.warmstart_config.as_deref())?;
    let file_points = match &mode {
        WarmStartMode::File(p) => Some(load_warmstart_points(p)?),
        _ => None,
    };
    let images = load_images(&a.images)?;
    check_views(&images, &scenario)?;
    let base = scenario.truth_params()?;
    create_dir(&a.out)?;

    let (theta0, warm_label) = match mode {
        WarmStartMode::None => (None, json!("none")),
        WarmStartMode::Epipolar => {
            let ws = run_warm_start(&scenario, &images, &ws_cfg)?;
            write_warm_start(&a.out, &ws)?;
            (
                Some(ws.guess.theta),
                json!({"mode": "epipolar", "fit_rms_mm": ws.guess.rms}),
            )
        }
        WarmStartMode::File(path) => {
            let pts = file_points.expect("loaded above");
            let guess = fit_initial_guess(&pts, &scenario.grid, base.base_position, base.base_orientation, &ws_cfg)?;
            write_file(&a.out.join("warmstart.csv"), |w| pts.write_csv(w))?;
            (
                Some(guess.theta),
                json!({"mode": "file", "path": path.display().to_string(), "fit_rms_mm": guess.rms}),
            )
        }
    };

    let trace_path = a.out.join("trace.csv");
    let rec = match fit(
        &images,
        &scenario.rig,
        &scenario.grid,
        base.base_position,
        base.base_orientation,
        &cfg,
        theta0.as_deref(),
    ) {
        Ok(r) => r,
        Err(Error::Solver { message, trace }) => {
            if let Some(t) = trace {
                write_file(&trace_path, |w| t.write_csv(w))?;
                return Err(CliError::from(Error::Solver { message, trace: None }).at(&trace_path));
            }
            return Err(Error::Solver { message, trace: None }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let trace = &rec.output.trace;
    let run = json!({
        "method": cfg.method,
        "p": cfg.p,
        "seed": cfg.seed,
        "warm_start": warm_label,
        "stop_reason": trace.reason,
        "converged": trace.converged(),
        "epochs": trace.epoch_costs.len(),
        "initial_cost": trace.initial_cost,
        "final_cost": trace.final_cost(),
        "last_reassignments": trace.rows.last().map(|r| r.reassignments),
        "full_batch_monitor_violations": trace.full_batch_violations(),
    });
    let theta = ThetaFile::new(&rec.params, &scenario.grid, run);
    write_text(
        &a.out.join("theta.json"),
        &(serde_json::to_string_pretty(&theta)? + "\n"),
    )?;
    write_file(&trace_path, |w| trace.write_csv(w))?;
    write_samples(&a.out.join("recon.csv"), &rec.params, &scenario.grid)?;
    Ok(())
}

pub fn warmstart(a: WarmstartArgs) -> CliResult<()> {
    let scenario = load_scenario(a.scenario.scenario.as_deref(), a.scenario.calib.as_deref())?;
    let cfg = load_warmstart_config(a.warmstart_config.as_deref())?;
    let images = load_images(&a.images)?;
    check_views(&images, &scenario)?;
    let ws = run_warm_start(&scenario, &images, &cfg)?;
    create_dir(&a.out)?;
    write_warm_start(&a.out, &ws)?;
    let params = scenario.truth_params()?.with_theta(ws.guess.theta.clone());
    let run = json!({
        "fit_rms_mm": ws.guess.rms,
        "fit_iterations": ws.guess.iterations,
        "correspondences": ws.correspondences.pairs.len(),
        "points": ws.points.len(),
    });
    let theta = ThetaFile::new(&params, &scenario.grid, run);
    write_text(
        &a.out.join("theta_init.json"),
        &(serde_json::to_string_pretty(&theta)? + "\n"),
    )?;
    write_samples(&a.out.join("init.csv"), &params, &scenario.grid)?;
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    if let Some(n) = a.seeds {
        if a.recon.is_some() || a.truth.is_some() || a.points.is_some() {
            return Err(CliError::config(
                "--seeds cannot be combined with --recon, --truth or --points",
            ));
        }
        let scenario = load_scenario(a.scenario.scenario.as_deref(), a.scenario.calib.as_deref())?;
        let solver = solver_config(&a.solver)?;
        let mut experiment = load_experiment(a.experiment_config.as_deref())?;
        experiment.n_seeds = n;
        if let Some(s) = a.solver.seed {
            experiment.root_seed = s;
        } else if a.experiment_config.is_none() {
            experiment.root_seed = scenario.seed;
        }
        match parse_warmstart(&a.warmstart)? {
            WarmStartMode::None => {}
            WarmStartMode::Epipolar => experiment.warm_start = true,
            WarmStartMode::File(_) => {
                return Err(CliError::config("--seeds runs support --warmstart none or epipolar"));
            }
        }
        create_dir(&a.out)?;
        let report = run_experiment(&scenario, &solver, &experiment)?;
        write_text(&a.out.join("report.json"), &(report.to_json()? + "\n"))?;
        write_file(&a.out.join("report.csv"), |w| report.write_csv(w))?;
        if let (Some(mean), Some(min), Some(max)) = (report.mean_mm, report.min_mm, report.max_mm) {
            println!(
                "{} runs, {} failed: mean {mean:.4} mm, min {min:.4} mm, max {max:.4} mm",
                report.runs.len(),
                report.failures
            );
        } else {
            println!("all {} runs failed", report.runs.len());
        }
        return Ok(());
    }

    let recon_path = a
        .recon
        .as_deref()
        .ok_or_else(|| CliError::config("evaluate needs --seeds, or --recon with --truth or --points"))?;
    let (recon_s, recon) = load_points(recon_path)?;
    let result = match (&a.truth, &a.points) {
        (Some(t), None) => {
            let (truth_s, truth) = load_points(t)?;
            if truth.len() != recon.len() {
                return Err(CliError::config(format!(
                    "{} reconstruction samples against {} truth samples",
                    recon.len(),
                    truth.len()
                )));
            }
            if recon_s
                .iter()
                .zip(&truth_s)
                .any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + b.abs()))
            {
                return Err(CliError::config(
                    "reconstruction and truth are sampled at different arc lengths",
                ));
            }
            json!({
                "metric": "recon_to_truth",
                "samples": recon.len(),
                "max_dev_mm": max_distance_to_polyline(&recon, &truth),
            })
        }
        (None, Some(p)) => {
            let (_, points) = load_points(p)?;
            if points.is_empty() {
                return Err(CliError::config(format!("{}: no points", p.display())));
            }
            json!({
                "metric": "points_to_recon",
                "points": points.len(),
                "max_dev_mm": max_distance_to_polyline(&points, &recon),
            })
        }
        _ => {
            return Err(CliError::config(
                "give exactly one of --truth and --points with --recon",
            ))
        }
    };
    if recon.is_empty() {
        return Err(CliError::config(format!("{}: no samples", recon_path.display())));
    }
    create_dir(&a.out)?;
    println!(
        "max deviation {:.6} mm",
        result["max_dev_mm"].as_f64().unwrap_or(f64::NAN)
    );
    write_text(
        &a.out.join("evaluation.json"),
        &(serde_json::to_string_pretty(&result)? + "\n"),
    )
}

pub fn export_plot(a: ExportPlotArgs) -> CliResult<()> {
    let mut loaded = Vec::new();
    for entry in &a.reports {
        let (name, path) = entry
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--report expects NAME=PATH, got {entry:?}")))?;
        loaded.push((name.to_string(), load_report(Path::new(path))?));
    }
    let series: Vec<(&str, _)> = loaded.iter().map(|(n, r)| (n.as_str(), r)).collect();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&a.out, |w| write_plot_csv(&series, w))
}
