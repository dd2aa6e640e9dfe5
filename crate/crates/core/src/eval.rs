//! Scenarios, image synthesis, deviation metrics and repeated-seed runs.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, CameraRig, Distortion};
use crate::curve::{integrate_frame, Axis, CurveParams, CurveSamples, Integrator, SegmentGrid};
use crate::epipolar::{warm_start, WarmStartConfig};
use crate::error::{domain, Error, Result};
use crate::icp::{solve, CameraCurveModel, IcpProblem, SolveOutput, SolverConfig};
use crate::raster::{dilate, extract_pixels, rasterize_curve, BinaryImage};

/// Number of equidistant samples used for evaluation curves.
pub const EVAL_SAMPLES: usize = 1000;

/// Ground-truth curve of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthCurve {
    /// Curvature coefficients, 1/mm and 1/mm^2.
    pub theta: Vec<f64>,
    pub base_position: [f64; 3],
    /// Row-major base orientation.
    pub base_orientation: [[f64; 3]; 3],
}

impl TruthCurve {
    pub fn params(&self) -> Result<CurveParams> {
        CurveParams::new(
            self.theta.clone(),
            Vector3::from(self.base_position),
            Matrix3::from_fn(|i, j| self.base_orientation[i][j]),
        )
    }
}

/// A synthetic experiment: segment grid, ground truth and camera rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub grid: SegmentGrid,
    pub truth: TruthCurve,
    pub rig: CameraRig,
    pub dilation_radius: u32,
    /// Root seed from which per-run seeds are derived.
    pub seed: u64,
    /// Base pixel per view for skeleton ordering. Defaults to the projected
    /// base position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_hints: Option<Vec<[f64; 2]>>,
}

impl Scenario {
    /// Three-segment robot with boundaries at 75, 130 and 190 mm seen by two
    /// 2448 x 2048 cameras.
    pub fn standard() -> Self {
        // tube lengths L and translations beta give L + beta = 190, 130, 75
        let grid = SegmentGrid::new(vec![0.0, 75.0, 130.0, 190.0]).expect("valid grid");
        let mut params = CurveParams::straight(3);
        let profiles: [([f64; 4], [f64; 4]); 3] = [
            ([0.001, 0.000025, 0.003, 0.0], [0.002, 0.0, 0.0015, -0.000015]),
            ([0.003, 0.0, 0.001, -0.00005], [0.0015, 0.00005, 0.005, 0.0]),
            ([0.001, -0.00005, -0.003, 0.0], [0.005, 0.0001, 0.009, 0.0]),
        ];
        for (seg, (ux, uy)) in profiles.iter().enumerate() {
            params.set_hermite(seg, Axis::X, *ux);
            params.set_hermite(seg, Axis::Y, *uy);
        }
        let target = Vector3::new(30.0, -10.0, 95.0);
        let dist = |k1, k2, p1, p2| Distortion {
            k1,
            k2,
            k3: 0.0,
            p1,
            p2,
        };
        let camera = |azimuth_deg: f64, elevation_deg: f64, d: Distortion| {
            let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
            let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            CameraModel::look_at(
                target + dir * 600.0,
                target,
                Vector3::new(0.0, 0.0, 1.0),
                (3800.0, 3800.0),
                (1224.0, 1024.0),
                d,
                (2448, 2048),
            )
            .expect("valid camera")
        };
        let rig = CameraRig::new(vec![
            camera(-40.0, 10.0, dist(-0.08, 0.12, 0.0004, -0.0003)),
            camera(35.0, 15.0, dist(-0.06, 0.09, -0.0002, 0.0005)),
        ])
        .expect("two cameras");
        Self {
            name: "standard".into(),
            grid,
            truth: TruthCurve {
                theta: params.theta,
                base_position: [0.0; 3],
                base_orientation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            },
            rig,
            dilation_radius: 15,
            seed: 20240501,
            base_hints: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.truth.params()?;
        if p.n_segments() != self.grid.n_segments() {
            return Err(Error::Config(format!(
                "truth has {} segments, grid has {}",
                p.n_segments(),
                self.grid.n_segments()
            )));
        }
        if let Some(h) = &self.base_hints {
            if h.len() != self.rig.len() {
                return Err(Error::Config("one base hint per camera is required".into()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn truth_params(&self) -> Result<CurveParams> {
        self.truth.params()
    }

    /// Ground truth at [`EVAL_SAMPLES`] equidistant arc lengths.
    pub fn truth_samples(&self) -> Result<CurveSamples> {
        sample_curve(&self.truth_params()?, &self.grid)
    }

    /// Base pixel per view.
    pub fn base_hints(&self) -> Result<Vec<Vector2<f64>>> {
        match &self.base_hints {
            Some(h) => Ok(h.iter().map(|p| Vector2::new(p[0], p[1])).collect()),
            None => {
                let base = Vector3::from(self.truth.base_position);
                self.rig.cameras.iter().map(|c| c.project(&base)).collect()
            }
        }
    }
}

/// Curve at [`EVAL_SAMPLES`] equidistant arc lengths with the adaptive
/// integrator.
pub fn sample_curve(params: &CurveParams, grid: &SegmentGrid) -> Result<CurveSamples> {
    integrate_frame(
        params,
        grid,
        &grid.equidistant(EVAL_SAMPLES),
        Integrator::dopri5(),
        false,
    )
}

/// Rendered views of a scenario.
#[derive(Debug, Clone)]
pub struct Simulation {
    /// Dilated binary image per camera.
    pub images: Vec<BinaryImage>,
    pub truth: CurveSamples,
    /// Out-of-frame samples per camera.
    pub skipped: Vec<usize>,
}

/// Renders the ground truth into every camera: dense sampling so that
/// consecutive projections are at most one pixel apart, rounding, then
/// dilation with `radius`.
pub fn simulate_with_radius(scenario: &Scenario, radius: u32) -> Result<Simulation> {
    let params = scenario.truth_params()?;
    let truth = sample_curve(&params, &scenario.grid)?;
    let mut n = 4 * EVAL_SAMPLES;
    let dense = loop {
        let dense = integrate_frame(
            &params,
            &scenario.grid,
            &scenario.grid.equidistant(n),
            Integrator::dopri5(),
            false,
        )?;
        let mut worst: f64 = 0.0;
        for cam in &scenario.rig.cameras {
            let proj: Vec<_> = dense.points.iter().filter_map(|p| cam.project(p).ok()).collect();
            for w in proj.windows(2) {
                worst = worst.max((w[1] - w[0]).norm());
            }
        }
        if worst <= 0.5 || n > 1 << 22 {
            break dense;
        }
        n *= 2;
    };
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for cam in &scenario.rig.cameras {
        let r = rasterize_curve(cam, &dense.points)?;
        images.push(dilate(&r.image, radius));
        skipped.push(r.skipped);
    }
    Ok(Simulation { images, truth, skipped })
}

pub fn simulate(scenario: &Scenario) -> Result<Simulation> {
    simulate_with_radius(scenario, scenario.dilation_radius)
}

/// Distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&d) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + d * t)).norm()
}

/// Distance from `p` to a polyline.
pub fn point_polyline_distance(p: &Vector3<f64>, polyline: &[Vector3<f64>]) -> f64 {
    match polyline {
        [] => f64::INFINITY,
        [only] => (p - only).norm(),
        _ => polyline
            .windows(2)
            .map(|w| point_segment_distance(p, &w[0], &w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Largest distance from any of `points` to `polyline`.
pub fn max_distance_to_polyline(points: &[Vector3<f64>], polyline: &[Vector3<f64>]) -> f64 {
    points
        .iter()
        .map(|p| point_polyline_distance(p, polyline))
        .fold(0.0, f64::max)
}

/// Largest distance from the reconstruction samples to the ground-truth
/// polyline, both sampled at [`EVAL_SAMPLES`] arc lengths.
pub fn max_deviation_recon_to_truth(recon: &CurveParams, truth: &CurveParams, grid: &SegmentGrid) -> Result<f64> {
    let r = sample_curve(recon, grid)?;
    let t = sample_curve(truth, grid)?;
    Ok(max_distance_to_polyline(&r.points, &t.points))
}

/// Largest distance from sparse measured points to the reconstruction
/// polyline.
pub fn max_deviation_points_to_recon(points: &[Vector3<f64>], recon: &CurveParams, grid: &SegmentGrid) -> Result<f64> {
    if points.is_empty() {
        return Err(domain("no measured points"));
    }
    let r = sample_curve(recon, grid)?;
    Ok(max_distance_to_polyline(points, &r.points))
}

/// Magnitudes of a random calibration error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    /// Rotation angle about a random axis, rad.
    pub rotation_rad: f64,
    /// Length of a random translation offset, mm.
    pub translation_mm: f64,
    /// Relative change of focal lengths and principal point.
    pub intrinsics_rel: f64,
}

/// Perturbs every camera of `rig` by the given magnitudes in random
/// directions.
pub fn perturb_calibration(rig: &CameraRig, magnitude: &Perturbation, seed: u64) -> Result<CameraRig> {
    let m = magnitude;
    if [m.rotation_rad, m.translation_mm, m.intrinsics_rel]
        .iter()
        .any(|v| !(*v >= 0.0 && v.is_finite()))
    {
        return Err(domain("perturbation magnitudes must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = |rng: &mut ChaCha8Rng| loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if let Some(u) = Unit::try_new(v, 1e-9) {
            return u;
        }
    };
    let cameras = rig
        .cameras
        .iter()
        .map(|c| {
            let axis = direction(&mut rng);
            let shift = direction(&mut rng).into_inner() * m.translation_mm;
            let signs: [f64; 4] = std::array::from_fn(|_| if rng.random::<bool>() { 1.0 } else { -1.0 });
            let mut rotation = c.rotation;
            if m.rotation_rad > 0.0 {
                rotation = Rotation3::from_axis_angle(&axis, m.rotation_rad).into_inner() * rotation;
                rotation = Rotation3::from_matrix(&rotation).into_inner();
            }
            let mut k = c.intrinsics;
            for (s, (i, j)) in signs.iter().zip([(0, 0), (1, 1), (0, 2), (1, 2)]) {
                k[(i, j)] *= 1.0 + s * m.intrinsics_rel;
            }
            CameraModel::new(rotation, c.translation + shift, k, c.distortion, c.image_size)
        })
        .collect::<Result<Vec<_>>>()?;
    CameraRig::new(cameras)
}

/// Solver output together with the fitted curve.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub params: CurveParams,
    pub output: SolveOutput,
}

/// Fits the curve to binary images. `theta0` holds physical curvature
/// coefficients; `None` starts from a straight curve.
pub fn reconstruct(
    images: &[BinaryImage],
    rig: &CameraRig,
    grid: &SegmentGrid,
    base_position: Vector3<f64>,
    base_orientation: Matrix3<f64>,
    cfg: &SolverConfig,
    theta0: Option<&[f64]>,
) -> Result<Reconstruction> {
    cfg.validate()?;
    if images.len() != rig.len() {
        return Err(Error::Config(format!(
            "{} images for {} cameras",
            images.len(),
            rig.len()
        )));
    }
    let model = CameraCurveModel::new(
        rig.clone(),
        grid.clone(),
        base_position,
        base_orientation,
        cfg.n_nodes,
        Integrator::Rk4 {
            substeps: cfg.rk4_substeps,
        },
        cfg.param_scale,
    )?;
    let theta0 = match theta0 {
        Some(t) if t.len() == grid.n_params() => model.from_physical(t),
        Some(t) => {
            return Err(Error::Config(format!(
                "initial parameters have length {}, the grid needs {}",
                t.len(),
                grid.n_params()
            )))
        }
        None => vec![0.0; grid.n_params()],
    };
    let pixels = images.iter().map(extract_pixels).collect::<Result<Vec<_>>>()?;
    let problem = IcpProblem::new(model, pixels, cfg.p, theta0)?;
    let output = solve(&problem, cfg)?;
    Ok(Reconstruction {
        params: problem.model.curve_params(&output.theta),
        output,
    })
}

/// Settings of a repeated-seed experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n_seeds: usize,
    pub root_seed: u64,
    /// Start from the epipolar warm start instead of a straight curve.
    pub warm_start: bool,
    pub warm_start_config: WarmStartConfig,
    /// Calibration error applied to the rig used for reconstruction.
    pub perturbation: Option<Perturbation>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_seeds: 10,
            root_seed: 12345,
            warm_start: false,
            warm_start_config: WarmStartConfig::default(),
            perturbation: None,
        }
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// `None` when the run failed.
    pub max_dev_mm: Option<f64>,
    pub seconds: f64,
    pub converged: bool,
    pub final_cost: Option<f64>,
    pub epochs: usize,
    pub error: Option<String>,
}

/// Per-seed results and their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub solver: SolverConfig,
    pub experiment: ExperimentConfig,
    pub runs: Vec<SeedRun>,
    pub mean_mm: Option<f64>,
    pub min_mm: Option<f64>,
    pub max_mm: Option<f64>,
    pub failures: usize,
}

impl RunReport {
    fn summarize(scenario: String, solver: SolverConfig, experiment: ExperimentConfig, runs: Vec<SeedRun>) -> Self {
        let devs: Vec<f64> = runs.iter().filter_map(|r| r.max_dev_mm).collect();
        let n = devs.len() as f64;
        let (mean_mm, min_mm, max_mm) = if devs.is_empty() {
            (None, None, None)
        } else {
            (
                Some(devs.iter().sum::<f64>() / n),
                Some(devs.iter().copied().fold(f64::INFINITY, f64::min)),
                Some(devs.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            )
        };
        Self {
            scenario,
            solver,
            experiment,
            failures: runs.iter().filter(|r| r.error.is_some()).count(),
            runs,
            mean_mm,
            min_mm,
            max_mm,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `seed,max_dev_mm,seconds,converged`; failed runs have `NaN`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "seed,max_dev_mm,seconds,converged")?;
        for r in &self.runs {
            let dev = r.max_dev_mm.map_or("NaN".to_string(), |d| format!("{d:.16e}"));
            writeln!(out, "{},{dev},{:.6},{}", r.seed, r.seconds, r.converged)?;
        }
        Ok(())
    }
}

/// Long-format series for box plots: `series,seed,max_dev_mm`.
pub fn write_plot_csv<W: std::io::Write>(series: &[(&str, &RunReport)], mut out: W) -> Result<()> {
    writeln!(out, "series,seed,max_dev_mm")?;
    for (name, report) in series {
        if name.contains(',') || name.contains('\n') {
            return Err(domain("series names may not contain commas or newlines"));
        }
        for r in &report.runs {
            if let Some(d) = r.max_dev_mm {
                writeln!(out, "{name},{},{d:.16e}", r.seed)?;
            }
        }
    }
    Ok(())
}

/// Seeds derived from `root`.
pub fn derive_seeds(root: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    (0..n).map(|_| rng.random()).collect()
}

/// Runs the pipeline once per derived seed: images from the scenario,
/// optional calibration error and warm start, solve, deviation from the
/// ground truth. Failed runs are recorded in the report.
pub fn run_experiment(scenario: &Scenario, solver: &SolverConfig, experiment: &ExperimentConfig) -> Result<RunReport> {
    if experiment.n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    scenario.validate()?;
    solver.validate()?;
    let sim = simulate(scenario)?;
    let truth = scenario.truth_params()?;
    let hints = scenario.base_hints()?;
    let seeds = derive_seeds(experiment.root_seed, experiment.n_seeds);
    let one = |seed: u64| -> SeedRun {
        let clock = crate::icp::Stopwatch::start();
        let result = (|| -> Result<(f64, SolveOutput)> {
            let rig = match &experiment.perturbation {
                Some(m) => perturb_calibration(&scenario.rig, m, seed ^ 0x9e37_79b9_7f4a_7c15)?,
                None => scenario.rig.clone(),
            };
            let theta0 = if experiment.warm_start {
                let ws = warm_start(
                    &sim.images,
                    &rig,
                    &hints,
                    &scenario.grid,
                    truth.base_position,
                    truth.base_orientation,
                    &experiment.warm_start_config,
                )?;
                Some(ws.guess.theta)
            } else {
                None
            };
            let cfg = SolverConfig { seed, ..solver.clone() };
            let rec = reconstruct(
                &sim.images,
                &rig,
                &scenario.grid,
                truth.base_position,
                truth.base_orientation,
                &cfg,
                theta0.as_deref(),
            )?;
            let dev = max_deviation_recon_to_truth(&rec.params, &truth, &scenario.grid)?;
            Ok((dev, rec.output))
        })();
        let seconds = clock.seconds();
        match result {
            Ok((dev, out)) => SeedRun {
                seed,
                max_dev_mm: Some(dev),
                seconds,
                converged: out.trace.converged(),
                final_cost: Some(out.trace.final_cost()),
                epochs: out.trace.epoch_costs.len(),
                error: None,
            },
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                SeedRun {
                    seed,
                    max_dev_mm: None,
                    seconds,
                    converged: false,
                    final_cost: None,
                    epochs: 0,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    #[cfg(feature = "parallel")]
    let runs: Vec<SeedRun> = {
        use rayon::prelude::*;
        seeds.par_iter().map(|&s| one(s)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<SeedRun> = seeds.iter().map(|&s| one(s)).collect();
    Ok(RunReport::summarize(
        scenario.name.clone(),
        solver.clone(),
        experiment.clone(),
        runs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_boundaries_follow_tube_lengths() {
        let lengths = [200.0, 140.0, 80.0];
        let shifts = [-10.0, -10.0, -5.0];
        let mut ends: Vec<f64> = lengths.iter().zip(shifts).map(|(l, b)| l + b).collect();
        ends.push(0.0);
        ends.sort_by(f64::total_cmp);
        let s = Scenario::standard();
        assert_eq!(s.grid.boundaries(), &ends[..]);
        s.validate().unwrap();
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = Scenario::standard();
        let back = Scenario::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(Scenario::from_json(&s.to_json().unwrap().replacen("\"name\"", "\"nme\"", 1)).is_err());
    }

    #[test]
    fn rigid_offset_deviation() {
        let grid = SegmentGrid::new(vec![0.0, 100.0]).unwrap();
        let truth = CurveParams::straight(1);
        let mut shifted = truth.clone();
        shifted.base_position = Vector3::new(1.0, 0.0, 0.0);
        assert!((max_deviation_recon_to_truth(&shifted, &truth, &grid).unwrap() - 1.0).abs() < 1e-12);
        assert!(max_deviation_recon_to_truth(&truth, &truth, &grid).unwrap() < 1e-6);
        let off = [Vector3::new(0.0, 2.0, 50.0)];
        assert!((max_deviation_points_to_recon(&off, &truth, &grid).unwrap() - 2.0).abs() < 1e-12);
        assert!(max_deviation_points_to_recon(&[], &truth, &grid).is_err());
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let s = Scenario::standard();
        let same = perturb_calibration(&s.rig, &Perturbation::default(), 3).unwrap();
        assert_eq!(same, s.rig);
    }
}
