use backbone_recon::camera::CameraRig;
use backbone_recon::curve::CurveParams;
use backbone_recon::eval::*;
use backbone_recon::icp::SolverConfig;
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn brute_force_distance(points: &[Vector3<f64>], polyline: &[Vector3<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for p in points {
        let mut best = f64::INFINITY;
        for w in polyline.windows(2) {
            for k in 0..=2000 {
                let q = w[0] + (w[1] - w[0]) * (k as f64 / 2000.0);
                best = best.min((p - q).norm());
            }
        }
        worst = worst.max(best);
    }
    worst
}

fn vec3() -> impl Strategy<Value = Vector3<f64>> {
    (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn polyline_distance_matches_dense_sampling(
        points in prop::collection::vec(vec3(), 1..5),
        polyline in prop::collection::vec(vec3(), 2..6),
    ) {
        let fast = max_distance_to_polyline(&points, &polyline);
        let slow = brute_force_distance(&points, &polyline);
        // sampling step is at most 0.1 mm
        prop_assert!(fast <= slow + 1e-12);
        prop_assert!(slow - fast <= 0.1);
    }

    #[test]
    fn deviation_ignores_a_common_translation(
        shift in vec3(),
        theta in prop::collection::vec(-0.004..0.004f64, 24),
    ) {
        let s = Scenario::standard();
        let truth = s.truth_params().unwrap();
        let recon = CurveParams::new(theta, truth.base_position, truth.base_orientation).unwrap();
        let d0 = max_deviation_recon_to_truth(&recon, &truth, &s.grid).unwrap();
        let moved = |c: &CurveParams| {
            CurveParams::new(c.theta.clone(), c.base_position + shift, c.base_orientation).unwrap()
        };
        let d1 = max_deviation_recon_to_truth(&moved(&recon), &moved(&truth), &s.grid).unwrap();
        prop_assert!((d0 - d1).abs() <= 1e-9 * (1.0 + d0));
    }

    #[test]
    fn larger_rotation_error_moves_projections_further(seed in any::<u64>(), a in 1e-4..0.02f64) {
        let s = Scenario::standard();
        let truth = s.truth_samples().unwrap();
        let shift = |rig: &CameraRig| -> f64 {
            let mut worst: f64 = 0.0;
            for (c0, c1) in s.rig.cameras.iter().zip(&rig.cameras) {
                for p in truth.points.iter().step_by(50) {
                    worst = worst.max((c0.project(p).unwrap() - c1.project(p).unwrap()).norm());
                }
            }
            worst
        };
        let small = Perturbation { rotation_rad: a, ..Default::default() };
        let large = Perturbation { rotation_rad: 2.0 * a, ..Default::default() };
        let d_small = shift(&perturb_calibration(&s.rig, &small, seed).unwrap());
        let d_large = shift(&perturb_calibration(&s.rig, &large, seed).unwrap());
        prop_assert!(d_small > 0.0);
        prop_assert!(d_large > d_small);
    }
}

#[test]
fn straight_curve_deviation_has_a_closed_form() {
    let s = Scenario::standard();
    let a = CurveParams::straight(s.grid.n_segments());
    let tilted = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
    let b = CurveParams::new(a.theta.clone(), Vector3::new(3.0, 4.0, 0.0), tilted).unwrap();
    let d = max_deviation_recon_to_truth(&b, &a, &s.grid).unwrap();
    assert!((d - 5.0).abs() < 1e-9);
}

fn quick_solver() -> SolverConfig {
    SolverConfig {
        epochs: 4,
        alpha_schedule: vec![(4, 0.2)],
        ..SolverConfig::default()
    }
}

fn strip_timing(mut r: RunReport) -> RunReport {
    for run in &mut r.runs {
        run.seconds = 0.0;
    }
    r
}

#[test]
fn experiments_are_reproducible() {
    let s = Scenario::standard();
    let exp = ExperimentConfig {
        n_seeds: 2,
        root_seed: 7,
        ..Default::default()
    };
    let a = run_experiment(&s, &quick_solver(), &exp).unwrap();
    let b = run_experiment(&s, &quick_solver(), &exp).unwrap();
    assert_eq!(a.failures, 0);
    assert_eq!(a.runs.len(), 2);
    assert_ne!(a.runs[0].seed, a.runs[1].seed);
    assert_eq!(strip_timing(a.clone()), strip_timing(b));
    let mean = a.mean_mm.unwrap();
    assert!(a.min_mm.unwrap() <= mean && mean <= a.max_mm.unwrap());
    assert!(mean < 2.0, "mean {mean} mm");

    let mut csv = Vec::new();
    a.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,max_dev_mm,seconds,converged");
    assert_eq!(lines.len(), 3);
    let dev: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(dev, a.runs[0].max_dev_mm.unwrap());

    let json: RunReport = serde_json::from_str(&a.to_json().unwrap()).unwrap();
    assert_eq!(json, a);

    let mut plot = Vec::new();
    write_plot_csv(&[("one_step", &a)], &mut plot).unwrap();
    let plot = String::from_utf8(plot).unwrap();
    assert!(plot.starts_with("series,seed,max_dev_mm\none_step,"));
    assert_eq!(plot.lines().count(), 3);
    assert!(write_plot_csv(&[("a,b", &a)], Vec::new()).is_err());
}

#[test]
fn seeds_come_from_the_root_seed() {
    assert_eq!(derive_seeds(1, 5), derive_seeds(1, 5));
    assert_eq!(derive_seeds(1, 3), derive_seeds(1, 5)[..3].to_vec());
    assert_ne!(derive_seeds(1, 3), derive_seeds(2, 3));
}

#[test]
fn zero_seeds_is_a_config_error() {
    let s = Scenario::standard();
    let exp = ExperimentConfig {
        n_seeds: 0,
        ..Default::default()
    };
    assert!(run_experiment(&s, &quick_solver(), &exp).is_err());
}

#[test]
fn reconstruct_rejects_mismatched_inputs() {
    let s = Scenario::standard();
    let sim = simulate(&s).unwrap();
    let t = s.truth_params().unwrap();
    let cfg = SolverConfig::default();
    let one = &sim.images[..1];
    assert!(reconstruct(one, &s.rig, &s.grid, t.base_position, t.base_orientation, &cfg, None).is_err());
    let short = vec![0.0; 5];
    assert!(reconstruct(
        &sim.images,
        &s.rig,
        &s.grid,
        t.base_position,
        t.base_orientation,
        &cfg,
        Some(&short)
    )
    .is_err());
}

#[test]
fn starting_at_the_truth_stays_there() {
    let s = Scenario::standard();
    let sim = simulate(&s).unwrap();
    let t = s.truth_params().unwrap();
    let cfg = SolverConfig {
        epochs: 1,
        alpha_schedule: vec![(1, 1e-5)],
        ..SolverConfig::default()
    };
    let rec = reconstruct(
        &sim.images,
        &s.rig,
        &s.grid,
        t.base_position,
        t.base_orientation,
        &cfg,
        Some(&t.theta),
    )
    .unwrap();
    let cold = reconstruct(
        &sim.images,
        &s.rig,
        &s.grid,
        t.base_position,
        t.base_orientation,
        &cfg,
        None,
    )
    .unwrap();
    let (warm, cold) = (rec.output.trace.initial_cost, cold.output.trace.initial_cost);
    assert!(warm < 0.05 * cold, "{warm} vs {cold}");
    let d = max_deviation_recon_to_truth(&rec.params, &t, &s.grid).unwrap();
    assert!(d < 0.5, "{d}");
}

#[test]
fn epipolar_residual_grows_with_calibration_error() {
    use backbone_recon::camera::fundamental_matrix;
    let s = Scenario::standard();
    let truth = s.truth_samples().unwrap();
    let residual = |rig: &CameraRig| -> f64 {
        let f = fundamental_matrix(&rig.cameras[0], &rig.cameras[1]).unwrap();
        let h = |v: nalgebra::Vector2<f64>| Vector3::new(v.x, v.y, 1.0).normalize();
        truth
            .points
            .iter()
            .step_by(20)
            .map(|p| {
                let l = h(s.rig.cameras[0]
                    .ideal_pixel(s.rig.cameras[0].project(p).unwrap())
                    .unwrap());
                let r = h(s.rig.cameras[1]
                    .ideal_pixel(s.rig.cameras[1].project(p).unwrap())
                    .unwrap());
                (r.transpose() * f * l)[0].abs()
            })
            .sum::<f64>()
    };
    let base = residual(&s.rig);
    for seed in 0..10 {
        let mut last = base;
        for scale in [1.0, 2.0, 4.0, 8.0] {
            let m = Perturbation {
                rotation_rad: 1e-3 * scale,
                translation_mm: 0.5 * scale,
                intrinsics_rel: 1e-3 * scale,
            };
            let r = residual(&perturb_calibration(&s.rig, &m, seed).unwrap());
            assert!(r > last, "seed {seed}, scale {scale}: {r} <= {last}");
            last = r;
        }
    }
}

#[test]
fn calibration_error_hurts_on_average() {
    let s = Scenario::standard();
    let clean = ExperimentConfig {
        n_seeds: 10,
        root_seed: 3,
        ..Default::default()
    };
    let noisy = ExperimentConfig {
        perturbation: Some(Perturbation {
            rotation_rad: 2e-3,
            translation_mm: 1.0,
            intrinsics_rel: 2e-3,
        }),
        ..clean.clone()
    };
    let cfg = SolverConfig::default();
    let a = run_experiment(&s, &cfg, &clean).unwrap();
    let b = run_experiment(&s, &cfg, &noisy).unwrap();
    assert_eq!(a.failures + b.failures, 0);
    assert!(
        b.mean_mm.unwrap() >= a.mean_mm.unwrap(),
        "{:?} vs {:?}",
        b.mean_mm,
        a.mean_mm
    );
}
