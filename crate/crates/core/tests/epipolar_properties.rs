use backbone_recon::camera::fundamental_matrix;
use backbone_recon::curve::{integrate_frame, CurveParams, Integrator, SegmentGrid};
use backbone_recon::epipolar::*;
use backbone_recon::eval::{point_polyline_distance, simulate, simulate_with_radius, Scenario};
use backbone_recon::raster::{dilate, BinaryImage};
use backbone_recon::Error;
use nalgebra::{Matrix3, Vector2, Vector3};
use proptest::prelude::*;

fn bar(width: u32, height: u32, u0: u32, u1: u32, v: u32, radius: u32) -> BinaryImage {
    let mut img = BinaryImage::new(width, height).unwrap();
    for u in u0..=u1 {
        img.set(u, v, true);
    }
    dilate(&img, radius)
}

#[test]
fn thick_bar_thins_to_its_center_line() {
    let img = bar(400, 120, 100, 300, 60, 15);
    let px = skeletonize(&img, &WarmStartConfig::default()).unwrap();
    assert!(px.iter().all(|p| p[1] == 60), "{px:?}");
    let umin = px.iter().map(|p| p[0]).min().unwrap();
    let umax = px.iter().map(|p| p[0]).max().unwrap();
    assert!(umin.abs_diff(100) <= 1 && umax.abs_diff(300) <= 1, "{umin}..{umax}");
    assert_eq!(px.len() as u32, umax - umin + 1);
}

#[test]
fn black_image_is_rejected() {
    let img = BinaryImage::new(50, 50).unwrap();
    assert!(matches!(
        skeletonize(&img, &WarmStartConfig::default()),
        Err(Error::EmptyImage(_))
    ));
}

#[test]
fn two_large_components_are_a_segmentation_error() {
    let mut img = bar(400, 200, 50, 350, 50, 10);
    let other = bar(400, 200, 50, 350, 150, 10);
    for (u, v) in other.white_pixels() {
        img.set(u, v, true);
    }
    assert!(matches!(
        skeletonize(&img, &WarmStartConfig::default()),
        Err(Error::Segmentation(_))
    ));
}

#[test]
fn specks_are_removed_by_opening() {
    let mut img = bar(400, 200, 50, 350, 100, 10);
    for k in 0..40 {
        img.set(10 + 9 * k, 20, true);
    }
    let cfg = WarmStartConfig {
        opening_radius: 2,
        ..Default::default()
    };
    let px = skeletonize(&img, &cfg).unwrap();
    assert!(px.iter().all(|p| p[1] == 100));
}

#[test]
fn dilated_curve_skeleton_is_close_to_the_curve() {
    let scenario = Scenario::standard();
    let thin = simulate_with_radius(&scenario, 0).unwrap();
    let thick = simulate(&scenario).unwrap();
    for (a, b) in thin.images.iter().zip(&thick.images) {
        let skel = skeletonize(b, &WarmStartConfig::default()).unwrap();
        let curve: Vec<Vector2<f64>> = a
            .white_pixels()
            .iter()
            .map(|&(u, v)| Vector2::new(u as f64, v as f64))
            .collect();
        let skel: Vec<Vector2<f64>> = skel.iter().map(|p| Vector2::new(p[0] as f64, p[1] as f64)).collect();
        let directed = |from: &[Vector2<f64>], to: &[Vector2<f64>]| {
            from.iter()
                .map(|p| to.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max)
        };
        let h = directed(&skel, &curve).max(directed(&curve, &skel));
        assert!(h <= 1.5, "Hausdorff distance {h}");
    }
}

fn line(n: u32) -> Vec<[u32; 2]> {
    (0..n).map(|u| [10 + u, 20]).collect()
}

#[test]
fn straight_path_is_ordered_from_the_hint() {
    let s = order_path(&line(30), Vector2::new(0.0, 20.0), 0).unwrap();
    assert_eq!(s.pixels, line(30));
    let s = order_path(&line(30), Vector2::new(100.0, 20.0), 0).unwrap();
    assert_eq!(s.pixels.first(), Some(&[39, 20]));
    assert!(s.is_path());
}

#[test]
fn longest_path_skips_a_spur() {
    let mut px = line(60);
    for k in 1..6 {
        px.push([40, 20 + k]);
    }
    let s = order_path(&px, Vector2::new(10.0, 20.0), 0).unwrap();
    assert_eq!(s.pixels, line(60));
}

#[test]
fn c_shape_follows_the_curve() {
    let mut px = Vec::new();
    for k in 0..400 {
        let a = 0.3 + 5.7 * k as f64 / 399.0;
        let p = [
            (100.0 + 60.0 * a.cos()).round() as u32,
            (100.0 + 60.0 * a.sin()).round() as u32,
        ];
        if !px.contains(&p) {
            px.push(p);
        }
    }
    let s = order_path(
        &px,
        Vector2::new(100.0 + 60.0 * 0.3f64.cos(), 100.0 + 60.0 * 0.3f64.sin()),
        0,
    )
    .unwrap();
    assert!(s.is_path());
    assert!(s.len() as f64 > 0.9 * px.len() as f64);
    let end = s.pixels.last().unwrap();
    let tip = Vector2::new(100.0 + 60.0 * 6.0f64.cos(), 100.0 + 60.0 * 6.0f64.sin());
    assert!((Vector2::new(end[0] as f64, end[1] as f64) - tip).norm() < 2.0);
}

#[test]
fn disconnected_skeleton_reports_component_sizes() {
    let mut px = line(10);
    px.extend((0..4).map(|u| [100 + u, 50]));
    match order_path(&px, Vector2::zeros(), 0) {
        Err(Error::DisconnectedSkeleton(sizes)) => assert_eq!(sizes, vec![10, 4]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn small_cycles_are_broken() {
    // a 2x2 block is a cycle of four pixels
    let px = vec![[10, 10], [11, 10], [10, 11], [11, 11], [12, 12], [13, 13], [14, 14]];
    let s = order_path(&px, Vector2::new(9.0, 9.0), 0).unwrap();
    assert!(s.is_path());
    assert_eq!(s.pixels.last(), Some(&[14, 14]));
}

#[test]
fn skeleton_csv() {
    let s = Skeleton {
        view: 0,
        pixels: vec![[3, 4], [4, 5]],
    };
    let mut buf = Vec::new();
    s.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "order,u,v\n0,3,4\n1,4,5\n");
}

fn default_skeletons() -> (Scenario, Skeleton, Skeleton) {
    let scenario = Scenario::standard();
    let sim = simulate(&scenario).unwrap();
    let hints = scenario.base_hints().unwrap();
    let cfg = WarmStartConfig::default();
    let mut sk = (0..2).map(|v| order_path(&skeletonize(&sim.images[v], &cfg).unwrap(), hints[v], v).unwrap());
    let left = sk.next().unwrap();
    let right = sk.next().unwrap();
    (scenario, left, right)
}

#[test]
fn epipolar_matches_triangulate_onto_the_curve() {
    let (scenario, left, right) = default_skeletons();
    let (lc, rc) = (&scenario.rig.cameras[0], &scenario.rig.cameras[1]);
    let cfg = WarmStartConfig::default();
    let corr = correspond_epipolar(&left, &right, lc, rc, &cfg).unwrap();
    assert!(corr.pairs.windows(2).all(|w| w[1].1 >= w[0].1 && w[1].0 > w[0].0));
    let truth = scenario.truth_samples().unwrap();
    let f = fundamental_matrix(lc, rc).unwrap();
    let (lp, rp) = (left.points(), right.points());
    let mut checked = 0;
    for &(i, k) in &corr.pairs {
        // skip matches where the epipolar line runs along the right path
        let (a, b) = (k.saturating_sub(5), (k + 5).min(rp.len() - 1));
        let tangent = (rc.ideal_pixel(rp[b]).unwrap() - rc.ideal_pixel(rp[a]).unwrap()).normalize();
        let l = f * lc.ideal_pixel(lp[i]).unwrap().push(1.0);
        let dir = Vector2::new(-l.y, l.x).normalize();
        if (tangent.x * dir.y - tangent.y * dir.x).abs() < 0.3 {
            continue;
        }
        let t = backbone_recon::camera::triangulate(&[lc, rc], &[lp[i], rp[k]]).unwrap();
        let d = point_polyline_distance(&t.point, &truth.points);
        assert!(d <= 0.5, "pair ({i}, {k}) is {d} mm off");
        checked += 1;
    }
    assert!(checked > corr.pairs.len() / 2, "{checked} of {}", corr.pairs.len());
}

#[test]
fn reversed_right_skeleton_is_an_orientation_mismatch() {
    let (scenario, left, mut right) = default_skeletons();
    right.pixels.reverse();
    let r = correspond_epipolar(
        &left,
        &right,
        &scenario.rig.cameras[0],
        &scenario.rig.cameras[1],
        &WarmStartConfig::default(),
    );
    assert!(matches!(r, Err(Error::OrientationMismatch)), "{r:?}");
}

#[test]
fn too_few_matches_are_rejected() {
    let (scenario, left, right) = default_skeletons();
    let short = Skeleton {
        view: 0,
        pixels: left.pixels[..5].to_vec(),
    };
    let r = correspond_epipolar(
        &short,
        &right,
        &scenario.rig.cameras[0],
        &scenario.rig.cameras[1],
        &WarmStartConfig::default(),
    );
    assert!(
        matches!(r, Err(Error::InsufficientCorrespondences { required: 8, .. })),
        "{r:?}"
    );
}

#[test]
fn collinear_points_have_unit_arc_lengths() {
    let pts: Vec<Vector3<f64>> = (0..6).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
    let ws = WarmStartPoints::from_points(&pts, 0.0).unwrap();
    assert_eq!(ws.arc_lengths, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
}

#[test]
fn chord_sum_approaches_the_quarter_circle() {
    let r = 50.0;
    let exact = std::f64::consts::FRAC_PI_2 * r;
    let mut last = 0.0;
    for n in [4, 16, 64, 256, 1024] {
        let pts: Vec<Vector3<f64>> = (0..=n)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64 / n as f64;
                Vector3::new(r * a.cos(), r * a.sin(), 0.0)
            })
            .collect();
        let s = *WarmStartPoints::from_points(&pts, 0.0)
            .unwrap()
            .arc_lengths
            .last()
            .unwrap();
        assert!(s < exact && s > last);
        last = s;
    }
    assert!(exact - last < 1e-4);
}

#[test]
fn warm_start_csv_round_trip() {
    let pts: Vec<Vector3<f64>> = (0..5)
        .map(|i| Vector3::new(0.1 * i as f64, 1.0 / 3.0, i as f64))
        .collect();
    let ws = WarmStartPoints::from_points(&pts, 0.0).unwrap();
    let mut buf = Vec::new();
    ws.write_csv(&mut buf).unwrap();
    assert!(buf.starts_with(b"s_mm,x_mm,y_mm,z_mm\n"));
    assert_eq!(WarmStartPoints::read_csv(&buf[..]).unwrap(), ws);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arc_lengths_are_cumulative_chords(
        raw in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 2..60),
        repeat in prop::collection::vec(any::<bool>(), 60),
        spacing in prop::sample::select(vec![0.0, 0.5, 2.0]),
    ) {
        let mut pts = Vec::new();
        for (k, &(x, y, z)) in raw.iter().enumerate() {
            let p = Vector3::new(x, y, z);
            pts.push(p);
            if repeat[k] {
                pts.push(p);
            }
        }
        let ws = WarmStartPoints::from_points(&pts, spacing).unwrap();
        prop_assert_eq!(ws.arc_lengths[0], 0.0);
        for k in 1..ws.len() {
            let d = (ws.points[k] - ws.points[k - 1]).norm();
            prop_assert!(d > 0.0 && d >= spacing);
            prop_assert_eq!(ws.arc_lengths[k], ws.arc_lengths[k - 1] + d);
        }
    }
}

fn fit_grid() -> SegmentGrid {
    SegmentGrid::new(vec![0.0, 75.0, 130.0, 190.0]).unwrap()
}

#[test]
fn fit_recovers_known_parameters() {
    let grid = fit_grid();
    let truth = Scenario::standard().truth_params().unwrap();
    let arc: Vec<f64> = (0..=95).map(|i| 2.0 * i as f64).collect();
    let pts = integrate_frame(&truth, &grid, &arc, Integrator::rk4(), false)
        .unwrap()
        .points;
    let ws = WarmStartPoints {
        arc_lengths: arc,
        points: pts,
    };
    let g = fit_initial_guess(
        &ws,
        &grid,
        Vector3::zeros(),
        Matrix3::identity(),
        &WarmStartConfig::default(),
    )
    .unwrap();
    assert!(g.rms < 1e-6, "rms {}", g.rms);
    assert!(g.history.windows(2).all(|w| w[1] <= w[0]));
    let fitted = CurveParams::new(g.theta.clone(), Vector3::zeros(), Matrix3::identity()).unwrap();
    let dev = backbone_recon::eval::max_deviation_recon_to_truth(&fitted, &truth, &grid).unwrap();
    assert!(dev < 1e-4, "deviation {dev}");
}

#[test]
fn straight_points_fit_zero_curvature() {
    let grid = fit_grid();
    let pts: Vec<Vector3<f64>> = (0..=19).map(|i| Vector3::new(0.0, 0.0, 10.0 * i as f64)).collect();
    let ws = WarmStartPoints::from_points(&pts, 0.0).unwrap();
    let g = fit_initial_guess(
        &ws,
        &grid,
        Vector3::zeros(),
        Matrix3::identity(),
        &WarmStartConfig::default(),
    )
    .unwrap();
    assert!(g.theta.iter().all(|t| t.abs() < 1e-9), "{:?}", g.theta);
    assert!(g.rms < 1e-9);
}

#[test]
fn overlong_points_are_rejected_and_slight_excess_clamped() {
    let grid = fit_grid();
    let too_long: Vec<Vector3<f64>> = (0..=20).map(|i| Vector3::new(0.0, 0.0, 10.0 * i as f64)).collect();
    let ws = WarmStartPoints::from_points(&too_long, 0.0).unwrap();
    assert!(fit_initial_guess(
        &ws,
        &grid,
        Vector3::zeros(),
        Matrix3::identity(),
        &WarmStartConfig::default()
    )
    .is_err());
    let slight: Vec<Vector3<f64>> = (0..=20).map(|i| Vector3::new(0.0, 0.0, 9.5 * i as f64)).collect();
    let ws = WarmStartPoints::from_points(&slight, 0.0).unwrap();
    let g = fit_initial_guess(
        &ws,
        &grid,
        Vector3::zeros(),
        Matrix3::identity(),
        &WarmStartConfig::default(),
    )
    .unwrap();
    assert!(g.rms < 1e-9);
}

#[test]
fn full_pipeline_on_the_default_scenario() {
    let scenario = Scenario::standard();
    let sim = simulate(&scenario).unwrap();
    let truth = scenario.truth_params().unwrap();
    let ws = warm_start(
        &sim.images,
        &scenario.rig,
        &scenario.base_hints().unwrap(),
        &scenario.grid,
        truth.base_position,
        truth.base_orientation,
        &WarmStartConfig::default(),
    )
    .unwrap();
    assert!(ws.skeletons.iter().all(Skeleton::is_path));
    let last = *ws.points.arc_lengths.last().unwrap();
    assert!(last <= 1.05 * 190.0 && last > 150.0);
    let guess = truth.with_theta(ws.guess.theta.clone());
    let dev = backbone_recon::eval::max_deviation_recon_to_truth(&guess, &truth, &scenario.grid).unwrap();
    assert!(dev < 3.0, "warm-start deviation {dev}");
}
