//! Warm start from stereo skeletons: thinning, base-to-tip ordering,
//! epipolar matching, triangulation and a least-squares curve fit.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{fundamental_matrix, triangulate, CameraModel, CameraRig};
use crate::curve::{integrate_frame, read_points_csv, write_points_csv, CurveParams, Integrator, SegmentGrid};
use crate::error::{domain, Error, Result};
use crate::icp::{levenberg_marquardt, LmConfig, ParamScale};
use crate::raster::{open, BinaryImage};

/// Settings of the warm-start pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartConfig {
    /// Opening radius applied before thinning; 0 disables it.
    pub opening_radius: u32,
    /// A second component at least this fraction of the largest one is a
    /// segmentation error; smaller ones are dropped.
    pub max_secondary_fraction: f64,
    /// Pixel distance to the epipolar line for a candidate, px.
    pub tau: f64,
    /// Path indices after the previous match that may be searched.
    pub window: usize,
    pub min_pairs: usize,
    /// Triangulated points closer than this to the previously kept one are
    /// dropped before chord lengths are accumulated, mm.
    pub min_spacing: f64,
    pub max_iter: usize,
    /// RMS fit residual above which a warning is logged, mm.
    pub max_rms: f64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            opening_radius: 0,
            max_secondary_fraction: 0.05,
            tau: 1.5,
            window: 50,
            min_pairs: 8,
            min_spacing: 2.0,
            max_iter: 500,
            max_rms: 2.0,
        }
    }
}

/// One-pixel-wide backbone of a view, ordered base to tip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skeleton {
    pub view: usize,
    pub pixels: Vec<[u32; 2]>,
}

impl Skeleton {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Consecutive pixels are 8-neighbors and no pixel repeats.
    pub fn is_path(&self) -> bool {
        let adjacent = self.pixels.windows(2).all(|w| {
            let du = w[0][0].abs_diff(w[1][0]);
            let dv = w[0][1].abs_diff(w[1][1]);
            du <= 1 && dv <= 1 && du + dv > 0
        });
        let mut seen = std::collections::HashSet::new();
        adjacent && self.pixels.iter().all(|p| seen.insert(*p))
    }

    pub fn points(&self) -> Vec<Vector2<f64>> {
        self.pixels
            .iter()
            .map(|p| Vector2::new(p[0] as f64, p[1] as f64))
            .collect()
    }

    /// Writes `order,u,v`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "order,u,v")?;
        for (i, p) in self.pixels.iter().enumerate() {
            writeln!(out, "{i},{},{}", p[0], p[1])?;
        }
        Ok(())
    }
}

const NEIGHBORS: [(i64, i64); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

/// Keeps the largest 8-connected white component.
fn dominant_component(img: &BinaryImage, max_secondary_fraction: f64) -> Result<Vec<(u32, u32)>> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut label = vec![0u32; (w * h) as usize];
    let mut components: Vec<Vec<(u32, u32)>> = Vec::new();
    for (u, v) in img.white_pixels() {
        if label[(v as i64 * w + u as i64) as usize] != 0 {
            continue;
        }
        let id = components.len() as u32 + 1;
        let mut members = vec![(u, v)];
        label[(v as i64 * w + u as i64) as usize] = id;
        let mut head = 0;
        while head < members.len() {
            let (cu, cv) = members[head];
            head += 1;
            for (du, dv) in NEIGHBORS {
                let (nu, nv) = (cu as i64 + du, cv as i64 + dv);
                if nu < 0 || nv < 0 || nu >= w || nv >= h {
                    continue;
                }
                let idx = (nv * w + nu) as usize;
                if label[idx] == 0 && img.get(nu as u32, nv as u32) {
                    label[idx] = id;
                    members.push((nu as u32, nv as u32));
                }
            }
        }
        components.push(members);
    }
    if components.is_empty() {
        return Err(Error::EmptyImage("no white pixels to skeletonize".into()));
    }
    components.sort_by_key(|c| std::cmp::Reverse(c.len()));
    if components.len() > 1 && components[1].len() as f64 >= max_secondary_fraction * components[0].len() as f64 {
        let sizes: Vec<usize> = components.iter().map(Vec::len).take(5).collect();
        return Err(Error::Segmentation(format!(
            "more than one large white component (sizes {sizes:?})"
        )));
    }
    Ok(components.swap_remove(0))
}

/// Two-subiteration thinning of one component, returned in row-major order.
fn thin(pixels: &[(u32, u32)]) -> Vec<[u32; 2]> {
    let umin = pixels.iter().map(|p| p.0).min().unwrap_or(0) as i64 - 1;
    let vmin = pixels.iter().map(|p| p.1).min().unwrap_or(0) as i64 - 1;
    let umax = pixels.iter().map(|p| p.0).max().unwrap_or(0) as i64 + 1;
    let vmax = pixels.iter().map(|p| p.1).max().unwrap_or(0) as i64 + 1;
    let w = (umax - umin + 1) as usize;
    let h = (vmax - vmin + 1) as usize;
    let mut grid = vec![false; w * h];
    let mut alive: Vec<usize> = pixels
        .iter()
        .map(|&(u, v)| (v as i64 - vmin) as usize * w + (u as i64 - umin) as usize)
        .collect();
    for &i in &alive {
        grid[i] = true;
    }
    let ring = |grid: &[bool], i: usize| -> [bool; 8] {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        NEIGHBORS.map(|(dx, dy)| grid[((y + dy) as usize) * w + (x + dx) as usize])
    };
    loop {
        let mut removed = false;
        for pass in 0..2 {
            let doomed: Vec<usize> = alive
                .iter()
                .copied()
                .filter(|&i| {
                    let n = ring(&grid, i);
                    let b = n.iter().filter(|&&x| x).count();
                    let a = (0..8).filter(|&k| !n[k] && n[(k + 1) % 8]).count();
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let cond = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    (2..=6).contains(&b) && a == 1 && cond
                })
                .collect();
            for &i in &doomed {
                grid[i] = false;
            }
            removed |= !doomed.is_empty();
            alive.retain(|&i| grid[i]);
        }
        if !removed {
            break;
        }
    }
    let mut local: Vec<[i64; 2]> = alive.iter().map(|&i| [(i % w) as i64, (i / w) as i64]).collect();
    let mut shape = vec![false; w * h];
    for &(u, v) in pixels {
        shape[(v as i64 - vmin) as usize * w + (u as i64 - umin) as usize] = true;
    }
    extend_endpoints(&mut local, &distance_transform(&shape, w, h), w);
    let mut out: Vec<[u32; 2]> = local
        .iter()
        .map(|p| [(p[0] + umin) as u32, (p[1] + vmin) as u32])
        .collect();
    out.sort_unstable_by_key(|p| (p[1], p[0]));
    out
}

/// Squared Euclidean distance to the nearest black pixel, by separable
/// lower envelopes of parabolas.
fn distance_transform(grid: &[bool], w: usize, h: usize) -> Vec<f64> {
    const INF: f64 = 1e20;
    fn envelope(f: &[f64], out: &mut [f64]) {
        let n = f.len();
        let mut v = vec![0usize; n];
        let mut z = vec![0.0; n + 1];
        let mut k = 0;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..n {
            loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= z[k] && k > 0 {
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let d = q as f64 - v[k] as f64;
            *o = d * d + f[v[k]];
        }
    }
    let mut d: Vec<f64> = grid.iter().map(|&white| if white { INF } else { 0.0 }).collect();
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = d[y * w + x];
        }
        envelope(&col, &mut tmp[..h]);
        for y in 0..h {
            d[y * w + x] = tmp[y];
        }
    }
    for y in 0..h {
        let row = d[y * w..(y + 1) * w].to_vec();
        envelope(&row, &mut d[y * w..(y + 1) * w]);
    }
    d
}

/// Thinning pulls the ends of thick strokes inwards. Each endpoint is
/// pushed forward along the distance ridge while the distance to the
/// background does not drop.
fn extend_endpoints(skeleton: &mut Vec<[i64; 2]>, dist: &[f64], w: usize) {
    let at = |p: [i64; 2]| dist[p[1] as usize * w + p[0] as usize].sqrt();
    let mut member: std::collections::HashSet<[i64; 2]> = skeleton.iter().copied().collect();
    let neighbors = |set: &std::collections::HashSet<[i64; 2]>, p: [i64; 2]| -> Vec<[i64; 2]> {
        NEIGHBORS
            .iter()
            .map(|(du, dv)| [p[0] + du, p[1] + dv])
            .filter(|q| set.contains(q))
            .collect()
    };
    let ends: Vec<[i64; 2]> = skeleton
        .iter()
        .copied()
        .filter(|&p| neighbors(&member, p).len() == 1)
        .collect();
    for end in ends {
        let mut back = end;
        let mut seen = vec![end];
        for _ in 0..6 {
            let next: Vec<_> = neighbors(&member, back)
                .into_iter()
                .filter(|q| !seen.contains(q))
                .collect();
            if next.len() != 1 {
                break;
            }
            back = next[0];
            seen.push(back);
        }
        if back == end {
            continue;
        }
        let dir = Vector2::new((end[0] - back[0]) as f64, (end[1] - back[1]) as f64).normalize();
        let mut p = end;
        let limit = 2.0 * at(end) + 2.0;
        let mut steps = 0.0;
        while steps < limit {
            let best = NEIGHBORS
                .iter()
                .map(|(du, dv)| ([p[0] + du, p[1] + dv], Vector2::new(*du as f64, *dv as f64)))
                .filter(|(q, step)| step.normalize().dot(&dir) > 0.7 && !member.contains(q))
                .filter(|(q, _)| dist[q[1] as usize * w + q[0] as usize] > 0.0)
                .max_by(|a, b| at(a.0).total_cmp(&at(b.0)));
            match best {
                Some((q, _)) if at(q) >= at(p) - 0.75 && neighbors(&member, q).len() == 1 => {
                    member.insert(q);
                    skeleton.push(q);
                    p = q;
                    steps += 1.0;
                }
                _ => break,
            }
        }
    }
}

/// Thins the dominant white component to a one-pixel-wide set (unordered,
/// row-major).
pub fn skeletonize(img: &BinaryImage, cfg: &WarmStartConfig) -> Result<Vec<[u32; 2]>> {
    let filtered;
    let img = if cfg.opening_radius > 0 {
        filtered = open(img, cfg.opening_radius);
        &filtered
    } else {
        img
    };
    if img.count_white() == 0 {
        return Err(Error::EmptyImage("no white pixels to skeletonize".into()));
    }
    let component = dominant_component(img, cfg.max_secondary_fraction)?;
    Ok(thin(&component))
}

/// Orders skeleton pixels along the longest path that starts at the
/// endpoint nearest to `base_hint`. Cycles are broken by a minimum spanning
/// tree over 8-neighbor edges.
pub fn order_path(pixels: &[[u32; 2]], base_hint: Vector2<f64>, view: usize) -> Result<Skeleton> {
    if pixels.is_empty() {
        return Err(Error::EmptyImage("empty skeleton".into()));
    }
    let index: HashMap<[u32; 2], usize> = pixels.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let mut edges = Vec::new();
    for (i, p) in pixels.iter().enumerate() {
        for (du, dv) in NEIGHBORS {
            let (u, v) = (p[0] as i64 + du, p[1] as i64 + dv);
            if u < 0 || v < 0 {
                continue;
            }
            if let Some(&j) = index.get(&[u as u32, v as u32]) {
                if j > i {
                    let diagonal = du != 0 && dv != 0;
                    edges.push((diagonal, i, j));
                }
            }
        }
    }
    edges.sort_unstable();
    let mut parent: Vec<usize> = (0..pixels.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); pixels.len()];
    for (diagonal, i, j) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
            let w = if diagonal { std::f64::consts::SQRT_2 } else { 1.0 };
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
    }
    let mut sizes: HashMap<usize, usize> = HashMap::new();
    for i in 0..pixels.len() {
        *sizes.entry(find(&mut parent, i)).or_default() += 1;
    }
    if sizes.len() > 1 {
        let mut s: Vec<usize> = sizes.into_values().collect();
        s.sort_unstable_by(|a, b| b.cmp(a));
        return Err(Error::DisconnectedSkeleton(s));
    }
    let dist_to_hint = |i: usize| {
        let p = Vector2::new(pixels[i][0] as f64, pixels[i][1] as f64);
        (p - base_hint).norm()
    };
    let start = (0..pixels.len())
        .filter(|&i| adj[i].len() <= 1)
        .min_by(|&a, &b| dist_to_hint(a).total_cmp(&dist_to_hint(b)).then(a.cmp(&b)))
        .unwrap_or(0);
    let mut dist = vec![f64::NAN; pixels.len()];
    let mut prev = vec![usize::MAX; pixels.len()];
    dist[start] = 0.0;
    let mut queue = VecDeque::from([start]);
    while let Some(i) = queue.pop_front() {
        for &(j, w) in &adj[i] {
            if dist[j].is_nan() {
                dist[j] = dist[i] + w;
                prev[j] = i;
                queue.push_back(j);
            }
        }
    }
    let mut end = start;
    for i in 0..pixels.len() {
        if dist[i] > dist[end] {
            end = i;
        }
    }
    let mut path = vec![pixels[end]];
    let mut k = end;
    while prev[k] != usize::MAX {
        k = prev[k];
        path.push(pixels[k]);
    }
    path.reverse();
    Ok(Skeleton { view, pixels: path })
}

/// Matched path indices of two ordered skeletons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Correspondences {
    /// `(left index, right index)` with non-decreasing right indices.
    pub pairs: Vec<(usize, usize)>,
    /// Left pixels without an admissible partner.
    pub skipped: usize,
}

fn line_distance(line: &Vector3<f64>, x: &Vector2<f64>) -> f64 {
    (line.x * x.x + line.y * x.y + line.z).abs() / line.xy().norm()
}

/// Walks the left skeleton and intersects each epipolar line with the right
/// skeleton. A candidate lies within `tau` of the line and at most `window`
/// path indices after the previous match; the first run of candidates is
/// taken and, inside it, the pixel closest to the line.
pub fn correspond_epipolar(
    left: &Skeleton,
    right: &Skeleton,
    left_cam: &CameraModel,
    right_cam: &CameraModel,
    cfg: &WarmStartConfig,
) -> Result<Correspondences> {
    let f = fundamental_matrix(left_cam, right_cam)?;
    let ideal = |cam: &CameraModel, s: &Skeleton| -> Result<Vec<Vector2<f64>>> {
        s.points().into_iter().map(|p| cam.ideal_pixel(p)).collect()
    };
    let xl = ideal(left_cam, left)?;
    let xr = ideal(right_cam, right)?;
    let lines: Vec<Vector3<f64>> = xl.iter().map(|x| f * x.push(1.0)).collect();

    // global nearest matches reveal a reversed right path
    let mut trend = Vec::new();
    for (i, l) in lines.iter().enumerate() {
        let best = xr
            .iter()
            .enumerate()
            .map(|(k, x)| (line_distance(l, x), k))
            .filter(|(d, _)| *d <= cfg.tau)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, k)) = best {
            trend.push((i as f64, k as f64));
        }
    }
    if trend.len() >= 2 {
        let n = trend.len() as f64;
        let (mi, mk) = trend
            .iter()
            .fold((0.0, 0.0), |acc, t| (acc.0 + t.0 / n, acc.1 + t.1 / n));
        let cov: f64 = trend.iter().map(|(i, k)| (i - mi) * (k - mk)).sum();
        if cov < 0.0 {
            return Err(Error::OrientationMismatch);
        }
    }

    let mut pairs = Vec::new();
    let mut skipped = 0;
    let mut prev = 0usize;
    for (i, l) in lines.iter().enumerate() {
        let hi = (prev + cfg.window).min(xr.len().saturating_sub(1));
        let mut chosen: Option<(usize, f64)> = None;
        for k in prev..=hi {
            let d = line_distance(l, &xr[k]);
            if d <= cfg.tau {
                if chosen.is_none_or(|(_, best)| d < best) {
                    chosen = Some((k, d));
                }
            } else if chosen.is_some() {
                break;
            }
        }
        match chosen {
            Some((k, _)) => {
                pairs.push((i, k));
                prev = k;
            }
            None => skipped += 1,
        }
    }
    if pairs.len() < cfg.min_pairs {
        return Err(Error::InsufficientCorrespondences {
            found: pairs.len(),
            required: cfg.min_pairs,
        });
    }
    Ok(Correspondences { pairs, skipped })
}

/// Backbone points with cumulative chord-length arc lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStartPoints {
    pub arc_lengths: Vec<f64>,
    pub points: Vec<Vector3<f64>>,
}

impl WarmStartPoints {
    /// Arc lengths from chord lengths. Points closer than `min_spacing` to
    /// the previously kept point are dropped, and exact repeats always are.
    pub fn from_points(points: &[Vector3<f64>], min_spacing: f64) -> Result<Self> {
        let mut kept: Vec<Vector3<f64>> = Vec::with_capacity(points.len());
        let mut arc = Vec::with_capacity(points.len());
        for p in points {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric("non-finite backbone point".into()));
            }
            match kept.last() {
                None => arc.push(0.0),
                Some(q) => {
                    let d = (p - q).norm();
                    if d == 0.0 || d < min_spacing {
                        continue;
                    }
                    arc.push(arc.last().unwrap() + d);
                }
            }
            kept.push(*p);
        }
        if kept.is_empty() {
            return Err(domain("no backbone points"));
        }
        Ok(Self {
            arc_lengths: arc,
            points: kept,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write_points_csv(&mut out, &self.arc_lengths, &self.points)
    }

    /// Reads `s_mm,x_mm,y_mm,z_mm`; the arc lengths must be increasing.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let (arc_lengths, points) = read_points_csv(input)?;
        if points.is_empty() {
            return Err(Error::Parse("no points in warm-start file".into()));
        }
        if arc_lengths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Parse("warm-start arc lengths must be increasing".into()));
        }
        Ok(Self { arc_lengths, points })
    }
}

/// Triangulates matched pixels and translates the result so that its first
/// point sits at `base`.
pub fn build_warmstart(
    left_px: &[Vector2<f64>],
    right_px: &[Vector2<f64>],
    left_cam: &CameraModel,
    right_cam: &CameraModel,
    base: Vector3<f64>,
    min_spacing: f64,
) -> Result<WarmStartPoints> {
    if left_px.len() != right_px.len() {
        return Err(domain("pixel lists differ in length"));
    }
    let mut points = Vec::with_capacity(left_px.len());
    let mut flagged = 0;
    for (l, r) in left_px.iter().zip(right_px) {
        let t = triangulate(&[left_cam, right_cam], &[*l, *r])?;
        flagged += t.ill_conditioned as usize;
        points.push(t.point);
    }
    if flagged > 0 {
        log::warn!("{flagged} of {} triangulations are ill-conditioned", points.len());
    }
    let shift = points.first().map(|p| base - p).unwrap_or_default();
    let shifted: Vec<Vector3<f64>> = points.iter().map(|p| p + shift).collect();
    WarmStartPoints::from_points(&shifted, min_spacing)
}

/// Result of fitting curve parameters to warm-start points.
#[derive(Debug, Clone)]
pub struct InitialGuess {
    /// Curvature coefficients, 1/mm and 1/mm^2.
    pub theta: Vec<f64>,
    /// RMS point residual, mm.
    pub rms: f64,
    pub iterations: usize,
    /// Sum of squared residuals after every accepted step.
    pub history: Vec<f64>,
}

/// Least-squares fit of the curve to points at known arc lengths, starting
/// from a straight curve. Arc lengths beyond the curve length are clamped.
pub fn fit_initial_guess(
    ws: &WarmStartPoints,
    grid: &SegmentGrid,
    base_position: Vector3<f64>,
    base_orientation: Matrix3<f64>,
    cfg: &WarmStartConfig,
) -> Result<InitialGuess> {
    if ws.is_empty() {
        return Err(domain("no warm-start points"));
    }
    let len = grid.total_length();
    let last = *ws.arc_lengths.last().unwrap();
    if last > 1.05 * len {
        return Err(domain(format!(
            "warm-start points span {last:.3} mm, more than 5% beyond the curve length {len}"
        )));
    }
    let arc: Vec<f64> = ws.arc_lengths.iter().map(|s| s.clamp(0.0, len)).collect();
    let factors = ParamScale::default().factors(grid)?;
    let physical = |x: &DVector<f64>| -> Vec<f64> { x.iter().zip(&factors).map(|(a, f)| a * f).collect() };
    let params = |x: &DVector<f64>| CurveParams::new(physical(x), base_position, base_orientation);
    let n = grid.n_params();
    let integrator = Integrator::rk4();
    let fgh = |x: &DVector<f64>| {
        let s = integrate_frame(&params(x)?, grid, &arc, integrator, true)?;
        let sens = s.sensitivities.as_ref().expect("sensitivities requested");
        let mut f = 0.0;
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for ((p, target), jac) in s.points.iter().zip(&ws.points).zip(sens) {
            let mut jac = jac.clone();
            for (mut col, fac) in jac.column_iter_mut().zip(&factors) {
                col *= *fac;
            }
            let r = p - target;
            f += r.norm_squared();
            g.gemv_tr(2.0, &jac, &r, 1.0);
            h.gemm_tr(2.0, &jac, &jac, 1.0);
        }
        Ok((f, g, h))
    };
    let cost = |x: &DVector<f64>| {
        let s = integrate_frame(&params(x)?, grid, &arc, integrator, false)?;
        Ok(s.points
            .iter()
            .zip(&ws.points)
            .map(|(p, t)| (p - t).norm_squared())
            .sum())
    };
    let lm = LmConfig {
        max_iter: cfg.max_iter,
        ftol: 1e-15,
        gtol: 0.0,
        ..Default::default()
    };
    let out = levenberg_marquardt(fgh, cost, DVector::zeros(n), &lm)?;
    let rms = (out.cost / ws.len() as f64).sqrt();
    if rms > cfg.max_rms {
        log::warn!("warm-start fit residual {rms:.3} mm exceeds {} mm", cfg.max_rms);
    }
    Ok(InitialGuess {
        theta: physical(&out.x),
        rms,
        iterations: out.iterations,
        history: out.history,
    })
}

/// Everything produced by [`warm_start`].
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub skeletons: Vec<Skeleton>,
    pub correspondences: Correspondences,
    pub points: WarmStartPoints,
    pub guess: InitialGuess,
}

/// Full pipeline on the first two views of `rig`.
#[allow(clippy::too_many_arguments)]
pub fn warm_start(
    images: &[BinaryImage],
    rig: &CameraRig,
    base_hints: &[Vector2<f64>],
    grid: &SegmentGrid,
    base_position: Vector3<f64>,
    base_orientation: Matrix3<f64>,
    cfg: &WarmStartConfig,
) -> Result<WarmStart> {
    if images.len() < 2 || rig.len() < 2 || base_hints.len() < 2 {
        return Err(domain("the warm start needs two views with base hints"));
    }
    let thin_view = |v: usize| skeletonize(&images[v], cfg).and_then(|px| order_path(&px, base_hints[v], v));
    #[cfg(feature = "parallel")]
    let (left, right) = rayon::join(|| thin_view(0), || thin_view(1));
    #[cfg(not(feature = "parallel"))]
    let (left, right) = (thin_view(0), thin_view(1));
    let (left, right) = (left?, right?);
    let (lc, rc) = (&rig.cameras[0], &rig.cameras[1]);
    let correspondences = correspond_epipolar(&left, &right, lc, rc, cfg)?;
    let lp = left.points();
    let rp = right.points();
    let (lpx, rpx): (Vec<_>, Vec<_>) = correspondences.pairs.iter().map(|&(i, k)| (lp[i], rp[k])).unzip();
    let points = build_warmstart(&lpx, &rpx, lc, rc, base_position, cfg.min_spacing)?;
    let guess = fit_initial_guess(&points, grid, base_position, base_orientation, cfg)?;
    log::info!(
        "warm start: {} matches ({} skipped), {} points over {:.2} mm, fit rms {:.3} mm",
        correspondences.pairs.len(),
        correspondences.skipped,
        points.len(),
        points.arc_lengths.last().unwrap(),
        guess.rms
    );
    Ok(WarmStart {
        skeletons: vec![left, right],
        correspondences,
        points,
        guess,
    })
}
