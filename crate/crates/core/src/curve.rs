//! Moving-frame backbone curves.
//!
//! A curve is the trajectory of an orthonormal frame `(rho, R)` that advances
//! along its own z-axis at unit speed and rotates with the body-frame
//! curvature `u(s) = (u_x, u_y, 0)`:
//!
//! ```text
//! rho'(s) = R(s) e3        R'(s) = R(s) hat(u(s))
//! ```
//!
//! `u_x` and `u_y` are piecewise cubic Hermite polynomials over a
//! [`SegmentGrid`]. Each segment carries four coefficients per axis: value and
//! derivative at the segment start, value and derivative at the segment end.
//!
//! Two integrators are provided. [`Integrator::Rk4`] is the fixed-step scheme
//! used inside the optimizer and can propagate forward sensitivities of the
//! positions with respect to every curvature coefficient; the sensitivities
//! are the exact derivatives of the discrete scheme. [`Integrator::Dopri5`] is
//! an adaptive Dormand-Prince 5(4) integrator used for evaluation sampling.

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{domain, numeric, Error, Result};

/// Number of Hermite coefficients per segment and axis.
pub const COEFFS_PER_AXIS: usize = 4;
/// Curvature coefficients per segment (two bending axes).
pub const PARAMS_PER_SEGMENT: usize = 2 * COEFFS_PER_AXIS;

/// Bending axis of the curvature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X = 0,
    Y = 1,
}

/// Arc-length boundaries `0 = l[0] < l[1] < ... < l[S] = L` in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SegmentGrid {
    boundaries: Vec<f64>,
}

impl TryFrom<Vec<f64>> for SegmentGrid {
    type Error = Error;

    fn try_from(boundaries: Vec<f64>) -> Result<Self> {
        Self::new(boundaries)
    }
}

impl From<SegmentGrid> for Vec<f64> {
    fn from(grid: SegmentGrid) -> Self {
        grid.boundaries
    }
}

impl SegmentGrid {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(domain("segment grid needs at least one segment"));
        }
        if boundaries[0] != 0.0 {
            return Err(domain("segment grid must start at arc length 0"));
        }
        if boundaries.iter().any(|b| !b.is_finite()) {
            return Err(domain("segment boundaries must be finite"));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(domain(format!(
                "segment boundaries must be strictly increasing: {boundaries:?}"
            )));
        }
        Ok(Self { boundaries })
    }

    /// Builds a grid from consecutive segment lengths.
    pub fn from_lengths(lengths: &[f64]) -> Result<Self> {
        let mut boundaries = Vec::with_capacity(lengths.len() + 1);
        boundaries.push(0.0);
        let mut acc = 0.0;
        for &len in lengths {
            acc += len;
            boundaries.push(acc);
        }
        Self::new(boundaries)
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn n_segments(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn n_params(&self) -> usize {
        PARAMS_PER_SEGMENT * self.n_segments()
    }

    pub fn total_length(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    /// `(start, end)` of segment `i` (zero based).
    pub fn segment_range(&self, i: usize) -> (f64, f64) {
        (self.boundaries[i], self.boundaries[i + 1])
    }

    /// Segment containing `s`; a shared boundary belongs to the segment to its
    /// right, except `L` which belongs to the last segment.
    pub fn segment_of(&self, s: f64) -> Result<usize> {
        let len = self.total_length();
        if !(0.0..=len).contains(&s) {
            return Err(domain(format!("arc length {s} outside [0, {len}]")));
        }
        let idx = self.boundaries[1..].partition_point(|&b| b <= s);
        Ok(idx.min(self.n_segments() - 1))
    }

    /// `n` equidistant arc lengths covering `[0, L]`, endpoints included.
    pub fn equidistant(&self, n: usize) -> Vec<f64> {
        equidistant(self.total_length(), n)
    }
}

pub(crate) fn equidistant(length: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => {
            let step = length / (n - 1) as f64;
            let mut out: Vec<f64> = (0..n).map(|j| j as f64 * step).collect();
            out[n - 1] = length;
            out
        }
    }
}

/// Decision variables of a reconstruction: curvature coefficients plus the
/// (fixed) base pose.
///
/// `theta` is laid out segment-major: `[seg0 x(4), seg0 y(4), seg1 x(4), ...]`
/// with each group being `(u(l0), u'(l0), u(l1), u'(l1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveParams {
    pub theta: Vec<f64>,
    pub base_position: Vector3<f64>,
    pub base_orientation: Matrix3<f64>,
}

impl CurveParams {
    pub fn new(theta: Vec<f64>, base_position: Vector3<f64>, base_orientation: Matrix3<f64>) -> Result<Self> {
        if theta.is_empty() || !theta.len().is_multiple_of(PARAMS_PER_SEGMENT) {
            return Err(domain(format!(
                "curvature parameter count {} is not a positive multiple of {PARAMS_PER_SEGMENT}",
                theta.len()
            )));
        }
        check_rotation(&base_orientation, 1e-9)?;
        Ok(Self {
            theta,
            base_position,
            base_orientation,
        })
    }

    /// All-zero curvature: a straight line along the base z-axis.
    pub fn straight(n_segments: usize) -> Self {
        Self {
            theta: vec![0.0; n_segments * PARAMS_PER_SEGMENT],
            base_position: Vector3::zeros(),
            base_orientation: Matrix3::identity(),
        }
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Self {
        Self {
            theta,
            base_position: self.base_position,
            base_orientation: self.base_orientation,
        }
    }

    pub fn n_segments(&self) -> usize {
        self.theta.len() / PARAMS_PER_SEGMENT
    }

    pub fn index(segment: usize, axis: Axis, k: usize) -> usize {
        segment * PARAMS_PER_SEGMENT + axis as usize * COEFFS_PER_AXIS + k
    }

    pub fn hermite(&self, segment: usize, axis: Axis) -> [f64; 4] {
        let i = Self::index(segment, axis, 0);
        [self.theta[i], self.theta[i + 1], self.theta[i + 2], self.theta[i + 3]]
    }

    pub fn set_hermite(&mut self, segment: usize, axis: Axis, coeffs: [f64; 4]) {
        let i = Self::index(segment, axis, 0);
        self.theta[i..i + 4].copy_from_slice(&coeffs);
    }

    fn check_grid(&self, grid: &SegmentGrid) -> Result<()> {
        if self.n_segments() != grid.n_segments() {
            return Err(domain(format!(
                "parameters describe {} segments but the grid has {}",
                self.n_segments(),
                grid.n_segments()
            )));
        }
        if self.theta.iter().any(|v| !v.is_finite()) || self.base_position.iter().any(|v| !v.is_finite()) {
            return Err(numeric("non-finite curve parameter"));
        }
        Ok(())
    }
}

pub(crate) fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<()> {
    let ortho = (r.transpose() * r - Matrix3::identity()).norm();
    let det = r.determinant();
    if !(ortho <= tol && (det - 1.0).abs() <= tol) {
        return Err(domain(format!(
            "matrix is not a rotation (|R^T R - I| = {ortho:e}, det = {det})"
        )));
    }
    Ok(())
}

/// Cubic Hermite polynomial on a segment of length `dl`, evaluated at local
/// coordinate `t = s - l[i-1]`.
pub fn hermite_value(c: &[f64; 4], dl: f64, t: f64) -> f64 {
    let cubic = (2.0 * c[0] - 2.0 * c[2] + dl * c[1] + dl * c[3]) / (dl * dl * dl);
    let quad = (3.0 * c[0] - 3.0 * c[2] + 2.0 * dl * c[1] + dl * c[3]) / (dl * dl);
    cubic * t * t * t - quad * t * t + c[1] * t + c[0]
}

/// Partial derivatives of [`hermite_value`] with respect to the four
/// coefficients (the value is linear in them).
pub fn hermite_basis(dl: f64, t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let dl2 = dl * dl;
    let dl3 = dl2 * dl;
    [
        2.0 * t3 / dl3 - 3.0 * t2 / dl2 + 1.0,
        t3 / dl2 - 2.0 * t2 / dl + t,
        -2.0 * t3 / dl3 + 3.0 * t2 / dl2,
        t3 / dl2 - t2 / dl,
    ]
}

/// Curvature `(u_x, u_y, 0)` in 1/mm at arc length `s`.
pub fn eval_curvature(params: &CurveParams, grid: &SegmentGrid, s: f64) -> Result<Vector3<f64>> {
    params.check_grid(grid)?;
    let seg = grid.segment_of(s)?;
    Ok(segment_curvature(params, grid, seg, s))
}

/// Curvature from the polynomial of one particular segment, without locating
/// the segment. Used by the integrators, which never straddle a boundary.
pub fn segment_curvature(params: &CurveParams, grid: &SegmentGrid, segment: usize, s: f64) -> Vector3<f64> {
    let (l0, l1) = grid.segment_range(segment);
    let dl = l1 - l0;
    let t = s - l0;
    Vector3::new(
        hermite_value(&params.hermite(segment, Axis::X), dl, t),
        hermite_value(&params.hermite(segment, Axis::Y), dl, t),
        0.0,
    )
}

#[inline]
pub(crate) fn hat(u: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -u.z, u.y, //
        u.z, 0.0, -u.x, //
        -u.y, u.x, 0.0,
    )
}

/// Position, orientation and arc length of the moving frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameState {
    pub position: Vector3<f64>,
    pub orientation: Matrix3<f64>,
    pub arc_length: f64,
}

/// Integration scheme for the frame equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Integrator {
    /// Classical RK4. Every interval between consecutive breakpoints (requested
    /// arc lengths and segment boundaries) is split into `substeps` equal steps.
    Rk4 { substeps: usize },
    /// Adaptive Dormand-Prince 5(4) with mixed error control.
    Dopri5 { rtol: f64, atol: f64 },
}

impl Integrator {
    pub const fn rk4() -> Self {
        Integrator::Rk4 { substeps: 2 }
    }

    pub const fn dopri5() -> Self {
        Integrator::Dopri5 {
            rtol: 1e-11,
            atol: 1e-11,
        }
    }
}

impl Default for Integrator {
    fn default() -> Self {
        Self::rk4()
    }
}

/// Discretized curve.
#[derive(Debug, Clone)]
pub struct CurveSamples {
    pub arc_lengths: Vec<f64>,
    pub points: Vec<Vector3<f64>>,
    pub orientations: Vec<Matrix3<f64>>,
    /// `d rho(s_j) / d theta`, one `3 x 8S` matrix per sample.
    pub sensitivities: Option<Vec<Matrix3xX<f64>>>,
}

impl CurveSamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frame(&self, j: usize) -> FrameState {
        FrameState {
            position: self.points[j],
            orientation: self.orientations[j],
            arc_length: self.arc_lengths[j],
        }
    }

    /// Total length of the sample polyline.
    pub fn polyline_length(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// Writes `s_mm,x_mm,y_mm,z_mm` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write_points_csv(&mut out, &self.arc_lengths, &self.points)
    }
}

pub(crate) fn write_points_csv<W: Write>(out: &mut W, arc_lengths: &[f64], points: &[Vector3<f64>]) -> Result<()> {
    writeln!(out, "s_mm,x_mm,y_mm,z_mm")?;
    for (s, p) in arc_lengths.iter().zip(points) {
        writeln!(out, "{s:.16e},{:.16e},{:.16e},{:.16e}", p.x, p.y, p.z)?;
    }
    Ok(())
}

/// Reads a `s_mm,x_mm,y_mm,z_mm` file back into arc lengths and points.
pub fn read_points_csv<R: BufRead>(input: R) -> Result<(Vec<f64>, Vec<Vector3<f64>>)> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Parse("empty point file".into()))?;
    if header.trim() != "s_mm,x_mm,y_mm,z_mm" {
        return Err(Error::Parse(format!("unexpected header {header:?}")));
    }
    let mut arc = Vec::new();
    let mut pts = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
        if vals.len() != 4 {
            return Err(Error::Parse(format!(
                "line {}: expected 4 columns, found {}",
                lineno + 2,
                vals.len()
            )));
        }
        arc.push(vals[0]);
        pts.push(Vector3::new(vals[1], vals[2], vals[3]));
    }
    Ok((arc, pts))
}

/// Integrates the frame equations and samples the curve at `arc_lengths`.
///
/// Sensitivities are only available with [`Integrator::Rk4`].
pub fn integrate_frame(
    params: &CurveParams,
    grid: &SegmentGrid,
    arc_lengths: &[f64],
    integrator: Integrator,
    with_sensitivities: bool,
) -> Result<CurveSamples> {
    params.check_grid(grid)?;
    if arc_lengths.is_empty() {
        return Err(domain("no arc lengths requested"));
    }
    let len = grid.total_length();
    if arc_lengths.iter().any(|s| !(0.0..=len).contains(s)) {
        return Err(domain(format!("requested arc lengths must lie in [0, {len}]")));
    }
    if arc_lengths.windows(2).any(|w| w[0] > w[1]) {
        return Err(domain("requested arc lengths must be sorted"));
    }
    let samples = match integrator {
        Integrator::Rk4 { substeps } => {
            if substeps == 0 {
                return Err(domain("RK4 needs at least one substep"));
            }
            rk4_integrate(params, grid, arc_lengths, substeps, with_sensitivities)
        }
        Integrator::Dopri5 { rtol, atol } => {
            if with_sensitivities {
                return Err(domain("sensitivities require the fixed-step RK4 integrator"));
            }
            dopri5_integrate(params, grid, arc_lengths, rtol, atol)?
        }
    };
    if samples.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(numeric("curve integration produced non-finite positions"));
    }
    Ok(samples)
}

/// One integration interval that never crosses a segment boundary.
struct Piece {
    start: f64,
    end: f64,
    segment: usize,
    /// Index of the requested sample completed at `end`, if any.
    sample: Option<usize>,
}

fn pieces(grid: &SegmentGrid, arc_lengths: &[f64]) -> Vec<Piece> {
    let mut out = Vec::with_capacity(arc_lengths.len() + grid.n_segments());
    let b = grid.boundaries();
    let mut cur = 0.0;
    let mut seg = 0;
    for (j, &target) in arc_lengths.iter().enumerate() {
        while seg + 1 < grid.n_segments() && b[seg + 1] < target {
            if b[seg + 1] > cur {
                out.push(Piece {
                    start: cur,
                    end: b[seg + 1],
                    segment: seg,
                    sample: None,
                });
                cur = b[seg + 1];
            }
            seg += 1;
        }
        out.push(Piece {
            start: cur,
            end: target,
            segment: seg,
            sample: Some(j),
        });
        cur = target;
    }
    out
}

#[derive(Clone, Copy)]
struct State {
    rho: Vector3<f64>,
    rot: Matrix3<f64>,
}

impl State {
    #[inline]
    fn axpy(&self, h: f64, k: &State) -> State {
        State {
            rho: self.rho + k.rho * h,
            rot: self.rot + k.rot * h,
        }
    }

    #[inline]
    fn rk4_combine(&self, h: f64, k: [&State; 4]) -> State {
        let w = h / 6.0;
        State {
            rho: self.rho + (k[0].rho + k[1].rho * 2.0 + k[2].rho * 2.0 + k[3].rho) * w,
            rot: self.rot + (k[0].rot + k[1].rot * 2.0 + k[2].rot * 2.0 + k[3].rot) * w,
        }
    }
}

#[inline]
fn rhs(state: &State, u_hat: &Matrix3<f64>) -> State {
    State {
        rho: state.rot.column(2).into_owned(),
        rot: state.rot * u_hat,
    }
}

/// Curvature-hat of the segment polynomial and the hats of its basis
/// functions (the derivative of `hat(u)` along each local coefficient).
struct SegmentEval {
    u_hat: Matrix3<f64>,
    /// `(x-basis, y-basis)` weights; `d hat(u) / d theta_{x,k} = basis_x[k] * hat(e_x)`.
    basis: [f64; 4],
}

fn eval_segment(params: &CurveParams, grid: &SegmentGrid, seg: usize, s: f64) -> SegmentEval {
    let (l0, l1) = grid.segment_range(seg);
    let u = segment_curvature(params, grid, seg, s);
    SegmentEval {
        u_hat: hat(&u),
        basis: hermite_basis(l1 - l0, s - l0),
    }
}

/// Tangent right-hand side: derivative of [`rhs`] along one parameter
/// direction.
#[inline]
fn rhs_tangent(state: &State, dstate: &State, ev: &SegmentEval, local: Option<(Axis, usize)>) -> State {
    let mut drot = dstate.rot * ev.u_hat;
    if let Some((axis, k)) = local {
        let w = ev.basis[k];
        // R * hat(w e_axis)
        let e = match axis {
            Axis::X => Vector3::new(w, 0.0, 0.0),
            Axis::Y => Vector3::new(0.0, w, 0.0),
        };
        drot += state.rot * hat(&e);
    }
    State {
        rho: dstate.rot.column(2).into_owned(),
        rot: drot,
    }
}

fn param_local(p: usize, seg: usize) -> Option<(Axis, usize)> {
    if p / PARAMS_PER_SEGMENT != seg {
        return None;
    }
    let r = p % PARAMS_PER_SEGMENT;
    let axis = if r < COEFFS_PER_AXIS { Axis::X } else { Axis::Y };
    Some((axis, r % COEFFS_PER_AXIS))
}

fn rk4_integrate(
    params: &CurveParams,
    grid: &SegmentGrid,
    arc_lengths: &[f64],
    substeps: usize,
    with_sens: bool,
) -> CurveSamples {
    let n_params = params.theta.len();
    let mut y = State {
        rho: params.base_position,
        rot: params.base_orientation,
    };
    let zero = State {
        rho: Vector3::zeros(),
        rot: Matrix3::zeros(),
    };
    let mut dy = if with_sens { vec![zero; n_params] } else { Vec::new() };
    let mut points = vec![Vector3::zeros(); arc_lengths.len()];
    let mut orientations = vec![Matrix3::zeros(); arc_lengths.len()];
    let mut sens = if with_sens {
        Some(vec![Matrix3xX::zeros(n_params); arc_lengths.len()])
    } else {
        None
    };

    let mut dk: [Vec<State>; 4] = std::array::from_fn(|_| vec![zero; dy.len()]);
    let mut dtmp = vec![zero; dy.len()];

    for piece in pieces(grid, arc_lengths) {
        let span = piece.end - piece.start;
        if span > 0.0 {
            let h = span / substeps as f64;
            for step in 0..substeps {
                let s0 = piece.start + step as f64 * h;
                let e1 = eval_segment(params, grid, piece.segment, s0);
                let e2 = eval_segment(params, grid, piece.segment, s0 + 0.5 * h);
                let e4 = eval_segment(params, grid, piece.segment, s0 + h);

                let k1 = rhs(&y, &e1.u_hat);
                let y2 = y.axpy(0.5 * h, &k1);
                let k2 = rhs(&y2, &e2.u_hat);
                let y3 = y.axpy(0.5 * h, &k2);
                let k3 = rhs(&y3, &e2.u_hat);
                let y4 = y.axpy(h, &k3);
                let k4 = rhs(&y4, &e4.u_hat);

                if with_sens {
                    for p in 0..n_params {
                        let local = param_local(p, piece.segment);
                        let d1 = rhs_tangent(&y, &dy[p], &e1, local);
                        let d2 = rhs_tangent(&y2, &dy[p].axpy(0.5 * h, &d1), &e2, local);
                        let d3 = rhs_tangent(&y3, &dy[p].axpy(0.5 * h, &d2), &e2, local);
                        let d4 = rhs_tangent(&y4, &dy[p].axpy(h, &d3), &e4, local);
                        dk[0][p] = d1;
                        dk[1][p] = d2;
                        dk[2][p] = d3;
                        dk[3][p] = d4;
                    }
                    for p in 0..n_params {
                        dtmp[p] = dy[p].rk4_combine(h, [&dk[0][p], &dk[1][p], &dk[2][p], &dk[3][p]]);
                    }
                }
                let y_new = y.rk4_combine(h, [&k1, &k2, &k3, &k4]);
                let (rot, project) = orthonormalize(&y_new.rot);
                y = State { rho: y_new.rho, rot };
                if with_sens {
                    for p in 0..n_params {
                        dy[p] = State {
                            rho: dtmp[p].rho,
                            rot: project.tangent(&dtmp[p].rot),
                        };
                    }
                }
            }
        }
        if let Some(j) = piece.sample {
            points[j] = y.rho;
            orientations[j] = y.rot;
            if let Some(sens) = sens.as_mut() {
                for (p, d) in dy.iter().enumerate() {
                    sens[j].set_column(p, &d.rho);
                }
            }
        }
    }

    CurveSamples {
        arc_lengths: arc_lengths.to_vec(),
        points,
        orientations,
        sensitivities: sens,
    }
}

/// Linearization of the orthonormalization map, replayed on tangents.
enum Projection {
    /// Newton-Schulz iterates `Q_n` that produced the result.
    NewtonSchulz(Vec<Matrix3<f64>>),
    /// Far from SO(3); the tangent map is not propagated.
    Svd,
}

impl Projection {
    fn tangent(&self, d: &Matrix3<f64>) -> Matrix3<f64> {
        match self {
            Projection::NewtonSchulz(iterates) => {
                let mut dq = *d;
                for q in iterates {
                    let qtq = q.transpose() * q;
                    let three = Matrix3::identity() * 3.0;
                    dq = (dq * (three - qtq) - q * (dq.transpose() * q + q.transpose() * dq)) * 0.5;
                }
                dq
            }
            Projection::Svd => *d,
        }
    }
}

/// Projects a near-rotation onto SO(3) via its polar factor.
///
/// Close to SO(3) the polar factor is computed with Newton-Schulz iterations
/// `Q <- Q (3I - Q^T Q) / 2`, which are smooth and cheap to differentiate.
fn orthonormalize(r: &Matrix3<f64>) -> (Matrix3<f64>, Projection) {
    let drift = (r.transpose() * r - Matrix3::identity()).norm();
    if drift < 0.5 {
        let mut q = *r;
        let mut iterates = Vec::with_capacity(2);
        let mut residual = drift;
        while residual > 1e-15 && iterates.len() < 16 {
            iterates.push(q);
            q = q * (Matrix3::identity() * 3.0 - q.transpose() * q) * 0.5;
            residual = (q.transpose() * q - Matrix3::identity()).norm();
        }
        (q, Projection::NewtonSchulz(iterates))
    } else {
        let svd = r.svd(true, true);
        let q = svd.u.unwrap() * svd.v_t.unwrap();
        (q, Projection::Svd)
    }
}

fn dopri5_integrate(
    params: &CurveParams,
    grid: &SegmentGrid,
    arc_lengths: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<CurveSamples> {
    // Dormand-Prince 5(4) tableau.
    const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const B5: [f64; 7] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    const MAX_STEPS: usize = 1_000_000;

    let mut y = State {
        rho: params.base_position,
        rot: params.base_orientation,
    };
    let mut points = vec![Vector3::zeros(); arc_lengths.len()];
    let mut orientations = vec![Matrix3::zeros(); arc_lengths.len()];
    let mut h = grid.total_length() / 100.0;
    let mut steps = 0usize;

    for piece in pieces(grid, arc_lengths) {
        let mut s = piece.start;
        while piece.end - s > 1e-12 * grid.total_length().max(1.0) {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(numeric("adaptive integrator exceeded its step budget"));
            }
            let last = s + h >= piece.end;
            let h_try = if last { piece.end - s } else { h };
            let mut k: [State; 7] = [y; 7];
            for stage in 0..7 {
                let mut ys = y;
                for (prev, a) in A[stage].iter().enumerate().take(stage) {
                    if *a != 0.0 {
                        ys = ys.axpy(h_try * a, &k[prev]);
                    }
                }
                let u = segment_curvature(params, grid, piece.segment, s + C[stage] * h_try);
                k[stage] = rhs(&ys, &hat(&u));
            }
            let mut y5 = y;
            let mut err = State {
                rho: Vector3::zeros(),
                rot: Matrix3::zeros(),
            };
            for stage in 0..7 {
                y5 = y5.axpy(h_try * B5[stage], &k[stage]);
                err = err.axpy(h_try * (B5[stage] - B4[stage]), &k[stage]);
            }
            let mut err_norm: f64 = 0.0;
            for (e, (a, b)) in err
                .rho
                .iter()
                .chain(err.rot.iter())
                .zip(y.rho.iter().chain(y.rot.iter()).zip(y5.rho.iter().chain(y5.rot.iter())))
            {
                let scale = atol + rtol * a.abs().max(b.abs());
                err_norm = err_norm.max(e.abs() / scale);
            }
            if !err_norm.is_finite() {
                return Err(numeric("adaptive integrator produced non-finite state"));
            }
            if err_norm <= 1.0 {
                s = if last { piece.end } else { s + h_try };
                let (rot, _) = orthonormalize(&y5.rot);
                y = State { rho: y5.rho, rot };
            }
            let factor = if err_norm == 0.0 {
                5.0
            } else {
                (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
            };
            // Keep the proposal from a shortened final step from collapsing h.
            if !(last && err_norm <= 1.0) || factor < 1.0 {
                h = h_try * factor;
            }
        }
        if let Some(j) = piece.sample {
            points[j] = y.rho;
            orientations[j] = y.rot;
        }
    }

    Ok(CurveSamples {
        arc_lengths: arc_lengths.to_vec(),
        points,
        orientations,
        sensitivities: None,
    })
}
