//! Iterative-closest-point curve fitting.
//!
//! Every robot pixel `beta` of view `g` is matched to the nearest projected
//! reconstruction node and the fit minimizes
//!
//! `J(theta) = sum_g sum_i || beta_{g,i} - nu_{g, j(i)}(theta) ||_p^p`,
//!
//! where `||v||_p^p = sum_k |v_k|^p`. Two solvers alternate assignment and
//! descent: [`solve_multistep`] minimizes `J` completely between
//! reassignments, [`solve_onestep`] takes a single step.

mod model;
mod optim;
mod solve;
pub(crate) use solve::Stopwatch;

use nalgebra::{DMatrix, DVector, Matrix2xX, Vector2};

use crate::error::{domain, numeric, Result};

pub use model::{CameraCurveModel, ParamScale, SlopeScale};
pub use optim::{lbfgs, levenberg_marquardt, Adam, LbfgsConfig, LbfgsOutcome, LmConfig};
pub use solve::{
    solve, solve_multistep, solve_onestep, InnerSolver, Method, MonitorEvent, Optimizer, SolveOutput, SolveTrace,
    SolverConfig, StopReason, TraceRow,
};

/// Pixel offset whose `p`-th power is charged between any pixel and a node
/// behind the camera.
pub const BEHIND_CAMERA_OFFSET: f64 = 1000.0;

/// The `p`-th power of the `p`-norm in the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PNorm {
    p: f64,
    int: Option<i32>,
}

impl PNorm {
    pub fn new(p: f64) -> Result<Self> {
        if !(p >= 1.0 && p.is_finite()) {
            return Err(domain(format!("norm exponent must be >= 1, got {p}")));
        }
        let int = (p.fract() == 0.0 && p <= 64.0).then_some(p as i32);
        Ok(Self { p, int })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// `|x|^p`
    #[inline]
    pub fn pow(&self, x: f64) -> f64 {
        match self.int {
            Some(2) => x * x,
            Some(k) => x.abs().powi(k),
            None => x.abs().powf(self.p),
        }
    }

    /// `d |x|^p / dx`
    #[inline]
    pub fn dpow(&self, x: f64) -> f64 {
        match self.int {
            Some(1) => x.signum() * (x != 0.0) as i32 as f64,
            Some(2) => 2.0 * x,
            Some(k) => k as f64 * x.abs().powi(k - 1) * x.signum(),
            None => self.p * x.abs().powf(self.p - 1.0) * x.signum(),
        }
    }

    /// `d^2 |x|^p / dx^2`
    #[inline]
    pub fn d2pow(&self, x: f64) -> f64 {
        match self.int {
            Some(1) => 0.0,
            Some(2) => 2.0,
            Some(k) => (k * (k - 1)) as f64 * x.abs().powi(k - 2),
            None => self.p * (self.p - 1.0) * x.abs().powf(self.p - 2.0),
        }
    }

    /// `||a - b||_p^p`
    #[inline]
    pub fn dist(&self, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
        self.pow(a.x - b.x) + self.pow(a.y - b.y)
    }

    /// Distance charged between any pixel and a node behind the camera.
    /// Equals `1e6` for `p = 2` and scales with `p` like a pixel offset of
    /// 1000 px along one axis.
    pub fn penalty(&self) -> f64 {
        self.pow(BEHIND_CAMERA_OFFSET)
    }
}

/// Projected reconstruction nodes in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeProjections {
    pub points: Vec<Vector2<f64>>,
    /// `d nu_j / d theta`, one `2 x P` block per node.
    pub jacobians: Option<Vec<Matrix2xX<f64>>>,
    /// `false` for nodes behind the camera.
    pub visible: Vec<bool>,
}

impl NodeProjections {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A parametrized curve observed in several views.
pub trait CurveModel: Sync {
    fn n_params(&self) -> usize;
    fn n_views(&self) -> usize;
    fn n_nodes(&self) -> usize;
    fn project_nodes(&self, theta: &[f64], with_jacobian: bool) -> Result<Vec<NodeProjections>>;
}

/// Sweep structure over the visible nodes of one view, sorted by `u`.
pub struct NodeIndex<'a> {
    nodes: &'a NodeProjections,
    order: Vec<u32>,
    us: Vec<f64>,
    hidden: Vec<u32>,
    norm: PNorm,
}

impl<'a> NodeIndex<'a> {
    pub fn new(nodes: &'a NodeProjections, norm: PNorm) -> Self {
        let mut order: Vec<u32> = (0..nodes.len() as u32).filter(|&j| nodes.visible[j as usize]).collect();
        order.sort_by(|&a, &b| {
            nodes.points[a as usize]
                .x
                .total_cmp(&nodes.points[b as usize].x)
                .then(a.cmp(&b))
        });
        let us = order.iter().map(|&j| nodes.points[j as usize].x).collect();
        let hidden = (0..nodes.len() as u32)
            .filter(|&j| !nodes.visible[j as usize])
            .collect();
        Self {
            nodes,
            order,
            us,
            hidden,
            norm,
        }
    }

    /// Closest node and its distance; ties go to the lowest index.
    pub fn nearest(&self, b: &Vector2<f64>) -> (u32, f64) {
        let mut best = (u32::MAX, f64::INFINITY);
        let consider = |best: &mut (u32, f64), j: u32, d: f64| {
            if d < best.1 || (d == best.1 && j < best.0) {
                *best = (j, d);
            }
        };
        let start = self.us.partition_point(|&u| u < b.x);
        for k in start..self.us.len() {
            if self.norm.pow(self.us[k] - b.x) > best.1 {
                break;
            }
            let j = self.order[k];
            consider(&mut best, j, self.norm.dist(b, &self.nodes.points[j as usize]));
        }
        for k in (0..start).rev() {
            if self.norm.pow(self.us[k] - b.x) > best.1 {
                break;
            }
            let j = self.order[k];
            consider(&mut best, j, self.norm.dist(b, &self.nodes.points[j as usize]));
        }
        let penalty = self.norm.penalty();
        for &j in &self.hidden {
            consider(&mut best, j, penalty);
        }
        best
    }
}

/// Index of the closest node for every pixel (lowest index on ties).
pub fn assign_closest(pixels: &[Vector2<f64>], nodes: &NodeProjections, norm: PNorm) -> Vec<u32> {
    let index = NodeIndex::new(nodes, norm);
    map_chunks(pixels, |chunk| {
        chunk.iter().map(|b| index.nearest(b).0).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Exhaustive `O(M N)` reference for [`assign_closest`].
pub fn assign_closest_brute(pixels: &[Vector2<f64>], nodes: &NodeProjections, norm: PNorm) -> Vec<u32> {
    pixels
        .iter()
        .map(|b| {
            let mut best = (0u32, f64::INFINITY);
            for j in 0..nodes.len() {
                let d = if nodes.visible[j] {
                    norm.dist(b, &nodes.points[j])
                } else {
                    norm.penalty()
                };
                if d < best.1 {
                    best = (j as u32, d);
                }
            }
            best.0
        })
        .collect()
}

const CHUNK: usize = 2048;

#[cfg(feature = "parallel")]
fn map_chunks<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_chunks(CHUNK).map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_chunks<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&[T]) -> R,
{
    items.chunks(CHUNK).map(f).collect()
}

/// Pixel indices per view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<Vec<u32>>,
}

impl Batch {
    pub fn full(pixels: &[Vec<Vector2<f64>>]) -> Self {
        Self {
            indices: pixels.iter().map(|v| (0..v.len() as u32).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fitting problem: a curve model, the robot pixels of every view and the
/// norm exponent.
pub struct IcpProblem<M: CurveModel> {
    pub model: M,
    pub pixels: Vec<Vec<Vector2<f64>>>,
    pub norm: PNorm,
    /// Initial parameters in model units.
    pub theta0: Vec<f64>,
}

/// Cost over a batch with fixed correspondences.
#[derive(Debug, Clone)]
pub struct CostEval {
    pub cost: f64,
    pub gradient: Option<DVector<f64>>,
    /// `sum_j J_j^T D_j J_j` with `D_j` the exact second derivative of the
    /// pixel terms with respect to node `j`. Curvature of the node positions
    /// themselves is left out, so the matrix is positive semidefinite.
    pub hessian: Option<DMatrix<f64>>,
}

impl<M: CurveModel> IcpProblem<M> {
    pub fn new(model: M, pixels: Vec<Vec<Vector2<f64>>>, p: f64, theta0: Vec<f64>) -> Result<Self> {
        let norm = PNorm::new(p)?;
        if pixels.len() != model.n_views() {
            return Err(domain(format!(
                "{} pixel sets for {} views",
                pixels.len(),
                model.n_views()
            )));
        }
        if pixels.iter().all(Vec::is_empty) {
            return Err(domain("no robot pixels in any view"));
        }
        if model.n_nodes() < 2 {
            return Err(domain("at least two reconstruction nodes are required"));
        }
        if theta0.len() != model.n_params() {
            return Err(domain(format!(
                "initial parameters have length {}, model expects {}",
                theta0.len(),
                model.n_params()
            )));
        }
        Ok(Self {
            model,
            pixels,
            norm,
            theta0,
        })
    }

    pub fn total_pixels(&self) -> usize {
        self.pixels.iter().map(Vec::len).sum()
    }

    pub fn project(&self, theta: &[f64], with_jacobian: bool) -> Result<Vec<NodeProjections>> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(numeric("non-finite parameters"));
        }
        self.model.project_nodes(theta, with_jacobian)
    }

    /// Closest-node assignment for the pixels of `batch`.
    pub fn assign(&self, projections: &[NodeProjections], batch: &Batch) -> Vec<Vec<u32>> {
        batch
            .indices
            .iter()
            .enumerate()
            .map(|(g, idx)| {
                let index = NodeIndex::new(&projections[g], self.norm);
                let px = &self.pixels[g];
                map_chunks(idx, |chunk| {
                    chunk
                        .iter()
                        .map(|&i| index.nearest(&px[i as usize]).0)
                        .collect::<Vec<_>>()
                })
                .into_iter()
                .flatten()
                .collect()
            })
            .collect()
    }

    fn pixel_cost(&self, nodes: &NodeProjections, b: &Vector2<f64>, j: u32) -> f64 {
        let j = j as usize;
        if nodes.visible[j] {
            self.norm.dist(b, &nodes.points[j])
        } else {
            self.norm.penalty()
        }
    }

    /// Unscaled sum of pixel distances for `batch` under `assignment`.
    /// Entries equal to `u32::MAX` are skipped.
    pub fn raw_cost(&self, projections: &[NodeProjections], batch: &Batch, assignment: &[Vec<u32>]) -> f64 {
        let mut total = 0.0;
        for (g, (idx, asg)) in batch.indices.iter().zip(assignment).enumerate() {
            let px = &self.pixels[g];
            let nodes = &projections[g];
            for (&i, &j) in idx.iter().zip(asg) {
                if j != u32::MAX {
                    total += self.pixel_cost(nodes, &px[i as usize], j);
                }
            }
        }
        total
    }

    /// Cost (and gradient) over `batch` rescaled by `M_total / |batch|`.
    pub fn cost(
        &self,
        projections: &[NodeProjections],
        batch: &Batch,
        assignment: &[Vec<u32>],
        with_gradient: bool,
    ) -> Result<CostEval> {
        self.evaluate(projections, batch, assignment, with_gradient, false)
    }

    /// Cost, gradient and Gauss-Newton curvature over `batch`, rescaled like
    /// [`IcpProblem::cost`].
    pub fn cost_hessian(
        &self,
        projections: &[NodeProjections],
        batch: &Batch,
        assignment: &[Vec<u32>],
    ) -> Result<CostEval> {
        self.evaluate(projections, batch, assignment, true, true)
    }

    fn evaluate(
        &self,
        projections: &[NodeProjections],
        batch: &Batch,
        assignment: &[Vec<u32>],
        with_gradient: bool,
        with_hessian: bool,
    ) -> Result<CostEval> {
        let n = batch.len();
        if n == 0 {
            return Err(domain("empty batch"));
        }
        let scale = self.total_pixels() as f64 / n as f64;
        let n_params = self.model.n_params();
        let mut cost = 0.0;
        let mut gradient = with_gradient.then(|| DVector::zeros(n_params));
        let mut hessian = with_hessian.then(|| DMatrix::zeros(n_params, n_params));
        for (g, (idx, asg)) in batch.indices.iter().zip(assignment).enumerate() {
            let px = &self.pixels[g];
            let nodes = &projections[g];
            let mut node_grad = vec![Vector2::zeros(); nodes.len()];
            let mut node_curv = vec![Vector2::zeros(); nodes.len()];
            for (&i, &j) in idx.iter().zip(asg) {
                let b = &px[i as usize];
                let ju = j as usize;
                cost += self.pixel_cost(nodes, b, j);
                if with_gradient && nodes.visible[ju] {
                    let r = b - nodes.points[ju];
                    node_grad[ju] -= Vector2::new(self.norm.dpow(r.x), self.norm.dpow(r.y));
                    if with_hessian {
                        node_curv[ju] += Vector2::new(self.norm.d2pow(r.x), self.norm.d2pow(r.y));
                    }
                }
            }
            if with_gradient {
                let jac = nodes
                    .jacobians
                    .as_ref()
                    .ok_or_else(|| domain("gradient requested without node Jacobians"))?;
                for ((gj, cj), jj) in node_grad.iter().zip(&node_curv).zip(jac) {
                    if let Some(grad) = gradient.as_mut() {
                        if gj.x != 0.0 || gj.y != 0.0 {
                            grad.gemv_tr(1.0, jj, gj, 1.0);
                        }
                    }
                    if let Some(h) = hessian.as_mut() {
                        if cj.x != 0.0 || cj.y != 0.0 {
                            let weighted = nalgebra::Matrix2::from_diagonal(cj) * jj;
                            h.gemm_tr(1.0, jj, &weighted, 1.0);
                        }
                    }
                }
            }
        }
        if !cost.is_finite() {
            return Err(numeric("cost is not finite"));
        }
        let gradient = gradient.map(|g| g * scale);
        let hessian = hessian.map(|h| h * scale);
        let finite = gradient
            .iter()
            .flat_map(|g| g.iter())
            .chain(hessian.iter().flat_map(|h| h.iter()))
            .all(|v| v.is_finite());
        if !finite {
            return Err(numeric("gradient is not finite"));
        }
        Ok(CostEval {
            cost: cost * scale,
            gradient,
            hessian,
        })
    }

    /// Full-batch cost with fresh closest-point assignment.
    pub fn full_cost(&self, theta: &[f64]) -> Result<f64> {
        let proj = self.project(theta, false)?;
        let batch = Batch::full(&self.pixels);
        let asg = self.assign(&proj, &batch);
        Ok(self.raw_cost(&proj, &batch, &asg))
    }
}
