use nalgebra::{Matrix2xX, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{CurveModel, NodeProjections};
use crate::camera::CameraRig;
use crate::curve::{integrate_frame, CurveParams, Integrator, SegmentGrid, COEFFS_PER_AXIS};
use crate::error::{domain, Result};

/// How the slope coefficients `u'(l)` are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeScale {
    /// One unit changes `u` across the segment by one value unit.
    SegmentLength,
    /// Slopes use the square of the value unit.
    Squared,
}

/// Optimizer units for the curvature coefficients. The optimizer sees
/// `value_unit * u` for the node values; the default of 100 makes one unit
/// a curvature of 0.01 1/mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamScale {
    pub value_unit: f64,
    pub slope: SlopeScale,
}

impl Default for ParamScale {
    fn default() -> Self {
        Self {
            value_unit: 100.0,
            slope: SlopeScale::SegmentLength,
        }
    }
}

impl ParamScale {
    /// `d theta_physical / d theta_scaled` for every parameter.
    pub fn factors(&self, grid: &SegmentGrid) -> Result<Vec<f64>> {
        if !(self.value_unit > 0.0 && self.value_unit.is_finite()) {
            return Err(domain("parameter value unit must be positive"));
        }
        let mut out = Vec::with_capacity(grid.n_params());
        for seg in 0..grid.n_segments() {
            let (a, b) = grid.segment_range(seg);
            let slope = match self.slope {
                SlopeScale::SegmentLength => 1.0 / (self.value_unit * (b - a)),
                SlopeScale::Squared => 1.0 / (self.value_unit * self.value_unit),
            };
            for _axis in 0..2 {
                for k in 0..COEFFS_PER_AXIS {
                    out.push(if k % 2 == 0 { 1.0 / self.value_unit } else { slope });
                }
            }
        }
        Ok(out)
    }
}

/// The backbone curve seen through a calibrated camera rig, sampled at `N`
/// equidistant nodes.
#[derive(Debug, Clone)]
pub struct CameraCurveModel {
    rig: CameraRig,
    grid: SegmentGrid,
    base_position: Vector3<f64>,
    base_orientation: Matrix3<f64>,
    nodes: Vec<f64>,
    integrator: Integrator,
    factors: Vec<f64>,
}

impl CameraCurveModel {
    pub fn new(
        rig: CameraRig,
        grid: SegmentGrid,
        base_position: Vector3<f64>,
        base_orientation: Matrix3<f64>,
        n_nodes: usize,
        integrator: Integrator,
        scale: ParamScale,
    ) -> Result<Self> {
        if n_nodes < 2 {
            return Err(domain("at least two reconstruction nodes are required"));
        }
        if !matches!(integrator, Integrator::Rk4 { .. }) {
            return Err(domain("the fitting model needs the fixed-step integrator"));
        }
        // validates the base pose
        CurveParams::new(vec![0.0; grid.n_params()], base_position, base_orientation)?;
        let factors = scale.factors(&grid)?;
        Ok(Self {
            nodes: grid.equidistant(n_nodes),
            rig,
            grid,
            base_position,
            base_orientation,
            integrator,
            factors,
        })
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    pub fn grid(&self) -> &SegmentGrid {
        &self.grid
    }

    pub fn node_arc_lengths(&self) -> &[f64] {
        &self.nodes
    }

    /// Curvature parameters (1/mm, 1/mm^2) from optimizer units.
    pub fn to_physical(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.factors).map(|(t, f)| t * f).collect()
    }

    pub fn from_physical(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.factors).map(|(t, f)| t / f).collect()
    }

    pub fn curve_params(&self, theta: &[f64]) -> CurveParams {
        CurveParams {
            theta: self.to_physical(theta),
            base_position: self.base_position,
            base_orientation: self.base_orientation,
        }
    }
}

impl CurveModel for CameraCurveModel {
    fn n_params(&self) -> usize {
        self.grid.n_params()
    }

    fn n_views(&self) -> usize {
        self.rig.len()
    }

    fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn project_nodes(&self, theta: &[f64], with_jacobian: bool) -> Result<Vec<NodeProjections>> {
        if theta.len() != self.n_params() {
            return Err(domain("parameter vector has the wrong length"));
        }
        let params = self.curve_params(theta);
        let samples = integrate_frame(&params, &self.grid, &self.nodes, self.integrator, with_jacobian)?;
        let n_params = self.n_params();
        let views = self
            .rig
            .cameras
            .iter()
            .map(|cam| {
                let mut points = Vec::with_capacity(self.nodes.len());
                let mut visible = Vec::with_capacity(self.nodes.len());
                let mut jacobians = with_jacobian.then(|| Vec::with_capacity(self.nodes.len()));
                for (j, x) in samples.points.iter().enumerate() {
                    match cam.project_with_jacobian(x) {
                        Ok((px, dproj)) => {
                            points.push(px);
                            visible.push(true);
                            if let (Some(jacs), Some(sens)) = (jacobians.as_mut(), samples.sensitivities.as_ref()) {
                                let mut jac: Matrix2xX<f64> = dproj * &sens[j];
                                for (mut col, f) in jac.column_iter_mut().zip(&self.factors) {
                                    col *= *f;
                                }
                                jacs.push(jac);
                            }
                        }
                        Err(_) => {
                            points.push(Vector2::zeros());
                            visible.push(false);
                            if let Some(jacs) = jacobians.as_mut() {
                                jacs.push(Matrix2xX::zeros(n_params));
                            }
                        }
                    }
                }
                NodeProjections {
                    points,
                    jacobians,
                    visible,
                }
            })
            .collect();
        Ok(views)
    }
}
