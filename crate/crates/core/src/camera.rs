//! Calibrated pinhole cameras with radial-tangential lens distortion.
//!
//! The projection of a world point `X` (mm) into pixels is the composition
//!
//! 1. rigid transform into the camera frame, `Xc = R X + t`;
//! 2. normalization, `x_n = (Xc_x / Xc_z, Xc_y / Xc_z)`;
//! 3. lens distortion with radial `k1, k2, k3` and tangential `p1, p2`
//!    (Brown-Conrady / OpenCV "plumb bob" convention);
//! 4. intrinsic scaling, `(u, v, 1) = K (x_d, 1)`.
//!
//! Calibration files are JSON documents of the form
//!
//! ```json
//! { "cameras": [ { "R": [[1,0,0],[0,1,0],[0,0,1]], "t": [0,0,0],
//!                  "K": [[1000,0,640],[0,1000,480],[0,0,1]],
//!                  "dist": {"k1":0,"k2":0,"k3":0,"p1":0,"p2":0},
//!                  "image_size": [1280,960] } ] }
//! ```

use std::path::Path;

use nalgebra::{DMatrix, Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::curve::check_rotation;
use crate::error::{domain, Error, Result};

/// Lens distortion coefficients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }

    /// Maps undistorted normalized coordinates to distorted ones.
    pub fn apply(&self, xn: Vector2<f64>) -> Vector2<f64> {
        let (x, y) = (xn.x, xn.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2 + self.k3 * r2 * r2 * r2;
        Vector2::new(
            x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x),
            y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y,
        )
    }

    /// Whether the radial part is still increasing at `xn`. Roots past the
    /// fold of the distortion map are not physical preimages.
    pub fn is_monotone_at(&self, xn: Vector2<f64>) -> bool {
        let r2 = xn.norm_squared();
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2 + self.k3 * r2 * r2 * r2;
        let dradial = self.k1 + 2.0 * self.k2 * r2 + 3.0 * self.k3 * r2 * r2;
        radial > 0.0 && radial + 2.0 * r2 * dradial > 0.0
    }

    /// Jacobian of [`Distortion::apply`].
    pub fn jacobian(&self, xn: Vector2<f64>) -> Matrix2<f64> {
        let (x, y) = (xn.x, xn.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2 + self.k3 * r2 * r2 * r2;
        // d radial / d r2
        let dradial = self.k1 + 2.0 * self.k2 * r2 + 3.0 * self.k3 * r2 * r2;
        let dxx = radial + x * dradial * 2.0 * x + 2.0 * self.p1 * y + self.p2 * 6.0 * x;
        let dxy = x * dradial * 2.0 * y + 2.0 * self.p1 * x + self.p2 * 2.0 * y;
        let dyx = y * dradial * 2.0 * x + self.p1 * 2.0 * x + 2.0 * self.p2 * y;
        let dyy = radial + y * dradial * 2.0 * y + self.p1 * 6.0 * y + 2.0 * self.p2 * x;
        Matrix2::new(dxx, dxy, dyx, dyy)
    }
}

/// One calibrated view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation in mm.
    pub translation: Vector3<f64>,
    /// Upper-triangular intrinsic matrix with unit bottom-right entry.
    pub intrinsics: Matrix3<f64>,
    pub distortion: Distortion,
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
}

impl CameraModel {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        intrinsics: Matrix3<f64>,
        distortion: Distortion,
        image_size: (u32, u32),
    ) -> Result<Self> {
        check_rotation(&rotation, 1e-9)?;
        let k = &intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(domain("intrinsic matrix must be upper triangular with K[2][2] = 1"));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(domain("focal lengths must be positive"));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(domain("image size must be positive"));
        }
        let finite = rotation
            .iter()
            .chain(translation.iter())
            .chain(intrinsics.iter())
            .all(|v| v.is_finite())
            && [
                distortion.k1,
                distortion.k2,
                distortion.k3,
                distortion.p1,
                distortion.p2,
            ]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(domain("camera parameters must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
            intrinsics,
            distortion,
            image_size,
        })
    }

    /// Camera at `center` looking at `target`; image rows run against `up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        center: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: (f64, f64),
        principal_point: (f64, f64),
        distortion: Distortion,
        image_size: (u32, u32),
    ) -> Result<Self> {
        let forward = (target - center)
            .try_normalize(1e-12)
            .ok_or_else(|| domain("camera center coincides with its target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| domain("up vector is parallel to the viewing direction"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * center);
        let intrinsics = Matrix3::new(
            focal.0,
            0.0,
            principal_point.0, //
            0.0,
            focal.1,
            principal_point.1, //
            0.0,
            0.0,
            1.0,
        );
        Self::new(rotation, translation, intrinsics, distortion, image_size)
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera_frame(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Intrinsic scaling of (distorted) normalized coordinates.
    pub fn to_pixel(&self, xd: Vector2<f64>) -> Vector2<f64> {
        let k = &self.intrinsics;
        Vector2::new(
            k[(0, 0)] * xd.x + k[(0, 1)] * xd.y + k[(0, 2)],
            k[(1, 1)] * xd.y + k[(1, 2)],
        )
    }

    /// Inverse of [`CameraModel::to_pixel`].
    pub fn from_pixel(&self, px: Vector2<f64>) -> Vector2<f64> {
        let k = &self.intrinsics;
        let y = (px.y - k[(1, 2)]) / k[(1, 1)];
        let x = (px.x - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        Vector2::new(x, y)
    }

    fn intrinsic_block(&self) -> Matrix2<f64> {
        self.intrinsics.fixed_view::<2, 2>(0, 0).into_owned()
    }

    /// Projects a world point to real-valued pixel coordinates.
    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>> {
        let xc = self.to_camera_frame(x);
        if xc.z <= 0.0 {
            return Err(Error::BehindCamera { depth: xc.z });
        }
        let xn = Vector2::new(xc.x / xc.z, xc.y / xc.z);
        Ok(self.to_pixel(self.distortion.apply(xn)))
    }

    /// Projection and its `2 x 3` Jacobian with respect to the world point.
    pub fn project_with_jacobian(&self, x: &Vector3<f64>) -> Result<(Vector2<f64>, Matrix2x3<f64>)> {
        let xc = self.to_camera_frame(x);
        if xc.z <= 0.0 {
            return Err(Error::BehindCamera { depth: xc.z });
        }
        let iz = 1.0 / xc.z;
        let xn = Vector2::new(xc.x * iz, xc.y * iz);
        let dn = Matrix2x3::new(
            iz,
            0.0,
            -xc.x * iz * iz, //
            0.0,
            iz,
            -xc.y * iz * iz,
        );
        let jac = self.intrinsic_block() * self.distortion.jacobian(xn) * dn * self.rotation;
        Ok((self.to_pixel(self.distortion.apply(xn)), jac))
    }

    pub fn project_jacobian(&self, x: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
        self.project_with_jacobian(x).map(|(_, j)| j)
    }

    /// Inverts distortion and intrinsics for one pixel, returning undistorted
    /// normalized coordinates.
    pub fn undistort_pixel(&self, px: Vector2<f64>) -> Result<Vector2<f64>> {
        const MAX_ITER: usize = 100;
        const TOL_PX: f64 = 1e-9;
        let target = self.from_pixel(px);
        if self.distortion.is_zero() {
            return Ok(target);
        }
        let kb = self.intrinsic_block();
        let mut x = target;
        let mut best = (f64::INFINITY, x);
        for _ in 0..MAX_ITER {
            let r = self.distortion.apply(x) - target;
            let res_px = (kb * r).norm();
            if res_px < best.0 {
                best = (res_px, x);
            }
            if res_px <= 1e-3 * TOL_PX {
                break;
            }
            let Some(step) = self.distortion.jacobian(x).lu().solve(&r) else {
                break;
            };
            x -= step;
            if !x.iter().all(|v| v.is_finite()) {
                break;
            }
        }
        let (_, x) = best;
        let residual = (self.to_pixel(self.distortion.apply(x)) - px).norm();
        if residual > TOL_PX || !self.distortion.is_monotone_at(x) {
            return Err(Error::Inversion {
                u: px.x,
                v: px.y,
                residual,
            });
        }
        Ok(x)
    }

    /// Undistorts a batch of pixels to normalized coordinates.
    pub fn undistort_points(&self, pixels: &[Vector2<f64>]) -> Result<Vec<Vector2<f64>>> {
        let (w, h) = self.image_size;
        let outside = pixels
            .iter()
            .filter(|p| p.x < -0.5 || p.y < -0.5 || p.x > w as f64 - 0.5 || p.y > h as f64 - 0.5)
            .count();
        if outside > 0 {
            log::warn!("undistorting {outside} pixel(s) outside the {w}x{h} image");
        }
        pixels.iter().map(|p| self.undistort_pixel(*p)).collect()
    }

    /// Undistorted pixel: normalized coordinates mapped back through `K`
    /// without distortion.
    pub fn ideal_pixel(&self, px: Vector2<f64>) -> Result<Vector2<f64>> {
        Ok(self.to_pixel(self.undistort_pixel(px)?))
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        let (w, h) = self.image_size;
        px.x >= -0.5 && px.y >= -0.5 && px.x < w as f64 - 0.5 && px.y < h as f64 - 0.5
    }
}

pub(crate) fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -t.z, t.y, //
        t.z, 0.0, -t.x, //
        -t.y, t.x, 0.0,
    )
}

/// Essential matrix mapping normalized left coordinates to right epipolar
/// lines: `x_R^T E x_L = 0`.
pub fn essential_matrix(left: &CameraModel, right: &CameraModel) -> Result<Matrix3<f64>> {
    if (left.center() - right.center()).norm() <= 1e-9 * (1.0 + left.center().norm()) {
        return Err(Error::DegenerateGeometry("camera centers coincide".into()));
    }
    let r_rel = right.rotation * left.rotation.transpose();
    let t_rel = right.translation - r_rel * left.translation;
    Ok(skew(&t_rel) * r_rel)
}

/// Fundamental matrix `F = K_R^{-T} [t]x R K_L^{-1}` for undistorted pixels,
/// normalized to unit Frobenius norm.
pub fn fundamental_matrix(left: &CameraModel, right: &CameraModel) -> Result<Matrix3<f64>> {
    let e = essential_matrix(left, right)?;
    let kl_inv = left
        .intrinsics
        .try_inverse()
        .ok_or_else(|| domain("left intrinsics are singular"))?;
    let kr_inv = right
        .intrinsics
        .try_inverse()
        .ok_or_else(|| domain("right intrinsics are singular"))?;
    let f = kr_inv.transpose() * e * kl_inv;
    Ok(f / f.norm())
}

/// A set of calibrated views.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<CameraModel>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    t: [f64; 3],
    #[serde(rename = "K")]
    k: [[f64; 3]; 3],
    dist: Distortion,
    image_size: [u32; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationJson {
    cameras: Vec<CameraJson>,
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn from_rows(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

impl CameraJson {
    fn into_model(self) -> Result<CameraModel> {
        CameraModel::new(
            from_rows(&self.r),
            Vector3::from(self.t),
            from_rows(&self.k),
            self.dist,
            (self.image_size[0], self.image_size[1]),
        )
    }

    fn from_model(c: &CameraModel) -> Self {
        Self {
            r: rows(&c.rotation),
            t: c.translation.into(),
            k: rows(&c.intrinsics),
            dist: c.distortion,
            image_size: [c.image_size.0, c.image_size.1],
        }
    }
}

impl Serialize for CameraRig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CalibrationJson {
            cameras: self.cameras.iter().map(CameraJson::from_model).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraRig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = CalibrationJson::deserialize(d)?;
        let cameras = raw
            .cameras
            .into_iter()
            .map(CameraJson::into_model)
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        CameraRig::new(cameras).map_err(serde::de::Error::custom)
    }
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraModel>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(domain("a camera rig needs at least one camera"));
        }
        Ok(Self { cameras })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Result of triangulating one multi-view correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub point: Vector3<f64>,
    /// RMS reprojection residual over the views, px.
    pub reprojection_rms: f64,
    /// Ratio of the largest to the third-largest singular value of the
    /// row-normalized DLT system.
    pub condition: f64,
    pub ill_conditioned: bool,
}

/// Condition number above which a triangulation is flagged.
pub const ILL_CONDITIONED: f64 = 1e8;

/// Linear (DLT) triangulation from raw distorted pixels, refined by one
/// Gauss-Newton pass on the reprojection error.
pub fn triangulate(cameras: &[&CameraModel], pixels: &[Vector2<f64>]) -> Result<Triangulation> {
    if cameras.len() < 2 {
        return Err(domain("triangulation needs at least two views"));
    }
    if cameras.len() != pixels.len() {
        return Err(domain("one pixel per view is required"));
    }
    let mut a = DMatrix::<f64>::zeros(2 * cameras.len(), 4);
    for (v, (cam, px)) in cameras.iter().zip(pixels).enumerate() {
        let xn = cam.undistort_pixel(*px)?;
        let r = &cam.rotation;
        let t = &cam.translation;
        for (row, coord) in [(0usize, xn.x), (1usize, xn.y)] {
            let mut line = [0.0; 4];
            for c in 0..3 {
                line[c] = coord * r[(2, c)] - r[(row, c)];
            }
            line[3] = coord * t.z - t[row];
            let norm = line.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (c, val) in line.iter().enumerate() {
                a[(2 * v + row, c)] = val / norm;
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| domain("SVD failed in triangulation"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let smallest = *order.last().unwrap();
    let sigma = |k: usize| svd.singular_values[order[k]];
    let condition = if sigma(2) > 0.0 {
        sigma(0) / sigma(2)
    } else {
        f64::INFINITY
    };
    let h = v_t.row(smallest);
    if h[3] == 0.0 {
        return Err(Error::DegenerateGeometry("triangulated point at infinity".into()));
    }
    let mut point = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    let ill_conditioned = !(condition <= ILL_CONDITIONED);
    if ill_conditioned {
        log::warn!("ill-conditioned triangulation (condition {condition:e})");
    }

    let residuals = |p: &Vector3<f64>| -> Option<f64> {
        let mut sum = 0.0;
        for (cam, px) in cameras.iter().zip(pixels) {
            sum += (cam.project(p).ok()? - px).norm_squared();
        }
        Some(sum)
    };

    if !ill_conditioned {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        let mut ok = true;
        for (cam, px) in cameras.iter().zip(pixels) {
            match cam.project_with_jacobian(&point) {
                Ok((proj, jac)) => {
                    let r = proj - px;
                    jtj += jac.transpose() * jac;
                    jtr += jac.transpose() * r;
                }
                Err(_) => ok = false,
            }
        }
        if ok {
            if let (Some(step), Some(before)) = (jtj.lu().solve(&(-jtr)), residuals(&point)) {
                let candidate = point + step;
                if matches!(residuals(&candidate), Some(after) if after <= before) {
                    point = candidate;
                }
            }
        }
    }
    let reprojection_rms = residuals(&point)
        .map(|s| (s / cameras.len() as f64).sqrt())
        .unwrap_or(f64::INFINITY);
    Ok(Triangulation {
        point,
        reprojection_rms,
        condition,
        ill_conditioned,
    })
}
