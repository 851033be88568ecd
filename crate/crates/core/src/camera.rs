//! Pinhole camera model: projection, back-projection and cross-view
//! reprojection with its analytic depth derivative.
//!
//! Conventions used throughout the crate:
//! - pixel coordinates are `(u, v)` = (column, row), measured at pixel centers;
//! - extrinsics are world-to-camera: `x_cam = R * x_world + t`;
//! - all metric units are millimeters.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Focal lengths and principal point in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::config(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics for a feature grid downscaled by `s` (e.g. 0.25 or 0.5).
    ///
    /// Pixel `(u, v)` of the scaled grid corresponds to pixel `(u/s, v/s)`
    /// of the original image.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        if s <= 0.0 {
            return Err(Error::config(format!("scale must be positive, got {s}")));
        }
        Intrinsics::new(self.fx * s, self.fy * s, self.cx * s, self.cy * s)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Project a camera-frame point with z > 0 to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl Pose {
    /// Validates that `rotation` is a proper rotation (R^T R = I, det = 1
    /// within 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let err = (gram - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max |R^T R - I| = {err:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invalid(format!(
                "rotation determinant is {det}, expected 1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// 4x4 homogeneous world-to-camera matrix.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// One calibrated input view: image, intrinsics, pose and usable depth range.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub id: usize,
    /// H x W x 3 image with values in [0, 1].
    pub image: Tensor,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    /// (d_min, d_max) in mm.
    pub depth_range: (f64, f64),
}

impl CameraView {
    pub fn new(
        id: usize,
        image: Tensor,
        intrinsics: Intrinsics,
        pose: Pose,
        depth_range: (f64, f64),
    ) -> Result<Self> {
        let (d_min, d_max) = depth_range;
        if !(0.0 < d_min && d_min < d_max) {
            return Err(Error::config(format!(
                "depth range must satisfy 0 < d_min < d_max, got ({d_min}, {d_max})"
            )));
        }
        if image.shape().len() != 3 || image.shape()[2] != 3 {
            return Err(Error::shape(format!(
                "view image must be HxWx3, got {:?}",
                image.shape()
            )));
        }
        Ok(Self {
            id,
            image,
            intrinsics,
            pose,
            depth_range,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Back-project pixel `p` at `depth` into the camera frame.
///
/// Fails on non-positive depth; the returned point projects back to `p`
/// exactly.
pub fn backproject(p: Vector2<f64>, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(Error::invalid(format!(
            "backproject requires depth > 0, got {depth}"
        )));
    }
    Ok(Vector3::new(
        (p.x - k.cx) / k.fx * depth,
        (p.y - k.cy) / k.fy * depth,
        depth,
    ))
}

/// Where a reprojected pixel landed in the source view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reprojection {
    /// Continuous pixel coordinates in the source view.
    pub pixel: Vector2<f64>,
    /// Depth of the point in the source camera frame (mm).
    pub src_depth: f64,
    /// False when the point lies at or behind the source camera plane;
    /// callers must mask such samples rather than use `pixel`.
    pub in_front: bool,
}

/// Rigid map from a depth along the reference pixel ray to a source-frame
/// point: `x_src(depth) = dir * depth + offset`.
///
/// Precomputing this once per pixel makes hypothesis sweeps and the depth
/// derivative cheap.
#[derive(Debug, Clone, Copy)]
pub struct PixelRay {
    dir: Vector3<f64>,
    offset: Vector3<f64>,
}

impl PixelRay {
    pub fn new(p: Vector2<f64>, ref_view: &CameraView, src_view: &CameraView) -> Self {
        let k0 = &ref_view.intrinsics;
        let ray = Vector3::new((p.x - k0.cx) / k0.fx, (p.y - k0.cy) / k0.fy, 1.0);
        // R_i R_0^T (d * ray - t_0) + t_i, split into the d-linear part and the rest.
        let rel = src_view.pose.rotation() * ref_view.pose.rotation().transpose();
        let dir = rel * ray;
        let offset =
            src_view.pose.translation() - rel * ref_view.pose.translation();
        Self { dir, offset }
    }

    pub fn src_point(&self, depth: f64) -> Vector3<f64> {
        self.dir * depth + self.offset
    }

    /// Reprojected pixel and source depth at `depth`.
    pub fn reproject(&self, depth: f64, src_k: &Intrinsics) -> Reprojection {
        let x = self.src_point(depth);
        if x.z <= 0.0 {
            return Reprojection {
                pixel: Vector2::zeros(),
                src_depth: x.z,
                in_front: false,
            };
        }
        Reprojection {
            pixel: src_k.project(&x),
            src_depth: x.z,
            in_front: true,
        }
    }

    /// Analytic derivative of the reprojected pixel with respect to depth,
    /// in pixels per mm. `None` when the point is not in front of the
    /// source camera.
    pub fn depth_jacobian(&self, depth: f64, src_k: &Intrinsics) -> Option<Vector2<f64>> {
        let x = self.src_point(depth);
        if x.z <= 0.0 {
            return None;
        }
        let zz = x.z * x.z;
        Some(Vector2::new(
            src_k.fx * (self.dir.x * x.z - x.x * self.dir.z) / zz,
            src_k.fy * (self.dir.y * x.z - x.y * self.dir.z) / zz,
        ))
    }
}

/// Reproject reference pixel `p` at `depth` into `src`.
///
/// Computes `p' = K_i (R_i R_0^-1 (depth * K_0^-1 p - t_0) + t_i)` with the
/// homogeneous division, and reports the source-frame depth for visibility
/// tests.
pub fn reproject(
    p: Vector2<f64>,
    depth: f64,
    ref_view: &CameraView,
    src_view: &CameraView,
) -> Result<Reprojection> {
    if depth <= 0.0 {
        return Err(Error::invalid(format!(
            "reproject requires depth > 0, got {depth}"
        )));
    }
    Ok(PixelRay::new(p, ref_view, src_view).reproject(depth, &src_view.intrinsics))
}

/// Analytic `d p' / d depth` of [`reproject`].
///
/// Returns `None` (flagged invalid) when the point lies behind the source
/// camera.
pub fn reproject_jacobian(
    p: Vector2<f64>,
    depth: f64,
    ref_view: &CameraView,
    src_view: &CameraView,
) -> Result<Option<Vector2<f64>>> {
    if depth <= 0.0 {
        return Err(Error::invalid(format!(
            "reproject_jacobian requires depth > 0, got {depth}"
        )));
    }
    Ok(PixelRay::new(p, ref_view, src_view).depth_jacobian(depth, &src_view.intrinsics))
}

/// A camera view with intrinsics rescaled for a downsampled grid.
///
/// The image tensor is carried over unchanged; reprojection only needs the
/// scaled intrinsics and the pose.
pub fn scale_view(view: &CameraView, s: f64) -> Result<CameraView> {
    Ok(CameraView {
        id: view.id,
        image: view.image.clone(),
        intrinsics: view.intrinsics.scaled(s)?,
        pose: view.pose.clone(),
        depth_range: view.depth_range,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector4;

    fn dummy_image() -> Tensor {
        Tensor::zeros(&[8, 8, 3])
    }

    fn view(k: Intrinsics, pose: Pose) -> CameraView {
        CameraView::new(0, dummy_image(), k, pose, (50.0, 1000.0)).unwrap()
    }

    fn rot_y(angle: f64) -> Matrix3<f64> {
        let (s, c) = angle.sin_cos();
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
    }

    #[test]
    fn backproject_principal_point_is_optical_axis() {
        let k = Intrinsics::new(200.0, 200.0, 32.0, 24.0).unwrap();
        let p = backproject(Vector2::new(32.0, 24.0), 100.0, &k).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 100.0));
    }

    #[test]
    fn backproject_unit_tangent() {
        let k = Intrinsics::new(200.0, 200.0, 32.0, 24.0).unwrap();
        let p = backproject(Vector2::new(32.0 + 200.0, 24.0), 50.0, &k).unwrap();
        assert_eq!(p, Vector3::new(50.0, 0.0, 50.0));
    }

    #[test]
    fn backproject_hand_arithmetic() {
        // fx = fy = 200, cx = cy = 0: (10,20) at depth 300 -> (15, 30, 300).
        let k = Intrinsics::new(200.0, 200.0, 0.0, 0.0).unwrap();
        let p = backproject(Vector2::new(10.0, 20.0), 300.0, &k).unwrap();
        assert!((p - Vector3::new(15.0, 30.0, 300.0)).norm() < 1e-12);
        // And it projects back to the pixel exactly.
        let q = k.project(&p);
        assert!((q - Vector2::new(10.0, 20.0)).norm() < 1e-12);
    }

    #[test]
    fn backproject_rejects_nonpositive_depth() {
        let k = Intrinsics::new(200.0, 200.0, 0.0, 0.0).unwrap();
        assert!(backproject(Vector2::new(1.0, 1.0), 0.0, &k).is_err());
        assert!(backproject(Vector2::new(1.0, 1.0), -3.0, &k).is_err());
    }

    #[test]
    fn reproject_identity_view_is_identity() {
        let k = Intrinsics::new(180.0, 190.0, 31.0, 25.0).unwrap();
        let pose = Pose::new(rot_y(0.3), Vector3::new(5.0, -2.0, 1.0)).unwrap();
        let a = view(k, pose.clone());
        let b = view(k, pose);
        for depth in [60.0, 120.0, 555.5] {
            let r = reproject(Vector2::new(12.5, 40.25), depth, &a, &b).unwrap();
            assert!(r.in_front);
            assert!((r.pixel - Vector2::new(12.5, 40.25)).norm() < 1e-9);
            assert!((r.src_depth - depth).abs() < 1e-9);
        }
    }

    #[test]
    fn reproject_jacobian_zero_for_identity_view() {
        let k = Intrinsics::new(180.0, 190.0, 31.0, 25.0).unwrap();
        let a = view(k, Pose::identity());
        let b = view(k, Pose::identity());
        let j = reproject_jacobian(Vector2::new(3.0, 7.0), 200.0, &a, &b)
            .unwrap()
            .unwrap();
        assert!(j.norm() < 1e-12);
    }

    #[test]
    fn reproject_jacobian_zero_on_axis_for_pure_z_translation() {
        let k = Intrinsics::new(180.0, 190.0, 31.0, 25.0).unwrap();
        let a = view(k, Pose::identity());
        let b = view(
            k,
            Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 30.0)).unwrap(),
        );
        // Principal point stays put for motion along the optical axis.
        let j = reproject_jacobian(Vector2::new(31.0, 25.0), 200.0, &a, &b)
            .unwrap()
            .unwrap();
        assert!(j.norm() < 1e-12);
    }

    #[test]
    fn reproject_matches_homogeneous_matrix_oracle() {
        // Two-camera rig with a 10 mm lateral baseline; oracle goes through
        // the full 4x4 projective pipeline.
        let k0 = Intrinsics::new(200.0, 210.0, 32.0, 24.0).unwrap();
        let k1 = Intrinsics::new(190.0, 205.0, 30.0, 26.0).unwrap();
        let ref_view = view(k0, Pose::identity());
        let src_pose = Pose::new(rot_y(0.05), Vector3::new(-10.0, 0.0, 0.0)).unwrap();
        let src_view = view(k1, src_pose.clone());

        let p = Vector2::new(20.0, 28.0);
        let depth = 400.0;
        let got = reproject(p, depth, &ref_view, &src_view).unwrap();

        // Oracle: lift to homogeneous world coordinates, then 4x4 transforms.
        let xc = backproject(p, depth, &k0).unwrap();
        let xw = ref_view.pose.camera_to_world(&xc);
        let xh = src_pose.matrix() * Vector4::new(xw.x, xw.y, xw.z, 1.0);
        let proj = k1.matrix() * Vector3::new(xh.x, xh.y, xh.z);
        let expect = Vector2::new(proj.x / proj.z, proj.y / proj.z);

        assert!(got.in_front);
        assert!((got.pixel - expect).norm() < 1e-9, "got {:?}", got.pixel);
        assert!((got.src_depth - xh.z).abs() < 1e-9);
    }

    #[test]
    fn reproject_flags_behind_camera() {
        let k = Intrinsics::new(200.0, 200.0, 32.0, 24.0).unwrap();
        let a = view(k, Pose::identity());
        // Source camera far ahead along +z: a shallow point falls behind it.
        let b = view(
            k,
            Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -500.0)).unwrap(),
        );
        let r = reproject(Vector2::new(32.0, 24.0), 100.0, &a, &b).unwrap();
        assert!(!r.in_front);
        assert!(reproject_jacobian(Vector2::new(32.0, 24.0), 100.0, &a, &b)
            .unwrap()
            .is_none());
    }

    #[test]
    fn epipolar_collinearity() {
        let k = Intrinsics::new(220.0, 220.0, 32.0, 32.0).unwrap();
        let a = view(k, Pose::identity());
        let b = view(
            k,
            Pose::new(rot_y(-0.1), Vector3::new(25.0, 5.0, 3.0)).unwrap(),
        );
        let p = Vector2::new(11.0, 47.0);
        let d = 300.0;
        let p1 = reproject(p, d, &a, &b).unwrap().pixel;
        let p2 = reproject(p, 2.0 * d, &a, &b).unwrap().pixel;
        let p3 = reproject(p, 3.0 * d, &a, &b).unwrap().pixel;
        let u = p2 - p1;
        let w = p3 - p1;
        let cross = (u.x * w.y - u.y * w.x).abs() / (u.norm() * w.norm()).max(1e-300);
        assert!(cross < 1e-7, "collinearity residual {cross}");
    }

    #[test]
    fn scale_intrinsics_composition() {
        let k = Intrinsics::new(800.0, 820.0, 320.0, 240.0).unwrap();
        let once = k.scaled(1.0).unwrap();
        assert_eq!(once, k);
        let twice = k.scaled(0.25).unwrap().scaled(0.25).unwrap();
        let direct = k.scaled(0.0625).unwrap();
        assert_eq!(twice, direct);
        assert_eq!(k.scaled(0.25).unwrap().fx, 200.0);
        assert!(k.scaled(0.0).is_err());
    }

    #[test]
    fn pose_rejects_non_orthonormal() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.1;
        assert!(Pose::new(r, Vector3::zeros()).is_err());
        // Reflection: orthonormal but det = -1.
        let mut refl = Matrix3::identity();
        refl[(2, 2)] = -1.0;
        assert!(Pose::new(refl, Vector3::zeros()).is_err());
    }

    #[test]
    fn camera_center_roundtrip() {
        let pose = Pose::new(rot_y(0.7), Vector3::new(3.0, -8.0, 12.0)).unwrap();
        let c = pose.center();
        assert!(pose.world_to_camera(&c).norm() < 1e-12);
    }

    #[test]
    fn view_validates_depth_range() {
        let k = Intrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap();
        assert!(CameraView::new(0, dummy_image(), k, Pose::identity(), (10.0, 5.0)).is_err());
        assert!(CameraView::new(0, dummy_image(), k, Pose::identity(), (0.0, 5.0)).is_err());
    }
}
