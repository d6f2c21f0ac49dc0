//! Oriented boxes, rotated IoU, rigid transforms and the camera projection chain.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::{Error, Result};

/// Wrap an angle into `(-pi, pi]`.
pub fn normalize_yaw(a: f64) -> f64 {
    let mut y = a.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

/// Yaw-only oriented 3D box: center, full extents along its local axes, heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        let vals = center.iter().chain(&size).chain(std::iter::once(&yaw));
        if vals.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("box parameters must be finite".into()));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument(format!("box sizes must be positive, got {size:?}")));
        }
        Ok(Self {
            x: center[0],
            y: center[1],
            z: center[2],
            dx: size[0],
            dy: size[1],
            dz: size[2],
            yaw: normalize_yaw(yaw),
        })
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.dx, self.dy, self.dz, self.yaw]
    }

    pub fn volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    pub fn bev_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn z_min(&self) -> f64 {
        self.z - 0.5 * self.dz
    }

    pub fn z_max(&self) -> f64 {
        self.z + 0.5 * self.dz
    }

    /// Footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hx, hy) = (0.5 * self.dx, 0.5 * self.dy);
        [(hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)].map(|(lx, ly)| [self.x + c * lx - s * ly, self.y + s * lx + c * ly])
    }

    /// Express a world point in box-local coordinates.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }

    pub fn to_world(&self, l: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * l[0] - s * l[1], self.y + s * l[0] + c * l[1], self.z + l[2]]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        l[0].abs() <= 0.5 * self.dx && l[1].abs() <= 0.5 * self.dy && l[2].abs() <= 0.5 * self.dz
    }

    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let l = self.to_local([x, y, self.z]);
        l[0].abs() <= 0.5 * self.dx && l[1].abs() <= 0.5 * self.dy
    }

    /// Radius of the footprint's circumscribed circle.
    pub fn bev_radius(&self) -> f64 {
        0.5 * self.dx.hypot(self.dy)
    }
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum();
    0.5 * twice.abs()
}

/// Clip `subject` by the half-plane left of the directed edge `a -> b`.
fn clip_half_plane(subject: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let mut out = Vec::with_capacity(subject.len() + 1);
    for i in 0..subject.len() {
        let cur = subject[i];
        let prev = subject[(i + subject.len() - 1) % subject.len()];
        let (sc, sp) = (side(cur), side(prev));
        if sc >= 0.0 {
            if sp < 0.0 {
                let t = sp / (sp - sc);
                out.push([prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])]);
            }
            out.push(cur);
        } else if sp >= 0.0 {
            let t = sp / (sp - sc);
            out.push([prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])]);
        }
    }
    out
}

/// Area of the intersection of two box footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let dist = (a.x - b.x).hypot(a.y - b.y);
    if dist > a.bev_radius() + b.bev_radius() {
        return 0.0;
    }
    let clip = b.bev_corners();
    let mut poly = a.bev_corners().to_vec();
    for i in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_half_plane(&poly, clip[i], clip[(i + 1) % 4]);
    }
    polygon_area(&poly)
}

/// Rotated bird's-eye-view IoU of two footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU: footprint intersection times vertical overlap over volume union.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let h = a.z_max().min(b.z_max()) - a.z_min().max(b.z_min());
    if h <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * h;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

/// 4x4 homogeneous transform with an orthonormal rotation block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    matrix: Matrix4<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    pub fn from_rotation_translation(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if orth > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("rotation block is not a proper rotation".into()));
        }
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Ok(Self { matrix: m })
    }

    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        let bottom = Vector4::new(0.0, 0.0, 0.0, 1.0);
        if (matrix.row(3).transpose() - bottom).abs().max() > 1e-9 {
            return Err(Error::InvalidArgument("last row of a rigid transform must be 0 0 0 1".into()));
        }
        let r: Matrix3<f64> = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = matrix.fixed_view::<3, 1>(0, 3).into_owned();
        Self::from_rotation_translation(r, t)
    }

    /// Rotation about +z by `yaw`, then translation.
    pub fn yaw_translation(yaw: f64, translation: [f64; 3]) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).into_inner();
        Self::from_rotation_translation(r, Vector3::from(translation)).expect("valid rotation")
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> Self {
        let r: Matrix3<f64> = self.matrix.fixed_view::<3, 3>(0, 0).transpose();
        let t: Vector3<f64> = self.matrix.fixed_view::<3, 1>(0, 3).into_owned();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-r * t));
        Self { matrix: m }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            matrix: self.matrix * other.matrix,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.matrix * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }
}

/// Pinhole intrinsics with image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    matrix: Matrix3<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!("focal lengths must be positive ({fx}, {fy})")));
        }
        if !(0.0..=width as f64).contains(&cx) || !(0.0..=height as f64).contains(&cy) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            matrix: Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0),
            width,
            height,
        })
    }

    /// Intrinsics from an arbitrary 3x3 matrix (no validity checks beyond size).
    pub fn from_matrix(matrix: Matrix3<f64>, width: usize, height: usize) -> Self {
        Self { matrix, width, height }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    /// Intrinsics of a feature map `factor` times smaller than the image.
    pub fn downscaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        let mut m = self.matrix;
        m[(0, 0)] /= f;
        m[(1, 1)] /= f;
        m[(0, 2)] /= f;
        m[(1, 2)] /= f;
        Self {
            matrix: m,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    fn homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.matrix);
        m
    }
}

/// Lift pixel `(u, v)` at depth `d` into the (augmented) ego frame:
/// `T_lidar_aug * T_ext * A^-1 * T_img_aug^-1 * (u d, v d, d, 1)`.
///
/// `T_ext` maps camera coordinates to ego coordinates.
pub fn transform_pixel_to_ego(
    u: f64,
    v: f64,
    d: f64,
    intrinsics: &CameraIntrinsics,
    t_ext: &RigidTransform,
    t_img_aug: &Matrix4<f64>,
    t_lidar_aug: &Matrix4<f64>,
) -> Result<[f64; 3]> {
    if !(d > 0.0) {
        return Err(Error::InvalidArgument(format!("depth must be positive, got {d}")));
    }
    let a_inv = intrinsics
        .homogeneous()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("singular intrinsic matrix".into()))?;
    let img_inv = t_img_aug
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("singular image augmentation".into()))?;
    let p = t_lidar_aug * (t_ext.matrix() * (a_inv * (img_inv * Vector4::new(u * d, v * d, d, 1.0))));
    Ok([p[0], p[1], p[2]])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    InFrame { u: f64, v: f64, depth: f64 },
    OutOfFrame { u: f64, v: f64, depth: f64 },
    BehindCamera,
}

/// Project an ego-frame point to pixel coordinates.
pub fn project_to_pixel(point: [f64; 3], intrinsics: &CameraIntrinsics, t_ext: &RigidTransform) -> Projection {
    let cam = t_ext.inverse().apply(point);
    let depth = cam[2];
    if depth <= 1e-9 {
        return Projection::BehindCamera;
    }
    let m = intrinsics.matrix();
    let q = m * Vector3::new(cam[0], cam[1], cam[2]);
    let (u, v) = (q[0] / q[2], q[1] / q[2]);
    if u >= 0.0 && v >= 0.0 && u < intrinsics.width as f64 && v < intrinsics.height as f64 {
        Projection::InFrame { u, v, depth }
    } else {
        Projection::OutOfFrame { u, v, depth }
    }
}

/// Confidence-weighted box fusion.
///
/// Weights are renormalised to sum to one. Centers and sizes average linearly;
/// yaw is a weighted circular mean after flipping each heading into the
/// half-plane of the highest-weight box (first one wins ties).
pub fn weighted_box_mean(boxes: &[(Box3D, f64)]) -> Result<Box3D> {
    if boxes.is_empty() {
        return Err(Error::Empty("weighted_box_mean of an empty set".into()));
    }
    if boxes.iter().any(|(_, w)| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("fusion weights must be positive".into()));
    }
    if boxes.len() == 1 {
        return Ok(boxes[0].0);
    }
    let total: f64 = boxes.iter().map(|(_, w)| w).sum();
    let dominant = boxes
        .iter()
        .enumerate()
        .fold(0, |best, (i, (_, w))| if *w > boxes[best].1 { i } else { best });
    let ref_yaw = boxes[dominant].0.yaw;
    let mut acc = [0.0f64; 6];
    let (mut sx, mut sy) = (0.0, 0.0);
    for (b, w) in boxes {
        let w = w / total;
        for (a, v) in acc.iter_mut().zip([b.x, b.y, b.z, b.dx, b.dy, b.dz]) {
            *a += w * v;
        }
        let mut yaw = b.yaw;
        if normalize_yaw(yaw - ref_yaw).abs() > 0.5 * PI {
            yaw += PI;
        }
        sx += w * yaw.cos();
        sy += w * yaw.sin();
    }
    let yaw = if sx == 0.0 && sy == 0.0 { ref_yaw } else { sy.atan2(sx) };
    Box3D::new([acc[0], acc[1], acc[2]], [acc[3], acc[4], acc[5]], yaw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Rng;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, z: f64, dx: f64, dy: f64, dz: f64, yaw: f64) -> Box3D {
        Box3D::new([x, y, z], [dx, dy, dz], yaw).unwrap()
    }

    #[test]
    fn yaw_normalization_range() {
        assert_eq!(normalize_yaw(PI), PI);
        assert_eq!(normalize_yaw(-PI), PI);
        assert!((normalize_yaw(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0).is_err());
        assert!(Box3D::new([f64::NAN, 0.0, 0.0], [1.0; 3], 0.0).is_err());
    }

    #[test]
    fn identical_boxes() {
        let a = bx(1.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.3);
        assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn far_apart() {
        let a = bx(0.0, 0.0, 0.0, 4.0, 2.0, 1.0, 0.0);
        let b = bx(10.0, 0.0, 0.0, 4.0, 2.0, 1.0, 1.0);
        assert_eq!(bev_iou(&a, &b), 0.0);
    }

    #[test]
    fn offset_squares() {
        let a = bx(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        let b = bx(1.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        assert!((bev_iou(&a, &b) - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn vertically_touching() {
        let a = bx(0.0, 0.0, 0.5, 2.0, 2.0, 1.0, 0.0);
        let b = bx(0.0, 0.0, 1.5, 2.0, 2.0, 1.0, 0.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn square_vs_rotated_square_closed_form() {
        // unit square and its 45 deg rotation: intersection is a regular octagon
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, PI / 4.0);
        let octagon = 2.0 * (2f64.sqrt() - 1.0);
        let expected = octagon / (2.0 - octagon);
        assert!((bev_iou(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn contained_box() {
        let outer = bx(0.0, 0.0, 0.0, 4.0, 4.0, 2.0, 0.4);
        let inner = bx(0.2, -0.1, 0.1, 1.0, 2.0, 1.0, 0.4);
        assert!((iou_3d(&inner, &outer) - inner.volume() / outer.volume()).abs() < 1e-12);
    }

    #[test]
    fn identity_chain_is_unprojection() {
        let a = CameraIntrinsics::from_matrix(Matrix3::identity(), 10, 10);
        let id = Matrix4::identity();
        let p = transform_pixel_to_ego(3.0, 4.0, 2.5, &a, &RigidTransform::identity(), &id, &id).unwrap();
        assert_eq!(p, [7.5, 10.0, 2.5]);
    }

    #[test]
    fn nonpositive_depth_rejected() {
        let a = CameraIntrinsics::new(50.0, 50.0, 48.0, 32.0, 96, 64).unwrap();
        let id = Matrix4::identity();
        assert!(transform_pixel_to_ego(1.0, 1.0, 0.0, &a, &RigidTransform::identity(), &id, &id).is_err());
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let a = CameraIntrinsics::new(50.0, 50.0, 48.0, 32.0, 96, 64).unwrap();
        match project_to_pixel([0.0, 0.0, 5.0], &a, &RigidTransform::identity()) {
            Projection::InFrame { u, v, depth } => {
                assert!((u - 48.0).abs() < 1e-12 && (v - 32.0).abs() < 1e-12 && (depth - 5.0).abs() < 1e-12)
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            project_to_pixel([0.0, 0.0, -1.0], &a, &RigidTransform::identity()),
            Projection::BehindCamera
        );
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 9.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn rigid_inverse() {
        let t = RigidTransform::yaw_translation(0.7, [1.0, -2.0, 0.5]);
        let prod = t.inverse().compose(&t);
        assert!((prod.matrix() - Matrix4::identity()).abs().max() < 1e-12);
        assert!(RigidTransform::from_matrix(Matrix4::new_scaling(2.0)).is_err());
    }

    #[test]
    fn fusion_single_and_identical() {
        let a = bx(1.0, 2.0, 0.7, 4.0, 1.8, 1.5, 0.2);
        assert_eq!(weighted_box_mean(&[(a, 0.3)]).unwrap(), a);
        let f = weighted_box_mean(&[(a, 0.7), (a, 0.3)]).unwrap();
        for (x, y) in f.to_array().iter().zip(a.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(weighted_box_mean(&[]).is_err());
    }

    #[test]
    fn fusion_weighted_center() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = bx(2.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let f = weighted_box_mean(&[(a, 0.75), (b, 0.25)]).unwrap();
        assert!((f.x - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fusion_yaw_across_seam() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 3.0);
        let b = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, -3.0);
        let f = weighted_box_mean(&[(a, 1.0), (b, 1.0)]).unwrap();
        // oracle: mean of unit vectors (cos 3, sin 3) and (cos -3, sin -3)
        let (sx, sy) = ((3f64.cos() + (-3f64).cos()) / 2.0, (3f64.sin() + (-3f64).sin()) / 2.0);
        let oracle = normalize_yaw(sy.atan2(sx));
        assert!((f.yaw - oracle).abs() < 1e-9);
        assert!((f.yaw - PI).abs() < 1e-9);
    }

    #[test]
    fn monte_carlo_rotated_square() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, PI / 4.0);
        let mut rng = Rng::new(77);
        let (mut inter, mut uni) = (0u64, 0u64);
        for _ in 0..1_000_000 {
            let (x, y) = (rng.uniform(-0.75, 0.75), rng.uniform(-0.75, 0.75));
            let (ia, ib) = (a.contains_bev(x, y), b.contains_bev(x, y));
            inter += (ia && ib) as u64;
            uni += (ia || ib) as u64;
        }
        assert!((bev_iou(&a, &b) - inter as f64 / uni as f64).abs() < 0.005);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (-3.0..3.0f64, -3.0..3.0f64, -1.0..1.0f64, 0.5..5.0f64, 0.5..3.0f64, 0.5..2.0f64, -PI..PI)
            .prop_map(|(x, y, z, dx, dy, dz, yaw)| bx(x, y, z, dx, dy, dz, yaw))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (ab, ba) = (bev_iou(&a, &b), bev_iou(&b, &a));
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab));
            let (ab3, ba3) = (iou_3d(&a, &b), iou_3d(&b, &a));
            prop_assert!((ab3 - ba3).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab3));
        }

        #[test]
        fn iou_rigid_invariance(a in arb_box(), b in arb_box(), yaw in -PI..PI, tx in -20.0..20.0f64, ty in -20.0..20.0f64) {
            let t = RigidTransform::yaw_translation(yaw, [tx, ty, 0.0]);
            let move_box = |q: &Box3D| {
                let c = t.apply(q.center());
                bx(c[0], c[1], c[2], q.dx, q.dy, q.dz, q.yaw + yaw)
            };
            let (ma, mb) = (move_box(&a), move_box(&b));
            prop_assert!((bev_iou(&a, &b) - bev_iou(&ma, &mb)).abs() < 1e-6);
            prop_assert!((iou_3d(&a, &b) - iou_3d(&ma, &mb)).abs() < 1e-6);
        }

        #[test]
        fn fusion_weight_scale_invariant(a in arb_box(), b in arb_box(), w1 in 0.05..1.0f64, w2 in 0.05..1.0f64, s in 0.1..10.0f64) {
            let f1 = weighted_box_mean(&[(a, w1), (b, w2)]).unwrap();
            let f2 = weighted_box_mean(&[(a, w1 * s), (b, w2 * s)]).unwrap();
            for (x, y) in f1.to_array().iter().zip(f2.to_array()) {
                prop_assert!((x - y).abs() < 1e-9 || (x - y).abs() > 2.0 * PI - 1e-9);
            }
        }
    }
}
