//! Camera models, ray generation, rigid transforms, projection, and
//! depth-map normal estimation.
//!
//! Convention, used everywhere: right-handed coordinates, camera looks down
//! +z, image u to the right and v down, pixel centers at integer
//! coordinates. Depth is the camera-space z component.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::grid::Grid;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point at or behind the camera plane (z = {z})")]
    NonPositiveDepth { z: f64 },
}

/// A world-space ray with unit direction and positive parameter bounds.
#[derive(Debug, Clone)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Self {
        assert!(t_near > 0.0 && t_near < t_far, "invalid ray bounds");
        let norm = direction.norm();
        assert!(norm > 1e-12, "degenerate ray direction");
        Self {
            origin,
            direction: direction / norm,
            t_near,
            t_far,
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Camera intrinsics + extrinsics + image resolution, without pixel data.
#[derive(Debug, Clone)]
pub struct CameraPose {
    /// 3x3 intrinsics, `[[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`.
    pub intrinsics: Mat3,
    /// World-to-camera rotation (orthonormal).
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    /// Camera at `eye` looking at `target`, v-down image axes, y-up world.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        focal_px: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let up_hint = if forward.cross(&Vec3::new(0.0, 1.0, 0.0)).norm() > 1e-6 {
            Vec3::new(0.0, 1.0, 0.0)
        } else {
            Vec3::new(0.0, 0.0, 1.0)
        };
        let x_axis = forward.cross(&up_hint).normalize();
        let y_axis = forward.cross(&x_axis); // v points "down" in world
        let rotation = Mat3::from_rows(&[
            x_axis.transpose(),
            y_axis.transpose(),
            forward.transpose(),
        ]);
        let translation = -rotation * eye;
        let intrinsics = Mat3::new(
            focal_px,
            0.0,
            (width as f64 - 1.0) / 2.0,
            0.0,
            focal_px,
            (height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        }
    }

    #[inline]
    pub fn world_to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    #[inline]
    pub fn camera_to_world(&self, x_cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * (x_cam - self.translation)
    }

    /// Rotates a direction into camera space (no translation).
    #[inline]
    pub fn direction_to_camera(&self, d: &Vec3) -> Vec3 {
        self.rotation * d
    }

    /// Camera center in world coordinates.
    #[inline]
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera forward axis (+z) in world coordinates.
    #[inline]
    pub fn forward(&self) -> Vec3 {
        self.rotation.transpose() * Vec3::new(0.0, 0.0, 1.0)
    }

    pub fn generate_ray(&self, pixel: (f64, f64), t_near: f64, t_far: f64) -> Ray {
        let (u, v) = pixel;
        let k = &self.intrinsics;
        let dir_cam = Vec3::new((u - k[(0, 2)]) / k[(0, 0)], (v - k[(1, 2)]) / k[(1, 1)], 1.0);
        let dir_world = self.rotation.transpose() * dir_cam;
        Ray::new(self.center(), dir_world, t_near, t_far)
    }

    /// Checks the camera invariants: orthonormal rotation, K[2][2] = 1.
    pub fn validate(&self) -> bool {
        let rrt = self.rotation * self.rotation.transpose();
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((rrt[(i, j)] - want).abs());
            }
        }
        max_dev < 1e-9 && (self.intrinsics[(2, 2)] - 1.0).abs() < 1e-12
    }
}

/// Perspective projection of a camera-space point.
///
/// Returns pixel coordinates plus the camera-space depth z.
pub fn project(x_cam: &Vec3, intrinsics: &Mat3) -> Result<(f64, f64, f64), GeometryError> {
    let z = x_cam.z;
    if z <= 1e-9 {
        return Err(GeometryError::NonPositiveDepth { z });
    }
    let u = intrinsics[(0, 0)] * x_cam.x / z + intrinsics[(0, 1)] * x_cam.y / z + intrinsics[(0, 2)];
    let v = intrinsics[(1, 1)] * x_cam.y / z + intrinsics[(1, 2)];
    Ok((u, v, z))
}

/// Bilinear lookup in an H x W x C map; out-of-bounds clamps to the border.
pub fn bilinear_sample(map: &Grid, uv: (f64, f64)) -> Vec<f64> {
    map.sample_bilinear(uv.0, uv.1)
}

/// Per-pixel depth with a validity mask (pixels that saw no surface).
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub data: Grid,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(data: Grid, valid: Vec<bool>) -> Self {
        assert_eq!(data.channels(), 1);
        assert_eq!(valid.len(), data.height() * data.width());
        Self { data, valid }
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Self {
        Self {
            data: Grid::from_fn(height, width, 1, |_, _, _| depth),
            valid: vec![true; height * width],
        }
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.data.width() + x]
    }

    /// Bilinear depth at (u, v); `None` if any contributing texel is invalid
    /// or the lookup falls outside the image bounds.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let (w, h) = (self.data.width() as f64, self.data.height() as f64);
        if u < 0.0 || v < 0.0 || u > w - 1.0 || v > h - 1.0 {
            return None;
        }
        let fp = self.data.bilinear_footprint(u, v);
        let mut acc = 0.0;
        for (wt, &(y, x)) in fp.weights.iter().zip(fp.texels.iter()) {
            if !self.is_valid(y, x) {
                return None;
            }
            acc += wt * self.data.get(y, x, 0);
        }
        Some(acc)
    }
}

/// Camera-space unit normals estimated from a depth map, with validity.
#[derive(Debug, Clone)]
pub struct NormalMap {
    pub data: Grid,
    pub valid: Vec<bool>,
}

impl NormalMap {
    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.data.width() + x]
    }

    /// Bilinearly blended and renormalized normal; `None` if any
    /// contributing texel is invalid or the blend degenerates.
    pub fn sample(&self, u: f64, v: f64) -> Option<Vec3> {
        let fp = self.data.bilinear_footprint(u, v);
        let mut n = Vec3::zeros();
        for (wt, &(y, x)) in fp.weights.iter().zip(fp.texels.iter()) {
            if !self.is_valid(y, x) {
                return None;
            }
            let t = self.data.texel(y, x);
            n += *wt * Vec3::new(t[0], t[1], t[2]);
        }
        let norm = n.norm();
        if norm < 1e-9 {
            None
        } else {
            Some(n / norm)
        }
    }
}

/// One posed source view: pose, image, depth with uncertainty, and the
/// derived maps filled in by the preparation steps.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub pose: CameraPose,
    /// H x W x 3 colors in [0, 1].
    pub image: Grid,
    /// H x W camera-space depth (m).
    pub depth: DepthMap,
    /// H x W depth standard deviation (m), positive everywhere.
    pub depth_std: Grid,
    /// Derived camera-space normals (see [`depth_to_normals`]).
    pub normals: Option<NormalMap>,
    /// Derived padded + positionally encoded source image.
    pub encoded: Option<crate::encoding::EncodedSourceImage>,
    /// Derived pixel-aligned feature map over the padded canvas.
    pub features: Option<Grid>,
}

impl CameraView {
    pub fn new(pose: CameraPose, image: Grid, depth: DepthMap, depth_std: Grid) -> Self {
        assert_eq!(image.channels(), 3);
        assert_eq!(image.height(), pose.height);
        assert_eq!(image.width(), pose.width);
        assert_eq!(depth.data.height(), pose.height);
        assert_eq!(depth_std.channels(), 1);
        debug_assert!(depth_std.data().iter().all(|&s| s > 0.0));
        Self {
            pose,
            image,
            depth,
            depth_std,
            normals: None,
            encoded: None,
            features: None,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.pose.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.pose.height
    }

    pub fn compute_normals(&mut self, edge_threshold: f64) {
        self.normals = Some(depth_to_normals(self, edge_threshold));
    }
}

/// Default depth-discontinuity threshold (m per pixel step) above which
/// normals are marked invalid.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.05;

/// Camera-space normals via central differences of back-projected depth.
///
/// Border pixels, pixels with invalid neighbors, and pixels adjacent to
/// depth discontinuities (|d_depth| > edge_threshold against any 4-neighbor)
/// are marked invalid. Normals are oriented toward the camera.
pub fn depth_to_normals(view: &CameraView, edge_threshold: f64) -> NormalMap {
    let (h, w) = (view.height(), view.width());
    let k = &view.pose.intrinsics;
    let (fx, fy, cx, cy) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
    let back_project = |x: usize, y: usize, d: f64| -> Vec3 {
        Vec3::new(
            d * (x as f64 - cx) / fx,
            d * (y as f64 - cy) / fy,
            d,
        )
    };

    let mut data = Grid::zeros(h, w, 3);
    let mut valid = vec![false; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let neighbors = [(x, y), (x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)];
            if neighbors.iter().any(|&(nx, ny)| !view.depth.is_valid(ny, nx)) {
                continue;
            }
            let d_ctr = view.depth.data.get(y, x, 0);
            let edge = neighbors[1..].iter().any(|&(nx, ny)| {
                (view.depth.data.get(ny, nx, 0) - d_ctr).abs() > edge_threshold
            });
            if edge {
                continue;
            }
            let p_px = back_project(x + 1, y, view.depth.data.get(y, x + 1, 0));
            let p_mx = back_project(x - 1, y, view.depth.data.get(y, x - 1, 0));
            let p_py = back_project(x, y + 1, view.depth.data.get(y + 1, x, 0));
            let p_my = back_project(x, y - 1, view.depth.data.get(y - 1, x, 0));
            let dpdu = (p_px - p_mx) * 0.5;
            let dpdv = (p_py - p_my) * 0.5;
            let mut n = dpdu.cross(&dpdv);
            let norm = n.norm();
            if norm < 1e-15 {
                continue;
            }
            n /= norm;
            // Orient against the viewing ray so visible surfaces face the camera.
            let dir = back_project(x, y, 1.0);
            if n.dot(&dir) > 0.0 {
                n = -n;
            }
            let t = data.texel_mut(y, x);
            t[0] = n.x;
            t[1] = n.y;
            t[2] = n.z;
            valid[y * w + x] = true;
        }
    }
    NormalMap { data, valid }
}
