//! Synthetic scenes built from analytic primitives.
//!
//! Primitives carry a constant interior density and color, so the scene
//! doubles as an exact oracle: density, color, first-surface depth, and
//! normals all have closed forms.

use crate::field::RadianceSample;
use crate::geometry::{Ray, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveShape {
    Sphere { center: Vec3, radius: f64 },
    /// Axis-aligned box given by center and half extents.
    Box { center: Vec3, half: Vec3 },
    /// Half space: inside where dot(n, x - point) < 0.
    Plane { point: Vec3, normal: Vec3 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: PrimitiveShape,
    pub color: [f64; 3],
    pub density: f64,
}

impl Primitive {
    pub fn contains(&self, x: &Vec3) -> bool {
        match &self.shape {
            PrimitiveShape::Sphere { center, radius } => (x - center).norm_squared() <= radius * radius,
            PrimitiveShape::Box { center, half } => {
                let d = x - center;
                d.x.abs() <= half.x && d.y.abs() <= half.y && d.z.abs() <= half.z
            }
            PrimitiveShape::Plane { point, normal } => normal.dot(&(x - point)) <= 0.0,
        }
    }

    /// Smallest positive ray parameter where the ray crosses this
    /// primitive's boundary, together with the outward surface normal.
    pub fn first_crossing(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        match &self.shape {
            PrimitiveShape::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > 1e-9 { -b - sq } else { -b + sq };
                if t <= 1e-9 {
                    return None;
                }
                let hit = origin + dir * t;
                Some((t, (hit - center).normalize()))
            }
            PrimitiveShape::Box { center, half } => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                let mut enter_axis = 0usize;
                let mut enter_sign = 1.0;
                for axis in 0..3 {
                    let o = origin[axis] - center[axis];
                    let d = dir[axis];
                    let h = half[axis];
                    if d.abs() < 1e-15 {
                        if o.abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let mut t0 = (-h - o) / d;
                    let mut t1 = (h - o) / d;
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_enter {
                        t_enter = t0;
                        enter_axis = axis;
                        // The ray enters through the face it moves away from.
                        enter_sign = if d > 0.0 { -1.0 } else { 1.0 };
                    }
                    t_exit = t_exit.min(t1);
                }
                if t_enter > t_exit {
                    return None;
                }
                let t = if t_enter > 1e-9 { t_enter } else { t_exit };
                if t <= 1e-9 || t_exit < t_enter {
                    return None;
                }
                if t == t_enter {
                    let mut n = Vec3::zeros();
                    n[enter_axis] = enter_sign;
                    Some((t, n))
                } else {
                    // Exiting from inside: outward normal along the exit face.
                    let hit = origin + dir * t;
                    let d = hit - center;
                    let mut axis = 0;
                    let mut best = f64::NEG_INFINITY;
                    for a in 0..3 {
                        let frac = d[a].abs() / half[a];
                        if frac > best {
                            best = frac;
                            axis = a;
                        }
                    }
                    let mut n = Vec3::zeros();
                    n[axis] = d[axis].signum();
                    Some((t, n))
                }
            }
            PrimitiveShape::Plane { point, normal } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = normal.dot(&(point - origin)) / denom;
                if t <= 1e-9 {
                    None
                } else {
                    Some((t, normal.normalize()))
                }
            }
        }
    }
}

/// First surface hit along a ray.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub primitive: usize,
    /// Outward world-space surface normal at the hit.
    pub normal: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

impl SyntheticScene {
    /// Total density at a point: sum of containing primitives' densities.
    pub fn density_at(&self, x: &Vec3) -> f64 {
        self.primitives
            .iter()
            .filter(|p| p.contains(x))
            .map(|p| p.density)
            .sum()
    }

    /// Density and density-weighted color; deterministic and independent of
    /// view direction.
    pub fn radiance_at(&self, x: &Vec3) -> RadianceSample {
        let mut density = 0.0;
        let mut color = [0.0; 3];
        for p in &self.primitives {
            if p.contains(x) {
                density += p.density;
                for c in 0..3 {
                    color[c] += p.density * p.color[c];
                }
            }
        }
        if density > 0.0 {
            for c in color.iter_mut() {
                *c /= density;
            }
        }
        RadianceSample { color, density }
    }

    /// First boundary crossing over all primitives; `dir` must be unit.
    pub fn first_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = p.first_crossing(origin, dir) {
                if best.as_ref().map_or(true, |b| t < b.t) {
                    best = Some(Hit {
                        t,
                        primitive: i,
                        normal,
                    });
                }
            }
        }
        best
    }

    /// First hit restricted to a ray's [t_near, t_far] window.
    pub fn first_hit_on_ray(&self, ray: &Ray) -> Option<Hit> {
        self.first_hit(&ray.origin, &ray.direction)
            .filter(|h| h.t >= ray.t_near && h.t <= ray.t_far)
    }

    /// Bounding sphere over the finite primitives (planes contribute their
    /// anchor points only).
    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        if self.primitives.is_empty() {
            return (Vec3::zeros(), 0.5);
        }
        let anchor = |p: &Primitive| match &p.shape {
            PrimitiveShape::Sphere { center, .. } => *center,
            PrimitiveShape::Box { center, .. } => *center,
            PrimitiveShape::Plane { point, .. } => *point,
        };
        let mut centroid = Vec3::zeros();
        for p in &self.primitives {
            centroid += anchor(p);
        }
        centroid /= self.primitives.len() as f64;
        let mut radius = 0.0f64;
        for p in &self.primitives {
            let reach = match &p.shape {
                PrimitiveShape::Sphere { center, radius } => (center - centroid).norm() + radius,
                PrimitiveShape::Box { center, half } => (center - centroid).norm() + half.norm(),
                PrimitiveShape::Plane { point, .. } => (point - centroid).norm(),
            };
            radius = radius.max(reach);
        }
        (centroid, radius.max(0.1))
    }
}

/// Exact radiance oracle for experiments. Lambertian: ignores direction.
pub fn analytic_field_eval(x: &Vec3, _d: &Vec3, scene: &SyntheticScene) -> RadianceSample {
    scene.radiance_at(x)
}
