//! Scene files and camera rigs.
//!
//! The scene format is line-oriented text with `#` comments:
//!
//! ```text
//! sphere  cx cy cz r         cr cg cb density
//! box     cx cy cz hx hy hz  cr cg cb density
//! plane   px py pz nx ny nz  cr cg cb density
//! ring    radius hspan_deg vspan_deg   # source rig (default: auto 45 30)
//! targets n_train n_heldout            # interior targets (default 1 0)
//! camera  px py pz lx ly lz            # extra held-out view
//! render  W H t_near t_far bg_r bg_g bg_b   # bounds <= 0 mean auto
//! fov     deg
//! ```
//!
//! Four source cameras sit at the corners of the (hspan x vspan) angular
//! rectangle on a ring around the scene centroid; training targets are
//! spread over the horizontal center line and held-out targets over the
//! +-vspan/4 rows. Every camera looks at the centroid.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{CameraPose, CameraView, Vec3};
use crate::grid::Grid;
use crate::rendering::{render_gt_depth, render_image, AnalyticField, RenderOptions, UniformSampler};
use crate::scene::{Primitive, PrimitiveShape, SyntheticScene};

#[derive(Debug, Error, PartialEq)]
#[error("scene parse error at line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// Parsed scene file, before camera-rig construction.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub scene: SyntheticScene,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub ring_radius: Option<f64>,
    pub hspan_deg: f64,
    pub vspan_deg: f64,
    pub n_train_targets: usize,
    pub n_heldout: usize,
    pub t_near: Option<f64>,
    pub t_far: Option<f64>,
    pub extra_cameras: Vec<(Vec3, Vec3)>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            scene: SyntheticScene {
                primitives: Vec::new(),
                background: [0.0; 3],
            },
            width: 64,
            height: 64,
            fov_deg: 45.0,
            ring_radius: None,
            hspan_deg: 45.0,
            vspan_deg: 30.0,
            n_train_targets: 1,
            n_heldout: 0,
            t_near: None,
            t_far: None,
            extra_cameras: Vec::new(),
        }
    }
}

struct Tokens<'a> {
    line: usize,
    items: Vec<(usize, &'a str)>,
    cursor: usize,
}

impl<'a> Tokens<'a> {
    fn new(line_no: usize, line: &'a str) -> Self {
        let mut items = Vec::new();
        let mut start = None;
        for (i, ch) in line.char_indices() {
            if ch == '#' {
                if let Some(s) = start.take() {
                    items.push((s + 1, &line[s..i]));
                }
                start = None;
                break;
            }
            if ch.is_whitespace() {
                if let Some(s) = start.take() {
                    items.push((s + 1, &line[s..i]));
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            items.push((s + 1, line[s..].trim_end()));
        }
        Self {
            line: line_no,
            items,
            cursor: 0,
        }
    }

    fn next_f64(&mut self, what: &str) -> Result<f64, ParseError> {
        let (col, tok) = self.next_token(what)?;
        tok.parse::<f64>().map_err(|_| ParseError {
            line: self.line,
            column: col,
            message: format!("expected a number for {what}, found {tok:?}"),
        })
    }

    fn next_usize(&mut self, what: &str) -> Result<usize, ParseError> {
        let (col, tok) = self.next_token(what)?;
        tok.parse::<usize>().map_err(|_| ParseError {
            line: self.line,
            column: col,
            message: format!("expected a non-negative integer for {what}, found {tok:?}"),
        })
    }

    fn next_token(&mut self, what: &str) -> Result<(usize, &'a str), ParseError> {
        if self.cursor >= self.items.len() {
            return Err(ParseError {
                line: self.line,
                column: self.items.last().map(|(c, t)| c + t.len()).unwrap_or(1),
                message: format!("missing {what}"),
            });
        }
        let item = self.items[self.cursor];
        self.cursor += 1;
        Ok(item)
    }

    fn expect_end(&self) -> Result<(), ParseError> {
        if self.cursor < self.items.len() {
            let (col, tok) = self.items[self.cursor];
            return Err(ParseError {
                line: self.line,
                column: col,
                message: format!("unexpected trailing token {tok:?}"),
            });
        }
        Ok(())
    }
}

pub fn parse_scene_file(path: &Path) -> Result<SceneSpec, SceneFileError> {
    let text = std::fs::read_to_string(path).map_err(SceneFileError::Io)?;
    parse_scene_str(&text).map_err(SceneFileError::Parse)
}

#[derive(Debug, Error)]
pub enum SceneFileError {
    #[error("cannot read scene file: {0}")]
    Io(std::io::Error),
    #[error(transparent)]
    Parse(ParseError),
}

pub fn parse_scene_str(text: &str) -> Result<SceneSpec, ParseError> {
    let mut spec = SceneSpec::default();
    for (idx, raw) in text.lines().enumerate() {
        let mut t = Tokens::new(idx + 1, raw);
        if t.items.is_empty() {
            continue;
        }
        let (col0, record) = t.next_token("record")?;
        match record {
            "sphere" => {
                let center = read_vec3(&mut t, "sphere center")?;
                let r = t.next_f64("sphere radius")?;
                let (color, density) = read_appearance(&mut t, col0, idx + 1)?;
                if r <= 0.0 {
                    return Err(ParseError {
                        line: idx + 1,
                        column: col0,
                        message: "sphere radius must be positive".into(),
                    });
                }
                spec.scene.primitives.push(Primitive {
                    shape: PrimitiveShape::Sphere { center, radius: r },
                    color,
                    density,
                });
                t.expect_end()?;
            }
            "box" => {
                let center = read_vec3(&mut t, "box center")?;
                let half = read_vec3(&mut t, "box half extents")?;
                let (color, density) = read_appearance(&mut t, col0, idx + 1)?;
                if half.iter().any(|&h| h <= 0.0) {
                    return Err(ParseError {
                        line: idx + 1,
                        column: col0,
                        message: "box half extents must be positive".into(),
                    });
                }
                spec.scene.primitives.push(Primitive {
                    shape: PrimitiveShape::Box { center, half },
                    color,
                    density,
                });
                t.expect_end()?;
            }
            "plane" => {
                let point = read_vec3(&mut t, "plane point")?;
                let normal = read_vec3(&mut t, "plane normal")?;
                let (color, density) = read_appearance(&mut t, col0, idx + 1)?;
                if normal.norm() < 1e-12 {
                    return Err(ParseError {
                        line: idx + 1,
                        column: col0,
                        message: "plane normal must be non-zero".into(),
                    });
                }
                spec.scene.primitives.push(Primitive {
                    shape: PrimitiveShape::Plane {
                        point,
                        normal: normal.normalize(),
                    },
                    color,
                    density,
                });
                t.expect_end()?;
            }
            "camera" => {
                let eye = read_vec3(&mut t, "camera position")?;
                let target = read_vec3(&mut t, "camera look-at point")?;
                spec.extra_cameras.push((eye, target));
                t.expect_end()?;
            }
            "ring" => {
                let radius = t.next_f64("ring radius")?;
                spec.hspan_deg = t.next_f64("horizontal span (deg)")?;
                spec.vspan_deg = t.next_f64("vertical span (deg)")?;
                spec.ring_radius = (radius > 0.0).then_some(radius);
                t.expect_end()?;
            }
            "targets" => {
                spec.n_train_targets = t.next_usize("train target count")?;
                spec.n_heldout = t.next_usize("held-out target count")?;
                t.expect_end()?;
            }
            "render" => {
                spec.width = t.next_usize("image width")?;
                spec.height = t.next_usize("image height")?;
                let tn = t.next_f64("t_near")?;
                let tf = t.next_f64("t_far")?;
                spec.t_near = (tn > 0.0).then_some(tn);
                spec.t_far = (tf > 0.0).then_some(tf);
                spec.scene.background = [
                    t.next_f64("background r")?,
                    t.next_f64("background g")?,
                    t.next_f64("background b")?,
                ];
                if spec.width == 0 || spec.height == 0 {
                    return Err(ParseError {
                        line: idx + 1,
                        column: col0,
                        message: "render size must be positive".into(),
                    });
                }
                t.expect_end()?;
            }
            "fov" => {
                spec.fov_deg = t.next_f64("field of view (deg)")?;
                t.expect_end()?;
            }
            other => {
                return Err(ParseError {
                    line: idx + 1,
                    column: col0,
                    message: format!("unknown record {other:?}"),
                });
            }
        }
    }
    Ok(spec)
}

fn read_vec3(t: &mut Tokens, what: &str) -> Result<Vec3, ParseError> {
    Ok(Vec3::new(
        t.next_f64(&format!("{what} x"))?,
        t.next_f64(&format!("{what} y"))?,
        t.next_f64(&format!("{what} z"))?,
    ))
}

fn read_appearance(
    t: &mut Tokens,
    col: usize,
    line: usize,
) -> Result<([f64; 3], f64), ParseError> {
    let color = [
        t.next_f64("color r")?,
        t.next_f64("color g")?,
        t.next_f64("color b")?,
    ];
    let density = t.next_f64("density")?;
    if density <= 0.0 {
        return Err(ParseError {
            line,
            column: col,
            message: "primitive density must be positive".into(),
        });
    }
    Ok((color, density))
}

/// The camera set generated from a spec: a source quadruple on the ring plus
/// training and held-out targets.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub scene: SyntheticScene,
    pub sources: Vec<CameraPose>,
    pub train_targets: Vec<CameraPose>,
    pub heldout_targets: Vec<CameraPose>,
    /// Shared ray bounds for all cameras.
    pub t_near: f64,
    pub t_far: f64,
    pub centroid: Vec3,
    pub scene_radius: f64,
}

impl GeneratedScene {
    /// All cameras in CLI indexing order: sources, then training targets,
    /// then held-out targets.
    pub fn all_poses(&self) -> Vec<&CameraPose> {
        self.sources
            .iter()
            .chain(self.train_targets.iter())
            .chain(self.heldout_targets.iter())
            .collect()
    }
}

impl fmt::Display for GeneratedScene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "primitives: {}", self.scene.primitives.len())?;
        for p in &self.scene.primitives {
            writeln!(f, "  {:?}", p.shape)?;
        }
        writeln!(
            f,
            "centroid: ({}, {}, {})  radius: {}",
            self.centroid.x, self.centroid.y, self.centroid.z, self.scene_radius
        )?;
        writeln!(f, "bounds: t_near {}  t_far {}", self.t_near, self.t_far)?;
        let dump = |f: &mut fmt::Formatter<'_>, label: &str, poses: &[CameraPose]| -> fmt::Result {
            for (i, p) in poses.iter().enumerate() {
                let c = p.center();
                writeln!(
                    f,
                    "{label}[{i}]: pos ({}, {}, {}) {}x{} f {}",
                    c.x,
                    c.y,
                    c.z,
                    p.width,
                    p.height,
                    p.intrinsics[(0, 0)]
                )?;
            }
            Ok(())
        };
        dump(f, "source", &self.sources)?;
        dump(f, "train", &self.train_targets)?;
        dump(f, "heldout", &self.heldout_targets)
    }
}

/// Ring placement: azimuth alpha, elevation beta around the centroid.
pub fn ring_position(centroid: &Vec3, radius: f64, alpha: f64, beta: f64) -> Vec3 {
    centroid
        + radius
            * Vec3::new(
                alpha.sin() * beta.cos(),
                beta.sin(),
                alpha.cos() * beta.cos(),
            )
}

/// Builds the camera rig for a parsed spec. A zero angular span is accepted
/// (all cameras coincide) with a warning on stderr.
pub fn generate(spec: &SceneSpec) -> GeneratedScene {
    let (centroid, radius) = spec.scene.bounding_sphere();
    let ring_radius = spec.ring_radius.unwrap_or(2.5 * radius.max(0.1));
    if spec.hspan_deg.abs() < 1e-12 && spec.vspan_deg.abs() < 1e-12 {
        eprintln!("warning: zero angular span, all ring cameras coincide");
    }
    let focal = spec.height as f64 * 0.5 / (spec.fov_deg.to_radians() * 0.5).tan();
    let make = |alpha: f64, beta: f64| {
        CameraPose::look_at(
            ring_position(&centroid, ring_radius, alpha, beta),
            centroid,
            focal,
            spec.width,
            spec.height,
        )
    };
    let h = spec.hspan_deg.to_radians();
    let v = spec.vspan_deg.to_radians();
    let sources = vec![
        make(-h / 2.0, -v / 2.0),
        make(h / 2.0, -v / 2.0),
        make(-h / 2.0, v / 2.0),
        make(h / 2.0, v / 2.0),
    ];
    let train_targets: Vec<CameraPose> = (0..spec.n_train_targets)
        .map(|j| {
            let alpha = -h / 2.0 + h * (j as f64 + 1.0) / (spec.n_train_targets as f64 + 1.0);
            make(alpha, 0.0)
        })
        .collect();
    let mut heldout_targets: Vec<CameraPose> = (0..spec.n_heldout)
        .map(|j| {
            let alpha = -h / 2.0 + h * (j as f64 + 1.0) / (spec.n_heldout as f64 + 1.0);
            let beta = if j % 2 == 0 { v / 4.0 } else { -v / 4.0 };
            make(alpha, beta)
        })
        .collect();
    for (eye, target) in &spec.extra_cameras {
        heldout_targets.push(CameraPose::look_at(
            *eye,
            *target,
            focal,
            spec.width,
            spec.height,
        ));
    }

    // Ray bounds: bounding sphere with a 10% margin, over all cameras.
    let mut t_near = f64::INFINITY;
    let mut t_far: f64 = 0.0;
    for pose in sources
        .iter()
        .chain(train_targets.iter())
        .chain(heldout_targets.iter())
    {
        let d = (pose.center() - centroid).norm();
        t_near = t_near.min((d - 1.1 * radius).max(1e-3));
        t_far = t_far.max(d + 1.1 * radius);
    }
    let (t_near, t_far) = (spec.t_near.unwrap_or(t_near), spec.t_far.unwrap_or(t_far));

    GeneratedScene {
        scene: spec.scene.clone(),
        sources,
        train_targets,
        heldout_targets,
        t_near,
        t_far,
        centroid,
        scene_radius: radius,
    }
}

/// Number of deterministic uniform samples used to render source "photos".
pub const SOURCE_IMAGE_SAMPLES: usize = 256;

/// Depth standard deviation floor (m) so exact-depth runs keep a positive,
/// well-conditioned likelihood.
pub const DEPTH_STD_FLOOR: f64 = 1e-3;

/// Renders a posed source view against the analytic scene: image, noisy
/// ground-truth depth, std map, and normals.
pub fn build_source_view(
    gen: &GeneratedScene,
    pose: &CameraPose,
    view_id: u64,
    noise_std: f64,
    seed: u64,
) -> CameraView {
    let opts = RenderOptions {
        t_near: gen.t_near,
        t_far: gen.t_far,
        background: gen.scene.background,
        threads: 1,
    };
    let sampler = UniformSampler {
        n: SOURCE_IMAGE_SAMPLES,
        seed,
        jitter: false,
    };
    let img = render_image(pose, view_id, &sampler, &AnalyticField(&gen.scene), &opts);
    let (depth, std_map) = render_gt_depth(pose, &gen.scene, noise_std, DEPTH_STD_FLOOR, seed, view_id);
    let mut view = CameraView::new(pose.clone(), img.color, depth, std_map);
    view.compute_normals(crate::geometry::DEFAULT_EDGE_THRESHOLD);
    view
}

/// Renders the ground-truth target image for evaluation.
pub fn render_target_image(gen: &GeneratedScene, pose: &CameraPose, view_id: u64, seed: u64) -> Grid {
    let opts = RenderOptions {
        t_near: gen.t_near,
        t_far: gen.t_far,
        background: gen.scene.background,
        threads: 1,
    };
    let sampler = UniformSampler {
        n: SOURCE_IMAGE_SAMPLES,
        seed,
        jitter: false,
    };
    render_image(pose, view_id, &sampler, &AnalyticField(&gen.scene), &opts).color
}
