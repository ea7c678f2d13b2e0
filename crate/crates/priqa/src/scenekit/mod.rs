//! Synthetic multi-view scenes with exact cameras and depths, plus dataset
//! ingest/export and seeded image corruptions.
//!
//! Generated scenes are the geometric ground truth for the warping stack:
//! the planar scene has closed-form depth everywhere, and the two-plane
//! scene adds an occlusion boundary for z-buffer checks.

mod corrupt;
mod io;

pub use corrupt::{corrupt_frame, CorruptedFrame, CorruptionRecipe};
pub use io::{
    export_dataset, load_dataset, read_depth_bin, read_feature_bin, read_image_png,
    write_depth_bin, write_feature_bin, write_image_png,
};

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{PriqaError, Result};
use crate::geometry::PointMap;
use crate::grid::{Grid, Image};

/// Pinhole camera: intrinsics plus a world-to-camera rigid transform.
///
/// Pixel coordinates follow `u = fx*x/z + cx` (rightward) and
/// `v = fy*y/z + cy` (downward); integer coordinates sit at pixel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Validates the camera invariants: orthonormal rotation with
    /// determinant +1 (within 1e-6), positive focal lengths, and a
    /// principal point inside the image.
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(PriqaError::Argument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64)
            || !(0.0 <= self.cy && self.cy < self.height as f64)
        {
            return Err(PriqaError::Argument(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let should_be_identity = self.rotation * self.rotation.transpose();
        let max_dev = (should_be_identity - Matrix3::identity())
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        if max_dev > 1e-6 {
            return Err(PriqaError::Argument(format!(
                "rotation is not orthonormal (max deviation {max_dev:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(PriqaError::Argument(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(())
    }

    /// World point to camera coordinates.
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera point back to world coordinates.
    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-space ray direction through pixel center (row, col),
    /// unnormalized with unit camera-z component.
    pub fn pixel_ray(&self, row: f64, col: f64) -> Vector3<f64> {
        let dir_cam = Vector3::new((col - self.cx) / self.fx, (row - self.cy) / self.fy, 1.0);
        self.rotation.transpose() * dir_cam
    }
}

/// One view: image, camera, and optional exact depth / point map.
#[derive(Debug, Clone)]
pub struct Frame {
    /// `(H, W, 3)` image in `[0, 1]`.
    pub image: Image,
    pub camera: Camera,
    /// Optional `(H, W)` depth in meters, positive where valid.
    pub depth: Option<Grid>,
    pub pointmap: Option<PointMap>,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }
}

/// Per-frame split label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FrameSplit {
    Input,
    HeldOut,
}

/// An ordered multi-view capture of a single scene.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scene_id: String,
    pub frames: Vec<Frame>,
    pub splits: Vec<FrameSplit>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Depth of the near plane in the two-plane occlusion scene (world z).
pub const TWO_PLANE_NEAR_Z: f64 = 0.8;
/// Half extent of the near plane rectangle in the two-plane scene.
pub const TWO_PLANE_RECT_HALF: f64 = 0.45;

/// Smooth procedural plane texture: a soft checkerboard plus seeded
/// low-frequency sinusoid noise, per channel. Smoothness keeps bilinear
/// resampling error well inside the geometry-oracle tolerance.
#[derive(Debug, Clone)]
struct PlaneTexture {
    cells: f64,
    // per channel: (amplitude, kx, ky, phase) x 4 components
    noise: [[(f64, f64, f64, f64); 4]; 3],
}

impl PlaneTexture {
    fn seeded(seed: u64, texture_cells: usize) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(0x7e58);
        let cells = texture_cells as f64;
        let mut noise = [[(0.0, 0.0, 0.0, 0.0); 4]; 3];
        for ch in noise.iter_mut() {
            for comp in ch.iter_mut() {
                let amp = rng.gen_range(0.02..0.06);
                let kx = rng.gen_range(-1.5 * cells..1.5 * cells);
                let ky = rng.gen_range(-1.5 * cells..1.5 * cells);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                *comp = (amp, kx, ky, phase);
            }
        }
        PlaneTexture { cells, noise }
    }

    fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let pi = std::f64::consts::PI;
        // soft checkerboard over cell size 2/cells
        let checker = 0.5
            * (1.0 + (pi * x * self.cells / 2.0).sin() * (pi * y * self.cells / 2.0).sin());
        let mut out = [0.0; 3];
        for (ch, slot) in out.iter_mut().enumerate() {
            let mut v = 0.35 + 0.4 * checker;
            for (amp, kx, ky, phase) in self.noise[ch] {
                v += amp * (kx * x + ky * y + phase).sin();
            }
            *slot = v.clamp(0.0, 1.0);
        }
        out
    }
}

/// Camera on an arc looking at the origin: azimuth/elevation in degrees,
/// radius in world units.
fn arc_camera(
    azimuth_deg: f64,
    elevation_deg: f64,
    radius: f64,
    width: usize,
    height: usize,
) -> Camera {
    let az = azimuth_deg.to_radians();
    let el = elevation_deg.to_radians();
    let eye = Vector3::new(
        radius * el.cos() * az.sin(),
        radius * el.cos() * az.cos(),
        radius * el.sin(),
    );
    let forward = (-eye).normalize();
    let mut axis = Vector3::new(0.0, 0.0, 1.0);
    if forward.dot(&axis).abs() > 0.999 {
        axis = Vector3::new(0.0, 1.0, 0.0);
    }
    let right = forward.cross(&axis).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -(rotation * eye);
    Camera {
        fx: 1.2 * width as f64,
        fy: 1.2 * width as f64,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
        rotation,
        translation,
        width,
        height,
    }
}

/// Ray-traces one frame of the ground plane `z = 0` with exact depth.
fn render_plane_frame(camera: Camera, texture: &PlaneTexture) -> Result<Frame> {
    let (h, w) = (camera.height, camera.width);
    let eye = camera.center();
    let mut image = Array3::zeros((h, w, 3));
    let mut depth = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let dir = camera.pixel_ray(i as f64, j as f64);
            if dir.z.abs() < 1e-12 {
                return Err(PriqaError::Numeric(
                    "plane ray parallel to ground plane".into(),
                ));
            }
            let s = -eye.z / dir.z;
            if s <= 0.0 {
                return Err(PriqaError::Numeric(
                    "plane intersection behind camera".into(),
                ));
            }
            let p = eye + dir * s;
            let rgb = texture.eval(p.x, p.y);
            for ch in 0..3 {
                image[[i, j, ch]] = rgb[ch];
            }
            // pixel_ray has unit camera-z, so s is the camera-space depth
            depth[[i, j]] = s;
        }
    }
    Ok(Frame {
        image,
        camera,
        depth: Some(depth),
        pointmap: None,
    })
}

/// Generates a textured ground-plane scene seen from `n_views` cameras on
/// an arc. Rendering is deterministic given the seed; every frame carries
/// exact analytic depth.
pub fn generate_planar_scene(
    seed: u64,
    n_views: usize,
    resolution: (usize, usize),
    texture_cells: usize,
) -> Result<Dataset> {
    let (h, w) = resolution;
    if n_views < 2 {
        return Err(PriqaError::Argument(format!(
            "need at least 2 views, got {n_views}"
        )));
    }
    if h < 16 || w < 16 {
        return Err(PriqaError::Argument(format!(
            "resolution must be at least 16x16, got {h}x{w}"
        )));
    }
    if texture_cells == 0 {
        return Err(PriqaError::Argument("texture_cells must be positive".into()));
    }
    let texture = PlaneTexture::seeded(seed, texture_cells);
    let mut frames = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let az = if n_views == 1 {
            0.0
        } else {
            -20.0 + 40.0 * v as f64 / (n_views - 1) as f64
        };
        let camera = arc_camera(az, 65.0, 2.5, w, h);
        frames.push(render_plane_frame(camera, &texture)?);
    }
    Ok(Dataset {
        scene_id: format!("planar-{seed}"),
        splits: vec![FrameSplit::Input; frames.len()],
        frames,
    })
}

/// Generates the two-plane occlusion scene: a finite near plane at
/// [`TWO_PLANE_NEAR_Z`] floating over the textured ground plane. Used to
/// exercise z-buffered warping against analytic visibility.
pub fn generate_two_plane_scene(seed: u64, resolution: (usize, usize)) -> Result<Dataset> {
    let (h, w) = resolution;
    if h < 16 || w < 16 {
        return Err(PriqaError::Argument(format!(
            "resolution must be at least 16x16, got {h}x{w}"
        )));
    }
    let ground = PlaneTexture::seeded(seed, 8);
    let near = PlaneTexture::seeded(seed.wrapping_add(101), 6);
    let mut frames = Vec::new();
    for v in 0..2 {
        let az = -12.0 + 24.0 * v as f64;
        let camera = arc_camera(az, 65.0, 2.5, w, h);
        let eye = camera.center();
        let mut image = Array3::zeros((h, w, 3));
        let mut depth = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let dir = camera.pixel_ray(i as f64, j as f64);
                let s_near = (TWO_PLANE_NEAR_Z - eye.z) / dir.z;
                let p_near = eye + dir * s_near;
                let hit_near = s_near > 0.0
                    && p_near.x.abs() <= TWO_PLANE_RECT_HALF
                    && p_near.y.abs() <= TWO_PLANE_RECT_HALF;
                let (s, rgb) = if hit_near {
                    (s_near, near.eval(p_near.x, p_near.y))
                } else {
                    let s_ground = -eye.z / dir.z;
                    let p = eye + dir * s_ground;
                    (s_ground, ground.eval(p.x, p.y))
                };
                for ch in 0..3 {
                    image[[i, j, ch]] = rgb[ch];
                }
                depth[[i, j]] = s;
            }
        }
        frames.push(Frame {
            image,
            camera,
            depth: Some(depth),
            pointmap: None,
        });
    }
    Ok(Dataset {
        scene_id: format!("two-plane-{seed}"),
        splits: vec![FrameSplit::Input; frames.len()],
        frames,
    })
}

/// Lifts a frame's depth grid into a world-space point map with full
/// confidence. Errors if the frame has no depth.
pub fn pointmap_from_depth(frame: &Frame) -> Result<PointMap> {
    let depth = frame
        .depth
        .as_ref()
        .ok_or_else(|| PriqaError::State("frame has no depth grid".into()))?;
    let (h, w) = depth.dim();
    let cam = &frame.camera;
    let mut points = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let d = depth[[i, j]];
            let p_cam = Vector3::new(
                d * (j as f64 - cam.cx) / cam.fx,
                d * (i as f64 - cam.cy) / cam.fy,
                d,
            );
            let p_world = cam.camera_to_world(&p_cam);
            points[[i, j, 0]] = p_world.x;
            points[[i, j, 1]] = p_world.y;
            points[[i, j, 2]] = p_world.z;
        }
    }
    Ok(PointMap {
        points,
        confidence: Array2::ones((h, w)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_points;

    #[test]
    fn planar_scene_is_deterministic() {
        let a = generate_planar_scene(0, 2, (64, 64), 8).unwrap();
        let b = generate_planar_scene(0, 2, (64, 64), 8).unwrap();
        assert_eq!(a.frames.len(), 2);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.image, fb.image);
            assert_eq!(fa.depth, fb.depth);
        }
        let c = generate_planar_scene(1, 2, (64, 64), 8).unwrap();
        assert_ne!(a.frames[0].image, c.frames[0].image);
    }

    #[test]
    fn planar_scene_rejects_bad_arguments() {
        assert!(matches!(
            generate_planar_scene(0, 1, (64, 64), 8),
            Err(PriqaError::Argument(_))
        ));
        assert!(matches!(
            generate_planar_scene(0, 2, (8, 64), 8),
            Err(PriqaError::Argument(_))
        ));
    }

    #[test]
    fn depth_points_lie_on_ground_plane() {
        let ds = generate_planar_scene(3, 2, (32, 32), 8).unwrap();
        let pm = pointmap_from_depth(&ds.frames[0]).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                assert!(pm.points[[i, j, 2]].abs() < 1e-9, "point off plane");
            }
        }
    }

    #[test]
    fn cross_view_reprojection_reproduces_colors() {
        // Reproject frame 0 pixel centers through its exact depth into
        // frame 1 and bilinearly sample frame 1; colors must agree.
        let ds = generate_planar_scene(0, 2, (64, 64), 8).unwrap();
        let f0 = &ds.frames[0];
        let f1 = &ds.frames[1];
        let pm = pointmap_from_depth(f0).unwrap();
        let mut abs_err = 0.0;
        let mut count = 0usize;
        let (h, w) = (f0.height(), f0.width());
        let points: Vec<[f64; 3]> = (0..h * w)
            .map(|n| {
                let (i, j) = (n / w, n % w);
                [
                    pm.points[[i, j, 0]],
                    pm.points[[i, j, 1]],
                    pm.points[[i, j, 2]],
                ]
            })
            .collect();
        let projected = project_points(&points, &f1.camera);
        for (n, proj) in projected.iter().enumerate() {
            let (i, j) = (n / w, n % w);
            let Some((u, v, _)) = proj else { continue };
            if *u < 0.0 || *v < 0.0 || *u > (w - 1) as f64 || *v > (h - 1) as f64 {
                continue;
            }
            let rgb = crate::grid::bilinear_sample(&f1.image, *v, *u);
            for ch in 0..3 {
                abs_err += (rgb[ch] - f0.image[[i, j, ch]]).abs();
            }
            count += 3;
        }
        assert!(count > 1000, "co-visible region unexpectedly small");
        let mae = abs_err / count as f64;
        assert!(mae < 0.02, "cross-view reprojection MAE {mae} >= 0.02");
    }

    #[test]
    fn pointmap_requires_depth() {
        let ds = generate_planar_scene(0, 2, (32, 32), 8).unwrap();
        let mut frame = ds.frames[0].clone();
        frame.depth = None;
        assert!(matches!(
            pointmap_from_depth(&frame),
            Err(PriqaError::State(_))
        ));
    }

    #[test]
    fn pointmap_identity_pose_principal_point() {
        // Identity pose, pixel at the principal point, depth d -> (0, 0, d).
        let camera = Camera {
            fx: 50.0,
            fy: 50.0,
            cx: 15.5,
            cy: 15.5,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            width: 32,
            height: 32,
        };
        let mut depth = Array2::zeros((32, 32));
        depth.fill(3.0);
        let frame = Frame {
            image: Array3::zeros((32, 32, 3)),
            camera,
            depth: Some(depth),
            pointmap: None,
        };
        let pm = pointmap_from_depth(&frame).unwrap();
        // principal point (15.5, 15.5) is between pixels; check pixel (15, 15)
        // against the hand matrix value and the optical axis at (cx, cy).
        let p = Vector3::new(
            pm.points[[15, 15, 0]],
            pm.points[[15, 15, 1]],
            pm.points[[15, 15, 2]],
        );
        let expected = Vector3::new(3.0 * (-0.5) / 50.0, 3.0 * (-0.5) / 50.0, 3.0);
        assert!((p - expected).norm() < 1e-12);
    }

    #[test]
    fn pointmap_translated_camera_matches_matrix_oracle() {
        // t = (1, 0, 0), identity rotation, pixel at the principal point,
        // depth 2: world point from a hand-checked homogeneous inverse.
        let camera = Camera {
            fx: 40.0,
            fy: 40.0,
            cx: 16.0,
            cy: 16.0,
            rotation: Matrix3::identity(),
            translation: Vector3::new(1.0, 0.0, 0.0),
            width: 33,
            height: 33,
        };
        let mut depth = Array2::zeros((33, 33));
        depth.fill(2.0);
        let frame = Frame {
            image: Array3::zeros((33, 33, 3)),
            camera,
            depth: Some(depth),
            pointmap: None,
        };
        let pm = pointmap_from_depth(&frame).unwrap();
        let got = Vector3::new(
            pm.points[[16, 16, 0]],
            pm.points[[16, 16, 1]],
            pm.points[[16, 16, 2]],
        );
        // brute-force 4x4 inverse oracle
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&frame.camera.rotation);
        m.fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&frame.camera.translation);
        let inv = m.try_inverse().unwrap();
        let cam_h = nalgebra::Vector4::new(0.0, 0.0, 2.0, 1.0);
        let world = inv * cam_h;
        let expected = Vector3::new(world.x, world.y, world.z);
        assert!((got - expected).norm() < 1e-12);
        assert!((expected - Vector3::new(-1.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn project_then_unproject_round_trips() {
        let ds = generate_planar_scene(7, 2, (32, 32), 8).unwrap();
        let f = &ds.frames[0];
        let pm = pointmap_from_depth(f).unwrap();
        let (h, w) = (f.height(), f.width());
        let points: Vec<[f64; 3]> = (0..h * w)
            .map(|n| {
                let (i, j) = (n / w, n % w);
                [
                    pm.points[[i, j, 0]],
                    pm.points[[i, j, 1]],
                    pm.points[[i, j, 2]],
                ]
            })
            .collect();
        let projected = project_points(&points, &f.camera);
        for (n, proj) in projected.iter().enumerate() {
            let (i, j) = (n / w, n % w);
            let (u, v, d) = proj.expect("all scene points are in front");
            assert!((u - j as f64).abs() < 1e-4, "u drift {u} at {j}");
            assert!((v - i as f64).abs() < 1e-4, "v drift {v} at {i}");
            assert!((d - f.depth.as_ref().unwrap()[[i, j]]).abs() < 1e-9);
        }
    }

    #[test]
    fn two_plane_scene_has_occlusion() {
        let ds = generate_two_plane_scene(0, (64, 64)).unwrap();
        let depth = ds.frames[0].depth.as_ref().unwrap();
        let near = depth.iter().filter(|d| **d < 2.0).count();
        assert!(near > 200, "near plane not visible ({near} pixels)");
        assert!(near < 64 * 64, "near plane covers everything");
    }
}
