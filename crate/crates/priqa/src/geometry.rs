//! Projection and z-buffered cross-view warping of feature grids, plus
//! point-cloud confidence filtering and camera perturbation for
//! robustness experiments.

use nalgebra::{Rotation3, Unit, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{PriqaError, Result};
use crate::featuremetrics::FeatureMap;
use crate::grid::quantile_linear;
use crate::scenekit::Camera;

/// Default relative tolerance for z-buffer depth ties.
pub const DEFAULT_DEPTH_EPS: f64 = 1e-3;

/// Per-pixel 3D world coordinates with per-pixel confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    /// `(H, W, 3)` world coordinates in meters.
    pub points: Array3<f64>,
    /// `(H, W)` confidence in `[0, 1]`.
    pub confidence: Array2<f64>,
}

impl PointMap {
    pub fn dim(&self) -> (usize, usize) {
        self.confidence.dim()
    }

    pub fn point(&self, row: usize, col: usize) -> Vector3<f64> {
        Vector3::new(
            self.points[[row, col, 0]],
            self.points[[row, col, 1]],
            self.points[[row, col, 2]],
        )
    }

    /// Nearest-neighbor resample to a new resolution.
    pub fn resample_nearest(&self, h: usize, w: usize) -> PointMap {
        let (sh, sw) = self.dim();
        if (sh, sw) == (h, w) {
            return self.clone();
        }
        let mut points = Array3::zeros((h, w, 3));
        let mut confidence = Array2::zeros((h, w));
        for i in 0..h {
            let r = crate::grid::nearest_index(i, sh, h);
            for j in 0..w {
                let c = crate::grid::nearest_index(j, sw, w);
                for k in 0..3 {
                    points[[i, j, k]] = self.points[[r, c, k]];
                }
                confidence[[i, j]] = self.confidence[[r, c]];
            }
        }
        PointMap { points, confidence }
    }
}

/// Result of forward-splatting reference features into a query view.
#[derive(Debug, Clone)]
pub struct WarpResult {
    /// `(H, W, D)` warped feature grid, finite wherever `valid`.
    pub warped: Array3<f64>,
    /// `(H, W)` coverage mask: true where some reference point landed.
    pub valid: Array2<bool>,
    /// Winning reference pixel (row, col) per covered query pixel.
    pub src_index: Array2<Option<(usize, usize)>>,
    /// Winning depth per covered query pixel (0 where invalid).
    pub depth: Array2<f64>,
}

/// Projects a world point into a camera. Returns `(u, v, depth)` with
/// `u` along columns and `v` along rows, or `None` when the point is at
/// or behind the camera plane.
pub fn project_point(point: &Vector3<f64>, camera: &Camera) -> Option<(f64, f64, f64)> {
    let p = camera.world_to_camera(point);
    if p.z <= 0.0 {
        return None;
    }
    let u = camera.fx * p.x / p.z + camera.cx;
    let v = camera.fy * p.y / p.z + camera.cy;
    Some((u, v, p.z))
}

/// Projects a batch of world points; invalid points map to `None` rather
/// than erroring.
pub fn project_points(points: &[[f64; 3]], camera: &Camera) -> Vec<Option<(f64, f64, f64)>> {
    points
        .iter()
        .map(|p| project_point(&Vector3::new(p[0], p[1], p[2]), camera))
        .collect()
}

/// Z-buffered forward warp of reference features into the query view.
///
/// Each reference pixel whose confidence is at least `min_conf_keep` is
/// projected through its world point into the query camera and splatted
/// onto the nearest query pixel. Per query pixel the smallest depth wins;
/// sources within `depth_eps` relative depth of the minimum count as tied
/// and the lowest (row, col) source wins the tie.
pub fn warp_to_query(
    features_ref: &FeatureMap,
    pointmap_ref: &PointMap,
    camera_query: &Camera,
    min_conf_keep: f64,
    depth_eps: f64,
) -> Result<WarpResult> {
    if !(min_conf_keep > 0.0 && min_conf_keep <= 1.0) {
        return Err(PriqaError::Argument(format!(
            "min_conf_keep must lie in (0, 1], got {min_conf_keep}"
        )));
    }
    if depth_eps < 0.0 {
        return Err(PriqaError::Argument("depth_eps must be nonnegative".into()));
    }
    let (fh, fw, dim) = features_ref.data.dim();
    if fh == 0 || fw == 0 || dim == 0 {
        return Err(PriqaError::Argument("empty feature grid".into()));
    }
    let pm = pointmap_ref.resample_nearest(fh, fw);

    // map image-space pixel coordinates onto the (possibly reduced)
    // feature grid, scaling about pixel centers
    let su = fw as f64 / camera_query.width as f64;
    let sv = fh as f64 / camera_query.height as f64;
    let to_cell = |u: f64, v: f64| -> Option<(usize, usize)> {
        let uf = (u + 0.5) * su - 0.5;
        let vf = (v + 0.5) * sv - 0.5;
        let col = uf.round_ties_even();
        let row = vf.round_ties_even();
        if col < 0.0 || row < 0.0 || col > (fw - 1) as f64 || row > (fh - 1) as f64 {
            None
        } else {
            Some((row as usize, col as usize))
        }
    };

    // pass 1: minimum candidate depth per query cell
    let mut min_depth = Array2::from_elem((fh, fw), f64::INFINITY);
    for i in 0..fh {
        for j in 0..fw {
            if pm.confidence[[i, j]] < min_conf_keep {
                continue;
            }
            let Some((u, v, d)) = project_point(&pm.point(i, j), camera_query) else {
                continue;
            };
            let Some((r, c)) = to_cell(u, v) else { continue };
            if d < min_depth[[r, c]] {
                min_depth[[r, c]] = d;
            }
        }
    }

    // pass 2: lexicographically first source within the tie band
    let mut warped = Array3::zeros((fh, fw, dim));
    let mut valid = Array2::from_elem((fh, fw), false);
    let mut src_index = Array2::from_elem((fh, fw), None);
    let mut depth = Array2::zeros((fh, fw));
    for i in 0..fh {
        for j in 0..fw {
            if pm.confidence[[i, j]] < min_conf_keep {
                continue;
            }
            let Some((u, v, d)) = project_point(&pm.point(i, j), camera_query) else {
                continue;
            };
            let Some((r, c)) = to_cell(u, v) else { continue };
            if valid[[r, c]] {
                continue; // earlier lexicographic source already won
            }
            if d <= min_depth[[r, c]] * (1.0 + depth_eps) {
                for k in 0..dim {
                    warped[[r, c, k]] = features_ref.data[[i, j, k]];
                }
                valid[[r, c]] = true;
                src_index[[r, c]] = Some((i, j));
                depth[[r, c]] = d;
            }
        }
    }

    Ok(WarpResult {
        warped,
        valid,
        src_index,
        depth,
    })
}

/// Zeroes the confidence of pixels in the lowest `drop_fraction` quantile
/// (linear-interpolated threshold; ties at the threshold are dropped).
pub fn confidence_filter(pointmap: &PointMap, drop_fraction: f64) -> Result<PointMap> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(PriqaError::Argument(format!(
            "drop_fraction must lie in [0, 1), got {drop_fraction}"
        )));
    }
    if drop_fraction == 0.0 {
        return Ok(pointmap.clone());
    }
    let values: Vec<f64> = pointmap.confidence.iter().copied().collect();
    let threshold = quantile_linear(&values, drop_fraction);
    let mut out = pointmap.clone();
    for v in out.confidence.iter_mut() {
        if *v <= threshold {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Applies seeded gaussian perturbations to a camera: rotation by an angle
/// with standard deviation `level * 100` degrees about a random axis,
/// translation noise with std `level * |t|`, focal noise with std
/// `level * f`, and principal-point noise with std `level * dimension`.
/// The result is clamped back into a valid camera.
pub fn perturb_camera(camera: &Camera, level: f64, seed: u64) -> Camera {
    assert!(level >= 0.0, "perturbation level must be nonnegative");
    if level == 0.0 {
        return camera.clone();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(0xca3e);
    let mut gauss = move |std: f64| -> f64 {
        // Box-Muller on explicit uniform draws keeps the stream layout fixed
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        std * (-2.0 * u1.ln()).sqrt() * u2.cos()
    };

    let axis = loop {
        let v = Vector3::new(gauss(1.0), gauss(1.0), gauss(1.0));
        if v.norm() > 1e-9 {
            break v;
        }
    };
    let angle = gauss((level * 100.0).to_radians());
    let delta = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
    let rotation = delta.matrix() * camera.rotation;

    let t_std = level * camera.translation.norm();
    let translation = Vector3::new(
        camera.translation.x + gauss(t_std),
        camera.translation.y + gauss(t_std),
        camera.translation.z + gauss(t_std),
    );

    let fx = (camera.fx + gauss(level * camera.fx)).max(1e-6);
    let fy = (camera.fy + gauss(level * camera.fy)).max(1e-6);
    let cx = (camera.cx + gauss(level * camera.width as f64))
        .clamp(0.0, camera.width as f64 - 1e-9);
    let cy = (camera.cy + gauss(level * camera.height as f64))
        .clamp(0.0, camera.height as f64 - 1e-9);

    Camera {
        fx,
        fy,
        cx,
        cy,
        rotation,
        translation,
        width: camera.width,
        height: camera.height,
    }
}
