//! On-disk dataset layout: 8-bit PNG frames, JSON cameras, and little-endian
//! binary sidecars for depth (`PRQDEPTH`) and features (`PRQFEAT`).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{Camera, Dataset, Frame, FrameSplit};
use crate::error::{PriqaError, Result};
use crate::grid::{to_u8_round_half_even, Grid, Image};

const DEPTH_MAGIC: &[u8; 8] = b"PRQDEPTH";
const FEATURE_MAGIC: &[u8; 7] = b"PRQFEAT";

#[derive(Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl From<&Camera> for CameraJson {
    fn from(cam: &Camera) -> Self {
        let m = &cam.rotation;
        CameraJson {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            r: [
                m[(0, 0)],
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 0)],
                m[(1, 1)],
                m[(1, 2)],
                m[(2, 0)],
                m[(2, 1)],
                m[(2, 2)],
            ],
            t: [cam.translation.x, cam.translation.y, cam.translation.z],
        }
    }
}

impl CameraJson {
    fn into_camera(self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: Matrix3::from_row_slice(&self.r),
            translation: Vector3::new(self.t[0], self.t[1], self.t[2]),
            width: self.width,
            height: self.height,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> PriqaError {
    PriqaError::io(path.display().to_string(), e)
}

/// Writes a dataset under `path` in the standard layout:
/// `frames/NNNN.png`, `cameras/NNNN.json`, and optional `depth/NNNN.bin`.
pub fn export_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let frames_dir = path.join("frames");
    let cameras_dir = path.join("cameras");
    fs::create_dir_all(&frames_dir).map_err(|e| io_err(&frames_dir, e))?;
    fs::create_dir_all(&cameras_dir).map_err(|e| io_err(&cameras_dir, e))?;
    let any_depth = dataset.frames.iter().any(|f| f.depth.is_some());
    let depth_dir = path.join("depth");
    if any_depth {
        fs::create_dir_all(&depth_dir).map_err(|e| io_err(&depth_dir, e))?;
    }

    for (idx, frame) in dataset.frames.iter().enumerate() {
        let png_path = frames_dir.join(format!("{idx:04}.png"));
        write_image_png(&frame.image, &png_path)?;

        let cam_path = cameras_dir.join(format!("{idx:04}.json"));
        let json = serde_json::to_string_pretty(&CameraJson::from(&frame.camera))
            .expect("camera serialization is infallible");
        fs::write(&cam_path, json).map_err(|e| io_err(&cam_path, e))?;

        if let Some(depth) = &frame.depth {
            let depth_path = depth_dir.join(format!("{idx:04}.bin"));
            write_depth_bin(depth, &depth_path)?;
        }
    }
    Ok(())
}

/// Loads a dataset from the standard layout. Every frame needs a camera
/// file; image/camera resolution mismatches and invalid cameras are
/// format errors.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let frames_dir = path.join("frames");
    let entries = fs::read_dir(&frames_dir).map_err(|e| io_err(&frames_dir, e))?;
    let mut png_paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    png_paths.sort();
    if png_paths.is_empty() {
        return Err(PriqaError::Format(format!(
            "no frames found under {}",
            frames_dir.display()
        )));
    }

    let mut frames = Vec::with_capacity(png_paths.len());
    for png_path in &png_paths {
        let stem = png_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| PriqaError::Format(format!("bad frame name {}", png_path.display())))?;
        let image = read_image_png(png_path)?;

        let cam_path = path.join("cameras").join(format!("{stem}.json"));
        let cam_text = fs::read_to_string(&cam_path).map_err(|_| {
            PriqaError::Format(format!("missing camera file {}", cam_path.display()))
        })?;
        let cam_json: CameraJson = serde_json::from_str(&cam_text).map_err(|e| {
            PriqaError::Format(format!("bad camera json {}: {e}", cam_path.display()))
        })?;
        let camera = cam_json.into_camera();
        camera.validate().map_err(|e| {
            PriqaError::Format(format!("invalid camera {}: {e}", cam_path.display()))
        })?;

        let (h, w, _) = image.dim();
        if h != camera.height || w != camera.width {
            return Err(PriqaError::Format(format!(
                "image {}x{} does not match camera {}x{} for frame {stem}",
                h, w, camera.height, camera.width
            )));
        }

        let depth_path = path.join("depth").join(format!("{stem}.bin"));
        let depth = if depth_path.exists() {
            let grid = read_depth_bin(&depth_path)?;
            if grid.dim() != (h, w) {
                return Err(PriqaError::Format(format!(
                    "depth resolution {:?} does not match image {h}x{w} for frame {stem}",
                    grid.dim()
                )));
            }
            Some(grid)
        } else {
            None
        };

        frames.push(Frame {
            image,
            camera,
            depth,
            pointmap: None,
        });
    }

    let scene_id = path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("scene")
        .to_string();
    Ok(Dataset {
        scene_id,
        splits: vec![FrameSplit::Input; frames.len()],
        frames,
    })
}

/// Writes an image as 8-bit RGB PNG with round-half-even quantization.
pub fn write_image_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = image::Rgb([
                to_u8_round_half_even(image[[i, j, 0]]),
                to_u8_round_half_even(image[[i, j, 1]]),
                to_u8_round_half_even(image[[i, j, 2]]),
            ]);
            buf.put_pixel(j as u32, i as u32, px);
        }
    }
    buf.save(path)
        .map_err(|e| PriqaError::Format(format!("png write {}: {e}", path.display())))
}

/// Reads an 8-bit RGB PNG into a float image in `[0, 1]`.
pub fn read_image_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| PriqaError::Format(format!("png read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for i in 0..h as usize {
        for j in 0..w as usize {
            let px = img.get_pixel(j as u32, i as u32);
            for ch in 0..3 {
                out[[i, j, ch]] = px[ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Writes a depth grid: `PRQDEPTH` magic, u32 H, u32 W, then row-major
/// little-endian f32.
pub fn write_depth_bin(depth: &Grid, path: &Path) -> Result<()> {
    let (h, w) = depth.dim();
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(DEPTH_MAGIC).map_err(|e| io_err(path, e))?;
    f.write_u32::<LittleEndian>(h as u32).map_err(|e| io_err(path, e))?;
    f.write_u32::<LittleEndian>(w as u32).map_err(|e| io_err(path, e))?;
    for v in depth.iter() {
        f.write_f32::<LittleEndian>(*v as f32).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Reads a `PRQDEPTH` depth grid.
pub fn read_depth_bin(path: &Path) -> Result<Grid> {
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != DEPTH_MAGIC {
        return Err(PriqaError::Format(format!(
            "bad depth magic in {}",
            path.display()
        )));
    }
    let h = f.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let w = f.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let mut out = Array2::zeros((h, w));
    for v in out.iter_mut() {
        *v = f.read_f32::<LittleEndian>().map_err(|e| io_err(path, e))? as f64;
    }
    Ok(out)
}

/// Writes a feature grid: `PRQFEAT` magic, u32 H', u32 W', u32 D, then
/// row-major little-endian f32.
pub fn write_feature_bin(features: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, d) = features.dim();
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(FEATURE_MAGIC).map_err(|e| io_err(path, e))?;
    f.write_u32::<LittleEndian>(h as u32).map_err(|e| io_err(path, e))?;
    f.write_u32::<LittleEndian>(w as u32).map_err(|e| io_err(path, e))?;
    f.write_u32::<LittleEndian>(d as u32).map_err(|e| io_err(path, e))?;
    for v in features.iter() {
        f.write_f32::<LittleEndian>(*v as f32).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Reads a `PRQFEAT` feature grid.
pub fn read_feature_bin(path: &Path) -> Result<Array3<f64>> {
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut magic = [0u8; 7];
    f.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != FEATURE_MAGIC {
        return Err(PriqaError::Format(format!(
            "bad feature magic in {}",
            path.display()
        )));
    }
    let h = f.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let w = f.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let d = f.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let mut out = Array3::zeros((h, w, d));
    for v in out.iter_mut() {
        *v = f.read_f32::<LittleEndian>().map_err(|e| io_err(path, e))? as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenekit::generate_planar_scene;

    #[test]
    fn dataset_round_trip_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let scene = dir.path().join("scene");
        let ds = generate_planar_scene(0, 3, (32, 32), 8).unwrap();
        export_dataset(&ds, &scene).unwrap();

        // one quantization cycle: reloading and re-exporting must be stable
        let first = load_dataset(&scene).unwrap();
        assert_eq!(first.len(), 3);
        let scene2 = dir.path().join("scene2");
        export_dataset(&first, &scene2).unwrap();
        let second = load_dataset(&scene2).unwrap();

        for (a, b) in first.frames.iter().zip(&second.frames) {
            for (va, vb) in a.image.iter().zip(b.image.iter()) {
                assert!((va - vb).abs() < 1e-6);
            }
            assert!((a.camera.fx - b.camera.fx).abs() < 1e-6);
            let dr = a.camera.rotation - b.camera.rotation;
            assert!(dr.iter().all(|v| v.abs() < 1e-6));
            let (da, db) = (a.depth.as_ref().unwrap(), b.depth.as_ref().unwrap());
            for (va, vb) in da.iter().zip(db.iter()) {
                assert!((va - vb).abs() < 1e-6);
            }
        }
        // cameras and depth survive the very first round trip too
        for (a, b) in ds.frames.iter().zip(&first.frames) {
            assert!((a.camera.cx - b.camera.cx).abs() < 1e-6);
            let (da, db) = (a.depth.as_ref().unwrap(), b.depth.as_ref().unwrap());
            for (va, vb) in da.iter().zip(db.iter()) {
                assert!((va - vb).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn missing_camera_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let scene = dir.path().join("scene");
        let ds = generate_planar_scene(0, 2, (32, 32), 8).unwrap();
        export_dataset(&ds, &scene).unwrap();
        fs::remove_file(scene.join("cameras/0001.json")).unwrap();
        assert!(matches!(
            load_dataset(&scene),
            Err(PriqaError::Format(_))
        ));
    }

    #[test]
    fn non_orthonormal_rotation_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let scene = dir.path().join("scene");
        let ds = generate_planar_scene(0, 2, (32, 32), 8).unwrap();
        export_dataset(&ds, &scene).unwrap();
        let cam_path = scene.join("cameras/0000.json");
        let mut json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&cam_path).unwrap()).unwrap();
        json["R"][0] = serde_json::json!(2.0);
        fs::write(&cam_path, serde_json::to_string(&json).unwrap()).unwrap();
        assert!(matches!(load_dataset(&scene), Err(PriqaError::Format(_))));
    }

    #[test]
    fn feature_bin_round_trips_f32_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let feats = Array3::from_shape_fn((5, 6, 3), |(i, j, k)| {
            ((i * 37 + j * 11 + k) as f64 / 17.0) as f32 as f64
        });
        write_feature_bin(&feats, &path).unwrap();
        let back = read_feature_bin(&path).unwrap();
        assert_eq!(feats, back);
    }
}
