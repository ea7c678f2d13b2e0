//! Feature providers, the normalized cosine-similarity map, the SSIM
//! target map, and partial quality-map assembly.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{PriqaError, Result};
use crate::geometry::{confidence_filter, warp_to_query, WarpResult, DEFAULT_DEPTH_EPS};
use crate::grid::{blur_image, resize_nearest_bool, resize_nearest_grid, Grid, Image};
use crate::scenekit::{pointmap_from_depth, read_feature_bin, Dataset, Frame};

/// Confidence floor used when composing the partial-map pipeline: any
/// strictly positive confidence survives, zeroed pixels never do.
const MIN_CONF_EPS: f64 = 1e-9;

/// SSIM stabilization constants on the unit value range.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Per-pixel D-dimensional descriptor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `(H', W', D)` feature grid.
    pub data: Array3<f64>,
    /// Ratio of image resolution to feature resolution (1 = full).
    pub scale: f64,
}

impl FeatureMap {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// Per-pixel quality scores in `[0, 1]` plus a validity grid. Values are
/// zero-filled (and meaningless) where invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityMap {
    pub values: Grid,
    pub valid: Array2<bool>,
}

impl QualityMap {
    /// Fully valid map from a value grid.
    pub fn dense(values: Grid) -> QualityMap {
        let valid = Array2::from_elem(values.dim(), true);
        QualityMap { values, valid }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Values on valid pixels, row-major.
    pub fn valid_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(self.valid.iter())
            .filter(|(_, ok)| **ok)
            .map(|(v, _)| *v)
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Nearest-neighbor resize of values and validity.
    pub fn resize_nearest(&self, h: usize, w: usize) -> QualityMap {
        if self.dim() == (h, w) {
            return self.clone();
        }
        QualityMap {
            values: resize_nearest_grid(&self.values, h, w),
            valid: resize_nearest_bool(&self.valid, h, w),
        }
    }
}

/// Maps an image to a feature grid. Implementations must be deterministic
/// and stateless (or internally synchronized).
pub trait FeatureProvider: Sync {
    fn features(&self, image: &Image) -> Result<FeatureMap>;
}

/// Deterministic toy features: multi-scale blurred RGB plus gray
/// gradients, projected to `dim` channels by a seeded orthonormal matrix.
/// Stands in for a heavyweight learned backbone at full image resolution.
#[derive(Debug, Clone)]
pub struct ToyFeatureProvider {
    pub dim: usize,
    pub seed: u64,
}

impl Default for ToyFeatureProvider {
    fn default() -> Self {
        ToyFeatureProvider { dim: 8, seed: 0 }
    }
}

impl FeatureProvider for ToyFeatureProvider {
    fn features(&self, image: &Image) -> Result<FeatureMap> {
        toy_features(image, self.dim, self.seed)
    }
}

/// Serves precomputed feature binaries for known images, keyed by image
/// fingerprint. Lets offline-exported descriptors plug into the same
/// pipeline as the toy provider.
#[derive(Debug, Clone)]
pub struct FileFeatureProvider {
    entries: Vec<(u64, PathBuf)>,
}

impl FileFeatureProvider {
    /// Indexes `root/features/NNNN.bin` against the dataset's frames.
    pub fn from_dataset_dir(root: &Path, dataset: &Dataset) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, frame) in dataset.frames.iter().enumerate() {
            let path = root.join("features").join(format!("{idx:04}.bin"));
            if path.exists() {
                entries.push((fingerprint_image(&frame.image), path));
            }
        }
        if entries.is_empty() {
            return Err(PriqaError::Format(format!(
                "no feature binaries under {}/features",
                root.display()
            )));
        }
        Ok(FileFeatureProvider { entries })
    }
}

impl FeatureProvider for FileFeatureProvider {
    fn features(&self, image: &Image) -> Result<FeatureMap> {
        let fp = fingerprint_image(image);
        let (_, path) = self
            .entries
            .iter()
            .find(|(key, _)| *key == fp)
            .ok_or_else(|| {
                PriqaError::State("no precomputed features for this image".into())
            })?;
        let data = read_feature_bin(path)?;
        let scale = image.dim().0 as f64 / data.dim().0 as f64;
        Ok(FeatureMap { data, scale })
    }
}

/// FNV-1a over the 8-bit quantized pixels; stable across save/load cycles.
fn fingerprint_image(image: &Image) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for v in image.iter() {
        let byte = crate::grid::to_u8_round_half_even(*v);
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Raw 11-channel descriptor stack: blurred RGB at three scales plus
/// central-difference gradients of the gray channel.
fn toy_feature_stack(image: &Image) -> Array3<f64> {
    let (h, w, _) = image.dim();
    let mut stack = Array3::zeros((h, w, 11));
    for (s, sigma) in [1.0, 2.0, 4.0].iter().enumerate() {
        let blurred = blur_image(image, *sigma);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..3 {
                    stack[[i, j, 3 * s + ch]] = blurred[[i, j, ch]];
                }
            }
        }
    }
    let gray = Array2::from_shape_fn((h, w), |(i, j)| {
        (image[[i, j, 0]] + image[[i, j, 1]] + image[[i, j, 2]]) / 3.0
    });
    for i in 0..h {
        for j in 0..w {
            let jl = j.saturating_sub(1);
            let jr = (j + 1).min(w - 1);
            let it = i.saturating_sub(1);
            let ib = (i + 1).min(h - 1);
            stack[[i, j, 9]] = (gray[[i, jr]] - gray[[i, jl]]) / 2.0;
            stack[[i, j, 10]] = (gray[[ib, j]] - gray[[it, j]]) / 2.0;
        }
    }
    stack
}

/// Deterministic toy features at full image resolution (`scale = 1`).
pub fn toy_features(image: &Image, dim: usize, seed: u64) -> Result<FeatureMap> {
    const BASE: usize = 11;
    if dim < 4 {
        return Err(PriqaError::Argument(format!(
            "feature dim must be at least 4, got {dim}"
        )));
    }
    if dim > BASE {
        return Err(PriqaError::Argument(format!(
            "feature dim {dim} exceeds the {BASE}-channel descriptor stack"
        )));
    }
    let stack = toy_feature_stack(image);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(0xfea7);
    let raw = DMatrix::from_fn(BASE, BASE, |_, _| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        (-2.0 * u1.ln()).sqrt() * u2.cos()
    });
    let q = raw.qr().q();
    let (h, w, _) = image.dim();
    let mut data = Array3::zeros((h, w, dim));
    for i in 0..h {
        for j in 0..w {
            for d in 0..dim {
                let mut acc = 0.0;
                for b in 0..BASE {
                    acc += q[(b, d)] * stack[[i, j, b]];
                }
                data[[i, j, d]] = acc;
            }
        }
    }
    Ok(FeatureMap { data, scale: 1.0 })
}

/// Normalized cosine-similarity map between query features and warped
/// reference features: `0.5 * (cos + 1)` per pixel, valid on the warp
/// coverage. Near-zero-norm vectors map to the uninformative 0.5.
pub fn cosine_sim_map(f_query: &FeatureMap, warped: &WarpResult) -> Result<QualityMap> {
    let (h, w, d) = f_query.dim();
    if warped.warped.dim() != (h, w, d) {
        return Err(PriqaError::Argument(format!(
            "feature grid {:?} does not match warp {:?}",
            f_query.dim(),
            warped.warped.dim()
        )));
    }
    let mut values = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            if !warped.valid[[i, j]] {
                continue;
            }
            let mut dot = 0.0;
            let mut nu = 0.0;
            let mut nv = 0.0;
            for k in 0..d {
                let u = f_query.data[[i, j, k]];
                let v = warped.warped[[i, j, k]];
                dot += u * v;
                nu += u * u;
                nv += v * v;
            }
            let (nu, nv) = (nu.sqrt(), nv.sqrt());
            values[[i, j]] = if nu < 1e-12 || nv < 1e-12 {
                0.5
            } else {
                0.5 * (dot / (nu * nv) + 1.0)
            };
            valid[[i, j]] = true;
        }
    }
    Ok(QualityMap { values, valid })
}

/// Dense full-reference feature-similarity map between two aligned
/// feature grids: `0.5 * (cos + 1)` per pixel, fully valid. The aligned
/// analogue of [`cosine_sim_map`] for pose-matched image pairs.
pub fn feature_similarity_map(f_a: &FeatureMap, f_b: &FeatureMap) -> Result<QualityMap> {
    let (h, w, d) = f_a.dim();
    if f_b.dim() != (h, w, d) {
        return Err(PriqaError::Argument(format!(
            "feature grids differ: {:?} vs {:?}",
            f_a.dim(),
            f_b.dim()
        )));
    }
    let mut values = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for k in 0..d {
                let u = f_a.data[[i, j, k]];
                let v = f_b.data[[i, j, k]];
                dot += u * v;
                na += u * u;
                nb += v * v;
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            values[[i, j]] = if na < 1e-12 || nb < 1e-12 {
                0.5
            } else {
                0.5 * (dot / (na * nb) + 1.0)
            };
        }
    }
    Ok(QualityMap::dense(values))
}

/// Gaussian-window kernel of odd length `window` with the given sigma.
fn window_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let radius = (window / 2) as i64;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / denom).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable windowed filter with clamp-at-border sampling.
fn window_filter(grid: &Grid, kernel: &[f64]) -> Grid {
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = grid.dim();
    let mut tmp = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let c = (j as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * grid[[i, c]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let r = (i as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[[r, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Per-pixel SSIM between two images over a gaussian window; luminance is
/// the channel mean, values clamp to `[0, 1]`, and the result is fully
/// valid. Window samples clamp at image borders.
pub fn ssim_map(a: &Image, b: &Image, window: usize, sigma: f64) -> Result<QualityMap> {
    if a.dim() != b.dim() {
        return Err(PriqaError::Argument(format!(
            "image dims differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if window % 2 == 0 || window < 3 {
        return Err(PriqaError::Argument(format!(
            "window must be odd and >= 3, got {window}"
        )));
    }
    if sigma <= 0.0 {
        return Err(PriqaError::Argument("sigma must be positive".into()));
    }
    let (h, w, _) = a.dim();
    let gray = |img: &Image| {
        Array2::from_shape_fn((h, w), |(i, j)| {
            (img[[i, j, 0]] + img[[i, j, 1]] + img[[i, j, 2]]) / 3.0
        })
    };
    let ga = gray(a);
    let gb = gray(b);
    let kernel = window_kernel(window, sigma);
    let mu_a = window_filter(&ga, &kernel);
    let mu_b = window_filter(&gb, &kernel);
    let aa = window_filter(&(&ga * &ga), &kernel);
    let bb = window_filter(&(&gb * &gb), &kernel);
    let ab = window_filter(&(&ga * &gb), &kernel);

    let mut values = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (ma, mb) = (mu_a[[i, j]], mu_b[[i, j]]);
            let va = aa[[i, j]] - ma * ma;
            let vb = bb[[i, j]] - mb * mb;
            let cov = ab[[i, j]] - ma * mb;
            let ssim = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            values[[i, j]] = ssim.clamp(0.0, 1.0);
        }
    }
    Ok(QualityMap::dense(values))
}

/// SSIM with the conventional 11-tap window and sigma 1.5.
pub fn ssim_map_default(a: &Image, b: &Image) -> Result<QualityMap> {
    ssim_map(a, b, 11, 1.5)
}

/// Builds the partial quality map for a query/reference pair: confidence
/// filtering, z-buffered feature warping, then the normalized cosine map,
/// resized to the query resolution when the provider works at reduced
/// resolution. Validity marks the geometric overlap.
pub fn build_partial_map(
    query: &Frame,
    reference: &Frame,
    provider: &dyn FeatureProvider,
    drop_fraction: f64,
) -> Result<QualityMap> {
    let pointmap = match &reference.pointmap {
        Some(pm) => pm.clone(),
        None => pointmap_from_depth(reference)?,
    };
    let filtered = confidence_filter(&pointmap, drop_fraction)?;
    let f_q = provider.features(&query.image)?;
    let f_r = provider.features(&reference.image)?;
    if f_q.dim() != f_r.dim() {
        return Err(PriqaError::Argument(format!(
            "provider returned mismatched feature grids: {:?} vs {:?}",
            f_q.dim(),
            f_r.dim()
        )));
    }
    let warp = warp_to_query(&f_r, &filtered, &query.camera, MIN_CONF_EPS, DEFAULT_DEPTH_EPS)?;
    let qm = cosine_sim_map(&f_q, &warp)?;
    Ok(qm.resize_nearest(query.height(), query.width()))
}

/// Writes a quality map as a 16-bit grayscale PNG (`value * 65535`,
/// round-half-even) plus a 1-bit validity PNG.
pub fn write_quality_png(qm: &QualityMap, value_path: &Path, valid_path: &Path) -> Result<()> {
    let (h, w) = qm.dim();
    let mut buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            buf.put_pixel(
                j as u32,
                i as u32,
                image::Luma([crate::grid::to_u16_round_half_even(qm.values[[i, j]])]),
            );
        }
    }
    buf.save(value_path)
        .map_err(|e| PriqaError::Format(format!("png write {}: {e}", value_path.display())))?;

    // 1-bit grayscale validity plane, rows padded to byte boundaries
    let file = std::fs::File::create(valid_path)
        .map_err(|e| PriqaError::io(valid_path.display().to_string(), e))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let mut writer = encoder
        .write_header()
        .map_err(|e| PriqaError::Format(format!("png header {}: {e}", valid_path.display())))?;
    let row_bytes = w.div_ceil(8);
    let mut data = vec![0u8; row_bytes * h];
    for i in 0..h {
        for j in 0..w {
            if qm.valid[[i, j]] {
                data[i * row_bytes + j / 8] |= 0x80 >> (j % 8);
            }
        }
    }
    writer
        .write_image_data(&data)
        .map_err(|e| PriqaError::Format(format!("png write {}: {e}", valid_path.display())))?;
    Ok(())
}

/// Reads a quality map written by [`write_quality_png`].
pub fn read_quality_png(value_path: &Path, valid_path: &Path) -> Result<QualityMap> {
    let img = image::open(value_path)
        .map_err(|e| PriqaError::Format(format!("png read {}: {e}", value_path.display())))?
        .to_luma16();
    let (w, h) = img.dimensions();
    let values = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0
    });

    let file = std::fs::File::open(valid_path)
        .map_err(|e| PriqaError::io(valid_path.display().to_string(), e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| PriqaError::Format(format!("png read {}: {e}", valid_path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| PriqaError::Format(format!("png read {}: {e}", valid_path.display())))?;
    if info.width != w || info.height != h {
        return Err(PriqaError::Format(format!(
            "validity plane {}x{} does not match value plane {w}x{h}",
            info.width, info.height
        )));
    }
    let (vh, vw) = (info.height as usize, info.width as usize);
    let mut valid = Array2::from_elem((vh, vw), false);
    match info.bit_depth {
        png::BitDepth::One => {
            let row_bytes = vw.div_ceil(8);
            for i in 0..vh {
                for j in 0..vw {
                    valid[[i, j]] = buf[i * row_bytes + j / 8] & (0x80 >> (j % 8)) != 0;
                }
            }
        }
        png::BitDepth::Eight => {
            for i in 0..vh {
                for j in 0..vw {
                    valid[[i, j]] = buf[i * vw + j] != 0;
                }
            }
        }
        other => {
            return Err(PriqaError::Format(format!(
                "unsupported validity bit depth {other:?}"
            )))
        }
    }
    Ok(QualityMap { values, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_point;
    use crate::scenekit::{corrupt_frame, generate_planar_scene, CorruptionRecipe};
    use nalgebra::Vector3;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn warp_from_features(data: Array3<f64>) -> WarpResult {
        let (h, w, _) = data.dim();
        WarpResult {
            warped: data,
            valid: Array2::from_elem((h, w), true),
            src_index: Array2::from_elem((h, w), None),
            depth: Array2::ones((h, w)),
        }
    }

    #[test]
    fn toy_features_are_deterministic() {
        let ds = generate_planar_scene(0, 2, (32, 32), 8).unwrap();
        let a = toy_features(&ds.frames[0].image, 8, 3).unwrap();
        let b = toy_features(&ds.frames[0].image, 8, 3).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn constant_image_has_zero_gradient_channels() {
        let image = Array3::from_elem((16, 16, 3), 0.3);
        let stack = toy_feature_stack(&image);
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(stack[[i, j, 9]], 0.0);
                assert_eq!(stack[[i, j, 10]], 0.0);
            }
        }
    }

    #[test]
    fn toy_features_reject_bad_dims() {
        let image = Array3::zeros((8, 8, 3));
        assert!(matches!(
            toy_features(&image, 3, 0),
            Err(PriqaError::Argument(_))
        ));
        assert!(matches!(
            toy_features(&image, 12, 0),
            Err(PriqaError::Argument(_))
        ));
    }

    #[test]
    fn cross_view_features_agree_at_correspondences() {
        let ds = generate_planar_scene(0, 2, (48, 48), 8).unwrap();
        let f0 = &ds.frames[0];
        let f1 = &ds.frames[1];
        let feat0 = toy_features(&f0.image, 8, 0).unwrap();
        let feat1 = toy_features(&f1.image, 8, 0).unwrap();
        let pm = crate::scenekit::pointmap_from_depth(f0).unwrap();
        let mut cos_sum = 0.0;
        let mut count = 0usize;
        for i in 0..48 {
            for j in 0..48 {
                let Some((u, v, _)) = project_point(
                    &Vector3::new(
                        pm.points[[i, j, 0]],
                        pm.points[[i, j, 1]],
                        pm.points[[i, j, 2]],
                    ),
                    &f1.camera,
                ) else {
                    continue;
                };
                let (r, c) = (v.round() as i64, u.round() as i64);
                if r < 0 || c < 0 || r >= 48 || c >= 48 {
                    continue;
                }
                let (r, c) = (r as usize, c as usize);
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for k in 0..8 {
                    dot += feat0.data[[i, j, k]] * feat1.data[[r, c, k]];
                    na += feat0.data[[i, j, k]].powi(2);
                    nb += feat1.data[[r, c, k]].powi(2);
                }
                cos_sum += dot / (na.sqrt() * nb.sqrt());
                count += 1;
            }
        }
        let mean = cos_sum / count as f64;
        assert!(count > 500);
        assert!(mean > 0.9, "mean correspondence cosine {mean} <= 0.9");
    }

    #[test]
    fn cosine_map_hits_eq1_anchor_values() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let u = Array3::from_shape_fn((4, 4, 6), |_| rng.gen_range(-1.0..1.0f64));
        let f = FeatureMap {
            data: u.clone(),
            scale: 1.0,
        };

        let parallel = cosine_sim_map(&f, &warp_from_features(u.clone())).unwrap();
        for v in parallel.values.iter() {
            assert!((v - 1.0).abs() < 1e-6);
        }

        let anti = cosine_sim_map(&f, &warp_from_features(u.mapv(|x| -x))).unwrap();
        for v in anti.values.iter() {
            assert!(v.abs() < 1e-6);
        }

        // orthogonal: concentrate energy in disjoint channels
        let mut a = Array3::zeros((4, 4, 6));
        let mut b = Array3::zeros((4, 4, 6));
        for i in 0..4 {
            for j in 0..4 {
                a[[i, j, 0]] = 1.0 + (i + j) as f64;
                b[[i, j, 1]] = 2.0 - i as f64 * 0.1;
            }
        }
        let fa = FeatureMap { data: a, scale: 1.0 };
        let ortho = cosine_sim_map(&fa, &warp_from_features(b)).unwrap();
        for v in ortho.values.iter() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_map_zero_norm_is_half_and_valid() {
        let zeros = Array3::zeros((2, 2, 4));
        let f = FeatureMap {
            data: zeros.clone(),
            scale: 1.0,
        };
        let qm = cosine_sim_map(&f, &warp_from_features(zeros)).unwrap();
        for (v, ok) in qm.values.iter().zip(qm.valid.iter()) {
            assert_eq!(*v, 0.5);
            assert!(*ok);
        }
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let ds = generate_planar_scene(2, 2, (32, 32), 8).unwrap();
        let qm = ssim_map_default(&ds.frames[0].image, &ds.frames[0].image).unwrap();
        for v in qm.values.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(qm.valid.iter().all(|v| *v));
    }

    #[test]
    fn ssim_of_opposite_constants_is_near_zero() {
        let a = Array3::zeros((16, 16, 3));
        let b = Array3::ones((16, 16, 3));
        let qm = ssim_map_default(&a, &b).unwrap();
        // closed form: C1 * C2 / ((1 + C1) * C2) = C1 / (1 + C1)
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        for v in qm.values.iter() {
            assert!((v - expected).abs() < 1e-12);
            assert!(*v < 0.01);
        }
    }

    #[test]
    fn ssim_matches_bruteforce_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let a = Array3::from_shape_fn((32, 32, 3), |_| rng.gen_range(0.0..1.0));
        let b = Array3::from_shape_fn((32, 32, 3), |_| rng.gen_range(0.0..1.0));
        let fast = ssim_map(&a, &b, 11, 1.5).unwrap();

        // independent direct per-pixel computation over the full window
        let gray = |img: &Image, i: i64, j: i64| {
            let i = i.clamp(0, 31) as usize;
            let j = j.clamp(0, 31) as usize;
            (img[[i, j, 0]] + img[[i, j, 1]] + img[[i, j, 2]]) / 3.0
        };
        let k1 = window_kernel(11, 1.5);
        for i in 0..32i64 {
            for j in 0..32i64 {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (di, kv_i) in k1.iter().enumerate() {
                    for (dj, kv_j) in k1.iter().enumerate() {
                        let wgt = kv_i * kv_j;
                        let va = gray(&a, i + di as i64 - 5, j + dj as i64 - 5);
                        let vb = gray(&b, i + di as i64 - 5, j + dj as i64 - 5);
                        ma += wgt * va;
                        mb += wgt * vb;
                        maa += wgt * va * va;
                        mbb += wgt * vb * vb;
                        mab += wgt * va * vb;
                    }
                }
                let (va, vb, cov) = (maa - ma * ma, mbb - mb * mb, mab - ma * mb);
                let ssim = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                let expected = ssim.clamp(0.0, 1.0);
                let got = fast.values[[i as usize, j as usize]];
                assert!(
                    (got - expected).abs() < 1e-6,
                    "ssim mismatch at ({i}, {j}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn partial_map_same_frame_is_all_ones() {
        let ds = generate_planar_scene(0, 2, (32, 32), 8).unwrap();
        let provider = ToyFeatureProvider::default();
        let qm = build_partial_map(&ds.frames[0], &ds.frames[0], &provider, 0.0).unwrap();
        assert!(qm.valid.iter().all(|v| *v));
        for v in qm.values.iter() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn partial_map_disjoint_frusta_is_all_invalid() {
        let ds = generate_planar_scene(0, 2, (32, 32), 8).unwrap();
        let reference = &ds.frames[0];
        // query camera at the same position but looking straight up:
        // every ground point sits behind it
        let mut query = ds.frames[1].clone();
        let eye = query.camera.center();
        query.camera.rotation = nalgebra::Matrix3::identity();
        query.camera.translation = -eye;
        let provider = ToyFeatureProvider::default();
        let qm = build_partial_map(&query, reference, &provider, 0.0).unwrap();
        assert!(qm.valid.iter().all(|v| !*v));
    }

    #[test]
    fn partial_map_localizes_patch_shuffle() {
        let ds = generate_planar_scene(0, 2, (64, 64), 8).unwrap();
        let recipe = CorruptionRecipe {
            patch_shuffle: 1.0,
            patch_count: 10,
            patch_size: 8,
            ..Default::default()
        };
        let corrupted = corrupt_frame(&ds.frames[0], &recipe, 5).unwrap();
        let provider = ToyFeatureProvider::default();
        let qm = build_partial_map(&corrupted.frame, &ds.frames[1], &provider, 0.0).unwrap();
        let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..64 {
            for j in 0..64 {
                if !qm.valid[[i, j]] {
                    continue;
                }
                if corrupted.intensity[[i, j]] > 0.0 {
                    in_sum += qm.values[[i, j]];
                    in_n += 1;
                } else {
                    out_sum += qm.values[[i, j]];
                    out_n += 1;
                }
            }
        }
        assert!(in_n > 100 && out_n > 100);
        let (mean_in, mean_out) = (in_sum / in_n as f64, out_sum / out_n as f64);
        assert!(
            mean_out - mean_in >= 0.1,
            "shuffled region not localized: inside {mean_in}, outside {mean_out}"
        );
    }

    #[test]
    fn ssim_anticorrelates_with_corruption_intensity() {
        let ds = generate_planar_scene(0, 2, (64, 64), 8).unwrap();
        let recipe = CorruptionRecipe {
            patch_shuffle: 0.9,
            patch_count: 8,
            local_warp: 0.8,
            ..Default::default()
        };
        let corrupted = corrupt_frame(&ds.frames[0], &recipe, 11).unwrap();
        let ssim = ssim_map_default(&corrupted.frame.image, &ds.frames[0].image).unwrap();
        let xs: Vec<f64> = ssim.values.iter().copied().collect();
        let ys: Vec<f64> = corrupted.intensity.iter().copied().collect();
        let r = crate::evalharness::plcc(&xs, &ys).unwrap();
        assert!(r < -0.3, "SSIM vs intensity PLCC {r} not below -0.3");
    }

    #[test]
    fn quality_png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let values = Array2::from_shape_fn((20, 31), |_| rng.gen_range(0.0..1.0));
        let valid = Array2::from_shape_fn((20, 31), |(i, j)| (i + j) % 3 != 0);
        let qm = QualityMap { values, valid };
        let vp = dir.path().join("q.png");
        let mp = dir.path().join("q_valid.png");
        write_quality_png(&qm, &vp, &mp).unwrap();
        let back = read_quality_png(&vp, &mp).unwrap();
        assert_eq!(back.valid, qm.valid);
        for (a, b) in back.values.iter().zip(qm.values.iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn cosine_map_symmetric_and_scale_invariant(seed in 0u64..200, scale in 0.01f64..100.0) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let a = Array3::from_shape_fn((3, 3, 5), |_| rng.gen_range(-1.0..1.0f64));
            let b = Array3::from_shape_fn((3, 3, 5), |_| rng.gen_range(-1.0..1.0f64));
            let fa = FeatureMap { data: a.clone(), scale: 1.0 };
            let fb = FeatureMap { data: b.clone(), scale: 1.0 };

            let ab = cosine_sim_map(&fa, &warp_from_features(b.clone())).unwrap();
            let ba = cosine_sim_map(&fb, &warp_from_features(a.clone())).unwrap();
            for (x, y) in ab.values.iter().zip(ba.values.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }

            let scaled = cosine_sim_map(&fa, &warp_from_features(b.mapv(|x| x * scale))).unwrap();
            for (x, y) in ab.values.iter().zip(scaled.values.iter()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn quality_maps_stay_in_unit_range(seed in 0u64..100) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let a = Array3::from_shape_fn((8, 8, 3), |_| rng.gen_range(0.0..1.0));
            let b = Array3::from_shape_fn((8, 8, 3), |_| rng.gen_range(0.0..1.0));
            let qm = ssim_map_default(&a, &b).unwrap();
            for v in qm.values.iter() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
