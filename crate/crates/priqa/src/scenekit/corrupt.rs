//! Seeded synthetic image corruptions with per-pixel intensity tracking.
//!
//! Each corrupted frame carries a `(H, W)` intensity grid recording how
//! strongly each pixel was touched; the grids serve as exact desk-scale
//! ground truth for quality-map supervision.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::Frame;
use crate::error::{PriqaError, Result};
use crate::grid::{bilinear_sample, blur_image, Grid};

/// Intensities are in `[0, 1]`; zero disables the corresponding effect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionRecipe {
    /// Additive gaussian pixel noise.
    pub noise: f64,
    /// Global gaussian blur.
    pub blur: f64,
    /// Local affine warps inside seeded circular regions.
    pub local_warp: f64,
    /// Cyclic shuffle of `patch_count` square patches.
    pub patch_shuffle: f64,
    /// Global per-channel color offset.
    pub color_shift: f64,
    pub patch_size: usize,
    pub patch_count: usize,
    pub warp_count: usize,
}

impl Default for CorruptionRecipe {
    fn default() -> Self {
        CorruptionRecipe {
            noise: 0.0,
            blur: 0.0,
            local_warp: 0.0,
            patch_shuffle: 0.0,
            color_shift: 0.0,
            patch_size: 8,
            patch_count: 4,
            warp_count: 3,
        }
    }
}

impl CorruptionRecipe {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("noise", self.noise),
            ("blur", self.blur),
            ("local_warp", self.local_warp),
            ("patch_shuffle", self.patch_shuffle),
            ("color_shift", self.color_shift),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PriqaError::Argument(format!(
                    "recipe intensity {name}={v} outside [0, 1]"
                )));
            }
        }
        if self.patch_shuffle > 0.0 && self.patch_count < 2 {
            return Err(PriqaError::Argument(
                "patch_shuffle needs patch_count >= 2".into(),
            ));
        }
        if self.patch_size == 0 {
            return Err(PriqaError::Argument("patch_size must be positive".into()));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.noise == 0.0
            && self.blur == 0.0
            && self.local_warp == 0.0
            && self.patch_shuffle == 0.0
            && self.color_shift == 0.0
    }

    /// A small fixed suite of mixed recipes used to diversify training
    /// tuples.
    pub fn default_suite() -> Vec<CorruptionRecipe> {
        vec![
            CorruptionRecipe {
                local_warp: 0.7,
                patch_shuffle: 0.8,
                patch_count: 4,
                ..Default::default()
            },
            CorruptionRecipe {
                noise: 0.4,
                local_warp: 0.5,
                warp_count: 2,
                ..Default::default()
            },
            CorruptionRecipe {
                blur: 0.5,
                patch_shuffle: 0.6,
                patch_count: 3,
                ..Default::default()
            },
            CorruptionRecipe {
                noise: 0.3,
                color_shift: 0.5,
                local_warp: 0.6,
                ..Default::default()
            },
        ]
    }
}

/// Corrupted frame plus the per-pixel corruption-intensity grid.
#[derive(Debug, Clone)]
pub struct CorruptedFrame {
    pub frame: Frame,
    pub intensity: Grid,
}

/// Combines independent per-effect intensities, staying in `[0, 1]`.
fn combine(a: f64, b: f64) -> f64 {
    1.0 - (1.0 - a) * (1.0 - b)
}

/// Applies the recipe to a frame. Pure in `(frame, recipe, seed)`; camera,
/// depth, and point map pass through untouched.
pub fn corrupt_frame(frame: &Frame, recipe: &CorruptionRecipe, seed: u64) -> Result<CorruptedFrame> {
    recipe.validate()?;
    let (h, w, _) = frame.image.dim();
    let mut intensity = Array2::zeros((h, w));
    if recipe.is_identity() {
        return Ok(CorruptedFrame {
            frame: frame.clone(),
            intensity,
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(0xc0);
    let mut image = frame.image.clone();

    if recipe.color_shift > 0.0 {
        for ch in 0..3 {
            let delta = recipe.color_shift * rng.gen_range(-0.25..0.25);
            for i in 0..h {
                for j in 0..w {
                    image[[i, j, ch]] = (image[[i, j, ch]] + delta).clamp(0.0, 1.0);
                }
            }
        }
        for v in intensity.iter_mut() {
            *v = combine(*v, recipe.color_shift);
        }
    }

    if recipe.local_warp > 0.0 {
        let source = image.clone();
        let min_dim = h.min(w) as f64;
        for _ in 0..recipe.warp_count {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let radius = rng.gen_range(0.12..0.25) * min_dim;
            let m: [f64; 4] = [
                rng.gen_range(-0.5..0.5) * recipe.local_warp,
                rng.gen_range(-0.5..0.5) * recipe.local_warp,
                rng.gen_range(-0.5..0.5) * recipe.local_warp,
                rng.gen_range(-0.5..0.5) * recipe.local_warp,
            ];
            let bx = rng.gen_range(-0.3..0.3) * recipe.local_warp * radius;
            let by = rng.gen_range(-0.3..0.3) * recipe.local_warp * radius;
            let r_lo = (cy - radius).floor().max(0.0) as usize;
            let r_hi = ((cy + radius).ceil() as usize).min(h - 1);
            let c_lo = (cx - radius).floor().max(0.0) as usize;
            let c_hi = ((cx + radius).ceil() as usize).min(w - 1);
            for i in r_lo..=r_hi {
                for j in c_lo..=c_hi {
                    let dy = i as f64 - cy;
                    let dx = j as f64 - cx;
                    let dist = (dx * dx + dy * dy).sqrt();
                    if dist >= radius {
                        continue;
                    }
                    let t = dist / radius;
                    let weight = (std::f64::consts::FRAC_PI_2 * t).cos().powi(2);
                    let off_x = weight * (m[0] * dx + m[1] * dy + bx);
                    let off_y = weight * (m[2] * dx + m[3] * dy + by);
                    let px = bilinear_sample(&source, i as f64 + off_y, j as f64 + off_x);
                    for ch in 0..3 {
                        image[[i, j, ch]] = px[ch];
                    }
                    intensity[[i, j]] = combine(intensity[[i, j]], recipe.local_warp * weight);
                }
            }
        }
    }

    if recipe.blur > 0.0 {
        image = blur_image(&image, 3.0 * recipe.blur);
        for v in intensity.iter_mut() {
            *v = combine(*v, recipe.blur);
        }
    }

    if recipe.noise > 0.0 {
        let std = 0.15 * recipe.noise;
        for v in image.iter_mut() {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let g = (-2.0 * u1.ln()).sqrt() * u2.cos();
            *v = (*v + std * g).clamp(0.0, 1.0);
        }
        for v in intensity.iter_mut() {
            *v = combine(*v, recipe.noise);
        }
    }

    if recipe.patch_shuffle > 0.0 {
        let ps = recipe.patch_size;
        let tiles_r = h / ps;
        let tiles_c = w / ps;
        let n_tiles = tiles_r * tiles_c;
        if recipe.patch_count > n_tiles {
            return Err(PriqaError::Argument(format!(
                "patch_count {} exceeds available {}x{} tiles",
                recipe.patch_count, tiles_r, tiles_c
            )));
        }
        // seeded partial Fisher-Yates to pick distinct tiles
        let mut order: Vec<usize> = (0..n_tiles).collect();
        for i in 0..recipe.patch_count {
            let j = rng.gen_range(i..n_tiles);
            order.swap(i, j);
        }
        let chosen = &order[..recipe.patch_count];
        let source = image.clone();
        for (slot, &dst_tile) in chosen.iter().enumerate() {
            let src_tile = chosen[(slot + 1) % recipe.patch_count];
            let (dr, dc) = (dst_tile / tiles_c * ps, dst_tile % tiles_c * ps);
            let (sr, sc) = (src_tile / tiles_c * ps, src_tile % tiles_c * ps);
            for i in 0..ps {
                for j in 0..ps {
                    for ch in 0..3 {
                        image[[dr + i, dc + j, ch]] = source[[sr + i, sc + j, ch]];
                    }
                    intensity[[dr + i, dc + j]] =
                        combine(intensity[[dr + i, dc + j]], recipe.patch_shuffle);
                }
            }
        }
    }

    Ok(CorruptedFrame {
        frame: Frame {
            image,
            camera: frame.camera.clone(),
            depth: frame.depth.clone(),
            pointmap: frame.pointmap.clone(),
        },
        intensity,
    })
}
