//! Dense grid math shared across modules: sampling, resizing, blurring,
//! quantiles, and 8/16-bit quantization.
//!
//! Images are `(H, W, 3)` float arrays in `[0,1]`; scalar grids are `(H, W)`.

use ndarray::{Array2, Array3};

/// RGB image grid, `(H, W, 3)`, values in `[0, 1]`.
pub type Image = Array3<f64>;

/// Scalar grid, `(H, W)`.
pub type Grid = Array2<f64>;

/// Bilinear sample of an image at fractional (row, col); coordinates clamp
/// to the border.
pub fn bilinear_sample(img: &Image, row: f64, col: f64) -> [f64; 3] {
    let (h, w, _) = img.dim();
    let r = row.clamp(0.0, (h - 1) as f64);
    let c = col.clamp(0.0, (w - 1) as f64);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let mut out = [0.0; 3];
    for (ch, slot) in out.iter_mut().enumerate() {
        let v00 = img[[r0, c0, ch]];
        let v01 = img[[r0, c1, ch]];
        let v10 = img[[r1, c0, ch]];
        let v11 = img[[r1, c1, ch]];
        *slot = v00 * (1.0 - fr) * (1.0 - fc)
            + v01 * (1.0 - fr) * fc
            + v10 * fr * (1.0 - fc)
            + v11 * fr * fc;
    }
    out
}

/// Bilinear sample of a scalar grid at fractional (row, col), clamped.
pub fn bilinear_sample_grid(grid: &Grid, row: f64, col: f64) -> f64 {
    let (h, w) = grid.dim();
    let r = row.clamp(0.0, (h - 1) as f64);
    let c = col.clamp(0.0, (w - 1) as f64);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    grid[[r0, c0]] * (1.0 - fr) * (1.0 - fc)
        + grid[[r0, c1]] * (1.0 - fr) * fc
        + grid[[r1, c0]] * fr * (1.0 - fc)
        + grid[[r1, c1]] * fr * fc
}

/// Source coordinate for a destination pixel center under uniform scaling.
fn src_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

/// Bilinear resize of an image to (h, w).
pub fn resize_bilinear(img: &Image, h: usize, w: usize) -> Image {
    let (sh, sw, _) = img.dim();
    if sh == h && sw == w {
        return img.clone();
    }
    let mut out = Array3::zeros((h, w, 3));
    for i in 0..h {
        let sr = src_coord(i, sh, h);
        for j in 0..w {
            let sc = src_coord(j, sw, w);
            let px = bilinear_sample(img, sr, sc);
            for ch in 0..3 {
                out[[i, j, ch]] = px[ch];
            }
        }
    }
    out
}

/// Bilinear resize of a scalar grid to (h, w).
pub fn resize_bilinear_grid(grid: &Grid, h: usize, w: usize) -> Grid {
    let (sh, sw) = grid.dim();
    if sh == h && sw == w {
        return grid.clone();
    }
    Array2::from_shape_fn((h, w), |(i, j)| {
        bilinear_sample_grid(grid, src_coord(i, sh, h), src_coord(j, sw, w))
    })
}

/// Nearest-neighbor resize of a scalar grid.
pub fn resize_nearest_grid(grid: &Grid, h: usize, w: usize) -> Grid {
    let (sh, sw) = grid.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let r = nearest_index(i, sh, h);
        let c = nearest_index(j, sw, w);
        grid[[r, c]]
    })
}

/// Nearest-neighbor resize of a boolean grid.
pub fn resize_nearest_bool(grid: &Array2<bool>, h: usize, w: usize) -> Array2<bool> {
    let (sh, sw) = grid.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let r = nearest_index(i, sh, h);
        let c = nearest_index(j, sw, w);
        grid[[r, c]]
    })
}

/// Nearest source index for a destination index under uniform scaling.
pub fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    let s = src_coord(dst, src_len, dst_len);
    (s.round_ties_even().max(0.0) as usize).min(src_len - 1)
}

/// Normalized 1-D gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 / denom).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= sum;
    }
    kernel
}

/// Separable gaussian blur of a scalar grid; samples clamp at borders.
pub fn blur_grid(grid: &Grid, sigma: f64) -> Grid {
    let kernel = gaussian_kernel(sigma);
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

/// Separable gaussian blur of each image channel.
pub fn blur_image(img: &Image, sigma: f64) -> Image {
    let (h, w, _) = img.dim();
    let mut out = Array3::zeros((h, w, 3));
    for ch in 0..3 {
        let plane = img.index_axis(ndarray::Axis(2), ch).to_owned();
        let blurred = blur_grid(&plane, sigma);
        for i in 0..h {
            for j in 0..w {
                out[[i, j, ch]] = blurred[[i, j]];
            }
        }
    }
    out
}

/// Linear-interpolated quantile of a value slice, `q` in `[0, 1]`.
///
/// Matches the common "linear" convention: position `q * (n - 1)` in the
/// sorted order, interpolating between neighbors.
pub fn quantile_linear(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&q), "quantile fraction out of range");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in quantile"));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Quantize a unit-interval value to u8 with round-half-even ties.
pub fn to_u8_round_half_even(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Quantize a unit-interval value to u16 with round-half-even ties.
pub fn to_u16_round_half_even(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round_ties_even() as u16
}
