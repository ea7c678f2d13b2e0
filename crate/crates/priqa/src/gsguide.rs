//! Quality-aware supervision for splatting trainers: multi-reference
//! consolidation, pseudo-GT selection, retention masks, the masked
//! reconstruction loss, and guidance artifact export.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{PriqaError, Result};
use crate::featuremetrics::{ssim_map_default, QualityMap};
use crate::grid::{quantile_linear, to_u8_round_half_even, Grid, Image};
use crate::scenekit::write_image_png;

/// Default retention percentage for binary masks.
pub const DEFAULT_TAU: f64 = 50.0;
/// Default structural-term weight in the reconstruction loss.
pub const DEFAULT_LAMBDA_DSSIM: f64 = 0.2;

/// Candidate images for one viewpoint with per-reference quality maps.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub viewpoint_id: String,
    pub candidates: Vec<Candidate>,
    pub references: (String, String),
}

/// One candidate: the image plus its two reference-conditioned maps.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub image: Image,
    pub q_ref1: QualityMap,
    pub q_ref2: QualityMap,
}

/// Outcome of pseudo-GT selection for a viewpoint.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub chosen: usize,
    pub pseudo_gt: Image,
    pub consolidated: QualityMap,
    pub score: f64,
    pub per_candidate_scores: Vec<f64>,
}

/// Mask flavor used during supervised reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Binary,
    Soft,
    AllOnes,
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MaskKind::Binary => "binary",
            MaskKind::Soft => "soft",
            MaskKind::AllOnes => "all_ones",
        };
        f.write_str(s)
    }
}

/// Per-pixel supervision weights: `{0, 1}` for binary masks, `[0, 1]`
/// for soft masks.
#[derive(Debug, Clone)]
pub struct SupervisionMask {
    pub mask: Grid,
    /// Retention percentage used to build a binary mask; 100 otherwise.
    pub tau: f64,
    pub kind: MaskKind,
}

impl SupervisionMask {
    /// Full-trust mask used for real input frames.
    pub fn all_ones(h: usize, w: usize) -> SupervisionMask {
        SupervisionMask {
            mask: Array2::ones((h, w)),
            tau: 100.0,
            kind: MaskKind::AllOnes,
        }
    }
}

/// Pixel-wise optimistic consolidation of two quality maps: the maximum
/// on jointly valid pixels, the valid side elsewhere; validity is the
/// union.
pub fn consolidate(q1: &QualityMap, q2: &QualityMap) -> Result<QualityMap> {
    if q1.dim() != q2.dim() {
        return Err(PriqaError::Argument(format!(
            "consolidate resolution mismatch: {:?} vs {:?}",
            q1.dim(),
            q2.dim()
        )));
    }
    let (h, w) = q1.dim();
    let mut values = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            match (q1.valid[[i, j]], q2.valid[[i, j]]) {
                (true, true) => {
                    values[[i, j]] = q1.values[[i, j]].max(q2.values[[i, j]]);
                    valid[[i, j]] = true;
                }
                (true, false) => {
                    values[[i, j]] = q1.values[[i, j]];
                    valid[[i, j]] = true;
                }
                (false, true) => {
                    values[[i, j]] = q2.values[[i, j]];
                    valid[[i, j]] = true;
                }
                (false, false) => {}
            }
        }
    }
    Ok(QualityMap { values, valid })
}

/// Mean quality over valid pixels.
pub fn image_score(q: &QualityMap) -> Result<f64> {
    let vals = q.valid_values();
    if vals.is_empty() {
        return Err(PriqaError::EmptySupport(
            "image score over an all-invalid map".into(),
        ));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Consolidates each candidate's reference maps, scores them by mean
/// quality, and selects the argmax (ties break to the lowest index).
pub fn select_pseudo_gt(set: &CandidateSet) -> Result<SelectionResult> {
    if set.candidates.is_empty() {
        return Err(PriqaError::Argument(format!(
            "viewpoint {} has no candidates",
            set.viewpoint_id
        )));
    }
    let mut consolidated = Vec::with_capacity(set.candidates.len());
    let mut scores = Vec::with_capacity(set.candidates.len());
    for cand in &set.candidates {
        let merged = consolidate(&cand.q_ref1, &cand.q_ref2)?;
        scores.push(image_score(&merged)?);
        consolidated.push(merged);
    }
    let mut chosen = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[chosen] {
            chosen = i;
        }
    }
    Ok(SelectionResult {
        chosen,
        pseudo_gt: set.candidates[chosen].image.clone(),
        consolidated: consolidated.swap_remove(chosen),
        score: scores[chosen],
        per_candidate_scores: scores,
    })
}

/// Binary retention mask keeping the top `tau` percent of valid quality
/// values: the threshold is the linear-interpolated `(100 - tau)`-th
/// percentile and pixels at or above it are kept. Invalid pixels mask to
/// zero.
pub fn percentile_mask(q: &QualityMap, tau: f64) -> Result<SupervisionMask> {
    if !(tau > 0.0 && tau <= 100.0) {
        return Err(PriqaError::Argument(format!(
            "tau must lie in (0, 100], got {tau}"
        )));
    }
    let vals = q.valid_values();
    if vals.is_empty() {
        return Err(PriqaError::EmptySupport(
            "percentile mask over an all-invalid map".into(),
        ));
    }
    let threshold = quantile_linear(&vals, (100.0 - tau) / 100.0);
    let (h, w) = q.dim();
    let mut mask = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            if q.valid[[i, j]] && q.values[[i, j]] >= threshold {
                mask[[i, j]] = 1.0;
            }
        }
    }
    Ok(SupervisionMask {
        mask,
        tau,
        kind: MaskKind::Binary,
    })
}

/// Soft mask: quality values weight the loss directly on valid pixels.
pub fn soft_mask(q: &QualityMap) -> SupervisionMask {
    let (h, w) = q.dim();
    let mut mask = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            if q.valid[[i, j]] {
                mask[[i, j]] = q.values[[i, j]];
            }
        }
    }
    SupervisionMask {
        mask,
        tau: 100.0,
        kind: MaskKind::Soft,
    }
}

/// Per-term breakdown of the masked reconstruction loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReconBreakdown {
    pub l1: f64,
    pub dssim: f64,
    pub total: f64,
}

/// Masked reconstruction loss: a mask-weighted L1 term (normalized by the
/// weight sum, so binary and soft masks share one formula) combined with
/// an unmasked D-SSIM term:
/// `(1 - lambda) * L1_masked + lambda * (1 - mean SSIM)`.
pub fn masked_recon_loss(
    rendered: &Image,
    target: &Image,
    mask: &SupervisionMask,
    lambda_dssim: f64,
) -> Result<(f64, ReconBreakdown)> {
    masked_recon_loss_with(rendered, target, mask, lambda_dssim, false)
}

/// Variant with a masked D-SSIM term for pipelines that want the mask
/// applied to both terms.
pub fn masked_recon_loss_with(
    rendered: &Image,
    target: &Image,
    mask: &SupervisionMask,
    lambda_dssim: f64,
    masked_dssim: bool,
) -> Result<(f64, ReconBreakdown)> {
    if rendered.dim() != target.dim() {
        return Err(PriqaError::Argument(format!(
            "image dims differ: {:?} vs {:?}",
            rendered.dim(),
            target.dim()
        )));
    }
    let (h, w, _) = rendered.dim();
    if mask.mask.dim() != (h, w) {
        return Err(PriqaError::Argument(format!(
            "mask {:?} does not match image {:?}",
            mask.mask.dim(),
            (h, w)
        )));
    }
    if !(0.0..=1.0).contains(&lambda_dssim) {
        return Err(PriqaError::Argument(format!(
            "lambda_dssim must lie in [0, 1], got {lambda_dssim}"
        )));
    }

    let mut weight_sum = 0.0;
    let mut weighted_err = 0.0;
    for i in 0..h {
        for j in 0..w {
            let wgt = mask.mask[[i, j]];
            if wgt == 0.0 {
                continue;
            }
            let mut err = 0.0;
            for ch in 0..3 {
                err += (rendered[[i, j, ch]] - target[[i, j, ch]]).abs();
            }
            weighted_err += wgt * err / 3.0;
            weight_sum += wgt;
        }
    }
    let l1 = if weight_sum > 0.0 {
        weighted_err / weight_sum
    } else {
        log::warn!("mask weight sum is zero; L1 term defined as 0");
        0.0
    };

    let ssim = ssim_map_default(rendered, target)?;
    let dssim = if masked_dssim && weight_sum > 0.0 {
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                acc += mask.mask[[i, j]] * ssim.values[[i, j]];
            }
        }
        1.0 - acc / weight_sum
    } else {
        1.0 - ssim.values.iter().sum::<f64>() / (h * w) as f64
    };

    let total = (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim;
    Ok((
        total,
        ReconBreakdown {
            l1,
            dssim,
            total,
        },
    ))
}

/// One exported view: selection output plus its supervision mask.
#[derive(Debug, Clone)]
pub struct GuidanceEntry {
    pub view_id: String,
    pub selection: SelectionResult,
    pub mask: SupervisionMask,
    pub references: (String, String),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GuidanceManifest {
    pub views: Vec<GuidanceView>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GuidanceView {
    pub view_id: String,
    pub pseudo_gt_path: String,
    pub mask_path: String,
    pub score: f64,
    pub tau: f64,
    pub kind: MaskKind,
    pub references: (String, String),
}

/// Writes pseudo-GT PNGs, mask PNGs (8-bit; binary masks as 0/255), and
/// `manifest.json` under `out_dir`. Paths in the manifest are relative to
/// the output directory; entries are sorted by view id so output bytes
/// are stable. Returns the manifest path.
pub fn export_guidance(entries: &[GuidanceEntry], out_dir: &Path) -> Result<PathBuf> {
    let gt_dir = out_dir.join("pseudo_gt");
    let mask_dir = out_dir.join("masks");
    fs::create_dir_all(&gt_dir).map_err(|e| PriqaError::io(gt_dir.display().to_string(), e))?;
    fs::create_dir_all(&mask_dir)
        .map_err(|e| PriqaError::io(mask_dir.display().to_string(), e))?;

    let mut sorted: Vec<&GuidanceEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.view_id.cmp(&b.view_id));

    let mut views = Vec::with_capacity(sorted.len());
    for entry in sorted {
        let gt_rel = format!("pseudo_gt/{}.png", entry.view_id);
        let mask_rel = format!("masks/{}.png", entry.view_id);
        write_image_png(&entry.selection.pseudo_gt, &out_dir.join(&gt_rel))?;
        write_mask_png(&entry.mask, &out_dir.join(&mask_rel))?;
        views.push(GuidanceView {
            view_id: entry.view_id.clone(),
            pseudo_gt_path: gt_rel,
            mask_path: mask_rel,
            score: entry.selection.score,
            tau: entry.mask.tau,
            kind: entry.mask.kind,
            references: entry.references.clone(),
        });
    }
    let manifest_path = out_dir.join("manifest.json");
    let manifest = GuidanceManifest { views };
    let json = serde_json::to_string_pretty(&manifest)
        .expect("manifest serialization is infallible");
    fs::write(&manifest_path, json)
        .map_err(|e| PriqaError::io(manifest_path.display().to_string(), e))?;
    Ok(manifest_path)
}

/// Writes a supervision mask as 8-bit grayscale (binary: 0/255; soft:
/// `value * 255` with round-half-even ties).
pub fn write_mask_png(mask: &SupervisionMask, path: &Path) -> Result<()> {
    let (h, w) = mask.mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            buf.put_pixel(
                j as u32,
                i as u32,
                image::Luma([to_u8_round_half_even(mask.mask[[i, j]])]),
            );
        }
    }
    buf.save(path)
        .map_err(|e| PriqaError::Format(format!("png write {}: {e}", path.display())))
}

/// Reads an 8-bit grayscale mask back into `[0, 1]` weights.
pub fn read_mask_png(path: &Path) -> Result<Grid> {
    let img = image::open(path)
        .map_err(|e| PriqaError::Format(format!("png read {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32)[0] as f64 / 255.0
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_map(seed: u64, h: usize, w: usize, valid_p: f64) -> QualityMap {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let values = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0));
        let valid = Array2::from_shape_fn((h, w), |_| rng.gen_bool(valid_p));
        QualityMap { values, valid }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ndarray::Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn consolidate_idempotent_and_takes_max() {
        let q = random_map(0, 4, 4, 1.0);
        let same = consolidate(&q, &q).unwrap();
        assert_eq!(same, q);

        let a = QualityMap::dense(Array2::from_elem((2, 2), 0.3));
        let b = QualityMap::dense(Array2::from_elem((2, 2), 0.7));
        let out = consolidate(&a, &b).unwrap();
        assert!(out.values.iter().all(|v| *v == 0.7));
    }

    #[test]
    fn consolidate_single_valid_side_wins() {
        let mut a = random_map(1, 3, 3, 1.0);
        a.valid[[0, 0]] = false;
        let mut b = random_map(2, 3, 3, 1.0);
        b.valid[[2, 2]] = false;
        let out = consolidate(&a, &b).unwrap();
        assert_eq!(out.values[[0, 0]], b.values[[0, 0]]);
        assert_eq!(out.values[[2, 2]], a.values[[2, 2]]);
        assert!(out.valid.iter().all(|v| *v));
    }

    #[test]
    fn image_score_values() {
        let constant = QualityMap::dense(Array2::from_elem((5, 5), 0.6));
        assert!((image_score(&constant).unwrap() - 0.6).abs() < 1e-12);

        let mut half = Array2::zeros((2, 2));
        half[[0, 0]] = 1.0;
        half[[0, 1]] = 1.0;
        let qm = QualityMap::dense(half);
        assert!((image_score(&qm).unwrap() - 0.5).abs() < 1e-12);

        let invalid = QualityMap {
            values: Array2::zeros((2, 2)),
            valid: Array2::from_elem((2, 2), false),
        };
        assert!(matches!(
            image_score(&invalid),
            Err(PriqaError::EmptySupport(_))
        ));
    }

    #[test]
    fn select_single_candidate_and_tie_break() {
        let mk = |v: f64| Candidate {
            image: random_image(0, 4, 4),
            q_ref1: QualityMap::dense(Array2::from_elem((4, 4), v)),
            q_ref2: QualityMap::dense(Array2::from_elem((4, 4), v)),
        };
        let single = CandidateSet {
            viewpoint_id: "v0".into(),
            candidates: vec![mk(0.5)],
            references: ("r0".into(), "r1".into()),
        };
        assert_eq!(select_pseudo_gt(&single).unwrap().chosen, 0);

        let tied = CandidateSet {
            viewpoint_id: "v1".into(),
            candidates: vec![mk(0.4), mk(0.9), mk(0.9)],
            references: ("r0".into(), "r1".into()),
        };
        let sel = select_pseudo_gt(&tied).unwrap();
        assert_eq!(sel.chosen, 1);
        assert_eq!(sel.per_candidate_scores.len(), 3);
    }

    #[test]
    fn select_matches_bruteforce_argmax() {
        let mut rng = ChaCha20Rng::seed_from_u64(40);
        for case in 0..100 {
            let n = rng.gen_range(1..6);
            let candidates: Vec<Candidate> = (0..n)
                .map(|i| Candidate {
                    image: random_image(case * 10 + i, 4, 4),
                    q_ref1: random_map(case * 100 + i, 4, 4, 0.9),
                    q_ref2: random_map(case * 100 + i + 50, 4, 4, 0.9),
                })
                .collect();
            let set = CandidateSet {
                viewpoint_id: format!("v{case}"),
                candidates,
                references: ("a".into(), "b".into()),
            };
            let sel = select_pseudo_gt(&set).unwrap();
            // exhaustive oracle over candidates
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, c) in set.candidates.iter().enumerate() {
                let merged = consolidate(&c.q_ref1, &c.q_ref2).unwrap();
                let s = image_score(&merged).unwrap();
                if s > best_score {
                    best_score = s;
                    best = i;
                }
            }
            assert_eq!(sel.chosen, best);
            assert!((sel.score - best_score).abs() < 1e-15);
        }
    }

    #[test]
    fn percentile_mask_keeps_exact_half_of_distinct_values() {
        let values = Array2::from_shape_fn((10, 10), |(i, j)| (i * 10 + j) as f64 / 100.0);
        let qm = QualityMap::dense(values);
        let mask = percentile_mask(&qm, 50.0).unwrap();
        let kept = mask.mask.iter().filter(|v| **v == 1.0).count();
        assert_eq!(kept, 50);
        assert!(mask.mask.iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn percentile_mask_tau_100_is_validity_grid() {
        let qm = random_map(3, 6, 6, 0.7);
        let mask = percentile_mask(&qm, 100.0).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(mask.mask[[i, j]] == 1.0, qm.valid[[i, j]]);
            }
        }
    }

    #[test]
    fn percentile_mask_keeps_ties_at_threshold() {
        let qm = QualityMap::dense(Array2::from_elem((4, 4), 0.5));
        let mask = percentile_mask(&qm, 50.0).unwrap();
        assert!(mask.mask.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn percentile_mask_monotone_in_tau() {
        let qm = random_map(9, 8, 8, 0.9);
        let taus = [30.0, 50.0, 70.0];
        let masks: Vec<SupervisionMask> =
            taus.iter().map(|t| percentile_mask(&qm, *t).unwrap()).collect();
        for pair in masks.windows(2) {
            for (lo, hi) in pair[0].mask.iter().zip(pair[1].mask.iter()) {
                assert!(!(*lo == 1.0 && *hi == 0.0), "mask lost a pixel as tau grew");
            }
        }
    }

    #[test]
    fn masked_loss_all_ones_equals_unmasked() {
        let rendered = random_image(5, 16, 16);
        let target = random_image(6, 16, 16);
        let mask = SupervisionMask::all_ones(16, 16);
        let (total, parts) = masked_recon_loss(&rendered, &target, &mask, 0.2).unwrap();

        // unmasked oracle
        let l1 = rendered
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / (16.0 * 16.0 * 3.0);
        let ssim = ssim_map_default(&rendered, &target).unwrap();
        let dssim = 1.0 - ssim.values.iter().sum::<f64>() / 256.0;
        let expected = 0.8 * l1 + 0.2 * dssim;
        assert!((total - expected).abs() < 1e-10);
        assert!((parts.l1 - l1).abs() < 1e-12);
    }

    #[test]
    fn masked_loss_zero_at_equality() {
        let img = random_image(7, 16, 16);
        let mask = SupervisionMask::all_ones(16, 16);
        let (total, _) = masked_recon_loss(&img, &img, &mask, 0.2).unwrap();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn masked_loss_matches_bruteforce_weighted_sum() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let rendered = random_image(9, 16, 16);
        let target = random_image(10, 16, 16);
        let mask_grid = Array2::from_shape_fn((16, 16), |_| {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let mask = SupervisionMask {
            mask: mask_grid.clone(),
            tau: 50.0,
            kind: MaskKind::Binary,
        };
        let (_, parts) = masked_recon_loss(&rendered, &target, &mask, 0.2).unwrap();

        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                let mut err = 0.0;
                for ch in 0..3 {
                    err += (rendered[[i, j, ch]] - target[[i, j, ch]]).abs();
                }
                num += mask_grid[[i, j]] * err / 3.0;
                den += mask_grid[[i, j]];
            }
        }
        assert!((parts.l1 - num / den).abs() < 1e-10);
    }

    #[test]
    fn soft_mask_uniform_half_matches_unmasked_l1() {
        let rendered = random_image(11, 16, 16);
        let target = random_image(12, 16, 16);
        let q = QualityMap::dense(Array2::from_elem((16, 16), 0.5));
        let soft = soft_mask(&q);
        assert_eq!(soft.kind, MaskKind::Soft);
        let (_, soft_parts) = masked_recon_loss(&rendered, &target, &soft, 0.2).unwrap();
        let (_, ones_parts) =
            masked_recon_loss(&rendered, &target, &SupervisionMask::all_ones(16, 16), 0.2)
                .unwrap();
        assert!((soft_parts.l1 - ones_parts.l1).abs() < 1e-12);
    }

    #[test]
    fn export_guidance_round_trips_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<GuidanceEntry> = (0..3)
            .map(|v| {
                let q = random_map(v as u64 + 20, 16, 16, 1.0);
                let mask = if v == 0 {
                    soft_mask(&q)
                } else {
                    percentile_mask(&q, 50.0).unwrap()
                };
                GuidanceEntry {
                    view_id: format!("view_{v:03}"),
                    selection: SelectionResult {
                        chosen: 0,
                        pseudo_gt: random_image(v as u64, 16, 16),
                        consolidated: q,
                        score: 0.5 + v as f64 * 0.1,
                        per_candidate_scores: vec![0.5],
                    },
                    mask,
                    references: ("0001".into(), "0002".into()),
                }
            })
            .collect();

        let out_a = dir.path().join("a");
        let manifest_a = export_guidance(&entries, &out_a).unwrap();
        let parsed: GuidanceManifest =
            serde_json::from_str(&fs::read_to_string(&manifest_a).unwrap()).unwrap();
        assert_eq!(parsed.views.len(), 3);

        // mask round trip within quantization
        for (entry, view) in entries.iter().zip(parsed.views.iter()) {
            let back = read_mask_png(&out_a.join(&view.mask_path)).unwrap();
            for (a, b) in back.iter().zip(entry.mask.mask.iter()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }

        // byte-identical re-export
        let out_b = dir.path().join("b");
        export_guidance(&entries, &out_b).unwrap();
        for view in &parsed.views {
            let a = fs::read(out_a.join(&view.pseudo_gt_path)).unwrap();
            let b = fs::read(out_b.join(&view.pseudo_gt_path)).unwrap();
            assert_eq!(a, b);
            let am = fs::read(out_a.join(&view.mask_path)).unwrap();
            let bm = fs::read(out_b.join(&view.mask_path)).unwrap();
            assert_eq!(am, bm);
        }
        assert_eq!(
            fs::read(&manifest_a).unwrap(),
            fs::read(out_b.join("manifest.json")).unwrap()
        );
    }

    proptest! {
        #[test]
        fn consolidate_commutative_and_dominates(seed in 0u64..300) {
            let a = random_map(seed, 5, 5, 0.8);
            let b = random_map(seed + 1000, 5, 5, 0.8);
            let ab = consolidate(&a, &b).unwrap();
            let ba = consolidate(&b, &a).unwrap();
            prop_assert_eq!(&ab, &ba);
            for i in 0..5 {
                for j in 0..5 {
                    if a.valid[[i, j]] && b.valid[[i, j]] {
                        prop_assert!(ab.values[[i, j]] >= a.values[[i, j]]);
                        prop_assert!(ab.values[[i, j]] >= b.values[[i, j]]);
                    }
                }
            }
        }

        #[test]
        fn selection_invariant_under_positive_affine_rescaling(
            seed in 0u64..100, scale in 0.1f64..0.9, shift in 0.0f64..0.1
        ) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let candidates: Vec<Candidate> = (0..4)
                .map(|i| Candidate {
                    image: random_image(seed + i, 4, 4),
                    q_ref1: random_map(seed * 7 + i, 4, 4, 1.0),
                    q_ref2: random_map(seed * 11 + i, 4, 4, 1.0),
                })
                .collect();
            let _ = rng.gen_range(0..2);
            let set = CandidateSet {
                viewpoint_id: "v".into(),
                candidates: candidates.clone(),
                references: ("a".into(), "b".into()),
            };
            let rescaled = CandidateSet {
                viewpoint_id: "v".into(),
                candidates: candidates
                    .into_iter()
                    .map(|mut c| {
                        c.q_ref1.values.mapv_inplace(|v| v * scale + shift);
                        c.q_ref2.values.mapv_inplace(|v| v * scale + shift);
                        c
                    })
                    .collect(),
                references: ("a".into(), "b".into()),
            };
            let a = select_pseudo_gt(&set).unwrap();
            let b = select_pseudo_gt(&rescaled).unwrap();
            prop_assert_eq!(a.chosen, b.chosen);
        }
    }
}
