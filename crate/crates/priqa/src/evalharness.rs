//! Map-level correlation evaluation, multi-reference fusion, reference
//! count sweeps, FPR@Top-X% in non-overlapping regions, and report
//! generation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{PriqaError, Result};
use crate::featuremetrics::QualityMap;

/// Variance below this is treated as degenerate: correlation reports 0.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Pearson linear correlation. Degenerate variance on either side maps to
/// 0 rather than erroring, matching the loss-side convention.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(PriqaError::Argument(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(PriqaError::Argument(
            "correlation needs at least 2 samples".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx / n < DEGENERATE_VARIANCE || syy / n < DEGENERATE_VARIANCE {
        return Ok(0.0);
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Fractional (average-tie) ranks, 1-based.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| {
        values[*a]
            .partial_cmp(&values[*b])
            .expect("non-finite value in rank")
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation via Pearson on average-tie ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(PriqaError::Argument(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    plcc(&fractional_ranks(x), &fractional_ranks(y))
}

/// Pixel-wise fusion operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseMode {
    Max,
    Min,
    Mean,
    Median,
}

impl std::str::FromStr for FuseMode {
    type Err = PriqaError;

    fn from_str(s: &str) -> Result<FuseMode> {
        match s {
            "max" => Ok(FuseMode::Max),
            "min" => Ok(FuseMode::Min),
            "mean" => Ok(FuseMode::Mean),
            "median" => Ok(FuseMode::Median),
            other => Err(PriqaError::Argument(format!("unknown fusion mode {other}"))),
        }
    }
}

impl std::fmt::Display for FuseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FuseMode::Max => "max",
            FuseMode::Min => "min",
            FuseMode::Mean => "mean",
            FuseMode::Median => "median",
        };
        f.write_str(s)
    }
}

/// Fuses quality maps pixel-wise over the inputs valid at each pixel; a
/// pixel is valid in the output when at least one input is valid there.
pub fn fuse_maps(maps: &[QualityMap], mode: FuseMode) -> Result<QualityMap> {
    let first = maps
        .first()
        .ok_or_else(|| PriqaError::Argument("cannot fuse an empty map list".into()))?;
    let (h, w) = first.dim();
    for m in maps {
        if m.dim() != (h, w) {
            return Err(PriqaError::Argument(format!(
                "map resolution {:?} differs from {:?}",
                m.dim(),
                (h, w)
            )));
        }
    }
    let mut values = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    let mut bucket = Vec::with_capacity(maps.len());
    for i in 0..h {
        for j in 0..w {
            bucket.clear();
            for m in maps {
                if m.valid[[i, j]] {
                    bucket.push(m.values[[i, j]]);
                }
            }
            if bucket.is_empty() {
                continue;
            }
            valid[[i, j]] = true;
            values[[i, j]] = match mode {
                FuseMode::Max => bucket.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                FuseMode::Min => bucket.iter().copied().fold(f64::INFINITY, f64::min),
                FuseMode::Mean => bucket.iter().sum::<f64>() / bucket.len() as f64,
                FuseMode::Median => {
                    bucket.sort_by(|a, b| a.partial_cmp(b).expect("non-finite map value"));
                    let n = bucket.len();
                    if n % 2 == 1 {
                        bucket[n / 2]
                    } else {
                        (bucket[n / 2 - 1] + bucket[n / 2]) / 2.0
                    }
                }
            };
        }
    }
    Ok(QualityMap { values, valid })
}

/// False-positive rate among the top `x_percent` of predicted scores in
/// the non-overlap region. A selected pixel counts as a false positive
/// when its target value lies below the region's median target value;
/// ties at the selection threshold are included.
pub fn fpr_at_top(
    pred: &QualityMap,
    target: &QualityMap,
    overlap: &Array2<bool>,
    x_percent: f64,
) -> Result<f64> {
    if pred.dim() != target.dim() || pred.dim() != overlap.dim() {
        return Err(PriqaError::Argument(format!(
            "shape mismatch: pred {:?}, target {:?}, overlap {:?}",
            pred.dim(),
            target.dim(),
            overlap.dim()
        )));
    }
    if !(x_percent > 0.0 && x_percent <= 1.0) {
        return Err(PriqaError::Argument(format!(
            "x_percent must lie in (0, 1], got {x_percent}"
        )));
    }
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for ((p, t), ov) in pred
        .values
        .iter()
        .zip(target.values.iter())
        .zip(overlap.iter())
    {
        if !*ov {
            preds.push(*p);
            targets.push(*t);
        }
    }
    if preds.is_empty() {
        return Err(PriqaError::EmptySupport(
            "no non-overlap pixels to evaluate".into(),
        ));
    }
    let threshold = crate::grid::quantile_linear(&preds, 1.0 - x_percent);
    let median = crate::grid::quantile_linear(&targets, 0.5);
    let mut selected = 0usize;
    let mut false_pos = 0usize;
    for (p, t) in preds.iter().zip(targets.iter()) {
        if *p >= threshold {
            selected += 1;
            if *t < median {
                false_pos += 1;
            }
        }
    }
    Ok(false_pos as f64 / selected as f64)
}

/// Per-frame correlation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_id: String,
    pub frame_id: String,
    pub method: String,
    pub target_metric: String,
    pub plcc: f64,
    pub srcc: f64,
    pub support: usize,
}

/// One frame's prediction/target pair for evaluation.
#[derive(Debug, Clone)]
pub struct FrameEval {
    pub scene_id: String,
    pub frame_id: String,
    pub pred: QualityMap,
    pub target: QualityMap,
}

/// Per-scene and overall aggregate of frame records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub per_scene: Vec<SceneAggregate>,
    pub overall_plcc: f64,
    pub overall_srcc: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneAggregate {
    pub scene_id: String,
    pub plcc: f64,
    pub srcc: f64,
    pub frames: usize,
}

/// Evaluates per-frame PLCC/SRCC over the valid-intersection support,
/// then aggregates by unweighted frame means per scene and overall.
/// Frames with empty support are skipped with a logged warning.
pub fn evaluate(
    items: &[FrameEval],
    method: &str,
    target_metric: &str,
) -> Result<(Vec<EvalRecord>, EvalAggregate)> {
    let mut records = Vec::new();
    for item in items {
        if item.pred.dim() != item.target.dim() {
            return Err(PriqaError::Argument(format!(
                "frame {}: prediction {:?} does not match target {:?}",
                item.frame_id,
                item.pred.dim(),
                item.target.dim()
            )));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for ((pv, pok), (tv, tok)) in item
            .pred
            .values
            .iter()
            .zip(item.pred.valid.iter())
            .zip(item.target.values.iter().zip(item.target.valid.iter()))
        {
            if *pok && *tok {
                xs.push(*pv);
                ys.push(*tv);
            }
        }
        if xs.len() < 2 {
            log::warn!(
                "skipping frame {}/{}: empty evaluation support",
                item.scene_id,
                item.frame_id
            );
            continue;
        }
        records.push(EvalRecord {
            scene_id: item.scene_id.clone(),
            frame_id: item.frame_id.clone(),
            method: method.to_string(),
            target_metric: target_metric.to_string(),
            plcc: plcc(&xs, &ys)?,
            srcc: srcc(&xs, &ys)?,
            support: xs.len(),
        });
    }
    let aggregate = aggregate_records(&records);
    Ok((records, aggregate))
}

/// Unweighted per-scene and overall means of frame records.
pub fn aggregate_records(records: &[EvalRecord]) -> EvalAggregate {
    let mut scenes: Vec<String> = records.iter().map(|r| r.scene_id.clone()).collect();
    scenes.sort();
    scenes.dedup();
    let per_scene = scenes
        .into_iter()
        .map(|scene| {
            let subset: Vec<&EvalRecord> =
                records.iter().filter(|r| r.scene_id == scene).collect();
            let n = subset.len() as f64;
            SceneAggregate {
                scene_id: scene,
                plcc: subset.iter().map(|r| r.plcc).sum::<f64>() / n,
                srcc: subset.iter().map(|r| r.srcc).sum::<f64>() / n,
                frames: subset.len(),
            }
        })
        .collect();
    let n = records.len().max(1) as f64;
    EvalAggregate {
        per_scene,
        overall_plcc: records.iter().map(|r| r.plcc).sum::<f64>() / n,
        overall_srcc: records.iter().map(|r| r.srcc).sum::<f64>() / n,
        frames: records.len(),
    }
}

/// One point of a reference-count sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_ref: usize,
    pub mean_plcc: f64,
    pub mean_srcc: f64,
    pub frames: usize,
}

/// Regular-interval subselection of `n` indices from `0..available`.
pub fn regular_interval_indices(available: usize, n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![0];
    }
    (0..n)
        .map(|i| ((i * (available - 1)) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Sweeps the reference count: for each `n_ref` in the range, fuses the
/// regular-interval subset of each frame's per-reference maps and
/// evaluates against the targets.
pub fn reference_sweep(
    maps_per_frame: &[Vec<QualityMap>],
    targets: &[QualityMap],
    n_ref_range: std::ops::RangeInclusive<usize>,
    mode: FuseMode,
) -> Result<Vec<SweepPoint>> {
    if maps_per_frame.is_empty() || maps_per_frame.len() != targets.len() {
        return Err(PriqaError::Argument(
            "need one target per frame and at least one frame".into(),
        ));
    }
    let available = maps_per_frame[0].len();
    if maps_per_frame.iter().any(|m| m.len() != available) {
        return Err(PriqaError::Argument(
            "all frames must have the same number of reference maps".into(),
        ));
    }
    if *n_ref_range.start() < 1 || *n_ref_range.end() > available {
        return Err(PriqaError::Argument(format!(
            "n_ref range {:?} exceeds available references {available}",
            n_ref_range
        )));
    }
    let mut curve = Vec::new();
    for n_ref in n_ref_range {
        let indices = regular_interval_indices(available, n_ref);
        let items: Vec<FrameEval> = maps_per_frame
            .iter()
            .zip(targets.iter())
            .enumerate()
            .map(|(frame_idx, (maps, target))| {
                let subset: Vec<QualityMap> =
                    indices.iter().map(|&i| maps[i].clone()).collect();
                Ok(FrameEval {
                    scene_id: "sweep".to_string(),
                    frame_id: format!("{frame_idx:04}"),
                    pred: fuse_maps(&subset, mode)?,
                    target: target.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let (_, agg) = evaluate(&items, "sweep", "target")?;
        curve.push(SweepPoint {
            n_ref,
            mean_plcc: agg.overall_plcc,
            mean_srcc: agg.overall_srcc,
            frames: agg.frames,
        });
    }
    Ok(curve)
}

/// Renders per-frame records as CSV with a fixed column order and
/// precision, so identical inputs give identical bytes.
pub fn report_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("scene_id,frame_id,method,target_metric,plcc,srcc,support\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{}\n",
            r.scene_id, r.frame_id, r.method, r.target_metric, r.plcc, r.srcc, r.support
        ));
    }
    out
}

/// Renders the aggregate as a Markdown summary table.
pub fn report_markdown(aggregate: &EvalAggregate, method: &str, target_metric: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# Evaluation summary\n\nMethod: `{method}`  \nTarget metric: `{target_metric}`\n\n"
    ));
    out.push_str("| scene | frames | PLCC | SRCC |\n|---|---:|---:|---:|\n");
    for s in &aggregate.per_scene {
        out.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} |\n",
            s.scene_id, s.frames, s.plcc, s.srcc
        ));
    }
    out.push_str(&format!(
        "| **overall** | {} | {:.4} | {:.4} |\n",
        aggregate.frames, aggregate.overall_plcc, aggregate.overall_srcc
    ));
    out
}
