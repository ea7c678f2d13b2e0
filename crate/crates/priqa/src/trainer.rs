//! Training-tuple construction and the optimization loop: decoupled
//! weight decay Adam with a cosine-annealed warm-restart schedule.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::completion::{
    forward, forward_traced, param_specs, save_checkpoint, ModelParams, NetConfig, ParamClass,
};
use crate::error::{PriqaError, Result};
use crate::featuremetrics::{
    build_partial_map, feature_similarity_map, ssim_map_default, FeatureProvider, QualityMap,
};
use crate::grid::{resize_bilinear, resize_bilinear_grid};
use crate::losses::{total_loss_grad, LossWeights};
use crate::scenekit::{corrupt_frame, CorruptionRecipe, Dataset, Frame};

/// Full-reference metric used to build training targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMetric {
    Dinov2Sim,
    Ssim,
}

impl std::str::FromStr for TargetMetric {
    type Err = PriqaError;

    fn from_str(s: &str) -> Result<TargetMetric> {
        match s {
            "dinov2_sim" => Ok(TargetMetric::Dinov2Sim),
            "ssim" => Ok(TargetMetric::Ssim),
            other => Err(PriqaError::Argument(format!(
                "unknown target metric {other} (expected dinov2_sim or ssim)"
            ))),
        }
    }
}

impl std::fmt::Display for TargetMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetMetric::Dinov2Sim => "dinov2_sim",
            TargetMetric::Ssim => "ssim",
        })
    }
}

/// Provenance of one training tuple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TupleMeta {
    pub scene_id: String,
    pub query_idx: usize,
    pub ref_idx: usize,
    pub recipe_idx: usize,
    pub seed: u64,
}

/// One training sample: corrupted query, clean reference, geometric
/// partial map, and the dense full-reference target.
#[derive(Debug, Clone)]
pub struct TrainTuple {
    pub query: Frame,
    pub reference: Frame,
    pub partial: QualityMap,
    pub target: QualityMap,
    pub meta: TupleMeta,
}

/// Optimization settings. Defaults mirror the full-scale recipe
/// (initial learning rate 1e-4 decaying to 1e-6 with a 135k-iteration
/// restart period, betas 0.9/0.999); desk runs override the sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub target_metric: TargetMetric,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_floor: f64,
    pub restart_period: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub resolution: (usize, usize),
    /// Checkpoint cadence in iterations; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub weight_decay: f64,
    /// Confidence quantile dropped when building partial maps.
    pub drop_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            target_metric: TargetMetric::Ssim,
            iterations: 270_000,
            batch_size: 12,
            lr_initial: 1e-4,
            lr_floor: 1e-6,
            restart_period: 135_000,
            weights: LossWeights::default(),
            seed: 0,
            resolution: (224, 224),
            checkpoint_every: 0,
            weight_decay: 0.01,
            drop_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    /// Small fast configuration used by smoke and overfit checks.
    pub fn toy() -> TrainConfig {
        TrainConfig {
            iterations: 2000,
            batch_size: 2,
            lr_initial: 1e-3,
            lr_floor: 1e-5,
            restart_period: 2000,
            resolution: (32, 32),
            checkpoint_every: 0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(PriqaError::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(PriqaError::Config("batch size must be positive".into()));
        }
        if !(self.lr_initial > self.lr_floor && self.lr_floor > 0.0) {
            return Err(PriqaError::Config(format!(
                "need lr_initial > lr_floor > 0, got {} and {}",
                self.lr_initial, self.lr_floor
            )));
        }
        if self.restart_period == 0 {
            return Err(PriqaError::Config("restart period must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(PriqaError::Config(format!(
                "drop_fraction must lie in [0, 1), got {}",
                self.drop_fraction
            )));
        }
        self.weights.validate()
    }
}

/// Cosine-annealed learning rate with warm restarts: starts at
/// `initial`, reaches `floor` at the end of each period, and resets
/// exactly to `initial` at restarts.
pub fn cosine_restart_lr(initial: f64, floor: f64, period: usize, iteration: usize) -> f64 {
    let t = (iteration % period) as f64 / period as f64;
    floor + (initial - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One log line per iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: u64,
    pub lr: f64,
    pub l1: f64,
    pub jsd: f64,
    pub plcc: f64,
    pub total: f64,
}

/// Training result: final (f32-quantized) parameters and the log.
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<IterRecord>,
    pub final_iteration: u64,
}

fn tuple_seed(seed: u64, query_idx: usize, ref_idx: usize) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((query_idx as u64) << 20)
        .wrapping_add(ref_idx as u64)
}

/// Builds training tuples by corrupting each frame and pairing it with
/// clean references at the given relative offsets. Offsets that fall
/// outside the sequence are skipped, never wrapped.
pub fn make_tuples(
    dataset: &Dataset,
    provider: &dyn FeatureProvider,
    recipes: &[CorruptionRecipe],
    ref_offsets: &[i64],
    target_metric: TargetMetric,
    drop_fraction: f64,
    seed: u64,
) -> Result<Vec<TrainTuple>> {
    if recipes.is_empty() {
        return Err(PriqaError::Argument("need at least one recipe".into()));
    }
    let n = dataset.len();
    let mut jobs = Vec::new();
    for query_idx in 0..n {
        for &offset in ref_offsets {
            let ref_idx = query_idx as i64 + offset;
            if ref_idx < 0 || ref_idx >= n as i64 || offset == 0 {
                continue;
            }
            let recipe_idx = jobs.len() % recipes.len();
            jobs.push((query_idx, ref_idx as usize, recipe_idx));
        }
    }
    if jobs.is_empty() {
        return Err(PriqaError::EmptySupport(
            "no valid query/reference pairs for the given offsets".into(),
        ));
    }

    let tuples: Result<Vec<TrainTuple>> = jobs
        .par_iter()
        .map(|&(query_idx, ref_idx, recipe_idx)| {
            let clean = &dataset.frames[query_idx];
            let reference = &dataset.frames[ref_idx];
            let s = tuple_seed(seed, query_idx, ref_idx);
            let corrupted = corrupt_frame(clean, &recipes[recipe_idx], s)?;
            let partial = build_partial_map(&corrupted.frame, reference, provider, drop_fraction)?;
            let target = match target_metric {
                TargetMetric::Ssim => ssim_map_default(&corrupted.frame.image, &clean.image)?,
                TargetMetric::Dinov2Sim => {
                    let f_q = provider.features(&corrupted.frame.image)?;
                    let f_gt = provider.features(&clean.image)?;
                    feature_similarity_map(&f_q, &f_gt)?
                }
            };
            Ok(TrainTuple {
                query: corrupted.frame,
                reference: reference.clone(),
                partial,
                target,
                meta: TupleMeta {
                    scene_id: dataset.scene_id.clone(),
                    query_idx,
                    ref_idx,
                    recipe_idx,
                    seed: s,
                },
            })
        })
        .collect();
    tuples
}

/// Deterministic per-epoch permutation.
fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(0xe90c ^ epoch);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

struct AdamW {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    decay_mask: Vec<bool>,
    step: u64,
}

impl AdamW {
    fn new(params: &ModelParams, net_config: &NetConfig) -> AdamW {
        let specs = param_specs(net_config);
        let class_of = |name: &str| {
            specs
                .iter()
                .find(|s| s.name == name)
                .map(|s| s.class)
                .unwrap_or(ParamClass::Projection)
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut decay_mask = Vec::new();
        for (name, tensor) in params.iter() {
            m.push(Array2::zeros(tensor.dim()));
            v.push(Array2::zeros(tensor.dim()));
            // norm parameters and biases are excluded from weight decay
            decay_mask.push(matches!(class_of(name), ParamClass::Projection));
        }
        AdamW {
            m,
            v,
            decay_mask,
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &[Array2<f64>], lr: f64, wd: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (idx, (_, tensor)) in params.iter_mut().enumerate() {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let decay = if self.decay_mask[idx] { wd } else { 0.0 };
            for ((t, g), (m, v)) in tensor
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *t -= lr * (m_hat / (v_hat.sqrt() + EPS) + decay * *t);
            }
        }
    }
}

fn tuple_loss_and_grads(
    params: &ModelParams,
    net_config: &NetConfig,
    tuple: &TrainTuple,
    weights: &LossWeights,
    batch_size: usize,
) -> Result<(crate::losses::LossBreakdown, Vec<(String, Array2<f64>)>)> {
    let trace = forward_traced(
        params,
        net_config,
        &tuple.query.image,
        &tuple.reference.image,
        &tuple.partial,
    )?;
    let (h, w) = net_config.input_hw;
    let target = resize_bilinear_grid(&tuple.target.values, h, w);
    let (_, breakdown, dmap) = total_loss_grad(&trace.output.values, &target, weights)?;
    let mut seed = Array2::zeros((h * w, 1));
    for i in 0..h {
        for j in 0..w {
            seed[[i * w + j, 0]] = dmap[[i, j]] / batch_size as f64;
        }
    }
    let grads = trace.tape.backward(trace.output_var, seed);
    let mut named = Vec::new();
    for (name, var) in trace.binding.iter() {
        if let Some(g) = grads.get(*var) {
            named.push((name.clone(), g.clone()));
        }
    }
    Ok((breakdown, named))
}

/// Runs the optimization loop from an optional resume state. When
/// `out_dir` is given, writes `log.jsonl` and periodic `ckpt.prqc`
/// checkpoints there; parameters are quantized to checkpoint precision
/// whenever a checkpoint is written (and at the end), so the in-memory
/// model always matches the file.
pub fn train_from(
    config: &TrainConfig,
    tuples: &[TrainTuple],
    net_config: &NetConfig,
    initial: Option<(ModelParams, u64)>,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    net_config.validate()?;
    if tuples.is_empty() {
        return Err(PriqaError::EmptySupport("no training tuples".into()));
    }
    let (mut params, start_iter) = match initial {
        Some((p, it)) => {
            p.check_matches(net_config)?;
            (p, it)
        }
        None => (ModelParams::init(net_config, config.seed)?, 0),
    };
    if start_iter as usize >= config.iterations {
        return Err(PriqaError::Config(format!(
            "resume iteration {start_iter} is at or past the configured {} iterations",
            config.iterations
        )));
    }

    let ckpt_path = out_dir.map(|d| d.join("ckpt.prqc"));
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| PriqaError::io(dir.display().to_string(), e))?;
            let path = dir.join("log.jsonl");
            let file = if start_iter > 0 && path.exists() {
                std::fs::OpenOptions::new()
                    .append(true)
                    .open(&path)
                    .map_err(|e| PriqaError::io(path.display().to_string(), e))?
            } else {
                std::fs::File::create(&path)
                    .map_err(|e| PriqaError::io(path.display().to_string(), e))?
            };
            Some(std::io::BufWriter::new(file))
        }
        None => None,
    };

    let batch = config.batch_size.min(tuples.len());
    let batches_per_epoch = tuples.len() / batch;
    let mut optimizer = AdamW::new(&params, net_config);
    let mut log = Vec::with_capacity(config.iterations - start_iter as usize);
    let mut cached_epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();

    for iter in start_iter as usize..config.iterations {
        let epoch = (iter / batches_per_epoch) as u64;
        if epoch != cached_epoch {
            perm = epoch_permutation(tuples.len(), config.seed, epoch);
            cached_epoch = epoch;
        }
        let slot = iter % batches_per_epoch;
        let indices = &perm[slot * batch..slot * batch + batch];

        let params_snapshot = &params;
        let results: Result<Vec<_>> = indices
            .par_iter()
            .map(|&i| {
                tuple_loss_and_grads(params_snapshot, net_config, &tuples[i], &config.weights, batch)
            })
            .collect();
        let results = results?;

        // deterministic accumulation in batch order
        let mut grad_by_name: std::collections::BTreeMap<String, Array2<f64>> =
            std::collections::BTreeMap::new();
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for (breakdown, named) in &results {
            sums.0 += breakdown.l1;
            sums.1 += breakdown.jsd;
            sums.2 += breakdown.plcc;
            sums.3 += breakdown.total;
            for (name, g) in named {
                match grad_by_name.get_mut(name) {
                    Some(acc) => *acc += g,
                    None => {
                        grad_by_name.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        let inv = 1.0 / results.len() as f64;
        let record = IterRecord {
            iter: iter as u64,
            lr: cosine_restart_lr(
                config.lr_initial,
                config.lr_floor,
                config.restart_period,
                iter,
            ),
            l1: sums.0 * inv,
            jsd: sums.1 * inv,
            plcc: sums.2 * inv,
            total: sums.3 * inv,
        };
        if !record.total.is_finite() {
            return Err(PriqaError::Numeric(format!(
                "non-finite loss at iteration {iter}; last good checkpoint retained"
            )));
        }
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&record).expect("record serialization");
            writeln!(f, "{line}").map_err(|e| PriqaError::io("log.jsonl", e))?;
        }

        let grads: Vec<Array2<f64>> = params
            .names()
            .map(|name| {
                grad_by_name
                    .remove(name)
                    .unwrap_or_else(|| Array2::zeros(params.tensor(name).unwrap().dim()))
            })
            .collect();
        optimizer.apply(&mut params, &grads, record.lr, config.weight_decay);
        log.push(record);

        if let (Some(path), true) = (
            ckpt_path.as_ref(),
            config.checkpoint_every > 0 && (iter + 1) % config.checkpoint_every == 0,
        ) {
            params.quantize_f32();
            save_checkpoint(&params, net_config, (iter + 1) as u64, path)?;
        }
    }

    params.quantize_f32();
    if let Some(path) = ckpt_path.as_ref() {
        save_checkpoint(&params, net_config, config.iterations as u64, path)?;
    }
    if let Some(mut f) = log_file {
        f.flush().map_err(|e| PriqaError::io("log.jsonl", e))?;
    }
    Ok(TrainOutput {
        params,
        log,
        final_iteration: config.iterations as u64,
    })
}

/// Fresh training run (no resume state, no output directory).
pub fn train(
    config: &TrainConfig,
    tuples: &[TrainTuple],
    net_config: &NetConfig,
) -> Result<TrainOutput> {
    train_from(config, tuples, net_config, None, None)
}

/// Predicts a dense quality map for a query/reference pair: builds the
/// partial map, runs the completion network, and resizes the output back
/// to the query's native resolution.
pub fn predict(
    params: &ModelParams,
    net_config: &NetConfig,
    query: &Frame,
    reference: &Frame,
    provider: &dyn FeatureProvider,
    drop_fraction: f64,
) -> Result<QualityMap> {
    let partial = build_partial_map(query, reference, provider, drop_fraction)?;
    let pred = forward(
        params,
        net_config,
        &query.image,
        &reference.image,
        &partial,
    )?;
    let (h, w) = (query.height(), query.width());
    if pred.dim() == (h, w) {
        return Ok(pred);
    }
    Ok(QualityMap::dense(resize_bilinear_grid(&pred.values, h, w)))
}

/// Resizes a frame's image (bilinear); used by CLI wrappers that feed
/// arbitrary-resolution inputs into a fixed-size network.
pub fn resize_frame_image(frame: &Frame, h: usize, w: usize) -> Frame {
    Frame {
        image: resize_bilinear(&frame.image, h, w),
        camera: frame.camera.clone(),
        depth: frame.depth.clone(),
        pointmap: frame.pointmap.clone(),
    }
}

/// Directory of a training run: returns the checkpoint path.
pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("ckpt.prqc")
}
