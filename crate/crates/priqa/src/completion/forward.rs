//! Full network forward pass: three encoder streams with
//! reference-conditioned cross attention, per-stage fusion, and the
//! mirrored decoder with skip connections.

use ndarray::Array2;

use super::blocks::{
    conv_fuse, dual_gated_block, sinusoidal_pe, space_to_depth_plan, upsample2_plan, BlockVars,
    ParamBinding,
};
use super::config::{NetConfig, PeKind};
use super::params::{branch_prefix, EncoderBranch, ModelParams};
use crate::autodiff::{Tape, Var};
use crate::error::{PriqaError, Result};
use crate::featuremetrics::QualityMap;
use crate::grid::{resize_bilinear, Image};

/// Per-stage feature snapshots (token matrices plus the stage validity
/// grid), kept for inspection and tests.
pub struct StageFeatures {
    /// Reference features per stage.
    pub f_r: Vec<Array2<f64>>,
    /// Cross-attended query features before fusion.
    pub f_hat_q: Vec<Array2<f64>>,
    /// Partial-map features per stage.
    pub f_p: Vec<Array2<f64>>,
    /// Fused query features per stage (the decoder skips).
    pub f_q: Vec<Array2<f64>>,
    /// Validity grid per stage, downsampled by 2x2 maximum.
    pub valid: Vec<Array2<bool>>,
}

/// Forward trace: the output map plus the tape needed for backprop.
pub struct ForwardTrace {
    pub tape: Tape,
    pub output_var: Var,
    pub output: QualityMap,
    pub stages: StageFeatures,
    pub binding: ParamBinding,
}

fn image_tokens(img: &Image) -> Array2<f64> {
    let (h, w, c) = img.dim();
    let mut out = Array2::zeros((h * w, c));
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                out[[i * w + j, ch]] = img[[i, j, ch]];
            }
        }
    }
    out
}

fn qmap_tokens(qm: &QualityMap) -> Array2<f64> {
    let (h, w) = qm.dim();
    let mut out = Array2::zeros((h * w, 2));
    for i in 0..h {
        for j in 0..w {
            out[[i * w + j, 0]] = qm.values[[i, j]];
            out[[i * w + j, 1]] = if qm.valid[[i, j]] { 1.0 } else { 0.0 };
        }
    }
    out
}

fn downsample_valid_max(valid: &Array2<bool>) -> Array2<bool> {
    let (h, w) = valid.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(i, j)| {
        valid[[2 * i, 2 * j]]
            || valid[[2 * i, 2 * j + 1]]
            || valid[[2 * i + 1, 2 * j]]
            || valid[[2 * i + 1, 2 * j + 1]]
    })
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(PriqaError::Numeric(format!(
            "non-finite activation in {what}"
        )))
    }
}

/// Runs the completion network and keeps the tape for backprop.
///
/// Inputs are resized to `config.input_hw` (bilinear for images, nearest
/// for the partial map so validity stays crisp); the output is dense at
/// `config.input_hw` with values strictly inside (0, 1).
pub fn forward_traced(
    params: &ModelParams,
    config: &NetConfig,
    i_q: &Image,
    i_r: &Image,
    q_hat: &QualityMap,
) -> Result<ForwardTrace> {
    config.validate()?;
    params.check_matches(config)?;
    let (h, w) = config.input_hw;
    let i_q = resize_bilinear(i_q, h, w);
    let i_r = resize_bilinear(i_r, h, w);
    let q_hat = q_hat.resize_nearest(h, w);

    let mut tape = Tape::new();
    let binding = ParamBinding::bind(&mut tape, params);
    let share = config.share_query_reference;

    let x_q = image_tokens(&i_q);
    let x_r = image_tokens(&i_r);
    let x_p = qmap_tokens(&q_hat);
    let x_q = tape.constant(x_q);
    let x_r = tape.constant(x_r);
    let x_p = tape.constant(x_p);

    let stem = |tape: &mut Tape, binding: &ParamBinding, x: Var, branch| -> Result<Var> {
        let prefix = branch_prefix(branch, share);
        let wv = binding.get(&format!("{prefix}.stem.weight"))?;
        let bv = binding.get(&format!("{prefix}.stem.bias"))?;
        let y = tape.matmul(x, wv);
        Ok(tape.add_bias(y, bv))
    };
    let down = |tape: &mut Tape,
                binding: &ParamBinding,
                x: Var,
                branch,
                stage: usize,
                hw: (usize, usize)|
     -> Result<Var> {
        let prefix = branch_prefix(branch, share);
        let wv = binding.get(&format!("{prefix}.down{stage}.weight"))?;
        let bv = binding.get(&format!("{prefix}.down{stage}.bias"))?;
        let plan = space_to_depth_plan(hw.0, hw.1);
        let gathered = tape.gather_rows(x, plan);
        let folded = tape.reshape_rows(gathered, hw.0 * hw.1 / 4);
        let y = tape.matmul(folded, wv);
        Ok(tape.add_bias(y, bv))
    };

    let mut f_r = stem(&mut tape, &binding, x_r, EncoderBranch::Reference)?;
    let mut f_q = stem(&mut tape, &binding, x_q, EncoderBranch::Query)?;
    let mut f_p = stem(&mut tape, &binding, x_p, EncoderBranch::Partial)?;
    let mut valid = q_hat.valid.clone();

    let mut stages = StageFeatures {
        f_r: Vec::new(),
        f_hat_q: Vec::new(),
        f_p: Vec::new(),
        f_q: Vec::new(),
        valid: Vec::new(),
    };
    let mut skip_vars: Vec<Var> = Vec::new();

    for s in 0..4 {
        let hw = config.enc_resolution(s);
        if s > 0 {
            let prev = config.enc_resolution(s - 1);
            f_r = down(&mut tape, &binding, f_r, EncoderBranch::Reference, s, prev)?;
            f_q = down(&mut tape, &binding, f_q, EncoderBranch::Query, s, prev)?;
            f_p = down(&mut tape, &binding, f_p, EncoderBranch::Partial, s, prev)?;
            valid = downsample_valid_max(&valid);
        }
        if config.pe_kind == PeKind::Sinusoidal2d {
            let pe = sinusoidal_pe(hw.0, hw.1, config.enc_channels[s]);
            f_r = tape.add_const(f_r, &pe);
            f_q = tape.add_const(f_q, &pe);
            f_p = tape.add_const(f_p, &pe);
        }

        let heads = config.enc_heads[s];
        let window = config.enc_windows[s];
        let ref_prefix = branch_prefix(EncoderBranch::Reference, share);
        for b in 0..config.enc_blocks[s] {
            let vars = BlockVars::bind(&binding, &format!("{ref_prefix}.stage{s}.block{b}"))?;
            f_r = dual_gated_block(&mut tape, f_r, None, &vars, heads, window, hw);
        }
        let query_prefix = branch_prefix(EncoderBranch::Query, share);
        let mut f_hat = f_q;
        for b in 0..config.enc_blocks[s] {
            let vars = BlockVars::bind(&binding, &format!("{query_prefix}.stage{s}.block{b}"))?;
            f_hat = dual_gated_block(&mut tape, f_hat, Some(f_r), &vars, heads, window, hw);
        }
        let partial_prefix = branch_prefix(EncoderBranch::Partial, share);
        for b in 0..config.enc_blocks[s] {
            let vars = BlockVars::bind(&binding, &format!("{partial_prefix}.stage{s}.block{b}"))?;
            f_p = dual_gated_block(&mut tape, f_p, Some(f_r), &vars, heads, window, hw);
        }

        let fuse_w = binding.get(&format!("fuse.stage{s}.weight"))?;
        let fuse_b = binding.get(&format!("fuse.stage{s}.bias"))?;
        f_q = conv_fuse(&mut tape, f_hat, f_p, fuse_w, fuse_b);

        check_finite(&tape, f_r, &format!("encoder stage {s} (reference)"))?;
        check_finite(&tape, f_hat, &format!("encoder stage {s} (query)"))?;
        check_finite(&tape, f_p, &format!("encoder stage {s} (partial)"))?;
        check_finite(&tape, f_q, &format!("encoder stage {s} (fused)"))?;

        stages.f_r.push(tape.value(f_r).clone());
        stages.f_hat_q.push(tape.value(f_hat).clone());
        stages.f_p.push(tape.value(f_p).clone());
        stages.f_q.push(tape.value(f_q).clone());
        stages.valid.push(valid.clone());
        skip_vars.push(f_q);
    }

    // decoder: upsample, concatenate the fused skip, reduce, refine
    let mut x = skip_vars[3];
    for d in 0..3 {
        let src_hw = config.dec_resolution(d);
        let plan = upsample2_plan(src_hw.0 / 2, src_hw.1 / 2);
        x = tape.gather_rows(x, plan);
        x = tape.concat_cols(x, skip_vars[2 - d]);
        let wv = binding.get(&format!("dec.stage{d}.reduce.weight"))?;
        let bv = binding.get(&format!("dec.stage{d}.reduce.bias"))?;
        x = tape.matmul(x, wv);
        x = tape.add_bias(x, bv);
        for b in 0..config.dec_blocks[d] {
            let vars = BlockVars::bind(&binding, &format!("dec.stage{d}.block{b}"))?;
            x = dual_gated_block(
                &mut tape,
                x,
                None,
                &vars,
                config.dec_heads[d],
                config.dec_windows[d],
                src_hw,
            );
        }
        check_finite(&tape, x, &format!("decoder stage {d}"))?;
    }

    let head_w = binding.get("head.weight")?;
    let head_b = binding.get("head.bias")?;
    let logits = tape.matmul(x, head_w);
    let logits = tape.add_bias(logits, head_b);
    let output_var = tape.sigmoid(logits);
    check_finite(&tape, output_var, "output head")?;

    let flat = tape.value(output_var);
    let values = Array2::from_shape_fn((h, w), |(i, j)| flat[[i * w + j, 0]]);
    let output = QualityMap::dense(values);

    Ok(ForwardTrace {
        tape,
        output_var,
        output,
        stages,
        binding,
    })
}

/// Runs the network and returns the dense predicted quality map.
pub fn forward(
    params: &ModelParams,
    config: &NetConfig,
    i_q: &Image,
    i_r: &Image,
    q_hat: &QualityMap,
) -> Result<QualityMap> {
    Ok(forward_traced(params, config, i_q, i_r, q_hat)?.output)
}
