//! Parameter naming, allocation, initialization, and counting.
//!
//! Every tensor has a canonical path like
//! `enc.shared.stage2.block1.attn.wq`; the query and reference branches
//! resolve to the single `enc.shared` set when weight sharing is on, so
//! shared weights have exactly one storage location.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::config::NetConfig;
use crate::error::{PriqaError, Result};

/// Initialization class of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    /// Truncated-normal projection weight.
    Projection,
    /// Zero-initialized bias.
    Bias,
    /// Layer-norm gain, ones.
    Gamma,
    /// Layer-norm shift, zeros.
    Beta,
}

/// Declared tensor: canonical name, shape, and init class.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub class: ParamClass,
}

/// Encoder stream identity for name resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderBranch {
    Query,
    Reference,
    Partial,
}

/// Canonical parameter prefix for a branch under the sharing flag.
pub fn branch_prefix(branch: EncoderBranch, share_query_reference: bool) -> &'static str {
    match (branch, share_query_reference) {
        (EncoderBranch::Partial, _) => "enc.partial",
        (_, true) => "enc.shared",
        (EncoderBranch::Query, false) => "enc.query",
        (EncoderBranch::Reference, false) => "enc.reference",
    }
}

/// Channel-attention hidden width at reduction ratio 8.
pub fn ca_hidden(channels: usize) -> usize {
    (channels / 8).max(1)
}

fn block_specs(specs: &mut Vec<ParamSpec>, prefix: &str, c: usize, heads: usize, ffn: usize) {
    let push = |specs: &mut Vec<ParamSpec>, name: String, rows, cols, class| {
        specs.push(ParamSpec {
            name,
            rows,
            cols,
            class,
        });
    };
    let hidden = ca_hidden(c);
    let inner = heads * c;
    for (suffix, rows, cols, class) in [
        ("ln1.gamma", 1, c, ParamClass::Gamma),
        ("ln1.beta", 1, c, ParamClass::Beta),
        ("ca.w1", c, hidden, ParamClass::Projection),
        ("ca.b1", 1, hidden, ParamClass::Bias),
        ("ca.w2", hidden, c, ParamClass::Projection),
        ("ca.b2", 1, c, ParamClass::Bias),
        ("ln2.gamma", 1, c, ParamClass::Gamma),
        ("ln2.beta", 1, c, ParamClass::Beta),
        ("attn.wq", c, inner, ParamClass::Projection),
        ("attn.bq", 1, inner, ParamClass::Bias),
        ("attn.wk", c, inner, ParamClass::Projection),
        ("attn.bk", 1, inner, ParamClass::Bias),
        ("attn.wv", c, inner, ParamClass::Projection),
        ("attn.bv", 1, inner, ParamClass::Bias),
        ("attn.wo", inner, c, ParamClass::Projection),
        ("attn.bo", 1, c, ParamClass::Bias),
        ("ln3.gamma", 1, c, ParamClass::Gamma),
        ("ln3.beta", 1, c, ParamClass::Beta),
        ("ffn.w1", c, ffn * c, ParamClass::Projection),
        ("ffn.b1", 1, ffn * c, ParamClass::Bias),
        ("ffn.w2", ffn * c, c, ParamClass::Projection),
        ("ffn.b2", 1, c, ParamClass::Bias),
    ] {
        push(specs, format!("{prefix}.{suffix}"), rows, cols, class);
    }
}

fn encoder_set_specs(specs: &mut Vec<ParamSpec>, prefix: &str, cfg: &NetConfig, in_channels: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.stem.weight"),
        rows: in_channels,
        cols: cfg.enc_channels[0],
        class: ParamClass::Projection,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.stem.bias"),
        rows: 1,
        cols: cfg.enc_channels[0],
        class: ParamClass::Bias,
    });
    for s in 1..4 {
        specs.push(ParamSpec {
            name: format!("{prefix}.down{s}.weight"),
            rows: 4 * cfg.enc_channels[s - 1],
            cols: cfg.enc_channels[s],
            class: ParamClass::Projection,
        });
        specs.push(ParamSpec {
            name: format!("{prefix}.down{s}.bias"),
            rows: 1,
            cols: cfg.enc_channels[s],
            class: ParamClass::Bias,
        });
    }
    for s in 0..4 {
        for b in 0..cfg.enc_blocks[s] {
            block_specs(
                specs,
                &format!("{prefix}.stage{s}.block{b}"),
                cfg.enc_channels[s],
                cfg.enc_heads[s],
                cfg.ffn_expand,
            );
        }
    }
}

/// Enumerates every tensor of the model for a configuration.
pub fn param_specs(cfg: &NetConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    if cfg.share_query_reference {
        encoder_set_specs(&mut specs, "enc.shared", cfg, 3);
    } else {
        encoder_set_specs(&mut specs, "enc.query", cfg, 3);
        encoder_set_specs(&mut specs, "enc.reference", cfg, 3);
    }
    // partial stream takes (value, validity) channels
    encoder_set_specs(&mut specs, "enc.partial", cfg, 2);

    for s in 0..4 {
        let c = cfg.enc_channels[s];
        specs.push(ParamSpec {
            name: format!("fuse.stage{s}.weight"),
            rows: 2 * c,
            cols: c,
            class: ParamClass::Projection,
        });
        specs.push(ParamSpec {
            name: format!("fuse.stage{s}.bias"),
            rows: 1,
            cols: c,
            class: ParamClass::Bias,
        });
    }

    let mut prev = cfg.enc_channels[3];
    for d in 0..3 {
        let c = cfg.dec_channels[d];
        specs.push(ParamSpec {
            name: format!("dec.stage{d}.reduce.weight"),
            rows: prev + cfg.skip_channels(d),
            cols: c,
            class: ParamClass::Projection,
        });
        specs.push(ParamSpec {
            name: format!("dec.stage{d}.reduce.bias"),
            rows: 1,
            cols: c,
            class: ParamClass::Bias,
        });
        for b in 0..cfg.dec_blocks[d] {
            block_specs(
                &mut specs,
                &format!("dec.stage{d}.block{b}"),
                c,
                cfg.dec_heads[d],
                cfg.ffn_expand,
            );
        }
        prev = c;
    }
    specs.push(ParamSpec {
        name: "head.weight".into(),
        rows: prev,
        cols: 1,
        class: ParamClass::Projection,
    });
    specs.push(ParamSpec {
        name: "head.bias".into(),
        rows: 1,
        cols: 1,
        class: ParamClass::Bias,
    });
    specs
}

/// Exact count of scalar parameters for a configuration.
pub fn param_count(cfg: &NetConfig) -> usize {
    param_specs(cfg).iter().map(|s| s.rows * s.cols).sum()
}

/// Scalar parameter count of one dual-gated block.
pub fn block_param_count(channels: usize, heads: usize, ffn_expand: usize) -> usize {
    let mut specs = Vec::new();
    block_specs(&mut specs, "b", channels, heads, ffn_expand);
    specs.iter().map(|s| s.rows * s.cols).sum()
}

/// All trainable tensors, keyed by canonical name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ModelParams {
    /// Seeded initialization: truncated-normal (std 0.02) projections,
    /// zero biases (the output head bias therefore starts at the
    /// uninformative 0.5 after the logistic), unit layer-norm gains.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<ModelParams> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(0x1217);
        let mut trunc_normal = move || loop {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let g = (-2.0 * u1.ln()).sqrt() * u2.cos();
            if g.abs() <= 2.0 {
                return g * 0.02;
            }
        };
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let value = match spec.class {
                ParamClass::Projection => {
                    Array2::from_shape_fn((spec.rows, spec.cols), |_| trunc_normal())
                }
                ParamClass::Bias | ParamClass::Beta => Array2::zeros((spec.rows, spec.cols)),
                ParamClass::Gamma => Array2::ones((spec.rows, spec.cols)),
            };
            tensors.insert(spec.name, value);
        }
        Ok(ModelParams { tensors })
    }

    pub fn from_tensors(tensors: BTreeMap<String, Array2<f64>>) -> ModelParams {
        ModelParams { tensors }
    }

    pub fn tensor(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| PriqaError::Config(format!("unknown parameter {name}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| PriqaError::Config(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Checks that the tensors exactly match a configuration's spec.
    pub fn check_matches(&self, cfg: &NetConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.tensors.len() {
            return Err(PriqaError::Config(format!(
                "parameter count mismatch: {} tensors vs {} expected",
                self.tensors.len(),
                specs.len()
            )));
        }
        for spec in specs {
            let t = self.tensor(&spec.name)?;
            if t.dim() != (spec.rows, spec.cols) {
                return Err(PriqaError::Config(format!(
                    "tensor {} has shape {:?}, expected ({}, {})",
                    spec.name,
                    t.dim(),
                    spec.rows,
                    spec.cols
                )));
            }
        }
        Ok(())
    }

    /// Rounds every tensor through f32, the checkpoint storage precision.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// Verifies all tensors are finite.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if !t.iter().all(|v| v.is_finite()) {
                return Err(PriqaError::Numeric(format!(
                    "non-finite values in parameter {name}"
                )));
            }
        }
        Ok(())
    }
}
