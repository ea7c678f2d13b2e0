//! Graph builders for the network: parameter binding, token-order plans,
//! positional encodings, and the dual-gated attention block.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;

use super::params::ModelParams;
use crate::autodiff::{Tape, Var};
use crate::error::{PriqaError, Result};

/// Tape handles for every tensor of the model, keyed by canonical name.
pub struct ParamBinding {
    vars: BTreeMap<String, Var>,
}

impl ParamBinding {
    /// Pushes all tensors onto the tape as trainable leaves. Shared
    /// parameters are pushed once, so both branches read and backprop
    /// through one node.
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> ParamBinding {
        let mut vars = BTreeMap::new();
        for (name, tensor) in params.iter() {
            vars.insert(name.clone(), tape.param(tensor.clone()));
        }
        ParamBinding { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| PriqaError::Config(format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Channel-attention tensor handles.
pub struct CaVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Spatial-attention tensor handles.
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// One dual-gated block's tensor handles.
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub ca: CaVars,
    pub ln2: (Var, Var),
    pub attn: AttnVars,
    pub ln3: (Var, Var),
    pub ffn: (Var, Var, Var, Var),
}

impl BlockVars {
    pub fn bind(binding: &ParamBinding, prefix: &str) -> Result<BlockVars> {
        let g = |suffix: &str| binding.get(&format!("{prefix}.{suffix}"));
        Ok(BlockVars {
            ln1: (g("ln1.gamma")?, g("ln1.beta")?),
            ca: CaVars {
                w1: g("ca.w1")?,
                b1: g("ca.b1")?,
                w2: g("ca.w2")?,
                b2: g("ca.b2")?,
            },
            ln2: (g("ln2.gamma")?, g("ln2.beta")?),
            attn: AttnVars {
                wq: g("attn.wq")?,
                bq: g("attn.bq")?,
                wk: g("attn.wk")?,
                bk: g("attn.bk")?,
                wv: g("attn.wv")?,
                bv: g("attn.bv")?,
                wo: g("attn.wo")?,
                bo: g("attn.bo")?,
            },
            ln3: (g("ln3.gamma")?, g("ln3.beta")?),
            ffn: (g("ffn.w1")?, g("ffn.b1")?, g("ffn.w2")?, g("ffn.b2")?),
        })
    }
}

/// Row order that groups tokens of a `(h, w)` grid into `win x win`
/// windows, plus the inverse order.
pub fn window_plans(h: usize, w: usize, win: usize) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let mut forward = Vec::with_capacity(h * w);
    for wr in 0..h / win {
        for wc in 0..w / win {
            for i in 0..win {
                for j in 0..win {
                    forward.push((wr * win + i) * w + (wc * win + j));
                }
            }
        }
    }
    let mut inverse = vec![0usize; h * w];
    for (dst, &src) in forward.iter().enumerate() {
        inverse[src] = dst;
    }
    (Arc::new(forward), Arc::new(inverse))
}

/// Row order that packs each 2x2 spatial block into four consecutive
/// rows; combined with a row-major reshape this is space-to-depth.
pub fn space_to_depth_plan(h: usize, w: usize) -> Arc<Vec<usize>> {
    let mut plan = Vec::with_capacity(h * w);
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            plan.push((2 * i) * w + 2 * j);
            plan.push((2 * i) * w + 2 * j + 1);
            plan.push((2 * i + 1) * w + 2 * j);
            plan.push((2 * i + 1) * w + 2 * j + 1);
        }
    }
    Arc::new(plan)
}

/// Row order for 2x nearest-neighbor upsampling of a `(h, w)` grid.
pub fn upsample2_plan(h: usize, w: usize) -> Arc<Vec<usize>> {
    let mut plan = Vec::with_capacity(4 * h * w);
    for i in 0..2 * h {
        for j in 0..2 * w {
            plan.push((i / 2) * w + j / 2);
        }
    }
    Arc::new(plan)
}

/// Fixed 2D sinusoidal positional encodings as a `(h*w, c)` matrix: the
/// first half of the channels encodes the row index, the rest the column
/// index.
pub fn sinusoidal_pe(h: usize, w: usize, c: usize) -> Array2<f64> {
    let c_row = c / 2;
    let c_col = c - c_row;
    let mut pe = Array2::zeros((h * w, c));
    let fill = |pe: &mut Array2<f64>, offset: usize, dim: usize, pos: f64, row: usize| {
        for k in 0..dim {
            let pair = (k / 2 * 2) as f64;
            let freq = 1.0 / 10000f64.powf(pair / dim as f64);
            pe[[row, offset + k]] = if k % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            };
        }
    };
    for i in 0..h {
        for j in 0..w {
            let row = i * w + j;
            fill(&mut pe, 0, c_row, i as f64, row);
            fill(&mut pe, c_row, c_col, j as f64, row);
        }
    }
    pe
}

/// Channel attention: a shared two-layer MLP over average- and
/// max-pooled channel statistics gates the channels.
pub fn channel_attention(tape: &mut Tape, x: Var, ca: &CaVars) -> Var {
    let avg = tape.mean_rows(x);
    let mx = tape.max_rows(x);
    let mlp = |tape: &mut Tape, pooled: Var| {
        let hid = tape.matmul(pooled, ca.w1);
        let hid = tape.add_bias(hid, ca.b1);
        let hid = tape.gelu(hid);
        let out = tape.matmul(hid, ca.w2);
        tape.add_bias(out, ca.b2)
    };
    let a = mlp(tape, avg);
    let m = mlp(tape, mx);
    let sum = tape.add(a, m);
    let gate = tape.sigmoid(sum);
    tape.scale_cols(x, gate)
}

/// Multi-head scaled dot-product attention with queries from `x` and
/// keys/values from `context`; restricted to aligned spatial windows
/// when `window > 0`.
pub fn spatial_attention(
    tape: &mut Tape,
    x: Var,
    context: Var,
    attn: &AttnVars,
    heads: usize,
    window: usize,
    hw: (usize, usize),
) -> Var {
    let (h, w) = hw;
    let n = h * w;
    let project = |tape: &mut Tape, input: Var, wm: Var, bm: Var| {
        let p = tape.matmul(input, wm);
        tape.add_bias(p, bm)
    };
    let q = project(tape, x, attn.wq, attn.bq);
    let k = project(tape, context, attn.wk, attn.bk);
    let v = project(tape, context, attn.wv, attn.bv);
    let out = if window > 0 && window * window < n {
        let (plan, inverse) = window_plans(h, w, window);
        let qw = tape.gather_rows(q, plan.clone());
        let kw = tape.gather_rows(k, plan.clone());
        let vw = tape.gather_rows(v, plan);
        let aw = tape.attention(qw, kw, vw, heads, window * window);
        tape.gather_rows(aw, inverse)
    } else {
        tape.attention(q, k, v, heads, n)
    };
    let out = tape.matmul(out, attn.wo);
    tape.add_bias(out, attn.bo)
}

/// Dual-gated attention block: channel attention, then (self- or cross-)
/// spatial attention, then a GELU feed-forward, each behind pre-norm
/// residuals. `context = None` selects self mode.
pub fn dual_gated_block(
    tape: &mut Tape,
    x: Var,
    context: Option<Var>,
    vars: &BlockVars,
    heads: usize,
    window: usize,
    hw: (usize, usize),
) -> Var {
    let n1 = tape.layer_norm(x, vars.ln1.0, vars.ln1.1);
    let ca = channel_attention(tape, n1, &vars.ca);
    let x = tape.add(x, ca);

    let n2 = tape.layer_norm(x, vars.ln2.0, vars.ln2.1);
    let ctx_n = match context {
        Some(c) => tape.layer_norm(c, vars.ln2.0, vars.ln2.1),
        None => n2,
    };
    let sa = spatial_attention(tape, n2, ctx_n, &vars.attn, heads, window, hw);
    let x = tape.add(x, sa);

    let n3 = tape.layer_norm(x, vars.ln3.0, vars.ln3.1);
    let hid = tape.matmul(n3, vars.ffn.0);
    let hid = tape.add_bias(hid, vars.ffn.1);
    let hid = tape.gelu(hid);
    let out = tape.matmul(hid, vars.ffn.2);
    let out = tape.add_bias(out, vars.ffn.3);
    tape.add(x, out)
}

/// Channel-wise concatenation followed by a 1x1 channel-mixing
/// projection.
pub fn conv_fuse(tape: &mut Tape, f_hat_q: Var, f_p: Var, weight: Var, bias: Var) -> Var {
    let cat = tape.concat_cols(f_hat_q, f_p);
    let mixed = tape.matmul(cat, weight);
    tape.add_bias(mixed, bias)
}
