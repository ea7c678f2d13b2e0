//! Training objective: pixel-wise L1, temperature-softmax Jensen-Shannon
//! divergence, and Pearson-correlation losses with their analytic
//! gradients.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{PriqaError, Result};
use crate::featuremetrics::QualityMap;
use crate::grid::Grid;

/// Loss combination weights and JSD shaping parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_iqa: f64,
    pub lambda_jsd: f64,
    pub lambda_plcc: f64,
    pub jsd_temperature: f64,
    pub clamp_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_iqa: 0.5,
            lambda_jsd: 1.0,
            lambda_plcc: 0.25,
            jsd_temperature: 0.2,
            clamp_eps: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_iqa < 0.0 || self.lambda_jsd < 0.0 || self.lambda_plcc < 0.0 {
            return Err(PriqaError::Argument("loss weights must be nonnegative".into()));
        }
        if self.jsd_temperature <= 0.0 {
            return Err(PriqaError::Argument(format!(
                "jsd temperature must be positive, got {}",
                self.jsd_temperature
            )));
        }
        if !(0.0 < self.clamp_eps && self.clamp_eps < 0.5) {
            return Err(PriqaError::Argument(format!(
                "clamp_eps must lie in (0, 0.5), got {}",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

/// Per-term loss values for logging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub jsd: f64,
    pub plcc: f64,
    pub total: f64,
}

fn check_same_dim(pred: &QualityMap, target: &QualityMap) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(PriqaError::Argument(format!(
            "loss resolution mismatch: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    Ok(())
}

/// Mean absolute difference over all pixels (targets are dense).
pub fn l1_quality_loss(pred: &QualityMap, target: &QualityMap) -> Result<f64> {
    check_same_dim(pred, target)?;
    Ok(l1_loss_grad(&pred.values, &target.values).0)
}

/// L1 value and gradient with respect to the prediction grid.
pub fn l1_loss_grad(pred: &Grid, target: &Grid) -> (f64, Grid) {
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(pred.dim());
    for ((p, t), g) in pred.iter().zip(target.iter()).zip(grad.iter_mut()) {
        let d = p - t;
        total += d.abs();
        *g = d.signum() / n;
        if d == 0.0 {
            *g = 0.0;
        }
    }
    (total / n, grad)
}

/// Jensen-Shannon divergence between temperature-softmax distributions of
/// the logit-transformed maps. Values clamp to `[eps, 1-eps]` before the
/// logit; KL uses the natural log, so the result lies in `[0, ln 2]`.
pub fn jsd_loss(
    pred: &QualityMap,
    target: &QualityMap,
    temperature: f64,
    clamp_eps: f64,
) -> Result<f64> {
    check_same_dim(pred, target)?;
    Ok(jsd_loss_grad(&pred.values, &target.values, temperature, clamp_eps)?.0)
}

/// JSD value and gradient with respect to the prediction grid.
pub fn jsd_loss_grad(
    pred: &Grid,
    target: &Grid,
    temperature: f64,
    clamp_eps: f64,
) -> Result<(f64, Grid)> {
    if temperature <= 0.0 {
        return Err(PriqaError::Argument("temperature must be positive".into()));
    }
    if !(0.0 < clamp_eps && clamp_eps < 0.5) {
        return Err(PriqaError::Argument("clamp_eps must lie in (0, 0.5)".into()));
    }
    for v in pred.iter().chain(target.iter()) {
        if !v.is_finite() {
            return Err(PriqaError::Numeric("non-finite value in jsd input".into()));
        }
    }

    let softmax_of = |grid: &Grid| -> (Vec<f64>, Vec<bool>) {
        let mut z = Vec::with_capacity(grid.len());
        let mut unclamped = Vec::with_capacity(grid.len());
        for v in grid.iter() {
            let c = v.clamp(clamp_eps, 1.0 - clamp_eps);
            unclamped.push(*v == c);
            z.push((c / (1.0 - c)).ln() / temperature);
        }
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let sum: f64 = exps.iter().sum();
        (exps.into_iter().map(|e| e / sum).collect(), unclamped)
    };

    let (p, p_unclamped) = softmax_of(pred);
    let (g, _) = softmax_of(target);

    let mut jsd = 0.0;
    // dJ/dP_i = 0.5 * ln(P_i / M_i); the mixture terms cancel
    let mut dp = vec![0.0; p.len()];
    for i in 0..p.len() {
        let m = 0.5 * (p[i] + g[i]);
        if p[i] > 0.0 {
            jsd += 0.5 * p[i] * (p[i] / m).ln();
            dp[i] = 0.5 * (p[i] / m).ln();
        }
        if g[i] > 0.0 {
            jsd += 0.5 * g[i] * (g[i] / m).ln();
        }
    }

    // back through the softmax, then the logit and clamp
    let weighted: f64 = dp.iter().zip(p.iter()).map(|(d, pi)| d * pi).sum();
    let mut grad = Array2::zeros(pred.dim());
    for (idx, gslot) in grad.iter_mut().enumerate() {
        if !p_unclamped[idx] {
            continue; // clamped pixels have zero local derivative
        }
        let dz = p[idx] * (dp[idx] - weighted);
        let v = pred.as_slice().expect("contiguous grid")[idx];
        *gslot = dz / (temperature * v * (1.0 - v));
    }
    Ok((jsd, grad))
}

/// `1 - r` with Pearson correlation `r` of the flattened maps; degenerate
/// variance (< 1e-12) on either side yields `r = 0`, so the loss is 1.
pub fn plcc_loss(pred: &QualityMap, target: &QualityMap) -> Result<f64> {
    check_same_dim(pred, target)?;
    Ok(plcc_loss_grad(&pred.values, &target.values).0)
}

/// PLCC loss value and gradient with respect to the prediction grid. The
/// degenerate branch is locally constant, so its gradient is zero.
pub fn plcc_loss_grad(pred: &Grid, target: &Grid) -> (f64, Grid) {
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for (p, t) in pred.iter().zip(target.iter()) {
        let a = p - mp;
        let b = t - mt;
        saa += a * a;
        sbb += b * b;
        sab += a * b;
    }
    if saa / n < 1e-12 || sbb / n < 1e-12 {
        return (1.0, Array2::zeros(pred.dim()));
    }
    let sa = saa.sqrt();
    let sb = sbb.sqrt();
    let r = sab / (sa * sb);
    let mut grad = Array2::zeros(pred.dim());
    for ((p, t), g) in pred.iter().zip(target.iter()).zip(grad.iter_mut()) {
        let a = p - mp;
        let b = t - mt;
        // dr/dp_i = (b_i - r * (sb/sa) * a_i) / (sa * sb); mean terms vanish
        *g = -(b - r * (sb / sa) * a) / (sa * sb);
    }
    (1.0 - r, grad)
}

/// Weighted combination of the three losses per the training objective.
pub fn total_loss(
    pred: &QualityMap,
    target: &QualityMap,
    weights: &LossWeights,
) -> Result<(f64, LossBreakdown)> {
    check_same_dim(pred, target)?;
    let (_, breakdown, _) = total_loss_grad(&pred.values, &target.values, weights)?;
    Ok((breakdown.total, breakdown))
}

/// Total loss with the per-term breakdown and the gradient with respect
/// to the prediction grid.
pub fn total_loss_grad(
    pred: &Grid,
    target: &Grid,
    weights: &LossWeights,
) -> Result<(f64, LossBreakdown, Grid)> {
    weights.validate()?;
    let (l1, g1) = l1_loss_grad(pred, target);
    let (jsd, g2) = jsd_loss_grad(pred, target, weights.jsd_temperature, weights.clamp_eps)?;
    let (pl, g3) = plcc_loss_grad(pred, target);
    let total = weights.lambda_iqa * l1 + weights.lambda_jsd * jsd + weights.lambda_plcc * pl;
    let grad = &g1 * weights.lambda_iqa + &g2 * weights.lambda_jsd + &g3 * weights.lambda_plcc;
    Ok((
        total,
        LossBreakdown {
            l1,
            jsd,
            plcc: pl,
            total,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_grid(seed: u64, h: usize, w: usize) -> Grid {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.gen_range(0.05..0.95))
    }

    fn dense(values: Grid) -> QualityMap {
        QualityMap::dense(values)
    }

    /// Central finite differences of a scalar function of the grid.
    fn fd_gradient(f: &dyn Fn(&Grid) -> f64, at: &Grid, h: f64) -> Grid {
        let mut grad = Array2::zeros(at.dim());
        for idx in 0..at.len() {
            let mut plus = at.clone();
            let mut minus = at.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            grad.as_slice_mut().unwrap()[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grad
    }

    fn max_rel_error(a: &Grid, b: &Grid) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn l1_identities() {
        let p = random_grid(0, 4, 4);
        assert_eq!(l1_quality_loss(&dense(p.clone()), &dense(p.clone())).unwrap(), 0.0);
        let zeros = Array2::zeros((4, 4));
        let ones = Array2::ones((4, 4));
        assert_eq!(l1_quality_loss(&dense(zeros), &dense(ones)).unwrap(), 1.0);
    }

    #[test]
    fn l1_matches_elementwise_bruteforce() {
        let p = random_grid(1, 4, 4);
        let t = random_grid(2, 4, 4);
        let direct = p
            .iter()
            .zip(t.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 16.0;
        let got = l1_quality_loss(&dense(p), &dense(t)).unwrap();
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn jsd_identity_and_bound() {
        let p = random_grid(3, 6, 6);
        let same = jsd_loss(&dense(p.clone()), &dense(p.clone()), 0.2, 1e-6).unwrap();
        assert!(same.abs() < 1e-9);
        for seed in 0..20 {
            let a = random_grid(seed, 5, 5);
            let b = random_grid(seed + 100, 5, 5);
            let v = jsd_loss(&dense(a), &dense(b), 0.2, 1e-6).unwrap();
            assert!(v >= -1e-12 && v <= std::f64::consts::LN_2 + 1e-12, "jsd {v}");
        }
    }

    #[test]
    fn jsd_two_pixel_regression_constant() {
        // independently computed scalar oracle (logit -> temperature
        // softmax -> JSD), frozen as a regression value
        let pred = Array2::from_shape_vec((1, 2), vec![0.9, 0.1]).unwrap();
        let target = Array2::from_shape_vec((1, 2), vec![0.5, 0.5]).unwrap();
        let v = jsd_loss(&dense(pred), &dense(target), 0.2, 1e-6).unwrap();
        assert!((v - 0.21576155120218729).abs() < 1e-12, "jsd {v}");
    }

    #[test]
    fn jsd_rejects_non_finite() {
        let mut p = random_grid(4, 3, 3);
        p[[0, 0]] = f64::NAN;
        let t = random_grid(5, 3, 3);
        assert!(matches!(
            jsd_loss(&dense(p), &dense(t), 0.2, 1e-6),
            Err(PriqaError::Numeric(_))
        ));
    }

    #[test]
    fn plcc_loss_identities() {
        let p = random_grid(6, 4, 4);
        assert!(plcc_loss(&dense(p.clone()), &dense(p.clone())).unwrap().abs() < 1e-12);
        let inverted = p.mapv(|v| 1.0 - v);
        let two = plcc_loss(&dense(inverted), &dense(p.clone())).unwrap();
        assert!((two - 2.0).abs() < 1e-12);
        let constant = Array2::from_elem((4, 4), 0.4);
        assert_eq!(plcc_loss(&dense(constant), &dense(p)).unwrap(), 1.0);
    }

    #[test]
    fn total_loss_defaults_and_linearity() {
        let w = LossWeights::default();
        assert_eq!(
            (w.lambda_iqa, w.lambda_jsd, w.lambda_plcc, w.jsd_temperature),
            (0.5, 1.0, 0.25, 0.2)
        );
        let p = random_grid(7, 5, 5);
        let t = random_grid(8, 5, 5);
        let (_, full) = total_loss(&dense(p.clone()), &dense(t.clone()), &w).unwrap();
        // zeroing two weights reduces the total to the remaining term
        let only_jsd = LossWeights {
            lambda_iqa: 0.0,
            lambda_plcc: 0.0,
            ..Default::default()
        };
        let (total, parts) = total_loss(&dense(p.clone()), &dense(t.clone()), &only_jsd).unwrap();
        assert!((total - parts.jsd).abs() < 1e-15);
        assert!((parts.jsd - full.jsd).abs() < 1e-15);
        // zero at equality
        let (zero, _) = total_loss(&dense(p.clone()), &dense(p), &w).unwrap();
        assert!(zero.abs() < 1e-9);
    }

    /// Samples in (0.3, 0.7): wider ranges concentrate the temperature
    /// softmax so hard that the smallest gradient entries drop below
    /// what central differences can resolve at f64.
    fn random_grid_mid(seed: u64, h: usize, w: usize) -> Grid {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.gen_range(0.3..0.7))
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let p = random_grid_mid(10, 8, 8);
        let t = random_grid_mid(11, 8, 8);
        let h = 1e-6;

        let (_, g_l1) = l1_loss_grad(&p, &t);
        let fd_l1 = fd_gradient(&|x| l1_loss_grad(x, &t).0, &p, h);
        assert!(max_rel_error(&g_l1, &fd_l1) < 1e-5, "l1 grad");

        let (_, g_jsd) = jsd_loss_grad(&p, &t, 0.2, 1e-6).unwrap();
        let fd_jsd = fd_gradient(&|x| jsd_loss_grad(x, &t, 0.2, 1e-6).unwrap().0, &p, h);
        assert!(
            max_rel_error(&g_jsd, &fd_jsd) < 1e-5,
            "jsd grad: {}",
            max_rel_error(&g_jsd, &fd_jsd)
        );

        let (_, g_plcc) = plcc_loss_grad(&p, &t);
        let fd_plcc = fd_gradient(&|x| plcc_loss_grad(x, &t).0, &p, h);
        assert!(max_rel_error(&g_plcc, &fd_plcc) < 1e-5, "plcc grad");

        let w = LossWeights::default();
        let (_, _, g_total) = total_loss_grad(&p, &t, &w).unwrap();
        let fd_total = fd_gradient(&|x| total_loss_grad(x, &t, &w).unwrap().0, &p, h);
        assert!(max_rel_error(&g_total, &fd_total) < 1e-5, "total grad");
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_jsd_symmetric(seed in 0u64..200) {
            let p = random_grid(seed, 4, 4);
            let t = random_grid(seed + 1000, 4, 4);
            let l1 = l1_quality_loss(&dense(p.clone()), &dense(t.clone())).unwrap();
            let jsd_pt = jsd_loss(&dense(p.clone()), &dense(t.clone()), 0.2, 1e-6).unwrap();
            let jsd_tp = jsd_loss(&dense(t.clone()), &dense(p.clone()), 0.2, 1e-6).unwrap();
            let pl = plcc_loss(&dense(p), &dense(t)).unwrap();
            prop_assert!(l1 >= 0.0);
            prop_assert!(jsd_pt >= -1e-12);
            prop_assert!(pl >= -1e-12);
            prop_assert!((jsd_pt - jsd_tp).abs() < 1e-12);
        }

        #[test]
        fn total_loss_linear_in_weights(seed in 0u64..100, a in 0.0f64..2.0, b in 0.0f64..2.0) {
            let p = random_grid(seed, 4, 4);
            let t = random_grid(seed + 500, 4, 4);
            let w1 = LossWeights { lambda_iqa: a, lambda_jsd: b, lambda_plcc: 0.5, ..Default::default() };
            let w2 = LossWeights { lambda_iqa: 2.0 * a, lambda_jsd: 2.0 * b, lambda_plcc: 1.0, ..Default::default() };
            let (t1, _) = total_loss(&dense(p.clone()), &dense(t.clone()), &w1).unwrap();
            let (t2, _) = total_loss(&dense(p), &dense(t), &w2).unwrap();
            prop_assert!((t2 - 2.0 * t1).abs() < 1e-12);
        }
    }
}
