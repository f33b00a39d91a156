//! Pixel-wise SmoothL1 supervision mixed with binary cross-entropy.
//!
//! Two routes exist on purpose: plain-f64 scalar functions used for reporting
//! and as a reference, and tensor-graph functions used by the training loop.
//! Tests hold the two routes together.
//!
//! Conventions: the pixel map is passed through a sigmoid before SmoothL1 so
//! the {0,1} targets are reachable; target masks are constant maps (all ones
//! for attack, all zeros for bona fide); BCE is computed from the logit in
//! log-space.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::heads::ModelOutput;
use crate::nn::{sigmoid, softplus};

/// Constant ground-truth map: every position carries the sample's label.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMask {
    pub values: Vec<f64>,
    pub side: usize,
    pub label: Label,
}

pub fn make_target_mask(label: Label, side: usize) -> TargetMask {
    let v = match label {
        Label::BonaFide => 0.0,
        Label::Attack => 1.0,
    };
    TargetMask {
        values: vec![v; side * side],
        side,
        label,
    }
}

/// The two-branch SmoothL1 term for one residual.
pub fn smooth_l1_term(residual: f64) -> f64 {
    let a = residual.abs();
    if a < 1.0 {
        0.5 * residual * residual
    } else {
        a - 0.5
    }
}

/// Mean SmoothL1 over pixels; `map` holds probabilities, `mask` the targets.
pub fn smooth_l1(map: &[f64], mask: &[f64]) -> Result<f64> {
    if map.len() != mask.len() || map.is_empty() {
        return Err(Error::Shape(format!(
            "smooth_l1 shape mismatch: map has {} pixels, mask {}",
            map.len(),
            mask.len()
        )));
    }
    let sum: f64 = map
        .iter()
        .zip(mask.iter())
        .map(|(x, y)| smooth_l1_term(y - x))
        .sum();
    Ok(sum / map.len() as f64)
}

/// Numerically stable BCE from the raw logit.
pub fn bce_from_logit(logit: f64, label: Label) -> f64 {
    let y = match label {
        Label::BonaFide => 0.0,
        Label::Attack => 1.0,
    };
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    y * softplus(-logit) + (1.0 - y) * softplus(logit)
}

/// BCE from a probability strictly inside (0,1).
pub fn bce_from_prob(p: f64, label: Label) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Metric(format!(
            "bce_from_prob needs p strictly inside (0,1), got {p}"
        )));
    }
    Ok(match label {
        Label::Attack => -p.ln(),
        Label::BonaFide => -(1.0 - p).ln(),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub smooth_l1: f64,
    pub bce: f64,
    pub overall: f64,
    pub lambda: f64,
}

pub fn validate_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) || lambda.is_nan() {
        return Err(Error::Config(format!(
            "lambda must lie in [0,1], got {lambda}"
        )));
    }
    Ok(())
}

/// Scalar overall loss for one decoded output. For the baseline variant (no
/// pixel map) the SmoothL1 term is skipped and the breakdown reports an
/// effective lambda of 0 so that overall = lambda*smooth_l1 + (1-lambda)*bce
/// stays an identity.
pub fn overall_loss(output: &ModelOutput, label: Label, lambda: f64) -> Result<LossBreakdown> {
    validate_lambda(lambda)?;
    let bce = bce_from_logit(output.binary_logit, label);
    match &output.pixel_map {
        None => Ok(LossBreakdown {
            smooth_l1: 0.0,
            bce,
            overall: bce,
            lambda: 0.0,
        }),
        Some(map_logits) => {
            let mask = make_target_mask(label, output.map_side);
            let probs: Vec<f64> = map_logits
                .iter()
                .map(|&l| crate::heads::pa_score_from_logit(l as f64))
                .collect();
            let s = smooth_l1(&probs, &mask.values)?;
            Ok(LossBreakdown {
                smooth_l1: s,
                bce,
                overall: lambda * s + (1.0 - lambda) * bce,
                lambda,
            })
        }
    }
}

/// Differentiable batch loss pieces, all shape (N,).
pub struct BatchLossGraph {
    /// Scalar tensor optimized by the training loop.
    pub overall: Tensor,
    pub per_sample_smooth_l1: Tensor,
    pub per_sample_bce: Tensor,
}

/// Per-sample BCE from logits; `targets` holds 0/1 in the same dtype.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    // y*softplus(-z) + (1-y)*softplus(z)
    let ones = targets.ones_like()?;
    let pos = softplus(&logits.neg()?)?.mul(targets)?;
    let neg = softplus(logits)?.mul(&ones.sub(targets)?)?;
    Ok(pos.add(&neg)?)
}

/// Per-sample mean SmoothL1 between sigmoid(map_logits) and the constant
/// masks implied by `targets` (N,). map_logits: (N, 1, h, w).
pub fn smooth_l1_map(map_logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = map_logits.dims4()?;
    let probs = sigmoid(map_logits)?;
    let masks = targets.reshape((n, 1, 1, 1))?.broadcast_as((n, 1, h, w))?;
    let residual = masks.sub(&probs)?;
    let a = residual.abs()?;
    // Piecewise branches selected by a detached comparison mask; the branch
    // boundary is measure-zero and both branches agree there in value and
    // slope.
    let lt = a.lt(1.0)?.to_dtype(map_logits.dtype())?.detach();
    let quad = residual.sqr()?.affine(0.5, 0.0)?;
    let lin = a.affine(1.0, -0.5)?;
    let ones = lt.ones_like()?;
    let z = quad.mul(&lt)?.add(&lin.mul(&ones.sub(&lt)?)?)?;
    Ok(z.mean(3)?.mean(2)?.squeeze(1)?)
}

/// Batch overall loss: mean over samples of
/// lambda*smooth_l1 + (1-lambda)*bce, with the SmoothL1 term dropped when no
/// pixel map exists (baseline variant).
pub fn overall_loss_batch(
    pixel_logits: Option<&Tensor>,
    binary_logits: &Tensor,
    targets: &Tensor,
    lambda: f64,
) -> Result<BatchLossGraph> {
    validate_lambda(lambda)?;
    let bce = bce_with_logits(binary_logits, targets)?;
    match pixel_logits {
        None => {
            let overall = bce.mean_all()?;
            Ok(BatchLossGraph {
                overall,
                per_sample_smooth_l1: bce.zeros_like()?,
                per_sample_bce: bce,
            })
        }
        Some(maps) => {
            let s = smooth_l1_map(maps, targets)?;
            let mixed = s.affine(lambda, 0.0)?.add(&bce.affine(1.0 - lambda, 0.0)?)?;
            Ok(BatchLossGraph {
                overall: mixed.mean_all()?,
                per_sample_smooth_l1: s,
                per_sample_bce: bce,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn cpu() -> Device {
        Device::Cpu
    }

    #[test]
    fn smooth_l1_reference_values() {
        // map == mask
        let m = vec![1.0; 196];
        assert_eq!(smooth_l1(&m, &m).unwrap(), 0.0);
        // x = 0.5, y = 1 everywhere -> 0.5 * 0.25 = 0.125
        let map = vec![0.5; 196];
        let mask = vec![1.0; 196];
        assert!((smooth_l1(&map, &mask).unwrap() - 0.125).abs() < 1e-12);
        // |y - x| = 2 everywhere -> 2 - 0.5 = 1.5 (linear branch)
        let map = vec![-1.0; 9];
        let mask = vec![1.0; 9];
        assert!((smooth_l1(&map, &mask).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_branch_boundary_is_continuous() {
        let eps = 1e-6;
        let below = smooth_l1_term(1.0 - eps);
        let above = smooth_l1_term(1.0 + eps);
        assert!((below - 0.5).abs() < 2e-6);
        assert!((above - 0.5).abs() < 2e-6);
        // Slopes: d/dr (r^2/2) = r -> 1; d/dr (r - 1/2) = 1.
        let h = 1e-7;
        let slope_below = (smooth_l1_term(1.0 - eps + h) - smooth_l1_term(1.0 - eps - h)) / (2.0 * h);
        let slope_above = (smooth_l1_term(1.0 + eps + h) - smooth_l1_term(1.0 + eps - h)) / (2.0 * h);
        assert!((slope_below - 1.0).abs() < 1e-3);
        assert!((slope_above - 1.0).abs() < 1e-3);
    }

    #[test]
    fn bce_reference_values() {
        // p = 0.5 either label -> ln 2
        assert!((bce_from_prob(0.5, Label::Attack).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(
            (bce_from_prob(0.5, Label::BonaFide).unwrap() - std::f64::consts::LN_2).abs() < 1e-12
        );
        // confident correct prediction -> ~0
        assert!(bce_from_logit(30.0, Label::Attack) < 1e-12);
        // p = 0.9, y = 0 -> -ln(0.1)
        assert!((bce_from_prob(0.9, Label::BonaFide).unwrap() - 2.302585092994046).abs() < 1e-12);
        // logit route agrees with probability route
        for logit in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let p = crate::heads::pa_score_from_logit(logit);
            for label in [Label::Attack, Label::BonaFide] {
                let a = bce_from_logit(logit, label);
                let b = bce_from_prob(p, label).unwrap();
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn target_mask_is_constant_label() {
        let m = make_target_mask(Label::Attack, 14);
        assert_eq!(m.values.len(), 196);
        assert!(m.values.iter().all(|&v| v == 1.0));
        let m = make_target_mask(Label::BonaFide, 14);
        assert!(m.values.iter().all(|&v| v == 0.0));
        let mean: f64 = m.values.iter().sum::<f64>() / m.values.len() as f64;
        assert_eq!(mean, 0.0);
    }

    fn logit_for_prob(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn overall_loss_mixes_and_degenerates() {
        // Construct an output whose map sigmoid is exactly 0.5 (logits 0) and
        // whose binary probability is 0.5: smooth = 0.125, bce = ln 2.
        let out = ModelOutput {
            pixel_map: Some(vec![0.0f32; 196]),
            map_side: 14,
            binary_logit: 0.0,
            pa_score: 0.5,
        };
        let b = overall_loss(&out, Label::Attack, 0.2).unwrap();
        assert!((b.smooth_l1 - 0.125).abs() < 1e-9);
        assert!((b.bce - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((b.overall - (0.2 * 0.125 + 0.8 * std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((b.overall - 0.57948).abs() < 1e-4);

        let b0 = overall_loss(&out, Label::Attack, 0.0).unwrap();
        assert_eq!(b0.overall, b0.bce);
        let b1 = overall_loss(&out, Label::Attack, 1.0).unwrap();
        assert_eq!(b1.overall, b1.smooth_l1);

        assert!(overall_loss(&out, Label::Attack, 1.5).is_err());
        assert!(overall_loss(&out, Label::Attack, -0.1).is_err());

        // Baseline outputs skip the SmoothL1 term; effective lambda is 0.
        let base = ModelOutput {
            pixel_map: None,
            map_side: 14,
            binary_logit: logit_for_prob(0.9),
            pa_score: 0.9,
        };
        let bb = overall_loss(&base, Label::BonaFide, 0.2).unwrap();
        assert_eq!(bb.lambda, 0.0);
        assert_eq!(bb.smooth_l1, 0.0);
        assert!((bb.overall - bb.bce).abs() < 1e-12);
        assert!((bb.overall - 2.302585092994046).abs() < 1e-9);
    }

    #[test]
    fn breakdown_identity_holds() {
        let out = ModelOutput {
            pixel_map: Some(vec![0.3f32, -0.2, 1.4, 0.0]),
            map_side: 2,
            binary_logit: 0.8,
            pa_score: crate::heads::pa_score_from_logit(0.8),
        };
        for lambda in [0.0, 0.2, 0.5, 1.0] {
            for label in [Label::Attack, Label::BonaFide] {
                let b = overall_loss(&out, label, lambda).unwrap();
                let recompute = b.lambda * b.smooth_l1 + (1.0 - b.lambda) * b.bce;
                let denom = b.overall.abs().max(1e-30);
                assert!((b.overall - recompute).abs() / denom <= 1e-9);
                assert!(b.overall >= 0.0);
            }
        }
    }

    #[test]
    fn loss_is_permutation_invariant_over_pixels() {
        let map: Vec<f64> = vec![0.1, 0.9, 0.4, 0.7];
        let mask = vec![1.0; 4];
        let a = smooth_l1(&map, &mask).unwrap();
        let mut map2 = map.clone();
        map2.reverse();
        let b = smooth_l1(&map2, &mask).unwrap();
        assert_eq!(a, b);
    }

    /// The tensor route must agree with the scalar route.
    #[test]
    fn graph_loss_matches_scalar_reference() {
        let dev = cpu();
        let mut rng = crate::nn::seeded_rng(5, crate::nn::RngStream::Other(2));
        for case in 0..10 {
            let n = 3;
            let side = 4;
            let lambda = [0.0, 0.2, 0.7, 1.0][case % 4];
            let map_data =
                crate::nn::init_data(crate::nn::Init::Normal { std: 2.0 }, n * side * side, &mut rng);
            let logit_data = crate::nn::init_data(crate::nn::Init::Normal { std: 2.0 }, n, &mut rng);
            let labels: Vec<f32> = (0..n).map(|i| ((i + case) % 2) as f32).collect();

            let maps = Tensor::from_vec(map_data.clone(), (n, 1, side, side), &dev).unwrap();
            let logits = Tensor::from_vec(logit_data.clone(), (n,), &dev).unwrap();
            let targets = Tensor::from_vec(labels.clone(), (n,), &dev).unwrap();
            let graph = overall_loss_batch(Some(&maps), &logits, &targets, lambda).unwrap();
            let got = graph.overall.to_vec0::<f32>().unwrap() as f64;

            let mut want = 0.0;
            for i in 0..n {
                let label = if labels[i] > 0.5 { Label::Attack } else { Label::BonaFide };
                let out = ModelOutput {
                    pixel_map: Some(map_data[i * side * side..(i + 1) * side * side].to_vec()),
                    map_side: side,
                    binary_logit: logit_data[i] as f64,
                    pa_score: crate::heads::pa_score_from_logit(logit_data[i] as f64),
                };
                want += overall_loss(&out, label, lambda).unwrap().overall;
            }
            want /= n as f64;
            assert!((got - want).abs() < 1e-5, "case {case}: {got} vs {want}");
        }
    }

    /// Analytic gradients against central finite differences in f64.
    #[test]
    fn graph_loss_gradients_match_finite_differences() {
        let dev = cpu();
        let mut rng = crate::nn::seeded_rng(11, crate::nn::RngStream::Other(3));
        let n = 2;
        let side = 3;
        for trial in 0..5 {
            let lambda = [0.2, 0.5, 0.9, 0.0, 1.0][trial];
            let map_data: Vec<f64> =
                crate::nn::init_data(crate::nn::Init::Normal { std: 1.5 }, n * side * side, &mut rng)
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
            let logit_data: Vec<f64> =
                crate::nn::init_data(crate::nn::Init::Normal { std: 1.5 }, n, &mut rng)
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
            let labels: Vec<f64> = (0..n).map(|i| ((i + trial) % 2) as f64).collect();

            let maps = Var::from_tensor(
                &Tensor::from_vec(map_data.clone(), (n, 1, side, side), &dev)
                    .unwrap()
                    .to_dtype(DType::F64)
                    .unwrap(),
            )
            .unwrap();
            let logits = Var::from_tensor(
                &Tensor::from_vec(logit_data.clone(), (n,), &dev)
                    .unwrap()
                    .to_dtype(DType::F64)
                    .unwrap(),
            )
            .unwrap();
            let targets = Tensor::from_vec(labels.clone(), (n,), &dev)
                .unwrap()
                .to_dtype(DType::F64)
                .unwrap();

            let graph =
                overall_loss_batch(Some(maps.as_tensor()), logits.as_tensor(), &targets, lambda)
                    .unwrap();
            let grads = graph.overall.backward().unwrap();
            let g_map = grads
                .get(&maps)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let g_logit = grads.get(&logits).unwrap().to_vec1::<f64>().unwrap();

            let eval = |map: &[f64], logit: &[f64]| -> f64 {
                let m = Tensor::from_vec(map.to_vec(), (n, 1, side, side), &dev)
                    .unwrap()
                    .to_dtype(DType::F64)
                    .unwrap();
                let l = Tensor::from_vec(logit.to_vec(), (n,), &dev)
                    .unwrap()
                    .to_dtype(DType::F64)
                    .unwrap();
                overall_loss_batch(Some(&m), &l, &targets, lambda)
                    .unwrap()
                    .overall
                    .to_vec0::<f64>()
                    .unwrap()
            };

            let h = 1e-4;
            for i in 0..map_data.len() {
                let mut up = map_data.clone();
                let mut dn = map_data.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (eval(&up, &logit_data) - eval(&dn, &logit_data)) / (2.0 * h);
                let denom = fd.abs().max(g_map[i].abs()).max(1e-8);
                assert!(
                    (fd - g_map[i]).abs() / denom < 1e-4,
                    "map grad {i}: fd {fd} vs analytic {}",
                    g_map[i]
                );
            }
            for i in 0..n {
                let mut up = logit_data.clone();
                let mut dn = logit_data.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (eval(&map_data, &up) - eval(&map_data, &dn)) / (2.0 * h);
                let denom = fd.abs().max(g_logit[i].abs()).max(1e-8);
                assert!(
                    (fd - g_logit[i]).abs() / denom < 1e-4,
                    "logit grad {i}: fd {fd} vs analytic {}",
                    g_logit[i]
                );
            }
        }
    }
}
