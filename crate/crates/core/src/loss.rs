//! Multi-class dice loss over softmax probabilities.

use crate::error::{CunetError, Result};
use crate::tensor::ops::dims5;
use crate::tensor::Tensor;

/// Multi-class dice loss of predicted class probabilities `probs`
/// [b, D, d, h, w] against a one-hot truth of the same shape:
///
///   loss = -(2/D) * sum_d ( sum_j P*T / (sum_j P + sum_j T + smooth) )
///
/// averaged over all D classes, background included. `smooth` is added to the
/// denominator only, so a perfect prediction scores exactly -1 when every
/// class is present and smooth is 0. A class with an exactly zero denominator
/// contributes 0 with zero gradient. Differentiable with respect to `probs`.
pub fn dice_loss(probs: &Tensor, truth: &Tensor, smooth: f64) -> Result<Tensor> {
    let [b, classes, d, h, w] = dims5(probs, "dice_loss", "probs")?;
    if probs.shape() != truth.shape() {
        return Err(CunetError::ShapeMismatch {
            op: "dice_loss",
            detail: format!("probs {:?} vs truth {:?}", probs.shape(), truth.shape()),
        });
    }
    if smooth < 0.0 {
        return Err(CunetError::InvalidArgument {
            op: "dice_loss",
            detail: format!("smooth must be nonnegative, got {smooth}"),
        });
    }
    let vol = d * h * w;
    let t = truth.data();
    // One-hot contract: entries in {0, 1}, exactly one 1 per voxel.
    for bi in 0..b {
        for v in 0..vol {
            let mut ones = 0usize;
            for c in 0..classes {
                let tv = t[(bi * classes + c) * vol + v];
                if tv == 1.0 {
                    ones += 1;
                } else if tv != 0.0 {
                    return Err(CunetError::InvalidArgument {
                        op: "dice_loss",
                        detail: format!("truth is not one-hot: value {tv} at voxel {v}"),
                    });
                }
            }
            if ones != 1 {
                return Err(CunetError::InvalidArgument {
                    op: "dice_loss",
                    detail: format!("truth is not one-hot: {ones} ones at voxel {v}"),
                });
            }
        }
    }

    let p = probs.data();
    let mut num = vec![0.0; classes];
    let mut den = vec![0.0; classes];
    for c in 0..classes {
        let mut pt = 0.0;
        let mut ps = 0.0;
        let mut ts = 0.0;
        for bi in 0..b {
            let base = (bi * classes + c) * vol;
            for v in 0..vol {
                let pv = p[base + v];
                let tv = t[base + v];
                pt += pv * tv;
                ps += pv;
                ts += tv;
            }
        }
        num[c] = pt;
        den[c] = ps + ts + smooth;
    }
    let scale = -2.0 / classes as f64;
    let loss: f64 = num
        .iter()
        .zip(&den)
        .map(|(&n, &d)| if d == 0.0 { 0.0 } else { n / d })
        .sum::<f64>()
        * scale;

    if !probs.requires_grad() {
        return Ok(Tensor::from_forward("dice_loss", vec![], vec![loss]));
    }
    Ok(Tensor::from_op(
        "dice_loss",
        vec![],
        vec![loss],
        vec![probs.clone(), truth.clone()],
        Box::new(move |g, inputs| {
            let go = g[0];
            let t = inputs[1].data();
            let mut gp = vec![0.0; inputs[0].numel()];
            for c in 0..classes {
                if den[c] == 0.0 {
                    continue;
                }
                let d2 = den[c] * den[c];
                for bi in 0..b {
                    let base = (bi * classes + c) * vol;
                    for v in 0..vol {
                        let tv = t[base + v];
                        gp[base + v] = go * scale * (tv * den[c] - num[c]) / d2;
                    }
                }
            }
            vec![Some(gp), None]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::util::seeded_rng;
    use rand::Rng;

    fn one_hot_from_classes(classes: &[usize], d: usize) -> Tensor {
        let vol = classes.len();
        let mut data = vec![0.0; d * vol];
        for (v, &c) in classes.iter().enumerate() {
            data[c * vol + v] = 1.0;
        }
        Tensor::from_vec(data, &[1, d, 1, 1, vol]).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_minus_one() {
        // All 4 classes present; P equals the one-hot truth exactly.
        let classes = [0usize, 1, 2, 3, 0, 1, 2, 3];
        let t = one_hot_from_classes(&classes, 4);
        let p = Tensor::from_vec(t.data().to_vec(), t.shape()).unwrap();
        let loss = dice_loss(&p, &t, 0.0).unwrap();
        assert!((loss.item() + 1.0).abs() < 1e-12, "loss {}", loss.item());
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        // P puts zero mass on every true class.
        let t = one_hot_from_classes(&[0, 0, 0, 0], 4);
        let mut p = vec![0.0; t.numel()];
        // All probability on class 1 while truth is class 0 everywhere.
        for v in 0..4 {
            p[4 + v] = 1.0;
        }
        let p = Tensor::from_vec(p, t.shape()).unwrap();
        let loss = dice_loss(&p, &t, 0.0).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn single_voxel_uniform_case() {
        // One voxel, D=4, true class 0, P uniform 0.25, smooth 0:
        // class 0 term 0.25/1.25, others 0 => loss = -(2/4)*0.2 = -0.1.
        let t = one_hot_from_classes(&[0], 4);
        let p = Tensor::from_vec(vec![0.25; 4], t.shape()).unwrap();
        let loss = dice_loss(&p, &t, 0.0).unwrap();
        assert!((loss.item() + 0.1).abs() < 1e-12, "loss {}", loss.item());
    }

    #[test]
    fn smooth_keeps_absent_classes_finite() {
        let t = one_hot_from_classes(&[0, 0], 4);
        let p = Tensor::from_vec(
            (0..t.numel()).map(|i| if i < 2 { 0.5 } else { 0.5 / 3.0 }).collect(),
            t.shape(),
        )
        .unwrap();
        let loss = dice_loss(&p, &t, 1e-5).unwrap();
        assert!(loss.item().is_finite());
        assert!(loss.item() <= 0.0 && loss.item() >= -1.0);
    }

    #[test]
    fn rejects_non_one_hot_truth() {
        let t = Tensor::from_vec(vec![0.5, 0.5, 0.0, 0.0], &[1, 4, 1, 1, 1]).unwrap();
        let p = Tensor::from_vec(vec![0.25; 4], &[1, 4, 1, 1, 1]).unwrap();
        assert!(dice_loss(&p, &t, 0.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded_rng(77, "dice-fd");
        let vol = 8; // 2^3 volume
        let classes = 4;
        let t_classes: Vec<usize> = (0..vol).map(|_| rng.gen_range(0..classes)).collect();
        let mut t_data = vec![0.0; classes * vol];
        for (v, &c) in t_classes.iter().enumerate() {
            t_data[c * vol + v] = 1.0;
        }
        let t = Tensor::from_vec(t_data, &[1, classes, 2, 2, 2]).unwrap();
        // Random positive "probabilities" (dice loss itself does not require
        // a normalized simplex; gradient correctness is what matters here).
        let p_data: Vec<f64> = (0..classes * vol).map(|_| rng.gen_range(0.05..1.0)).collect();
        let p = Tensor::from_vec(p_data, &[1, classes, 2, 2, 2]).unwrap();
        let err = grad_check(|x| dice_loss(x, &t, 1e-5), &p, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn loss_stays_in_unit_interval() {
        let mut rng = seeded_rng(78, "dice-range");
        for trial in 0..20 {
            let vol = 8;
            let classes = 4;
            let t_classes: Vec<usize> = (0..vol).map(|_| rng.gen_range(0..classes)).collect();
            let mut t_data = vec![0.0; classes * vol];
            for (v, &c) in t_classes.iter().enumerate() {
                t_data[c * vol + v] = 1.0;
            }
            let t = Tensor::from_vec(t_data, &[1, classes, 2, 2, 2]).unwrap();
            // Random simplex per voxel.
            let mut p_data = vec![0.0; classes * vol];
            for v in 0..vol {
                let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for (c, r) in raw.iter().enumerate() {
                    p_data[c * vol + v] = r / s;
                }
            }
            let p = Tensor::from_vec(p_data, &[1, classes, 2, 2, 2]).unwrap();
            let loss = dice_loss(&p, &t, 0.0).unwrap().item();
            assert!((-1.0..=0.0).contains(&loss), "trial {trial}: loss {loss}");
        }
    }
}
