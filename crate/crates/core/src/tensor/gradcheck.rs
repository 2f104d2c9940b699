//! Finite-difference verification of autodiff gradients.

use rand::Rng;

use super::ops::{mul, sum_all};
use super::Tensor;
use crate::error::Result;
use crate::util::seeded_rng;

/// Compare the reverse-mode gradient of `fn_of` against central finite
/// differences at `input`, returning the maximum relative error over all
/// input elements. The relative error uses max(1, |analytic|, |numeric|) as
/// denominator.
///
/// `fn_of` must be deterministic; its (possibly non-scalar) output is reduced
/// to a scalar through a fixed random projection so every output element
/// participates.
pub fn grad_check<F>(fn_of: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let probe = fn_of(&input.detach())?;
    let mut proj_rng = seeded_rng(0x67726164, "grad-check-projection");
    let weights: Vec<f64> = (0..probe.numel())
        .map(|_| proj_rng.gen_range(-1.0..1.0))
        .collect();

    let project = |data: &[f64]| -> f64 { data.iter().zip(&weights).map(|(a, b)| a * b).sum() };

    let scalar_loss = |x_data: &[f64]| -> Result<f64> {
        let x = Tensor::from_vec(x_data.to_vec(), input.shape())?;
        Ok(project(fn_of(&x)?.data()))
    };

    // Analytic gradient.
    let leaf = Tensor::variable(input.data().to_vec(), input.shape())?;
    let out = fn_of(&leaf)?;
    let w = Tensor::from_vec(weights.clone(), out.shape())?;
    let loss = sum_all(&mul(&out, &w)?);
    loss.backward()?;
    let analytic = leaf
        .grad()
        .unwrap_or_else(|| vec![0.0; input.numel()]);

    // Central differences.
    let base = input.data().to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let numeric = (scalar_loss(&plus)? - scalar_loss(&minus)?) / (2.0 * eps);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::super::ops;
    use super::*;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed, "gradcheck-input");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let x = random_tensor(&[6], 1);
        let err = grad_check(|t| Ok(ops::scale(t, 3.5)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn relu_matches_away_from_kink() {
        let mut rng = seeded_rng(2, "relu-fd");
        // N(0,1)-ish draws, re-sampled away from the kink at zero.
        let data: Vec<f64> = (0..40)
            .map(|_| loop {
                let v: f64 = rng.gen_range(-2.0..2.0);
                if v.abs() > 1e-3 {
                    break v;
                }
            })
            .collect();
        let x = Tensor::from_vec(data, &[40]).unwrap();
        let err = grad_check(|t| Ok(ops::relu(t)), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn instance_norm_matches_finite_differences() {
        let x = random_tensor(&[1, 2, 3, 3, 3], 3);
        let err = grad_check(|t| ops::instance_norm(t, 1e-5), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn softmax_matches_finite_differences() {
        let x = random_tensor(&[1, 4, 2, 2, 2], 4);
        let err = grad_check(|t| ops::softmax_channels(t), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn upsample_matches_finite_differences() {
        let x = random_tensor(&[1, 2, 2, 3, 2], 5);
        let err = grad_check(|t| ops::upsample3d_trilinear(t), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn maxpool_matches_finite_differences() {
        let x = random_tensor(&[1, 2, 4, 4, 4], 6);
        let err = grad_check(|t| ops::maxpool3d(t), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn conv3d_matches_finite_differences_on_all_arguments() {
        let x = random_tensor(&[1, 2, 4, 4, 4], 7);
        let k = random_tensor(&[3, 2, 3, 3, 3], 8);
        let bias = random_tensor(&[3], 9);
        let err = grad_check(
            |t| ops::conv3d(t, &k, &bias, [1; 3], [1; 3], [1; 3]),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "input gradient error {err}");

        let err = grad_check(
            |t| ops::conv3d(&x, t, &bias, [1; 3], [2; 3], [2; 3]),
            &k,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "kernel gradient error {err}");

        let err = grad_check(
            |t| ops::conv3d(&x, &k, t, [2; 3], [1; 3], [1; 3]),
            &bias,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "bias gradient error {err}");
    }

    #[test]
    fn composed_conv_in_relu_matches_finite_differences() {
        let x = random_tensor(&[1, 2, 4, 4, 4], 10);
        let k = random_tensor(&[2, 2, 3, 3, 3], 11);
        let bias = random_tensor(&[2], 12);
        let err = grad_check(
            |t| {
                let c = ops::conv3d(t, &k, &bias, [1; 3], [1; 3], [1; 3])?;
                let n = ops::instance_norm(&c, 1e-5)?;
                Ok(ops::relu(&n))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
