//! 2x2x2 max pooling with stride 2.

use std::rc::Rc;

use super::dims5;
use crate::error::{CunetError, Result};
use crate::tensor::Tensor;

/// Halve every spatial extent by taking the max of each 2x2x2 window.
/// Odd spatial extents are rejected. Backward routes the gradient to the
/// argmax; ties go to the first element of the window in (d, h, w) order.
pub fn maxpool3d(input: &Tensor) -> Result<Tensor> {
    let [b, c, d, h, w] = dims5(input, "maxpool3d", "input")?;
    for (axis, &e) in [d, h, w].iter().enumerate() {
        if e == 0 || e % 2 != 0 {
            return Err(CunetError::InvalidArgument {
                op: "maxpool3d",
                detail: format!(
                    "spatial extents must be even and positive, axis {axis} has {e}"
                ),
            });
        }
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;
    let x = input.data();
    let mut out = vec![0.0; b * c * out_vol];
    let mut argmax = vec![0usize; b * c * out_vol];
    for s in 0..b * c {
        let xs = &x[s * in_vol..(s + 1) * in_vol];
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for kd in 0..2 {
                        for kh in 0..2 {
                            for kw in 0..2 {
                                let i = ((2 * zd + kd) * h + 2 * zh + kh) * w + 2 * zw + kw;
                                if xs[i] > best {
                                    best = xs[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = (zd * oh + zh) * ow + zw;
                    out[s * out_vol + o] = best;
                    argmax[s * out_vol + o] = s * in_vol + best_i;
                }
            }
        }
    }
    let shape = vec![b, c, od, oh, ow];
    if !input.requires_grad() {
        return Ok(Tensor::from_forward("maxpool3d", shape, out));
    }
    let saved = Rc::new(argmax);
    let total_in = b * c * in_vol;
    Ok(Tensor::from_op(
        "maxpool3d",
        shape,
        out,
        vec![input.clone()],
        Box::new(move |g, _| {
            let mut gi = vec![0.0; total_in];
            for (o, &src) in saved.iter().enumerate() {
                gi[src] += g[o];
            }
            vec![Some(gi)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::sum_all;

    #[test]
    fn halves_spatial_extents() {
        let x = Tensor::zeros(&[1, 3, 4, 4, 4]);
        let y = maxpool3d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2, 2, 2]);
    }

    #[test]
    fn rejects_odd_extent() {
        let x = Tensor::zeros(&[1, 1, 3, 4, 4]);
        assert!(maxpool3d(&x).is_err());
    }

    #[test]
    fn constant_input_ties_break_to_first_window_element() {
        let x = Tensor::variable(vec![5.0; 4 * 4 * 4], &[1, 1, 4, 4, 4]).unwrap();
        let y = maxpool3d(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
        sum_all(&y).backward().unwrap();
        let g = x.grad().unwrap();
        // Gradient concentrates on the first element of each 2x2x2 window.
        for zd in 0..2 {
            for zh in 0..2 {
                for zw in 0..2 {
                    let first = (2 * zd * 4 + 2 * zh) * 4 + 2 * zw;
                    assert_eq!(g[first], 1.0);
                }
            }
        }
        assert_eq!(g.iter().sum::<f64>(), 8.0);
        assert_eq!(g.iter().filter(|&&v| v != 0.0).count(), 8);
    }
}
