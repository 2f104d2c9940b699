//! Instance normalization: per (batch, channel) standardization.

use std::rc::Rc;

use super::dims5;
use crate::error::{CunetError, Result};
use crate::tensor::Tensor;

/// Normalize each (batch, channel) slice to zero mean and unit variance:
/// (x - mean) / sqrt(var + eps), biased variance. No learnable affine
/// parameters; constant slices map to zeros thanks to eps.
pub fn instance_norm(input: &Tensor, eps: f64) -> Result<Tensor> {
    let [b, c, d, h, w] = dims5(input, "instance_norm", "input")?;
    let vol = d * h * w;
    if vol == 0 {
        return Err(CunetError::InvalidArgument {
            op: "instance_norm",
            detail: "each (batch, channel) slice needs at least one voxel".into(),
        });
    }
    if eps <= 0.0 {
        return Err(CunetError::InvalidArgument {
            op: "instance_norm",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    let x = input.data();
    let slices = b * c;
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; slices];
    for s in 0..slices {
        let xs = &x[s * vol..(s + 1) * vol];
        let mean = xs.iter().sum::<f64>() / vol as f64;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / vol as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[s] = is;
        for (o, &v) in out[s * vol..(s + 1) * vol].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
    }
    if !input.requires_grad() {
        return Ok(Tensor::from_forward("instance_norm", input.shape().to_vec(), out));
    }
    let y = Rc::new(out);
    let saved_y = Rc::clone(&y);
    let saved_is = inv_std;
    Ok(Tensor::from_op_shared(
        "instance_norm",
        input.shape().to_vec(),
        y,
        vec![input.clone()],
        Box::new(move |g, _| {
            // dx = inv_std * (g - mean(g) - y * mean(g*y)) per slice.
            let y = &*saved_y;
            let mut gi = vec![0.0; y.len()];
            let n = vol as f64;
            for s in 0..slices {
                let gs = &g[s * vol..(s + 1) * vol];
                let ys = &y[s * vol..(s + 1) * vol];
                let g_mean = gs.iter().sum::<f64>() / n;
                let gy_mean = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
                let is = saved_is[s];
                for ((o, &gv), &yv) in gi[s * vol..(s + 1) * vol].iter_mut().zip(gs).zip(ys) {
                    *o = is * (gv - g_mean - yv * gy_mean);
                }
            }
            vec![Some(gi)]
        }),
    ))
}
