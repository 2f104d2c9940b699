//! Trilinear 2x upsampling (align-corners = false).

use std::rc::Rc;

use super::dims5;
use crate::error::{CunetError, Result};
use crate::tensor::Tensor;

/// Per-axis source taps: output index o samples input i0 with weight w0 and
/// i1 with weight w1. Border outputs collapse to a single tap so they
/// reproduce the edge value exactly.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..n_out)
        .map(|o| {
            let c = (o as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
            let floor = c.floor();
            let frac = c - floor;
            let i0 = (floor as i64).clamp(0, n_in as i64 - 1) as usize;
            let i1 = ((floor as i64) + 1).clamp(0, n_in as i64 - 1) as usize;
            if i0 == i1 {
                (i0, i1, 1.0, 0.0)
            } else {
                (i0, i1, 1.0 - frac, frac)
            }
        })
        .collect()
}

/// Double every spatial extent of a [b, c, d, h, w] tensor by trilinear
/// interpolation.
pub fn upsample3d_trilinear(input: &Tensor) -> Result<Tensor> {
    let [b, c, d, h, w] = dims5(input, "upsample3d_trilinear", "input")?;
    if d == 0 || h == 0 || w == 0 {
        return Err(CunetError::InvalidArgument {
            op: "upsample3d_trilinear",
            detail: "spatial extents must be at least 1".into(),
        });
    }
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let taps_d = Rc::new(axis_taps(d, od));
    let taps_h = Rc::new(axis_taps(h, oh));
    let taps_w = Rc::new(axis_taps(w, ow));
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;
    let x = input.data();
    let mut out = vec![0.0; b * c * out_vol];
    for s in 0..b * c {
        let xs = &x[s * in_vol..(s + 1) * in_vol];
        let os = &mut out[s * out_vol..(s + 1) * out_vol];
        for (zd, &(d0, d1, wd0, wd1)) in taps_d.iter().enumerate() {
            for (zh, &(h0, h1, wh0, wh1)) in taps_h.iter().enumerate() {
                let row = (zd * oh + zh) * ow;
                for (zw, &(w0, w1, ww0, ww1)) in taps_w.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(di, dw) in &[(d0, wd0), (d1, wd1)] {
                        if dw == 0.0 {
                            continue;
                        }
                        for &(hi, hw) in &[(h0, wh0), (h1, wh1)] {
                            if hw == 0.0 {
                                continue;
                            }
                            let base = (di * h + hi) * w;
                            let mut v = ww0 * xs[base + w0];
                            if ww1 != 0.0 {
                                v += ww1 * xs[base + w1];
                            }
                            acc += dw * hw * v;
                        }
                    }
                    os[row + zw] = acc;
                }
            }
        }
    }
    let shape = vec![b, c, od, oh, ow];
    if !input.requires_grad() {
        return Ok(Tensor::from_forward("upsample3d_trilinear", shape, out));
    }
    let total_in = b * c * in_vol;
    Ok(Tensor::from_op(
        "upsample3d_trilinear",
        shape,
        out,
        vec![input.clone()],
        Box::new(move |g, _| {
            let mut gi = vec![0.0; total_in];
            for s in 0..b * c {
                let gs = &g[s * out_vol..(s + 1) * out_vol];
                let gd = &mut gi[s * in_vol..(s + 1) * in_vol];
                for (zd, &(d0, d1, wd0, wd1)) in taps_d.iter().enumerate() {
                    for (zh, &(h0, h1, wh0, wh1)) in taps_h.iter().enumerate() {
                        let row = (zd * oh + zh) * ow;
                        for (zw, &(w0, w1, ww0, ww1)) in taps_w.iter().enumerate() {
                            let go = gs[row + zw];
                            if go == 0.0 {
                                continue;
                            }
                            for &(di, dw) in &[(d0, wd0), (d1, wd1)] {
                                if dw == 0.0 {
                                    continue;
                                }
                                for &(hi, hw) in &[(h0, wh0), (h1, wh1)] {
                                    if hw == 0.0 {
                                        continue;
                                    }
                                    let base = (di * h + hi) * w;
                                    gd[base + w0] += dw * hw * ww0 * go;
                                    if ww1 != 0.0 {
                                        gd[base + w1] += dw * hw * ww1 * go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gi)]
        }),
    ))
}
