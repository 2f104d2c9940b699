//! Direct 3D convolution with stride, dilation, and zero padding.

use super::dims5;
use crate::error::{CunetError, Result};
use crate::tensor::Tensor;
use crate::util::pool;
use rayon::prelude::*;

const AXES: [&str; 3] = ["depth", "height", "width"];

// Kernels below this many multiply-adds run serially; the result is identical
// either way, only dispatch overhead changes.
const PAR_THRESHOLD: usize = 65_536;

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    ci: usize,
    co: usize,
    in_sp: [usize; 3],
    k: [usize; 3],
    out_sp: [usize; 3],
    stride: [usize; 3],
    dilation: [usize; 3],
    padding: [usize; 3],
}

impl ConvGeom {
    fn in_vol(&self) -> usize {
        self.in_sp.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out_sp.iter().product()
    }
    fn k_vol(&self) -> usize {
        self.k.iter().product()
    }
    fn macs(&self) -> usize {
        self.b * self.co * self.ci * self.k_vol() * self.out_vol()
    }

    /// Output index range [lo, hi] along `axis` for kernel offset `k_idx`
    /// such that the sampled input index stays in bounds, or None if empty.
    fn valid_out_range(&self, axis: usize, k_idx: usize) -> Option<(usize, usize)> {
        let s = self.stride[axis] as i64;
        let shift = (k_idx * self.dilation[axis]) as i64 - self.padding[axis] as i64;
        // in = o*s + shift must satisfy 0 <= in < in_extent
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = (self.in_sp[axis] as i64 - 1 - shift).div_euclid(s);
        let hi = hi.min(self.out_sp[axis] as i64 - 1);
        if lo > hi {
            None
        } else {
            Some((lo as usize, hi as usize))
        }
    }
}

fn conv_geometry(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: [usize; 3],
    dilation: [usize; 3],
    padding: [usize; 3],
) -> Result<ConvGeom> {
    let [b, ci, d, h, w] = dims5(input, "conv3d", "input")?;
    let [co, ci_k, kd, kh, kw] = dims5(kernel, "conv3d", "kernel")?;
    if ci != ci_k {
        return Err(CunetError::ShapeMismatch {
            op: "conv3d",
            detail: format!("channel axis: input has {ci} channels, kernel expects {ci_k}"),
        });
    }
    if bias.shape() != [co] {
        return Err(CunetError::ShapeMismatch {
            op: "conv3d",
            detail: format!("bias axis: expected shape [{co}], got {:?}", bias.shape()),
        });
    }
    for (axis, &s) in stride.iter().enumerate() {
        if s == 0 || dilation[axis] == 0 {
            return Err(CunetError::InvalidArgument {
                op: "conv3d",
                detail: format!("stride and dilation must be positive on the {} axis", AXES[axis]),
            });
        }
    }
    let in_sp = [d, h, w];
    let k = [kd, kh, kw];
    let mut out_sp = [0usize; 3];
    for axis in 0..3 {
        let padded = in_sp[axis] + 2 * padding[axis];
        let dilated = dilation[axis] * (k[axis] - 1) + 1;
        if padded < dilated {
            return Err(CunetError::EmptyOutput {
                op: "conv3d",
                detail: format!(
                    "{} axis: padded extent {padded} is smaller than dilated kernel extent {dilated}",
                    AXES[axis]
                ),
            });
        }
        out_sp[axis] = (padded - dilated) / stride[axis] + 1;
    }
    Ok(ConvGeom {
        b,
        ci,
        co,
        in_sp,
        k,
        out_sp,
        stride,
        dilation,
        padding,
    })
}

/// out[od, oh, ow] += w * in[od*s - p + koff, ...] over the valid range.
#[inline]
fn axpy_patch(g: &ConvGeom, out_slice: &mut [f64], in_slice: &[f64], wgt: f64, koff: [usize; 3]) {
    let Some((d_lo, d_hi)) = g.valid_out_range(0, koff[0]) else {
        return;
    };
    let Some((h_lo, h_hi)) = g.valid_out_range(1, koff[1]) else {
        return;
    };
    let Some((w_lo, w_hi)) = g.valid_out_range(2, koff[2]) else {
        return;
    };
    let (sd, sh, sw) = (g.stride[0], g.stride[1], g.stride[2]);
    let shift = |axis: usize| (koff[axis] * g.dilation[axis]) as i64 - g.padding[axis] as i64;
    let (fd, fh, fw) = (shift(0), shift(1), shift(2));
    let (ih_stride, iw_stride) = (g.in_sp[2], 1usize);
    let n_w = w_hi - w_lo + 1;
    for od in d_lo..=d_hi {
        let id = (od as i64 * sd as i64 + fd) as usize;
        for oh in h_lo..=h_hi {
            let ih = (oh as i64 * sh as i64 + fh) as usize;
            let out_row = (od * g.out_sp[1] + oh) * g.out_sp[2];
            let in_row = id * g.in_sp[1] * g.in_sp[2] + ih * ih_stride;
            let iw0 = (w_lo as i64 * sw as i64 + fw) as usize;
            if sw == 1 {
                let dst = &mut out_slice[out_row + w_lo..out_row + w_lo + n_w];
                let src = &in_slice[in_row + iw0..in_row + iw0 + n_w];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o += wgt * x;
                }
            } else {
                for j in 0..n_w {
                    out_slice[out_row + w_lo + j] +=
                        wgt * in_slice[in_row + iw0 + j * sw * iw_stride];
                }
            }
        }
    }
}

/// in[od*s - p + koff, ...] += w * out[od, oh, ow]: the transpose of
/// [`axpy_patch`], used for the input gradient.
#[inline]
fn axpy_patch_t(g: &ConvGeom, in_slice: &mut [f64], out_slice: &[f64], wgt: f64, koff: [usize; 3]) {
    let Some((d_lo, d_hi)) = g.valid_out_range(0, koff[0]) else {
        return;
    };
    let Some((h_lo, h_hi)) = g.valid_out_range(1, koff[1]) else {
        return;
    };
    let Some((w_lo, w_hi)) = g.valid_out_range(2, koff[2]) else {
        return;
    };
    let (sd, sh, sw) = (g.stride[0], g.stride[1], g.stride[2]);
    let shift = |axis: usize| (koff[axis] * g.dilation[axis]) as i64 - g.padding[axis] as i64;
    let (fd, fh, fw) = (shift(0), shift(1), shift(2));
    let n_w = w_hi - w_lo + 1;
    for od in d_lo..=d_hi {
        let id = (od as i64 * sd as i64 + fd) as usize;
        for oh in h_lo..=h_hi {
            let ih = (oh as i64 * sh as i64 + fh) as usize;
            let out_row = (od * g.out_sp[1] + oh) * g.out_sp[2];
            let in_row = (id * g.in_sp[1] + ih) * g.in_sp[2];
            let iw0 = (w_lo as i64 * sw as i64 + fw) as usize;
            if sw == 1 {
                let dst = &mut in_slice[in_row + iw0..in_row + iw0 + n_w];
                let src = &out_slice[out_row + w_lo..out_row + w_lo + n_w];
                for (i, &go) in dst.iter_mut().zip(src) {
                    *i += wgt * go;
                }
            } else {
                for j in 0..n_w {
                    in_slice[in_row + iw0 + j * sw] += wgt * out_slice[out_row + w_lo + j];
                }
            }
        }
    }
}

/// dot of out grad and shifted input over the valid range, for the kernel
/// gradient.
#[inline]
fn patch_dot(g: &ConvGeom, go_slice: &[f64], in_slice: &[f64], koff: [usize; 3]) -> f64 {
    let Some((d_lo, d_hi)) = g.valid_out_range(0, koff[0]) else {
        return 0.0;
    };
    let Some((h_lo, h_hi)) = g.valid_out_range(1, koff[1]) else {
        return 0.0;
    };
    let Some((w_lo, w_hi)) = g.valid_out_range(2, koff[2]) else {
        return 0.0;
    };
    let (sd, sh, sw) = (g.stride[0], g.stride[1], g.stride[2]);
    let shift = |axis: usize| (koff[axis] * g.dilation[axis]) as i64 - g.padding[axis] as i64;
    let (fd, fh, fw) = (shift(0), shift(1), shift(2));
    let n_w = w_hi - w_lo + 1;
    let mut acc = 0.0;
    for od in d_lo..=d_hi {
        let id = (od as i64 * sd as i64 + fd) as usize;
        for oh in h_lo..=h_hi {
            let ih = (oh as i64 * sh as i64 + fh) as usize;
            let out_row = (od * g.out_sp[1] + oh) * g.out_sp[2];
            let in_row = (id * g.in_sp[1] + ih) * g.in_sp[2];
            let iw0 = (w_lo as i64 * sw as i64 + fw) as usize;
            if sw == 1 {
                let a = &go_slice[out_row + w_lo..out_row + w_lo + n_w];
                let b = &in_slice[in_row + iw0..in_row + iw0 + n_w];
                for (&x, &y) in a.iter().zip(b) {
                    acc += x * y;
                }
            } else {
                for j in 0..n_w {
                    acc += go_slice[out_row + w_lo + j] * in_slice[in_row + iw0 + j * sw];
                }
            }
        }
    }
    acc
}

fn forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let (in_vol, out_vol) = (g.in_vol(), g.out_vol());
    let mut out = vec![0.0; g.b * g.co * out_vol];
    let run = |chunk_idx: usize, out_slice: &mut [f64]| {
        let (bi, co) = (chunk_idx / g.co, chunk_idx % g.co);
        out_slice.fill(bias[co]);
        for ci in 0..g.ci {
            let in_slice = &input[(bi * g.ci + ci) * in_vol..(bi * g.ci + ci + 1) * in_vol];
            for kd in 0..g.k[0] {
                for kh in 0..g.k[1] {
                    for kw in 0..g.k[2] {
                        let wgt = kernel[((co * g.ci + ci) * g.k[0] + kd) * g.k[1] * g.k[2]
                            + kh * g.k[2]
                            + kw];
                        axpy_patch(g, out_slice, in_slice, wgt, [kd, kh, kw]);
                    }
                }
            }
        }
    };
    if g.macs() >= PAR_THRESHOLD {
        pool().install(|| {
            out.par_chunks_mut(out_vol)
                .enumerate()
                .for_each(|(i, c)| run(i, c));
        });
    } else {
        out.chunks_mut(out_vol).enumerate().for_each(|(i, c)| run(i, c));
    }
    out
}

fn grad_input(g: &ConvGeom, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (in_vol, out_vol) = (g.in_vol(), g.out_vol());
    let mut gi = vec![0.0; g.b * g.ci * in_vol];
    let run = |chunk_idx: usize, gi_slice: &mut [f64]| {
        let (bi, ci) = (chunk_idx / g.ci, chunk_idx % g.ci);
        for co in 0..g.co {
            let go_slice = &grad_out[(bi * g.co + co) * out_vol..(bi * g.co + co + 1) * out_vol];
            for kd in 0..g.k[0] {
                for kh in 0..g.k[1] {
                    for kw in 0..g.k[2] {
                        let wgt = kernel[((co * g.ci + ci) * g.k[0] + kd) * g.k[1] * g.k[2]
                            + kh * g.k[2]
                            + kw];
                        axpy_patch_t(g, gi_slice, go_slice, wgt, [kd, kh, kw]);
                    }
                }
            }
        }
    };
    if g.macs() >= PAR_THRESHOLD {
        pool().install(|| {
            gi.par_chunks_mut(in_vol)
                .enumerate()
                .for_each(|(i, c)| run(i, c));
        });
    } else {
        gi.chunks_mut(in_vol).enumerate().for_each(|(i, c)| run(i, c));
    }
    gi
}

fn grad_kernel(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let (in_vol, out_vol, k_vol) = (g.in_vol(), g.out_vol(), g.k_vol());
    let mut gk = vec![0.0; g.co * g.ci * k_vol];
    let run = |co: usize, gk_slice: &mut [f64]| {
        for ci in 0..g.ci {
            for kd in 0..g.k[0] {
                for kh in 0..g.k[1] {
                    for kw in 0..g.k[2] {
                        let mut acc = 0.0;
                        for bi in 0..g.b {
                            let go_slice = &grad_out
                                [(bi * g.co + co) * out_vol..(bi * g.co + co + 1) * out_vol];
                            let in_slice =
                                &input[(bi * g.ci + ci) * in_vol..(bi * g.ci + ci + 1) * in_vol];
                            acc += patch_dot(g, go_slice, in_slice, [kd, kh, kw]);
                        }
                        gk_slice[ci * k_vol + (kd * g.k[1] + kh) * g.k[2] + kw] = acc;
                    }
                }
            }
        }
    };
    if g.macs() >= PAR_THRESHOLD {
        pool().install(|| {
            gk.par_chunks_mut(g.ci * k_vol)
                .enumerate()
                .for_each(|(i, c)| run(i, c));
        });
    } else {
        gk.chunks_mut(g.ci * k_vol).enumerate().for_each(|(i, c)| run(i, c));
    }
    gk
}

fn grad_bias(g: &ConvGeom, grad_out: &[f64]) -> Vec<f64> {
    let out_vol = g.out_vol();
    let mut gb = vec![0.0; g.co];
    for bi in 0..g.b {
        for (co, gbv) in gb.iter_mut().enumerate() {
            let s: f64 = grad_out[(bi * g.co + co) * out_vol..(bi * g.co + co + 1) * out_vol]
                .iter()
                .sum();
            *gbv += s;
        }
    }
    gb
}

/// 3D convolution of a [b, ci, d, h, w] input with a [co, ci, kd, kh, kw]
/// kernel and per-channel bias. Zero padding; output extent along an axis is
/// floor((in + 2*pad - dilation*(k-1) - 1)/stride) + 1. Differentiable with
/// respect to input, kernel, and bias.
pub fn conv3d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: [usize; 3],
    dilation: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, bias, stride, dilation, padding)?;
    let out = forward(&g, input.data(), kernel.data(), bias.data());
    let shape = vec![g.b, g.co, g.out_sp[0], g.out_sp[1], g.out_sp[2]];
    if !crate::tensor::any_grad(&[input, kernel, bias]) {
        return Ok(Tensor::from_forward("conv3d", shape, out));
    }
    let needs = [input.requires_grad(), kernel.requires_grad(), bias.requires_grad()];
    Ok(Tensor::from_op(
        "conv3d",
        shape,
        out,
        vec![input.clone(), kernel.clone(), bias.clone()],
        Box::new(move |go, inputs| {
            let (x, k) = (inputs[0].data(), inputs[1].data());
            vec![
                needs[0].then(|| grad_input(&g, go, k)),
                needs[1].then(|| grad_kernel(&g, go, x)),
                needs[2].then(|| grad_bias(&g, go)),
            ]
        }),
    ))
}
