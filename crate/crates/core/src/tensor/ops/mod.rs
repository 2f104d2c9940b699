//! Differentiable operations. Every op validates shapes up front, computes
//! the forward value, and (when any input tracks gradients) records a tape
//! node with its backward rule.

mod conv3d;
mod norm;
mod pool;
mod resize;

pub use conv3d::conv3d;
pub use norm::instance_norm;
pub use pool::maxpool3d;
pub use resize::upsample3d_trilinear;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use super::{any_grad, InputGrads, Tensor};
use crate::error::{CunetError, Result};

pub(crate) fn dims5(t: &Tensor, op: &'static str, what: &str) -> Result<[usize; 5]> {
    let s = t.shape();
    if s.len() != 5 {
        return Err(CunetError::ShapeMismatch {
            op,
            detail: format!("{what} must be rank 5, got shape {s:?}"),
        });
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

/// Elementwise max(x, 0). Backward passes gradient only where input > 0.
pub fn relu(input: &Tensor) -> Tensor {
    let data: Vec<f64> = input.data().iter().map(|&v| v.max(0.0)).collect();
    if !input.requires_grad() {
        return Tensor::from_forward("relu", input.shape().to_vec(), data);
    }
    Tensor::from_op(
        "relu",
        input.shape().to_vec(),
        data,
        vec![input.clone()],
        Box::new(|g, inputs| {
            let x = inputs[0].data();
            let gi = g
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect();
            vec![Some(gi)]
        }),
    )
}

/// Elementwise a + b (identical shapes).
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(CunetError::ShapeMismatch {
            op: "add",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    if !any_grad(&[a, b]) {
        return Ok(Tensor::from_forward("add", a.shape().to_vec(), data));
    }
    let needs = [a.requires_grad(), b.requires_grad()];
    Ok(Tensor::from_op(
        "add",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let mk = |n: bool| if n { Some(g.to_vec()) } else { None };
            vec![mk(needs[0]), mk(needs[1])]
        }),
    ))
}

/// Elementwise a * b (identical shapes).
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(CunetError::ShapeMismatch {
            op: "mul",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    if !any_grad(&[a, b]) {
        return Ok(Tensor::from_forward("mul", a.shape().to_vec(), data));
    }
    let needs = [a.requires_grad(), b.requires_grad()];
    Ok(Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, inputs| {
            let (xa, xb) = (inputs[0].data(), inputs[1].data());
            let ga = needs[0].then(|| g.iter().zip(xb).map(|(g, v)| g * v).collect());
            let gb = needs[1].then(|| g.iter().zip(xa).map(|(g, v)| g * v).collect());
            vec![ga, gb]
        }),
    ))
}

/// Multiply by a constant.
pub fn scale(input: &Tensor, k: f64) -> Tensor {
    let data: Vec<f64> = input.data().iter().map(|&v| v * k).collect();
    if !input.requires_grad() {
        return Tensor::from_forward("scale", input.shape().to_vec(), data);
    }
    Tensor::from_op(
        "scale",
        input.shape().to_vec(),
        data,
        vec![input.clone()],
        Box::new(move |g, _| vec![Some(g.iter().map(|v| v * k).collect())]),
    )
}

/// Sum of all elements, as a rank-0 scalar.
pub fn sum_all(input: &Tensor) -> Tensor {
    let s: f64 = input.data().iter().sum();
    if !input.requires_grad() {
        return Tensor::from_forward("sum_all", vec![], vec![s]);
    }
    let n = input.numel();
    Tensor::from_op(
        "sum_all",
        vec![],
        vec![s],
        vec![input.clone()],
        Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
    )
}

/// Inverted dropout. In training mode each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate); in eval mode this is the
/// identity and consumes no randomness.
pub fn dropout(input: &Tensor, rate: f64, rng: &mut ChaCha8Rng, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(CunetError::InvalidArgument {
            op: "dropout",
            detail: format!("rate must be in [0, 1), got {rate}"),
        });
    }
    if !training || rate == 0.0 {
        return Ok(input.clone());
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mask: Rc<Vec<f64>> = Rc::new(
        (0..input.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect(),
    );
    let data: Vec<f64> = input.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
    if !input.requires_grad() {
        return Ok(Tensor::from_forward("dropout", input.shape().to_vec(), data));
    }
    Ok(Tensor::from_op(
        "dropout",
        input.shape().to_vec(),
        data,
        vec![input.clone()],
        Box::new(move |g, _| vec![Some(g.iter().zip(mask.iter()).map(|(g, m)| g * m).collect())]),
    ))
}

/// Softmax over the channel axis of a [b, c, d, h, w] tensor. Output sums to
/// one over channels at every voxel.
pub fn softmax_channels(input: &Tensor) -> Result<Tensor> {
    let [b, c, d, h, w] = dims5(input, "softmax_channels", "input")?;
    let vol = d * h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let base = bi * c * vol;
        for v in 0..vol {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(x[base + ci * vol + v]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                let e = (x[base + ci * vol + v] - m).exp();
                out[base + ci * vol + v] = e;
                z += e;
            }
            for ci in 0..c {
                out[base + ci * vol + v] /= z;
            }
        }
    }
    if !input.requires_grad() {
        return Ok(Tensor::from_forward("softmax_channels", input.shape().to_vec(), out));
    }
    let y = Rc::new(out);
    let saved = Rc::clone(&y);
    Ok(Tensor::from_op_shared(
        "softmax_channels",
        input.shape().to_vec(),
        y,
        vec![input.clone()],
        Box::new(move |g, _| {
            let y = &*saved;
            let mut gi = vec![0.0; y.len()];
            for bi in 0..b {
                let base = bi * c * vol;
                for v in 0..vol {
                    let mut dot = 0.0;
                    for ci in 0..c {
                        let i = base + ci * vol + v;
                        dot += g[i] * y[i];
                    }
                    for ci in 0..c {
                        let i = base + ci * vol + v;
                        gi[i] = y[i] * (g[i] - dot);
                    }
                }
            }
            vec![Some(gi)]
        }),
    ))
}

/// Concatenate along the channel axis. All non-channel extents must agree.
pub fn concat(tensors: &[&Tensor]) -> Result<Tensor> {
    if tensors.is_empty() {
        return Err(CunetError::InvalidArgument {
            op: "concat",
            detail: "empty tensor list".into(),
        });
    }
    let first = dims5(tensors[0], "concat", "input 0")?;
    let mut channels = vec![first[1]];
    for (i, t) in tensors.iter().enumerate().skip(1) {
        let d = dims5(t, "concat", "input")?;
        if [d[0], d[2], d[3], d[4]] != [first[0], first[2], first[3], first[4]] {
            return Err(CunetError::ShapeMismatch {
                op: "concat",
                detail: format!(
                    "input {i} shape {:?} differs from input 0 {:?} outside the channel axis",
                    t.shape(),
                    tensors[0].shape()
                ),
            });
        }
        channels.push(d[1]);
    }
    let (b, vol) = (first[0], first[2] * first[3] * first[4]);
    let c_total: usize = channels.iter().sum();
    let mut out = vec![0.0; b * c_total * vol];
    for bi in 0..b {
        let mut c_off = 0;
        for (t, &ci) in tensors.iter().zip(&channels) {
            let src = &t.data()[bi * ci * vol..(bi + 1) * ci * vol];
            let dst_start = (bi * c_total + c_off) * vol;
            out[dst_start..dst_start + ci * vol].copy_from_slice(src);
            c_off += ci;
        }
    }
    let shape = vec![b, c_total, first[2], first[3], first[4]];
    if !tensors.iter().any(|t| t.requires_grad()) {
        return Ok(Tensor::from_forward("concat", shape, out));
    }
    let needs: Vec<bool> = tensors.iter().map(|t| t.requires_grad()).collect();
    let chans = channels.clone();
    Ok(Tensor::from_op(
        "concat",
        shape,
        out,
        tensors.iter().map(|t| (*t).clone()).collect(),
        Box::new(move |g, _| {
            let mut grads: InputGrads = Vec::with_capacity(chans.len());
            let mut c_off = 0;
            for (k, &ci) in chans.iter().enumerate() {
                if needs[k] {
                    let mut gi = vec![0.0; b * ci * vol];
                    for bi in 0..b {
                        let src_start = (bi * c_total + c_off) * vol;
                        gi[bi * ci * vol..(bi + 1) * ci * vol]
                            .copy_from_slice(&g[src_start..src_start + ci * vol]);
                    }
                    grads.push(Some(gi));
                } else {
                    grads.push(None);
                }
                c_off += ci;
            }
            grads
        }),
    ))
}

/// Channel range [from, to) of a [b, c, d, h, w] tensor.
pub fn channel_slice(input: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let [b, c, d, h, w] = dims5(input, "channel_slice", "input")?;
    if from >= to || to > c {
        return Err(CunetError::InvalidArgument {
            op: "channel_slice",
            detail: format!("range {from}..{to} invalid for {c} channels"),
        });
    }
    let vol = d * h * w;
    let cs = to - from;
    let mut out = vec![0.0; b * cs * vol];
    for bi in 0..b {
        let src_start = (bi * c + from) * vol;
        out[bi * cs * vol..(bi + 1) * cs * vol]
            .copy_from_slice(&input.data()[src_start..src_start + cs * vol]);
    }
    let shape = vec![b, cs, d, h, w];
    if !input.requires_grad() {
        return Ok(Tensor::from_forward("channel_slice", shape, out));
    }
    let full = input.numel();
    Ok(Tensor::from_op(
        "channel_slice",
        shape,
        out,
        vec![input.clone()],
        Box::new(move |g, _| {
            let mut gi = vec![0.0; full];
            for bi in 0..b {
                let dst_start = (bi * c + from) * vol;
                gi[dst_start..dst_start + cs * vol]
                    .copy_from_slice(&g[bi * cs * vol..(bi + 1) * cs * vol]);
            }
            vec![Some(gi)]
        }),
    ))
}
