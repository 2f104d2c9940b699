//! Direct-sum convolution oracle: seven nested loops, no shared code with the
//! engine's kernel.

use cunet_core::tensor::ops::conv3d;
use cunet_core::util::seeded_rng;
use cunet_core::Tensor;
use rand::Rng;

#[allow(clippy::too_many_arguments)]
fn naive_conv3d(
    input: &[f64],
    in_shape: [usize; 5],
    kernel: &[f64],
    k_shape: [usize; 5],
    bias: &[f64],
    stride: [usize; 3],
    dilation: [usize; 3],
    padding: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [b, ci, d, h, w] = in_shape;
    let [co, _, kd, kh, kw] = k_shape;
    let out_extent = |n: usize, k: usize, axis: usize| {
        (n + 2 * padding[axis] - dilation[axis] * (k - 1) - 1) / stride[axis] + 1
    };
    let (od, oh, ow) = (out_extent(d, kd, 0), out_extent(h, kh, 1), out_extent(w, kw, 2));
    let mut out = vec![0.0; b * co * od * oh * ow];
    for bi in 0..b {
        for oc in 0..co {
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut acc = bias[oc];
                        for ic in 0..ci {
                            for fd in 0..kd {
                                for fh in 0..kh {
                                    for fw in 0..kw {
                                        let id = (zd * stride[0] + fd * dilation[0]) as i64
                                            - padding[0] as i64;
                                        let ih = (zh * stride[1] + fh * dilation[1]) as i64
                                            - padding[1] as i64;
                                        let iw = (zw * stride[2] + fw * dilation[2]) as i64
                                            - padding[2] as i64;
                                        if id < 0
                                            || ih < 0
                                            || iw < 0
                                            || id >= d as i64
                                            || ih >= h as i64
                                            || iw >= w as i64
                                        {
                                            continue;
                                        }
                                        let x = input[(((bi * ci + ic) * d + id as usize) * h
                                            + ih as usize)
                                            * w
                                            + iw as usize];
                                        let kv = kernel[(((oc * ci + ic) * kd + fd) * kh + fh)
                                            * kw
                                            + fw];
                                        acc += x * kv;
                                    }
                                }
                            }
                        }
                        out[(((bi * co + oc) * od + zd) * oh + zh) * ow + zw] = acc;
                    }
                }
            }
        }
    }
    (out, [b, co, od, oh, ow])
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv3d_matches_oracle_on_spec_example() {
    let mut rng = seeded_rng(100, "conv-oracle");
    let in_shape = [1usize, 2, 6, 6, 6];
    let k_shape = [3usize, 2, 3, 3, 3];
    let input: Vec<f64> = (0..in_shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let kernel: Vec<f64> = (0..k_shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let bias: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let (expect, out_shape) = naive_conv3d(
        &input, in_shape, &kernel, k_shape, &bias, [1; 3], [2; 3], [2; 3],
    );
    let y = conv3d(
        &Tensor::from_vec(input, &in_shape).unwrap(),
        &Tensor::from_vec(kernel, &k_shape).unwrap(),
        &Tensor::from_vec(bias, &[3]).unwrap(),
        [1; 3],
        [2; 3],
        [2; 3],
    )
    .unwrap();
    assert_eq!(y.shape(), &out_shape);
    let diff = max_abs_diff(y.data(), &expect);
    assert!(diff < 1e-9, "max abs diff {diff}");
}

#[test]
fn conv3d_matches_oracle_on_exhaustive_grid() {
    // Input 12^3 keeps every (stride, dilation, padding) combination valid:
    // the largest dilated kernel extent is 2*5+1 = 11 <= 12.
    let mut rng = seeded_rng(101, "conv-oracle-grid");
    let in_shape = [1usize, 2, 12, 12, 12];
    let k_shape = [2usize, 2, 3, 3, 3];
    let input: Vec<f64> = (0..in_shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let kernel: Vec<f64> = (0..k_shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let bias: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let xt = Tensor::from_vec(input.clone(), &in_shape).unwrap();
    let kt = Tensor::from_vec(kernel.clone(), &k_shape).unwrap();
    let bt = Tensor::from_vec(bias.clone(), &[2]).unwrap();

    for stride in [1usize, 2] {
        for dilation in [1usize, 2, 3, 5] {
            for padding in [0usize, 1, 2] {
                let (expect, out_shape) = naive_conv3d(
                    &input,
                    in_shape,
                    &kernel,
                    k_shape,
                    &bias,
                    [stride; 3],
                    [dilation; 3],
                    [padding; 3],
                );
                let y = conv3d(&xt, &kt, &bt, [stride; 3], [dilation; 3], [padding; 3])
                    .unwrap_or_else(|e| {
                        panic!("stride {stride} dilation {dilation} padding {padding}: {e}")
                    });
                assert_eq!(
                    y.shape(),
                    &out_shape,
                    "shape for stride {stride} dilation {dilation} padding {padding}"
                );
                let diff = max_abs_diff(y.data(), &expect);
                assert!(
                    diff < 1e-9,
                    "stride {stride} dilation {dilation} padding {padding}: max abs diff {diff}"
                );
            }
        }
    }
}
