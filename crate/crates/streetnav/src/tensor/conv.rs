//! 2-D convolution and its transpose on the tape.
//!
//! `conv2d` is cross-correlation with implicit zero padding. `deconv2d` is
//! defined as the exact adjoint of `conv2d` under the Frobenius inner
//! product: for any `x`, `y` of matching shapes and the same kernel,
//! stride, and padding, `⟨conv2d(x,K), y⟩ = ⟨x, deconv2d(y,K)⟩`. The same
//! three raw kernels below therefore serve both forward passes and both
//! backward passes.

use super::{BackwardFn, Tensor, TensorError, TensorResult};

/// Output spatial size of a convolution, or an error if the stride does not
/// divide evenly.
pub fn conv2d_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: "kernel and stride must be positive".into(),
        });
    }
    if padded < kernel {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!("kernel {kernel} exceeds padded input {padded}"),
        });
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!(
                "non-integral output size: ({input} + 2·{padding} − {kernel}) not divisible by {stride}"
            ),
        });
    }
    Ok(span / stride + 1)
}

/// Output spatial size of a transposed convolution.
pub fn deconv2d_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    let grown = (input - 1) * stride + kernel;
    if grown <= 2 * padding {
        return Err(TensorError::Invalid {
            op: "deconv2d",
            msg: format!(
                "padding {padding} swallows the whole output ((({input}−1)·{stride} + {kernel}) ≤ 2·{padding})"
            ),
        });
    }
    Ok(grown - 2 * padding)
}

struct Dims {
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

/// Valid output-coordinate range `[lo, hi)` such that
/// `o·stride + k − padding` stays inside `[0, input)`.
fn out_range(input: usize, out: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let k = k as i64;
    let pad = padding as i64;
    let s = stride as i64;
    let lo = (pad - k + s - 1).div_euclid(s).max(0);
    let hi = ((input as i64 - 1 + pad - k).div_euclid(s) + 1).min(out as i64);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn conv_forward(x: &[f64], k: &[f64], d: &Dims) -> Vec<f64> {
    let mut out = vec![0.0; d.c_out * d.ho * d.wo];
    for oc in 0..d.c_out {
        for ic in 0..d.c_in {
            let x_base = ic * d.h * d.w;
            for ky in 0..d.kh {
                let (oy_lo, oy_hi) = out_range(d.h, d.ho, ky, d.stride, d.padding);
                for kx in 0..d.kw {
                    let kv = k[((oc * d.c_in + ic) * d.kh + ky) * d.kw + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = out_range(d.w, d.wo, kx, d.stride, d.padding);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * d.stride + ky - d.padding;
                        let xrow = x_base + iy * d.w;
                        let orow = (oc * d.ho + oy) * d.wo;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * d.stride + kx - d.padding;
                            out[orow + ox] += kv * x[xrow + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatters an output-space gradient back to input space; also the forward
/// pass of the transposed convolution.
fn conv_grad_input(gy: &[f64], k: &[f64], d: &Dims) -> Vec<f64> {
    let mut gx = vec![0.0; d.c_in * d.h * d.w];
    for oc in 0..d.c_out {
        for ic in 0..d.c_in {
            let x_base = ic * d.h * d.w;
            for ky in 0..d.kh {
                let (oy_lo, oy_hi) = out_range(d.h, d.ho, ky, d.stride, d.padding);
                for kx in 0..d.kw {
                    let kv = k[((oc * d.c_in + ic) * d.kh + ky) * d.kw + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = out_range(d.w, d.wo, kx, d.stride, d.padding);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * d.stride + ky - d.padding;
                        let xrow = x_base + iy * d.w;
                        let orow = (oc * d.ho + oy) * d.wo;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * d.stride + kx - d.padding;
                            gx[xrow + ix] += kv * gy[orow + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv_grad_kernel(x: &[f64], gy: &[f64], d: &Dims) -> Vec<f64> {
    let mut gk = vec![0.0; d.c_out * d.c_in * d.kh * d.kw];
    for oc in 0..d.c_out {
        for ic in 0..d.c_in {
            let x_base = ic * d.h * d.w;
            for ky in 0..d.kh {
                let (oy_lo, oy_hi) = out_range(d.h, d.ho, ky, d.stride, d.padding);
                for kx in 0..d.kw {
                    let (ox_lo, ox_hi) = out_range(d.w, d.wo, kx, d.stride, d.padding);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * d.stride + ky - d.padding;
                        let xrow = x_base + iy * d.w;
                        let orow = (oc * d.ho + oy) * d.wo;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * d.stride + kx - d.padding;
                            acc += gy[orow + ox] * x[xrow + ix];
                        }
                    }
                    gk[((oc * d.c_in + ic) * d.kh + ky) * d.kw + kx] += acc;
                }
            }
        }
    }
    gk
}

fn check_shapes(
    op: &'static str,
    x_shape: &[usize],
    k_shape: &[usize],
    input_channel_axis: usize,
) -> Result<(), TensorError> {
    if x_shape.len() != 3 {
        return Err(TensorError::BadRank {
            op,
            expected: 3,
            shape: x_shape.to_vec(),
        });
    }
    if k_shape.len() != 4 {
        return Err(TensorError::BadRank {
            op,
            expected: 4,
            shape: k_shape.to_vec(),
        });
    }
    if x_shape[0] != k_shape[input_channel_axis] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x_shape.to_vec(),
            rhs: k_shape.to_vec(),
        });
    }
    Ok(())
}

pub(super) fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> TensorResult {
    let xs = x.shape();
    let ks = kernel.shape();
    check_shapes("conv2d", &xs, &ks, 1)?;
    let ho = conv2d_out_dim(xs[1], ks[2], stride, padding)?;
    let wo = conv2d_out_dim(xs[2], ks[3], stride, padding)?;
    let dims = Dims {
        c_out: ks[0],
        c_in: ks[1],
        kh: ks[2],
        kw: ks[3],
        h: xs[1],
        w: xs[2],
        ho,
        wo,
        stride,
        padding,
    };
    let data = conv_forward(&x.data(), &kernel.data(), &dims);
    let requires = x.requires_grad() || kernel.requires_grad();
    let backward: BackwardFn = Box::new(move |ctx| {
        let (xv, _) = ctx.parents[0];
        let (kv, _) = ctx.parents[1];
        vec![
            conv_grad_input(ctx.grad, kv, &dims),
            conv_grad_kernel(xv, ctx.grad, &dims),
        ]
    });
    Ok(x.push_on_tape(
        vec![ks[0], ho, wo],
        data,
        vec![x.node_index(), kernel.node_index()],
        requires,
        Some(backward),
    ))
}

pub(super) fn deconv2d(
    y: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> TensorResult {
    let ys = y.shape();
    let ks = kernel.shape();
    // The deconv input plays the conv *output* role, so its channel count
    // must match the kernel's output axis.
    check_shapes("deconv2d", &ys, &ks, 0)?;
    let h = deconv2d_out_dim(ys[1], ks[2], stride, padding)?;
    let w = deconv2d_out_dim(ys[2], ks[3], stride, padding)?;
    let dims = Dims {
        c_out: ks[0],
        c_in: ks[1],
        kh: ks[2],
        kw: ks[3],
        h,
        w,
        ho: ys[1],
        wo: ys[2],
        stride,
        padding,
    };
    let data = conv_grad_input(&y.data(), &kernel.data(), &dims);
    let requires = y.requires_grad() || kernel.requires_grad();
    let backward: BackwardFn = Box::new(move |ctx| {
        let (yv, _) = ctx.parents[0];
        let (kv, _) = ctx.parents[1];
        // Adjointness makes the backward passes swap roles: the gradient of
        // the deconv output is convolved forward, and the kernel gradient
        // correlates that gradient with the deconv input.
        vec![
            conv_forward(ctx.grad, kv, &dims),
            conv_grad_kernel(ctx.grad, yv, &dims),
        ]
    });
    Ok(y.push_on_tape(
        vec![ks[1], h, w],
        data,
        vec![y.node_index(), kernel.node_index()],
        requires,
        Some(backward),
    ))
}

#[cfg(test)]
mod tests {
    use crate::tensor::{backward, Tape, TensorError};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_preserves_input() {
        let tape = Tape::new();
        let x = tape
            .leaf(&[1, 3, 3], (1..=9).map(|v| v as f64).collect())
            .unwrap();
        let k = tape.leaf(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn hand_dot_product() {
        let tape = Tape::new();
        let x = tape.leaf(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = tape.leaf(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1]);
        assert_eq!(y.data(), vec![5.0]);
    }

    #[test]
    fn five_by_five_pad_two_preserves_shape() {
        let tape = Tape::new();
        let x = tape.zeros(&[2, 7, 9]);
        let k = tape.zeros(&[3, 2, 5, 5]);
        let y = x.conv2d(&k, 1, 2).unwrap();
        assert_eq!(y.shape(), vec![3, 7, 9]);
        let d = tape.zeros(&[3, 7, 9]);
        let back = d.deconv2d(&k, 1, 2).unwrap();
        assert_eq!(back.shape(), vec![2, 7, 9]);
    }

    #[test]
    fn non_integral_output_rejected() {
        let tape = Tape::new();
        let x = tape.zeros(&[1, 5, 5]);
        let k = tape.zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            x.conv2d(&k, 2, 0),
            Err(TensorError::Invalid { op: "conv2d", .. })
        ));
    }

    #[test]
    fn deconv_one_by_one_kernel_scales() {
        let tape = Tape::new();
        let y = tape.leaf(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = tape.leaf(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let out = y.deconv2d(&k, 1, 0).unwrap();
        assert_eq!(out.data(), vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn adjoint_identity_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..40 {
            let (ci, co) = (1 + case % 3, 1 + (case / 3) % 3);
            let (h, w) = (4 + case % 3, 4 + (case / 5) % 4);
            let (kh, kw) = (1 + case % 3, 1 + (case / 2) % 3);
            let stride = 1 + case % 2;
            let padding = case % 2;
            let tape = Tape::new();
            let ho = match super::conv2d_out_dim(h, kh, stride, padding) {
                Ok(v) => v,
                Err(_) => continue,
            };
            let wo = match super::conv2d_out_dim(w, kw, stride, padding) {
                Ok(v) => v,
                Err(_) => continue,
            };
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            let x = tape.leaf(&[ci, h, w], draw(ci * h * w)).unwrap();
            let k = tape.leaf(&[co, ci, kh, kw], draw(co * ci * kh * kw)).unwrap();
            let y = tape.leaf(&[co, ho, wo], draw(co * ho * wo)).unwrap();
            let cx = x.conv2d(&k, stride, padding).unwrap();
            let dy = y.deconv2d(&k, stride, padding).unwrap();
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() < 1e-10,
                "adjoint violated: {lhs} vs {rhs} (case {case})"
            );
        }
    }

    #[test]
    fn strided_conv_shape() {
        let tape = Tape::new();
        let x = tape.zeros(&[1, 20, 20]);
        let k = tape.zeros(&[32, 1, 8, 8]);
        let y = x.conv2d(&k, 4, 0).unwrap();
        assert_eq!(y.shape(), vec![32, 4, 4]);
    }

    #[test]
    fn conv_gradients_accumulate_through_sum() {
        // Constant-one input and kernel: d(sum y)/dk_i = number of valid
        // input positions each tap touches.
        let tape = Tape::new();
        let x = tape.leaf(&[1, 3, 3], vec![1.0; 9]).unwrap();
        let k = tape.leaf(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = x.conv2d(&k, 1, 0).unwrap(); // single output position
        let loss = y.sum();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.get(&k).unwrap(), &[1.0; 9][..]);
        assert_eq!(grads.get(&x).unwrap(), &[1.0; 9][..]);
    }
}
