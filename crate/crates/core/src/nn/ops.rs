//! Tape primitives for the layer zoo: im2col convolution, batch
//! normalization (full batch-statistics backward in training mode), max
//! pooling, and mask-recording dropout.

use rand::Rng;

use crate::autograd::{BackFn, Tape, Var};
use crate::tensor::{col2im, conv_out_extent, im2col, Scalar, Tensor, TensorError};

/// 2-D convolution, weight layout `[out, in, kh, kw]`, no bias here (bias, when
/// present, is added by the caller). Forward runs im2col + gemm; backward
/// recomputes the patch matrix instead of caching it.
pub fn conv2d_op<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    stride: usize,
    padding: usize,
) -> Result<Var, TensorError> {
    let (xv, wv) = (tape.value(x), tape.value(w));
    if xv.rank() != 4 || wv.rank() != 4 {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d expects rank-4 input and weight, got {:?} and {:?}",
            xv.shape(),
            wv.shape()
        )));
    }
    let (n, c_in, h, w_in) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (c_out, wc_in, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    if c_in != wc_in {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d channel mismatch: input has {c_in}, weight expects {wc_in}"
        )));
    }
    let h_out = conv_out_extent(h, kh, stride, padding)?;
    let w_out = conv_out_extent(w_in, kw, stride, padding)?;
    let rows = c_in * kh * kw;
    let cols_n = h_out * w_out;

    let cols = im2col(xv, (kh, kw), stride, padding)?;
    let mut out = vec![T::zero(); n * c_out * cols_n];
    for ni in 0..n {
        T::gemm(
            c_out,
            rows,
            cols_n,
            T::one(),
            wv.data(),
            &cols.data()[ni * rows * cols_n..],
            T::zero(),
            &mut out[ni * c_out * cols_n..],
        );
    }
    let value = Tensor::new(vec![n, c_out, h_out, w_out], out)?;

    let back: BackFn<T> = Box::new(move |ctx| {
        let (xv, wv) = (ctx.parents[0], ctx.parents[1]);
        let g = ctx.out_grad;
        let cols = im2col(xv, (kh, kw), stride, padding).unwrap();
        // dW[out, rows] = sum_n g_n [out, L] · cols_n^T [L, rows]
        let mut dw = vec![T::zero(); c_out * rows];
        let mut dcols = vec![T::zero(); n * rows * cols_n];
        for ni in 0..n {
            let g_n = &g.data()[ni * c_out * cols_n..(ni + 1) * c_out * cols_n];
            let cols_slice = &cols.data()[ni * rows * cols_n..(ni + 1) * rows * cols_n];
            // dW += g_n · cols_n^T: gemm with B transposed, done via explicit transpose
            let mut cols_t = vec![T::zero(); cols_n * rows];
            for r in 0..rows {
                for l in 0..cols_n {
                    cols_t[l * rows + r] = cols_slice[r * cols_n + l];
                }
            }
            T::gemm(c_out, cols_n, rows, T::one(), g_n, &cols_t, T::one(), &mut dw);
            // dcols_n = W^T [rows, out] · g_n [out, L]
            let mut w_t = vec![T::zero(); rows * c_out];
            for o in 0..c_out {
                for r in 0..rows {
                    w_t[r * c_out + o] = wv.data()[o * rows + r];
                }
            }
            T::gemm(
                rows,
                c_out,
                cols_n,
                T::one(),
                &w_t,
                g_n,
                T::zero(),
                &mut dcols[ni * rows * cols_n..],
            );
        }
        let dcols_t = Tensor::new(vec![n, rows, cols_n], dcols).unwrap();
        let dx = col2im(&dcols_t, xv.shape(), (kh, kw), stride, padding).unwrap();
        let dw_t = Tensor::new(wv.shape().to_vec(), dw).unwrap();
        vec![dx, dw_t]
    });
    Ok(tape.push_custom(value, &[x, w], back))
}

/// Per-channel batch statistics of `[N,C,H,W]`: biased variance, as used for
/// normalization.
pub fn batch_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = (n * h * w) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut acc = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                acc += x.data()[base + i];
            }
        }
        mean[ci] = acc / T::from_f64(m);
    }
    for ci in 0..c {
        let mu = mean[ci];
        let mut acc = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                let d = x.data()[base + i] - mu;
                acc += d * d;
            }
        }
        var[ci] = acc / T::from_f64(m);
    }
    (mean, var)
}

/// Batch norm in training mode, normalizing with the current batch statistics.
/// Returns the output plus the batch mean and biased variance so the caller
/// can update running statistics.
pub fn batchnorm_train_op<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, Vec<T>, Vec<T>), TensorError> {
    let xv = tape.value(x);
    if xv.rank() != 4 {
        return Err(TensorError::ShapeMismatch(format!(
            "batchnorm expects [N,C,H,W], got {:?}",
            xv.shape()
        )));
    }
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (mean, var) = batch_moments(xv);
    let ivar: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
        .collect();
    let gv = tape.value(gamma);
    let bv = tape.value(beta);
    let mut out = vec![T::zero(); xv.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let (mu, iv, ga, be) = (mean[ci], ivar[ci], gv.data()[ci], bv.data()[ci]);
            for i in 0..h * w {
                out[base + i] = ga * (xv.data()[base + i] - mu) * iv + be;
            }
        }
    }
    let value = Tensor::new(xv.shape().to_vec(), out)?;

    let mean_c = mean.clone();
    let ivar_c = ivar.clone();
    let back: BackFn<T> = Box::new(move |ctx| {
        let (xv, gv) = (ctx.parents[0], ctx.parents[1]);
        let g = ctx.out_grad;
        let m = T::from_f64((n * h * w) as f64);
        let mut dx = vec![T::zero(); xv.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ci in 0..c {
            let (mu, iv, ga) = (mean_c[ci], ivar_c[ci], gv.data()[ci]);
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    let xhat = (xv.data()[base + i] - mu) * iv;
                    let dy = g.data()[base + i];
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
            }
            dgamma[ci] = sum_dy_xhat;
            dbeta[ci] = sum_dy;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    let xhat = (xv.data()[base + i] - mu) * iv;
                    let dy = g.data()[base + i];
                    dx[base + i] =
                        ga * iv * (dy - sum_dy / m - xhat * sum_dy_xhat / m);
                }
            }
        }
        vec![
            Tensor::new(xv.shape().to_vec(), dx).unwrap(),
            Tensor::new(vec![c], dgamma).unwrap(),
            Tensor::new(vec![c], dbeta).unwrap(),
        ]
    });
    Ok((tape.push_custom(value, &[x, gamma, beta], back), mean, var))
}

/// Batch norm in eval mode, normalizing with frozen running statistics.
pub fn batchnorm_eval_op<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Var, TensorError> {
    let xv = tape.value(x);
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let ivar: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
        .collect();
    let mean: Vec<T> = running_mean.data().to_vec();
    let gv = tape.value(gamma);
    let bv = tape.value(beta);
    let mut out = vec![T::zero(); xv.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                out[base + i] =
                    gv.data()[ci] * (xv.data()[base + i] - mean[ci]) * ivar[ci] + bv.data()[ci];
            }
        }
    }
    let value = Tensor::new(xv.shape().to_vec(), out)?;
    let back: BackFn<T> = Box::new(move |ctx| {
        let (xv, gv) = (ctx.parents[0], ctx.parents[1]);
        let g = ctx.out_grad;
        let mut dx = vec![T::zero(); xv.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    let dy = g.data()[base + i];
                    let xhat = (xv.data()[base + i] - mean[ci]) * ivar[ci];
                    dx[base + i] = dy * gv.data()[ci] * ivar[ci];
                    dgamma[ci] += dy * xhat;
                    dbeta[ci] += dy;
                }
            }
        }
        vec![
            Tensor::new(xv.shape().to_vec(), dx).unwrap(),
            Tensor::new(vec![c], dgamma).unwrap(),
            Tensor::new(vec![c], dbeta).unwrap(),
        ]
    });
    Ok(tape.push_custom(value, &[x, gamma, beta], back))
}

/// Max pooling; ties resolve to the first (lowest flat index) maximum.
pub fn maxpool2d_op<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Var, TensorError> {
    let xv = tape.value(x);
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let h_out = conv_out_extent(h, kernel, stride, padding)?;
    let w_out = conv_out_extent(w, kernel, stride, padding)?;
    let mut out = vec![T::neg_infinity(); n * c * h_out * w_out];
    let mut arg = vec![usize::MAX; n * c * h_out * w_out];
    for ni in 0..n {
        for ci in 0..c {
            let in_base = (ni * c + ci) * h * w;
            let out_base = (ni * c + ci) * h_out * w_out;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = in_base + iy as usize * w + ix as usize;
                            if xv.data()[idx] > best {
                                best = xv.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[out_base + oy * w_out + ox] = best;
                    arg[out_base + oy * w_out + ox] = best_idx;
                }
            }
        }
    }
    let value = Tensor::new(vec![n, c, h_out, w_out], out)?;
    let back: BackFn<T> = Box::new(move |ctx| {
        let mut dx = vec![T::zero(); ctx.parents[0].len()];
        for (o, &src) in arg.iter().enumerate() {
            if src != usize::MAX {
                dx[src] += ctx.out_grad.data()[o];
            }
        }
        vec![Tensor::new(ctx.parents[0].shape().to_vec(), dx).unwrap()]
    });
    Ok(tape.push_custom(value, &[x], back))
}

/// Inverted dropout. The sampled keep mask (already scaled by 1/(1-p)) is
/// captured on the tape so backward is exact for the sampled network. With
/// `per_channel` set, one mask entry covers an entire `[H,W]` feature map.
pub fn dropout_op<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: f64,
    per_channel: bool,
    rng: &mut dyn rand::RngCore,
) -> Var {
    if p <= 0.0 {
        return x;
    }
    let xv = tape.value(x);
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    let mask_t = if per_channel {
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let mut mask = vec![T::zero(); xv.len()];
        let plane = xv.len() / (n * c);
        for nc in 0..n * c {
            if rng.gen::<f64>() >= p {
                for i in 0..plane {
                    mask[nc * plane + i] = keep_scale;
                }
            }
        }
        Tensor::new(xv.shape().to_vec(), mask).unwrap()
    } else {
        Tensor::from_fn(xv.shape(), |_| {
            if rng.gen::<f64>() >= p {
                keep_scale
            } else {
                T::zero()
            }
        })
    };
    let value = xv.mul(&mask_t).unwrap();
    let back: BackFn<T> = Box::new(move |ctx| vec![ctx.out_grad.mul(&mask_t).unwrap()]);
    tape.push_custom(value, &[x], back)
}
