//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes its output eagerly, and registers a
//! backward closure on the tape when any input requires grad. All loops are
//! sequential with a fixed iteration order, so forward values and gradients
//! are bit-identical across runs on one platform.
//!
//! Layout conventions: row-major; matrices are `[rows, cols]`; image batches
//! are `[n, channels, height, width]`; logits are `[batch, classes]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Elementwise `a + b` (same shape).
pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("add", a, b)?;
    let out: Vec<S> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(|dy| vec![dy.to_vec(), dy.to_vec()]),
    ))
}

/// Elementwise `a - b` (same shape).
pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("sub", a, b)?;
    let out: Vec<S> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x - y)
        .collect();
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(|dy| vec![dy.to_vec(), dy.iter().map(|&g| -g).collect()]),
    ))
}

/// Elementwise `a * b` (same shape).
pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape("mul", a, b)?;
    let out: Vec<S> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |dy| {
            let av = pa.data();
            let bv = pb.data();
            vec![
                dy.iter().zip(bv.iter()).map(|(&g, &y)| g * y).collect(),
                dy.iter().zip(av.iter()).map(|(&g, &x)| g * x).collect(),
            ]
        }),
    ))
}

/// `c * x` for a compile-time-typed scalar constant.
pub fn scale<S: Scalar>(x: &Tensor<S>, c: S) -> Tensor<S> {
    let out: Vec<S> = x.data().iter().map(|&v| c * v).collect();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |dy| vec![dy.iter().map(|&g| c * g).collect()]),
    )
}

/// `x + c` elementwise.
pub fn add_scalar<S: Scalar>(x: &Tensor<S>, c: S) -> Tensor<S> {
    let out: Vec<S> = x.data().iter().map(|&v| v + c).collect();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(|dy| vec![dy.to_vec()]),
    )
}

/// Rectified linear unit; subgradient 0 at the origin.
pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let out: Vec<S> = x
        .data()
        .iter()
        .map(|&v| if v > S::zero() { v } else { S::zero() })
        .collect();
    let px = x.clone();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |dy| {
            let xv = px.data();
            vec![dy
                .iter()
                .zip(xv.iter())
                .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                .collect()]
        }),
    )
}

/// Hyperbolic tangent.
pub fn tanh<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let out: Vec<S> = x.data().iter().map(|&v| v.tanh()).collect();
    let saved = out.clone();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |dy| {
            vec![dy
                .iter()
                .zip(saved.iter())
                .map(|(&g, &t)| g * (S::one() - t * t))
                .collect()]
        }),
    )
}

/// Matrix product of `a: [m,k]` and `b: [k,n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ashape, bshape) = (a.shape().to_vec(), b.shape().to_vec());
    if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: ashape,
            rhs: bshape,
        });
    }
    let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
    let mut out = vec![S::zero(); m * n];
    {
        let av = a.data();
        let bv = b.data();
        for i in 0..m {
            for kk in 0..k {
                let aik = av[i * k + kk];
                let brow = &bv[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
    }
    let (pa, pb) = (a.clone(), b.clone());
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(
        out,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |dy| {
            let av = pa.data();
            let bv = pb.data();
            let da = if need_a {
                let mut da = vec![S::zero(); m * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = dy[i * n + j];
                        for kk in 0..k {
                            da[i * k + kk] += g * bv[kk * n + j];
                        }
                    }
                }
                da
            } else {
                Vec::new()
            };
            let db = if need_b {
                let mut db = vec![S::zero(); k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let aik = av[i * k + kk];
                        for j in 0..n {
                            db[kk * n + j] += aik * dy[i * n + j];
                        }
                    }
                }
                db
            } else {
                Vec::new()
            };
            vec![da, db]
        }),
    ))
}

/// Adds bias row `b: [n]` to every row of `x: [m,n]`.
pub fn add_bias<S: Scalar>(x: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let xs = x.shape().to_vec();
    let bs = b.shape().to_vec();
    if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            lhs: xs,
            rhs: bs,
        });
    }
    let (m, n) = (xs[0], xs[1]);
    let out: Vec<S> = {
        let xv = x.data();
        let bv = b.data();
        (0..m * n).map(|i| xv[i] + bv[i % n]).collect()
    };
    Ok(Tensor::from_op(
        out,
        xs,
        vec![x.clone(), b.clone()],
        Box::new(move |dy| {
            let mut db = vec![S::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    db[j] += dy[i * n + j];
                }
            }
            vec![dy.to_vec(), db]
        }),
    ))
}

/// Collapses all but the leading (batch) dimension: `[n, ...] -> [n, prod]`.
pub fn flatten<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let xs = x.shape();
    if xs.len() < 2 {
        return Err(Error::Contract(format!(
            "flatten requires at least 2 dimensions, got shape {xs:?}"
        )));
    }
    let n = xs[0];
    let rest: usize = xs[1..].iter().product();
    Ok(Tensor::from_op(
        x.to_vec(),
        vec![n, rest],
        vec![x.clone()],
        Box::new(|dy| vec![dy.to_vec()]),
    ))
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let ckk = cin * kh * kw;
    let mut col = vec![S::zero(); n * oh * ow * ckk];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * ckk;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[row + (ci * kh + ky) * kw + kx] =
                                x[((ni * cin + ci) * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    dcol: &[S],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let ckk = cin * kh * kw;
    let mut dx = vec![S::zero(); n * cin * h * w];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * ckk;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[((ni * cin + ci) * h + iy as usize) * w + ix as usize] +=
                                dcol[row + (ci * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2-D convolution of `x: [n,cin,h,w]` with kernel `w: [cout,cin,kh,kw]` and
/// bias `[cout]`, implemented as im2col followed by a matrix product.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let xs = x.shape().to_vec();
    let ws = weight.shape().to_vec();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs,
            rhs: ws,
        });
    }
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    if bias.shape() != [cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: bias.shape().to_vec(),
            rhs: vec![cout],
        });
    }
    let oh = conv_out_dim(h, kh, stride, padding).ok_or_else(|| {
        Error::Contract(format!(
            "conv2d geometry invalid: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
        ))
    })?;
    let ow = conv_out_dim(w, kw, stride, padding).ok_or_else(|| {
        Error::Contract(format!(
            "conv2d geometry invalid: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
        ))
    })?;

    let ckk = cin * kh * kw;
    let col = im2col(
        &x.data(),
        n,
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        oh,
        ow,
    );
    let mut out = vec![S::zero(); n * cout * oh * ow];
    {
        let wv = weight.data();
        let bv = bias.data();
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let crow = &col[((ni * oh + oy) * ow + ox) * ckk..][..ckk];
                    for co in 0..cout {
                        let wrow = &wv[co * ckk..(co + 1) * ckk];
                        let mut acc = bv[co];
                        for k in 0..ckk {
                            acc += crow[k] * wrow[k];
                        }
                        out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
    }

    let (px, pw) = (x.clone(), weight.clone());
    let (need_x, need_w, need_b) = (
        x.requires_grad(),
        weight.requires_grad(),
        bias.requires_grad(),
    );
    Ok(Tensor::from_op(
        out,
        vec![n, cout, oh, ow],
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |dy| {
            let db = if need_b {
                let mut db = vec![S::zero(); cout];
                for ni in 0..n {
                    for co in 0..cout {
                        for i in 0..oh * ow {
                            db[co] += dy[(ni * cout + co) * oh * ow + i];
                        }
                    }
                }
                db
            } else {
                Vec::new()
            };
            let col = if need_x || need_w {
                im2col(
                    &px.data(),
                    n,
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    padding,
                    oh,
                    ow,
                )
            } else {
                Vec::new()
            };
            let dw = if need_w {
                let mut dw = vec![S::zero(); cout * ckk];
                for ni in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let crow = &col[((ni * oh + oy) * ow + ox) * ckk..][..ckk];
                            for co in 0..cout {
                                let g = dy[((ni * cout + co) * oh + oy) * ow + ox];
                                let drow = &mut dw[co * ckk..(co + 1) * ckk];
                                for k in 0..ckk {
                                    drow[k] += g * crow[k];
                                }
                            }
                        }
                    }
                }
                dw
            } else {
                Vec::new()
            };
            let dx = if need_x {
                let wv = pw.data();
                let mut dcol = vec![S::zero(); n * oh * ow * ckk];
                for ni in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let drow = &mut dcol[((ni * oh + oy) * ow + ox) * ckk..][..ckk];
                            for co in 0..cout {
                                let g = dy[((ni * cout + co) * oh + oy) * ow + ox];
                                let wrow = &wv[co * ckk..(co + 1) * ckk];
                                for k in 0..ckk {
                                    drow[k] += g * wrow[k];
                                }
                            }
                        }
                    }
                }
                col2im(
                    &dcol, n, cin, h, w, kh, kw, stride, padding, oh, ow,
                )
            } else {
                Vec::new()
            };
            vec![dx, dw, db]
        }),
    ))
}

/// Max pooling over `kernel`x`kernel` windows with the given stride.
/// Gradient routes to the first maximum in scan order.
pub fn max_pool2d<S: Scalar>(x: &Tensor<S>, kernel: usize, stride: usize) -> Result<Tensor<S>> {
    let xs = x.shape().to_vec();
    if xs.len() != 4 {
        return Err(Error::Contract(format!(
            "max_pool2d requires [n,c,h,w], got shape {xs:?}"
        )));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = conv_out_dim(h, kernel, stride, 0)
        .ok_or_else(|| Error::Contract(format!("max_pool2d geometry invalid for {xs:?}")))?;
    let ow = conv_out_dim(w, kernel, stride, 0)
        .ok_or_else(|| Error::Contract(format!("max_pool2d geometry invalid for {xs:?}")))?;
    let numel_in = n * c * h * w;
    let mut out = vec![S::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    {
        let xv = x.data();
        for nc in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = nc * h * w + (oy * stride + ky) * w + (ox * stride + kx);
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[(nc * oh + oy) * ow + ox] = best;
                    argmax[(nc * oh + oy) * ow + ox] = best_idx;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![n, c, oh, ow],
        vec![x.clone()],
        Box::new(move |dy| {
            let mut dx = vec![S::zero(); numel_in];
            for (i, &src) in argmax.iter().enumerate() {
                dx[src] += dy[i];
            }
            vec![dx]
        }),
    ))
}

/// Average pooling over `kernel`x`kernel` windows with the given stride.
pub fn avg_pool2d<S: Scalar>(x: &Tensor<S>, kernel: usize, stride: usize) -> Result<Tensor<S>> {
    let xs = x.shape().to_vec();
    if xs.len() != 4 {
        return Err(Error::Contract(format!(
            "avg_pool2d requires [n,c,h,w], got shape {xs:?}"
        )));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = conv_out_dim(h, kernel, stride, 0)
        .ok_or_else(|| Error::Contract(format!("avg_pool2d geometry invalid for {xs:?}")))?;
    let ow = conv_out_dim(w, kernel, stride, 0)
        .ok_or_else(|| Error::Contract(format!("avg_pool2d geometry invalid for {xs:?}")))?;
    let numel_in = n * c * h * w;
    let inv = S::one() / S::from_f64((kernel * kernel) as f64);
    let mut out = vec![S::zero(); n * c * oh * ow];
    {
        let xv = x.data();
        for nc in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            acc += xv[nc * h * w + (oy * stride + ky) * w + (ox * stride + kx)];
                        }
                    }
                    out[(nc * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![n, c, oh, ow],
        vec![x.clone()],
        Box::new(move |dy| {
            let mut dx = vec![S::zero(); numel_in];
            for nc in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dy[(nc * oh + oy) * ow + ox] * inv;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                dx[nc * h * w + (oy * stride + ky) * w + (ox * stride + kx)] += g;
                            }
                        }
                    }
                }
            }
            vec![dx]
        }),
    ))
}

fn check_rows<S: Scalar>(op: &'static str, x: &Tensor<S>) -> Result<(usize, usize)> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::Contract(format!(
            "{op} requires a [rows, cols] tensor, got shape {xs:?}"
        )));
    }
    Ok((xs[0], xs[1]))
}

/// Row-wise softmax with max-shift stabilization.
pub fn softmax<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, cols) = check_rows("softmax", x)?;
    let mut out = vec![S::zero(); rows * cols];
    {
        let xv = x.data();
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for j in 0..cols {
                let e = (row[j] - m).exp();
                out[r * cols + j] = e;
                total += e;
            }
            for j in 0..cols {
                out[r * cols + j] = out[r * cols + j] / total;
            }
        }
    }
    let saved = out.clone();
    Ok(Tensor::from_op(
        out,
        vec![rows, cols],
        vec![x.clone()],
        Box::new(move |dy| {
            let mut dx = vec![S::zero(); rows * cols];
            for r in 0..rows {
                let s = &saved[r * cols..(r + 1) * cols];
                let g = &dy[r * cols..(r + 1) * cols];
                let mut dot = S::zero();
                for j in 0..cols {
                    dot += g[j] * s[j];
                }
                for j in 0..cols {
                    dx[r * cols + j] = s[j] * (g[j] - dot);
                }
            }
            vec![dx]
        }),
    ))
}

/// Row-wise log-softmax with max-shift stabilization.
pub fn log_softmax<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, cols) = check_rows("log_softmax", x)?;
    let mut out = vec![S::zero(); rows * cols];
    {
        let xv = x.data();
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for j in 0..cols {
                total += (row[j] - m).exp();
            }
            let lse = m + total.ln();
            for j in 0..cols {
                out[r * cols + j] = row[j] - lse;
            }
        }
    }
    let saved = out.clone();
    Ok(Tensor::from_op(
        out,
        vec![rows, cols],
        vec![x.clone()],
        Box::new(move |dy| {
            let mut dx = vec![S::zero(); rows * cols];
            for r in 0..rows {
                let l = &saved[r * cols..(r + 1) * cols];
                let g = &dy[r * cols..(r + 1) * cols];
                let mut total = S::zero();
                for j in 0..cols {
                    total += g[j];
                }
                for j in 0..cols {
                    dx[r * cols + j] = g[j] - l[j].exp() * total;
                }
            }
            vec![dx]
        }),
    ))
}

/// Sum of all elements, as a `[1]` tensor. Sequential left fold.
pub fn sum<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let total = x.data().iter().fold(S::zero(), |acc, &v| acc + v);
    let numel = x.numel();
    Tensor::from_op(
        vec![total],
        vec![1],
        vec![x.clone()],
        Box::new(move |dy| vec![vec![dy[0]; numel]]),
    )
}

/// Mean of all elements, as a `[1]` tensor.
pub fn mean<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let numel = x.numel();
    let inv = S::one() / S::from_f64(numel as f64);
    let total = x.data().iter().fold(S::zero(), |acc, &v| acc + v);
    Tensor::from_op(
        vec![total * inv],
        vec![1],
        vec![x.clone()],
        Box::new(move |dy| vec![vec![dy[0] * inv; numel]]),
    )
}

/// Euclidean norm of each row of `x: [n,d]`, as an `[n]` tensor.
/// Subgradient 0 where a row is exactly zero.
pub fn row_l2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, cols) = check_rows("row_l2", x)?;
    let mut out = vec![S::zero(); rows];
    {
        let xv = x.data();
        for r in 0..rows {
            let mut acc = S::zero();
            for j in 0..cols {
                let v = xv[r * cols + j];
                acc += v * v;
            }
            out[r] = acc.sqrt();
        }
    }
    let saved = out.clone();
    let px = x.clone();
    Ok(Tensor::from_op(
        out,
        vec![rows],
        vec![x.clone()],
        Box::new(move |dy| {
            let xv = px.data();
            let mut dx = vec![S::zero(); rows * cols];
            for r in 0..rows {
                if saved[r] > S::zero() {
                    let g = dy[r] / saved[r];
                    for j in 0..cols {
                        dx[r * cols + j] = g * xv[r * cols + j];
                    }
                }
            }
            vec![dx]
        }),
    ))
}

/// Per-row margin `z[label] - max_{j != label} z[j]` for logits `[n,k]`.
/// Positive iff the row is classified as its label. Gradient routes +1 to the
/// label logit and -1 to the first-largest competing logit.
pub fn label_margin<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>> {
    let (rows, cols) = check_rows("label_margin", logits)?;
    if labels.len() != rows {
        return Err(Error::Contract(format!(
            "label_margin got {} labels for {} rows",
            labels.len(),
            rows
        )));
    }
    if cols < 2 {
        return Err(Error::Contract(
            "label_margin requires at least 2 classes".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {cols} classes"
        )));
    }
    let mut out = vec![S::zero(); rows];
    let mut rival = vec![0usize; rows];
    {
        let zv = logits.data();
        for r in 0..rows {
            let row = &zv[r * cols..(r + 1) * cols];
            let y = labels[r];
            let mut best = S::neg_infinity();
            let mut best_j = 0usize;
            for (j, &z) in row.iter().enumerate() {
                if j != y && z > best {
                    best = z;
                    best_j = j;
                }
            }
            out[r] = row[y] - best;
            rival[r] = best_j;
        }
    }
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        out,
        vec![rows],
        vec![logits.clone()],
        Box::new(move |dy| {
            let mut dz = vec![S::zero(); rows * cols];
            for r in 0..rows {
                dz[r * cols + labels[r]] += dy[r];
                dz[r * cols + rival[r]] -= dy[r];
            }
            vec![dz]
        }),
    ))
}
