//! Finite-difference checks for every differentiable op and loss, shared
//! between the per-op suite and the acceptance gate.
//!
//! Each function runs `instances` random cases; every analytic gradient
//! coordinate must match a central difference with step 1e-6 to relative
//! error below 1e-5 in 64-bit. Inputs for ops with kinks (relu, max
//! pooling, row norms, margins) are sampled away from the kink so the
//! two-sided difference probes a region where the derivative exists.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vfdadv::losses::{self, LossSpec, Phi};
use vfdadv::tensor::ops;
use vfdadv::Tensor;

use super::{check_gradient, fill, fill_off_origin, rng, unit};

/// Scalarizes a tensor with fixed random weights so gradcheck sees a
/// non-degenerate linear functional of the op output.
fn weighted(y: &Tensor<f64>, w: &[f64]) -> Tensor<f64> {
    let wt = Tensor::new(w.to_vec(), y.shape().to_vec()).unwrap();
    ops::sum(&ops::mul(y, &wt).unwrap())
}

pub fn add_sub_mul(instances: usize) -> usize {
    let mut r = rng(0x01);
    for i in 0..instances {
        let n = r.gen_range(2..9);
        let a0 = fill(&mut r, n);
        let b0 = fill(&mut r, n);
        let w = fill(&mut r, n);
        for (name, which) in [("lhs", 0), ("rhs", 1)] {
            let (a, b, wv) = (a0.clone(), b0.clone(), w.clone());
            check_gradient(
                &format!("add[{i}].{name}"),
                if which == 0 { &a } else { &b },
                &[n],
                |x| {
                    let other = Tensor::new(
                        if which == 0 { b.clone() } else { a.clone() },
                        vec![n],
                    )
                    .unwrap();
                    let y = if which == 0 {
                        ops::add(x, &other).unwrap()
                    } else {
                        ops::add(&other, x).unwrap()
                    };
                    weighted(&y, &wv)
                },
            );
            check_gradient(
                &format!("sub[{i}].{name}"),
                if which == 0 { &a } else { &b },
                &[n],
                |x| {
                    let other = Tensor::new(
                        if which == 0 { b.clone() } else { a.clone() },
                        vec![n],
                    )
                    .unwrap();
                    let y = if which == 0 {
                        ops::sub(x, &other).unwrap()
                    } else {
                        ops::sub(&other, x).unwrap()
                    };
                    weighted(&y, &wv)
                },
            );
            check_gradient(
                &format!("mul[{i}].{name}"),
                if which == 0 { &a } else { &b },
                &[n],
                |x| {
                    let other = Tensor::new(
                        if which == 0 { b.clone() } else { a.clone() },
                        vec![n],
                    )
                    .unwrap();
                    let y = if which == 0 {
                        ops::mul(x, &other).unwrap()
                    } else {
                        ops::mul(&other, x).unwrap()
                    };
                    weighted(&y, &wv)
                },
            );
        }
    }
    instances
}

pub fn scale_add_scalar(instances: usize) -> usize {
    let mut r = rng(0x02);
    for i in 0..instances {
        let n = r.gen_range(2..9);
        let x0 = fill(&mut r, n);
        let w = fill(&mut r, n);
        let c = unit(&mut r) * 3.0;
        check_gradient(&format!("scale[{i}]"), &x0, &[n], |x| {
            weighted(&ops::scale(x, c), &w)
        });
        check_gradient(&format!("add_scalar[{i}]"), &x0, &[n], |x| {
            weighted(&ops::add_scalar(x, c), &w)
        });
    }
    instances
}

pub fn relu_tanh(instances: usize) -> usize {
    let mut r = rng(0x03);
    for i in 0..instances {
        let n = r.gen_range(2..9);
        let x0 = fill_off_origin(&mut r, n);
        let w = fill(&mut r, n);
        check_gradient(&format!("relu[{i}]"), &x0, &[n], |x| {
            weighted(&ops::relu(x), &w)
        });
        let smooth = fill(&mut r, n);
        check_gradient(&format!("tanh[{i}]"), &smooth, &[n], |x| {
            weighted(&ops::tanh(x), &w)
        });
    }
    instances
}

pub fn matmul(instances: usize) -> usize {
    let mut r = rng(0x04);
    for i in 0..instances {
        let (m, k, n) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        let a0 = fill(&mut r, m * k);
        let b0 = fill(&mut r, k * n);
        let w = fill(&mut r, m * n);
        let (b, wv) = (b0.clone(), w.clone());
        check_gradient(&format!("matmul[{i}].lhs"), &a0, &[m, k], |x| {
            let bt = Tensor::new(b.clone(), vec![k, n]).unwrap();
            weighted(&ops::matmul(x, &bt).unwrap(), &wv)
        });
        let (a, wv) = (a0.clone(), w.clone());
        check_gradient(&format!("matmul[{i}].rhs"), &b0, &[k, n], |x| {
            let at = Tensor::new(a.clone(), vec![m, k]).unwrap();
            weighted(&ops::matmul(&at, x).unwrap(), &wv)
        });
    }
    instances
}

pub fn add_bias(instances: usize) -> usize {
    let mut r = rng(0x05);
    for i in 0..instances {
        let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
        let x0 = fill(&mut r, m * n);
        let b0 = fill(&mut r, n);
        let w = fill(&mut r, m * n);
        let (b, wv) = (b0.clone(), w.clone());
        check_gradient(&format!("add_bias[{i}].x"), &x0, &[m, n], |x| {
            let bt = Tensor::new(b.clone(), vec![n]).unwrap();
            weighted(&ops::add_bias(x, &bt).unwrap(), &wv)
        });
        let (xc, wv) = (x0.clone(), w.clone());
        check_gradient(&format!("add_bias[{i}].b"), &b0, &[n], |x| {
            let xt = Tensor::new(xc.clone(), vec![m, n]).unwrap();
            weighted(&ops::add_bias(&xt, x).unwrap(), &wv)
        });
    }
    instances
}

pub fn flatten(instances: usize) -> usize {
    let mut r = rng(0x06);
    for i in 0..instances {
        let (n, c, h) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(2..4));
        let numel = n * c * h * h;
        let x0 = fill(&mut r, numel);
        let w = fill(&mut r, numel);
        check_gradient(&format!("flatten[{i}]"), &x0, &[n, c, h, h], |x| {
            weighted(&ops::flatten(x).unwrap(), &w)
        });
    }
    instances
}

pub fn conv2d(instances: usize) -> usize {
    let mut r = rng(0x07);
    for i in 0..instances {
        let n = r.gen_range(1..3);
        let cin = r.gen_range(1..3);
        let cout = r.gen_range(1..3);
        let h = r.gen_range(4..7);
        let wd = r.gen_range(4..7);
        let k = r.gen_range(1..4);
        let stride = r.gen_range(1..3);
        let padding = r.gen_range(0..2);
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (wd + 2 * padding - k) / stride + 1;

        let x0 = fill(&mut r, n * cin * h * wd);
        let w0 = fill(&mut r, cout * cin * k * k);
        let b0 = fill(&mut r, cout);
        let lw = fill(&mut r, n * cout * oh * ow);

        let (wc, bc, lwc) = (w0.clone(), b0.clone(), lw.clone());
        check_gradient(&format!("conv2d[{i}].x"), &x0, &[n, cin, h, wd], |x| {
            let wt = Tensor::new(wc.clone(), vec![cout, cin, k, k]).unwrap();
            let bt = Tensor::new(bc.clone(), vec![cout]).unwrap();
            weighted(&ops::conv2d(x, &wt, &bt, stride, padding).unwrap(), &lwc)
        });
        let (xc, bc, lwc) = (x0.clone(), b0.clone(), lw.clone());
        check_gradient(&format!("conv2d[{i}].w"), &w0, &[cout, cin, k, k], |w| {
            let xt = Tensor::new(xc.clone(), vec![n, cin, h, wd]).unwrap();
            let bt = Tensor::new(bc.clone(), vec![cout]).unwrap();
            weighted(&ops::conv2d(&xt, w, &bt, stride, padding).unwrap(), &lwc)
        });
        let (xc, wc, lwc) = (x0.clone(), w0.clone(), lw.clone());
        check_gradient(&format!("conv2d[{i}].b"), &b0, &[cout], |b| {
            let xt = Tensor::new(xc.clone(), vec![n, cin, h, wd]).unwrap();
            let wt = Tensor::new(wc.clone(), vec![cout, cin, k, k]).unwrap();
            weighted(&ops::conv2d(&xt, &wt, b, stride, padding).unwrap(), &lwc)
        });
    }
    instances
}

/// Redraws until every pooling window has a clear maximum, keeping the
/// central difference inside one linear piece.
fn pool_safe_input(r: &mut ChaCha8Rng, n: usize, c: usize, h: usize, k: usize) -> Vec<f64> {
    'redraw: loop {
        let x = fill(r, n * c * h * h);
        let o = (h - k) / k + 1;
        for nc in 0..n * c {
            for oy in 0..o {
                for ox in 0..o {
                    let mut vals: Vec<f64> = Vec::with_capacity(k * k);
                    for ky in 0..k {
                        for kx in 0..k {
                            vals.push(x[nc * h * h + (oy * k + ky) * h + (ox * k + kx)]);
                        }
                    }
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals.len() > 1 && vals[0] - vals[1] < 1e-3 {
                        continue 'redraw;
                    }
                }
            }
        }
        return x;
    }
}

pub fn pooling(instances: usize) -> usize {
    let mut r = rng(0x08);
    for i in 0..instances {
        let (n, c) = (r.gen_range(1..3), r.gen_range(1..3));
        let k = 2;
        let h = 2 * r.gen_range(1..3);
        let o = h / k;
        let lw = fill(&mut r, n * c * o * o);
        let x0 = pool_safe_input(&mut r, n, c, h, k);
        let lwc = lw.clone();
        check_gradient(&format!("max_pool2d[{i}]"), &x0, &[n, c, h, h], |x| {
            weighted(&ops::max_pool2d(x, k, k).unwrap(), &lwc)
        });
        let smooth = fill(&mut r, n * c * h * h);
        check_gradient(&format!("avg_pool2d[{i}]"), &smooth, &[n, c, h, h], |x| {
            weighted(&ops::avg_pool2d(x, k, k).unwrap(), &lw)
        });
    }
    instances
}

pub fn softmax_family(instances: usize) -> usize {
    let mut r = rng(0x09);
    for i in 0..instances {
        let (rows, cols) = (r.gen_range(1..4), r.gen_range(2..6));
        let x0: Vec<f64> = (0..rows * cols).map(|_| unit(&mut r) * 3.0).collect();
        let w = fill(&mut r, rows * cols);
        let wc = w.clone();
        check_gradient(&format!("softmax[{i}]"), &x0, &[rows, cols], |x| {
            weighted(&ops::softmax(x).unwrap(), &wc)
        });
        check_gradient(&format!("log_softmax[{i}]"), &x0, &[rows, cols], |x| {
            weighted(&ops::log_softmax(x).unwrap(), &w)
        });
    }
    instances
}

pub fn reductions(instances: usize) -> usize {
    let mut r = rng(0x0a);
    for i in 0..instances {
        let n = r.gen_range(2..9);
        let x0 = fill(&mut r, n);
        let c = unit(&mut r) * 2.0;
        check_gradient(&format!("sum[{i}]"), &x0, &[n], |x| {
            ops::scale(&ops::sum(x), c)
        });
        check_gradient(&format!("mean[{i}]"), &x0, &[n], |x| {
            ops::scale(&ops::mean(x), c)
        });
    }
    instances
}

pub fn row_l2(instances: usize) -> usize {
    let mut r = rng(0x0b);
    for i in 0..instances {
        let (rows, cols) = (r.gen_range(1..4), r.gen_range(2..5));
        let x0: Vec<f64> = loop {
            let x = fill(&mut r, rows * cols);
            let ok = (0..rows).all(|rr| {
                x[rr * cols..(rr + 1) * cols]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    > 0.1
            });
            if ok {
                break x;
            }
        };
        let w = fill(&mut r, rows);
        check_gradient(&format!("row_l2[{i}]"), &x0, &[rows, cols], |x| {
            weighted(&ops::row_l2(x).unwrap(), &w)
        });
    }
    instances
}

pub fn label_margin(instances: usize) -> usize {
    let mut r = rng(0x0c);
    for i in 0..instances {
        let (rows, cols) = (r.gen_range(1..4), r.gen_range(2..6));
        let labels: Vec<usize> = (0..rows).map(|_| r.gen_range(0..cols)).collect();
        // Rival logits must have a clear leader so the max is locally linear.
        let z0: Vec<f64> = loop {
            let z: Vec<f64> = (0..rows * cols).map(|_| unit(&mut r) * 2.0).collect();
            let ok = (0..rows).all(|rr| {
                let mut rivals: Vec<f64> = (0..cols)
                    .filter(|&j| j != labels[rr])
                    .map(|j| z[rr * cols + j])
                    .collect();
                rivals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                rivals.len() < 2 || rivals[0] - rivals[1] > 1e-3
            });
            if ok {
                break z;
            }
        };
        let w = fill(&mut r, rows);
        let lab = labels.clone();
        check_gradient(&format!("label_margin[{i}]"), &z0, &[rows, cols], |z| {
            weighted(&ops::label_margin(z, &lab).unwrap(), &w)
        });
    }
    instances
}

pub fn clean_loss(instances: usize) -> usize {
    let mut r = rng(0x20);
    for i in 0..instances {
        let (n, c) = (r.gen_range(1..5), r.gen_range(2..6));
        let z0: Vec<f64> = (0..n * c).map(|_| unit(&mut r) * 3.0).collect();
        let y: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        check_gradient(&format!("clean_loss[{i}]"), &z0, &[n, c], |z| {
            losses::clean_loss(z, &y).unwrap()
        });
    }
    instances
}

pub fn adv_loss_alp(instances: usize) -> usize {
    let mut r = rng(0x21);
    for i in 0..instances {
        let (n, c) = (r.gen_range(1..5), r.gen_range(2..6));
        let z0: Vec<f64> = (0..n * c).map(|_| unit(&mut r) * 3.0).collect();
        let clean: Vec<f64> = (0..n * c).map(|_| unit(&mut r) * 3.0).collect();
        let y: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        check_gradient(&format!("adv_loss_alp[{i}]"), &z0, &[n, c], |z| {
            let zc = Tensor::new(clean.clone(), vec![n, c]).unwrap();
            losses::adv_loss_from_logits(Phi::AlpCe, &zc, z, &y).unwrap()
        });
    }
    instances
}

/// The clean side is a detached constant by design, so only the adversarial
/// logits carry gradient.
pub fn adv_loss_trades(instances: usize) -> usize {
    let mut r = rng(0x22);
    for i in 0..instances {
        let (n, c) = (r.gen_range(1..5), r.gen_range(2..6));
        let z0: Vec<f64> = (0..n * c).map(|_| unit(&mut r) * 3.0).collect();
        let clean: Vec<f64> = (0..n * c).map(|_| unit(&mut r) * 3.0).collect();
        let y: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        check_gradient(&format!("adv_loss_trades[{i}]"), &z0, &[n, c], |z| {
            let zc = Tensor::new(clean.clone(), vec![n, c]).unwrap();
            losses::adv_loss_from_logits(Phi::TradesKl, &zc, z, &y).unwrap()
        });
    }
    instances
}

/// Feature batches whose pairwise row differences stay away from the norm
/// kink at zero.
fn separated_features(r: &mut ChaCha8Rng, n: usize, d: usize, other: &[f64]) -> Vec<f64> {
    loop {
        let f = fill(r, n * d);
        let ok = (0..n).all(|row| {
            let dist: f64 = (0..d)
                .map(|j| (f[row * d + j] - other[row * d + j]).powi(2))
                .sum::<f64>()
                .sqrt();
            dist > 0.1
        });
        if ok {
            return f;
        }
    }
}

pub fn vfd_loss(instances: usize) -> usize {
    let mut r = rng(0x23);
    for i in 0..instances {
        let (n, d) = (r.gen_range(1..4), r.gen_range(2..6));
        let teacher = fill(&mut r, n * d);
        let f_adv = separated_features(&mut r, n, d, &teacher);
        let f_clean = separated_features(&mut r, n, d, &teacher);
        let (t, fc) = (teacher.clone(), f_clean.clone());
        check_gradient(&format!("vfd_loss[{i}].adv"), &f_adv, &[n, d], |f| {
            let tt = Tensor::new(t.clone(), vec![n, d]).unwrap();
            let ft = Tensor::new(fc.clone(), vec![n, d]).unwrap();
            losses::vfd_loss(f, &ft, &tt).unwrap()
        });
        let (t, fa) = (teacher.clone(), f_adv.clone());
        check_gradient(&format!("vfd_loss[{i}].clean"), &f_clean, &[n, d], |f| {
            let tt = Tensor::new(t.clone(), vec![n, d]).unwrap();
            let ft = Tensor::new(fa.clone(), vec![n, d]).unwrap();
            losses::vfd_loss(&ft, f, &tt).unwrap()
        });
    }
    instances
}

/// One shared input feeds all three terms, exercising the composed gradient
/// with accumulation across branches.
pub fn total_loss(instances: usize) -> usize {
    let mut r = rng(0x24);
    for i in 0..instances {
        let (n, c) = (r.gen_range(1..4), r.gen_range(2..5));
        let z0: Vec<f64> = (0..n * c).map(|_| unit(&mut r) * 2.0).collect();
        let y: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let shift = fill(&mut r, n * c);
        let shifted0: Vec<f64> = z0.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let teacher = loop {
            let t = separated_features(&mut r, n, c, &z0);
            let far = (0..n).all(|row| {
                let dist: f64 = (0..c)
                    .map(|j| (t[row * c + j] - shifted0[row * c + j]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                dist > 0.1
            });
            if far {
                break t;
            }
        };
        let spec = LossSpec {
            beta: r.gen_range(0.5..6.0),
            lambda: r.gen_range(0.001..0.04),
            ..LossSpec::default()
        };
        let (sh, t) = (shift.clone(), teacher.clone());
        check_gradient(&format!("total_loss[{i}]"), &z0, &[n, c], |z| {
            let shifted = ops::add(
                z,
                &Tensor::new(sh.clone(), vec![n, c]).unwrap(),
            )
            .unwrap();
            let l_clean = losses::clean_loss(z, &y).unwrap();
            let l_adv = losses::clean_loss(&shifted, &y).unwrap();
            let tt = Tensor::new(t.clone(), vec![n, c]).unwrap();
            let l_kd = losses::vfd_loss(&shifted, z, &tt).unwrap();
            losses::total_loss(&l_clean, &l_adv, Some(&l_kd), &spec).unwrap()
        });
    }
    instances
}

/// Runs every check above at the given instance count; returns the total
/// number of instances exercised.
pub fn everything(instances: usize) -> usize {
    add_sub_mul(instances)
        + scale_add_scalar(instances)
        + relu_tanh(instances)
        + matmul(instances)
        + add_bias(instances)
        + flatten(instances)
        + conv2d(instances)
        + pooling(instances)
        + softmax_family(instances)
        + reductions(instances)
        + row_l2(instances)
        + label_margin(instances)
        + clean_loss(instances)
        + adv_loss_alp(instances)
        + adv_loss_trades(instances)
        + vfd_loss(instances)
        + total_loss(instances)
}
