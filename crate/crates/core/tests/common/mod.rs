//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the library's kernels.
#![allow(dead_code)]

use framegan::tensor::{finite_difference_gradient, Activation, RunningStats, BN_EPSILON};
use framegan::{Graph, Result, Tensor, Var};

/// Cross-correlation by explicit loops over (n, o, y, x) and the window.
pub fn direct_conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = x.dims4().unwrap();
    let [o, _, k, _] = w.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * wdat[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((s * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Triple-loop `x · w + b`.
pub fn naive_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let [n, d] = x.dims2().unwrap();
    let [_, m] = w.dims2().unwrap();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = b.data()[j];
            for k in 0..d {
                acc += x.data()[i * d + k] * w.data()[k * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

/// `max |a - b| / max(max |b|, tiny)`: relative to the gradient's scale, so
/// entries that are legitimately ~0 do not dominate.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic.max_abs_diff(numeric) / scale
}

/// Builds the loss with every input as a parameter, runs backward, and
/// compares each input's gradient with central differences (h = 1e-5).
/// Returns the worst relative error over all inputs.
pub fn gradient_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let loss = build(&mut g, &vars)?;
                g.value(loss).item()
            },
            input,
            1e-5,
        )
        .unwrap();
        let analytic = grads.get(vars[i]).expect("gradient for every input");
        worst = worst.max(max_rel_err(analytic, &numeric));
    }
    worst
}

/// Random tensor with entries pushed at least `margin` away from zero, so
/// piecewise-linear activations are not probed across their kink.
pub fn randn_away_from_zero(shape: &[usize], seed: u64, margin: f64) -> Tensor {
    let mut t = Tensor::randn(shape, 0.0, 1.0, seed).unwrap();
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
    t
}

/// `sum(y ⊙ r)` for a fixed random `r`, turning any output into a scalar
/// with a non-trivial upstream gradient.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(g.value(y).shape(), 0.0, 1.0, seed ^ 0x5eed)?;
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

/// Worst relative gradient error of every differentiable op (conv,
/// transposed conv, batch norm in both modes, four activations, linear,
/// softmax cross-entropy, binary cross-entropy) on one seeded case.
pub fn per_op_gradient_errors(seed: u64) -> Vec<f64> {
    let mut errs = Vec::new();
    let n = 2 + (seed % 2) as usize;
    let size = 5 + (seed % 3) as usize;
    let stride = 1 + (seed % 2) as usize;
    let pad = (seed % 3) as usize;

    let x = Tensor::randn(&[n, 2, size, size], 0.0, 1.0, seed).unwrap();
    let w = Tensor::randn(&[3, 2, 3, 3], 0.0, 0.5, seed + 1).unwrap();
    let b = Tensor::randn(&[3], 0.0, 0.5, seed + 2).unwrap();
    errs.push(gradient_check(&[x.clone(), w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
        weighted_sum(g, y, seed)
    }));

    let tw = Tensor::randn(&[2, 3, 4, 4], 0.0, 0.5, seed + 3).unwrap();
    errs.push(gradient_check(&[x.clone(), tw], |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], stride, pad.min(1))?;
        weighted_sum(g, y, seed)
    }));

    let gamma = Tensor::randn(&[2], 1.0, 0.3, seed + 4).unwrap();
    let beta = Tensor::randn(&[2], 0.0, 0.3, seed + 5).unwrap();
    for training in [true, false] {
        errs.push(gradient_check(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            let mut stats = RunningStats { mean: vec![0.1, -0.2], var: vec![0.9, 1.3] };
            let y = g.batch_norm2d(v[0], v[1], v[2], &mut stats, training, BN_EPSILON)?;
            weighted_sum(g, y, seed)
        }));
    }

    let a = randn_away_from_zero(&[n, 3, 4], seed + 6, 1e-3);
    for kind in [
        Activation::LeakyRelu { slope: 0.2 },
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
    ] {
        errs.push(gradient_check(std::slice::from_ref(&a), |g, v| {
            let y = g.activation(v[0], kind)?;
            weighted_sum(g, y, seed)
        }));
    }

    let lx = Tensor::randn(&[n, 6], 0.0, 1.0, seed + 7).unwrap();
    let lw = Tensor::randn(&[6, 4], 0.0, 1.0, seed + 8).unwrap();
    let lb = Tensor::randn(&[4], 0.0, 1.0, seed + 9).unwrap();
    errs.push(gradient_check(&[lx, lw, lb], |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        weighted_sum(g, y, seed)
    }));

    let logits = Tensor::randn(&[n + 2, 5], 0.0, 2.0, seed + 10).unwrap();
    let labels: Vec<usize> = (0..n + 2).map(|i| (i * 3 + seed as usize) % 5).collect();
    errs.push(gradient_check(&[logits], |g, v| g.softmax_cross_entropy(v[0], &labels)));

    let probs = Tensor::from_fn(&[n * 3], |i| 0.05 + 0.9 * ((i as f64 * 0.37 + seed as f64 * 0.11) % 1.0)).unwrap();
    for target in [0.0, 1.0] {
        errs.push(gradient_check(std::slice::from_ref(&probs), |g, v| g.bce_mean(v[0], target, 1e-7)));
    }
    errs
}

/// Gradient error of conv → batch norm → leaky ReLU → conv → tanh →
/// linear → softmax cross-entropy, all parameters checked.
pub fn composed_net_gradient_error(seed: u64) -> f64 {
    let x = Tensor::randn(&[3, 2, 8, 8], 0.0, 1.0, seed).unwrap();
    let w1 = Tensor::randn(&[4, 2, 4, 4], 0.0, 0.3, seed + 1).unwrap();
    let gamma = Tensor::randn(&[4], 1.0, 0.2, seed + 2).unwrap();
    let beta = Tensor::randn(&[4], 0.0, 0.2, seed + 3).unwrap();
    let w2 = Tensor::randn(&[2, 4, 3, 3], 0.0, 0.3, seed + 4).unwrap();
    let b2 = Tensor::randn(&[2], 0.0, 0.3, seed + 5).unwrap();
    let w3 = Tensor::randn(&[32, 3], 0.0, 0.3, seed + 6).unwrap();
    let b3 = Tensor::randn(&[3], 0.0, 0.3, seed + 7).unwrap();
    let labels = [0usize, 2, 1];
    gradient_check(&[x, w1, gamma, beta, w2, b2, w3, b3], |g, v| {
        let h = g.conv2d(v[0], v[1], None, 2, 1)?;
        let mut stats = RunningStats::new(4);
        let h = g.batch_norm2d(h, v[2], v[3], &mut stats, true, BN_EPSILON)?;
        let h = g.activation(h, Activation::LeakyRelu { slope: 0.2 })?;
        let h = g.conv2d(h, v[4], Some(v[5]), 1, 1)?;
        let h = g.activation(h, Activation::Tanh)?;
        let h = g.reshape(h, &[3, 32])?;
        let z = g.linear(h, v[6], v[7])?;
        g.softmax_cross_entropy(z, &labels)
    })
}

/// One-vs-rest linear SVM solved to convergence by dual coordinate descent
/// on `½‖w‖² + C·Σ max(0, 1 − y·w·[z;1])`, `z` the standardized row.
/// Returns the predicted class of each training row (ties to the lower
/// class).
pub fn exact_hinge_ovr_predict(rows: &[Vec<f64>], labels: &[usize], k: usize, c: f64) -> Vec<usize> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for j in 0..d {
        mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
        sd[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let z: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| (0..d).map(|j| (r[j] - mean[j]) / sd[j]).chain(std::iter::once(1.0)).collect())
        .collect();
    let q: Vec<f64> = z.iter().map(|zi| zi.iter().map(|v| v * v).sum()).collect();
    let mut ws = Vec::new();
    for class in 0..k {
        let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
        let mut alpha = vec![0.0; n];
        let mut w = vec![0.0; d + 1];
        for _ in 0..100_000 {
            let mut max_violation = 0.0f64;
            for i in 0..n {
                let grad = y[i] * z[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - 1.0;
                let pg = if alpha[i] <= 0.0 {
                    grad.min(0.0)
                } else if alpha[i] >= c {
                    grad.max(0.0)
                } else {
                    grad
                };
                max_violation = max_violation.max(pg.abs());
                if pg != 0.0 {
                    let new = (alpha[i] - grad / q[i]).clamp(0.0, c);
                    let delta = (new - alpha[i]) * y[i];
                    alpha[i] = new;
                    w.iter_mut().zip(&z[i]).for_each(|(wj, zj)| *wj += delta * zj);
                }
            }
            if max_violation < 1e-10 {
                break;
            }
        }
        ws.push(w);
    }
    z.iter()
        .map(|zi| {
            let scores: Vec<f64> = ws.iter().map(|w| w.iter().zip(zi).map(|(a, b)| a * b).sum()).collect();
            let mut best = 0;
            for (j, s) in scores.iter().enumerate() {
                if *s > scores[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `n` points per class around the given centers with unit Gaussian noise.
pub fn gaussian_blobs(centers: &[[f64; 2]], n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let noise = Tensor::randn(&[centers.len() * n, 2], 0.0, 1.0, seed).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        for i in 0..n {
            let e = &noise.data()[(k * n + i) * 2..][..2];
            rows.push(vec![c[0] + e[0], c[1] + e[1]]);
            labels.push(k);
        }
    }
    (rows, labels)
}
